"""Bridges real audio corpora to the dysfluency toolkit.

Runs a pretrained speech encoder over 16 kHz mono clips and exports the
hidden states of one transformer layer (the last, by default) as binary
"DYSF" feature files plus a toolkit-format manifest.
"""

__version__ = "0.1.0"
