"""Multi-label dysfluency classification toolkit.

Trains and evaluates an attention-pooled, multi-task classification head on
precomputed acoustic feature sequences, with focal/MTL losses, cross-corpus
data composition, speaker-exclusive splits, and multi-label evaluation.
"""

__version__ = "0.1.0"
