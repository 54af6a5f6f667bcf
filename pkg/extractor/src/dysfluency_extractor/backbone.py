"""Speech encoder registry.

"en" and "de" resolve to large wav2vec 2.0 checkpoints fine-tuned for English
(LibriSpeech) and German (Common Voice) ASR; loading them needs a model cache
or network access. "test" builds a randomly initialized encoder from a config
with the same convolutional front end and a 1024-dim hidden state, so frame
arithmetic and file layout can be exercised fully offline; it is seeded and
deterministic.
"""

from __future__ import annotations

import functools

import torch
from transformers import Wav2Vec2Config, Wav2Vec2Model

MODEL_REGISTRY = {
    "en": "facebook/wav2vec2-large-960h-lv60-self",
    "de": "jonatasgrosman/wav2vec2-large-xlsr-53-german",
}

HIDDEN_DIM = 1024


class BackboneError(RuntimeError):
    """The requested encoder cannot be loaded."""


def _test_config() -> Wav2Vec2Config:
    # standard large-model conv stack (stride 320 overall, 20 ms frames),
    # slimmed to 2 transformer layers for speed
    return Wav2Vec2Config(
        hidden_size=HIDDEN_DIM,
        num_hidden_layers=2,
        num_attention_heads=16,
        intermediate_size=2048,
    )


@functools.lru_cache(maxsize=2)
def load_backbone(name: str) -> Wav2Vec2Model:
    if name == "test":
        torch.manual_seed(0)
        model = Wav2Vec2Model(_test_config())
    elif name in MODEL_REGISTRY:
        try:
            model = Wav2Vec2Model.from_pretrained(MODEL_REGISTRY[name])
        except Exception as exc:
            raise BackboneError(
                f"cannot load {MODEL_REGISTRY[name]!r} (cache or network needed): {exc}"
            ) from exc
    else:
        model = None
    if model is None:
        raise BackboneError(
            f"unknown model {name!r}; expected one of {sorted(MODEL_REGISTRY)} or 'test'"
        )
    model.eval()
    return model


def num_layers(model: Wav2Vec2Model) -> int:
    return model.config.num_hidden_layers


def encode(model: Wav2Vec2Model, samples, layer: int | None = None):
    """Hidden states of one transformer layer as a (t, hidden) float32 array.

    layer=None or the layer count selects the last hidden state; layer=0 is
    the convolutional front end's output before any transformer block.
    """
    inputs = torch.as_tensor(samples, dtype=torch.float32).reshape(1, -1)
    with torch.no_grad():
        if layer is None or layer == num_layers(model):
            hidden = model(inputs).last_hidden_state
        else:
            if not 0 <= layer <= num_layers(model):
                raise ValueError(
                    f"layer {layer} out of range [0, {num_layers(model)}]"
                )
            hidden = model(inputs, output_hidden_states=True).hidden_states[layer]
    return hidden[0].numpy()
