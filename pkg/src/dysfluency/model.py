"""The modified classification head.

Attention pooling over a t x d feature sequence, a tanh projector, a sigmoid
main branch over C classes, and a 2-way softmax auxiliary branch. The query
is the (optionally projected) temporal mean of the sequence; keys and values
are per-frame projections, so the attention distribution over frames is
nontrivial. A mean-pooling mode replaces the attention pooling for ablations.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, replace

import numpy as np

from . import numerics as nm
from . import losses as ls

CHECKPOINT_MAGIC = b"DYSH"
CHECKPOINT_VERSION = 1

# serialization order of the weight matrices
PARAM_NAMES = (
    "w_q",
    "w_k",
    "w_v",
    "w_proj",
    "b_proj",
    "w_main",
    "b_main",
    "w_aux",
    "b_aux",
)

POOLING_MODES = ("attention", "mean")


class CheckpointError(ValueError):
    """A head checkpoint file is malformed."""


@dataclass(frozen=True)
class HeadConfig:
    feature_dim: int = 1024
    projector_dim: int = 256
    num_classes: int = 7
    aux_outputs: int = 2
    dropout_rate: float = 0.1
    seed: int = 0
    pooling: str = "attention"
    query_projection: bool = True

    def __post_init__(self):
        if min(self.feature_dim, self.projector_dim, self.num_classes) < 1:
            raise ValueError("feature_dim, projector_dim and num_classes must be >= 1")
        if self.aux_outputs != 2:
            raise ValueError(f"aux_outputs is fixed at 2, got {self.aux_outputs}")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ValueError(f"dropout_rate must be in [0,1), got {self.dropout_rate}")
        if self.pooling not in POOLING_MODES:
            raise ValueError(f"pooling must be one of {POOLING_MODES}, got {self.pooling!r}")
        if self.seed < 0:
            raise ValueError(f"seed must be >= 0, got {self.seed}")


@dataclass
class HeadParams:
    """All trainable parameters, as gradient-carrying matrices."""

    cfg: HeadConfig
    w_q: nm.Matrix
    w_k: nm.Matrix
    w_v: nm.Matrix
    w_proj: nm.Matrix
    b_proj: nm.Matrix
    w_main: nm.Matrix
    b_main: nm.Matrix
    w_aux: nm.Matrix
    b_aux: nm.Matrix

    def named(self) -> list[tuple[str, nm.Matrix]]:
        return [(name, getattr(self, name)) for name in PARAM_NAMES]

    def zero_grads(self) -> None:
        for _, m in self.named():
            m.zero_grad()

    def copy(self) -> "HeadParams":
        mats = {
            name: nm.Matrix(m.data, requires_grad=True) for name, m in self.named()
        }
        return HeadParams(cfg=self.cfg, **mats)

    def to_vector(self) -> np.ndarray:
        return np.concatenate([m.data.ravel() for _, m in self.named()])

    @classmethod
    def from_vector(cls, cfg: HeadConfig, vec: np.ndarray) -> "HeadParams":
        shapes = param_shapes(cfg)
        mats = {}
        offset = 0
        for name in PARAM_NAMES:
            r, c = shapes[name]
            n = r * c
            mats[name] = nm.Matrix(vec[offset : offset + n].reshape(r, c), requires_grad=True)
            offset += n
        if offset != vec.size:
            raise ValueError(f"vector length {vec.size} does not match config ({offset})")
        return cls(cfg=cfg, **mats)


@dataclass(frozen=True)
class ForwardOutput:
    main_probs: np.ndarray  # (C,)
    aux_probs: np.ndarray  # (2,)
    attn_weights: np.ndarray  # (t,)


def param_shapes(cfg: HeadConfig) -> dict[str, tuple[int, int]]:
    d, p, c = cfg.feature_dim, cfg.projector_dim, cfg.num_classes
    return {
        "w_q": (d, d),
        "w_k": (d, d),
        "w_v": (d, d),
        "w_proj": (d, p),
        "b_proj": (1, p),
        "w_main": (p, c),
        "b_main": (1, c),
        "w_aux": (p, cfg.aux_outputs),
        "b_aux": (1, cfg.aux_outputs),
    }


def init_head(cfg: HeadConfig) -> HeadParams:
    """Uniform(-1/sqrt(fan_in), +1/sqrt(fan_in)) weights, zero biases, seeded."""
    rng = np.random.default_rng(cfg.seed)
    mats = {}
    for name, (rows, cols) in param_shapes(cfg).items():
        if name.startswith("b_"):
            mats[name] = nm.Matrix(np.zeros((rows, cols)), requires_grad=True)
        else:
            bound = 1.0 / np.sqrt(rows)
            mats[name] = nm.Matrix(
                rng.uniform(-bound, bound, size=(rows, cols)), requires_grad=True
            )
    return HeadParams(cfg=cfg, **mats)


def _check_features(cfg: HeadConfig, h: np.ndarray) -> None:
    if h.ndim != 2:
        raise nm.ShapeError(f"feature sequence must be 2-D, got shape {h.shape}")
    if h.shape[1] != cfg.feature_dim:
        raise nm.ShapeError(
            f"feature width {h.shape[1]} does not match head feature_dim {cfg.feature_dim}"
        )
    if h.shape[0] < 1:
        raise nm.ShapeError("feature sequence must have at least one frame")


def _forward_nodes(
    params: HeadParams,
    h_node: nm.Matrix,
    tape: nm.Tape | None,
    dropout_mask: np.ndarray | None,
) -> tuple[nm.Matrix, nm.Matrix, nm.Matrix]:
    """Build the head graph; returns (main_probs, aux_probs, attn_weights) nodes."""
    cfg = params.cfg
    t = h_node.rows
    q_bar = nm.mean_over_rows(h_node, tape)
    if cfg.pooling == "attention":
        q = nm.matmul(q_bar, params.w_q, tape) if cfg.query_projection else q_bar
        k = nm.matmul(h_node, params.w_k, tape)
        v = nm.matmul(h_node, params.w_v, tape)
        context, attn = nm.scaled_dot_product_attention(q, k, v, tape)
    else:
        context = q_bar
        attn = nm.Matrix(np.full((1, t), 1.0 / t))
    hidden = nm.tanh(
        nm.add(nm.matmul(context, params.w_proj, tape), params.b_proj, tape), tape
    )
    if dropout_mask is not None:
        hidden = nm.hadamard(hidden, nm.Matrix(dropout_mask), tape)
    main_probs = nm.sigmoid(
        nm.add(nm.matmul(hidden, params.w_main, tape), params.b_main, tape), tape
    )
    aux_probs = nm.softmax_row(
        nm.add(nm.matmul(hidden, params.w_aux, tape), params.b_aux, tape), tape
    )
    return main_probs, aux_probs, attn


def _dropout_mask(cfg: HeadConfig, rng: np.random.Generator) -> np.ndarray:
    keep = 1.0 - cfg.dropout_rate
    return (rng.random((1, cfg.projector_dim)) < keep).astype(np.float64) / keep


def forward(
    params: HeadParams,
    features: np.ndarray,
    train_mode: bool = False,
    dropout_rng: np.random.Generator | None = None,
) -> ForwardOutput:
    """Run the head on one feature sequence."""
    cfg = params.cfg
    features = np.asarray(features, dtype=np.float64)
    _check_features(cfg, features)
    mask = None
    if train_mode and cfg.dropout_rate > 0.0:
        if dropout_rng is None:
            raise ValueError("train_mode with dropout_rate > 0 needs a dropout_rng")
        mask = _dropout_mask(cfg, dropout_rng)
    main, aux, attn = _forward_nodes(params, nm.Matrix(features), None, mask)
    return ForwardOutput(
        main_probs=main.data[0].copy(),
        aux_probs=aux.data[0].copy(),
        attn_weights=attn.data[0].copy(),
    )


def predict(main_probs, threshold: float = 0.5) -> np.ndarray:
    """Threshold per-class probabilities into a multi-hot label vector."""
    if not 0.0 <= threshold <= 1.0:
        raise ValueError(f"threshold must be in [0,1], got {threshold}")
    probs = np.asarray(main_probs, dtype=np.float64)
    if ((probs < 0) | (probs > 1)).any():
        raise ValueError("probabilities must be in [0,1]")
    return (probs >= threshold).astype(np.int64)


def forward_backward(
    params: HeadParams,
    batch: list[tuple[np.ndarray, np.ndarray, int | None]],
    loss_cfg: ls.LossConfig,
    dropout_rng: np.random.Generator | None = None,
) -> tuple[float, dict[str, np.ndarray]]:
    """Mean MTL loss over a batch of (features, labels, aux_label) and its gradients.

    Clips whose aux_label is None contribute only the w_main-weighted main
    term. Dropout is active iff dropout_rng is given and the config rate > 0.
    """
    if not batch:
        raise ValueError("batch must be nonempty")
    cfg = params.cfg
    aux_weights = loss_cfg.aux_class_weights or (1.0, 1.0)
    params.zero_grads()
    tape = nm.Tape()
    clip_losses = []
    for features, labels, aux_label in batch:
        features = np.asarray(features, dtype=np.float64)
        _check_features(cfg, features)
        labels = np.asarray(labels)
        if labels.shape != (cfg.num_classes,):
            raise ValueError(
                f"label width {labels.shape} does not match num_classes {cfg.num_classes}"
            )
        mask = None
        if dropout_rng is not None and cfg.dropout_rate > 0.0:
            mask = _dropout_mask(cfg, dropout_rng)
        main, aux, _ = _forward_nodes(params, nm.Matrix(features), tape, mask)
        l_main = ls.focal_multi_node(tape, main, labels, loss_cfg.alpha, loss_cfg.gamma)
        if aux_label is None:
            clip_losses.append(nm.affine(l_main, loss_cfg.w_main, 0.0, tape))
        else:
            l_aux = ls.weighted_ce_node(tape, aux, int(aux_label), aux_weights)
            clip_losses.append(ls.mtl_node(tape, l_main, l_aux, loss_cfg.w_main))
    total = clip_losses[0]
    for node in clip_losses[1:]:
        total = nm.add(total, node, tape)
    loss = nm.affine(total, 1.0 / len(batch), 0.0, tape)
    tape.backward(loss)
    grads = {
        name: (m.grad.copy() if m.grad is not None else np.zeros(m.shape))
        for name, m in params.named()
    }
    return float(loss.data[0, 0]), grads


# --- checkpoint I/O ---------------------------------------------------------

_HEADER = struct.Struct("<4sHHIIIIdQBBH")  # magic, version, reserved, d, p, C, aux,
# dropout, seed, pooling, query_projection, pad


def save_checkpoint(path, params: HeadParams) -> None:
    cfg = params.cfg
    with open(path, "wb") as fh:
        fh.write(
            _HEADER.pack(
                CHECKPOINT_MAGIC,
                CHECKPOINT_VERSION,
                0,
                cfg.feature_dim,
                cfg.projector_dim,
                cfg.num_classes,
                cfg.aux_outputs,
                cfg.dropout_rate,
                cfg.seed,
                POOLING_MODES.index(cfg.pooling),
                int(cfg.query_projection),
                0,
            )
        )
        for _, m in params.named():
            fh.write(struct.pack("<II", m.rows, m.cols))
            fh.write(np.ascontiguousarray(m.data, dtype="<f8").tobytes())


def load_checkpoint(path) -> HeadParams:
    with open(path, "rb") as fh:
        header = fh.read(_HEADER.size)
        if len(header) != _HEADER.size:
            raise CheckpointError(f"{path}: truncated header")
        (magic, version, _, d, p, c, aux, dropout, seed, pooling, query_proj, _) = (
            _HEADER.unpack(header)
        )
        if magic != CHECKPOINT_MAGIC:
            raise CheckpointError(f"{path}: bad magic {magic!r}")
        if version != CHECKPOINT_VERSION:
            raise CheckpointError(f"{path}: unsupported version {version}")
        if pooling >= len(POOLING_MODES):
            raise CheckpointError(f"{path}: unknown pooling code {pooling}")
        cfg = HeadConfig(
            feature_dim=d,
            projector_dim=p,
            num_classes=c,
            aux_outputs=aux,
            dropout_rate=dropout,
            seed=seed,
            pooling=POOLING_MODES[pooling],
            query_projection=bool(query_proj),
        )
        shapes = param_shapes(cfg)
        mats = {}
        for name in PARAM_NAMES:
            dims = fh.read(8)
            if len(dims) != 8:
                raise CheckpointError(f"{path}: truncated at {name} dimensions")
            rows, cols = struct.unpack("<II", dims)
            if (rows, cols) != shapes[name]:
                raise CheckpointError(
                    f"{path}: {name} has shape {(rows, cols)}, expected {shapes[name]}"
                )
            payload = fh.read(rows * cols * 8)
            if len(payload) != rows * cols * 8:
                raise CheckpointError(f"{path}: truncated at {name} payload")
            arr = np.frombuffer(payload, dtype="<f8").reshape(rows, cols)
            mats[name] = nm.Matrix(arr, requires_grad=True)
        if fh.read(1):
            raise CheckpointError(f"{path}: trailing bytes")
    return HeadParams(cfg=cfg, **mats)


def with_pooling(params: HeadParams, pooling: str) -> HeadParams:
    """Same parameters under a different pooling mode (for ablations)."""
    out = params.copy()
    out.cfg = replace(params.cfg, pooling=pooling)
    return out
