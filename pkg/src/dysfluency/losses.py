"""Focal loss, its multi-label mean, weighted cross-entropy, and the MTL sum.

Each loss exists twice: as a plain scalar function of Python floats (the
reference form used for evaluation and in tests) and as a graph builder over
:mod:`dysfluency.numerics` matrices (the form trained through). Both apply
the same probability clamp so their values agree to rounding.

The alpha convention: alpha weights positive targets, (1 - alpha) weights
negative ones, matching the focal-loss formulation this extends.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import numerics as nm

CLAMP_EPS = 1e-12

__all__ = [
    "CLAMP_EPS",
    "LossConfig",
    "focal_term",
    "focal_multi",
    "weighted_ce",
    "mtl_loss",
    "focal_multi_node",
    "weighted_ce_node",
    "mtl_node",
]


@dataclass(frozen=True)
class LossConfig:
    """Loss hyperparameters; defaults are the best-performing values."""

    alpha: float = 0.7
    gamma: float = 3.0
    w_main: float = 0.9
    # None: derive from the training split (inverse class frequency, mean 1).
    aux_class_weights: tuple[float, float] | None = None

    def __post_init__(self):
        if not 0.0 < self.alpha < 1.0:
            raise ValueError(f"alpha must be in (0,1), got {self.alpha}")
        if self.gamma < 0.0:
            raise ValueError(f"gamma must be >= 0, got {self.gamma}")
        if not 0.0 <= self.w_main <= 1.0:
            raise ValueError(f"w_main must be in [0,1], got {self.w_main}")
        if self.aux_class_weights is not None:
            w = self.aux_class_weights
            if len(w) != 2 or any(x <= 0 for x in w):
                raise ValueError(f"aux_class_weights must be 2 positive reals, got {w}")


def _clamp_prob(p: float) -> float:
    return min(max(p, CLAMP_EPS), 1.0 - CLAMP_EPS)


def focal_term(p: float, y: int, alpha: float, gamma: float) -> float:
    """-alpha_t * (1 - p_t)^gamma * ln(p_t) for one class.

    p_t = p if y=1 else 1-p; alpha_t = alpha if y=1 else 1-alpha.
    """
    if y not in (0, 1):
        raise ValueError(f"target must be 0 or 1, got {y}")
    if not 0.0 <= p <= 1.0:
        raise ValueError(f"probability must be in [0,1], got {p}")
    if not 0.0 <= alpha <= 1.0:
        raise ValueError(f"alpha must be in [0,1], got {alpha}")
    if gamma < 0.0:
        raise ValueError(f"gamma must be >= 0, got {gamma}")
    p = _clamp_prob(p)
    p_t = p if y == 1 else 1.0 - p
    alpha_t = alpha if y == 1 else 1.0 - alpha
    return -alpha_t * (1.0 - p_t) ** gamma * math.log(p_t)


def focal_multi(probs, targets, alpha: float, gamma: float) -> float:
    """Mean of the per-class focal terms."""
    probs = list(probs)
    targets = list(targets)
    if len(probs) != len(targets):
        raise ValueError(
            f"probs width {len(probs)} does not match targets width {len(targets)}"
        )
    if not probs:
        raise ValueError("focal_multi needs at least one class")
    terms = [focal_term(p, t, alpha, gamma) for p, t in zip(probs, targets)]
    return sum(terms) / len(terms)


def weighted_ce(aux_probs, target: int, weights) -> float:
    """-weights[target] * ln(aux_probs[target]) over a 2-way probability vector."""
    aux_probs = list(aux_probs)
    weights = list(weights)
    if len(aux_probs) != 2 or len(weights) != 2:
        raise ValueError("weighted_ce expects 2 probabilities and 2 weights")
    if target not in (0, 1):
        raise ValueError(f"target must be 0 or 1, got {target}")
    if any(not 0.0 <= p <= 1.0 for p in aux_probs) or abs(sum(aux_probs) - 1.0) > 1e-6:
        raise ValueError(f"aux_probs is not a probability vector: {aux_probs}")
    if any(w <= 0 for w in weights):
        raise ValueError(f"weights must be positive, got {weights}")
    return -weights[target] * math.log(_clamp_prob(aux_probs[target]))


def mtl_loss(l_main: float, l_aux: float, w_main: float) -> float:
    """w_main * l_main + (1 - w_main) * l_aux."""
    if l_main < 0 or l_aux < 0:
        raise ValueError(f"losses must be >= 0, got {l_main}, {l_aux}")
    if not 0.0 <= w_main <= 1.0:
        raise ValueError(f"w_main must be in [0,1], got {w_main}")
    return w_main * l_main + (1.0 - w_main) * l_aux


# --- graph builders -------------------------------------------------------


def focal_multi_node(
    tape: nm.Tape, probs: nm.Matrix, targets, alpha: float, gamma: float
) -> nm.Matrix:
    """Tape version of :func:`focal_multi` over a 1xC probability row."""
    y = np.asarray(targets, dtype=np.float64).reshape(1, -1)
    if probs.shape != y.shape:
        raise ValueError(f"probs shape {probs.shape} does not match targets {y.shape}")
    y_node = nm.Matrix(y)
    one_minus_y = nm.Matrix(1.0 - y)
    alpha_t = nm.Matrix(alpha * y + (1.0 - alpha) * (1.0 - y))
    # p_t = y*p + (1-y)*(1-p)
    p_t = nm.add(
        nm.hadamard(y_node, probs, tape),
        nm.hadamard(one_minus_y, nm.affine(probs, -1.0, 1.0, tape), tape),
        tape,
    )
    p_t = nm.clamp(p_t, CLAMP_EPS, 1.0 - CLAMP_EPS, tape)
    modulator = nm.powf(nm.affine(p_t, -1.0, 1.0, tape), gamma, tape)
    terms = nm.affine(
        nm.hadamard(alpha_t, nm.hadamard(modulator, nm.log(p_t, tape), tape), tape),
        -1.0,
        0.0,
        tape,
    )
    return nm.mean_all(terms, tape)


def weighted_ce_node(tape: nm.Tape, aux_probs: nm.Matrix, target: int, weights) -> nm.Matrix:
    """Tape version of :func:`weighted_ce` over a 1x2 probability row."""
    if aux_probs.shape != (1, 2):
        raise ValueError(f"aux_probs must be 1x2, got {aux_probs.shape}")
    if target not in (0, 1):
        raise ValueError(f"target must be 0 or 1, got {target}")
    p = nm.clamp(nm.select(aux_probs, 0, target, tape), CLAMP_EPS, 1.0 - CLAMP_EPS, tape)
    return nm.affine(nm.log(p, tape), -float(weights[target]), 0.0, tape)


def mtl_node(tape: nm.Tape, l_main: nm.Matrix, l_aux: nm.Matrix, w_main: float) -> nm.Matrix:
    """Tape version of :func:`mtl_loss` over 1x1 loss nodes."""
    return nm.add(
        nm.affine(l_main, w_main, 0.0, tape),
        nm.affine(l_aux, 1.0 - w_main, 0.0, tape),
        tape,
    )
