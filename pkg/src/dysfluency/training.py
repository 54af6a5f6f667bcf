"""Training regimen: adamW, linear warm-up, early stopping, best-by-dev-loss,
and grid/random hyperparameter search.

One training run is sequential and fully deterministic for a fixed seed:
epoch shuffling and dropout draw from seed-derived streams, and the best
parameters are a snapshot of the epoch with minimal dev loss.
"""

from __future__ import annotations

import csv
import dataclasses
import itertools
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import metrics as mt
from . import model as md
from .data import CorpusTable, derive_aux_labels, read_feature_file, resolve_feature_path
from .losses import LossConfig, focal_multi, mtl_loss, weighted_ce

__all__ = [
    "TrainConfig",
    "SearchSpace",
    "TrainHistory",
    "TrialResult",
    "AdamState",
    "lr_at_step",
    "init_adam_state",
    "adamw_step",
    "train",
    "evaluate_split",
    "predict_table",
    "hyperparameter_search",
    "save_run",
]


class TrainingError(RuntimeError):
    """Training aborted (non-finite loss or gradient)."""


@dataclass(frozen=True)
class TrainConfig:
    max_epochs: int = 20
    patience: int = 5
    base_lr: float = 3e-5
    batch_size: int = 8
    warmup_fraction: float = 0.10
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.01
    loss: LossConfig = field(default_factory=LossConfig)
    aux_task: str = "any_dysfluency"
    seed: int = 0
    lr_schedule: str = "linear"  # or "constant" after warm-up
    threshold: float = 0.5

    def __post_init__(self):
        if self.max_epochs < 1:
            raise ValueError(f"max_epochs must be >= 1, got {self.max_epochs}")
        if not 1 <= self.patience <= self.max_epochs:
            raise ValueError(
                f"patience must be in [1, max_epochs], got {self.patience}"
            )
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if not 0.0 <= self.warmup_fraction < 1.0:
            raise ValueError(
                f"warmup_fraction must be in [0,1), got {self.warmup_fraction}"
            )
        if self.base_lr <= 0:
            raise ValueError(f"base_lr must be positive, got {self.base_lr}")
        if self.lr_schedule not in ("linear", "constant"):
            raise ValueError(f"lr_schedule must be linear or constant, got {self.lr_schedule}")
        if not 0.0 <= self.threshold <= 1.0:
            raise ValueError(f"threshold must be in [0,1], got {self.threshold}")


@dataclass(frozen=True)
class SearchSpace:
    lrs: tuple[float, ...] = (3e-5,)
    batch_sizes: tuple[int, ...] = (8, 32, 64, 128, 256)
    w_mains: tuple[float, ...] = tuple(round(0.85 + 0.01 * i, 2) for i in range(11))
    gammas: tuple[float, ...] = (1.0, 2.0, 3.0)
    alphas: tuple[float, ...] = tuple(round(0.1 * i, 1) for i in range(1, 10))
    aux_tasks: tuple[str, ...] = ("any_dysfluency",)

    def __post_init__(self):
        for name in ("lrs", "batch_sizes", "w_mains", "gammas", "alphas", "aux_tasks"):
            if not getattr(self, name):
                raise ValueError(f"search space field {name} is empty")

    def size(self) -> int:
        return (
            len(self.lrs)
            * len(self.batch_sizes)
            * len(self.w_mains)
            * len(self.gammas)
            * len(self.alphas)
            * len(self.aux_tasks)
        )

    def enumerate(self):
        return itertools.product(
            self.lrs, self.batch_sizes, self.w_mains, self.gammas, self.alphas, self.aux_tasks
        )


@dataclass
class TrainHistory:
    train_loss: list[float] = field(default_factory=list)
    dev_loss: list[float] = field(default_factory=list)
    dev_macro_f1: list[float] = field(default_factory=list)
    best_epoch: int = 0  # 1-based
    stop_reason: str = ""

    @property
    def best_dev_loss(self) -> float:
        return self.dev_loss[self.best_epoch - 1]

    @property
    def epochs(self) -> int:
        return len(self.dev_loss)


@dataclass(frozen=True)
class TrialResult:
    index: int
    lr: float
    batch_size: int
    w_main: float
    gamma: float
    alpha: float
    aux_task: str
    dev_loss: float
    dev_macro_f1: float
    best_epoch: int


def lr_at_step(
    step: int,
    total_steps: int,
    base_lr: float,
    warmup_fraction: float,
    schedule: str = "linear",
) -> float:
    """Linear ramp 0 -> base_lr over the warm-up steps, then linear decay to 0
    at total_steps (or constant at base_lr with schedule="constant")."""
    if total_steps < 1:
        raise ValueError(f"total_steps must be >= 1, got {total_steps}")
    if not 0 <= step <= total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps}]")
    warmup_steps = math.ceil(warmup_fraction * total_steps)
    if warmup_steps > 0 and step <= warmup_steps:
        return base_lr * step / warmup_steps
    if schedule == "constant":
        return base_lr
    return base_lr * (total_steps - step) / (total_steps - warmup_steps)


@dataclass
class AdamState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int = 0


def init_adam_state(params: md.HeadParams) -> AdamState:
    return AdamState(
        m={name: np.zeros(mat.shape) for name, mat in params.named()},
        v={name: np.zeros(mat.shape) for name, mat in params.named()},
    )


def adamw_step(
    params: md.HeadParams,
    grads: dict[str, np.ndarray],
    state: AdamState,
    lr: float,
    cfg: TrainConfig,
) -> None:
    """One decoupled-weight-decay update, in place.

    Decay multiplies the weights by (1 - lr * wd) directly; it never touches
    the gradient or the moments.
    """
    state.step += 1
    t = state.step
    bc1 = 1.0 - cfg.beta1**t
    bc2 = 1.0 - cfg.beta2**t
    for name, mat in params.named():
        g = grads[name]
        if g.shape != mat.shape:
            raise ValueError(f"{name}: gradient shape {g.shape} != param {mat.shape}")
        if not np.isfinite(g).all():
            raise TrainingError(f"non-finite gradient for {name}")
        m = state.m[name]
        v = state.v[name]
        m *= cfg.beta1
        m += (1.0 - cfg.beta1) * g
        v *= cfg.beta2
        v += (1.0 - cfg.beta2) * g * g
        m_hat = m / bc1
        v_hat = v / bc2
        if cfg.weight_decay != 0.0:
            mat.data *= 1.0 - lr * cfg.weight_decay
        mat.data -= lr * m_hat / (np.sqrt(v_hat) + cfg.eps)


def _resolve_aux_weights(
    loss_cfg: LossConfig, aux_labels: list[int | None]
) -> tuple[float, float]:
    """Inverse class frequency normalized to mean 1, unless explicitly set."""
    if loss_cfg.aux_class_weights is not None:
        return loss_cfg.aux_class_weights
    known = [a for a in aux_labels if a is not None]
    counts = [known.count(0), known.count(1)]
    if min(counts) == 0:
        return (1.0, 1.0)
    raw = [len(known) / (2.0 * c) for c in counts]
    mean = (raw[0] + raw[1]) / 2.0
    return (raw[0] / mean, raw[1] / mean)


def _load_clips(
    table: CorpusTable, head_cfg: md.HeadConfig, aux_task: str
) -> tuple[list[np.ndarray], list[np.ndarray], list[int | None], int]:
    if len(table) == 0:
        raise ValueError("table is empty")
    if len(table.vocabulary) != head_cfg.num_classes:
        raise ValueError(
            f"head num_classes {head_cfg.num_classes} does not match "
            f"{len(table.vocabulary)}-class vocabulary {table.vocabulary.name}"
        )
    aux_labels, excluded = derive_aux_labels(table, aux_task)
    features = []
    for rec in table.records:
        path = resolve_feature_path(table, rec)
        try:
            features.append(read_feature_file(path, expect_dim=head_cfg.feature_dim))
        except (OSError, ValueError) as exc:
            raise ValueError(f"clip {rec.clip_id!r}: {exc}") from exc
    labels = [np.array(rec.labels, dtype=np.int64) for rec in table.records]
    return features, labels, aux_labels, excluded


def evaluate_split(
    params: md.HeadParams,
    features: list[np.ndarray],
    labels: list[np.ndarray],
    aux_labels: list[int | None],
    loss_cfg: LossConfig,
    aux_weights: tuple[float, float],
    threshold: float,
) -> tuple[float, float, list[tuple[np.ndarray, np.ndarray]]]:
    """Mean MTL loss, macro F1 and (probs, preds) per clip, dropout off."""
    losses = []
    outputs = []
    pairs = []
    for i, (h, y) in enumerate(zip(features, labels)):
        out = md.forward(params, h)
        l_main = focal_multi(out.main_probs, y, loss_cfg.alpha, loss_cfg.gamma)
        if aux_labels[i] is None:
            losses.append(loss_cfg.w_main * l_main)
        else:
            l_aux = weighted_ce(out.aux_probs, aux_labels[i], aux_weights)
            losses.append(mtl_loss(l_main, l_aux, loss_cfg.w_main))
        preds = md.predict(out.main_probs, threshold)
        outputs.append((out.main_probs, preds))
        pairs.append(
            mt.EvalPair(
                clip_id=str(i), reference=tuple(int(v) for v in y),
                prediction=tuple(int(v) for v in preds),
            )
        )
    return float(np.mean(losses)), mt.macro_f1(pairs), outputs


def train(
    train_table: CorpusTable,
    dev_table: CorpusTable,
    head_cfg: md.HeadConfig,
    train_cfg: TrainConfig,
) -> tuple[md.HeadParams, TrainHistory]:
    """Run the full regimen and return the best-epoch parameters and history."""
    if train_table.vocabulary.classes != dev_table.vocabulary.classes:
        raise ValueError(
            f"train vocabulary {train_table.vocabulary.name} != "
            f"dev vocabulary {dev_table.vocabulary.name}"
        )
    features, labels, aux_labels, _ = _load_clips(train_table, head_cfg, train_cfg.aux_task)
    dev_features, dev_labels, dev_aux, _ = _load_clips(dev_table, head_cfg, train_cfg.aux_task)
    loss_cfg = train_cfg.loss
    aux_weights = _resolve_aux_weights(loss_cfg, aux_labels)
    batch_loss_cfg = dataclasses.replace(loss_cfg, aux_class_weights=aux_weights)

    params = md.init_head(head_cfg)
    state = init_adam_state(params)
    n = len(features)
    steps_per_epoch = math.ceil(n / train_cfg.batch_size)
    total_steps = steps_per_epoch * train_cfg.max_epochs

    history = TrainHistory()
    best_params = params.copy()
    best_loss = math.inf
    epochs_since_best = 0
    global_step = 0

    for epoch in range(1, train_cfg.max_epochs + 1):
        shuffle_rng = np.random.default_rng([train_cfg.seed, 101, epoch])
        dropout_rng = np.random.default_rng([train_cfg.seed, 202, epoch])
        order = shuffle_rng.permutation(n)
        epoch_loss = 0.0
        for start in range(0, n, train_cfg.batch_size):
            batch_idx = order[start : start + train_cfg.batch_size]
            batch = [(features[i], labels[i], aux_labels[i]) for i in batch_idx]
            global_step += 1
            lr = lr_at_step(
                global_step,
                total_steps,
                train_cfg.base_lr,
                train_cfg.warmup_fraction,
                train_cfg.lr_schedule,
            )
            try:
                loss, grads = md.forward_backward(
                    params,
                    batch,
                    batch_loss_cfg,
                    dropout_rng=dropout_rng if head_cfg.dropout_rate > 0 else None,
                )
            except Exception as exc:
                raise TrainingError(
                    f"epoch {epoch} step {global_step}: {exc}"
                ) from exc
            if not math.isfinite(loss):
                raise TrainingError(f"epoch {epoch} step {global_step}: non-finite loss")
            epoch_loss += loss * len(batch)
            adamw_step(params, grads, state, lr, train_cfg)

        dev_loss, dev_f1, _ = evaluate_split(
            params, dev_features, dev_labels, dev_aux, loss_cfg, aux_weights,
            train_cfg.threshold,
        )
        history.train_loss.append(epoch_loss / n)
        history.dev_loss.append(dev_loss)
        history.dev_macro_f1.append(dev_f1)

        if dev_loss < best_loss:
            best_loss = dev_loss
            best_params = params.copy()
            history.best_epoch = epoch
            epochs_since_best = 0
        else:
            epochs_since_best += 1
            if epochs_since_best >= train_cfg.patience:
                history.stop_reason = "patience"
                break
    if not history.stop_reason:
        history.stop_reason = "max_epochs"
    return best_params, history


def predict_table(
    params: md.HeadParams, table: CorpusTable, threshold: float = 0.5
) -> list[tuple[str, tuple[float, ...], tuple[int, ...]]]:
    """Per-clip (clip_id, probs, preds) rows in manifest order, dropout off."""
    rows = []
    for rec in table.records:
        h = read_feature_file(
            resolve_feature_path(table, rec), expect_dim=params.cfg.feature_dim
        )
        out = md.forward(params, h)
        preds = md.predict(out.main_probs, threshold)
        rows.append(
            (
                rec.clip_id,
                tuple(float(p) for p in out.main_probs),
                tuple(int(v) for v in preds),
            )
        )
    return rows


def hyperparameter_search(
    train_table: CorpusTable,
    dev_table: CorpusTable,
    head_cfg: md.HeadConfig,
    base_cfg: TrainConfig,
    space: SearchSpace,
    budget: int,
    mode: str = "grid",
    seed: int = 0,
) -> tuple[TrainConfig, list[TrialResult]]:
    """Evaluate configurations from the space; best = minimal dev loss,
    ties broken by higher dev macro F1, then first seen.

    Grid mode is exhaustive when the budget permits; otherwise (and always in
    random mode) a seeded uniform sample without replacement is used.
    """
    if budget < 1:
        raise ValueError(f"budget must be >= 1, got {budget}")
    if mode not in ("grid", "random"):
        raise ValueError(f"mode must be grid or random, got {mode!r}")
    candidates = list(space.enumerate())
    if mode == "grid" and budget >= len(candidates):
        chosen = candidates
    else:
        rng = np.random.default_rng(seed)
        picks = rng.choice(len(candidates), size=min(budget, len(candidates)), replace=False)
        chosen = [candidates[i] for i in picks]

    trials = []
    best: tuple[float, float, int] | None = None
    best_cfg = None
    for index, (lr, bs, w_main, gamma, alpha, aux_task) in enumerate(chosen):
        cfg = dataclasses.replace(
            base_cfg,
            base_lr=lr,
            batch_size=bs,
            aux_task=aux_task,
            loss=dataclasses.replace(
                base_cfg.loss, w_main=w_main, gamma=gamma, alpha=alpha
            ),
        )
        _, history = train(train_table, dev_table, head_cfg, cfg)
        result = TrialResult(
            index=index,
            lr=lr,
            batch_size=bs,
            w_main=w_main,
            gamma=gamma,
            alpha=alpha,
            aux_task=aux_task,
            dev_loss=history.best_dev_loss,
            dev_macro_f1=history.dev_macro_f1[history.best_epoch - 1],
            best_epoch=history.best_epoch,
        )
        trials.append(result)
        key = (result.dev_loss, -result.dev_macro_f1, index)
        if best is None or key < best:
            best = key
            best_cfg = cfg
    return best_cfg, trials


def save_run(
    out_dir,
    head_cfg: md.HeadConfig,
    train_cfg: TrainConfig,
    params: md.HeadParams,
    history: TrainHistory,
    extra: dict | None = None,
) -> Path:
    """Emit the run directory: config snapshot, per-epoch history CSV, checkpoint."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    snapshot = {
        "head": dataclasses.asdict(head_cfg),
        "train": dataclasses.asdict(train_cfg),
        "best_epoch": history.best_epoch,
        "stop_reason": history.stop_reason,
        "epochs_run": history.epochs,
    }
    if extra:
        snapshot.update(extra)
    with open(out_dir / "config.json", "w", encoding="utf-8") as fh:
        json.dump(snapshot, fh, indent=2, sort_keys=True)
        fh.write("\n")
    with open(out_dir / "history.csv", "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["epoch", "train_loss", "dev_loss", "dev_macro_f1"])
        for i in range(history.epochs):
            writer.writerow(
                [
                    i + 1,
                    repr(history.train_loss[i]),
                    repr(history.dev_loss[i]),
                    repr(history.dev_macro_f1[i]),
                ]
            )
    md.save_checkpoint(out_dir / "best.dysh", params)
    return out_dir
