"""Command-line entry point.

Subcommands: synth, split, merge, train, evaluate, analyze, grad-check.
All randomness is controlled by --seed; reruns with identical inputs and
seeds reproduce identical outputs. Core options are flags; an optional
key=value config file may set defaults, with flags taking precedence.
Failures exit nonzero with a single "error: <Type>: <message>" line.
"""

from __future__ import annotations

import dataclasses
import functools
import json
import sys
from pathlib import Path

import click
import numpy as np

from . import metrics as mt
from . import model as md
from . import numerics as nm
from . import training as tr
from .data import (
    derive_aux_labels,
    filter_split,
    load_manifest,
    save_manifest,
    merge_corpora,
    speaker_exclusive_split,
    read_feature_file,
    resolve_feature_path,
    vocabulary_by_name,
)
from .losses import LossConfig
from .synth import SynthConfig, generate


def _fail(exc: BaseException) -> None:
    message = " ".join(str(exc).split())
    click.echo(f"error: {type(exc).__name__}: {message}", err=True)
    sys.exit(1)


def _command(fn):
    @functools.wraps(fn)
    def wrapper(*args, **kwargs):
        try:
            return fn(*args, **kwargs)
        except click.ClickException:
            raise
        except (ValueError, OSError, RuntimeError, KeyError) as exc:
            _fail(exc)

    return wrapper


def _parse_config_file(path: Path) -> dict[str, str]:
    """key=value lines; blank lines and #-comments ignored."""
    out: dict[str, str] = {}
    for lineno, raw in enumerate(path.read_text(encoding="utf-8").splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ValueError(f"{path}:{lineno}: expected key=value, got {line!r}")
        key, value = line.split("=", 1)
        out[key.strip()] = value.strip()
    return out


_BOOL_VALUES = {"true": True, "false": False, "1": True, "0": False}


def _coerce(value: str, kind: type):
    if kind is bool:
        try:
            return _BOOL_VALUES[value.lower()]
        except KeyError:
            raise ValueError(f"expected true/false, got {value!r}") from None
    return kind(value)


def _apply_config(defaults: dict, file_values: dict[str, str], types: dict[str, type]) -> dict:
    out = dict(defaults)
    for key, raw in file_values.items():
        if key not in types:
            raise ValueError(f"unknown config key {key!r}")
        out[key] = _coerce(raw, types[key])
    return out


@click.group()
@click.version_option(package_name="dysfluency")
def main():
    """Multi-label dysfluency classification toolkit."""


def _report_ambiguous(table) -> None:
    ambiguous = table.ambiguous_clip_ids()
    if ambiguous:
        click.echo(
            f"note: {len(ambiguous)} clips labeled No-Df plus a dysfluency", err=True
        )


_SYNTH_TYPES = {
    "num_speakers": int,
    "clips_per_speaker": int,
    "feature_dim": int,
    "frames": int,
    "vocabulary": str,
    "prototype_scale": float,
    "span_fraction": float,
    "span_compensation": float,
    "co_attenuation": float,
    "noise_std": float,
    "speaker_bias_std": float,
    "language_mix": float,
    "dataset_name": str,
}


@main.command()
@click.option("--out", "out_dir", required=True, type=click.Path(path_type=Path))
@click.option("--seed", default=0, show_default=True, type=int)
@click.option("--config", "config_path", type=click.Path(exists=True, path_type=Path))
@click.option("--speakers", type=int, help="Number of speakers.")
@click.option("--clips-per-speaker", type=int)
@click.option("--feature-dim", type=int)
@click.option("--frames", type=int)
@click.option("--vocab", type=click.Choice(["en6", "full7"]))
@click.option("--noise-std", type=float)
@click.option("--span-fraction", type=float)
@click.option("--dataset-name", type=str)
@_command
def synth(out_dir, seed, config_path, speakers, clips_per_speaker, feature_dim,
          frames, vocab, noise_std, span_fraction, dataset_name):
    """Generate a synthetic corpus (manifest.csv + features/)."""
    values: dict = {}
    if config_path is not None:
        values = _apply_config({}, _parse_config_file(config_path), _SYNTH_TYPES)
    flag_map = {
        "num_speakers": speakers,
        "clips_per_speaker": clips_per_speaker,
        "feature_dim": feature_dim,
        "frames": frames,
        "vocabulary": vocab,
        "noise_std": noise_std,
        "span_fraction": span_fraction,
        "dataset_name": dataset_name,
    }
    for key, value in flag_map.items():
        if value is not None:
            values[key] = value
    if "vocabulary" in values:
        values["vocabulary"] = vocabulary_by_name(values["vocabulary"])
    cfg = SynthConfig(seed=seed, **values)
    table = generate(cfg, out_dir)
    click.echo(f"wrote {len(table)} clips to {out_dir}")


@main.command()
@click.option("--manifest", required=True, type=click.Path(exists=True, path_type=Path))
@click.option("--ratios", default="0.8,0.1,0.1", show_default=True)
@click.option("--seed", default=0, show_default=True, type=int)
@click.option("--out", "out_dir", required=True, type=click.Path(path_type=Path))
@_command
def split(manifest, ratios, seed, out_dir):
    """Assign a speaker-exclusive train/dev/test split."""
    parts = [float(x) for x in ratios.split(",")]
    if len(parts) != 3:
        raise ValueError(f"--ratios needs 3 comma-separated numbers, got {ratios!r}")
    table = load_manifest(manifest)
    _report_ambiguous(table)
    assigned = speaker_exclusive_split(table, tuple(parts), seed=seed)
    out_dir.mkdir(parents=True, exist_ok=True)
    save_manifest(assigned, out_dir / "full.csv")
    for name in ("train", "dev", "test"):
        part = filter_split(assigned, name)
        save_manifest(part, out_dir / f"{name}.csv")
        click.echo(f"{name}: {len(part)} clips, {len(part.speakers())} speakers")


@main.command()
@click.option("--manifests", required=True, help="Comma-separated manifest paths.")
@click.option("--vocab", required=True, type=click.Choice(["en6", "full7"]))
@click.option("--out", "out_path", required=True, type=click.Path(path_type=Path))
@_command
def merge(manifests, vocab, out_path):
    """Merge corpora under a target vocabulary (ALL-EN / M-Ling-S / M-Ling)."""
    paths = [Path(p) for p in manifests.split(",") if p]
    if len(paths) < 1:
        raise ValueError("--manifests needs at least one path")
    tables = [load_manifest(p) for p in paths]
    for table in tables:
        _report_ambiguous(table)
    merged = merge_corpora(tables, vocabulary_by_name(vocab))
    out_path.parent.mkdir(parents=True, exist_ok=True)
    save_manifest(merged, out_path)
    click.echo(f"merged {len(merged)} clips from {len(tables)} corpora into {out_path}")


_TRAIN_TYPES = {
    "max_epochs": int,
    "patience": int,
    "base_lr": float,
    "batch_size": int,
    "warmup_fraction": float,
    "beta1": float,
    "beta2": float,
    "eps": float,
    "weight_decay": float,
    "aux_task": str,
    "lr_schedule": str,
    "threshold": float,
    "alpha": float,
    "gamma": float,
    "w_main": float,
    "projector_dim": int,
    "dropout_rate": float,
    "pooling": str,
    "query_projection": bool,
}


@main.command()
@click.option("--train", "train_path", required=True, type=click.Path(exists=True, path_type=Path))
@click.option("--dev", "dev_path", required=True, type=click.Path(exists=True, path_type=Path))
@click.option("--test", "test_path", type=click.Path(exists=True, path_type=Path))
@click.option("--out", "out_dir", required=True, type=click.Path(path_type=Path))
@click.option("--head-cfg", "head_cfg_path", type=click.Path(exists=True, path_type=Path))
@click.option("--train-cfg", "train_cfg_path", type=click.Path(exists=True, path_type=Path))
@click.option("--seed", default=0, show_default=True, type=int)
@click.option("--lr", type=float)
@click.option("--batch-size", type=int)
@click.option("--epochs", type=int)
@click.option("--patience", type=int)
@click.option("--alpha", type=float)
@click.option("--gamma", type=float)
@click.option("--w-main", type=float)
@click.option("--aux-task", type=click.Choice(["any_dysfluency", "gender", "language_id"]))
@click.option("--projector-dim", type=int)
@click.option("--dropout", type=float)
@click.option("--pooling", type=click.Choice(["attention", "mean"]))
@click.option("--threshold", type=float)
@_command
def train(train_path, dev_path, test_path, out_dir, head_cfg_path, train_cfg_path,
          seed, lr, batch_size, epochs, patience, alpha, gamma, w_main, aux_task,
          projector_dim, dropout, pooling, threshold):
    """Train the classification head; emits a run directory."""
    values: dict = {}
    for path in (head_cfg_path, train_cfg_path):
        if path is not None:
            values.update(_apply_config({}, _parse_config_file(path), _TRAIN_TYPES))
    flag_map = {
        "base_lr": lr,
        "batch_size": batch_size,
        "max_epochs": epochs,
        "patience": patience,
        "alpha": alpha,
        "gamma": gamma,
        "w_main": w_main,
        "aux_task": aux_task,
        "projector_dim": projector_dim,
        "dropout_rate": dropout,
        "pooling": pooling,
        "threshold": threshold,
    }
    for key, value in flag_map.items():
        if value is not None:
            values[key] = value

    train_table = load_manifest(train_path)
    dev_table = load_manifest(dev_path)
    test_table = load_manifest(test_path) if test_path is not None else None
    _report_ambiguous(train_table)

    first = train_table.records[0]
    feature_dim = read_feature_file(resolve_feature_path(train_table, first)).shape[1]
    head_cfg = md.HeadConfig(
        feature_dim=feature_dim,
        projector_dim=values.get("projector_dim", 256),
        num_classes=len(train_table.vocabulary),
        dropout_rate=values.get("dropout_rate", 0.1),
        seed=seed,
        pooling=values.get("pooling", "attention"),
        query_projection=values.get("query_projection", True),
    )
    loss_cfg = LossConfig(
        alpha=values.get("alpha", 0.7),
        gamma=values.get("gamma", 3.0),
        w_main=values.get("w_main", 0.9),
    )
    train_cfg = tr.TrainConfig(
        max_epochs=values.get("max_epochs", 20),
        patience=values.get("patience", 5),
        base_lr=values.get("base_lr", 3e-5),
        batch_size=values.get("batch_size", 8),
        warmup_fraction=values.get("warmup_fraction", 0.10),
        beta1=values.get("beta1", 0.9),
        beta2=values.get("beta2", 0.999),
        eps=values.get("eps", 1e-8),
        weight_decay=values.get("weight_decay", 0.01),
        loss=loss_cfg,
        aux_task=values.get("aux_task", "any_dysfluency"),
        seed=seed,
        lr_schedule=values.get("lr_schedule", "linear"),
        threshold=values.get("threshold", 0.5),
    )

    params, history = tr.train(train_table, dev_table, head_cfg, train_cfg)
    _, train_aux_excluded = derive_aux_labels(train_table, train_cfg.aux_task)
    _, dev_aux_excluded = derive_aux_labels(dev_table, train_cfg.aux_task)
    if train_aux_excluded or dev_aux_excluded:
        click.echo(
            f"note: {train_aux_excluded} train / {dev_aux_excluded} dev clips "
            f"excluded from the {train_cfg.aux_task} auxiliary loss",
            err=True,
        )
    extra = {
        "train_manifest": str(train_path),
        "dev_manifest": str(dev_path),
        "test_manifest": str(test_path) if test_path else None,
        "train_clips": len(train_table),
        "dev_clips": len(dev_table),
        "aux_excluded_train": train_aux_excluded,
        "aux_excluded_dev": dev_aux_excluded,
        "vocabulary": train_table.vocabulary.name,
    }
    tr.save_run(out_dir, head_cfg, train_cfg, params, history, extra=extra)
    mt.write_predictions(
        out_dir / "preds_dev.csv",
        dev_table.vocabulary,
        tr.predict_table(params, dev_table, train_cfg.threshold),
    )
    if test_table is not None:
        mt.write_predictions(
            out_dir / "preds_test.csv",
            test_table.vocabulary,
            tr.predict_table(params, test_table, train_cfg.threshold),
        )
    best_f1 = history.dev_macro_f1[history.best_epoch - 1]
    click.echo(
        f"best epoch {history.best_epoch}/{history.epochs} ({history.stop_reason}): "
        f"dev loss {history.best_dev_loss:.6f}, dev macro-F1 {best_f1:.4f}"
    )
    click.echo(f"run directory: {out_dir}")


def _echo_metrics_block(name: str, block: dict) -> None:
    def fmt(x):
        return x if isinstance(x, str) else f"{x:.2f}"

    click.echo(f"[{name}] clips={block['num_clips']} emr={fmt(block['emr'])} "
               f"pmr={fmt(block['pmr'])} hamming={fmt(block['hamming_loss'])} "
               f"macro_f1={fmt(block['macro_f1'])}")
    for cls, stat in block["per_class"].items():
        if isinstance(stat, str):
            click.echo(f"  {cls}: N/A")
        else:
            click.echo(
                f"  {cls}: P={stat['precision']:.2f} R={stat['recall']:.2f} "
                f"F1={stat['f1']:.2f}"
            )


@main.command()
@click.option("--refs", required=True, type=click.Path(exists=True, path_type=Path))
@click.option("--preds", required=True, type=click.Path(exists=True, path_type=Path))
@click.option("--report", "report_path", required=True, type=click.Path(path_type=Path))
@click.option("--min-count", default=50, show_default=True, type=int)
@click.option("--include-mod/--exclude-mod", default=True, show_default=True,
              help="Count Mod as dysfluency-relevant for subsetting.")
@click.option("--pmr-include-empty", is_flag=True,
              help="Include clips with no positive reference labels in PMR.")
@_command
def evaluate(refs, preds, report_path, min_count, include_mod, pmr_include_empty):
    """Full evaluation report (per-class P/R/F1, EMR, PMR, HL, subset, pairs)."""
    refs_table = load_manifest(refs)
    pred_rows = mt.read_predictions(preds, refs_table.vocabulary)
    pairs = mt.make_eval_pairs(refs_table, pred_rows)
    report = mt.build_report(
        pairs,
        refs_table.vocabulary,
        min_count=min_count,
        include_mod=include_mod,
        pmr_include_empty=pmr_include_empty,
    )
    report_path.parent.mkdir(parents=True, exist_ok=True)
    with open(report_path, "w", encoding="utf-8") as fh:
        json.dump(report, fh, indent=2, sort_keys=True)
        fh.write("\n")
    _echo_metrics_block("test", report["full"])
    _echo_metrics_block("test-multi", report["multi_label_subset"])
    click.echo(f"report: {report_path}")


@main.command()
@click.option("--refs", required=True, type=click.Path(exists=True, path_type=Path))
@click.option("--preds", required=True, type=click.Path(exists=True, path_type=Path))
@click.option("--min-count", default=50, show_default=True, type=int)
@click.option("--report", "report_path", required=True, type=click.Path(path_type=Path))
@click.option("--include-mod/--exclude-mod", default=True, show_default=True)
@_command
def analyze(refs, preds, min_count, report_path, include_mod):
    """Label-pair error analysis over clips labeled with exactly two classes."""
    refs_table = load_manifest(refs)
    pred_rows = mt.read_predictions(preds, refs_table.vocabulary)
    pairs = mt.make_eval_pairs(refs_table, pred_rows)
    rows = mt.pair_analysis(pairs, refs_table.vocabulary, min_count, include_mod)
    document = {
        "min_count": min_count,
        "include_mod": include_mod,
        "rows": [dataclasses.asdict(r) for r in rows],
    }
    report_path.parent.mkdir(parents=True, exist_ok=True)
    with open(report_path, "w", encoding="utf-8") as fh:
        json.dump(document, fh, indent=2, sort_keys=True)
        fh.write("\n")
    if not rows:
        click.echo(f"no label pair reaches min count {min_count}")
    for r in rows:
        click.echo(
            f"{r.label_1} & {r.label_2}: n={r.count} EMR={r.emr:.2f} PMR={r.pmr:.2f} "
            f"Re(L1)={r.recall_l1:.2f} Re(L2)={r.recall_l2:.2f}"
        )
    click.echo(f"report: {report_path}")


@main.command("grad-check")
@click.option("--trials", default=100, show_default=True, type=int)
@click.option("--seed", default=0, show_default=True, type=int)
@click.option("--eps", default=1e-5, show_default=True, type=float)
@click.option("--tolerance", default=1e-4, show_default=True, type=float)
@_command
def grad_check_cmd(trials, seed, eps, tolerance):
    """Check head+loss gradients against central finite differences."""
    if trials < 1:
        raise ValueError(f"--trials must be >= 1, got {trials}")
    rng = np.random.default_rng(seed)
    frame_counts = (1, 5, 150)
    worst = 0.0
    worst_case = None
    for trial in range(trials):
        t = frame_counts[trial % len(frame_counts)]
        num_classes = 6 if (trial // len(frame_counts)) % 2 == 0 else 7
        cfg = md.HeadConfig(
            feature_dim=8, projector_dim=4, num_classes=num_classes,
            dropout_rate=0.0, seed=int(rng.integers(0, 2**31)),
        )
        params = md.init_head(cfg)
        batch = [
            (
                rng.normal(size=(t, cfg.feature_dim)),
                rng.integers(0, 2, size=num_classes),
                int(rng.integers(0, 2)),
            )
        ]
        loss_cfg = LossConfig(
            alpha=float(rng.uniform(0.2, 0.8)),
            gamma=float(rng.choice([0.0, 1.0, 2.0, 3.0])),
            w_main=float(rng.uniform(0.1, 0.9)),
        )

        def f(x, cfg=cfg, batch=batch, loss_cfg=loss_cfg):
            p = md.HeadParams.from_vector(cfg, x)
            loss, grads = md.forward_backward(p, batch, loss_cfg)
            return loss, np.concatenate([grads[name].ravel() for name in md.PARAM_NAMES])

        err = nm.grad_check(f, params.to_vector(), eps=eps)
        if err > worst:
            worst = err
            worst_case = (t, num_classes)
    click.echo(f"{trials} trials, worst relative error {worst:.3e} "
               f"(t={worst_case[0]}, C={worst_case[1]}), tolerance {tolerance:.0e}")
    if worst >= tolerance:
        click.echo("error: GradCheckError: gradient check failed", err=True)
        sys.exit(1)
    click.echo("gradient check passed")


if __name__ == "__main__":
    main()
