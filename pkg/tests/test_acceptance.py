"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

Run with `pytest tests/test_acceptance.py -v -s`. The end-to-end experiments
train real models and take a few minutes total on a laptop CPU.
"""

import contextlib
import dataclasses
import math
import time

import numpy as np
import pytest
from click.testing import CliRunner

from dysfluency import metrics as mt
from dysfluency import model as md
from dysfluency import numerics as nm
from dysfluency.cli import main as cli_main
from dysfluency.data import (
    EN6,
    FULL7,
    ClipRecord,
    CorpusTable,
    filter_split,
    speaker_exclusive_split,
)
from dysfluency.losses import LossConfig, focal_multi, focal_term, mtl_loss
from dysfluency.synth import SynthConfig, generate
from dysfluency.training import TrainConfig, predict_table, train


@contextlib.contextmanager
def criterion(name: str):
    try:
        yield
    except BaseException:
        print(f"[ACCEPTANCE] {name}: FAIL")
        raise
    print(f"[ACCEPTANCE] {name}: PASS")


# --- 1. gradient correctness -------------------------------------------------


def test_gradient_correctness():
    with criterion("gradient-correctness"):
        rng = np.random.default_rng(2024)
        frame_counts = (1, 5, 150)
        widths = (6, 7)
        worst = 0.0
        start = time.monotonic()
        for trial in range(100):
            t = frame_counts[trial % 3]
            num_classes = widths[trial % 2]
            cfg = md.HeadConfig(
                feature_dim=8,
                projector_dim=4,
                num_classes=num_classes,
                dropout_rate=0.0,
                seed=int(rng.integers(0, 2**31)),
            )
            params = md.init_head(cfg)
            batch = [
                (
                    rng.normal(size=(t, 8)),
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
                return loss, np.concatenate(
                    [grads[name].ravel() for name in md.PARAM_NAMES]
                )

            worst = max(worst, nm.grad_check(f, params.to_vector(), eps=1e-5))
        elapsed = time.monotonic() - start
        assert worst < 1e-4, f"max relative error {worst}"
        assert elapsed < 60.0, f"runtime {elapsed:.1f}s exceeds 60s"


# --- 2. loss identities ------------------------------------------------------


def test_loss_identities():
    with criterion("loss-identities"):
        # focal(gamma=0, alpha=1) == BCE on the 99-point grid
        for p in np.linspace(0.01, 0.99, 99):
            bce = -math.log(float(p))
            assert abs(focal_term(float(p), 1, 1.0, 0.0) - bce) <= 1e-12
        # focal_multi == brute-force per-class mean, exactly
        rng = np.random.default_rng(7)
        for _ in range(500):
            c = int(rng.integers(1, 8))
            probs = rng.uniform(0, 1, size=c)
            targets = rng.integers(0, 2, size=c)
            alpha = float(rng.uniform(0.05, 0.95))
            gamma = float(rng.choice([0.0, 1.0, 2.0, 3.0]))
            brute = (
                sum(
                    focal_term(float(p), int(y), alpha, gamma)
                    for p, y in zip(probs, targets)
                )
                / c
            )
            assert focal_multi(probs, targets, alpha, gamma) == brute
        # mtl endpoints return the pure components exactly
        for _ in range(200):
            lm, la = (float(x) for x in rng.uniform(0, 10, size=2))
            assert mtl_loss(lm, la, 1.0) == lm
            assert mtl_loss(lm, la, 0.0) == la


# --- 3. metric oracle equivalence -------------------------------------------
# Brute-force reimplementations: plain loops, independent of dysfluency.metrics.


def _brute_emr(refs, preds):
    return sum(1 for r, p in zip(refs, preds) if list(r) == list(p)) / len(refs)


def _brute_pmr(refs, preds):
    eligible = hits = 0
    for r, p in zip(refs, preds):
        if sum(r) == 0:
            continue
        eligible += 1
        if any(a == 1 and b == 1 for a, b in zip(r, p)):
            hits += 1
    return hits / eligible if eligible else None


def _brute_hl(refs, preds):
    wrong = total = 0
    for r, p in zip(refs, preds):
        for a, b in zip(r, p):
            wrong += a != b
            total += 1
    return wrong / total


def _brute_prf(refs, preds, c):
    tp = sum(1 for r, p in zip(refs, preds) if r[c] == 1 and p[c] == 1)
    fp = sum(1 for r, p in zip(refs, preds) if r[c] == 0 and p[c] == 1)
    fn = sum(1 for r, p in zip(refs, preds) if r[c] == 1 and p[c] == 0)
    if tp + fn == 0 and tp + fp == 0:
        return None
    prec = tp / (tp + fp) if tp + fp else 0.0
    rec = tp / (tp + fn) if tp + fn else 0.0
    f1 = 2 * prec * rec / (prec + rec) if prec + rec else 0.0
    return prec, rec, f1


def test_metric_oracle_equivalence():
    with criterion("metric-oracle-equivalence"):
        for width in (6, 7):
            rng = np.random.default_rng(width * 13)
            for _ in range(1000):
                n = int(rng.integers(1, 25))
                refs = rng.integers(0, 2, size=(n, width))
                preds = rng.integers(0, 2, size=(n, width))
                pairs = [
                    mt.EvalPair(str(i), tuple(r), tuple(p))
                    for i, (r, p) in enumerate(zip(refs, preds))
                ]
                got_emr = mt.emr(pairs)
                got_pmr = mt.pmr(pairs)
                got_hl = mt.hamming_loss(pairs)
                assert got_emr == _brute_emr(refs, preds)
                assert got_pmr == _brute_pmr(refs, preds)
                assert got_hl == _brute_hl(refs, preds)
                stats = mt.per_class_prf(pairs)
                for c in range(width):
                    expected = _brute_prf(refs, preds, c)
                    if expected is None:
                        assert stats[c] is None
                    else:
                        assert (
                            stats[c].precision,
                            stats[c].recall,
                            stats[c].f1,
                        ) == expected
                # EMR <= PMR binds when every reference has >= 1 positive label
                if refs.any(axis=1).all() and got_pmr is not None:
                    assert got_emr <= got_pmr
                assert got_hl <= 1.0 - got_emr + 1e-15


# --- 4. pair-analysis correctness -------------------------------------------


def test_pair_analysis_correctness():
    with criterion("pair-analysis-correctness"):
        vocab = EN6
        i, j = vocab.index("Int"), vocab.index("Wd")
        ref = [0] * 6
        ref[i] = ref[j] = 1
        always_l1 = [0] * 6
        always_l1[i] = 1
        pairs = [
            mt.EvalPair(f"c{k}", tuple(ref), tuple(always_l1)) for k in range(60)
        ]
        rows = mt.pair_analysis(pairs, vocab, min_count=50)
        assert len(rows) == 1
        row = rows[0]
        assert row.emr == 0.0
        assert row.pmr == 1.0
        assert row.recall_l1 == 1.0
        assert row.recall_l2 == 0.0
        # the min_count=50 cutoff excludes a 49-segment pair
        assert mt.pair_analysis(pairs[:49], vocab, min_count=50) == []
        assert len(mt.pair_analysis(pairs[:50], vocab, min_count=50)) == 1


# --- 5. split safety ----------------------------------------------------------


def _corpus_of(speaker_clip_counts):
    records = []
    for s, count in enumerate(speaker_clip_counts):
        for c in range(count):
            records.append(
                ClipRecord(
                    clip_id=f"s{s}_c{c}",
                    dataset="ds",
                    language="en",
                    speaker_id=f"s{s}",
                    gender="m",
                    split="",
                    feature_path="",
                    labels=(0, 0, 0, 0, 0, 1),
                    duration_ms=3000,
                )
            )
    return CorpusTable(EN6, records)


def test_split_safety():
    with criterion("split-safety"):
        rng = np.random.default_rng(99)
        ratios = (0.8, 0.1, 0.1)
        for trial in range(100):
            uniform = trial % 2 == 0
            if uniform:
                num_speakers = int(rng.integers(3, 51)) * 10  # 30..500, /10
                counts = [int(rng.integers(1, 6))] * num_speakers
            else:
                num_speakers = int(rng.integers(3, 501))
                counts = [int(rng.integers(1, 12)) for _ in range(num_speakers)]
            table = _corpus_of(counts)
            out = speaker_exclusive_split(table, ratios, seed=trial)
            by_split = {"train": set(), "dev": set(), "test": set()}
            sizes = {"train": 0, "dev": 0, "test": 0}
            for rec in out.records:
                by_split[rec.split].add(rec.speaker_id)
                sizes[rec.split] += 1
            assert not by_split["train"] & by_split["dev"]
            assert not by_split["train"] & by_split["test"]
            assert not by_split["dev"] & by_split["test"]
            if uniform:
                total = len(table)
                for name, ratio in zip(("train", "dev", "test"), ratios):
                    target = ratio * total
                    assert abs(sizes[name] - target) <= 0.05 * target, (
                        trial,
                        name,
                        sizes[name],
                        target,
                    )
            again = speaker_exclusive_split(table, ratios, seed=trial)
            assert [r.split for r in again.records] == [r.split for r in out.records]


# --- 6. end-to-end surrogate experiment ---------------------------------------


def test_end_to_end_surrogate(tmp_path):
    with criterion("end-to-end-surrogate"):
        start = time.monotonic()
        corpus = generate(SynthConfig(seed=0), tmp_path / "default")
        assert len(corpus) == 5000
        split = speaker_exclusive_split(corpus, (0.8, 0.1, 0.1), seed=1)
        tr, dv, te = (filter_split(split, s) for s in ("train", "dev", "test"))

        head_cfg = md.HeadConfig(
            feature_dim=8, projector_dim=256, num_classes=7, dropout_rate=0.1, seed=0
        )
        # the best-performing hyperparameters: lr=3e-5, bs=8, alpha=0.7,
        # gamma=3, w_main=0.9, "any" auxiliary task
        train_cfg = TrainConfig(
            max_epochs=20,
            patience=5,
            base_lr=3e-5,
            batch_size=8,
            loss=LossConfig(alpha=0.7, gamma=3.0, w_main=0.9),
            aux_task="any_dysfluency",
            seed=0,
        )
        params, history = train(tr, dv, head_cfg, train_cfg)
        rows = predict_table(params, te)
        pairs = mt.make_eval_pairs(te, rows)
        test_f1 = mt.macro_f1(pairs)
        test_emr = mt.emr(pairs)
        elapsed = time.monotonic() - start
        print(
            f"  surrogate: test macro-F1={test_f1:.4f} EMR={test_emr:.4f} "
            f"epochs={history.epochs} time={elapsed:.0f}s"
        )
        assert test_f1 >= 0.95, test_f1
        assert test_emr >= 0.85, test_emr
        assert history.epochs <= 20
        assert elapsed < 600.0, f"runtime {elapsed:.0f}s exceeds 10 minutes"

        # attention pooling beats mean pooling on span-injected data
        span_cfg = SynthConfig(
            num_speakers=25,
            clips_per_speaker=60,
            frames=40,
            span_fraction=0.2,
            span_compensation=0.55,
            prototype_scale=4.0,
            noise_std=0.25,
            speaker_bias_std=0.15,
            seed=11,
        )
        span_corpus = generate(span_cfg, tmp_path / "span")
        span_split = speaker_exclusive_split(span_corpus, (0.8, 0.1, 0.1), seed=2)
        span_tr, span_dv = filter_split(span_split, "train"), filter_split(span_split, "dev")
        ablate_cfg = TrainConfig(
            max_epochs=30,
            patience=30,
            base_lr=1e-3,
            batch_size=16,
            loss=LossConfig(alpha=0.7, gamma=3.0, w_main=0.9),
            aux_task="any_dysfluency",
            seed=0,
        )
        best_f1 = {}
        for pooling in ("attention", "mean"):
            cfg = md.HeadConfig(
                feature_dim=8,
                projector_dim=128,
                num_classes=7,
                dropout_rate=0.1,
                seed=0,
                pooling=pooling,
            )
            _, hist = train(span_tr, span_dv, cfg, ablate_cfg)
            best_f1[pooling] = max(hist.dev_macro_f1)
        gap = best_f1["attention"] - best_f1["mean"]
        print(
            f"  ablation: attention={best_f1['attention']:.4f} "
            f"mean={best_f1['mean']:.4f} gap={gap:.4f}"
        )
        assert gap >= 0.02, best_f1


# --- 7. multi-label difficulty trend ------------------------------------------


def test_multi_label_difficulty_trend(tmp_path):
    with criterion("multi-label-difficulty-trend"):
        cfg = SynthConfig(
            num_speakers=40,
            clips_per_speaker=60,
            seed=21,
            noise_std=3.5,
            co_attenuation=0.35,
        )
        corpus = generate(cfg, tmp_path / "hard")
        split = speaker_exclusive_split(corpus, (0.8, 0.1, 0.1), seed=3)
        tr, dv, te = (filter_split(split, s) for s in ("train", "dev", "test"))
        head_cfg = md.HeadConfig(
            feature_dim=8, projector_dim=128, num_classes=7, dropout_rate=0.1, seed=0
        )
        train_cfg = TrainConfig(
            max_epochs=15, patience=15, base_lr=3e-4, batch_size=16, seed=0
        )
        params, _ = train(tr, dv, head_cfg, train_cfg)
        pairs = mt.make_eval_pairs(te, predict_table(params, te))
        subset = mt.multi_subset(pairs, corpus.vocabulary)
        test_emr = mt.emr(pairs)
        hl_full = mt.hamming_loss(pairs)
        hl_multi = mt.hamming_loss(subset)
        print(
            f"  trend: EMR={test_emr:.3f} HL(full)={hl_full:.4f} "
            f"HL(multi)={hl_multi:.4f} n_multi={len(subset)}"
        )
        assert 0.4 <= test_emr <= 0.6, test_emr
        assert hl_multi > hl_full, (hl_multi, hl_full)


# --- 8. determinism -----------------------------------------------------------


def _tree_bytes(root):
    return {
        str(p.relative_to(root)): p.read_bytes()
        for p in sorted(root.rglob("*"))
        if p.is_file()
    }


def test_determinism(tmp_path):
    with criterion("determinism"):
        runner = CliRunner()

        def run(args):
            result = runner.invoke(cli_main, args, catch_exceptions=False)
            assert result.exit_code == 0, result.output

        # synth twice
        for name in ("a", "b"):
            run([
                "synth", "--out", str(tmp_path / f"synth_{name}"), "--seed", "7",
                "--speakers", "8", "--clips-per-speaker", "12", "--frames", "16",
            ])
        assert _tree_bytes(tmp_path / "synth_a") == _tree_bytes(tmp_path / "synth_b")

        # split twice (same source corpus)
        manifest = tmp_path / "synth_a" / "manifest.csv"
        for name in ("a", "b"):
            run([
                "split", "--manifest", str(manifest), "--ratios", "0.6,0.2,0.2",
                "--seed", "3", "--out", str(tmp_path / f"split_{name}"),
            ])
        assert _tree_bytes(tmp_path / "split_a") == _tree_bytes(tmp_path / "split_b")

        # train twice (same split files)
        for name in ("a", "b"):
            run([
                "train",
                "--train", str(tmp_path / "split_a" / "train.csv"),
                "--dev", str(tmp_path / "split_a" / "dev.csv"),
                "--test", str(tmp_path / "split_a" / "test.csv"),
                "--out", str(tmp_path / f"run_{name}"),
                "--lr", "1e-3", "--batch-size", "16", "--epochs", "3",
                "--patience", "3", "--seed", "0", "--projector-dim", "16",
            ])
        assert _tree_bytes(tmp_path / "run_a") == _tree_bytes(tmp_path / "run_b")

        # evaluate twice
        for name in ("a", "b"):
            run([
                "evaluate",
                "--refs", str(tmp_path / "split_a" / "test.csv"),
                "--preds", str(tmp_path / "run_a" / "preds_test.csv"),
                "--report", str(tmp_path / f"report_{name}.json"),
            ])
        assert (tmp_path / "report_a.json").read_bytes() == (
            tmp_path / "report_b.json"
        ).read_bytes()
