"""Multi-label evaluation: per-class P/R/F1 with N/A, EMR, PMR, Hamming loss,
the multi-label subset, and the label-pair error analysis.

A class is N/A when the clip set contains no positive reference and no
positive prediction for it (precision and recall are both undefined); all
other zero denominators score 0. PMR is computed over clips with at least one
positive reference label unless include_empty_references is set.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from itertools import combinations
from pathlib import Path

import numpy as np

from .data import ClassVocabulary, CorpusTable

__all__ = [
    "EvalPair",
    "ClassPRF",
    "PairAnalysisRow",
    "per_class_prf",
    "emr",
    "pmr",
    "hamming_loss",
    "macro_f1",
    "multi_subset",
    "pair_analysis",
    "build_report",
    "write_predictions",
    "read_predictions",
    "make_eval_pairs",
]


@dataclass(frozen=True)
class EvalPair:
    clip_id: str
    reference: tuple[int, ...]
    prediction: tuple[int, ...]

    def __post_init__(self):
        if len(self.reference) != len(self.prediction):
            raise ValueError(
                f"clip {self.clip_id!r}: reference width {len(self.reference)} != "
                f"prediction width {len(self.prediction)}"
            )


@dataclass(frozen=True)
class ClassPRF:
    precision: float
    recall: float
    f1: float
    tp: int
    fp: int
    fn: int


@dataclass(frozen=True)
class PairAnalysisRow:
    label_1: str
    label_2: str
    count: int
    emr: float
    pmr: float
    recall_l1: float
    recall_l2: float


def _as_arrays(pairs: list[EvalPair]) -> tuple[np.ndarray, np.ndarray]:
    if not pairs:
        raise ValueError("metrics need at least one evaluation pair")
    width = len(pairs[0].reference)
    for p in pairs:
        if len(p.reference) != width:
            raise ValueError(
                f"clip {p.clip_id!r}: width {len(p.reference)} != {width}"
            )
    refs = np.array([p.reference for p in pairs], dtype=np.int64)
    preds = np.array([p.prediction for p in pairs], dtype=np.int64)
    return refs, preds


def per_class_prf(pairs: list[EvalPair]) -> list[ClassPRF | None]:
    """TP/FP/FN-based precision, recall, F1 per class; None marks N/A."""
    refs, preds = _as_arrays(pairs)
    out: list[ClassPRF | None] = []
    for c in range(refs.shape[1]):
        tp = int(((refs[:, c] == 1) & (preds[:, c] == 1)).sum())
        fp = int(((refs[:, c] == 0) & (preds[:, c] == 1)).sum())
        fn = int(((refs[:, c] == 1) & (preds[:, c] == 0)).sum())
        if tp + fn == 0 and tp + fp == 0:
            out.append(None)
            continue
        precision = tp / (tp + fp) if tp + fp > 0 else 0.0
        recall = tp / (tp + fn) if tp + fn > 0 else 0.0
        f1 = 2 * precision * recall / (precision + recall) if precision + recall > 0 else 0.0
        out.append(ClassPRF(precision, recall, f1, tp, fp, fn))
    return out


def emr(pairs: list[EvalPair]) -> float:
    """Fraction of clips whose prediction vector equals the reference exactly."""
    refs, preds = _as_arrays(pairs)
    return float((refs == preds).all(axis=1).mean())


def pmr(pairs: list[EvalPair], include_empty_references: bool = False) -> float | None:
    """Fraction of clips with at least one correctly recalled label.

    Clips with no positive reference label are excluded by default; None is
    returned when no clip is eligible.
    """
    refs, preds = _as_arrays(pairs)
    eligible = np.ones(len(refs), dtype=bool) if include_empty_references else refs.any(axis=1)
    if not eligible.any():
        return None
    hit = (refs[eligible] & preds[eligible]).any(axis=1)
    return float(hit.mean())


def hamming_loss(pairs: list[EvalPair]) -> float:
    """Wrong label decisions over clips x classes."""
    refs, preds = _as_arrays(pairs)
    return float((refs != preds).sum() / refs.size)


def macro_f1(pairs: list[EvalPair]) -> float:
    """Mean F1 over classes with a defined F1; 0.0 if every class is N/A."""
    stats = per_class_prf(pairs)
    defined = [s.f1 for s in stats if s is not None]
    return float(np.mean(defined)) if defined else 0.0


def _relevant_indices(vocabulary: ClassVocabulary, include_mod: bool) -> list[int]:
    names = [c for c in vocabulary.classes if c != "No-Df"]
    if not include_mod:
        names = [c for c in names if c != "Mod"]
    return [vocabulary.index(c) for c in names]


def multi_subset(
    pairs: list[EvalPair], vocabulary: ClassVocabulary, include_mod: bool = True
) -> list[EvalPair]:
    """Clips whose reference has more than one positive dysfluency-relevant label."""
    idx = _relevant_indices(vocabulary, include_mod)
    return [p for p in pairs if sum(p.reference[i] for i in idx) >= 2]


def pair_analysis(
    pairs: list[EvalPair],
    vocabulary: ClassVocabulary,
    min_count: int = 50,
    include_mod: bool = True,
) -> list[PairAnalysisRow]:
    """Per label pair (L1, L2): clips whose positive relevant labels are exactly
    {L1, L2}, reported when at least min_count such clips exist."""
    idx = _relevant_indices(vocabulary, include_mod)
    rows = []
    for i, j in combinations(idx, 2):
        selected = [
            p
            for p in pairs
            if p.reference[i] == 1
            and p.reference[j] == 1
            and sum(p.reference[k] for k in idx) == 2
        ]
        if len(selected) < min_count:
            continue
        recall_l1 = float(np.mean([p.prediction[i] for p in selected]))
        recall_l2 = float(np.mean([p.prediction[j] for p in selected]))
        row_pmr = pmr(selected)
        rows.append(
            PairAnalysisRow(
                label_1=vocabulary.classes[i],
                label_2=vocabulary.classes[j],
                count=len(selected),
                emr=emr(selected),
                pmr=row_pmr if row_pmr is not None else 0.0,
                recall_l1=recall_l1,
                recall_l2=recall_l2,
            )
        )
    rows.sort(key=lambda r: (-r.count, r.label_1, r.label_2))
    return rows


def _metrics_block(
    pairs: list[EvalPair],
    vocabulary: ClassVocabulary,
    pmr_include_empty: bool = False,
) -> dict:
    if not pairs:
        return {
            "num_clips": 0,
            "per_class": {name: "N/A" for name in vocabulary.classes},
            "emr": "N/A",
            "pmr": "N/A",
            "hamming_loss": "N/A",
            "macro_f1": "N/A",
        }
    stats = per_class_prf(pairs)
    per_class = {}
    for name, stat in zip(vocabulary.classes, stats):
        if stat is None:
            per_class[name] = "N/A"
        else:
            per_class[name] = {
                "precision": stat.precision,
                "recall": stat.recall,
                "f1": stat.f1,
                "tp": stat.tp,
                "fp": stat.fp,
                "fn": stat.fn,
            }
    p = pmr(pairs, include_empty_references=pmr_include_empty)
    return {
        "num_clips": len(pairs),
        "per_class": per_class,
        "emr": emr(pairs),
        "pmr": p if p is not None else "N/A",
        "hamming_loss": hamming_loss(pairs),
        "macro_f1": macro_f1(pairs),
    }


def build_report(
    pairs: list[EvalPair],
    vocabulary: ClassVocabulary,
    min_count: int = 50,
    include_mod: bool = True,
    pmr_include_empty: bool = False,
) -> dict:
    """Full evaluation document: overall metrics, multi-label subset, pair rows."""
    subset = multi_subset(pairs, vocabulary, include_mod)
    rows = pair_analysis(pairs, vocabulary, min_count, include_mod)
    return {
        "vocabulary": list(vocabulary.classes),
        "full": _metrics_block(pairs, vocabulary, pmr_include_empty),
        "multi_label_subset": _metrics_block(subset, vocabulary, pmr_include_empty),
        "pair_analysis": {
            "min_count": min_count,
            "include_mod": include_mod,
            "rows": [
                {
                    "label_1": r.label_1,
                    "label_2": r.label_2,
                    "count": r.count,
                    "emr": r.emr,
                    "pmr": r.pmr,
                    "recall_l1": r.recall_l1,
                    "recall_l2": r.recall_l2,
                }
                for r in rows
            ],
        },
    }


# --- predictions CSV --------------------------------------------------------


def _prediction_columns(vocabulary: ClassVocabulary) -> list[str]:
    cols = ["clip_id"]
    cols += [f"prob_{vocabulary.column(c)}" for c in vocabulary.classes]
    cols += [f"pred_{vocabulary.column(c)}" for c in vocabulary.classes]
    return cols


def write_predictions(path, vocabulary: ClassVocabulary, rows) -> Path:
    """rows: iterable of (clip_id, probs, preds) in vocabulary order."""
    path = Path(path)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(_prediction_columns(vocabulary))
        for clip_id, probs, preds in rows:
            if len(probs) != len(vocabulary) or len(preds) != len(vocabulary):
                raise ValueError(f"clip {clip_id!r}: wrong prediction width")
            writer.writerow(
                [clip_id]
                + [repr(float(p)) for p in probs]
                + [str(int(v)) for v in preds]
            )
    return path


def read_predictions(path, vocabulary: ClassVocabulary):
    """Read back (clip_id, probs, preds) rows, validating the header."""
    path = Path(path)
    expected = _prediction_columns(vocabulary)
    out = []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != expected:
            raise ValueError(
                f"{path}: header does not match the {vocabulary.name} prediction schema"
            )
        width = len(vocabulary)
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(expected):
                raise ValueError(f"{path}:{lineno}: expected {len(expected)} cells")
            clip_id = row[0]
            probs = tuple(float(c) for c in row[1 : 1 + width])
            preds = tuple(int(c) for c in row[1 + width :])
            if any(v not in (0, 1) for v in preds):
                raise ValueError(f"{path}:{lineno}: predictions must be 0/1")
            out.append((clip_id, probs, preds))
    return out


def make_eval_pairs(refs: CorpusTable, pred_rows) -> list[EvalPair]:
    """Join prediction rows against a reference manifest by clip_id."""
    by_id = {rec.clip_id: rec for rec in refs.records}
    pairs = []
    for clip_id, _, preds in pred_rows:
        rec = by_id.get(clip_id)
        if rec is None:
            raise ValueError(f"prediction for unknown clip_id {clip_id!r}")
        pairs.append(EvalPair(clip_id=clip_id, reference=rec.labels, prediction=preds))
    return pairs
