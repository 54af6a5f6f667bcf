"""Corpus manifests, label vocabularies, merging, splits, and feature files.

A corpus is a CSV manifest plus one binary feature file per clip. Manifests
use a fixed header; the Mod column is empty for 6-class corpora and 0/1 for
7-class corpora. Feature files are float32 on disk ("DYSF" layout) and are
widened to float64 on load.
"""

from __future__ import annotations

import csv
import math
import struct
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

__all__ = [
    "EN6",
    "FULL7",
    "DYSFLUENCY_CLASSES",
    "ClassVocabulary",
    "ClipRecord",
    "CorpusTable",
    "ManifestError",
    "FeatureFileError",
    "vocabulary_by_name",
    "load_manifest",
    "save_manifest",
    "merge_corpora",
    "speaker_exclusive_split",
    "filter_split",
    "derive_aux_labels",
    "read_feature_file",
    "write_feature_file",
    "resolve_feature_path",
]

MANIFEST_COLUMNS = [
    "clip_id",
    "dataset",
    "language",
    "speaker_id",
    "gender",
    "split",
    "duration_ms",
    "feature_path",
    "Mod",
    "Bl",
    "Int",
    "Pro",
    "Snd",
    "Wd",
    "NoDf",
]

LANGUAGES = ("en", "de")
GENDERS = ("m", "f", "unknown")
SPLITS = ("train", "dev", "test")

# The five dysfluency classes proper; Mod and No-Df are neither.
DYSFLUENCY_CLASSES = ("Bl", "Int", "Pro", "Snd", "Wd")

# class name -> manifest column
_CLASS_COLUMNS = {"No-Df": "NoDf"}

AUX_TASKS = ("any_dysfluency", "gender", "language_id")

FEATURE_MAGIC = b"DYSF"
FEATURE_VERSION = 1
_FEATURE_HEADER = struct.Struct("<4sHHII")


class ManifestError(ValueError):
    """A manifest file violates the schema."""


class FeatureFileError(ValueError):
    """A feature file violates the binary layout."""


@dataclass(frozen=True)
class ClassVocabulary:
    name: str
    classes: tuple[str, ...]

    def __post_init__(self):
        if len(set(self.classes)) != len(self.classes):
            raise ValueError(f"duplicate class names in {self.classes}")

    def __len__(self) -> int:
        return len(self.classes)

    def index(self, class_name: str) -> int:
        return self.classes.index(class_name)

    def column(self, class_name: str) -> str:
        return _CLASS_COLUMNS.get(class_name, class_name)

    def embeds_in(self, other: "ClassVocabulary") -> bool:
        return set(self.classes) <= set(other.classes)


EN6 = ClassVocabulary("en6", ("Bl", "Int", "Pro", "Snd", "Wd", "No-Df"))
FULL7 = ClassVocabulary("full7", ("Mod", "Bl", "Int", "Pro", "Snd", "Wd", "No-Df"))

_VOCABULARIES = {"en6": EN6, "full7": FULL7}


def vocabulary_by_name(name: str) -> ClassVocabulary:
    try:
        return _VOCABULARIES[name.lower()]
    except KeyError:
        raise ValueError(f"unknown vocabulary {name!r}; expected en6 or full7") from None


@dataclass(frozen=True)
class ClipRecord:
    clip_id: str
    dataset: str
    language: str
    speaker_id: str
    gender: str
    split: str  # empty before splitting
    feature_path: str
    labels: tuple[int, ...]
    duration_ms: int


@dataclass
class CorpusTable:
    vocabulary: ClassVocabulary
    records: list[ClipRecord]
    root: Path | None = None  # directory feature paths resolve against

    def __post_init__(self):
        seen = set()
        width = len(self.vocabulary)
        for rec in self.records:
            if rec.clip_id in seen:
                raise ManifestError(f"duplicate clip_id {rec.clip_id!r}")
            seen.add(rec.clip_id)
            if len(rec.labels) != width:
                raise ManifestError(
                    f"clip {rec.clip_id!r}: {len(rec.labels)} labels for "
                    f"{width}-class vocabulary"
                )

    def __len__(self) -> int:
        return len(self.records)

    def speakers(self) -> set[str]:
        return {rec.speaker_id for rec in self.records}

    def label_matrix(self) -> np.ndarray:
        return np.array([rec.labels for rec in self.records], dtype=np.int64)

    def ambiguous_clip_ids(self) -> list[str]:
        """Clips labeled No-Df and a dysfluency at once (legal but reportable)."""
        nodf = self.vocabulary.index("No-Df")
        dys = [
            self.vocabulary.index(c)
            for c in DYSFLUENCY_CLASSES
            if c in self.vocabulary.classes
        ]
        return [
            rec.clip_id
            for rec in self.records
            if rec.labels[nodf] == 1 and any(rec.labels[i] for i in dys)
        ]


def resolve_feature_path(table: CorpusTable, record: ClipRecord) -> Path:
    path = Path(record.feature_path)
    if path.is_absolute() or table.root is None:
        return path
    return table.root / path


def _parse_label_cell(cell: str) -> int:
    if cell not in ("0", "1"):
        raise ValueError(f"label cell must be 0 or 1, got {cell!r}")
    return int(cell)


def load_manifest(path) -> CorpusTable:
    """Parse a manifest CSV; the vocabulary is EN6 iff every Mod cell is empty."""
    path = Path(path)
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ManifestError(f"{path}: empty file") from None
        if header != MANIFEST_COLUMNS:
            raise ManifestError(
                f"{path}: header {header} does not match expected {MANIFEST_COLUMNS}"
            )
        raw_rows = [(lineno, row) for lineno, row in enumerate(reader, start=2) if row]

    mod_cells = [row[8].strip() for _, row in raw_rows]
    has_mod = any(cell != "" for cell in mod_cells)
    vocab = FULL7 if has_mod else EN6

    records = []
    seen: set[str] = set()
    for (lineno, row), mod_cell in zip(raw_rows, mod_cells):
        def fail(msg: str):
            raise ManifestError(f"{path}:{lineno}: {msg}")

        if len(row) != len(MANIFEST_COLUMNS):
            fail(f"expected {len(MANIFEST_COLUMNS)} cells, got {len(row)}")
        clip_id, dataset, language, speaker_id, gender, split = (c.strip() for c in row[:6])
        duration_cell, feature_path = row[6].strip(), row[7].strip()
        if not clip_id:
            fail("empty clip_id")
        if clip_id in seen:
            fail(f"duplicate clip_id {clip_id!r}")
        seen.add(clip_id)
        if language not in LANGUAGES:
            fail(f"unknown language code {language!r}")
        if gender not in GENDERS:
            fail(f"unknown gender {gender!r}")
        if split not in ("",) + SPLITS:
            fail(f"unknown split {split!r}")
        try:
            duration_ms = int(duration_cell)
        except ValueError:
            fail(f"duration_ms must be an integer, got {duration_cell!r}")
        if duration_ms < 0:
            fail(f"duration_ms must be >= 0, got {duration_ms}")

        label_cells = [c.strip() for c in row[8:]]
        if has_mod and label_cells[0] == "":
            fail("Mod cell empty in a 7-class manifest")
        if not has_mod:
            label_cells = label_cells[1:]  # Mod column stays empty for EN6
        try:
            labels = tuple(_parse_label_cell(c) for c in label_cells)
        except ValueError as exc:
            fail(str(exc))
        if vocab is FULL7 and language == "en" and labels[0] == 1:
            fail("English clips cannot carry the Mod label")

        records.append(
            ClipRecord(
                clip_id=clip_id,
                dataset=dataset,
                language=language,
                speaker_id=speaker_id,
                gender=gender,
                split=split,
                feature_path=feature_path,
                labels=labels,
                duration_ms=duration_ms,
            )
        )
    return CorpusTable(vocabulary=vocab, records=records, root=path.parent)


def save_manifest(table: CorpusTable, path) -> Path:
    """Write a manifest; feature paths are made absolute when the directory changes."""
    path = Path(path)
    new_root = path.parent.resolve()
    old_root = table.root.resolve() if table.root is not None else None
    rewrite = old_root is not None and old_root != new_root
    is_full = table.vocabulary is FULL7 or "Mod" in table.vocabulary.classes
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(MANIFEST_COLUMNS)
        for rec in table.records:
            feature_path = rec.feature_path
            if rewrite and feature_path and not Path(feature_path).is_absolute():
                feature_path = str(old_root / feature_path)
            if is_full:
                label_cells = [str(v) for v in rec.labels]
            else:
                label_cells = [""] + [str(v) for v in rec.labels]
            writer.writerow(
                [
                    rec.clip_id,
                    rec.dataset,
                    rec.language,
                    rec.speaker_id,
                    rec.gender,
                    rec.split,
                    str(rec.duration_ms),
                    feature_path,
                ]
                + label_cells
            )
    return path


def merge_corpora(tables: list[CorpusTable], target_vocab: ClassVocabulary) -> CorpusTable:
    """Concatenate corpora under a common vocabulary.

    Labels are re-indexed into target_vocab with absent classes set to 0.
    Clip ids are namespaced as "<dataset>/<clip_id>" (idempotently, so nested
    merges reproduce a flat merge). Feature paths become absolute; the merged
    table has no root of its own.
    """
    if not tables:
        raise ValueError("merge_corpora needs at least one table")
    for table in tables:
        if not table.vocabulary.embeds_in(target_vocab):
            raise ValueError(
                f"vocabulary {table.vocabulary.classes} does not embed in "
                f"{target_vocab.classes}"
            )
    merged: list[ClipRecord] = []
    for table in tables:
        index_of = {name: i for i, name in enumerate(table.vocabulary.classes)}
        for rec in table.records:
            labels = tuple(
                rec.labels[index_of[name]] if name in index_of else 0
                for name in target_vocab.classes
            )
            clip_id = rec.clip_id
            prefix = f"{rec.dataset}/"
            if not clip_id.startswith(prefix):
                clip_id = prefix + clip_id
            merged.append(
                replace(
                    rec,
                    clip_id=clip_id,
                    labels=labels,
                    feature_path=str(resolve_feature_path(table, rec)),
                )
            )
    return CorpusTable(vocabulary=target_vocab, records=merged, root=None)


def speaker_exclusive_split(
    table: CorpusTable, ratios: tuple[float, float, float], seed: int
) -> CorpusTable:
    """Assign every speaker's clips to exactly one of train/dev/test.

    Greedy: speakers in decreasing clip-count order (seeded tie-break) go to
    the partition currently furthest below its clip-count target.
    """
    if len(ratios) != len(SPLITS):
        raise ValueError(f"need {len(SPLITS)} ratios, got {len(ratios)}")
    if any(r <= 0 for r in ratios):
        raise ValueError(f"ratios must be positive, got {ratios}")
    if abs(sum(ratios) - 1.0) > 1e-9:
        raise ValueError(f"ratios must sum to 1, got {ratios}")
    counts: dict[str, int] = {}
    for rec in table.records:
        counts[rec.speaker_id] = counts.get(rec.speaker_id, 0) + 1
    if len(counts) < len(SPLITS):
        raise ValueError(
            f"need at least {len(SPLITS)} speakers, got {len(counts)}"
        )
    rng = np.random.default_rng(seed)
    tiebreak = dict(zip(sorted(counts), rng.permutation(len(counts))))
    order = sorted(counts, key=lambda s: (-counts[s], tiebreak[s]))
    total = len(table.records)
    targets = [r * total for r in ratios]
    assigned = [0.0, 0.0, 0.0]
    partition_of: dict[str, str] = {}
    for speaker in order:
        deficits = [targets[i] - assigned[i] for i in range(len(SPLITS))]
        best = max(range(len(SPLITS)), key=lambda i: (deficits[i], -i))
        partition_of[speaker] = SPLITS[best]
        assigned[best] += counts[speaker]
    records = [replace(rec, split=partition_of[rec.speaker_id]) for rec in table.records]
    return CorpusTable(vocabulary=table.vocabulary, records=records, root=table.root)


def filter_split(table: CorpusTable, split: str) -> CorpusTable:
    if split not in SPLITS:
        raise ValueError(f"unknown split {split!r}")
    return CorpusTable(
        vocabulary=table.vocabulary,
        records=[rec for rec in table.records if rec.split == split],
        root=table.root,
    )


def derive_aux_labels(table: CorpusTable, task: str) -> tuple[list[int | None], int]:
    """Per-clip binary auxiliary labels; None marks clips excluded from the aux loss.

    Returns (labels, excluded_count). Only the gender task can exclude clips
    (unknown gender); their main loss still applies.
    """
    if task not in AUX_TASKS:
        raise ValueError(f"unknown aux task {task!r}; expected one of {AUX_TASKS}")
    vocab = table.vocabulary
    labels: list[int | None] = []
    excluded = 0
    if task == "any_dysfluency":
        dys_idx = [vocab.index(c) for c in DYSFLUENCY_CLASSES if c in vocab.classes]
        for rec in table.records:
            labels.append(1 if any(rec.labels[i] for i in dys_idx) else 0)
    elif task == "gender":
        for rec in table.records:
            if rec.gender == "unknown":
                labels.append(None)
                excluded += 1
            else:
                labels.append(0 if rec.gender == "m" else 1)
    else:  # language_id
        for rec in table.records:
            labels.append(0 if rec.language == "en" else 1)
    return labels, excluded


def write_feature_file(path, values: np.ndarray) -> Path:
    """Write a t x d float sequence as a little-endian float32 "DYSF" file."""
    values = np.asarray(values, dtype=np.float64)
    if values.ndim != 2 or values.shape[0] < 1 or values.shape[1] < 1:
        raise FeatureFileError(f"feature sequence must be a nonempty 2-D array, got {values.shape}")
    if not np.isfinite(values).all():
        raise FeatureFileError("feature values must be finite")
    t, d = values.shape
    path = Path(path)
    with open(path, "wb") as fh:
        fh.write(_FEATURE_HEADER.pack(FEATURE_MAGIC, FEATURE_VERSION, 0, t, d))
        fh.write(np.ascontiguousarray(values, dtype="<f4").tobytes())
    return path


def read_feature_file(path, expect_dim: int | None = None) -> np.ndarray:
    """Read a "DYSF" file, widening to float64."""
    path = Path(path)
    with open(path, "rb") as fh:
        header = fh.read(_FEATURE_HEADER.size)
        if len(header) != _FEATURE_HEADER.size:
            raise FeatureFileError(f"{path}: truncated header")
        magic, version, reserved, t, d = _FEATURE_HEADER.unpack(header)
        if magic != FEATURE_MAGIC:
            raise FeatureFileError(f"{path}: bad magic {magic!r}")
        if version != FEATURE_VERSION:
            raise FeatureFileError(f"{path}: unsupported version {version}")
        if reserved != 0:
            raise FeatureFileError(f"{path}: nonzero reserved field")
        if t < 1 or d < 1:
            raise FeatureFileError(f"{path}: invalid dimensions t={t}, d={d}")
        if expect_dim is not None and d != expect_dim:
            raise FeatureFileError(
                f"{path}: feature dim {d} does not match configured {expect_dim}"
            )
        payload = fh.read(t * d * 4 + 1)
        if len(payload) != t * d * 4:
            raise FeatureFileError(
                f"{path}: payload has {len(payload)} bytes, expected {t * d * 4}"
            )
    values = np.frombuffer(payload, dtype="<f4").reshape(t, d).astype(np.float64)
    if not np.isfinite(values).all():
        raise FeatureFileError(f"{path}: non-finite feature values")
    return values


def expected_frames(duration_ms: int, frame_ms: int = 20) -> int:
    """Frame count for a clip duration at the 20 ms frame rate."""
    return math.ceil(duration_ms / frame_ms)
