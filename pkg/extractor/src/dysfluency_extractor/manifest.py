"""Minimal reader/writer for the toolkit's manifest CSV schema.

Only what batch extraction needs: rows are carried through verbatim, with
the feature_path column filled in. Audio is located as
<audio_root>/<clip_id>.wav.
"""

from __future__ import annotations

import csv
from pathlib import Path

COLUMNS = [
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

_FEATURE_PATH_COLUMN = COLUMNS.index("feature_path")
_CLIP_ID_COLUMN = COLUMNS.index("clip_id")


class ManifestError(ValueError):
    pass


def read_rows(path) -> list[list[str]]:
    path = Path(path)
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != COLUMNS:
            raise ManifestError(f"{path}: header does not match the manifest schema")
        rows = [row for row in reader if row]
    for lineno, row in enumerate(rows, start=2):
        if len(row) != len(COLUMNS):
            raise ManifestError(f"{path}:{lineno}: expected {len(COLUMNS)} cells")
        if not row[_CLIP_ID_COLUMN]:
            raise ManifestError(f"{path}:{lineno}: empty clip_id")
    return rows


def clip_id(row: list[str]) -> str:
    return row[_CLIP_ID_COLUMN]


def with_feature_path(row: list[str], feature_path: str) -> list[str]:
    out = list(row)
    out[_FEATURE_PATH_COLUMN] = feature_path
    return out


def write_rows(path, rows: list[list[str]]) -> Path:
    path = Path(path)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(COLUMNS)
        writer.writerows(rows)
    return path
