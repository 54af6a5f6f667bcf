"""Feature extraction: one clip, or a manifest batch."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import audio, backbone, dysf, manifest


@dataclass(frozen=True)
class ExtractionJob:
    wav_path: Path
    model: str  # "en", "de", or "test"
    output_path: Path
    layer: int | None = None  # None: last hidden state


@dataclass
class BatchResult:
    manifest_path: Path
    extracted: int
    failures: list[tuple[str, str]]  # (clip_id, reason)

    @property
    def ok(self) -> bool:
        return not self.failures


def extract(job: ExtractionJob, model=None) -> Path:
    """Run the encoder over one clip and write its DYSF feature file."""
    if model is None:
        model = backbone.load_backbone(job.model)
    samples, rate = audio.load_wav(job.wav_path)
    samples = audio.to_target_rate(samples, rate)
    samples = audio.normalize(samples)
    hidden = backbone.encode(model, samples, job.layer)
    if hidden.shape[0] < 1:
        raise audio.AudioError(f"{job.wav_path}: too short for the encoder front end")
    if not np.isfinite(hidden).all():
        raise dysf.DysfError(f"{job.wav_path}: encoder produced non-finite values")
    job.output_path.parent.mkdir(parents=True, exist_ok=True)
    return dysf.write(job.output_path, hidden)


def batch_extract(
    manifest_in,
    audio_root,
    out_root,
    model_name: str,
    layer: int | None = None,
) -> BatchResult:
    """Extract every manifest row; audio is <audio_root>/<clip_id>.wav.

    Writes out_root/features/<clip_id>.dysf per clip and a toolkit-format
    manifest (successful rows only, feature_path filled). Per-clip failures
    are collected, not fatal.
    """
    audio_root = Path(audio_root)
    out_root = Path(out_root)
    rows = manifest.read_rows(manifest_in)
    model = backbone.load_backbone(model_name)
    out_rows = []
    failures: list[tuple[str, str]] = []
    for row in rows:
        cid = manifest.clip_id(row)
        wav_path = audio_root / f"{cid}.wav"
        feature_path = f"features/{cid}.dysf"
        job = ExtractionJob(
            wav_path=wav_path,
            model=model_name,
            output_path=out_root / feature_path,
            layer=layer,
        )
        try:
            extract(job, model=model)
        except (OSError, ValueError) as exc:
            failures.append((cid, " ".join(str(exc).split())))
            continue
        out_rows.append(manifest.with_feature_path(row, feature_path))
    out_root.mkdir(parents=True, exist_ok=True)
    manifest_path = manifest.write_rows(out_root / "manifest.csv", out_rows)
    return BatchResult(
        manifest_path=manifest_path, extracted=len(out_rows), failures=failures
    )
