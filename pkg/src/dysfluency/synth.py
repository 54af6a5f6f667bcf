"""Seeded synthetic corpus generator with planted multi-label structure.

Each clip draws one outcome: no dysfluency, a single label, or a label pair.
Outcome probabilities are derived from per-class marginal priors and pairwise
joint rates, so empirical class frequencies match the priors in expectation
and the multi-label fraction equals the sum of the pair rates. Class signals
are prototype vectors injected into a contiguous frame span (so attention
pooling has something to find that plain mean pooling dilutes), on top of
isotropic noise and a per-speaker bias.

Mod-bearing outcomes are drawn only for German-language speakers, with their
probability mass scaled so the global Mod frequency still matches its prior.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .data import (
    FULL7,
    ClassVocabulary,
    ClipRecord,
    CorpusTable,
    save_manifest,
    write_feature_file,
)

__all__ = ["SynthConfig", "generate", "default_priors", "default_co_rates"]


def default_priors(vocabulary: ClassVocabulary) -> dict[str, float]:
    priors = {"Bl": 0.12, "Int": 0.30, "Pro": 0.14, "Snd": 0.16, "Wd": 0.18}
    if "Mod" in vocabulary.classes:
        priors["Mod"] = 0.10
    return priors


def default_co_rates(vocabulary: ClassVocabulary) -> dict[tuple[str, str], float]:
    rates = {("Int", "Wd"): 0.10, ("Int", "Snd"): 0.08, ("Pro", "Bl"): 0.06}
    if "Mod" in vocabulary.classes:
        rates[("Mod", "Snd")] = 0.02
    return rates


@dataclass
class SynthConfig:
    num_speakers: int = 50
    clips_per_speaker: int = 100
    feature_dim: int = 8
    frames: int = 150
    vocabulary: ClassVocabulary = FULL7
    label_priors: dict[str, float] | None = None  # None: default_priors(vocabulary)
    co_rates: dict[tuple[str, str], float] | None = None  # None: default_co_rates(...)
    prototypes: np.ndarray | None = None  # (num_signal_classes, d); None: derived
    prototype_scale: float = 4.0
    span_fraction: float = 0.5
    # fraction of the injected span mass cancelled over the complement frames;
    # > 0 weakens what temporal mean pooling can see while frame-level
    # structure stays intact (the attention-vs-mean ablation axis)
    span_compensation: float = 0.0
    # amplitude multiplier applied to every prototype when two signals share a
    # clip; < 1 makes co-occurring labels partially mask each other, so
    # multi-label clips are harder than single-label ones
    co_attenuation: float = 1.0
    noise_std: float = 0.2
    speaker_bias_std: float = 0.1
    language_mix: float | None = None  # de-speaker fraction; None: 0.5 if Mod else 0.0
    dataset_name: str = "synth"
    seed: int = 0

    def signal_classes(self) -> list[str]:
        return [c for c in self.vocabulary.classes if c != "No-Df"]

    def resolved_priors(self) -> dict[str, float]:
        priors = dict(self.label_priors) if self.label_priors is not None else default_priors(
            self.vocabulary
        )
        for name, p in priors.items():
            if name not in self.signal_classes():
                raise ValueError(f"prior for unknown or non-signal class {name!r}")
            if not 0.0 <= p <= 1.0:
                raise ValueError(f"prior for {name} must be in [0,1], got {p}")
        return {name: priors.get(name, 0.0) for name in self.signal_classes()}

    def resolved_co_rates(self) -> dict[tuple[str, str], float]:
        rates = dict(self.co_rates) if self.co_rates is not None else default_co_rates(
            self.vocabulary
        )
        signal = set(self.signal_classes())
        for (a, b), r in rates.items():
            if a not in signal or b not in signal or a == b:
                raise ValueError(f"bad co-occurrence pair ({a}, {b})")
            if not 0.0 <= r <= 1.0:
                raise ValueError(f"co-occurrence rate for ({a}, {b}) must be in [0,1]")
        return rates

    def resolved_language_mix(self) -> float:
        if self.language_mix is not None:
            mix = self.language_mix
        else:
            mix = 0.5 if "Mod" in self.vocabulary.classes else 0.0
        if not 0.0 <= mix <= 1.0:
            raise ValueError(f"language_mix must be in [0,1], got {mix}")
        return mix

    def validate(self) -> None:
        if self.num_speakers < 1 or self.clips_per_speaker < 1:
            raise ValueError("num_speakers and clips_per_speaker must be >= 1")
        if self.feature_dim < 1 or self.frames < 1:
            raise ValueError("feature_dim and frames must be >= 1")
        if not 0.0 < self.span_fraction <= 1.0:
            raise ValueError(f"span_fraction must be in (0,1], got {self.span_fraction}")
        if not 0.0 <= self.span_compensation <= 1.0:
            raise ValueError(
                f"span_compensation must be in [0,1], got {self.span_compensation}"
            )
        if self.span_compensation > 0.0 and self.span_fraction == 1.0:
            raise ValueError("span_compensation needs span_fraction < 1")
        if not 0.0 < self.co_attenuation <= 1.0:
            raise ValueError(
                f"co_attenuation must be in (0,1], got {self.co_attenuation}"
            )
        if self.noise_std < 0 or self.speaker_bias_std < 0:
            raise ValueError("noise_std and speaker_bias_std must be >= 0")
        self.resolved_priors()
        self.resolved_co_rates()
        self.resolved_language_mix()


def _build_outcomes(
    cfg: SynthConfig,
) -> tuple[list[frozenset[str]], np.ndarray, np.ndarray]:
    """Outcome label sets plus per-language probability vectors (en, de)."""
    priors = cfg.resolved_priors()
    co_rates = cfg.resolved_co_rates()
    signal = cfg.signal_classes()
    order = {name: i for i, name in enumerate(signal)}

    pair_mass: dict[str, float] = {name: 0.0 for name in signal}
    pairs = sorted(co_rates.items(), key=lambda kv: (order[kv[0][0]], order[kv[0][1]]))
    for (a, b), r in pairs:
        pair_mass[a] += r
        pair_mass[b] += r
    singles = {}
    for name in signal:
        q = priors[name] - pair_mass[name]
        if q < -1e-12:
            raise ValueError(
                f"prior for {name} ({priors[name]}) is below its pair mass ({pair_mass[name]})"
            )
        singles[name] = max(q, 0.0)

    outcomes: list[frozenset[str]] = [frozenset()]
    probs = [0.0]
    for name in signal:
        outcomes.append(frozenset([name]))
        probs.append(singles[name])
    for (a, b), r in pairs:
        outcomes.append(frozenset([a, b]))
        probs.append(r)
    labeled_mass = sum(probs)
    if labeled_mass > 1.0 + 1e-9:
        raise ValueError(f"label priors and pair rates sum to {labeled_mass} > 1")
    probs[0] = max(1.0 - labeled_mass, 0.0)
    base = np.array(probs)

    mix = cfg.resolved_language_mix()
    mod_idx = [i for i, o in enumerate(outcomes) if "Mod" in o]
    mod_mass = float(base[mod_idx].sum()) if mod_idx else 0.0
    if mod_mass > 0.0 and mix == 0.0:
        raise ValueError("Mod has positive probability but language_mix leaves no de speakers")
    en = base.copy()
    de = base.copy()
    if mod_idx:
        en[mod_idx] = 0.0
        en[0] += mod_mass
        de[mod_idx] = base[mod_idx] / mix
        de[0] = base[0] - mod_mass * (1.0 - mix) / mix
        if de[0] < -1e-9:
            raise ValueError(
                "Mod probability cannot be concentrated on de speakers; raise "
                "language_mix or lower the Mod prior"
            )
        de[0] = max(de[0], 0.0)
    en = en / en.sum()
    de = de / de.sum()
    return outcomes, en, de


def _derive_prototypes(cfg: SynthConfig, rng: np.random.Generator) -> np.ndarray:
    num = len(cfg.signal_classes())
    if cfg.prototypes is not None:
        protos = np.asarray(cfg.prototypes, dtype=np.float64)
        if protos.shape != (num, cfg.feature_dim):
            raise ValueError(
                f"prototypes must have shape ({num}, {cfg.feature_dim}), got {protos.shape}"
            )
    else:
        if num > cfg.feature_dim:
            raise ValueError(
                f"cannot derive {num} orthogonal prototypes in {cfg.feature_dim} dims; "
                "pass explicit prototypes"
            )
        q, _ = np.linalg.qr(rng.normal(size=(cfg.feature_dim, cfg.feature_dim)))
        protos = q.T[:num] * cfg.prototype_scale
    norms = np.linalg.norm(protos, axis=1)
    if (norms == 0).any():
        raise ValueError("zero prototype vector")
    unit = protos / norms[:, None]
    cos = np.abs(unit @ unit.T) - np.eye(num)
    if (cos > 1.0 - 1e-9).any():
        raise ValueError("prototypes must be pairwise non-parallel")
    return protos


def generate(
    cfg: SynthConfig, out_dir, write_features: bool = True
) -> CorpusTable:
    """Generate a corpus into out_dir: manifest.csv plus features/*.dysf.

    Deterministic at byte level for a fixed config; per-clip randomness is
    drawn from independently derived seeds, so generation order could be
    parallelized without changing the output.
    """
    cfg.validate()
    out_dir = Path(out_dir)
    outcomes, en_probs, de_probs = _build_outcomes(cfg)
    ss = np.random.SeedSequence(cfg.seed)
    proto_ss, speaker_ss, clips_ss = ss.spawn(3)
    prototypes = _derive_prototypes(cfg, np.random.default_rng(proto_ss))
    proto_of = {name: prototypes[i] for i, name in enumerate(cfg.signal_classes())}

    speaker_rng = np.random.default_rng(speaker_ss)
    num_de = int(round(cfg.resolved_language_mix() * cfg.num_speakers))
    de_set = set(speaker_rng.permutation(cfg.num_speakers)[:num_de])
    speakers = []
    for s in range(cfg.num_speakers):
        speakers.append(
            {
                "id": f"spk{s:03d}",
                "language": "de" if s in de_set else "en",
                "gender": "m" if speaker_rng.random() < 0.5 else "f",
                "bias": speaker_rng.normal(size=cfg.feature_dim) * cfg.speaker_bias_std,
            }
        )

    total = cfg.num_speakers * cfg.clips_per_speaker
    clip_seeds = clips_ss.spawn(total)
    if write_features:
        (out_dir / "features").mkdir(parents=True, exist_ok=True)
    else:
        out_dir.mkdir(parents=True, exist_ok=True)

    vocab = cfg.vocabulary
    span_len = max(1, round(cfg.span_fraction * cfg.frames))
    records = []
    g = 0
    for speaker in speakers:
        probs = de_probs if speaker["language"] == "de" else en_probs
        for j in range(cfg.clips_per_speaker):
            rng = np.random.default_rng(clip_seeds[g])
            g += 1
            outcome = outcomes[int(rng.choice(len(outcomes), p=probs))]
            labels = tuple(
                1
                if (name in outcome or (name == "No-Df" and not outcome))
                else 0
                for name in vocab.classes
            )
            clip_id = f"{speaker['id']}_c{j:04d}"
            feature_path = f"features/{clip_id}.dysf"
            if write_features:
                values = rng.normal(size=(cfg.frames, cfg.feature_dim)) * cfg.noise_std
                values += speaker["bias"]
                amplitude = cfg.co_attenuation if len(outcome) >= 2 else 1.0
                for name in cfg.signal_classes():
                    if name in outcome:
                        signal = amplitude * proto_of[name]
                        start = int(rng.integers(0, cfg.frames - span_len + 1))
                        values[start : start + span_len] += signal
                        if cfg.span_compensation > 0.0:
                            rest = cfg.frames - span_len
                            comp = cfg.span_compensation * span_len / rest
                            values[:start] -= comp * signal
                            values[start + span_len :] -= comp * signal
                write_feature_file(out_dir / feature_path, values)
            records.append(
                ClipRecord(
                    clip_id=clip_id,
                    dataset=cfg.dataset_name,
                    language=speaker["language"],
                    speaker_id=speaker["id"],
                    gender=speaker["gender"],
                    split="",
                    feature_path=feature_path,
                    labels=labels,
                    duration_ms=cfg.frames * 20,
                )
            )
    table = CorpusTable(vocabulary=vocab, records=records, root=out_dir)
    save_manifest(table, out_dir / "manifest.csv")
    return table
