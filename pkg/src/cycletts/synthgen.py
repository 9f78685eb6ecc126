"""Synthetic disjoint-corpus generation.

Each utterance is a tone sequence: every token of a 16-symbol alphabet maps
to a fixed base frequency, so verbal content is recoverable from the audio.
The dimension-1 class (speaker analog) shapes the harmonic envelope (which
frequency bands carry energy); the dimension-2 class (emotion analog) shapes
the temporal contour (amplitude-modulation rate and token rate). The two
cues live in disjoint feature spaces, which a nearest-centroid oracle over
hand-crafted features can verify.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
import yaml

from . import DataError
from .corpus import (CorpusManifest, StyleDimension, StyleLabel, UtteranceRecord,
                     save_manifest)
from .dsp import DspConfig, n_frames_for, write_wav

N_HARMONICS = 6
TOKEN_FADE_SEC = 0.012
AM_RATE_MIN_HZ = 1.5
AM_RATE_MAX_HZ = 6.0
AM_DEPTH = 0.9


@dataclass
class CorpusSpec:
    """Declarative description of a synthetic corpus.

    `cells[c1][c2]` is the utterance count for that class combination;
    absent cells are empty (that is what makes the corpus disjoint).
    """

    dimensions: tuple[StyleDimension, StyleDimension]
    cells: dict[str, dict[str, int]]
    duration_range: tuple[float, float] = (1.0, 3.0)
    token_vocab_size: int = 16
    token_base_duration: float = 0.11

    def __post_init__(self):
        if len(self.dimensions) != 2:
            raise DataError("corpus spec must declare exactly 2 dimensions")
        lo, hi = self.duration_range
        if not (0 < lo <= hi):
            raise DataError("duration_range must be positive and ordered")
        d1, d2 = self.dimensions
        totals1 = {c: 0 for c in d1.classes}
        totals2 = {c: 0 for c in d2.classes}
        for c1, row in self.cells.items():
            if c1 not in d1.classes:
                raise DataError(f"cell row {c1!r} is not a declared {d1.name} class")
            for c2, count in row.items():
                if c2 not in d2.classes:
                    raise DataError(f"cell column {c2!r} is not a declared {d2.name} class")
                if not isinstance(count, int) or count < 0:
                    raise DataError(f"cell ({c1}, {c2}) has invalid count {count!r}")
                totals1[c1] += count
                totals2[c2] += count
        for name, totals in ((d1.name, totals1), (d2.name, totals2)):
            empty = [c for c, n in totals.items() if n == 0]
            if empty:
                raise DataError(f"{name} classes with zero utterances in all cells: {empty}")

    def cell_count(self, c1: str, c2: str) -> int:
        return self.cells.get(c1, {}).get(c2, 0)


def load_corpus_spec(path: str | Path) -> CorpusSpec:
    with open(path) as fh:
        raw = yaml.safe_load(fh)
    try:
        dims = tuple(StyleDimension(d["name"], tuple(d["classes"]))
                     for d in raw["dimensions"])
        spec = CorpusSpec(
            dimensions=dims,
            cells={c1: dict(row) for c1, row in raw["cells"].items()},
            duration_range=tuple(raw.get("duration_range", (1.0, 3.0))),
            token_vocab_size=int(raw.get("token_vocab_size", 16)),
            token_base_duration=float(raw.get("token_base_duration", 0.11)),
        )
    except (KeyError, TypeError) as e:
        raise DataError(f"{path}: malformed corpus spec: {e!r}") from e
    return spec


def token_frequency(symbol_index: int) -> float:
    """Base frequency of a token, semitone steps above 220 Hz."""
    return 220.0 * 2.0 ** (symbol_index / 12.0)


def speaker_harmonic_weights(class_id: int, n_classes: int) -> np.ndarray:
    """Harmonic envelope of a dimension-1 class: a Gaussian bump over harmonic index."""
    span = max(1, n_classes - 1)
    center = 1.5 + 3.5 * class_id / span
    h = np.arange(1, N_HARMONICS + 1, dtype=np.float64)
    w = np.exp(-0.5 * ((h - center) / 1.1) ** 2)
    return w / w.max()


def emotion_params(class_id: int, n_classes: int) -> tuple[float, float, float]:
    """(am_rate_hz, am_depth, duration_factor) of a dimension-2 class.

    Class 0 is the unmodulated (neutral analog) class; the rest get
    geometrically spaced amplitude-modulation rates and distinct token rates.
    """
    if class_id == 0:
        return 0.0, 0.0, 1.0
    n_mod = max(1, n_classes - 1)
    if n_mod == 1:
        rate = AM_RATE_MIN_HZ
    else:
        ratio = (AM_RATE_MAX_HZ / AM_RATE_MIN_HZ) ** (1.0 / (n_mod - 1))
        rate = AM_RATE_MIN_HZ * ratio ** (class_id - 1)
    dur_cycle = (1.25, 0.8, 1.1, 0.95, 1.2, 0.85)
    return rate, AM_DEPTH, dur_cycle[(class_id - 1) % len(dur_cycle)]


def _render_token(symbol: int, weights: np.ndarray, duration: float,
                  sample_rate: int) -> np.ndarray:
    n = max(int(round(duration * sample_rate)), 32)
    t = np.arange(n) / sample_rate
    f0 = token_frequency(symbol)
    wave = np.zeros(n)
    for h, w in enumerate(weights, start=1):
        wave += w * np.sin(2.0 * np.pi * h * f0 * t)
    fade = min(int(TOKEN_FADE_SEC * sample_rate), n // 2)
    if fade > 0:
        ramp = 0.5 - 0.5 * np.cos(np.pi * np.arange(fade) / fade)
        wave[:fade] *= ramp
        wave[-fade:] *= ramp[::-1]
    return wave


def render_utterance(tokens: np.ndarray, speaker_id: int, n_speakers: int,
                     emotion_id: int, n_emotions: int, rng: np.random.Generator,
                     spec: CorpusSpec, sample_rate: int) -> np.ndarray:
    """Deterministic waveform for a token sequence in a given style pair."""
    weights = speaker_harmonic_weights(speaker_id, n_speakers)
    am_rate, am_depth, dur_factor = emotion_params(emotion_id, n_emotions)
    pieces = []
    for sym in tokens:
        dur = spec.token_base_duration * dur_factor * rng.uniform(0.92, 1.08)
        amp = rng.uniform(0.9, 1.1)
        pieces.append(amp * _render_token(int(sym), weights, dur, sample_rate))
    wave = np.concatenate(pieces)
    if am_depth > 0:
        t = np.arange(wave.shape[0]) / sample_rate
        phase = rng.uniform(0.0, 2.0 * np.pi)
        env = 1.0 - am_depth * (0.5 - 0.5 * np.cos(2.0 * np.pi * am_rate * t + phase))
        wave = wave * env
    peak = np.abs(wave).max()
    return 0.5 * wave / peak if peak > 0 else wave


def generate_synthetic_corpus(spec: CorpusSpec, out_dir: str | Path, seed: int,
                              dsp_config: DspConfig | None = None) -> CorpusManifest:
    """Generate waveforms plus a manifest under `out_dir` (deterministic in seed)."""
    dsp_config = dsp_config or DspConfig()
    out_dir = Path(out_dir)
    (out_dir / "wav").mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    d1, d2 = spec.dimensions
    vocab = tuple(f"t{i}" for i in range(spec.token_vocab_size))
    lo, hi = spec.duration_range

    records: list[UtteranceRecord] = []
    for i1, c1 in enumerate(d1.classes):
        for i2, c2 in enumerate(d2.classes):
            count = spec.cell_count(c1, c2)
            _, _, dur_factor = emotion_params(i2, len(d2.classes))
            for i in range(count):
                target_dur = rng.uniform(lo, hi)
                n_tokens = int(np.clip(
                    round(target_dur / (spec.token_base_duration * dur_factor)), 3, 48))
                tokens = rng.integers(0, spec.token_vocab_size, size=n_tokens)
                wave = render_utterance(tokens, i1, len(d1.classes), i2,
                                        len(d2.classes), rng, spec,
                                        dsp_config.sample_rate)
                utt_id = f"{c1}-{c2}-{i:04d}"
                rel = f"wav/{utt_id}.wav"
                write_wav(out_dir / rel, wave, dsp_config.sample_rate)
                records.append(UtteranceRecord(
                    utt_id=utt_id,
                    tokens=tuple(vocab[s] for s in tokens),
                    audio_path=rel,
                    labels=(StyleLabel(0, i1, c1), StyleLabel(1, i2, c2)),
                    duration_frames=n_frames_for(wave.shape[0], dsp_config),
                ))

    manifest = CorpusManifest(out_dir, spec.dimensions, vocab,
                              dsp_config.sample_rate, records)
    save_manifest(manifest)
    return manifest


# ---------------------------------------------------------------------------
# Hand-crafted feature oracle: verifies the generated corpus is separable in
# both dimensions without any learned model.

_SPECTRAL_BANDS_HZ = ((0.0, 900.0), (900.0, 3000.0), (3000.0, 8000.0))
_MODULATION_BANDS_HZ = ((0.75, 2.3), (2.3, 5.0), (5.0, 9.5))


def spectral_band_features(wave: np.ndarray, sample_rate: int) -> np.ndarray:
    """Fractions of spectral energy in fixed frequency bands (speaker cue)."""
    mag = np.abs(np.fft.rfft(wave))
    freqs = np.fft.rfftfreq(wave.shape[0], 1.0 / sample_rate)
    total = mag.sum() + 1e-12
    return np.array([mag[(freqs >= lo) & (freqs < hi)].sum() / total
                     for lo, hi in _SPECTRAL_BANDS_HZ])


def modulation_features(wave: np.ndarray, sample_rate: int,
                        frame: int = 200) -> np.ndarray:
    """Energy-envelope modulation spectrum bands plus depth (emotion cue)."""
    n = (wave.shape[0] // frame) * frame
    env = np.sqrt(np.mean(wave[:n].reshape(-1, frame) ** 2, axis=1))
    mean = env.mean() + 1e-12
    depth = env.std() / mean
    centered = env / mean - 1.0
    spec = np.abs(np.fft.rfft(centered)) ** 2
    freqs = np.fft.rfftfreq(env.shape[0], frame / sample_rate)
    bands = np.array([spec[(freqs >= lo) & (freqs < hi)].sum()
                      for lo, hi in _MODULATION_BANDS_HZ])
    bands = bands / (bands.sum() + 1e-12)
    return np.concatenate([bands, [depth]])


def oracle_features(wave: np.ndarray, sample_rate: int, dimension: int) -> np.ndarray:
    if dimension == 0:
        return spectral_band_features(wave, sample_rate)
    return modulation_features(wave, sample_rate)


def nearest_centroid_accuracy(manifest: CorpusManifest, dimension: int) -> float:
    """Split-half nearest-centroid accuracy of the hand-crafted features."""
    from .dsp import read_wav

    by_class: dict[int, list[np.ndarray]] = {}
    for rec in manifest.records:
        wave, _ = read_wav(manifest.audio_path(rec), manifest.sample_rate)
        feats = oracle_features(wave, manifest.sample_rate, dimension)
        by_class.setdefault(rec.labels[dimension].class_id, []).append(feats)

    train = {c: np.array(f[0::2]) for c, f in by_class.items()}
    test = {c: np.array(f[1::2]) for c, f in by_class.items() if len(f) > 1}
    all_train = np.concatenate(list(train.values()))
    mu, sd = all_train.mean(axis=0), all_train.std(axis=0) + 1e-12
    centroids = {c: ((f - mu) / sd).mean(axis=0) for c, f in train.items()}
    classes = sorted(centroids)
    cmat = np.stack([centroids[c] for c in classes])

    hits = total = 0
    for c, feats in test.items():
        z = (feats - mu) / sd
        pred = np.argmin(((z[:, None, :] - cmat[None]) ** 2).sum(-1), axis=1)
        hits += int((np.array(classes)[pred] == c).sum())
        total += len(feats)
    return hits / max(total, 1)
