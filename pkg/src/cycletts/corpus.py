"""Style-labeled corpora: manifest IO, triplet sampling, and batch assembly.

A corpus is a directory with a line-delimited `manifest.jsonl` (header line
plus one record per line) and a `wav/` tree of mono PCM files. Records carry
a token sequence (the text analog) and one style label per dimension.
Triplet sampling produces the two kinds of training items: paired triplets
(a text, its own audio in one reference slot, a style-matched sample in the
other) and unpaired triplets (a text plus two independently random
references).
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import DataError
from .dsp import DspConfig, analyze, compress, read_wav

log = logging.getLogger(__name__)

MANIFEST_SCHEMA_VERSION = 1
MANIFEST_NAME = "manifest.jsonl"

PAIRED = "paired"
UNPAIRED = "unpaired"

# Fixed split policy so training and evaluation agree on the test set
# regardless of their own seeds.
DEFAULT_SPLIT = (0.8, 0.1, 0.1)
SPLIT_SEED = 7151


@dataclass(frozen=True)
class StyleLabel:
    dimension: int
    class_id: int
    class_name: str


@dataclass(frozen=True)
class StyleDimension:
    name: str
    classes: tuple[str, ...]

    def class_id(self, name: str) -> int:
        try:
            return self.classes.index(name)
        except ValueError:
            raise DataError(f"class {name!r} not declared for dimension {self.name!r}") from None


@dataclass
class UtteranceRecord:
    utt_id: str
    tokens: tuple[str, ...]
    audio_path: str  # relative to the corpus root
    labels: tuple[StyleLabel, ...]  # exactly one per dimension
    duration_frames: int

    def label_ids(self) -> tuple[int, ...]:
        return tuple(lab.class_id for lab in self.labels)


@dataclass
class CorpusManifest:
    root: Path
    dimensions: tuple[StyleDimension, ...]
    token_vocab: tuple[str, ...]
    sample_rate: int
    records: list[UtteranceRecord]
    disjointness_map: dict[str, tuple[str, ...]] = field(default_factory=dict)

    def __post_init__(self):
        if not self.disjointness_map:
            self.disjointness_map = self._build_disjointness()

    def _build_disjointness(self) -> dict[str, tuple[str, ...]]:
        seen: dict[str, set[str]] = {c: set() for c in self.dimensions[0].classes}
        for rec in self.records:
            seen[rec.labels[0].class_name].add(rec.labels[1].class_name)
        return {c: tuple(sorted(v)) for c, v in seen.items()}

    @property
    def n_dims(self) -> int:
        return len(self.dimensions)

    def audio_path(self, rec: UtteranceRecord) -> Path:
        return self.root / rec.audio_path

    def token_id(self, symbol: str) -> int:
        # id 0 is reserved for padding
        return self.token_vocab.index(symbol) + 1

    def token_ids(self, rec: UtteranceRecord) -> np.ndarray:
        return np.array([self.token_id(s) for s in rec.tokens], dtype=np.int64)

    def records_with_class(self, dim: int, class_id: int) -> list[UtteranceRecord]:
        return [r for r in self.records if r.labels[dim].class_id == class_id]

    def restricted_class(self) -> tuple[str, str]:
        """The dimension-1 class with exactly one dimension-2 class, plus that class.

        Raises DataError if the corpus is not disjoint in that sense.
        """
        singles = [(c1, v[0]) for c1, v in self.disjointness_map.items() if len(v) == 1]
        if not singles:
            raise DataError("corpus has no restricted dimension-1 class")
        return singles[0]


def _record_to_json(rec: UtteranceRecord, dims: tuple[StyleDimension, ...]) -> str:
    obj = {
        "utt_id": rec.utt_id,
        "audio": rec.audio_path,
        "tokens": " ".join(rec.tokens),
        "duration_frames": rec.duration_frames,
    }
    for dim, lab in zip(dims, rec.labels):
        obj[dim.name] = lab.class_name
    return json.dumps(obj, sort_keys=True)


def save_manifest(manifest: CorpusManifest, path: str | Path | None = None) -> Path:
    path = Path(path) if path is not None else manifest.root / MANIFEST_NAME
    header = {
        "schema_version": MANIFEST_SCHEMA_VERSION,
        "kind": "corpus-manifest",
        "sample_rate": manifest.sample_rate,
        "dimensions": [{"name": d.name, "classes": list(d.classes)} for d in manifest.dimensions],
        "token_vocab": list(manifest.token_vocab),
    }
    tmp = path.with_suffix(".tmp")
    with open(tmp, "w") as fh:
        fh.write(json.dumps(header, sort_keys=True) + "\n")
        for rec in manifest.records:
            fh.write(_record_to_json(rec, manifest.dimensions) + "\n")
    tmp.replace(path)
    return path


def load_manifest(path: str | Path, check_audio: bool = True) -> CorpusManifest:
    """Load and validate a corpus manifest.

    `path` may be the manifest file or the corpus directory containing
    `manifest.jsonl`. Raises DataError naming the offending record for
    duplicate ids, undeclared labels, or missing audio files.
    """
    path = Path(path)
    if path.is_dir():
        path = path / MANIFEST_NAME
    if not path.exists():
        raise DataError(f"manifest not found: {path}")
    root = path.parent

    with open(path) as fh:
        lines = [ln for ln in (l.strip() for l in fh) if ln]
    if not lines:
        raise DataError(f"{path}: empty manifest")
    try:
        header = json.loads(lines[0])
    except json.JSONDecodeError as e:
        raise DataError(f"{path}: bad header line: {e}") from e
    if header.get("schema_version") != MANIFEST_SCHEMA_VERSION:
        raise DataError(f"{path}: unsupported schema_version {header.get('schema_version')!r}")

    dims = tuple(StyleDimension(d["name"], tuple(d["classes"])) for d in header["dimensions"])
    vocab = tuple(header["token_vocab"])
    sample_rate = int(header["sample_rate"])

    records: list[UtteranceRecord] = []
    seen_ids: set[str] = set()
    for lineno, line in enumerate(lines[1:], start=2):
        try:
            obj = json.loads(line)
        except json.JSONDecodeError as e:
            raise DataError(f"{path}:{lineno}: bad record line: {e}") from e
        utt_id = obj["utt_id"]
        if utt_id in seen_ids:
            raise DataError(f"{path}:{lineno}: duplicate utt_id {utt_id!r}")
        seen_ids.add(utt_id)
        tokens = tuple(obj["tokens"].split())
        if not tokens:
            raise DataError(f"record {utt_id!r}: empty token sequence")
        for sym in tokens:
            if sym not in vocab:
                raise DataError(f"record {utt_id!r}: token {sym!r} not in vocabulary")
        labels = []
        for di, dim in enumerate(dims):
            name = obj.get(dim.name)
            if name is None:
                raise DataError(f"record {utt_id!r}: missing label for dimension {dim.name!r}")
            if name not in dim.classes:
                raise DataError(
                    f"record {utt_id!r}: label {name!r} not in declared classes "
                    f"for dimension {dim.name!r}")
            labels.append(StyleLabel(di, dim.classes.index(name), name))
        duration = int(obj["duration_frames"])
        if duration < 1:
            raise DataError(f"record {utt_id!r}: duration_frames must be >= 1")
        if check_audio and not (root / obj["audio"]).exists():
            raise DataError(f"record {utt_id!r}: audio file missing: {obj['audio']}")
        records.append(UtteranceRecord(utt_id, tokens, obj["audio"], tuple(labels), duration))

    manifest = CorpusManifest(root, dims, vocab, sample_rate, records)
    for di, dim in enumerate(dims):
        present = {r.labels[di].class_name for r in records}
        missing = set(dim.classes) - present
        if missing:
            raise DataError(
                f"dimension {dim.name!r}: declared classes with no records: {sorted(missing)}")
    return manifest


@dataclass
class Triplet:
    """One training item: a text plus one reference spectrogram per dimension."""

    text_id: str
    text_tokens: np.ndarray  # (T,) int64 token ids
    ref_mels: list[np.ndarray]  # per dimension, (frames, mel_bins) compressed mel
    ref_ids: list[str]
    ref_labels: np.ndarray  # (n_dims, n_dims): label of reference i in dimension j
    pairing: str  # PAIRED or UNPAIRED
    paired_target: np.ndarray | None = None  # compressed mel of the text's own audio
    paired_form: int | None = None  # dimension whose reference is the paired sample

    def __post_init__(self):
        if self.pairing == PAIRED and self.paired_target is None:
            raise ValueError("paired triplet needs a target spectrogram")
        if self.pairing == UNPAIRED and self.paired_target is not None:
            raise ValueError("unpaired triplet must not carry a target")


class CorpusData:
    """A manifest plus an in-memory cache of compressed mel features."""

    def __init__(self, manifest: CorpusManifest, dsp_config: DspConfig):
        self.manifest = manifest
        self.dsp = dsp_config
        self._mels: dict[str, np.ndarray] = {}
        self._by_id = {r.utt_id: r for r in manifest.records}
        # per (dimension, class) record pools for style-matched sampling
        self._pools: list[list[list[UtteranceRecord]]] = [
            [[] for _ in dim.classes] for dim in manifest.dimensions]
        for rec in manifest.records:
            for di, lab in enumerate(rec.labels):
                self._pools[di][lab.class_id].append(rec)
        self._warned_single: set[tuple[int, int]] = set()

    @property
    def records(self) -> list[UtteranceRecord]:
        return self.manifest.records

    def record(self, utt_id: str) -> UtteranceRecord:
        return self._by_id[utt_id]

    def mel(self, rec: UtteranceRecord) -> np.ndarray:
        """Compressed mel spectrogram, cached per utterance."""
        cached = self._mels.get(rec.utt_id)
        if cached is None:
            wave, _ = read_wav(self.manifest.audio_path(rec), self.manifest.sample_rate)
            _, mel = analyze(wave, self.dsp)
            cached = compress(mel.values).astype(np.float32)
            self._mels[rec.utt_id] = cached
        return cached

    def warm_cache(self) -> None:
        for rec in self.records:
            self.mel(rec)

    def _labels_matrix(self, refs: list[UtteranceRecord]) -> np.ndarray:
        return np.array([[lab.class_id for lab in r.labels] for r in refs], dtype=np.int64)

    def sample_paired_triplet(self, rng: np.random.Generator) -> Triplet:
        """A text with its own audio in one slot and a style-matched sample in the other.

        The slot holding the paired sample is chosen uniformly between the two
        dimensions. If the style-matched pool for the other dimension has only
        the utterance itself, the paired sample is reused (logged once).
        """
        recs = self.records
        u = recs[rng.integers(len(recs))]
        form = int(rng.integers(2))
        other = 1 - form
        key_class = u.labels[other].class_id
        pool = [r for r in self._pools[other][key_class] if r.utt_id != u.utt_id]
        if pool:
            star = pool[rng.integers(len(pool))]
        else:
            star = u
            key = (other, key_class)
            if key not in self._warned_single:
                self._warned_single.add(key)
                log.warning(
                    "style class %r of dimension %d has a single utterance; "
                    "reusing the paired sample as style-matched reference",
                    self.manifest.dimensions[other].classes[key_class], other)
        refs = [u, star] if form == 0 else [star, u]
        return Triplet(
            text_id=u.utt_id,
            text_tokens=self.manifest.token_ids(u),
            ref_mels=[self.mel(r) for r in refs],
            ref_ids=[r.utt_id for r in refs],
            ref_labels=self._labels_matrix(refs),
            pairing=PAIRED,
            paired_target=self.mel(u),
            paired_form=form,
        )

    def sample_unpaired_triplet(self, rng: np.random.Generator) -> Triplet:
        """A random text plus one uniformly random reference per dimension."""
        recs = self.records
        u = recs[rng.integers(len(recs))]
        refs = [recs[rng.integers(len(recs))] for _ in self.manifest.dimensions]
        return Triplet(
            text_id=u.utt_id,
            text_tokens=self.manifest.token_ids(u),
            ref_mels=[self.mel(r) for r in refs],
            ref_ids=[r.utt_id for r in refs],
            ref_labels=self._labels_matrix(refs),
            pairing=UNPAIRED,
        )


def lengths_to_mask(lengths: np.ndarray, max_len: int | None = None) -> np.ndarray:
    lengths = np.asarray(lengths, dtype=np.int64)
    if max_len is None:
        max_len = int(lengths.max())
    return np.arange(max_len)[None, :] < lengths[:, None]


@dataclass
class TripletBatch:
    """Padded arrays for a list of same-pairing triplets."""

    pairing: str
    tokens: np.ndarray  # (B, T) int64, 0-padded
    token_lengths: np.ndarray  # (B,)
    ref_mels: list[np.ndarray]  # per dim: (B, F_d, M) float32
    ref_lengths: list[np.ndarray]  # per dim: (B,)
    ref_labels: np.ndarray  # (B, n_dims, n_dims)
    target_mel: np.ndarray | None = None  # (B, F, M)
    target_lengths: np.ndarray | None = None
    paired_form: np.ndarray | None = None
    text_ids: list[str] = field(default_factory=list)

    @property
    def size(self) -> int:
        return self.tokens.shape[0]

    def target_mask(self) -> np.ndarray:
        return lengths_to_mask(self.target_lengths, self.target_mel.shape[1])


@dataclass
class Batch:
    paired: TripletBatch | None
    unpaired: TripletBatch | None

    @property
    def n_triplets(self) -> int:
        return sum(b.size for b in (self.paired, self.unpaired) if b is not None)


def _pad_stack(arrays: list[np.ndarray]) -> tuple[np.ndarray, np.ndarray]:
    lengths = np.array([a.shape[0] for a in arrays], dtype=np.int64)
    out = np.zeros((len(arrays), int(lengths.max())) + arrays[0].shape[1:],
                   dtype=arrays[0].dtype)
    for i, a in enumerate(arrays):
        out[i, :a.shape[0]] = a
    return out, lengths


def collate_triplets(triplets: list[Triplet]) -> TripletBatch:
    if not triplets:
        raise ValueError("cannot collate an empty triplet list")
    pairing = triplets[0].pairing
    if any(t.pairing != pairing for t in triplets):
        raise ValueError("collate_triplets needs a single pairing kind")
    tokens, tok_len = _pad_stack([t.text_tokens for t in triplets])
    n_dims = len(triplets[0].ref_mels)
    ref_mels, ref_lengths = [], []
    for d in range(n_dims):
        mels, lens = _pad_stack([t.ref_mels[d] for t in triplets])
        ref_mels.append(mels)
        ref_lengths.append(lens)
    batch = TripletBatch(
        pairing=pairing,
        tokens=tokens,
        token_lengths=tok_len,
        ref_mels=ref_mels,
        ref_lengths=ref_lengths,
        ref_labels=np.stack([t.ref_labels for t in triplets]),
        text_ids=[t.text_id for t in triplets],
    )
    if pairing == PAIRED:
        batch.target_mel, batch.target_lengths = _pad_stack(
            [t.paired_target for t in triplets])
        batch.paired_form = np.array([t.paired_form for t in triplets], dtype=np.int64)
    return batch


def make_batch(data: CorpusData, rng: np.random.Generator, n_pairs: int,
               include_unpaired: bool = True) -> Batch:
    """n_pairs paired triplets plus (unless disabled) n_pairs unpaired ones."""
    if n_pairs < 1:
        raise ValueError("n_pairs must be >= 1")
    paired = collate_triplets([data.sample_paired_triplet(rng) for _ in range(n_pairs)])
    unpaired = None
    if include_unpaired:
        unpaired = collate_triplets(
            [data.sample_unpaired_triplet(rng) for _ in range(n_pairs)])
    return Batch(paired=paired, unpaired=unpaired)


def split_manifest(manifest: CorpusManifest, fractions: tuple[float, float, float],
                   seed: int) -> tuple[CorpusManifest, CorpusManifest, CorpusManifest]:
    """Deterministic stratified train/val/test split by (dim-1, dim-2) cell.

    Every non-empty cell keeps at least one training record; val/test shares
    may be empty for very small cells.
    """
    if abs(sum(fractions) - 1.0) > 1e-9:
        raise ValueError("split fractions must sum to 1")
    rng = np.random.default_rng(seed)
    cells: dict[tuple[int, int], list[UtteranceRecord]] = {}
    for rec in manifest.records:
        cells.setdefault((rec.labels[0].class_id, rec.labels[1].class_id), []).append(rec)
    parts: tuple[list[UtteranceRecord], ...] = ([], [], [])
    for key in sorted(cells):
        recs = sorted(cells[key], key=lambda r: r.utt_id)
        order = rng.permutation(len(recs))
        n = len(recs)
        n_val = int(n * fractions[1])
        n_test = int(n * fractions[2])
        n_train = max(1, n - n_val - n_test)
        shuffled = [recs[i] for i in order]
        parts[0].extend(shuffled[:n_train])
        parts[1].extend(shuffled[n_train:n_train + n_val])
        parts[2].extend(shuffled[n_train + n_val:])
    out = []
    for recs in parts:
        recs = sorted(recs, key=lambda r: r.utt_id)
        out.append(CorpusManifest(manifest.root, manifest.dimensions,
                                  manifest.token_vocab, manifest.sample_rate, recs))
    return tuple(out)
