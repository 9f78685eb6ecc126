"""Quantitative evaluation: independent style classifiers trained on real
audio, transfer accuracy of synthesized speech, confusion matrices, and
style-embedding export for cluster inspection.
"""

from __future__ import annotations

import dataclasses
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from . import DataError
from .corpus import CorpusData, UtteranceRecord
from .model import ReferenceEncoder, StyleClassifier, Synthesizer, lengths_to_mask
from .training import _to_tensor

log = logging.getLogger(__name__)

EVAL_CLS_SCHEMA_VERSION = 1


@dataclass(frozen=True)
class EvalClassifierConfig:
    n_mel: int = 40
    d_style: int = 32
    ref_channels: tuple[int, ...] = (32, 32, 64, 64)
    ref_rnn_dim: int = 128
    classifier_hidden: int = 64
    steps: int = 1200
    batch_size: int = 32
    learning_rate: float = 1e-3
    seed: int = 0


class EvalClassifier(torch.nn.Module):
    """Reference encoder plus a two-layer MLP; mirrors the in-model pair."""

    def __init__(self, cfg: EvalClassifierConfig, n_classes: int,
                 dimension: int, class_names: tuple[str, ...]):
        super().__init__()
        self.cfg = cfg
        self.dimension = dimension
        self.class_names = tuple(class_names)
        self.encoder = ReferenceEncoder(cfg.n_mel, cfg.ref_channels,
                                        cfg.ref_rnn_dim, cfg.d_style)
        self.head = StyleClassifier(cfg.d_style, cfg.classifier_hidden, n_classes)

    def embed(self, mel: torch.Tensor, lengths: torch.Tensor | None = None) -> torch.Tensor:
        return self.encoder(mel, lengths)

    def forward(self, mel: torch.Tensor, lengths: torch.Tensor | None = None) -> torch.Tensor:
        return self.head(self.embed(mel, lengths))

    def probabilities(self, mel: torch.Tensor,
                      lengths: torch.Tensor | None = None) -> torch.Tensor:
        return F.softmax(self.forward(mel, lengths), dim=-1)


def _collate_mels(mels: list[np.ndarray]) -> tuple[torch.Tensor, torch.Tensor]:
    lengths = torch.tensor([m.shape[0] for m in mels])
    out = torch.zeros(len(mels), int(lengths.max()), mels[0].shape[1])
    for i, m in enumerate(mels):
        out[i, :m.shape[0]] = torch.from_numpy(m)
    return out, lengths


def train_eval_classifier(train_data: CorpusData, val_data: CorpusData,
                          dimension: int, config: EvalClassifierConfig,
                          ) -> tuple[EvalClassifier, float]:
    """Train a style classifier on real audio; returns it with its final
    validation accuracy. Batches are class-balanced."""
    manifest = train_data.manifest
    dim = manifest.dimensions[dimension]
    by_class: dict[int, list[UtteranceRecord]] = {}
    for rec in manifest.records:
        by_class.setdefault(rec.labels[dimension].class_id, []).append(rec)
    if len(by_class) < 2:
        raise DataError(
            f"dimension {dim.name!r} has a single class in the corpus; "
            "nothing to classify")

    torch.manual_seed(config.seed)
    clf = EvalClassifier(config, len(dim.classes), dimension, dim.classes)
    opt = torch.optim.Adam(clf.parameters(), lr=config.learning_rate)
    rng = np.random.default_rng(config.seed)
    class_ids = sorted(by_class)

    clf.train()
    for step in range(config.steps):
        picks = []
        for _ in range(config.batch_size):
            cid = class_ids[rng.integers(len(class_ids))]
            pool = by_class[cid]
            picks.append(pool[rng.integers(len(pool))])
        mels, lengths = _collate_mels([train_data.mel(r) for r in picks])
        labels = torch.tensor([r.labels[dimension].class_id for r in picks])
        logits = clf(mels, lengths)
        loss = F.cross_entropy(logits, labels)
        opt.zero_grad()
        loss.backward()
        opt.step()
        if (step + 1) % 200 == 0:
            acc = classifier_accuracy(clf, val_data, dimension)
            log.info("eval classifier dim=%d step %d loss=%.4f val_acc=%.4f",
                     dimension, step + 1, float(loss), acc)

    return clf, classifier_accuracy(clf, val_data, dimension)


def classifier_accuracy(clf: EvalClassifier, data: CorpusData,
                        dimension: int, chunk: int = 64) -> float:
    clf.eval()
    records = data.records
    hits = 0
    with torch.no_grad():
        for i in range(0, len(records), chunk):
            part = records[i:i + chunk]
            mels, lengths = _collate_mels([data.mel(r) for r in part])
            preds = clf.probabilities(mels, lengths).argmax(dim=-1)
            truth = torch.tensor([r.labels[dimension].class_id for r in part])
            hits += int((preds == truth).sum())
    return hits / max(len(records), 1)


def save_eval_classifier(clf: EvalClassifier, path: str | Path,
                         val_accuracy: float | None = None) -> None:
    payload = {
        "schema_version": EVAL_CLS_SCHEMA_VERSION,
        "config": dataclasses.asdict(clf.cfg),
        "dimension": clf.dimension,
        "class_names": list(clf.class_names),
        "state_dict": clf.state_dict(),
        "val_accuracy": val_accuracy,
    }
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    torch.save(payload, tmp)
    tmp.replace(path)


def load_eval_classifier(path: str | Path) -> tuple[EvalClassifier, float | None]:
    path = Path(path)
    if not path.exists():
        raise DataError(f"classifier checkpoint not found: {path}")
    payload = torch.load(path, map_location="cpu", weights_only=False)
    if payload.get("schema_version") != EVAL_CLS_SCHEMA_VERSION:
        raise DataError(f"{path}: unsupported classifier checkpoint schema")
    raw = dict(payload["config"])
    raw["ref_channels"] = tuple(raw["ref_channels"])
    cfg = EvalClassifierConfig(**raw)
    clf = EvalClassifier(cfg, len(payload["class_names"]), payload["dimension"],
                         tuple(payload["class_names"]))
    clf.load_state_dict(payload["state_dict"])
    clf.eval()
    return clf, payload.get("val_accuracy")


@dataclass
class ConfusionMatrix:
    counts: np.ndarray  # rows = true class, columns = predicted
    class_names: tuple[str, ...]

    def __post_init__(self):
        self.counts = np.asarray(self.counts, dtype=np.int64)
        k = len(self.class_names)
        if self.counts.shape != (k, k):
            raise ValueError(f"confusion counts must be {k}x{k}")
        if np.any(self.counts < 0):
            raise ValueError("confusion counts must be >= 0")

    def accuracy(self) -> float:
        total = self.counts.sum()
        return float(np.trace(self.counts)) / max(int(total), 1)

    def row_sums(self) -> np.ndarray:
        return self.counts.sum(axis=1)

    def to_dict(self) -> dict:
        return {"class_names": list(self.class_names),
                "counts": self.counts.tolist(),
                "accuracy": self.accuracy()}

    def render_png(self, path: str | Path) -> None:
        import matplotlib
        matplotlib.use("Agg")
        import matplotlib.pyplot as plt

        k = len(self.class_names)
        fig, ax = plt.subplots(figsize=(4, 3.5))
        row = self.counts / np.maximum(self.row_sums()[:, None], 1)
        im = ax.imshow(row, cmap="Blues", vmin=0, vmax=1)
        for i in range(k):
            for j in range(k):
                ax.text(j, i, str(self.counts[i, j]), ha="center", va="center",
                        color="black" if row[i, j] < 0.6 else "white", fontsize=9)
        ax.set_xticks(range(k), self.class_names, rotation=45, ha="right")
        ax.set_yticks(range(k), self.class_names)
        ax.set_xlabel("predicted")
        ax.set_ylabel("reference")
        fig.colorbar(im)
        fig.tight_layout()
        fig.savefig(path, dpi=120)
        plt.close(fig)


@dataclass
class TransferReport:
    accuracy: dict[str, float]  # per dimension name
    confusion: ConfusionMatrix  # dimension-2 confusion
    rows: list[dict] = field(default_factory=list)
    embeddings: np.ndarray | None = None  # dim-2 classifier embeddings of outputs
    embedding_labels: list[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {"accuracy": self.accuracy, "confusion": self.confusion.to_dict(),
                "n_samples": len(self.rows), "rows": self.rows}

    def save_json(self, path: str | Path) -> None:
        path = Path(path)
        tmp = path.with_suffix(path.suffix + ".tmp")
        tmp.write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True))
        tmp.replace(path)


def transfer_accuracy(model: Synthesizer, meta: dict,
                      classifiers: dict[int, EvalClassifier],
                      test_data: CorpusData, seed: int,
                      n_texts: int = 25, chunk: int = 16,
                      window: int | None = 7) -> TransferReport:
    """Style-transfer evaluation on the restricted dimension-1 class.

    Every selected test text of the restricted class is synthesized once per
    dimension-2 class, conditioning on its own audio for dimension 1 and a
    seed-chosen reference of that class from the other dimension-1 classes'
    test records; the synthesized spectrograms are then labeled by the
    independent classifiers.
    """
    manifest = test_data.manifest
    restricted_c1, _ = manifest.restricted_class()
    dim1, dim2 = manifest.dimensions
    restricted_id = dim1.class_id(restricted_c1)

    texts = sorted((r for r in manifest.records
                    if r.labels[0].class_id == restricted_id),
                   key=lambda r: r.utt_id)[:n_texts]
    if not texts:
        raise DataError("no test records for the restricted class")

    pools: dict[int, list[UtteranceRecord]] = {}
    for cid in range(len(dim2.classes)):
        pools[cid] = [r for r in manifest.records
                      if r.labels[1].class_id == cid
                      and r.labels[0].class_id != restricted_id]
        if not pools[cid]:
            raise DataError(f"no unrestricted test references for class "
                            f"{dim2.classes[cid]!r}")

    jobs = []
    for ti, text in enumerate(texts):
        for cid in range(len(dim2.classes)):
            rng = np.random.default_rng([seed, ti, cid])
            ref2 = pools[cid][rng.integers(len(pools[cid]))]
            jobs.append((text, cid, ref2))

    cap_factor = int(meta.get("free_run_cap_factor", 4))
    stop_threshold = float(meta.get("stop_threshold", 0.5))
    r = model.cfg.reduction_factor
    k2 = len(dim2.classes)
    counts = np.zeros((k2, k2), dtype=np.int64)
    hits1 = 0
    rows: list[dict] = []
    embeddings: list[np.ndarray] = []
    emb_labels: list[str] = []

    model.eval()
    clf1, clf2 = classifiers[0].eval(), classifiers[1].eval()
    with torch.no_grad():
        for start in range(0, len(jobs), chunk):
            part = jobs[start:start + chunk]
            tokens, tok_len = _pad_tokens([manifest.token_ids(t) for t, _, _ in part])
            e1_in, e1_len = _collate_mels([test_data.mel(t) for t, _, _ in part])
            e2_in, e2_len = _collate_mels([test_data.mel(ref) for _, _, ref in part])
            e1 = model.encode_reference(e1_in, 0, e1_len)
            e2 = model.encode_reference(e2_in, 1, e2_len)
            text_enc = model.encode_text(tokens, tok_len)
            dec = model.decode(text_enc, tok_len, e1, e2,
                               max_frames=cap_factor * tok_len * r,
                               stop_threshold=stop_threshold,
                               attention_window=window)
            synth = dec.mel * lengths_to_mask(dec.lengths, dec.mel.shape[1]).unsqueeze(-1)
            pred1 = clf1.probabilities(synth, dec.lengths).argmax(dim=-1)
            emb2 = clf2.embed(synth, dec.lengths)
            pred2 = F.softmax(clf2.head(emb2), dim=-1).argmax(dim=-1)

            for b, (text, cid, ref2) in enumerate(part):
                counts[cid, int(pred2[b])] += 1
                hits1 += int(pred1[b]) == restricted_id
                rows.append({
                    "text_id": text.utt_id,
                    "reference_id": ref2.utt_id,
                    "intended": dim2.classes[cid],
                    "predicted": dim2.classes[int(pred2[b])],
                    "predicted_dim1": dim1.classes[int(pred1[b])],
                    "frames": int(dec.lengths[b]),
                    "truncated": bool(dec.truncated[b]),
                })
                embeddings.append(emb2[b].numpy())
                emb_labels.append(dim2.classes[cid])

    n = len(jobs)
    acc2 = float(np.trace(counts)) / n
    report = TransferReport(
        accuracy={dim1.name: hits1 / n, dim2.name: acc2},
        confusion=ConfusionMatrix(counts, dim2.classes),
        rows=rows,
        embeddings=np.stack(embeddings),
        embedding_labels=emb_labels,
    )
    return report


def _pad_tokens(seqs: list[np.ndarray]) -> tuple[torch.Tensor, torch.Tensor]:
    lengths = torch.tensor([len(s) for s in seqs])
    out = torch.zeros(len(seqs), int(lengths.max()), dtype=torch.long)
    for i, s in enumerate(seqs):
        out[i, :len(s)] = torch.from_numpy(s)
    return out, lengths


def export_embeddings(clf: EvalClassifier, mels_by_class: dict[str, list[np.ndarray]],
                      n_per_class: int, chunk: int = 64,
                      ) -> tuple[list[str], np.ndarray]:
    """Up to n_per_class reference-encoder embeddings per class.

    Classes with fewer samples contribute what they have (with a warning).
    """
    labels: list[str] = []
    vecs: list[np.ndarray] = []
    clf.eval()
    with torch.no_grad():
        for cname in sorted(mels_by_class):
            mels = mels_by_class[cname][:n_per_class]
            if len(mels) < n_per_class:
                log.warning("class %r has only %d samples (requested %d)",
                            cname, len(mels), n_per_class)
            for start in range(0, len(mels), chunk):
                part = mels[start:start + chunk]
                batch, lengths = _collate_mels(part)
                emb = clf.embed(batch, lengths)
                vecs.extend(e.numpy() for e in emb)
            labels.extend([cname] * len(mels))
    return labels, np.stack(vecs)


def write_embeddings_tsv(path: str | Path, labels: list[str],
                         embeddings: np.ndarray) -> None:
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    dim = embeddings.shape[1]
    with open(tmp, "w") as fh:
        fh.write("label\t" + "\t".join(f"e{i}" for i in range(dim)) + "\n")
        for lab, vec in zip(labels, embeddings):
            fh.write(lab + "\t" + "\t".join(f"{v:.6g}" for v in vec) + "\n")
    tmp.replace(path)


def read_embeddings_tsv(path: str | Path) -> tuple[list[str], np.ndarray]:
    lines = Path(path).read_text().strip().split("\n")
    labels, rows = [], []
    for line in lines[1:]:
        parts = line.split("\t")
        labels.append(parts[0])
        rows.append([float(v) for v in parts[1:]])
    return labels, np.array(rows)


def silhouette(labels: list[str], embeddings: np.ndarray) -> float:
    from sklearn.metrics import silhouette_score

    numeric = np.array([sorted(set(labels)).index(l) for l in labels])
    return float(silhouette_score(embeddings, numeric))


def plot_embeddings(labels: list[str], embeddings: np.ndarray,
                    path: str | Path, seed: int = 0) -> None:
    """2-D projection of the embedding table, one color per class."""
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt
    from sklearn.manifold import TSNE

    n = embeddings.shape[0]
    perplexity = max(2, min(30, (n - 1) // 3))
    proj = TSNE(n_components=2, random_state=seed, perplexity=perplexity,
                init="pca").fit_transform(embeddings)
    fig, ax = plt.subplots(figsize=(4.5, 4))
    for cname in sorted(set(labels)):
        idx = [i for i, l in enumerate(labels) if l == cname]
        ax.scatter(proj[idx, 0], proj[idx, 1], s=14, label=cname, alpha=0.8)
    ax.legend(fontsize=8)
    ax.set_xticks([])
    ax.set_yticks([])
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
