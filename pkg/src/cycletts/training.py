"""The adversarial cycle-consistency training loop.

Every step consumes a batch of paired and unpaired triplets. Paired triplets
are decoded with teacher forcing and reconstructed; unpaired triplets are
synthesized free-running, re-encoded through both reference encoders, and
their embeddings classified against the labels of the original references,
so the decoder is pushed to realize every style combination, including ones
absent from the corpus. Real embeddings of both kinds feed the four style
classifiers (cross-dimension ones behind gradient reversal) plus the
orthogonality penalty.
"""

from __future__ import annotations

import dataclasses
import json
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from . import DataError, NumericalError
from .config import TrainConfig, dump_config
from .corpus import Batch, CorpusData, CorpusManifest, TripletBatch, make_batch
from .losses import LossReport, adv_cycle_loss, cls_loss, ortho_loss, recon_loss, total_loss
from .model import (CHECKPOINT_SCHEMA_VERSION, ModelConfig, Synthesizer,
                    lengths_to_mask, model_config_from_dict, save_model_checkpoint)

log = logging.getLogger(__name__)

TRAIN_CHECKPOINT_SCHEMA_VERSION = 1


def build_model_config(config: TrainConfig, manifest: CorpusManifest) -> ModelConfig:
    return ModelConfig(
        vocab_size=len(manifest.token_vocab) + 1,  # 0 is padding
        class_counts=tuple(len(d.classes) for d in manifest.dimensions),
        n_mel=config.dsp.mel_bins,
        **{f: getattr(config.model, f) for f in (
            "encoder_dim", "decoder_dim", "attention_dim", "attention_rnn_dim",
            "attention_location_filters", "attention_location_kernel",
            "prenet_dim", "d_style", "ref_channels", "ref_rnn_dim",
            "classifier_hidden", "reduction_factor", "reversal_lambda",
            "dropout", "prenet_dropout")},
    )


class SpectrogramDiscriminator(nn.Module):
    """Real-vs-synthesized mel critic used by the fine-tuning game loss."""

    def __init__(self, n_mel: int, channels: tuple[int, ...] = (16, 32, 64)):
        super().__init__()
        chain = []
        prev = 1
        for ch in channels:
            chain += [nn.Conv2d(prev, ch, kernel_size=3, stride=2, padding=1),
                      nn.LeakyReLU(0.2)]
            prev = ch
        self.convs = nn.Sequential(*chain)
        self.out = nn.Linear(channels[-1], 1)
        self.n_down = len(channels)

    def forward(self, mel: torch.Tensor, lengths: torch.Tensor) -> torch.Tensor:
        x = self.convs(mel.unsqueeze(1))  # (B, C, T', M')
        down = lengths
        for _ in range(self.n_down):
            down = (down + 1) // 2
        mask = lengths_to_mask(down.clamp(min=1), x.shape[2])  # (B, T')
        m = mask[:, None, :, None].to(x.dtype)
        pooled = (x * m).sum(dim=(2, 3)) / (m.sum(dim=(2, 3)) * x.shape[3]).clamp(min=1.0)
        return self.out(pooled).squeeze(-1)


@dataclass
class TrainState:
    model: Synthesizer
    optimizer: torch.optim.Optimizer
    config: TrainConfig
    step: int = 0
    stage: str = "main"
    best_total: float = float("inf")
    discriminator: SpectrogramDiscriminator | None = None
    disc_optimizer: torch.optim.Optimizer | None = None

    def ensure_discriminator(self) -> None:
        if self.discriminator is None:
            self.discriminator = SpectrogramDiscriminator(self.model.cfg.n_mel)
            self.disc_optimizer = torch.optim.Adam(
                self.discriminator.parameters(), lr=self.config.learning_rate / 2)


def init_state(config: TrainConfig, manifest: CorpusManifest) -> TrainState:
    torch.manual_seed(config.seed)
    model = Synthesizer(build_model_config(config, manifest))
    optimizer = torch.optim.Adam(model.parameters(), lr=config.learning_rate)
    return TrainState(model=model, optimizer=optimizer, config=config)


def batch_rng(seed: int, step: int) -> np.random.Generator:
    """Stateless per-step sampler stream; resume-safe by construction."""
    return np.random.default_rng([seed, step])


def _to_tensor(arr: np.ndarray) -> torch.Tensor:
    return torch.from_numpy(np.ascontiguousarray(arr))


def _stop_targets(lengths: torch.Tensor, n_frames: int, r: int) -> torch.Tensor:
    """Per-frame stop targets: 1 on the last decoder group of each item."""
    idx = torch.arange(n_frames).unsqueeze(0)
    return (idx >= (lengths - r).clamp(min=0).unsqueeze(1)).float()


def _classify_group(model: Synthesizer, embeddings: list[torch.Tensor],
                    labels: torch.Tensor, pairs: list[tuple[int, int]],
                    breakdown: dict[str, float], tag: str):
    """Sum of classifier losses over (i, j) pairs.

    `labels[:, i, j]` must hold the target class of embedding i for
    dimension j.
    """
    total = None
    for i, j in pairs:
        probs = model.classify_style(embeddings[i], i, j)
        loss = cls_loss(probs, labels[:, i, j])
        breakdown[f"{tag}:{i}{j}"] = float(loss.detach())
        total = loss if total is None else total + loss
    return total


def compute_losses(model: Synthesizer, batch: Batch, config: TrainConfig,
                   discriminator: SpectrogramDiscriminator | None = None,
                   ) -> tuple[torch.Tensor, LossReport, dict]:
    """All loss terms for one batch. Callers choose train/eval mode on the
    model; gradients flow whenever the surrounding context allows them."""
    weights = config.weights
    cfg = model.cfg
    r = cfg.reduction_factor
    ablate = config.ablate_intercross
    pairs_all = [(i, j) for i in range(cfg.n_dims) for j in range(cfg.n_dims)]
    pairs_active = [(i, j) for (i, j) in pairs_all if (i == j) or not ablate]

    breakdown: dict[str, float] = {}
    extras: dict = {"n_reencoded": 0, "n_paired": 0, "n_unpaired": 0}
    recon = torch.tensor(0.0)
    stop = torch.tensor(0.0)
    cls_paired = cls_unpaired = cls_synth = None
    ortho_terms: list[tuple[torch.Tensor, torch.Tensor]] = []
    game = None

    def encode_refs(tb: TripletBatch) -> list[torch.Tensor]:
        return [model.encode_reference(_to_tensor(tb.ref_mels[d]),
                                       d, _to_tensor(tb.ref_lengths[d]))
                for d in range(cfg.n_dims)]

    if batch.paired is not None and batch.paired.size > 0:
        tb = batch.paired
        extras["n_paired"] = tb.size
        tokens = _to_tensor(tb.tokens)
        tok_len = _to_tensor(tb.token_lengths)
        embs = encode_refs(tb)
        ortho_terms.append((embs[0], embs[1]))

        target = _to_tensor(tb.target_mel).float()
        n_frames = target.shape[1]
        pad = (-n_frames) % r
        teacher = F.pad(target, (0, 0, 0, pad)) if pad else target
        text_enc = model.encode_text(tokens, tok_len)
        dec = model.decode(text_enc, tok_len, embs[0], embs[1], teacher=teacher)
        mask = _to_tensor(tb.target_mask())
        recon = recon_loss(target, dec.mel[:, :n_frames], mask)

        lengths = _to_tensor(tb.target_lengths)
        stop_target = _stop_targets(lengths, teacher.shape[1], r)
        stop_raw = F.binary_cross_entropy_with_logits(
            dec.stop_logits, stop_target, reduction="none",
            pos_weight=torch.tensor(config.stop_pos_weight))
        stop_mask = lengths_to_mask(lengths, teacher.shape[1]).float()
        stop = (stop_raw * stop_mask).sum() / stop_mask.sum().clamp(min=1.0)

        labels = _to_tensor(tb.ref_labels)
        cls_paired = _classify_group(model, embs, labels, pairs_active,
                                     breakdown, "paired")

    if batch.unpaired is not None and batch.unpaired.size > 0 and not ablate:
        tb = batch.unpaired
        extras["n_unpaired"] = tb.size
        tokens = _to_tensor(tb.tokens)
        tok_len = _to_tensor(tb.token_lengths)
        embs = encode_refs(tb)
        ortho_terms.append((embs[0], embs[1]))
        labels = _to_tensor(tb.ref_labels)
        cls_unpaired = _classify_group(model, embs, labels, pairs_active,
                                       breakdown, "unpaired")

        text_enc = model.encode_text(tokens, tok_len)
        cap = config.free_run_cap_factor * tok_len * r
        dec = model.decode(text_enc, tok_len, embs[0], embs[1], max_frames=cap,
                           stop_threshold=config.stop_threshold)
        synth_mask = lengths_to_mask(dec.lengths, dec.mel.shape[1])
        synth = dec.mel * synth_mask.unsqueeze(-1)
        re_embs = [model.encode_reference(synth, d, dec.lengths)
                   for d in range(cfg.n_dims)]
        extras["n_reencoded"] = tb.size
        extras["synth_detached"] = synth.detach()
        extras["synth_lengths"] = dec.lengths

        # the synthesized sample's class in dimension j is the class of
        # reference j, so every re-encoded embedding shares one label row
        synth_labels = labels.diagonal(dim1=1, dim2=2)  # (B, n_dims)
        synth_labels = synth_labels.unsqueeze(1).expand(-1, cfg.n_dims, -1)
        cls_synth = _classify_group(model, re_embs, synth_labels, pairs_active,
                                    breakdown, "synth")

        if discriminator is not None:
            logits = discriminator(synth, dec.lengths)
            game = F.binary_cross_entropy_with_logits(
                logits, torch.ones_like(logits))

    adv = adv_cycle_loss(cls_paired, cls_unpaired, cls_synth, weights)
    if isinstance(adv, (int, float)):
        adv = torch.tensor(float(adv))
    if ortho_terms:
        e1 = torch.cat([a for a, _ in ortho_terms])
        e2 = torch.cat([b for _, b in ortho_terms])
        ortho = ortho_loss(e1, e2)
    else:
        ortho = torch.tensor(0.0)

    total = total_loss(recon, adv, ortho, weights, stop=stop, game=game)
    extras["parts"] = {"recon": recon, "stop": stop, "ortho": ortho,
                       "cls_paired": cls_paired, "cls_unpaired": cls_unpaired,
                       "cls_synthesized": cls_synth, "adv_cycle": adv}

    report = LossReport(
        recon=float(recon.detach()),
        cls_paired=float(cls_paired.detach()) if cls_paired is not None else 0.0,
        cls_unpaired=float(cls_unpaired.detach()) if cls_unpaired is not None else 0.0,
        cls_synthesized=float(cls_synth.detach()) if cls_synth is not None else 0.0,
        adv_cycle=float(adv.detach()),
        ortho=float(ortho.detach()),
        stop=float(stop.detach()),
        game=float(game.detach()) if game is not None else 0.0,
        total=float(total.detach()),
        per_classifier=breakdown,
        n_paired=extras["n_paired"],
        n_unpaired=extras["n_unpaired"],
        n_reencoded=extras["n_reencoded"],
    )
    return total, report, extras


def evaluate_losses(model: Synthesizer, batch: Batch, config: TrainConfig) -> LossReport:
    """Deterministic loss report on a fixed batch (no dropout, no update)."""
    was_training = model.training
    model.eval()
    with torch.no_grad():
        _, report, _ = compute_losses(model, batch, config)
    if was_training:
        model.train()
    return report


def current_lr(config: TrainConfig, step: int) -> float:
    return max(config.learning_rate * config.lr_decay ** step, config.lr_min)


def train_step(state: TrainState, batch: Batch,
               use_game: bool = False) -> LossReport:
    """One optimizer update. Raises NumericalError (state untouched) if any
    loss term is non-finite."""
    config = state.config
    state.model.train()
    if use_game:
        state.ensure_discriminator()
    disc = state.discriminator if use_game else None
    total, report, extras = compute_losses(state.model, batch, config, disc)

    lr = current_lr(config, state.step)
    for group in state.optimizer.param_groups:
        group["lr"] = lr
    state.optimizer.zero_grad()
    total.backward()
    if config.grad_clip > 0:
        nn.utils.clip_grad_norm_(state.model.parameters(), config.grad_clip)
    state.optimizer.step()

    if use_game and "synth_detached" in extras and batch.paired is not None:
        report.disc, disc_acc = _discriminator_update(state, batch, extras)
        report.per_classifier["disc_acc"] = disc_acc
    state.step += 1
    return report


def _discriminator_update(state: TrainState, batch: Batch, extras: dict) -> tuple[float, float]:
    disc = state.discriminator
    real = _to_tensor(batch.paired.target_mel).float()
    real_len = _to_tensor(batch.paired.target_lengths)
    fake = extras["synth_detached"]
    fake_len = extras["synth_lengths"]
    logits_real = disc(real, real_len)
    logits_fake = disc(fake, fake_len)
    loss = 0.5 * (F.binary_cross_entropy_with_logits(logits_real, torch.ones_like(logits_real))
                  + F.binary_cross_entropy_with_logits(logits_fake, torch.zeros_like(logits_fake)))
    state.disc_optimizer.zero_grad()
    loss.backward()
    state.disc_optimizer.step()
    with torch.no_grad():
        acc = 0.5 * (float((logits_real > 0).float().mean())
                     + float((logits_fake <= 0).float().mean()))
    return float(loss.detach()), acc


def save_train_checkpoint(state: TrainState, path: str | Path) -> None:
    path = Path(path)
    payload = {
        "schema_version": TRAIN_CHECKPOINT_SCHEMA_VERSION,
        "model_schema_version": CHECKPOINT_SCHEMA_VERSION,
        "step": state.step,
        "stage": state.stage,
        "best_total": state.best_total,
        "model_config": dataclasses.asdict(state.model.cfg),
        "state_dict": state.model.state_dict(),
        "optimizer": state.optimizer.state_dict(),
        "config": dump_config(state.config),
        "torch_rng": torch.get_rng_state(),
        "discriminator": (state.discriminator.state_dict()
                          if state.discriminator is not None else None),
        "disc_optimizer": (state.disc_optimizer.state_dict()
                           if state.disc_optimizer is not None else None),
    }
    tmp = path.with_suffix(path.suffix + ".tmp")
    torch.save(payload, tmp)
    tmp.replace(path)


def load_train_checkpoint(path: str | Path, config: TrainConfig) -> TrainState:
    path = Path(path)
    if not path.exists():
        raise DataError(f"training checkpoint not found: {path}")
    payload = torch.load(path, map_location="cpu", weights_only=False)
    if payload.get("schema_version") != TRAIN_CHECKPOINT_SCHEMA_VERSION:
        raise DataError(f"{path}: unsupported training checkpoint schema")
    model = Synthesizer(model_config_from_dict(payload["model_config"]))
    model.load_state_dict(payload["state_dict"])
    optimizer = torch.optim.Adam(model.parameters(), lr=config.learning_rate)
    optimizer.load_state_dict(payload["optimizer"])
    state = TrainState(model=model, optimizer=optimizer, config=config,
                       step=payload["step"], stage=payload["stage"],
                       best_total=payload["best_total"])
    if payload.get("discriminator") is not None:
        state.ensure_discriminator()
        state.discriminator.load_state_dict(payload["discriminator"])
        state.disc_optimizer.load_state_dict(payload["disc_optimizer"])
    torch.set_rng_state(payload["torch_rng"])
    return state


class MetricsWriter:
    """Append-only JSONL metrics log, one record per training step."""

    def __init__(self, path: str | Path):
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self._fh = open(self.path, "a")

    def write(self, record: dict) -> None:
        self._fh.write(json.dumps(record, sort_keys=True) + "\n")
        self._fh.flush()

    def close(self) -> None:
        self._fh.close()


def train(config: TrainConfig, data: CorpusData, out_dir: str | Path,
          resume: bool = True) -> Path:
    """Main training stage followed by the adversarial fine-tuning stage.

    Returns the path of the final model checkpoint. Restartable: with
    `resume` the latest checkpoint in `out_dir` continues seamlessly and
    the final step counter matches an uninterrupted run.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    dump_config(config, out_dir / "config_effective.yaml")

    latest = out_dir / "ckpt_latest.pt"
    if resume and latest.exists():
        state = load_train_checkpoint(latest, config)
        log.info("resumed from %s at step %d (%s stage)", latest, state.step, state.stage)
    else:
        state = init_state(config, data.manifest)

    metrics = MetricsWriter(out_dir / "metrics.jsonl")
    try:
        _run_stage(state, data, metrics, out_dir, stage="main",
                   until=config.main_epochs, use_game=False)
        if config.finetune_epochs > 0:
            if state.stage == "main":
                state.stage = "finetune"
            state.ensure_discriminator()
            _run_stage(state, data, metrics, out_dir, stage="finetune",
                       until=config.main_epochs + config.finetune_epochs,
                       use_game=True)
    finally:
        metrics.close()

    final = out_dir / "model_final.pt"
    save_model_checkpoint(state.model, final, meta=checkpoint_meta(config, data.manifest))
    save_train_checkpoint(state, latest)
    return final


def checkpoint_meta(config: TrainConfig, manifest: CorpusManifest) -> dict:
    from .config import dataclass_to_dict

    return {
        "token_vocab": list(manifest.token_vocab),
        "dimensions": [{"name": d.name, "classes": list(d.classes)}
                       for d in manifest.dimensions],
        "dsp": dataclass_to_dict(config.dsp),
        "free_run_cap_factor": config.free_run_cap_factor,
        "stop_threshold": config.stop_threshold,
        "ablate_intercross": config.ablate_intercross,
    }


def _run_stage(state: TrainState, data: CorpusData, metrics: MetricsWriter,
               out_dir: Path, stage: str, until: int, use_game: bool) -> None:
    config = state.config
    if state.step >= until or state.stage != stage:
        return
    while state.step < until:
        rng = batch_rng(config.seed, state.step)
        batch = make_batch(data, rng, config.n_pairs,
                           include_unpaired=not config.ablate_intercross)
        step_before = state.step
        report = train_step(state, batch, use_game=use_game)
        record = {"step": step_before, "stage": stage,
                  "lr": current_lr(config, step_before)}
        record.update(report.as_dict())
        metrics.write(record)
        state.best_total = min(state.best_total, report.total)
        if state.step % config.checkpoint_interval == 0 or state.step == until:
            save_train_checkpoint(state, out_dir / "ckpt_latest.pt")
        if state.step % 100 == 0 or state.step == until:
            log.info("step %d [%s] total=%.4f recon=%.4f adv=%.4f",
                     state.step, stage, report.total, report.recon, report.adv_cycle)


def finetune_adversarial(state: TrainState, data: CorpusData,
                         metrics: MetricsWriter | None = None,
                         n_steps: int | None = None) -> TrainState:
    """Continue training with the spectrogram-realism game loss enabled."""
    config = state.config
    n_steps = config.finetune_epochs if n_steps is None else n_steps
    state.stage = "finetune"
    state.ensure_discriminator()
    target = state.step + n_steps
    while state.step < target:
        rng = batch_rng(config.seed, state.step)
        batch = make_batch(data, rng, config.n_pairs,
                           include_unpaired=not config.ablate_intercross)
        step_before = state.step
        report = train_step(state, batch, use_game=True)
        if metrics is not None:
            record = {"step": step_before, "stage": "finetune",
                      "lr": current_lr(config, step_before)}
            record.update(report.as_dict())
            metrics.write(record)
    return state
