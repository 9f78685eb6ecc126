"""The synthesizer: text encoder, per-dimension reference encoders, an
attention-based autoregressive mel decoder, and adversarial style
classifiers behind a gradient reversal layer.

The decoder concatenates both style embeddings to the attention context at
every step, so the text drives content while the references drive style.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass
from pathlib import Path

import torch
import torch.nn.functional as F
from torch import nn

from . import DataError

CHECKPOINT_SCHEMA_VERSION = 1


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int  # token ids are 1..vocab_size-1; 0 is padding
    class_counts: tuple[int, int]  # style classes per dimension
    n_mel: int = 40
    encoder_dim: int = 128
    decoder_dim: int = 128
    attention_dim: int = 64
    attention_rnn_dim: int = 128
    attention_location_filters: int = 16
    attention_location_kernel: int = 15
    prenet_dim: int = 64
    d_style: int = 32
    ref_channels: tuple[int, ...] = (32, 32, 64, 64)
    ref_rnn_dim: int = 128
    classifier_hidden: int = 64
    reduction_factor: int = 2
    reversal_lambda: float = 1.0
    dropout: float = 0.1
    prenet_dropout: float = 0.5

    def __post_init__(self):
        sizes = (self.vocab_size, self.n_mel, self.encoder_dim, self.decoder_dim,
                 self.attention_dim, self.attention_rnn_dim, self.prenet_dim,
                 self.d_style, self.ref_rnn_dim, self.classifier_hidden,
                 self.reduction_factor)
        if min(sizes) <= 0 or min(self.class_counts) <= 0:
            raise ValueError("all ModelConfig sizes must be positive")
        if self.reversal_lambda < 0:
            raise ValueError("reversal_lambda must be >= 0")

    @property
    def n_dims(self) -> int:
        return len(self.class_counts)


class _GradientReversal(torch.autograd.Function):
    """Identity forward; backward multiplies the gradient by -lambda."""

    @staticmethod
    def forward(ctx, x, lam):
        ctx.lam = lam
        return x.view_as(x)

    @staticmethod
    def backward(ctx, grad_output):
        return grad_output.neg() * ctx.lam, None


def gradient_reversal(x: torch.Tensor, lam: float = 1.0) -> torch.Tensor:
    if lam < 0:
        raise ValueError("reversal strength must be >= 0")
    return _GradientReversal.apply(x, lam)


def lengths_to_mask(lengths: torch.Tensor, max_len: int | None = None) -> torch.Tensor:
    if max_len is None:
        max_len = int(lengths.max())
    idx = torch.arange(max_len, device=lengths.device)
    return idx.unsqueeze(0) < lengths.unsqueeze(1)


def attention_window_mask(prev_argmax: torch.Tensor, n_positions: int,
                          window: int) -> torch.Tensor:
    """Boolean (batch, positions) mask allowing indices within `window` of
    the previous attention argmax (two-sided, clamped to sequence bounds)."""
    if window < 1:
        raise ValueError("window must be >= 1")
    idx = torch.arange(n_positions, device=prev_argmax.device)
    low = (prev_argmax - window).clamp(min=0).unsqueeze(1)
    high = (prev_argmax + window).unsqueeze(1)
    return (idx.unsqueeze(0) >= low) & (idx.unsqueeze(0) <= high)


class TextEncoder(nn.Module):
    """Token embedding -> convolutional stack -> bidirectional GRU."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        self.embedding = nn.Embedding(cfg.vocab_size, cfg.encoder_dim, padding_idx=0)
        self.convs = nn.ModuleList([
            nn.Sequential(
                nn.Conv1d(cfg.encoder_dim, cfg.encoder_dim, kernel_size=5, padding=2),
                nn.BatchNorm1d(cfg.encoder_dim),
            )
            for _ in range(2)
        ])
        self.rnn = nn.GRU(cfg.encoder_dim, cfg.encoder_dim // 2, batch_first=True,
                          bidirectional=True)

    def forward(self, tokens: torch.Tensor, lengths: torch.Tensor) -> torch.Tensor:
        if tokens.min() < 0 or tokens.max() >= self.cfg.vocab_size:
            bad = ((tokens < 0) | (tokens >= self.cfg.vocab_size)).nonzero()[0]
            raise DataError(
                f"token id {int(tokens[tuple(bad)])} at position {int(bad[-1])} "
                f"is outside the vocabulary (size {self.cfg.vocab_size})")
        x = self.embedding(tokens).transpose(1, 2)  # (B, C, T)
        for conv in self.convs:
            x = F.dropout(F.relu(conv(x)), self.cfg.dropout, self.training)
        x = x.transpose(1, 2)
        packed = nn.utils.rnn.pack_padded_sequence(
            x, lengths.cpu(), batch_first=True, enforce_sorted=False)
        out, _ = self.rnn(packed)
        out, _ = nn.utils.rnn.pad_packed_sequence(
            out, batch_first=True, total_length=tokens.shape[1])
        return out


class ReferenceEncoder(nn.Module):
    """Strided conv stack over the spectrogram, GRU, projection to d_style."""

    def __init__(self, n_mel: int, channels: tuple[int, ...], rnn_dim: int,
                 d_style: int):
        super().__init__()
        self.n_layers = len(channels)
        chain = (1,) + tuple(channels)
        self.convs = nn.ModuleList([
            nn.Sequential(
                nn.Conv2d(chain[i], chain[i + 1], kernel_size=3, stride=2, padding=1),
                nn.BatchNorm2d(chain[i + 1]),
                nn.ReLU(),
            )
            for i in range(self.n_layers)
        ])
        n_freq = n_mel
        for _ in channels:
            n_freq = (n_freq + 1) // 2
        self.rnn = nn.GRU(channels[-1] * n_freq, rnn_dim, batch_first=True)
        self.proj = nn.Linear(rnn_dim, d_style)

    def downsampled_length(self, lengths: torch.Tensor) -> torch.Tensor:
        out = lengths
        for _ in range(self.n_layers):
            out = (out + 1) // 2
        return out.clamp(min=1)

    def forward(self, mel: torch.Tensor, lengths: torch.Tensor | None = None) -> torch.Tensor:
        if mel.ndim != 3 or mel.shape[1] < 1:
            raise ValueError(f"reference mel must be (batch, frames>=1, bins), got {tuple(mel.shape)}")
        if lengths is None:
            lengths = torch.full((mel.shape[0],), mel.shape[1],
                                 dtype=torch.long, device=mel.device)
        x = mel.unsqueeze(1)  # (B, 1, T, M)
        for conv in self.convs:
            x = conv(x)
        b, c, t, m = x.shape
        x = x.transpose(1, 2).reshape(b, t, c * m)
        down = self.downsampled_length(lengths)
        packed = nn.utils.rnn.pack_padded_sequence(
            x, down.cpu(), batch_first=True, enforce_sorted=False)
        _, h = self.rnn(packed)
        return torch.tanh(self.proj(h.squeeze(0)))


class StyleClassifier(nn.Module):
    """Two-layer MLP over a style embedding; softmax over K_j classes."""

    def __init__(self, d_style: int, hidden: int, n_classes: int):
        super().__init__()
        self.net = nn.Sequential(
            nn.Linear(d_style, hidden),
            nn.ReLU(),
            nn.Linear(hidden, n_classes),
        )

    def forward(self, emb: torch.Tensor) -> torch.Tensor:
        return self.net(emb)


class LocationAttention(nn.Module):
    """Additive attention conditioned on previous and cumulative weights."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.query_layer = nn.Linear(cfg.attention_rnn_dim, cfg.attention_dim, bias=False)
        self.memory_layer = nn.Linear(cfg.encoder_dim, cfg.attention_dim, bias=False)
        self.location_conv = nn.Conv1d(2, cfg.attention_location_filters,
                                       kernel_size=cfg.attention_location_kernel,
                                       padding=cfg.attention_location_kernel // 2,
                                       bias=False)
        self.location_dense = nn.Linear(cfg.attention_location_filters,
                                        cfg.attention_dim, bias=False)
        self.v = nn.Linear(cfg.attention_dim, 1, bias=False)

    def energies(self, query: torch.Tensor, processed_memory: torch.Tensor,
                 weights_cat: torch.Tensor) -> torch.Tensor:
        loc = self.location_dense(self.location_conv(weights_cat).transpose(1, 2))
        q = self.query_layer(query).unsqueeze(1)
        return self.v(torch.tanh(q + loc + processed_memory)).squeeze(-1)


@dataclass
class DecoderOutput:
    mel: torch.Tensor  # (B, frames, n_mel)
    stop_logits: torch.Tensor  # (B, frames)
    attention: torch.Tensor  # (B, steps, positions)
    lengths: torch.Tensor  # (B,) valid frames
    truncated: torch.Tensor  # (B,) bool: step cap hit before the stop token


class Decoder(nn.Module):
    """Autoregressive mel decoder with location-sensitive attention.

    Each step consumes the prenet-processed previous frame plus the
    attention context concatenated with both style embeddings, and emits
    `reduction_factor` mel frames and stop logits.
    """

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        cond_dim = cfg.encoder_dim + 2 * cfg.d_style
        self.prenet = nn.Sequential(
            nn.Linear(cfg.n_mel, cfg.prenet_dim), nn.ReLU(),
            nn.Linear(cfg.prenet_dim, cfg.prenet_dim), nn.ReLU(),
        )
        self.attention = LocationAttention(cfg)
        self.attention_rnn = nn.GRUCell(cfg.prenet_dim + cond_dim, cfg.attention_rnn_dim)
        self.decoder_rnn = nn.GRUCell(cfg.attention_rnn_dim + cond_dim, cfg.decoder_dim)
        proj_in = cfg.decoder_dim + cond_dim
        self.mel_proj = nn.Linear(proj_in, cfg.n_mel * cfg.reduction_factor)
        self.stop_proj = nn.Linear(proj_in, cfg.reduction_factor)

    def _prenet(self, frame: torch.Tensor) -> torch.Tensor:
        x = frame
        for layer in self.prenet:
            x = layer(x)
            if isinstance(layer, nn.ReLU):
                x = F.dropout(x, self.cfg.prenet_dropout, self.training)
        return x

    def forward(self, memory: torch.Tensor, memory_lengths: torch.Tensor,
                e1: torch.Tensor, e2: torch.Tensor,
                teacher: torch.Tensor | None = None,
                max_frames: torch.Tensor | None = None,
                stop_threshold: float = 0.5,
                attention_window: int | None = None) -> DecoderOutput:
        """Teacher mode when `teacher` is given (its length sets the step
        count); otherwise free-running until the stop probability crosses
        `stop_threshold` or the per-item frame cap `max_frames` is reached."""
        cfg = self.cfg
        b, t_pos, _ = memory.shape
        device = memory.device
        dtype = memory.dtype
        r = cfg.reduction_factor

        if teacher is not None:
            if teacher.shape[1] % r != 0:
                raise ValueError(
                    f"teacher length {teacher.shape[1]} not a multiple of "
                    f"reduction factor {r}")
            n_steps = teacher.shape[1] // r
            step_caps = torch.full((b,), n_steps, dtype=torch.long, device=device)
        else:
            if max_frames is None:
                raise ValueError("free-running decode needs max_frames")
            step_caps = torch.div(max_frames + r - 1, r, rounding_mode="floor").clamp(min=1)
            n_steps = int(step_caps.max())

        cond = torch.cat([e1, e2], dim=-1)
        memory_mask = lengths_to_mask(memory_lengths, t_pos)
        processed_memory = self.attention.memory_layer(memory)

        att_h = memory.new_zeros(b, cfg.attention_rnn_dim)
        dec_h = memory.new_zeros(b, cfg.decoder_dim)
        att_w = memory.new_zeros(b, t_pos)
        att_w_cum = memory.new_zeros(b, t_pos)
        context = memory.new_zeros(b, cfg.encoder_dim)
        prev_frame = memory.new_zeros(b, cfg.n_mel)
        prev_argmax = torch.zeros(b, dtype=torch.long, device=device)

        done = torch.zeros(b, dtype=torch.bool, device=device)
        truncated = torch.zeros(b, dtype=torch.bool, device=device)
        lengths = torch.zeros(b, dtype=torch.long, device=device)

        mels, stops, weights = [], [], []
        for step in range(n_steps):
            pre = self._prenet(prev_frame)
            att_h = self.attention_rnn(torch.cat([pre, context, cond], dim=-1), att_h)
            energies = self.attention.energies(
                att_h, processed_memory, torch.stack([att_w, att_w_cum], dim=1))
            allowed = memory_mask
            if attention_window is not None:
                allowed = allowed & attention_window_mask(prev_argmax, t_pos,
                                                          attention_window)
            energies = energies.masked_fill(~allowed, float("-inf"))
            att_w = F.softmax(energies, dim=-1)
            att_w_cum = att_w_cum + att_w
            prev_argmax = att_w.argmax(dim=-1)
            context = torch.bmm(att_w.unsqueeze(1), memory).squeeze(1)

            dec_h = self.decoder_rnn(torch.cat([att_h, context, cond], dim=-1), dec_h)
            proj_in = torch.cat([dec_h, context, cond], dim=-1)
            frames = self.mel_proj(proj_in).view(b, r, cfg.n_mel)
            stop_logits = self.stop_proj(proj_in)

            mels.append(frames)
            stops.append(stop_logits)
            weights.append(att_w)

            if teacher is not None:
                lengths = lengths + r  # full teacher length everywhere
                prev_frame = teacher[:, step * r + r - 1]
            else:
                active = ~done
                lengths = lengths + active.long() * r
                stop_now = (torch.sigmoid(stop_logits.detach()) > stop_threshold).any(dim=-1)
                at_cap = step + 1 >= step_caps
                truncated = truncated | (active & at_cap & ~stop_now)
                done = done | stop_now | at_cap
                prev_frame = frames[:, -1]
                if bool(done.all()):
                    break

        mel = torch.cat(mels, dim=1)
        return DecoderOutput(
            mel=mel,
            stop_logits=torch.cat(stops, dim=1),
            attention=torch.stack(weights, dim=1),
            lengths=lengths,
            truncated=truncated,
        )


class Synthesizer(nn.Module):
    """Complete model: all encoders, the decoder, and the style classifiers."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        self.text_encoder = TextEncoder(cfg)
        self.ref_encoders = nn.ModuleList([
            ReferenceEncoder(cfg.n_mel, cfg.ref_channels, cfg.ref_rnn_dim, cfg.d_style)
            for _ in range(cfg.n_dims)
        ])
        self.decoder = Decoder(cfg)
        self.classifiers = nn.ModuleDict({
            f"{i}{j}": StyleClassifier(cfg.d_style, cfg.classifier_hidden,
                                       cfg.class_counts[j])
            for i in range(cfg.n_dims) for j in range(cfg.n_dims)
        })

    def encode_text(self, tokens: torch.Tensor, lengths: torch.Tensor) -> torch.Tensor:
        return self.text_encoder(tokens, lengths)

    def encode_reference(self, mel: torch.Tensor, dimension: int,
                         lengths: torch.Tensor | None = None) -> torch.Tensor:
        return self.ref_encoders[dimension](mel, lengths)

    def classify_style(self, embedding: torch.Tensor, i: int, j: int,
                       use_reversal: bool | None = None) -> torch.Tensor:
        """Class probabilities of embedding e_i for dimension j. Cross-dimension
        paths (i != j) run through gradient reversal unless overridden."""
        if embedding.shape[-1] != self.cfg.d_style:
            raise ValueError(
                f"embedding dim {embedding.shape[-1]} != d_style {self.cfg.d_style}")
        if use_reversal is None:
            use_reversal = i != j
        x = embedding
        if use_reversal:
            x = gradient_reversal(x, self.cfg.reversal_lambda)
        return F.softmax(self.classifiers[f"{i}{j}"](x), dim=-1)

    def decode(self, text_encoding: torch.Tensor, text_lengths: torch.Tensor,
               e1: torch.Tensor, e2: torch.Tensor, **kwargs) -> DecoderOutput:
        return self.decoder(text_encoding, text_lengths, e1, e2, **kwargs)


def save_model_checkpoint(model: Synthesizer, path: str | Path,
                          meta: dict | None = None) -> None:
    """Single-archive checkpoint: parameters keyed by hierarchical names,
    the model config, and optional corpus/DSP metadata for standalone use."""
    path = Path(path)
    payload = {
        "schema_version": CHECKPOINT_SCHEMA_VERSION,
        "model_config": asdict(model.cfg),
        "state_dict": model.state_dict(),
        "meta": meta or {},
    }
    tmp = path.with_suffix(path.suffix + ".tmp")
    torch.save(payload, tmp)
    tmp.replace(path)


def model_config_from_dict(raw: dict) -> ModelConfig:
    raw = dict(raw)
    raw["class_counts"] = tuple(raw["class_counts"])
    raw["ref_channels"] = tuple(raw["ref_channels"])
    return ModelConfig(**raw)


def load_model_checkpoint(path: str | Path) -> tuple[Synthesizer, dict]:
    path = Path(path)
    if not path.exists():
        raise DataError(f"checkpoint not found: {path}")
    payload = torch.load(path, map_location="cpu", weights_only=False)
    if payload.get("schema_version") != CHECKPOINT_SCHEMA_VERSION:
        raise DataError(f"{path}: unsupported checkpoint schema "
                        f"{payload.get('schema_version')!r}")
    model = Synthesizer(model_config_from_dict(payload["model_config"]))
    model.load_state_dict(payload["state_dict"])
    model.eval()
    return model, payload.get("meta", {})
