"""Text plus two reference recordings -> waveform.

Free-running decoding is constrained so the attention argmax never jumps
more than a fixed window from the previous step's argmax, which keeps the
alignment monotonic-ish on long inputs.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from . import DataError
from .config import dataclass_from_dict
from .dsp import DspConfig, Spectrogram, analyze, compress, decompress, griffin_lim, \
    mel_to_linear, read_wav
from .model import DecoderOutput, Synthesizer, attention_window_mask, load_model_checkpoint

DEFAULT_ATTENTION_WINDOW = 7


def constrained_attention(scores, prev_argmax: int, window: int = DEFAULT_ATTENTION_WINDOW):
    """Attention weights whose support is clamped to +-window around the
    previous argmax: out-of-window energies are masked before the softmax."""
    arr = torch.as_tensor(np.asarray(scores, dtype=np.float64))
    squeeze = arr.ndim == 1
    if squeeze:
        arr = arr.unsqueeze(0)
    prev = torch.as_tensor(np.atleast_1d(np.asarray(prev_argmax, dtype=np.int64)))
    mask = attention_window_mask(prev, arr.shape[-1], window)
    weights = torch.softmax(arr.masked_fill(~mask, float("-inf")), dim=-1)
    out = weights.numpy()
    return out[0] if squeeze else out


@dataclass
class SynthesisResult:
    waveform: np.ndarray
    mel: Spectrogram  # decoder output, magnitude domain
    linear: Spectrogram
    attention: np.ndarray  # (decoder steps, token positions)
    stop_probs: np.ndarray  # per output frame
    truncated: bool
    sample_rate: int


def tokens_to_ids(text, vocab: tuple[str, ...] | list[str]) -> np.ndarray:
    symbols = text.split() if isinstance(text, str) else list(text)
    if not symbols:
        raise DataError("empty token sequence")
    ids = []
    for pos, sym in enumerate(symbols):
        if sym not in vocab:
            raise DataError(f"token {sym!r} at position {pos} is not in the vocabulary")
        ids.append(vocab.index(sym) + 1)
    return np.array(ids, dtype=np.int64)


def _as_waveform(ref, dsp: DspConfig) -> np.ndarray:
    if isinstance(ref, (str, Path)):
        if not Path(ref).exists():
            raise DataError(f"reference audio not found: {ref}")
        wave, _ = read_wav(ref, dsp.sample_rate)
        return wave
    return np.asarray(ref, dtype=np.float64)


def synthesize_mel(model: Synthesizer, token_ids: np.ndarray,
                   ref_mels: list[np.ndarray],
                   window: int | None = DEFAULT_ATTENTION_WINDOW,
                   cap_factor: int = 4,
                   stop_threshold: float = 0.5) -> DecoderOutput:
    """Free-running decode of one utterance from compressed reference mels."""
    model.eval()
    with torch.no_grad():
        tokens = torch.from_numpy(token_ids).unsqueeze(0)
        tok_len = torch.tensor([token_ids.shape[0]])
        embs = [model.encode_reference(torch.from_numpy(m).float().unsqueeze(0), d)
                for d, m in enumerate(ref_mels)]
        text_enc = model.encode_text(tokens, tok_len)
        cap = cap_factor * tok_len * model.cfg.reduction_factor
        return model.decode(text_enc, tok_len, embs[0], embs[1],
                            max_frames=cap, stop_threshold=stop_threshold,
                            attention_window=window)


def synthesize(text, ref_audio_1, ref_audio_2, checkpoint,
               dsp_config: DspConfig | None = None,
               window: int = DEFAULT_ATTENTION_WINDOW,
               cap_factor: int | None = None) -> SynthesisResult:
    """Full pipeline: references -> style embeddings, text -> encoding,
    constrained free-running decode, mel inversion, Griffin-Lim.

    `checkpoint` is a model checkpoint path or a (model, meta) pair as
    returned by `load_model_checkpoint`.
    """
    if isinstance(checkpoint, (str, Path)):
        model, meta = load_model_checkpoint(checkpoint)
    else:
        model, meta = checkpoint
    vocab = meta.get("token_vocab")
    if not vocab:
        raise DataError("checkpoint has no token vocabulary metadata")
    if dsp_config is None:
        dsp_config = dataclass_from_dict(DspConfig, meta.get("dsp", {}))
    if cap_factor is None:
        cap_factor = int(meta.get("free_run_cap_factor", 4))

    token_ids = tokens_to_ids(text, vocab)
    ref_mels = []
    for ref in (ref_audio_1, ref_audio_2):
        wave = _as_waveform(ref, dsp_config)
        _, mel = analyze(wave, dsp_config)
        ref_mels.append(compress(mel.values).astype(np.float32))

    out = synthesize_mel(model, token_ids, ref_mels, window=window,
                         cap_factor=cap_factor,
                         stop_threshold=float(meta.get("stop_threshold", 0.5)))
    n = int(out.lengths[0])
    mel_values = decompress(out.mel[0, :n].numpy().astype(np.float64))
    mel_spec = Spectrogram(mel_values, dsp_config.frame_shift, "mel")
    linear = mel_to_linear(mel_spec, dsp_config)
    waveform = griffin_lim(linear, dsp_config)
    steps = n // model.cfg.reduction_factor
    return SynthesisResult(
        waveform=waveform,
        mel=mel_spec,
        linear=linear,
        attention=out.attention[0, :steps].numpy(),
        stop_probs=torch.sigmoid(out.stop_logits[0, :n]).numpy(),
        truncated=bool(out.truncated[0]),
        sample_rate=dsp_config.sample_rate,
    )
