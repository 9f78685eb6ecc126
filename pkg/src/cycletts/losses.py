"""Training objectives: reconstruction, classification, adversarial cycle
consistency, orthogonality, and their weighted total.

All functions accept torch tensors and return scalar tensors, so they can
sit directly on the autograd path. `LossReport` carries the detached values
for logging; its `total` is always recomputable from the parts.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import torch

from . import NumericalError

LOG_CLAMP = 1e-12


@dataclass(frozen=True)
class LossWeights:
    alpha: float = 1.0   # reconstruction
    beta: float = 1.0    # adversarial cycle consistency
    gamma: float = 0.02  # orthogonality
    delta: float = 0.01  # synthesized-sample classification inside the cycle term
    stop_weight: float = 1.0   # stop-token auxiliary objective
    game_weight: float = 0.1   # generator side of the fine-tuning game loss

    def __post_init__(self):
        for name in ("alpha", "beta", "gamma", "delta", "stop_weight", "game_weight"):
            if getattr(self, name) < 0:
                raise ValueError(f"loss weight {name} must be >= 0")


@dataclass
class LossReport:
    recon: float = 0.0
    cls_paired: float = 0.0
    cls_unpaired: float = 0.0
    cls_synthesized: float = 0.0
    adv_cycle: float = 0.0
    ortho: float = 0.0
    stop: float = 0.0
    game: float = 0.0
    disc: float = 0.0  # discriminator's own loss; diagnostic, not part of total
    total: float = 0.0
    per_classifier: dict[str, float] = field(default_factory=dict)
    n_paired: int = 0
    n_unpaired: int = 0
    n_reencoded: int = 0

    def recomputed_total(self, weights: LossWeights) -> float:
        return (weights.alpha * self.recon
                + weights.beta * self.adv_cycle
                + weights.gamma * self.ortho
                + weights.stop_weight * self.stop
                + weights.game_weight * self.game)

    def as_dict(self) -> dict:
        out = {k: getattr(self, k) for k in
               ("recon", "cls_paired", "cls_unpaired", "cls_synthesized",
                "adv_cycle", "ortho", "stop", "game", "disc", "total",
                "n_paired", "n_unpaired", "n_reencoded")}
        out["per_classifier"] = dict(self.per_classifier)
        return out


def recon_loss(target: torch.Tensor, output: torch.Tensor,
               mask: torch.Tensor | None = None) -> torch.Tensor:
    """Mean absolute difference over mask-valid entries.

    `target` and `output` are (..., frames, bins); `mask` is a boolean
    (..., frames) validity mask. Without a mask every entry counts.
    """
    if target.shape != output.shape:
        raise ValueError(f"shape mismatch: target {tuple(target.shape)} "
                         f"vs output {tuple(output.shape)}")
    diff = (target - output).abs()
    if mask is None:
        return diff.mean()
    if mask.shape != target.shape[:-1]:
        raise ValueError(f"mask shape {tuple(mask.shape)} does not match "
                         f"frames {tuple(target.shape[:-1])}")
    m = mask.unsqueeze(-1).to(diff.dtype)
    denom = m.sum() * target.shape[-1]
    return (diff * m).sum() / denom.clamp(min=1.0)


def cls_loss(predictions: torch.Tensor, true_labels: torch.Tensor) -> torch.Tensor:
    """Cross entropy of probability vectors against integer labels, batch mean."""
    if predictions.ndim != 2:
        raise ValueError("predictions must be (batch, classes) probabilities")
    picked = predictions.gather(1, true_labels.view(-1, 1)).squeeze(1)
    return -(picked.clamp(min=LOG_CLAMP)).log().mean()


def adv_cycle_loss(cls_paired, cls_unpaired, cls_synthesized, weights: LossWeights):
    """cls_paired + cls_unpaired + delta * cls_synthesized; absent parts count 0."""
    parts = [cls_paired, cls_unpaired]
    total = sum(p for p in parts if p is not None)
    if isinstance(total, int):  # every component absent
        total = torch.tensor(0.0)
    if cls_synthesized is not None:
        total = total + weights.delta * cls_synthesized
    return total


def ortho_loss(e1_batch: torch.Tensor, e2_batch: torch.Tensor,
               include_self: bool = False) -> torch.Tensor:
    """Mean absolute inner product between the per-sample style embeddings.

    The cross term penalizes shared directions between the two embeddings;
    `include_self` additionally adds the squared norms (the i = j terms),
    which penalize magnitude rather than entanglement.
    """
    if e1_batch.shape[0] != e2_batch.shape[0]:
        raise ValueError("embedding batches must have equal size")
    cross = (e1_batch * e2_batch).sum(dim=-1).abs().mean()
    if not include_self:
        return cross
    self1 = (e1_batch * e1_batch).sum(dim=-1).mean()
    self2 = (e2_batch * e2_batch).sum(dim=-1).mean()
    return cross + self1 + self2


def total_loss(recon, adv_cycle, ortho, weights: LossWeights,
               stop=None, game=None):
    """Weighted sum of the loss terms; raises NumericalError on non-finite parts."""
    parts = {"recon": recon, "adv_cycle": adv_cycle, "ortho": ortho,
             "stop": stop, "game": game}
    for name, value in parts.items():
        if value is None:
            continue
        v = value.detach() if isinstance(value, torch.Tensor) else torch.tensor(value)
        if not torch.isfinite(v).all():
            raise NumericalError(f"loss term {name!r} is non-finite: {v}")
    total = weights.alpha * recon + weights.beta * adv_cycle + weights.gamma * ortho
    if stop is not None:
        total = total + weights.stop_weight * stop
    if game is not None:
        total = total + weights.game_weight * game
    return total
