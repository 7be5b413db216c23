"""Loss terms shared by the DSED and FEN models.

Reduction convention throughout: sum over the elements of one sample (pixels or
latent units), mean over the batch.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass

import torch

from .errors import NumericDomainError

PROB_EPS = 1e-7


class Parity(str, enum.Enum):
    EVEN = "even"
    ODD = "odd"

    @classmethod
    def of(cls, iteration: int) -> "Parity":
        return cls.EVEN if iteration % 2 == 0 else cls.ODD


@dataclass
class GaussianParams:
    """Diagonal Gaussian posterior ``q(z|x)``; tensors of shape ``(batch, latent_dim)``."""

    mu: torch.Tensor
    logvar: torch.Tensor

    def __post_init__(self):
        if self.mu.shape != self.logvar.shape:
            raise ValueError(
                f"mu and logvar shapes differ: {tuple(self.mu.shape)} vs {tuple(self.logvar.shape)}"
            )

    @property
    def latent_dim(self) -> int:
        return self.mu.shape[-1]

    def detach(self) -> "GaussianParams":
        return GaussianParams(self.mu.detach(), self.logvar.detach())


@dataclass
class LossBreakdown:
    reconstruction: torch.Tensor
    kl: torch.Tensor
    probe_ce: torch.Tensor
    total: torch.Tensor
    parity: Parity


def mse_loss(predicted: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """Squared error summed over each image, averaged over the batch."""
    if predicted.shape != target.shape:
        raise ValueError(
            f"shape mismatch: predicted {tuple(predicted.shape)} vs target {tuple(target.shape)}"
        )
    diff = (predicted - target).reshape(predicted.shape[0], -1)
    return diff.pow(2).sum(dim=1).mean()


def _as_batched(t: torch.Tensor) -> torch.Tensor:
    return t.unsqueeze(0) if t.dim() == 1 else t


def kl_divergence(g: GaussianParams) -> torch.Tensor:
    """KL(q(z|x) || N(0, I)) in closed form, summed over units, mean over batch."""
    mu, logvar = _as_batched(g.mu), _as_batched(g.logvar)
    if not (torch.isfinite(mu).all() and torch.isfinite(logvar).all()):
        raise NumericDomainError("kl_divergence received non-finite mu or logvar")
    per_unit = 0.5 * (logvar.exp() + mu.pow(2) - 1.0 - logvar)
    return per_unit.sum(dim=1).mean()


def reparameterize(g: GaussianParams, generator: torch.Generator) -> torch.Tensor:
    eps = torch.randn(g.mu.shape, generator=generator, dtype=g.mu.dtype, device=g.mu.device)
    return g.mu + torch.exp(0.5 * g.logvar) * eps


def _check_one_hot(label: torch.Tensor) -> None:
    if label.dim() != 2 or label.shape[1] < 2:
        raise ValueError(f"label must be (batch, K>=2) one-hot, got shape {tuple(label.shape)}")
    is_binary = ((label == 0) | (label == 1)).all()
    if not is_binary or not (label.sum(dim=1) == 1).all():
        raise ValueError("label is not one-hot")


def style_cross_entropy(probs: torch.Tensor, label: torch.Tensor) -> torch.Tensor:
    """One-versus-rest binary cross-entropy over K style classes.

    ``probs`` holds independent per-class sigmoid probabilities. The value is
    nonnegative; probabilities are clamped to ``[PROB_EPS, 1 - PROB_EPS]``.
    """
    y = label.to(probs.dtype)
    _check_one_hot(y)
    if probs.shape != label.shape:
        raise ValueError(f"probs {tuple(probs.shape)} and label {tuple(label.shape)} differ")
    p = probs.clamp(PROB_EPS, 1.0 - PROB_EPS)
    ll = y * torch.log(p) + (1.0 - y) * torch.log(1.0 - p)
    return -ll.sum(dim=1).mean()


def one_hot(indices: torch.Tensor, num_classes: int) -> torch.Tensor:
    return torch.nn.functional.one_hot(indices.long(), num_classes).float()


def dsed_loss(recon, target, g: GaussianParams, beta: float) -> LossBreakdown:
    rec = mse_loss(recon, target)
    kl = kl_divergence(g)
    zero = rec.new_zeros(())
    return LossBreakdown(rec, kl, zero, rec + beta * kl, Parity.EVEN)


def fen_total_loss(
    recon: torch.Tensor,
    target: torch.Tensor,
    g: GaussianParams,
    probe_probs: torch.Tensor,
    label: torch.Tensor,
    parity: Parity | str,
    beta: float,
    gamma: float,
) -> LossBreakdown:
    """Encoder/decoder objective for one FEN iteration.

    On even iterations ``probe_probs`` come from the Enemy head (content slice)
    and the cross-entropy is subtracted, so the encoder works against the Enemy.
    On odd iterations they come from the Friend head (style slice) and the
    cross-entropy is added.
    """
    parity = Parity(parity)
    rec = mse_loss(recon, target)
    kl = kl_divergence(g)
    ce = style_cross_entropy(probe_probs, label)
    sign = -1.0 if parity is Parity.EVEN else 1.0
    total = rec + beta * kl + sign * gamma * ce
    return LossBreakdown(rec, kl, ce, total, parity)
