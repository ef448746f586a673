"""Objective terms for subject fine-tuning: reconstruction, class-prior
preservation, biometric L1, and the temperature-scaled contrastive loss.

All terms accept torch tensors and stay differentiable; combined_loss is
plain arithmetic and works on floats or scalar tensors alike.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn.functional as F

from .errors import ConfigError, InsufficientBatchError, ShapeError

MODES = ("baseline", "biometric", "contrastive")


@dataclass(frozen=True)
class LossWeights:
    lambda_prior: float = 1.0
    lambda_b: float = 0.1
    lambda_s: float = 0.1
    temperature: float = 0.5

    def __post_init__(self):
        if min(self.lambda_prior, self.lambda_b, self.lambda_s) < 0:
            raise ConfigError("loss weights must be >= 0")
        if self.temperature <= 0:
            raise ConfigError(f"temperature must be > 0, got {self.temperature}")


@dataclass
class LossBreakdown:
    reconstruction: float
    prior: float
    biometric: float
    contrastive: float
    total: float

    def to_floats(self) -> "LossBreakdown":
        def as_float(v):
            return float(v.detach()) if hasattr(v, "detach") else float(v)

        return LossBreakdown(*(as_float(getattr(self, f)) for f in
                               ("reconstruction", "prior", "biometric", "contrastive", "total")))


def reconstruction_term(z0: torch.Tensor, z0_hat: torch.Tensor, w_t: float = 1.0) -> torch.Tensor:
    """Weighted mean squared error between the clean target and its estimate."""
    if z0.shape != z0_hat.shape:
        raise ShapeError(f"shape mismatch {tuple(z0.shape)} vs {tuple(z0_hat.shape)}")
    return w_t * F.mse_loss(z0_hat, z0)


def prior_term(x_prior: torch.Tensor, x_prior_hat: torch.Tensor, w_t_prime: float = 1.0) -> torch.Tensor:
    """Class-prior preservation term; same functional form as reconstruction,
    computed on regularization examples under the class caption."""
    return reconstruction_term(x_prior, x_prior_hat, w_t_prime)


def biometric_term(embedder, img_generated: torch.Tensor, img_truth: torch.Tensor) -> torch.Tensor:
    """L1 distance between the biometric embeddings of the two images."""
    e_gen = embedder(img_generated)
    e_truth = embedder(img_truth)
    if e_gen.shape != e_truth.shape:
        raise ShapeError(
            f"embedding length mismatch: {tuple(e_gen.shape)} vs {tuple(e_truth.shape)}"
        )
    return (e_gen - e_truth).abs().sum(dim=-1).mean()


def nt_xent(z_hat_batch: torch.Tensor, z0_batch: torch.Tensor, temperature: float = 0.5) -> torch.Tensor:
    """Normalized temperature-scaled cross-entropy over 2N views.

    (z_hat[i], z0[i]) are the positive pairs; every other view in the batch is
    a negative. Views are flattened and L2-normalized, so the loss is
    invariant to a common scale.
    """
    if temperature <= 0:
        raise ConfigError(f"temperature must be > 0, got {temperature}")
    n = z_hat_batch.shape[0]
    if z0_batch.shape[0] != n:
        raise ShapeError("view batches must have equal length")
    if n < 2:
        raise InsufficientBatchError("need N >= 2 pairs to form negatives")

    a = F.normalize(z_hat_batch.reshape(n, -1), dim=1)
    b = F.normalize(z0_batch.reshape(n, -1), dim=1)
    views = torch.cat([a, b], dim=0)                       # (2N, d)
    sim = views @ views.t() / temperature                  # (2N, 2N)
    eye = torch.eye(2 * n, dtype=torch.bool, device=sim.device)
    sim = sim.masked_fill(eye, float("-inf"))              # exclude self
    positives = torch.arange(2 * n).roll(n)                # partner index
    return F.cross_entropy(sim, positives)


def combined_loss(mode: str, weights: LossWeights, reconstruction=None,
                  prior=None, biometric=None, contrastive=None) -> LossBreakdown:
    """Assemble the mode's total; terms outside the active mode are forced to 0.

    total = reconstruction + lambda_prior * prior
            + lambda_b * biometric + lambda_s * contrastive
    """
    if mode not in MODES:
        raise ConfigError(f"unknown mode {mode!r}; expected one of {MODES}")
    if reconstruction is None or prior is None:
        raise ConfigError("reconstruction and prior terms are required in every mode")
    if mode == "biometric" and biometric is None:
        raise ConfigError("biometric mode requires the biometric term")
    if mode == "contrastive" and contrastive is None:
        raise ConfigError("contrastive mode requires the contrastive term")
    biometric = biometric if mode == "biometric" else 0.0
    contrastive = contrastive if mode == "contrastive" else 0.0
    total = (reconstruction
             + weights.lambda_prior * prior
             + weights.lambda_b * biometric
             + weights.lambda_s * contrastive)
    return LossBreakdown(
        reconstruction=reconstruction,
        prior=prior,
        biometric=biometric,
        contrastive=contrastive,
        total=total,
    )
