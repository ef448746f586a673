"""Subject-specific fine-tuning loop with mode-dependent freezing.

Modes:
    baseline     -- reconstruction + class-prior terms, latent space; only the
                    denoiser trains.
    contrastive  -- baseline plus the temperature-scaled contrastive term
                    between denoised estimates and clean latents; denoiser only.
    biometric    -- reconstruction/prior in image space plus the embedding L1
                    term on decoded estimates; the VAE trains as well.

The text embedder stays frozen in every mode.
"""

from __future__ import annotations

import csv
import math
import time
from dataclasses import dataclass, field

import numpy as np
import torch

from .data import DatasetManifest, load_image, make_batches, manifest_base_dir, validate_disjoint
from .errors import ConfigError, DisjointnessError, DivergenceError
from .losses import MODES, LossWeights, combined_loss, nt_xent
from .model import LatentDiffusionModel
from .prompts import render_class_prompt, render_training_prompt
from .schedule import NoiseSchedule

# Segments that receive gradients, per mode.
TRAINABLE_SEGMENTS = {
    "baseline": ("denoiser",),
    "contrastive": ("denoiser",),
    "biometric": ("denoiser", "vae_encoder", "vae_decoder"),
}


@dataclass(frozen=True)
class TrainConfig:
    mode: str = "baseline"
    token: str = "sks"
    learning_rate: float = 1e-6
    steps: int = 800
    batch_size: int = 8
    resolution: int = 32
    seed: int = 0
    weights: LossWeights = field(default_factory=LossWeights)

    def __post_init__(self):
        if self.mode not in MODES:
            raise ConfigError(f"unknown mode {self.mode!r}")
        if self.steps < 1 or self.batch_size < 1:
            raise ConfigError("steps and batch_size must be >= 1")
        if self.learning_rate <= 0:
            raise ConfigError("learning_rate must be > 0")


@dataclass
class TrainRecord:
    history: list            # per-step LossBreakdown (floats)
    model: LatentDiffusionModel
    duration_seconds: float


def pretrain_vae(model: LatentDiffusionModel, images, steps: int = 300,
                 batch_size: int = 16, learning_rate: float = 1e-3,
                 seed: int = 0) -> list:
    """Autoencoding warm-up standing in for a pretrained VAE.

    Subject fine-tuning assumes the frozen VAE already reconstructs faces;
    at desk scale we earn that by minimizing round-trip MSE on the manifest
    images first. Returns the per-step loss history.
    """
    images = torch.stack(list(images))
    params = list(model.vae_encoder.parameters()) + list(model.vae_decoder.parameters())
    for p in params:
        p.requires_grad_(True)
    optimizer = torch.optim.Adam(params, lr=learning_rate)
    rng = np.random.default_rng(seed)
    history = []
    for _ in range(steps):
        sel = torch.from_numpy(rng.integers(0, images.shape[0], size=batch_size))
        x = images[sel]
        loss = torch.nn.functional.mse_loss(model.decode(model.encode(x)), x)
        optimizer.zero_grad()
        loss.backward()
        optimizer.step()
        history.append(float(loss.detach()))
    return history


def set_mode_trainable(model: LatentDiffusionModel, mode: str) -> None:
    """Apply the mode's freeze map to the model's segments."""
    if mode not in TRAINABLE_SEGMENTS:
        raise ConfigError(f"unknown mode {mode!r}")
    trainable = TRAINABLE_SEGMENTS[mode]
    for name in ("vae_encoder", "vae_decoder", "denoiser", "text_embedder"):
        flag = name in trainable
        for p in model.segment(name).parameters():
            p.requires_grad_(flag)


def make_optimizer(model: LatentDiffusionModel, config: TrainConfig) -> torch.optim.Optimizer:
    params = [p for p in model.parameters() if p.requires_grad]
    return torch.optim.Adam(params, lr=config.learning_rate)


def _noise_like(rng: np.random.Generator, shape) -> torch.Tensor:
    return torch.from_numpy(rng.standard_normal(shape).astype(np.float32))


def _per_example_mse(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    return ((a - b) ** 2).reshape(a.shape[0], -1).mean(dim=1)


def train_step(model: LatentDiffusionModel, batch, schedule: NoiseSchedule,
               config: TrainConfig, rng: np.random.Generator,
               optimizer: torch.optim.Optimizer, loss_embedder=None):
    """One gradient step on a resolved batch.

    batch: list of (training image, regularization image, caption) with image
    tensors of shape (3,H,W). Timesteps t and t' are drawn independently per
    example. Returns the pre-update LossBreakdown.
    """
    mode, weights = config.mode, config.weights
    if mode == "biometric" and loss_embedder is None:
        raise ConfigError("biometric mode requires a loss-role embedder")

    x = torch.stack([item[0] for item in batch])
    x_prior = torch.stack([item[1] for item in batch])
    captions = [item[2] for item in batch]
    n = x.shape[0]

    with torch.no_grad():
        c_subj = model.embed_prompt(render_training_prompt(config.token))
        c_class = torch.stack(
            [model.embed_prompt(render_class_prompt(cap)) for cap in captions]
        )

    t = np.array([int(rng.integers(1, schedule.T + 1)) for _ in range(n)])
    t_prime = np.array([int(rng.integers(1, schedule.T + 1)) for _ in range(n)])

    def denoised(images, t_arr, cond):
        z0 = model.encode(images)
        alpha = torch.from_numpy(schedule.alpha[t_arr].astype(np.float32))[:, None, None, None]
        sigma = torch.from_numpy(schedule.sigma[t_arr].astype(np.float32))[:, None, None, None]
        noise = _noise_like(rng, z0.shape)
        z_t = alpha * z0 + sigma * noise
        eps_hat = model.predict_noise(z_t, torch.from_numpy(t_arr.astype(np.float32)), cond)
        z0_hat = (z_t - sigma * eps_hat) / alpha
        return z0, z0_hat

    z0, z0_hat = denoised(x, t, c_subj.unsqueeze(0).expand(n, -1))
    z0_prior, z0_prior_hat = denoised(x_prior, t_prime, c_class)

    w_t = torch.from_numpy(schedule.w[t].astype(np.float32))
    w_tp = torch.from_numpy(schedule.w[t_prime].astype(np.float32))

    biometric = None
    if mode == "biometric":
        # Image-space objective: the VAE is trainable here, so compare decoded
        # estimates against the ground-truth images directly.
        x_hat = model.decode(z0_hat)
        x_prior_hat = model.decode(z0_prior_hat)
        rec = (w_t * _per_example_mse(x, x_hat)).mean()
        prior = (w_tp * _per_example_mse(x_prior, x_prior_hat)).mean()
        biometric = (loss_embedder(x_hat) - loss_embedder(x)).abs().sum(dim=-1).mean()
    else:
        rec = (w_t * _per_example_mse(z0, z0_hat)).mean()
        prior = (w_tp * _per_example_mse(z0_prior, z0_prior_hat)).mean()

    contrastive = None
    if mode == "contrastive":
        contrastive = nt_xent(z0_hat, z0, weights.temperature)

    breakdown = combined_loss(mode, weights, reconstruction=rec, prior=prior,
                              biometric=biometric, contrastive=contrastive)
    total = breakdown.total
    if not torch.isfinite(total):
        raise DivergenceError(f"non-finite loss: {breakdown.to_floats()}")

    optimizer.zero_grad()
    total.backward()
    optimizer.step()
    return breakdown.to_floats()


def fine_tune(model: LatentDiffusionModel, manifest: DatasetManifest,
              schedule: NoiseSchedule, config: TrainConfig,
              loss_embedder=None) -> TrainRecord:
    """Run config.steps training steps on the manifest's subject."""
    report = validate_disjoint(manifest)
    if not report.ok:
        raise DisjointnessError(f"manifest is not subject-disjoint: {report.offending_ids}")
    model.tokenize(config.token)  # raises UnknownTokenError for unknown tokens

    if config.mode == "biometric" and loss_embedder is None:
        from .biometrics import create_embedder

        loss_embedder = create_embedder(role="loss", seed=config.seed)

    set_mode_trainable(model, config.mode)
    optimizer = make_optimizer(model, config)
    rng = np.random.default_rng(config.seed)
    base = manifest_base_dir(manifest)
    cache: dict = {}

    def image(path) -> torch.Tensor:
        if path not in cache:
            cache[path] = load_image(base / path, config.resolution)
        return cache[path]

    history = []
    start = time.perf_counter()
    batches = make_batches(manifest, config.batch_size, config.seed, epochs=None)
    for step, batch in enumerate(batches):
        if step >= config.steps:
            break
        resolved = [(image(b.training_path), image(b.reg_path), b.reg_caption) for b in batch]
        try:
            history.append(
                train_step(model, resolved, schedule, config, rng, optimizer, loss_embedder)
            )
        except DivergenceError as exc:
            raise DivergenceError(f"training diverged at step {step}: {exc}") from exc
    duration = time.perf_counter() - start
    return TrainRecord(history=history, model=model, duration_seconds=duration)


def write_loss_history(history, path) -> None:
    """CSV: step,reconstruction,prior,biometric,contrastive,total."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["step", "reconstruction", "prior", "biometric", "contrastive", "total"])
        for i, b in enumerate(history):
            writer.writerow([i, b.reconstruction, b.prior, b.biometric, b.contrastive, b.total])
