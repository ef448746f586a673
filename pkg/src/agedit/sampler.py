"""Prompt-conditioned ancestral sampling and the quality gate.

The gate keeps images whose quality score strictly exceeds the threshold,
ordered by descending score (ties by original position), truncated to
max_keep. The default scorer is a deterministic sharpness/contrast statistic
standing in for an external face-quality network.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .errors import ConfigError
from .model import LatentDiffusionModel, estimate_clean
from .prompts import AgeGroup, PromptSpec, render_prompt


def default_quality_score(img: torch.Tensor) -> float:
    """Deterministic quality stand-in: contrast plus gradient energy, in [0,1]."""
    x = img.detach().to(torch.float64)
    contrast = float(x.std())
    gx = (x[:, :, 1:] - x[:, :, :-1]).abs().mean()
    gy = (x[:, 1:, :] - x[:, :-1, :]).abs().mean()
    sharpness = float(gx + gy)
    return float(1.0 - np.exp(-(4.0 * contrast + 8.0 * sharpness)))


@dataclass(frozen=True)
class QualityGateConfig:
    threshold: float = 0.4
    n_generate: int = 8
    max_keep: int = 4
    scorer: object = field(default=default_quality_score, compare=False)

    def __post_init__(self):
        if not 0.0 <= self.threshold <= 1.0:
            raise ConfigError(f"threshold must be in [0,1], got {self.threshold}")
        if not 1 <= self.max_keep <= self.n_generate:
            raise ConfigError(
                f"need 1 <= max_keep <= n_generate, got {self.max_keep} / {self.n_generate}"
            )


def _reverse_timesteps(T: int, inference_steps: int):
    ts = np.unique(np.round(np.linspace(0, T, inference_steps + 1)).astype(int))
    return ts[::-1]  # T ... 0, descending


def sample(model: LatentDiffusionModel, prompt: PromptSpec, n: int,
           inference_steps: int, rng: np.random.Generator,
           resolution: int = 32) -> list:
    """Draw n images by ancestral reverse diffusion conditioned on the prompt."""
    if inference_steps < 1:
        raise ConfigError(f"inference_steps must be >= 1, got {inference_steps}")
    if resolution % model.k:
        raise ConfigError(f"resolution {resolution} not divisible by k={model.k}")
    schedule = model.schedule()
    cond = model.embed_prompt(render_prompt(prompt)).detach()
    h = resolution // model.k
    ts = _reverse_timesteps(schedule.T, inference_steps)
    abar = schedule.alpha**2

    images = []
    with torch.no_grad():
        for _ in range(n):
            z = torch.from_numpy(
                rng.standard_normal((model.latent_channels, h, h)).astype(np.float32)
            )
            for t, s in zip(ts[:-1], ts[1:]):
                eps = model.predict_noise(z, int(t), cond)
                z0_hat = estimate_clean(z, int(t), eps, schedule).clamp(-1.0, 1.0)
                if s == 0:
                    z = z0_hat
                    continue
                a_t, a_s = abar[t], abar[s]
                coef_zt = np.sqrt(a_t / a_s) * (1.0 - a_s) / (1.0 - a_t)
                coef_z0 = np.sqrt(a_s) * (1.0 - a_t / a_s) / (1.0 - a_t)
                var = (1.0 - a_t / a_s) * (1.0 - a_s) / (1.0 - a_t)
                noise = torch.from_numpy(
                    rng.standard_normal(z.shape).astype(np.float32)
                )
                z = float(coef_zt) * z + float(coef_z0) * z0_hat + float(np.sqrt(var)) * noise
            images.append(model.decode(z).clamp(0.0, 1.0))
    return images


def quality_gate(images, cfg: QualityGateConfig) -> list:
    """Keep images scoring strictly above the threshold, best first, at most
    max_keep of them."""
    scored = [(cfg.scorer(img), i, img) for i, img in enumerate(images)]
    kept = [(s, i, img) for s, i, img in scored if s > cfg.threshold]
    kept.sort(key=lambda row: (-row[0], row[1]))
    return [img for _, _, img in kept[: cfg.max_keep]]


def generate_aged(model: LatentDiffusionModel, token: str, groups,
                  cfg: QualityGateConfig, rng: np.random.Generator,
                  inference_steps: int = 50, resolution: int = 32) -> dict:
    """Sample n_generate images per age group and gate each batch."""
    results = {}
    for group in groups:
        prompt = PromptSpec(token=token, age_group=group)
        imgs = sample(model, prompt, cfg.n_generate, inference_steps, rng,
                      resolution=resolution)
        results[group] = quality_gate(imgs, cfg)
    return results


def write_generation_outputs(model: LatentDiffusionModel, token: str, groups,
                             cfg: QualityGateConfig, rng: np.random.Generator,
                             out_dir, inference_steps: int = 50,
                             resolution: int = 32) -> dict:
    """Sample, gate, and write out/<token>/<agegroup>/<index>.png plus
    scores.csv (agegroup,index,quality,retained). Returns the retained map."""
    from .data import save_image

    out_dir = Path(out_dir)
    token_dir = out_dir / token
    token_dir.mkdir(parents=True, exist_ok=True)
    rows = []
    retained_map = {}
    for group in groups:
        prompt = PromptSpec(token=token, age_group=group)
        imgs = sample(model, prompt, cfg.n_generate, inference_steps, rng,
                      resolution=resolution)
        retained = quality_gate(imgs, cfg)
        retained_ids = {id(img) for img in retained}
        group_dir = token_dir / group.value
        group_dir.mkdir(parents=True, exist_ok=True)
        for i, img in enumerate(imgs):
            keep = id(img) in retained_ids
            rows.append((group.value, i, cfg.scorer(img), keep))
            if keep:
                save_image(img, group_dir / f"{i}.png")
        retained_map[group] = retained
    with open(token_dir / "scores.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["agegroup", "index", "quality", "retained"])
        writer.writerows(rows)
    return retained_map
