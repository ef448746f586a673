"""Toy latent diffusion stack: VAE encoder/decoder, conditional noise
predictor, and a frozen lookup text embedder.

Desk-scale stand-in for a pretrained latent text-to-image model: the loss
terms and evaluation metrics downstream are architecture-agnostic, so the
networks here are deliberately small. Images are channel-first float tensors
in [0, 1]; latents have 4 channels at 1/k the spatial resolution.
"""

from __future__ import annotations

import io
import json
import math
import zipfile
from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from .errors import ConfigError, RangeError, ShapeError, SingularityError, UnknownTokenError
from .prompts import CAPTION_VOCABULARY, DEFAULT_RARE_TOKENS
from .schedule import NoiseSchedule, build_schedule

SEGMENTS = ("vae_encoder", "vae_decoder", "denoiser", "text_embedder")

_BASE_WORDS = ("photo", "of", "a", "person", "as")

_CHECKPOINT_FORMAT = 1
# Fixed entry timestamp so identical parameters produce identical archives.
_ZIP_EPOCH = (1980, 1, 1, 0, 0, 0)


def build_vocabulary(rare_tokens=DEFAULT_RARE_TOKENS, extra_words=()) -> tuple:
    """Word list covering the prompt templates, age captions, and rare tokens."""
    words = list(_BASE_WORDS) + list(CAPTION_VOCABULARY)
    for w in list(rare_tokens) + list(extra_words):
        if w not in words:
            words.append(w)
    return tuple(words)


def time_embedding(t_frac: torch.Tensor, dim: int) -> torch.Tensor:
    """Sinusoidal embedding of the normalized timestep."""
    half = dim // 2
    freqs = torch.exp(
        torch.arange(half, dtype=t_frac.dtype, device=t_frac.device)
        * (-math.log(1000.0) / max(half - 1, 1))
    )
    args = t_frac[:, None] * freqs[None, :] * 1000.0
    return torch.cat([torch.sin(args), torch.cos(args)], dim=-1)


class _Film(nn.Module):
    """Feature-wise scale/shift computed from the conditioning vector."""

    def __init__(self, cond_dim: int, channels: int):
        super().__init__()
        self.proj = nn.Linear(cond_dim, 2 * channels)

    def forward(self, h, cond):
        scale, shift = self.proj(cond).chunk(2, dim=-1)
        return h * (1.0 + scale[:, :, None, None]) + shift[:, :, None, None]


class _Encoder(nn.Module):
    def __init__(self, hidden: int, latent_channels: int, n_down: int):
        super().__init__()
        layers = []
        c_in = 3
        for _ in range(n_down):
            layers += [nn.Conv2d(c_in, hidden, 3, stride=2, padding=1), nn.SiLU()]
            c_in = hidden
        layers += [nn.Conv2d(c_in, latent_channels, 3, padding=1), nn.Tanh()]
        self.net = nn.Sequential(*layers)

    def forward(self, x):
        return self.net(x)


class _Decoder(nn.Module):
    def __init__(self, hidden: int, latent_channels: int, n_up: int):
        super().__init__()
        layers = []
        c_in = latent_channels
        for _ in range(n_up):
            layers += [nn.ConvTranspose2d(c_in, hidden, 4, stride=2, padding=1), nn.SiLU()]
            c_in = hidden
        layers += [nn.Conv2d(c_in, 3, 3, padding=1), nn.Sigmoid()]
        self.net = nn.Sequential(*layers)

    def forward(self, z):
        return self.net(z)


class _Denoiser(nn.Module):
    """Small convolutional noise predictor with FiLM conditioning on
    (prompt embedding, timestep embedding)."""

    def __init__(self, latent_channels: int, hidden: int, cond_dim: int, time_dim: int):
        super().__init__()
        self.time_dim = time_dim
        full = cond_dim + time_dim
        # Conditioning enters twice: broadcast as extra input channels (so the
        # first conv sees it directly) and through FiLM modulation.
        self.cond_proj = nn.Linear(full, 4)
        self.conv1 = nn.Conv2d(latent_channels + 4, hidden, 3, padding=1)
        self.film1 = _Film(full, hidden)
        self.conv2 = nn.Conv2d(hidden, hidden, 3, padding=1)
        self.film2 = _Film(full, hidden)
        self.conv_out = nn.Conv2d(hidden, latent_channels, 3, padding=1)
        self.act = nn.SiLU()

    def forward(self, z, t_frac, cond):
        temb = time_embedding(t_frac, self.time_dim)
        full = torch.cat([cond, temb], dim=-1)
        planes = self.cond_proj(full)[:, :, None, None].expand(-1, -1, z.shape[2], z.shape[3])
        h = self.act(self.film1(self.conv1(torch.cat([z, planes], dim=1)), full))
        h = self.act(self.film2(self.conv2(h), full))
        return self.conv_out(h)


class LatentDiffusionModel(nn.Module):
    """The four-segment parameter set (theta) plus its forward operations.

    The text embedder is frozen at initialization in every mode; the VAE and
    denoiser freeze/unfreeze per training mode (see trainer).
    """

    def __init__(self, vocabulary=None, k: int = 4, cond_dim: int = 16,
                 latent_channels: int = 4, hidden: int = 32,
                 schedule_T: int = 1000, schedule_family: str = "cosine",
                 seed: int = 0):
        super().__init__()
        if k < 1 or (k & (k - 1)) != 0:
            raise ConfigError(f"downsample factor k must be a power of two, got {k}")
        self.k = k
        self.cond_dim = cond_dim
        self.latent_channels = latent_channels
        self.hidden = hidden
        self.schedule_T = schedule_T
        self.schedule_family = schedule_family
        self.seed = seed
        self.vocabulary = tuple(vocabulary) if vocabulary is not None else build_vocabulary()
        self._vocab_index = {w: i for i, w in enumerate(self.vocabulary)}

        n_down = int(round(math.log2(k)))
        self.vae_encoder = _Encoder(hidden, latent_channels, n_down)
        self.vae_decoder = _Decoder(hidden, latent_channels, n_down)
        self.denoiser = _Denoiser(latent_channels, hidden, cond_dim, time_dim=16)
        self.text_embedder = nn.Embedding(len(self.vocabulary), cond_dim)

        self._init_parameters(seed)
        self.text_embedder.weight.requires_grad_(False)

    def _init_parameters(self, seed: int) -> None:
        g = torch.Generator().manual_seed(seed)
        for name, p in sorted(self.named_parameters(), key=lambda kv: kv[0]):
            with torch.no_grad():
                if name == "text_embedder.weight":
                    p.normal_(0.0, 1.0, generator=g)
                elif name.startswith("denoiser.conv_out"):
                    p.zero_()
                elif p.dim() > 1:
                    fan_in = int(np.prod(p.shape[1:]))
                    p.normal_(0.0, 1.0 / math.sqrt(fan_in), generator=g)
                else:
                    p.zero_()

    # ---- segment handling -------------------------------------------------

    def segment(self, name: str) -> nn.Module:
        if name not in SEGMENTS:
            raise ConfigError(f"unknown segment {name!r}")
        return getattr(self, name)

    def segment_bytes(self, name: str) -> bytes:
        """Serialized parameters of one segment, for freeze checks."""
        buf = io.BytesIO()
        sd = self.segment(name).state_dict()
        for key in sorted(sd):
            buf.write(sd[key].detach().numpy().tobytes())
        return buf.getvalue()

    def schedule(self) -> NoiseSchedule:
        return build_schedule(self.schedule_T, self.schedule_family)

    # ---- operations --------------------------------------------------------

    def encode(self, img: torch.Tensor) -> torch.Tensor:
        """Image (3,H,W) or (B,3,H,W) in [0,1] -> latent at 1/k resolution."""
        single = img.dim() == 3
        x = img.unsqueeze(0) if single else img
        if x.dim() != 4 or x.shape[1] != 3:
            raise ShapeError(f"expected (B,3,H,W) image, got {tuple(img.shape)}")
        if x.shape[2] % self.k or x.shape[3] % self.k:
            raise ShapeError(
                f"image dims {x.shape[2]}x{x.shape[3]} not divisible by k={self.k}"
            )
        z = self.vae_encoder(x)
        return z.squeeze(0) if single else z

    def decode(self, z: torch.Tensor) -> torch.Tensor:
        """Latent -> image in [0,1] at k times the latent resolution."""
        single = z.dim() == 3
        zz = z.unsqueeze(0) if single else z
        if zz.dim() != 4 or zz.shape[1] != self.latent_channels:
            raise ShapeError(
                f"expected (B,{self.latent_channels},h,w) latent, got {tuple(z.shape)}"
            )
        x = self.vae_decoder(zz)
        return x.squeeze(0) if single else x

    def tokenize(self, prompt: str) -> list:
        ids = []
        for word in prompt.split():
            if word not in self._vocab_index:
                raise UnknownTokenError(f"token {word!r} not in model vocabulary")
            ids.append(self._vocab_index[word])
        if not ids:
            raise UnknownTokenError("empty prompt")
        return ids

    def embed_prompt(self, prompt: str) -> torch.Tensor:
        """Frozen lookup-and-pool embedding of a whitespace-tokenized prompt."""
        ids = torch.tensor(self.tokenize(prompt), dtype=torch.long)
        return self.text_embedder(ids).mean(dim=0)

    def predict_noise(self, z_t: torch.Tensor, t, c: torch.Tensor) -> torch.Tensor:
        """Conditional noise estimate with the same shape as z_t.

        t may be an int (shared across the batch) or a 1-D tensor per item.
        """
        single = z_t.dim() == 3
        zz = z_t.unsqueeze(0) if single else z_t
        if zz.dim() != 4 or zz.shape[1] != self.latent_channels:
            raise ShapeError(f"bad latent shape {tuple(z_t.shape)}")
        cond = c.unsqueeze(0).expand(zz.shape[0], -1) if c.dim() == 1 else c
        if cond.shape[-1] != self.cond_dim:
            raise ShapeError(
                f"condition dim {cond.shape[-1]} != model cond_dim {self.cond_dim}"
            )
        if isinstance(t, int):
            t_frac = torch.full((zz.shape[0],), t / self.schedule_T, dtype=zz.dtype)
        else:
            t_frac = torch.as_tensor(t, dtype=zz.dtype) / self.schedule_T
        eps = self.denoiser(zz, t_frac, cond.to(zz.dtype))
        return eps.squeeze(0) if single else eps


def estimate_clean(z_t: torch.Tensor, t: int, eps_hat: torch.Tensor,
                   s: NoiseSchedule) -> torch.Tensor:
    """Invert the forward corruption: (z_t - sigma[t] * eps_hat) / alpha[t]."""
    if z_t.shape != eps_hat.shape:
        raise ShapeError(f"z_t shape {tuple(z_t.shape)} != eps_hat shape {tuple(eps_hat.shape)}")
    if not 0 <= t <= s.T:
        raise RangeError(f"timestep {t} outside [0, {s.T}]")
    a = float(s.alpha[t])
    if a == 0.0:
        raise SingularityError(f"alpha[{t}] = 0; cannot invert the forward process")
    return (z_t - float(s.sigma[t]) * eps_hat) / a


# ---- checkpoint archive ----------------------------------------------------


def save_checkpoint(model: LatentDiffusionModel, path) -> None:
    """Write a byte-stable archive: manifest.json plus one .npy per parameter."""
    manifest = {
        "format": _CHECKPOINT_FORMAT,
        "k": model.k,
        "cond_dim": model.cond_dim,
        "latent_channels": model.latent_channels,
        "hidden": model.hidden,
        "seed": model.seed,
        "vocabulary": list(model.vocabulary),
        "schedule": {"T": model.schedule_T, "family": model.schedule_family},
        "parameters": sorted(name for name, _ in model.named_parameters()),
    }
    with zipfile.ZipFile(path, "w", compression=zipfile.ZIP_STORED) as zf:
        info = zipfile.ZipInfo("manifest.json", date_time=_ZIP_EPOCH)
        zf.writestr(info, json.dumps(manifest, sort_keys=True, indent=1))
        params = dict(model.named_parameters())
        for name in manifest["parameters"]:
            buf = io.BytesIO()
            np.save(buf, params[name].detach().numpy())
            info = zipfile.ZipInfo(f"params/{name}.npy", date_time=_ZIP_EPOCH)
            zf.writestr(info, buf.getvalue())


def load_checkpoint(path) -> LatentDiffusionModel:
    """Rebuild a model from a checkpoint archive (bit-exact round-trip)."""
    with zipfile.ZipFile(path, "r") as zf:
        manifest = json.loads(zf.read("manifest.json"))
        if manifest.get("format") != _CHECKPOINT_FORMAT:
            raise ConfigError(f"unsupported checkpoint format {manifest.get('format')!r}")
        model = LatentDiffusionModel(
            vocabulary=manifest["vocabulary"],
            k=manifest["k"],
            cond_dim=manifest["cond_dim"],
            latent_channels=manifest["latent_channels"],
            hidden=manifest["hidden"],
            schedule_T=manifest["schedule"]["T"],
            schedule_family=manifest["schedule"]["family"],
            seed=manifest["seed"],
        )
        params = dict(model.named_parameters())
        for name in manifest["parameters"]:
            arr = np.load(io.BytesIO(zf.read(f"params/{name}.npy")))
            with torch.no_grad():
                params[name].copy_(torch.from_numpy(arr))
    model.text_embedder.weight.requires_grad_(False)
    return model
