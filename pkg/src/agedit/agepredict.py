"""Pluggable age-group predictor; the default is a small classifier trained
on the regularization set. A real external age predictor can be dropped in
anywhere a callable image -> group index is accepted."""

from __future__ import annotations

import math

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .errors import InsufficientDataError
from .prompts import AGE_GROUPS


class AgePredictor(nn.Module):
    """Six-way age-group classifier over (3,H,W) images in [0,1]."""

    def __init__(self, hidden: int = 16, seed: int = 0):
        super().__init__()
        self.conv1 = nn.Conv2d(3, hidden, 3, stride=2, padding=1)
        self.conv2 = nn.Conv2d(hidden, 2 * hidden, 3, stride=2, padding=1)
        self.head = nn.Linear(2 * hidden, len(AGE_GROUPS))
        self.act = nn.SiLU()
        g = torch.Generator().manual_seed(seed)
        for name, p in sorted(self.named_parameters(), key=lambda kv: kv[0]):
            with torch.no_grad():
                if p.dim() > 1:
                    fan_in = int(np.prod(p.shape[1:]))
                    p.normal_(0.0, 1.0 / math.sqrt(fan_in), generator=g)
                else:
                    p.zero_()

    def forward(self, x):
        h = self.act(self.conv1(x))
        h = self.act(self.conv2(h))
        return self.head(h.mean(dim=(2, 3)))

    def predict(self, img: torch.Tensor) -> int:
        """Most likely group index (child=0 ... old=5)."""
        single = img.dim() == 3
        x = img.unsqueeze(0) if single else img
        with torch.no_grad():
            idx = self(x).argmax(dim=-1)
        return int(idx[0]) if single else [int(i) for i in idx]


def train_age_predictor(labeled, epochs: int = 300, seed: int = 0,
                        learning_rate: float = 1e-2, batch_size: int = 32,
                        noise_std: float = 0.05,
                        weight_decay: float = 1e-4) -> AgePredictor:
    """Fit the default predictor on (group_index, image) pairs.

    Gaussian noise augmentation plus weight decay keep the classifier from
    memorizing subject-specific texture, so it stays consistent on unseen
    subjects and on blurry generated images.
    """
    labeled = list(labeled)
    if not labeled:
        raise InsufficientDataError("no labeled images to train the age predictor")
    predictor = AgePredictor(seed=seed)
    images = torch.stack([img for _, img in labeled])
    targets = torch.tensor([int(g) for g, _ in labeled], dtype=torch.long)
    optimizer = torch.optim.Adam(predictor.parameters(), lr=learning_rate,
                                 weight_decay=weight_decay)
    rng = np.random.default_rng(seed)
    for _ in range(epochs):
        order = rng.permutation(len(labeled))
        for start in range(0, len(order), batch_size):
            sel = torch.from_numpy(order[start:start + batch_size].astype(np.int64))
            x = images[sel]
            if noise_std > 0:
                x = (x + noise_std * torch.from_numpy(
                    rng.standard_normal(x.shape).astype(np.float32))).clamp(0.0, 1.0)
            logits = predictor(x)
            loss = F.cross_entropy(logits, targets[sel])
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
    for p in predictor.parameters():
        p.requires_grad_(False)
    return predictor
