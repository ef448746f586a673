"""Synthetic desk-scale face corpus.

Procedurally rendered 32x32 "faces" with a controllable identity signal
(subject-unique texture, face geometry, skin tone) and a strong, monotone
age signal (global brightness, wrinkle energy, hair lightness). Good enough
to drive the embedders, the age predictor, and the diffusion trainer without
any external dataset.
"""

from __future__ import annotations

import zlib

import numpy as np
import torch

# Representative age (years) used when rendering each group's exemplars.
GROUP_AGES = {
    "child": 8.0,
    "teenager": 22.0,
    "youngadults": 34.0,
    "middleaged": 45.0,
    "elderly": 57.0,
    "old": 75.0,
}

SIZE = 32


def identity_seed(subject_id: str) -> int:
    return zlib.crc32(subject_id.encode("utf-8"))


def face_image(subject_id: str, age: float, variation: int = 0) -> torch.Tensor:
    """Render one (3,32,32) image in [0,1] for a subject at a given age."""
    rng_id = np.random.default_rng(identity_seed(subject_id))
    rng_var = np.random.default_rng((identity_seed(subject_id) * 1000003 + variation) % 2**32)

    yy, xx = np.mgrid[0:SIZE, 0:SIZE] / (SIZE - 1.0)

    base_color = 0.45 + 0.35 * rng_id.random(3)
    texture = np.kron(rng_id.normal(0.0, 1.0, (4, 4, 3)), np.ones((8, 8, 1)))
    cy, cx = 0.5 + 0.08 * rng_id.standard_normal(2)
    ry, rx = 0.32 + 0.05 * rng_id.random(2)
    face_mask = (((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2) <= 1.0

    img = np.empty((SIZE, SIZE, 3))
    img[:] = 0.25 + 0.15 * texture
    img[face_mask] = base_color[None, :] + 0.10 * texture[face_mask]

    # Eyes: two dark dots at identity-specific offsets.
    for dx in (-0.12, 0.12):
        ey = int((cy - 0.08 + 0.02 * rng_id.standard_normal()) * (SIZE - 1))
        ex = int((cx + dx) * (SIZE - 1))
        img[max(ey, 0):ey + 2, max(ex, 0):ex + 2] = 0.05

    a = float(np.clip(age, 0.0, 100.0)) / 100.0
    # Wrinkles: horizontal high-frequency bands inside the face, growing with age.
    wrinkles = 0.30 * a * np.sin(2.0 * np.pi * yy * 10.0)
    img[face_mask] += wrinkles[face_mask, None]
    # Hair band: darkens when young, grays out with age.
    hair = 0.12 + 0.75 * a
    img[:5, :, :] = hair + 0.05 * texture[:5, :, :]
    # Global brightness drops and color temperature cools monotonically with
    # age; these survive heavy blurring, so even crude generations carry them.
    img *= 1.05 - 0.45 * a
    img[:, :, 0] *= 1.10 - 0.60 * a
    img[:, :, 2] *= 0.55 + 0.60 * a

    img += 0.02 * rng_var.standard_normal(img.shape) + 0.02 * rng_var.standard_normal()
    img = np.clip(img, 0.0, 1.0).astype(np.float32)
    return torch.from_numpy(img).permute(2, 0, 1).contiguous()


def subject_images(subject_id: str, age: float, count: int, start_variation: int = 0) -> list:
    return [face_image(subject_id, age, start_variation + i) for i in range(count)]
