"""Training-set / regularization-set manifests and deterministic batching.

Manifest schema (JSON):
    {"training": {"subject_id": str, "images": [paths]},
     "regularization": [{"path": str, "caption": str, "subject_id": str}]}

Relative paths are resolved against the manifest's directory.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from .errors import ConfigError, DisjointnessError, ManifestError
from .prompts import CAPTION_VOCABULARY


@dataclass(frozen=True)
class SubjectRecord:
    subject_id: str
    image_paths: tuple

    def __post_init__(self):
        if not self.subject_id:
            raise ManifestError("subject_id must be nonempty")
        if not self.image_paths:
            raise ManifestError(f"subject {self.subject_id!r} has no images")


@dataclass(frozen=True)
class RegularizationPair:
    path: str
    caption: str
    subject_id: str

    def __post_init__(self):
        if self.caption not in CAPTION_VOCABULARY:
            raise ManifestError(
                f"caption {self.caption!r} for {self.path!r} not in vocabulary "
                f"{CAPTION_VOCABULARY}"
            )


@dataclass(frozen=True)
class DatasetManifest:
    training: SubjectRecord
    regularization: tuple

    @property
    def regularization_subject_ids(self) -> tuple:
        seen = []
        for pair in self.regularization:
            if pair.subject_id not in seen:
                seen.append(pair.subject_id)
        return tuple(seen)


@dataclass(frozen=True)
class DisjointnessReport:
    ok: bool
    offending_ids: tuple = ()


def validate_disjoint(m: DatasetManifest) -> DisjointnessReport:
    """Check that the training subject never appears in the regularization set."""
    offenders = tuple(
        sorted({p.subject_id for p in m.regularization if p.subject_id == m.training.subject_id})
    )
    return DisjointnessReport(ok=not offenders, offending_ids=offenders)


def load_manifest(path) -> DatasetManifest:
    """Load and fully validate a manifest; every referenced image must exist."""
    path = Path(path)
    if not path.is_file():
        raise ManifestError(f"manifest file not found: {path}")
    try:
        raw = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ManifestError(f"manifest {path} is not valid JSON: {exc}") from exc

    base = path.parent
    try:
        training = SubjectRecord(
            subject_id=str(raw["training"]["subject_id"]),
            image_paths=tuple(str(p) for p in raw["training"]["images"]),
        )
        regularization = tuple(
            RegularizationPair(
                path=str(entry["path"]),
                caption=str(entry["caption"]),
                subject_id=str(entry["subject_id"]),
            )
            for entry in raw.get("regularization", [])
        )
    except (KeyError, TypeError) as exc:
        raise ManifestError(f"manifest {path} is malformed: missing field {exc}") from exc

    for p in training.image_paths:
        if not (base / p).is_file():
            raise ManifestError(f"training image not found: {base / p}")
    for pair in regularization:
        if not (base / pair.path).is_file():
            raise ManifestError(f"regularization image not found: {base / pair.path}")

    manifest = DatasetManifest(training=training, regularization=regularization)
    report = validate_disjoint(manifest)
    if not report.ok:
        raise DisjointnessError(
            f"training subject also appears in regularization set: {report.offending_ids}"
        )
    object.__setattr__(manifest, "_base_dir", base)
    return manifest


def manifest_base_dir(m: DatasetManifest) -> Path:
    return getattr(m, "_base_dir", Path("."))


@dataclass(frozen=True)
class BatchItem:
    """One training example paired with one prior-preservation example."""

    training_path: str
    reg_path: str
    reg_caption: str


def make_batches(m: DatasetManifest, batch_size: int, seed: int, epochs=1):
    """Yield deterministic batches of BatchItem triples.

    Each epoch is a fresh permutation of the training images; every image is
    visited once per epoch. Regularization pairs are drawn from an independent
    permutation stream, also exhaustive before repeating. epochs=None streams
    forever.
    """
    if batch_size < 1:
        raise ConfigError(f"batch_size must be >= 1, got {batch_size}")
    if not m.regularization:
        raise ConfigError("manifest has no regularization pairs; cannot form batches")

    rng = np.random.default_rng(seed)
    n_train = len(m.training.image_paths)
    n_reg = len(m.regularization)
    reg_order: list = []

    def next_reg() -> RegularizationPair:
        nonlocal reg_order
        if not reg_order:
            reg_order = list(rng.permutation(n_reg))
        return m.regularization[int(reg_order.pop(0))]

    epoch = 0
    while epochs is None or epoch < epochs:
        order = rng.permutation(n_train)
        for start in range(0, n_train, batch_size):
            batch = []
            for idx in order[start:start + batch_size]:
                reg = next_reg()
                batch.append(
                    BatchItem(
                        training_path=m.training.image_paths[int(idx)],
                        reg_path=reg.path,
                        reg_caption=reg.caption,
                    )
                )
            yield batch
        epoch += 1


# ---- image IO ---------------------------------------------------------------


def load_image(path, resolution: int | None = None) -> torch.Tensor:
    """Load a PNG/JPEG as a (3,H,W) float tensor in [0,1], optionally resized
    with bilinear interpolation."""
    img = Image.open(path).convert("RGB")
    if resolution is not None and img.size != (resolution, resolution):
        img = img.resize((resolution, resolution), Image.BILINEAR)
    arr = np.asarray(img, dtype=np.float32) / 255.0
    return torch.from_numpy(arr).permute(2, 0, 1).contiguous()


def save_image(tensor: torch.Tensor, path) -> None:
    """Write a (3,H,W) float tensor in [0,1] as PNG."""
    arr = (tensor.detach().clamp(0, 1).permute(1, 2, 0).numpy() * 255.0).round()
    Image.fromarray(arr.astype(np.uint8)).save(path, format="PNG")


def scan_directories(subjects_dir, reg_dir, subject_id: str) -> dict:
    """Bulk-import convention: subjects/<id>/*.png and reg/<agegroup>/*.png.

    Returns a raw manifest dict (paths relative to the common parent are left
    as given). Regularization subject ids come from the filename stem up to
    the first underscore.
    """
    subjects_dir, reg_dir = Path(subjects_dir), Path(reg_dir)
    subj = subjects_dir / subject_id
    if not subj.is_dir():
        raise ManifestError(f"subject directory not found: {subj}")
    images = sorted(str(p) for p in subj.glob("*.png"))
    if not images:
        raise ManifestError(f"no PNG images under {subj}")

    regularization = []
    missing_groups = []
    for caption in CAPTION_VOCABULARY:
        group_dir = reg_dir / caption
        entries = sorted(group_dir.glob("*.png")) if group_dir.is_dir() else []
        if not entries:
            missing_groups.append(caption)
        for p in entries:
            reg_subject = p.stem.split("_")[0]
            regularization.append(
                {"path": str(p), "caption": caption, "subject_id": reg_subject}
            )
    return {
        "training": {"subject_id": subject_id, "images": images},
        "regularization": regularization,
        "empty_groups": missing_groups,
    }
