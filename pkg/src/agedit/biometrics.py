"""Face embedding extraction and pairwise matching.

Two embedder roles exist: "loss" (used inside the biometric training term)
and "eval" (used for reported metrics). They must be distinct instances so
the metric never scores with the network that shaped the loss.
"""

from __future__ import annotations

import copy
import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .errors import ConfigError, DisjointnessError, InsufficientPairsError, ShapeError
from .evaluation import ScoreSet

ROLES = ("loss", "eval")


class _EmbedNet(nn.Module):
    def __init__(self, dim: int, hidden: int = 16):
        super().__init__()
        self.conv1 = nn.Conv2d(3, hidden, 3, stride=2, padding=1)
        self.conv2 = nn.Conv2d(hidden, 2 * hidden, 3, stride=2, padding=1)
        self.head = nn.Linear(2 * hidden, dim)
        self.act = nn.SiLU()

    def forward(self, x):
        h = self.act(self.conv1(x))
        h = self.act(self.conv2(h))
        h = h.mean(dim=(2, 3))
        return F.normalize(self.head(h), dim=-1)


@dataclass
class EmbedderHandle:
    """An embedder network plus its role and expected input resolution."""

    role: str
    net: _EmbedNet
    dim: int
    resolution: int = 32

    def __call__(self, img: torch.Tensor) -> torch.Tensor:
        single = img.dim() == 3
        x = img.unsqueeze(0) if single else img
        if x.dim() != 4 or x.shape[1] != 3:
            raise ShapeError(f"expected (B,3,H,W) image, got {tuple(img.shape)}")
        if x.shape[2] != self.resolution or x.shape[3] != self.resolution:
            x = F.interpolate(x, size=(self.resolution, self.resolution),
                              mode="bilinear", align_corners=False)
        out = self.net(x)
        return out.squeeze(0) if single else out


def create_embedder(role: str, seed: int = 0, dim: int = 32,
                    resolution: int = 32, trainable: bool = False) -> EmbedderHandle:
    if role not in ROLES:
        raise ConfigError(f"unknown embedder role {role!r}; expected one of {ROLES}")
    net = _EmbedNet(dim)
    g = torch.Generator().manual_seed(seed)
    for name, p in sorted(net.named_parameters(), key=lambda kv: kv[0]):
        with torch.no_grad():
            if p.dim() > 1:
                fan_in = int(np.prod(p.shape[1:]))
                p.normal_(0.0, 1.0 / math.sqrt(fan_in), generator=g)
            else:
                p.zero_()
        p.requires_grad_(trainable)
    return EmbedderHandle(role=role, net=net, dim=dim, resolution=resolution)


def embed(h: EmbedderHandle, img: torch.Tensor) -> torch.Tensor:
    """Unit-norm embedding of a single image."""
    with torch.no_grad():
        return h(img)


def match_score(a: torch.Tensor, b: torch.Tensor) -> float:
    """Cosine similarity in [-1, 1]."""
    a = torch.as_tensor(a, dtype=torch.float64).flatten()
    b = torch.as_tensor(b, dtype=torch.float64).flatten()
    if a.shape != b.shape:
        raise ShapeError(f"embedding dims differ: {a.shape[0]} vs {b.shape[0]}")
    denom = a.norm() * b.norm()
    return float((a @ b) / denom)


def _unpack(labeled):
    """Accept (subject_id, img) or (subject_id, image_id, img) items."""
    out = []
    for i, item in enumerate(labeled):
        if len(item) == 2:
            sid, img = item
            out.append((str(sid), f"img{i}", img))
        else:
            sid, image_id, img = item
            out.append((str(sid), str(image_id), img))
    return out


def _embed_all(h: EmbedderHandle, items):
    with torch.no_grad():
        vecs = h(torch.stack([img for _, _, img in items]))
    return [(sid, image_id, vecs[i]) for i, (sid, image_id, _) in enumerate(items)]


def pair_rows(h: EmbedderHandle, labeled) -> list:
    """All unordered pair scores within one labeled set.

    Rows: (pair_type, subject_a, subject_b, image_a, image_b, score).
    """
    items = _embed_all(h, _unpack(labeled))
    rows = []
    for i in range(len(items)):
        for j in range(i + 1, len(items)):
            sid_a, img_a, va = items[i]
            sid_b, img_b, vb = items[j]
            kind = "genuine" if sid_a == sid_b else "impostor"
            rows.append((kind, sid_a, sid_b, img_a, img_b, match_score(va, vb)))
    return rows


def cross_pair_rows(h: EmbedderHandle, labeled_a, labeled_b) -> list:
    """All cross-set pair scores (one image from each set)."""
    items_a = _embed_all(h, _unpack(labeled_a))
    items_b = _embed_all(h, _unpack(labeled_b))
    rows = []
    for sid_a, img_a, va in items_a:
        for sid_b, img_b, vb in items_b:
            kind = "genuine" if sid_a == sid_b else "impostor"
            rows.append((kind, sid_a, sid_b, img_a, img_b, match_score(va, vb)))
    return rows


def _to_score_set(rows) -> ScoreSet:
    genuine = tuple(r[5] for r in rows if r[0] == "genuine")
    impostor = tuple(r[5] for r in rows if r[0] == "impostor")
    if not genuine or not impostor:
        raise InsufficientPairsError(
            f"need at least one genuine and one impostor pair "
            f"(got {len(genuine)} genuine, {len(impostor)} impostor)"
        )
    return ScoreSet(genuine=genuine, impostor=impostor)


def score_pairs(h: EmbedderHandle, labeled) -> ScoreSet:
    """Genuine/impostor scores over all unordered pairs of a labeled set."""
    return _to_score_set(pair_rows(h, labeled))


def score_cross_pairs(h: EmbedderHandle, labeled_a, labeled_b) -> ScoreSet:
    """Genuine/impostor scores over all pairs spanning the two sets."""
    return _to_score_set(cross_pair_rows(h, labeled_a, labeled_b))


def write_scores_csv(rows, path) -> None:
    """CSV: pair_type,subject_a,subject_b,image_a,image_b,score."""
    import csv

    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["pair_type", "subject_a", "subject_b", "image_a", "image_b", "score"])
        writer.writerows(rows)


def save_embedder(h: EmbedderHandle, path) -> None:
    """Byte-stable archive mirroring the model checkpoint layout."""
    import io
    import json
    import zipfile

    meta = {"role": h.role, "dim": h.dim, "resolution": h.resolution,
            "parameters": sorted(name for name, _ in h.net.named_parameters())}
    with zipfile.ZipFile(path, "w", compression=zipfile.ZIP_STORED) as zf:
        info = zipfile.ZipInfo("manifest.json", date_time=(1980, 1, 1, 0, 0, 0))
        zf.writestr(info, json.dumps(meta, sort_keys=True, indent=1))
        params = dict(h.net.named_parameters())
        for name in meta["parameters"]:
            buf = io.BytesIO()
            np.save(buf, params[name].detach().numpy())
            info = zipfile.ZipInfo(f"params/{name}.npy", date_time=(1980, 1, 1, 0, 0, 0))
            zf.writestr(info, buf.getvalue())


def load_embedder(path) -> EmbedderHandle:
    import io
    import json
    import zipfile

    with zipfile.ZipFile(path, "r") as zf:
        meta = json.loads(zf.read("manifest.json"))
        h = create_embedder(role=meta["role"], dim=meta["dim"],
                            resolution=meta["resolution"])
        params = dict(h.net.named_parameters())
        for name in meta["parameters"]:
            arr = np.load(io.BytesIO(zf.read(f"params/{name}.npy")))
            with torch.no_grad():
                params[name].copy_(torch.from_numpy(arr))
    return h


def fine_tune_embedder(h: EmbedderHandle, labeled, epochs: int, seed: int = 0,
                       holdout_subject_ids=(), learning_rate: float = 1e-2,
                       margin: float = 0.2, batch_pairs: int = 64) -> EmbedderHandle:
    """Fine-tune an eval-role matcher on labeled (typically age-edited) images.

    Pairwise margin objective: pull same-subject embeddings together, push
    cross-subject similarity below the margin. Returns a new handle; the input
    handle is untouched. Training subjects must be disjoint from any held-out
    evaluation identities.
    """
    if h.role != "eval":
        raise ConfigError("fine_tune_embedder requires an eval-role embedder")
    items = _unpack(labeled)
    train_subjects = {sid for sid, _, _ in items}
    overlap = sorted(train_subjects & set(str(s) for s in holdout_subject_ids))
    if overlap:
        raise DisjointnessError(f"training subjects overlap evaluation identities: {overlap}")

    new = EmbedderHandle(role=h.role, net=copy.deepcopy(h.net), dim=h.dim,
                         resolution=h.resolution)
    if epochs == 0:
        return new

    images = torch.stack([img for _, _, img in items])
    sids = [sid for sid, _, _ in items]
    genuine_pairs = [(i, j) for i in range(len(items)) for j in range(i + 1, len(items))
                     if sids[i] == sids[j]]
    impostor_pairs = [(i, j) for i in range(len(items)) for j in range(i + 1, len(items))
                      if sids[i] != sids[j]]
    if not genuine_pairs or not impostor_pairs:
        raise InsufficientPairsError("need both genuine and impostor pairs to fine-tune")

    for p in new.net.parameters():
        p.requires_grad_(True)
    optimizer = torch.optim.Adam(new.net.parameters(), lr=learning_rate)
    rng = np.random.default_rng(seed)

    for _ in range(epochs):
        gen_idx = rng.permutation(len(genuine_pairs))
        for start in range(0, len(gen_idx), batch_pairs):
            gsel = [genuine_pairs[int(k)] for k in gen_idx[start:start + batch_pairs]]
            isel = [impostor_pairs[int(k)]
                    for k in rng.integers(0, len(impostor_pairs), size=len(gsel))]
            emb = new.net(images)
            sim_g = torch.stack([(emb[i] * emb[j]).sum() for i, j in gsel])
            sim_i = torch.stack([(emb[i] * emb[j]).sum() for i, j in isel])
            loss = (1.0 - sim_g).mean() + F.relu(sim_i - margin).mean()
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()

    for p in new.net.parameters():
        p.requires_grad_(False)
    return new
