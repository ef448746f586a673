"""Verification metrics: DET curves, FNMR at fixed FMR, rank-1
identification, age dispersion, and the four-condition matching report.

Rates are empirical step functions (no interpolation). A pair is accepted
when its score >= threshold, so FMR is non-increasing and FNMR non-decreasing
as the threshold rises.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field

import numpy as np

from .errors import InsufficientDataError

DEFAULT_FMR_TARGETS = (1e-4, 1e-3)


@dataclass(frozen=True)
class ScoreSet:
    genuine: tuple
    impostor: tuple

    def __post_init__(self):
        object.__setattr__(self, "genuine", tuple(float(s) for s in self.genuine))
        object.__setattr__(self, "impostor", tuple(float(s) for s in self.impostor))
        if not all(np.isfinite(self.genuine)) or not all(np.isfinite(self.impostor)):
            raise InsufficientDataError("score sets must contain finite values only")


@dataclass(frozen=True)
class OperatingPoint:
    threshold: float
    fmr: float
    fnmr: float


@dataclass(frozen=True)
class DETCurve:
    points: tuple

    @property
    def thresholds(self):
        return np.array([p.threshold for p in self.points])

    @property
    def fmr(self):
        return np.array([p.fmr for p in self.points])

    @property
    def fnmr(self):
        return np.array([p.fnmr for p in self.points])


def compute_det(s: ScoreSet) -> DETCurve:
    """DET curve over all distinct observed scores plus sentinels.

    FMR(t) = |{impostor >= t}| / n_impostor, FNMR(t) = |{genuine < t}| / n_genuine.
    """
    if not s.genuine or not s.impostor:
        raise InsufficientDataError("need at least one genuine and one impostor score")
    genuine = np.sort(np.asarray(s.genuine, dtype=np.float64))
    impostor = np.sort(np.asarray(s.impostor, dtype=np.float64))
    observed = np.unique(np.concatenate([genuine, impostor]))
    eps = max(1e-6, 1e-6 * (observed[-1] - observed[0]))
    thresholds = np.concatenate([[observed[0] - eps], observed, [observed[-1] + eps]])

    points = []
    for t in thresholds:
        fmr = float(np.sum(impostor >= t)) / impostor.size
        fnmr = float(np.sum(genuine < t)) / genuine.size
        points.append(OperatingPoint(threshold=float(t), fmr=fmr, fnmr=fnmr))
    return DETCurve(points=tuple(points))


def fnmr_at_fmr(curve: DETCurve, target_fmr: float) -> float:
    """FNMR at the smallest threshold whose FMR <= target (most favorable
    admissible operating point)."""
    for point in curve.points:  # thresholds ascending, fmr non-increasing
        if point.fmr <= target_fmr:
            return point.fnmr
    return 1.0  # unreachable: the top sentinel always has fmr = 0


def rank1_identification(gallery, probes) -> float:
    """Fraction of probes whose most-similar gallery entry shares their
    subject id; ties resolve to the lowest gallery index.

    gallery/probes: lists of (subject_id, embedding vector).
    """
    if not gallery or not probes:
        raise InsufficientDataError("gallery and probes must be nonempty")
    g_ids = [sid for sid, _ in gallery]
    g_mat = np.stack([np.asarray(v, dtype=np.float64) for _, v in gallery])
    correct = 0
    for sid, vec in probes:
        sims = g_mat @ np.asarray(vec, dtype=np.float64)
        best = int(np.argmax(sims))  # argmax returns the first maximum
        if g_ids[best] == sid:
            correct += 1
    return correct / len(probes)


def age_dispersion(predicted) -> float:
    """Population standard deviation of predicted ages or group indices."""
    values = np.asarray(list(predicted), dtype=np.float64)
    if values.size == 0:
        raise InsufficientDataError("empty prediction list")
    return float(np.std(values))


@dataclass
class EvalReport:
    """Four-condition matching comparison plus metadata."""

    conditions: dict          # name -> {"fnmr_at": {target: value}}
    fmr_targets: tuple
    metadata: dict = field(default_factory=dict)

    def to_json(self) -> str:
        payload = {
            "fmr_targets": list(self.fmr_targets),
            "conditions": {
                name: {"fnmr_at": {str(t): v for t, v in entry["fnmr_at"].items()}}
                for name, entry in self.conditions.items()
            },
            "metadata": self.metadata,
        }
        return json.dumps(payload, indent=2, sort_keys=True)


CONDITIONS = ("ori-ori", "mod-mod", "ori-mod-pre", "ori-mod-post")


def compare_experiments(ori_images, mod_images, eval_embedder, finetuned_embedder,
                        fmr_targets=DEFAULT_FMR_TARGETS, metadata=None) -> EvalReport:
    """Score the four matching conditions and report FNMR at each FMR target.

    ori_images / mod_images: lists of (subject_id, image tensor). The pre/post
    conditions score original-vs-modified cross pairs with the eval embedder
    before and after matcher fine-tuning.
    """
    from .biometrics import score_cross_pairs, score_pairs

    score_sets = {
        "ori-ori": score_pairs(eval_embedder, ori_images),
        "mod-mod": score_pairs(eval_embedder, mod_images),
        "ori-mod-pre": score_cross_pairs(eval_embedder, ori_images, mod_images),
        "ori-mod-post": score_cross_pairs(finetuned_embedder, ori_images, mod_images),
    }
    conditions = {}
    for name, sset in score_sets.items():
        curve = compute_det(sset)
        conditions[name] = {
            "fnmr_at": {float(t): fnmr_at_fmr(curve, t) for t in fmr_targets}
        }
    return EvalReport(conditions=conditions, fmr_targets=tuple(fmr_targets),
                      metadata=dict(metadata or {}))


def write_det_csv(curve: DETCurve, path) -> None:
    """CSV: threshold,fmr,fnmr."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["threshold", "fmr", "fnmr"])
        for p in curve.points:
            writer.writerow([p.threshold, p.fmr, p.fnmr])


def plot_det(curves: dict, path) -> None:
    """Save a DET plot (FMR vs FNMR, log-log) for named curves."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(5, 4))
    for name, curve in curves.items():
        fmr = np.clip(curve.fmr, 1e-6, 1.0)
        fnmr = np.clip(curve.fnmr, 1e-6, 1.0)
        ax.plot(fmr, fnmr, label=name)
    ax.set_xscale("log")
    ax.set_yscale("log")
    ax.set_xlabel("FMR")
    ax.set_ylabel("FNMR")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
