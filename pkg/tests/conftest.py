from __future__ import annotations

import copy
from pathlib import Path

import pytest
import torch

from agedit.data import load_image, load_manifest, manifest_base_dir
from agedit.model import LatentDiffusionModel
from agedit.trainer import TrainConfig, fine_tune, pretrain_vae

FIXTURES = Path(__file__).parent / "fixtures"

# Desk-scale training setup shared by the convergence / dispersion tests:
# the linear family keeps sigma/alpha bounded, which the randomly initialized
# toy model needs; lr is the documented toy override of the 1e-6 default.
TOY_SCHEDULE = {"schedule_T": 100, "schedule_family": "linear"}
TOY_LR = 1e-3
TOY_STEPS = 800
VAE_PRETRAIN_STEPS = 1500


@pytest.fixture(scope="session")
def toy_manifest():
    return load_manifest(FIXTURES / "train" / "manifest.json")


@pytest.fixture(scope="session")
def toy_images(toy_manifest):
    base = manifest_base_dir(toy_manifest)
    training = [load_image(base / p, 32) for p in toy_manifest.training.image_paths]
    reg = [(p.caption, load_image(base / p.path, 32)) for p in toy_manifest.regularization]
    return {"training": training, "reg": reg}


class _TrainCache:
    """Lazily trains and memoizes toy models so heavy tests share work."""

    def __init__(self, manifest, images):
        self.manifest = manifest
        self.images = images
        self._pretrained = {}
        self._runs = {}

    def pretrained(self, seed: int) -> LatentDiffusionModel:
        if seed not in self._pretrained:
            model = LatentDiffusionModel(seed=seed, **TOY_SCHEDULE)
            all_imgs = self.images["training"] + [img for _, img in self.images["reg"]]
            pretrain_vae(model, all_imgs, steps=VAE_PRETRAIN_STEPS, seed=seed)
            self._pretrained[seed] = model
        return copy.deepcopy(self._pretrained[seed])

    def run(self, mode: str, seed: int = 0, steps: int = TOY_STEPS):
        key = (mode, seed, steps)
        if key not in self._runs:
            model = self.pretrained(seed)
            config = TrainConfig(mode=mode, token="sks", learning_rate=TOY_LR,
                                 steps=steps, batch_size=8, seed=seed)
            record = fine_tune(model, self.manifest, model.schedule(), config)
            self._runs[key] = record
        return self._runs[key]


@pytest.fixture(scope="session")
def train_cache(toy_manifest, toy_images):
    return _TrainCache(toy_manifest, toy_images)


_ACCEPTANCE_RESULTS = {}


def pytest_runtest_logreport(report):
    if "test_acceptance.py" not in report.nodeid:
        return
    name = report.nodeid.split("::")[-1]
    if report.when == "call":
        _ACCEPTANCE_RESULTS[name] = report.outcome
    elif report.when == "setup" and report.outcome != "passed":
        _ACCEPTANCE_RESULTS[name] = report.outcome


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE_RESULTS:
        return
    terminalreporter.write_line("")
    terminalreporter.write_line("acceptance summary:")
    for name in sorted(_ACCEPTANCE_RESULTS):
        outcome = _ACCEPTANCE_RESULTS[name]
        status = "PASS" if outcome == "passed" else "FAIL"
        terminalreporter.write_line(f"  {name}: {status}")
