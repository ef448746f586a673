import json

import pytest
import torch

from agedit.data import (
    BatchItem,
    DatasetManifest,
    RegularizationPair,
    SubjectRecord,
    load_image,
    load_manifest,
    make_batches,
    save_image,
    scan_directories,
    validate_disjoint,
)
from agedit.errors import ConfigError, DisjointnessError, ManifestError

from conftest import FIXTURES


def _write_manifest(tmp_path, data):
    path = tmp_path / "manifest.json"
    path.write_text(json.dumps(data))
    return path


def _touch_png(tmp_path, rel):
    p = tmp_path / rel
    p.parent.mkdir(parents=True, exist_ok=True)
    save_image(torch.rand(3, 8, 8), p)
    return rel


def test_fixture_manifest_loads(toy_manifest):
    assert toy_manifest.training.subject_id == "subj0"
    assert len(toy_manifest.training.image_paths) == 20
    assert len(toy_manifest.regularization) == 72
    assert "subj0" not in toy_manifest.regularization_subject_ids


def test_caption_vocabulary_enforced():
    with pytest.raises(ManifestError):
        RegularizationPair(path="x.png", caption="kid", subject_id="r1")


def test_subject_record_validation():
    with pytest.raises(ManifestError):
        SubjectRecord(subject_id="", image_paths=("a.png",))
    with pytest.raises(ManifestError):
        SubjectRecord(subject_id="s", image_paths=())


def test_disjointness_detection():
    m = DatasetManifest(
        training=SubjectRecord("s1", ("a.png",)),
        regularization=(RegularizationPair("b.png", "child", "s1"),),
    )
    report = validate_disjoint(m)
    assert not report.ok and report.offending_ids == ("s1",)


def test_load_manifest_rejects_overlap(tmp_path):
    a = _touch_png(tmp_path, "a.png")
    b = _touch_png(tmp_path, "b.png")
    path = _write_manifest(tmp_path, {
        "training": {"subject_id": "s1", "images": [a]},
        "regularization": [{"path": b, "caption": "child", "subject_id": "s1"}],
    })
    with pytest.raises(DisjointnessError):
        load_manifest(path)


def test_load_manifest_missing_image(tmp_path):
    path = _write_manifest(tmp_path, {
        "training": {"subject_id": "s1", "images": ["nope.png"]},
        "regularization": [],
    })
    with pytest.raises(ManifestError):
        load_manifest(path)


def test_load_manifest_malformed(tmp_path):
    path = tmp_path / "manifest.json"
    path.write_text("{not json")
    with pytest.raises(ManifestError):
        load_manifest(path)
    path.write_text(json.dumps({"regularization": []}))
    with pytest.raises(ManifestError):
        load_manifest(path)
    with pytest.raises(ManifestError):
        load_manifest(tmp_path / "missing.json")


def test_batch_sizes_and_epoch_coverage(toy_manifest):
    batches = list(make_batches(toy_manifest, batch_size=8, seed=0, epochs=1))
    assert [len(b) for b in batches] == [8, 8, 4]
    seen = [item.training_path for b in batches for item in b]
    assert sorted(seen) == sorted(toy_manifest.training.image_paths)
    for b in batches:
        for item in b:
            assert isinstance(item, BatchItem)
            assert item.reg_caption in {p.caption for p in toy_manifest.regularization}


def test_batches_deterministic_per_seed(toy_manifest):
    a = list(make_batches(toy_manifest, 8, seed=5, epochs=2))
    b = list(make_batches(toy_manifest, 8, seed=5, epochs=2))
    assert a == b
    c = list(make_batches(toy_manifest, 8, seed=6, epochs=2))
    assert a != c


def test_reg_stream_exhaustive_before_repeat(toy_manifest):
    # 72 reg pairs; the first 72 draws must be a permutation of all of them.
    items = []
    for batch in make_batches(toy_manifest, 8, seed=0, epochs=None):
        items.extend(batch)
        if len(items) >= 72:
            break
    paths = [i.reg_path for i in items[:72]]
    assert sorted(paths) == sorted(p.path for p in toy_manifest.regularization)


def test_infinite_stream(toy_manifest):
    gen = make_batches(toy_manifest, 8, seed=0, epochs=None)
    for _ in range(10):
        assert len(next(gen)) >= 1


def test_make_batches_errors(toy_manifest):
    with pytest.raises(ConfigError):
        list(make_batches(toy_manifest, 0, seed=0))
    empty = DatasetManifest(
        training=SubjectRecord("s1", ("a.png",)), regularization=()
    )
    with pytest.raises(ConfigError):
        list(make_batches(empty, 4, seed=0))


def test_image_roundtrip(tmp_path):
    img = torch.rand(3, 16, 16)
    save_image(img, tmp_path / "x.png")
    back = load_image(tmp_path / "x.png")
    assert back.shape == (3, 16, 16)
    assert float((back - img).abs().max()) <= 1.0 / 255.0 + 1e-6


def test_load_image_resizes(tmp_path):
    save_image(torch.rand(3, 16, 16), tmp_path / "x.png")
    img = load_image(tmp_path / "x.png", 32)
    assert img.shape == (3, 32, 32)
    assert img.min() >= 0.0 and img.max() <= 1.0


def test_scan_directories(tmp_path):
    _touch_png(tmp_path, "subjects/s1/00.png")
    _touch_png(tmp_path, "subjects/s1/01.png")
    _touch_png(tmp_path, "reg/child/r1_0.png")
    _touch_png(tmp_path, "reg/old/r2_0.png")
    raw = scan_directories(tmp_path / "subjects", tmp_path / "reg", "s1")
    assert len(raw["training"]["images"]) == 2
    subj_ids = {e["subject_id"] for e in raw["regularization"]}
    assert subj_ids == {"r1", "r2"}
    assert set(raw["empty_groups"]) == {"teenager", "youngadults", "middleaged", "elderly"}
    with pytest.raises(ManifestError):
        scan_directories(tmp_path / "subjects", tmp_path / "reg", "nobody")
