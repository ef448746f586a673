"""End-to-end acceptance checks for the age-editing and verification pipeline.

Each test prints one PASS/FAIL line (see the terminal summary emitted from
conftest) and enforces both the numeric tolerance and a CPU time budget.
"""

import json
import math
import time

import numpy as np
import torch
import torch.nn.functional as F

from agedit.biometrics import (
    create_embedder,
    fine_tune_embedder,
    score_cross_pairs,
)
from agedit.data import save_image
from agedit.evaluation import ScoreSet, compute_det, fnmr_at_fmr, age_dispersion
from agedit.losses import (
    LossWeights,
    biometric_term,
    nt_xent,
    prior_term,
    reconstruction_term,
)
from agedit.model import LatentDiffusionModel, estimate_clean
from agedit.prompts import AGE_GROUPS, PromptSpec, group_index, parse_caption, render_prompt
from agedit.sampler import QualityGateConfig, generate_aged, quality_gate
from agedit.schedule import build_schedule, forward_diffuse
from agedit.toyfaces import face_image
from agedit.trainer import TrainConfig, fine_tune
from agedit.agepredict import train_age_predictor

from conftest import TOY_SCHEDULE, TOY_LR


def _finish(start, budget_seconds, ok, detail):
    elapsed = time.perf_counter() - start
    assert elapsed < budget_seconds, f"over time budget: {elapsed:.1f}s >= {budget_seconds}s"
    assert ok, detail
    return elapsed


def test_01_schedule_variance_preserving():
    start = time.perf_counter()
    worst = 0.0
    for family in ("cosine", "linear"):
        for T in (4, 100, 1000):
            s = build_schedule(T, family)
            worst = max(worst, float(np.max(np.abs(s.alpha**2 + s.sigma**2 - 1.0))))
    _finish(start, 1.0, worst < 1e-12, f"max |alpha^2+sigma^2-1| = {worst:g}")


def test_02_forward_inverse_identity():
    start = time.perf_counter()
    s = build_schedule(100, "cosine")
    rng = np.random.default_rng(0)
    worst = 0.0
    for _ in range(100):
        z0 = torch.from_numpy(rng.standard_normal((4, 6, 6)))
        noise = torch.from_numpy(rng.standard_normal((4, 6, 6)))
        t = int(rng.integers(1, 101))
        back = estimate_clean(forward_diffuse(z0, t, noise, s), t, noise, s)
        worst = max(worst, float((back - z0).abs().max()))
    _finish(start, 1.0, worst < 1e-10, f"max round-trip error = {worst:g}")


def _brute_force_nt_xent(z_hat, z0, temperature):
    n = z_hat.shape[0]
    views = torch.cat([
        F.normalize(z_hat.reshape(n, -1), dim=1),
        F.normalize(z0.reshape(n, -1), dim=1),
    ])
    total = 0.0
    for i in range(2 * n):
        pos = (i + n) % (2 * n)
        num = math.exp(float(views[i] @ views[pos]) / temperature)
        den = sum(math.exp(float(views[i] @ views[j]) / temperature)
                  for j in range(2 * n) if j != i)
        total += -math.log(num / den)
    return total / (2 * n)


def test_03_contrastive_loss_oracle_and_hand_cases():
    start = time.perf_counter()
    rng = np.random.default_rng(1)
    worst = 0.0
    for _ in range(50):
        n = int(rng.integers(2, 9))
        d = int(rng.integers(2, 33))
        tau = float(rng.uniform(0.1, 1.0))
        z_hat = torch.from_numpy(rng.standard_normal((n, d)))
        z0 = torch.from_numpy(rng.standard_normal((n, d)))
        worst = max(worst, abs(float(nt_xent(z_hat, z0, tau))
                               - _brute_force_nt_xent(z_hat, z0, tau)))
    a = torch.tensor([[1.0, 0.0], [0.0, 1.0]])
    aligned = float(nt_xent(a, a.clone(), 0.5))
    b = torch.tensor([[1.0, 0.0], [1.0, 0.0]])
    uniform = float(nt_xent(b, 2.0 * b, 0.5))
    hand_ok = abs(aligned - 0.2395) < 1e-4 and abs(uniform - math.log(3.0)) < 1e-4
    _finish(start, 5.0, worst < 1e-6 and hand_ok,
            f"oracle gap {worst:g}, hand values {aligned:.4f}/{uniform:.4f}")


def _fd_relative_error(objective, leaf):
    loss = objective()
    (grad,) = torch.autograd.grad(loss, leaf)
    eps = 1e-6
    flat = leaf.data.view(-1)
    worst = 0.0
    for idx in range(flat.numel()):
        orig = float(flat[idx])
        with torch.no_grad():
            flat[idx] = orig + eps
            up = float(objective())
            flat[idx] = orig - eps
            down = float(objective())
            flat[idx] = orig
        fd = (up - down) / (2 * eps)
        ref = float(grad.view(-1)[idx])
        worst = max(worst, abs(fd - ref) / max(abs(ref), 1e-6))
    return worst


def test_04_loss_gradients_match_finite_differences():
    start = time.perf_counter()
    g = torch.Generator().manual_seed(2)
    results = {}

    z0 = torch.randn(2, 4, 4, dtype=torch.float64, generator=g)
    z0_hat = torch.randn(2, 4, 4, dtype=torch.float64, generator=g).requires_grad_(True)
    results["reconstruction"] = _fd_relative_error(
        lambda: reconstruction_term(z0, z0_hat, w_t=1.3), z0_hat)

    xp = torch.randn(2, 4, 4, dtype=torch.float64, generator=g)
    xp_hat = torch.randn(2, 4, 4, dtype=torch.float64, generator=g).requires_grad_(True)
    results["prior"] = _fd_relative_error(lambda: prior_term(xp, xp_hat, 0.7), xp_hat)

    W = torch.randn(8, 48, dtype=torch.float64, generator=g)
    embedder = lambda img: torch.tanh(W @ img.reshape(-1))
    truth = torch.rand(3, 4, 4, dtype=torch.float64, generator=g)
    gen = torch.rand(3, 4, 4, dtype=torch.float64, generator=g).requires_grad_(True)
    results["biometric"] = _fd_relative_error(
        lambda: biometric_term(embedder, gen, truth), gen)

    c0 = torch.randn(3, 8, dtype=torch.float64, generator=g)
    c_hat = torch.randn(3, 8, dtype=torch.float64, generator=g).requires_grad_(True)
    results["contrastive"] = _fd_relative_error(lambda: nt_xent(c_hat, c0, 0.5), c_hat)

    worst = max(results.values())
    _finish(start, 30.0, worst < 1e-3,
            f"worst relative gradient error per term: {results}")


def _sweep_rates(genuine, impostor, threshold):
    fmr = sum(1 for s in impostor if s >= threshold) / len(impostor)
    fnmr = sum(1 for s in genuine if s < threshold) / len(genuine)
    return fmr, fnmr


def _sweep_fnmr_at_fmr(genuine, impostor, target):
    observed = sorted(set(genuine) | set(impostor))
    span = observed[-1] - observed[0]
    eps = max(1e-6, 1e-6 * span)
    candidates = [observed[0] - eps] + observed + [observed[-1] + eps]
    for t in candidates:
        fmr, fnmr = _sweep_rates(genuine, impostor, t)
        if fmr <= target:
            return fnmr
    return 1.0


def test_05_det_curve_matches_threshold_sweep():
    start = time.perf_counter()
    rng = np.random.default_rng(3)
    exact = True
    for _ in range(100):
        n_g = int(rng.integers(1, 501))
        n_i = int(rng.integers(1, 501))
        genuine = list(np.round(rng.normal(0.5, 0.3, n_g), 2))
        impostor = list(np.round(rng.normal(0.0, 0.3, n_i), 2))
        curve = compute_det(ScoreSet(genuine=tuple(genuine), impostor=tuple(impostor)))
        for p in curve.points:
            fmr, fnmr = _sweep_rates(genuine, impostor, p.threshold)
            exact &= (p.fmr == fmr and p.fnmr == fnmr)
        for target in (0.0, 0.001, 0.01, 0.1, 0.5):
            exact &= (fnmr_at_fmr(curve, target)
                      == _sweep_fnmr_at_fmr(genuine, impostor, target))
    hand = compute_det(ScoreSet(genuine=(0.9, 0.6, 0.4), impostor=(0.5, 0.3, 0.2, 0.1)))
    hand_ok = (fnmr_at_fmr(hand, 0.0) == 1 / 3 and fnmr_at_fmr(hand, 0.25) == 0.0)
    _finish(start, 10.0, exact and hand_ok,
            f"sweep equality: {exact}, hand case: {hand_ok}")


def test_06_mode_freeze_conformance(toy_manifest):
    start = time.perf_counter()
    details = {}
    for mode in ("baseline", "contrastive", "biometric"):
        model = LatentDiffusionModel(seed=0, **TOY_SCHEDULE)
        before = {name: model.segment_bytes(name)
                  for name in ("vae_encoder", "vae_decoder", "text_embedder")}
        config = TrainConfig(mode=mode, token="sks", learning_rate=TOY_LR,
                             steps=50, batch_size=4, seed=0)
        fine_tune(model, toy_manifest, model.schedule(), config)
        changed = {name: model.segment_bytes(name) != data
                   for name, data in before.items()}
        if mode == "biometric":
            details[mode] = changed["vae_encoder"] and not changed["text_embedder"]
        else:
            details[mode] = not any(changed.values())
    _finish(start, 120.0, all(details.values()), f"freeze conformance: {details}")


def test_07_fine_tune_convergence_all_modes(train_cache):
    start = time.perf_counter()
    ratios = {}
    for mode in ("baseline", "contrastive", "biometric"):
        record = train_cache.run(mode, seed=0)
        totals = [b.total for b in record.history]
        ratios[mode] = float(np.mean(totals[-50:]) / np.mean(totals[:50]))
    _finish(start, 600.0, all(r < 0.5 for r in ratios.values()),
            f"last-50/first-50 loss ratios: {ratios}")


def test_08_prompt_and_gate_conformance():
    start = time.perf_counter()
    expected = [
        "photo of a sks person as child",
        "photo of a sks person as teenager",
        "photo of a sks person as youngadults",
        "photo of a sks person as middleaged",
        "photo of a sks person as elderly",
        "photo of a sks person as old",
    ]
    rendered = [render_prompt(PromptSpec(token="sks", age_group=g)) for g in AGE_GROUPS]
    prompts_ok = rendered == expected

    scores = [0.2, 0.45, 0.6, 0.3, 0.44, 0.5, 0.1, 0.41]
    images = []
    for s in scores:
        img = torch.full((3, 4, 4), 0.5)
        img._score = s
        images.append(img)
    cfg = QualityGateConfig(threshold=0.4, n_generate=8, max_keep=4,
                            scorer=lambda img: img._score)
    kept = [img._score for img in quality_gate(images, cfg)]
    gate_ok = kept == [0.6, 0.5, 0.45, 0.44]
    _finish(start, 1.0, prompts_ok and gate_ok,
            f"prompts ok: {prompts_ok}, gate kept {kept}")


def test_09_matcher_fine_tuning_reduces_cross_age_fnmr():
    start = time.perf_counter()
    mod_ages = [8.0, 22.0, 34.0, 57.0, 75.0]
    all_ages = [8.0, 22.0, 34.0, 45.0, 57.0, 75.0]

    def ori(sid, n=3):
        return [(sid, face_image(sid, 45.0, v)) for v in range(n)]

    def mod(sid):
        return [(sid, face_image(sid, a, 10 + i)) for i, a in enumerate(mod_ages)]

    pre_train = []
    for i in range(12):
        sid = f"p{i}"
        pre_train += [(sid, face_image(sid, all_ages[i % 6], v)) for v in range(4)]
    tune = []
    for i in range(8):
        sid = f"d{i}"
        tune += ori(sid, 2) + mod(sid)
    eval_ori, eval_mod = [], []
    for i in range(5):
        eval_ori += ori(f"e{i}")
        eval_mod += mod(f"e{i}")
    holdout = [f"e{i}" for i in range(5)]

    outcomes = {}
    for seed in (0, 1, 2):
        base = create_embedder(role="eval", seed=seed)
        matcher = fine_tune_embedder(base, pre_train, epochs=15, seed=seed)
        before = fnmr_at_fmr(
            compute_det(score_cross_pairs(matcher, eval_ori, eval_mod)), 0.01)
        tuned = fine_tune_embedder(matcher, tune, epochs=15, seed=seed,
                                   holdout_subject_ids=holdout)
        after = fnmr_at_fmr(
            compute_det(score_cross_pairs(tuned, eval_ori, eval_mod)), 0.01)
        outcomes[seed] = (before, after)
    ok = all(after <= before for before, after in outcomes.values())
    _finish(start, 900.0, ok, f"FNMR@FMR=1% before/after per seed: {outcomes}")


def test_10_generated_images_widen_age_dispersion(train_cache, toy_images):
    start = time.perf_counter()
    labeled = [(group_index(parse_caption(c)), img) for c, img in toy_images["reg"]]
    outcomes = {}
    for seed in (0, 1, 2):
        record = train_cache.run("baseline", seed=seed)
        predictor = train_age_predictor(labeled, seed=seed)
        train_disp = age_dispersion(
            [predictor.predict(img) for img in toy_images["training"]])
        generated = generate_aged(record.model, "sks", list(AGE_GROUPS),
                                  QualityGateConfig(), np.random.default_rng(seed),
                                  inference_steps=50)
        kept = [img for imgs in generated.values() for img in imgs]
        gen_disp = age_dispersion([predictor.predict(img) for img in kept])
        outcomes[seed] = (train_disp, gen_disp)
    ok = all(gen > train for train, gen in outcomes.values())
    _finish(start, 900.0, ok, f"dispersion train/generated per seed: {outcomes}")


def test_11_report_compares_modes_side_by_side(train_cache, toy_images, tmp_path):
    start = time.perf_counter()
    from agedit.cli import main

    # Originals: the fine-tuned subject plus a second identity for impostors.
    ori_dir = tmp_path / "ori"
    (ori_dir / "subj0").mkdir(parents=True)
    for i, img in enumerate(toy_images["training"][:3]):
        save_image(img, ori_dir / "subj0" / f"{i}.png")
    (ori_dir / "other").mkdir()
    for i in range(3):
        save_image(face_image("other", 45.0, i), ori_dir / "other" / f"{i}.png")

    mod_dirs = {}
    for mode in ("biometric", "contrastive"):
        record = train_cache.run(mode, seed=0)
        mod_dir = tmp_path / f"mod_{mode}"
        (mod_dir / "subj0").mkdir(parents=True)
        generated = generate_aged(record.model, "sks", list(AGE_GROUPS),
                                  QualityGateConfig(threshold=0.0, n_generate=2,
                                                    max_keep=2),
                                  np.random.default_rng(0), inference_steps=10)
        i = 0
        for imgs in generated.values():
            for img in imgs:
                save_image(img, mod_dir / "subj0" / f"{i}.png")
                i += 1
        (mod_dir / "other").mkdir()
        for j, age in enumerate([8.0, 75.0]):
            save_image(face_image("other", age, 20 + j), mod_dir / "other" / f"{j}.png")
        mod_dirs[mode] = mod_dir

    payloads = []
    for attempt in range(2):
        out_dir = tmp_path / f"report{attempt}"
        rc = main(["report", "--ori", str(ori_dir),
                   "--mod", f"biometric={mod_dirs['biometric']}",
                   "--mod", f"contrastive={mod_dirs['contrastive']}",
                   "--fmr", "0.01", "--fmr", "0.1", "--out", str(out_dir)])
        assert rc == 0
        payloads.append((out_dir / "report.json").read_text())

    report = json.loads(payloads[0])
    shape_ok = set(report["runs"]) == {"biometric", "contrastive"}
    for run in report["runs"].values():
        shape_ok &= set(run["conditions"]) == {
            "ori-ori", "mod-mod", "ori-mod-pre", "ori-mod-post"}
        for entry in run["conditions"].values():
            shape_ok &= set(entry["fnmr_at"]) == {"0.01", "0.1"}
    reproducible = payloads[0] == payloads[1]
    _finish(start, 300.0, shape_ok and reproducible,
            f"report shape ok: {shape_ok}, byte-identical rerun: {reproducible}")
