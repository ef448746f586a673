"""Command-line surface tying the pipeline together.

Exit codes: 0 success, 1 validation error, 2 runtime/divergence error.
Every artifact-producing command validates its inputs before writing, writes
through temp files, and drops a reproducibility record (seed, config hash,
output hashes) next to its outputs.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import biometrics, evaluation, sampler, trainer
from .agepredict import train_age_predictor
from .data import load_image, load_manifest, scan_directories
from .errors import AgeditError, DivergenceError
from .losses import MODES, LossWeights
from .model import build_vocabulary, LatentDiffusionModel, load_checkpoint, save_checkpoint
from .prompts import AGE_GROUPS, AgeGroup, group_index, parse_caption
from .trainer import TrainConfig, fine_tune, write_loss_history


def _sha256(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _atomic_write_text(path: Path, text: str) -> None:
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_text(text)
    os.replace(tmp, path)


def _args_dict(args) -> dict:
    return {k: v for k, v in vars(args).items() if k != "func"}


def _write_run_record(out_dir: Path, seed: int, config: dict, artifacts: dict) -> None:
    config_hash = hashlib.sha256(
        json.dumps(config, sort_keys=True).encode()
    ).hexdigest()
    record = {
        "seed": seed,
        "config": config,
        "config_hash": config_hash,
        "artifact_hashes": {name: _sha256(p) for name, p in artifacts.items()},
    }
    _atomic_write_text(out_dir / "run.json", json.dumps(record, indent=2, sort_keys=True))


def _load_subject_dir_images(root, resolution=None) -> list:
    """subjects/<id>/*.png -> [(subject_id, image_id, tensor)]."""
    root = Path(root)
    items = []
    for subject_dir in sorted(p for p in root.iterdir() if p.is_dir()):
        for img_path in sorted(subject_dir.glob("*.png")):
            items.append((subject_dir.name, img_path.name, load_image(img_path, resolution)))
    if not items:
        raise AgeditError(f"no subjects/<id>/*.png images under {root}")
    return items


# ---- subcommand implementations ---------------------------------------------


def cmd_prepare_data(args) -> int:
    raw = scan_directories(args.subjects_dir, args.reg_dir, args.subject)
    for caption in raw.pop("empty_groups"):
        print(f"warning: regularization group {caption!r} has no images; "
              f"the model cannot learn that age word", file=sys.stderr)
    out = Path(args.out)
    _atomic_write_text(out, json.dumps(raw, indent=2))
    load_manifest(out)  # round-trip validation
    print(f"wrote manifest with {len(raw['training']['images'])} training images "
          f"and {len(raw['regularization'])} regularization pairs to {out}")
    return 0


def _train_config_from_args(args) -> TrainConfig:
    file_cfg = {}
    if args.config:
        file_cfg = json.loads(Path(args.config).read_text())
    weights_cfg = file_cfg.pop("weights", {})
    merged = dict(file_cfg)
    for name, value in (("mode", args.mode), ("token", args.token),
                        ("steps", args.steps), ("batch_size", args.batch_size),
                        ("learning_rate", args.learning_rate), ("seed", args.seed),
                        ("resolution", args.resolution)):
        if value is not None:
            merged[name] = value
    return TrainConfig(weights=LossWeights(**weights_cfg), **merged)


def cmd_train(args) -> int:
    config = _train_config_from_args(args)
    manifest = load_manifest(args.manifest)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)

    model = LatentDiffusionModel(
        vocabulary=build_vocabulary(extra_words=(config.token,)),
        seed=config.seed,
        schedule_T=args.timesteps,
        schedule_family=args.schedule,
    )
    if args.pretrain_steps > 0:
        from .data import manifest_base_dir

        base = manifest_base_dir(manifest)
        images = [load_image(base / p, config.resolution)
                  for p in manifest.training.image_paths]
        images += [load_image(base / p.path, config.resolution)
                   for p in manifest.regularization]
        trainer.pretrain_vae(model, images, steps=args.pretrain_steps, seed=config.seed)
    record = fine_tune(model, manifest, model.schedule(), config)

    ckpt_path = out_dir / "model.ckpt"
    tmp = ckpt_path.with_suffix(".ckpt.tmp")
    save_checkpoint(record.model, tmp)
    os.replace(tmp, ckpt_path)
    loss_path = out_dir / "loss_history.csv"
    write_loss_history(record.history, loss_path)
    _write_run_record(out_dir, config.seed,
                      {"train": config.__dict__ | {"weights": config.weights.__dict__},
                       "timesteps": args.timesteps, "schedule": args.schedule,
                       "pretrain_steps": args.pretrain_steps},
                      {"model.ckpt": ckpt_path, "loss_history.csv": loss_path})
    print(f"trained {config.steps} steps in {record.duration_seconds:.1f}s; "
          f"final total loss {record.history[-1].total:.4f}")
    return 0


def cmd_generate(args) -> int:
    model = load_checkpoint(args.model)
    model.tokenize(args.token)  # validate before any writes
    if args.age_group == ["all"]:
        groups = list(AGE_GROUPS)
    else:
        groups = [parse_caption(g) for g in args.age_group]
    cfg = sampler.QualityGateConfig(threshold=args.threshold, n_generate=args.n,
                                    max_keep=args.max_keep)
    rng = np.random.default_rng(args.seed)
    out_dir = Path(args.out)
    retained = sampler.write_generation_outputs(
        model, args.token, groups, cfg, rng, out_dir,
        inference_steps=args.inference_steps, resolution=args.resolution)
    _write_run_record(out_dir / args.token, args.seed,
                      {"generate": _args_dict(args) | {"age_group": [g.value for g in groups]}},
                      {"scores.csv": out_dir / args.token / "scores.csv"})
    for group, imgs in retained.items():
        print(f"{group.value}: kept {len(imgs)}/{args.n}")
    return 0


def cmd_eval_match(args) -> int:
    h = biometrics.load_embedder(args.matcher) if args.matcher else \
        biometrics.create_embedder(role="eval", seed=args.seed)
    gallery = _load_subject_dir_images(args.gallery)
    probes = _load_subject_dir_images(args.probes)
    rows = biometrics.cross_pair_rows(h, gallery, probes)
    out = Path(args.scores_out)
    tmp = out.with_suffix(out.suffix + ".tmp")
    biometrics.write_scores_csv(rows, tmp)
    os.replace(tmp, out)
    print(f"wrote {len(rows)} pair scores to {out}")
    return 0


def _read_score_set(path) -> evaluation.ScoreSet:
    genuine, impostor = [], []
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            (genuine if row["pair_type"] == "genuine" else impostor).append(float(row["score"]))
    return evaluation.ScoreSet(genuine=tuple(genuine), impostor=tuple(impostor))


def cmd_det(args) -> int:
    sset = _read_score_set(args.scores)
    curve = evaluation.compute_det(sset)
    if args.det_out:
        evaluation.write_det_csv(curve, args.det_out)
    for target in args.fmr:
        print(f"FNMR@FMR={target:g}: {evaluation.fnmr_at_fmr(curve, target):.6f}")
    return 0


def cmd_finetune_matcher(args) -> int:
    h = biometrics.load_embedder(args.matcher) if args.matcher else \
        biometrics.create_embedder(role="eval", seed=args.seed)
    labeled = _load_subject_dir_images(args.generated, resolution=h.resolution)
    tuned = biometrics.fine_tune_embedder(
        h, labeled, epochs=args.epochs, seed=args.seed,
        holdout_subject_ids=args.holdout)
    out = Path(args.out)
    tmp = out.with_suffix(out.suffix + ".tmp")
    biometrics.save_embedder(tuned, tmp)
    os.replace(tmp, out)
    print(f"fine-tuned matcher on {len(labeled)} images over {args.epochs} epochs -> {out}")
    return 0


def cmd_dispersion(args) -> int:
    manifest = load_manifest(args.predictor)
    from .data import manifest_base_dir

    base = manifest_base_dir(manifest)
    labeled = [
        (group_index(parse_caption(p.caption)), load_image(base / p.path, 32))
        for p in manifest.regularization
    ]
    predictor = train_age_predictor(labeled, seed=args.seed)
    images = sorted(Path(args.images).rglob("*.png"))
    if not images:
        raise AgeditError(f"no PNG images under {args.images}")
    predictions = [predictor.predict(load_image(p, 32)) for p in images]
    print(f"age dispersion over {len(images)} images: "
          f"{evaluation.age_dispersion(predictions):.4f}")
    return 0


def cmd_report(args) -> int:
    eval_h = biometrics.load_embedder(args.matcher) if args.matcher else \
        biometrics.create_embedder(role="eval", seed=args.seed)
    tuned_h = biometrics.load_embedder(args.finetuned) if args.finetuned else eval_h
    ori = [(sid, img) for sid, _, img in _load_subject_dir_images(args.ori)]

    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    combined = {"fmr_targets": list(args.fmr), "runs": {}}
    curves = {}
    for spec in args.mod:
        label, _, path = spec.partition("=")
        if not path:
            label, path = "mod", label
        mod = [(sid, img) for sid, _, img in _load_subject_dir_images(path)]
        report = evaluation.compare_experiments(ori, mod, eval_h, tuned_h,
                                                fmr_targets=tuple(args.fmr))
        combined["runs"][label] = json.loads(report.to_json())
        curves[f"{label}:ori-mod-pre"] = evaluation.compute_det(
            biometrics.score_cross_pairs(eval_h, ori, mod))
        curves[f"{label}:ori-mod-post"] = evaluation.compute_det(
            biometrics.score_cross_pairs(tuned_h, ori, mod))

    report_path = out_dir / "report.json"
    _atomic_write_text(report_path, json.dumps(combined, indent=2, sort_keys=True))
    plot_path = out_dir / "det.png"
    evaluation.plot_det(curves, plot_path)
    _write_run_record(out_dir, args.seed, {"report": _args_dict(args)},
                      {"report.json": report_path, "det.png": plot_path})
    print(f"wrote {report_path} and {plot_path}")
    return 0


# ---- argument parsing ---------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="agedit",
        description="Identity-preserving facial age editing and biometric evaluation",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("prepare-data", help="build a manifest from directories")
    p.add_argument("--subjects-dir", required=True)
    p.add_argument("--reg-dir", required=True)
    p.add_argument("--subject", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_prepare_data)

    p = sub.add_parser("train", help="fine-tune a model on one subject")
    p.add_argument("--manifest", required=True)
    p.add_argument("--mode", choices=MODES)
    p.add_argument("--token")
    p.add_argument("--config", help="JSON config mirroring TrainConfig/LossWeights fields")
    p.add_argument("--out", required=True)
    p.add_argument("--steps", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--learning-rate", type=float)
    p.add_argument("--seed", type=int)
    p.add_argument("--resolution", type=int)
    p.add_argument("--timesteps", type=int, default=1000)
    p.add_argument("--schedule", choices=("cosine", "linear"), default="cosine")
    p.add_argument("--pretrain-steps", type=int, default=300,
                   help="VAE autoencoding warm-up steps before fine-tuning (0 to skip)")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("generate", help="sample age-edited images from a checkpoint")
    p.add_argument("--model", required=True)
    p.add_argument("--token", required=True)
    p.add_argument("--age-group", action="append", default=None,
                   help="age group word, repeatable, or 'all'")
    p.add_argument("--n", type=int, default=8)
    p.add_argument("--max-keep", type=int, default=4)
    p.add_argument("--threshold", type=float, default=0.4)
    p.add_argument("--inference-steps", type=int, default=50)
    p.add_argument("--resolution", type=int, default=32)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("eval-match", help="score gallery-vs-probe pairs")
    p.add_argument("--gallery", required=True)
    p.add_argument("--probes", required=True)
    p.add_argument("--scores-out", required=True)
    p.add_argument("--matcher", help="embedder archive; default fresh eval embedder")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_eval_match)

    p = sub.add_parser("det", help="FNMR at FMR operating points from a scores CSV")
    p.add_argument("--scores", required=True)
    p.add_argument("--fmr", type=float, action="append", required=True)
    p.add_argument("--det-out", help="optional DET curve CSV")
    p.set_defaults(func=cmd_det)

    p = sub.add_parser("finetune-matcher", help="fine-tune the eval matcher on generated images")
    p.add_argument("--matcher", help="embedder archive; default fresh eval embedder")
    p.add_argument("--generated", required=True, help="subjects/<id>/*.png directory")
    p.add_argument("--out", required=True)
    p.add_argument("--epochs", type=int, default=20)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--holdout", action="append", default=[],
                   help="held-out evaluation subject id, repeatable")
    p.set_defaults(func=cmd_finetune_matcher)

    p = sub.add_parser("dispersion", help="age dispersion of predicted groups")
    p.add_argument("--images", required=True)
    p.add_argument("--predictor", required=True,
                   help="manifest whose regularization set trains the default predictor")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_dispersion)

    p = sub.add_parser("report", help="four-condition matching report plus DET plot")
    p.add_argument("--ori", required=True, help="subjects/<id>/*.png directory")
    p.add_argument("--mod", action="append", required=True,
                   help="label=dir of modified images; repeatable for side-by-side runs")
    p.add_argument("--matcher")
    p.add_argument("--finetuned")
    p.add_argument("--fmr", type=float, action="append", default=None)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_report)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 1 if exc.code not in (0, None) else 0
    if getattr(args, "age_group", "x") is None:
        args.age_group = ["all"]
    if getattr(args, "fmr", "x") is None:
        args.fmr = [1e-4, 1e-3]
    try:
        return args.func(args)
    except DivergenceError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except AgeditError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
