"""Command-line entry point: ``onestep-sr <command> ...``.

Exit codes: 0 success, 1 validation failure, 2 bad arguments or a missing
prerequisite (dataset, checkpoint).
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from importlib.metadata import PackageNotFoundError, version
from pathlib import Path

import numpy as np
import torch
import yaml

from .config import TrainConfig, load_config
from .degradation import DegradationRecipe, read_dataset, save_png, write_dataset
from .metrics import MetricsReport, evaluate, evaluate_baseline
from .nets.checkpoint import (load_autoencoder, load_student, load_velocity, module_checksum, read_manifest,
                              save_autoencoder, save_student, save_velocity)

log = logging.getLogger("onestep_sr")

EXIT_OK, EXIT_INVALID, EXIT_USAGE = 0, 1, 2


class Prerequisite(Exception):
    """A required input (dataset or checkpoint) is absent or unreadable."""


def tool_version() -> str:
    try:
        return version("artifact")
    except PackageNotFoundError:
        return "0+unknown"


def _require(path: str | Path, what: str) -> Path:
    path = Path(path)
    if not (path / "manifest.json").exists():
        raise Prerequisite(f"{what} not found at {path} (no manifest.json)")
    return path


def _dataset(root: str, split: str):
    root = _require(root, "dataset")
    if split not in read_manifest(root).get("splits", {}):
        raise Prerequisite(f"dataset {root} has no '{split}' split")
    return read_dataset(root, split)


def _config(args) -> TrainConfig:
    overrides = {k: getattr(args, a) for a, k in CONFIG_FLAGS.items() if hasattr(args, a)}
    return load_config(args.config, **overrides)


def _run_info(config: TrainConfig | None = None, inputs: dict[str, Path] | None = None) -> dict:
    info = {"tool_version": tool_version()}
    if config is not None:
        info["resolved_config"] = config.to_dict()
        info["seed"] = config.seed
    if inputs:
        info["inputs"] = {name: _checkpoint_hash(p) for name, p in inputs.items()}
    return info


def _checkpoint_hash(path: Path) -> dict:
    m = read_manifest(path)
    return {"path": str(path), "groups": {g: e["sha256"] for g, e in m.get("groups", {}).items()}}


# -- make-data ---------------------------------------------------------------

def cmd_make_data(args) -> int:
    recipe = DegradationRecipe()
    if args.recipe:
        recipe = DegradationRecipe.from_dict(yaml.safe_load(Path(args.recipe).read_text()) or {})
    manifest = write_dataset(args.out, args.n, args.size, args.seed, recipe, n_val=args.n_val)
    print(f"wrote {args.n} train / {args.n_val} val pairs to {args.out} "
          f"(detail score {manifest['splits']['train']['detail_score']:.1f})")
    return EXIT_OK


# -- train -------------------------------------------------------------------

def cmd_train_vae(args) -> int:
    from .trainer import train_autoencoder

    config = _config(args)
    train = _dataset(args.data, "train")
    val = read_dataset(args.data, "val") if "val" in read_manifest(args.data)["splits"] else None
    ae, info = train_autoencoder(config, train.hq, val.hq if val else None)
    save_autoencoder(args.out, ae, summary=info, **_run_info(config))
    print(f"autoencoder: round-trip PSNR-Y {info['roundtrip_psnr_y']:.2f} dB "
          f"({'ok' if info['converged'] else 'below threshold'}) -> {args.out}")
    return EXIT_OK


def cmd_train_teacher(args) -> int:
    from .metrics import frechet_feature_distance
    from .nets import tensor_to_images
    from .trainer import encode_images, sample_latents, schedule_from, train_teacher, validation_velocity_loss

    config = _config(args)
    train = _dataset(args.data, "train")
    ae, _ = load_autoencoder(_require(args.vae, "autoencoder checkpoint"))
    sched = schedule_from(config)
    net, info = train_teacher(config, encode_images(ae, train.hq), train.labels, sched)
    held = read_dataset(args.data, "val") if "val" in read_manifest(args.data)["splits"] else train
    info["val_velocity_loss"] = validation_velocity_loss(net, encode_images(ae, held.hq), held.labels, sched)
    n = min(len(held), 64)
    cond = torch.as_tensor(held.labels[:n], dtype=torch.long)
    z = sample_latents(net, cond, (ae.latent_channels, *[s // ae.reduction for s in held.hq[0].shape[:2]]),
                       sched, steps=20, w_cfg=1.0, seed=config.seed)
    with torch.no_grad():
        samples = tensor_to_images(ae.decode(z))
    if n > 2 * ae.latent_channels:
        info["sample_ffd"] = frechet_feature_distance(samples, held.hq[:n], ae.encoder)
    save_velocity(args.out, net, summary=info, **_run_info(config, {"vae": Path(args.vae)}))
    print(f"teacher: val velocity loss {info['val_velocity_loss']:.4f} -> {args.out}")
    return EXIT_OK


def cmd_train_distill(args) -> int:
    from .trainer import distill

    config = _config(args)
    train = _dataset(args.data, "train")
    vae_dir = _require(args.vae, "autoencoder checkpoint")
    teacher_dir = _require(args.teacher, "teacher checkpoint")
    ae, _ = load_autoencoder(vae_dir)
    teacher, _ = load_velocity(teacher_dir)
    for p in teacher.parameters():
        p.requires_grad_(False)
    before = {"teacher": module_checksum(teacher), "decoder": module_checksum(ae.decoder)}
    state = distill(config, train, teacher, ae, out_dir=args.out)
    after = {"teacher": module_checksum(teacher), "decoder": module_checksum(ae.decoder)}
    save_student(args.out, state.student, state.lora, step=state.step, frozen_before=before, frozen_after=after,
                 **_run_info(config, {"vae": vae_dir, "teacher": teacher_dir}))
    if before != after:
        print("error: frozen teacher/decoder weights changed during distillation", file=sys.stderr)
        return EXIT_INVALID
    print(f"student: {state.step} steps, log at {Path(args.out) / 'train_log.csv'}")
    return EXIT_OK


# -- eval --------------------------------------------------------------------

def _load_stack(args):
    ae, _ = load_autoencoder(_require(args.vae, "autoencoder checkpoint"))
    teacher, _ = load_velocity(_require(args.teacher, "teacher checkpoint"))
    return ae, teacher


def _nearest_up(img: np.ndarray, h: int, w: int) -> np.ndarray:
    return np.repeat(np.repeat(img, h // img.shape[0], axis=0), w // img.shape[1], axis=1)


def write_grid(path: Path, lq, outputs, hq, rows: int = 8) -> None:
    """Stack LQ (nearest-upscaled) | output | HQ triplets, one row per image."""
    lines = []
    for lo, out, hi in list(zip(lq, outputs, hq))[:rows]:
        h, w = hi.shape[:2]
        lines.append(np.concatenate([_nearest_up(lo, h, w), np.clip(out, 0, 1), hi], axis=1))
    save_png(np.concatenate(lines, axis=0), path)


def cmd_eval(args) -> int:
    data = _dataset(args.data, args.split)
    ae, teacher = _load_stack(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    def run(ckpt: str, tag: str) -> MetricsReport:
        student, _, _ = load_student(_require(ckpt, "student checkpoint"), ae, teacher)
        images: list = []
        report = evaluate(student, data, ae, outputs=images)
        report.write_csv(out / f"report_{tag}.csv")
        write_grid(out / f"grid_{tag}.png", data.lq, images, data.hq, args.grid_rows)
        return report

    reports = {"a": run(args.student, "a")}
    if args.compare:
        reports["b"] = run(args.compare, "b")
        write_deltas(out / "compare.csv", reports["a"], reports["b"])
    if args.baseline:
        base = evaluate_baseline(data, ae, upscale=DegradationRecipe.from_dict(
            read_manifest(args.data)["recipe"]).downscale_factor)
        base.write_csv(out / "report_bilinear.csv")
        reports["bilinear"] = base

    inputs = {"vae": Path(args.vae), "teacher": Path(args.teacher), "student": Path(args.student)}
    if args.compare:
        inputs["compare"] = Path(args.compare)
    manifest = {**_run_info(None, inputs), "data": str(args.data), "split": args.split,
                "aggregates": {k: r.aggregates() for k, r in reports.items()}}
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2))
    for tag, r in reports.items():
        a = r.aggregates()
        print(f"{tag}: psnr_y {a['mean_psnr_y']:.3f}  ssim_y {a['mean_ssim_y']:.4f}  "
              f"perceptual {a['mean_perceptual']:.5f}  ffd {a.get('ffd', float('nan')):.5f}")
    evals = {r["denoiser_evals"] for key in ("a", "b") if key in reports for r in reports[key].rows}
    if evals != {1}:
        print(f"error: expected exactly one denoiser evaluation per image, saw {sorted(evals)}", file=sys.stderr)
        return EXIT_INVALID
    return EXIT_OK


def write_deltas(path: Path, a: MetricsReport, b: MetricsReport) -> dict:
    """Per-image (b - a) differences plus their means in the footer."""
    keys = ("psnr_y", "ssim_y", "perceptual")
    rows = []
    for ra, rb in zip(a.rows, b.rows):
        if ra["id"] != rb["id"]:
            raise ValueError("reports are not paired by id")
        rows.append({"id": ra["id"], **{f"delta_{k}": rb[k] - ra[k] for k in keys}})
    means = {f"mean_delta_{k}": float(np.mean([r[f"delta_{k}"] for r in rows])) for k in keys}
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=["id"] + [f"delta_{k}" for k in keys])
        writer.writeheader()
        writer.writerows(rows)
        for k, v in means.items():
            fh.write(f"# {k}={v!r}\n")
    return means


# -- gradcheck ----------------------------------------------------------------

def cmd_gradcheck(args) -> int:
    from .gradcheck import CHECKS, run_checks

    only = [name.replace("-", "_") for name in args.only] if args.only else None
    if only and any(n not in CHECKS for n in only):
        print(f"error: --only takes names from {', '.join(n.replace('_', '-') for n in CHECKS)}", file=sys.stderr)
        return EXIT_USAGE
    results = run_checks(only, torch.float32 if args.float32 else torch.float64)
    for r in results:
        print(r.line())
    failed = [r.name for r in results if not r.passed]
    print(f"{len(results) - len(failed)}/{len(results)} oracles passed")
    return EXIT_INVALID if failed else EXIT_OK


# -- parser ------------------------------------------------------------------

# argparse dest -> TrainConfig key (dotted keys reach nested sections)
CONFIG_FLAGS = {
    "seed": "seed", "steps": "distill_steps", "ae_steps": "ae_steps", "teacher_steps": "teacher_steps",
    "batch_size": "batch_size", "lr_student": "lr_student", "lr_lora": "lr_lora",
    "gamma2": "weights.gamma2", "lam": "weights.lam", "cfg_weight": "weights.w_cfg",
    "w_of_t": "weights.w_of_t", "dasm_n": "dasm.N", "dasm_s": "dasm.s",
}


def _add_config_flags(p: argparse.ArgumentParser, distill: bool = False) -> None:
    p.add_argument("--config", help="YAML file layered over the built-in defaults")
    p.add_argument("--seed", type=int)
    if not distill:
        return
    p.add_argument("--steps", type=int, help="distillation steps")
    p.add_argument("--batch-size", type=int)
    p.add_argument("--lr-student", type=float)
    p.add_argument("--lr-lora", type=float)
    p.add_argument("--gamma2", type=float, help="weight of the score-distillation term (0 disables it)")
    p.add_argument("--lam", type=float, help="TSM/VSD blend, 0 = pure TSM, 1 = pure VSD")
    p.add_argument("--cfg-weight", type=float, help="classifier-free guidance weight (default 7.5)")
    p.add_argument("--w-of-t", choices=("constant", "sigma_sq", "snr"))
    p.add_argument("--dasm-n", type=int, help="trajectory nodes per step (default 4, 0 disables)")
    p.add_argument("--dasm-s", type=int, help="trajectory stride in timesteps (default 50)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="onestep-sr", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("make-data", help="synthesize paired HQ/LQ images")
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--n-val", type=int, default=0)
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--recipe", help="YAML degradation recipe")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_make_data)

    train = sub.add_parser("train", help="train one stage").add_subparsers(dest="stage", required=True)
    p = train.add_parser("vae", help="pretrain the latent autoencoder")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--ae-steps", type=int)
    _add_config_flags(p)
    p.set_defaults(func=cmd_train_vae)

    p = train.add_parser("teacher", help="pretrain the flow-matching teacher")
    p.add_argument("--data", required=True)
    p.add_argument("--vae", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--teacher-steps", type=int)
    _add_config_flags(p)
    p.set_defaults(func=cmd_train_teacher)

    p = train.add_parser("distill", help="distill the one-step student")
    p.add_argument("--data", required=True)
    p.add_argument("--vae", required=True)
    p.add_argument("--teacher", required=True)
    p.add_argument("--out", required=True)
    _add_config_flags(p, distill=True)
    p.set_defaults(func=cmd_train_distill)

    p = sub.add_parser("eval", help="score a student checkpoint")
    p.add_argument("--data", required=True)
    p.add_argument("--split", default="val")
    p.add_argument("--vae", required=True)
    p.add_argument("--teacher", required=True)
    p.add_argument("--student", required=True)
    p.add_argument("--compare", help="second student checkpoint; writes paired deltas (compare - student)")
    p.add_argument("--baseline", action="store_true", help="also score bilinear upsampling")
    p.add_argument("--grid-rows", type=int, default=8)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gradcheck", help="run the gradient and identity oracles")
    p.add_argument("--only", nargs="+", metavar="NAME")
    p.add_argument("--float32", action="store_true", help="float32 networks, tolerance 1e-2")
    p.set_defaults(func=cmd_gradcheck)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except Prerequisite as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (ValueError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
