"""Batch command-line interface.

Angles are degrees on the command line and radians internally.  Every run
prints the resolved seed so it can be replayed.  Exit codes: 0 success,
1 validation error (bad flags, malformed inputs), 2 runtime failure.
"""

from __future__ import annotations

import argparse
import math
import sys
from pathlib import Path

import numpy as np
import torch

from .errors import ValidationError
from .geometry import composite, random_rotation_baseline, sample_crop_spec
from .images import SHAPE_KINDS, DatasetSpec, load_image, save_image, write_dataset
from .images import generate_synthetic
from .model import build_model, gradcheck, load_model
from .patching import layout_to_text, patchify
from .training import (
    TrainConfig,
    batch_to,
    collate,
    config_for_inference,
    fit,
    frozen_loss_closure,
    make_sample,
    parse_train_config,
    reconstruct_panel,
)
from . import transport


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    # argparse exits 2 on usage errors; the contract reserves 2 for runtime
    # failures, so re-route to exit code 1.
    def error(self, message):
        raise _UsageError(message)


def _resolve_seed(seed: int | None) -> int:
    if seed is None:
        seed = int(np.random.SeedSequence().entropy) % (2**32)
    return seed


def _image_files(dir_path: Path) -> list[Path]:
    files = sorted(
        p for p in dir_path.iterdir() if p.suffix.lower() in (".ppm", ".pgm")
    )
    if not files:
        raise ValidationError(f"{dir_path}: no .ppm/.pgm images found")
    return files


def _cmd_synth(args) -> int:
    seed = _resolve_seed(args.seed)
    print(f"seed: {seed}")
    spec = DatasetSpec(
        count=args.count,
        size=args.size,
        channels=args.channels,
        seed=seed,
        shape_kind=args.shape_kind,
    )
    paths = write_dataset(spec, args.out_dir)
    print(f"wrote {len(paths)} images and manifest.txt to {args.out_dir}")
    return 0


def _cmd_compose(args) -> int:
    seed = _resolve_seed(args.seed)
    print(f"seed: {seed}")
    theta_range = (math.radians(args.theta_min), math.radians(args.theta_max))
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    files = _image_files(Path(args.in_dir))
    children = np.random.SeedSequence(seed).spawn(len(files))
    suffix = "baseline" if args.baseline_random_rotation else "composite"
    for path, child in zip(files, children):
        img = load_image(path)
        h, w, _ = img.shape
        rng = np.random.default_rng(child)
        spec = sample_crop_spec(h, w, args.p, args.a, theta_range, rng)
        view = (
            random_rotation_baseline(img, spec)
            if args.baseline_random_rotation
            else composite(img, spec)
        )
        save_image(out_dir / f"{path.stem}_{suffix}.ppm", view)
        (out_dir / f"{path.stem}_{suffix}.txt").write_text(
            f"{spec.row0} {spec.col0} {spec.a} {spec.theta!r}\n"
        )
    print(f"wrote {len(files)} {suffix} images to {out_dir}")
    return 0


def _load_train_config(path: str | None) -> TrainConfig:
    if path is None:
        return TrainConfig()
    return parse_train_config(Path(path).read_text())


def _cmd_pretrain(args) -> int:
    cfg = _load_train_config(args.config)
    print(f"seed: {cfg.seed}")
    result = fit(cfg, args.out_dir)
    if result.reports:
        last = result.reports[-1]
        print(f"final l_rec: {last.l_rec:.6e} (l_mse {last.l_mse:.6e}, l_ot {last.l_ot:.6e})")
    print(f"metrics: {result.metrics_path}")
    print(f"checkpoint: {result.checkpoint_path}")
    return 0


def _prepare_inference(args):
    seed = _resolve_seed(args.seed)
    print(f"seed: {seed}")
    model, config_map = load_model(args.ckpt)
    img = load_image(args.image)
    cfg = config_for_inference(config_map)
    rng = np.random.default_rng(seed)
    return model, img, cfg, rng


def _cmd_reconstruct(args) -> int:
    model, img, cfg, rng = _prepare_inference(args)
    panel, sample = reconstruct_panel(model, img, cfg, rng)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_image(out, panel)
    sidecar = out.with_suffix(".layout.txt")
    sidecar.write_text(
        f"spec: {sample.spec.row0} {sample.spec.col0} {sample.spec.a} "
        f"{sample.spec.theta!r}\n" + layout_to_text(sample.layout)
    )
    print(f"wrote panel {out} and sidecar {sidecar}")
    return 0


def _cmd_plan(args) -> int:
    model, img, cfg, rng = _prepare_inference(args)
    sample = make_sample(img, cfg, rng)
    batch = collate([sample], cfg)
    model.eval()
    with torch.no_grad():
        out_fwd = model(batch.patches_in, batch.visible, batch.angle_flags)
    preds = out_fwd.predictions.squeeze(0).double().numpy()
    crop_idx = sample.layout.crop_indices
    targets = patchify(sample.original, cfg.p)[crop_idx]
    cost = transport.cost_matrix(targets, preds[crop_idx])
    problem = transport.make_problem(
        cost, cfg.epsilon_rel, cfg.sinkhorn_max_iters, cfg.sinkhorn_tol
    )
    solution = transport.sinkhorn_solve(problem)
    value = transport.ot_loss(cost, solution.plan)
    n_r = cost.shape[0]
    heat = np.clip(solution.plan * (n_r * n_r) / 2.0, 0.0, 1.0)[:, :, None]
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_image(out, heat)
    dump = out.with_suffix(".txt")
    dump.write_text(
        "\n".join(" ".join(f"{v:.17g}" for v in row) for row in solution.plan) + "\n"
    )
    print(
        f"transport value: {value:.9e} "
        f"(iterations {solution.iterations}, converged {solution.converged})"
    )
    print(f"wrote heatmap {out} and matrix {dump}")
    return 0


def _cmd_gradcheck(args) -> int:
    cfg = _load_train_config(args.config)
    print(f"seed: {cfg.seed}")
    torch.set_num_threads(1)
    model = build_model(cfg.model_config()).double()
    images = generate_synthetic(
        DatasetSpec(count=2, size=cfg.image_size, channels=cfg.channels,
                    seed=cfg.seed, shape_kind=cfg.synth_shape_kind)
    )
    rng = np.random.default_rng(cfg.seed)
    batch = batch_to(collate([make_sample(im, cfg, rng) for im in images], cfg),
                     torch.float64)
    err = gradcheck(model, frozen_loss_closure(model, batch, cfg),
                    n_samples=args.samples, step=1e-5, seed=cfg.seed)
    print(f"max relative gradient error: {err:.3e} over >= {args.samples} parameters")
    if err > 1e-4:
        print("gradcheck FAILED (threshold 1e-4)", file=sys.stderr)
        return 2
    print("gradcheck passed (threshold 1e-4)")
    return 0


def _cmd_ot_solve(args) -> int:
    print("seed: none")
    try:
        cost = np.loadtxt(args.cost, ndmin=2, dtype=np.float64)
    except ValueError as e:
        raise ValidationError(f"{args.cost}: not a numeric matrix ({e})") from None
    problem = transport.make_problem(cost, args.epsilon_rel, args.max_iters, args.tol)
    solution = transport.sinkhorn_solve(problem)
    for row in solution.plan:
        print(" ".join(f"{v:.12e}" for v in row))
    print(f"value: {transport.ot_loss(cost, solution.plan):.12e}")
    print(
        f"iterations: {solution.iterations} converged: {solution.converged} "
        f"marginal_error: {solution.marginal_error:.3e}"
    )
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(
        prog="anglemae",
        description="Angle-aware masked autoencoding: data, training, diagnostics.",
    )
    subs = parser.add_subparsers(dest="command", required=True, metavar="command")

    def sub(name, func, help_text):
        p = subs.add_parser(
            name,
            help=help_text,
            description=help_text,
            formatter_class=argparse.ArgumentDefaultsHelpFormatter,
        )
        p.set_defaults(func=func)
        return p

    p = sub("synth", _cmd_synth, "Write a deterministic synthetic dataset.")
    p.add_argument("--count", type=int, default=256, help="number of images")
    p.add_argument("--size", type=int, default=96, help="image side in pixels")
    p.add_argument("--channels", type=int, default=3, choices=(1, 3))
    p.add_argument("--seed", type=int, default=None, help="generated if omitted")
    p.add_argument("--out-dir", required=True, help="output directory")
    p.add_argument("--shape-kind", default="oriented_bar", choices=SHAPE_KINDS)

    p = sub("compose", _cmd_compose, "Composite rotated crops into images.")
    p.add_argument("--in", dest="in_dir", required=True, help="directory of .ppm/.pgm inputs")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--a", type=int, default=32, help="crop side in pixels")
    p.add_argument("--p", type=int, default=8, help="patch size the crop aligns to")
    p.add_argument("--theta-min", type=float, default=-45.0, help="degrees")
    p.add_argument("--theta-max", type=float, default=45.0, help="degrees")
    p.add_argument("--seed", type=int, default=None, help="generated if omitted")
    p.add_argument(
        "--baseline-random-rotation",
        action="store_true",
        help="rotate the region in place (zero-padded corners) instead",
    )

    p = sub("pretrain", _cmd_pretrain, "Run the pretraining schedule.")
    p.add_argument("--config", default=None, help="key = value file of TrainConfig fields")
    p.add_argument("--out-dir", required=True, help="metrics and checkpoints go here")

    p = sub("reconstruct", _cmd_reconstruct, "Write a 4-panel reconstruction raster.")
    p.add_argument("--ckpt", required=True, help="checkpoint file")
    p.add_argument("--image", required=True, help="input .ppm/.pgm image")
    p.add_argument("--seed", type=int, default=None, help="generated if omitted")
    p.add_argument("--out", required=True, help="output panel path (.ppm)")

    p = sub("plan", _cmd_plan, "Dump the transport plan for one image as raster + text.")
    p.add_argument("--ckpt", required=True, help="checkpoint file")
    p.add_argument("--image", required=True, help="input .ppm/.pgm image")
    p.add_argument("--seed", type=int, default=None, help="generated if omitted")
    p.add_argument("--out", required=True, help="output heatmap path (.ppm)")

    p = sub("gradcheck", _cmd_gradcheck, "Verify gradients by central differences.")
    p.add_argument("--config", default=None, help="key = value file of TrainConfig fields")
    p.add_argument("--samples", type=int, default=200, help="scalar parameters to probe")

    p = sub("ot-solve", _cmd_ot_solve, "Solve entropic transport for a cost matrix.")
    p.add_argument("--cost", required=True, help="text file, whitespace-separated rows")
    p.add_argument("--epsilon-rel", type=float, default=0.1,
                   help="regularization as a fraction of the mean cost")
    p.add_argument("--max-iters", type=int, default=1000)
    p.add_argument("--tol", type=float, default=1e-6, help="marginal violation target")

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except _UsageError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except SystemExit as e:  # --help and friends
        return int(e.code or 0)
    try:
        return args.func(args)
    except (ValidationError, OSError) as e:
        # bad flags, malformed or missing inputs
        print(f"error: {e}", file=sys.stderr)
        return 1
    except Exception as e:  # noqa: BLE001 -- anything else is a runtime failure
        print(f"failure: {type(e).__name__}: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
