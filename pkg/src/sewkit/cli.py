"""Command-line entry point.

Subcommands: gen, validate, render, train, eval, infer, gradcheck.
Exit codes: 0 success, 1 validation/metric/check failure, 2 usage error.
Outputs are written atomically (temp file + rename). SEWKIT_SEED, when
set, overrides config seeds for smoke testing.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import losses as L
from .checkpoint import load_checkpoint
from .datagen import DatasetConfig, build_dataset, load_raster
from .model import ModelConfig, forward_batch, init_params, lift_params, patchify, predict
from .pattern import (
    PatternError,
    parse_pattern,
    serialize_pattern,
    to_tensor,
    validate,
)
from .geometry import render_svg
from .trainer import TrainConfig, eval_checkpoint, train


def _atomic_write(path: str, data: bytes) -> None:
    p = Path(path)
    if p.parent != Path(""):
        p.parent.mkdir(parents=True, exist_ok=True)
    tmp = p.with_name(p.name + ".tmp")
    tmp.write_bytes(data)
    os.replace(tmp, p)


def _seed_override(seed: int) -> int:
    env = os.environ.get("SEWKIT_SEED")
    return int(env) if env else seed


def _cmd_gen(args) -> int:
    cfg_dict = json.loads(Path(args.config).read_text())
    cfg = DatasetConfig.from_dict(cfg_dict)
    cfg.seed = _seed_override(cfg.seed)
    manifest = build_dataset(cfg, args.out)
    print(
        f"dataset '{cfg.name}': {len(manifest.train_ids)} train / "
        f"{len(manifest.test_ids)} test at {Path(args.out) / cfg.name}"
    )
    return 0


def _cmd_validate(args) -> int:
    failed = False
    for path in args.files:
        try:
            pattern = parse_pattern(Path(path).read_bytes())
        except PatternError as exc:
            print(f"{path}: REJECTED {exc}")
            failed = True
            continue
        report = validate(pattern)
        if args.pretty:
            status = "ok" if report.passed else "FAIL"
            print(f"{path}: {status}")
            for pr in report.panels:
                print(
                    f"  panel class {pr.class_id}: edges {pr.n_valid_edges}/{pr.n_edges} "
                    f"loop {pr.loop_residual:.3g} quat {pr.quat_norm_error:.3g} "
                    f"{'ok' if pr.ok else 'FAIL'}"
                )
            for err in report.stitch_errors:
                print(f"  {err}")
        else:
            print(json.dumps({"file": str(path), **report.to_dict()}))
        if not report.passed:
            failed = True
    return 1 if failed else 0


def _cmd_render(args) -> int:
    pattern = parse_pattern(Path(args.file).read_bytes())
    _atomic_write(args.svg, render_svg(pattern).encode("utf-8"))
    print(f"wrote {args.svg}")
    return 0


def _cmd_train(args) -> int:
    cfg = TrainConfig.from_dict(json.loads(Path(args.config).read_text()))
    cfg.seed = _seed_override(cfg.seed)
    result = train(cfg)
    print(f"trained {result.steps} steps -> {result.final_checkpoint}")
    return 0


def _cmd_eval(args) -> int:
    report = eval_checkpoint(args.ckpt, args.dataset, args.split)
    payload = report.to_dict(config={"split": args.split, "ckpt": args.ckpt})
    _atomic_write(args.report, (json.dumps(payload, indent=2) + "\n").encode("utf-8"))
    if args.pretty:
        for k, v in payload.items():
            if k != "config":
                print(f"{k:>16}: {v}")
    else:
        print(json.dumps(payload))
    return 0


def _cmd_infer(args) -> int:
    params, meta = load_checkpoint(args.ckpt)
    if not meta or "model" not in meta:
        print("checkpoint carries no model config", file=sys.stderr)
        return 1
    cfg = ModelConfig.from_dict(meta["model"])
    raster = load_raster(args.raster)
    pattern = predict(params, cfg, raster, eps_edge=args.eps_edge)
    _atomic_write(args.out, serialize_pattern(pattern))
    print(f"wrote {args.out} ({len(pattern.panels)} panels, {len(pattern.stitches)} stitches)")
    return 0


def _gradcheck_primitives(seeds, verbose=True) -> float:
    """Max relative error over the primitive suite."""
    worst = 0.0
    cases = []
    for seed in seeds:
        rng = np.random.default_rng(seed)
        a = rng.normal(size=(3, 4))
        b = rng.normal(size=(3, 4))
        w = rng.normal(size=(4, 5))
        cases = [
            ("add", lambda x, y: ad.sum_(x + y), [a, b]),
            ("sub", lambda x, y: ad.sum_((x - y) * (x - y)), [a, b]),
            ("mul", lambda x, y: ad.sum_(x * y), [a, b]),
            ("mul_broadcast", lambda x, y: ad.sum_(x * y), [a, rng.normal(size=(4,))]),
            ("matmul", lambda x, y: ad.sum_(ad.matmul(x, y)), [a, w]),
            ("matmul_batched", lambda x, y: ad.sum_(ad.matmul(x, y)),
             [rng.normal(size=(2, 3, 4)), rng.normal(size=(2, 4, 3))]),
            ("transpose", lambda x: ad.sum_(ad.transpose(x, (1, 0)) * ad.transpose(x, (1, 0))), [a]),
            ("reshape", lambda x: ad.sum_(x.reshape(12) * x.reshape(12)), [a]),
            ("concat", lambda x, y: ad.sum_(ad.concat([x, y], axis=0) * 1.5), [a, b]),
            ("slice", lambda x: ad.sum_(x[1:, 2:] * x[1:, 2:]), [a]),
            ("gather", lambda x: ad.sum_(ad.gather(x, [2, 0, 2], axis=0)), [a]),
            ("sum_axis", lambda x: ad.sum_(ad.sum_(x, axis=0) * ad.sum_(x, axis=0)), [a]),
            ("mean", lambda x: ad.mean(x * x), [a]),
            ("sqrt", lambda x: ad.sum_(ad.sqrt(x)), [np.abs(a) + 0.5]),
            ("exp", lambda x: ad.sum_(ad.exp(x)), [a * 0.3]),
            ("log", lambda x: ad.sum_(ad.log(x)), [np.abs(a) + 0.5]),
            ("relu", lambda x: ad.sum_(ad.relu(x)), [a + np.sign(a) * 0.05]),
            ("gelu", lambda x: ad.sum_(ad.gelu(x)), [a]),
            ("softmax", lambda x: ad.sum_(ad.softmax(x) * ad.softmax(x)), [a]),
            ("layernorm", lambda x, g, bb: ad.mean(ad.layernorm(x, g, bb) * ad.layernorm(x, g, bb)),
             [a, rng.normal(size=(4,)) + 1.0, rng.normal(size=(4,))]),
            ("l2_normalize", lambda x: ad.sum_(ad.l2_normalize(x) * (x * 0 + 1.0)), [a + 0.1]),
        ]
        for name, fn, xs in cases:
            report = ad.grad_check(fn, xs, step=1e-6)
            worst = max(worst, report.max_err)
            if verbose and report.max_err > 1e-5:
                print(f"  primitive {name} seed {seed}: max rel err {report.max_err:.2e}")
    return worst


def toy_gradcheck_setup():
    """A tiny model plus one real sample, shared by gradcheck paths."""
    from .datagen import LoadedSplit, sample_pattern, sample_pose
    from .geometry import RenderConfig, render_raster
    from .trainer import TrainConfig, build_sample_meta, make_batch_gt

    cfg = ModelConfig(
        d_model=16, heads=2, enc_layers=1, panel_dec_layers=1, edge_dec_layers=1,
        num_classes=6, e_max=4, patch=8, in_channels=6, height=16, width=16,
        d_tag=4, mlp_ratio=2, pose_dim=8,
    )
    pattern = sample_pattern("skirt2", 7)
    gt = to_tensor(pattern, cfg.e_max, cfg.num_classes)
    theta = sample_pose(3).theta
    raster = render_raster(
        pattern, theta.astype(np.float64),
        RenderConfig(num_classes=cfg.num_classes, height=16, width=16),
    )
    data = LoadedSplit(
        ids=[0],
        rasters=raster.channels[None],
        thetas=theta[None],
        patterns=[pattern],
        tensors=[gt],
        manifest=None,
    )
    tc = TrainConfig(model=cfg)
    meta = build_sample_meta(pattern, gt, cfg.e_max)
    bgt = make_batch_gt(np.array([0]), data, [meta], tc.stitch, cfg.pose_dim, rng=None)
    return cfg, tc, bgt, patchify(raster.channels, cfg)


def _gradcheck_composite(n_sample: int) -> float:
    """Finite-difference check of the full loss through a tiny model."""
    from .trainer import compute_batch_loss

    cfg, tc, bgt, patches = toy_gradcheck_setup()
    params = init_params(cfg, 0, dtype=np.float64)
    names = list(params.keys())

    def f(*tensors):
        p = dict(zip(names, tensors))
        out = forward_batch(p, cfg, patches)
        total, _, _ = compute_batch_loss(out, bgt, tc)
        return total

    report = ad.grad_check(f, [params[n] for n in names], step=1e-4,
                           n_sample=n_sample, seed=0)
    return report.max_err


def _cmd_gradcheck(args) -> int:
    seeds = range(10) if args.full else range(3)
    print("checking primitives...")
    worst_prim = _gradcheck_primitives(list(seeds))
    print(f"primitive max rel err: {worst_prim:.3e}")
    n_sample = 6 if args.full else 2
    print("checking composite loss through the model...")
    worst_comp = _gradcheck_composite(n_sample)
    print(f"composite max rel err: {worst_comp:.3e}")
    ok = worst_prim < 1e-5 and worst_comp < 1e-3
    print("gradcheck:", "PASS" if ok else "FAIL")
    return 0 if ok else 1


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="sewkit",
        description="Sewing-pattern dataset generation, training, and evaluation.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", help="generate a procedural dataset")
    p.add_argument("--config", required=True, help="dataset config JSON")
    p.add_argument("--out", required=True, help="output root directory")
    p.add_argument("--workers", type=int, default=1,
                   help="accepted for interface parity; generation is per-id deterministic")
    p.set_defaults(fn=_cmd_gen)

    p = sub.add_parser("validate", help="validate pattern files")
    p.add_argument("files", nargs="+")
    p.add_argument("--pretty", action="store_true")
    p.set_defaults(fn=_cmd_validate)

    p = sub.add_parser("render", help="render a pattern file to SVG")
    p.add_argument("file")
    p.add_argument("--svg", required=True)
    p.set_defaults(fn=_cmd_render)

    p = sub.add_parser("train", help="train from a config file")
    p.add_argument("--config", required=True)
    p.set_defaults(fn=_cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a dataset split")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--split", default="test", choices=("train", "test"))
    p.add_argument("--report", required=True)
    p.add_argument("--pretty", action="store_true")
    p.set_defaults(fn=_cmd_eval)

    p = sub.add_parser("infer", help="predict a pattern from a raster file")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--raster", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--eps-edge", type=float, default=1e-2)
    p.set_defaults(fn=_cmd_infer)

    p = sub.add_parser("gradcheck", help="finite-difference gradient checks")
    p.add_argument("--full", action="store_true")
    p.set_defaults(fn=_cmd_gradcheck)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except PatternError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
