"""Command-line surface: gen-data, train, eval, plot.

Every command is deterministic given its flags and writes a manifest
(JSON, no timestamps) next to its outputs, so a rerun with the same
manifest reproduces the outputs byte for byte.

Exit codes: 0 success, 2 usage error, 3 data or file-format error,
4 numerical abort during training.
"""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .core import (
    DataValidationError,
    DenseGrid,
    DivergenceError,
    FormatError,
    ImageRecord,
    export_pgm,
    export_ppm,
    load_annotations,
    load_grid,
    store_annotations,
    store_grid,
)
from .decoder import DecodeConfig, count_from_density, decode, search_threshold, write_detections
from .losses import LossConfig
from .metrics import evaluate
from .micronet import (
    MicroNet,
    TrainConfig,
    load_checkpoint,
    save_checkpoint,
    train,
    write_loss_curve,
)
from .supervision import SupervisionConfig, make_density, make_heatmap
from .synthcrowd import SceneConfig, generate_split
from .core import Rng

_SPLITS = ("train", "val", "test")


# --- shared helpers --------------------------------------------------------

def _positive_int(text: str) -> int:
    v = int(text)
    if v <= 0:
        raise argparse.ArgumentTypeError(f"must be positive, got {v}")
    return v


def _nonneg_int(text: str) -> int:
    v = int(text)
    if v < 0:
        raise argparse.ArgumentTypeError(f"must be non-negative, got {v}")
    return v


def _write_manifest(out_dir: Path, command: str, config: dict,
                    inputs: list, outputs: list) -> None:
    config = {k: (str(v) if isinstance(v, Path) else v) for k, v in config.items()}
    canonical = json.dumps(config, sort_keys=True)
    manifest = {
        "command": command,
        "config": config,
        "config_digest": hashlib.sha256(canonical.encode("utf-8")).hexdigest(),
        "inputs": sorted(str(p) for p in inputs),
        "outputs": sorted(str(p) for p in outputs),
        "version": __version__,
    }
    path = out_dir / f"manifest-{command}.json"
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, sort_keys=True, indent=2)
        fh.write("\n")


def _config_dict(args: argparse.Namespace) -> dict:
    skip = {"func", "command"}
    return {k: v for k, v in sorted(vars(args).items()) if k not in skip}


def _load_split(data_dir: Path, split: str) -> list[ImageRecord]:
    ann_path = data_dir / f"{split}.json"
    if not ann_path.exists():
        raise FormatError(f"{ann_path}: missing annotation file")
    records = load_annotations(ann_path)
    out = []
    for rec in records:
        grid_path = data_dir / "grids" / f"{rec.id}.dpg"
        if not grid_path.exists():
            raise FormatError(f"{grid_path}: missing pixel grid for image {rec.id!r}")
        out.append(dataclasses.replace(rec, pixels=load_grid(grid_path)))
    return out


def _predict(net: MicroNet, records) -> list[tuple[DenseGrid, DenseGrid, ImageRecord]]:
    out = []
    for rec in records:
        heat, dens = net.forward(rec.pixels)
        out.append((heat, dens, rec))
    return out


# --- commands --------------------------------------------------------------

def cmd_gen_data(args: argparse.Namespace) -> int:
    cfg = SceneConfig(
        image_size=args.size,
        count_range=(args.count_min, args.count_max),
        radius_range=(args.radius_min, args.radius_max),
        min_separation=args.min_separation,
        noise_std=args.noise_std,
        seed=args.seed,
    )
    splits = generate_split(cfg, args.train, args.val, args.test)
    out_dir = Path(args.out)
    (out_dir / "grids").mkdir(parents=True, exist_ok=True)
    outputs = []
    total = 0
    for name, records in zip(_SPLITS, splits):
        ann_path = out_dir / f"{name}.json"
        store_annotations(records, ann_path)
        outputs.append(ann_path)
        for rec in records:
            grid_path = out_dir / "grids" / f"{rec.id}.dpg"
            store_grid(rec.pixels, grid_path)
            outputs.append(grid_path)
        total += len(records)
    _write_manifest(out_dir, "gen-data", _config_dict(args), [], outputs)
    print(f"wrote {total} scenes to {out_dir}")
    return 0


def cmd_train(args: argparse.Namespace) -> int:
    data_dir = Path(args.data)
    dataset = _load_split(data_dir, "train")
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)

    init_rng, seed_rng = Rng(args.seed).split(2)
    net = MicroNet()
    net.init_params(init_rng)
    train_cfg = TrainConfig(
        epochs=args.epochs, batch=args.batch, lr=args.lr,
        crop=args.crop, flip_prob=args.flip_prob,
        seed=int(seed_rng.integers(0, 2**63)),
    )
    loss_cfg = LossConfig(
        gamma=args.gamma, delta=args.delta,
        lambda1=args.lambda1, lambda2=args.lambda2,
    )
    sup_cfg = SupervisionConfig(sigma_c=args.sigma_c)
    curve = train(net, dataset, train_cfg, loss_cfg, sup_cfg)

    ckpt_path = out_dir / "model.dpw"
    curve_path = out_dir / "loss_curve.csv"
    save_checkpoint(net, ckpt_path)
    write_loss_curve(curve, curve_path)
    _write_manifest(out_dir, "train", _config_dict(args),
                    [data_dir / "train.json"], [ckpt_path, curve_path])
    if curve:
        print(f"trained {args.epochs} epochs; final mean loss {curve[-1][3]:.6f}")
    else:
        print("trained 0 epochs; checkpoint equals initialization")
    print(f"checkpoint: {ckpt_path}")
    return 0


def cmd_eval(args: argparse.Namespace) -> int:
    data_dir = Path(args.data)
    net = MicroNet()
    load_checkpoint(net, args.checkpoint)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)

    decode_cfg = DecodeConfig(
        threshold=args.tau_lo, search_lo=args.tau_lo,
        search_hi=args.tau_hi, search_step=args.tau_step,
    )
    val = _predict(net, _load_split(data_dir, "val"))
    tau = search_threshold([(heat, rec) for heat, _, rec in val], decode_cfg)

    test = _predict(net, _load_split(data_dir, "test"))
    chosen = DecodeConfig(threshold=tau, search_lo=args.tau_lo,
                          search_hi=args.tau_hi, search_step=args.tau_step)
    samples = []
    det_rows = []
    for heat, dens, rec in test:
        dets = decode(heat, chosen)
        samples.append((dets, count_from_density(dens), rec))
        det_rows.append((rec.id, dets))
    report = evaluate(samples, tau)

    report_path = out_dir / "eval_report.json"
    det_path = out_dir / "detections.jsonl"
    with open(report_path, "w", encoding="utf-8") as fh:
        fh.write(report.to_json())
    write_detections(det_rows, det_path)
    _write_manifest(out_dir, "eval", _config_dict(args),
                    [Path(args.checkpoint), data_dir / "val.json", data_dir / "test.json"],
                    [report_path, det_path])
    sys.stdout.write(report.to_json() if args.json else report.format_table())
    return 0


def _gray_to_rgb(grid: DenseGrid) -> np.ndarray:
    g = np.floor(np.clip(grid.values, 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)
    return np.stack([g, g, g], axis=-1)


def _draw_ring(rgb: np.ndarray, cx: float, cy: float, radius: float,
               color=(255, 40, 40)) -> None:
    h, w = rgb.shape[:2]
    ys = np.arange(h)[:, None]
    xs = np.arange(w)[None, :]
    d = np.sqrt((ys - cy) ** 2 + (xs - cx) ** 2)
    rgb[np.abs(d - radius) <= 0.6] = color


def cmd_plot(args: argparse.Namespace) -> int:
    data_dir = Path(args.data)
    records = _load_split(data_dir, args.split)
    if args.id is None:
        rec = records[0]
    else:
        by_id = {r.id: r for r in records}
        if args.id not in by_id:
            raise DataValidationError(
                f"image {args.id!r} not in split {args.split!r}"
            )
        rec = by_id[args.id]
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)

    if args.checkpoint is not None:
        net = MicroNet()
        load_checkpoint(net, args.checkpoint)
        heat, dens = net.forward(rec.pixels)
        marks = [(d.x, d.y) for d in decode(heat, DecodeConfig(threshold=args.tau))]
        inputs = [Path(args.checkpoint)]
    else:
        sup_cfg = SupervisionConfig(sigma_c=args.sigma_c)
        heat, dens = make_heatmap(rec, sup_cfg), make_density(rec, sup_cfg)
        marks = [(p.x, p.y) for p in rec.points]
        inputs = [data_dir / f"{args.split}.json"]

    heat_path = out_dir / f"{rec.id}_heatmap.pgm"
    dens_path = out_dir / f"{rec.id}_density.pgm"
    over_path = out_dir / f"{rec.id}_overlay.ppm"
    export_pgm(heat, heat_path)
    export_pgm(dens, dens_path, normalize=True)
    rgb = _gray_to_rgb(rec.pixels)
    for x, y in marks:
        _draw_ring(rgb, x, y, radius=3.0)
    export_ppm(rgb, over_path)
    _write_manifest(out_dir, "plot", _config_dict(args), inputs,
                    [heat_path, dens_path, over_path])
    print(f"wrote {heat_path}, {dens_path}, {over_path}")
    return 0


# --- parser ----------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="crowdpoint",
        description="Crowd localization and counting toolkit (synthetic, CPU-scale).",
    )
    parser.add_argument("--version", action="version", version=f"crowdpoint {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a synthetic dataset")
    p.add_argument("--out", required=True, help="output dataset directory")
    p.add_argument("--train", type=_nonneg_int, default=200)
    p.add_argument("--val", type=_nonneg_int, default=50)
    p.add_argument("--test", type=_nonneg_int, default=50)
    p.add_argument("--seed", type=_nonneg_int, default=7)
    p.add_argument("--size", type=_positive_int, default=128)
    p.add_argument("--count-min", type=_positive_int, default=5)
    p.add_argument("--count-max", type=_positive_int, default=15)
    p.add_argument("--radius-min", type=float, default=2.0)
    p.add_argument("--radius-max", type=float, default=6.0)
    p.add_argument("--min-separation", type=float, default=6.0)
    p.add_argument("--noise-std", type=float, default=0.05)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train the model on a dataset directory")
    p.add_argument("--data", required=True, help="dataset directory from gen-data")
    p.add_argument("--out", required=True, help="output directory for checkpoint and curve")
    p.add_argument("--epochs", type=_nonneg_int, default=16)
    p.add_argument("--batch", type=_positive_int, default=2)
    p.add_argument("--lr", type=float, default=1e-4)
    p.add_argument("--gamma", type=float, default=2.0)
    p.add_argument("--delta", type=float, default=4.0)
    p.add_argument("--lambda1", type=float, default=1.0)
    p.add_argument("--lambda2", type=float, default=1000.0)
    p.add_argument("--sigma-c", type=float, default=3.0)
    p.add_argument("--crop", type=_positive_int, default=64)
    p.add_argument("--flip-prob", type=float, default=0.5)
    p.add_argument("--seed", type=_nonneg_int, default=0)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="search tau on val, score the test split")
    p.add_argument("--data", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--tau-lo", type=float, default=0.3)
    p.add_argument("--tau-hi", type=float, default=0.5)
    p.add_argument("--tau-step", type=float, default=0.01)
    p.add_argument("--json", action="store_true", help="print the report as JSON")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("plot", help="export heatmap/density/overlay images")
    p.add_argument("--data", required=True)
    p.add_argument("--split", choices=_SPLITS, default="test")
    p.add_argument("--id", default=None, help="image id (default: first in split)")
    p.add_argument("--out", required=True)
    p.add_argument("--checkpoint", default=None,
                   help="render model predictions (default: supervision targets)")
    p.add_argument("--tau", type=float, default=0.4)
    p.add_argument("--sigma-c", type=float, default=3.0)
    p.set_defaults(func=cmd_plot)

    return parser


def run(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return args.func(args)
    except (FormatError, DataValidationError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    except DivergenceError as exc:
        print(f"numerical abort: {exc}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(run())
