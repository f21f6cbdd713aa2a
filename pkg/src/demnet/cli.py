"""Command-line entry point: ``demnet <generate|ingest|train|eval|predict|profile>``.

Options come from built-in defaults, then an optional ``--config`` file (YAML
or JSON mapping of option names), then explicit flags. The resolved options
are logged and written to ``<out>/resolved_config.json``.
"""

from __future__ import annotations

import argparse
import contextlib
import csv
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np
import yaml

log = logging.getLogger("demnet")

THREADS_ENV = "DEMNET_NUM_THREADS"

DEFAULTS = {
    "generate": {
        "out": "data/raw", "pairs": 3, "seed": 0, "size": 4097, "roughness": 4.0,
        "elev_min": 0.0, "elev_max": 3000.0, "look_angle": 35.0, "phase_noise": 0.05,
        "pixel_spacing": 30.0,
    },
    "ingest": {
        "out": "data/samples", "pairs_manifest": None, "slc": None, "dem": None, "seed": 0,
        "window": 4000, "step": 100, "target": 140, "split_fraction": 0.65, "block_split": False,
    },
    "train": {
        "out": "runs/train", "manifest": None, "seed": 0, "init_seed": None, "epochs": 500,
        "batch_size": 128, "lr": 1e-3, "beta1": 0.9, "beta2": 0.999, "eps": 1e-8, "l2": 0.01,
        "checkpoint_every": 50, "micro_batch": 16, "eval_every": 1, "dtype": "float32", "resume": None,
        "channel_scale": 1.0,
    },
    "eval": {"out": "runs/eval", "checkpoint": None, "manifest": None, "split": "test", "bins": 100},
    "predict": {"out": "runs/predict", "checkpoint": None, "slc": None, "preview": False, "repeats": 5},
    "profile": {
        "out": "runs/profile", "checkpoint": None, "manifest": None, "sample": None, "range": [30, 120],
        "split": "test",
    },
}


class CLIError(Exception):
    pass


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="demnet", description="Monocular DEM estimation from SAR SLC images.")
    p.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = p.add_subparsers(dest="command", required=True, metavar="COMMAND")

    def cmd(name, help_text):
        s = sub.add_parser(name, help=help_text, argument_default=None)
        s.add_argument("--config", help="YAML/JSON file of option values")
        s.add_argument("--out", help="output directory")
        return s

    s = cmd("generate", "write synthetic SLC/DEM tile pairs")
    s.add_argument("--pairs", type=int)
    s.add_argument("--seed", type=int)
    s.add_argument("--size", type=int, help="terrain extent in pixels")
    s.add_argument("--roughness", type=float, help="spectral exponent of the terrain")
    s.add_argument("--elev-min", type=float)
    s.add_argument("--elev-max", type=float)
    s.add_argument("--look-angle", type=float, help="degrees off nadir")
    s.add_argument("--phase-noise", type=float, help="half-width of uniform phase noise, radians")
    s.add_argument("--pixel-spacing", type=float, help="ground metres per pixel")

    s = cmd("ingest", "cut raster pairs into samples and write a dataset manifest")
    s.add_argument("--pairs-manifest", help="pairs.jsonl written by 'generate'")
    s.add_argument("--slc", action="append", help="SLC tile (repeatable, paired with --dem)")
    s.add_argument("--dem", action="append", help="DEM tile (repeatable)")
    s.add_argument("--seed", type=int, help="split seed")
    s.add_argument("--window", type=int)
    s.add_argument("--step", type=int)
    s.add_argument("--target", type=int)
    s.add_argument("--split-fraction", type=float)
    s.add_argument("--block-split", action="store_true", default=None, help="spatially disjoint split")

    s = cmd("train", "train the network")
    s.add_argument("--manifest")
    s.add_argument("--seed", type=int, help="shuffle seed (and init seed unless --init-seed)")
    s.add_argument("--init-seed", type=int)
    s.add_argument("--epochs", type=int)
    s.add_argument("--batch-size", type=int)
    s.add_argument("--lr", type=float)
    s.add_argument("--l2", type=float)
    s.add_argument("--checkpoint-every", type=int)
    s.add_argument("--micro-batch", type=int)
    s.add_argument("--eval-every", type=int)
    s.add_argument("--dtype", choices=["float32", "float64"])
    s.add_argument("--resume", help="checkpoint to continue from")
    s.add_argument("--channel-scale", type=float, help="shrink every hidden layer's width (1 = published network)")

    s = cmd("eval", "evaluate a checkpoint on a manifest split")
    s.add_argument("--checkpoint")
    s.add_argument("--manifest")
    s.add_argument("--split", choices=["train", "test"])
    s.add_argument("--bins", type=int)

    s = cmd("predict", "estimate the DEM of one SLC tile")
    s.add_argument("--checkpoint")
    s.add_argument("--slc")
    s.add_argument("--preview", action="store_true", default=None, help="also write an 8-bit PNG")
    s.add_argument("--repeats", type=int)

    s = cmd("profile", "export ground-truth and predicted altitude profiles at fixed range rows")
    s.add_argument("--checkpoint")
    s.add_argument("--manifest")
    s.add_argument("--sample", type=int, help="sample id (default: first sample of --split)")
    s.add_argument("--split", choices=["train", "test"])
    s.add_argument("--range", type=int, action="append", help="range row index (repeatable)")
    return p


def resolve(command: str, args: argparse.Namespace) -> dict:
    cfg = dict(DEFAULTS[command])
    if args.config:
        data = yaml.safe_load(Path(args.config).read_text()) or {}
        if not isinstance(data, dict):
            raise CLIError(f"config file {args.config} must hold a mapping")
        data = {k.replace("-", "_"): v for k, v in data.items()}
        unknown = sorted(set(data) - set(cfg))
        if unknown:
            raise CLIError(f"unknown keys for '{command}' in {args.config}: {', '.join(unknown)}")
        cfg.update(data)
    for key in cfg:
        value = getattr(args, key, None)
        if value is not None:
            cfg[key] = value
    return cfg


def _record(cfg: dict, command: str) -> Path:
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    log.info("resolved %s config: %s", command, json.dumps(cfg, sort_keys=True))
    (out / "resolved_config.json").write_text(json.dumps({"command": command, **cfg}, indent=2, sort_keys=True))
    return out


def _emit(summary: dict) -> None:
    print(json.dumps(summary, sort_keys=True))


def cmd_generate(cfg):
    from .synthetic import TerrainConfig, gen_dataset

    out = _record(cfg, "generate")
    terrain = TerrainConfig(size=cfg["size"], roughness=cfg["roughness"],
                            elevation_range=(cfg["elev_min"], cfg["elev_max"]), seed=cfg["seed"])
    manifest = gen_dataset(cfg["pairs"], terrain, out, look_angle=cfg["look_angle"], phase_noise=cfg["phase_noise"],
                           pixel_spacing=cfg["pixel_spacing"])
    _emit({"command": "generate", "pairs": len(manifest.sources), "manifest": str(out / "pairs.jsonl")})


def cmd_ingest(cfg):
    from .data import WindowSpec, ingest, read_manifest

    out = _record(cfg, "ingest")
    if cfg["pairs_manifest"]:
        pairs = read_manifest(cfg["pairs_manifest"])
        sources = [{"id": s["id"], "slc": s["slc"], "dem": s["dem"]} for s in pairs.sources]
        root = pairs.root
    else:
        slcs, dems = cfg["slc"] or [], cfg["dem"] or []
        if not slcs or len(slcs) != len(dems):
            raise CLIError("ingest needs --pairs-manifest or matching --slc/--dem lists")
        sources = [{"id": Path(s).stem, "slc": s, "dem": d} for s, d in zip(slcs, dems)]
        root = Path(".")
    spec = WindowSpec(cfg["window"], cfg["step"], cfg["target"])
    manifest = ingest(sources, out, spec, cfg["seed"], cfg["split_fraction"], cfg["block_split"], root=root)
    _emit({"command": "ingest", "samples": len(manifest.samples), "train": len(manifest.ids("train")),
           "test": len(manifest.ids("test")), "manifest": str(out / "manifest.jsonl")})


def cmd_train(cfg):
    from .data import read_manifest
    from .trainer import TrainConfig, train

    if not cfg["manifest"]:
        raise CLIError("train needs --manifest")
    out = _record(cfg, "train")
    tc = TrainConfig(
        manifest=cfg["manifest"], out_dir=str(out), batch_size=cfg["batch_size"], epochs=cfg["epochs"],
        lr=cfg["lr"], beta1=cfg["beta1"], beta2=cfg["beta2"], eps=cfg["eps"], l2=cfg["l2"],
        shuffle_seed=cfg["seed"], init_seed=cfg["seed"] if cfg["init_seed"] is None else cfg["init_seed"],
        checkpoint_every=cfg["checkpoint_every"], micro_batch=cfg["micro_batch"], eval_every=cfg["eval_every"],
        dtype=cfg["dtype"], resume=cfg["resume"],
    )
    arch_args = {"input_size": read_manifest(cfg["manifest"]).window.target}
    if cfg["channel_scale"] != 1.0:
        arch_args["channel_scale"] = cfg["channel_scale"]
    ckpt, history = train(tc, arch_args)
    last = history[-1] if history else None
    _emit({"command": "train", "epochs": ckpt.epoch, "checkpoint": str(out / "checkpoint_last.demn"),
           "train_rmse_m": None if last is None else last.train_rmse,
           "test_rmse_m": None if last is None or np.isnan(last.test_rmse) else last.test_rmse})


def cmd_eval(cfg):
    from .trainer import evaluate

    if not cfg["checkpoint"] or not cfg["manifest"]:
        raise CLIError("eval needs --checkpoint and --manifest")
    out = _record(cfg, "eval")
    report = evaluate(cfg["checkpoint"], cfg["manifest"], cfg["split"], out, cfg["bins"])
    _emit({"command": "eval", "split": cfg["split"], "images": len(report.per_image_rmse),
           "mean_rmse_m": report.mean_rmse})


def write_preview(dem: np.ndarray, path) -> None:
    """Min/max-stretched 8-bit grayscale PNG."""
    from PIL import Image

    lo, hi = float(dem.min()), float(dem.max())
    scaled = np.zeros(dem.shape) if hi == lo else (dem - lo) / (hi - lo)
    Image.fromarray(np.round(scaled * 255).astype(np.uint8), mode="L").save(path)


def cmd_predict(cfg):
    from .data import SLCImage, read_tile, write_tile
    from .trainer import predict

    if not cfg["checkpoint"] or not cfg["slc"]:
        raise CLIError("predict needs --checkpoint and --slc")
    out = _record(cfg, "predict")
    slc = SLCImage(read_tile(cfg["slc"]))
    dem, latency = predict(cfg["checkpoint"], slc, cfg["repeats"])
    write_tile(out / "dem.tile", dem.data)
    if cfg["preview"]:
        write_preview(dem.data, out / "dem_preview.png")
    report = {"forward_ms": latency.forward_ms, "preprocess_ms": latency.preprocess_ms,
              "repeats": latency.repeats, "throughput_hz": latency.throughput_hz}
    (out / "latency.json").write_text(json.dumps(report, indent=2))
    _emit({"command": "predict", "dem": str(out / "dem.tile"), **report})


def cmd_profile(cfg):
    from .checkpoint import load_checkpoint
    from .data import load_split, read_manifest
    from .metrics import range_profile
    from .model import INFER, forward

    if not cfg["checkpoint"] or not cfg["manifest"]:
        raise CLIError("profile needs --checkpoint and --manifest")
    out = _record(cfg, "profile")
    ckpt = load_checkpoint(cfg["checkpoint"])
    manifest = read_manifest(cfg["manifest"])
    entry = None
    if cfg["sample"] is not None:
        entry = next((e for e in manifest.samples if e.id == cfg["sample"]), None)
        if entry is None:
            raise CLIError(f"sample {cfg['sample']} not in manifest")
        split = entry.split
    else:
        split = cfg["split"]
    samples = load_split(manifest, split, ckpt.norm_stats or manifest.stats)
    i = 0 if entry is None else samples.ids.index(entry.id)
    params_dtype = next(iter(ckpt.params.arrays.values())).dtype
    pred, _ = forward(ckpt.params, samples.inputs[i].astype(params_dtype), ckpt.architecture(), INFER)
    gt = samples.targets[i]
    ranges = cfg["range"] if isinstance(cfg["range"], list) else [cfg["range"]]
    columns = {}
    for r in ranges:
        columns[f"gt_r{r}"] = range_profile(gt, r)
        columns[f"pred_r{r}"] = range_profile(pred, r)
    path = out / "profile.csv"
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["azimuth", *columns])
        for j in range(gt.shape[1]):
            w.writerow([j, *(repr(float(c[j])) for c in columns.values())])
    _emit({"command": "profile", "sample": samples.ids[i], "ranges": ranges, "rows": gt.shape[1], "csv": str(path)})


COMMANDS = {
    "generate": cmd_generate, "ingest": cmd_ingest, "train": cmd_train,
    "eval": cmd_eval, "predict": cmd_predict, "profile": cmd_profile,
}


def _thread_limit():
    n = os.environ.get(THREADS_ENV)
    if not n:
        return contextlib.nullcontext()
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=int(n))


def main(argv=None) -> int:
    parser = _parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        cfg = resolve(args.command, args)
        with _thread_limit():
            COMMANDS[args.command](cfg)
    except Exception as exc:  # noqa: BLE001 - every failure becomes one parsable line
        log.debug("failure", exc_info=True)
        message = " ".join(str(exc).split())
        print(f"error: {args.command}: {type(exc).__name__}: {message}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
