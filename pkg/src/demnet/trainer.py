"""Training loop, evaluation and single-tile prediction."""

from __future__ import annotations

import csv
import logging
import time
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Callable

import numpy as np

from . import metrics
from .checkpoint import Checkpoint, config_digest, load_checkpoint, save_checkpoint
from .data import (TEST, TRAIN, DEMImage, NormalizationStats, SampleSet, SLCImage, WindowSpec, abs_phase,
                   load_split, normalize_input, read_manifest, window_channels)
from .model import (INFER, TRAIN as TRAIN_MODE, Architecture, ModelParams, backward, build_demnet, forward,
                    init_params, l2_grad, l2_penalty)
from .optimizer import BETA1, BETA2, EPSILON, LEARNING_RATE, AdamState, adam_step

log = logging.getLogger(__name__)

METRICS_COLUMNS = ["epoch", "train_loss", "train_rmse", "test_rmse", "wall_time"]


class TrainingError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    manifest: str | None = None
    out_dir: str = "runs/train"
    batch_size: int = 128
    epochs: int = 500
    lr: float = LEARNING_RATE
    beta1: float = BETA1
    beta2: float = BETA2
    eps: float = EPSILON
    l2: float = 0.01
    shuffle_seed: int = 0
    init_seed: int = 0
    checkpoint_every: int = 50
    # samples per forward/backward chunk; bounds memory, not the update size
    micro_batch: int = 16
    eval_every: int = 1
    dtype: str = "float32"
    resume: str | None = None

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.micro_batch < 1:
            raise ValueError("micro_batch must be >= 1")
        if self.dtype not in ("float32", "float64"):
            raise ValueError(f"dtype must be float32 or float64, got {self.dtype!r}")

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**d)

    def trajectory_key(self, arch_args: dict) -> dict:
        """Everything that shapes the loss trajectory; hashed into checkpoints."""
        d = asdict(self)
        for k in ("manifest", "out_dir", "epochs", "checkpoint_every", "eval_every", "resume", "micro_batch"):
            d.pop(k)
        d["arch"] = arch_args
        return d


@dataclass
class EpochLog:
    epoch: int
    train_loss: float
    train_rmse: float
    test_rmse: float
    wall_time: float


def epoch_order(n: int, shuffle_seed: int, epoch: int) -> np.ndarray:
    """Sample order for a 1-based epoch; a pure function so resumed runs match."""
    return np.random.default_rng([shuffle_seed, epoch]).permutation(n)


def predict_batch(params, inputs: np.ndarray, arch: Architecture, chunk: int = 16) -> np.ndarray:
    outs = [forward(params, inputs[i : i + chunk], arch, INFER)[0] for i in range(0, len(inputs), chunk)]
    return np.concatenate(outs)


def _batch_step(params: dict, state: AdamState, x: np.ndarray, y: np.ndarray, arch: Architecture,
                cfg: TrainConfig, where: str):
    total = y.size
    grads = None
    sse = 0.0
    for i in range(0, len(x), cfg.micro_batch):
        xb, yb = x[i : i + cfg.micro_batch], y[i : i + cfg.micro_batch]
        pred, cache = forward(params, xb, arch, TRAIN_MODE)
        diff = pred - yb
        sse += float(np.sum(np.square(diff, dtype=np.float64)))
        if not np.isfinite(sse):
            raise TrainingError(f"non-finite loss at {where} (network output is not finite)")
        g = backward(params, cache, (2.0 / total) * diff, arch, l2=0.0)
        del cache
        if grads is None:
            grads = g
        else:
            for k in grads:
                grads[k] += g[k]
    for k, v in l2_grad(params, cfg.l2).items():
        grads[k] += v
    mse = sse / total
    loss = mse + l2_penalty(params, cfg.l2)
    if not np.isfinite(loss):
        raise TrainingError(f"non-finite loss at {where}")
    try:
        params, state = adam_step(params, grads, state)
    except FloatingPointError as exc:
        raise TrainingError(f"{exc} at {where}") from exc
    return params, state, loss, sse


def fit(params: ModelParams, train: SampleSet, cfg: TrainConfig, arch: Architecture, test: SampleSet | None = None,
        state: AdamState | None = None, start_epoch: int = 0,
        on_epoch: Callable[[EpochLog, dict, AdamState], bool | None] | None = None) -> tuple[dict, AdamState, list[EpochLog]]:
    """Train in memory from ``start_epoch`` (epochs already done) to ``cfg.epochs``.

    ``on_epoch(log, params, state)`` runs after every epoch; a truthy return
    value ends training early. Returns ``(param arrays, adam state, logs)``.
    """
    dtype = np.dtype(cfg.dtype)
    p = {k: v.astype(dtype) for k, v in params.arrays.items()}
    if state is None:
        state = AdamState.fresh(p, lr=cfg.lr, beta1=cfg.beta1, beta2=cfg.beta2, eps=cfg.eps)
    x_all = train.inputs.astype(dtype, copy=False)
    y_all = train.targets.astype(dtype, copy=False)
    n = len(train)
    history = []
    t0 = time.perf_counter()
    for epoch in range(start_epoch + 1, cfg.epochs + 1):
        order = epoch_order(n, cfg.shuffle_seed, epoch)
        losses, sse = [], 0.0
        for b, start in enumerate(range(0, n, cfg.batch_size)):
            idx = order[start : start + cfg.batch_size]
            p, state, loss, batch_sse = _batch_step(p, state, x_all[idx], y_all[idx], arch, cfg,
                                                    f"epoch {epoch}, batch {b}")
            losses.append(loss)
            sse += batch_sse
        train_rmse = float(np.sqrt(sse / y_all.size))
        test_rmse = float("nan")
        if test is not None and len(test) and (epoch % cfg.eval_every == 0 or epoch == cfg.epochs):
            preds = predict_batch(p, test.inputs.astype(dtype, copy=False), arch, cfg.micro_batch)
            test_rmse = float(metrics.per_image_rmse(preds, test.targets).mean())
        entry = EpochLog(epoch, float(np.mean(losses)), train_rmse, test_rmse, time.perf_counter() - t0)
        history.append(entry)
        log.info("epoch %d loss %.6g train_rmse %.4f test_rmse %.4f", epoch, entry.train_loss, train_rmse, test_rmse)
        if on_epoch is not None and on_epoch(entry, p, state):
            break
    return p, state, history


def _append_metrics(path: Path, entry: EpochLog) -> None:
    new = not path.exists()
    with open(path, "a", newline="") as fh:
        w = csv.writer(fh)
        if new:
            w.writerow(METRICS_COLUMNS)
        w.writerow([entry.epoch, repr(entry.train_loss), repr(entry.train_rmse), repr(entry.test_rmse),
                    f"{entry.wall_time:.3f}"])


def train(cfg: TrainConfig, arch_args: dict | None = None) -> tuple[Checkpoint, list[EpochLog]]:
    """Train from a dataset manifest, writing checkpoints and ``metrics.csv`` to ``cfg.out_dir``."""
    if cfg.manifest is None:
        raise ValueError("train config needs a manifest path")
    manifest = read_manifest(cfg.manifest)
    arch_args = dict(arch_args or {"input_size": manifest.window.target})
    arch = build_demnet(**arch_args)
    train_set = load_split(manifest, TRAIN, dtype=np.dtype(cfg.dtype))
    test_set = None
    if manifest.ids(TEST):
        test_set = load_split(manifest, TEST, dtype=np.dtype(cfg.dtype))
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    digest = config_digest(cfg.trajectory_key(arch_args))
    start_epoch, state = 0, None
    if cfg.resume:
        ckpt = load_checkpoint(cfg.resume)
        if ckpt.config_digest != digest:
            raise TrainingError(f"{cfg.resume} was produced by a different configuration (digest mismatch)")
        params, state, start_epoch = ckpt.params, ckpt.optimizer_state, ckpt.epoch
    else:
        params = init_params(arch, cfg.init_seed, np.dtype(cfg.dtype))
    metrics_path = out / "metrics.csv"
    config_record = asdict(cfg)

    def make_ckpt(p, st, epoch):
        return Checkpoint(ModelParams(p, params.init_seed, params.init_scheme), st, manifest.stats, digest, epoch,
                          arch_args, config_record)

    def on_epoch(entry, p, st):
        _append_metrics(metrics_path, entry)
        if entry.epoch % cfg.checkpoint_every == 0 or entry.epoch == cfg.epochs:
            ckpt = make_ckpt(p, st, entry.epoch)
            save_checkpoint(ckpt, out / f"checkpoint_{entry.epoch:04d}.demn")
            save_checkpoint(ckpt, out / "checkpoint_last.demn")

    p, state, history = fit(params, train_set, cfg, arch, test_set, state, start_epoch, on_epoch)
    return make_ckpt(p, state, cfg.epochs), history


def evaluate_checkpoint(ckpt: Checkpoint, samples: SampleSet, n_bins: int = 100) -> metrics.EvalReport:
    if len(samples) == 0:
        raise ValueError("cannot evaluate an empty split")
    arch = ckpt.architecture()
    preds = predict_batch(ckpt.params, samples.inputs.astype(_param_dtype(ckpt)), arch)
    return metrics.evaluate_predictions(preds, samples.targets, n_bins, samples.ids)


def _param_dtype(ckpt: Checkpoint):
    return next(iter(ckpt.params.arrays.values())).dtype


def evaluate(checkpoint, manifest_path, split: str = TEST, out_dir=None, n_bins: int = 100) -> metrics.EvalReport:
    """Per-image RMSE and elevation-binned error of a checkpoint on one manifest split."""
    ckpt = checkpoint if isinstance(checkpoint, Checkpoint) else load_checkpoint(checkpoint)
    manifest = read_manifest(manifest_path)
    if not manifest.ids(split):
        raise ValueError(f"split {split!r} of {manifest_path} is empty")
    stats = ckpt.norm_stats or manifest.stats
    samples = load_split(manifest, split, stats)
    report = evaluate_checkpoint(ckpt, samples, n_bins)
    if out_dir is not None:
        metrics.write_report_csv(report, out_dir)
    return report


@dataclass
class LatencyReport:
    """Wall-clock time of the network forward pass on one sample.

    ``forward_ms`` is the median over ``repeats`` timed calls after one
    warm-up call; preprocessing (amplitude/phase, resampling, normalization)
    is timed once and reported separately.
    """

    forward_ms: float
    preprocess_ms: float
    repeats: int

    @property
    def throughput_hz(self) -> float:
        return 1000.0 / self.forward_ms if self.forward_ms > 0 else float("inf")


def prepare_input(slc: SLCImage, stats: NormalizationStats, target: int) -> np.ndarray:
    n, m = slc.shape
    if n != m:
        raise ValueError(f"prediction expects a square SLC window, got {slc.shape}")
    amp, phase = abs_phase(slc)
    log_amp, ph, _ = window_channels(amp, phase, np.zeros((n, m)), 0, 0, WindowSpec(window=n, step=1, target=target))
    return normalize_input(log_amp, ph, stats)


def predict(checkpoint, slc: SLCImage, repeats: int = 5) -> tuple[DEMImage, LatencyReport]:
    ckpt = checkpoint if isinstance(checkpoint, Checkpoint) else load_checkpoint(checkpoint)
    if ckpt.norm_stats is None:
        raise ValueError("checkpoint carries no normalization statistics; cannot preprocess the SLC tile")
    arch = ckpt.architecture()
    t0 = time.perf_counter()
    x = prepare_input(slc, ckpt.norm_stats, arch.input_shape[0]).astype(_param_dtype(ckpt))
    pre_ms = (time.perf_counter() - t0) * 1e3
    dem, _ = forward(ckpt.params, x, arch, INFER)
    timings = []
    for _ in range(max(1, repeats)):
        t0 = time.perf_counter()
        forward(ckpt.params, x, arch, INFER)
        timings.append((time.perf_counter() - t0) * 1e3)
    return DEMImage(dem[..., 0].astype(np.float64)), LatencyReport(float(np.median(timings)), pre_ms, len(timings))
