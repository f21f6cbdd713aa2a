"""Raster I/O, SLC preprocessing, sliding-window sampling and dataset manifests."""

from __future__ import annotations

import json
import logging
import math
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterator

import numpy as np

log = logging.getLogger(__name__)

TILE_MAGIC = b"SART"
TILE_VERSION = 1
TILE_HEADER = struct.Struct("<4sIBII")
DTYPE_COMPLEX64 = 1
DTYPE_FLOAT32 = 2
_TILE_DTYPES = {DTYPE_COMPLEX64: np.dtype("<c8"), DTYPE_FLOAT32: np.dtype("<f4")}

MANIFEST_FORMAT = "demnet-manifest"
MANIFEST_VERSION = 1

TRAIN = "train"
TEST = "test"


class FormatError(ValueError):
    """A file does not follow the documented on-disk layout."""


@dataclass
class SLCImage:
    data: np.ndarray

    def __post_init__(self):
        self.data = np.asarray(self.data)
        if self.data.ndim != 2 or not np.iscomplexobj(self.data):
            raise ValueError(f"SLC data must be a 2-D complex matrix, got {self.data.dtype} {self.data.shape}")
        if not np.all(np.isfinite(self.data)):
            raise ValueError("SLC data contains non-finite entries")

    @property
    def shape(self) -> tuple[int, int]:
        return self.data.shape


@dataclass
class DEMImage:
    data: np.ndarray

    def __post_init__(self):
        self.data = np.asarray(self.data)
        if self.data.ndim != 2 or np.iscomplexobj(self.data):
            raise ValueError(f"DEM data must be a 2-D real matrix, got {self.data.dtype} {self.data.shape}")
        if not np.all(np.isfinite(self.data)):
            raise ValueError("DEM data contains non-finite elevations")

    @property
    def shape(self) -> tuple[int, int]:
        return self.data.shape


@dataclass(frozen=True)
class WindowSpec:
    window: int = 4000
    step: int = 100
    target: int = 140

    def __post_init__(self):
        if self.step < 1:
            raise ValueError("step must be >= 1")
        if not 1 <= self.target <= self.window:
            raise ValueError(f"target {self.target} must lie in [1, window={self.window}]")


@dataclass
class NormalizationStats:
    amp_mean: float
    amp_std: float
    phase_scale: float = 1.0 / math.pi

    def __post_init__(self):
        if not self.amp_std > 0:
            raise ValueError(f"amp_std must be positive, got {self.amp_std}")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "NormalizationStats":
        return cls(**d)


@dataclass
class Sample:
    input: np.ndarray  # (target, target, 2)
    target: np.ndarray  # (target, target, 1), meters
    row: int = 0
    col: int = 0


# ---------------------------------------------------------------- tile files


def write_tile(path, array: np.ndarray) -> None:
    array = np.asarray(array)
    if array.ndim != 2:
        raise ValueError(f"tiles hold 2-D matrices, got shape {array.shape}")
    tag = DTYPE_COMPLEX64 if np.iscomplexobj(array) else DTYPE_FLOAT32
    payload = np.ascontiguousarray(array, dtype=_TILE_DTYPES[tag])
    with open(path, "wb") as fh:
        fh.write(TILE_HEADER.pack(TILE_MAGIC, TILE_VERSION, tag, *array.shape))
        fh.write(payload.tobytes())


def read_tile(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if len(raw) < TILE_HEADER.size:
        raise FormatError(f"{path}: file is {len(raw)} bytes, shorter than the {TILE_HEADER.size}-byte tile header")
    magic, version, tag, rows, cols = TILE_HEADER.unpack_from(raw)
    if magic != TILE_MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}, expected {TILE_MAGIC!r}")
    if version != TILE_VERSION:
        raise FormatError(f"{path}: unsupported tile version {version}, this reader handles {TILE_VERSION}")
    if tag not in _TILE_DTYPES:
        raise FormatError(f"{path}: unknown dtype tag {tag}")
    if rows < 1 or cols < 1:
        raise FormatError(f"{path}: invalid extents ({rows}, {cols})")
    dtype = _TILE_DTYPES[tag]
    expected = TILE_HEADER.size + rows * cols * dtype.itemsize
    if len(raw) != expected:
        raise FormatError(f"{path}: truncated or oversized payload ({len(raw)} bytes, expected {expected})")
    return np.frombuffer(raw, dtype=dtype, offset=TILE_HEADER.size).reshape(rows, cols).copy()


def load_raster_pair(slc_path, dem_path) -> tuple[SLCImage, DEMImage]:
    slc = read_tile(slc_path)
    dem = read_tile(dem_path)
    if not np.iscomplexobj(slc):
        raise FormatError(f"{slc_path}: SLC tile must hold complex64 data")
    if np.iscomplexobj(dem):
        raise FormatError(f"{dem_path}: DEM tile must hold float32 data")
    if slc.shape != dem.shape:
        raise ValueError(f"extent mismatch: SLC {slc.shape} vs DEM {dem.shape}")
    return SLCImage(slc), DEMImage(dem)


# ------------------------------------------------------------ preprocessing


def abs_phase(slc: SLCImage | np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Amplitude ``|z|`` and phase ``atan2(im, re)`` in (-pi, pi]."""
    z = slc.data if isinstance(slc, SLCImage) else np.asarray(slc)
    amp = np.abs(z)
    phase = np.arctan2(z.imag, z.real)
    # atan2 returns -pi for (-x, -0.0); fold it onto the closed end
    phase[phase == -np.pi] = np.pi
    return amp, phase


def sliding_windows(n: int, m: int, spec: WindowSpec) -> list[tuple[int, int]]:
    if spec.window > n or spec.window > m:
        raise ValueError(f"window {spec.window} exceeds raster extent ({n}, {m})")
    rows = range(0, n - spec.window + 1, spec.step)
    cols = range(0, m - spec.window + 1, spec.step)
    return [(r, c) for r in rows for c in cols]


def area_weights(source: int, target: int) -> np.ndarray:
    """(target, source) matrix averaging fractional boxes of width source/target."""
    if target > source:
        raise ValueError(f"cannot downsample {source} pixels to {target}")
    ratio = source / target
    lo = np.arange(target)[:, None] * ratio
    hi = lo + ratio
    j = np.arange(source)[None, :]
    overlap = np.clip(np.minimum(hi, j + 1) - np.maximum(lo, j), 0.0, None)
    return overlap / ratio


def downsample(matrix: np.ndarray, target: int) -> np.ndarray:
    matrix = np.asarray(matrix, dtype=np.float64)
    if matrix.ndim != 2 or matrix.shape[0] != matrix.shape[1]:
        raise ValueError(f"downsample expects a square matrix, got {matrix.shape}")
    if matrix.shape[0] == target:
        return matrix.copy()
    a = area_weights(matrix.shape[0], target)
    return a @ matrix @ a.T


def window_channels(amp, phase, dem, row: int, col: int, spec: WindowSpec):
    """Raw (log-amplitude, phase, elevation) channels of one window at target size.

    Amplitude is multilooked before the log; phase is averaged on the unit
    circle so wrapped values do not cancel.
    """
    sl = np.s_[row : row + spec.window, col : col + spec.window]
    log_amp = np.log1p(downsample(amp[sl], spec.target))
    if spec.window == spec.target:
        ph = np.array(phase[sl], dtype=np.float64)
    else:
        ph = np.arctan2(downsample(np.sin(phase[sl]), spec.target), downsample(np.cos(phase[sl]), spec.target))
        ph[ph == -np.pi] = np.pi
    return log_amp, ph, downsample(dem[sl], spec.target)


def compute_stats(log_amps) -> NormalizationStats:
    """Mean and standard deviation of log-amplitude over the given samples."""
    total = 0.0
    count = 0
    for a in log_amps:
        total += float(np.sum(a, dtype=np.float64))
        count += a.size
    if count == 0:
        raise ValueError("no samples to compute normalization statistics from")
    mean = total / count
    sq = sum(float(np.sum((np.asarray(a, dtype=np.float64) - mean) ** 2)) for a in log_amps)
    std = math.sqrt(sq / count)
    return NormalizationStats(amp_mean=mean, amp_std=std if std > 0 else 1.0)


def normalize_input(log_amp: np.ndarray, phase: np.ndarray, stats: NormalizationStats) -> np.ndarray:
    return np.stack([(log_amp - stats.amp_mean) / stats.amp_std, phase * stats.phase_scale], axis=-1)


def make_samples(slc: SLCImage, dem: DEMImage, spec: WindowSpec, stats: NormalizationStats) -> Iterator[Sample]:
    amp, phase = abs_phase(slc)
    n, m = slc.shape
    for row, col in sliding_windows(n, m, spec):
        log_amp, ph, elev = window_channels(amp, phase, dem.data, row, col, spec)
        yield Sample(normalize_input(log_amp, ph, stats), elev[..., None], row, col)


# ------------------------------------------------------------------ splits


def _round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def split(n: int, fraction: float = 0.65, seed: int = 0) -> tuple[list[int], list[int]]:
    """Random train/test partition of ``range(n)``; train gets round(fraction * n)."""
    if n <= 0:
        raise ValueError("cannot split an empty sample set")
    perm = np.random.default_rng(seed).permutation(n)
    k = _round_half_up(fraction * n)
    return sorted(int(i) for i in perm[:k]), sorted(int(i) for i in perm[k:])


def block_split(offsets, window: int, cols: int, fraction: float = 0.65) -> tuple[list[int], list[int]]:
    """Spatially disjoint split along azimuth.

    Windows entirely left of the cut column train, windows entirely right of
    it test, and windows straddling it are dropped.
    """
    if not offsets:
        raise ValueError("cannot split an empty sample set")
    cut = _round_half_up(fraction * cols)
    train = [i for i, (_, c) in enumerate(offsets) if c + window <= cut]
    test = [i for i, (_, c) in enumerate(offsets) if c >= cut]
    return train, test


# --------------------------------------------------------------- manifests


@dataclass
class SampleEntry:
    id: int
    source: str
    row: int
    col: int
    split: str
    file: str


@dataclass
class DatasetManifest:
    sources: list[dict] = field(default_factory=list)
    samples: list[SampleEntry] = field(default_factory=list)
    split_seed: int = 0
    split_fraction: float = 0.65
    window: WindowSpec = field(default_factory=WindowSpec)
    stats: NormalizationStats | None = None
    block_split: bool = False
    root: Path = Path(".")

    def ids(self, split_tag: str) -> list[int]:
        return [s.id for s in self.samples if s.split == split_tag]

    def resolve(self, rel: str) -> Path:
        return (self.root / rel).resolve()


def write_manifest(manifest: DatasetManifest, path) -> None:
    path = Path(path)
    header = {
        "kind": "header",
        "format": MANIFEST_FORMAT,
        "version": MANIFEST_VERSION,
        "seed": manifest.split_seed,
        "split_fraction": manifest.split_fraction,
        "window": asdict(manifest.window),
        "block_split": manifest.block_split,
        "stats": None if manifest.stats is None else manifest.stats.to_dict(),
    }
    lines = [json.dumps(header)]
    lines += [json.dumps({"kind": "source", **s}) for s in manifest.sources]
    lines += [json.dumps({"kind": "sample", **asdict(s)}) for s in manifest.samples]
    path.write_text("\n".join(lines) + "\n")


def read_manifest(path) -> DatasetManifest:
    path = Path(path)
    records = [json.loads(line) for line in path.read_text().splitlines() if line.strip()]
    if not records or records[0].get("kind") != "header" or records[0].get("format") != MANIFEST_FORMAT:
        raise FormatError(f"{path}: missing manifest header")
    head = records[0]
    if head["version"] != MANIFEST_VERSION:
        raise FormatError(f"{path}: manifest version {head['version']} unsupported (reader handles {MANIFEST_VERSION})")
    manifest = DatasetManifest(
        split_seed=head["seed"],
        split_fraction=head["split_fraction"],
        window=WindowSpec(**head["window"]),
        block_split=head.get("block_split", False),
        stats=None if head.get("stats") is None else NormalizationStats.from_dict(head["stats"]),
        root=path.parent,
    )
    for rec in records[1:]:
        kind = rec.pop("kind")
        if kind == "source":
            manifest.sources.append(rec)
        elif kind == "sample":
            manifest.samples.append(SampleEntry(**rec))
        else:
            raise FormatError(f"{path}: unknown record kind {kind!r}")
    return manifest


# ----------------------------------------------------------------- ingest


def ingest(sources: list[dict], out_dir, spec: WindowSpec = WindowSpec(), seed: int = 0,
           fraction: float = 0.65, use_block_split: bool = False, root: Path | None = None) -> DatasetManifest:
    """Cut every raster pair into samples, split them and write a manifest.

    ``sources`` holds ``{"id", "slc", "dem"}`` records; relative paths resolve
    against ``root``. Raw (unnormalized) channels are stored per sample in
    ``samples/<id>.npz``; normalization statistics come from the train split
    and live in the manifest header.
    """
    out_dir = Path(out_dir)
    (out_dir / "samples").mkdir(parents=True, exist_ok=True)
    root = Path(root) if root is not None else Path(".")
    manifest = DatasetManifest(split_seed=seed, split_fraction=fraction, window=spec, block_split=use_block_split, root=out_dir)
    entries: list[SampleEntry] = []
    block_tags: list[str | None] = []
    for src in sources:
        slc_path, dem_path = root / src["slc"], root / src["dem"]
        slc, dem = load_raster_pair(slc_path, dem_path)
        amp, phase = abs_phase(slc)
        offsets = sliding_windows(*slc.shape, spec)
        if use_block_split:
            tr, te = block_split(offsets, spec.window, slc.shape[1], fraction)
            tags = {i: TRAIN for i in tr} | {i: TEST for i in te}
        for k, (row, col) in enumerate(offsets):
            if use_block_split and k not in tags:
                continue
            sid = len(entries)
            log_amp, ph, elev = window_channels(amp, phase, dem.data, row, col, spec)
            rel = f"samples/{sid:06d}.npz"
            np.savez(out_dir / rel, log_amp=log_amp.astype(np.float32), phase=ph.astype(np.float32),
                     dem=elev.astype(np.float32))
            entries.append(SampleEntry(sid, src["id"], row, col, "", rel))
            block_tags.append(tags[k] if use_block_split else None)
        manifest.sources.append({"id": src["id"], "slc": str(Path(slc_path).resolve()), "dem": str(Path(dem_path).resolve())})
        log.info("ingested %s: %d windows", src["id"], len(offsets))
    if use_block_split:
        for e, tag in zip(entries, block_tags):
            e.split = tag
    else:
        train_ids, _ = split(len(entries), fraction, seed)
        train_set = set(train_ids)
        for e in entries:
            e.split = TRAIN if e.id in train_set else TEST
    manifest.samples = entries
    train_amps = [load_sample_arrays(manifest, e)[0] for e in entries if e.split == TRAIN]
    manifest.stats = compute_stats(train_amps)
    write_manifest(manifest, out_dir / "manifest.jsonl")
    return manifest


def load_sample_arrays(manifest: DatasetManifest, entry: SampleEntry):
    path = manifest.resolve(entry.file)
    try:
        with np.load(path) as z:
            return z["log_amp"], z["phase"], z["dem"]
    except (OSError, KeyError, ValueError) as exc:
        raise FormatError(f"unreadable sample {entry.id} at {path}: {exc}") from exc


@dataclass
class SampleSet:
    """Samples of one split, stacked in memory."""

    inputs: np.ndarray  # (N, H, W, 2)
    targets: np.ndarray  # (N, H, W, 1)
    ids: list[int]

    def __len__(self):
        return len(self.ids)


def load_split(manifest: DatasetManifest, split_tag: str, stats: NormalizationStats | None = None,
               dtype=np.float32) -> SampleSet:
    stats = stats or manifest.stats
    if stats is None:
        raise ValueError("manifest carries no normalization statistics")
    entries = [e for e in manifest.samples if e.split == split_tag]
    if not entries:
        raise ValueError(f"split {split_tag!r} is empty")
    t = manifest.window.target
    inputs = np.empty((len(entries), t, t, 2), dtype=dtype)
    targets = np.empty((len(entries), t, t, 1), dtype=dtype)
    for i, e in enumerate(entries):
        log_amp, ph, elev = load_sample_arrays(manifest, e)
        inputs[i] = normalize_input(log_amp, ph, stats)
        targets[i, ..., 0] = elev
    return SampleSet(inputs, targets, [e.id for e in entries])
