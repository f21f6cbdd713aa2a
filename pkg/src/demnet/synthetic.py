"""Synthetic SLC/DEM pairs for desk-scale training and tests.

Terrain comes from diamond-square midpoint displacement. The radar image is a
deliberately crude forward model: amplitude is Lambertian shading of the
slope seen from the sensor times exponential speckle, and phase is a linear
function of height, wrapped. All randomness uses numpy's PCG64 generator,
seeded through ``SeedSequence`` so outputs are stable across platforms.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .data import DatasetManifest, DEMImage, SLCImage, WindowSpec, write_manifest, write_tile

# metres of ground per pixel, used to turn height differences into slopes
PIXEL_SPACING_M = 30.0
# ground size of one pixel of a 4000 px window resampled to 140 px; use it when
# generating terrain directly at sample resolution
SAMPLE_PIXEL_SPACING_M = PIXEL_SPACING_M * 4000 / 140
# backscatter left in radar shadow, keeps the phase defined everywhere
SHADOW_FLOOR = 0.05
# height -> phase is 4*pi*h / PHASE_WAVELENGTH_M; 16 km keeps 0-4000 m unwrapped
PHASE_WAVELENGTH_M = 16000.0
DEFAULT_LOOK_ANGLE_DEG = 35.0
DEFAULT_PHASE_NOISE_RAD = 0.05


@dataclass(frozen=True)
class TerrainConfig:
    size: int = 4097  # 2**12 + 1, one 4000 px window with room to spare
    roughness: float = 4.0
    elevation_range: tuple[float, float] = (0.0, 3000.0)
    seed: int = 0

    def __post_init__(self):
        if self.size < 140:
            raise ValueError(f"terrain size must be >= 140, got {self.size}")
        lo, hi = self.elevation_range
        if not hi > lo:
            raise ValueError(f"elevation_range max must exceed min, got {self.elevation_range}")
        if not math.isfinite(self.roughness):
            raise ValueError("roughness must be finite")


def _diamond_square(levels: int, roughness: float, rng: np.random.Generator) -> np.ndarray:
    n = 2**levels + 1
    z = np.zeros((n, n))
    z[:: n - 1, :: n - 1] = rng.standard_normal((2, 2))
    # per halving the displacement shrinks by 2**-H, H = (beta - 2) / 2
    decay = 2.0 ** (-(roughness - 2.0) / 2.0)
    scale = 1.0
    step = n - 1
    while step > 1:
        half = step // 2
        # diamond: square centres from their four corners
        corners = z[0:-1:step, 0:-1:step] + z[0:-1:step, step::step] + z[step::step, 0:-1:step] + z[step::step, step::step]
        centres = z[half::step, half::step]
        centres[...] = corners / 4.0 + scale * rng.standard_normal(centres.shape)
        # square: edge midpoints from their (up to four) diamond neighbours
        for r0, c0 in ((0, half), (half, 0)):
            rr, cc = np.meshgrid(np.arange(r0, n, step), np.arange(c0, n, step), indexing="ij")
            total = np.zeros(rr.shape)
            count = np.zeros(rr.shape)
            for dr, dc in ((-half, 0), (half, 0), (0, -half), (0, half)):
                r, c = rr + dr, cc + dc
                ok = (r >= 0) & (r < n) & (c >= 0) & (c < n)
                total[ok] += z[r[ok], c[ok]]
                count[ok] += 1
            z[rr, cc] = total / count + scale * rng.standard_normal(rr.shape)
        scale *= decay
        step = half
    return z


def gen_terrain(config: TerrainConfig) -> DEMImage:
    """Random terrain of ``config.size`` squared pixels spanning exactly ``elevation_range``."""
    levels = max(1, math.ceil(math.log2(config.size - 1)))
    rng = np.random.default_rng(np.random.SeedSequence(config.seed))
    z = _diamond_square(levels, config.roughness, rng)[: config.size, : config.size]
    lo, hi = config.elevation_range
    span = z.max() - z.min()
    if span == 0:
        z = np.full_like(z, lo)
    else:
        z = lo + (z - z.min()) * ((hi - lo) / span)
        z[z == z.max()] = hi
    return DEMImage(z)


def height_to_phase(height: np.ndarray, wavelength: float = PHASE_WAVELENGTH_M) -> np.ndarray:
    """Unwrapped phase of a given height."""
    return (4.0 * np.pi / wavelength) * np.asarray(height, dtype=np.float64)


def wrap_phase(phase: np.ndarray) -> np.ndarray:
    """Wrap into (-pi, pi]."""
    return np.pi - np.mod(np.pi - phase, 2.0 * np.pi)


def shading(dem: np.ndarray, look_angle_deg: float = DEFAULT_LOOK_ANGLE_DEG,
            pixel_spacing: float = PIXEL_SPACING_M) -> np.ndarray:
    """Lambertian brightness for a sensor looking along axis 0 (range).

    Slopes rising away from the sensor (height increasing with range index)
    face it and come out brighter. Pixels facing away keep ``SHADOW_FLOOR``.
    """
    g_range, g_az = np.gradient(np.asarray(dem, dtype=np.float64), pixel_spacing)
    theta = np.deg2rad(look_angle_deg)
    cos_local = (g_range * np.sin(theta) + np.cos(theta)) / np.sqrt(g_range**2 + g_az**2 + 1.0)
    return SHADOW_FLOOR + (1.0 - SHADOW_FLOOR) * np.clip(cos_local, 0.0, None)


def sar_render(dem: DEMImage | np.ndarray, look_angle: float = DEFAULT_LOOK_ANGLE_DEG, noise_seed: int | None = 0,
               phase_noise: float = DEFAULT_PHASE_NOISE_RAD, wavelength: float = PHASE_WAVELENGTH_M,
               pixel_spacing: float = PIXEL_SPACING_M) -> SLCImage:
    """Render an SLC image from terrain.

    ``noise_seed=None`` disables speckle and phase noise.
    """
    h = dem.data if isinstance(dem, DEMImage) else np.asarray(dem)
    amp = shading(h, look_angle, pixel_spacing)
    phase = height_to_phase(h, wavelength)
    if noise_seed is not None:
        rng = np.random.default_rng(np.random.SeedSequence(noise_seed))
        amp = amp * rng.exponential(1.0, amp.shape)
        phase = phase + rng.uniform(-phase_noise, phase_noise, amp.shape)
    z = amp * np.exp(1j * wrap_phase(phase))
    return SLCImage(z.astype(np.complex64))


def pair_seeds(seed: int, n_pairs: int) -> list[tuple[int, int]]:
    """(terrain seed, noise seed) per pair, derived from one master seed."""
    children = np.random.SeedSequence(seed).generate_state(2 * n_pairs, dtype=np.uint32)
    return [(int(children[2 * i]), int(children[2 * i + 1])) for i in range(n_pairs)]


def gen_dataset(n_pairs: int, config: TerrainConfig, out_dir, look_angle: float = DEFAULT_LOOK_ANGLE_DEG,
                phase_noise: float = DEFAULT_PHASE_NOISE_RAD, pixel_spacing: float = PIXEL_SPACING_M) -> DatasetManifest:
    """Write ``n_pairs`` SLC/DEM tile pairs plus a ``pairs.jsonl`` manifest listing them."""
    if n_pairs < 1:
        raise ValueError("n_pairs must be >= 1")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    manifest = DatasetManifest(split_seed=config.seed, window=WindowSpec(), root=out_dir)
    for i, (t_seed, n_seed) in enumerate(pair_seeds(config.seed, n_pairs)):
        dem = gen_terrain(replace(config, seed=t_seed))
        slc = sar_render(dem, look_angle, n_seed, phase_noise, pixel_spacing=pixel_spacing)
        pid = f"pair_{i:03d}"
        write_tile(out_dir / f"{pid}.slc.tile", slc.data)
        write_tile(out_dir / f"{pid}.dem.tile", dem.data)
        manifest.sources.append({"id": pid, "slc": f"{pid}.slc.tile", "dem": f"{pid}.dem.tile",
                                 "terrain_seed": t_seed, "noise_seed": n_seed})
    write_manifest(manifest, out_dir / "pairs.jsonl")
    return manifest
