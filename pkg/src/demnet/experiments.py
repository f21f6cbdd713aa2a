"""In-memory synthetic datasets for the training experiments.

Terrain is generated directly at sample resolution (140 px), so one terrain
is one sample. This matches what the tile pipeline produces from a 4000 px
window, without writing tiles to disk.
"""

from __future__ import annotations

import numpy as np

from .data import NormalizationStats, SampleSet, abs_phase, compute_stats, normalize_input
from .synthetic import SAMPLE_PIXEL_SPACING_M, TerrainConfig, gen_terrain, sar_render

NOISE_SEED_OFFSET = 1_000_000


def raw_channels(seeds, config: TerrainConfig = TerrainConfig(size=140)):
    """Log-amplitude, phase and DEM stacks for one terrain per seed."""
    log_amp, phase, dem = [], [], []
    for s in seeds:
        d = gen_terrain(TerrainConfig(config.size, config.roughness, config.elevation_range, int(s))).data
        amp, ph = abs_phase(sar_render(d, noise_seed=NOISE_SEED_OFFSET + int(s), pixel_spacing=SAMPLE_PIXEL_SPACING_M))
        log_amp.append(np.log1p(amp.astype(np.float64)))
        phase.append(ph.astype(np.float64))
        dem.append(d)
    return np.stack(log_amp), np.stack(phase), np.stack(dem)


def synthetic_split(train_seeds, test_seeds=(), config: TerrainConfig = TerrainConfig(size=140),
                    dtype=np.float32) -> tuple[SampleSet, SampleSet | None, NormalizationStats]:
    """Train and test sets normalized with statistics of the train set only."""
    la, ph, dem = raw_channels(train_seeds, config)
    stats = compute_stats(list(la))

    def pack(la, ph, dem, seeds):
        x = np.stack([normalize_input(a, p, stats) for a, p in zip(la, ph)]).astype(dtype)
        return SampleSet(x, dem[..., None].astype(dtype), [int(s) for s in seeds])

    train = pack(la, ph, dem, train_seeds)
    test = pack(*raw_channels(test_seeds, config), test_seeds) if len(test_seeds) else None
    return train, test, stats
