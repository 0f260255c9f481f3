"""Synthetic urban scenes and surrogate channel-characteristic rasters.

Scenes are axis-aligned rectangular buildings on a square grid with one
transmitter. Characteristics come from closed-form surrogate physics
(free-space path gain, wall penetration, smoothed shadowing, clutter-driven
spreads) rather than ray tracing; they only need to be spatially structured
and LOS-correlated.
"""

from __future__ import annotations

import enum
import hashlib
import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy import ndimage

from .characteristics import DEFAULT_SPECS, KINDS

MASK64 = (1 << 64) - 1


def mix64(master_seed: int, index: int) -> int:
    """SplitMix64 finalizer over (master_seed, index); order-independent per-scene seeds."""
    z = (master_seed * 0x9E3779B97F4A7C15 + (index + 1) * 0xBF58476D1CE4E5B9) & MASK64
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK64
    return z ^ (z >> 31)


@dataclass(frozen=True)
class PropagationParams:
    frequency_MHz: float = 2600.0
    wall_loss_dB: float = 15.0
    shadow_sigma_dB: float = 3.0
    ds0_ns: float = 40.0
    clutter_gain: dict = field(
        default_factory=lambda: {"DS": 4.0, "phi": 60.0, "theta": 12.0, "R_p": 10.0}
    )
    rx_height_m: float = 1.5
    clutter_window: int = 11
    shadow_corr_cells: float = 4.0

    def __post_init__(self):
        scalars = {k: v for k, v in asdict(self).items() if k != "clutter_gain"}
        bad = [k for k, v in scalars.items() if not v > 0]
        bad += [f"clutter_gain.{k}" for k, v in self.clutter_gain.items() if not v > 0]
        if bad:
            raise ValueError(f"propagation parameters must be positive: {', '.join(bad)}")

    def digest(self) -> str:
        blob = json.dumps(asdict(self), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


@dataclass
class UrbanScene:
    grid_size: int
    occupancy: np.ndarray  # int32, 0 = open ground, k >= 1 = building id
    heights: np.ndarray  # float64, heights[k] for building k; heights[0] = 0
    tx: tuple[int, int]
    tx_height: float
    seed: int
    cell_m: float = 2.0
    density_reached: bool = True

    @property
    def coverage(self) -> float:
        return float(np.count_nonzero(self.occupancy)) / self.occupancy.size

    @property
    def n_buildings(self) -> int:
        return len(self.heights) - 1

    def height_map(self) -> np.ndarray:
        return self.heights[self.occupancy]


@dataclass
class SceneSample:
    rasters: dict[str, np.ndarray]  # kind -> float32 [G, G] native units
    seed: int
    tx: tuple[int, int]
    tx_height: float
    params_hash: str | None = None

    @property
    def grid_size(self) -> int:
        return self.rasters["h"].shape[0]

    def stack(self) -> np.ndarray:
        return np.stack([self.rasters[k] for k in KINDS])

    def same_content(self, other: "SceneSample") -> bool:
        return (
            self.seed == other.seed
            and tuple(self.tx) == tuple(other.tx)
            and np.float32(self.tx_height) == np.float32(other.tx_height)
            and all(np.array_equal(self.rasters[k], other.rasters[k]) for k in KINDS)
        )


def generate_scene(
    seed: int,
    grid_size: int = 128,
    density: float = 0.3,
    cell_m: float = 2.0,
    max_attempts: int | None = None,
    street_cells: int = 2,
    footprint: tuple[int, int] | None = None,
    building_height: tuple[float, float] = (5.0, 30.0),
    tx_height: tuple[float, float] = (30.0, 50.0),
) -> UrbanScene:
    """Rejection-sample non-overlapping rectangular buildings up to ``density`` coverage.

    Buildings keep ``street_cells`` of open ground between each other. When the
    attempt cap is hit first, the scene is returned with ``density_reached``
    set to False.
    """
    if grid_size < 16:
        raise ValueError(f"grid_size must be >= 16, got {grid_size}")
    if not 0 <= density < 0.6:
        raise ValueError(f"density must be in [0, 0.6), got {density}")
    rng = np.random.default_rng([seed & MASK64, 0])
    occ = np.zeros((grid_size, grid_size), dtype=np.int32)
    # footprint + street margin, used for the overlap test
    m = street_cells
    claimed = np.zeros((grid_size + 2 * m, grid_size + 2 * m), dtype=bool)
    heights = [0.0]
    lo, hi = footprint or (max(2, grid_size // 20), max(3, grid_size // 5))
    max_attempts = max_attempts or 400 * grid_size
    target = density * grid_size * grid_size
    built = 0
    attempts = 0
    while built < target and attempts < max_attempts:
        attempts += 1
        h_len, w_len = rng.integers(lo, hi + 1, size=2)
        r0 = int(rng.integers(0, grid_size - h_len + 1))
        c0 = int(rng.integers(0, grid_size - w_len + 1))
        if claimed[r0:r0 + h_len + 2 * m, c0:c0 + w_len + 2 * m].any():
            continue
        claimed[r0:r0 + h_len + 2 * m, c0:c0 + w_len + 2 * m] = True
        occ[r0:r0 + h_len, c0:c0 + w_len] = len(heights)
        heights.append(float(rng.uniform(*building_height)))
        built += int(h_len * w_len)
    reached = built >= target
    free = np.flatnonzero(occ.ravel() == 0)
    tx_flat = int(free[rng.integers(0, free.size)])
    tx = (tx_flat // grid_size, tx_flat % grid_size)
    tx_h = float(rng.uniform(*tx_height))
    return UrbanScene(
        grid_size=grid_size,
        occupancy=occ,
        heights=np.asarray(heights),
        tx=tx,
        tx_height=tx_h,
        seed=seed,
        cell_m=cell_m,
        density_reached=reached,
    )


class Visibility(enum.Enum):
    LOS = 1
    NLOS = 0
    INSIDE = -1


def _trace(scene: UrbanScene, rows: np.ndarray, cols: np.ndarray, rx_height: float):
    """Lock-step grid traversal (DDA) of the segments tx -> (rows, cols).

    Returns the number of entries into blocking building cells per ray. A cell
    blocks when its building is taller than the straight-line ray height at
    any point of the ray's passage through that cell. Exact corner hits
    step diagonally, so grazing a corner never blocks.
    """
    tr, tc = scene.tx
    dr = rows.astype(np.int64) - tr
    dc = cols.astype(np.int64) - tc
    adr, adc = np.abs(dr), np.abs(dc)
    sr, sc = np.sign(dr), np.sign(dc)
    n = rows.size
    r = np.full(n, tr, dtype=np.int64)
    c = np.full(n, tc, dtype=np.int64)
    kr = np.zeros(n, dtype=np.int64)  # boundaries crossed along rows
    kc = np.zeros(n, dtype=np.int64)
    t_enter = np.zeros(n)
    crossings = np.zeros(n, dtype=np.int64)
    prev_block = np.zeros(n, dtype=np.int64)  # building id of previous blocking cell, 0 if none
    with np.errstate(divide="ignore"):
        inv_r = np.where(adr > 0, 1.0 / np.maximum(adr, 1), np.inf)
        inv_c = np.where(adc > 0, 1.0 / np.maximum(adc, 1), np.inf)
    active = np.ones(n, dtype=bool)
    tx_h = scene.tx_height
    occ = scene.occupancy
    heights = scene.heights
    steps = int(adr.max(initial=0) + adc.max(initial=0)) + 1
    for _ in range(steps):
        if not active.any():
            break
        # exact comparison of next boundary times (2k+1)/(2|d|) via cross-multiplication
        next_r = np.where(adr > 0, (2 * kr + 1) * adc, np.iinfo(np.int64).max)
        next_c = np.where(adc > 0, (2 * kc + 1) * adr, np.iinfo(np.int64).max)
        t_r = (kr + 0.5) * inv_r
        t_c = (kc + 0.5) * inv_c
        t_exit = np.minimum(np.minimum(t_r, t_c), 1.0)
        bid = occ[r, c]
        # lowest ray height inside the cell (the ray is a straight segment)
        z = tx_h + (rx_height - tx_h) * np.where(rx_height < tx_h, t_exit, t_enter)
        blocking = active & (bid > 0) & (heights[bid] > z)
        crossings += blocking & (prev_block != bid)
        prev_block = np.where(blocking, bid, 0)
        # advance
        step_r = active & (next_r <= next_c) & (t_r < 1.0)
        step_c = active & (next_c <= next_r) & (t_c < 1.0)
        r = r + np.where(step_r, sr, 0)
        c = c + np.where(step_c, sc, 0)
        kr = kr + step_r
        kc = kc + step_c
        t_enter = np.where(step_r | step_c, t_exit, t_enter)
        active = active & (step_r | step_c)
    return crossings


def trace_los(scene: UrbanScene, cell: tuple[int, int], rx_height: float = 1.5) -> tuple[Visibility, int]:
    """Visibility of ``cell`` from the transmitter plus its wall-crossing count."""
    r, c = cell
    g = scene.grid_size
    if not (0 <= r < g and 0 <= c < g):
        raise ValueError(f"cell {cell} outside the {g}x{g} grid")
    if scene.occupancy[r, c] > 0:
        return Visibility.INSIDE, 0
    count = int(_trace(scene, np.array([r]), np.array([c]), rx_height)[0])
    return (Visibility.LOS if count == 0 else Visibility.NLOS), count


def trace_all(scene: UrbanScene, rx_height: float = 1.5) -> np.ndarray:
    """Wall-crossing counts for every cell (-1 inside buildings)."""
    g = scene.grid_size
    rows, cols = np.divmod(np.arange(g * g), g)
    counts = _trace(scene, rows, cols, rx_height).reshape(g, g)
    return np.where(scene.occupancy > 0, -1, counts)


def shadow_field(seed: int, grid_size: int, sigma_dB: float, corr_cells: float) -> np.ndarray:
    rng = np.random.default_rng([seed & MASK64, 1])
    white = rng.standard_normal((grid_size, grid_size))
    smooth = ndimage.gaussian_filter(white, corr_cells, mode="wrap")
    return smooth * (sigma_dB / smooth.std())


def clutter_fraction(occupancy: np.ndarray, window: int = 11) -> np.ndarray:
    """Fraction of built cells in a ``window`` x ``window`` neighbourhood, clipped at the grid edge."""
    built = (occupancy > 0).astype(np.float64)
    num = ndimage.uniform_filter(built, window, mode="constant", cval=0.0)
    den = ndimage.uniform_filter(np.ones_like(built), window, mode="constant", cval=0.0)
    return np.clip(num / den, 0.0, 1.0)


def free_space_gain(d_m: np.ndarray, frequency_MHz: float) -> np.ndarray:
    """Negative free-space path loss in dB for distances in meters."""
    return -(20.0 * np.log10(d_m) + 20.0 * math.log10(frequency_MHz) - 27.55)


def synthesize_characteristics(
    scene: UrbanScene,
    params: PropagationParams | None = None,
    shadowing: bool = True,
) -> SceneSample:
    params = params or PropagationParams()
    g = scene.grid_size
    rows, cols = np.mgrid[0:g, 0:g]
    horiz = np.hypot((rows - scene.tx[0]) * scene.cell_m, (cols - scene.tx[1]) * scene.cell_m)
    d = np.hypot(horiz, scene.tx_height - params.rx_height_m)
    d = np.maximum(d, scene.cell_m)
    walls = trace_all(scene, params.rx_height_m)
    inside = walls < 0
    walls = np.maximum(walls, 0)
    nlos = (walls > 0).astype(np.float64)
    clutter = clutter_fraction(scene.occupancy, params.clutter_window)
    shadow = (
        shadow_field(scene.seed, g, params.shadow_sigma_dB, params.shadow_corr_cells)
        if shadowing
        else np.zeros((g, g))
    )
    gain = params.clutter_gain
    pl = free_space_gain(d, params.frequency_MHz) - walls * params.wall_loss_dB - shadow
    ds = params.ds0_ns * (1.0 + gain["DS"] * clutter + 2.0 * nlos)
    phi = 10.0 + gain["phi"] * clutter + 20.0 * nlos
    theta = 3.0 + gain["theta"] * clutter + 6.0 * nlos
    r_p = -1.0 - gain["R_p"] * clutter - 8.0 * nlos
    los = 1.0 - nlos
    values = {"PL": pl, "R_p": r_p, "LOS": los, "DS": ds, "phi": phi, "theta": theta}
    rasters = {"h": scene.height_map().astype(np.float32)}
    for kind, arr in values.items():
        filled = np.where(inside, DEFAULT_SPECS[kind].sentinel, arr)
        rasters[kind] = filled.astype(np.float32)
    return SceneSample(
        rasters={k: rasters[k] for k in KINDS},
        seed=scene.seed,
        tx=scene.tx,
        tx_height=float(np.float32(scene.tx_height)),
        params_hash=params.digest(),
    )


def generate_sample(
    master_seed: int,
    index: int,
    grid_size: int = 128,
    density: float = 0.3,
    params: PropagationParams | None = None,
) -> SceneSample:
    scene = generate_scene(mix64(master_seed, index), grid_size, density)
    return synthesize_characteristics(scene, params)
