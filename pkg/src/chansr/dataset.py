"""Preprocessing, augmentation, splitting and persistence of scene samples.

Only HR rasters are stored; LR inputs are derived with :func:`downsample`.
"""

from __future__ import annotations

import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .characteristics import (
    DEFAULT_SPECS,
    KINDS,
    SENTINEL_NORM,
    CharacteristicSpec,
)
from .scene import SceneSample, generate_sample, PropagationParams

log = logging.getLogger(__name__)

MAGIC = b"CSRD"
FORMAT_VERSION = 1
SPLITS = ("train", "val", "test")
SCALES = (2, 4, 8)
AUGMENTATIONS = ("identity", "rot90", "rot180", "rot270", "hflip", "vflip")


class DatasetFormatError(Exception):
    """Base class for unreadable dataset files."""


class BadMagicError(DatasetFormatError):
    pass


class VersionMismatchError(DatasetFormatError):
    pass


class TruncatedFileError(DatasetFormatError):
    pass


# ------------------------------------------------------------- value mapping

def sanitize(values: np.ndarray, spec: CharacteristicSpec) -> np.ndarray:
    """Saturate out-of-range values per the characteristic's overflow policy; sentinels pass through."""
    values = np.asarray(values)
    sentinel = spec.is_sentinel(values)
    out = values.copy()
    if spec.overflow_policy == "to_min":
        out = np.where(~sentinel & (out < spec.min), spec.min, out)
    elif spec.overflow_policy == "to_max":
        out = np.where(~sentinel & (out > spec.max), spec.max, out)
    return out.astype(values.dtype, copy=False)


def normalize(values: np.ndarray, spec: CharacteristicSpec) -> np.ndarray:
    """Map [min, max] linearly onto [0, 1]; sentinel cells become exactly -0.1."""
    values = np.asarray(values, dtype=np.float64)
    out = (values - spec.min) / spec.span
    return np.where(spec.is_sentinel(values), SENTINEL_NORM, out)


def denormalize(values: np.ndarray, spec: CharacteristicSpec) -> np.ndarray:
    return np.asarray(values, dtype=np.float64) * spec.span + spec.min


# ---------------------------------------------------------------- resampling

def _blocks(values: np.ndarray, scale: int) -> np.ndarray:
    h, w = values.shape[-2:]
    if scale not in SCALES:
        raise ValueError(f"scale must be one of {SCALES}, got {scale}")
    if h % scale or w % scale:
        raise ValueError(f"grid {h}x{w} is not divisible by scale {scale}")
    lead = values.shape[:-2]
    b = values.reshape(*lead, h // scale, scale, w // scale, scale)
    return np.moveaxis(b, -3, -2).reshape(*lead, h // scale, w // scale, scale * scale)


def downsample(values: np.ndarray, scale: int, kind: str, spec: CharacteristicSpec | None = None) -> np.ndarray:
    """HR -> LR block reduction.

    Continuous kinds take the block mean of non-sentinel cells (an all-sentinel
    block stays sentinel); LOS takes a majority vote with ties going to NLOS;
    h is a plain block mean. Block members are sorted before summation so the
    result does not depend on cell order within a block (rotations commute
    exactly).
    """
    spec = spec or DEFAULT_SPECS[kind]
    values = np.asarray(values)
    blocks = _blocks(values.astype(np.float64), scale)
    if kind == "h":
        return np.sort(blocks, axis=-1).sum(axis=-1) / blocks.shape[-1]
    valid = ~spec.is_sentinel(blocks)
    count = valid.sum(axis=-1)
    if kind == "LOS":
        ones = (valid & (blocks > 0.5)).sum(axis=-1)
        out = np.where(2 * ones > count, 1.0, 0.0)
    else:
        total = np.sort(np.where(valid, blocks, 0.0), axis=-1).sum(axis=-1)
        with np.errstate(invalid="ignore", divide="ignore"):
            out = total / count
    return np.where(count == 0, spec.sentinel, out)


def downsample_sample(rasters: dict[str, np.ndarray], scale: int, specs=None) -> dict[str, np.ndarray]:
    specs = specs or DEFAULT_SPECS
    return {k: downsample(rasters[k], scale, k, specs[k]) for k in KINDS}


# -------------------------------------------------------------- augmentation

def transform_map(values: np.ndarray, name: str) -> np.ndarray:
    """Apply one dihedral transform to the last two axes (rotations counter-clockwise)."""
    if name == "identity":
        return values.copy()
    if name in ("rot90", "rot180", "rot270"):
        return np.ascontiguousarray(np.rot90(values, int(name[3:]) // 90, axes=(-2, -1)))
    if name == "hflip":
        return np.ascontiguousarray(values[..., :, ::-1])
    if name == "vflip":
        return np.ascontiguousarray(values[..., ::-1, :])
    raise ValueError(f"unknown augmentation {name!r}")


def transform_cell(cell: tuple[int, int], grid: int, name: str) -> tuple[int, int]:
    r, c = cell
    n = grid - 1
    return {
        "identity": (r, c),
        "rot90": (n - c, r),
        "rot180": (n - r, n - c),
        "rot270": (c, n - r),
        "hflip": (r, n - c),
        "vflip": (n - r, c),
    }[name]


def augment_one(sample: SceneSample, name: str) -> SceneSample:
    return SceneSample(
        rasters={k: transform_map(v, name) for k, v in sample.rasters.items()},
        seed=sample.seed,
        tx=transform_cell(sample.tx, sample.grid_size, name),
        tx_height=sample.tx_height,
        params_hash=sample.params_hash,
    )


def augment(sample: SceneSample) -> list[SceneSample]:
    """The six variants: identity, three rotations, horizontal and vertical flip."""
    if sample.rasters["h"].shape[0] != sample.rasters["h"].shape[1]:
        raise ValueError("augmentation needs square rasters")
    return [augment_one(sample, name) for name in AUGMENTATIONS]


# ------------------------------------------------------------------ datasets

@dataclass
class Dataset:
    samples: list[SceneSample]
    splits: dict[str, list[int]] = field(default_factory=dict)
    specs: dict[str, CharacteristicSpec] = field(default_factory=lambda: dict(DEFAULT_SPECS))
    version: int = FORMAT_VERSION

    def __post_init__(self):
        sizes = {s.grid_size for s in self.samples}
        if len(sizes) > 1:
            raise ValueError(f"all samples must share grid_size, got {sorted(sizes)}")

    @property
    def grid_size(self) -> int:
        return self.samples[0].grid_size

    def split_samples(self, name: str) -> list[SceneSample]:
        if name not in self.splits:
            raise KeyError(f"dataset has no split {name!r}; call split() first")
        return [self.samples[i] for i in self.splits[name]]


def split(dataset: Dataset, ratios: Sequence[float] = (0.8, 0.1, 0.1), seed: int = 0) -> Dataset:
    """Assign whole base scenes to train/val/test (augmentation happens later, per split)."""
    ratios = [float(r) for r in ratios]
    if len(ratios) != len(SPLITS) or any(r < 0 for r in ratios) or abs(sum(ratios) - 1.0) > 1e-9:
        raise ValueError(f"ratios must be three non-negative numbers summing to 1, got {ratios}")
    n = len(dataset.samples)
    wanted = sum(r > 0 for r in ratios)
    if n < wanted:
        raise ValueError(f"{n} scenes cannot fill {wanted} splits")
    raw = np.array(ratios) * n
    counts = np.floor(raw).astype(int)
    # largest remainder, then make sure every requested split gets a scene
    for i in np.argsort(-(raw - counts), kind="stable")[: n - counts.sum()]:
        counts[i] += 1
    for i in range(len(SPLITS)):
        if ratios[i] > 0 and counts[i] == 0:
            counts[i] = 1
            counts[int(np.argmax(counts))] -= 1
    order = np.random.default_rng(seed).permutation(n)
    bounds = np.cumsum(counts)[:-1]
    parts = np.split(order, bounds)
    dataset.splits = {name: sorted(int(i) for i in part) for name, part in zip(SPLITS, parts)}
    return dataset


def generate_dataset(
    master_seed: int,
    n_scenes: int,
    grid_size: int = 128,
    density: float = 0.3,
    params: PropagationParams | None = None,
) -> Dataset:
    samples = [generate_sample(master_seed, i, grid_size, density, params) for i in range(n_scenes)]
    return Dataset(samples)


# ------------------------------------------------------------------------ IO

_HEADER = struct.Struct("<4sHII")
_SAMPLE_META = struct.Struct("<QIIf")


def write_dataset(dataset: Dataset, path: str | Path) -> None:
    g = dataset.grid_size
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, FORMAT_VERSION, len(dataset.samples), g))
        for s in dataset.samples:
            fh.write(_SAMPLE_META.pack(s.seed & ((1 << 64) - 1), s.tx[0], s.tx[1], s.tx_height))
            for k in KINDS:
                fh.write(np.ascontiguousarray(s.rasters[k], dtype="<f4").tobytes())


def read_dataset(path: str | Path) -> Dataset:
    blob = Path(path).read_bytes()
    if len(blob) < 4 or blob[:4] != MAGIC:
        raise BadMagicError(f"{path}: bad magic {blob[:4]!r}, expected {MAGIC!r}")
    if len(blob) < _HEADER.size:
        raise TruncatedFileError(f"{path}: truncated header")
    _, version, count, g = _HEADER.unpack_from(blob, 0)
    if version != FORMAT_VERSION:
        raise VersionMismatchError(f"{path}: format version {version}, expected {FORMAT_VERSION}")
    raster_bytes = g * g * 4
    per_sample = _SAMPLE_META.size + len(KINDS) * raster_bytes
    expected = _HEADER.size + count * per_sample
    if len(blob) < expected:
        raise TruncatedFileError(f"{path}: {len(blob)} bytes, expected {expected} for {count} samples")
    samples = []
    off = _HEADER.size
    for _ in range(count):
        seed, tr, tc, tx_h = _SAMPLE_META.unpack_from(blob, off)
        off += _SAMPLE_META.size
        rasters = {}
        for k in KINDS:
            rasters[k] = np.frombuffer(blob, dtype="<f4", count=g * g, offset=off).reshape(g, g).astype(np.float32)
            off += raster_bytes
        samples.append(SceneSample(rasters, seed, (tr, tc), float(tx_h)))
    if off != len(blob):
        log.warning("%s: %d trailing bytes ignored", path, len(blob) - off)
    return Dataset(samples)


# ---------------------------------------------------------- model-ready arrays

def normalized_stack(rasters: dict[str, np.ndarray], specs=None) -> np.ndarray:
    """Sanitize + normalize the seven rasters into a float64 [7, H, W] array."""
    specs = specs or DEFAULT_SPECS
    return np.stack([normalize(sanitize(rasters[k], specs[k]), specs[k]) for k in KINDS])


def lr_hr_pair(rasters: dict[str, np.ndarray], scale: int, specs=None) -> tuple[np.ndarray, np.ndarray]:
    """Model input (normalized LR stack) and target (normalized HR stack)."""
    specs = specs or DEFAULT_SPECS
    clean = {k: sanitize(rasters[k], specs[k]) for k in KINDS}
    lr = downsample_sample(clean, scale, specs)
    return normalized_stack(lr, specs), normalized_stack(clean, specs)
