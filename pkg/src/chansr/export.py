"""Raster export: 16-bit binary PGM with dequantization metadata, or plain CSV.

PGM pixels are 0 for sentinel (in-building) cells and 1..65535 for valid
cells, linearly spanning the raster's valid min..max. The min and max are
written in a comment line with full float precision, so any reader can map a
pixel p >= 1 back to ``min + (p - 1) / 65534 * (max - min)``.
"""

from __future__ import annotations

import re
from pathlib import Path

import numpy as np

from .characteristics import DEFAULT_SPECS, KINDS, CharacteristicSpec

PGM_LEVELS = 65534  # valid pixels occupy 1..65535
FORMATS = ("pgm", "csv")


class ExportError(OSError):
    pass


def _valid_mask(values: np.ndarray, spec: CharacteristicSpec | None) -> np.ndarray:
    ok = np.isfinite(values)
    if spec is not None:
        ok &= ~spec.is_sentinel(values)
    return ok


def quantize(values: np.ndarray, spec: CharacteristicSpec | None = None) -> tuple[np.ndarray, float, float]:
    values = np.asarray(values, dtype=np.float64)
    ok = _valid_mask(values, spec)
    if not ok.any():
        return np.zeros(values.shape, dtype=np.uint16), 0.0, 0.0
    lo, hi = float(values[ok].min()), float(values[ok].max())
    span = hi - lo
    scaled = np.zeros(values.shape) if span == 0 else (values - lo) / span
    pixels = np.where(ok, 1 + np.rint(np.clip(scaled, 0, 1) * PGM_LEVELS), 0)
    return pixels.astype(np.uint16), lo, hi


def dequantize(pixels: np.ndarray, lo: float, hi: float) -> np.ndarray:
    """Inverse of :func:`quantize`; sentinel pixels come back as NaN."""
    pixels = np.asarray(pixels, dtype=np.float64)
    return np.where(pixels == 0, np.nan, lo + (pixels - 1) / PGM_LEVELS * (hi - lo))


def write_pgm(path: str | Path, values: np.ndarray, spec: CharacteristicSpec | None = None) -> None:
    pixels, lo, hi = quantize(values, spec)
    h, w = pixels.shape
    header = f"P5\n# min={lo!r} max={hi!r}\n{w} {h}\n65535\n".encode("ascii")
    Path(path).write_bytes(header + pixels.astype(">u2").tobytes())


_PGM_HEADER = re.compile(rb"P5\s*# min=(\S+) max=(\S+)\s+(\d+)\s+(\d+)\s+(\d+)\s")


def read_pgm(path: str | Path) -> tuple[np.ndarray, float, float]:
    """Pixels plus the (min, max) recorded in the comment line."""
    blob = Path(path).read_bytes()
    m = _PGM_HEADER.match(blob)
    if not m:
        raise ValueError(f"{path}: not a 16-bit P5 PGM written by this package")
    lo, hi = float(m.group(1)), float(m.group(2))
    w, h, maxval = (int(g) for g in m.group(3, 4, 5))
    if maxval != 65535:
        raise ValueError(f"{path}: expected maxval 65535, got {maxval}")
    pixels = np.frombuffer(blob, dtype=">u2", count=w * h, offset=m.end()).reshape(h, w)
    return pixels.astype(np.uint16), lo, hi


def write_csv(path: str | Path, values: np.ndarray, spec: CharacteristicSpec | None = None) -> None:
    values = np.asarray(values, dtype=np.float64)
    ok = _valid_mask(values, spec)
    lines = [",".join(f"{v:.9g}" if k else "NA" for v, k in zip(row, okrow)) for row, okrow in zip(values, ok)]
    Path(path).write_text("\n".join(lines) + "\n")


def read_csv(path: str | Path) -> np.ndarray:
    """Values in native units; "NA" cells become NaN."""
    rows = Path(path).read_text().splitlines()
    return np.array([[np.nan if c == "NA" else float(c) for c in r.split(",")] for r in rows if r])


def export_maps(
    rasters: dict[str, np.ndarray],
    out_dir: str | Path,
    fmt: str = "pgm",
    specs: dict[str, CharacteristicSpec] | None = None,
    prefix: str = "",
) -> list[Path]:
    """Write one file per raster (native units) and return the paths in kind order."""
    if fmt not in FORMATS:
        raise ValueError(f"format must be one of {FORMATS}, got {fmt!r}")
    specs = specs or DEFAULT_SPECS
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise ExportError(f"cannot create output directory {out}: {exc.strerror}") from exc
    order = [k for k in KINDS if k in rasters] + [k for k in rasters if k not in KINDS]
    written = []
    writer = write_pgm if fmt == "pgm" else write_csv
    for kind in order:
        path = out / f"{prefix}{kind}.{fmt}"
        try:
            writer(path, rasters[kind], specs.get(kind))
        except OSError as exc:
            raise ExportError(f"cannot write {path}: {exc.strerror}") from exc
        written.append(path)
    return written
