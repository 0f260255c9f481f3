import numpy as np
import pytest

from chansr.characteristics import DEFAULT_SPECS
from chansr.export import (
    ExportError,
    dequantize,
    export_maps,
    quantize,
    read_csv,
    read_pgm,
    write_csv,
    write_pgm,
)
from chansr.scene import generate_sample

PL = DEFAULT_SPECS["PL"]


def test_csv_round_trip_within_1e6(tmp_path, rng):
    m = rng.uniform(-160, -40, (9, 7))
    m[2, 3] = PL.sentinel
    write_csv(tmp_path / "m.csv", m, PL)
    back = read_csv(tmp_path / "m.csv")
    assert np.isnan(back[2, 3])
    ok = ~np.isnan(back)
    assert np.max(np.abs(back[ok] - m[ok])) < 1e-6
    assert "NA" in (tmp_path / "m.csv").read_text().splitlines()[2]


def test_constant_raster_gives_equal_pixels(tmp_path):
    write_pgm(tmp_path / "c.pgm", np.full((4, 6), -90.0), PL)
    pixels, lo, hi = read_pgm(tmp_path / "c.pgm")
    assert pixels.shape == (4, 6) and len(np.unique(pixels)) == 1
    assert lo == hi == -90.0


def test_pgm_header_and_metadata(tmp_path, rng):
    m = rng.uniform(-150, -50, (5, 8))
    m[0, 0] = PL.sentinel
    write_pgm(tmp_path / "m.pgm", m, PL)
    blob = (tmp_path / "m.pgm").read_bytes()
    assert blob.startswith(b"P5\n# min=")
    assert b"\n8 5\n65535\n" in blob
    pixels, lo, hi = read_pgm(tmp_path / "m.pgm")
    assert lo == m.ravel()[1:].min() and hi == m.ravel()[1:].max()
    assert pixels[0, 0] == 0 and pixels[1:].min() >= 1
    assert pixels.max() == 65535 and pixels.ravel()[1:].min() == 1
    back = dequantize(pixels, lo, hi)
    assert np.isnan(back[0, 0])
    step = (hi - lo) / 65534
    assert np.nanmax(np.abs(back - m)[1:]) <= step / 2 + 1e-9


def test_pgm_is_big_endian(tmp_path):
    write_pgm(tmp_path / "r.pgm", np.array([[0.0, 1.0]]))
    assert (tmp_path / "r.pgm").read_bytes()[-4:] == b"\x00\x01\xff\xff"


def test_quantize_all_sentinel():
    pixels, lo, hi = quantize(np.full((2, 2), PL.sentinel), PL)
    assert not pixels.any()


def test_export_maps_writes_every_raster(tmp_path):
    sample = generate_sample(1, 0, 32)
    paths = export_maps(sample.rasters, tmp_path / "out", "csv", prefix="s_")
    assert [p.name for p in paths] == [f"s_{k}.csv" for k in ("h", "PL", "R_p", "LOS", "DS", "phi", "theta")]
    back = read_csv(paths[1])
    inside = sample.rasters["h"] > 0
    assert np.all(np.isnan(back[inside])) and not np.any(np.isnan(back[~inside]))


def test_export_rejects_unwritable_dir(tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("x")
    with pytest.raises(ExportError, match="cannot create"):
        export_maps({"PL": np.zeros((2, 2))}, blocker / "sub", "pgm")
    with pytest.raises(ValueError, match="format"):
        export_maps({"PL": np.zeros((2, 2))}, tmp_path, "png")
