import math

import numpy as np
import pytest

from chansr.characteristics import DEFAULT_SPECS, KINDS, TARGETS
from chansr.scene import (
    PropagationParams,
    UrbanScene,
    Visibility,
    clutter_fraction,
    free_space_gain,
    generate_sample,
    generate_scene,
    mix64,
    synthesize_characteristics,
    trace_all,
    trace_los,
)


def handmade_scene(grid=32, tx=(16, 2), tx_height=40.0, walls=()):
    """``walls`` is a list of (r0, r1, c0, c1, height) rectangles."""
    occ = np.zeros((grid, grid), dtype=np.int32)
    heights = [0.0]
    for r0, r1, c0, c1, h in walls:
        occ[r0:r1, c0:c1] = len(heights)
        heights.append(h)
    return UrbanScene(grid, occ, np.asarray(heights), tx, tx_height, seed=0)


def supersampled_los(scene, cell, rx_height=1.5, per_cell=16):
    tr, tc = scene.tx
    r, c = cell
    n = per_cell * (abs(r - tr) + abs(c - tc) + 1)
    for i in range(n + 1):
        t = i / n
        y, x = tr + t * (r - tr), tc + t * (c - tc)
        cy, cx = math.floor(y + 0.5), math.floor(x + 0.5)
        b = scene.occupancy[cy, cx]
        if b and scene.heights[b] > scene.tx_height + t * (rx_height - scene.tx_height):
            return False
    return True


# ------------------------------------------------------------- generation

def test_mix64_spreads_and_is_stable():
    seeds = {mix64(7, i) for i in range(1000)}
    assert len(seeds) == 1000
    assert mix64(7, 3) == mix64(7, 3)
    assert mix64(7, 3) != mix64(8, 3)
    assert all(0 <= s < 2**64 for s in seeds)


def test_density_zero_has_no_buildings():
    s = generate_scene(11, 32, 0.0)
    assert s.n_buildings == 0 and s.coverage == 0.0
    assert s.occupancy[s.tx] == 0


def test_same_seed_identical_scene():
    a, b = generate_scene(99, 64, 0.3), generate_scene(99, 64, 0.3)
    assert a.occupancy.tobytes() == b.occupancy.tobytes()
    assert a.heights.tobytes() == b.heights.tobytes()
    assert a.tx == b.tx and a.tx_height == b.tx_height
    c = generate_scene(100, 64, 0.3)
    assert a.occupancy.tobytes() != c.occupancy.tobytes()


def test_footprints_are_rectangles_and_tx_outside():
    s = generate_scene(5, 128, 0.3)
    assert s.occupancy[s.tx] == 0
    for b in range(1, s.n_buildings + 1):
        rows, cols = np.nonzero(s.occupancy == b)
        area = (rows.max() - rows.min() + 1) * (cols.max() - cols.min() + 1)
        assert area == rows.size


def test_mean_coverage_over_seed_sweep():
    cov = [generate_scene(mix64(2024, i), 128, 0.3).coverage for i in range(100)]
    assert 0.25 <= np.mean(cov) <= 0.35


def test_unreachable_density_flags_best_effort():
    s = generate_scene(3, 16, 0.55, max_attempts=200)
    assert not s.density_reached
    assert s.coverage < 0.55


@pytest.mark.parametrize("grid,density", [(8, 0.3), (32, 0.6), (32, -0.1)])
def test_generate_scene_rejects_bad_arguments(grid, density):
    with pytest.raises(ValueError):
        generate_scene(0, grid, density)


def test_propagation_params_must_be_positive():
    with pytest.raises(ValueError, match="wall_loss_dB"):
        PropagationParams(wall_loss_dB=0.0)
    with pytest.raises(ValueError, match="clutter_gain.DS"):
        PropagationParams(clutter_gain={"DS": -1.0, "phi": 1.0, "theta": 1.0, "R_p": 1.0})
    assert PropagationParams().digest() == PropagationParams().digest()
    assert PropagationParams().digest() != PropagationParams(wall_loss_dB=16.0).digest()


# --------------------------------------------------------------- visibility

def test_empty_scene_all_los():
    s = handmade_scene()
    assert np.all(trace_all(s) == 0)


def test_full_height_wall_blocks():
    s = handmade_scene(walls=[(0, 32, 10, 12, 100.0)])
    verdict, count = trace_los(s, (16, 20))
    assert verdict is Visibility.NLOS and count >= 1
    assert trace_los(s, (16, 5)) == (Visibility.LOS, 0)
    assert trace_los(s, (16, 10))[0] is Visibility.INSIDE


def test_low_wall_under_the_ray_does_not_block():
    s = handmade_scene(walls=[(0, 32, 10, 12, 2.0)])
    assert trace_los(s, (16, 30))[0] is Visibility.LOS


def test_two_walls_counted_separately():
    s = handmade_scene(walls=[(0, 32, 8, 10, 100.0), (0, 32, 20, 22, 100.0)])
    assert trace_los(s, (16, 30)) == (Visibility.NLOS, 2)


def test_trace_outside_grid_rejected():
    with pytest.raises(ValueError, match="outside"):
        trace_los(handmade_scene(), (40, 0))


def test_dda_agrees_with_supersampling_oracle():
    agree = total = 0
    for i in range(3):
        scene = generate_scene(mix64(31, i), 48, 0.3)
        counts = trace_all(scene)
        for r in range(48):
            for c in range(48):
                if counts[r, c] < 0:
                    continue
                total += 1
                agree += (counts[r, c] == 0) == supersampled_los(scene, (r, c))
    assert agree / total >= 0.99


# ------------------------------------------------------------ characteristics

def test_free_space_reference_value():
    assert free_space_gain(np.array(100.0), 2600.0) == pytest.approx(-80.749, abs=1e-3)


def test_pl_formula_los_and_wall_offset():
    tx_h = 1.5  # rx height, so 3-D distance equals horizontal distance
    clear = handmade_scene(grid=64, tx=(0, 0), tx_height=tx_h)
    walled = handmade_scene(grid=64, tx=(0, 0), tx_height=tx_h,
                            walls=[(0, 1, 10, 12, 50.0), (0, 1, 30, 32, 50.0)])
    a = synthesize_characteristics(clear, shadowing=False).rasters["PL"]
    b = synthesize_characteristics(walled, shadowing=False).rasters["PL"]
    assert a[0, 50] == pytest.approx(-80.749, abs=1e-3)  # 50 cells * 2 m
    assert b[0, 50] == pytest.approx(a[0, 50] - 30.0, abs=1e-3)


def test_tx_cell_distance_clamped():
    s = handmade_scene(tx_height=1.5)
    pl = synthesize_characteristics(s, shadowing=False).rasters["PL"]
    assert pl[s.tx] == pytest.approx(float(free_space_gain(np.array(2.0), 2600.0)), abs=1e-4)


def test_sample_invariants():
    sample = generate_sample(7, 0, 64, 0.3)
    assert set(sample.rasters) == set(KINDS)
    assert all(v.shape == (64, 64) and v.dtype == np.float32 for v in sample.rasters.values())
    inside = sample.rasters["h"] > 0
    for t in TARGETS:
        v = sample.rasters[t]
        assert np.all(v[inside] == np.float32(DEFAULT_SPECS[t].sentinel))
        assert np.all(np.isfinite(v[~inside]))
        assert not np.any(DEFAULT_SPECS[t].is_sentinel(v[~inside]))
    assert set(np.unique(sample.rasters["LOS"][~inside])) <= {0.0, 1.0}
    assert np.all(sample.rasters["PL"][~inside] <= 0)


def test_nlos_spreads_exceed_los_at_equal_clutter():
    scene = generate_scene(mix64(7, 1), 64, 0.3)
    sample = synthesize_characteristics(scene)
    clutter = clutter_fraction(scene.occupancy)
    los = sample.rasters["LOS"]
    open_ = scene.occupancy == 0
    c = clutter.astype(np.float32)
    for kind, base in (("DS", lambda x: 40 * (1 + 4 * x)), ("phi", lambda x: 10 + 60 * x),
                       ("theta", lambda x: 3 + 12 * x)):
        v = sample.rasters[kind].astype(np.float64)
        offset = v - base(clutter)
        assert np.all(offset[open_ & (los == 1)] < offset[open_ & (los == 0)].min())
    assert c.shape == (64, 64)


def test_pl_non_increasing_in_walls():
    grid = 64
    base = dict(grid=grid, tx=(32, 0), tx_height=30.0)
    pls = []
    for n in range(4):
        walls = [(0, grid, 8 + 10 * k, 10 + 10 * k, 80.0) for k in range(n)]
        s = handmade_scene(**base, walls=walls)
        pls.append(synthesize_characteristics(s, shadowing=False).rasters["PL"][32, 60])
    assert all(a >= b for a, b in zip(pls, pls[1:]))


def test_sample_determinism():
    a, b = generate_sample(7, 5, 64), generate_sample(7, 5, 64)
    assert a.same_content(b)
    assert all(a.rasters[k].tobytes() == b.rasters[k].tobytes() for k in KINDS)
