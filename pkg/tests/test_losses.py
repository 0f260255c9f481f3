import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from chansr import autodiff as ad
from chansr.characteristics import REGRESSION_TARGETS, TARGETS
from chansr.losses import (
    EmptyMaskError,
    EvalReport,
    LossWeights,
    accuracy,
    ce_loss,
    composite_loss,
    l1_loss,
    metrics,
    regression_metrics,
    stde,
    target_loss,
)

from oracles import accuracy_loop, ame_loop, ce_loop, l1_loop, rmse_loop


def random_case(rng, shape=(2, 6, 5), p_valid=0.7):
    pred = rng.standard_normal(shape)
    gt = rng.standard_normal(shape)
    mask = rng.random(shape) < p_valid
    mask.flat[0] = True
    return pred, gt, mask


# ---------------------------------------------------------------- examples

def test_l1_examples():
    assert l1_loss(ad.Tensor(np.ones(4)), np.ones(4), np.ones(4, bool)).item() == 0.0
    pred = np.array([1.0, 2.0, 3.0, 4.0])
    gt = np.array([2.0, 2.0, 1.0, 400.0])
    assert l1_loss(ad.Tensor(pred), gt, np.array([1, 1, 1, 0], bool)).item() == 1.0


def test_ce_examples():
    logits = np.zeros((1, 2, 2, 2))
    labels = np.array([[[0.0, 1.0], [1.0, 0.0]]])
    assert ce_loss(ad.Tensor(logits), labels, np.ones((1, 2, 2), bool)).item() == pytest.approx(np.log(2), abs=1e-15)
    confident = np.where(labels[:, None] == np.array([0, 1])[None, :, None, None], 30.0, -30.0)
    assert ce_loss(ad.Tensor(confident), labels, np.ones((1, 2, 2), bool)).item() < 1e-20


def test_stde_is_rmse():
    pred, gt = np.array([0.0, 0.0, 3.0, 4.0]), np.zeros(4)
    assert stde(ad.Tensor(pred), gt, np.ones(4, bool)).item() == pytest.approx(2.5)


def test_metric_examples():
    e = np.array([1.0, -1.0, 2.0, -2.0])
    m = regression_metrics(e, np.zeros(4), np.ones(4, bool))
    assert m["AME"] == 0.0 and m["MAE"] == 1.5
    assert m["RMSE"] == pytest.approx(np.sqrt(2.5)) and m["STDE"] == m["RMSE"]
    assert accuracy(np.array([1, 0, 1, 1]), np.array([1, 0, 0, 1]), np.ones(4, bool)) == 0.75
    assert metrics(np.array([1.0]), np.array([1.0]), np.array([True]), "LOS") == {"accuracy": 1.0}


def test_empty_mask_rejected():
    with pytest.raises(EmptyMaskError):
        l1_loss(ad.Tensor(np.ones(3)), np.ones(3), np.zeros(3, bool))
    with pytest.raises(EmptyMaskError):
        regression_metrics(np.ones(3), np.ones(3), np.zeros(3, bool))


# ------------------------------------------------------------------ oracles

def test_losses_match_loop_oracles(rng):
    for _ in range(20):
        pred, gt, mask = random_case(rng)
        assert abs(l1_loss(ad.Tensor(pred), gt, mask).item() - l1_loop(pred, gt, mask)) < 1e-12
        assert abs(stde(ad.Tensor(pred), gt, mask).item() - rmse_loop(pred, gt, mask)) < 1e-12
        logits = rng.standard_normal((2, 2, 6, 5)) * 3
        labels = (rng.random((2, 6, 5)) < 0.5).astype(float)
        assert abs(ce_loss(ad.Tensor(logits), labels, mask).item() - ce_loop(logits, labels, mask)) < 1e-12


def test_metrics_match_loop_oracles(rng):
    for _ in range(20):
        pred, gt, mask = random_case(rng)
        m = regression_metrics(pred, gt, mask)
        assert abs(m["MAE"] - l1_loop(pred, gt, mask)) < 1e-12
        assert abs(m["AME"] - ame_loop(pred, gt, mask)) < 1e-12
        assert abs(m["RMSE"] - rmse_loop(pred, gt, mask)) < 1e-12
        assert abs(m["STDE"] - rmse_loop(pred, gt, mask)) < 1e-12
        p, g = rng.random(pred.shape) < 0.5, rng.random(pred.shape) < 0.5
        assert abs(accuracy(p, g, mask) - accuracy_loop(p, g, mask)) < 1e-12


def test_loss_gradients(rng):
    pred, gt, mask = random_case(rng)
    p = ad.Tensor(pred, requires_grad=True)
    assert ad.gradient_check(lambda: l1_loss(p, gt, mask), [p]) < 1e-4
    assert ad.gradient_check(lambda: stde(p, gt, mask), [p]) < 1e-4
    logits = ad.Tensor(rng.standard_normal((2, 2, 6, 5)), requires_grad=True)
    labels = (rng.random((2, 6, 5)) < 0.5).astype(float)
    assert ad.gradient_check(lambda: ce_loss(logits, labels, mask), [logits]) < 1e-4


# --------------------------------------------------------------- properties

@settings(max_examples=1000, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_ame_mae_rmse_ordering(seed):
    rng = np.random.default_rng(seed)
    pred, gt, mask = random_case(rng, (4, 4), p_valid=rng.uniform(0.05, 1.0))
    m = regression_metrics(pred * rng.uniform(0, 10), gt, mask)
    assert 0 <= m["AME"] <= m["MAE"] * (1 + 1e-12)
    assert m["MAE"] <= m["RMSE"] * (1 + 1e-12)


@settings(max_examples=200, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_masked_pixels_never_matter(seed):
    rng = np.random.default_rng(seed)
    pred, gt, mask = random_case(rng)
    noise = np.where(mask, 0.0, rng.standard_normal(pred.shape) * 1e3)
    assert regression_metrics(pred + noise, gt, mask) == regression_metrics(pred, gt, mask)
    assert regression_metrics(pred, gt + noise, mask) == regression_metrics(pred, gt, mask)
    assert l1_loss(ad.Tensor(pred + noise), gt, mask).item() == l1_loss(ad.Tensor(pred), gt, mask).item()
    lab = (gt > 0).astype(float)
    assert accuracy(lab + (noise != 0), lab, mask) == 1.0


# ---------------------------------------------------------------- composite

def composite_inputs(rng):
    pred = {t: ad.Tensor(rng.standard_normal((2, 1, 4, 4)), requires_grad=True) for t in REGRESSION_TARGETS}
    pred["LOS"] = ad.Tensor(rng.standard_normal((2, 2, 4, 4)), requires_grad=True)
    gt = {t: rng.random((2, 4, 4)) for t in REGRESSION_TARGETS}
    gt["LOS"] = (rng.random((2, 4, 4)) < 0.5).astype(float)
    inside = rng.random((2, 4, 4)) < 0.3
    for t in TARGETS:
        gt[t][inside] = -0.1
    return pred, gt, ~inside


def test_composite_is_weighted_sum(rng):
    pred, gt, valid = composite_inputs(rng)
    w = LossWeights(regression={t: i + 1.0 for i, t in enumerate(REGRESSION_TARGETS)}, ce_weight=0.5, stde_weight=0.3)
    expected = 0.5 * ce_loop(pred["LOS"].data, gt["LOS"], valid)
    for i, t in enumerate(REGRESSION_TARGETS):
        p = pred[t].data[:, 0]
        expected += (i + 1) * l1_loop(p, gt[t], valid) + 0.3 * rmse_loop(p, gt[t], valid)
    assert abs(composite_loss(pred, gt, w).item() - expected) < 1e-12
    pc = list(pred.values())
    assert ad.gradient_check(lambda: composite_loss(pred, gt, w), pc) < 1e-4


def test_target_loss(rng):
    pred, gt, valid = composite_inputs(rng)
    p = pred["DS"].data[:, 0]
    expected = l1_loop(p, gt["DS"], valid) + 0.1 * rmse_loop(p, gt["DS"], valid)
    assert abs(target_loss(pred, gt, "DS").item() - expected) < 1e-12
    assert abs(target_loss(pred, gt, "LOS").item() - ce_loop(pred["LOS"].data, gt["LOS"], valid)) < 1e-12


def test_loss_weights_validation():
    with pytest.raises(ValueError):
        LossWeights(ce_weight=-1.0)
    with pytest.raises(ValueError):
        LossWeights(regression={t: 0.0 for t in REGRESSION_TARGETS}, ce_weight=0.0, stde_weight=0.0)


# ----------------------------------------------------------------- reports

def test_report_csv_round_trip():
    rows = {t: {"AME": 0.1 * i, "MAE": 0.2 * i + 1 / 3, "RMSE": 0.3 * i + 1, "STDE": 0.3 * i + 1}
            for i, t in enumerate(REGRESSION_TARGETS)}
    rows["LOS"] = {"accuracy": 0.987654321}
    rep = EvalReport(4, rows, 9, 0.7)
    text = rep.to_csv()
    assert text.splitlines()[0] == "target,AME,MAE,RMSE,STDE,accuracy,scale"
    back = EvalReport.from_csv(text)
    assert back.scale == 4 and back.los_accuracy == 0.987654321
    for t in REGRESSION_TARGETS:
        for k, v in rows[t].items():
            assert back.rows[t][k] == pytest.approx(v, rel=1e-8)
