import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from omnikit import autodiff as ad
from omnikit import objective as obj
from omnikit.autodiff import Tensor
from oracles import random_unit_field, ref_depth, ref_normals


# -- berHu ------------------------------------------------------------------------


def test_berhu_zero_at_equality(rng):
    g = rng.uniform(size=(4, 4))
    assert float(obj.berhu(Tensor(g), g).data) == 0.0


def test_berhu_hand_example(f64):
    # residuals {0.1, 1.0}: c = 0.2; mean(0.1, (1 + 0.04) / 0.4) = 1.35
    v = float(obj.berhu(Tensor([0.1, 1.0]), np.zeros(2)).data)
    assert v == pytest.approx(1.35, abs=1e-12)


def test_berhu_equals_l1_when_all_residuals_below_c(rng, f64):
    p, g = rng.uniform(size=(3, 5)), rng.uniform(size=(3, 5))
    mask = rng.random((3, 5)) < 0.6
    mask[0, 0] = True
    v = float(obj.berhu(Tensor(p), g, mask, c=2.0).data)
    assert v == pytest.approx(np.abs(p - g)[mask].mean(), abs=1e-14)


@pytest.mark.parametrize("c", [0.05, 0.3, 1.0])
def test_berhu_continuous_at_threshold(f64, c):
    at = float(obj.berhu(Tensor([c]), np.zeros(1), c=c).data)
    above = float(obj.berhu(Tensor([c + 1e-12]), np.zeros(1), c=c).data)
    assert at == pytest.approx(c, abs=1e-12)
    assert abs(above - at) < 1e-9


def test_berhu_quadratic_branch_formula(f64):
    v = float(obj.berhu(Tensor([0.9]), np.zeros(1), c=0.3).data)
    assert v == pytest.approx((0.81 + 0.09) / 0.6)


def test_berhu_masked_mean_ignores_masked_pixels(rng, f64):
    p, g = rng.uniform(size=6), rng.uniform(size=6)
    mask = np.array([1, 1, 0, 1, 0, 0], bool)
    full = float(obj.berhu(Tensor(p[mask]), g[mask]).data)
    assert float(obj.berhu(Tensor(p), g, mask).data) == pytest.approx(full, abs=1e-15)


def test_berhu_empty_mask():
    with pytest.raises(ValueError, match="no pixels"):
        obj.berhu(Tensor(np.ones(3)), np.zeros(3), np.zeros(3, bool))


# -- L1 normals ---------------------------------------------------------------------


def test_l1_normal_zero_at_equality(rng):
    g = rng.uniform(size=(1, 3, 4, 8))
    assert float(obj.l1_normal(Tensor(g), g, np.ones((1, 4, 8), bool)).data) == 0.0


def test_l1_normal_constant_offset(rng, f64):
    g = rng.uniform(0, 0.8, size=(2, 3, 4, 8))
    valid = rng.random((2, 4, 8)) < 0.5
    v = float(obj.l1_normal(Tensor(g + 0.1), g, valid).data)
    assert v == pytest.approx(0.1, abs=1e-12)


def test_l1_normal_matches_pixel_loop(rng, f64):
    p, g = rng.uniform(size=(2, 3, 4, 8)), rng.uniform(size=(2, 3, 4, 8))
    valid = rng.random((2, 4, 8)) < 0.7
    total, n = 0.0, 0
    for b in range(2):
        for i in range(4):
            for j in range(8):
                if valid[b, i, j]:
                    for c in range(3):
                        total += abs(p[b, c, i, j] - g[b, c, i, j])
                        n += 1
    assert float(obj.l1_normal(Tensor(p), g, valid).data) == pytest.approx(total / n, abs=1e-9)


def test_l1_normal_empty_mask(rng):
    with pytest.raises(ValueError):
        obj.l1_normal(Tensor(np.ones((1, 3, 2, 2))), np.ones((1, 3, 2, 2)), np.zeros((1, 2, 2), bool))


# -- total loss ---------------------------------------------------------------------


class _Pred:
    def __init__(self, d, n):
        self.depth01, self.normal01 = d, n


def _target(rng, B=1, H=4, W=8):
    return {"depth01": rng.uniform(0.05, 1, size=(B, 1, H, W)), "normal01": rng.uniform(size=(B, 3, H, W)),
            "normal_valid": rng.random((B, H, W)) < 0.7}


def test_total_loss_zero_when_both_terms_zero(rng):
    t = _target(rng)
    terms = obj.total_loss(_Pred(Tensor(t["depth01"]), Tensor(t["normal01"])), t)
    assert float(terms.total.data) == 0.0


def test_total_loss_is_unweighted_sum(rng, f64):
    t = _target(rng)
    d, n = Tensor(rng.uniform(size=(1, 1, 4, 8))), Tensor(rng.uniform(size=(1, 3, 4, 8)))
    terms = obj.total_loss(_Pred(d, n), t)
    ld = float(obj.berhu(d, t["depth01"]).data)
    ln = float(obj.l1_normal(n, t["normal01"], t["normal_valid"]).data)
    assert float(terms.total.data) == ld + ln
    assert float(terms.depth.data) == ld and float(terms.normal.data) == ln


def test_total_loss_gradient_check(rng, f64):
    t = _target(rng)
    d = Tensor(rng.uniform(size=(1, 1, 4, 8)), True)
    n = Tensor(rng.uniform(size=(1, 3, 4, 8)), True)
    rep = ad.grad_check(lambda: obj.total_loss(_Pred(d, n), t).total, {"depth": d, "normal": n})
    assert rep.passed, rep.summary()


def test_berhu_gradient_check_eps_1e3(rng, f64):
    p = Tensor(rng.uniform(size=(2, 2)), True)
    g = rng.uniform(size=(2, 2))
    rep = ad.grad_check(lambda: obj.berhu(p, g), {"p": p}, eps=1e-3)
    assert rep.passed, rep.summary()


# -- depth metrics ---------------------------------------------------------------------


def test_depth_metrics_identity(rng):
    g = rng.uniform(0.01, 1, size=(4, 8))
    m = obj.depth_metrics(g, g)
    assert (m["rmse"], m["mre"], m["rmse_log"]) == (0.0, 0.0, 0.0)
    assert (m["delta1"], m["delta2"], m["delta3"]) == (1.0, 1.0, 1.0)


def test_depth_metrics_hand_example():
    m = obj.depth_metrics(np.array([1.0, 0.5]), np.array([0.5, 0.5]))
    ref = ref_depth([1.0, 0.5], [0.5, 0.5])
    expected = {"rmse": np.sqrt(0.125), "mre": 0.5, "rmse_log": np.log(2) / np.sqrt(2), "delta1": 0.5, "delta2": 0.5, "delta3": 0.5}
    for k, v in expected.items():
        assert m[k] == pytest.approx(v, abs=1e-12)
        assert m[k] == pytest.approx(ref[k], abs=1e-12)


def test_depth_metrics_uniform_scaling():
    g = np.linspace(0.1, 0.8, 20)
    m = obj.depth_metrics(np.minimum(1.2 * g, 1.0), g)
    assert m["delta1"] == 1.0
    assert m["mre"] == pytest.approx(0.2)


def test_depth_metrics_match_reference_on_100_samples():
    rng = np.random.default_rng(99)
    for _ in range(100):
        g = rng.uniform(0, 1, size=(16, 32))
        p = np.clip(g * rng.uniform(0.5, 1.6, size=g.shape), 0, 1)
        m, r = obj.depth_metrics(p, g), ref_depth(p, g)
        for k in r:
            assert abs(m[k] - r[k]) <= 1e-9, k


def test_depth_metrics_prediction_below_eps_is_delta_failure():
    m = obj.depth_metrics(np.array([0.0, 0.5]), np.array([0.5, 0.5]))
    assert m["delta3"] == 0.5


def test_depth_metrics_empty_mask():
    with pytest.raises(ValueError):
        obj.depth_metrics(np.ones(3), np.zeros(3))


@settings(max_examples=40, deadline=None)
@given(arrays(np.float64, (6, 8), elements=st.floats(0, 1)), arrays(np.float64, (6, 8), elements=st.floats(0.01, 1)))
def test_delta_monotone(p, g):
    m = obj.depth_metrics(p, g)
    assert m["delta1"] <= m["delta2"] <= m["delta3"]


# -- normal metrics --------------------------------------------------------------------


def test_normal_metrics_identity(rng):
    n = (random_unit_field(rng, 4, 8) + 1) / 2
    m = obj.normal_metrics(n, n, np.ones((4, 8), bool))
    assert m["mean_deg"] < 1e-5 and m["rmse_deg"] < 1e-5
    assert (m["acc5"], m["acc7_5"], m["acc11_25"]) == (1.0, 1.0, 1.0)


def test_normal_metrics_constant_ten_degrees():
    t = math.radians(10)
    gt = np.broadcast_to([0.0, 0.0, 1.0], (4, 8, 3))
    pred = np.broadcast_to([math.sin(t), 0.0, math.cos(t)], (4, 8, 3))
    m = obj.normal_metrics((pred + 1) / 2, (gt + 1) / 2, np.ones((4, 8), bool))
    for k in ("mean_deg", "median_deg", "rmse_deg"):
        assert m[k] == pytest.approx(10.0, abs=1e-9)
    assert (m["acc5"], m["acc7_5"], m["acc11_25"]) == (0.0, 0.0, 1.0)


def test_zero_prediction_counts_as_ninety_degrees():
    pred = np.full((1, 1, 3), 0.5)  # decodes to the zero vector
    gt = np.array([[[0.5, 1.0, 0.5]]])
    assert obj.normal_metrics(pred, gt, np.ones((1, 1), bool))["mean_deg"] == 90.0


def test_normal_metrics_match_reference_on_100_samples():
    rng = np.random.default_rng(7)
    for _ in range(100):
        g = random_unit_field(rng, 16, 32)
        p = g + rng.normal(0, 0.2, size=g.shape)
        valid = rng.random((16, 32)) < 0.8
        p01, g01 = (p + 1) / 2, (g + 1) / 2
        m, r = obj.normal_metrics(p01, g01, valid), ref_normals(p01, g01, valid)
        for k in r:
            assert abs(m[k] - r[k]) <= 1e-9, k


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_angular_accuracy_monotone_and_bounded(seed):
    rng = np.random.default_rng(seed)
    p, g = rng.uniform(size=(4, 6, 3)), rng.uniform(size=(4, 6, 3))
    m = obj.normal_metrics(p, g, np.ones((4, 6), bool))
    assert m["acc5"] <= m["acc7_5"] <= m["acc11_25"]
    for k in ("mean_deg", "median_deg", "rmse_deg"):
        assert 0.0 <= m[k] <= 180.0


@pytest.mark.parametrize("k", [1, 7, 31])
def test_metrics_invariant_under_paired_column_shift(k):
    rng = np.random.default_rng(k)
    g = rng.uniform(0, 1, size=(16, 32))
    p = rng.uniform(0, 1, size=(16, 32))
    assert obj.depth_metrics(np.roll(p, k, 1), np.roll(g, k, 1)) == obj.depth_metrics(p, g)
    n_p, n_g = rng.uniform(size=(16, 32, 3)), rng.uniform(size=(16, 32, 3))
    valid = rng.random((16, 32)) < 0.8
    a = obj.normal_metrics(n_p, n_g, valid)
    b = obj.normal_metrics(np.roll(n_p, k, 1), np.roll(n_g, k, 1), np.roll(valid, k, 1))
    assert a == b


# -- report -----------------------------------------------------------------------------


def test_report_columns_follow_table_layout():
    titles = [t for _, t in obj.MetricReport.COLUMNS]
    assert titles == ["RMSE", "MRE", "RMSE log", "d1<1.25", "d2<1.25^2", "d3<1.25^3",
                      "Mean", "Median", "RMSE", "5.0°", "7.5°", "11.25°"]


def test_report_mean_and_table(rng):
    a = obj.MetricReport(rmse=0.1, acc5=0.5)
    b = obj.MetricReport(rmse=0.3, acc5=1.0)
    m = obj.MetricReport.mean_of([a, b])
    assert m.rmse == pytest.approx(0.2) and m.acc5 == pytest.approx(0.75)
    table = obj.format_table({"x": m})
    assert "75.00" in table and table.splitlines()[0].split()[1] == "RMSE"


def test_report_json_roundtrip():
    import json

    r = obj.MetricReport(rmse=0.25, median_deg=3.0)
    doc = json.loads(obj.report_json(r, model="ubotnet", split="test", step=3))
    assert doc["metrics"]["rmse"] == 0.25 and doc["model"] == "ubotnet" and doc["step"] == 3
