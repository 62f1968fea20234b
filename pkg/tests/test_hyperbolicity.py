"""Cone invariance, expansion, distortion, curvature, hypothesis report."""

import math

import numpy as np
import pytest

from lorentzgas import ScattererConfig, ClassicalMap, config_metrics
from lorentzgas.curve_machinery import NormParams, sample_stable_curves
from lorentzgas.hyperbolicity import (ConeField, adapted_norm,
                                      check_cone_invariance, expansion_stats,
                                      distortion_constant,
                                      one_step_expansion_sum, calibrate_delta0,
                                      curvature_propagation,
                                      measure_jacobian_bound,
                                      verify_hypotheses)
from lorentzgas.classical_map import PhasePoint
from lorentzgas.errors import ValidationFailed


def four_disk():
    return ScattererConfig.from_dict({"scatterers": [
        {"R": 0.30, "center": [0.0, 0.0]},
        {"R": 0.30, "center": [0.5, 0.5]},
        {"R": 0.15, "center": [0.0, 0.5]},
        {"R": 0.15, "center": [0.5, 0.0]}]})


@pytest.fixture(scope="module")
def setup():
    cfg = four_disk()
    met = config_metrics(cfg)
    return cfg, met, ClassicalMap(cfg)


def test_cone_field_basics(setup):
    _, met, _ = setup
    cone = ConeField.unstable(met)
    assert cone.slope_lo == pytest.approx(met.K_min)
    assert cone.slope_hi == pytest.approx(met.K_max + 1.0 / met.tau_min)
    assert cone.contains(0.5 * (cone.slope_lo + cone.slope_hi))
    assert not cone.contains(cone.slope_lo - 1.0)
    narrow = cone.scaled(0.5)
    assert narrow.slope_hi - narrow.slope_lo == pytest.approx(
        0.5 * (cone.slope_hi - cone.slope_lo))
    with pytest.raises(ValidationFailed):
        ConeField("unstable", 2.0, 1.0)


def test_adapted_norm_vertical_is_euclidean():
    cfg = four_disk()
    x = PhasePoint(0, 0.2, 0.3)
    assert adapted_norm(x, [0.0, 0.7], cfg) == pytest.approx(0.7)
    # homogeneity of the norm
    a = adapted_norm(x, [1.0, -2.0], cfg)
    b = adapted_norm(x, [3.0, -6.0], cfg)
    assert b == pytest.approx(3 * a, rel=1e-12)


def test_cone_invariance_holds(setup):
    cfg, met, T = setup
    cone = ConeField.unstable(met)
    out = check_cone_invariance(T, cone, n_samples=4000, seed=1)
    assert out["failures"] == 0
    assert out["checked"] > 15000
    assert out["worst"]["margin"] >= 0


def test_narrowed_cone_fails(setup):
    """Negative control: a strictly smaller cone cannot be invariant."""
    cfg, met, T = setup
    cone = ConeField.unstable(met).scaled(0.5)
    out = check_cone_invariance(T, cone, n_samples=4000, seed=1)
    assert out["failures"] > 0


def test_expansion_floor(setup):
    cfg, met, T = setup
    cone = ConeField.unstable(met)
    st = expansion_stats(T, cone, n_samples=4000, seed=2)
    floor = 1.0 + met.K_min * met.tau_min
    assert st["Lambda_measured"] >= floor - 1e-6
    # expansion * cos(phi1) stays flat, so expansion ~ 1/cos(phi1)
    assert abs(st["grazing_fit"]["slope"]) < 0.5


def test_one_step_sum_below_one(setup):
    cfg, met, T = setup
    params = NormParams()
    curves = sample_stable_curves(cfg, met, 8, params, seed=3)
    for w in curves:
        s = one_step_expansion_sum(T, w, params)
        assert 0.0 < s["sum_star"] < 1.0
        assert np.isfinite(s["sum_sigma"])


def test_calibrated_delta0(setup):
    cfg, met, T = setup
    d0, worst = calibrate_delta0(T, met, n_curves=10, target=0.9, seed=0,
                                 iters=5)
    assert d0 > 2e-3
    assert worst <= 0.9


def test_distortion_estimate_and_refinement(setup):
    cfg, met, T = setup
    curves = sample_stable_curves(cfg, met, 15, NormParams(), seed=4)
    a = distortion_constant(T, curves, n=3, pairs_per_curve=20, seed=5)
    assert a["pairs"] > 100
    assert 0 < a["C_d_W"] <= a["C_d_W_sup"]
    assert 0 <= a["C_d_mu"] <= a["C_d_mu_sup"]
    # the quantile estimate stays the same order when pairs double
    # (the acceptance suite checks the tighter bound at full scale)
    b = distortion_constant(T, curves, n=3, pairs_per_curve=40, seed=5)
    assert abs(b["C_d_W"] - a["C_d_W"]) <= 0.5 * a["C_d_W"]


def test_measure_jacobian_identity(setup):
    cfg, met, T = setup
    mj = measure_jacobian_bound(T, n_samples=800, seed=6)
    assert mj["eta_measured"] == pytest.approx(1.0, abs=1e-8)


def test_curvature_propagation_bounded(setup):
    cfg, met, T = setup
    rr = np.linspace(0.30, 0.34, 33)
    phi = 0.1 + 4.0 * (rr - rr[0])  # unstable-cone slope on scatterer 0
    out = curvature_propagation(T, (0, rr, phi), n=3, centers=4)
    assert len(out) == 4
    assert out[0] == pytest.approx(0.0, abs=1e-6)
    finite = [v for v in out[1:] if not math.isnan(v)]
    assert len(finite) >= 2
    assert max(finite) < 500.0


def test_hypothesis_report(setup):
    cfg, met, T = setup
    params = NormParams()
    rep = verify_hypotheses(T, met, params, n_samples=4000, n_curves=10,
                            seed=0)
    assert set(rep.results) == {"H1", "H2", "H3", "H4", "H5"}
    assert rep.all_passed
    d = rep.to_dict()
    assert d["all_passed"]
    assert d["hypotheses"]["H2"]["constants"]["Lambda_measured"] >= 1.0
