from __future__ import annotations

import dataclasses

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from bohmsim.bohm import Fate
from bohmsim.config import ExperimentConfig, GratingConfig, SlitConfig
from bohmsim.scenarios import (
    ParticleFilter,
    ScenarioKind,
    asymmetry_metric,
    build_scenario,
    detect_peaks,
    lateral_fraction,
    run_scenario,
    smear_velocity,
)
from bohmsim.ensemble import histogram


def test_wiring(cfg):
    sa1 = build_scenario("sa1", cfg)
    assert len(sa1.wave_apertures) == 101 and sa1.particle_filter is ParticleFilter.NONE
    sa2 = build_scenario(ScenarioKind.SA2, cfg)
    assert [a.label for a in sa2.wave_apertures] == ["A"]
    bb = build_scenario("bb", cfg)
    assert len(bb.wave_apertures) == 101 and bb.particle_filter is ParticleFilter.SIZE_AWARE
    diff = build_scenario("diffraction", cfg)
    assert diff.wave_apertures == sa2.wave_apertures
    with pytest.raises(ValueError, match="sa1, sa2, bb, diffraction"):
        build_scenario("sa9", cfg)


def test_sa2_null_prediction():
    cfg = ExperimentConfig(slit_a=SlitConfig(width=0.8e-9))
    spec = build_scenario("sa2", cfg)
    assert spec.null_prediction and len(spec.wave_apertures) == 0
    res = run_scenario(spec, n_trajectories=50)
    assert res.transmitted_fraction == 0.0
    assert res.peaks["global"] == []
    assert res.histogram is None
    assert res.fate_tallies["BlockedBySize"] > 0
    assert res.fate_tallies["TransmittedA"] == 0


def test_classifier(cfg):
    sa1, sa2, bb = (build_scenario(k, cfg) for k in ("sa1", "sa2", "bb"))
    assert sa1.classify(150.5e-9) is Fate.TRANSMITTED_B
    assert sa2.classify(150.5e-9) is Fate.BLOCKED_BY_SIZE
    assert bb.classify(150.5e-9) is Fate.BLOCKED_BY_SIZE
    for spec in (sa1, sa2, bb):
        assert spec.classify(0.0) is Fate.TRANSMITTED_A
        assert spec.classify(1e-6) is Fate.BLOCKED_PLATE


def test_bb_wave_equals_sa1(density_results):
    a, b = density_results["sa1"].grids, density_results["bb"].grids
    for w in ("global", "zoom"):
        assert np.max(np.abs(a[w].psi - b[w].psi)) <= 1e-12 * np.max(np.abs(a[w].psi))


def test_sa2_symmetric(density_results):
    g = density_results["sa2"].grids["global"]
    assert abs(asymmetry_metric(g.x, g.rho)) < 1e-3


def test_sa2_lateral_fraction_small(density_results):
    assert density_results["sa2"].metrics["lateral_fraction"] < 0.05


def test_detect_peaks_simple():
    x = np.linspace(-10, 10, 2001)
    rho = np.exp(-((x - 3) ** 2) / 2) + 0.5 * np.exp(-((x + 4) ** 2) / 2) + 0.001 * np.exp(-(x**2) / 0.01)
    peaks = detect_peaks(x, rho, 0.01, 1.0)
    assert [round(p.position, 6) for p in peaks] == [-4.0, 3.0]
    assert peaks[1].height == pytest.approx(1.0, rel=1e-6)
    assert peaks[1].fwhm == pytest.approx(2 * np.sqrt(2 * np.log(2)), rel=1e-4)
    # separation: only the taller of two close maxima survives
    assert len(detect_peaks(x, rho, 0.01, 8.0)) == 1


def test_detect_peaks_parabolic_refinement():
    x = np.linspace(0, 1, 11)
    rho = -((x - 0.53) ** 2) + 1
    (p,) = detect_peaks(x, rho, 0.5, 0.1)
    assert p.position == pytest.approx(0.53, abs=1e-12)


def test_detect_peaks_errors():
    with pytest.raises(ValueError):
        detect_peaks(np.linspace(0, 1, 5), np.zeros(5), 0.1, 0.1)
    with pytest.raises(ValueError):
        detect_peaks(np.array([0.0, 2.0, 1.0]), np.ones(3), 0.1, 0.1)


@settings(max_examples=40, deadline=None)
@given(st.lists(st.floats(0.0, 1.0), min_size=5, max_size=80), st.floats(0.0, 1.0))
def test_detect_peaks_properties(values, thr):
    rho = np.array(values)
    x = np.arange(rho.size, dtype=float)
    if not rho.max() > 0:
        return
    peaks = detect_peaks(x, rho, thr, 2.0)
    pos = [p.position for p in peaks]
    assert pos == sorted(pos)
    assert all(b - a >= 2.0 - 1.0 for a, b in zip(pos, pos[1:]))
    assert all(p.fwhm >= 0 for p in peaks)


def test_asymmetry_metric():
    x = np.linspace(-1, 1, 401)
    assert asymmetry_metric(x, np.exp(-(x**2))) == pytest.approx(0.0, abs=1e-12)
    assert asymmetry_metric(x, (x > 0).astype(float)) == pytest.approx(1.0, abs=1e-2)
    h = histogram([0.3, 0.4], (-1.0, 1.0), 4)
    assert asymmetry_metric(h) == 1.0
    # a bin straddling zero is split
    assert asymmetry_metric(histogram([0.0], (-1.0, 1.0), 3)) == pytest.approx(0.0)
    with pytest.raises(ValueError):
        asymmetry_metric(x, np.zeros_like(x))


def test_lateral_fraction():
    x = np.linspace(-5, 5, 1001)
    rho = np.ones_like(x)
    assert lateral_fraction(x, rho, 0.0) == pytest.approx(1.0)
    assert lateral_fraction(x, rho, 2.5) == pytest.approx(0.5)
    assert lateral_fraction(x, rho, 2.5, total_mass=20.0) == pytest.approx(0.75)
    with pytest.raises(ValueError):
        lateral_fraction(x, rho, 6.0)
    with pytest.raises(ValueError):
        lateral_fraction(x, rho, -1.0)


def test_peaks_sorted_and_metrics_in_range(density_results):
    for res in density_results.values():
        for peaks in res.peaks.values():
            pos = [p.position for p in peaks]
            assert pos == sorted(pos)
        assert 0 <= res.metrics["lateral_fraction"] <= 1
        assert -1 <= res.metrics["asymmetry_density"] <= 1


def test_windows_subset(cfg):
    res = run_scenario(build_scenario("sa2", cfg), n_trajectories=0, windows=("zoom",))
    assert list(res.grids) == ["zoom"]
    assert "lateral_fraction" in res.metrics


def test_zoom_window_side_fringes(density_results):
    pos = [p.position for p in density_results["sa1"].peaks["zoom"]]
    assert len(pos) == 3
    assert pos[0] == pytest.approx(-20.8e-6, abs=0.5e-6) and pos[2] == pytest.approx(20.9e-6, abs=0.5e-6)


def test_smear_zero_spread_is_identity(cfg, density_results):
    spec = build_scenario("sa1", cfg)
    sm = smear_velocity(spec, 1, 0.0, seed=0)
    base = density_results["sa1"]
    for w in ("global", "zoom"):
        assert np.array_equal(sm.grids[w].rho, base.grids[w].rho)
    assert sm.transmitted_fraction == base.transmitted_fraction


def test_smear_mixture_mass(cfg):
    spec = build_scenario("sa2", cfg)
    sm = smear_velocity(spec, 5, 0.05 * cfg.beam.v_y, windows=("global",))
    assert sm.weights.sum() == pytest.approx(1.0)
    # the mixture integrates to the weighted transmitted fraction (minus the far tails)
    g = sm.grids["global"]
    mass = np.trapezoid(g.rho, g.x)
    assert 0.99 * sm.transmitted_fraction < mass < sm.transmitted_fraction


def test_smear_zero_spread_histogram_matches_base(cfg):
    spec = build_scenario("sa1", cfg)
    sm = smear_velocity(spec, 3, 0.0, seed=4, n_trajectories=60)
    base = run_scenario(spec, n_trajectories=60, seed=4)
    assert np.array_equal(sm.histogram.counts, base.histogram.counts)


def test_small_run_fates(cfg):
    res = run_scenario(build_scenario("bb", cfg), n_trajectories=100, seed=3)
    t = res.fate_tallies
    assert t["TransmittedA"] > 0 and t["BlockedBySize"] > 0
    assert t["TransmittedB"] == 0 and t["BlockedPlate"] == 0
    assert res.metrics["aborted_fraction"] == 0.0


def test_point_particle_bb_equals_sa1(cfg):
    point = dataclasses.replace(cfg.species, diameter=0.0, name="point")
    c = dataclasses.replace(cfg, species=point)
    a = run_scenario(build_scenario("sa1", c), n_trajectories=60, seed=1)
    b = run_scenario(build_scenario("bb", c), n_trajectories=60, seed=1)
    assert np.array_equal(a.histogram.counts, b.histogram.counts)


def test_no_grating_config():
    cfg = ExperimentConfig(grating=GratingConfig(n_slits=0))
    assert len(build_scenario("sa1", cfg).wave_apertures) == 1
