from __future__ import annotations

import numpy as np
import pytest
from scipy.optimize import brentq

from bohmsim.bohm import (
    Fate,
    IntegratorConfig,
    QuantileBridge,
    SingularityError,
    bridge_for,
    classify_at_slits,
    fresnel_time,
    incident_quantile,
    integrate_post_slit,
    output_times,
    preslit_position,
    run_batch,
    velocity,
)
from bohmsim.core import C60, CODATA, Aperture, ApertureSet, BeamConfig, TransmissionMode, sigma_t
from bohmsim.propagator import FreeField, SlitField


def starts_at_quantiles(ctx, q):
    lo, hi = ctx.apertures.lefts[0], ctx.apertures.rights[-1]
    return np.array([brentq(lambda x: incident_quantile(x, ctx) - v, lo, hi, xtol=1e-22) for v in q])


def quantile_of(bridge, x):
    return np.interp(x, bridge.x, bridge.cdf)


def test_free_velocity_analytic():
    beam = BeamConfig()
    fld = FreeField(beam, C60)
    nu = CODATA.hbar / (2 * C60.mass * beam.sigma0**2)
    x, t = np.linspace(-4e-6, 4e-6, 9), 3e-3
    expected = x * nu * nu * t / (1 + (nu * t) ** 2)
    assert np.allclose(velocity(x, t, fld), expected, rtol=1e-10, atol=1e-20)


def test_velocity_raises_in_empty_region():
    with pytest.raises(SingularityError):
        velocity(np.array([1e-3]), 1e-3, FreeField(BeamConfig(), C60))


def test_preslit_path_matches_integration():
    beam = BeamConfig()
    fld = FreeField(beam, C60)
    x0 = np.linspace(-5e-6, 5e-6, 11)
    t_out = np.linspace(0.0, 5e-3, 6)
    _, x, _, status, _ = run_batch(x0, fld, 0.0, 5e-3, IntegratorConfig(), t_out)
    assert not status.any()
    exact = preslit_position(x0[:, None], t_out[None, :], beam, C60)
    assert np.allclose(x, exact, rtol=1e-7, atol=1e-14)


def test_classify_at_slits(plate):
    assert classify_at_slits(0.0, plate, C60) is Fate.TRANSMITTED_A
    assert classify_at_slits(150.5e-9, plate, C60) is Fate.BLOCKED_BY_SIZE
    # gap between two grating slits
    assert classify_at_slits(150.0e-9, plate, C60) is Fate.BLOCKED_PLATE
    assert classify_at_slits(1e-6, plate, C60) is Fate.BLOCKED_PLATE
    point = C60.__class__("point", C60.mass, 0.0)
    assert classify_at_slits(150.5e-9, plate, point) is Fate.TRANSMITTED_B
    assert classify_at_slits(24.9e-9, plate, C60, TransmissionMode.HARD_SPHERE_MARGIN) is Fate.BLOCKED_BY_SIZE


def test_fate_labels():
    assert Fate.TRANSMITTED_A.transmitted and not Fate.BLOCKED_BY_SIZE.transmitted
    assert Fate.ABORTED_STEP_UNDERFLOW.label == "AbortedStepUnderflow"


def test_output_times():
    t = output_times(5e-3, 11.25e-3)
    assert t[0] == 5e-3 and t[-1] == 11.25e-3
    assert np.all(np.diff(t) > 0)


def test_integrator_config_validation():
    with pytest.raises(ValueError):
        IntegratorConfig(dt_min=1.0, dt_max=0.5)
    with pytest.raises(ValueError):
        IntegratorConfig(bridge_time=-1.0)
    with pytest.raises(ValueError):
        IntegratorConfig(rel_tol=0.0)


def test_fresnel_time(plate):
    assert fresnel_time(plate, C60) == pytest.approx(C60.mass * (224.75e-9) ** 2 / CODATA.h, rel=1e-12)


def test_incident_quantile_edges(ctx_sa1):
    aps = ctx_sa1.apertures
    assert incident_quantile(aps.lefts[0] - 1e-9, ctx_sa1) == 0.0
    assert incident_quantile(aps.rights[-1] + 1e-9, ctx_sa1) == pytest.approx(1.0, abs=1e-15)
    # slit A carries half the open width of a nearly flat incident density
    assert incident_quantile(aps.rights[0], ctx_sa1) == pytest.approx(0.5, abs=5e-3)
    q = incident_quantile(np.linspace(-30e-9, 210e-9, 500), ctx_sa1)
    assert np.all(np.diff(q) >= 0)


def test_bridge_inverts_its_cdf(field_sa1):
    b = QuantileBridge.build(field_sa1, 5e-5)
    idx = np.linspace(1, b.x.size - 2, 101).astype(int)
    # compared in probability: positions are ill-defined where the density vanishes
    assert np.max(np.abs(quantile_of(b, b.position(b.cdf[idx])) - b.cdf[idx])) < 1e-12
    q = np.linspace(0.0, 1.0, 1001)[1:-1]
    assert np.all(np.diff(b.position(q)) > 0)
    assert 0 <= b.tail < 0.01
    assert b.cdf[0] == pytest.approx(b.tail) and b.cdf[-1] == pytest.approx(1 - b.tail, abs=1e-9)


def test_bridge_cached(field_sa1, times):
    icfg = IntegratorConfig()
    assert bridge_for(field_sa1, icfg, times[1]) is bridge_for(field_sa1, icfg, times[1])
    assert bridge_for(field_sa1, IntegratorConfig(bridge_time=0.0), times[1]) is None


def test_slit_a_trajectories_follow_quantiles(ctx_a, times):
    """Flux conservation: a trajectory keeps the mass to its left."""
    fld = SlitField(ctx_a)
    q0 = np.linspace(0.02, 0.98, 25)
    x_t1 = starts_at_quantiles(ctx_a, q0)
    oracle = QuantileBridge.build(fld, times[1] - ctx_a.t1)
    _, x, _, status, _ = run_batch(x_t1, fld, ctx_a.t1, times[1], IntegratorConfig())
    assert not status.any()
    assert np.max(np.abs(x[:, -1] - oracle.position(q0))) < 0.5e-6
    # the bare integrator, without the near-field map, at tight tolerances;
    # the outermost edge-diffracted paths need the map and are left out
    tight = IntegratorConfig(bridge_time=0.0, rel_tol=1e-9, abs_tol=1e-12)
    inner = slice(1, -1)
    _, x, _, status, _ = run_batch(x_t1[inner], fld, ctx_a.t1, times[1], tight)
    assert not status.any()
    assert np.max(np.abs(x[:, -1] - oracle.position(q0[inner]))) < 2e-6


def test_sa1_trajectories_follow_quantiles(ctx_sa1, field_sa1, times):
    q0 = np.linspace(0.01, 0.99, 40)
    x_t1 = starts_at_quantiles(ctx_sa1, q0)
    oracle = QuantileBridge.build(field_sa1, times[1] - ctx_sa1.t1)
    _, x, _, status, _ = run_batch(x_t1, field_sa1, ctx_sa1.t1, times[1], IntegratorConfig())
    assert not status.any()
    err = np.abs(quantile_of(oracle, x[:, -1]) - q0)
    assert np.median(err) < 1e-3
    assert np.max(err) < 1e-2


def test_no_crossing_within_batch(ctx_sa1, field_sa1, times):
    grating = ctx_sa1.apertures.lefts[1:] + 0.25e-9
    x_t1 = np.concatenate([np.linspace(-24.9e-9, 24.9e-9, 60), grating[::2]])
    _, x, _, status, _ = run_batch(x_t1, field_sa1, ctx_sa1.t1, times[1], IntegratorConfig())
    assert not status.any()
    assert np.all(np.diff(x, axis=0) >= 0)


def test_integrate_post_slit(ctx_a, times):
    tr = integrate_post_slit(1e-9, SlitField(ctx_a), IntegratorConfig(), times[1])
    assert tr.t[0] == ctx_a.t1 and tr.t[-1] == times[1]
    assert tr.x[0] == 1e-9
    assert np.all(np.isfinite(tr.x))
    assert len(tr.samples) == tr.t.size


def test_bridge_rejects_bad_tau(field_sa1):
    with pytest.raises(ValueError):
        QuantileBridge.build(field_sa1, 0.0)


def test_preslit_position_scales_with_width():
    beam = BeamConfig()
    t = 5e-3
    assert preslit_position(1e-6, t, beam, C60) == pytest.approx(1e-6 * float(sigma_t(t, beam, C60)) / beam.sigma0)


def test_close_pair_keeps_order(ctx_a, times):
    # 22 pm apart near the edge of slit A; the bridge leaves them 0.5 nm apart
    x_t1 = np.array([-2.2212676335681808e-08, -2.219042639070917e-08])
    _, x, _, status, _ = run_batch(x_t1, SlitField(ctx_a), ctx_a.t1, times[1], IntegratorConfig())
    assert not status.any()
    assert np.all(np.diff(x, axis=0) > 0)
