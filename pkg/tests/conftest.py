from __future__ import annotations

import numpy as np
import pytest

from bohmsim.config import ExperimentConfig
from bohmsim.core import C60, Aperture, ApertureSet, BeamConfig, GeometryConfig, make_grating
from bohmsim.propagator import PropagationContext, SlitField
from bohmsim.scenarios import build_scenario, run_scenario


@pytest.fixture(scope="session")
def cfg():
    return ExperimentConfig()


@pytest.fixture(scope="session")
def plate():
    return ApertureSet([Aperture(0.0, 50e-9, "A")]) | make_grating(150e-9, 100, 0.5e-9, 1e-9, "B")


@pytest.fixture(scope="session")
def times():
    geo = GeometryConfig()
    return geo.t1(200.0), geo.t2(200.0)


@pytest.fixture(scope="session")
def ctx_sa1(plate, times):
    return PropagationContext.build(plate, BeamConfig(), C60, times[0])


@pytest.fixture(scope="session")
def ctx_a(times):
    return PropagationContext.build(ApertureSet([Aperture(0.0, 50e-9, "A")]), BeamConfig(), C60, times[0])


@pytest.fixture(scope="session")
def field_sa1(ctx_sa1):
    return SlitField(ctx_sa1)


@pytest.fixture(scope="session")
def density_results(cfg):
    """Density-only results for every scenario kind at the default config."""
    return {k: run_scenario(build_scenario(k, cfg), n_trajectories=0) for k in ("sa1", "sa2", "bb", "diffraction")}


@pytest.fixture(scope="session")
def rng():
    return np.random.default_rng(20240611)
