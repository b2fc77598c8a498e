"""Bohmian trajectory simulation of C60 matter waves through an asymmetric slit plate."""

from __future__ import annotations

__version__ = "0.1.0"

from .config import ConfigError, ExperimentConfig
from .core import CODATA, Aperture, ApertureSet, BeamConfig, GeometryConfig, ParticleSpecies, PhysicalConstants
from .scenarios import ScenarioKind, build_scenario, run_scenario

__all__ = [
    "CODATA",
    "Aperture",
    "ApertureSet",
    "BeamConfig",
    "ConfigError",
    "ExperimentConfig",
    "GeometryConfig",
    "ParticleSpecies",
    "PhysicalConstants",
    "ScenarioKind",
    "build_scenario",
    "run_scenario",
]
