"""Experiment configuration: one JSON document, echoed verbatim into run manifests."""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

from .bohm import IntegratorConfig
from .core import (
    SPECIES_PRESETS,
    Aperture,
    ApertureSet,
    BeamConfig,
    GeometryConfig,
    ParticleSpecies,
    PhysicalConstants,
    TransmissionMode,
    make_grating,
)
from .ensemble import SamplingMode


class ConfigError(ValueError):
    pass


SCENARIO_NAMES = ("sa1", "sa2", "bb", "diffraction")
WINDOW_NAMES = ("global", "zoom")


@dataclass(frozen=True)
class SlitConfig:
    center: float = 0.0
    width: float = 50e-9


@dataclass(frozen=True)
class GratingConfig:
    center: float = 150e-9
    n_slits: int = 100
    width: float = 0.5e-9
    period: float = 1e-9


@dataclass(frozen=True)
class SamplingConfig:
    n_trajectories: int = 1000
    mode: str = SamplingMode.CONDITIONED.value
    seed: int = 0
    threads: int | str = 1

    def __post_init__(self):
        if self.n_trajectories < 0:
            raise ValueError("n_trajectories must be >= 0")
        SamplingMode(self.mode)


@dataclass(frozen=True)
class AnalysisConfig:
    global_half_width: float = 5e-3
    global_points: int = 4096
    global_threshold: float = 0.01
    global_separation: float = 0.5e-3
    zoom_half_width: float = 30e-6
    zoom_points: int = 1024
    zoom_threshold: float = 0.02
    zoom_separation: float = 8e-6
    histogram_bins: int = 128
    lateral_window: float = 1e-3
    # Gauss-Hermite nodes; fewer leave separate sub-peaks per node at 1% spread
    smear_nodes: int = 32
    windows: tuple[str, ...] = WINDOW_NAMES

    def __post_init__(self):
        object.__setattr__(self, "windows", tuple(self.windows))
        bad = [w for w in self.windows if w not in WINDOW_NAMES]
        if bad or not self.windows:
            raise ValueError(f"windows must be a non-empty subset of {list(WINDOW_NAMES)}, got {list(self.windows)}")
        if self.smear_nodes < 1:
            raise ValueError("smear_nodes must be >= 1")
        if self.global_points < 3 or self.zoom_points < 3:
            raise ValueError("density grids need at least 3 points")
        if not (self.global_half_width > 0 and self.zoom_half_width > 0):
            raise ValueError("window half-widths must be > 0")
        if self.histogram_bins < 1:
            raise ValueError("histogram_bins must be >= 1")


@dataclass(frozen=True)
class ExperimentConfig:
    species: ParticleSpecies = SPECIES_PRESETS["C60"]
    beam: BeamConfig = BeamConfig()
    geometry: GeometryConfig = GeometryConfig()
    slit_a: SlitConfig = SlitConfig()
    grating: GratingConfig = GratingConfig()
    # explicit aperture list; replaces slit_a + grating when given
    apertures: tuple[Aperture, ...] | None = None
    transmission_mode: str = TransmissionMode.CENTER_IN_APERTURE.value
    constants: PhysicalConstants = PhysicalConstants()
    integrator: IntegratorConfig = IntegratorConfig()
    sampling: SamplingConfig = SamplingConfig()
    analysis: AnalysisConfig = AnalysisConfig()
    scenario: str = "sa1"

    def __post_init__(self):
        TransmissionMode(self.transmission_mode)
        if self.scenario not in SCENARIO_NAMES:
            raise ValueError(f"unknown scenario {self.scenario!r}; valid kinds: {', '.join(SCENARIO_NAMES)}")

    @property
    def t1(self) -> float:
        return self.geometry.t1(self.beam.v_y)

    @property
    def t2(self) -> float:
        return self.geometry.t2(self.beam.v_y)

    def plate(self) -> ApertureSet:
        """All physical openings of the slit plate."""
        if self.apertures is not None:
            return ApertureSet(self.apertures)
        a = Aperture(self.slit_a.center, self.slit_a.width, "A")
        g = self.grating
        if g.n_slits == 0:
            return ApertureSet([a])
        return ApertureSet([a]) | make_grating(g.center, g.n_slits, g.width, g.period, "B")

    def with_velocity(self, v_y: float) -> "ExperimentConfig":
        return dataclasses.replace(self, beam=dataclasses.replace(self.beam, v_y=v_y))

    # -------------------------------------------------------- serialisation

    def to_dict(self) -> dict[str, Any]:
        d = dataclasses.asdict(self)
        d["analysis"]["windows"] = list(self.analysis.windows)
        if self.apertures is None:
            d["apertures"] = None
        else:
            d["apertures"] = [dataclasses.asdict(a) for a in self.apertures]
        return d

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "ExperimentConfig":
        if not isinstance(d, dict):
            raise ConfigError("configuration must be a JSON object")
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown configuration keys: {sorted(unknown)}")
        kw: dict[str, Any] = {}
        try:
            if "species" in d:
                sp = d["species"]
                if isinstance(sp, str):
                    if sp not in SPECIES_PRESETS:
                        raise ConfigError(f"unknown species preset {sp!r}; known: {sorted(SPECIES_PRESETS)}")
                    kw["species"] = SPECIES_PRESETS[sp]
                else:
                    kw["species"] = _build(ParticleSpecies, sp)
            for name, typ in (
                ("beam", BeamConfig),
                ("geometry", GeometryConfig),
                ("slit_a", SlitConfig),
                ("grating", GratingConfig),
                ("constants", PhysicalConstants),
                ("integrator", IntegratorConfig),
                ("sampling", SamplingConfig),
                ("analysis", AnalysisConfig),
            ):
                if name in d:
                    kw[name] = _build(typ, d[name])
            if d.get("apertures") is not None:
                kw["apertures"] = tuple(_build(Aperture, a) for a in d["apertures"])
            if "scenario" in d:
                kw["scenario"] = d["scenario"]
            if "transmission_mode" in d:
                kw["transmission_mode"] = TransmissionMode(d["transmission_mode"]).value
            cfg = cls(**kw)
            cfg.plate()
        except ConfigError:
            raise
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from exc
        return cfg

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def load(cls, path: str | Path) -> "ExperimentConfig":
        try:
            text = Path(path).read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        try:
            data = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON: {exc}") from exc
        # a run manifest carries the configuration under "config"
        if isinstance(data, dict) and "config" in data and "manifest_version" in data:
            data = data["config"]
        return cls.from_dict(data)


def _build(typ, value):
    if not isinstance(value, dict):
        raise ConfigError(f"{typ.__name__}: expected an object, got {type(value).__name__}")
    names = {f.name for f in dataclasses.fields(typ)}
    unknown = set(value) - names
    if unknown:
        raise ConfigError(f"{typ.__name__}: unknown keys {sorted(unknown)}")
    return typ(**value)
