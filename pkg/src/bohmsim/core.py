"""Physical constants, beam/geometry types, the free Gaussian packet and slit geometry.

Everything is SI. Typical magnitudes for the C60 setup: sigma0 = 2e-6 m,
slit A 50e-9 m wide, grating slits 0.5e-9 m wide on a 1e-9 m period.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum
from typing import Iterable, Sequence

import numpy as np


_H = 6.62607015e-34


@dataclass(frozen=True)
class PhysicalConstants:
    # exact SI values; the usual 10-digit hbar literal is off by 6e-10
    hbar: float = _H / (2 * math.pi)
    h: float = _H

    def __post_init__(self):
        if not (self.hbar > 0 and self.h > 0):
            raise ValueError("hbar and h must be positive")
        if abs(self.h - 2 * math.pi * self.hbar) / self.h >= 1e-12:
            raise ValueError("h and hbar are inconsistent (h != 2*pi*hbar)")


CODATA = PhysicalConstants()


@dataclass(frozen=True)
class ParticleSpecies:
    name: str
    mass: float
    diameter: float

    def __post_init__(self):
        if not self.mass > 0:
            raise ValueError(f"species {self.name!r}: mass must be > 0")
        if not self.diameter >= 0:
            raise ValueError(f"species {self.name!r}: diameter must be >= 0")


C60 = ParticleSpecies("C60", 1.2e-24, 1.0e-9)

# Parameter presets only. A Rydberg atom is modelled as a hard sphere of
# radius ~n^2 a0 around a sodium mass.
SPECIES_PRESETS = {
    "C60": C60,
    "Na2": ParticleSpecies("Na2", 2 * 22.98976928 * 1.66053906660e-27, 0.6e-9),
    "Na-Rydberg-n50": ParticleSpecies(
        "Na-Rydberg-n50", 22.98976928 * 1.66053906660e-27, 2 * 50**2 * 5.29177210903e-11
    ),
}


@dataclass(frozen=True)
class BeamConfig:
    sigma0: float = 2.0e-6
    v_y: float = 200.0
    v_y_spread: float = 0.0

    def __post_init__(self):
        if not self.sigma0 > 0:
            raise ValueError("sigma0 must be > 0")
        if not self.v_y > 0:
            raise ValueError("v_y must be > 0")
        if not self.v_y_spread >= 0:
            raise ValueError("v_y_spread must be >= 0")


@dataclass(frozen=True)
class GeometryConfig:
    d1: float = 1.0
    d2: float = 1.25

    def __post_init__(self):
        if not (self.d1 > 0 and self.d2 > 0):
            raise ValueError("d1 and d2 must be > 0")

    def t1(self, v_y: float) -> float:
        """Time at which the packet reaches the slit plane."""
        return self.d1 / v_y

    def t2(self, v_y: float) -> float:
        """Time at which the packet reaches the screen."""
        return (self.d1 + self.d2) / v_y


@dataclass(frozen=True)
class Aperture:
    center: float
    width: float
    label: str = ""

    def __post_init__(self):
        if not self.width > 0:
            raise ValueError(f"aperture width must be > 0, got {self.width}")

    @property
    def left(self) -> float:
        return self.center - 0.5 * self.width

    @property
    def right(self) -> float:
        return self.center + 0.5 * self.width

    def contains(self, x: float) -> bool:
        return self.left <= x <= self.right


class ApertureSet:
    """Sorted, pairwise disjoint apertures on the slit plane."""

    def __init__(self, apertures: Iterable[Aperture] = ()):
        aps = sorted(apertures, key=lambda a: a.center)
        for prev, nxt in zip(aps, aps[1:]):
            if nxt.left < prev.right:
                raise ValueError(
                    f"apertures overlap: [{prev.left:.6g}, {prev.right:.6g}] and "
                    f"[{nxt.left:.6g}, {nxt.right:.6g}]"
                )
        self.apertures: tuple[Aperture, ...] = tuple(aps)
        self.lefts = np.array([a.left for a in aps], dtype=float)
        self.rights = np.array([a.right for a in aps], dtype=float)

    def __len__(self):
        return len(self.apertures)

    def __iter__(self):
        return iter(self.apertures)

    def __getitem__(self, i):
        return self.apertures[i]

    def __eq__(self, other):
        return isinstance(other, ApertureSet) and self.apertures == other.apertures

    def __repr__(self):
        return f"ApertureSet({len(self)} apertures)"

    def __or__(self, other: "ApertureSet") -> "ApertureSet":
        return ApertureSet(self.apertures + tuple(other))

    def owner(self, x):
        """Index of the aperture containing each x, or -1 (vectorised)."""
        x = np.asarray(x, dtype=float)
        if len(self) == 0:
            return np.full(x.shape, -1, dtype=int)
        idx = np.searchsorted(self.lefts, x, side="right") - 1
        safe = np.clip(idx, 0, len(self) - 1)
        inside = (idx >= 0) & (x <= self.rights[safe])
        return np.where(inside, idx, -1)

    def contains(self, x):
        return self.owner(x) >= 0

    def subset(self, keep: Sequence[bool]) -> "ApertureSet":
        return ApertureSet(a for a, k in zip(self.apertures, keep) if k)

    @property
    def open_width(self) -> float:
        return float(np.sum(self.rights - self.lefts))


class TransmissionMode(str, Enum):
    CENTER_IN_APERTURE = "center-in-aperture"
    HARD_SPHERE_MARGIN = "hard-sphere-margin"


def s_param(t, beam: BeamConfig, species: ParticleSpecies, consts: PhysicalConstants = CODATA):
    """Complex width s(t) = sigma0 (1 + i hbar t / (2 m sigma0^2))."""
    nu = consts.hbar / (2 * species.mass * beam.sigma0**2)
    return beam.sigma0 * (1 + 1j * nu * np.asarray(t, dtype=float))


def sigma_t(t, beam: BeamConfig, species: ParticleSpecies, consts: PhysicalConstants = CODATA):
    """Real rms width |s(t)| of the spreading packet."""
    nu = consts.hbar / (2 * species.mass * beam.sigma0**2)
    return beam.sigma0 * np.sqrt(1 + (nu * np.asarray(t, dtype=float)) ** 2)


def psi0(x, beam: BeamConfig):
    x = np.asarray(x, dtype=float)
    amp = (2 * math.pi * beam.sigma0**2) ** -0.25 * np.exp(-(x**2) / (4 * beam.sigma0**2))
    return amp + 0j


def psi_free(x, t, beam: BeamConfig, species: ParticleSpecies, consts: PhysicalConstants = CODATA):
    """Freely spreading Gaussian packet, normalised on the real line."""
    x = np.asarray(x, dtype=float)
    s = s_param(t, beam, species, consts)
    # (2 pi s^2)^(-1/4) on the principal branch; arg s lies in [0, pi/2)
    return (2 * math.pi) ** -0.25 / np.sqrt(s) * np.exp(-(x**2) / (4 * beam.sigma0 * s))


def dpsi_free(x, t, beam: BeamConfig, species: ParticleSpecies, consts: PhysicalConstants = CODATA):
    x = np.asarray(x, dtype=float)
    s = s_param(t, beam, species, consts)
    return -x / (2 * beam.sigma0 * s) * psi_free(x, t, beam, species, consts)


def de_broglie_wavelength(species: ParticleSpecies, v_y: float, consts: PhysicalConstants = CODATA) -> float:
    if not v_y > 0:
        raise ValueError("v_y must be > 0")
    return consts.h / (species.mass * v_y)


def make_grating(center: float, n_slits: int, width: float, period: float, label: str = "B") -> ApertureSet:
    """n_slits equal slits spaced by `period`, the whole comb centred on `center`."""
    if n_slits < 1:
        raise ValueError("n_slits must be >= 1")
    if not width > 0:
        raise ValueError("width must be > 0")
    if width > period and n_slits > 1:
        raise ValueError(f"slit width {width} exceeds period {period}: slits would overlap")
    offsets = (np.arange(n_slits) - 0.5 * (n_slits - 1)) * period
    return ApertureSet(Aperture(center + float(o), width, label) for o in offsets)


def transmits(
    aperture: Aperture,
    species: ParticleSpecies,
    x_hit: float,
    mode: TransmissionMode | str = TransmissionMode.CENTER_IN_APERTURE,
) -> bool:
    """Whether a particle whose centre arrives at x_hit gets through `aperture`."""
    mode = TransmissionMode(mode)
    d = species.diameter
    if mode is TransmissionMode.CENTER_IN_APERTURE:
        return aperture.width > d
    return aperture.left + 0.5 * d <= x_hit <= aperture.right - 0.5 * d
