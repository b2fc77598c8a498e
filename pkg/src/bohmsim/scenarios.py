"""The competing screen predictions as runnable scenarios, and the metrics that separate them.

SA1 sends the wave through every opening and lets point particles follow it.
SA2 keeps only the openings the particle fits through. BB keeps the full wave
but stops particles at openings narrower than their diameter. DiffractionA
is slit A alone.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from enum import Enum

import numpy as np
from scipy.integrate import cumulative_simpson

from .bohm import Fate, Trajectory, preslit_position
from .config import ExperimentConfig
from .core import ApertureSet, TransmissionMode, transmits
from .ensemble import (
    DensityHistogram,
    EnsembleResult,
    SamplingMode,
    compare_histogram_to_density,
    histogram,
    preslit_times,
    run_ensemble,
    sample_initial_positions,
    velocity_nodes,
)
from .propagator import PropagationContext, SlitField, transmitted_fraction


class ScenarioKind(str, Enum):
    SA1 = "sa1"
    SA2 = "sa2"
    BB = "bb"
    DIFFRACTION_A = "diffraction"


class ParticleFilter(str, Enum):
    NONE = "none"
    SIZE_AWARE = "size-aware"


def admits(aperture, species, mode) -> bool:
    """Whether any centre position lets the particle through this opening."""
    return aperture.width > species.diameter


@dataclass(frozen=True)
class ScenarioSpec:
    kind: ScenarioKind
    config: ExperimentConfig
    wave_apertures: ApertureSet
    plate: ApertureSet
    particle_filter: ParticleFilter
    null_prediction: bool = False

    def classify(self, x_t1: float) -> Fate:
        k = int(self.plate.owner(x_t1))
        if k < 0:
            return Fate.BLOCKED_PLATE
        ap = self.plate[k]
        if int(self.wave_apertures.owner(x_t1)) < 0:
            # an opening the wave is not allowed through (SA2, DiffractionA)
            return Fate.BLOCKED_BY_SIZE
        if self.particle_filter is ParticleFilter.SIZE_AWARE and not transmits(
            ap, self.config.species, x_t1, self.config.transmission_mode
        ):
            return Fate.BLOCKED_BY_SIZE
        return Fate.TRANSMITTED_B if ap.label == "B" else Fate.TRANSMITTED_A


def build_scenario(kind: ScenarioKind | str, config: ExperimentConfig) -> ScenarioSpec:
    try:
        kind = ScenarioKind(kind)
    except ValueError:
        valid = ", ".join(k.value for k in ScenarioKind)
        raise ValueError(f"unknown scenario {kind!r}; valid kinds: {valid}") from None
    plate = config.plate()
    mode = TransmissionMode(config.transmission_mode)
    if kind is ScenarioKind.SA1:
        return ScenarioSpec(kind, config, plate, plate, ParticleFilter.NONE)
    if kind is ScenarioKind.BB:
        return ScenarioSpec(kind, config, plate, plate, ParticleFilter.SIZE_AWARE)
    if kind is ScenarioKind.SA2:
        wave = plate.subset([admits(a, config.species, mode) for a in plate])
    else:
        wave = plate.subset([a.label == "A" for a in plate])
    return ScenarioSpec(kind, config, wave, plate, ParticleFilter.NONE, null_prediction=len(wave) == 0)


def wave_field(spec: ScenarioSpec) -> SlitField | None:
    if spec.null_prediction:
        return None
    cfg = spec.config
    ctx = PropagationContext.build(spec.wave_apertures, cfg.beam, cfg.species, cfg.t1, cfg.constants)
    return SlitField(ctx)


# ------------------------------------------------------------------ metrics


@dataclass(frozen=True)
class Peak:
    position: float
    height: float
    fwhm: float


def _check_grid(x, rho):
    x = np.asarray(x, dtype=float)
    rho = np.asarray(rho, dtype=float)
    if x.ndim != 1 or x.shape != rho.shape or x.size < 3:
        raise ValueError("need matching 1-D grids with at least 3 points")
    if np.any(np.diff(x) <= 0):
        raise ValueError("grid must be strictly increasing in x")
    return x, rho


def detect_peaks(x, rho, rel_threshold: float, min_separation: float) -> list[Peak]:
    """Local maxima above rel_threshold * max, at least min_separation apart.

    Taller peaks win separation conflicts. Positions and heights come from a
    parabola through the three samples around each maximum; widths are full
    widths at half of that height, cut at the grid ends.
    """
    x, rho = _check_grid(x, rho)
    top = float(rho.max())
    if not top > 0:
        raise ValueError("density grid is identically zero")
    left, mid, right = rho[:-2], rho[1:-1], rho[2:]
    cand = np.nonzero((mid > left) & (mid >= right) & (mid >= rel_threshold * top))[0] + 1
    kept: list[int] = []
    for i in sorted(cand, key=lambda i: -rho[i]):
        if all(abs(x[i] - x[j]) >= min_separation for j in kept):
            kept.append(i)
    peaks = []
    for i in sorted(kept):
        y0, y1, y2 = rho[i - 1], rho[i], rho[i + 1]
        h_l, h_r = x[i] - x[i - 1], x[i + 1] - x[i]
        curv = y0 - 2 * y1 + y2
        s = 0.5 * (y0 - y2) / curv if curv < 0 else 0.0
        step = h_r if s > 0 else h_l
        pos = x[i] + s * step
        height = y1 - 0.25 * (y0 - y2) * s
        peaks.append(Peak(float(pos), float(height), _fwhm(x, rho, i, 0.5 * height)))
    return peaks


def _fwhm(x, rho, i, half):
    j = i
    while j > 0 and rho[j] > half:
        j -= 1
    if rho[j] > half:
        xl = x[0]
    else:
        xl = x[j] + (half - rho[j]) * (x[j + 1] - x[j]) / (rho[j + 1] - rho[j])
    j = i
    while j < x.size - 1 and rho[j] > half:
        j += 1
    if rho[j] > half:
        xr = x[-1]
    else:
        xr = x[j - 1] + (rho[j - 1] - half) * (x[j] - x[j - 1]) / (rho[j - 1] - rho[j])
    return float(xr - xl)


def _bin_masses_split(edges, mass):
    """Mass left and right of x = 0, splitting a straddling bin linearly."""
    frac_left = np.clip((0.0 - edges[:-1]) / np.diff(edges), 0.0, 1.0)
    return float(np.sum(mass * frac_left)), float(np.sum(mass * (1 - frac_left)))


def asymmetry_metric(x_or_hist, rho=None) -> float:
    """(mass at x > 0 - mass at x < 0) / total mass; positive towards grating B."""
    if isinstance(x_or_hist, DensityHistogram):
        left, right = _bin_masses_split(x_or_hist.bin_edges, x_or_hist.counts)
    else:
        x, r = _check_grid(x_or_hist, rho)
        cum = cumulative_simpson(r, x=x, initial=0.0)
        total = float(cum[-1])
        left = float(np.interp(0.0, x, cum))
        right = total - left
    total = left + right
    if not total > 0:
        raise ValueError("zero total mass")
    return (right - left) / total


def lateral_fraction(x, rho, window: float, total_mass: float | None = None) -> float:
    """Share of the density at |x| > window.

    total_mass defaults to the grid integral; pass the transmitted fraction to
    count mass beyond the grid as lateral too.
    """
    x, rho = _check_grid(x, rho)
    if window < 0:
        raise ValueError("window must be >= 0")
    if -window < x[0] or window > x[-1]:
        raise ValueError("window extends beyond the density grid")
    cum = cumulative_simpson(rho, x=x, initial=0.0)
    if total_mass is None:
        total_mass = float(cum[-1])
    if not total_mass > 0:
        raise ValueError("zero total mass")
    inside = float(np.interp(window, x, cum) - np.interp(-window, x, cum))
    return 1.0 - inside / total_mass


# ------------------------------------------------------------------ running


@dataclass
class DensityGrid:
    name: str
    x: np.ndarray
    rho: np.ndarray
    psi: np.ndarray | None = None


def screen_grids(config: ExperimentConfig, windows=None) -> dict[str, np.ndarray]:
    a = config.analysis
    windows = a.windows if windows is None else windows
    spans = {
        "global": (a.global_half_width, a.global_points),
        "zoom": (a.zoom_half_width, a.zoom_points),
    }
    out = {}
    for w in windows:
        if w not in spans:
            raise ValueError(f"unknown window {w!r}; valid: global, zoom")
        half, n = spans[w]
        out[w] = np.linspace(-half, half, n)
    return out


def density_grids(spec: ScenarioSpec, windows=None, field=None) -> dict[str, DensityGrid]:
    field = field if field is not None else wave_field(spec)
    grids = {}
    for name, x in screen_grids(spec.config, windows).items():
        if field is None:
            grids[name] = DensityGrid(name, x, np.zeros_like(x), np.zeros(x.shape, complex))
        else:
            psi, _ = field.evaluate(x, spec.config.t2)
            grids[name] = DensityGrid(name, x, np.abs(psi) ** 2, psi)
    return grids


def _thresholds(config, window):
    a = config.analysis
    if window == "zoom":
        return a.zoom_threshold, a.zoom_separation
    return a.global_threshold, a.global_separation


@dataclass
class ScenarioResult:
    spec: ScenarioSpec
    grids: dict[str, DensityGrid]
    peaks: dict[str, list[Peak]]
    metrics: dict[str, float | None]
    transmitted_fraction: float
    histogram: DensityHistogram | None = None
    ensemble: EnsembleResult | None = None
    timing: dict[str, float] = field(default_factory=dict)

    @property
    def fate_tallies(self) -> dict[str, int]:
        return self.ensemble.tallies() if self.ensemble is not None else {}

    @property
    def signature_peaks(self) -> list[Peak]:
        """Peaks of the scenario's predicted screen density (global window)."""
        if self.spec.kind is ScenarioKind.BB:
            return self.peaks.get("histogram", [])
        return self.peaks.get("global", [])


def _grid_peaks(grid, config, window):
    if not np.any(grid.rho > 0):
        return []
    thr, sep = _thresholds(config, window)
    return detect_peaks(grid.x, grid.rho, thr, sep)


def summarize(config: ExperimentConfig, grids, total: float, hist=None, ensembles=()):
    """Peak lists and scalar metrics for density grids and an optional histogram.

    Scalar metrics come from the global grid and are normalised by the
    transmitted fraction `total`.
    """
    a = config.analysis
    peaks = {name: _grid_peaks(g, config, name) for name, g in grids.items()}
    metrics: dict[str, float | None] = {"transmitted_fraction": total}
    ref = grids["global"]
    if total > 0:
        metrics["lateral_fraction"] = lateral_fraction(ref.x, ref.rho, a.lateral_window, total)
        metrics["asymmetry_density"] = asymmetry_metric(ref.x, ref.rho)
    if hist is not None:
        has_mass = bool(hist.counts.any())
        peaks["histogram"] = detect_peaks(hist.centers, hist.density, a.global_threshold, a.global_separation) if has_mass else []
        metrics["asymmetry_histogram"] = asymmetry_metric(hist) if has_mass else None
        if total > 0:
            # particle histogram against the wave's own |psi|^2
            rep = compare_histogram_to_density(hist, ref.x, ref.rho, total)
            metrics["tv_vs_density"] = rep.tv_distance
            metrics["chi2_per_dof"] = rep.chi2_per_dof
    n = sum(e.n_draws for e in ensembles)
    if n:
        aborted = sum(
            t["AbortedSingularity"] + t["AbortedStepUnderflow"] for t in (e.tallies() for e in ensembles)
        )
        metrics["aborted_fraction"] = aborted / n
    return peaks, metrics


def _with_global(windows):
    return windows + (() if "global" in windows else ("global",))


def _arrival_histogram(config, x, w):
    if x.size == 0:
        return None
    a = config.analysis
    return histogram(x, (-a.global_half_width, a.global_half_width), a.histogram_bins, w)


def run_scenario(
    spec: ScenarioSpec,
    n_trajectories: int | None = None,
    seed: int | None = None,
    threads: int | str | None = None,
    windows=None,
) -> ScenarioResult:
    """Density grids, peaks and metrics, plus a particle ensemble when n > 0.

    Metrics always use the global window, whether or not it is requested.
    """
    cfg = spec.config
    windows = tuple(cfg.analysis.windows if windows is None else windows)
    n = cfg.sampling.n_trajectories if n_trajectories is None else n_trajectories
    seed = cfg.sampling.seed if seed is None else seed
    threads = cfg.sampling.threads if threads is None else threads
    timing = {}
    t0 = time.perf_counter()
    field = wave_field(spec)
    grids = density_grids(spec, _with_global(windows), field)
    timing["density_s"] = time.perf_counter() - t0
    total = transmitted_fraction(field.ctx) if field is not None else 0.0
    hist = None
    ens = None
    if n > 0:
        t0 = time.perf_counter()
        ens = _run_particles(spec, field, n, seed, threads)
        timing["trajectories_s"] = time.perf_counter() - t0
        hist = _arrival_histogram(cfg, *ens.arrivals())
    peaks, metrics = summarize(cfg, grids, total, hist, [ens] if ens is not None else [])
    keep = {w: grids[w] for w in windows}
    peaks = {w: p for w, p in peaks.items() if w in keep or w == "histogram"}
    return ScenarioResult(spec, keep, peaks, metrics, total, hist, ens, timing)


def _run_particles(spec, field, n, seed, threads, stream=0):
    cfg = spec.config
    mode = SamplingMode(cfg.sampling.mode)
    # with no wave behind the plate, condition on the physical openings so
    # the draws show where particles are stopped
    target = spec.wave_apertures if field is not None else spec.plate
    samples = sample_initial_positions(
        n, seed, mode, cfg.beam, target, cfg.species, cfg.t1, cfg.constants, stream=stream
    )
    if field is None:
        t_pre = preslit_times(cfg.t1)
        x_pre = preslit_position(samples.x0[:, None], t_pre[None, :], cfg.beam, cfg.species, cfg.constants)
        trs = [
            Trajectory(id=i, x0=float(samples.x0[i]), t=t_pre, x=x_pre[i],
                       fate=spec.classify(float(x_pre[i, -1])), weight=float(samples.weights[i]))
            for i in range(n)
        ]
        return EnsembleResult(trs, n, float(samples.weights.sum()))
    return run_ensemble(samples, field, spec.classify, cfg.t2, cfg.integrator, threads)


# ------------------------------------------------------------------ smearing


@dataclass
class SmearResult:
    nodes: np.ndarray
    weights: np.ndarray
    grids: dict[str, DensityGrid]
    transmitted_fraction: float
    peaks: dict[str, list[Peak]]
    metrics: dict[str, float | None]
    histogram: DensityHistogram | None = None
    ensembles: list[EnsembleResult] = field(default_factory=list)


def smear_velocity(
    spec: ScenarioSpec,
    k_samples: int,
    v_y_spread: float,
    seed: int = 0,
    n_trajectories: int = 0,
    threads: int | str | None = 1,
    windows=None,
) -> SmearResult:
    """Average the scenario over a Gaussian spread of longitudinal speed v_y.

    Each Gauss-Hermite node changes t1, t2 and the de Broglie wavelength.
    Densities are mixed with the quadrature weights; trajectory arrivals from
    every node are pooled with the same weights. n_trajectories is per node.
    """
    cfg = spec.config
    windows = tuple(cfg.analysis.windows if windows is None else windows)
    nodes, weights = velocity_nodes(cfg.beam.v_y, v_y_spread, k_samples)
    mixed: dict[str, DensityGrid] = {}
    total = 0.0
    xs, ws, runs = [], [], []
    for j, (v, w) in enumerate(zip(nodes, weights)):
        sub = build_scenario(spec.kind, cfg.with_velocity(float(v)))
        fld = wave_field(sub)
        for name, g in density_grids(sub, _with_global(windows), fld).items():
            if name in mixed:
                mixed[name].rho = mixed[name].rho + w * g.rho
            else:
                mixed[name] = DensityGrid(name, g.x, w * g.rho)
        if fld is not None:
            total += w * transmitted_fraction(fld.ctx)
        if n_trajectories > 0:
            ens = _run_particles(sub, fld, n_trajectories, seed, threads, stream=j)
            runs.append(ens)
            xa, wa = ens.arrivals()
            xs.append(xa)
            ws.append(w * wa)
    hist = _arrival_histogram(cfg, np.concatenate(xs), np.concatenate(ws)) if runs else None
    peaks, metrics = summarize(cfg, mixed, total, hist, runs)
    keep = {w: mixed[w] for w in windows}
    peaks = {w: p for w, p in peaks.items() if w in keep or w == "histogram"}
    return SmearResult(nodes, weights, keep, total, peaks, metrics, hist, runs)
