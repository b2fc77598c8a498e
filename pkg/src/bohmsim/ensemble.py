"""Initial-position sampling, parallel trajectory ensembles, histograms and comparisons."""

from __future__ import annotations

import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from enum import Enum
from typing import Callable, Sequence

import numpy as np
from scipy.integrate import cumulative_simpson
from scipy.special import ndtr, ndtri

from .bohm import (
    STATUS_OK,
    STATUS_SINGULAR,
    Fate,
    IntegratorConfig,
    Trajectory,
    bridge_for,
    preslit_position,
    run_batch,
)
from .core import (
    CODATA,
    ApertureSet,
    BeamConfig,
    ParticleSpecies,
    PhysicalConstants,
    sigma_t,
)
from .propagator import FreeField


class SamplingMode(str, Enum):
    FULL_BEAM = "full-beam"
    CONDITIONED = "conditioned"


class Normalization(str, Enum):
    PROBABILITY = "probability"
    TRANSMITTED_FLUX = "transmitted-flux"


# ------------------------------------------------------------------ sampling


def uniform_stream(seed: int, n: int, stream: int = 0) -> np.ndarray:
    """Open-interval uniforms; draw i depends only on (seed, stream, i).

    Philox is counter based: the i-th 64-bit output is a pure function of the
    key and the counter, so prefixes agree for any n.
    """
    if n < 0:
        raise ValueError("n must be >= 0")
    bits = np.random.Philox(key=[int(seed) & (2**64 - 1), int(stream)]).random_raw(n)
    return ((bits >> np.uint64(11)).astype(np.float64) + 0.5) * 2.0**-53


@dataclass(frozen=True)
class SampleSet:
    seed: int
    mode: SamplingMode
    x0: np.ndarray
    weights: np.ndarray

    def __len__(self):
        return self.x0.size


def aperture_masses(apertures: ApertureSet, sigma: float) -> np.ndarray:
    """Probability of a centred Gaussian of width sigma inside each aperture."""
    return ndtr(apertures.rights / sigma) - ndtr(apertures.lefts / sigma)


def sample_initial_positions(
    n: int,
    seed: int,
    mode: SamplingMode | str,
    beam: BeamConfig,
    apertures: ApertureSet | None = None,
    species: ParticleSpecies | None = None,
    t1: float | None = None,
    consts: PhysicalConstants = CODATA,
    stream: int = 0,
) -> SampleSet:
    """Initial positions x0 at t = 0.

    Full-beam draws follow |psi0|^2. Conditioned draws place x(t1) inside the
    apertures with probability proportional to the incident flux and map it
    back along the exact pre-slit path; each carries the transmitted fraction
    as weight.
    """
    mode = SamplingMode(mode)
    if n < 1:
        raise ValueError("n must be >= 1")
    u = uniform_stream(seed, n, stream)
    if mode is SamplingMode.FULL_BEAM:
        return SampleSet(seed, mode, beam.sigma0 * ndtri(u), np.ones(n))
    if apertures is None or len(apertures) == 0:
        raise ValueError("conditioned sampling needs a non-empty aperture set")
    if species is None or t1 is None:
        raise ValueError("conditioned sampling needs species and t1")
    sig = float(sigma_t(t1, beam, species, consts))
    lo = ndtr(apertures.lefts / sig)
    mass = ndtr(apertures.rights / sig) - lo
    cum = np.concatenate(([0.0], np.cumsum(mass)))
    total = cum[-1]
    target = u * total
    k = np.clip(np.searchsorted(cum, target, side="right") - 1, 0, len(mass) - 1)
    x_t1 = sig * ndtri(lo[k] + (target - cum[k]))
    x_t1 = np.clip(x_t1, apertures.lefts[k], apertures.rights[k])
    x0 = x_t1 * beam.sigma0 / sig
    return SampleSet(seed, mode, x0, np.full(n, total))


# ------------------------------------------------------------------ ensemble


@dataclass
class EnsembleResult:
    trajectories: list[Trajectory]
    n_draws: int
    total_weight: float

    def tallies(self) -> dict[str, int]:
        out = {f.label: 0 for f in Fate if f is not Fate.FREE}
        for tr in self.trajectories:
            out[tr.fate.label] = out.get(tr.fate.label, 0) + 1
        return out

    def arrivals(self, fates: Sequence[Fate] | None = None):
        """Final positions and weights of completed transmitted trajectories."""
        keep = set(fates) if fates is not None else {f for f in Fate if f.transmitted}
        xs, ws = [], []
        for tr in self.trajectories:
            if tr.fate in keep:
                xs.append(tr.final_x)
                ws.append(tr.weight)
        return np.array(xs, dtype=float), np.array(ws, dtype=float)


def resolve_threads(threads: int | str | None) -> int:
    if threads is None or threads == "auto":
        return max(1, os.cpu_count() or 1)
    threads = int(threads)
    if threads < 1:
        raise ValueError("threads must be >= 1 or 'auto'")
    return threads


def _parallel_batches(fn: Callable, x: np.ndarray, threads: int, chunk: int = 64):
    """Apply fn to contiguous chunks of x, in order, on a thread pool."""
    pieces = [x[i : i + chunk] for i in range(0, x.size, chunk)]
    if threads == 1 or len(pieces) <= 1:
        return [fn(p) for p in pieces]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, pieces))


def _status_fate(status: int, ok_fate: Fate) -> Fate:
    if status == STATUS_OK:
        return ok_fate
    if status == STATUS_SINGULAR:
        return Fate.ABORTED_SINGULARITY
    return Fate.ABORTED_STEP_UNDERFLOW


def preslit_times(t1: float, n: int = 9) -> np.ndarray:
    return np.linspace(0.0, t1, n)


def run_ensemble(
    samples: SampleSet,
    field,
    classify: Callable[[float], Fate],
    t2: float,
    icfg: IntegratorConfig = IntegratorConfig(),
    threads: int | str | None = 1,
) -> EnsembleResult:
    """Pre-slit motion, slit-plane fate and post-slit integration for every draw.

    `classify` maps x(t1) to a fate; only transmitted draws are integrated.
    Results do not depend on `threads`.
    """
    ctx = field.ctx
    n = len(samples)
    if n == 0:
        return EnsembleResult([], 0, 0.0)
    t_pre = preslit_times(ctx.t1)
    x_pre = preslit_position(samples.x0[:, None], t_pre[None, :], ctx.beam, ctx.species, ctx.consts)
    x_t1 = x_pre[:, -1]
    fates = [classify(float(x)) for x in x_t1]
    go = np.array([f.transmitted for f in fates], dtype=bool)
    trajectories: list[Trajectory] = []
    if go.any():
        bridge_for(field, icfg, t2)  # build once, before the workers start

        def work(chunk):
            return run_batch(chunk, field, ctx.t1, t2, icfg)

        parts = _parallel_batches(work, x_t1[go], resolve_threads(threads))
        t_post = parts[0][0]
        x_post = np.concatenate([p[1] for p in parts])
        v_post = np.concatenate([p[2] for p in parts])
        status = np.concatenate([p[3] for p in parts])
        steps = np.concatenate([p[4] for p in parts])
    j = 0
    v_pre = _preslit_velocity(x_pre, t_pre, ctx)
    for i in range(n):
        fate = fates[i]
        if go[i]:
            st = int(status[j])
            fate = _status_fate(st, fate)
            xs = x_post[j]
            finite = np.isfinite(xs)
            # t_post starts at t1, already the last pre-slit sample
            t = np.concatenate((t_pre, t_post[1:][finite[1:]]))
            x = np.concatenate((x_pre[i], xs[1:][finite[1:]]))
            v = np.concatenate((v_pre[i], v_post[j][1:][finite[1:]]))
            n_steps = int(steps[j])
            j += 1
        else:
            t, x, v, n_steps = t_pre, x_pre[i], v_pre[i], 0
        trajectories.append(
            Trajectory(id=i, x0=float(samples.x0[i]), t=t, x=x, fate=fate,
                       weight=float(samples.weights[i]), n_steps=n_steps, v=v)
        )
    return EnsembleResult(trajectories, n, float(samples.weights.sum()))


def _preslit_velocity(x_pre, t_pre, ctx):
    nu = ctx.nu
    # v = x d ln(sigma)/dt for the spreading Gaussian
    rate = nu * nu * t_pre / (1.0 + (nu * t_pre) ** 2)
    return x_pre * rate[None, :]


def run_free_ensemble(
    n: int,
    seed: int,
    beam: BeamConfig,
    species: ParticleSpecies,
    times: Sequence[float],
    icfg: IntegratorConfig = IntegratorConfig(),
    consts: PhysicalConstants = CODATA,
    threads: int | str | None = 1,
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Integrate |psi0|^2-distributed draws through the unobstructed packet.

    Returns (x0, x at each requested time, status).
    """
    samples = sample_initial_positions(n, seed, SamplingMode.FULL_BEAM, beam)
    fld = FreeField(beam, species, consts)
    times = np.asarray(times, dtype=float)
    t_out = np.concatenate(([0.0], times))

    def work(chunk):
        return run_batch(chunk, fld, 0.0, float(times.max()), icfg, t_out)

    parts = _parallel_batches(work, samples.x0, resolve_threads(threads))
    x = np.concatenate([p[1] for p in parts])[:, 1:]
    status = np.concatenate([p[3] for p in parts])
    return samples.x0, x, status


# ---------------------------------------------------------------- histograms


@dataclass(frozen=True)
class DensityHistogram:
    range: tuple[float, float]
    bin_edges: np.ndarray
    counts: np.ndarray
    normalization: Normalization
    n_effective: float
    total_weight: float
    norm_weight: float

    @property
    def centers(self):
        return 0.5 * (self.bin_edges[1:] + self.bin_edges[:-1])

    @property
    def widths(self):
        return np.diff(self.bin_edges)

    @property
    def density(self):
        return self.counts / (self.norm_weight * self.widths)

    @property
    def bin_mass(self):
        return self.counts / self.norm_weight


def histogram(
    arrivals,
    range: tuple[float, float],
    n_bins: int = 128,
    weights=None,
    normalization: Normalization | str = Normalization.PROBABILITY,
    n_draws: float | None = None,
) -> DensityHistogram:
    """Weighted arrival histogram.

    probability: counts / (total arrival weight * bin width); arrivals outside
    the range still count towards the total. transmitted-flux: counts /
    (number of draws * bin width), so the histogram integrates to the
    transmitted fraction.
    """
    normalization = Normalization(normalization)
    x = np.asarray(arrivals, dtype=float)
    if x.size == 0:
        raise ValueError("no arrivals to histogram")
    w = np.ones_like(x) if weights is None else np.asarray(weights, dtype=float)
    if w.shape != x.shape:
        raise ValueError("weights and arrivals differ in shape")
    lo, hi = float(range[0]), float(range[1])
    if not hi > lo:
        raise ValueError("empty histogram range")
    if n_bins < 1:
        raise ValueError("n_bins must be >= 1")
    edges = np.linspace(lo, hi, n_bins + 1)
    counts, _ = np.histogram(x, bins=edges, weights=w)
    total = float(w.sum())
    if normalization is Normalization.PROBABILITY:
        norm = total
    else:
        if n_draws is None:
            raise ValueError("transmitted-flux normalization needs n_draws")
        norm = float(n_draws)
    n_eff = total**2 / float(np.sum(w * w))
    return DensityHistogram((lo, hi), edges, counts.astype(float), normalization, n_eff, total, norm)


@dataclass(frozen=True)
class ComparisonReport:
    tv_distance: float
    chi2_per_dof: float
    n_bins: int
    hist_mass: float
    density_mass: float
    notes: str = ""


def binned_density(x, rho, edges, total_mass: float | None = None):
    """Integral of the density over each bin, divided by total_mass."""
    x = np.asarray(x, dtype=float)
    rho = np.asarray(rho, dtype=float)
    edges = np.asarray(edges, dtype=float)
    tol = 1e-9 * (x[-1] - x[0])
    if edges[0] < x[0] - tol or edges[-1] > x[-1] + tol:
        raise ValueError("histogram range is not covered by the density grid")
    cum = cumulative_simpson(rho, x=x, initial=0.0)
    if total_mass is None:
        total_mass = float(cum[-1])
    if not total_mass > 0:
        raise ValueError("density has zero mass")
    at_edges = np.interp(edges, x, cum)
    return np.diff(at_edges) / total_mass


def compare_histogram_to_density(hist: DensityHistogram, x, rho, total_mass: float | None = None) -> ComparisonReport:
    """TV distance and chi^2 between a histogram and a density on a grid.

    Both sides are compared as mass per bin: the histogram's own normalization
    against the density integrated per bin and divided by total_mass (default
    its integral over the grid).
    """
    q = binned_density(x, rho, hist.bin_edges, total_mass)
    p = hist.bin_mass
    tv = 0.5 * float(np.sum(np.abs(p - q)))
    expected = hist.n_effective * q
    observed = hist.n_effective * p
    sel = expected > 0
    chi2 = float(np.sum((observed[sel] - expected[sel]) ** 2 / expected[sel]))
    dof = max(int(sel.sum()) - 1, 1)
    return ComparisonReport(tv, chi2 / dof, hist.counts.size, float(p.sum()), float(q.sum()))


def histogram_tv(a: DensityHistogram, b: DensityHistogram) -> float:
    if a.bin_edges.shape != b.bin_edges.shape or not np.allclose(a.bin_edges, b.bin_edges, rtol=0, atol=1e-12 * abs(a.range[1] - a.range[0])):
        raise ValueError("histograms use different binning")
    return 0.5 * float(np.sum(np.abs(a.bin_mass - b.bin_mass)))


# ------------------------------------------------------------------ smearing


def velocity_nodes(v_y: float, v_y_spread: float, k: int):
    """Gauss-Hermite nodes and normalised weights for a Gaussian v_y spread."""
    if k < 1:
        raise ValueError("k_samples must be >= 1")
    if v_y_spread < 0:
        raise ValueError("v_y_spread must be >= 0")
    if v_y_spread == 0 or k == 1:
        return np.array([v_y]), np.array([1.0])
    z, w = np.polynomial.hermite_e.hermegauss(k)
    v = v_y + v_y_spread * z
    if np.any(v <= 0):
        raise ValueError("a v_y quadrature node is not positive; spread too large")
    return v, w / w.sum()
