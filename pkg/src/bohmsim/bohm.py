"""Guidance velocity, slit-plane bookkeeping and post-slit trajectory integration."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import IntEnum

import numpy as np
from numba import njit
from scipy.integrate import cumulative_simpson
from scipy.special import ndtr

from .core import (
    CODATA,
    ApertureSet,
    BeamConfig,
    ParticleSpecies,
    PhysicalConstants,
    TransmissionMode,
    sigma_t,
    transmits,
)
from .propagator import _GL_W, _GL_X, SingularityError, free_point, slit_point


class Fate(IntEnum):
    TRANSMITTED_A = 0
    TRANSMITTED_B = 1
    BLOCKED_PLATE = 2
    BLOCKED_BY_SIZE = 3
    ABORTED_SINGULARITY = 4
    ABORTED_STEP_UNDERFLOW = 5
    # internal: integration finished without a slit-plane verdict (free runs)
    FREE = 6

    @property
    def transmitted(self):
        return self in (Fate.TRANSMITTED_A, Fate.TRANSMITTED_B, Fate.FREE)

    @property
    def label(self):
        return _FATE_LABELS[self]


_FATE_LABELS = {
    Fate.TRANSMITTED_A: "TransmittedA",
    Fate.TRANSMITTED_B: "TransmittedB",
    Fate.BLOCKED_PLATE: "BlockedPlate",
    Fate.BLOCKED_BY_SIZE: "BlockedBySize",
    Fate.ABORTED_SINGULARITY: "AbortedSingularity",
    Fate.ABORTED_STEP_UNDERFLOW: "AbortedStepUnderflow",
    Fate.FREE: "Free",
}


class StepUnderflow(ArithmeticError):
    pass


@dataclass(frozen=True)
class IntegratorConfig:
    dt_min: float = 1e-18
    dt_max: float = 1e-3
    # tight enough that neighbouring paths a fraction of a nanometre apart
    # behind the slits keep their order; the bridge dominates the cost anyway
    rel_tol: float = 1e-9
    # absolute position tolerance per step (m)
    abs_tol: float = 1e-14
    rho_floor: float = 1e-12
    v_cap: float = 1e5
    # |v| dt may not exceed this; a quarter millimetre keeps far-field steps
    # inside one lateral feature of the global screen window
    max_stride: float = 2.5e-4
    max_steps: int = 200_000
    # None: Fresnel time m D^2 / h of the aperture set; 0 disables the bridge
    bridge_time: float | None = None

    def __post_init__(self):
        if not (0 < self.dt_min <= self.dt_max):
            raise ValueError("need 0 < dt_min <= dt_max")
        if not self.rel_tol > 0:
            raise ValueError("rel_tol must be > 0")
        if not self.rho_floor > 0:
            raise ValueError("rho_floor must be > 0")
        if not (self.abs_tol > 0 and self.v_cap > 0 and self.max_stride > 0):
            raise ValueError("abs_tol, v_cap and max_stride must be > 0")
        if self.bridge_time is not None and not self.bridge_time >= 0:
            raise ValueError("bridge_time must be >= 0")


@dataclass(frozen=True)
class TrajectoryState:
    t: float
    x: float
    v: float


@dataclass
class Trajectory:
    id: int
    x0: float
    t: np.ndarray
    x: np.ndarray
    fate: Fate
    weight: float = 1.0
    n_steps: int = 0
    v: np.ndarray | None = field(default=None, repr=False)

    @property
    def samples(self):
        v = self.v if self.v is not None else np.full(self.t.shape, np.nan)
        return [TrajectoryState(float(a), float(b), float(c)) for a, b, c in zip(self.t, self.x, v)]

    @property
    def final_x(self):
        return float(self.x[-1])


# ------------------------------------------------------------------ velocity


@njit(cache=True)
def _field_point(kind, x, t, lefts, rights, t1, kappa, alpha, norm, sigma0, nu, rl0, rp, rw, rn):
    if kind == 0:
        return free_point(x, t, sigma0, nu)
    return slit_point(x, t, lefts, rights, t1, kappa, alpha, norm, sigma0, nu, _GL_X, _GL_W, rl0, rp, rw, rn)


@njit(cache=True)
def _velocity(kind, x, t, lefts, rights, t1, kappa, alpha, norm, sigma0, nu, rl0, rp, rw, rn, hbar_m, rho_floor, rho_peak0):
    """Returns (v, ok). ok is False when rho falls below the floor."""
    psi, dpsi = _field_point(kind, x, t, lefts, rights, t1, kappa, alpha, norm, sigma0, nu, rl0, rp, rw, rn)
    rho = psi.real * psi.real + psi.imag * psi.imag
    # rho_peak0 bounds the on-axis density from above, so the exact on-axis
    # value is only computed for already-suspicious points
    if rho < rho_floor * rho_peak0:
        p0, _ = _field_point(kind, 0.0, t, lefts, rights, t1, kappa, alpha, norm, sigma0, nu, rl0, rp, rw, rn)
        if rho < rho_floor * (p0.real * p0.real + p0.imag * p0.imag) or rho == 0.0:
            return 0.0, False
    return hbar_m * (dpsi / psi).imag, True


def velocity(x, t, field, rho_floor=1e-12):
    """Guidance velocity (hbar/m) Im(psi'/psi); raises SingularityError near nodes."""
    x = np.asarray(x, dtype=float)
    psi, dpsi = field.evaluate(x, t)
    rho = np.abs(psi) ** 2
    ref = field.reference_density(t)
    if np.any(rho < rho_floor * ref) or np.any(rho == 0):
        raise SingularityError(f"density below {rho_floor:g} x on-axis peak")
    hbar_m = field.consts.hbar / field.species.mass if hasattr(field, "consts") else None
    return hbar_m * np.imag(dpsi / psi)


# ------------------------------------------------------- pre-slit & slits


def preslit_position(x0, t, beam: BeamConfig, species: ParticleSpecies, consts: PhysicalConstants = CODATA):
    """Exact pre-slit Bohmian path of the spreading Gaussian: x0 sigma(t)/sigma0."""
    return np.asarray(x0, dtype=float) * sigma_t(t, beam, species, consts) / beam.sigma0


def classify_at_slits(x_t1, apertures: ApertureSet, species: ParticleSpecies, mode=TransmissionMode.CENTER_IN_APERTURE):
    k = int(apertures.owner(float(x_t1)))
    if k < 0:
        return Fate.BLOCKED_PLATE
    ap = apertures[k]
    if not transmits(ap, species, float(x_t1), mode):
        return Fate.BLOCKED_BY_SIZE
    return Fate.TRANSMITTED_B if ap.label == "B" else Fate.TRANSMITTED_A


# ---------------------------------------------------------- integration

# Dormand-Prince 5(4) tableau
_C2, _C3, _C4, _C5 = 1 / 5, 3 / 10, 4 / 5, 8 / 9
_A21 = 1 / 5
_A31, _A32 = 3 / 40, 9 / 40
_A41, _A42, _A43 = 44 / 45, -56 / 15, 32 / 9
_A51, _A52, _A53, _A54 = 19372 / 6561, -25360 / 2187, 64448 / 6561, -212 / 729
_A61, _A62, _A63, _A64, _A65 = 9017 / 3168, -355 / 33, 46732 / 5247, 49 / 176, -5103 / 18656
_B1, _B3, _B4, _B5, _B6 = 35 / 384, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84
_E1, _E3, _E4, _E5, _E6, _E7 = (
    71 / 57600, -71 / 16695, 71 / 1920, -17253 / 339200, 22 / 525, -1 / 40,
)

STATUS_OK = 0
STATUS_SINGULAR = 1
STATUS_UNDERFLOW = 2
STATUS_MAX_STEPS = 3


@njit(cache=True)
def _integrate_one(
    x_start, t_start, t_end, t_out, kind, lefts, rights, t1, kappa, alpha, norm, sigma0, nu, rl0, rp, rw, rn,
    hbar_m, rho_floor, rho_peak0, dt_min, dt_max, rtol, atol, v_cap, max_stride, max_steps,
    x_out, v_out,
):
    """Adaptive Dormand-Prince integration of dx/dt = v(x, t) for one particle.

    Positions at the (sorted) output times t_out are filled by cubic Hermite
    interpolation over accepted steps. Returns (status, n_accepted_steps).
    """
    n_out = t_out.size
    j = 0
    while j < n_out and t_out[j] <= t_start:
        x_out[j] = x_start
        v_out[j] = 0.0
        j += 1
    t = t_start
    x = x_start
    k1, ok = _velocity(kind, x, t, lefts, rights, t1, kappa, alpha, norm, sigma0, nu, rl0, rp, rw, rn, hbar_m, rho_floor, rho_peak0)
    if not ok:
        return STATUS_SINGULAR, 0
    if j > 0:
        v_out[j - 1] = k1
    dt = dt_min
    steps = 0
    while t < t_end:
        if steps >= max_steps:
            return STATUS_MAX_STEPS, steps
        dt = min(dt, dt_max)
        if abs(k1) * dt > max_stride:
            dt = max(dt_min, max_stride / abs(k1))
        accepted = False
        while not accepted:
            k2, ok2 = _velocity(kind, x + dt * _A21 * k1, t + _C2 * dt, lefts, rights, t1, kappa, alpha, norm, sigma0, nu, rl0, rp, rw, rn, hbar_m, rho_floor, rho_peak0)
            k3, ok3 = _velocity(kind, x + dt * (_A31 * k1 + _A32 * k2), t + _C3 * dt, lefts, rights, t1, kappa, alpha, norm, sigma0, nu, rl0, rp, rw, rn, hbar_m, rho_floor, rho_peak0)
            k4, ok4 = _velocity(kind, x + dt * (_A41 * k1 + _A42 * k2 + _A43 * k3), t + _C4 * dt, lefts, rights, t1, kappa, alpha, norm, sigma0, nu, rl0, rp, rw, rn, hbar_m, rho_floor, rho_peak0)
            k5, ok5 = _velocity(kind, x + dt * (_A51 * k1 + _A52 * k2 + _A53 * k3 + _A54 * k4), t + _C5 * dt, lefts, rights, t1, kappa, alpha, norm, sigma0, nu, rl0, rp, rw, rn, hbar_m, rho_floor, rho_peak0)
            k6, ok6 = _velocity(kind, x + dt * (_A61 * k1 + _A62 * k2 + _A63 * k3 + _A64 * k4 + _A65 * k5), t + dt, lefts, rights, t1, kappa, alpha, norm, sigma0, nu, rl0, rp, rw, rn, hbar_m, rho_floor, rho_peak0)
            x_new = x + dt * (_B1 * k1 + _B3 * k3 + _B4 * k4 + _B5 * k5 + _B6 * k6)
            k7, ok7 = _velocity(kind, x_new, t + dt, lefts, rights, t1, kappa, alpha, norm, sigma0, nu, rl0, rp, rw, rn, hbar_m, rho_floor, rho_peak0)
            stages_ok = ok2 and ok3 and ok4 and ok5 and ok6 and ok7
            vmax = max(abs(k2), abs(k3), abs(k4), abs(k5), abs(k6), abs(k7))
            if stages_ok and vmax <= v_cap:
                err_abs = dt * abs(_E1 * k1 + _E3 * k3 + _E4 * k4 + _E5 * k5 + _E6 * k6 + _E7 * k7)
                scale = atol + rtol * max(abs(x), abs(x_new))
                err = err_abs / scale
            else:
                err = math.inf
            if err <= 1.0:
                accepted = True
            else:
                if dt <= dt_min:
                    if not stages_ok:
                        return STATUS_SINGULAR, steps
                    return STATUS_UNDERFLOW, steps
                if math.isinf(err):
                    factor = 0.25
                else:
                    factor = max(0.2, 0.9 * err ** -0.2)
                dt = max(dt_min, dt * factor)
        t_new = t + dt
        while j < n_out and t_out[j] <= t_new:
            # cubic Hermite on [t, t_new] with end slopes k1, k7
            s = (t_out[j] - t) / dt
            h00 = (1 + 2 * s) * (1 - s) * (1 - s)
            h10 = s * (1 - s) * (1 - s)
            h01 = s * s * (3 - 2 * s)
            h11 = s * s * (s - 1)
            x_out[j] = h00 * x + h10 * dt * k1 + h01 * x_new + h11 * dt * k7
            v_out[j] = (1 - s) * k1 + s * k7
            j += 1
        t = t_new
        x = x_new
        k1 = k7
        steps += 1
        if err == 0.0:
            factor = 5.0
        else:
            factor = min(5.0, max(0.2, 0.9 * err ** -0.2))
        dt = dt * factor
    return STATUS_OK, steps


@njit(cache=True, nogil=True)
def integrate_batch(
    x_start, t_start, t_end, t_out, kind, lefts, rights, t1, kappa, alpha, norm, sigma0, nu, rl0, rp, rw, rn,
    hbar_m, rho_floor, rho_peak0, dt_min, dt_max, rtol, atol, v_cap, max_stride, max_steps,
):
    n = x_start.size
    # samples after an abort stay NaN
    x_out = np.full((n, t_out.size), np.nan)
    v_out = np.full((n, t_out.size), np.nan)
    status = np.empty(n, dtype=np.int64)
    steps = np.empty(n, dtype=np.int64)
    for i in range(n):
        status[i], steps[i] = _integrate_one(
            x_start[i], t_start, t_end, t_out, kind, lefts, rights, t1, kappa, alpha, norm,
            sigma0, nu, rl0, rp, rw, rn, hbar_m, rho_floor, rho_peak0, dt_min, dt_max, rtol, atol, v_cap,
            max_stride, max_steps, x_out[i], v_out[i],
        )
    return x_out, v_out, status, steps


def output_times(t_start, t_end, n_log=96, tau_min=1e-12):
    """Log-spaced sample times after t_start, ending exactly at t_end."""
    span = t_end - t_start
    lo = min(tau_min, span * 1e-3)
    return np.concatenate(([t_start], t_start + np.geomspace(lo, span, n_log)[:-1], [t_end]))


# ------------------------------------------------------- near-field bridge


def incident_quantile(x_t1, ctx):
    """Fraction of the transmitted incident flux lying left of x_t1 at t1."""
    x_t1 = np.asarray(x_t1, dtype=float)
    sig = float(sigma_t(ctx.t1, ctx.beam, ctx.species, ctx.consts))
    lo = ndtr(ctx.apertures.lefts / sig)
    mass = ndtr(ctx.apertures.rights / sig) - lo
    cum = np.concatenate(([0.0], np.cumsum(mass)))
    k = np.clip(np.searchsorted(ctx.apertures.lefts, x_t1, side="right") - 1, 0, len(mass) - 1)
    partial = np.clip(ndtr(x_t1 / sig) - lo[k], 0.0, mass[k])
    below = np.where(x_t1 < ctx.apertures.lefts[0], 0.0, cum[k] + partial)
    return below / cum[-1]


def fresnel_time(apertures: ApertureSet, species: ParticleSpecies, consts: PhysicalConstants = CODATA):
    """m D^2 / h for the full extent D of the aperture set."""
    extent = float(apertures.rights[-1] - apertures.lefts[0])
    return species.mass * extent**2 / consts.h


@dataclass(frozen=True)
class QuantileBridge:
    """Exact 1-D position map x(t1) -> x(t1 + tau) from flux conservation.

    Bohmian paths in one dimension never cross and carry |psi|^2 along, so the
    mass to the left of a particle is constant in time. Just behind the slits
    the guidance field is dominated by rapidly sweeping edge and grating-order
    interference; the map replaces stepping through that layer by inverting
    the cumulative density at t1 + tau. Beyond the sampled window the density
    is modelled by its mean 1/x^2 edge-diffraction tail, split evenly.
    """

    tau: float
    x: np.ndarray
    cdf: np.ndarray
    pdf: np.ndarray
    tail: float
    centre: float

    @classmethod
    def build(cls, field, tau, fringe_points=4, window_factor=20.0, max_points=2_000_000):
        ctx = field.ctx
        if not tau > 0:
            raise ValueError("bridge time must be > 0")
        aps = ctx.apertures
        hm = ctx.consts.h / ctx.species.mass
        lo, hi = float(aps.lefts[0]), float(aps.rights[-1])
        extent = hi - lo
        w_min = float(np.min(aps.rights - aps.lefts))
        centre = 0.5 * (lo + hi)
        half = max(window_factor * hm * tau / w_min, 4 * extent)
        # resolve the finest two-source fringe and the Fresnel zone
        dx = min(hm * tau / (extent * fringe_points), math.sqrt(ctx.consts.hbar * tau / ctx.species.mass) / 4)
        n = min(max_points, int(math.ceil(2 * half / dx)) + 1)
        x = np.linspace(centre - half, centre + half, n)
        psi, _ = field.evaluate(x, ctx.t1 + tau)
        rho = np.abs(psi) ** 2
        sig = float(sigma_t(ctx.t1, ctx.beam, ctx.species, ctx.consts))
        total = float(np.sum(ndtr(aps.rights / sig) - ndtr(aps.lefts / sig)))
        inner = cumulative_simpson(rho, x=x, initial=0.0)
        tail = max(total - inner[-1], 0.0) / (2 * total)
        return cls(tau=float(tau), x=x, cdf=tail + inner / total, pdf=rho / total, tail=tail, centre=centre)

    def position(self, q):
        """Inverse of the cumulative distribution (vectorised)."""
        q = np.asarray(q, dtype=float)
        x, cdf, pdf = self.x, self.cdf, self.pdf
        out = np.empty(q.shape)
        left = q < cdf[0]
        right = q > cdf[-1]
        if self.tail > 0:
            c = self.tail * (x[-1] - self.centre)
            out[left] = self.centre - c / np.maximum(q[left], 1e-300)
            out[right] = self.centre + c / np.maximum(1.0 - q[right], 1e-300)
        else:
            out[left] = x[0]
            out[right] = x[-1]
        mid = ~(left | right)
        qm = q[mid]
        k = np.clip(np.searchsorted(cdf, qm, side="right") - 1, 0, x.size - 2)
        h = x[k + 1] - x[k]
        c0, c1 = cdf[k], cdf[k + 1]
        m0, m1 = pdf[k] * h, pdf[k + 1] * h
        s_lo = np.zeros(qm.shape)
        s_hi = np.ones(qm.shape)
        for _ in range(52):
            s = 0.5 * (s_lo + s_hi)
            s2 = s * s
            s3 = s2 * s
            val = (2 * s3 - 3 * s2 + 1) * c0 + (s3 - 2 * s2 + s) * m0 + (3 * s2 - 2 * s3) * c1 + (s3 - s2) * m1
            below = val < qm
            s_lo = np.where(below, s, s_lo)
            s_hi = np.where(below, s_hi, s)
        out[mid] = x[k] + 0.5 * (s_lo + s_hi) * h
        return out

    def map(self, x_t1, ctx):
        return self.position(incident_quantile(x_t1, ctx))


def bridge_for(field, icfg: IntegratorConfig, t_end: float):
    """The (cached) near-field bridge for a post-slit field, or None."""
    if field.kind == 0 or icfg.bridge_time == 0:
        return None
    ctx = field.ctx
    tau = icfg.bridge_time
    if tau is None:
        tau = fresnel_time(ctx.apertures, ctx.species, ctx.consts)
    tau = min(tau, 0.1 * (t_end - ctx.t1))
    cache = field.__dict__.setdefault("_bridges", {})
    if tau not in cache:
        cache[tau] = QuantileBridge.build(field, tau)
    return cache[tau]


# ---------------------------------------------------------------- driver


def run_batch(x_start, field, t_start, t_end, icfg: IntegratorConfig, t_out=None):
    """Integrate many independent trajectories through `field` from t_start to t_end.

    Post-slit runs starting at t1 cross the near-field layer through the
    quantile bridge and are integrated from t1 + tau onwards; the returned
    samples then include (t1, x_t1) and (t1 + tau, bridged x).
    """
    x_start = np.ascontiguousarray(x_start, dtype=float)
    bridge = None
    if field.kind == 1 and t_start == field.ctx.t1:
        bridge = bridge_for(field, icfg, t_end)
    t_int = t_start if bridge is None else t_start + bridge.tau
    if t_out is None:
        t_out = output_times(t_int, t_end)
        if bridge is not None:
            t_out = np.concatenate(([t_start], t_out))
    t_out = np.ascontiguousarray(t_out, dtype=float)
    x_int = x_start if bridge is None else bridge.map(x_start, field.ctx)
    kind, lefts, rights, t1, kappa, alpha, norm, sigma0, nu, rl0, rp, rw, rn = field.numba_args()
    hbar_m = field.consts.hbar / field.species.mass
    rho_peak0 = _density_bound(field)
    late = t_out >= t_int
    x_out = np.empty((x_start.size, t_out.size))
    v_out = np.empty((x_start.size, t_out.size))
    xs, vs, status, steps = integrate_batch(
        x_int, float(t_int), float(t_end), np.ascontiguousarray(t_out[late]), kind,
        lefts, rights, t1, kappa, alpha, norm, sigma0, nu, rl0, rp, rw, rn, hbar_m, icfg.rho_floor, rho_peak0,
        icfg.dt_min, icfg.dt_max, icfg.rel_tol, icfg.abs_tol, icfg.v_cap, icfg.max_stride,
        icfg.max_steps,
    )
    x_out[:, late] = xs
    v_out[:, late] = vs
    if bridge is not None and not late.all():
        # straight segment through the bridged layer
        frac = (t_out[~late] - t_start) / bridge.tau
        x_out[:, ~late] = x_start[:, None] + frac[None, :] * (x_int - x_start)[:, None]
        v_out[:, ~late] = ((x_int - x_start) / bridge.tau)[:, None]
    return t_out, x_out, v_out, status, steps


def _density_bound(field):
    # Fresnel edge and Talbot focusing stay well below 16x the incident peak
    if field.kind == 0:
        return field.reference_density(0.0)
    ctx = field.ctx
    return 16.0 * float(1.0 / (math.sqrt(2 * math.pi) * sigma_t(ctx.t1, ctx.beam, ctx.species, ctx.consts)))


def integrate_post_slit(x_t1, field, icfg: IntegratorConfig, t2: float, t_out=None):
    """One post-slit trajectory tail over (t1, t2]; raises on singular/underflow."""
    t1 = field.ctx.t1
    t_out, x_out, v_out, status, steps = run_batch(np.array([x_t1]), field, t1, t2, icfg, t_out)
    if status[0] == STATUS_SINGULAR:
        raise SingularityError(f"trajectory from x={x_t1:g} hit a density node")
    if status[0] in (STATUS_UNDERFLOW, STATUS_MAX_STEPS):
        raise StepUnderflow(f"trajectory from x={x_t1:g}: step size underflow")
    return Trajectory(id=0, x0=float(x_t1), t=t_out, x=x_out[0], fate=Fate.TRANSMITTED_A, n_steps=int(steps[0]), v=v_out[0])
