"""Post-slit wavefunction: free-particle kernel restricted to the aperture set.

Two independent evaluation routes are provided:

* ``psi_after_quadrature`` integrates kernel * psi_free(., t1) over each
  aperture with composite Gauss-Legendre panels. It is slow and serves as
  the oracle.
* ``psi_after_closed`` / ``grad_psi_after`` complete the square in the
  Gaussian-times-chirp integrand and write each aperture contribution with
  the scaled complex error function. This is the path used for trajectories.

For one aperture [L, R] and beta = m / (2 hbar (t - t1)),

    I(x) = int_L^R exp(-alpha x_f^2 + i beta (x - x_f)^2) dx_f
         = sqrt(pi) / (2 sqrt(a)) * (h(L) - h(R)),     a = alpha - i beta,

where h(e) = exp(E(e)) w(i zeta_e) for Re zeta_e >= 0 and
2 exp(C) - exp(E(e)) w(-i zeta_e) otherwise, with E the integrand exponent,
zeta_e = sqrt(a) ((e - x) + alpha x / a) and C = i alpha beta x^2 / a.
Every exponential involved has non-positive real part, so nothing overflows.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import cached_property

import numpy as np
from numba import njit
from scipy import integrate

from .core import (
    CODATA,
    ApertureSet,
    BeamConfig,
    ParticleSpecies,
    PhysicalConstants,
    dpsi_free,
    psi_free,
    s_param,
    sigma_t,
)
from .faddeeva import faddeeva_w

PANEL_NODES = 32
_GL_X, _GL_W = np.polynomial.legendre.leggauss(PANEL_NODES)
_SQRT_PI = math.sqrt(math.pi)
# relative accuracy of one w(z) * exp(E) term
_TERM_EPS = 1e-13
# closed form is abandoned for an aperture when its estimated error exceeds this
CANCELLATION_TOL = 1e-10


class SingularityError(ArithmeticError):
    """Density too small for the guidance velocity to be meaningful."""


def node_count(beta, offset, width, min_nodes=16):
    """Quadrature nodes needed for one aperture: ten per 2*pi of kernel phase."""
    span = beta * (np.abs(2 * offset) * width + width * width)
    return np.maximum(min_nodes, np.ceil(10 * span / (2 * math.pi))).astype(np.int64)


@dataclass(frozen=True)
class PropagationContext:
    apertures: ApertureSet
    beam: BeamConfig
    species: ParticleSpecies
    consts: PhysicalConstants
    t1: float
    alpha: complex  # Gaussian inverse variance at t1, 1/(4 sigma0 s(t1))
    norm: complex  # (2 pi s(t1)^2)^(-1/4)
    kappa: float  # m / (2 hbar); beta(t) = kappa / (t - t1)

    @classmethod
    def build(cls, apertures, beam, species, t1, consts=CODATA):
        if not t1 > 0:
            raise ValueError("t1 must be > 0")
        s1 = complex(s_param(t1, beam, species, consts))
        return cls(
            apertures=apertures,
            beam=beam,
            species=species,
            consts=consts,
            t1=float(t1),
            alpha=1.0 / (4 * beam.sigma0 * s1),
            norm=(2 * math.pi) ** -0.25 / np.sqrt(s1),
            kappa=species.mass / (2 * consts.hbar),
        )

    @cached_property
    def runs(self):
        return aperture_runs(self.apertures)

    def beta(self, t):
        return self.kappa / (np.asarray(t, dtype=float) - self.t1)

    @property
    def nu(self):
        return self.consts.hbar / (2 * self.species.mass * self.beam.sigma0**2)


@dataclass(frozen=True)
class WaveSample:
    x: np.ndarray
    psi: np.ndarray
    dpsi_dx: np.ndarray
    rho: np.ndarray


def kernel(x, t, x_f, t1, species: ParticleSpecies, consts: PhysicalConstants = CODATA):
    """Free-particle propagator K(x, t; x_f, t1), principal-branch prefactor."""
    dt = np.asarray(t, dtype=float) - t1
    if np.any(dt <= 0):
        raise ValueError("kernel requires t > t1")
    m, hbar = species.mass, consts.hbar
    pref = np.sqrt(m / (2j * math.pi * hbar * dt))
    return pref * np.exp(1j * m * (np.asarray(x) - np.asarray(x_f)) ** 2 / (2 * hbar * dt))


def _check_args(t, ctx):
    if len(ctx.apertures) == 0:
        raise ValueError("aperture set is empty")
    if not np.all(np.asarray(t, dtype=float) > ctx.t1):
        raise ValueError("post-slit evaluation requires t > t1")


# ---------------------------------------------------------------- oracle


def psi_after_quadrature(x, t, ctx: PropagationContext, refine=1, min_nodes=16):
    """Gauss-Legendre evaluation of the aperture-restricted propagator integral.

    `refine` multiplies the number of panels (refine=2 doubles every node count).
    """
    _check_args(t, ctx)
    x = np.atleast_1d(np.asarray(x, dtype=float))
    beta = float(ctx.beta(t))
    out = np.zeros(x.shape, dtype=complex)
    for ap in ctx.apertures:
        n = node_count(beta, x - ap.center, ap.width, min_nodes)
        panels = refine * -(-n // PANEL_NODES)
        for p in np.unique(panels):
            sel = panels == p
            edges = np.linspace(ap.left, ap.right, p + 1)
            half = 0.5 * np.diff(edges)
            mid = 0.5 * (edges[1:] + edges[:-1])
            xf = (mid[:, None] + half[:, None] * _GL_X[None, :]).ravel()
            wts = (half[:, None] * _GL_W[None, :]).ravel()
            f = psi_free(xf, ctx.t1, ctx.beam, ctx.species, ctx.consts) * wts
            # kernel(x, x_f) = kernel(x, 0) * exp(i beta (x_f^2 - 2 x x_f)); the
            # common factor keeps the summed phases small
            xs = x[sel]
            chirp = np.exp(1j * beta * (xf[None, :] ** 2 - 2 * xs[:, None] * xf[None, :]))
            out[sel] += kernel(xs, t, 0.0, ctx.t1, ctx.species, ctx.consts) * (chirp @ f)
    return out


# ---------------------------------------------------------- closed form


@njit(cache=True)
def _aperture_quad(x, beta, alpha, left, right, n_nodes, gl_x, gl_w):
    n_panels = (n_nodes + gl_x.size - 1) // gl_x.size
    h = (right - left) / n_panels
    val = 0j
    der = 0j
    for p in range(n_panels):
        mid = left + (p + 0.5) * h
        for k in range(gl_x.size):
            xf = mid + 0.5 * h * gl_x[k]
            d = x - xf
            # exp(i beta x^2) is factored out of the kernel
            e = np.exp(-alpha * xf * xf + 1j * beta * xf * (xf - 2.0 * x)) * (0.5 * h * gl_w[k])
            val += e
            der += 2j * beta * d * e
    return val, der


def aperture_runs(apertures: ApertureSet, rtol=1e-12):
    """Group consecutive equal-width, equally spaced apertures.

    Returns arrays (first_left, period, width, count), one entry per run.
    """
    l0, per, wid, cnt = [], [], [], []
    aps = list(apertures)
    i = 0
    while i < len(aps):
        j = i + 1
        w = aps[i].width
        p = aps[j].center - aps[i].center if j < len(aps) else 0.0
        while (
            j < len(aps)
            and abs(aps[j].width - w) <= rtol * w
            and abs((aps[j].center - aps[j - 1].center) - p) <= rtol * p
        ):
            j += 1
        l0.append(aps[i].left)
        per.append(p if j - i > 1 else 0.0)
        wid.append(w)
        cnt.append(j - i)
        i = j
    return (np.array(l0, dtype=float), np.array(per, dtype=float),
            np.array(wid, dtype=float), np.array(cnt, dtype=np.int64))


# Narrow-slit expansion: below these the closed form loses digits to
# cancellation, while the moment series converges in a handful of terms.
U_SWITCH = 1.0
B_SWITCH = 0.5
_MOMENT_TERMS = 10
_GAUSS_TERMS = 17


@njit(cache=True)
def _moment_coefficients(b, umax):
    """A_m = mu_2m/(2m)! and B_m = mu_2m/(2m-1)!, mu_2m = int_-1^1 s^2m exp(-b s^2) ds.

    Series are cut once the next term is below 1e-18 for |b|, |u| <= the bounds
    given; returns the number of moment terms kept.
    """
    c = np.empty(_GAUSS_TERMS, dtype=np.complex128)
    c[0] = 1.0
    n_gauss = 1
    while n_gauss < _GAUSS_TERMS and abs(c[n_gauss - 1]) > 1e-18:
        c[n_gauss] = c[n_gauss - 1] * (-b) / n_gauss
        n_gauss += 1
    am = np.empty(_MOMENT_TERMS, dtype=np.complex128)
    bm = np.empty(_MOMENT_TERMS, dtype=np.complex128)
    u2 = umax * umax
    fact = 1.0
    bound = 1.0
    m_terms = 0
    for m in range(_MOMENT_TERMS):
        mu = 0j
        for n in range(n_gauss - 1, -1, -1):
            mu += c[n] * (2.0 / (2 * m + 2 * n + 1))
        if m > 0:
            fact_odd = fact * (2 * m - 1)
            fact = fact_odd * (2 * m)
            bm[m] = mu / fact_odd
            bound *= u2 / ((2 * m - 1) * (2 * m))
        else:
            bm[m] = 0.0
        am[m] = mu / fact
        m_terms = m + 1
        if bound < 1e-18:
            break
    return am, bm, m_terms


@njit(cache=True, fastmath={"arcp", "contract"})
def _run_sum(x, beta, alpha, a, sqrt_a, c_term, l0, period, width, count, gl_x, gl_w):
    """Aperture integrals I and dI/dx summed over one uniform run.

    Each slit uses either the erfc closed form or, when its phase span is
    small, the even-moment expansion about its centre. Exponentials of the
    quadratic exponent at edges and centres follow two-level multiplicative
    recurrences in the slit index; zeta and the centre slope are arithmetic.
    """
    h = 0.5 * width
    b = a * h * h
    taylor_ok = abs(b) <= B_SWITCH
    u = -2.0 * h * (a * (l0 + h) + 1j * beta * x)
    du = -2.0 * h * a * period
    if taylor_ok:
        umax = min(U_SWITCH, max(abs(u), abs(u + (count - 1) * du)))
        am, bm, m_terms = _moment_coefficients(b, umax)
    else:
        am = np.zeros(1, dtype=np.complex128)
        bm = am
        m_terms = 1
    shift = alpha * x / a
    zl = sqrt_a * ((l0 - x) + shift)
    zr = zl + sqrt_a * width
    dz = sqrt_a * period
    c0 = l0 + h
    r0 = l0 + width
    # every exponential carries the common factor exp(-i beta x^2)
    fl = np.exp(-alpha * l0 * l0 + 1j * beta * l0 * (l0 - 2.0 * x))
    fr = np.exp(-alpha * r0 * r0 + 1j * beta * r0 * (r0 - 2.0 * x))
    fc = np.exp(-alpha * c0 * c0 + 1j * beta * c0 * (c0 - 2.0 * x))
    if count > 1:
        q = -a * period * period
        q2 = np.exp(2.0 * q)
        gl = np.exp(-2.0 * period * (a * l0 + 1j * beta * x) + q)
        gr = np.exp(-2.0 * period * (a * r0 + 1j * beta * x) + q)
        gc = np.exp(-2.0 * period * (a * c0 + 1j * beta * x) + q)
    else:
        q2 = 0j
        gl = 0j
        gr = 0j
        gc = 0j
    k_int = _SQRT_PI / (2.0 * sqrt_a)
    k_x = 2j * alpha * beta * x / a
    k_edge = 1j * beta / a
    val = 0j
    edge = 0j
    tot_i = 0j
    tot_d = 0j
    for j in range(count):
        if taylor_ok and abs(u) <= U_SWITCH:
            v = u * u
            s0 = am[m_terms - 1]
            s1 = bm[m_terms - 1]
            for m in range(m_terms - 2, -1, -1):
                s0 = s0 * v + am[m]
                if m > 0:
                    s1 = s1 * v + bm[m]
            cj = c0 + j * period
            ij = fc * h * s0
            tot_i += ij
            tot_d += 2j * beta * ((x - cj) * ij - fc * h * h * u * s1)
        else:
            if zl.real >= 0.0:
                hl = fl * faddeeva_w(1j * zl)
            else:
                hl = -fl * faddeeva_w(-1j * zl)
            if zr.real >= 0.0:
                hr = fr * faddeeva_w(1j * zr)
            else:
                hr = -fr * faddeeva_w(-1j * zr)
            diff = hl - hr
            scale = abs(hl) + abs(hr)
            if zl.real < 0.0 and zr.real >= 0.0:
                diff += c_term
                scale += abs(c_term)
            if _TERM_EPS * scale > CANCELLATION_TOL * abs(diff):
                left = l0 + j * period
                right = left + width
                span = beta * (abs(2.0 * x - left - right) * width + width * width)
                n_nodes = max(16, int(math.ceil(10.0 * span / (2.0 * math.pi))))
                qv, qd = _aperture_quad(x, beta, alpha, left, right, n_nodes, gl_x, gl_w)
                tot_i += qv
                tot_d += qd
            else:
                val += diff
                edge += fr - fl
        zl += dz
        zr += dz
        u += du
        fl *= gl
        fr *= gr
        fc *= gc
        gl *= q2
        gr *= q2
        gc *= q2
    closed_i = k_int * val
    return tot_i + closed_i, tot_d + k_x * closed_i + k_edge * edge


@njit(cache=True)
def slit_point(x, t, lefts, rights, t1, kappa, alpha, norm, sigma0, nu, gl_x, gl_w,
               run_l0, run_p, run_w, run_n):
    """psi and dpsi/dx of the post-slit field at one point.

    At t <= t1 this returns the incident packet inside the apertures and zero
    outside, the t -> t1+ limit for interior points.
    """
    tau = t - t1
    if tau <= 0.0:
        inside = False
        for k in range(lefts.size):
            if lefts[k] <= x <= rights[k]:
                inside = True
                break
        if not inside:
            return 0j, 0j
        g = norm * np.exp(-alpha * x * x)
        return g, -2.0 * alpha * x * g
    beta = kappa / tau
    a = alpha - 1j * beta
    sqrt_a = np.sqrt(a)
    phase = np.exp(1j * beta * x * x)
    # only used when x lies over an aperture, where beta x^2 stays moderate
    c_term = 2.0 * np.exp(1j * alpha * beta * x * x / a) / phase
    integral = 0j
    deriv = 0j
    for r in range(run_n.size):
        v, d = _run_sum(x, beta, alpha, a, sqrt_a, c_term, run_l0[r], run_p[r], run_w[r], run_n[r], gl_x, gl_w)
        integral += v
        deriv += d
    pref = norm * math.sqrt(beta / math.pi) * (1.0 - 1j) / math.sqrt(2.0) * phase
    return pref * integral, pref * deriv


@njit(cache=True)
def free_point(x, t, sigma0, nu):
    s = sigma0 * (1.0 + 1j * nu * t)
    g = (2.0 * math.pi) ** -0.25 / np.sqrt(s) * np.exp(-x * x / (4.0 * sigma0 * s))
    return g, -x / (2.0 * sigma0 * s) * g


@njit(cache=True)
def _slit_grid(xs, ts, lefts, rights, t1, kappa, alpha, norm, sigma0, nu, gl_x, gl_w, runs, psi, dpsi):
    run_l0, run_p, run_w, run_n = runs
    for i in range(xs.size):
        psi[i], dpsi[i] = slit_point(xs[i], ts[i], lefts, rights, t1, kappa, alpha, norm, sigma0, nu,
                                     gl_x, gl_w, run_l0, run_p, run_w, run_n)


def _closed(x, t, ctx):
    x, t = np.broadcast_arrays(np.asarray(x, dtype=float), np.asarray(t, dtype=float))
    xs = np.ascontiguousarray(x.ravel())
    ts = np.ascontiguousarray(t.ravel())
    psi = np.empty(xs.size, dtype=complex)
    dpsi = np.empty(xs.size, dtype=complex)
    _slit_grid(
        xs, ts, ctx.apertures.lefts, ctx.apertures.rights, ctx.t1, ctx.kappa,
        complex(ctx.alpha), complex(ctx.norm), ctx.beam.sigma0, ctx.nu, _GL_X, _GL_W, ctx.runs, psi, dpsi,
    )
    return psi.reshape(x.shape), dpsi.reshape(x.shape)


def psi_after_closed(x, t, ctx: PropagationContext):
    _check_args(t, ctx)
    return _closed(x, t, ctx)[0]


def grad_psi_after(x, t, ctx: PropagationContext):
    _check_args(t, ctx)
    return _closed(x, t, ctx)[1]


def transmitted_fraction(ctx: PropagationContext) -> float:
    """Probability flux of the incident packet entering the apertures at t1."""
    sig = float(sigma_t(ctx.t1, ctx.beam, ctx.species, ctx.consts))
    norm = 1.0 / (math.sqrt(2 * math.pi) * sig)
    total = 0.0
    for ap in ctx.apertures:
        val, _ = integrate.quad(
            lambda u: norm * math.exp(-0.5 * (u / sig) ** 2), ap.left, ap.right,
            epsabs=0.0, epsrel=1e-13, limit=200,
        )
        total += val
    return total


# ------------------------------------------------------------ wave fields


class FreeField:
    """Unobstructed spreading Gaussian; also the pre-slit field."""

    kind = 0

    def __init__(self, beam: BeamConfig, species: ParticleSpecies, consts: PhysicalConstants = CODATA):
        self.beam = beam
        self.species = species
        self.consts = consts

    def evaluate(self, x, t):
        return (
            psi_free(x, t, self.beam, self.species, self.consts),
            dpsi_free(x, t, self.beam, self.species, self.consts),
        )

    def reference_density(self, t):
        return float(1.0 / (math.sqrt(2 * math.pi) * sigma_t(t, self.beam, self.species, self.consts)))

    def numba_args(self):
        empty = np.zeros(0)
        nu = self.consts.hbar / (2 * self.species.mass * self.beam.sigma0**2)
        return (0, empty, empty, 0.0, 0.0, 0j, 0j, self.beam.sigma0, nu,
                empty, empty, empty, np.zeros(0, dtype=np.int64))


class SlitField:
    """Field behind the slit plane for a fixed aperture set."""

    kind = 1

    def __init__(self, ctx: PropagationContext):
        self.ctx = ctx
        self.species = ctx.species
        self.consts = ctx.consts

    def evaluate(self, x, t):
        if len(self.ctx.apertures) == 0:
            raise ValueError("aperture set is empty")
        return _closed(x, t, self.ctx)

    def reference_density(self, t):
        psi, _ = self.evaluate(0.0, t)
        return float(abs(psi) ** 2)

    def numba_args(self):
        c = self.ctx
        return (
            1, c.apertures.lefts, c.apertures.rights, c.t1, c.kappa,
            complex(c.alpha), complex(c.norm), c.beam.sigma0, c.nu, *c.runs,
        )


def sample(field, x, t) -> WaveSample:
    x = np.asarray(x, dtype=float)
    psi, dpsi = field.evaluate(x, t)
    return WaveSample(x=x, psi=psi, dpsi_dx=dpsi, rho=np.abs(psi) ** 2)
