"""Realized semimartingale trajectories with explicit decompositions.

A path of ``dX = b dt + sigma dW + int beta(e) N(dt, de)`` is generated by a
left-point Euler scheme on a time grid that contains every Poisson event
time exactly.  Each grid interval ``(t_k, t_{k+1}]`` is split into a
continuous sub-step (drift and Brownian increment, coefficients frozen at
``t_k``) followed by the jump sub-step at ``t_{k+1}`` (jump map evaluated at
the pre-jump state).  The path keeps the continuous martingale part ``M``
and the finite variation part ``V`` (drift plus jumps) separately so that
``X = X_0 + M + V`` holds exactly at every grid point.

Brownian coordinates carry labels ``(source, k)``.  Two paths driven by the
same labelled coordinate are correlated through it, which is how the
generator-exact covariation decides which coordinates are shared.
"""

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np


class PathError(ValueError):
    """Invalid grid, driver or path argument."""


class SimulationError(RuntimeError):
    """Coefficient evaluation produced non-finite values."""


# --------------------------------------------------------------------------
# Seeds
# --------------------------------------------------------------------------

def derive_seed(seed, *keys):
    """Child ``SeedSequence`` for ``(seed, *keys)``.

    Keys are appended to the spawn key, so the result depends only on the
    root seed and the key path, never on how many streams were created
    before.  This is what makes parallel runs independent of worker count.
    """
    keys = tuple(int(k) for k in keys)
    if isinstance(seed, np.random.SeedSequence):
        return np.random.SeedSequence(seed.entropy, spawn_key=tuple(seed.spawn_key) + keys)
    seed = int(seed)
    if seed < 0:
        raise PathError("seed must be non-negative")
    return np.random.SeedSequence(seed, spawn_key=keys)


def make_rng(seed, *keys):
    """Generator seeded by ``derive_seed(seed, *keys)``."""
    return np.random.default_rng(derive_seed(seed, *keys))


# --------------------------------------------------------------------------
# Time grids
# --------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class TimeGrid:
    """Strictly increasing time points from ``t_start`` to ``t_end``."""

    t_start: float
    t_end: float
    points: np.ndarray = field(repr=False)

    def __post_init__(self):
        p = np.asarray(self.points, dtype=float)
        p.setflags(write=False)
        object.__setattr__(self, "points", p)
        if p.ndim != 1 or p.size < 2:
            raise PathError("a grid needs at least two points")
        if p[0] != self.t_start or p[-1] != self.t_end:
            raise PathError("grid must start at t_start and end at t_end")
        if np.any(np.diff(p) <= 0):
            raise PathError("grid points must be strictly increasing")

    def __eq__(self, other):
        return isinstance(other, TimeGrid) and np.array_equal(self.points, other.points)

    def __hash__(self):
        return hash(self.points.tobytes())

    def __len__(self):
        return self.points.size

    @property
    def n_steps(self):
        return self.points.size - 1

    @property
    def dt(self):
        return np.diff(self.points)

    @property
    def tolerance(self):
        return 1e-12 * (self.t_end - self.t_start)

    def index(self, t):
        """Grid index of time ``t`` (within a relative tolerance of 1e-12)."""
        idx = self.indices(np.atleast_1d(t))
        return int(idx[0])

    def indices(self, times):
        """Grid indices of an array of times; raises if any is off-grid."""
        times = np.asarray(times, dtype=float)
        if times.size == 0:
            return np.zeros(0, dtype=int)
        k = np.clip(np.searchsorted(self.points, times), 0, self.points.size - 1)
        km = np.clip(k - 1, 0, self.points.size - 1)
        pick = np.where(np.abs(self.points[km] - times) < np.abs(self.points[k] - times), km, k)
        if np.any(np.abs(self.points[pick] - times) > self.tolerance):
            bad = times[np.abs(self.points[pick] - times) > self.tolerance][0]
            raise PathError(f"time {bad!r} is not a grid point")
        return pick

    def contains(self, t):
        try:
            self.index(t)
        except PathError:
            return False
        return True

    def merged(self, times):
        """Grid with extra times inserted (existing points take priority)."""
        times = np.unique(np.asarray(times, dtype=float).ravel())
        if times.size == 0:
            return self
        if np.any(times <= self.t_start) or np.any(times > self.t_end):
            raise PathError("extra times must lie in (t_start, t_end]")
        k = np.clip(np.searchsorted(self.points, times), 1, self.points.size - 1)
        near = np.minimum(np.abs(self.points[k] - times), np.abs(self.points[k - 1] - times))
        new = times[near > self.tolerance]
        if new.size == 0:
            return self
        keep = np.concatenate([[True], np.diff(new) > self.tolerance])
        pts = np.sort(np.concatenate([self.points, new[keep]]))
        return TimeGrid(self.t_start, self.t_end, pts)

    def is_refinement_of(self, other):
        """True when every point of ``other`` is a point of this grid."""
        try:
            self.indices(other.points)
        except PathError:
            return False
        return self.t_start == other.t_start and self.t_end == other.t_end


def build_time_grid(t_start, t_end, n_steps, extra_times=()):
    """Uniform grid of ``n_steps`` intervals merged with ``extra_times``.

    Examples
    --------
    >>> build_time_grid(0.0, 1.0, 2, [0.3]).points
    array([0. , 0.3, 0.5, 1. ])
    """
    t_start, t_end = float(t_start), float(t_end)
    if not t_start < t_end:
        raise PathError("t_start must be smaller than t_end")
    if int(n_steps) != n_steps or n_steps < 1:
        raise PathError("n_steps must be a positive integer")
    base = np.linspace(t_start, t_end, int(n_steps) + 1)
    base[0], base[-1] = t_start, t_end
    return TimeGrid(t_start, t_end, base).merged(extra_times)


# --------------------------------------------------------------------------
# Jump intensities
# --------------------------------------------------------------------------

class PointMark:
    """Degenerate mark distribution at a single value."""

    def __init__(self, value=1.0):
        self.value = np.atleast_1d(np.asarray(value, dtype=float))

    @property
    def dim(self):
        return self.value.size

    def sample(self, rng, n):
        return np.tile(self.value, (n, 1))

    def quadrature(self):
        return self.value[None, :], np.ones(1)

    def describe(self):
        return {"kind": "point", "value": self.value.tolist()}


class DiscreteMarks:
    """Finite mark space with probabilities."""

    def __init__(self, values, probs):
        v = np.asarray(values, dtype=float)
        self.values = v[:, None] if v.ndim == 1 else v
        p = np.asarray(probs, dtype=float)
        if p.shape != (self.values.shape[0],) or np.any(p < 0) or not np.isclose(p.sum(), 1.0):
            raise PathError("discrete mark probabilities must be nonnegative and sum to 1")
        self.probs = p / p.sum()

    @property
    def dim(self):
        return self.values.shape[1]

    def sample(self, rng, n):
        return self.values[rng.choice(self.probs.size, size=n, p=self.probs)]

    def quadrature(self):
        return self.values, self.probs

    def describe(self):
        return {"kind": "discrete", "values": self.values.tolist(), "probs": self.probs.tolist()}


class NormalMarks:
    """Scalar Gaussian marks; Gauss-Hermite nodes for integrals against nu."""

    def __init__(self, mean=0.0, sd=1.0, order=24):
        if sd < 0:
            raise PathError("mark standard deviation must be nonnegative")
        self.mean, self.sd, self.order = float(mean), float(sd), int(order)

    dim = 1

    def sample(self, rng, n):
        return (self.mean + self.sd * rng.standard_normal(n))[:, None]

    def quadrature(self):
        x, w = np.polynomial.hermite_e.hermegauss(self.order)
        return (self.mean + self.sd * x)[:, None], w / w.sum()

    def describe(self):
        return {"kind": "normal", "mean": self.mean, "sd": self.sd}


class UniformMarks:
    """Scalar uniform marks on ``[low, high]``; Gauss-Legendre quadrature."""

    def __init__(self, low=0.0, high=1.0, order=24):
        if not low < high:
            raise PathError("uniform marks need low < high")
        self.low, self.high, self.order = float(low), float(high), int(order)

    dim = 1

    def sample(self, rng, n):
        return rng.uniform(self.low, self.high, n)[:, None]

    def quadrature(self):
        x, w = np.polynomial.legendre.leggauss(self.order)
        mid, half = 0.5 * (self.low + self.high), 0.5 * (self.high - self.low)
        return (mid + half * x)[:, None], w / w.sum()

    def describe(self):
        return {"kind": "uniform", "low": self.low, "high": self.high}


@dataclass(frozen=True)
class JumpIntensity:
    """Finite intensity ``nu = rate * P_marks`` on the mark space."""

    rate: float
    marks: object = field(default_factory=PointMark)

    def __post_init__(self):
        rate = float(self.rate)
        if not np.isfinite(rate) or rate < 0:
            raise PathError(f"jump intensity must be finite and nonnegative, got {self.rate!r}")
        object.__setattr__(self, "rate", rate)

    @property
    def total_mass(self):
        return self.rate

    def quadrature(self):
        """Nodes and weights with ``sum(weights) = nu(E)``."""
        nodes, w = self.marks.quadrature()
        return nodes, self.rate * w


def _sample_events(rng, grid, intensity, n_owners):
    """Event times in ``(t_start, t_end)``, owner indices and marks, sorted by time."""
    if intensity is None or intensity.rate == 0:
        return np.zeros(0), np.zeros(0, dtype=int), np.zeros((0, 1))
    span = grid.t_end - grid.t_start
    counts = rng.poisson(intensity.rate * span, size=n_owners)
    total = int(counts.sum())
    u = rng.random(total)
    # endpoints have probability zero; redraw them rather than guess semantics
    while np.any(u == 0.0):
        u[u == 0.0] = rng.random(int(np.sum(u == 0.0)))
    times = grid.t_end - span * u
    owners = np.repeat(np.arange(n_owners), counts)
    marks = intensity.marks.sample(rng, total).reshape(total, intensity.marks.dim)
    order = np.argsort(times, kind="stable")
    return times[order], owners[order], marks[order]


# --------------------------------------------------------------------------
# Drivers
# --------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class DriverSet:
    """Brownian increments on a grid plus Poisson events with marks.

    Parameters
    ----------
    grid : TimeGrid
        Grid on which the increments live; contains every event time.
    brownian : ndarray, shape (n_steps, d_W)
        Increments of a standard Brownian motion.
    event_times : ndarray, shape (m,)
        Event times in ``(t_start, t_end)``.
    event_marks : ndarray, shape (m, k)
    seed : int or None
        Reproducibility key used to sample the drivers.
    label : str
        Source name; Brownian coordinate ``k`` is labelled ``(label, k)``.
    """

    grid: TimeGrid
    brownian: np.ndarray = field(repr=False)
    event_times: np.ndarray = field(repr=False)
    event_marks: np.ndarray = field(repr=False)
    seed: Optional[int] = None
    label: str = "W"

    def __post_init__(self):
        dw = np.asarray(self.brownian, dtype=float)
        if dw.ndim == 1:
            dw = dw[:, None]
        if dw.shape[0] != self.grid.n_steps:
            raise PathError("brownian increments must have one row per grid interval")
        times = np.asarray(self.event_times, dtype=float).ravel()
        marks = np.asarray(self.event_marks, dtype=float)
        marks = marks.reshape(times.size, -1) if marks.size else np.zeros((times.size, 1))
        if np.any(times <= self.grid.t_start) or np.any(times > self.grid.t_end):
            raise PathError("event times must lie in (t_start, t_end]")
        if np.any(times == self.grid.t_end):
            raise PathError("an event at t_end is not supported; move it inside the horizon")
        self.grid.indices(times)  # every event must be a grid point
        object.__setattr__(self, "brownian", dw)
        object.__setattr__(self, "event_times", times)
        object.__setattr__(self, "event_marks", marks)

    @property
    def d_W(self):
        return self.brownian.shape[1]

    @property
    def poisson_events(self):
        return [(float(t), m.copy()) for t, m in zip(self.event_times, self.event_marks)]

    @property
    def coordinate_labels(self):
        return tuple((self.label, k) for k in range(self.d_W))

    def brownian_path(self):
        """Cumulative Brownian values at grid points (starting at 0)."""
        return np.vstack([np.zeros((1, self.d_W)), np.cumsum(self.brownian, axis=0)])

    def refine(self, grid, seed=None):
        """Same drivers on a finer grid, filling new points by Brownian bridges."""
        if grid == self.grid:
            return self
        if not grid.is_refinement_of(self.grid):
            raise PathError("target grid must contain every point of the driver grid")
        key = self.seed if seed is None else seed
        rng = make_rng(0 if key is None else key, 0x5EED)
        coarse = grid.indices(self.grid.points)
        fine = np.zeros((grid.n_steps, self.d_W))
        pts = grid.points
        for k in range(self.grid.n_steps):
            a, b = coarse[k], coarse[k + 1]
            if b - a == 1:
                fine[a] = self.brownian[k]
                continue
            remaining = self.brownian[k].copy()
            for j in range(a, b - 1):
                h, rest = pts[j + 1] - pts[j], pts[b] - pts[j]
                mean = remaining * h / rest
                sd = np.sqrt(h * (rest - h) / rest)
                fine[j] = mean + sd * rng.standard_normal(self.d_W)
                remaining = remaining - fine[j]
            fine[b - 1] = remaining
        return DriverSet(grid, fine, self.event_times, self.event_marks, self.seed, self.label)


def sample_drivers(grid, d_W, intensity=None, seed=0, label="W"):
    """Sample Brownian increments and Poisson events.

    Returns the drivers and the grid augmented with the exact event times.

    Parameters
    ----------
    grid : TimeGrid
    d_W : int
        Number of Brownian coordinates (may be 0).
    intensity : JumpIntensity or None
        Finite jump intensity; ``None`` or zero rate gives no events.
    seed : int
    label : str
    """
    if int(d_W) != d_W or d_W < 0:
        raise PathError("d_W must be a nonnegative integer")
    if intensity is not None and not isinstance(intensity, JumpIntensity):
        intensity = JumpIntensity(intensity)
    rng = make_rng(seed)
    times, _, marks = _sample_events(rng, grid, intensity, 1)
    new_grid = grid.merged(times)
    dw = np.sqrt(new_grid.dt)[:, None] * rng.standard_normal((new_grid.n_steps, int(d_W)))
    return DriverSet(new_grid, dw, times, marks, seed, label), new_grid


# --------------------------------------------------------------------------
# Coefficients
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class Coefficients:
    """Generator record ``(b, sigma, beta, nu)`` of a jump diffusion.

    All callables are vectorised over particles: ``drift(t, x)`` with
    ``x`` of shape ``(n, d)`` returns ``(n, d)``; ``diffusion(t, x)``
    returns ``(n, d, noise_dim)``; ``jump(t, x, marks)`` returns ``(n, d)``.
    The jump map must also accept ``t`` as an array of per-row times.
    The ``common_*`` fields declare noise shared by all particles of a
    conditional system (the conditioning noise); leaving them unset means
    no common/idiosyncratic split was declared.  ``state_free`` declares
    that no coefficient reads ``t`` or ``x``, which lets the Euler scheme
    run without a time loop.
    """

    dim: int = 1
    drift: Optional[Callable] = None
    diffusion: Optional[Callable] = None
    noise_dim: int = 0
    jump: Optional[Callable] = None
    intensity: Optional[JumpIntensity] = None
    common_diffusion: Optional[Callable] = None
    common_noise_dim: int = 0
    common_jump: Optional[Callable] = None
    common_intensity: Optional[JumpIntensity] = None
    name: str = "custom"
    state_free: bool = False

    def __post_init__(self):
        if (self.diffusion is None) != (self.noise_dim == 0):
            raise PathError("diffusion and noise_dim must be given together")
        if (self.common_diffusion is None) != (self.common_noise_dim == 0):
            raise PathError("common_diffusion and common_noise_dim must be given together")
        if (self.jump is None) != (self.intensity is None):
            raise PathError("jump map and intensity must be given together")
        if (self.common_jump is None) != (self.common_intensity is None):
            raise PathError("common jump map and common intensity must be given together")

    @property
    def has_common(self):
        return self.common_diffusion is not None or self.common_jump is not None


def _const_matrix(sigma, dim, m):
    s = np.asarray(sigma, dtype=float)
    if s.ndim == 0:
        s = s * np.eye(dim, m)
    return s.reshape(dim, m)


def _constant_diffusion(sigma):
    def diffusion(t, x):
        return np.broadcast_to(sigma, (x.shape[0],) + sigma.shape)
    return diffusion


def _constant_drift(b):
    def drift(t, x):
        return np.broadcast_to(b, x.shape)
    return drift


def _mark_jump(scale, dim):
    scale = np.asarray(scale, dtype=float)

    def jump(t, x, marks):
        return np.broadcast_to(marks[:, :1] * scale, (x.shape[0], dim))
    return jump


def brownian_motion(sigma=1.0, dim=1):
    """``dX = sigma dW`` with constant ``sigma`` (scalar means ``sigma I``)."""
    s = _const_matrix(sigma, dim, dim)
    return Coefficients(dim, None, _constant_diffusion(s), dim, name="BM", state_free=True)


def drifted_brownian(drift=0.0, sigma=1.0, dim=1):
    """``dX = b dt + sigma dW`` with constant coefficients."""
    b = np.broadcast_to(np.asarray(drift, dtype=float), (dim,)).copy()
    s = _const_matrix(sigma, dim, dim)
    diffusion = _constant_diffusion(s) if np.any(s) else None
    return Coefficients(dim, _constant_drift(b), diffusion, dim if diffusion else 0, name="drifted-BM",
                        state_free=True)


def compound_poisson(rate=1.0, marks=None, scale=1.0, dim=1):
    """Pure jump process: jumps ``scale * e`` at rate ``rate``."""
    marks = PointMark(1.0) if marks is None else marks
    return Coefficients(dim, None, None, 0, _mark_jump(scale, dim), JumpIntensity(rate, marks),
                        name="compound-Poisson", state_free=True)


def jump_diffusion(drift=0.0, sigma=1.0, rate=1.0, marks=None, scale=1.0, dim=1):
    """``dX = b dt + sigma dW + scale * e dN`` with constant coefficients."""
    base = drifted_brownian(drift, sigma, dim)
    marks = PointMark(1.0) if marks is None else marks
    return Coefficients(dim, base.drift, base.diffusion, base.noise_dim,
                        _mark_jump(scale, dim), JumpIntensity(rate, marks), name="jump-diffusion",
                        state_free=True)


def ornstein_uhlenbeck(theta=1.0, mean=0.0, sigma=1.0):
    """Scalar ``dX = theta (mean - X) dt + sigma dW``."""
    s = _const_matrix(sigma, 1, 1)

    def drift(t, x):
        return theta * (mean - x)

    return Coefficients(1, drift, _constant_diffusion(s), 1, name="OU")


def common_noise(sigma_common=1.0, sigma_idio=1.0, drift=0.0, common_rate=0.0,
                 common_scale=1.0, idio_rate=0.0, idio_scale=1.0, marks=None):
    """Scalar dynamics with a declared common/idiosyncratic split.

    ``dX = b dt + sigma_idio dW + sigma_common dB + jumps`` where ``B`` and
    the common jumps are shared by every particle of a conditional system.
    """
    marks = PointMark(1.0) if marks is None else marks
    b = np.array([float(drift)])
    si, sc = _const_matrix(sigma_idio, 1, 1), _const_matrix(sigma_common, 1, 1)
    return Coefficients(
        1,
        _constant_drift(b) if drift else None,
        _constant_diffusion(si) if sigma_idio else None, 1 if sigma_idio else 0,
        _mark_jump(idio_scale, 1) if idio_rate else None,
        JumpIntensity(idio_rate, marks) if idio_rate else None,
        _constant_diffusion(sc), 1,
        _mark_jump(common_scale, 1) if common_rate else None,
        JumpIntensity(common_rate, marks) if common_rate else None,
        name="common-noise", state_free=True)


COEFFICIENT_TEMPLATES = {
    "BM": (brownian_motion, {"sigma": 1.0}),
    "OU": (ornstein_uhlenbeck, {"theta": 1.0, "mean": 0.0, "sigma": 1.0}),
    "common-noise": (common_noise, {"sigma_common": 1.0, "sigma_idio": 1.0, "drift": 0.0,
                                    "common_rate": 0.0, "common_scale": 1.0,
                                    "idio_rate": 0.0, "idio_scale": 1.0}),
    "compound-Poisson": (compound_poisson, {"rate": 1.0, "scale": 1.0}),
    "drifted-BM": (drifted_brownian, {"drift": 0.0, "sigma": 1.0}),
    "jump-diffusion": (jump_diffusion, {"drift": 0.0, "sigma": 1.0, "rate": 1.0, "scale": 1.0}),
}


# --------------------------------------------------------------------------
# Euler scheme
# --------------------------------------------------------------------------

@dataclass
class _Source:
    """One noise source feeding the Euler scheme.

    ``increments`` has shape ``(n_steps, N, m)`` for per-particle noise or
    ``(n_steps, 1, m)`` for noise shared by all particles.  ``owners`` is
    ``None`` for shared jump events.
    """

    diffusion: Optional[Callable]
    increments: Optional[np.ndarray]
    jump: Optional[Callable]
    event_index: np.ndarray
    owners: Optional[np.ndarray]
    marks: np.ndarray

    @property
    def m(self):
        return 0 if self.increments is None else self.increments.shape[2]


def _check_finite(arr, what, t, k):
    if not np.all(np.isfinite(arr)):
        bad = np.argwhere(~np.isfinite(arr.reshape(arr.shape[0], -1)))[0, 0]
        raise SimulationError(f"non-finite {what} at t={t!r} (grid index {k}, particle {bad})")


def euler_scheme(drift, x0, grid, sources, state_free=False):
    """Vectorised left-point Euler scheme for a batch of particles.

    Returns a dict with ``values``, ``mart_cont``, ``fin_var``,
    ``jump_increments`` (all ``(n_pts, N, d)``), ``jump_mask``
    ``(n_pts, N)``, ``drift_values`` ``(n_steps, N, d)`` and ``sigma``
    ``(n_steps, N, d, m_total)`` with sources concatenated in order.
    With ``state_free`` the coefficients are evaluated once and the time
    loop is replaced by cumulative sums.
    """
    x0 = np.asarray(x0, dtype=float)
    if state_free:
        return _euler_state_free(drift, x0, grid, sources)
    N, d = x0.shape
    n_pts, pts, dts = len(grid), grid.points, grid.dt
    M = np.zeros((n_pts, N, d))
    V = np.zeros((n_pts, N, d))
    J = np.zeros((n_pts, N, d))
    X = np.empty((n_pts, N, d))
    mask = np.zeros((n_pts, N), dtype=bool)
    m_total = sum(s.m for s in sources)
    sigma = np.zeros((grid.n_steps, N, d, m_total))
    bvals = np.zeros((grid.n_steps, N, d))
    X[0] = x0
    # events grouped by grid index
    bounds = [np.searchsorted(s.event_index, np.arange(n_pts + 1)) for s in sources]
    for k in range(grid.n_steps):
        t, x, h = pts[k], X[k], dts[k]
        dM = np.zeros((N, d))
        dV = np.zeros((N, d))
        if drift is not None:
            b = np.asarray(drift(t, x), dtype=float).reshape(N, d)
            _check_finite(b, "drift", t, k)
            bvals[k] = b
            dV = b * h
        col = 0
        for s in sources:
            if s.m:
                sig = np.asarray(s.diffusion(t, x), dtype=float).reshape(N, d, s.m)
                _check_finite(sig, "diffusion", t, k)
                sigma[k, :, :, col:col + s.m] = sig
                dM = dM + np.einsum("nij,nj->ni", sig, np.broadcast_to(s.increments[k], (N, s.m)))
                col += s.m
        M[k + 1] = M[k] + dM
        Vm = V[k] + dV
        xm = x0 + M[k + 1] + Vm
        jump = np.zeros((N, d))
        tn = pts[k + 1]
        for s, bd in zip(sources, bounds):
            lo, hi = bd[k + 1], bd[k + 2]
            if hi == lo:
                continue
            if s.owners is None:
                for e in range(lo, hi):
                    marks = np.broadcast_to(s.marks[e], (N, s.marks.shape[1]))
                    dj = np.asarray(s.jump(tn, xm, marks), dtype=float).reshape(N, d)
                    _check_finite(dj, "jump", tn, k + 1)
                    jump += dj
                mask[k + 1] = True
            else:
                own = s.owners[lo:hi]
                dj = np.asarray(s.jump(tn, xm[own], s.marks[lo:hi]), dtype=float).reshape(own.size, d)
                _check_finite(dj, "jump", tn, k + 1)
                np.add.at(jump, own, dj)
                mask[k + 1, own] = True
        J[k + 1] = jump
        V[k + 1] = Vm + jump
        X[k + 1] = x0 + M[k + 1] + V[k + 1]
    return {"values": X, "mart_cont": M, "fin_var": V, "jump_increments": J,
            "jump_mask": mask, "drift_values": bvals, "sigma": sigma}


def _euler_state_free(drift, x0, grid, sources):
    N, d = x0.shape
    n, pts, dts = grid.n_steps, grid.points, grid.dt
    t0 = pts[0]
    m_total = sum(s.m for s in sources)
    bvals = np.zeros((n, N, d))
    sigma = np.zeros((n, N, d, m_total))
    if drift is not None:
        b = np.asarray(drift(t0, x0), dtype=float).reshape(N, d)
        _check_finite(b, "drift", t0, 0)
        bvals[:] = b
    dM = np.zeros((n, N, d))
    col = 0
    for s in sources:
        if s.m:
            sig = np.asarray(s.diffusion(t0, x0), dtype=float).reshape(N, d, s.m)
            _check_finite(sig, "diffusion", t0, 0)
            sigma[:, :, :, col:col + s.m] = sig
            dM += np.einsum("nij,knj->kni", sig, np.broadcast_to(s.increments, (n, N, s.m)))
            col += s.m
    J = np.zeros((n + 1, N, d))
    mask = np.zeros((n + 1, N), dtype=bool)
    for s in sources:
        idx = s.event_index
        if s.jump is None or idx.size == 0:
            continue
        times, k = pts[idx], s.marks.shape[1]
        if s.owners is None:
            # shared events hit every particle
            dj = np.asarray(s.jump(np.repeat(times, N), np.zeros((idx.size * N, d)), np.repeat(s.marks, N, axis=0)),
                            dtype=float).reshape(idx.size, N, d)
            _check_finite(dj.reshape(-1, d), "jump", times[0], int(idx[0]))
            np.add.at(J, idx, dj)
            mask[idx] = True
        else:
            dj = np.asarray(s.jump(times, np.zeros((idx.size, d)), s.marks.reshape(-1, k)),
                            dtype=float).reshape(idx.size, d)
            _check_finite(dj, "jump", times[0], int(idx[0]))
            np.add.at(J, (idx, s.owners), dj)
            mask[idx, s.owners] = True
    M = np.concatenate([np.zeros((1, N, d)), np.cumsum(dM, axis=0)])
    V = np.concatenate([np.zeros((1, N, d)), np.cumsum(bvals * dts[:, None, None] + J[1:], axis=0)])
    return {"values": x0 + M + V, "mart_cont": M, "fin_var": V, "jump_increments": J,
            "jump_mask": mask, "drift_values": bvals, "sigma": sigma}


# --------------------------------------------------------------------------
# Paths
# --------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class SemimartingalePath:
    """One realized trajectory with its decomposition ``X = X_0 + M + V``.

    Arrays are indexed by grid point; ``diffusion`` and ``drift_values`` by
    grid interval (left-point values).  ``noise_labels`` names the Brownian
    coordinate behind each column of ``diffusion``.
    """

    grid: TimeGrid
    x0: np.ndarray
    values: np.ndarray = field(repr=False)
    mart_cont: np.ndarray = field(repr=False)
    fin_var: np.ndarray = field(repr=False)
    jump_increments: np.ndarray = field(repr=False)
    jump_mask: np.ndarray = field(repr=False)
    diffusion: Optional[np.ndarray] = field(default=None, repr=False)
    drift_values: Optional[np.ndarray] = field(default=None, repr=False)
    noise_labels: tuple = ()
    coeffs: Optional[Coefficients] = field(default=None, repr=False)

    @property
    def dim(self):
        return self.values.shape[1]

    @property
    def left_values(self):
        """Left limits ``X_{t-}`` at every grid point (``X_{t_0-} = X_{t_0}``)."""
        return self.values - self.jump_increments

    @property
    def jumps(self):
        """List of ``(time, Delta X)`` at event times."""
        idx = np.flatnonzero(self.jump_mask)
        return [(float(self.grid.points[k]), self.jump_increments[k].copy()) for k in idx]

    def value_at(self, t):
        return self.values[self.grid.index(t)].copy()

    def restricted_coords(self, coords):
        """Path of selected state coordinates (same drivers)."""
        c = list(coords)
        return SemimartingalePath(
            self.grid, self.x0[c], self.values[:, c], self.mart_cont[:, c], self.fin_var[:, c],
            self.jump_increments[:, c], self.jump_mask,
            None if self.diffusion is None else self.diffusion[:, c, :],
            None if self.drift_values is None else self.drift_values[:, c],
            self.noise_labels, None)


def _source_from_drivers(diffusion, jump, drivers, grid, n, shared):
    idx = grid.indices(drivers.event_times)
    inc = drivers.brownian[:, None, :] if drivers.d_W else None
    return _Source(diffusion if drivers.d_W else None, inc, jump, idx,
                   None if shared else np.zeros(idx.size, dtype=int), drivers.event_marks)


def simulate_semimartingale(coeffs, x0, drivers, grid=None, common=None):
    """Left-point Euler path of ``dX = b dt + sigma dW + int beta dN``.

    Parameters
    ----------
    coeffs : Coefficients
    x0 : array_like, shape (d,)
    drivers : DriverSet
        Idiosyncratic Brownian increments and events.
    grid : TimeGrid, optional
        Defaults to ``drivers.grid``; a finer grid refines the drivers by
        Brownian bridges.
    common : DriverSet, optional
        Drivers for the ``common_*`` coefficients.
    """
    grid = drivers.grid if grid is None else grid
    drivers = drivers.refine(grid)
    x0 = np.atleast_1d(np.asarray(x0, dtype=float))
    if x0.shape != (coeffs.dim,):
        raise PathError(f"x0 must have shape ({coeffs.dim},)")
    if drivers.d_W != coeffs.noise_dim:
        raise PathError(f"coefficients use {coeffs.noise_dim} Brownian coordinates, drivers have {drivers.d_W}")
    if drivers.event_times.size and coeffs.jump is None:
        raise PathError("drivers carry Poisson events but the coefficients have no jump map")
    sources = [_source_from_drivers(coeffs.diffusion, coeffs.jump, drivers, grid, 1, False)]
    labels = list(drivers.coordinate_labels)
    if coeffs.has_common:
        if common is None:
            raise PathError("coefficients declare common noise; pass the common drivers")
        common = common.refine(grid)
        if common.d_W != coeffs.common_noise_dim:
            raise PathError("common drivers do not match common_noise_dim")
        if common.event_times.size and coeffs.common_jump is None:
            raise PathError("common drivers carry events but no common jump map is declared")
        sources.append(_source_from_drivers(coeffs.common_diffusion, coeffs.common_jump, common, grid, 1, True))
        labels += list(common.coordinate_labels)
    out = euler_scheme(coeffs.drift, x0[None, :], grid, sources, coeffs.state_free)
    return SemimartingalePath(
        grid, x0, out["values"][:, 0], out["mart_cont"][:, 0], out["fin_var"][:, 0],
        out["jump_increments"][:, 0], out["jump_mask"][:, 0], out["sigma"][:, 0],
        out["drift_values"][:, 0], tuple(labels), coeffs)


def left_limit(path, t):
    """Pre-jump value ``X_{t-}`` at a grid time ``t > t_start``."""
    k = path.grid.index(t)
    if k == 0:
        raise PathError("left limit needs t > t_start")
    return path.values[k] - path.jump_increments[k]


# --------------------------------------------------------------------------
# Covariation
# --------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class CovariationCurve:
    """Cumulative continuous covariation ``[X, Y]^c`` on a grid."""

    grid: TimeGrid
    values: np.ndarray = field(repr=False)
    mode: str = "generator-exact"

    def at(self, t):
        return self.values[self.grid.index(t)]


def label_match(labels_x, labels_y):
    """0/1 matrix marking Brownian coordinates shared by two label lists."""
    return np.array([[float(a == b) for b in labels_y] for a in labels_x]).reshape(len(labels_x), len(labels_y))


def generator_increments(sig_x, labels_x, sig_y, labels_y, dt):
    """Per-interval ``sigma_x P sigma_y^T dt`` over shared coordinates.

    ``sig_x`` has shape ``(..., dx, mx)``, ``sig_y`` ``(..., dy, my)`` and
    ``dt`` broadcasts against the leading axes.
    """
    P = label_match(labels_x, labels_y)
    if P.size == 0 or not P.any():
        lead = np.broadcast_shapes(sig_x.shape[:-2], sig_y.shape[:-2])
        return np.zeros(lead + (sig_x.shape[-2], sig_y.shape[-2]))
    out = np.einsum("...am,mn,...bn->...ab", sig_x, P, sig_y)
    return out * np.asarray(dt)[(...,) + (None,) * 2]


def covariation_continuous(x, y, mode="generator-exact"):
    """Cumulative ``[X, Y]^c`` in generator-exact or realized mode.

    Generator-exact integrates ``sigma_x sigma_y^T dt`` over Brownian
    coordinates the two paths share (by label).  Realized sums products of
    continuous-martingale increments.
    """
    if x.grid != y.grid:
        raise PathError("covariation needs paths on the same grid")
    if mode == "generator-exact":
        if x.diffusion is None or y.diffusion is None:
            raise PathError("generator-exact covariation needs diffusion coefficients on both paths")
        inc = generator_increments(x.diffusion, x.noise_labels, y.diffusion, y.noise_labels, x.grid.dt)
    elif mode == "realized":
        dx, dy = np.diff(x.mart_cont, axis=0), np.diff(y.mart_cont, axis=0)
        inc = dx[:, :, None] * dy[:, None, :]
    else:
        raise PathError(f"unknown covariation mode {mode!r}")
    vals = np.concatenate([np.zeros((1,) + inc.shape[1:]), np.cumsum(inc, axis=0)])
    return CovariationCurve(x.grid, vals, mode)
