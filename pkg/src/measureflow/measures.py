"""Empirical measures and particle approximations of measure flows.

``simulate_full_flow`` approximates ``mu_t = Law(X_t)`` by ``N`` i.i.d.
particles.  ``simulate_conditional_flow`` approximates the conditional law
given a common noise: every particle sees the same common drivers and its
own idiosyncratic drivers, so the empirical measure across particles at a
fixed common-noise realization estimates the conditional law.

Particles of a flow are stored as stacked arrays (grid point, particle,
coordinate) rather than separate path objects; ``particle(i)`` returns a
``SemimartingalePath`` view when one is needed.
"""

import csv
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .paths import (DriverSet, PathError, SemimartingalePath, TimeGrid, _sample_events,
                    _Source, euler_scheme, make_rng)


class MeasureError(ValueError):
    """Invalid measure or particle-system argument."""


@dataclass(frozen=True, eq=False)
class EmpiricalMeasure:
    """Finitely supported probability measure ``sum_i w_i delta_{x_i}``.

    Parameters
    ----------
    atoms : ndarray, shape (N, d)
    weights : ndarray, shape (N,), optional
        Nonnegative, summing to one; uniform when omitted.
    """

    atoms: np.ndarray
    weights: Optional[np.ndarray] = None

    def __post_init__(self):
        a = np.asarray(self.atoms, dtype=float)
        if a.ndim == 1:
            a = a[:, None]
        if a.ndim != 2 or a.shape[0] == 0:
            raise MeasureError("a measure needs at least one atom")
        if not np.all(np.isfinite(a)):
            raise MeasureError("atoms must be finite")
        w = np.full(a.shape[0], 1.0 / a.shape[0]) if self.weights is None else np.asarray(self.weights, dtype=float)
        if w.shape != (a.shape[0],) or np.any(w < 0) or abs(w.sum() - 1.0) > 1e-12:
            raise MeasureError("weights must be nonnegative, one per atom, and sum to 1")
        object.__setattr__(self, "atoms", a)
        object.__setattr__(self, "weights", w)

    @property
    def n_atoms(self):
        return self.atoms.shape[0]

    @property
    def dim(self):
        return self.atoms.shape[1]

    def integrate(self, fn):
        """``<mu, fn>`` for ``fn`` mapping ``(N, d)`` points to ``(N, ...)``."""
        return np.tensordot(self.weights, np.asarray(fn(self.atoms), dtype=float), axes=(0, 0))

    def mean(self):
        return self.weights @ self.atoms

    def aggregated(self):
        """Same measure with coincident atoms merged."""
        uniq, inv = np.unique(self.atoms, axis=0, return_inverse=True)
        w = np.bincount(inv.ravel(), weights=self.weights, minlength=uniq.shape[0])
        return EmpiricalMeasure(uniq, w / w.sum())

    def same_as(self, other, tol=0.0):
        """Equality as measures (atom multisets with weights)."""
        a, b = self.aggregated(), other.aggregated()
        if a.atoms.shape != b.atoms.shape:
            return False
        return bool(np.all(np.abs(a.atoms - b.atoms) <= tol) and np.all(np.abs(a.weights - b.weights) <= max(tol, 1e-12)))


def empirical_measure(points):
    """Uniform empirical measure on ``points`` (scalars or ``d``-vectors).

    Examples
    --------
    >>> empirical_measure([0.0, 2.0]).mean()
    array([1.])
    """
    pts = np.asarray(points, dtype=float)
    if pts.size == 0:
        raise MeasureError("empirical_measure needs a nonempty list of points")
    return EmpiricalMeasure(pts.reshape(pts.shape[0], -1) if pts.ndim else pts.reshape(1, 1))


@dataclass(frozen=True, eq=False)
class EmpiricalFlow:
    """``N`` particle paths on one shared grid.

    Array fields follow ``SemimartingalePath`` with a particle axis after
    the time axis.  ``sigma`` concatenates the Brownian columns of every
    noise source; ``shared_columns`` flags the columns common to all
    particles.  ``column_names`` gives the source name and coordinate of
    each column; private columns get the particle id appended to the name
    when labels are generated.
    """

    grid: TimeGrid
    x0: np.ndarray = field(repr=False)
    values: np.ndarray = field(repr=False)
    mart_cont: np.ndarray = field(repr=False)
    fin_var: np.ndarray = field(repr=False)
    jump_increments: np.ndarray = field(repr=False)
    jump_mask: np.ndarray = field(repr=False)
    drift_values: np.ndarray = field(repr=False)
    sigma: np.ndarray = field(repr=False)
    shared_columns: np.ndarray = field(repr=False)
    column_names: tuple = ()
    particle_ids: Optional[np.ndarray] = field(default=None, repr=False)
    shared_jump_mask: Optional[np.ndarray] = field(default=None, repr=False)
    coeffs: object = field(default=None, repr=False)
    seed: Optional[int] = None

    def __post_init__(self):
        if self.particle_ids is None:
            object.__setattr__(self, "particle_ids", np.arange(self.values.shape[1]))
        if self.shared_jump_mask is None:
            object.__setattr__(self, "shared_jump_mask", np.zeros(len(self.grid), dtype=bool))

    @property
    def n_particles(self):
        return self.values.shape[1]

    @property
    def dim(self):
        return self.values.shape[2]

    @property
    def left_values(self):
        return self.values - self.jump_increments

    @property
    def particles(self):
        return [self.particle(i) for i in range(self.n_particles)]

    def noise_labels(self, i):
        """Brownian coordinate labels for particle ``i`` (position in this flow)."""
        pid = int(self.particle_ids[i])
        return tuple((name, k) if shared else (f"{name}/{pid}", k)
                     for (name, k), shared in zip(self.column_names, self.shared_columns))

    def particle(self, i):
        """Path view of particle ``i``."""
        if not 0 <= i < self.n_particles:
            raise MeasureError(f"particle index {i} out of range")
        return SemimartingalePath(
            self.grid, self.x0[i], self.values[:, i], self.mart_cont[:, i], self.fin_var[:, i],
            self.jump_increments[:, i], self.jump_mask[:, i], self.sigma[:, i],
            self.drift_values[:, i], self.noise_labels(i), self.coeffs)

    def measure_at(self, t, left=False):
        """Empirical measure of the particles at grid time ``t`` (or ``t-``)."""
        k = self.grid.index(t)
        vals = self.values[k] - self.jump_increments[k] if left else self.values[k]
        return EmpiricalMeasure(vals)

    def subset(self, indices):
        """Flow restricted to the given particles (ids are preserved)."""
        idx = np.asarray(indices, dtype=int)
        if idx.size and np.array_equal(idx, np.arange(idx[0], idx[0] + idx.size)):
            idx = slice(int(idx[0]), int(idx[0]) + idx.size)
        return EmpiricalFlow(
            self.grid, self.x0[idx], self.values[:, idx], self.mart_cont[:, idx], self.fin_var[:, idx],
            self.jump_increments[:, idx], self.jump_mask[:, idx], self.drift_values[:, idx],
            self.sigma[:, idx], self.shared_columns, self.column_names, self.particle_ids[idx],
            self.shared_jump_mask, self.coeffs, self.seed)

    def to_csv(self, path):
        """Write ``time, particle, x0..x{d-1}`` rows."""
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["time", "particle"] + [f"x{j}" for j in range(self.dim)])
            for k, t in enumerate(self.grid.points):
                for i in range(self.n_particles):
                    w.writerow([repr(float(t)), int(self.particle_ids[i])] + [repr(float(v)) for v in self.values[k, i]])


def _as_x0(x0, N, dim):
    x0 = np.asarray(x0, dtype=float)
    if x0.ndim <= 1:
        x0 = np.broadcast_to(np.atleast_1d(x0), (N, dim)) if x0.size in (1, dim) else x0
    x0 = np.array(x0, dtype=float).reshape(-1, dim) if x0.size == N * dim else x0
    if x0.shape != (N, dim):
        raise MeasureError(f"x0 must broadcast to shape ({N}, {dim})")
    return x0


def _idio_source(rng, grid, diffusion, m, jump, events, N):
    times, owners, marks = events
    inc = None
    if m:
        inc = np.sqrt(grid.dt)[None, :, None] * rng.standard_normal((N, grid.n_steps, m))
        inc = np.ascontiguousarray(inc.transpose(1, 0, 2))
    return _Source(diffusion if m else None, inc, jump, grid.indices(times), owners, marks)


def _run(coeffs, x0, grid, sources, shared, names, shared_jump_mask, seed, label):
    try:
        out = euler_scheme(coeffs.drift, x0, grid, sources, coeffs.state_free)
    except PathError as exc:
        raise PathError(f"{label} flow: {exc}") from exc
    return EmpiricalFlow(grid, x0, out["values"], out["mart_cont"], out["fin_var"],
                         out["jump_increments"], out["jump_mask"], out["drift_values"], out["sigma"],
                         np.asarray(shared, dtype=bool), tuple(names), None, shared_jump_mask, coeffs, seed)


def simulate_full_flow(coeffs, x0, N, grid, seed, label="X"):
    """``N`` i.i.d. particles approximating ``mu_t = Law(X_t)``.

    Declared common noise is treated as independent per particle, since
    without conditioning all noise contributes to the law.  Event times of
    every particle are merged into one grid.

    Randomness is drawn from a single generator in a fixed order (events,
    then Brownian increments particle-major), so the flow is a function of
    ``(coeffs, x0, N, grid, seed)``.
    """
    if int(N) != N or N < 1:
        raise MeasureError("N must be a positive integer")
    N = int(N)
    x0 = _as_x0(x0, N, coeffs.dim)
    rng = make_rng(seed)
    ev = _sample_events(rng, grid, coeffs.intensity, N)
    ev_c = _sample_events(rng, grid, coeffs.common_intensity, N) if coeffs.has_common else None
    full = grid.merged(np.concatenate([ev[0], ev_c[0] if ev_c else np.zeros(0)]))
    sources = [_idio_source(rng, full, coeffs.diffusion, coeffs.noise_dim, coeffs.jump, ev, N)]
    names = [(label, k) for k in range(coeffs.noise_dim)]
    if coeffs.has_common:
        sources.append(_idio_source(rng, full, coeffs.common_diffusion, coeffs.common_noise_dim,
                                    coeffs.common_jump, ev_c, N))
        names += [(label + "c", k) for k in range(coeffs.common_noise_dim)]
    return _run(coeffs, x0, full, sources, [False] * len(names), names, None, seed, label)


@dataclass(frozen=True, eq=False)
class ConditionalParticleSystem:
    """Particles sharing common drivers, with designated conditional copies."""

    flow: EmpiricalFlow
    common: DriverSet
    copies: tuple = (1, 2)
    idio_drivers: tuple = field(default=(None, np.zeros(0), np.zeros(0, dtype=int), np.zeros((0, 1))), repr=False)

    @property
    def grid(self):
        return self.flow.grid

    @property
    def n_particles(self):
        return self.flow.n_particles

    @property
    def particles(self):
        return self.flow.particles

    @property
    def idio(self):
        """Per-particle idiosyncratic drivers."""
        fl, (inc, times, owners, marks) = self.flow, self.idio_drivers
        label = next((name for (name, _), sh in zip(fl.column_names, fl.shared_columns) if not sh), "X")
        out = []
        for i in range(fl.n_particles):
            dw = np.zeros((fl.grid.n_steps, 0)) if inc is None else inc[:, i, :]
            sel = owners == i
            out.append(DriverSet(fl.grid, dw, times[sel], marks[sel], fl.seed, f"{label}/{fl.particle_ids[i]}"))
        return out

    def measure_at(self, t, left=False):
        return self.flow.measure_at(t, left)


def simulate_conditional_flow(coeffs, x0, N, grid, seed, copies=(1, 2), label="X",
                              common_label="B", second_order=True):
    """Particles driven by one shared common noise and private noises.

    Parameters
    ----------
    coeffs : Coefficients
        Must declare a common part (``common_diffusion`` and/or
        ``common_jump``); the remaining coefficients are idiosyncratic.
    x0 : array_like
    N : int
        Number of particles; at least 3 when ``second_order``.
    grid : TimeGrid
    seed : int
        The common noise is drawn from ``(seed, 0)`` and the private noise
        from ``(seed, 1)``, so changing ``N`` keeps the common path.
    copies : tuple of int
        Zero-based indices of ``X'`` and ``X''``.
    """
    if not coeffs.has_common:
        raise MeasureError("conditional flow needs a common/idiosyncratic split: "
                           "set common_diffusion (and common_noise_dim) or common_jump")
    if int(N) != N or N < 1:
        raise MeasureError("N must be a positive integer")
    N = int(N)
    if second_order and N < 3:
        raise MeasureError("second-order conditional terms need N >= 3 particles")
    c1, c2 = (int(c) for c in copies)
    if c1 == c2 or not (0 <= c1 < N and 0 <= c2 < N):
        raise MeasureError("conditional copies must be two distinct particle indices")
    x0 = _as_x0(x0, N, coeffs.dim)
    rng_c, rng_i = make_rng(seed, 0), make_rng(seed, 1)
    ev_c = _sample_events(rng_c, grid, coeffs.common_intensity, 1)
    ev_i = _sample_events(rng_i, grid, coeffs.intensity, N)
    full = grid.merged(np.concatenate([ev_c[0], ev_i[0]]))
    dB = np.sqrt(full.dt)[:, None] * rng_c.standard_normal((full.n_steps, coeffs.common_noise_dim))
    common = DriverSet(full, dB, ev_c[0], ev_c[2], seed, common_label)
    sources = [_idio_source(rng_i, full, coeffs.diffusion, coeffs.noise_dim, coeffs.jump, ev_i, N)]
    cidx = full.indices(ev_c[0])
    sources.append(_Source(coeffs.common_diffusion if coeffs.common_noise_dim else None,
                           dB[:, None, :] if coeffs.common_noise_dim else None,
                           coeffs.common_jump, cidx, None, ev_c[2]))
    names = [(label, k) for k in range(coeffs.noise_dim)] + [(common_label, k) for k in range(coeffs.common_noise_dim)]
    shared = [False] * coeffs.noise_dim + [True] * coeffs.common_noise_dim
    smask = np.zeros(len(full), dtype=bool)
    smask[cidx] = True
    flow = _run(coeffs, x0, full, sources, shared, names, smask, seed, label)
    return ConditionalParticleSystem(flow, common, (c1, c2), (sources[0].increments,) + tuple(ev_i))


def conditional_copies(system):
    """The designated copies ``(X', X'')`` of a conditional system."""
    c1, c2 = system.copies
    return system.flow.particle(c1), system.flow.particle(c2)


def wasserstein2_1d(mu, nu):
    """Exact ``W_2`` between two measures on the real line.

    Uses the monotone (quantile) coupling, which for equal-size uniform
    measures pairs sorted atoms.
    """
    if mu.dim != 1 or nu.dim != 1:
        raise MeasureError("wasserstein2_1d only supports measures on the real line")
    oa, ob = np.argsort(mu.atoms[:, 0], kind="stable"), np.argsort(nu.atoms[:, 0], kind="stable")
    xa, wa = mu.atoms[oa, 0], mu.weights[oa]
    xb, wb = nu.atoms[ob, 0], nu.weights[ob]
    ca, cb = np.cumsum(wa), np.cumsum(wb)
    ca[-1] = cb[-1] = 1.0
    levels = np.union1d(ca, cb)
    mass = np.diff(np.concatenate([[0.0], levels]))
    ia = np.minimum(np.searchsorted(ca, levels - 0.5 * mass), xa.size - 1)
    ib = np.minimum(np.searchsorted(cb, levels - 0.5 * mass), xb.size - 1)
    return float(np.sqrt(np.sum(mass * (xa[ia] - xb[ib]) ** 2)))
