"""Term-by-term evaluation of Ito-Wentzell formulas along simulated paths.

Every formula is assembled on the discrete scheme used by the simulators:
each grid interval ``[t_k, t_{k+1}]`` consists of a continuous substep
``X_k -> X_{(k+1)-}`` followed by a jump substep ``X_{(k+1)-} -> X_{k+1}``.
Stochastic integrals use left points, covariations are generator-exact
(``sigma sigma^T dt`` over shared Brownian coordinates) or realized, and
jump terms are evaluated at the event grid points.  Each term is first
computed per interval; a window ``[s, t]`` sums intervals ``k`` with
``s <= t_k < t``.

Three kinds of check are provided:

* pathwise: a single path and no expectation (``verify_ito_pathwise``,
  ``verify_ito_wentzell_pathwise``);
* empirical projection: the measure formula applied to the empirical
  measure of a particle cloud, which is an exact finite-dimensional
  identity once the finite-``N`` corrections ``I2``, ``I3`` are added;
* Monte Carlo law: both sides estimated over independent worlds, with
  the tilde/conditional expectations realized by an independent (or
  conditionally independent) particle cloud.
"""

import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np
from scipy import stats

from .fields import FieldError, PoissonField, SpaceMeasureField
from .measures import simulate_conditional_flow, simulate_full_flow
from .paths import (DriverSet, PathError, _sample_events, brownian_motion, build_time_grid,
                    derive_seed, generator_increments, make_rng, sample_drivers,
                    simulate_semimartingale)
from .scenarios import Scenario, Sizes, broadcast_x0


class VerificationError(ValueError):
    """Invalid verifier arguments or incompatible scenario."""


COVARIATION_MODES = ("generator-exact", "realized")
POLICIES = ("empirical", "law", "one")


# --------------------------------------------------------------------------
# Result types
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class TermBreakdown:
    """Named right-hand-side terms of one formula on one sample.

    ``residual`` is ``lhs - sum(terms)`` summed in insertion order.
    ``extras`` holds diagnostics that are not part of the sum.
    """

    formula: str
    terms: dict
    lhs: float
    residual: float
    extras: dict = field(default_factory=dict)
    times: Optional[np.ndarray] = field(default=None, repr=False, compare=False)
    series: Optional[dict] = field(default=None, repr=False, compare=False)

    @classmethod
    def build(cls, formula, lhs, terms, extras=None, times=None, series=None):
        terms = {k: float(v) for k, v in terms.items()}
        total = 0.0
        for v in terms.values():
            total += v
        return cls(formula, terms, float(lhs), float(lhs) - total,
                   {k: float(v) for k, v in (extras or {}).items()}, times, series)

    @property
    def rhs(self):
        return self.lhs - self.residual

    def to_dict(self):
        return {"formula": self.formula, "lhs": self.lhs, "residual": self.residual,
                "terms": dict(self.terms), "extras": dict(self.extras)}


def _mean_se(values):
    v = np.asarray(values, dtype=float)
    se = float(v.std(ddof=1) / math.sqrt(v.size)) if v.size > 1 else float("nan")
    return float(v.mean()), se


@dataclass(frozen=True)
class VerificationReport:
    """Breakdowns over independent samples with aggregate statistics.

    The standard error treats the samples as independent, which holds by
    construction: each sample is simulated from its own derived seed.
    """

    formula: str
    mode: str
    breakdowns: tuple
    seed: int
    config: dict = field(default_factory=dict)
    dt: float = float("nan")
    scale: float = 1.0

    @property
    def residuals(self):
        return np.array([b.residual for b in self.breakdowns])

    @property
    def n_samples(self):
        return len(self.breakdowns)

    @property
    def mean_residual(self):
        return float(self.residuals.mean())

    @property
    def standard_error(self):
        return _mean_se(self.residuals)[1]

    @property
    def max_abs_residual(self):
        return float(np.abs(self.residuals).max())

    @property
    def rms_residual(self):
        return float(np.sqrt(np.mean(self.residuals ** 2)))

    @property
    def mean_abs_residual(self):
        return float(np.abs(self.residuals).mean())

    def term_stats(self):
        """Per-term (and per-extra) sample mean and standard error."""
        out = {}
        for key in ("terms", "extras"):
            names = list(getattr(self.breakdowns[0], key))
            for n in names:
                out[n] = _mean_se([getattr(b, key)[n] for b in self.breakdowns])
        return out

    def statistic(self, name):
        table = {"rms": self.rms_residual, "mean_abs": self.mean_abs_residual,
                 "max_abs": self.max_abs_residual, "standard_error": self.standard_error,
                 "mean": self.mean_residual}
        if name not in table:
            raise VerificationError(f"unknown statistic {name!r}; choose from {sorted(table)}")
        return table[name]

    def to_dict(self, samples=True):
        lhs_mean, lhs_se = _mean_se([b.lhs for b in self.breakdowns])
        out = {
            "formula": self.formula, "mode": self.mode, "seed": self.seed, "config": self.config,
            "n_samples": self.n_samples, "dt": self.dt, "scale": self.scale,
            "aggregate": {"mean_residual": self.mean_residual, "standard_error": self.standard_error,
                          "max_abs_residual": self.max_abs_residual, "rms_residual": self.rms_residual,
                          "lhs_mean": lhs_mean, "lhs_standard_error": lhs_se},
            "terms": {k: {"mean": m, "standard_error": s} for k, (m, s) in self.term_stats().items()},
        }
        if samples:
            out["samples"] = [b.to_dict() for b in self.breakdowns]
        return out


@dataclass(frozen=True)
class ConvergenceResult:
    """Log-log fit of an aggregate residual statistic against a swept size."""

    parameter: str
    levels: tuple
    values: tuple
    slope: float
    ci: tuple
    statistic: str = "rms"
    reports: tuple = field(default=(), repr=False)

    def to_dict(self):
        return {"parameter": self.parameter, "levels": list(self.levels), "values": list(self.values),
                "slope": self.slope, "ci": list(self.ci), "statistic": self.statistic}


def fit_loglog_slope(levels, values, confidence=0.95):
    """Least-squares slope of ``log values`` on ``log levels`` with a t interval."""
    x, y = np.log(np.asarray(levels, dtype=float)), np.log(np.asarray(values, dtype=float))
    if x.size < 3:
        raise VerificationError("a slope fit needs at least 3 levels")
    if not (np.all(np.isfinite(x)) and np.all(np.isfinite(y))):
        raise VerificationError("levels and values must be positive and finite for a log-log fit")
    A = np.column_stack([x, np.ones_like(x)])
    coef, *_ = np.linalg.lstsq(A, y, rcond=None)
    dof = x.size - 2
    resid = y - A @ coef
    sxx = np.sum((x - x.mean()) ** 2)
    se = math.sqrt(float(resid @ resid) / dof / sxx) if dof > 0 else float("inf")
    half = float(stats.t.ppf(0.5 + confidence / 2, dof)) * se if dof > 0 else float("inf")
    return float(coef[0]), (float(coef[0] - half), float(coef[0] + half))


# --------------------------------------------------------------------------
# Sample loop
# --------------------------------------------------------------------------

def worker_count(workers=None):
    """Explicit count, else ``MEASUREFLOW_WORKERS``, else 1."""
    if workers is None:
        env = os.environ.get("MEASUREFLOW_WORKERS", "").strip()
        if not env:
            return 1
        try:
            workers = int(env)
        except ValueError:
            raise VerificationError(f"MEASUREFLOW_WORKERS must be an integer, got {env!r}") from None
    if workers < 1:
        raise VerificationError("worker count must be at least 1")
    return int(workers)


def map_samples(fn, M, seed, workers=None):
    """``[fn(m, derive_seed(seed, m)) for m in range(M)]``, possibly threaded.

    Results are returned in sample order, so aggregates do not depend on
    the number of workers.
    """
    seeds = [derive_seed(seed, m) for m in range(M)]
    n = worker_count(workers)
    if n == 1 or M == 1:
        return [fn(m, s) for m, s in enumerate(seeds)]
    with ThreadPoolExecutor(max_workers=n) as pool:
        return list(pool.map(fn, range(M), seeds))


# --------------------------------------------------------------------------
# Shared helpers
# --------------------------------------------------------------------------

def _window(grid, s, t):
    s = grid.t_start if s is None else s
    t = grid.t_end if t is None else t
    try:
        ks, kt = grid.index(s), grid.index(t)
    except PathError as exc:
        raise VerificationError(f"window bounds must be grid points: {exc}") from exc
    if kt < ks:
        raise VerificationError("window needs s <= t")
    return ks, kt


def _sum(series, ks, kt):
    return {k: float(np.sum(v[ks:kt])) for k, v in series.items()}


def _finish(formula, lhs, series, grid, ks, kt, keep_series, extras=None):
    """Breakdown of windowed sums; cumulative per-term series when requested."""
    times = cum = None
    if keep_series:
        times = grid.points[ks:kt + 1].copy()
        cum = {k: np.concatenate([[0.0], np.cumsum(v[ks:kt])]) for k, v in series.items()}
    return TermBreakdown.build(formula, lhs, _sum(series, ks, kt), extras, times, cum)


def _check_mode(mode):
    if mode not in COVARIATION_MODES:
        raise VerificationError(f"covariation must be one of {COVARIATION_MODES}, got {mode!r}")


def _path_cov(x, y, mode):
    """Per-interval ``d[X, Y]^c`` of two paths, shape ``(n_steps, dx, dy)``."""
    if mode == "generator-exact":
        return generator_increments(x.diffusion, x.noise_labels, y.diffusion, y.noise_labels, x.grid.dt)
    dx, dy = np.diff(x.mart_cont, axis=0), np.diff(y.mart_cont, axis=0)
    return dx[:, :, None] * dy[:, None, :]


def _match_tensor(flow, labels):
    """``P[i, c, j] = 1`` when column ``c`` of particle ``i`` is coordinate ``labels[j]``."""
    idx = {lab: j for j, lab in enumerate(labels)}
    P = np.zeros((flow.n_particles, len(flow.column_names), len(labels)))
    for c, ((name, k), shared) in enumerate(zip(flow.column_names, flow.shared_columns)):
        if shared:
            j = idx.get((name, k))
            if j is not None:
                P[:, c, j] = 1.0
        else:
            for i, pid in enumerate(flow.particle_ids):
                j = idx.get((f"{name}/{int(pid)}", k))
                if j is not None:
                    P[i, c, j] = 1.0
    return P


class _Cloud:
    """Per-particle inner evaluations of a flow used by the expectation terms."""

    def __init__(self, flow, S, mode):
        X, Xm = flow.values, flow.left_values
        self.flow = flow
        self.N = flow.n_particles
        self.g_at = S.inner_values(X)
        self.g_m = S.inner_values(Xm)
        self.G_k = S.inner_grads(X[:-1])
        self.G_m = S.inner_grads(Xm[1:])
        self.Hs_k = S.inner_hess(X[:-1])
        self.dXc = Xm[1:] - X[:-1]
        self.dJ = X[1:] - Xm[1:]
        self.dM = np.diff(flow.mart_cont, axis=0)
        self.dt = flow.grid.dt
        self.mode = mode
        if mode == "generator-exact":
            self.own_cov = np.einsum("kiam,kibm->kiab", flow.sigma, flow.sigma) * self.dt[:, None, None, None]
        else:
            self.own_cov = self.dM[:, :, :, None] * self.dM[:, :, None, :]

    @property
    def moments(self):
        return self.g_at.mean(axis=1)

    @property
    def moments_left(self):
        return self.g_m.mean(axis=1)

    def mean(self, arr):
        return arr.mean(axis=1)

    def grad_dot(self, G, dx):
        """``(1/N) sum_i grad g(X^i) . dx^i`` -> ``(n_steps, n_tot)``."""
        return np.einsum("kija,kia->kj", G, dx) / self.N

    def drift_part(self):
        """Ito drift of the moments over the continuous substep."""
        return self.grad_dot(self.G_k, self.dXc) + 0.5 * np.einsum("kijab,kiab->kj", self.Hs_k, self.own_cov) / self.N

    def shared_loadings(self):
        """``a_i = grad g(X^i) sigma_i`` on shared columns (realized: ``grad g dM``)."""
        if self.mode == "realized":
            return np.einsum("kija,kia->kij", self.G_k, self.dM)[..., None]
        sh = self.flow.shared_columns
        return np.einsum("kija,kiac->kijc", self.G_k, self.flow.sigma[..., sh])

    def moment_cov(self):
        """Per-interval ``d[Z, Z]^c`` of the empirical moments."""
        N = self.N
        if self.mode == "realized":
            dz = np.einsum("kija,kia->kij", self.G_k, self.dM).sum(axis=1) / N
            return dz[:, :, None] * dz[:, None, :]
        a = np.einsum("kija,kiac->kijc", self.G_k, self.flow.sigma)
        cz = np.einsum("kijc,kilc->kjl", a, a)
        sh = self.flow.shared_columns
        if sh.any():
            b = a[..., sh]
            s = b.sum(axis=1)
            cz = cz + np.einsum("kjc,klc->kjl", s, s) - np.einsum("kijc,kilc->kjl", b, b)
        return cz * self.dt[:, None, None] / N ** 2

    def cov_with(self, path):
        """Per-particle ``d[X^i, P]^c`` with a path, shape ``(n_steps, N, d, dP)``."""
        if self.mode == "realized":
            dP = np.diff(path.mart_cont, axis=0)
            return self.dM[:, :, :, None] * dP[:, None, None, :]
        P = _match_tensor(self.flow, path.noise_labels)
        if path.diffusion is None or not P.any():
            return np.zeros(self.dM.shape + (path.dim,))
        return np.einsum("kiam,imn,kbn->kiab", self.flow.sigma, P, path.diffusion) * self.dt[:, None, None, None]


def _pair_sum(a, D2):
    """``sum_{i != i'} a_i^T D2 a_i'`` per interval; ``a`` is ``(k, i, j[, c])``."""
    if a.ndim == 3:
        a = a[..., None]
    s = a.sum(axis=1)
    return np.einsum("kjc,kjl,klc->k", s, D2, s) - np.einsum("kijc,kjl,kilc->k", a, D2, a)


def _h_cross(S, W, Z, x, cov_zy, F):
    """``sum_{l in H} m_l phi_l(x) grad f_l(Z) . cov_zy[:, block_l, coord_l]``."""
    if not F.H:
        return np.zeros(W.grid.n_steps)
    hmask = (F.kinds == "H").astype(float)
    coef = W.modulation * hmask
    if x is not None:
        coef = coef * S.phi(x)
    hz = coef[:, S.z_layer] * S.outer_grads(Z)
    coords = np.array([ly.coord for ly in S.layers])[S.z_layer]
    return np.einsum("kj,kj->k", hz, cov_zy[:, np.arange(S.n_tot), coords])


def _policy(policy, A):
    """Indicator values and right moments selector per jump point."""
    if policy not in POLICIES:
        raise VerificationError(f"indicator policy must be one of {POLICIES}, got {policy!r}")
    n = A.grid.n_steps
    if policy == "empirical":
        return (~A.jump_mask[1:].any(axis=1)).astype(float), np.ones(n, dtype=bool)
    if policy == "law":
        common = A.shared_jump_mask[1:]
        return (~common).astype(float), common.copy()
    return np.ones(n), np.zeros(n, dtype=bool)


# --------------------------------------------------------------------------
# Classical Ito (single path)
# --------------------------------------------------------------------------

def verify_ito_pathwise(g, path, s=None, t=None, covariation="generator-exact", keep_series=False):
    """Classical Ito formula for ``g(X)`` along one path.

    Parameters
    ----------
    g : TestFunction
        Twice differentiable with analytic gradient and Hessian.
    path : SemimartingalePath
    s, t : float, optional
        Grid times bounding the window (default: whole grid).
    """
    _check_mode(covariation)
    ks, kt = _window(path.grid, s, t)
    X, Xm = path.values, path.left_values
    dXc, dJ = Xm[1:] - X[:-1], X[1:] - Xm[1:]
    C = _path_cov(path, path, covariation)
    gm = g.grad(Xm[1:])
    series = {
        "∫∂g dX": np.einsum("ka,ka->k", g.grad(X[:-1]), dXc) + np.einsum("ka,ka->k", gm, dJ),
        "½∫∂²g:d[X,X]^c": 0.5 * np.einsum("kab,kab->k", g.hess(X[:-1]), C),
        "jump sum": g.g(X[1:]) - g.g(Xm[1:]) - np.einsum("ka,ka->k", gm, dJ),
    }
    lhs = float(g.g(X[kt]) - g.g(X[ks]))
    return _finish("thm1", lhs, series, path.grid, ks, kt, keep_series)


# --------------------------------------------------------------------------
# Ito-Wentzell for x-fields (single path)
# --------------------------------------------------------------------------

def _wentzell_series(W, lv, lg, lh, x, xm, dxc, cov_xx, cov_xy, hmask, coords):
    """Per-interval terms of the Ito-Wentzell expansion of ``sum_l w_l v_l(x)``.

    ``lv``, ``lg``, ``lh`` return per-layer values ``(..., L)``, gradients
    ``(..., L, D)`` and Hessians ``(..., L, D, D)``.
    """
    v_k, v_m, v_p = lv(x[:-1]), lv(xm[1:]), lv(x[1:])
    g_k, g_m = lg(x[:-1]), lg(xm[1:])
    dj = x[1:] - xm[1:]
    at_k, left_p, at_p = W.at[:-1], W.left[1:], W.at[1:]
    grad_jump = np.einsum("kl,kld,kd->k", left_p, g_m, dj)
    if cov_xy is None or not hmask.any():
        cross = np.zeros(W.grid.n_steps)
    else:
        sel = np.moveaxis(cov_xy[:, :, coords], 2, 1)
        cross = np.einsum("kl,kld,kld->k", W.modulation * hmask, g_k, sel)
    return {
        "∫G dr": np.einsum("kl,kl->k", W.rate, v_k),
        "∫H dY": np.einsum("kl,kl->k", W.cont, v_k) + np.einsum("kl,kl->k", W.jump, v_m),
        "∫∂_xF dX": np.einsum("kl,kld,kd->k", at_k, g_k, dxc) + grad_jump,
        "½∫∂_xxF:d[X,X]^c": 0.5 * np.einsum("kl,klab,kab->k", at_k, lh(x[:-1]), cov_xx),
        "∫∂_xH:d[X,Y]^c": cross,
        "jump sum": (np.einsum("kl,kl->k", at_p, v_p) - np.einsum("kl,kl->k", left_p, v_m)
                     - grad_jump - np.einsum("kl,kl->k", W.jump, v_m)),
    }


def _layer_meta(F):
    return (F.kinds == "H").astype(float), np.array([ly.coord for ly in F.layers], dtype=int)


def verify_ito_wentzell_pathwise(F, X, Y=None, s=None, t=None, covariation="generator-exact", keep_series=False):
    """Ito-Wentzell expansion of ``F(t, X_t)`` for a random field in ``x``.

    Parameters
    ----------
    F : SpaceMeasureField
        Layers depend on ``x`` only; bound to its driver ``Y``.
    X : SemimartingalePath
        On the field's grid.
    Y : SemimartingalePath, optional
        Defaults to ``F.driver``; used for ``d[X, Y]^c``.
    """
    _check_mode(covariation)
    S = F.structure
    if S.measured:
        raise VerificationError("field depends on the measure; use verify_time_space_measure")
    Y = F.driver if Y is None else Y
    if F.grid is None or F.grid != X.grid:
        raise VerificationError("field and X must live on the same grid (bind the field first)")
    ks, kt = _window(X.grid, s, t)
    W = F.weights
    hmask, coords = _layer_meta(F)
    x, xm = X.values, X.left_values
    cov_xy = _path_cov(X, Y, covariation) if Y is not None else None
    series = _wentzell_series(W, S.phi, S.phi_grad, S.phi_hess, x, xm, xm[1:] - x[:-1],
                              _path_cov(X, X, covariation), cov_xy, hmask, coords)
    lhs = float(W.at[kt] @ S.phi(x[kt]) - W.at[ks] @ S.phi(x[ks]))
    return _finish("thm2", lhs, series, X.grid, ks, kt, keep_series)


def _outer_layer_fns(S):
    """Per-layer outer values, gradients and Hessians in the stacked moments."""
    def lg(Z):
        out = np.zeros(Z.shape[:-1] + (S.L, S.n_tot))
        for i in S.measured:
            b = S.blocks[i]
            out[..., i, b] = S.layers[i].measure.outer.grad(Z[..., b])
        return out

    def lh(Z):
        out = np.zeros(Z.shape[:-1] + (S.L, S.n_tot, S.n_tot))
        for i in S.measured:
            b = S.blocks[i]
            out[..., i, b, b] = S.layers[i].measure.outer.hess(Z[..., b])
        return out

    return S.outer_values, lg, lh


def expand_on_moments(F, flow, s=None, t=None, covariation="generator-exact", keep_series=False):
    """Classical Ito-Wentzell applied to ``f(t, Z^N)`` with ``Z^N`` the empirical moments.

    The moments form a finite-dimensional semimartingale whose continuous
    increment is the Ito expansion ``(1/N) sum_i [grad g dX^i + 1/2 hess g : d[X^i]]``;
    this is the independent oracle for the empirical-projection identity.
    """
    _check_mode(covariation)
    S = F.structure
    if S.spatial:
        raise VerificationError("the moment oracle needs a field without x-dependence")
    ks, kt = _window(flow.grid, s, t)
    W = F.weights
    cl = _Cloud(flow, S, covariation)
    Z, Zm = cl.moments, cl.moments_left
    hmask, coords = _layer_meta(F)
    cov_zy = None
    if F.driver is not None:
        cov_zy = np.einsum("kija,kial->kjl", cl.G_k, cl.cov_with(F.driver)) / cl.N
    lv, lg, lh = _outer_layer_fns(S)
    series = _wentzell_series(W, lv, lg, lh, Z, Zm, cl.drift_part(), cl.moment_cov(), cov_zy, hmask, coords)
    lhs = float(W.at[kt] @ lv(Z[kt]) - W.at[ks] @ lv(Z[ks]))
    return _finish("thm2-moments", lhs, series, flow.grid, ks, kt, keep_series)


# --------------------------------------------------------------------------
# Measure formulas
# --------------------------------------------------------------------------

def _measure_series(F, A, B, policy, covariation, corrections=False, conditional=False,
                    X=None, x_jump="left", separate=True):
    """Per-interval terms of the measure formula.

    ``A`` carries the measure argument, ``B`` realizes the tilde (or
    conditional) expectation.  With a state path ``X`` the layer
    coefficients carry ``phi_l(X)``: at ``X_k`` on continuous substeps and
    at ``X_{(k+1)-}`` (``x_jump="left"``) or ``X_{k+1}`` (``"right"``) at jump
    points.  Returns the series, the right moments used at jump points and
    the clouds.
    """
    S, W = F.structure, F.weights
    ca = _Cloud(A, S, covariation)
    cb = _Cloud(B, S, covariation) if separate else ca
    ZA, ZAm = ca.moments, ca.moments_left
    Zk, Zml, Zp = ZA[:-1], ZAm[1:], ZA[1:]
    ind, actual = _policy(policy, A)
    Zr = np.where(actual[:, None], Zp, Zml)
    xc = xj = None
    if X is not None:
        xc = X.values[:-1]
        xj = X.left_values[1:] if x_jump == "left" else X.values[1:]
    D1c = S.z_weights(W.at[:-1], xc) * S.outer_grads(Zk)
    D1j = S.z_weights(W.left[1:], xj) * S.outer_grads(Zml)
    cont_dx = cb.grad_dot(cb.G_k, cb.dXc)
    jump_dx = cb.grad_dot(cb.G_m, cb.dJ)
    hess_cov = np.einsum("kijab,kiab->kj", cb.Hs_k, cb.own_cov) / cb.N
    dg = cb.g_at[1:] - cb.g_m[1:]
    mean_dg = dg.mean(axis=1)
    h_jump = S.value(W.jump, xj, Zml)
    series = {
        "∫G dr": S.value(W.rate, xc, Zk),
        "∫H dY": S.value(W.cont, xc, Zk) + h_jump,
        "E~[∫∂_μF dX̃]": np.einsum("kj,kj->k", D1c, cont_dx) + np.einsum("kj,kj->k", D1j, jump_dx),
        "½E~[∂_x∂_μF:d[X̃,X̃]^c]": 0.5 * np.einsum("kj,kj->k", D1c, hess_cov),
        "jump sum: F": S.value(W.at[1:], xj, Zr) - S.value(W.left[1:], xj, Zml) - h_jump,
        "jump sum: δF/δμ · 1{μ=μ−}": ind * np.einsum("kj,kj->k", D1j, mean_dg),
        "−Σ∂_μF ΔX̃": -np.einsum("kj,kj->k", D1j, jump_dx),
    }
    if conditional:
        n = cb.N
        if n < 2:
            raise VerificationError("conditional terms need at least 2 inner particles")
        D2c = S.z_weights(W.at[:-1], xc)[:, :, None] * S.outer_hess(Zk)
        D2j = S.z_weights(W.left[1:], xj)[:, :, None] * S.outer_hess(Zml)
        series["½∂_μμF:d[X′,X″]^c"] = 0.5 * _pair_sum(cb.shared_loadings(), D2c) / (n * (n - 1)) * (
            cb.dt if covariation == "generator-exact" else 1.0)
        cross = np.zeros(W.grid.n_steps)
        if F.driver is not None:
            m_iy = np.einsum("kija,kial->kjl", cb.G_k, cb.cov_with(F.driver)) / n
            cross = _h_cross(S, W, Zk, xc, m_iy, F)
        series["∂_μH:d[X′,Y]^c"] = cross
        series["δ²F/δμ² double jump"] = ind * 0.5 * _pair_sum(dg, D2j) / (n * (n - 1))
        dh = S.z_weights(W.jump, xj) * S.outer_grads(Zml)
        series["δH/δμ · ΔY"] = ind * np.einsum("kj,kj->k", dh, mean_dg)
    if corrections:
        D2c = S.z_weights(W.at[:-1], xc)[:, :, None] * S.outer_hess(Zk)
        series["I₂: ½∂_zzf:d[Z,Z]^c"] = 0.5 * np.einsum("kjl,kjl->k", D2c, ca.moment_cov())
        cross = np.zeros(W.grid.n_steps)
        if F.driver is not None:
            czy = np.einsum("kija,kial->kjl", ca.G_k, ca.cov_with(F.driver)) / ca.N
            cross = _h_cross(S, W, Zk, xc, czy, F)
        series["I₃: ∂_zh:d[Z,Y]^c"] = cross
    return series, Zr, ca, cb


def rhs_terms_full(F, flow, tilde_flow=None, s=None, t=None, policy=None, corrections=None,
                   covariation="generator-exact", keep_series=False):
    """Measure-flow Ito-Wentzell terms for ``F(t, mu_t)``.

    Parameters
    ----------
    F : RandomField
        Bound to the flow's grid (and driver).
    flow : EmpiricalFlow
        Particles whose empirical measure is the measure argument.
    tilde_flow : EmpiricalFlow, optional
        Independent cloud realizing the tilde expectation.  When omitted the
        formula is applied to the empirical measure itself (empirical
        projection): ``tilde_flow = flow``, the indicator is evaluated on the
        empirical measure and the corrections ``I2``, ``I3`` are included.
    policy : {"empirical", "law", "one"}, optional
        Indicator evaluation; defaults to ``empirical`` for the projection
        and ``law`` otherwise.
    """
    _check_mode(covariation)
    if F.structure.spatial:
        raise VerificationError("field depends on x; use verify_time_space_measure")
    if F.grid is None or F.grid != flow.grid:
        raise VerificationError("field and flow must share a grid (bind the field first)")
    if tilde_flow is not None and tilde_flow.grid != flow.grid:
        raise VerificationError("tilde flow must be on the same grid as the flow")
    projection = tilde_flow is None
    policy = ("empirical" if projection else "law") if policy is None else policy
    corrections = projection if corrections is None else corrections
    ks, kt = _window(flow.grid, s, t)
    series, _, ca, _ = _measure_series(F, flow, flow if projection else tilde_flow, policy, covariation,
                                       corrections=corrections, separate=not projection)
    S, W = F.structure, F.weights
    lhs = float(S.value(W.at[kt], None, ca.moments[kt]) - S.value(W.at[ks], None, ca.moments[ks]))
    return _finish("thm3", lhs, series, flow.grid, ks, kt, keep_series)


def conditional_terms(F, flow, inner_flow, s=None, t=None, covariation="generator-exact", policy="law", keep_series=False):
    """Conditional measure-flow terms with the inner cloud realizing ``E-bar[. | F]``."""
    _check_mode(covariation)
    if F.grid is None or F.grid != flow.grid or inner_flow.grid != flow.grid:
        raise VerificationError("field, flow and inner flow must share a grid")
    ks, kt = _window(flow.grid, s, t)
    series, _, ca, _ = _measure_series(F, flow, inner_flow, policy, covariation, conditional=True)
    S, W = F.structure, F.weights
    lhs = float(S.value(W.at[kt], None, ca.moments[kt]) - S.value(W.at[ks], None, ca.moments[ks]))
    return _finish("thm4", lhs, series, flow.grid, ks, kt, keep_series)


# --------------------------------------------------------------------------
# Time-space-measure formulas
# --------------------------------------------------------------------------

def _x_derivs(S, w, x, Z):
    fz = w * S.outer_values(Z)
    return (np.einsum("kl,kla->ka", fz, S.phi_grad(x)), np.einsum("kl,klab->kab", fz, S.phi_hess(x)))


def time_space_terms(F, X, A, B, form="coro1", policy="law", corrections=False, conditional=False,
                     s=None, t=None, covariation="generator-exact", keep_series=False):
    """Terms of ``F(t, X_t, mu_t)`` for a product-structured field.

    ``form="coro1"`` evaluates the measure jump at ``X_{r-}`` and the
    x-jump after the measure has moved; ``"coro1-alt"`` evaluates the
    measure jump at ``X_r`` and the x-jump before it.  Both telescope to
    the same total at every event.
    """
    if form not in ("coro1", "coro1-alt"):
        raise VerificationError(f"form must be 'coro1' or 'coro1-alt', got {form!r}")
    if not isinstance(F, SpaceMeasureField):
        raise VerificationError("time-space-measure formulas need a SpaceMeasureField")
    _check_mode(covariation)
    S, W = F.structure, F.weights
    if F.grid is None or not (F.grid == X.grid == A.grid == B.grid):
        raise VerificationError("field, state path and flows must share a grid")
    ks, kt = _window(X.grid, s, t)
    alt = form == "coro1-alt"
    series, Zr, ca, cb = _measure_series(F, A, B, policy, covariation, corrections=corrections,
                                         conditional=conditional, X=X, x_jump="right" if alt else "left",
                                         separate=B is not A)
    x, xm = X.values, X.left_values
    Zk, Zml = ca.moments[:-1], ca.moments_left[1:]
    dxc, dj = xm[1:] - x[:-1], x[1:] - xm[1:]
    gx_k, hx_k = _x_derivs(S, W.at[:-1], x[:-1], Zk)
    wj = W.left[1:] if alt else W.at[1:]
    gx_j, _ = _x_derivs(S, wj, xm[1:], Zr)
    cov_xx = _path_cov(X, X, covariation)
    hmask, coords = _layer_meta(F)
    cross = np.zeros(W.grid.n_steps)
    if F.driver is not None and hmask.any():
        cov_xy = _path_cov(X, F.driver, covariation)
        fz = W.modulation * hmask * S.outer_values(Zk)
        sel = np.moveaxis(cov_xy[:, :, coords], 2, 1)
        cross = np.einsum("kl,kla,kla->k", fz, S.phi_grad(x[:-1]), sel)
    if alt:
        xjump = S.value(W.left[1:], x[1:], Zml) - S.value(W.left[1:], xm[1:], Zml)
    else:
        xjump = S.value(W.at[1:], x[1:], Zr) - S.value(W.at[1:], xm[1:], Zr)
    grad_jump = np.einsum("ka,ka->k", gx_j, dj)
    series.update({
        "∫∂_xF dX": np.einsum("ka,ka->k", gx_k, dxc) + grad_jump,
        "½∫∂_xxF:d[X,X]^c": 0.5 * np.einsum("kab,kab->k", hx_k, cov_xx),
        "∫∂_xH:d[X,Y]^c": cross,
        "x-jump sum": xjump - grad_jump,
    })
    if conditional or corrections:
        cloud = cb if conditional else ca
        if cloud.mode == "realized":
            dMx = np.diff(X.mart_cont, axis=0)
            c_xi = dMx[:, None, :, None] * cloud.dM[:, :, None, :]
        else:
            P = _match_tensor(cloud.flow, X.noise_labels)
            c_xi = np.einsum("kan,imn,kibm->kiab", X.diffusion, P, cloud.flow.sigma) * cloud.dt[:, None, None, None]
        coefz = W.at[:-1][:, S.z_layer] * S.outer_grads(Zk)
        phigz = S.phi_grad(x[:-1])[:, S.z_layer]
        mixed = np.einsum("kj,kja,kiab,kijb->k", coefz, phigz, c_xi, cloud.G_k) / cloud.N
        series["∂_x∂_μF:d[X,X′]^c" if conditional else "I_xZ: ∂_x∂_zF:d[X,Z]^c"] = mixed
    Z = ca.moments
    lhs = float(S.value(W.at[kt], x[kt], Z[kt]) - S.value(W.at[ks], x[ks], Z[ks]))
    return _finish("coro2" if conditional else form, lhs, series, X.grid, ks, kt, keep_series)


# --------------------------------------------------------------------------
# Poisson (compensated) formulas
# --------------------------------------------------------------------------

def _jump_quadrature(jump, intensity, X, grid):
    """``X^i_k + beta(t_k, X^i_k, e_q)`` and weights ``nu_q``; shapes ``(k, i, q, d)``, ``(q,)``.

    The jump map is called once with per-row times.
    """
    nodes, nu = intensity.quadrature()
    n, N, d = X.shape
    Q = nodes.shape[0]
    xr = np.repeat(X.reshape(n * N, d), Q, axis=0)
    marks = np.tile(nodes, (n * N, 1))
    t = np.repeat(grid.points[:-1], N * Q)
    out = xr + np.asarray(jump(t, xr, marks), dtype=float).reshape(n * N * Q, d)
    return out.reshape(n, N, Q, d), nu


def poisson_terms(F, A, B, coeffs, conditional=False, policy="law", s=None, t=None, keep_series=False):
    """Compensated terms of ``F(t, mu_t)`` for jump-diffusion particles.

    Jump sums of the particles and of the field's Poisson measure are
    replaced by their ``nu(de) dr`` compensators, computed by quadrature
    over marks at left grid points.  Realized event sums are reported in
    ``extras`` as cross-checks, together with the indicator-weighted
    realized jump term under ``policy``.
    """
    if not isinstance(F, PoissonField):
        raise VerificationError("compensated formulas need a PoissonField")
    if F.grid is None or not (F.grid == A.grid == B.grid):
        raise VerificationError("field and flows must share a grid")
    ks, kt = _window(A.grid, s, t)
    S, W = F.structure, F.weights
    grid = A.grid
    ca = _Cloud(A, S, "generator-exact")
    cb = _Cloud(B, S, "generator-exact") if B is not A else ca
    Zk = ca.moments[:-1]
    Zml = ca.moments_left[1:]
    D1c = S.z_weights(W.at[:-1]) * S.outer_grads(Zk)
    D1j = S.z_weights(W.left[1:]) * S.outer_grads(Zml)
    dt = grid.dt
    XB = B.values[:-1]
    drift = np.einsum("kija,kia->kj", cb.G_k, B.drift_values) * dt[:, None] / cb.N
    gen = drift + 0.5 * np.einsum("kijab,kiab->kj", cb.Hs_k, cb.own_cov) / cb.N
    g_k = cb.g_at[:-1]

    def nu_difference(jump, intensity):
        if jump is None or intensity is None or intensity.total_mass == 0:
            return np.zeros(gen.shape), None
        xq, nu = _jump_quadrature(jump, intensity, XB, grid)
        dgq = S.inner_values(xq) - g_k[:, :, None, :]
        return np.einsum("q,kiqj->kj", nu, dgq) * dt[:, None] / cb.N, (dgq, nu)

    idio, _ = nu_difference(coeffs.jump, coeffs.intensity)
    mean_dg = (cb.g_at[1:] - cb.g_m[1:]).mean(axis=1)
    ind, _ = _policy(policy, A)
    lbl = "Ē" if conditional else "E~"
    series = {
        "∫G dr": S.value(W.rate, None, Zk),
        "∫H dY": S.value(W.cont, None, Zk) + S.value(W.jump, None, Zml),
        "∫∫J ν(de)dr": S.value(W.comp, None, Zk),
        f"{lbl}[∫∂_μF b + ½∂_x∂_μF:σσᵀ dr]": np.einsum("kj,kj->k", D1c, gen),
        f"{lbl}[∫∫(δF/δμ(X+β)−δF/δμ(X)) ν(de)dr]": np.einsum("kj,kj->k", D1c, idio),
    }
    if conditional:
        n = cb.N
        D2c = S.z_weights(W.at[:-1])[:, :, None] * S.outer_hess(Zk)
        series["½Ē[∂_μμF:σ′σ″ᵀ dr]"] = 0.5 * _pair_sum(cb.shared_loadings(), D2c) / (n * (n - 1)) * dt
        series["Ē[∫∂_μF σ dW]"] = np.einsum("kj,kj->k", D1c, cb.grad_dot(cb.G_k, cb.dM))
        cross = np.zeros(grid.n_steps)
        if F.driver is not None:
            m_iy = np.einsum("kija,kial->kjl", cb.G_k, cb.cov_with(F.driver)) / n
            cross = _h_cross(S, W, Zk, None, m_iy, F)
        series["Ē[∂_μH:σ d[W,Y]]"] = cross
        common, quad = nu_difference(coeffs.common_jump, coeffs.common_intensity)
        series["Ē[∫∫(δF/δμ(X+β⁰)−δF/δμ(X)) ν⁰(de)dr]"] = np.einsum("kj,kj->k", D1c, common)
        bracket = np.zeros(grid.n_steps)
        djd = np.zeros(grid.n_steps)
        if quad is not None:
            dgq, nu = quad
            for q in range(nu.size):
                bracket += nu[q] * 0.5 * _pair_sum(dgq[:, :, q, :], D2c) / (n * (n - 1)) * dt
            if F.J:
                nodes, _ = coeffs.common_intensity.quadrature()
                jmask = (F.kinds == "J").astype(float)
                wq = np.stack([ly.weight_of_marks(nodes) if k == "J" else np.zeros(nu.size)
                               for ly, k in zip(S.layers, F.kinds)], axis=1)
                coef = (W.modulation * jmask)[:, None, :] * wq[None]
                djd = np.einsum("q,kqj,kj,kqj->k", nu, coef[:, :, S.z_layer], S.outer_grads(Zk),
                                dgq.mean(axis=1)) * dt
        series["½Ē[∫∫δ²F/δμ² bracket ν⁰(de)dr]"] = bracket
        series["Ē[∫∫(δJ/δμ(X+β⁰)−δJ/δμ(X)) ν⁰(de)dr]"] = djd
    realized_f = np.einsum("kj,kj->k", D1j, mean_dg)
    extras = _sum({
        "realized: ∫∫J N(de,dr)": S.value(W.event, None, Zml),
        "realized: Σ δF/δμ jumps": realized_f,
        "realized: Σ δF/δμ jumps · 1{μ=μ−}": ind * realized_f,
    }, ks, kt)
    Z = ca.moments
    lhs = float(S.value(W.at[kt], None, Z[kt]) - S.value(W.at[ks], None, Z[ks]))
    return _finish("coro4" if conditional else "coro3", lhs, series, grid, ks, kt, keep_series, extras)


# --------------------------------------------------------------------------
# Worlds
# --------------------------------------------------------------------------

@dataclass
class World:
    """One simulated realization: flows, optional state path, bound field."""

    grid: object
    A: object
    B: object
    F: object
    X: Optional[object] = None
    Y: Optional[object] = None
    common: Optional[object] = None


def _common_brownian_path(common, grid):
    d = common.refine(grid)
    empty = DriverSet(grid, d.brownian, np.zeros(0), np.zeros((0, 1)), d.seed, d.label)
    return simulate_semimartingale(brownian_motion(1.0, d.d_W), np.zeros(d.d_W), empty)


def build_world(scn, sizes, seed, kind, state=False):
    """Simulate one world of a scenario.

    ``kind`` is ``empirical`` (``B = A``), ``full`` (independent clouds
    from one i.i.d. simulation) or ``conditional`` (one conditional system
    split into measure and inner particles).  ``state`` appends one more
    particle used as the state path ``X``.
    """
    if kind not in ("empirical", "full", "conditional"):
        raise VerificationError(f"unknown world kind {kind!r}")
    base = build_time_grid(scn.t_start, scn.t_end, sizes.n_steps)
    grid0 = base
    y_drivers = None
    if scn.driver == "own":
        dc = scn.driver_coeffs
        y_drivers, grid0 = sample_drivers(base, dc.noise_dim, dc.intensity, derive_seed(seed, 2), "Y")
    events = None
    if isinstance(scn.field, PoissonField) and scn.field.J and scn.field_events == "own":
        times, _, marks = _sample_events(make_rng(seed, 3), base, scn.field.intensity, 1)
        grid0 = grid0.merged(times)
        events = (times, marks)
    NA = sizes.N
    NB = 0 if kind == "empirical" else sizes.n_tilde
    total = NA + NB + (1 if state else 0)
    x0 = broadcast_x0(scn.x0, scn.coeffs.dim)
    common = None
    if kind == "conditional":
        system = simulate_conditional_flow(scn.coeffs, x0, total, grid0, derive_seed(seed, 0),
                                           second_order=total >= 3)
        flow, common = system.flow, system.common
    else:
        if scn.driver == "common":
            raise VerificationError("driver 'common' needs a conditional scenario")
        flow = simulate_full_flow(scn.coeffs, x0, total, grid0, derive_seed(seed, 0))
    grid = flow.grid
    A = flow.subset(range(NA))
    B = A if kind == "empirical" else flow.subset(range(NA, NA + NB))
    X = flow.particle(total - 1) if state else None
    if scn.driver == "own":
        Y = simulate_semimartingale(scn.driver_coeffs, np.zeros(scn.driver_coeffs.dim), y_drivers, grid=grid)
    elif scn.driver == "particle":
        Y = A.particle(0)
    elif scn.driver == "state":
        if X is None:
            raise VerificationError("driver 'state' needs a state path")
        Y = X
    elif scn.driver == "common":
        Y = _common_brownian_path(common, grid)
    else:
        Y = None
    if isinstance(scn.field, PoissonField) and scn.field.J and scn.field_events == "common":
        if common is None or scn.coeffs.common_intensity is None:
            raise VerificationError("field_events 'common' needs common jumps in a conditional scenario")
        events = (common.event_times, common.event_marks)
    try:
        F = scn.field.bind(driver=Y, grid=grid, events=events)
    except FieldError as exc:
        raise VerificationError(str(exc)) from exc
    return World(grid, A, B, F, X, Y, common)


def _report(formula, mode, breakdowns, seed, config, sizes, scn):
    return VerificationReport(formula, mode, tuple(breakdowns), seed, config,
                              float(scn.span / sizes.n_steps), float(scn.scale))


def _scenario_check(scn):
    if not isinstance(scn, Scenario):
        raise VerificationError("expected a Scenario")


# --------------------------------------------------------------------------
# Public verifiers
# --------------------------------------------------------------------------

def run_ito(g, coeffs, sizes, seed=0, x0=0.0, t_start=0.0, t_end=1.0, covariation="generator-exact",
            workers=None, keep_series=False):
    """``verify_ito_pathwise`` over ``sizes.M`` independent paths."""
    base = build_time_grid(t_start, t_end, sizes.n_steps)
    x0 = broadcast_x0(x0, coeffs.dim)

    def one(m, s):
        d, grid = sample_drivers(base, coeffs.noise_dim, coeffs.intensity, s, "X")
        return verify_ito_pathwise(g, simulate_semimartingale(coeffs, x0, d, grid=grid), covariation=covariation,
                                   keep_series=keep_series and m == 0)

    bds = map_samples(one, sizes.M, seed, workers)
    return VerificationReport("thm1", "pathwise", tuple(bds), seed, {"g": g.name, "coeffs": coeffs.name},
                              (t_end - t_start) / sizes.n_steps, t_end - t_start)


def run_ito_wentzell(scn, sizes, seed=0, covariation="generator-exact", workers=None, keep_series=False):
    """``verify_ito_wentzell_pathwise`` over ``sizes.M`` independent paths."""
    _scenario_check(scn)
    if scn.coeffs.has_common:
        raise VerificationError("single-path formulas take coefficients without a common part")
    if scn.driver not in ("none", "own", "state"):
        raise VerificationError("single-path formulas support drivers 'none', 'own' and 'state'")
    base = build_time_grid(scn.t_start, scn.t_end, sizes.n_steps)
    x0 = broadcast_x0(scn.x0, scn.coeffs.dim)

    def one(m, s):
        c = scn.coeffs
        dx, grid = sample_drivers(base, c.noise_dim, c.intensity, derive_seed(s, 0), "X")
        dy = None
        if scn.driver == "own":
            dc = scn.driver_coeffs
            dy, gy = sample_drivers(base, dc.noise_dim, dc.intensity, derive_seed(s, 2), "Y")
            grid = grid.merged(dy.event_times)
        X = simulate_semimartingale(c, x0, dx, grid=grid)
        Y = {"own": lambda: simulate_semimartingale(scn.driver_coeffs, np.zeros(scn.driver_coeffs.dim), dy, grid=grid),
             "state": lambda: X, "none": lambda: None}[scn.driver]()
        F = scn.field.bind(driver=Y, grid=grid)
        return verify_ito_wentzell_pathwise(F, X, Y, covariation=covariation, keep_series=keep_series and m == 0)

    bds = map_samples(one, sizes.M, seed, workers)
    return _report("thm2", "pathwise", bds, seed, {"scenario": scn.name}, sizes, scn)


def verify_full_measure(scn, mode="mc-law", sizes=Sizes(), seed=0, corrections=None, policy=None,
                        covariation="generator-exact", workers=None, oracle=True, keep_series=False):
    """Measure-flow formula for ``F(t, Law(X_t))`` over independent worlds.

    ``pathwise-empirical`` applies the formula to the empirical measure of
    ``N`` particles (``B = A``), with the corrections ``I2``, ``I3`` on by
    default; each breakdown carries the moment oracle's total in
    ``extras`` (``oracle rhs``, ``oracle gap``).  ``mc-law`` draws ``2N``
    i.i.d. particles per world, uses the first ``N`` for the measure and
    the rest for the tilde expectation.
    """
    _scenario_check(scn)
    if mode not in ("pathwise-empirical", "mc-law"):
        raise VerificationError(f"mode must be 'pathwise-empirical' or 'mc-law', got {mode!r}")
    if mode == "mc-law" and sizes.M < 2:
        raise VerificationError("mc-law mode needs M >= 2 worlds for a standard error")
    if scn.field.structure.spatial:
        raise VerificationError("field depends on x; use verify_time_space_measure")
    empirical = mode == "pathwise-empirical"
    corrections = empirical if corrections is None else corrections
    policy = ("empirical" if empirical else "law") if policy is None else policy

    def one(m, s):
        w = build_world(scn, sizes, s, "empirical" if empirical else "full")
        bd = rhs_terms_full(w.F, w.A, None if empirical else w.B, policy=policy,
                            corrections=corrections, covariation=covariation, keep_series=keep_series and m == 0)
        if empirical and oracle:
            orc = expand_on_moments(w.F, w.A, covariation=covariation)
            extras = {"oracle rhs": orc.rhs, "oracle residual": orc.residual,
                      "oracle gap": bd.residual - orc.residual}
            bd = replace(bd, extras=extras)
        return bd

    bds = map_samples(one, sizes.M, seed, workers)
    cfg = {"scenario": scn.name, "corrections": bool(corrections), "policy": policy, "covariation": covariation}
    return _report("thm3", mode, bds, seed, cfg, sizes, scn)


def verify_conditional(scn, sizes=Sizes(), seed=0, covariation="generator-exact", workers=None, keep_series=False):
    """Conditional measure-flow formula over outer worlds.

    Each world simulates one conditional system of ``N + N_tilde``
    particles: the first ``N`` carry the measure argument and the remaining
    ``N_tilde`` are conditionally independent copies realizing
    ``E-bar[. | F]`` (pairs of distinct inner particles for second-order
    terms).
    """
    _scenario_check(scn)
    if not scn.coeffs.has_common:
        raise VerificationError("conditional verification needs a common/idiosyncratic split: "
                                "set common_diffusion (and common_noise_dim) or common_jump")
    if sizes.n_tilde < 3:
        raise VerificationError("conditional verification needs N_inner >= 3")

    def one(m, s):
        w = build_world(scn, sizes, s, "conditional")
        return conditional_terms(w.F, w.A, w.B, covariation=covariation, keep_series=keep_series and m == 0)

    bds = map_samples(one, sizes.M, seed, workers)
    return _report("thm4", "mc-conditional", bds, seed, {"scenario": scn.name, "covariation": covariation},
                   sizes, scn)


def verify_time_space_measure(scn, form="coro1", sizes=Sizes(), seed=0, mode="mc-law", corrections=None,
                              covariation="generator-exact", workers=None, keep_series=False):
    """``F(t, X_t, mu_t)`` for product fields ``sum phi_l(x) Phi_l(mu)``.

    ``form`` is ``coro1``, ``coro1-alt`` or ``coro2`` (conditional).  The
    state ``X`` is one extra particle of the simulation, independent of
    the measure particles given the common noise.  In ``pathwise-empirical``
    mode the measure is the empirical measure of the ``N`` particles (``B = A``)
    and the corrections (including ``d[X, Z]^c``) are on by default.
    """
    _scenario_check(scn)
    if not isinstance(scn.field, SpaceMeasureField):
        raise VerificationError("time-space-measure formulas need a product field (SpaceMeasureField)")
    if form not in ("coro1", "coro1-alt", "coro2"):
        raise VerificationError(f"form must be coro1, coro1-alt or coro2, got {form!r}")
    conditional = form == "coro2"
    if conditional and not scn.coeffs.has_common:
        raise VerificationError("coro2 needs a common/idiosyncratic split: set common_diffusion or common_jump")
    if mode not in ("pathwise-empirical", "mc-law"):
        raise VerificationError(f"unknown mode {mode!r}")
    empirical = mode == "pathwise-empirical" and not conditional
    corrections = empirical if corrections is None else corrections
    kind = "conditional" if conditional else ("empirical" if empirical else "full")
    policy = "empirical" if empirical else "law"

    def one(m, s):
        w = build_world(scn, sizes, s, kind, state=True)
        return time_space_terms(w.F, w.X, w.A, w.B, "coro1" if conditional else form, policy,
                                corrections, conditional, covariation=covariation,
                                keep_series=keep_series and m == 0)

    bds = map_samples(one, sizes.M, seed, workers)
    cfg = {"scenario": scn.name, "form": form, "corrections": bool(corrections), "covariation": covariation}
    return _report(form, mode if not conditional else "mc-conditional", bds, seed, cfg, sizes, scn)


def verify_poisson(scn, variant="full", sizes=Sizes(), seed=0, policy="law", mode="mc-law", workers=None,
                   keep_series=False):
    """Compensated formulas for jump-diffusion particles and Poisson fields.

    ``variant="full"`` uses i.i.d. clouds (or ``B = A`` in
    ``pathwise-empirical`` mode); ``"conditional"`` uses a conditional
    system whose common jumps also drive the field when
    ``field_events="common"``.
    """
    _scenario_check(scn)
    if not isinstance(scn.field, PoissonField):
        raise VerificationError("compensated formulas need a PoissonField")
    if variant not in ("full", "conditional"):
        raise VerificationError(f"variant must be 'full' or 'conditional', got {variant!r}")
    for inten in (scn.coeffs.intensity, scn.coeffs.common_intensity, scn.field.intensity):
        if inten is not None and not math.isfinite(inten.total_mass):
            raise VerificationError("compensated formulas need a finite intensity")
    conditional = variant == "conditional"
    if conditional and not scn.coeffs.has_common:
        raise VerificationError("coro4 needs a common/idiosyncratic split: set common_diffusion or common_jump")
    kind = "conditional" if conditional else ("empirical" if mode == "pathwise-empirical" else "full")

    def one(m, s):
        w = build_world(scn, sizes, s, kind)
        return poisson_terms(w.F, w.A, w.B, scn.coeffs, conditional, policy, keep_series=keep_series and m == 0)

    bds = map_samples(one, sizes.M, seed, workers)
    cfg = {"scenario": scn.name, "variant": variant, "policy": policy}
    return _report("coro4" if conditional else "coro3", mode, bds, seed, cfg, sizes, scn)


def convergence_study(run, levels, parameter, statistic="rms", seed=0):
    """Fit the log-log slope of a residual statistic across sweep levels.

    Parameters
    ----------
    run : callable
        ``run(level, seed) -> VerificationReport``.  The same seed is passed
        at every level, so sweeps over ``N`` or ``M`` reuse random numbers
        where the simulators allow it.
    levels : sequence of float
        At least three values of the swept parameter (``dt``, ``N`` or ``M``).
    parameter : str
        Name of the swept parameter, recorded in the result.
    statistic : str
        ``rms``, ``mean_abs``, ``max_abs``, ``standard_error`` or ``mean``.
    """
    levels = tuple(levels)
    if len(levels) < 3:
        raise VerificationError("a convergence study needs at least 3 levels")
    reports = tuple(run(level, seed) for level in levels)
    values = tuple(abs(r.statistic(statistic)) for r in reports)
    slope, ci = fit_loglog_slope(levels, values)
    return ConvergenceResult(parameter, levels, values, slope, ci, statistic, reports)
