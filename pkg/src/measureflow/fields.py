"""Random fields of a measure argument driven by a realized path.

A field is a finite sum of *layers*; each layer is a product

    weight(t) * phi(x) * Phi(mu)

where ``Phi`` is cylindrical in ``mu``, ``phi`` an optional spatial test
function, and ``weight`` a scalar process accumulated from an adapted
modulation ``m(t_k, Y_k)``:

* ``F0`` layers: weight 1;
* ``G`` layers: ``sum_k m_k dt_k``;
* ``H`` layers: ``sum_k m_k (Y_{k+1} - Y_k)[coord]`` (continuous part and
  jump of ``Y`` kept separately);
* ``J`` layers: ``sum_events m_k w(e)`` for events of the field's own
  Poisson measure, with compensator ``m_k * int w dnu * dt_k``.

Because the weights are finite sums, every derivative in ``mu`` or ``x`` of
the field is the same weighted sum of derivatives of the layers, so the
interchange of derivative and stochastic integral is exact here.
"""

from dataclasses import dataclass, field, replace
from functools import cached_property
from typing import Callable, ClassVar, Optional

import numpy as np

from .calculus import CylindricalFn, TestFunction, as_points
from .paths import JumpIntensity, PathError, SemimartingalePath, TimeGrid


class FieldError(ValueError):
    """Invalid field declaration or evaluation request."""


# --------------------------------------------------------------------------
# Modulations
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class Modulation:
    """Adapted scalar ``m(t, Y_t)`` read at the left end of each interval.

    ``fn(t, y)`` receives times ``(n,)`` and driver values ``(n, l)`` and
    returns ``(n,)``.  Only the driver value at the current grid time is
    visible, so the modulation is adapted by construction.
    """

    name: str
    fn: Callable = field(repr=False)
    uses_driver: bool = False

    def __call__(self, t, y):
        out = np.asarray(self.fn(np.asarray(t, dtype=float), np.asarray(y, dtype=float)), dtype=float)
        return np.broadcast_to(out, np.shape(t)).astype(float)


def constant_modulation(value=1.0):
    value = float(value)
    return Modulation(f"const({value:g})", lambda t, y: np.full(t.shape, value))


def time_modulation(scale=1.0, power=1.0):
    """``scale * t**power``."""
    return Modulation(f"{scale:g}*t^{power:g}", lambda t, y: scale * t ** power)


def driver_modulation(coord=0, scale=1.0):
    """``scale * Y_t[coord]``."""
    return Modulation(f"{scale:g}*Y[{coord}]", lambda t, y: scale * y[..., coord], True)


def driver_cos_modulation(coord=0, freq=1.0):
    """``cos(freq * Y_t[coord])``."""
    return Modulation(f"cos({freq:g}*Y[{coord}])", lambda t, y: np.cos(freq * y[..., coord]), True)


MODULATIONS = {
    "constant": (constant_modulation, {"value": 1.0}),
    "driver": (driver_modulation, {"coord": 0, "scale": 1.0}),
    "driver-cos": (driver_cos_modulation, {"coord": 0, "freq": 1.0}),
    "time": (time_modulation, {"scale": 1.0, "power": 1.0}),
}


# --------------------------------------------------------------------------
# Layers and fields
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class Layer:
    """One product term ``phi(x) * Phi(mu)`` with its modulation.

    Parameters
    ----------
    measure : CylindricalFn, optional
        ``Phi``; omitted means the constant 1.
    space : TestFunction, optional
        ``phi``; omitted means the constant 1.
    modulation : Modulation, optional
        Defaults to the constant 1.
    coord : int
        Driver coordinate integrated against (``H`` layers).
    mark_weight : callable, optional
        ``w(marks) -> (n,)`` for ``J`` layers; defaults to 1.
    """

    measure: Optional[CylindricalFn] = None
    space: Optional[TestFunction] = None
    modulation: Modulation = field(default_factory=constant_modulation)
    coord: int = 0
    mark_weight: Optional[Callable] = field(default=None, repr=False)

    @property
    def n_moments(self):
        return 0 if self.measure is None else self.measure.n

    def weight_of_marks(self, marks):
        marks = np.asarray(marks, dtype=float)
        marks = marks.reshape(marks.shape[0], -1) if marks.ndim else marks.reshape(1, 1)
        if self.mark_weight is None:
            return np.ones(marks.shape[0])
        return np.asarray(self.mark_weight(marks), dtype=float).reshape(marks.shape[0])


KINDS = ("F0", "G", "H", "J")


@dataclass(frozen=True, eq=False)
class FieldWeights:
    """Compiled weight processes of every layer on a grid.

    ``at[k]`` is the weight at grid time ``t_k`` and ``left[k]`` its left
    limit; per-interval increments are split into ``rate`` (``dt`` part),
    ``cont`` (continuous driver part), ``jump`` (driver jump) and ``event``
    (field Poisson events), plus ``comp``, the compensator of ``event``.
    """

    grid: TimeGrid
    at: np.ndarray
    left: np.ndarray
    rate: np.ndarray
    cont: np.ndarray
    jump: np.ndarray
    event: np.ndarray
    comp: np.ndarray
    modulation: np.ndarray


class _Structure:
    """Stacked evaluation of all layers of a field."""

    def __init__(self, layers, dim):
        self.layers = tuple(layers)
        self.dim = dim
        self.L = len(self.layers)
        sizes = [ly.n_moments for ly in self.layers]
        starts = np.concatenate([[0], np.cumsum(sizes)]).astype(int)
        self.blocks = [slice(int(starts[i]), int(starts[i + 1])) for i in range(self.L)]
        self.n_tot = int(starts[-1])
        self.z_layer = np.repeat(np.arange(self.L), sizes).astype(int)
        self.measured = [i for i, ly in enumerate(self.layers) if ly.measure is not None]
        self.spatial = [i for i, ly in enumerate(self.layers) if ly.space is not None]

    # inner test functions, stacked across layers
    def inner_values(self, x):
        x = as_points(x, self.dim)
        if not self.n_tot:
            return np.zeros(x.shape[:-1] + (0,))
        return np.concatenate([self.layers[i].measure.inner_values(x) for i in self.measured], axis=-1)

    def inner_grads(self, x):
        x = as_points(x, self.dim)
        if not self.n_tot:
            return np.zeros(x.shape[:-1] + (0, self.dim))
        return np.concatenate([self.layers[i].measure.inner_grads(x) for i in self.measured], axis=-2)

    def inner_hess(self, x):
        x = as_points(x, self.dim)
        if not self.n_tot:
            return np.zeros(x.shape[:-1] + (0, self.dim, self.dim))
        return np.concatenate([self.layers[i].measure.inner_hess(x) for i in self.measured], axis=-3)

    def moments(self, atoms, weights=None):
        """Stacked moments over the particle axis (second to last of ``atoms``)."""
        vals = self.inner_values(atoms)
        if weights is None:
            return vals.mean(axis=-2)
        return np.einsum("n,...nj->...j", weights, vals)

    # outer functions of each layer at stacked moments Z
    def outer_values(self, Z):
        Z = np.asarray(Z, dtype=float)
        out = np.ones(Z.shape[:-1] + (self.L,))
        for i in self.measured:
            out[..., i] = self.layers[i].measure.outer.f(Z[..., self.blocks[i]])
        return out

    def outer_grads(self, Z):
        """Concatenated ``grad f_l`` (unweighted), shape ``(..., n_tot)``."""
        Z = np.asarray(Z, dtype=float)
        out = np.zeros(Z.shape)
        for i in self.measured:
            out[..., self.blocks[i]] = self.layers[i].measure.outer.grad(Z[..., self.blocks[i]])
        return out

    def outer_hess(self, Z):
        """Block-diagonal ``hess f_l`` (unweighted), shape ``(..., n_tot, n_tot)``."""
        Z = np.asarray(Z, dtype=float)
        out = np.zeros(Z.shape + (self.n_tot,))
        for i in self.measured:
            b = self.blocks[i]
            out[..., b, b] = self.layers[i].measure.outer.hess(Z[..., b])
        return out

    # spatial factors
    def phi(self, x):
        x = as_points(x, self.dim)
        out = np.ones(x.shape[:-1] + (self.L,))
        for i in self.spatial:
            out[..., i] = self.layers[i].space.g(x)
        return out

    def phi_grad(self, x):
        x = as_points(x, self.dim)
        out = np.zeros(x.shape[:-1] + (self.L, self.dim))
        for i in self.spatial:
            out[..., i, :] = self.layers[i].space.grad(x)
        return out

    def phi_hess(self, x):
        x = as_points(x, self.dim)
        out = np.zeros(x.shape[:-1] + (self.L, self.dim, self.dim))
        for i in self.spatial:
            out[..., i, :, :] = self.layers[i].space.hess(x)
        return out

    def value(self, w, x, Z):
        """``sum_l w_l phi_l(x) f_l(Z_l)``; ``x=None`` drops the spatial factor."""
        coef = np.asarray(w, dtype=float) * self.outer_values(Z)
        if x is not None:
            coef = coef * self.phi(x)
        return coef.sum(axis=-1)

    def z_weights(self, w, x=None):
        """Per-moment layer coefficient ``w_l phi_l(x)`` expanded to ``(..., n_tot)``."""
        c = np.asarray(w, dtype=float)
        if x is not None:
            c = c * self.phi(x)
        return c[..., self.z_layer]


@dataclass(frozen=True, eq=False)
class _LayeredField:
    """Shared implementation of the field classes."""

    F0: tuple = ()
    G: tuple = ()
    H: tuple = ()
    driver: Optional[SemimartingalePath] = field(default=None, repr=False)
    J: tuple = ()
    events: Optional[tuple] = field(default=None, repr=False)
    intensity: Optional[JumpIntensity] = None
    grid: Optional[TimeGrid] = field(default=None, repr=False)
    dim: int = 1

    allow_space: ClassVar[bool] = True
    allow_jumps: ClassVar[bool] = True

    def __post_init__(self):
        for kind in KINDS:
            object.__setattr__(self, kind, tuple(getattr(self, kind)))
        if not self.layers:
            raise FieldError("a field needs at least one layer")
        for ly in self.layers:
            for part in (ly.measure, ly.space):
                if part is not None and part.dim != self.dim:
                    raise FieldError(f"layer dimension {part.dim} does not match field dimension {self.dim}")
            if ly.space is not None and not self.allow_space:
                raise FieldError(f"{type(self).__name__} layers cannot depend on x; use SpaceMeasureField")
        if self.J and not self.allow_jumps:
            raise FieldError(f"{type(self).__name__} has no Poisson part; use PoissonField")
        if self.J and self.intensity is None:
            raise FieldError("J layers need the intensity of the field's Poisson measure")
        if self.driver is not None:
            if self.grid is not None and self.grid != self.driver.grid:
                raise FieldError("field grid differs from the driver grid")
            object.__setattr__(self, "grid", self.driver.grid)
            for ly in self.H:
                if not 0 <= ly.coord < self.driver.dim:
                    raise FieldError(f"H layer integrates driver coordinate {ly.coord}, driver has {self.driver.dim}")

    @property
    def layers(self):
        return self.F0 + self.G + self.H + self.J

    @property
    def kinds(self):
        return np.array([k for k in KINDS for _ in getattr(self, k)])

    @cached_property
    def structure(self):
        return _Structure(self.layers, self.dim)

    @property
    def is_second_order(self):
        """All outer functions carry Hessians (always true for the catalog)."""
        return all(ly.measure is None or ly.measure.outer.hess is not None for ly in self.layers)

    def bind(self, driver=None, grid=None, events=None):
        """Copy of the field attached to a driver path, grid and events."""
        return replace(self, driver=driver, grid=grid if driver is None else None, events=events)

    @cached_property
    def weights(self):
        """Compiled ``FieldWeights`` on the driver grid."""
        grid = self.grid
        if grid is None:
            raise FieldError("field is not bound to a grid; call bind() first")
        if self.H and self.driver is None:
            raise FieldError("H layers need a driver path")
        n, L = grid.n_steps, len(self.layers)
        t = grid.points[:-1]
        dt = grid.dt
        if self.driver is not None:
            y_left = self.driver.values[:-1]
            y_cont = self.driver.values[1:] - self.driver.jump_increments[1:] - self.driver.values[:-1]
            y_jump = self.driver.jump_increments[1:]
        else:
            y_left = np.zeros((n, 0))
        kinds = self.kinds
        mods = np.zeros((n, L))
        rate, cont, jump, event, comp = (np.zeros((n, L)) for _ in range(5))
        ev_idx, ev_marks = self._event_arrays(grid)
        for i, (ly, kind) in enumerate(zip(self.layers, kinds)):
            if kind == "F0":
                continue
            if ly.modulation.uses_driver and self.driver is None:
                raise FieldError(f"modulation {ly.modulation.name} reads the driver but none is bound")
            m = ly.modulation(t, y_left)
            mods[:, i] = m
            if kind == "G":
                rate[:, i] = m * dt
            elif kind == "H":
                cont[:, i] = m * y_cont[:, ly.coord]
                jump[:, i] = m * y_jump[:, ly.coord]
            else:
                nodes, nu = self.intensity.quadrature()
                comp[:, i] = m * float(nu @ ly.weight_of_marks(nodes)) * dt
                if ev_idx.size:
                    np.add.at(event[:, i], ev_idx - 1, m[ev_idx - 1] * ly.weight_of_marks(ev_marks))
        init = (kinds == "F0").astype(float)
        at = np.empty((n + 1, L))
        left = np.empty((n + 1, L))
        at[0] = left[0] = init
        for k in range(n):
            left[k + 1] = at[k] + rate[k] + cont[k]
            at[k + 1] = left[k + 1] + (jump[k] + event[k])
        return FieldWeights(grid, at, left, rate, cont, jump, event, comp, mods)

    def _event_arrays(self, grid):
        if not self.J or self.events is None:
            return np.zeros(0, dtype=int), np.zeros((0, 1))
        times, marks = self.events
        times = np.asarray(times, dtype=float)
        if times.size == 0:
            return np.zeros(0, dtype=int), np.zeros((0, 1))
        marks = np.asarray(marks, dtype=float).reshape(times.size, -1)
        try:
            idx = grid.indices(times)
        except PathError as exc:
            raise FieldError(f"field events must be grid points: {exc}") from exc
        if np.any(idx == 0):
            raise FieldError("field events must lie after t_start")
        return idx, marks

    def weights_at(self, t, left=False):
        k = self._index(t)
        return (self.weights.left if left else self.weights.at)[k]

    def _index(self, t):
        if self.grid is None:
            raise FieldError("field is not bound to a grid; call bind() first")
        try:
            return self.grid.index(t)
        except PathError as exc:
            raise FieldError(f"cannot evaluate the field at t={t!r}: {exc}") from exc

    def square_integrability(self):
        """Per-kind ``sum_k max_l |increment|^2 / dt`` surrogate of the L2 bound."""
        w = self.weights
        dt = w.grid.dt[:, None]
        return {"G": float(np.sum(w.rate ** 2 / dt)), "H": float(np.sum((w.cont + w.jump) ** 2 / dt)),
                "J": float(np.sum(w.comp ** 2 / dt))}


class RandomField(_LayeredField):
    """``F(t, mu) = F0(mu) + int_0^t G_s(mu) ds + int_0^t H_s(mu) dY_s``."""

    allow_space = False
    allow_jumps = False


class SpaceMeasureField(_LayeredField):
    """Sums of ``phi(x) Phi(mu)`` layers; ``Phi`` may be absent (pure x-field)."""

    allow_space = True
    allow_jumps = False


class PoissonField(_LayeredField):
    """Measure field with an extra ``int int J_s(e, mu) N(de, ds)`` part."""

    allow_space = False
    allow_jumps = True


# --------------------------------------------------------------------------
# Evaluation
# --------------------------------------------------------------------------

def _moments_of(F, mu):
    atoms = np.asarray(mu.atoms, dtype=float)
    if atoms.shape[1] != F.dim:
        raise FieldError(f"measure dimension {atoms.shape[1]} does not match field dimension {F.dim}")
    return F.structure.moments(atoms, np.asarray(mu.weights))


def evaluate_field(F, t, mu, x=None, left=False):
    """``F(t, mu)`` (or ``F(t, x, mu)``) at a grid time ``t``.

    With ``left=True`` the left limit ``F(t-, mu)`` is returned.
    """
    w = F.weights_at(t, left)
    S = F.structure
    if x is None and S.spatial:
        raise FieldError("this field depends on x; pass x")
    return float(S.value(w, None if x is None else as_points(x, F.dim), _moments_of(F, mu)))


def field_mu_derivative(F, t, mu, y, y2=None, x=None, left=False):
    """Derivatives of the field in ``mu`` at a grid time.

    Returns a dict with ``linear`` (recentred), ``lions`` (shape ``(d,)``)
    and ``lions_space`` (``(d, d)``); when ``y2`` is given also
    ``second_linear`` and ``second_lions``.
    """
    w = F.weights_at(t, left)
    S = F.structure
    if x is None and S.spatial:
        raise FieldError("this field depends on x; pass x")
    Z = _moments_of(F, mu)
    coef = S.z_weights(w, None if x is None else as_points(x, F.dim))
    D1 = coef * S.outer_grads(Z)
    y = as_points(y, F.dim)
    out = {
        "linear": float(D1 @ (S.inner_values(y) - Z)),
        "lions": np.einsum("j,jd->d", D1, S.inner_grads(y)),
        "lions_space": np.einsum("j,jab->ab", D1, S.inner_hess(y)),
    }
    if y2 is not None:
        if not F.is_second_order:
            raise FieldError("second-order derivatives need Hessians of every outer function")
        D2 = coef[:, None] * S.outer_hess(Z)
        y2 = as_points(y2, F.dim)
        a, b = S.inner_values(y) - Z, S.inner_values(y2) - Z
        out["second_linear"] = float(a @ D2 @ b)
        out["second_lions"] = np.einsum("ja,jk,kb->ab", S.inner_grads(y), D2, S.inner_grads(y2))
    return out


# --------------------------------------------------------------------------
# Derivative / stochastic integral interchange
# --------------------------------------------------------------------------

def leibniz_check(layers, w_path, x, h, eps=1e-4, t=None):
    """Compare a difference quotient of ``int f(t, x) dW`` with ``int Df(t, x)(h) dW``.

    The functional lives on the lift of ``N``-atom uniform measures: a
    point ``x`` of shape ``(N, d)`` stands for the measure with those atoms,
    and ``f(t, x) = sum_l m_l(t, W_t) Phi_l(mu_x)``.  The derivative in the
    direction ``h`` is ``(1/N) sum_i D_mu Phi(mu_x, x_i) . h_i``.  Both sides
    are computed on the same path; the quotient is central,
    ``[I(x + eps h) - I(x - eps h)] / (2 eps)``.

    Returns
    -------
    float
        Absolute discrepancy at time ``t`` (default: end of the grid).
    """
    if not eps > 0:
        raise FieldError("eps must be positive")
    x = np.asarray(x, dtype=float)
    h = np.asarray(h, dtype=float)
    if x.ndim == 1:
        x, h = x[:, None], h.reshape(-1, 1)
    if x.shape != h.shape:
        raise FieldError("direction h must have the shape of x")
    F = RandomField(H=layers, driver=w_path, dim=x.shape[1])
    t = w_path.grid.t_end if t is None else t
    w = F.weights_at(t)
    S = F.structure

    def integral(points):
        return float(S.value(w, None, S.moments(points)))

    quotient = (integral(x + eps * h) - integral(x - eps * h)) / (2 * eps)
    Z = S.moments(x)
    D1 = S.z_weights(w) * S.outer_grads(Z)
    exact = float(np.einsum("j,njd,nd->", D1, S.inner_grads(x), h) / x.shape[0])
    return abs(quotient - exact)
