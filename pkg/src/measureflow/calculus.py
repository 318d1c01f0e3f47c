"""Cylindrical functions on the space of probability measures.

A cylindrical function has the form ``F(mu) = f(<mu, g_1>, ..., <mu, g_n>)``
where ``f`` is a smooth outer function on R^n and each ``g_j`` is a smooth
test function on R^d.  For this class every derivative used by the
verifiers is available in closed form:

* linear (flat) derivative, recentred so that it integrates to zero
  against ``mu``::

      dF/dmu(mu, y) = sum_j df/dz_j(Z) * (g_j(y) - <mu, g_j>)

* Lions derivative and its spatial gradient::

      D_mu F(mu, y)       = sum_j df/dz_j(Z) * grad g_j(y)
      D_y D_mu F(mu, y)   = sum_j df/dz_j(Z) * hess g_j(y)

* second order derivatives::

      d2F/dmu2(mu, y, y')  = sum_jk d2f/dz_j dz_k(Z) (g_j(y) - Z_j)(g_k(y') - Z_k)
      D_mumu F(mu, y, y')  = sum_jk d2f/dz_j dz_k(Z) grad g_j(y) grad g_k(y')^T

with ``Z_j = <mu, g_j>``.  All callables are vectorised over leading axes:
a test function maps points of shape ``(..., d)`` to ``(...)``.
"""

from dataclasses import dataclass, field
from typing import Callable

import numpy as np


class CalculusError(ValueError):
    """Raised for inconsistent dimensions or invalid step sizes."""


# --------------------------------------------------------------------------
# Test functions
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class TestFunction:
    """Smooth function ``g: R^d -> R`` with analytic gradient and Hessian.

    Parameters
    ----------
    name : str
        Label used in reports and the catalog.
    dim : int
        Spatial dimension d.
    g, grad, hess : callable
        Vectorised maps ``(..., d) -> (...)``, ``(..., d)`` and ``(..., d, d)``.
    bound : float
        Declared sup-norm bound shared by ``g``, ``grad`` and ``hess``.
        ``inf`` marks a locally valid (unbounded) function such as ``x**2``.
    """

    __test__ = False  # keep pytest from collecting this class

    name: str
    dim: int
    g: Callable[[np.ndarray], np.ndarray] = field(repr=False)
    grad: Callable[[np.ndarray], np.ndarray] = field(repr=False)
    hess: Callable[[np.ndarray], np.ndarray] = field(repr=False)
    bound: float = np.inf

    def __call__(self, x):
        return self.g(as_points(x, self.dim))

    @property
    def locally_valid(self):
        """True when the function is not globally bounded."""
        return not np.isfinite(self.bound)

    def gradient_error(self, points, h=1e-4, seed=0):
        """Largest central-difference gradient mismatch along random directions."""
        x = as_points(points, self.dim).reshape(-1, self.dim)
        rng = np.random.default_rng(seed)
        eps = rng.standard_normal(x.shape)
        eps /= np.linalg.norm(eps, axis=-1, keepdims=True)
        fd = (self.g(x + h * eps) - self.g(x - h * eps)) / (2 * h)
        exact = np.einsum("...i,...i->...", self.grad(x), eps)
        return float(np.max(np.abs(fd - exact)))

    def bound_holds(self, points):
        """Check the declared bound for g, grad and hess on probe points."""
        if self.locally_valid:
            return True
        x = as_points(points, self.dim).reshape(-1, self.dim)
        worst = max(np.max(np.abs(self.g(x))),
                    np.max(np.linalg.norm(self.grad(x), axis=-1)),
                    np.max(np.linalg.norm(self.hess(x), ord=2, axis=(-2, -1))))
        return bool(worst <= self.bound * (1 + 1e-12))


def as_points(x, dim):
    """Coerce ``x`` to an array of points with trailing axis ``dim``.

    Scalars and 1-D arrays of scalars are accepted when ``dim == 1``.
    """
    x = np.asarray(x, dtype=float)
    if dim == 1 and (x.ndim == 0 or x.shape[-1] != 1):
        x = x[..., None]
    if x.shape[-1] != dim:
        raise CalculusError(f"expected points of dimension {dim}, got shape {x.shape}")
    return x


def _coordinate(dim, coord):
    if not 0 <= coord < dim:
        raise CalculusError(f"coordinate {coord} outside dimension {dim}")
    e = np.zeros(dim)
    e[coord] = 1.0
    return e


def _lift_scalar(name, dim, coord, h0, h1, h2, bound):
    """Test function of one coordinate from a scalar function and its derivatives."""
    e = _coordinate(dim, coord)
    ee = np.outer(e, e)

    def g(x):
        return h0(x[..., coord])

    def grad(x):
        return h1(x[..., coord])[..., None] * e

    def hess(x):
        return h2(x[..., coord])[..., None, None] * ee

    return TestFunction(name, dim, g, grad, hess, bound)


def polynomial(coeffs, coord=0, dim=1):
    """Polynomial ``sum_i c_i x_coord**i`` of degree at most 4 (unbounded)."""
    c = np.asarray(coeffs, dtype=float)
    if c.ndim != 1 or not 1 <= c.size <= 5:
        raise CalculusError("polynomial needs 1 to 5 coefficients (degree <= 4)")
    P = np.polynomial.Polynomial(c)
    d1, d2 = P.deriv(1), P.deriv(2)
    label = "polynomial(" + ",".join(f"{v:g}" for v in c) + ")"
    bound = np.inf if np.any(c[1:] != 0) else float(abs(c[0]))
    return _lift_scalar(label, dim, coord, P, d1, d2, bound)


def sine(freq=1.0, phase=0.0, coord=0, dim=1):
    """``sin(freq * x_coord + phase)``."""
    a, p = float(freq), float(phase)
    return _lift_scalar(
        f"sin({a:g}x+{p:g})", dim, coord,
        lambda u: np.sin(a * u + p),
        lambda u: a * np.cos(a * u + p),
        lambda u: -a * a * np.sin(a * u + p),
        max(1.0, abs(a), a * a))


def cosine(freq=1.0, phase=0.0, coord=0, dim=1):
    """``cos(freq * x_coord + phase)``."""
    f = sine(freq, phase + np.pi / 2, coord, dim)
    return TestFunction(f"cos({float(freq):g}x+{float(phase):g})", dim, f.g, f.grad, f.hess, f.bound)


def linear(weights):
    """Linear form ``w . x`` (unbounded)."""
    w = np.atleast_1d(np.asarray(weights, dtype=float))
    dim = w.size
    zero = np.zeros((dim, dim))

    def g(x):
        return x @ w

    def grad(x):
        return np.broadcast_to(w, x.shape).copy()

    def hess(x):
        return np.broadcast_to(zero, x.shape + (dim,)).copy()

    return TestFunction("linear(" + ",".join(f"{v:g}" for v in w) + ")", dim, g, grad, hess, np.inf)


def gaussian_bump(center=0.0, width=1.0):
    """``exp(-|x - center|^2 / (2 width^2))``."""
    c = np.atleast_1d(np.asarray(center, dtype=float))
    w2 = float(width) ** 2
    dim = c.size
    eye = np.eye(dim)

    def g(x):
        return np.exp(-np.sum((x - c) ** 2, axis=-1) / (2 * w2))

    def grad(x):
        return -(g(x) / w2)[..., None] * (x - c)

    def hess(x):
        u = x - c
        outer = u[..., :, None] * u[..., None, :]
        return g(x)[..., None, None] * (outer / w2 ** 2 - eye / w2)

    bound = max(1.0, np.exp(-0.5) / np.sqrt(w2), 1.0 / w2)
    return TestFunction(f"gaussian_bump(w={float(width):g})", dim, g, grad, hess, bound)


def compact_bump(center=0.0, radius=1.0):
    """Smooth bump ``exp(1 - 1/(1 - s))`` with ``s = |x - center|^2 / radius^2``,
    identically zero for ``s >= 1``."""
    c = np.atleast_1d(np.asarray(center, dtype=float))
    r2 = float(radius) ** 2
    dim = c.size
    eye = np.eye(dim)

    def _parts(x):
        u = x - c
        s = np.sum(u ** 2, axis=-1) / r2
        inside = s < 1
        q = np.where(inside, 1 - s, 1.0)
        val = np.where(inside, np.exp(1 - 1 / q), 0.0)
        d1 = np.where(inside, -val / q ** 2, 0.0)
        d2 = np.where(inside, val * (1 - 2 * q) / q ** 4, 0.0)
        return u, val, d1, d2

    def g(x):
        return _parts(x)[1]

    def grad(x):
        u, _, d1, _ = _parts(x)
        return (2 * d1 / r2)[..., None] * u

    def hess(x):
        u, _, d1, d2 = _parts(x)
        outer = u[..., :, None] * u[..., None, :]
        return (4 * d2 / r2 ** 2)[..., None, None] * outer + (2 * d1 / r2)[..., None, None] * eye

    # radial probe for the declared bound
    s = np.linspace(0, 1, 20001)[:-1]
    q = 1 - s
    val = np.exp(1 - 1 / q)
    d1 = -val / q ** 2
    d2 = val * (1 - 2 * q) / q ** 4
    rho = np.sqrt(s * r2)
    grad_norm = np.abs(2 * d1 / r2) * rho
    hess_norm = np.abs(4 * d2 / r2 ** 2) * rho ** 2 + np.abs(2 * d1 / r2)
    bound = 1.05 * max(1.0, grad_norm.max(), hess_norm.max())
    return TestFunction(f"compact_bump(r={float(radius):g})", dim, g, grad, hess, bound)


TEST_FUNCTIONS = {
    "bump": (compact_bump, {"center": 0.0, "radius": 1.0}),
    "cos": (cosine, {"freq": 1.0, "phase": 0.0, "coord": 0, "dim": 1}),
    "gaussian": (gaussian_bump, {"center": 0.0, "width": 1.0}),
    "linear": (linear, {"weights": [1.0]}),
    "polynomial": (polynomial, {"coeffs": [0.0, 1.0], "coord": 0, "dim": 1}),
    "sin": (sine, {"freq": 1.0, "phase": 0.0, "coord": 0, "dim": 1}),
}


def make_test_function(name, **params):
    """Instantiate a catalog test function by name."""
    try:
        ctor, defaults = TEST_FUNCTIONS[name]
    except KeyError:
        raise CalculusError(f"unknown test function {name!r}") from None
    unknown = set(params) - set(defaults)
    if unknown:
        raise CalculusError(f"unknown parameters for {name!r}: {sorted(unknown)}")
    return ctor(**{**defaults, **params})


# --------------------------------------------------------------------------
# Outer functions
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class OuterFunction:
    """Smooth ``f: R^n -> R`` with analytic gradient and Hessian.

    All three callables act on arrays of shape ``(..., n)``.
    """

    name: str
    n: int
    f: Callable[[np.ndarray], np.ndarray] = field(repr=False)
    grad: Callable[[np.ndarray], np.ndarray] = field(repr=False)
    hess: Callable[[np.ndarray], np.ndarray] = field(repr=False)
    affine: bool = False


def identity_outer():
    """``f(z) = z`` for a single moment."""
    return affine_outer([1.0], 0.0, name="identity")


def affine_outer(a, c=0.0, name=None):
    """``f(z) = a . z + c``; every second-order derivative vanishes."""
    a = np.atleast_1d(np.asarray(a, dtype=float))
    n = a.size
    zero = np.zeros((n, n))
    return OuterFunction(
        name or "affine", n,
        lambda z: z @ a + c,
        lambda z: np.broadcast_to(a, z.shape).copy(),
        lambda z: np.broadcast_to(zero, z.shape + (n,)).copy(),
        affine=True)


def quadratic_outer(A, a=None, c=0.0, name=None):
    """``f(z) = 0.5 z^T A z + a . z + c`` with ``A`` symmetrised."""
    A = np.atleast_2d(np.asarray(A, dtype=float))
    A = 0.5 * (A + A.T)
    n = A.shape[0]
    a = np.zeros(n) if a is None else np.atleast_1d(np.asarray(a, dtype=float))
    return OuterFunction(
        name or "quadratic", n,
        lambda z: 0.5 * np.einsum("...i,ij,...j->...", z, A, z) + z @ a + c,
        lambda z: z @ A + a,
        lambda z: np.broadcast_to(A, z.shape + (n,)).copy())


def square_outer():
    """``f(z) = z**2`` for a single moment."""
    return quadratic_outer([[2.0]], name="square")


def power_outer(p):
    """``f(z) = z**p`` for a single moment and integer ``p >= 1``."""
    p = int(p)
    if p < 1:
        raise CalculusError("power must be a positive integer")
    return OuterFunction(
        f"power{p}", 1,
        lambda z: z[..., 0] ** p,
        lambda z: p * z ** (p - 1),
        lambda z: (p * (p - 1) * z ** max(p - 2, 0))[..., None],
        affine=p == 1)


def sine_outer(a):
    """``f(z) = sin(a . z)``."""
    a = np.atleast_1d(np.asarray(a, dtype=float))
    n = a.size
    aa = np.outer(a, a)
    return OuterFunction(
        "sin", n,
        lambda z: np.sin(z @ a),
        lambda z: np.cos(z @ a)[..., None] * a,
        lambda z: -np.sin(z @ a)[..., None, None] * aa)


def product_outer():
    """``f(z) = z_1 z_2``."""
    return quadratic_outer([[0.0, 1.0], [1.0, 0.0]], name="product")


# --------------------------------------------------------------------------
# Cylindrical functions
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class CylindricalFn:
    """``F(mu) = outer(<mu, inner_1>, ..., <mu, inner_n>)``."""

    outer: OuterFunction
    inner: tuple

    def __post_init__(self):
        inner = tuple(self.inner)
        object.__setattr__(self, "inner", inner)
        if len(inner) < 1:
            raise CalculusError("a cylindrical function needs at least one test function")
        if len(inner) != self.outer.n:
            raise CalculusError(
                f"outer function takes {self.outer.n} moments but {len(inner)} test functions given")
        dims = {g.dim for g in inner}
        if len(dims) != 1:
            raise CalculusError(f"test functions disagree on dimension: {sorted(dims)}")

    @property
    def n(self):
        return len(self.inner)

    @property
    def dim(self):
        return self.inner[0].dim

    @property
    def name(self):
        return f"{self.outer.name}(" + ", ".join(g.name for g in self.inner) + ")"

    # stacked evaluations of the inner test functions
    def inner_values(self, x):
        """``(..., d) -> (..., n)``."""
        return np.stack([g.g(x) for g in self.inner], axis=-1)

    def inner_grads(self, x):
        """``(..., d) -> (..., n, d)``."""
        return np.stack([g.grad(x) for g in self.inner], axis=-2)

    def inner_hess(self, x):
        """``(..., d) -> (..., n, d, d)``."""
        return np.stack([g.hess(x) for g in self.inner], axis=-3)

    def moments(self, mu):
        """Vector ``Z`` of moments ``<mu, g_j>``."""
        return np.asarray(mu.weights) @ self.inner_values(np.asarray(mu.atoms))

    # derivatives expressed through the moment vector Z
    def value_at(self, Z):
        return self.outer.f(Z)

    def linear_at(self, Z, y):
        y = as_points(y, self.dim)
        return np.sum(self.outer.grad(Z) * (self.inner_values(y) - Z), axis=-1)

    def lions_at(self, Z, y):
        y = as_points(y, self.dim)
        return np.einsum("j,...jd->...d", self.outer.grad(Z), self.inner_grads(y))

    def lions_space_at(self, Z, y):
        y = as_points(y, self.dim)
        return np.einsum("j,...jab->...ab", self.outer.grad(Z), self.inner_hess(y))

    def second_linear_at(self, Z, y, y2):
        a = self.inner_values(as_points(y, self.dim)) - Z
        b = self.inner_values(as_points(y2, self.dim)) - Z
        return np.einsum("...j,jk,...k->...", a, self.outer.hess(Z), b)

    def second_lions_at(self, Z, y, y2):
        a = self.inner_grads(as_points(y, self.dim))
        b = self.inner_grads(as_points(y2, self.dim))
        return np.einsum("...ja,jk,...kb->...ab", a, self.outer.hess(Z), b)


def cylindrical(outer, *inner):
    """Shorthand constructor ``cylindrical(outer, g_1, ..., g_n)``."""
    return CylindricalFn(outer, tuple(inner))


def eval_cyl(F, mu):
    """Value ``F(mu)``."""
    return float(F.value_at(F.moments(mu)))


def linear_derivative(F, mu, y):
    """Recentred linear derivative ``dF/dmu(mu, y)``; vectorised over points ``y``."""
    return F.linear_at(F.moments(mu), y)


def lions_derivative(F, mu, y):
    """Lions derivative ``D_mu F(mu, y)`` with shape ``(..., d)``."""
    return F.lions_at(F.moments(mu), y)


def lions_space_derivative(F, mu, y):
    """Spatial gradient ``D_y D_mu F(mu, y)`` with shape ``(..., d, d)``."""
    return F.lions_space_at(F.moments(mu), y)


def second_derivatives(F, mu, y, y2):
    """Second linear derivative and second Lions derivative at ``(y, y2)``.

    Returns
    -------
    (d2F, DmumuF) : tuple
        ``d2F/dmu2(mu, y, y2)`` with shape ``(...)`` and
        ``D_mumu F(mu, y, y2)`` with shape ``(..., d, d)``.
    """
    Z = F.moments(mu)
    return F.second_linear_at(Z, y, y2), F.second_lions_at(Z, y, y2)


def fd_lift_check(F, mu, atoms=None, h=1e-4):
    """Compare the Lions derivative with central differences of the lift.

    On the probability space of ``N`` equally likely atoms the lift of ``F``
    is a function of the atom positions.  Moving atom ``i`` by ``h e_k`` and
    scaling the central difference by ``N`` must reproduce the ``k``-th
    component of ``D_mu F(mu, atom_i)``.

    Parameters
    ----------
    atoms : sequence of int, optional
        Atom indices to probe (default: all).
    h : float
        Spatial step, must be positive.

    Returns
    -------
    float
        Largest absolute discrepancy over probed atoms and coordinates.
    """
    if not h > 0:
        raise CalculusError("step h must be positive")
    x = np.asarray(mu.atoms, dtype=float)
    w = np.asarray(mu.weights, dtype=float)
    N, d = x.shape
    if not np.allclose(w, 1.0 / N, rtol=0, atol=1e-15):
        raise CalculusError("fd_lift_check needs uniform weights")
    idx = range(N) if atoms is None else atoms

    def value(points):
        Z = np.full(N, 1.0 / N) @ F.inner_values(points)
        return float(F.value_at(Z))

    worst = 0.0
    for i in idx:
        exact = lions_derivative(F, mu, x[i])
        for k in range(d):
            xp, xm = x.copy(), x.copy()
            xp[i, k] += h
            xm[i, k] -= h
            fd = (value(xp) - value(xm)) * N / (2 * h)
            worst = max(worst, abs(fd - exact[k]))
    return worst


OUTER_FUNCTIONS = {
    "affine": (affine_outer, {"a": [1.0], "c": 0.0}),
    "identity": (identity_outer, {}),
    "power": (power_outer, {"p": 2}),
    "product": (product_outer, {}),
    "quadratic": (quadratic_outer, {"A": [[2.0]], "a": None, "c": 0.0}),
    "sin": (sine_outer, {"a": [1.0]}),
    "square": (square_outer, {}),
}


def make_outer(name, **params):
    """Instantiate a catalog outer function by name."""
    try:
        ctor, defaults = OUTER_FUNCTIONS[name]
    except KeyError:
        raise CalculusError(f"unknown outer function {name!r}") from None
    unknown = set(params) - set(defaults)
    if unknown:
        raise CalculusError(f"unknown parameters for {name!r}: {sorted(unknown)}")
    return ctor(**{**defaults, **params})


def random_cylindrical(rng, dim=1, max_inner=3):
    """Random cylindrical function from bounded catalog pieces.

    Used by randomized test suites: smooth outer functions composed with
    sine, cosine and Gaussian-bump test functions.
    """
    n = int(rng.integers(1, max_inner + 1))
    inner = []
    for _ in range(n):
        kind = rng.integers(3)
        coord = int(rng.integers(dim))
        if kind == 0:
            inner.append(sine(rng.uniform(0.5, 2.0), rng.uniform(-1, 1), coord, dim))
        elif kind == 1:
            inner.append(cosine(rng.uniform(0.5, 2.0), rng.uniform(-1, 1), coord, dim))
        else:
            inner.append(gaussian_bump(rng.uniform(-1, 1, dim), rng.uniform(0.5, 2.0)))
    choice = rng.integers(3)
    if choice == 0:
        B = rng.normal(size=(n, n))
        outer = quadratic_outer(B + B.T, rng.normal(size=n), rng.normal())
    elif choice == 1:
        outer = sine_outer(rng.uniform(-2, 2, n))
    else:
        outer = affine_outer(rng.normal(size=n), rng.normal())
    return CylindricalFn(outer, tuple(inner))

