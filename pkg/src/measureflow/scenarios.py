"""Scenario records, field templates and dict-spec parsing.

A ``Scenario`` bundles the particle dynamics, an unbound field and the
choice of driver path; the verifiers bind the field to each simulated
world.  The ``*_from_spec`` helpers turn plain dictionaries (as read from
a YAML config) into these objects and raise ``ScenarioError`` naming the
offending field.
"""

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .calculus import (OUTER_FUNCTIONS, TEST_FUNCTIONS, CalculusError, CylindricalFn,
                       identity_outer, make_outer, make_test_function, polynomial, square_outer)
from .fields import (MODULATIONS, FieldError, Layer, PoissonField, RandomField,
                     SpaceMeasureField, constant_modulation, driver_modulation)
from .paths import (COEFFICIENT_TEMPLATES, Coefficients, DiscreteMarks, JumpIntensity,
                    NormalMarks, PathError, PointMark, UniformMarks)


class ScenarioError(ValueError):
    """Invalid scenario or configuration entry."""


DRIVERS = ("none", "own", "particle", "common", "state")


@dataclass(frozen=True)
class Sizes:
    """Discretization and sample sizes.

    ``N`` measure particles, ``N_tilde`` tilde/inner particles (defaults to
    ``N``) and ``M`` independent worlds.
    """

    n_steps: int = 100
    N: int = 100
    M: int = 1
    N_tilde: Optional[int] = None

    def __post_init__(self):
        for name in ("n_steps", "N", "M"):
            v = getattr(self, name)
            if int(v) != v or v < 1:
                raise ScenarioError(f"sizes.{name} must be a positive integer, got {v!r}")
        if self.N_tilde is not None and (int(self.N_tilde) != self.N_tilde or self.N_tilde < 1):
            raise ScenarioError("sizes.N_tilde must be a positive integer")

    @property
    def n_tilde(self):
        return self.N if self.N_tilde is None else int(self.N_tilde)

    @classmethod
    def from_dt(cls, dt, span=1.0, **kw):
        n = int(round(span / dt))
        if n < 1 or abs(n * dt - span) > 1e-9 * span:
            raise ScenarioError(f"dt={dt!r} does not divide the interval length {span!r}")
        return cls(n_steps=n, **kw)


@dataclass(frozen=True)
class Scenario:
    """Dynamics, field and driver choice for one verification.

    Parameters
    ----------
    coeffs : Coefficients
        Particle dynamics.
    field : RandomField, SpaceMeasureField or PoissonField
        Unbound; verifiers attach a driver, grid and events per world.
    driver : str
        ``none``; ``own`` (independent path from ``driver_coeffs``);
        ``particle`` (the first measure particle); ``common`` (the common
        Brownian motion of a conditional system); ``state`` (the state path
        ``X`` itself).
    field_events : str
        Source of a Poisson field's events: ``own`` (sampled from the
        field's intensity) or ``common`` (the common jump events).
    """

    name: str
    coeffs: Coefficients
    field: object
    x0: object = 0.0
    t_start: float = 0.0
    t_end: float = 1.0
    driver: str = "none"
    driver_coeffs: Optional[Coefficients] = None
    field_events: str = "own"
    scale: float = 1.0

    def __post_init__(self):
        if self.driver not in DRIVERS:
            raise ScenarioError(f"driver must be one of {DRIVERS}, got {self.driver!r}")
        if self.field_events not in ("own", "common"):
            raise ScenarioError("field_events must be 'own' or 'common'")
        if not self.t_end > self.t_start:
            raise ScenarioError("t_end must exceed t_start")
        if self.field.H and self.driver == "none":
            raise ScenarioError("field has H layers but the scenario declares no driver")
        if self.driver == "own" and self.driver_coeffs is None:
            from .paths import brownian_motion
            object.__setattr__(self, "driver_coeffs", brownian_motion())
        if self.field.dim != self.coeffs.dim:
            raise ScenarioError(f"field dimension {self.field.dim} differs from state dimension {self.coeffs.dim}")

    @property
    def span(self):
        return self.t_end - self.t_start


# --------------------------------------------------------------------------
# Field templates
# --------------------------------------------------------------------------

def _mean_fn(dim=1, coord=0):
    return CylindricalFn(identity_outer(), (polynomial([0.0, 1.0], coord, dim),))


def mean_field(dim=1, coord=0):
    """``F(mu) = <mu, x>``."""
    return RandomField(F0=(Layer(measure=_mean_fn(dim, coord)),), dim=dim)


def second_moment_field(dim=1, coord=0):
    """``F(mu) = <mu, x^2>``."""
    return RandomField(F0=(Layer(measure=CylindricalFn(identity_outer(), (polynomial([0.0, 0.0, 1.0], coord, dim),))),),
                       dim=dim)


def mean_squared_field(dim=1, coord=0):
    """``F(mu) = <mu, x>^2``."""
    return RandomField(F0=(Layer(measure=CylindricalFn(square_outer(), (polynomial([0.0, 1.0], coord, dim),))),),
                       dim=dim)


def driven_mean_field(dim=1, coord=0):
    """``F(t, mu) = int_0^t <mu, x> dY``."""
    return RandomField(H=(Layer(measure=_mean_fn(dim, coord)),), dim=dim)


def driven_square_field(dim=1, coord=0):
    """``F(t, mu) = <mu, x>^2 + int_0^t <mu, x>^2 dr + int_0^t Y <mu, x> dY``."""
    sq = CylindricalFn(square_outer(), (polynomial([0.0, 1.0], coord, dim),))
    return RandomField(F0=(Layer(measure=sq),), G=(Layer(measure=sq),),
                       H=(Layer(measure=_mean_fn(dim, coord), modulation=driver_modulation()),), dim=dim)


def x_times_driver_field():
    """``F(t, x) = x Y_t`` (no measure dependence)."""
    return SpaceMeasureField(H=(Layer(space=polynomial([0.0, 1.0])),))


def x_times_mean_field():
    """``F(x, mu) = x <mu, x>``."""
    return SpaceMeasureField(F0=(Layer(measure=_mean_fn(), space=polynomial([0.0, 1.0])),))


def poisson_mean_field(rate=0.0):
    """``F(t, mu) = <mu, x>``, plus ``int int <mu, x> N(de, dr)`` when ``rate > 0``."""
    if rate:
        return PoissonField(F0=(Layer(measure=_mean_fn()),), J=(Layer(measure=_mean_fn()),),
                            intensity=JumpIntensity(rate))
    return PoissonField(F0=(Layer(measure=_mean_fn()),))


FIELD_TEMPLATES = {
    "driven-mean": (driven_mean_field, {"dim": 1, "coord": 0}),
    "driven-square": (driven_square_field, {"dim": 1, "coord": 0}),
    "mean": (mean_field, {"dim": 1, "coord": 0}),
    "mean-squared": (mean_squared_field, {"dim": 1, "coord": 0}),
    "poisson-mean": (poisson_mean_field, {"rate": 0.0}),
    "second-moment": (second_moment_field, {"dim": 1, "coord": 0}),
    "x-times-driver": (x_times_driver_field, {}),
    "x-times-mean": (x_times_mean_field, {}),
}


def make_field(name, **params):
    """Instantiate a field template by name."""
    try:
        ctor, defaults = FIELD_TEMPLATES[name]
    except KeyError:
        raise ScenarioError(f"unknown field template {name!r}") from None
    unknown = set(params) - set(defaults)
    if unknown:
        raise ScenarioError(f"unknown parameters for field template {name!r}: {sorted(unknown)}")
    return ctor(**params)


# --------------------------------------------------------------------------
# Spec parsing
# --------------------------------------------------------------------------

def _split(spec, where):
    if isinstance(spec, str):
        return spec, {}
    if not isinstance(spec, dict) or "name" not in spec:
        raise ScenarioError(f"{where}: expected a name or a table with a 'name' key")
    params = {k: v for k, v in spec.items() if k != "name"}
    return spec["name"], params


def test_function_from_spec(spec, where="test function"):
    name, params = _split(spec, where)
    try:
        return make_test_function(name, **params)
    except (CalculusError, TypeError, ValueError) as exc:
        raise ScenarioError(f"{where}: {exc}") from exc


def cylindrical_from_spec(spec, where="measure"):
    if not isinstance(spec, dict) or "inner" not in spec:
        raise ScenarioError(f"{where}: expected a table with 'outer' and 'inner'")
    outer_name, outer_params = _split(spec.get("outer", "identity"), f"{where}.outer")
    try:
        outer = make_outer(outer_name, **outer_params)
    except (CalculusError, TypeError, ValueError) as exc:
        raise ScenarioError(f"{where}.outer: {exc}") from exc
    inner = spec["inner"] if isinstance(spec["inner"], list) else [spec["inner"]]
    fns = tuple(test_function_from_spec(s, f"{where}.inner[{i}]") for i, s in enumerate(inner))
    try:
        return CylindricalFn(outer, fns)
    except (CalculusError, ValueError) as exc:
        raise ScenarioError(f"{where}: {exc}") from exc


def modulation_from_spec(spec, where="modulation"):
    if spec is None:
        return constant_modulation()
    name, params = _split(spec, where)
    if name not in MODULATIONS:
        raise ScenarioError(f"{where}: unknown modulation {name!r}")
    ctor, defaults = MODULATIONS[name]
    unknown = set(params) - set(defaults)
    if unknown:
        raise ScenarioError(f"{where}: unknown parameters {sorted(unknown)}")
    return ctor(**{**defaults, **params})


def layer_from_spec(spec, where="layer"):
    if not isinstance(spec, dict):
        raise ScenarioError(f"{where}: expected a table")
    unknown = set(spec) - {"measure", "space", "modulation", "coord"}
    if unknown:
        raise ScenarioError(f"{where}: unknown keys {sorted(unknown)}")
    return Layer(
        measure=cylindrical_from_spec(spec["measure"], f"{where}.measure") if "measure" in spec else None,
        space=test_function_from_spec(spec["space"], f"{where}.space") if "space" in spec else None,
        modulation=modulation_from_spec(spec.get("modulation"), f"{where}.modulation"),
        coord=int(spec.get("coord", 0)))


def marks_from_spec(spec, where="marks"):
    if spec is None:
        return PointMark(1.0)
    kind, params = _split(spec, where)
    ctors = {"point": PointMark, "discrete": DiscreteMarks, "normal": NormalMarks, "uniform": UniformMarks}
    if kind not in ctors:
        raise ScenarioError(f"{where}: unknown mark distribution {kind!r} (choose from {sorted(ctors)})")
    try:
        return ctors[kind](**params)
    except (PathError, TypeError, ValueError) as exc:
        raise ScenarioError(f"{where}: {exc}") from exc


def intensity_from_spec(spec, where="intensity"):
    if not isinstance(spec, dict) or "rate" not in spec:
        raise ScenarioError(f"{where}: expected a table with 'rate'")
    try:
        return JumpIntensity(float(spec["rate"]), marks_from_spec(spec.get("marks"), f"{where}.marks"))
    except (PathError, ValueError) as exc:
        raise ScenarioError(f"{where}: {exc}") from exc


def field_from_spec(spec, where="field"):
    """Field from ``{template: name, ...}`` or explicit layer lists."""
    if not isinstance(spec, dict):
        raise ScenarioError(f"{where}: expected a table")
    if "template" in spec:
        params = {k: v for k, v in spec.items() if k != "template"}
        return make_field(spec["template"], **params)
    kind = spec.get("kind", "measure")
    classes = {"measure": RandomField, "space-measure": SpaceMeasureField, "poisson": PoissonField}
    if kind not in classes:
        raise ScenarioError(f"{where}.kind: choose from {sorted(classes)}, got {kind!r}")
    unknown = set(spec) - {"kind", "F0", "G", "H", "J", "intensity", "dim"}
    if unknown:
        raise ScenarioError(f"{where}: unknown keys {sorted(unknown)}")
    layers = {}
    for k in ("F0", "G", "H", "J"):
        items = spec.get(k, [])
        layers[k] = tuple(layer_from_spec(s, f"{where}.{k}[{i}]") for i, s in enumerate(items))
    kw = dict(F0=layers["F0"], G=layers["G"], H=layers["H"], dim=int(spec.get("dim", 1)))
    if layers["J"] or "intensity" in spec:
        if kind != "poisson":
            raise ScenarioError(f"{where}: J layers need kind = 'poisson'")
        kw["J"] = layers["J"]
        kw["intensity"] = intensity_from_spec(spec.get("intensity"), f"{where}.intensity")
    try:
        return classes[kind](**kw)
    except FieldError as exc:
        raise ScenarioError(f"{where}: {exc}") from exc


def coefficients_from_spec(spec, where="coefficients"):
    """Coefficients from ``{template: name, <params>, marks: ...}``."""
    if not isinstance(spec, dict) or "template" not in spec:
        raise ScenarioError(f"{where}: expected a table with 'template'")
    name = spec["template"]
    if name not in COEFFICIENT_TEMPLATES:
        raise ScenarioError(f"{where}.template: unknown coefficient template {name!r}")
    ctor, defaults = COEFFICIENT_TEMPLATES[name]
    params = {k: v for k, v in spec.items() if k not in ("template", "marks")}
    unknown = set(params) - set(defaults)
    if unknown:
        raise ScenarioError(f"{where}: unknown parameters for {name!r}: {sorted(unknown)}")
    if "marks" in spec:
        params["marks"] = marks_from_spec(spec["marks"], f"{where}.marks")
    try:
        return ctor(**{**defaults, **params})
    except (PathError, TypeError, ValueError) as exc:
        raise ScenarioError(f"{where}: {exc}") from exc


def catalog():
    """Registered names with default parameters, sorted by name."""
    def schema(reg):
        return {k: {p: v for p, v in sorted(d.items())} for k, (_, d) in sorted(reg.items())}

    return {
        "coefficient templates": schema(COEFFICIENT_TEMPLATES),
        "field templates": schema(FIELD_TEMPLATES),
        "modulations": schema(MODULATIONS),
        "outer functions": schema(OUTER_FUNCTIONS),
        "test functions": schema(TEST_FUNCTIONS),
    }


def broadcast_x0(x0, dim):
    x0 = np.atleast_1d(np.asarray(x0, dtype=float))
    if x0.size == 1:
        return np.full(dim, float(x0[0]))
    if x0.shape != (dim,):
        raise ScenarioError(f"x0 must be a scalar or have {dim} entries")
    return x0
