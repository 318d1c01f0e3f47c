"""Numerical verification of Itô-type formulas for functions of measure-valued flows.

Modules
-------
paths
    Time grids, drivers and Euler simulation of jump diffusions.
measures
    Empirical measures and particle flows (full and conditional).
calculus
    Cylindrical functions of measures and their derivatives.
fields
    Random fields ``F(t, x, mu)`` built from layered cylindrical terms.
scenarios
    Named templates and spec parsing.
verifier
    Term-by-term evaluation of each formula and residual statistics.
cli
    YAML-driven runner.
"""

__version__ = "0.1.0"

from .calculus import CylindricalFn, OuterFunction, TestFunction, fd_lift_check, make_outer, make_test_function
from .fields import Layer, PoissonField, RandomField, SpaceMeasureField, evaluate_field, leibniz_check
from .measures import EmpiricalFlow, EmpiricalMeasure, simulate_conditional_flow, simulate_full_flow
from .paths import (Coefficients, JumpIntensity, build_time_grid, derive_seed, sample_drivers,
                    simulate_semimartingale)
from .scenarios import Scenario, Sizes, make_field
from .verifier import (VerificationReport, convergence_study, run_ito, run_ito_wentzell, verify_conditional,
                       verify_full_measure, verify_poisson, verify_time_space_measure)

__all__ = [
    "Coefficients", "CylindricalFn", "EmpiricalFlow", "EmpiricalMeasure", "JumpIntensity", "Layer",
    "OuterFunction", "PoissonField", "RandomField", "Scenario", "Sizes", "SpaceMeasureField", "TestFunction",
    "VerificationReport", "build_time_grid", "convergence_study", "derive_seed", "evaluate_field",
    "fd_lift_check", "leibniz_check", "make_field", "make_outer", "make_test_function", "run_ito",
    "run_ito_wentzell", "sample_drivers", "simulate_conditional_flow", "simulate_full_flow",
    "simulate_semimartingale", "verify_conditional", "verify_full_measure", "verify_poisson",
    "verify_time_space_measure",
]
