from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from measureflow.calculus import (cylindrical, identity_outer, make_outer, polynomial, random_cylindrical, sine,
                                  square_outer)
from measureflow.fields import Layer, PoissonField, RandomField, SpaceMeasureField, driver_modulation
from measureflow.measures import simulate_full_flow
from measureflow.paths import (DriverSet, JumpIntensity, brownian_motion, build_time_grid, common_noise,
                               compound_poisson, drifted_brownian, jump_diffusion, sample_drivers,
                               simulate_semimartingale)
from measureflow.scenarios import Scenario, Sizes, make_field
from measureflow.verifier import (TermBreakdown, VerificationError, build_world, convergence_study,
                                  fit_loglog_slope, map_samples, rhs_terms_full, run_ito, run_ito_wentzell,
                                  time_space_terms, verify_conditional, verify_full_measure,
                                  verify_ito_pathwise, verify_ito_wentzell_pathwise, verify_poisson,
                                  verify_time_space_measure)

MEAN = cylindrical(identity_outer(), polynomial([0.0, 1.0]))
SECOND = cylindrical(identity_outer(), polynomial([0.0, 0.0, 1.0]))
SQUARE = polynomial([0.0, 0.0, 1.0])
JUMP_NAMES = ("jump sum: F", "jump sum: δF/δμ · 1{μ=μ−}", "−Σ∂_μF ΔX̃")


def bm_path(n, seed, coeffs=None):
    coeffs = brownian_motion() if coeffs is None else coeffs
    d, grid = sample_drivers(build_time_grid(0, 1, n), coeffs.noise_dim, coeffs.intensity, seed)
    return simulate_semimartingale(coeffs, np.zeros(coeffs.dim), d)


def unit_jump_path(t_jump=0.3):
    grid = build_time_grid(0.0, 1.0, 4, [t_jump])
    d = DriverSet(grid, np.zeros((grid.n_steps, 0)), [t_jump], [[1.0]])
    return simulate_semimartingale(compound_poisson(rate=1.0), [0.0], d)


# --- result types ---------------------------------------------------------------

def test_breakdown_residual_is_lhs_minus_sum():
    bd = TermBreakdown.build("x", 1.0, {"a": 0.25, "b": 0.5})
    assert bd.residual == 0.25 and bd.rhs == 0.75


def test_slope_fit_and_study_errors():
    assert fit_loglog_slope([1, 2, 4], [3, 6, 12])[0] == pytest.approx(1.0)
    with pytest.raises(VerificationError):
        fit_loglog_slope([1, 2], [1, 2])
    with pytest.raises(VerificationError):
        convergence_study(lambda lv, s: None, [1, 2], "N")


def test_map_samples_is_order_stable():
    a = map_samples(lambda m, s: (m, s.spawn_key), 7, 3, workers=1)
    b = map_samples(lambda m, s: (m, s.spawn_key), 7, 3, workers=3)
    assert a == b


# --- classical Ito -------------------------------------------------------------

def test_identity_telescopes_exactly():
    g = polynomial([0.0, 1.0])
    for p in (bm_path(200, 1), bm_path(200, 2, jump_diffusion(rate=4.0))):
        assert abs(verify_ito_pathwise(g, p).residual) <= 1e-12


def test_square_of_brownian_motion():
    r = run_ito(SQUARE, brownian_motion(), Sizes(1000, 1, 100), seed=0)
    assert r.rms_residual <= 0.05
    # oracle: the residual is sum(dW^2) - 1
    p = bm_path(1000, 5)
    bd = verify_ito_pathwise(SQUARE, p)
    dw = np.diff(p.values[:, 0])
    assert bd.residual == pytest.approx(np.sum(dw ** 2) - 1.0, abs=1e-12)


def test_pure_jump_path_telescopes():
    bd = verify_ito_pathwise(SQUARE, unit_jump_path())
    assert bd.terms["jump sum"] == 1.0 and bd.residual == 0.0


def test_ito_window_and_errors():
    p = bm_path(10, 0)
    bd = verify_ito_pathwise(SQUARE, p, 0.2, 0.6, keep_series=True)
    assert bd.times[0] == pytest.approx(0.2) and bd.times[-1] == pytest.approx(0.6)
    with pytest.raises(Exception):
        verify_ito_pathwise(SQUARE, p, 0.25, 0.6)
    with pytest.raises(VerificationError):
        verify_ito_pathwise(SQUARE, p, covariation="bogus")


# --- Ito-Wentzell for x-fields -------------------------------------------------

def test_static_x_field_reduces_to_classical_ito():
    for seed in range(5):
        p = bm_path(300, seed, jump_diffusion(rate=3.0))
        F = SpaceMeasureField(F0=(Layer(space=SQUARE),)).bind(grid=p.grid)
        a = verify_ito_wentzell_pathwise(F, p)
        b = verify_ito_pathwise(SQUARE, p)
        assert a.residual == pytest.approx(b.residual, abs=1e-12)


def test_product_rule_oracle():
    scn = Scenario("xw", brownian_motion(), make_field("x-times-driver"), driver="state")
    r = run_ito_wentzell(scn, Sizes(1000, 1, 50), seed=1)
    assert r.rms_residual <= 0.05
    bd = r.breakdowns[0]
    assert bd.terms["∫∂_xH:d[X,Y]^c"] == pytest.approx(1.0, abs=1e-12)
    assert bd.terms["∫H dY"] == pytest.approx(bd.terms["∫∂_xF dX"], abs=1e-12)


def test_x_field_jump_term_at_event():
    p = unit_jump_path()
    F = SpaceMeasureField(F0=(Layer(space=SQUARE),)).bind(grid=p.grid)
    bd = verify_ito_wentzell_pathwise(F, p)
    assert bd.terms["jump sum"] == 1.0 and bd.residual == 0.0


def test_x_field_rejects_measure_dependence():
    p = bm_path(10, 0)
    F = SpaceMeasureField(F0=(Layer(MEAN, space=SQUARE),)).bind(grid=p.grid)
    with pytest.raises(VerificationError):
        verify_ito_wentzell_pathwise(F, p)


# --- full-law measure flows -----------------------------------------------------

def test_second_moment_of_brownian_motion():
    scn = Scenario("m2", brownian_motion(), make_field("second-moment"))
    r = verify_full_measure(scn, "mc-law", Sizes(20, 500, 200), seed=3)
    assert abs(r.mean_residual) <= 3 * r.standard_error
    ts = r.term_stats()
    assert ts["½E~[∂_x∂_μF:d[X̃,X̃]^c]"][0] == pytest.approx(1.0, abs=1e-12)
    for name in JUMP_NAMES + ("∫G dr", "∫H dY"):
        assert ts[name] == (0.0, 0.0)


def test_deterministic_quadratic_mean():
    b, n = 0.5, 1000
    scn = Scenario("bt", drifted_brownian(b, 0.0), make_field("mean-squared"))
    r = verify_full_measure(scn, "mc-law", Sizes(n, 20, 3), seed=0)
    # left-point quadrature of int 2 b^2 r dr leaves b^2 t dt
    assert r.mean_residual == pytest.approx(b * b / n, rel=1e-9) and r.standard_error == 0.0
    assert r.breakdowns[0].lhs == pytest.approx(b * b, abs=1e-12)


def test_compound_poisson_mean_jump_groups_cancel():
    lam = 3.0
    scn = Scenario("cp", compound_poisson(rate=lam), make_field("mean"))
    r = verify_full_measure(scn, "mc-law", Sizes(10, 100, 100), seed=2)
    for bd in r.breakdowns:
        assert bd.terms["jump sum: δF/δμ · 1{μ=μ−}"] + bd.terms["−Σ∂_μF ΔX̃"] == pytest.approx(0.0, abs=1e-12)
        assert bd.terms["jump sum: F"] == 0.0
    assert abs(r.mean_residual) <= 3 * r.standard_error
    m, se = r.term_stats()["E~[∫∂_μF dX̃]"]
    assert abs(m - lam) <= 3 * se


def random_scenario(rng, with_jumps=True):
    coeffs = jump_diffusion(drift=rng.normal(), rate=rng.uniform(0.5, 3.0)) if with_jumps else brownian_motion()
    layer = lambda mod=None: Layer(random_cylindrical(rng, 1), **({"modulation": mod} if mod else {}))
    F = RandomField(F0=(layer(),), G=(layer(),), H=(layer(driver_modulation(0, rng.normal())),))
    return Scenario("random", coeffs, F, x0=rng.normal(), driver="own")


@settings(max_examples=10, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_empirical_projection_matches_moment_oracle(seed):
    rng = np.random.default_rng(seed)
    r = verify_full_measure(random_scenario(rng), "pathwise-empirical", Sizes(50, 20, 1), seed=seed)
    assert abs(r.breakdowns[0].extras["oracle gap"]) <= 1e-10


def test_measure_free_field_collapses_to_x_field_terms():
    scn = Scenario("free", brownian_motion(), RandomField(G=(Layer(),), H=(Layer(),)), driver="own")
    w = build_world(scn, Sizes(100, 5, 1), 4, "empirical")
    full = rhs_terms_full(w.F, w.A)
    x_field = SpaceMeasureField(G=(Layer(),), H=(Layer(),)).bind(driver=w.Y, grid=w.grid)
    pw = verify_ito_wentzell_pathwise(x_field, w.A.particle(0), w.Y)
    for name in ("∫G dr", "∫H dY"):
        assert full.terms[name] == pytest.approx(pw.terms[name], abs=1e-12)
    assert full.residual == pytest.approx(pw.residual, abs=1e-12)


def test_continuous_particles_have_zero_jump_terms():
    scn = Scenario("c", brownian_motion(), make_field("mean-squared"))
    for mode in ("mc-law", "pathwise-empirical"):
        r = verify_full_measure(scn, mode, Sizes(20, 10, 3), seed=1)
        for bd in r.breakdowns:
            assert all(bd.terms[n] == 0.0 for n in JUMP_NAMES)


def test_normalization_insensitivity():
    # (<mu,g> + c)^2 - 2c(<mu,g> + c) + c^2 = <mu,g>^2: same field, linear derivative shifted by a constant
    c = 3.7
    g = sine(1.3, 0.2)
    shifted = replace(g, g=lambda x: g.g(x) + c)
    F1 = RandomField(F0=(Layer(cylindrical(square_outer(), g)),))
    F2 = RandomField(F0=(Layer(cylindrical(make_outer("quadratic", A=[[2.0]], a=[-2 * c], c=c * c), shifted)),))
    coeffs = jump_diffusion(rate=4.0)
    for mode in ("pathwise-empirical", "mc-law"):
        a = verify_full_measure(Scenario("a", coeffs, F1), mode, Sizes(50, 20, 2), seed=7)
        b = verify_full_measure(Scenario("b", coeffs, F2), mode, Sizes(50, 20, 2), seed=7)
        for x, y in zip(a.breakdowns, b.breakdowns):
            for name in JUMP_NAMES:
                assert x.terms[name] == pytest.approx(y.terms[name], abs=1e-10)


def test_full_measure_errors():
    scn = Scenario("m", brownian_motion(), make_field("mean"))
    with pytest.raises(VerificationError):
        verify_full_measure(scn, "mc-law", Sizes(10, 10, 1))
    with pytest.raises(VerificationError):
        verify_full_measure(scn, "bogus", Sizes(10, 10, 2))
    xf = Scenario("x", brownian_motion(), make_field("x-times-mean"))
    with pytest.raises(VerificationError):
        verify_full_measure(xf, "mc-law", Sizes(10, 10, 2))


def test_corrections_shrink_with_N():
    scn = Scenario("sq", brownian_motion(), make_field("mean-squared"))

    def run(N, seed):
        return verify_full_measure(scn, "pathwise-empirical", Sizes(50, int(N), 10), seed=seed, corrections=False)

    res = convergence_study(run, (10, 100, 1000), "N", "rms", seed=0)
    assert -1.4 <= res.slope <= -0.6


def test_standard_error_shrinks_with_M():
    scn = Scenario("m2", brownian_motion(), make_field("second-moment"))

    def run(M, seed):
        return verify_full_measure(scn, "mc-law", Sizes(10, 20, int(M)), seed=seed)

    res = convergence_study(run, (50, 200, 800, 3200), "M", "standard_error", seed=1)
    assert -0.65 <= res.slope <= -0.35


# --- conditional flows -----------------------------------------------------------

def test_fully_common_noise_is_ito_on_common_path():
    scn = Scenario("B2", common_noise(sigma_common=1.0, sigma_idio=0.0), make_field("second-moment"))
    r = verify_conditional(scn, Sizes(1000, 5, 20), seed=0)
    assert r.rms_residual <= 5 * np.sqrt(1e-3)
    for bd in r.breakdowns:
        assert bd.terms["½∂_μμF:d[X′,X″]^c"] == 0.0
        assert bd.terms["½E~[∂_x∂_μF:d[X̃,X̃]^c]"] == pytest.approx(1.0, abs=1e-12)


def test_linear_field_has_no_second_order_terms():
    scn = Scenario("lin", common_noise(common_rate=2.0, idio_rate=1.0), make_field("second-moment"))
    r = verify_conditional(scn, Sizes(50, 10, 5), seed=2)
    for bd in r.breakdowns:
        assert bd.terms["½∂_μμF:d[X′,X″]^c"] == 0.0 and bd.terms["δ²F/δμ² double jump"] == 0.0


def test_conditional_errors():
    with pytest.raises(VerificationError, match="common"):
        verify_conditional(Scenario("m", brownian_motion(), make_field("mean")), Sizes(10, 10, 2))
    with pytest.raises(VerificationError):
        verify_conditional(Scenario("m", common_noise(), make_field("mean")), Sizes(10, 10, 2, N_tilde=2))


# --- time-space-measure fields -------------------------------------------------------

def test_measure_free_product_field_reduces_to_x_field():
    scn = Scenario("x2", jump_diffusion(rate=2.0), SpaceMeasureField(F0=(Layer(space=SQUARE),)))
    w = build_world(scn, Sizes(100, 5, 1), 3, "full", state=True)
    a = time_space_terms(w.F, w.X, w.A, w.B)
    b = verify_ito_wentzell_pathwise(w.F, w.X)
    assert a.residual == pytest.approx(b.residual, abs=1e-12)
    for name in ("∫∂_xF dX", "½∫∂_xxF:d[X,X]^c"):
        assert a.terms[name] == pytest.approx(b.terms[name], abs=1e-12)
    assert a.terms["x-jump sum"] == pytest.approx(b.terms["jump sum"], abs=1e-12)


def test_x_free_product_field_reduces_to_measure_terms():
    F = SpaceMeasureField(F0=(Layer(cylindrical(square_outer(), sine())),))
    scn = Scenario("m", jump_diffusion(rate=2.0), F)
    w = build_world(scn, Sizes(100, 20, 1), 5, "full", state=True)
    a = time_space_terms(w.F, w.X, w.A, w.B)
    b = rhs_terms_full(w.F, w.A, w.B, policy="law")
    for name, v in b.terms.items():
        assert a.terms[name] == pytest.approx(v, abs=1e-12)


def test_continuous_forms_coincide_termwise():
    scn = Scenario("xm", brownian_motion(), make_field("x-times-mean"))
    a = verify_time_space_measure(scn, "coro1", Sizes(50, 20, 5), seed=1)
    b = verify_time_space_measure(scn, "coro1-alt", Sizes(50, 20, 5), seed=1)
    for x, y in zip(a.breakdowns, b.breakdowns):
        for name in x.terms:
            assert x.terms[name] == pytest.approx(y.terms[name], abs=1e-12)


def test_x_times_mean_totals():
    scn = Scenario("xm", jump_diffusion(rate=2.0), make_field("x-times-mean"))
    for form in ("coro1", "coro1-alt"):
        r = verify_time_space_measure(scn, form, Sizes(50, 50, 200), seed=2)
        assert abs(r.mean_residual) <= 3 * r.standard_error


def test_time_space_errors():
    with pytest.raises(VerificationError):
        verify_time_space_measure(Scenario("m", brownian_motion(), make_field("mean")))
    xm = Scenario("xm", brownian_motion(), make_field("x-times-mean"))
    with pytest.raises(VerificationError):
        verify_time_space_measure(xm, "coro2")
    with pytest.raises(VerificationError):
        verify_time_space_measure(xm, "bogus")


# --- compensated formulas ----------------------------------------------------------

def test_poisson_mean_compensator():
    scn = Scenario("pm", compound_poisson(rate=2.0), make_field("poisson-mean"))
    r = verify_poisson(scn, sizes=Sizes(20, 50, 200), seed=0)
    assert abs(r.mean_residual) <= 3 * r.standard_error
    assert r.breakdowns[0].terms["E~[∫∫(δF/δμ(X+β)−δF/δμ(X)) ν(de)dr]"] == pytest.approx(2.0, abs=1e-12)


def test_poisson_without_jumps_has_zero_jump_terms():
    F = PoissonField(F0=(Layer(SECOND),))
    r = verify_poisson(Scenario("bm", brownian_motion(), F), sizes=Sizes(20, 20, 3), seed=0)
    for bd in r.breakdowns:
        assert bd.terms["E~[∫∫(δF/δμ(X+β)−δF/δμ(X)) ν(de)dr]"] == 0.0
        assert bd.terms["∫∫J ν(de)dr"] == 0.0


def test_indicator_forcing_changes_nothing_in_law_mode():
    scn = Scenario("pm", jump_diffusion(rate=2.0), make_field("poisson-mean", rate=1.5))
    a = verify_poisson(scn, sizes=Sizes(20, 20, 5), seed=4, policy="law")
    b = verify_poisson(scn, sizes=Sizes(20, 20, 5), seed=4, policy="one")
    for x, y in zip(a.breakdowns, b.breakdowns):
        assert x.terms == y.terms


def test_all_common_compensated_matches_conditional():
    scn = Scenario("allc", common_noise(sigma_common=1.0, sigma_idio=0.0), PoissonField(F0=(Layer(SECOND),)))
    a = verify_poisson(scn, "conditional", Sizes(200, 5, 5), seed=1)
    b = verify_conditional(scn, Sizes(200, 5, 5), seed=1)
    assert np.allclose(a.residuals, b.residuals, atol=1e-12)


def test_poisson_errors():
    with pytest.raises(VerificationError):
        verify_poisson(Scenario("m", brownian_motion(), make_field("mean")))
    pm = Scenario("pm", compound_poisson(), make_field("poisson-mean", rate=1.0))
    with pytest.raises(VerificationError):
        verify_poisson(pm, "bogus")
    with pytest.raises(VerificationError):
        verify_poisson(pm, "conditional")
    with pytest.raises(Exception):
        JumpIntensity(np.inf)


def test_build_world_rejects_common_driver_without_split():
    scn = Scenario("d", brownian_motion(), make_field("driven-mean"), driver="common")
    with pytest.raises(VerificationError):
        build_world(scn, Sizes(10, 5, 1), 0, "full")
    with pytest.raises(VerificationError):
        build_world(scn, Sizes(10, 5, 1), 0, "bogus")


def test_reports_are_seed_deterministic():
    scn = Scenario("m", jump_diffusion(), make_field("mean-squared"))
    a = verify_full_measure(scn, "mc-law", Sizes(20, 10, 4), seed=9, workers=1)
    b = verify_full_measure(scn, "mc-law", Sizes(20, 10, 4), seed=9, workers=2)
    assert a.to_dict() == b.to_dict()
    flow = simulate_full_flow(brownian_motion(), 0.0, 3, build_time_grid(0, 1, 4), 0)
    assert flow.n_particles == 3
