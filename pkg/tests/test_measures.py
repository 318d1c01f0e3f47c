import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

from measureflow.measures import (EmpiricalMeasure, MeasureError, conditional_copies, empirical_measure,
                                  simulate_conditional_flow, simulate_full_flow, wasserstein2_1d)
from measureflow.paths import (Coefficients, brownian_motion, build_time_grid, common_noise, compound_poisson,
                               covariation_continuous, drifted_brownian)

GRID = build_time_grid(0.0, 1.0, 100)


# --- empirical measures ---------------------------------------------------------

def test_empirical_measure_examples():
    assert empirical_measure([0.0]).same_as(EmpiricalMeasure([[0.0]]))
    mu = empirical_measure([0.0, 2.0])
    assert np.allclose(mu.weights, 0.5) and mu.mean()[0] == 1.0
    triple = empirical_measure([1.0, 1.0, 1.0])
    assert triple.n_atoms == 3
    agg = triple.aggregated()
    assert agg.n_atoms == 1 and agg.weights[0] == 1.0 and triple.same_as(agg)


def test_empirical_measure_errors():
    with pytest.raises(MeasureError):
        empirical_measure([])
    with pytest.raises(MeasureError):
        empirical_measure([0.0, np.nan])
    with pytest.raises(MeasureError):
        EmpiricalMeasure([0.0, 1.0], [0.7, 0.7])


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-1e3, 1e3), min_size=1, max_size=30), st.integers(0, 2**32 - 1))
def test_exchangeability(points, seed):
    perm = np.random.default_rng(seed).permutation(len(points))
    assert empirical_measure(points).same_as(empirical_measure(np.asarray(points)[perm]))


# --- full flows -----------------------------------------------------------------

def test_full_flow_single_constant_particle():
    flow = simulate_full_flow(Coefficients(dim=1), 2.5, 1, GRID, seed=0)
    assert np.all(flow.values == 2.5)
    assert flow.measure_at(0.5).same_as(empirical_measure([2.5]))


def test_full_flow_deterministic_drift():
    flow = simulate_full_flow(drifted_brownian(1.0, 0.0), 0.0, 7, GRID, seed=1)
    for t in (0.25, 0.5, 1.0):
        assert flow.measure_at(t).mean()[0] == pytest.approx(t, abs=1e-14)


def test_full_flow_gaussian_second_moment():
    flow = simulate_full_flow(brownian_motion(), 0.0, 10_000, build_time_grid(0, 1, 20), seed=2)
    m2 = flow.measure_at(1.0).integrate(lambda x: x[:, 0] ** 2)
    assert 0.94 <= m2 <= 1.06


def test_full_flow_properties():
    flow = simulate_full_flow(compound_poisson(rate=3.0), 0.0, 40, GRID, seed=3)
    assert flow.measure_at(0.7).n_atoms == 40
    # every particle's events are grid points of the shared grid
    for p in flow.particles[:5]:
        for t, _ in p.jumps:
            flow.grid.index(t)
    # left-limit measure differs from the measure exactly at particle jump times
    for k, t in enumerate(flow.grid.points[1:], start=1):
        moved = not flow.measure_at(t, left=True).same_as(flow.measure_at(t))
        assert moved == bool(flow.jump_mask[k].any())


def test_full_flow_is_seed_deterministic():
    a = simulate_full_flow(compound_poisson(rate=2.0), 0.0, 10, GRID, seed=5)
    b = simulate_full_flow(compound_poisson(rate=2.0), 0.0, 10, GRID, seed=5)
    assert np.array_equal(a.values, b.values) and a.grid == b.grid


def test_full_flow_rejects_bad_N():
    with pytest.raises(MeasureError):
        simulate_full_flow(brownian_motion(), 0.0, 0, GRID, seed=0)


def test_flow_csv_export(tmp_path):
    flow = simulate_full_flow(brownian_motion(), 0.0, 3, build_time_grid(0, 1, 4), seed=0)
    out = tmp_path / "flow.csv"
    flow.to_csv(out)
    rows = out.read_text().splitlines()
    assert rows[0] == "time,particle,x0" and len(rows) == 1 + 5 * 3


# --- conditional flows --------------------------------------------------------

def test_all_common_noise_makes_particles_identical():
    sys_ = simulate_conditional_flow(common_noise(sigma_common=1.0, sigma_idio=0.0), 0.0, 6, GRID, seed=1)
    v = sys_.flow.values
    assert np.all(v == v[:, :1])
    x1, x2 = conditional_copies(sys_)
    assert np.array_equal(x1.values, x2.values)
    # the conditional mean is the common Brownian path
    B = sys_.common.brownian_path()[:, 0]
    assert np.allclose(v[:, :, 0].mean(axis=1), B, atol=1e-14)


def test_all_idiosyncratic_matches_full_flow_law():
    cond = simulate_conditional_flow(common_noise(sigma_common=0.0, sigma_idio=1.0), 0.0, 2000, GRID, seed=2)
    full = simulate_full_flow(brownian_motion(), 0.0, 2000, GRID, seed=3)
    p = stats.ks_2samp(cond.measure_at(1.0).atoms[:, 0], full.measure_at(1.0).atoms[:, 0]).pvalue
    assert p > 0.01


def test_conditional_copy_covariations():
    grid = build_time_grid(0, 1, 1000)
    idio = simulate_conditional_flow(common_noise(sigma_common=0.0, sigma_idio=1.0), 0.0, 3, grid, seed=4)
    x1, x2 = conditional_copies(idio)
    realized = covariation_continuous(x1, x2, "realized").at(1.0)[0, 0]
    assert abs(realized) <= 3 * np.sqrt(grid.dt.max())
    mixed = simulate_conditional_flow(common_noise(), 0.0, 3, grid, seed=5)
    y1, y2 = conditional_copies(mixed)
    curve = covariation_continuous(y1, y2)
    assert np.allclose(curve.values[:, 0, 0], grid.points, atol=1e-12)


def test_conditional_copy_law_equality():
    xs, xp = [], []
    for m in range(400):
        s = simulate_conditional_flow(common_noise(), 0.0, 3, build_time_grid(0, 1, 10), seed=m)
        xs.append(s.flow.values[-1, 0, 0])
        xp.append(conditional_copies(s)[0].values[-1, 0])
    assert stats.ks_2samp(xs, xp).pvalue > 0.01


def test_conditional_flow_errors():
    with pytest.raises(MeasureError, match="common"):
        simulate_conditional_flow(brownian_motion(), 0.0, 5, GRID, seed=0)
    with pytest.raises(MeasureError):
        simulate_conditional_flow(common_noise(), 0.0, 2, GRID, seed=0)
    with pytest.raises(MeasureError):
        simulate_conditional_flow(common_noise(), 0.0, 5, GRID, seed=0, copies=(1, 1))


def test_conditional_common_path_independent_of_N():
    a = simulate_conditional_flow(common_noise(common_rate=2.0), 0.0, 3, GRID, seed=9)
    b = simulate_conditional_flow(common_noise(common_rate=2.0), 0.0, 30, GRID, seed=9)
    assert np.array_equal(a.common.event_times, b.common.event_times)


# --- Wasserstein ------------------------------------------------------------------

def test_wasserstein_examples():
    mu = empirical_measure([0.3, -1.0, 2.0])
    assert wasserstein2_1d(mu, mu) == 0.0
    assert wasserstein2_1d(empirical_measure([0.0]), empirical_measure([3.0])) == 3.0
    assert wasserstein2_1d(empirical_measure([0.0, 2.0]), empirical_measure([1.0, 3.0])) == pytest.approx(1.0)
    with pytest.raises(MeasureError):
        wasserstein2_1d(empirical_measure([[0.0, 1.0]]), empirical_measure([[0.0, 1.0]]))


def test_wasserstein_weighted_matches_brute_force():
    # two atoms vs one atom: the only coupling is the product
    mu = EmpiricalMeasure([0.0, 4.0], [0.25, 0.75])
    assert wasserstein2_1d(mu, empirical_measure([1.0])) == pytest.approx(np.sqrt(0.25 * 1 + 0.75 * 9))


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_wasserstein_metric_axioms(seed):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(1, 15))
    a, b, c = (empirical_measure(rng.normal(size=n) * rng.uniform(0.1, 5)) for _ in range(3))
    assert wasserstein2_1d(a, b) == pytest.approx(wasserstein2_1d(b, a), abs=1e-12)
    assert wasserstein2_1d(a, c) <= wasserstein2_1d(a, b) + wasserstein2_1d(b, c) + 1e-12
