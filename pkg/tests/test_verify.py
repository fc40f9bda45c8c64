import json

import numpy as np
import pytest
from hypothesis import given, strategies as st

from horizon_bsde.bsde import GeneratorSpec, SolutionBundle
from horizon_bsde.experiments import tree_reduction_driver, tree_states
from horizon_bsde.laglad import LagladPath, TimeGrid, indicator_from
from horizon_bsde.random_time import (ModelError, build_cox_model, build_example132, build_finite_model,
                                      bundled_names, load_bundled, simulate_brownian_poisson)
from horizon_bsde.reduction import RewardSpec, lift_solution, reduce_and_solve
from horizon_bsde.verify import (ResidualReport, appendix_identity_checks, deflated_value_residual,
                                 inverse_survival_residual, martingale_test, optional_product_residual,
                                 refinement_slope, residual_f_bsde, residual_g_bsde, residual_g_rbsde,
                                 solve_g_tree_exact, survival_identities)

GEN = GeneratorSpec(f_r=lambda k, ym, y, z: -0.2 * y + 0.1 + 0.3 * np.sin(y),
                    f_g=lambda k, y, yp: 0.1 * y + 0.2 * np.sin(y), lipschitz={"y": 0.5, "g_y": 0.3})


def tree_problem(name="non-immersion-binomial"):
    finite = load_bundled(name)
    s = tree_states(finite)
    grid = finite.grid
    reward = RewardSpec(LagladPath.cadlag(grid, 1.0 + 0.3 * s["W"]), LagladPath.cadlag(grid, 0.5 + 0.1 * s["W"] ** 2),
                        finite.steps)
    barrier = LagladPath.cadlag(grid, 1.2 - 0.2 * s["W"] ** 2)
    return finite, reward, barrier, tree_reduction_driver(finite)


def cox_model(steps, lam=0.7, n=3):
    grid = TimeGrid.uniform(1.0, steps)
    hazard = LagladPath.continuous(grid, np.broadcast_to(lam * grid.nodes, (n, grid.size)))
    return build_cox_model(hazard, LagladPath.cadlag(grid, np.zeros((1, n, grid.size))))


# residual checkers ---------------------------------------------------------------

def test_oracle_solution_has_zero_residuals_and_a_corruption_is_located():
    finite, reward, _, drv = tree_problem()
    space, jm, G = solve_g_tree_exact(finite, GEN, drv, reward)
    args = (GEN, drv.take(space.omega), jm, space.theta, reward.take(space.omega))
    assert residual_g_bsde(G, *args, tolerance=1e-12).passed
    bumped = G.Y.at.copy()
    bumped[:, 2] += 0.1
    bad = SolutionBundle(LagladPath(G.Y.grid, G.Y.pre, bumped, G.Y.post), G.Z, G.U)
    rep = residual_g_bsde(bad, *args, tolerance=1e-12)
    assert not rep.passed and rep.value >= 0.09 and rep.worst_node == 2


def test_f_residual_of_the_reduced_solve():
    finite, reward, _, drv = tree_problem()
    model = build_finite_model(finite)
    F = reduce_and_solve(GEN, model, reward, drv)
    assert residual_f_bsde(F, GEN, drv, model, reward, tolerance=1e-12).passed


def test_reflected_residual_with_inactive_barrier_equals_plain_one():
    finite, reward, _, drv = tree_problem()
    inactive = LagladPath.constant(finite.grid, -1e12, (finite.n_scenarios,))
    space, jm, G = solve_g_tree_exact(finite, GEN, drv, reward)
    _, _, Gr = solve_g_tree_exact(finite, GEN, drv, reward, barrier=inactive)
    assert np.array_equal(Gr.Y.at, G.Y.at) and np.all(Gr.L.l_r_increments == 0)
    args = (GEN, drv.take(space.omega), jm, space.theta, reward.take(space.omega))
    plain = residual_g_bsde(G, *args)
    refl = residual_g_rbsde(Gr, *args)
    assert refl.passed and refl.value == plain.value


def test_reflected_lift_matches_reflected_oracle():
    finite, reward, barrier, drv = tree_problem()
    model = build_finite_model(finite)
    rreward = RewardSpec(barrier, reward.R, reward.tau)
    Fr = reduce_and_solve(GEN, model, rreward, drv, barrier=barrier)
    space, jm, Gr = solve_g_tree_exact(finite, GEN, drv, rreward, barrier=barrier)
    lift = lift_solution(Fr.take(space.omega), jm, space.theta, rreward.take(space.omega))
    args = (GEN, drv.take(space.omega), jm, space.theta, rreward.take(space.omega))
    rep = residual_g_rbsde(lift, *args)
    assert rep.passed and rep.details["skorokhod"]["passed"]
    assert np.abs(lift.Y.at - Gr.Y.at).max() <= 1e-10
    assert np.abs(lift.L.l_r_increments - Gr.L.l_r_increments).max() <= 1e-10
    # pushing Y under the barrier breaks dominance
    low = lift.Y.at.copy()
    low[:, 1] = lift.L.barrier.at[:, 1] - 1.0
    bad = SolutionBundle(LagladPath(lift.Y.grid, lift.Y.pre, low, lift.Y.post), lift.Z, lift.U, lift.L)
    rep = residual_g_rbsde(bad, *args)
    assert not rep.passed and not rep.details["skorokhod"]["passed"]


def test_g_residual_needs_a_random_time():
    finite, reward, _, drv = tree_problem()
    model = build_finite_model(finite)
    F = reduce_and_solve(GEN, model, reward, drv)
    with pytest.raises(ModelError):
        residual_g_bsde(F, GEN, drv, model, None, reward)


# survival and appendix identities ------------------------------------------------

@pytest.mark.parametrize("name", bundled_names())
def test_survival_identities_are_exact_on_trees(name):
    rep = survival_identities(build_finite_model(load_bundled(name)), 1e-12)
    assert rep.passed, rep.details


def test_survival_identities_on_cox_and_brownian_poisson_grids():
    assert survival_identities(cox_model(50)).passed
    grid = TimeGrid.uniform(1.0, 100)
    paths = simulate_brownian_poisson(grid, 2000, 1.0, 3)
    jumped = paths.N > 0
    T1 = np.where(jumped.any(axis=1), jumped.argmax(axis=1), grid.beyond)
    model = build_example132(0.5, 0.3, 0.4, 0.4, paths.W, T1, grid)
    rep = survival_identities(model)
    assert rep.passed and rep.value <= 5 * grid.increments.max()


@pytest.mark.parametrize("name", ["immersion-binomial", "non-immersion-binomial", "trinomial-poisson"])
def test_appendix_identities_are_exact_on_trees(name, rng):
    model = build_finite_model(load_bundled(name))
    grid, n = model.grid, model.n_paths
    K = LagladPath.cadlag(grid, rng.standard_normal((n, grid.size)))
    R = LagladPath.cadlag(grid, rng.standard_normal((n, grid.size)))
    C = LagladPath.from_parts(grid, left_jumps=rng.random((n, grid.size)), right_jumps=rng.random((n, grid.size)))
    rep = appendix_identity_checks(model, K, R, C, pairs=[(K, C)], tolerance=1e-12)
    assert rep.passed, rep.details
    assert rep.details["product_rule"] <= 1e-12


def test_inverse_survival_identity_converges_at_first_order():
    steps = np.array([25, 50, 100, 200])
    errors = [np.abs(inverse_survival_residual(cox_model(s))).max() for s in steps]
    assert 0.9 <= refinement_slope(steps, errors) <= 1.1


def test_deflated_value_of_a_constant_is_exact_on_a_tree():
    model = build_finite_model(load_bundled("non-immersion-binomial"))
    grid, n = model.grid, model.n_paths
    c = LagladPath.constant(grid, 2.0, (n,))
    zero = LagladPath.constant(grid, 0.0, (n,))
    assert np.abs(deflated_value_residual(model, c, zero, zero)).max() <= 1e-12


def test_identities_need_positive_survival():
    model = build_finite_model(load_bundled("class-k-fail"))
    with pytest.raises(ModelError):
        inverse_survival_residual(model)


@given(st.integers(1, 6), st.integers(0, 2 ** 32 - 1))
def test_optional_product_rule_on_finite_variation_pairs(steps, seed):
    rng = np.random.default_rng(seed)
    grid = TimeGrid.uniform(1.0, steps)
    shape = (2, grid.size)
    X = LagladPath.from_parts(grid, left_jumps=rng.standard_normal(shape), right_jumps=rng.standard_normal(shape))
    Y = LagladPath.from_parts(grid, left_jumps=rng.standard_normal(shape), right_jumps=rng.standard_normal(shape))
    assert np.abs(optional_product_residual(X, Y)).max() <= 1e-12


# martingale tests -----------------------------------------------------------------

def test_mc_martingale_test_accepts_brownian_motion_and_rejects_a_drift():
    grid = TimeGrid.uniform(1.0, 50)
    paths = simulate_brownian_poisson(grid, 20000, 0.0, 11)
    W = LagladPath.cadlag(grid, paths.W)
    cps = [10, 20, 30, 40, 50]
    assert martingale_test(W, "mc", cps, state=paths.W).passed
    drift = LagladPath.cadlag(grid, paths.W + 0.1 * grid.nodes)
    rep = martingale_test(drift, "mc", cps, state=paths.W)
    assert not rep.passed and rep.value > 3.0


def test_mc_martingale_test_rejects_an_uncompensated_default_indicator():
    model = cox_model(50, lam=1.0, n=20000)
    theta = model.theta_sampler(np.random.default_rng(5))
    A = indicator_from(model.grid, theta)
    assert not martingale_test(A, "mc", [10, 20, 30, 40, 50]).passed


def test_exact_martingale_test_on_a_tree():
    finite = load_bundled("trinomial-poisson")
    W = LagladPath.cadlag(finite.grid, np.cumsum(finite.increments[0], axis=1))
    opts = dict(labels=finite.labels, weights=finite.probabilities)
    assert martingale_test(W, "exact", **opts).passed
    sq = LagladPath.cadlag(finite.grid, np.cumsum(finite.increments[0], axis=1) ** 2)
    assert not martingale_test(sq, "exact", **opts).passed


def test_martingale_test_argument_checks():
    grid = TimeGrid.uniform(1.0, 3)
    X = LagladPath.constant(grid, 0.0, (10,))
    with pytest.raises(ValueError):
        martingale_test(X, "mc")
    with pytest.raises(ValueError):
        martingale_test(X, "exact")
    with pytest.raises(ValueError):
        martingale_test(X, "other")


# reports ---------------------------------------------------------------------------

def test_refinement_slope_of_synthetic_errors():
    steps = np.array([50, 100, 200, 400])
    assert refinement_slope(steps, 3.0 / steps) == pytest.approx(1.0, abs=1e-12)
    assert refinement_slope(steps, 2.0 / np.sqrt(steps)) == pytest.approx(0.5, abs=1e-12)
    with pytest.raises(ValueError):
        refinement_slope(steps[:2], [0.1, 0.05])


def test_report_json_is_sorted_and_plain():
    rep = ResidualReport("x", 1e-3, 1e-2, True, mean=np.array([0.0, 1.0]), worst_node=np.int64(3),
                         details={"a": np.float64(2.0), "arr": np.arange(2)})
    text = rep.to_json()
    data = json.loads(text)
    assert data["schema"] == "residual-report/1" and data["mean"] == [0.0, 1.0]
    assert data["details"] == {"a": 2.0, "arr": [0, 1]}
    assert list(data) == sorted(data)
    assert "PASS" in str(rep)
    rep.passed = False
    assert "FAIL" in str(rep) and "node 3" in str(rep)
