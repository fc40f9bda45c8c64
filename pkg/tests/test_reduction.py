import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from horizon_bsde.bsde import DriverSpec, GeneratorSpec, SolutionBundle
from horizon_bsde.conditional import MeanCE
from horizon_bsde.experiments import tree_reduction_driver, tree_states
from horizon_bsde.laglad import LagladPath, TimeGrid
from horizon_bsde.random_time import (FiniteFiltration, ModelError, build_cox_model, build_example132,
                                      build_finite_model, enlarge_model, load_bundled)
from horizon_bsde.reduction import (RewardSpec, build_direct_system, build_transformed_system, compute_U,
                                    compute_U_transformed, correction_weight, effective_generator,
                                    invert_transformed, lift_solution, reduce_and_solve, reduce_reward,
                                    reduce_solution, reward_at_horizon)
from horizon_bsde.verify import residual_g_bsde, solve_g_tree_exact

LAM, B, SIGMA, P = 0.5, 0.3, 0.4, 0.4


def cox_setup(steps=10, n=50, lam=LAM, seed=0):
    grid = TimeGrid.uniform(1.0, steps)
    rng = np.random.default_rng(seed)
    W = np.concatenate([np.zeros((n, 1)), np.cumsum(rng.standard_normal((n, steps)) * np.sqrt(grid.increments[1:]),
                                                    axis=1)], axis=1)
    hazard = LagladPath.continuous(grid, np.broadcast_to(lam * grid.nodes, (n, grid.size)))
    model = build_cox_model(hazard, LagladPath.cadlag(grid, W[None]), state={"W": W})
    return grid, W, model


def example_setup(steps=20, n=200, seed=1):
    grid = TimeGrid.uniform(1.0, steps)
    rng = np.random.default_rng(seed)
    W = np.concatenate([np.zeros((n, 1)), np.cumsum(rng.standard_normal((n, steps)) * np.sqrt(1.0 / steps),
                                                    axis=1)], axis=1)
    T1 = np.where(np.arange(n) % 2 == 0, 5, grid.beyond)
    model = build_example132(LAM, B, SIGMA, P, W, T1, grid)
    at_jump = (np.arange(grid.size)[None, :] == T1[:, None]).astype(float)
    driver = DriverSpec(grid, model.dM, np.broadcast_to(LAM / (1 - P) * grid.increments, (1, n, grid.size)),
                        at_jump > 0, at_jump[None], at_jump)
    return grid, model, driver, T1


def tree_reward(finite):
    s = tree_states(finite)
    grid = finite.grid
    return RewardSpec(LagladPath.cadlag(grid, 1.0 + 0.3 * s["W"]), LagladPath.cadlag(grid, 0.5 + 0.1 * s["W"] ** 2),
                      finite.steps)


TREE_GEN = GeneratorSpec(f_r=lambda k, ym, y, z: -0.2 * y + 0.1 + 0.3 * np.sin(y),
                         f_g=lambda k, y, yp: 0.1 * y + 0.2 * np.sin(y), lipschitz={"y": 0.5, "g_y": 0.3})


def _gap(a, b):
    return max(float(np.abs(a.Y.at - b.Y.at).max()), float(np.abs(a.Y.post - b.Y.post).max()))


# rewards ---------------------------------------------------------------------

def test_reduced_reward_with_equal_payoffs_is_the_stopped_recovery(rng):
    grid = TimeGrid.uniform(1.0, 6)
    R = LagladPath.cadlag(grid, rng.standard_normal((3, grid.size)))
    red = reduce_reward(RewardSpec(R, R, 3))
    stopped = R.stopped(np.full(3, 3))
    assert np.array_equal(red.at, stopped.at) and np.array_equal(red.post, stopped.post)


def test_reward_at_horizon_matches_enumeration(rng):
    grid = TimeGrid.uniform(1.0, 5)
    X = LagladPath.cadlag(grid, rng.standard_normal((4, grid.size)))
    R = LagladPath.cadlag(grid, rng.standard_normal((4, grid.size)))
    theta = np.array([1, 3, 4, grid.beyond])
    for tau in range(grid.size):
        got = reward_at_horizon(RewardSpec(X, R, tau), theta)
        want = [R.at[i, th] if th <= tau else X.at[i, tau] for i, th in enumerate(theta)]
        assert np.array_equal(got, want)


# generator pieces -------------------------------------------------------------

def test_correction_weights_at_the_jump_of_the_example():
    grid, model, driver, T1 = example_setup()
    hazard, azema = correction_weight(model, "hazard"), correction_weight(model, "azema")
    assert np.allclose(hazard[0, 5], 1 - P) and np.allclose(azema[0, 5], (1 - P) / P)
    assert np.all(hazard[1] == 0) and np.all(azema[1] == 0)
    with pytest.raises(ValueError):
        correction_weight(model, "other")


def test_effective_generator_is_unchanged_without_default_jumps(rng):
    grid, W, model = cox_setup()
    R = LagladPath.cadlag(grid, np.cos(W))
    gen = GeneratorSpec(f_r=lambda k, ym, y, z: np.sin(y))
    eff = effective_generator(gen, model, R)
    y = rng.standard_normal(model.n_paths)
    z = np.zeros((model.n_paths, 1))
    for k in range(1, grid.size):
        assert np.allclose(eff.f_r(k, y, y, z), np.sin(y))


def test_effective_generator_at_the_recovery_is_the_user_generator():
    grid, model, driver, T1 = example_setup()
    R = LagladPath.cadlag(grid, 0.4 * model.state["J"])
    gen = GeneratorSpec(f_r=lambda k, ym, y, z: np.sin(y) + y ** 2)
    z = np.zeros((model.n_paths, 1))
    for kind in ("hazard", "azema"):
        eff = effective_generator(gen, model, R, kind)
        for k in (1, 5, 12):
            r = R.at[:, k]
            assert np.allclose(eff.f_r(k, r, r, z), np.sin(r) + r ** 2, atol=1e-14)


def test_transformed_generator_keeps_the_bound(rng):
    grid, model, driver, T1 = example_setup()
    c = 0.7
    gen = GeneratorSpec(f_r=lambda k, ym, y, z: c * np.tanh(y - z[:, 0]))
    reward = RewardSpec(LagladPath.constant(grid, 1.0, (model.n_paths,)), None, grid.steps)
    system = build_transformed_system(gen, model, reward, driver)
    for k in range(1, grid.size):
        y = 5 * rng.standard_normal(model.n_paths)
        z = 5 * rng.standard_normal((model.n_paths, 1))
        out = system.generator.f_r(k, y, y, z)
        # user components plus the hazard drift; the bracket drift is gone
        assert out.shape[0] == 2
        assert np.abs(out[0]).max() <= c


def test_direct_system_bracket_drift_is_the_example_density(rng):
    grid, model, driver, T1 = example_setup()
    reward = RewardSpec(LagladPath.constant(grid, 1.0, (model.n_paths,)), None, grid.steps)
    system = build_direct_system(GeneratorSpec(), model, reward, driver)
    J = model.state["J"]
    for k in (1, 4, 10):
        y = rng.standard_normal(model.n_paths)
        z = rng.standard_normal((model.n_paths, 1))
        out = system.generator.f_r(k, y, y, z)
        expected = -(B / SIGMA) * (1.0 - J[:, k - 1]) * z[:, 0] if k > 1 else np.zeros(model.n_paths)
        assert np.allclose(out[1], expected, atol=1e-14)
        assert np.allclose(out[2], y)  # recovery zero: rate -(R - y)


def test_transform_and_inverse_round_trip(rng):
    grid, W, model = cox_setup()
    n = model.n_paths
    reward = RewardSpec(LagladPath.cadlag(grid, np.tanh(W)), LagladPath.cadlag(grid, 0.5 * np.tanh(W)), grid.steps)
    driver = DriverSpec(grid, model.dM)
    system = build_transformed_system(GeneratorSpec(), model, reward, driver)
    Y = LagladPath.cadlag(grid, rng.standard_normal((n, grid.size)))
    Z = rng.standard_normal((n, grid.size, 1))
    before = rng.standard_normal((n, grid.size))
    G = model.G
    bar = SolutionBundle(G * Y, G.pre[:, :, None] * Z, y_before_jump=G.pre * before)
    back = invert_transformed(system, bar)
    assert np.max(np.abs(back.Y.at - Y.at)) <= 1e-14
    assert np.max(np.abs(back.Y.post - Y.post)) <= 1e-14
    assert np.max(np.abs(back.Z - Z)) <= 1e-14


# U ---------------------------------------------------------------------------

def test_compute_U_special_cases(rng):
    grid, model, driver, T1 = example_setup()
    R = LagladPath.cadlag(grid, 0.4 * model.state["J"])
    gen = GeneratorSpec(f_r=lambda k, ym, y, z: np.sin(y))
    assert np.all(compute_U(R, gen, R, driver) == 0.0)
    Y = LagladPath.cadlag(grid, rng.standard_normal((model.n_paths, grid.size)))
    no_jump = DriverSpec(grid, model.dM, driver.dc)
    assert np.array_equal(compute_U(Y, gen, R, no_jump), R.at - Y.at)
    # at the jump the generator difference enters once
    U = compute_U(Y, gen, R, driver)
    assert np.allclose(U[0, 5], R.at[0, 5] - Y.at[0, 5] - (np.sin(R.at[0, 5]) - np.sin(Y.at[0, 5])))


def test_compute_U_agrees_across_routes(rng):
    grid, model, driver, T1 = example_setup()
    R = LagladPath.cadlag(grid, 0.4 * model.state["J"])
    gen = GeneratorSpec(f_r=lambda k, ym, y, z: -0.2 * y + 0.1 * np.sin(y))
    Y = LagladPath.cadlag(grid, rng.standard_normal((model.n_paths, grid.size)))
    direct = compute_U(Y, gen, R, driver)
    transformed = compute_U_transformed(model.G * Y, gen, model, R, driver)
    assert np.max(np.abs(direct - transformed)) <= 1e-12


# solves ------------------------------------------------------------------------

def test_hazard_discounting_of_a_constant_payoff():
    c, lam = 2.0, 0.5
    grid, W, model = cox_setup(steps=100, n=20, lam=lam)
    n = model.n_paths
    reward = RewardSpec(LagladPath.constant(grid, c, (n,)), None, grid.steps)
    driver = DriverSpec(grid, model.dM)
    exact = c * np.exp(-lam)
    bar = reduce_and_solve(GeneratorSpec(), model, reward, driver, ce=MeanCE())
    assert abs(bar.y0 - exact) <= 1e-12
    direct = reduce_and_solve(GeneratorSpec(), model, reward, driver, ce=MeanCE(), route="direct")
    assert abs(direct.y0 - exact) <= 1e-2 * exact


@pytest.mark.parametrize("name", ["non-immersion-binomial", "immersion-binomial", "trinomial-poisson"])
def test_constant_payoff_and_recovery_give_a_constant_solution(name):
    finite = load_bundled(name)
    model = build_finite_model(finite)
    n, grid = finite.n_scenarios, finite.grid
    c = 1.7
    reward = RewardSpec(LagladPath.constant(grid, c, (n,)), LagladPath.constant(grid, c, (n,)), finite.steps)
    sol = reduce_and_solve(GeneratorSpec(), model, reward, tree_reduction_driver(finite))
    alive = model.G.at > 0
    assert np.max(np.abs(sol.Y.at[alive] - c)) <= 1e-12


def test_lift_before_and_after_default(rng):
    grid, W, model = cox_setup(steps=6, n=3)
    n = model.n_paths
    R = LagladPath.cadlag(grid, rng.standard_normal((n, grid.size)))
    X = LagladPath.cadlag(grid, rng.standard_normal((n, grid.size)))
    Y = LagladPath.cadlag(grid, rng.standard_normal((n, grid.size)))
    F = SolutionBundle(Y, rng.standard_normal((n, grid.size, 1)), rng.standard_normal((n, grid.size)))
    theta = np.array([grid.beyond, 3, 5])
    lift = lift_solution(F, model, theta, RewardSpec(X, R, 4))
    # no default before the horizon: the F-solution itself
    assert np.array_equal(lift.Y.at[0], Y.at[0]) and np.array_equal(lift.Y.at[2], Y.at[2])
    # default at node 3: Y before, the recovery from then on
    assert np.array_equal(lift.Y.at[1, :3], Y.at[1, :3])
    assert np.all(lift.Y.at[1, 3:] == R.at[1, 3]) and np.all(lift.Y.post[1, 3:] == R.at[1, 3])
    assert lift.Y.pre[1, 3] == Y.pre[1, 3]
    assert np.all(lift.Z[1, 4:] == 0) and np.array_equal(lift.Z[1, :4], F.Z[1, :4])
    assert np.all(lift.Z[0, 5:] == 0)  # stopped at the horizon node 4


@pytest.mark.parametrize("name", ["non-immersion-binomial", "trinomial-poisson", "immersion-binomial"])
def test_lift_solves_the_equation_up_to_the_random_time(name):
    finite = load_bundled(name)
    model = build_finite_model(finite)
    reward = tree_reward(finite)
    drv = tree_reduction_driver(finite)
    F = reduce_and_solve(TREE_GEN, model, reward, drv)
    space, jm, G = solve_g_tree_exact(finite, TREE_GEN, drv, reward)
    lift = lift_solution(F.take(space.omega), jm, space.theta, reward.take(space.omega))
    rep = residual_g_bsde(lift, TREE_GEN, drv.take(space.omega), jm, space.theta, reward.take(space.omega),
                          tolerance=1e-12)
    assert rep.passed, rep.value
    assert _gap(lift, G) <= 1e-10
    red = reduce_solution(G, space, reward)
    ok = np.isfinite(red.Y.at)
    assert np.max(np.abs(red.Y.at[ok] - F.Y.at[ok])) <= 1e-10


def test_time_outside_class_k_is_rejected():
    finite = load_bundled("class-k-fail")
    model = build_finite_model(finite)
    with pytest.raises(ModelError):
        reduce_and_solve(TREE_GEN, model, tree_reward(finite), tree_reduction_driver(finite))


def test_direct_and_transformed_need_matching_driver():
    grid, W, model = cox_setup()
    other = DriverSpec(TimeGrid.uniform(2.0, 10), np.zeros((1, model.n_paths, 11)))
    reward = RewardSpec(LagladPath.constant(grid, 1.0, (model.n_paths,)), None, grid.steps)
    with pytest.raises(ModelError):
        build_direct_system(GeneratorSpec(), model, reward, other)


@settings(max_examples=15)
@given(st.integers(2, 3), st.integers(0, 2 ** 32 - 1))
def test_round_trip_on_random_trees(steps, seed):
    rng = np.random.default_rng(seed)
    n = 2 ** steps
    law = rng.random((n, steps + 2)) + 0.05
    law[:, 0] = 0.0
    law /= law.sum(axis=1, keepdims=True)
    finite = FiniteFiltration.binomial(steps, law)
    model = build_finite_model(finite)
    reward = tree_reward(finite)
    drv = tree_reduction_driver(finite)
    F = reduce_and_solve(TREE_GEN, model, reward, drv)
    space, jm = enlarge_model(model)
    _, jm2, G = solve_g_tree_exact(finite, TREE_GEN, drv, reward)
    lift = lift_solution(F.take(space.omega), jm2, space.theta, reward.take(space.omega))
    assert _gap(lift, G) <= 1e-10
