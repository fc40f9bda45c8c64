import numpy as np
import pytest
from hypothesis import given, strategies as st

from horizon_bsde.laglad import LagladPath, TimeGrid
from horizon_bsde.random_time import (FiniteFiltration, ModelError, build_cox_model, build_default_martingales,
                                      build_example132, build_finite_model, bundled_names, deflate_martingale,
                                      detect_eta_and_truncate, enlarge_model, load_bundled,
                                      simulate_brownian_poisson, simulate_J)

import oracles


def cox_deterministic(lam=0.5, steps=20, n=3):
    grid = TimeGrid.uniform(1.0, steps)
    Lam = LagladPath.continuous(grid, np.broadcast_to(lam * grid.nodes, (n, grid.size)))
    W = np.zeros((1, n, grid.size))
    return build_cox_model(Lam, LagladPath.cadlag(grid, W))


def brownian(n, steps, seed=3):
    grid = TimeGrid.uniform(1.0, steps)
    sim = simulate_brownian_poisson(grid, n, 1.0, seed)
    return grid, sim


def example132(n=500, steps=100, p=0.4, seed=3):
    grid, sim = brownian(n, steps, seed)
    return build_example132(0.5, 0.3, 0.4, p, sim.W, sim.first_jump, grid, N=sim.N, intensity=1.0), sim


# cox backend ------------------------------------------------------------------

def test_deterministic_hazard_gives_exponential_survival():
    model = cox_deterministic()
    t = model.grid.nodes
    assert np.allclose(model.G.at, np.exp(-0.5 * t), rtol=0, atol=1e-15)
    assert np.allclose(model.Gamma.at, 0.5 * t, atol=1e-15)
    assert np.all(model.m.at == 1.0) and np.all(model.nu == 0)


def test_hazard_jump_gives_the_same_jump_of_gamma():
    grid = TimeGrid.uniform(1.0, 8)
    p = 0.35
    left = np.zeros(grid.size)
    left[3] = 1 - p
    Lam = LagladPath.from_parts(grid, continuous=0.5 * grid.nodes, left_jumps=left)[None]
    model = build_cox_model(Lam, LagladPath.cadlag(grid, np.zeros((1, 1, grid.size))))
    assert model.Gamma.left_jump[0, 3] == pytest.approx(1 - p, abs=1e-15)
    assert model.G.at[0, 3] == pytest.approx(p * model.G.pre[0, 3], abs=1e-15)


def test_empirical_default_frequency_matches_expected_survival():
    n, steps = 100_000, 20
    grid, sim = brownian(n, steps, seed=11)
    Lam = np.cumsum(0.7 * np.exp(0.3 * sim.W) * grid.increments, axis=1)
    model = build_cox_model(LagladPath.continuous(grid, Lam), LagladPath.cadlag(grid, sim.W[None]))
    theta = model.theta_sampler(np.random.default_rng(5))
    for k in (5, 10, 20):
        alive = (theta > k).astype(float)
        se = np.sqrt(alive.var() / n + model.G.at[:, k].var() / n)
        assert abs(alive.mean() - model.G.at[:, k].mean()) <= 3 * se


def test_hazard_must_be_increasing_and_start_at_zero():
    grid = TimeGrid.uniform(1.0, 3)
    M = LagladPath.cadlag(grid, np.zeros((1, 1, grid.size)))
    with pytest.raises(ModelError):
        build_cox_model(LagladPath.continuous(grid, [[0.0, 0.5, 0.2, 0.9]]), M)
    with pytest.raises(ModelError):
        build_cox_model(LagladPath.continuous(grid, [[0.1, 0.5, 0.6, 0.9]]), M)


def test_continuous_cox_default_martingales_coincide(rng):
    model = cox_deterministic(n=50)
    theta = model.theta_sampler(rng)
    No, Np = build_default_martingales(model, theta)
    assert np.max(np.abs(No.at - Np.at)) <= 1e-14
    assert np.all(model.Ao.left_jump == 0) and np.allclose(model.Gtilde.at, model.G.pre)


def test_deflation_is_identity_when_azema_martingale_is_constant():
    model = cox_deterministic()
    Mt = deflate_martingale(model.M, model)
    assert np.array_equal(Mt.at, model.M.at)


# default after the first jump ------------------------------------------------------------------

def test_example132_initial_values():
    model, _ = example132(n=50, steps=20)
    assert np.all(model.meta["J"][:, 0] == 1.0) and np.all(model.m.at[:, 0] == 1.0)
    assert np.all(model.Gamma.at[:, 0] == 0.0)


def test_example132_full_recovery_makes_survival_continuous():
    model, _ = example132(n=200, steps=40, p=1.0)
    J = model.meta["J"]
    assert np.array_equal(model.G.at, J) and np.array_equal(model.Gtilde.at, J)
    assert np.all(model.Gamma.left_jump == 0)
    assert np.allclose(model.Gamma.at, 0.5 * model.grid.nodes)


def test_example132_jump_of_hazard_and_optional_increasing_process():
    p = 0.4
    model, sim = example132(p=p)
    rows = np.flatnonzero(sim.first_jump <= model.grid.steps)
    k = sim.first_jump[rows]
    J = model.meta["J"]
    assert np.allclose(model.Gamma.left_jump[rows, k], 1 - p, atol=1e-15)
    assert np.allclose(model.Ao.left_jump[rows, k], (1 - p) * J[rows, k], atol=1e-15)
    assert np.allclose(model.Gtilde.at[rows, k] - model.G.at[rows, k], (1 - p) * J[rows, k], atol=1e-15)
    assert np.allclose(model.G.at[rows, k], p * J[rows, k], atol=1e-15)


def test_example132_survival_decomposition_within_euler_error():
    model, _ = example132(n=1000, steps=200)
    dt = model.grid.increments.max()
    err = np.abs(model.G.at - (model.m.at - model.Ao.at)).max()
    assert err < 5 * dt


def test_example132_deflated_brownian_motion_has_the_predicted_drift():
    model, sim = example132(n=100, steps=50)
    J = model.meta["J"]
    dt = model.grid.increments
    drift = np.cumsum((0.3 / 0.4) * (1 - np.concatenate([J[:, :1], J[:, :-1]], axis=1)) * dt, axis=1)
    expected = sim.W - drift
    Mt = deflate_martingale(model.M[0:1], model, variant="predictable")
    assert np.max(np.abs(Mt.at[0] - expected)) <= 1e-12


def test_log_euler_scheme_keeps_J_positive():
    # ratio b/sigma = 2.5 on a four-step grid: plain Euler overshoots below zero
    grid, sim = brownian(20000, 4)
    assert np.any(simulate_J(grid, sim.W, 0.5, 2.5, 1.0) <= 0)
    assert np.all(simulate_J(grid, sim.W, 0.5, 2.5, 1.0, scheme="log-euler") > 0)


def test_example132_rejects_bad_parameters():
    grid, sim = brownian(5, 4)
    with pytest.raises(ModelError):
        build_example132(0.5, 0.3, 0.0, 0.4, sim.W, sim.first_jump, grid)
    with pytest.raises(ModelError):
        build_example132(0.5, 0.3, 0.4, 1.5, sim.W, sim.first_jump, grid)


def test_example132_p_zero_truncates_at_first_jump():
    model, sim = example132(n=300, steps=50, p=0.0)
    tau = model.grid.steps
    eta, tau_prime, flag = detect_eta_and_truncate(model, tau)
    assert np.array_equal(tau_prime, np.minimum(tau, sim.first_jump))
    assert flag  # Gtilde = J > 0 at the first zero of G


def test_positive_survival_has_no_truncation():
    model = cox_deterministic()
    eta, tau_prime, flag = detect_eta_and_truncate(model, 10)
    assert np.all(eta == model.grid.beyond) and np.all(tau_prime == 10) and flag


def test_simulation_does_not_depend_on_threads():
    grid = TimeGrid.uniform(1.0, 10)
    a = simulate_brownian_poisson(grid, 9000, 1.0, 42, threads=1)
    b = simulate_brownian_poisson(grid, 9000, 1.0, 42, threads=3)
    assert np.array_equal(a.W, b.W) and np.array_equal(a.N, b.N)
    assert a.seeds[4096] == "42:1:0"


# finite trees ---------------------------------------------------------------------

@pytest.mark.parametrize("name", bundled_names())
def test_finite_survival_matches_enumeration(name):
    finite = load_bundled(name)
    model = build_finite_model(finite)
    G, Gt = oracles.survival_from_law(finite)
    assert np.max(np.abs(model.G.at - np.array(G))) <= 1e-15
    assert np.max(np.abs(model.Gtilde.at - np.array(Gt))) <= 1e-15
    assert np.max(np.abs(model.m.at - np.array(oracles.azema_martingale(finite)))) <= 1e-14


def test_stopping_time_violates_avoidance():
    finite = load_bundled("stopping-time-binomial")
    model = build_finite_model(finite)
    for i in range(finite.n_scenarios):
        j = int(np.argmax(finite.theta_law[i]))
        if j <= finite.steps:
            assert model.G.at[i, j] == 0.0
            assert model.Ao.left_jump[i, j] == pytest.approx(model.Gtilde.at[i, j]) and model.Gtilde.at[i, j] > 0


def test_independent_time_is_immersed():
    law = np.array([0.0, 0.5, 0.5, 0.0])
    model = build_finite_model(FiniteFiltration.binomial(2, law))
    assert np.allclose(model.G.at, model.G.at[:1]) and np.all(model.m.at == 1.0)
    assert np.all(model.nu == 0.0)


def test_class_k_flag_on_tree_where_gtilde_vanishes():
    model = build_finite_model(load_bundled("class-k-fail"))
    *_, flag = detect_eta_and_truncate(model, model.grid.steps)
    assert not flag


def _oracle_default_martingale(finite, atoms):
    G, Gt = oracles.survival_from_law(finite)
    K = finite.steps
    out = []
    for i, j, _ in atoms:
        row, acc = [], 0.0
        for k in range(K + 1):
            if 1 <= k <= j and Gt[i][k] > 0:
                acc += (Gt[i][k] - G[i][k]) / Gt[i][k]
            row.append((1.0 if j <= k else 0.0) - acc)
        out.append(row)
    return out


@pytest.mark.parametrize("name", ["non-immersion-binomial", "trinomial-poisson", "stopping-time-binomial"])
def test_default_martingale_is_exact_martingale_by_enumeration(name):
    finite = load_bundled(name)
    atoms = oracles.joint_atoms(finite)
    vals = _oracle_default_martingale(finite, atoms)
    space, jm = enlarge_model(build_finite_model(finite))
    No, _ = build_default_martingales(jm, space.theta)
    assert np.max(np.abs(No.at - np.array(vals))) <= 1e-14
    for k in range(finite.steps):
        assert oracles.enlarged_drift(finite, atoms, vals, k) <= 1e-14


@pytest.mark.parametrize("name", ["non-immersion-binomial", "trinomial-poisson"])
def test_deflated_martingale_stopped_at_default_is_exact_martingale(name):
    finite = load_bundled(name)
    atoms = oracles.joint_atoms(finite)
    m = oracles.azema_martingale(finite)
    _, Gt = oracles.survival_from_law(finite)
    K = finite.steps
    space, jm = enlarge_model(build_finite_model(finite))
    Mt = deflate_martingale(jm.M, jm, stop=space.theta).stopped(space.theta)
    for c in range(finite.increments.shape[0]):
        vals = []
        for i, j, _ in atoms:
            row, acc = [], 0.0
            for k in range(K + 1):
                if 1 <= k <= j:
                    dM = finite.increments[c][i][k]
                    acc += dM - dM * (m[i][k] - m[i][k - 1]) / Gt[i][k]
                row.append(acc)
            vals.append(row)
        assert np.max(np.abs(Mt.at[c] - np.array(vals))) <= 1e-13
        for k in range(K):
            assert oracles.enlarged_drift(finite, atoms, vals, k) <= 1e-13


def test_deflated_martingale_outside_class_k_carries_the_first_zero_term():
    finite = load_bundled("class-k-fail")
    atoms = oracles.joint_atoms(finite)
    m = oracles.azema_martingale(finite)
    _, Gt = oracles.survival_from_law(finite)
    K = finite.steps
    inc = finite.increments[0]
    # predictable projection of dM on the cells where Gtilde first vanishes
    proj = np.zeros((finite.n_scenarios, K + 1))
    for k in range(1, K + 1):
        first = np.array([Gt[i][k] == 0 and Gt[i][k - 1] > 0 for i in range(finite.n_scenarios)])
        proj[:, k] = oracles.cell_mean(finite.labels[k - 1], finite.probabilities, inc[:, k] * first)
    vals = []
    for i, j, _ in atoms:
        row, acc = [], 0.0
        for k in range(K + 1):
            if 1 <= k <= j:
                acc += inc[i][k] - inc[i][k] * (m[i][k] - m[i][k - 1]) / Gt[i][k] + proj[i, k]
            row.append(acc)
        vals.append(row)
    assert np.any(proj != 0)
    space, jm = enlarge_model(build_finite_model(finite))
    Mt = deflate_martingale(jm.M, jm, stop=space.theta).stopped(space.theta)
    assert np.max(np.abs(Mt.at[0] - np.array(vals))) <= 1e-14
    for k in range(K):
        assert oracles.enlarged_drift(finite, atoms, vals, k) <= 1e-14


def test_theta_must_be_node_indices():
    model = cox_deterministic()
    with pytest.raises(ModelError):
        build_default_martingales(model, np.array([0.5, 1.0, 2.0]))
    with pytest.raises(ModelError):
        build_default_martingales(model, np.array([0, 1, 2]))


def test_finite_filtration_validation():
    good = FiniteFiltration.binomial(2, [0.0, 0.5, 0.5, 0.0])
    with pytest.raises(ModelError):
        FiniteFiltration(good.times, good.probabilities, good.labels, good.increments,
                         np.full((4, 4), 0.3))
    with pytest.raises(ModelError):
        FiniteFiltration(good.times, good.probabilities, good.labels, good.increments + 0.1, good.theta_law)
    bad_labels = good.labels.copy()
    bad_labels[1] = [0, 1, 0, 1]
    with pytest.raises(ModelError):
        FiniteFiltration(good.times, good.probabilities, bad_labels, good.increments, good.theta_law)


@given(st.integers(1, 4), st.integers(0, 2 ** 32 - 1))
def test_random_trees_satisfy_survival_relations(steps, seed):
    rng = np.random.default_rng(seed)
    n = 2 ** steps
    law = rng.random((n, steps + 2))
    law[:, 0] = 0.0
    law /= law.sum(axis=1, keepdims=True)
    model = build_finite_model(FiniteFiltration.binomial(steps, law))
    assert np.allclose(model.G.at, model.m.at - model.Ao.at, atol=1e-13)
    assert np.all(model.Gtilde.at >= model.G.at - 1e-15)
    assert np.allclose(model.Gtilde.post, model.G.at)


def test_tree_serialisation_round_trip(tmp_path):
    finite = load_bundled("trinomial-poisson")
    finite.dump(tmp_path / "t.json")
    again = FiniteFiltration.load(tmp_path / "t.json")
    for a in ("times", "probabilities", "labels", "increments", "theta_law"):
        assert np.array_equal(getattr(finite, a), getattr(again, a))
