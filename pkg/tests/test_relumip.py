import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from oracles import TableauInfeasible, enumerate_extreme_output, tableau_lp
from tomomip.edgenet import EdgeNet, forward, random_net
from tomomip.relumip import (BoundViolation, ModelBuilder, build_subregion_mip,
                             compute_neuron_bounds, encode_network, forward_assignment,
                             maximize_output, network_vars, relative_gap, solve_lp, solve_mip,
                             solve_model_lp, tighten_bounds, window_objective)


def _fix_and_solve(model, net, x0):
    """Fix the inputs and every binary to the forward pattern of ``x0`` and
    maximise the output over what is left."""
    nv = network_vars(model, net)
    point = forward_assignment(net, nv, x0, np.zeros(model.n))
    lb, ub = model.lb.copy(), model.ub.copy()
    lb[nv.inputs] = ub[nv.inputs] = x0
    z = nv.all_z
    lb[z] = ub[z] = point[z]
    return solve_model_lp(model, lb, ub), nv


# --- neuron bounds -----------------------------------------------------------

def test_interval_arithmetic_example():
    net = EdgeNet([np.array([[1.0, -1.0]])], [np.zeros(1)], omega=1.0)
    b = compute_neuron_bounds(net)
    assert b.lo[0][0] == -1.0 and b.hi[0][0] == 1.0


def test_zero_net_bounds_collapse():
    net = EdgeNet([np.zeros((3, 9)), np.zeros((1, 3))], [np.zeros(3), np.zeros(1)])
    b = compute_neuron_bounds(net)
    assert all(not lo.any() and not hi.any() for lo, hi in zip(b.lo, b.hi))


@pytest.mark.parametrize("seed", range(2))
def test_bounds_contain_sampled_preactivations(seed):
    net = random_net(seed=seed, omega=255.0)
    b = compute_neuron_bounds(net)
    X = np.random.default_rng(seed).uniform(0, 255, (100_000, 9))
    a = X
    for k, (W, bias) in enumerate(zip(net.weights, net.biases)):
        pre = a @ W.T + bias
        assert np.all(pre >= b.lo[k] - 1e-9) and np.all(pre <= b.hi[k] + 1e-9)
        a = np.maximum(pre, 0.0)


def test_tightened_bounds_are_valid_and_no_looser():
    net = random_net(seed=4, omega=1.0)
    loose = compute_neuron_bounds(net)
    tight = tighten_bounds(net, loose)
    X = np.random.default_rng(0).random((20_000, 9))
    a = X
    for k, (W, bias) in enumerate(zip(net.weights, net.biases)):
        pre = a @ W.T + bias
        assert np.all(tight.lo[k] >= loose.lo[k] - 1e-12)
        assert np.all(tight.hi[k] <= loose.hi[k] + 1e-12)
        assert np.all(pre >= tight.lo[k] - 1e-7) and np.all(pre <= tight.hi[k] + 1e-7)
        a = np.maximum(pre, 0.0)


def test_input_box_validation():
    net = random_net((9, 2, 1))
    with pytest.raises(ValueError):
        compute_neuron_bounds(net, (np.ones(9), np.zeros(9)))
    with pytest.raises(ValueError):
        compute_neuron_bounds(net, (np.zeros(9), np.full(9, np.inf)))


# --- encoding --------------------------------------------------------------------

def test_one_triple_per_neuron():
    net = random_net(seed=1)
    m = encode_network(net)
    assert m.groups["x"].size == m.groups["s"].size == m.groups["z"].size == net.n_neurons
    assert m.A_eq.shape[0] == net.n_neurons
    assert np.all(np.isfinite(m.lb)) and np.all(np.isfinite(m.ub))


@pytest.mark.parametrize("seed", range(3))
def test_encoding_soundness(seed):
    net = random_net(seed=seed)
    model = encode_network(net)
    X = np.random.default_rng(100 + seed).uniform(0, 1, (200, 9))
    for x0 in X:
        nv = network_vars(model, net)
        point = forward_assignment(net, nv, x0, np.zeros(model.n))
        assert model.violation(point) <= 1e-9
        res, nv = _fix_and_solve(model, net, x0)
        assert res.status == "optimal"
        assert abs(res.x[nv.output] - forward(net, x0)) <= 1e-9


def test_encoding_completeness_on_solver_points():
    net = random_net(seed=8)
    model = encode_network(net)
    rng = np.random.default_rng(8)
    for _ in range(15):
        c = np.zeros(model.n)
        c[model.groups["inputs"]] = rng.normal(size=9)
        c[model.groups["output"]] = rng.normal()
        sol = solve_mip(type(model)(**{**model.__dict__, "c": c}), gap_tol=0.0)
        f = sol.x[model.groups["inputs"]]
        assert abs(sol.x[model.groups["output"][0]] - forward(net, f)) <= 1e-6


def test_dead_and_always_active_neurons():
    W1 = np.zeros((2, 9))
    W1[:, 0] = 1.0
    net = EdgeNet([W1, np.ones((1, 2))], [np.array([-5.0, 3.0]), np.zeros(1)], omega=1.0)
    m = encode_network(net)
    nv = network_vars(m, net)
    dead_x, dead_z = nv.x[0][0], nv.z[0][0]
    live_s, live_z = nv.s[0][1], nv.z[0][1]
    assert m.ub[dead_x] == 0 and m.ub[dead_z] == 0
    assert m.ub[live_s] == 0 and m.lb[live_z] == 1
    # every activation is forced, so the root relaxation is already integral
    sol = solve_mip(m, gap_tol=0.0)
    assert sol.nodes == 1 and sol.objective == pytest.approx(4.0)


# --- LP ------------------------------------------------------------------------

def test_lp_single_variable():
    r = solve_lp([1.0], np.zeros((0, 1)), [], [[1.0]], [3.0], [0.0], [10.0])
    assert r.status == "optimal" and r.value == 3.0


def test_lp_zero_row_and_infeasible_zero_row():
    r = solve_lp([1.0, 1.0], [[0.0, 0.0]], [0.0], np.zeros((0, 2)), [], [0, 0], [1, 2])
    assert r.status == "optimal" and r.value == 3.0
    r = solve_lp([1.0], [[0.0]], [1.0], np.zeros((0, 1)), [], [0], [1])
    assert r.status == "infeasible"


def test_lp_infeasible_and_fixed_variables():
    r = solve_lp([1.0, 0.0], [[1.0, 1.0]], [5.0], np.zeros((0, 2)), [], [0, 0], [1, 1])
    assert r.status == "infeasible"
    r = solve_lp([1.0, 2.0], [[1.0, 1.0]], [1.5], np.zeros((0, 2)), [], [0.5, 0], [0.5, 4])
    assert r.status == "optimal" and r.value == pytest.approx(2.5)
    r = solve_lp([1.0], np.zeros((0, 1)), [], np.zeros((0, 1)), [], [2.0], [1.0])
    assert r.status == "infeasible"


def _random_lp(rng):
    n = int(rng.integers(2, 31))
    me, mu = int(rng.integers(0, n // 2 + 1)), int(rng.integers(0, n + 1))
    lb = -rng.random(n) * 3
    ub = lb + rng.random(n) * 4 + 0.01
    x_feas = lb + (ub - lb) * rng.random(n)
    A_eq = rng.normal(size=(me, n)) * (rng.random((me, n)) < 0.6)
    A_ub = rng.normal(size=(mu, n)) * (rng.random((mu, n)) < 0.6)
    b_eq = A_eq @ x_feas
    b_ub = A_ub @ x_feas + rng.random(mu) * 0.5
    return rng.normal(size=n), A_eq, b_eq, A_ub, b_ub, lb, ub


@pytest.mark.parametrize("seed", range(60))
def test_lp_matches_tableau_oracle(seed):
    rng = np.random.default_rng(seed)
    c, A_eq, b_eq, A_ub, b_ub, lb, ub = _random_lp(rng)
    maximize = bool(seed % 2)
    ref, _ = tableau_lp(c, A_eq, b_eq, A_ub, b_ub, lb, ub, maximize=maximize)
    r = solve_lp(c, A_eq, b_eq, A_ub, b_ub, lb, ub, maximize=maximize)
    assert r.status == "optimal"
    assert abs(r.value - ref) <= 1e-9 * max(1.0, abs(ref))
    assert np.all(r.x >= lb - 1e-9) and np.all(r.x <= ub + 1e-9)
    if A_eq.size:
        assert np.max(np.abs(A_eq @ r.x - b_eq)) <= 1e-8
    if A_ub.size:
        assert np.max(A_ub @ r.x - b_ub) <= 1e-8


@pytest.mark.parametrize("seed", range(10))
def test_lp_detects_infeasibility_like_oracle(seed):
    rng = np.random.default_rng(1000 + seed)
    n = 6
    A = rng.normal(size=(4, n))
    b = A @ rng.random(n) + rng.normal(size=4) * 5  # usually outside the box image
    lb, ub = np.zeros(n), np.ones(n)
    r = solve_lp(np.ones(n), A, b, np.zeros((0, n)), [], lb, ub)
    try:
        tableau_lp(np.ones(n), A, b, np.zeros((0, n)), [], lb, ub)
        assert r.status == "optimal"
    except TableauInfeasible:
        assert r.status == "infeasible"


# --- branch and bound ---------------------------------------------------------------

@pytest.mark.parametrize("seed", range(5))
def test_bnb_matches_enumeration(seed):
    sizes = [(9, 4, 1), (9, 3, 3, 1), (9, 6, 1), (9, 5, 5, 1), (9, 8, 3, 1)][seed]
    net = random_net(sizes, seed=seed + 40, omega=1.0)
    sol = maximize_output(net, gap_tol=0.0)
    assert sol.status == "optimal"
    assert sol.objective == pytest.approx(enumerate_extreme_output(net), abs=1e-8)
    assert forward(net, sol.x[:9]) == pytest.approx(sol.objective, abs=1e-8)


@pytest.mark.parametrize("seed", range(4))
def test_debug_mode_bound_checks(seed):
    net = random_net((9, 5, 3, 1), seed=seed, omega=1.0)
    maximize_output(net, gap_tol=0.0, debug=True)
    m = build_subregion_mip(net, 0.3, 0.1, 0.1, 1.0, np.full(9, 0.5))
    solve_mip(m, gap_tol=0.0, debug=True)


def test_limits_and_gap_semantics():
    net = random_net((9, 9, 9, 1), seed=3, omega=1.0)
    sol = maximize_output(net, gap_tol=0.0, node_limit=3)
    assert sol.status == "node_limit" and sol.has_incumbent
    assert sol.bound >= sol.objective
    assert sol.gap == pytest.approx(relative_gap(sol.bound, sol.objective))
    full = maximize_output(net, gap_tol=1e-6)
    assert full.status == "optimal" and full.gap <= 1e-6
    assert full.objective >= sol.objective - 1e-12


def test_infeasible_model():
    b = ModelBuilder()
    x = b.var("x", 0, 1)
    z = b.var("z", 0, 1, binary=True)
    b.add_eq({x: 1.0, z: 1.0}, 3.0)
    b.add_obj(x, 1.0)
    sol = solve_mip(b.build())
    assert sol.status == "infeasible" and not sol.has_incumbent


def test_binary_knapsack():
    # tiny pure-binary model with a known optimum: pick items 0 and 2
    b = ModelBuilder()
    v = [b.var(f"y{i}", 0, 1, binary=True) for i in range(4)]
    for i, val in enumerate([5.0, 4.0, 3.0, 2.0]):
        b.add_obj(v[i], val)
    b.add_le({v[0]: 4.0, v[1]: 3.0, v[2]: 2.0, v[3]: 3.0}, 6.0)
    sol = solve_mip(b.build(), gap_tol=0.0)
    assert sol.objective == 8.0 and np.allclose(sol.x, [1, 0, 1, 0])


# --- window models --------------------------------------------------------------

@pytest.fixture(scope="module")
def tiny():
    net = random_net((9, 3, 2, 1), seed=33, omega=1.0)
    lo = max(0.0, enumerate_extreme_output(net, sign=-1.0))
    return net, lo, enumerate_extreme_output(net)


def test_t_zero_picks_edge_branch(tiny):
    net, _, u = tiny
    m = build_subregion_mip(net, 0.0, 0.0, 0.0, 1.0, u_bar=u)
    sol = solve_mip(m, gap_tol=0.0)
    assert sol.x[m.groups["e"][0]] == pytest.approx(1.0)
    assert sol.objective == pytest.approx(u, abs=1e-8)


def test_large_t_picks_homogeneous_branch(tiny):
    net, lo, u = tiny
    m = build_subregion_mip(net, 2 * u, 0.0, 0.0, 1.0, u_bar=u)
    sol = solve_mip(m, gap_tol=0.0)
    assert sol.x[m.groups["e"][0]] == pytest.approx(0.0)
    assert sol.objective == pytest.approx(2 * u - lo, abs=1e-8)


def test_dev_plus_loss_is_constant_for_omega_two(tiny):
    net, _, u = tiny
    alpha = beta = 0.7
    m = build_subregion_mip(net, 0.5, alpha, beta, 2.0, np.ones(9),
                            bounds=compute_neuron_bounds(net, (np.zeros(9), np.full(9, 2.0))))
    assert not np.any(m.c[m.groups["inputs"]]) and m.quad_idx.size == 0
    rng = np.random.default_rng(0)
    for f in rng.uniform(0, 2, (50, 9)):
        dev = np.sum((2 - f) * f)
        loss = np.sum((f - 1) ** 2)
        assert dev + loss == pytest.approx(9.0)
        plain = window_objective(net, f, 0.5, 0.0, 0.0, 2.0)
        assert window_objective(net, f, 0.5, alpha, beta, 2.0, np.ones(9)) == pytest.approx(
            plain - alpha * 9.0)


def test_alpha_equal_beta_collapses_to_affine(tiny):
    net, _, u = tiny
    fs = np.random.default_rng(1).random(9)
    aff = build_subregion_mip(net, 0.4, 0.3, 0.3, 1.0, fs, u_bar=u)
    quad = build_subregion_mip(net, 0.4, 0.3, 0.3, 1.0, fs, u_bar=u, combine_terms=False)
    assert aff.is_linear and not quad.is_linear
    assert np.array_equal(quad.quad_diag(), np.zeros(quad.n))
    # both objectives agree at arbitrary feasible points
    for f in np.random.default_rng(2).random((20, 9)):
        xa = aff.completion(np.concatenate([f, np.zeros(aff.n - 9)]), aff.lb, aff.ub)
        assert aff.objective(xa) == pytest.approx(quad.objective(xa), abs=1e-12)
        assert aff.objective(xa) == pytest.approx(
            window_objective(net, f, 0.4, 0.3, 0.3, 1.0, fs), abs=1e-12)
    a, q = solve_mip(aff, gap_tol=0.0), solve_mip(quad, gap_tol=0.0)
    assert abs(a.objective - q.objective) <= 1e-9
    assert a.certified and q.certified


def test_convex_case_is_not_certified_but_bound_is_valid(tiny):
    # alpha > beta leaves a convex pixel term; node bounds use its secant, so
    # the bound stays valid even where leaves fall back to local search
    net, _, u = tiny
    fs = np.full(9, 0.5)
    m = build_subregion_mip(net, 0.4, 0.5, 0.1, 1.0, fs, u_bar=u)
    assert np.all(m.quad_diag()[m.groups["inputs"]] > 0)
    sol = solve_mip(m, gap_tol=0.0)
    assert sol.objective == pytest.approx(
        window_objective(net, sol.x[:9], 0.4, 0.5, 0.1, 1.0, fs), abs=1e-9)
    rng = np.random.default_rng(5)
    corners = rng.integers(0, 2, (4096, 9)).astype(float)
    samples = np.vstack([corners, rng.random((4096, 9))])
    best = max(window_objective(net, f, 0.4, 0.5, 0.1, 1.0, fs) for f in samples)
    assert sol.bound >= best - 1e-9
    assert not sol.certified


@given(st.floats(0, 2), st.floats(0, 0.5), st.floats(0, 0.5))
def test_window_model_objective_matches_direct_value(T, alpha, beta):
    net = random_net((9, 3, 1), seed=2, omega=1.0)
    fs = np.linspace(0, 1, 9)
    m = build_subregion_mip(net, T, alpha, beta, 1.0, fs, edge_scale=1.5)
    f = np.linspace(1, 0, 9) ** 2
    x = m.completion(np.concatenate([f, np.zeros(m.n - 9)]), m.lb, m.ub)
    assert m.violation(x) <= 1e-9
    assert m.objective(x) == pytest.approx(
        window_objective(net, f, T, alpha, beta, 1.0, fs, edge_scale=1.5), abs=1e-9)


def test_window_model_validation(tiny):
    net, _, _ = tiny
    with pytest.raises(ValueError):
        build_subregion_mip(net, 1.0, 0.1, 0.1, 1.0, None)
    with pytest.raises(ValueError):
        build_subregion_mip(net, -1.0, 0.0, 0.0, 1.0)
    with pytest.raises(ValueError):
        build_subregion_mip(net, 1.0, 0.0, 0.1, 1.0, np.ones(4))


def test_lp_format_dump(tiny):
    net, _, u = tiny
    text = build_subregion_mip(net, 0.4, 0.3, 0.2, 1.0, np.ones(9), u_bar=u,
                               combine_terms=False).to_lp_format()
    for section in ("Maximize", "Subject To", "Bounds", "Binary", "End"):
        assert section in text
    assert "^ 2" in text
    binaries = text.split("Binary\n")[1].split("End")[0].split()
    assert len(binaries) == net.n_neurons + 1 and binaries[-1] == "e"


def test_relative_gap_definition():
    assert relative_gap(10.5, 10.0) == pytest.approx(0.05)
    assert relative_gap(0.5, 0.0) == 0.5
    assert math.isinf(relative_gap(1.0, -math.inf))


def test_affine_and_quadratic_forms_agree_on_random_instances(tiny):
    net, _, u = tiny
    rng = np.random.default_rng(77)
    for _ in range(100):
        T = rng.uniform(0, 2 * u)
        a = rng.uniform(0, 0.5)
        fs = rng.random(9)
        aff = solve_mip(build_subregion_mip(net, T, a, a, 1.0, fs, u_bar=u), gap_tol=0.0)
        quad = solve_mip(build_subregion_mip(net, T, a, a, 1.0, fs, u_bar=u,
                                             combine_terms=False), gap_tol=0.0)
        assert abs(aff.objective - quad.objective) <= 1e-9 * max(1.0, abs(aff.objective))
