import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from asht.cli import bundled_models
from asht.design import (
    DesignSolution,
    brute_force_lambda,
    compute_beta,
    decay_rate,
    rho_bound,
    simplex_grid,
    solve_design,
    solve_lambda,
    theoretical_bounds,
)
from asht.errors import (
    IndexOutOfRange,
    IndistinguishablePair,
    InfeasibleDesign,
    ParameterOutOfRange,
    SOutOfRange,
    TooManyActions,
)
from asht.obs_models import Model, chernoff_coefficient, kl_divergence, kl_table, load_model

scipy_optimize = pytest.importorskip("scipy.optimize")


def bundled(name):
    return load_model(bundled_models()[name])


def random_model(seed, M=3, K=3, S=3):
    p = np.random.default_rng(seed).dirichlet(np.ones(S), size=(M, K))
    p = np.maximum(p, 1e-3)
    return Model(p / p.sum(axis=-1, keepdims=True))


def scipy_maxmin(model, i):
    kl = kl_table(model)
    others = [j for j in range(model.num_hypotheses) if j != i]
    K = model.num_actions
    # min -t  st  t - sum_a lam_a kl[i, j, a] <= 0,  sum lam = 1
    A_ub = np.hstack([-kl[i, others], np.ones((len(others), 1))])
    res = scipy_optimize.linprog(
        np.r_[np.zeros(K), -1.0],
        A_ub=A_ub,
        b_ub=np.zeros(len(others)),
        A_eq=np.r_[np.ones(K), 0.0][None, :],
        b_eq=[1.0],
        bounds=[(0, None)] * K + [(None, None)],
        method="highs",
    )
    return -res.fun


class TestTwoByTwo:
    model = bundled("two_by_two")

    def test_lambdas_are_point_masses(self):
        d = solve_design(self.model)
        assert d.lambdas.tolist() == [[0.0, 1.0], [1.0, 0.0]]

    def test_D_equals_single_action_kl(self):
        d = solve_design(self.model)
        ref = kl_divergence([0.5, 0.5], [0.1, 0.9])
        assert d.D == pytest.approx([ref, ref], abs=1e-12)
        assert 1.0 / d.D[0] == pytest.approx(1.9576, abs=1e-4)

    def test_beta_one(self):
        assert solve_design(self.model).beta == 1.0


def test_three_location_search():
    d = solve_design(bundled("three_location_search"))
    # Under H_i the two other locations each separate one alternative.
    expected = 0.5 * kl_divergence([0.5, 0.5], [0.02, 0.98])
    assert d.D == pytest.approx([expected] * 3, abs=1e-12)
    for i in range(3):
        assert d.lambdas[i, i] == pytest.approx(0.0, abs=1e-12)
        assert d.objective(i) == pytest.approx(d.D[i], abs=1e-12)
    assert d.beta == pytest.approx(0.5)


def test_beta_zero_model():
    d = solve_design(bundled("beta_zero"))
    assert d.beta == 0.0 and not d.has_positive_beta
    assert decay_rate(d.model, 0, 1.0, d.beta) == (0.0, None)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(2, 4), st.integers(1, 4))
def test_lp_matches_scipy(seed, M, K):
    m = random_model(seed, M, K)
    for i in range(M):
        _, d = solve_lambda(m, i)
        assert d == pytest.approx(scipy_maxmin(m, i), abs=1e-9)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_lp_dominates_grid(seed):
    m = random_model(seed)
    kmax = float(kl_table(m).max())
    for i in range(3):
        mix, d = solve_lambda(m, i)
        grid_mix, g = brute_force_lambda(m, i, 0.05)
        assert g <= d + 1e-9
        assert d - g <= 0.05 * kmax
        assert mix.weights.sum() == pytest.approx(1.0)


def test_single_action_model():
    m = Model(np.array([[[0.3, 0.7]], [[0.6, 0.4]]]))
    mix, d = solve_lambda(m, 0)
    assert mix.weights.tolist() == [1.0]
    assert d == pytest.approx(kl_divergence([0.3, 0.7], [0.6, 0.4]))


def test_infeasible_and_index_errors():
    m = Model(np.array([[[0.5, 0.5]], [[0.5, 0.5]]]))
    with pytest.raises(InfeasibleDesign):
        solve_lambda(m, 0)
    with pytest.raises(IndexOutOfRange):
        solve_lambda(bundled("two_by_two"), 2)


def test_brute_force_guards():
    with pytest.raises(TooManyActions):
        brute_force_lambda(random_model(0, K=5), 0, 0.1)
    with pytest.raises(ParameterOutOfRange):
        brute_force_lambda(random_model(0), 0, 0.2)
    with pytest.raises(ParameterOutOfRange):
        brute_force_lambda(random_model(0), 0, 0.0)


@pytest.mark.parametrize("k,n", [(1, 5), (2, 4), (3, 10), (4, 6)])
def test_simplex_grid(k, n):
    g = simplex_grid(k, n)
    assert len(g) == math.comb(n + k - 1, k - 1)
    assert np.allclose(g.sum(axis=1), 1.0) and np.all(g >= 0)
    assert len({tuple(r) for r in np.round(g * n).astype(int)}) == len(g)


def test_compute_beta_argmin():
    m = bundled("beta_zero")
    rep = compute_beta(m, np.array([[0.0, 1.0], [0.0, 1.0], [1.0, 0.0]]))
    i, j, k = rep.argmin
    assert rep.beta == 0.0 and k == 2 and {i, j} == {0, 1}
    with pytest.raises(IndexOutOfRange):
        compute_beta(m, np.ones((2, 2)) / 2)


class TestRho:
    model = bundled("two_by_two")

    def test_formula(self):
        worst = max(chernoff_coefficient(self.model, 0, 1, a, 0.5) for a in range(2))
        assert rho_bound(self.model, 0, 1, 0.5, 0.4, 1.0) == pytest.approx(0.4 * worst + 0.6, abs=1e-15)

    def test_below_one(self):
        for s in (0.1, 0.5, 0.9):
            assert rho_bound(self.model, 0, 1, s, 0.2, 1.0) < 1.0

    def test_errors(self):
        with pytest.raises(SOutOfRange):
            rho_bound(self.model, 0, 1, 1.0, 0.5, 1.0)
        with pytest.raises(ParameterOutOfRange):
            rho_bound(self.model, 0, 1, 0.5, 0.0, 1.0)
        with pytest.raises(ParameterOutOfRange):
            rho_bound(self.model, 0, 1, 0.5, 0.5, 0.0)
        same = Model(np.array([[[0.5, 0.5]], [[0.5, 0.5]], [[0.2, 0.8]]]))
        with pytest.raises(IndistinguishablePair):
            rho_bound(same, 0, 1, 0.5, 0.5, 1.0)

    def test_decay_rate_monotone_in_eta(self):
        rates = [decay_rate(self.model, 0, eta, 1.0)[0] for eta in (0.1, 0.5, 1.0)]
        assert rates[0] < rates[1] < rates[2]


def test_theoretical_bounds():
    d = solve_design(bundled("two_by_two"))
    rep = theoretical_bounds(d, L=100.0, eta=0.5, g_max=2.0)
    h = rep.per_hypothesis[0]
    assert rep.threshold == pytest.approx(math.log(100.0))
    assert h.lower_slope == pytest.approx(1.0 / d.D[0])
    assert h.cost_slope == pytest.approx(2.0 / d.D[0])
    assert h.error_ceiling == pytest.approx(0.01)
    assert h.gamma > 0 and 0 < h.s_star < 1
    json.dumps(rep.to_json_dict())
    with pytest.raises(ParameterOutOfRange):
        theoretical_bounds(d, L=1.0, eta=0.5, g_max=0.0)
    with pytest.raises(ParameterOutOfRange):
        theoretical_bounds(d, L=10.0, eta=0.5, g_max=-1.0)


def test_solution_json_round_trip():
    m = bundled("three_location_search")
    d = solve_design(m)
    back = DesignSolution.from_json_dict(json.loads(json.dumps(d.to_json_dict())), m)
    assert np.array_equal(back.lambdas, d.lambdas) and np.array_equal(back.D, d.D)
    assert back.beta == d.beta and back.beta_argmin == d.beta_argmin
