import csv
import io
import math

import numpy as np
import pytest

from asht.cli import bundled_models
from asht.design import solve_design
from asht.engine import (
    CSV_COLUMNS,
    RECENTER_EVERY,
    SwitchCostMatrix,
    TrialBatch,
    llr_trace,
    run_trial,
    simulate,
    total_cost,
)
from asht.errors import ParameterOutOfRange
from asht.obs_models import load_model
from asht.policies import PolicyConfig, PolicyKind
from asht.rng import TrialStream, trial_keys


def setup(name):
    m = load_model(bundled_models()[name])
    return m, solve_design(m)


TWO = setup("two_by_two")
THREE = setup("three_location_search")
BETA0 = setup("beta_zero")

POLICIES = [
    dict(kind=PolicyKind.PROCEDURE_A, L=200.0),
    dict(kind=PolicyKind.SLUGGISH_A, L=200.0, eta=0.3),
    dict(kind=PolicyKind.SLUGGISH_A, L=200.0, eta=1.0),
    dict(kind=PolicyKind.STOP_ONLY_AT, L=200.0, eta=0.3, stop_at=1),
    dict(kind=PolicyKind.EPSILON_UNIFORM, L=200.0, epsilon=0.2),
]


@pytest.mark.parametrize("md", [TWO, THREE, BETA0], ids=["two", "three", "beta0"])
@pytest.mark.parametrize("pk", POLICIES, ids=lambda p: p["kind"].value)
def test_vector_engine_matches_scalar(md, pk):
    model, design = md
    cfg = PolicyConfig(lambdas=design.lambdas, **pk)
    costs = SwitchCostMatrix(np.arange(model.num_actions**2, dtype=float).reshape(model.num_actions, -1) * (1 - np.eye(model.num_actions)))
    keys = trial_keys(11, 1, 0, np.arange(150))
    batch = simulate(model, cfg, costs, 1, keys, n_max=400)
    for t in range(len(keys)):
        assert run_trial(model, cfg, costs, 1, TrialStream(int(keys[t])), n_max=400) == batch.record(t)


def test_censoring_agrees_and_is_flagged():
    model, design = TWO
    cfg = PolicyConfig(PolicyKind.SLUGGISH_A, design.lambdas, L=1e6, eta=0.5)
    keys = trial_keys(0, 0, 0, np.arange(40))
    batch = simulate(model, cfg, SwitchCostMatrix.zeros(2), 0, keys, n_max=5)
    assert batch.censored.all() and (batch.decision == -1).all() and (batch.tau == 5).all()
    rec = run_trial(model, cfg, SwitchCostMatrix.zeros(2), 0, TrialStream(int(keys[3])), n_max=5)
    assert rec.censored and rec.decision is None and rec == batch.record(3)


def test_recentering_keeps_engines_identical():
    model, design = TWO
    cfg = PolicyConfig(PolicyKind.NON_STOPPING, design.lambdas, eta=0.5)
    keys = trial_keys(3, 0, 0, np.arange(3))
    n = RECENTER_EVERY * 2 + 17
    batch = simulate(model, cfg, SwitchCostMatrix.uniform(2, 1.0), 0, keys, n_max=n)
    for t in range(3):
        assert run_trial(model, cfg, SwitchCostMatrix.uniform(2, 1.0), 0, TrialStream(int(keys[t])), n_max=n) == batch.record(t)
    # Margins keep growing linearly despite recentering.
    assert (batch.final_margin > 0.1 * n * design.D[0]).all()


class TestInvariants:
    model, design = THREE
    costs = SwitchCostMatrix.uniform(3, 2.5)
    keys = trial_keys(5, 2, 0, np.arange(3000))

    def batch(self, **pk):
        return simulate(self.model, PolicyConfig(lambdas=self.design.lambdas, **pk), self.costs, 2, self.keys)

    def test_bookkeeping(self):
        b = self.batch(kind=PolicyKind.SLUGGISH_A, L=1e3, eta=0.3)
        assert np.array_equal(b.total_cost, b.tau + b.switch_cost)
        assert np.array_equal(b.action_counts.sum(axis=1), b.tau)
        assert np.array_equal(b.switch_cost, 2.5 * b.switch_count)
        assert (b.switch_count <= b.resample_count).all()
        right = b.decision == 2
        assert (b.settlement_time[right] <= b.tau[right]).all()
        # A wrong decision means the leader still disagrees at the stopping step.
        assert (b.settlement_time[~right] == b.tau[~right] + 1).all()
        assert (b.final_margin >= math.log(2 * 1e3)).all()
        rec = b.record(0)
        assert total_cost(rec) == rec.total_cost

    def test_procedure_a_never_resamples_by_gate(self):
        b = self.batch(kind=PolicyKind.PROCEDURE_A, L=1e3)
        assert (b.resample_count == 0).all()

    def test_stop_only_at_is_slower_pathwise(self):
        full = self.batch(kind=PolicyKind.SLUGGISH_A, L=1e3, eta=0.3)
        only = self.batch(kind=PolicyKind.STOP_ONLY_AT, L=1e3, eta=0.3, stop_at=2)
        assert (only.tau >= full.tau).all()
        assert (only.decision == 2).all()

    def test_switch_rate_bounded_by_eta(self):
        eta = 0.3
        b = self.batch(kind=PolicyKind.SLUGGISH_A, L=1e3, eta=eta)
        d = b.switch_count - eta * (b.tau - 1)
        assert d.mean() <= 3 * d.std(ddof=1) / math.sqrt(d.size)

    def test_error_rate_below_bound(self):
        b = self.batch(kind=PolicyKind.SLUGGISH_A, L=100.0, eta=0.5)
        assert (b.decision != 2).mean() <= 0.01 + 3 * math.sqrt(0.01 / len(b))


def test_margin_hits_counts_paths():
    model, design = TWO
    cfg = PolicyConfig(PolicyKind.NON_STOPPING, design.lambdas, eta=0.5)
    keys = trial_keys(1, 0, 0, np.arange(20))
    b = simulate(model, cfg, SwitchCostMatrix.zeros(2), 0, keys, n_max=60, margin_level=0.0)
    traces = np.array([llr_trace(model, cfg, 0, TrialStream(int(k)), 60) for k in keys])
    assert np.array_equal(b.margin_hits, (traces <= 0.0).sum(axis=0))


def test_llr_trace_requires_non_stopping():
    model, design = TWO
    with pytest.raises(ParameterOutOfRange):
        llr_trace(model, PolicyConfig(PolicyKind.PROCEDURE_A, design.lambdas, L=10.0), 0, TrialStream(0), 5)


def test_input_checks():
    model, design = TWO
    cfg = PolicyConfig(PolicyKind.PROCEDURE_A, design.lambdas, L=10.0)
    with pytest.raises(ParameterOutOfRange):
        simulate(model, cfg, SwitchCostMatrix.zeros(3), 0, trial_keys(0, 0, 0, np.arange(2)))
    with pytest.raises(ParameterOutOfRange):
        simulate(model, cfg, SwitchCostMatrix.zeros(2), 2, trial_keys(0, 0, 0, np.arange(2)))
    with pytest.raises(ParameterOutOfRange):
        run_trial(model, cfg, SwitchCostMatrix.zeros(2), 0, TrialStream(0), n_max=0)
    wrong = PolicyConfig(PolicyKind.PROCEDURE_A, THREE[1].lambdas, L=10.0)
    with pytest.raises(ParameterOutOfRange):
        run_trial(model, wrong, SwitchCostMatrix.zeros(2), 0, TrialStream(0))


class TestSwitchCosts:
    def test_validation(self):
        with pytest.raises(ParameterOutOfRange):
            SwitchCostMatrix(np.array([[0.0, -1.0], [1.0, 0.0]]))
        with pytest.raises(ParameterOutOfRange):
            SwitchCostMatrix(np.array([[1.0, 1.0], [1.0, 0.0]]))
        with pytest.raises(ParameterOutOfRange):
            SwitchCostMatrix(np.zeros((2, 3)))

    def test_uniform(self):
        g = SwitchCostMatrix.uniform(3, 2.0)
        assert g.g_max == 2.0 and g == SwitchCostMatrix(2.0 * (1 - np.eye(3)))


def test_concat_and_csv():
    model, design = TWO
    cfg = PolicyConfig(PolicyKind.SLUGGISH_A, design.lambdas, L=50.0, eta=0.5)
    keys = trial_keys(2, 0, 0, np.arange(10))
    whole = simulate(model, cfg, SwitchCostMatrix.uniform(2, 1.0), 0, keys, trial_ids=np.arange(10))
    parts = [
        simulate(model, cfg, SwitchCostMatrix.uniform(2, 1.0), 0, keys[:4], trial_ids=np.arange(4)),
        simulate(model, cfg, SwitchCostMatrix.uniform(2, 1.0), 0, keys[4:], trial_ids=np.arange(4, 10)),
    ]
    joined = TrialBatch.concat(parts)
    assert joined.to_csv(["x: 1"]) == whole.to_csv(["x: 1"])
    text = whole.to_csv(["x: 1"])
    assert text.startswith("# x: 1\n")
    rows = list(csv.reader(io.StringIO(text.split("\n", 1)[1])))
    assert tuple(rows[0]) == CSV_COLUMNS and len(rows) == 11
    assert [int(r[0]) for r in rows[1:]] == list(range(10))
