import numpy as np
import pytest
from scipy.stats import chisquare

from fexsde.config import SearchConfig
from fexsde.errors import ConfigurationError
from fexsde.expression import ExpressionInstance, OperatorSequence, build_template, polynomial_terms
from fexsde.numerics import Optimizer
from fexsde.search import (
    Candidate, CandidatePool, Controller, compute_score, policy_update, refine_pool, run_search,
    sample_sequences, score_from_loss,
)
from fexsde.simulation import RegressionSet, benchmark, drift_targets, euler_maruyama, make_pairs

DEPTH1 = build_template(1)


def affine_data(n=400, noise=0.0, seed=0):
    rng = np.random.default_rng(seed)
    x = rng.uniform(0.0, 2.5, size=(n, 1))
    y = 1.2 - x[:, 0] + noise * rng.standard_normal(n)
    return RegressionSet(x, y, 0)


def tiny_config(**overrides):
    values = dict(depth=1, score_iters=60, score_batch=None, score_eval_every=20, lbfgs_iters=10,
                  refine_iters=40, pool_size=5, batch_size=2, seed=0)
    values.update(overrides)
    return SearchConfig(**values)


def candidate(op: str, loss: float) -> Candidate:
    seq = OperatorSequence(DEPTH1, [op])
    return Candidate(seq, np.zeros(DEPTH1.n_params(1)), 1, loss)


def test_uniform_sampling_when_epsilon_is_one():
    ctrl = Controller(DEPTH1, rng=np.random.default_rng(0))
    ctrl.net.biases[-1][0] += 20.0
    sampled = sample_sequences(ctrl, 1.0, 10000, np.random.default_rng(1))
    counts = np.bincount([s.choices[0] for s in sampled], minlength=len(ctrl.slot_ops[0]))
    assert chisquare(counts).pvalue > 1e-3


def test_greedy_sampling_follows_saturated_logit():
    ctrl = Controller(build_template(3), rng=np.random.default_rng(0))
    start, _ = ctrl.blocks[0]
    ctrl.net.biases[-1][start + 2] += 200.0
    sampled = sample_sequences(ctrl, 0.0, 50, np.random.default_rng(2))
    assert all(s.choices[0] == 2 for s in sampled)


def test_batch_shape():
    ctrl = Controller(build_template(3), rng=np.random.default_rng(0))
    sampled = sample_sequences(ctrl, 0.1, 2, np.random.default_rng(0))
    assert len(sampled) == 2
    assert all(len(s.sequence.key) == 4 for s in sampled)
    with pytest.raises(ConfigurationError):
        sample_sequences(ctrl, 0.1, 0, np.random.default_rng(0))


def test_score_bounds():
    assert score_from_loss(0.0) == 1.0
    assert score_from_loss(float("inf")) == 0.0
    assert score_from_loss(float("nan")) == 0.0
    assert 0.0 < score_from_loss(4.0) == pytest.approx(1.0 / 3.0)


def test_zero_expression_on_zero_targets():
    rng = np.random.default_rng(0)
    data = RegressionSet(rng.normal(size=(50, 1)), np.zeros(50), 0)
    result = compute_score(OperatorSequence(DEPTH1, ["zero"]), data, tiny_config(jitter=0.0))
    assert result.loss == 0.0
    assert result.score == 1.0


def test_self_consistent_data_scores_near_one():
    result = compute_score(OperatorSequence(DEPTH1, ["Id"]), affine_data(), tiny_config(lbfgs_iters=50))
    assert result.loss < 1e-6
    assert result.score > 0.999


def test_ou_affine_recovery():
    case = benchmark("ou")
    traj = euler_maruyama(case.spec, case.init_region, 0.01, 100, 2000, seed=0)
    data = drift_targets(make_pairs(traj), 0)
    cfg = SearchConfig(score_iters=300, score_eval_every=100, lbfgs_iters=50, lbfgs_max_points=250000, seed=0)
    result = compute_score(OperatorSequence(DEPTH1, ["Id"]), data, cfg)
    terms = polynomial_terms(result.expression)
    assert terms[(1,)] == pytest.approx(-1.0, abs=0.05)
    assert terms[(0,)] == pytest.approx(1.2, abs=0.06)


def test_policy_update_bandit():
    ctrl = Controller(DEPTH1, rng=np.random.default_rng(0))
    optimizer = Optimizer("adam", ctrl.net.n_params, 0.05)
    rng = np.random.default_rng(1)
    sin_index = [op.symbol for op in ctrl.slot_ops[0]].index("sin")
    for _ in range(200):
        batch = sample_sequences(ctrl, 0.0, 4, rng)
        scores = [1.0 if s.sequence.key == ("sin",) else 0.0 for s in batch]
        policy_update(ctrl, batch, scores, 0.5, optimizer)
    assert ctrl.distributions()[0][sin_index] > 0.95


def test_policy_update_without_spread_is_noop():
    ctrl = Controller(DEPTH1, rng=np.random.default_rng(0))
    before = ctrl.net.get_params()
    batch = sample_sequences(ctrl, 0.5, 3, np.random.default_rng(0))
    optimizer = Optimizer("adam", ctrl.net.n_params, 0.01)
    assert not policy_update(ctrl, batch, [0.4, 0.4, 0.4], 0.5, optimizer)
    np.testing.assert_array_equal(ctrl.net.get_params(), before)

    assert policy_update(ctrl, batch, [0.1, 0.5, 0.9], 1.0, optimizer)
    assert not np.array_equal(ctrl.net.get_params(), before)


def test_pool_insertion_rules():
    pool = CandidatePool(30)
    assert pool.insert(candidate("sin", 1.0))
    assert len(pool) == 1

    assert pool.insert(candidate("sin", 0.25))
    assert len(pool) == 1
    assert pool.ordered()[0].loss == 0.25
    assert not pool.insert(candidate("sin", 4.0))

    small = CandidatePool(2)
    small.insert(candidate("sin", 0.1))
    small.insert(candidate("cos", 0.2))
    assert not small.insert(candidate("exp", 5.0))
    assert {c.key for c in small.ordered()} == {("sin",), ("cos",)}
    assert small.insert(candidate("exp", 0.01))
    assert [c.key for c in small.ordered()] == [("exp",), ("sin",)]


def test_pool_ties_keep_discovery_order():
    pool = CandidatePool(3)
    pool.insert(candidate("sin", 1.0))
    pool.insert(candidate("cos", 1.0))
    assert [c.key for c in pool.ordered()] == [("sin",), ("cos",)]


def test_pool_minimum_never_decreases():
    rng = np.random.default_rng(5)
    ops = ["sin", "cos", "exp", "zero", "Id", "square", "cube", "fourth"]
    pool = CandidatePool(4)
    last = 0.0
    for _ in range(100):
        pool.insert(candidate(ops[rng.integers(len(ops))], float(rng.exponential())))
        if pool.full:
            assert pool.min_score >= last
            last = pool.min_score


def test_refinement_recovers_from_perturbation():
    data = affine_data(noise=0.1, seed=3)
    seq = OperatorSequence(DEPTH1, ["Id"])
    exact = ExpressionInstance(seq, [1.0, 1.0, 0.0, -1.0, 1.2], 1)
    baseline = np.mean((exact.predict(data.x) - data.y) ** 2)

    pool = CandidatePool(3)
    pool.insert(Candidate(seq, exact.params + 0.5, 1, 1.0))
    cfg = tiny_config(refine_iters=3000, refine_lr=0.02, score_eval_every=100)
    refined = refine_pool(pool, data, cfg)
    assert not refined[0].diverged
    assert refined[0].loss <= refined[0].initial_loss
    assert refined[0].loss < 1.1 * baseline


def test_refinement_never_increases_loss():
    data = affine_data()
    seq = OperatorSequence(DEPTH1, ["Id"])
    pool = CandidatePool(2)
    pool.insert(Candidate(seq, [1.0, 1.0, 0.0, -1.0, 1.2], 1, 0.0))
    refined = refine_pool(pool, data, tiny_config(refine_iters=200))
    assert refined[0].loss <= refined[0].initial_loss

    with pytest.raises(ConfigurationError):
        refine_pool(CandidatePool(2), data, tiny_config())


def test_run_search_requires_iterations():
    with pytest.raises(ConfigurationError):
        run_search([affine_data()], tiny_config(), iterations=0)
    with pytest.raises(ConfigurationError):
        run_search([], tiny_config(), iterations=1)


def test_run_search_is_reproducible():
    cfg = tiny_config()
    first = run_search([affine_data()], cfg, iterations=3)
    second = run_search([affine_data()], cfg, iterations=3, threads=2)
    assert len(first.expressions) == 1
    assert first.expressions[0].sequence == second.expressions[0].sequence
    np.testing.assert_array_equal(first.expressions[0].params, second.expressions[0].params)
    assert len(first.history.for_dim(0)) == 3


def test_run_search_dimensions_are_independent():
    a = affine_data(seed=1)
    rng = np.random.default_rng(2)
    x = rng.uniform(-1, 1, size=(300, 1))
    b = RegressionSet(x, np.sin(2.0 * x[:, 0]), 1)
    cfg = tiny_config()

    forward = run_search([a, b], cfg, iterations=3)
    backward = run_search([b, a], cfg, iterations=3)
    for i, j in [(0, 1), (1, 0)]:
        assert forward.expressions[i].sequence == backward.expressions[j].sequence
        np.testing.assert_array_equal(forward.expressions[i].params, backward.expressions[j].params)
    assert all(0.0 <= c.score <= 1.0 for pool in forward.pools for c in pool.ordered())


def test_controller_is_single_layer_by_default():
    template = build_template(3)
    ctrl = Controller(template, rng=np.random.default_rng(0))
    assert ctrl.net.layer_sizes == [1, ctrl.output_size]
    assert SearchConfig().controller_hidden == 0

    wide = Controller(template, 16, rng=np.random.default_rng(0))
    assert wide.net.layer_sizes == [1, 16, wide.output_size]
    assert sum(len(p) for p in wide.distributions()) == wide.output_size
