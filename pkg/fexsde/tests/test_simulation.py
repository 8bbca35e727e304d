import logging

import numpy as np
import pytest

from fexsde.errors import ConfigurationError
from fexsde.monitoring import RunLogger
from fexsde.simulation import (
    InitRegion, SdeSpec, TrajectorySet, TransitionPairs, benchmark, constant_diffusion, decode_pairs,
    decode_trajectories, drift_targets, encode_pairs, encode_trajectories, estimate_noise_center,
    euler_maruyama, make_pairs, raw_targets, spec_from_strings, trajectories_to_csv,
)


def test_still_system_stays_put():
    spec = SdeSpec(2, lambda x: np.zeros_like(x), constant_diffusion(np.zeros((2, 2))))
    traj = euler_maruyama(spec, [0.7, -1.5], 0.01, 20, 4, seed=1)
    assert traj.states.shape == (4, 21, 2)
    np.testing.assert_array_equal(traj.states, np.tile([0.7, -1.5], (4, 21, 1)))


def test_seeded_determinism():
    case = benchmark("ou")
    a = euler_maruyama(case.spec, case.init_region, 0.01, 30, 16, seed=7)
    b = euler_maruyama(case.spec, case.init_region, 0.01, 30, 16, seed=7)
    c = euler_maruyama(case.spec, case.init_region, 0.01, 30, 16, seed=8)
    np.testing.assert_array_equal(a.states, b.states)
    assert not np.array_equal(a.states, c.states)


def test_trajectory_streams_do_not_depend_on_count():
    case = benchmark("double_well")
    small = euler_maruyama(case.spec, case.init_region, 0.01, 10, 5, seed=3)
    large = euler_maruyama(case.spec, case.init_region, 0.01, 10, 12, seed=3)
    np.testing.assert_array_equal(small.states, large.states[:5])


def test_diverging_trajectories_are_excluded(caplog):
    spec = SdeSpec(1, lambda x: np.where(x > 0, 1e4 * x ** 3, 0.0), constant_diffusion([[0.0]]), name="blowup")
    with caplog.at_level(logging.WARNING, logger="fexsde"):
        traj = euler_maruyama(spec, InitRegion([-1.0], [1.0]), 0.01, 50, 40, seed=0,
                              logger=RunLogger("fexsde.test"))
    assert traj.excluded > 0
    assert traj.n_trajectories + traj.excluded == 40
    assert np.all(np.isfinite(traj.states))
    assert "Excluded" in caplog.text


def test_pair_counts():
    traj = TrajectorySet(np.zeros((2, 4, 1)), 0.01, seed=0)
    pairs = make_pairs(traj)
    assert len(pairs) == 6
    assert pairs.dt == 0.01

    single = make_pairs(TrajectorySet(np.zeros((3, 1, 2)), 0.01, seed=0))
    assert len(single) == 0


def test_raw_targets():
    pairs = TransitionPairs(np.array([[1.0]]), np.array([[1.002]]), 0.01)
    assert raw_targets(pairs, 0)[0] == pytest.approx(0.2)

    with pytest.raises(ConfigurationError):
        raw_targets(TransitionPairs(np.array([[1.0]]), np.array([[1.0]]), 0.0), 0)
    with pytest.raises(ConfigurationError):
        raw_targets(pairs, 1)


def test_noiseless_ou_targets():
    spec = SdeSpec(1, lambda x: 1.2 - x, constant_diffusion([[0.0]]))
    traj = euler_maruyama(spec, InitRegion([0.0], [2.5]), 0.01, 50, 10, seed=2)
    data = drift_targets(make_pairs(traj), 0)
    np.testing.assert_allclose(data.y, 1.2 - data.x[:, 0], atol=1e-10)


def test_exponential_noise_centering():
    case = benchmark("exp_noise")
    traj = euler_maruyama(case.spec, case.init_region, 0.01, 100, 500, seed=4)
    pairs = make_pairs(traj)
    # σ·E[ξ]/√Δt = 0.1 / 0.1
    center = estimate_noise_center(pairs, 0, mean_to_std=1.0)
    assert center == pytest.approx(1.0, rel=0.1)

    data = drift_targets(pairs, 0, center)
    assert np.mean(data.y) == pytest.approx(-2.0 * np.mean(data.x), abs=0.1)
    assert estimate_noise_center(pairs, 0, mean_to_std=0.0) == 0.0


def test_benchmarks():
    ou = benchmark("ou")
    assert ou.n_trajectories == 15000
    assert ou.spec.drift(np.array([[0.2]]))[0, 0] == pytest.approx(1.0)
    assert ou.true_sigma[0] == pytest.approx(0.3)
    np.testing.assert_array_equal(ou.init_region.low, [0.0])
    np.testing.assert_array_equal(ou.init_region.high, [2.5])

    ol2d = benchmark("ol2d")
    assert ol2d.spec.dim == 2 and ol2d.n_trajectories == 35000
    np.testing.assert_allclose(ol2d.spec.drift(np.array([[2.0, 1.0]])), [[-60.0, -10.0]])
    np.testing.assert_allclose(ol2d.spec.diffusion(np.zeros((1, 2)))[0], np.sqrt(2.0) * np.eye(2))

    exp_noise = benchmark("exp_noise")
    assert exp_noise.spec.noise_kind.value == "exponential"
    assert exp_noise.spec.noise_mean == 1.0
    assert exp_noise.n_trajectories == 10000

    with pytest.raises(ConfigurationError, match="double_well"):
        benchmark("lorenz")


def test_spec_from_strings():
    spec = spec_from_strings(["1.2 - x1"], [[0.3]])
    np.testing.assert_allclose(spec.drift(np.array([[0.2], [1.2]])), [[1.0], [0.0]])

    constant = spec_from_strings(["2", "x1*x2"], [[1.0, 0.0], [0.0, 1.0]])
    np.testing.assert_allclose(constant.drift(np.array([[3.0, 4.0]])), [[2.0, 12.0]])

    with pytest.raises(ConfigurationError):
        spec_from_strings(["y + 1"], [[0.3]])
    with pytest.raises(ConfigurationError):
        spec_from_strings(["x1", "x2"], [[0.3]])


def test_binary_dataset_format():
    case = benchmark("ou")
    traj = euler_maruyama(case.spec, case.init_region, 0.01, 5, 3, seed=0)
    restored = decode_trajectories(encode_trajectories(traj))
    np.testing.assert_array_equal(restored.states, traj.states)
    assert restored.dt == traj.dt

    pairs = make_pairs(traj)
    blob = encode_pairs(pairs)
    back = decode_pairs(blob)
    np.testing.assert_array_equal(back.x_next, pairs.x_next)

    with pytest.raises(ConfigurationError):
        decode_pairs(blob[:-8])
    with pytest.raises(ConfigurationError):
        decode_trajectories(blob)


def test_trajectories_csv():
    traj = TrajectorySet(np.arange(12, dtype=float).reshape(2, 3, 2), 0.5, seed=0)
    lines = trajectories_to_csv(traj).strip().splitlines()
    assert lines[0] == "t,x1,x2,trajectory_id"
    assert len(lines) == 1 + 6
    assert lines[-1] == "1,10,11,1"


def test_noiseless_double_well_settles_in_nearest_well():
    spec = spec_from_strings(["x1 - x1**3"], [[0.0]], name="double_well")
    final = [euler_maruyama(spec, [x0], 0.01, 1000, 2, seed=0).states[:, -1, 0] for x0 in (0.5, -0.5, 1.5)]
    np.testing.assert_allclose(final, [[1.0, 1.0], [-1.0, -1.0], [1.0, 1.0]], atol=1e-4)

    path = euler_maruyama(spec, [0.5], 0.01, 1000, 1, seed=0).states[0, :, 0]
    assert np.all(np.diff(path) >= 0)
    # x(t)² = 1 / (1 + (1/x₀² − 1)e^{−2t})
    assert path[100] == pytest.approx(1.0 / np.sqrt(1.0 + 3.0 * np.exp(-2.0)), abs=5e-3)
