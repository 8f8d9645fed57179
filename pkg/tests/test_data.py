import json
import struct

import numpy as np
import pytest

from slqsdp import InitialState, LinearSystem, NoiseModel, ProbingPolicy, load_batch, mc_average, rank_check, save_batch
from slqsdp.data import TrajectoryBatch, batch_fingerprint, propagate_mean, require_rank, simulate_batch
from slqsdp.errors import (
    ChecksumError,
    FormatVersionError,
    HorizonTooShortError,
    RankDeficiencyError,
    SimulationOverflowError,
    TruncationError,
    ValidationError,
)
from slqsdp.experiments import ExperimentConfig, run_experiment

from conftest import FIXTURES, random_instance

FIXTURE_FINGERPRINT = "4af6f80070a8b36b"


def _ex2_batch(ex2, l=100, N=9, seed=1, std=1.0, workers=1, chunk=4096):
    return simulate_batch(ex2.system, ex2.noise, ex2.init, ProbingPolicy.gaussian(4, 4, std), l, N, seed,
                          workers=workers, chunk=chunk)


# -- simulation -------------------------------------------------------------------


def test_shapes_and_shift(ex2):
    b = _ex2_batch(ex2, l=7, N=9)
    assert b.Z.shape == (7, 8, 9) and b.Y.shape == (7, 4, 9)
    assert (b.l, b.N, b.n, b.m) == (7, 9, 4, 4)
    assert b.shift_consistent()
    assert b.states().shape == (7, 10, 4)


def test_deterministic_recursion():
    sys = LinearSystem([[0.9, 0.2], [0.0, 1.1]], [[0.0], [1.0]])
    init = InitialState.point([1.0, -1.0])
    pol = ProbingPolicy(np.zeros((1, 2)), np.zeros((1, 1)))
    b = simulate_batch(sys, NoiseModel(np.zeros((2, 2))), init, pol, 2, 6, 0)
    x = [1.0, -1.0]
    for k in range(6):
        np.testing.assert_array_equal(b.Z[0, :2, k], x)
        x = [0.9 * x[0] + 0.2 * x[1], 0.0 * x[0] + 1.1 * x[1]]
        np.testing.assert_array_equal(b.Y[0, :, k], x)
    np.testing.assert_array_equal(b.Z[:, 2, :], 0.0)
    np.testing.assert_array_equal(b.Z[0], b.Z[1])


def test_identical_seed_bitwise(ex2):
    a, b = _ex2_batch(ex2, seed=5), _ex2_batch(ex2, seed=5)
    assert a.equals(b) and a.fingerprint == b.fingerprint
    assert not a.equals(_ex2_batch(ex2, seed=6))


def test_worker_count_independent(ex2):
    a = _ex2_batch(ex2, l=50, seed=3)
    b = _ex2_batch(ex2, l=50, seed=3, workers=4, chunk=7)
    np.testing.assert_array_equal(a.Z, b.Z)
    np.testing.assert_array_equal(a.Y, b.Y)


def test_prefix_stability(ex2):
    # trajectory i depends only on (seed, i), so a smaller batch is a prefix of a larger one
    a = _ex2_batch(ex2, l=10, seed=9)
    b = _ex2_batch(ex2, l=25, seed=9)
    np.testing.assert_array_equal(a.Z, b.Z[:10])


def test_initial_state_mean(ex2):
    b = _ex2_batch(ex2, l=100, seed=20261015)
    x0 = b.Z[:, :4, 0].mean(axis=0)
    assert np.all(np.abs(x0 - np.array([1.0, 2.0, 3.0, 4.0])) <= 0.9)


def test_overflow_names_trajectory():
    sys = LinearSystem([[1e30]], [[1.0]])
    init = InitialState.point([1.0])
    with pytest.raises(SimulationOverflowError) as info:
        simulate_batch(sys, NoiseModel([[0.0]]), init, ProbingPolicy.gaussian(1, 1), 2, 50, 0)
    assert info.value.trajectory == 0
    assert info.value.exit_code == 3


def test_simulate_rejects_bad_sizes(ex2):
    with pytest.raises(ValidationError):
        _ex2_batch(ex2, l=0)
    with pytest.raises(ValidationError):
        _ex2_batch(ex2, N=0)


def test_policy_validation():
    with pytest.raises(ValidationError):
        ProbingPolicy(np.zeros((1, 2)), -np.eye(1))
    with pytest.raises(ValidationError):
        ProbingPolicy(np.zeros((1, 2)), [[1.0, 2.0], [0.0, 1.0]])


def test_singular_noise_covariance_sampled():
    sys = LinearSystem(np.zeros((2, 2)), [[1.0], [0.0]])
    Sigma = np.array([[1.0, 1.0], [1.0, 1.0]])
    b = simulate_batch(sys, NoiseModel(Sigma), InitialState.point([0.0, 0.0]),
                       ProbingPolicy(np.zeros((1, 2)), np.zeros((1, 1))), 3, 5, 0)
    # with A = 0 and no input, x_{k+1} = w_k lies on the range of Sigma
    np.testing.assert_allclose(b.Y[:, 0, :], b.Y[:, 1, :], atol=1e-12)


def test_noise_covariance_recovered():
    rng = np.random.default_rng(7)
    inst = random_instance(rng, 3, 2, sigma=0.04)
    b = simulate_batch(inst.system, inst.noise, inst.init, ProbingPolicy.gaussian(3, 2), 1000, 10, 11)
    Z = np.concatenate(list(b.Z), axis=1)
    Y = np.concatenate(list(b.Y), axis=1)
    AB = np.linalg.lstsq(Z.T, Y.T, rcond=None)[0].T
    res = Y - AB @ Z
    cov = res @ res.T / (res.shape[1] - Z.shape[0])
    np.testing.assert_allclose(cov, 0.04 * np.eye(3), atol=0.15 * 0.04)


# -- rank check -------------------------------------------------------------------


def test_rank_passes_example2(ex2):
    rep = rank_check(_ex2_batch(ex2, l=100, seed=20261015))
    assert rep.passed and rep.per_trajectory.shape == (100,)


def test_rank_short_horizon(ex2):
    b = _ex2_batch(ex2, l=3, N=7)
    rep = rank_check(b)
    assert not rep.passed and not rep.horizon_ok
    with pytest.raises(HorizonTooShortError) as info:
        require_rank(b)
    assert info.value.exit_code == 3


def test_rank_unexcited_input():
    sys = LinearSystem([[0.5, 0.1], [0.0, 0.3]], [[1.0], [1.0]])
    pol = ProbingPolicy(np.zeros((1, 2)), np.zeros((1, 1)))
    b = simulate_batch(sys, NoiseModel(np.zeros((2, 2))), InitialState.point([1.0, 1.0]), pol, 2, 5, 0)
    rep = rank_check(b)
    assert rep.horizon_ok and not rep.passed and rep.first_failure() == 0
    with pytest.raises(RankDeficiencyError) as info:
        require_rank(b)
    assert info.value.trajectory == 0


# -- averages ---------------------------------------------------------------------


def test_mc_average_single(ex2):
    b = _ex2_batch(ex2, l=1)
    np.testing.assert_array_equal(mc_average(b), b.states()[0])


def test_mc_average_closed_loop_deterministic():
    sys = LinearSystem([[0.9, 0.2], [-0.1, 0.8]], [[1.0], [0.5]])
    L0 = np.array([[-0.3, -0.1]])
    b = simulate_batch(sys, NoiseModel(np.zeros((2, 2))), InitialState.point([2.0, -1.0]),
                       ProbingPolicy(L0, np.zeros((1, 1))), 4, 8, 0)
    expected = propagate_mean(sys.closed_loop(L0), np.array([2.0, -1.0]), 8)
    np.testing.assert_allclose(mc_average(b), expected, rtol=0, atol=1e-14)


def test_post_learning_contraction():
    cfg = ExperimentConfig.from_preset("example2", seed=20261015)
    res = run_experiment(cfg)
    post = res.averages[res.averages[:, 0] == 1]
    k = post[:, 1].astype(int)
    norm_N = np.linalg.norm(post[k == cfg.N, 2:])
    norm_N10 = np.linalg.norm(post[k == cfg.N + 10, 2:])
    assert norm_N10 < 0.2 * norm_N


# -- persistence ------------------------------------------------------------------


def test_roundtrip_bitwise(ex2, tmp_path):
    b = _ex2_batch(ex2, l=5, seed=2)
    save_batch(b, tmp_path / "d")
    back = load_batch(tmp_path / "d")
    assert back.equals(b)
    assert back.Z.tobytes() == b.Z.tobytes() and back.Y.tobytes() == b.Y.tobytes()
    man = json.loads((tmp_path / "d" / "manifest.json").read_text())
    assert {"version", "n", "m", "l", "N", "seed", "fingerprint", "policy"} <= set(man)


def test_csv_only_roundtrip(ex2, tmp_path):
    b = _ex2_batch(ex2, l=3, seed=2)
    save_batch(b, tmp_path / "d")
    (tmp_path / "d" / "batch.bin").unlink()
    back = load_batch(tmp_path / "d")
    np.testing.assert_array_equal(back.Z, b.Z)
    np.testing.assert_array_equal(back.Y, b.Y)
    head = (tmp_path / "d" / "traj_0.csv").read_text().splitlines()
    assert head[0] == "k,x1,x2,x3,x4,u1,u2,u3,u4"
    assert len(head) == 11 and head[-1].endswith(",,,,")


def _saved(ex2, tmp_path):
    b = _ex2_batch(ex2, l=3, seed=2)
    return save_batch(b, tmp_path / "d")


def test_version_mismatch(ex2, tmp_path):
    d = _saved(ex2, tmp_path)
    man = json.loads((d / "manifest.json").read_text())
    man["version"] = 99
    (d / "manifest.json").write_text(json.dumps(man))
    with pytest.raises(FormatVersionError):
        load_batch(d)


def test_binary_version_mismatch(ex2, tmp_path):
    d = _saved(ex2, tmp_path)
    blob = bytearray((d / "batch.bin").read_bytes())
    struct.pack_into("<I", blob, 4, 2)
    (d / "batch.bin").write_bytes(bytes(blob))
    with pytest.raises(FormatVersionError):
        load_batch(d)


def test_checksum_failure(ex2, tmp_path):
    d = _saved(ex2, tmp_path)
    blob = bytearray((d / "batch.bin").read_bytes())
    blob[100] ^= 0xFF
    (d / "batch.bin").write_bytes(bytes(blob))
    with pytest.raises(ChecksumError):
        load_batch(d)


def test_truncation(ex2, tmp_path):
    d = _saved(ex2, tmp_path)
    blob = (d / "batch.bin").read_bytes()
    (d / "batch.bin").write_bytes(blob[:-20])
    with pytest.raises(TruncationError):
        load_batch(d)


def test_l_mismatch_vs_files(ex2, tmp_path):
    d = _saved(ex2, tmp_path)
    (d / "traj_2.csv").unlink()
    with pytest.raises(ChecksumError):
        load_batch(d)


def test_error_codes_distinct():
    codes = {FormatVersionError("x").code, ChecksumError("x").code, TruncationError("x").code}
    assert len(codes) == 3


def test_fixture_fingerprint(ex2):
    b = load_batch(FIXTURES / "example2_small")
    assert b.fingerprint == FIXTURE_FINGERPRINT
    policy = ProbingPolicy.gaussian(4, 4, 50.0)
    assert batch_fingerprint(ex2.system, ex2.noise, ex2.init, policy, b.l, b.N, b.seed) == FIXTURE_FINGERPRINT
    regenerated = simulate_batch(ex2.system, ex2.noise, ex2.init, policy, b.l, b.N, b.seed)
    assert regenerated.equals(b)


def test_batch_rejects_inconsistent_shapes():
    with pytest.raises(ValidationError):
        TrajectoryBatch(Z=np.zeros((2, 3, 4)), Y=np.zeros((2, 2, 5)), seed=0,
                        policy=ProbingPolicy.gaussian(2, 1), fingerprint="x")
