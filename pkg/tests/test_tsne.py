import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.stats import special_ortho_group

from sharknet.errors import DataError
from sharknet.tsne import (
    TsneConfig, TsneError, calibrate_affinities, conditional_affinities, kl_divergence, label_agreement,
    squared_distances, standardize, student_t_affinities, symmetrize, tsne,
)

from oracles import kl_loops, perplexity_of_row


def _clusters(seed=0, per=60, dim=128, sep=10.0):
    rng = np.random.default_rng(seed)
    centers = rng.normal(0, sep, size=(3, dim))
    x = np.concatenate([c + rng.normal(size=(per, dim)) for c in centers])
    return x, np.repeat(np.arange(3), per)


def test_equidistant_points():
    d = np.ones((3, 3)) - np.eye(3)
    pc, achieved = conditional_affinities(d, 2.0)
    off = ~np.eye(3, dtype=bool)
    np.testing.assert_allclose(pc[off], 0.5, atol=1e-12)
    np.testing.assert_allclose(symmetrize(pc)[off], 1 / 6, atol=1e-12)
    np.testing.assert_allclose(achieved, 2.0)


def test_calibration_hits_target_perplexity():
    x = np.random.default_rng(0).normal(size=(200, 128))
    pc, achieved = conditional_affinities(squared_distances(x), 30.0)
    np.testing.assert_allclose(pc.sum(axis=1), 1.0, atol=1e-9)
    assert np.all(np.diag(pc) == 0)
    recomputed = np.array([perplexity_of_row(row) for row in pc])
    assert np.abs(recomputed - 30.0).max() < 1e-5
    assert np.abs(achieved - 30.0).max() < 1e-5


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 10_000), st.integers(12, 60), st.floats(2.0, 10.0))
def test_joint_affinity_invariants(seed, n, perp):
    x = np.random.default_rng(seed).normal(size=(n, 5))
    p = calibrate_affinities(x, perp)
    off = ~np.eye(n, dtype=bool)
    assert np.array_equal(p, p.T)
    assert p[off].min() >= 1e-12
    assert abs(p.sum() - 1.0) < 1e-9


def test_calibration_errors():
    d = np.ones((4, 4)) - np.eye(4)
    with pytest.raises(ValueError):
        conditional_affinities(d, 4.0)
    d[0, 1] = np.nan
    with pytest.raises(DataError):
        conditional_affinities(d, 2.0)


def test_standardize():
    x = np.random.default_rng(0).normal(3, 5, size=(50, 4))
    x[:, 2] = 7.0
    with pytest.warns(UserWarning):
        z, _, sd = standardize(x)
    keep = [0, 1, 3]
    np.testing.assert_allclose(z[:, keep].mean(0), 0, atol=1e-6)
    np.testing.assert_allclose(z[:, keep].std(0), 1, atol=1e-6)
    assert sd[2] == 1.0 and np.all(z[:, 2] == 0)


def test_kl_matches_double_loop():
    rng = np.random.default_rng(3)
    p = calibrate_affinities(rng.normal(size=(25, 4)), 5.0)
    q, _ = student_t_affinities(rng.normal(size=(25, 2)))
    assert abs(kl_divergence(p, q) - kl_loops(p, q)) < 1e-10
    assert kl_divergence(p, p) == 0.0
    assert kl_divergence(p, q) >= 0
    with pytest.raises(ValueError):
        kl_divergence(p, q[:-1, :-1])


def test_two_points():
    p = np.array([[0.0, 0.5], [0.5, 0.0]])
    emb = tsne(p, TsneConfig(perplexity=1.5, total_iters=300))
    assert not np.allclose(emb.coords[0], emb.coords[1])
    assert emb.kl < 1e-9


def test_descent_and_separation():
    x, labels = _clusters()
    p = calibrate_affinities(standardize(x)[0], 30.0)
    emb = tsne(p, TsneConfig(seed=1))
    assert np.all(np.isfinite(emb.coords)) and emb.coords.shape == (180, 2)
    kl_start = dict(emb.trace)[0]
    assert emb.kl < kl_start
    assert label_agreement(emb.coords, labels) >= 0.99
    post = [(it, kl) for it, kl in emb.trace if it >= 250]
    for it, kl in post:
        later = [k for i, k in post if i == it + 50]
        if later:
            assert later[0] <= kl + 1e-3


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_final_kl_below_initial_for_seeds(seed):
    x = np.random.default_rng(seed + 10).normal(size=(60, 8))
    emb = tsne(calibrate_affinities(x, 10.0), TsneConfig(seed=seed, total_iters=400))
    assert emb.kl < emb.trace[0][1]


def test_rerun_bit_identical(tmp_path):
    x = np.random.default_rng(0).normal(size=(40, 6))
    p = calibrate_affinities(x, 8.0)
    cfg = TsneConfig(total_iters=300, seed=5)
    tsne(p, cfg).write_csv(tmp_path / "a.csv", np.zeros(40, int))
    tsne(p, cfg).write_csv(tmp_path / "b.csv", np.zeros(40, int))
    assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()


def test_rotation_leaves_affinities_unchanged():
    x = np.random.default_rng(1).normal(size=(50, 6))
    rot = special_ortho_group.rvs(6, random_state=2)
    p1, p2 = calibrate_affinities(x, 10.0), calibrate_affinities(x @ rot, 10.0)
    assert np.abs(p1 - p2).max() < 1e-9


def test_exact_rotation_gives_identical_embedding():
    # a half turn in the (0, 1) plane is exact in floating point
    x = np.random.default_rng(1).normal(size=(50, 6))
    half_turn = np.diag([-1.0, -1.0, 1.0, 1.0, 1.0, 1.0])
    p1, p2 = calibrate_affinities(x, 10.0), calibrate_affinities(x @ half_turn, 10.0)
    assert np.array_equal(p1, p2)
    cfg = TsneConfig(total_iters=300, seed=0)
    assert np.array_equal(tsne(p1, cfg).coords, tsne(p2, cfg).coords)


def test_general_rotation_gives_equivalent_embedding():
    # round-off differences in P get amplified by the descent, so only quality is compared
    x, labels = _clusters(dim=16)
    rot = special_ortho_group.rvs(16, random_state=2)
    a = tsne(calibrate_affinities(x, 30.0), TsneConfig())
    b = tsne(calibrate_affinities(x @ rot, 30.0), TsneConfig())
    assert label_agreement(a.coords, labels) >= 0.99 and label_agreement(b.coords, labels) >= 0.99
    assert abs(a.kl - b.kl) < 0.1 * max(a.kl, b.kl)


def test_config_and_input_validation():
    with pytest.raises(ValueError):
        TsneConfig(perplexity=1.0)
    with pytest.raises(ValueError):
        TsneConfig(total_iters=100, exaggeration_iters=250)
    with pytest.raises(ValueError):
        tsne(np.array([[0.0, 0.7], [0.3, 0.0]]))


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_nan_reported_with_iteration():
    p = calibrate_affinities(np.random.default_rng(0).normal(size=(20, 3)), 5.0)
    with pytest.raises(TsneError, match="iteration"):
        tsne(p, TsneConfig(learning_rate=1e300, total_iters=250))
