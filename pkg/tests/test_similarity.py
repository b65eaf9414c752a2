import csv
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from emd_oracle import brute_force_transport
from prolad import data, nn
from prolad import similarity as sim
from prolad.config import RunConfig
from prolad.errors import ConfigurationError, InputError


# -- cosine statistics -------------------------------------------------------------------------
def test_pair_counts_and_ranges():
    r = np.random.default_rng(0)
    feats = r.normal(size=(7, 5))
    labels = np.array([0, 0, 1, 1, 2, 2, 2])
    st_ = sim.SimilarityStats.from_features(feats, labels)
    assert st_.n_feature_pairs == 7 * 6 // 2 and st_.n_class_pairs == 3
    assert -1 <= st_.mean_feat_sim <= 1 and -1 <= st_.mean_intercls_sim <= 1
    assert 0 <= st_.abs_diff <= 2


def test_pair_means_against_loops():
    r = np.random.default_rng(1)
    feats = r.normal(size=(5, 4))
    labels = np.array([0, 1, 0, 1, 1])

    def cos(a, b):
        return float(a @ b / np.linalg.norm(a) / np.linalg.norm(b))
    pairs = [cos(feats[i], feats[j]) for i in range(5) for j in range(i + 1, 5)]
    protos = [feats[labels == c].mean(axis=0) for c in (0, 1)]
    st_ = sim.SimilarityStats.from_features(feats, labels)
    assert st_.mean_feat_sim == pytest.approx(np.mean(pairs), abs=1e-12)
    assert st_.mean_intercls_sim == pytest.approx(cos(*protos), abs=1e-12)


def test_single_class_has_no_class_pairs():
    st_ = sim.SimilarityStats.from_features(np.eye(3), [0, 0, 0])
    assert st_.n_class_pairs == 0 and st_.mean_intercls_sim == 0.0


def test_stats_shape_mismatch():
    with pytest.raises(InputError):
        sim.SimilarityStats.from_features(np.ones((3, 2)), [0, 1])


# -- coefficients ------------------------------------------------------------------------------
def test_coeff_sim_examples():
    assert sim.coeff_sim(1.0, 1.5) == 1.0
    assert sim.coeff_sim(0.0, 1.5) == pytest.approx(math.exp(-1.5), abs=1e-12)
    assert math.exp(1.5 * 0.5) == pytest.approx(2.117, abs=1e-3)
    assert sim.coeff_sim(1.5, 1.5) == 1.0


def test_coeff_sim_accepts_stats():
    st_ = sim.SimilarityStats(0.3, 0.1, 1, 1)
    assert sim.coeff_sim(st_, 2.0) == pytest.approx(math.exp(2.0 * (0.2 - 1.0)), abs=1e-12)


@pytest.mark.parametrize("beta", [0.0, -1.0])
def test_bad_beta(beta):
    with pytest.raises(ConfigurationError):
        sim.coeff_sim(0.5, beta)
    with pytest.raises(ConfigurationError):
        sim.coeff_loss(0.5, 0.5, beta)


def test_coeff_loss_examples():
    assert sim.coeff_loss(7.3, 1.0) == 1.0
    assert sim.coeff_loss(2.0, 0.5, 1.5) == pytest.approx(math.exp(-1.5), abs=1e-12)
    assert sim.coeff_loss(0.0, 0.2) == 1.0


@pytest.mark.parametrize("loss,acc", [(-0.1, 0.5), (float("nan"), 0.5), (1.0, 1.2), (1.0, -0.1)])
def test_coeff_loss_bad_inputs(loss, acc):
    with pytest.raises(InputError):
        sim.coeff_loss(loss, acc)


@settings(max_examples=200)
@given(st.floats(0, 2), st.floats(0, 2), st.floats(0.01, 10))
def test_coeff_sim_monotone_and_bounded(a, b, beta):
    lo, hi = sorted((a, b))
    assert 0.0 <= sim.coeff_sim(lo, beta) <= sim.coeff_sim(hi, beta) <= 1.0


@settings(max_examples=200)
@given(st.floats(0, 50), st.floats(0, 50), st.floats(0, 1), st.floats(0.01, 10))
def test_coeff_loss_monotone_and_bounded(l1, l2, acc, beta):
    lo, hi = sorted((l1, l2))
    assert 1.0 >= sim.coeff_loss(lo, acc, beta) >= sim.coeff_loss(hi, acc, beta) >= 0.0


def test_prototype_loss_acc():
    feats = np.array([[1.0, 0.0], [0.9, 0.1], [0.0, 1.0], [0.1, 0.9]])
    loss, acc = sim.prototype_loss_acc(feats, np.array([0, 0, 1, 1]))
    assert acc == 1.0 and 0 < loss < 0.01
    loss2, acc2 = sim.prototype_loss_acc(feats, np.array([0, 1, 0, 1]))
    assert acc2 < 1.0 and loss2 > loss


# -- EMD ---------------------------------------------------------------------------------------
def test_emd_identical_sets():
    p = np.random.default_rng(0).normal(size=(4, 3))
    assert sim.solve_emd(sim.TransportProblem(p, p))[1] == pytest.approx(0.0, abs=1e-12)


def test_emd_singletons():
    emd = sim.solve_emd(sim.TransportProblem([[0.0, 0.0]], [[3.0, 4.0]]))[1]
    assert emd == pytest.approx(5.0, abs=1e-12)
    assert sim.domain_similarity(emd) == pytest.approx(0.9048, abs=1e-4)


def test_emd_two_by_two():
    flow, emd = sim.solve_emd(sim.TransportProblem([[0.0, 0.0], [1.0, 0.0]],
                                                   [[0.0, 0.0], [0.0, 1.0]]))
    assert emd == pytest.approx(0.5 * math.sqrt(2), abs=1e-12)
    np.testing.assert_allclose(flow, [[0.5, 0.0], [0.0, 0.5]], atol=1e-12)


def _corpus(n, seed):
    r = np.random.default_rng(seed)
    for _ in range(n):
        m, k = r.integers(1, 5, size=2)
        yield r.normal(size=(m, 3)), r.normal(size=(k, 3))


def test_emd_matches_vertex_enumeration():
    for a, b in _corpus(200, 2024):
        prob = sim.TransportProblem(a, b)
        ref = brute_force_transport(prob.source_weights, prob.target_weights, prob.cost)
        assert sim.solve_emd(prob)[1] == pytest.approx(ref, abs=1e-9)


def test_emd_matches_vertex_enumeration_weighted():
    r = np.random.default_rng(5)
    for _ in range(50):
        m, k = r.integers(1, 5, size=2)
        wa = r.integers(1, 6, size=m).astype(float)
        wb = r.integers(1, 6, size=k).astype(float)
        prob = sim.TransportProblem(r.normal(size=(m, 2)), r.normal(size=(k, 2)),
                                    wa / wa.sum(), wb / wb.sum())
        ref = brute_force_transport(prob.source_weights, prob.target_weights, prob.cost)
        assert sim.solve_emd(prob)[1] == pytest.approx(ref, abs=1e-9)


def test_emd_flows_are_feasible_and_symmetric():
    for a, b in _corpus(50, 7):
        prob = sim.TransportProblem(a, b)
        flow, emd = sim.solve_emd(prob)
        assert (flow >= -1e-15).all()
        np.testing.assert_allclose(flow.sum(axis=1), prob.source_weights, atol=1e-12)
        np.testing.assert_allclose(flow.sum(axis=0), prob.target_weights, atol=1e-12)
        assert sim.solve_emd(sim.TransportProblem(b, a))[1] == pytest.approx(emd, abs=1e-12)


def test_emd_scales_to_larger_problems():
    r = np.random.default_rng(9)
    a, b = r.normal(size=(20, 8)), r.normal(size=(15, 8))
    prob = sim.TransportProblem(a, b)
    flow, emd = sim.solve_emd(prob)
    # scipy's LP solver as a second, independent optimum
    from scipy.optimize import linprog
    m, k = prob.cost.shape
    a_eq = np.zeros((m + k, m * k))
    for i in range(m):
        a_eq[i, i * k:(i + 1) * k] = 1
    for j in range(k):
        a_eq[m + j, j::k] = 1
    res = linprog(prob.cost.ravel(), A_eq=a_eq,
                  b_eq=np.concatenate([prob.source_weights, prob.target_weights]), method="highs")
    assert emd == pytest.approx(res.fun, abs=1e-9)


def test_emd_errors():
    with pytest.raises(InputError):
        sim.TransportProblem(np.zeros((0, 2)), np.zeros((1, 2)))
    with pytest.raises(InputError):
        sim.TransportProblem([[0.0, 0.0]], [[1.0, 1.0]], [0.7], [1.0])
    with pytest.raises(InputError):
        sim.TransportProblem([[0.0, 0.0]], [[1.0, 1.0, 1.0]])
    with pytest.raises(InputError):
        sim.TransportProblem([[0.0], [1.0]], [[1.0]], [1.5, -0.5], [1.0])


def test_domain_similarity_examples():
    assert sim.domain_similarity(0.0) == 1.0
    assert sim.domain_similarity(34.66, 0.02) == pytest.approx(0.5, abs=1e-4)
    with pytest.raises(InputError):
        sim.domain_similarity(-1.0)


# -- batch statistics profiles -----------------------------------------------------------------
def test_constant_zero_dataset():
    bb = nn.Backbone(seed=0)
    prof = sim.profile_batch_stats(bb, np.zeros((6, 3, 8, 8)), "block0", samples=5)
    np.testing.assert_array_equal(prof.values, 0.0)
    assert prof.mode == pytest.approx(0.0, abs=1e-6)


def test_profile_does_not_touch_backbone():
    bb = nn.Backbone(seed=0)
    before = bb.state_dict()
    sim.profile_batch_stats(bb, np.random.default_rng(0).normal(size=(10, 3, 8, 8)), samples=3)
    for k, v in bb.state_dict().items():
        np.testing.assert_array_equal(v, before[k])


def test_profile_rows_and_csv(tmp_path):
    bb = nn.Backbone(seed=0)
    x = np.random.default_rng(0).normal(size=(30, 3, 8, 8))
    prof = sim.profile_batch_stats(bb, x, "all", "var", samples=100)
    assert len(prof.rows) == 100 * sum(bb.widths)
    assert prof.hist_counts.sum() == len(prof.values)
    assert np.trapezoid(prof.density, prof.grid) == pytest.approx(1.0, abs=0.02)
    prof.write_stats_csv(tmp_path / "s.csv")
    prof.write_kde_csv(tmp_path / "k.csv")
    with open(tmp_path / "s.csv") as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == ["sample", "layer", "channel", "mean", "var"] and len(rows) == len(prof.rows) + 1


def test_stored_statistics_mode():
    bb = nn.Backbone(seed=0)
    prof = sim.profile_batch_stats(bb, np.zeros((2, 3, 4, 4)), "block1", "var", samples=0)
    np.testing.assert_array_equal(prof.values, 1.0)


def test_profile_errors():
    bb = nn.Backbone(seed=0)
    with pytest.raises(ConfigurationError):
        sim.profile_batch_stats(bb, np.zeros((4, 3, 8, 8)), "block9")
    with pytest.raises(ConfigurationError):
        sim.profile_batch_stats(bb, np.zeros((4, 3, 8, 8)), statistic="median")
    with pytest.raises(InputError):
        sim.profile_batch_stats(bb, np.zeros((0, 3, 8, 8)))

    class NoNorm:
        def batchnorms(self):
            return []
    with pytest.raises(ConfigurationError):
        sim.profile_batch_stats(NoNorm(), np.zeros((4, 3, 8, 8)))


def test_kde_modes_follow_channel_offset():
    """Per channel, the KDE of 100 sampled first-block means moves by at least the offset."""
    cfg = RunConfig()
    bb = nn.Backbone(cfg.widths, seed=0)
    modes = {}
    for s in (0.0, 1.0):
        spec = data.DomainSpec(1, s, **cfg.domain_kwargs())
        imgs = data.generate_dataset(spec, data.source_classes(20), 5, seed=0).images
        prof = sim.profile_batch_stats(bb, imgs, "block0", "mean", samples=100,
                                       rng=np.random.default_rng(0))
        per_channel = np.array([r[3] for r in prof.rows]).reshape(100, -1)
        modes[s] = []
        for col in per_channel.T:
            grid = np.linspace(col.min() - 1, col.max() + 1, 400)
            modes[s].append(grid[np.argmax(sim.gaussian_kde_silverman(col, grid))])
    gap = np.abs(np.array(modes[1.0]) - np.array(modes[0.0]))
    assert gap.max() >= cfg.offset_magnitude
