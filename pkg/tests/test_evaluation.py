from __future__ import annotations

import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import one_hot_labels, random_rigid
from limbfit.errors import NonSquare, NoVisibleJoints, ValidationError
from limbfit.evaluation import hungarian, match_keypoints, matched_mpjpe, mpjpe, perturb_recovery
from limbfit.optim import OptimConfig


def brute_force(C):
    n = len(C)
    return min(sum(C[i, p[i]] for i in range(n)) for p in itertools.permutations(range(n)))


class TestHungarian:
    def test_diagonal_cheapest(self):
        C = np.ones((4, 4)) - np.eye(4)
        a = hungarian(C)
        np.testing.assert_array_equal(a.cols, np.arange(4))
        assert a.cost == 0.0

    def test_hand_example(self):
        a = hungarian([[1.0, 2.0], [3.0, 0.0]])
        np.testing.assert_array_equal(a.cols, [0, 1])
        assert a.cost == 1.0

    def test_zero_permutation(self):
        pi = np.array([2, 0, 3, 1])
        C = np.ones((4, 4))
        C[np.arange(4), pi] = 0.0
        a = hungarian(C)
        np.testing.assert_array_equal(a.cols, pi)
        assert a.cost == 0.0

    def test_ties_prefer_lower_indices(self):
        np.testing.assert_array_equal(hungarian(np.zeros((3, 3))).cols, [0, 1, 2])

    def test_empty(self):
        assert hungarian(np.zeros((0, 0))).cost == 0.0

    def test_errors(self):
        with pytest.raises(NonSquare):
            hungarian(np.zeros((2, 3)))
        with pytest.raises(ValidationError):
            hungarian([[np.inf, 0.0], [0.0, 0.0]])

    @settings(max_examples=200, deadline=None)
    @given(st.integers(1, 7), st.integers(0, 10**6), st.sampled_from(["uniform", "integer", "negative"]))
    def test_matches_brute_force(self, n, seed, kind):
        rng = np.random.default_rng(seed)
        if kind == "uniform":
            C = rng.uniform(0, 1, size=(n, n))
        elif kind == "integer":
            C = rng.integers(0, 4, size=(n, n)).astype(float)
        else:
            C = rng.normal(0, 100, size=(n, n))
        a = hungarian(C)
        assert sorted(a.cols.tolist()) == list(range(n))
        assert a.cost == pytest.approx(float(C[np.arange(n), a.cols].sum()), abs=1e-9)
        assert a.cost == pytest.approx(brute_force(C), abs=1e-9)

    def test_large_has_no_improving_swap(self):
        C = np.random.default_rng(0).uniform(size=(60, 60))
        cols = hungarian(C).cols
        base = C[np.arange(60), cols]
        # exchanging the columns of any two rows never lowers an optimal cost
        swap = C[:, cols]
        gain = swap + swap.T - base[:, None] - base[None, :]
        assert gain.min() >= -1e-12


class TestMPJPE:
    def test_equal(self):
        gt = np.random.default_rng(0).normal(size=(13, 3))
        assert mpjpe(gt, gt) == 0.0 and matched_mpjpe(gt, gt) == 0.0

    def test_uniform_offset(self):
        gt = np.random.default_rng(1).normal(size=(13, 3))
        assert mpjpe(gt + [0.03, 0.0, 0.0], gt) == pytest.approx(0.03, abs=1e-15)

    def test_single_visible_joint(self):
        gt = np.zeros((13, 3))
        pred = np.random.default_rng(2).normal(size=(13, 3))
        pred[3] = [0.0, 0.05, 0.0]
        vis = np.zeros(13, bool)
        vis[3] = True
        assert mpjpe(pred, gt, vis) == pytest.approx(0.05)

    def test_visibility_formula(self):
        rng = np.random.default_rng(3)
        gt, pred = rng.normal(size=(13, 3)), rng.normal(size=(13, 3))
        vis = rng.random(13) < 0.5
        vis[0] = True
        expected = np.sum(vis * np.linalg.norm(gt - pred, axis=1)) / vis.sum()
        assert mpjpe(pred, gt, vis) == pytest.approx(expected, rel=1e-12)

    def test_no_visible(self):
        with pytest.raises(NoVisibleJoints):
            mpjpe(np.zeros((3, 3)), np.zeros((3, 3)), np.zeros(3, bool))
        with pytest.raises(NoVisibleJoints):
            matched_mpjpe(np.zeros((3, 3)), np.zeros((3, 3)), np.zeros(3, bool))

    def test_permuted(self):
        gt = np.random.default_rng(4).normal(size=(13, 3))
        perm = np.random.default_rng(5).permutation(13)
        assert matched_mpjpe(gt[perm], gt) == 0.0

    def test_invisible_gt_excluded_from_matching(self):
        gt = np.array([[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [5.0, 0.0, 0.0]])
        pred = np.array([[1.0, 0.0, 0.0], [9.0, 0.0, 0.0], [0.1, 0.0, 0.0]])
        vis = np.array([True, True, False])
        cols = match_keypoints(pred, gt, vis)
        np.testing.assert_array_equal(cols, [2, 0])
        assert matched_mpjpe(pred, gt, vis) == pytest.approx(0.05)

    @settings(max_examples=50, deadline=None)
    @given(st.integers(0, 10**6))
    def test_properties(self, seed):
        rng = np.random.default_rng(seed)
        gt, pred = rng.normal(size=(13, 3)), rng.normal(size=(13, 3))
        vis = rng.random(13) < 0.7
        vis[rng.integers(13)] = True
        base = mpjpe(pred, gt, vis)
        assert matched_mpjpe(pred, gt, vis) <= base + 1e-12
        R, t = random_rigid(rng)
        assert mpjpe(pred @ R.T + t, gt @ R.T + t, vis) == pytest.approx(base, abs=1e-9)
        s, c = rng.uniform(0.1, 10), rng.normal(size=3)
        assert mpjpe(c + s * (pred - c), c + s * (gt - c), vis) == pytest.approx(s * base, rel=1e-9)
        perm = rng.permutation(13)
        assert matched_mpjpe(pred[perm], gt, vis) == matched_mpjpe(pred, gt, vis)


class TestPerturbRecovery:
    def _inputs(self, sequence, topo):
        clouds = sequence.clouds[:2]
        Ws = [one_hot_labels(c.gt_label, topo.num_classes) for c in clouds]
        return clouds, sequence.poses[:2], Ws

    def test_zero_sigma(self, sequence, topo):
        clouds, gt, Ws = self._inputs(sequence, topo)
        rep = perturb_recovery(clouds, gt, Ws, topo, 0.0, np.random.default_rng(0), optim_config=OptimConfig(iterations=10))
        assert rep.initial_mpjpe == 0.0 and rep.initial_matched_mpjpe == 0.0
        # the optimizer may drift off the ground truth; only report it
        assert np.isfinite(rep.final_mpjpe) and rep.final_mpjpe < 0.02

    def test_six_cm_improves(self, sequence, topo):
        clouds, gt, Ws = self._inputs(sequence, topo)
        rep = perturb_recovery(clouds, gt, Ws, topo, 0.06, np.random.default_rng(1))
        assert rep.final_matched_mpjpe < rep.initial_matched_mpjpe and rep.improved
        for v in (rep.initial_mpjpe, rep.final_mpjpe, rep.initial_matched_mpjpe, rep.final_matched_mpjpe, rep.reduction):
            assert np.isfinite(v)
        assert len(rep.trace) == 101

    def test_negative_sigma(self, sequence, topo):
        clouds, gt, Ws = self._inputs(sequence, topo)
        with pytest.raises(ValidationError):
            perturb_recovery(clouds, gt, Ws, topo, -0.1, np.random.default_rng(0))
