import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from momar.motion import FeatureLayout, LayoutError
from momar.vq import (dump_histogram, kl_vs_uniform, kmeans, loss_decomposition, quantize,
                      usage_histogram, voronoi_check)

finite = st.floats(-50, 50, allow_nan=False)


class TestQuantize:
    def test_two_codes(self):
        idx, emb = quantize(np.array([1.0]), np.array([[0.0], [10.0]]))
        assert idx == 0 and emb[0] == 0.0

    def test_exact_entry(self):
        cb = np.random.default_rng(0).normal(size=(8, 3))
        idx, emb = quantize(cb[3], cb)
        assert idx == 3
        assert np.sum((emb - cb[3]) ** 2) == 0.0

    def test_tie_goes_to_lowest_index(self):
        cb = np.array([[1.0], [-1.0]])
        idx, _ = quantize(np.array([0.0]), cb)
        assert idx == 0
        cb = np.array([[5.0, 0.0], [0.0, 1.0], [0.0, -1.0]])
        idx, _ = quantize(np.zeros(2), cb)
        assert idx == 1

    def test_brute_force_scan(self):
        rng = np.random.default_rng(1)
        cb = rng.normal(size=(64, 4))
        z = rng.normal(size=(200, 4))
        idx, _ = quantize(z, cb)
        for i, row in enumerate(z):
            dists = [float(np.sum((row - c) ** 2)) for c in cb]
            best = min(range(64), key=lambda j: (dists[j], j))
            assert idx[i] == best

    def test_batched_shape(self):
        cb = np.eye(3)
        idx, emb = quantize(np.zeros((2, 5, 3)) + 0.9 * np.eye(3)[0], cb)
        assert idx.shape == (2, 5) and emb.shape == (2, 5, 3)
        assert np.all(idx == 0)

    def test_empty_codebook_rejected(self):
        with pytest.raises(ValueError):
            quantize(np.zeros(2), np.zeros((0, 2)))

    @settings(max_examples=50, deadline=None)
    @given(arrays(np.float64, (6, 3), elements=finite, unique=True))
    def test_idempotent(self, cb):
        # distinct rows so every entry is its own nearest code
        if len({tuple(r) for r in cb}) < len(cb):
            return
        for k in range(len(cb)):
            assert quantize(cb[k], cb)[0] == k


class TestUsage:
    def test_uniform_kl_zero(self):
        assert kl_vs_uniform(np.full(16, 1 / 16)) == pytest.approx(0.0, abs=1e-12)

    def test_one_hot_kl_log_k(self):
        p = np.zeros(16)
        p[5] = 1.0
        assert kl_vs_uniform(p) == pytest.approx(np.log(16), abs=1e-12)

    @settings(max_examples=100, deadline=None)
    @given(arrays(np.float64, 8, elements=st.floats(0, 10)))
    def test_kl_nonnegative(self, w):
        if w.sum() <= 0:
            return
        p = w / w.sum()
        kl = kl_vs_uniform(p)
        assert kl >= -1e-12
        if not np.allclose(p, 1 / 8, atol=1e-9):
            assert kl > 0

    def test_histogram_sums_to_one(self):
        rng = np.random.default_rng(2)
        cb = rng.normal(size=(10, 2))
        counts, freq = usage_histogram(rng.normal(size=(500, 2)), cb)
        assert counts.sum() == 500
        assert freq.sum() == pytest.approx(1.0, abs=1e-12)

    def test_histogram_uniform_by_construction(self):
        cb = np.eye(4)
        counts, freq = usage_histogram(np.repeat(cb, 3, axis=0), cb)
        assert counts.tolist() == [3, 3, 3, 3]
        assert kl_vs_uniform(freq) == pytest.approx(0.0, abs=1e-12)

    def test_empty_dataset(self):
        with pytest.raises(ValueError):
            usage_histogram(np.zeros((0, 2)), np.eye(2))

    def test_dump_format(self):
        text = dump_histogram(np.array([1, 3]))
        assert text == "0 1 0.25\n1 3 0.75\n"


class TestKmeans:
    def test_recovers_separated_clusters(self):
        rng = np.random.default_rng(3)
        centers = np.array([[0.0, 0.0], [10.0, 0.0], [0.0, 10.0]])
        data = np.concatenate([c + 0.1 * rng.normal(size=(50, 2)) for c in centers])
        cb = kmeans(data, 3, np.random.default_rng(4), iters=10)
        for c in centers:
            assert np.min(np.linalg.norm(cb - c, axis=1)) < 0.1

    def test_no_duplicate_entries(self):
        data = np.random.default_rng(5).normal(size=(400, 4))
        cb = kmeans(data, 16, np.random.default_rng(6))
        for a, b in itertools.combinations(range(16), 2):
            assert np.max(np.abs(cb[a] - cb[b])) > 1e-12

    def test_too_few_samples(self):
        with pytest.raises(ValueError):
            kmeans(np.zeros((3, 2)), 4, np.random.default_rng(0))


class TestVoronoi:
    def test_plus_minus_one(self):
        cb = np.array([[1.0], [-1.0]])
        assert quantize(np.array([0.2]), cb)[0] == 0
        assert voronoi_check(cb, np.array([[0.2]])).ok

    def test_bisector_sample(self):
        cb = np.array([[1.0], [-1.0]])
        rep = voronoi_check(cb, np.array([[0.0]]))
        assert rep.ok and rep.checked == 1

    def test_random_thousand(self):
        rng = np.random.default_rng(7)
        rep = voronoi_check(rng.normal(size=(16, 3)), rng.normal(size=(1000, 3)))
        assert rep.checked == 1000 and rep.ok and rep.violations == []

    def test_needs_two_codes(self):
        with pytest.raises(ValueError):
            voronoi_check(np.zeros((1, 2)), np.zeros((3, 2)))


@pytest.fixture
def layout():
    return FeatureLayout(5)


class TestLossDecomposition:
    def test_identical(self, layout):
        gt = np.random.default_rng(0).normal(size=(10, layout.width))
        split = loss_decomposition(gt, gt.copy(), layout)
        assert (split.full, split.essential, split.redundant) == (0.0, 0.0, 0.0)

    def test_redundant_only_error(self, layout):
        gt = np.random.default_rng(1).normal(size=(10, layout.width))
        pred = gt.copy()
        pred[:, layout.essential_width:] += 0.5
        split = loss_decomposition(gt, pred, layout)
        assert split.essential == 0.0
        assert split.full == split.redundant

    @pytest.mark.parametrize("kind", ["l1", "l2"])
    def test_additivity_random(self, layout, kind):
        rng = np.random.default_rng(2)
        gt, pred = rng.normal(size=(2, 30, layout.width))
        split = loss_decomposition(gt, pred, layout, kind=kind)
        diff = pred - gt
        per = np.abs(diff) if kind == "l1" else diff**2
        e = layout.essential_width
        # independent recomputation with compensated sums
        ess = math.fsum(per[:, :e].ravel())
        red = math.fsum(per[:, e:].ravel())
        assert split.essential == pytest.approx(ess, rel=1e-12)
        assert split.redundant == pytest.approx(red, rel=1e-12)
        assert abs(split.full - (split.essential + split.redundant)) <= 1e-12 * split.full

    def test_layout_mismatch(self, layout):
        with pytest.raises(LayoutError):
            loss_decomposition(np.zeros((3, layout.width)), np.zeros((3, layout.width - 1)), layout)
        with pytest.raises(LayoutError):
            loss_decomposition(np.zeros((3, 16)), np.zeros((3, 16)), layout.essential())
