import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from momar.evaluators import (EvalConfig, EvalModel, GaussianStats, StudyCell, StudyReport,
                              ci95, clip_score, contrastive_loss, dual_eval_study, fid,
                              fid_from_embeddings, gaussian_stats, load_evaluator, matching_score,
                              metrics_report, multimodality, r_precision, save_evaluator)
from momar.numerics import Parameter, Tensor, make_rng
from momar.numerics.tensor import ShapeError
from momar.text import Vocab

from oracles import fid_oracle, random_spd


def unit_rows(x):
    return x / np.linalg.norm(x, axis=1, keepdims=True)


class TestFid:
    def test_identical_zero(self):
        rng = np.random.default_rng(0)
        for d in (2, 8, 16):
            s = GaussianStats(rng.normal(size=d), random_spd(rng, d))
            assert abs(fid(s, s)) < 1e-8

    def test_one_dim_closed_form(self):
        a = GaussianStats(np.array([0.0]), np.array([[1.0]]))
        b = GaussianStats(np.array([1.0]), np.array([[1.0]]))
        assert fid(a, b) == pytest.approx(1.0, abs=1e-12)
        c = GaussianStats(np.array([2.0]), np.array([[4.0]]))
        assert fid(a, c) == pytest.approx(4.0 + (1.0 - 2.0) ** 2, abs=1e-12)

    def test_against_extended_precision_oracle(self):
        rng = np.random.default_rng(1)
        for _ in range(20):
            d = int(rng.integers(2, 17))
            ca, cb = random_spd(rng, d), random_spd(rng, d)
            ma, mb = rng.normal(size=(2, d))
            got = fid(GaussianStats(ma, ca), GaussianStats(mb, cb))
            assert abs(got - fid_oracle(ma, ca, mb, cb)) < 1e-6

    @settings(max_examples=30, deadline=None)
    @given(st.integers(2, 10), st.integers(0, 2**31))
    def test_symmetric_nonnegative(self, d, seed):
        rng = np.random.default_rng(seed)
        a = GaussianStats(rng.normal(size=d), random_spd(rng, d))
        b = GaussianStats(rng.normal(size=d), random_spd(rng, d))
        assert abs(fid(a, b) - fid(b, a)) < 1e-8
        assert fid(a, b) >= -1e-8

    def test_singular_covariance(self):
        # rank-deficient covariances exercise the eigenvalue clamp
        emb = np.random.default_rng(2).normal(size=(3, 8))
        assert abs(fid_from_embeddings(emb, emb)) < 1e-8

    def test_width_mismatch(self):
        with pytest.raises(ShapeError):
            fid(GaussianStats(np.zeros(2), np.eye(2)), GaussianStats(np.zeros(3), np.eye(3)))

    def test_stats_need_two(self):
        with pytest.raises(ValueError):
            gaussian_stats(np.zeros((1, 4)))
        s = gaussian_stats(np.random.default_rng(3).normal(size=(50, 4)))
        assert np.array_equal(s.cov, s.cov.T)


class TestRetrieval:
    def test_aligned_top1(self):
        emb = np.eye(40)
        r = r_precision(emb, emb, make_rng(0, "t"))
        assert r.tolist() == [1.0, 1.0, 1.0]

    def test_random_near_chance(self):
        rng = np.random.default_rng(4)
        n = 4000
        m, t = unit_rows(rng.normal(size=(n, 16))), unit_rows(rng.normal(size=(n, 16)))
        r1, r2, r3 = r_precision(m, t, make_rng(0, "chance"))
        se = math.sqrt((1 / 32) * (31 / 32) / n)
        assert abs(r1 - 1 / 32) < 3 * se
        assert r1 <= r2 <= r3

    def test_pool_larger_than_set(self):
        with pytest.raises(ValueError):
            r_precision(np.eye(8), np.eye(8), make_rng(0, "p"))

    def test_matching_identical(self):
        emb = unit_rows(np.random.default_rng(5).normal(size=(10, 4)))
        assert matching_score(emb, emb) == 0.0

    def test_clip_identical_and_orthogonal(self):
        emb = np.eye(6)
        assert clip_score(emb, emb) == pytest.approx(1.0, abs=1e-12)
        assert clip_score(emb, np.roll(emb, 1, axis=1)) == pytest.approx(0.0, abs=1e-12)

    def test_multimodality(self):
        frozen = [np.repeat(np.ones((1, 4)), 10, axis=0) for _ in range(3)]
        assert multimodality(frozen) == 0.0
        pair = [np.array([[0.0, 0.0], [3.0, 4.0]])]
        assert multimodality(pair) == pytest.approx(5.0)
        with pytest.raises(ValueError):
            multimodality([np.zeros((1, 2))])

    def test_ci95(self):
        assert ci95([1.0]) == 0.0
        assert ci95([0.0, 2.0]) == pytest.approx(1.96 * math.sqrt(2) / math.sqrt(2))


class TestContrastive:
    def test_perfect_alignment(self):
        emb = Tensor(np.eye(8))
        loss = contrastive_loss(emb, emb, Parameter(np.array(math.log(100.0))))
        assert float(loss.data) < 1e-30

    def test_shuffled_pairs_chance(self):
        rng = np.random.default_rng(6)
        vals = []
        for _ in range(20):
            m = Tensor(unit_rows(rng.normal(size=(64, 32))))
            t = Tensor(unit_rows(rng.normal(size=(64, 32))))
            vals.append(float(contrastive_loss(m, t, Parameter(np.array(0.0))).data))
        # logsumexp of near-zero logits: ln B plus half the logit variance (1/32)
        assert np.mean(vals) == pytest.approx(math.log(64) + 1 / 64, abs=0.02)

    def test_batch_of_one(self):
        with pytest.raises(ValueError):
            contrastive_loss(Tensor(np.eye(1)), Tensor(np.eye(1)), Parameter(np.array(0.0)))

    def test_duplicate_captions_share_mass(self):
        emb = Tensor(np.array([[1.0, 0.0], [1.0, 0.0]]))
        same = np.ones((2, 2))
        loss = contrastive_loss(emb, emb, Parameter(np.array(math.log(100.0))), same)
        assert float(loss.data) == pytest.approx(math.log(2), abs=1e-12)


@pytest.fixture(scope="module")
def vocab():
    return Vocab(["walk", "run", "jump", "a", "person"])


@pytest.mark.parametrize("kind", ["transformer", "conv"])
class TestEvalModel:
    def test_unit_norm_embeddings(self, kind, vocab):
        model = EvalModel(EvalConfig(6, len(vocab), kind=kind, width=16, heads=2), make_rng(0, "m"))
        rng = np.random.default_rng(7)
        frames = [rng.normal(size=(n, 6)) for n in (5, 9, 16)]
        m = model.embed_motions(frames)
        t = model.embed_texts(vocab, [["a", "person", "walk"], ["run"], ["jump", "jump"]])
        assert m.shape == t.shape == (3, 32)
        np.testing.assert_allclose(np.linalg.norm(m, axis=1), 1.0, atol=1e-12)
        np.testing.assert_allclose(np.linalg.norm(t, axis=1), 1.0, atol=1e-12)

    def test_padding_does_not_leak(self, kind, vocab):
        model = EvalModel(EvalConfig(6, len(vocab), kind=kind, width=16, heads=2), make_rng(1, "m"))
        rng = np.random.default_rng(8)
        short = rng.normal(size=(8, 6))
        alone = model.embed_motions([short])
        batched = model.embed_motions([short, rng.normal(size=(40, 6))])
        np.testing.assert_allclose(batched[0], alone[0], atol=1e-12)

    def test_width_checked(self, kind, vocab):
        model = EvalModel(EvalConfig(6, len(vocab), kind=kind, width=16, heads=2), make_rng(2, "m"))
        with pytest.raises(ShapeError):
            model.embed_motions([np.zeros((8, 7))])

    def test_checkpoint_roundtrip(self, kind, vocab, tmp_path):
        model = EvalModel(EvalConfig(6, len(vocab), kind=kind, width=16, heads=2), make_rng(3, "m"))
        save_evaluator(tmp_path / "ev.ckpt", model)
        back = load_evaluator(tmp_path / "ev.ckpt")
        frames = [np.random.default_rng(9).normal(size=(12, 6))]
        assert np.array_equal(model.embed_motions(frames), back.embed_motions(frames))
        assert back.config == model.config


class TestReport:
    def test_fields_and_self_fid(self):
        rng = np.random.default_rng(10)
        real = unit_rows(rng.normal(size=(64, 8)))
        text = unit_rows(real + 0.1 * rng.normal(size=real.shape))
        rep = metrics_report(real, real, text, seed=0, repeats=1)
        assert set(rep) >= {"fid", "r1", "r2", "r3", "matching", "multimodality", "clip_score",
                            "n", "seed", "ci95"}
        assert abs(rep["fid"]) < 1e-8
        rep20 = metrics_report(real, real, text, seed=0)
        assert rep20 == metrics_report(real, real, text, seed=0)
        assert set(rep20["ci95"]) == {"fid", "r1", "r2", "r3", "matching", "clip_score"}

    def test_study_needs_both(self, vocab):
        with pytest.raises(ValueError):
            dual_eval_study(None, None, vocab, [], [], [], [], 0)

    def test_ordering(self):
        base = StudyCell("essential", "add_noise", 0.0, 1.0, 1.0, 0.5, 0.5)
        rep = StudyReport(base, [StudyCell("redundant", "replace", 1.0, 5.0, 1.2, 0.1, 0.4)])
        assert rep.cell("redundant", "replace").inflation(base) == (5.0, 1.2)
        assert rep.ordering_holds()
        with pytest.raises(KeyError):
            rep.cell("essential", "replace")
