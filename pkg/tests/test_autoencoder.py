import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from momar.autoencoder import (AE_PRESETS, AeConfig, AeTrainConfig, AutoEncoder, LatentSequence, decode,
                               encode, load_ae, mpjpe, pad_to_factor, recon_metrics, save_ae, train_ae)
from momar.motion import SynthConfig, compute_norm_stats, normalize, synth_dataset
from momar.numerics import Tensor, check_gradients, make_rng


def small_ae(width=6, **kw):
    return AutoEncoder(AeConfig(width, latent_width=3, channels=8, **kw), make_rng(0, "ae-test"))


class TestPadding:
    def test_multiple_untouched(self):
        x = np.arange(16.0).reshape(8, 2)
        assert pad_to_factor(x, 4) is x

    def test_edge_replicated(self):
        x = np.arange(10.0).reshape(5, 2)
        out = pad_to_factor(x, 4)
        assert out.shape == (8, 2)
        assert np.all(out[5:] == x[-1])

    def test_too_short(self):
        with pytest.raises(ValueError):
            pad_to_factor(np.zeros((3, 2)), 4)

    def test_factor_power_of_two(self):
        with pytest.raises(ValueError):
            AeConfig(4, factor=3)


class TestShapes:
    @settings(max_examples=20, deadline=None)
    @given(st.integers(4, 40))
    def test_lengths(self, n):
        model = small_ae()
        x = np.random.default_rng(n).normal(size=(n, 6))
        lat = encode(model, x)
        assert lat.latents.shape == (-(-n // 4), 3)
        assert lat.source_length == n
        assert decode(model, lat).shape == (n, 6)

    def test_factor_two_and_eight(self):
        for factor in (2, 8):
            model = small_ae(factor=factor)
            lat = encode(model, np.zeros((17, 6)))
            assert lat.latents.shape[0] == -(-17 // factor)
            assert decode(model, lat).shape == (17, 6)

    def test_wrong_width(self):
        with pytest.raises(ValueError):
            encode(small_ae(), np.zeros((8, 5)))

    def test_latent_too_short(self):
        with pytest.raises(ValueError):
            LatentSequence(np.zeros((2, 3)), 9, 4)

    def test_presets(self):
        assert AE_PRESETS["full"]["latent_width"] == 512
        assert AE_PRESETS["desk"]["latent_width"] == 16


def test_full_autoencoder_gradcheck():
    model = small_ae(resblocks=1)
    x = np.random.default_rng(1).normal(size=(2, 8, 6))
    w = np.random.default_rng(2).normal(size=(2, 8, 6))
    params = model.named_parameters()
    # h=1e-5 steps across ReLU kinks for some bias entries; 1e-6 stays on one side
    errs = check_gradients(lambda: (model(Tensor(x)) * w).sum(), params, h=1e-6, max_entries=6,
                           rng=np.random.default_rng(0))
    assert max(errs.values()) < 1e-4, errs


def test_checkpoint_roundtrip(tmp_path):
    model = small_ae(resblocks=2)
    save_ae(tmp_path / "ae.ckpt", model)
    back = load_ae(tmp_path / "ae.ckpt")
    assert back.config == model.config
    x = np.random.default_rng(3).normal(size=(12, 6))
    assert np.array_equal(decode(model, encode(model, x)), decode(back, encode(back, x)))


@pytest.fixture(scope="module")
def tiny_data():
    ds = synth_dataset(SynthConfig(count=40, length_range=(16, 32)), 0)
    ess = [s.essential for s in ds]
    stats = compute_norm_stats(ess)
    return [normalize(m, stats) for m in ess], stats


def test_short_training_reduces_loss_and_is_deterministic(tiny_data):
    seqs, _ = tiny_data
    frames = [m.frames for m in seqs]
    cfg = AeConfig(16, latent_width=8, channels=16)
    train = AeTrainConfig(steps=60, batch_size=8, crop=16, warmup=5, log_every=0)
    m1, h1 = train_ae(frames, cfg, train, seed=0)
    m2, h2 = train_ae(frames, cfg, train, seed=0)
    assert h1.losses == h2.losses
    assert np.mean(h1.losses[-10:]) < np.mean(h1.losses[:10])
    assert h1.steps == 60


def test_time_budget_stops_early(tiny_data):
    seqs, _ = tiny_data
    cfg = AeConfig(16, latent_width=8, channels=16)
    _, hist = train_ae([m.frames for m in seqs], cfg,
                       AeTrainConfig(steps=10_000, batch_size=4, crop=16, time_budget=0.0, log_every=0), 0)
    assert hist.steps == 1


def test_training_input_checks(tiny_data):
    with pytest.raises(ValueError):
        train_ae([], AeConfig(16), AeTrainConfig(), 0)
    with pytest.raises(ValueError):
        train_ae([np.zeros((16, 16))], AeConfig(16), AeTrainConfig(crop=18), 0)


def test_recon_metrics_exact_reconstruction(tiny_data, monkeypatch):
    seqs, stats = tiny_data
    model = AutoEncoder(AeConfig(16, latent_width=8, channels=16), make_rng(0, "m"))
    import momar.autoencoder as ae_mod
    monkeypatch.setattr(ae_mod, "decode", lambda m, lat, length=None: seqs_by_len[lat.source_length])
    seqs_by_len = {}
    for m in seqs[:5]:
        seqs_by_len[m.frames.shape[0]] = m.frames
    sub = [m for m in seqs[:5] if seqs_by_len[m.frames.shape[0]] is m.frames]
    rep = recon_metrics(model, sub, stats)
    assert rep == {"l1": 0.0, "mpjpe": 0.0}


def test_mpjpe():
    a = np.zeros((2, 3, 3))
    b = a.copy()
    b[..., 0] = 3.0
    b[..., 1] = 4.0
    assert mpjpe(a, b) == 5.0
