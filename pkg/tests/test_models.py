import math

import numpy as np
import pytest

from oracles import central_diff, gauss_logpdf, mc_kl, rel_err
from precoder_forge import nn
from precoder_forge.dataset import PrecodingDataset, pack, pack_channel
from precoder_forge.errors import ConfigError, DimensionError, NonFiniteError
from precoder_forge.models import (TrainConfig, gaussian_log_density, kl_gaussians, kl_to_standard,
                                   load_model, loss_and_grad, make_model, reconstruct, reparameterize,
                                   sample_cvae, sample_vae, save_model, train, vlb_cvae, vlb_vae)
from precoder_forge.nn import GaussianHead
from precoder_forge.se import SystemConfig, antenna_powers


def tiny(kind, seed=0, hidden=(6, 5), d_model=3, n=2, q=1):
    return make_model(kind, n=n, q=q, d_model=d_model, hidden=hidden, activation="tanh", seed=seed)


def synthetic_dataset(n=2, q=1, num=40, channels=2, seed=0):
    rng = np.random.default_rng(seed)
    cfg = SystemConfig(q, n, 1.0, 1.0, -math.inf)
    Hs = [(rng.standard_normal((q, n)) + 1j * rng.standard_normal((q, n))) / math.sqrt(2)
          for _ in range(channels)]
    idx = np.arange(num) % channels
    w = 0.3 * rng.standard_normal((num, 2 * n * q)) + 0.5
    return PrecodingDataset(cfg, Hs, idx, w, np.zeros(num), -math.inf)


class TestKL:
    def test_standard_trivial(self):
        assert kl_to_standard(GaussianHead(np.zeros(64), 0.0)) == 0.0
        assert kl_to_standard(GaussianHead(np.array([1.0]), 0.0)) == 0.5

    def test_gaussians_trivial(self):
        h = GaussianHead(np.array([0.3, -1.0]), 0.7)
        assert kl_gaussians(h, h) == 0.0
        q, p = GaussianHead(np.zeros(1), 0.0), GaussianHead(np.zeros(1), 1.0)
        assert kl_gaussians(q, p) == pytest.approx(0.5 / math.e, abs=1e-15)
        assert kl_gaussians(q, p) == pytest.approx(0.18393972058572117, abs=1e-15)
        mc, se = mc_kl(np.zeros(1), 0.0, np.zeros(1), 1.0, 100000, np.random.default_rng(1))
        assert abs(mc - 0.5 / math.e) <= 3 * se

    def test_monte_carlo(self):
        rng = np.random.default_rng(2)
        for _ in range(10):
            d = int(rng.integers(1, 6))
            mq, mp = rng.standard_normal(d), rng.standard_normal(d)
            lq, lp = rng.uniform(-1, 1), rng.uniform(-1, 1)
            mc, se = mc_kl(mq, lq, np.zeros(d), 0.0, 100000, rng)
            assert abs(kl_to_standard(GaussianHead(mq, lq)) - mc) <= 3 * se
            mc, se = mc_kl(mq, lq, mp, lp, 100000, rng)
            assert abs(kl_gaussians(GaussianHead(mq, lq), GaussianHead(mp, lp)) - mc) <= 3 * se

    def test_nonnegative_batch(self):
        rng = np.random.default_rng(3)
        q = GaussianHead(rng.standard_normal((100, 4)), rng.uniform(-10, 10, 100))
        p = GaussianHead(rng.standard_normal((100, 4)), rng.uniform(-10, 10, 100))
        assert np.all(kl_to_standard(q) >= 0)
        assert np.all(kl_gaussians(q, p) >= -1e-12)

    def test_dimension_mismatch(self):
        with pytest.raises(DimensionError):
            kl_gaussians(GaussianHead(np.zeros(2), 0.0), GaussianHead(np.zeros(3), 0.0))


class TestReparameterize:
    def test_zero_noise(self):
        mu = np.array([1.0, -2.0])
        np.testing.assert_array_equal(reparameterize(GaussianHead(mu, 3.0), np.zeros(2)), mu)

    def test_clamp_floor(self):
        mu, eps = np.array([0.5]), np.array([2.0])
        z = reparameterize(GaussianHead(mu, nn.LOGVAR_MIN), eps)
        assert abs(z - mu)[0] <= math.exp(-5) * 2.0 + 1e-15

    def test_moments(self):
        rng = np.random.default_rng(4)
        mu = np.array([1.5, -0.5, 3.0])
        head = GaussianHead(np.tile(mu, (100000, 1)), np.full(100000, math.log(0.64)))
        z = reparameterize(head, rng.standard_normal((100000, 3)))
        np.testing.assert_allclose(z.mean(axis=0), mu, rtol=0.01)
        np.testing.assert_allclose(z.std(axis=0), 0.8, rtol=0.01)

    def test_length_mismatch(self):
        with pytest.raises(DimensionError):
            reparameterize(GaussianHead(np.zeros(3), 0.0), np.zeros(4))


def _identity_decoder_vae(W):
    model = make_model("vae", n=W.shape[0], q=W.shape[1], d_model=4, hidden=(3,), seed=0)
    for name in ("encoder", "decoder"):
        model.params(name).flat[...] = 0.0
    b_last = model.params("decoder").tensors()[-1]
    b_last[:-1] = pack(W)
    return model


class TestBound:
    def test_exact_decoder_standard_posterior(self):
        W = np.array([[1 + 1j], [0.5 - 2j]])
        model = _identity_decoder_vae(W)
        vlb, parts = vlb_vae(model, pack(W)[None], rng=np.random.default_rng(0))
        assert parts["kl"] == 0.0
        assert vlb == pytest.approx(-(4 / 2) * math.log(2 * math.pi), abs=1e-12)

    def test_vlb_below_importance_sampled_loglik(self):
        rng = np.random.default_rng(5)
        model = make_model("vae", n=1, q=1, d_model=2, hidden=(8,), activation="tanh", seed=3)
        x = np.array([[0.4, -0.3]])
        draws = rng.standard_normal((1000, 2))
        terms, _ = loss_and_grad(model, np.repeat(x, 1000, 0), noise=draws, need_grad=False)
        vlb_mean = terms["vlb"].mean()
        vlb_se = terms["vlb"].std(ddof=1) / math.sqrt(1000)
        # importance sampling with the encoder as proposal
        enc = nn.forward(model.spec("encoder"), model.params("encoder"), x)
        z = reparameterize(GaussianHead(np.repeat(enc.mean, 20000, 0), np.repeat(enc.log_variance, 20000)),
                           rng.standard_normal((20000, 2)))
        dec = nn.forward(model.spec("decoder"), model.params("decoder"), z)
        logw = (gaussian_log_density(np.repeat(x, 20000, 0), dec)
                + gauss_logpdf(z, 0.0, 0.0) - gauss_logpdf(z, enc.mean, float(enc.log_variance[0])))
        m = logw.max()
        loglik = m + math.log(np.mean(np.exp(logw - m)))
        assert vlb_mean <= loglik + 3 * vlb_se

    def test_cvae_matching_prior_gives_zero_kl(self):
        model = tiny("cvae", seed=1)
        d = model.d_data
        enc, pri = model.params("encoder").tensors(), model.params("prior").tensors()
        enc[0][:d] = 0.0
        enc[0][d:] = pri[0]
        for a, b in zip(enc[1:], pri[1:]):
            a[...] = b
        rng = np.random.default_rng(6)
        x, h = rng.standard_normal((5, d)), rng.standard_normal((5, d))
        vlb, parts = vlb_cvae(model, x, h, rng=rng)
        assert parts["kl"] == pytest.approx(0.0, abs=1e-12)
        assert vlb == pytest.approx(parts["recon"], abs=1e-12)

    def test_batch_of_one_is_per_sample(self):
        model = tiny("cvae", seed=2)
        rng = np.random.default_rng(7)
        x, h, eps = rng.standard_normal((3, 4)), rng.standard_normal((3, 4)), rng.standard_normal((3, 3))
        batch, _ = loss_and_grad(model, x, h, eps, need_grad=False)
        for i in range(3):
            one, _ = loss_and_grad(model, x[i:i + 1], h[i:i + 1], eps[i:i + 1], need_grad=False)
            assert one["vlb"][0] == pytest.approx(batch["vlb"][i], rel=1e-13)

    def test_kind_checks(self):
        with pytest.raises(ConfigError):
            vlb_vae(tiny("cvae"), np.zeros((1, 4)))
        with pytest.raises(ConfigError):
            vlb_cvae(tiny("vae"), np.zeros((1, 4)), np.zeros((1, 4)))
        with pytest.raises(ConfigError):
            make_model("gan")


@pytest.mark.parametrize("kind", ["vae", "cvae"])
def test_loss_gradient_matches_finite_differences(kind):
    rng = np.random.default_rng(8)
    model = tiny(kind, seed=4)
    x, h = rng.standard_normal((4, 4)), rng.standard_normal((4, 4))
    eps = rng.standard_normal((4, 3))
    hb = h if kind == "cvae" else None
    _, grads = loss_and_grad(model, x, hb, eps, kl_weight=0.7)
    for name, g in grads.items():
        store = model.params(name)

        def f(flat):
            old = store.flat.copy()
            store.flat[...] = flat
            terms, _ = loss_and_grad(model, x, hb, eps, need_grad=False)
            store.flat[...] = old
            return float(np.mean(0.7 * terms["kl"] - terms["recon"]))

        assert rel_err(g, central_diff(f, store.flat, 1e-5)) <= 1e-5, name


class TestTraining:
    def test_deterministic_and_improves(self):
        ds = synthetic_dataset()
        logs = []
        for _ in range(2):
            model = tiny("vae", seed=1)
            logs.append(train(model, ds, TrainConfig(epochs=30, batch_size=8, lr=3e-3), seed=2).metrics)
        assert logs[0] == logs[1]
        assert logs[0][-1]["vlb"] > logs[0][0]["vlb"]
        assert set(logs[0][0]) >= {"epoch", "vlb", "kl", "recon", "val_recon_se"}

    def test_cvae_trains(self):
        ds = synthetic_dataset()
        result = train(tiny("cvae", seed=1), ds, TrainConfig(epochs=30, batch_size=8, lr=3e-3), seed=2)
        assert result.metrics[-1]["vlb"] > result.metrics[0]["vlb"]

    def test_kl_warmup(self):
        ds = synthetic_dataset()
        m = train(tiny("vae"), ds, TrainConfig(epochs=20, batch_size=8, kl_warmup=True), seed=0).metrics
        assert m[0]["kl_weight"] == 0.5 and m[1]["kl_weight"] == 1.0

    def test_dimension_mismatch(self):
        with pytest.raises(ConfigError):
            train(tiny("vae", n=3), synthetic_dataset(), TrainConfig(epochs=1))

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_non_finite_loss_aborts(self):
        ds = synthetic_dataset()
        ds.w[...] = 1e200
        with pytest.raises(NonFiniteError, match="epoch 0"):
            train(tiny("vae"), ds, TrainConfig(epochs=1, batch_size=8))


class TestSampling:
    cfg = SystemConfig(1, 2)

    def test_empty(self):
        assert sample_vae(tiny("vae"), 0, 1, self.cfg) == []
        assert sample_cvae(tiny("cvae"), np.ones((1, 2)), 0, 1, self.cfg) == []

    def test_feasible_and_deterministic(self):
        model = tiny("vae")
        model.params("decoder").tensors()[-1][:-1] = 5.0  # force infeasible raw outputs
        a = sample_vae(model, 20, 3, self.cfg)
        b = sample_vae(model, 20, 3, self.cfg)
        assert all(np.max(antenna_powers(W)) <= 1.0 for W in a)
        assert all(x.tobytes() == y.tobytes() for x, y in zip(a, b))
        raw = sample_vae(model, 20, 3, self.cfg, project=False)
        assert max(np.max(antenna_powers(W)) for W in raw) > 1.0

    def test_cvae_conditions(self):
        model = tiny("cvae")
        H = np.array([[1 + 1j, 0.5]])
        Ws = sample_cvae(model, H, 5, 0, self.cfg)
        assert len(Ws) == 5 and Ws[0].shape == (2, 1)
        with pytest.raises(DimensionError):
            sample_cvae(model, np.ones((2, 2)), 1, 0, self.cfg)

    def test_reconstruct(self):
        W = np.array([[1 + 1j], [0.5 - 2j]])
        model = _identity_decoder_vae(W)
        R = reconstruct(model, W, seed=0, cfg=SystemConfig(1, 2, 1.0, 100.0))
        np.testing.assert_allclose(R, W, atol=1e-15)
        cm = tiny("cvae")
        assert reconstruct(cm, np.stack([W, W]), H=np.ones((1, 2)), cfg=self.cfg)[1].shape == (2, 1)
        with pytest.raises(ConfigError):
            reconstruct(cm, W)


def test_model_roundtrip(tmp_path):
    model = tiny("cvae", seed=5)
    path = tmp_path / "m.pcnn"
    save_model(model, path, {"note": "x"})
    back, meta = load_model(path)
    assert meta["kind"] == "cvae" and meta["note"] == "x"
    assert (tmp_path / "m.pcnn.json").exists()
    for name in model.nets:
        assert back.params(name) == model.params(name)
        assert back.spec(name) == model.spec(name)
    H = np.ones((1, 2))
    cfg = SystemConfig(1, 2)
    a, b = sample_cvae(model, H, 3, 1, cfg), sample_cvae(back, H, 3, 1, cfg)
    assert all(x.tobytes() == y.tobytes() for x, y in zip(a, b))
