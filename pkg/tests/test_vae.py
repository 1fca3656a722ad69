"""VAE objective pieces against closed forms and Monte Carlo oracles."""

import math

import numpy as np
import pytest

from semivib import autodiff as ad
from semivib.autodiff import Tensor
from semivib.nn import Ctx, EncoderSpec
from semivib.optim import grad_check
from semivib.rng import RngStream
from semivib.vae import (BetaSchedule, GaussianPosterior, TrainConfig, VaeModel,
                         elbo, fit_vae, gaussian_recon_logp, kl_standard_normal,
                         reparameterize)

SMALL_SPEC = EncoderSpec(input_dim=64, filters=(4, 6), kernel=8, stride=4, dropout=0.25)


def make_posterior(mu, log_var):
    return GaussianPosterior(Tensor(np.asarray(mu, dtype=np.float32)),
                             Tensor(np.asarray(log_var, dtype=np.float32)))


# ---------------------------------------------------------------------------
# KL divergence
# ---------------------------------------------------------------------------

def test_kl_zero_when_posterior_is_prior():
    post = make_posterior(np.zeros((3, 5)), np.zeros((3, 5)))
    assert np.abs(kl_standard_normal(post).data).max() <= 1e-7


def test_kl_unit_mean_single_dim():
    post = make_posterior([[1.0]], [[0.0]])
    assert abs(kl_standard_normal(post).item() - 0.5) <= 1e-6


def test_kl_variance_e_single_dim():
    # mu=0, sigma^2=e: 0.5*(e - 1 - 1) = (e-2)/2
    post = make_posterior([[0.0]], [[1.0]])
    want = (math.e - 2.0) / 2.0
    assert abs(kl_standard_normal(post).item() - want) <= 1e-6


def test_kl_nonnegative_and_zero_only_at_prior():
    rng = RngStream(2)
    post = make_posterior(rng.normal((200, 6)), rng.normal((200, 6)))
    kl = kl_standard_normal(post).data
    assert (kl >= -1e-6).all()
    # a posterior noticeably away from the prior has strictly positive KL
    assert kl[np.abs(post.mu.data).max(axis=1) > 0.5].min() > 1e-3


def test_kl_matches_monte_carlo_estimate():
    # (1/L) sum [log q(z|x) - log p(z)] agrees with the closed form within 3 SE.
    rng = RngStream(3)
    n, dim, draws = 25, 4, 10000
    mu = rng.normal((n, dim), dtype=np.float64)
    log_var = (0.5 * rng.normal((n, dim), dtype=np.float64))
    closed = 0.5 * (mu**2 + np.exp(log_var) - 1.0 - log_var).sum(axis=1)

    eps = rng.normal((draws, n, dim), dtype=np.float64)
    sigma = np.exp(0.5 * log_var)
    z = mu + sigma * eps
    log_q = (-0.5 * (eps**2 + log_var + math.log(2 * math.pi))).sum(axis=2)
    log_p = (-0.5 * (z**2 + math.log(2 * math.pi))).sum(axis=2)
    diffs = log_q - log_p                        # (draws, n)
    mc = diffs.mean(axis=0)
    se = diffs.std(axis=0, ddof=1) / math.sqrt(draws)
    inside = np.abs(mc - closed) <= 3.0 * se
    assert inside.mean() >= 0.97


# ---------------------------------------------------------------------------
# Reparameterization
# ---------------------------------------------------------------------------

def test_reparameterize_degenerate_sigma_returns_mu():
    mu = np.array([[1.5, -2.0]], dtype=np.float32)
    post = make_posterior(mu, np.full((1, 2), -80.0))  # sigma ~ 0 (clamp territory)
    z = reparameterize(post, RngStream(0), 1)
    assert np.abs(z.data[0] - mu).max() <= 1e-6


def test_reparameterize_pinned_noise():
    class OnesRng:
        def normal(self, shape, dtype=np.float32):
            return np.ones(shape, dtype=dtype)

    post = make_posterior([[0.5, -1.0]], [[0.0, 2.0]])
    z = reparameterize(post, OnesRng(), 1)
    want = post.mu.data + np.exp(0.5 * post.log_var.data)
    assert np.abs(z.data[0] - want).max() <= 1e-6


def test_reparameterize_sample_mean_near_mu():
    rng = RngStream(4)
    post = make_posterior(rng.normal((3, 5)), 0.3 * rng.normal((3, 5)))
    draws = 10000
    z = reparameterize(post, rng, draws).data
    sigma = np.exp(0.5 * post.log_var.data)
    tol = 3.0 * sigma / math.sqrt(draws)
    assert (np.abs(z.mean(axis=0) - post.mu.data) <= tol + 1e-7).all()


def test_reparameterize_gradients_reach_mu_and_log_var():
    post = make_posterior(np.zeros((2, 3)), np.zeros((2, 3)))
    post.mu.requires_grad = True
    post.log_var.requires_grad = True
    z = reparameterize(post, RngStream(1), 4)
    ad.sum_(ad.mul(z, z)).backward()
    assert post.mu.grad is not None and post.log_var.grad is not None


def test_reparameterize_rejects_zero_samples():
    post = make_posterior(np.zeros((1, 2)), np.zeros((1, 2)))
    with pytest.raises(ad.ShapeError):
        reparameterize(post, RngStream(0), 0)


# ---------------------------------------------------------------------------
# ELBO
# ---------------------------------------------------------------------------

def test_recon_constant_for_perfect_reconstruction():
    # log p(x|x) = -(D/2) log(2*pi) = -941.0 for D=1024
    x = Tensor(RngStream(5).normal((3, 1024)))
    logp = gaussian_recon_logp(x, x)
    assert np.abs(logp.data - (-512.0 * math.log(2 * math.pi))).max() <= 1e-3
    assert abs(float(logp.data[0]) - (-940.99)) <= 0.05


def test_elbo_beta_zero_equals_recon_exactly():
    model = VaeModel(SMALL_SPEC, latent_dim=6, seed=0)
    x = RngStream(6).normal((5, 64))
    terms = elbo(model, x, beta=0.0, rng=RngStream(7))
    assert terms.value.item() == terms.recon.item()


def test_elbo_beta_one_is_recon_minus_kl():
    model = VaeModel(SMALL_SPEC, latent_dim=6, seed=0)
    x = RngStream(6).normal((5, 64))
    terms = elbo(model, x, beta=1.0, rng=RngStream(7))
    assert abs(terms.value.item() - (terms.recon.item() - terms.kl.item())) <= 1e-9


def test_elbo_invariant_to_mc_sample_order():
    # Same noise multiset in a different order: the float64-accumulated MC
    # average is bit-identical.
    model = VaeModel(SMALL_SPEC, latent_dim=6, seed=0)
    x = RngStream(8).normal((4, 64))
    draws = RngStream(9).normal((6, 4, 6))

    class FixedRng:
        def __init__(self, eps):
            self.eps = eps

        def normal(self, shape, dtype=np.float32):
            assert shape == self.eps.shape
            return self.eps.astype(dtype)

    a = elbo(model, x, 1.0, FixedRng(draws), n_samples=6)
    b = elbo(model, x, 1.0, FixedRng(draws[::-1].copy()), n_samples=6)
    assert a.value.item() == b.value.item()


def test_elbo_rejects_beta_outside_unit_interval():
    model = VaeModel(SMALL_SPEC, latent_dim=6, seed=0)
    x = RngStream(6).normal((2, 64))
    with pytest.raises(ValueError):
        elbo(model, x, beta=1.5, rng=RngStream(0))


def jitter_params(store, seed, scale=0.05):
    # Evaluate gradient checks at a generic point: freshly initialized nets
    # have zero biases, which parks ReLU pre-activations exactly on the kink
    # where central differences measure half the slope.
    rng = RngStream(seed).child("jitter")
    for p in store.params():
        p.tensor.data += scale * rng.normal(p.tensor.data.shape)


def test_elbo_gradient_passes_finite_differences():
    # eps=1e-4 for the composed loss: the float64 oracle keeps the quotient
    # precise while the smaller step avoids spurious ReLU kink crossings.
    model = VaeModel(SMALL_SPEC, latent_dim=4, seed=3)
    jitter_params(model.store, 30)
    x = RngStream(10).normal((4, 64))

    def loss():
        terms = elbo(model, x, beta=0.7, rng=RngStream(42),
                     ctx=Ctx(training=True, rng=RngStream(43)))
        return ad.neg(terms.value)

    err = grad_check(loss, model.store, eps=1e-4, max_entries=3, seed=1)
    assert err <= 1e-3, f"elbo grad error {err:.2e}"


# ---------------------------------------------------------------------------
# Encoder/decoder contracts
# ---------------------------------------------------------------------------

def test_encoder_full_size_shapes():
    model = VaeModel(EncoderSpec(), latent_dim=128, seed=0)
    x = RngStream(11).normal((200, 1024))
    post = model.encode(x)
    assert post.mu.shape == (200, 128)
    assert post.log_var.shape == (200, 128)
    assert np.isfinite(post.log_var.data).all()


def test_encoder_identical_rows_identical_posteriors():
    model = VaeModel(SMALL_SPEC, latent_dim=6, seed=1)
    row = RngStream(12).normal((1, 64))
    x = np.vstack([row, row])
    post = model.encode(x)
    assert np.array_equal(post.mu.data[0], post.mu.data[1])
    assert np.array_equal(post.log_var.data[0], post.log_var.data[1])


def test_decoder_shape_and_determinism():
    model = VaeModel(SMALL_SPEC, latent_dim=6, seed=2)
    z = RngStream(13).normal((7, 6))
    a = model.decode(z).data
    b = model.decode(z).data
    assert a.shape == (7, 64)
    assert np.array_equal(a, b)


def test_decoder_full_size_shape():
    model = VaeModel(EncoderSpec(), latent_dim=128, seed=0)
    z = RngStream(14).normal((2, 128))
    assert model.decode(z).data.shape == (2, 1024)


def test_latent_dim_must_be_smaller_than_input():
    with pytest.raises(ad.ShapeError):
        VaeModel(SMALL_SPEC, latent_dim=64)


# ---------------------------------------------------------------------------
# Beta schedule and training
# ---------------------------------------------------------------------------

def test_beta_schedule_contract():
    sched = BetaSchedule(start=0.0, end=1.0, warmup_epochs=5)
    values = [sched.value(e) for e in range(10)]
    assert values[0] == 0.0
    assert all(b2 >= b1 for b1, b2 in zip(values, values[1:]))
    assert all(v == 1.0 for v in values[5:])


def test_train_config_paper_defaults():
    config = TrainConfig()
    assert config.batch_size == 200
    assert config.epochs == 10
    assert config.lr == 1e-4


def test_fit_vae_improves_reconstruction_and_logs_schedule():
    rng = RngStream(20)
    # two sinusoidal prototypes plus noise: reconstructable structure
    t = np.arange(64) / 64.0
    protos = np.stack([np.sin(2 * np.pi * 4 * t), np.sin(2 * np.pi * 9 * t)])
    x = protos[rng.integers(0, 2, (300,))] + 0.1 * rng.normal((300, 64))
    x = (x - x.mean(axis=1, keepdims=True)) / x.std(axis=1, keepdims=True)

    model = VaeModel(SMALL_SPEC, latent_dim=6, seed=5)
    config = TrainConfig(batch_size=50, epochs=8, lr=1e-3,
                         beta=BetaSchedule(warmup_epochs=4))
    log = fit_vae(model, x.astype(np.float32), config, RngStream(21))

    betas = [row.beta for row in log.epochs]
    assert betas == sorted(betas) and betas[-1] == 1.0
    assert log.epochs[-1].recon > log.epochs[0].recon
    assert model.trained


def test_fit_vae_training_is_bit_deterministic():
    rng = RngStream(22)
    x = rng.normal((120, 64))
    runs = []
    for _ in range(2):
        model = VaeModel(SMALL_SPEC, latent_dim=4, seed=9)
        fit_vae(model, x, TrainConfig(batch_size=40, epochs=2), RngStream(99))
        runs.append({k: v.copy() for k, v in model.store.values().items()})
    for name in runs[0]:
        assert np.array_equal(runs[0][name], runs[1][name]), name


def test_vae_checkpoint_round_trip_bit_exact(tmp_path):
    model = VaeModel(SMALL_SPEC, latent_dim=6, seed=4)
    x = RngStream(23).normal((60, 64))
    fit_vae(model, x, TrainConfig(batch_size=30, epochs=2), RngStream(24))
    path = tmp_path / "vae.ckpt"
    model.save(path)
    clone = VaeModel.load(path)
    probe = RngStream(25).normal((5, 64))
    assert np.array_equal(model.reconstruct(probe), clone.reconstruct(probe))
    assert clone.trained


def test_vae_train_log_csv(tmp_path):
    model = VaeModel(SMALL_SPEC, latent_dim=4, seed=6)
    x = RngStream(26).normal((50, 64))
    log = fit_vae(model, x, TrainConfig(batch_size=25, epochs=2), RngStream(27))
    path = tmp_path / "log.csv"
    log.write_csv(path)
    lines = path.read_text().strip().splitlines()
    assert lines[0] == "epoch,recon,kl,beta,elbo"
    assert len(lines) == 3
