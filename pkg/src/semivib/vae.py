"""Gaussian VAE: encoder, decoder, reparameterized sampling, KL, annealed ELBO."""

from __future__ import annotations

import csv
import math
import warnings
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .checkpoint import load_checkpoint, save_checkpoint
from .nn import (Ctx, ConvDecoder, EncoderSpec, MiniBatcher, ParamStore,
                 TrainingDiverged, as_channel, as_input, build_conv_encoder)
from .optim import rmsprop_step
from .rng import RngStream

LOG_2PI = math.log(2.0 * math.pi)
LOGVAR_CLAMP = 10.0  # log-variance kept inside [-10, 10] to avoid overflow


@dataclass(frozen=True)
class BetaSchedule:
    """KL-annealing weight: linear ramp from start to end over warmup epochs."""
    start: float = 0.0
    end: float = 1.0
    warmup_epochs: int = 5

    def value(self, epoch: int) -> float:
        if self.warmup_epochs <= 0 or epoch >= self.warmup_epochs:
            return self.end
        frac = epoch / self.warmup_epochs
        return self.start + (self.end - self.start) * frac


@dataclass
class GaussianPosterior:
    """Per-sample diagonal Gaussian over the latent code."""
    mu: Tensor       # (B, D_z)
    log_var: Tensor  # (B, D_z), natural log of sigma^2

    @property
    def batch(self) -> int:
        return self.mu.shape[0]

    @property
    def dim(self) -> int:
        return self.mu.shape[1]


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 200
    epochs: int = 10
    lr: float = 1e-4
    rho: float = 0.9
    opt_eps: float = 1e-8
    beta: BetaSchedule = field(default_factory=BetaSchedule)
    mc_samples: int = 1
    kl_floor: float = 0.01  # KL-vanishing monitor threshold, nats per sample


class VaeModel:
    """Conv encoder to (mu, log sigma^2), conv-transpose decoder back to the signal."""

    kind = "vae"

    def __init__(self, spec: EncoderSpec = EncoderSpec(), latent_dim: int = 128,
                 seed: int = 0, cond_dim: int = 0):
        if latent_dim >= spec.input_dim:
            raise ad.ShapeError(
                f"latent_dim {latent_dim} must be smaller than input_dim {spec.input_dim}")
        self.spec = spec
        self.latent_dim = latent_dim
        self.input_dim = spec.input_dim
        self.cond_dim = cond_dim  # extra one-hot inputs for a conditional decoder
        self.seed = seed
        self.store = ParamStore()
        rng = RngStream(seed).child("init")
        self.enc_trunk, self.enc_head = build_conv_encoder(
            self.store, "enc", spec, rng, 2 * latent_dim)
        self.decoder = ConvDecoder(self.store, "dec", spec, rng, latent_dim + cond_dim)
        self.trained = False

    def encode(self, x, ctx: Ctx = Ctx()) -> GaussianPosterior:
        x = as_input(x)
        h = self.enc_trunk(as_channel(x), ctx)
        out = self.enc_head(h, ctx)
        ad.check_finite(out, "enc/head")
        mu = ad.narrow(out, 1, 0, self.latent_dim)
        log_var = ad.clip(ad.narrow(out, 1, self.latent_dim, self.latent_dim),
                          -LOGVAR_CLAMP, LOGVAR_CLAMP)
        return GaussianPosterior(mu, log_var)

    def decode(self, z, ctx: Ctx = Ctx()) -> Tensor:
        z = as_input(z)
        out = self.decoder(z, ctx)
        ad.check_finite(out, "dec/out")
        return out

    def reconstruct(self, x, rng: RngStream | None = None) -> np.ndarray:
        """Eval-mode round trip; posterior mean by default, a sampled latent
        code when an RngStream is supplied."""
        post = self.encode(x)
        z = post.mu if rng is None else ad.reshape(reparameterize(post, rng, 1),
                                                   (post.batch, post.dim))
        return self.decode(z).data

    def features(self, x) -> np.ndarray:
        """Posterior means, the latent features handed to external classifiers."""
        return self.encode(x).mu.data

    # -- persistence ---------------------------------------------------------

    def state_entries(self) -> dict[str, np.ndarray]:
        entries = dict(self.store.values())
        entries.update(self.enc_trunk.bn_state())
        return entries

    def meta(self) -> dict[str, str]:
        return {
            "kind": self.kind,
            "input_dim": str(self.spec.input_dim),
            "latent_dim": str(self.latent_dim),
            "cond_dim": str(self.cond_dim),
            "filters": ",".join(str(f) for f in self.spec.filters),
            "kernel": str(self.spec.kernel),
            "stride": str(self.spec.stride),
            "dropout": str(self.spec.dropout),
            "bn_momentum": str(self.spec.bn_momentum),
            "trained": "1" if self.trained else "0",
        }

    def save(self, path):
        save_checkpoint(path, self.state_entries(), self.meta())

    def load_state(self, entries: dict[str, np.ndarray], meta: dict[str, str]):
        self.store.load_values({k: v for k, v in entries.items() if k in self.store})
        self.enc_trunk.load_bn_state(entries)
        self.trained = meta.get("trained", "0") == "1"

    @classmethod
    def spec_from_meta(cls, meta: dict[str, str]) -> EncoderSpec:
        return EncoderSpec(
            input_dim=int(meta["input_dim"]),
            filters=tuple(int(f) for f in meta["filters"].split(",")),
            kernel=int(meta["kernel"]),
            stride=int(meta["stride"]),
            dropout=float(meta["dropout"]),
            bn_momentum=float(meta["bn_momentum"]),
        )

    @classmethod
    def load(cls, path) -> "VaeModel":
        entries, meta = load_checkpoint(path)
        if meta.get("kind") != cls.kind:
            raise ValueError(f"{path}: checkpoint kind {meta.get('kind')!r}, expected {cls.kind!r}")
        model = cls(cls.spec_from_meta(meta), latent_dim=int(meta["latent_dim"]),
                    cond_dim=int(meta.get("cond_dim", "0")))
        model.load_state(entries, meta)
        return model


# ---------------------------------------------------------------------------
# Objective pieces
# ---------------------------------------------------------------------------

def reparameterize(post: GaussianPosterior, rng: RngStream, n_samples: int = 1) -> Tensor:
    """z = mu + sigma * eps with eps ~ N(0, I); gradients reach mu and log_var only."""
    if n_samples < 1:
        raise ad.ShapeError(f"n_samples must be >= 1, got {n_samples}")
    eps = Tensor(rng.normal((n_samples, post.batch, post.dim)).astype(post.mu.data.dtype))
    sigma = ad.exp(post.log_var * 0.5)
    return ad.add(post.mu, ad.mul(sigma, eps))


def kl_standard_normal(post: GaussianPosterior) -> Tensor:
    """Closed-form KL[q(z|x) || N(0, I)] per sample: 0.5*sum(mu^2 + s^2 - 1 - log s^2)."""
    var = ad.exp(post.log_var)
    inner = ad.sub(ad.add(ad.mul(post.mu, post.mu), var),
                   post.log_var + 1.0)
    return ad.sum_(inner, axis=1) * 0.5


def gaussian_recon_logp(x: Tensor, xhat: Tensor) -> Tensor:
    """log N(x | xhat, I) per sample: -0.5*||x - xhat||^2 - (D/2)*log(2*pi)."""
    d = ad.sub(xhat, x)
    sq = ad.sum_(ad.mul(d, d), axis=-1)
    dim = x.shape[-1]
    return ad.sub(sq * (-0.5), Tensor(np.asarray(0.5 * dim * LOG_2PI, dtype=sq.data.dtype)))


@dataclass
class ElboTerms:
    """Batch-mean ELBO pieces as graph tensors; value = recon - beta * kl."""
    recon: Tensor
    kl: Tensor
    value: Tensor

    def as_dict(self) -> dict[str, float]:
        return {"recon": self.recon.item(), "kl": self.kl.item(), "value": self.value.item()}


def elbo(model: VaeModel, x, beta: float, rng: RngStream, n_samples: int = 1,
         ctx: Ctx | None = None) -> ElboTerms:
    """Monte Carlo ELBO with a unit-variance Gaussian likelihood."""
    if not 0.0 <= beta <= 1.0:
        raise ValueError(f"beta must lie in [0, 1], got {beta}")
    ctx = ctx or Ctx()
    x = as_input(x)
    post = model.encode(x, ctx)
    z = reparameterize(post, rng, n_samples)              # (L, B, D_z)
    batch = post.batch
    flat = ad.reshape(z, (n_samples * batch, post.dim))
    xhat = model.decode(flat, ctx)                        # (L*B, D_x)
    x_rep = Tensor(np.tile(x.data, (n_samples, 1)))
    logp = gaussian_recon_logp(x_rep, xhat)               # (L*B,)
    per_sample = ad.mean_(ad.reshape(logp, (n_samples, batch)), axis=0)
    recon = ad.mean_(per_sample)
    kl = ad.mean_(kl_standard_normal(post))
    value = ad.sub(recon, kl * float(beta))
    return ElboTerms(recon=recon, kl=kl, value=value)


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------

@dataclass
class EpochStats:
    epoch: int
    recon: float
    kl: float
    beta: float
    elbo: float


@dataclass
class VaeTrainLog:
    epochs: list[EpochStats] = field(default_factory=list)
    kl_collapsed: bool = False

    def write_csv(self, path):
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["epoch", "recon", "kl", "beta", "elbo"])
            for row in self.epochs:
                writer.writerow([row.epoch, f"{row.recon:.6f}", f"{row.kl:.6f}",
                                 f"{row.beta:.6f}", f"{row.elbo:.6f}"])


def fit_vae(model: VaeModel, segments: np.ndarray, config: TrainConfig,
            rng: RngStream) -> VaeTrainLog:
    """Mini-batch RMSprop on the negative annealed ELBO.

    Aborts on a non-finite loss, restoring the last epoch-end parameters, and
    flags KL collapse (post-warmup KL below the configured floor).
    """
    segments = np.ascontiguousarray(segments, dtype=np.float32)
    n = segments.shape[0]
    batcher = MiniBatcher(n, config.batch_size, rng.child("batches"))
    train_rng = rng.child("noise")
    steps = max(1, -(-n // config.batch_size))
    log = VaeTrainLog()
    last_good = model.store.snapshot()

    for epoch in range(config.epochs):
        beta = config.beta.value(epoch)
        recon_sum = kl_sum = 0.0
        for _ in range(steps):
            idx = batcher.next_indices()
            terms = elbo(model, segments[idx], beta, train_rng,
                         n_samples=config.mc_samples, ctx=Ctx(training=True, rng=train_rng))
            loss = ad.neg(terms.value)
            if not np.isfinite(loss.data):
                model.store.restore(last_good)
                raise TrainingDiverged(
                    f"non-finite VAE loss in epoch {epoch}; restored last good parameters")
            model.store.zero_grads()
            loss.backward()
            rmsprop_step(model.store, lr=config.lr, rho=config.rho, eps=config.opt_eps)
            recon_sum += terms.recon.item()
            kl_sum += terms.kl.item()
        recon, kl = recon_sum / steps, kl_sum / steps
        log.epochs.append(EpochStats(epoch, recon, kl, beta, recon - beta * kl))
        if epoch >= config.beta.warmup_epochs and kl < config.kl_floor:
            log.kl_collapsed = True
            warnings.warn(f"KL term collapsed to {kl:.4f} nats after warmup (epoch {epoch})")
        last_good = model.store.snapshot()

    model.trained = True
    return log
