"""The two semi-supervised models: latent-feature M1 and generative M2.

M1 trains a plain VAE on every training segment and hands the posterior means
to an external linear classifier fit on the labeled subset only. M2 couples a
label posterior q(y|x) with a conditional decoder p(x|y,z) and trains both
networks jointly on a combined labeled + unlabeled objective:

    total = sum_u U(x) + sum_l [ L(x,y) - alpha * log q(y|x) ]

where -L(x,y) is the conditional evidence lower bound and -U(x) marginalizes
L over the label posterior plus its entropy. The label marginalization is
exact: the decoder is evaluated once per class for every unlabeled sample.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .checkpoint import load_checkpoint, save_checkpoint
from .nn import (ClassifierSpec, Ctx, ConvDecoder, EncoderSpec, MiniBatcher,
                 ParamStore, TrainingDiverged, as_channel, as_input,
                 build_conv_classifier, build_conv_encoder, one_hot)
from .optim import rmsprop_step
from .rng import RngStream
from .vae import (BetaSchedule, GaussianPosterior, LOGVAR_CLAMP, TrainConfig,
                  VaeModel, fit_vae, gaussian_recon_logp, kl_standard_normal,
                  reparameterize)


class MissingClassError(ValueError):
    """The label budget left at least one class without labeled samples."""


def require_all_classes(labels: np.ndarray, n_classes: int):
    present = set(int(v) for v in np.unique(labels))
    missing = sorted(set(range(n_classes)) - present)
    if missing:
        raise MissingClassError(f"labeled set is missing classes {missing}")


# ---------------------------------------------------------------------------
# Linear classifier head (M1 external classifier; also used by PCA/AE baselines)
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class LinearFitConfig:
    loss: str = "logistic"  # "logistic" (multinomial regression) or "hinge" (linear SVM)
    epochs: int = 300
    lr: float = 0.05
    weight_decay: float = 1e-4


class LinearClassifier:
    """Linear scores over feature vectors, trained full-batch with RMSprop."""

    def __init__(self, in_dim: int, n_classes: int, seed: int = 0):
        self.in_dim = in_dim
        self.n_classes = n_classes
        self.store = ParamStore()
        rng = RngStream(seed).child("linclf")
        bound = 1.0 / math.sqrt(in_dim)
        self.w = self.store.add("clf.w", rng.uniform(-bound, bound, (in_dim, n_classes)))
        self.b = self.store.add("clf.b", np.zeros(n_classes, dtype=np.float32))
        self.trained = False

    def logits(self, features: np.ndarray) -> Tensor:
        x = Tensor(np.asarray(features, dtype=np.float32))
        return ad.dense(x, self.w.tensor, self.b.tensor)

    def fit(self, features: np.ndarray, labels: np.ndarray,
            config: LinearFitConfig = LinearFitConfig()):
        features = np.asarray(features, dtype=np.float32)
        labels = np.asarray(labels)
        require_all_classes(labels, self.n_classes)
        onehot = Tensor(one_hot(labels, self.n_classes))
        for _ in range(config.epochs):
            scores = self.logits(features)
            if config.loss == "logistic":
                data_loss = ad.neg(ad.mean_(ad.sum_(
                    ad.mul(ad.log_softmax(scores), onehot), axis=1)))
            elif config.loss == "hinge":
                # Multiclass margin: sum_j relu(1 - s_y + s_j); the j == y term
                # contributes a constant 1 that is subtracted back out.
                s_true = ad.sum_(ad.mul(scores, onehot), axis=1, keepdims=True)
                margins = ad.relu(ad.add(ad.sub(scores, s_true),
                                         Tensor(np.float32(1.0))))
                data_loss = ad.sub(ad.mean_(ad.sum_(margins, axis=1)),
                                   Tensor(np.float64(1.0)))
            else:
                raise ValueError(f"unknown classifier loss {config.loss!r}")
            reg = ad.sum_(ad.mul(self.w.tensor, self.w.tensor)) * config.weight_decay
            loss = ad.add(data_loss, reg)
            self.store.zero_grads()
            loss.backward()
            rmsprop_step(self.store, lr=config.lr)
        self.trained = True
        return self

    def predict(self, features: np.ndarray) -> np.ndarray:
        return self.logits(features).data.argmax(axis=1)

    def entries(self, prefix: str = "") -> dict[str, np.ndarray]:
        return {prefix + name: value for name, value in self.store.values().items()}

    def load_entries(self, entries: dict[str, np.ndarray], prefix: str = ""):
        self.store.load_values({"clf.w": entries[prefix + "clf.w"],
                                "clf.b": entries[prefix + "clf.b"]})
        self.trained = True


# ---------------------------------------------------------------------------
# M1: VAE features + external classifier
# ---------------------------------------------------------------------------

class M1Model:
    kind = "m1"

    def __init__(self, vae: VaeModel, n_classes: int, seed: int = 0,
                 classifier_loss: str = "logistic"):
        if vae.cond_dim != 0:
            raise ValueError("M1 expects an unconditional VAE")
        self.vae = vae
        self.n_classes = n_classes
        self.classifier = LinearClassifier(vae.latent_dim, n_classes, seed=seed)
        self.classifier_loss = classifier_loss

    def save(self, path):
        entries = {f"vae.{k}": v for k, v in self.vae.state_entries().items()}
        entries.update(self.classifier.entries("m1."))
        meta = {f"vae.{k}": v for k, v in self.vae.meta().items()}
        meta.update({"kind": self.kind, "n_classes": str(self.n_classes),
                     "classifier_loss": self.classifier_loss})
        save_checkpoint(path, entries, meta)

    @classmethod
    def load(cls, path) -> "M1Model":
        entries, meta = load_checkpoint(path)
        if meta.get("kind") != cls.kind:
            raise ValueError(f"{path}: checkpoint kind {meta.get('kind')!r}, expected 'm1'")
        vae_meta = {k[4:]: v for k, v in meta.items() if k.startswith("vae.")}
        vae = VaeModel(VaeModel.spec_from_meta(vae_meta),
                       latent_dim=int(vae_meta["latent_dim"]))
        vae.load_state({k[4:]: v for k, v in entries.items() if k.startswith("vae.")},
                       vae_meta)
        model = cls(vae, int(meta["n_classes"]), classifier_loss=meta["classifier_loss"])
        model.classifier.load_entries(entries, "m1.")
        return model


def m1_extract_features(model: M1Model, x: np.ndarray) -> np.ndarray:
    """Posterior means of the trained VAE; refuses an untrained encoder."""
    if not model.vae.trained:
        raise RuntimeError("M1 feature extraction requires a trained VAE (run fit_vae first)")
    return model.vae.features(x)


def m1_train_classifier(model: M1Model, features: np.ndarray, labels: np.ndarray,
                        config: LinearFitConfig | None = None) -> LinearClassifier:
    labels = np.asarray(labels)
    if len(labels) < model.n_classes:
        raise MissingClassError(
            f"need at least {model.n_classes} labeled samples, got {len(labels)}")
    config = config or LinearFitConfig(loss=model.classifier_loss)
    return model.classifier.fit(features, labels, config)


def m1_fit(model: M1Model, x_train_all: np.ndarray, x_l: np.ndarray, y_l: np.ndarray,
           vae_config: TrainConfig, rng: RngStream,
           clf_config: LinearFitConfig | None = None):
    """Full M1 pipeline: unsupervised VAE on everything, classifier on labels only."""
    log = fit_vae(model.vae, x_train_all, vae_config, rng)
    feats = m1_extract_features(model, x_l)
    m1_train_classifier(model, feats, y_l, clf_config)
    return log


# ---------------------------------------------------------------------------
# M2: generative semi-supervised model
# ---------------------------------------------------------------------------

@dataclass
class LabelPosterior:
    """Rows of q(y|x): one categorical distribution per sample."""
    probs: np.ndarray  # (B, K)

    @property
    def predictions(self) -> np.ndarray:
        return self.probs.argmax(axis=1)  # argmax takes the lowest index on ties


class M2Model:
    kind = "m2"

    def __init__(self, n_classes: int, enc_spec: EncoderSpec = EncoderSpec(),
                 cls_spec: ClassifierSpec | None = None, latent_dim: int = 128,
                 alpha: float | None = None, class_prior: np.ndarray | None = None,
                 seed: int = 0):
        self.n_classes = n_classes
        self.enc_spec = enc_spec
        self.cls_spec = cls_spec or ClassifierSpec(input_dim=enc_spec.input_dim,
                                                   n_classes=n_classes,
                                                   dropout=enc_spec.dropout)
        if self.cls_spec.n_classes != n_classes:
            raise ValueError("classifier spec class count disagrees with n_classes")
        self.latent_dim = latent_dim
        self.input_dim = enc_spec.input_dim
        self.alpha = alpha  # None = derive from the labeled count at fit time
        if class_prior is None:
            class_prior = np.full(n_classes, 1.0 / n_classes)
        class_prior = np.asarray(class_prior, dtype=np.float64)
        if abs(class_prior.sum() - 1.0) > 1e-6 or (class_prior <= 0).any():
            raise ValueError("class prior must be strictly positive and sum to 1")
        self.class_prior = class_prior
        self.seed = seed
        self.store = ParamStore()
        rng = RngStream(seed).child("init")
        self.enc_trunk, self.enc_head = build_conv_encoder(
            self.store, "enc", enc_spec, rng, 2 * latent_dim)
        self.decoder = ConvDecoder(self.store, "dec", enc_spec, rng,
                                   latent_dim + n_classes)
        self.classifier = build_conv_classifier(self.store, "cls", self.cls_spec, rng)
        self.trained = False

    # -- network heads -------------------------------------------------------

    def encode(self, x, ctx: Ctx = Ctx()) -> GaussianPosterior:
        x = as_input(x)
        out = self.enc_head(self.enc_trunk(as_channel(x), ctx), ctx)
        ad.check_finite(out, "enc/head")
        mu = ad.narrow(out, 1, 0, self.latent_dim)
        log_var = ad.clip(ad.narrow(out, 1, self.latent_dim, self.latent_dim),
                          -LOGVAR_CLAMP, LOGVAR_CLAMP)
        return GaussianPosterior(mu, log_var)

    def decode(self, z: Tensor, y_onehot: Tensor, ctx: Ctx = Ctx()) -> Tensor:
        return self.decoder(ad.concat([y_onehot, z], axis=1), ctx)

    def classifier_logits(self, x, ctx: Ctx = Ctx()) -> Tensor:
        x = as_input(x)
        return self.classifier(as_channel(x), ctx)

    def reconstruct(self, x, rng: RngStream | None = None) -> np.ndarray:
        """Eval-mode reconstruction through the predicted label; posterior mean
        by default, a sampled latent code when an RngStream is supplied."""
        post = self.encode(x)
        z = post.mu if rng is None else ad.reshape(reparameterize(post, rng, 1),
                                                   (post.batch, post.dim))
        y = m2_classify(self, x).predictions
        y_oh = Tensor(one_hot(y, self.n_classes))
        return self.decode(z, y_oh).data

    # -- persistence ----------------------------------------------------------

    def state_entries(self) -> dict[str, np.ndarray]:
        entries = dict(self.store.values())
        entries.update(self.enc_trunk.bn_state())
        entries["class_prior"] = self.class_prior.astype(np.float32)
        return entries

    def meta(self) -> dict[str, str]:
        return {
            "kind": self.kind,
            "n_classes": str(self.n_classes),
            "latent_dim": str(self.latent_dim),
            "alpha": "none" if self.alpha is None else repr(float(self.alpha)),
            "input_dim": str(self.enc_spec.input_dim),
            "filters": ",".join(str(f) for f in self.enc_spec.filters),
            "kernel": str(self.enc_spec.kernel),
            "stride": str(self.enc_spec.stride),
            "dropout": str(self.enc_spec.dropout),
            "bn_momentum": str(self.enc_spec.bn_momentum),
            "cls_filters": ",".join(str(f) for f in self.cls_spec.filters),
            "cls_kernel": str(self.cls_spec.kernel),
            "cls_stride": str(self.cls_spec.stride),
            "cls_pool": str(self.cls_spec.pool_width),
            "trained": "1" if self.trained else "0",
        }

    def save(self, path):
        save_checkpoint(path, self.state_entries(), self.meta())

    @classmethod
    def load(cls, path) -> "M2Model":
        entries, meta = load_checkpoint(path)
        if meta.get("kind") != cls.kind:
            raise ValueError(f"{path}: checkpoint kind {meta.get('kind')!r}, expected 'm2'")
        enc_spec = VaeModel.spec_from_meta(meta)
        cls_spec = ClassifierSpec(
            input_dim=int(meta["input_dim"]),
            n_classes=int(meta["n_classes"]),
            filters=tuple(int(f) for f in meta["cls_filters"].split(",")),
            kernel=int(meta["cls_kernel"]),
            stride=int(meta["cls_stride"]),
            pool_width=int(meta["cls_pool"]),
            dropout=float(meta["dropout"]),
        )
        alpha = None if meta["alpha"] == "none" else float(meta["alpha"])
        model = cls(int(meta["n_classes"]), enc_spec, cls_spec,
                    latent_dim=int(meta["latent_dim"]), alpha=alpha,
                    class_prior=entries["class_prior"].astype(np.float64))
        model.store.load_values({k: v for k, v in entries.items() if k in model.store})
        model.enc_trunk.load_bn_state(entries)
        model.trained = meta.get("trained", "0") == "1"
        return model


def m2_classify(model: M2Model, x) -> LabelPosterior:
    """Eval-mode label posterior q(y|x); rows sum to one."""
    logits = model.classifier_logits(x)
    return LabelPosterior(ad.softmax(logits).data)


# ---------------------------------------------------------------------------
# M2 objective
# ---------------------------------------------------------------------------

def _conditional_elbo(model: M2Model, x_rep: Tensor, z: Tensor, y_onehot: Tensor,
                      kl: Tensor, logp_y: np.ndarray, beta: float, ctx: Ctx) -> Tensor:
    """Per-row E[log p(x|y,z)] + log p(y) - beta*KL at the given z draw."""
    xhat = model.decode(z, y_onehot, ctx)
    recon = gaussian_recon_logp(x_rep, xhat)
    prior = Tensor(logp_y.astype(x_rep.dtype))
    return ad.sub(ad.add(recon, prior), kl * float(beta))


def m2_loss_labeled(model: M2Model, x: np.ndarray, y: np.ndarray, rng: RngStream,
                    beta: float = 1.0, ctx: Ctx | None = None) -> tuple[Tensor, Tensor]:
    """Per-sample (L(x,y), -alpha*log q(y|x)); both are minimized.

    L(x,y) is the negative conditional evidence bound with the latent code
    drawn once from q(z|x) (the encoder never sees the label).
    """
    ctx = ctx or Ctx()
    y = np.asarray(y)
    if model.alpha is None:
        raise RuntimeError("model.alpha is unset; m2_fit derives it from the labeled count")
    xt = as_input(x)
    post = model.encode(xt, ctx)
    z = ad.reshape(reparameterize(post, rng, 1), (post.batch, post.dim))
    kl = kl_standard_normal(post)
    y_oh = Tensor(one_hot(y, model.n_classes, dtype=xt.dtype))
    logp_y = np.log(model.class_prior)[y]
    elbo_l = _conditional_elbo(model, xt, z, y_oh, kl, logp_y, beta, ctx)
    loss_l = ad.neg(elbo_l)

    logits = model.classifier_logits(xt, ctx)
    nll = ad.neg(ad.sum_(ad.mul(ad.log_softmax(logits), y_oh), axis=1))
    cls = nll * float(model.alpha)
    return loss_l, cls


def m2_loss_unlabeled(model: M2Model, x: np.ndarray, rng: RngStream,
                      beta: float = 1.0, ctx: Ctx | None = None) -> Tensor:
    """Per-sample U(x): the label-marginalized bound, decoder run once per class.

    U(x) = sum_y q(y|x) L(x,y) - H(q(y|x)), evaluated exactly over all classes
    with a single shared z draw per sample.
    """
    ctx = ctx or Ctx()
    k = model.n_classes
    xt = as_input(x)
    batch = xt.shape[0]
    post = model.encode(xt, ctx)
    z = ad.reshape(reparameterize(post, rng, 1), (batch, post.dim))
    kl = kl_standard_normal(post)

    # Row layout is sample-major: (b0,c0), (b0,c1), ..., so a (B, K) reshape
    # lines the class sum up with q(y|x) without transposes. Summation order
    # over classes is fixed by construction.
    z_rep = ad.repeat_rows(z, k)
    x_rep = Tensor(np.repeat(xt.data, k, axis=0))
    kl_rep = ad.reshape(ad.repeat_rows(ad.reshape(kl, (batch, 1)), k), (batch * k,))
    y_oh = Tensor(np.tile(np.eye(k, dtype=xt.dtype), (batch, 1)))
    logp_y = np.tile(np.log(model.class_prior), batch)

    elbo_rows = _conditional_elbo(model, x_rep, z_rep, y_oh, kl_rep, logp_y, beta, ctx)
    loss_mat = ad.reshape(ad.neg(elbo_rows), (batch, k))          # L(x,y) per class

    logits = model.classifier_logits(xt, ctx)
    q = ad.softmax(logits)
    log_q = ad.log_softmax(logits)
    expected_loss = ad.sum_(ad.mul(q, loss_mat), axis=1)
    entropy = ad.neg(ad.sum_(ad.mul(q, log_q), axis=1))
    return ad.sub(expected_loss, entropy)


@dataclass
class SemiSupLosses:
    """Objective pieces summed over the evaluated sets; total is their sum."""
    l_labeled: float
    u_unlabeled: float
    cls_term: float

    @property
    def total(self) -> float:
        return self.u_unlabeled + self.l_labeled + self.cls_term


def m2_objective(model: M2Model, x_l: np.ndarray, y_l: np.ndarray,
                 x_u: np.ndarray, rng: RngStream, beta: float = 1.0,
                 ctx: Ctx | None = None) -> SemiSupLosses:
    """Summed objective over the given labeled and unlabeled sets (no training)."""
    ctx = ctx or Ctx()
    loss_l, cls = m2_loss_labeled(model, x_l, y_l, rng, beta, ctx)
    pieces = SemiSupLosses(
        l_labeled=ad.sum_(loss_l).item(),
        u_unlabeled=0.0,
        cls_term=ad.sum_(cls).item(),
    )
    if len(x_u):
        pieces.u_unlabeled = ad.sum_(m2_loss_unlabeled(model, x_u, rng, beta, ctx)).item()
    return pieces


# ---------------------------------------------------------------------------
# M2 training
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class M2TrainConfig:
    batch_size: int = 200
    epochs: int = 10
    lr: float = 1e-4
    rho: float = 0.9
    opt_eps: float = 1e-8
    beta: BetaSchedule = field(default_factory=BetaSchedule)
    anneal_kl: bool = True  # False pins beta at its end value
    alpha_scale: float = 0.1


@dataclass
class M2EpochStats:
    epoch: int
    l_labeled: float
    u_unlabeled: float
    cls: float
    total: float


@dataclass
class M2TrainLog:
    epochs: list[M2EpochStats] = field(default_factory=list)

    def write_csv(self, path):
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["epoch", "L_labeled", "U_unlabeled", "cls", "total"])
            for row in self.epochs:
                writer.writerow([row.epoch, f"{row.l_labeled:.6f}", f"{row.u_unlabeled:.6f}",
                                 f"{row.cls:.6f}", f"{row.total:.6f}"])


def m2_fit(model: M2Model, x_l: np.ndarray, y_l: np.ndarray, x_u: np.ndarray,
           config: M2TrainConfig, rng: RngStream) -> M2TrainLog:
    """Joint RMSprop on the combined objective.

    Every step draws one labeled and (when available) one unlabeled batch
    through shared parameters; the smaller stream is recycled with fresh
    shuffles. Epoch length follows the larger stream. Per-step loss is the
    mean over each batch, keeping gradient scale independent of the split.
    """
    x_l = np.ascontiguousarray(x_l, dtype=np.float32)
    x_u = np.ascontiguousarray(x_u, dtype=np.float32)
    y_l = np.asarray(y_l)
    n_l, n_u = len(x_l), len(x_u)
    if n_l == 0:
        raise ValueError("M2 training requires at least one labeled sample")
    if model.alpha is None:
        model.alpha = config.alpha_scale * n_l

    lab_batcher = MiniBatcher(n_l, min(config.batch_size, n_l), rng.child("labeled"))
    unl_batcher = MiniBatcher(n_u, config.batch_size, rng.child("unlabeled")) if n_u else None
    noise = rng.child("noise")
    steps = max(1, -(-max(n_l, n_u) // config.batch_size))
    log = M2TrainLog()
    last_good = model.store.snapshot()

    for epoch in range(config.epochs):
        beta = config.beta.value(epoch) if config.anneal_kl else config.beta.end
        sums = np.zeros(3)
        for _ in range(steps):
            ctx = Ctx(training=True, rng=noise)
            li = lab_batcher.next_indices()
            loss_l, cls = m2_loss_labeled(model, x_l[li], y_l[li], noise, beta, ctx)
            loss = ad.add(ad.mean_(loss_l), ad.mean_(cls))
            u_val = 0.0
            if unl_batcher is not None:
                ui = unl_batcher.next_indices()
                loss_u = ad.mean_(m2_loss_unlabeled(model, x_u[ui], noise, beta, ctx))
                loss = ad.add(loss, loss_u)
                u_val = loss_u.item()
            if not np.isfinite(loss.data):
                model.store.restore(last_good)
                raise TrainingDiverged(
                    f"non-finite M2 loss in epoch {epoch}; restored last good parameters")
            model.store.zero_grads()
            loss.backward()
            rmsprop_step(model.store, lr=config.lr, rho=config.rho, eps=config.opt_eps)
            sums += [ad.mean_(loss_l).item(), u_val, ad.mean_(cls).item()]
        l_m, u_m, c_m = sums / steps
        log.epochs.append(M2EpochStats(epoch, l_m, u_m, c_m, l_m + u_m + c_m))
        last_good = model.store.snapshot()

    model.trained = True
    return log


# ---------------------------------------------------------------------------
# Prediction
# ---------------------------------------------------------------------------

def predict(model, x: np.ndarray) -> np.ndarray:
    """Deterministic class predictions for a trained M1 or M2 model."""
    if isinstance(model, M1Model):
        if not model.classifier.trained:
            raise RuntimeError("M1 classifier is not trained")
        return model.classifier.predict(m1_extract_features(model, x))
    if isinstance(model, M2Model):
        if not model.trained:
            raise RuntimeError("M2 model is not trained")
        return m2_classify(model, x).predictions
    raise TypeError(f"predict() does not know model type {type(model).__name__}")
