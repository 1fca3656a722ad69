"""Comparison methods: PCA + linear classifier, vanilla autoencoder, supervised CNN.

All three reuse the generative models' geometry and optimizer settings so the
benchmark differences come from the learning paradigm, not the budget:
the AE shares the VAE encoder/decoder shapes with a deterministic 128-d code,
and the CNN is exactly the M2 classifier network trained on labels alone.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .checkpoint import load_checkpoint, save_checkpoint
from .nn import (ClassifierSpec, Ctx, ConvDecoder, EncoderSpec, MiniBatcher,
                 ParamStore, TrainingDiverged, as_channel, as_input,
                 build_conv_classifier, build_conv_encoder, cross_entropy)
from .models import LinearClassifier, LinearFitConfig, require_all_classes
from .optim import rmsprop_step
from .rng import RngStream
from .vae import TrainConfig, VaeModel


# ---------------------------------------------------------------------------
# PCA + linear classifier
# ---------------------------------------------------------------------------

class PcaModel:
    """Top-k principal directions of the training segments."""

    kind = "pca"

    def __init__(self, mean: np.ndarray, components: np.ndarray):
        self.mean = mean.astype(np.float32)          # (D,)
        self.components = components.astype(np.float32)  # (D, k), orthonormal columns
        self.k = components.shape[1]
        self.classifier: LinearClassifier | None = None

    @classmethod
    def fit(cls, segments: np.ndarray, k: int) -> "PcaModel":
        x = np.asarray(segments, dtype=np.float64)
        n, dim = x.shape
        if k > dim:
            raise ValueError(f"k={k} exceeds the segment dimension {dim}")
        if k > n:
            raise ValueError(f"k={k} exceeds the number of segments {n}")
        mean = x.mean(axis=0)
        centered = x - mean
        cov = centered.T @ centered / n
        eigvals, eigvecs = np.linalg.eigh(cov)       # ascending order
        order = np.argsort(eigvals)[::-1][:k]
        return cls(mean, eigvecs[:, order])

    def transform(self, segments: np.ndarray) -> np.ndarray:
        x = np.asarray(segments, dtype=np.float32)
        return (x - self.mean) @ self.components

    def inverse_transform(self, coords: np.ndarray) -> np.ndarray:
        return coords @ self.components.T + self.mean

    def save(self, path):
        entries = {"pca.mean": self.mean, "pca.components": self.components}
        if self.classifier is not None:
            entries.update(self.classifier.entries("pca."))
        save_checkpoint(path, entries, {"kind": self.kind, "k": str(self.k)})

    @classmethod
    def load(cls, path) -> "PcaModel":
        entries, meta = load_checkpoint(path)
        if meta.get("kind") != cls.kind:
            raise ValueError(f"{path}: checkpoint kind {meta.get('kind')!r}, expected 'pca'")
        model = cls(entries["pca.mean"], entries["pca.components"])
        if "pca.clf.w" in entries:
            clf = LinearClassifier(model.k, entries["pca.clf.w"].shape[1])
            clf.load_entries(entries, "pca.")
            model.classifier = clf
        return model


def pca_fit_transform(segments: np.ndarray, k: int, x_l: np.ndarray, y_l: np.ndarray,
                      n_classes: int, seed: int = 0,
                      clf_config: LinearFitConfig = LinearFitConfig()) -> PcaModel:
    """Unsupervised projection fit on every segment, classifier on labels only."""
    model = PcaModel.fit(segments, k)
    clf = LinearClassifier(k, n_classes, seed=seed)
    clf.fit(model.transform(x_l), y_l, clf_config)
    model.classifier = clf
    return model


# ---------------------------------------------------------------------------
# Vanilla autoencoder
# ---------------------------------------------------------------------------

class AeModel:
    """Deterministic encoder/decoder with the VAE geometry and a 128-d code."""

    kind = "ae"

    def __init__(self, spec: EncoderSpec = EncoderSpec(), code_dim: int = 128,
                 seed: int = 0):
        self.spec = spec
        self.code_dim = code_dim
        self.input_dim = spec.input_dim
        self.store = ParamStore()
        rng = RngStream(seed).child("init")
        self.enc_trunk, self.enc_head = build_conv_encoder(self.store, "enc", spec, rng,
                                                           code_dim)
        self.decoder = ConvDecoder(self.store, "dec", spec, rng, code_dim)
        self.classifier: LinearClassifier | None = None
        self.trained = False

    def encode(self, x, ctx: Ctx = Ctx()) -> Tensor:
        x = as_input(x)
        return self.enc_head(self.enc_trunk(as_channel(x), ctx), ctx)

    def reconstruct(self, x, rng=None) -> np.ndarray:
        # rng accepted for interface parity; the code layer is deterministic
        return self.decoder(self.encode(x), Ctx()).data

    def features(self, x) -> np.ndarray:
        return self.encode(x).data

    def save(self, path):
        entries = dict(self.store.values())
        entries.update(self.enc_trunk.bn_state())
        if self.classifier is not None:
            entries.update(self.classifier.entries("ae."))
        meta = {
            "kind": self.kind, "code_dim": str(self.code_dim),
            "input_dim": str(self.spec.input_dim),
            "filters": ",".join(str(f) for f in self.spec.filters),
            "kernel": str(self.spec.kernel), "stride": str(self.spec.stride),
            "dropout": str(self.spec.dropout), "bn_momentum": str(self.spec.bn_momentum),
            "trained": "1" if self.trained else "0",
        }
        save_checkpoint(path, entries, meta)

    @classmethod
    def load(cls, path) -> "AeModel":
        entries, meta = load_checkpoint(path)
        if meta.get("kind") != cls.kind:
            raise ValueError(f"{path}: checkpoint kind {meta.get('kind')!r}, expected 'ae'")
        model = cls(VaeModel.spec_from_meta(meta), code_dim=int(meta["code_dim"]))
        model.store.load_values({k: v for k, v in entries.items() if k in model.store})
        model.enc_trunk.load_bn_state(entries)
        if "ae.clf.w" in entries:
            clf = LinearClassifier(model.code_dim, entries["ae.clf.w"].shape[1])
            clf.load_entries(entries, "ae.")
            model.classifier = clf
        model.trained = meta.get("trained", "0") == "1"
        return model


def ae_fit(model: AeModel, segments: np.ndarray, x_l: np.ndarray, y_l: np.ndarray,
           n_classes: int, config: TrainConfig, rng: RngStream,
           clf_config: LinearFitConfig = LinearFitConfig()) -> list[float]:
    """MSE reconstruction training on everything, then a classifier on code vectors."""
    segments = np.ascontiguousarray(segments, dtype=np.float32)
    n = segments.shape[0]
    batcher = MiniBatcher(n, config.batch_size, rng.child("batches"))
    noise = rng.child("noise")
    steps = max(1, -(-n // config.batch_size))
    mse_log = []
    last_good = model.store.snapshot()
    for epoch in range(config.epochs):
        total = 0.0
        for _ in range(steps):
            idx = batcher.next_indices()
            x = Tensor(segments[idx])
            ctx = Ctx(training=True, rng=noise)
            xhat = model.decoder(model.encode(x, ctx), ctx)
            diff = ad.sub(xhat, x)
            loss = ad.mean_(ad.mul(diff, diff))
            if not np.isfinite(loss.data):
                model.store.restore(last_good)
                raise TrainingDiverged(f"non-finite AE loss in epoch {epoch}")
            model.store.zero_grads()
            loss.backward()
            rmsprop_step(model.store, lr=config.lr, rho=config.rho, eps=config.opt_eps)
            total += loss.item()
        mse_log.append(total / steps)
        last_good = model.store.snapshot()
    model.trained = True

    clf = LinearClassifier(model.code_dim, n_classes, seed=rng.seed)
    clf.fit(model.features(x_l), y_l, clf_config)
    model.classifier = clf
    return mse_log


# ---------------------------------------------------------------------------
# Supervised CNN
# ---------------------------------------------------------------------------

class CnnModel:
    """The M2 classifier topology trained with plain cross-entropy on labels."""

    kind = "cnn"

    def __init__(self, spec: ClassifierSpec, seed: int = 0):
        self.spec = spec
        self.n_classes = spec.n_classes
        self.store = ParamStore()
        rng = RngStream(seed).child("init")
        self.net = build_conv_classifier(self.store, "cls", spec, rng)
        self.trained = False

    def logits(self, x, ctx: Ctx = Ctx()) -> Tensor:
        x = as_input(x)
        return self.net(as_channel(x), ctx)

    def predict(self, x) -> np.ndarray:
        return self.logits(x).data.argmax(axis=1)

    def save(self, path):
        meta = {
            "kind": self.kind, "n_classes": str(self.n_classes),
            "input_dim": str(self.spec.input_dim),
            "filters": ",".join(str(f) for f in self.spec.filters),
            "kernel": str(self.spec.kernel), "stride": str(self.spec.stride),
            "pool_width": str(self.spec.pool_width), "dropout": str(self.spec.dropout),
            "trained": "1" if self.trained else "0",
        }
        save_checkpoint(path, self.store.values(), meta)

    @classmethod
    def load(cls, path) -> "CnnModel":
        entries, meta = load_checkpoint(path)
        if meta.get("kind") != cls.kind:
            raise ValueError(f"{path}: checkpoint kind {meta.get('kind')!r}, expected 'cnn'")
        spec = ClassifierSpec(
            input_dim=int(meta["input_dim"]), n_classes=int(meta["n_classes"]),
            filters=tuple(int(f) for f in meta["filters"].split(",")),
            kernel=int(meta["kernel"]), stride=int(meta["stride"]),
            pool_width=int(meta["pool_width"]), dropout=float(meta["dropout"]),
        )
        model = cls(spec)
        model.store.load_values(entries)
        model.trained = meta.get("trained", "0") == "1"
        return model


def cnn_fit(model: CnnModel, x_l: np.ndarray, y_l: np.ndarray, config: TrainConfig,
            rng: RngStream) -> list[float]:
    """Supervised training; never touches unlabeled segments."""
    x_l = np.ascontiguousarray(x_l, dtype=np.float32)
    y_l = np.asarray(y_l)
    require_all_classes(y_l, model.n_classes)
    n = len(x_l)
    batcher = MiniBatcher(n, min(config.batch_size, n), rng.child("batches"))
    noise = rng.child("noise")
    steps = max(1, -(-n // config.batch_size))
    losses = []
    last_good = model.store.snapshot()
    for epoch in range(config.epochs):
        total = 0.0
        for _ in range(steps):
            idx = batcher.next_indices()
            logits = model.logits(x_l[idx], Ctx(training=True, rng=noise))
            loss = cross_entropy(logits, y_l[idx])
            if not np.isfinite(loss.data):
                model.store.restore(last_good)
                raise TrainingDiverged(f"non-finite CNN loss in epoch {epoch}")
            model.store.zero_grads()
            loss.backward()
            rmsprop_step(model.store, lr=config.lr, rho=config.rho, eps=config.opt_eps)
            total += loss.item()
        losses.append(total / steps)
        last_good = model.store.snapshot()
    model.trained = True
    return losses
