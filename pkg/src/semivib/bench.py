"""Benchmark harness: label-budget sweeps, report emission, reconstruction dumps."""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field

import numpy as np

from .autodiff import NonFiniteError
from .baselines import AeModel, CnnModel, PcaModel, ae_fit, cnn_fit, pca_fit_transform
from .checkpoint import load_checkpoint
from .data import (Segment, SemiSplit, SynthSpec, cwru_train_test_segments,
                   ims_train_test_segments, label_budget, load_cwru,
                   load_dataset_dir, load_ims, segment, segments_matrix,
                   shuffle_split, synth_generate, znorm)
from .models import (LinearFitConfig, M1Model, M2Model, M2TrainConfig,
                     MissingClassError, m1_fit, m2_fit, predict)
from .nn import ClassifierSpec, EncoderSpec, TrainingDiverged
from .rng import RngStream, derive_seed
from .vae import BetaSchedule, TrainConfig, VaeModel

METHOD_NAMES = ("pca", "ae", "cnn", "m1", "m2")

DEFAULT_BUDGETS = {
    "cwru": (10, 50, 100, 300, 516, 860, 1075, 2150),
    "ims": (10, 40, 100, 200, 400, 800, 1000, 2000, 4000, 8000),
    "synth": (40, 400),
}


@dataclass(frozen=True)
class ModelProfile:
    """Hyperparameter bundle shared by all methods in a sweep."""
    name: str = "paper"
    input_dim: int = 1024
    latent_dim: int = 128
    enc_filters: tuple[int, int] = (16, 32)
    enc_kernel: int = 8
    enc_stride: int = 4
    cls_filters: tuple[int, int] = (16, 32)
    cls_kernel: int = 8
    cls_stride: int = 2
    pool_width: int = 2
    dropout: float = 0.25
    batch_size: int = 200
    epochs: int = 10
    lr: float = 1e-4
    beta_warmup: int = 5
    anneal_m2: bool = True
    alpha_scale: float = 0.1
    pca_k: int = 128
    classifier_loss: str = "logistic"
    clf_weight_decay: float = 1e-4

    def encoder_spec(self) -> EncoderSpec:
        return EncoderSpec(input_dim=self.input_dim, filters=self.enc_filters,
                           kernel=self.enc_kernel, stride=self.enc_stride,
                           dropout=self.dropout)

    def classifier_spec(self, n_classes: int) -> ClassifierSpec:
        return ClassifierSpec(input_dim=self.input_dim, n_classes=n_classes,
                              filters=self.cls_filters, kernel=self.cls_kernel,
                              stride=self.cls_stride, pool_width=self.pool_width,
                              dropout=self.dropout)

    def train_config(self) -> TrainConfig:
        return TrainConfig(batch_size=self.batch_size, epochs=self.epochs, lr=self.lr,
                           beta=BetaSchedule(warmup_epochs=self.beta_warmup))

    def m2_config(self) -> M2TrainConfig:
        return M2TrainConfig(batch_size=self.batch_size, epochs=self.epochs, lr=self.lr,
                             beta=BetaSchedule(warmup_epochs=self.beta_warmup),
                             anneal_kl=self.anneal_m2, alpha_scale=self.alpha_scale)

    def linear_fit_config(self) -> LinearFitConfig:
        return LinearFitConfig(loss=self.classifier_loss,
                               weight_decay=self.clf_weight_decay)


# Desk profile: narrower nets and a faster learning rate so the synthetic
# benchmark finishes in minutes on a laptop. The stronger classification
# weight keeps the supervised signal competitive with the entropy term at
# tiny label budgets, and the heavier linear-head weight decay stops the
# PCA/AE baselines from coasting on small-sample overfit luck. The paper
# profile keeps the published training hyperparameters.
PROFILES = {
    "paper": ModelProfile(),
    "desk": ModelProfile(name="desk", latent_dim=32, enc_filters=(8, 16),
                         cls_filters=(8, 16), pca_k=32, lr=1e-3,
                         alpha_scale=1.0, clf_weight_decay=3e-2),
}


def profile_by_name(name: str) -> ModelProfile:
    if name not in PROFILES:
        raise ValueError(f"unknown profile {name!r}; choose from {sorted(PROFILES)}")
    return PROFILES[name]


@dataclass(frozen=True)
class ExperimentConfig:
    dataset: str = "synth"
    methods: tuple[str, ...] = METHOD_NAMES
    budgets: tuple[int, ...] = ()          # () = dataset defaults
    rounds: int = 10
    seed: int = 0
    root: str | None = None                # cwru/ims roots or synth-on-disk
    label_policy: str | None = None        # None = per-dataset default
    fixed_test: bool = False
    profile: ModelProfile = field(default_factory=ModelProfile)
    snr_db: float = 10.0
    synth_train_recordings: int = 100
    synth_test_recordings: int = 10

    def resolved_budgets(self) -> tuple[int, ...]:
        budgets = self.budgets or DEFAULT_BUDGETS[self.dataset]
        if list(budgets) != sorted(set(budgets)):
            raise ValueError(f"budgets must be strictly increasing, got {budgets}")
        return tuple(budgets)

    def resolved_policy(self) -> str:
        if self.label_policy:
            return self.label_policy
        return "from_end" if self.dataset == "ims" else "random"


@dataclass
class CellResult:
    """One (dataset, method, budget) cell: per-round accuracies in percent."""
    dataset: str
    method: str
    n_labels: int
    accuracies: list[float]                # nan = that round's training aborted
    seconds: float

    @property
    def completed(self) -> list[float]:
        return [a for a in self.accuracies if not math.isnan(a)]

    @property
    def mean(self) -> float:
        done = self.completed
        return float(np.mean(done)) if done else float("nan")

    @property
    def std(self) -> float:
        done = self.completed
        return float(np.std(done)) if done else float("nan")  # population std

    @property
    def failed(self) -> bool:
        return len(self.completed) < len(self.accuracies)


@dataclass
class ExperimentReport:
    rows: list[CellResult] = field(default_factory=list)

    def cell(self, method: str, n_labels: int) -> CellResult:
        for row in self.rows:
            if row.method == method and row.n_labels == n_labels:
                return row
        raise KeyError((method, n_labels))

    def sorted_rows(self) -> list[CellResult]:
        return sorted(self.rows, key=lambda r: (r.dataset, r.method, r.n_labels))


# ---------------------------------------------------------------------------
# Dataset sources
# ---------------------------------------------------------------------------

class _Source:
    """Serves normalized (train, test) segment lists for each sweep round."""

    def __init__(self, cfg: ExperimentConfig):
        self.cfg = cfg
        self.n_classes = {"cwru": 10, "ims": 4, "synth": 4}[cfg.dataset]
        if cfg.dataset == "cwru":
            train, test = cwru_train_test_segments(load_cwru(cfg.root))
            self._fixed = (znorm(train), znorm(test))
            self._per_class = None
        elif cfg.dataset == "ims":
            train, test = ims_train_test_segments(load_ims(cfg.root))
            self._fixed = (znorm(train), znorm(test))
            self._per_class = None
        elif cfg.dataset == "synth":
            if cfg.root:
                recs = load_dataset_dir(cfg.root)
                labels = sorted({r.class_label for r in recs})
                self.n_classes = len(labels)
                self._per_class = [
                    sorted((r for r in recs if r.class_label == lbl),
                           key=lambda r: r.source_id)
                    for lbl in labels]
            else:
                spec = SynthSpec(snr_db=cfg.snr_db)
                n_recs = cfg.synth_train_recordings + cfg.synth_test_recordings
                rng = RngStream(cfg.seed).child("synth")
                self._per_class = [synth_generate(c, n_recs, rng, spec)
                                   for c in range(spec.n_classes)]
            self._fixed = None
        else:
            raise ValueError(f"unknown dataset {cfg.dataset!r}")

    def split_for_round(self, round_idx: int) -> tuple[list[Segment], list[Segment]]:
        cfg = self.cfg
        if self._fixed is not None:
            # Measured datasets: the train/test regions are protocol-fixed;
            # rounds differ through label draws and training randomness.
            train, test = self._fixed
            train = shuffle_split(train, derive_seed(cfg.seed, "shuffle", round_idx))
            return train, test
        train, test = [], []
        for cls, recs in enumerate(self._per_class):
            n_train = len(recs) - cfg.synth_test_recordings
            if n_train < 1:
                raise ValueError(f"class {cls}: {len(recs)} recordings cannot spare "
                                 f"{cfg.synth_test_recordings} for test")
            if cfg.fixed_test:
                order = np.arange(len(recs))
            else:
                order = RngStream(derive_seed(cfg.seed, "testdraw", round_idx, cls)) \
                    .permutation(len(recs))
            for i in order[:n_train]:
                train.extend(segment(recs[i]))
            for i in order[n_train:]:
                test.extend(segment(recs[i]))
        return znorm(train), znorm(test)


# ---------------------------------------------------------------------------
# Method runners
# ---------------------------------------------------------------------------

def evaluate_accuracy(model, x_test: np.ndarray, y_test: np.ndarray,
                      chunk: int = 256) -> float:
    """Top-1 accuracy in percent, computed in batches."""
    hits = 0
    for start in range(0, len(x_test), chunk):
        xs = x_test[start:start + chunk]
        ys = y_test[start:start + chunk]
        if isinstance(model, (M1Model, M2Model)):
            pred = predict(model, xs)
        elif isinstance(model, CnnModel):
            pred = model.predict(xs)
        elif isinstance(model, PcaModel):
            pred = model.classifier.predict(model.transform(xs))
        elif isinstance(model, AeModel):
            pred = model.classifier.predict(model.features(xs))
        else:
            raise TypeError(f"cannot evaluate {type(model).__name__}")
        hits += int((pred == ys).sum())
    return 100.0 * hits / len(x_test)


def train_method(method: str, split: SemiSplit, profile: ModelProfile,
                 n_classes: int, seed: int, return_log: bool = False):
    """Train one method on one split; returns the fitted model (and its
    training log when return_log is set; PCA has none)."""
    x_l, y_l = segments_matrix(split.labeled)
    x_u, _ = segments_matrix(split.unlabeled)
    x_all = np.concatenate([x_l, x_u], axis=0) if len(x_u) else x_l
    rng = RngStream(seed).child("train")

    if method == "pca":
        model, log = pca_fit_transform(x_all, profile.pca_k, x_l, y_l, n_classes,
                                       seed=seed,
                                       clf_config=profile.linear_fit_config()), None
    elif method == "ae":
        model = AeModel(profile.encoder_spec(), code_dim=profile.latent_dim, seed=seed)
        log = ae_fit(model, x_all, x_l, y_l, n_classes, profile.train_config(), rng,
                     clf_config=profile.linear_fit_config())
    elif method == "cnn":
        model = CnnModel(profile.classifier_spec(n_classes), seed=seed)
        log = cnn_fit(model, x_l, y_l, profile.train_config(), rng)
    elif method == "m1":
        vae = VaeModel(profile.encoder_spec(), latent_dim=profile.latent_dim, seed=seed)
        model = M1Model(vae, n_classes, seed=seed,
                        classifier_loss=profile.classifier_loss)
        log = m1_fit(model, x_all, x_l, y_l, profile.train_config(), rng,
                     clf_config=profile.linear_fit_config())
    elif method == "m2":
        model = M2Model(n_classes, profile.encoder_spec(),
                        profile.classifier_spec(n_classes),
                        latent_dim=profile.latent_dim, seed=seed)
        log = m2_fit(model, x_l, y_l, x_u, profile.m2_config(), rng)
    else:
        raise ValueError(f"unknown method {method!r}; choose from {METHOD_NAMES}")
    return (model, log) if return_log else model


# ---------------------------------------------------------------------------
# Sweep
# ---------------------------------------------------------------------------

def run_sweep(cfg: ExperimentConfig, progress=None) -> ExperimentReport:
    """Full (method x budget x round) grid; training aborts mark the round
    failed (nan accuracy) without stopping the sweep."""
    if cfg.rounds < 1:
        raise ValueError("rounds must be >= 1")
    budgets = cfg.resolved_budgets()
    policy = cfg.resolved_policy()
    for method in cfg.methods:
        if method not in METHOD_NAMES:
            raise ValueError(f"unknown method {method!r}; choose from {METHOD_NAMES}")
    source = _Source(cfg)

    cells = {(m, n): CellResult(cfg.dataset, m, n, [], 0.0)
             for m in cfg.methods for n in budgets}
    for round_idx in range(cfg.rounds):
        train, test = source.split_for_round(round_idx)
        for n_labels in budgets:
            split = label_budget(train, test, n_labels, policy=policy,
                                 seed=derive_seed(cfg.seed, "labels", round_idx, n_labels))
            for method in cfg.methods:
                cell = cells[(method, n_labels)]
                seed = derive_seed(cfg.seed, cfg.dataset, method, n_labels, round_idx)
                start = time.perf_counter()
                try:
                    model = train_method(method, split, cfg.profile,
                                         source.n_classes, seed)
                    x_t, y_t = segments_matrix(split.test)
                    acc = evaluate_accuracy(model, x_t, y_t)
                except (TrainingDiverged, NonFiniteError, MissingClassError) as exc:
                    acc = float("nan")
                    if progress:
                        progress(f"  round {round_idx} {method} N={n_labels}: FAILED ({exc})")
                cell.seconds += time.perf_counter() - start
                cell.accuracies.append(acc)
                if progress and not math.isnan(acc):
                    progress(f"  round {round_idx} {method} N={n_labels}: "
                             f"{acc:.2f}% ({cell.seconds:.1f}s total)")
    report = ExperimentReport(rows=list(cells.values()))
    return report


# ---------------------------------------------------------------------------
# Emission
# ---------------------------------------------------------------------------

REPORT_HEADER = "dataset,method,n_labels,acc_mean,acc_std,rounds,seconds"
ROUNDS_HEADER = "dataset,method,n_labels,round,accuracy"


def emit_report(report: ExperimentReport, path, seconds_mode: str = "wall"):
    """Aggregate CSV, one row per cell, stable (dataset, method, N) order.

    seconds_mode="wall" writes measured wall time; "zero" writes 0.00 so two
    equal-seed runs produce byte-identical files (timing is inherently
    non-reproducible; everything else in the row is deterministic).
    """
    if not report.rows:
        raise ValueError("refusing to emit an empty report")
    if seconds_mode not in ("wall", "zero"):
        raise ValueError(f"unknown seconds_mode {seconds_mode!r}")
    lines = [REPORT_HEADER]
    for row in report.sorted_rows():
        seconds = row.seconds if seconds_mode == "wall" else 0.0
        lines.append(f"{row.dataset},{row.method},{row.n_labels},"
                     f"{row.mean:.2f},{row.std:.2f},{len(row.completed)},{seconds:.2f}")
    with open(path, "w", newline="") as fh:
        fh.write("\n".join(lines) + "\n")


def emit_rounds(report: ExperimentReport, path):
    """Per-round sidecar so every aggregate is recomputable."""
    lines = [ROUNDS_HEADER]
    for row in report.sorted_rows():
        for round_idx, acc in enumerate(row.accuracies):
            lines.append(f"{row.dataset},{row.method},{row.n_labels},{round_idx},{acc:.2f}")
    with open(path, "w", newline="") as fh:
        fh.write("\n".join(lines) + "\n")


# ---------------------------------------------------------------------------
# Checkpoint dispatch and reconstruction dumps
# ---------------------------------------------------------------------------

MODEL_KINDS = {"vae": VaeModel, "ae": AeModel, "m1": M1Model, "m2": M2Model,
               "cnn": CnnModel, "pca": PcaModel}


def load_any_model(path):
    _, meta = load_checkpoint(path)
    kind = meta.get("kind")
    if kind not in MODEL_KINDS:
        raise ValueError(f"{path}: unknown model kind {kind!r}")
    return MODEL_KINDS[kind].load(path)


def reconstructions(model, x: np.ndarray, chunk: int = 256, rng=None) -> np.ndarray:
    if isinstance(model, M1Model):
        model = model.vae
    if not hasattr(model, "reconstruct"):
        raise ValueError(f"model kind {getattr(model, 'kind', '?')!r} has no decoder; "
                         "cannot dump reconstructions")
    kwargs = {} if rng is None else {"rng": rng}
    out = [model.reconstruct(x[s:s + chunk], **kwargs) for s in range(0, len(x), chunk)]
    return np.concatenate(out, axis=0)


def dump_reconstructions(model, segments: list[Segment] | np.ndarray, path,
                         rng=None) -> np.ndarray:
    """CSV rows (index, mse, original..., reconstruction...); returns the
    reconstructions for further plotting."""
    if isinstance(segments, np.ndarray):
        x = np.asarray(segments, dtype=np.float32)
    else:
        x, _ = segments_matrix(segments)
    xhat = reconstructions(model, x, rng=rng)
    mse = ((x - xhat) ** 2).mean(axis=1)
    dim = x.shape[1]
    header = (["index", "mse"] + [f"x_{i}" for i in range(dim)]
              + [f"xhat_{i}" for i in range(dim)])
    with open(path, "w", newline="") as fh:
        fh.write(",".join(header) + "\n")
        for i in range(len(x)):
            row = [str(i), f"{mse[i]:.6f}"]
            row.extend(f"{v:.6f}" for v in x[i])
            row.extend(f"{v:.6f}" for v in xhat[i])
            fh.write(",".join(row) + "\n")
    return xhat
