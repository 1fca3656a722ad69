"""Layer primitives, parameter store, and the network blocks shared by all models."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import NonFiniteError, ShapeError, Tensor
from .rng import RngStream


class TrainingDiverged(RuntimeError):
    """Loss went non-finite; training was rolled back to the last good state."""


# ---------------------------------------------------------------------------
# Parameters
# ---------------------------------------------------------------------------

class Param:
    """One named entry: value tensor, gradient, RMSprop accumulator."""

    __slots__ = ("name", "tensor", "accumulator")

    def __init__(self, name: str, value: np.ndarray):
        self.name = name
        self.tensor = Tensor(np.ascontiguousarray(value, dtype=np.float32), requires_grad=True)
        self.accumulator = np.zeros_like(self.tensor.data)

    @property
    def value(self) -> np.ndarray:
        return self.tensor.data

    @property
    def grad(self):
        return self.tensor.grad


class ParamStore:
    """Ordered collection of Params; one store per model, one optimizer state."""

    def __init__(self):
        self._params: dict[str, Param] = {}

    def add(self, name: str, value: np.ndarray) -> Param:
        if name in self._params:
            raise ShapeError(f"duplicate parameter name {name!r}")
        p = Param(name, value)
        self._params[name] = p
        return p

    def __getitem__(self, name: str) -> Param:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __len__(self) -> int:
        return len(self._params)

    def params(self) -> list[Param]:
        return list(self._params.values())

    def names(self) -> list[str]:
        return list(self._params.keys())

    def zero_grads(self):
        for p in self._params.values():
            p.tensor.grad = None

    def values(self) -> dict[str, np.ndarray]:
        return {name: p.tensor.data for name, p in self._params.items()}

    def snapshot(self) -> dict[str, np.ndarray]:
        return {name: p.tensor.data.copy() for name, p in self._params.items()}

    def restore(self, snap: dict[str, np.ndarray]):
        for name, value in snap.items():
            self._params[name].tensor.data = value.copy()

    def load_values(self, values: dict[str, np.ndarray]):
        for name, p in self._params.items():
            if name not in values:
                raise KeyError(f"checkpoint is missing parameter {name!r}")
            if values[name].shape != p.tensor.data.shape:
                raise ShapeError(
                    f"checkpoint shape {values[name].shape} != {p.tensor.data.shape} for {name!r}")
            p.tensor.data = np.ascontiguousarray(values[name], dtype=np.float32)

    def astype(self, dtype):
        """Cast every value in place (float64 graphs for oracle work)."""
        for p in self._params.values():
            p.tensor.data = p.tensor.data.astype(dtype)
            p.accumulator = p.accumulator.astype(dtype)


def init_uniform(rng: RngStream, shape, fan_in: int) -> np.ndarray:
    """Fan-in-scaled uniform init, the deterministic default everywhere."""
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, shape)


# ---------------------------------------------------------------------------
# Forward context and layers
# ---------------------------------------------------------------------------

@dataclass
class Ctx:
    """Per-forward switches: training toggles dropout/batch-stats, rng feeds masks."""
    training: bool = False
    rng: RngStream | None = None


class Layer:
    def __call__(self, x: Tensor, ctx: Ctx) -> Tensor:
        raise NotImplementedError


class Dense(Layer):
    def __init__(self, store: ParamStore, name: str, in_dim: int, out_dim: int, rng: RngStream):
        self.name = name
        self.w = store.add(f"{name}.w", init_uniform(rng, (in_dim, out_dim), in_dim))
        self.b = store.add(f"{name}.b", np.zeros(out_dim, dtype=np.float32))

    def __call__(self, x, ctx):
        return ad.dense(x, self.w.tensor, self.b.tensor)


class Conv1d(Layer):
    def __init__(self, store, name, in_chan, out_chan, kernel, stride, rng,
                 padding=0, bias=True):
        self.name = name
        self.stride = stride
        self.padding = padding
        self.w = store.add(f"{name}.w",
                           init_uniform(rng, (out_chan, in_chan, kernel), in_chan * kernel))
        # bias=False when a BatchNorm follows: the norm cancels channel shifts,
        # leaving the bias as a zero-gradient direction.
        self.b = store.add(f"{name}.b", np.zeros(out_chan, dtype=np.float32)) if bias else None

    def __call__(self, x, ctx):
        out = ad.conv1d(x, self.w.tensor, self.stride, self.padding)
        if self.b is None:
            return out
        return ad.add(out, ad.reshape(self.b.tensor, (1, -1, 1)))


class TransposeConv1d(Layer):
    def __init__(self, store, name, in_chan, out_chan, kernel, stride, rng):
        self.name = name
        self.stride = stride
        self.w = store.add(f"{name}.w",
                           init_uniform(rng, (in_chan, out_chan, kernel), in_chan * kernel))
        self.b = store.add(f"{name}.b", np.zeros(out_chan, dtype=np.float32))

    def __call__(self, x, ctx):
        out = ad.transpose_conv1d(x, self.w.tensor, self.stride)
        return ad.add(out, ad.reshape(self.b.tensor, (1, -1, 1)))


class BatchNorm(Layer):
    def __init__(self, store, name, n_chan, momentum=0.9, eps=1e-5):
        self.name = name
        self.momentum = momentum
        self.eps = eps
        self.gamma = store.add(f"{name}.gamma", np.ones(n_chan, dtype=np.float32))
        self.beta = store.add(f"{name}.beta", np.zeros(n_chan, dtype=np.float32))
        # Running statistics live outside the store: state, not parameters.
        self.running_mean = np.zeros(n_chan, dtype=np.float32)
        self.running_var = np.ones(n_chan, dtype=np.float32)

    def __call__(self, x, ctx):
        return ad.batch_norm(x, self.gamma.tensor, self.beta.tensor,
                             self.running_mean, self.running_var,
                             training=ctx.training, momentum=self.momentum, eps=self.eps)

    def state(self) -> dict[str, np.ndarray]:
        return {f"{self.name}.running_mean": self.running_mean,
                f"{self.name}.running_var": self.running_var}

    def load_state(self, values: dict[str, np.ndarray]):
        self.running_mean = values[f"{self.name}.running_mean"].astype(np.float32).copy()
        self.running_var = values[f"{self.name}.running_var"].astype(np.float32).copy()


class ReLU(Layer):
    name = "relu"

    def __call__(self, x, ctx):
        return ad.relu(x)


class Dropout(Layer):
    def __init__(self, name: str, rate: float):
        self.name = name
        self.rate = rate

    def __call__(self, x, ctx):
        if ctx.training and ctx.rng is None:
            raise ShapeError(f"{self.name}: training-mode forward needs an RngStream")
        return ad.dropout(x, self.rate, ctx.rng, ctx.training)


class MaxPool1d(Layer):
    def __init__(self, name: str, width: int):
        self.name = name
        self.width = width

    def __call__(self, x, ctx):
        return ad.max_pool1d(x, self.width)


class Flatten(Layer):
    name = "flatten"

    def __call__(self, x, ctx):
        return ad.reshape(x, (x.shape[0], -1))


class Sequential:
    """Chain of layers; the output is checked finite, and on failure the saved
    per-layer activations are walked to name the first offending layer."""

    def __init__(self, name: str, layers: list[Layer]):
        self.name = name
        self.layers = layers

    def __call__(self, x: Tensor, ctx: Ctx) -> Tensor:
        outputs = []
        for layer in self.layers:
            x = layer(x, ctx)
            outputs.append(x)
        if not ad.all_finite(x.data):
            for layer, out in zip(self.layers, outputs):
                if not ad.all_finite(out.data):
                    raise NonFiniteError(
                        f"non-finite activations after {self.name}/{layer.name}")
            raise NonFiniteError(f"non-finite activations in {self.name}")
        return x

    def bn_state(self) -> dict[str, np.ndarray]:
        state = {}
        for layer in self.layers:
            if isinstance(layer, BatchNorm):
                state.update(layer.state())
        return state

    def load_bn_state(self, values):
        for layer in self.layers:
            if isinstance(layer, BatchNorm):
                layer.load_state(values)


# ---------------------------------------------------------------------------
# Network blocks
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class EncoderSpec:
    """Conv feature extractor geometry for the VAE/AE encoder path."""
    input_dim: int = 1024
    filters: tuple[int, int] = (16, 32)
    kernel: int = 8
    stride: int = 4
    dropout: float = 0.25
    bn_momentum: float = 0.9

    def lengths(self) -> tuple[int, int, int]:
        l0 = self.input_dim
        l1 = ad.conv_out_len(l0, self.kernel, self.stride)
        l2 = ad.conv_out_len(l1, self.kernel, self.stride)
        return l0, l1, l2

    @property
    def flat_dim(self) -> int:
        return self.filters[1] * self.lengths()[2]


@dataclass(frozen=True)
class ClassifierSpec:
    """Conv classifier geometry: 2 conv + 2 max-pool blocks, then a logit head."""
    input_dim: int = 1024
    n_classes: int = 10
    filters: tuple[int, int] = (16, 32)
    kernel: int = 8
    stride: int = 2
    pool_width: int = 2
    dropout: float = 0.25

    def flat_dim(self) -> int:
        l = ad.conv_out_len(self.input_dim, self.kernel, self.stride) // self.pool_width
        l = ad.conv_out_len(l, self.kernel, self.stride) // self.pool_width
        return self.filters[1] * l


def build_conv_encoder(store: ParamStore, prefix: str, spec: EncoderSpec,
                       rng: RngStream, head_dim: int) -> tuple[Sequential, Dense]:
    """Two conv blocks (BN, ReLU, dropout) plus a linear head of head_dim outputs."""
    trunk = Sequential(prefix, [
        Conv1d(store, f"{prefix}.conv1", 1, spec.filters[0], spec.kernel, spec.stride,
               rng, bias=False),
        BatchNorm(store, f"{prefix}.bn1", spec.filters[0], spec.bn_momentum),
        ReLU(),
        Dropout(f"{prefix}.drop1", spec.dropout),
        Conv1d(store, f"{prefix}.conv2", spec.filters[0], spec.filters[1],
               spec.kernel, spec.stride, rng, bias=False),
        BatchNorm(store, f"{prefix}.bn2", spec.filters[1], spec.bn_momentum),
        ReLU(),
        Dropout(f"{prefix}.drop2", spec.dropout),
        Flatten(),
    ])
    head = Dense(store, f"{prefix}.head", spec.flat_dim, head_dim, rng)
    return trunk, head


class ConvDecoder:
    """Linear stage reshaped to the deepest feature map, then 3 transpose convs.

    Kernel sizes are derived so each stage exactly inverts the matching encoder
    length (the floor lost by strided conv is folded into the kernel); the last
    stage is a width-1 linear mix down to one channel.
    """

    def __init__(self, store: ParamStore, prefix: str, spec: EncoderSpec,
                 rng: RngStream, in_dim: int):
        self.name = prefix
        self.spec = spec
        l0, l1, l2 = spec.lengths()
        c2, c1 = spec.filters[1], spec.filters[0]
        cmid = max(c1 // 2, 1)
        k1 = spec.kernel + (l1 - spec.kernel) % spec.stride
        k2 = spec.kernel + (l0 - spec.kernel) % spec.stride
        self.l2, self.c2 = l2, c2
        self.fc = Dense(store, f"{prefix}.fc", in_dim, c2 * l2, rng)
        self.stages = Sequential(prefix, [
            TransposeConv1d(store, f"{prefix}.tconv1", c2, c1, k1, spec.stride, rng),
            ReLU(),
            TransposeConv1d(store, f"{prefix}.tconv2", c1, cmid, k2, spec.stride, rng),
            ReLU(),
            TransposeConv1d(store, f"{prefix}.tconv3", cmid, 1, 1, 1, rng),
        ])

    def __call__(self, z: Tensor, ctx: Ctx) -> Tensor:
        h = ad.relu(self.fc(z, ctx))
        h = ad.reshape(h, (z.shape[0], self.c2, self.l2))
        out = self.stages(h, ctx)
        return ad.reshape(out, (z.shape[0], self.spec.input_dim))


def build_conv_classifier(store: ParamStore, prefix: str, spec: ClassifierSpec,
                          rng: RngStream) -> Sequential:
    """Returns logits of shape (B, n_classes); apply softmax downstream."""
    return Sequential(prefix, [
        Conv1d(store, f"{prefix}.conv1", 1, spec.filters[0], spec.kernel, spec.stride, rng),
        ReLU(),
        Dropout(f"{prefix}.drop1", spec.dropout),
        MaxPool1d(f"{prefix}.pool1", spec.pool_width),
        Conv1d(store, f"{prefix}.conv2", spec.filters[0], spec.filters[1],
               spec.kernel, spec.stride, rng),
        ReLU(),
        Dropout(f"{prefix}.drop2", spec.dropout),
        MaxPool1d(f"{prefix}.pool2", spec.pool_width),
        Flatten(),
        Dense(store, f"{prefix}.head", spec.flat_dim(), spec.n_classes, rng),
    ])


def as_input(x) -> Tensor:
    """Wrap model input as a float32 tensor; explicit float64 arrays pass through."""
    if isinstance(x, Tensor):
        return x
    arr = np.asarray(x)
    if arr.dtype != np.float64:
        arr = arr.astype(np.float32, copy=False)
    return Tensor(arr)


def as_channel(x: Tensor) -> Tensor:
    """(B, L) -> (B, 1, L) for the conv stacks."""
    return ad.reshape(x, (x.shape[0], 1, x.shape[1]))


def one_hot(labels: np.ndarray, n_classes: int, dtype=np.float32) -> np.ndarray:
    labels = np.asarray(labels)
    out = np.zeros((labels.shape[0], n_classes), dtype=dtype)
    out[np.arange(labels.shape[0]), labels] = 1.0
    return out


def cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean negative log-likelihood of integer labels under softmax(logits)."""
    onehot = Tensor(one_hot(labels, logits.shape[1], dtype=logits.data.dtype))
    per_sample = ad.sum_(ad.mul(ad.log_softmax(logits), onehot), axis=1)
    return ad.neg(ad.mean_(per_sample))


@dataclass
class MiniBatcher:
    """Cycles over an index range in shuffled minibatches, reshuffling each pass."""
    n: int
    batch_size: int
    rng: RngStream
    _order: np.ndarray = field(default=None, repr=False)
    _pos: int = 0

    def next_indices(self) -> np.ndarray:
        if self.n == 0:
            raise ShapeError("cannot draw batches from an empty set")
        if self._order is None or self._pos >= self.n:
            self._order = self.rng.permutation(self.n)
            self._pos = 0
        take = min(self.batch_size, self.n - self._pos)
        idx = self._order[self._pos:self._pos + take]
        self._pos += take
        return idx
