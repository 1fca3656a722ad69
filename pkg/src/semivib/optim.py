"""RMSprop update and the finite-difference gradient oracle."""

from __future__ import annotations

import numpy as np

from .autodiff import NonFiniteError
from .nn import ParamStore
from .rng import RngStream

DEFAULT_LR = 1e-4
DEFAULT_RHO = 0.9
DEFAULT_EPS = 1e-8


def rmsprop_step(store: ParamStore, lr: float = DEFAULT_LR, rho: float = DEFAULT_RHO,
                 eps: float = DEFAULT_EPS):
    """v <- rho*v + (1-rho)*g^2; w <- w - lr*g/(sqrt(v)+eps); grads zeroed after.

    Aborts without touching any parameter if any gradient is non-finite, so a
    diverged step can be rolled back from the last snapshot.
    """
    grads = {}
    bad = []
    for p in store.params():
        g = p.tensor.grad
        if g is None:
            raise NonFiniteError(f"parameter {p.name!r} has no gradient; run backward() first")
        if not np.isfinite(g).all():
            bad.append(f"{p.name} (|g|max={np.abs(g[np.isfinite(g)]).max() if np.isfinite(g).any() else 'n/a'})")
        grads[p.name] = g
    if bad:
        raise NonFiniteError("non-finite gradients in: " + ", ".join(bad))
    for p in store.params():
        g = grads[p.name]
        p.accumulator *= rho
        p.accumulator += (1.0 - rho) * g * g
        p.tensor.data -= (lr * g / (np.sqrt(p.accumulator) + eps)).astype(p.tensor.data.dtype)
    store.zero_grads()


def grad_check(loss_fn, store: ParamStore, eps: float = 1e-3,
               max_entries: int = 6, seed: int = 0, rel_floor: float = 1e-6,
               oracle_dtype=np.float64) -> float:
    """Max relative error between reverse-mode and central-difference gradients.

    The reverse-mode gradient is computed in the store's working precision
    (float32 in production); the finite-difference side re-evaluates the loss
    with the store cast to `oracle_dtype` so the difference quotient is not
    drowned by single-precision round-off (pass None to probe in the working
    dtype). `loss_fn` must rebuild the graph from the store on every call and
    be deterministic: pin any noise inside it. A random subsample of at most
    `max_entries` coordinates per parameter is probed. The relative error
    denominator is floored at `rel_floor` so exactly-zero gradients on both
    sides compare as equal instead of dividing by zero.
    """
    store.zero_grads()
    loss = loss_fn()
    loss.backward()
    analytic = {p.name: (p.tensor.grad.copy() if p.tensor.grad is not None
                         else np.zeros_like(p.tensor.data)) for p in store.params()}
    store.zero_grads()

    native = store.params()[0].tensor.data.dtype if len(store) else np.float32
    if oracle_dtype is not None:
        store.astype(oracle_dtype)

    pick = RngStream(seed).child("grad-check")
    worst = 0.0
    try:
        for p in store.params():
            flat = p.tensor.data.reshape(-1)
            n = flat.size
            if n <= max_entries:
                entries = np.arange(n)
            else:
                entries = np.unique(pick.integers(0, n, (max_entries,)))
            a_flat = analytic[p.name].reshape(-1)
            for i in entries:
                orig = flat[i]
                flat[i] = orig + eps
                f_plus = loss_fn().item()
                flat[i] = orig - eps
                f_minus = loss_fn().item()
                flat[i] = orig
                numeric = (f_plus - f_minus) / (2.0 * eps)
                denom = max(abs(a_flat[i]), abs(numeric), rel_floor)
                worst = max(worst, abs(a_flat[i] - numeric) / denom)
    finally:
        if oracle_dtype is not None:
            store.astype(native)
        store.zero_grads()
    return float(worst)
