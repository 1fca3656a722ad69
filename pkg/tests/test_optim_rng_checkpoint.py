"""RMSprop contract, seeded randomness, and checkpoint round-trips."""

import numpy as np
import pytest

from semivib import autodiff as ad
from semivib.autodiff import NonFiniteError, Tensor
from semivib.checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from semivib.nn import ParamStore
from semivib.optim import rmsprop_step
from semivib.rng import RngStream


def test_rmsprop_single_step_hand_computation():
    # v = 0.9*0 + 0.1*2^2 = 0.4; delta = -0.1*2/sqrt(0.4) ~= -0.31623
    store = ParamStore()
    w = store.add("w", np.array([1.0], dtype=np.float32))
    w.tensor.grad = np.array([2.0], dtype=np.float32)
    rmsprop_step(store, lr=0.1, rho=0.9, eps=0.0)
    assert abs(float(w.accumulator[0]) - 0.4) <= 1e-7
    assert abs(float(w.value[0]) - (1.0 - 0.31622776)) <= 1e-6
    assert w.tensor.grad is None  # zeroed after the step


def test_rmsprop_zero_gradient_decays_accumulator_only():
    store = ParamStore()
    w = store.add("w", np.array([3.0, -1.0], dtype=np.float32))
    w.accumulator[:] = [1.0, 4.0]
    w.tensor.grad = np.zeros(2, dtype=np.float32)
    rmsprop_step(store, lr=0.5, rho=0.9, eps=1e-8)
    assert np.allclose(w.value, [3.0, -1.0])
    assert np.allclose(w.accumulator, [0.9, 3.6])


def test_rmsprop_default_learning_rate():
    from semivib.optim import DEFAULT_LR
    assert DEFAULT_LR == 1e-4


def test_rmsprop_aborts_on_non_finite_gradient():
    store = ParamStore()
    w = store.add("w", np.array([1.0], dtype=np.float32))
    w.tensor.grad = np.array([np.nan], dtype=np.float32)
    with pytest.raises(NonFiniteError, match="w"):
        rmsprop_step(store)
    assert float(w.value[0]) == 1.0  # untouched


def test_rmsprop_requires_populated_grads():
    store = ParamStore()
    store.add("w", np.array([1.0], dtype=np.float32))
    with pytest.raises(NonFiniteError, match="backward"):
        rmsprop_step(store)


def test_rmsprop_accumulator_stays_nonnegative():
    rng = RngStream(0)
    store = ParamStore()
    w = store.add("w", rng.normal((16,)))
    for _ in range(25):
        w.tensor.grad = rng.normal((16,))
        rmsprop_step(store, lr=1e-2)
        assert (w.accumulator >= 0).all()


# ---------------------------------------------------------------------------
# RngStream
# ---------------------------------------------------------------------------

def test_rng_same_seed_same_sequence():
    a = RngStream(123).normal((64,))
    b = RngStream(123).normal((64,))
    assert np.array_equal(a, b)


def test_rng_children_are_independent_and_stable():
    root = RngStream(7)
    c1 = root.child("init").normal((8,))
    c2 = root.child("dropout").normal((8,))
    assert not np.array_equal(c1, c2)
    assert np.array_equal(c1, RngStream(7).child("init").normal((8,)))


def test_rng_known_reference_sequence():
    # Frozen first draws for seed 0; guards against platform or version drift
    # silently changing every "reproducible" run in the repo.
    got = RngStream(0).normal((3,), dtype=np.float64)
    want = np.random.Generator(np.random.PCG64(np.random.SeedSequence(0))).standard_normal(3)
    assert np.array_equal(got, want)


def test_rng_permutation_deterministic():
    assert np.array_equal(RngStream(5).permutation(10), RngStream(5).permutation(10))


# ---------------------------------------------------------------------------
# Checkpoint format
# ---------------------------------------------------------------------------

def test_checkpoint_round_trip_bit_exact(tmp_path):
    rng = RngStream(1)
    entries = {
        "enc.conv1.w": rng.normal((4, 1, 8)),
        "enc.conv1.b": rng.normal((4,)),
        "head.w": rng.normal((12, 3)),
    }
    meta = {"kind": "vae", "latent_dim": "128"}
    path = tmp_path / "model.ckpt"
    save_checkpoint(path, entries, meta)
    loaded, got_meta = load_checkpoint(path)
    assert got_meta == meta
    assert list(loaded) == list(entries)
    for name in entries:
        assert loaded[name].tobytes() == entries[name].astype("<f4").tobytes()


def test_checkpoint_starts_with_magic(tmp_path):
    path = tmp_path / "m.ckpt"
    save_checkpoint(path, {"w": np.zeros(2, dtype=np.float32)}, {})
    assert path.read_bytes().startswith(b"SSVAE01\n")


def test_checkpoint_rejects_garbage(tmp_path):
    path = tmp_path / "bad.ckpt"
    path.write_bytes(b"not a checkpoint")
    with pytest.raises(CheckpointError, match="magic"):
        load_checkpoint(path)


def test_checkpoint_rejects_truncated_payload(tmp_path):
    path = tmp_path / "m.ckpt"
    save_checkpoint(path, {"w": np.ones((4, 4), dtype=np.float32)}, {})
    blob = path.read_bytes()
    path.write_bytes(blob[:-8])
    with pytest.raises(CheckpointError, match="truncated"):
        load_checkpoint(path)


def test_checkpoint_meta_round_trip_with_spaces_in_value(tmp_path):
    path = tmp_path / "m.ckpt"
    save_checkpoint(path, {}, {"note": "desk profile run 3"})
    _, meta = load_checkpoint(path)
    assert meta["note"] == "desk profile run 3"
