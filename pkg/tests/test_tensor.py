"""Autodiff core: op gradients, finite checks, rng determinism, checkpoints."""

import numpy as np
import pytest

from conftest import assert_gradients_match

from spoofprompt.checkpoint import checkpoint_keys, load_checkpoint, params_checksum, save_checkpoint
from spoofprompt.errors import AutodiffError, CheckpointError, DimensionError, NonFiniteError
from spoofprompt.tensor import (
    Rng,
    Tensor,
    broadcast_to,
    concat,
    embedding_lookup,
    exp,
    log,
    matmul,
    no_grad,
    reshape,
    take_range,
    tmean,
    transpose,
    tsum,
)


def rnd(*shape, seed=0):
    return np.random.default_rng(seed).standard_normal(shape)


class TestTensorBasics:
    def test_row_major_float64(self):
        t = Tensor([[1, 2], [3, 4]])
        assert t.data.dtype == np.float64
        assert t.data.flags["C_CONTIGUOUS"]
        assert t.shape == (2, 2)

    def test_scalar_stays_zero_dim(self):
        t = Tensor(3.5)
        assert t.shape == ()
        assert t.item() == 3.5

    def test_nan_input_rejected(self):
        with pytest.raises(NonFiniteError):
            Tensor([1.0, np.nan])

    def test_inf_produced_by_op_rejected(self):
        big = Tensor([1e308])
        with pytest.raises(NonFiniteError) as err:
            big + big
        assert "add" in str(err.value)

    def test_log_of_zero_rejected_with_op_name(self):
        with pytest.raises(NonFiniteError) as err:
            log(Tensor([0.0]))
        assert "log" in str(err.value)

    def test_backward_requires_scalar(self):
        t = Tensor([1.0, 2.0], requires_grad=True)
        with pytest.raises(AutodiffError):
            (t * 2.0).backward()

    def test_no_grad_suppresses_tape(self):
        t = Tensor([1.0, 2.0], requires_grad=True)
        with no_grad():
            out = t * 3.0
        assert not out.requires_grad

    def test_grad_accumulates_across_reuse(self):
        t = Tensor([2.0], requires_grad=True)
        loss = tsum(t * t + t)  # dL/dt = 2t + 1 = 5
        loss.backward()
        assert np.allclose(t.grad, [5.0])


class TestOpGradients:
    """Every generic op against the central finite-difference oracle."""

    def check(self, build, params, rtol=1e-6, seed=1):
        assert_gradients_match(build, params, np.random.default_rng(seed), rtol=rtol)

    def test_add_mul_broadcast(self):
        a = Tensor(rnd(3, 4, seed=1), requires_grad=True)
        b = Tensor(rnd(4, seed=2), requires_grad=True)
        self.check(lambda: tsum((a + b) * a), {"a": a, "b": b})

    def test_matmul_batched(self):
        a = Tensor(rnd(2, 3, 4, seed=3), requires_grad=True)
        b = Tensor(rnd(4, 5, seed=4), requires_grad=True)
        proj = rnd(2, 3, 5, seed=5)
        self.check(lambda: tsum(matmul(a, b) * proj), {"a": a, "b": b})

    def test_matmul_shape_mismatch(self):
        with pytest.raises(DimensionError):
            matmul(Tensor(rnd(2, 3)), Tensor(rnd(4, 2)))

    def test_reshape_transpose_concat_slice(self):
        a = Tensor(rnd(4, 6, seed=6), requires_grad=True)
        proj = rnd(6, 4, seed=7)

        def build():
            t = transpose(reshape(a, (2, 12)), (1, 0))      # [12, 2]
            left = take_range(t, 0, 0, 6)
            right = take_range(t, 0, 6, 12)
            return tsum(concat([left, right], axis=1) * proj[:, :4])

        self.check(build, {"a": a})

    def test_broadcast_to_sums_gradient(self):
        a = Tensor(rnd(1, 5, seed=8), requires_grad=True)
        proj = rnd(3, 5, seed=9)
        self.check(lambda: tsum(broadcast_to(a, (3, 5)) * proj), {"a": a})

    def test_log_exp_mean(self):
        a = Tensor(np.abs(rnd(7, seed=10)) + 0.5, requires_grad=True)
        self.check(lambda: tmean(log(a) + exp(a * 0.1)), {"a": a})

    def test_embedding_lookup_scatter(self):
        table = Tensor(rnd(9, 4, seed=11), requires_grad=True)
        ids = np.array([3, 3, 0, 7])
        proj = rnd(4, 4, seed=12)
        self.check(lambda: tsum(embedding_lookup(table, ids) * proj), {"table": table})


class TestRng:
    def test_same_seed_bit_identical(self):
        a = Rng(123).normal((64,))
        b = Rng(123).normal((64,))
        assert a.tobytes() == b.tobytes()

    def test_children_diverge(self):
        r = Rng(5)
        assert r.child("x").normal((4,)).tolist() != r.child("y").normal((4,)).tolist()

    def test_child_deterministic(self):
        assert Rng(5).child("x").seed == Rng(5).child("x").seed

    def test_truncated_normal_bounds(self):
        draws = Rng(0).truncated_normal((10000,), std=0.02, bound=2.0)
        assert np.abs(draws).max() <= 0.04 + 1e-12

    def test_truncated_normal_deterministic(self):
        a = Rng(9).truncated_normal((256,))
        b = Rng(9).truncated_normal((256,))
        assert a.tobytes() == b.tobytes()


class TestCheckpoint:
    def test_round_trip_bit_exact(self, tmp_path):
        params = {
            "alpha.weight": np.array([[1.0, -2.5e-17], [3.3, 4.125]]),
            "beta.bias": np.linspace(-1, 1, 7),
            "scalar": np.array(0.123456789012345678),
        }
        path = tmp_path / "ck.bin"
        save_checkpoint(params, path)
        loaded = load_checkpoint(path)
        assert set(loaded) == set(params)
        for k in params:
            assert loaded[k].tobytes() == np.asarray(params[k], dtype=np.float64).tobytes()
            assert loaded[k].shape == np.asarray(params[k]).shape

    def test_manifest_lists_every_key(self, tmp_path):
        params = {"b": np.zeros((2, 3)), "a": np.ones(4)}
        path = tmp_path / "ck.bin"
        save_checkpoint(params, path)
        keys = checkpoint_keys(path)
        assert keys == [("a", (4,)), ("b", (2, 3))]

    def test_bad_magic_rejected(self, tmp_path):
        path = tmp_path / "junk.bin"
        path.write_bytes(b"not a checkpoint")
        with pytest.raises(CheckpointError):
            load_checkpoint(path)

    def test_checksum_sensitive_to_single_bit(self):
        a = {"x": np.array([1.0, 2.0])}
        b = {"x": np.array([1.0, np.nextafter(2.0, 3.0)])}
        assert params_checksum(a) != params_checksum(b)
        assert params_checksum(a) == params_checksum({"x": np.array([1.0, 2.0])})
