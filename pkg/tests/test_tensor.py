import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from nsva import tensor as T
from nsva.checkpoint import CheckpointError, dumps, load_arrays, loads, save_arrays
from nsva.optim import Adam, LrSchedule

from oracles import gradcheck, logsumexp_nll


class TestMatmul:
    def test_identity(self):
        b = np.arange(12.0).reshape(3, 4)
        out = T.matmul(T.Tensor(np.eye(3)), T.Tensor(b))
        np.testing.assert_array_equal(out.data, b)

    def test_hand_arithmetic(self):
        out = T.Tensor([[1.0, 2.0], [3.0, 4.0]]) @ T.Tensor([[1.0], [1.0]])
        np.testing.assert_array_equal(out.data, [[3.0], [7.0]])

    def test_shape_mismatch_names_shapes(self):
        with pytest.raises(ValueError, match=r"\(2, 3\).*\(2, 3\)"):
            T.matmul(T.Tensor(np.zeros((2, 3))), T.Tensor(np.zeros((2, 3))))

    def test_gradient(self):
        rng = np.random.default_rng(1)
        a = T.parameter(rng.normal(size=(5, 4)))
        b = T.parameter(rng.normal(size=(4, 6)))
        w = rng.normal(size=(5, 6))
        err = gradcheck(lambda: (T.matmul(a, b) * w).sum(), [a, b])
        assert err < 1e-6

    def test_gradient_rules(self):
        rng = np.random.default_rng(2)
        a = T.parameter(rng.normal(size=(3, 2)))
        b = T.parameter(rng.normal(size=(2, 4)))
        dc = rng.normal(size=(3, 4))
        T.matmul(a, b).backward(dc)
        np.testing.assert_allclose(a.grad, dc @ b.data.T)
        np.testing.assert_allclose(b.grad, a.data.T @ dc)


class TestSoftmax:
    def test_uniform(self):
        np.testing.assert_allclose(T.softmax(T.Tensor(np.full(4, 2.5))).data, 0.25)

    def test_shift_invariance(self):
        x = np.random.default_rng(3).normal(size=7)
        np.testing.assert_allclose(T.softmax(T.Tensor(x)).data, T.softmax(T.Tensor(x + 123.0)).data, atol=1e-15)

    def test_gradient(self):
        rng = np.random.default_rng(4)
        x = T.parameter(rng.normal(size=8))
        w = rng.normal(size=8)
        assert gradcheck(lambda: (T.softmax(x) * w).sum(), [x]) < 1e-6

    def test_non_finite_raises(self):
        with pytest.raises(FloatingPointError):
            T.softmax(T.Tensor([1.0, np.nan]))

    def test_masked_entries_get_exact_zero(self):
        x = T.Tensor(np.random.default_rng(5).normal(size=(3, 5)))
        mask = np.array([True, True, False, True, False])
        p = T.softmax(x, mask=mask).data
        assert np.all(p[:, ~mask] == 0.0)
        np.testing.assert_allclose(p.sum(axis=1), 1.0, atol=1e-12)

    @settings(max_examples=50, deadline=None)
    @given(arrays(np.float64, (4, 6), elements=st.floats(-50, 50)))
    def test_rows_sum_to_one(self, x):
        p = T.softmax(T.Tensor(x), axis=-1).data
        assert np.all(p >= 0)
        np.testing.assert_allclose(p.sum(axis=-1), 1.0, atol=1e-9)


class TestLayerNorm:
    def test_constant_row_gives_zeros(self):
        out = T.layer_norm(T.Tensor(np.full((2, 6), 3.0)), T.Tensor(np.ones(6)), T.Tensor(np.zeros(6)))
        np.testing.assert_array_equal(out.data, 0.0)

    @settings(max_examples=30, deadline=None)
    @given(arrays(np.float64, (3, 8), elements=st.floats(-100, 100)))
    def test_zero_mean_rows(self, x):
        out = T.layer_norm(T.Tensor(x), T.Tensor(np.ones(8)), T.Tensor(np.zeros(8))).data
        assert np.all(np.abs(out.mean(axis=-1)) < 1e-6)

    def test_gradient(self):
        rng = np.random.default_rng(6)
        x = T.parameter(rng.normal(size=(3, 7)))
        g = T.parameter(rng.normal(size=7))
        b = T.parameter(rng.normal(size=7))
        w = rng.normal(size=(3, 7))
        assert gradcheck(lambda: (T.layer_norm(x, g, b) * w).sum(), [x, g, b]) < 1e-5

    def test_gain_shape_checked(self):
        with pytest.raises(ValueError):
            T.layer_norm(T.Tensor(np.zeros((2, 4))), T.Tensor(np.ones(3)), T.Tensor(np.zeros(3)))


class TestCrossEntropy:
    def test_uniform_logits(self):
        loss = T.cross_entropy(T.Tensor(np.zeros((6, 9))), [0, 3, 8, 1, 1, 2])
        assert loss.item() == pytest.approx(6 * math.log(9), rel=1e-12)

    def test_confident_logits_limit(self):
        logits = np.full((3, 5), -1e3)
        logits[np.arange(3), [1, 4, 0]] = 1e3
        assert T.cross_entropy(T.Tensor(logits), [1, 4, 0]).item() == pytest.approx(0.0, abs=1e-12)

    def test_matches_logsumexp_oracle(self):
        rng = np.random.default_rng(7)
        logits = rng.normal(size=(5, 11)) * 3
        targets = rng.integers(0, 11, size=5)
        got = T.cross_entropy(T.Tensor(logits), targets).item()
        assert abs(got - logsumexp_nll(logits.tolist(), targets.tolist())) < 1e-10

    def test_out_of_range(self):
        with pytest.raises(IndexError):
            T.cross_entropy(T.Tensor(np.zeros((2, 3))), [0, 3])

    def test_ignore_index(self):
        logits = np.random.default_rng(8).normal(size=(4, 5))
        full = T.cross_entropy(T.Tensor(logits[:2]), [1, 2]).item()
        assert T.cross_entropy(T.Tensor(logits), [1, 2, 0, 0], ignore_index=0).item() == pytest.approx(full)

    def test_gradient(self):
        rng = np.random.default_rng(9)
        x = T.parameter(rng.normal(size=(4, 6)))
        assert gradcheck(lambda: T.cross_entropy(x, [0, 5, 2, 2]), [x]) < 1e-6


class TestBackward:
    def test_sum(self):
        x = T.parameter(np.random.default_rng(0).normal(size=(3, 2)))
        x.sum().backward()
        np.testing.assert_array_equal(x.grad, 1.0)

    def test_square(self):
        x = T.parameter(np.random.default_rng(1).normal(size=5))
        (x * x).sum().backward()
        np.testing.assert_allclose(x.grad, 2 * x.data)

    def test_accumulates_until_zeroed(self):
        x = T.parameter(np.ones(3))
        loss = (x * x).sum()
        loss.backward()
        loss.backward()
        np.testing.assert_allclose(x.grad, 4.0)
        T.zero_grad([x])
        assert x.grad is None

    def test_non_scalar_rejected(self):
        x = T.parameter(np.ones(3))
        with pytest.raises(RuntimeError):
            (x * 2.0).backward()

    def test_shared_subgraph_visited_once(self):
        x = T.parameter(np.array([2.0]))
        y = x * x
        (y + y).sum().backward()
        np.testing.assert_allclose(x.grad, [8.0])

    @pytest.mark.parametrize("op", ["gelu", "exp", "log", "relu", "concat", "take", "embedding", "transpose", "mean"])
    def test_registered_ops(self, op):
        rng = np.random.default_rng(10)
        x = T.parameter(rng.uniform(0.5, 2.0, size=(3, 4)))
        w = rng.normal(size=(3, 4))
        fns = {
            "gelu": lambda: (T.gelu(x) * w).sum(),
            "exp": lambda: (T.exp(x) * w).sum(),
            "log": lambda: (T.log(x) * w).sum(),
            "relu": lambda: (T.relu(x - 1.2) * w).sum(),
            "concat": lambda: (T.concat([x, x * 2.0], axis=0) * np.vstack([w, w])).sum(),
            "take": lambda: (x[np.array([0, 2, 2])] * w[:3]).sum(),
            "embedding": lambda: (T.embedding(x, np.array([[1, 1], [2, 0]])) * w[0]).sum(),
            "transpose": lambda: (x.transpose(1, 0) * w.T).sum(),
            "mean": lambda: (x.mean(axis=0) * w[0]).sum(),
        }
        assert gradcheck(fns[op], [x]) < 1e-4

    def test_no_grad_records_nothing(self):
        x = T.parameter(np.ones(2))
        with T.no_grad():
            y = x * 3.0
        assert not y.requires_grad


class TestSchedule:
    def test_shape(self):
        s = LrSchedule(10, 100, 3e-5)
        assert s(0) == 0.0
        assert s(10) == pytest.approx(3e-5)
        assert s(100) == 0.0
        assert s(5) == pytest.approx(1.5e-5)
        assert s(55) == pytest.approx(1.5e-5)

    @settings(max_examples=40, deadline=None)
    @given(st.integers(1, 50), st.integers(0, 200))
    def test_single_peak_nonnegative(self, warm, extra):
        s = LrSchedule(warm, warm + extra + 1, 1.0)
        vals = np.array([s(t) for t in range(s.total_steps + 1)])
        assert np.all(vals >= 0)
        diffs = np.diff(vals)
        peak = int(np.argmax(vals))
        assert peak == warm
        assert np.all(diffs[:peak] > 0) and np.all(diffs[peak:] <= 0)

    def test_warmup_fraction(self):
        assert LrSchedule.with_warmup_fraction(500, 1e-3).warmup_steps == 50


class TestAdam:
    def test_zero_lr_leaves_params(self):
        p = T.parameter(np.array([1.0, -2.0]))
        opt = Adam([p], LrSchedule(5, 10, 1.0))
        p.grad = np.array([3.0, 1.0])
        before = p.data.copy()
        assert opt.step() == pytest.approx(0.2)
        opt2 = Adam([q := T.parameter(before.copy())], LrSchedule.constant(0.0))
        q.grad = np.array([3.0, 1.0])
        opt2.step()
        np.testing.assert_array_equal(q.data, before)

    def test_first_step_moves_by_lr(self):
        p = T.parameter(np.array([0.5]))
        opt = Adam([p], LrSchedule.constant(0.01))
        p.grad = np.array([1.0])
        opt.step()
        assert p.data[0] == pytest.approx(0.49, abs=1e-9)

    def test_missing_grads(self):
        opt = Adam([T.parameter(np.zeros(2))], LrSchedule.constant(0.1))
        with pytest.raises(RuntimeError):
            opt.step()

    def test_quadratic_loss_drops_100x(self):
        rng = np.random.default_rng(11)
        A = rng.normal(size=(6, 6))
        H = A @ A.T + np.eye(6)
        x = T.parameter(rng.normal(size=6) * 3)
        opt = Adam([x], LrSchedule.constant(0.1))

        def loss():
            return (T.matmul(x.reshape(1, 6), T.Tensor(H)).reshape(6) * x).sum() * 0.5

        first = loss().item()
        for _ in range(100):
            opt.zero_grad()
            l = loss()
            l.backward()
            opt.step()
        assert loss().item() <= first / 100

    def test_step_counter_increases(self):
        p = T.parameter(np.zeros(1))
        opt = Adam([p], LrSchedule.constant(0.1))
        for k in range(1, 4):
            p.grad = np.ones(1)
            opt.step()
            assert opt.state.step == k


class TestCheckpoint:
    def test_round_trip_bit_exact(self, tmp_path):
        rng = np.random.default_rng(12)
        arrays = {"w": rng.normal(size=(3, 4)), "b.x": rng.normal(size=4).astype(np.float32),
                  "scalarish": np.array([np.pi]), "empty": np.zeros((0, 3))}
        path = tmp_path / "c.bin"
        save_arrays(path, arrays)
        back = load_arrays(path)
        for k, v in arrays.items():
            assert back[k].shape == v.shape
            assert np.array_equal(back[k].astype(v.dtype), v)
            assert back[k].astype(v.dtype).tobytes() == v.tobytes()

    def test_layout(self):
        blob = dumps({"ab": np.array([[1.0, 2.0]])})
        assert blob[:8] == b"NSVAARR\x00"
        assert blob[8:16] == (1).to_bytes(4, "little") + (1).to_bytes(4, "little")
        assert blob[16:20] == (2).to_bytes(4, "little") and blob[20:22] == b"ab"
        assert blob[22:26] == (2).to_bytes(4, "little")
        assert len(blob) == 26 + 16 + 16

    def test_rejects_garbage(self):
        with pytest.raises(CheckpointError):
            loads(b"notacheckpoint!!")
