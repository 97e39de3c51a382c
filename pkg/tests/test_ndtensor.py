"""Autodiff correctness via central finite differences, container
round-trips, and optimizer behavior.

Gradient checks keep inputs away from relu/huber kinks by sampling in
ranges that stay strictly one side of each kink given the 1e-3 step.
"""

import numpy as np
import pytest

from gaicrop import ndtensor as nd
from gaicrop.ndtensor import (
    AdamState,
    ContainerError,
    Tensor,
    TensorError,
    adam_step,
    backward,
    finite_diff_check,
    load_tensors,
    save_tensors,
    zero_grads,
)


def rand(shape, seed, lo=-1.0, hi=1.0):
    rng = np.random.default_rng(seed)
    return Tensor(rng.uniform(lo, hi, size=shape))


class TestConvForward:
    def test_identity_1x1(self):
        x = rand((1, 3, 5, 5), 0)
        w = Tensor(np.eye(3).reshape(3, 3, 1, 1))
        b = Tensor(np.zeros(3))
        out = nd.conv2d(x, w, b, stride=1, padding=0)
        assert np.array_equal(out.data, x.data)

    def test_ones_kernel_center(self):
        x = Tensor(np.ones((1, 1, 5, 5)))
        w = Tensor(np.ones((1, 1, 3, 3)))
        b = Tensor(np.zeros(1))
        out = nd.conv2d(x, w, b, stride=1, padding=1)
        assert out.data.shape == (1, 1, 5, 5)
        assert out.data[0, 0, 2, 2] == 9.0
        assert out.data[0, 0, 0, 0] == 4.0  # corner window

    def test_output_size_law(self):
        x = rand((1, 2, 11, 17), 1)
        w = rand((4, 2, 3, 3), 2)
        b = rand((4,), 3)
        for stride, padding in [(1, 0), (1, 1), (2, 1), (3, 0)]:
            out = nd.conv2d(x, w, b, stride=stride, padding=padding)
            ho = (11 + 2 * padding - 3) // stride + 1
            wo = (17 + 2 * padding - 3) // stride + 1
            assert out.data.shape == (1, 4, ho, wo)

    def test_composed_strides_multiply(self):
        x = rand((1, 1, 64, 96), 4)
        w = rand((1, 1, 3, 3), 5)
        b = Tensor(np.zeros(1))
        out = nd.conv2d(nd.conv2d(x, w, b, 2, 1), w, b, 2, 1)
        assert out.data.shape == (1, 1, 16, 24)

    def test_matches_direct_convolution(self):
        rng = np.random.default_rng(6)
        x = rng.normal(size=(2, 3, 8, 9))
        w = rng.normal(size=(4, 3, 3, 3))
        b = rng.normal(size=4)
        out = nd.conv2d(Tensor(x), Tensor(w), Tensor(b), stride=2, padding=1).data
        xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
        for n in range(2):
            for co in range(4):
                for i in range(out.shape[2]):
                    for j in range(out.shape[3]):
                        window = xp[n, :, 2 * i:2 * i + 3, 2 * j:2 * j + 3]
                        ref = (window * w[co]).sum() + b[co]
                        assert out[n, co, i, j] == pytest.approx(ref, rel=1e-12)


class TestGradients:
    def test_conv2d(self):
        x = rand((1, 2, 6, 7), 10)
        w = rand((3, 2, 3, 3), 11)
        b = rand((3,), 12)
        rep = finite_diff_check(
            lambda x, w, b: nd.mean_all(nd.conv2d(x, w, b, stride=2, padding=1)),
            [x, w, b],
        )
        assert rep.passed, rep.per_input

    def test_conv1x1_reduce(self):
        x = rand((1, 4, 5, 5), 13)
        w = rand((2, 4, 1, 1), 14)
        b = rand((2,), 15)
        rep = finite_diff_check(
            lambda x, w, b: nd.mean_all(nd.conv1x1_reduce(x, w, b)), [x, w, b]
        )
        assert rep.passed, rep.per_input

    def test_fully_connected(self):
        x = rand((3, 8), 16)
        w = rand((5, 8), 17)
        b = rand((5,), 18)
        rep = finite_diff_check(
            lambda x, w, b: nd.mean_all(nd.fully_connected(x, w, b)), [x, w, b]
        )
        assert rep.passed, rep.per_input

    def test_relu_composite(self):
        # inputs bounded away from 0 so the kink is never crossed
        x = Tensor(np.concatenate([np.linspace(0.2, 1.0, 8), np.linspace(-1.0, -0.2, 8)]).reshape(4, 4))
        w = rand((2, 4), 19)
        b = rand((2,), 20)
        rep = finite_diff_check(
            lambda x, w, b: nd.mean_all(nd.relu(nd.fully_connected(x, w, b))),
            [x, w, b],
        )
        assert rep.passed, rep.per_input

    def test_mul_mask(self):
        x = rand((2, 4, 4), 21)
        mask = (np.random.default_rng(22).random((2, 4, 4)) > 0.5).astype(float)
        rep = finite_diff_check(lambda x: nd.mean_all(nd.mul_mask(x, mask)), [x])
        assert rep.passed

    def test_concat_channels(self):
        a = rand((2, 3, 3), 23)
        b = rand((4, 3, 3), 24)
        rep = finite_diff_check(
            lambda a, b: nd.mean_all(nd.concat_channels(a, b)), [a, b]
        )
        assert rep.passed

    def test_bilinear_sample(self):
        fmap = rand((3, 6, 7), 25)
        rep = finite_diff_check(
            lambda f: nd.mean_all(nd.bilinear_sample(f, 2.35, 4.6)), [fmap]
        )
        assert rep.passed

    def test_grid_bilinear_sample(self):
        fmap = rand((3, 6, 7), 26)
        rng = np.random.default_rng(27)
        xs = rng.uniform(0.1, 4.8, size=9)
        ys = rng.uniform(0.1, 5.8, size=9)
        rep = finite_diff_check(
            lambda f: nd.mean_all(nd.grid_bilinear_sample(f, xs, ys)), [fmap]
        )
        assert rep.passed

    def test_batched_bilinear_sample_masked(self):
        fmap = rand((3, 6, 7), 28)
        rng = np.random.default_rng(29)
        xs = rng.uniform(0.1, 4.8, size=(4, 5))
        ys = rng.uniform(0.1, 5.8, size=(4, 5))
        masks = (rng.random((4, 6, 7)) > 0.4).astype(float)
        rep = finite_diff_check(
            lambda f: nd.mean_all(nd.batched_bilinear_sample(f, xs, ys, masks=masks)),
            [fmap],
        )
        assert rep.passed

    def test_shared_grid_sample(self):
        fmap = rand((3, 6, 7), 30)
        rng = np.random.default_rng(31)
        xs = rng.uniform(0.1, 4.8, size=5)
        ys = rng.uniform(0.1, 5.8, size=5)
        masks = (rng.random((4, 6, 7)) > 0.4).astype(float)
        rep = finite_diff_check(
            lambda f: nd.mean_all(nd.batched_bilinear_sample(f, xs, ys, masks=masks)),
            [fmap],
        )
        assert rep.passed

    def test_outer_grid_sample(self):
        fmap = rand((3, 7, 9), 32)
        rng = np.random.default_rng(33)
        xs = rng.uniform(0.1, 5.8, size=(5, 4))
        xs[3] = xs[0]  # duplicate row grids exercise the dedup path
        ys = rng.uniform(0.1, 7.8, size=(5, 4))
        rep = finite_diff_check(
            lambda f: nd.mean_all(nd.outer_grid_sample(f, xs, ys)), [fmap]
        )
        assert rep.passed

    def test_huber_loss(self):
        # errors placed away from |e| = delta
        pred = Tensor(np.array([0.0, 0.5, 3.0, -2.0]))
        target = Tensor(np.array([0.3, 0.2, 0.5, 0.0]))
        rep = finite_diff_check(lambda p, t: nd.huber_loss(p, t, delta=1.0), [pred, target])
        assert rep.passed

    def test_reshape_flatten_stack(self):
        x = rand((2, 6), 34)
        rep = finite_diff_check(
            lambda x: nd.mean_all(nd.reshape(x, (3, 4))), [x]
        )
        assert rep.passed
        rows = [rand((5,), s) for s in (35, 36)]
        rep = finite_diff_check(
            lambda a, b: nd.mean_all(nd.stack_rows([a, b])), rows
        )
        assert rep.passed


class TestSamplingSemantics:
    def test_exact_grid_points(self):
        fmap = rand((2, 5, 6), 40)
        out = nd.grid_bilinear_sample(fmap, np.array([2.0]), np.array([3.0]))
        assert np.allclose(out.data[:, 0], fmap.data[:, 2, 3], atol=1e-15)

    def test_midpoint_average(self):
        fmap = Tensor(np.arange(12, dtype=float).reshape(1, 3, 4))
        out = nd.grid_bilinear_sample(fmap, np.array([0.5]), np.array([0.5]))
        assert out.data[0, 0] == pytest.approx((0 + 1 + 4 + 5) / 4, abs=1e-15)

    def test_out_of_bounds_rejected(self):
        fmap = rand((1, 4, 4), 41)
        with pytest.raises(TensorError):
            nd.grid_bilinear_sample(fmap, np.array([-0.1]), np.array([0.0]))
        with pytest.raises(TensorError):
            nd.grid_bilinear_sample(fmap, np.array([3.5]), np.array([0.0]))

    def test_batched_equals_grid_per_row(self):
        fmap = rand((3, 6, 7), 42)
        rng = np.random.default_rng(43)
        xs = rng.uniform(0, 4.9, size=(4, 8))
        ys = rng.uniform(0, 5.9, size=(4, 8))
        batched = nd.batched_bilinear_sample(fmap, xs, ys)
        for i in range(4):
            row = nd.grid_bilinear_sample(fmap, xs[i], ys[i])
            assert np.allclose(batched.data[i], row.data, atol=1e-14)

    def test_outer_equals_batched_expanded(self):
        fmap = rand((3, 6, 7), 44)
        rng = np.random.default_rng(45)
        xs = rng.uniform(0, 4.9, size=(5, 3))
        ys = rng.uniform(0, 5.9, size=(5, 3))
        expanded = nd.batched_bilinear_sample(
            fmap, np.repeat(xs, 3, axis=1), np.tile(ys, (1, 3))
        )
        outer = nd.outer_grid_sample(fmap, xs, ys)
        assert np.allclose(outer.data, expanded.data, atol=1e-12)

    def test_masked_equals_premasked_map(self):
        fmap = rand((2, 5, 6), 46)
        rng = np.random.default_rng(47)
        mask = (rng.random((5, 6)) > 0.5).astype(float)
        xs = rng.uniform(0, 3.9, size=(1, 6))
        ys = rng.uniform(0, 4.9, size=(1, 6))
        masked = nd.batched_bilinear_sample(fmap, xs, ys, masks=mask[None])
        direct = nd.grid_bilinear_sample(Tensor(fmap.data * mask), xs[0], ys[0])
        assert np.allclose(masked.data[0], direct.data, atol=1e-14)


class TestBackwardMechanics:
    def test_grad_accumulates_across_uses(self):
        x = Tensor(np.array([1.0, 2.0]), requires_grad=True)
        y = nd.mean_all(nd.stack_rows([x, x]))
        backward(y)
        assert np.allclose(x.grad, [0.5, 0.5])

    def test_backward_needs_scalar(self):
        x = Tensor(np.ones(3), requires_grad=True)
        with pytest.raises(TensorError):
            backward(nd.relu(x))

    def test_no_grad_without_requires(self):
        x = Tensor(np.ones((2, 2)))
        out = nd.relu(x)
        assert out._backward is None and not out.requires_grad

    def test_deterministic_gradients(self):
        def run():
            x = Tensor(np.linspace(-1, 1, 18).reshape(1, 2, 3, 3), requires_grad=True)
            w = Tensor(np.linspace(-0.5, 0.5, 18).reshape(1, 2, 3, 3), requires_grad=True)
            b = Tensor(np.zeros(1), requires_grad=True)
            loss = nd.mean_all(nd.conv2d(x, w, b, 1, 1))
            backward(loss)
            return x.grad.tobytes(), w.grad.tobytes(), b.grad.tobytes()

        assert run() == run()


class TestHuber:
    def test_values(self):
        p = Tensor(np.array([0.0]))
        t = Tensor(np.array([0.5]))
        assert nd.huber_loss(p, t).item() == pytest.approx(0.125, abs=1e-15)
        t2 = Tensor(np.array([3.0]))
        assert nd.huber_loss(p, t2).item() == pytest.approx(3.0 - 0.5, abs=1e-15)

    def test_continuity_at_delta(self):
        # |e| = delta: both branches must agree to 1e-15
        delta = 1.0
        quad = 0.5 * delta * delta
        lin = delta * delta - 0.5 * delta * delta
        assert abs(quad - lin) < 1e-15
        eps = 1e-9
        below = nd.huber_loss(Tensor(np.array([0.0])), Tensor(np.array([delta - eps]))).item()
        above = nd.huber_loss(Tensor(np.array([0.0])), Tensor(np.array([delta + eps]))).item()
        assert abs(above - below) < 1e-8

    def test_bad_delta(self):
        with pytest.raises(TensorError):
            nd.huber_loss(Tensor(np.zeros(2)), Tensor(np.zeros(2)), delta=0.0)


class TestAdam:
    def test_first_step_size(self):
        # bias correction makes the very first step lr * sign(grad)
        p = Tensor(np.array([1.0, -2.0]), requires_grad=True)
        p.grad = np.array([0.3, -0.7])
        params = {"p": p}
        state = AdamState(params, learning_rate=1e-2)
        adam_step(params, state)
        expected = np.array([1.0, -2.0]) - 1e-2 * np.sign([0.3, -0.7]) * (
            np.abs([0.3, -0.7]) / (np.abs([0.3, -0.7]) + 1e-8)
        )
        assert np.allclose(p.data, expected, atol=1e-9)

    def test_skips_gradless(self):
        p = Tensor(np.array([5.0]), requires_grad=True)
        params = {"p": p}
        state = AdamState(params)
        adam_step(params, state)
        assert p.data[0] == 5.0

    def test_defaults(self):
        state = AdamState({})
        assert (state.beta1, state.beta2, state.epsilon) == (0.9, 0.999, 1e-8)

    def test_zero_grads(self):
        p = Tensor(np.ones(2), requires_grad=True)
        p.grad = np.ones(2)
        zero_grads({"p": p})
        assert p.grad is None

    def test_toy_overfit(self):
        # 2-layer net drives a tiny regression to ~zero loss
        rng = np.random.default_rng(50)
        x = Tensor(rng.normal(size=(8, 4)))
        target = Tensor(rng.normal(size=(8,)))
        params = {
            "w1": Tensor(rng.normal(size=(16, 4)) * 0.5, requires_grad=True),
            "b1": Tensor(np.zeros(16), requires_grad=True),
            "w2": Tensor(rng.normal(size=(1, 16)) * 0.5, requires_grad=True),
            "b2": Tensor(np.zeros(1), requires_grad=True),
        }
        state = AdamState(params, learning_rate=1e-2)
        loss_val = None
        for _ in range(400):
            zero_grads(params)
            h = nd.relu(nd.fully_connected(x, params["w1"], params["b1"]))
            pred = nd.flatten(nd.fully_connected(h, params["w2"], params["b2"]))
            loss = nd.huber_loss(pred, target)
            backward(loss)
            adam_step(params, state)
            loss_val = loss.item()
        assert loss_val < 1e-4


class TestContainer:
    def test_round_trip(self, tmp_path):
        rng = np.random.default_rng(60)
        tensors = {
            "a": rng.normal(size=(3, 4)),
            "empty_name_ok": rng.normal(size=(2,)),
            "scalarish": rng.normal(size=(1,)),
        }
        path = tmp_path / "params.bin"
        save_tensors(path, tensors)
        loaded = load_tensors(path)
        assert list(loaded) == list(tensors)
        for k in tensors:
            assert np.array_equal(loaded[k], tensors[k])

    def test_byte_deterministic(self, tmp_path):
        tensors = {"w": np.arange(6.0).reshape(2, 3)}
        p1, p2 = tmp_path / "a.bin", tmp_path / "b.bin"
        save_tensors(p1, tensors)
        save_tensors(p2, tensors)
        assert p1.read_bytes() == p2.read_bytes()

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "bad.bin"
        path.write_bytes(b"NOPE" + b"\x00" * 16)
        with pytest.raises(ContainerError):
            load_tensors(path)

    def test_trailing_bytes(self, tmp_path):
        path = tmp_path / "trail.bin"
        save_tensors(path, {"w": np.zeros(2)})
        path.write_bytes(path.read_bytes() + b"x")
        with pytest.raises(ContainerError):
            load_tensors(path)

    def test_magic_and_version(self, tmp_path):
        path = tmp_path / "p.bin"
        save_tensors(path, {})
        blob = path.read_bytes()
        assert blob[:4] == b"GAIC"
        assert int.from_bytes(blob[4:8], "little") == 1
