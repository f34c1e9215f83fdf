"""
Tests for the tensor tape: elementwise/shape ops, the softmax family,
grad-mode handling and randomized gradient checks against finite differences.
"""

import threading

import numpy as np
import pytest

from drlkit.core.gradcheck import finite_diff_grad, relative_error
from drlkit.core.tensor import (
    Tensor,
    add,
    backward,
    clamp,
    concat,
    conv2d,
    elementwise,
    is_grad_enabled,
    log,
    matmul,
    no_grad,
    pick,
    relu,
    sign,
    softmax,
    softmax_ce,
    tmax,
    tsum,
)
from drlkit.models.schemas import ArchKind, ArchSpec
from drlkit.services.model_zoo import forward_logits, init_model
from drlkit.utils.errors import GradError, LabelError, NonFiniteError, ShapeError


class TestConstruction:
    def test_rejects_zero_sized_dimension(self):
        with pytest.raises(ShapeError):
            Tensor(np.zeros((0, 3)))

    def test_rejects_non_finite_values(self):
        with pytest.raises(NonFiniteError):
            Tensor([1.0, np.nan])

    def test_copies_input(self):
        raw = np.ones(3)
        t = Tensor(raw)
        raw[0] = 5.0
        assert t.data[0] == 1.0

    def test_float32_storage_is_kept(self):
        a = Tensor(np.ones(3), dtype=np.float32)
        b = Tensor(np.ones(3), dtype=np.float32)
        assert (a + b).dtype == np.float32
        assert (a + Tensor(np.ones(3))).dtype == np.float64


class TestElementwise:
    def test_broadcast_add_reduces_gradient(self):
        a = Tensor(np.ones((2, 3)), requires_grad=True)
        b = Tensor(np.array([1.0, 2.0, 3.0]), requires_grad=True)
        backward(tsum(add(a, b)))
        np.testing.assert_array_equal(b.grad, [2.0, 2.0, 2.0])
        np.testing.assert_array_equal(a.grad, np.ones((2, 3)))

    def test_unbroadcastable_shapes(self):
        with pytest.raises(ShapeError):
            add(Tensor(np.ones((2, 3))), Tensor(np.ones((4,))))

    def test_relu_subgradient_at_zero_is_zero(self):
        x = Tensor([-1.0, 0.0, 2.0], requires_grad=True)
        backward(tsum(relu(x)))
        np.testing.assert_array_equal(x.grad, [0.0, 0.0, 1.0])

    def test_sign_has_zero_gradient(self):
        x = Tensor([-2.0, 0.0, 3.0], requires_grad=True)
        out = sign(x)
        np.testing.assert_array_equal(out.data, [-1.0, 0.0, 1.0])
        backward(tsum(out))
        np.testing.assert_array_equal(x.grad, np.zeros(3))

    def test_clamp_gradient_mask_is_inclusive(self):
        x = Tensor([-1.0, 0.0, 0.5, 1.0, 2.0], requires_grad=True)
        backward(tsum(clamp(x, 0.0, 1.0)))
        np.testing.assert_array_equal(x.grad, [0.0, 1.0, 1.0, 1.0, 0.0])

    def test_log_of_zero_is_non_finite(self):
        with pytest.raises(NonFiniteError):
            log(Tensor([0.0, 1.0]))

    def test_elementwise_dispatch(self):
        a = Tensor([1.0, -2.0])
        np.testing.assert_array_equal(elementwise("mul", a, 3.0).data, [3.0, -6.0])
        np.testing.assert_array_equal(elementwise("clamp", a, (-1.0, 0.5)).data, [0.5, -1.0])
        with pytest.raises(ValueError):
            elementwise("tanh", a)


class TestShapeOps:
    def test_matmul_inner_mismatch(self):
        with pytest.raises(ShapeError):
            matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))

    def test_concat_splits_gradient(self):
        a = Tensor(np.ones((1, 2)), requires_grad=True)
        b = Tensor(np.ones((2, 2)), requires_grad=True)
        out = concat([a, b], axis=0)
        weights = np.arange(6, dtype=np.float64).reshape(3, 2)
        backward(tsum(out * weights))
        np.testing.assert_array_equal(a.grad, weights[:1])
        np.testing.assert_array_equal(b.grad, weights[1:])

    def test_max_routes_gradient_to_first_winner(self):
        x = Tensor([[1.0, 3.0, 3.0]], requires_grad=True)
        backward(tsum(tmax(x, axis=1)))
        np.testing.assert_array_equal(x.grad, [[0.0, 1.0, 0.0]])

    def test_pick(self):
        x = Tensor([[1.0, 2.0], [3.0, 4.0]], requires_grad=True)
        out = pick(x, [1, 0])
        np.testing.assert_array_equal(out.data, [2.0, 3.0])
        backward(tsum(out))
        np.testing.assert_array_equal(x.grad, [[0.0, 1.0], [1.0, 0.0]])

    def test_conv_kernel_too_large(self):
        with pytest.raises(ShapeError):
            conv2d(Tensor(np.ones((1, 1, 2, 2))), Tensor(np.ones((1, 1, 3, 3))))

    def test_conv_matches_direct_loop(self, rng):
        x = rng.normal(size=(2, 2, 5, 5))
        k = rng.normal(size=(3, 2, 3, 3))
        out = conv2d(Tensor(x), Tensor(k), stride=2, padding=1).data
        padded = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
        expected = np.zeros((2, 3, 3, 3))
        for n in range(2):
            for f in range(3):
                for i in range(3):
                    for j in range(3):
                        patch = padded[n, :, 2 * i:2 * i + 3, 2 * j:2 * j + 3]
                        expected[n, f, i, j] = np.sum(patch * k[f])
        np.testing.assert_allclose(out, expected, atol=1e-12)


class TestSoftmax:
    def test_softmax_rows_sum_to_one(self, rng):
        probs = softmax(Tensor(rng.normal(size=(4, 5)) * 50), axis=1).data
        np.testing.assert_allclose(probs.sum(axis=1), np.ones(4), atol=1e-12)

    def test_softmax_ce_matches_manual(self):
        logits = np.array([[2.0, 1.0, 0.0], [0.0, 0.0, 0.0]])
        y = [0, 2]
        expected = np.mean([
            -np.log(np.exp(2.0) / np.exp([2.0, 1.0, 0.0]).sum()),
            np.log(3.0),
        ])
        assert softmax_ce(Tensor(logits), y).item() == pytest.approx(expected, abs=1e-12)

    def test_label_out_of_range(self):
        with pytest.raises(LabelError):
            softmax_ce(Tensor(np.zeros((2, 3))), [0, 3])


class TestBackward:
    def test_non_scalar_loss(self):
        x = Tensor(np.ones(3), requires_grad=True)
        with pytest.raises(GradError):
            backward(x * 2.0)

    def test_gradients_accumulate(self):
        x = Tensor([1.0, 2.0], requires_grad=True)
        backward(tsum(x * x))
        backward(tsum(x * x))
        np.testing.assert_array_equal(x.grad, [4.0, 8.0])

    def test_inputs_restrict_leaf_accumulation(self, linear_model):
        x = Tensor(np.full((2, 6), 0.5), requires_grad=True)
        backward(softmax_ce(forward_logits(linear_model, x), [0, 1]), inputs=[x])
        assert x.grad is not None
        assert all(p.grad is None for p in linear_model.params.values())

    def test_requested_input_off_the_tape_gets_zeros(self):
        x = Tensor([1.0, 2.0], requires_grad=True)
        unused = Tensor(np.ones((2, 3)), requires_grad=True)
        backward(tsum(x * x), inputs=[x, unused])
        np.testing.assert_array_equal(x.grad, [2.0, 4.0])
        np.testing.assert_array_equal(unused.grad, np.zeros((2, 3)))

    def test_requested_input_without_tape_gets_zeros(self):
        x = Tensor([1.0, 2.0], requires_grad=True)
        with no_grad():
            loss = tsum(x * x)
        backward(loss, inputs=[x])
        np.testing.assert_array_equal(x.grad, [0.0, 0.0])

    def test_no_grad_records_nothing(self):
        x = Tensor([1.0], requires_grad=True)
        with no_grad():
            y = x * 3.0
        assert not y.requires_grad and y.is_leaf

    def test_grad_mode_is_thread_local(self):
        seen = []
        with no_grad():
            worker = threading.Thread(target=lambda: seen.append(is_grad_enabled()))
            worker.start()
            worker.join()
            assert not is_grad_enabled()
        assert seen == [True]
        assert is_grad_enabled()


def _random_arch(rng: np.random.Generator) -> ArchSpec:
    kind = [ArchKind.LINEAR, ArchKind.MLP, ArchKind.SMALL_CONV][rng.integers(0, 3)]
    classes = int(rng.integers(2, 5))
    if kind == ArchKind.SMALL_CONV:
        return ArchSpec(kind=kind, input_shape=(int(rng.integers(1, 3)), 5, 5), num_classes=classes,
                        channels=(2, 2))
    return ArchSpec(kind=kind, input_shape=(int(rng.integers(2, 6)),), num_classes=classes,
                    hidden=(int(rng.integers(2, 6)),))


class TestGradientCheck:
    """Reverse-mode gradients against central differences (h=1e-5)."""

    def test_input_gradients_on_random_models(self):
        rng = np.random.default_rng(7)
        for case in range(100):
            arch = _random_arch(rng)
            model = init_model(arch, seed=case)
            x0 = rng.uniform(0.0, 1.0, size=(3, *arch.input_shape))
            y = rng.integers(0, arch.num_classes, size=3)

            x = Tensor(x0, requires_grad=True)
            backward(softmax_ce(forward_logits(model, x), y), inputs=[x])
            numeric = finite_diff_grad(lambda t: softmax_ce(forward_logits(model, t), y), x0)
            assert relative_error(x.grad, numeric.data) <= 1e-4, f"case {case} ({arch.kind.value})"

    def test_parameter_gradients(self, conv_model, rng):
        x0 = rng.uniform(size=(2, 1, 6, 6))
        y = [0, 2]
        backward(softmax_ce(forward_logits(conv_model, x0), y))
        for name, param in conv_model.params.items():
            def loss_for(value, name=name):
                candidate = conv_model.clone()
                candidate.params[name] = value
                return softmax_ce(forward_logits(candidate, x0), y)

            numeric = finite_diff_grad(loss_for, param.data)
            assert relative_error(param.grad, numeric.data) <= 1e-4, name
