import numpy as np
import pytest
import torch

from core.errors import NonFiniteError, ShapeMismatchError
from core.numeric import (DTYPE, AdamStepper, arrays_to_module, dense_forward, finite_diff_check,
                          glorot_init_, module_to_arrays, softmax)


def leaf(*shape, seed=0):
    generator = torch.Generator().manual_seed(seed)
    return torch.randn(*shape, generator=generator, dtype=DTYPE).requires_grad_(True)


class TestPrimitives:
    def test_dense_forward(self):
        x = torch.tensor([1.0, 2.0], dtype=DTYPE)
        w = torch.tensor([[1.0, 0.0], [0.5, -1.0]], dtype=DTYPE)
        b = torch.tensor([0.1, 0.2], dtype=DTYPE)
        assert dense_forward(x, w, b).tolist() == pytest.approx([1.1, -1.3])

    def test_identity_layer(self):
        x = leaf(4, seed=7).detach()
        assert torch.equal(dense_forward(x, torch.eye(4, dtype=DTYPE), torch.zeros(4, dtype=DTYPE)), x)

    def test_scalar_chain_rule(self):
        w = torch.tensor([[1.5]], dtype=DTYPE, requires_grad=True)
        x = torch.tensor([-2.0], dtype=DTYPE, requires_grad=True)
        b = torch.tensor([0.3], dtype=DTYPE, requires_grad=True)
        dense_forward(x, w, b).backward(torch.tensor([0.7], dtype=DTYPE))
        assert w.grad.item() == pytest.approx(0.7 * -2.0)
        assert x.grad.item() == pytest.approx(0.7 * 1.5)
        assert b.grad.item() == pytest.approx(0.7)

    def test_dense_shape_mismatch(self):
        with pytest.raises(ShapeMismatchError):
            dense_forward(torch.zeros(3, dtype=DTYPE), torch.zeros(2, 2, dtype=DTYPE), None)

    def test_softmax_handles_large_and_masked_scores(self):
        scores = torch.tensor([1000.0, 1000.0, float("-inf")], dtype=DTYPE)
        assert softmax(scores).tolist() == [0.5, 0.5, 0.0]

    def test_softmax_examples(self):
        assert softmax(torch.zeros(4, dtype=DTYPE)).tolist() == [0.25] * 4
        probs = softmax(torch.tensor([1000.0, 0.0], dtype=DTYPE))
        assert torch.isfinite(probs).all()
        assert probs.tolist() == pytest.approx([1.0, 0.0], abs=1e-300)
        assert probs.sum().item() == pytest.approx(1.0, abs=1e-12)

    @pytest.mark.parametrize("name, build", [
        ("dense", lambda w, x: dense_forward(x, w, None).pow(2).sum()),
        ("softmax", lambda w, x: (softmax(x @ w.T) * torch.arange(3, dtype=DTYPE)).sum()),
        ("tanh", lambda w, x: torch.tanh(x @ w.T).sum()),
    ])
    def test_primitive_gradients(self, name, build):
        w, x = leaf(3, 4, seed=1), leaf(5, 4, seed=2)
        assert finite_diff_check(lambda: build(w, x), [w, x]) < 1e-6

    @pytest.mark.parametrize("name", ["dense", "softmax"])
    def test_randomized_gradient_checks(self, name):
        rng = np.random.default_rng(20)
        for trial in range(20):
            rows, width, out = (int(n) for n in rng.integers(1, 6, size=3))
            x = leaf(rows, width, seed=100 + trial)
            if name == "dense":
                w, b = leaf(out, width, seed=200 + trial), leaf(out, seed=300 + trial)
                coef = torch.as_tensor(rng.normal(size=(rows, out)), dtype=DTYPE)
                error = finite_diff_check(lambda: (dense_forward(x, w, b) * coef).sum(), [w, x, b])
            else:
                coef = torch.as_tensor(rng.normal(size=(rows, width)), dtype=DTYPE)
                error = finite_diff_check(lambda: (softmax(x) * coef).sum(), [x])
            assert error < 1e-4, (name, trial, rows, width, out)

    def test_constant_computation(self):
        w = leaf(3, seed=4)
        assert finite_diff_check(lambda: torch.tensor(2.5, dtype=DTYPE), [w]) == 0.0

    def test_finite_diff_detects_wrong_gradient(self):
        w = leaf(3, seed=3)

        class Wrong(torch.autograd.Function):
            @staticmethod
            def forward(ctx, x):
                return (x ** 2).sum()

            @staticmethod
            def backward(ctx, grad):
                return grad * torch.ones(3, dtype=DTYPE)

        assert finite_diff_check(lambda: Wrong.apply(w), [w]) > 0.1


class TestAdam:
    def test_first_step_moves_by_learning_rate(self):
        param = torch.nn.Parameter(torch.tensor([1.0, -2.0], dtype=DTYPE))
        stepper = AdamStepper([("p", param)], learning_rate=0.1)
        (param * torch.tensor([3.0, -0.5], dtype=DTYPE)).sum().backward()
        stepper.step()
        # 偏差修正后第一步的更新量为 lr·sign(g)
        np.testing.assert_allclose(param.detach().numpy(), [0.9, -1.9], atol=1e-7)
        assert param.grad.abs().sum().item() == 0.0

    def test_zero_gradient_leaves_parameter(self):
        param = torch.nn.Parameter(torch.tensor([0.25, -1.0], dtype=DTYPE))
        stepper = AdamStepper([("p", param)])
        param.grad = torch.zeros(2, dtype=DTYPE)
        stepper.step()
        assert param.detach().tolist() == [0.25, -1.0]
        assert stepper.step_count == 1

    def test_unit_gradient_default_constants(self):
        param = torch.nn.Parameter(torch.tensor([0.0], dtype=DTYPE))
        stepper = AdamStepper([("p", param)], learning_rate=0.001)
        param.grad = torch.ones(1, dtype=DTYPE)
        stepper.step()
        assert param.item() == pytest.approx(-0.001, rel=1e-6)

    def test_hundred_steps_are_reproducible(self):
        def run():
            param = torch.nn.Parameter(leaf(4, seed=9).detach())
            target = leaf(4, seed=10).detach()
            stepper = AdamStepper([("p", param)], learning_rate=0.01)
            for _ in range(100):
                ((param - target) ** 2).sum().backward()
                stepper.step()
            return param.detach()

        assert torch.equal(run(), run())

    def test_non_finite_gradient_raises(self):
        param = torch.nn.Parameter(torch.tensor([1.0], dtype=DTYPE))
        stepper = AdamStepper([("p", param)])
        param.grad = torch.tensor([float("nan")], dtype=DTYPE)
        with pytest.raises(NonFiniteError, match="p"):
            stepper.step()


class TestPersistence:
    def test_glorot_bounds(self):
        torch.manual_seed(0)
        layer = glorot_init_(torch.nn.Linear(30, 10).to(DTYPE))
        bound = np.sqrt(6.0 / 40)
        assert layer.weight.abs().max().item() <= bound
        assert layer.bias.abs().sum().item() == 0.0

    def test_round_trip(self):
        source = torch.nn.Linear(3, 2).to(DTYPE)
        target = torch.nn.Linear(3, 2).to(DTYPE)
        arrays_to_module(target, module_to_arrays(source))
        assert torch.equal(source.weight, target.weight)

    def test_shape_mismatch(self):
        source = torch.nn.Linear(3, 2).to(DTYPE)
        with pytest.raises(ShapeMismatchError, match="weight"):
            arrays_to_module(torch.nn.Linear(4, 2).to(DTYPE), module_to_arrays(source))

    def test_partial_load_reports_missing(self):
        target = torch.nn.Linear(3, 2).to(DTYPE)
        missing = arrays_to_module(target, {"weight": np.zeros((2, 3))}, strict=False)
        assert missing == ["bias"]
        assert target.weight.abs().sum().item() == 0.0
