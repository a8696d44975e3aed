from __future__ import annotations

import math

import numpy as np
import pytest

from kippo import diffcore as dc
from kippo.errors import ContractError, NonFiniteError, ShapeError


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    scale = max(np.max(np.abs(analytic)), np.max(np.abs(numeric)), 1e-8)
    return float(np.max(np.abs(analytic - numeric)) / scale)


class TestTensorOps:
    def test_no_grad_disables_recording(self) -> None:
        w = dc.parameter([1.0, 2.0])
        with dc.no_grad():
            out = (w * 3.0).sum()
        assert not out.requires_grad
        assert dc.is_grad_enabled()

    def test_linear_map_gradient(self, rng: np.random.Generator) -> None:
        w = dc.parameter(rng.standard_normal((3, 4)))
        x = rng.standard_normal((4, 1))
        (w @ x).sum().backward()
        assert w.grad is not None
        np.testing.assert_array_equal(w.grad, np.tile(x.T, (3, 1)))

    def test_tanh_squared_has_zero_gradient_at_origin(self) -> None:
        w = dc.parameter(0.0)
        loss = dc.tanh(w) ** 2
        loss.backward()
        assert w.grad == 0.0

    def test_broadcast_gradient_is_summed(self) -> None:
        bias = dc.parameter(np.zeros(3))
        x = dc.Tensor(np.ones((5, 3)))
        (x + bias).sum().backward()
        np.testing.assert_array_equal(bias.grad, np.full(3, 5.0))

    def test_indexing_scatters_gradient(self) -> None:
        w = dc.parameter(np.arange(6.0).reshape(2, 3))
        (w[:, 1] * 2.0).sum().backward()
        np.testing.assert_array_equal(w.grad, [[0.0, 2.0, 0.0], [0.0, 2.0, 0.0]])

    def test_minimum_and_maximum_route_gradients(self) -> None:
        a = dc.parameter([1.0, 5.0])
        b = dc.parameter([3.0, 2.0])
        (dc.minimum(a, b) + dc.maximum(a, b) * 10.0).sum().backward()
        np.testing.assert_array_equal(a.grad, [1.0, 10.0])
        np.testing.assert_array_equal(b.grad, [10.0, 1.0])

    def test_integer_powers_only(self) -> None:
        with pytest.raises(ContractError):
            dc.parameter(2.0) ** 0.5  # type: ignore[operator]

    def test_matmul_shape_error(self) -> None:
        with pytest.raises(ShapeError):
            dc.Tensor(np.ones((2, 3))) @ dc.Tensor(np.ones((2, 3)))


class TestBackward:
    def test_non_scalar_loss_is_rejected(self) -> None:
        w = dc.parameter(np.ones(3))
        with pytest.raises(ContractError):
            dc.backward(w * 2.0)

    def test_stale_gradient_is_rejected(self) -> None:
        w = dc.parameter(np.ones(3))
        loss = (w * w).sum()
        loss.backward()
        with pytest.raises(ContractError, match="not reset"):
            loss.backward()
        dc.zero_grad([w])
        loss.backward()
        np.testing.assert_array_equal(w.grad, np.full(3, 2.0))

    def test_unreachable_parameter_keeps_no_gradient(self) -> None:
        used, unused = dc.parameter(1.0), dc.parameter(1.0)
        (used * 2.0).backward()
        assert unused.grad is None

    def test_detach_stops_gradient(self) -> None:
        w = dc.parameter(np.ones(2))
        other = dc.parameter(np.ones(2))
        ((w * 3.0).detach() * other).sum().backward()
        assert w.grad is None
        np.testing.assert_array_equal(other.grad, [3.0, 3.0])


class TestFiniteChecks:
    def test_assert_finite_raises_with_counts(self) -> None:
        with pytest.raises(NonFiniteError) as info:
            dc.assert_finite(np.array([1.0, math.nan, math.inf]), "probe")
        assert info.value.diagnostic == {"what": "probe", "nan": 1, "inf": 1}

    def test_is_finite(self) -> None:
        assert dc.is_finite(dc.Tensor([1.0, 2.0]))
        assert not dc.is_finite(np.array([math.nan]))


class TestInitMatrix:
    def test_zeros(self, rng: np.random.Generator) -> None:
        np.testing.assert_array_equal(dc.init_matrix("zeros", 3, 2, rng), np.zeros((3, 2)))

    def test_orthogonal(self, rng: np.random.Generator) -> None:
        q = dc.init_matrix("orthogonal", 4, 4, rng)
        assert np.max(np.abs(q.T @ q - np.eye(4))) <= 1e-8

    def test_orthogonal_needs_square(self, rng: np.random.Generator) -> None:
        with pytest.raises(ContractError):
            dc.init_matrix("orthogonal", 4, 3, rng)

    def test_xavier_bound(self, rng: np.random.Generator) -> None:
        bound = math.sqrt(6.0 / 128.0)
        samples = np.concatenate([dc.init_matrix("xavier_uniform", 64, 64, rng).ravel() for _ in range(20)])
        assert np.all(np.abs(samples) <= bound)
        assert abs(samples.mean()) < 0.01

    def test_non_positive_dimension(self, rng: np.random.Generator) -> None:
        with pytest.raises(ContractError):
            dc.init_matrix("zeros", 0, 2, rng)

    def test_same_seed_same_draw(self) -> None:
        first = dc.init_matrix("xavier_uniform", 5, 7, np.random.default_rng(3))
        second = dc.init_matrix("xavier_uniform", 5, 7, np.random.default_rng(3))
        np.testing.assert_array_equal(first, second)


class TestMlp:
    def test_identity_output_layer(self) -> None:
        net = dc.Mlp([(dc.parameter(np.eye(2)), dc.parameter(np.zeros(2)))])
        np.testing.assert_array_equal(net(dc.Tensor([[3.0, -1.0]])).data, [[3.0, -1.0]])

    def test_zero_fixed_point(self) -> None:
        one = np.array([[1.0]])
        net = dc.Mlp([(dc.parameter(one), dc.parameter([0.0])), (dc.parameter(one), dc.parameter([0.0]))])
        np.testing.assert_array_equal(net(dc.Tensor([[0.0]])).data, [[0.0]])

    def test_matches_straight_line_evaluation(self, rng: np.random.Generator) -> None:
        net = dc.Mlp.build([2, 8, 2], rng)
        x = rng.standard_normal((5, 2))
        (w1, b1), (w2, b2) = [(w.data, b.data) for w, b in net.layers]
        expected = np.tanh(x @ w1 + b1) @ w2 + b2
        out = net(dc.Tensor(x)).data
        assert np.max(np.abs(out - expected) / np.maximum(np.abs(expected), 1e-12)) <= 1e-12

    def test_input_width_error_names_layer(self, rng: np.random.Generator) -> None:
        net = dc.Mlp.build([3, 4, 1], rng, name="critic")
        with pytest.raises(ShapeError, match="critic layer 0"):
            net(dc.Tensor(np.ones((2, 5))))

    def test_inconsistent_layers(self) -> None:
        with pytest.raises(ShapeError):
            dc.Mlp([(dc.parameter(np.ones((2, 3))), dc.parameter(np.zeros(3))),
                    (dc.parameter(np.ones((4, 1))), dc.parameter(np.zeros(1)))])

    def test_parameter_names(self, rng: np.random.Generator) -> None:
        net = dc.Mlp.build([2, 3, 1], rng, name="actor")
        assert list(net.named_parameters()) == ["0.weight", "0.bias", "1.weight", "1.bias"]
        assert net.layers[1][0].name == "actor.1.weight"

    @pytest.mark.parametrize("seed", range(20))
    def test_gradients_match_finite_differences(self, seed: int) -> None:
        rng = np.random.default_rng(seed)
        net = dc.Mlp.build([3, 5, 2], rng)
        x = dc.Tensor(rng.standard_normal((4, 3)))
        target = rng.standard_normal((4, 2))

        def loss() -> dc.Tensor:
            error = net(x) - target
            return (error * error).mean()

        loss().backward()
        for param in net.parameters():
            assert relative_error(param.grad, dc.numerical_grad(loss, param)) <= 1e-4  # type: ignore[arg-type]


class TestAdam:
    def test_zero_gradient_leaves_parameters(self) -> None:
        w = dc.parameter([1.0, -2.0])
        w.grad = np.zeros(2)
        dc.adam_step([w], dc.AdamState(lr=0.1))
        np.testing.assert_array_equal(w.data, [1.0, -2.0])

    def test_first_step_moves_by_learning_rate(self) -> None:
        w = dc.parameter(0.0)
        w.grad = np.array(1.0)
        state = dc.AdamState(lr=0.1)
        dc.adam_step([w], state)
        assert w.data == pytest.approx(-0.1 / (1.0 + 1e-5), rel=1e-12)
        assert state.t == 1

    def test_missing_gradient(self) -> None:
        with pytest.raises(ContractError):
            dc.adam_step([dc.parameter(1.0)], dc.AdamState())

    def test_minimizes_square(self) -> None:
        w = dc.parameter(1.0)
        optimizer = dc.Adam([w], lr=0.05)
        losses = []
        for _ in range(100):
            optimizer.zero_grad()
            loss = w * w
            losses.append(loss.item())
            loss.backward()
            optimizer.step()
        assert abs(w.data) < 1.0
        assert losses[-1] < losses[0]

    def test_learning_rate_property(self) -> None:
        optimizer = dc.Adam([dc.parameter(1.0)], lr=0.1)
        optimizer.lr = 0.01
        assert optimizer.state.lr == 0.01


class TestClipGradNorm:
    def test_rescales_above_threshold(self) -> None:
        a, b = dc.parameter(0.0), dc.parameter(0.0)
        a.grad, b.grad = np.array(3.0), np.array(4.0)
        assert dc.clip_grad_norm([a, b], 0.5) == pytest.approx(5.0)
        norm = math.hypot(float(a.grad), float(b.grad))
        assert norm == pytest.approx(0.5, rel=1e-5)

    def test_leaves_small_gradients(self) -> None:
        a = dc.parameter(0.0)
        a.grad = np.array(0.1)
        dc.clip_grad_norm([a], 0.5)
        assert a.grad == 0.1
