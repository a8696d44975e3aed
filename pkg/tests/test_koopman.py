from __future__ import annotations

import numpy as np
import pytest
from conftest import linear_layer, linpoly_rollout, oracle_model

from kippo import diffcore as dc
from kippo._enums import PredictionNormEnum
from kippo.envs import LinearizablePoly
from kippo.errors import ContractError, ShapeError
from kippo.koopman import (
    KoopmanModel,
    decode_state,
    default_action_latent_dim,
    default_latent_dim,
    encode_action,
    encode_state,
    loss_latent_prediction,
    loss_reconstruction,
    loss_representation_total,
    loss_state_prediction,
    predict_latent_sequence,
)
from kippo.rollout import build_windows


def identity_model(dim: int, k_x: np.ndarray | None = None) -> KoopmanModel:
    return KoopmanModel(
        linear_layer(np.eye(dim), "phi_x"),
        linear_layer(np.eye(dim), "psi_x"),
        linear_layer(np.eye(1), "phi_u"),
        dc.parameter(np.eye(dim) if k_x is None else k_x),
        dc.parameter(np.zeros((dim, 1))),
    )


def oracle_windows(env: LinearizablePoly, horizon: int = 8, seed: int = 0) -> tuple[dc.Tensor, dc.Tensor, np.ndarray]:
    states, actions, dones = linpoly_rollout(env, 120, seed)
    state_windows, action_windows, masks = build_windows(states, actions, dones, horizon)
    return dc.Tensor(state_windows[horizon:]), dc.Tensor(action_windows[horizon:]), masks[horizon:]


class TestDefaults:
    def test_latent_dim_is_clamped(self) -> None:
        assert default_latent_dim(1) == 8
        assert default_latent_dim(3) == 12
        assert default_latent_dim(20) == 48

    def test_action_latent_dim(self) -> None:
        assert default_action_latent_dim(1) == 4
        assert default_action_latent_dim(3) == 6

    def test_build_initialization(self, rng: np.random.Generator) -> None:
        model = KoopmanModel.build(3, 1, rng, hidden_units=16)
        assert model.latent_dim == 12
        assert model.action_latent_dim == 4
        np.testing.assert_allclose(model.K_x.data.T @ model.K_x.data, np.eye(12), atol=1e-10)
        np.testing.assert_array_equal(model.K_u.data, np.zeros((12, 4)))
        assert {"phi_x.0.weight", "psi_x.2.bias", "phi_u.1.weight", "K_x", "K_u"} <= set(model.named_parameters())

    def test_latent_dim_below_state_dim(self, rng: np.random.Generator) -> None:
        with pytest.raises(ContractError):
            KoopmanModel.build(4, 1, rng, latent_dim=3)

    def test_shapes_are_checked(self) -> None:
        with pytest.raises(ShapeError):
            KoopmanModel(
                linear_layer(np.eye(2), "phi_x"),
                linear_layer(np.eye(2), "psi_x"),
                linear_layer(np.eye(1), "phi_u"),
                dc.parameter(np.eye(2)),
                dc.parameter(np.zeros((3, 1))),
            )


class TestEncoders:
    def test_identity_encoder(self) -> None:
        x = dc.Tensor([[1.0, -2.0], [0.5, 3.0]])
        model = identity_model(2)
        np.testing.assert_array_equal(encode_state(model, x).data, x.data)
        np.testing.assert_array_equal(decode_state(model, encode_state(model, x)).data, x.data)

    def test_rows_are_independent(self, rng: np.random.Generator) -> None:
        model = KoopmanModel.build(3, 1, rng, hidden_units=8)
        x = rng.standard_normal((4, 3))
        forward = encode_state(model, dc.Tensor(x)).data
        backward = encode_state(model, dc.Tensor(x[::-1])).data
        np.testing.assert_allclose(backward, forward[::-1], rtol=0, atol=1e-12)

    def test_quadratic_lift(self, linpoly: LinearizablePoly) -> None:
        x = np.array([[0.5, -1.0], [2.0, 0.25]])
        lifted = encode_state(oracle_model(linpoly), dc.Tensor(x)).data
        np.testing.assert_array_equal(lifted, linpoly.lift(x))

    def test_zero_action_at_initialization(self, rng: np.random.Generator) -> None:
        model = KoopmanModel.build(3, 1, rng, hidden_units=8)
        v = encode_action(model, dc.Tensor(np.zeros((1, 1))))
        assert dc.is_finite(v)
        np.testing.assert_array_equal((v @ model.K_u.T).data, np.zeros((1, model.latent_dim)))

    def test_three_dimensional_inputs(self, rng: np.random.Generator) -> None:
        model = KoopmanModel.build(2, 1, rng, hidden_units=8)
        x = rng.standard_normal((3, 5, 2))
        stacked = encode_state(model, dc.Tensor(x)).data
        flat = encode_state(model, dc.Tensor(x.reshape(15, 2))).data
        np.testing.assert_array_equal(stacked.reshape(15, -1), flat)


class TestPrediction:
    def test_identity_dynamics_hold_latent(self) -> None:
        y0 = dc.Tensor([[1.0, 2.0]])
        batch = predict_latent_sequence(identity_model(2), y0, dc.Tensor(np.ones((1, 4, 1))))
        np.testing.assert_array_equal(batch.predicted_latents.data, np.tile(y0.data, (4, 1))[None])
        assert batch.horizon == 4

    def test_scalar_geometric_recursion(self) -> None:
        model = identity_model(1, k_x=np.array([[2.0]]))
        batch = predict_latent_sequence(model, dc.Tensor([[1.0]]), dc.Tensor(np.zeros((1, 3, 1))))
        np.testing.assert_array_equal(batch.predicted_latents.data.reshape(-1), [2.0, 4.0, 8.0])

    def test_oracle_matches_lifted_states(self, linpoly: LinearizablePoly) -> None:
        model = oracle_model(linpoly)
        state_windows, action_windows, masks = oracle_windows(linpoly)
        full = masks.min(axis=1) == 1.0
        windows = state_windows.data[full]
        batch = predict_latent_sequence(
            model, encode_state(model, dc.Tensor(windows[:, 0, :])), dc.Tensor(action_windows.data[full])
        )
        np.testing.assert_allclose(batch.predicted_latents.data, linpoly.lift(windows[:, 1:, :]), rtol=0, atol=1e-10)

    def test_matches_hand_unroll(self, rng: np.random.Generator) -> None:
        model = KoopmanModel.build(2, 1, rng, hidden_units=8)
        model.K_u.data = rng.standard_normal(model.K_u.shape)
        y0 = rng.standard_normal((3, model.latent_dim))
        actions = rng.standard_normal((3, 5, 1))
        batch = predict_latent_sequence(model, dc.Tensor(y0), dc.Tensor(actions))
        v = encode_action(model, dc.Tensor(actions)).data
        y = y0
        for h in range(5):
            y = y @ model.K_x.data.T + v[:, h, :] @ model.K_u.data.T
            np.testing.assert_allclose(batch.predicted_latents.data[:, h, :], y, rtol=0, atol=1e-12)

    def test_affine_in_initial_latent(self, rng: np.random.Generator) -> None:
        model = KoopmanModel.build(2, 1, rng, hidden_units=8)
        model.K_u.data = rng.standard_normal(model.K_u.shape)
        first, second = rng.standard_normal((2, 4, model.latent_dim))
        actions = dc.Tensor(rng.standard_normal((4, 3, 1)))

        def unroll(y0: np.ndarray) -> np.ndarray:
            return predict_latent_sequence(model, dc.Tensor(y0), actions).predicted_latents.data

        np.testing.assert_allclose(
            unroll(3.0 * first - 2.0 * second), 3.0 * unroll(first) - 2.0 * unroll(second), rtol=0, atol=1e-12
        )

    def test_actions_ignored_at_initialization(self, rng: np.random.Generator) -> None:
        model = KoopmanModel.build(3, 1, rng, hidden_units=8)
        y0 = dc.Tensor(rng.standard_normal((2, model.latent_dim)))
        calm = predict_latent_sequence(model, y0, dc.Tensor(rng.standard_normal((2, 4, 1))))
        wild = predict_latent_sequence(model, y0, dc.Tensor(10.0 * rng.standard_normal((2, 4, 1))))
        np.testing.assert_array_equal(calm.predicted_latents.data, wild.predicted_latents.data)

    def test_actions_must_match_batch(self) -> None:
        with pytest.raises(ShapeError):
            predict_latent_sequence(identity_model(2), dc.Tensor(np.ones((2, 2))), dc.Tensor(np.ones((3, 4, 1))))


class TestLosses:
    def test_reconstruction_identity(self) -> None:
        assert loss_reconstruction(identity_model(2), dc.Tensor([[3.0, 4.0]])).item() == 0.0

    def test_reconstruction_zero_decoder(self) -> None:
        model = identity_model(2)
        model.psi_x = linear_layer(np.zeros((2, 2)), "psi_x")
        assert loss_reconstruction(model, dc.Tensor([[3.0, 4.0]])).item() == pytest.approx(12.5)

    def test_all_masks_zero(self, linpoly: LinearizablePoly) -> None:
        model = KoopmanModel.build(2, 1, np.random.default_rng(0), hidden_units=8)
        state_windows, action_windows, masks = oracle_windows(linpoly)
        zeros = np.zeros_like(masks)
        assert loss_latent_prediction(model, state_windows, action_windows, zeros).item() == 0.0
        assert loss_state_prediction(model, state_windows, action_windows, zeros).item() == 0.0

    def test_masked_scalar_example(self) -> None:
        # y0 = 0 with K_x = 1 predicts 0 twice; targets 0.3 and 0.4 give errors (0.3, 0.4)
        model = identity_model(1)
        states = dc.Tensor(np.array([[[0.0], [0.3], [0.4]]]))
        actions = dc.Tensor(np.zeros((1, 2, 1)))
        masks = np.array([[1.0, 0.0]])
        assert loss_latent_prediction(model, states, actions, masks).item() == pytest.approx(0.045)
        assert loss_state_prediction(model, states, actions, masks).item() == pytest.approx(0.045)
        by_count = loss_latent_prediction(model, states, actions, masks, PredictionNormEnum.mask_count)
        assert by_count.item() == pytest.approx(0.09)

    def test_masked_steps_do_not_contribute(self, rng: np.random.Generator) -> None:
        model = KoopmanModel.build(2, 1, rng, hidden_units=8)
        model.K_u.data = rng.standard_normal(model.K_u.shape)
        states = rng.standard_normal((3, 5, 2))
        actions = rng.standard_normal((3, 4, 1))
        masks = np.array([[1.0, 1.0, 0.0, 0.0]] * 3)
        # steps 3 and 4 are masked: their targets and the actions u_2, u_3 feeding them are free
        moved_states, moved_actions = states.copy(), actions.copy()
        moved_states[:, 3:, :] += rng.standard_normal((3, 2, 2)) * 5.0
        moved_actions[:, 2:, :] += rng.standard_normal((3, 2, 1)) * 5.0
        for loss in (loss_latent_prediction, loss_state_prediction):
            before = loss(model, dc.Tensor(states), dc.Tensor(actions), masks).item()
            after = loss(model, dc.Tensor(moved_states), dc.Tensor(moved_actions), masks).item()
            assert before == after

    def test_oracle_losses_vanish(self, linpoly: LinearizablePoly) -> None:
        model = oracle_model(linpoly)
        state_windows, action_windows, masks = oracle_windows(linpoly, seed=5)
        assert masks.sum() > 0
        assert loss_latent_prediction(model, state_windows, action_windows, masks).item() <= 1e-10
        assert loss_state_prediction(model, state_windows, action_windows, masks).item() <= 1e-10

    def test_shared_prediction_is_reused(self, rng: np.random.Generator) -> None:
        model = KoopmanModel.build(2, 1, rng, hidden_units=8)
        states = dc.Tensor(rng.standard_normal((3, 5, 2)))
        actions = dc.Tensor(rng.standard_normal((3, 4, 1)))
        masks = np.ones((3, 4))
        shared = predict_latent_sequence(model, encode_state(model, states[:, 0, :]), actions)
        direct = loss_state_prediction(model, states, actions, masks).item()
        assert loss_state_prediction(model, states, actions, masks, prediction=shared).item() == direct

    def test_window_shapes(self) -> None:
        with pytest.raises(ShapeError):
            loss_latent_prediction(identity_model(1), dc.Tensor(np.zeros((1, 2, 1))), dc.Tensor(np.zeros((1, 2, 1))),
                                   np.ones((1, 2)))

    def test_weighted_total(self) -> None:
        parts = dc.Tensor(0.2), dc.Tensor(0.4), dc.Tensor(0.1)
        assert loss_representation_total(*parts, 1.0, 0.0, 0.0).item() == pytest.approx(0.2)
        assert loss_representation_total(*parts, 0.0, 0.0, 0.0).item() == 0.0
        assert loss_representation_total(*parts, 0.5, 0.25, 0.5).item() == pytest.approx(0.25)
        with pytest.raises(ContractError):
            loss_representation_total(*parts, -1.0, 0.0, 0.0)

    @pytest.mark.parametrize("seed", range(20))
    def test_gradients_match_finite_differences(self, seed: int) -> None:
        rng = np.random.default_rng(seed)
        model = KoopmanModel.build(2, 1, rng, latent_dim=3, action_latent_dim=2, hidden_layers=1, hidden_units=4)
        model.K_u.data = rng.standard_normal(model.K_u.shape) * 0.3
        states = dc.Tensor(rng.standard_normal((3, 4, 2)))
        actions = dc.Tensor(rng.standard_normal((3, 3, 1)))
        masks = (np.cumsum(rng.random((3, 3)) < 0.2, axis=1) == 0).astype(float)

        def total() -> dc.Tensor:
            return loss_representation_total(
                loss_reconstruction(model, states[:, 0, :]),
                loss_latent_prediction(model, states, actions, masks),
                loss_state_prediction(model, states, actions, masks),
                0.5,
                0.25,
                0.5,
            )

        total().backward()
        for name, param in model.named_parameters().items():
            numeric = dc.numerical_grad(total, param)
            analytic = param.grad
            assert analytic is not None, name
            scale = max(np.max(np.abs(analytic)), np.max(np.abs(numeric)), 1e-8)
            assert np.max(np.abs(analytic - numeric)) / scale <= 1e-4, name
