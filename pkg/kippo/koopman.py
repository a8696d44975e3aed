"""
The auxiliary representation learner.

A state encoder ``phi_x`` lifts states into an ``m``-dimensional latent space, an action
encoder ``phi_u`` maps actions to ``k`` dimensions, and two matrices advance latents
linearly: ``y_{h+1} = K_x y_h + K_u phi_u(u_h)``. A decoder ``psi_x`` maps latents back to
states. Three losses shape the latent space: reconstruction, latent-space prediction and
state-space prediction.

Reduction convention: squared errors are averaged over state/latent dimensions. Masked
prediction errors are summed over the horizon and divided by ``H`` (or by the number of
unmasked steps under :attr:`PredictionNormEnum.mask_count`), then averaged over the batch.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import TYPE_CHECKING

import numpy as np

from . import diffcore as dc
from ._enums import InitKindEnum, PredictionNormEnum
from .errors import ContractError, ShapeError

if TYPE_CHECKING:
    from .diffcore import Module, Tensor

__all__ = (
    "KoopmanModel",
    "PredictionBatch",
    "decode_state",
    "default_action_latent_dim",
    "default_latent_dim",
    "encode_action",
    "encode_state",
    "loss_latent_prediction",
    "loss_reconstruction",
    "loss_representation_total",
    "loss_state_prediction",
    "predict_latent_sequence",
)


def default_latent_dim(state_dim: int) -> int:
    """``4 * state_dim`` clamped to ``[8, 48]``."""
    return min(max(4 * state_dim, 8), 48)


def default_action_latent_dim(action_dim: int) -> int:
    return max(4, 2 * action_dim)


class KoopmanModel:
    """
    Encoders, decoder and the latent transition matrices ``K_x`` (m x m) and ``K_u`` (m x k).

    Parameters
    -----------
    phi_x: :class:`Module`
        State encoder, ``state_dim -> m``.
    psi_x: :class:`Module`
        State decoder, ``m -> state_dim``.
    phi_u: :class:`Module`
        Action encoder, ``action_dim -> k``.
    k_x: :class:`Tensor`
        Latent state matrix.
    k_u: :class:`Tensor`
        Latent control matrix.
    """

    def __init__(self, phi_x: Module, psi_x: Module, phi_u: Module, k_x: Tensor, k_u: Tensor) -> None:
        m = k_x.shape[0]
        if k_x.shape != (m, m):
            raise ShapeError(f"K_x must be square, got {k_x.shape}.")
        if k_u.ndim != 2 or k_u.shape[0] != m:
            raise ShapeError(f"K_u must have {m} rows, got {k_u.shape}.")
        k_x.name, k_u.name = "K_x", "K_u"
        self.phi_x = phi_x
        self.psi_x = psi_x
        self.phi_u = phi_u
        self.K_x = k_x
        self.K_u = k_u

    @classmethod
    def build(
        cls,
        state_dim: int,
        action_dim: int,
        rng: np.random.Generator,
        *,
        latent_dim: int | None = None,
        action_latent_dim: int | None = None,
        hidden_layers: int = 2,
        hidden_units: int = 128,
    ) -> KoopmanModel:
        """
        Xavier-initialised tanh MLPs with identical hidden layout, ``K_x`` orthogonal and ``K_u`` zero.

        Raises
        -------
        :exc:`ContractError`
            ``latent_dim`` is smaller than ``state_dim``.
        """
        m = latent_dim or default_latent_dim(state_dim)
        k = action_latent_dim or default_action_latent_dim(action_dim)
        if m < state_dim:
            raise ContractError(f"Latent dimension {m} must be at least the state dimension {state_dim}.")
        hidden = [hidden_units] * hidden_layers
        phi_x = dc.Mlp.build([state_dim, *hidden, m], rng, name="phi_x")
        psi_x = dc.Mlp.build([m, *hidden, state_dim], rng, name="psi_x")
        phi_u = dc.Mlp.build([action_dim, *hidden, k], rng, name="phi_u")
        k_x = dc.parameter(dc.init_matrix(InitKindEnum.orthogonal, m, m, rng))
        k_u = dc.parameter(dc.init_matrix(InitKindEnum.zeros, m, k, rng))
        return cls(phi_x, psi_x, phi_u, k_x, k_u)

    @property
    def latent_dim(self) -> int:
        return self.K_x.shape[0]

    @property
    def action_latent_dim(self) -> int:
        return self.K_u.shape[1]

    def named_parameters(self) -> dict[str, Tensor]:
        params: dict[str, Tensor] = {}
        for prefix, module in (("phi_x", self.phi_x), ("psi_x", self.psi_x), ("phi_u", self.phi_u)):
            params.update({f"{prefix}.{name}": tensor for name, tensor in module.named_parameters().items()})
        params["K_x"] = self.K_x
        params["K_u"] = self.K_u
        return params

    def parameters(self) -> list[Tensor]:
        return list(self.named_parameters().values())


@dataclass
class PredictionBatch:
    """
    Attributes
    -----------
    y0: :class:`Tensor`
        ``batch x m`` initial latents.
    encoded_actions: :class:`Tensor`
        ``batch x H x k``.
    predicted_latents: :class:`Tensor`
        ``batch x H x m``, entry ``h-1`` holds the prediction for step ``h``.
    """

    y0: Tensor
    encoded_actions: Tensor
    predicted_latents: Tensor

    @property
    def horizon(self) -> int:
        return self.predicted_latents.shape[1]


def _apply_rows(module: Module, x: Tensor) -> Tensor:
    """Apply ``module`` to the last axis of a 2-D or 3-D tensor."""
    if x.ndim == 2:
        return module(x)
    if x.ndim != 3:
        raise ShapeError(f"Expected a 2-D or 3-D tensor, got shape {x.shape}.")
    batch, steps, width = x.shape
    out = module(x.reshape(batch * steps, width))
    return out.reshape(batch, steps, out.shape[-1])


def encode_state(model: KoopmanModel, x: Tensor) -> Tensor:
    return _apply_rows(model.phi_x, x)


def decode_state(model: KoopmanModel, y: Tensor) -> Tensor:
    return _apply_rows(model.psi_x, y)


def encode_action(model: KoopmanModel, u: Tensor) -> Tensor:
    return _apply_rows(model.phi_u, u)


def predict_latent_sequence(model: KoopmanModel, y0: Tensor, actions: Tensor) -> PredictionBatch:
    """
    Unroll the latent dynamics from ``y0`` for ``H`` steps.

    Predicted latents are fed forward; true future states are never re-encoded inside the recursion.

    Parameters
    -----------
    model: :class:`KoopmanModel`
        The learner.
    y0: :class:`Tensor`
        ``batch x m`` initial latents.
    actions: :class:`Tensor`
        ``batch x H x action_dim`` raw actions ``u_0 .. u_{H-1}``.
    """
    if actions.ndim != 3 or actions.shape[0] != y0.shape[0]:
        raise ShapeError(f"Actions {actions.shape} do not match initial latents {y0.shape}.")
    horizon = actions.shape[1]
    if horizon < 1:
        raise ContractError("Prediction horizon must be at least 1.")
    encoded = encode_action(model, actions)
    k_x_t, k_u_t = model.K_x.T, model.K_u.T
    y = y0
    predicted: list[Tensor] = []
    for h in range(horizon):
        y = y @ k_x_t + encoded[:, h, :] @ k_u_t
        predicted.append(y)
    return PredictionBatch(y0=y0, encoded_actions=encoded, predicted_latents=dc.stack(predicted, axis=1))


def _masked_horizon_mean(errors: Tensor, masks: np.ndarray, normalization: PredictionNormEnum) -> Tensor:
    """``errors`` and ``masks`` are ``batch x H``; returns the batch mean of the per-window masked average."""
    masks = np.asarray(masks, dtype=np.float64)
    if masks.shape != errors.shape:
        raise ShapeError(f"Masks {masks.shape} do not match prediction errors {errors.shape}.")
    masked = (errors * masks).sum(axis=1)
    if PredictionNormEnum(normalization) is PredictionNormEnum.mask_count:
        masked = masked * (1.0 / np.maximum(masks.sum(axis=1), 1.0))
    else:
        masked = masked * (1.0 / masks.shape[1])
    return masked.mean()


def _split_windows(state_windows: Tensor, action_windows: Tensor, masks: np.ndarray) -> int:
    if state_windows.ndim != 3 or action_windows.ndim != 3:
        raise ShapeError(f"Windows must be 3-D, got {state_windows.shape} and {action_windows.shape}.")
    horizon = action_windows.shape[1]
    if state_windows.shape[1] != horizon + 1 or np.shape(masks) != (state_windows.shape[0], horizon):
        raise ShapeError(
            f"Inconsistent windows: states {state_windows.shape}, actions {action_windows.shape}, "
            f"masks {np.shape(masks)}."
        )
    return horizon


def loss_reconstruction(model: KoopmanModel, states: Tensor) -> Tensor:
    """Mean over batch and state dimensions of ``(psi_x(phi_x(x)) - x)^2``."""
    error = decode_state(model, encode_state(model, states)) - states
    return (error * error).mean()


def loss_latent_prediction(
    model: KoopmanModel,
    state_windows: Tensor,
    action_windows: Tensor,
    masks: np.ndarray,
    normalization: PredictionNormEnum = PredictionNormEnum.horizon,
    prediction: PredictionBatch | None = None,
) -> Tensor:
    """
    Masked multi-step error between predicted latents and encoded true future states.

    Parameters
    -----------
    state_windows: :class:`Tensor`
        ``batch x (H+1) x state_dim``; index 0 is the initial state, 1..H are targets.
    action_windows: :class:`Tensor`
        ``batch x H x action_dim``.
    masks: :class:`numpy.ndarray`
        ``batch x H`` binary masks.
    prediction: :class:`PredictionBatch` | None, optional
        Reuse an already computed unroll from the same windows.
    """
    _split_windows(state_windows, action_windows, masks)
    if prediction is None:
        prediction = predict_latent_sequence(model, encode_state(model, state_windows[:, 0, :]), action_windows)
    targets = encode_state(model, state_windows[:, 1:, :])
    error = prediction.predicted_latents - targets
    return _masked_horizon_mean((error * error).mean(axis=2), masks, normalization)


def loss_state_prediction(
    model: KoopmanModel,
    state_windows: Tensor,
    action_windows: Tensor,
    masks: np.ndarray,
    normalization: PredictionNormEnum = PredictionNormEnum.horizon,
    prediction: PredictionBatch | None = None,
) -> Tensor:
    """
    Masked multi-step error between decoded predicted latents and true future states.

    Takes the same arguments as :func:`loss_latent_prediction`.
    """
    _split_windows(state_windows, action_windows, masks)
    if prediction is None:
        prediction = predict_latent_sequence(model, encode_state(model, state_windows[:, 0, :]), action_windows)
    error = decode_state(model, prediction.predicted_latents) - state_windows[:, 1:, :]
    return _masked_horizon_mean((error * error).mean(axis=2), masks, normalization)


def loss_representation_total(
    l_rec: Tensor,
    l_ls: Tensor,
    l_ss: Tensor,
    w_rec: float,
    w_ls: float,
    w_ss: float,
) -> Tensor:
    """
    ``w_rec * L_rec + w_ls * L_ls + w_ss * L_ss``.

    Raises
    -------
    :exc:`ContractError`
        A weight is negative.
    """
    if min(w_rec, w_ls, w_ss) < 0:
        raise ContractError(f"Loss weights must be non-negative, got ({w_rec}, {w_ls}, {w_ss}).")
    return l_rec * w_rec + l_ls * w_ls + l_ss * w_ss
