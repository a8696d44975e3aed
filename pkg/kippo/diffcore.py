"""
Dense tensors with reverse-mode differentiation, the initializers and the Adam optimizer.

Every array is ``float64``. A :class:`Tensor` records the operation that produced it when
any of its inputs requires a gradient and recording is enabled (see :func:`no_grad`).
:func:`backward` walks the recorded graph once and writes ``d loss / d leaf`` into the
``grad`` slot of every leaf that requires a gradient.

Gradient slots are never accumulated across calls: they must be reset with
:func:`zero_grad` before the next :func:`backward`, otherwise a :class:`ContractError`
is raised.
"""

from __future__ import annotations

import contextlib
import math
import threading
from dataclasses import dataclass, field
from typing import TYPE_CHECKING, Any, Protocol, Union

import numpy as np

from ._enums import InitKindEnum
from .errors import ContractError, NonFiniteError, ShapeError

if TYPE_CHECKING:
    from collections.abc import Callable, Iterable, Iterator, Sequence

__all__ = (
    "Adam",
    "AdamState",
    "Mlp",
    "Module",
    "Tensor",
    "adam_step",
    "assert_finite",
    "backward",
    "clip",
    "clip_grad_norm",
    "concat",
    "exp",
    "init_matrix",
    "is_finite",
    "maximum",
    "minimum",
    "mlp_forward",
    "no_grad",
    "numerical_grad",
    "parameter",
    "stack",
    "tanh",
    "zero_grad",
)

ArrayLike = Union["Tensor", np.ndarray, float, int, "Sequence[Any]"]

_grad_mode = threading.local()


def is_grad_enabled() -> bool:
    return getattr(_grad_mode, "enabled", True)


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Disable graph recording for the enclosed block (rollouts, evaluation)."""
    previous = is_grad_enabled()
    _grad_mode.enabled = False
    try:
        yield
    finally:
        _grad_mode.enabled = previous


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


class Tensor:
    """
    A dense ``float64`` array with an optional gradient slot.

    Parameters
    -----------
    data: :class:`ArrayLike`
        Values; copied into a new ``float64`` array.
    requires_grad: :class:`bool`, optional
        Whether :func:`backward` should write a gradient for this tensor, by default False.
    name: :class:`str` | None, optional
        Used in error messages and checkpoints.
    """

    __slots__ = ("_backward_fn", "_parents", "data", "grad", "name", "requires_grad")

    def __init__(self, data: ArrayLike, *, requires_grad: bool = False, name: str | None = None) -> None:
        if isinstance(data, Tensor):
            data = data.data
        self.data: np.ndarray = np.array(data, dtype=np.float64)
        self.requires_grad: bool = requires_grad
        self.grad: np.ndarray | None = None
        self.name: str | None = name
        self._parents: tuple[Tensor, ...] = ()
        self._backward_fn: Callable[[np.ndarray], tuple[np.ndarray | None, ...]] | None = None

    def __repr__(self) -> str:
        label = f" {self.name}" if self.name else ""
        return f"<Tensor{label} shape={self.shape} requires_grad={self.requires_grad}>"

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def is_leaf(self) -> bool:
        return self._backward_fn is None

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() needs a single-element tensor, got shape {self.shape}.")
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def detach(self) -> Tensor:
        """A new leaf sharing no graph with ``self``: gradients stop here."""
        return Tensor(self.data)

    def backward(self) -> None:
        backward(self)

    # arithmetic

    def __add__(self, other: ArrayLike) -> Tensor:
        other = _as_tensor(other)
        a_shape, b_shape = self.shape, other.shape
        return _record(
            self.data + other.data,
            (self, other),
            lambda g: (_unbroadcast(g, a_shape), _unbroadcast(g, b_shape)),
        )

    __radd__ = __add__

    def __sub__(self, other: ArrayLike) -> Tensor:
        other = _as_tensor(other)
        a_shape, b_shape = self.shape, other.shape
        return _record(
            self.data - other.data,
            (self, other),
            lambda g: (_unbroadcast(g, a_shape), _unbroadcast(-g, b_shape)),
        )

    def __rsub__(self, other: ArrayLike) -> Tensor:
        return _as_tensor(other) - self

    def __mul__(self, other: ArrayLike) -> Tensor:
        other = _as_tensor(other)
        a, b = self.data, other.data
        return _record(
            a * b,
            (self, other),
            lambda g: (_unbroadcast(g * b, a.shape), _unbroadcast(g * a, b.shape)),
        )

    __rmul__ = __mul__

    def __truediv__(self, other: ArrayLike) -> Tensor:
        other = _as_tensor(other)
        a, b = self.data, other.data
        return _record(
            a / b,
            (self, other),
            lambda g: (_unbroadcast(g / b, a.shape), _unbroadcast(-g * a / (b * b), b.shape)),
        )

    def __rtruediv__(self, other: ArrayLike) -> Tensor:
        return _as_tensor(other) / self

    def __neg__(self) -> Tensor:
        return _record(-self.data, (self,), lambda g: (-g,))

    def __pow__(self, exponent: int) -> Tensor:
        if not isinstance(exponent, int):
            raise ContractError(f"Only integer powers are supported, got {exponent!r}.")
        a = self.data
        return _record(a**exponent, (self,), lambda g: (g * exponent * a ** (exponent - 1),))

    def __matmul__(self, other: ArrayLike) -> Tensor:
        other = _as_tensor(other)
        a, b = self.data, other.data
        if a.ndim != 2 or b.ndim != 2:
            raise ShapeError(f"matmul expects 2-D operands, got {a.shape} and {b.shape}.")
        if a.shape[1] != b.shape[0]:
            raise ShapeError(f"matmul dimension mismatch: {a.shape} @ {b.shape}.")
        return _record(a @ b, (self, other), lambda g: (g @ b.T, a.T @ g))

    def __getitem__(self, index: Any) -> Tensor:
        shape = self.shape

        def _backward(g: np.ndarray) -> tuple[np.ndarray]:
            out = np.zeros(shape)
            np.add.at(out, index, g)
            return (out,)

        return _record(self.data[index], (self,), _backward)

    # shape and reductions

    @property
    def T(self) -> Tensor:
        return _record(self.data.T, (self,), lambda g: (g.T,))

    def reshape(self, *shape: int) -> Tensor:
        original = self.shape
        return _record(self.data.reshape(shape), (self,), lambda g: (g.reshape(original),))

    def sum(self, axis: int | None = None) -> Tensor:
        shape = self.shape

        def _backward(g: np.ndarray) -> tuple[np.ndarray]:
            if axis is not None:
                g = np.expand_dims(g, axis)
            return (np.broadcast_to(g, shape).copy(),)

        return _record(self.data.sum(axis=axis), (self,), _backward)

    def mean(self, axis: int | None = None) -> Tensor:
        count = self.data.size if axis is None else self.shape[axis]
        return self.sum(axis=axis) * (1.0 / count)


def _as_tensor(value: ArrayLike) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def _record(
    data: np.ndarray,
    parents: tuple[Tensor, ...],
    backward_fn: Callable[[np.ndarray], tuple[np.ndarray | None, ...]],
) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = np.asarray(data, dtype=np.float64)
    out.grad = None
    out.name = None
    out._parents = ()
    out._backward_fn = None
    out.requires_grad = False
    if is_grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward_fn = backward_fn
    return out


def parameter(data: ArrayLike, name: str | None = None) -> Tensor:
    return Tensor(data, requires_grad=True, name=name)


def tanh(x: Tensor) -> Tensor:
    y = np.tanh(x.data)
    return _record(y, (x,), lambda g: (g * (1.0 - y * y),))


def exp(x: Tensor) -> Tensor:
    y = np.exp(x.data)
    return _record(y, (x,), lambda g: (g * y,))


def clip(x: Tensor, low: float, high: float) -> Tensor:
    """Clamp elementwise; the gradient is 1 strictly inside ``[low, high]`` and on the bounds, 0 outside."""
    inside = (x.data >= low) & (x.data <= high)
    return _record(np.clip(x.data, low, high), (x,), lambda g: (g * inside,))


def minimum(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise minimum; ties send the gradient to ``a``."""
    pick_a = a.data <= b.data
    return _record(
        np.where(pick_a, a.data, b.data),
        (a, b),
        lambda g: (_unbroadcast(g * pick_a, a.shape), _unbroadcast(g * ~pick_a, b.shape)),
    )


def maximum(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise maximum; ties send the gradient to ``a``."""
    pick_a = a.data >= b.data
    return _record(
        np.where(pick_a, a.data, b.data),
        (a, b),
        lambda g: (_unbroadcast(g * pick_a, a.shape), _unbroadcast(g * ~pick_a, b.shape)),
    )


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]
    return _record(
        np.concatenate([t.data for t in tensors], axis=axis),
        tuple(tensors),
        lambda g: tuple(np.split(g, splits, axis=axis)),
    )


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    count = len(tensors)
    return _record(
        np.stack([t.data for t in tensors], axis=axis),
        tuple(tensors),
        lambda g: tuple(np.take(g, i, axis=axis) for i in range(count)),
    )


def _topological_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack_: list[tuple[Tensor, bool]] = [(root, False)]
    while stack_:
        node, expanded = stack_.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack_.append((node, True))
        stack_.extend((parent, False) for parent in node._parents if parent.requires_grad and id(parent) not in seen)
    return order


def backward(loss: Tensor) -> None:
    """
    Write ``d loss / d leaf`` into the ``grad`` slot of every reachable leaf that requires a gradient.

    Parameters
    -----------
    loss: :class:`Tensor`
        A 0-d tensor.

    Raises
    -------
    :exc:`ContractError`
        ``loss`` is not a scalar, does not depend on any tensor requiring a gradient, or a
        reachable leaf still carries a gradient from a previous call.
    """
    if loss.ndim != 0:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}.")
    if not loss.requires_grad:
        raise ContractError("backward called on a loss that does not depend on any tensor requiring grad.")

    order = _topological_order(loss)
    leaves = [node for node in order if node.is_leaf]
    stale = [node.name or repr(node) for node in leaves if node.grad is not None]
    if stale:
        raise ContractError(f"Gradients were not reset before backward: {', '.join(stale)}.")

    pending: dict[int, np.ndarray] = {id(loss): np.ones((), dtype=np.float64)}
    for node in reversed(order):
        upstream = pending.pop(id(node), None)
        if upstream is None:
            continue
        if node.is_leaf:
            node.grad = np.array(upstream, dtype=np.float64).reshape(node.shape)
            continue
        assert node._backward_fn is not None
        for parent, grad in zip(node._parents, node._backward_fn(upstream), strict=True):
            if grad is None or not parent.requires_grad:
                continue
            key = id(parent)
            pending[key] = pending[key] + grad if key in pending else grad


def zero_grad(params: Iterable[Tensor]) -> None:
    for param in params:
        param.grad = None


def is_finite(tensor: Tensor | np.ndarray) -> bool:
    data = tensor.data if isinstance(tensor, Tensor) else tensor
    return bool(np.all(np.isfinite(data)))


def assert_finite(tensor: Tensor | np.ndarray, what: str) -> None:
    """
    Raise :class:`NonFiniteError` naming ``what`` if ``tensor`` holds a NaN or infinity.
    """
    if not is_finite(tensor):
        data = tensor.data if isinstance(tensor, Tensor) else np.asarray(tensor)
        raise NonFiniteError(
            f"Non-finite value in {what}.",
            {"what": what, "nan": int(np.isnan(data).sum()), "inf": int(np.isinf(data).sum())},
        )


def init_matrix(kind: InitKindEnum | str, rows: int, cols: int, rng: np.random.Generator) -> np.ndarray:
    """
    Sample an initial ``rows x cols`` matrix.

    Parameters
    -----------
    kind: :class:`InitKindEnum`
        ``xavier_uniform`` samples ``U(-a, a)`` with ``a = sqrt(6 / (rows + cols))``;
        ``orthogonal`` returns ``Q`` with ``Q^T Q = I``; ``zeros`` returns zeros.
    rows: :class:`int`
        At least 1.
    cols: :class:`int`
        At least 1; must equal ``rows`` for ``orthogonal``.
    rng: :class:`numpy.random.Generator`
        Source of randomness.

    Raises
    -------
    :exc:`ContractError`
        Non-positive dimensions or a non-square orthogonal request.
    """
    kind = InitKindEnum(kind)
    if rows < 1 or cols < 1:
        raise ContractError(f"Matrix dimensions must be positive, got {rows}x{cols}.")
    if kind is InitKindEnum.zeros:
        return np.zeros((rows, cols))
    if kind is InitKindEnum.xavier_uniform:
        bound = math.sqrt(6.0 / (rows + cols))
        return rng.uniform(-bound, bound, size=(rows, cols))
    if rows != cols:
        raise ContractError(f"Orthogonal initialization needs a square matrix, got {rows}x{cols}.")
    q, r = np.linalg.qr(rng.standard_normal((rows, cols)))
    # sign fix makes the draw Haar-distributed
    return q * np.sign(np.diag(r))


class Module(Protocol):
    """Anything callable on a batch that exposes its trainable tensors by name."""

    def __call__(self, x: Tensor) -> Tensor: ...

    def named_parameters(self) -> dict[str, Tensor]: ...


class Mlp:
    """
    A multilayer perceptron: ``tanh`` on hidden layers, identity on the output layer.

    Parameters
    -----------
    layers: :class:`list[tuple[Tensor, Tensor]]`
        ``(weight, bias)`` pairs; a weight has shape ``(fan_in, fan_out)`` and is applied as ``x @ W + b``.
    name: :class:`str`, optional
        Prefix for parameter names.
    """

    def __init__(self, layers: list[tuple[Tensor, Tensor]], name: str = "mlp") -> None:
        if not layers:
            raise ShapeError(f"{name}: an MLP needs at least one layer.")
        for index, (weight, bias) in enumerate(layers):
            if weight.ndim != 2 or bias.shape != (weight.shape[1],):
                raise ShapeError(f"{name} layer {index}: weight {weight.shape} and bias {bias.shape} do not agree.")
            if index and layers[index - 1][0].shape[1] != weight.shape[0]:
                raise ShapeError(
                    f"{name} layer {index}: fan-in {weight.shape[0]} does not match "
                    f"previous fan-out {layers[index - 1][0].shape[1]}."
                )
            weight.name = weight.name or f"{name}.{index}.weight"
            bias.name = bias.name or f"{name}.{index}.bias"
        self.layers = layers
        self.name = name

    @classmethod
    def build(cls, sizes: Sequence[int], rng: np.random.Generator, name: str = "mlp") -> Mlp:
        """
        Xavier-uniform weights and zero biases for the layer widths in ``sizes`` (input first, output last).
        """
        layers = [
            (
                parameter(init_matrix(InitKindEnum.xavier_uniform, fan_in, fan_out, rng)),
                parameter(np.zeros(fan_out)),
            )
            for fan_in, fan_out in zip(sizes[:-1], sizes[1:], strict=True)
        ]
        return cls(layers, name=name)

    @property
    def in_features(self) -> int:
        return self.layers[0][0].shape[0]

    @property
    def out_features(self) -> int:
        return self.layers[-1][0].shape[1]

    def __call__(self, x: Tensor) -> Tensor:
        return mlp_forward(self, x)

    def named_parameters(self) -> dict[str, Tensor]:
        params: dict[str, Tensor] = {}
        for index, (weight, bias) in enumerate(self.layers):
            params[f"{index}.weight"] = weight
            params[f"{index}.bias"] = bias
        return params

    def parameters(self) -> list[Tensor]:
        return list(self.named_parameters().values())


def mlp_forward(params: Mlp, x: Tensor) -> Tensor:
    """
    Evaluate ``params`` on a ``batch x d_in`` tensor.

    Raises
    -------
    :exc:`ShapeError`
        The input width does not match the first layer's fan-in.
    """
    if x.ndim != 2 or x.shape[1] != params.in_features:
        raise ShapeError(f"{params.name} layer 0: expected input of width {params.in_features}, got shape {x.shape}.")
    last = len(params.layers) - 1
    for index, (weight, bias) in enumerate(params.layers):
        x = x @ weight + bias
        if index != last:
            x = tanh(x)
    return x


@dataclass
class AdamState:
    """
    Moments and step counter for a list of parameters.

    The first and second moments are stored per parameter in the same order as the
    parameters handed to :func:`adam_step`.
    """

    lr: float = 3e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-5
    t: int = 0
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)


def adam_step(params: Sequence[Tensor], state: AdamState) -> None:
    """
    Apply one bias-corrected Adam update using the ``grad`` slots of ``params``.

    Raises
    -------
    :exc:`ContractError`
        A parameter has no gradient.
    :exc:`ShapeError`
        A gradient or moment does not match its parameter.
    """
    missing = [p.name or repr(p) for p in params if p.grad is None]
    if missing:
        raise ContractError(f"Adam step with missing gradients: {', '.join(missing)}.")
    if not state.m:
        state.m = [np.zeros_like(p.data) for p in params]
        state.v = [np.zeros_like(p.data) for p in params]
    if len(state.m) != len(params):
        raise ShapeError(f"Adam state tracks {len(state.m)} parameters, got {len(params)}.")

    state.t += 1
    correction1 = 1.0 - state.beta1**state.t
    correction2 = 1.0 - state.beta2**state.t
    for param, m, v in zip(params, state.m, state.v, strict=True):
        grad = param.grad
        assert grad is not None
        if grad.shape != param.shape or m.shape != param.shape:
            raise ShapeError(f"{param.name}: gradient {grad.shape} does not match parameter {param.shape}.")
        m *= state.beta1
        m += (1.0 - state.beta1) * grad
        v *= state.beta2
        v += (1.0 - state.beta2) * grad * grad
        param.data -= state.lr * (m / correction1) / (np.sqrt(v / correction2) + state.eps)


class Adam:
    """
    One Adam instance over a fixed, ordered list of parameters.

    Parameters
    -----------
    params: :class:`Sequence[Tensor]`
        Trainable tensors.
    lr: :class:`float`, optional
        Step size, by default 3e-4.
    betas: :class:`tuple[float, float]`, optional
        Moment decay rates, by default (0.9, 0.999).
    eps: :class:`float`, optional
        Denominator guard, by default 1e-5.
    """

    def __init__(
        self,
        params: Sequence[Tensor],
        lr: float = 3e-4,
        betas: tuple[float, float] = (0.9, 0.999),
        eps: float = 1e-5,
    ) -> None:
        self.params = list(params)
        self.state = AdamState(lr=lr, beta1=betas[0], beta2=betas[1], eps=eps)

    @property
    def lr(self) -> float:
        return self.state.lr

    @lr.setter
    def lr(self, value: float) -> None:
        self.state.lr = value

    def zero_grad(self) -> None:
        zero_grad(self.params)

    def step(self) -> None:
        adam_step(self.params, self.state)


def clip_grad_norm(params: Iterable[Tensor], max_norm: float) -> float:
    """
    Rescale gradients in place so their global L2 norm is at most ``max_norm``.

    Returns
    --------
    :class:`float`
        The norm before clipping.
    """
    grads = [p.grad for p in params if p.grad is not None]
    total = math.sqrt(sum(float(np.sum(g * g)) for g in grads))
    if total > max_norm:
        scale = max_norm / (total + 1e-6)
        for grad in grads:
            grad *= scale
    return total


def numerical_grad(fn: Callable[[], Tensor], tensor: Tensor, step: float = 1e-5) -> np.ndarray:
    """
    Central finite-difference estimate of ``d fn() / d tensor``.

    ``fn`` is re-evaluated with each entry of ``tensor.data`` nudged by ``+-step``;
    the tensor is restored afterwards.
    """
    tensor.data = np.ascontiguousarray(tensor.data)
    grad = np.zeros_like(tensor.data)
    flat = tensor.data.reshape(-1)
    out = grad.reshape(-1)
    with no_grad():
        for i in range(flat.size):
            original = flat[i]
            flat[i] = original + step
            upper = fn().item()
            flat[i] = original - step
            lower = fn().item()
            flat[i] = original
            out[i] = (upper - lower) / (2.0 * step)
    return grad
