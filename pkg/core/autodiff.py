"""
Reverse-mode Automatic Differentiation
Dense 2D float64 tensors recorded on an explicit tape, Adam updates,
and a central finite-difference gradient checker
"""

from __future__ import annotations

import contextvars
import logging
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Callable, Iterable, Iterator, Optional, Sequence, Union

import numpy as np

from core.errors import (
    ConfigurationError,
    ContractError,
    DegenerateFeatureError,
    NonFiniteError,
    ShapeError,
)

logger = logging.getLogger(__name__)

CONSTANT = "constant"
NORM_FLOOR = 1e-12
NORMALIZATION_TOLERANCE = 1e-6
REL_ERROR_FLOOR = 1e-6

_active_tape: contextvars.ContextVar = contextvars.ContextVar("active_tape", default=None)

BackwardRule = Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


class Tensor:
    """A dense 2D array with a gradient slot and a tape reference."""

    __slots__ = ("values", "grad", "requires_grad", "node_id", "name")
    __array_ufunc__ = None

    def __init__(self, values, requires_grad: bool = False, name: str = "", copy: bool = True):
        arr = np.array(values, dtype=np.float64) if copy else np.asarray(values, dtype=np.float64)
        if arr.ndim == 0:
            arr = arr.reshape(1, 1)
        elif arr.ndim == 1:
            arr = arr.reshape(1, -1)
        elif arr.ndim != 2:
            raise ShapeError("tensor", arr.shape, ("rows", "cols"), "only 2D tensors are supported")
        if arr.shape[0] == 0 or arr.shape[1] == 0:
            raise ContractError(f"tensor needs at least one row and one column, got shape {arr.shape}")
        if not np.isfinite(arr).all():
            raise NonFiniteError(f"tensor '{name or 'unnamed'}' contains NaN or Inf")
        self.values = arr
        self.grad = np.zeros_like(arr)
        self.requires_grad = requires_grad
        self.node_id: Union[int, str] = CONSTANT
        self.name = name

    @property
    def shape(self) -> tuple:
        return self.values.shape

    @property
    def rows(self) -> int:
        return self.values.shape[0]

    @property
    def cols(self) -> int:
        return self.values.shape[1]

    @property
    def T(self) -> "Tensor":
        return transpose(self)

    def item(self) -> float:
        if self.shape != (1, 1):
            raise ContractError(f"item() needs a 1x1 tensor, got shape {self.shape}")
        return float(self.values[0, 0])

    def numpy(self) -> np.ndarray:
        return self.values.copy()

    def sum(self, axis: Optional[int] = None) -> "Tensor":
        return reduce_sum(self, axis)

    def mean(self, axis: Optional[int] = None) -> "Tensor":
        return reduce_mean(self, axis)

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, node={self.node_id}, requires_grad={self.requires_grad})"


class Parameter:
    """A trainable tensor together with its Adam moment estimates."""

    def __init__(self, values, name: str = ""):
        self.name = name
        self.tensor = Tensor(values, requires_grad=True, name=name)
        self.adam_m = np.zeros_like(self.tensor.values)
        self.adam_v = np.zeros_like(self.tensor.values)
        self.step_count = 0

    @property
    def values(self) -> np.ndarray:
        return self.tensor.values

    @property
    def grad(self) -> np.ndarray:
        return self.tensor.grad

    @property
    def shape(self) -> tuple:
        return self.tensor.shape

    @property
    def frozen(self) -> bool:
        return not self.tensor.requires_grad

    def zero_grad(self) -> None:
        self.tensor.grad.fill(0.0)

    def __repr__(self) -> str:
        return f"Parameter(name={self.name!r}, shape={self.shape}, steps={self.step_count})"


@dataclass
class TapeNode:
    op: str
    inputs: tuple
    output: Tensor
    backward: BackwardRule


class Tape:
    """
    Ordered record of differentiable operations.

    Entering the tape makes it the active recorder for the current context;
    operations whose inputs require gradients are appended in execution order,
    which keeps the record topologically sorted.
    """

    def __init__(self):
        self.nodes: list[TapeNode] = []
        self._token = None

    def record(self, op: str, inputs: tuple, output: Tensor, backward_rule: BackwardRule) -> None:
        for tensor in inputs:
            if isinstance(tensor.node_id, int) and not self._owns(tensor):
                raise ContractError(f"{op}: input was recorded on a different tape")
        output.node_id = len(self.nodes)
        self.nodes.append(TapeNode(op, inputs, output, backward_rule))

    def _owns(self, tensor: Tensor) -> bool:
        node_id = tensor.node_id
        return isinstance(node_id, int) and node_id < len(self.nodes) and self.nodes[node_id].output is tensor

    def __len__(self) -> int:
        return len(self.nodes)

    def __enter__(self) -> "Tape":
        if self._token is not None:
            raise ContractError("tape is already active")
        self._token = _active_tape.set(self)
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        _active_tape.reset(self._token)
        self._token = None


def active_tape() -> Optional[Tape]:
    return _active_tape.get()


@contextmanager
def no_grad() -> Iterator[None]:
    """Run forward computations without recording, even inside an active tape."""
    token = _active_tape.set(None)
    try:
        yield
    finally:
        _active_tape.reset(token)


# ---------------------------------------------------------------------------
# helpers
# ---------------------------------------------------------------------------

TensorLike = Union[Tensor, Parameter, np.ndarray, float, int]


def as_tensor(value: TensorLike) -> Tensor:
    if isinstance(value, Tensor):
        return value
    if isinstance(value, Parameter):
        return value.tensor
    return Tensor(value)


def _record(op: str, values: np.ndarray, inputs: tuple, backward_rule: BackwardRule) -> Tensor:
    if not np.isfinite(values).all():
        raise NonFiniteError(f"{op} produced non-finite values")
    out = Tensor(values, copy=False)
    tape = _active_tape.get()
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        tape.record(op, inputs, out, backward_rule)
    return out


def _broadcast_shape(op: str, a: Tensor, b: Tensor) -> tuple:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(op, a.shape, b.shape) from None


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    if grad.shape == shape:
        return grad
    axes = tuple(i for i, (g, s) in enumerate(zip(grad.shape, shape)) if s == 1 and g != 1)
    return grad.sum(axis=axes, keepdims=True).reshape(shape)


# ---------------------------------------------------------------------------
# elementwise arithmetic
# ---------------------------------------------------------------------------

def add(a: TensorLike, b: TensorLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("add", a, b)

    def rule(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _record("add", a.values + b.values, (a, b), rule)


def sub(a: TensorLike, b: TensorLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("sub", a, b)

    def rule(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _record("sub", a.values - b.values, (a, b), rule)


def mul(a: TensorLike, b: TensorLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("mul", a, b)

    def rule(g):
        return _unbroadcast(g * b.values, a.shape), _unbroadcast(g * a.values, b.shape)

    return _record("mul", a.values * b.values, (a, b), rule)


def div(a: TensorLike, b: TensorLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("div", a, b)
    out = a.values / b.values

    def rule(g):
        return _unbroadcast(g / b.values, a.shape), _unbroadcast(-g * out / b.values, b.shape)

    return _record("div", out, (a, b), rule)


def scale(x: TensorLike, factor: float) -> Tensor:
    x = as_tensor(x)
    factor = float(factor)
    return _record("scale", x.values * factor, (x,), lambda g: (g * factor,))


def exp(x: TensorLike) -> Tensor:
    x = as_tensor(x)
    with np.errstate(over="ignore"):
        out = np.exp(x.values)
    return _record("exp", out, (x,), lambda g: (g * out,))


def log(x: TensorLike) -> Tensor:
    x = as_tensor(x)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(x.values)
    return _record("log", out, (x,), lambda g: (g / x.values,))


def relu(x: TensorLike) -> Tensor:
    """Elementwise max(0, x); the subgradient at exactly 0 is 0."""
    x = as_tensor(x)
    mask = x.values > 0.0
    return _record("relu", np.where(mask, x.values, 0.0), (x,), lambda g: (g * mask,))


# ---------------------------------------------------------------------------
# linear algebra and reshaping
# ---------------------------------------------------------------------------

def matmul(a: TensorLike, b: TensorLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.cols != b.rows:
        raise ShapeError("matmul", a.shape, b.shape)

    def rule(g):
        return g @ b.values.T, a.values.T @ g

    return _record("matmul", a.values @ b.values, (a, b), rule)


def linear(x: TensorLike, w: TensorLike, b: TensorLike) -> Tensor:
    """
    Dense layer x·w + b with the bias broadcast over rows.

    Args:
        x: input batch, shape (B, I)
        w: weight, shape (I, O)
        b: bias, shape (1, O)

    Returns:
        Tensor of shape (B, O)
    """
    x, w, b = as_tensor(x), as_tensor(w), as_tensor(b)
    if x.cols != w.rows:
        raise ShapeError("linear", x.shape, w.shape, "input columns must match weight rows")
    if b.shape != (1, w.cols):
        raise ShapeError("linear", w.shape, b.shape, "bias must be (1, out_features)")

    def rule(g):
        return g @ w.values.T, x.values.T @ g, g.sum(axis=0, keepdims=True)

    return _record("linear", x.values @ w.values + b.values, (x, w, b), rule)


def transpose(x: TensorLike) -> Tensor:
    x = as_tensor(x)
    return _record("transpose", x.values.T.copy(), (x,), lambda g: (g.T,))


def reduce_sum(x: TensorLike, axis: Optional[int] = None) -> Tensor:
    x = as_tensor(x)
    if axis is None:
        out = np.array([[x.values.sum()]])
    elif axis in (0, 1):
        out = x.values.sum(axis=axis, keepdims=True)
    else:
        raise ContractError(f"sum axis must be None, 0 or 1, got {axis}")

    def rule(g):
        return (np.broadcast_to(g, x.shape).copy(),)

    return _record("sum", out, (x,), rule)


def reduce_mean(x: TensorLike, axis: Optional[int] = None) -> Tensor:
    x = as_tensor(x)
    count = x.values.size if axis is None else x.shape[axis]
    return scale(reduce_sum(x, axis), 1.0 / count)


def take_rows(x: TensorLike, indices: Sequence[int]) -> Tensor:
    x = as_tensor(x)
    idx = np.asarray(indices, dtype=np.intp)
    if idx.ndim != 1 or idx.size == 0:
        raise ContractError("take_rows needs a non-empty 1D index array")
    if idx.min() < -x.rows or idx.max() >= x.rows:
        raise IndexError(f"take_rows: index out of range for {x.rows} rows")

    def rule(g):
        out = np.zeros_like(x.values)
        np.add.at(out, idx, g)
        return (out,)

    return _record("take_rows", x.values[idx], (x,), rule)


def pick(x: TensorLike, columns: Sequence[int]) -> Tensor:
    """Select x[i, columns[i]] for every row, returning a (B, 1) column."""
    x = as_tensor(x)
    cols = np.asarray(columns, dtype=np.intp)
    if cols.shape != (x.rows,):
        raise ShapeError("pick", x.shape, cols.shape, "need one column index per row")
    if cols.min() < 0 or cols.max() >= x.cols:
        raise IndexError(f"pick: column index out of range for {x.cols} columns")
    rows = np.arange(x.rows)

    def rule(g):
        out = np.zeros_like(x.values)
        out[rows, cols] = g[:, 0]
        return (out,)

    return _record("pick", x.values[rows, cols][:, None], (x,), rule)


def concat_rows(tensors: Sequence[TensorLike]) -> Tensor:
    parts = [as_tensor(t) for t in tensors]
    if not parts:
        raise ContractError("concat_rows needs at least one tensor")
    width = parts[0].cols
    for part in parts[1:]:
        if part.cols != width:
            raise ShapeError("concat_rows", parts[0].shape, part.shape)
    offsets = np.cumsum([0] + [p.rows for p in parts])

    def rule(g):
        return tuple(g[offsets[i]:offsets[i + 1]] for i in range(len(parts)))

    return _record("concat_rows", np.vstack([p.values for p in parts]), tuple(parts), rule)


# ---------------------------------------------------------------------------
# probability and geometry kernels
# ---------------------------------------------------------------------------

def log_softmax(x: TensorLike) -> Tensor:
    """Rowwise log-softmax with max subtraction."""
    x = as_tensor(x)
    if x.cols < 2:
        raise ConfigurationError(f"log_softmax needs at least 2 columns, got {x.cols}")
    shifted = x.values - x.values.max(axis=1, keepdims=True)
    out = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))

    def rule(g):
        return (g - np.exp(out) * g.sum(axis=1, keepdims=True),)

    return _record("log_softmax", out, (x,), rule)


def softmax(x: TensorLike) -> Tensor:
    return exp(log_softmax(x))


def l2_normalize(x: TensorLike) -> Tensor:
    """Scale every row to unit Euclidean norm."""
    x = as_tensor(x)
    norms = np.sqrt((x.values ** 2).sum(axis=1, keepdims=True))
    degenerate = np.flatnonzero(norms[:, 0] < NORM_FLOOR)
    if degenerate.size:
        raise DegenerateFeatureError(
            f"rows {degenerate.tolist()[:10]} have norm below {NORM_FLOOR}; cannot normalize"
        )
    out = x.values / norms

    def rule(g):
        return ((g - out * (g * out).sum(axis=1, keepdims=True)) / norms,)

    return _record("l2_normalize", out, (x,), rule)


def pairwise_sq_distances(x: TensorLike) -> Tensor:
    """Matrix of squared Euclidean distances between all row pairs."""
    x = as_tensor(x)
    diffs = x.values[:, None, :] - x.values[None, :, :]
    out = (diffs ** 2).sum(axis=-1)

    def rule(g):
        sym = g + g.T
        return (2.0 * (sym.sum(axis=1, keepdims=True) * x.values - sym @ x.values),)

    return _record("pairwise_sq_distances", out, (x,), rule)


def kl_categorical(p: TensorLike, q: TensorLike) -> Tensor:
    """
    Rowwise KL(p || q) = sum_i p_i ln(p_i / q_i) with 0 ln 0 = 0.

    Both inputs hold one distribution per row; the result has one row per
    distribution (1x1 for a single pair).
    """
    p, q = as_tensor(p), as_tensor(q)
    if p.shape != q.shape:
        raise ShapeError("kl_categorical", p.shape, q.shape)
    for label, dist in (("p", p), ("q", q)):
        if (dist.values < 0).any():
            raise ContractError(f"kl_categorical: {label} has negative entries")
        drift = np.abs(dist.values.sum(axis=1) - 1.0).max()
        if drift > NORMALIZATION_TOLERANCE:
            raise ContractError(f"kl_categorical: {label} rows sum to 1 only within {drift:.3g}")
    support = p.values > 0.0
    if (support & (q.values <= 0.0)).any():
        raise ContractError("kl_categorical: q must be positive wherever p is")
    safe_p = np.where(support, p.values, 1.0)
    safe_q = np.where(support, q.values, 1.0)
    log_ratio = np.log(safe_p) - np.log(safe_q)
    out = np.where(support, p.values * log_ratio, 0.0).sum(axis=1, keepdims=True)

    def rule(g):
        dp = np.where(support, log_ratio + 1.0, 0.0) * g
        dq = -np.where(support, safe_p / safe_q, 0.0) * g
        return dp, dq

    return _record("kl_categorical", out, (p, q), rule)


# ---------------------------------------------------------------------------
# gradients and optimization
# ---------------------------------------------------------------------------

def backward(tape: Tape, loss: Tensor) -> None:
    """
    Propagate d(loss)/d(leaf) into the grad field of every reachable leaf.

    Leaf gradients accumulate across calls; intermediate gradients are
    rebuilt from zero on each call. Frozen leaves receive nothing.
    """
    if loss.shape != (1, 1):
        raise ContractError(f"backward needs a 1x1 scalar loss, got shape {loss.shape}")
    if loss.node_id == CONSTANT:
        if loss.requires_grad:
            loss.grad += 1.0
        return
    if not tape._owns(loss):
        raise ContractError("loss was not produced on this tape")

    nodes = tape.nodes[: loss.node_id + 1]
    for node in nodes:
        node.output.grad = np.zeros_like(node.output.values)
    loss.grad[0, 0] = 1.0

    for node in reversed(nodes):
        upstream = node.output.grad
        if not upstream.any():
            continue
        for tensor, contribution in zip(node.inputs, node.backward(upstream)):
            if contribution is not None and tensor.requires_grad:
                tensor.grad += contribution


def zero_grad(params: Iterable[Parameter]) -> None:
    for param in params:
        param.zero_grad()


@contextmanager
def frozen(params: Iterable[Parameter]) -> Iterator[None]:
    """Stop gradient flow into the given parameters for the enclosed block."""
    saved = [(p, p.tensor.requires_grad) for p in params]
    for param, _ in saved:
        param.tensor.requires_grad = False
    try:
        yield
    finally:
        for param, state in saved:
            param.tensor.requires_grad = state


def adam_step(
    params: Sequence[Parameter],
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> None:
    """Apply one bias-corrected Adam update and zero the gradients."""
    if lr <= 0:
        raise ConfigurationError(f"learning rate must be positive, got {lr}")
    if not (0.0 <= beta1 < 1.0 and 0.0 <= beta2 < 1.0):
        raise ConfigurationError(f"Adam betas must lie in [0, 1), got {beta1}, {beta2}")
    if eps <= 0:
        raise ConfigurationError(f"Adam epsilon must be positive, got {eps}")

    for param in params:
        param.step_count += 1
        g = param.tensor.grad
        param.adam_m *= beta1
        param.adam_m += (1.0 - beta1) * g
        param.adam_v *= beta2
        param.adam_v += (1.0 - beta2) * (g * g)
        m_hat = param.adam_m / (1.0 - beta1 ** param.step_count)
        v_hat = param.adam_v / (1.0 - beta2 ** param.step_count)
        param.tensor.values -= lr * m_hat / (np.sqrt(v_hat) + eps)
        param.tensor.grad.fill(0.0)


@dataclass
class ParameterCheck:
    name: str
    frozen: bool
    max_rel_error: float
    max_abs_grad: float
    passed: bool


@dataclass
class GradCheckReport:
    tolerance: float
    checks: list = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return all(check.passed for check in self.checks)

    @property
    def failures(self) -> list:
        return [check for check in self.checks if not check.passed]

    @property
    def max_rel_error(self) -> float:
        errors = [c.max_rel_error for c in self.checks if not c.frozen]
        return max(errors) if errors else 0.0

    def by_name(self) -> dict:
        return {check.name: check for check in self.checks}


def grad_check(
    fragment: Callable[[], Tensor],
    inputs: Sequence[Union[Parameter, Tensor]],
    tolerance: float = 1e-3,
    epsilon: float = 1e-4,
) -> GradCheckReport:
    """
    Compare backprop gradients with central finite differences.

    Args:
        fragment: deterministic zero-argument callable returning a 1x1 loss
        inputs: leaves to check; frozen leaves must come back with exactly
            zero gradient instead of being differenced
        tolerance: maximum allowed relative error per entry
        epsilon: finite-difference step

    Returns:
        GradCheckReport with one entry per input
    """
    leaves = []
    for i, item in enumerate(inputs):
        tensor = as_tensor(item)
        name = getattr(item, "name", "") or tensor.name or f"input{i}"
        leaves.append((name, tensor))
        tensor.grad.fill(0.0)

    with Tape() as tape:
        loss = fragment()
    backward(tape, loss)
    analytic = [tensor.grad.copy() for _, tensor in leaves]

    report = GradCheckReport(tolerance=tolerance)
    for (name, tensor), grad in zip(leaves, analytic):
        max_abs = float(np.abs(grad).max())
        if not tensor.requires_grad:
            report.checks.append(ParameterCheck(name, True, 0.0, max_abs, max_abs == 0.0))
            continue
        numeric = np.zeros_like(tensor.values)
        for idx in np.ndindex(tensor.shape):
            original = tensor.values[idx]
            tensor.values[idx] = original + epsilon
            plus = fragment().item()
            tensor.values[idx] = original - epsilon
            minus = fragment().item()
            tensor.values[idx] = original
            numeric[idx] = (plus - minus) / (2.0 * epsilon)
        denom = np.maximum(np.maximum(np.abs(grad), np.abs(numeric)), REL_ERROR_FLOOR)
        rel = float((np.abs(grad - numeric) / denom).max())
        report.checks.append(ParameterCheck(name, False, rel, max_abs, rel < tolerance))

    for _, tensor in leaves:
        tensor.grad.fill(0.0)
    if not report.passed:
        logger.warning("gradient check failed for %s", [c.name for c in report.failures])
    return report
