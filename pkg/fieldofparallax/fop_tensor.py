"""
Dense float64 tensors with reverse-mode gradients and a finite difference gradient oracle.

Every operation records a backward rule that maps the gradient of its output to the gradients of its inputs. Only leaf
tensors with requires_grad accumulate into .grad, intermediate gradients live for a single backward pass.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from functools import reduce
from typing import Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy import special

from fieldofparallax import FopError

logger = logging.getLogger("fop.fieldofparallax")

MAX_RANK = 4

BackwardRule = Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


class TensorError(FopError):
    """Base class for tensor errors."""


class ShapeMismatchError(TensorError):
    """Operand shapes do not agree."""


class EmptyAxisError(TensorError):
    """Reduction over an empty axis."""


class RankError(TensorError):
    """Tensor rank above the supported maximum."""


class NonFiniteError(TensorError):
    """Operation produced NaN or Inf."""


class NonFiniteLossError(NonFiniteError):
    """Loss evaluated during a gradient check is not finite."""


class Tensor:
    """Dense float64 array with optional gradient buffer."""

    def __init__(self, data: Union[np.ndarray, float, Sequence], requires_grad: bool = False, name: str = "") -> None:
        """Copy data into a new leaf tensor.

        :param data: values, any array-like.
        :param requires_grad: accumulate gradients into .grad on backward.
        :param name: name used in gradient check reports.
        """
        self.data = np.array(data, dtype=np.float64)
        if self.data.ndim > MAX_RANK:
            raise RankError(f"rank {self.data.ndim} above {MAX_RANK}, shape {self.data.shape}")
        if not np.all(np.isfinite(self.data)):
            raise NonFiniteError(f"non finite values in tensor {name or 'of shape ' + str(self.data.shape)}")
        self.requires_grad = requires_grad
        self.name = name
        self.grad: Optional[np.ndarray] = None
        self._parents: Tuple[Tensor, ...] = ()
        self._rule: Optional[BackwardRule] = None
        self._op = ""

    def __repr__(self) -> str:
        label = f" {self.name}" if self.name else ""
        op = f", op={self._op}" if self._op else ""
        return f"Tensor{label}(shape={self.shape}, requires_grad={self.requires_grad}{op})"

    def __add__(self, other: Tensor) -> Tensor:
        return add(self, other)

    def __sub__(self, other: Tensor) -> Tensor:
        return sub(self, other)

    def __matmul__(self, other: Tensor) -> Tensor:
        return matmul(self, other)

    def __mul__(self, factor: float) -> Tensor:
        return scale(self, factor)

    __rmul__ = __mul__

    def backward(self, grad: Optional[np.ndarray] = None) -> None:
        """Back-propagate from this tensor into all leaves that require gradients.

        :param grad: gradient of the final objective w.r.t. this tensor, ones if None.
        """
        Graph(self).backward(grad)

    def zero_grad(self) -> None:
        """Drop accumulated gradient."""
        self.grad = None

    def detach(self) -> Tensor:
        """Return a copy outside of any graph."""
        return Tensor(self.data, name=self.name)

    def item(self) -> float:
        """Return the value of a single element tensor."""
        if self.data.size != 1:
            raise ShapeMismatchError(f"item of tensor with shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    @property
    def shape(self) -> Tuple[int, ...]:
        """Tensor shape."""
        return self.data.shape

    @property
    def ndim(self) -> int:
        """Tensor rank."""
        return self.data.ndim

    @property
    def size(self) -> int:
        """Number of elements."""
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        """True if the tensor was not produced by a recorded operation."""
        return self._rule is None


class Graph:
    """Recorded operations reachable from an output, in topological order."""

    def __init__(self, output: Tensor) -> None:
        """Collect the nodes of the graph that ends at output."""
        self.output = output
        self.nodes: List[Tensor] = []
        visited = set()
        stack: List[Tuple[Tensor, bool]] = [(output, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                self.nodes.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            stack.extend((parent, False) for parent in node._parents if id(parent) not in visited)

    def __len__(self) -> int:
        return len(self.nodes)

    def backward(self, grad: Optional[np.ndarray] = None) -> None:
        """Visit nodes in reverse topological order and accumulate leaf gradients.

        :param grad: seed gradient, ones if None.
        """
        seed = np.ones_like(self.output.data) if grad is None else np.asarray(grad, dtype=np.float64)
        if seed.shape != self.output.shape:
            raise ShapeMismatchError(f"seed gradient {seed.shape} for output {self.output.shape}")
        pending: Dict[int, np.ndarray] = {id(self.output): seed}
        for node in reversed(self.nodes):
            node_grad = pending.pop(id(node), None)
            if node_grad is None:
                continue
            if node.is_leaf:
                if node.requires_grad:
                    node.grad = node_grad.copy() if node.grad is None else node.grad + node_grad
                continue
            for parent, parent_grad in zip(node._parents, node._rule(node_grad)):  # pylint: disable=not-callable
                if parent_grad is None or not parent.requires_grad:
                    continue
                key = id(parent)
                pending[key] = pending[key] + parent_grad if key in pending else parent_grad


def _record(data: np.ndarray, parents: Sequence[Tensor], rule: BackwardRule, op: str) -> Tensor:
    out = Tensor(data)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)  # pylint: disable=protected-access
        out._rule = rule  # pylint: disable=protected-access
        out._op = op  # pylint: disable=protected-access
    return out


def _check_same_shape(op: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise ShapeMismatchError(f"{op}: {a.shape} vs {b.shape}")


def _check_axis(x: Tensor, axis: int) -> int:
    if not -x.ndim <= axis < x.ndim:
        raise ShapeMismatchError(f"axis {axis} out of range for shape {x.shape}")
    axis %= x.ndim
    if x.shape[axis] == 0:
        raise EmptyAxisError(f"reduction over empty axis {axis} of shape {x.shape}")
    return axis


#
# Elementwise operations.
#


def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise a + b for equal shapes."""
    _check_same_shape("add", a, b)
    return _record(a.data + b.data, (a, b), lambda g: (g, g), "add")


def sub(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise a - b for equal shapes."""
    _check_same_shape("sub", a, b)
    return _record(a.data - b.data, (a, b), lambda g: (g, -g), "sub")


def scale(x: Tensor, factor: float) -> Tensor:
    """Multiply by a constant scalar."""
    factor = float(factor)
    return _record(x.data * factor, (x,), lambda g: (g * factor,), "scale")


def gelu(x: Tensor) -> Tensor:
    """Exact GELU x * Phi(x) with Phi the standard normal CDF."""
    cdf = special.ndtr(x.data)

    def rule(g: np.ndarray) -> Tuple[np.ndarray]:
        pdf = np.exp(-0.5 * x.data**2) / math.sqrt(2.0 * math.pi)
        return (g * (cdf + x.data * pdf),)

    return _record(x.data * cdf, (x,), rule, "gelu")


def sum_tensors(tensors: Sequence[Tensor]) -> Tensor:
    """Point-wise sum of equally shaped tensors."""
    if not tensors:
        raise EmptyAxisError("sum of no tensors")
    return reduce(add, tensors)


#
# Linear algebra.
#


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Contract the last axis of a (... x m x k) with a matrix b (k x n)."""
    if b.ndim != 2 or a.ndim < 1 or a.shape[-1] != b.shape[0]:
        raise ShapeMismatchError(f"matmul: {a.shape} @ {b.shape}")

    def rule(g: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        grad_a = np.matmul(g, b.data.T)
        grad_b = a.data.reshape(-1, b.shape[0]).T @ g.reshape(-1, b.shape[1])
        return grad_a, grad_b

    return _record(np.matmul(a.data, b.data), (a, b), rule, "matmul")


def transpose(w: Tensor) -> Tensor:
    """Transpose a matrix."""
    if w.ndim != 2:
        raise ShapeMismatchError(f"transpose needs a matrix, got {w.shape}")
    return _record(w.data.T.copy(), (w,), lambda g: (g.T,), "transpose")


def add_bias(x: Tensor, bias: Tensor) -> Tensor:
    """Add a vector along the last axis."""
    if bias.ndim != 1 or x.ndim < 1 or x.shape[-1] != bias.shape[0]:
        raise ShapeMismatchError(f"add_bias: {x.shape} + {bias.shape}")
    return _record(x.data + bias.data, (x, bias), lambda g: (g, g.reshape(-1, bias.shape[0]).sum(axis=0)), "add_bias")


def linear(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """Affine map x . weight^T + bias with weight stored as (out x in)."""
    return add_bias(matmul(x, transpose(weight)), bias)


#
# Token reductions and reshaping.
#


def reduce_max(x: Tensor, axis: int = 1) -> Tensor:
    """Maximum over an axis, gradient routed to the first maximal position."""
    axis = _check_axis(x, axis)
    index = np.expand_dims(np.argmax(x.data, axis=axis), axis)

    def rule(g: np.ndarray) -> Tuple[np.ndarray]:
        grad = np.zeros_like(x.data)
        np.put_along_axis(grad, index, np.expand_dims(g, axis), axis)
        return (grad,)

    return _record(np.take_along_axis(x.data, index, axis).squeeze(axis), (x,), rule, "reduce_max")


def reduce_mean(x: Tensor, axis: int = 1) -> Tensor:
    """Arithmetic mean over an axis."""
    axis = _check_axis(x, axis)
    count = x.shape[axis]

    def rule(g: np.ndarray) -> Tuple[np.ndarray]:
        return (np.broadcast_to(np.expand_dims(g, axis) / count, x.shape).copy(),)

    # sorted so the summation order, and hence the result, does not depend on token order
    return _record(np.mean(np.sort(x.data, axis=axis), axis=axis), (x,), rule, "reduce_mean")


def concat_last(a: Tensor, b: Tensor) -> Tensor:
    """Concatenate along the last axis."""
    if a.ndim != b.ndim or a.shape[:-1] != b.shape[:-1]:
        raise ShapeMismatchError(f"concat_last: {a.shape} and {b.shape}")
    split = a.shape[-1]
    return _record(
        np.concatenate([a.data, b.data], axis=-1), (a, b), lambda g: (g[..., :split], g[..., split:]), "concat_last"
    )


def broadcast_rows(q: Tensor, count: int) -> Tensor:
    """Repeat a B x D tensor over a new token axis, giving B x count x D."""
    if q.ndim != 2:
        raise ShapeMismatchError(f"broadcast_rows needs B x D, got {q.shape}")
    if count < 1:
        raise EmptyAxisError(f"broadcast_rows needs at least one row, got {count}")
    data = np.repeat(q.data[:, np.newaxis, :], count, axis=1)
    return _record(data, (q,), lambda g: (g.sum(axis=1),), "broadcast_rows")


def gather_tokens(x: Tensor, index: np.ndarray) -> Tensor:
    """Gather tokens of a B x N x C tensor into B x M x (J * C) with an M x J index.

    Patch merging gathers the four tokens of every 2x2 cell (J = 4), nearest upsampling gathers one parent token per
    output token (J = 1).
    """
    index = np.asarray(index, dtype=np.int64)
    if x.ndim != 3 or index.ndim != 2:
        raise ShapeMismatchError(f"gather_tokens: tokens {x.shape}, index {index.shape}")
    if index.size and (index.min() < 0 or index.max() >= x.shape[1]):
        raise ShapeMismatchError(f"gather_tokens: index outside [0, {x.shape[1]})")
    batch, channels = x.shape[0], x.shape[2]
    rows, width = index.shape

    def rule(g: np.ndarray) -> Tuple[np.ndarray]:
        grad = np.zeros_like(x.data)
        np.add.at(grad, (slice(None), index), g.reshape(batch, rows, width, channels))
        return (grad,)

    data = x.data[:, index, :].reshape(batch, rows, width * channels)
    return _record(data, (x,), rule, "gather_tokens")


#
# Losses.
#


def sum_all(x: Tensor) -> Tensor:
    """Exactly rounded sum of all elements as a scalar tensor."""
    return _record(math.fsum(x.data.reshape(-1)), (x,), lambda g: (np.full(x.shape, g, dtype=np.float64),), "sum_all")


def cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean softmax cross entropy of B x N x K logits against B x N integer labels."""
    labels = np.asarray(labels, dtype=np.int64)
    if logits.ndim != 3 or labels.shape != logits.shape[:2]:
        raise ShapeMismatchError(f"cross_entropy: logits {logits.shape}, labels {labels.shape}")
    if labels.min() < 0 or labels.max() >= logits.shape[2]:
        raise ShapeMismatchError(f"cross_entropy: labels outside [0, {logits.shape[2]})")
    log_probs = special.log_softmax(logits.data, axis=-1)
    picked = np.take_along_axis(log_probs, labels[..., np.newaxis], axis=-1)

    def rule(g: np.ndarray) -> Tuple[np.ndarray]:
        one_hot = np.zeros_like(log_probs)
        np.put_along_axis(one_hot, labels[..., np.newaxis], 1.0, axis=-1)
        return ((np.exp(log_probs) - one_hot) * (g / labels.size),)

    return _record(-np.mean(picked), (logits,), rule, "cross_entropy")


def bce_with_logits(logits: Tensor, targets: np.ndarray) -> Tensor:
    """Mean binary cross entropy of B x N x 1 logits against B x N targets in [0, 1]."""
    targets = np.asarray(targets, dtype=np.float64)
    if logits.ndim != 3 or logits.shape[2] != 1 or targets.shape != logits.shape[:2]:
        raise ShapeMismatchError(f"bce_with_logits: logits {logits.shape}, targets {targets.shape}")
    z = logits.data[..., 0]

    def rule(g: np.ndarray) -> Tuple[np.ndarray]:
        return (((special.expit(z) - targets) * (g / targets.size))[..., np.newaxis],)

    return _record(np.mean(np.logaddexp(0.0, z) - targets * z), (logits,), rule, "bce_with_logits")


#
# Gradient oracle.
#


@dataclass
class ParamCheck:
    """Finite difference verdict for one parameter tensor."""

    name: str
    max_rel_err: float
    passed: bool

    def __str__(self) -> str:
        return f"{self.name} {self.max_rel_err:.3e} {'pass' if self.passed else 'fail'}"


@dataclass
class GradCheckReport:
    """Finite difference verdicts for all checked parameters."""

    tol: float
    h: float
    checks: List[ParamCheck] = field(default_factory=list)

    def __str__(self) -> str:
        return "\n".join(str(check) for check in self.checks)

    @property
    def passed(self) -> bool:
        """True if every parameter passed."""
        return all(check.passed for check in self.checks)

    @property
    def max_rel_err(self) -> float:
        """Largest relative error over all parameters."""
        return max((check.max_rel_err for check in self.checks), default=0.0)


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> np.ndarray:
    """Return |a - n| / max(|a|, |n|, 1e-8), elementwise."""
    return np.abs(analytic - numeric) / np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-8)


def grad_check(
    loss_fn: Callable[[], Tensor], params: Sequence[Tensor], h: float = 1e-5, tol: float = 1e-5
) -> GradCheckReport:
    """Compare back-propagated gradients with central differences.

    :param loss_fn: builds a fresh graph from params and returns a scalar loss.
    :param params: leaf tensors to check, they must require gradients.
    :param h: finite difference step.
    :param tol: largest accepted relative error.
    """
    for param in params:
        param.zero_grad()
    _evaluate(loss_fn).backward()
    report = GradCheckReport(tol=tol, h=h)
    for position, param in enumerate(params):
        analytic = np.zeros_like(param.data) if param.grad is None else param.grad.copy()
        numeric = np.zeros_like(param.data)
        flat = param.data.reshape(-1)
        for i in range(flat.size):
            original = flat[i]
            flat[i] = original + h
            plus = _evaluate(loss_fn).item()
            flat[i] = original - h
            minus = _evaluate(loss_fn).item()
            flat[i] = original
            numeric.reshape(-1)[i] = (plus - minus) / (2.0 * h)
        error = float(relative_error(analytic, numeric).max(initial=0.0))
        report.checks.append(ParamCheck(param.name or f"param{position}", error, error < tol))
        logger.debug(f"grad check {report.checks[-1]}")
    return report


def _evaluate(loss_fn: Callable[[], Tensor]) -> Tensor:
    try:
        loss = loss_fn()
    except NonFiniteError as error:
        raise NonFiniteLossError(f"loss is not finite: {error}") from error
    if loss.size != 1:
        raise ShapeMismatchError(f"loss must be a scalar, got shape {loss.shape}")
    return loss
