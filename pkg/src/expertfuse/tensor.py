"""Dense tensors with reverse-mode automatic differentiation.

Values are numpy float64 arrays (64-bit keeps finite-difference checks
meaningful). Each differentiable op records a backward closure on its
output; ``Tensor.backward()`` runs a deterministic topological sweep.
Tensors created with ``requires_grad=False`` never join a graph and never
accumulate gradient.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Optional, Sequence

import numpy as np

from .errors import ContractError, NumericError, ShapeError

_GRAD_ENABLED = True


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block (inference fast path)."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum `grad` down to `shape`, inverting numpy broadcasting."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "_op")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self._parents: tuple = ()
        self._backward: Optional[Callable[[], None]] = None
        self._op = ""

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() needs a scalar, got shape {self.shape}")
        return float(self.data.reshape(()))

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = None

    def _accumulate(self, grad: np.ndarray):
        if not self.requires_grad:
            return
        grad = _unbroadcast(np.asarray(grad, dtype=np.float64), self.data.shape)
        if self.grad is None:
            self.grad = np.array(grad, dtype=np.float64)
        else:
            self.grad += grad

    def backward(self):
        """Reverse sweep from a scalar output. Visits each node once."""
        if self.data.size != 1:
            raise ContractError(
                f"backward() requires a scalar output, got shape {self.shape}"
            )
        order = []
        seen = set()
        stack = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if id(parent) not in seen:
                    stack.append((parent, False))
        self._accumulate(np.ones_like(self.data))
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward()

    # -- operator sugar -------------------------------------------------

    def __add__(self, other):
        return add(self, _as_tensor(other))

    def __radd__(self, other):
        return add(_as_tensor(other), self)

    def __sub__(self, other):
        return sub(self, _as_tensor(other))

    def __rsub__(self, other):
        return sub(_as_tensor(other), self)

    def __mul__(self, other):
        return mul(self, _as_tensor(other))

    def __rmul__(self, other):
        return mul(_as_tensor(other), self)

    def __truediv__(self, scalar):
        if isinstance(scalar, Tensor):
            raise ContractError("tensor/tensor division is not supported")
        return mul(self, _as_tensor(1.0 / float(scalar)))

    def __neg__(self):
        return mul(self, _as_tensor(-1.0))

    def __matmul__(self, other):
        return matmul(self, other)

    def __pow__(self, exponent):
        return power(self, exponent)

    def __getitem__(self, index):
        return take_slice(self, index)

    def reshape(self, *shape):
        return reshape(self, shape if len(shape) > 1 else shape[0])

    def transpose(self, axes=None):
        return transpose(self, axes)

    def sum(self, axis=None, keepdims=False):
        return reduce_sum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return reduce_mean(self, axis, keepdims)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"


def _as_tensor(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def _result(data: np.ndarray, parents: Sequence[Tensor], op: str) -> Tensor:
    out = Tensor(data)
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._op = op
    return out


# -- elementwise and structural ops -------------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    out = _result(a.data + b.data, (a, b), "add")
    if out.requires_grad:
        def backward():
            a._accumulate(out.grad)
            b._accumulate(out.grad)
        out._backward = backward
    return out


def sub(a: Tensor, b: Tensor) -> Tensor:
    out = _result(a.data - b.data, (a, b), "sub")
    if out.requires_grad:
        def backward():
            a._accumulate(out.grad)
            b._accumulate(-out.grad)
        out._backward = backward
    return out


def mul(a: Tensor, b: Tensor) -> Tensor:
    out = _result(a.data * b.data, (a, b), "mul")
    if out.requires_grad:
        def backward():
            a._accumulate(out.grad * b.data)
            b._accumulate(out.grad * a.data)
        out._backward = backward
    return out


def power(a: Tensor, exponent: float) -> Tensor:
    exponent = float(exponent)
    out = _result(a.data ** exponent, (a,), "pow")
    if out.requires_grad:
        def backward():
            a._accumulate(out.grad * exponent * a.data ** (exponent - 1.0))
        out._backward = backward
    return out


def exp(a: Tensor) -> Tensor:
    out = _result(np.exp(a.data), (a,), "exp")
    if out.requires_grad:
        def backward():
            a._accumulate(out.grad * out.data)
        out._backward = backward
    return out


def log(a: Tensor) -> Tensor:
    out = _result(np.log(a.data), (a,), "log")
    if out.requires_grad:
        def backward():
            a._accumulate(out.grad / a.data)
        out._backward = backward
    return out


def reshape(a: Tensor, shape) -> Tensor:
    out = _result(a.data.reshape(shape), (a,), "reshape")
    if out.requires_grad:
        def backward():
            a._accumulate(out.grad.reshape(a.data.shape))
        out._backward = backward
    return out


def transpose(a: Tensor, axes=None) -> Tensor:
    if axes is None:
        if a.ndim < 2:
            raise ShapeError(f"transpose needs ndim >= 2, got shape {a.shape}")
        axes = tuple(range(a.ndim - 2)) + (a.ndim - 1, a.ndim - 2)
    axes = tuple(axes)
    out = _result(np.transpose(a.data, axes), (a,), "transpose")
    if out.requires_grad:
        inverse = tuple(np.argsort(axes))
        def backward():
            a._accumulate(np.transpose(out.grad, inverse))
        out._backward = backward
    return out


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = list(tensors)
    if not tensors:
        raise ContractError("concat of an empty list")
    out = _result(np.concatenate([t.data for t in tensors], axis=axis),
                  tensors, "concat")
    if out.requires_grad:
        sizes = [t.data.shape[axis] for t in tensors]
        offsets = np.cumsum([0] + sizes)
        def backward():
            for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
                index = [slice(None)] * out.grad.ndim
                index[axis] = slice(lo, hi)
                t._accumulate(out.grad[tuple(index)])
        out._backward = backward
    return out


def take_slice(a: Tensor, index) -> Tensor:
    out = _result(a.data[index], (a,), "slice")
    if out.requires_grad:
        def backward():
            full = np.zeros_like(a.data)
            np.add.at(full, index, out.grad)
            a._accumulate(full)
        out._backward = backward
    return out


def reduce_sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = _result(a.data.sum(axis=axis, keepdims=keepdims), (a,), "sum")
    if out.requires_grad:
        def backward():
            grad = out.grad
            if not keepdims and axis is not None:
                grad = np.expand_dims(grad, axis)
            a._accumulate(np.broadcast_to(grad, a.data.shape))
        out._backward = backward
    return out


def reduce_mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    count = a.data.size if axis is None else a.data.shape[axis]
    return mul(reduce_sum(a, axis, keepdims), _as_tensor(1.0 / count))


# -- neural-net primitives ----------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product; leading dims broadcast, inner extents must match."""
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs ndim >= 2, got {a.shape} and {b.shape}")
    if a.data.shape[-1] != b.data.shape[-2]:
        raise ShapeError(f"matmul inner extents differ: {a.shape} x {b.shape}")
    out = _result(np.matmul(a.data, b.data), (a, b), "matmul")
    if out.requires_grad:
        def backward():
            ga = np.matmul(out.grad, np.swapaxes(b.data, -1, -2))
            gb = np.matmul(np.swapaxes(a.data, -1, -2), out.grad)
            a._accumulate(ga)
            b._accumulate(gb)
        out._backward = backward
    return out


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    """Stable softmax along ``axis`` (max subtraction before exp)."""
    if not np.all(np.isfinite(a.data)):
        raise NumericError("softmax input contains non-finite values")
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    exps = np.exp(shifted)
    y = exps / exps.sum(axis=axis, keepdims=True)
    out = _result(y, (a,), "softmax")
    if out.requires_grad:
        def backward():
            g = out.grad
            inner = (g * y).sum(axis=axis, keepdims=True)
            a._accumulate((g - inner) * y)
        out._backward = backward
    return out


def squared_relu(a: Tensor) -> Tensor:
    """Elementwise max(x, 0)^2; derivative 2*max(x, 0), zero at x = 0."""
    pos = np.maximum(a.data, 0.0)
    out = _result(pos * pos, (a,), "squared_relu")
    if out.requires_grad:
        def backward():
            a._accumulate(out.grad * 2.0 * pos)
        out._backward = backward
    return out


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then affine.

    Variance uses the population (1/d) denominator. ``eps`` must be
    positive; it also guards the degenerate d == 1 slice.
    """
    if eps <= 0.0:
        raise ValueError(f"layer_norm eps must be positive, got {eps}")
    d = x.data.shape[-1]
    mean = x.data.mean(axis=-1, keepdims=True)
    centered = x.data - mean
    var = (centered * centered).mean(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv_std
    out = _result(xhat * gain.data + bias.data, (x, gain, bias), "layer_norm")
    if out.requires_grad:
        def backward():
            g = out.grad
            gain._accumulate((g * xhat).reshape(-1, d).sum(axis=0))
            bias._accumulate(g.reshape(-1, d).sum(axis=0))
            gx = g * gain.data
            m1 = gx.mean(axis=-1, keepdims=True)
            m2 = (gx * xhat).mean(axis=-1, keepdims=True)
            x._accumulate((gx - m1 - xhat * m2) * inv_std)
        out._backward = backward
    return out


def conv2d(x: Tensor, kernel: Tensor, stride: int = 1, padding: int = 1) -> Tensor:
    """3x3 cross-correlation over an (H, W, Cin) grid.

    Output spatial extents are ceil(H/stride) x ceil(W/stride). Only
    stride 1 or 2 with padding 1 is supported (the stem building block).
    """
    if x.ndim != 3:
        raise ShapeError(f"conv2d input must be (H, W, Cin), got {x.shape}")
    if kernel.ndim != 4 or kernel.data.shape[:2] != (3, 3):
        raise ShapeError(f"conv2d kernel must be (3, 3, Cin, Cout), got {kernel.shape}")
    if stride not in (1, 2):
        raise ValueError(f"conv2d stride must be 1 or 2, got {stride}")
    if padding != 1:
        raise ValueError(f"conv2d padding must be 1, got {padding}")
    height, width, cin = x.data.shape
    if kernel.data.shape[2] != cin:
        raise ShapeError(
            f"conv2d channel mismatch: input {x.shape} vs kernel {kernel.shape}")
    cout = kernel.data.shape[3]
    h_out = -(-height // stride)
    w_out = -(-width // stride)
    padded = np.pad(x.data, ((1, 1), (1, 1), (0, 0)))
    out_data = np.zeros((h_out, w_out, cout))
    patches = {}
    for a in range(3):
        for b in range(3):
            patch = padded[a: a + (h_out - 1) * stride + 1: stride,
                           b: b + (w_out - 1) * stride + 1: stride, :]
            patches[(a, b)] = patch
            out_data += np.tensordot(patch, kernel.data[a, b], axes=([2], [0]))
    out = _result(out_data, (x, kernel), "conv2d")
    if out.requires_grad:
        def backward():
            g = out.grad
            gk = np.zeros_like(kernel.data)
            gp = np.zeros_like(padded)
            for a in range(3):
                for b in range(3):
                    gk[a, b] = np.tensordot(patches[(a, b)], g, axes=([0, 1], [0, 1]))
                    gp[a: a + (h_out - 1) * stride + 1: stride,
                       b: b + (w_out - 1) * stride + 1: stride, :] += \
                        np.tensordot(g, kernel.data[a, b], axes=([2], [1]))
            kernel._accumulate(gk)
            x._accumulate(gp[1: height + 1, 1: width + 1, :])
        out._backward = backward
    return out


def embedding(table: Tensor, ids: np.ndarray) -> Tensor:
    """Row lookup ``table[ids]`` with scatter-add backward into the table."""
    ids = np.asarray(ids, dtype=np.int64)
    if ids.ndim != 1:
        raise ShapeError(f"embedding ids must be 1-D, got shape {ids.shape}")
    if ids.size and (ids.min() < 0 or ids.max() >= table.data.shape[0]):
        raise ValueError(
            f"embedding id out of range [0, {table.data.shape[0]}): "
            f"min {ids.min()}, max {ids.max()}")
    out = _result(table.data[ids], (table,), "embedding")
    if out.requires_grad:
        def backward():
            full = np.zeros_like(table.data)
            np.add.at(full, ids, out.grad)
            table._accumulate(full)
        out._backward = backward
    return out


def cross_entropy(logits: Tensor, targets: np.ndarray,
                  mask: Optional[np.ndarray] = None) -> Tensor:
    """Mean of -log softmax(logits)[target] over unmasked positions.

    ``logits`` is (T, V); ``targets`` holds T token ids; ``mask`` marks the
    positions that contribute (all positions when omitted).
    """
    if logits.ndim != 2:
        raise ShapeError(f"cross_entropy logits must be (T, V), got {logits.shape}")
    positions, vocab = logits.data.shape
    targets = np.asarray(targets, dtype=np.int64)
    if targets.shape != (positions,):
        raise ShapeError(
            f"cross_entropy targets shape {targets.shape} != ({positions},)")
    mask = np.ones(positions, dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
    if mask.shape != (positions,):
        raise ShapeError(f"cross_entropy mask shape {mask.shape} != ({positions},)")
    active = int(mask.sum())
    if active == 0:
        raise ContractError("cross_entropy: every position is masked (empty loss)")
    used = targets[mask]
    if used.size and (used.min() < 0 or used.max() >= vocab):
        raise ValueError(f"cross_entropy target outside [0, {vocab})")
    shifted = logits.data - logits.data.max(axis=1, keepdims=True)
    log_z = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    log_probs = shifted - log_z
    picked = log_probs[np.arange(positions), targets]
    loss = -picked[mask].sum() / active
    out = _result(np.float64(loss), (logits,), "cross_entropy")
    if out.requires_grad:
        def backward():
            probs = np.exp(log_probs)
            probs[np.arange(positions), targets] -= 1.0
            probs *= (mask[:, None] / active) * out.grad
            logits._accumulate(probs)
        out._backward = backward
    return out


# -- finite-difference verification --------------------------------------


def grad_check(builder: Callable[[dict], Tensor], params: dict,
               samples_per_tensor: int = 20, step: float = 1e-5,
               seed: int = 0) -> float:
    """Compare analytic gradients against central finite differences.

    ``builder`` maps a name -> Tensor dict to a scalar loss. Returns the
    max over sampled coordinates of |analytic - numeric| normalized by
    max(|analytic|, |numeric|, 1e-8).
    """
    arrays = {name: np.asarray(value, dtype=np.float64)
              for name, value in params.items()}

    def evaluate(tracked: bool):
        tensors = {name: Tensor(arr.copy(), requires_grad=tracked)
                   for name, arr in arrays.items()}
        loss = builder(tensors)
        if not isinstance(loss, Tensor) or loss.data.size != 1:
            raise ContractError("grad_check builder must return a scalar Tensor")
        return loss, tensors

    loss, tensors = evaluate(tracked=True)
    loss.backward()
    analytic = {name: (np.zeros_like(arrays[name]) if tensors[name].grad is None
                       else tensors[name].grad.copy())
                for name in arrays}

    rng = np.random.default_rng(seed)
    worst = 0.0
    for name in sorted(arrays):
        flat = arrays[name].reshape(-1)
        count = min(samples_per_tensor, flat.size)
        coords = rng.choice(flat.size, size=count, replace=False)
        for coord in coords:
            original = flat[coord]
            flat[coord] = original + step
            up, _ = evaluate(tracked=False)
            flat[coord] = original - step
            down, _ = evaluate(tracked=False)
            flat[coord] = original
            numeric = (up.item() - down.item()) / (2.0 * step)
            exact = analytic[name].reshape(-1)[coord]
            denom = max(abs(exact), abs(numeric), 1e-8)
            worst = max(worst, abs(exact - numeric) / denom)
    return worst
