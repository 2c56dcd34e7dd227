"""Dense arrays with tape-based reverse-mode differentiation.

Every kernel the joint model needs lives here as a function that takes
:class:`Tensor` operands and returns a new :class:`Tensor` whose backward
closure knows how to route the upstream gradient to its parents.  The graph
is recorded dynamically during the forward pass and discarded after
:meth:`Tensor.backward`.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "ShapeError",
    "RunHealth",
    "HEALTH",
    "Tensor",
    "Parameter",
    "constant",
    "add",
    "sub",
    "mul",
    "scale",
    "matmul",
    "affine",
    "concat",
    "reshape",
    "transpose",
    "take",
    "getitem",
    "sum",
    "masked_mean",
    "softmax",
    "log_softmax",
    "cross_entropy",
    "embedding",
    "tanh",
    "sigmoid",
    "relu",
    "layer_norm",
    "dropout",
    "lstm_cell",
    "glorot_uniform",
    "grad_check",
    "ParameterStore",
]


class ShapeError(ValueError):
    """Operand shapes are incompatible for the requested kernel."""


@dataclass
class RunHealth:
    """Counts kernels whose forward output contained NaN or Inf."""

    nonfinite: int = 0
    last_op: str | None = None

    def reset(self) -> None:
        self.nonfinite = 0
        self.last_op = None


HEALTH = RunHealth()


def _check_finite(op: str, value: np.ndarray) -> None:
    if not np.isfinite(value).all():
        HEALTH.nonfinite += 1
        HEALTH.last_op = op


class Tensor:
    """A node on the tape: a numpy array plus how to differentiate it."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op")

    def __init__(
        self,
        data,
        parents: tuple["Tensor", ...] = (),
        backward: Callable[[np.ndarray], tuple] | None = None,
        op: str = "leaf",
        requires_grad: bool | None = None,
    ):
        self.data = np.asarray(data)
        self.grad: np.ndarray | None = None
        self._parents = parents
        self._backward = backward
        self.op = op
        if requires_grad is None:
            requires_grad = any(p.requires_grad for p in parents)
        self.requires_grad = requires_grad

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def __repr__(self) -> str:
        return f"Tensor(op={self.op}, shape={self.shape}, dtype={self.dtype})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def numpy(self) -> np.ndarray:
        return self.data

    def backward(self, grad: np.ndarray | None = None) -> None:
        """Accumulate d(self)/d(leaf) into every leaf that requires grad.

        Intermediate gradients are kept only for the duration of the call;
        the tape references are dropped afterwards so the graph can be freed.
        """
        if grad is None:
            if self.data.size != 1:
                raise ShapeError(f"backward() without grad needs a scalar, got shape {self.shape}")
            grad = np.ones_like(self.data)
        order = _topological(self)
        grads: dict[int, np.ndarray] = {id(self): np.asarray(grad, dtype=self.data.dtype)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                if node.requires_grad:
                    node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            parent_grads = node._backward(g)
            for parent, pg in zip(node._parents, parent_grads):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg
        for node in order:
            if node._backward is not None:
                node._parents = ()
                node._backward = None


def _topological(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
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
            if parent.requires_grad and id(parent) not in seen:
                stack.append((parent, False))
    return order


class Parameter(Tensor):
    """A named leaf whose gradient persists until :meth:`zero_grad`."""

    __slots__ = ("name",)

    def __init__(self, name: str, value):
        super().__init__(np.array(value), requires_grad=True)
        self.name = name
        self.grad = np.zeros_like(self.data)

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data)

    def __repr__(self) -> str:
        return f"Parameter({self.name!r}, shape={self.shape}, dtype={self.dtype})"


def constant(value, dtype=None) -> Tensor:
    return Tensor(np.asarray(value, dtype=dtype), requires_grad=False)


def _as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return constant(x, dtype=dtype)


def _make(op: str, value: np.ndarray, parents: tuple[Tensor, ...], backward) -> Tensor:
    _check_finite(op, value)
    if not any(p.requires_grad for p in parents):
        return Tensor(value, op=op, requires_grad=False)
    return Tensor(value, parents, backward, op)


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _broadcast_shape(op: str, a: Tensor, b: Tensor) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: cannot broadcast shapes {a.shape} and {b.shape}") from None


# ---------------------------------------------------------------------------
# elementwise arithmetic


def add(a, b) -> Tensor:
    a = _as_tensor(a, b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, a)
    _broadcast_shape("add", a, b)

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make("add", a.data + b.data, (a, b), backward)


def sub(a, b) -> Tensor:
    a = _as_tensor(a, b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, a)
    _broadcast_shape("sub", a, b)

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _make("sub", a.data - b.data, (a, b), backward)


def mul(a, b) -> Tensor:
    a = _as_tensor(a, b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, a)
    _broadcast_shape("mul", a, b)

    def backward(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _make("mul", a.data * b.data, (a, b), backward)


def scale(a: Tensor, c: float) -> Tensor:
    def backward(g):
        return (g * c,)

    return _make("scale", a.data * c, (a,), backward)


# ---------------------------------------------------------------------------
# linear algebra and shape manipulation


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim < 1 or b.data.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} @ {b.shape}")

    def backward(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape)
        if b.requires_grad:
            if a.data.ndim == 1:
                gb = np.outer(a.data, g)
            else:
                gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape)
        return ga, gb

    return _make("matmul", a.data @ b.data, (a, b), backward)


def affine(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """``x @ weight.T + bias`` with ``weight`` shaped (out, in)."""
    if weight.data.ndim != 2 or x.shape[-1] != weight.shape[1]:
        raise ShapeError(f"affine: input {x.shape} does not match weight {weight.shape}")
    if bias is not None and bias.shape != (weight.shape[0],):
        raise ShapeError(f"affine: bias {bias.shape} does not match weight {weight.shape}")
    out = x.data @ weight.data.T
    if bias is not None:
        out = out + bias.data

    def backward(g):
        gx = g @ weight.data if x.requires_grad else None
        g2 = g.reshape(-1, g.shape[-1])
        gw = g2.T @ x.data.reshape(-1, x.shape[-1]) if weight.requires_grad else None
        gb = g2.sum(axis=0) if bias is not None and bias.requires_grad else None
        return gx, gw, gb

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _make("affine", out, parents, backward)


def concat(parts: Sequence[Tensor], axis: int = -1) -> Tensor:
    parts = list(parts)
    ndim = parts[0].data.ndim
    ax = axis % ndim
    for p in parts[1:]:
        if p.data.ndim != ndim or any(
            p.shape[i] != parts[0].shape[i] for i in range(ndim) if i != ax
        ):
            raise ShapeError(f"concat: incompatible shapes {[q.shape for q in parts]} on axis {axis}")
    sizes = [p.shape[ax] for p in parts]
    bounds = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, bounds, axis=ax))

    return _make("concat", np.concatenate([p.data for p in parts], axis=ax), tuple(parts), backward)


def reshape(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    def backward(g):
        return (g.reshape(a.shape),)

    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot reshape {a.shape} into {shape}") from None
    return _make("reshape", out, (a,), backward)


def transpose(a: Tensor, axes: tuple[int, ...]) -> Tensor:
    inverse = tuple(np.argsort(axes))

    def backward(g):
        return (g.transpose(inverse),)

    return _make("transpose", a.data.transpose(axes), (a,), backward)


def take(a: Tensor, index, axis: int = 0) -> Tensor:
    """Gather slices along ``axis``; repeated indices accumulate gradient."""
    index = np.asarray(index, dtype=np.int64)

    def backward(g):
        out = np.zeros_like(a.data)
        moved = np.moveaxis(out, axis, 0)
        np.add.at(moved, index, np.moveaxis(g, axis, 0))
        return (out,)

    return _make("take", np.take(a.data, index, axis=axis), (a,), backward)


def getitem(a: Tensor, index) -> Tensor:
    def backward(g):
        out = np.zeros_like(a.data)
        np.add.at(out, index, g)
        return (out,)

    if _is_basic(index):

        def backward(g):  # noqa: F811
            out = np.zeros_like(a.data)
            out[index] = g
            return (out,)

    return _make("getitem", a.data[index], (a,), backward)


def _is_basic(index) -> bool:
    parts = index if isinstance(index, tuple) else (index,)
    return all(isinstance(i, (int, slice)) or i is None or i is Ellipsis for i in parts)


def sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _make("sum", a.data.sum(axis=axis, keepdims=keepdims), (a,), backward)


def masked_mean(x: Tensor, mask: np.ndarray) -> Tensor:
    """Mean of the rows of ``x`` (axis -2) selected by each row of ``mask``.

    ``mask`` is (groups, rows) boolean; the result is (groups, features).
    The mean is taken relative to each group's first member so that a group
    made of identical rows reproduces that row exactly.  Empty groups yield
    zeros.
    """
    mask = np.asarray(mask, dtype=bool)
    if x.data.ndim != 2 or mask.ndim != 2 or mask.shape[1] != x.shape[0]:
        raise ShapeError(f"masked_mean: mask {mask.shape} does not match rows of {x.shape}")
    counts = mask.sum(axis=1)
    anchor = np.where(counts > 0, mask.argmax(axis=1), 0)
    weights = mask / np.maximum(counts, 1)[:, None]
    weights = weights.astype(x.dtype)
    ref = x.data[anchor] * (counts > 0)[:, None].astype(x.dtype)
    gi, ri = np.nonzero(mask)
    deviation = np.zeros((mask.shape[0], x.shape[1]), dtype=x.dtype)
    np.add.at(deviation, gi, (x.data[ri] - ref[gi]) * weights[gi, ri][:, None])
    out = ref + deviation

    def backward(g):
        return (weights.T @ g,)

    return _make("masked_mean", out, (x,), backward)


# ---------------------------------------------------------------------------
# nonlinearities and normalisation


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return _make("softmax", y, (x,), backward)


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    y = shifted - lse

    def backward(g):
        return (g - np.exp(y) * g.sum(axis=axis, keepdims=True),)

    return _make("log_softmax", y, (x,), backward)


def cross_entropy(logits: Tensor, target, weight: np.ndarray | None = None) -> Tensor:
    """Mean negative log-likelihood of ``target`` class indices.

    ``logits`` is (rows, classes).  ``weight`` optionally masks rows (0/1);
    the mean is over rows with nonzero weight.  Zero rows give 0.
    """
    target = np.asarray(target, dtype=np.int64)
    if logits.data.ndim != 2 or target.shape != logits.shape[:1]:
        raise ShapeError(f"cross_entropy: logits {logits.shape} vs targets {target.shape}")
    n_cls = logits.shape[1]
    if target.size and (target.min() < 0 or target.max() >= n_cls):
        raise ShapeError(f"cross_entropy: target out of range for {n_cls} classes")
    if weight is None:
        weight = np.ones(target.shape, dtype=logits.dtype)
    weight = np.asarray(weight, dtype=logits.dtype)
    denom = weight.sum()
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1))
    rows = np.arange(target.size)
    nll = lse - z[rows, target]
    loss = (nll * weight).sum() / denom if denom > 0 else np.zeros((), dtype=logits.dtype)

    def backward(g):
        if denom == 0:
            return (np.zeros_like(logits.data),)
        p = np.exp(z - lse[:, None])
        p[rows, target] -= 1
        return (p * (weight / denom)[:, None] * g,)

    return _make("cross_entropy", np.asarray(loss, dtype=logits.dtype), (logits,), backward)


def embedding(table: Tensor, ids) -> Tensor:
    ids = np.asarray(ids, dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise ShapeError(f"embedding: index out of range for table {table.shape}")

    def backward(g):
        out = np.zeros_like(table.data)
        np.add.at(out, ids.reshape(-1), g.reshape(-1, table.shape[1]))
        return (out,)

    return _make("embedding", table.data[ids], (table,), backward)


def tanh(x: Tensor) -> Tensor:
    y = np.tanh(x.data)
    return _make("tanh", y, (x,), lambda g: (g * (1 - y * y),))


def _sigmoid(v: np.ndarray) -> np.ndarray:
    return 0.5 * (np.tanh(0.5 * v) + 1)


def sigmoid(x: Tensor) -> Tensor:
    y = _sigmoid(x.data)
    return _make("sigmoid", y, (x,), lambda g: (g * y * (1 - y),))


def relu(x: Tensor) -> Tensor:
    on = x.data > 0
    return _make("relu", x.data * on, (x,), lambda g: (g * on,))


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    if gamma.shape != x.shape[-1:] or beta.shape != x.shape[-1:]:
        raise ShapeError(f"layer_norm: gain {gamma.shape}/bias {beta.shape} vs input {x.shape}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    n = x.shape[-1]

    def backward(g):
        gx = gg = gbeta = None
        if x.requires_grad:
            gh = g * gamma.data
            gx = inv / n * (n * gh - gh.sum(-1, keepdims=True) - xhat * (gh * xhat).sum(-1, keepdims=True))
        if gamma.requires_grad:
            gg = (g * xhat).reshape(-1, n).sum(axis=0)
        if beta.requires_grad:
            gbeta = g.reshape(-1, n).sum(axis=0)
        return gx, gg, gbeta

    return _make("layer_norm", xhat * gamma.data + beta.data, (x, gamma, beta), backward)


def dropout(x: Tensor, rate: float, rng: np.random.Generator | None, training: bool) -> Tensor:
    """Inverted dropout; the identity when not training or ``rate`` is 0."""
    if not training or rate <= 0:
        return x
    if rng is None:
        raise ValueError("dropout in training mode needs an rng")
    keep = (rng.random(x.shape) >= rate).astype(x.dtype) / (1 - rate)
    return _make("dropout", x.data * keep, (x,), lambda g: (g * keep,))


def lstm_cell(
    x: Tensor, h: Tensor, c: Tensor, w_ih: Tensor, w_hh: Tensor, bias: Tensor
) -> tuple[Tensor, Tensor]:
    """One LSTM step with gate order (input, forget, cell, output).

    ``w_ih`` is (4H, in), ``w_hh`` is (4H, H), ``bias`` is (4H,).
    Returns the new hidden and cell states.
    """
    hidden = h.shape[-1]
    if w_ih.shape != (4 * hidden, x.shape[-1]) or w_hh.shape != (4 * hidden, hidden):
        raise ShapeError(
            f"lstm_cell: x {x.shape}, h {h.shape}, w_ih {w_ih.shape}, w_hh {w_hh.shape}"
        )
    if c.shape != h.shape or bias.shape != (4 * hidden,):
        raise ShapeError(f"lstm_cell: c {c.shape}, h {h.shape}, bias {bias.shape}")
    z = x.data @ w_ih.data.T + h.data @ w_hh.data.T + bias.data
    i = _sigmoid(z[..., :hidden])
    f = _sigmoid(z[..., hidden : 2 * hidden])
    u = np.tanh(z[..., 2 * hidden : 3 * hidden])
    o = _sigmoid(z[..., 3 * hidden :])
    c_new = f * c.data + i * u
    tc = np.tanh(c_new)
    h_new = o * tc
    joint = np.concatenate([h_new, c_new], axis=-1)

    def backward(g):
        gh, gc = g[..., :hidden], g[..., hidden:]
        gc = gc + gh * o * (1 - tc * tc)
        gz = np.concatenate(
            [
                gc * u * i * (1 - i),
                gc * c.data * f * (1 - f),
                gc * i * (1 - u * u),
                gh * tc * o * (1 - o),
            ],
            axis=-1,
        )
        gz2 = gz.reshape(-1, 4 * hidden)
        return (
            gz @ w_ih.data,
            gz @ w_hh.data,
            gc * f,
            gz2.T @ x.data.reshape(-1, x.shape[-1]),
            gz2.T @ h.data.reshape(-1, hidden),
            gz2.sum(axis=0),
        )

    state = _make("lstm_cell", joint, (x, h, c, w_ih, w_hh, bias), backward)
    return state[..., :hidden], state[..., hidden:]


# ---------------------------------------------------------------------------
# initialisation and verification


def glorot_uniform(rng: np.random.Generator, shape: tuple[int, ...], dtype=np.float64) -> np.ndarray:
    fan_out, fan_in = shape[0], int(np.prod(shape[1:])) if len(shape) > 1 else shape[0]
    a = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-a, a, size=shape).astype(dtype)


def grad_check(
    f: Callable[[], Tensor],
    params: Iterable[Parameter],
    eps: float = 1e-5,
    num_coords: int = 50,
    seed: int = 0,
) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``f`` must rebuild the graph from the current parameter values on every
    call and be deterministic.  Coordinates are sampled per parameter, half
    from entries with nonzero analytic gradient so sparse tables (embeddings)
    are still probed where they matter.
    """
    params = list(params)
    for p in params:
        p.zero_grad()
    loss = f()
    base = float(loss.data)
    if not math.isfinite(base):
        raise FloatingPointError("grad_check: objective is not finite")
    loss.backward()
    analytic = {p.name: p.grad.copy() for p in params}

    rng = np.random.default_rng(seed)
    # spread the budget so small tensors are exhausted and large ones pick up the rest
    quota: dict[str, int] = {}
    remaining = num_coords
    by_size = sorted(params, key=lambda q: q.data.size)
    for i, p in enumerate(by_size):
        share = math.ceil(remaining / (len(by_size) - i)) if remaining > 0 else 0
        quota[p.name] = min(p.data.size, max(share, 1))
        remaining -= quota[p.name]
    worst = 0.0
    for p in params:
        flat_grad = analytic[p.name].reshape(-1)
        size = p.data.size
        want = quota[p.name]
        if size <= want:
            coords = np.arange(size)
        else:
            nz = np.flatnonzero(flat_grad)
            picked = rng.choice(nz, size=min(want // 2, nz.size), replace=False)
            rest = np.setdiff1d(np.arange(size), picked)
            extra = rng.choice(rest, size=want - picked.size, replace=False)
            coords = np.sort(np.concatenate([picked, extra]))
        flat = p.data.reshape(-1)
        for k in coords:
            orig = flat[k]
            flat[k] = orig + eps
            up = float(f().data)
            flat[k] = orig - eps
            down = float(f().data)
            flat[k] = orig
            if not (math.isfinite(up) and math.isfinite(down)):
                raise FloatingPointError(f"grad_check: objective not finite probing {p.name}[{k}]")
            numeric = (up - down) / (2 * eps)
            a = float(flat_grad[k])
            err = abs(a - numeric) / max(1e-8, abs(a) + abs(numeric))
            worst = max(worst, err)
    return worst



class ParameterStore:
    """Ordered, uniquely named collection of :class:`Parameter` objects."""

    def __init__(self, dtype=np.float32, seed: int = 0):
        self.dtype = np.dtype(dtype)
        self.rng = np.random.default_rng(seed)
        self._params: dict[str, Parameter] = {}

    def __getitem__(self, name: str) -> Parameter:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __iter__(self):
        return iter(self._params.values())

    def __len__(self) -> int:
        return len(self._params)

    def names(self) -> list[str]:
        return list(self._params)

    def add(self, name: str, value: np.ndarray) -> Parameter:
        if name in self._params:
            raise KeyError(f"duplicate parameter name {name!r}")
        p = Parameter(name, np.asarray(value, dtype=self.dtype))
        self._params[name] = p
        return p

    def uniform(self, name: str, shape: tuple[int, ...]) -> Parameter:
        return self.add(name, glorot_uniform(self.rng, shape, self.dtype))

    def zeros(self, name: str, shape: tuple[int, ...]) -> Parameter:
        return self.add(name, np.zeros(shape, dtype=self.dtype))

    def ones(self, name: str, shape: tuple[int, ...]) -> Parameter:
        return self.add(name, np.ones(shape, dtype=self.dtype))

    def zero_grad(self) -> None:
        for p in self._params.values():
            p.zero_grad()
