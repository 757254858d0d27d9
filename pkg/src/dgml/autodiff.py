"""Dense float64 tensors with reverse-mode automatic differentiation.

Implements exactly the primitive set a two-branch convolutional recurrent
regressor needs: 2-D cross-correlation, average pooling, batch
normalisation, affine maps, pointwise activations, Huber loss, plus the
concatenation / slicing / reduction glue to wire them together. Every
operation records its inputs; calling ``backward()`` on a scalar result
walks the recorded graph once in reverse topological order and accumulates
gradients additively across fan-out.

Everything is float64 so that analytic gradients can be validated against
central finite differences at tight tolerances.
"""

from __future__ import annotations

from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "ShapeError",
    "no_grad",
    "is_grad_enabled",
    "add",
    "sub",
    "mul",
    "neg",
    "sum_all",
    "mean_all",
    "reshape",
    "concat",
    "narrow",
    "relu",
    "sigmoid",
    "tanh",
    "activation",
    "linear",
    "conv2d",
    "avgpool2d",
    "BatchNormState",
    "batchnorm",
    "huber_loss",
    "backward",
    "grad_check",
    "GradCheckReport",
    "TensorCheck",
]


class ShapeError(ValueError):
    """Operand shapes cannot be combined by the requested operation."""


_GRAD_ENABLED = True

# Sigmoid outputs are clamped into the largest open sub-interval of (0, 1)
# so the strict-range guarantee survives saturation (exp underflow would
# otherwise round the output to exactly 0.0 or 1.0 for |x| > ~745 / ~37).
_SIGMOID_LO = np.nextafter(0.0, 1.0)
_SIGMOID_HI = np.nextafter(1.0, 0.0)


@contextmanager
def no_grad():
    """Disable graph recording inside the context (inference, finite differences)."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def is_grad_enabled() -> bool:
    return _GRAD_ENABLED


class Tensor:
    """A float64 n-dimensional array plus an optional same-shape gradient buffer.

    ``_parents`` and ``_backward`` record the producing operation; leaves carry
    neither. Identity within a graph is plain object identity. A graph is
    single-use: after ``backward()`` the participating operation nodes are
    marked consumed and a second traversal is rejected.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "_consumed")

    def __init__(self, data, requires_grad: bool = False, _parents: tuple = (), _backward=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._parents = _parents
        self._backward = _backward
        self._consumed = False

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _reject_item(self)

    def detach(self) -> "Tensor":
        """Copy of the values as a fresh leaf; gradients stop here."""
        return Tensor(self.data.copy())

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        """Populate gradients of this scalar w.r.t. every reachable leaf.

        Visits each recorded node exactly once, in reverse topological order.
        Intermediate gradients are freed as soon as they have been propagated;
        only leaves keep their ``grad`` buffers.
        """
        if self.data.size != 1:
            raise ShapeError(f"backward requires a scalar, got shape {self.shape}")
        if self._consumed:
            raise RuntimeError("backward already ran on this graph; graphs are single-use")
        if not self.requires_grad:
            raise RuntimeError("result does not depend on any tensor requiring gradients")

        topo: list[Tensor] = []
        visited: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if id(parent) not in visited:
                    stack.append((parent, False))

        self.grad = np.ones_like(self.data)
        for node in reversed(topo):
            if node._backward is None:
                continue
            if node.grad is not None:
                node._backward(node.grad)
            node._consumed = True
            if node is not self:
                node.grad = None

    # Arithmetic sugar; scalars and ndarrays are lifted to constant leaves.
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __repr__(self) -> str:
        flags = []
        if self.requires_grad:
            flags.append("requires_grad")
        if self._backward is not None:
            flags.append("op")
        tail = f", {' '.join(flags)}" if flags else ""
        return f"Tensor(shape={self.shape}{tail})"


def _reject_item(t: Tensor):
    raise ShapeError(f"item() requires a single-element tensor, got shape {t.shape}")


def _lift(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(np.asarray(value, dtype=np.float64))


def _make(data: np.ndarray, parents: tuple[Tensor, ...], backward_fn) -> Tensor:
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        return Tensor(data, requires_grad=True, _parents=parents, _backward=backward_fn)
    return Tensor(data)


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.array(g, dtype=np.float64)  # owned copy; later fan-in adds in place
    else:
        t.grad += g


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``g`` down to ``shape`` (inverse of numpy broadcasting)."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (gs, ss) in enumerate(zip(g.shape, shape)) if ss == 1 and gs != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# ---------------------------------------------------------------------------
# elementwise arithmetic


def add(a, b) -> Tensor:
    at, bt = _lift(a), _lift(b)
    out = at.data + bt.data

    def bw(g):
        _accumulate(at, _unbroadcast(g, at.data.shape))
        _accumulate(bt, _unbroadcast(g, bt.data.shape))

    return _make(out, (at, bt), bw)


def sub(a, b) -> Tensor:
    at, bt = _lift(a), _lift(b)
    out = at.data - bt.data

    def bw(g):
        _accumulate(at, _unbroadcast(g, at.data.shape))
        _accumulate(bt, _unbroadcast(-g, bt.data.shape))

    return _make(out, (at, bt), bw)


def mul(a, b) -> Tensor:
    at, bt = _lift(a), _lift(b)
    out = at.data * bt.data

    def bw(g):
        _accumulate(at, _unbroadcast(g * bt.data, at.data.shape))
        _accumulate(bt, _unbroadcast(g * at.data, bt.data.shape))

    return _make(out, (at, bt), bw)


def neg(a) -> Tensor:
    at = _lift(a)

    def bw(g):
        _accumulate(at, -g)

    return _make(-at.data, (at,), bw)


def sum_all(x: Tensor) -> Tensor:
    out = np.asarray(x.data.sum())

    def bw(g):
        _accumulate(x, np.broadcast_to(g, x.data.shape).copy())

    return _make(out, (x,), bw)


def mean_all(x: Tensor) -> Tensor:
    n = x.data.size
    out = np.asarray(x.data.mean())

    def bw(g):
        _accumulate(x, np.broadcast_to(g / n, x.data.shape).copy())

    return _make(out, (x,), bw)


# ---------------------------------------------------------------------------
# shape plumbing


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(shape)
    out = x.data.reshape(shape)

    def bw(g):
        _accumulate(x, g.reshape(x.data.shape))

    return _make(out, (x,), bw)


def transpose(x: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    out = np.ascontiguousarray(x.data.transpose(axes))
    inverse = tuple(np.argsort(axes))

    def bw(g):
        _accumulate(x, g.transpose(inverse))

    return _make(out, (x,), bw)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    if not tensors:
        raise ShapeError("concat of an empty sequence")
    parts = tuple(tensors)
    out = np.concatenate([p.data for p in parts], axis=axis)
    ax = axis if axis >= 0 else out.ndim + axis
    sizes = [p.data.shape[ax] for p in parts]
    offsets = np.cumsum([0] + sizes)

    def bw(g):
        for p, lo, hi in zip(parts, offsets[:-1], offsets[1:]):
            idx = tuple(slice(None) if d != ax else slice(lo, hi) for d in range(g.ndim))
            _accumulate(p, g[idx])

    return _make(out, parts, bw)


def narrow(x: Tensor, axis: int, start: int, length: int) -> Tensor:
    ax = axis if axis >= 0 else x.ndim + axis
    if not (0 <= start and start + length <= x.shape[ax]):
        raise ShapeError(f"narrow [{start}:{start + length}] out of range for axis {ax} of size {x.shape[ax]}")
    idx = tuple(slice(None) if d != ax else slice(start, start + length) for d in range(x.ndim))
    out = x.data[idx].copy()

    def bw(g):
        buf = np.zeros_like(x.data)
        buf[idx] = g
        _accumulate(x, buf)

    return _make(out, (x,), bw)


# ---------------------------------------------------------------------------
# pointwise activations


def relu(x: Tensor) -> Tensor:
    out = np.maximum(x.data, 0.0)

    def bw(g):
        _accumulate(x, g * (out > 0.0))

    return _make(out, (x,), bw)


def sigmoid(x: Tensor) -> Tensor:
    """Numerically stable logistic; output strictly inside (0, 1) for finite input."""
    z = np.exp(-np.abs(x.data))
    out = np.where(x.data >= 0.0, 1.0 / (1.0 + z), z / (1.0 + z))
    out = np.clip(out, _SIGMOID_LO, _SIGMOID_HI)

    def bw(g):
        _accumulate(x, g * out * (1.0 - out))

    return _make(out, (x,), bw)


def tanh(x: Tensor) -> Tensor:
    out = np.tanh(x.data)

    def bw(g):
        _accumulate(x, g * (1.0 - out * out))

    return _make(out, (x,), bw)


_ACTIVATIONS = {"relu": relu, "sigmoid": sigmoid, "tanh": tanh}


def activation(x: Tensor, kind: str) -> Tensor:
    try:
        fn = _ACTIVATIONS[kind]
    except KeyError:
        raise ValueError(f"unknown activation {kind!r}; expected one of {sorted(_ACTIVATIONS)}") from None
    return fn(x)


# ---------------------------------------------------------------------------
# affine / convolution / pooling / normalisation


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """``weight @ x + bias`` for 1-D input, row-wise for 2-D batched input.

    weight has shape [m, n]; x is [n] or [N, n]; bias, when given, is [m].
    """
    if weight.ndim != 2:
        raise ShapeError(f"linear weight must be 2-D, got {weight.shape}")
    m, n = weight.shape
    if x.ndim not in (1, 2) or x.shape[-1] != n:
        raise ShapeError(f"linear expects input [..., {n}] for weight {weight.shape}, got {x.shape}")
    if bias is not None and bias.shape != (m,):
        raise ShapeError(f"linear bias must have shape ({m},), got {bias.shape}")

    if x.ndim == 1:
        out = weight.data @ x.data
    else:
        out = x.data @ weight.data.T
    if bias is not None:
        out = out + bias.data

    def bw(g):
        if x.ndim == 1:
            _accumulate(x, g @ weight.data)
            _accumulate(weight, np.outer(g, x.data))
            if bias is not None:
                _accumulate(bias, g)
        else:
            _accumulate(x, g @ weight.data)
            _accumulate(weight, g.T @ x.data)
            if bias is not None:
                _accumulate(bias, g.sum(axis=0))

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _make(out, parents, bw)


def _pair(v, name: str) -> tuple[int, int]:
    if isinstance(v, (int, np.integer)):
        return int(v), int(v)
    p = tuple(int(e) for e in v)
    if len(p) != 2:
        raise ShapeError(f"{name} must be an int or a pair, got {v!r}")
    return p


def _im2col(xd: np.ndarray, kh: int, kw: int, sh: int, sw: int,
            ph: int, pw: int, ho: int, wo: int) -> np.ndarray:
    """Column matrix [C*kh*kw, N*ho*wo] of the padded [C,N,H,W] input.

    The channel-major layout keeps the kernel reshape, the column reshape,
    and the matmul result all copy-free.
    """
    c, n, h, w = xd.shape
    if ph or pw:
        xp = np.zeros((c, n, h + 2 * ph, w + 2 * pw))
        xp[:, :, ph : ph + h, pw : pw + w] = xd
    else:
        xp = xd
    cols = np.empty((c, kh, kw, n, ho, wo), dtype=np.float64)
    for i in range(kh):
        for j in range(kw):
            cols[:, i, j] = xp[:, :, i : i + sh * ho : sh, j : j + sw * wo : sw]
    return cols.reshape(c * kh * kw, n * ho * wo)


def conv2d(x: Tensor, kernel: Tensor, bias: Tensor | None, stride=(1, 1), padding=(1, 1)) -> Tensor:
    """2-D cross-correlation over [C,H,W] or channel-major batched [C,N,H,W]
    input, producing [C_out,H',W'] / [C_out,N,H',W'].

    Output spatial dims follow floor((dim + 2*pad - k)/stride) + 1.
    """
    sh, sw = _pair(stride, "stride")
    ph, pw = _pair(padding, "padding")
    if sh < 1 or sw < 1:
        raise ShapeError(f"stride must be >= 1, got {(sh, sw)}")
    if ph < 0 or pw < 0:
        raise ShapeError(f"padding must be >= 0, got {(ph, pw)}")
    if kernel.ndim != 4:
        raise ShapeError(f"conv2d kernel must be [C_out, C_in, kh, kw], got {kernel.shape}")
    batched = x.ndim == 4
    if x.ndim not in (3, 4):
        raise ShapeError(f"conv2d input must be [C,H,W] or [C,N,H,W], got {x.shape}")
    xd = x.data if batched else x.data[:, None]
    c, n, h, w = xd.shape
    co, ci, kh, kw = kernel.shape
    if ci != c:
        raise ShapeError(f"conv2d kernel expects {ci} input channels but input has {c}")
    if bias is not None and bias.shape != (co,):
        raise ShapeError(f"conv2d bias must have shape ({co},), got {bias.shape}")
    hp, wp = h + 2 * ph, w + 2 * pw
    if kh > hp or kw > wp:
        raise ShapeError(f"kernel {(kh, kw)} larger than padded input {(hp, wp)}")
    ho = (hp - kh) // sh + 1
    wo = (wp - kw) // sw + 1

    cols = _im2col(xd, kh, kw, sh, sw, ph, pw, ho, wo)
    kmat = kernel.data.reshape(co, ci * kh * kw)
    out = (kmat @ cols).reshape(co, n, ho, wo)
    if bias is not None:
        out += bias.data.reshape(-1, 1, 1, 1)

    def bw(g):
        g4 = g if batched else g[:, None]
        if bias is not None:
            _accumulate(bias, g4.sum(axis=(1, 2, 3)))
        if not (kernel.requires_grad or x.requires_grad):
            return
        gmat = np.ascontiguousarray(g4).reshape(co, n * ho * wo)
        if kernel.requires_grad:
            # columns are recomputed rather than cached: they are kh*kw times
            # larger than the activation and would dominate graph memory
            cols_b = _im2col(x.data if batched else x.data[:, None], kh, kw, sh, sw, ph, pw, ho, wo)
            _accumulate(kernel, (gmat @ cols_b.T).reshape(kernel.shape))
        if x.requires_grad:
            dcols = (kmat.T @ gmat).reshape(ci, kh, kw, n, ho, wo)
            dxp = np.zeros((ci, n, hp, wp))
            for i in range(kh):
                for j in range(kw):
                    dxp[:, :, i : i + sh * ho : sh, j : j + sw * wo : sw] += dcols[:, i, j]
            dx = dxp[:, :, ph : ph + h, pw : pw + w]
            _accumulate(x, dx if batched else dx[:, 0])

    parents = (x, kernel) if bias is None else (x, kernel, bias)
    return _make(out if batched else out[:, 0], parents, bw)


def avgpool2d(x: Tensor, size) -> Tensor:
    """Non-overlapping window mean over the two trailing (spatial) axes;
    trailing rows/cols not filling a window are dropped."""
    ph, pw = _pair(size, "size")
    if x.ndim < 3:
        raise ShapeError(f"avgpool2d input needs at least [C,H,W], got {x.shape}")
    lead = x.shape[:-2]
    h, w = x.shape[-2:]
    if not (1 <= ph <= h and 1 <= pw <= w):
        raise ShapeError(f"pool size {(ph, pw)} invalid for spatial dims {(h, w)}")
    ho, wo = h // ph, w // pw
    windows = x.data[..., : ho * ph, : wo * pw].reshape(*lead, ho, ph, wo, pw)
    out = windows.mean(axis=(-3, -1))

    def bw(g):
        dx = np.zeros_like(x.data)
        spread = np.broadcast_to(
            (g / (ph * pw))[..., :, None, :, None], (*lead, ho, ph, wo, pw)
        )
        dx[..., : ho * ph, : wo * pw] = spread.reshape(*lead, ho * ph, wo * pw)
        _accumulate(x, dx)

    return _make(out, (x,), bw)


@dataclass
class BatchNormState:
    """Per-channel running statistics, updated in training mode.

    Update rule: running = momentum * running + (1 - momentum) * batch, using
    the biased batch variance. Inference normalises with these running values.
    """

    running_mean: np.ndarray
    running_var: np.ndarray
    momentum: float = 0.9
    eps: float = 1e-5

    @classmethod
    def fresh(cls, channels: int, momentum: float = 0.9, eps: float = 1e-5) -> "BatchNormState":
        return cls(np.zeros(channels), np.ones(channels), momentum, eps)

    def copy(self) -> "BatchNormState":
        return BatchNormState(self.running_mean.copy(), self.running_var.copy(), self.momentum, self.eps)


def batchnorm(x: Tensor, gamma: Tensor, beta: Tensor, state: BatchNormState, mode: str) -> Tensor:
    """Per-channel normalisation over the batch and spatial axes.

    Input is [C,H,W] or channel-major batched [C,N,H,W]. Training mode with
    batch size > 1 normalises by batch statistics and updates the running
    stats; batch size 1 and inference mode both normalise by the running
    statistics (a single sample has no usable batch variance).
    """
    if mode not in ("train", "infer"):
        raise ValueError(f"mode must be 'train' or 'infer', got {mode!r}")
    batched = x.ndim == 4
    if x.ndim not in (3, 4):
        raise ShapeError(f"batchnorm input must be [C,H,W] or [C,N,H,W], got {x.shape}")
    xd = x.data if batched else x.data[:, None]
    c, n = xd.shape[:2]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError(f"gamma/beta must have shape ({c},), got {gamma.shape} / {beta.shape}")
    if state.running_mean.shape != (c,):
        raise ShapeError(f"running stats have {state.running_mean.shape[0]} channels, input has {c}")

    shp = (c, 1, 1, 1)
    eps = state.eps
    axes = (1, 2, 3)

    if mode == "train" and n > 1:
        m = n * xd.shape[2] * xd.shape[3]
        mu = xd.mean(axis=axes)
        var = np.einsum("cnhw,cnhw->c", xd, xd) / m - mu * mu
        np.maximum(var, 0.0, out=var)  # guard against cancellation on constant channels
        inv_std = 1.0 / np.sqrt(var + eps)
        xhat = (xd - mu.reshape(shp)) * inv_std.reshape(shp)
        out = gamma.data.reshape(shp) * xhat + beta.data.reshape(shp)
        state.running_mean = state.momentum * state.running_mean + (1.0 - state.momentum) * mu
        state.running_var = state.momentum * state.running_var + (1.0 - state.momentum) * var

        def bw(g):
            g4 = g if batched else g[:, None]
            dbeta = g4.sum(axis=axes)
            dgamma = np.einsum("cnhw,cnhw->c", g4, xhat)
            _accumulate(beta, dbeta)
            _accumulate(gamma, dgamma)
            if x.requires_grad:
                # dL/dx = gamma/std * (g - mean(g) - xhat * mean(g*xhat)), means over the batch axes
                dx = g4 - (dbeta / m).reshape(shp) - xhat * (dgamma / m).reshape(shp)
                dx *= (gamma.data * inv_std).reshape(shp)
                _accumulate(x, dx if batched else dx[:, 0])

    else:
        inv_std = 1.0 / np.sqrt(state.running_var + eps)
        xhat = (xd - state.running_mean.reshape(shp)) * inv_std.reshape(shp)
        out = gamma.data.reshape(shp) * xhat + beta.data.reshape(shp)

        def bw(g):
            g4 = g if batched else g[:, None]
            _accumulate(beta, g4.sum(axis=axes))
            _accumulate(gamma, (g4 * xhat).sum(axis=axes))
            if x.requires_grad:
                dx = g4 * (gamma.data * inv_std).reshape(shp)
                _accumulate(x, dx if batched else dx[:, 0])

    return _make(out if batched else out[:, 0], (x, gamma, beta), bw)


def huber_loss(pred: Tensor, target, delta: float = 1.0) -> Tensor:
    """Mean Huber loss: 0.5*r^2 for |r| <= delta, delta*(|r| - delta/2) beyond.

    The target is treated as a constant; gradients flow to ``pred`` only.
    """
    if not delta > 0:
        raise ValueError(f"delta must be positive, got {delta}")
    td = target.data if isinstance(target, Tensor) else np.asarray(target, dtype=np.float64)
    if td.shape != pred.shape:
        raise ShapeError(f"huber_loss shapes differ: pred {pred.shape} vs target {td.shape}")
    r = pred.data - td
    a = np.abs(r)
    vals = np.where(a <= delta, 0.5 * r * r, delta * (a - 0.5 * delta))
    out = np.asarray(vals.mean())

    def bw(g):
        d = np.where(a <= delta, r, delta * np.sign(r))
        _accumulate(pred, g * d / r.size)

    return _make(out, (pred,), bw)


def backward(loss: Tensor) -> None:
    """Free-function alias for ``loss.backward()``."""
    loss.backward()


# ---------------------------------------------------------------------------
# finite-difference gradient checking


@dataclass
class TensorCheck:
    name: str
    max_rel_error: float
    worst_index: tuple[int, ...]
    checked: int


@dataclass
class GradCheckReport:
    """Per-tensor worst relative error, sorted worst-first."""

    entries: list[TensorCheck]
    eps: float
    nan_sites: list[str] = field(default_factory=list)

    @property
    def max_rel_error(self) -> float:
        return max((e.max_rel_error for e in self.entries), default=0.0)

    def failures(self, tol: float) -> list[TensorCheck]:
        return [e for e in self.entries if e.max_rel_error >= tol]

    def passed(self, tol: float) -> bool:
        return not self.nan_sites and not self.failures(tol)


def grad_check(
    forward: Callable[[], Tensor],
    params: dict[str, Tensor],
    eps: float = 1e-5,
    samples_per_tensor: int | None = None,
    seed: int = 0,
    _corrupt: str | None = None,
) -> GradCheckReport:
    """Compare analytic gradients against central finite differences.

    ``forward`` must rebuild the scalar loss from the current values of
    ``params`` and be deterministic. When ``samples_per_tensor`` is given,
    only that many elements are probed per tensor (seeded, always including
    the element with the largest analytic gradient); otherwise every element
    is checked. ``_corrupt`` is a test hook that doubles one tensor's analytic
    gradient so the report must flag it.

    NaN encountered in any forward evaluation is reported, never swallowed.
    """
    for t in params.values():
        t.grad = None
    loss = forward()
    if np.isnan(loss.data).any():
        return GradCheckReport(entries=[], eps=eps, nan_sites=["<analytic forward>"])
    loss.backward()
    analytic = {}
    for name, t in params.items():
        analytic[name] = np.zeros_like(t.data) if t.grad is None else t.grad.copy()
    if _corrupt is not None:
        analytic[_corrupt] = analytic[_corrupt] * 2.0

    rng = np.random.default_rng(seed)
    entries: list[TensorCheck] = []
    nan_sites: list[str] = []
    with no_grad():
        for name, t in params.items():
            flat = t.data.reshape(-1)
            an = analytic[name].reshape(-1)
            total = flat.size
            if samples_per_tensor is None or samples_per_tensor >= total:
                indices = np.arange(total)
            else:
                indices = rng.choice(total, size=samples_per_tensor, replace=False)
                hot = int(np.argmax(np.abs(an)))
                if hot not in indices:
                    indices = np.append(indices[:-1], hot)
            worst = 0.0
            worst_idx = (0,) * max(t.data.ndim, 1)
            for idx in indices:
                orig = flat[idx]
                flat[idx] = orig + eps
                f_plus = float(forward().data)
                flat[idx] = orig - eps
                f_minus = float(forward().data)
                flat[idx] = orig
                if np.isnan(f_plus) or np.isnan(f_minus):
                    nan_sites.append(f"{name}[{idx}]")
                    continue
                fd = (f_plus - f_minus) / (2.0 * eps)
                rel = abs(fd - an[idx]) / max(abs(fd), abs(an[idx]), 1e-6)
                if rel > worst:
                    worst = rel
                    worst_idx = np.unravel_index(idx, t.data.shape) if t.data.ndim else (0,)
            entries.append(TensorCheck(name, worst, tuple(int(i) for i in worst_idx), len(indices)))

    entries.sort(key=lambda e: e.max_rel_error, reverse=True)
    return GradCheckReport(entries=entries, eps=eps, nan_sites=nan_sites)
