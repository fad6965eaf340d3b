"""Differentiable primitives.

Every primitive takes Tensors (or array-likes, which become constants),
computes its forward value with numpy and, when any input requires a
gradient, records a backward closure on the shared tape. Backward closures
accumulate straight into the inputs' ``grad`` buffers.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import expit

from ..errors import ShapeMismatch
from .tensor import Tape, Tensor, accumulate

__all__ = [
    "BatchNormState", "add", "sub", "neg", "mul", "matmul", "concat", "reshape",
    "transpose", "slice", "conv2d", "sigmoid", "tanh", "leaky_relu", "softmax",
    "batchnorm", "sum", "mean", "l2_norm", "squash", "custom",
]


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _resolve_tape(inputs, tape: Tape | None) -> Tape:
    found = [] if tape is None else [tape]
    for t in inputs:
        if t.tape is not None:
            t.tape = t.tape.target()
            if all(t.tape is not f for f in found):
                found.append(t.tape)
    if not found:
        return Tape(implicit=True)
    explicit = [f for f in found if not f.implicit]
    if len(explicit) > 1:
        raise ShapeMismatch("operands belong to different tapes")
    main = explicit[0] if explicit else found[0]
    for f in found:
        if f is not main:
            f.merge_into(main)
    return main


def _emit(data: np.ndarray, inputs, backward, tape: Tape | None) -> Tensor:
    tape = _resolve_tape(inputs, tape)
    requires = any(t.requires_grad for t in inputs)
    out = Tensor(data, requires_grad=requires, tape=tape)
    if requires:
        tape.record(out, backward)
    return out


def custom(data: np.ndarray, inputs, backward, tape: Tape | None = None) -> Tensor:
    """Record a hand-written fused operation.

    ``backward(g)`` receives the output gradient and must accumulate into the
    inputs itself (via `accumulate`); it is only called when some input
    requires a gradient.
    """
    return _emit(data, [_as_tensor(t) for t in inputs], backward, tape)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> tuple[np.ndarray, bool]:
    """Sum ``g`` down to ``shape``; second value tells whether a new array was made."""
    if g.shape == shape:
        return g, False
    lead = g.ndim - len(shape)
    axes = tuple(range(lead)) + tuple(
        i + lead for i, n in enumerate(shape) if n == 1 and g.shape[i + lead] != 1
    )
    return g.sum(axis=axes).reshape(shape), True


def _send(t: Tensor, g: np.ndarray, owned: bool = False) -> None:
    if t.requires_grad:
        g, made = _unbroadcast(g, t.shape)
        accumulate(t, g, owned or made)


# ---------------------------------------------------------------- arithmetic

def _broadcast_check(a: Tensor, b: Tensor, what: str):
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError as exc:
        raise ShapeMismatch(f"{what}: {a.shape} vs {b.shape}") from exc


def add(a, b, tape=None) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_check(a, b, "add")

    def backward(g):
        _send(a, g)
        _send(b, g)

    return _emit(a.data + b.data, (a, b), backward, tape)


def sub(a, b, tape=None) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_check(a, b, "sub")

    def backward(g):
        _send(a, g)
        if b.requires_grad:
            _send(b, -g, owned=True)

    return _emit(a.data - b.data, (a, b), backward, tape)


def neg(a, tape=None) -> Tensor:
    a = _as_tensor(a)
    return _emit(-a.data, (a,), lambda g: _send(a, -g, owned=True), tape)


def mul(a, b, tape=None) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_check(a, b, "mul")

    def backward(g):
        if a.requires_grad:
            _send(a, g * b.data, owned=True)
        if b.requires_grad:
            _send(b, g * a.data, owned=True)

    return _emit(a.data * b.data, (a, b), backward, tape)


def matmul(a, b, tape=None) -> Tensor:
    """Batched matrix product with numpy broadcasting over leading axes."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeMismatch("matmul operands must be at least 2-D")
    try:
        out = np.matmul(a.data, b.data)
    except ValueError as exc:
        raise ShapeMismatch(f"matmul: {a.shape} @ {b.shape}") from exc

    def backward(g):
        if a.requires_grad:
            _send(a, np.matmul(g, np.swapaxes(b.data, -1, -2)), owned=True)
        if b.requires_grad:
            _send(b, np.matmul(np.swapaxes(a.data, -1, -2), g), owned=True)

    return _emit(out, (a, b), backward, tape)


# ------------------------------------------------------------------- layout

def concat(tensors, axis: int = 0, tape=None) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as exc:
        raise ShapeMismatch(f"concat: {[t.shape for t in tensors]}") from exc
    ax = axis % out.ndim
    bounds = np.cumsum([0] + [t.shape[ax] for t in tensors])

    def backward(g):
        for t, lo, hi in zip(tensors, bounds[:-1], bounds[1:]):
            if t.requires_grad:
                idx = [np.s_[:]] * g.ndim
                idx[ax] = np.s_[lo:hi]
                accumulate(t, g[tuple(idx)])

    return _emit(out, tensors, backward, tape)


def reshape(a, shape, tape=None) -> Tensor:
    a = _as_tensor(a)
    try:
        out = a.data.reshape(shape)
    except ValueError as exc:
        raise ShapeMismatch(f"reshape {a.shape} -> {shape}") from exc
    return _emit(out, (a,), lambda g: accumulate(a, g.reshape(a.shape)), tape)


def transpose(a, axes=None, tape=None) -> Tensor:
    a = _as_tensor(a)
    axes = tuple(reversed(range(a.ndim))) if axes is None else tuple(axes)
    if sorted(axes) != list(range(a.ndim)):
        raise ShapeMismatch(f"bad permutation {axes} for {a.ndim}-D tensor")
    inverse = tuple(np.argsort(axes))
    return _emit(a.data.transpose(axes), (a,),
                 lambda g: accumulate(a, g.transpose(inverse)), tape)


def _is_basic_index(idx) -> bool:
    items = idx if isinstance(idx, tuple) else (idx,)
    return all(isinstance(i, (int, np.integer, type(np.s_[:]), type(Ellipsis))) or i is None
               for i in items)


def slice(a, idx, tape=None) -> Tensor:
    a = _as_tensor(a)
    try:
        out = a.data[idx]
    except IndexError as exc:
        raise ShapeMismatch(f"index {idx!r} out of range for {a.shape}") from exc
    basic = _is_basic_index(idx)

    def backward(g):
        if not a.requires_grad:
            return
        if a.grad is None:
            a.grad = np.zeros(a.shape)
        if basic:
            a.grad[idx] += g
        else:
            np.add.at(a.grad, idx, g)

    return _emit(np.array(out), (a,), backward, tape)


# -------------------------------------------------------------- convolution

def conv2d(x, w, b=None, stride: int = 1, groups: int = 1, tape=None) -> Tensor:
    """Valid (unpadded) 2-D cross-correlation.

    x: [B, Cin, H, W]; w: [Cout, Cin // groups, e, e]; b: [Cout] or None.
    Output: [B, Cout, (H - e) // stride + 1, (W - e) // stride + 1].
    """
    x, w = _as_tensor(x), _as_tensor(w)
    inputs = [x, w] if b is None else [x, w, _as_tensor(b)]
    if x.ndim != 4 or w.ndim != 4:
        raise ShapeMismatch("conv2d expects 4-D input and kernel")
    B, cin, H, W = x.shape
    cout, cin_g, e, e2 = w.shape
    if e != e2 or cin % groups or cout % groups or cin_g != cin // groups:
        raise ShapeMismatch(f"conv2d: input {x.shape}, kernel {w.shape}, groups={groups}")
    if e > H or e > W or stride < 1:
        raise ShapeMismatch("kernel larger than input or bad stride")
    if b is not None and inputs[2].shape != (cout,):
        raise ShapeMismatch(f"conv2d bias must be ({cout},)")
    G, cout_g = groups, cout // groups
    win = sliding_window_view(x.data, (e, e), axis=(2, 3))[:, :, ::stride, ::stride]
    ho, wo = win.shape[2], win.shape[3]
    P, Q = B * ho * wo, cin_g * e * e
    # im2col per group: [G, B*ho*wo, cin_g*e*e]
    cols = np.ascontiguousarray(
        win.reshape(B, G, cin_g, ho, wo, e, e).transpose(1, 0, 3, 4, 2, 5, 6)).reshape(G, P, Q)
    wmat = w.data.reshape(G, cout_g, Q).transpose(0, 2, 1)
    out = np.matmul(cols, wmat).reshape(G, B, ho, wo, cout_g)
    out = out.transpose(1, 0, 4, 2, 3).reshape(B, cout, ho, wo)
    if b is not None:
        out = out + inputs[2].data[None, :, None, None]

    def backward(g):
        gg = np.ascontiguousarray(
            g.reshape(B, G, cout_g, ho, wo).transpose(1, 0, 3, 4, 2)).reshape(G, P, cout_g)
        if w.requires_grad:
            gw = np.matmul(cols.transpose(0, 2, 1), gg).transpose(0, 2, 1)
            accumulate(w, gw.reshape(w.shape), owned=True)
        if b is not None and inputs[2].requires_grad:
            accumulate(inputs[2], g.sum(axis=(0, 2, 3)), owned=True)
        if x.requires_grad:
            gcols = np.matmul(gg, wmat.transpose(0, 2, 1)).reshape(G, B, ho, wo, cin_g, e, e)
            gcols = gcols.transpose(1, 0, 4, 2, 3, 5, 6).reshape(B, cin, ho, wo, e, e)
            gx = np.zeros(x.shape)
            hi_h, hi_w = stride * (ho - 1) + 1, stride * (wo - 1) + 1
            for i in range(e):
                for j in range(e):
                    gx[:, :, i:i + hi_h:stride, j:j + hi_w:stride] += gcols[..., i, j]
            accumulate(x, gx, owned=True)

    return _emit(out, inputs, backward, tape)


# -------------------------------------------------------------- activations

def sigmoid(a, tape=None) -> Tensor:
    a = _as_tensor(a)
    s = expit(a.data)
    return _emit(s, (a,), lambda g: accumulate(a, g * s * (1.0 - s), owned=True), tape)


def tanh(a, tape=None) -> Tensor:
    a = _as_tensor(a)
    t = np.tanh(a.data)
    return _emit(t, (a,), lambda g: accumulate(a, g * (1.0 - t * t), owned=True), tape)


def leaky_relu(a, alpha: float = 0.3, tape=None) -> Tensor:
    a = _as_tensor(a)
    pos = a.data > 0
    out = np.where(pos, a.data, alpha * a.data)
    return _emit(out, (a,), lambda g: accumulate(a, np.where(pos, g, alpha * g), owned=True),
                 tape)


def softmax(a, axis: int = -1, tape=None) -> Tensor:
    a = _as_tensor(a)
    z = a.data - a.data.max(axis=axis, keepdims=True)
    ez = np.exp(z)
    s = ez / ez.sum(axis=axis, keepdims=True)

    def backward(g):
        accumulate(a, s * (g - (g * s).sum(axis=axis, keepdims=True)), owned=True)

    return _emit(s, (a,), backward, tape)


# ------------------------------------------------------------ normalization

@dataclass
class BatchNormState:
    """Running statistics for one batch-norm layer.

    The exponential moving averages start at zero and are bias-corrected by
    ``1 - momentum**steps`` when read, so evaluation after a short training run
    uses the observed statistics instead of the initial guess.
    """

    num_features: int
    momentum: float = 0.99
    eps: float = 1e-3
    mean_acc: np.ndarray = field(default=None)
    var_acc: np.ndarray = field(default=None)
    steps: int = 0

    def __post_init__(self):
        if self.mean_acc is None:
            self.mean_acc = np.zeros(self.num_features)
        if self.var_acc is None:
            self.var_acc = np.zeros(self.num_features)

    def update(self, mean: np.ndarray, var: np.ndarray) -> None:
        m = self.momentum
        self.mean_acc = m * self.mean_acc + (1.0 - m) * mean
        self.var_acc = m * self.var_acc + (1.0 - m) * var
        self.steps += 1

    @property
    def running_mean(self) -> np.ndarray:
        if self.steps == 0:
            return np.zeros(self.num_features)
        return self.mean_acc / (1.0 - self.momentum ** self.steps)

    @property
    def running_var(self) -> np.ndarray:
        if self.steps == 0:
            return np.ones(self.num_features)
        return self.var_acc / (1.0 - self.momentum ** self.steps)


def batchnorm(x, gamma, beta, state: BatchNormState, training: bool, tape=None) -> Tensor:
    """Per-feature normalization over every axis but the last.

    Training mode uses batch statistics and updates ``state``; eval mode is
    the fixed affine map given by the running statistics.
    """
    x, gamma, beta = _as_tensor(x), _as_tensor(gamma), _as_tensor(beta)
    F = x.shape[-1]
    if gamma.shape != (F,) or beta.shape != (F,) or state.num_features != F:
        raise ShapeMismatch(f"batchnorm over {F} features with gamma {gamma.shape}")
    axes = tuple(range(x.ndim - 1))
    n = x.size // F
    if training:
        mu = x.data.mean(axis=axes)
        var = x.data.var(axis=axes)
        state.update(mu, var * n / max(n - 1, 1))
    else:
        mu, var = state.running_mean, state.running_var
    inv = 1.0 / np.sqrt(var + state.eps)
    xhat = (x.data - mu) * inv
    out = gamma.data * xhat + beta.data

    def backward(g):
        if gamma.requires_grad:
            accumulate(gamma, (g * xhat).sum(axis=axes), owned=True)
        if beta.requires_grad:
            accumulate(beta, g.sum(axis=axes), owned=True)
        if x.requires_grad:
            gxhat = g * gamma.data
            if training:
                gx = inv * (gxhat - gxhat.mean(axis=axes)
                            - xhat * (gxhat * xhat).mean(axis=axes))
            else:
                gx = gxhat * inv
            accumulate(x, gx, owned=True)

    return _emit(out, (x, gamma, beta), backward, tape)


# --------------------------------------------------------------- reductions

def _norm_axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def sum(a, axis=None, keepdims: bool = False, tape=None) -> Tensor:  # noqa: A001
    a = _as_tensor(a)
    axes = _norm_axes(axis, a.ndim)
    out = a.data.sum(axis=axes, keepdims=keepdims)

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        accumulate(a, np.broadcast_to(g, a.shape))

    return _emit(out, (a,), backward, tape)


def mean(a, axis=None, keepdims: bool = False, tape=None) -> Tensor:
    a = _as_tensor(a)
    axes = _norm_axes(axis, a.ndim)
    count = int(np.prod([a.shape[i] for i in axes]))
    out = a.data.mean(axis=axes, keepdims=keepdims)

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        accumulate(a, np.broadcast_to(g / count, a.shape))

    return _emit(out, (a,), backward, tape)


def l2_norm(a, axis: int = -1, keepdims: bool = False, tape=None) -> Tensor:
    a = _as_tensor(a)
    n = np.sqrt((a.data * a.data).sum(axis=axis, keepdims=True))
    out = n if keepdims else np.squeeze(n, axis=axis)

    def backward(g):
        gk = g if keepdims else np.expand_dims(g, axis)
        safe = np.where(n > 0, n, 1.0)
        accumulate(a, np.where(n > 0, gk * a.data / safe, 0.0), owned=True)

    return _emit(out, (a,), backward, tape)


def squash_forward(s: np.ndarray, axis: int = -1) -> np.ndarray:
    sq = (s * s).sum(axis=axis, keepdims=True)
    # |s|/(1+|s|^2) == (|s|^2/(1+|s|^2)) / |s|, and is 0 at s = 0
    return np.sqrt(sq) / (1.0 + sq) * s


def squash_backward(s: np.ndarray, g: np.ndarray, axis: int = -1) -> np.ndarray:
    sq = (s * s).sum(axis=axis, keepdims=True)
    n = np.sqrt(sq)
    scale = n / (1.0 + sq)
    # (d scale / d|s|) / |s|; the radial term vanishes at s = 0
    safe = np.where(n > 0, n, 1.0)
    radial = np.where(n > 0, (1.0 - sq) / ((1.0 + sq) ** 2 * safe), 0.0)
    dot = (s * g).sum(axis=axis, keepdims=True)
    return scale * g + radial * dot * s


def squash(a, axis: int = -1, tape=None) -> Tensor:
    """v = |s|^2 / (1 + |s|^2) * s / |s| along ``axis``; zero maps to zero."""
    a = _as_tensor(a)
    return _emit(squash_forward(a.data, axis), (a,),
                 lambda g: accumulate(a, squash_backward(a.data, g, axis), owned=True), tape)
