"""Dense NCHW tensors with tape-based reverse-mode differentiation.

Every differentiable op runs its forward pass eagerly on numpy arrays and,
when a :class:`GradTape` is active and any input requires a gradient, appends
a record holding the output, its inputs and a closure that maps the output
gradient to input gradients. :func:`backward` replays those records in exact
reverse order.

Example::

    w = Tensor(np.ones((1, 1, 3, 3)), requires_grad=True)
    with GradTape():
        loss = conv2d(x, w, padding=1).mean()
    grads = backward(loss)
    grads[w]
"""

from __future__ import annotations

import threading
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

__all__ = [
    "Tensor",
    "GradTape",
    "Grads",
    "backward",
    "as_tensor",
    "add",
    "sub",
    "mul",
    "div",
    "neg",
    "power",
    "exp",
    "sqrt",
    "absolute",
    "tsum",
    "tmean",
    "reshape",
    "concat",
    "flip",
    "relu",
    "leaky_relu",
    "sigmoid",
    "tanh",
    "conv2d",
    "conv2d_transpose",
    "conv_output_size",
    "conv_transpose_output_size",
    "instance_stats",
    "adain",
    "l1_loss",
    "mse_loss",
    "AdamState",
    "adam_step",
    "INSTANCE_EPS",
]

INSTANCE_EPS = 1e-5
# keeps sqrt away from 0 in adain; far below any variance that matters
_VAR_FLOOR = 1e-30

BackwardFn = Callable[[np.ndarray], Sequence["np.ndarray | None"]]

_local = threading.local()


def _active_tape() -> GradTape | None:
    stack = getattr(_local, "stack", None)
    return stack[-1] if stack else None


class GradTape:
    """Ordered record of differentiable ops; single use.

    Use as a context manager around the forward pass, then call
    :func:`backward` (or :meth:`backward`) once on the scalar loss.
    """

    def __init__(self) -> None:
        self.records: list[tuple[Tensor, tuple[Tensor, ...], BackwardFn, str]] = []
        self.consumed = False

    def __enter__(self) -> GradTape:
        if self.consumed:
            raise RuntimeError("tape already consumed; create a new GradTape")
        if not hasattr(_local, "stack"):
            _local.stack = []
        _local.stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _local.stack.remove(self)

    def record(self, out: Tensor, inputs: tuple[Tensor, ...], fn: BackwardFn, op: str) -> None:
        if self.consumed:
            raise RuntimeError("cannot record on a consumed tape")
        self.records.append((out, inputs, fn, op))
        out._tape = self

    @property
    def ops(self) -> list[str]:
        return [r[3] for r in self.records]

    def backward(self, loss: Tensor) -> Grads:
        if loss.data.size != 1:
            raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
        if self.consumed:
            raise RuntimeError("tape already consumed")
        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        refs: dict[int, Tensor] = {id(loss): loss}
        produced = set()
        for out, inputs, fn, _ in reversed(self.records):
            produced.add(id(out))
            g = grads.pop(id(out), None)
            if g is None:
                continue
            for inp, gi in zip(inputs, fn(g)):
                if gi is None or not inp.requires_grad:
                    continue
                key = id(inp)
                refs[key] = inp
                if key in grads:
                    grads[key] = grads[key] + gi
                else:
                    grads[key] = gi
        leaf = {k: v for k, v in grads.items() if k not in produced}
        for k, g in leaf.items():
            refs[k].grad = g
        self.records.clear()
        self.consumed = True
        return Grads(leaf, {k: refs[k] for k in leaf})


class Grads:
    """Gradients of the leaf tensors reached by a backward pass, keyed by tensor."""

    def __init__(self, by_id: dict[int, np.ndarray], refs: dict[int, Tensor]) -> None:
        self._by_id = by_id
        self._refs = refs

    def __getitem__(self, t: Tensor) -> np.ndarray:
        return self._by_id[id(t)]

    def __contains__(self, t: Tensor) -> bool:
        return id(t) in self._by_id

    def get(self, t: Tensor, default=None):
        return self._by_id.get(id(t), default)

    def __len__(self) -> int:
        return len(self._by_id)


def backward(loss: Tensor) -> Grads:
    """Run reverse-mode differentiation of a scalar loss over its recording tape."""
    if loss.data.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    tape = loss._tape
    if tape is None:
        raise RuntimeError("loss was not produced under an active GradTape")
    return tape.backward(loss)


class Tensor:
    def __init__(self, data, requires_grad: bool = False, name: str | None = None) -> None:
        arr = np.asarray(data)
        if not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(np.float64)
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.name = name
        self._tape: GradTape | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def detach(self) -> Tensor:
        return Tensor(self.data)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

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

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, p: float):
        return power(self, p)

    def sum(self, axis=None, keepdims: bool = False) -> Tensor:
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> Tensor:
        return tmean(self, axis, keepdims)

    def reshape(self, *shape) -> Tensor:
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype))


def _lift(a, b) -> tuple[Tensor, Tensor]:
    # scalars take the dtype of the tensor operand so float32 graphs stay float32
    if isinstance(a, Tensor) and not isinstance(b, Tensor):
        b = Tensor(np.asarray(b, dtype=a.dtype))
    elif isinstance(b, Tensor) and not isinstance(a, Tensor):
        a = Tensor(np.asarray(a, dtype=b.dtype))
    return as_tensor(a), as_tensor(b)


def _make(data: np.ndarray, inputs: tuple[Tensor, ...], fn: BackwardFn, op: str) -> Tensor:
    requires = any(t.requires_grad for t in inputs)
    out = Tensor(data, requires_grad=requires)
    tape = _active_tape()
    if requires and tape is not None:
        tape.record(out, inputs, fn, op)
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


# -- elementwise -------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = _lift(a, b)
    return _make(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)), "add")


def sub(a, b) -> Tensor:
    a, b = _lift(a, b)
    return _make(a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)), "sub")


def mul(a, b) -> Tensor:
    a, b = _lift(a, b)
    return _make(a.data * b.data, (a, b),
                 lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
                 "mul")


def div(a, b) -> Tensor:
    a, b = _lift(a, b)
    out = a.data / b.data

    def fn(g):
        return (_unbroadcast(g / b.data, a.shape),
                _unbroadcast(-g * out / b.data, b.shape))

    return _make(out, (a, b), fn, "div")


def neg(a: Tensor) -> Tensor:
    return _make(-a.data, (a,), lambda g: (-g,), "neg")


def power(a: Tensor, p: float) -> Tensor:
    return _make(a.data ** p, (a,), lambda g: (g * p * a.data ** (p - 1),), "pow")


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,), "exp")


def sqrt(a: Tensor) -> Tensor:
    out = np.sqrt(a.data)
    return _make(out, (a,), lambda g: (g * 0.5 / out,), "sqrt")


def absolute(a: Tensor) -> Tensor:
    return _make(np.abs(a.data), (a,), lambda g: (g * np.sign(a.data),), "abs")


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return _make(a.data * mask, (a,), lambda g: (g * mask,), "relu")


def leaky_relu(a: Tensor, slope: float = 0.2) -> Tensor:
    scale = np.where(a.data > 0, 1.0, slope).astype(a.dtype)
    return _make(a.data * scale, (a,), lambda g: (g * scale,), "leaky_relu")


def sigmoid(a: Tensor) -> Tensor:
    # split by sign so large |x| never overflows exp
    x = a.data
    e = np.exp(-np.abs(x))
    out = np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(x.dtype)
    return _make(out, (a,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)
    return _make(out, (a,), lambda g: (g * (1.0 - out * out),), "tanh")


# -- reductions and shape ----------------------------------------------------


def _norm_axes(axis, ndim: int) -> tuple[int, ...]:
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axes(axis, a.ndim)
    out = a.data.sum(axis=axes, keepdims=keepdims)

    def fn(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _make(np.asarray(out), (a,), fn, "sum")


def tmean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axes(axis, a.ndim)
    count = int(np.prod([a.shape[i] for i in axes])) if axes else 1
    out = a.data.mean(axis=axes, keepdims=keepdims)

    def fn(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g / count, a.shape).astype(a.dtype),)

    return _make(np.asarray(out), (a,), fn, "mean")


def reshape(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),), "reshape")


def concat(tensors: Sequence[Tensor], axis: int = 1) -> Tensor:
    tensors = tuple(as_tensor(t) for t in tensors)
    out = np.concatenate([t.data for t in tensors], axis=axis)
    bounds = np.cumsum([0] + [t.shape[axis] for t in tensors])

    def fn(g):
        return tuple(np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=axis)
                     for i in range(len(tensors)))

    return _make(out, tensors, fn, "concat")


def flip(a: Tensor, axis: int = -1) -> Tensor:
    return _make(np.flip(a.data, axis=axis).copy(), (a,),
                 lambda g: (np.flip(g, axis=axis).copy(),), "flip")


# -- convolution -------------------------------------------------------------


def conv_output_size(size: int, k: int, stride: int, padding: int) -> int:
    return (size + 2 * padding - k) // stride + 1


def conv_transpose_output_size(size: int, k: int, stride: int, padding: int) -> int:
    return (size - 1) * stride - 2 * padding + k


def _check_conv(x: np.ndarray, k: np.ndarray, stride: int, padding: int, in_axis: int, op: str):
    if x.ndim != 4 or k.ndim != 4:
        raise ValueError(f"{op}: expected 4-D input and kernel, got input {x.shape} and kernel {k.shape}")
    if stride < 1:
        raise ValueError(f"{op}: stride must be >= 1, got {stride}")
    if padding < 0:
        raise ValueError(f"{op}: padding must be >= 0, got {padding}")
    if x.shape[1] != k.shape[in_axis]:
        raise ValueError(
            f"{op}: input has {x.shape[1]} channels but kernel {k.shape} expects {k.shape[in_axis]} "
            f"(input {x.shape})"
        )


def _conv_fwd(x: np.ndarray, k: np.ndarray, stride: int, padding: int) -> np.ndarray:
    kh, kw = k.shape[2:]
    if padding:
        x = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    if x.shape[2] < kh or x.shape[3] < kw:
        raise ValueError(f"conv2d: padded input {x.shape[2:]} smaller than kernel {(kh, kw)}")
    win = sliding_window_view(x, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    # (N, C, Ho, Wo, kh, kw) x (O, C, kh, kw) -> (N, Ho, Wo, O)
    out = np.tensordot(win, k, axes=([1, 4, 5], [1, 2, 3]))
    return np.ascontiguousarray(out.transpose(0, 3, 1, 2))


def _conv_bwd_input(g: np.ndarray, k: np.ndarray, stride: int, padding: int,
                    out_hw: tuple[int, int]) -> np.ndarray:
    """Adjoint of :func:`_conv_fwd` w.r.t. its input; ``out_hw`` is the unpadded input size."""
    n, _, ho, wo = g.shape
    c, (kh, kw) = k.shape[1], k.shape[2:]
    hp, wp = out_hw[0] + 2 * padding, out_hw[1] + 2 * padding
    # rows/cols the forward pass never touched stay zero
    hp = max(hp, (ho - 1) * stride + kh)
    wp = max(wp, (wo - 1) * stride + kw)
    dx = np.zeros((n, c, hp, wp), dtype=np.result_type(g, k))
    for i in range(kh):
        for j in range(kw):
            # (N, O, Ho, Wo) x (O, C) -> (N, Ho, Wo, C)
            contrib = np.tensordot(g, k[:, :, i, j], axes=([1], [0]))
            dx[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += contrib.transpose(0, 3, 1, 2)
    return dx[:, :, padding:padding + out_hw[0], padding:padding + out_hw[1]]


def _conv_bwd_kernel(g: np.ndarray, x: np.ndarray, kshape: tuple[int, ...], stride: int,
                     padding: int) -> np.ndarray:
    kh, kw = kshape[2:]
    if padding:
        x = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    win = sliding_window_view(x, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    ho, wo = g.shape[2:]
    win = win[:, :, :ho, :wo]
    # (N, O, Ho, Wo) x (N, C, Ho, Wo, kh, kw) -> (O, C, kh, kw)
    return np.tensordot(g, win, axes=([0, 2, 3], [0, 2, 3]))


def conv2d(x: Tensor, kernel: Tensor, bias: Tensor | None = None, stride: int = 1,
           padding: int = 0) -> Tensor:
    """2-D cross-correlation. ``kernel`` is (C_out, C_in, kH, kW); ``bias`` is (C_out,)."""
    x, kernel = as_tensor(x), as_tensor(kernel)
    _check_conv(x.data, kernel.data, stride, padding, 1, "conv2d")
    out = _conv_fwd(x.data, kernel.data, stride, padding)
    inputs: tuple[Tensor, ...] = (x, kernel)
    if bias is not None:
        bias = as_tensor(bias)
        if bias.shape != (kernel.shape[0],):
            raise ValueError(f"conv2d: bias shape {bias.shape} does not match {kernel.shape[0]} output channels")
        out = out + bias.data[None, :, None, None]
        inputs = inputs + (bias,)

    def fn(g):
        gx = _conv_bwd_input(g, kernel.data, stride, padding, x.shape[2:]) if x.requires_grad else None
        gk = _conv_bwd_kernel(g, x.data, kernel.shape, stride, padding) if kernel.requires_grad else None
        if bias is None:
            return gx, gk
        return gx, gk, g.sum(axis=(0, 2, 3))

    return _make(out, inputs, fn, "conv2d")


def conv2d_transpose(x: Tensor, kernel: Tensor, bias: Tensor | None = None, stride: int = 1,
                     padding: int = 0) -> Tensor:
    """Transposed convolution, the exact adjoint of :func:`conv2d` with the same kernel.

    ``kernel`` is (C_in, C_out, kH, kW): the layout a conv2d mapping C_out -> C_in
    would use. Output size is ``(H - 1) * stride - 2 * padding + kH``.
    """
    x, kernel = as_tensor(x), as_tensor(kernel)
    _check_conv(x.data, kernel.data, stride, padding, 0, "conv2d_transpose")
    kh, kw = kernel.shape[2:]
    hw = (conv_transpose_output_size(x.shape[2], kh, stride, padding),
          conv_transpose_output_size(x.shape[3], kw, stride, padding))
    if hw[0] < 1 or hw[1] < 1:
        raise ValueError(f"conv2d_transpose: non-positive output size {hw} for input {x.shape}")
    out = _conv_bwd_input(x.data, kernel.data, stride, padding, hw)
    inputs: tuple[Tensor, ...] = (x, kernel)
    if bias is not None:
        bias = as_tensor(bias)
        if bias.shape != (kernel.shape[1],):
            raise ValueError(f"conv2d_transpose: bias shape {bias.shape} does not match {kernel.shape[1]} output channels")
        out = out + bias.data[None, :, None, None]
        inputs = inputs + (bias,)

    def fn(g):
        gx = _conv_fwd(g, kernel.data, stride, padding) if x.requires_grad else None
        gk = _conv_bwd_kernel(x.data, g, kernel.shape, stride, padding) if kernel.requires_grad else None
        if bias is None:
            return gx, gk
        return gx, gk, g.sum(axis=(0, 2, 3))

    return _make(np.ascontiguousarray(out), inputs, fn, "conv2d_transpose")


# -- normalization -----------------------------------------------------------


def instance_stats(x: Tensor, eps: float = INSTANCE_EPS) -> tuple[Tensor, Tensor]:
    """Per-(sample, channel) spatial mean and ``sqrt(population var + eps)``.

    Both results have shape (N, C).
    """
    x = as_tensor(x)
    if x.ndim != 4 or x.shape[2] * x.shape[3] < 1:
        raise ValueError(f"instance_stats expects a non-empty NCHW tensor, got {x.shape}")
    n, c = x.shape[:2]
    mu = tmean(x, axis=(2, 3))
    centered = x - reshape(mu, (n, c, 1, 1))
    var = tmean(centered * centered, axis=(2, 3))
    return mu, sqrt(var + eps)


def _style_vector(v, n: int, c: int, what: str) -> Tensor:
    v = as_tensor(v)
    if v.shape == (c,):
        return reshape(v, (1, c, 1, 1))
    if v.shape == (n, c):
        return reshape(v, (n, c, 1, 1))
    raise ValueError(f"adain: {what} has shape {v.shape}, expected ({c},) or ({n}, {c})")


def adain(content: Tensor, style_mean, style_std, eps: float = INSTANCE_EPS) -> Tensor:
    """Re-normalize each content channel to the given style mean and std.

    ``style_std`` follows the :func:`instance_stats` convention
    ``sqrt(var + eps)``, so the output channel has population variance
    ``style_std**2 - eps`` and ``instance_stats(adain(x, m, s)) == (m, s)``.
    In particular ``adain(x, *instance_stats(x)) == x``. A constant content
    channel maps to ``style_mean``.
    """
    content = as_tensor(content)
    if content.ndim != 4:
        raise ValueError(f"adain expects NCHW content, got {content.shape}")
    n, c = content.shape[:2]
    s_data = style_std.data if isinstance(style_std, Tensor) else np.asarray(style_std)
    if np.any(s_data < 0):
        raise ValueError("adain: style_std must be non-negative")
    if not isinstance(style_mean, Tensor):
        style_mean = np.asarray(style_mean, dtype=content.dtype)
    if not isinstance(style_std, Tensor):
        style_std = np.asarray(style_std, dtype=content.dtype)
    m = _style_vector(style_mean, n, c, "style_mean")
    s = _style_vector(style_std, n, c, "style_std")
    # target population std; stds below sqrt(eps) cannot be expressed and clamp to 0
    s2 = s * s - eps
    s_pop = sqrt(s2 * Tensor((s2.data > 0).astype(content.dtype)) + _VAR_FLOOR)
    mu = reshape(tmean(content, axis=(2, 3)), (n, c, 1, 1))
    centered = content - mu
    var = tmean(centered * centered, axis=(2, 3), keepdims=True)
    # exactly constant channels take the zero-variance path to style_mean;
    # rounding in mu would otherwise be amplified into a spurious offset
    x = content.data
    varying = (x.max(axis=(2, 3), keepdims=True) > x.min(axis=(2, 3), keepdims=True)).astype(x.dtype)
    return centered * (s_pop / sqrt(var + _VAR_FLOOR) * Tensor(varying)) + m


# -- losses ------------------------------------------------------------------


def _check_same(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise ValueError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


def l1_loss(a, b) -> Tensor:
    a, b = _lift(a, b)
    _check_same(a, b, "l1_loss")
    return tmean(absolute(a - b))


def mse_loss(a, b) -> Tensor:
    a, b = _lift(a, b)
    _check_same(a, b, "mse_loss")
    d = a - b
    return tmean(d * d)


# -- optimizer ---------------------------------------------------------------


@dataclass
class AdamState:
    lr: float = 2e-4
    beta1: float = 0.5
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(params: dict[str, Tensor], grads: Grads | dict[str, np.ndarray],
              state: AdamState) -> dict[str, Tensor]:
    """One bias-corrected Adam update, applied to ``params`` and returned.

    ``grads`` may be a :class:`Grads` from :func:`backward` or a mapping from
    parameter name to array. Parameters without a gradient are treated as
    having a zero gradient.
    """
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    for name, p in params.items():
        if isinstance(grads, Grads):
            g = grads.get(p)
        else:
            g = grads.get(name)
        if g is None:
            g = np.zeros_like(p.data)
        if name not in state.m:
            state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        m = b1 * state.m[name] + (1 - b1) * g
        v = b2 * state.v[name] + (1 - b2) * g * g
        state.m[name], state.v[name] = m, v
        m_hat = m / (1 - b1 ** t)
        v_hat = v / (1 - b2 ** t)
        p.data = (p.data - state.lr * m_hat / (np.sqrt(v_hat) + state.eps)).astype(p.dtype)
    return params


def parameters_finite(params: Iterable[Tensor]) -> bool:
    return all(np.all(np.isfinite(p.data)) for p in params)
