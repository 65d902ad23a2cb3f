"""Dense (N, C, H, W) tensors with reverse-mode differentiation.

Every op builds its output through :func:`_result`, which records the parent
tensors and a closure mapping the output gradient to parent gradients.
:meth:`Tensor.backward` walks the recorded graph in reverse topological order.
"""
from __future__ import annotations

import contextlib
from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


class DimensionError(ValueError):
    """Operand shapes are incompatible."""


class GeometryError(ValueError):
    """Spatial sizes do not fit the requested kernel, stride or pooling."""


class ConfigError(ValueError):
    """Unsupported operator configuration."""


class GraphStateError(RuntimeError):
    """Backward was requested on a tensor with no recorded forward."""


_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block (inference)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(data)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float64)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __sub__(self, other):
        return add(self, mul(other, -1.0))

    def __neg__(self):
        return mul(self, -1.0)

    def sum(self) -> "Tensor":
        return sum_all(self)

    def backward(self, seed=None) -> None:
        """Accumulate gradients of this tensor into every leaf that requires them.

        ``seed`` defaults to ones; it must match the tensor's shape.
        """
        if self._backward is None:
            raise GraphStateError("backward() called on a tensor with no recorded forward pass")
        if seed is None:
            seed = np.ones_like(self.data)
        else:
            seed = np.asarray(seed, dtype=self.data.dtype)
            if seed.shape != self.shape:
                raise DimensionError(f"seed shape {seed.shape} does not match output shape {self.shape}")

        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen:
                    stack.append((p, False))

        grads: dict[int, np.ndarray] = {id(self): seed}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not (parent.requires_grad or parent._backward is not None):
                    continue
                if id(parent) in grads:
                    grads[id(parent)] = grads[id(parent)] + pg
                else:
                    grads[id(parent)] = pg


def _as_tensor(x, dtype=np.float64) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype))


def _result(data: np.ndarray, parents: tuple[Tensor, ...], backward) -> Tensor:
    if not np.all(np.isfinite(data)):
        raise FloatingPointError("non-finite value produced by tensor op")
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad or p._backward is not None for p in parents):
        out._parents = parents
        out._backward = backward
    return out


def _check4(x: Tensor, what: str) -> None:
    if x.data.ndim != 4:
        raise DimensionError(f"{what} expects a 4-axis (N, C, H, W) tensor, got shape {x.shape}")


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _broadcast_shape(a: Tensor, b: Tensor) -> tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(f"shapes {a.shape} and {b.shape} are not broadcastable") from None


# -- elementwise ---------------------------------------------------------------


def add(a, b) -> Tensor:
    a = _as_tensor(a)
    b = _as_tensor(b, a.dtype)
    _broadcast_shape(a, b)
    sa, sb = a.shape, b.shape
    return _result(a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def mul(a, b) -> Tensor:
    """Elementwise product; axes of size 1 broadcast."""
    a = _as_tensor(a)
    b = _as_tensor(b, a.dtype)
    _broadcast_shape(a, b)
    ad, bd = a.data, b.data
    return _result(
        ad * bd,
        (a, b),
        lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)),
    )


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _result(np.where(mask, x.data, 0.0).astype(x.dtype, copy=False), (x,), lambda g: (g * mask,))


def sigmoid(x: Tensor) -> Tensor:
    z = x.data
    e = np.exp(-np.abs(z))
    s = np.where(z >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(z.dtype, copy=False)
    # saturated logits would round to exactly 0 or 1
    s = np.clip(s, np.finfo(z.dtype).tiny, np.nextafter(z.dtype.type(1), z.dtype.type(0)))
    return _result(s, (x,), lambda g: (g * s * (1.0 - s),))


def sum_all(x: Tensor) -> Tensor:
    shape = x.shape
    out = np.asarray(x.data.sum(), dtype=x.dtype).reshape((1,) * x.data.ndim)
    return _result(out, (x,), lambda g: (np.broadcast_to(g, shape).copy(),))


def concat_channels(a: Tensor, b: Tensor) -> Tensor:
    _check4(a, "concat_channels")
    _check4(b, "concat_channels")
    if (a.shape[0], a.shape[2], a.shape[3]) != (b.shape[0], b.shape[2], b.shape[3]):
        raise DimensionError(f"concat_channels needs equal N, H, W; got {a.shape} and {b.shape}")
    ca = a.shape[1]
    return _result(np.concatenate([a.data, b.data], axis=1), (a, b), lambda g: (g[:, :ca], g[:, ca:]))


def slice_channels(x: Tensor, start: int, stop: int) -> Tensor:
    _check4(x, "slice_channels")
    shape = x.shape

    def backward(g):
        full = np.zeros(shape, dtype=g.dtype)
        full[:, start:stop] = g
        return (full,)

    return _result(x.data[:, start:stop].copy(), (x,), backward)


# -- pooling -------------------------------------------------------------------


def maxpool2d(x: Tensor) -> Tensor:
    """2x2 max pooling with stride 2. Ties go to the first element in row-major scan order."""
    _check4(x, "maxpool2d")
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise GeometryError(f"maxpool2d needs even H and W, got {h}x{w}")
    win = x.data.reshape(n, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h // 2, w // 2, 4)
    idx = win.argmax(axis=-1)
    out = np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]

    def backward(g):
        gw = np.zeros((n, c, h // 2, w // 2, 4), dtype=g.dtype)
        np.put_along_axis(gw, idx[..., None], g[..., None], axis=-1)
        return (gw.reshape(n, c, h // 2, w // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h, w),)

    return _result(out, (x,), backward)


def global_avg_pool(x: Tensor) -> Tensor:
    """Per-channel spatial mean, shape (N, C, 1, 1)."""
    _check4(x, "global_avg_pool")
    n, c, h, w = x.shape
    return _result(
        x.data.mean(axis=(2, 3), keepdims=True),
        (x,),
        lambda g: (np.broadcast_to(g / (h * w), x.shape).copy(),),
    )


def global_max_pool(x: Tensor) -> Tensor:
    """Per-channel spatial max, shape (N, C, 1, 1); gradient goes to the first argmax."""
    _check4(x, "global_max_pool")
    n, c, h, w = x.shape
    flat = x.data.reshape(n, c, h * w)
    idx = flat.argmax(axis=-1)

    def backward(g):
        gf = np.zeros((n, c, h * w), dtype=g.dtype)
        np.put_along_axis(gf, idx[..., None], g.reshape(n, c, 1), axis=-1)
        return (gf.reshape(n, c, h, w),)

    return _result(flat.max(axis=-1).reshape(n, c, 1, 1), (x,), backward)


def channel_mean(x: Tensor) -> Tensor:
    """Mean across the channel axis, shape (N, 1, H, W)."""
    _check4(x, "channel_mean")
    c = x.shape[1]
    return _result(
        x.data.mean(axis=1, keepdims=True),
        (x,),
        lambda g: (np.broadcast_to(g / c, x.shape).copy(),),
    )


def channel_max(x: Tensor) -> Tensor:
    """Max across the channel axis, shape (N, 1, H, W); gradient goes to the first argmax."""
    _check4(x, "channel_max")
    idx = x.data.argmax(axis=1)[:, None]

    def backward(g):
        gx = np.zeros(x.shape, dtype=g.dtype)
        np.put_along_axis(gx, idx, g, axis=1)
        return (gx,)

    return _result(np.take_along_axis(x.data, idx, axis=1), (x,), backward)


# -- convolution ---------------------------------------------------------------


@dataclass
class ConvParams:
    """Weights of one convolution.

    For :func:`conv2d` the weight is ``(out, in, kh, kw)``. For
    :func:`conv_transpose2d` it is ``(in, out, 2, 2)``, i.e. the layout of the
    strided conv2d it is the adjoint of.
    """

    weight: Tensor
    bias: Tensor
    stride: int = 1
    padding: int = 0

    def parameters(self) -> list[Tensor]:
        return [self.weight, self.bias]


def he_uniform_conv(rng: np.random.Generator, out_ch: int, in_ch: int, k: int, *,
                    stride: int = 1, padding: int | None = None, transposed: bool = False,
                    dtype=np.float64) -> ConvParams:
    """He-uniform weights (bound sqrt(6 / fan_in)) and zero bias."""
    fan_in = in_ch * k * k
    bound = np.sqrt(6.0 / fan_in)
    shape = (in_ch, out_ch, k, k) if transposed else (out_ch, in_ch, k, k)
    w = rng.uniform(-bound, bound, size=shape).astype(dtype)
    return ConvParams(
        weight=Tensor(w, requires_grad=True),
        bias=Tensor(np.zeros(out_ch, dtype=dtype), requires_grad=True),
        stride=stride,
        padding=(k - 1) // 2 if padding is None else padding,
    )


def conv_output_size(size: int, k: int, stride: int, pad: int) -> int:
    span = size + 2 * pad - k
    if span < 0 or span % stride:
        raise GeometryError(
            f"input extent {size} with kernel {k}, stride {stride}, padding {pad} "
            "does not give an integer output size"
        )
    return span // stride + 1


def conv2d(x: Tensor, p: ConvParams) -> Tensor:
    _check4(x, "conv2d")
    w, b = p.weight, p.bias
    o, ci, kh, kw = w.shape
    n, c, h, wd = x.shape
    if c != ci:
        raise DimensionError(f"conv2d input {x.shape} does not match weight {w.shape}")
    if b.shape != (o,):
        raise DimensionError(f"conv2d bias {b.shape} does not match weight {w.shape}")
    s, pad = p.stride, p.padding
    ho = conv_output_size(h, kh, s, pad)
    wo = conv_output_size(wd, kw, s, pad)

    xp = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x.data
    if kh == 1 and kw == 1 and s == 1:
        cols = xp[:, :, :, :, None, None]
    else:
        cols = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::s, ::s]
    # cols: (N, C, Ho, Wo, kh, kw)
    out = np.tensordot(cols, w.data, axes=([1, 4, 5], [1, 2, 3]))  # (N, Ho, Wo, O)
    out = out.transpose(0, 3, 1, 2) + b.data[None, :, None, None]
    out = np.ascontiguousarray(out)

    def backward(g):
        gb = g.sum(axis=(0, 2, 3))
        gw = np.tensordot(g, cols, axes=([0, 2, 3], [0, 2, 3]))  # (O, C, kh, kw)
        gcols = np.tensordot(g, w.data, axes=([1], [0]))  # (N, Ho, Wo, C, kh, kw)
        gxp = np.zeros(xp.shape, dtype=g.dtype)
        for i in range(kh):
            for j in range(kw):
                gxp[:, :, i:i + s * (ho - 1) + 1:s, j:j + s * (wo - 1) + 1:s] += gcols[..., i, j].transpose(0, 3, 1, 2)
        gx = gxp[:, :, pad:pad + h, pad:pad + wd] if pad else gxp
        return gx, gw, gb

    return _result(out, (x, w, b), backward)


def conv_transpose2d(x: Tensor, p: ConvParams) -> Tensor:
    """Transposed convolution, 2x2 kernel, stride 2: output is twice the input size."""
    _check4(x, "conv_transpose2d")
    w, b = p.weight, p.bias
    ci, o, kh, kw = w.shape
    if (kh, kw) != (2, 2) or p.stride != 2 or p.padding != 0:
        raise ConfigError(
            f"conv_transpose2d supports only a 2x2 kernel with stride 2 and no padding, "
            f"got {kh}x{kw} stride {p.stride} padding {p.padding}"
        )
    n, c, h, wd = x.shape
    if c != ci:
        raise DimensionError(f"conv_transpose2d input {x.shape} does not match weight {w.shape}")
    if b.shape != (o,):
        raise DimensionError(f"conv_transpose2d bias {b.shape} does not match weight {w.shape}")

    y = np.tensordot(x.data, w.data, axes=([1], [0]))  # (N, H, W, O, 2, 2)
    out = y.transpose(0, 3, 1, 4, 2, 5).reshape(n, o, 2 * h, 2 * wd) + b.data[None, :, None, None]

    def backward(g):
        gb = g.sum(axis=(0, 2, 3))
        g6 = g.reshape(n, o, h, 2, wd, 2)  # (N, O, H, i, W, j)
        gx = np.tensordot(g6, w.data, axes=([1, 3, 5], [1, 2, 3])).transpose(0, 3, 1, 2)
        gw = np.tensordot(x.data, g6, axes=([0, 2, 3], [0, 2, 4]))  # (C, O, i, j)
        return np.ascontiguousarray(gx), gw, gb

    return _result(np.ascontiguousarray(out), (x, w, b), backward)
