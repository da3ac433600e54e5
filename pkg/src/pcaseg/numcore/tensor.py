"""Dense float64 tensors with a define-by-run tape for reverse-mode gradients.

Operations record themselves on the innermost active :class:`Tape` only when at
least one input requires a gradient. Running a forward pass outside any tape
therefore behaves like inference mode: nothing is recorded and outputs are
plain values.
"""

from __future__ import annotations

from typing import Callable, Iterable, Optional, Sequence, Tuple, Union

import numpy as np

MAX_AXES = 4
LOG_FLOOR = 1e-12

ArrayLike = Union[np.ndarray, float, int, Sequence]


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible with an operation."""


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "name")

    def __init__(self, data: ArrayLike, requires_grad: bool = False, name: Optional[str] = None):
        arr = np.array(data, dtype=np.float64)
        if arr.ndim > MAX_AXES:
            raise ShapeError(f"at most {MAX_AXES} axes supported, got shape {arr.shape}")
        self.data = arr
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self.name = name

    @classmethod
    def _wrap(cls, arr: np.ndarray) -> "Tensor":
        # no copy; used for freshly computed op outputs
        t = cls.__new__(cls)
        t.data = arr
        t.grad = None
        t.requires_grad = False
        t.name = None
        return t

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single element, shape is {self.shape}")
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def detach(self) -> "Tensor":
        return Tensor._wrap(self.data)

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_as_tensor(other), self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("division is only supported by python scalars")
        return mul(self, 1.0 / float(other))


class _Node:
    __slots__ = ("out", "inputs", "vjp", "op")

    def __init__(self, out: Tensor, inputs: Tuple[Tensor, ...], vjp: Callable, op: str):
        self.out = out
        self.inputs = inputs
        self.vjp = vjp
        self.op = op


_TAPES: list = []


class Tape:
    """Ordered record of executed primitive ops.

    Use as a context manager around the forward pass, then call
    :func:`backward` with the same tape.
    """

    def __init__(self):
        self.nodes: list = []

    def __enter__(self) -> "Tape":
        _TAPES.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _TAPES.remove(self)

    def __len__(self) -> int:
        return len(self.nodes)

    @property
    def ops(self) -> list:
        return [n.op for n in self.nodes]


def active_tape() -> Optional[Tape]:
    return _TAPES[-1] if _TAPES else None


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _record(op: str, out_arr: np.ndarray, inputs: Tuple[Tensor, ...], vjp: Callable) -> Tensor:
    out = Tensor._wrap(out_arr)
    tape = active_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        tape.nodes.append(_Node(out, inputs, vjp, op))
    return out


def backward(loss: Tensor, tape: Tape) -> None:
    """Populate ``.grad`` on every leaf reachable from ``loss`` through ``tape``.

    Leaf gradients are overwritten, not accumulated across calls.
    """
    if loss.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    produced = {id(n.out) for n in tape.nodes}
    grads = {id(loss): np.ones_like(loss.data)}
    leaves = {}
    for node in reversed(tape.nodes):
        g = grads.pop(id(node.out), None)
        if g is None:
            continue
        for inp, gi in zip(node.inputs, node.vjp(g)):
            if gi is None or not inp.requires_grad:
                continue
            key = id(inp)
            if key in grads:
                grads[key] = grads[key] + gi
            else:
                grads[key] = gi
                if key not in produced:
                    leaves[key] = inp
    if id(loss) not in produced and loss.requires_grad:
        leaves[id(loss)] = loss
    for key, leaf in leaves.items():
        leaf.grad = np.array(grads[key], dtype=np.float64).reshape(leaf.shape)


def _unbroadcast(g: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _check_broadcast(a: Tensor, b: Tensor, op: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: cannot broadcast {a.shape} with {b.shape}") from None


# elementwise arithmetic

def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast(a, b, "add")
    sa, sb = a.shape, b.shape
    return _record("add", a.data + b.data, (a, b),
                   lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast(a, b, "sub")
    sa, sb = a.shape, b.shape
    return _record("sub", a.data - b.data, (a, b),
                   lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast(a, b, "mul")
    ad, bd = a.data, b.data
    return _record("mul", ad * bd, (a, b),
                   lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)))


def div(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast(a, b, "div")
    ad, bd = a.data, b.data
    return _record("div", ad / bd, (a, b),
                   lambda g: (_unbroadcast(g / bd, ad.shape), _unbroadcast(-g * ad / (bd * bd), bd.shape)))


def square(x: Tensor) -> Tensor:
    xd = x.data
    return _record("square", xd * xd, (x,), lambda g: (2.0 * xd * g,))


def log(x: Tensor, floor: float = LOG_FLOOR) -> Tensor:
    """Natural log with inputs clamped from below at ``floor``."""
    xd = x.data
    safe = np.maximum(xd, floor)
    live = xd >= floor
    return _record("log", np.log(safe), (x,), lambda g: (np.where(live, g / safe, 0.0),))


# reductions

def sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    shape = x.shape
    out = np.sum(x.data, axis=axis, keepdims=keepdims)

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _record("sum", np.asarray(out, dtype=np.float64), (x,), vjp)


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        n = x.size
    else:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        n = int(np.prod([x.shape[a] for a in axes]))
    if n == 0:
        raise ShapeError("mean over an empty extent")
    return mul(sum(x, axis=axis, keepdims=keepdims), 1.0 / n)


# activations

def leaky_relu(x: Tensor, alpha: float = 0.2) -> Tensor:
    if not 0.0 <= alpha < 1.0:
        raise ValueError(f"alpha must be in [0, 1), got {alpha}")
    xd = x.data
    pos = xd >= 0
    slope = np.where(pos, 1.0, alpha)
    return _record("leaky_relu", xd * slope, (x,), lambda g: (g * slope,))


def relu(x: Tensor) -> Tensor:
    return leaky_relu(x, 0.0)


def sigmoid(x: Tensor) -> Tensor:
    xd = x.data
    e = np.exp(-np.abs(xd))
    out = np.where(xd >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    return _record("sigmoid", out, (x,), lambda g: (g * out * (1.0 - out),))


def softmax_channels(x: Tensor) -> Tensor:
    """Softmax over axis 1 of a ``[B, C, H, W]`` tensor."""
    if x.ndim != 4 or x.shape[1] < 2:
        raise ShapeError(f"softmax_channels needs [B,C>=2,H,W], got {x.shape}")
    z = x.data - x.data.max(axis=1, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=1, keepdims=True)

    def vjp(g):
        return (p * (g - (g * p).sum(axis=1, keepdims=True)),)

    return _record("softmax_channels", p, (x,), vjp)


# structural ops

def concat(tensors: Sequence[Tensor], axis: int = 1) -> Tensor:
    tensors = tuple(tensors)
    sizes = [t.shape[axis] for t in tensors]
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as e:
        raise ShapeError(f"concat: {e}") from None
    bounds = np.cumsum(sizes)[:-1]

    def vjp(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _record("concat", out, tensors, vjp)


def take(x: Tensor, indices: Iterable[int], axis: int = 0) -> Tensor:
    """Select entries along ``axis`` (used to slice batches)."""
    idx = np.asarray(list(indices), dtype=np.intp)
    shape = x.shape

    def vjp(g):
        full = np.zeros(shape)
        np.add.at(full, (slice(None),) * axis + (idx,), g)
        return (full,)

    return _record("take", np.take(x.data, idx, axis=axis), (x,), vjp)


def conv_output_size(n: int, kernel: int, stride: int, pad: int) -> int:
    return (n + 2 * pad - kernel) // stride + 1


IM2COL_MAX_ROWS = 16


def _conv_s1(X: np.ndarray, xshape, wk: np.ndarray) -> np.ndarray:
    """Unpadded stride-1 convolution as K*K GEMMs over shifted views.

    ``X`` is the input in channel-major layout flattened to (C, B*Hp*Wp);
    each kernel tap multiplies a column-shifted view, so no im2col buffer is
    materialised except for very thin inputs, where one stacked GEMM is
    cheaper. Returns the output in layout (Cout, B, Hp, Wp); only the
    leading ``Ho x Wo`` corner of each plane is valid.
    """
    B, C, Hp, Wp = xshape
    cout, _, K, _ = wk.shape
    N = B * Hp * Wp
    L = N - (K - 1) * Wp - (K - 1)
    Y = np.empty((cout, N))
    Y[:, L:] = 0.0
    offsets = [i * Wp + j for i in range(K) for j in range(K)]
    if K * K * C <= IM2COL_MAX_ROWS:
        cols = np.concatenate([X[:, o:o + L] for o in offsets], axis=0)
        np.matmul(wk.transpose(0, 2, 3, 1).reshape(cout, K * K * C), cols, out=Y[:, :L])
        return Y.reshape(cout, B, Hp, Wp)
    taps = np.ascontiguousarray(wk.transpose(2, 3, 0, 1)).reshape(K * K, cout, C)
    np.matmul(taps[0], X[:, :L], out=Y[:, :L])
    for t in range(1, K * K):
        Y[:, :L] += taps[t] @ X[:, offsets[t]:offsets[t] + L]
    return Y.reshape(cout, B, Hp, Wp)


def _conv_s1_grads(g: np.ndarray, X: np.ndarray, wk: np.ndarray, xshape, need_x: bool, need_w: bool):
    """Gradients of :func:`_conv_s1`; ``g`` is ``[B, Cout, Ho, Wo]``, input grad comes back as (C, N)."""
    B, C, Hp, Wp = xshape
    cout, _, K, _ = wk.shape
    Ho, Wo = g.shape[2:]
    N = B * Hp * Wp
    L = N - (K - 1) * Wp - (K - 1)
    G = np.zeros((cout, B, Hp, Wp))
    G[:, :, :Ho, :Wo] = g.transpose(1, 0, 2, 3)
    G = G.reshape(cout, N)[:, :L]
    offsets = [i * Wp + j for i in range(K) for j in range(K)]
    gw = gX = None
    if need_w:
        gw = np.empty((K * K, cout, C))
        for t, o in enumerate(offsets):
            np.matmul(G, X[:, o:o + L].T, out=gw[t])
        gw = gw.reshape(K, K, cout, C)
    if need_x:
        # one stacked GEMM for all taps, then shift-add each tap's rows
        P = wk.transpose(2, 3, 1, 0).reshape(K * K * C, cout) @ G
        gX = np.zeros((C, N))
        for t, o in enumerate(offsets):
            gX[:, o:o + L] += P[t * C:(t + 1) * C]
    return gX, (gw.transpose(2, 3, 0, 1) if need_w else None)


def conv2d(x: Tensor, kernel: Tensor, bias: Optional[Tensor] = None,
           stride: int = 1, pad: int = 0) -> Tensor:
    """2-D cross-correlation of ``[B,Cin,H,W]`` with ``[Cout,Cin,K,K]``.

    Strided convolutions are rewritten as stride-1 convolutions over a
    space-to-depth view of the input with a regrouped, zero-extended kernel.
    """
    if x.ndim != 4 or kernel.ndim != 4:
        raise ShapeError(f"conv2d needs 4-axis operands, got {x.shape} and {kernel.shape}")
    B, cin, H, W = x.shape
    cout, kcin, K, K2 = kernel.shape
    if kcin != cin:
        raise ShapeError(f"conv2d: input has {cin} channels, kernel expects {kcin}")
    if K != K2 or K < 1 or stride < 1 or pad < 0:
        raise ShapeError(f"conv2d: bad geometry K={K}x{K2} stride={stride} pad={pad}")
    if H + 2 * pad < K or W + 2 * pad < K:
        raise ShapeError(f"conv2d: input {H}x{W} (pad {pad}) smaller than kernel {K}")
    if bias is not None and bias.shape != (cout,):
        raise ShapeError(f"conv2d: bias shape {bias.shape} != ({cout},)")

    s = stride
    Ho = conv_output_size(H, K, s, pad)
    Wo = conv_output_size(W, K, s, pad)
    Kq = -(-K // s)  # kernel taps per phase
    # pad so every phase plane has Ho + Kq - 1 rows/cols
    Hp, Wp = s * (Ho + Kq - 1), s * (Wo + Kq - 1)
    h_in, w_in = min(H, Hp - pad), min(W, Wp - pad)
    # padded input, channel-major: (Cin, B, Hp, Wp)
    xp = np.zeros((cin, B, Hp, Wp))
    xp[:, :, pad:pad + h_in, pad:pad + w_in] = x.data[:, :, :h_in, :w_in].transpose(1, 0, 2, 3)
    Hq, Wq = Hp // s, Wp // s
    wdata = kernel.data
    if s > 1:
        wk = np.zeros((cout, cin, Kq * s, Kq * s))
        wk[:, :, :K, :K] = wdata
        wk = wk.reshape(cout, cin, Kq, s, Kq, s).transpose(0, 1, 3, 5, 2, 4).reshape(cout, cin * s * s, Kq, Kq)
        X = xp.reshape(cin, B, Hq, s, Wq, s).transpose(0, 3, 5, 1, 2, 4).reshape(cin * s * s, B * Hq * Wq)
    else:
        wk, X = wdata, xp.reshape(cin, B * Hp * Wp)
    qshape = (B, cin * s * s, Hq, Wq)
    Y = _conv_s1(X, qshape, wk)[:, :, :Ho, :Wo]
    if bias is not None:
        Y = Y + bias.data[:, None, None, None]
    out = np.ascontiguousarray(Y.transpose(1, 0, 2, 3))

    inputs = (x, kernel) if bias is None else (x, kernel, bias)

    def vjp(g):
        gX, gwk = _conv_s1_grads(g, X, wk, qshape, x.requires_grad, kernel.requires_grad)
        gx = gk = None
        if gwk is not None:
            if s > 1:
                gwk = gwk.reshape(cout, cin, s, s, Kq, Kq).transpose(0, 1, 4, 2, 5, 3).reshape(
                    cout, cin, Kq * s, Kq * s)
            gk = np.ascontiguousarray(gwk[:, :, :K, :K])
        if gX is not None:
            if s > 1:
                gX = gX.reshape(cin, s, s, B, Hq, Wq).transpose(0, 3, 4, 1, 5, 2)
            gp = gX.reshape(cin, B, Hp, Wp)
            gx = np.zeros((B, cin, H, W))
            gx[:, :, :h_in, :w_in] = gp[:, :, pad:pad + h_in, pad:pad + w_in].transpose(1, 0, 2, 3)
        if bias is None:
            return gx, gk
        return gx, gk, g.sum(axis=(0, 2, 3))

    return _record("conv2d", out, inputs, vjp)


def _interp_matrix(n_in: int, n_out: int) -> np.ndarray:
    m = np.zeros((n_out, n_in))
    if n_in == 1:
        m[:, 0] = 1.0
        return m
    src = np.arange(n_out) * (n_in - 1) / (n_out - 1)
    lo = np.minimum(np.floor(src).astype(int), n_in - 2)
    frac = src - lo
    rows = np.arange(n_out)
    m[rows, lo] = 1.0 - frac
    m[rows, lo + 1] += frac
    return m


def bilinear_upsample(x: Tensor, factor: int) -> Tensor:
    """Corner-aligned bilinear upsampling by an integer factor."""
    if factor < 2:
        raise ValueError(f"factor must be >= 2, got {factor}")
    if x.ndim != 4:
        raise ShapeError(f"bilinear_upsample needs [B,C,H,W], got {x.shape}")
    _, _, H, W = x.shape
    mh = _interp_matrix(H, H * factor)
    mw = _interp_matrix(W, W * factor)
    out = mh @ x.data @ mw.T
    return _record("bilinear_upsample", out, (x,), lambda g: (mh.T @ g @ mw,))


def max_pool2d(x: Tensor, size: int = 2) -> Tensor:
    """Non-overlapping max pooling; ties route the gradient to the first max."""
    if x.ndim != 4:
        raise ShapeError(f"max_pool2d needs [B,C,H,W], got {x.shape}")
    B, C, H, W = x.shape
    if H % size or W % size:
        raise ShapeError(f"max_pool2d: {H}x{W} not divisible by {size}")
    h, w = H // size, W // size
    blocks = x.data.reshape(B, C, h, size, w, size).transpose(0, 1, 2, 4, 3, 5).reshape(B, C, h, w, size * size)
    arg = blocks.argmax(axis=-1)
    out = np.take_along_axis(blocks, arg[..., None], axis=-1)[..., 0]

    def vjp(g):
        gb = np.zeros((B, C, h, w, size * size))
        np.put_along_axis(gb, arg[..., None], g[..., None], axis=-1)
        return (gb.reshape(B, C, h, w, size, size).transpose(0, 1, 2, 4, 3, 5).reshape(B, C, H, W),)

    return _record("max_pool2d", out, (x,), vjp)
