"""Dense float64 tensors with a recording tape for reverse-mode differentiation.

Every differentiable operation appends a node to the active :class:`Tape`
when at least one input requires a gradient. :func:`backward` then walks the
tape in reverse, which is already a valid topological order because nodes are
appended as they are created.

Gradients accumulate across backward calls; call :func:`zero_grad` (or
``Tensor.zero_grad``) between optimizer steps.
"""
from __future__ import annotations

import itertools
import threading
from contextlib import contextmanager
from typing import Callable, Iterable, Sequence

import numpy as np

DTYPE = np.float64

_ids = itertools.count(1)
_local = threading.local()


class ShapeError(ValueError):
    pass


class DomainError(ValueError):
    pass


class Tensor:
    """N-d array plus optional gradient.

    ``data`` is a C-contiguous float64 ndarray, so ``data.ravel()`` is the
    row-major flat buffer.
    """

    __slots__ = ("data", "grad", "requires_grad", "node_id", "_tape", "_leaf", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.require(data, DTYPE, "C")
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.node_id = next(_ids)
        self._tape: Tape | None = None
        self._leaf = True
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def is_leaf(self) -> bool:
        return self._leaf

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self, tape: "Tape | None" = None) -> None:
        backward(self, tape)

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}{tag})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return add(neg(self), other)

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __neg__(self):
        return neg(self)

    def __getitem__(self, index):
        return take(self, index)


class _Node:
    __slots__ = ("op", "out", "inputs", "backward")

    def __init__(self, op: str, out: Tensor, inputs: tuple, backward: Callable):
        self.op = op
        self.out = out
        self.inputs = inputs
        self.backward = backward


class Tape:
    """Ordered record of operations.

    Use as a context manager to make it the active tape for the current
    thread. A tape must not be shared between threads.
    """

    def __init__(self):
        self.nodes: list[_Node] = []
        self._index: dict[int, int] = {}

    def record(self, op: str, out: Tensor, inputs: tuple, backward_fn: Callable) -> None:
        self._index[out.node_id] = len(self.nodes)
        self.nodes.append(_Node(op, out, inputs, backward_fn))
        out._tape = self
        out._leaf = False

    def clear(self) -> None:
        self.nodes.clear()
        self._index.clear()

    def __len__(self) -> int:
        return len(self.nodes)

    def kink_signature(self) -> list[np.ndarray]:
        """Sign patterns at the non-smooth points of every recorded op.

        Two evaluations with equal signatures lie on the same smooth piece,
        so a finite difference between them is meaningful.
        """
        sig = []
        for node in self.nodes:
            if node.op in _KINKED:
                sig.append(_KINKED[node.op](node))
        return sig

    def __enter__(self) -> "Tape":
        _stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        _stack().pop()


def _stack() -> list:
    st = getattr(_local, "stack", None)
    if st is None:
        st = _local.stack = []
    return st


def current_tape() -> Tape:
    st = _stack()
    if not st:
        st.append(Tape())
    return st[-1]


@contextmanager
def no_grad():
    prev = getattr(_local, "disabled", False)
    _local.disabled = True
    try:
        yield
    finally:
        _local.disabled = prev


def _recording() -> bool:
    return not getattr(_local, "disabled", False)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(op: str, data: np.ndarray, inputs: tuple, backward_fn: Callable) -> Tensor:
    out = Tensor(data)
    if _recording() and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        current_tape().record(op, out, inputs, backward_fn)
    return out


def _same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shape mismatch {a.shape} vs {b.shape} (no broadcasting)")


# ---------------------------------------------------------------- elementwise

def add(a: Tensor, b) -> Tensor:
    if not isinstance(b, Tensor):
        c = float(b)
        return _result("add_scalar", a.data + c, (a,), lambda g: (g,))
    _same_shape(a, b, "add")
    return _result("add", a.data + b.data, (a, b), lambda g: (g, g))


def sub(a: Tensor, b) -> Tensor:
    if not isinstance(b, Tensor):
        return add(a, -float(b))
    _same_shape(a, b, "sub")
    return _result("sub", a.data - b.data, (a, b), lambda g: (g, -g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "mul")
    ad, bd = a.data, b.data
    return _result("mul", ad * bd, (a, b), lambda g: (g * bd, g * ad))


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return _result("scale", a.data * c, (a,), lambda g: (g * c,))


def neg(a: Tensor) -> Tensor:
    return _result("neg", -a.data, (a,), lambda g: (-g,))


def log(a: Tensor) -> Tensor:
    x = a.data
    if np.any(x <= 0):
        raise DomainError(f"log of non-positive value (min {x.min()!r})")
    return _result("log", np.log(x), (a,), lambda g: (g / x,))


def exp(a: Tensor) -> Tensor:
    y = np.exp(a.data)
    return _result("exp", y, (a,), lambda g: (g * y,))


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return _result("relu", np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,))


def leaky_relu(a: Tensor, slope: float = 0.2) -> Tensor:
    x = a.data
    factor = np.where(x > 0, 1.0, slope)
    return _result("leaky_relu", x * factor, (a,), lambda g: (g * factor,))


def tanh(a: Tensor) -> Tensor:
    y = np.tanh(a.data)
    return _result("tanh", y, (a,), lambda g: (g * (1.0 - y * y),))


def atanh(a: Tensor) -> Tensor:
    x = a.data
    if np.any(np.abs(x) >= 1):
        raise DomainError(f"atanh needs |x| < 1 (max |x| {np.abs(x).max()!r})")
    return _result("atanh", np.arctanh(x), (a,), lambda g: (g / (1.0 - x * x),))


def sigmoid(a: Tensor) -> Tensor:
    x = a.data
    # split by sign so exp never overflows
    e = np.exp(-np.abs(x))
    y = np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    return _result("sigmoid", y, (a,), lambda g: (g * y * (1.0 - y),))


def absolute(a: Tensor) -> Tensor:
    s = np.sign(a.data)
    return _result("abs", np.abs(a.data), (a,), lambda g: (g * s,))


def clamp_min(a: Tensor, floor: float) -> Tensor:
    keep = a.data >= floor
    return _result("clamp_min", np.maximum(a.data, floor), (a,), lambda g: (g * keep,))


_ELEMENTWISE = {
    "leaky_relu": leaky_relu,
    "relu": relu,
    "tanh": tanh,
    "atanh": atanh,
    "sigmoid": sigmoid,
    "add": add,
    "sub": sub,
    "mul": mul,
    "scale": scale,
    "log": log,
    "neg": neg,
    "abs": absolute,
    "exp": exp,
    "clamp_min": clamp_min,
}


def elementwise(kind: str, *args, **kwargs) -> Tensor:
    """Dispatch by name, e.g. ``elementwise("leaky_relu", x, slope=0.2)``."""
    try:
        fn = _ELEMENTWISE[kind]
    except KeyError:
        raise ValueError(f"unknown elementwise op {kind!r}") from None
    return fn(*args, **kwargs)


# ---------------------------------------------------------------- reductions

def sum_(a: Tensor) -> Tensor:
    if a.size == 0:
        raise ShapeError("sum of empty tensor")
    shape = a.shape
    return _result("sum", np.array(a.data.sum()), (a,),
                   lambda g: (np.full(shape, float(g)),))


def mean(a: Tensor) -> Tensor:
    if a.size == 0:
        raise ShapeError("mean of empty tensor")
    shape, n = a.shape, a.size
    return _result("mean", np.array(a.data.mean()), (a,),
                   lambda g: (np.full(shape, float(g) / n),))


def reduce(kind: str, a: Tensor) -> Tensor:
    if kind == "mean":
        return mean(a)
    if kind == "sum":
        return sum_(a)
    raise ValueError(f"unknown reduction {kind!r}")


def stack_scalars(items: Sequence[Tensor]) -> Tensor:
    """Join scalar tensors into a 1-d tensor."""
    items = tuple(items)
    data = np.array([t.item() for t in items])
    return _result("stack", data, items, lambda g: tuple(np.array(v) for v in g))


# ---------------------------------------------------------------- structure

def take(a: Tensor, index) -> Tensor:
    """Basic (slice/int) indexing; gradient scatters back into zeros."""
    out = a.data[index]
    shape = a.shape

    def bw(g):
        dx = np.zeros(shape)
        dx[index] = g
        return (dx,)

    return _result("take", np.array(out), (a,), bw)


def concat(tensors: Sequence[Tensor], axis: int = 1) -> Tensor:
    tensors = tuple(tensors)
    data = np.concatenate([t.data for t in tensors], axis=axis)
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]
    return _result("concat", data, tensors,
                   lambda g: tuple(np.split(g, bounds, axis=axis)))


def crop2d(a: Tensor, offsets: Sequence[tuple[int, int]], size: int) -> Tensor:
    """Per-sample ``size`` x ``size`` window of an [N,C,H,W] tensor."""
    n, c, h, w = a.shape
    if len(offsets) != n:
        raise ShapeError(f"crop2d: {len(offsets)} offsets for batch of {n}")
    if size > h or size > w:
        raise ShapeError(f"crop2d: part size {size} exceeds image {h}x{w}")
    out = np.empty((n, c, size, size))
    for i, (r, col) in enumerate(offsets):
        if not (0 <= r <= h - size and 0 <= col <= w - size):
            raise ShapeError(f"crop2d: offset {(r, col)} out of range for {h}x{w}")
        out[i] = a.data[i, :, r:r + size, col:col + size]
    offsets = [tuple(o) for o in offsets]

    def bw(g):
        dx = np.zeros((n, c, h, w))
        for i, (r, col) in enumerate(offsets):
            dx[i, :, r:r + size, col:col + size] = g[i]
        return (dx,)

    return _result("crop2d", out, (a,), bw)


# ---------------------------------------------------------------- convolution

def _im2col(xp: np.ndarray, kh: int, kw: int, stride: int, ho: int, wo: int) -> np.ndarray:
    """[N,C,Hp,Wp] -> [C,kh,kw,N,ho,wo] (copy); batch folds into the GEMM columns."""
    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))
    win = win[:, :, : stride * (ho - 1) + 1 : stride, : stride * (wo - 1) + 1 : stride]
    return np.ascontiguousarray(win.transpose(1, 4, 5, 0, 2, 3))


def _col2im(cols: np.ndarray, hp: int, wp: int, stride: int) -> np.ndarray:
    """Adjoint of _im2col: [C,kh,kw,N,ho,wo] -> [N,C,hp,wp]."""
    c, kh, kw, n, ho, wo = cols.shape
    out = np.zeros((n, c, hp, wp))
    view = cols.transpose(1, 2, 3, 0, 4, 5)
    for i in range(kh):
        for j in range(kw):
            out[:, :, i : i + stride * (ho - 1) + 1 : stride,
                j : j + stride * (wo - 1) + 1 : stride] += view[i, j]
    return out


def _pad(x: np.ndarray, p: int) -> np.ndarray:
    if p == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))


def _to_nchw(y: np.ndarray, n: int, ho: int, wo: int) -> np.ndarray:
    """[..., N*ho*wo] with channels leading -> contiguous [N,C,ho,wo]."""
    return np.ascontiguousarray(y.reshape(-1, n, ho, wo).transpose(1, 0, 2, 3))


def _to_cn(g: np.ndarray) -> np.ndarray:
    """[N,C,H,W] -> contiguous [C, N*H*W]."""
    n, c, h, w = g.shape
    return np.ascontiguousarray(g.transpose(1, 0, 2, 3)).reshape(c, n * h * w)


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None,
           stride: int = 1, padding: int = 0, groups: int = 1) -> Tensor:
    """Grouped 2-d cross-correlation, zero padding.

    weight is [Cout, Cin/groups, kH, kW]. Patches are gathered once
    (im2col) and every product is a single GEMM per group; the weight and
    input gradients reuse the gathered patches.
    """
    if x.ndim != 4:
        raise ShapeError(f"conv2d: input must be [N,C,H,W], got {x.shape}")
    n, cin, h, w = x.shape
    cout, cg, kh, kw = weight.shape
    if cin % groups:
        raise ShapeError(f"conv2d: input channels {cin} not divisible by groups={groups}")
    if cout % groups:
        raise ShapeError(f"conv2d: output channels {cout} not divisible by groups={groups}")
    if cg != cin // groups:
        raise ShapeError(f"conv2d: weight dim 1 is {cg}, expected Cin/groups={cin // groups}")
    if bias is not None and bias.shape != (cout,):
        raise ShapeError(f"conv2d: bias shape {bias.shape}, expected ({cout},)")
    hp, wp = h + 2 * padding, w + 2 * padding
    if kh > hp or kw > wp:
        raise ShapeError(f"conv2d: kernel {kh}x{kw} larger than padded input {hp}x{wp}")
    ho = (hp - kh) // stride + 1
    wo = (wp - kw) // stride + 1
    og = cout // groups
    k = cg * kh * kw
    m = n * ho * wo

    cols = _im2col(_pad(x.data, padding), kh, kw, stride, ho, wo).reshape(groups, k, m)
    wmat = weight.data.reshape(groups, og, k)
    y = np.matmul(wmat, cols)
    if bias is not None:
        y += bias.data.reshape(groups, og, 1)
    out = _to_nchw(y, n, ho, wo)

    inputs = (x, weight) if bias is None else (x, weight, bias)

    def bw(g):
        gm = _to_cn(g).reshape(groups, og, m)
        dx = dw = db = None
        if x.requires_grad and groups == 1 and stride == 1 and kh == kw \
                and 2 * padding == kh - 1 and cout < cin:
            # "same" stride-1 conv: input grad is a correlation with the flipped kernel
            wf = weight.data[:, :, ::-1, ::-1].transpose(1, 0, 2, 3).reshape(cin, -1)
            gcols = _im2col(_pad(g, padding), kh, kw, 1, h, w).reshape(-1, m)
            dx = _to_nchw(wf @ gcols, n, h, w)
        elif x.requires_grad:
            dcols = np.matmul(wmat.transpose(0, 2, 1), gm).reshape(cin, kh, kw, n, ho, wo)
            dxp = _col2im(dcols, hp, wp, stride)
            dx = dxp[:, :, padding:padding + h, padding:padding + w] if padding else dxp
        if weight.requires_grad:
            dw = np.matmul(gm, cols.transpose(0, 2, 1)).reshape(weight.shape)
        if bias is not None and bias.requires_grad:
            db = gm.sum(axis=2).reshape(cout)
        return (dx, dw) if bias is None else (dx, dw, db)

    return _result("conv2d", out, inputs, bw)


def conv_transpose2d(x: Tensor, weight: Tensor, bias: Tensor | None = None,
                     stride: int = 2, padding: int = 1, output_padding: int = 1) -> Tensor:
    """Transposed convolution (adjoint of conv2d), weight [Cin, Cout, kH, kW]."""
    if x.ndim != 4:
        raise ShapeError(f"conv_transpose2d: input must be [N,C,H,W], got {x.shape}")
    n, cin, h, w = x.shape
    if weight.shape[0] != cin:
        raise ShapeError(f"conv_transpose2d: weight dim 0 is {weight.shape[0]}, input has {cin} channels")
    _, cout, kh, kw = weight.shape
    if bias is not None and bias.shape != (cout,):
        raise ShapeError(f"conv_transpose2d: bias shape {bias.shape}, expected ({cout},)")
    if output_padding >= stride:
        raise ShapeError("conv_transpose2d: output_padding must be < stride")
    ho = (h - 1) * stride - 2 * padding + kh + output_padding
    wo = (w - 1) * stride - 2 * padding + kw + output_padding
    hc, wc = ho + 2 * padding, wo + 2 * padding
    wmat = weight.data.reshape(cin, cout * kh * kw)
    xm = _to_cn(x.data)
    cols = np.matmul(wmat.T, xm).reshape(cout, kh, kw, n, h, w)
    canvas = _col2im(cols, hc, wc, stride)
    out = np.ascontiguousarray(canvas[:, :, padding:padding + ho, padding:padding + wo])
    if bias is not None:
        out += bias.data[None, :, None, None]

    inputs = (x, weight) if bias is None else (x, weight, bias)

    def bw(g):
        gcols = _im2col(_pad(g, padding), kh, kw, stride, h, w).reshape(cout * kh * kw, n * h * w)
        dx = dw = db = None
        if x.requires_grad:
            dx = _to_nchw(wmat @ gcols, n, h, w)
        if weight.requires_grad:
            dw = (xm @ gcols.T).reshape(weight.shape)
        if bias is not None and bias.requires_grad:
            db = g.sum(axis=(0, 2, 3))
        return (dx, dw) if bias is None else (dx, dw, db)

    return _result("conv_transpose2d", out, inputs, bw)


def instance_norm(x: Tensor, eps: float = 1e-6) -> Tensor:
    """Per-(sample, channel) standardisation over H, W; no affine terms."""
    if x.ndim != 4:
        raise ShapeError(f"instance_norm: input must be [N,C,H,W], got {x.shape}")
    m = x.shape[2] * x.shape[3]
    if m < 2:
        raise ShapeError(f"instance_norm: spatial size {x.shape[2]}x{x.shape[3]} is degenerate")
    mu = x.data.mean(axis=(2, 3), keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=(2, 3), keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv

    def bw(g):
        gm = g.mean(axis=(2, 3), keepdims=True)
        gx = (g * xhat).mean(axis=(2, 3), keepdims=True)
        return (inv * (g - gm - xhat * gx),)

    return _result("instance_norm", xhat, (x,), bw)


# ---------------------------------------------------------------- backward

_KINKED = {
    "relu": lambda nd: nd.inputs[0].data > 0,
    "leaky_relu": lambda nd: nd.inputs[0].data > 0,
    "abs": lambda nd: np.sign(nd.inputs[0].data),
    "clamp_min": lambda nd: nd.out.data == nd.inputs[0].data,
}


def backward(loss: Tensor, tape: Tape | None = None) -> None:
    """Accumulate d(loss)/d(leaf) into ``leaf.grad`` for every leaf on the tape.

    Leaves that require grad but do not influence ``loss`` get a zero grad.
    """
    if loss.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    tape = tape or loss._tape
    if tape is None or loss.node_id not in tape._index:
        raise ValueError("loss is not recorded on the tape (nothing requires grad?)")
    stop = tape._index[loss.node_id]
    pending = {loss.node_id: np.ones(loss.shape)}
    leaves: dict[int, Tensor] = {}
    for node in reversed(tape.nodes[: stop + 1]):
        for t in node.inputs:
            if t._leaf and t.requires_grad:
                leaves[t.node_id] = t
        g = pending.pop(node.out.node_id, None)
        if g is None:
            continue
        for t, gi in zip(node.inputs, node.backward(g)):
            if gi is None or not t.requires_grad:
                continue
            if t._leaf:
                t.grad = gi.copy() if t.grad is None else t.grad + gi
            else:
                prev = pending.get(t.node_id)
                pending[t.node_id] = gi if prev is None else prev + gi
    for t in leaves.values():
        if t.grad is None:
            t.grad = np.zeros(t.shape)


def zero_grad(params: Iterable[Tensor]) -> None:
    for p in params:
        p.grad = None


# ---------------------------------------------------------------- grad check

def grad_check_details(f: Callable[..., Tensor], point: Tensor | Sequence[Tensor],
                       h: float = 1e-4, floor: float = 1e-6,
                       max_coords: int | None = None, seed: int = 0) -> dict:
    """Compare reverse-mode gradients of scalar ``f(*point)`` with central differences.

    Relative error per coordinate is ``|a - n| / max(|a|, |n|, floor)``.
    Coordinates whose +h/-h evaluations fall on different sides of a kink
    (relu, leaky_relu, abs, clamp) are skipped and counted. ``max_coords``
    samples that many coordinates per tensor instead of all of them.
    """
    if h <= 0:
        raise ValueError("h must be positive")
    pts = [point] if isinstance(point, Tensor) else list(point)
    for p in pts:
        p.requires_grad = True
        p.grad = None
    with Tape() as tape:
        loss = f(*pts)
    backward(loss, tape)
    analytic = [p.grad.copy() for p in pts]

    def evaluate():
        with Tape() as t:
            val = f(*pts).item()
        return val, t.kink_signature()

    _, base_sig = evaluate()
    rng = np.random.default_rng(seed)
    worst, checked, skipped = 0.0, 0, 0
    for p, a in zip(pts, analytic):
        flat = p.data.reshape(-1)
        coords = np.arange(flat.size)
        if max_coords is not None and flat.size > max_coords:
            coords = np.sort(rng.choice(flat.size, max_coords, replace=False))
        for i in coords:
            old = flat[i]
            flat[i] = old + h
            fp, sp = evaluate()
            flat[i] = old - h
            fm, sm = evaluate()
            flat[i] = old
            if not (_sig_equal(sp, base_sig) and _sig_equal(sm, base_sig)):
                skipped += 1
                continue
            num = (fp - fm) / (2 * h)
            an = a.reshape(-1)[i]
            rel = abs(an - num) / max(abs(an), abs(num), floor)
            worst = max(worst, rel)
            checked += 1
    return {"max_relative_error": worst, "checked": checked, "skipped": skipped}


def grad_check(f: Callable[..., Tensor], point: Tensor | Sequence[Tensor], h: float = 1e-4,
               **kwargs) -> float:
    """Largest relative error between analytic and central-difference gradients."""
    return grad_check_details(f, point, h, **kwargs)["max_relative_error"]


def _sig_equal(a: list[np.ndarray], b: list[np.ndarray]) -> bool:
    return len(a) == len(b) and all(np.array_equal(x, y) for x, y in zip(a, b))
