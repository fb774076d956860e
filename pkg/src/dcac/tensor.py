"""Dense float64 tensors with tape-based reverse-mode differentiation.

Only the operations the DC-AC network needs are provided. Each op computes
its forward value with numpy and, when any input requires a gradient,
records a node holding the local backward rule. ``backward`` replays the
recorded nodes in exact reverse recording order.

Broadcasting is deliberately absent: ``add``/``mul`` demand identical shapes
and the only broadcast is the per-channel ``scale``.
"""

from __future__ import annotations

import contextlib
import itertools
import threading
import weakref
from typing import Callable, Iterator, Optional, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import expit

from .errors import ShapeError

__all__ = [
    "Tensor",
    "Tape",
    "no_grad",
    "is_grad_enabled",
    "record",
    "backward",
    "conv2d",
    "maxpool2d",
    "upsample_nearest",
    "pointwise",
    "add",
    "mul",
    "relu",
    "sigmoid",
    "scale",
    "global_avg_pool",
    "linear",
    "batch_norm",
    "pad2d",
    "crop2d",
    "concat_channels",
    "sum",
    "mean",
    "bce_with_logits",
]

MAX_RANK = 4

_ids = itertools.count()
_state = threading.local()


def is_grad_enabled() -> bool:
    return getattr(_state, "grad_enabled", True)


@contextlib.contextmanager
def no_grad():
    """Disable recording inside the block (inference, finite differences)."""
    prev = is_grad_enabled()
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = prev


class _Node:
    __slots__ = ("id", "op", "inputs", "output", "rule")

    def __init__(self, op, inputs, rule):
        self.id = next(_ids)
        self.op = op
        self.inputs = inputs
        self.rule = rule
        self.output = None

    def __repr__(self):
        return f"<{self.op} #{self.id}>"


class Tensor:
    """An immutable array value plus an optional accumulated gradient."""

    __slots__ = ("data", "requires_grad", "grad", "name", "_node", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None):
        arr = np.asarray(data, dtype=np.float64, order="C")
        if arr.ndim > MAX_RANK:
            raise ShapeError(f"rank {arr.ndim} exceeds {MAX_RANK}", dim="rank")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[Tensor] = None
        self.name = name
        self._node: Optional[_Node] = None

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self):
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data, name=self.name)

    def backward(self):
        backward(self)

    def __add__(self, other):
        return add(self, other)

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, other)

    __rmul__ = __mul__

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        label = f" {self.name!r}" if self.name else ""
        return f"Tensor{label}(shape={self.shape}{flag})"


def record(op: str, data: np.ndarray, inputs: Sequence[Tensor],
           rule: Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]) -> Tensor:
    """Wrap ``data`` as the output of ``op`` and register its backward rule.

    ``rule`` maps the output gradient to one gradient (or None) per input.
    Exposed so tests can register custom, even deliberately wrong, rules.
    """
    out = Tensor(data)
    if is_grad_enabled() and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        node = _Node(op, tuple(inputs), rule)
        node.output = weakref.ref(out)
        out._node = node
    return out


class Tape:
    """Recorded operations reachable from one output, in recording order."""

    def __init__(self, nodes: list):
        self.nodes = nodes

    @classmethod
    def from_output(cls, out: Tensor) -> "Tape":
        seen = set()
        nodes = []
        stack = [out]
        while stack:
            t = stack.pop()
            node = t._node
            if node is None or node.id in seen:
                continue
            seen.add(node.id)
            nodes.append(node)
            stack.extend(node.inputs)
        nodes.sort(key=lambda n: n.id)
        return cls(nodes)

    def __iter__(self) -> Iterator[_Node]:
        return iter(self.nodes)

    def __reversed__(self):
        return reversed(self.nodes)

    def __len__(self):
        return len(self.nodes)

    def is_topological(self) -> bool:
        position = {n.id: i for i, n in enumerate(self.nodes)}
        for i, n in enumerate(self.nodes):
            for t in n.inputs:
                if t._node is not None and position.get(t._node.id, -1) >= i:
                    return False
        return True


def backward(loss: Tensor):
    """Populate ``grad`` on every requires_grad tensor reachable from ``loss``.

    Gradients accumulate across calls until ``zero_grad``.
    """
    if loss.ndim != 0:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}", dim="rank")
    if not loss.requires_grad:
        return
    if loss._node is None:
        _accumulate(loss, np.ones(()))
        return
    tape = Tape.from_output(loss)
    pending = {id(loss): np.ones((), dtype=np.float64)}
    for node in reversed(tape):
        out = node.output()
        g = pending.pop(id(out), None) if out is not None else None
        if g is None:
            continue
        _accumulate(out, g)
        grads = node.rule(g)
        for inp, gi in zip(node.inputs, grads):
            if gi is None or not inp.requires_grad:
                continue
            if gi.shape != inp.shape:
                raise ShapeError(
                    f"{node.op} backward produced {gi.shape} for input {inp.shape}", dim="grad")
            key = id(inp)
            if key in pending:
                pending[key] = pending[key] + gi
            elif inp._node is None:
                _accumulate(inp, gi)
            else:
                pending[key] = gi


def _accumulate(t: Tensor, g: np.ndarray):
    if t.grad is None:
        t.grad = Tensor(np.array(g, dtype=np.float64, copy=True))
    else:
        t.grad = Tensor(t.grad.data + g)


def _check_rank(x: Tensor, rank: int, op: str):
    if x.ndim != rank:
        raise ShapeError(f"{op} expects rank {rank}, got shape {x.shape}", dim="rank")


def _pair(v) -> tuple:
    if isinstance(v, (tuple, list)):
        if len(v) != 2:
            raise ValueError(f"expected an int pair, got {v!r}")
        return int(v[0]), int(v[1])
    return int(v), int(v)


# ---------------------------------------------------------------- convolution

def _windows(xp: np.ndarray, kh: int, kw: int, sh: int, sw: int, ho: int, wo: int):
    w = sliding_window_view(xp, (kh, kw), axis=(2, 3))
    return w[:, :, : sh * (ho - 1) + 1 : sh, : sw * (wo - 1) + 1 : sw]


def conv2d(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None, stride=1,
           padding=0, groups: int = 1) -> Tensor:
    """Grouped 2-D cross-correlation with zero padding."""
    _check_rank(x, 4, "conv2d input")
    _check_rank(weight, 4, "conv2d weight")
    sh, sw = _pair(stride)
    ph, pw = _pair(padding)
    if sh < 1 or sw < 1:
        raise ValueError("stride must be positive")
    if ph < 0 or pw < 0:
        raise ValueError("padding must be non-negative")
    n, cin, h, w = x.shape
    cout, cin_g, kh, kw = weight.shape
    if groups < 1 or cin % groups:
        raise ShapeError(f"groups={groups} does not divide {cin} input channels", dim="groups")
    if cout % groups:
        raise ShapeError(f"groups={groups} does not divide {cout} output channels", dim="groups")
    if cin_g * groups != cin:
        raise ShapeError(
            f"weight expects {cin_g * groups} input channels, input has {cin}", dim="channels")
    if h + 2 * ph < kh:
        raise ShapeError(f"padded height {h + 2 * ph} smaller than kernel {kh}", dim="height")
    if w + 2 * pw < kw:
        raise ShapeError(f"padded width {w + 2 * pw} smaller than kernel {kw}", dim="width")
    if bias is not None and bias.shape != (cout,):
        raise ShapeError(f"bias shape {bias.shape} != ({cout},)", dim="bias")

    g = groups
    cout_g = cout // g
    ho = (h + 2 * ph - kh) // sh + 1
    wo = (w + 2 * pw - kw) // sw + 1
    xp = np.pad(x.data, ((0, 0), (0, 0), (ph, ph), (pw, pw))) if (ph or pw) else x.data
    win = _windows(xp, kh, kw, sh, sw, ho, wo)  # N,Cin,Ho,Wo,Kh,Kw
    k = cin_g * kh * kw
    cols = (win.reshape(n, g, cin_g, ho, wo, kh, kw)
            .transpose(1, 0, 3, 4, 2, 5, 6)
            .reshape(g, n * ho * wo, k))
    wmat = weight.data.reshape(g, cout_g, k)
    out = np.matmul(cols, wmat.transpose(0, 2, 1))  # G, NHW, Cout_g
    out = out.reshape(g, n, ho, wo, cout_g).transpose(1, 0, 4, 2, 3).reshape(n, cout, ho, wo)
    if bias is not None:
        out = out + bias.data[None, :, None, None]
    out = np.ascontiguousarray(out)

    def rule(gout):
        go = gout.reshape(n, g, cout_g, ho, wo).transpose(1, 0, 3, 4, 2).reshape(g, n * ho * wo, cout_g)
        gx = gw = gb = None
        if weight.requires_grad:
            gw = np.matmul(cols.transpose(0, 2, 1), go).transpose(0, 2, 1).reshape(weight.shape)
        if x.requires_grad:
            dcols = np.matmul(go, wmat)  # G, NHW, K
            dcols = (dcols.reshape(g, n, ho, wo, cin_g, kh, kw)
                     .transpose(1, 0, 4, 5, 6, 2, 3)
                     .reshape(n, cin, kh, kw, ho, wo))
            dxp = np.zeros(xp.shape)
            for i in range(kh):
                for j in range(kw):
                    dxp[:, :, i : i + sh * (ho - 1) + 1 : sh, j : j + sw * (wo - 1) + 1 : sw] += dcols[:, :, i, j]
            gx = dxp[:, :, ph : ph + h, pw : pw + w]
        if bias is not None and bias.requires_grad:
            gb = gout.sum(axis=(0, 2, 3))
        return gx, gw, gb

    inputs = (x, weight) if bias is None else (x, weight, bias)
    return record("conv2d", out, inputs, rule)


def maxpool2d(x: Tensor, kernel=2, stride=None) -> Tensor:
    """Window maximum. Ties route the gradient to the first row-major position."""
    _check_rank(x, 4, "maxpool2d")
    kh, kw = _pair(kernel)
    sh, sw = _pair(stride if stride is not None else kernel)
    n, c, h, w = x.shape
    if h < kh:
        raise ShapeError(f"height {h} smaller than pool kernel {kh}", dim="height")
    if w < kw:
        raise ShapeError(f"width {w} smaller than pool kernel {kw}", dim="width")
    ho = (h - kh) // sh + 1
    wo = (w - kw) // sw + 1
    win = _windows(x.data, kh, kw, sh, sw, ho, wo).reshape(n, c, ho, wo, kh * kw)
    arg = np.argmax(win, axis=-1)
    out = np.take_along_axis(win, arg[..., None], axis=-1)[..., 0]

    def rule(gout):
        rows = np.arange(ho)[:, None] * sh + arg // kw
        cols = np.arange(wo)[None, :] * sw + arg % kw
        flat = (rows * w + cols).reshape(n * c, ho * wo)
        gx = np.zeros((n * c, h * w))
        base = np.arange(n * c)[:, None] * (h * w)
        np.add.at(gx.reshape(-1), (base + flat).ravel(), gout.reshape(-1))
        return (gx.reshape(n, c, h, w),)

    return record("maxpool2d", np.ascontiguousarray(out), (x,), rule)


def upsample_nearest(x: Tensor, factor: int) -> Tensor:
    _check_rank(x, 4, "upsample_nearest")
    f = int(factor)
    if f < 1:
        raise ValueError("upsample factor must be positive")
    n, c, h, w = x.shape
    out = np.repeat(np.repeat(x.data, f, axis=2), f, axis=3)

    def rule(gout):
        return (gout.reshape(n, c, h, f, w, f).sum(axis=(3, 5)),)

    return record("upsample_nearest", out, (x,), rule)


# ----------------------------------------------------------------- pointwise

def _same_shape(a: Tensor, b: Tensor, op: str):
    if a.shape != b.shape:
        dim = next((f"axis {i}" for i, (p, q) in enumerate(zip(a.shape, b.shape)) if p != q), "rank")
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} differ", dim=dim)


def add(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "add")
    return record("add", a.data + b.data, (a, b), lambda g: (g, g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "mul")
    ad, bd = a.data, b.data
    return record("mul", ad * bd, (a, b), lambda g: (g * bd, g * ad))


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return record("relu", np.where(mask, x.data, 0.0), (x,), lambda g: (g * mask,))


def sigmoid(x: Tensor) -> Tensor:
    s = expit(x.data)
    return record("sigmoid", s, (x,), lambda g: (g * s * (1.0 - s),))


def scale(x: Tensor, s) -> Tensor:
    """Multiply by a python scalar or broadcast a [C] tensor over [N,C,H,W]."""
    if not isinstance(s, Tensor):
        c = float(s)
        return record("scale", x.data * c, (x,), lambda g: (g * c,))
    _check_rank(x, 4, "scale input")
    if s.shape != (x.shape[1],):
        raise ShapeError(f"per-channel scale shape {s.shape} != ({x.shape[1]},)", dim="channels")
    sv = s.data[None, :, None, None]
    xd = x.data

    def rule(g):
        return g * sv, (g * xd).sum(axis=(0, 2, 3))

    return record("scale", xd * sv, (x, s), rule)


_POINTWISE = {"add": add, "mul": mul, "relu": relu, "sigmoid": sigmoid, "scale": scale}


def pointwise(kind: str, *operands) -> Tensor:
    try:
        fn = _POINTWISE[kind]
    except KeyError:
        raise ValueError(f"unknown pointwise op {kind!r}; expected one of {sorted(_POINTWISE)}") from None
    return fn(*operands)


# ------------------------------------------------------------ reductions, head

def global_avg_pool(x: Tensor) -> Tensor:
    _check_rank(x, 4, "global_avg_pool")
    n, c, h, w = x.shape
    out = x.data.reshape(n, c, h * w).sum(axis=2) / (h * w)

    def rule(g):
        return (np.broadcast_to((g / (h * w))[:, :, None, None], (n, c, h, w)).copy(),)

    return record("global_avg_pool", out, (x,), rule)


def linear(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    _check_rank(x, 2, "linear input")
    _check_rank(weight, 2, "linear weight")
    if x.shape[1] != weight.shape[1]:
        raise ShapeError(
            f"linear: input features {x.shape[1]} != weight features {weight.shape[1]}", dim="features")
    if bias is not None and bias.shape != (weight.shape[0],):
        raise ShapeError(f"bias shape {bias.shape} != ({weight.shape[0]},)", dim="bias")
    xd, wd = x.data, weight.data
    out = xd @ wd.T
    if bias is not None:
        out = out + bias.data

    def rule(g):
        gx = g @ wd if x.requires_grad else None
        gw = g.T @ xd if weight.requires_grad else None
        gb = g.sum(axis=0) if bias is not None else None
        return gx, gw, gb

    inputs = (x, weight) if bias is None else (x, weight, bias)
    return record("linear", out, inputs, rule)


def batch_norm(x: Tensor, gamma: Tensor, beta: Tensor, running_mean: np.ndarray,
               running_var: np.ndarray, training: bool, momentum: float = 0.1,
               eps: float = 1e-5) -> Tensor:
    """Per-channel normalization over (N, H, W).

    In training mode the batch statistics are used and the running buffers are
    updated in place (unbiased variance); otherwise the buffers are used.
    """
    _check_rank(x, 4, "batch_norm")
    n, c, h, w = x.shape
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError(f"batch_norm affine params must be ({c},)", dim="channels")
    xd = x.data
    if training:
        m = n * h * w
        if m < 2:
            raise ShapeError("batch_norm training needs more than one value per channel", dim="batch")
        mu = xd.mean(axis=(0, 2, 3))
        var = xd.var(axis=(0, 2, 3))
        running_mean *= 1.0 - momentum
        running_mean += momentum * mu
        running_var *= 1.0 - momentum
        running_var += momentum * var * m / (m - 1)
    else:
        mu, var = running_mean.copy(), running_var.copy()
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (xd - mu[None, :, None, None]) * inv[None, :, None, None]
    gd = gamma.data[None, :, None, None]
    out = xhat * gd + beta.data[None, :, None, None]

    def rule(g):
        ggamma = (g * xhat).sum(axis=(0, 2, 3))
        gbeta = g.sum(axis=(0, 2, 3))
        gx = None
        if x.requires_grad:
            gxhat = g * gd
            if training:
                m_ = n * h * w
                gx = (inv[None, :, None, None] / m_) * (
                    m_ * gxhat
                    - gxhat.sum(axis=(0, 2, 3))[None, :, None, None]
                    - xhat * (gxhat * xhat).sum(axis=(0, 2, 3))[None, :, None, None])
            else:
                gx = gxhat * inv[None, :, None, None]
        return gx, ggamma, gbeta

    return record("batch_norm", out, (x, gamma, beta), rule)


# ------------------------------------------------------------- shape plumbing

def pad2d(x: Tensor, pads, mode: str = "constant") -> Tensor:
    """Pad spatial dims by ``(top, bottom, left, right)``; mode constant or reflect."""
    _check_rank(x, 4, "pad2d")
    top, bottom, left, right = (int(p) for p in pads)
    n, c, h, w = x.shape
    if mode == "reflect" and (max(top, bottom) >= h or max(left, right) >= w):
        raise ShapeError("reflect padding must be smaller than the padded dimension", dim="height")
    if mode not in ("constant", "reflect"):
        raise ValueError(f"unknown pad mode {mode!r}")
    out = np.pad(x.data, ((0, 0), (0, 0), (top, bottom), (left, right)), mode=mode)

    def rule(g):
        gh = g[:, :, top : top + h, :].copy()
        if mode == "reflect":
            for k in range(1, top + 1):
                gh[:, :, k] += g[:, :, top - k]
            for k in range(1, bottom + 1):
                gh[:, :, h - 1 - k] += g[:, :, top + h - 1 + k]
        gx = gh[:, :, :, left : left + w].copy()
        if mode == "reflect":
            for k in range(1, left + 1):
                gx[:, :, :, k] += gh[:, :, :, left - k]
            for k in range(1, right + 1):
                gx[:, :, :, w - 1 - k] += gh[:, :, :, left + w - 1 + k]
        return (gx,)

    return record("pad2d", out, (x,), rule)


def crop2d(x: Tensor, height: int, width: int) -> Tensor:
    """Keep the top-left ``height`` x ``width`` window."""
    _check_rank(x, 4, "crop2d")
    n, c, h, w = x.shape
    if height > h or width > w:
        raise ShapeError(f"crop {height}x{width} exceeds {h}x{w}", dim="height")
    out = np.ascontiguousarray(x.data[:, :, :height, :width])

    def rule(g):
        gx = np.zeros((n, c, h, w))
        gx[:, :, :height, :width] = g
        return (gx,)

    return record("crop2d", out, (x,), rule)


def concat_channels(xs: Sequence[Tensor]) -> Tensor:
    xs = list(xs)
    if not xs:
        raise ValueError("concat_channels needs at least one tensor")
    for t in xs:
        _check_rank(t, 4, "concat_channels")
        if (t.shape[0], t.shape[2], t.shape[3]) != (xs[0].shape[0], xs[0].shape[2], xs[0].shape[3]):
            raise ShapeError(f"concat_channels: {t.shape} incompatible with {xs[0].shape}", dim="spatial")
    bounds = np.cumsum([0] + [t.shape[1] for t in xs])
    out = np.concatenate([t.data for t in xs], axis=1)

    def rule(g):
        return tuple(g[:, bounds[i] : bounds[i + 1]] for i in range(len(xs)))

    return record("concat_channels", out, tuple(xs), rule)


def sum(x: Tensor) -> Tensor:  # noqa: A001 - mirrors numpy naming
    shape = x.shape
    return record("sum", np.array(x.data.sum()), (x,), lambda g: (np.full(shape, float(g)),))


def mean(x: Tensor) -> Tensor:
    shape, count = x.shape, x.size
    return record("mean", np.array(x.data.sum() / count), (x,),
                  lambda g: (np.full(shape, float(g) / count),))


def bce_with_logits(logits: Tensor, targets) -> Tensor:
    """Mean binary cross-entropy of ``sigmoid(logits)`` against 0/1 targets."""
    z = logits.data
    y = np.asarray(targets, dtype=np.float64).reshape(z.shape)
    losses = np.maximum(z, 0.0) - z * y + np.log1p(np.exp(-np.abs(z)))
    count = z.size

    def rule(g):
        return (float(g) * (expit(z) - y) / count,)

    return record("bce_with_logits", np.array(losses.sum() / count), (logits,), rule)
