"""Attention condensers, the double-condensing block, AADS and conv blocks.

A condenser branch squeezes its input spatially (2x2 max-pool), mixes it
with one or two depthwise-separable embedding layers at a reduced channel
width, then projects back up (nearest upsample + 1x1 conv). The
double-condensing block runs two such branches, one with a single embedding
layer and one with two, sums their projections under one sigmoid and uses the
result to gate the block input elementwise.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterator, List, Optional, Tuple

import numpy as np

from . import tensor as T
from .errors import ShapeError
from .tensor import Tensor

BLUR_KERNEL = np.outer([1.0, 2.0, 1.0], [1.0, 2.0, 1.0]) / 16.0
DEFAULT_REDUCTION = 4


@dataclass
class LayerFootprint:
    name: str
    kind: str
    params: int
    macs: int
    output_elements: int


def kaiming_uniform(rng: np.random.Generator, shape: tuple, fan_in: int) -> np.ndarray:
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)


class Module:
    """Container of named parameters, buffers and child modules.

    Iteration order is declaration order, which checkpoints rely on.
    """

    def __init__(self):
        self._params: dict = {}
        self._buffers: dict = {}
        self._children: dict = {}
        self.training = True

    def add_param(self, name: str, data) -> Tensor:
        t = Tensor(data, requires_grad=True, name=name)
        self._params[name] = t
        return t

    def add_buffer(self, name: str, data) -> Tensor:
        t = Tensor(np.array(data, dtype=np.float64), name=name)
        self._buffers[name] = t
        return t

    def add_module(self, name: str, module: "Module") -> "Module":
        self._children[name] = module
        return module

    def named_parameters(self, prefix: str = "") -> Iterator[Tuple[str, Tensor]]:
        for name, t in self._params.items():
            yield prefix + name, t
        for cname, child in self._children.items():
            yield from child.named_parameters(f"{prefix}{cname}.")

    def named_buffers(self, prefix: str = "") -> Iterator[Tuple[str, Tensor]]:
        for name, t in self._buffers.items():
            yield prefix + name, t
        for cname, child in self._children.items():
            yield from child.named_buffers(f"{prefix}{cname}.")

    def named_modules(self, prefix: str = "") -> Iterator[Tuple[str, "Module"]]:
        yield prefix.rstrip("."), self
        for cname, child in self._children.items():
            yield from child.named_modules(f"{prefix}{cname}.")

    def parameters(self) -> List[Tensor]:
        return [t for _, t in self.named_parameters()]

    def train(self, mode: bool = True) -> "Module":
        for _, m in self.named_modules():
            m.training = mode
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def zero_grad(self):
        for t in self.parameters():
            t.zero_grad()

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def forward(self, x: Tensor) -> Tensor:  # pragma: no cover - abstract
        raise NotImplementedError

    def footprint(self, shape: tuple, prefix: str = "") -> Tuple[List[LayerFootprint], tuple]:
        raise NotImplementedError  # pragma: no cover


def _conv_out(size: int, kernel: int, stride: int, pad: int) -> int:
    return (size + 2 * pad - kernel) // stride + 1


class Conv2d(Module):
    def __init__(self, in_channels, out_channels, kernel_size=3, stride=1, padding=None,
                 groups=1, bias=True, rng=None):
        super().__init__()
        if in_channels % groups or out_channels % groups:
            raise ShapeError(
                f"groups={groups} must divide {in_channels} and {out_channels}", dim="groups")
        rng = rng if rng is not None else np.random.default_rng(0)
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.kernel_size = kernel_size
        self.stride = stride
        self.padding = kernel_size // 2 if padding is None else padding
        self.groups = groups
        fan_in = (in_channels // groups) * kernel_size * kernel_size
        self.weight = self.add_param(
            "weight",
            kaiming_uniform(rng, (out_channels, in_channels // groups, kernel_size, kernel_size), fan_in))
        self.bias = self.add_param("bias", np.zeros(out_channels)) if bias else None

    def forward(self, x):
        return T.conv2d(x, self.weight, self.bias, self.stride, self.padding, self.groups)

    def footprint(self, shape, prefix=""):
        n, c, h, w = shape
        k = self.kernel_size
        ho, wo = _conv_out(h, k, self.stride, self.padding), _conv_out(w, k, self.stride, self.padding)
        per_out = (self.in_channels // self.groups) * k * k
        params = self.out_channels * per_out + (self.out_channels if self.bias is not None else 0)
        macs = self.out_channels * per_out * ho * wo * n
        out = (n, self.out_channels, ho, wo)
        return [LayerFootprint(prefix.rstrip("."), "conv2d", params, macs, int(np.prod(out)))], out


class BatchNorm2d(Module):
    """Batch normalization; ``frozen`` pins it to its running statistics."""

    def __init__(self, channels, momentum=0.1, eps=1e-5):
        super().__init__()
        self.momentum = momentum
        self.eps = eps
        self.frozen = False
        self.weight = self.add_param("weight", np.ones(channels))
        self.bias = self.add_param("bias", np.zeros(channels))
        self.running_mean = self.add_buffer("running_mean", np.zeros(channels))
        self.running_var = self.add_buffer("running_var", np.ones(channels))

    def forward(self, x):
        return T.batch_norm(x, self.weight, self.bias, self.running_mean.data,
                            self.running_var.data, self.training and not self.frozen,
                            self.momentum, self.eps)

    def footprint(self, shape, prefix=""):
        return [LayerFootprint(prefix.rstrip("."), "batch_norm", 2 * shape[1], 0,
                               int(np.prod(shape)))], shape


class Linear(Module):
    def __init__(self, in_features, out_features, rng=None):
        super().__init__()
        rng = rng if rng is not None else np.random.default_rng(0)
        self.in_features = in_features
        self.out_features = out_features
        self.weight = self.add_param(
            "weight", kaiming_uniform(rng, (out_features, in_features), in_features))
        self.bias = self.add_param("bias", np.zeros(out_features))

    def forward(self, x):
        return T.linear(x, self.weight, self.bias)

    def footprint(self, shape, prefix=""):
        n, f = shape
        o = self.out_features
        return [LayerFootprint(prefix.rstrip("."), "linear", o * f + o, o * f * n, n * o)], (n, o)


class ConvBlock(Module):
    """conv (no bias) -> batch norm -> ReLU."""

    def __init__(self, in_channels, out_channels, kernel_size=3, stride=1, rng=None):
        super().__init__()
        self.conv = self.add_module(
            "conv", Conv2d(in_channels, out_channels, kernel_size, stride, bias=False, rng=rng))
        self.norm = self.add_module("norm", BatchNorm2d(out_channels))

    def forward(self, x):
        return conv_block_forward(x, self)

    def footprint(self, shape, prefix=""):
        a, shape = self.conv.footprint(shape, prefix + "conv.")
        b, shape = self.norm.footprint(shape, prefix + "norm.")
        return a + b, shape


def conv_block_forward(x: Tensor, block: ConvBlock) -> Tensor:
    return T.relu(block.norm(block.conv(x)))


# ------------------------------------------------------------ condensers

@dataclass
class EmbeddingLayer:
    depthwise: Tensor        # [Cin, 1, 3, 3]
    pointwise: Tensor        # [Cout, Cin, 1, 1]
    pointwise_bias: Tensor   # [Cout]


@dataclass
class CondenserBranchParams:
    embed_layers: List[EmbeddingLayer]
    expansion: Tensor        # [C, Cmid, 1, 1]
    expansion_bias: Tensor   # [C]
    reduction: int = DEFAULT_REDUCTION

    @property
    def channels(self) -> int:
        return self.expansion.shape[0]

    @property
    def mid_channels(self) -> int:
        return self.expansion.shape[1]

    def tensors(self) -> List[Tuple[str, Tensor]]:
        out = []
        for i, layer in enumerate(self.embed_layers):
            out += [(f"embed{i}.depthwise", layer.depthwise),
                    (f"embed{i}.pointwise", layer.pointwise),
                    (f"embed{i}.pointwise_bias", layer.pointwise_bias)]
        return out + [("expansion", self.expansion), ("expansion_bias", self.expansion_bias)]


@dataclass
class DcacModuleParams:
    branch_a: CondenserBranchParams
    branch_b: CondenserBranchParams


@dataclass
class AadsParams:
    kernel: Tensor = field(default=None)  # [C, 1, 3, 3], never trained

    @classmethod
    def for_channels(cls, channels: int) -> "AadsParams":
        k = np.broadcast_to(BLUR_KERNEL, (channels, 1, 3, 3)).copy()
        return cls(Tensor(k, name="kernel"))


def mid_channels(channels: int, reduction: int = DEFAULT_REDUCTION) -> int:
    return max(1, channels // reduction)


def init_condenser_branch(channels: int, n_embed: int, reduction: int = DEFAULT_REDUCTION,
                          rng=None) -> CondenserBranchParams:
    """Kaiming-uniform weights, zero biases.

    The first embedding layer's pointwise conv performs the channel reduction
    C -> Cmid; later layers stay at Cmid.
    """
    if n_embed not in (1, 2):
        raise ValueError("a condenser branch has one or two embedding layers")
    rng = rng if rng is not None else np.random.default_rng(0)
    cmid = mid_channels(channels, reduction)
    layers = []
    cin = channels
    for _ in range(n_embed):
        dw = kaiming_uniform(rng, (cin, 1, 3, 3), 9)
        pw = kaiming_uniform(rng, (cmid, cin, 1, 1), cin)
        layers.append(EmbeddingLayer(Tensor(dw, True), Tensor(pw, True), Tensor(np.zeros(cmid), True)))
        cin = cmid
    expansion = Tensor(kaiming_uniform(rng, (channels, cmid, 1, 1), cmid), True)
    return CondenserBranchParams(layers, expansion, Tensor(np.zeros(channels), True), reduction)


def _require_even(v: Tensor):
    _, _, h, w = v.shape
    if h % 2:
        raise ShapeError(f"condenser input height {h} is odd; zero-pad bottom to even first",
                         dim="height")
    if w % 2:
        raise ShapeError(f"condenser input width {w} is odd; zero-pad right to even first",
                         dim="width")


def condenser_branch_forward(v: Tensor, params: CondenserBranchParams) -> Tensor:
    """Condense -> embed (x1 or x2) -> expand; returns the pre-sigmoid projection."""
    T._check_rank(v, 4, "condenser_branch_forward")
    _require_even(v)
    x = T.maxpool2d(v, 2, 2)
    for i, layer in enumerate(params.embed_layers):
        if i:
            x = T.relu(x)
        x = T.conv2d(x, layer.depthwise, None, 1, 1, groups=x.shape[1])
        x = T.conv2d(x, layer.pointwise, layer.pointwise_bias)
    x = T.upsample_nearest(x, 2)
    return T.conv2d(x, params.expansion, params.expansion_bias)


def dcac_forward(v: Tensor, params: DcacModuleParams, pad_odd: bool = False) -> Tensor:
    """Gate ``v`` by sigmoid(P_a + P_b) from the two condenser branches.

    With ``pad_odd`` an odd-sized input is zero-padded bottom/right for the
    branches and the attention map cropped back, so the output always has
    the input's shape.
    """
    T._check_rank(v, 4, "dcac_forward")
    n, c, h, w = v.shape
    for label, branch in (("branch_a", params.branch_a), ("branch_b", params.branch_b)):
        if branch.channels != c:
            raise ShapeError(
                f"{label} expands to {branch.channels} channels, input has {c}", dim="channels")
    src = v
    if pad_odd and (h % 2 or w % 2):
        src = T.pad2d(v, (0, h % 2, 0, w % 2))
    pa = condenser_branch_forward(src, params.branch_a)
    pb = condenser_branch_forward(src, params.branch_b)
    logits = T.add(pa, pb)
    if src is not v:
        logits = T.crop2d(logits, h, w)
    return T.mul(v, T.sigmoid(logits))


def aads_forward(v: Tensor, params: Optional[AadsParams] = None) -> Tensor:
    """Binomial 3x3 blur (reflect pad 1) then stride-2 subsampling."""
    T._check_rank(v, 4, "aads_forward")
    c = v.shape[1]
    params = params or AadsParams.for_channels(c)
    if params.kernel.shape != (c, 1, 3, 3):
        raise ShapeError(f"AADS kernel shape {params.kernel.shape} for {c} channels", dim="channels")
    return T.conv2d(T.pad2d(v, (1, 1, 1, 1), mode="reflect"), params.kernel, None, 2, 0, groups=c)


def _branch_footprint(b: CondenserBranchParams, shape, prefix):
    n, c, h, w = shape
    hp, wp = h + h % 2, w + w % 2
    hh, wh = hp // 2, wp // 2
    rows = [LayerFootprint(prefix + "condense", "maxpool2d", 0, 0, n * c * hh * wh)]
    cin = c
    for i, layer in enumerate(b.embed_layers):
        cmid = layer.pointwise.shape[0]
        rows.append(LayerFootprint(f"{prefix}embed{i}.depthwise", "conv2d",
                                   cin * 9, cin * 9 * hh * wh * n, n * cin * hh * wh))
        rows.append(LayerFootprint(f"{prefix}embed{i}.pointwise", "conv2d",
                                   cmid * cin + cmid, cmid * cin * hh * wh * n, n * cmid * hh * wh))
        cin = cmid
    rows.append(LayerFootprint(prefix + "upsample", "upsample_nearest", 0, 0, n * cin * hp * wp))
    rows.append(LayerFootprint(prefix + "expansion", "conv2d",
                               c * cin + c, c * cin * hp * wp * n, n * c * hp * wp))
    return rows


class DCACBlock(Module):
    def __init__(self, channels, reduction=DEFAULT_REDUCTION, rng=None):
        super().__init__()
        rng = rng if rng is not None else np.random.default_rng(0)
        self.params = DcacModuleParams(
            branch_a=init_condenser_branch(channels, 1, reduction, rng),
            branch_b=init_condenser_branch(channels, 2, reduction, rng),
        )
        for prefix, branch in (("a.", self.params.branch_a), ("b.", self.params.branch_b)):
            for name, t in branch.tensors():
                t.name = prefix + name
                self._params[prefix + name] = t

    def forward(self, x):
        return dcac_forward(x, self.params, pad_odd=True)

    def footprint(self, shape, prefix=""):
        rows = _branch_footprint(self.params.branch_a, shape, prefix + "a.")
        rows += _branch_footprint(self.params.branch_b, shape, prefix + "b.")
        rows.append(LayerFootprint(prefix + "gate", "selective_attention", 0, 0, int(np.prod(shape))))
        return rows, shape


class AADS(Module):
    def __init__(self, channels):
        super().__init__()
        self.params = AadsParams.for_channels(channels)
        self._buffers["kernel"] = self.params.kernel

    def forward(self, x):
        return aads_forward(x, self.params)

    def footprint(self, shape, prefix=""):
        n, c, h, w = shape
        out = (n, c, (h + 1) // 2, (w + 1) // 2)
        macs = 9 * int(np.prod(out))
        return [LayerFootprint(prefix.rstrip("."), "aads", 0, macs, int(np.prod(out)))], out
