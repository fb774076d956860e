"""Four-column heterogeneous DC-AC network, its config schema and footprint.

Topology: a strided stem feeds four independent columns. Each column is a
list of stages (optional AADS downsample, conv block, N DC-AC blocks).
``merge_plan`` then concatenates streams along channels, mixes them with a
1x1 conv block and continues with further stages, until a single stream
remains. A 1x1 tail conv block, global average pooling and a linear head
produce one logit per image.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import List, Optional, Sequence

import numpy as np

from . import tensor as T
from .errors import ConfigError, ShapeError
from .layers import AADS, ConvBlock, DCACBlock, LayerFootprint, Linear, Module
from .tensor import Tensor

FORMAT_VERSION = 1
N_BRANCHES = 4


@dataclass
class StemSpec:
    channels: int
    stride: int = 2
    kernel_size: int = 3


@dataclass
class StageSpec:
    conv_channels: int
    dcac_count: int = 1
    downsample: bool = False
    kernel_size: int = 3


@dataclass
class MergeSpec:
    inputs: List[int]
    mix_channels: int
    stages: List[StageSpec] = field(default_factory=list)


@dataclass
class NetworkConfig:
    """Declarative description of the columnar network.

    Streams are numbered 0-3 for the four columns; each merge appends one new
    stream id (4, 5, ...) in plan order.
    """

    stem: StemSpec
    branches: List[List[StageSpec]]
    merge_plan: List[MergeSpec]
    tail_channels: int
    head_outputs: int = 1
    input_size: tuple = (3, 160, 160)
    reduction: int = 4
    format_version: int = FORMAT_VERSION

    def to_dict(self) -> dict:
        d = asdict(self)
        d["input_size"] = list(self.input_size)
        d["head"] = {"outputs": d.pop("head_outputs")}
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "NetworkConfig":
        if not isinstance(d, dict):
            raise ConfigError("network config must be a JSON object")
        version = d.get("format_version", FORMAT_VERSION)
        if version != FORMAT_VERSION:
            raise ConfigError(f"unsupported version {version}, expected {FORMAT_VERSION}",
                              field="format_version")
        for key in ("stem", "branches", "merge_plan", "tail_channels"):
            if key not in d:
                raise ConfigError("missing", field=key)
        try:
            stem = StemSpec(**d["stem"])
            branches = [[_stage(s, f"branches[{i}][{j}]") for j, s in enumerate(b)]
                        for i, b in enumerate(d["branches"])]
            merges = [MergeSpec(inputs=list(m["inputs"]), mix_channels=m["mix_channels"],
                                stages=[_stage(s, f"merge_plan[{i}].stages[{j}]")
                                        for j, s in enumerate(m.get("stages", []))])
                      for i, m in enumerate(d["merge_plan"])]
        except (TypeError, KeyError) as exc:
            raise ConfigError(f"malformed entry ({exc})", field="network") from exc
        head = d.get("head", {"outputs": 1})
        cfg = cls(stem=stem, branches=branches, merge_plan=merges,
                  tail_channels=d["tail_channels"], head_outputs=head.get("outputs", 1),
                  input_size=tuple(d.get("input_size", (3, 160, 160))),
                  reduction=d.get("reduction", 4), format_version=version)
        cfg.validate()
        return cfg

    def to_json(self, path=None) -> str:
        text = json.dumps(self.to_dict(), indent=2)
        if path is not None:
            Path(path).write_text(text + "\n")
        return text

    @classmethod
    def from_json(cls, path) -> "NetworkConfig":
        try:
            return cls.from_dict(json.loads(Path(path).read_text()))
        except json.JSONDecodeError as exc:
            raise ConfigError(f"invalid JSON ({exc})", field="config") from exc

    def validate(self) -> "NetworkConfig":
        def positive(value, name):
            if not isinstance(value, (int, np.integer)) or isinstance(value, bool) or value < 1:
                raise ConfigError(f"must be a positive integer, got {value!r}", field=name)

        positive(self.stem.channels, "stem.channels")
        positive(self.stem.stride, "stem.stride")
        positive(self.tail_channels, "tail_channels")
        positive(self.reduction, "reduction")
        if self.head_outputs != 1:
            raise ConfigError("binary head has exactly one output", field="head.outputs")
        if len(self.input_size) != 3 or self.input_size[0] != 3:
            raise ConfigError("expected (3, H, W)", field="input_size")
        if len(self.branches) != N_BRANCHES:
            raise ConfigError(f"need exactly {N_BRANCHES} branches, got {len(self.branches)}",
                              field="branches")
        for i, b in enumerate(self.branches):
            if not b:
                raise ConfigError("each branch needs at least one stage before any merge",
                                  field=f"branches[{i}]")
            for j, s in enumerate(b):
                _check_stage(s, f"branches[{i}][{j}]", positive)
        if not self.merge_plan:
            raise ConfigError("at least one merge is required", field="merge_plan")
        factors = {i: self.stem.stride * 2 ** sum(s.downsample for s in b)
                   for i, b in enumerate(self.branches)}
        live = set(factors)
        next_id = N_BRANCHES
        for i, m in enumerate(self.merge_plan):
            where = f"merge_plan[{i}]"
            positive(m.mix_channels, where + ".mix_channels")
            if len(m.inputs) < 2 or len(set(m.inputs)) != len(m.inputs):
                raise ConfigError("a merge needs two or more distinct streams", field=where + ".inputs")
            for s in m.inputs:
                if s not in live:
                    raise ConfigError(f"stream {s} is not available", field=where + ".inputs")
            if len({factors[s] for s in m.inputs}) != 1:
                raise ConfigError("merged streams have different spatial strides",
                                  field=where + ".inputs")
            for j, s in enumerate(m.stages):
                _check_stage(s, f"{where}.stages[{j}]", positive)
            live -= set(m.inputs)
            factors[next_id] = factors[m.inputs[0]] * 2 ** sum(s.downsample for s in m.stages)
            live.add(next_id)
            next_id += 1
        if live != {next_id - 1}:
            raise ConfigError(f"plan leaves {len(live)} streams; the last merge must take all",
                              field="merge_plan")
        return self

    @property
    def downsampling_factor(self) -> int:
        """Total spatial stride from input to the tail."""
        factors = [self.stem.stride * 2 ** sum(s.downsample for s in b) for b in self.branches]
        for m in self.merge_plan:
            factors.append(factors[m.inputs[0]] * 2 ** sum(s.downsample for s in m.stages))
        return factors[-1]


def _stage(d, where) -> StageSpec:
    if isinstance(d, StageSpec):
        return d
    try:
        return StageSpec(**d)
    except TypeError as exc:
        raise ConfigError(f"bad stage spec ({exc})", field=where) from exc


def _check_stage(s: StageSpec, where, positive):
    positive(s.conv_channels, where + ".conv_channels")
    positive(s.kernel_size, where + ".kernel_size")
    if s.kernel_size % 2 == 0:
        raise ConfigError("kernel size must be odd", field=where + ".kernel_size")
    if not isinstance(s.dcac_count, int) or s.dcac_count < 0:
        raise ConfigError("must be a non-negative integer", field=where + ".dcac_count")
    if not isinstance(s.downsample, bool):
        raise ConfigError("must be a boolean", field=where + ".downsample")


# ----------------------------------------------------------------- presets

def full_config() -> NetworkConfig:
    """Full-size preset: ~1.65M parameters, ~0.32 GMACs at 3x160x160.

    Columns differ in width (32-56 then 64-112 channels) and in DC-AC depth
    (1-3 blocks per stage). Pairs of columns merge after their second stage
    and the two merged streams merge after one more stage; total stride 16.
    """
    widths = [(32, 64), (40, 80), (48, 96), (56, 112)]
    dcacs = [(1, 1), (1, 2), (2, 2), (2, 3)]
    branches = [[StageSpec(w1, d1, True), StageSpec(w2, d2, True)]
                for (w1, w2), (d1, d2) in zip(widths, dcacs)]
    merges = [
        MergeSpec([0, 1], 96, [StageSpec(128, 2, True)]),
        MergeSpec([2, 3], 128, [StageSpec(160, 2, True)]),
        MergeSpec([4, 5], 224, [StageSpec(256, 2, False)]),
    ]
    return NetworkConfig(StemSpec(32, 2), branches, merges, tail_channels=640).validate()


def scaled_config(cfg: NetworkConfig, divisor: int) -> NetworkConfig:
    """Divide every channel width by ``divisor`` (floored, at least 2)."""

    def s(c):
        return max(2, c // divisor)

    def stage(st):
        return StageSpec(s(st.conv_channels), st.dcac_count, st.downsample, st.kernel_size)

    return NetworkConfig(
        stem=StemSpec(s(cfg.stem.channels), cfg.stem.stride, cfg.stem.kernel_size),
        branches=[[stage(st) for st in b] for b in cfg.branches],
        merge_plan=[MergeSpec(list(m.inputs), s(m.mix_channels), [stage(st) for st in m.stages])
                    for m in cfg.merge_plan],
        tail_channels=s(cfg.tail_channels),
        head_outputs=cfg.head_outputs,
        input_size=cfg.input_size,
        reduction=cfg.reduction,
    ).validate()


def tiny_config() -> NetworkConfig:
    cfg = scaled_config(full_config(), 8)
    cfg.input_size = (3, 32, 32)
    return cfg


PRESETS = {"full": full_config, "tiny": tiny_config}


def load_config(spec) -> NetworkConfig:
    """Accept a NetworkConfig, a preset name, a dict or a JSON file path."""
    if isinstance(spec, NetworkConfig):
        return spec
    if isinstance(spec, dict):
        return NetworkConfig.from_dict(spec)
    if isinstance(spec, str) and spec in PRESETS:
        return PRESETS[spec]()
    path = Path(spec)
    if not path.exists():
        raise ConfigError(f"no preset or file named {spec!r}", field="config")
    return NetworkConfig.from_json(path)


# ----------------------------------------------------------------- network

class Stage(Module):
    def __init__(self, in_channels: int, spec: StageSpec, reduction: int, rng):
        super().__init__()
        self.spec = spec
        self.down = self.add_module("down", AADS(in_channels)) if spec.downsample else None
        self.conv = self.add_module(
            "conv", ConvBlock(in_channels, spec.conv_channels, spec.kernel_size, rng=rng))
        self.dcac = [self.add_module(f"dcac{i}", DCACBlock(spec.conv_channels, reduction, rng))
                     for i in range(spec.dcac_count)]

    def forward(self, x):
        if self.down is not None:
            x = self.down(x)
        x = self.conv(x)
        for block in self.dcac:
            x = block(x)
        return x

    def footprint(self, shape, prefix=""):
        rows = []
        for name, child in self._children.items():
            r, shape = child.footprint(shape, f"{prefix}{name}.")
            rows += r
        return rows, shape


class Network(Module):
    """Instantiated parameters of a NetworkConfig; call it on [N,3,H,W]."""

    def __init__(self, config: NetworkConfig, seed: int = 0):
        super().__init__()
        config.validate()
        self.config = config
        self.seed = seed
        self.frozen_scope = "none"
        rng = np.random.default_rng(seed)
        r = config.reduction
        self.stem = self.add_module(
            "stem", ConvBlock(3, config.stem.channels, config.stem.kernel_size,
                              config.stem.stride, rng=rng))
        self.columns = []
        widths = {}
        for i, branch in enumerate(config.branches):
            stages, c = [], config.stem.channels
            for j, spec in enumerate(branch):
                stages.append(self.add_module(f"branch{i}.stage{j}", Stage(c, spec, r, rng)))
                c = spec.conv_channels
            self.columns.append(stages)
            widths[i] = c
        self.merges = []
        for i, m in enumerate(config.merge_plan):
            concat = sum(widths[s] for s in m.inputs)
            mix = self.add_module(f"merge{i}.mix", ConvBlock(concat, m.mix_channels, 1, rng=rng))
            stages, c = [], m.mix_channels
            for j, spec in enumerate(m.stages):
                stages.append(self.add_module(f"merge{i}.stage{j}", Stage(c, spec, r, rng)))
                c = spec.conv_channels
            self.merges.append((m, mix, stages))
            widths[N_BRANCHES + i] = c
        self.tail = self.add_module(
            "tail", ConvBlock(widths[N_BRANCHES + len(config.merge_plan) - 1],
                              config.tail_channels, 1, rng=rng))
        self.head = self.add_module("head", Linear(config.tail_channels, config.head_outputs, rng))

    @property
    def min_input_size(self) -> int:
        return self.config.downsampling_factor

    def forward(self, x: Tensor) -> Tensor:
        if not isinstance(x, Tensor):
            x = Tensor(x)
        T._check_rank(x, 4, "network input")
        if x.shape[1] != 3:
            raise ShapeError(f"expected 3 input channels, got {x.shape[1]}", dim="channels")
        lo = self.min_input_size
        for dim, size in (("height", x.shape[2]), ("width", x.shape[3])):
            if size < lo:
                raise ShapeError(f"input {dim} {size} below the minimum {lo}", dim=dim)
        return self.head(T.global_avg_pool(self.features(x)))

    def features(self, x: Tensor) -> Tensor:
        stem = self.stem(x)
        streams = {}
        for i, stages in enumerate(self.columns):
            h = stem
            for st in stages:
                h = st(h)
            streams[i] = h
        for i, (m, mix, stages) in enumerate(self.merges):
            h = mix(T.concat_channels([streams.pop(s) for s in m.inputs]))
            for st in stages:
                h = st(h)
            streams[N_BRANCHES + i] = h
        (last,) = streams.values()
        return self.tail(last)

    def merge_widths(self) -> List[tuple]:
        """(concatenated channels, sum of the merged streams' channels) per merge."""
        widths = {i: b[-1].conv_channels for i, b in enumerate(self.config.branches)}
        out = []
        for i, (m, mix, stages) in enumerate(self.merges):
            out.append((mix.conv.in_channels, sum(widths[s] for s in m.inputs)))
            widths[N_BRANCHES + i] = stages[-1].spec.conv_channels if stages else m.mix_channels
        return out

    def footprint(self, shape, prefix=""):
        rows, stem_shape = self.stem.footprint(shape, "stem.")
        streams = {}
        for i, stages in enumerate(self.columns):
            s = stem_shape
            for j, st in enumerate(stages):
                r, s = st.footprint(s, f"branch{i}.stage{j}.")
                rows += r
            streams[i] = s
        for i, (m, mix, stages) in enumerate(self.merges):
            parts = [streams.pop(k) for k in m.inputs]
            s = (parts[0][0], sum(p[1] for p in parts), parts[0][2], parts[0][3])
            rows.append(LayerFootprint(f"merge{i}.concat", "concat", 0, 0, int(np.prod(s))))
            r, s = mix.footprint(s, f"merge{i}.mix.")
            rows += r
            for j, st in enumerate(stages):
                r, s = st.footprint(s, f"merge{i}.stage{j}.")
                rows += r
            streams[N_BRANCHES + i] = s
        (s,) = streams.values()
        r, s = self.tail.footprint(s, "tail.")
        rows += r
        rows.append(LayerFootprint("pool", "global_avg_pool", 0, 0, s[0] * s[1]))
        r, s = self.head.footprint((s[0], s[1]), "head.")
        return rows + r, s

    # ---- freezing

    def head_parameters(self) -> List[Tensor]:
        return self.head.parameters()

    def trainable_parameters(self) -> List[tuple]:
        return [(n, t) for n, t in self.named_parameters() if t.requires_grad]

    def set_frozen(self, scope: str, pin_norm_stats: bool = False):
        set_frozen(self, scope, pin_norm_stats)


def build_network(config, seed: int = 0) -> Network:
    return Network(load_config(config), seed)


def set_frozen(net: Network, scope: str, pin_norm_stats: bool = False):
    """``all_but_head`` freezes everything except the linear head; ``none`` thaws.

    Frozen batch norms keep normalizing with batch statistics (and updating
    their running buffers) unless ``pin_norm_stats``, which switches them to
    the stored running statistics. Pinning only makes sense for pretrained
    weights; from a random init the buffers are still (0, 1) and the frozen
    features come out too small for the head to learn from.
    """
    if scope not in ("all_but_head", "none"):
        raise ValueError(f"unknown freeze scope {scope!r}")
    freeze = scope == "all_but_head"
    head = {id(t) for t in net.head_parameters()}
    for _, t in net.named_parameters():
        t.requires_grad = (id(t) in head) or not freeze
        if not t.requires_grad:
            t.zero_grad()
    for _, m in net.named_modules():
        if hasattr(m, "frozen"):
            m.frozen = freeze and pin_norm_stats
    net.frozen_scope = scope


# ---------------------------------------------------------------- analyzer

@dataclass
class FootprintReport:
    input_size: tuple
    layers: List[LayerFootprint]
    total_params: int
    total_macs: int
    peak_activation_elements: int

    @property
    def flops(self) -> int:
        """One multiply-accumulate counted as one FLOP."""
        return self.total_macs

    @property
    def flops_2x(self) -> int:
        return 2 * self.total_macs

    def to_dict(self, per_layer: bool = True) -> dict:
        d = {
            "input_size": list(self.input_size),
            "total_params": self.total_params,
            "total_macs": self.total_macs,
            "flops": self.flops,
            "flops_2x": self.flops_2x,
            "params_m": round(self.total_params / 1e6, 4),
            "gflops": round(self.flops / 1e9, 4),
            "peak_activation_elements": self.peak_activation_elements,
        }
        if per_layer:
            d["layers"] = [asdict(r) for r in self.layers]
        return d

    def to_text(self) -> str:
        width = max((len(r.name) for r in self.layers), default=10)
        lines = [f"{'layer':<{width}}  {'kind':<20} {'params':>10} {'MACs':>14} {'out elems':>12}"]
        for r in self.layers:
            lines.append(f"{r.name:<{width}}  {r.kind:<20} {r.params:>10,} {r.macs:>14,} "
                         f"{r.output_elements:>12,}")
        lines.append(f"total params {self.total_params:,} ({self.total_params / 1e6:.3f} M)")
        lines.append(f"total MACs   {self.total_macs:,} ({self.flops / 1e9:.4f} G, FLOPs=MACs)")
        lines.append(f"peak activation elements {self.peak_activation_elements:,}")
        return "\n".join(lines)


def analyze(config, input_size: Optional[Sequence[int]] = None, batch: int = 1) -> FootprintReport:
    """Parameter count, MAC count and peak activation size without running data."""
    cfg = load_config(config)
    if input_size is None:
        input_size = cfg.input_size
    input_size = tuple(int(v) for v in input_size)
    if len(input_size) == 2:
        input_size = (3,) + input_size
    net = Network(cfg, seed=0)
    rows, _ = net.footprint((batch,) + input_size)
    return FootprintReport(
        input_size=input_size,
        layers=rows,
        total_params=sum(r.params for r in rows),
        total_macs=sum(r.macs for r in rows),
        peak_activation_elements=max(r.output_elements for r in rows),
    )
