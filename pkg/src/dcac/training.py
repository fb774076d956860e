"""Two-phase transfer learning: head-only, then full fine-tuning.

Each phase gets a fresh AdamW optimizer and its own per-epoch cosine anneal.
Batches come from the class-balanced sampler. All randomness is derived
from ``(seed, phase, epoch[, sample])`` so a run resumed from any epoch
checkpoint replays the uninterrupted run bit for bit.
"""

from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import __version__
from . import tensor as T
from .backbone import Network, NetworkConfig, load_config, set_frozen
from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .datapipe.augment import AugmentConfig, augment, preprocess, sample_rng
from .datapipe.images import ImageSource
from .datapipe.manifest import Manifest
from .datapipe.sampler import balanced_sampler
from .errors import CheckpointError, ConfigError, DataError, NumericalError
from .evaluation import auroc, score_manifest
from .tensor import Tensor

logger = logging.getLogger(__name__)

LOG_TAIL = 20


@dataclass
class PhaseConfig:
    epochs: int
    lr: float


@dataclass
class TrainConfig:
    phase1: PhaseConfig = field(default_factory=lambda: PhaseConfig(80, 5e-5))
    phase2: PhaseConfig = field(default_factory=lambda: PhaseConfig(80, 5e-6))
    weight_decay: float = 0.01
    betas: Tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    batch_size: int = 32
    lr_min: float = 0.0
    seed: int = 0
    image_size: int = 160
    augment: bool = True
    network: object = "full"
    pretrained_checkpoint: Optional[str] = None
    pin_norm_stats: bool = False  # frozen batch norms use running stats in phase 1

    def __post_init__(self):
        for key in ("phase1", "phase2"):
            v = getattr(self, key)
            if isinstance(v, dict):
                setattr(self, key, PhaseConfig(**v))
        self.betas = tuple(self.betas)
        self.validate()

    def validate(self):
        for key in ("phase1", "phase2"):
            p = getattr(self, key)
            if p.lr <= 0:
                raise ConfigError("learning rate must be positive", field=f"{key}.lr")
            if p.epochs < 0:
                raise ConfigError("epochs must be non-negative", field=f"{key}.epochs")
        if self.batch_size < 2:
            raise ConfigError("batch norm needs at least 2 images per batch", field="batch_size")
        if self.lr_min < 0:
            raise ConfigError("must be non-negative", field="lr_min")
        if not all(0 <= b < 1 for b in self.betas):
            raise ConfigError("betas must lie in [0, 1)", field="betas")

    def steps_per_epoch(self, n_train: int) -> int:
        return max(1, math.ceil(n_train / self.batch_size))

    def network_config(self) -> NetworkConfig:
        return load_config(self.network)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["betas"] = list(self.betas)
        if isinstance(self.network, NetworkConfig):
            d["network"] = self.network.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown keys {sorted(unknown)}", field="train_config")
        try:
            return cls(**d)
        except TypeError as exc:
            raise ConfigError(str(exc), field="train_config") from exc

    @classmethod
    def from_json(cls, path) -> "TrainConfig":
        try:
            return cls.from_dict(json.loads(Path(path).read_text()))
        except json.JSONDecodeError as exc:
            raise ConfigError(f"invalid JSON ({exc})", field="config") from exc


def full_train_config(**overrides) -> TrainConfig:
    return TrainConfig(**overrides)


def toy_train_config(**overrides) -> TrainConfig:
    """Desk-scale settings for the synthetic bright/dark sanity task.

    The learning rates are raised 200x over the full preset defaults (keeping the 10:1
    phase ratio) because 160 steps at 5e-5 barely move a random head.
    """
    base = dict(phase1=PhaseConfig(10, 1e-2), phase2=PhaseConfig(10, 1e-3), batch_size=8,
                image_size=32, augment=False, network="tiny")
    base.update(overrides)
    return TrainConfig(**base)


TRAIN_PRESETS = {"full": full_train_config, "toy": toy_train_config}


# ------------------------------------------------------------------ optimizer

def cosine_lr(epoch: int, total_epochs: int, lr_max: float, lr_min: float = 0.0) -> float:
    if not 0 <= epoch <= total_epochs:
        raise ValueError(f"epoch {epoch} outside [0, {total_epochs}]")
    if total_epochs == 0:
        return lr_max
    return lr_min + 0.5 * (lr_max - lr_min) * (1.0 + math.cos(math.pi * epoch / total_epochs))


@dataclass
class OptimizerState:
    step: int = 0
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)


def adamw_step(params: Sequence[Tuple[str, Tensor]], grads: Dict[str, np.ndarray],
               state: OptimizerState, lr: float, betas=(0.9, 0.999), eps: float = 1e-8,
               weight_decay: float = 0.01) -> None:
    """One AdamW update with decoupled weight decay and bias-corrected moments.

    Parameters without an entry in ``grads`` are left untouched. The whole
    step is refused if any gradient is non-finite.
    """
    if lr <= 0:
        raise ValueError("lr must be positive")
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NumericalError(f"non-finite gradient for {name}; step aborted")
    b1, b2 = betas
    state.step += 1
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for name, p in params:
        g = grads.get(name)
        if g is None:
            continue
        if g.shape != p.shape:
            raise ValueError(f"gradient shape {g.shape} != parameter shape {p.shape} for {name}")
        m = state.m.get(name)
        v = state.v.get(name)
        m = (1.0 - b1) * g if m is None else b1 * m + (1.0 - b1) * g
        v = (1.0 - b2) * g * g if v is None else b2 * v + (1.0 - b2) * g * g
        state.m[name], state.v[name] = m, v
        decayed = p.data * (1.0 - lr * weight_decay)
        p.data = decayed - lr * (m / c1) / (np.sqrt(v / c2) + eps)


class AdamW:
    def __init__(self, named_params: Sequence[Tuple[str, Tensor]], betas=(0.9, 0.999),
                 eps: float = 1e-8, weight_decay: float = 0.01):
        self.params = list(named_params)
        self.betas = tuple(betas)
        self.eps = eps
        self.weight_decay = weight_decay
        self.state = OptimizerState()

    def step(self, lr: float):
        grads = {n: (p.grad.data if p.grad is not None else np.zeros(p.shape))
                 for n, p in self.params}
        adamw_step(self.params, grads, self.state, lr, self.betas, self.eps, self.weight_decay)

    def zero_grad(self):
        for _, p in self.params:
            p.zero_grad()


# -------------------------------------------------------------- checkpoints

def make_checkpoint(net: Network, cfg: TrainConfig, cursor: dict, optimizer: Optional[AdamW],
                    log_tail: Sequence[dict]) -> Checkpoint:
    arrays = {}
    for name, p in net.named_parameters():
        arrays["param:" + name] = p.data
    for name, b in net.named_buffers():
        arrays["buffer:" + name] = b.data
    opt_meta = None
    if optimizer is not None:
        for name, _ in optimizer.params:
            if name in optimizer.state.m:
                arrays["opt.m:" + name] = optimizer.state.m[name]
                arrays["opt.v:" + name] = optimizer.state.v[name]
        opt_meta = {"step": optimizer.state.step, "params": [n for n, _ in optimizer.params]}
    meta = {
        "tool_version": __version__,
        "network_config": net.config.to_dict(),
        "train_config": cfg.to_dict(),
        "cursor": cursor,
        "optimizer": opt_meta,
        "rng": {"bit_generator": "PCG64", "seed": cfg.seed,
                "streams": "sampler=(seed,phase,epoch); augment=(seed,phase,epoch,sample)"},
        "log_tail": [{k: v for k, v in r.items() if k != "wall_ms"} for r in log_tail][-LOG_TAIL:],
    }
    return Checkpoint(meta=meta, arrays=arrays)


def network_from_checkpoint(ckpt: Checkpoint) -> Network:
    net = Network(NetworkConfig.from_dict(ckpt.meta["network_config"]), seed=0)
    load_state(net, ckpt)
    return net


def load_state(net: Network, ckpt: Checkpoint, include_head: bool = True, strict: bool = True):
    """Copy parameter and buffer arrays from ``ckpt`` into ``net`` by name."""
    params = ckpt.group("param")
    buffers = ckpt.group("buffer")
    head = {n for n, _ in net.head.named_parameters("head.")}
    for name, t in list(net.named_parameters()) + list(net.named_buffers()):
        src = params.get(name, buffers.get(name))
        if name in head and not include_head:
            continue
        if src is None:
            if strict:
                raise CheckpointError(f"checkpoint lacks {name}")
            continue
        if src.shape != t.shape:
            if strict:
                raise CheckpointError(f"{name}: checkpoint shape {src.shape} != {t.shape}")
            continue
        t.data = np.array(src, dtype=np.float64)


def load_pretrained(net: Network, path) -> None:
    """Initialise the backbone from a checkpoint, keeping the fresh head."""
    load_state(net, load_checkpoint(path), include_head=False, strict=False)


# ------------------------------------------------------------------ training

@dataclass
class TrainLog:
    records: List[dict] = field(default_factory=list)

    def append(self, rec: dict):
        self.records.append(rec)

    def losses(self, phase: Optional[int] = None) -> List[float]:
        return [r["train_loss"] for r in self.records if phase is None or r["phase"] == phase]

    def write_jsonl(self, path):
        with open(path, "w") as fh:
            for r in self.records:
                fh.write(json.dumps(r, sort_keys=True) + "\n")


def _batch(net_input_size: int, names: Sequence[str], images: ImageSource, cfg: TrainConfig,
           aug: Optional[AugmentConfig], phase: int, epoch: int, first_sample: int) -> np.ndarray:
    out = []
    for k, name in enumerate(names):
        img = images[name]
        if aug is not None:
            out.append(augment(img, aug, sample_rng(cfg.seed, phase, epoch, first_sample + k)))
        else:
            out.append(preprocess(img, net_input_size))
    return np.stack(out)


def _validate(net: Network, val: Optional[Manifest], images: ImageSource, size: int):
    if val is None or len(val) == 0:
        return None
    try:
        return auroc(score_manifest(net, val, images, size))
    except DataError as exc:
        logger.warning("validation skipped: %s", exc)
        return None


def train_two_phase(net: Network, train: Manifest, val: Optional[Manifest], cfg: TrainConfig,
                    images: ImageSource, out_dir=None, resume: Optional[Checkpoint] = None,
                    on_epoch: Optional[Callable[[dict], None]] = None,
                    stop_after: Optional[Tuple[int, int]] = None) -> Tuple[Checkpoint, TrainLog]:
    """Run phase 1 (head only) then phase 2 (everything).

    ``resume`` restarts from an epoch checkpoint; ``stop_after=(phase, epoch)``
    halts once that epoch has finished (used to produce mid-run checkpoints).
    """
    if train.n_pos == 0 or train.n_neg == 0:
        raise DataError("training manifest needs both classes")
    if val is not None and set(train.by_patient) & set(val.by_patient):
        raise DataError("train and validation share patients")
    aug = AugmentConfig(output_size=cfg.image_size) if cfg.augment else None
    steps = cfg.steps_per_epoch(len(train))
    log = TrainLog()
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)

    start_phase, start_epoch = 1, 0
    if resume is not None:
        load_state(net, resume)
        start_phase = resume.meta["cursor"]["phase"]
        start_epoch = resume.meta["cursor"]["epoch"]
        log.records.extend(resume.meta.get("log_tail", []))
    elif cfg.pretrained_checkpoint:
        load_pretrained(net, cfg.pretrained_checkpoint)

    optimizer = None
    ckpt = None
    for phase, pcfg in ((1, cfg.phase1), (2, cfg.phase2)):
        if phase < start_phase:
            continue
        set_frozen(net, "all_but_head" if phase == 1 else "none", cfg.pin_norm_stats)
        optimizer = AdamW(net.trainable_parameters(), cfg.betas, cfg.eps, cfg.weight_decay)
        first = start_epoch if phase == start_phase else 0
        if resume is not None and phase == start_phase and resume.meta.get("optimizer"):
            _restore_optimizer(optimizer, resume)
        for epoch in range(first, pcfg.epochs):
            t0 = time.perf_counter()
            lr = cosine_lr(epoch, pcfg.epochs, pcfg.lr, cfg.lr_min)
            sampler = balanced_sampler(train, int(sample_rng(cfg.seed, phase, epoch).integers(2**63)))
            net.train()
            total = 0.0
            for step in range(steps):
                idx = [next(sampler) for _ in range(cfg.batch_size)]
                names = [train.records[i].image_name for i in idx]
                x = Tensor(_batch(cfg.image_size, names, images, cfg, aug, phase, epoch,
                                  step * cfg.batch_size))
                y = np.array([train.records[i].target for i in idx], dtype=np.float64)
                optimizer.zero_grad()
                loss = T.bce_with_logits(net(x), y)
                T.backward(loss)
                optimizer.step(lr)
                total += loss.item()
            rec = {"phase": phase, "epoch": epoch, "lr": lr, "train_loss": total / steps,
                   "val_auroc": _validate(net, val, images, cfg.image_size)}
            rec["wall_ms"] = round((time.perf_counter() - t0) * 1000.0, 3)
            log.append(rec)
            logger.info("phase %d epoch %d lr %.3g loss %.5f val_auroc %s", phase, epoch, lr,
                        rec["train_loss"], rec["val_auroc"])
            if on_epoch is not None:
                on_epoch(rec)
            ckpt = make_checkpoint(net, cfg, {"phase": phase, "epoch": epoch + 1},
                                   optimizer, log.records)
            if out is not None:
                save_checkpoint(out / "last.dcac", ckpt)
                log.write_jsonl(out / "train_log.jsonl")
            if stop_after == (phase, epoch):
                return ckpt, log
        start_epoch = 0

    ckpt = make_checkpoint(net, cfg, {"phase": 3, "epoch": 0}, optimizer, log.records)
    if out is not None:
        save_checkpoint(out / "final.dcac", ckpt)
        log.write_jsonl(out / "train_log.jsonl")
    return ckpt, log


def _restore_optimizer(opt: AdamW, ckpt: Checkpoint):
    meta = ckpt.meta["optimizer"]
    names = [n for n, _ in opt.params]
    if meta["params"] != names:
        raise CheckpointError("optimizer parameter list differs from the checkpoint's")
    opt.state.step = meta["step"]
    m, v = ckpt.group("opt.m"), ckpt.group("opt.v")
    for n in names:
        if n in m:
            opt.state.m[n] = m[n].copy()
            opt.state.v[n] = v[n].copy()
