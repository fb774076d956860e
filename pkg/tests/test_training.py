import json
import math

import numpy as np
import pytest

from dcac.backbone import Network
from dcac.checkpoint import from_bytes, load_checkpoint, to_bytes
from dcac.datapipe import ImageSource, Manifest, SampleRecord, disk_dataset
from dcac.errors import ConfigError, DataError, NumericalError
from dcac.evaluation import auroc, score_manifest
from dcac.tensor import Tensor
from dcac.training import (AdamW, OptimizerState, PhaseConfig, TrainConfig, adamw_step, cosine_lr,
                           load_pretrained, network_from_checkpoint,
                           toy_train_config, train_two_phase)


def reference_adamw(p, steps, lr, b1=0.9, b2=0.999, eps=1e-8, wd=0.01):
    """Scalar AdamW on f(p) = p**2 written out longhand."""
    m = v = 0.0
    trace = []
    for t in range(1, steps + 1):
        g = 2.0 * p
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        mhat = m / (1 - b1 ** t)
        vhat = v / (1 - b2 ** t)
        p = p - lr * wd * p - lr * mhat / (math.sqrt(vhat) + eps)
        trace.append(p)
    return trace


def small_cfg(**kw):
    base = dict(phase1=PhaseConfig(2, 1e-2), phase2=PhaseConfig(2, 1e-3))
    base.update(kw)
    return toy_train_config(**base)


@pytest.fixture(scope="module")
def toy():
    m, imgs = disk_dataset(32, 32, seed=0)
    return m, ImageSource(images=imgs)


# --------------------------------------------------------------- optimizer

def test_adamw_matches_scalar_reference():
    p = Tensor(np.array([1.5]))
    state = OptimizerState()
    got = []
    for _ in range(50):
        adamw_step([("p", p)], {"p": 2.0 * p.data}, state, lr=0.05, weight_decay=0.01)
        got.append(p.data[0])
    np.testing.assert_allclose(got, reference_adamw(1.5, 50, 0.05), rtol=0, atol=1e-12)


def test_adamw_class_steps_trainable_params():
    p = Tensor(np.array([1.0]), requires_grad=True)
    p.grad = Tensor(np.array([0.5]))
    opt = AdamW([("p", p)], weight_decay=0.0)
    opt.step(0.1)
    np.testing.assert_allclose(p.data, [0.9], rtol=1e-7)
    opt.zero_grad()
    assert p.grad is None


def test_zero_gradient_zero_decay_is_identity():
    p = Tensor(np.array([1.0, -2.0, 3.0]))
    adamw_step([("p", p)], {"p": np.zeros(3)}, OptimizerState(), lr=0.1, weight_decay=0.0)
    np.testing.assert_array_equal(p.data, [1.0, -2.0, 3.0])


def test_zero_gradient_applies_decoupled_decay():
    p = Tensor(np.array([1.0, -2.0]))
    adamw_step([("p", p)], {"p": np.zeros(2)}, OptimizerState(), lr=0.1, weight_decay=0.01)
    np.testing.assert_allclose(p.data, [0.999, -1.998], rtol=1e-15)


def test_nan_gradient_aborts_whole_step():
    a, b = Tensor(np.ones(2)), Tensor(np.ones(2))
    state = OptimizerState()
    with pytest.raises(NumericalError, match="b"):
        adamw_step([("a", a), ("b", b)], {"a": np.ones(2), "b": np.array([1.0, np.nan])}, state, 0.1)
    np.testing.assert_array_equal(a.data, 1.0)
    assert state.step == 0 and state.m == {}


def test_params_without_grad_keep_no_state():
    a, b = Tensor(np.ones(2)), Tensor(np.ones(2))
    state = OptimizerState()
    adamw_step([("a", a), ("b", b)], {"a": np.ones(2)}, state, 0.1)
    assert set(state.m) == {"a"}
    np.testing.assert_array_equal(b.data, 1.0)


# ---------------------------------------------------------------- schedule

def test_cosine_closed_form_every_epoch():
    for e in range(81):
        expected = 0.5 * 5e-5 * (1 + math.cos(math.pi * e / 80))
        assert cosine_lr(e, 80, 5e-5, 0.0) == expected


def test_cosine_endpoints():
    assert cosine_lr(0, 80, 5e-5) == 5e-5
    assert cosine_lr(80, 80, 5e-5) == 0.0
    assert cosine_lr(40, 80, 5e-5, 1e-6) == pytest.approx((5e-5 + 1e-6) / 2, rel=1e-15)
    with pytest.raises(ValueError):
        cosine_lr(81, 80, 5e-5)


def test_default_config_values():
    cfg = TrainConfig()
    assert (cfg.phase1.epochs, cfg.phase1.lr) == (80, 5e-5)
    assert (cfg.phase2.epochs, cfg.phase2.lr) == (80, 5e-6)
    assert cfg.phase1.lr == pytest.approx(10 * cfg.phase2.lr, rel=1e-15)
    assert (cfg.weight_decay, cfg.betas, cfg.eps, cfg.lr_min) == (0.01, (0.9, 0.999), 1e-8, 0.0)
    assert cfg.steps_per_epoch(100) == 4 and cfg.steps_per_epoch(96) == 3


def test_config_json_roundtrip(tmp_path):
    cfg = small_cfg(seed=9)
    p = tmp_path / "t.json"
    p.write_text(json.dumps(cfg.to_dict()))
    assert TrainConfig.from_json(p) == cfg


@pytest.mark.parametrize("kw, field", [
    (dict(phase1=PhaseConfig(1, 0.0)), "phase1.lr"),
    (dict(batch_size=1), "batch_size"),
    (dict(betas=(0.9, 1.0)), "betas"),
])
def test_config_validation(kw, field):
    with pytest.raises(ConfigError) as exc:
        TrainConfig(**kw)
    assert exc.value.field == field


def test_unknown_config_key():
    with pytest.raises(ConfigError):
        TrainConfig.from_dict({"epochs": 3})


# ---------------------------------------------------------------- training

def test_phase_contract(toy):
    m, src = toy
    cfg = small_cfg()
    net = Network(cfg.network_config(), seed=0)
    params0 = {n: p.data.copy() for n, p in net.named_parameters()}
    kernels0 = {n: b.data.copy() for n, b in net.named_buffers() if n.endswith("kernel")}
    ckpt1, _ = train_two_phase(net, m, None, cfg, src, stop_after=(1, 1))
    for n, p in net.named_parameters():
        assert np.array_equal(p.data, params0[n]) != n.startswith("head."), n
    train_two_phase(net, m, None, cfg, src, resume=ckpt1)
    for n, p in net.named_parameters():
        assert not np.array_equal(p.data, params0[n]), n
    for n, b in net.named_buffers():
        if n.endswith("kernel"):
            assert np.array_equal(b.data, kernels0[n])


def test_log_records_and_lr_trace(toy, tmp_path):
    m, src = toy
    cfg = small_cfg(phase1=PhaseConfig(4, 1e-2))
    _, log = train_two_phase(Network(cfg.network_config()), m.subset(range(8, 32)),
                             m.subset(range(8)), cfg, src, out_dir=tmp_path)
    assert [(r["phase"], r["epoch"]) for r in log.records] == [(1, 0), (1, 1), (1, 2), (1, 3), (2, 0), (2, 1)]
    assert [r["lr"] for r in log.records[:4]] == [cosine_lr(e, 4, 1e-2) for e in range(4)]
    lines = (tmp_path / "train_log.jsonl").read_text().splitlines()
    assert set(json.loads(lines[0])) == {"phase", "epoch", "lr", "train_loss", "val_auroc", "wall_ms"}
    assert (tmp_path / "final.dcac").exists() and (tmp_path / "last.dcac").exists()


def test_rejects_overlapping_or_single_class_manifests(toy):
    m, src = toy
    cfg = small_cfg()
    with pytest.raises(DataError, match="share patients"):
        train_two_phase(Network(cfg.network_config()), m, m.subset([0, 1]), cfg, src)
    only_neg = Manifest(r for r in m if r.target == 0)
    with pytest.raises(DataError, match="both classes"):
        train_two_phase(Network(cfg.network_config()), only_neg, None, cfg, src)


def test_validation_failure_is_not_fatal(toy):
    m, src = toy
    cfg = small_cfg(phase2=PhaseConfig(0, 1e-3))
    val = Manifest([SampleRecord("SYN_00000", "other", 1)])  # single class
    _, log = train_two_phase(Network(cfg.network_config()), m.subset(range(1, 32)), val, cfg, src)
    assert all(r["val_auroc"] is None for r in log.records)


def test_identical_runs_produce_identical_checkpoints(toy):
    m, src = toy
    cfg = small_cfg(augment=True)
    a, _ = train_two_phase(Network(cfg.network_config(), 0), m, None, cfg, src)
    b, _ = train_two_phase(Network(cfg.network_config(), 0), m, None, cfg, src)
    assert to_bytes(a) == to_bytes(b)


def test_resume_matches_uninterrupted(toy, tmp_path):
    m, src = toy
    cfg = small_cfg(phase2=PhaseConfig(3, 1e-3))
    full, _ = train_two_phase(Network(cfg.network_config(), 0), m, None, cfg, src)
    train_two_phase(Network(cfg.network_config(), 0), m, None, cfg, src, out_dir=tmp_path,
                    stop_after=(2, 0))
    mid = load_checkpoint(tmp_path / "last.dcac")
    assert mid.meta["cursor"] == {"phase": 2, "epoch": 1}
    resumed, _ = train_two_phase(Network(cfg.network_config(), 123), m, None, cfg, src, resume=mid)
    assert to_bytes(resumed) == to_bytes(full)


@pytest.mark.slow
def test_toy_loss_falls_and_overfits(toy):
    m, imgs = disk_dataset(64, 32, seed=0)
    src = ImageSource(images=imgs)
    cfg = toy_train_config()
    net = Network(cfg.network_config(), seed=0)
    _, log = train_two_phase(net, m, None, cfg, src)
    losses = np.array(log.losses())
    smooth = np.convolve(losses, np.ones(5) / 5, mode="valid")
    # balanced with-replacement batches add noise of about 0.01 to each epoch mean
    assert np.diff(smooth).max() <= 0.02
    assert smooth[-1] < 0.5 * smooth[0]
    assert auroc(score_manifest(net, m, src, 32)) >= 0.99


def test_network_and_pretrained_loading(toy, tmp_path):
    m, src = toy
    cfg = small_cfg()
    ckpt, _ = train_two_phase(Network(cfg.network_config(), 0), m, None, cfg, src, out_dir=tmp_path)
    net = network_from_checkpoint(ckpt)
    for n, p in net.named_parameters():
        assert np.array_equal(p.data, ckpt.arrays["param:" + n])
    fresh = Network(cfg.network_config(), seed=7)
    head0 = fresh.head.weight.data.copy()
    load_pretrained(fresh, tmp_path / "final.dcac")
    assert np.array_equal(fresh.head.weight.data, head0)
    assert np.array_equal(fresh.stem.conv.weight.data, ckpt.arrays["param:stem.conv.weight"])


def test_checkpoint_meta_contents(toy):
    m, src = toy
    cfg = small_cfg()
    ckpt, _ = train_two_phase(Network(cfg.network_config(), 0), m, None, cfg, src)
    meta = from_bytes(to_bytes(ckpt)).meta
    assert {"network_config", "train_config", "cursor", "optimizer", "rng", "log_tail"} <= set(meta)
    assert all("wall_ms" not in r for r in meta["log_tail"])
    assert all(n.startswith(("param:", "buffer:", "opt.m:", "opt.v:")) for n in ckpt.arrays)
