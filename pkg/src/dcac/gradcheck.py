"""Central finite-difference verification of recorded backward rules."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence, Union

import numpy as np

from . import tensor as T
from .tensor import Tensor


@dataclass
class GradCheckEntry:
    name: str
    max_rel_error: float
    max_abs_error: float
    passed: bool


@dataclass
class GradCheckReport:
    label: str
    tolerance: float
    epsilon: float
    entries: list = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return all(e.passed for e in self.entries)

    @property
    def max_rel_error(self) -> float:
        return max((e.max_rel_error for e in self.entries), default=0.0)

    def rows(self):
        for e in self.entries:
            yield self.label, e.name, e.max_rel_error, "pass" if e.passed else "FAIL"


def _relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    # norm-wise: elementwise ratios are meaningless where both gradients are ~0
    denom = max(np.abs(analytic).max(initial=0.0), np.abs(numeric).max(initial=0.0), 1e-12)
    return float(np.abs(analytic - numeric).max(initial=0.0) / denom)


def grad_check(fn: Callable[[], Tensor],
               inputs: Union[Mapping[str, Tensor], Sequence[Tensor]],
               epsilon: float = 1e-4, tolerance: float = 1e-4,
               label: str = "") -> GradCheckReport:
    """Compare analytic gradients of ``fn()`` against central differences.

    ``fn`` is re-evaluated from scratch for every perturbation, so it must
    close over ``inputs``. Non-scalar outputs are summed. Failures are
    reported, never raised.
    """
    if not isinstance(inputs, Mapping):
        inputs = {t.name or f"input{i}": t for i, t in enumerate(inputs)}
    for t in inputs.values():
        t.requires_grad = True
        t.zero_grad()

    def scalar():
        out = fn()
        return out if out.ndim == 0 else T.sum(out)

    T.backward(scalar())
    report = GradCheckReport(label=label, tolerance=tolerance, epsilon=epsilon)
    for name, t in inputs.items():
        analytic = t.grad.data if t.grad is not None else np.zeros(t.shape)
        numeric = np.zeros(t.shape)
        original = t.data
        flat = numeric.reshape(-1)
        with T.no_grad():
            for i in range(t.size):
                bumped = original.copy()
                bumped.reshape(-1)[i] += epsilon
                t.data = bumped
                plus = scalar().item()
                bumped.reshape(-1)[i] -= 2 * epsilon
                minus = scalar().item()
                flat[i] = (plus - minus) / (2 * epsilon)
        t.data = original
        rel = _relative_error(analytic, numeric)
        report.entries.append(GradCheckEntry(
            name=name,
            max_rel_error=rel,
            max_abs_error=float(np.abs(analytic - numeric).max(initial=0.0)),
            passed=rel <= tolerance,
        ))
    return report


# ------------------------------------------------------------ layer suite

def _spaced(rng: np.random.Generator, shape, step: float = 0.05) -> np.ndarray:
    """Distinct values at least ``step`` apart and never zero (zero would tie
    with zero padding), so a ±epsilon nudge never changes a max/relu branch."""
    n = int(np.prod(shape))
    vals = (np.arange(n) - n // 2 + 0.5) * step
    return rng.permutation(vals).reshape(shape)


def _broken_sigmoid(x: Tensor) -> Tensor:
    # deliberately wrong rule: drops the s * (1 - s) factor
    return T.record("sigmoid", T.sigmoid(x).data, (x,), lambda g: (g,))


def _suite_cases(rng: np.random.Generator, corrupt: bool):
    from .layers import (AadsParams, BatchNorm2d, ConvBlock, DcacModuleParams,
                         aads_forward, condenser_branch_forward, dcac_forward,
                         init_condenser_branch)

    def t(a, name):
        return Tensor(a, name=name)

    def n(*shape):
        return rng.normal(size=shape)

    cases = []

    x, w, b = t(n(2, 4, 7, 7), "x"), t(n(6, 2, 3, 3) * 0.5, "weight"), t(n(6), "bias")
    cases.append(("conv2d", lambda: T.conv2d(x, w, b, stride=2, padding=1, groups=2),
                  {"x": x, "weight": w, "bias": b}))
    xd, wd = t(n(1, 8, 6, 6), "x"), t(n(8, 1, 3, 3), "weight")
    cases.append(("conv2d_depthwise", lambda: T.conv2d(xd, wd, padding=1, groups=8),
                  {"x": xd, "weight": wd}))
    xp = t(_spaced(rng, (2, 3, 6, 6)), "x")
    cases.append(("maxpool2d", lambda: T.maxpool2d(xp, 2, 2), {"x": xp}))
    xu, wu = t(n(2, 3, 3, 4), "x"), n(2, 3, 6, 8)
    cases.append(("upsample_nearest", lambda: T.mul(T.upsample_nearest(xu, 2), Tensor(wu)),
                  {"x": xu}))
    a, c = t(n(2, 3, 4, 4), "a"), t(n(2, 3, 4, 4), "b")
    cases.append(("add", lambda: T.mul(T.add(a, c), a), {"a": a, "b": c}))
    cases.append(("mul", lambda: T.mul(a, c), {"a": a, "b": c}))
    xr = t(_spaced(rng, (2, 3, 4, 4), 0.1), "x")
    cases.append(("relu", lambda: T.mul(T.relu(xr), xr), {"x": xr}))
    xs = t(n(2, 3, 4, 4), "x")
    sig = _broken_sigmoid if corrupt else T.sigmoid
    cases.append(("sigmoid", lambda: sig(xs), {"x": xs}))
    xc, sc = t(n(2, 3, 4, 4), "x"), t(n(3), "scale")
    cases.append(("scale", lambda: T.mul(T.scale(xc, sc), xc), {"x": xc, "scale": sc}))
    xg, wg = t(n(2, 5, 3, 4), "x"), n(2, 5)
    cases.append(("global_avg_pool", lambda: T.mul(T.global_avg_pool(xg), Tensor(wg)), {"x": xg}))
    xl, wl, bl = t(n(3, 5), "x"), t(n(4, 5), "weight"), t(n(4), "bias")
    wlo = n(3, 4)
    cases.append(("linear", lambda: T.mul(T.linear(xl, wl, bl), Tensor(wlo)),
                  {"x": xl, "weight": wl, "bias": bl}))
    bn = BatchNorm2d(3)
    xb, gb, bb = t(n(2, 3, 4, 4), "x"), t(n(3), "gamma"), t(n(3), "beta")
    wb = n(2, 3, 4, 4)

    def bn_fn():
        return T.mul(T.batch_norm(xb, gb, bb, bn.running_mean.data, bn.running_var.data, True),
                     Tensor(wb))

    cases.append(("batch_norm", bn_fn, {"x": xb, "gamma": gb, "beta": bb}))
    xpad = t(n(1, 2, 4, 5), "x")
    wpad = n(1, 2, 6, 7)
    cases.append(("pad2d_reflect",
                  lambda: T.mul(T.pad2d(xpad, (1, 1, 1, 1), "reflect"), Tensor(wpad)), {"x": xpad}))
    wpc = n(1, 2, 5, 6)
    cases.append(("pad2d_constant",
                  lambda: T.mul(T.pad2d(xpad, (0, 1, 0, 1)), Tensor(wpc)), {"x": xpad}))
    xcr = t(n(1, 2, 5, 5), "x")
    wcr = n(1, 2, 3, 4)
    cases.append(("crop2d", lambda: T.mul(T.crop2d(xcr, 3, 4), Tensor(wcr)), {"x": xcr}))
    xa, xb2 = t(n(2, 2, 3, 3), "a"), t(n(2, 3, 3, 3), "b")
    wcat = n(2, 5, 3, 3)
    cases.append(("concat_channels",
                  lambda: T.mul(T.concat_channels([xa, xb2]), Tensor(wcat)), {"a": xa, "b": xb2}))
    logits, targets = t(n(6), "logits"), (rng.random(6) < 0.5).astype(float)
    cases.append(("bce_with_logits", lambda: T.bce_with_logits(logits, targets), {"logits": logits}))

    for n_embed, label in ((1, "condenser_branch_a"), (2, "condenser_branch_b")):
        br = init_condenser_branch(8, n_embed, rng=rng)
        v = t(_spaced(rng, (2, 8, 8, 8), 0.02), "v")
        inputs = {"v": v, **{k: p for k, p in br.tensors()}}
        cases.append((label, lambda br=br, v=v: condenser_branch_forward(v, br), inputs))
    params = DcacModuleParams(init_condenser_branch(8, 1, rng=rng), init_condenser_branch(8, 2, rng=rng))
    vd = t(_spaced(rng, (2, 8, 16, 16), 0.002), "v")
    wdc = n(2, 8, 16, 16)
    inputs = {"v": vd, **{"a." + k: p for k, p in params.branch_a.tensors()},
              **{"b." + k: p for k, p in params.branch_b.tensors()}}
    cases.append(("dcac_block", lambda: T.mul(dcac_forward(vd, params), Tensor(wdc)), inputs))
    vo = t(_spaced(rng, (1, 8, 7, 9), 0.02), "v")
    params_o = DcacModuleParams(init_condenser_branch(8, 1, rng=rng), init_condenser_branch(8, 2, rng=rng))
    cases.append(("dcac_block_odd", lambda: dcac_forward(vo, params_o, pad_odd=True), {"v": vo}))
    va = t(n(2, 4, 7, 8), "v")
    aads = AadsParams.for_channels(4)
    wa = n(2, 4, 4, 4)
    cases.append(("aads", lambda: T.mul(aads_forward(va, aads), Tensor(wa)), {"v": va}))
    block = ConvBlock(3, 4, rng=rng)
    xk = t(n(2, 3, 6, 6), "x")
    wk = n(2, 4, 6, 6)
    cases.append(("conv_block", lambda: T.mul(block(xk), Tensor(wk)),
                  {"x": xk, **dict(block.named_parameters())}))
    return cases


def layer_suite(seed: int = 0, corrupt: bool = False, epsilon: float = 1e-6,
                tolerance: float = 1e-4) -> list:
    """Finite-difference check of every differentiable layer on small shapes.

    With ``corrupt`` the sigmoid case runs against a deliberately wrong
    backward rule, so the suite must report a failure. The small default
    step keeps ±epsilon from crossing ReLU kinks in intermediate activations;
    float64 rounding at this step stays near 1e-9 relative.
    """
    rng = np.random.default_rng(seed)
    return [grad_check(fn, inputs, epsilon, tolerance, label=name)
            for name, fn, inputs in _suite_cases(rng, corrupt)]
