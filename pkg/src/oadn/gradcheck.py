"""Finite-difference verification of every differentiable op and of the full loss.

Relative error of one gradient entry is ``|a - n| / max(|a|, |n|, floor)``
where ``a`` is the taped gradient, ``n`` the central difference and
``floor = 1e-6`` keeps near-zero entries from dividing by zero.  A check
reports the worst entry over all inputs and seeds.
"""

from __future__ import annotations

import time
from dataclasses import dataclass
from functools import partial
from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Tensor, backward
from .model import BackboneConfig, ConvSpec, ModelConfig, RegionConfig, combined_loss, forward, init_params

DEFAULT_EPS = 1e-5
DEFAULT_TOL = 1e-4
DENOM_FLOOR = 1e-6


def numerical_gradient(f: Callable[[], float], x: np.ndarray, eps: float = DEFAULT_EPS) -> np.ndarray:
    """Central differences of scalar ``f()`` w.r.t. array ``x`` (perturbed in place)."""
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + eps
        up = f()
        flat[i] = old - eps
        down = f()
        flat[i] = old
        gflat[i] = (up - down) / (2 * eps)
    return grad


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = DENOM_FLOOR) -> float:
    a, n = np.asarray(analytic), np.asarray(numeric)
    if a.size == 0:
        return 0.0
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
    return float(np.max(np.abs(a - n) / denom))


def check_gradients(loss_fn: Callable[..., Tensor], inputs: Sequence[np.ndarray], eps: float = DEFAULT_EPS) -> float:
    """Worst relative error of d loss_fn(*inputs) / d inputs.

    ``loss_fn`` receives ``Tensor`` objects and must return a scalar Tensor.
    """
    arrays = [np.array(x, dtype=np.float64) for x in inputs]
    tensors = [Tensor(a, requires_grad=True) for a in arrays]
    with Tape():
        loss = loss_fn(*tensors)
        backward(loss)
    worst = 0.0
    for t, arr in zip(tensors, arrays):
        def f():
            return float(loss_fn(*[Tensor(a) for a in arrays]).data)

        t.data = arr  # same buffer that numerical_gradient perturbs
        num = numerical_gradient(f, arr, eps)
        worst = max(worst, relative_error(t.grad, num))
    return worst


def _project(out: Tensor, seed: int) -> Tensor:
    """Reduce any output to a scalar with random weights fixed by ``seed``."""
    weights = Tensor(np.random.default_rng(seed).normal(size=out.shape))
    return ad.sum_(ad.elementwise_mul(out, weights))


def _away_from_zero(rng, shape, margin=0.05):
    x = rng.normal(size=shape)
    return np.where(np.abs(x) < margin, np.sign(x + 1e-12) * margin + x, x)


def _distinct(rng, shape, count):
    # well-separated values so the max never switches under a 1e-5 nudge
    vals = rng.permutation(count * int(np.prod(shape))).reshape((count,) + tuple(shape)) * 0.1
    return [vals[k] + rng.normal(scale=0.01, size=shape) for k in range(count)]


@dataclass
class OpCheck:
    name: str
    run: Callable[[np.random.Generator], float]  # returns worst relative error for one seed


def _op_checks(eps: float = DEFAULT_EPS) -> list[OpCheck]:
    check = partial(check_gradients, eps=eps)

    def ew_mul(rng):
        ps = int(rng.integers(2**31))
        return check(lambda a, b: _project(ad.elementwise_mul(a, b), ps), [rng.normal(size=(2, 3, 4, 4)), rng.normal(size=(2, 3, 4, 4))])

    def ew_mul_bcast(rng):
        ps = int(rng.integers(2**31))
        return check(lambda a, b: _project(ad.elementwise_mul(a, b), ps), [rng.normal(size=(2, 3, 4, 4)), rng.uniform(size=(2, 1, 4, 4))])

    def conv(rng):
        ps = int(rng.integers(2**31))
        stride = int(rng.integers(1, 3))
        pad = int(rng.integers(0, 2))
        x = rng.normal(size=(2, 2, 5, 5))
        k = rng.normal(size=(3, 2, 3, 3))
        b = rng.normal(size=3)
        return check(lambda x, k, b: _project(ad.conv2d(x, k, b, stride, pad), ps), [x, k, b])

    def gap(rng):
        ps = int(rng.integers(2**31))
        return check(lambda x: _project(ad.global_avg_pool(x), ps), [rng.normal(size=(2, 3, 4, 5))])

    def maxset(rng):
        ps = int(rng.integers(2**31))
        xs = _distinct(rng, (2, 4), 3)
        return check(lambda a, b, c: _project(ad.max_reduce_set([a, b, c]), ps), xs)

    def smax(rng):
        ps = int(rng.integers(2**31))
        return check(lambda z: _project(ad.softmax(z), ps), [rng.normal(size=(3, 5))])

    def xent(rng):
        labels = rng.integers(0, 5, size=3)
        return check(lambda z: ad.cross_entropy(ad.softmax(z), labels), [rng.normal(size=(3, 5))])

    def mm(rng):
        ps = int(rng.integers(2**31))
        return check(lambda a, b: _project(ad.matmul(a, b), ps), [rng.normal(size=(3, 4)), rng.normal(size=(4, 2))])

    def lin(rng):
        ps = int(rng.integers(2**31))
        return check(
            lambda x, w, b: _project(ad.linear(x, w, b), ps),
            [rng.normal(size=(3, 4)), rng.normal(size=(4, 2)), rng.normal(size=2)],
        )

    def rl(rng):
        ps = int(rng.integers(2**31))
        return check(lambda x: _project(ad.relu(x), ps), [_away_from_zero(rng, (3, 4))])

    def rs(rng):
        ps = int(rng.integers(2**31))
        return check(lambda x: _project(ad.reshape(x, (4, 6)), ps), [rng.normal(size=(2, 3, 4))])

    def sl(rng):
        ps = int(rng.integers(2**31))
        return check(lambda x: _project(ad.slice_(x, (slice(None), slice(1, 3), slice(0, 4, 2))), ps), [rng.normal(size=(2, 4, 5))])

    def addop(rng):
        ps = int(rng.integers(2**31))
        return check(lambda a, b: _project(ad.add(a, b), ps), [rng.normal(size=(3, 2)), rng.normal(size=(3, 2))])

    def sc(rng):
        ps = int(rng.integers(2**31))
        f = float(rng.normal())
        return check(lambda a: _project(ad.scale(a, f), ps), [rng.normal(size=(3, 2))])

    def sm(rng):
        return check(lambda a: ad.sum_(ad.elementwise_mul(a, a)), [rng.normal(size=(3, 2))])

    def mn(rng):
        return check(lambda a: ad.mean(ad.elementwise_mul(a, a)), [rng.normal(size=(3, 2))])

    return [
        OpCheck("elementwise_mul", ew_mul),
        OpCheck("elementwise_mul[channel-broadcast]", ew_mul_bcast),
        OpCheck("conv2d", conv),
        OpCheck("global_avg_pool", gap),
        OpCheck("max_reduce_set", maxset),
        OpCheck("softmax", smax),
        OpCheck("cross_entropy", xent),
        OpCheck("matmul", mm),
        OpCheck("linear", lin),
        OpCheck("relu", rl),
        OpCheck("reshape", rs),
        OpCheck("slice", sl),
        OpCheck("add", addop),
        OpCheck("scale", sc),
        OpCheck("sum", sm),
        OpCheck("mean", mn),
    ]


# -- end-to-end tiny model ----------------------------------------------------

TINY_MODEL = ModelConfig(
    backbone=BackboneConfig(
        layers=(ConvSpec(4, 3, 2, 1), ConvSpec(4, 3, 2, 1), ConvSpec(4, 3, 1, 1), ConvSpec(4, 3, 1, 1)),
        input_size=(16, 16),
        in_channels=1,
    ),
    region=RegionConfig(2, 2),
    num_classes=3,
    reduced_dim=5,
    num_points=4,
)


KINK_MARGIN = 1e-3


def kink_distance(tape: Tape) -> float:
    """Smallest distance of any relu input from 0, or of any max from its runner-up.

    Central differences straddling such a point measure a one-sided slope, so
    an end-to-end check is only meaningful when this is well above ``eps``.
    """
    from .autodiff import ops

    dist = np.inf
    for rec in tape.records:
        if rec.op is ops.ReLU:
            dist = min(dist, float(np.abs(rec.inputs[0].data).min()))
        elif rec.op is ops.MaxReduceSet and len(rec.inputs) > 1:
            top = np.sort(np.stack([t.data for t in rec.inputs]), axis=0)
            gap = top[-1] - top[-2]
            # exact ties between all-zero gated vectors are not kinks of the loss
            live = top[-1] != 0
            if live.any():
                dist = min(dist, float(gap[live].min()))
    return dist


def _tiny_problem(seed: int):
    cfg = TINY_MODEL
    rng = np.random.default_rng(seed)
    params = init_params(cfg, seed=seed, dtype=np.float64)
    for name, t in params.items():
        if name.endswith("bias"):
            t.data = rng.normal(scale=0.1, size=t.shape)
    images = Tensor(rng.normal(size=(2, 1) + cfg.backbone.input_size))
    h, w = cfg.backbone.feat_size
    stack = rng.uniform(size=(2, cfg.num_points, h, w))
    stack[0, 1] = 0.0  # one occluded point
    labels = rng.integers(0, cfg.num_classes, size=2)
    return params, images, stack, labels


def end_to_end_check(seed: int = 0, lam: float = 0.5, eps: float = DEFAULT_EPS) -> float:
    """Worst relative error of the combined loss w.r.t. every parameter of the tiny model.

    Problems whose forward pass sits within ``KINK_MARGIN`` of a relu or max
    kink are redrawn from the next sub-seed.
    """
    cfg = TINY_MODEL
    for attempt in range(100):
        params, images, stack, labels = _tiny_problem(seed * 1000 + attempt)
        with Tape() as tape:
            lab_p, frb_p = forward(images, stack, params, cfg)
            loss = combined_loss(lab_p, frb_p, labels, lam)
            backward(loss)
        if kink_distance(tape) > KINK_MARGIN:
            break
    else:
        raise RuntimeError("could not draw a kink-free tiny problem")

    def loss_value() -> float:
        lab_p, frb_p = forward(images, stack, params, cfg)
        return float(combined_loss(lab_p, frb_p, labels, lam).data)

    analytic = {k: t.grad.copy() for k, t in params.items()}
    worst = 0.0
    for name, t in params.items():
        num = numerical_gradient(loss_value, t.data, eps)
        worst = max(worst, relative_error(analytic[name], num))
    return worst


@dataclass
class CheckResult:
    name: str
    max_rel_error: float
    seeds: int
    passed: bool


def run_suite(
    seeds: int = 20,
    eps: float = DEFAULT_EPS,
    tol: float = DEFAULT_TOL,
    checks: Sequence[OpCheck] | None = None,
    end_to_end_seeds: int = 3,
) -> list[CheckResult]:
    checks = list(checks) if checks is not None else _op_checks(eps)
    results = []
    for chk in checks:
        worst = 0.0
        for s in range(seeds):
            worst = max(worst, chk.run(np.random.default_rng(1000 + s)))
        results.append(CheckResult(chk.name, worst, seeds, worst < tol))
    if end_to_end_seeds:
        worst = max(end_to_end_check(seed=s, eps=eps) for s in range(end_to_end_seeds))
        results.append(CheckResult("oadn_combined_loss", worst, end_to_end_seeds, worst < tol))
    return results


def format_report(results: Sequence[CheckResult], eps: float, tol: float, dtype_bits: int = 64, elapsed: float | None = None) -> str:
    width = max(len(r.name) for r in results)
    lines = [f"gradcheck: eps={eps:g} dtype=float{dtype_bits} tol={tol:g}"]
    for r in results:
        lines.append(f"{r.name:<{width}}  max_rel_err={r.max_rel_error:.3e}  seeds={r.seeds:<3d} {'PASS' if r.passed else 'FAIL'}")
    failed = [r.name for r in results if not r.passed]
    lines.append("all checks passed" if not failed else "FAILED: " + ", ".join(failed))
    if elapsed is not None:
        lines.append(f"elapsed {elapsed:.1f}s")
    return "\n".join(lines) + "\n"


def op_checks(eps: float = DEFAULT_EPS) -> list[OpCheck]:
    return _op_checks(eps)


def faulty(check: OpCheck, factor: float = 1.01) -> OpCheck:
    """Negative control: same check with the op's backward scaled by ``factor``."""
    from .autodiff import ops

    target = {
        "elementwise_mul": ops.ElementwiseMul,
        "elementwise_mul[channel-broadcast]": ops.ElementwiseMul,
        "conv2d": ops.Conv2d,
        "global_avg_pool": ops.GlobalAvgPool,
        "max_reduce_set": ops.MaxReduceSet,
        "softmax": ops.Softmax,
        "cross_entropy": ops.CrossEntropy,
        "matmul": ops.MatMul,
        "linear": ops.Linear,
        "relu": ops.ReLU,
        "reshape": ops.Reshape,
        "slice": ops.Slice,
        "add": ops.Add,
        "scale": ops.Scale,
        "sum": ops.Sum,
        "mean": ops.Mean,
    }[check.name]

    def run(rng):
        original = target.backward

        def broken(ctx, g):
            return tuple(None if gi is None else gi * factor for gi in original(ctx, g))

        target.backward = staticmethod(broken)
        try:
            return check.run(rng)
        finally:
            target.backward = staticmethod(original)

    return OpCheck(check.name, run)


def timed_suite(**kwargs) -> tuple[list[CheckResult], float]:
    t0 = time.perf_counter()
    res = run_suite(**kwargs)
    return res, time.perf_counter() - t0
