"""Central finite-difference checks for the differentiable operations.

Each case builds random float64 inputs, contracts the op output with a fixed
random projection to get a scalar, and compares the tape gradient of every
input against central differences.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from neuromoco.tensor import core, nn
from neuromoco.tensor.core import Tensor, backward, no_grad, precision

FD_STEP = 1e-6


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    denom = max(np.linalg.norm(analytic), np.linalg.norm(numeric), 1e-12)
    return float(np.linalg.norm(analytic - numeric) / denom)


def check_gradients(fn: Callable[..., Tensor], arrays: list[np.ndarray], seed: int = 0, step: float = FD_STEP) -> float:
    """Max relative error between tape and finite-difference gradients."""
    with precision(np.float64):
        rng = np.random.default_rng(seed)
        inputs = [Tensor(a, requires_grad=True) for a in arrays]
        out = fn(*inputs)
        proj = rng.normal(size=out.shape)

        def scalar(vals):
            with no_grad():
                return float((fn(*[Tensor(v) for v in vals]).data * proj).sum())

        backward(core.sum_over(core.mul(out, Tensor(proj))))
        worst = 0.0
        vals = [a.astype(np.float64).copy() for a in arrays]
        for i, t in enumerate(inputs):
            numeric = np.zeros_like(vals[i])
            flat = vals[i].reshape(-1)
            nflat = numeric.reshape(-1)
            for j in range(flat.size):
                orig = flat[j]
                flat[j] = orig + step
                fp = scalar(vals)
                flat[j] = orig - step
                fm = scalar(vals)
                flat[j] = orig
                nflat[j] = (fp - fm) / (2 * step)
            analytic = t.grad if t.grad is not None else np.zeros_like(numeric)
            worst = max(worst, relative_error(analytic, numeric))
        return worst


@dataclass(frozen=True)
class GradCase:
    name: str
    build: Callable[[np.random.Generator], tuple[Callable[..., Tensor], list[np.ndarray]]]


def _shape(rng, lo=1, hi=4, rank=2):
    return tuple(int(d) for d in rng.integers(lo, hi + 1, size=rank))


def _binary(op):
    def build(rng):
        s = _shape(rng, rank=int(rng.integers(1, 4)))
        return op, [rng.normal(size=s), rng.normal(size=s)]
    return build


def _scale(rng):
    s = _shape(rng, rank=3)
    c = float(rng.normal())
    return (lambda a: core.scale(a, c)), [rng.normal(size=s)]


def _matmul(rng):
    m, k, n = _shape(rng, rank=3)
    return core.matmul, [rng.normal(size=(m, k)), rng.normal(size=(k, n))]


def _batched_matmul(rng):
    b, m, k, n = _shape(rng, rank=4)
    return core.matmul, [rng.normal(size=(b, m, k)), rng.normal(size=(b, k, n))]


def _conv(rng):
    n, cin, cout = _shape(rng, 1, 3, 3)
    k = int(rng.choice([1, 3]))
    stride = int(rng.integers(1, 3))
    pad = int(rng.integers(0, 2))
    h, w = _shape(rng, k + 1, 6, 2)
    return (
        lambda x, wt, b: nn.conv2d(x, wt, b, stride=stride, padding=pad),
        [rng.normal(size=(n, cin, h, w)), rng.normal(size=(cout, cin, k, k)), rng.normal(size=(cout,))],
    )


def _max_pool(rng):
    n, c = _shape(rng, 1, 3, 2)
    k = 2
    h, w = (2 * int(d) for d in _shape(rng, 1, 3, 2))
    return (lambda x: nn.max_pool2d(x, k)), [rng.normal(size=(n, c, h, w))]


def _avg_pool(rng):
    n, c = _shape(rng, 1, 3, 2)
    h, w = (2 * int(d) for d in _shape(rng, 1, 3, 2))
    return (lambda x: nn.avg_pool2d(x, 2)), [rng.normal(size=(n, c, h, w))]


def _batch_norm(rng):
    n = int(rng.integers(2, 5))
    c, h, w = _shape(rng, 1, 3, 3)
    training = bool(rng.integers(0, 2))
    rm = rng.normal(size=c)
    rv = rng.uniform(0.5, 2.0, size=c)

    def fn(x, g, b):
        return nn.batch_norm(x, g, b, rm.copy(), rv.copy(), training=training)

    return fn, [rng.normal(size=(n, c, h, w)), rng.normal(size=c), rng.normal(size=c)]


def _linear(rng):
    lead = _shape(rng, 1, 3, int(rng.integers(1, 3)))
    i, o = _shape(rng, 1, 5, 2)
    return nn.linear, [rng.normal(size=lead + (i,)), rng.normal(size=(o, i)), rng.normal(size=(o,))]


def _mean(rng):
    s = _shape(rng, rank=3)
    axis = int(rng.integers(0, 3))
    return (lambda a: core.mean_over(a, axis)), [rng.normal(size=s)]


def _concat(rng):
    a, b, c = _shape(rng, rank=3)
    d = int(rng.integers(1, 4))
    return (lambda x, y: core.concat([x, y], axis=1)), [rng.normal(size=(a, b, c)), rng.normal(size=(a, d, c))]


def _l2(rng):
    s = _shape(rng, 1, 4, 3)
    return (lambda a: core.l2_normalize(a, axis=-1)), [rng.normal(size=s)]


def _ce(rng):
    lead = _shape(rng, 1, 3, 2)
    k = int(rng.integers(2, 6))
    tgt = rng.integers(0, k, size=lead)
    return (lambda z: nn.cross_entropy_from_logits(z, tgt)), [rng.normal(size=lead + (k,)) * 3]


def _relu(rng):
    s = _shape(rng, rank=2)
    x = rng.normal(size=s)
    x[np.abs(x) < 1e-3] = 0.5  # keep away from the kink
    return core.relu, [x]


def _transpose(rng):
    s = _shape(rng, rank=3)
    perm = tuple(int(p) for p in rng.permutation(3))
    return (lambda a: core.transpose(a, perm)), [rng.normal(size=s)]


def _sum(rng):
    s = _shape(rng, rank=3)
    return (lambda a: core.sum_over(a, axis=(0, 2))), [rng.normal(size=s)]


def _reshape(rng):
    a, b, c = _shape(rng, rank=3)
    return (lambda x: core.reshape(x, (c, a * b))), [rng.normal(size=(a, b, c))]


def _getitem(rng):
    a, b = _shape(rng, 2, 5, 2)
    return (lambda x: x[1:, ::2]), [rng.normal(size=(a, b))]


def _exp_log(rng):
    s = _shape(rng, rank=2)
    return (lambda x: core.log(core.exp(core.scale(x, 0.5)) + 1.0)), [rng.normal(size=s)]


def _reciprocal(rng):
    s = _shape(rng, rank=2)
    return core.reciprocal, [rng.uniform(0.5, 2.0, size=s) * rng.choice([-1, 1], size=s)]


CASES: list[GradCase] = [
    GradCase("add", _binary(core.add)),
    GradCase("sub", _binary(core.sub)),
    GradCase("mul_elementwise", _binary(core.mul)),
    GradCase("scale", _scale),
    GradCase("matmul", _matmul),
    GradCase("batched_matmul", _batched_matmul),
    GradCase("conv2d", _conv),
    GradCase("max_pool2d", _max_pool),
    GradCase("avg_pool2d", _avg_pool),
    GradCase("batch_norm", _batch_norm),
    GradCase("linear", _linear),
    GradCase("mean_over", _mean),
    GradCase("concat", _concat),
    GradCase("l2_normalize", _l2),
    GradCase("cross_entropy", _ce),
    GradCase("relu", _relu),
    GradCase("transpose", _transpose),
    GradCase("sum_over", _sum),
    GradCase("reshape", _reshape),
    GradCase("getitem", _getitem),
    GradCase("exp_log", _exp_log),
    GradCase("reciprocal", _reciprocal),
]


def spike_surrogate_error(seed: int, size: int = 64, threshold: float = 1.0) -> float:
    """Max abs deviation of spike backward from the closed-form surrogate."""
    rng = np.random.default_rng(seed)
    with precision(np.float64):
        v = Tensor(rng.normal(loc=threshold, scale=1.0, size=size), requires_grad=True)
        backward(core.sum_over(nn.spike(v, threshold)))
        expected = nn.surrogate_grad(v.data - threshold)
        return float(np.abs(v.grad - expected).max())


def run_suite(seeds: int = 20) -> dict[str, float]:
    """Worst relative error per op over *seeds* random cases."""
    report: dict[str, float] = {}
    for case in CASES:
        worst = 0.0
        for seed in range(seeds):
            rng = np.random.default_rng(10_000 + seed)
            fn, arrays = case.build(rng)
            worst = max(worst, check_gradients(fn, arrays, seed=seed))
        report[case.name] = worst
    report["spike_surrogate"] = max(spike_surrogate_error(s) for s in range(seeds))
    return report
