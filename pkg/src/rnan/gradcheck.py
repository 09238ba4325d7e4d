"""Finite-difference verification of tape gradients.

``grad_check`` compares the tape's vector-Jacobian product against central
differences in float64. ``OP_CASES`` holds random-case generators for every
differentiable op; ``run_op_suite`` and ``model_grad_check`` are what the
``gradcheck`` command and the acceptance tests drive.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from . import tensor as T
from .tensor import Tensor


def _rel_err(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    return np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), 1e-8)


def grad_check(
    fn: Callable[..., Tensor],
    inputs: Sequence[np.ndarray],
    eps: float = 1e-3,
    seed: int = 0,
    wrt: Sequence[int] | None = None,
) -> float:
    """Max relative error between tape gradients and central differences.

    ``fn`` maps Tensors to a Tensor. Non-scalar outputs are contracted with a
    fixed random cotangent so every output element contributes.
    """
    arrays = [np.array(a, dtype=np.float64) for a in inputs]
    wrt = range(len(arrays)) if wrt is None else wrt
    with T.precision("float64"):
        leaves = [Tensor(a.copy(), requires_grad=(i in wrt)) for i, a in enumerate(arrays)]
        T.get_tape().clear()
        out = fn(*leaves)
        rng = np.random.default_rng(seed)
        cot = np.ones(out.shape) if out.size == 1 else rng.standard_normal(out.shape)
        T.backward_with(out, cot)

        def f(vals: list[np.ndarray]) -> float:
            with T.no_grad():
                return float((fn(*[Tensor(v) for v in vals]).data * cot).sum())

        worst = 0.0
        for i in wrt:
            analytic = leaves[i].grad
            if analytic is None:
                analytic = np.zeros_like(arrays[i])
            numeric = np.zeros_like(arrays[i])
            flat = arrays[i].reshape(-1)
            for k in range(flat.size):
                orig = flat[k]
                flat[k] = orig + eps
                fp = f(arrays)
                flat[k] = orig - eps
                fm = f(arrays)
                flat[k] = orig
                numeric.reshape(-1)[k] = (fp - fm) / (2 * eps)
            worst = max(worst, float(_rel_err(analytic, numeric).max(initial=0.0)))
    return worst


def _away_from_zero(rng: np.random.Generator, shape, margin: float = 1e-2) -> np.ndarray:
    x = rng.standard_normal(shape)
    return np.where(np.abs(x) < margin, np.sign(x + 1e-12) * (margin + np.abs(x)), x)


def _ext(rng, lo=1, hi=6) -> int:
    return int(rng.integers(lo, hi + 1))


def _case_conv2d(rng):
    k = int(rng.choice([1, 3, 5]))
    stride = int(rng.choice([1, 2]))
    pad = int(rng.integers(0, k // 2 + 1))
    while True:
        h, w = _ext(rng, k, 6), _ext(rng, k, 6)
        if (h + 2 * pad - k) % stride == 0 and (w + 2 * pad - k) % stride == 0:
            break
    n, cin, cout = _ext(rng, 1, 2), _ext(rng, 1, 3), _ext(rng, 1, 3)
    xs = [rng.standard_normal((n, cin, h, w)), rng.standard_normal((cout, cin, k, k)), rng.standard_normal(cout)]
    return (lambda x, wt, b: T.conv2d(x, wt, b, stride=stride, pad=pad)), xs


def _case_depthwise(rng):
    k = int(rng.choice([1, 3, 5]))
    n, c, h, w = _ext(rng, 1, 2), _ext(rng, 1, 4), _ext(rng), _ext(rng)
    xs = [rng.standard_normal((n, c, h, w)), rng.standard_normal((c, 1, k, k)), rng.standard_normal(c)]
    return T.depthwise_conv2d, xs


def _case_pointwise(rng):
    n, cin, cout, h, w = _ext(rng, 1, 2), _ext(rng, 1, 4), _ext(rng, 1, 4), _ext(rng), _ext(rng)
    xs = [rng.standard_normal((n, cin, h, w)), rng.standard_normal((cout, cin, 1, 1)), rng.standard_normal(cout)]
    return T.pointwise_conv, xs


def _shape4(rng):
    return (_ext(rng, 1, 2), _ext(rng, 1, 4), _ext(rng), _ext(rng))


def _case_relu(rng):
    return T.relu, [_away_from_zero(rng, _shape4(rng))]


def _case_sigmoid(rng):
    return T.sigmoid, [2.0 * rng.standard_normal(_shape4(rng))]


def _case_layer_norm(rng):
    n, c = _ext(rng, 1, 3), _ext(rng, 2, 6)
    xs = [rng.standard_normal((n, c, 1, 1)), 1.0 + 0.5 * rng.standard_normal(c), rng.standard_normal(c)]
    return T.layer_norm, xs


def _case_pixel_shuffle(rng):
    s = int(rng.choice([2, 3]))
    n, c, h, w = _ext(rng, 1, 2), _ext(rng, 1, 2), _ext(rng, 1, 3), _ext(rng, 1, 3)
    return (lambda x: T.pixel_shuffle(x, s)), [rng.standard_normal((n, c * s * s, h, w))]


def _case_pixel_unshuffle(rng):
    s = int(rng.choice([2, 3]))
    n, c, h, w = _ext(rng, 1, 2), _ext(rng, 1, 2), _ext(rng, 1, 2), _ext(rng, 1, 2)
    return (lambda x: T.pixel_unshuffle(x, s)), [rng.standard_normal((n, c, h * s, w * s))]


def _case_concat(rng):
    n, h, w = _ext(rng, 1, 2), _ext(rng), _ext(rng)
    parts = [rng.standard_normal((n, _ext(rng, 1, 3), h, w)) for _ in range(_ext(rng, 1, 3))]
    return (lambda *xs: T.concat_channels(xs)), parts


def _case_softmax(rng):
    n, h, w = _ext(rng, 1, 2), _ext(rng), _ext(rng)
    return T.softmax_positions, [rng.standard_normal((n, 1, h, w))]


def _case_pool(rng):
    n, c, h, w = _shape4(rng)
    return T.weighted_spatial_pool, [rng.standard_normal((n, c, h, w)), rng.standard_normal((n, 1, h, w))]


def _case_add(rng):
    n, c, h, w = _shape4(rng)
    yshape = (n, c, h, w) if rng.random() < 0.5 else (n, c, 1, 1)
    return T.add, [rng.standard_normal((n, c, h, w)), rng.standard_normal(yshape)]


def _case_mul(rng):
    n, c, h, w = _shape4(rng)
    gshape = (n, c, h, w) if rng.random() < 0.5 else (n, c, 1, 1)
    return T.mul_broadcast, [rng.standard_normal((n, c, h, w)), rng.standard_normal(gshape)]


def _case_sum(rng):
    return T.sum_all, [rng.standard_normal(_shape4(rng))]


def _case_l1(rng):
    shape = _shape4(rng)
    target = rng.standard_normal(shape)
    return T.l1_loss, [target + _away_from_zero(rng, shape), target]


OP_CASES: dict[str, Callable[[np.random.Generator], tuple[Callable[..., Tensor], list[np.ndarray]]]] = {
    "conv2d": _case_conv2d,
    "depthwise_conv2d": _case_depthwise,
    "pointwise_conv": _case_pointwise,
    "relu": _case_relu,
    "sigmoid": _case_sigmoid,
    "layer_norm": _case_layer_norm,
    "pixel_shuffle": _case_pixel_shuffle,
    "pixel_unshuffle": _case_pixel_unshuffle,
    "concat_channels": _case_concat,
    "softmax_positions": _case_softmax,
    "weighted_spatial_pool": _case_pool,
    "add": _case_add,
    "mul_broadcast": _case_mul,
    "sum": _case_sum,
    "l1_loss": _case_l1,
}


def run_op_suite(
    ops: Sequence[str] | None = None, cases: int = 5, seed: int = 0, eps: float = 1e-3
) -> dict[str, float]:
    """Worst relative error per op over ``cases`` random shapes each."""
    ops = list(OP_CASES) if ops is None else list(ops)
    worst: dict[str, float] = {}
    for op in ops:
        if op not in OP_CASES:
            raise KeyError(f"unknown op {op!r}; choose from {sorted(OP_CASES)}")
        rng = np.random.default_rng([seed, sorted(OP_CASES).index(op)])
        errs = []
        for i in range(cases):
            fn, inputs = OP_CASES[op](rng)
            errs.append(grad_check(fn, inputs, eps=eps, seed=seed + i))
        worst[op] = max(errs)
    return worst


def model_grad_check(n_params: int = 10, seed: int = 0, eps: float = 1e-6, cfg=None) -> list[tuple[str, tuple, float, float, float]]:
    """Central-difference check of randomly chosen scalar weights of a tiny network.

    Returns ``(name, index, analytic, numeric, rel_err)`` per probed scalar.
    All weights (including the zero-initialized ones) are randomized so that
    every branch carries gradient.
    """
    from .model import ModelConfig, init_params, rnan_forward

    cfg = cfg or ModelConfig(G=1, B=1, C=4, scale=2, N=1, M=1, r=2)
    rng = np.random.default_rng(seed)
    with T.precision("float64"):
        weights = init_params(cfg, seed=seed)
        for p in weights.values():
            p.data[...] = 0.3 * rng.standard_normal(p.shape)
        x = Tensor(rng.random((1, 3, 5, 5)))
        out = rnan_forward(x, weights, cfg)
        cot = rng.standard_normal(out.shape)
        weights.zero_grad()
        T.backward_with(out, cot)

        names = list(weights)
        picks = []
        for _ in range(n_params):
            name = names[int(rng.integers(len(names)))]
            idx = tuple(int(rng.integers(d)) for d in weights[name].shape)
            picks.append((name, idx))

        results = []
        for name, idx in picks:
            p = weights[name]
            analytic = float(p.grad[idx])
            orig = p.data[idx]
            with T.no_grad():
                p.data[idx] = orig + eps
                fp = float((rnan_forward(x, weights, cfg).data * cot).sum())
                p.data[idx] = orig - eps
                fm = float((rnan_forward(x, weights, cfg).data * cot).sum())
                p.data[idx] = orig
            numeric = (fp - fm) / (2 * eps)
            err = float(_rel_err(np.array(analytic), np.array(numeric)))
            results.append((name, idx, analytic, numeric, err))
    return results
