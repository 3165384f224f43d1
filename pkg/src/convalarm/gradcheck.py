"""Finite-difference verification of every differentiable operation.

Each registered case builds small random float64 inputs, reduces the op's
output to a scalar through a fixed random projection, and compares the
tape's analytic gradients against central finite differences (step 1e-3,
evaluated in 64-bit).  The error metric per element is

    |analytic - numeric| / max(1, |analytic|, |numeric|)

so it is relative for large gradients and absolute near zero.  Kinked ops
(relu, elu, clamp, max pooling) get inputs nudged away from their kinks so
the finite-difference window never straddles one.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import convops as C
from . import tensor as T
from .tensor import Tape, Tensor, backward

__all__ = ["OpCheck", "GRADCHECK_OPS", "check_op", "run_gradcheck", "format_table"]

STEP = 1e-3
THRESHOLD = 1e-3


@dataclass
class OpCheck:
    op: str
    max_rel_err: float
    passed: bool


def _away_from(x: np.ndarray, gap: float = 0.1) -> np.ndarray:
    """Push values at least ``gap`` away from zero (kink avoidance)."""
    return np.where(x >= 0, x + gap, x - gap)


# Each case: rng -> (input arrays that receive gradients, fn(*tensors) -> Tensor)
_Case = Callable[[np.random.Generator], tuple[list[np.ndarray], Callable[..., Tensor]]]


def _case_add(rng):
    return ([rng.standard_normal((3, 2, 4)), rng.standard_normal((2, 4))],
            lambda a, b: T.add(a, b))


def _case_sub(rng):
    return ([rng.standard_normal((3, 4)), rng.standard_normal(4)],
            lambda a, b: T.sub(a, b))


def _case_mul(rng):
    return ([rng.standard_normal((2, 3, 2)), rng.standard_normal((3, 1))],
            lambda a, b: T.mul(a, b))


def _case_neg(rng):
    return [rng.standard_normal((3, 3))], T.neg


def _case_exp(rng):
    return [rng.standard_normal((3, 4)) * 0.5], T.exp


def _case_log(rng):
    return [np.abs(rng.standard_normal((3, 4))) + 0.5], T.log


def _case_clamp(rng):
    x = rng.standard_normal((4, 4)) * 2.0
    # keep every value a safe distance from the clamp bounds
    x[np.abs(np.abs(x) - 1.0) < 0.05] += 0.2
    return [x], lambda t: T.clamp(t, -1.0, 1.0)


def _case_sigmoid(rng):
    return [rng.standard_normal((3, 5))], T.sigmoid


def _case_relu(rng):
    return [_away_from(rng.standard_normal((4, 4)))], T.relu


def _case_elu(rng):
    return [_away_from(rng.standard_normal((4, 4)))], T.elu


def _case_linear(rng):
    return ([rng.standard_normal((3, 4)), rng.standard_normal((4, 5)),
             rng.standard_normal(5)], T.linear)


def _case_reshape(rng):
    return [rng.standard_normal((2, 3, 4))], lambda t: T.reshape(t, (4, 6))


def _case_flatten(rng):
    return [rng.standard_normal((2, 3, 2, 2))], T.flatten


def _case_reshape_split_stack(rng):
    return [rng.standard_normal((3, 12))], lambda t: T.reshape_split_stack(t, 4)


def _case_slice_cols(rng):
    return [rng.standard_normal((3, 8))], lambda t: T.slice_cols(t, 2, 6)


def _case_sum(rng):
    return [rng.standard_normal((3, 4))], T.sum_all


def _case_mean(rng):
    return [rng.standard_normal((3, 4))], T.mean_all


def _case_sum_axes(rng):
    return [rng.standard_normal((2, 3, 4))], lambda t: T.sum_axes(t, (1, 2))


def _case_mean_axes(rng):
    return [rng.standard_normal((2, 3, 4))], lambda t: T.mean_axes(t, (1, 2))


def _case_mse(rng):
    return ([rng.standard_normal((3, 4)), rng.standard_normal((3, 4))], T.mse)


def _case_per_sample_mse(rng):
    return ([rng.standard_normal((3, 2, 3)), rng.standard_normal((3, 2, 3))],
            T.per_sample_mse)


def _case_bce(rng):
    y = rng.integers(0, 2, 6).astype(np.float64)
    p = rng.uniform(0.1, 0.9, 6)
    return [p], lambda t: T.bce(Tensor(y, dtype=np.float64), t)


def _case_conv2d(rng):
    return ([rng.standard_normal((2, 2, 5, 4)), rng.standard_normal((3, 2, 3, 2)),
             rng.standard_normal(3)],
            lambda x, w, b: C.conv2d(x, w, b, stride=2, padding=1))


def _case_conv1d(rng):
    return ([rng.standard_normal((2, 3, 8)), rng.standard_normal((2, 3, 3)),
             rng.standard_normal(2)],
            lambda x, w, b: C.conv1d(x, w, b, stride=2, padding=1))


def _case_conv_transpose2d(rng):
    return ([rng.standard_normal((2, 2, 3, 3)), rng.standard_normal((2, 3, 2, 2)),
             rng.standard_normal(3)],
            lambda x, w, b: C.conv_transpose2d(x, w, b, stride=2, padding=1,
                                               output_padding=1))


def _case_conv_transpose1d(rng):
    return ([rng.standard_normal((2, 2, 4)), rng.standard_normal((2, 3, 3)),
             rng.standard_normal(3)],
            lambda x, w, b: C.conv_transpose1d(x, w, b, stride=2, padding=1,
                                               output_padding=1))


def _case_adaptive_avg_pool(rng):
    x2 = rng.standard_normal((2, 2, 5, 7))
    x1 = rng.standard_normal((2, 3, 9))
    # exercise both ranks under one registered name
    return ([x2, x1], lambda a, b: T.add(
        T.sum_all(C.adaptive_avg_pool(a, (2, 3))),
        T.sum_all(C.adaptive_avg_pool(b, (4,)))))


def _case_adaptive_max_pool(rng):
    # well-separated values keep the argmax stable under the FD step
    x = (rng.permutation(2 * 2 * 6 * 5).reshape(2, 2, 6, 5) * 0.37
         + rng.uniform(-0.01, 0.01)).astype(np.float64)
    return [x], lambda t: C.adaptive_max_pool(t, (3, 2))


def _case_concat_channels(rng):
    return ([rng.standard_normal((2, 2, 3, 3)), rng.standard_normal((2, 3, 3, 3))],
            lambda a, b: C.concat_channels([a, b]))


GRADCHECK_OPS: dict[str, _Case] = {
    "add": _case_add,
    "sub": _case_sub,
    "mul": _case_mul,
    "neg": _case_neg,
    "exp": _case_exp,
    "log": _case_log,
    "clamp": _case_clamp,
    "sigmoid": _case_sigmoid,
    "relu": _case_relu,
    "elu": _case_elu,
    "linear": _case_linear,
    "reshape": _case_reshape,
    "flatten": _case_flatten,
    "reshape_split_stack": _case_reshape_split_stack,
    "slice_cols": _case_slice_cols,
    "sum": _case_sum,
    "mean": _case_mean,
    "sum_axes": _case_sum_axes,
    "mean_axes": _case_mean_axes,
    "mse": _case_mse,
    "per_sample_mse": _case_per_sample_mse,
    "bce": _case_bce,
    "conv2d": _case_conv2d,
    "conv1d": _case_conv1d,
    "conv_transpose2d": _case_conv_transpose2d,
    "conv_transpose1d": _case_conv_transpose1d,
    "adaptive_avg_pool": _case_adaptive_avg_pool,
    "adaptive_max_pool": _case_adaptive_max_pool,
    "concat_channels": _case_concat_channels,
}


def _analytic_gradients(fn, arrays, proj):
    tensors = [Tensor(a, requires_grad=True, dtype=np.float64) for a in arrays]
    with Tape() as tape:
        out = fn(*tensors)
        loss = T.sum_all(T.mul(out, Tensor(proj, dtype=np.float64)))
    backward(loss, tape)
    return [t.grad for t in tensors]


def _numeric_gradients(fn, arrays, proj, step=STEP):
    def value(current):
        out = fn(*[Tensor(a, dtype=np.float64) for a in current])
        return float((out.data * proj).sum())

    arrays = [np.array(a, dtype=np.float64) for a in arrays]
    grads = []
    for ai in range(len(arrays)):
        flat = arrays[ai].reshape(-1)
        g = np.zeros_like(flat)
        for i in range(flat.size):
            keep = flat[i]
            flat[i] = keep + step
            up = value(arrays)
            flat[i] = keep - step
            dn = value(arrays)
            flat[i] = keep
            g[i] = (up - dn) / (2.0 * step)
        grads.append(g.reshape(arrays[ai].shape))
    return grads


def check_op(name: str, seeds: int = 20, base_seed: int = 0,
             corrupt: bool = False) -> OpCheck:
    """Run one op's case over ``seeds`` random instances; report the worst error."""
    case = GRADCHECK_OPS[name]
    worst = 0.0
    for s in range(seeds):
        rng = np.random.default_rng(base_seed * 100_003 + s)
        arrays, fn = case(rng)
        probe_out = fn(*[Tensor(a, dtype=np.float64) for a in arrays])
        proj = rng.standard_normal(probe_out.shape)
        analytic = _analytic_gradients(fn, arrays, proj)
        numeric = _numeric_gradients(fn, arrays, proj)
        if corrupt:
            analytic = [a + 0.05 for a in analytic]
        for a, n in zip(analytic, numeric):
            denom = np.maximum(1.0, np.maximum(np.abs(a), np.abs(n)))
            worst = max(worst, float(np.max(np.abs(a - n) / denom)))
    return OpCheck(op=name, max_rel_err=worst, passed=worst < THRESHOLD)


def run_gradcheck(base_seed: int = 0, seeds: int = 20,
                  corrupt_op: str | None = None) -> list[OpCheck]:
    """Check every registered differentiable op; each appears exactly once.

    ``corrupt_op`` is a testing hook: the named op's analytic gradients are
    perturbed before comparison, which must surface as a failure.
    """
    if corrupt_op is not None and corrupt_op not in GRADCHECK_OPS:
        raise ValueError(f"unknown op {corrupt_op!r} for corruption hook")
    return [check_op(name, seeds=seeds, base_seed=base_seed,
                     corrupt=(name == corrupt_op))
            for name in GRADCHECK_OPS]


def format_table(results: list[OpCheck]) -> str:
    width = max(len(r.op) for r in results)
    lines = [f"{'op':<{width}}  {'max rel err':>12}  status"]
    for r in results:
        status = "ok" if r.passed else "FAIL"
        lines.append(f"{r.op:<{width}}  {r.max_rel_err:>12.3e}  {status}")
    return "\n".join(lines)
