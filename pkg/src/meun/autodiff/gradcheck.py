"""Central finite-difference gradient checking for registered primitives."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np

from meun.autodiff import ops
from meun.autodiff.tensor import Tensor, backward, get_tape


@dataclass
class OpCase:
    """How to exercise one primitive.

    ``make_inputs(rng, shapes)`` returns the float64 arrays that are checked;
    ``apply(*tensors)`` maps them to the output tensor. ``shapes`` is the
    default trial shape list.
    """

    make_inputs: Callable[[np.random.Generator, Sequence[tuple]], list]
    apply: Callable[..., Tensor]
    shapes: Sequence[tuple]


REGISTRY: dict[str, OpCase] = {}


def register(op_id: str, shapes: Sequence[tuple], make_inputs=None):
    def deco(fn):
        REGISTRY[op_id] = OpCase(make_inputs or uniform_inputs, fn, shapes)
        return fn

    return deco


def uniform_inputs(rng: np.random.Generator, shapes: Sequence[tuple]) -> list:
    return [rng.uniform(-1.0, 1.0, size=s) for s in shapes]


def away_from_zero(rng, shapes, margin=1e-2):
    out = []
    for s in shapes:
        x = rng.uniform(-1.0, 1.0, size=s)
        bad = np.abs(x) < margin
        while bad.any():
            x[bad] = rng.uniform(-1.0, 1.0, size=int(bad.sum()))
            bad = np.abs(x) < margin
        out.append(x)
    return out


def distinct_values(rng, shapes):
    """Values on a shuffled grid in [-1, 1] so no two entries are closer than 2/size."""
    out = []
    for s in shapes:
        size = int(np.prod(s))
        grid = np.linspace(-1.0, 1.0, size)
        out.append(rng.permutation(grid).reshape(s))
    return out


def probabilities(rng, shapes):
    return [rng.uniform(0.05, 0.95, size=s) for s in shapes]


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    denom = np.maximum(1e-8, np.abs(analytic) + np.abs(numeric))
    return float(np.max(np.abs(analytic - numeric) / denom)) if analytic.size else 0.0


def check_function(fn: Callable[..., Tensor], arrays: list, eps: float, rng) -> float:
    """Max relative error between analytic and numeric gradients of
    ``sum(fn(*inputs) * r)`` for a fixed random projection ``r``."""
    get_tape().clear()
    tensors = [Tensor(a.copy(), requires_grad=True) for a in arrays]
    out = fn(*tensors)
    proj = rng.uniform(-1.0, 1.0, size=out.shape)
    loss = ops.sum_all(ops.mul(out, Tensor(proj))) if out.ndim else out
    backward(loss)
    analytic = [t.grad if t.grad is not None else np.zeros_like(t.data) for t in tensors]

    def value(vals):
        with_t = [Tensor(v) for v in vals]
        return float(np.sum(fn(*with_t).data * proj)) if out.ndim else float(fn(*with_t).data)

    worst = 0.0
    for k, base in enumerate(arrays):
        numeric = np.zeros_like(base)
        it = np.nditer(base, flags=["multi_index"])
        for _ in it:
            idx = it.multi_index
            vals = [a.copy() for a in arrays]
            vals[k][idx] = base[idx] + eps
            fp = value(vals)
            vals[k][idx] = base[idx] - eps
            fm = value(vals)
            numeric[idx] = (fp - fm) / (2.0 * eps)
        worst = max(worst, relative_error(analytic[k], numeric))
    get_tape().clear()
    return worst


def grad_check(
    op_id: str,
    trial_shapes: Optional[Sequence[tuple]] = None,
    eps: float = 1e-3,
    seed: int = 0,
) -> float:
    """Max relative error of the registered primitive ``op_id`` in double precision."""
    try:
        case = REGISTRY[op_id]
    except KeyError:
        raise LookupError(f"unknown op id {op_id!r}; known: {sorted(REGISTRY)}") from None
    rng = np.random.default_rng(seed)
    shapes = list(trial_shapes) if trial_shapes is not None else list(case.shapes)
    arrays = [np.asarray(a, dtype=np.float64) for a in case.make_inputs(rng, shapes)]
    return check_function(case.apply, arrays, eps, rng)


# -- registry ------------------------------------------------------------------


@register("conv2d", [(2, 3, 5, 5), (4, 3, 3, 3), (4,)])
def _conv(x, w, b):
    return ops.conv2d(x, w, b)


@register("conv2d_dilated", [(1, 2, 7, 7), (3, 2, 3, 3)])
def _conv_dil(x, w):
    return ops.conv2d(x, w, None, dilation=2)


@register("conv2d_1x1", [(2, 4, 3, 3), (2, 4, 1, 1), (2,)])
def _conv_1x1(x, w, b):
    return ops.conv2d(x, w, b)


@register("maxpool2", [(2, 2, 6, 6)], make_inputs=distinct_values)
def _pool(x):
    return ops.maxpool2(x, ceil_mode=False)


@register("maxpool2_ceil", [(1, 2, 7, 5)], make_inputs=distinct_values)
def _pool_ceil(x):
    return ops.maxpool2(x, ceil_mode=True)


@register("upsample_bilinear", [(1, 2, 3, 4)])
def _up(x):
    return ops.upsample_bilinear(x, 7, 5)


@register("upsample_bilinear_identity", [(1, 2, 4, 4)])
def _up_id(x):
    return ops.upsample_bilinear(x, 4, 4)


@register("batchnorm2d", [(2, 3, 4, 4), (3,), (3,)])
def _bn(x, gamma, beta):
    c = x.shape[1]
    return ops.batchnorm2d(x, gamma, beta, np.zeros(c), np.ones(c), training=True)


@register("batchnorm2d_eval", [(2, 3, 4, 4), (3,), (3,)])
def _bn_eval(x, gamma, beta):
    c = x.shape[1]
    return ops.batchnorm2d(x, gamma, beta, np.full(c, 0.1), np.full(c, 0.7), training=False)


@register("relu", [(2, 3, 4, 4)], make_inputs=away_from_zero)
def _relu(x):
    return ops.relu(x)


@register("sigmoid", [(2, 3, 4, 4)])
def _sigmoid(x):
    return ops.sigmoid(x)


@register("add", [(2, 3, 4, 4), (2, 3, 4, 4)])
def _add(a, b):
    return ops.add(a, b)


@register("mul", [(2, 3, 4, 4), (2, 3, 4, 4)])
def _mul(a, b):
    return ops.mul(a, b)


@register("sum_all", [(2, 3, 4, 4)])
def _sum(x):
    return ops.sum_all(x)


@register("weighted_sum", [(), (), ()])
def _wsum(a, b, c):
    return ops.weighted_sum([a, b, c], [1.0, 0.5, 0.25])


@register("concat_channels", [(2, 1, 3, 3), (2, 3, 3, 3), (2, 2, 3, 3)])
def _cat(a, b, c):
    return ops.concat_channels([a, b, c])


@register("channel_scale", [(2, 3, 4, 4), (2, 3)])
def _cscale(x, v):
    return ops.channel_scale(x, v)


@register("channel_scale_shared", [(2, 3, 4, 4), (3,)])
def _cscale_shared(x, v):
    return ops.channel_scale(x, v)


@register("global_avg_pool", [(2, 3, 4, 5)])
def _gap(x):
    return ops.global_avg_pool(x)


@register("linear", [(3, 5), (4, 5), (4,)])
def _linear(x, w, b):
    return ops.linear(x, w, b)
