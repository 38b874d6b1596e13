"""Edge-label generation and the training loss stack."""
from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from meun.autodiff import ops
from meun.autodiff.gradcheck import probabilities, register
from meun.autodiff.tensor import Tensor, record
from meun.errors import ShapeError

CLAMP = 1e-7
# Weight of intermediate map i (1 = top, 5 = bottom): halves per level.
STAGE_WEIGHTS = tuple(1.0 / 2 ** (i - 1) for i in range(1, 6))


def make_edge_label(mask: np.ndarray) -> np.ndarray:
    """Mark pixels where the mask's forward-difference gradient is non-zero.

    Works on a single (h, w) mask or any stack (..., h, w). The differences
    are zero at the last row and column.
    """
    g = np.asarray(mask).astype(np.int16)
    dx = np.zeros_like(g)
    dy = np.zeros_like(g)
    dx[..., :, :-1] = g[..., :, 1:] - g[..., :, :-1]
    dy[..., :-1, :] = g[..., 1:, :] - g[..., :-1, :]
    return ((dx * dx + dy * dy) > 0).astype(np.uint8)


def _as_label(label, like: Tensor, what: str) -> np.ndarray:
    lab = np.asarray(label)
    if lab.ndim == like.ndim - 1:
        lab = lab[:, None]
    if lab.shape != like.shape:
        raise ShapeError(f"{what}: prediction shape {like.shape} does not match label shape {np.shape(label)}")
    return lab.astype(like.dtype, copy=False)


def bce_loss(probs: Tensor, label, reduction: str = "mean", what: str = "bce") -> Tensor:
    """Binary cross-entropy on probabilities clamped to [1e-7, 1 - 1e-7]."""
    if reduction not in ("mean", "sum"):
        raise ValueError(f"unknown reduction {reduction!r}")
    g = _as_label(label, probs, what)
    p = np.clip(probs.data.astype(np.float64), CLAMP, 1.0 - CLAMP)
    inside = (probs.data >= CLAMP) & (probs.data <= 1.0 - CLAMP)
    terms = -(g * np.log(p) + (1.0 - g) * np.log(1.0 - p))
    count = g.size if reduction == "mean" else 1
    scale = 1.0 / count
    value = terms.sum() / count

    def back(grad):
        d = (-(g / p) + (1.0 - g) / (1.0 - p)) * inside * scale
        return (float(grad) * d,)

    return record(np.asarray(value), (probs,), back)


def edge_loss(edge_probs: Tensor, edge_label, reduction: str = "mean") -> Tensor:
    return bce_loss(edge_probs, edge_label, reduction, what="edge")


def iou_loss(probs: Tensor, label, hw_scaling: bool = True, what: str = "iou") -> Tensor:
    """Soft IoU loss with +1 smoothing, averaged over the batch.

    Per image: ``1 - (inter + 1) / (union_sum - inter + 1)`` where
    ``inter = sum(p * g)`` and ``union_sum = sum(p + g)``; multiplied by
    ``1 / (H * W)`` unless ``hw_scaling`` is off.
    """
    g = _as_label(label, probs, what)
    n = probs.shape[0]
    hw = probs.shape[-1] * probs.shape[-2]
    scale = 1.0 / hw if hw_scaling else 1.0
    p = probs.data.astype(np.float64).reshape(n, -1)
    gf = g.astype(np.float64).reshape(n, -1)
    inter = (p * gf).sum(axis=1)
    union = (p + gf).sum(axis=1)
    a = inter + 1.0
    b = union - inter + 1.0
    value = ((1.0 - a / b) * scale).mean()

    def back(grad):
        d = -(gf * b[:, None] - a[:, None] * (1.0 - gf)) / (b * b)[:, None]
        return (float(grad) * d.reshape(probs.shape) * scale / n,)

    return record(np.asarray(value), (probs,), back)


@dataclass
class LossBreakdown:
    edge: float
    bce_united: float
    iou_united: float
    bce: tuple
    iou: tuple
    total: float

    def as_dict(self) -> dict:
        d = asdict(self)
        out = {k: d[k] for k in ("total", "edge", "bce_united", "iou_united")}
        for i in range(5):
            out[f"bce_{i + 1}"] = self.bce[i]
            out[f"iou_{i + 1}"] = self.iou[i]
        return out

    def recomputed_total(self) -> float:
        total = self.edge + self.bce_united + self.iou_united
        for w, b, u in zip(STAGE_WEIGHTS, self.bce, self.iou):
            total += w * (b + u)
        return total


def total_loss(outputs, sal_label, edge_label, reduction: str = "mean", iou_hw_scaling: bool = True):
    """Weighted sum of the edge, united and five intermediate map losses.

    Returns ``(loss_tensor, LossBreakdown)``.
    """
    terms = [
        edge_loss(outputs.edge_map, edge_label, reduction),
        bce_loss(outputs.united, sal_label, reduction, what="united"),
        iou_loss(outputs.united, sal_label, iou_hw_scaling, what="united"),
    ]
    weights = [1.0, 1.0, 1.0]
    for i, (s, w) in enumerate(zip(outputs.sal, STAGE_WEIGHTS), start=1):
        terms.append(bce_loss(s, sal_label, reduction, what=f"sal_{i}"))
        terms.append(iou_loss(s, sal_label, iou_hw_scaling, what=f"sal_{i}"))
        weights += [w, w]
    vals = [float(t.data) for t in terms]
    breakdown = LossBreakdown(
        edge=vals[0],
        bce_united=vals[1],
        iou_united=vals[2],
        bce=tuple(vals[3::2]),
        iou=tuple(vals[4::2]),
        total=0.0,
    )
    breakdown.total = breakdown.recomputed_total()
    loss = ops.weighted_sum(terms, weights)
    return loss, breakdown


# finite-difference checks for the losses, w.r.t. the probabilities


def _fixed_label(shape):
    return (np.random.default_rng(1234).uniform(size=shape) > 0.5).astype(np.float64)


@register("bce_loss", [(2, 1, 4, 4)], make_inputs=probabilities)
def _bce(p):
    return bce_loss(p, _fixed_label(p.shape))


@register("bce_loss_sum", [(2, 1, 4, 4)], make_inputs=probabilities)
def _bce_sum(p):
    return bce_loss(p, _fixed_label(p.shape), reduction="sum")


@register("iou_loss", [(2, 1, 4, 4)], make_inputs=probabilities)
def _iou(p):
    return iou_loss(p, _fixed_label(p.shape))


@register("iou_loss_unscaled", [(2, 1, 4, 4)], make_inputs=probabilities)
def _iou_unscaled(p):
    return iou_loss(p, _fixed_label(p.shape), hw_scaling=False)
