"""Gradient-check suites behind ``meun gradcheck``."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

import meun.losses  # noqa: F401  (registers the loss primitives)
from meun.autodiff import backward, get_tape, no_grad
from meun.autodiff.gradcheck import REGISTRY, grad_check, relative_error
from meun.losses import make_edge_label, total_loss
from meun.model import MEUN, ModelConfig

PRIMITIVE_TOLERANCE = 1e-4
MODEL_TOLERANCE = 1e-3
# Smallest size whose deepest stage (2x2) still admits the ADM pooling.
TINY_CONFIG = dict(input_size=64, base_channels=8)


@dataclass
class CheckResult:
    name: str
    error: float
    tolerance: float

    @property
    def passed(self) -> bool:
        return self.error < self.tolerance

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return f"{status} {self.name:<28} max_rel_err={self.error:.3e} (tol {self.tolerance:g})"


def primitive_checks(seed: int = 0, eps: float = 1e-3) -> list[CheckResult]:
    return [CheckResult(op, grad_check(op, eps=eps, seed=seed), PRIMITIVE_TOLERANCE) for op in sorted(REGISTRY)]


def _tiny_batch(rng, size, n=2):
    image = rng.uniform(-1.0, 1.0, size=(n, 3, size, size))
    mask = np.zeros((n, 1, size, size))
    for i in range(n):
        t, l = rng.integers(4, size // 2, size=2)
        h, w = rng.integers(size // 4, size // 2, size=2)
        mask[i, 0, t : t + h, l : l + w] = 1.0
    return image, mask, make_edge_label(mask).astype(np.float64)


@dataclass
class ModelCheck:
    error: float
    rows: list
    skipped_kinks: int
    skipped_flat: int


def model_grad_check(
    seed: int = 0,
    eps: float = 1e-6,
    min_coords: int = 200,
    kink_tol: float = 1e-4,
    flat_floor: float = 1e-7,
    max_tries: int = 8,
) -> ModelCheck:
    """Compare total-loss gradients of a float64 tiny model with central differences.

    One coordinate is drawn from every parameter tensor, then random extra
    coordinates are added until at least ``min_coords`` are checked. A draw
    is rejected and redrawn (up to ``max_tries`` times) when the numeric
    quotient is unreliable, judged from the loss values alone:

    * kink: the two one-sided slopes disagree by more than ``kink_tol``
      relative (a ReLU or max-pool switch lies within ``eps``);
    * flat: analytic and numeric values are both below ``flat_floor``, the
      resolution of a double-precision difference quotient at this ``eps``.
    """
    rng = np.random.default_rng(seed)
    model = MEUN(ModelConfig(**TINY_CONFIG), seed=seed, dtype=np.float64)
    model.train()
    image, mask, edge = _tiny_batch(rng, TINY_CONFIG["input_size"])
    buffers = [(m, {k: getattr(m, k).copy() for k in getattr(m, "_buffers", ())}) for m in model.modules()]

    def loss_value() -> float:
        with no_grad():
            _, bd = total_loss(model(image), mask, edge)
        return bd.total

    get_tape().clear()
    model.zero_grad()
    loss, _ = total_loss(model(image), mask, edge)
    backward(loss)
    f0 = loss_value()

    rows = []
    kinks = flats = 0

    def probe(p) -> bool:
        nonlocal kinks, flats
        idx = np.unravel_index(rng.integers(p.size), p.shape)
        orig = p.data[idx]
        p.data[idx] = orig + eps
        fp = loss_value()
        p.data[idx] = orig - eps
        fm = loss_value()
        p.data[idx] = orig
        right, left = (fp - f0) / eps, (f0 - fm) / eps
        numeric = (fp - fm) / (2 * eps)
        analytic = float(p.grad[idx])
        if abs(right - left) > kink_tol * (abs(right) + abs(left)) + flat_floor:
            kinks += 1
            return False
        if abs(analytic) < flat_floor and abs(numeric) < flat_floor:
            flats += 1
            return False
        rows.append((p.name, idx, analytic, numeric))
        return True

    params = model.parameters()
    for p in params:
        for _ in range(max_tries):
            if probe(p):
                break
    attempts = 0
    while len(rows) < min_coords and attempts < max_tries * min_coords:
        probe(params[rng.integers(len(params))])
        attempts += 1
    for module, values in buffers:
        for k, v in values.items():
            setattr(module, k, v)
    analytic = np.array([r[2] for r in rows])
    numeric = np.array([r[3] for r in rows])
    error = relative_error(analytic, numeric) if len(rows) >= min_coords else float("inf")
    return ModelCheck(error, rows, kinks, flats)
