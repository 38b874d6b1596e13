"""SGD with momentum and the fixed-step training loop."""
from __future__ import annotations

import logging
import math
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from meun.autodiff import backward, get_tape
from meun.checkpoint import checkpoint_save
from meun.config import RunConfig
from meun.data import DatasetIndex, preprocess
from meun.errors import EmptyDatasetError, NonFiniteLossError
from meun.losses import make_edge_label, total_loss
from meun.model import MEUN

log = logging.getLogger(__name__)


class SGD:
    """Momentum SGD with decoupled weight decay and two learning-rate groups.

    Parameters whose ``lr_group`` is ``"backbone"`` use ``lr_backbone``;
    everything else uses ``lr_head``.
    """

    def __init__(self, params, lr_head, lr_backbone, momentum=0.9, weight_decay=5e-4):
        self.params = list(params)
        self.lr = {"head": lr_head, "backbone": lr_backbone}
        self.momentum = momentum
        self.weight_decay = weight_decay

    def zero_grad(self) -> None:
        for p in self.params:
            p.zero_grad()

    def step(self) -> None:
        for p in self.params:
            lr = self.lr[p.lr_group]
            p.momentum *= self.momentum
            p.momentum += p.grad
            if self.weight_decay:
                p.data *= 1.0 - lr * self.weight_decay
            p.data -= lr * p.momentum


def load_training_arrays(root, input_size: int):
    """Preprocessed images (n, 3, S, S) float32, masks and edge labels (n, 1, S, S)."""
    index = DatasetIndex.from_root(root)
    if len(index) == 0:
        raise EmptyDatasetError(f"no samples under {root}")
    samples = [preprocess(s, input_size) for s in index]
    images = np.stack([s.image for s in samples]).astype(np.float32)
    masks = np.stack([s.mask for s in samples])[:, None].astype(np.float32)
    edges = make_edge_label(masks).astype(np.float32)
    return images, masks, edges


def batch_schedule(n: int, batch_size: int, steps: int, seed: int) -> list[np.ndarray]:
    """Index batches drawn from successive seeded permutations."""
    rng = np.random.default_rng(seed)
    bs = min(batch_size, n)
    order = np.empty(0, dtype=np.int64)
    out = []
    for _ in range(steps):
        if order.size < bs:
            order = np.concatenate([order, rng.permutation(n)])
        out.append(order[:bs])
        order = order[bs:]
    return out


def _snapshot_buffers(model):
    return [(m, {name: getattr(m, name).copy() for name in getattr(m, "_buffers", ())}) for m in model.modules()]


def _restore_buffers(snapshot) -> None:
    for module, values in snapshot:
        for name, arr in values.items():
            setattr(module, name, arr)


def train(
    config: RunConfig,
    dataset_root,
    out_checkpoint,
    on_step: Optional[Callable[[dict], None]] = None,
    model: Optional[MEUN] = None,
) -> tuple[MEUN, list[dict]]:
    """Train for ``config.steps`` steps and write the final checkpoint.

    Returns the model and one record per step (``step`` plus every loss
    breakdown field). A non-finite loss writes the last good state to
    ``out_checkpoint`` and raises :class:`NonFiniteLossError`.
    """
    images, masks, edges = load_training_arrays(dataset_root, config.input_size)
    model = model or MEUN(config.model_config(), seed=config.seed)
    opt = SGD(model.parameters(), config.lr_head, config.lr_backbone, config.momentum, config.weight_decay)
    history = []
    model.train()
    for step, idx in enumerate(batch_schedule(len(images), config.batch_size, config.steps, config.seed), 1):
        get_tape().clear()
        opt.zero_grad()
        snapshot = _snapshot_buffers(model)
        out = model(images[idx])
        loss, breakdown = total_loss(out, masks[idx], edges[idx], config.loss_reduction, config.iou_hw_scaling)
        if not math.isfinite(breakdown.total):
            get_tape().clear()
            _restore_buffers(snapshot)
            checkpoint_save(model, out_checkpoint)
            raise NonFiniteLossError(f"non-finite loss at step {step}; last good state saved to {out_checkpoint}")
        backward(loss)
        opt.step()
        record = {"step": step, **breakdown.as_dict()}
        history.append(record)
        if on_step:
            on_step(record)
    checkpoint_save(model, out_checkpoint)
    Path(str(out_checkpoint) + ".cfg").write_text(config.to_text())
    return model, history


def format_record(record: dict) -> str:
    parts = [f"step={record['step']}"]
    parts += [f"{k}={v:.6g}" for k, v in record.items() if k != "step"]
    return " ".join(parts)
