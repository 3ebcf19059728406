"""Training loop: batches, loss, clipping, Adam, schedule, logging, checkpoints."""
from __future__ import annotations

import json
import logging
import queue
import threading
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import data as data_mod
from .checkpoint import save_checkpoint
from .core import Tensor
from .errors import NumericError
from .losses import TERM_NAMES, FeatureExtractor, LossWeights, total_loss
from .optim import AdamState, ScheduleConfig, adam_step, clip_grad_norm, cosine_lr

log = logging.getLogger(__name__)


@dataclass
class History:
    epochs: list = field(default_factory=list)  # one record per epoch
    steps: list = field(default_factory=list)   # total loss per step
    clipped: int = 0

    def column(self, key):
        return [r[key] for r in self.epochs]


def _first_nonfinite(named):
    for name, arr in named:
        if not np.all(np.isfinite(arr)):
            return name
    return None


def _prefetch(gen, depth=1):
    """Run ``gen`` in a worker thread, holding at most ``depth`` batches."""
    q = queue.Queue(maxsize=depth)
    done = object()

    def work():
        for item in gen:
            q.put(item)
        q.put(done)

    threading.Thread(target=work, daemon=True).start()
    while True:
        item = q.get()
        if item is done:
            return
        yield item


def train(net, dataset, loss_weights: LossWeights | None = None, schedule: ScheduleConfig | None = None,
          epochs: int | None = None, batch_size=8, seed=0, callbacks=(), patch=64,
          extractor: FeatureExtractor | None = None, log_path=None, checkpoint_dir=None,
          checkpoint_every=0, clip_norm=5.0, prefetch=False):
    """Train ``net`` in place and return ``(net, History)``.

    The learning rate follows ``cosine_lr`` per epoch.  Each callback is
    called as ``cb(epoch, record, net)`` after every epoch.  Batches are
    drawn from a generator seeded by ``seed``; ``prefetch`` moves batch
    assembly to a worker thread without changing the batch order.
    """
    loss_weights = loss_weights or LossWeights()
    epochs = schedule.total_epochs if epochs is None and schedule is not None else (epochs or 0)
    schedule = schedule or ScheduleConfig(total_epochs=epochs)
    extractor = extractor or FeatureExtractor()
    rng = np.random.default_rng(seed)
    params = net.parameters()
    state = AdamState()
    history = History()
    patch = min(patch, *(min(a.shape[:2]) for a in dataset.low))
    log_fh = open(log_path, "a", encoding="utf-8") if log_path else None
    try:
        for epoch in range(epochs):
            lr = cosine_lr(schedule, epoch)
            gen = data_mod.batches(dataset, batch_size, patch, rng)
            if prefetch:
                gen = _prefetch(gen)
            sums = dict.fromkeys(TERM_NAMES + ("total",), 0.0)
            count = 0
            for low, normal in gen:
                out = net(Tensor(low), training=True)
                loss, parts = total_loss(loss_weights, extractor, normal, out)
                if not np.isfinite(loss.data).all():
                    bad = _first_nonfinite([("output", out.data)] + [(k, np.array(v)) for k, v in parts.items()])
                    raise NumericError(f"non-finite loss at epoch {epoch}; first non-finite tensor: {bad}")
                loss.backward()
                bad = _first_nonfinite((p.name, p.grad) for p in params)
                if bad:
                    raise NumericError(f"non-finite gradient at epoch {epoch} in {bad}")
                if clip_grad_norm(params, clip_norm) > clip_norm:
                    history.clipped += 1
                adam_step(state, params, lr)
                bad = _first_nonfinite((p.name, p.data) for p in params)
                if bad:
                    raise NumericError(f"non-finite parameter after epoch {epoch} update: {bad}")
                n = low.shape[0]
                for k, v in parts.items():
                    sums[k] += v * n
                sums["total"] += loss.item() * n
                count += n
                history.steps.append(loss.item())
            record = {"epoch": epoch, "lr": lr}
            record.update({k: v / count for k, v in sums.items()})
            history.epochs.append(record)
            if log_fh:
                log_fh.write(json.dumps(record) + "\n")
                log_fh.flush()
            if checkpoint_dir and checkpoint_every and (epoch + 1) % checkpoint_every == 0:
                save_checkpoint(net, Path(checkpoint_dir) / f"epoch_{epoch + 1:05d}.ckpt")
            for cb in callbacks:
                cb(epoch, record, net)
    finally:
        if log_fh:
            log_fh.close()
    if history.clipped:
        log.info("gradient clipping triggered on %d step(s)", history.clipped)
    return net, history
