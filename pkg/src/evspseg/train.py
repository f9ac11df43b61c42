"""Adam, the training loop and windowed inference."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Tuple

import numpy as np

from evspseg import losses
from evspseg.events import slice_window
from evspseg.metrics import segmentation_metrics
from evspseg.segnet import SegNet, load_state, state_dict
from evspseg.voxel import lift_labels, scatter_predictions, voxelize

log = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 50
    batch_size: int = 1
    lr_start: float = 1e-2
    lr_end: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    loss: str = "stc"
    k: int = 3
    tau: int = 5
    gamma: float = 2.0
    exclude_center: bool = True
    detach_weights: bool = True
    window_us: int = 8_000_000
    voxel_size: Tuple[int, ...] = (1, 1, 1000)
    seed: int = 0

    def __post_init__(self):
        if not self.lr_start >= self.lr_end > 0:
            raise ValueError("need lr_start >= lr_end > 0")
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be positive")
        if self.loss not in ("bce", "stc"):
            raise ValueError(f"loss must be bce or stc, got {self.loss!r}")

    @property
    def stc(self):
        return losses.STCConfig(self.k, self.tau, self.gamma, self.exclude_center, self.detach_weights)

    def lr_at(self, epoch):
        """Linear decay from ``lr_start`` (epoch 0) to ``lr_end`` (last epoch)."""
        if self.epochs == 1:
            return self.lr_start
        return self.lr_start + (self.lr_end - self.lr_start) * epoch / (self.epochs - 1)


class Adam:
    def __init__(self, params, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = list(params)
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = [np.zeros_like(p.values) for p in self.params]
        self.v = [np.zeros_like(p.values) for p in self.params]
        self.t = 0

    def step(self, lr):
        self.t += 1
        adam_step(self.params, lr, self.beta1, self.beta2, self.eps, self.t, self.m, self.v)


def adam_step(params, lr, beta1, beta2, eps, step_index, m=None, v=None):
    """Bias-corrected Adam update in place; gradients are zeroed afterwards.

    ``m``/``v`` hold the moment estimates (fresh zeros when omitted, i.e. a first step).
    """
    if step_index < 1:
        raise ValueError("step_index starts at 1")
    m = m if m is not None else [np.zeros_like(p.values) for p in params]
    v = v if v is not None else [np.zeros_like(p.values) for p in params]
    c1 = 1.0 - beta1 ** step_index
    c2 = 1.0 - beta2 ** step_index
    for p, mi, vi in zip(params, m, v):
        g = p.grads
        mi *= beta1
        mi += (1.0 - beta1) * g
        vi *= beta2
        vi += (1.0 - beta2) * g * g
        m_hat = mi / c1 if c1 else mi
        v_hat = vi / c2 if c2 else vi
        p.values -= lr * m_hat / (np.sqrt(v_hat) + eps)
        if not np.all(np.isfinite(p.values)):
            raise TrainingError(f"non-finite values in {p.name} after Adam step")
        p.zero_grad()
    return params


# --- data preparation ---------------------------------------------------------

@dataclass
class Sample:
    """One voxelized training window."""

    name: str
    stream: object
    grid: object
    targets: np.ndarray


def windows(stream, window_us):
    """Consecutive ``window_us`` slices starting at the first event."""
    if not len(stream):
        return []
    t0 = int(stream.t[0])
    out = []
    while t0 <= stream.t[-1]:
        w = slice_window(stream, t0, t0 + window_us)
        if len(w):
            out.append(w)
        t0 += window_us
    return out


def prepare(dataset, cfg, names=None):
    samples = []
    for i, stream in enumerate(dataset):
        if stream.labels is None:
            raise TrainingError(f"sequence {names[i] if names else i} has no labels")
        for j, w in enumerate(windows(stream, cfg.window_us)):
            grid = voxelize(w, cfg.voxel_size)
            name = f"{names[i] if names else i}:{j}"
            samples.append(Sample(name, w, grid, lift_labels(grid, w)))
    return samples


def predict_grid(model, grid):
    return model.forward(grid)


def predict(model, stream, window_us=8_000_000, voxel_size=(1, 1, 1000)):
    """Per-event confidences for a stream, processed in consecutive windows."""
    out = np.zeros(len(stream))
    if not len(stream):
        return out
    t0 = int(stream.t[0])
    while t0 <= stream.t[-1]:
        lo = np.searchsorted(stream.t, t0, side="left")
        hi = np.searchsorted(stream.t, t0 + window_us, side="left")
        if hi > lo:
            w = stream.take(slice(lo, hi))
            grid = voxelize(w, voxel_size)
            out[lo:hi] = scatter_predictions(grid, model.forward(grid), w)
        t0 += window_us
    return out


def sample_iou(model, samples):
    """IoU pooled over the events of all samples at the 0.5 threshold."""
    preds, gts = [], []
    for s in samples:
        conf = scatter_predictions(s.grid, model.forward(s.grid), s.stream)
        preds.append(conf >= 0.5)
        gts.append(s.stream.labels == 1)
    if not preds:
        return 1.0
    return segmentation_metrics(np.concatenate(preds), np.concatenate(gts))[0]


# --- training loop -----------------------------------------------------------

@dataclass
class TrainResult:
    model: SegNet
    log: list = field(default_factory=list)
    best_epoch: int = -1
    best_val_iou: float = -1.0
    final_state: dict = None

    def format_log(self):
        return "".join(f"{e}\t{loss:.10g}\t{lr:.10g}\t{iou:.10g}\n" for e, loss, lr, iou in self.log)


def train(dataset, model_cfg=None, cfg=TrainConfig(), val_dataset=None, names=None,
          callback=None):
    """Train on labelled streams; the returned model carries the best-validation weights.

    Without ``val_dataset`` the training streams double as validation.
    Log rows are ``(epoch, mean loss, lr, val IoU)`` with 1-based epochs.
    """
    model = SegNet(model_cfg)
    train_samples = prepare(dataset, cfg, names)
    val_samples = prepare(val_dataset, cfg) if val_dataset is not None else train_samples
    if not train_samples:
        raise TrainingError("no training windows")
    opt = Adam(model.parameters(), cfg.beta1, cfg.beta2, cfg.eps)
    rng = np.random.default_rng(cfg.seed)
    stc = cfg.stc
    result = TrainResult(model)
    best_state = None
    for epoch in range(cfg.epochs):
        lr = cfg.lr_at(epoch)
        order = rng.permutation(len(train_samples))
        total = 0.0
        pending = 0
        for idx in order:
            s = train_samples[idx]
            z = model.forward_logits(s.grid)
            value, dz = losses.objective(s.grid, z, s.targets, cfg.loss, stc)
            if not math.isfinite(value):
                raise TrainingError(
                    f"non-finite loss {value} on sequence {s.name} at epoch {epoch + 1} "
                    f"({len(s.stream)} events, {len(s.grid)} voxels, {int(s.targets.sum())} positive)")
            model.backward(dz / cfg.batch_size)
            total += value
            pending += 1
            if pending == cfg.batch_size:
                opt.step(lr)
                pending = 0
        if pending:
            opt.step(lr)
        mean_loss = total / len(train_samples)
        val_iou = sample_iou(model, val_samples)
        result.log.append((epoch + 1, mean_loss, lr, val_iou))
        log.info("epoch %d loss %.6f lr %.6g val_iou %.4f", epoch + 1, mean_loss, lr, val_iou)
        if callback is not None:
            callback(epoch + 1, mean_loss, lr, val_iou)
        if val_iou > result.best_val_iou:
            result.best_val_iou = val_iou
            result.best_epoch = epoch + 1
            best_state = state_dict(model)
    result.final_state = state_dict(model)
    load_state(model, best_state)
    return result
