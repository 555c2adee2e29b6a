"""Training core: clamped BCE loss, explicit Adam, and the epoch loop.

The optimizer is written out rather than pulled from a library so the update
rule under test is exactly the one documented: first/second moment tracking
with bias correction and the epsilon added outside the square root. Runs are
deterministic for a fixed (model seed, shuffle seed) pair on one machine.
"""

from __future__ import annotations

import csv
import time
from dataclasses import dataclass, field
from pathlib import Path

import torch

from .errors import (
    DivergedLoss,
    EmptyHistory,
    EmptySplit,
    IoFailure,
    NonFiniteGradient,
    ShapeMismatch,
)
from .metrics import ConfusionCounts, binarize, compute_metrics, confusion_counts
from .models import save_model

# Probability clamp for the loss; keeps log() finite at hard 0/1 outputs.
CLAMP_EPS = 1e-7

HISTORY_HEADER = ("epoch", "train_loss", "val_loss", "val_miou", "seconds")


@dataclass
class TrainConfig:
    """Optimization settings; defaults follow the published protocol."""

    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-7
    batch_size: int = 32
    epochs: int = 100
    seed: int = 0
    threshold: float = 0.5
    checkpoint_metric: str = "val_miou"  # or "val_loss"
    optimizer: str = "adam"
    loss: str = "bce"

    def validate(self) -> None:
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ValueError("betas must lie in [0, 1)")
        if self.epsilon <= 0:
            raise ValueError("epsilon must be positive")
        if self.batch_size < 1 or self.epochs < 1:
            raise ValueError("batch_size and epochs must be >= 1")
        if not 0 < self.threshold < 1:
            raise ValueError("threshold must satisfy 0 < t < 1")
        if self.checkpoint_metric not in ("val_miou", "val_loss"):
            raise ValueError(f"unknown checkpoint metric {self.checkpoint_metric!r}")
        if self.optimizer != "adam":
            raise ValueError("only the adam optimizer is implemented")
        if self.loss != "bce":
            raise ValueError("only binary cross-entropy is implemented")


def bce_loss(pred: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """Mean binary cross-entropy with predictions clamped to [eps, 1-eps]."""
    if pred.shape != target.shape:
        raise ShapeMismatch(f"prediction {tuple(pred.shape)} vs target {tuple(target.shape)}")
    p = pred.clamp(CLAMP_EPS, 1.0 - CLAMP_EPS)
    return -(target * torch.log(p) + (1.0 - target) * torch.log(1.0 - p)).mean()


@dataclass
class AdamState:
    """Per-parameter first/second moments and the shared step counter."""

    step: int
    m: list[torch.Tensor]
    v: list[torch.Tensor]

    @classmethod
    def zeros(cls, params) -> "AdamState":
        return cls(
            step=0,
            m=[torch.zeros_like(p) for p in params],
            v=[torch.zeros_like(p) for p in params],
        )


def adam_step(params, grads, state: AdamState, cfg: TrainConfig) -> AdamState:
    """One bias-corrected Adam update, applied to ``params`` in place.

    theta <- theta - lr * m_hat / (sqrt(v_hat) + eps), with the epsilon added
    after the square root. A zero gradient leaves parameters bit-identical.
    """
    if len(params) != len(grads) or len(params) != len(state.m):
        raise ValueError("params, grads and state must have matching lengths")
    for g in grads:
        if g is not None and not torch.isfinite(g).all():
            raise NonFiniteGradient("gradient contains NaN or Inf")
    state.step += 1
    bc1 = 1.0 - cfg.beta1 ** state.step
    bc2 = 1.0 - cfg.beta2 ** state.step
    with torch.no_grad():
        for p, g, m, v in zip(params, grads, state.m, state.v):
            if g is None:
                continue
            m.mul_(cfg.beta1).add_(g, alpha=1.0 - cfg.beta1)
            v.mul_(cfg.beta2).addcmul_(g, g, value=1.0 - cfg.beta2)
            p.addcdiv_(m / bc1, (v / bc2).sqrt().add_(cfg.epsilon), value=-cfg.learning_rate)
    return state


@dataclass
class EpochStats:
    epoch: int
    train_loss: float
    val_loss: float
    val_miou: float
    seconds: float


@dataclass
class RunHistory:
    rows: list[EpochStats] = field(default_factory=list)

    def to_csv(self, path) -> Path:
        path = Path(path)
        try:
            with open(path, "w", encoding="utf-8", newline="") as f:
                writer = csv.writer(f, lineterminator="\n")
                writer.writerow(HISTORY_HEADER)
                for r in self.rows:
                    writer.writerow(
                        (r.epoch, f"{r.train_loss:.6f}", f"{r.val_loss:.6f}",
                         f"{r.val_miou:.6f}", f"{r.seconds:.3f}")
                    )
        except OSError as exc:
            raise IoFailure(f"cannot write history {path}: {exc}") from exc
        return path

    @classmethod
    def from_csv(cls, path) -> "RunHistory":
        rows = []
        with open(path, encoding="utf-8", newline="") as f:
            reader = csv.reader(f)
            header = tuple(next(reader, ()))
            if header != HISTORY_HEADER:
                raise ValueError(f"unexpected history header {header}")
            for epoch, train_loss, val_loss, val_miou, seconds in reader:
                rows.append(
                    EpochStats(int(epoch), float(train_loss), float(val_loss),
                               float(val_miou), float(seconds))
                )
        return cls(rows=rows)


def select_checkpoint(history, metric="val_miou") -> int:
    """Best epoch (1-based): highest val_miou or lowest val_loss, earliest tie."""
    if isinstance(history, RunHistory):
        values = [getattr(r, metric) for r in history.rows]
    else:
        values = [float(v) for v in history]
    if not values:
        raise EmptyHistory("cannot select a checkpoint from an empty history")
    best = max(values) if metric == "val_miou" else min(values)
    return values.index(best) + 1


def _stack_batch(dataset, indices):
    items = [dataset[i] for i in indices]
    return torch.stack([im for im, _ in items]), torch.stack([ms for _, ms in items])


def _validate(model, dataset, cfg: TrainConfig):
    """Mean val loss plus micro mean-IoU at the configured threshold."""
    model.eval()
    total_loss, seen = 0.0, 0
    counts = ConfusionCounts(0, 0, 0, 0)
    with torch.no_grad():
        for start in range(0, len(dataset), cfg.batch_size):
            idx = range(start, min(start + cfg.batch_size, len(dataset)))
            imgs, masks = _stack_batch(dataset, idx)
            probs = model(imgs)
            total_loss += float(bce_loss(probs, masks)) * len(idx)
            seen += len(idx)
            arr = probs.cpu().numpy()
            refs = masks.cpu().numpy().astype("uint8")
            for prob, ref in zip(arr, refs):
                counts = counts + confusion_counts(binarize(prob, cfg.threshold), ref)
    return total_loss / seen, compute_metrics(counts).mean_iou


def train_run(model, train_data, val_data, cfg: TrainConfig | None = None,
              checkpoint_path=None) -> RunHistory:
    """Shuffled-epoch training with best-validation checkpointing.

    Every epoch visits each training sample exactly once (trailing partial
    batch kept). After each epoch the validation split is scored; when the
    checkpoint metric improves strictly, the model is saved to
    ``checkpoint_path`` with the epoch and score in the sidecar, so ties keep
    the earliest epoch. Raises DivergedLoss (history attached) on a
    non-finite loss or gradient.
    """
    cfg = cfg or TrainConfig()
    cfg.validate()
    if len(train_data) == 0:
        raise EmptySplit("training split holds no records")
    if len(val_data) == 0:
        raise EmptySplit("validation split holds no records")

    params = [p for p in model.parameters() if p.requires_grad]
    state = AdamState.zeros(params)
    shuffler = torch.Generator().manual_seed(cfg.seed)
    history = RunHistory()
    best = None

    for epoch in range(1, cfg.epochs + 1):
        start_time = time.perf_counter()
        model.train()
        order = torch.randperm(len(train_data), generator=shuffler).tolist()
        total_loss, seen = 0.0, 0
        for start in range(0, len(order), cfg.batch_size):
            batch = order[start : start + cfg.batch_size]
            imgs, masks = _stack_batch(train_data, batch)
            for p in params:
                p.grad = None
            loss = bce_loss(model(imgs), masks)
            if not torch.isfinite(loss):
                raise DivergedLoss(
                    f"loss became non-finite in epoch {epoch}", history=history
                )
            loss.backward()
            try:
                adam_step(params, [p.grad for p in params], state, cfg)
            except NonFiniteGradient as exc:
                raise DivergedLoss(
                    f"gradient became non-finite in epoch {epoch}", history=history
                ) from exc
            total_loss += float(loss.detach()) * len(batch)
            seen += len(batch)
        val_loss, val_miou = _validate(model, val_data, cfg)
        history.rows.append(
            EpochStats(epoch, total_loss / seen, val_loss, val_miou,
                       time.perf_counter() - start_time)
        )
        score = val_miou if cfg.checkpoint_metric == "val_miou" else val_loss
        improved = best is None or (
            score > best if cfg.checkpoint_metric == "val_miou" else score < best
        )
        if improved:
            best = score
            if checkpoint_path is not None:
                save_model(model, checkpoint_path, epoch=epoch, val_miou=val_miou)
    return history
