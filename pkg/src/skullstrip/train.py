"""Mini-batch Adam training of the U-Net with best-validation checkpointing."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from . import augment, metrics
from . import tensor as T
from .errors import DatasetTooSmall, ShapeMismatch
from .unet import UNetModel, predict_batch, save_checkpoint

log = logging.getLogger(__name__)

LOG_FIELDS = (
    "epoch",
    "train_bce",
    "val_bce",
    "val_accuracy",
    "val_precision",
    "val_recall",
    "val_f1",
    "best_val_bce",
    "checkpoint_saved",
)


@dataclass
class TrainConfig:
    learning_rate: float = 0.001
    batch_size: int = 25
    epochs: int = 1000
    val_fraction: float = 0.05
    seed: int = 0
    augment_fraction: float = 0.5
    checkpoint_path: str | None = None
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    elastic_alpha: float = 2.0
    elastic_sigma: float = 8.0
    # read by the CLI when it builds the model
    depth: int = 4
    base_channels: int = 16
    input_size: tuple[int, ...] = ()

    def __post_init__(self):
        if not 0.0 < self.val_fraction < 1.0:
            raise ValueError("val_fraction must lie strictly between 0 and 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be >= 0")
        if self.augment_fraction < 0:
            raise ValueError("augment_fraction must be >= 0")
        if self.input_size and len(self.input_size) != 2:
            raise ValueError("input_size needs two extents (height, width)")


@dataclass(frozen=True)
class EpochRecord:
    epoch: int
    train_bce: float
    val_bce: float
    val_accuracy: float
    val_precision: float
    val_recall: float
    val_f1: float
    best_val_bce: float
    checkpoint_saved: bool

    def csv_row(self) -> str:
        vals = []
        for name in LOG_FIELDS:
            v = getattr(self, name)
            vals.append(str(int(v)) if isinstance(v, bool) else repr(v) if isinstance(v, float) else str(v))
        return ",".join(vals)


@dataclass
class TrainResult:
    history: list[EpochRecord]
    best_epoch: int
    best_val_bce: float
    best_state: dict[str, np.ndarray]
    train_indices: list[int]
    val_indices: list[int]
    final_report: metrics.MetricsReport | None = field(default=None)

    def log_csv(self) -> str:
        lines = [",".join(LOG_FIELDS)] + [r.csv_row() for r in self.history]
        return "\n".join(lines) + "\n"


def split_indices(n: int, val_fraction: float, rng: np.random.Generator) -> tuple[list[int], list[int]]:
    """Seeded shuffle, then the first ``round(val_fraction * n)`` (>= 1) go to validation."""
    n_val = max(1, int(round(val_fraction * n)))
    if n < 2 or n - n_val < 1:
        raise DatasetTooSmall(f"{n} samples cannot be split into train and validation")
    order = [int(i) for i in rng.permutation(n)]
    return order[n_val:], order[:n_val]


def _stack(pairs, dtype):
    x = np.stack([np.asarray(p[0]) for p in pairs]).astype(dtype)[:, None]
    y = np.stack([np.asarray(p[1]) for p in pairs]).astype(dtype)[:, None]
    return x, y


def evaluate(model: UNetModel, pairs, threshold: float = 0.5) -> metrics.MetricsReport:
    images = np.stack([np.asarray(p[0]) for p in pairs])
    probs = predict_batch(model, images)
    return metrics.compute_report(zip(probs, (p[1] for p in pairs)), threshold)


def train(model: UNetModel, dataset, config: TrainConfig, on_epoch=None) -> TrainResult:
    """Train ``model`` in place; on return it holds the best-validation weights.

    ``dataset`` is a list of ``(slice, mask)`` pairs whose extents equal
    ``model.input_size``.  Validation pairs are split off before
    augmentation, so they never feed training directly or as sources.
    """
    dataset = list(dataset)
    if len(dataset) < 2:
        raise DatasetTooSmall(f"need at least 2 samples, got {len(dataset)}")
    for k, (img, mask) in enumerate(dataset):
        if np.shape(img) != model.input_size or np.shape(mask) != model.input_size:
            raise ShapeMismatch(f"sample {k} has extents {np.shape(img)}, model expects {model.input_size}")

    rng = np.random.default_rng(config.seed)
    train_idx, val_idx = split_indices(len(dataset), config.val_fraction, rng)
    train_pairs = augment.expand_dataset(
        [dataset[i] for i in train_idx],
        config.augment_fraction,
        seed=config.seed,
        elastic_alpha=config.elastic_alpha,
        elastic_sigma=config.elastic_sigma,
    )
    val_pairs = [dataset[i] for i in val_idx]
    params = model.parameters()
    dtype = params[0].dtype
    x_train, y_train = _stack(train_pairs, dtype)
    n = len(x_train)
    state = T.AdamState.for_params(params)

    history: list[EpochRecord] = []
    best = math.inf
    best_epoch = 0
    best_state = model.state()
    for epoch in range(1, config.epochs + 1):
        perm = rng.permutation(n)
        loss_sum = 0.0
        for start in range(0, n, config.batch_size):
            idx = perm[start:start + config.batch_size]
            model.zero_grad()
            loss = T.bce_loss(model.forward(T.Tensor(x_train[idx])), y_train[idx])
            T.backward(loss)
            T.adam_step(params, state, config.learning_rate, config.beta1, config.beta2, config.adam_eps)
            loss_sum += loss.item() * len(idx)
        report = evaluate(model, val_pairs)
        saved = report.bce < best
        if saved:
            best, best_epoch, best_state = report.bce, epoch, model.state()
            if config.checkpoint_path:
                save_checkpoint(model, config.checkpoint_path)
        rec = EpochRecord(
            epoch=epoch,
            train_bce=loss_sum / n,
            val_bce=report.bce,
            val_accuracy=report.accuracy,
            val_precision=report.precision,
            val_recall=report.recall,
            val_f1=report.f1,
            best_val_bce=best,
            checkpoint_saved=saved,
        )
        history.append(rec)
        log.info("epoch %d train_bce %.5f val_bce %.5f val_f1 %.4f%s", epoch, rec.train_bce, rec.val_bce, rec.val_f1, " *" if saved else "")
        if on_epoch is not None:
            on_epoch(rec)

    model.load_state(best_state)
    return TrainResult(
        history=history,
        best_epoch=best_epoch,
        best_val_bce=best,
        best_state=best_state,
        train_indices=train_idx,
        val_indices=val_idx,
        final_report=evaluate(model, val_pairs),
    )
