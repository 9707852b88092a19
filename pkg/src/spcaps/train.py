"""Training loop, evaluation and S x Q sweeps."""
from __future__ import annotations

import csv
import io
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .data import Dataset, stratified_split
from .model import Model, ModelConfig, param_count

log = logging.getLogger(__name__)

EVAL_BATCH = 32
METRICS_FIELDS = ["epoch", "split", "loss", "accuracy"]
SWEEP_FIELDS = ["S", "Q", "params", "train_loss", "train_acc", "val_loss", "val_acc"]


class TrainingDiverged(RuntimeError):
    def __init__(self, epoch: int, step: int, checkpoint: Path | None):
        super().__init__(f"non-finite loss at epoch {epoch}, step {step}; state saved to {checkpoint}")
        self.epoch, self.step, self.checkpoint = epoch, step, checkpoint


@dataclass
class EvalResult:
    loss: float
    accuracy: float
    confusion: np.ndarray  # rows: true class, cols: predicted

    @property
    def n(self) -> int:
        return int(self.confusion.sum())


@dataclass
class Metrics:
    rows: list = field(default_factory=list)  # (epoch, split, loss, accuracy)
    wall_clock: float = 0.0
    confusion: np.ndarray | None = None

    def add(self, epoch: int, split: str, res: EvalResult) -> None:
        self.rows.append((epoch, split, res.loss, res.accuracy))

    def last(self, split: str):
        for row in reversed(self.rows):
            if row[1] == split:
                return row
        return None

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(METRICS_FIELDS)
        for epoch, split, loss, acc in self.rows:
            w.writerow([epoch, split, f"{loss:.10g}", f"{acc:.10g}"])
        return buf.getvalue()


def dataset_pools(model: Model, dataset: Dataset) -> np.ndarray:
    """Pooling matrices for every sample, ``(N, S, h*w)``; segmentations stay cached on the samples."""
    slic = model.config.slic
    return np.stack([model.pool_matrix(s.segmentation(slic)) for s in dataset.samples])


def evaluate(model: Model, dataset: Dataset, pools: np.ndarray | None = None) -> EvalResult:
    """Mean margin loss, argmax accuracy and confusion matrix."""
    if len(dataset) == 0:
        raise ValueError("empty dataset")
    if pools is None:
        pools = dataset_pools(model, dataset)
    J = model.config.J
    labels = dataset.labels
    losses, preds = [], []
    for i in range(0, len(dataset), EVAL_BATCH):
        sl = slice(i, i + EVAL_BATCH)
        fwd = model.forward(dataset.images(range(i, min(i + EVAL_BATCH, len(dataset)))), pools[sl])
        loss, _ = model.loss(fwd, labels[sl])
        losses.append(np.asarray(loss, dtype=np.float64))
        preds.append(np.argmax(fwd.probs, axis=-1))
    losses, preds = np.concatenate(losses), np.concatenate(preds)
    conf = np.zeros((J, J), dtype=np.int64)
    np.add.at(conf, (labels, preds), 1)
    return EvalResult(float(losses.mean()), float(np.mean(preds == labels)), conf)


def _check_compatible(config: ModelConfig, dataset: Dataset) -> None:
    if len(dataset) == 0:
        raise ValueError("empty dataset")
    if dataset.n_classes != config.J:
        raise ValueError(f"dataset has {dataset.n_classes} classes, config expects J={config.J}")
    s = config.backbone.input_size
    if dataset.samples[0].image.data.shape != (s, s, 3):
        raise ValueError(f"images are {dataset.samples[0].image.data.shape}, model expects {(s, s, 3)}")


def train(
    config: ModelConfig,
    dataset: Dataset,
    val: Dataset | None = None,
    checkpoint_dir=None,
    val_fraction: float = 0.25,
    model: Model | None = None,
) -> tuple[Model, Metrics]:
    """Plain SGD in seeded shuffled order, evaluating train and val after every epoch.

    Without an explicit ``val`` set a stratified ``val_fraction`` split of
    ``dataset`` is held out.  With ``checkpoint_dir`` the weights are written
    as ``epoch_NNN.spct`` after every epoch.
    """
    if val is None:
        dataset, val = stratified_split(dataset, val_fraction, config.seed)
    _check_compatible(config, dataset)
    model = model or Model(config)
    metrics = Metrics()
    t0 = time.perf_counter()
    if config.epochs == 0:
        return model, metrics
    ckdir = Path(checkpoint_dir) if checkpoint_dir is not None else None
    if ckdir is not None:
        ckdir.mkdir(parents=True, exist_ok=True)
    train_pools = dataset_pools(model, dataset)
    val_pools = dataset_pools(model, val) if len(val) else None
    images, labels = dataset.images(), dataset.labels
    rng = np.random.default_rng([config.seed, 1])
    bs = config.batch_size
    for epoch in range(1, config.epochs + 1):
        order = rng.permutation(len(dataset))
        for step, start in enumerate(range(0, len(order), bs)):
            idx = order[start : start + bs]
            _, loss, grads = model.loss_and_grads(images[idx], train_pools[idx], labels[idx])
            if not np.all(np.isfinite(loss)):
                path = None
                if ckdir is not None:
                    path = ckdir / "diverged.spct"
                    model.save(path, epoch=epoch, step=step, seed=config.seed)
                raise TrainingDiverged(epoch, step, path)
            model.sgd_step(grads, config.lr, 1.0 / len(idx))
        tr = evaluate(model, dataset, train_pools)
        metrics.add(epoch, "train", tr)
        if val_pools is not None:
            va = evaluate(model, val, val_pools)
            metrics.add(epoch, "val", va)
            metrics.confusion = va.confusion
        else:
            metrics.confusion = tr.confusion
        log.info("epoch %d train loss %.4f acc %.4f%s", epoch, tr.loss, tr.accuracy,
                 f" val loss {va.loss:.4f} acc {va.accuracy:.4f}" if val_pools is not None else "")
        if ckdir is not None:
            model.save(ckdir / f"epoch_{epoch:03d}.spct", epoch=epoch, seed=config.seed)
    metrics.wall_clock = time.perf_counter() - t0
    return model, metrics


def sweep_rows(config: ModelConfig, S_list, Q_list, dataset: Dataset, val: Dataset | None = None) -> list[dict]:
    """Train every (S, Q) cell from the same seed; failed cells become NaN rows."""
    if not S_list or not Q_list:
        raise ValueError("S_list and Q_list must be non-empty")
    if val is None:
        dataset, val = stratified_split(dataset, 0.25, config.seed)
    rows = []
    for S in S_list:
        for Q in Q_list:
            row = {"S": S, "Q": Q}
            try:
                cfg = config.replace(S=int(S), Q=int(Q))
                row["params"] = param_count(cfg).total
                model, _ = train(cfg, dataset, val)
                tr, va = evaluate(model, dataset), evaluate(model, val)
                row.update(train_loss=tr.loss, train_acc=tr.accuracy, val_loss=va.loss, val_acc=va.accuracy)
            except Exception as exc:  # a failed cell must not sink the whole grid
                log.warning("sweep cell S=%s Q=%s failed: %s", S, Q, exc)
                row.setdefault("params", math.nan)
                row.update(train_loss=math.nan, train_acc=math.nan, val_loss=math.nan, val_acc=math.nan)
            rows.append(row)
    return rows


def sweep_csv(rows: list[dict]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(SWEEP_FIELDS)
    for r in rows:
        w.writerow([r[k] if isinstance(r[k], int) else f"{r[k]:.10g}" for k in SWEEP_FIELDS])
    return buf.getvalue()


def sweep(config: ModelConfig, S_list, Q_list, dataset: Dataset, val: Dataset | None = None) -> str:
    return sweep_csv(sweep_rows(config, S_list, Q_list, dataset, val))
