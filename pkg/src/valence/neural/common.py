"""Shared plumbing for the recurrent models: batching, scaling, init, the epoch loop."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from ..autodiff import OptimConfig, Optimizer, Tape, TrainingError
from ..data import FusedSequence
from ..metrics import ccc, mse

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class Batch:
    """Zero-padded mini-batch.  ``valid[b, t]`` marks real (unpadded) windows."""

    features: np.ndarray  # (B, T, F)
    mask: np.ndarray  # (B, T, M) modality observed
    gold: np.ndarray | None  # (B, T)
    valid: np.ndarray  # (B, T) bool
    lengths: np.ndarray  # (B,)

    @property
    def size(self) -> int:
        return self.features.shape[0]

    @property
    def T(self) -> int:
        return self.features.shape[1]


def make_batch(seqs: Sequence[FusedSequence], golds: Sequence[np.ndarray] | None = None) -> Batch:
    lengths = np.array([s.T for s in seqs], dtype=np.int64)
    B, T = len(seqs), int(lengths.max())
    F, M = seqs[0].n_features, seqs[0].mask.shape[1]
    feats = np.zeros((B, T, F))
    mask = np.zeros((B, T, M), dtype=bool)
    valid = np.zeros((B, T), dtype=bool)
    gold = None if golds is None else np.zeros((B, T))
    for b, s in enumerate(seqs):
        n = s.T
        feats[b, :n] = s.features
        mask[b, :n] = s.mask
        valid[b, :n] = True
        if golds is not None:
            g = np.asarray(golds[b], dtype=np.float64)
            if g.shape[0] != n:
                raise ValueError(f"gold length {g.shape[0]} != feature windows {n}")
            gold[b, :n] = g
    return Batch(feats, mask, gold, valid, lengths)


@dataclass(frozen=True)
class Scaler:
    """Per-feature z-scoring fitted on observed Train windows; unobserved stay 0."""

    mean: np.ndarray
    scale: np.ndarray

    @classmethod
    def fit(cls, seqs: Sequence[FusedSequence]) -> "Scaler":
        F = seqs[0].n_features
        total, sq, count = np.zeros(F), np.zeros(F), np.zeros(F)
        for s in seqs:
            obs = _column_mask(s)
            x = np.where(obs, s.features, 0.0)
            total += x.sum(axis=0)
            sq += (x * x).sum(axis=0)
            count += obs.sum(axis=0)
        n = np.maximum(count, 1.0)
        mean = total / n
        var = np.maximum(sq / n - mean**2, 0.0)
        scale = np.where(var > 1e-12, np.sqrt(var), 1.0)
        return cls(mean, scale)

    def transform(self, s: FusedSequence) -> FusedSequence:
        obs = _column_mask(s)
        x = np.where(obs, (s.features - self.mean) / self.scale, 0.0)
        return FusedSequence(x, s.mask, s.modalities, s.dims, s.window_period_s)


def _column_mask(s: FusedSequence) -> np.ndarray:
    return np.repeat(s.mask, s.dims, axis=1)


def glorot(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    lim = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-lim, lim, size=(fan_in, fan_out))


@dataclass
class LogRow:
    epoch: int
    split: str
    loss: float
    ccc: float


def write_training_log(path, rows: Sequence[LogRow]) -> None:
    from ..data import fmt

    with open(path, "w", encoding="utf-8") as fh:
        fh.write("epoch,split,loss,ccc\n")
        for r in rows:
            fh.write(f"{r.epoch},{r.split},{fmt(r.loss)},{fmt(r.ccc)}\n")


def evaluate(predict: Callable[[list[FusedSequence]], list[np.ndarray]], seqs, golds) -> tuple[float, float]:
    """Mean per-video MSE and CCC of eval-mode predictions."""
    preds = predict(list(seqs))
    return (
        float(np.mean([mse(p, g) for p, g in zip(preds, golds)])),
        float(np.mean([ccc(p, g) for p, g in zip(preds, golds)])),
    )


@dataclass(frozen=True)
class FitConfig:
    epochs: int = 100
    patience: int = 5
    batch_size: int = 6
    lr: float = 3e-3
    clip_norm: float | None = 5.0
    weight_decay: float = 0.0
    # patience only counts once this many epochs have run
    min_epochs: int = 0


def fit(
    params: dict[str, np.ndarray],
    train: tuple[list[FusedSequence], list[np.ndarray]],
    val: tuple[list[FusedSequence], list[np.ndarray]],
    batch_loss: Callable[[Tape, dict, Batch, int], "object"],
    predict: Callable[[dict, list[FusedSequence]], list[np.ndarray]],
    cfg: FitConfig,
    shuffle_rng: np.random.Generator,
    on_epoch: Callable[[int], None] | None = None,
) -> tuple[dict[str, np.ndarray], list[LogRow], int]:
    """Mini-batch Adam with early stopping on mean Validation CCC.

    ``batch_loss(tape, tparams, batch, epoch)`` builds a scalar loss tensor.
    Returns the best-Validation parameter snapshot, the log rows and the
    epoch it came from.
    """
    opt = Optimizer(OptimConfig(lr=cfg.lr, clip_norm=cfg.clip_norm, weight_decay=cfg.weight_decay))
    tr_seqs, tr_gold = train
    va_seqs, va_gold = val
    rows: list[LogRow] = []
    best, best_ccc, best_epoch, stale = None, -np.inf, -1, 0
    n = len(tr_seqs)
    for epoch in range(cfg.epochs):
        if on_epoch is not None:
            on_epoch(epoch)
        order = shuffle_rng.permutation(n)
        losses = []
        for start in range(0, n, cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            batch = make_batch([tr_seqs[i] for i in idx], [tr_gold[i] for i in idx])
            tape = Tape()
            loss = batch_loss(tape, tape.params_from(params), batch, epoch)
            value = float(loss.value)
            if not np.isfinite(value):
                raise TrainingError(f"non-finite loss at epoch {epoch}, batch starting at {start}")
            grads = tape.backward(loss)
            try:
                opt.step(params, grads)
            except TrainingError as exc:
                raise TrainingError(f"epoch {epoch}, batch starting at {start}: {exc}") from exc
            losses.append(value)
        _, tr_ccc = evaluate(lambda s: predict(params, s), tr_seqs, tr_gold)
        va_mse, va_ccc = evaluate(lambda s: predict(params, s), va_seqs, va_gold)
        rows.append(LogRow(epoch, "train", float(np.mean(losses)), tr_ccc))
        rows.append(LogRow(epoch, "val", va_mse, va_ccc))
        log.info("epoch %d: train loss %.4f ccc %.3f | val mse %.4f ccc %.3f", epoch, rows[-2].loss, tr_ccc, va_mse, va_ccc)
        if va_ccc > best_ccc:
            best = {k: v.copy() for k, v in params.items()}
            best_ccc, best_epoch, stale = va_ccc, epoch, 0
        else:
            stale += 1
            if stale >= cfg.patience and epoch + 1 >= cfg.min_epochs:
                break
    return best, rows, best_epoch
