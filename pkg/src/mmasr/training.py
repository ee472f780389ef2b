"""Adam, global-norm clipping, plateau learning-rate decay and the epoch loop."""

from __future__ import annotations

import copy
import logging
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import tensor as T
from .data import ManifestRecord, Vocabulary, bucket_batches, build_vocab, collate
from .models import ASRModel, FusionVariant, ModelConfig
from .seeding import derive_rng
from .tensor import Tensor

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    learning_rate: float = 0.0004
    lr_decay: float = 0.5
    batch_size: int = 36
    clip_norm: float = 1.0
    dropout: float = 0.4
    hidden: int = 256
    embed_dim: int = 256
    encoder_layers: int = 6
    att_dim: int | None = None
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    patience: int = 1
    early_stop: int = 5
    min_delta: float = 1e-4
    max_epochs: int = 100
    seed: int = 0

    def __post_init__(self):
        for name in ("learning_rate", "batch_size", "clip_norm", "hidden", "embed_dim",
                     "encoder_layers", "epsilon", "patience", "early_stop", "max_epochs"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive, got {getattr(self, name)}")
        if not 0.0 < self.lr_decay < 1.0:
            raise ValueError(f"lr_decay must lie in (0, 1), got {self.lr_decay}")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError(f"dropout must lie in [0, 1), got {self.dropout}")
        if not (0.0 <= self.beta1 < 1.0 and 0.0 <= self.beta2 < 1.0):
            raise ValueError("adam betas must lie in [0, 1)")

    def model_config(self, vocab_size: int, feat_dim: int, visual_dim: int) -> ModelConfig:
        return ModelConfig(vocab_size, feat_dim, visual_dim, self.hidden, self.embed_dim,
                           self.encoder_layers, self.att_dim, self.dropout)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    t: int = 0


def clip_grad_norm(grads: dict, threshold: float) -> tuple[dict, float]:
    """Scale all gradients together so their global L2 norm is at most ``threshold``."""
    if threshold <= 0:
        raise ValueError("clip threshold must be positive")
    norm = float(np.sqrt(sum(float(np.sum(g * g)) for g in grads.values())))
    if norm > threshold:
        scale = threshold / norm
        grads = {k: g * scale for k, g in grads.items()}
    return grads, norm


def adam_step(params: dict[str, Tensor], grads: dict[str, np.ndarray], state: AdamState,
              config: TrainConfig, lr: float | None = None) -> AdamState:
    """Bias-corrected Adam update, in place on ``params``.

    Raises:
        FloatingPointError: a gradient holds NaN/Inf; nothing is updated.
    """
    for name, g in grads.items():
        if not np.isfinite(g).all():
            raise FloatingPointError(f"non-finite gradient for parameter {name!r}")
        if g.shape != params[name].shape:
            raise ValueError(f"gradient shape {g.shape} != parameter shape {params[name].shape} for {name!r}")
    lr = config.learning_rate if lr is None else lr
    b1, b2 = config.beta1, config.beta2
    state.t += 1
    c1 = 1.0 - b1 ** state.t
    c2 = 1.0 - b2 ** state.t
    for name, g in grads.items():
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(g)
            state.v[name] = np.zeros_like(g)
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        params[name].data -= lr * (m / c1) / (np.sqrt(v / c2) + config.epsilon)
    return state


def lr_schedule(history: Sequence[float], lr: float, config: TrainConfig) -> float:
    """Multiply ``lr`` by ``lr_decay`` once the last ``patience`` validation
    losses all failed to beat the earlier best by more than ``min_delta``.

    Call once per evaluation with the full loss history; each evaluation that
    completes a plateau run triggers one decay.
    """
    if not 0.0 < config.lr_decay < 1.0:
        raise ValueError("lr_decay must lie in (0, 1)")
    n = len(history)
    if n <= config.patience:
        return lr
    stale = _stale_run(history, config.min_delta)
    if stale >= config.patience and stale % config.patience == 0:
        return lr * config.lr_decay
    return lr


def _stale_run(history: Sequence[float], min_delta: float) -> int:
    """Number of trailing evaluations without an improvement."""
    best = float("inf")
    stale = 0
    for x in history:
        if x < best - min_delta:
            best = x
            stale = 0
        else:
            stale += 1
    return stale


@dataclass
class EpochMetrics:
    epoch: int
    train_loss: float
    val_loss: float
    lr: float
    wall_seconds: float

    def line(self) -> str:
        return f"{self.epoch}\t{self.train_loss:.6f}\t{self.val_loss:.6f}\t{self.lr:.8g}\t{self.wall_seconds:.3f}"


@dataclass
class TrainResult:
    model: ASRModel
    metrics: list[EpochMetrics]
    best_epoch: int
    stopped: str


def _grad_table(model: ASRModel, loss: Tensor) -> dict[str, np.ndarray]:
    names = model.params.names()
    table = T.backward(loss, [model.params[n] for n in names])
    return {n: table[model.params[n]] for n in names}


def _snapshot(model: ASRModel) -> dict[str, np.ndarray]:
    return {n: t.data.copy() for n, t in model.params.tensors.items()}


def _restore(model: ASRModel, snap: dict[str, np.ndarray]) -> None:
    for n, arr in snap.items():
        model.params[n].data[...] = arr


def evaluate_loss(model: ASRModel, records: Sequence[ManifestRecord], batch_size: int = 36) -> float:
    """Token-weighted eval-mode loss over a dataset."""
    total, count = 0.0, 0
    with T.no_grad():
        for i in range(0, len(records), batch_size):
            batch = collate(records[i : i + batch_size], model.vocab)
            n = int(batch.target_mask[:, 1:].sum())
            total += model.forward_loss(batch, "eval").item() * n
            count += n
    return total / max(count, 1)


def train(
    dataset: Sequence[ManifestRecord],
    config: TrainConfig,
    variant=FusionVariant.BASELINE,
    val_dataset: Sequence[ManifestRecord] | None = None,
    vocab: Vocabulary | None = None,
    out_dir=None,
    model: ASRModel | None = None,
    epoch_hook: Callable[[int, ASRModel], bool] | None = None,
) -> TrainResult:
    """Mini-batch training with per-epoch validation.

    The best model by validation loss (training loss when no validation
    set is given) is restored at the end and, with ``out_dir``, written to
    ``checkpoint.npz`` alongside ``metrics.tsv``.

    Args:
        epoch_hook: optional ``f(epoch, model) -> stop`` called after each epoch.
    """
    if not dataset:
        raise ValueError("training set is empty")
    variant = FusionVariant(variant)
    vocab = vocab or build_vocab(r.transcript for r in dataset)
    first = dataset[0]
    visual_dim = first.visual.size if first.visual is not None else 1
    if model is None:
        mconf = config.model_config(len(vocab), first.features.shape[1], visual_dim)
        model = ASRModel.create(mconf, variant, vocab, seed=config.seed)
    params = model.params.tensors
    state = AdamState()
    lr = config.learning_rate
    order_rng = derive_rng(config.seed, "batches")
    drop_rng = derive_rng(config.seed, "dropout")
    history: list[float] = []
    metrics: list[EpochMetrics] = []
    best, best_epoch, best_snap = float("inf"), 0, _snapshot(model)
    stopped = "max_epochs"
    out_dir = Path(out_dir) if out_dir is not None else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        (out_dir / "metrics.tsv").write_text("epoch\ttrain_loss\tval_loss\tlr\twall_seconds\n")

    for epoch in range(1, config.max_epochs + 1):
        t0 = time.perf_counter()
        tot, cnt = 0.0, 0
        for idx in bucket_batches(dataset, config.batch_size, order_rng):
            batch = collate([dataset[i] for i in idx], vocab)
            loss = model.forward_loss(batch, "train", drop_rng)
            grads = _grad_table(model, loss)
            if not np.isfinite(loss.item()):
                stopped = "diverged"
                break
            grads, _ = clip_grad_norm(grads, config.clip_norm)
            try:
                adam_step(params, grads, state, config, lr)
            except FloatingPointError as exc:
                log.error("aborting: %s", exc)
                stopped = "diverged"
                break
            n = int(batch.target_mask[:, 1:].sum())
            tot += loss.item() * n
            cnt += n
        if stopped == "diverged":
            break
        train_loss = tot / cnt
        val_loss = evaluate_loss(model, val_dataset, config.batch_size) if val_dataset else train_loss
        history.append(val_loss)
        m = EpochMetrics(epoch, train_loss, val_loss, lr, time.perf_counter() - t0)
        metrics.append(m)
        log.info("epoch %d train %.4f val %.4f lr %.3g", epoch, train_loss, val_loss, lr)
        if out_dir is not None:
            with open(out_dir / "metrics.tsv", "a") as fh:
                fh.write(m.line() + "\n")
        if val_loss < best - config.min_delta:
            best, best_epoch, best_snap = val_loss, epoch, _snapshot(model)
        lr = lr_schedule(history, lr, config)
        if _stale_run(history, config.min_delta) >= config.early_stop:
            stopped = "early_stop"
            break
        if epoch_hook is not None and epoch_hook(epoch, model):
            stopped = "hook"
            break

    _restore(model, best_snap)
    if out_dir is not None:
        model.save(out_dir / "checkpoint.npz")
    return TrainResult(model, metrics, best_epoch, stopped)
