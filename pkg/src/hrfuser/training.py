"""AdamW training with linear warm-up and step decay, evaluation, and the metric log."""

from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .backbone import ModelConfig, component_rng, load_checkpoint, read_sidecar, save_checkpoint
from .detection import Detector, EvalResult, average_precision, compute_loss, decode
from .sensing import sensor_dropout
from .synthetic import Dataset
from .tensor import ConfigError, Tensor

log = logging.getLogger(__name__)


class DivergenceError(RuntimeError):
    """Raised when the training loss stops being finite."""


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 2e-3
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    weight_decay: float = 0.01
    warmup_steps: int = 50
    warmup_ratio: float = 0.001
    decay_epochs: tuple[int, ...] = (4,)
    decay_factor: float = 0.1
    epochs: int = 5
    batch_size: int = 8
    sensor_dropout: float = 0.0
    seed: int = 0
    dtype: str = "float32"
    eval_batch_size: int = 16
    score_thresh: float = 0.05
    eval_every: int = 1  # epochs between evaluations; the last epoch is always evaluated

    def __post_init__(self):
        if not self.lr > 0:
            raise ConfigError("lr must be positive")
        if not 0.0 <= self.sensor_dropout <= 1.0:
            raise ConfigError("sensor_dropout must lie in [0, 1]")
        if min(self.epochs, self.batch_size, self.eval_batch_size, self.eval_every) < 1:
            raise ConfigError("epochs, batch sizes and eval_every must be positive")
        if self.warmup_steps < 0 or not 0 < self.warmup_ratio <= 1:
            raise ConfigError("warm-up needs steps >= 0 and ratio in (0, 1]")
        if not 0 < self.decay_factor <= 1:
            raise ConfigError("decay_factor must lie in (0, 1]")
        if not all(0 <= b < 1 for b in self.betas):
            raise ConfigError("betas must lie in [0, 1)")
        if self.dtype not in ("float32", "float64"):
            raise ConfigError("dtype must be float32 or float64")

    def to_dict(self) -> dict:
        return asdict(self)


def learning_rate(cfg: TrainConfig, step: int, epoch: int) -> float:
    """Step decay by epoch, scaled by a linear warm-up from ``warmup_ratio`` over the first steps."""
    lr = cfg.lr * cfg.decay_factor ** sum(epoch >= e for e in cfg.decay_epochs)
    if step < cfg.warmup_steps:
        lr *= cfg.warmup_ratio + (1.0 - cfg.warmup_ratio) * step / cfg.warmup_steps
    return lr


class AdamW:
    """Adam with decoupled weight decay."""

    def __init__(self, params, betas=(0.9, 0.999), eps=1e-8, weight_decay=0.01):
        self.params = list(params)
        self.betas, self.eps, self.weight_decay = betas, eps, weight_decay
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]
        self.t = 0

    def step(self, lr: float) -> None:
        self.t += 1
        b1, b2 = self.betas
        c1, c2 = 1 - b1**self.t, 1 - b2**self.t
        for p, m, v in zip(self.params, self.m, self.v):
            if p.grad is None:
                continue
            g = p.grad.data
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            p.data *= 1 - lr * self.weight_decay
            p.data -= lr * (m / c1) / (np.sqrt(v / c2) + self.eps)

    def state_dict(self) -> dict[str, np.ndarray]:
        out = {"t": np.array(self.t)}
        for i, (m, v) in enumerate(zip(self.m, self.v)):
            out[f"m.{i}"], out[f"v.{i}"] = m, v
        return out


class MetricLog:
    """JSON lines; floats are written with ``repr`` precision so equal runs give equal files."""

    def __init__(self, path=None):
        self.path = Path(path) if path else None
        self.records: list[dict] = []
        if self.path:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            self.path.write_text("")

    def write(self, **record) -> None:
        self.records.append(record)
        if self.path:
            with self.path.open("a", encoding="utf-8") as fh:
                fh.write(json.dumps(record, sort_keys=True) + "\n")


@dataclass
class TrainResult:
    best_epoch: int
    best: EvalResult
    final: EvalResult
    history: list[EvalResult] = field(default_factory=list)
    checkpoint: str | None = None


def _to_tensors(batch: dict[str, np.ndarray]) -> dict[str, Tensor]:
    return {m: Tensor(a) for m, a in batch.items()}


def _check_modalities(model_cfg: ModelConfig, data: Dataset) -> None:
    missing = set(model_cfg.modalities) - set(data.inputs)
    if missing:
        raise ConfigError(f"dataset lacks modalities {sorted(missing)}")
    for m in model_cfg.modalities:
        want = model_cfg.input_channels(m)
        if data.inputs[m].shape[1] != want:
            raise ConfigError(f"{m}: dataset has {data.inputs[m].shape[1]} channels, model expects {want}")


def predict(model: Detector, data: Dataset, batch_size: int = 16, score_thresh: float = 0.05):
    """Detections for every image, in dataset order, with the model in eval mode."""
    was_training = model.training
    model.eval()
    dets = []
    try:
        with T.no_grad():
            for start in range(0, len(data), batch_size):
                idx = np.arange(start, min(start + batch_size, len(data)))
                batch = {m: data.inputs[m][idx] for m in model.cfg.modalities}
                dets += decode(model(_to_tensors(batch)), score_thresh=score_thresh)
    finally:
        model.train(was_training)
    return dets


def evaluate_model(model: Detector, data: Dataset, batch_size: int = 16, score_thresh: float = 0.05) -> EvalResult:
    _check_modalities(model.cfg, data)
    return average_precision(predict(model, data, batch_size, score_thresh), data.boxes)


class _dtype_scope:
    def __init__(self, name: str):
        self.dtype = np.dtype(name).type

    def __enter__(self):
        self.prev = T.get_default_dtype()
        T.set_default_dtype(self.dtype)

    def __exit__(self, *exc):
        T.set_default_dtype(self.prev)


def train(
    model_cfg: ModelConfig,
    cfg: TrainConfig,
    train_data: Dataset,
    eval_data: Dataset,
    checkpoint: str | Path | None = None,
    log_path: str | Path | None = None,
) -> TrainResult:
    """Train from scratch; evaluates every ``eval_every`` epochs and keeps the best-AP weights at ``checkpoint``.

    Raises :class:`DivergenceError` on a non-finite loss.
    """
    _check_modalities(model_cfg, train_data)
    _check_modalities(model_cfg, eval_data)
    with _dtype_scope(cfg.dtype):
        return _train(model_cfg, cfg, train_data, eval_data, checkpoint, MetricLog(log_path))


def _train(model_cfg, cfg, train_data, eval_data, checkpoint, metrics) -> TrainResult:
    model = Detector(model_cfg)
    opt = AdamW(model.parameters(), cfg.betas, cfg.eps, cfg.weight_decay)
    drop_rng = component_rng(cfg.seed, "sensor-dropout")
    dtype = T.get_default_dtype()
    n = len(train_data)
    steps_per_epoch = math.ceil(n / cfg.batch_size)
    history: list[EvalResult] = []
    best, best_epoch = None, -1
    step = 0
    for epoch in range(cfg.epochs):
        order = component_rng(cfg.seed, f"shuffle/{epoch}").permutation(n)
        model.train()
        started = time.perf_counter()
        for b in range(steps_per_epoch):
            idx = np.sort(order[b * cfg.batch_size:(b + 1) * cfg.batch_size])
            batch = {m: train_data.inputs[m][idx].astype(dtype) for m in model_cfg.modalities}
            if cfg.sensor_dropout > 0:
                batch = sensor_dropout(batch, cfg.sensor_dropout, drop_rng, model_cfg.primary_modality)
            lr = learning_rate(cfg, step, epoch)
            model.zero_grad()
            loss = compute_loss(model(_to_tensors(batch)), [train_data.boxes[i] for i in idx])
            value = float(loss.data)
            if not math.isfinite(value):
                raise DivergenceError(f"loss became {value} at epoch {epoch}, step {step} (lr {lr:.3g})")
            loss.backward()
            opt.step(lr)
            metrics.write(kind="step", epoch=epoch, step=step, lr=lr, loss=value)
            step += 1
        if (epoch + 1) % cfg.eval_every and epoch + 1 < cfg.epochs:
            log.info("epoch %d done (%.1fs)", epoch, time.perf_counter() - started)
            continue
        result = evaluate_model(model, eval_data, cfg.eval_batch_size, cfg.score_thresh)
        history.append(result)
        metrics.write(kind="epoch", epoch=epoch, step=step, **result.to_dict())
        log.info("epoch %d: AP %.4f AP50 %.4f (%.1fs)", epoch, result.ap, result.ap50, time.perf_counter() - started)
        if best is None or result.ap > best.ap:
            best, best_epoch = result, epoch
            if checkpoint is not None:
                save_checkpoint(checkpoint, model, model_cfg, {
                    "train": cfg.to_dict(), "epoch": epoch, "metrics": result.to_dict(),
                    "stats": {m: [s.tolist() for s in train_data.stats[m]] for m in model_cfg.modalities},
                })
    return TrainResult(best_epoch, best, history[-1], history, str(checkpoint) if checkpoint else None)


def evaluate_checkpoint(path, data: Dataset, model_cfg: ModelConfig | None = None, batch_size: int = 16,
                        score_thresh: float = 0.05) -> EvalResult:
    """Rebuild the model from the checkpoint sidecar (checked against ``model_cfg`` when given) and evaluate."""
    meta = read_sidecar(path)
    cfg = meta["model"]
    dtype = meta.get("train", {}).get("dtype", "float64")
    with _dtype_scope(dtype):
        model = Detector(cfg)
        load_checkpoint(path, model, model_cfg)
        return evaluate_model(model, data, batch_size, score_thresh)
