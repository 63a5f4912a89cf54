"""Optimisers, learning-rate schedules and the pretrain / fine-tune / eval loops."""
from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from neuromoco.augment import AugmentPolicy, apply_view_array, sample_view_params
from neuromoco.contrastive import (
    ContrastiveConfig,
    EncoderPair,
    QueueState,
    check_mix_weights,
    enqueue,
    momentum_update,
    similarity_logits,
    time_loss,
)
from neuromoco.data import (
    STREAM_INIT,
    STREAM_QUEUE,
    STREAM_SHUFFLE,
    STREAM_VIEW_1,
    STREAM_VIEW_2,
    FrameDataset,
    component_rng,
)
from neuromoco.errors import ConfigError, NumericalError, UsageError
from neuromoco.snn import BackboneConfig, Classifier, Encoder
from neuromoco.tensor import (
    Tensor,
    backward,
    l2_normalize,
    no_grad,
    read_checkpoint,
    write_checkpoint,
)

log = logging.getLogger(__name__)


# ---------------------------------------------------------------------------
# optimisers


def sgd_step(params: Sequence[np.ndarray], grads: Sequence[np.ndarray | None], velocity: Sequence[np.ndarray],
             lr: float, momentum: float = 0.9, weight_decay: float = 1e-4) -> None:
    """In place: v <- momentum * v + (g + wd * p); p <- p - lr * v."""
    for p, g, v in zip(params, grads, velocity):
        if g is None:
            raise UsageError("sgd_step: parameter has no gradient")
        d = g + weight_decay * p if weight_decay else g
        v *= momentum
        v += d
        p -= lr * v


def adamw_step(params: Sequence[np.ndarray], grads: Sequence[np.ndarray | None], m: Sequence[np.ndarray],
               v: Sequence[np.ndarray], step: int, lr: float, beta1: float = 0.9, beta2: float = 0.999,
               eps: float = 1e-8, weight_decay: float = 0.06) -> None:
    """In place AdamW with bias correction; ``step`` counts from 1."""
    bc1 = 1.0 - beta1 ** step
    bc2 = 1.0 - beta2 ** step
    for p, g, mi, vi in zip(params, grads, m, v):
        if g is None:
            raise UsageError("adamw_step: parameter has no gradient")
        if weight_decay:
            p *= 1.0 - lr * weight_decay
        mi *= beta1
        mi += (1.0 - beta1) * g
        vi *= beta2
        vi += (1.0 - beta2) * g * g
        p -= lr * (mi / bc1) / (np.sqrt(vi / bc2) + eps)


class SGD:
    def __init__(self, params: Sequence[Tensor], momentum: float = 0.9, weight_decay: float = 1e-4):
        self.params = list(params)
        self.momentum, self.weight_decay = momentum, weight_decay
        self.velocity = [np.zeros_like(p.data) for p in self.params]

    def step(self, lr: float) -> None:
        sgd_step([p.data for p in self.params], [p.grad for p in self.params], self.velocity,
                 lr, self.momentum, self.weight_decay)


class AdamW:
    def __init__(self, params: Sequence[Tensor], betas=(0.9, 0.999), eps: float = 1e-8, weight_decay: float = 0.06):
        self.params = list(params)
        self.betas, self.eps, self.weight_decay = betas, eps, weight_decay
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]
        self.t = 0

    def step(self, lr: float) -> None:
        self.t += 1
        adamw_step([p.data for p in self.params], [p.grad for p in self.params], self.m, self.v, self.t,
                   lr, self.betas[0], self.betas[1], self.eps, self.weight_decay)


# ---------------------------------------------------------------------------
# schedules


def lr_multistep(epoch: int, base_lr: float, milestones: Sequence[int], gamma: float = 0.1) -> float:
    passed = sum(1 for m in milestones if epoch >= m)
    return base_lr * gamma ** passed


def default_milestones(epochs: int) -> tuple[int, int]:
    return int(0.6 * epochs), int(0.8 * epochs)


def lr_warmup_cosine(epoch: int, base_lr: float, warmup: int, total: int) -> float:
    """Linear ramp ``base * (epoch + 1) / warmup`` then cosine decay to 0 at ``total``."""
    if warmup > total:
        raise ConfigError(f"warmup ({warmup}) exceeds total epochs ({total})")
    if epoch < warmup:
        return base_lr * (epoch + 1) / warmup
    if total == warmup:
        return base_lr
    progress = min(max((epoch - warmup) / (total - warmup), 0.0), 1.0)
    return base_lr * 0.5 * (1.0 + math.cos(math.pi * progress))


# ---------------------------------------------------------------------------
# configs


@dataclass(frozen=True)
class PretrainConfig:
    steps: int = 16
    momentum_m: float = 0.999
    batch_size: int = 32
    epochs: int = 200
    lr: float = 0.03
    sgd_momentum: float = 0.9
    weight_decay: float = 1e-4
    milestones: tuple[int, ...] | None = None
    gamma: float = 0.1
    seed: int = 0
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    contrastive: ContrastiveConfig = field(default_factory=ContrastiveConfig)
    augment: AugmentPolicy = field(default_factory=AugmentPolicy)

    def __post_init__(self):
        for name in ("steps", "batch_size", "epochs"):
            if getattr(self, name) < 1:
                raise ConfigError(f"pretrain.{name} must be positive")
        if self.lr < 0 or self.weight_decay < 0:
            raise ConfigError("pretrain lr and weight decay must be non-negative")
        if not 0.0 <= self.momentum_m <= 1.0:
            raise ConfigError("momentum coefficient must lie in [0, 1]")
        check_mix_weights(self.contrastive.alpha, self.contrastive.beta)
        if self.batch_size > self.contrastive.queue_len:
            raise ConfigError("batch size must not exceed the queue length")

    @property
    def schedule_milestones(self) -> tuple[int, ...]:
        return tuple(self.milestones) if self.milestones is not None else default_milestones(self.epochs)


@dataclass(frozen=True)
class FinetuneConfig:
    batch_size: int = 16
    epochs: int = 100
    lr: float = 0.001
    weight_decay: float = 0.06
    warmup_epochs: int = 30
    loss: str = "mac"
    alpha: float = 0.5
    beta: float = 0.5
    num_classes: int = 4
    init_from: str = "key"  # key | query | random
    linear_probe: bool = False
    augment: bool = True
    eval_every: int = 1
    seed: int = 0
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    policy: AugmentPolicy = field(default_factory=AugmentPolicy)

    def __post_init__(self):
        if self.warmup_epochs > self.epochs:
            raise ConfigError("finetune warmup epochs exceed total epochs")
        if self.batch_size < 1 or self.epochs < 1 or self.num_classes < 2:
            raise ConfigError("finetune batch size, epochs and class count must be positive")
        if self.loss not in ("mbc", "mac", "mix"):
            raise ConfigError(f"unknown finetune loss {self.loss!r}")
        if self.init_from not in ("key", "query", "random"):
            raise ConfigError(f"init_from must be key, query or random, got {self.init_from!r}")
        check_mix_weights(self.alpha, self.beta)


# ---------------------------------------------------------------------------
# metrics


@dataclass
class Metrics:
    records: list[dict] = field(default_factory=list)
    timings: list[dict] = field(default_factory=list)

    def add(self, record: dict, wall_time: float) -> None:
        if self.records and record["epoch"] <= self.records[-1]["epoch"] and record["phase"] == self.records[-1]["phase"]:
            raise UsageError("epoch index must increase")
        self.records.append(record)
        self.timings.append({"phase": record["phase"], "epoch": record["epoch"], "wall_time": wall_time})

    def write(self, path, timings_path=None) -> None:
        """JSON lines; wall-clock times go to a separate file so metrics stay reproducible."""
        with open(path, "w") as fh:
            for r in self.records:
                fh.write(json.dumps(r, sort_keys=True) + "\n")
        if timings_path is not None:
            with open(timings_path, "w") as fh:
                for r in self.timings:
                    fh.write(json.dumps(r, sort_keys=True) + "\n")


def _finite(value: float, what: str) -> float:
    if not math.isfinite(value):
        raise NumericalError(f"{what} became non-finite")
    return value


def _round(x: float) -> float:
    # repr of a float64 is exact; round-tripping through float keeps JSON stable
    return float(np.float64(x))


# ---------------------------------------------------------------------------
# views


def make_views(frames: np.ndarray, policy: AugmentPolicy, rng: np.random.Generator) -> np.ndarray:
    """Augment each sample of (N, T, 2, H, W) with its own view; returns (T, N, 2, H, W)."""
    h, w = frames.shape[-2:]
    out = np.empty_like(frames)
    for i in range(frames.shape[0]):
        out[i] = apply_view_array(frames[i], sample_view_params(policy, rng, (h, w)))
    return np.ascontiguousarray(out.transpose(1, 0, 2, 3, 4))


def time_major(frames: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(frames.transpose(1, 0, 2, 3, 4))


# ---------------------------------------------------------------------------
# pretraining


@dataclass
class PretrainResult:
    pair: EncoderPair
    queue: QueueState
    metrics: Metrics
    steps_done: int


def new_encoder_pair(cfg: PretrainConfig) -> EncoderPair:
    query = Encoder(cfg.backbone, component_rng(cfg.seed, STREAM_INIT))
    return EncoderPair.from_query(query, lambda: Encoder(cfg.backbone, np.random.default_rng(0)), cfg.momentum_m)


def encoder_checkpoint(pair: EncoderPair) -> dict[str, np.ndarray]:
    state = {f"query.{k}": v for k, v in pair.query.state_dict().items()}
    state.update({f"key.{k}": v for k, v in pair.key.state_dict().items()})
    return state


def pretrain_step(pair: EncoderPair, queue: QueueState, opt: SGD, x_q: np.ndarray, x_k: np.ndarray,
                  cfg: PretrainConfig, lr: float) -> float:
    """One NeuroMoCo update on a batch of two views (each (T, N, 2, H, W))."""
    cc = cfg.contrastive
    q = l2_normalize(pair.query(x_q), axis=-1)
    with no_grad():
        k = l2_normalize(pair.key(x_k), axis=-1)
    logits = similarity_logits(q, k, queue, cc.temperature)
    loss = time_loss("mix", logits, 0, cc.alpha, cc.beta)
    pair.query.zero_grad()
    backward(loss)
    opt.step(lr)
    momentum_update(pair)
    enqueue(queue, k)
    return _finite(loss.item(), "pretraining loss")


def pretrain(cfg: PretrainConfig, dataset: FrameDataset, out_dir=None,
             on_epoch: Callable[[dict], None] | None = None) -> PretrainResult:
    """Self-supervised NeuroMoCo pretraining; labels in ``dataset`` are ignored."""
    if dataset.steps != cfg.steps:
        raise ConfigError(f"dataset has T={dataset.steps}, config expects {cfg.steps}")
    if tuple(dataset.resolution) != tuple(cfg.backbone.resolution):
        raise ConfigError(f"dataset resolution {dataset.resolution} != backbone {cfg.backbone.resolution}")
    if len(dataset) < cfg.batch_size:
        raise ConfigError("dataset smaller than one pretraining batch")
    pair = new_encoder_pair(cfg)
    pair.query.train()
    pair.key.train()
    cc = cfg.contrastive
    if cc.prefill_random:
        queue = QueueState.random(cfg.steps, cc.queue_len, cfg.backbone.embed_dim, component_rng(cfg.seed, STREAM_QUEUE))
    else:
        queue = QueueState(cfg.steps, cc.queue_len, cfg.backbone.embed_dim)
    opt = SGD(pair.query.trainable(), cfg.sgd_momentum, cfg.weight_decay)
    shuffle = component_rng(cfg.seed, STREAM_SHUFFLE)
    view1 = component_rng(cfg.seed, STREAM_VIEW_1)
    view2 = component_rng(cfg.seed, STREAM_VIEW_2)
    metrics = Metrics()
    steps_done = 0
    out = Path(out_dir) if out_dir is not None else None
    for epoch in range(cfg.epochs):
        t0 = time.perf_counter()
        lr = lr_multistep(epoch, cfg.lr, cfg.schedule_milestones, cfg.gamma)
        losses = []
        for idx in dataset.batches(cfg.batch_size, shuffle, drop_last=True):
            frames = dataset.frames[idx]
            x_q = make_views(frames, cfg.augment, view1)
            x_k = make_views(frames, cfg.augment, view2)
            losses.append(pretrain_step(pair, queue, opt, x_q, x_k, cfg, lr))
            steps_done += 1
        record = {"phase": "pretrain", "epoch": epoch, "loss": _round(np.mean(losses)), "lr": _round(lr),
                  "queue_filled": queue.filled, "steps": steps_done}
        metrics.add(record, time.perf_counter() - t0)
        log.info("pretrain epoch %d loss %.4f lr %.4g", epoch, record["loss"], lr)
        if on_epoch:
            on_epoch(record)
        if out is not None:
            write_checkpoint(encoder_checkpoint(pair), out / "pretrain.nmcw")
    return PretrainResult(pair, queue, metrics, steps_done)


# ---------------------------------------------------------------------------
# fine-tuning and evaluation


def build_classifier(cfg: FinetuneConfig, checkpoint: dict[str, np.ndarray] | None) -> Classifier:
    model = Classifier(cfg.backbone, cfg.num_classes, component_rng(cfg.seed, STREAM_INIT))
    if checkpoint is not None and cfg.init_from != "random":
        prefix = f"{cfg.init_from}.backbone."
        state = {k[len(prefix):]: v for k, v in checkpoint.items() if k.startswith(prefix)}
        if not state:
            raise ConfigError(f"checkpoint has no '{prefix}*' entries")
        model.backbone.load_state_dict(state)
    return model


def predict(model: Classifier, dataset: FrameDataset, batch_size: int = 50) -> np.ndarray:
    """Argmax of the time-averaged logits, with batch norm in eval mode."""
    model.eval()
    preds = []
    with no_grad():
        for idx in dataset.batches(batch_size):
            logits = model(time_major(dataset.frames[idx])).data
            preds.append(logits.mean(axis=0).argmax(axis=-1))
    return np.concatenate(preds) if preds else np.zeros(0, dtype=np.int64)


def accuracy(preds: np.ndarray, labels: np.ndarray) -> float:
    return float((preds == labels).mean()) if len(labels) else 0.0


@dataclass
class FinetuneResult:
    model: Classifier
    metrics: Metrics
    test_accuracy: float


def finetune(cfg: FinetuneConfig, checkpoint: dict[str, np.ndarray] | None, train: FrameDataset,
             test: FrameDataset | None = None, out_dir=None,
             on_epoch: Callable[[dict], None] | None = None) -> FinetuneResult:
    """Supervised training of backbone + classification head with AdamW."""
    labels_max = int(max(train.labels.max(), test.labels.max() if test is not None and len(test) else 0))
    if labels_max >= cfg.num_classes:
        raise ConfigError(f"labels reach {labels_max} but num_classes is {cfg.num_classes}")
    model = build_classifier(cfg, checkpoint)
    if cfg.linear_probe:
        model.backbone.requires_grad_(False)
    opt = AdamW(model.trainable(), weight_decay=cfg.weight_decay)
    shuffle = component_rng(cfg.seed, STREAM_SHUFFLE)
    view_rng = component_rng(cfg.seed, STREAM_VIEW_1)
    metrics = Metrics()
    test_acc = float("nan")
    for epoch in range(cfg.epochs):
        t0 = time.perf_counter()
        lr = lr_warmup_cosine(epoch, cfg.lr, cfg.warmup_epochs, cfg.epochs)
        losses, correct = [], 0
        for idx in train.batches(cfg.batch_size, shuffle):
            model.train()
            if cfg.linear_probe:
                model.backbone.eval()
            frames = train.frames[idx]
            x = make_views(frames, cfg.policy, view_rng) if cfg.augment else time_major(frames)
            y = train.labels[idx]
            logits = model(x)
            loss = time_loss(cfg.loss, logits, y, cfg.alpha, cfg.beta)
            model.zero_grad()
            backward(loss)
            opt.step(lr)
            losses.append(_finite(loss.item(), "fine-tune loss"))
            correct += int((logits.data.mean(axis=0).argmax(axis=-1) == y).sum())
        record = {"phase": "finetune", "epoch": epoch, "loss": _round(np.mean(losses)), "lr": _round(lr),
                  "train_accuracy": _round(correct / len(train))}
        last = epoch == cfg.epochs - 1
        if test is not None and (last or (cfg.eval_every and (epoch + 1) % cfg.eval_every == 0)):
            test_acc = accuracy(predict(model, test), test.labels)
            record["test_accuracy"] = _round(test_acc)
        metrics.add(record, time.perf_counter() - t0)
        log.info("finetune epoch %d loss %.4f acc %s", epoch, record["loss"], record.get("test_accuracy"))
        if on_epoch:
            on_epoch(record)
    if out_dir is not None:
        write_checkpoint({f"model.{k}": v for k, v in model.state_dict().items()}, Path(out_dir) / "finetune.nmcw")
    return FinetuneResult(model, metrics, test_acc)


def load_classifier(path_or_state, backbone: BackboneConfig, num_classes: int) -> Classifier:
    state = read_checkpoint(path_or_state) if not isinstance(path_or_state, dict) else path_or_state
    model = Classifier(backbone, num_classes, np.random.default_rng(0))
    model.load_state_dict({k[len("model."):]: v for k, v in state.items() if k.startswith("model.")})
    return model


def evaluate(model: Classifier, dataset: FrameDataset) -> float:
    return accuracy(predict(model, dataset), dataset.labels)
