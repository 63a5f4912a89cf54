"""End-to-end runs driven by a :class:`RunConfig`: datasets, output layout, ablation."""
from __future__ import annotations

import json
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from neuromoco.config import RunConfig
from neuromoco.data import FrameDataset, build_synthetic_dataset, load_corpus
from neuromoco.errors import ConfigError
from neuromoco.tensor import read_checkpoint
from neuromoco.training import encoder_checkpoint, finetune, pretrain

# fixed offsets keep train / test / pool draws disjoint for one root seed
TEST_SEED_OFFSET = 1_000_003
POOL_SEED_OFFSET = 2_000_003

PRETRAIN_CKPT = "pretrain.nmcw"
FINETUNE_CKPT = "finetune.nmcw"
PRETRAIN_METRICS = "pretrain_metrics.jsonl"
FINETUNE_METRICS = "finetune_metrics.jsonl"


def worker_count() -> int:
    """Worker cap from ``NMC_THREADS`` (default: all cores)."""
    raw = os.environ.get("NMC_THREADS", "")
    if not raw:
        return os.cpu_count() or 1
    try:
        n = int(raw)
    except ValueError:
        raise ConfigError(f"NMC_THREADS must be an integer, got {raw!r}") from None
    if n < 1:
        raise ConfigError("NMC_THREADS must be >= 1")
    return n


def load_datasets(cfg: RunConfig) -> tuple[FrameDataset, FrameDataset]:
    """(train, test) from the configured corpus directories or the synthetic generator."""
    steps = cfg["data.steps"]
    if cfg["data.train_dir"]:
        train = load_corpus(cfg["data.train_dir"], steps)
        test = load_corpus(cfg["data.test_dir"], steps)
        for name, ds in (("train", train), ("test", test)):
            if ds.steps != steps or tuple(ds.resolution) != cfg.resolution:
                raise ConfigError(f"{name} corpus is T={ds.steps} {ds.resolution}, config wants T={steps} {cfg.resolution}")
        return train, test
    params = cfg.synthetic_params()
    seed = cfg["seed"]
    train = build_synthetic_dataset(params, cfg["synthetic.train_size"], steps, seed)
    test = build_synthetic_dataset(params, cfg["synthetic.test_size"], steps, seed + TEST_SEED_OFFSET)
    return train, test


def pretrain_pool(cfg: RunConfig, train: FrameDataset) -> FrameDataset:
    """Unlabelled pretraining data: the training frames plus an optional extra synthetic pool."""
    extra = cfg["synthetic.pool_size"]
    if not extra:
        return train
    pool = build_synthetic_dataset(cfg.synthetic_params(), extra, cfg["data.steps"], cfg["seed"] + POOL_SEED_OFFSET)
    return FrameDataset(np.concatenate([train.frames, pool.frames]), np.concatenate([train.labels, pool.labels]))


def run_pretrain(cfg: RunConfig, out_dir=None):
    out = Path(out_dir or cfg["out_dir"])
    out.mkdir(parents=True, exist_ok=True)
    train, _ = load_datasets(cfg)
    res = pretrain(cfg.pretrain_config(), pretrain_pool(cfg, train), out_dir=out)
    res.metrics.write(out / PRETRAIN_METRICS, out / "pretrain_timing.jsonl")
    (out / "config.resolved").write_text(cfg.to_text())
    return res


def run_finetune(cfg: RunConfig, checkpoint=None, out_dir=None):
    out = Path(out_dir or cfg["out_dir"])
    out.mkdir(parents=True, exist_ok=True)
    train, test = load_datasets(cfg)
    state = read_checkpoint(checkpoint) if checkpoint is not None else None
    ft = cfg.finetune_config(num_classes=cfg.num_classes)
    if state is None and ft.init_from != "random":
        ft = replace(ft, init_from="random")
    res = finetune(ft, state, train, test, out_dir=out)
    res.metrics.write(out / FINETUNE_METRICS, out / "finetune_timing.jsonl")
    summary = {"test_accuracy": res.test_accuracy, "init_from": ft.init_from, "loss": ft.loss,
               "train_size": len(train), "test_size": len(test)}
    (out / "summary.json").write_text(json.dumps(summary, sort_keys=True) + "\n")
    return res


# ---------------------------------------------------------------------------
# ablation: random-init MBC vs random-init mix vs pretrained


ABLATION_ARMS = ("random_mbc", "random_mix", "pretrained")


@dataclass(frozen=True)
class AblationRow:
    seed: int
    arm: str
    accuracy: float


def _ablation_seed(args) -> list[AblationRow]:
    cfg, seed = args
    cfg = cfg.with_overrides(seed=seed)
    train, test = load_datasets(cfg)
    # only the final accuracy is reported; evaluation does not touch training state
    base = replace(cfg.finetune_config(), eval_every=0)
    rows = []
    for arm, loss in (("random_mbc", "mbc"), ("random_mix", "mix")):
        ft = replace(base, loss=loss, init_from="random")
        rows.append(AblationRow(seed, arm, finetune(ft, None, train, test).test_accuracy))
    res = pretrain(cfg.pretrain_config(), pretrain_pool(cfg, train))
    ft = base
    if ft.init_from == "random":
        raise ConfigError("the pretrained arm needs finetune.init_from = key or query")
    rows.append(AblationRow(seed, "pretrained", finetune(ft, encoder_checkpoint(res.pair), train, test).test_accuracy))
    return rows


def run_ablation(cfg: RunConfig, seeds, workers: int | None = None) -> list[AblationRow]:
    """Per seed: fine-tune from random init with MBC and mix losses, then pretrain + fine-tune."""
    jobs = [(cfg, int(s)) for s in seeds]
    workers = min(workers or worker_count(), len(jobs))
    if workers <= 1:
        results = [_ablation_seed(j) for j in jobs]
    else:
        with ProcessPoolExecutor(workers) as pool:
            results = list(pool.map(_ablation_seed, jobs))
    return [row for rows in results for row in rows]


def ablation_medians(rows: list[AblationRow]) -> dict[str, float]:
    return {arm: float(np.median([r.accuracy for r in rows if r.arm == arm])) for arm in ABLATION_ARMS}
