"""Flat ``section.key = value`` run configuration.

Lines are ``key = value``; ``#`` starts a comment.  ``mode = paper | desk``
selects a preset and every other key overrides it, regardless of the order
in which the lines appear.  Unknown keys are rejected.

    mode = desk
    seed = 3
    pretrain.lr = 0.03
    backbone.widths = 32, 64, 128
"""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Any

from neuromoco.augment import AugmentPolicy
from neuromoco.contrastive import ContrastiveConfig
from neuromoco.errors import ConfigError, ValidationError
from neuromoco.events import SyntheticParams
from neuromoco.snn import BackboneConfig
from neuromoco.tensor import LIFConfig
from neuromoco.training import FinetuneConfig, PretrainConfig

# key -> default (its type drives parsing); tuples parse from comma lists, None means "auto"
DEFAULTS: dict[str, Any] = {
    "seed": 0,
    "out_dir": "runs/default",
    "data.train_dir": "",
    "data.test_dir": "",
    "data.steps": 16,
    "data.height": 32,
    "data.width": 32,
    "synthetic.num_classes": 4,
    "synthetic.train_size": 200,
    "synthetic.test_size": 100,
    "synthetic.pool_size": 0,
    "synthetic.duration_us": 100_000,
    "synthetic.event_rate": 20.0,
    "synthetic.noise_fraction": 1.0,
    "synthetic.base_speed": 0.25,
    "synthetic.speed_step": 0.5,
    "synthetic.speed_jitter": 0.15,
    "synthetic.tilt_deg": 8.0,
    "synthetic.edge_jitter": 0.6,
    "backbone.widths": (32, 64, 128),
    "backbone.blocks": (1, 1, 1),
    "backbone.embed_dim": 128,
    "backbone.stem_stride": 2,
    "lif.tau_mem": 2.0,
    "lif.v_threshold": 1.0,
    "lif.v_reset": 0.0,
    "lif.reset_mode": "hard",
    "contrastive.temperature": 0.07,
    "contrastive.queue_len": 512,
    "contrastive.alpha": 0.5,
    "contrastive.beta": 0.5,
    "contrastive.prefill_random": True,
    "augment.flip_prob": 0.5,
    "augment.shear_y": 0.15,
    "augment.translate_frac": 0.125,
    "augment.rotation_deg": 15.0,
    "augment.scale_min": 0.8,
    "augment.scale_max": 1.2,
    "pretrain.momentum": 0.999,
    "pretrain.batch_size": 32,
    "pretrain.epochs": 200,
    "pretrain.lr": 0.03,
    "pretrain.sgd_momentum": 0.9,
    "pretrain.weight_decay": 1e-4,
    "pretrain.milestones": None,
    "pretrain.gamma": 0.1,
    "finetune.batch_size": 16,
    "finetune.epochs": 100,
    "finetune.lr": 0.001,
    "finetune.weight_decay": 0.06,
    "finetune.warmup_epochs": 30,
    "finetune.loss": "mac",
    "finetune.alpha": 0.5,
    "finetune.beta": 0.5,
    "finetune.init_from": "key",
    "finetune.linear_probe": False,
    "finetune.augment": True,
    "finetune.eval_every": 1,
}

PRESETS: dict[str, dict[str, Any]] = {
    "paper": {},
    "desk": {
        "pretrain.epochs": 20,
        "pretrain.momentum": 0.99,
        "contrastive.queue_len": 128,
        "finetune.epochs": 10,
        "finetune.warmup_epochs": 3,
    },
}


def _parse_value(key: str, text: str) -> Any:
    default = DEFAULTS[key]
    text = text.strip()
    try:
        if default is None or isinstance(default, tuple):
            if default is None and text.lower() in ("", "auto", "none"):
                return None
            return tuple(int(p) for p in text.replace(",", " ").split())
        if isinstance(default, bool):
            low = text.lower()
            if low in ("true", "yes", "1", "on"):
                return True
            if low in ("false", "no", "0", "off"):
                return False
            raise ValueError(text)
        if isinstance(default, int):
            return int(text)
        if isinstance(default, float):
            return float(text)
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {text!r} as {type(default).__name__ if default is not None else 'list'}") from None
    return text


def parse_config_text(text: str, source: str = "<config>") -> dict[str, Any]:
    """Parse config text into a dict of typed overrides (``mode`` kept as a string)."""
    out: dict[str, Any] = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        if key in out:
            raise ConfigError(f"{source}:{lineno}: duplicate key {key!r}")
        if key == "mode":
            if value not in PRESETS:
                raise ConfigError(f"{source}:{lineno}: mode must be one of {sorted(PRESETS)}")
            out[key] = value
        elif key in DEFAULTS:
            out[key] = _parse_value(key, value)
        else:
            raise ConfigError(f"{source}:{lineno}: unknown key {key!r}")
    return out


@dataclass(frozen=True)
class RunConfig:
    mode: str
    values: dict[str, Any]

    @classmethod
    def from_overrides(cls, overrides: dict[str, Any] | None = None, mode: str | None = None) -> RunConfig:
        overrides = dict(overrides or {})
        mode = overrides.pop("mode", mode or "desk")
        if mode not in PRESETS:
            raise ConfigError(f"unknown mode {mode!r}")
        unknown = set(overrides) - set(DEFAULTS)
        if unknown:
            raise ConfigError(f"unknown keys: {sorted(unknown)}")
        values = {**DEFAULTS, **PRESETS[mode], **overrides}
        cfg = cls(mode, values)
        cfg.validate()
        return cfg

    @classmethod
    def from_text(cls, text: str, source: str = "<config>") -> RunConfig:
        return cls.from_overrides(parse_config_text(text, source))

    @classmethod
    def from_file(cls, path) -> RunConfig:
        path = Path(path)
        if not path.is_file():
            raise ValidationError(f"config file not found: {path}")
        return cls.from_text(path.read_text(), str(path))

    def __getitem__(self, key: str) -> Any:
        return self.values[key]

    def section(self, name: str) -> dict[str, Any]:
        prefix = name + "."
        return {k[len(prefix):]: v for k, v in self.values.items() if k.startswith(prefix)}

    def to_text(self) -> str:
        lines = [f"mode = {self.mode}"]
        for key in DEFAULTS:
            v = self.values[key]
            if isinstance(v, tuple):
                v = ", ".join(str(i) for i in v)
            elif v is None:
                v = "auto"
            elif isinstance(v, bool):
                v = "true" if v else "false"
            lines.append(f"{key} = {v}")
        return "\n".join(lines) + "\n"

    # -- typed views ---------------------------------------------------------

    def validate(self) -> None:
        """Construct every sub-config so range errors surface before a run starts."""
        try:
            self.pretrain_config()
            self.finetune_config()
            self.synthetic_params()
        except ValidationError as exc:
            raise ConfigError(str(exc)) from exc
        if self["data.steps"] < 1:
            raise ConfigError("data.steps must be positive")
        for key in ("data.train_dir", "data.test_dir"):
            if self[key] and not Path(self[key]).is_dir():
                raise ConfigError(f"{key}: directory not found: {self[key]}")
        if bool(self["data.train_dir"]) != bool(self["data.test_dir"]):
            raise ConfigError("data.train_dir and data.test_dir must be given together")

    @property
    def resolution(self) -> tuple[int, int]:
        return self["data.height"], self["data.width"]

    @property
    def num_classes(self) -> int:
        return self["synthetic.num_classes"]

    def synthetic_params(self) -> SyntheticParams:
        s = self.section("synthetic")
        for k in ("train_size", "test_size", "pool_size"):
            s.pop(k)
        return SyntheticParams(width=self["data.width"], height=self["data.height"], **s)

    def backbone_config(self) -> BackboneConfig:
        b = self.section("backbone")
        return BackboneConfig(widths=b["widths"], blocks=b["blocks"], embed_dim=b["embed_dim"],
                              resolution=self.resolution, stem_stride=b["stem_stride"],
                              lif=LIFConfig(**self.section("lif")))

    def augment_policy(self) -> AugmentPolicy:
        return AugmentPolicy(**self.section("augment"))

    def pretrain_config(self) -> PretrainConfig:
        p = self.section("pretrain")
        return PretrainConfig(
            steps=self["data.steps"], momentum_m=p["momentum"], batch_size=p["batch_size"], epochs=p["epochs"],
            lr=p["lr"], sgd_momentum=p["sgd_momentum"], weight_decay=p["weight_decay"],
            milestones=p["milestones"], gamma=p["gamma"], seed=self["seed"],
            backbone=self.backbone_config(), contrastive=ContrastiveConfig(**self.section("contrastive")),
            augment=self.augment_policy(),
        )

    def finetune_config(self, num_classes: int | None = None) -> FinetuneConfig:
        f = self.section("finetune")
        return FinetuneConfig(
            num_classes=num_classes or self.num_classes, seed=self["seed"],
            backbone=self.backbone_config(), policy=self.augment_policy(), **f,
        )

    def with_overrides(self, **kv) -> RunConfig:
        """Copy with dotted keys given as ``section__key=value``."""
        upd = {k.replace("__", "."): v for k, v in kv.items()}
        return RunConfig.from_overrides({**self.values, **upd, "mode": self.mode})


__all__ = ["DEFAULTS", "PRESETS", "RunConfig", "parse_config_text"]
