"""Spiking encoder: LIF layers, SEW residual blocks and the SEW-mini backbone.

Layers run in multi-step mode: each stateless op (conv, BN, pooling) is
applied to all T time steps at once with time folded into the batch axis,
and LIF neurons then integrate along time.  This is the same computation as
stepping the whole network once per time step, just batched.
"""
from __future__ import annotations

import math
from collections import OrderedDict
from dataclasses import dataclass, field

import numpy as np

from neuromoco.errors import ShapeError, ValidationError
from neuromoco.tensor import (
    LIFConfig,
    Tensor,
    add,
    batch_norm,
    conv2d,
    global_avg_pool,
    get_default_dtype,
    lif_multistep,
    lif_step,
    linear,
    max_pool2d,
    relu,
    reshape,
)

__all__ = [
    "LIFConfig",
    "LIFState",
    "BackboneConfig",
    "Module",
    "Conv2d",
    "BatchNorm",
    "Linear",
    "SpikingConvBN",
    "SEWBlock",
    "Backbone",
    "ProjectionHead",
    "ClassificationHead",
    "Encoder",
    "Classifier",
    "lif_step",
    "lif_forward",
    "sew_block_forward",
    "backbone_forward",
    "classification_head",
]


@dataclass
class LIFState:
    v: Tensor

    @classmethod
    def resting(cls, shape, cfg: LIFConfig, dtype=np.float32) -> LIFState:
        return cls(Tensor(np.full(shape, cfg.v_reset, dtype=dtype), dtype=dtype))


@dataclass(frozen=True)
class BackboneConfig:
    widths: tuple[int, ...] = (32, 64, 128)
    blocks: tuple[int, ...] = (1, 1, 1)
    embed_dim: int = 128
    resolution: tuple[int, int] = (32, 32)
    in_channels: int = 2
    stem_stride: int = 2
    lif: LIFConfig = field(default_factory=LIFConfig)

    def __post_init__(self):
        if self.embed_dim <= 0:
            raise ValidationError("embedding dim must be positive")
        if self.in_channels != 2:
            raise ValidationError("input must have exactly 2 polarity channels")
        if len(self.widths) != len(self.blocks) or not self.widths:
            raise ValidationError("widths and blocks must be non-empty and of equal length")
        factor = self.stem_stride * 2 ** len(self.widths)
        h, w = self.resolution
        if h % factor or w % factor:
            raise ValidationError(f"resolution {self.resolution} not divisible by total downsampling {factor}")


# ---------------------------------------------------------------------------
# module plumbing


class Module:
    training = True

    def children(self):
        return [(k, v) for k, v in vars(self).items() if isinstance(v, Module)]

    def _own_params(self):
        return [(k, v) for k, v in vars(self).items() if isinstance(v, Tensor)]

    def _own_buffers(self):
        return [(k, v) for k, v in vars(self).items() if isinstance(v, np.ndarray)]

    def named_parameters(self, prefix: str = "") -> OrderedDict[str, Tensor]:
        out: OrderedDict[str, Tensor] = OrderedDict()
        for k, v in self._own_params():
            out[prefix + k] = v
        for k, child in self.children():
            out.update(child.named_parameters(f"{prefix}{k}."))
        return out

    def named_buffers(self, prefix: str = "") -> OrderedDict[str, np.ndarray]:
        out: OrderedDict[str, np.ndarray] = OrderedDict()
        for k, v in self._own_buffers():
            out[prefix + k] = v
        for k, child in self.children():
            out.update(child.named_buffers(f"{prefix}{k}."))
        return out

    def parameters(self) -> list[Tensor]:
        return list(self.named_parameters().values())

    def trainable(self) -> list[Tensor]:
        return [p for p in self.parameters() if p.requires_grad]

    def requires_grad_(self, flag: bool) -> Module:
        for p in self.parameters():
            p.requires_grad = flag
        return self

    def state_dict(self) -> OrderedDict[str, np.ndarray]:
        sd = OrderedDict((k, v.data) for k, v in self.named_parameters().items())
        sd.update(self.named_buffers())
        return sd

    def load_state_dict(self, state, strict: bool = True) -> None:
        params, buffers = self.named_parameters(), self.named_buffers()
        expected = set(params) | set(buffers)
        if strict and set(state) != expected:
            missing = sorted(expected - set(state))
            extra = sorted(set(state) - expected)
            raise ShapeError(f"state mismatch: missing {missing[:5]}, unexpected {extra[:5]}")
        for name, arr in state.items():
            target = params[name].data if name in params else buffers.get(name)
            if target is None:
                continue
            if target.shape != arr.shape:
                raise ShapeError(f"{name}: checkpoint shape {arr.shape} != model shape {target.shape}")
            target[...] = arr

    def train(self, mode: bool = True) -> Module:
        self.training = mode
        for _, child in self.children():
            child.train(mode)
        return self

    def eval(self) -> Module:
        return self.train(False)

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


def _param(arr: np.ndarray) -> Tensor:
    # float32 unless built inside ``precision(np.float64)``
    dtype = get_default_dtype()
    return Tensor(arr.astype(dtype), requires_grad=True, dtype=dtype)


class Conv2d(Module):
    def __init__(self, cin: int, cout: int, k: int, rng: np.random.Generator, stride: int = 1, padding: int | None = None):
        bound = 1.0 / math.sqrt(cin * k * k)
        self.weight = _param(rng.uniform(-bound, bound, size=(cout, cin, k, k)))
        self.stride = stride
        self.padding = k // 2 if padding is None else padding

    def forward(self, x: Tensor) -> Tensor:
        return conv2d(x, self.weight, None, stride=self.stride, padding=self.padding)


class BatchNorm(Module):
    """BN whose statistics pool time and batch together (input is (T*N, C, H, W))."""

    def __init__(self, c: int, momentum: float = 0.1, eps: float = 1e-5):
        self.gamma = _param(np.ones(c))
        self.beta = _param(np.zeros(c))
        self.running_mean = np.zeros(c, dtype=get_default_dtype())
        self.running_var = np.ones(c, dtype=get_default_dtype())
        self.momentum, self.eps = momentum, eps

    def forward(self, x: Tensor) -> Tensor:
        return batch_norm(x, self.gamma, self.beta, self.running_mean, self.running_var,
                          self.training, self.momentum, self.eps)


class Linear(Module):
    def __init__(self, cin: int, cout: int, rng: np.random.Generator, zero: bool = False):
        bound = 1.0 / math.sqrt(cin)
        if zero:
            self.weight = _param(np.zeros((cout, cin)))
            self.bias = _param(np.zeros(cout))
        else:
            self.weight = _param(rng.uniform(-bound, bound, size=(cout, cin)))
            self.bias = _param(rng.uniform(-bound, bound, size=cout))

    def forward(self, x: Tensor) -> Tensor:
        return linear(x, self.weight, self.bias)


def lif_forward(x: Tensor, steps: int, cfg: LIFConfig) -> Tensor:
    """LIF over a time-folded ``(T*N, ...)`` tensor; returns spikes, same shape."""
    folded = x.shape
    seq = reshape(x, (steps, folded[0] // steps) + folded[1:])
    return reshape(lif_multistep(seq, cfg), folded)


class SpikingConvBN(Module):
    """Conv -> BN -> LIF."""

    def __init__(self, cin: int, cout: int, rng: np.random.Generator, lif: LIFConfig, stride: int = 1):
        self.conv = Conv2d(cin, cout, 3, rng, stride=stride)
        self.bn = BatchNorm(cout)
        self.lif = lif

    def forward(self, x: Tensor, steps: int) -> Tensor:
        return lif_forward(self.bn(self.conv(x)), steps, self.lif)


class SEWBlock(Module):
    """Spike-element-wise residual block with ADD as the connecting function."""

    def __init__(self, c: int, rng: np.random.Generator, lif: LIFConfig):
        self.branch1 = SpikingConvBN(c, c, rng, lif)
        self.branch2 = SpikingConvBN(c, c, rng, lif)
        self.channels = c

    def forward(self, x: Tensor, steps: int) -> Tensor:
        if x.shape[1] != self.channels:
            raise ShapeError(f"SEW block expects {self.channels} channels, got {x.shape[1]}")
        return add(self.branch2(self.branch1(x, steps), steps), x)


def sew_block_forward(x_spikes: Tensor, block: SEWBlock, steps: int) -> Tensor:
    return block(x_spikes, steps)


class Backbone(Module):
    """SEW-mini: spiking stem, SEW stages with max-pool downsampling, GAP, linear.

    stem Conv(2->w0, stride) -> BN -> LIF -> MaxPool2
    stage i: [Conv(w_{i-1} -> w_i) -> BN -> LIF -> MaxPool2] (i > 0), then SEW blocks
    then per-time-step global average pool and a linear map to ``embed_dim``.
    """

    def __init__(self, cfg: BackboneConfig, rng: np.random.Generator):
        self.cfg = cfg
        w0 = cfg.widths[0]
        self.stem = SpikingConvBN(cfg.in_channels, w0, rng, cfg.lif, stride=cfg.stem_stride)
        self.stages = []
        prev = w0
        for i, (width, nblocks) in enumerate(zip(cfg.widths, cfg.blocks)):
            if i > 0:
                down = SpikingConvBN(prev, width, rng, cfg.lif)
                setattr(self, f"down{i}", down)
            blocks = []
            for j in range(nblocks):
                blk = SEWBlock(width, rng, cfg.lif)
                setattr(self, f"stage{i}_block{j}", blk)
                blocks.append(blk)
            self.stages.append((down if i > 0 else None, blocks))
            prev = width
        self.proj = Linear(prev, cfg.embed_dim, rng)

    def forward(self, frames) -> Tensor:
        """``frames`` (T, N, 2, H, W) -> embeddings (T, N, C)."""
        x = frames if isinstance(frames, Tensor) else Tensor(frames)
        if x.ndim != 5 or x.shape[2] != self.cfg.in_channels or tuple(x.shape[3:]) != tuple(self.cfg.resolution):
            raise ShapeError(
                f"expected (T, N, {self.cfg.in_channels}, {self.cfg.resolution[0]}, {self.cfg.resolution[1]}), got {x.shape}"
            )
        T, N = x.shape[:2]
        h = reshape(x, (T * N,) + x.shape[2:])
        h = max_pool2d(self.stem(h, T), 2)
        for down, blocks in self.stages:
            if down is not None:
                h = max_pool2d(down(h, T), 2)
            for blk in blocks:
                h = blk(h, T)
        feat = global_avg_pool(h)
        emb = self.proj(feat)
        return reshape(emb, (T, N, self.cfg.embed_dim))


def backbone_forward(frames, backbone: Backbone) -> Tensor:
    return backbone(frames)


class ProjectionHead(Module):
    """Pretraining MLP C -> C -> C applied independently at each time step."""

    def __init__(self, dim: int, rng: np.random.Generator):
        self.fc1 = Linear(dim, dim, rng)
        self.fc2 = Linear(dim, dim, rng)

    def forward(self, x: Tensor) -> Tensor:
        return self.fc2(relu(self.fc1(x)))


class ClassificationHead(Module):
    def __init__(self, dim: int, num_classes: int, rng: np.random.Generator, zero: bool = False):
        self.fc = Linear(dim, num_classes, rng, zero=zero)
        self.dim = dim

    def forward(self, emb: Tensor) -> Tensor:
        if emb.shape[-1] != self.dim:
            raise ShapeError(f"head expects embedding dim {self.dim}, got {emb.shape[-1]}")
        return self.fc(emb)


def classification_head(embeddings: Tensor, head: ClassificationHead) -> Tensor:
    """(T, N, C) -> per-time-step logits (T, N, K)."""
    return head(embeddings)


class Encoder(Module):
    """Backbone plus optional projection head; used for both MoCo branches."""

    def __init__(self, cfg: BackboneConfig, rng: np.random.Generator, with_head: bool = True):
        self.backbone = Backbone(cfg, rng)
        if with_head:
            self.head = ProjectionHead(cfg.embed_dim, rng)

    def forward(self, frames) -> Tensor:
        z = self.backbone(frames)
        head = getattr(self, "head", None)
        return head(z) if head is not None else z


class Classifier(Module):
    def __init__(self, cfg: BackboneConfig, num_classes: int, rng: np.random.Generator):
        self.backbone = Backbone(cfg, rng)
        self.cls = ClassificationHead(cfg.embed_dim, num_classes, rng)

    def forward(self, frames) -> Tensor:
        return self.cls(self.backbone(frames))
