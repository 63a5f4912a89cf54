"""Momentum contrast with a time dimension.

Similarity logits keep the time axis: for each time step t and sample n the
row holds the positive similarity q.k followed by similarities against every
queued negative, all divided by the temperature.  The positive sits at
index 0.  Three reductions over T are provided:

* ``loss_mbc`` averages the logits over T, then applies cross-entropy;
* ``loss_mac`` applies cross-entropy per time step, then averages;
* ``loss_mix`` is the convex combination ``alpha * mbc + beta * mac``.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from neuromoco.errors import ConfigError, IntegrityError, ShapeError
from neuromoco.snn import Module
from neuromoco.tensor import (
    Tensor,
    add,
    concat,
    cross_entropy_from_logits,
    matmul,
    mean_over,
    mul,
    no_grad,
    reshape,
    scale,
    sum_over,
)


@dataclass(frozen=True)
class ContrastiveConfig:
    temperature: float = 0.07
    queue_len: int = 512
    alpha: float = 0.5
    beta: float = 0.5
    prefill_random: bool = True

    def __post_init__(self):
        if self.temperature <= 0:
            raise ConfigError("temperature must be positive")
        if self.queue_len < 1:
            raise ConfigError("queue length must be >= 1")
        check_mix_weights(self.alpha, self.beta)


def check_mix_weights(alpha: float, beta: float) -> None:
    if alpha < 0 or beta < 0 or abs(alpha + beta - 1.0) > 1e-12:
        raise ConfigError(f"alpha and beta must be non-negative and sum to 1, got {alpha}, {beta}")


class QueueState:
    """Ring buffer of L unit-norm key embeddings per time step, shape (T, L, C).

    Columns ``[0, filled)`` are valid.  Keys enter at ``write_ptr`` and the
    oldest column is overwritten once the buffer is full.
    """

    def __init__(self, steps: int, length: int, dim: int, dtype=np.float32):
        self.buffer = np.zeros((steps, length, dim), dtype=dtype)
        self.write_ptr = 0
        self.filled = 0
        self.total_enqueued = 0

    @property
    def length(self) -> int:
        return self.buffer.shape[1]

    @classmethod
    def random(cls, steps: int, length: int, dim: int, rng: np.random.Generator, dtype=np.float32) -> QueueState:
        q = cls(steps, length, dim, dtype)
        noise = rng.standard_normal((steps, length, dim))
        q.buffer[...] = noise / np.linalg.norm(noise, axis=-1, keepdims=True)
        q.filled = length
        return q

    def negatives(self) -> np.ndarray:
        return self.buffer[:, :self.filled]

    def enqueue(self, keys) -> None:
        enqueue(self, keys)


def enqueue(queue: QueueState, keys) -> None:
    """Write a batch of keys (T, N, C), detached and L2-normalised."""
    k = keys.data if isinstance(keys, Tensor) else np.asarray(keys)
    T, L, C = queue.buffer.shape
    if k.ndim != 3 or k.shape[0] != T or k.shape[2] != C:
        raise ShapeError(f"keys {k.shape} do not match queue (T={T}, C={C})")
    n = k.shape[1]
    if n > L:
        raise ConfigError(f"batch of {n} keys exceeds queue length {L}")
    norm = np.maximum(np.linalg.norm(k, axis=-1, keepdims=True), 1e-12)
    cols = (queue.write_ptr + np.arange(n)) % L
    queue.buffer[:, cols] = (k / norm).astype(queue.buffer.dtype)
    queue.write_ptr = int((queue.write_ptr + n) % L)
    queue.filled = min(queue.filled + n, L)
    queue.total_enqueued += n


def similarity_logits(q: Tensor, k, queue: QueueState | None, temperature: float) -> Tensor:
    """(T, N, 1 + filled) logits; column 0 is the positive pair.

    ``q`` and ``k`` must already be unit-normalised along C.  ``k`` is used
    as a constant (no gradient reaches the key encoder).
    """
    kd = k.data if isinstance(k, Tensor) else np.asarray(k)
    if q.ndim != 3 or q.shape != kd.shape:
        raise ShapeError(f"q {q.shape} and k {kd.shape} must both be (T, N, C)")
    T, N, C = q.shape
    k_const = Tensor(kd, dtype=q.dtype)
    pos = reshape(sum_over(mul(q, k_const), axis=2), (T, N, 1))
    parts = [pos]
    if queue is not None and queue.filled:
        if queue.buffer.shape[0] != T or queue.buffer.shape[2] != C:
            raise ShapeError(f"queue {queue.buffer.shape} incompatible with embeddings {q.shape}")
        neg_t = Tensor(np.ascontiguousarray(queue.negatives().transpose(0, 2, 1)), dtype=q.dtype)
        parts.append(matmul(q, neg_t))
    logits = concat(parts, axis=2) if len(parts) > 1 else pos
    return scale(logits, 1.0 / temperature)


def loss_mbc(logits: Tensor, target=0) -> Tensor:
    """Mean over T first, then cross-entropy; ``target`` is an int or (N,) labels."""
    return cross_entropy_from_logits(mean_over(logits, axis=0), target)


def loss_mac(logits: Tensor, target=0) -> Tensor:
    """Cross-entropy at every (t, n), then the mean."""
    tgt = np.asarray(target)
    if tgt.ndim == 1:
        tgt = np.broadcast_to(tgt, logits.shape[:2])
    return cross_entropy_from_logits(logits, tgt)


def loss_mix(logits: Tensor, alpha: float = 0.5, beta: float = 0.5, target=0) -> Tensor:
    check_mix_weights(alpha, beta)
    return add(scale(loss_mbc(logits, target), alpha), scale(loss_mac(logits, target), beta))


def time_loss(kind: str, logits: Tensor, target=0, alpha: float = 0.5, beta: float = 0.5) -> Tensor:
    """Dispatch by name: ``mbc``, ``mac`` or ``mix``."""
    if kind == "mbc":
        return loss_mbc(logits, target)
    if kind == "mac":
        return loss_mac(logits, target)
    if kind == "mix":
        return loss_mix(logits, alpha, beta, target)
    raise ConfigError(f"unknown loss kind {kind!r}")


class EncoderPair:
    """Query encoder (gradient-trained) and key encoder (momentum-updated)."""

    def __init__(self, query: Module, key: Module, m: float):
        if not 0.0 <= m <= 1.0:
            raise ConfigError(f"momentum coefficient must lie in [0, 1], got {m}")
        self.query, self.key, self.m = query, key, m
        qp, kp = query.named_parameters(), key.named_parameters()
        if list(qp) != list(kp) or any(qp[n].shape != kp[n].shape for n in qp):
            raise IntegrityError("query and key encoders differ in parameter names or shapes")
        key.requires_grad_(False)

    @classmethod
    def from_query(cls, query: Module, make_copy, m: float) -> EncoderPair:
        """Build the key encoder with ``make_copy()`` and copy every tensor from ``query``."""
        key = make_copy()
        key.load_state_dict(query.state_dict())
        return cls(query, key, m)

    def momentum_update(self) -> None:
        momentum_update(self)


def momentum_update(pair: EncoderPair) -> None:
    """theta_k <- m * theta_k + (1 - m) * theta_q, elementwise, without recording."""
    qp = pair.query.named_parameters()
    kp = pair.key.named_parameters()
    if set(qp) != set(kp):
        raise IntegrityError("query and key encoders no longer share parameter names")
    m = pair.m
    with no_grad():
        for name, q in qp.items():
            k = kp[name]
            if k.shape != q.shape:
                raise IntegrityError(f"{name}: shape {k.shape} != {q.shape}")
            k.data[...] = m * k.data + (1.0 - m) * q.data

