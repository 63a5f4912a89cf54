"""Event streams: EVST/FRMT file formats, time-window binning, synthetic data.

An event stream is stored column-wise in a numpy structured array so that a
stream of a few thousand events bins in one ``bincount`` call.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from neuromoco.errors import CorruptionError, FormatError, ValidationError

EVENT_DTYPE = np.dtype([("t", "<u8"), ("x", "<u2"), ("y", "<u2"), ("p", "u1"), ("pad", "u1")])
EVST_MAGIC = b"EVST"
FRMT_MAGIC = b"FRMT"
_EVST_HEADER = struct.Struct("<4sHHHQ")
_FRMT_HEADER = struct.Struct("<4sHIIII")
FORMAT_VERSION = 1


@dataclass(frozen=True)
class Event:
    t: int
    x: int
    y: int
    polarity: int


@dataclass(frozen=True, eq=False)
class EventStream:
    """Sensor geometry plus a time-sorted record array (see ``EVENT_DTYPE``)."""

    width: int
    height: int
    events: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=EVENT_DTYPE))

    def __post_init__(self):
        ev = np.asarray(self.events)
        if ev.dtype != EVENT_DTYPE:
            ev = _coerce_records(ev)
        object.__setattr__(self, "events", ev)
        self.validate()

    @classmethod
    def from_events(cls, width: int, height: int, events) -> EventStream:
        rec = np.zeros(len(events), dtype=EVENT_DTYPE)
        for i, e in enumerate(events):
            rec[i] = (e.t, e.x, e.y, e.polarity, 0)
        return cls(width, height, rec)

    @classmethod
    def from_arrays(cls, width: int, height: int, t, x, y, p) -> EventStream:
        rec = np.zeros(len(t), dtype=EVENT_DTYPE)
        rec["t"], rec["x"], rec["y"], rec["p"] = t, x, y, p
        return cls(width, height, rec)

    def validate(self) -> None:
        if not (0 < self.width < 65536 and 0 < self.height < 65536):
            raise ValidationError(f"sensor size {self.width}x{self.height} outside 1..65535")
        ev = self.events
        if ev.size == 0:
            return
        if (ev["x"] >= self.width).any() or (ev["y"] >= self.height).any():
            raise ValidationError(f"event coordinates outside {self.width}x{self.height} sensor")
        if (ev["p"] > 1).any():
            raise ValidationError("polarity must be 0 or 1")
        if (np.diff(ev["t"].astype(np.int64)) < 0).any():
            raise ValidationError("events are not sorted by timestamp")

    def __len__(self) -> int:
        return int(self.events.size)

    def __iter__(self):
        for r in self.events:
            yield Event(int(r["t"]), int(r["x"]), int(r["y"]), int(r["p"]))

    def __eq__(self, other) -> bool:
        if not isinstance(other, EventStream):
            return NotImplemented
        return (
            self.width == other.width
            and self.height == other.height
            and self.events.tobytes() == other.events.tobytes()
        )


def _coerce_records(ev: np.ndarray) -> np.ndarray:
    if ev.dtype.names is None or not {"t", "x", "y", "p"} <= set(ev.dtype.names):
        raise ValidationError(f"events must be a record array with t, x, y, p fields, got {ev.dtype}")
    rec = np.zeros(ev.shape[0], dtype=EVENT_DTYPE)
    for name in ("t", "x", "y", "p"):
        rec[name] = ev[name]
    return rec


# ---------------------------------------------------------------------------
# EVST files


def write_event_file(stream: EventStream, path) -> None:
    path = Path(path)
    stream.validate()
    header = _EVST_HEADER.pack(EVST_MAGIC, FORMAT_VERSION, stream.width, stream.height, len(stream))
    try:
        with open(path, "wb") as fh:
            fh.write(header)
            fh.write(stream.events.tobytes())
    except OSError as exc:
        raise OSError(f"cannot write event file {path}: {exc.strerror}") from exc


def parse_event_file(path) -> EventStream:
    path = Path(path)
    buf = path.read_bytes()
    if len(buf) < 4 or buf[:4] != EVST_MAGIC:
        raise FormatError(f"{path}: not an EVST file (magic {buf[:4]!r})")
    if len(buf) < _EVST_HEADER.size:
        raise CorruptionError(f"{path}: truncated header")
    _, version, width, height, count = _EVST_HEADER.unpack_from(buf, 0)
    if version != FORMAT_VERSION:
        raise FormatError(f"{path}: unsupported EVST version {version}")
    payload = len(buf) - _EVST_HEADER.size
    if payload != count * EVENT_DTYPE.itemsize:
        raise CorruptionError(
            f"{path}: header declares {count} records but payload holds {payload / EVENT_DTYPE.itemsize:g}"
        )
    events = np.frombuffer(buf, dtype=EVENT_DTYPE, count=count, offset=_EVST_HEADER.size).copy()
    return EventStream(width, height, events)


# ---------------------------------------------------------------------------
# frames


@dataclass(frozen=True, eq=False)
class FrameTensor:
    """Dense (T, 2, H, W) event counts; channel 0 = OFF, channel 1 = ON."""

    data: np.ndarray

    def __post_init__(self):
        d = np.asarray(self.data, dtype=np.float32)
        if d.ndim != 4 or d.shape[1] != 2:
            raise ValidationError(f"frame tensor must be (T, 2, H, W), got {d.shape}")
        if (d < 0).any():
            raise ValidationError("frame counts must be non-negative")
        object.__setattr__(self, "data", d)

    @property
    def shape(self) -> tuple[int, int, int, int]:
        return self.data.shape

    def __eq__(self, other) -> bool:
        if not isinstance(other, FrameTensor):
            return NotImplemented
        return self.data.shape == other.data.shape and self.data.tobytes() == other.data.tobytes()


@dataclass(frozen=True)
class BinningConfig:
    """``num_windows`` equal-duration windows.

    ``span`` optionally fixes a half-open ``[start, end)`` interval in
    microseconds; events outside it are dropped.  Without it the span is the
    closed ``[t_first, t_last]`` of the stream and nothing is dropped.
    """

    num_windows: int = 16
    span: tuple[int, int] | None = None

    def __post_init__(self):
        if self.num_windows < 1:
            raise ValidationError(f"num_windows must be >= 1, got {self.num_windows}")
        if self.span is not None and not self.span[1] > self.span[0]:
            raise ValidationError(f"empty binning span {self.span}")


@dataclass(frozen=True)
class BinResult:
    frames: FrameTensor
    dropped: int


def window_index(t: np.ndarray, start: int, duration: int, num_windows: int) -> np.ndarray:
    """Window of each timestamp: floor((t - start) * T / duration), capped at T - 1."""
    if duration <= 0:
        return np.zeros(t.shape, dtype=np.int64)
    offset = t.astype(np.uint64) - np.uint64(start)
    if duration * num_windows < 2**63:
        w = (offset.astype(np.int64) * num_windows) // duration
    else:
        w = np.array([(int(o) * num_windows) // duration for o in offset], dtype=np.int64)
    return np.minimum(w, num_windows - 1)


def bin_events(stream: EventStream, cfg: BinningConfig) -> BinResult:
    """Accumulate events into per-window, per-polarity count images."""
    T, H, W = cfg.num_windows, stream.height, stream.width
    ev = stream.events
    if ev.size == 0:
        return BinResult(FrameTensor(np.zeros((T, 2, H, W), dtype=np.float32)), 0)
    t = ev["t"]
    if cfg.span is None:
        start, end = int(t[0]), int(t[-1])
        keep = np.ones(t.shape, dtype=bool)
    else:
        start, end = cfg.span
        keep = (t >= np.uint64(start)) & (t < np.uint64(end))
    kept = ev[keep]
    w = window_index(kept["t"], start, end - start, T)
    flat = ((w * 2 + kept["p"].astype(np.int64)) * H + kept["y"].astype(np.int64)) * W + kept["x"].astype(np.int64)
    counts = np.bincount(flat, minlength=T * 2 * H * W).astype(np.float32)
    return BinResult(FrameTensor(counts.reshape(T, 2, H, W)), int(ev.size - kept.size))


def write_frame_file(frames: FrameTensor, path) -> None:
    path = Path(path)
    T, C, H, W = frames.shape
    try:
        with open(path, "wb") as fh:
            fh.write(_FRMT_HEADER.pack(FRMT_MAGIC, FORMAT_VERSION, T, C, H, W))
            fh.write(np.ascontiguousarray(frames.data, dtype="<f4").tobytes())
    except OSError as exc:
        raise OSError(f"cannot write frame file {path}: {exc.strerror}") from exc


def read_frame_file(path, expect_shape: tuple[int, ...] | None = None) -> FrameTensor:
    path = Path(path)
    buf = path.read_bytes()
    if len(buf) < _FRMT_HEADER.size or buf[:4] != FRMT_MAGIC:
        raise FormatError(f"{path}: not a FRMT file")
    _, version, T, C, H, W = _FRMT_HEADER.unpack_from(buf, 0)
    if version != FORMAT_VERSION:
        raise FormatError(f"{path}: unsupported FRMT version {version}")
    n = T * C * H * W
    if len(buf) - _FRMT_HEADER.size != 4 * n:
        raise FormatError(f"{path}: payload size does not match header shape {(T, C, H, W)}")
    if expect_shape is not None and (T, C, H, W) != tuple(expect_shape):
        raise FormatError(f"{path}: shape {(T, C, H, W)} != expected {tuple(expect_shape)}")
    data = np.frombuffer(buf, dtype="<f4", count=n, offset=_FRMT_HEADER.size).reshape(T, C, H, W)
    return FrameTensor(data.astype(np.float32))


# ---------------------------------------------------------------------------
# synthetic moving-bar recordings


@dataclass(frozen=True)
class SyntheticParams:
    """Moving-bar generator settings.

    Class ``k`` fixes the bar orientation (``k % 2``: horizontal or vertical)
    and its speed level (``k // 2``).  Direction of travel, position, length,
    thickness and a small tilt are drawn per sample, so horizontal flips do
    not change the class.
    """

    width: int = 32
    height: int = 32
    num_classes: int = 4
    duration_us: int = 100_000
    event_rate: float = 40.0  # signal events per millisecond
    noise_fraction: float = 0.25  # noise events per signal event
    base_speed: float = 0.25  # pixels per millisecond at speed level 0
    speed_step: float = 1.5  # relative speed increase per level
    speed_jitter: float = 0.15
    tilt_deg: float = 8.0
    edge_jitter: float = 0.6

    def speed(self, class_id: int) -> float:
        return self.base_speed * (1.0 + self.speed_step * (class_id // 2))


def gen_synthetic_stream(class_id: int, seed: int, params: SyntheticParams | None = None) -> tuple[EventStream, int]:
    """Deterministic moving-bar recording for ``class_id`` under ``seed``."""
    params = params or SyntheticParams()
    if not 0 <= class_id < params.num_classes:
        raise ValidationError(f"class {class_id} outside 0..{params.num_classes - 1}")
    rng = np.random.default_rng([int(seed), int(class_id)])
    W, H = params.width, params.height
    dur_ms = params.duration_us / 1000.0

    n_sig = int(rng.poisson(params.event_rate * dur_ms))
    n_noise = int(rng.poisson(params.noise_fraction * params.event_rate * dur_ms))

    vertical = class_id % 2 == 1
    tilt = np.deg2rad(rng.uniform(-params.tilt_deg, params.tilt_deg))
    # normal of a horizontal bar points along +y; a vertical bar moves along x
    phi = (0.0 if vertical else np.pi / 2) + tilt
    normal = np.array([np.cos(phi), np.sin(phi)])
    tangent = np.array([-normal[1], normal[0]])
    extent = W if vertical else H
    direction = rng.choice([-1.0, 1.0])
    speed = params.speed(class_id) * (1.0 + rng.uniform(-params.speed_jitter, params.speed_jitter))
    start = rng.uniform(0, extent)
    thickness = rng.uniform(2.0, 4.0)
    half_len = rng.uniform(0.3, 0.45) * (H if vertical else W)
    tan_center = rng.uniform(-0.15, 0.15) * (H if vertical else W)

    t_sig = rng.integers(0, params.duration_us, size=n_sig)
    leading = rng.random(n_sig) < 0.5
    pos = start + direction * speed * (t_sig / 1000.0)
    edge = pos + np.where(leading, 0.5, -0.5) * direction * thickness
    u = np.mod(edge + rng.normal(0, params.edge_jitter, n_sig), extent) - extent / 2.0
    v = tan_center + rng.uniform(-half_len, half_len, n_sig)
    cx, cy = (W - 1) / 2.0, (H - 1) / 2.0
    xs = np.rint(cx + u * normal[0] + v * tangent[0]).astype(np.int64)
    ys = np.rint(cy + u * normal[1] + v * tangent[1]).astype(np.int64)
    p_sig = leading.astype(np.uint8)

    t_noise = rng.integers(0, params.duration_us, size=n_noise)
    x_noise = rng.integers(0, W, size=n_noise)
    y_noise = rng.integers(0, H, size=n_noise)
    p_noise = rng.integers(0, 2, size=n_noise).astype(np.uint8)

    t_all = np.concatenate([t_sig, t_noise])
    x_all = np.concatenate([xs, x_noise])
    y_all = np.concatenate([ys, y_noise])
    p_all = np.concatenate([p_sig, p_noise])
    inside = (x_all >= 0) & (x_all < W) & (y_all >= 0) & (y_all < H)
    order = np.argsort(t_all[inside], kind="stable")
    stream = EventStream.from_arrays(
        W, H,
        t_all[inside][order], x_all[inside][order], y_all[inside][order], p_all[inside][order],
    )
    return stream, class_id
