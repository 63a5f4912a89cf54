"""In-memory frame datasets, the synthetic benchmark, and on-disk corpora.

A corpus directory holds one EVST (``.evst``) or FRMT (``.frmt``) file per
sample plus ``manifest.csv`` with ``file,label`` rows.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from neuromoco.errors import FormatError, ValidationError
from neuromoco.events import (
    BinningConfig,
    SyntheticParams,
    bin_events,
    gen_synthetic_stream,
    parse_event_file,
    read_frame_file,
    write_event_file,
)

MANIFEST = "manifest.csv"

# named random streams split off the root seed
STREAM_DATA = 0
STREAM_VIEW_1 = 1
STREAM_VIEW_2 = 2
STREAM_INIT = 3
STREAM_SHUFFLE = 4
STREAM_QUEUE = 5
STREAM_TEST_DATA = 6


def component_rng(root_seed: int, stream: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(root_seed), int(stream)]))


@dataclass
class FrameDataset:
    frames: np.ndarray  # (S, T, 2, H, W) float32
    labels: np.ndarray  # (S,) int64

    def __post_init__(self):
        self.frames = np.asarray(self.frames, dtype=np.float32)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.frames.ndim != 5 or self.frames.shape[2] != 2:
            raise ValidationError(f"dataset frames must be (S, T, 2, H, W), got {self.frames.shape}")
        if len(self.labels) != len(self.frames):
            raise ValidationError("frames and labels differ in length")

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def steps(self) -> int:
        return self.frames.shape[1]

    @property
    def resolution(self) -> tuple[int, int]:
        return self.frames.shape[3], self.frames.shape[4]

    def subset(self, idx) -> FrameDataset:
        return FrameDataset(self.frames[idx], self.labels[idx])

    def batches(self, batch_size: int, rng: np.random.Generator | None = None, drop_last: bool = False):
        order = np.arange(len(self)) if rng is None else rng.permutation(len(self))
        stop = len(order) - (len(order) % batch_size if drop_last else 0)
        for i in range(0, stop, batch_size):
            yield order[i:i + batch_size]


def synthetic_streams(params: SyntheticParams, count: int, seed: int):
    """``count`` (stream, label) pairs with labels cycling over the classes."""
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), STREAM_DATA]))
    seeds = rng.integers(0, 2**62, size=count)
    for i in range(count):
        yield gen_synthetic_stream(i % params.num_classes, int(seeds[i]), params)


def build_synthetic_dataset(params: SyntheticParams, count: int, steps: int, seed: int) -> FrameDataset:
    cfg = BinningConfig(steps)
    frames = np.empty((count, steps, 2, params.height, params.width), dtype=np.float32)
    labels = np.empty(count, dtype=np.int64)
    for i, (stream, label) in enumerate(synthetic_streams(params, count, seed)):
        frames[i] = bin_events(stream, cfg).frames.data
        labels[i] = label
    return FrameDataset(frames, labels)


def write_manifest(directory: Path, rows: list[tuple[str, int]]) -> None:
    with open(directory / MANIFEST, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["file", "label"])
        w.writerows(rows)


def read_manifest(directory: Path) -> list[tuple[str, int]]:
    path = Path(directory) / MANIFEST
    if not path.exists():
        raise ValidationError(f"{directory}: missing {MANIFEST}")
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != ["file", "label"]:
            raise FormatError(f"{path}: expected header 'file,label', got {header}")
        return [(name, int(label)) for name, label in reader]


def write_synthetic_corpus(out_dir, params: SyntheticParams, per_class: int, seed: int) -> list[tuple[str, int]]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    count = per_class * params.num_classes
    for i, (stream, label) in enumerate(synthetic_streams(params, count, seed)):
        name = f"sample_{i:05d}.evst"
        write_event_file(stream, out / name)
        rows.append((name, label))
    write_manifest(out, rows)
    return rows


def load_event_corpus(directory, steps: int) -> FrameDataset:
    directory = Path(directory)
    rows = read_manifest(directory)
    frames, labels = [], []
    for name, label in rows:
        frames.append(bin_events(parse_event_file(directory / name), BinningConfig(steps)).frames.data)
        labels.append(label)
    return FrameDataset(np.stack(frames), np.array(labels))


def load_frame_corpus(directory) -> FrameDataset:
    directory = Path(directory)
    rows = read_manifest(directory)
    if not rows:
        raise ValidationError(f"{directory}: empty manifest")
    first = read_frame_file(directory / rows[0][0])
    frames = np.empty((len(rows),) + first.shape, dtype=np.float32)
    labels = np.empty(len(rows), dtype=np.int64)
    for i, (name, label) in enumerate(rows):
        frames[i] = read_frame_file(directory / name, expect_shape=first.shape).data
        labels[i] = label
    return FrameDataset(frames, labels)


def load_corpus(directory, steps: int) -> FrameDataset:
    """Load FRMT files if the manifest lists them, otherwise bin EVST files."""
    rows = read_manifest(Path(directory))
    if rows and rows[0][0].endswith(".frmt"):
        return load_frame_corpus(directory)
    return load_event_corpus(directory, steps)
