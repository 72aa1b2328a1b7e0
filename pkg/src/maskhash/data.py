"""Synthetic frame-feature datasets and the binary container format.

A video is an M x d float32 matrix of per-frame features. The synthetic
generator draws labeled videos around random class centers with a per-video
offset and temporally smooth per-frame noise, so frames within a video are
more alike than frames across videos.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from maskhash.errors import ArgumentError, FormatError

MAGIC = b"CMH1"
FORMAT_VERSION = 1


@dataclass
class FrameFeatureSequence:
    """One video: a frames matrix of shape (M, d) plus an optional class label."""

    video_id: int
    frames: np.ndarray
    label: int | None = None

    def __post_init__(self):
        self.frames = np.asarray(self.frames, dtype=np.float32)
        if self.frames.ndim != 2:
            raise ArgumentError(f"frames must be 2-D, got shape {self.frames.shape}")
        if not np.isfinite(self.frames).all():
            raise ArgumentError(f"frames of video {self.video_id} contain non-finite values")
        if self.label is not None and self.label < 0:
            raise ArgumentError(f"label must be non-negative, got {self.label}")

    def __eq__(self, other):
        if not isinstance(other, FrameFeatureSequence):
            return NotImplemented
        return (
            self.video_id == other.video_id
            and self.label == other.label
            and self.frames.shape == other.frames.shape
            and bool(np.array_equal(self.frames, other.frames))
        )


@dataclass(eq=False)
class FeatureDataset:
    """A list of same-shaped videos with metadata.

    ``split_name`` is a bookkeeping tag and is excluded from equality; the
    container format stores neither it nor ``num_classes`` (the latter is
    recovered from labels on load).
    """

    sequences: list[FrameFeatureSequence]
    d: int
    M: int
    num_classes: int | None = None
    split_name: str = ""

    def __post_init__(self):
        self.validate()

    def validate(self):
        if self.M < 1:
            raise ArgumentError(f"M must be positive, got {self.M}")
        if self.d < 1:
            raise ArgumentError(f"d must be positive, got {self.d}")
        ids = set()
        for seq in self.sequences:
            if seq.frames.shape != (self.M, self.d):
                raise ArgumentError(
                    f"video {seq.video_id} has shape {seq.frames.shape}, "
                    f"expected ({self.M}, {self.d})"
                )
            if seq.video_id in ids:
                raise ArgumentError(f"duplicate video_id {seq.video_id}")
            ids.add(seq.video_id)
            if self.num_classes is not None and seq.label is not None:
                if seq.label >= self.num_classes:
                    raise ArgumentError(
                        f"label {seq.label} out of range for {self.num_classes} classes"
                    )

    def __len__(self):
        return len(self.sequences)

    def __eq__(self, other):
        if not isinstance(other, FeatureDataset):
            return NotImplemented
        return (
            self.d == other.d
            and self.M == other.M
            and self.num_classes == other.num_classes
            and self.sequences == other.sequences
        )

    def frames_array(self) -> np.ndarray:
        """All videos stacked as (N, M, d) float32."""
        if not self.sequences:
            return np.zeros((0, self.M, self.d), dtype=np.float32)
        return np.stack([s.frames for s in self.sequences])

    def labels_array(self) -> np.ndarray | None:
        """Labels as int64, or None if any video is unlabeled."""
        if any(s.label is None for s in self.sequences):
            return None
        return np.array([s.label for s in self.sequences], dtype=np.int64)

    def ids_array(self) -> np.ndarray:
        return np.array([s.video_id for s in self.sequences], dtype=np.int64)


def generate_synthetic(
    num_classes: int,
    per_class: int,
    M: int,
    d: int,
    center_scale: float = 3.0,
    video_noise: float = 0.5,
    frame_noise: float = 1.5,
    seed: int = 0,
    split_name: str = "train",
) -> FeatureDataset:
    """Draw ``num_classes * per_class`` labeled videos with cluster structure.

    Class c's videos share a center (random unit direction times
    ``center_scale``); each video adds a per-video Gaussian offset (stddev
    ``video_noise``) common to all its frames, then per-frame noise built as a
    Gaussian random walk (step stddev ``frame_noise``) re-centered to mean
    zero across frames, so the noise is temporally smooth. Deterministic for
    a fixed seed.
    """
    if num_classes < 1 or per_class < 1:
        raise ArgumentError("num_classes and per_class must be positive")
    if M < 2:
        raise ArgumentError(f"M must be >= 2, got {M}")
    if d < 2:
        raise ArgumentError(f"d must be >= 2, got {d}")
    if center_scale <= 0:
        raise ArgumentError(f"center_scale must be positive, got {center_scale}")
    if video_noise < 0 or frame_noise < 0:
        raise ArgumentError("noise stddevs must be non-negative")

    rng = np.random.default_rng(seed)
    directions = rng.normal(size=(num_classes, d))
    directions /= np.linalg.norm(directions, axis=1, keepdims=True)
    centers = directions * center_scale

    sequences = []
    vid = 0
    for c in range(num_classes):
        for _ in range(per_class):
            offset = rng.normal(0.0, 1.0, size=d) * video_noise
            steps = rng.normal(0.0, 1.0, size=(M, d)) * frame_noise
            walk = np.cumsum(steps, axis=0)
            walk -= walk.mean(axis=0)
            frames = (centers[c] + offset + walk).astype(np.float32)
            sequences.append(FrameFeatureSequence(video_id=vid, frames=frames, label=c))
            vid += 1
    return FeatureDataset(
        sequences=sequences, d=d, M=M, num_classes=num_classes, split_name=split_name
    )


def uniform_sample_frames(T: int, M: int) -> list[int]:
    """Indices floor(j*T/M) for j = 0..M-1; duplicates appear when T < M."""
    if T < 1:
        raise ArgumentError(f"T must be positive, got {T}")
    if M < 1:
        raise ArgumentError(f"M must be positive, got {M}")
    return [(j * T) // M for j in range(M)]


def split_per_class(
    ds: FeatureDataset, counts: list[int], split_names: list[str] | None = None
) -> list[FeatureDataset]:
    """Split a labeled dataset into parts with ``counts[i]`` videos per class.

    Videos keep their ids; within each class the order of appearance decides
    which part a video lands in. Every class must have at least sum(counts)
    videos.
    """
    if not counts or any(c < 1 for c in counts):
        raise ArgumentError("counts must be positive")
    if split_names is not None and len(split_names) != len(counts):
        raise ArgumentError("split_names must match counts in length")
    by_class: dict[int, list[FrameFeatureSequence]] = {}
    for seq in ds.sequences:
        if seq.label is None:
            raise ArgumentError(f"video {seq.video_id} has no label; cannot split by class")
        by_class.setdefault(seq.label, []).append(seq)
    need = sum(counts)
    for label, seqs in by_class.items():
        if len(seqs) < need:
            raise ArgumentError(
                f"class {label} has {len(seqs)} videos, needs {need} for this split"
            )
    parts = []
    for i, count in enumerate(counts):
        start = sum(counts[:i])
        part_seqs = []
        for label in sorted(by_class):
            part_seqs.extend(by_class[label][start : start + count])
        part_seqs.sort(key=lambda s: s.video_id)
        parts.append(
            FeatureDataset(
                sequences=part_seqs,
                d=ds.d,
                M=ds.M,
                num_classes=ds.num_classes,
                split_name=split_names[i] if split_names else f"part{i}",
            )
        )
    return parts


_HEADER = struct.Struct("<4sIIIIB")


def save_dataset(ds: FeatureDataset, path: str | Path) -> None:
    """Write a dataset in the binary container format (float32, little-endian).

    Labels are stored only when every video has one; video ids are implicit
    (row order) and num_classes/split_name are not persisted.
    """
    labeled = [s.label is not None for s in ds.sequences]
    if any(labeled) and not all(labeled):
        raise ArgumentError("cannot save a dataset where only some videos have labels")
    has_labels = bool(ds.sequences) and all(labeled)

    path = Path(path)
    body = ds.frames_array().astype("<f4").tobytes()
    with open(path, "wb") as f:
        f.write(_HEADER.pack(MAGIC, FORMAT_VERSION, len(ds.sequences), ds.M, ds.d, int(has_labels)))
        f.write(body)
        if has_labels:
            labels = np.array([s.label for s in ds.sequences], dtype="<i4")
            f.write(labels.tobytes())


def load_dataset(path: str | Path, split_name: str = "") -> FeatureDataset:
    """Read a dataset saved by :func:`save_dataset`.

    Video ids are assigned 0..N-1 in file order; num_classes is inferred as
    max(label)+1 when labels are present.
    """
    path = Path(path)
    raw = path.read_bytes()
    if len(raw) < _HEADER.size:
        raise FormatError(f"{path}: file shorter than header ({len(raw)} bytes)")
    magic, version, n, m, d, has_labels = _HEADER.unpack_from(raw, 0)
    if magic != MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}, expected {MAGIC!r}")
    if version != FORMAT_VERSION:
        raise FormatError(f"{path}: unsupported version {version}, expected {FORMAT_VERSION}")
    if m < 1:
        raise FormatError(f"{path}: header field M must be positive, got {m}")
    if d < 1:
        raise FormatError(f"{path}: header field d must be positive, got {d}")
    if has_labels not in (0, 1):
        raise FormatError(f"{path}: header field has_labels must be 0 or 1, got {has_labels}")

    body_bytes = n * m * d * 4
    label_bytes = n * 4 if has_labels else 0
    expected = _HEADER.size + body_bytes + label_bytes
    if len(raw) != expected:
        raise FormatError(
            f"{path}: body size mismatch, expected {expected} bytes for "
            f"N={n} M={m} d={d} has_labels={has_labels}, got {len(raw)}"
        )

    frames = np.frombuffer(raw, dtype="<f4", count=n * m * d, offset=_HEADER.size)
    frames = frames.reshape(n, m, d).astype(np.float32)
    labels = None
    if has_labels:
        labels = np.frombuffer(raw, dtype="<i4", count=n, offset=_HEADER.size + body_bytes)
        if n and labels.min() < 0:
            raise FormatError(f"{path}: labels must be non-negative")

    sequences = [
        FrameFeatureSequence(
            video_id=i,
            frames=frames[i],
            label=int(labels[i]) if labels is not None else None,
        )
        for i in range(n)
    ]
    num_classes = int(labels.max()) + 1 if labels is not None and n else None
    return FeatureDataset(
        sequences=sequences, d=d, M=m, num_classes=num_classes, split_name=split_name
    )
