"""Hamming-space retrieval evaluation over binary video codes.

Codes live as {-1,+1} vectors but are stored bit-packed into 64-bit words
(+1 -> 1), so distances are XOR plus popcount. Ranking breaks distance ties
by ascending video id, which makes every metric deterministic. Relevance is
a nonempty label intersection; labels are kept as bitsets so multi-label
corpora cost nothing extra.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from maskhash.data import FeatureDataset, FrameFeatureSequence
from maskhash.errors import ArgumentError, ConfigError, EvaluationError, FormatError
from maskhash.model import load_checkpoint

CODE_MAGIC = b"CMHC"
CODE_VERSION = 1

RECALL_GRID = np.arange(1, 21) / 20.0  # 0.05, 0.10, ..., 1.00

_CODE_HEADER = struct.Struct("<4sIIII")


def pack_codes(codes: np.ndarray) -> np.ndarray:
    """Pack (n, k) codes over {-1,+1} into (n, ceil(k/64)) uint64 words."""
    codes = np.asarray(codes)
    if codes.ndim != 2:
        raise ArgumentError(f"codes must be 2-D, got shape {codes.shape}")
    if not np.isin(codes, (-1, 1)).all():
        raise ArgumentError("codes must contain only -1 and +1")
    n, k = codes.shape
    words = (k + 63) // 64
    bits = np.zeros((n, words * 64), dtype=np.uint8)
    bits[:, :k] = codes > 0
    packed = np.packbits(bits, axis=1, bitorder="little")
    return np.ascontiguousarray(packed).view("<u8").reshape(n, words)


def unpack_codes(packed: np.ndarray, k: int) -> np.ndarray:
    """Inverse of pack_codes: (n, words) uint64 back to (n, k) int8 codes."""
    n = packed.shape[0]
    bits = np.unpackbits(packed.view(np.uint8).reshape(n, -1), axis=1, bitorder="little")
    return np.where(bits[:, :k] > 0, 1, -1).astype(np.int8)


def labels_to_bitsets(labels: np.ndarray) -> np.ndarray:
    """Single class ids (n,) to label bitsets (n, words) uint64."""
    labels = np.asarray(labels, dtype=np.int64)
    if labels.ndim != 1:
        raise ArgumentError(f"labels must be 1-D, got shape {labels.shape}")
    if len(labels) and labels.min() < 0:
        raise ArgumentError("labels must be non-negative")
    words = (int(labels.max()) // 64 + 1) if len(labels) else 1
    bitsets = np.zeros((len(labels), words), dtype=np.uint64)
    rows = np.arange(len(labels))
    bitsets[rows, labels // 64] = np.uint64(1) << (labels % 64).astype(np.uint64)
    return bitsets


@dataclass
class CodeDatabase:
    """Aligned binary codes, video ids, and label bitsets for one corpus."""

    packed: np.ndarray
    k: int
    ids: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        self.packed = np.asarray(self.packed, dtype=np.uint64)
        self.ids = np.asarray(self.ids, dtype=np.int64)
        self.labels = np.asarray(self.labels, dtype=np.uint64)
        if self.k < 1:
            raise ArgumentError(f"k must be positive, got {self.k}")
        n = self.packed.shape[0]
        if self.packed.ndim != 2 or self.packed.shape[1] != (self.k + 63) // 64:
            raise ArgumentError(
                f"packed codes shape {self.packed.shape} does not fit k={self.k}"
            )
        if self.ids.shape != (n,) or self.labels.ndim != 2 or self.labels.shape[0] != n:
            raise ArgumentError("codes, ids and labels must be aligned")
        if len(np.unique(self.ids)) != n:
            raise ArgumentError("video ids must be unique")
        # Zero any padding bits so distances never see them.
        pad = self.k % 64
        if pad:
            self.packed[:, -1] &= np.uint64((1 << pad) - 1)

    def __len__(self) -> int:
        return self.packed.shape[0]

    @classmethod
    def from_codes(cls, codes: np.ndarray, ids: np.ndarray, labels: np.ndarray) -> CodeDatabase:
        """Build from {-1,+1} codes; labels may be class ids or bitsets."""
        codes = np.asarray(codes)
        labels = np.asarray(labels)
        bitsets = labels if labels.ndim == 2 else labels_to_bitsets(labels)
        return cls(packed=pack_codes(codes), k=codes.shape[1], ids=ids, labels=bitsets)

    def codes_array(self) -> np.ndarray:
        return unpack_codes(self.packed, self.k)


@dataclass
class RetrievalReport:
    map_at_k: dict[int, float]
    pr_points: list[tuple[float, float]] = field(default_factory=list)
    per_query_ap: list[float] = field(default_factory=list)
    metadata: dict = field(default_factory=dict)

    def write_json(self, path) -> None:
        payload = {
            "version": CODE_VERSION,
            "map_at_k": {str(k): v for k, v in sorted(self.map_at_k.items())},
            "metadata": self.metadata,
        }
        with open(path, "w") as f:
            json.dump(payload, f, indent=2)
            f.write("\n")

    def write_pr_csv(self, path) -> None:
        with open(path, "w") as f:
            f.write("recall,precision\n")
            for recall, precision in self.pr_points:
                f.write(f"{recall:.6f},{precision:.6f}\n")

    def write_map_csv(self, path) -> None:
        with open(path, "w") as f:
            f.write("K,map\n")
            for k in sorted(self.map_at_k):
                f.write(f"{k},{self.map_at_k[k]:.6f}\n")


def hamming_distance(a: np.ndarray, b: np.ndarray) -> int:
    """Number of positions where two {-1,+1} codes disagree."""
    a = np.asarray(a)
    b = np.asarray(b)
    if a.shape != b.shape or a.ndim != 1:
        raise ArgumentError(f"codes must be 1-D and equal length, got {a.shape} vs {b.shape}")
    pa = pack_codes(a[None, :])
    pb = pack_codes(b[None, :])
    return int(np.bitwise_count(pa ^ pb).sum())


def _distances(query_packed: np.ndarray, db: CodeDatabase) -> np.ndarray:
    return np.bitwise_count(db.packed ^ query_packed).sum(axis=1)


def rank(query: np.ndarray, db: CodeDatabase) -> np.ndarray:
    """Db ids by ascending Hamming distance, ties by ascending id."""
    query = np.asarray(query)
    if query.ndim != 1 or query.shape[0] != db.k:
        raise ArgumentError(f"query length {query.shape} does not match db k={db.k}")
    if len(db) == 0:
        raise ArgumentError("database is empty")
    dists = _distances(pack_codes(query[None, :])[0], db)
    order = np.lexsort((db.ids, dists))
    return db.ids[order]


def average_precision_at_k(flags, K: int, total_relevant: int) -> float:
    """AP@K = sum over relevant hits of precision-at-hit, over min(total_relevant, K)."""
    if K < 1:
        raise ArgumentError(f"K must be >= 1, got {K}")
    if total_relevant < 0:
        raise ArgumentError(f"total_relevant must be >= 0, got {total_relevant}")
    if total_relevant == 0:
        return 0.0
    flags = np.asarray(flags, dtype=np.float64)[:K]
    if flags.sum() == 0:
        return 0.0
    precisions = np.cumsum(flags) / np.arange(1, len(flags) + 1)
    return float((flags * precisions).sum() / min(total_relevant, K))


def _ranked_relevance(queries: CodeDatabase, db: CodeDatabase):
    """Per query: relevance flags of the ranked db (self excluded) and their count.

    Yields (query_index, flags, total_relevant); queries whose labels match
    nothing in the remaining db are yielded with total_relevant 0 so callers
    can count skips.
    """
    if queries.k != db.k:
        raise ArgumentError(f"query codes have k={queries.k} but db has k={db.k}")
    if len(db) == 0:
        raise ArgumentError("database is empty")
    lw = max(queries.labels.shape[1], db.labels.shape[1])
    qlab = np.zeros((len(queries), lw), dtype=np.uint64)
    qlab[:, : queries.labels.shape[1]] = queries.labels
    dlab = np.zeros((len(db), lw), dtype=np.uint64)
    dlab[:, : db.labels.shape[1]] = db.labels

    for qi in range(len(queries)):
        keep = db.ids != queries.ids[qi]
        dists = _distances(queries.packed[qi], db)[keep]
        ids = db.ids[keep]
        order = np.lexsort((ids, dists))
        flags = ((dlab[keep][order] & qlab[qi]) != 0).any(axis=1)
        yield qi, flags, int(flags.sum())


def map_at_k(queries: CodeDatabase, db: CodeDatabase, Ks: list[int]) -> RetrievalReport:
    """Mean AP@K over queries with at least one relevant db item."""
    if not Ks or any(k < 1 for k in Ks):
        raise ArgumentError("Ks must be a non-empty list of positive ints")
    k_max = max(Ks)
    sums = {K: 0.0 for K in Ks}
    per_query = []
    skipped = 0
    for _, flags, total in _ranked_relevance(queries, db):
        if total == 0:
            skipped += 1
            continue
        for K in Ks:
            sums[K] += average_precision_at_k(flags, K, total)
        per_query.append(average_precision_at_k(flags, k_max, total))
    used = len(per_query)
    if used == 0:
        raise EvaluationError("no query has a relevant item in the database")
    return RetrievalReport(
        map_at_k={K: sums[K] / used for K in Ks},
        per_query_ap=per_query,
        metadata={
            "queries_used": used,
            "queries_skipped_no_relevant": skipped,
            "db_size": len(db),
            "code_bits": db.k,
            "per_query_ap_K": k_max,
        },
    )


def pr_curve(queries: CodeDatabase, db: CodeDatabase) -> list[tuple[float, float]]:
    """Precision averaged over queries at a fixed recall grid.

    Each query contributes a staircase of (j/R, j/rank_j) points at its j-th
    relevant hit; precision is linearly interpolated onto the grid before
    averaging.
    """
    grid_sums = np.zeros_like(RECALL_GRID)
    used = 0
    for _, flags, total in _ranked_relevance(queries, db):
        if total == 0:
            continue
        hit_ranks = np.nonzero(flags)[0] + 1
        j = np.arange(1, total + 1)
        grid_sums += np.interp(RECALL_GRID, j / total, j / hit_ranks)
        used += 1
    if used == 0:
        raise EvaluationError("no query has a relevant item in the database")
    return [(float(r), float(p)) for r, p in zip(RECALL_GRID, grid_sums / used)]


def save_codes(db: CodeDatabase, path: str | Path) -> None:
    """Write a code database: CMHC header, packed codes, ids, label bitsets."""
    with open(path, "wb") as f:
        f.write(
            _CODE_HEADER.pack(CODE_MAGIC, CODE_VERSION, len(db), db.k, db.labels.shape[1])
        )
        f.write(np.ascontiguousarray(db.packed, dtype="<u8").tobytes())
        f.write(np.ascontiguousarray(db.ids, dtype="<i8").tobytes())
        f.write(np.ascontiguousarray(db.labels, dtype="<u8").tobytes())


def load_codes(path: str | Path) -> CodeDatabase:
    with open(path, "rb") as f:
        raw = f.read()
    if len(raw) < _CODE_HEADER.size:
        raise FormatError(f"{path}: truncated header ({len(raw)} bytes)")
    magic, version, n, k, label_words = _CODE_HEADER.unpack_from(raw)
    if magic != CODE_MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}, expected {CODE_MAGIC!r}")
    if version != CODE_VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    if k < 1 or label_words < 1:
        raise FormatError(f"{path}: invalid header fields k={k}, label_words={label_words}")
    words = (k + 63) // 64
    body = raw[_CODE_HEADER.size :]
    expect = n * words * 8 + n * 8 + n * label_words * 8
    if len(body) != expect:
        raise FormatError(f"{path}: body is {len(body)} bytes, expected {expect}")
    off = 0
    packed = np.frombuffer(body, dtype="<u8", count=n * words, offset=off).reshape(n, words)
    off += n * words * 8
    ids = np.frombuffer(body, dtype="<i8", count=n, offset=off)
    off += n * 8
    labels = np.frombuffer(body, dtype="<u8", count=n * label_words, offset=off)
    return CodeDatabase(
        packed=packed.copy(), k=k, ids=ids.copy(), labels=labels.reshape(n, label_words).copy()
    )


def encode_dataset(model, ds: FeatureDataset, batch_size: int = 256) -> CodeDatabase:
    """Run inference_code over a dataset and collect a CodeDatabase."""
    labels = ds.labels_array()
    if labels is None:
        raise EvaluationError("dataset has unlabeled videos; retrieval needs labels")
    frames = ds.frames_array()
    chunks = [
        model.inference_code(frames[lo : lo + batch_size])
        for lo in range(0, len(ds), batch_size)
    ]
    return CodeDatabase.from_codes(np.concatenate(chunks), ds.ids_array(), labels)


def cross_dataset_eval(
    checkpoint_path: str | Path,
    train_tag: str,
    test_set: FeatureDataset,
    Ks: list[int],
    queries_per_class: int = 5,
    with_pr: bool = True,
) -> RetrievalReport:
    """Encode a test split with a trained checkpoint and evaluate retrieval.

    The first ``queries_per_class`` videos of each class become queries; the
    rest form the database.
    """
    model = load_checkpoint(checkpoint_path)
    if test_set.d != model.cfg.feature_dim:
        raise ConfigError(
            f"checkpoint feature_dim {model.cfg.feature_dim} does not match "
            f"dataset d {test_set.d}"
        )
    if test_set.M > model.cfg.max_frames:
        raise ConfigError(
            f"dataset M {test_set.M} exceeds checkpoint max_frames {model.cfg.max_frames}"
        )
    if queries_per_class < 1:
        raise ArgumentError(f"queries_per_class must be >= 1, got {queries_per_class}")

    taken: dict[int, int] = {}
    q_seqs: list[FrameFeatureSequence] = []
    db_seqs: list[FrameFeatureSequence] = []
    for seq in test_set.sequences:
        if seq.label is None:
            raise EvaluationError(f"video {seq.video_id} has no label; retrieval needs labels")
        if taken.get(seq.label, 0) < queries_per_class:
            q_seqs.append(seq)
            taken[seq.label] = taken.get(seq.label, 0) + 1
        else:
            db_seqs.append(seq)
    if not db_seqs:
        raise EvaluationError("all videos became queries; nothing left for the database")

    def subset(seqs, name):
        return FeatureDataset(
            sequences=seqs, d=test_set.d, M=test_set.M,
            num_classes=test_set.num_classes, split_name=name,
        )

    queries = encode_dataset(model, subset(q_seqs, "query"))
    database = encode_dataset(model, subset(db_seqs, "database"))
    report = map_at_k(queries, database, Ks)
    if with_pr:
        report.pr_points = pr_curve(queries, database)
    report.metadata["train_tag"] = train_tag
    report.metadata["test_tag"] = test_set.split_name
    report.metadata["queries_per_class"] = queries_per_class
    return report
