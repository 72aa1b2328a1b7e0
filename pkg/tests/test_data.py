import numpy as np
import pytest

from maskhash.data import (
    FeatureDataset,
    FrameFeatureSequence,
    generate_synthetic,
    load_dataset,
    save_dataset,
    split_per_class,
    uniform_sample_frames,
)
from maskhash.errors import ArgumentError, FormatError


class TestGenerateSynthetic:
    def test_counts_and_shapes(self):
        ds = generate_synthetic(num_classes=3, per_class=5, M=8, d=16, seed=0)
        assert len(ds) == 15
        assert ds.M == 8 and ds.d == 16 and ds.num_classes == 3
        for seq in ds.sequences:
            assert seq.frames.shape == (8, 16)
            assert seq.frames.dtype == np.float32

    def test_zero_frame_noise_gives_identical_frames(self):
        ds = generate_synthetic(num_classes=1, per_class=1, M=4, d=8,
                                frame_noise=0.0, seed=3)
        frames = ds.sequences[0].frames
        assert np.array_equal(frames, np.tile(frames[0], (4, 1)))

    def test_zero_noise_collapses_class_to_one_point(self):
        ds = generate_synthetic(num_classes=2, per_class=3, M=4, d=8,
                                video_noise=0.0, frame_noise=0.0, seed=5)
        by_class = {}
        for seq in ds.sequences:
            by_class.setdefault(seq.label, []).append(seq.frames)
        for frames_list in by_class.values():
            for frames in frames_list[1:]:
                assert np.array_equal(frames, frames_list[0])

    def test_intra_class_similarity_beats_inter_class(self):
        ds = generate_synthetic(num_classes=10, per_class=100, M=16, d=32,
                                center_scale=5.0, video_noise=0.5,
                                frame_noise=0.25, seed=7)
        means = np.stack([seq.frames.mean(axis=0) for seq in ds.sequences])
        means = means / np.linalg.norm(means, axis=1, keepdims=True)
        labels = np.array([seq.label for seq in ds.sequences])
        sims = means @ means.T
        same = labels[:, None] == labels[None, :]
        off_diag = ~np.eye(len(ds), dtype=bool)
        intra = sims[same & off_diag].mean()
        inter = sims[~same].mean()
        assert intra > inter

    def test_deterministic(self):
        a = generate_synthetic(num_classes=2, per_class=4, M=6, d=8, seed=42)
        b = generate_synthetic(num_classes=2, per_class=4, M=6, d=8, seed=42)
        assert a == b
        c = generate_synthetic(num_classes=2, per_class=4, M=6, d=8, seed=43)
        assert a != c

    def test_invalid_sizes(self):
        with pytest.raises(ArgumentError):
            generate_synthetic(num_classes=0, per_class=1, M=4, d=8)
        with pytest.raises(ArgumentError):
            generate_synthetic(num_classes=1, per_class=1, M=1, d=8)
        with pytest.raises(ArgumentError):
            generate_synthetic(num_classes=1, per_class=1, M=4, d=1)
        with pytest.raises(ArgumentError):
            generate_synthetic(num_classes=1, per_class=1, M=4, d=8, center_scale=0.0)
        with pytest.raises(ArgumentError):
            generate_synthetic(num_classes=1, per_class=1, M=4, d=8, frame_noise=-1.0)


class TestSequenceValidation:
    def test_rejects_non_finite(self):
        bad = np.ones((3, 4), dtype=np.float32)
        bad[1, 2] = np.nan
        with pytest.raises(ArgumentError):
            FrameFeatureSequence(video_id=0, frames=bad)

    def test_rejects_wrong_rank(self):
        with pytest.raises(ArgumentError):
            FrameFeatureSequence(video_id=0, frames=np.ones(5, dtype=np.float32))

    def test_dataset_rejects_duplicate_ids(self):
        seqs = [
            FrameFeatureSequence(video_id=1, frames=np.ones((2, 3)), label=0),
            FrameFeatureSequence(video_id=1, frames=np.ones((2, 3)), label=0),
        ]
        with pytest.raises(ArgumentError):
            FeatureDataset(sequences=seqs, d=3, M=2, num_classes=1)

    def test_dataset_rejects_shape_mismatch(self):
        seqs = [
            FrameFeatureSequence(video_id=0, frames=np.ones((2, 3))),
            FrameFeatureSequence(video_id=1, frames=np.ones((2, 4))),
        ]
        with pytest.raises(ArgumentError):
            FeatureDataset(sequences=seqs, d=3, M=2, num_classes=None)

    def test_dataset_rejects_label_out_of_range(self):
        seqs = [FrameFeatureSequence(video_id=0, frames=np.ones((2, 3)), label=5)]
        with pytest.raises(ArgumentError):
            FeatureDataset(sequences=seqs, d=3, M=2, num_classes=3)


class TestUniformSampleFrames:
    def test_identity_case(self):
        assert uniform_sample_frames(25, 25) == list(range(25))

    def test_strided_case(self):
        assert uniform_sample_frames(100, 25) == list(range(0, 100, 4))

    def test_repeats_when_short(self):
        assert uniform_sample_frames(3, 6) == [0, 0, 1, 1, 2, 2]

    def test_properties_random(self):
        rng = np.random.default_rng(0)
        for _ in range(200):
            T = int(rng.integers(1, 50))
            M = int(rng.integers(1, 50))
            idx = uniform_sample_frames(T, M)
            assert len(idx) == M
            assert all(0 <= i < T for i in idx)
            assert idx == sorted(idx)

    def test_preconditions(self):
        with pytest.raises(ArgumentError):
            uniform_sample_frames(0, 4)
        with pytest.raises(ArgumentError):
            uniform_sample_frames(4, 0)


class TestContainerRoundTrip:
    def test_round_trip_generated(self, tmp_path):
        ds = generate_synthetic(num_classes=3, per_class=4, M=5, d=6, seed=1)
        path = tmp_path / "ds.cmh"
        save_dataset(ds, path)
        assert load_dataset(path) == ds

    def test_round_trip_unlabeled(self, tmp_path):
        seqs = [
            FrameFeatureSequence(video_id=i, frames=np.random.default_rng(i).normal(size=(3, 4)))
            for i in range(5)
        ]
        ds = FeatureDataset(sequences=seqs, d=4, M=3, num_classes=None)
        path = tmp_path / "ds.cmh"
        save_dataset(ds, path)
        back = load_dataset(path)
        assert back == ds
        assert all(s.label is None for s in back.sequences)

    def test_exact_float32_preservation(self, tmp_path):
        ds = generate_synthetic(num_classes=2, per_class=2, M=3, d=4, seed=9)
        path = tmp_path / "ds.cmh"
        save_dataset(ds, path)
        back = load_dataset(path)
        for a, b in zip(ds.sequences, back.sequences):
            assert a.frames.tobytes() == b.frames.tobytes()

    def test_truncated_file(self, tmp_path):
        ds = generate_synthetic(num_classes=2, per_class=2, M=3, d=4, seed=2)
        path = tmp_path / "ds.cmh"
        save_dataset(ds, path)
        raw = path.read_bytes()
        path.write_bytes(raw[: len(raw) // 2])
        with pytest.raises(FormatError):
            load_dataset(path)

    def test_bad_magic(self, tmp_path):
        ds = generate_synthetic(num_classes=1, per_class=2, M=3, d=4, seed=2)
        path = tmp_path / "ds.cmh"
        save_dataset(ds, path)
        raw = bytearray(path.read_bytes())
        raw[:4] = b"NOPE"
        path.write_bytes(bytes(raw))
        with pytest.raises(FormatError, match="magic"):
            load_dataset(path)

    def test_bad_version(self, tmp_path):
        ds = generate_synthetic(num_classes=1, per_class=2, M=3, d=4, seed=2)
        path = tmp_path / "ds.cmh"
        save_dataset(ds, path)
        raw = bytearray(path.read_bytes())
        raw[4:8] = (99).to_bytes(4, "little")
        path.write_bytes(bytes(raw))
        with pytest.raises(FormatError, match="version"):
            load_dataset(path)

    def test_zero_m_header(self, tmp_path):
        ds = generate_synthetic(num_classes=1, per_class=2, M=3, d=4, seed=2)
        path = tmp_path / "ds.cmh"
        save_dataset(ds, path)
        raw = bytearray(path.read_bytes())
        raw[12:16] = (0).to_bytes(4, "little")
        path.write_bytes(bytes(raw))
        with pytest.raises(FormatError, match="M"):
            load_dataset(path)

    def test_mixed_labels_rejected_on_save(self, tmp_path):
        seqs = [
            FrameFeatureSequence(video_id=0, frames=np.ones((2, 3)), label=0),
            FrameFeatureSequence(video_id=1, frames=np.ones((2, 3)), label=None),
        ]
        ds = FeatureDataset(sequences=seqs, d=3, M=2, num_classes=1)
        with pytest.raises(ArgumentError):
            save_dataset(ds, tmp_path / "ds.cmh")


class TestSplitPerClass:
    def test_sizes_and_disjoint_ids(self):
        ds = generate_synthetic(num_classes=4, per_class=10, M=4, d=8, seed=0)
        a, b, c = split_per_class(ds, [5, 3, 2], ["train", "db", "query"])
        assert (len(a), len(b), len(c)) == (20, 12, 8)
        ids = [set(s.video_id for s in part.sequences) for part in (a, b, c)]
        assert not (ids[0] & ids[1]) and not (ids[0] & ids[2]) and not (ids[1] & ids[2])
        assert a.split_name == "train" and c.split_name == "query"

    def test_per_class_counts(self):
        ds = generate_synthetic(num_classes=3, per_class=6, M=4, d=8, seed=0)
        a, b = split_per_class(ds, [4, 2])
        for part, count in ((a, 4), (b, 2)):
            labels = [s.label for s in part.sequences]
            for c in range(3):
                assert labels.count(c) == count

    def test_insufficient_class_size(self):
        ds = generate_synthetic(num_classes=2, per_class=3, M=4, d=8, seed=0)
        with pytest.raises(ArgumentError):
            split_per_class(ds, [2, 2])

    def test_rejects_unlabeled(self):
        seqs = [FrameFeatureSequence(video_id=0, frames=np.ones((2, 3)))]
        ds = FeatureDataset(sequences=seqs, d=3, M=2, num_classes=None)
        with pytest.raises(ArgumentError):
            split_per_class(ds, [1])
