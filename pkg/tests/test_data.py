"""Generator, segment, sampling, sync-shift, and file-format tests."""

import numpy as np
import pytest

from viewseg.data import (FEATURE_MAGIC, LABEL_MAGIC, GeneratorConfig, Recording,
                          Segment, SplitSpec, action_occurrences, apply_sync_shift,
                          expand_segments, generate_synthetic, load_dataset,
                          read_features, read_labels, read_recording,
                          sample_action_pair, sample_view_pair, save_dataset,
                          segments_from_labels, write_features, write_labels,
                          write_recording)
from viewseg.errors import FormatError


def tiny_config(**kw):
    defaults = dict(num_sequences=4, num_classes=3, feature_dim=6, seen_views=3,
                    unseen_view_groups={"unseen_a": 1, "unseen_b": 1},
                    mean_segments=4, duration_range=(3, 6),
                    noise_sigma=0.3, view_distortion=0.5, seed=11)
    defaults.update(kw)
    return GeneratorConfig(**defaults)


def test_generator_is_deterministic():
    a, split_a, segs_a = generate_synthetic(tiny_config())
    b, split_b, segs_b = generate_synthetic(tiny_config())
    assert split_a.seen_views == split_b.seen_views
    assert len(a) == len(b)
    for ra, rb in zip(a, b):
        assert (ra.sequence_id, ra.view_id) == (rb.sequence_id, rb.view_id)
        assert np.array_equal(ra.features, rb.features)
        assert np.array_equal(ra.labels, rb.labels)
    assert segs_a == segs_b


def test_generator_degenerate_config_is_separable():
    cfg = tiny_config(noise_sigma=0.0, view_distortion=0.0, seed=5)
    recordings, split, _ = generate_synthetic(cfg)
    by_seq = {}
    for rec in recordings:
        by_seq.setdefault(rec.sequence_id, []).append(rec)
    prototypes = np.random.default_rng(cfg.seed).normal(
        size=(cfg.num_classes, cfg.feature_dim))
    for group in by_seq.values():
        for rec in group[1:]:
            assert np.array_equal(rec.features, group[0].features)
        for rec in group:
            # nearest prototype classifies every frame perfectly
            d = ((rec.features[:, None, :] - prototypes[None]) ** 2).sum(axis=2)
            assert np.array_equal(d.argmin(axis=1), rec.labels)


def test_generator_script_structure():
    recordings, split, segs = generate_synthetic(tiny_config())
    views_per_seq = len(split.seen_views) + sum(
        len(v) for v in split.unseen_view_groups.values())
    by_seq = {}
    for rec in recordings:
        by_seq.setdefault(rec.sequence_id, []).append(rec)
    for seq_id, group in by_seq.items():
        assert len(group) == views_per_seq
        script = segs[seq_id]
        assert sum(s.length for s in script) == group[0].num_frames
        for a, b in zip(script, script[1:]):
            assert a.label != b.label and a.end == b.start
        for rec in group[1:]:
            assert np.array_equal(rec.labels, group[0].labels)


def test_split_spec_rejects_overlap():
    with pytest.raises(ValueError):
        SplitSpec({0, 1}, {"unseen": {1, 2}})


def test_segments_from_labels_cases():
    segs = segments_from_labels([0, 0, 1, 1, 1, 0])
    assert segs == [Segment(0, 2, 0), Segment(2, 5, 1), Segment(5, 6, 0)]
    assert segments_from_labels([4]) == [Segment(0, 1, 4)]
    assert segments_from_labels([]) == []


def test_segments_roundtrip():
    rng = np.random.default_rng(1)
    for _ in range(30):
        labels = rng.integers(4, size=rng.integers(1, 50))
        assert np.array_equal(expand_segments(segments_from_labels(labels)), labels)


def test_sample_view_pair_uniform_over_ordered_pairs():
    cfg = tiny_config(seen_views=2, num_sequences=1)
    recordings, split, _ = generate_synthetic(cfg)
    rng = np.random.default_rng(2)
    counts = {}
    n = 10_000
    for _ in range(n):
        q, r = sample_view_pair(recordings, 0, split, rng)
        assert q.view_id != r.view_id
        assert q.sequence_id == r.sequence_id == 0
        counts[(q.view_id, r.view_id)] = counts.get((q.view_id, r.view_id), 0) + 1
    assert set(counts) == {(0, 1), (1, 0)}
    # chi-squared, 1 dof: stay below the p=0.01 critical value 6.635
    expected = n / 2
    chi2 = sum((c - expected) ** 2 / expected for c in counts.values())
    assert chi2 < 6.635


def test_sample_view_pair_requires_two_seen_views():
    cfg = tiny_config()
    recordings, split, _ = generate_synthetic(cfg)
    lonely = SplitSpec({0}, {"unseen_a": {3}})
    with pytest.raises(ValueError):
        sample_view_pair(recordings, 0, lonely, np.random.default_rng(0))


def test_sample_action_pair_contracts():
    recordings, split, _ = generate_synthetic(tiny_config())
    rng = np.random.default_rng(3)
    for _ in range(200):
        a, b = sample_action_pair(recordings, split, rng, allow_same_view=False)
        assert a.label == b.label
        assert a.view_id != b.view_id
    for _ in range(50):
        a, b = sample_action_pair(recordings, split, rng, allow_same_view=True)
        assert a.label == b.label


def test_sample_action_pair_unique_partner():
    # one class in exactly two views: partner must be the other occurrence
    feats = np.zeros((4, 2))
    recs = [Recording(0, 0, feats, [1, 1, 1, 1]),
            Recording(0, 1, feats, [1, 1, 1, 1])]
    split = SplitSpec({0, 1}, {})
    rng = np.random.default_rng(4)
    for _ in range(20):
        a, b = sample_action_pair(recs, split, rng)
        assert {a.view_id, b.view_id} == {0, 1}
    occ = action_occurrences(recs, split)
    assert len(occ) == 2


def test_sample_action_pair_no_valid_pair():
    feats = np.zeros((3, 2))
    recs = [Recording(0, 0, feats, [1, 1, 1]),
            Recording(0, 1, feats, [2, 2, 2])]
    split = SplitSpec({0, 1}, {})
    with pytest.raises(ValueError):
        sample_action_pair(recs, split, np.random.default_rng(0))


class _FixedOffsetRng:
    def __init__(self, value):
        self.value = value

    def integers(self, low, high):
        assert low <= self.value < high
        return self.value


def test_apply_sync_shift():
    feats = np.array([[0.0], [1.0], [2.0]])
    rec = Recording(0, 0, feats, [0, 1, 1])
    assert apply_sync_shift(rec, 0, np.random.default_rng(0)) is rec
    shifted = apply_sync_shift(rec, 1, _FixedOffsetRng(1))
    assert np.array_equal(shifted.features.ravel(), [0.0, 0.0, 1.0])
    assert np.array_equal(shifted.labels, rec.labels)
    shifted2 = apply_sync_shift(rec, 2, _FixedOffsetRng(2))
    assert np.array_equal(shifted2.features.ravel(), [0.0, 0.0, 0.0])
    assert np.array_equal(shifted2.labels, rec.labels)
    with pytest.raises(ValueError):
        apply_sync_shift(rec, 3, np.random.default_rng(0))


def test_feature_file_roundtrip(tmp_path):
    rng = np.random.default_rng(5)
    feats = rng.normal(size=(7, 4))
    path = tmp_path / "x.tasf"
    write_features(path, feats)
    assert np.array_equal(read_features(path), feats)
    raw = path.read_bytes()
    assert raw[:4] == FEATURE_MAGIC

    trunc = tmp_path / "trunc.tasf"
    trunc.write_bytes(raw[:20])
    with pytest.raises(FormatError):
        read_features(trunc)

    bad = tmp_path / "bad.tasf"
    bad.write_bytes(b"XXXX" + raw[4:])
    with pytest.raises(FormatError):
        read_features(bad)


def test_label_file_roundtrip_and_errors(tmp_path):
    labels = np.array([0, 3, 3, 1])
    path = tmp_path / "x.tasl"
    write_labels(path, labels)
    assert np.array_equal(read_labels(path), labels)
    assert path.read_bytes()[:4] == LABEL_MAGIC

    # header claims 5 frames but carries no payload
    import struct
    empty = tmp_path / "empty.tasl"
    empty.write_bytes(LABEL_MAGIC + struct.pack("<II", 1, 5))
    with pytest.raises(FormatError) as exc_info:
        read_labels(empty)
    assert exc_info.value.offset == 12

    trailing = tmp_path / "trail.tasl"
    trailing.write_bytes(path.read_bytes() + b"\x00")
    with pytest.raises(FormatError):
        read_labels(trailing)

    with pytest.raises(ValueError):
        write_labels(tmp_path / "big.tasl", [70_000])


def test_recording_roundtrip_and_mismatch(tmp_path):
    rng = np.random.default_rng(6)
    rec = Recording(12, 3, rng.normal(size=(5, 3)), [0, 0, 1, 1, 2])
    stem = tmp_path / "seq0012_view03"
    write_recording(stem, rec)
    loaded = read_recording(stem)
    assert loaded.sequence_id == 12 and loaded.view_id == 3
    assert np.array_equal(loaded.features, rec.features)
    assert np.array_equal(loaded.labels, rec.labels)

    write_labels(tmp_path / "seq0012_view03.tasl", [0, 1])
    with pytest.raises(FormatError):
        read_recording(stem)

    with pytest.raises(ValueError):
        read_recording(tmp_path / "unnamed")


def test_dataset_directory_roundtrip(tmp_path):
    recordings, split, _ = generate_synthetic(tiny_config())
    save_dataset(tmp_path / "ds", recordings, split, ["a", "b", "c"])
    loaded, loaded_split = load_dataset(tmp_path / "ds")
    assert loaded_split.seen_views == split.seen_views
    assert loaded_split.unseen_view_groups == split.unseen_view_groups
    assert len(loaded) == len(recordings)
    key = lambda r: (r.sequence_id, r.view_id)
    for ra, rb in zip(sorted(recordings, key=key), sorted(loaded, key=key)):
        assert np.array_equal(ra.features, rb.features)
        assert np.array_equal(ra.labels, rb.labels)


def test_generator_view_id_partition():
    recordings, split, _ = generate_synthetic(tiny_config())
    all_unseen = set().union(*split.unseen_view_groups.values())
    assert split.seen_views.isdisjoint(all_unseen)
    used = {r.view_id for r in recordings}
    assert used == split.seen_views | all_unseen
