"""Synthetic multi-view dataset generation, recording file I/O, split handling,
segment extraction, and the pair-sampling procedures that feed the losses.

The generator emits, per sequence, one shared segment script and one shared
per-frame latent stream; each view observes that stream through its own
affine transform A_v = (1 - rho) * I + rho * Q_v plus bias rho * b_v, with
Q_v a random orthogonal matrix. Unseen views use fresh transform draws, so
they are genuinely out of distribution while all views of one sequence stay
frame-synchronized. All randomness flows through numpy's seeded PCG64
generator, so a fixed seed reproduces the dataset bit-for-bit.
"""

from __future__ import annotations

import json
import re
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import FormatError

FEATURE_MAGIC = b"TASF"
LABEL_MAGIC = b"TASL"
FILE_VERSION = 1

_STEM_RE = re.compile(r"seq(\d+)_view(\d+)$")


@dataclass(frozen=True)
class Segment:
    start: int   # inclusive frame index
    end: int     # exclusive frame index
    label: int

    def __post_init__(self):
        if not 0 <= self.start < self.end:
            raise ValueError(f"segment bounds out of order: [{self.start}, {self.end})")

    @property
    def length(self) -> int:
        return self.end - self.start


@dataclass
class Recording:
    sequence_id: int
    view_id: int
    features: np.ndarray  # [T, H] float64
    labels: np.ndarray    # [T] int64

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.features.ndim != 2 or self.labels.ndim != 1:
            raise ValueError("recording needs [T, H] features and [T] labels")
        if self.features.shape[0] != self.labels.shape[0]:
            raise ValueError(
                f"features have {self.features.shape[0]} frames but labels have "
                f"{self.labels.shape[0]}"
            )

    @property
    def num_frames(self) -> int:
        return self.features.shape[0]


@dataclass
class SplitSpec:
    seen_views: set[int]
    unseen_view_groups: dict[str, set[int]]

    def __post_init__(self):
        self.seen_views = set(self.seen_views)
        self.unseen_view_groups = {name: set(v) for name, v in self.unseen_view_groups.items()}
        for name, views in self.unseen_view_groups.items():
            overlap = self.seen_views & views
            if overlap:
                raise ValueError(f"unseen group {name!r} overlaps seen views: {sorted(overlap)}")

    def group_of(self, view_id: int) -> str | None:
        if view_id in self.seen_views:
            return "seen"
        for name, views in self.unseen_view_groups.items():
            if view_id in views:
                return name
        return None

    def group_names(self) -> list[str]:
        return ["seen", *self.unseen_view_groups.keys()]


@dataclass
class GeneratorConfig:
    num_sequences: int = 60
    num_classes: int = 6
    feature_dim: int = 12
    seen_views: int = 4
    unseen_view_groups: dict[str, int] = field(
        default_factory=lambda: {"unseen_exo": 1, "unseen_ego": 1})
    mean_segments: float = 8.0
    duration_range: tuple[int, int] = (10, 30)
    noise_sigma: float = 0.5
    view_distortion: float = 0.55
    seed: int = 0

    def __post_init__(self):
        self.duration_range = tuple(self.duration_range)
        if self.num_classes < 2:
            raise ValueError("need at least 2 classes")
        if self.seen_views < 2:
            raise ValueError("need at least 2 seen views")
        d_min, d_max = self.duration_range
        if d_min < 1 or d_max < d_min:
            raise ValueError(f"bad duration range {self.duration_range}")
        if not 0.0 <= self.view_distortion <= 1.0:
            raise ValueError("view_distortion must lie in [0, 1]")
        if self.noise_sigma < 0 or self.num_sequences < 1 or self.feature_dim < 1:
            raise ValueError(f"invalid generator config: {self}")
        if any(n < 1 for n in self.unseen_view_groups.values()):
            raise ValueError("unseen view groups must be nonempty")


def _random_orthogonal(rng: np.random.Generator, n: int) -> np.ndarray:
    q, r = np.linalg.qr(rng.normal(size=(n, n)))
    return q * np.sign(np.diag(r))  # unique sign convention


def generate_synthetic(cfg: GeneratorConfig):
    """Build the dataset: (recordings, split, per-sequence true segments)."""
    rng = np.random.default_rng(cfg.seed)
    C, H, rho = cfg.num_classes, cfg.feature_dim, cfg.view_distortion
    prototypes = rng.normal(size=(C, H))

    seen_ids = list(range(cfg.seen_views))
    group_views: dict[str, set[int]] = {}
    next_id = cfg.seen_views
    for name, count in cfg.unseen_view_groups.items():
        group_views[name] = set(range(next_id, next_id + count))
        next_id += count
    all_view_ids = list(range(next_id))

    transforms = {}
    for v in all_view_ids:
        A = (1.0 - rho) * np.eye(H) + rho * _random_orthogonal(rng, H)
        b = rho * rng.normal(size=H)
        transforms[v] = (A, b)

    recordings: list[Recording] = []
    true_segments: dict[int, list[Segment]] = {}
    d_min, d_max = cfg.duration_range
    for seq in range(cfg.num_sequences):
        n_seg = max(1, int(rng.poisson(cfg.mean_segments)))
        script = np.empty(n_seg, dtype=np.int64)
        script[0] = rng.integers(C)
        for i in range(1, n_seg):  # no immediate label repeats
            step = rng.integers(1, C)
            script[i] = (script[i - 1] + step) % C
        durations = rng.integers(d_min, d_max + 1, size=n_seg)
        labels = np.repeat(script, durations)
        T = labels.size
        segments, pos = [], 0
        for lab, dur in zip(script, durations):
            segments.append(Segment(pos, pos + int(dur), int(lab)))
            pos += int(dur)
        true_segments[seq] = segments

        latent = prototypes[labels] + cfg.noise_sigma * rng.normal(size=(T, H))
        for v in all_view_ids:
            A, b = transforms[v]
            recordings.append(Recording(seq, v, latent @ A.T + b, labels))

    split = SplitSpec(seen_views=set(seen_ids), unseen_view_groups=group_views)
    return recordings, split, true_segments


# ---------------------------------------------------------------------------
# segments


def segments_from_labels(labels) -> list[Segment]:
    """Maximal constant runs in temporal order, covering every frame."""
    labels = np.asarray(labels, dtype=np.int64)
    if labels.size == 0:
        return []
    boundaries = np.flatnonzero(labels[1:] != labels[:-1]) + 1
    starts = np.concatenate([[0], boundaries])
    ends = np.concatenate([boundaries, [labels.size]])
    return [Segment(int(s), int(e), int(labels[s])) for s, e in zip(starts, ends)]


def expand_segments(segments: list[Segment]) -> np.ndarray:
    """Inverse of segments_from_labels for contiguous segment lists."""
    if not segments:
        return np.zeros(0, dtype=np.int64)
    out = np.empty(segments[-1].end, dtype=np.int64)
    for seg in segments:
        out[seg.start:seg.end] = seg.label
    return out


# ---------------------------------------------------------------------------
# sampling


@dataclass(frozen=True)
class SegmentOccurrence:
    recording: Recording
    segment: Segment

    @property
    def label(self) -> int:
        return self.segment.label

    @property
    def view_id(self) -> int:
        return self.recording.view_id


def recordings_of_sequence(recordings: list[Recording], sequence_id: int,
                           seen_views: set[int]) -> list[Recording]:
    found = [r for r in recordings if r.sequence_id == sequence_id and r.view_id in seen_views]
    return sorted(found, key=lambda r: r.view_id)


def sample_view_pair(recordings: list[Recording], sequence_id: int, split: SplitSpec,
                     rng: np.random.Generator) -> tuple[Recording, Recording]:
    """Uniform ordered pair of distinct seen views of one sequence."""
    views = recordings_of_sequence(recordings, sequence_id, split.seen_views)
    if len(views) < 2:
        raise ValueError(
            f"sequence {sequence_id} has {len(views)} seen views, need at least 2"
        )
    qi = int(rng.integers(len(views)))
    rest = [i for i in range(len(views)) if i != qi]
    ri = rest[int(rng.integers(len(rest)))]
    return views[qi], views[ri]


def action_occurrences(recordings: list[Recording], split: SplitSpec) -> list[SegmentOccurrence]:
    """Every action segment occurrence across the seen views, in dataset order."""
    occ = []
    for rec in recordings:
        if rec.view_id in split.seen_views:
            occ.extend(SegmentOccurrence(rec, seg) for seg in segments_from_labels(rec.labels))
    return occ


def _partners(occurrences, first_idx: int, allow_same_view: bool) -> list[int]:
    first = occurrences[first_idx]
    out = []
    for j, cand in enumerate(occurrences):
        if j == first_idx or cand.label != first.label:
            continue
        if allow_same_view or cand.view_id != first.view_id:
            out.append(j)
    return out


def sample_action_pair_occurrences(occurrences: list[SegmentOccurrence],
                                   rng: np.random.Generator,
                                   allow_same_view: bool = False):
    """Uniform first occurrence, uniform same-label partner; resample the
    first when it has no partner."""
    if not any(_partners(occurrences, i, allow_same_view) for i in range(len(occurrences))):
        raise ValueError("no valid action pair exists in the dataset")
    while True:
        first_idx = int(rng.integers(len(occurrences)))
        partners = _partners(occurrences, first_idx, allow_same_view)
        if partners:
            second_idx = partners[int(rng.integers(len(partners)))]
            return occurrences[first_idx], occurrences[second_idx]


def sample_action_pair(recordings: list[Recording], split: SplitSpec,
                       rng: np.random.Generator, allow_same_view: bool = False):
    return sample_action_pair_occurrences(action_occurrences(recordings, split),
                                          rng, allow_same_view)


def apply_sync_shift(recording: Recording, delta_max: int,
                     rng: np.random.Generator) -> Recording:
    """Shift features forward by a random offset in [0, delta_max], repeating
    the first frame; labels stay untouched, desynchronizing the pair."""
    if delta_max < 0 or delta_max >= recording.num_frames:
        raise ValueError(
            f"delta_max {delta_max} out of range for {recording.num_frames} frames"
        )
    if delta_max == 0:
        return recording
    offset = int(rng.integers(0, delta_max + 1))
    if offset == 0:
        return recording
    feats = recording.features
    shifted = np.concatenate([np.repeat(feats[:1], offset, axis=0), feats[:-offset]])
    return Recording(recording.sequence_id, recording.view_id, shifted, recording.labels)


# ---------------------------------------------------------------------------
# file formats


def write_features(path, features: np.ndarray) -> None:
    features = np.asarray(features, dtype=np.float64)
    T, H = features.shape
    with open(path, "wb") as fh:
        fh.write(FEATURE_MAGIC)
        fh.write(struct.pack("<III", FILE_VERSION, T, H))
        fh.write(np.ascontiguousarray(features, dtype="<f8").tobytes())


def _read_exact(fh, n: int, what: str) -> bytes:
    buf = fh.read(n)
    if len(buf) != n:
        raise FormatError(f"truncated file while reading {what}", fh.tell())
    return buf


def read_features(path) -> np.ndarray:
    with open(path, "rb") as fh:
        if _read_exact(fh, 4, "magic") != FEATURE_MAGIC:
            raise FormatError(f"bad feature-file magic in {path}", 0)
        version, T, H = struct.unpack("<III", _read_exact(fh, 12, "header"))
        if version != FILE_VERSION:
            raise FormatError(f"unsupported feature-file version {version}", 4)
        data = np.frombuffer(_read_exact(fh, 8 * T * H, "feature payload"), dtype="<f8")
        trailing = fh.read(1)
        if trailing:
            raise FormatError("trailing bytes after feature payload", fh.tell() - 1)
    return data.reshape(T, H).astype(np.float64)


def write_labels(path, labels) -> None:
    labels = np.asarray(labels, dtype=np.int64)
    if labels.size and (labels.min() < 0 or labels.max() > 0xFFFF):
        raise ValueError("labels must fit in u16")
    with open(path, "wb") as fh:
        fh.write(LABEL_MAGIC)
        fh.write(struct.pack("<II", FILE_VERSION, labels.size))
        fh.write(labels.astype("<u2").tobytes())


def read_labels(path) -> np.ndarray:
    with open(path, "rb") as fh:
        if _read_exact(fh, 4, "magic") != LABEL_MAGIC:
            raise FormatError(f"bad label-file magic in {path}", 0)
        version, T = struct.unpack("<II", _read_exact(fh, 8, "header"))
        if version != FILE_VERSION:
            raise FormatError(f"unsupported label-file version {version}", 4)
        data = np.frombuffer(_read_exact(fh, 2 * T, "label payload"), dtype="<u2")
        trailing = fh.read(1)
        if trailing:
            raise FormatError("trailing bytes after label payload", fh.tell() - 1)
    return data.astype(np.int64)


def recording_stem(sequence_id: int, view_id: int) -> str:
    return f"seq{sequence_id:04d}_view{view_id:02d}"


def _with_ext(stem: Path, ext: str) -> Path:
    return stem.parent / (stem.name + ext)


def write_recording(stem_path, recording: Recording) -> None:
    stem = Path(stem_path)
    write_features(_with_ext(stem, ".tasf"), recording.features)
    write_labels(_with_ext(stem, ".tasl"), recording.labels)


def read_recording(stem_path, sequence_id: int | None = None,
                   view_id: int | None = None) -> Recording:
    stem = Path(stem_path)
    if stem.suffix in (".tasf", ".tasl"):
        stem = stem.parent / stem.stem
    if sequence_id is None or view_id is None:
        m = _STEM_RE.search(stem.name)
        if m is None:
            raise ValueError(
                f"cannot infer sequence/view ids from {stem.name!r}; pass them explicitly"
            )
        sequence_id, view_id = int(m.group(1)), int(m.group(2))
    features = read_features(_with_ext(stem, ".tasf"))
    labels = read_labels(_with_ext(stem, ".tasl"))
    if features.shape[0] != labels.shape[0]:
        raise FormatError(
            f"{stem.name}: feature file has {features.shape[0]} frames but label "
            f"file has {labels.shape[0]}", 8)
    return Recording(sequence_id, view_id, features, labels)


# ---------------------------------------------------------------------------
# dataset directories


def write_split(path, split: SplitSpec) -> None:
    doc = {
        "seen_views": sorted(split.seen_views),
        "unseen_view_groups": {k: sorted(v) for k, v in split.unseen_view_groups.items()},
    }
    Path(path).write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def read_split(path) -> SplitSpec:
    doc = json.loads(Path(path).read_text())
    return SplitSpec(set(doc["seen_views"]),
                     {k: set(v) for k, v in doc["unseen_view_groups"].items()})


def write_class_names(path, names: list[str]) -> None:
    Path(path).write_text("".join(f"{n}\n" for n in names))


def read_class_names(path) -> list[str]:
    return [line for line in Path(path).read_text().splitlines() if line]


def save_dataset(directory, recordings: list[Recording], split: SplitSpec,
                 class_names: list[str] | None = None) -> list[Path]:
    """Write every recording plus split and class-name files; returns paths."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    written = []
    for rec in recordings:
        stem = directory / recording_stem(rec.sequence_id, rec.view_id)
        write_recording(stem, rec)
        written.extend([_with_ext(stem, ".tasf"), _with_ext(stem, ".tasl")])
    split_path = directory / "split.json"
    write_split(split_path, split)
    written.append(split_path)
    if class_names is not None:
        names_path = directory / "class_names.txt"
        write_class_names(names_path, class_names)
        written.append(names_path)
    return written


def load_dataset(directory) -> tuple[list[Recording], SplitSpec]:
    directory = Path(directory)
    split = read_split(directory / "split.json")
    recordings = [read_recording(p) for p in sorted(directory.glob("*.tasf"))]
    if not recordings:
        raise ValueError(f"no recordings found under {directory}")
    return recordings, split
