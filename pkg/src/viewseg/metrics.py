"""Evaluation metrics: frame accuracy, segmental edit score, segmental F1@tau,
and per-view-group aggregation.

The F1 matcher is the greedy in-predicted-order convention of the standard
action segmentation evaluators: each predicted segment is matched against its
best-IoU same-label ground-truth segment (ties break toward the earlier one),
counts a true positive only if that IoU clears the threshold and the segment
is still unmatched. Scoring is pure; evaluate_all reduces in dataset order.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .data import Recording, Segment, SplitSpec, segments_from_labels
from .model import ModelState, encode, predict_labels


def _filtered_segments(labels, ignore_labels) -> list[Segment]:
    segs = segments_from_labels(labels)
    if ignore_labels:
        segs = [s for s in segs if s.label not in ignore_labels]
    return segs


def frame_accuracy(pred, gt, ignore_labels=()) -> float:
    """Percent of frames with matching labels."""
    pred = np.asarray(pred, dtype=np.int64)
    gt = np.asarray(gt, dtype=np.int64)
    if pred.shape != gt.shape:
        raise ValueError(f"length mismatch: {pred.shape} vs {gt.shape}")
    keep = np.ones(gt.shape, dtype=bool)
    for lab in ignore_labels:
        keep &= gt != lab
    total = int(keep.sum())
    if total == 0:
        return 100.0
    return 100.0 * float((pred[keep] == gt[keep]).sum()) / total


def segmental_edit_score(pred, gt, ignore_labels=()) -> float:
    """Normalized Levenshtein similarity between the segment label strings."""
    p = [s.label for s in _filtered_segments(pred, ignore_labels)]
    g = [s.label for s in _filtered_segments(gt, ignore_labels)]
    if not p and not g:
        return 100.0
    n, m = len(p), len(g)
    dist = np.zeros((n + 1, m + 1), dtype=np.int64)
    dist[:, 0] = np.arange(n + 1)
    dist[0, :] = np.arange(m + 1)
    for i in range(1, n + 1):
        for j in range(1, m + 1):
            if p[i - 1] == g[j - 1]:
                dist[i, j] = dist[i - 1, j - 1]
            else:
                dist[i, j] = 1 + min(dist[i - 1, j], dist[i, j - 1], dist[i - 1, j - 1])
    return 100.0 * (1.0 - dist[n, m] / max(n, m))


def _segment_iou(a: Segment, b: Segment) -> float:
    inter = min(a.end, b.end) - max(a.start, b.start)
    if inter <= 0:
        return 0.0
    union = max(a.end, b.end) - min(a.start, b.start)
    return inter / union


def segmental_f1(pred, gt, tau: float, ignore_labels=()) -> float:
    """Segmental F1 at IoU threshold ``tau`` with greedy one-to-one matching."""
    if not 0.0 < tau <= 1.0:
        raise ValueError(f"tau must lie in (0, 1], got {tau}")
    pred = np.asarray(pred, dtype=np.int64)
    gt = np.asarray(gt, dtype=np.int64)
    if pred.shape != gt.shape:
        raise ValueError(f"length mismatch: {pred.shape} vs {gt.shape}")
    p_segs = _filtered_segments(pred, ignore_labels)
    g_segs = _filtered_segments(gt, ignore_labels)
    if not p_segs and not g_segs:
        return 100.0
    matched = [False] * len(g_segs)
    tp = fp = 0
    for ps in p_segs:
        best_iou, best_j = 0.0, -1
        for j, gs in enumerate(g_segs):
            if gs.label != ps.label:
                continue
            iou = _segment_iou(ps, gs)
            if iou > best_iou:  # strict: ties keep the earlier ground truth
                best_iou, best_j = iou, j
        if best_j >= 0 and best_iou >= tau and not matched[best_j]:
            matched[best_j] = True
            tp += 1
        else:
            fp += 1
    fn = matched.count(False)
    if tp == 0:
        return 0.0
    return 100.0 * 2.0 * tp / (2.0 * tp + fp + fn)


@dataclass
class GroupMetrics:
    f1_10: float
    f1_25: float
    f1_50: float
    edit: float
    acc: float
    count: int

    def as_dict(self) -> dict[str, float]:
        return {"f1_10": self.f1_10, "f1_25": self.f1_25, "f1_50": self.f1_50,
                "edit": self.edit, "acc": self.acc, "count": self.count}


@dataclass
class EvalReport:
    groups: dict[str, GroupMetrics] = field(default_factory=dict)
    warnings: list[str] = field(default_factory=list)

    def rows(self) -> list[dict]:
        return [{"group": name, **gm.as_dict()} for name, gm in self.groups.items()]

    def unseen_f1_50(self) -> float:
        """Recording-weighted mean F1@50 over every unseen group."""
        total = weighted = 0
        for name, gm in self.groups.items():
            if name != "seen":
                total += gm.count
                weighted += gm.count * gm.f1_50
        if total == 0:
            raise ValueError("report has no unseen recordings")
        return weighted / total


def score_sequences(pairs, ignore_labels=()) -> dict[str, GroupMetrics]:
    """Aggregate metrics per group for (group, pred, gt) label-sequence triples."""
    per_group: dict[str, list[list[float]]] = {}
    for group, pred, gt in pairs:
        vals = [
            segmental_f1(pred, gt, 0.10, ignore_labels),
            segmental_f1(pred, gt, 0.25, ignore_labels),
            segmental_f1(pred, gt, 0.50, ignore_labels),
            segmental_edit_score(pred, gt, ignore_labels),
            frame_accuracy(pred, gt, ignore_labels),
        ]
        per_group.setdefault(group, []).append(vals)
    out = {}
    for group, rows in per_group.items():
        arr = np.asarray(rows)
        means = arr.mean(axis=0)
        out[group] = GroupMetrics(*[float(v) for v in means], count=len(rows))
    return out


def evaluate_all(model: ModelState, recordings: list[Recording], split: SplitSpec,
                 ignore_labels=()) -> EvalReport:
    """Encode and score every recording, macro-averaged inside each view group."""
    report = EvalReport()
    triples = []
    for rec in recordings:
        group = split.group_of(rec.view_id)
        if group is None:
            report.warnings.append(
                f"recording seq={rec.sequence_id} view={rec.view_id} matches no split group")
            continue
        enc = encode(rec.features, model)
        pred = predict_labels(enc.logits_per_stage[-1])
        triples.append((group, pred, rec.labels))
    scored = score_sequences(triples, ignore_labels)
    for name in split.group_names():
        if name in scored:
            report.groups[name] = scored[name]
        else:
            report.warnings.append(f"group {name!r} has no recordings; omitted")
    return report
