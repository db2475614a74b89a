"""Open-world recall evaluation.

AR_k averages recall over IoU thresholds 0.50:0.05:0.95 with a budget of k
score-ranked detections per frame. For the unknown split, detections greedily
matched (IoU >= 0.5) to known-class GT are removed before the budget is applied.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .events import AnnotationRecord, annotations_by_time, load_annotations
from .infer import Detection, load_predictions

BUDGETS = (10, 30, 50, 100, 300)
IOU_THRESHOLDS = tuple(round(0.5 + 0.05 * i, 2) for i in range(10))
KNOWN_MATCH_IOU = 0.5


class ProtocolError(ValueError):
    pass


@dataclass(frozen=True)
class ClassSplit:
    known: frozenset[int]
    unknown: frozenset[int]

    def __post_init__(self):
        if self.known & self.unknown:
            raise ValueError("known and unknown classes overlap")

    @classmethod
    def parse(cls, text: str) -> "ClassSplit":
        """``"known=0;unknown=1,2"``."""
        parts = dict(p.split("=", 1) for p in text.replace(" ", "").split(";") if p)
        ids = {k: frozenset(int(v) for v in parts.get(k, "").split(",") if v) for k in ("known", "unknown")}
        return cls(ids["known"], ids["unknown"])

    @classmethod
    def from_annotations(cls, records) -> "ClassSplit":
        known = {r.class_id for r in records if r.annotated}
        unknown = {r.class_id for r in records if not r.annotated} - known
        return cls(frozenset(known), frozenset(unknown))


def _iou_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    if len(a) == 0 or len(b) == 0:
        return np.zeros((len(a), len(b)))
    a, b = a[:, None, :], b[None, :, :]
    iw = np.clip(np.minimum(a[..., 0] + a[..., 2], b[..., 0] + b[..., 2]) - np.maximum(a[..., 0], b[..., 0]), 0, None)
    ih = np.clip(np.minimum(a[..., 1] + a[..., 3], b[..., 1] + b[..., 3]) - np.maximum(a[..., 1], b[..., 1]), 0, None)
    inter = iw * ih
    return inter / (a[..., 2] * a[..., 3] + b[..., 2] * b[..., 3] - inter)


def match(dets: np.ndarray, gts: np.ndarray, iou_threshold: float,
          ious: np.ndarray | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Greedy one-to-one matching of score-sorted detections to GT.

    Each detection in turn takes the highest-IoU still-unmatched GT with IoU >= threshold
    (lowest GT index on ties). Returns (per-GT matched flag, per-det matched GT index or -1).
    """
    if ious is None:
        ious = _iou_matrix(np.asarray(dets, float).reshape(-1, 4), np.asarray(gts, float).reshape(-1, 4))
    n_det, n_gt = ious.shape
    gt_used = np.zeros(n_gt, bool)
    det_match = np.full(n_det, -1, np.int64)
    if n_gt == 0:
        return gt_used, det_match
    for i in range(n_det):
        row = np.where(gt_used, -1.0, ious[i])
        j = int(np.argmax(row))
        if row[j] >= iou_threshold:
            gt_used[j] = True
            det_match[i] = j
    return gt_used, det_match


def _sorted(dets: list[Detection]) -> list[Detection]:
    return sorted(dets, key=lambda d: (-d.obj, *d.box))


@dataclass
class FrameCounts:
    """Matched GT per (budget, threshold) and GT totals for one split."""

    matched: np.ndarray  # (len(budgets), len(thresholds))
    total: int


def frame_recall_counts(dets: list[Detection], gts: list[AnnotationRecord], classes: frozenset[int],
                        known: frozenset[int] | None, budgets=BUDGETS,
                        thresholds=IOU_THRESHOLDS) -> FrameCounts:
    """Counts for GT of ``classes``; with ``known`` given, known-matched dets skip the budget."""
    dets = _sorted(dets)
    boxes = np.array([d.box for d in dets], float).reshape(-1, 4)
    if known is not None:
        known_gt = np.array([g.box for g in gts if g.class_id in known], float).reshape(-1, 4)
        if len(known_gt) and len(boxes):
            _, dm = match(boxes, known_gt, KNOWN_MATCH_IOU)
            boxes = boxes[dm < 0]
    target = np.array([g.box for g in gts if g.class_id in classes], float).reshape(-1, 4)
    out = np.zeros((len(budgets), len(thresholds)), np.int64)
    if len(target) == 0:
        return FrameCounts(out, 0)
    ious_all = _iou_matrix(boxes, target)
    for bi, k in enumerate(budgets):
        ious = ious_all[:k]
        for ti, thr in enumerate(thresholds):
            gt_used, _ = match(None, None, thr, ious=ious)
            out[bi, ti] = int(gt_used.sum())
    return FrameCounts(out, len(target))


def average_recall(frames: list[tuple[list[Detection], list[AnnotationRecord]]], split: ClassSplit,
                   which: str = "unknown", budgets=BUDGETS, thresholds=IOU_THRESHOLDS) -> dict[int, float] | None:
    """AR_k (percent) for each budget, pooled over frames; None if the split has no GT."""
    if which == "unknown":
        classes, known = split.unknown, split.known
    elif which == "all":
        classes, known = split.known | split.unknown, None
    elif which == "known":
        classes, known = split.known, None
    else:
        raise ValueError(f"unknown split {which!r}")
    matched = np.zeros((len(budgets), len(thresholds)), np.int64)
    total = 0
    for dets, gts in frames:
        c = frame_recall_counts(dets, gts, classes, known, budgets, thresholds)
        matched += c.matched
        total += c.total
    if total == 0:
        return None
    # integer hit counts, one rounding: 100 * hits / (total * thresholds)
    hits = matched.sum(axis=1)
    return {k: 100.0 * int(h) / (total * len(thresholds)) for k, h in zip(budgets, hits)}


def auc(ar_values, budgets=BUDGETS) -> float:
    """Trapezoid area under AR vs log10(k), normalized by the log10 span of the budgets."""
    ar = [float(v) for v in ar_values]
    if len(ar) < 2 or len(ar) != len(budgets):
        raise ValueError("auc needs at least two AR values aligned with the budgets")
    xs = [math.log10(k) for k in budgets]
    area = sum((xs[i + 1] - xs[i]) * (ar[i] + ar[i + 1]) / 2 for i in range(len(ar) - 1))
    return area / math.log10(budgets[-1] / budgets[0])


@dataclass
class EvalReport:
    """AR_k and AUC per split; a split with no GT maps to None."""

    rows: dict[str, dict | None] = field(default_factory=dict)
    label: str = ""

    def to_records(self) -> list[dict]:
        out = []
        for split, row in self.rows.items():
            rec = {"variant": self.label, "split": split}
            if row is None:
                rec["absent"] = True
            else:
                rec.update({"AUC": row["AUC"], **{f"AR{k}": row[k] for k in BUDGETS}})
            out.append(rec)
        return out

    def to_jsonl(self) -> str:
        return "".join(json.dumps(r, sort_keys=True) + "\n" for r in self.to_records())

    @classmethod
    def from_jsonl(cls, text: str) -> "EvalReport":
        """Inverse of ``to_jsonl``."""
        rows, label = {}, ""
        for line in text.splitlines():
            if not line.strip():
                continue
            r = json.loads(line)
            label = r["variant"]
            rows[r["split"]] = None if r.get("absent") else {**{k: r[f"AR{k}"] for k in BUDGETS}, "AUC": r["AUC"]}
        return cls(rows, label)

    def to_table(self) -> str:
        head = f"{'variant':<10} {'split':<8} {'AUC':>7}" + "".join(f" {'AR' + str(k):>7}" for k in BUDGETS)
        lines = [head]
        for r in self.to_records():
            if r.get("absent"):
                lines.append(f"{r['variant']:<10} {r['split']:<8} {'absent':>7}")
                continue
            lines.append(f"{r['variant']:<10} {r['split']:<8} {r['AUC']:7.2f}"
                         + "".join(f" {r['AR' + str(k)]:7.2f}" for k in BUDGETS))
        return "\n".join(lines)


def evaluate_frames(frames: list[tuple[list[Detection], list[AnnotationRecord]]], split: ClassSplit,
                    label: str = "", splits=("unknown", "all")) -> EvalReport:
    rows = {}
    for which in splits:
        ar = average_recall(frames, split, which)
        if ar is None:
            rows[which] = None
        else:
            rows[which] = {**ar, "AUC": auc([ar[k] for k in BUDGETS])}
    return EvalReport(rows, label)


def align_frames(predictions: dict[int, list[Detection]], annotations: list[AnnotationRecord]):
    """Pair prediction frames with annotation frames by timestamp.

    Annotated timestamps without predictions count as empty detection sets; prediction
    timestamps without annotations are a protocol error.
    """
    by_t = annotations_by_time(annotations)
    orphans = sorted(set(predictions) - set(by_t))
    if orphans:
        shown = ", ".join(str(t) for t in orphans[:10])
        more = "" if len(orphans) <= 10 else f" (+{len(orphans) - 10} more)"
        raise ProtocolError(f"prediction frames without annotations: {shown}{more}")
    return [(predictions.get(t, []), by_t[t]) for t in sorted(by_t)]


def evaluate_run(prediction_path: str | Path, annotation_path: str | Path, split: ClassSplit | None = None,
                 label: str = "") -> EvalReport:
    annotations = load_annotations(annotation_path)
    predictions = load_predictions(prediction_path)
    if split is None:
        split = ClassSplit.from_annotations(annotations)
    return evaluate_frames(align_frames(predictions, annotations), split, label)
