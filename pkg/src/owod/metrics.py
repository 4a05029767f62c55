"""Open-world detection metrics: partitioned mAP, U-Recall, A-OSE, WI.

Matching follows the PASCAL protocol: detections are processed in
descending score order (ties broken by scene_id, then insertion order)
and greedily claim the highest-IoU unmatched ground truth of the same
scene at IoU >= 0.5. AP uses all-point precision-envelope interpolation.
Metrics with an empty denominator are null rather than zero.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import geometry
from .data import UNKNOWN_CLASS

IOU_THRESHOLD = 0.5
A_OSE_CONF_THRESHOLD = 0.5
WI_RECALL_LEVEL = 0.8


@dataclass(frozen=True)
class Detection:
    scene_id: str
    label: int  # known class index or UNKNOWN_CLASS
    score: float
    box: np.ndarray  # center-size (4,)

    def __post_init__(self) -> None:
        object.__setattr__(self, "box", np.asarray(self.box, dtype=np.float64))
        if not np.isfinite(self.score) or not 0.0 <= self.score <= 1.0:
            raise ValueError(f"score must be finite in [0, 1], got {self.score}")


@dataclass(frozen=True)
class GroundTruth:
    scene_id: str
    label: int
    box: np.ndarray

    def __post_init__(self) -> None:
        object.__setattr__(self, "box", np.asarray(self.box, dtype=np.float64))


@dataclass
class EvalReport:
    task: int
    seed: int
    tau: float
    conf_threshold: float
    top_k: "int | None"
    map_prev: "float | None"
    map_current: "float | None"
    map_both: "float | None"
    u_recall: "float | None"
    a_ose: int
    wi: "float | None"
    per_class_ap: dict[int, "float | None"] = field(default_factory=dict)
    per_class_pr: dict[int, dict[str, list[float]]] = field(default_factory=dict)
    flags: dict[str, bool] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "task": self.task,
            "seed": self.seed,
            "tau": self.tau,
            "conf_threshold": self.conf_threshold,
            "top_k": self.top_k,
            "map_prev": self.map_prev,
            "map_current": self.map_current,
            "map_both": self.map_both,
            "u_recall": self.u_recall,
            "a_ose": self.a_ose,
            "wi": self.wi,
            "per_class_ap": {str(k): v for k, v in sorted(self.per_class_ap.items())},
            "per_class_pr": {
                str(k): {"recall": v["recall"], "precision": v["precision"]}
                for k, v in sorted(self.per_class_pr.items())
            },
            "flags": dict(sorted(self.flags.items())),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "EvalReport":
        return cls(
            task=d["task"],
            seed=d["seed"],
            tau=d["tau"],
            conf_threshold=d["conf_threshold"],
            top_k=d["top_k"],
            map_prev=d["map_prev"],
            map_current=d["map_current"],
            map_both=d["map_both"],
            u_recall=d["u_recall"],
            a_ose=d["a_ose"],
            wi=d["wi"],
            per_class_ap={int(k): v for k, v in d.get("per_class_ap", {}).items()},
            per_class_pr={
                int(k): {"recall": list(v["recall"]), "precision": list(v["precision"])}
                for k, v in d.get("per_class_pr", {}).items()
            },
            flags=dict(d.get("flags", {})),
        )


def _ranked(dets: list[Detection]) -> list[Detection]:
    order = sorted(range(len(dets)), key=lambda i: (-dets[i].score, dets[i].scene_id, i))
    return [dets[i] for i in order]


def _greedy_tp_flags(dets: list[Detection], gts: list[GroundTruth]) -> np.ndarray:
    """True/false positive flags for detections already in rank order."""
    gts_by_scene: dict[str, list[int]] = {}
    for idx, gt in enumerate(gts):
        gts_by_scene.setdefault(gt.scene_id, []).append(idx)
    claimed = np.zeros(len(gts), dtype=bool)
    flags = np.zeros(len(dets), dtype=bool)
    for d_idx, det in enumerate(dets):
        best_iou, best_gt = 0.0, -1
        for g_idx in gts_by_scene.get(det.scene_id, []):
            if claimed[g_idx]:
                continue
            iou = float(geometry.box_iou(det.box, gts[g_idx].box))
            if iou >= IOU_THRESHOLD and iou > best_iou:
                best_iou, best_gt = iou, g_idx
        if best_gt >= 0:
            claimed[best_gt] = True
            flags[d_idx] = True
    return flags


def average_precision(
    dets: list[Detection],
    gts: list[GroundTruth],
    iou_thresh: float = IOU_THRESHOLD,
) -> "float | None":
    """All-point interpolated AP for one class; null without ground truth."""
    del iou_thresh  # fixed protocol threshold; kept for signature clarity
    if len(gts) == 0:
        return None
    if len(dets) == 0:
        return 0.0
    ranked = _ranked(dets)
    tp = _greedy_tp_flags(ranked, gts).astype(np.float64)
    tp_cum = np.cumsum(tp)
    recall = tp_cum / len(gts)
    precision = tp_cum / np.arange(1, len(ranked) + 1)
    # Precision envelope: the best precision achievable at recall >= r.
    envelope = np.maximum.accumulate(precision[::-1])[::-1]
    ap = 0.0
    prev_recall = 0.0
    for i in range(len(ranked)):
        if recall[i] > prev_recall:
            ap += (recall[i] - prev_recall) * envelope[i]
            prev_recall = recall[i]
    return float(ap)


def precision_recall_curve(
    dets: list[Detection], gts: list[GroundTruth]
) -> tuple[list[float], list[float]]:
    """Raw (recall, precision) points along the ranked detection list."""
    if len(gts) == 0 or len(dets) == 0:
        return [], []
    ranked = _ranked(dets)
    tp = _greedy_tp_flags(ranked, gts).astype(np.float64)
    tp_cum = np.cumsum(tp)
    recall = tp_cum / len(gts)
    precision = tp_cum / np.arange(1, len(ranked) + 1)
    return recall.tolist(), precision.tolist()


def owod_map(
    dets: list[Detection],
    gts: list[GroundTruth],
    prev_classes: "tuple[int, ...] | list[int]",
    current_classes: "tuple[int, ...] | list[int]",
) -> tuple["float | None", "float | None", "float | None", dict[int, "float | None"]]:
    """Per-class AP averaged over the previous/current/both partitions."""
    per_class: dict[int, "float | None"] = {}
    for cls in list(prev_classes) + list(current_classes):
        cls_dets = [d for d in dets if d.label == cls]
        cls_gts = [g for g in gts if g.label == cls]
        per_class[cls] = average_precision(cls_dets, cls_gts)

    def mean_over(classes) -> "float | None":
        vals = [per_class[c] for c in classes if per_class[c] is not None]
        return float(np.mean(vals)) if vals else None

    map_prev = mean_over(prev_classes)
    map_current = mean_over(current_classes)
    map_both = mean_over(list(prev_classes) + list(current_classes))
    return map_prev, map_current, map_both, per_class


def u_recall(dets: list[Detection], gts: list[GroundTruth]) -> "float | None":
    """Fraction of unknown ground truths covered by unknown detections."""
    unknown_gts = [g for g in gts if g.label == UNKNOWN_CLASS]
    if len(unknown_gts) == 0:
        return None
    unknown_dets = _ranked([d for d in dets if d.label == UNKNOWN_CLASS])
    matched = _greedy_tp_flags(unknown_dets, unknown_gts)
    return float(matched.sum() / len(unknown_gts))


def a_ose(
    dets: list[Detection],
    gts: list[GroundTruth],
    conf_threshold: float = A_OSE_CONF_THRESHOLD,
) -> int:
    """Count of confident known-labeled detections sitting on unknown objects."""
    unknown_gts = [g for g in gts if g.label == UNKNOWN_CLASS]
    known_dets = _ranked(
        [d for d in dets if d.label != UNKNOWN_CLASS and d.score >= conf_threshold]
    )
    matched = _greedy_tp_flags(known_dets, unknown_gts)
    return int(matched.sum())


def wilderness_impact(
    dets: list[Detection],
    gts: list[GroundTruth],
    recall_level: float = WI_RECALL_LEVEL,
) -> "float | None":
    """FP_unk / (TP + FP_pure) at the cutoff where known recall reaches the level.

    TP means a known-labeled detection matching a known ground truth of
    its own class; FP_unk means a known-labeled false positive that lands
    on an unknown object instead. Null when the recall level is
    unreachable.
    """
    known_gts = [g for g in gts if g.label != UNKNOWN_CLASS]
    unknown_gts = [g for g in gts if g.label == UNKNOWN_CLASS]
    if len(known_gts) == 0:
        return None
    known_dets = _ranked([d for d in dets if d.label != UNKNOWN_CLASS])

    gts_by_scene: dict[str, list[int]] = {}
    for idx, gt in enumerate(known_gts):
        gts_by_scene.setdefault(gt.scene_id, []).append(idx)
    unk_by_scene: dict[str, list[int]] = {}
    for idx, gt in enumerate(unknown_gts):
        unk_by_scene.setdefault(gt.scene_id, []).append(idx)

    claimed = np.zeros(len(known_gts), dtype=bool)
    claimed_unk = np.zeros(len(unknown_gts), dtype=bool)
    tp = fp_pure = fp_unk = 0
    for det in known_dets:
        best_iou, best_gt = 0.0, -1
        for g_idx in gts_by_scene.get(det.scene_id, []):
            if claimed[g_idx] or known_gts[g_idx].label != det.label:
                continue
            iou = float(geometry.box_iou(det.box, known_gts[g_idx].box))
            if iou >= IOU_THRESHOLD and iou > best_iou:
                best_iou, best_gt = iou, g_idx
        if best_gt >= 0:
            claimed[best_gt] = True
            tp += 1
        else:
            best_iou, best_unk = 0.0, -1
            for g_idx in unk_by_scene.get(det.scene_id, []):
                if claimed_unk[g_idx]:
                    continue
                iou = float(geometry.box_iou(det.box, unknown_gts[g_idx].box))
                if iou >= IOU_THRESHOLD and iou > best_iou:
                    best_iou, best_unk = iou, g_idx
            if best_unk >= 0:
                claimed_unk[best_unk] = True
                fp_unk += 1
            else:
                fp_pure += 1
        if tp / len(known_gts) >= recall_level:
            return float(fp_unk / (tp + fp_pure))
    return None
