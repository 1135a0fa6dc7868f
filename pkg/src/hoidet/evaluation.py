"""Detection-level mAP evaluation: greedy matching at IoU > 0.5, two scenarios.

Per-query predictions unroll into one detection per action, scored by the
object-confidence-weighted interaction probability. Detections match unused
ground truth of their class greedily in score order. For ground truth with
no object, the strict scenario (1) additionally requires the prediction to
have committed to "no object" (every sigmoid box output below the null
threshold), while scenario 2 ignores the object box entirely. AP uses
all-point interpolation with the precision envelope.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .data import HOIDataset, ImageAnnotation, OAVocabulary
from .geometry import Box, clamp_box, iou
from .heads import PredictionSet

NULL_BOX_THRESHOLD = 0.01
IOU_THRESHOLD = 0.5
RARE_TRAIN_COUNT = 10

ACTION_LEVEL = "action"
PAIR_LEVEL = "pair"


@dataclass(frozen=True)
class Detection:
    """One scored (human, object, action) triplet attributed to an image."""

    image_id: str
    human: Box
    object: Box | None
    object_class: int | None
    action: int
    score: float


def _sigmoid_cxcywh_to_box(cxcywh: np.ndarray) -> Box:
    cx, cy, w, h = (float(v) for v in cxcywh)
    return clamp_box(cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2)


def predictions_to_detections(image_id: str, pred: PredictionSet,
                              null_threshold: float = NULL_BOX_THRESHOLD,
                              ) -> list[Detection]:
    """Unroll a prediction set: one detection per (query, action).

    A query whose four object-box outputs all fall below ``null_threshold``
    is committed to "no object"; its detections carry ``object=None``. The
    object class is the argmax over real (non-background) classes.
    """
    hb = pred.boxes_human.detach().cpu().numpy()
    ob = pred.boxes_object.detach().cpu().numpy()
    obj_probs = pred.obj_probs.detach().cpu().numpy()
    weighted = pred.hoi_weighted.detach().cpu().numpy()
    out = []
    for q in range(pred.n_queries):
        human = _sigmoid_cxcywh_to_box(hb[q])
        if np.all(ob[q] < null_threshold):
            obj_box, obj_cls = None, None
        else:
            obj_box = _sigmoid_cxcywh_to_box(ob[q])
            obj_cls = int(np.argmax(obj_probs[q, :-1]))
        for a in range(weighted.shape[1]):
            out.append(Detection(image_id, human, obj_box, obj_cls, a,
                                 float(weighted[q, a])))
    return out


@dataclass
class _GTEntry:
    human: Box
    object: Box | None
    used: bool = False


def _match_quality(det: Detection, gt: _GTEntry, scenario: int) -> float | None:
    """IoU-based match quality, or None when the detection cannot match."""
    h_iou = iou(det.human, gt.human)
    if h_iou <= IOU_THRESHOLD:
        return None
    if gt.object is not None:
        if det.object is None:
            return None
        o_iou = iou(det.object, gt.object)
        if o_iou <= IOU_THRESHOLD:
            return None
        return min(h_iou, o_iou)
    # Null-object ground truth.
    if scenario == 1 and det.object is not None:
        return None
    return h_iou


def match_detections(detections: list[Detection],
                     gts: dict[str, list[_GTEntry]],
                     scenario: int) -> tuple[np.ndarray, np.ndarray]:
    """Greedy TP/FP flags for one class; ``detections`` must be score-sorted."""
    tp = np.zeros(len(detections))
    fp = np.zeros(len(detections))
    for i, det in enumerate(detections):
        best, best_q = None, 0.0
        for gt in gts.get(det.image_id, []):
            if gt.used:
                continue
            q = _match_quality(det, gt, scenario)
            if q is not None and (best is None or q > best_q):
                best, best_q = gt, q
        if best is not None:
            best.used = True
            tp[i] = 1.0
        else:
            fp[i] = 1.0
    return tp, fp


def average_precision(tp: np.ndarray, fp: np.ndarray, n_gt: int) -> float:
    """All-point interpolated AP from score-ordered TP/FP flags."""
    if n_gt == 0:
        raise ValueError("AP undefined for a class with no ground truth")
    if len(tp) == 0:
        return 0.0
    cum_tp = np.cumsum(tp)
    cum_fp = np.cumsum(fp)
    recall = cum_tp / n_gt
    precision = cum_tp / np.maximum(cum_tp + cum_fp, 1e-12)
    # Precision envelope: best precision at any recall >= r.
    env = np.maximum.accumulate(precision[::-1])[::-1]
    r = np.concatenate([[0.0], recall])
    return float(np.sum((r[1:] - r[:-1]) * env))


@dataclass
class EvalReport:
    scenario: int
    class_mode: str
    per_class_ap: dict[str, float] = field(default_factory=dict)
    per_class_gt: dict[str, int] = field(default_factory=dict)
    map: float = 0.0
    map_rare: float | None = None
    map_non_rare: float | None = None
    n_detections: int = 0

    def to_dict(self) -> dict:
        return {
            "scenario": self.scenario,
            "class_mode": self.class_mode,
            "map": self.map,
            "map_rare": self.map_rare,
            "map_non_rare": self.map_non_rare,
            "per_class_ap": self.per_class_ap,
            "per_class_gt": self.per_class_gt,
            "n_detections": self.n_detections,
        }


def _detection_class(det: Detection, vocab: OAVocabulary, mode: str) -> str | None:
    if mode == ACTION_LEVEL:
        return vocab.actions[det.action].name
    pair = (det.object_class, det.action)
    if pair in vocab.pairs:
        return vocab.pair_key(vocab.pairs.index(pair))
    return None


def _gt_class(obj_cls: int | None, action: int, vocab: OAVocabulary, mode: str) -> str:
    if mode == ACTION_LEVEL:
        return vocab.actions[action].name
    return vocab.pair_key(vocab.pairs.index((obj_cls, action)))


def evaluate(detections: list[Detection], images: list[ImageAnnotation],
             vocab: OAVocabulary, *, scenario: int = 2,
             class_mode: str = ACTION_LEVEL,
             rare_counts: dict[str, int] | None = None) -> EvalReport:
    """Per-class AP and mAP over the chosen class granularity.

    ``rare_counts`` maps pair keys to TRAINING-set instance counts; classes
    under the rare threshold feed a separate rare-split mean (pair mode).
    Classes without ground truth are excluded from every mean.
    """
    if scenario not in (1, 2):
        raise ValueError("scenario must be 1 or 2")
    if class_mode not in (ACTION_LEVEL, PAIR_LEVEL):
        raise ValueError(f"unknown class mode {class_mode!r}")

    gt_by_class: dict[str, dict[str, list[_GTEntry]]] = {}
    gt_counts: dict[str, int] = {}
    for ann in images:
        for inst in ann.hois:
            cls = _gt_class(inst.object_class, inst.action_class, vocab, class_mode)
            gt_by_class.setdefault(cls, {}).setdefault(ann.image_id, []).append(
                _GTEntry(human=inst.human, object=inst.object))
            gt_counts[cls] = gt_counts.get(cls, 0) + 1

    det_by_class: dict[str, list[Detection]] = {}
    for det in detections:
        cls = _detection_class(det, vocab, class_mode)
        if cls is not None:
            det_by_class.setdefault(cls, []).append(det)

    report = EvalReport(scenario=scenario, class_mode=class_mode,
                        n_detections=len(detections))
    aps, rare_aps, non_rare_aps = [], [], []
    for cls in sorted(gt_counts):
        dets = sorted(det_by_class.get(cls, []),
                      key=lambda d: (-d.score, d.image_id))
        gts = {img: [_GTEntry(g.human, g.object) for g in entries]
               for img, entries in gt_by_class[cls].items()}
        tp, fp = match_detections(dets, gts, scenario)
        ap = average_precision(tp, fp, gt_counts[cls])
        report.per_class_ap[cls] = ap
        report.per_class_gt[cls] = gt_counts[cls]
        aps.append(ap)
        if class_mode == PAIR_LEVEL and rare_counts is not None:
            if rare_counts.get(cls, 0) < RARE_TRAIN_COUNT:
                rare_aps.append(ap)
            else:
                non_rare_aps.append(ap)

    report.map = float(np.mean(aps)) if aps else 0.0
    if class_mode == PAIR_LEVEL and rare_counts is not None:
        report.map_rare = float(np.mean(rare_aps)) if rare_aps else None
        report.map_non_rare = float(np.mean(non_rare_aps)) if non_rare_aps else None
    return report


def evaluate_dataset(detections: list[Detection], dataset: HOIDataset, **kw) -> EvalReport:
    return evaluate(detections, dataset.images, dataset.vocab, **kw)


def training_pair_counts(images: list[ImageAnnotation], vocab: OAVocabulary) -> dict[str, int]:
    """Instance counts per pair key, for the rare/non-rare split."""
    counts = {vocab.pair_key(p): 0 for p in range(vocab.n_pairs)}
    for ann in images:
        for inst in ann.hois:
            pair = vocab.pair_id(inst.object_class, inst.action_class)
            counts[vocab.pair_key(pair)] += 1
    return counts


def save_report(report: EvalReport, json_path: str | Path,
                csv_path: str | Path | None = None) -> None:
    Path(json_path).write_text(json.dumps(report.to_dict(), indent=2))
    if csv_path is not None:
        with open(csv_path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["class", "ap", "n_gt"])
            for cls, ap in sorted(report.per_class_ap.items()):
                writer.writerow([cls, f"{ap:.6f}", report.per_class_gt[cls]])
            writer.writerow(["mAP", f"{report.map:.6f}", ""])
