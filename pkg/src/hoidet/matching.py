"""Optimal prediction-to-target assignment and the multi-task training loss.

Targets with identical boxes and object class are merged into one multi-hot
action target before matching. The assignment minimizes a weighted sum of
box L1, (1 - GIoU), negative object-class probability, and negative action
probability; the loss then charges matched queries for boxes and classes,
unmatched queries for background, and the image-level pair scores for a
binary cross entropy against the ground-truth pair indicator.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch
from scipy.optimize import linear_sum_assignment

from .data import ImageAnnotation, OAVocabulary, gt_oa_targets
from .geometry import Box, box_cxcywh_to_xyxy_t, generalized_box_iou_t
from .heads import PredictionSet

_PROB_EPS = 1e-7


@dataclass(frozen=True)
class LossWeights:
    """Multipliers for the loss terms; ``background`` down-weights unmatched CE."""

    box_l1: float = 2.5
    giou: float = 1.0
    obj_ce: float = 1.0
    hoi_bce: float = 1.0
    oa_bce: float = 1.0
    background: float = 0.1

    def __post_init__(self):
        for name in ("box_l1", "giou", "obj_ce", "hoi_bce", "oa_bce", "background"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be nonnegative")


@dataclass
class MatchTarget:
    """One ground-truth unit: a (human, object) pair with its action multi-hot."""

    human: Box
    object: Box | None
    object_class: int | None
    actions: list[int]
    action_hot: np.ndarray  # (n_actions,) float64


def build_targets(ann: ImageAnnotation, vocab: OAVocabulary) -> list[MatchTarget]:
    """Merge instances sharing boxes and object class into multi-hot targets."""
    merged: dict = {}
    order = []
    for inst in ann.hois:
        key = (inst.human.as_tuple(),
               None if inst.object is None else inst.object.as_tuple(),
               inst.object_class)
        if key not in merged:
            merged[key] = MatchTarget(
                human=inst.human, object=inst.object, object_class=inst.object_class,
                actions=[], action_hot=np.zeros(vocab.n_actions, dtype=np.float64))
            order.append(key)
        tgt = merged[key]
        if inst.action_class not in tgt.actions:
            tgt.actions.append(inst.action_class)
        tgt.action_hot[inst.action_class] = 1.0
    return [merged[k] for k in order]


def _lsa_total(cost: np.ndarray) -> float:
    rows, cols = linear_sum_assignment(cost)
    return float(cost[rows, cols].sum())


def hungarian(cost) -> list[int]:
    """Minimum-cost injective assignment of rows to columns (n <= m).

    Among all optimal assignments, returns the lexicographically smallest
    column sequence: row 0 takes the lowest column consistent with optimality,
    then row 1, and so on.
    """
    cost = np.asarray(cost, dtype=np.float64)
    if cost.ndim != 2:
        raise ValueError("cost must be a matrix")
    n, m = cost.shape
    if n == 0:
        return []
    if n > m:
        raise ValueError(f"need at least as many columns as rows ({n} > {m})")
    if not np.isfinite(cost).all():
        raise ValueError("cost matrix must be finite")

    total = _lsa_total(cost)
    eps = 1e-9 * max(1.0, float(np.abs(cost).sum()))
    available = list(range(m))
    result = []
    budget = total
    for i in range(n):
        rows_left = list(range(i + 1, n))
        for j in available:
            rest_cols = [c for c in available if c != j]
            if len(rest_cols) < len(rows_left):
                continue
            rest = _lsa_total(cost[np.ix_(rows_left, rest_cols)]) if rows_left else 0.0
            if cost[i, j] + rest <= budget + eps:
                result.append(j)
                available.remove(j)
                budget -= cost[i, j]
                break
        else:  # pragma: no cover - unreachable for finite costs
            raise RuntimeError("assignment construction failed")
    return result


def match_cost(pred: PredictionSet, targets: list[MatchTarget],
               weights: LossWeights) -> np.ndarray:
    """(n_targets, N_q) matching-cost matrix, computed without gradients.

    Per entry: L1 + (1 - GIoU) over the human box (and object box when the
    target has one), minus the predicted probability of the target's object
    class and the mean predicted probability of its actions.
    """
    n_q = pred.n_queries
    with torch.no_grad():
        hb = pred.boxes_human.double()
        ob = pred.boxes_object.double()
        obj_probs = pred.obj_probs.double()
        hoi_raw = pred.hoi_raw.double()
        cost = np.zeros((len(targets), n_q), dtype=np.float64)
        for g, tgt in enumerate(targets):
            th = torch.tensor(tgt.human.to_cxcywh(), dtype=torch.float64)
            l1 = (hb - th).abs().sum(dim=-1)
            gi = generalized_box_iou_t(
                box_cxcywh_to_xyxy_t(hb), box_cxcywh_to_xyxy_t(th[None])).squeeze(-1)
            box_term = l1
            giou_term = 1.0 - gi
            cls_term = torch.zeros(n_q, dtype=torch.float64)
            if tgt.object is not None:
                to = torch.tensor(tgt.object.to_cxcywh(), dtype=torch.float64)
                box_term = box_term + (ob - to).abs().sum(dim=-1)
                gio = generalized_box_iou_t(
                    box_cxcywh_to_xyxy_t(ob), box_cxcywh_to_xyxy_t(to[None])).squeeze(-1)
                giou_term = giou_term + (1.0 - gio)
                cls_term = -obj_probs[:, tgt.object_class]
            act_term = -hoi_raw[:, tgt.actions].mean(dim=-1)
            cost[g] = (weights.box_l1 * box_term + weights.giou * giou_term
                       + weights.obj_ce * cls_term + weights.hoi_bce * act_term).numpy()
    return cost


@dataclass
class LossResult:
    total: torch.Tensor
    components: dict[str, float] = field(default_factory=dict)
    assignment: list[int] = field(default_factory=list)


def detection_loss(pred: PredictionSet, targets: list[MatchTarget],
                   oa_target: np.ndarray, weights: LossWeights,
                   *, assignment: list[int] | None = None,
                   train_null_boxes: bool = False) -> LossResult:
    """Matched multi-task loss for one image, with a per-component breakdown.

    ``assignment`` fixes the target-to-query map (used by gradient checks);
    by default it is re-solved from the current predictions. With
    ``train_null_boxes`` the object box of null-object targets is pulled
    toward (0,0,0,0) by an L1 term (strict-scenario training).
    """
    n_q = pred.n_queries
    device = pred.boxes_human.device
    dtype = pred.boxes_human.dtype
    if assignment is None:
        assignment = hungarian(match_cost(pred, targets, weights)) if targets else []

    zero = torch.zeros((), dtype=dtype, device=device)
    box_l1 = zero.clone()
    giou_loss = zero.clone()
    hoi_bce = zero.clone()
    n_boxes = 0

    obj_target = torch.full((n_q,), pred.obj_logits.shape[-1] - 1,
                            dtype=torch.long, device=device)
    ce_weight = torch.full((n_q,), weights.background, dtype=dtype, device=device)

    matched_logits = []
    matched_hot = []
    for tgt, q in zip(targets, assignment):
        th = torch.as_tensor(tgt.human.to_cxcywh(), dtype=dtype, device=device)
        box_l1 = box_l1 + (pred.boxes_human[q] - th).abs().sum()
        gi = generalized_box_iou_t(
            box_cxcywh_to_xyxy_t(pred.boxes_human[q][None]),
            box_cxcywh_to_xyxy_t(th[None]))[0, 0]
        giou_loss = giou_loss + (1.0 - gi)
        n_boxes += 1
        if tgt.object is not None:
            to = torch.as_tensor(tgt.object.to_cxcywh(), dtype=dtype, device=device)
            box_l1 = box_l1 + (pred.boxes_object[q] - to).abs().sum()
            gio = generalized_box_iou_t(
                box_cxcywh_to_xyxy_t(pred.boxes_object[q][None]),
                box_cxcywh_to_xyxy_t(to[None]))[0, 0]
            giou_loss = giou_loss + (1.0 - gio)
            n_boxes += 1
            obj_target[q] = tgt.object_class
            ce_weight[q] = 1.0
        else:
            # Null-object target: no object box/class supervision for this
            # query — it is neither a real class nor background.
            ce_weight[q] = 0.0
            if train_null_boxes:
                box_l1 = box_l1 + pred.boxes_object[q].abs().sum()
                n_boxes += 1
        matched_logits.append(pred.hoi_logits[q])
        matched_hot.append(torch.as_tensor(tgt.action_hot, dtype=dtype, device=device))

    if n_boxes:
        box_l1 = box_l1 / n_boxes
        giou_loss = giou_loss / n_boxes
    if matched_logits:
        logits = torch.stack(matched_logits)
        hot = torch.stack(matched_hot)
        hoi_bce = torch.nn.functional.binary_cross_entropy_with_logits(logits, hot)

    log_probs = torch.log_softmax(pred.obj_logits, dim=-1)
    ce = -log_probs[torch.arange(n_q, device=device), obj_target]
    weight_sum = ce_weight.sum()
    obj_ce = (ce_weight * ce).sum() / weight_sum if float(weight_sum) > 0 else zero

    if pred.oa_scores is None:
        oa_bce = zero
    else:
        s = pred.oa_scores.clamp(_PROB_EPS, 1.0 - _PROB_EPS)
        t = torch.as_tensor(oa_target, dtype=dtype, device=device)
        oa_bce = torch.nn.functional.binary_cross_entropy(s, t)

    total = (weights.box_l1 * box_l1 + weights.giou * giou_loss
             + weights.obj_ce * obj_ce + weights.hoi_bce * hoi_bce
             + weights.oa_bce * oa_bce)
    components = {
        "box_l1": float(box_l1.detach()),
        "giou": float(giou_loss.detach()),
        "obj_ce": float(obj_ce.detach()),
        "hoi_bce": float(hoi_bce.detach()),
        "oa_bce": float(oa_bce.detach()),
        "total": float(total.detach()),
        "n_matched": float(len(assignment)),
    }
    return LossResult(total=total, components=components, assignment=list(assignment))


def image_loss(pred: PredictionSet, ann: ImageAnnotation, vocab: OAVocabulary,
               weights: LossWeights, *, assignment: list[int] | None = None,
               train_null_boxes: bool = False) -> LossResult:
    """Convenience wrapper: build merged targets from an annotation, then loss."""
    targets = build_targets(ann, vocab)
    if len(targets) > pred.n_queries:
        raise ValueError(
            f"{len(targets)} targets exceed {pred.n_queries} queries")
    oa_target = gt_oa_targets(ann, vocab)
    return detection_loss(pred, targets, oa_target, weights,
                          assignment=assignment, train_null_boxes=train_null_boxes)
