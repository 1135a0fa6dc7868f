"""Per-query prediction heads and object-confidence score weighting.

Each decoder output embedding feeds four small FFNs: human box, object box
(both sigmoid center-form), object class (softmax with an explicit trailing
background class), and per-action interaction scores (sigmoid, multi-label).
Final interaction scores are gated by the most confident real object class.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import torch
from torch import nn

from .layers import FeedForward


@dataclass
class PredictionSet:
    """All per-query outputs for one image, plus the image-level pair scores."""

    boxes_human: torch.Tensor  # (N_q, 4) cxcywh in (0,1)
    boxes_object: torch.Tensor  # (N_q, 4) cxcywh in (0,1)
    obj_logits: torch.Tensor  # (N_q, N_obj + 1), background last
    hoi_logits: torch.Tensor  # (N_q, N_act)
    oa_scores: torch.Tensor | None = None  # (N_s,)

    @property
    def obj_probs(self) -> torch.Tensor:
        return torch.softmax(self.obj_logits, dim=-1)

    @property
    def hoi_raw(self) -> torch.Tensor:
        return torch.sigmoid(self.hoi_logits)

    @property
    def hoi_weighted(self) -> torch.Tensor:
        return weight_scores(self.hoi_raw, self.obj_probs)

    @property
    def n_queries(self) -> int:
        return self.boxes_human.shape[0]

    def detach(self) -> "PredictionSet":
        return PredictionSet(
            self.boxes_human.detach(), self.boxes_object.detach(),
            self.obj_logits.detach(), self.hoi_logits.detach(),
            None if self.oa_scores is None else self.oa_scores.detach())


def weight_scores(hoi_raw: torch.Tensor, obj_probs: torch.Tensor) -> torch.Tensor:
    """Scale each query's action scores by its best real-class object confidence.

    The background column (last) is excluded from the max: background-heavy
    queries should be suppressed, never boosted. Per-query action ranking is
    preserved since the scale is a positive scalar.
    """
    max_real = obj_probs[..., :-1].max(dim=-1, keepdim=True).values
    return hoi_raw * max_real


class PredictionHeads(nn.Module):
    """Four 3-layer FFNs mapping decoder embeddings to boxes and class scores."""

    def __init__(self, d: int, n_objects: int, n_actions: int):
        super().__init__()
        self.n_objects = n_objects
        self.n_actions = n_actions
        self.human_box = FeedForward((d, d, d, 4))
        self.object_box = FeedForward((d, d, d, 4))
        self.object_class = FeedForward((d, d, d, n_objects + 1))
        self.interaction = FeedForward((d, d, d, n_actions))

    def forward(self, embeddings: torch.Tensor,
                oa_scores: torch.Tensor | None = None) -> PredictionSet:
        return PredictionSet(
            boxes_human=torch.sigmoid(self.human_box(embeddings)),
            boxes_object=torch.sigmoid(self.object_box(embeddings)),
            obj_logits=self.object_class(embeddings),
            hoi_logits=self.interaction(embeddings),
            oa_scores=oa_scores,
        )


def predictions_to_records(pred: PredictionSet) -> list[dict]:
    """Flatten one image's predictions to JSON-friendly per-query records."""
    hb = pred.boxes_human.detach().cpu().numpy()
    ob = pred.boxes_object.detach().cpu().numpy()
    probs = pred.obj_probs.detach().cpu().numpy()
    raw = pred.hoi_raw.detach().cpu().numpy()
    weighted = pred.hoi_weighted.detach().cpu().numpy()
    return [
        {
            "query": i,
            "b_h": hb[i].tolist(),
            "b_o": ob[i].tolist(),
            "obj_probs": probs[i].tolist(),
            "hoi_raw": raw[i].tolist(),
            "hoi_weighted": weighted[i].tolist(),
        }
        for i in range(pred.n_queries)
    ]


def save_predictions(path: str | Path, per_image: dict[str, PredictionSet]) -> None:
    doc = {image_id: predictions_to_records(p) for image_id, p in per_image.items()}
    Path(path).write_text(json.dumps(doc))


def load_predictions(path: str | Path) -> dict[str, list[dict]]:
    return json.loads(Path(path).read_text())
