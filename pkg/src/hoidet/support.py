"""Support feature generation: candidate scoring, top-K selection, aggregation.

From the encoded image the generator predicts a confidence per
object-action pair, keeps the top K, and builds one support vector per kept
pair by fusing its semantic embedding with a spatial feature (an embedded
sampled-layout map, or the distribution parameters directly). The K x d
stack later conditions the query refiner.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from .geometry import Box
from .layers import FeedForward
from .spatial import (
    RSCStats,
    SpatialMapEncoder,
    SpatialParamEncoder,
    rasterize,
    sample_pair,
    spatial_param_vector,
)

AGGREGATION_MODES = ("multiply", "concat")
SPATIAL_MODES = ("map", "params")


@dataclass
class SupportFeatures:
    """K support rows plus the diagnostics that produced them."""

    features: torch.Tensor  # (K, d)
    pairs: list[int]
    boxes: list[tuple[Box, Box | None]]
    maps: torch.Tensor | None  # (K, 2, B, B) in map mode


def score_oa(encoded: torch.Tensor, head: nn.Module) -> torch.Tensor:
    """Image-level pair confidences: sigmoid of a 3-layer FFN on pooled features."""
    if encoded.shape[0] == 0:
        raise ValueError("encoded feature map is empty")
    pooled = encoded.mean(dim=0)
    return torch.sigmoid(head(pooled))


def select_topk(scores, k: int) -> list[int]:
    """Indices of the K largest scores, ties to the lower index.

    Output is ordered by descending score, then ascending index; no score
    threshold is applied.
    """
    if isinstance(scores, torch.Tensor):
        values = scores.detach().cpu().numpy()
    else:
        values = np.asarray(scores)
    if k > values.shape[0]:
        raise ValueError(f"k={k} exceeds {values.shape[0]} candidates")
    order = sorted(range(values.shape[0]), key=lambda i: (-float(values[i]), i))
    return order[:k]


def pair_sample_rng(image_tag: str, pair_key: str) -> np.random.Generator:
    """Deterministic per-(image, pair) generator for evaluation-time sampling."""
    digest = hashlib.sha256(f"{image_tag}:{pair_key}".encode("utf-8")).digest()
    return np.random.default_rng(int.from_bytes(digest[:8], "little"))


class SupportFeatureGenerator(nn.Module):
    """Scores pairs, samples spatial layouts, and fuses them with semantics.

    The semantic table (one frozen row per pair) is registered as a buffer so
    checkpoints are self-contained; spatial statistics are plain Python state
    attached via ``set_stats``.
    """

    def __init__(self, d: int, n_pairs: int, d_semantic: int, map_size: int,
                 aggregation: str = "multiply", spatial_mode: str = "map",
                 stats_mode: str = "bivariate",
                 topleft: tuple[float, float] = (0.25, 0.25)):
        super().__init__()
        if aggregation not in AGGREGATION_MODES:
            raise ValueError(f"unknown aggregation {aggregation!r}")
        if spatial_mode not in SPATIAL_MODES:
            raise ValueError(f"unknown spatial mode {spatial_mode!r}")
        if spatial_mode == "params" and aggregation == "multiply":
            # Raw distribution parameters have no gating interpretation.
            aggregation = "concat"
        self.d = d
        self.n_pairs = n_pairs
        self.map_size = map_size
        self.aggregation = aggregation
        self.spatial_mode = spatial_mode
        self.stats_mode = stats_mode
        self.topleft = topleft
        self.oa_head = FeedForward((d, d, d, n_pairs))
        self.semantic_proj = nn.Linear(d_semantic, d)
        self.register_buffer("semantic_table", torch.zeros(n_pairs, d_semantic))
        if spatial_mode == "map":
            self.spatial_encoder: nn.Module = SpatialMapEncoder(map_size, d)
        else:
            self.spatial_encoder = SpatialParamEncoder(stats_mode, d)
        if self.aggregation == "concat":
            self.fuse_proj = nn.Linear(2 * d, d)
        self.stats: RSCStats | None = None

    def set_semantic_table(self, table: np.ndarray) -> None:
        if table.shape != tuple(self.semantic_table.shape):
            raise ValueError(
                f"semantic table shape {table.shape} != {tuple(self.semantic_table.shape)}")
        with torch.no_grad():
            self.semantic_table.copy_(
                torch.as_tensor(table, dtype=self.semantic_table.dtype))

    def set_stats(self, stats: RSCStats) -> None:
        if self.spatial_mode == "params" and stats.mode != self.stats_mode:
            raise ValueError(
                f"stats mode {stats.mode!r} != configured {self.stats_mode!r}")
        self.stats = stats

    def scores(self, encoded: torch.Tensor) -> torch.Tensor:
        return score_oa(encoded, self.oa_head)

    def sample_layouts(self, pairs: list[int], *, image_tag: str = "",
                       pair_keys: list[str] | None = None,
                       rng: np.random.Generator | None = None,
                       ) -> tuple[list[tuple[Box, Box | None]], np.ndarray]:
        """Draw one (human, object) layout and binary map per selected pair.

        With ``rng`` given, all pairs draw from that stream (training-time
        resampling); otherwise each pair gets its own generator derived from
        (image_tag, pair key), making evaluation deterministic.
        """
        if self.stats is None:
            raise RuntimeError("spatial statistics not attached; call set_stats first")
        keys = pair_keys or [str(p) for p in pairs]
        boxes = []
        maps = np.zeros((len(pairs), 2, self.map_size, self.map_size), dtype=np.float32)
        for i, pair in enumerate(pairs):
            gen = rng if rng is not None else pair_sample_rng(image_tag, keys[i])
            human, obj = sample_pair(self.stats, pair, gen, topleft=self.topleft,
                                     min_side=1.0 / self.map_size)
            boxes.append((human, obj))
            maps[i] = rasterize(human, obj, self.map_size)
        return boxes, maps

    def build_support(self, pairs: list[int], *, image_tag: str = "",
                      pair_keys: list[str] | None = None,
                      rng: np.random.Generator | None = None,
                      frozen_layouts: tuple[list, np.ndarray] | None = None,
                      ) -> SupportFeatures:
        """Fuse semantic and spatial features for the selected pairs into K x d.

        ``frozen_layouts`` replays previously sampled (boxes, maps) so the
        forward pass is purely differentiable state for gradient checks.
        """
        dtype = self.semantic_proj.weight.dtype
        device = self.semantic_proj.weight.device
        if not pairs:
            return SupportFeatures(torch.zeros(0, self.d, dtype=dtype, device=device),
                                   [], [], None)
        idx = torch.as_tensor(pairs, dtype=torch.long, device=device)
        f_sem = self.semantic_proj(self.semantic_table[idx].to(dtype))

        maps_tensor = None
        if self.spatial_mode == "map":
            if frozen_layouts is not None:
                boxes, maps = frozen_layouts
            else:
                boxes, maps = self.sample_layouts(pairs, image_tag=image_tag,
                                                  pair_keys=pair_keys, rng=rng)
            maps_tensor = torch.as_tensor(maps, dtype=dtype, device=device)
            f_spa = self.spatial_encoder(maps_tensor)
        else:
            boxes = []
            vecs = np.stack([spatial_param_vector(self.stats, p) for p in pairs])
            f_spa = self.spatial_encoder(torch.as_tensor(vecs, dtype=dtype, device=device))

        if self.aggregation == "multiply":
            fused = f_sem * f_spa
        else:
            fused = self.fuse_proj(torch.cat([f_sem, f_spa], dim=-1))
        return SupportFeatures(fused, list(pairs), boxes, maps_tensor)
