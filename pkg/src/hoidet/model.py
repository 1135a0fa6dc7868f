"""Forward graph: patch backbone, encoder, query refiner, decoder, heads.

The image is patch-embedded and self-attention encoded; pooled encoder
features score object-action candidates; the top-K candidates become
support vectors that refine a learned query set via cross-attention; the
refined queries then cross-attend into the encoded image and feed the
prediction heads. Attention maps at every stage are exposed for dumps.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np
import torch
from torch import nn

from .heads import PredictionHeads, PredictionSet
from .layers import FeedForward, MultiHeadAttention, init_parameters, positional_encoding_2d
from .support import SupportFeatureGenerator, SupportFeatures, select_topk


@dataclass(frozen=True)
class ModelConfig:
    """Widths, depths, and mode switches for the whole detector."""

    d: int = 32
    heads: int = 4
    enc_layers: int = 2
    qr_layers: int = 2
    dec_layers: int = 2
    n_queries: int = 10
    k_support: int = 4
    patch_size: int = 8
    image_size: int = 64
    channels: int = 3
    map_size: int = 64
    ffn_hidden: int = 64
    n_objects: int = 6
    n_actions: int = 5
    n_pairs: int = 14
    d_semantic: int = 14
    aggregation: str = "multiply"
    semantic_mode: str = "oa"
    spatial_mode: str = "map"
    stats_mode: str = "bivariate"
    decoder_self_attention: bool = False

    def __post_init__(self):
        if self.d % self.heads != 0:
            raise ValueError("d must be divisible by the head count")
        if self.d % 4 != 0:
            raise ValueError("d must be divisible by 4 (positional encoding)")
        if self.k_support > self.n_pairs:
            raise ValueError("K cannot exceed the number of valid pairs")
        if self.image_size % self.patch_size != 0:
            raise ValueError("image size must be divisible by the patch size")
        if self.n_queries < 1:
            raise ValueError("need at least one query")

    @property
    def grid(self) -> int:
        return self.image_size // self.patch_size

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


class PatchEmbedding(nn.Module):
    """Non-overlapping patches, one shared linear map per patch."""

    def __init__(self, patch_size: int, channels: int, d: int):
        super().__init__()
        self.patch_size = patch_size
        self.channels = channels
        self.proj = nn.Linear(patch_size * patch_size * channels, d)

    def forward(self, image: torch.Tensor) -> torch.Tensor:
        """image: (H0, W0, C) floats -> (H*W, d) with H=H0/p, W=W0/p."""
        h0, w0, c = image.shape
        p = self.patch_size
        if h0 % p or w0 % p:
            raise ValueError(f"image {h0}x{w0} not divisible by patch size {p}")
        if c != self.channels:
            raise ValueError(f"expected {self.channels} channels, got {c}")
        h, w = h0 // p, w0 // p
        patches = (image.reshape(h, p, w, p, c)
                   .permute(0, 2, 1, 3, 4)
                   .reshape(h * w, p * p * c))
        return self.proj(patches)


class EncoderLayer(nn.Module):
    """Pre-norm self-attention block; positional encoding enters queries/keys only."""

    def __init__(self, d: int, heads: int, ffn_hidden: int):
        super().__init__()
        self.norm_attn = nn.LayerNorm(d)
        self.attn = MultiHeadAttention(d, heads)
        self.norm_ffn = nn.LayerNorm(d)
        self.ffn = FeedForward((d, ffn_hidden, d))

    def forward(self, x: torch.Tensor, pos: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        h = self.norm_attn(x)
        qk = h + pos
        out, weights = self.attn(qk, qk, h)
        x = x + out
        x = x + self.ffn(self.norm_ffn(x))
        return x, weights


class QueryRefinerLayer(nn.Module):
    """Query self-attention, then cross-attention with support rows as keys/values."""

    def __init__(self, d: int, heads: int, ffn_hidden: int):
        super().__init__()
        self.norm_self = nn.LayerNorm(d)
        self.self_attn = MultiHeadAttention(d, heads)
        self.norm_cross = nn.LayerNorm(d)
        self.cross_attn = MultiHeadAttention(d, heads)
        self.norm_ffn = nn.LayerNorm(d)
        self.ffn = FeedForward((d, ffn_hidden, d))

    def forward(self, q: torch.Tensor, support: torch.Tensor | None,
                ) -> tuple[torch.Tensor, torch.Tensor | None]:
        h = self.norm_self(q)
        out, _ = self.self_attn(h, h, h)
        q = q + out
        cross_weights = None
        if support is not None and support.shape[0] > 0:
            out, cross_weights = self.cross_attn(self.norm_cross(q), support, support)
            q = q + out
        q = q + self.ffn(self.norm_ffn(q))
        return q, cross_weights


class DecoderLayer(nn.Module):
    """Cross-attention into the encoded image; query self-attention only if toggled."""

    def __init__(self, d: int, heads: int, ffn_hidden: int, self_attention: bool):
        super().__init__()
        self.self_attention = self_attention
        if self_attention:
            self.norm_self = nn.LayerNorm(d)
            self.self_attn = MultiHeadAttention(d, heads)
        self.norm_cross = nn.LayerNorm(d)
        self.cross_attn = MultiHeadAttention(d, heads)
        self.norm_ffn = nn.LayerNorm(d)
        self.ffn = FeedForward((d, ffn_hidden, d))

    def forward(self, x: torch.Tensor, memory: torch.Tensor, pos: torch.Tensor,
                ) -> tuple[torch.Tensor, torch.Tensor]:
        if self.self_attention:
            h = self.norm_self(x)
            out, _ = self.self_attn(h, h, h)
            x = x + out
        out, weights = self.cross_attn(self.norm_cross(x), memory + pos, memory)
        x = x + out
        x = x + self.ffn(self.norm_ffn(x))
        return x, weights


@dataclass
class FrozenForward:
    """Replayable discrete state (selection + sampled layouts) for gradient checks."""

    pairs: list[int]
    layouts: tuple[list, np.ndarray] | None


@dataclass
class ModelOutput:
    predictions: PredictionSet
    oa_scores: torch.Tensor
    selected_pairs: list[int]
    support: SupportFeatures
    encoded: torch.Tensor
    embeddings: torch.Tensor
    qr_attention: list = field(default_factory=list)  # per layer (heads, N_q, K) or None
    decoder_attention: list = field(default_factory=list)  # per layer (heads, N_q, H*W)
    encoder_attention: list = field(default_factory=list)  # per layer (heads, HW, HW)


class HOIModel(nn.Module):
    """End-to-end detector over a single image."""

    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        d, heads, hidden = config.d, config.heads, config.ffn_hidden
        self.backbone = PatchEmbedding(config.patch_size, config.channels, d)
        self.register_buffer(
            "pos", positional_encoding_2d(config.grid, config.grid, d), persistent=False)
        self.encoder_layers = nn.ModuleList(
            EncoderLayer(d, heads, hidden) for _ in range(config.enc_layers))
        self.sfg = SupportFeatureGenerator(
            d, config.n_pairs, config.d_semantic, config.map_size,
            aggregation=config.aggregation, spatial_mode=config.spatial_mode,
            stats_mode=config.stats_mode)
        self.queries = nn.Embedding(config.n_queries, d)
        self.qr_layers = nn.ModuleList(
            QueryRefinerLayer(d, heads, hidden) for _ in range(config.qr_layers))
        self.decoder_layers = nn.ModuleList(
            DecoderLayer(d, heads, hidden, config.decoder_self_attention)
            for _ in range(config.dec_layers))
        self.heads = PredictionHeads(d, config.n_objects, config.n_actions)
        # Pair names drive per-(image, pair) sampling seeds; attach via set_pair_names.
        self.pair_names: list[str] = [str(i) for i in range(config.n_pairs)]

    def set_pair_names(self, names: Sequence[str]) -> None:
        if len(names) != self.config.n_pairs:
            raise ValueError("pair-name list length mismatch")
        self.pair_names = list(names)

    @property
    def dtype(self) -> torch.dtype:
        return self.queries.weight.dtype

    def image_to_tensor(self, pixels: np.ndarray | torch.Tensor) -> torch.Tensor:
        if isinstance(pixels, torch.Tensor):
            return pixels.to(self.dtype)
        arr = np.asarray(pixels)
        if arr.dtype == np.uint8:
            arr = arr.astype(np.float64) / 255.0
        return torch.as_tensor(arr, dtype=self.dtype)

    def encode(self, image: torch.Tensor) -> tuple[torch.Tensor, list[torch.Tensor]]:
        x = self.backbone(image)
        pos = self.pos.to(self.dtype)
        weights = []
        for layer in self.encoder_layers:
            x, w = layer(x, pos)
            weights.append(w)
        return x, weights

    def refine_queries(self, support: torch.Tensor | None,
                       ) -> tuple[torch.Tensor, list]:
        q = self.queries.weight
        weights = []
        for layer in self.qr_layers:
            q, w = layer(q, support)
            weights.append(w)
        return q, weights

    def decode(self, refined: torch.Tensor, memory: torch.Tensor,
               ) -> tuple[torch.Tensor, list[torch.Tensor]]:
        pos = self.pos.to(self.dtype)
        x = refined
        weights = []
        for layer in self.decoder_layers:
            x, w = layer(x, memory, pos)
            weights.append(w)
        return x, weights

    def forward(self, pixels, *, image_id: str = "",
                rng: np.random.Generator | None = None,
                oracle_pairs: Sequence[int] | None = None,
                frozen: FrozenForward | None = None,
                zero_support: bool = False) -> ModelOutput:
        """Full forward pass on one image.

        ``rng`` switches spatial sampling to a shared stream (training-time
        resampling); otherwise layouts derive deterministically from
        (image_id, pair name). ``oracle_pairs`` bypasses predicted selection
        with ground-truth pairs; ``frozen`` replays previously captured
        selection and layouts; ``zero_support`` is a diagnostic that blanks
        the support rows.
        """
        image = self.image_to_tensor(pixels)
        encoded, enc_w = self.encode(image)
        scores = self.sfg.scores(encoded)

        if frozen is not None:
            pairs = list(frozen.pairs)
        elif oracle_pairs is not None:
            pairs = list(oracle_pairs)
        else:
            pairs = select_topk(scores, self.config.k_support)

        support = self.sfg.build_support(
            pairs, image_tag=image_id,
            pair_keys=[self.pair_names[p] for p in pairs],
            rng=rng,
            frozen_layouts=frozen.layouts if frozen is not None else None)
        features = support.features
        if zero_support:
            features = features * 0.0

        refined, qr_w = self.refine_queries(features if pairs else None)
        embeddings, dec_w = self.decode(refined, encoded)
        predictions = self.heads(embeddings, oa_scores=scores)
        return ModelOutput(
            predictions=predictions, oa_scores=scores, selected_pairs=pairs,
            support=support, encoded=encoded, embeddings=embeddings,
            qr_attention=qr_w, decoder_attention=dec_w, encoder_attention=enc_w)

    def capture_frozen(self, pixels, *, image_id: str = "",
                       rng: np.random.Generator | None = None,
                       oracle_pairs: Sequence[int] | None = None) -> FrozenForward:
        """Run one forward and capture its discrete choices for exact replay."""
        with torch.no_grad():
            out = self.forward(pixels, image_id=image_id, rng=rng,
                               oracle_pairs=oracle_pairs)
        layouts = None
        if self.config.spatial_mode == "map" and out.support.maps is not None:
            layouts = (out.support.boxes, out.support.maps.detach().cpu().numpy())
        return FrozenForward(pairs=out.selected_pairs, layouts=layouts)


def build_model(config: ModelConfig, vocab, stats, semantic_table: np.ndarray,
                seed: int = 0) -> HOIModel:
    """Construct, wire, and deterministically initialize a detector."""
    model = HOIModel(config)
    model.sfg.set_stats(stats)
    model.sfg.set_semantic_table(semantic_table)
    model.set_pair_names([vocab.pair_key(p) for p in range(vocab.n_pairs)])
    init_parameters(model, seed)
    return model
