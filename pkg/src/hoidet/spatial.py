"""Spatial prior: per-pair Gaussian statistics, box sampling, and map embeddings.

Statistics are fitted from training annotations for every valid
(object, action) pair: the relative placement of the object w.r.t. the
human (two bivariate Gaussians over offset and log-size deltas, or one
4-D Gaussian), plus a person-size Gaussian. At inference these Gaussians
are sampled to fabricate a human/object box pair, which is rasterized to
a two-channel binary map and embedded by a small conv net.

Stats file layout (JSON, row-major covariance arrays):

    {"mode": "bivariate",
     "pairs": {"ball:hold": {"count": 12, "fallback": false,
                             "xy": {"mean": [..2], "cov": [[..], [..]]},
                             "wh": {...}, "person": {...}},
               ":stand":    {"count": 3, "fallback": false, "person": {...}}},
     "fallback": {"xy": {...}, "wh": {...}, "person": {...}}}

Multivariate mode stores one "xywh" entry per pair instead of "xy"/"wh".
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from torch import nn

from .data import HOIDataset, ImageAnnotation, OAVocabulary
from .geometry import Box, RSC, apply_rsc, clamp_box, rsc

COV_EPSILON = 1e-4

BIVARIATE = "bivariate"
MULTIVARIATE = "multivariate"


@dataclass(frozen=True)
class GaussianParams:
    """Mean vector and positive-definite covariance of one Gaussian."""

    mean: np.ndarray
    cov: np.ndarray

    @property
    def dim(self) -> int:
        return self.mean.shape[0]

    def sample(self, rng: np.random.Generator, size: int | None = None) -> np.ndarray:
        return rng.multivariate_normal(self.mean, self.cov, size=size)

    def to_dict(self) -> dict:
        return {"mean": self.mean.tolist(), "cov": self.cov.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "GaussianParams":
        return cls(np.asarray(d["mean"], dtype=np.float64), np.asarray(d["cov"], dtype=np.float64))


def fit_gaussian(samples: np.ndarray, epsilon: float = COV_EPSILON) -> GaussianParams:
    """Maximum-likelihood mean/covariance (divide by N) plus epsilon*I regularization."""
    x = np.asarray(samples, dtype=np.float64)
    mean = x.mean(axis=0)
    centered = x - mean
    cov = centered.T @ centered / x.shape[0]
    return GaussianParams(mean, cov + epsilon * np.eye(x.shape[1]))


def is_positive_definite(cov: np.ndarray) -> bool:
    try:
        np.linalg.cholesky(cov)
        return True
    except np.linalg.LinAlgError:
        return False


@dataclass
class PairStats:
    """Resolved distributions for one pair; ``fallback`` marks pairs with <2 samples."""

    person: GaussianParams
    xy: GaussianParams | None = None
    wh: GaussianParams | None = None
    xywh: GaussianParams | None = None
    count: int = 0
    fallback: bool = False


@dataclass
class RSCStats:
    """Per-pair spatial statistics plus the pooled global fallback."""

    mode: str
    pairs: dict[int, PairStats] = field(default_factory=dict)
    fallback: PairStats | None = None

    def for_pair(self, pair: int) -> PairStats:
        return self.pairs[pair]


def fit_stats(dataset: HOIDataset | list[ImageAnnotation],
              vocab: OAVocabulary | None = None,
              mode: str = BIVARIATE) -> RSCStats:
    """Fit per-pair Gaussians over placement deltas and person sizes.

    Pairs with fewer than two samples fall back to the distributions pooled
    over all pairs. Raises ``ValueError`` when the dataset holds no
    interacting (object-bearing) instance.
    """
    if isinstance(dataset, HOIDataset):
        images = dataset.images
        vocab = vocab or dataset.vocab
    else:
        images = dataset
        if vocab is None:
            raise ValueError("vocab is required when passing a bare image list")
    if mode not in (BIVARIATE, MULTIVARIATE):
        raise ValueError(f"unknown mode {mode!r}")

    deltas: dict[int, list] = {p: [] for p in range(vocab.n_pairs)}
    persons: dict[int, list] = {p: [] for p in range(vocab.n_pairs)}
    for ann in images:
        for inst in ann.hois:
            pair = vocab.pair_id(inst.object_class, inst.action_class)
            persons[pair].append([inst.human.width, inst.human.height])
            if inst.object is not None:
                deltas[pair].append(rsc(inst.human, inst.object).as_tuple())

    all_deltas = [d for ds in deltas.values() for d in ds]
    all_persons = [p for ps in persons.values() for p in ps]
    if not all_deltas:
        raise ValueError("dataset has no interacting pairs; cannot fit placement statistics")

    def make_pair_stats(rsc_samples, person_samples) -> PairStats:
        stats = PairStats(person=fit_gaussian(np.asarray(person_samples)))
        if rsc_samples:
            arr = np.asarray(rsc_samples, dtype=np.float64)
            if mode == BIVARIATE:
                stats.xy = fit_gaussian(arr[:, :2])
                stats.wh = fit_gaussian(arr[:, 2:])
            else:
                stats.xywh = fit_gaussian(arr)
        return stats

    fallback = make_pair_stats(all_deltas, all_persons)
    fallback.count = len(all_persons)

    stats = RSCStats(mode=mode, fallback=fallback)
    for pair in range(vocab.n_pairs):
        n = len(persons[pair])
        is_null = vocab.pairs[pair][0] is None
        if n < 2:
            entry = PairStats(
                person=fallback.person,
                xy=None if is_null else fallback.xy,
                wh=None if is_null else fallback.wh,
                xywh=None if is_null else fallback.xywh,
                count=n,
                fallback=True,
            )
        else:
            entry = make_pair_stats(deltas[pair], persons[pair])
            entry.count = n
        stats.pairs[pair] = entry
    return stats


def draw_pair_geometry(stats: RSCStats, pair: int,
                       rng: np.random.Generator) -> tuple[tuple[float, float], RSC | None]:
    """Draw (person width/height, placement) for a pair; placement None for null pairs.

    Draw order is fixed (person, then offsets, then sizes) so rng streams
    reproduce across callers.
    """
    entry = stats.for_pair(pair)
    w_h, h_h = entry.person.sample(rng)
    if entry.xy is None and entry.xywh is None:
        return (float(w_h), float(h_h)), None
    if stats.mode == BIVARIATE:
        dx, dy = entry.xy.sample(rng)
        dw, dh = entry.wh.sample(rng)
    else:
        dx, dy, dw, dh = entry.xywh.sample(rng)
    return (float(w_h), float(h_h)), RSC(float(dx), float(dy), float(dw), float(dh))


def sample_pair(stats: RSCStats, pair: int, rng: np.random.Generator,
                topleft: tuple[float, float] = (0.25, 0.25),
                min_side: float = 1.0 / 64.0) -> tuple[Box, Box | None]:
    """Sample a (human, object) box pair for a spatial map.

    The human's top-left corner sits at the fixed ``topleft`` fraction of the
    unit square with size drawn from the person Gaussian; the object is placed
    by the sampled relative configuration. Both boxes are clamped to [0, 1]
    with minimum side ``min_side``. Null-object pairs return (human, None).
    """
    (w_h, h_h), r = draw_pair_geometry(stats, pair, rng)
    tlx, tly = topleft
    human = clamp_box(tlx, tly, tlx + w_h, tly + h_h, min_side=min_side)
    if r is None:
        return human, None
    return human, clamp_box(*apply_rsc(human, r), min_side=min_side)


def rasterize(human: Box, obj: Box | None, map_size: int) -> np.ndarray:
    """Two-channel binary map: cell (i, j) is 1 iff its center lies inside the box.

    Channel 0 marks the human, channel 1 the object (all zero for None).
    """
    grid = np.zeros((2, map_size, map_size), dtype=np.float32)
    centers = (np.arange(map_size) + 0.5) / map_size
    for channel, box in ((0, human), (1, obj)):
        if box is None:
            continue
        rows = (centers >= box.y1) & (centers <= box.y2)
        cols = (centers >= box.x1) & (centers <= box.x2)
        grid[channel][np.ix_(rows, cols)] = 1.0
    return grid


class SpatialMapEncoder(nn.Module):
    """Embed a 2 x B x B binary map: two strided convs, then a linear projection."""

    def __init__(self, map_size: int, d: int):
        super().__init__()
        if map_size % 4 != 0:
            raise ValueError("map size must be divisible by 4 (two stride-2 convs)")
        self.map_size = map_size
        self.conv1 = nn.Conv2d(2, 16, kernel_size=5, stride=2, padding=2)
        self.conv2 = nn.Conv2d(16, 32, kernel_size=5, stride=2, padding=2)
        self.project = nn.Linear(32 * (map_size // 4) ** 2, d)

    def forward(self, maps: torch.Tensor) -> torch.Tensor:
        """maps: (N, 2, B, B) -> (N, d)."""
        x = torch.relu(self.conv1(maps))
        x = torch.relu(self.conv2(x))
        return self.project(x.flatten(1))


def spatial_param_layout_size(mode: str) -> int:
    """Length of the flat parameter-feature vector: 15 bivariate, 19 multivariate."""
    return 15 if mode == BIVARIATE else 19


def spatial_param_vector(stats: RSCStats, pair: int) -> np.ndarray:
    """Flatten a pair's distribution parameters in a fixed order.

    Layout: placement means (4), placement variances (4), placement
    covariances (2 off-diagonal terms bivariate / 6 multivariate), person
    mean (2), person variances (2), person covariance (1). Null pairs carry
    zeros in the placement slots.
    """
    entry = stats.for_pair(pair)
    out = []
    if stats.mode == BIVARIATE:
        if entry.xy is None:
            out.extend([0.0] * 10)
        else:
            out.extend(entry.xy.mean.tolist() + entry.wh.mean.tolist())
            out.extend(np.diag(entry.xy.cov).tolist() + np.diag(entry.wh.cov).tolist())
            out.append(entry.xy.cov[0, 1])
            out.append(entry.wh.cov[0, 1])
    else:
        if entry.xywh is None:
            out.extend([0.0] * 14)
        else:
            out.extend(entry.xywh.mean.tolist())
            out.extend(np.diag(entry.xywh.cov).tolist())
            for i in range(4):
                for j in range(i + 1, 4):
                    out.append(entry.xywh.cov[i, j])
    out.extend(entry.person.mean.tolist())
    out.extend(np.diag(entry.person.cov).tolist())
    out.append(entry.person.cov[0, 1])
    return np.asarray(out, dtype=np.float64)


class SpatialParamEncoder(nn.Module):
    """Linear projection of the flat distribution-parameter vector to width d."""

    def __init__(self, mode: str, d: int):
        super().__init__()
        self.mode = mode
        self.project = nn.Linear(spatial_param_layout_size(mode), d)

    def forward(self, params: torch.Tensor) -> torch.Tensor:
        return self.project(params)


def _pair_stats_to_dict(entry: PairStats, mode: str, with_rsc: bool) -> dict:
    d: dict = {"count": entry.count, "fallback": entry.fallback, "person": entry.person.to_dict()}
    if with_rsc:
        if mode == BIVARIATE and entry.xy is not None:
            d["xy"] = entry.xy.to_dict()
            d["wh"] = entry.wh.to_dict()
        elif mode == MULTIVARIATE and entry.xywh is not None:
            d["xywh"] = entry.xywh.to_dict()
    return d


def _pair_stats_from_dict(d: dict) -> PairStats:
    return PairStats(
        person=GaussianParams.from_dict(d["person"]),
        xy=GaussianParams.from_dict(d["xy"]) if "xy" in d else None,
        wh=GaussianParams.from_dict(d["wh"]) if "wh" in d else None,
        xywh=GaussianParams.from_dict(d["xywh"]) if "xywh" in d else None,
        count=int(d.get("count", 0)),
        fallback=bool(d.get("fallback", False)),
    )


def stats_to_dict(stats: RSCStats, vocab: OAVocabulary) -> dict:
    return {
        "mode": stats.mode,
        "pairs": {
            vocab.pair_key(p): _pair_stats_to_dict(entry, stats.mode, with_rsc=True)
            for p, entry in sorted(stats.pairs.items())
        },
        "fallback": _pair_stats_to_dict(stats.fallback, stats.mode, with_rsc=True),
    }


def stats_from_dict(doc: dict, vocab: OAVocabulary) -> RSCStats:
    keys = {vocab.pair_key(p): p for p in range(vocab.n_pairs)}
    stats = RSCStats(mode=doc["mode"], fallback=_pair_stats_from_dict(doc["fallback"]))
    for key, entry in doc["pairs"].items():
        if key not in keys:
            raise ValueError(f"stats file pair {key!r} not in vocabulary")
        stats.pairs[keys[key]] = _pair_stats_from_dict(entry)
    missing = [vocab.pair_key(p) for p in range(vocab.n_pairs) if p not in stats.pairs]
    if missing:
        raise ValueError(f"stats file missing pairs: {missing}")
    return stats


def save_stats(stats: RSCStats, vocab: OAVocabulary, path: str | Path) -> None:
    Path(path).write_text(json.dumps(stats_to_dict(stats, vocab)))


def load_stats(path: str | Path, vocab: OAVocabulary) -> RSCStats:
    return stats_from_dict(json.loads(Path(path).read_text()), vocab)


def demo_layout_stats(vocab: OAVocabulary, mode: str = BIVARIATE,
                      spread: float = 0.05) -> RSCStats:
    """Hand-built statistics giving each pair a distinctive, learnable geometry.

    Interactive pairs place the object at a per-action offset around the
    human; null-object pairs differ in person aspect ratio. Used to seed the
    synthetic dataset generator.
    """
    action_offsets = {}
    interactive = [a for a in range(vocab.n_actions) if not vocab.actions[a].null_object]
    anchor = [(0.85, 0.30, -0.65, -0.65), (-0.55, -0.20, -0.55, -0.8), (0.25, 0.95, -0.6, -0.6),
              (0.95, -0.35, -0.75, -0.55), (-0.40, 0.80, -0.65, -0.75)]
    for i, a in enumerate(interactive):
        action_offsets[a] = anchor[i % len(anchor)]

    var_xy = spread ** 2
    var_wh = (2 * spread) ** 2
    var_person = 0.02 ** 2

    stats = RSCStats(mode=mode)
    order = 0
    for pair in range(vocab.n_pairs):
        obj, act = vocab.pairs[pair]
        if obj is None:
            # Null actions are told apart by person shape alone.
            tall = act % 2 == 0
            person_mean = np.array([0.14, 0.50]) if tall else np.array([0.42, 0.16])
            entry = PairStats(
                person=GaussianParams(person_mean, var_person * np.eye(2)), count=0)
            stats.pairs[pair] = entry
            continue
        dx, dy, dw, dh = action_offsets[act]
        # Nudge per object so same-action pairs are not perfectly identical.
        dx = dx + 0.06 * (order % 3)
        dy = dy - 0.05 * (order % 2)
        order += 1
        person_mean = np.array([0.24 + 0.02 * (obj % 3), 0.30 + 0.02 * (obj % 2)])
        entry = PairStats(person=GaussianParams(person_mean, var_person * np.eye(2)), count=0)
        if mode == BIVARIATE:
            entry.xy = GaussianParams(np.array([dx, dy]), var_xy * np.eye(2))
            entry.wh = GaussianParams(np.array([dw, dh]), var_wh * np.eye(2))
        else:
            mean = np.array([dx, dy, dw, dh])
            cov = np.diag([var_xy, var_xy, var_wh, var_wh])
            entry.xywh = GaussianParams(mean, cov)
        stats.pairs[pair] = entry

    # Pooled fallback mirrors an "average" interactive pair.
    fb = PairStats(person=GaussianParams(np.array([0.25, 0.30]), var_person * np.eye(2)))
    if mode == BIVARIATE:
        fb.xy = GaussianParams(np.array([0.3, 0.3]), var_xy * np.eye(2))
        fb.wh = GaussianParams(np.array([-0.8, -0.8]), var_wh * np.eye(2))
    else:
        fb.xywh = GaussianParams(np.array([0.3, 0.3, -0.8, -0.8]),
                                 np.diag([var_xy, var_xy, var_wh, var_wh]))
    stats.fallback = fb
    return stats
