"""Training loop, optimizer, LR schedule, checkpoints, and attention dumps.

The optimizer implements the decoupled-weight-decay Adam update rule
directly (bias-corrected first/second moments, weight decay applied to the
parameters rather than the gradients) with per-group learning rates so the
backbone can train slower than the rest. Everything is seeded: data order,
spatial resampling, and parameter init all derive from the run seed, so a
config + seed pair reproduces its loss trace exactly.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from .data import HOIDataset, load_dataset
from .evaluation import evaluate, predictions_to_detections, training_pair_counts
from .layers import load_checkpoint, save_checkpoint
from .matching import LossWeights, image_loss
from .model import HOIModel, ModelConfig, build_model
from .semantic import OneHotProvider, TableProvider, build_embedding_table
from .spatial import RSCStats, fit_stats, load_stats, stats_from_dict, stats_to_dict


@dataclass(frozen=True)
class TrainConfig:
    """Everything a run needs; serializes to/from a flat-ish JSON file."""

    seed: int = 0
    epochs: int = 100
    max_steps: int | None = None
    batch_size: int = 16
    lr: float = 1e-3
    backbone_lr_multiplier: float = 0.01
    weight_decay: float = 1e-4
    lr_drop_fraction: float = 65.0 / 150.0
    lr_drop_factor: float = 0.1
    weights: LossWeights = field(default_factory=LossWeights)
    model: ModelConfig = field(default_factory=ModelConfig)
    data_path: str = ""
    stats_path: str = ""
    embeddings_path: str = ""
    semantic_provider: str = "one-hot"
    spatial_resample: bool = True
    oracle_oa: bool = False
    train_null_boxes: bool = False
    eval_every: int = 0  # epochs between train-set mAP evaluations; 0 = final only

    def __post_init__(self):
        if self.lr <= 0 or self.batch_size < 1 or self.epochs < 0:
            raise ValueError("learning rate, batch size, and epochs must be positive")
        if not 0 < self.lr_drop_fraction:
            raise ValueError("lr_drop_fraction must be positive")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        if "weights" in d and isinstance(d["weights"], dict):
            d["weights"] = LossWeights(**d["weights"])
        if "model" in d and isinstance(d["model"], dict):
            d["model"] = ModelConfig(**d["model"])
        return cls(**d)


class DecoupledAdam:
    """Adam with decoupled weight decay, written out from the update rule.

    groups: list of {"params": [tensors], "lr": float}; weight decay is
    shared. ``lr_scale`` multiplies every group's base rate (LR schedule).
    """

    def __init__(self, groups: list[dict], weight_decay: float = 0.0,
                 betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8):
        self.groups = groups
        self.weight_decay = weight_decay
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.lr_scale = 1.0
        self.t = 0
        self.m = [[torch.zeros_like(p) for p in g["params"]] for g in groups]
        self.v = [[torch.zeros_like(p) for p in g["params"]] for g in groups]

    @torch.no_grad()
    def step(self) -> None:
        self.t += 1
        bc1 = 1.0 - self.beta1 ** self.t
        bc2 = 1.0 - self.beta2 ** self.t
        for gi, group in enumerate(self.groups):
            lr = group["lr"] * self.lr_scale
            for pi, p in enumerate(group["params"]):
                if p.grad is None:
                    continue
                g = p.grad
                m = self.m[gi][pi]
                v = self.v[gi][pi]
                m.mul_(self.beta1).add_(g, alpha=1.0 - self.beta1)
                v.mul_(self.beta2).addcmul_(g, g, value=1.0 - self.beta2)
                m_hat = m / bc1
                v_hat = v / bc2
                # Decay acts on the pre-step value, decoupled from the moments.
                p.mul_(1.0 - lr * self.weight_decay)
                p.add_(m_hat / (v_hat.sqrt() + self.eps), alpha=-lr)

    def zero_grad(self) -> None:
        for group in self.groups:
            for p in group["params"]:
                p.grad = None

    def state_dict(self) -> dict:
        return {"t": self.t, "m": self.m, "v": self.v}

    def load_state_dict(self, state: dict) -> None:
        self.t = state["t"]
        self.m = [[t.clone() for t in row] for row in state["m"]]
        self.v = [[t.clone() for t in row] for row in state["v"]]


def make_optimizer(model: HOIModel, config: TrainConfig) -> DecoupledAdam:
    backbone = list(model.backbone.parameters())
    backbone_ids = {id(p) for p in backbone}
    rest = [p for p in model.parameters() if id(p) not in backbone_ids]
    return DecoupledAdam(
        [{"params": rest, "lr": config.lr},
         {"params": backbone, "lr": config.lr * config.backbone_lr_multiplier}],
        weight_decay=config.weight_decay)


def lr_scale_at(epoch: int, config: TrainConfig) -> float:
    """Step-decay multiplier: one ``lr_drop_factor`` per crossed epoch fraction."""
    interval = config.lr_drop_fraction * config.epochs
    if interval <= 0:
        return 1.0
    return config.lr_drop_factor ** int(epoch / interval) if epoch > 0 else 1.0


def _oracle_pairs(ann, vocab) -> list[int]:
    pairs = []
    for inst in ann.hois:
        p = vocab.pair_id(inst.object_class, inst.action_class)
        if p not in pairs:
            pairs.append(p)
    return pairs


def build_semantic_table(config: TrainConfig, vocab) -> np.ndarray:
    if config.semantic_provider == "one-hot":
        provider = OneHotProvider(vocab)
    elif config.semantic_provider == "table":
        provider = TableProvider.from_file(config.embeddings_path, vocab)
    else:
        raise ValueError(f"unsupported training provider {config.semantic_provider!r}")
    dim, entries = build_embedding_table(vocab, provider)
    if dim != config.model.d_semantic:
        raise ValueError(
            f"provider width {dim} != configured d_semantic {config.model.d_semantic}")
    return np.stack([entries[vocab.pair_key(p)] for p in range(vocab.n_pairs)])


@dataclass
class TrainResult:
    model: HOIModel
    metrics: list[dict]
    best_map: float | None
    final_checkpoint: Path
    best_checkpoint: Path


def train_map(model: HOIModel, dataset: HOIDataset, *, oracle_oa: bool = False,
              scenario: int = 2, class_mode: str = "action") -> float:
    """Training-set mAP under deterministic evaluation-time sampling."""
    model.eval()
    detections = []
    with torch.no_grad():
        for ann in dataset.images:
            oracle = _oracle_pairs(ann, dataset.vocab) if oracle_oa else None
            out = model(ann.pixels, image_id=ann.image_id, oracle_pairs=oracle)
            detections.extend(predictions_to_detections(ann.image_id, out.predictions))
    model.train()
    report = evaluate(detections, dataset.images, dataset.vocab,
                      scenario=scenario, class_mode=class_mode)
    return report.map


def train(config: TrainConfig, out_dir: str | Path,
          dataset: HOIDataset | None = None,
          stats: RSCStats | None = None,
          resume: str | Path | None = None) -> TrainResult:
    """Run a full training job; returns the model plus metric records.

    Data order, spatial sampling, and init all derive from ``config.seed``.
    ``resume`` restores parameters, optimizer moments, and the epoch counter
    from an earlier final checkpoint, continuing the exact same trajectory.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    if dataset is None:
        dataset = load_dataset(config.data_path)
    vocab = dataset.vocab
    if stats is None:
        if config.stats_path:
            stats = load_stats(config.stats_path, vocab)
        else:
            stats = fit_stats(dataset, mode=config.model.stats_mode)

    torch.manual_seed(config.seed)
    table = build_semantic_table(config, vocab)
    model = build_model(config.model, vocab, stats, table, seed=config.seed)
    optimizer = make_optimizer(model, config)

    start_epoch = 0
    if resume is not None:
        bundle = load_checkpoint(resume)
        model.load_state_dict(bundle["state"])
        opt_state = bundle["extra"].get("optimizer")
        if opt_state is not None:
            optimizer.load_state_dict(opt_state)
        start_epoch = int(bundle["extra"].get("epoch", 0))

    weights = config.weights
    metrics: list[dict] = []
    metrics_path = out / "metrics.jsonl"
    best_map: float | None = None
    best_path = out / "best.pt"
    final_path = out / "final.pt"

    def checkpoint_extra(epoch: int, with_optimizer: bool) -> dict:
        extra = {
            "epoch": epoch,
            "vocab": vocab.to_dict(),
            "stats": stats_to_dict(stats, vocab),
            "train_config": config.to_dict(),
        }
        if with_optimizer:
            extra["optimizer"] = optimizer.state_dict()
        return extra

    def write_checkpoint(path: Path, epoch: int, with_optimizer: bool = False) -> None:
        save_checkpoint(path, model.state_dict(), config.model.to_dict(),
                        extra=checkpoint_extra(epoch, with_optimizer))

    n = len(dataset.images)
    if n == 0:
        raise ValueError("cannot train on an empty dataset")
    step = start_epoch * math.ceil(n / config.batch_size)
    stop = False
    log_lines = []
    model.train()
    epoch = start_epoch
    epochs_done = start_epoch
    for epoch in range(start_epoch, config.epochs):
        optimizer.lr_scale = lr_scale_at(epoch, config)
        order = np.random.default_rng([config.seed, 7919, epoch]).permutation(n)
        epoch_components: dict[str, float] = {}
        n_images = 0
        n_batches = 0
        for lo in range(0, n, config.batch_size):
            if config.max_steps is not None and step >= config.max_steps:
                stop = True
                break
            batch = order[lo:lo + config.batch_size]
            optimizer.zero_grad()
            total = None
            for idx in batch:
                ann = dataset.images[int(idx)]
                rng = (np.random.default_rng([config.seed, 104729, step, int(idx)])
                       if config.spatial_resample else None)
                oracle = _oracle_pairs(ann, vocab) if config.oracle_oa else None
                out_fwd = model(ann.pixels, image_id=ann.image_id, rng=rng,
                                oracle_pairs=oracle)
                result = image_loss(out_fwd.predictions, ann, vocab, weights,
                                    train_null_boxes=config.train_null_boxes)
                loss = result.total / len(batch)
                total = loss if total is None else total + loss
                for key, val in result.components.items():
                    epoch_components[key] = epoch_components.get(key, 0.0) + val
                n_images += 1
            total.backward()
            optimizer.step()
            step += 1
            n_batches += 1
        if n_batches:
            record = {"epoch": epoch, "step": step,
                      "lr_scale": optimizer.lr_scale,
                      **{k: v / n_images for k, v in epoch_components.items()}}
            if config.eval_every and (epoch + 1) % config.eval_every == 0:
                record["train_map"] = train_map(model, dataset,
                                                oracle_oa=config.oracle_oa)
                if best_map is None or record["train_map"] >= best_map:
                    best_map = record["train_map"]
                    write_checkpoint(best_path, epoch + 1)
            metrics.append(record)
            log_lines.append(json.dumps(record))
        if stop:
            # A stop before the first batch of this epoch leaves it untrained;
            # a mid-epoch stop counts the partial epoch (resume is then
            # approximate — exact continuation is only promised at epoch
            # boundaries).
            epochs_done = epoch if n_batches == 0 else epoch + 1
            break
        epochs_done = epoch + 1

    final_map = train_map(model, dataset, oracle_oa=config.oracle_oa)
    metrics.append({"epoch": epoch, "step": step, "train_map": final_map,
                    "final": True})
    log_lines.append(json.dumps(metrics[-1]))
    if best_map is None or final_map >= best_map:
        best_map = final_map
        write_checkpoint(best_path, epochs_done)
    write_checkpoint(final_path, epochs_done, with_optimizer=True)
    metrics_path.write_text("\n".join(log_lines) + "\n")
    return TrainResult(model=model, metrics=metrics, best_map=best_map,
                       final_checkpoint=final_path, best_checkpoint=best_path)


def load_model_from_checkpoint(path: str | Path) -> tuple[HOIModel, dict]:
    """Rebuild a ready-to-run model (stats, vocabulary, weights) from disk."""
    from .data import OAVocabulary

    bundle = load_checkpoint(path)
    model_config = ModelConfig.from_dict(bundle["config"])
    vocab = OAVocabulary.from_dict(bundle["extra"]["vocab"])
    stats = stats_from_dict(bundle["extra"]["stats"], vocab)
    model = HOIModel(model_config)
    model.sfg.set_stats(stats)
    model.set_pair_names([vocab.pair_key(p) for p in range(vocab.n_pairs)])
    model.load_state_dict(bundle["state"])
    model.eval()
    return model, bundle


def dump_attention(model: HOIModel, ann, out_dir: str | Path) -> dict:
    """Write last-decoder-layer grids and refiner cross-attention to disk.

    Per query q: ``decoder_attn_q{q}.csv`` (H x W floats) and a grayscale
    ``decoder_attn_q{q}.png``; plus ``qr_attn.csv`` (N_q x K) when the
    support path is active. Head-averaged rows are verified to sum to 1.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    model.eval()
    with torch.no_grad():
        result = model(ann.pixels, image_id=ann.image_id)
    grid = model.config.grid
    dec = result.decoder_attention[-1].mean(dim=0)  # (N_q, H*W)
    sums = dec.sum(dim=-1)
    if not torch.allclose(sums, torch.ones_like(sums), atol=1e-5):
        raise RuntimeError("decoder attention rows do not sum to 1")
    paths: dict = {"decoder_csv": [], "decoder_png": [], "qr_csv": None}
    for q in range(dec.shape[0]):
        attn = dec[q].reshape(grid, grid).cpu().numpy()
        csv_path = out / f"decoder_attn_q{q}.csv"
        np.savetxt(csv_path, attn, delimiter=",")
        png_path = out / f"decoder_attn_q{q}.png"
        lo, hi = float(attn.min()), float(attn.max())
        scale = (attn - lo) / (hi - lo) if hi > lo else np.zeros_like(attn)
        Image.fromarray((scale * 255).astype(np.uint8), mode="L").save(png_path)
        paths["decoder_csv"].append(csv_path)
        paths["decoder_png"].append(png_path)
    qr = [w for w in result.qr_attention if w is not None]
    if qr:
        cross = qr[-1].mean(dim=0).cpu().numpy()  # (N_q, K)
        qr_path = out / "qr_attn.csv"
        header = ",".join(model.pair_names[p] for p in result.selected_pairs)
        np.savetxt(qr_path, cross, delimiter=",", header=header, comments="")
        paths["qr_csv"] = qr_path
    paths["selected_pairs"] = result.selected_pairs
    return paths
