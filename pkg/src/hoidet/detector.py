"""Estimator facade: scikit-learn fit/predict/score over the full pipeline.

``HOIDetector`` exposes the detector like any sklearn estimator — flat
constructor hyperparameters, ``get_params``/``set_params``, trailing
underscores for fitted state — while delegating the real work to the
functional modules. ``fit`` takes a dataset (object or path), ``predict``
returns per-image detection lists, ``score`` is scenario-2 action mAP.
"""

from __future__ import annotations

import tempfile
from pathlib import Path

import torch
from sklearn.base import BaseEstimator
from sklearn.exceptions import NotFittedError

from .data import HOIDataset, ImageAnnotation, load_dataset
from .evaluation import Detection, evaluate, predictions_to_detections
from .matching import LossWeights
from .model import ModelConfig
from .training import TrainConfig, load_model_from_checkpoint, train


def as_dataset(X) -> HOIDataset:
    """Input validation: accept a dataset object or a path to one."""
    if isinstance(X, HOIDataset):
        return X
    if isinstance(X, (str, Path)):
        return load_dataset(X)
    raise TypeError(f"expected a dataset or path, got {type(X).__name__}")


def as_images(X, vocab) -> list[ImageAnnotation]:
    """Input validation: images drawn from a dataset, a list, or one annotation."""
    if isinstance(X, HOIDataset):
        if vocab is not None and X.vocab.to_dict() != vocab.to_dict():
            raise ValueError("dataset vocabulary differs from the fitted one")
        return X.images
    if isinstance(X, ImageAnnotation):
        return [X]
    if isinstance(X, (list, tuple)):
        for item in X:
            if not isinstance(item, ImageAnnotation):
                raise TypeError("expected image annotations")
        return list(X)
    if isinstance(X, (str, Path)):
        return as_images(load_dataset(X), vocab)
    raise TypeError(f"cannot interpret {type(X).__name__} as images")


class HOIDetector(BaseEstimator):
    """Trainable interaction detector with a scikit-learn estimator surface."""

    def __init__(self, d: int = 32, heads: int = 4, enc_layers: int = 2,
                 qr_layers: int = 2, dec_layers: int = 2, n_queries: int = 10,
                 k_support: int = 4, patch_size: int = 8,
                 aggregation: str = "multiply", spatial_mode: str = "map",
                 stats_mode: str = "bivariate", semantic_provider: str = "one-hot",
                 decoder_self_attention: bool = False, epochs: int = 100,
                 max_steps: int | None = None, batch_size: int = 16,
                 lr: float = 1e-3, weight_decay: float = 1e-4,
                 oracle_oa: bool = False, train_null_boxes: bool = False,
                 seed: int = 0):
        self.d = d
        self.heads = heads
        self.enc_layers = enc_layers
        self.qr_layers = qr_layers
        self.dec_layers = dec_layers
        self.n_queries = n_queries
        self.k_support = k_support
        self.patch_size = patch_size
        self.aggregation = aggregation
        self.spatial_mode = spatial_mode
        self.stats_mode = stats_mode
        self.semantic_provider = semantic_provider
        self.decoder_self_attention = decoder_self_attention
        self.epochs = epochs
        self.max_steps = max_steps
        self.batch_size = batch_size
        self.lr = lr
        self.weight_decay = weight_decay
        self.oracle_oa = oracle_oa
        self.train_null_boxes = train_null_boxes
        self.seed = seed

    def _train_config(self, dataset: HOIDataset) -> TrainConfig:
        vocab = dataset.vocab
        image_size = dataset.images[0].height if dataset.images else 64
        if self.semantic_provider != "one-hot":
            raise ValueError("the estimator facade trains with the one-hot provider; "
                             "use the training module directly for others")
        model = ModelConfig(
            d=self.d, heads=self.heads, enc_layers=self.enc_layers,
            qr_layers=self.qr_layers, dec_layers=self.dec_layers,
            n_queries=self.n_queries, k_support=self.k_support,
            patch_size=self.patch_size, image_size=image_size,
            n_objects=vocab.n_objects, n_actions=vocab.n_actions,
            n_pairs=vocab.n_pairs, d_semantic=vocab.n_pairs,
            aggregation=self.aggregation, spatial_mode=self.spatial_mode,
            stats_mode=self.stats_mode,
            decoder_self_attention=self.decoder_self_attention)
        return TrainConfig(
            seed=self.seed, epochs=self.epochs, max_steps=self.max_steps,
            batch_size=self.batch_size, lr=self.lr, weight_decay=self.weight_decay,
            weights=LossWeights(), model=model,
            semantic_provider=self.semantic_provider,
            oracle_oa=self.oracle_oa, train_null_boxes=self.train_null_boxes)

    def fit(self, X, y=None) -> "HOIDetector":
        """Train on a dataset (``y`` is ignored; labels live in the dataset)."""
        dataset = as_dataset(X)
        if not dataset.images:
            raise ValueError("cannot fit on an empty dataset")
        config = self._train_config(dataset)
        with tempfile.TemporaryDirectory(prefix="hoidet-fit-") as tmp:
            result = train(config, tmp, dataset=dataset)
        self.model_ = result.model
        self.vocab_ = dataset.vocab
        self.train_config_ = config
        self.metrics_ = result.metrics
        self.train_map_ = result.best_map
        return self

    def _check_fitted(self):
        if not hasattr(self, "model_"):
            raise NotFittedError("this HOIDetector instance is not fitted yet")

    def predict(self, X) -> list[list[Detection]]:
        """Per-image detection lists, aligned with the input order."""
        self._check_fitted()
        images = as_images(X, self.vocab_)
        out = []
        self.model_.eval()
        with torch.no_grad():
            for ann in images:
                fwd = self.model_(ann.pixels, image_id=ann.image_id)
                out.append(predictions_to_detections(ann.image_id, fwd.predictions))
        return out

    def score(self, X, y=None) -> float:
        """Scenario-2 action-level mAP on the given dataset."""
        self._check_fitted()
        images = as_images(X, self.vocab_)
        detections = [d for per_image in self.predict(images) for d in per_image]
        report = evaluate(detections, images, self.vocab_,
                          scenario=2, class_mode="action")
        return report.map


def load_detector(checkpoint: str | Path) -> HOIDetector:
    """Rebuild a fitted estimator from a training checkpoint."""
    from .data import OAVocabulary

    model, bundle = load_model_from_checkpoint(checkpoint)
    raw = bundle["extra"].get("train_config", {})
    est = HOIDetector()
    if raw:
        cfg = TrainConfig.from_dict(raw)
        est.set_params(
            d=cfg.model.d, heads=cfg.model.heads, enc_layers=cfg.model.enc_layers,
            qr_layers=cfg.model.qr_layers, dec_layers=cfg.model.dec_layers,
            n_queries=cfg.model.n_queries, k_support=cfg.model.k_support,
            patch_size=cfg.model.patch_size, aggregation=cfg.model.aggregation,
            spatial_mode=cfg.model.spatial_mode, stats_mode=cfg.model.stats_mode,
            semantic_provider=cfg.semantic_provider, epochs=cfg.epochs,
            max_steps=cfg.max_steps, batch_size=cfg.batch_size, lr=cfg.lr,
            weight_decay=cfg.weight_decay, seed=cfg.seed)
        est.train_config_ = cfg
    est.model_ = model
    est.vocab_ = OAVocabulary.from_dict(bundle["extra"]["vocab"])
    est.metrics_ = []
    est.train_map_ = None
    return est
