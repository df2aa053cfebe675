"""scikit-learn style estimator around the part-attention model.

``PartReID().fit(X, y, masks=...)`` trains on images ``X`` (``N x H x W x 3``),
identity labels ``y`` and parsing labels ``masks``; :meth:`PartReID.embed`
returns per-image embeddings and visibility flags ready for matching.
"""

from __future__ import annotations

import numpy as np
import torch
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted, column_or_1d

from . import objectives as O
from .exceptions import InvalidConfigError, ShapeError
from .net import BackboneConfig, NetConfig
from .retrieval import EmbeddingSet
from .synthgen import SplitArrays
from .training import TOY_SCHEDULE, Schedule, TrainConfig, Trainer


def check_images(X, size=None):
    """Validate an image batch ``N x H x W x 3`` (uint8 or floats in [0, 1])."""
    X = check_array(X, allow_nd=True, dtype=None, ensure_min_samples=1)
    if X.ndim != 4 or X.shape[-1] != 3:
        raise ShapeError(f"expected N x H x W x 3 images, got {X.shape}")
    if size is not None and tuple(X.shape[1:3]) != tuple(size):
        raise ShapeError(f"expected images of size {tuple(size)}, got {X.shape[1:3]}")
    if X.dtype != np.uint8:
        X = X.astype(np.float32)
        if X.min() < 0 or X.max() > 1:
            raise ValueError("float images must lie in [0, 1]")
    return X


def check_masks(masks, n_images, size, K):
    masks = check_array(masks, allow_nd=True, dtype=None)
    if masks.shape != (n_images, *size):
        raise ShapeError(f"masks must be {(n_images, *size)}, got {masks.shape}")
    if not np.issubdtype(masks.dtype, np.integer) or masks.min() < 0 or masks.max() > K:
        raise ValueError(f"mask labels must be integers in 0..{K}")
    return masks.astype(np.uint8)


def check_grouped_fields(fields, n_images, size, K):
    fields = check_array(fields, allow_nd=True, dtype=np.float32)
    if fields.shape != (n_images, *size, K):
        raise ShapeError(f"grouped fields must be {(n_images, *size, K)}, got {fields.shape}")
    return fields


class PartReID(TransformerMixin, BaseEstimator):
    """Body-part attention re-identification model.

    Parameters mirror :class:`~reidkit.training.TrainConfig` and
    :class:`~reidkit.objectives.LossHyperParams`; ``loss`` is a loss-grid row
    name or a :class:`~reidkit.objectives.LossConfig`.
    """

    def __init__(self, n_parts=5, channels=(16, 32, 64), convs_per_block=2, loss="GiLt",
                 part_triplet_mode="averaged", label_smoothing=0.1, margin=0.3, attention_weight=O.TOY_ATTENTION_WEIGHT,
                 epochs=30, schedule=None, P=16, Kinst=4, pad=2, erase_prob=0.5, erase_area=(0.02, 0.4),
                 weight_decay=5e-4, visibility_threshold=0.4, fixed_attention=False, dtype="float32",
                 random_state=0):
        self.n_parts = n_parts
        self.channels = channels
        self.convs_per_block = convs_per_block
        self.loss = loss
        self.part_triplet_mode = part_triplet_mode
        self.label_smoothing = label_smoothing
        self.margin = margin
        self.attention_weight = attention_weight
        self.epochs = epochs
        self.schedule = schedule
        self.P = P
        self.Kinst = Kinst
        self.pad = pad
        self.erase_prob = erase_prob
        self.erase_area = erase_area
        self.weight_decay = weight_decay
        self.visibility_threshold = visibility_threshold
        self.fixed_attention = fixed_attention
        self.dtype = dtype
        self.random_state = random_state

    def _loss_config(self):
        cfg = self.loss
        if isinstance(cfg, str):
            if cfg not in O.LOSS_GRID_ROWS:
                raise InvalidConfigError(f"unknown loss grid row {cfg!r}")
            cfg = O.LOSS_GRID_ROWS[cfg]
        return O.LossConfig(cfg.id_on, cfg.tri_on, self.part_triplet_mode)

    def _train_config(self):
        schedule = self.schedule if self.schedule is not None else TOY_SCHEDULE
        if isinstance(schedule, dict):
            schedule = Schedule(**schedule)
        return TrainConfig(epochs=self.epochs, schedule=schedule, P=self.P, Kinst=self.Kinst, pad=self.pad,
                           erase_prob=self.erase_prob, erase_area=tuple(self.erase_area),
                           weight_decay=self.weight_decay, seed=int(self.random_state or 0), dtype=self.dtype,
                           fixed_attention=self.fixed_attention).validate()

    def fit(self, X, y, masks=None, fields=None, callback=None):
        """Train on images ``X`` with identities ``y``.

        ``masks`` (``N x H x W`` in ``0..K``) supervise the attention; with
        ``fixed_attention`` the grouped field stacks ``fields``
        (``N x H x W x K``) are required instead.  ``callback(record)`` is
        called after every epoch.
        """
        X = check_images(X)
        y = column_or_1d(y, warn=True)
        if len(y) != len(X):
            raise ShapeError(f"{len(X)} images but {len(y)} labels")
        size = X.shape[1:3]
        K = int(self.n_parts)
        if masks is None:
            if not self.fixed_attention:
                raise ValueError("masks are required unless fixed_attention is set")
            masks = np.zeros((len(X), *size), np.uint8)
        masks = check_masks(masks, len(X), size, K)
        if self.fixed_attention:
            if fields is None:
                raise ValueError("fixed_attention needs grouped fields")
            fields = check_grouped_fields(fields, len(X), size, K)
        self.classes_, labels = np.unique(y, return_inverse=True)
        if len(self.classes_) < 2:
            raise ValueError("need at least two identities")
        net = NetConfig(n_parts=K, visibility_threshold=self.visibility_threshold,
                        backbone=BackboneConfig(channels=tuple(self.channels), convs_per_block=self.convs_per_block,
                                                input_size=tuple(size)))
        hp = O.LossHyperParams(self.label_smoothing, self.margin, self.attention_weight)
        self.trainer_ = Trainer(net, len(self.classes_), self._loss_config(), hp, self._train_config())
        data = SplitArrays([str(i) for i in range(len(X))], X, np.asarray(y), np.zeros(len(X), np.int64),
                           masks, np.ones((len(X), K), bool), fields)
        for _ in range(self.epochs):
            record = self.trainer_.run_epoch(data, labels)
            if callback is not None:
                callback(record)
        self.history_ = list(self.trainer_.history)
        self.input_size_ = tuple(size)
        return self

    def _outputs(self, X, fields=None):
        check_is_fitted(self, "trainer_")
        X = check_images(X, self.input_size_)
        if fields is not None:
            fields = check_grouped_fields(fields, len(X), self.input_size_, self.n_parts)
        return list(self.trainer_.forward_eval(X, fields))

    def embed(self, X, fields=None, ids=None, cams=None, files=None) -> EmbeddingSet:
        """Foreground plus part embeddings and their visibility flags."""
        outs = self._outputs(X, fields)
        emb = torch.cat([torch.cat([o.f_f[:, None], o.parts], dim=1) for o in outs]).double().numpy()
        vis = torch.cat([torch.cat([o.v[:, 1:2], o.v[:, 3:]], dim=1) for o in outs]).numpy()
        n = len(emb)
        return EmbeddingSet(list(files) if files is not None else [str(i) for i in range(n)],
                            np.asarray(ids if ids is not None else np.full(n, -1)),
                            np.asarray(cams if cams is not None else np.zeros(n, np.int64)), emb, vis)

    def transform(self, X, fields=None):
        """Flattened ``N x (K+1)·C`` embeddings (foreground first, then parts)."""
        e = self.embed(X, fields).emb
        return e.reshape(len(e), -1)

    def predict_parsing(self, X, fields=None):
        """Argmax of the attention maps at feature-map resolution (``N x H' x W'``)."""
        return torch.cat([o.M.argmax(dim=1) for o in self._outputs(X, fields)]).numpy().astype(np.uint8)

    def attention_maps(self, X, fields=None):
        return torch.cat([o.M for o in self._outputs(X, fields)]).double().numpy()
