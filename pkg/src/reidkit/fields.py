"""Coarse human parsing labels from body-region field stacks.

A field stack is an ``H x W x F`` array of confidences in ``[0, 1]``.  With a
pose-estimator layout it holds 17 keypoint confidence fields followed by 19
limb affinity fields (COCO ordering).  A :class:`PartGrouping` folds those
channels into ``K`` body parts; the per-pixel max inside each group gives the
grouped tensor from which labels (``0`` = background, ``1..K`` = parts) and
fixed attention maps are derived.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
from PIL import Image
from sklearn.base import BaseEstimator, TransformerMixin

from .exceptions import InvalidGroupingError, NoTargetError, UnsupportedPresetError

KEYPOINT_NAMES = [
    "nose", "left_eye", "right_eye", "left_ear", "right_ear",
    "left_shoulder", "right_shoulder", "left_elbow", "right_elbow",
    "left_wrist", "right_wrist", "left_hip", "right_hip",
    "left_knee", "right_knee", "left_ankle", "right_ankle",
]

# COCO skeleton, 0-based keypoint indices.
SKELETON = [
    (15, 13), (13, 11), (16, 14), (14, 12), (11, 12), (5, 11), (6, 12),
    (5, 6), (5, 7), (6, 8), (7, 9), (8, 10), (1, 2), (0, 1), (0, 2),
    (1, 3), (2, 4), (3, 5), (4, 6),
]

FIELD_NAMES = KEYPOINT_NAMES + [
    f"{KEYPOINT_NAMES[a]}-{KEYPOINT_NAMES[b]}" for a, b in SKELETON
]
N_FIELDS = len(FIELD_NAMES)  # 36

DEFAULT_THRESHOLD = 0.5


def _limb(a, b):
    return 17 + SKELETON.index((a, b))


# Fine semantic regions, each a set of field indices; presets are unions of these.
_REGIONS = {
    "head": [0, 1, 2, 3, 4, _limb(1, 2), _limb(0, 1), _limb(0, 2), _limb(1, 3),
             _limb(2, 4), _limb(3, 5), _limb(4, 6)],
    "upper_torso": [5, 6, _limb(5, 6), _limb(5, 11), _limb(6, 12)],
    "lower_torso": [11, 12, _limb(11, 12)],
    "upper_right_arm": [_limb(6, 8), 8],
    "lower_right_arm": [_limb(8, 10), 10],
    "upper_left_arm": [_limb(5, 7), 7],
    "lower_left_arm": [_limb(7, 9), 9],
    "right_leg": [_limb(14, 12), 14, _limb(16, 14)],
    "left_leg": [_limb(13, 11), 13, _limb(15, 13)],
    "right_foot": [16],
    "left_foot": [15],
}
_COMPOSITE = {
    "torso": ["upper_torso", "lower_torso"],
    "right_arm": ["upper_right_arm", "lower_right_arm"],
    "left_arm": ["upper_left_arm", "lower_left_arm"],
    "arms": ["right_arm", "left_arm"],
    "legs": ["right_leg", "left_leg"],
    "feet": ["right_foot", "left_foot"],
    "lower_body": ["legs", "feet"],
    "middle_body": ["torso", "arms"],
    "upper_body": ["head", "torso", "arms"],
}

PRESETS = {
    2: ["upper_body", "lower_body"],
    3: ["head", "middle_body", "lower_body"],
    4: ["head", "torso", "arms", "lower_body"],
    5: ["head", "torso", "arms", "legs", "feet"],
    6: ["head", "torso", "right_arm", "left_arm", "legs", "feet"],
    8: ["head", "torso", "right_arm", "left_arm", "right_leg", "left_leg",
        "right_foot", "left_foot"],
    11: ["head", "upper_torso", "lower_torso", "upper_right_arm", "lower_right_arm",
         "upper_left_arm", "lower_left_arm", "right_leg", "left_leg",
         "right_foot", "left_foot"],
}


def _expand(name):
    if name in _REGIONS:
        return list(_REGIONS[name])
    return [i for sub in _COMPOSITE[name] for i in _expand(sub)]


@dataclass(frozen=True)
class PartGrouping:
    """Assignment of field channels to ``K`` body parts."""

    groups: tuple
    part_names: tuple
    n_fields: int = N_FIELDS

    def __post_init__(self):
        groups = tuple(tuple(int(i) for i in g) for g in self.groups)
        object.__setattr__(self, "groups", groups)
        object.__setattr__(self, "part_names", tuple(self.part_names))
        if len(groups) < 2:
            raise InvalidGroupingError("a grouping needs at least 2 parts")
        if len(self.part_names) != len(groups):
            raise InvalidGroupingError("one name per group required")
        if len(set(self.part_names)) != len(self.part_names):
            raise InvalidGroupingError("part names must be unique")
        seen = set()
        for g in groups:
            if not g:
                raise InvalidGroupingError("empty group")
            for i in g:
                if not 0 <= i < self.n_fields:
                    raise InvalidGroupingError(f"field index {i} out of range 0..{self.n_fields - 1}")
                if i in seen:
                    raise InvalidGroupingError(f"field index {i} appears in two groups")
                seen.add(i)

    @property
    def K(self):
        return len(self.groups)

    def part_of_field(self):
        """Array mapping each field channel to its part index (-1 if unused)."""
        out = np.full(self.n_fields, -1, dtype=np.int64)
        for k, g in enumerate(self.groups):
            out[list(g)] = k
        return out


def grouping_preset(K: int) -> PartGrouping:
    """Named grouping of the 36 pose fields into ``K`` parts."""
    if K not in PRESETS:
        raise UnsupportedPresetError(f"no grouping preset for K={K}; choose from {sorted(PRESETS)}")
    names = PRESETS[K]
    return PartGrouping(groups=[_expand(n) for n in names], part_names=names)


def _validate_stack(stack):
    stack = np.asarray(stack)
    if stack.ndim != 3 or min(stack.shape) < 1:
        raise ValueError(f"field stack must be H x W x F, got shape {stack.shape}")
    return stack


def group_max(stack, grouping: PartGrouping) -> np.ndarray:
    """Pixel-wise max of the stack channels within each group -> ``H x W x K``."""
    stack = _validate_stack(stack)
    F = stack.shape[2]
    for g in grouping.groups:
        if not g:
            raise InvalidGroupingError("empty group")
        if max(g) >= F or min(g) < 0:
            raise InvalidGroupingError(f"group {g} references channels beyond F={F}")
    return np.stack([stack[:, :, list(g)].max(axis=2) for g in grouping.groups], axis=2)


def labels_from_fields(E, threshold: float = DEFAULT_THRESHOLD) -> np.ndarray:
    """Parsing label map from grouped fields.

    Background where every channel is below ``threshold``; otherwise one plus
    the argmax channel, the lowest index winning ties.
    """
    if not 0.0 < threshold < 1.0:
        raise ValueError("threshold must lie in (0, 1)")
    E = np.asarray(E)
    labels = E.argmax(axis=2) + 1  # np.argmax returns the first maximum
    labels[E.max(axis=2) < threshold] = 0
    return labels.astype(np.uint8 if E.shape[2] < 255 else np.int64)


def fixed_attention(E) -> np.ndarray:
    """Channel-wise softmax of grouped fields, used as non-learnable attention."""
    E = np.asarray(E, dtype=np.float64)
    z = np.exp(E - E.max(axis=2, keepdims=True))
    return z / z.sum(axis=2, keepdims=True)


def head_position(stack, grouping: PartGrouping, threshold: float = DEFAULT_THRESHOLD):
    """Centroid ``(x, y)`` of pixels where the head fields exceed ``threshold``.

    With the 36-field pose layout the head fields are fixed whatever the
    grouping (a coarse preset may merge the head into "upper body"); for
    other layouts the first group is taken as the head.  Returns ``None`` when
    no head pixel passes the threshold.
    """
    stack = _validate_stack(stack)
    if stack.shape[2] == N_FIELDS:
        head = stack[:, :, _REGIONS["head"]].max(axis=2)
    else:
        head = group_max(stack, grouping)[:, :, 0]
    ys, xs = np.nonzero(head >= threshold)
    if len(xs) == 0:
        return None
    return float(xs.mean()), float(ys.mean())


def select_target(heads: Sequence, box) -> int:
    """Index of the person whose head is closest to the top center of the box.

    ``heads`` holds ``(x, y)`` pixel coordinates (or ``None`` for persons whose
    head was not found); ``box`` is ``(height, width)``.  Ties go to the lowest
    index.
    """
    if len(heads) == 0:
        raise NoTargetError("no person to select")
    H, W = box
    best, best_d = None, np.inf
    for i, h in enumerate(heads):
        if h is None:
            continue
        d = np.hypot(h[0] - W / 2.0, h[1])
        if d < best_d:
            best, best_d = i, d
    if best is None:
        raise NoTargetError("no person has a detectable head")
    return best


def target_labels(person_stacks, grouping: PartGrouping, threshold: float = DEFAULT_THRESHOLD):
    """Labels of the target person when several persons were detected.

    Each entry of ``person_stacks`` is one person's field stack.  Only the
    selected person's labels are kept.  Returns ``(labels, target_index)``.
    """
    if len(person_stacks) == 0:
        raise NoTargetError("no person to select")
    heads = [head_position(s, grouping, threshold) for s in person_stacks]
    idx = select_target(heads, np.asarray(person_stacks[0]).shape[:2])
    return labels_from_fields(group_max(person_stacks[idx], grouping), threshold), idx


def resize_bilinear(arr, size) -> np.ndarray:
    """Bilinear resize of an ``H x W x C`` array to ``size = (h, w)`` (pixel-center aligned)."""
    import torch
    import torch.nn.functional as F

    arr = np.asarray(arr)
    if arr.shape[:2] == tuple(size):
        return arr.copy()
    t = torch.from_numpy(np.ascontiguousarray(arr.transpose(2, 0, 1), dtype=np.float64))[None]
    out = F.interpolate(t, size=tuple(size), mode="bilinear", align_corners=False)
    return out[0].numpy().transpose(1, 2, 0).astype(arr.dtype)


class FieldLabeler(TransformerMixin, BaseEstimator):
    """Turn field stacks into parsing label maps (or fixed attention maps).

    Parameters
    ----------
    n_parts : int
        Grouping preset to use.
    threshold : float
        Background threshold on the grouped fields.
    output_size : tuple or None
        Resize stacks bilinearly to ``(h, w)`` before labelling.
    output : {"labels", "attention"}
    """

    def __init__(self, n_parts=5, threshold=DEFAULT_THRESHOLD, output_size=None, output="labels"):
        self.n_parts = n_parts
        self.threshold = threshold
        self.output_size = output_size
        self.output = output

    def fit(self, X=None, y=None):
        self.grouping_ = grouping_preset(self.n_parts)
        return self

    def transform(self, X):
        from sklearn.utils.validation import check_is_fitted

        check_is_fitted(self, "grouping_")
        if self.output not in ("labels", "attention"):
            raise ValueError(f"unknown output {self.output!r}")
        out = []
        for stack in X:
            stack = _validate_stack(stack)
            if self.output_size is not None:
                stack = resize_bilinear(stack, self.output_size)
            E = group_max(stack, self.grouping_)
            out.append(labels_from_fields(E, self.threshold) if self.output == "labels"
                       else fixed_attention(E))
        return np.stack(out)


# ---------------------------------------------------------------- file I/O

FSTK_MAGIC = b"FSTK"


def write_fstk(path, stack):
    """Little-endian: ``FSTK`` magic, uint32 H, W, F, then float32 data (h, w, channel)."""
    stack = _validate_stack(stack)
    H, W, F = stack.shape
    with open(path, "wb") as fh:
        fh.write(FSTK_MAGIC)
        fh.write(struct.pack("<III", H, W, F))
        fh.write(np.ascontiguousarray(stack, dtype="<f4").tobytes())


def read_fstk(path) -> np.ndarray:
    data = Path(path).read_bytes()
    if data[:4] != FSTK_MAGIC:
        raise ValueError(f"{path}: not a field stack file")
    H, W, F = struct.unpack("<III", data[4:16])
    body = np.frombuffer(data, dtype="<f4", offset=16)
    if body.size != H * W * F:
        raise ValueError(f"{path}: expected {H * W * F} values, found {body.size}")
    return body.reshape(H, W, F).astype(np.float32)


def write_label_png(path, labels):
    labels = np.asarray(labels)
    if labels.min() < 0 or labels.max() > 255:
        raise ValueError("label values must fit in 8 bits")
    Image.fromarray(labels.astype(np.uint8), mode="L").save(path, format="PNG")


def read_label_png(path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im, dtype=np.uint8).copy()
