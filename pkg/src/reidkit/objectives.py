"""Training objectives: part attention loss, identity loss, triplet losses and GiLt.

The loss-placement grid is expressed by :class:`LossConfig`: which embeddings
(``g``, ``f``, ``c``, ``parts``) receive an identity loss and which receive a
triplet loss.  ``LOSS_GRID_ROWS`` enumerates the named configurations of the
ablation grid.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from .exceptions import InvalidConfigError, InvalidLabelError, NoNegativesError, ShapeError

EMBEDDINGS = ("g", "f", "c", "parts")


@dataclass
class LossHyperParams:
    label_smoothing: float = 0.1
    margin: float = 0.3
    attention_weight: float = 0.35

    def __post_init__(self):
        if not 0.0 <= self.label_smoothing < 1.0:
            raise InvalidConfigError("label_smoothing must lie in [0, 1)")
        if self.margin < 0 or self.attention_weight < 0:
            raise InvalidConfigError("margin and attention_weight must be non-negative")


# The attention loss is a per-pixel mean here; at 0.35 the part maps of the small
# toy backbone underfit, so toy runs use a larger weight.
TOY_ATTENTION_WEIGHT = 2.0


def toy_hyperparams():
    return LossHyperParams(attention_weight=TOY_ATTENTION_WEIGHT)


@dataclass
class LossConfig:
    id_on: tuple = ("g", "f", "c")
    tri_on: tuple = ("parts",)
    part_triplet_mode: str = "averaged"

    def __post_init__(self):
        self.id_on = tuple(e for e in EMBEDDINGS if e in set(self.id_on))
        self.tri_on = tuple(e for e in EMBEDDINGS if e in set(self.tri_on))
        if not self.id_on and not self.tri_on:
            raise InvalidConfigError("at least one loss must be enabled")
        if self.part_triplet_mode not in ("averaged", "per-part"):
            raise InvalidConfigError(f"unknown part_triplet_mode {self.part_triplet_mode!r}")

    def to_dict(self):
        return {"id_on": list(self.id_on), "tri_on": list(self.tri_on),
                "part_triplet_mode": self.part_triplet_mode}

    @classmethod
    def from_dict(cls, d):
        unknown = set(d) - {"id_on", "tri_on", "part_triplet_mode"}
        bad = (set(d.get("id_on", ())) | set(d.get("tri_on", ()))) - set(EMBEDDINGS)
        if unknown or bad:
            raise InvalidConfigError(f"invalid loss config entries: {sorted(unknown | bad)}")
        return cls(**d)


def _row(id_on, tri_on):
    return LossConfig(id_on=tuple(id_on.split()), tri_on=tuple(tri_on.split()))


GILT = LossConfig()
LOSS_GRID_ROWS = {
    "GiLt": _row("g f c", "parts"),
    "PCB": _row("parts", ""),
    "1": _row("parts", "g f c"),
    "2": _row("g f c parts", "g f c parts"),
    "3": _row("g f c parts", ""),
    "4": _row("", "g f c parts"),
    "5": _row("g f c parts", "parts"),
    "6": _row("g f", "parts"),
    "7": _row("g c", "parts"),
    "8": _row("f c", "parts"),
    "9": _row("g f c", "c parts"),
    "10": _row("g f c", "f parts"),
    "11": _row("g f c", "g parts"),
    "12": _row("g f c", "c"),
}


# ---------------------------------------------------------------- attention loss

def downsample_labels(Y, size):
    """Majority vote of each block of a ``B x H x W`` label map; ties -> lowest label."""
    Y = torch.as_tensor(Y).long()
    H, W = Y.shape[-2:]
    h, w = size
    if (H, W) == (h, w):
        return Y
    if H % h or W % w:
        rows = (torch.arange(h) * H // h + H // (2 * h)).clamp_max(H - 1)
        cols = (torch.arange(w) * W // w + W // (2 * w)).clamp_max(W - 1)
        return Y[..., rows[:, None], cols[None, :]]
    n = int(Y.max()) + 1 if Y.numel() else 1
    onehot = F.one_hot(Y, n).permute(0, 3, 1, 2).float()
    counts = F.avg_pool2d(onehot, (H // h, W // w))
    return counts.argmax(dim=1)


def _smoothed_targets(labels, n_classes, eps):
    q = torch.full((*labels.shape, n_classes), eps / n_classes, dtype=torch.float64)
    q.scatter_(-1, labels.unsqueeze(-1), 1.0 - (n_classes - 1) / n_classes * eps)
    return q


def part_attention_loss(M, Y, eps=0.1):
    """Label-smoothed pixel-wise cross-entropy between attention ``M`` and labels ``Y``.

    ``M`` is ``B x (K+1) x H x W`` probabilities, ``Y`` is ``B x H x W`` in
    ``0..K``.  Mean over pixels and batch.
    """
    Y = torch.as_tensor(Y, device=M.device).long()
    n = M.shape[1]
    if Y.shape != (M.shape[0], *M.shape[2:]):
        raise ShapeError(f"labels {tuple(Y.shape)} do not match attention maps {tuple(M.shape)}")
    if Y.numel() and (Y.min() < 0 or Y.max() >= n):
        raise InvalidLabelError(f"labels must lie in 0..{n - 1}")
    logp = torch.log(M.clamp_min(torch.finfo(M.dtype).tiny)).movedim(1, -1)
    q = _smoothed_targets(Y, n, eps).to(M.dtype)
    return -(q * logp).sum(dim=-1).mean()


# ---------------------------------------------------------------- identity loss

class IdentityHead(nn.Module):
    """Feature normalization neck followed by a bias-free linear classifier."""

    def __init__(self, dim, n_classes):
        super().__init__()
        self.neck = nn.BatchNorm1d(dim)
        self.neck.bias.requires_grad_(False)
        self.classifier = nn.Linear(dim, n_classes, bias=False)
        nn.init.normal_(self.classifier.weight, std=0.001)

    @property
    def n_classes(self):
        return self.classifier.out_features

    def forward(self, f):
        return self.classifier(self.neck(f))


def smoothed_cross_entropy(logits, ids, eps=0.1):
    ids = torch.as_tensor(ids, device=logits.device).long()
    n = logits.shape[-1]
    if ids.numel() and (ids.min() < 0 or ids.max() >= n):
        raise InvalidLabelError(f"identity labels must lie in 0..{n - 1}")
    q = _smoothed_targets(ids, n, eps).to(logits.dtype)
    return -(q * torch.log_softmax(logits, dim=-1)).sum(dim=-1).mean()


def identity_loss(f, ids, head: IdentityHead, eps=0.1):
    return smoothed_cross_entropy(head(f), ids, eps)


# ---------------------------------------------------------------- triplet losses

def _safe_norm(diff):
    sq = (diff * diff).sum(dim=-1)
    pos = sq > 0
    return torch.where(pos, torch.sqrt(torch.where(pos, sq, torch.ones_like(sq))), torch.zeros_like(sq))


def pairwise_dist(x):
    """Euclidean distance matrix of ``B x D`` embeddings."""
    return _safe_norm(x[:, None, :] - x[None, :, :])


def part_avg_dist(a, b):
    """Mean over parts of the Euclidean distance between ``K x C`` part embeddings."""
    if a.shape != b.shape:
        raise ShapeError(f"part embeddings differ in shape: {tuple(a.shape)} vs {tuple(b.shape)}")
    return _safe_norm(a - b).mean(dim=-1)


def part_avg_dist_matrix(parts):
    """``B x B`` part-averaged distances for ``B x K x C`` part embeddings."""
    return _safe_norm(parts[:, None] - parts[None, :]).mean(dim=-1)


def batch_hard_from_dist(dist, ids, margin):
    """Batch-hard hinge over a distance matrix; mean over anchors.

    The hardest positive excludes the anchor itself (an anchor with no other
    positive gets ``d_ap = 0``).
    """
    ids = torch.as_tensor(ids, device=dist.device)
    same = ids[:, None] == ids[None, :]
    if same.all():
        raise NoNegativesError("batch holds a single identity")
    eye = torch.eye(len(ids), dtype=torch.bool, device=dist.device)
    pos = same & ~eye
    zero = torch.zeros((), dtype=dist.dtype, device=dist.device)
    d_ap = torch.where(pos, dist, zero).amax(dim=1)
    inf = torch.full((), float("inf"), dtype=dist.dtype, device=dist.device)
    d_an = torch.where(~same, dist, inf).amin(dim=1)
    hinge = F.relu(d_ap - d_an + margin)
    # anchors without any negative cannot occur once the single-id case is excluded
    return hinge.mean()


def part_averaged_triplet(parts, ids, margin=0.3):
    """Batch-hard triplet loss on part-averaged distances of ``B x K x C`` embeddings."""
    return batch_hard_from_dist(part_avg_dist_matrix(parts), ids, margin)


def standard_triplet(f, ids, margin=0.3):
    """Batch-hard triplet loss on one ``B x D`` embedding."""
    return batch_hard_from_dist(pairwise_dist(f), ids, margin)


def per_part_triplet(parts, ids, margin=0.3):
    """Independent batch-hard triplet per part, averaged over parts."""
    return torch.stack([standard_triplet(parts[:, k], ids, margin) for k in range(parts.shape[1])]).mean()


# ---------------------------------------------------------------- composition

class ReIDLoss(nn.Module):
    """Configurable sum of identity and triplet terms plus the attention loss.

    Holds one :class:`IdentityHead` per identity-supervised holistic embedding
    and, when parts receive an identity loss, one head per part (their losses
    are averaged into a single term).
    """

    def __init__(self, n_parts, dim, n_classes, loss_config: LossConfig | None = None,
                 hp: LossHyperParams | None = None):
        super().__init__()
        self.loss_config = loss_config or LossConfig()
        self.hp = hp or LossHyperParams()
        self.n_parts, self.dim, self.n_classes = n_parts, dim, n_classes
        dims = {"g": dim, "f": dim, "c": dim * n_parts}
        self.heads = nn.ModuleDict({e: IdentityHead(dims[e], n_classes)
                                    for e in self.loss_config.id_on if e != "parts"})
        if "parts" in self.loss_config.id_on:
            self.part_heads = nn.ModuleList(IdentityHead(dim, n_classes) for _ in range(n_parts))
        else:
            self.part_heads = nn.ModuleList()

    def reid_terms(self, out, ids):
        """Named identity and triplet terms for a batch of model outputs."""
        emb = out.embeddings() if hasattr(out, "embeddings") else out
        eps, margin = self.hp.label_smoothing, self.hp.margin
        terms = {}
        for e in self.loss_config.id_on:
            if e == "parts":
                terms["id_parts"] = torch.stack([
                    identity_loss(emb["parts"][:, k], ids, head, eps) for k, head in enumerate(self.part_heads)
                ]).mean()
            else:
                terms[f"id_{e}"] = identity_loss(emb[e], ids, self.heads[e], eps)
        for e in self.loss_config.tri_on:
            if e == "parts":
                fn = part_averaged_triplet if self.loss_config.part_triplet_mode == "averaged" else per_part_triplet
                terms["tri_parts"] = fn(emb["parts"], ids, margin)
            else:
                terms[f"tri_{e}"] = standard_triplet(emb[e], ids, margin)
        return terms

    def forward(self, out, ids, Y=None, attention=True):
        """Return ``(total, terms)``; the attention term needs ``Y`` at map resolution."""
        terms = self.reid_terms(out, ids)
        total = sum(terms.values())
        if attention and Y is not None and self.hp.attention_weight > 0:
            terms["pa"] = part_attention_loss(out.M, Y, self.hp.label_smoothing)
            total = total + self.hp.attention_weight * terms["pa"]
        return total, terms


def gilt_loss(out, ids, heads, hp: LossHyperParams | None = None):
    """Identity loss on ``f_g``, ``f_f``, ``f_c`` plus part-averaged triplet on the parts.

    ``heads`` maps ``"g"``, ``"f"``, ``"c"`` to :class:`IdentityHead` objects.
    """
    hp = hp or LossHyperParams()
    emb = out.embeddings() if hasattr(out, "embeddings") else out
    ident = sum(identity_loss(emb[e], ids, heads[e], hp.label_smoothing) for e in ("g", "f", "c"))
    return ident + part_averaged_triplet(emb["parts"], ids, hp.margin)


def total_loss(out, ids, Y, heads, hp: LossHyperParams | None = None):
    """Attention loss weighted by ``hp.attention_weight`` plus :func:`gilt_loss`."""
    hp = hp or LossHyperParams()
    return hp.attention_weight * part_attention_loss(out.M, Y, hp.label_smoothing) + gilt_loss(out, ids, heads, hp)


def loss_from_config(cfg: LossConfig, hp: LossHyperParams | None = None, n_parts=None, dim=None, n_classes=None):
    """Build a :class:`ReIDLoss` for a grid row (``cfg`` may be a row name)."""
    if isinstance(cfg, str):
        if cfg not in LOSS_GRID_ROWS:
            raise InvalidConfigError(f"unknown loss grid row {cfg!r}")
        cfg = LOSS_GRID_ROWS[cfg]
    if cfg is None:
        raise InvalidConfigError("empty loss config")
    return ReIDLoss(n_parts, dim, n_classes, cfg, hp)
