"""Visibility-gated query-gallery distances and CMC / mAP evaluation."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.spatial.distance import cdist

from .exceptions import EmptyEvaluationError, InvalidConfigError, ShapeError

log = logging.getLogger(__name__)


@dataclass
class EmbeddingRecord:
    """One image's inference embeddings: row 0 is ``f_f``, rows ``1..K`` the parts."""

    file: str
    id: int
    cam: int
    emb: np.ndarray  # (K+1) x C
    vis: np.ndarray  # K+1 bools, vis[0] is always True

    @property
    def K(self):
        return self.emb.shape[0] - 1


@dataclass
class EmbeddingSet:
    """Stacked records of one split."""

    files: list
    ids: np.ndarray
    cams: np.ndarray
    emb: np.ndarray  # N x (K+1) x C
    vis: np.ndarray  # N x (K+1) bool
    meta: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.files)

    def __getitem__(self, i):
        return EmbeddingRecord(self.files[i], int(self.ids[i]), int(self.cams[i]), self.emb[i], self.vis[i])

    @classmethod
    def from_records(cls, records, meta=None):
        records = list(records)
        return cls([r.file for r in records], np.array([r.id for r in records]),
                   np.array([r.cam for r in records]), np.stack([r.emb for r in records]),
                   np.stack([r.vis for r in records]).astype(bool), meta or {})


def pair_distance(q: EmbeddingRecord, g: EmbeddingRecord) -> float:
    """Mean Euclidean distance over mutually visible embeddings; ``inf`` if none."""
    if q.emb.shape != g.emb.shape:
        raise ShapeError(f"records differ in shape: {q.emb.shape} vs {g.emb.shape}")
    w = np.asarray(q.vis, dtype=bool) & np.asarray(g.vis, dtype=bool)
    if not w.any():
        return float("inf")
    d = np.linalg.norm(q.emb - g.emb, axis=1)
    return float(d[w].sum() / w.sum())


def parse_selector(selector, K):
    """Embedding row indices for a selector.

    Accepts ``None`` / ``"all"`` (foreground and all parts), ``"parts"``, a
    single name (``"f"``, ``"1"``..``"K"``), or an iterable of names/indices.
    """
    if selector is None or selector == "all":
        return list(range(K + 1))
    if selector == "parts":
        return list(range(1, K + 1))
    if isinstance(selector, (str, int)):
        selector = [selector]
    rows = []
    for s in selector:
        s = str(s)
        idx = 0 if s == "f" else int(s)
        if not 0 <= idx <= K:
            raise InvalidConfigError(f"selector entry {s!r} out of range for K={K}")
        if idx not in rows:
            rows.append(idx)
    if not rows:
        raise InvalidConfigError("empty selector")
    return sorted(rows)


def distance_matrix(queries: EmbeddingSet, gallery: EmbeddingSet, selector=None, use_visibility=True):
    """``|Q| x |G|`` visibility-weighted distances restricted to ``selector``.

    Entries are ``inf`` where no selected embedding is visible in both images.
    ``use_visibility=False`` treats every embedding as visible.
    """
    if len(queries) == 0 or len(gallery) == 0:
        raise InvalidConfigError("query and gallery sets must be non-empty")
    if queries.emb.shape[1:] != gallery.emb.shape[1:]:
        raise ShapeError("query and gallery embeddings differ in shape")
    rows = parse_selector(selector, queries.emb.shape[1] - 1)
    num = np.zeros((len(queries), len(gallery)))
    den = np.zeros((len(queries), len(gallery)))
    for i in rows:
        if use_visibility:
            w = np.outer(queries.vis[:, i], gallery.vis[:, i]).astype(np.float64)
        else:
            w = np.ones_like(num)
        d = cdist(queries.emb[:, i].astype(np.float64), gallery.emb[:, i].astype(np.float64))
        num += w * d
        den += w
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.where(den > 0, num / np.where(den > 0, den, 1.0), np.inf)
    return out


@dataclass
class EvalResult:
    cmc: np.ndarray
    mAP: float
    ranks: dict
    n_valid: int
    n_skipped: int

    @property
    def rank1(self):
        return float(self.cmc[0])

    def as_dict(self):
        d = {f"rank{r}": float(v) for r, v in self.ranks.items()}
        d.update(mAP=float(self.mAP), n_valid=self.n_valid, n_skipped=self.n_skipped)
        return d


def evaluate(distmat, q_ids, g_ids, q_cams, g_cams, ranks=(1, 5, 10)) -> EvalResult:
    """Single-query CMC and mAP.

    Gallery entries sharing both identity and camera with the query are
    ignored.  Gallery order breaks distance ties (stable sort), so ``inf``
    entries rank last in index order.  Queries without any remaining positive
    are skipped and counted.
    """
    distmat = np.asarray(distmat, dtype=np.float64)
    q_ids, g_ids = np.asarray(q_ids), np.asarray(g_ids)
    q_cams, g_cams = np.asarray(q_cams), np.asarray(g_cams)
    n_q, n_g = distmat.shape
    if (len(q_ids), len(g_ids)) != (n_q, n_g) or len(q_cams) != n_q or len(g_cams) != n_g:
        raise ShapeError("label arrays do not match the distance matrix")
    order = np.argsort(distmat, axis=1, kind="stable")
    all_cmc, all_ap, skipped = [], [], 0
    for qi in range(n_q):
        idx = order[qi]
        keep = ~((g_ids[idx] == q_ids[qi]) & (g_cams[idx] == q_cams[qi]))
        matches = (g_ids[idx][keep] == q_ids[qi]).astype(np.float64)
        if not matches.any():
            skipped += 1
            continue
        cmc = np.minimum(matches.cumsum(), 1.0)
        full = np.ones(n_g)
        full[:len(cmc)] = cmc
        all_cmc.append(full)
        hits = matches.cumsum()
        precision = hits / np.arange(1, len(matches) + 1)
        all_ap.append(float((precision * matches).sum() / matches.sum()))
    if not all_cmc:
        raise EmptyEvaluationError("no query has a valid gallery positive")
    if skipped:
        log.info("skipped %d queries without a valid positive", skipped)
    cmc = np.mean(all_cmc, axis=0)
    return EvalResult(cmc=cmc, mAP=float(np.mean(all_ap)),
                      ranks={r: float(cmc[min(r, n_g) - 1]) for r in ranks},
                      n_valid=len(all_cmc), n_skipped=skipped)


# ---------------------------------------------------------------- archive I/O

def write_archive(path, embeddings: EmbeddingSet, fingerprint=""):
    """JSON lines: a header ``{K, C, fingerprint}`` then one record per image."""
    K, C = embeddings.emb.shape[1] - 1, embeddings.emb.shape[2]
    with open(path, "w") as fh:
        fh.write(json.dumps({"K": K, "C": C, "fingerprint": fingerprint, **embeddings.meta}, sort_keys=True) + "\n")
        for i in range(len(embeddings)):
            fh.write(json.dumps({
                "file": embeddings.files[i], "id": int(embeddings.ids[i]), "cam": int(embeddings.cams[i]),
                "emb": [float(x) for x in embeddings.emb[i].reshape(-1)],
                "vis": [int(x) for x in embeddings.vis[i]],
            }) + "\n")
    return Path(path)


def read_archive(path) -> EmbeddingSet:
    lines = Path(path).read_text().splitlines()
    header = json.loads(lines[0])
    K, C = header["K"], header["C"]
    recs = [json.loads(line) for line in lines[1:] if line.strip()]
    emb = np.array([r["emb"] for r in recs], dtype=np.float64).reshape(len(recs), K + 1, C)
    vis = np.array([r["vis"] for r in recs], dtype=bool).reshape(len(recs), K + 1)
    meta = {k: v for k, v in header.items() if k not in ("K", "C")}
    return EmbeddingSet([r["file"] for r in recs], np.array([r["id"] for r in recs], dtype=np.int64),
                        np.array([r["cam"] for r in recs], dtype=np.int64), emb, vis, meta)
