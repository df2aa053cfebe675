"""Static ranking reports: PNG grids with correct/incorrect borders and attention panels."""

from __future__ import annotations

import logging
from pathlib import Path

import numpy as np
from PIL import Image

from . import retrieval as R
from .exceptions import QueryLookupError

log = logging.getLogger(__name__)

GREEN = (30, 170, 60)
RED = (210, 40, 40)
GRAY = (90, 90, 90)
BORDER = 3
SCALE = 2
GAP = 4


def _load_image(corpus, split, file):
    with Image.open(Path(corpus) / split / "images" / f"{file}.png") as im:
        return np.asarray(im.convert("RGB"))


def _thumb(img, color=None):
    im = Image.fromarray(img).resize((img.shape[1] * SCALE, img.shape[0] * SCALE), Image.NEAREST)
    if color is None:
        return im
    out = Image.new("RGB", (im.width + 2 * BORDER, im.height + 2 * BORDER), color)
    out.paste(im, (BORDER, BORDER))
    return out


def heat(m):
    """Map values in [0, 1] to an RGB heat ramp (black -> red -> yellow -> white)."""
    m = np.clip(np.asarray(m, dtype=np.float64), 0.0, 1.0)
    r = np.clip(3 * m, 0, 1)
    g = np.clip(3 * m - 1, 0, 1)
    b = np.clip(3 * m - 2, 0, 1)
    return np.round(np.stack([r, g, b], axis=-1) * 255).astype(np.uint8)


def overlay(img, m, alpha=0.6):
    """Blend an attention map (any resolution) over an image."""
    h, w = img.shape[:2]
    hm = np.asarray(Image.fromarray(heat(m)).resize((w, h), Image.BILINEAR), dtype=np.float64)
    return np.round((1 - alpha) * img + alpha * hm).astype(np.uint8)


def attention_maps_for(checkpoint, corpus, split, files):
    """Recompute ``(K+1) x H' x W'`` attention maps of the given files with a checkpoint."""
    from . import synthgen as S
    from .harness import load_model
    from .training import forward_batches

    model, meta = load_model(checkpoint)
    fixed = bool(meta["extra"].get("manifest", {}).get("flags", {}).get("fixed_attention", False))
    data = S.load_split(corpus, split, grouped_fields=fixed)
    index = {f: i for i, f in enumerate(data.files)}
    sub = data.subset([index[f] for f in files])
    outs = list(forward_batches(model, sub.images, sub.grouped_fields, fixed_attention=fixed,
                                dtype=next(model.parameters()).dtype))
    return np.concatenate([o.M.double().numpy() for o in outs])


def _row_image(tiles):
    h = max(t.height for t in tiles)
    w = sum(t.width for t in tiles) + GAP * (len(tiles) - 1)
    row = Image.new("RGB", (w, h), (255, 255, 255))
    x = 0
    for t in tiles:
        row.paste(t, (x, (h - t.height) // 2))
        x += t.width + GAP
    return row


def _stack(rows):
    w = max(r.width for r in rows)
    h = sum(r.height for r in rows) + GAP * (len(rows) - 1)
    out = Image.new("RGB", (w, h), (255, 255, 255))
    y = 0
    for r in rows:
        out.paste(r, (0, y))
        y += r.height + GAP
    return out


def _ranked(dist_row, g: R.EmbeddingSet, q_id, q_cam, topk):
    keep = ~((g.ids == q_id) & (g.cams == q_cam))
    order = np.argsort(dist_row, kind="stable")
    order = order[keep[order]]
    return order[:topk]


def rank_report(query: R.EmbeddingSet, gallery: R.EmbeddingSet, out_dir, topk=5, query_ids=None,
                corpus=None, checkpoint=None, per_part=True):
    """Write one PNG per query plus ``rankings.tsv``; returns the written paths.

    Each PNG has a row for the combined matching distance and, with
    ``per_part``, one row per part embedding.  Rows start with the query
    (overlaid with the matching attention map when a checkpoint is known)
    followed by the ``topk`` gallery images bordered green (same identity) or
    red.  A final panel shows the query's background and part maps.
    """
    corpus = corpus or query.meta.get("corpus")
    checkpoint = checkpoint or query.meta.get("checkpoint")
    if corpus is None:
        raise ValueError("corpus path unknown; pass it explicitly")
    q_split = query.meta.get("split", "query")
    g_split = gallery.meta.get("split", "gallery")
    K = query.emb.shape[1] - 1
    if query_ids is None:
        sel = list(range(len(query)))
    else:
        sel = []
        for pid in query_ids:
            hits = np.flatnonzero(query.ids == int(pid))
            if not len(hits):
                raise QueryLookupError(f"query id {pid} not in the query archive")
            sel.extend(int(h) for h in hits)
    rows = [("all", None)] + ([(f"part {k}", str(k)) for k in range(1, K + 1)] if per_part else [])
    dists = {name: R.distance_matrix(query, gallery, selector=s) for name, s in rows}
    maps = None
    if checkpoint and Path(checkpoint).exists():
        maps = attention_maps_for(checkpoint, corpus, q_split, [query.files[i] for i in sel])
    else:
        log.warning("checkpoint not available; attention panels are skipped")

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    table = ["query\tembedding\trank\tgallery\tdistance\tcorrect"]
    written = []
    for n, qi in enumerate(sel):
        qimg = _load_image(corpus, q_split, query.files[qi])
        img_rows = []
        for r, (name, _) in enumerate(rows):
            if maps is not None:
                m = maps[n, 1:].max(axis=0) if r == 0 else maps[n, r]
                qt = _thumb(overlay(qimg, m), GRAY)
            else:
                qt = _thumb(qimg, GRAY)
            tiles = [qt]
            for gi in _ranked(dists[name][qi], gallery, query.ids[qi], query.cams[qi], topk):
                ok = bool(gallery.ids[gi] == query.ids[qi])
                tiles.append(_thumb(_load_image(corpus, g_split, gallery.files[gi]), GREEN if ok else RED))
                d = dists[name][qi, gi]
                table.append(f"{query.files[qi]}\t{name}\t{len(tiles) - 1}\t{gallery.files[gi]}\t"
                             f"{'inf' if np.isinf(d) else f'{d:.6f}'}\t{int(ok)}")
            img_rows.append(_row_image(tiles))
        if maps is not None:
            panel = [_thumb(qimg)] + [_thumb(overlay(np.zeros_like(qimg), maps[n, k], alpha=1.0))
                                      for k in range(K + 1)]
            img_rows.append(_row_image(panel))
        canvas = _stack(img_rows)
        path = out / f"rank_{query.files[qi]}.png"
        canvas.save(path, format="PNG")
        written.append(path)
    tsv = out / "rankings.tsv"
    tsv.write_text("\n".join(table) + "\n")
    return written + [tsv]
