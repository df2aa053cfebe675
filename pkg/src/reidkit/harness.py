"""Run drivers: corpus generation, training with checkpoints, embedding, evaluation and ablation grids."""

from __future__ import annotations

import copy
import json
import logging
import statistics
from pathlib import Path

import numpy as np
import torch

from . import objectives as O
from . import retrieval as R
from . import synthgen as S
from .config import RunConfig
from .exceptions import FingerprintError, InvalidConfigError, NonFiniteLossError
from .net import NetConfig, PartNet, fingerprint, load_state, read_checkpoint, save_checkpoint
from .training import Trainer, forward_batches

log = logging.getLogger(__name__)

COMPONENT_ROWS = ("baseline", "full", "w/o learnable attention", "w/o visibility scores",
                  "w/o part-avgd triplet loss")
# identity and triplet loss on the global embedding only, matched by that embedding
BASELINE_LOSS = O.LossConfig(id_on=("g",), tri_on=("g",))


# ---------------------------------------------------------------- corpus

def generate(cfg: RunConfig, out=None):
    out = Path(out or cfg.corpus_path)
    S.write_corpus(cfg.corpus, out, seed=cfg.corpus_seed)
    log.info("wrote corpus to %s", out)
    return out


def check_corpus(cfg: RunConfig):
    """Fail before training when the corpus is missing or does not match the config."""
    root = Path(cfg.corpus_path)
    if not (root / "corpus.json").exists():
        raise InvalidConfigError(f"no corpus at {root} (run `reidkit generate` first)")
    header = S.read_corpus_header(root)
    if header["K"] != cfg.net.n_parts:
        raise InvalidConfigError(f"corpus has K={header['K']} but the model expects K={cfg.net.n_parts}")
    size = (header["config"]["height"], header["config"]["width"])
    if tuple(size) != tuple(cfg.net.backbone.input_size):
        raise InvalidConfigError(f"corpus images are {size}, model expects {cfg.net.backbone.input_size}")
    return header


# ---------------------------------------------------------------- training

def _write_json(path, obj):
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True, default=list) + "\n")


def train(cfg: RunConfig, resume=True, data=None):
    """Train per ``cfg``; writes checkpoints, a manifest and loss logs to ``cfg.out_dir``.

    Returns the :class:`Trainer`.  With ``resume`` an existing trainer state in
    ``out_dir`` is picked up and training continues from its epoch.
    """
    if data is None:
        check_corpus(cfg)
        data = S.load_split(cfg.corpus_path, "train", grouped_fields=cfg.train.fixed_attention)
    ids, labels = np.unique(data.ids, return_inverse=True)
    out = Path(cfg.out_dir)
    ckpt_dir = out / "checkpoints"
    ckpt_dir.mkdir(parents=True, exist_ok=True)
    cfg.write_manifest(ckpt_dir / "manifest.json")

    trainer = Trainer(cfg.net, len(ids), cfg.loss, cfg.hp, cfg.train)
    state_path = out / "trainer.pt"
    if resume and state_path.exists():
        state = torch.load(state_path, weights_only=False)
        if state.get("manifest") != json.loads(json.dumps(cfg.manifest(), default=list)):
            raise InvalidConfigError(f"{state_path} was written by a different configuration")
        trainer.load_state_dict(state["trainer"])
        log.info("resumed from epoch %d", trainer.epoch)
    steps = open(out / "steps.jsonl", "a")
    try:
        while trainer.epoch < cfg.train.epochs:
            try:
                record = trainer.run_epoch(data, labels, on_step=lambda r: steps.write(json.dumps(r) + "\n"))
            except NonFiniteLossError as exc:
                dump = {"epoch": trainer.epoch, "message": str(exc), "batch_indices": [int(i) for i in exc.batch_indices],
                        "files": [data.files[int(i)] for i in exc.batch_indices]}
                _write_json(out / "nonfinite_dump.json", dump)
                log.error("non-finite loss; batch dumped to %s", out / "nonfinite_dump.json")
                raise
            steps.flush()
            with open(out / "history.jsonl", "a") as fh:
                fh.write(json.dumps(record) + "\n")
            log.info("epoch %d %s", record["epoch"],
                     " ".join(f"{k}={v:.4f}" for k, v in record.items() if k not in ("epoch",)))
            last = trainer.epoch == cfg.train.epochs
            if last or trainer.epoch % cfg.checkpoint_every == 0:
                save_model(trainer, cfg, ckpt_dir / f"epoch_{trainer.epoch:03d}.npz")
                torch.save({"trainer": trainer.state_dict(), "manifest": json.loads(json.dumps(cfg.manifest(), default=list))},
                           state_path)
        save_model(trainer, cfg, out / "model.npz")
    finally:
        steps.close()
    return trainer


def save_model(trainer: Trainer, cfg: RunConfig, path):
    extra = {"epoch": trainer.epoch, "manifest": cfg.manifest(), "dtype": cfg.train.dtype}
    return save_checkpoint(path, trainer.model, cfg.arch, extra)


def load_model(path, cfg: RunConfig | None = None):
    """Rebuild the network stored in a checkpoint; ``cfg`` (optional) must match its fingerprint."""
    meta, arrays = read_checkpoint(path)
    expected = fingerprint(cfg.arch) if cfg is not None else None
    if expected is not None and meta["fingerprint"] != expected:
        raise FingerprintError(f"checkpoint {path} (fingerprint {meta['fingerprint']}) does not match the config "
                               f"({expected})")
    model = PartNet(NetConfig.from_dict(meta["arch"]["net"]))
    model = model.to(getattr(torch, meta["extra"].get("dtype", "float32")))
    load_state(model, arrays, meta["fingerprint"], meta)
    return model, meta


# ---------------------------------------------------------------- inference

def embed_split(model, data: S.SplitArrays, fixed_attention=False, no_visibility=False, holistic="f",
                dtype=None, meta=None) -> R.EmbeddingSet:
    """Foreground (or global, ``holistic="g"``) and part embeddings plus visibility bits."""
    dtype = dtype or next(model.parameters()).dtype
    embs, viss = [], []
    for o in forward_batches(model, data.images, data.grouped_fields, fixed_attention=fixed_attention, dtype=dtype):
        first = o.f_f if holistic == "f" else o.f_g
        embs.append(torch.cat([first[:, None], o.parts], dim=1).double().numpy())
        viss.append(torch.cat([o.v[:, 1:2], o.v[:, 3:]], dim=1).numpy())
    emb, vis = np.concatenate(embs), np.concatenate(viss)
    if no_visibility:
        vis = np.ones_like(vis)
    return R.EmbeddingSet(list(data.files), data.ids, data.cams, emb, vis,
                          dict(meta or {}, no_visibility=bool(no_visibility), holistic=holistic))


def embed(ckpt, split, corpus_path=None, out=None, no_visibility=None, cfg: RunConfig | None = None):
    """Write the embedding archive of ``split`` for checkpoint ``ckpt``; returns its path."""
    model, meta = load_model(ckpt, cfg)
    manifest = meta["extra"].get("manifest", {})
    flags = manifest.get("flags", {})
    corpus_path = corpus_path or (cfg.corpus_path if cfg else manifest.get("corpus", {}).get("path"))
    if corpus_path is None:
        raise InvalidConfigError("corpus path unknown; pass it explicitly")
    if no_visibility is None:
        no_visibility = bool(flags.get("no_visibility", False))
    fixed = bool(flags.get("fixed_attention", False))
    data = S.load_split(corpus_path, split, grouped_fields=fixed)
    es = embed_split(model, data, fixed_attention=fixed, no_visibility=no_visibility,
                     meta={"split": split, "corpus": str(Path(corpus_path).resolve()),
                           "checkpoint": str(Path(ckpt).resolve())})
    out = Path(out or Path(ckpt).with_name(f"{Path(ckpt).stem}_{split}.jsonl"))
    return R.write_archive(out, es, meta["fingerprint"])


def evaluate_archives(query, gallery, selector=None):
    """CMC / mAP for two archive paths (or :class:`EmbeddingSet` objects)."""
    q = R.read_archive(query) if not isinstance(query, R.EmbeddingSet) else query
    g = R.read_archive(gallery) if not isinstance(gallery, R.EmbeddingSet) else gallery
    fq, fg = q.meta.get("fingerprint"), g.meta.get("fingerprint")
    if fq and fg and fq != fg:
        raise FingerprintError(f"query ({fq}) and gallery ({fg}) come from different checkpoints")
    d = R.distance_matrix(q, g, selector=selector)
    return R.evaluate(d, q.ids, g.ids, q.cams, g.cams)


def pixel_accuracy(model, data: S.SplitArrays, fixed_attention=False):
    """Share of feature-map cells whose argmax class equals the downsampled parsing label."""
    hits, total = 0, 0
    s = 0
    for o in forward_batches(model, data.images, data.grouped_fields, fixed_attention=fixed_attention,
                             dtype=next(model.parameters()).dtype):
        n = o.M.shape[0]
        Y = O.downsample_labels(torch.as_tensor(data.masks[s:s + n]), o.M.shape[-2:])
        hits += int((o.M.argmax(dim=1) == Y).sum())
        total += Y.numel()
        s += n
    return hits / max(total, 1)


# ---------------------------------------------------------------- experiments

class Experiment:
    """Train one configuration in memory and evaluate it on the query/gallery splits.

    Corpora are loaded once per path and shared between experiments.
    """

    _cache: dict = {}

    @classmethod
    def splits(cls, path, grouped_fields=False):
        key = (str(path), grouped_fields)
        if key not in cls._cache:
            cls._cache[key] = {s: S.load_split(path, s, grouped_fields=grouped_fields) for s in S.SPLITS}
        return cls._cache[key]

    def __init__(self, cfg: RunConfig):
        self.cfg = cfg
        self.trainer = None

    def fit(self):
        cfg = self.cfg
        check_corpus(cfg)
        data = self.splits(cfg.corpus_path, cfg.train.fixed_attention)
        ids, labels = np.unique(data["train"].ids, return_inverse=True)
        self.trainer = Trainer(cfg.net, len(ids), cfg.loss, cfg.hp, cfg.train)
        while self.trainer.epoch < cfg.train.epochs:
            self.trainer.run_epoch(data["train"], labels)
        return self

    def embeddings(self, holistic="f"):
        data = self.splits(self.cfg.corpus_path, self.cfg.train.fixed_attention)
        fixed = self.cfg.train.fixed_attention
        return (embed_split(self.trainer.model, data["query"], fixed, holistic=holistic),
                embed_split(self.trainer.model, data["gallery"], fixed, holistic=holistic))

    def evaluate(self, selector=None, use_visibility=True, holistic="f"):
        q, g = self.embeddings(holistic)
        d = R.distance_matrix(q, g, selector=selector, use_visibility=use_visibility)
        return R.evaluate(d, q.ids, g.ids, q.cams, g.cams)

    def pixel_accuracy(self, split="gallery"):
        data = self.splits(self.cfg.corpus_path, self.cfg.train.fixed_attention)[split]
        return pixel_accuracy(self.trainer.model, data, self.cfg.train.fixed_attention)


def _variant(cfg: RunConfig, seed, loss=None, fixed_attention=None, part_triplet_mode=None):
    c = copy.deepcopy(cfg)
    c.seed = seed
    c.train.seed = seed
    if loss is not None:
        c.loss = copy.deepcopy(loss)
    if part_triplet_mode is not None:
        c.loss = O.LossConfig(c.loss.id_on, c.loss.tri_on, part_triplet_mode)
    if fixed_attention is not None:
        c.train.fixed_attention = fixed_attention
    return c


def _metrics(result: R.EvalResult):
    return {"rank1": result.rank1, "mAP": result.mAP}


def loss_grid(cfg: RunConfig, seeds=(0, 1, 2), rows=None):
    """Loss-placement grid: one training per row and seed.

    The PCB row has no foreground embedding and is matched on the parts alone.
    """
    out = []
    for name in rows or O.LOSS_GRID_ROWS:
        row = O.LOSS_GRID_ROWS[name]
        per_seed = []
        for seed in seeds:
            exp = Experiment(_variant(cfg, seed, loss=row)).fit()
            per_seed.append(_metrics(exp.evaluate(selector="parts" if name == "PCB" else None)))
        out.append({"row": name, "id_on": " ".join(row.id_on) or "-", "tri_on": " ".join(row.tri_on) or "-",
                    "seeds": per_seed})
    return out


def embedding_study(cfg: RunConfig, seeds=(0, 1, 2)):
    """Test-time embedding study: each part alone, all parts, foreground plus parts."""
    K = cfg.net.n_parts
    selectors = [(f"f_{k}", str(k)) for k in range(1, K + 1)]
    selectors += [("f_1..f_K", "parts"), ("f_f, f_1..f_K", "all"), ("f_f", "f")]
    results = {name: [] for name, _ in selectors}
    for seed in seeds:
        exp = Experiment(_variant(cfg, seed)).fit()
        for name, sel in selectors:
            results[name].append(_metrics(exp.evaluate(selector=sel)))
    return [{"row": name, "seeds": results[name]} for name, _ in selectors]


def components(cfg: RunConfig, seeds=(0, 1, 2)):
    """Component ablation: baseline, full model and the three "w/o" variants."""
    results = {name: [] for name in COMPONENT_ROWS}
    for seed in seeds:
        base = Experiment(_variant(cfg, seed, loss=BASELINE_LOSS)).fit()
        results["baseline"].append(_metrics(base.evaluate(selector="f", holistic="g")))
        full = Experiment(_variant(cfg, seed)).fit()
        results["full"].append(_metrics(full.evaluate()))
        results["w/o visibility scores"].append(_metrics(full.evaluate(use_visibility=False)))
        fixed = Experiment(_variant(cfg, seed, fixed_attention=True)).fit()
        results["w/o learnable attention"].append(_metrics(fixed.evaluate()))
        per_part = Experiment(_variant(cfg, seed, part_triplet_mode="per-part")).fit()
        results["w/o part-avgd triplet loss"].append(_metrics(per_part.evaluate()))
    return [{"row": name, "seeds": results[name]} for name in COMPONENT_ROWS]


GRIDS = {"loss_grid": loss_grid, "embedding_study": embedding_study, "components": components}


def summarize(rows):
    """Add median and spread (max - min over seeds) of each metric to every row."""
    for r in rows:
        for m in ("rank1", "mAP"):
            vals = [s[m] for s in r["seeds"]]
            r[m] = statistics.median(vals)
            r[f"{m}_spread"] = max(vals) - min(vals)
    return rows


def write_table(rows, path, columns=None):
    """Tab-separated table; ``inf`` values are written as the string ``inf``."""
    columns = columns or [c for c in rows[0] if c != "seeds"]

    def fmt(v):
        if isinstance(v, float):
            return "inf" if np.isinf(v) else f"{v:.4f}"
        return str(v)

    lines = ["\t".join(columns)] + ["\t".join(fmt(r.get(c, "")) for c in columns) for r in rows]
    Path(path).write_text("\n".join(lines) + "\n")
    return Path(path)


def ablate(grid, cfg: RunConfig, seeds=(0, 1, 2), out_dir=None):
    if grid not in GRIDS:
        raise InvalidConfigError(f"unknown grid {grid!r}; choose from {sorted(GRIDS)}")
    rows = summarize(GRIDS[grid](cfg, seeds))
    out = Path(out_dir or cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    path = write_table(rows, out / f"{grid}.tsv")
    _write_json(out / f"{grid}.json", {"grid": grid, "seeds": list(seeds), "rows": rows,
                                       "checkpoint": "last epoch", "config": cfg.manifest()})
    return rows, path
