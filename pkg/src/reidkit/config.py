"""Run configuration: a YAML file with nested sections resolved into typed objects.

Example::

    seed: 0
    out_dir: runs/gilt
    corpus: {path: data/default, preset: default, seed: 0}
    loss: {row: GiLt}
    schedule: {preset: toy}
    train: {epochs: 30}
    flags: {fixed_attention: false, no_visibility: false, per_part_triplet: false}

Every key is optional except ``seed``.  :func:`resolve` turns the file into a
:class:`RunConfig`; :meth:`RunConfig.manifest` gives the fully expanded form
written next to each checkpoint.
"""

from __future__ import annotations

import copy
import json
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import yaml

from . import objectives as O
from .exceptions import InvalidConfigError
from .net import BackboneConfig, NetConfig
from .synthgen import CorpusConfig, corpus_preset
from .training import FULL_SCHEDULE, TOY_SCHEDULE, Schedule, TrainConfig

SCHEDULE_PRESETS = {"toy": TOY_SCHEDULE, "full": FULL_SCHEDULE}
SECTIONS = ("seed", "out_dir", "corpus", "model", "loss", "schedule", "augment", "train", "flags")


@dataclass
class RunConfig:
    seed: int
    corpus_path: str = "data/default"
    corpus_seed: int = 0
    corpus: CorpusConfig = field(default_factory=CorpusConfig)
    net: NetConfig = field(default_factory=NetConfig)
    loss: O.LossConfig = field(default_factory=O.LossConfig)
    hp: O.LossHyperParams = field(default_factory=O.toy_hyperparams)
    train: TrainConfig = field(default_factory=TrainConfig)
    no_visibility: bool = False
    out_dir: str = "runs/default"
    checkpoint_every: int = 5

    @property
    def arch(self):
        """Architecture description hashed into checkpoint fingerprints."""
        return {"net": self.net.to_dict()}

    def manifest(self):
        return {
            "seed": self.seed,
            "out_dir": self.out_dir,
            "corpus": {"path": self.corpus_path, "seed": self.corpus_seed, "options": asdict(self.corpus)},
            "model": self.net.to_dict(),
            "loss": {**self.loss.to_dict(), **asdict(self.hp)},
            "schedule": asdict(self.train.schedule),
            "augment": {"pad": self.train.pad, "erase_prob": self.train.erase_prob,
                        "erase_area": list(self.train.erase_area), "erase_labels": self.train.erase_labels},
            "train": {"epochs": self.train.epochs, "P": self.train.P, "Kinst": self.train.Kinst,
                      "weight_decay": self.train.weight_decay, "dtype": self.train.dtype,
                      "checkpoint_every": self.checkpoint_every,
                      "optimizer": {"name": "adam", "betas": [0.9, 0.999], "eps": 1e-8}},
            "flags": {"fixed_attention": self.train.fixed_attention, "no_visibility": self.no_visibility,
                      "per_part_triplet": self.loss.part_triplet_mode == "per-part"},
        }

    def write_manifest(self, path):
        Path(path).write_text(json.dumps(self.manifest(), indent=2, sort_keys=True, default=list) + "\n")
        return Path(path)

    def with_overrides(self, **changes):
        """Copy with top-level fields replaced (nested objects are deep-copied)."""
        return replace(copy.deepcopy(self), **changes)


def _section(raw, name, allowed):
    sec = raw.get(name) or {}
    if not isinstance(sec, dict):
        raise InvalidConfigError(f"section {name!r} must be a mapping")
    unknown = set(sec) - set(allowed)
    if unknown:
        raise InvalidConfigError(f"unknown keys in {name!r}: {sorted(unknown)}")
    return dict(sec)


def _fields(cls):
    return list(cls.__dataclass_fields__)


def resolve(raw: dict) -> RunConfig:
    """Validate a parsed config mapping and build a :class:`RunConfig`."""
    if not isinstance(raw, dict):
        raise InvalidConfigError("config must be a mapping")
    unknown = set(raw) - set(SECTIONS)
    if unknown:
        raise InvalidConfigError(f"unknown config sections: {sorted(unknown)}")
    if raw.get("seed") is None:
        raise InvalidConfigError("seed is mandatory")
    seed = int(raw["seed"])

    c = _section(raw, "corpus", ["path", "preset", "seed", "options"])
    corpus = corpus_preset(c.get("preset", "default"))
    opts = c.get("options") or {}
    bad = set(opts) - set(_fields(CorpusConfig))
    if bad:
        raise InvalidConfigError(f"unknown corpus options: {sorted(bad)}")
    corpus = CorpusConfig.from_dict({**asdict(corpus), **opts}).validate()

    m = _section(raw, "model", ["n_parts", "visibility_threshold", "backbone"])
    bb = _section(m, "backbone", _fields(BackboneConfig))
    for key in ("channels", "strides", "input_size"):
        if key in bb:
            bb[key] = tuple(bb[key])
    bb.setdefault("input_size", (corpus.height, corpus.width))
    n_parts = int(m.get("n_parts", corpus.n_parts))
    if n_parts != corpus.n_parts:
        raise InvalidConfigError(f"model n_parts={n_parts} differs from corpus K={corpus.n_parts}")
    if tuple(bb["input_size"]) != (corpus.height, corpus.width):
        raise InvalidConfigError("backbone input_size must match the corpus image size")
    net = NetConfig(n_parts=n_parts, backbone=BackboneConfig(**bb),
                    visibility_threshold=float(m.get("visibility_threshold", NetConfig.visibility_threshold)))
    if not 0.0 < net.visibility_threshold < 1.0:
        raise InvalidConfigError("visibility_threshold must lie in (0, 1)")
    if len(net.backbone.channels) != len(net.backbone.strides):
        raise InvalidConfigError("backbone channels and strides differ in length")

    lo = _section(raw, "loss", ["row", "id_on", "tri_on", "part_triplet_mode"] + _fields(O.LossHyperParams))
    if "row" in lo:
        row = str(lo.pop("row"))
        if row not in O.LOSS_GRID_ROWS:
            raise InvalidConfigError(f"unknown loss grid row {row!r}")
        base = O.LOSS_GRID_ROWS[row].to_dict()
    else:
        base = O.GILT.to_dict()
    for key in ("id_on", "tri_on", "part_triplet_mode"):
        if key in lo:
            base[key] = lo.pop(key)
    loss = O.LossConfig.from_dict(base)
    hp = replace(O.toy_hyperparams(), **lo)

    s = _section(raw, "schedule", ["preset"] + _fields(Schedule))
    preset = s.pop("preset", "toy")
    if preset not in SCHEDULE_PRESETS:
        raise InvalidConfigError(f"unknown schedule preset {preset!r}; known: {sorted(SCHEDULE_PRESETS)}")
    if "decay_epochs" in s:
        s["decay_epochs"] = tuple(s["decay_epochs"])
    schedule = replace(SCHEDULE_PRESETS[preset], **s)

    a = _section(raw, "augment", ["pad", "erase_prob", "erase_area", "erase_labels"])
    if "erase_area" in a:
        a["erase_area"] = tuple(a["erase_area"])
    t = _section(raw, "train", ["epochs", "P", "Kinst", "weight_decay", "dtype", "checkpoint_every"])
    checkpoint_every = int(t.pop("checkpoint_every", 5))
    f = _section(raw, "flags", ["fixed_attention", "no_visibility", "per_part_triplet"])
    if f.get("per_part_triplet"):
        loss = O.LossConfig(loss.id_on, loss.tri_on, "per-part")
    train = TrainConfig(seed=seed, schedule=schedule, fixed_attention=bool(f.get("fixed_attention", False)),
                        **a, **t)
    train.validate()
    return RunConfig(seed=seed, corpus_path=str(c.get("path", "data/default")), corpus_seed=int(c.get("seed", 0)),
                     corpus=corpus, net=net, loss=loss, hp=hp, train=train,
                     no_visibility=bool(f.get("no_visibility", False)),
                     out_dir=str(raw.get("out_dir", "runs/default")), checkpoint_every=checkpoint_every)


def load_config(path) -> RunConfig:
    path = Path(path)
    if not path.exists():
        raise InvalidConfigError(f"config file not found: {path}")
    try:
        raw = yaml.safe_load(path.read_text())
    except yaml.YAMLError as exc:
        raise InvalidConfigError(f"cannot parse {path}: {exc}") from exc
    cfg = resolve(raw or {})
    # relative paths are taken relative to the config file
    base = path.parent
    if not Path(cfg.corpus_path).is_absolute():
        cfg.corpus_path = str(base / cfg.corpus_path)
    if not Path(cfg.out_dir).is_absolute():
        cfg.out_dir = str(base / cfg.out_dir)
    return cfg
