"""Learning-rate schedule, augmentation and the PK-batch training loop."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace

import numpy as np
import torch
import torch.nn.functional as F

from . import objectives as O
from .exceptions import InvalidConfigError, NonFiniteLossError
from .net import NetConfig, PartNet
from .synthgen import pk_sampler

log = logging.getLogger(__name__)


@dataclass
class Schedule:
    base_lr: float = 3.5e-4
    warmup_start: float = 3.5e-5
    warmup_epochs: int = 10
    decay_epochs: tuple = (40, 70)
    decay_factor: float = 0.1


FULL_SCHEDULE = Schedule()
# 30-epoch desk-scale schedule; the rate is raised because the backbone starts from scratch
TOY_SCHEDULE = Schedule(base_lr=3.5e-3, warmup_start=3.5e-4, warmup_epochs=3, decay_epochs=(15, 24), decay_factor=0.1)


def lr_schedule(epoch, schedule: Schedule = FULL_SCHEDULE):
    """Linear warmup from ``warmup_start`` to ``base_lr``, then step decays."""
    if epoch < 0:
        raise ValueError("epoch must be non-negative")
    s = schedule
    if epoch < s.warmup_epochs:
        return s.warmup_start + (s.base_lr - s.warmup_start) * epoch / s.warmup_epochs
    n_decays = sum(epoch >= d for d in s.decay_epochs)
    return s.base_lr * s.decay_factor ** n_decays


def _derive(*keys):
    return int(np.random.SeedSequence([int(k) for k in keys]).generate_state(1)[0])


def _rng(*keys):
    return np.random.default_rng(np.random.SeedSequence([int(k) for k in keys]))


def augment(image, seed, pad=2, erase_prob=0.5, erase_area=(0.02, 0.4), erase_ratio=(0.3, 3.3), aux=(),
            aux_erase=None):
    """Zero-pad then random-crop back to size, then random erasing with noise.

    ``image`` is ``H x W x 3``.  Arrays in ``aux`` (label maps, grouped
    fields; leading dims ``H x W``) receive the same crop.  ``aux_erase``
    optionally gives, per aux array, a fill value for the erased rectangle
    (``None`` leaves that array untouched).  Returns the image alone, or
    ``(image, *aux)`` when ``aux`` is given.
    """
    rng = _rng(91, seed)
    H, W = image.shape[:2]
    dy, dx = (rng.integers(0, 2 * pad + 1, size=2) if pad > 0 else (0, 0))

    def crop(a):
        if pad <= 0:
            return a.copy()
        widths = [(pad, pad), (pad, pad)] + [(0, 0)] * (a.ndim - 2)
        return np.pad(a, widths)[dy:dy + H, dx:dx + W]

    out = crop(image)
    aux = [crop(a) for a in aux]
    if rng.random() < erase_prob:
        for _ in range(100):
            area = rng.uniform(*erase_area) * H * W
            ratio = math.exp(rng.uniform(math.log(erase_ratio[0]), math.log(erase_ratio[1])))
            h, w = int(round(math.sqrt(area * ratio))), int(round(math.sqrt(area / ratio)))
            if 0 < h < H and 0 < w < W:
                y0, x0 = rng.integers(0, H - h + 1), rng.integers(0, W - w + 1)
                out[y0:y0 + h, x0:x0 + w] = rng.random((h, w, out.shape[2]))
                for a, fill in zip(aux, aux_erase or ()):
                    if fill is not None:
                        a[y0:y0 + h, x0:x0 + w] = fill
                break
    if not aux:
        return out
    return (out, *aux)


def fixed_attention_maps(E, size):
    """Bilinear resize of grouped fields ``B x K x H x W`` then softmax over parts."""
    E = F.interpolate(E, size=tuple(size), mode="bilinear", align_corners=False)
    return torch.softmax(E, dim=1)


def to_tensor(images, dtype=torch.float32):
    images = np.ascontiguousarray(images)
    x = torch.as_tensor(images).to(dtype)
    if images.dtype == np.uint8:
        x = x / 255.0
    return (x.permute(0, 3, 1, 2) - 0.5) / 0.25


@dataclass
class TrainConfig:
    epochs: int = 30
    schedule: Schedule = field(default_factory=lambda: replace(TOY_SCHEDULE))
    P: int = 16
    Kinst: int = 4
    pad: int = 2
    erase_prob: float = 0.5
    erase_area: tuple = (0.02, 0.4)
    weight_decay: float = 5e-4
    seed: int = 0
    dtype: str = "float32"
    fixed_attention: bool = False
    erase_labels: bool = False

    def validate(self):
        if self.epochs < 1 or self.P < 2 or self.Kinst < 2:
            raise InvalidConfigError("need epochs >= 1, P >= 2 and Kinst >= 2")
        if not 0.0 <= self.erase_prob <= 1.0:
            raise InvalidConfigError("erase_prob must lie in [0, 1]")
        lo, hi = self.erase_area
        if not 0.0 < lo <= hi < 1.0:
            raise InvalidConfigError("erase_area must be an increasing pair in (0, 1)")
        if self.pad < 0 or self.weight_decay < 0:
            raise InvalidConfigError("pad and weight_decay must be non-negative")
        if self.dtype not in ("float32", "float64"):
            raise InvalidConfigError("dtype must be float32 or float64")
        s = self.schedule
        if s.base_lr <= 0 or s.warmup_start <= 0 or s.warmup_epochs < 0 or not 0 < s.decay_factor <= 1:
            raise InvalidConfigError("invalid learning-rate schedule")
        return self


class Trainer:
    """Holds model, loss heads and optimizer; one call to :meth:`run_epoch` per epoch.

    Every random draw is keyed by ``(seed, epoch, step)`` so that training can
    resume from a saved state and reproduce the remaining steps.
    """

    def __init__(self, net_config: NetConfig, n_classes, loss_config: O.LossConfig,
                 hp: O.LossHyperParams, config: TrainConfig):
        self.config = config
        self.dtype = getattr(torch, config.dtype)
        torch.manual_seed(config.seed)
        self.model = PartNet(net_config).to(self.dtype)
        self.loss = O.ReIDLoss(net_config.n_parts, net_config.backbone.dim, n_classes, loss_config, hp).to(self.dtype)
        params = [p for p in list(self.model.parameters()) + list(self.loss.parameters()) if p.requires_grad]
        if config.fixed_attention:
            self.model.part_classifier.weight.requires_grad_(False)
            params = [p for p in params if p is not self.model.part_classifier.weight]
        self.optimizer = torch.optim.Adam(params, lr=config.schedule.warmup_start,
                                          weight_decay=config.weight_decay)
        self.epoch = 0
        self.step = 0
        self.history = []

    def state_dict(self):
        return {"model": self.model.state_dict(), "loss": self.loss.state_dict(),
                "optimizer": self.optimizer.state_dict(), "epoch": self.epoch, "step": self.step,
                "history": list(self.history)}

    def load_state_dict(self, state):
        self.model.load_state_dict(state["model"])
        self.loss.load_state_dict(state["loss"])
        self.optimizer.load_state_dict(state["optimizer"])
        self.epoch, self.step = state["epoch"], state["step"]
        self.history = list(state["history"])

    def _batch(self, data, idx, step):
        cfg = self.config
        imgs, masks, E = [], [], []
        for pos, i in enumerate(idx):
            aux = [data.masks[i]]
            if cfg.fixed_attention:
                aux.append(data.grouped_fields[i])
            out = augment(data.images[i], seed=_derive(cfg.seed, self.epoch, step, pos),
                          pad=cfg.pad, erase_prob=cfg.erase_prob, erase_area=cfg.erase_area, aux=aux,
                          aux_erase=[0 if cfg.erase_labels else None, None])
            imgs.append(out[0])
            masks.append(out[1])
            if cfg.fixed_attention:
                E.append(out[2])
        x = to_tensor(np.stack(imgs), self.dtype)
        Y = torch.as_tensor(np.stack(masks)).long()
        fixed = None
        if cfg.fixed_attention:
            Et = torch.as_tensor(np.stack(E)).to(self.dtype).permute(0, 3, 1, 2)
            fixed = fixed_attention_maps(Et, self.model.config.backbone.out_size)
        return x, Y, fixed

    def run_epoch(self, data, labels, on_step=None):
        """One PK-sampled pass; ``labels`` are contiguous class indices of ``data``.

        ``on_step(record)`` receives each step's loss components.
        """
        cfg = self.config
        lr = lr_schedule(self.epoch, cfg.schedule)
        for group in self.optimizer.param_groups:
            group["lr"] = lr
        self.model.train()
        self.loss.train()
        pairs = list(enumerate(labels))
        sums, n = {}, 0
        for step, idx in enumerate(pk_sampler(pairs, cfg.P, cfg.Kinst, seed=cfg.seed, epoch=self.epoch)):
            x, Y, fixed = self._batch(data, idx, step)
            ids = torch.as_tensor(labels[idx])
            out = self.model(x, fixed_attention=fixed)
            Yd = O.downsample_labels(Y, out.M.shape[-2:])
            total, terms = self.loss(out, ids, Yd, attention=not cfg.fixed_attention)
            if not torch.isfinite(total):
                raise NonFiniteLossError(f"non-finite loss at epoch {self.epoch} step {step}", batch_indices=idx)
            self.optimizer.zero_grad(set_to_none=True)
            total.backward()
            self.optimizer.step()
            self.step += 1
            n += 1
            values = {k: float(v.detach()) for k, v in {"total": total, **terms}.items()}
            for k, v in values.items():
                sums[k] = sums.get(k, 0.0) + v
            log.debug("epoch %d step %d loss %.4f", self.epoch, step, values["total"])
            if on_step is not None:
                on_step({"epoch": self.epoch, "step": step, "lr": lr, **values})
        record = {"epoch": self.epoch, "lr": lr, **{k: v / max(n, 1) for k, v in sums.items()}}
        self.history.append(record)
        self.epoch += 1
        return record

    def forward_eval(self, images, grouped_fields=None, batch_size=256):
        """Eval-mode forward in batches; yields :class:`ModelOutput` objects."""
        return forward_batches(self.model, images, grouped_fields if self.config.fixed_attention else None,
                               fixed_attention=self.config.fixed_attention, dtype=self.dtype,
                               batch_size=batch_size)


@torch.no_grad()
def forward_batches(model, images, grouped_fields=None, fixed_attention=False, dtype=torch.float32,
                    batch_size=256):
    """Eval-mode forward of ``images`` (``N x H x W x 3``); yields one output per batch."""
    model.eval()
    if fixed_attention and grouped_fields is None:
        raise InvalidConfigError("fixed attention needs grouped fields at inference")
    for s in range(0, len(images), batch_size):
        x = to_tensor(images[s:s + batch_size], dtype)
        fixed = None
        if fixed_attention:
            Et = torch.as_tensor(grouped_fields[s:s + batch_size]).to(dtype).permute(0, 3, 1, 2)
            fixed = fixed_attention_maps(Et, model.config.backbone.out_size)
        yield model(x, fixed_attention=fixed)
