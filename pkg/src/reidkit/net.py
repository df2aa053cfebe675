"""Backbone, pixel-wise part classifier, attention pooling and visibility.

Tensors are channel-first: appearance maps are ``B x C x H x W`` and
attention maps ``B x (K+1) x H x W`` with channel 0 the background.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field

import numpy as np
import torch
import torch.nn as nn

from .exceptions import FingerprintError, ShapeError

GWAP_EPS = 1e-6
VISIBILITY_THRESHOLD = 0.4


@dataclass
class BackboneConfig:
    channels: tuple = (16, 32, 64)
    strides: tuple = (2, 2, 1)
    convs_per_block: int = 2
    input_size: tuple = (64, 32)

    @property
    def out_size(self):
        h, w = self.input_size
        for s in self.strides:
            h, w = h // s, w // s
        return h, w

    @property
    def dim(self):
        return self.channels[-1]


class Backbone(nn.Module):
    """Conv blocks (conv -> norm -> ReLU, then downsample by the block stride)."""

    def __init__(self, config: BackboneConfig | None = None):
        super().__init__()
        self.config = config or BackboneConfig()
        layers, c_in = [], 3
        for c_out, stride in zip(self.config.channels, self.config.strides):
            for _ in range(self.config.convs_per_block):
                layers += [nn.Conv2d(c_in, c_out, 3, padding=1, bias=False), nn.BatchNorm2d(c_out), nn.ReLU(inplace=True)]
                c_in = c_out
            if stride > 1:
                layers.append(nn.MaxPool2d(stride))
        self.body = nn.Sequential(*layers)

    def forward(self, x):
        if tuple(x.shape[-2:]) != tuple(self.config.input_size) or x.shape[-3] != 3:
            raise ShapeError(f"expected B x 3 x {self.config.input_size}, got {tuple(x.shape)}")
        return self.body(x)


def classify_pixels(G, P):
    """Softmax over ``K+1`` classes of the per-pixel products ``G(h, w) . P_k``."""
    if G.shape[1] != P.shape[1]:
        raise ShapeError(f"feature dim {G.shape[1]} does not match classifier dim {P.shape[1]}")
    return torch.softmax(torch.einsum("bchw,kc->bkhw", G, P), dim=1)


def foreground_map(M):
    """Max over the part channels (background excluded) -> ``B x H x W``."""
    return M[:, 1:].amax(dim=1)


def gwap(G, m, eps=GWAP_EPS):
    """Attention-weighted spatial mean of ``G`` (``B x C x H x W``) with weights ``m`` (``B x H x W``)."""
    if G.shape[-2:] != m.shape[-2:]:
        raise ShapeError("feature map and weights must share spatial size")
    num = torch.einsum("bchw,bhw->bc", G, m)
    den = m.sum(dim=(-2, -1)).clamp_min(eps)
    return num / den[:, None]


def pool_embeddings(G, M):
    """Holistic and part embeddings.

    Returns ``f_g`` (plain mean), ``f_f`` (pooled by the foreground map),
    ``f_c`` (concatenated parts) and ``parts`` shaped ``B x K x C``.
    """
    f_g = G.mean(dim=(-2, -1))
    f_f = gwap(G, foreground_map(M))
    parts = torch.stack([gwap(G, M[:, k]) for k in range(1, M.shape[1])], dim=1)
    f_c = parts.reshape(parts.shape[0], -1)
    return f_g, f_f, f_c, parts


def visibility(M_k, threshold=VISIBILITY_THRESHOLD):
    """1 where the map's spatial max strictly exceeds ``threshold``; batched over leading dims."""
    if not 0.0 < threshold < 1.0:
        raise ValueError("threshold must lie in (0, 1)")
    return (M_k.flatten(start_dim=-2).amax(dim=-1) > threshold)


@dataclass
class ModelOutput:
    G: torch.Tensor
    M: torch.Tensor
    M_f: torch.Tensor
    f_g: torch.Tensor
    f_f: torch.Tensor
    f_c: torch.Tensor
    parts: torch.Tensor  # B x K x C
    v: torch.Tensor  # B x (K+3), ordered (g, f, c, 1..K)

    def embeddings(self):
        """Named embeddings as used by the loss grid."""
        return {"g": self.f_g, "f": self.f_f, "c": self.f_c, "parts": self.parts}


@dataclass
class NetConfig:
    n_parts: int = 5
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    visibility_threshold: float = VISIBILITY_THRESHOLD

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        bb = dict(d.pop("backbone", {}))
        for key in ("channels", "strides", "input_size"):
            if key in bb:
                bb[key] = tuple(bb[key])
        return cls(backbone=BackboneConfig(**bb), **d)


class PartNet(nn.Module):
    """Backbone plus body part attention and global-local pooling."""

    def __init__(self, config: NetConfig | None = None):
        super().__init__()
        self.config = config or NetConfig()
        self.backbone = Backbone(self.config.backbone)
        self.part_classifier = nn.Conv2d(self.config.backbone.dim, self.config.n_parts + 1, 1, bias=False)

    @property
    def n_parts(self):
        return self.config.n_parts

    def forward(self, x, fixed_attention=None):
        """Forward pass.

        ``fixed_attention`` (``B x K x H' x W'``), when given, replaces the
        classifier's part maps; the background channel is then zero.
        """
        G = self.backbone(x)
        if fixed_attention is None:
            M = classify_pixels(G, self.part_classifier.weight[:, :, 0, 0])
        else:
            if fixed_attention.shape[1] != self.n_parts or fixed_attention.shape[-2:] != G.shape[-2:]:
                raise ShapeError(f"fixed attention must be B x {self.n_parts} x {tuple(G.shape[-2:])}")
            bg = torch.zeros_like(fixed_attention[:, :1])
            M = torch.cat([bg, fixed_attention.to(G.dtype)], dim=1)
        f_g, f_f, f_c, parts = pool_embeddings(G, M)
        vis = visibility(M[:, 1:], self.config.visibility_threshold)
        ones = torch.ones(vis.shape[0], 3, dtype=torch.bool, device=vis.device)
        return ModelOutput(G=G, M=M, M_f=foreground_map(M), f_g=f_g, f_f=f_f, f_c=f_c,
                           parts=parts, v=torch.cat([ones, vis], dim=1))


# ---------------------------------------------------------------- checkpoints

def fingerprint(arch: dict) -> str:
    """Stable hash of an architecture description."""
    blob = json.dumps(arch, sort_keys=True, separators=(",", ":"), default=list)
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


def save_checkpoint(path, module: nn.Module, arch: dict, extra: dict | None = None):
    """``.npz`` container: one array per state entry plus ``__meta__`` JSON.

    Floating arrays keep the module's dtype (float32 by default); the metadata
    records the architecture, its fingerprint and each entry's shape.
    """
    state = module.state_dict()
    arrays = {name: t.detach().cpu().numpy() for name, t in state.items()}
    meta = {"arch": arch, "fingerprint": fingerprint(arch),
            "shapes": {k: list(v.shape) for k, v in arrays.items()}, "extra": extra or {}}
    with open(path, "wb") as fh:
        np.savez(fh, __meta__=np.frombuffer(json.dumps(meta, sort_keys=True).encode(), dtype=np.uint8), **arrays)
    return meta["fingerprint"]


def read_checkpoint(path):
    with np.load(path, allow_pickle=False) as z:
        meta = json.loads(bytes(z["__meta__"]).decode())
        arrays = {k: z[k] for k in z.files if k != "__meta__"}
    return meta, arrays


def load_state(module: nn.Module, arrays: dict, expected_fingerprint=None, meta=None):
    """Copy arrays into ``module``; shape or fingerprint mismatches raise."""
    if expected_fingerprint is not None and meta is not None and meta["fingerprint"] != expected_fingerprint:
        raise FingerprintError(f"checkpoint fingerprint {meta['fingerprint']} != config {expected_fingerprint}")
    state = module.state_dict()
    missing = set(state) - set(arrays)
    if missing:
        raise FingerprintError(f"checkpoint lacks entries: {sorted(missing)[:5]}")
    for name, t in state.items():
        a = arrays[name]
        if tuple(a.shape) != tuple(t.shape):
            raise ShapeError(f"{name}: checkpoint shape {a.shape} != model shape {tuple(t.shape)}")
        with torch.no_grad():
            t.copy_(torch.from_numpy(np.asarray(a)).to(t.dtype))
    return module
