"""Procedural occluded-person corpus with exact ground truth.

Each body is a set of 36 primitives, one per pose field (17 keypoints and
19 limbs).  A field's confidence at a pixel is a decreasing function of the
pixel's normalized distance to its primitive, so the pixel owner (the field
with the highest confidence) and the silhouette (confidence >= 0.5) follow
from the fields themselves.  Parsing labels are the owner's part under the
corpus grouping.  Occluders (rectangles or other identities' lower bodies)
overwrite pixels, zero the covered fields and turn covered labels into
background.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from . import fields as F
from .exceptions import InvalidConfigError

log = logging.getLogger(__name__)

SPLITS = ("train", "query", "gallery")
_SPLIT_CODE = {"train": 0, "query": 1, "gallery": 1, "test": 1}

# Shared color palette; parts draw from it so that several identities share
# the same color on a given part.
PALETTE = np.array([
    [0.85, 0.15, 0.15], [0.15, 0.45, 0.85], [0.15, 0.70, 0.25], [0.90, 0.80, 0.15],
    [0.55, 0.25, 0.70], [0.95, 0.55, 0.10], [0.10, 0.75, 0.75], [0.92, 0.92, 0.92],
    [0.12, 0.12, 0.12], [0.55, 0.35, 0.20], [0.95, 0.50, 0.70], [0.45, 0.50, 0.55],
])
TEXTURES = ("plain", "hstripes", "vstripes", "checker")


@dataclass
class CorpusConfig:
    n_train_ids: int = 50
    n_test_ids: int = 25
    images_per_id: int = 20
    n_cams: int = 4
    queries_per_id: int = 2
    height: int = 64
    width: int = 32
    n_parts: int = 5
    occlusion_prob: float = 0.3
    occluder_size: tuple = (0.3, 0.6)
    pedestrian_fraction: float = 0.5
    palette_size: int = 8
    pixel_noise: float = 0.03
    field_noise: float = 0.01
    visibility_fraction: float = 0.01
    query_occlusion_prob: float | None = None  # None: same as occlusion_prob
    label_threshold: float = F.DEFAULT_THRESHOLD

    def validate(self):
        if self.n_train_ids < 0 or self.n_test_ids < 0 or self.n_train_ids + self.n_test_ids == 0:
            raise InvalidConfigError("corpus needs at least one identity")
        if self.images_per_id <= 0:
            raise InvalidConfigError("images_per_id must be positive")
        if self.n_test_ids and self.queries_per_id >= self.images_per_id:
            raise InvalidConfigError("queries_per_id must leave gallery images")
        if self.n_cams < 1:
            raise InvalidConfigError("need at least one camera")
        if not 0.0 <= self.occlusion_prob <= 1.0:
            raise InvalidConfigError("occlusion_prob must lie in [0, 1]")
        if not 0.0 < self.label_threshold < 1.0:
            raise InvalidConfigError("label_threshold must lie in (0, 1)")
        if self.query_occlusion_prob is not None and not 0.0 <= self.query_occlusion_prob <= 1.0:
            raise InvalidConfigError("query_occlusion_prob must lie in [0, 1]")
        lo, hi = self.occluder_size
        if not 0.0 < lo <= hi <= 1.0:
            raise InvalidConfigError("occluder_size must be an increasing pair in (0, 1]")
        if not 1 <= self.palette_size <= len(PALETTE):
            raise InvalidConfigError(f"palette_size must be in 1..{len(PALETTE)}")
        if self.height < 16 or self.width < 8:
            raise InvalidConfigError("image too small to draw a body")
        F.grouping_preset(self.n_parts)
        return self

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        if "occluder_size" in d:
            d["occluder_size"] = tuple(d["occluder_size"])
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise InvalidConfigError(f"unknown corpus options: {sorted(unknown)}")
        return cls(**d)


CORPUS_PRESETS = {
    "default": {},
    # every query occluded, finer parts; mirrors the occluded benchmarks' protocol
    "occluded": {"n_parts": 8, "query_occlusion_prob": 1.0},
    "micro": {"n_train_ids": 4, "n_test_ids": 3, "images_per_id": 6, "queries_per_id": 1},
}


def corpus_preset(name) -> CorpusConfig:
    if name not in CORPUS_PRESETS:
        raise InvalidConfigError(f"unknown corpus preset {name!r}; known: {sorted(CORPUS_PRESETS)}")
    return CorpusConfig(**CORPUS_PRESETS[name]).validate()


@dataclass
class IdentitySpec:
    id: int
    part_appearance: np.ndarray  # K x 6: rgb, texture kind, period, contrast


@dataclass
class Pose:
    cx: float
    top: float
    body_height: float
    arm_angles: tuple  # left upper, left lower, right upper, right lower (radians)
    leg_angles: tuple  # left, right


@dataclass
class Occluder:
    kind: str  # "rect" or "pedestrian"
    box: tuple = (0, 0, 0, 0)  # y0, x0, y1, x1 for rectangles
    color: tuple = (0.5, 0.5, 0.5)
    texture: int = 0
    other: IdentitySpec | None = None
    other_pose: Pose | None = None


@dataclass
class SampleRecord:
    image: np.ndarray  # H x W x 3 in [0, 1], quantized to 8 bits
    id: int
    cam: int
    fields: np.ndarray  # H x W x 36 float32
    parsing_gt: np.ndarray  # H x W uint8
    part_visible_gt: np.ndarray  # K bools
    occluded: bool = False
    file: str = ""


@dataclass
class DatasetSplit:
    train: list
    query: list
    gallery: list
    config: CorpusConfig = field(default_factory=CorpusConfig)
    seed: int = 0

    @property
    def grouping(self):
        return F.grouping_preset(self.config.n_parts)

    def __getitem__(self, name):
        return getattr(self, name)


def _rng(seed, *keys):
    return np.random.default_rng(np.random.SeedSequence([int(seed), *[int(k) for k in keys]]))


def make_identity(pid, K, seed, palette_size=len(PALETTE)):
    rng = _rng(seed, 7, pid)
    app = np.empty((K, 6))
    for k in range(K):
        app[k, :3] = PALETTE[rng.integers(palette_size)]
        app[k, 3] = rng.integers(len(TEXTURES))
        app[k, 4] = rng.integers(2, 5)
        app[k, 5] = rng.uniform(0.25, 0.45)
    return IdentitySpec(id=int(pid), part_appearance=app)


def sample_pose(rng, H, W):
    hb = rng.uniform(0.86, 0.94) * H
    top = rng.uniform(0.01, H - hb - 0.01 * H)
    return Pose(
        cx=W / 2 + rng.uniform(-0.05, 0.05) * W,
        top=top,
        body_height=hb,
        arm_angles=tuple(rng.uniform([0.03, 0.0, 0.03, 0.0], [0.2, 0.15, 0.2, 0.15])),
        leg_angles=tuple(rng.uniform(0.0, 0.12, size=2)),
    )


def keypoints(pose: Pose):
    """17 COCO keypoints ``(x, y)`` plus head center and toe points."""
    hb, cx, top = pose.body_height, pose.cx, pose.top
    kp = np.zeros((17, 2))
    head = np.array([cx, top + 0.085 * hb])
    kp[0] = head + [0, 0.015 * hb]
    kp[1] = head + [0.03 * hb, -0.005 * hb]
    kp[2] = head + [-0.03 * hb, -0.005 * hb]
    kp[3] = head + [0.06 * hb, 0.005 * hb]
    kp[4] = head + [-0.06 * hb, 0.005 * hb]
    sy, hy = top + 0.21 * hb, top + 0.52 * hb
    # image-left is the person's right side
    kp[5] = [cx + 0.11 * hb, sy]
    kp[6] = [cx - 0.11 * hb, sy]
    lu, ll, ru, rl = pose.arm_angles
    up, low = 0.16 * hb, 0.15 * hb
    kp[7] = kp[5] + up * np.array([math.sin(lu), math.cos(lu)])
    kp[9] = kp[7] + low * np.array([math.sin(lu + ll), math.cos(lu + ll)])
    kp[8] = kp[6] + up * np.array([-math.sin(ru), math.cos(ru)])
    kp[10] = kp[8] + low * np.array([-math.sin(ru + rl), math.cos(ru + rl)])
    kp[11] = [cx + 0.07 * hb, hy]
    kp[12] = [cx - 0.07 * hb, hy]
    thigh, shin = 0.2 * hb, 0.2 * hb
    la, ra = pose.leg_angles
    kp[13] = kp[11] + thigh * np.array([math.sin(la), math.cos(la)])
    kp[15] = kp[13] + shin * np.array([math.sin(la), math.cos(la)])
    kp[14] = kp[12] + thigh * np.array([-math.sin(ra), math.cos(ra)])
    kp[16] = kp[14] + shin * np.array([-math.sin(ra), math.cos(ra)])
    toes = np.array([kp[15] + [0.03 * hb, 0.045 * hb], kp[16] + [-0.03 * hb, 0.045 * hb]])
    return kp, head, toes


def _seg_dist(px, py, a, b):
    ab = b - a
    denom = float(ab @ ab)
    if denom == 0.0:
        return np.hypot(px - a[0], py - a[1])
    t = np.clip(((px - a[0]) * ab[0] + (py - a[1]) * ab[1]) / denom, 0.0, 1.0)
    return np.hypot(px - a[0] - t * ab[0], py - a[1] - t * ab[1])


def _tri_dist(px, py, p, q, s):
    """Distance to a filled triangle (0 inside)."""
    def side(a, b):
        return (b[0] - a[0]) * (py - a[1]) - (b[1] - a[1]) * (px - a[0])

    d1, d2, d3 = side(p, q), side(q, s), side(s, p)
    inside = ((d1 >= 0) & (d2 >= 0) & (d3 >= 0)) | ((d1 <= 0) & (d2 <= 0) & (d3 <= 0))
    d = np.minimum(np.minimum(_seg_dist(px, py, p, q), _seg_dist(px, py, q, s)), _seg_dist(px, py, s, p))
    return np.where(inside, 0.0, d)


def _confidence(u):
    return 1.0 / (1.0 + u ** 4)


def normalized_distances(pose: Pose, H, W):
    """``H x W x 36`` normalized distances of every pixel to every field primitive."""
    kp, head, toes = keypoints(pose)
    hb = pose.body_height
    py, px = np.mgrid[0:H, 0:W].astype(np.float64)
    px += 0.5
    py += 0.5
    u = np.empty((H, W, F.N_FIELDS))
    radius = {0: 0.085, 1: 0.02, 2: 0.02, 3: 0.025, 4: 0.025, 5: 0.04, 6: 0.04, 7: 0.04, 8: 0.04,
              9: 0.035, 10: 0.035, 11: 0.04, 12: 0.04, 13: 0.04, 14: 0.04, 15: 0.03, 16: 0.03}
    for i in range(17):
        a, b = kp[i], kp[i]
        if i == 0:
            a = b = head
        elif i in (15, 16):
            b = toes[i - 15]
        u[:, :, i] = _seg_dist(px, py, a, b) / (radius[i] * hb)
    center = (kp[5] + kp[6] + kp[11] + kp[12]) / 4
    triangles = {(5, 6): (kp[5], kp[6]), (11, 12): (kp[11], kp[12]),
                 (5, 11): (kp[5], kp[11]), (6, 12): (kp[6], kp[12])}
    limb_radius = {(15, 13): 0.038, (13, 11): 0.045, (16, 14): 0.038, (14, 12): 0.045,
                   (5, 7): 0.036, (6, 8): 0.036, (7, 9): 0.032, (8, 10): 0.032,
                   (1, 2): 0.012, (0, 1): 0.012, (0, 2): 0.012, (1, 3): 0.012, (2, 4): 0.012,
                   (3, 5): 0.03, (4, 6): 0.03}
    for j, (a, b) in enumerate(F.SKELETON):
        c = 17 + j
        if (a, b) in triangles:
            p, q = triangles[(a, b)]
            # torso triangles sit behind limbs: their interior is at u = 0.5
            u[:, :, c] = 0.5 + _tri_dist(px, py, p, q, center) / (0.05 * hb)
        else:
            u[:, :, c] = _seg_dist(px, py, kp[a], kp[b]) / (limb_radius[(a, b)] * hb)
    return u


def body_fields(pose: Pose, H, W):
    """Noise-free field stack and owner map (-1 outside the silhouette)."""
    u = normalized_distances(pose, H, W)
    fields = _confidence(u)
    owner = u.argmin(axis=2)
    owner[fields.max(axis=2) < F.DEFAULT_THRESHOLD] = -1
    return fields, owner


def _texture(kind, period, contrast, H, W, phase):
    yy, xx = np.mgrid[0:H, 0:W]
    if kind == 1:
        t = ((yy + phase) // period) % 2
    elif kind == 2:
        t = ((xx + phase) // period) % 2
    elif kind == 3:
        t = (((yy + phase) // period) + ((xx + phase) // period)) % 2
    else:
        return np.ones((H, W))
    return 1.0 - contrast * t


def _paint_body(img, owner, identity: IdentitySpec, part_of_field, mask, rng):
    H, W = owner.shape
    phase = int(rng.integers(0, 4))
    part = np.where(owner >= 0, part_of_field[np.maximum(owner, 0)], -1)
    for k, app in enumerate(identity.part_appearance):
        sel = (part == k) & mask
        if not sel.any():
            continue
        shade = _texture(int(app[3]), int(app[4]), app[5], H, W, phase)
        img[sel] = app[:3] * shade[sel][:, None]


def _camera(seed, cam):
    rng = _rng(seed, 3, cam)
    return {
        "gain": rng.uniform(0.8, 1.15),
        "tint": rng.uniform(-0.06, 0.06, size=3),
        "background": rng.uniform(0.25, 0.65, size=3),
    }


def _background(rng, cam, H, W):
    base = cam["background"] + rng.uniform(-0.1, 0.1, size=3)
    yy = np.linspace(0, 1, H)[:, None, None]
    grad = rng.uniform(-0.15, 0.15, size=3)
    img = np.clip(base + grad * yy, 0, 1) * np.ones((H, W, 3))
    for _ in range(rng.integers(1, 4)):
        h, w = rng.integers(3, H // 2), rng.integers(2, W // 2)
        y0, x0 = rng.integers(0, H - h), rng.integers(0, W - w)
        img[y0:y0 + h, x0:x0 + w] = np.clip(base + rng.uniform(-0.2, 0.2, size=3), 0, 1)
    return img


def _draw_occluder(rng, cfg: CorpusConfig, identities, self_id, seed):
    H, W = cfg.height, cfg.width
    lo, hi = cfg.occluder_size
    if rng.random() < cfg.pedestrian_fraction and len(identities) > 1:
        others = [i for i in identities if i != self_id]
        other = make_identity(others[rng.integers(len(others))], cfg.n_parts, seed, cfg.palette_size)
        pose = sample_pose(rng, H, W)
        # shift the other person so their lower body lands on our lower body
        frac = rng.uniform(lo, hi)
        pose.top = pose.top + (1.0 - frac) * 0.5 * pose.body_height * rng.uniform(0.0, 0.6)
        pose.cx = pose.cx + rng.choice([-1, 1]) * rng.uniform(0.1, 0.45) * W
        return Occluder(kind="pedestrian", other=other, other_pose=pose)
    side = rng.choice(["bottom", "bottom", "bottom", "left", "right"])
    if side == "bottom":
        h = int(round(rng.uniform(lo, hi) * H))
        w = int(round(rng.uniform(0.5, 1.0) * W))
        x0 = int(rng.integers(0, W - w + 1))
        box = (H - h, x0, H, x0 + w)
    else:
        w = int(round(rng.uniform(lo, hi) * W))
        h = int(round(rng.uniform(0.5, 1.0) * H))
        y0 = int(rng.integers(0, H - h + 1))
        box = (y0, 0, y0 + h, w) if side == "left" else (y0, W - w, y0 + h, W)
    return Occluder(kind="rect", box=box, color=tuple(rng.uniform(0.05, 0.95, size=3)),
                    texture=int(rng.integers(len(TEXTURES))))


def _lower_body_fields():
    g = F.grouping_preset(5)
    return set(g.groups[3]) | set(g.groups[4]) | set(F._REGIONS["lower_torso"])


def render_sample(identity: IdentitySpec, pose: Pose, occlusion: Occluder | None, cam: int,
                  config: CorpusConfig | None = None, seed: int = 0, rng=None):
    """Render one sample; returns ``None`` when the occluder hides the whole person."""
    cfg = config or CorpusConfig()
    H, W = cfg.height, cfg.width
    rng = rng if rng is not None else _rng(seed, 11, identity.id, cam)
    grouping = F.grouping_preset(cfg.n_parts)
    pof = grouping.part_of_field()
    camp = _camera(seed, cam)

    fields, owner = body_fields(pose, H, W)
    body = owner >= 0
    if not body.any():
        raise ValueError("pose leaves no body pixel in the frame")
    # labels follow the grouping rule on the clean field stack (lambda_t may differ from the silhouette cut)
    parsing = F.labels_from_fields(F.group_max(fields, grouping), cfg.label_threshold)
    img = _background(rng, camp, H, W)
    _paint_body(img, owner, identity, pof, body, rng)
    edge = body & (fields.max(axis=2) < 0.6)
    img[edge] *= 0.8

    covered = np.zeros((H, W), dtype=bool)
    if occlusion is not None:
        if occlusion.kind == "rect":
            y0, x0, y1, x1 = occlusion.box
            covered[y0:y1, x0:x1] = True
            tex = _texture(occlusion.texture, 3, 0.3, H, W, 0)
            img[covered] = np.asarray(occlusion.color) * tex[covered][:, None]
        else:
            ofields, oowner = body_fields(occlusion.other_pose, H, W)
            lower = np.array(sorted(_lower_body_fields()))
            covered = (oowner >= 0) & np.isin(oowner, lower)
            _paint_body(img, oowner, occlusion.other, pof, covered, rng)
        if not (body & ~covered).any():
            return None

    img = np.clip(img * camp["gain"] + camp["tint"], 0, 1)
    img = np.clip(img + rng.normal(0, cfg.pixel_noise, size=img.shape), 0, 1)
    img = np.round(img * 255) / 255

    noisy = np.clip(fields + rng.normal(0, cfg.field_noise, size=fields.shape), 0, 1)
    noisy[covered] = 0.0
    parsing[covered] = 0

    part = np.where(body, pof[np.maximum(owner, 0)], -1)
    visible = np.zeros(grouping.K, dtype=bool)
    for k in range(grouping.K):
        area = int((part == k).sum())
        remain = int(((part == k) & ~covered).sum())
        visible[k] = area > 0 and remain >= max(1, math.ceil(cfg.visibility_fraction * area))
    return SampleRecord(image=img.astype(np.float32), id=identity.id, cam=int(cam),
                        fields=noisy.astype(np.float32), parsing_gt=parsing,
                        part_visible_gt=visible, occluded=occlusion is not None)


def _sample(cfg, seed, split_code, pid, j, identities, occlusion_prob=None):
    rng = _rng(seed, 19, split_code, pid, j)
    ident = make_identity(pid, cfg.n_parts, seed, cfg.palette_size)
    cam = int(rng.integers(cfg.n_cams))
    rho = cfg.occlusion_prob if occlusion_prob is None else occlusion_prob
    for _ in range(100):
        pose = sample_pose(rng, cfg.height, cfg.width)
        occ = _draw_occluder(rng, cfg, identities, pid, seed) if rng.random() < rho else None
        rec = render_sample(ident, pose, occ, cam, cfg, seed, rng)
        if rec is not None:
            rec.file = f"{pid:04d}_c{cam}_{j:03d}"
            return rec
    raise RuntimeError("could not draw a non-degenerate occluder")


def _assign_queries(cams, n_query):
    q, seen = [], set()
    for j, c in enumerate(cams):
        if c not in seen and len(q) < n_query:
            q.append(j)
            seen.add(c)
    return q


def iter_corpus(config: CorpusConfig, seed: int):
    """Yield ``(split_name, SampleRecord)`` in a fixed order."""
    cfg = config.validate()
    train_ids = list(range(cfg.n_train_ids))
    test_ids = list(range(cfg.n_train_ids, cfg.n_train_ids + cfg.n_test_ids))
    for pid in train_ids:
        for j in range(cfg.images_per_id):
            yield "train", _sample(cfg, seed, 0, pid, j, train_ids)
    for pid in test_ids:
        # the camera is the first draw of each sample's stream, so queries can be chosen up front
        cams = [int(_rng(seed, 19, 1, pid, j).integers(cfg.n_cams)) for j in range(cfg.images_per_id)]
        qidx = set(_assign_queries(cams, cfg.queries_per_id))
        recs = [_sample(cfg, seed, 1, pid, j, test_ids,
                        cfg.query_occlusion_prob if j in qidx else None) for j in range(cfg.images_per_id)]
        gallery_cams = {r.cam for j, r in enumerate(recs) if j not in qidx}
        if not gallery_cams - {recs[j].cam for j in qidx} and len(gallery_cams) == 1:
            log.warning("identity %d has no cross-camera gallery image", pid)
        for j, r in enumerate(recs):
            yield ("query" if j in qidx else "gallery"), r


def generate_dataset(config: CorpusConfig | None = None, seed: int = 0) -> DatasetSplit:
    cfg = config or CorpusConfig()
    out = {s: [] for s in SPLITS}
    for split, rec in iter_corpus(cfg, seed):
        out[split].append(rec)
    return DatasetSplit(out["train"], out["query"], out["gallery"], config=cfg, seed=seed)


# ---------------------------------------------------------------- disk layout

def _write_record(root, split, rec, handle):
    d = Path(root) / split
    Image.fromarray(np.round(rec.image * 255).astype(np.uint8), mode="RGB").save(
        d / "images" / f"{rec.file}.png", format="PNG")
    F.write_label_png(d / "masks" / f"{rec.file}.png", rec.parsing_gt)
    F.write_fstk(d / "fields" / f"{rec.file}.fstk", rec.fields)
    handle.write(json.dumps({"file": rec.file, "id": rec.id, "cam": rec.cam,
                             "part_visible": [bool(v) for v in rec.part_visible_gt],
                             "occluded": bool(rec.occluded)}) + "\n")


def _corpus_header(cfg, seed):
    g = F.grouping_preset(cfg.n_parts)
    return {"seed": seed, "config": asdict(cfg), "K": g.K, "part_names": list(g.part_names),
            "field_names": F.FIELD_NAMES}


def write_corpus(corpus, root, seed=None):
    """Write a corpus to ``root``.

    ``corpus`` is either a :class:`DatasetSplit` or a :class:`CorpusConfig`, in
    which case samples are generated and written one at a time.
    """
    root = Path(root)
    if isinstance(corpus, DatasetSplit):
        cfg, seed = corpus.config, corpus.seed
        stream = ((s, r) for s in SPLITS for r in corpus[s])
    else:
        cfg, seed = corpus, int(seed or 0)
        stream = iter_corpus(cfg, seed)
    for s in SPLITS:
        for sub in ("images", "masks", "fields"):
            (root / s / sub).mkdir(parents=True, exist_ok=True)
    handles = {s: open(root / s / "meta.jsonl", "w") for s in SPLITS}
    try:
        for split, rec in stream:
            _write_record(root, split, rec, handles[split])
    finally:
        for h in handles.values():
            h.close()
    (root / "corpus.json").write_text(json.dumps(_corpus_header(cfg, seed), indent=2, sort_keys=True) + "\n")
    return root


@dataclass
class SplitArrays:
    """Dense arrays of one split, as consumed by training and embedding."""

    files: list
    images: np.ndarray  # N x H x W x 3 float32
    ids: np.ndarray
    cams: np.ndarray
    masks: np.ndarray  # N x H x W uint8
    part_visible: np.ndarray  # N x K bool
    grouped_fields: np.ndarray | None = None  # N x H x W x K float32

    def __len__(self):
        return len(self.files)

    def subset(self, idx):
        idx = np.asarray(idx)
        return SplitArrays(
            [self.files[i] for i in idx], self.images[idx], self.ids[idx], self.cams[idx],
            self.masks[idx], self.part_visible[idx],
            None if self.grouped_fields is None else self.grouped_fields[idx])


def read_corpus_header(root):
    return json.loads((Path(root) / "corpus.json").read_text())


def load_split(root, split, grouped_fields=False) -> SplitArrays:
    root = Path(root)
    header = read_corpus_header(root)
    grouping = F.grouping_preset(header["K"])
    d = root / split
    metas = [json.loads(line) for line in (d / "meta.jsonl").read_text().splitlines() if line.strip()]
    images, masks, E = [], [], []
    for m in metas:
        with Image.open(d / "images" / f"{m['file']}.png") as im:
            images.append(np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0)
        masks.append(F.read_label_png(d / "masks" / f"{m['file']}.png"))
        if grouped_fields:
            E.append(F.group_max(F.read_fstk(d / "fields" / f"{m['file']}.fstk"), grouping).astype(np.float32))
    H, W = header["config"]["height"], header["config"]["width"]
    return SplitArrays(
        files=[m["file"] for m in metas],
        images=np.stack(images) if images else np.zeros((0, H, W, 3), np.float32),
        ids=np.array([m["id"] for m in metas], dtype=np.int64),
        cams=np.array([m["cam"] for m in metas], dtype=np.int64),
        masks=np.stack(masks) if masks else np.zeros((0, H, W), np.uint8),
        part_visible=np.array([m["part_visible"] for m in metas], dtype=bool).reshape(len(metas), header["K"]),
        grouped_fields=np.stack(E) if E else None,
    )


def split_arrays(records, grouping=None, grouped_fields=False) -> SplitArrays:
    """In-memory counterpart of :func:`load_split`."""
    E = None
    if grouped_fields:
        E = np.stack([F.group_max(r.fields, grouping).astype(np.float32) for r in records])
    return SplitArrays(
        files=[r.file for r in records],
        images=np.stack([r.image for r in records]).astype(np.float32),
        ids=np.array([r.id for r in records], dtype=np.int64),
        cams=np.array([r.cam for r in records], dtype=np.int64),
        masks=np.stack([r.parsing_gt for r in records]),
        part_visible=np.stack([r.part_visible_gt for r in records]),
        grouped_fields=E,
    )


# ---------------------------------------------------------------- PK sampling

def pk_sampler(labels, P=16, Kinst=4, seed=0, epoch=0):
    """Yield batches of ``P * Kinst`` indices: ``P`` identities, ``Kinst`` images each.

    ``labels`` is a sequence of ``(index, id)`` pairs.  Each identity's images
    are shuffled and cut into chunks of ``Kinst`` (identities with fewer images
    are sampled with replacement).  Batches draw ``P`` identities that still
    have chunks; identities never drawn by the time fewer than ``P`` remain are
    packed into a final batch, topped up with random others, so one epoch sees
    every identity.
    """
    by_id = {}
    for idx, pid in labels:
        by_id.setdefault(int(pid), []).append(int(idx))
    ids = sorted(by_id)
    if len(ids) < P:
        raise InvalidConfigError(f"need at least P={P} identities, got {len(ids)}")
    if Kinst < 1:
        raise InvalidConfigError("Kinst must be positive")
    rng = _rng(seed, 23, epoch)
    chunks = {}
    for pid in ids:
        imgs = np.array(by_id[pid])
        if len(imgs) < Kinst:
            imgs = rng.choice(imgs, size=Kinst, replace=True)
        else:
            imgs = rng.permutation(imgs)
        n = len(imgs) // Kinst
        chunks[pid] = [list(imgs[i * Kinst:(i + 1) * Kinst]) for i in range(n)]
    seen = set()
    while True:
        avail = [pid for pid in ids if chunks[pid]]
        if len(avail) < P:
            break
        chosen = rng.choice(avail, size=P, replace=False)
        batch = []
        for pid in chosen:
            batch.extend(int(i) for i in chunks[int(pid)].pop())
            seen.add(int(pid))
        yield batch
    missing = [pid for pid in ids if pid not in seen]
    for start in range(0, len(missing), P):
        group = missing[start:start + P]
        pool = [pid for pid in ids if pid not in group]
        group += [int(x) for x in rng.choice(pool, size=P - len(group), replace=False)]
        batch = []
        for pid in group:
            imgs = by_id[pid]
            batch.extend(int(i) for i in rng.choice(imgs, size=Kinst, replace=len(imgs) < Kinst))
        yield batch
