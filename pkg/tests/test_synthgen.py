import hashlib
from collections import Counter

import numpy as np
import pytest

from reidkit import fields as F
from reidkit import synthgen as S
from reidkit.exceptions import InvalidConfigError

MICRO = S.CorpusConfig(**S.CORPUS_PRESETS["micro"])


def _digest(root):
    h = {}
    for p in sorted(root.rglob("*")):
        if p.is_file():
            h[str(p.relative_to(root))] = hashlib.sha256(p.read_bytes()).hexdigest()
    return h


def test_corpus_bytes_identical(tmp_path):
    a = S.write_corpus(MICRO, tmp_path / "a", seed=3)
    b = S.write_corpus(MICRO, tmp_path / "b", seed=3)
    da, db = _digest(a), _digest(b)
    assert da == db and len(da) > 10
    c = S.write_corpus(MICRO, tmp_path / "c", seed=4)
    assert _digest(c) != da


def test_counts_and_splits():
    d = S.generate_dataset(MICRO, seed=0)
    cfg = MICRO
    assert len(d.train) == cfg.n_train_ids * cfg.images_per_id
    assert len(d.query) + len(d.gallery) == cfg.n_test_ids * cfg.images_per_id
    assert len(d.query) == cfg.n_test_ids * cfg.queries_per_id
    tr = {r.id for r in d.train}
    q = {r.id for r in d.query}
    g = {r.id for r in d.gallery}
    assert not tr & (q | g)
    assert q <= g
    for r in d.train + d.query + d.gallery:
        assert r.image.shape == (cfg.height, cfg.width, 3)
        assert 0.0 <= r.image.min() and r.image.max() <= 1.0
        assert r.fields.shape == (cfg.height, cfg.width, 36)
        assert r.parsing_gt.max() <= cfg.n_parts
        assert r.part_visible_gt.shape == (cfg.n_parts,)


def test_invalid_configs():
    with pytest.raises(InvalidConfigError):
        S.generate_dataset(S.CorpusConfig(n_train_ids=0, n_test_ids=0))
    with pytest.raises(InvalidConfigError):
        S.generate_dataset(S.CorpusConfig(images_per_id=0))
    with pytest.raises(InvalidConfigError):
        S.CorpusConfig(occlusion_prob=1.5).validate()
    with pytest.raises(InvalidConfigError):
        S.CorpusConfig.from_dict({"n_ids": 3})
    with pytest.raises(InvalidConfigError):
        S.corpus_preset("nope")


def test_no_occlusion_all_visible():
    cfg = S.CorpusConfig(n_train_ids=6, n_test_ids=2, images_per_id=5, queries_per_id=1, occlusion_prob=0.0)
    d = S.generate_dataset(cfg, seed=1)
    assert all(r.part_visible_gt.all() and not r.occluded for r in d.train + d.query + d.gallery)


def test_hidden_fraction_matches_occlusion_rate():
    cfg = S.CorpusConfig(n_train_ids=50, n_test_ids=0, images_per_id=20, occlusion_prob=0.5)
    d = S.generate_dataset(cfg, seed=2)
    assert len(d.train) == 1000
    occluded = np.array([r.occluded for r in d.train])
    hidden = np.array([not r.part_visible_gt.all() for r in d.train])
    assert abs(occluded.mean() - 0.5) < 0.05
    # only occluded samples can lose a part
    assert not np.any(hidden & ~occluded)
    assert hidden.mean() > 0.0


def test_occluded_queries_preset():
    cfg = S.CorpusConfig(n_train_ids=2, n_test_ids=4, images_per_id=6, queries_per_id=2,
                         query_occlusion_prob=1.0, occlusion_prob=0.0)
    d = S.generate_dataset(cfg, seed=0)
    assert all(r.occluded for r in d.query)
    assert not any(r.occluded for r in d.gallery + d.train)
    assert S.corpus_preset("occluded").n_parts == 8


def _clean(seed=0, cfg=None):
    cfg = cfg or S.CorpusConfig()
    rng = np.random.default_rng(seed)
    ident = S.make_identity(3, cfg.n_parts, 0)
    pose = S.sample_pose(rng, cfg.height, cfg.width)
    return cfg, ident, pose


def test_render_without_occluder_matches_silhouettes():
    cfg, ident, pose = _clean()
    rec = S.render_sample(ident, pose, None, cam=0, config=cfg)
    fields, owner = S.body_fields(pose, cfg.height, cfg.width)
    g = F.grouping_preset(cfg.n_parts)
    pof = g.part_of_field()
    ref = F.labels_from_fields(F.group_max(fields, g))
    np.testing.assert_array_equal(rec.parsing_gt, ref)
    # foreground labels name the owning field's part
    fg = rec.parsing_gt > 0
    assert np.all(rec.parsing_gt[fg] == pof[owner[fg]] + 1)
    assert rec.part_visible_gt.all()


def test_field_label_round_trip():
    cfg = S.CorpusConfig(n_train_ids=10, n_test_ids=0, images_per_id=5)
    d = S.generate_dataset(cfg, seed=5)
    g = F.grouping_preset(cfg.n_parts)
    agree = total = 0
    for r in d.train:
        lab = F.labels_from_fields(F.group_max(r.fields, g))
        gt = r.parsing_gt
        # boundary: any 4-neighbour carries a different label
        p = np.pad(gt, 1, mode="edge")
        inner = ((p[1:-1, 1:-1] == p[:-2, 1:-1]) & (p[1:-1, 1:-1] == p[2:, 1:-1])
                 & (p[1:-1, 1:-1] == p[1:-1, :-2]) & (p[1:-1, 1:-1] == p[1:-1, 2:]))
        agree += int((lab == gt)[inner].sum())
        total += int(inner.sum())
    assert agree / total >= 0.99


def _legs_rows(rec, legs):
    rows = np.nonzero((rec.parsing_gt == legs + 1).any(axis=1))[0]
    return rows.min(), rows.max() + 1


def test_occluder_over_legs_hides_legs():
    cfg, ident, pose = _clean(1)
    legs = F.grouping_preset(5).part_names.index("legs")
    clean = S.render_sample(ident, pose, None, 0, cfg)
    y0, _ = _legs_rows(clean, legs)
    occ = S.Occluder(kind="rect", box=(y0, 0, cfg.height, cfg.width))
    rec = S.render_sample(ident, pose, occ, 0, cfg)
    assert not rec.part_visible_gt[legs]
    assert rec.part_visible_gt[F.grouping_preset(5).part_names.index("head")]
    assert np.all(rec.parsing_gt[y0:] == 0)
    assert np.all(rec.fields[y0:] == 0)


def test_visibility_monotone_in_coverage():
    cfg, ident, pose = _clean(2)
    prev = None
    for y0 in range(cfg.height - 1, 8, -3):
        rec = S.render_sample(ident, pose, S.Occluder(kind="rect", box=(y0, 0, cfg.height, cfg.width)), 0, cfg)
        if prev is not None:
            # growing the occluder never makes a hidden part visible again
            assert not np.any(rec.part_visible_gt & ~prev)
        prev = rec.part_visible_gt


def test_full_cover_is_rejected():
    cfg, ident, pose = _clean(3)
    occ = S.Occluder(kind="rect", box=(0, 0, cfg.height, cfg.width))
    assert S.render_sample(ident, pose, occ, 0, cfg) is None


def test_identity_appearance_deterministic():
    a = S.make_identity(7, 5, seed=11)
    b = S.make_identity(7, 5, seed=11)
    np.testing.assert_array_equal(a.part_appearance, b.part_appearance)


def test_load_split_matches_records(tmp_path):
    d = S.generate_dataset(MICRO, seed=0)
    S.write_corpus(d, tmp_path)
    arr = S.load_split(tmp_path, "gallery", grouped_fields=True)
    ref = S.split_arrays(d.gallery, d.grouping, grouped_fields=True)
    assert arr.files == ref.files
    np.testing.assert_array_equal(arr.ids, ref.ids)
    np.testing.assert_array_equal(arr.masks, ref.masks)
    np.testing.assert_array_equal(arr.part_visible, ref.part_visible)
    np.testing.assert_allclose(arr.images, ref.images, atol=1e-6)
    np.testing.assert_array_equal(arr.grouped_fields, ref.grouped_fields)
    line = (tmp_path / "gallery" / "meta.jsonl").read_text().splitlines()[0]
    assert {"file", "id", "cam", "part_visible"} <= set(__import__("json").loads(line))


def _labels(counts):
    out, i = [], 0
    for pid, n in enumerate(counts):
        out += [(i + j, pid) for j in range(n)]
        i += n
    return out


def test_pk_sampler_contract():
    labels = _labels([8] * 20)
    id_of = dict(labels)
    batches = list(S.pk_sampler(labels, P=16, Kinst=4, seed=0))
    assert batches
    seen = set()
    for b in batches:
        assert len(b) == 64
        c = Counter(id_of[i] for i in b)
        assert len(c) == 16 and set(c.values()) == {4}
        seen |= set(c)
    assert seen == set(range(20))
    assert batches == list(S.pk_sampler(labels, P=16, Kinst=4, seed=0))
    assert batches != list(S.pk_sampler(labels, P=16, Kinst=4, seed=1))


def test_pk_sampler_small_identity_repeats():
    labels = _labels([2] + [8] * 4)
    id_of = dict(labels)
    hits = 0
    for b in S.pk_sampler(labels, P=4, Kinst=4, seed=0):
        own = [i for i in b if id_of[i] == 0]
        if own:
            hits += 1
            assert len(own) == 4 and set(own) <= {0, 1}
    assert hits >= 1


def test_pk_sampler_too_few_ids():
    with pytest.raises(InvalidConfigError):
        list(S.pk_sampler(_labels([4] * 3), P=4, Kinst=4))
