import json

import numpy as np
import pytest
import yaml
from PIL import Image

from reidkit import cli
from reidkit import harness as H
from reidkit import retrieval as R
from reidkit import synthgen as S
from reidkit.config import load_config, resolve
from reidkit.exceptions import FingerprintError, InvalidConfigError, NonFiniteLossError

MICRO_RUN = {
    "seed": 0,
    "out_dir": "run",
    "corpus": {"path": "data", "preset": "micro"},
    "model": {"backbone": {"channels": [8, 8, 8], "convs_per_block": 1}},
    "train": {"epochs": 2, "P": 4, "Kinst": 2, "checkpoint_every": 1},
}


def _write_cfg(path, raw):
    path.write_text(yaml.safe_dump(raw))
    return path


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    """Micro corpus, a 2-epoch run and query/gallery archives produced through the CLI."""
    root = tmp_path_factory.mktemp("cli")
    cfg = _write_cfg(root / "run.yaml", MICRO_RUN)
    assert cli.main(["generate", "--config", str(cfg)]) == 0
    assert cli.main(["train", "--config", str(cfg)]) == 0
    ckpt = root / "run" / "model.npz"
    for split in ("query", "gallery"):
        assert cli.main(["embed", "--ckpt", str(ckpt), "--split", split]) == 0
    return root, cfg, ckpt


def test_config_resolution(tmp_path):
    cfg = load_config(_write_cfg(tmp_path / "c.yaml", MICRO_RUN))
    assert cfg.corpus_path == str(tmp_path / "data") and cfg.out_dir == str(tmp_path / "run")
    assert cfg.net.n_parts == 5 and cfg.net.backbone.input_size == (64, 32)
    assert cfg.hp.attention_weight == 2.0 and cfg.train.schedule.base_lr == 3.5e-3
    occ = resolve({"seed": 1, "corpus": {"preset": "occluded"}, "flags": {"per_part_triplet": True,
                                                                           "fixed_attention": True}})
    assert occ.net.n_parts == 8 and occ.loss.part_triplet_mode == "per-part" and occ.train.fixed_attention
    pcb = resolve({"seed": 0, "loss": {"row": "PCB", "attention_weight": 0.35}, "schedule": {"preset": "full"}})
    assert pcb.loss.id_on == ("parts",) and pcb.hp.attention_weight == 0.35
    assert pcb.train.schedule.warmup_epochs == 10
    m = pcb.manifest()
    assert set(m) == {"seed", "out_dir", "corpus", "model", "loss", "schedule", "augment", "train", "flags"}
    assert m["train"]["optimizer"]["name"] == "adam"


@pytest.mark.parametrize("raw", [
    {},
    {"seed": 0, "bogus": 1},
    {"seed": 0, "train": {"epochz": 3}},
    {"seed": 0, "model": {"n_parts": 8}},
    {"seed": 0, "loss": {"row": "99"}},
    {"seed": 0, "schedule": {"preset": "long"}},
    {"seed": 0, "corpus": {"preset": "huge"}},
    {"seed": 0, "corpus": {"options": {"n_ids": 3}}},
    {"seed": 0, "model": {"backbone": {"input_size": [32, 32]}}},
])
def test_config_errors(raw):
    with pytest.raises(InvalidConfigError):
        resolve(raw)


def test_train_outputs(workspace):
    root, cfg, ckpt = workspace
    run = root / "run"
    assert ckpt.exists() and (run / "checkpoints" / "manifest.json").exists()
    assert (run / "checkpoints" / "epoch_001.npz").exists() and (run / "checkpoints" / "epoch_002.npz").exists()
    history = [json.loads(x) for x in (run / "history.jsonl").read_text().splitlines()]
    assert [h["epoch"] for h in history] == [0, 1] and all(np.isfinite(h["total"]) for h in history)
    steps = (run / "steps.jsonl").read_text().splitlines()
    assert len(steps) >= 2 and "pa" in json.loads(steps[0])
    manifest = json.loads((run / "checkpoints" / "manifest.json").read_text())
    assert manifest["seed"] == 0 and manifest["loss"]["attention_weight"] == 2.0


def test_resume_skips_finished_epochs(workspace):
    root, cfg, _ = workspace
    before = (root / "run" / "history.jsonl").read_text()
    assert cli.main(["train", "--config", str(cfg)]) == 0
    assert (root / "run" / "history.jsonl").read_text() == before


def test_resume_rejects_other_config(workspace, tmp_path):
    root, _, _ = workspace
    raw = dict(MICRO_RUN, out_dir=str(root / "run"), corpus={"path": str(root / "data"), "preset": "micro"})
    raw["train"] = dict(MICRO_RUN["train"], weight_decay=0.0)
    with pytest.raises(InvalidConfigError):
        H.train(resolve(raw))


def test_missing_corpus_fails_before_training(tmp_path, capsys):
    cfg = _write_cfg(tmp_path / "c.yaml", dict(MICRO_RUN, corpus={"path": "nowhere", "preset": "micro"}))
    assert cli.main(["train", "--config", str(cfg)]) == 2
    assert "no corpus" in capsys.readouterr().err
    assert not (tmp_path / "run" / "history.jsonl").exists()


def test_nonfinite_dump(tmp_path):
    cfg = resolve(dict(MICRO_RUN, out_dir=str(tmp_path / "bad")))
    d = S.generate_dataset(cfg.corpus, 0)
    data = S.split_arrays(d.train)
    data.images[:] = np.nan
    with pytest.raises(NonFiniteLossError):
        H.train(cfg, data=data)
    dump = json.loads((tmp_path / "bad" / "nonfinite_dump.json").read_text())
    assert len(dump["batch_indices"]) == 8 and len(dump["files"]) == 8


def test_embed_archive(workspace):
    root, cfg, ckpt = workspace
    q = R.read_archive(root / "run" / "model_query.jsonl")
    split = S.load_split(root / "data", "query")
    assert len(q) == len(split) and q.files == split.files
    assert q.emb.shape[1:] == (6, 8) and q.vis[:, 0].all()
    assert q.meta["fingerprint"] and q.meta["split"] == "query"
    first = (root / "run" / "model_query.jsonl").read_bytes()
    out = root / "again.jsonl"
    assert cli.main(["embed", "--ckpt", str(ckpt), "--split", "query", "--out", str(out)]) == 0
    assert out.read_bytes() == first
    assert cli.main(["embed", "--ckpt", str(ckpt), "--split", "query", "--out", str(root / "nv.jsonl"),
                     "--no-visibility"]) == 0
    assert R.read_archive(root / "nv.jsonl").vis.all()


def test_embed_fingerprint_mismatch(workspace, tmp_path, capsys):
    root, _, ckpt = workspace
    other = _write_cfg(tmp_path / "o.yaml", dict(MICRO_RUN, model={"backbone": {"channels": [8, 8, 16]}}))
    assert cli.main(["embed", "--ckpt", str(ckpt), "--split", "query", "--config", str(other)]) == 2
    assert "fingerprint" in capsys.readouterr().err
    with pytest.raises(FingerprintError):
        H.load_model(ckpt, load_config(other))


def test_eval_cli(workspace, capsys):
    root, _, _ = workspace
    q, g = root / "run" / "model_query.jsonl", root / "run" / "model_gallery.jsonl"
    assert cli.main(["eval", "--query", str(q), "--gallery", str(g), "--out", str(root / "m.tsv")]) == 0
    metrics = json.loads(capsys.readouterr().out)
    assert 0.0 <= metrics["mAP"] <= 1.0 and metrics["n_valid"] >= 1
    assert (root / "m.tsv").read_text().startswith("rank1\t")
    assert cli.main(["eval", "--query", str(q), "--gallery", str(g), "--selector", "f,1"]) == 0


def test_rank_report(workspace, capsys):
    root, _, _ = workspace
    q, g = root / "run" / "model_query.jsonl", root / "run" / "model_gallery.jsonl"
    qa = R.read_archive(q)
    pid = int(qa.ids[0])
    assert cli.main(["rank", "--query", str(q), "--gallery", str(g), "--topk", "5", "--ids", str(pid),
                     "--out", str(root / "rank")]) == 0
    pngs = sorted((root / "rank").glob("rank_*.png"))
    assert len(pngs) == int((qa.ids == pid).sum())
    rows = (root / "rank" / "rankings.tsv").read_text().splitlines()[1:]
    first = [r.split("\t") for r in rows if r.split("\t")[0] == qa.files[0] and r.split("\t")[1] == "all"]
    assert [int(r[2]) for r in first] == [1, 2, 3, 4, 5]
    with Image.open(pngs[0]) as im:
        px = np.asarray(im.convert("RGB"))
    # the first gallery tile's border is green or red
    tile_x = 32 * 2 + 2 * 3 + 4
    border = tuple(px[0, tile_x])
    assert border in ((30, 170, 60), (210, 40, 40))
    data = pngs[0].read_bytes()
    assert cli.main(["rank", "--query", str(q), "--gallery", str(g), "--ids", str(pid),
                     "--out", str(root / "rank2")]) == 0
    assert (root / "rank2" / pngs[0].name).read_bytes() == data
    capsys.readouterr()
    assert cli.main(["rank", "--query", str(q), "--gallery", str(g), "--ids", "9999"]) == 2
    assert "9999" in capsys.readouterr().err


def test_ablate_components_micro(workspace, capsys):
    root, cfg, _ = workspace
    out = root / "abl"
    assert cli.main(["ablate", "--grid", "components", "--config", str(cfg), "--seeds", "0",
                     "--out", str(out)]) == 0
    lines = (out / "components.tsv").read_text().splitlines()
    assert [ln.split("\t")[0] for ln in lines[1:]] == list(H.COMPONENT_ROWS)
    assert lines[0].split("\t")[:3] == ["row", "rank1", "rank1_spread"]
    report = json.loads((out / "components.json").read_text())
    assert report["checkpoint"] == "last epoch"


def test_grid_row_labels():
    cfg = resolve({"seed": 0})
    K = cfg.net.n_parts
    names = [f"f_{k}" for k in range(1, K + 1)] + ["f_1..f_K", "f_f, f_1..f_K", "f_f"]
    fake = [{"row": n, "seeds": [{"rank1": 1.0, "mAP": 0.5}]} for n in names]
    rows = H.summarize(fake)
    assert rows[0]["mAP"] == 0.5 and rows[0]["mAP_spread"] == 0.0
    with pytest.raises(InvalidConfigError):
        H.ablate("tables", cfg)


def test_write_table_inf(tmp_path):
    p = H.write_table([{"row": "x", "d": float("inf"), "m": 0.25}], tmp_path / "t.tsv")
    assert p.read_text().splitlines()[1] == "x\tinf\t0.2500"
