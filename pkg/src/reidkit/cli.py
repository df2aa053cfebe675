"""Command line entry point: ``reidkit {generate,train,embed,eval,ablate,rank}``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .exceptions import ReIDKitError

log = logging.getLogger("reidkit")


def _cmd_generate(args):
    from .config import load_config
    from .harness import generate

    cfg = load_config(args.config)
    out = generate(cfg, args.out)
    print(out)


def _cmd_train(args):
    from .config import load_config
    from .harness import train

    cfg = load_config(args.config)
    trainer = train(cfg, resume=not args.no_resume)
    print(json.dumps(trainer.history[-1] if trainer.history else {}, sort_keys=True))
    print(Path(cfg.out_dir) / "model.npz")


def _cmd_embed(args):
    from .config import load_config
    from .harness import embed

    cfg = load_config(args.config) if args.config else None
    path = embed(args.ckpt, args.split, corpus_path=args.corpus, out=args.out,
                 no_visibility=True if args.no_visibility else None, cfg=cfg)
    print(path)


def _cmd_eval(args):
    from .harness import evaluate_archives

    result = evaluate_archives(args.query, args.gallery, selector=args.selector)
    d = result.as_dict()
    print(json.dumps(d, sort_keys=True))
    if args.out:
        Path(args.out).write_text("\t".join(d) + "\n" + "\t".join(str(v) for v in d.values()) + "\n")


def _cmd_ablate(args):
    from .config import load_config, resolve
    from .harness import ablate

    if args.config:
        cfg = load_config(args.config)
    else:
        cfg = resolve({"seed": 0, "corpus": {"path": "data/occluded", "preset": "occluded"}})
    rows, path = ablate(args.grid, cfg, seeds=tuple(args.seeds), out_dir=args.out)
    print(path.read_text(), end="")


def _cmd_rank(args):
    from .report import rank_report
    from .retrieval import read_archive

    paths = rank_report(read_archive(args.query), read_archive(args.gallery), args.out, topk=args.topk,
                        query_ids=args.ids, corpus=args.corpus, checkpoint=args.ckpt,
                        per_part=not args.no_parts)
    for p in paths:
        print(p)


def build_parser():
    p = argparse.ArgumentParser(prog="reidkit", description="Body-part attention person re-identification toolkit.")
    p.add_argument("-v", "--verbose", action="count", default=0)
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="write a synthetic corpus")
    g.add_argument("--config", required=True)
    g.add_argument("--out", help="output directory (default: corpus.path of the config)")
    g.set_defaults(func=_cmd_generate)

    t = sub.add_parser("train", help="train a model")
    t.add_argument("--config", required=True)
    t.add_argument("--no-resume", action="store_true", help="ignore an existing trainer state")
    t.set_defaults(func=_cmd_train)

    e = sub.add_parser("embed", help="write an embedding archive for one split")
    e.add_argument("--ckpt", required=True)
    e.add_argument("--split", required=True, choices=["train", "query", "gallery"])
    e.add_argument("--config", help="verify the checkpoint against this config")
    e.add_argument("--corpus", help="corpus directory (default: the one recorded in the checkpoint)")
    e.add_argument("--out")
    e.add_argument("--no-visibility", action="store_true", help="set every visibility bit to 1")
    e.set_defaults(func=_cmd_embed)

    v = sub.add_parser("eval", help="CMC / mAP of a query archive against a gallery archive")
    v.add_argument("--query", required=True)
    v.add_argument("--gallery", required=True)
    v.add_argument("--selector", help="embeddings to match: all, parts, f, 1..K or a comma list")
    v.add_argument("--out", help="also write the metrics as a TSV row")
    v.set_defaults(func=_cmd_eval)

    a = sub.add_parser("ablate", help="run an ablation grid")
    a.add_argument("--grid", required=True, choices=["loss_grid", "embedding_study", "components"])
    a.add_argument("--config", help="base run config (default: occluded corpus preset at data/occluded)")
    a.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    a.add_argument("--out", help="output directory (default: out_dir of the config)")
    a.set_defaults(func=_cmd_ablate)

    r = sub.add_parser("rank", help="ranking grids and attention panels")
    r.add_argument("--query", required=True)
    r.add_argument("--gallery", required=True)
    r.add_argument("--topk", type=int, default=5)
    r.add_argument("--ids", type=int, nargs="+", help="query identities to report (default: all)")
    r.add_argument("--out", default="rank_report")
    r.add_argument("--corpus")
    r.add_argument("--ckpt")
    r.add_argument("--no-parts", action="store_true", help="only the combined ranking row")
    r.set_defaults(func=_cmd_rank)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    if getattr(args, "selector", None) and "," in args.selector:
        args.selector = args.selector.split(",")
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except (ReIDKitError, FileNotFoundError) as exc:
        print(f"reidkit {args.command}: error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
