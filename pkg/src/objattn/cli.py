"""Command-line entry points: gen, train, eval, ablate, analyze.

Exit codes: 0 success, 2 configuration error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from . import analysis, harness
from .harness import (ConfigError, TrainConfig, build_pool,
                      build_train_config, evaluate, generate_episodes,
                      load_run, parse_config_text, run_ablation_suite, train)
from .model import global_forward, assemble_inputs
from .numerics import Tensor
from .optim import NumericFailure
from .scenes import make_splits, save_dataset

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NUMERIC = 3


def _load_config(path: str) -> TrainConfig:
    text = Path(path).read_text()
    return build_train_config(parse_config_text(text))


def _cmd_gen(args) -> int:
    episodes = generate_episodes(args.task, args.count, args.seed,
                                 render=not args.no_render)
    save_dataset(episodes, args.out,
                 manifest_extra={"task": args.task, "seed": args.seed})
    print(f"wrote {len(episodes)} {args.task} episodes to {args.out}")
    return EXIT_OK


def _cmd_train(args) -> int:
    cfg = _load_config(args.config)
    train(cfg, log_fn=print)
    return EXIT_OK


def _split_pool(cfg: TrainConfig, split: str):
    episodes = harness.acquire_episodes(cfg)
    splits = make_splits(episodes, cfg.labeled_fraction, cfg.split_kind,
                         cfg.val_fraction, cfg.test_fraction, cfg.seed)
    pools = {"train": splits.train, "val": splits.val, "test": splits.test}
    if split not in pools:
        raise ConfigError(f"unknown split {split!r}")
    return build_pool(pools[split], cfg, shuffle_seed=cfg.seed)


def _cmd_eval(args) -> int:
    params, cfg, _ = load_run(args.ckpt)
    pool = _split_pool(cfg, args.split)
    rec = evaluate(params, pool, cfg, split=args.split)
    print(json.dumps(rec.to_json(), sort_keys=True))
    return EXIT_OK


def _cmd_ablate(args) -> int:
    cfg = _load_config(args.config)
    episodes = harness.acquire_episodes(cfg)
    rows = run_ablation_suite(cfg, episodes, log_fn=print,
                              include_schemes=not args.no_schemes)
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "ablation.json").write_text(
            json.dumps(rows, indent=2, sort_keys=True))
        (out / "ablation.txt").write_text(harness.ablation_table(rows))
    print(harness.ablation_table(rows))
    return EXIT_OK


def _cmd_analyze(args) -> int:
    params, cfg, _ = load_run(args.ckpt)
    pool = _split_pool(cfg, args.split)
    out = {}
    if args.report == "attention":
        mu = Tensor(pool.mu[:1])
        seq = assemble_inputs(mu, pool.words[:1], params, cfg.model)
        _, _, trace = global_forward(seq, params, cfg.model,
                                     collect_trace=True)
        out["word_object"] = {}
        out["cls_object"] = {}
        n_heads = cfg.model.n_heads
        for head in range(n_heads):
            out["word_object"][str(head)] = analysis.word_object_attention(
                trace, layer=args.layer, head=head)
            out["cls_object"][str(head)] = analysis.cls_object_attention(
                trace, layer=args.layer, head=head)
    elif args.report == "taxonomy":
        report = analysis.counterfactual_taxonomy(pool.episodes)
        out = {"counts": report.counts, "fractions": report.fractions,
               "total": report.total}
    elif args.report == "alignment":
        subset = pool.episodes[:100]
        out = analysis.alignment_report(params, cfg, subset, seed=cfg.seed)
    elif args.report == "infill":
        out = analysis.infill_report(params, cfg, pool.episodes,
                                     seed=cfg.seed,
                                     use_probe=cfg.aux.weight == 0.0)
    else:
        raise ConfigError(f"unknown report {args.report!r}")
    text = json.dumps(out, indent=2, sort_keys=True)
    if args.out:
        outdir = Path(args.out)
        outdir.mkdir(parents=True, exist_ok=True)
        (outdir / f"{args.report}.json").write_text(text)
    print(text)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(
        prog="objattn",
        description="attention over object embeddings: data, training, "
                    "evaluation and analysis")
    sub = ap.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen", help="generate a synthetic dataset")
    g.add_argument("--task", required=True,
                   choices=sorted(harness.TASK_WORD_LEN))
    g.add_argument("--count", type=int, default=512)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", required=True)
    g.add_argument("--no-render", action="store_true")
    g.set_defaults(fn=_cmd_gen)

    t = sub.add_parser("train", help="train from a key=value config file")
    t.add_argument("--config", required=True)
    t.set_defaults(fn=_cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint on one split")
    e.add_argument("--ckpt", required=True)
    e.add_argument("--split", default="val")
    e.set_defaults(fn=_cmd_eval)

    a = sub.add_parser("ablate", help="run the ablation suite")
    a.add_argument("--config", required=True)
    a.add_argument("--out", default="")
    a.add_argument("--no-schemes", action="store_true",
                   help="architecture variants only")
    a.set_defaults(fn=_cmd_ablate)

    z = sub.add_parser("analyze", help="attention/taxonomy/alignment/infill")
    z.add_argument("--ckpt", required=True)
    z.add_argument("--report", required=True,
                   choices=("attention", "taxonomy", "alignment", "infill"))
    z.add_argument("--split", default="val")
    z.add_argument("--layer", type=int, default=-1)
    z.add_argument("--out", default="")
    z.set_defaults(fn=_cmd_analyze)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except (ConfigError, FileNotFoundError) as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericFailure as e:
        print(f"numeric failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
