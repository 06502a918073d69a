"""Command-line entry point for reproducible runs.

Subcommands: gen-data, train, eval, gradcheck, ablate. Every run writes
its fully resolved configuration next to its outputs so it can be
re-launched bit-identically (in f64 mode). Exit codes: 0 success,
1 usage error, 2 runtime error, 3 divergence.

MULALIGN_SEED, when set, overrides the default seed for any invocation
that does not pass --seed explicitly (a config file still wins over it).
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import fields, replace
from pathlib import Path

import numpy as np

from . import gradchecks
from .config import (
    PAPER_BACKBONE_LR,
    PAPER_REFINEMENT_LR,
    RunConfig,
    config_hash,
    load_config,
    save_config,
)
from .data import build_vocab, generate_corpus, load_corpus, save_corpus
from .evaluation import (
    build_probe_set,
    export_attention_map,
    run_fg_probe,
    run_retrieval,
)
from .objectives import VARIANTS
from .training import (
    DivergenceError,
    build_model,
    fit,
    load_checkpoint,
    restore,
    save_checkpoint,
)

USAGE_EXIT, RUNTIME_EXIT, DIVERGENCE_EXIT = 1, 2, 3

_FLAGGED_FIELDS = [f.name for f in fields(RunConfig)]


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise _UsageError(message)


def _add_config_flags(p: argparse.ArgumentParser):
    p.add_argument("--config", type=str, default=None,
                   help="key = value config file to start from")
    p.add_argument("--lr-preset", choices=["desk", "paper"], default=None,
                   help="paper preset: backbone 1e-5, refinement 2e-4")
    for name in _FLAGGED_FIELDS:
        flag = "--" + name.replace("_", "-")
        default = getattr(RunConfig(), name)
        if isinstance(default, bool):
            p.add_argument(flag, type=str, choices=["true", "false"],
                           default=None, help=f"default {default}")
        else:
            p.add_argument(flag, type=type(default), default=None,
                           help=f"default {default}")


def _resolve_config(args) -> RunConfig:
    cfg = load_config(args.config) if args.config else RunConfig()
    overrides = {}
    for name in _FLAGGED_FIELDS:
        value = getattr(args, name)
        if value is not None:
            if isinstance(getattr(cfg, name), bool):
                value = value == "true"
            overrides[name] = value
    if args.lr_preset == "paper":
        overrides.setdefault("backbone_lr", PAPER_BACKBONE_LR)
        overrides.setdefault("refinement_lr", PAPER_REFINEMENT_LR)
    env_seed = os.environ.get("MULALIGN_SEED")
    if env_seed is not None and "seed" not in overrides and not args.config:
        overrides["seed"] = int(env_seed)
    return replace(cfg, **overrides).validate()


def _out_dir(cfg: RunConfig) -> Path:
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_resolved(cfg: RunConfig, out: Path) -> None:
    save_config(out / "config.resolved", cfg)


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------


def cmd_gen_data(args) -> int:
    cfg = _resolve_config(args)
    if args.n is not None and args.n < 1:
        raise _UsageError("--n must be >= 1")
    n = args.n if args.n is not None else cfg.corpus_n + cfg.holdout_n
    samples = generate_corpus(n, grid=cfg.grid, seed=cfg.data_seed,
                              max_objects=cfg.max_objects,
                              cell_px=cfg.patch_size)
    out = Path(args.out_file)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_corpus(out, samples)
    subs = sum(len(s.subcaptions) for s in samples)
    print(f"wrote {len(samples)} samples ({subs} subcaptions) to {out}")
    return 0


def _load_split(cfg: RunConfig, corpus_path: str | None):
    if corpus_path:
        samples = load_corpus(corpus_path)
    else:
        samples = generate_corpus(cfg.corpus_n + cfg.holdout_n, grid=cfg.grid,
                                  seed=cfg.data_seed,
                                  max_objects=cfg.max_objects,
                                  cell_px=cfg.patch_size)
    if cfg.holdout_n >= len(samples):
        raise ValueError("holdout_n leaves no training data")
    n_train = len(samples) - cfg.holdout_n
    return samples[:n_train], samples[n_train:]


def cmd_train(args) -> int:
    cfg = _resolve_config(args)
    out = _out_dir(cfg)
    _write_resolved(cfg, out)
    train_set, _ = _load_split(cfg, args.corpus)
    digest = config_hash(cfg)
    metrics_path = out / "metrics.jsonl"
    ckpt_path = out / "model.mula"
    last_good = out / "last_good.mula"

    from .data import sequence_budget
    from .training import OptimState
    vocab = build_vocab(cfg.grid, cfg.max_objects)
    budget = sequence_budget(train_set, vocab, cfg.max_sentences)
    model = build_model(cfg, vocab, budget)
    opt_state = OptimState(weight_decay=cfg.weight_decay)
    steps_per_epoch = max(1, len(train_set) // cfg.batch_size)

    def on_step(record):
        with open(metrics_path, "a", encoding="utf-8") as f:
            f.write(json.dumps(record, sort_keys=True) + "\n")
        if record["step"] % steps_per_epoch == 0:
            save_checkpoint(last_good, model, opt_state, record["step"],
                            digest)

    metrics_path.write_text("")
    try:
        result = fit(cfg, train_set, model=model, opt_state=opt_state,
                     on_step=on_step)
    except DivergenceError as exc:
        print(f"error: {exc}", file=sys.stderr)
        print(f"last good checkpoint: "
              f"{last_good if last_good.exists() else 'none'}",
              file=sys.stderr)
        return DIVERGENCE_EXIT
    save_checkpoint(ckpt_path, result.model, result.opt_state, result.steps,
                    digest)
    final = result.metrics[-1] if result.metrics else {}
    print(f"trained {result.steps} steps; final "
          f"l_total={final.get('l_total', float('nan')):.4f}; "
          f"checkpoint {ckpt_path}; metrics {metrics_path}")
    return 0


def cmd_eval(args) -> int:
    cfg = _resolve_config(args)
    out = _out_dir(cfg)
    _write_resolved(cfg, out)
    train_set, holdout = _load_split(cfg, args.corpus)
    gallery = holdout if holdout else train_set
    vocab = build_vocab(cfg.grid, cfg.max_objects)
    from .data import sequence_budget
    budget = sequence_budget(train_set + holdout, vocab, cfg.max_sentences)
    model = build_model(cfg, vocab, budget)
    ckpt = load_checkpoint(args.checkpoint, config_hash(cfg),
                           force=args.force)
    restore(model, ckpt)
    retrieval = run_retrieval(model, gallery, vocab,
                              max_sentences=cfg.max_sentences)
    probes = build_probe_set(gallery, k=cfg.probe_k,
                             n_groups=cfg.probe_groups, seed=cfg.data_seed)
    probe = run_fg_probe(model, probes, vocab, scoring=args.scoring)
    report = {"retrieval": retrieval, "probe": probe,
              "gallery_size": len(gallery), "probe_k": cfg.probe_k,
              "probe_groups": len(probes.groups)}
    report_path = out / "eval.json"
    report_path.write_text(json.dumps(report, indent=2, sort_keys=True))
    for direction in ("t2i", "i2t"):
        row = " ".join(f"{k}={v:.4f}" for k, v in retrieval[direction].items())
        print(f"{direction}: {row}")
    print("probe: " + " ".join(f"{k}={v:.4f}" for k, v in probe.items()))
    if args.attention_sample is not None:
        sample = gallery[args.attention_sample % len(gallery)]
        grid, pgm, txt = export_attention_map(
            model, sample, sample.subcaptions[-1], vocab, out)
        print(f"attention map for {sample.subcaptions[-1]!r} -> {pgm}")
    print(f"report written to {report_path}")
    return 0


def cmd_gradcheck(args) -> int:
    results = gradchecks.run_all(only=args.block, eps=args.eps, tol=args.tol)
    width = max(len(n) for n in results)
    ok = True
    for name, rep in results.items():
        ok &= rep.passed
        print(f"{name:<{width}s}  {rep.summary()}")
    print(f"{'ALL PASS' if ok else 'FAILURES PRESENT'} "
          f"({len(results)} checks, tol={args.tol:g})")
    return 0 if ok else RUNTIME_EXIT


def cmd_ablate(args) -> int:
    cfg = _resolve_config(args)
    out = _out_dir(cfg)
    _write_resolved(cfg, out)
    train_set, holdout = _load_split(cfg, args.corpus)
    vocab = build_vocab(cfg.grid, cfg.max_objects)
    if args.tie_lambdas:
        lams = [float(x) for x in args.tie_lambdas.split(",")]
        jobs = [(f"full λ={lam:g}", replace(cfg, variant="full", lambda_w=lam,
                                            lambda_s=lam)) for lam in lams]
    else:
        names = args.variants.split(",")
        unknown = [n for n in names if n not in VARIANTS]
        if unknown:
            raise _UsageError(f"unknown variants: {unknown}")
        jobs = [(name, replace(cfg, variant=name)) for name in names]
    seeds = [cfg.seed + i for i in range(args.seeds)]
    rows = []
    for label, job_cfg in jobs:
        cells = []
        for seed in seeds:
            run_cfg = replace(job_cfg, seed=seed).validate()
            result = fit(run_cfg, train_set)
            gallery = holdout if holdout else train_set
            retrieval = run_retrieval(result.model, gallery, vocab,
                                      max_sentences=cfg.max_sentences)
            probes = build_probe_set(gallery, k=cfg.probe_k,
                                     n_groups=cfg.probe_groups,
                                     seed=cfg.data_seed)
            probe = run_fg_probe(result.model, probes, vocab)
            cells.append({"t2i_r1": retrieval["t2i"]["r1"],
                          "i2t_r1": retrieval["i2t"]["r1"],
                          "hard": probe.get("hard", float("nan")),
                          "medium": probe.get("medium", float("nan")),
                          "easy": probe.get("easy", float("nan")),
                          "trivial": probe.get("trivial", float("nan"))})
        mean = {k: float(np.mean([c[k] for c in cells])) for k in cells[0]}
        rows.append({"variant": label, "seeds": seeds, **mean})
    header = ["variant", "t2i_r1", "i2t_r1", "hard", "medium", "easy",
              "trivial"]
    lines = ["\t".join(header)]
    for row in rows:
        lines.append("\t".join(
            [row["variant"]] + [f"{row[k]:.4f}" for k in header[1:]]))
    table = "\n".join(lines)
    print(table)
    (out / "ablation.tsv").write_text(table + "\n")
    (out / "ablation.json").write_text(json.dumps(rows, indent=2,
                                                  sort_keys=True))
    print(f"table written to {out / 'ablation.tsv'}")
    return 0


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------


def make_parser() -> _Parser:
    parser = _Parser(prog="mulalign",
                     description="multi-level image-text alignment at desk scale")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a synthetic corpus file")
    _add_config_flags(p)
    p.add_argument("--n", type=int, default=None,
                   help="sample count (default corpus_n + holdout_n)")
    p.add_argument("--out-file", type=str, default="corpus.jsonl")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train a variant and write a checkpoint")
    _add_config_flags(p)
    p.add_argument("--corpus", type=str, default=None,
                   help="corpus file from gen-data (default: regenerate)")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="retrieval + fine-grained probe report")
    _add_config_flags(p)
    p.add_argument("--checkpoint", type=str, required=True)
    p.add_argument("--corpus", type=str, default=None)
    p.add_argument("--scoring", choices=["sap", "global"], default="sap")
    p.add_argument("--force", action="store_true",
                   help="load despite config-hash mismatch")
    p.add_argument("--attention-sample", type=int, default=None,
                   help="also export an attention map for this gallery index")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gradcheck", help="finite-difference checks")
    p.add_argument("--tol", type=float, default=1e-4)
    p.add_argument("--eps", type=float, default=1e-5)
    p.add_argument("--block", type=str, default=None,
                   help="substring filter, e.g. 'calibration' or 'total'")
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("ablate", help="train and compare objective variants")
    _add_config_flags(p)
    p.add_argument("--corpus", type=str, default=None)
    p.add_argument("--variants", type=str,
                   default="global_only,no_lc_no_sap,no_sap,no_wpr,full")
    p.add_argument("--seeds", type=int, default=1,
                   help="average over this many consecutive seeds")
    p.add_argument("--tie-lambdas", type=str, default=None,
                   help="comma list: sweep tied loss weights on 'full'")
    p.set_defaults(func=cmd_ablate)
    return parser


def main(argv=None) -> int:
    parser = make_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args)
    except _UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return USAGE_EXIT
    except ValueError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return USAGE_EXIT
    except DivergenceError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return DIVERGENCE_EXIT
    except (OSError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return RUNTIME_EXIT


if __name__ == "__main__":
    sys.exit(main())
