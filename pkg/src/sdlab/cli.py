"""``lab``: command-line entry point.

    lab train --config run.json --out runs/toy
    lab sweep --config run.json --epsilons 0 0.01 0.05 0.1 --seeds 0 1 2 --out runs/eps
    lab probe runs/toy/checkpoint.safetensors --out probe/ [--sequences]
    lab surgery per-layer --checkpoint ck.safetensors --eval-corpus heldout.bin --out surg/
    lab prescribe --profile profile.json --policy compressed --out prescription.json
    lab corpus --out corpus.bin

Exit codes: 0 ok, 2 config error, 3 numerical error, 4 I/O error.
``LAB_SEED`` overrides the config seed.
"""
import argparse
import json
import logging
import os
import sys
from dataclasses import fields, replace
from pathlib import Path

import numpy as np

from . import architect, probe, runs, surgery
from .archive import ArchiveError, read_archive
from .autograd import FullyMaskedRowError
from .corpus import encode, read_corpus, sha256_file, write_stdlib_corpus
from .model import InvalidConfigError, LayerSpec, ModelConfig
from .spectral import ConvergenceError
from .trainer import NonFiniteGradientError, TrainConfig, epsilon_sweep

log = logging.getLogger("sdlab")

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_IO = 0, 2, 3, 4


class ConfigError(ValueError):
    pass


# ---------------------------------------------------------------------------
# strict config documents

RUN_KEYS = {"model", "train", "corpus", "holdout", "seed"}


def _strict(doc, allowed, where):
    if not isinstance(doc, dict):
        raise ConfigError(f"{where}: expected a JSON object")
    unknown = sorted(set(doc) - set(allowed))
    if unknown:
        raise ConfigError(f"{where}: unknown key(s) {unknown}")


def _model_config(doc):
    allowed = {f.name for f in fields(ModelConfig)} - {"seed"}
    _strict(doc, allowed, "model")
    doc = dict(doc)
    layers = doc.get("layers")
    if layers is not None:
        if not isinstance(layers, list) or not layers:
            raise ConfigError("model.layers: expected a non-empty list")
        spec_keys = {f.name for f in fields(LayerSpec)}
        for i, l in enumerate(layers):
            _strict(l, spec_keys, f"model.layers[{i}]")
        doc["layers"] = tuple(LayerSpec(**l) for l in layers)
    try:
        cfg = ModelConfig(**doc)
        problems = cfg.problems()
    except TypeError as exc:
        raise ConfigError(f"model: {exc}") from None
    if problems:
        raise ConfigError("; ".join(f"model.{p}" for p in problems))
    return cfg


def _train_config(doc):
    allowed = {f.name for f in fields(TrainConfig)} - {"seed"}
    _strict(doc, allowed, "train")
    try:
        cfg = TrainConfig(**doc)
        problems = cfg.problems()
    except TypeError as exc:
        raise ConfigError(f"train: {exc}") from None
    if problems:
        raise ConfigError("; ".join(f"train.{p}" for p in problems))
    return cfg


def env_seed(seed):
    raw = os.environ.get("LAB_SEED")
    if raw is None or raw == "":
        return seed
    try:
        return int(raw)
    except ValueError:
        raise ConfigError(f"LAB_SEED: expected an integer, got {raw!r}") from None


def load_run_config(path):
    """(ModelConfig, TrainConfig, corpus path or None, holdout) from a run document."""
    try:
        doc = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: not valid JSON ({exc})") from None
    _strict(doc, RUN_KEYS, "config")
    seed = doc.get("seed", 0)
    if isinstance(seed, bool) or not isinstance(seed, int):
        raise ConfigError("seed: expected an integer")
    seed = env_seed(seed)
    mcfg = replace(_model_config(doc.get("model", {})), seed=seed)
    tcfg = replace(_train_config(doc.get("train", {})), seed=seed)
    holdout = doc.get("holdout", 65536)
    if isinstance(holdout, bool) or not isinstance(holdout, int) or holdout < 1:
        raise ConfigError("holdout: expected a positive integer")
    corpus = doc.get("corpus")
    if corpus is not None:
        corpus = (Path(path).parent / corpus) if not os.path.isabs(corpus) else Path(corpus)
    return mcfg, tcfg, corpus, holdout


def _write_json(path, doc):
    Path(path).write_text(json.dumps(doc, indent=2, sort_keys=True, allow_nan=True) + "\n")


# ---------------------------------------------------------------------------
# commands


def cmd_train(args):
    mcfg, tcfg, corpus, holdout = load_run_config(args.config)
    corpus = Path(args.corpus) if args.corpus else corpus
    if corpus is None:
        raise ConfigError("corpus: no corpus path in the config or on the command line")
    if args.steps:
        tcfg = replace(tcfg, total_steps=args.steps)
        tcfg.validate()
    _, _, outcome = runs.train_run(mcfg, tcfg, corpus, args.out, holdout=holdout)
    print(json.dumps({"out": str(args.out), "status": outcome.status, "final_val_ppl": outcome.final_val_ppl}))
    return EXIT_OK


def cmd_sweep(args):
    mcfg, tcfg, corpus, holdout = load_run_config(args.config)
    corpus = Path(args.corpus) if args.corpus else corpus
    if corpus is None:
        raise ConfigError("corpus: no corpus path in the config or on the command line")
    if args.steps:
        tcfg = replace(tcfg, total_steps=args.steps)
    tokens = read_corpus(corpus)
    train_tokens, heldout = tokens[:-holdout], tokens[-holdout:]
    rows = epsilon_sweep(mcfg, tcfg, args.epsilons, args.seeds, train_tokens, heldout, workers=args.workers)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    cfg = runs.run_config(mcfg, tcfg, corpus, holdout)
    cfg.update(epsilons=list(args.epsilons), seeds=list(args.seeds))
    prov = runs.provenance(cfg, tcfg.seed, [corpus])
    probe.write_stats_csv(out / "epsilon_sweep.csv", rows, runs.provenance_lines(prov))
    _write_json(out / "epsilon_sweep.json", {"rows": rows, "provenance": prov})
    return EXIT_OK


def cmd_probe(args):
    arc = read_archive(args.archive)
    conv = probe.detect_convention(arc, args.heads)
    kernels = probe.per_head_kernels(arc, conv)
    stats, layers = probe.head_statistics(kernels)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    cfg = {"archive": str(args.archive), "heads": args.heads, "layout": conv.layout, "sequences": args.sequences}
    prov = runs.provenance(cfg, None, [args.archive])
    lines = runs.provenance_lines(prov)
    probe.write_stats_csv(out / "head_stats.csv", probe.stats_rows(stats), lines)
    probe.write_stats_csv(out / "layer_stats.csv", layers, lines)
    doc = {"heads": probe.stats_rows(stats), "layers": layers, "provenance": prov}
    if args.sequences:
        model = probe.model_from_archive(arc)
        seqs = [encode(s)[:model.config.context] for s in probe.evaluation_sequences()]
        reps = probe.sequence_level_report(model, seqs)
        probe.write_stats_csv(out / "sequence_stats.csv", probe.stats_rows(reps), lines)
        doc["sequence_level"] = probe.stats_rows(reps)
    _write_json(out / "head_stats.json", doc)
    unstable = np.mean([s.max_re_lambda_weight > 0 for s in stats]) if stats else 0.0
    print(json.dumps({"heads": len(stats), "layers": len(layers), "frac_unstable": float(unstable)}))
    return EXIT_OK


def _surgery_plans(args, model):
    n = model.config.n_layers
    if args.mode == "collapse-damping":
        return [surgery.collapse_damping_plan(n)], "collapse-damping"
    if args.mode == "zero-routing":
        return [surgery.zero_routing_plan(n)], "zero-routing"
    if args.mode == "plan":
        if not args.plan:
            raise ConfigError("surgery plan: --plan is required")
        try:
            doc = json.loads(Path(args.plan).read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{args.plan}: not valid JSON ({exc})") from None
        return [surgery.SurgeryPlan.from_dict(doc).validate(model.config)], "plan"
    raise AssertionError(args.mode)


def _rank_arg(v):
    return v if v in (surgery.FULL, surgery.ZERO, surgery.SCALAR) else int(v)


def cmd_surgery(args):
    model = probe.load_model(args.checkpoint)
    tokens = read_corpus(args.eval_corpus)
    if args.eval_tokens:
        tokens = tokens[:args.eval_tokens]
    kw = dict(stride=args.stride, batch_size=args.batch_size)
    if args.mode == "per-layer":
        sweep = surgery.per_layer_linearization_sweep(model, tokens, **kw)
    elif args.mode == "cumulative":
        sweep = surgery.cumulative_linearization_sweep(model, tokens, **kw)
    elif args.mode == "grid":
        rr = [_rank_arg(v) for v in args.routing_ranks]
        fr = [_rank_arg(v) for v in args.filtering_ranks]
        sweep = surgery.joint_rank_grid(model, rr, fr, tokens, **kw)
    else:
        plans, kind = _surgery_plans(args, model)
        sweep = surgery.run_plans(model, plans, tokens, kind=kind, **kw)
    if args.mode == "per-layer":
        ranks = probe.layer_routing_ranks(probe.kernels_from_model(model))
        sweep.meta["layer_routing_effrank"] = ranks
        if len(ranks) > 1:
            sweep.meta["spearman_delta_vs_effrank"] = surgery.cascade_correlation(sweep.deltas(), ranks)

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    cfg = {"mode": args.mode, "checkpoint": str(args.checkpoint), "eval_corpus": str(args.eval_corpus),
           "eval_tokens": int(tokens.size), "stride": sweep.stride, "plan": args.plan,
           "routing_ranks": args.routing_ranks, "filtering_ranks": args.filtering_ranks}
    inputs = [args.checkpoint, args.eval_corpus] + ([args.plan] if args.plan else [])
    prov = runs.provenance(cfg, model.config.seed, inputs)
    lines = runs.provenance_lines(prov)
    sweep.write_csv(out / f"surgery_{args.mode}.csv", lines)
    sweep.write_json(out / f"surgery_{args.mode}.json", {"provenance": prov})
    if args.mode == "grid":
        surgery.write_grid_csv(out / "surgery_grid_matrix.csv", sweep, lines)
    print(json.dumps({"baseline_ppl": sweep.baseline_ppl, "rows": len(sweep.results)}))
    return EXIT_OK


def _load_profile(args):
    if args.trace:
        rows = runs.read_csv_rows(args.trace)
        if args.head_dim is None or args.heads is None:
            raise ConfigError("prescribe --trace needs --head-dim and --heads")
        return architect.RankProfile.from_trace_rows(rows, args.head_dim, args.heads)
    try:
        doc = json.loads(Path(args.profile).read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{args.profile}: not valid JSON ({exc})") from None
    if isinstance(doc, list):
        doc = {"ranks": doc}
    _strict(doc, {"ranks", "head_dim", "heads", "source", "step"}, "profile")
    if not doc.get("ranks"):
        raise ConfigError("profile.ranks: empty profile")
    prof = architect.RankProfile.from_dict(doc)
    if args.head_dim:
        prof.head_dim = args.head_dim
    if args.heads:
        prof.heads = args.heads
    return prof


def cmd_prescribe(args):
    prof = _load_profile(args)
    pres = architect.prescribe(prof, args.policy, d_model=args.d_model, context=args.context)
    doc = pres.to_dict()
    cfg = {"policy": args.policy, "d_model": args.d_model, "context": args.context,
           "profile": prof.ranks, "head_dim": prof.head_dim, "heads": prof.heads}
    doc["provenance"] = runs.provenance(cfg, None, [p for p in (args.profile, args.trace) if p])
    doc["low_rank_fraction"] = architect.low_rank_fraction(prof)
    if args.out:
        _write_json(args.out, doc)
    t = doc["totals"]
    print(f"policy {pres.policy}: d_head {'/'.join(map(str, pres.schedule()))}")
    print(f"heads {'/'.join(str(l.heads) for l in pres.layers)}; mechanisms {'/'.join(pres.mechanisms())}")
    print(f"attention params {t['attention_params']:,} (baseline {t['baseline_attention_params']:,}, "
          f"savings {t['param_savings_pct']:.1f}%)")
    print(f"attention FLOPs/token @N={t['context']} {t['attention_flops_per_token']:,} "
          f"(savings {t['flop_savings_pct']:.1f}%)")
    return EXIT_OK


def cmd_corpus(args):
    write_stdlib_corpus(args.out, args.min_bytes)
    print(json.dumps({"out": str(args.out), "sha256": sha256_file(args.out)}))
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser


def build_parser():
    p = argparse.ArgumentParser(prog="lab", description="routing/filtering spectral toolkit")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train a toy model; writes four run artifacts")
    t.add_argument("--config", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--corpus", help="byte corpus (overrides the config)")
    t.add_argument("--steps", type=int, help="override train.total_steps")
    t.set_defaults(func=cmd_train)

    s = sub.add_parser("sweep", help="epsilon sweep: one outcome row per (epsilon, seed)")
    s.add_argument("--config", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--corpus")
    s.add_argument("--epsilons", type=float, nargs="+", default=[0.0, 0.01, 0.05, 0.1])
    s.add_argument("--seeds", type=int, nargs="+", default=[0])
    s.add_argument("--steps", type=int)
    s.add_argument("--workers", type=int, default=1)
    s.set_defaults(func=cmd_sweep)

    pr = sub.add_parser("probe", help="per-head weight-kernel statistics of a tensor archive")
    pr.add_argument("archive")
    pr.add_argument("--out", required=True)
    pr.add_argument("--heads", type=int, help="head count (needed for fused GPT-2 layouts)")
    pr.add_argument("--sequences", action="store_true", help="also run sequence-level analysis (toolkit checkpoints)")
    pr.set_defaults(func=cmd_probe)

    su = sub.add_parser("surgery", help="inference-time spectral surgery")
    su.add_argument("mode", choices=["per-layer", "cumulative", "grid", "collapse-damping", "zero-routing", "plan"])
    su.add_argument("--checkpoint", required=True)
    su.add_argument("--eval-corpus", required=True)
    su.add_argument("--out", required=True)
    su.add_argument("--plan", help="surgery plan JSON (mode 'plan')")
    su.add_argument("--routing-ranks", nargs="+", default=["full", "4", "2", "zero"])
    su.add_argument("--filtering-ranks", nargs="+", default=["full", "8", "1", "zero"])
    su.add_argument("--stride", type=int)
    su.add_argument("--eval-tokens", type=int)
    su.add_argument("--batch-size", type=int, default=16)
    su.set_defaults(func=cmd_surgery)

    pe = sub.add_parser("prescribe", help="architecture prescription from a rank profile")
    src = pe.add_mutually_exclusive_group(required=True)
    src.add_argument("--profile", help="JSON profile {ranks, head_dim, heads} or a bare list")
    src.add_argument("--trace", help="cascade_trace.csv from a training run (last step)")
    pe.add_argument("--policy", required=True, help="compressed | wide | deep | linear-boundary(K)")
    pe.add_argument("--d-model", type=int, default=768)
    pe.add_argument("--context", type=int, default=1024)
    pe.add_argument("--head-dim", type=int)
    pe.add_argument("--heads", type=int)
    pe.add_argument("--out")
    pe.set_defaults(func=cmd_prescribe)

    c = sub.add_parser("corpus", help="write the deterministic stdlib byte corpus")
    c.add_argument("--out", required=True)
    c.add_argument("--min-bytes", type=int, default=6_000_000)
    c.set_defaults(func=cmd_corpus)
    return p


CONFIG_ERRORS = (ConfigError, InvalidConfigError, surgery.PlanError, architect.PrescriptionError)
NUMERIC_ERRORS = (FloatingPointError, ConvergenceError, FullyMaskedRowError, NonFiniteGradientError, ArithmeticError)
IO_ERRORS = (OSError, ArchiveError, probe.KernelLayoutError)


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    try:
        return args.func(args)
    except CONFIG_ERRORS as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NUMERIC_ERRORS as exc:
        print(f"numerical error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except IO_ERRORS as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
