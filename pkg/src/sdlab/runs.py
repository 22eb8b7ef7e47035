"""Training runs as directories of artifacts, plus provenance stamps.

A run directory holds exactly four files:

    checkpoint.safetensors   model weights + resolved config in the metadata
    cascade_trace.csv        per-layer weight-kernel routing effrank per logged step
    outcome.json             RunOutcome plus provenance
    loss_curve.csv           step, loss, lr
"""
import csv
import hashlib
import json
import logging
import os
from dataclasses import asdict
from importlib import metadata as _md
from pathlib import Path

from .corpus import read_corpus, sha256_file, split_holdout
from .model import Model, ModelConfig
from .probe import save_model, write_stats_csv
from .trainer import TrainConfig, train

log = logging.getLogger(__name__)

CHECKPOINT = "checkpoint.safetensors"
TRACE = "cascade_trace.csv"
OUTCOME = "outcome.json"
LOSS_CURVE = "loss_curve.csv"
RUN_FILES = (CHECKPOINT, TRACE, OUTCOME, LOSS_CURVE)


def toolkit_version():
    try:
        return _md.version("artifact")
    except _md.PackageNotFoundError:  # pragma: no cover - running from a source tree
        return "0+unknown"


def config_digest(doc):
    blob = json.dumps(doc, sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha256(blob).hexdigest()


def provenance(config, seed, inputs=()):
    """Stamp embedded in every output: version, resolved config, seed, input hashes."""
    return {
        "toolkit_version": toolkit_version(),
        "config": config,
        "seed": seed,
        "inputs": {str(p): sha256_file(p) for p in inputs},
    }


def provenance_lines(prov):
    """Provenance as '# key: value' comment lines for CSV outputs."""
    return [
        f"toolkit_version: {prov['toolkit_version']}",
        f"seed: {prov['seed']}",
        "config: " + json.dumps(prov["config"], sort_keys=True, separators=(",", ":")),
    ] + [f"input {k}: sha256={v}" for k, v in sorted(prov["inputs"].items())]


def read_csv_rows(path):
    """DictReader rows of a CSV whose leading '#' lines carry provenance."""
    with open(path, newline="") as fh:
        lines = [l for l in fh if not l.startswith("#")]
    return list(csv.DictReader(lines))


def run_config(model_cfg, train_cfg, corpus_path, holdout):
    return {
        "model": model_cfg.to_dict(),
        "train": asdict(train_cfg),
        "corpus": str(corpus_path),
        "holdout": int(holdout),
    }


def train_run(model_cfg, train_cfg, corpus_path, out_dir, holdout=65536):
    """Train from scratch and write the four run artifacts into ``out_dir``.

    The last ``holdout`` tokens of the corpus are never trained on and give
    the validation perplexity. Returns (model, trace, outcome).
    """
    model_cfg.validate()
    train_cfg.validate()
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    tokens = read_corpus(corpus_path)
    train_tokens, heldout = split_holdout(tokens, holdout)
    prov = provenance(run_config(model_cfg, train_cfg, corpus_path, holdout), train_cfg.seed, [corpus_path])

    model = Model.build(model_cfg, seed=train_cfg.seed)
    model, trace, outcome = train(model, train_tokens, train_cfg, eval_corpus=heldout)

    save_model(model, out / CHECKPOINT, {"sdlab.provenance": json.dumps(prov, sort_keys=True)})
    write_stats_csv(out / TRACE, trace.rows(), provenance_lines(prov))
    write_stats_csv(out / LOSS_CURVE,
                    [{"step": s, "loss": l, "lr": r} for s, l, r in outcome.loss_curve],
                    provenance_lines(prov))
    doc = dict(outcome.to_dict(), provenance=prov)
    tmp = out / (OUTCOME + ".tmp")
    tmp.write_text(json.dumps(doc, indent=2, sort_keys=True, allow_nan=True) + "\n")
    os.replace(tmp, out / OUTCOME)  # outcome.json last: its presence marks a finished run
    return model, trace, outcome


def load_run(run_dir):
    """(outcome dict, trace rows, checkpoint path) of a finished run directory."""
    run_dir = Path(run_dir)
    outcome = json.loads((run_dir / OUTCOME).read_text())
    return outcome, read_csv_rows(run_dir / TRACE), run_dir / CHECKPOINT


def trace_profile(rows):
    """Per-step layer-rank lists from cascade-trace CSV rows."""
    out = []
    for r in rows:
        ranks = [float(r[k]) for k in sorted((k for k in r if k.startswith("layer") and k[5:].isdigit()),
                                             key=lambda k: int(k[5:]))]
        out.append((int(r["step"]), ranks))
    return out


def model_config_from(doc):
    return ModelConfig.from_dict(doc)


def train_config_from(doc):
    return TrainConfig(**doc)
