"""Cached desk-scale training runs shared by the acceptance suite.

Runs live under ``$SDLAB_ACCEPTANCE_CACHE`` (default ``<repo>/.acceptance_cache``)
keyed by a digest of the resolved configuration, so a second acceptance pass
reuses the ~45 minute trainings. ``python tests/desk_runs.py`` pre-builds
the default set.
"""
import logging
import os
import sys
from dataclasses import replace
from pathlib import Path

from sdlab import corpus as corpus_mod
from sdlab import runs
from sdlab.model import uniform_config
from sdlab.trainer import TrainConfig

REPO = Path(__file__).resolve().parents[1]
CACHE = Path(os.environ.get("SDLAB_ACCEPTANCE_CACHE", REPO / ".acceptance_cache"))
HOLDOUT = 65536  # 256 * context tokens, comfortably >= 50 * N

MODEL = uniform_config("sd", n_layers=4, heads=4, d_head=32, layer_norm=False,
                       d_model=128, context=256, epsilon=0.05)
TRAIN = TrainConfig(total_steps=3000, warmup_steps=200, batch_size=16, seed=0)


def corpus_path():
    path = CACHE / "stdlib_corpus.bin"
    if not path.exists():
        CACHE.mkdir(parents=True, exist_ok=True)
        tmp = path.with_suffix(".tmp")
        corpus_mod.write_stdlib_corpus(tmp)
        os.replace(tmp, path)
    return path


def run(model_cfg=MODEL, train_cfg=TRAIN):
    """Directory of a finished run, training it first if it is not cached."""
    path = corpus_path()
    key = runs.config_digest(runs.run_config(model_cfg, train_cfg, path.name, HOLDOUT))[:16]
    out = CACHE / f"run-{key}"
    if not (out / runs.OUTCOME).exists():
        runs.train_run(model_cfg, train_cfg, path, out, holdout=HOLDOUT)
    return out


def sd_run(seed=0, epsilon=0.05):
    return run(replace(MODEL, epsilon=epsilon), replace(TRAIN, seed=seed))


def standard_run(seed=0):
    """Same shape with standard softmax attention and layer norm, for comparison."""
    return run(replace(MODEL, layers=tuple(replace(l, mechanism="standard", layer_norm=True) for l in MODEL.layers)),
               replace(TRAIN, seed=seed))


if __name__ == "__main__":
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")
    targets = sys.argv[1:] or ["main", "eps0", "eps0.01"]
    for t in targets:
        if t == "main":
            print(sd_run(), flush=True)
        elif t.startswith("eps"):
            print(sd_run(epsilon=float(t[3:])), flush=True)
        elif t == "standard":
            print(standard_run(), flush=True)
        elif t.startswith("seed"):
            print(sd_run(seed=int(t[4:])), flush=True)
