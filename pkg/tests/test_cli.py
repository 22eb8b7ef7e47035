import json
import subprocess
import sys

import numpy as np
import pytest

from sdlab import cli
from sdlab.archive import read_archive, write_archive
from sdlab.runs import CHECKPOINT, LOSS_CURVE, OUTCOME, RUN_FILES, TRACE

TEXT = b"Routing moves attention mass; filtering scales it. " * 400


def tiny_doc(corpus, **over):
    doc = {
        "seed": 0,
        "corpus": str(corpus),
        "holdout": 512,
        "model": {"d_model": 16, "context": 16,
                  "layers": [{"mechanism": "sd", "heads": 2, "d_head": 8, "layer_norm": False}] * 2},
        "train": {"total_steps": 12, "warmup_steps": 2, "batch_size": 2, "rank_log_every": 4,
                  "monitor_every": 4, "log_every": 4},
    }
    doc.update(over)
    return doc


@pytest.fixture
def workdir(tmp_path):
    (tmp_path / "corpus.bin").write_bytes(TEXT)
    return tmp_path


def write_cfg(path, doc):
    path.write_text(json.dumps(doc))
    return str(path)


def test_train_writes_four_artifacts_with_provenance(workdir):
    cfg = write_cfg(workdir / "c.json", tiny_doc("corpus.bin"))
    assert cli.main(["train", "--config", cfg, "--out", str(workdir / "run")]) == 0
    files = sorted(p.name for p in (workdir / "run").iterdir())
    assert files == sorted(RUN_FILES)
    outcome = json.loads((workdir / "run" / OUTCOME).read_text())
    prov = outcome["provenance"]
    assert prov["seed"] == 0 and "toolkit_version" in prov and prov["config"]["model"]["d_model"] == 16
    assert len(prov["inputs"]) == 1
    for name in (TRACE, LOSS_CURVE):
        text = (workdir / "run" / name).read_text()
        assert text.startswith("# ") and "sha256" in text and "\r" not in text
    meta = read_archive(workdir / "run" / CHECKPOINT).metadata
    assert "sdlab.provenance" in meta


def test_same_seed_byte_identical_trace(workdir):
    cfg = write_cfg(workdir / "c.json", tiny_doc("corpus.bin"))
    for d in ("a", "b"):
        assert cli.main(["train", "--config", cfg, "--out", str(workdir / d)]) == 0
    assert (workdir / "a" / TRACE).read_bytes() == (workdir / "b" / TRACE).read_bytes()
    assert (workdir / "a" / CHECKPOINT).read_bytes() == (workdir / "b" / CHECKPOINT).read_bytes()


def test_negative_epsilon_exits_two_and_names_field(workdir, capsys):
    doc = tiny_doc("corpus.bin")
    doc["model"]["epsilon"] = -0.1
    assert cli.main(["train", "--config", write_cfg(workdir / "c.json", doc), "--out", str(workdir / "r")]) == 2
    assert "model.epsilon" in capsys.readouterr().err


@pytest.mark.parametrize("mutate", [
    lambda d: d.update(extra=1),
    lambda d: d["model"].update(colour="red"),
    lambda d: d["train"].update(seed=3),
    lambda d: d["model"]["layers"].__setitem__(0, {"mechanism": "sd", "heads": 2, "d_head": 8, "rope": 1}),
    lambda d: d["train"].update(total_steps="many"),
    lambda d: d.update(seed="zero"),
])
def test_bad_configs_exit_two(workdir, mutate):
    doc = json.loads(json.dumps(tiny_doc("corpus.bin")))
    mutate(doc)
    assert cli.main(["train", "--config", write_cfg(workdir / "c.json", doc), "--out", str(workdir / "r")]) == 2


def test_invalid_json_exits_two(workdir):
    (workdir / "c.json").write_text("{nope")
    assert cli.main(["train", "--config", str(workdir / "c.json"), "--out", str(workdir / "r")]) == 2


def test_lab_seed_overrides(workdir, monkeypatch):
    cfg = write_cfg(workdir / "c.json", tiny_doc("corpus.bin"))
    monkeypatch.setenv("LAB_SEED", "7")
    m, t, corpus, holdout = cli.load_run_config(cfg)
    assert m.seed == 7 and t.seed == 7
    assert corpus == workdir / "corpus.bin" and holdout == 512
    monkeypatch.setenv("LAB_SEED", "x")
    with pytest.raises(cli.ConfigError):
        cli.load_run_config(cfg)


def test_missing_files_exit_four(workdir):
    cfg = write_cfg(workdir / "c.json", tiny_doc("absent.bin"))
    assert cli.main(["train", "--config", cfg, "--out", str(workdir / "r")]) == 4
    assert cli.main(["train", "--config", str(workdir / "nope.json"), "--out", str(workdir / "r")]) == 4
    assert cli.main(["probe", str(workdir / "nope.safetensors"), "--out", str(workdir / "p")]) == 4
    (workdir / "junk.safetensors").write_bytes(b"\x03\x00\x00\x00\x00\x00\x00\x00abc")
    assert cli.main(["probe", str(workdir / "junk.safetensors"), "--out", str(workdir / "p")]) == 4


def test_probe_pure_skew_fixture(workdir):
    J = np.kron(np.eye(2), np.array([[0.0, 1.0], [-1.0, 0.0]]))
    d_model = 4
    fused = np.concatenate([np.eye(d_model), J, np.eye(d_model)], axis=1)
    write_archive(workdir / "skew.safetensors", {"h.0.attn.c_attn.weight": fused})
    out = workdir / "p"
    assert cli.main(["probe", str(workdir / "skew.safetensors"), "--heads", "1", "--out", str(out)]) == 0
    rows = [l for l in (out / "head_stats.csv").read_text().splitlines() if not l.startswith("#")]
    header = rows[0].split(",")
    row = dict(zip(header, rows[1].split(",")))
    assert row["rho_weight"] == "inf"
    doc = json.loads((out / "head_stats.json").read_text())
    assert doc["provenance"]["inputs"]
    assert cli.main(["probe", str(workdir / "skew.safetensors"), "--out", str(out)]) == 4  # heads unknown


def test_probe_and_surgery_on_trained_checkpoint(workdir):
    cfg = write_cfg(workdir / "c.json", tiny_doc("corpus.bin"))
    assert cli.main(["train", "--config", cfg, "--out", str(workdir / "run")]) == 0
    ckpt = str(workdir / "run" / CHECKPOINT)
    assert cli.main(["probe", ckpt, "--sequences", "--out", str(workdir / "p")]) == 0
    assert (workdir / "p" / "sequence_stats.csv").exists()
    common = ["--checkpoint", ckpt, "--eval-corpus", str(workdir / "corpus.bin"), "--eval-tokens", "200",
              "--out", str(workdir / "s")]
    assert cli.main(["surgery", "per-layer"] + common) == 0
    doc = json.loads((workdir / "s" / "surgery_per-layer.json").read_text())
    assert len(doc["results"]) == 2
    assert "spearman_delta_vs_effrank" in doc["meta"]
    plan = workdir / "plan.json"
    plan.write_text(json.dumps({"name": "id", "directives": [{"layer": 0}, {"layer": 1}]}))
    assert cli.main(["surgery", "plan", "--plan", str(plan)] + common) == 0
    res = json.loads((workdir / "s" / "surgery_plan.json").read_text())["results"][0]
    assert abs(res["delta_pct"]) <= 1e-6
    plan.write_text(json.dumps({"directives": [{"layer": 0, "routing_rank": 3}]}))
    assert cli.main(["surgery", "plan", "--plan", str(plan)] + common) == 2
    # grid needs standard layers
    assert cli.main(["surgery", "grid"] + common) == 2
    trace = str(workdir / "run" / TRACE)
    assert cli.main(["prescribe", "--trace", trace, "--head-dim", "8", "--heads", "2", "--d-model", "16",
                     "--context", "16", "--policy", "linear-boundary(1)", "--out", str(workdir / "rx.json")]) == 0
    rx = json.loads((workdir / "rx.json").read_text())
    assert [l["mechanism"] for l in rx["layers"]] == ["linear", "softmax"]
    assert cli.main(["prescribe", "--trace", trace, "--policy", "compressed"]) == 2


def test_surgery_grid_cell_count(workdir):
    doc = tiny_doc("corpus.bin")
    doc["model"]["layers"] = [{"mechanism": "standard", "heads": 2, "d_head": 8}] * 2
    doc["train"]["total_steps"] = 4
    cfg = write_cfg(workdir / "c.json", doc)
    assert cli.main(["train", "--config", cfg, "--out", str(workdir / "run")]) == 0
    assert cli.main(["surgery", "grid", "--checkpoint", str(workdir / "run" / CHECKPOINT),
                     "--eval-corpus", str(workdir / "corpus.bin"), "--eval-tokens", "100",
                     "--routing-ranks", "full", "2", "zero", "--filtering-ranks", "full", "zero",
                     "--out", str(workdir / "g")]) == 0
    res = json.loads((workdir / "g" / "surgery_grid.json").read_text())["results"]
    assert len(res) == 6
    assert abs(res[0]["delta_pct"]) <= 1e-6
    assert len((workdir / "g" / "surgery_grid_matrix.csv").read_text().splitlines()) > 3


def test_prescribe(workdir, capsys):
    prof = workdir / "prof.json"
    prof.write_text(json.dumps({"ranks": [2.0, 2.6, 3.1, 3.4, 4.2, 4.8, 9.7, 13.5, 21.0, 28.4, 41.0, 55.0],
                                "head_dim": 64, "heads": 12}))
    out = workdir / "rx.json"
    assert cli.main(["prescribe", "--profile", str(prof), "--policy", "compressed", "--out", str(out)]) == 0
    assert "8/8/8/8/8/8/16/16/32/32/64/64" in capsys.readouterr().out
    doc = json.loads(out.read_text())
    assert doc["totals"]["attention_params"] == 10_027_008
    assert "provenance" in doc
    assert cli.main(["prescribe", "--profile", str(prof), "--policy", "linear-boundary(0)"]) == 0
    assert "savings 0.0%" in capsys.readouterr().out
    assert cli.main(["prescribe", "--profile", str(prof), "--policy", "mystery"]) == 2
    prof.write_text("[]")
    assert cli.main(["prescribe", "--profile", str(prof), "--policy", "compressed"]) == 2


def test_console_entry_point_runs():
    res = subprocess.run([sys.executable, "-m", "sdlab.cli", "--help"], capture_output=True, text=True)
    assert res.returncode == 0 and "prescribe" in res.stdout
