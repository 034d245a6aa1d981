import csv
import json
from pathlib import Path

import numpy as np
import pytest

import mobilellm
from mobilellm import checkpoint
from mobilellm.cli import SWEEP_FIELDS, TRAIN_LOG_FIELDS, main
from mobilellm.configio import load_model_config
from mobilellm.data import write_tokens
from mobilellm.model import Model

from conftest import toy_corpus

CONFIGS = Path(mobilellm.__file__).parent / "configs"
TINY = CONFIGS / "tiny.cfg"


def run(capsys, *argv):
    try:
        code = main([str(a) for a in argv])
    except SystemExit as e:  # argparse usage errors
        code = e.code
    out = capsys.readouterr()
    return code, out.out, out.err


@pytest.fixture
def corpus(tmp_path):
    path = tmp_path / "corpus.bin"
    write_tokens(path, toy_corpus(repeats=2), 258)
    return path


@pytest.fixture
def small_cfg(tmp_path):
    path = tmp_path / "small.cfg"
    path.write_text(
        "# two-layer byte model\n"
        "n_layers = 2\nn_heads = 4\nn_kv_heads = 2\nembed_dim = 32\nhidden_dim = 64\n"
        "vocab_size = 258\ncontext_len = 32\n"
        "[train]\nbatch_size = 2\nseq_len = 16\nwarmup_steps = 1\n"
    )
    return path


def test_count_params_125m(capsys):
    code, out, _ = run(capsys, "count-params", "--config", CONFIGS / "mobilellm-125m.cfg", "--json")
    assert code == 0
    assert json.loads(out)["total"] == 124_635_456


def test_count_params_text(capsys):
    code, out, _ = run(capsys, "count-params", "--config", TINY)
    assert code == 0 and out.startswith("total")


def test_sweep_csv(capsys, tmp_path):
    out = tmp_path / "sweep.csv"
    code, _, _ = run(capsys, "sweep", "--budget", "134e6", "--depths", "12,30", "--out", out)
    assert code == 0
    rows = list(csv.DictReader(out.open()))
    assert tuple(rows[0]) == SWEEP_FIELDS
    assert [int(r["n_layers"]) for r in rows] == [12, 30]
    for r in rows:
        assert abs(float(r["budget_delta"])) <= 0.03


def test_train_zero_steps_matches_init(capsys, tmp_path, small_cfg, corpus):
    out = tmp_path / "m.ckpt"
    code, stdout, _ = run(capsys, "train", "--config", small_cfg, "--data", corpus, "--steps", 0, "--seed", 7, "--out", out)
    assert code == 0
    assert json.loads(stdout)["final_loss"] is None
    assert out.read_bytes() == checkpoint.dumps(Model(load_model_config(small_cfg), seed=7))


def test_seed_from_environment(capsys, tmp_path, small_cfg, corpus, monkeypatch):
    monkeypatch.setenv("MLLM_SEED", "3")
    out = tmp_path / "m.ckpt"
    assert run(capsys, "train", "--config", small_cfg, "--data", corpus, "--steps", 0, "--out", out)[0] == 0
    assert out.read_bytes() == checkpoint.dumps(Model(load_model_config(small_cfg), seed=3))
    monkeypatch.setenv("MLLM_SEED", "x")
    assert run(capsys, "train", "--config", small_cfg, "--data", corpus, "--steps", 0, "--out", out)[0] == 2


def test_train_eval_quantize_generate(capsys, tmp_path, small_cfg, corpus):
    ckpt, report = tmp_path / "m.ckpt", tmp_path / "log.csv"
    code, _, _ = run(capsys, "train", "--config", small_cfg, "--data", corpus, "--steps", 5,
                     "--out", ckpt, "--report", report)
    assert code == 0
    rows = list(csv.DictReader(report.open()))
    assert tuple(rows[0]) == TRAIN_LOG_FIELDS and len(rows) == 5
    assert all(np.isfinite(float(r["loss"])) for r in rows)

    code, out, _ = run(capsys, "eval", "--ckpt", ckpt, "--data", corpus, "--json")
    assert code == 0 and json.loads(out)["perplexity"] >= 1.0

    mc = tmp_path / "mc.jsonl"
    mc.write_text('{"context": "the cat", "choices": [" sat", " dog"], "gold": 0}\n')
    code, out, _ = run(capsys, "eval", "--ckpt", ckpt, "--mc", mc, "--json")
    assert code == 0 and json.loads(out)["tasks"] == 1

    qckpt = tmp_path / "q.ckpt"
    code, out, _ = run(capsys, "quantize", "--ckpt", ckpt, "--out", qckpt)
    assert code == 0
    stats = json.loads(out)["tensors"]
    assert "blocks.0.wq" in stats and "embedding" in stats
    assert checkpoint.load(qckpt).quantized
    assert run(capsys, "quantize", "--ckpt", qckpt, "--out", tmp_path / "qq.ckpt")[0] == 2

    code, out, _ = run(capsys, "generate", "--ckpt", ckpt, "--prompt-tokens", "116,104", "--n", 4)
    assert code == 0
    toks = [int(t) for t in out.strip().split(",")]
    assert len(toks) == 6 and toks[:2] == [116, 104]


def test_train_with_teacher(capsys, tmp_path, small_cfg, corpus):
    teacher = tmp_path / "t.ckpt"
    assert run(capsys, "train", "--config", small_cfg, "--data", corpus, "--steps", 2, "--out", teacher)[0] == 0
    code, out, _ = run(capsys, "train", "--config", small_cfg, "--data", corpus, "--steps", 2,
                       "--out", tmp_path / "s.ckpt", "--kd-teacher", teacher)
    assert code == 0 and json.loads(out)["final_loss"] > 0


def test_cost_params(capsys):
    code, out, _ = run(capsys, "cost", "--params", "7e9", "--rate", "10", "--json")
    assert code == 0
    res = json.loads(out)
    assert res["energy_j_per_token"] == 0.7
    assert res["battery_runtime_s"] < 7200


def test_cost_config_reports_traffic(capsys):
    code, out, _ = run(capsys, "cost", "--config", CONFIGS / "mobilellm-ls-125m.cfg", "--json")
    assert code == 0
    tr = json.loads(out)["traffic"]
    assert tr["executed_layers"] == 60 and tr["block_fetches"] == 30


def test_cost_fleet(capsys):
    code, out, _ = run(capsys, "cost", "fleet", "--json")
    assert code == 0
    assert 5e7 <= json.loads(out)["gpus"] <= 1.5e8


@pytest.mark.parametrize("argv", [
    ["bogus"],
    ["count-params"],
    ["count-params", "--config", "/nonexistent.cfg"],
    ["sweep", "--budget", "1e8", "--depths", "a,b", "--out", "-"],
    ["cost"],
    ["cost", "--params", "1e9", "--config", str(TINY)],
    ["eval", "--ckpt", "/nonexistent.ckpt", "--data", "x"],
])
def test_invalid_input_exits_2(capsys, argv):
    assert run(capsys, *argv)[0] == 2


def test_bad_config_exits_2(capsys, tmp_path):
    bad = tmp_path / "bad.cfg"
    bad.write_text("n_layers = 2\nn_heads = 3\nn_kv_heads = 2\nembed_dim = 32\nhidden_dim = 64\n")
    code, _, err = run(capsys, "count-params", "--config", bad)
    assert code == 2 and "divisible" in err
    bad.write_text("n_layers = 2\nwidth = 3\n")
    assert run(capsys, "count-params", "--config", bad)[0] == 2


def test_not_a_checkpoint_exits_2(capsys, tmp_path):
    junk = tmp_path / "junk.ckpt"
    junk.write_bytes(b"hello world")
    assert run(capsys, "generate", "--ckpt", junk, "--prompt-tokens", "1", "--n", 1)[0] == 2
