import json
from pathlib import Path

import numpy as np
import pytest

from kpiembed import cli, config as cfgmod
from kpiembed.errors import ConfigError
from kpiembed.preprocess import KPI_NAMES

FAST_CONFIG = {
    "data": {"source": "synth", "synth": {"n_samples": 500, "seed": 0}},
    "model": {"d_model": 8, "n_heads": 2, "d_ff": 16, "n_layers": 1, "n_res": 16},
    "train": {"regime": "limited", "batch_size": 32},
    "seeds": [7],
}


@pytest.fixture()
def fast_config(tmp_path):
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps(FAST_CONFIG))
    return str(path)


def run(argv):
    return cli.main(argv)


# -- config machinery ----------------------------------------------------------------

def test_config_defaults_round_trip():
    cfg = cfgmod.RunConfig()
    again = cfgmod.config_from_dict(json.loads(cfg.to_json()))
    assert again.to_json() == cfg.to_json()


def test_unknown_config_key_rejected():
    with pytest.raises(ConfigError) as exc:
        cfgmod.config_from_dict({"trian": {}})
    assert "trian" in str(exc.value)


def test_unknown_nested_key_names_path():
    with pytest.raises(ConfigError) as exc:
        cfgmod.config_from_dict({"train": {"regim": "full"}})
    assert "train.regim" in str(exc.value)


def test_presets_load():
    full = cfgmod.load_preset("full")
    limited = cfgmod.load_preset("limited")
    assert full.train.regime == "full"
    assert limited.train.regime == "limited"
    assert limited.data.synth.n_samples >= 20000


def test_override_precedence(tmp_path):
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps({"train": {"batch_size": 64}}))
    cfg = cfgmod.resolve_config(config_path=str(path),
                                overrides={"train": {"batch_size": 16}})
    assert cfg.train.batch_size == 16


# -- command flows --------------------------------------------------------------------

def test_synth_emits_parseable_stream(tmp_path, fast_config):
    out = tmp_path / "synth"
    assert run(["synth", "--config", fast_config, "--out", str(out),
                "--duration-ms", "5000"]) == 0
    header = (out / "stream.csv").read_text().splitlines()[0]
    assert header == "timestamp," + ",".join(KPI_NAMES)
    assert (out / "resolved_config.json").exists()
    assert (out / "inputs.json").exists()


def test_preprocess_fixture_sample_count(tmp_path, fast_config):
    """3-record fixture: windows at t=0,20,40 all populated, far too short for
    a 28-step sequence, so M = 0 but the aggregated rows are correct."""
    log = tmp_path / "tiny.csv"
    header = "timestamp," + ",".join(KPI_NAMES)
    rows = [f"{t}," + ",".join("1.0" for _ in KPI_NAMES) for t in (0, 20, 40)]
    log.write_text("\n".join([header] + rows) + "\n")
    out = tmp_path / "pre"
    assert run(["preprocess", "--input", str(log), "--out", str(out)]) == 0
    report = json.loads((out / "preprocess_report.json").read_text())
    assert report["parsed_rows"] == 3
    assert report["aggregated_rows"] == 3
    assert report["n_samples"] == 0


def test_full_staged_flow(tmp_path, fast_config):
    synth_out = tmp_path / "s"
    assert run(["synth", "--config", fast_config, "--out", str(synth_out)]) == 0
    pre_out = tmp_path / "p"
    assert run(["preprocess", "--config", fast_config, "--input",
                str(synth_out / "stream.csv"), "--out", str(pre_out)]) == 0
    ext_out = tmp_path / "e"
    assert run(["train-extractor", "--config", fast_config, "--data",
                str(pre_out / "dataset"), "--out", str(ext_out), "--seed", "1"]) == 0
    emb_out = tmp_path / "m"
    assert run(["embed", "--config", fast_config, "--data", str(pre_out / "dataset"),
                "--ckpt", str(ext_out / "checkpoint"), "--out", str(emb_out)]) == 0
    emb = np.load(emb_out / "embeddings.npy")
    assert emb.shape[1] == 8
    pred_out = tmp_path / "pr"
    assert run(["train-predictor", "--config", fast_config, "--data",
                str(pre_out / "dataset"), "--embeddings", str(emb_out / "embeddings.npy"),
                "--target", "rsrq", "--out", str(pred_out)]) == 0
    metrics = json.loads((pred_out / "metrics.json").read_text())
    assert metrics["target"] == "rsrq"
    assert metrics["test"]["mse"] >= 0


def test_benchmark_byte_identical_reports(tmp_path, fast_config):
    a, b = tmp_path / "a", tmp_path / "b"
    assert run(["benchmark", "--config", fast_config, "--seed", "7", "--out", str(a)]) == 0
    assert run(["benchmark", "--config", fast_config, "--seed", "7", "--out", str(b)]) == 0
    assert (a / "report.json").read_bytes() == (b / "report.json").read_bytes()
    payload = json.loads((a / "report.json").read_text())
    assert len(payload["medians"]) == 4  # all four conditions
    assert (a / "timing.json").exists()


def test_sweep_dim_rows_and_plot(tmp_path, fast_config):
    out = tmp_path / "sw"
    assert run(["sweep-dim", "--config", fast_config, "--dims", "2,4",
                "--out", str(out)]) == 0
    rows = json.loads((out / "sweep.json").read_text())
    assert len(rows) == 4  # 2 dims x 2 targets
    assert (out / "sweep.svg").exists()
    table = (out / "sweep.tsv").read_text().splitlines()
    assert table[0] == "n\ttarget\tmse_median"
    assert len(table) == 5


def test_report_command(tmp_path, fast_config, capsys):
    bench = tmp_path / "b"
    assert run(["benchmark", "--config", fast_config, "--seed", "7",
                "--out", str(bench)]) == 0
    capsys.readouterr()
    out = tmp_path / "r"
    assert run(["report", "--report", str(bench / "report.json"), "--out", str(out)]) == 0
    printed = capsys.readouterr().out
    assert printed.startswith("condition\ttarget\tmse")
    assert (out / "report.svg").exists()


# -- error surfaces ------------------------------------------------------------------------

def test_unknown_flag_exits_2(capsys):
    with pytest.raises(SystemExit) as exc:
        run(["benchmark", "--frobnicate"])
    assert exc.value.code == 2


def test_unknown_config_key_exits_2(tmp_path):
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"nope": 1}))
    assert run(["synth", "--config", str(bad), "--out", str(tmp_path / "o")]) == 2


def test_missing_input_exits_1(tmp_path, capsys):
    rc = run(["preprocess", "--input", str(tmp_path / "missing.csv"),
              "--out", str(tmp_path / "o")])
    assert rc == 1
    err = capsys.readouterr().err
    assert err.startswith("error ")


def test_bad_checkpoint_exits_1(tmp_path, fast_config):
    rc = run(["embed", "--config", fast_config, "--ckpt", str(tmp_path / "nope"),
              "--out", str(tmp_path / "o")])
    assert rc == 1


def test_output_root_env_var(tmp_path, fast_config, monkeypatch):
    monkeypatch.setenv(cli.ENV_OUTPUT_ROOT, str(tmp_path / "root"))
    assert run(["synth", "--config", fast_config, "--duration-ms", "2000"]) == 0
    assert (tmp_path / "root" / "synth" / "stream.csv").exists()
