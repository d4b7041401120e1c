import csv
import hashlib
import json

import numpy as np
import pytest

from mat_forecast.cli import DEFAULTS, main, resolve_config
from mat_forecast.data import load_cache, two_tone_series, write_csv
from mat_forecast.errors import ConfigError

TINY = ["--lookback", "16", "--horizon", "8", "--n1", "16", "--n2", "8", "--dim", "4", "--heads", "2",
        "--epochs", "2", "--lr", "1e-3"]  # fmt: skip


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    path = tmp_path_factory.mktemp("data") / "tones.csv"
    write_csv(two_tone_series(300, 2, seed=1), path)
    return path


def digest(path):
    return hashlib.sha256(path.read_bytes()).hexdigest()


def error_line(capsys):
    return json.loads(capsys.readouterr().err.strip().splitlines()[-1])


def rows(path):
    return list(csv.DictReader(path.read_text().splitlines()))


@pytest.fixture(scope="module")
def trained(dataset, tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    assert main(["train", "--data", str(dataset), "--out", str(out), *TINY]) == 0
    return out


# -- configuration -----------------------------------------------------------------------------


def test_resolution_order(tmp_path):
    cfg_file = tmp_path / "c.json"
    cfg_file.write_text(json.dumps({"model.n1": 32, "train.lr": 0.5}))
    cfg = resolve_config(str(cfg_file), {"train.lr": 0.25}, env={})
    assert cfg["model.n1"] == 32 and cfg["train.lr"] == 0.25 and cfg["model.n2"] == DEFAULTS["model.n2"]
    assert cfg["train.seed"] == 0


def test_seed_environment_fallback(tmp_path):
    assert resolve_config(None, {}, env={"MAT_SEED": "7"})["train.seed"] == 7
    assert resolve_config(None, {"train.seed": 3}, env={"MAT_SEED": "7"})["train.seed"] == 3
    with pytest.raises(ConfigError):
        resolve_config(None, {}, env={"MAT_SEED": "x"})


@pytest.mark.parametrize("content", ['{"model.depth": 3}', '{"model.n1": "big"}', "[1]", "{bad json"])
def test_bad_config_files_exit_2(content, tmp_path, capsys):
    p = tmp_path / "c.json"
    p.write_text(content)
    assert main(["gradcheck", "--config", str(p)]) == 2
    assert error_line(capsys)["exit_code"] == 2


def test_bad_flag_and_command_exit_2(capsys):
    assert main(["train", "--nope", "1"]) == 2
    assert main(["fly"]) == 2
    assert main(["train"]) == 2
    assert error_line(capsys)["error"] == "ConfigError"


def test_missing_data_exits_3(tmp_path, capsys):
    assert main(["ingest", "--data", str(tmp_path / "none.csv"), "--out", str(tmp_path)]) == 3
    err = error_line(capsys)
    assert err == {"error": "DataError", "exit_code": 3, "message": err["message"]}


def test_invalid_model_shape_exits_2(dataset, tmp_path):
    assert main(["train", "--data", str(dataset), "--out", str(tmp_path), *TINY, "--heads", "3"]) == 2


# -- commands -------------------------------------------------------------------------------------


def test_train_outputs(trained, dataset):
    for name in ("model.json", "model.bin", "metrics.json", "metrics.csv", "loss_curve.csv", "config.json"):
        assert (trained / name).exists(), name
    metrics = rows(trained / "metrics.csv")[0]
    assert metrics["lookback"] == "16" and metrics["horizon"] == "8"
    assert np.isfinite(float(metrics["mse"])) and float(metrics["naive_mse"]) > 0
    assert len(rows(trained / "loss_curve.csv")) == 2
    manifest = json.loads((trained / "model.json").read_text())
    assert manifest["meta"]["model_config"]["T"] == 8
    assert {"scaler.mean", "scaler.std"} <= {t["name"] for t in manifest["tensors"]}


def test_config_echo_reproduces_run(trained, tmp_path):
    cfg = json.loads((trained / "config.json").read_text())
    cfg["out.dir"] = str(tmp_path)
    (tmp_path / "echo.json").write_text(json.dumps(cfg))
    assert main(["train", "--config", str(tmp_path / "echo.json")]) == 0
    assert (tmp_path / "metrics.csv").read_bytes() == (trained / "metrics.csv").read_bytes()


def test_input_file_untouched(dataset, trained, tmp_path):
    before = digest(dataset)
    main(["evaluate", "--data", str(dataset), "--out", str(tmp_path), "--checkpoint", str(trained / "model"),
          "--epochs", "2", "--lr", "1e-3"])  # fmt: skip
    assert digest(dataset) == before


def test_evaluate_is_byte_identical(dataset, trained, tmp_path):
    args = ["evaluate", "--data", str(dataset), "--checkpoint", str(trained / "model"), "--epochs", "2"]
    assert main([*args, "--out", str(tmp_path / "a")]) == 0
    assert main([*args, "--out", str(tmp_path / "b")]) == 0
    a = (tmp_path / "a" / "eval_metrics.csv").read_bytes()
    assert a == (tmp_path / "b" / "eval_metrics.csv").read_bytes()
    methods = [r["method"] for r in rows(tmp_path / "a" / "eval_metrics.csv")]
    assert methods == ["mat", "naive", "linear", "linear_lstsq"]


def test_evaluate_matches_training_report(dataset, trained, tmp_path):
    main(["evaluate", "--data", str(dataset), "--checkpoint", str(trained / "model"), "--out", str(tmp_path),
          *TINY])  # fmt: skip
    mat = rows(tmp_path / "eval_metrics.csv")[0]
    assert float(mat["mse"]) == pytest.approx(float(rows(trained / "metrics.csv")[0]["mse"]), abs=1e-12)


def test_forecast_shape_and_units(dataset, trained, tmp_path):
    assert main(["forecast", "--data", str(dataset), "--checkpoint", str(trained / "model"),
                 "--out", str(tmp_path), "--origin", "100"]) == 0  # fmt: skip
    table = rows(tmp_path / "forecast.csv")
    assert [r["channel"] for r in table] == ["ch0", "ch1"]
    assert list(table[0])[1:] == [f"t+{k}" for k in range(1, 9)]
    values = np.array([[float(v) for k, v in r.items() if k != "channel"] for r in table])
    assert np.all(np.abs(values) < 10)


def test_forecast_bad_origin_exits_3(dataset, trained, tmp_path):
    assert main(["forecast", "--data", str(dataset), "--checkpoint", str(trained / "model"),
                 "--out", str(tmp_path), "--origin", "299"]) == 3  # fmt: skip


def test_missing_checkpoint_exits_3(dataset, tmp_path):
    assert main(["evaluate", "--data", str(dataset), "--checkpoint", str(tmp_path / "x"), "--out", str(tmp_path)]) == 3


def test_scan_bench(tmp_path):
    cfg = tmp_path / "b.json"
    cfg.write_text(json.dumps({"bench.lengths": [1, 8, 64], "bench.repeats": 1}))
    assert main(["scan-bench", "--config", str(cfg), "--out", str(tmp_path)]) == 0
    table = rows(tmp_path / "scan_bench.csv")
    assert [(r["length"], r["path"]) for r in table] == [
        (str(n), p) for n in (1, 8, 64) for p in ("sequential", "parallel")
    ]
    assert all(float(r["ns_per_step"]) > 0 for r in table)


def test_ingest_writes_cache(dataset, tmp_path, capsys):
    assert main(["ingest", "--data", str(dataset), "--out", str(tmp_path)]) == 0
    assert "2 channels, 300 steps" in capsys.readouterr().out
    ds = load_cache(tmp_path / "dataset")
    assert ds.values.shape == (2, 300)
    # the cache is accepted wherever a CSV is
    assert main(["forecast", "--data", str(tmp_path / "dataset.json"), "--out", str(tmp_path),
                 "--checkpoint", str(tmp_path / "missing")]) == 3  # fmt: skip


@pytest.mark.slow
def test_gradcheck_command(tmp_path, capsys):
    assert main(["gradcheck", "--out", str(tmp_path)]) == 0
    table = rows(tmp_path / "gradcheck.csv")
    assert table and all(r["passed"] == "True" for r in table)
    assert "PASS mat_model" in capsys.readouterr().out


def test_evaluate_per_step_table(dataset, trained, tmp_path):
    assert main(["evaluate", "--data", str(dataset), "--checkpoint", str(trained / "model"),
                 "--out", str(tmp_path), "--epochs", "2", "--metrics-space", "raw"]) == 0  # fmt: skip
    steps = rows(tmp_path / "eval_by_step.csv")
    totals = {r["method"]: float(r["mse"]) for r in rows(tmp_path / "eval_metrics.csv")}
    assert len(steps) == 4 * 8
    for method, total in totals.items():
        per_step = [float(r["mse"]) for r in steps if r["method"] == method]
        assert [int(r["step"]) for r in steps if r["method"] == method] == list(range(1, 9))
        assert np.mean(per_step) == pytest.approx(total, rel=1e-12)
