"""Command-line smoke tests on tiny problems."""

import csv
import json
import shutil
import subprocess

import numpy as np
import pytest

from densityfilter import cli
from densityfilter.metrics import read_metrics_csv

TINY = {"N": 4, "width_phi": 16, "width_v": 4, "batch": 64, "lr_max": 1e-3, "max_iters": 20, "window": 5}


def read_rows(path):
    with open(path, newline="") as fh:
        return list(csv.reader(fh))


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    data = root / "data"
    assert cli.main(["simulate", "--model", "ou", "--n-paths", "3", "--K", "4", "--N", "8",
                     "--out-dir", str(data), "--seed", "5"]) == 0
    (root / "tiny.json").write_text(json.dumps({"config": TINY}))
    ckpt = root / "ckpt"
    assert cli.main(["--seed", "1", "train", "--model", "ou", "--method", "logbsdef", "--config",
                     str(root / "tiny.json"), "--K", "4", "--out", str(ckpt)]) == 0
    return root, data, ckpt


class TestSimulate:
    def test_outputs(self, workspace):
        _, data, _ = workspace
        for name in ("dataset.bin", "problem.json", "observations.csv", "states.csv"):
            assert (data / name).exists()
        obs = read_rows(data / "observations.csv")
        assert obs[0] == ["sequence", "k", "o_1"] and len(obs) == 1 + 3 * 4

    def test_csv_matches_reader(self, workspace):
        _, data, _ = workspace
        assert cli.read_observations_csv(data / "observations.csv").shape == (3, 4, 1)

    def test_model_params(self, tmp_path):
        assert cli.main(["simulate", "--model", "l96", "--model-param", "d=6", "--model-param", "d_prime=3",
                         "--n-paths", "2", "--K", "2", "--N", "40", "--T", "0.2", "--out-dir", str(tmp_path)]) == 0
        assert read_rows(tmp_path / "observations.csv")[0] == ["sequence", "k", "o_1", "o_2", "o_3"]

    def test_seed_determinism(self, tmp_path):
        for sub in ("a", "b"):
            cli.main(["simulate", "--model", "ou", "--n-paths", "2", "--K", "2", "--N", "4", "--seed", "9",
                      "--out-dir", str(tmp_path / sub)])
        assert (tmp_path / "a" / "states.csv").read_bytes() == (tmp_path / "b" / "states.csv").read_bytes()


class TestFilterAndDensity:
    @pytest.mark.parametrize("method", ["kf", "ekf", "enkf", "pf"])
    def test_classical(self, workspace, tmp_path, method):
        _, data, _ = workspace
        assert cli.main(["filter", "--dataset", str(data / "dataset.bin"), "--method", method,
                         "--particles", "200", "--out-dir", str(tmp_path)]) == 0
        rows = read_rows(tmp_path / "filter_means.csv")
        assert rows[0] == ["sequence", "k", "mean_1"] and len(rows) == 13

    def test_deep_checkpoint(self, workspace, tmp_path):
        _, data, ckpt = workspace
        assert (ckpt / "filter.bin").exists()
        assert cli.main(["filter", "--dataset", str(data / "dataset.bin"), "--method", str(ckpt),
                         "--samples", "200", "--out-dir", str(tmp_path)]) == 0
        means = np.array([[float(v) for v in r[2:]] for r in read_rows(tmp_path / "filter_means.csv")[1:]])
        assert means.shape == (12, 1) and np.all(np.isfinite(means))

    def test_eval_density(self, workspace, tmp_path):
        root, data, ckpt = workspace
        pts = tmp_path / "points.csv"
        pts.write_text("x_1\n-1.0\n0.0\n1.0\n")
        assert cli.main(["eval-density", "--checkpoint", str(ckpt), "--obs", str(data / "observations.csv"),
                         "--points", str(pts), "--k", "2", "--out-dir", str(tmp_path)]) == 0
        rows = read_rows(tmp_path / "log_density.csv")
        assert rows[0] == ["sequence", "k", "point", "log_density"]
        assert len(rows) == 1 + 3 * 3
        assert all(np.isfinite(float(r[3])) for r in rows[1:])


class TestBenchAndReport:
    def test_bench_then_report(self, tmp_path):
        cfg = {"example": "ou", "problem": {"d": 1}, "grid": {"T": 1.0, "K": 2},
               "methods": [{"method": "kf"}, {"method": "pf", "particles": 100}],
               "evaluation": {"M": 50, "reference": {"kind": "kf"}, "kld_samples": 3, "sim_substeps": 4}}
        path = tmp_path / "cfg.json"
        path.write_text(json.dumps(cfg))
        out = tmp_path / "run"
        assert cli.main(["bench", "--config", str(path), "--M", "4", "--out-dir", str(out)]) == 0
        records = read_metrics_csv(out / "metrics.csv")
        assert len(records) == 2 * 2 * 5
        man = json.loads((out / "manifest.json").read_text())
        assert man["sequences"] == 4 and man["failed"] == {}
        assert read_rows(out / "timing.csv")[0] == ["method", "d", "phase", "seconds"]
        rep = tmp_path / "rep"
        assert cli.main(["report", "--metrics", str(out / "metrics.csv"), "--manifest", str(out / "manifest.json"),
                         "--out-dir", str(rep)]) == 0
        text = (rep / "report.csv").read_text()
        assert text.startswith("method,metric,time_average\n") and "kf,rmae,0.0" in text
        assert (rep / "timing.csv").exists()

    def test_bench_needs_config(self, tmp_path):
        with pytest.raises(SystemExit):
            cli.main(["bench", "--out-dir", str(tmp_path)])

    def test_train_from_experiment_config(self, tmp_path):
        cfg = {"example": "ou", "problem": {"d": 1}, "grid": {"T": 0.5, "K": 2},
               "methods": [{"method": "logdsf", "config": {**{k: v for k, v in TINY.items() if k != "width_v"},
                                                            "n_batches": 2, "epochs_update": 1, "epochs_predict": 1}}]}
        path = tmp_path / "exp.json"
        path.write_text(json.dumps(cfg))
        assert cli.main(["train", "--model", "ou", "--method", "logdsf", "--config", str(path),
                         "--out-dir", str(tmp_path)]) == 0
        assert (tmp_path / "ou_logdsf" / "filter.bin").exists()


class TestParser:
    def test_global_flags_after_subcommand(self):
        args = cli.build_parser().parse_args(["simulate", "--model", "ou", "--seed", "7", "--threads", "1"])
        assert args.seed == 7 and args.threads == 1

    def test_global_flags_before_subcommand(self):
        args = cli.build_parser().parse_args(["--seed", "7", "--out-dir", "x", "simulate", "--model", "ou"])
        assert args.seed == 7 and args.out_dir == "x"

    def test_defaults(self):
        args = cli.build_parser().parse_args(["report"])
        assert args.seed == 0 and args.out_dir == "."

    def test_unknown_subcommand(self):
        with pytest.raises(SystemExit):
            cli.main(["plot"])

    def test_model_param_parsing(self):
        assert cli._model_params(["d=3", "F=8.5", "name=x"]) == {"d": 3, "F": 8.5, "name": "x"}

    @pytest.mark.skipif(shutil.which("densityfilter") is None, reason="console script not installed")
    def test_console_script(self):
        out = subprocess.run(["densityfilter", "--help"], capture_output=True, text=True)
        assert out.returncode == 0
        for sub in ("simulate", "train", "filter", "eval-density", "bench", "report"):
            assert sub in out.stdout
