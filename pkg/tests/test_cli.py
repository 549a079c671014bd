import json

import numpy as np

from conftest import run_cli
from mixprec.cli import config_from_args, build_parser
from mixprec.desk import mlp
from mixprec.modelio import read_json, save_calibration, save_model
from mixprec.quantizer import QuantParams, quantize_tensor, weight_scales
from mixprec.sensitivity import DegradationMatrix, SensitivityReport
from mixprec.tensorcore import DENSE, SOFTMAX_XENT, TANH, Batch, Layer, ModelGraph, logits


def write_problem(root, model, batch):
    save_model(model, root / "model")
    save_calibration(batch, root / "calib")
    return ["--model", root / "model", "--calib", root / "calib", "--output-dir", root / "out"]


def one_hot_problem(n=64, seed=0):
    """Identity layers on near one-hot inputs: exact at every width in the palette."""
    rng = np.random.default_rng(seed)
    labels = rng.integers(0, 4, size=n)
    x = np.eye(4)[labels] + 0.02 * rng.normal(size=(n, 4))
    model = ModelGraph([
        Layer("fc0", DENSE, weights=np.eye(4)),
        Layer("act0", TANH),
        Layer("fc1", DENSE, weights=np.eye(4)),
        Layer("head", SOFTMAX_XENT),
    ])
    return model, Batch(x.astype(np.float32), labels)


def knife_edge_problem(seed=0):
    """Every calibration point sits within 1e-3 of a decision boundary."""
    model = mlp([6, 8, 4], seed=seed, activation="tanh")
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(20000, 6)).astype(np.float32)
    z = np.sort(logits(model, x), axis=1)
    keep = (z[:, -1] - z[:, -2]) < 1e-3
    x = x[keep][:64]
    pred = np.argmax(logits(model, x), axis=1)
    return model, Batch(x, pred)


FAST = ["--seed", 1, "--n-hutchinson", 8]


class TestAnalyze:
    def test_deterministic(self, tmp_path):
        args = write_problem(tmp_path, mlp([4, 6, 5, 4], seed=3), one_hot_problem()[1]) + FAST
        assert run_cli("analyze", *args) == 0
        first = {n: (tmp_path / "out" / n).read_bytes() for n in ("sensitivity.csv", "degradation_matrix.csv")}
        assert run_cli("analyze", *args) == 0
        for name, data in first.items():
            assert (tmp_path / "out" / name).read_bytes() == data

    def test_two_layer_matrix(self, tmp_path):
        model, batch = one_hot_problem()
        args = write_problem(tmp_path, model, batch) + FAST
        assert run_cli("analyze", *args) == 0
        d = DegradationMatrix.from_csv((tmp_path / "out" / "degradation_matrix.csv").read_text())
        assert d.matrix.shape == (2, 2)
        assert d.layer_ids == ["fc0", "fc1"]

    def test_representable_weights_zero_interlayer(self, tmp_path):
        model = mlp([4, 6, 5, 4], seed=5)
        model = model.with_weights({
            l.id: quantize_tensor(l.weights.astype(np.float64), QuantParams(8, weight_scales(l.weights)))
            for l in model.weighted_layers()
        })
        args = write_problem(tmp_path, model, one_hot_problem()[1]) + FAST
        assert run_cli("analyze", *args) == 0
        report = SensitivityReport.from_csv((tmp_path / "out" / "sensitivity.csv").read_text())
        assert not report.e_interlayer.any()


class TestSearch:
    def test_lossless_target_one_gives_min_bits(self, tmp_path):
        model, batch = one_hot_problem()
        args = write_problem(tmp_path, model, batch) + FAST + ["--accuracy-targets", "1.0"]
        assert run_cli("search", *args) == 0
        final = read_json(tmp_path / "out" / "final_config.json")
        assert final["baseline_accuracy"] == 1.0
        for entry in final["configs"]:
            assert {v["weight_bits"] for v in entry["layers"].values()} == {4}
            assert entry["feasible"]

    def test_infeasible_target_keeps_baseline(self, tmp_path):
        model, batch = knife_edge_problem()
        args = write_problem(tmp_path, model, batch) + FAST + ["--accuracy-targets", "1.0"]
        assert run_cli("search", *args) == 0
        final = read_json(tmp_path / "out" / "final_config.json")
        for entry in final["configs"]:
            assert entry["all_baseline"] and entry["feasible"]
            assert {v["weight_bits"] for v in entry["layers"].values()} == {16}

    def test_stricter_target_costs_more(self, desk_run):
        out, _ = desk_run
        report = read_json(out / "report.json")
        lat = {(r["metric"], r["target"]): r["latency_ms"] for r in report["reports"][1:]}
        for metric in ("aug", "hessian"):
            assert lat[(metric, 0.999)] >= lat[(metric, 0.99)]

    def test_one_config_per_target_and_metric(self, desk_run):
        out, _ = desk_run
        final = read_json(out / "final_config.json")
        keys = sorted((c["metric"], c["target"]) for c in final["configs"])
        assert keys == [("aug", 0.99), ("aug", 0.999), ("hessian", 0.99), ("hessian", 0.999)]
        trace = read_json(out / "search_trace.json")
        assert len(trace["runs"]) == 4

    def test_progressive(self, tmp_path):
        model, batch = one_hot_problem()
        args = write_problem(tmp_path, model, batch) + FAST + ["--search", "progressive",
                                                              "--accuracy-targets", "1.0"]
        assert run_cli("search", *args) == 0
        trace = read_json(tmp_path / "out" / "search_trace.json")
        assert trace["runs"][0]["method"] == "progressive"


class TestReport:
    def test_relative_numbers(self, tmp_path):
        model, batch = one_hot_problem()
        args = write_problem(tmp_path, model, batch) + FAST + ["--bit-palette", "16,8",
                                                              "--accuracy-targets", "1.0"]
        assert run_cli("run", *args) == 0
        reports = read_json(tmp_path / "out" / "report.json")["reports"]
        base = reports[0]
        assert base["accuracy_rel"] == base["size_rel"] == base["latency_rel"] == 1.0
        for r in reports[1:]:
            assert r["weight_precision"] == "8"
            assert r["weight_size_rel"] == 0.5
        md = (tmp_path / "out" / "report.md").read_text()
        assert "100.00%" in md and "50.00%" in md

    def test_regenerated_report_is_identical(self, tmp_path):
        model, batch = one_hot_problem()
        args = write_problem(tmp_path, model, batch) + FAST
        assert run_cli("run", *args) == 0
        names = ("report.json", "report.md", "frontier.csv", "cost_table.csv")
        before = {n: (tmp_path / "out" / n).read_bytes() for n in names}
        for n in names:
            (tmp_path / "out" / n).unlink()
        assert run_cli("report", *args) == 0
        for n in names:
            assert (tmp_path / "out" / n).read_bytes() == before[n]

    def test_frontier_columns(self, desk_run):
        out, _ = desk_run
        lines = (out / "frontier.csv").read_text().splitlines()
        assert lines[0] == "target,metric,accuracy,latency_ms,size_mb,on_frontier"
        assert len(lines) == 5


class TestResume:
    def test_search_reuses_analysis(self, tmp_path):
        model, batch = one_hot_problem()
        args = write_problem(tmp_path, model, batch) + FAST
        assert run_cli("analyze", *args) == 0
        sens = tmp_path / "out" / "sensitivity.csv"
        sens.write_text(sens.read_text())  # same bytes, new mtime
        stamp = sens.stat().st_mtime_ns
        assert run_cli("search", *args) == 0
        assert sens.stat().st_mtime_ns == stamp
        manifest = read_json(tmp_path / "out" / "run_manifest.json")
        assert manifest["stages"] == ["search"]

    def test_quantize_writes_models(self, tmp_path):
        model, batch = one_hot_problem()
        args = write_problem(tmp_path, model, batch) + FAST + ["--accuracy-targets", "1.0"]
        assert run_cli("search", *args) == 0
        assert run_cli("quantize", *args) == 0
        qdir = tmp_path / "out" / "quantized" / "aug-1.0"
        assert (qdir / "manifest.json").exists()
        assert read_json(qdir / "quantization.json")["fc0"]["weight_bits"] == 4

    def test_manifest_hashes_artifacts(self, desk_run):
        out, _ = desk_run
        manifest = read_json(out / "run_manifest.json")
        assert manifest["stages"] == ["analyze", "search", "quantize", "report"]
        assert "report.json" in manifest["artifacts"]
        assert "timings_s" not in manifest


class TestExitCodes:
    def test_bad_target(self, tmp_path):
        args = write_problem(tmp_path, *one_hot_problem())
        assert run_cli("search", *args, "--accuracy-targets", "1.5") == 2

    def test_missing_model(self, tmp_path):
        assert run_cli("analyze", "--model", tmp_path / "nope", "--calib", tmp_path / "nope") == 2

    def test_unknown_config_key(self, tmp_path):
        cfg = tmp_path / "c.json"
        cfg.write_text(json.dumps({"colour": "blue"}))
        assert run_cli("analyze", "--config", cfg) == 2

    def test_corrupt_model(self, tmp_path):
        args = write_problem(tmp_path, *one_hot_problem())
        (tmp_path / "model" / "weights.bin").write_bytes(b"\0\0")
        assert run_cli("analyze", *args) == 3

    def test_calibration_width_mismatch(self, tmp_path):
        model, _ = one_hot_problem()
        save_model(model, tmp_path / "model")
        save_calibration(Batch(np.zeros((4, 7), dtype=np.float32), [0, 1, 2, 3]), tmp_path / "calib")
        assert run_cli("analyze", "--model", tmp_path / "model", "--calib", tmp_path / "calib",
                       "--output-dir", tmp_path / "out") == 3

    def test_report_without_search(self, tmp_path):
        args = write_problem(tmp_path, *one_hot_problem())
        assert run_cli("report", *args) == 3

    def test_budget(self, tmp_path):
        args = write_problem(tmp_path, *one_hot_problem()) + FAST
        assert run_cli("search", *args, "--max-evals", "1") == 4
        assert (tmp_path / "out" / "final_config.json").exists()


class TestConfig:
    def test_flags_override_file(self, tmp_path):
        cfg = tmp_path / "c.json"
        cfg.write_text(json.dumps({"seed": 1, "percentile": 99.0}))
        args = build_parser().parse_args(["analyze", "--config", str(cfg), "--seed", "2"])
        config = config_from_args(args)
        assert config.seed == 2 and config.percentile == 99.0

    def test_defaults(self):
        config = config_from_args(build_parser().parse_args(["analyze"]))
        assert config.percentile == 99.999
        assert config.n_hutchinson == 256
        assert config.bit_palette == [16, 8, 4]
        assert config.accuracy_targets == [0.99, 0.999, 0.9999]
        assert config.metric == "aug" and config.search == "bisection"

    def test_costtable_gen(self, tmp_path):
        model, _ = one_hot_problem()
        save_model(model, tmp_path / "model")
        out = tmp_path / "table.csv"
        assert run_cli("costtable", "gen", "--model", tmp_path / "model", "--cost-per-mac", "0.5", "--out", out) == 0
        assert out.read_text().startswith("op_kind,m,n,k,weight_bits,act_bits,latency_us,provenance\n")

    def test_external_cost_table(self, tmp_path):
        model, batch = one_hot_problem()
        args = write_problem(tmp_path, model, batch) + FAST
        table = tmp_path / "table.csv"
        assert run_cli("costtable", "gen", "--model", tmp_path / "model", "--out", table) == 0
        assert run_cli("run", *args, "--cost-table", table) == 0
        assert not (tmp_path / "out" / "cost_table.csv").exists()

    def test_demo(self, tmp_path):
        assert run_cli("demo", "--output-dir", tmp_path, "--samples", 64, "--layers", 3) == 0
        assert (tmp_path / "model" / "manifest.json").exists()
