"""End-to-end stages: analyze -> search -> quantize -> report.

Every stage reads its inputs from ``output_dir`` when they already exist and
writes fixed-name artifacts there atomically. Given the same model,
calibration set, configuration and seed, every artifact is byte-identical
across runs.
"""

from __future__ import annotations

import logging
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import __version__
from .costmodel import CostTable, cost_report, model_latency, model_size, pareto_frontier, reports_to_markdown, synth_cost_table
from .modelio import DataError, atomic_write_text, dump_json, load_calibration, load_model, read_json, save_model, sha256_file, write_json
from .quantizer import BASELINE_BITS, QuantConfig, Quantizer, ScaleSet, compute_scales
from .rng import stream
from .search import ConfigEvaluator, SearchSpec, bisection_search, progressive_search
from .sensitivity import METRICS, DegradationMatrix, SensitivityReport, compute_sensitivity
from .tensorcore import Batch

log = logging.getLogger(__name__)

SCALES = "scales.json"
SENSITIVITY = "sensitivity.csv"
DEGRADATION = "degradation_matrix.csv"
FINAL_CONFIG = "final_config.json"
SEARCH_TRACE = "search_trace.json"
TRIALS = "trials.json"
REPORT_JSON = "report.json"
REPORT_MD = "report.md"
FRONTIER = "frontier.csv"
COST_TABLE = "cost_table.csv"
QUANTIZED_DIR = "quantized"
RUN_MANIFEST = "run_manifest.json"

SEARCHES = {"bisection": bisection_search, "progressive": progressive_search}


class ConfigError(ValueError):
    pass


class BudgetExceeded(RuntimeError):
    """Raised after artifacts are written when a search ran out of evaluations."""


@dataclass
class PipelineConfig:
    model_path: str = ""
    calib_path: str = ""
    output_dir: str = "out"
    seed: int = 0
    percentile: float = 99.999
    n_hutchinson: int = 256
    bit_palette: list[int] = field(default_factory=lambda: [16, 8, 4])
    accuracy_targets: list[float] = field(default_factory=lambda: [0.99, 0.999, 0.9999])
    metric: str = "aug"
    compare_metrics: list[str] = field(default_factory=lambda: ["hessian"])
    search: str = "bisection"
    cost_table: str = "synthetic"
    cost_per_mac: float = 0.001
    hessian_norm: str = "mean"
    clip: str = "term"
    rounding: str = "case"
    quant_mode: str = "symmetric"
    workers: int = 1
    max_evals: int | None = None
    trials: int = 0
    record_timings: bool = False

    def validate(self, need_paths: bool = True) -> None:
        if need_paths:
            for name in ("model_path", "calib_path"):
                value = getattr(self, name)
                if not value or not Path(value).exists():
                    raise ConfigError(f"{name} {value!r} does not exist")
        if not self.accuracy_targets or not all(0 < t <= 1 for t in self.accuracy_targets):
            raise ConfigError(f"accuracy targets must lie in (0, 1]: {self.accuracy_targets}")
        palette = self.bit_palette
        if len(palette) < 2 or any(a <= b for a, b in zip(palette, palette[1:])):
            raise ConfigError(f"bit palette must be strictly descending: {palette}")
        if palette[0] != BASELINE_BITS or any(b not in (4, 8, 16) for b in palette):
            raise ConfigError(f"bit palette must start at 16 and use widths from {{16, 8, 4}}: {palette}")
        for m in [self.metric, *self.compare_metrics]:
            if m not in METRICS:
                raise ConfigError(f"unknown metric {m!r}")
        if self.search not in SEARCHES:
            raise ConfigError(f"unknown search {self.search!r}")
        if not 0 < self.percentile <= 100:
            raise ConfigError("percentile must be in (0, 100]")
        if self.n_hutchinson < 1 or self.workers < 1 or self.trials < 0:
            raise ConfigError("n_hutchinson and workers must be >= 1, trials >= 0")
        if self.cost_table != "synthetic" and not Path(self.cost_table).exists():
            raise ConfigError(f"cost table {self.cost_table!r} does not exist")
        if not self.cost_per_mac > 0:
            raise ConfigError("cost_per_mac must be positive")

    @classmethod
    def from_dict(cls, data: dict) -> "PipelineConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown configuration keys {sorted(unknown)}")
        return cls(**data)

    @property
    def metrics(self) -> list[str]:
        return list(dict.fromkeys([self.metric, *self.compare_metrics]))

    @property
    def interlayer_bits(self) -> int:
        return self.bit_palette[1]

    def snapshot(self) -> dict:
        out = asdict(self)
        # where artifacts go is not an input; leaving it out keeps relocated reruns identical
        out.pop("record_timings")
        out.pop("output_dir")
        return out


class Pipeline:
    def __init__(self, config: PipelineConfig):
        self.cfg = config
        self.out = Path(config.output_dir)
        self.timings: dict[str, float] = {}
        self.stages: list[str] = []
        self._model = self._calib = None

    # -- inputs ----------------------------------------------------------

    @property
    def model(self):
        if self._model is None:
            self._model = load_model(self.cfg.model_path)
        return self._model

    @property
    def calib(self) -> Batch:
        if self._calib is None:
            self._calib = load_calibration(self.cfg.calib_path)
            if self._calib.inputs.shape[1] != self.model.input_dim:
                raise DataError(
                    f"{self.cfg.calib_path}: {self._calib.inputs.shape[1]} features, "
                    f"model expects {self.model.input_dim}"
                )
        return self._calib

    def _timed(self, name, fn):
        start = time.perf_counter()
        result = fn()
        self.timings[name] = round(time.perf_counter() - start, 3)
        self.stages.append(name)
        return result

    def scales(self, recompute: bool = False) -> ScaleSet:
        path = self.out / SCALES
        if path.exists() and not recompute:
            return ScaleSet.from_json(read_json(path))
        scales = compute_scales(
            self.model, self.calib, self.cfg.percentile, self.cfg.interlayer_bits,
            rounding=self.cfg.rounding, mode=self.cfg.quant_mode,
        )
        write_json(path, scales.to_json())
        return scales

    def sensitivity(self) -> SensitivityReport:
        path = self.out / SENSITIVITY
        if not path.exists():
            self.analyze()
        return SensitivityReport.from_csv(path.read_text(encoding="utf-8"), self.cfg.metric)

    def cost_table(self) -> CostTable:
        if self.cfg.cost_table == "synthetic":
            return synth_cost_table(self.model, self.cfg.cost_per_mac, self.cfg.bit_palette)
        return CostTable.read(self.cfg.cost_table)

    def evaluator(self, calib: Batch | None = None) -> ConfigEvaluator:
        return ConfigEvaluator(
            self.model, calib or self.calib, self.scales(), rounding=self.cfg.rounding, mode=self.cfg.quant_mode
        )

    # -- stages ----------------------------------------------------------

    def analyze(self) -> tuple[SensitivityReport, DegradationMatrix]:
        def run():
            scales = self.scales(recompute=True)
            report, dmat = compute_sensitivity(
                self.model, self.calib, n_samples=self.cfg.n_hutchinson, seed=self.cfg.seed,
                bits=self.cfg.interlayer_bits, palette=self.cfg.bit_palette,
                normalize=self.cfg.hessian_norm, clip=self.cfg.clip, metric=self.cfg.metric,
                scales=scales, workers=self.cfg.workers,
            )
            atomic_write_text(self.out / SENSITIVITY, report.to_csv())
            atomic_write_text(self.out / DEGRADATION, dmat.to_csv())
            return report, dmat

        return self._timed("analyze", run)

    def _search_one(self, ordering, target, evaluate, baseline_accuracy):
        spec = SearchSpec(target, tuple(self.cfg.bit_palette), max_evals=self.cfg.max_evals)
        return SEARCHES[self.cfg.search](
            ordering, spec, evaluate, layer_ids=self.model.weighted_ids(), baseline_accuracy=baseline_accuracy
        )

    def search(self) -> dict:
        def run():
            report = self.sensitivity()
            evaluate = self.evaluator()
            ids = self.model.weighted_ids()
            baseline = evaluate(QuantConfig.uniform(ids, BASELINE_BITS))
            configs, traces, flagged_budget = [], [], False
            for metric in self.cfg.metrics:
                ordering = report.ordering(metric)
                for target in self.cfg.accuracy_targets:
                    config, trace = self._search_one(ordering, target, evaluate, baseline)
                    accuracy = evaluate(config)
                    feasible = accuracy >= target * baseline
                    unquantized = all(b == BASELINE_BITS for b in config.weight_bits.values())
                    if unquantized:
                        log.warning("target %s (%s): no layer could be quantized; keeping baseline", target, metric)
                    flagged_budget |= trace.budget_exceeded
                    configs.append({
                        "target": target, "metric": metric, "search": self.cfg.search,
                        "accuracy": accuracy, "feasible": feasible, "all_baseline": unquantized,
                        "budget_exceeded": trace.budget_exceeded, "layers": config.to_json(),
                    })
                    traces.append({"target": target, "metric": metric, "ordering": ordering, **trace.to_json()})
            write_json(self.out / FINAL_CONFIG, {"baseline_accuracy": baseline, "configs": configs})
            write_json(self.out / SEARCH_TRACE, {"runs": traces})
            if self.cfg.trials:
                write_json(self.out / TRIALS, self._trials(report))
            return {"baseline_accuracy": baseline, "configs": configs, "budget_exceeded": flagged_budget}

        result = self._timed("search", run)
        if result["budget_exceeded"]:
            raise BudgetExceeded("evaluation budget exceeded; partial configs were written")
        return result

    def _trials(self, report: SensitivityReport) -> dict:
        """Re-run the primary search on bootstrap resamples of the calibration set."""
        calib, table = self.calib, self.cost_table()
        ordering = report.ordering(self.cfg.metric)
        rows = {t: {"latency_us": [], "accuracy_rel": []} for t in self.cfg.accuracy_targets}
        for i in range(self.cfg.trials):
            idx = np.sort(stream(self.cfg.seed, "trial", i).integers(0, len(calib), size=len(calib)))
            sample = Batch(calib.inputs[idx], calib.labels[idx])
            evaluate = self.evaluator(sample)
            baseline = evaluate(QuantConfig.uniform(self.model.weighted_ids(), BASELINE_BITS))
            for target in self.cfg.accuracy_targets:
                config, _ = self._search_one(ordering, target, evaluate, baseline)
                rows[target]["latency_us"].append(model_latency(self.model, config, table))
                rows[target]["accuracy_rel"].append(evaluate(config) / baseline)
        summary = []
        for target, vals in rows.items():
            lat, acc = np.array(vals["latency_us"]), np.array(vals["accuracy_rel"])
            summary.append({
                "target": target, "metric": self.cfg.metric, "trials": self.cfg.trials,
                "latency_us_mean": float(lat.mean()), "latency_us_std": float(lat.std()),
                "accuracy_rel_mean": float(acc.mean()), "accuracy_rel_std": float(acc.std()),
            })
        return {"summary": summary}

    def _final_configs(self) -> dict:
        path = self.out / FINAL_CONFIG
        if not path.exists():
            raise DataError(f"{path}: search artifacts missing; run `search` first")
        return read_json(path)

    def quantize(self) -> list[Path]:
        def run():
            final = self._final_configs()
            quantizer = Quantizer(self.model, self.scales(), rounding=self.cfg.rounding, mode=self.cfg.quant_mode)
            written = []
            for entry in final["configs"]:
                config = QuantConfig.from_json(entry["layers"])
                view = quantizer.apply(config, activations=False)
                target_dir = self.out / QUANTIZED_DIR / f"{entry['metric']}-{entry['target']}"
                save_model(view, target_dir)
                scales = quantizer.scales
                write_json(target_dir / "quantization.json", {
                    lid: {"weight_bits": config.weight_bits[lid], "act_bits": config.act_bits[lid],
                          "act_scale": scales[lid].act_scale,
                          "weight_scales": [float(a) for a in scales[lid].weight_scales]}
                    for lid in config
                })
                written.append(target_dir)
            return written

        return self._timed("quantize", run)

    def report(self) -> list:
        def run():
            final = self._final_configs()
            table = self.cost_table()
            if self.cfg.cost_table == "synthetic":
                table.write(self.out / COST_TABLE)
            evaluate = self.evaluator()
            ids = self.model.weighted_ids()
            base_cfg = QuantConfig.uniform(ids, BASELINE_BITS)
            baseline = evaluate(base_cfg)
            reports = [cost_report(self.model, base_cfg, table, baseline, baseline, "Baseline")]
            for entry in final["configs"]:
                config = QuantConfig.from_json(entry["layers"])
                label = f"{entry['metric']} {100 * entry['target']:g}%"
                reports.append(cost_report(
                    self.model, config, table, evaluate(config), baseline, label,
                    target=entry["target"], metric=entry["metric"],
                ))
            points = [(r.accuracy_abs, r.latency_ms) for r in reports[1:]]
            front = set(pareto_frontier(points))
            lines = ["target,metric,accuracy,latency_ms,size_mb,on_frontier"]
            for r in reports[1:]:
                lines.append(
                    f"{r.target!r},{r.metric},{r.accuracy_abs!r},{r.latency_ms!r},{r.size_mb!r},"
                    f"{int((r.accuracy_abs, r.latency_ms) in front)}"
                )
            atomic_write_text(self.out / FRONTIER, "\n".join(lines) + "\n")
            write_json(self.out / REPORT_JSON, {
                "baseline_accuracy": baseline,
                "baseline_size_bytes": model_size(self.model, base_cfg),
                "cost_table": table.provenance,
                "reports": [r.to_json() for r in reports],
            })
            atomic_write_text(self.out / REPORT_MD, reports_to_markdown(reports))
            return reports

        return self._timed("report", run)

    def costtable(self, path=None) -> CostTable:
        table = synth_cost_table(self.model, self.cfg.cost_per_mac, self.cfg.bit_palette)
        table.write(path or self.out / COST_TABLE)
        return table

    def write_manifest(self) -> None:
        hashes = {}
        for p in sorted(self.out.rglob("*")):
            if p.is_file() and p.name != RUN_MANIFEST and not p.name.startswith("."):
                hashes[p.relative_to(self.out).as_posix()] = sha256_file(p)
        manifest = {
            "tool": "mixprec",
            "version": __version__,
            "seed": self.cfg.seed,
            "config": self.cfg.snapshot(),
            "stages": self.stages,
            "artifacts": hashes,
        }
        if self.cfg.record_timings:
            manifest["timings_s"] = self.timings
        write_json(self.out / RUN_MANIFEST, manifest)


def run_all(config: PipelineConfig) -> Pipeline:
    pipe = Pipeline(config)
    try:
        pipe.analyze()
        pipe.search()
        pipe.quantize()
        pipe.report()
    finally:
        pipe.write_manifest()
    return pipe


__all__ = ["PipelineConfig", "Pipeline", "run_all", "ConfigError", "BudgetExceeded", "dump_json"]
