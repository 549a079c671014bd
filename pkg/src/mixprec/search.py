"""Bit-width assignment search under an accuracy target.

All searches take an ``evaluate(config) -> accuracy`` callable so they can be
driven by a real model (:class:`ConfigEvaluator`) or by a stub. A config is
*feasible* when its accuracy is at least ``target * baseline_accuracy``.
"""

from __future__ import annotations

import hashlib
import itertools
import json
import logging
from dataclasses import dataclass, field
from typing import Callable, Sequence

from .quantizer import QuantConfig, Quantizer, ScaleSet
from .tensorcore import Batch, ModelGraph, forward

log = logging.getLogger(__name__)

Evaluator = Callable[[QuantConfig], float]


class SearchError(ValueError):
    pass


class EvalBudgetExceeded(RuntimeError):
    pass


@dataclass(frozen=True)
class SearchSpec:
    accuracy_target: float = 0.999
    bit_palette: tuple[int, ...] = (16, 8, 4)
    metric: str = "aug"
    max_evals: int | None = None

    def __post_init__(self):
        if not 0 < self.accuracy_target <= 1:
            raise SearchError(f"accuracy target must be in (0, 1], got {self.accuracy_target}")
        palette = tuple(int(b) for b in self.bit_palette)
        if not palette or any(a <= b for a, b in zip(palette, palette[1:])):
            raise SearchError(f"bit palette must be strictly descending, got {list(palette)}")
        object.__setattr__(self, "bit_palette", palette)

    @property
    def baseline_bits(self) -> int:
        return self.bit_palette[0]


def config_hash(config: QuantConfig) -> str:
    blob = json.dumps(config.to_json(), sort_keys=True).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


@dataclass
class TraceStep:
    bits: int
    accuracy: float
    passed: bool
    decision: str
    config: QuantConfig
    prefix: int | None = None
    layer: str | None = None

    def to_json(self) -> dict:
        out = {
            "bits": self.bits,
            "accuracy": self.accuracy,
            "passed": self.passed,
            "decision": self.decision,
            "config_hash": config_hash(self.config),
        }
        if self.prefix is not None:
            out["prefix"] = self.prefix
        if self.layer is not None:
            out["layer"] = self.layer
        return out


@dataclass
class SearchTrace:
    method: str
    baseline_accuracy: float
    threshold: float
    steps: list[TraceStep] = field(default_factory=list)
    eval_count: dict[int, int] = field(default_factory=dict)
    final: QuantConfig | None = None
    revalidation_shrinks: int = 0
    budget_exceeded: bool = False

    @property
    def total_evals(self) -> int:
        return len(self.steps)

    def to_json(self) -> dict:
        return {
            "method": self.method,
            "baseline_accuracy": self.baseline_accuracy,
            "threshold": self.threshold,
            "eval_count": {str(k): v for k, v in self.eval_count.items()},
            "revalidation_shrinks": self.revalidation_shrinks,
            "budget_exceeded": self.budget_exceeded,
            "final_config_hash": config_hash(self.final) if self.final is not None else None,
            "steps": [s.to_json() for s in self.steps],
        }


class _Runner:
    """Counts evaluations, enforces the budget and records the trace."""

    def __init__(self, evaluate: Evaluator, spec: SearchSpec, trace: SearchTrace):
        self.evaluate = evaluate
        self.spec = spec
        self.trace = trace

    def __call__(self, config: QuantConfig, bits: int, decision: str, **where) -> bool:
        if self.spec.max_evals is not None and self.trace.total_evals >= self.spec.max_evals:
            raise EvalBudgetExceeded(f"evaluation budget of {self.spec.max_evals} exhausted")
        acc = float(self.evaluate(config))
        ok = acc >= self.trace.threshold
        self.trace.steps.append(
            TraceStep(bits, acc, ok, f"{decision}-{'pass' if ok else 'fail'}", config, **where)
        )
        self.trace.eval_count[bits] = self.trace.eval_count.get(bits, 0) + 1
        return ok


def _start(method, ordering, spec, evaluate, layer_ids, baseline_accuracy):
    ids = list(layer_ids) if layer_ids is not None else list(ordering)
    missing = set(ids) - set(ordering)
    if missing or len(set(ordering)) != len(ordering) or set(ordering) - set(ids):
        raise SearchError("ordering must be a permutation of the weighted layers")
    base = QuantConfig.uniform(ids, spec.baseline_bits)
    trace = SearchTrace(method, float("nan"), float("nan"))
    if baseline_accuracy is None:
        baseline_accuracy = float(evaluate(base))
        trace.steps.append(TraceStep(spec.baseline_bits, baseline_accuracy, True, "baseline", base))
        trace.eval_count[spec.baseline_bits] = 1
    trace.baseline_accuracy = float(baseline_accuracy)
    trace.threshold = spec.accuracy_target * trace.baseline_accuracy
    return base, trace


def bisection_search(
    ordering: Sequence[str],
    spec: SearchSpec,
    evaluate: Evaluator,
    layer_ids: Sequence[str] | None = None,
    baseline_accuracy: float | None = None,
) -> tuple[QuantConfig, SearchTrace]:
    """Bisect the longest feasible prefix of ``ordering`` for each lower width.

    For each width below the baseline the candidate prefix lengths are
    ``0..N`` of the surviving list; the bracket ``(lowl, upl)`` holds the
    longest known-feasible and shortest known-infeasible lengths (``N+1``
    before any failure) and closes at width one. The winning prefix is then
    re-evaluated and shortened until it passes, and only that prefix is
    carried to the next width.
    """
    w, trace = _start("bisection", ordering, spec, evaluate, layer_ids, baseline_accuracy)
    run = _Runner(evaluate, spec, trace)
    survivors = list(ordering)
    try:
        for bits in spec.bit_palette[1:]:
            lowl, upl = 0, len(survivors) + 1
            while upl - lowl > 1:
                thr = (lowl + upl) // 2
                if run(w.with_bits(survivors[:thr], bits), bits, "bisect", prefix=thr):
                    lowl = thr
                else:
                    upl = thr
            thr = lowl
            while thr > 0 and not run(w.with_bits(survivors[:thr], bits), bits, "revalidate", prefix=thr):
                thr -= 1
                trace.revalidation_shrinks += 1
            w = w.with_bits(survivors[:thr], bits)
            survivors = survivors[:thr]
    except EvalBudgetExceeded as exc:
        log.warning("%s; returning last validated config", exc)
        trace.budget_exceeded = True
    trace.final = w
    return w, trace


def progressive_search(
    ordering: Sequence[str],
    spec: SearchSpec,
    evaluate: Evaluator,
    layer_ids: Sequence[str] | None = None,
    baseline_accuracy: float | None = None,
) -> tuple[QuantConfig, SearchTrace]:
    """Try each surviving layer at each lower width, keeping it if still feasible."""
    w, trace = _start("progressive", ordering, spec, evaluate, layer_ids, baseline_accuracy)
    run = _Runner(evaluate, spec, trace)
    survivors = list(ordering)
    try:
        for bits in spec.bit_palette[1:]:
            kept = []
            for lid in survivors:
                candidate = w.with_bits([lid], bits)
                if run(candidate, bits, "try", layer=lid):
                    w = candidate
                    kept.append(lid)
            survivors = kept
    except EvalBudgetExceeded as exc:
        log.warning("%s; returning last validated config", exc)
        trace.budget_exceeded = True
    trace.final = w
    return w, trace


def replay(trace: SearchTrace, ordering: Sequence[str], spec: SearchSpec, layer_ids=None) -> QuantConfig:
    """Re-run a search feeding back the recorded accuracies in order.

    Raises :class:`SearchError` if the replay asks for a different config
    than the one recorded at that step.
    """
    steps = iter(trace.steps)

    def recorded(config):
        step = next(steps, None)
        if step is None or step.config != config:
            raise SearchError("trace does not match the replayed search")
        return step.accuracy

    search = {"bisection": bisection_search, "progressive": progressive_search}[trace.method]
    measured = bool(trace.steps) and trace.steps[0].decision == "baseline"
    config, _ = search(ordering, spec, recorded, layer_ids,
                       baseline_accuracy=None if measured else trace.baseline_accuracy)
    return config


def exhaustive_search(
    layer_ids: Sequence[str],
    spec: SearchSpec,
    evaluate: Evaluator,
    cost: Callable[[QuantConfig], tuple[float, float]],
    n_max: int = 12,
    baseline_accuracy: float | None = None,
) -> tuple[QuantConfig, int]:
    """Cheapest feasible config over the full ``palette ** n`` space.

    Candidates are ranked by ``cost(config) = (latency, size)`` and then by
    their bit tuple; they are evaluated in that order until the first
    feasible one. Returns the config and the number of evaluations.
    """
    ids = list(layer_ids)
    if len(ids) > n_max:
        raise SearchError(f"{len(ids)} layers exceeds exhaustive cap of {n_max}")
    if len(spec.bit_palette) > 3:
        raise SearchError("exhaustive search supports at most three bit-widths")
    base = QuantConfig.uniform(ids, spec.baseline_bits)
    evals = 0
    if baseline_accuracy is None:
        baseline_accuracy = float(evaluate(base))
        evals += 1
    threshold = spec.accuracy_target * baseline_accuracy
    ranked = []
    for bits in itertools.product(spec.bit_palette, repeat=len(ids)):
        config = QuantConfig(dict(zip(ids, bits)))
        latency, size = cost(config)
        ranked.append((latency, size, bits, config))
    ranked.sort(key=lambda item: item[:3])
    for _, _, bits, config in ranked:
        if config == base:
            return base, evals
        evals += 1
        if float(evaluate(config)) >= threshold:
            return config, evals
    return base, evals  # pragma: no cover - baseline is always in the ranking


class ConfigEvaluator:
    """Calibration-set accuracy of quantized views of one model."""

    def __init__(self, model: ModelGraph, calib: Batch, scales: ScaleSet, **quantizer_kw):
        self.quantizer = Quantizer(model, scales, **quantizer_kw)
        self.calib = calib
        self.calls = 0

    def __call__(self, config: QuantConfig) -> float:
        self.calls += 1
        return forward(self.quantizer.apply(config), self.calib).accuracy


def evaluate_config(model: ModelGraph, config: QuantConfig, calib: Batch, scales: ScaleSet, **quantizer_kw) -> float:
    return ConfigEvaluator(model, calib, scales, **quantizer_kw)(config)
