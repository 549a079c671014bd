"""Per-layer quantization sensitivity.

Three scores are produced for every weighted layer:

* ``e_hessian``    -- Hutchinson estimate of the trace of the layer's Hessian
  block (optionally divided by the layer's weight count),
* ``e_interlayer`` -- summed excess loss from quantizing the layer jointly with
  each other layer, beyond the worse of the two single-layer losses,
* ``e_aug``        -- ``e_hessian + beta * e_interlayer`` with
  ``beta = mean(e_hessian) / mean(e_interlayer)``.
"""

from __future__ import annotations

import csv
import io
import itertools
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .quantizer import BASELINE_BITS, DEFAULT_PALETTE, QuantConfig, Quantizer, ScaleSet, LayerScales, weight_scales
from .rng import rademacher
from .tensorcore import Batch, LayerHessian, ModelGraph, forward

METRICS = ("hessian", "interlayer", "aug")


class SensitivityError(RuntimeError):
    pass


def hutchinson_trace(
    model: ModelGraph, batch: Batch, layer_id: str, n_samples: int, seed: int
) -> float:
    """Mean of ``v @ H v`` over ``n_samples`` Rademacher probes.

    Probe ``k`` is drawn from the stream keyed by ``(seed, layer_id, k)``.
    """
    if n_samples < 1:
        raise ValueError("n_samples must be >= 1")
    op = LayerHessian(model, batch, layer_id)
    total = 0.0
    for k in range(n_samples):
        v = rademacher(seed, f"hutchinson/{layer_id}", k, op.shape)
        total += float(np.dot(v.ravel().astype(np.float64), op.matvec(v).ravel()))
    return total / n_samples


@dataclass
class DegradationMatrix:
    """Pairwise excess degradation ``D`` over weighted layers.

    ``D[i, j] = L(W^{i,j}) - max(L(W^i), L(W^j))``; the diagonal is zero.
    """

    layer_ids: list[str]
    matrix: np.ndarray
    bits_used: int
    single_losses: dict[str, float]
    baseline_loss: float
    evaluations: int = 0

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["layer_id"] + self.layer_ids)
        for lid, row in zip(self.layer_ids, self.matrix):
            writer.writerow([lid] + [repr(float(x)) for x in row])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str, bits_used: int = 8) -> "DegradationMatrix":
        rows = list(csv.reader(io.StringIO(text)))
        ids = rows[0][1:]
        mat = np.array([[float(x) for x in r[1:]] for r in rows[1:]], dtype=np.float64)
        return cls(ids, mat, bits_used, {}, float("nan"))


def excess_degradation(
    layer_ids: Sequence[str],
    loss_of: Callable[[frozenset], float],
    bits: int,
    workers: int = 1,
) -> DegradationMatrix:
    """Evaluate baseline, single-layer and pairwise losses and form ``D``.

    ``loss_of(S)`` returns the loss with exactly the layers in ``S``
    quantized. Uses ``l*(l-1)/2 + l + 1`` evaluations; each is independent.
    """
    ids = list(layer_ids)
    if len(ids) < 2:
        raise SensitivityError("need at least two weighted layers")
    tasks = [frozenset()] + [frozenset([a]) for a in ids]
    tasks += [frozenset(p) for p in itertools.combinations(ids, 2)]

    def run(task):
        try:
            return float(loss_of(task))
        except Exception as exc:
            names = ", ".join(sorted(task)) or "baseline"
            raise SensitivityError(f"evaluation of ({names}) failed: {exc}") from exc

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            losses = list(pool.map(run, tasks))
    else:
        losses = [run(t) for t in tasks]
    if not all(np.isfinite(losses)):
        bad = [sorted(t) for t, v in zip(tasks, losses) if not np.isfinite(v)]
        raise SensitivityError(f"non-finite loss for {bad}")

    single = {a: losses[1 + i] for i, a in enumerate(ids)}
    pos = {a: i for i, a in enumerate(ids)}
    mat = np.zeros((len(ids), len(ids)), dtype=np.float64)
    for (a, b), loss in zip(itertools.combinations(ids, 2), losses[1 + len(ids):]):
        d = loss - max(single[a], single[b])
        mat[pos[a], pos[b]] = mat[pos[b], pos[a]] = d
    return DegradationMatrix(ids, mat, bits, single, losses[0], evaluations=len(tasks))


def interlayer_matrix(
    model: ModelGraph,
    calib: Batch,
    bits: int = 8,
    palette: Sequence[int] = DEFAULT_PALETTE,
    scales: ScaleSet | None = None,
    rounding: str = "case",
    workers: int = 1,
    counter: list | None = None,
) -> DegradationMatrix:
    """Excess degradation with weights quantized at ``bits`` (activations untouched)."""
    if bits not in palette or bits >= BASELINE_BITS:
        raise SensitivityError(f"bits {bits} is not a quantized width of palette {list(palette)}")
    if scales is None:
        scales = ScaleSet(
            {l.id: LayerScales(weight_scales(l.weights), 1.0, bits) for l in model.weighted_layers()}
        )
    quantizer = Quantizer(model, scales, rounding=rounding, quantize_activations=False)
    ids = model.weighted_ids()
    base = QuantConfig.uniform(ids, BASELINE_BITS)
    for lid in ids:
        quantizer.weights(lid, bits)  # fill cache before any threads start

    def loss_of(quantized: frozenset) -> float:
        if counter is not None:
            counter.append(quantized)
        return forward(quantizer.apply(base.with_bits(quantized, bits)), calib).loss

    return excess_degradation(ids, loss_of, bits, workers)


def interlayer_score(d: DegradationMatrix, clip: str = "term") -> np.ndarray:
    """Per-layer summed excess degradation, never negative.

    ``clip="term"`` drops negative pair terms before summing; ``clip="sum"``
    sums first and clips the total.
    """
    m = d.matrix.copy()
    np.fill_diagonal(m, 0.0)
    if clip == "term":
        return np.maximum(m, 0.0).sum(axis=1)
    if clip == "sum":
        return np.maximum(m.sum(axis=1), 0.0)
    raise ValueError(f"unknown clip mode {clip!r}")


def combine(e_hessian, e_interlayer) -> tuple[float, np.ndarray]:
    e_h = np.asarray(e_hessian, dtype=np.float64)
    e_il = np.asarray(e_interlayer, dtype=np.float64)
    if e_h.shape != e_il.shape:
        raise ValueError("score arrays differ in length")
    mean_il = float(e_il.mean()) if e_il.size else 0.0
    if mean_il == 0.0:
        return 0.0, e_h.copy()
    beta = float(e_h.mean()) / mean_il
    return beta, e_h + beta * e_il


def sensitivity_order(scores, layer_ids: Sequence[str]) -> list[str]:
    """Layer ids ascending by score; ties keep layer order."""
    idx = np.argsort(np.asarray(scores, dtype=np.float64), kind="stable")
    return [layer_ids[i] for i in idx]


@dataclass
class SensitivityReport:
    layer_ids: list[str]
    e_hessian: np.ndarray
    e_interlayer: np.ndarray
    e_aug: np.ndarray
    beta: float
    metric_used: str = "aug"
    e_hessian_raw: np.ndarray | None = None
    weight_counts: list[int] = field(default_factory=list)

    def scores(self, metric: str | None = None) -> np.ndarray:
        metric = metric or self.metric_used
        if metric not in METRICS:
            raise ValueError(f"unknown metric {metric!r}")
        return {"hessian": self.e_hessian, "interlayer": self.e_interlayer, "aug": self.e_aug}[metric]

    def ordering(self, metric: str | None = None) -> list[str]:
        return sensitivity_order(self.scores(metric), self.layer_ids)

    def to_csv(self) -> str:
        order = self.ordering()
        rank = {lid: i for i, lid in enumerate(order)}
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["layer_id", "e_hessian", "e_interlayer", "e_aug", "rank"])
        for i, lid in enumerate(self.layer_ids):
            writer.writerow(
                [lid, repr(float(self.e_hessian[i])), repr(float(self.e_interlayer[i])),
                 repr(float(self.e_aug[i])), rank[lid]]
            )
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str, metric: str = "aug") -> "SensitivityReport":
        rows = list(csv.DictReader(io.StringIO(text)))
        ids = [r["layer_id"] for r in rows]
        e_h = np.array([float(r["e_hessian"]) for r in rows])
        e_il = np.array([float(r["e_interlayer"]) for r in rows])
        beta, e_aug = combine(e_h, e_il)
        return cls(ids, e_h, e_il, e_aug, beta, metric)


def compute_sensitivity(
    model: ModelGraph,
    calib: Batch,
    n_samples: int = 256,
    seed: int = 0,
    bits: int = 8,
    palette: Sequence[int] = DEFAULT_PALETTE,
    normalize: str = "mean",
    clip: str = "term",
    metric: str = "aug",
    scales: ScaleSet | None = None,
    workers: int = 1,
) -> tuple[SensitivityReport, DegradationMatrix]:
    """All three scores for every weighted layer of ``model``.

    ``normalize="mean"`` divides each Hessian trace by the layer's weight
    count; ``"raw"`` keeps the trace.
    """
    if normalize not in ("mean", "raw"):
        raise ValueError(f"unknown normalization {normalize!r}")
    layers = model.weighted_layers()
    ids = [l.id for l in layers]
    counts = [l.weight_count for l in layers]

    def trace(lid):
        return hutchinson_trace(model, calib, lid, n_samples, seed)

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            raw = np.array(list(pool.map(trace, ids)))
    else:
        raw = np.array([trace(lid) for lid in ids])
    e_h = raw / np.array(counts, dtype=np.float64) if normalize == "mean" else raw.copy()
    dmat = interlayer_matrix(model, calib, bits, palette, scales, workers=workers)
    e_il = interlayer_score(dmat, clip)
    beta, e_aug = combine(e_h, e_il)
    report = SensitivityReport(ids, e_h, e_il, e_aug, beta, metric, raw, counts)
    return report, dmat
