"""Model size and latency estimates from a per-kernel cost table.

A dense layer with weights ``(out, in)`` run at batch size one is a GEMM with
``m=1, n=out, k=in``. Latency is the sum of per-layer table lookups; there is
no fusion modelling and no interpolation between shapes.
"""

from __future__ import annotations

import csv
import io
import warnings
from dataclasses import asdict, dataclass, field
from typing import Iterable, NamedTuple, Sequence

from .quantizer import BASELINE_BITS, DEFAULT_PALETTE, QuantConfig

CSV_HEADER = ["op_kind", "m", "n", "k", "weight_bits", "act_bits", "latency_us", "provenance"]
MB = 1_000_000


class CostTableError(ValueError):
    pass


class CostKey(NamedTuple):
    op_kind: str
    m: int
    n: int
    k: int
    weight_bits: int
    act_bits: int

    @property
    def shape_key(self):
        return self[:4]


def layer_key(layer, weight_bits: int, act_bits: int) -> CostKey:
    out_f, in_f = layer.weights.shape
    return CostKey("gemm", 1, int(out_f), int(in_f), int(weight_bits), int(act_bits))


class CostTable:
    """Mapping ``CostKey -> latency (us)`` with per-entry provenance."""

    def __init__(self, entries: Iterable[tuple[CostKey, float, str]] = (), provenance: str = ""):
        self.latency: dict[CostKey, float] = {}
        self.source: dict[CostKey, str] = {}
        self.provenance = provenance
        for key, value, src in entries:
            key = CostKey(*key)
            if key in self.latency:
                raise CostTableError(f"duplicate cost table key {tuple(key)}")
            value = float(value)
            if not value > 0 or value != value or value == float("inf"):
                raise CostTableError(f"latency must be positive and finite for {tuple(key)}")
            self.latency[key] = value
            self.source[key] = src or provenance
        for msg in self.monotonicity_violations():
            warnings.warn(msg, stacklevel=2)

    def __len__(self):
        return len(self.latency)

    def __contains__(self, key):
        return CostKey(*key) in self.latency

    def __getitem__(self, key) -> float:
        return self.latency[CostKey(*key)]

    def monotonicity_violations(self) -> list[str]:
        """Pairs where a lower-precision entry is slower than a higher one."""
        groups: dict[tuple, list[CostKey]] = {}
        for key in self.latency:
            groups.setdefault(key.shape_key, []).append(key)
        out = []
        for keys in groups.values():
            for a in keys:
                for b in keys:
                    lower = a.weight_bits <= b.weight_bits and a.act_bits <= b.act_bits
                    if lower and a != b and self.latency[a] > self.latency[b]:
                        out.append(
                            f"cost table not monotone: {tuple(a)} ({self.latency[a]} us) slower "
                            f"than {tuple(b)} ({self.latency[b]} us)"
                        )
        return out

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(CSV_HEADER)
        for key in sorted(self.latency):
            writer.writerow(list(key) + [repr(self.latency[key]), self.source[key]])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str) -> "CostTable":
        reader = csv.reader(io.StringIO(text))
        header = next(reader, None)
        if header != CSV_HEADER:
            raise CostTableError(f"unexpected cost table header {header}")
        entries, sources = [], set()
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(CSV_HEADER):
                raise CostTableError(f"line {lineno}: expected {len(CSV_HEADER)} fields")
            try:
                key = CostKey(row[0], *(int(x) for x in row[1:6]))
                entries.append((key, float(row[6]), row[7]))
            except ValueError as exc:
                raise CostTableError(f"line {lineno}: {exc}") from None
            sources.add(row[7])
        return cls(entries, provenance=";".join(sorted(sources)))

    def write(self, path) -> None:
        from .modelio import atomic_write_text

        atomic_write_text(path, self.to_csv())

    @classmethod
    def read(cls, path) -> "CostTable":
        with open(path, encoding="utf-8", newline="") as fh:
            return cls.from_csv(fh.read())


def synth_cost_table(
    model, c: float, palette: Sequence[int] = DEFAULT_PALETTE, overhead_us: float = 1.0
) -> CostTable:
    """Synthetic table: ``MACs * max(w_bits, a_bits) / 16 * c + overhead_us``."""
    if not c > 0:
        raise CostTableError("cost per MAC must be positive")
    entries, seen = [], set()
    for layer in model.weighted_layers():
        shape = layer_key(layer, 0, 0).shape_key
        if shape in seen:
            continue
        seen.add(shape)
        macs = shape[1] * shape[2] * shape[3]
        for wb in palette:
            for ab in palette:
                lat = macs * (max(wb, ab) / 16) * c + overhead_us
                entries.append((CostKey(*shape, wb, ab), lat, f"synthetic c={c!r}"))
    return CostTable(entries, provenance=f"synthetic c={c!r} overhead={overhead_us!r}")


@dataclass(frozen=True)
class SizeBreakdown:
    """Storage in bits; biases stay at the baseline width."""

    weight_bits: int
    bias_bits: int

    @property
    def weight_bytes(self) -> float:
        return self.weight_bits / 8

    @property
    def bytes(self) -> float:
        return (self.weight_bits + self.bias_bits) / 8


def size_breakdown(model, config: QuantConfig, baseline_bits: int = BASELINE_BITS) -> SizeBreakdown:
    wbits = bbits = 0
    for layer in model.weighted_layers():
        wbits += layer.weight_count * config[layer.id]
        bbits += layer.bias_count * baseline_bits
    return SizeBreakdown(wbits, bbits)


def model_size(model, config: QuantConfig, baseline_bits: int = BASELINE_BITS) -> float:
    """Bytes for weights at their configured width plus baseline-width biases."""
    return size_breakdown(model, config, baseline_bits).bytes


def layer_latencies(model, config: QuantConfig, table: CostTable) -> dict[str, float]:
    keys = {l.id: layer_key(l, config.weight_bits[l.id], config.act_bits[l.id]) for l in model.weighted_layers()}
    missing = sorted({tuple(k) for k in keys.values() if k not in table})
    if missing:
        raise CostTableError(f"cost table has no entry for {missing}")
    return {lid: table[k] for lid, k in keys.items()}


def model_latency(model, config: QuantConfig, table: CostTable) -> float:
    """Sum of per-layer latencies in microseconds."""
    return sum(layer_latencies(model, config, table).values())


def pareto_frontier(points: Iterable[tuple[float, float]]) -> list[tuple[float, float]]:
    """Non-dominated ``(accuracy, latency)`` points, sorted by latency.

    A point is dominated when another has accuracy no lower and latency no
    higher, with at least one strictly better. Duplicates collapse to one.
    """
    best = []
    for acc, lat in sorted(set(points), key=lambda p: (p[1], -p[0])):
        if not best or acc > best[-1][0]:
            best.append((acc, lat))
    return best


@dataclass
class CostReport:
    label: str
    target: float | None
    metric: str | None
    accuracy_abs: float
    accuracy_rel: float
    size_mb: float
    size_rel: float
    weight_size_rel: float
    latency_ms: float
    latency_rel: float
    weight_precision: str
    act_precision: str
    per_layer: list[dict] = field(default_factory=list)

    def to_json(self) -> dict:
        return asdict(self)


def _precision(bits: Iterable[int]) -> str:
    values = set(bits)
    return str(values.pop()) if len(values) == 1 else "MP"


def cost_report(
    model,
    config: QuantConfig,
    table: CostTable,
    accuracy: float,
    baseline_accuracy: float,
    label: str,
    target: float | None = None,
    metric: str | None = None,
) -> CostReport:
    base = QuantConfig.uniform(config, BASELINE_BITS)
    size, base_size = size_breakdown(model, config), size_breakdown(model, base)
    lat = layer_latencies(model, config, table)
    base_lat = sum(layer_latencies(model, base, table).values())
    total = sum(lat.values())
    per_layer = [
        {
            "layer_id": l.id,
            "weight_bits": config.weight_bits[l.id],
            "act_bits": config.act_bits[l.id],
            "weight_bytes": l.weight_count * config[l.id] / 8,
            "latency_us": lat[l.id],
        }
        for l in model.weighted_layers()
    ]
    return CostReport(
        label=label,
        target=target,
        metric=metric,
        accuracy_abs=accuracy,
        accuracy_rel=accuracy / baseline_accuracy if baseline_accuracy else float("nan"),
        size_mb=size.bytes / MB,
        size_rel=size.bytes / base_size.bytes,
        weight_size_rel=size.weight_bits / base_size.weight_bits,
        latency_ms=total / 1000,
        latency_rel=total / base_lat,
        weight_precision=_precision(config.weight_bits.values()),
        act_precision=_precision(config.act_bits.values()),
        per_layer=per_layer,
    )


def reports_to_markdown(reports: Sequence[CostReport], title: str = "Model") -> str:
    lines = [
        f"| {title} | Accuracy | Relative | Size (MB) | Relative | Weight bytes rel. "
        "| Latency (ms) | Relative | W | A |",
        "|---|---:|---:|---:|---:|---:|---:|---:|:-:|:-:|",
    ]
    for r in reports:
        lines.append(
            f"| {r.label} | {100 * r.accuracy_abs:.2f} | {100 * r.accuracy_rel:.2f}% "
            f"| {r.size_mb:.6f} | {100 * r.size_rel:.2f}% | {100 * r.weight_size_rel:.2f}% "
            f"| {r.latency_ms:.4f} | {100 * r.latency_rel:.2f}% "
            f"| {r.weight_precision} | {r.act_precision} |"
        )
    lines.append("")
    lines.append(
        "Sizes count weights at their configured width and biases at the 16-bit baseline "
        "width; latencies are summed per-layer kernel lookups without fusion."
    )
    return "\n".join(lines) + "\n"
