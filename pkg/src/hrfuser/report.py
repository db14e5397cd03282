"""Result tables: aligned text for people, CSV for tools."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, fields

from .detection import EvalResult

METRICS = tuple(f.name for f in fields(EvalResult))
LABELS = {"ap": "AP", "ap50": "AP50", "ap75": "AP75", "ap_m": "AP_m", "ap_l": "AP_l", "ar": "AR"}


@dataclass(frozen=True)
class Row:
    name: str
    metrics: EvalResult
    params: int | None = None
    flops: float | None = None


def _deltas(rows: list[Row], baseline: str | None) -> list[float | None]:
    if not rows:
        return []
    base = next((r for r in rows if r.name == baseline), rows[0]) if baseline else rows[0]
    return [r.metrics.ap - base.metrics.ap for r in rows]


def to_text(rows: list[Row], baseline: str | None = None) -> str:
    """Metrics in percent; ``dAP`` is the AP difference to the baseline row (default: the first)."""
    header = ["model", *(LABELS[m] for m in METRICS), "dAP", "params", "GFLOPs"]
    body = []
    for row, delta in zip(rows, _deltas(rows, baseline)):
        body.append([
            row.name,
            *(f"{100 * getattr(row.metrics, m):.1f}" for m in METRICS),
            f"{100 * delta:+.1f}",
            "-" if row.params is None else f"{row.params:,}",
            "-" if row.flops is None else f"{row.flops / 1e9:.3f}",
        ])
    widths = [max(len(line[i]) for line in [header, *body]) for i in range(len(header))]

    def fmt(line):
        return "  ".join(c.ljust(w) if i == 0 else c.rjust(w) for i, (c, w) in enumerate(zip(line, widths)))

    rule = "-" * len(fmt(header))
    return "\n".join([fmt(header), rule, *map(fmt, body)]) + "\n"


def to_csv(rows: list[Row], baseline: str | None = None) -> str:
    """Full-precision values (``repr``) so the file parses back to identical results."""
    out = io.StringIO()
    writer = csv.writer(out, lineterminator="\n")
    writer.writerow(["model", *METRICS, "delta_ap", "params", "flops"])
    for row, delta in zip(rows, _deltas(rows, baseline)):
        writer.writerow([
            row.name,
            *(repr(getattr(row.metrics, m)) for m in METRICS),
            repr(delta),
            "" if row.params is None else row.params,
            "" if row.flops is None else repr(row.flops),
        ])
    return out.getvalue()


def read_csv(text: str) -> list[Row]:
    rows = []
    for rec in csv.DictReader(io.StringIO(text)):
        metrics = EvalResult(**{m: float(rec[m]) for m in METRICS})
        rows.append(Row(
            rec["model"],
            metrics,
            int(rec["params"]) if rec.get("params") else None,
            float(rec["flops"]) if rec.get("flops") else None,
        ))
    return rows
