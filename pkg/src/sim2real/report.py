"""Cross-variant comparison reports (JSON plus an aligned text table).

Rows are the pipeline variants in fixed order (synthetic, diffusion_only,
im2im_only, hybrid); columns are (target domain, metric) pairs.  Metric
result files must be stamped with their variant and domain; a duplicate
(variant, domain, metric) cell is a conflict.  Rendering is a pure
function of the report document, byte-deterministic for equal inputs.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

VARIANTS = ("synthetic", "diffusion_only", "im2im_only", "hybrid")
METRIC_ORDER = ("cmmd", "miou", "map50")
COMPARISON_SCHEMA = "comparison-report/1"


class ConflictingCell(Exception):
    """Two inputs claim the same (variant, domain, metric) cell."""


class ReportInputError(Exception):
    """A metric result file is unusable (unstamped, unknown metric, bad JSON)."""


@dataclass(frozen=True)
class MetricCell:
    variant: str
    domain: str
    metric: str
    value: float
    source: str


def _detect_metric(doc: dict) -> tuple[str, float]:
    for metric in METRIC_ORDER:
        if metric in doc and isinstance(doc[metric], (int, float)):
            return metric, float(doc[metric])
    raise ReportInputError(
        f"no known metric key among {METRIC_ORDER} in result document"
    )


def cell_from_result(doc: dict, source: str) -> MetricCell:
    """Extract a table cell from a stamped metric result document."""
    if not isinstance(doc, dict):
        raise ReportInputError(f"{source}: result must be a JSON object")
    metric, value = _detect_metric(doc)
    variant = doc.get("variant")
    domain = doc.get("domain")
    if not variant or not domain:
        raise ReportInputError(
            f"{source}: result lacks variant/domain stamps; re-run the metric "
            "command with --variant and --domain"
        )
    if variant not in VARIANTS:
        raise ReportInputError(
            f"{source}: variant {variant!r} not one of {', '.join(VARIANTS)}"
        )
    return MetricCell(
        variant=str(variant),
        domain=str(domain),
        metric=metric,
        value=value,
        source=source,
    )


def load_cells(paths: list[str | Path]) -> list[MetricCell]:
    cells = []
    for path in paths:
        path = Path(path)
        try:
            doc = json.loads(path.read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as exc:
            raise ReportInputError(f"{path}: {exc}") from exc
        cells.append(cell_from_result(doc, source=str(path)))
    return cells


def build_report(cells: list[MetricCell], dataset: str | None = None) -> dict:
    """Assemble the comparison document; duplicate cells are conflicts."""
    seen: dict[tuple[str, str, str], str] = {}
    for cell in cells:
        key = (cell.variant, cell.domain, cell.metric)
        if key in seen:
            raise ConflictingCell(
                f"cell variant={cell.variant} domain={cell.domain} "
                f"metric={cell.metric} supplied by both {seen[key]} and "
                f"{cell.source}"
            )
        seen[key] = cell.source

    columns = sorted(
        {(c.domain, c.metric) for c in cells},
        key=lambda dm: (dm[0], METRIC_ORDER.index(dm[1])),
    )
    rows = []
    for variant in VARIANTS:
        variant_cells = [c for c in cells if c.variant == variant]
        if not variant_cells:
            continue
        values = {
            f"{c.domain}/{c.metric}": c.value for c in variant_cells
        }
        rows.append({"variant": variant, "values": values})

    return {
        "schema": COMPARISON_SCHEMA,
        "columns": [{"domain": d, "metric": m} for d, m in columns],
        "rows": rows,
        "metadata": {
            "dataset": dataset,
            "sources": sorted(c.source for c in cells),
        },
    }


def render_table(report: dict) -> str:
    """Aligned text table; a pure function of the report document."""
    columns = [(c["domain"], c["metric"]) for c in report["columns"]]
    headers = ["variant"] + [f"{d}/{m}" for d, m in columns]
    lines_cells: list[list[str]] = []
    for row in report["rows"]:
        cells = [row["variant"]]
        for d, m in columns:
            value = row["values"].get(f"{d}/{m}")
            cells.append("-" if value is None else f"{value:.4f}")
        lines_cells.append(cells)

    widths = [
        max(len(headers[i]), *(len(r[i]) for r in lines_cells))
        if lines_cells
        else len(headers[i])
        for i in range(len(headers))
    ]

    def fmt(cells: list[str]) -> str:
        first = cells[0].ljust(widths[0])
        rest = [c.rjust(w) for c, w in zip(cells[1:], widths[1:])]
        return " | ".join([first] + rest)

    rule = "-+-".join("-" * w for w in widths)
    out = [fmt(headers), rule] + [fmt(cells) for cells in lines_cells]
    return "\n".join(out) + "\n"
