"""CSV/JSONL report emitters, heatmap and radar tables, and an SVG scatter plot.

Every CSV starts with one comment line naming the schema, its version and
the column list, e.g.::

    # sigforge:far-cells v1 columns=model,user_id,scenario,...

Floats are written with ``repr`` so that parsing a file back reproduces the
in-memory values exactly; ``None`` is an empty field.
"""

from __future__ import annotations

import csv
import io
import json
from pathlib import Path

SCHEMA_VERSION = 1

CELL_COLUMNS = ("type", "model", "user_id", "scenario", "weighting", "far", "frr", "hter",
                "far_attempts", "far_accepted", "frr_attempts", "frr_rejected")
COMPARISON_COLUMNS = ("type", "user_id", "scenario", "weighting", "far_before", "far_after", "far_delta",
                      "frr_before", "frr_after", "frr_delta", "frr_flag")
STUDY_COLUMNS = ("label", "band_low", "band_high", "mean_ssim", "far", "attempts")


class ReportIOError(OSError):
    def __init__(self, path, exc):
        super().__init__(f"cannot write report {path}: {exc}")
        self.path = str(path)


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _parse(s: str):
    if s == "":
        return None
    if s in ("true", "false"):
        return s == "true"
    try:
        return int(s)
    except ValueError:
        pass
    try:
        return float(s)
    except ValueError:
        return s


def csv_text(rows, columns, schema: str, config_hash: str | None = None) -> str:
    buf = io.StringIO()
    tail = f" config={config_hash}" if config_hash else ""
    buf.write(f"# sigforge:{schema} v{SCHEMA_VERSION} columns={','.join(columns)}{tail}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for row in rows:
        w.writerow([_fmt(row.get(c)) for c in columns])
    return buf.getvalue()


def _write(path, text: str) -> Path:
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(text)
    except OSError as exc:
        raise ReportIOError(path, exc) from exc
    return path


def write_text(path, text: str) -> Path:
    """Write ``text`` to ``path``, creating parents; I/O failures name the path."""
    return _write(path, text)


def write_csv(rows, columns, path, schema: str, config_hash: str | None = None) -> Path:
    return _write(path, csv_text(rows, columns, schema, config_hash))


def read_csv(path) -> tuple[dict, list[dict]]:
    """Parse a file written by :func:`write_csv`; returns (header info, rows)."""
    lines = Path(path).read_text().splitlines()
    if not lines or not lines[0].startswith("# sigforge:"):
        raise ValueError(f"{path} lacks the sigforge schema comment line")
    tag, version, *fields = lines[0][len("# sigforge:"):].split(" ")
    info = dict(f.split("=", 1) for f in fields)
    header = {"schema": tag, "version": int(version.lstrip("v")), "columns": info["columns"].split(","),
              "config_hash": info.get("config")}
    reader = csv.reader(lines[1:])
    names = next(reader)
    return header, [{n: _parse(v) for n, v in zip(names, rec)} for rec in reader]


def jsonl_text(rows, schema: str, config_hash: str | None = None, meta: dict | None = None) -> str:
    head = {"type": "header", "schema": schema, "version": SCHEMA_VERSION, **(meta or {})}
    if config_hash:
        head["config_hash"] = config_hash
    head = json.dumps(head, sort_keys=True)
    return "".join(line + "\n" for line in [head] + [json.dumps(r, sort_keys=True) for r in rows])


def write_jsonl(rows, path, schema: str, config_hash: str | None = None, meta: dict | None = None) -> Path:
    return _write(path, jsonl_text(rows, schema, config_hash, meta))


def read_jsonl(path) -> tuple[dict, list[dict]]:
    recs = [json.loads(line) for line in Path(path).read_text().splitlines() if line.strip()]
    if not recs or recs[0].get("type") != "header":
        raise ValueError(f"{path} lacks a header record")
    return recs[0], recs[1:]


# --------------------------------------------------------------------- dispatch


def _rows_of(obj) -> tuple[list[dict], tuple, str]:
    from .analysis import CorrelationResult
    from .attack import EvalReport
    from .countermeasure import ComparisonReport

    if isinstance(obj, EvalReport):
        return obj.records(), CELL_COLUMNS, "far-cells"
    if isinstance(obj, ComparisonReport):
        return obj.records(), COMPARISON_COLUMNS, "comparison"
    if isinstance(obj, CorrelationResult):
        return [dict(p) for p in obj.points], STUDY_COLUMNS, "ssim-far-points"
    if isinstance(obj, list):
        return obj, CELL_COLUMNS, "far-cells"
    raise TypeError(f"cannot emit a report from {type(obj).__name__}")


def emit_report(obj, fmt: str, path, config_hash: str | None = None) -> Path:
    rows, columns, schema = _rows_of(obj)
    if fmt == "csv":
        return write_csv(rows, columns, path, schema, config_hash)
    if fmt == "jsonl":
        return write_jsonl(rows, path, schema, config_hash)
    raise ValueError(f"format must be 'csv' or 'jsonl', got {fmt!r}")


# --------------------------------------------------------------------- tables


def heatmap_rows(reports: dict, scenarios, dataset: str = "procedural") -> list[dict]:
    """One row per (dataset, model family); one FAR column per scenario (attempt-weighted)."""
    rows = []
    for model, report in reports.items():
        row = {"row": f"{dataset}/{model}"}
        for tag in scenarios:
            row[tag] = report.aggregate(tag).far if tag in report.scenarios else None
        rows.append(row)
    return rows


def radar_rows(reports: dict, dataset: str = "procedural") -> list[dict]:
    """Vanilla FAR and FRR per (dataset, model family)."""
    rows = []
    for model, report in reports.items():
        agg = report.aggregate("vanilla") if "vanilla" in report.scenarios else None
        rows.append({"dataset": dataset, "model": model, "far": None if agg is None else agg.far,
                     "frr": None if agg is None else agg.frr})
    return rows


def write_heatmap(reports: dict, scenarios, path, dataset: str = "procedural", config_hash: str | None = None) -> Path:
    return write_csv(heatmap_rows(reports, scenarios, dataset), ("row", *scenarios), path, "far-heatmap", config_hash)


def write_radar(reports: dict, path, dataset: str = "procedural", config_hash: str | None = None) -> Path:
    return write_csv(radar_rows(reports, dataset), ("dataset", "model", "far", "frr"), path, "far-frr-radar",
                     config_hash)


# --------------------------------------------------------------------- svg


def scatter_svg(result, width: int = 480, height: int = 360, config_hash: str | None = None, points=None) -> str:
    """Points (mean SSIM, FAR) with the least-squares line, as standalone SVG.

    With ``result=None`` only ``points`` are drawn (too few for a fit).
    """
    source = result.points if result is not None else (points or ())
    pts = [(p["mean_ssim"], p["far"]) for p in source]
    xs = [x for x, _ in pts] or [0.0, 1.0]
    x0, x1 = min(0.0, min(xs)), max(1.0, max(xs))
    y0, y1 = 0.0, 1.0
    m = 40

    def sx(x):
        return m + (x - x0) / (x1 - x0) * (width - 2 * m)

    def sy(y):
        return height - m - (y - y0) / (y1 - y0) * (height - 2 * m)

    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" viewBox="0 0 {width} {height}">',
        f'<rect x="0" y="0" width="{width}" height="{height}" fill="white"/>',
        f'<line x1="{m}" y1="{height - m}" x2="{width - m}" y2="{height - m}" stroke="black"/>',
        f'<line x1="{m}" y1="{m}" x2="{m}" y2="{height - m}" stroke="black"/>',
        f'<text x="{width / 2:.1f}" y="{height - 8}" text-anchor="middle" font-size="12">mean SSIM</text>',
        f'<text x="12" y="{height / 2:.1f}" font-size="12" transform="rotate(-90 12 {height / 2:.1f})">FAR</text>',
    ]
    for x, y in pts:
        parts.append(f'<circle cx="{sx(x):.2f}" cy="{sy(y):.2f}" r="4" fill="steelblue"/>')
    if result is not None:
        ya, yb = result.slope * x0 + result.intercept, result.slope * x1 + result.intercept
        parts.append(f'<line x1="{sx(x0):.2f}" y1="{sy(ya):.2f}" x2="{sx(x1):.2f}" y2="{sy(yb):.2f}" stroke="crimson"/>')
        parts.append(
            f'<text x="{width - m}" y="{m}" text-anchor="end" font-size="12">'
            f"r={result.r:.4f} R2={result.r_squared:.4f} p={result.p_value:.3g} n={result.n}</text>"
        )
    if config_hash:
        parts.append(f"<!-- config {config_hash} -->")
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def write_svg(result, path, config_hash: str | None = None, points=None) -> Path:
    return _write(path, scatter_svg(result, config_hash=config_hash, points=points))
