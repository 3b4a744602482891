"""Report tables and their CSV / markdown / JSON renderings.

All renderers are pure functions of the artifact, so emitting the same
artifact twice gives identical bytes.  CSV keeps full float precision
(``repr``) and parses back to the same values; markdown rounds to three
decimals for reading.
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

REPORT_KINDS = ("ingest", "detection", "correction", "sweep", "comparison")
FORMATS = ("csv", "md", "json")


class ReportError(ValueError):
    pass


@dataclass
class ReportArtifact:
    kind: str
    columns: list[str]
    rows: list[dict[str, Any]] = field(default_factory=list)
    provenance: str = ""

    def __post_init__(self):
        if self.kind not in REPORT_KINDS:
            raise ReportError(f"unknown report kind {self.kind!r}")

    def add(self, row: dict[str, Any]) -> None:
        unknown = set(row) - set(self.columns)
        if unknown:
            raise ReportError(f"row has columns not in the schema: {sorted(unknown)}")
        self.rows.append(row)


def _csv_cell(v: Any) -> str:
    if v is None:
        return ""
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _md_cell(v: Any) -> str:
    if v is None:
        return "n/a"
    if isinstance(v, bool):
        return "yes" if v else "no"
    if isinstance(v, float):
        if math.isnan(v):
            return "nan"
        return f"{v:.3f}"
    return str(v)


def _json_value(v: Any) -> Any:
    if isinstance(v, float) and not math.isfinite(v):
        return None
    return v


def render_csv(artifact: ReportArtifact) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(artifact.columns)
    for row in artifact.rows:
        w.writerow([_csv_cell(row.get(c)) for c in artifact.columns])
    return buf.getvalue()


def render_md(artifact: ReportArtifact) -> str:
    lines = ["| " + " | ".join(artifact.columns) + " |", "|" + "|".join("---" for _ in artifact.columns) + "|"]
    for row in artifact.rows:
        lines.append("| " + " | ".join(_md_cell(row.get(c)) for c in artifact.columns) + " |")
    return "\n".join(lines) + "\n"


def render_json(artifact: ReportArtifact) -> str:
    doc = {
        "kind": artifact.kind,
        "provenance": artifact.provenance,
        "columns": artifact.columns,
        "rows": [{c: _json_value(row.get(c)) for c in artifact.columns} for row in artifact.rows],
    }
    return json.dumps(doc, indent=1, sort_keys=True) + "\n"


_RENDERERS = {"csv": render_csv, "md": render_md, "json": render_json}


def render(artifact: ReportArtifact, fmt: str) -> str:
    try:
        return _RENDERERS[fmt](artifact)
    except KeyError:
        raise ReportError(f"unknown format {fmt!r}; expected one of {FORMATS}") from None


def emit_report(artifact: ReportArtifact, fmt: str, path: str | Path) -> Path:
    """Write ``artifact`` to ``path`` in ``fmt``; returns the path written."""
    text = render(artifact, fmt)
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", newline="") as fh:
            fh.write(text)
    except OSError as exc:
        raise ReportError(f"cannot write report to {path}: {exc}") from None
    return path


def _parse_cell(text: str) -> Any:
    if text == "":
        return None
    if text in ("true", "false"):
        return text == "true"
    try:
        return int(text)
    except ValueError:
        pass
    try:
        return float(text)
    except ValueError:
        return text


def parse_csv(text: str, kind: str, provenance: str = "") -> ReportArtifact:
    """Inverse of :func:`render_csv` (cell types are inferred)."""
    reader = csv.reader(io.StringIO(text))
    header = next(reader, None)
    if header is None:
        raise ReportError("empty CSV")
    rows = [{c: _parse_cell(v) for c, v in zip(header, r)} for r in reader]
    return ReportArtifact(kind, list(header), rows, provenance)
