"""Plain table structure with deterministic markdown/CSV rendering."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field


@dataclass
class ReportTable:
    title: str
    columns: list[str]
    rows: list[list[str]] = field(default_factory=list)

    def to_markdown(self) -> str:
        lines = [f"### {self.title}", ""]
        lines.append("| " + " | ".join(self.columns) + " |")
        lines.append("|" + "|".join(" --- " for _ in self.columns) + "|")
        for row in self.rows:
            lines.append("| " + " | ".join(row) + " |")
        return "\n".join(lines) + "\n"

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(self.columns)
        writer.writerows(self.rows)
        return buf.getvalue()

    def to_dict(self) -> dict:
        return {"title": self.title, "columns": self.columns, "rows": self.rows}

    @classmethod
    def from_dict(cls, obj: dict) -> "ReportTable":
        return cls(title=obj["title"], columns=list(obj["columns"]),
                   rows=[list(r) for r in obj["rows"]])


def mean_std(values: list[float]) -> tuple[float, float]:
    """Mean and sample standard deviation (0 for a single value)."""
    if not values:
        return 0.0, 0.0
    mean = sum(values) / len(values)
    if len(values) < 2:
        return mean, 0.0
    var = sum((v - mean) ** 2 for v in values) / (len(values) - 1)
    return mean, var ** 0.5


def fmt_pm(values: list[float], scale: float = 1.0, digits: int = 4) -> str:
    """Render mean ± stddev of per-trial values, e.g. '74.00 ±1.23'."""
    mean, std = mean_std(values)
    return f"{mean * scale:.{digits}f} ±{std * scale:.{digits}f}"
