"""Result tables shared by the checkers and the experiment runner."""
from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from typing import Any

import numpy as np

__all__ = ["CheckTable", "format_cell", "jsonable"]

VERDICTS = ("pass", "fail", "not_applicable")


def format_cell(v) -> str:
    """Text for one CSV cell: ``repr`` for floats, ``1``/``0`` for booleans."""
    if v is None:
        return ""
    if isinstance(v, (bool, np.bool_)):
        return "1" if v else "0"
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def jsonable(v):
    """Convert numpy containers and scalars to plain JSON types (non-finite -> None)."""
    if isinstance(v, dict):
        return {str(k): jsonable(x) for k, x in v.items()}
    if isinstance(v, (list, tuple)):
        return [jsonable(x) for x in v]
    if isinstance(v, np.ndarray):
        return jsonable(v.tolist())
    if isinstance(v, (bool, np.bool_)):
        return bool(v)
    if isinstance(v, (int, np.integer)):
        return int(v)
    if isinstance(v, (float, np.floating)):
        v = float(v)
        return v if math.isfinite(v) else None
    if hasattr(v, "to_dict"):
        return jsonable(v.to_dict())
    return v


@dataclass(frozen=True, eq=False)
class CheckTable:
    """Rows of a check with one overall verdict.

    ``verdict`` is ``"pass"``, ``"fail"`` or ``"not_applicable"`` (the
    preconditions of the inequality did not hold on the sampled region).
    """

    name: str
    columns: tuple[str, ...]
    rows: tuple[tuple, ...]
    verdict: str
    constants: dict = field(default_factory=dict)
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.verdict not in VERDICTS:
            raise ValueError(f"verdict must be one of {VERDICTS}")
        object.__setattr__(self, "columns", tuple(self.columns))
        rows = tuple(tuple(r) for r in self.rows)
        if any(len(r) != len(self.columns) for r in rows):
            raise ValueError("every row needs one value per column")
        object.__setattr__(self, "rows", rows)

    @property
    def passed(self) -> bool:
        return self.verdict == "pass"

    def column(self, name: str) -> np.ndarray:
        i = self.columns.index(name)
        return np.array([r[i] for r in self.rows])

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(self.columns)
        for r in self.rows:
            w.writerow([format_cell(v) for v in r])
        return buf.getvalue()

    def to_dict(self) -> dict[str, Any]:
        return jsonable({
            "name": self.name,
            "verdict": self.verdict,
            "columns": list(self.columns),
            "rows": [list(r) for r in self.rows],
            "constants": self.constants,
            "meta": self.meta,
        })
