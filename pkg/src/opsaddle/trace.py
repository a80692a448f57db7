"""Per-iteration run records."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import InvalidInputError


@dataclass
class RunTrace:
    """Rows of metrics keyed by ``columns``, plus run metadata.

    ``columns`` fixes the CSV header; ``extra`` columns are kept alongside
    for diagnostics that are not part of the header.
    """

    columns: tuple[str, ...]
    rows: list[dict] = field(default_factory=list)
    meta: dict = field(default_factory=dict)
    extra: tuple[str, ...] = ()

    def append(self, **row) -> None:
        missing = set(self.columns) - set(row)
        if missing:
            raise InvalidInputError(f"trace row lacks {sorted(missing)}")
        if self.rows and row["iter"] <= self.rows[-1]["iter"]:
            raise InvalidInputError("trace rows must be strictly ordered by iteration")
        self.rows.append(row)

    def __len__(self) -> int:
        return len(self.rows)

    def column(self, name: str) -> np.ndarray:
        return np.array([row[name] for row in self.rows], dtype=float)

    def table(self, names: Sequence[str] | None = None) -> list[list]:
        names = self.columns if names is None else tuple(names)
        return [[row[n] for n in names] for row in self.rows]
