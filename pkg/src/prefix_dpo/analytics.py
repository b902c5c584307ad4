"""Closed-form speedup models, dataset statistics and throughput tables."""

from __future__ import annotations

import csv
import io
import json
from dataclasses import asdict, dataclass
from typing import Mapping, Sequence

import numpy as np

from .errors import DataError
from .layout import PreferenceSample
from .packing import unit_length


def _check(p, c):
    if p < 0:
        raise ValueError("prefix length must be >= 0")
    if c <= 0:
        raise ValueError("completion length must be > 0")


def ideal_linear_speedup(p, c) -> float:
    """Token-count speedup of sharing a length-``p`` prompt between two length-``c`` completions."""
    _check(p, c)
    return (2 * (p + c)) / (p + 2 * c)


def ideal_attention_speedup(p, c) -> float:
    """Speedup of causal attention work, which scales with the squared row length."""
    _check(p, c)
    full = 2 * (p + c) ** 2
    return full / (full - p**2)


OVERALL_LEN = {
    "paired_row": lambda p, c1, c2: p + max(c1, c2),
    "mean": lambda p, c1, c2: p + (c1 + c2) / 2,
    "shared": lambda p, c1, c2: p + c1 + c2,
}
RATIO = {
    "mean": lambda p, c1, c2: p / ((c1 + c2) / 2),
    "max": lambda p, c1, c2: p / max(c1, c2),
}


@dataclass
class DatasetStats:
    n_samples: int
    median_overall_len: float
    median_prefix_completion_ratio: float
    total_paired_tokens: int
    total_shared_tokens: int
    predicted_token_reduction: float

    def to_dict(self) -> dict:
        return asdict(self)

    def to_markdown(self, name: str = "dataset") -> str:
        head = ("| Dataset | Median Overall Len | Prefix / Completion | Paired Tokens "
                "| Shared Tokens | Predicted Reduction |")
        sep = "|---|---:|---:|---:|---:|---:|"
        row = (f"| {name} | {self.median_overall_len:g} | {self.median_prefix_completion_ratio:.2f} "
               f"| {self.total_paired_tokens} | {self.total_shared_tokens} "
               f"| {self.predicted_token_reduction:.3f}x |")
        return "\n".join([head, sep, row])


def dataset_stats(samples: Sequence[PreferenceSample], overall_len: str = "paired_row",
                  ratio: str = "mean") -> DatasetStats:
    """Table-style statistics plus the token reduction prefix sharing predicts.

    ``overall_len`` picks the per-sample length whose median is reported:
    ``paired_row`` (prompt + longer completion), ``mean`` or ``shared``.
    ``ratio`` picks the completion length dividing the prompt length.
    """
    if not samples:
        raise DataError("empty dataset")
    lens = [s.lengths for s in samples]
    overall = OVERALL_LEN[overall_len]
    ratio_fn = RATIO[ratio]
    paired = sum(unit_length(s, "paired") for s in samples)
    shared = sum(unit_length(s, "shared") for s in samples)
    return DatasetStats(
        n_samples=len(samples),
        median_overall_len=float(np.median([overall(*x) for x in lens])),
        median_prefix_completion_ratio=float(np.median([ratio_fn(*x) for x in lens])),
        total_paired_tokens=paired,
        total_shared_tokens=shared,
        predicted_token_reduction=paired / shared,
    )


@dataclass
class ThroughputReport:
    baseline: str
    rows: list[dict]

    @property
    def columns(self) -> list[str]:
        return list(dict.fromkeys(k for r in self.rows for k in r))

    def to_json(self) -> str:
        return json.dumps({"baseline": self.baseline, "rows": self.rows}, indent=2)

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.DictWriter(buf, fieldnames=self.columns, lineterminator="\n")
        writer.writeheader()
        writer.writerows(self.rows)
        return buf.getvalue()

    def to_markdown(self) -> str:
        cols = self.columns
        lines = ["| " + " | ".join(cols) + " |", "|" + "---|" * len(cols)]
        for r in self.rows:
            cells = []
            for c in cols:
                v = r.get(c, "")
                if c == "speedup":
                    cells.append(f"{v:.2f}x")
                elif isinstance(v, float):
                    cells.append(f"{v:.3f}")
                else:
                    cells.append(str(v))
            lines.append("| " + " | ".join(cells) + " |")
        return "\n".join(lines)

    def render(self, fmt: str) -> str:
        return {"json": self.to_json, "csv": self.to_csv, "md": self.to_markdown}[fmt]()


def throughput_report(rates: Mapping[str, float], baseline: str | None = None,
                      extra: Mapping[str, Mapping] | None = None) -> ThroughputReport:
    """Samples/sec per configuration and the speedup over ``baseline``.

    ``baseline`` defaults to the first configuration. ``extra`` adds columns
    per configuration (e.g. the predicted token reduction).
    """
    if len(rates) < 2:
        raise ValueError("a throughput comparison needs at least two configurations")
    baseline = next(iter(rates)) if baseline is None else baseline
    if baseline not in rates:
        raise ValueError(f"baseline {baseline!r} was not measured")
    base = rates[baseline]
    rows = []
    for name, rate in rates.items():
        row = {"config": name, "samples_per_sec": float(rate), "speedup": float(rate) / base}
        row.update((extra or {}).get(name, {}))
        rows.append(row)
    return ThroughputReport(baseline, rows)
