"""First-Fit-Decreasing packing of preference samples into fixed-length rows.

The packing unit depends on the row format: a paired unit is
``prompt + chosen + prompt + rejected`` (both halves must land in the same
row), a shared unit is ``prompt + chosen + rejected``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import DataError, UnpackableSampleError
from .layout import Batch, PreferenceSample, collate, packed_row, unpacked_rows


def unit_length(sample: PreferenceSample, fmt: str) -> int:
    p, c1, c2 = sample.lengths
    if fmt == "paired":
        return 2 * p + c1 + c2
    if fmt == "shared":
        return p + c1 + c2
    raise ValueError(f"format must be 'paired' or 'shared', got {fmt!r}")


def packing_capacity(samples: Sequence[PreferenceSample], fmt: str, bsz: int) -> int:
    """Tokens per packed row: ``bsz`` times the longest unit in the dataset."""
    if bsz < 1:
        raise ValueError("bsz must be >= 1")
    if not samples:
        raise DataError("empty dataset")
    return bsz * max(unit_length(s, fmt) for s in samples)


@dataclass
class PackPlan:
    capacity: int
    bins: list[list[int]]
    fill: list[int]
    lengths: list[int] = field(default_factory=list, repr=False)

    def efficiency(self) -> float:
        return packing_efficiency(self)

    def shuffled(self, seed) -> "PackPlan":
        """Permute whole bins; each bin's contents are untouched."""
        order = np.random.default_rng(seed).permutation(len(self.bins))
        return PackPlan(self.capacity, [list(self.bins[i]) for i in order],
                        [self.fill[i] for i in order], list(self.lengths))

    def to_dict(self) -> dict:
        return {"capacity": self.capacity, "bins": self.bins, "fill": self.fill,
                "efficiency": packing_efficiency(self)}


def ffd_pack(lengths: Sequence[int], capacity: int) -> PackPlan:
    """Sort by decreasing length (ties: lower index first), place in the first bin that fits."""
    lengths = [int(x) for x in lengths]
    for i, n in enumerate(lengths):
        if n < 1:
            raise DataError(f"sample {i} has non-positive unit length {n}")
        if n > capacity:
            raise UnpackableSampleError(i, n, capacity)
    order = sorted(range(len(lengths)), key=lambda i: (-lengths[i], i))
    bins: list[list[int]] = []
    fill: list[int] = []
    for i in order:
        n = lengths[i]
        for b, used in enumerate(fill):
            if used + n <= capacity:
                bins[b].append(i)
                fill[b] = used + n
                break
        else:
            bins.append([i])
            fill.append(n)
    return PackPlan(capacity, bins, fill, lengths)


def packing_efficiency(plan: PackPlan) -> float:
    if not plan.bins:
        raise DataError("plan has no bins")
    return sum(plan.fill) / (len(plan.bins) * plan.capacity)


def plan_for(samples: Sequence[PreferenceSample], fmt: str, bsz: int,
             capacity: int | None = None) -> PackPlan:
    if capacity is None:
        capacity = packing_capacity(samples, fmt, bsz)
    return ffd_pack([unit_length(s, fmt) for s in samples], capacity)


def materialize_packed(plan: PackPlan, dataset: Sequence[PreferenceSample], fmt: str,
                       pad_token: int = 0) -> list[Batch]:
    """One single-row batch per bin, padded to the plan's capacity."""
    if fmt not in ("paired", "shared"):
        raise ValueError(f"format must be 'paired' or 'shared', got {fmt!r}")
    batches = []
    for members in plan.bins:
        row = packed_row([(i, dataset[i]) for i in members], shared=fmt == "shared")
        batches.append(collate([row], pad_token=pad_token, fixed_len=plan.capacity))
    return batches


def build_batches(samples: Sequence[PreferenceSample], fmt: str = "shared", packing: bool = False,
                  bsz: int = 4, pad_token: int = 0, plan: PackPlan | None = None,
                  fixed_len: int | None = None) -> list[Batch]:
    """Split a dataset into training batches, in data order.

    Unpacked: consecutive groups of ``bsz`` samples, padded to the longest row
    (or ``fixed_len``). Packed: one row per FFD bin of ``plan`` (computed here
    when not given).
    """
    if fmt not in ("paired", "shared"):
        raise ValueError(f"format must be 'paired' or 'shared', got {fmt!r}")
    if not samples:
        raise DataError("empty dataset")
    if packing:
        if plan is None:
            plan = plan_for(samples, fmt, bsz)
        return materialize_packed(plan, samples, fmt, pad_token)
    if bsz < 1:
        raise ValueError("bsz must be >= 1")
    batches = []
    for start in range(0, len(samples), bsz):
        chunk = [(i, samples[i]) for i in range(start, min(start + bsz, len(samples)))]
        rows = unpacked_rows(chunk, shared=fmt == "shared")
        batches.append(collate(rows, pad_token=pad_token, fixed_len=fixed_len))
    return batches
