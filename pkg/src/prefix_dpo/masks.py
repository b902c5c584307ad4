"""Attention-mask predicates and block-sparse mask construction.

A predicate has the signature ``predicate(b, q, kv) -> bool`` and is evaluated
with numpy broadcasting, so ``q`` and ``kv`` may be integer arrays (typically
a column and a row of indices). The three data-dependent predicates take a
:class:`MaskInputs` and are bound with :func:`bind` before use.
"""

from __future__ import annotations

import enum
import json
from dataclasses import dataclass, field
from functools import partial
from typing import Callable

import numpy as np

from .errors import ShapeError

Predicate = Callable[..., np.ndarray]

DEFAULT_BLOCK_SIZE = 128


class BlockKind(enum.IntEnum):
    EMPTY = 0
    PARTIAL = 1
    FULL = 2

    @property
    def letter(self) -> str:
        return "EPF"[self.value]


@dataclass
class MaskInputs:
    """Per-batch metadata read by the mask predicates.

    ``chosen_start``/``rejected_start`` are shaped ``(B,)`` for unpacked shared
    rows (one pair per row) and ``(B, L)`` for packed rows (per-token). Padding
    carries ``doc_ids == response_ids == -1``.
    """

    chosen_start: np.ndarray
    rejected_start: np.ndarray
    doc_ids: np.ndarray
    response_ids: np.ndarray

    def __post_init__(self):
        self.doc_ids = np.asarray(self.doc_ids, dtype=np.int64)
        self.response_ids = np.asarray(self.response_ids, dtype=np.int64)
        self.chosen_start = np.asarray(self.chosen_start, dtype=np.int64)
        self.rejected_start = np.asarray(self.rejected_start, dtype=np.int64)
        if self.doc_ids.ndim != 2 or self.response_ids.shape != self.doc_ids.shape:
            raise ShapeError("doc_ids and response_ids must both be (B, L)")
        if self.chosen_start.shape != self.rejected_start.shape:
            raise ShapeError("chosen_start and rejected_start shapes differ")
        if self.chosen_start.shape not in ((self.batch_size,), self.doc_ids.shape):
            raise ShapeError(f"start indices must be (B,) or (B, L), got {self.chosen_start.shape}")

    @property
    def batch_size(self) -> int:
        return self.doc_ids.shape[0]

    @property
    def seq_len(self) -> int:
        return self.doc_ids.shape[1]


def causal(b, q, kv, inputs: MaskInputs | None = None):
    return np.asarray(kv) <= np.asarray(q)


def _dpo_mask(q, kv, chosen_ind, rejected_ind):
    # rejected queries must not see chosen keys
    return ~((rejected_ind <= q) & (chosen_ind <= kv) & (kv < rejected_ind))


def prefix_sharing_mask(b, q, kv, inputs: MaskInputs):
    q = np.asarray(q)
    kv = np.asarray(kv)
    chosen_ind = inputs.chosen_start[b]
    rejected_ind = inputs.rejected_start[b]
    return (kv <= q) & _dpo_mask(q, kv, chosen_ind, rejected_ind)


def packed_baseline_mask(b, q, kv, inputs: MaskInputs):
    q = np.asarray(q)
    kv = np.asarray(kv)
    r = inputs.response_ids[b]
    return (kv <= q) & (r[q] == r[kv])


def packed_prefix_mask(b, q, kv, inputs: MaskInputs):
    q = np.asarray(q)
    kv = np.asarray(kv)
    d = inputs.doc_ids[b]
    cs = inputs.chosen_start
    rs = inputs.rejected_start
    if cs.ndim == 1:
        chosen_ind, rejected_ind = cs[b], rs[b]
    else:
        # read at the query token
        chosen_ind, rejected_ind = cs[b][q], rs[b][q]
    return (kv <= q) & (d[q] == d[kv]) & _dpo_mask(q, kv, chosen_ind, rejected_ind)


PREDICATES = {
    "causal": causal,
    "prefix_sharing": prefix_sharing_mask,
    "packed_baseline": packed_baseline_mask,
    "packed_prefix": packed_prefix_mask,
}


def bind(kind: str, inputs: MaskInputs) -> Predicate:
    """Close a named predicate over its batch metadata."""
    try:
        fn = PREDICATES[kind]
    except KeyError:
        raise ValueError(f"unknown mask kind {kind!r}") from None
    return partial(fn, inputs=inputs)


def dense_mask(predicate: Predicate, batch_size: int, seq_len: int) -> np.ndarray:
    """Evaluate ``predicate`` on the full ``(B, L, L)`` grid."""
    idx = np.arange(seq_len)
    out = np.empty((batch_size, seq_len, seq_len), dtype=bool)
    for b in range(batch_size):
        out[b] = np.broadcast_to(predicate(b, idx[:, None], idx[None, :]), (seq_len, seq_len))
    return out


@dataclass
class BlockMask:
    block_size: int
    seq_len: int
    classification: np.ndarray  # (B, n_q_blocks, n_kv_blocks) of BlockKind values
    predicate: Predicate
    _plans: dict = field(default_factory=dict, repr=False)

    @property
    def batch_size(self) -> int:
        return self.classification.shape[0]

    @property
    def num_q_blocks(self) -> int:
        return self.classification.shape[1]

    @property
    def num_kv_blocks(self) -> int:
        return self.classification.shape[2]

    def block_range(self, i: int) -> range:
        return range(i * self.block_size, min((i + 1) * self.block_size, self.seq_len))

    def kind(self, b: int, i: int, j: int) -> BlockKind:
        return BlockKind(int(self.classification[b, i, j]))

    def query_plan(self, b: int, i: int):
        """Key indices and the allowed-mask for query block ``i`` of row ``b``.

        Empty blocks contribute no keys; Full blocks are all-true without
        touching the predicate; Partial blocks evaluate it per element.
        Memoized, since every layer and head reuses the same plan.
        """
        key = (b, i)
        plan = self._plans.get(key)
        if plan is not None:
            return plan
        qr = self.block_range(i)
        q_idx = np.arange(qr.start, qr.stop)
        keys, parts = [], []
        for j in range(self.num_kv_blocks):
            kind = self.classification[b, i, j]
            if kind == BlockKind.EMPTY:
                continue
            kr = self.block_range(j)
            kv_idx = np.arange(kr.start, kr.stop)
            keys.append(kv_idx)
            if kind == BlockKind.FULL:
                parts.append(np.ones((len(q_idx), len(kv_idx)), dtype=bool))
            else:
                parts.append(
                    np.broadcast_to(
                        self.predicate(b, q_idx[:, None], kv_idx[None, :]),
                        (len(q_idx), len(kv_idx)),
                    )
                )
        if keys:
            plan = (np.concatenate(keys), np.concatenate(parts, axis=1))
        else:
            plan = (np.zeros(0, dtype=np.int64), np.zeros((len(q_idx), 0), dtype=bool))
        self._plans[key] = plan
        return plan

    def effective_mask(self) -> np.ndarray:
        """The ``(B, L, L)`` mask the block-sparse path actually applies."""
        out = np.zeros((self.batch_size, self.seq_len, self.seq_len), dtype=bool)
        for b in range(self.batch_size):
            for i in range(self.num_q_blocks):
                qr = self.block_range(i)
                keys, allowed = self.query_plan(b, i)
                out[b, qr.start:qr.stop][:, keys] = allowed
        return out

    def grid(self, b: int = 0) -> list[str]:
        return ["".join(BlockKind(int(k)).letter for k in row) for row in self.classification[b]]

    def to_json(self) -> str:
        return json.dumps(
            {
                "block_size": self.block_size,
                "seq_len": self.seq_len,
                "batch_size": self.batch_size,
                "grid": [self.grid(b) for b in range(self.batch_size)],
            }
        )


def build_block_mask(predicate: Predicate, batch_size: int, seq_len: int,
                     block_size: int = DEFAULT_BLOCK_SIZE) -> BlockMask:
    """Classify every ``block_size``-square tile of the mask as Empty/Partial/Full.

    Ragged edge tiles are classified over their in-range region only.
    """
    if block_size < 1:
        raise ValueError("block_size must be >= 1")
    n = -(-seq_len // block_size)
    padded = n * block_size
    dense = dense_mask(predicate, batch_size, seq_len)
    grid = np.zeros((batch_size, padded, padded), dtype=bool)
    grid[:, :seq_len, :seq_len] = dense
    counts = grid.reshape(batch_size, n, block_size, n, block_size).sum(axis=(2, 4))
    extent = np.minimum(block_size, seq_len - np.arange(n) * block_size)
    area = extent[:, None] * extent[None, :]
    cls = np.full(counts.shape, BlockKind.PARTIAL, dtype=np.int8)
    cls[counts == 0] = BlockKind.EMPTY
    cls[counts == area] = BlockKind.FULL
    return BlockMask(block_size=block_size, seq_len=seq_len, classification=cls, predicate=predicate)


def block_mask_stats(mask: BlockMask) -> dict:
    """Block-count fractions plus the fraction of score entries skipped."""
    cls = mask.classification
    total = cls.size
    n = mask.num_q_blocks
    extent = np.minimum(mask.block_size, mask.seq_len - np.arange(n) * mask.block_size)
    area = extent[:, None] * extent[None, :]
    skipped = float((area[None] * (cls == BlockKind.EMPTY)).sum())
    return {
        "empty_fraction": float((cls == BlockKind.EMPTY).sum()) / total,
        "partial_fraction": float((cls == BlockKind.PARTIAL).sum()) / total,
        "full_fraction": float((cls == BlockKind.FULL).sum()) / total,
        "skipped_flop_fraction": skipped / (mask.batch_size * mask.seq_len**2),
    }
