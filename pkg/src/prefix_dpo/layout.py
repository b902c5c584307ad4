"""Turning preference samples into model-ready rows.

Two row formats exist for a sample with prompt ``x`` and completions
``y_c``/``y_r``:

* paired: two rows, ``x + y_c`` and ``x + y_r``, each with positions ``0..n-1``;
* shared: one row ``x + y_c + y_r`` whose rejected span restarts its position
  IDs at ``len(x)`` so rotary embeddings see the same positions as in the
  paired rows.

Packed variants concatenate several of these units into one row. Every row
records its spans so log-probs can be gathered per (sample, completion).
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .errors import DataError, LayoutOverflowError
from .masks import BlockMask, MaskInputs, bind, build_block_mask, DEFAULT_BLOCK_SIZE

CHOSEN, REJECTED = 0, 1


class FormatTag(str, enum.Enum):
    PAIRED_ROW = "PairedRow"
    SHARED_ROW = "SharedRow"
    PACKED_PAIRED_ROW = "PackedPairedRow"
    PACKED_SHARED_ROW = "PackedSharedRow"

    @property
    def mask_kind(self) -> str:
        return _MASK_KIND[self]

    @property
    def packed(self) -> bool:
        return self in (FormatTag.PACKED_PAIRED_ROW, FormatTag.PACKED_SHARED_ROW)

    @property
    def shared(self) -> bool:
        return self in (FormatTag.SHARED_ROW, FormatTag.PACKED_SHARED_ROW)


_MASK_KIND = {
    FormatTag.PAIRED_ROW: "causal",
    FormatTag.SHARED_ROW: "prefix_sharing",
    FormatTag.PACKED_PAIRED_ROW: "packed_baseline",
    FormatTag.PACKED_SHARED_ROW: "packed_prefix",
}


def format_tag(fmt: str, packing: bool) -> FormatTag:
    fmt = fmt.lower()
    if fmt not in ("paired", "shared"):
        raise ValueError(f"format must be 'paired' or 'shared', got {fmt!r}")
    if fmt == "paired":
        return FormatTag.PACKED_PAIRED_ROW if packing else FormatTag.PAIRED_ROW
    return FormatTag.PACKED_SHARED_ROW if packing else FormatTag.SHARED_ROW


@dataclass(frozen=True)
class PreferenceSample:
    prompt: tuple
    chosen: tuple
    rejected: tuple

    def __post_init__(self):
        for name in ("prompt", "chosen", "rejected"):
            value = getattr(self, name)
            try:
                ids = tuple(int(t) for t in value)
            except (TypeError, ValueError):
                raise DataError(f"{name} must be a sequence of integer token IDs") from None
            if any(t < 0 for t in ids):
                raise DataError(f"{name} contains a negative token ID")
            object.__setattr__(self, name, ids)
        if not self.chosen or not self.rejected:
            raise DataError("chosen and rejected completions must be non-empty")

    @property
    def lengths(self) -> tuple[int, int, int]:
        return len(self.prompt), len(self.chosen), len(self.rejected)


@dataclass(frozen=True)
class Span:
    """Token ranges (half-open) of one sample, or one half of it, within a row."""

    sample: int
    doc: int
    prompt: tuple[int, int]
    chosen: tuple[int, int] | None = None
    rejected: tuple[int, int] | None = None

    @property
    def start(self) -> int:
        return self.prompt[0]

    @property
    def end(self) -> int:
        return max(r[1] for r in (self.prompt, self.chosen, self.rejected) if r is not None)


@dataclass
class SequenceLayout:
    tokens: np.ndarray
    position_ids: np.ndarray
    format_tag: FormatTag
    spans: list[Span]
    doc_ids: np.ndarray
    response_ids: np.ndarray
    # scalars for unpacked rows, per-token arrays for packed rows
    chosen_start: int | np.ndarray
    rejected_start: int | np.ndarray
    loss_mask_chosen: np.ndarray = field(init=False)
    loss_mask_rejected: np.ndarray = field(init=False)

    def __post_init__(self):
        n = len(self.tokens)
        self.loss_mask_chosen = np.zeros(n, dtype=bool)
        self.loss_mask_rejected = np.zeros(n, dtype=bool)
        for span in self.spans:
            if span.chosen is not None:
                self.loss_mask_chosen[span.chosen[0]:span.chosen[1]] = True
            if span.rejected is not None:
                self.loss_mask_rejected[span.rejected[0]:span.rejected[1]] = True

    def __len__(self) -> int:
        return len(self.tokens)

    @property
    def sample_ids(self) -> list[int]:
        return sorted({s.sample for s in self.spans})


def truncate_sample(sample: PreferenceSample, max_prompt_len: int | None = None,
                    max_seq_len: int | None = None) -> PreferenceSample:
    """Left-truncate the prompt; refuse completions that cannot fit.

    ``max_seq_len`` bounds the longer paired row, ``prompt + max(chosen, rejected)``.
    """
    prompt = sample.prompt
    if max_prompt_len is not None and len(prompt) > max_prompt_len:
        prompt = prompt[len(prompt) - max_prompt_len:]
    if max_seq_len is not None:
        longest = max(len(sample.chosen), len(sample.rejected))
        if longest > max_seq_len:
            raise DataError(f"completion of length {longest} exceeds max_seq_len {max_seq_len}")
        if len(prompt) + longest > max_seq_len:
            raise DataError(
                f"prompt ({len(prompt)}) + completion ({longest}) exceeds max_seq_len "
                f"{max_seq_len}; lower max_prompt_len"
            )
    if prompt is sample.prompt:
        return sample
    return PreferenceSample(prompt, sample.chosen, sample.rejected)


def _row(tokens, positions, tag, spans, chosen_start, rejected_start):
    n = len(tokens)
    return SequenceLayout(
        tokens=np.asarray(tokens, dtype=np.int64),
        position_ids=np.asarray(positions, dtype=np.int64),
        format_tag=tag,
        spans=spans,
        doc_ids=np.zeros(n, dtype=np.int64),
        response_ids=np.zeros(n, dtype=np.int64),
        chosen_start=chosen_start,
        rejected_start=rejected_start,
    )


def to_paired(sample: PreferenceSample, sample_index: int = 0):
    p, c1, c2 = sample.lengths
    row1 = _row(
        sample.prompt + sample.chosen, np.arange(p + c1), FormatTag.PAIRED_ROW,
        [Span(sample_index, 0, (0, p), chosen=(p, p + c1))], p, p,
    )
    row2 = _row(
        sample.prompt + sample.rejected, np.arange(p + c2), FormatTag.PAIRED_ROW,
        [Span(sample_index, 0, (0, p), rejected=(p, p + c2))], p, p,
    )
    return row1, row2


def to_shared(sample: PreferenceSample, sample_index: int = 0) -> SequenceLayout:
    p, c1, c2 = sample.lengths
    positions = np.concatenate([np.arange(p + c1), np.arange(p, p + c2)])
    span = Span(sample_index, 0, (0, p), chosen=(p, p + c1), rejected=(p + c1, p + c1 + c2))
    return _row(sample.prompt + sample.chosen + sample.rejected, positions,
                FormatTag.SHARED_ROW, [span], p, p + c1)


def split_shared(layout: SequenceLayout) -> PreferenceSample:
    """Inverse of :func:`to_shared`."""
    if layout.format_tag is not FormatTag.SHARED_ROW:
        raise ValueError("split_shared expects a SharedRow")
    t = layout.tokens.tolist()
    cs, rs = int(layout.chosen_start), int(layout.rejected_start)
    return PreferenceSample(t[:cs], t[cs:rs], t[rs:])


def packed_row(samples: Sequence[tuple[int, PreferenceSample]], shared: bool) -> SequenceLayout:
    """Concatenate the packing units of several samples into one row.

    Each sample gets its own doc ID. Paired units contribute two
    (prompt + response) pieces with distinct response IDs; shared units carry
    per-token start indices for the chosen and rejected spans.
    """
    tokens, positions, docs, resp, cs, rs = [], [], [], [], [], []
    spans: list[Span] = []
    offset = 0
    for doc, (index, sample) in enumerate(samples):
        p, c1, c2 = sample.lengths
        if shared:
            pieces = [to_shared(sample, index)]
        else:
            pieces = list(to_paired(sample, index))
        for piece in pieces:
            n = len(piece)
            rid = len(spans)
            s = piece.spans[0]
            shift = lambda r: None if r is None else (r[0] + offset, r[1] + offset)
            spans.append(Span(index, doc, shift(s.prompt), shift(s.chosen), shift(s.rejected)))
            tokens.append(piece.tokens)
            positions.append(piece.position_ids)
            docs.append(np.full(n, doc))
            resp.append(np.full(n, rid))
            if shared:
                cs.append(np.full(n, offset + p))
                rs.append(np.full(n, offset + p + c1))
            else:
                # no chosen/rejected restriction inside a paired piece
                cs.append(np.full(n, offset))
                rs.append(np.full(n, offset))
            offset += n
    tag = FormatTag.PACKED_SHARED_ROW if shared else FormatTag.PACKED_PAIRED_ROW
    cat = lambda xs: np.concatenate(xs).astype(np.int64)
    return SequenceLayout(
        tokens=cat(tokens), position_ids=cat(positions), format_tag=tag, spans=spans,
        doc_ids=cat(docs), response_ids=cat(resp), chosen_start=cat(cs), rejected_start=cat(rs),
    )


@dataclass
class Targets:
    """Flat gather list: ``logits[positions[k]]`` scores ``token_ids[k]``."""

    positions: np.ndarray
    token_ids: np.ndarray
    branch: np.ndarray
    sample: np.ndarray

    def __len__(self) -> int:
        return len(self.positions)


def next_token_targets(layout: SequenceLayout) -> Targets:
    """Gather positions for every completion token of every span.

    Token ``i`` of a completion is scored by the logit at ``i - 1`` when that
    token belongs to the same completion, and by the last prompt token
    otherwise. In a shared row that last prompt position is therefore gathered
    twice, once per completion. With an empty prompt the first completion
    token has no context and is not scored.
    """
    pos, tok, branch, sample = [], [], [], []
    t = layout.tokens
    for span in layout.spans:
        last_prompt = span.prompt[1] - 1 if span.prompt[1] > span.prompt[0] else None
        for b, rng in ((CHOSEN, span.chosen), (REJECTED, span.rejected)):
            if rng is None:
                continue
            for i in range(rng[0], rng[1]):
                src = i - 1 if i > rng[0] else last_prompt
                if src is None:
                    continue
                pos.append(src)
                tok.append(t[i])
                branch.append(b)
                sample.append(span.sample)
    as_int = lambda xs: np.asarray(xs, dtype=np.int64)
    return Targets(as_int(pos), as_int(tok), as_int(branch), as_int(sample))


@dataclass
class Batch:
    tokens: np.ndarray          # (B, L)
    position_ids: np.ndarray    # (B, L)
    format_tag: FormatTag
    mask_inputs: MaskInputs
    rows: list[SequenceLayout]
    target_rows: np.ndarray
    target_positions: np.ndarray
    target_ids: np.ndarray
    target_branch: np.ndarray
    target_sample: np.ndarray
    loss_mask_chosen: np.ndarray
    loss_mask_rejected: np.ndarray
    pad_mask: np.ndarray        # True on padding

    @property
    def shape(self) -> tuple[int, int]:
        return self.tokens.shape

    @property
    def sample_ids(self) -> np.ndarray:
        return np.unique(self.target_sample)

    @property
    def num_samples(self) -> int:
        return len({s.sample for r in self.rows for s in r.spans})

    @property
    def num_tokens(self) -> int:
        return int((~self.pad_mask).sum())

    def predicate(self):
        return bind(self.format_tag.mask_kind, self.mask_inputs)

    def block_mask(self, block_size: int = DEFAULT_BLOCK_SIZE, predicate=None) -> BlockMask:
        """Fresh block mask for this batch; ``predicate`` overrides the format's own."""
        pred = predicate if predicate is not None else self.predicate()
        b, n = self.shape
        return build_block_mask(pred, b, n, block_size)


def collate(rows: Sequence[SequenceLayout], pad_token: int = 0,
            fixed_len: int | None = None) -> Batch:
    """Right-pad rows into a batch and assemble its mask metadata."""
    if not rows:
        raise DataError("cannot collate an empty list of rows")
    tags = {r.format_tag for r in rows}
    if len(tags) != 1:
        raise DataError(f"rows mix formats: {sorted(t.value for t in tags)}")
    tag = tags.pop()
    longest = max(len(r) for r in rows)
    length = longest if fixed_len is None else fixed_len
    for k, r in enumerate(rows):
        if len(r) > length:
            raise LayoutOverflowError(f"row {k} has length {len(r)} > fixed length {length}")
    B = len(rows)
    tokens = np.full((B, length), pad_token, dtype=np.int64)
    positions = np.zeros((B, length), dtype=np.int64)
    docs = np.full((B, length), -1, dtype=np.int64)
    resp = np.full((B, length), -1, dtype=np.int64)
    lmc = np.zeros((B, length), dtype=bool)
    lmr = np.zeros((B, length), dtype=bool)
    pad = np.ones((B, length), dtype=bool)
    if tag.packed:
        cs = np.zeros((B, length), dtype=np.int64)
        rs = np.zeros((B, length), dtype=np.int64)
    else:
        cs = np.zeros(B, dtype=np.int64)
        rs = np.zeros(B, dtype=np.int64)
    t_rows, t_pos, t_ids, t_branch, t_sample = [], [], [], [], []
    for k, r in enumerate(rows):
        n = len(r)
        tokens[k, :n] = r.tokens
        positions[k, :n] = r.position_ids
        docs[k, :n] = r.doc_ids
        resp[k, :n] = r.response_ids
        lmc[k, :n] = r.loss_mask_chosen
        lmr[k, :n] = r.loss_mask_rejected
        pad[k, :n] = False
        if tag.packed:
            cs[k, :n] = r.chosen_start
            rs[k, :n] = r.rejected_start
        else:
            cs[k] = r.chosen_start
            rs[k] = r.rejected_start
        tg = next_token_targets(r)
        t_rows.append(np.full(len(tg), k, dtype=np.int64))
        t_pos.append(tg.positions)
        t_ids.append(tg.token_ids)
        t_branch.append(tg.branch)
        t_sample.append(tg.sample)
    return Batch(
        tokens=tokens, position_ids=positions, format_tag=tag,
        mask_inputs=MaskInputs(cs, rs, docs, resp), rows=list(rows),
        target_rows=np.concatenate(t_rows), target_positions=np.concatenate(t_pos),
        target_ids=np.concatenate(t_ids), target_branch=np.concatenate(t_branch),
        target_sample=np.concatenate(t_sample),
        loss_mask_chosen=lmc, loss_mask_rejected=lmr, pad_mask=pad,
    )


def unpacked_rows(samples: Iterable[tuple[int, PreferenceSample]], shared: bool) -> list[SequenceLayout]:
    rows: list[SequenceLayout] = []
    for index, sample in samples:
        if shared:
            rows.append(to_shared(sample, index))
        else:
            rows.extend(to_paired(sample, index))
    return rows
