import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from prefix_dpo.errors import DataError, LayoutOverflowError
from prefix_dpo.layout import (
    CHOSEN, REJECTED, FormatTag, PreferenceSample, collate, format_tag, next_token_targets,
    packed_row, split_shared, to_paired, to_shared, truncate_sample,
)

samples_st = st.builds(
    PreferenceSample,
    st.lists(st.integers(1, 60), min_size=0, max_size=12),
    st.lists(st.integers(1, 60), min_size=1, max_size=8),
    st.lists(st.integers(1, 60), min_size=1, max_size=8),
)


def test_row_lengths(sample):
    r1, r2 = to_paired(sample)
    assert (len(r1), len(r2)) == (5, 6)
    shared = to_shared(sample)
    assert len(shared) == 8
    assert len(r1) + len(r2) == 11


def test_shared_positions_restart(sample):
    row = to_shared(sample)
    assert row.position_ids.tolist() == [0, 1, 2, 3, 4, 3, 4, 5]
    assert row.tokens.tolist() == [11, 12, 13, 21, 22, 31, 32, 33]
    assert (row.chosen_start, row.rejected_start) == (3, 5)
    assert row.format_tag is FormatTag.SHARED_ROW


def test_shared_targets(sample):
    tg = next_token_targets(to_shared(sample))
    assert len(tg) == 5
    assert tg.positions.tolist() == [2, 3, 2, 5, 6]
    assert tg.token_ids.tolist() == [21, 22, 31, 32, 33]
    assert tg.branch.tolist() == [CHOSEN, CHOSEN, REJECTED, REJECTED, REJECTED]
    # the last chosen token never scores a rejected token
    assert 4 not in tg.positions[tg.branch == REJECTED]


def test_paired_targets(sample):
    r1, r2 = to_paired(sample)
    t1, t2 = next_token_targets(r1), next_token_targets(r2)
    assert t1.positions.tolist() == [2, 3]
    assert t2.positions.tolist() == [2, 3, 4]
    assert t2.token_ids.tolist() == [31, 32, 33]


def test_empty_prompt_leaves_first_token_unscored():
    s = PreferenceSample([], [5, 6], [7])
    tg = next_token_targets(to_shared(s))
    assert tg.token_ids.tolist() == [6]
    assert tg.positions.tolist() == [0]


def test_sample_validation():
    with pytest.raises(DataError):
        PreferenceSample([1], [], [2])
    with pytest.raises(DataError):
        PreferenceSample([1], [-2], [2])
    with pytest.raises(DataError):
        PreferenceSample([1], ["x"], [2])


def test_format_tags():
    assert format_tag("paired", False).mask_kind == "causal"
    assert format_tag("shared", False).mask_kind == "prefix_sharing"
    assert format_tag("paired", True).mask_kind == "packed_baseline"
    assert format_tag("shared", True).mask_kind == "packed_prefix"
    assert format_tag("shared", True).packed and format_tag("shared", True).shared


def test_collate_padding(sample):
    other = PreferenceSample([1], [2], [3])
    batch = collate([to_shared(sample), to_shared(other, 1)], pad_token=0)
    assert batch.shape == (2, 8)
    assert batch.pad_mask[1].tolist() == [False] * 3 + [True] * 5
    assert (batch.mask_inputs.doc_ids[1, 3:] == -1).all()
    assert (batch.mask_inputs.response_ids[1, 3:] == -1).all()
    assert (batch.tokens[1, 3:] == 0).all()
    assert batch.num_tokens == 11
    assert batch.num_samples == 2
    assert batch.mask_inputs.chosen_start.tolist() == [3, 1]


def test_collate_errors(sample):
    with pytest.raises(LayoutOverflowError):
        collate([to_shared(sample)], fixed_len=7)
    with pytest.raises(DataError):
        collate([to_shared(sample), to_paired(sample)[0]])
    with pytest.raises(DataError):
        collate([])


def test_packed_row_ids(sample):
    other = PreferenceSample([1, 2], [3], [4])
    paired = packed_row([(0, sample), (1, other)], shared=False)
    assert sorted(set(paired.response_ids.tolist())) == [0, 1, 2, 3]
    assert sorted(set(paired.doc_ids.tolist())) == [0, 1]
    assert len(paired) == 11 + 6
    shared = packed_row([(0, sample), (1, other)], shared=True)
    assert len(shared) == 8 + 4
    assert shared.chosen_start.tolist() == [3] * 8 + [10] * 4
    assert shared.rejected_start.tolist() == [5] * 8 + [11] * 4
    assert shared.position_ids.tolist() == [0, 1, 2, 3, 4, 3, 4, 5, 0, 1, 2, 2]


def test_truncation():
    s = PreferenceSample([1, 2, 3, 4, 5], [6, 7], [8])
    assert truncate_sample(s, max_prompt_len=2).prompt == (4, 5)
    assert truncate_sample(s, max_seq_len=7) is s
    with pytest.raises(DataError, match="max_prompt_len"):
        truncate_sample(s, max_seq_len=6)
    assert truncate_sample(s, 3, 6).prompt == (3, 4, 5)
    with pytest.raises(DataError):
        truncate_sample(s, 0, 1)


@settings(max_examples=200, deadline=None)
@given(samples_st)
def test_shared_round_trip(s):
    assert split_shared(to_shared(s)) == s


@settings(max_examples=200, deadline=None)
@given(samples_st)
def test_position_parity(s):
    p, c1, c2 = s.lengths
    r1, r2 = to_paired(s)
    sh = to_shared(s)
    assert np.array_equal(sh.position_ids[: p + c1], r1.position_ids)
    assert np.array_equal(sh.position_ids[p + c1:], r2.position_ids[p:])


@settings(max_examples=200, deadline=None)
@given(samples_st)
def test_token_saving(s):
    p = len(s.prompt)
    r1, r2 = to_paired(s)
    assert len(r1) + len(r2) - len(to_shared(s)) == p


@settings(max_examples=200, deadline=None)
@given(samples_st)
def test_target_parity(s):
    r1, r2 = to_paired(s)
    t1, t2 = next_token_targets(r1), next_token_targets(r2)
    ts = next_token_targets(to_shared(s))
    expected = s.chosen + s.rejected
    if not s.prompt:
        expected = s.chosen[1:] + s.rejected[1:]
    assert ts.token_ids.tolist() == t1.token_ids.tolist() + t2.token_ids.tolist() == list(expected)
    # shared gather positions map back onto paired positions
    p, c1, _ = s.lengths
    mapped = [q if q < p + c1 and b == CHOSEN or q < p else q - c1
              for q, b in zip(ts.positions.tolist(), ts.branch.tolist())]
    assert mapped == t1.positions.tolist() + t2.positions.tolist()
