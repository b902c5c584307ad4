import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import max_abs, paired_and_shared_batches
from prefix_dpo.dpo import (
    MetricsLogger, ReferenceCache, batch_logprobs, completion_logprobs, dpo_loss,
    loss_and_grads, reference_logprobs, train_step,
)
from prefix_dpo.errors import CacheMissError, DataError, ShapeError
from prefix_dpo.layout import PreferenceSample, collate, to_shared
from prefix_dpo.model import SGD, AdamW
from prefix_dpo.packing import build_batches

finite = st.floats(-50, 50, allow_nan=False)


def test_uniform_logits():
    batch = collate([to_shared(PreferenceSample([1, 2, 3], [4, 5], [6, 7, 8]))])
    lp = completion_logprobs(np.zeros(batch.shape + (16,)), batch)
    assert lp.chosen[0] == pytest.approx(-2 * math.log(16), abs=1e-12)
    assert lp.rejected[0] == pytest.approx(-3 * math.log(16), abs=1e-12)
    with pytest.raises(ShapeError):
        completion_logprobs(np.zeros((1, 3, 16)), batch)
    with pytest.raises(ShapeError):
        completion_logprobs(np.zeros(batch.shape + (8,)), batch)


def test_unscorable_completion_is_rejected():
    batch = collate([to_shared(PreferenceSample([], [5], [6, 7]))])
    with pytest.raises(DataError, match="chosen"):
        completion_logprobs(np.zeros(batch.shape + (8,)), batch)


def test_loss_examples():
    r = dpo_loss([-3.0], [-5.0], [-4.0], [-1.0], beta=0.0)
    assert r.loss == pytest.approx(math.log(2), abs=1e-15)
    assert r.grad_chosen[0] == 0
    r = dpo_loss([1.0], [-1.0], [0.0], [0.0], beta=0.1)
    assert r.margins[0] == pytest.approx(0.2, abs=1e-15)
    assert r.loss == pytest.approx(0.598138869381, abs=1e-10)
    assert r.accuracy == 1.0
    big = dpo_loss([0.0], [1e4], [0.0], [0.0], beta=1.0)
    assert big.loss == pytest.approx(1e4) and np.isfinite(big.grad_chosen).all()


def test_loss_input_errors():
    with pytest.raises(FloatingPointError):
        dpo_loss([np.nan], [0.0], [0.0], [0.0], 0.1)
    with pytest.raises(ValueError):
        dpo_loss([0.0], [0.0], [0.0], [0.0], -1.0)
    with pytest.raises(ShapeError):
        dpo_loss([0.0, 1.0], [0.0], [0.0], [0.0], 0.1)


@settings(max_examples=200, deadline=None)
@given(finite, finite, finite, finite, st.floats(0.01, 2))
def test_swap_antisymmetry(pc, pr, rc, rr, beta):
    a = dpo_loss([pc], [pr], [rc], [rr], beta)
    b = dpo_loss([pr], [pc], [rr], [rc], beta)
    assert b.margins[0] == pytest.approx(-a.margins[0], abs=1e-12)
    # loss(m) - loss(-m) = -m
    assert a.loss - b.loss == pytest.approx(-a.margins[0], abs=1e-9)
    assert a.grad_chosen[0] == -a.grad_rejected[0]
    assert a.grad_chosen[0] <= 0


@settings(max_examples=100, deadline=None)
@given(finite, finite, st.floats(0.01, 2), st.floats(0.01, 5))
def test_loss_decreases_with_chosen_logprob(pc, pr, beta, delta):
    lo = dpo_loss([pc], [pr], [0.0], [0.0], beta).loss
    hi = dpo_loss([pc + delta], [pr], [0.0], [0.0], beta).loss
    assert hi <= lo


def test_reference_cache(small_params, ragged_samples):
    batches = build_batches(ragged_samples, "shared", False, bsz=4)
    cache = reference_logprobs(small_params, batches, block_size=4)
    assert len(cache) == 6 and 5 in cache
    again = reference_logprobs(small_params, batches, block_size=4)
    assert cache.values == again.values
    paired = reference_logprobs(small_params, build_batches(ragged_samples, "paired", False, bsz=4), 4)
    c = np.array([cache.values[i] for i in range(6)])
    p = np.array([paired.values[i] for i in range(6)])
    assert max_abs(c, p) < 1e-12
    with pytest.raises(CacheMissError):
        ReferenceCache({0: (0.0, 0.0)}).lookup([0, 3])


def test_beta_zero_leaves_policy_unchanged(small_params, sample):
    _, batch = paired_and_shared_batches(sample)
    cache = reference_logprobs(small_params, [batch], 4)
    new, result = train_step(small_params, cache, batch, 0.0, SGD(0.5), 4)
    assert result.loss == pytest.approx(math.log(2))
    assert all(np.array_equal(new[k], small_params[k]) for k in new.names())


def test_identical_policy_gives_ln2(small_params, sample):
    _, batch = paired_and_shared_batches(sample)
    cache = reference_logprobs(small_params, [batch], 4)
    result, _ = loss_and_grads(small_params, cache, batch, 0.1, 4)
    assert result.loss == pytest.approx(math.log(2), abs=1e-12)
    assert result.mean_margin == 0


def test_training_reduces_single_sample_loss(small_params, sample):
    _, batch = paired_and_shared_batches(sample)
    cache = reference_logprobs(small_params, [batch], 4)
    opt = AdamW(1e-2)
    params, losses = small_params, []
    for _ in range(10):
        params, r = train_step(params, cache, batch, 0.5, opt, 4)
        losses.append(r.loss)
    assert losses[-1] < losses[0] - 0.05


def test_paired_and_shared_steps_agree(small_params, ragged_samples):
    bp = build_batches(ragged_samples, "paired", False, bsz=3)
    bs = build_batches(ragged_samples, "shared", False, bsz=3)
    cache = reference_logprobs(small_params, bp, 4)
    pp, ps = small_params, small_params.copy()
    op, os_ = AdamW(1e-2), AdamW(1e-2)
    for k in range(4):
        pp, rp = train_step(pp, cache, bp[k % 2], 0.1, op, 4)
        ps, rs = train_step(ps, cache, bs[k % 2], 0.1, os_, 4)
        assert abs(rp.loss - rs.loss) < 1e-12
    assert max(max_abs(pp[k], ps[k]) for k in pp.names()) < 1e-10


def test_batch_logprobs_predicate_override(small_params, sample):
    from prefix_dpo.masks import bind

    _, batch = paired_and_shared_batches(sample)
    good = batch_logprobs(small_params, batch, 4)
    leaky = batch_logprobs(small_params, batch, 4, predicate=bind("causal", batch.mask_inputs))
    assert good.chosen[0] == leaky.chosen[0]
    assert good.rejected[0] != leaky.rejected[0]


def test_metrics_logger(tmp_path):
    log = MetricsLogger(str(tmp_path / "m.jsonl"))
    r = dpo_loss([1.0, 0.0], [0.0, 1.0], [0.0, 0.0], [0.0, 0.0], 1.0)
    log.log(1, r, 20, 0.5)
    log.log(2, r, 20, 0.5)
    lines = [json.loads(x) for x in (tmp_path / "m.jsonl").read_text().splitlines()]
    assert [x["step"] for x in lines] == [1, 2]
    assert set(lines[0]) == {"step", "loss", "accuracy", "mean_margin", "tokens_processed", "samples_per_sec"}
    assert lines[0]["samples_per_sec"] == 4.0 and lines[0]["accuracy"] == 0.5
