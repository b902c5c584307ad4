"""Completion log-probabilities, the DPO objective and the training step."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Iterable

import numpy as np

from . import numerics as nx
from .errors import CacheMissError, DataError, ShapeError
from .layout import CHOSEN, REJECTED, Batch
from .masks import DEFAULT_BLOCK_SIZE
from .model import ModelParams, backward, forward


@dataclass
class LogProbs:
    """Per-sample sums of completion-token log-probs, ordered by ``sample_ids``."""

    sample_ids: np.ndarray
    chosen: np.ndarray
    rejected: np.ndarray

    def as_dict(self) -> dict[int, tuple[float, float]]:
        return {int(s): (float(c), float(r))
                for s, c, r in zip(self.sample_ids, self.chosen, self.rejected)}


def _gathered(logits: np.ndarray, batch: Batch) -> np.ndarray:
    if logits.ndim != 3 or logits.shape[:2] != batch.shape:
        raise ShapeError(f"logits {logits.shape} do not match batch {batch.shape}")
    if batch.target_ids.size and batch.target_ids.max() >= logits.shape[-1]:
        raise ShapeError(f"target token {batch.target_ids.max()} outside vocabulary {logits.shape[-1]}")
    return logits[batch.target_rows, batch.target_positions]


def completion_logprobs(logits: np.ndarray, batch: Batch) -> LogProbs:
    """Sum ``log softmax(logit)[target]`` over each sample's chosen and rejected tokens.

    Sums are accumulated in float64 in gather order.
    """
    rows = _gathered(logits, batch)
    lsm = nx.log_softmax(rows)
    token_lp = lsm[np.arange(len(rows)), batch.target_ids].astype(np.float64)
    sample_ids = np.array(sorted({s.sample for r in batch.rows for s in r.spans}), dtype=np.int64)
    idx = np.searchsorted(sample_ids, batch.target_sample)
    out = []
    for branch in (CHOSEN, REJECTED):
        sel = batch.target_branch == branch
        counts = np.bincount(idx[sel], minlength=len(sample_ids))
        if np.any(counts == 0):
            missing = sample_ids[counts == 0].tolist()
            name = "chosen" if branch == CHOSEN else "rejected"
            raise DataError(f"no scorable {name} tokens for sample(s) {missing}")
        acc = np.zeros(len(sample_ids))
        np.add.at(acc, idx[sel], token_lp[sel])
        out.append(acc)
    return LogProbs(sample_ids, out[0], out[1])


def logprob_backward(logits: np.ndarray, batch: Batch, lp: LogProbs,
                     grad_chosen: np.ndarray, grad_rejected: np.ndarray) -> np.ndarray:
    """``dloss/dlogits`` given ``dloss/d(sum log-prob)`` per sample and branch."""
    rows = _gathered(logits, batch)
    probs = np.exp(nx.log_softmax(rows))
    idx = np.searchsorted(lp.sample_ids, batch.target_sample)
    coef = np.where(batch.target_branch == CHOSEN, np.asarray(grad_chosen)[idx],
                    np.asarray(grad_rejected)[idx]).astype(logits.dtype)
    d = -probs * coef[:, None]
    d[np.arange(len(rows)), batch.target_ids] += coef
    dlogits = np.zeros_like(logits)
    np.add.at(dlogits, (batch.target_rows, batch.target_positions), d)
    return dlogits


@dataclass
class DpoBatchResult:
    sample_ids: np.ndarray
    policy_logp_chosen: np.ndarray
    policy_logp_rejected: np.ndarray
    ref_logp_chosen: np.ndarray
    ref_logp_rejected: np.ndarray
    margins: np.ndarray
    losses: np.ndarray
    loss: float
    accuracy: float
    grad_chosen: np.ndarray
    grad_rejected: np.ndarray

    @property
    def mean_margin(self) -> float:
        return float(np.mean(self.margins))


def dpo_loss(policy_c, policy_r, ref_c, ref_r, beta: float, sample_ids=None) -> DpoBatchResult:
    """Mean over samples of ``-log sigmoid(beta * (chosen log-ratio - rejected log-ratio))``.

    The gradients are w.r.t. the policy log-probs only; reference values are
    constants.
    """
    arrays = [np.asarray(a, dtype=np.float64).reshape(-1) for a in (policy_c, policy_r, ref_c, ref_r)]
    pc, pr, rc, rr = arrays
    if len({a.shape for a in arrays}) != 1 or pc.size == 0:
        raise ShapeError("dpo_loss inputs must be equal-length, non-empty")
    if not all(np.all(np.isfinite(a)) for a in arrays) or not np.isfinite(beta):
        raise FloatingPointError("dpo_loss received non-finite input")
    if beta < 0:
        raise ValueError("beta must be >= 0")
    margins = beta * ((pc - rc) - (pr - rr))
    losses = np.logaddexp(0.0, -margins)
    n = len(margins)
    # d/dm of -log sigmoid(m) is -sigmoid(-m)
    dm = -np.exp(-np.logaddexp(0.0, margins)) / n
    return DpoBatchResult(
        sample_ids=np.arange(n) if sample_ids is None else np.asarray(sample_ids),
        policy_logp_chosen=pc, policy_logp_rejected=pr, ref_logp_chosen=rc, ref_logp_rejected=rr,
        margins=margins, losses=losses, loss=float(losses.mean()),
        accuracy=float(np.mean(margins > 0)),
        grad_chosen=beta * dm, grad_rejected=-beta * dm,
    )


def batch_logprobs(params: ModelParams, batch: Batch, block_size: int = DEFAULT_BLOCK_SIZE,
                   predicate=None) -> LogProbs:
    mask = batch.block_mask(block_size, predicate)
    logits, _ = forward(params, batch.tokens, batch.position_ids, mask)
    return completion_logprobs(logits, batch)


class ReferenceCache:
    """Frozen reference log-probs keyed by dataset sample index."""

    def __init__(self, values: dict[int, tuple[float, float]] | None = None):
        self.values: dict[int, tuple[float, float]] = dict(values or {})

    def __len__(self) -> int:
        return len(self.values)

    def __contains__(self, index) -> bool:
        return int(index) in self.values

    def update(self, lp: LogProbs) -> None:
        self.values.update(lp.as_dict())

    def lookup(self, sample_ids) -> tuple[np.ndarray, np.ndarray]:
        missing = [int(s) for s in sample_ids if int(s) not in self.values]
        if missing:
            raise CacheMissError(f"reference log-probs missing for sample(s) {missing}")
        pairs = np.array([self.values[int(s)] for s in sample_ids], dtype=np.float64)
        return pairs[:, 0], pairs[:, 1]


def reference_logprobs(ref_params: ModelParams, batches: Iterable[Batch],
                       block_size: int = DEFAULT_BLOCK_SIZE) -> ReferenceCache:
    cache = ReferenceCache()
    for batch in batches:
        cache.update(batch_logprobs(ref_params, batch, block_size))
    return cache


def train_step(policy: ModelParams, ref_cache: ReferenceCache, batch: Batch, beta: float,
               optimizer, block_size: int = DEFAULT_BLOCK_SIZE):
    """Forward, DPO loss, backward and one optimizer update.

    Returns ``(new_policy, DpoBatchResult)``.
    """
    result, grads = loss_and_grads(policy, ref_cache, batch, beta, block_size)
    return optimizer.step(policy, grads), result


def loss_and_grads(policy: ModelParams, ref_cache: ReferenceCache, batch: Batch, beta: float,
                   block_size: int = DEFAULT_BLOCK_SIZE):
    """The DPO loss of one batch and its exact parameter gradients (no update)."""
    mask = batch.block_mask(block_size)
    logits, cache = forward(policy, batch.tokens, batch.position_ids, mask)
    lp = completion_logprobs(logits, batch)
    ref_c, ref_r = ref_cache.lookup(lp.sample_ids)
    result = dpo_loss(lp.chosen, lp.rejected, ref_c, ref_r, beta, lp.sample_ids)
    dlogits = logprob_backward(logits, batch, lp, result.grad_chosen, result.grad_rejected)
    return result, backward(policy, cache, dlogits)


@dataclass
class MetricsLogger:
    """Writes one JSON object per training step."""

    path: str | None = None
    records: list = field(default_factory=list)

    def log(self, step: int, result: DpoBatchResult, tokens: int, seconds: float) -> dict:
        rec = {
            "step": step,
            "loss": result.loss,
            "accuracy": result.accuracy,
            "mean_margin": result.mean_margin,
            "tokens_processed": int(tokens),
            "samples_per_sec": len(result.margins) / seconds if seconds > 0 else float("inf"),
        }
        self.records.append(rec)
        if self.path is not None:
            with open(self.path, "a", encoding="utf-8") as fh:
                fh.write(json.dumps(rec) + "\n")
        return rec

