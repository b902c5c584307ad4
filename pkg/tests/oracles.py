"""Slow reference computations shared by the unit and acceptance tests."""

import numpy as np

from prefix_dpo.layout import collate, to_paired, to_shared
from prefix_dpo.model import backward, forward


ACCEPTANCE: list[str] = []


def record(number, title, passed, detail):
    """Log one acceptance line, printed again in the terminal summary."""
    line = f"criterion {number} {'PASS' if passed else 'FAIL'}: {title} ({detail})"
    ACCEPTANCE.append(line)
    print(line)
    return passed


def max_abs(a, b):
    return float(np.max(np.abs(np.asarray(a) - np.asarray(b))))


def fd_gradient_errors(params, loss_fn, grads, eps=1e-6, probe=6, seed=0, floor=1e-6):
    """Max relative error per tensor between ``grads`` and central differences of ``loss_fn``.

    ``probe`` is the number of random entries checked per tensor, or ``"all"``.
    Relative error is ``|a - f| / max(|a|, |f|, floor)``.
    """
    rng = np.random.default_rng(seed)
    errors = {}
    for name, w in params.tensors.items():
        flat = range(w.size) if probe == "all" else rng.integers(w.size, size=probe)
        worst = 0.0
        for idx in flat:
            plus, minus = params.copy(), params.copy()
            plus.tensors[name].flat[idx] += eps
            minus.tensors[name].flat[idx] -= eps
            fd = (loss_fn(plus) - loss_fn(minus)) / (2 * eps)
            an = grads[name].flat[idx]
            worst = max(worst, abs(fd - an) / max(abs(fd), abs(an), floor))
        errors[name] = worst
    return errors


def logit_probe_loss(params, batch, block_size=4, seed=0):
    """``(loss_fn, grads)`` for the scalar ``sum(logits * R)`` with a fixed random ``R``."""
    mask = batch.block_mask(block_size)
    logits, cache = forward(params, batch.tokens, batch.position_ids, mask)
    R = np.random.default_rng(seed).standard_normal(logits.shape)

    def loss_fn(p):
        return float(np.sum(forward(p, batch.tokens, batch.position_ids, mask)[0] * R))

    return loss_fn, backward(params, cache, R)


def paired_and_shared_batches(sample, index=0):
    return collate(list(to_paired(sample, index))), collate([to_shared(sample, index)])
