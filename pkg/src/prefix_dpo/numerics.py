"""Dense numeric kernels used by the toy transformer and its backward pass.

Everything here is a pure function of its inputs. Arrays are plain
``numpy.ndarray`` in either float32 (throughput mode) or float64 (the
correctness oracle). The process runs BLAS single-threaded, so matmul results
are reproducible bit-for-bit for identical shapes.
"""

from __future__ import annotations

import numpy as np

from .errors import ConfigError, InvariantError, ShapeError

RMS_EPS = 1e-6
ROPE_THETA = 10000.0

_PRECISIONS = {
    "f32": np.float32,
    "float32": np.float32,
    "f64": np.float64,
    "float64": np.float64,
}


def resolve_dtype(precision) -> np.dtype:
    """Map ``"f32"``/``"f64"`` (or a numpy dtype) to a numpy float dtype."""
    if isinstance(precision, str):
        try:
            return np.dtype(_PRECISIONS[precision.lower()])
        except KeyError:
            raise ConfigError(f"unknown precision {precision!r}; use f32 or f64") from None
    dtype = np.dtype(precision)
    if dtype not in (np.dtype(np.float32), np.dtype(np.float64)):
        raise ConfigError(f"unsupported dtype {dtype}")
    return dtype


def check_finite(name: str, arr: np.ndarray) -> None:
    if not np.all(np.isfinite(arr)):
        bad = int(np.size(arr) - np.count_nonzero(np.isfinite(arr)))
        raise FloatingPointError(f"{name}: {bad} non-finite value(s)")


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    a = np.asarray(a)
    b = np.asarray(b)
    if a.ndim < 1 or b.ndim < 1 or a.shape[-1] != (b.shape[-2] if b.ndim > 1 else b.shape[0]):
        raise ShapeError(f"matmul shape mismatch: {a.shape} x {b.shape}")
    return a @ b


def masked_softmax(scores: np.ndarray, allowed: np.ndarray) -> np.ndarray:
    """Softmax over the last axis restricted to ``allowed`` entries.

    Disallowed entries get probability exactly 0. A row with no allowed entry
    raises :class:`InvariantError`: every valid attention layout lets a token
    see at least itself.
    """
    scores = np.asarray(scores)
    allowed = np.broadcast_to(np.asarray(allowed, dtype=bool), scores.shape)
    if not np.all(allowed.any(axis=-1)):
        raise InvariantError("masked softmax row with no allowed entries")
    neg = np.where(allowed, scores, -np.inf)
    shifted = neg - neg.max(axis=-1, keepdims=True)
    e = np.exp(shifted)  # exp(-inf) == 0 exactly
    return e / e.sum(axis=-1, keepdims=True)


def masked_softmax_row(scores, allowed) -> np.ndarray:
    scores = np.asarray(scores, dtype=float)
    allowed = np.asarray(allowed, dtype=bool)
    if scores.shape != allowed.shape or scores.ndim != 1:
        raise ShapeError("scores and allowed must be 1-D arrays of equal length")
    return masked_softmax(scores, allowed)


def softmax_backward(probs: np.ndarray, dprobs: np.ndarray) -> np.ndarray:
    """Gradient w.r.t. the pre-softmax scores; masked entries get zero."""
    return probs * (dprobs - (dprobs * probs).sum(axis=-1, keepdims=True))


def log_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def rms_norm(x: np.ndarray, gain: np.ndarray, eps: float = RMS_EPS) -> np.ndarray:
    x = np.asarray(x)
    gain = np.asarray(gain)
    if x.shape[-1] != gain.shape[-1]:
        raise ShapeError(f"rms_norm: x has width {x.shape[-1]}, gain {gain.shape[-1]}")
    inv = 1.0 / np.sqrt(np.mean(x * x, axis=-1, keepdims=True) + eps)
    return x * inv * gain


def rms_norm_backward(x, gain, dy, eps: float = RMS_EPS):
    """Return ``(dx, dgain)``; ``dgain`` is summed over all leading axes."""
    d = x.shape[-1]
    inv = 1.0 / np.sqrt(np.mean(x * x, axis=-1, keepdims=True) + eps)
    gdy = dy * gain
    dx = inv * gdy - x * inv**3 * (gdy * x).sum(axis=-1, keepdims=True) / d
    dgain = (dy * x * inv).reshape(-1, d).sum(axis=0)
    return dx, dgain


def silu(x: np.ndarray) -> np.ndarray:
    return x / (1.0 + np.exp(-x))


def swiglu(gate: np.ndarray, up: np.ndarray) -> np.ndarray:
    """Gated MLP activation ``silu(gate) * up``."""
    return silu(gate) * up


def swiglu_backward(gate, up, dout):
    sig = 1.0 / (1.0 + np.exp(-gate))
    dsilu = sig * (1.0 + gate * (1.0 - sig))
    return dout * up * dsilu, dout * gate * sig


def rope_frequencies(head_dim: int, theta_base: float = ROPE_THETA) -> np.ndarray:
    if head_dim % 2:
        raise ConfigError(f"rotary embedding needs an even head dim, got {head_dim}")
    return theta_base ** (-np.arange(0, head_dim, 2, dtype=np.float64) / head_dim)


def rope_apply(x, positions, theta_base: float = ROPE_THETA, inverse: bool = False):
    """Rotate the two halves of the last axis of ``x`` by position-dependent angles.

    ``positions`` broadcasts against ``x.shape[:-1]``. Angles are computed in
    float64 and cast to ``x``'s dtype. ``inverse=True`` applies the transpose
    rotation, which is also the backward pass.
    """
    x = np.asarray(x)
    half = x.shape[-1] // 2
    freqs = rope_frequencies(x.shape[-1], theta_base)
    angles = np.asarray(positions, dtype=np.float64)[..., None] * freqs
    cos = np.cos(angles).astype(x.dtype, copy=False)
    sin = np.sin(angles).astype(x.dtype, copy=False)
    if inverse:
        sin = -sin
    x1, x2 = x[..., :half], x[..., half:]
    return np.concatenate([x1 * cos - x2 * sin, x1 * sin + x2 * cos], axis=-1)
