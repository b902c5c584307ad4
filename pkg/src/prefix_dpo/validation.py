"""Input coercion for the estimator API."""

from __future__ import annotations

from collections.abc import Mapping, Sequence

import numpy as np

from .errors import DataError
from .layout import PreferenceSample


def check_samples(X, allow_empty: bool = False) -> list[PreferenceSample]:
    """Coerce ``X`` to a list of :class:`PreferenceSample`.

    Accepts samples, mappings with ``prompt``/``chosen``/``rejected`` keys, or
    ``(prompt, chosen, rejected)`` triples.
    """
    if isinstance(X, (str, bytes)) or not isinstance(X, Sequence):
        try:
            X = list(X)
        except TypeError:
            raise DataError(f"expected a sequence of preference samples, got {type(X).__name__}") from None
    out = []
    for i, item in enumerate(X):
        try:
            if isinstance(item, PreferenceSample):
                out.append(item)
            elif isinstance(item, Mapping):
                out.append(PreferenceSample(item["prompt"], item["chosen"], item["rejected"]))
            else:
                prompt, chosen, rejected = item
                out.append(PreferenceSample(prompt, chosen, rejected))
        except (KeyError, TypeError, ValueError) as exc:
            raise DataError(f"sample {i}: {exc}") from None
    if not out and not allow_empty:
        raise DataError("empty dataset")
    return out


def check_lengths(X) -> np.ndarray:
    arr = np.asarray(X)
    if arr.ndim != 1 or arr.size == 0:
        raise DataError("expected a non-empty 1-D sequence of lengths")
    if not np.issubdtype(arr.dtype, np.integer):
        if not np.all(arr == np.round(arr)):
            raise DataError("lengths must be integers")
        arr = arr.astype(np.int64)
    if np.any(arr < 1):
        raise DataError("lengths must be >= 1")
    return arr.astype(np.int64)


def check_vocab(samples: Sequence[PreferenceSample], vocab_size: int) -> None:
    top = max((max(s.prompt + s.chosen + s.rejected) for s in samples), default=-1)
    if top >= vocab_size:
        raise DataError(f"token ID {top} is outside the model vocabulary ({vocab_size})")
