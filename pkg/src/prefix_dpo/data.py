"""JSON-Lines preference datasets and the two built-in toy tokenizers."""

from __future__ import annotations

import json
from pathlib import Path
from typing import Iterable

import numpy as np

from .errors import DataError
from .layout import PreferenceSample

FIELDS = ("prompt", "chosen", "rejected")


class ByteTokenizer:
    """UTF-8 bytes as token IDs (vocab 256)."""

    vocab_size = 256

    def fit(self, texts: Iterable[str]) -> "ByteTokenizer":
        return self

    def encode(self, text: str) -> list[int]:
        return list(text.encode("utf-8"))


class WhitespaceTokenizer:
    """Whitespace-split words, IDs assigned in order of first appearance.

    ID 0 is reserved for padding and 1 for unknown words.
    """

    PAD, UNK = 0, 1

    def __init__(self):
        self.vocab: dict[str, int] = {}

    @property
    def vocab_size(self) -> int:
        return len(self.vocab) + 2

    def fit(self, texts: Iterable[str]) -> "WhitespaceTokenizer":
        for text in texts:
            for word in text.split():
                if word not in self.vocab:
                    self.vocab[word] = len(self.vocab) + 2
        return self

    def encode(self, text: str) -> list[int]:
        return [self.vocab.get(w, self.UNK) for w in text.split()]


TOKENIZERS = {"byte": ByteTokenizer, "whitespace": WhitespaceTokenizer}


def _read_records(path) -> list[dict]:
    path = Path(path)
    if not path.exists():
        raise DataError(f"dataset not found: {path}")
    records = []
    with path.open(encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DataError(f"{path}:{lineno}: invalid JSON ({exc.msg})") from None
            if not isinstance(obj, dict) or any(k not in obj for k in FIELDS):
                raise DataError(f"{path}:{lineno}: expected an object with keys {FIELDS}")
            records.append((lineno, obj))
    return records


def load_jsonl(path, tokenizer: str | None = None) -> list[PreferenceSample]:
    """Load a dataset; text fields require ``tokenizer`` ('byte' or 'whitespace')."""
    records = _read_records(path)
    tok = None
    if any(isinstance(obj[k], str) for _, obj in records for k in FIELDS):
        if tokenizer is None:
            raise DataError(f"{path}: text fields found; pass a tokenizer ('byte' or 'whitespace')")
        try:
            tok = TOKENIZERS[tokenizer]()
        except KeyError:
            raise DataError(f"unknown tokenizer {tokenizer!r}") from None
        tok.fit(obj[k] for _, obj in records for k in FIELDS if isinstance(obj[k], str))
    samples = []
    for lineno, obj in records:
        fields = []
        for k in FIELDS:
            value = obj[k]
            if isinstance(value, str):
                value = tok.encode(value)
            elif not isinstance(value, list):
                raise DataError(f"{path}:{lineno}: field {k!r} must be a list of ints or a string")
            fields.append(value)
        try:
            samples.append(PreferenceSample(*fields))
        except DataError as exc:
            raise DataError(f"{path}:{lineno}: {exc}") from None
    return samples


def save_jsonl(samples: Iterable[PreferenceSample], path) -> None:
    with Path(path).open("w", encoding="utf-8") as fh:
        for s in samples:
            fh.write(json.dumps({"prompt": list(s.prompt), "chosen": list(s.chosen),
                                 "rejected": list(s.rejected)}) + "\n")


def _draw(rng, spec) -> int:
    if isinstance(spec, int):
        return spec
    lo, hi = spec
    return int(rng.integers(lo, hi + 1))


def synthetic_dataset(n: int, prompt_len=16, chosen_len=8, rejected_len=None,
                      vocab_size: int = 64, seed: int = 0, min_token: int = 1) -> list[PreferenceSample]:
    """Random token samples; each length is an int or an inclusive ``(lo, hi)`` range.

    Token IDs are drawn from ``[min_token, vocab_size)`` so ID 0 stays free for padding.
    """
    rng = np.random.default_rng(seed)
    rejected_len = chosen_len if rejected_len is None else rejected_len
    out = []
    for _ in range(n):
        p, c1, c2 = _draw(rng, prompt_len), _draw(rng, chosen_len), _draw(rng, rejected_len)
        draw = lambda k: rng.integers(min_token, vocab_size, size=k).tolist()
        out.append(PreferenceSample(draw(p), draw(c1), draw(c2)))
    return out
