import json

import pytest

from prefix_dpo.data import ByteTokenizer, WhitespaceTokenizer, load_jsonl, save_jsonl, synthetic_dataset
from prefix_dpo.errors import DataError
from prefix_dpo.layout import PreferenceSample


def write_lines(path, lines):
    path.write_text("\n".join(lines) + "\n")
    return path


def test_load_token_ids(tmp_path):
    path = write_lines(tmp_path / "d.jsonl", [
        json.dumps({"prompt": [1, 2], "chosen": [3], "rejected": [4, 5]}),
        "",
        json.dumps({"prompt": [], "chosen": [6], "rejected": [7]}),
    ])
    assert load_jsonl(path) == [PreferenceSample([1, 2], [3], [4, 5]), PreferenceSample([], [6], [7])]


def test_round_trip(tmp_path, ragged_samples):
    save_jsonl(ragged_samples, tmp_path / "r.jsonl")
    assert load_jsonl(tmp_path / "r.jsonl") == ragged_samples


def test_text_requires_tokenizer(tmp_path):
    path = write_lines(tmp_path / "t.jsonl", [json.dumps({"prompt": "a b", "chosen": "c", "rejected": "b a"})])
    with pytest.raises(DataError, match="tokenizer"):
        load_jsonl(path)
    (s,) = load_jsonl(path, "whitespace")
    assert s.prompt == (s.rejected[1], s.rejected[0])
    assert min(s.prompt + s.chosen) >= 2
    (b,) = load_jsonl(path, "byte")
    assert len(b.prompt) == 3


def test_tokenizers():
    assert ByteTokenizer().encode("A\u00e9") == [65, 0xC3, 0xA9]
    tok = WhitespaceTokenizer().fit(["x y", "y z"])
    assert tok.encode("z x q") == [tok.encode("z")[0], tok.encode("x")[0], 1]
    assert tok.vocab_size == 5


def test_malformed_line_is_named(tmp_path):
    path = write_lines(tmp_path / "bad.jsonl", [
        json.dumps({"prompt": [1], "chosen": [2], "rejected": [3]}),
        "{not json",
    ])
    with pytest.raises(DataError, match=r"bad\.jsonl:2"):
        load_jsonl(path)
    write_lines(path, [json.dumps({"prompt": [1], "chosen": [2]})])
    with pytest.raises(DataError, match=":1"):
        load_jsonl(path)
    write_lines(path, [json.dumps({"prompt": [1], "chosen": [], "rejected": [3]})])
    with pytest.raises(DataError, match=":1"):
        load_jsonl(path)


def test_missing_file(tmp_path):
    with pytest.raises(DataError, match="not found"):
        load_jsonl(tmp_path / "nope.jsonl")


def test_synthetic_dataset():
    a = synthetic_dataset(5, prompt_len=(0, 3), chosen_len=2, rejected_len=(1, 4), vocab_size=10, seed=1)
    assert a == synthetic_dataset(5, prompt_len=(0, 3), chosen_len=2, rejected_len=(1, 4), vocab_size=10, seed=1)
    assert all(len(s.chosen) == 2 and 1 <= len(s.rejected) <= 4 and len(s.prompt) <= 3 for s in a)
    assert all(1 <= t < 10 for s in a for t in s.prompt + s.chosen + s.rejected)
