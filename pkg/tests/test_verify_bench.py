import pytest

from prefix_dpo.bench import bench_config, run_bench
from prefix_dpo.data import synthetic_dataset
from prefix_dpo.model import ModelConfig
from prefix_dpo.verify import TOLERANCE, verify_equivalence

CFG = ModelConfig(vocab_size=40, d_model=16, n_layers=2, n_heads=2, d_ff=24, init_std=0.3)


def test_verify_passes(ragged_samples):
    report = verify_equivalence(ragged_samples, CFG, n_models=2, bsz=2, block_size=4)
    assert report.passed and report.tolerance == TOLERANCE["f64"]
    assert set(report.max_deviation) == {"paired", "shared", "paired+packing", "shared+packing"}
    assert report.max_deviation["paired"] == 0.0
    assert report.to_dict()["n_models"] == 2


def test_verify_f32(ragged_samples):
    cfg = ModelConfig(**{**CFG.__dict__, "precision": "f32"})
    report = verify_equivalence(ragged_samples, cfg, n_models=1, bsz=2, block_size=4)
    assert report.precision == "f32" and report.passed


def test_verify_detects_leaky_mask(ragged_samples):
    report = verify_equivalence(ragged_samples, CFG, n_models=1, bsz=2, block_size=4, corrupt=True)
    assert not report.passed
    assert report.max_deviation["shared"] > 1e-3


def test_bench_config():
    samples = synthetic_dataset(4, 12, 3, vocab_size=40)
    r = bench_config(samples, CFG, "shared", False, steps=5, bsz=2, warmup=2, measure_memory=True)
    assert len(r.step_seconds) == 3 and r.samples_per_sec > 0
    assert r.tokens_per_sample == 18 and r.peak_bytes > 0
    live = bench_config(samples, CFG, "paired", True, steps=3, bsz=2, warmup=1, ref_mode="live")
    assert live.name == "paired+packing" and live.tokens_per_sample == 30
    with pytest.raises(ValueError):
        bench_config(samples, CFG, "shared", False, steps=3, warmup=3)
    with pytest.raises(ValueError):
        bench_config(samples, CFG, "shared", False, steps=5, ref_mode="none")


def test_run_bench_table():
    samples = synthetic_dataset(4, 12, 3, vocab_size=40)
    report, results = run_bench(samples, CFG, steps=3, bsz=2, warmup=1, block_size=8)
    assert [r["config"] for r in report.rows] == ["paired", "shared", "paired+packing", "shared+packing"]
    assert report.rows[0]["speedup"] == 1.0
    assert report.rows[1]["tokens_per_sample"] == 18
