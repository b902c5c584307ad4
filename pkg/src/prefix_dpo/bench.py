"""Fixed-step training throughput comparison across row formats."""

from __future__ import annotations

import time
import tracemalloc
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .analytics import ThroughputReport, throughput_report
from .dpo import ReferenceCache, batch_logprobs, reference_logprobs, train_step
from .layout import PreferenceSample
from .masks import DEFAULT_BLOCK_SIZE
from .model import AdamW, ModelConfig, init
from .packing import build_batches

DEFAULT_CONFIGS = (("paired", False), ("shared", False), ("paired", True), ("shared", True))
WARMUP_STEPS = 3


def config_name(fmt: str, packing: bool) -> str:
    return f"{fmt}+packing" if packing else fmt


@dataclass
class BenchResult:
    name: str
    samples_per_sec: float
    step_seconds: list[float]
    tokens_per_sample: float
    peak_bytes: int | None = None


def bench_config(samples: Sequence[PreferenceSample], model_config: ModelConfig, fmt: str,
                 packing: bool, steps: int, bsz: int = 2, warmup: int = WARMUP_STEPS,
                 beta: float = 0.1, lr: float = 1e-4, block_size: int = DEFAULT_BLOCK_SIZE,
                 ref_mode: str = "cached", measure_memory: bool = False) -> BenchResult:
    """Run ``steps`` DPO steps and report the median samples/sec after warmup.

    ``ref_mode="cached"`` precomputes reference log-probs outside the timed
    region; ``"live"`` runs the reference forward inside every timed step.
    """
    if steps <= warmup:
        raise ValueError(f"steps ({steps}) must exceed the {warmup} warmup steps")
    if ref_mode not in ("cached", "live"):
        raise ValueError("ref_mode must be 'cached' or 'live'")
    ref = init(model_config)
    policy = ref.copy()
    batches = build_batches(samples, fmt, packing, bsz)
    cache = reference_logprobs(ref, batches, block_size) if ref_mode == "cached" else None
    opt = AdamW(lr)
    rates, times = [], []
    for step in range(steps):
        batch = batches[step % len(batches)]
        t0 = time.perf_counter()
        if ref_mode == "live":
            cache = ReferenceCache()
            cache.update(batch_logprobs(ref, batch, block_size))
        policy, _ = train_step(policy, cache, batch, beta, opt, block_size)
        dt = time.perf_counter() - t0
        if step >= warmup:
            times.append(dt)
            rates.append(batch.num_samples / dt)
    tokens = sum(b.num_tokens for b in batches)
    peak = None
    if measure_memory:
        tracemalloc.start()
        train_step(policy, cache if cache is not None else reference_logprobs(ref, batches[:1], block_size),
                   batches[0], beta, opt, block_size)
        peak = tracemalloc.get_traced_memory()[1]
        tracemalloc.stop()
    return BenchResult(config_name(fmt, packing), float(np.median(rates)), times,
                       tokens / len(samples), peak)


def run_bench(samples: Sequence[PreferenceSample], model_config: ModelConfig,
              configs=DEFAULT_CONFIGS, **kwargs) -> tuple[ThroughputReport, list[BenchResult]]:
    results = [bench_config(samples, model_config, fmt, packing, **kwargs) for fmt, packing in configs]
    extra = {}
    for r in results:
        extra[r.name] = {"tokens_per_sample": r.tokens_per_sample}
        if r.peak_bytes is not None:
            extra[r.name]["peak_bytes"] = r.peak_bytes
    report = throughput_report({r.name: r.samples_per_sec for r in results}, extra=extra)
    return report, results
