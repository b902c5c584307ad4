"""Paired-vs-shared log-prob equivalence checks."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .dpo import batch_logprobs
from .layout import PreferenceSample
from .masks import DEFAULT_BLOCK_SIZE, bind
from .model import ModelConfig, ModelParams, init
from .packing import build_batches, plan_for

TOLERANCE = {"f64": 1e-10, "f32": 1e-4}
COMBOS = (("paired", False), ("shared", False), ("paired", True), ("shared", True))


def format_logprobs(params: ModelParams, samples: Sequence[PreferenceSample], fmt: str,
                    packing: bool, bsz: int = 2, block_size: int = DEFAULT_BLOCK_SIZE,
                    corrupt: bool = False) -> np.ndarray:
    """``(n, 2)`` log-prob sums of every sample under one row format.

    Packed formats share one FFD grouping (planned on paired units) so both
    formats see the same samples per row. ``corrupt`` swaps shared-row masks
    for plain causal masks, letting rejected tokens see the chosen span; it
    exists as a negative control.
    """
    plan = plan_for(samples, "paired", bsz) if packing else None
    out = np.empty((len(samples), 2))
    for batch in build_batches(samples, fmt, packing, bsz, plan=plan):
        pred = None
        if corrupt and fmt == "shared":
            pred = bind("causal", batch.mask_inputs)
        lp = batch_logprobs(params, batch, block_size, predicate=pred)
        out[lp.sample_ids, 0] = lp.chosen
        out[lp.sample_ids, 1] = lp.rejected
    return out


def format_deviations(params: ModelParams, samples: Sequence[PreferenceSample], bsz: int = 2,
                      block_size: int = DEFAULT_BLOCK_SIZE, corrupt: bool = False) -> dict[str, float]:
    """Max |log-prob - paired unpacked log-prob| for each of the four row formats."""
    base = format_logprobs(params, samples, "paired", False, bsz, block_size)
    devs = {}
    for fmt, packing in COMBOS:
        lp = format_logprobs(params, samples, fmt, packing, bsz, block_size, corrupt)
        devs[f"{fmt}{'+packing' if packing else ''}"] = float(np.max(np.abs(lp - base)))
    return devs


@dataclass
class VerifyReport:
    precision: str
    tolerance: float
    n_models: int
    n_samples: int
    max_deviation: dict[str, float] = field(default_factory=dict)

    @property
    def worst(self) -> float:
        return max(self.max_deviation.values())

    @property
    def passed(self) -> bool:
        return self.worst <= self.tolerance

    def to_dict(self) -> dict:
        return {"precision": self.precision, "tolerance": self.tolerance,
                "n_models": self.n_models, "n_samples": self.n_samples,
                "max_deviation": self.max_deviation, "passed": self.passed}


def verify_equivalence(samples: Sequence[PreferenceSample], model_config: ModelConfig,
                       n_models: int = 3, bsz: int = 2, block_size: int = DEFAULT_BLOCK_SIZE,
                       corrupt: bool = False) -> VerifyReport:
    """Run the format comparison over ``n_models`` seeds derived from the config seed."""
    prec = "f32" if model_config.dtype == np.float32 else "f64"
    report = VerifyReport(prec, TOLERANCE[prec], n_models, len(samples))
    for m in range(n_models):
        cfg = ModelConfig(**{**model_config.__dict__, "seed": model_config.seed + m})
        devs = format_deviations(init(cfg), samples, bsz, block_size, corrupt)
        for k, v in devs.items():
            report.max_deviation[k] = max(report.max_deviation.get(k, 0.0), v)
    return report
