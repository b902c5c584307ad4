"""Prefix-shared DPO training at desk scale.

Chosen and rejected completions share one prompt prefix in a single row; a
block-sparse attention mask keeps the two completions from seeing each other,
so log-probs match the usual two-row paired format up to float round-off.
"""

__version__ = "0.1.0"

from .analytics import dataset_stats, ideal_attention_speedup, ideal_linear_speedup, throughput_report
from .dpo import completion_logprobs, dpo_loss, reference_logprobs, train_step
from .estimators import DPOTrainer, FFDPacker, PreferenceBatcher
from .layout import PreferenceSample, collate, next_token_targets, to_paired, to_shared
from .masks import BlockKind, BlockMask, MaskInputs, build_block_mask, block_mask_stats
from .model import ModelConfig, ModelParams, backward, forward, init
from .packing import PackPlan, ffd_pack, materialize_packed, packing_efficiency, unit_length

__all__ = [
    "BlockKind", "BlockMask", "DPOTrainer", "FFDPacker", "MaskInputs", "ModelConfig",
    "ModelParams", "PackPlan", "PreferenceBatcher", "PreferenceSample", "backward",
    "block_mask_stats", "build_block_mask", "collate", "completion_logprobs", "dataset_stats",
    "dpo_loss", "ffd_pack", "forward", "ideal_attention_speedup", "ideal_linear_speedup", "init",
    "materialize_packed", "next_token_targets", "packing_efficiency", "reference_logprobs",
    "throughput_report", "to_paired", "to_shared", "train_step", "unit_length",
]
