"""Command-line entry point: ``prefix-dpo {stats,pack-plan,verify,bench,train}``.

Effective settings are resolved as CLI flags > ``--config`` JSON file >
built-in defaults and echoed to stderr before the command runs.

Exit codes: 0 success, 2 configuration error, 3 data error,
4 verification failure.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from . import __version__
from .analytics import dataset_stats
from .bench import DEFAULT_CONFIGS, WARMUP_STEPS, run_bench
from .data import load_jsonl, synthetic_dataset
from .errors import ConfigError, DataError
from .estimators import DPOTrainer
from .layout import truncate_sample
from .model import ModelConfig
from .packing import ffd_pack, packing_capacity, unit_length
from .verify import verify_equivalence

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_VERIFY = 0, 2, 3, 4

DEFAULTS = {
    "dataset": None,
    "synthetic": None,
    "tokenizer": None,
    "format": "shared",
    "packing": False,
    "bsz": 4,
    "capacity": None,
    "max_prompt_len": None,
    "max_seq_len": None,
    "beta": 0.1,
    "lr": 1e-3,
    "optimizer": "adamw",
    "steps": 50,
    "seed": 0,
    "precision": "f64",
    "block_size": 128,
    "vocab_size": None,
    "d_model": 32,
    "n_layers": 2,
    "n_heads": 4,
    "d_ff": 64,
    "init_std": 0.02,
    "out": None,
    "report": "md",
    "metrics": None,
    "resume": None,
    "n_models": 3,
    "k_samples": 16,
    "dump_mask": None,
    "corrupt_mask": False,
    "warmup": WARMUP_STEPS,
    "ref_mode": "cached",
    "overall_len": "paired_row",
    "ratio": "mean",
}


def _add_common(p: argparse.ArgumentParser) -> None:
    S = argparse.SUPPRESS
    p.add_argument("--config", help="JSON file of settings (overridden by flags)")
    p.add_argument("--dataset", default=S, help="JSONL preference dataset")
    p.add_argument("--synthetic", default=S, metavar="N,P,C",
                   help="use N random samples with prompt length P and completion length C")
    p.add_argument("--tokenizer", default=S, choices=["byte", "whitespace"])
    p.add_argument("--format", default=S, choices=["paired", "shared"])
    p.add_argument("--packing", default=S, action="store_true")
    p.add_argument("--bsz", default=S, type=int)
    p.add_argument("--max-prompt-len", default=S, type=int)
    p.add_argument("--max-seq-len", default=S, type=int)
    p.add_argument("--beta", default=S, type=float)
    p.add_argument("--lr", default=S, type=float)
    p.add_argument("--steps", default=S, type=int)
    p.add_argument("--seed", default=S, type=int)
    p.add_argument("--precision", default=S, choices=["f32", "f64"])
    p.add_argument("--block-size", default=S, type=int)
    p.add_argument("--vocab-size", default=S, type=int)
    p.add_argument("--d-model", default=S, type=int)
    p.add_argument("--n-layers", default=S, type=int)
    p.add_argument("--n-heads", default=S, type=int)
    p.add_argument("--d-ff", default=S, type=int)
    p.add_argument("--init-std", default=S, type=float)
    p.add_argument("--out", default=S, help="output path")
    p.add_argument("--report", default=S, choices=["json", "csv", "md"])


def build_parser() -> argparse.ArgumentParser:
    S = argparse.SUPPRESS
    parser = argparse.ArgumentParser(prog="prefix-dpo", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("stats", help="dataset statistics and predicted token reduction")
    _add_common(p)
    p.add_argument("--overall-len", default=S, choices=["paired_row", "mean", "shared"])
    p.add_argument("--ratio", default=S, choices=["mean", "max"])

    p = sub.add_parser("pack-plan", help="FFD packing plan as JSON")
    _add_common(p)
    p.add_argument("--capacity", default=S, type=int, help="override bsz x max unit length")

    p = sub.add_parser("verify", help="paired vs shared log-prob equivalence")
    _add_common(p)
    p.add_argument("--n-models", default=S, type=int)
    p.add_argument("--k-samples", default=S, type=int)
    p.add_argument("--dump-mask", default=S, help="write the first shared batch's block mask as JSON")
    p.add_argument("--corrupt-mask", default=S, action="store_true", help=S)

    p = sub.add_parser("bench", help="training throughput across formats")
    _add_common(p)
    p.add_argument("--warmup", default=S, type=int)
    p.add_argument("--ref-mode", default=S, choices=["cached", "live"])

    p = sub.add_parser("train", help="toy DPO training run")
    _add_common(p)
    p.add_argument("--optimizer", default=S, choices=["adamw", "sgd"])
    p.add_argument("--metrics", default=S, help="append per-step metrics JSONL here")
    p.add_argument("--resume", default=S, help="checkpoint to continue from")
    return parser


def resolve_config(args: argparse.Namespace) -> dict:
    cfg = dict(DEFAULTS)
    cli = vars(args).copy()
    path = cli.pop("config", None)
    if path:
        try:
            loaded = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config file {path}: {exc}") from None
        unknown = set(loaded) - set(DEFAULTS)
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        cfg.update(loaded)
    cfg.update(cli)
    if cfg["bsz"] < 1:
        raise ConfigError("--bsz must be >= 1")
    if cfg["block_size"] < 1:
        raise ConfigError("--block-size must be >= 1")
    return cfg


def load_samples(cfg: dict):
    if cfg["dataset"] and cfg["synthetic"]:
        raise ConfigError("pass either --dataset or --synthetic, not both")
    if cfg["synthetic"]:
        try:
            n, p, c = (int(x) for x in str(cfg["synthetic"]).split(","))
        except ValueError:
            raise ConfigError("--synthetic expects N,P,C") from None
        vocab = cfg["vocab_size"] or 64
        samples = synthetic_dataset(n, p, c, vocab_size=vocab, seed=cfg["seed"])
    elif cfg["dataset"]:
        samples = load_jsonl(cfg["dataset"], cfg["tokenizer"])
    else:
        raise ConfigError("a dataset is required (--dataset or --synthetic)")
    if not samples:
        raise DataError("dataset is empty")
    return [truncate_sample(s, cfg["max_prompt_len"], cfg["max_seq_len"]) for s in samples]


def model_config(cfg: dict, samples) -> ModelConfig:
    vocab = cfg["vocab_size"]
    if vocab is None:
        vocab = max(64, 1 + max(max(s.prompt + s.chosen + s.rejected) for s in samples))
    return ModelConfig(vocab_size=vocab, d_model=cfg["d_model"], n_layers=cfg["n_layers"],
                       n_heads=cfg["n_heads"], d_ff=cfg["d_ff"], precision=cfg["precision"],
                       seed=cfg["seed"], init_std=cfg["init_std"])


def _emit(text: str, out) -> None:
    if out:
        Path(out).write_text(text + "\n")
    print(text)


def cmd_stats(cfg: dict) -> int:
    samples = load_samples(cfg)
    stats = dataset_stats(samples, cfg["overall_len"], cfg["ratio"])
    name = Path(cfg["dataset"]).stem if cfg["dataset"] else "synthetic"
    if cfg["out"]:
        Path(cfg["out"]).write_text(json.dumps(stats.to_dict(), indent=2) + "\n")
    print(json.dumps(stats.to_dict(), indent=2))
    print()
    print(stats.to_markdown(name))
    return EXIT_OK


def cmd_pack_plan(cfg: dict) -> int:
    samples = load_samples(cfg)
    fmt = cfg["format"]
    capacity = cfg["capacity"] or packing_capacity(samples, fmt, cfg["bsz"])
    plan = ffd_pack([unit_length(s, fmt) for s in samples], capacity)
    _emit(json.dumps(plan.to_dict()), cfg["out"])
    return EXIT_OK


def cmd_verify(cfg: dict) -> int:
    samples = load_samples(cfg)[: cfg["k_samples"]]
    mcfg = model_config(cfg, samples)
    report = verify_equivalence(samples, mcfg, cfg["n_models"], cfg["bsz"], cfg["block_size"],
                                corrupt=cfg["corrupt_mask"])
    if cfg["dump_mask"]:
        from .packing import build_batches

        batch = build_batches(samples, "shared", cfg["packing"], cfg["bsz"])[0]
        Path(cfg["dump_mask"]).write_text(batch.block_mask(cfg["block_size"]).to_json() + "\n")
    _emit(json.dumps(report.to_dict(), indent=2), cfg["out"])
    status = "PASS" if report.passed else "FAIL"
    print(f"{status}: max deviation {report.worst:.3e} (tolerance {report.tolerance:.0e})",
          file=sys.stderr)
    return EXIT_OK if report.passed else EXIT_VERIFY


def cmd_bench(cfg: dict) -> int:
    samples = load_samples(cfg)
    if cfg["steps"] <= cfg["warmup"]:
        raise ConfigError(f"--steps ({cfg['steps']}) must exceed --warmup ({cfg['warmup']})")
    report, _ = run_bench(samples, model_config(cfg, samples), DEFAULT_CONFIGS,
                          steps=cfg["steps"], bsz=cfg["bsz"], warmup=cfg["warmup"],
                          beta=cfg["beta"], lr=cfg["lr"], block_size=cfg["block_size"],
                          ref_mode=cfg["ref_mode"])
    _emit(report.render(cfg["report"]), cfg["out"])
    return EXIT_OK


def cmd_train(cfg: dict) -> int:
    samples = load_samples(cfg)
    if cfg["resume"]:
        est = DPOTrainer.load(cfg["resume"], steps=cfg["steps"], metrics_path=cfg["metrics"])
    else:
        mcfg = model_config(cfg, samples)
        est = DPOTrainer(
            vocab_size=mcfg.vocab_size, d_model=mcfg.d_model, n_layers=mcfg.n_layers,
            n_heads=mcfg.n_heads, d_ff=mcfg.d_ff, init_std=mcfg.init_std,
            precision=cfg["precision"], beta=cfg["beta"], optimizer=cfg["optimizer"],
            lr=cfg["lr"], steps=cfg["steps"], format=cfg["format"], packing=cfg["packing"],
            bsz=cfg["bsz"], block_size=cfg["block_size"], max_prompt_len=cfg["max_prompt_len"],
            max_seq_len=cfg["max_seq_len"], random_state=cfg["seed"], metrics_path=cfg["metrics"],
        )
    est.fit(samples)
    if cfg["out"]:
        est.save(cfg["out"])
    last = est.history_[-1] if est.history_ else {}
    print(json.dumps({"step": est.step_, "loss": last.get("loss"),
                      "accuracy": last.get("accuracy"), "checkpoint": cfg["out"]}))
    return EXIT_OK


COMMANDS = {"stats": cmd_stats, "pack-plan": cmd_pack_plan, "verify": cmd_verify,
            "bench": cmd_bench, "train": cmd_train}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    command = args.command
    del args.command
    try:
        cfg = resolve_config(args)
        print(json.dumps({"command": command, **cfg}, default=str), file=sys.stderr)
        return COMMANDS[command](cfg)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, FileNotFoundError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
