"""The ``moeup`` command-line interface.

Every subcommand prints one machine-readable JSON document to stdout and
human-readable progress text to stderr. Exit codes: 0 success, 1 validation
error, 2 I/O or artifact error. All randomness is controlled by ``--seed``;
re-running a command with identical flags produces bitwise-identical output
artifacts (no timestamps are ever written). Unknown flags are rejected.

Config files are JSON, either flat ``ModelConfig`` fields or sections named
``model`` / ``train`` / ``upcycle`` mirroring the dataclass field names;
flags override file values, and the effective config is echoed into every
JSON result. The ``MOEUP_THREADS`` environment variable caps internal
parallelism (default 1).
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import asdict
from pathlib import Path

from . import __version__
from . import accounting, analysis, checkpoint, corpus as corpus_mod, trainer, upcycle
from .config import ModelConfig, ValidationError, load_config_file, model_config_from_file
from .model import build_model, model_to_checkpoint
from .numerics import RngStream


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # argparse would sys.exit(2); route to exit code 1
        raise ValidationError(message)


def _emit(result: dict) -> None:
    print(json.dumps(result, indent=2, sort_keys=True))


def _info(message: str) -> None:
    print(message, file=sys.stderr)


def _section(path: str | None, name: str) -> dict:
    if path is None:
        return {}
    data = load_config_file(path)
    section = data.get(name, {})
    if not isinstance(section, dict):
        raise ValidationError(f"'{name}' section must be a JSON object")
    return dict(section)


def _build_parser() -> _Parser:
    parser = _Parser(prog="moeup", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"moeup {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("init", help="create a from-scratch checkpoint")
    p.add_argument("--config", required=True, help="JSON model config file")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, help="output checkpoint directory")

    p = sub.add_parser("upcycle", help="convert a dense checkpoint into an MoE checkpoint")
    p.add_argument("--method", required=True,
                   choices=list(upcycle.METHODS))
    p.add_argument("--in", dest="input", help="parent dense checkpoint directory")
    p.add_argument("--branches", help="comma-separated dense branch checkpoints (btx)")
    p.add_argument("--config", help="JSON config file (model/upcycle sections)")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int)
    p.add_argument("--ratio", type=float)
    p.add_argument("--experts", type=int, help="number of experts (default 8)")
    p.add_argument("--topk", type=int, help="experts selected per token (default 2)")
    p.add_argument("--granularity", type=int)
    p.add_argument("--shared", type=int, help="number of shared experts")
    p.add_argument("--shared-init", choices=list(upcycle.SHARED_INITS))
    p.add_argument("--scale-factor", type=float)
    p.add_argument("--noise-sigma", type=float)
    p.add_argument("--noise-fraction", type=float)

    p = sub.add_parser("train", help="train a toy model on a token corpus")
    p.add_argument("--in", dest="input", required=True, help="input checkpoint directory")
    p.add_argument("--corpus", required=True, help="corpus file (domain TAB ids)")
    p.add_argument("--out", required=True, help="output directory (model + curve.jsonl)")
    p.add_argument("--config", help="JSON config file with a 'train' section")
    p.add_argument("--steps", type=int)
    p.add_argument("--tokens", type=int, help="token budget (alternative to --steps)")
    p.add_argument("--batch-size", type=int)
    p.add_argument("--seq-len", type=int)
    p.add_argument("--max-lr", type=float)
    p.add_argument("--min-lr", type=float)
    p.add_argument("--warmup", type=int)
    p.add_argument("--tail", type=int)
    p.add_argument("--balance", choices=list(trainer.BALANCE_MODES))
    p.add_argument("--balance-coeff", type=float)
    p.add_argument("--seed", type=int)

    p = sub.add_parser("flops", help="forward/training FLOPs accounting")
    p.add_argument("--config", required=True)
    p.add_argument("--seq-len", type=int)
    p.add_argument("--tokens", type=float, help="token budget for training FLOPs")

    p = sub.add_parser("params", help="parameter accounting")
    p.add_argument("--config", required=True)

    p = sub.add_parser("analyze-routing", help="routing statistics of a model on a corpus")
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--corpus", required=True)
    p.add_argument("--out", required=True, help="output directory for CSV files")
    p.add_argument("--batch-size", type=int, default=32)

    p = sub.add_parser("analyze-overlap", help="retained-overlap report for a reinit plan")
    p.add_argument("--plan", required=True, help="reinit_plan.json or its directory")
    p.add_argument("--topk", type=int, default=2)
    p.add_argument("--max-subsets", type=int, default=1000)
    p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("catch-up", help="token deficit between two loss curves")
    p.add_argument("--base", required=True, help="base curve JSONL")
    p.add_argument("--other", required=True, help="other curve JSONL")
    p.add_argument("--window", type=int, default=5, help="smoothing window")
    p.add_argument("--out", help="optional CSV output path")

    p = sub.add_parser("inspect", help="report a checkpoint's manifest and stats")
    p.add_argument("--in", dest="input", required=True)

    return parser


# ---------------------------------------------------------------------------
# Command handlers
# ---------------------------------------------------------------------------

def _cmd_init(args) -> dict:
    config = model_config_from_file(args.config)
    ckpt = upcycle.from_scratch(config, seed=args.seed)
    checkpoint.save(ckpt, args.out)
    _info(f"wrote from-scratch checkpoint to {args.out}")
    return {
        "command": "init", "config": config.to_dict(), "seed": args.seed,
        "out": str(args.out), "stored_parameters": ckpt.num_parameters(),
    }


def _upcycle_spec(args) -> upcycle.UpcycleSpec:
    section = _section(args.config, "upcycle")
    merged = {
        "method": args.method,
        "ratio": section.get("ratio", 0.5),
        "seed": section.get("seed", 0),
        "noise_sigma": section.get("noise_sigma", 0.02),
        "noise_fraction": section.get("noise_fraction", 0.5),
        "granularity": section.get("granularity", 1),
        "shared_experts": section.get("shared_experts", 0),
        "shared_init": section.get("shared_init", "copy"),
        "scale_factor": section.get("scale_factor"),
    }
    overrides = {
        "ratio": args.ratio, "seed": args.seed, "noise_sigma": args.noise_sigma,
        "noise_fraction": args.noise_fraction, "granularity": args.granularity,
        "shared_experts": args.shared, "shared_init": args.shared_init,
        "scale_factor": args.scale_factor,
    }
    merged.update({k: v for k, v in overrides.items() if v is not None})
    return upcycle.UpcycleSpec(**merged)


def _target_config(parent: ModelConfig, args, spec: upcycle.UpcycleSpec) -> ModelConfig:
    if args.config is not None and "model" in load_config_file(args.config):
        return model_config_from_file(args.config)
    experts = args.experts if args.experts is not None else 8
    topk = args.topk if args.topk is not None else 2
    return ModelConfig(
        hidden_size=parent.hidden_size, intermediate_size=parent.intermediate_size,
        num_layers=parent.num_layers, num_heads=parent.num_heads,
        num_query_groups=parent.num_query_groups, head_dim=parent.head_dim,
        vocab_size=parent.vocab_size, num_experts=experts, top_k=topk,
        granularity=spec.granularity, shared_experts=spec.shared_experts,
        seq_len=parent.seq_len,
    )


def _cmd_upcycle(args) -> dict:
    spec = _upcycle_spec(args)
    plan = None
    if spec.method == "scratch":
        if args.config is None:
            raise ValidationError("--method scratch requires --config with a model section")
        config = model_config_from_file(args.config)
        ckpt = upcycle.from_scratch(config, seed=spec.seed)
    else:
        if args.input is None:
            raise ValidationError(f"--method {spec.method} requires --in (parent checkpoint)")
        parent = checkpoint.load(args.input)
        config = _target_config(parent.config, args, spec)
        if spec.method == "naive":
            ckpt = upcycle.naive_upcycle(parent, config, seed=spec.seed)
        elif spec.method == "rnu":
            ckpt = upcycle.random_noise_upcycle(parent, config, spec)
        elif spec.method == "drop":
            ckpt, plan = upcycle.drop_upcycle(parent, config, spec)
        elif spec.method == "fg-drop":
            ckpt, plan = upcycle.fine_grained_drop_upcycle(parent, config, spec)
        elif spec.method == "btx":
            if not args.branches:
                raise ValidationError("--method btx requires --branches")
            branches = [checkpoint.load(p) for p in args.branches.split(",") if p]
            ckpt = upcycle.btx_merge(parent, branches, config, seed=spec.seed)
        else:  # pragma: no cover - choices are validated by argparse
            raise ValidationError(f"unknown method {spec.method!r}")
    checkpoint.save(ckpt, args.out)
    result = {
        "command": "upcycle", "method": spec.method, "spec": asdict(spec),
        "config": ckpt.config.to_dict(), "metadata": ckpt.metadata,
        "out": str(args.out), "stored_parameters": ckpt.num_parameters(),
    }
    if plan is not None:
        plan_path = upcycle.save_plan(plan, args.out)
        result["reinit_plan"] = str(plan_path)
    _info(f"wrote {spec.method} checkpoint to {args.out}")
    return result


def _train_config(args) -> trainer.TrainConfig:
    section = _section(args.config, "train")
    merged = {
        "max_lr": 2e-3, "min_lr": 2e-4, "total_steps": 100,
        "warmup_steps": 0, "tail_steps": 0, "batch_size": 16, "seq_len": 64,
        "balance_mode": "global", "seed": 0,
    }
    merged.update(section)
    overrides = {
        "total_steps": args.steps, "batch_size": args.batch_size, "seq_len": args.seq_len,
        "max_lr": args.max_lr, "min_lr": args.min_lr, "warmup_steps": args.warmup,
        "tail_steps": args.tail, "balance_mode": args.balance,
        "balance_coeff": args.balance_coeff, "seed": args.seed,
    }
    merged.update({k: v for k, v in overrides.items() if v is not None})
    if args.tokens is not None:
        if args.steps is not None:
            raise ValidationError("pass either --steps or --tokens, not both")
        per_step = merged["batch_size"] * merged["seq_len"]
        merged["total_steps"] = max(1, -(-int(args.tokens) // per_step))
    known = {f.name for f in trainer.TrainConfig.__dataclass_fields__.values()}
    unknown = set(merged) - known
    if unknown:
        raise ValidationError(f"unknown train config fields: {sorted(unknown)}")
    return trainer.TrainConfig(**merged)


def _cmd_train(args) -> dict:
    cfg = _train_config(args)
    ckpt = checkpoint.load(args.input)
    data = corpus_mod.load_corpus(args.corpus)
    model = build_model(ckpt, max_positions=cfg.seq_len, stream=RngStream(cfg.seed))
    _info(f"training for {cfg.total_steps} steps "
          f"({cfg.total_steps * cfg.batch_size * cfg.seq_len} tokens)")
    model, curve = trainer.train(model, data, cfg)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    trained = model_to_checkpoint(
        model, metadata=dict(ckpt.metadata) | {"trained_steps": cfg.total_steps,
                                               "train_seed": cfg.seed})
    checkpoint.save(trained, out / "model")
    curve.save_jsonl(out / "curve.jsonl")
    first, last = curve.points[0], curve.points[-1]
    _info(f"loss {first.train_loss:.4f} -> {last.train_loss:.4f}")
    return {
        "command": "train", "config": ckpt.config.to_dict(), "train_config": asdict(cfg),
        "out": str(out), "curve": str(out / "curve.jsonl"),
        "initial_loss": first.train_loss, "final_loss": last.train_loss,
        "final_lm_loss": last.lm_loss, "final_balance_loss": last.balance_loss,
    }


def _cmd_flops(args) -> dict:
    config = model_config_from_file(args.config)
    breakdown = accounting.flops_forward(config, seq_len=args.seq_len)
    _info(accounting.format_flops_table(breakdown, config.num_layers))
    result = {
        "command": "flops", "config": config.to_dict(),
        "forward": breakdown.to_dict(),
    }
    if args.tokens is not None:
        result["total_tokens"] = args.tokens
        result["training_flops"] = accounting.training_flops(config, args.tokens)
    return result


def _cmd_params(args) -> dict:
    config = model_config_from_file(args.config)
    breakdown = accounting.count_params(config)
    _info(f"total parameters:  {breakdown.total:,}")
    _info(f"active parameters: {breakdown.active:,}")
    return {"command": "params", "config": config.to_dict(), "params": breakdown.to_dict()}


def _cmd_analyze_routing(args) -> dict:
    ckpt = checkpoint.load(args.input)
    data = corpus_mod.load_corpus(args.corpus)
    model = build_model(ckpt, max_positions=data.seq_len, stream=RngStream(0))
    traces = analysis.collect_traces(model, data, batch_size=args.batch_size)
    summary = analysis.summarize_routing(traces)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    fractions_csv = out / "routing_fractions.csv"
    entropy_csv = out / "layer_entropy.csv"
    analysis.routing_fractions_csv(summary, fractions_csv)
    analysis.layer_entropy_csv(summary, entropy_csv)
    _info(f"wrote {fractions_csv} and {entropy_csv}")
    return {
        "command": "analyze-routing", "config": ckpt.config.to_dict(),
        "fractions_csv": str(fractions_csv), "entropy_csv": str(entropy_csv),
        "entropy": {str(k): v for k, v in sorted(summary.entropy.items())},
        "tokens_per_domain": summary.tokens_per_domain,
    }


def _cmd_analyze_overlap(args) -> dict:
    plan = upcycle.load_plan(args.plan)
    report = analysis.overlap_report(plan, k=args.topk, max_subsets=args.max_subsets,
                                     subset_seed=args.seed)
    return {
        "command": "analyze-overlap", "ratio": report.ratio, "dimension": report.dimension,
        "layers": [asdict(layer) for layer in report.layers],
    }


def _cmd_catch_up(args) -> dict:
    base = trainer.LossCurve.load_jsonl(args.base)
    other = trainer.LossCurve.load_jsonl(args.other)
    points = analysis.catch_up(base, other, smooth_window=args.window)
    if args.out:
        analysis.catch_up_csv(points, args.out)
        _info(f"wrote {args.out}")
    return {
        "command": "catch-up", "window": args.window,
        "points": [{"base_tokens": p.base_tokens, "deficit": p.deficit} for p in points],
    }


def _cmd_inspect(args) -> dict:
    manifest = checkpoint.read_manifest(args.input)
    ckpt = checkpoint.load(args.input)
    breakdown = accounting.count_params(ckpt.config)
    _info(f"{len(ckpt.tensors)} tensors, {ckpt.num_parameters():,} stored parameters")
    return {
        "command": "inspect", "manifest": manifest,
        "stored_parameters": ckpt.num_parameters(),
        "counted_parameters": breakdown.to_dict(),
        "checkpoint_hash": checkpoint.checkpoint_hash(ckpt),
    }


_HANDLERS = {
    "init": _cmd_init,
    "upcycle": _cmd_upcycle,
    "train": _cmd_train,
    "flops": _cmd_flops,
    "params": _cmd_params,
    "analyze-routing": _cmd_analyze_routing,
    "analyze-overlap": _cmd_analyze_overlap,
    "catch-up": _cmd_catch_up,
    "inspect": _cmd_inspect,
}


def main(argv: list[str] | None = None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
        result = _HANDLERS[args.command](args)
    except SystemExit as exc:  # --help / --version
        return int(exc.code or 0)
    except ValidationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (checkpoint.CheckpointError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    _emit(result)
    return 0


if __name__ == "__main__":
    sys.exit(main())
