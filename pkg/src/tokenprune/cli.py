"""Command line surface: generate, train, eval, sweep, case-study.

Every command is deterministic given its flags and seed, writes its
resolved configuration next to its outputs, and exits 0 on success, 1 on
usage errors, 2 on data errors, 3 on numeric divergence.
"""

from __future__ import annotations

import argparse
import csv
import os
import sys
from pathlib import Path

import numpy as np

from .checkpoint import load_checkpoint, save_checkpoint
from .config import (
    build_configs,
    read_config_file,
    write_resolved_config,
)
from .errors import DataError, DivergenceError, UsageError
from .model import Model, ModelConfig
from .profiling import write_flops_csv
from .reduction import export_trace_json, reduced_forward, termination_tags
from .strategies import (
    STRATEGIES,
    theoretical_elimination_eval,
    write_curve_csv,
)
from .synthetic import (
    gen_keyword_task,
    gen_marker_span_task,
    load_dataset,
    save_dataset,
)
from .training import TrainConfig, evaluate, train_pipeline
from .seeding import substream


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _resolve_out(raw: str) -> Path:
    root = os.environ.get("TOKENPRUNE_OUT")
    path = Path(raw)
    if root and not path.is_absolute():
        path = Path(root) / path
    path.mkdir(parents=True, exist_ok=True)
    return path


def _load_examples(path):
    examples, meta = load_dataset(path)
    return examples, meta


def _fit_model_config(model_cfg: ModelConfig, examples) -> ModelConfig:
    """Adapt head kind, class count, and max length to the dataset."""
    from dataclasses import replace

    span = isinstance(examples[0].label, tuple)
    kwargs = {}
    if span and model_cfg.head_kind != "span":
        kwargs["head_kind"] = "span"
    if not span:
        n_classes = max(int(ex.label) for ex in examples) + 1
        if model_cfg.head_kind != "classification":
            kwargs["head_kind"] = "classification"
        if n_classes > model_cfg.num_classes:
            kwargs["num_classes"] = n_classes
    longest = max(ex.n for ex in examples)
    if longest > model_cfg.max_len:
        kwargs["max_len"] = longest
    return replace(model_cfg, **kwargs) if kwargs else model_cfg


def _base_configs(args) -> tuple[ModelConfig, TrainConfig, dict]:
    kv = read_config_file(args.config) if getattr(args, "config", None) else {}
    model_cfg, train_cfg, paths = build_configs(kv)
    overrides = {}
    for attr, key in (
        ("penalty", "penalty"),
        ("epochs", "epochs"),
        ("batch_size", "batch_size"),
        ("imitation_fraction", "imitation_fraction"),
        ("samples", "num_action_samples"),
    ):
        value = getattr(args, attr, None)
        if value is not None:
            overrides[key] = value
    if getattr(args, "seed", None) is not None:
        overrides["seed"] = args.seed
    if overrides:
        from dataclasses import replace

        train_cfg = replace(train_cfg, **overrides)
    return model_cfg, train_cfg, paths


# ---------------------------------------------------------------------------
# generate
# ---------------------------------------------------------------------------


def cmd_generate(args) -> int:
    out = _resolve_out(args.out)
    total = args.n_train + args.n_dev
    if args.task == "keyword":
        examples = gen_keyword_task(
            total,
            seq_len=args.seq_len,
            n_classes=args.classes,
            signal_count=args.signals,
            seed=args.seed,
        )
        meta = {
            "task": "keyword",
            "seq_len": args.seq_len,
            "n_classes": args.classes,
            "signal_count": args.signals,
            "seed": args.seed,
        }
    else:
        examples = gen_marker_span_task(total, seq_len=args.seq_len, seed=args.seed)
        meta = {"task": "span", "seq_len": args.seq_len, "seed": args.seed}
    train, dev = examples[: args.n_train], examples[args.n_train :]
    save_dataset(out / "train.jsonl", train, dict(meta, split="train", count=len(train)))
    save_dataset(out / "dev.jsonl", dev, dict(meta, split="dev", count=len(dev)))
    with open(out / "generate.config.txt", "w", encoding="utf-8") as fh:
        for key in ("task", "n_train", "n_dev", "seq_len", "classes", "signals", "seed"):
            fh.write(f"{key}={getattr(args, key)}\n")
    print(f"wrote {len(train)} train / {len(dev)} dev examples to {out}")
    return 0


# ---------------------------------------------------------------------------
# train
# ---------------------------------------------------------------------------


def _stage_path(out: Path, stage: int) -> Path:
    return out / f"model.stage{stage}.tprn"


def cmd_train(args) -> int:
    out = _resolve_out(args.out)
    train_examples, _ = _load_examples(args.train)
    dev_examples, _ = _load_examples(args.dev)
    model_cfg, train_cfg, _ = _base_configs(args)

    stages = [args.stage] if args.stage else [1, 2, 3]
    history_path = out / "history.jsonl"
    if not args.resume and 1 in stages and history_path.exists():
        history_path.unlink()

    model = None
    teacher = None
    if args.init_from:
        model = load_checkpoint(args.init_from)

    def log(msg):
        print(msg)

    for stage in stages:
        ckpt = _stage_path(out, stage)
        if args.resume and ckpt.exists():
            model = load_checkpoint(ckpt)
            print(f"stage {stage}: reusing {ckpt}")
            continue
        if model is None:
            if stage == 1:
                fitted = _fit_model_config(model_cfg, train_examples + dev_examples)
                model = Model.init(fitted, seed=train_cfg.seed)
            else:
                prev = _stage_path(out, stage - 1)
                if not prev.exists():
                    raise UsageError(
                        f"stage {stage} needs --init-from or {prev.name} in the output dir"
                    )
                model = load_checkpoint(prev)
        if stage == 3 and teacher is None:
            stage1 = _stage_path(out, 1)
            teacher = load_checkpoint(stage1) if stage1.exists() else model.copy()
        train_pipeline(
            model,
            train_examples,
            dev_examples,
            train_cfg,
            history_path=history_path,
            stages=(stage,),
            teacher=teacher,
            log=log,
        )
        if stage == 1:
            teacher = model.copy()
        save_checkpoint(ckpt, model)
    save_checkpoint(out / "model.tprn", model)
    write_resolved_config(
        out / "config.txt",
        model.config,
        train_cfg,
        {"train_path": str(args.train), "dev_path": str(args.dev), "out_dir": str(out)},
    )
    final = evaluate(model, dev_examples, mode="greedy")
    print(
        f"final: dev_metric={final.metric:.4f} mean_selected={final.mean_selected:.2f} "
        f"flops_speedup={final.mean_speedup:.4f}"
    )
    return 0


# ---------------------------------------------------------------------------
# eval
# ---------------------------------------------------------------------------


def cmd_eval(args) -> int:
    out = _resolve_out(args.out)
    model = load_checkpoint(args.checkpoint)
    examples, _ = _load_examples(args.data)
    rng = substream(args.seed, "eval-sampling") if args.mode == "sample" else None
    result = evaluate(model, examples, mode=args.mode, rng=rng)
    write_flops_csv(out / "flops.csv", result.rows)
    from .figures import render_eval

    render_eval(result.rows, out / "eval.png")
    write_resolved_config(
        out / "eval.config.txt",
        model.config,
        TrainConfig(seed=args.seed),
        {"out_dir": str(out)},
    )
    print(
        f"metric={result.metric:.4f} mean_speedup={result.mean_speedup:.4f} "
        f"mean_selected={result.mean_selected:.2f} mean_recall={result.mean_recall:.4f}"
    )
    return 0


# ---------------------------------------------------------------------------
# sweep
# ---------------------------------------------------------------------------


def _parse_floats(raw: str) -> list[float]:
    try:
        return [float(x) for x in raw.split(",") if x.strip() != ""]
    except ValueError as exc:
        raise UsageError(f"bad number list {raw!r}") from exc


def _parse_ints(raw: str) -> list[int]:
    try:
        return [int(x) for x in raw.split(",") if x.strip() != ""]
    except ValueError as exc:
        raise UsageError(f"bad integer list {raw!r}") from exc


def cmd_sweep(args) -> int:
    out = _resolve_out(args.out)
    if args.mode == "strategy":
        return _sweep_strategies(args, out)
    return _sweep_penalties(args, out)


def _sweep_penalties(args, out: Path) -> int:
    from dataclasses import replace

    if not args.train or not args.dev:
        raise UsageError("lambda sweep needs --train and --dev datasets")
    train_examples, _ = _load_examples(args.train)
    dev_examples, _ = _load_examples(args.dev)
    model_cfg, train_cfg, _ = _base_configs(args)
    penalties = _parse_floats(args.lambdas)
    seeds = _parse_ints(args.seeds)
    if not penalties or not seeds:
        raise UsageError("sweep needs at least one lambda and one seed")

    rows = []
    for seed in seeds:
        seed_cfg = replace(train_cfg, seed=seed)
        stage1_dir = out / f"seed{seed}"
        stage1_dir.mkdir(exist_ok=True)
        stage1_path = stage1_dir / "model.stage1.tprn"
        if stage1_path.exists():
            stage1 = load_checkpoint(stage1_path)
        else:
            fitted = _fit_model_config(model_cfg, train_examples + dev_examples)
            stage1 = Model.init(fitted, seed=seed)
            train_pipeline(stage1, train_examples, dev_examples, seed_cfg, stages=(1,))
            save_checkpoint(stage1_path, stage1)
        for penalty in penalties:
            run_dir = out / f"lam{penalty:g}-seed{seed}"
            run_dir.mkdir(exist_ok=True)
            run_cfg = replace(seed_cfg, penalty=penalty)
            model = stage1.copy()
            train_pipeline(
                model,
                train_examples,
                dev_examples,
                run_cfg,
                history_path=run_dir / "history.jsonl",
                stages=(2, 3),
                teacher=stage1.copy(),
            )
            save_checkpoint(run_dir / "model.tprn", model)
            write_resolved_config(run_dir / "config.txt", model.config, run_cfg)
            stats = evaluate(model, dev_examples, mode="greedy")
            rows.append(
                {
                    "lambda": penalty,
                    "seed": seed,
                    "metric": stats.metric,
                    "flops_speedup": stats.mean_speedup,
                    "mean_selected": stats.mean_selected,
                    "signal_recall": stats.mean_recall,
                }
            )
            print(
                f"lambda={penalty:g} seed={seed}: metric={stats.metric:.4f} "
                f"speedup={stats.mean_speedup:.4f} selected={stats.mean_selected:.2f}"
            )
    with open(out / "sweep.csv", "w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(
            fh,
            fieldnames=[
                "lambda",
                "seed",
                "metric",
                "flops_speedup",
                "mean_selected",
                "signal_recall",
            ],
        )
        writer.writeheader()
        writer.writerows(rows)
    from .figures import render_tradeoff

    render_tradeoff(
        [(r["lambda"], r["seed"], r["metric"], r["flops_speedup"]) for r in rows],
        out / "tradeoff.png",
    )
    print(f"sweep results in {out / 'sweep.csv'}")
    return 0


def _sweep_strategies(args, out: Path) -> int:
    if not args.checkpoint:
        raise UsageError("strategy sweep needs --checkpoint (a task-trained model)")
    model = load_checkpoint(args.checkpoint)
    examples, _ = _load_examples(args.data if args.data else args.dev)
    keep_ratios = _parse_floats(args.keep_ratios)
    results = []
    for strategy in STRATEGIES:
        for ratio in keep_ratios:
            res = theoretical_elimination_eval(
                model, examples, strategy, ratio, seed=args.seed
            )
            results.append(res)
            print(
                f"{strategy} keep={ratio:g}: metric={res.metric:.4f} "
                f"speedup={res.mean_speedup:.4f}"
            )
    write_curve_csv(out / "strategies.csv", results)
    from .figures import render_strategy_curves

    render_strategy_curves(results, out / "strategies.png")
    print(f"strategy curves in {out / 'strategies.csv'}")
    return 0


# ---------------------------------------------------------------------------
# case study
# ---------------------------------------------------------------------------


def cmd_case_study(args) -> int:
    model = load_checkpoint(args.checkpoint)
    examples, _ = _load_examples(args.data)
    if not (0 <= args.index < len(examples)):
        raise DataError(f"example index {args.index} outside dataset of {len(examples)}")
    ex = examples[args.index]
    rng = substream(args.seed, "case-study") if args.mode == "sample" else None
    result = reduced_forward(model, ex.tokens, mode=args.mode, rng=rng)
    tags = termination_tags(result.trace)
    n_modules = model.config.num_modules
    print(f"example {args.index}: label={ex.label}")
    print("tag legend: 0..T-1 = skipped at that reduction module, "
          f"{n_modules} = fully kept")
    pieces = []
    for pos, (tok, tag) in enumerate(zip(ex.tokens, tags)):
        marker = "*" if ex.signal[pos] else " "
        pieces.append(f"{pos:>3} tok={tok:>3} tag={tag}{marker}")
    print("\n".join(pieces))
    counts = np.bincount(tags, minlength=n_modules + 1)
    print("tag counts: " + ", ".join(f"{t}:{c}" for t, c in enumerate(counts)))
    if args.json:
        export_trace_json(result.trace, args.json)
        print(f"trace written to {args.json}")
    return 0


# ---------------------------------------------------------------------------
# argument wiring
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="tokenprune", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", help="write a synthetic dataset")
    p.add_argument("--task", choices=("keyword", "span"), required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--n-train", type=int, default=20000, dest="n_train")
    p.add_argument("--n-dev", type=int, default=2000, dest="n_dev")
    p.add_argument("--seq-len", type=int, default=48, dest="seq_len")
    p.add_argument("--classes", type=int, default=4)
    p.add_argument("--signals", type=int, default=4)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("train", help="run the training pipeline")
    p.add_argument("--train", required=True)
    p.add_argument("--dev", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--config", default=None)
    p.add_argument("--lambda", type=float, default=None, dest="penalty")
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--batch-size", type=int, default=None, dest="batch_size")
    p.add_argument("--imitation-fraction", type=float, default=None, dest="imitation_fraction")
    p.add_argument("--samples", type=int, default=None)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--stage", type=int, choices=(1, 2, 3), default=None)
    p.add_argument("--resume", action="store_true")
    p.add_argument("--init-from", default=None, dest="init_from")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="score a checkpoint on a dataset")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--mode", choices=("greedy", "sample", "full"), default="greedy")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("sweep", help="trade-off curves over penalties or strategies")
    p.add_argument("--mode", choices=("lambda", "strategy"), default="lambda")
    p.add_argument("--train", default=None)
    p.add_argument("--dev", default=None)
    p.add_argument("--data", default=None)
    p.add_argument("--out", required=True)
    p.add_argument("--config", default=None)
    p.add_argument("--lambdas", default="0,0.001,0.05,1.0")
    p.add_argument("--seeds", default="0")
    p.add_argument("--keep-ratios", default="0.1,0.2,0.4,0.7,1.0", dest="keep_ratios")
    p.add_argument("--checkpoint", default=None)
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--batch-size", type=int, default=None, dest="batch_size")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("case-study", help="per-token reduction tags for one example")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--index", type=int, default=0)
    p.add_argument("--mode", choices=("greedy", "sample"), default="greedy")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--json", default=None)
    p.set_defaults(func=cmd_case_study)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 2
    except DivergenceError as exc:
        print(f"divergence: {exc}", file=sys.stderr)
        return 3
    except SystemExit as exc:  # argparse --help
        return int(exc.code or 0)


if __name__ == "__main__":
    sys.exit(main())
