"""Command-line front end.

Subcommands: train, eval, decode, probe, ablate, sweep-capsules,
length-buckets, param-count.  Every run writes a config snapshot and a
metrics CSV under its run directory, so a run is reproducible from its
own artifacts (timing columns aside).

Configuration comes from an optional flat `key = value` file (# comments)
plus flags, flags winning.  Model fields use their bare names; task fields
take a task_ prefix (both have a seed and a vocab).  Exit codes: 0 ok,
2 usage, 3 bad config, 4 runtime failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import os
import sys
import time

from . import checkpoint as ckpt_io
from .autodiff import ContractError, ShapeError
from .config import ConfigError, ModelConfig
from .decoding import DEFAULT_ALPHA, beam_decode
from .metrics import MetricRow, bleu, exact_match, write_metrics
from .model import Model, param_count
from .probe import DEFAULT_TOPK, POOLINGS, probe_train_eval
from .tasks import KINDS, TaskSpec, corpus
from .training import train

TASK_PREFIX = "task_"

# the 8 ablation cells: every subset of the three flags, baseline first
ABLATION_GRID = (
    (),
    ("capsule",),
    ("aggregate",),
    ("gate",),
    ("capsule", "aggregate"),
    ("capsule", "gate"),
    ("aggregate", "gate"),
    ("capsule", "aggregate", "gate"),
)
SWEEP_CAPSULES = (4, 8, 16, 32)
SWEEP_ITERS = (1, 2, 3, 4, 5)
LENGTH_BUCKETS = ((2, 5), (6, 10), (11, 15), (16, 20))


# ---------------------------------------------------------------------------
# config assembly


def _coerce(field: dataclasses.Field, raw: str, key: str):
    raw = raw.strip()
    default = field.default
    if field.name == "d_cap":
        return None if raw.lower() in ("none", "") else int(raw)
    if isinstance(default, bool):
        low = raw.lower()
        if low in ("true", "1", "yes", "on"):
            return True
        if low in ("false", "0", "no", "off"):
            return False
        raise ConfigError(f"{key}: expected a boolean, got {raw!r}")
    if isinstance(default, int):
        return int(raw)
    if isinstance(default, float):
        return float(raw)
    return raw


def read_config_file(path: str) -> dict:
    """Flat `key = value` lines; # starts a comment; returns raw strings."""
    out: dict[str, str] = {}
    try:
        with open(path, "r", encoding="utf-8") as fh:
            lines = fh.readlines()
    except OSError as err:
        raise ConfigError(f"config: cannot read {path}: {err}") from err
    for ln, line in enumerate(lines, 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"config: {path}:{ln}: expected `key = value`, got {line!r}")
        key, _, value = line.partition("=")
        out[key.strip()] = value.strip()
    return out


def build_specs(args) -> tuple:
    """Merge config file and flags into (ModelConfig, TaskSpec)."""
    model_fields = {f.name: f for f in dataclasses.fields(ModelConfig)}
    task_fields = {f.name: f for f in dataclasses.fields(TaskSpec)}

    model_kv: dict = {}
    task_kv: dict = {}
    if getattr(args, "config", None):
        for key, raw in read_config_file(args.config).items():
            if key.startswith(TASK_PREFIX) and key[len(TASK_PREFIX):] in task_fields:
                name = key[len(TASK_PREFIX):]
                task_kv[name] = _coerce(task_fields[name], raw, key)
            elif key in model_fields:
                model_kv[key] = _coerce(model_fields[key], raw, key)
            else:
                raise ConfigError(f"config: unknown key {key!r}")

    if getattr(args, "task", None):
        task_kv["kind"] = args.task
    if getattr(args, "seed", None) is not None:
        model_kv["seed"] = args.seed
        task_kv["seed"] = args.seed
    if getattr(args, "capsules", None) is not None:
        model_kv["capsules"] = args.capsules
    if getattr(args, "routing_iters", None) is not None:
        model_kv["routing_iters"] = args.routing_iters
    if getattr(args, "flags", None) is not None:
        wanted = set()
        if args.flags.lower() not in ("", "none"):
            for flag in args.flags.split(","):
                flag = flag.strip()
                if flag not in ("capsule", "aggregate", "gate"):
                    raise ConfigError(f"--flags: unknown flag {flag!r}")
                wanted.add(flag)
        for flag in ("capsule", "aggregate", "gate"):
            model_kv[flag] = flag in wanted

    try:
        task = TaskSpec(**task_kv)
        # the model must cover every task token id; adopt the task's vocab
        # unless the config asked for a specific (larger) one
        if "vocab" not in model_kv:
            model_kv["vocab"] = task.vocab
        elif model_kv["vocab"] < task.vocab:
            raise ConfigError(f"vocab: model vocab {model_kv['vocab']} smaller "
                              f"than task vocab {task.vocab}")
        cfg = ModelConfig(**model_kv)
    except TypeError as err:
        raise ConfigError(f"config: {err}") from err
    return cfg, task


# ---------------------------------------------------------------------------
# run-directory plumbing


def _run_dir(args, sub: str) -> str:
    out = args.out if getattr(args, "out", None) else os.path.join("runs", sub)
    os.makedirs(out, exist_ok=True)
    return out


def write_snapshot(out_dir: str, cfg: ModelConfig, task: TaskSpec, args) -> str:
    """Persist everything needed to re-run this invocation byte-for-byte."""
    path = os.path.join(out_dir, "config.txt")
    run_keys = ("subcommand", "steps", "beam", "alpha", "batch_size",
                "init", "pooling", "checkpoint_every")
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("# run parameters (informational; pass as flags to re-run)\n")
        for key in run_keys:
            if getattr(args, key, None) is not None:
                fh.write(f"# {key} = {getattr(args, key)}\n")
        for key, value in sorted(cfg.as_dict().items()):
            fh.write(f"{key} = {value}\n")
        for field in dataclasses.fields(TaskSpec):
            fh.write(f"{TASK_PREFIX}{field.name} = {getattr(task, field.name)}\n")
    return path


def _load_model(cfg: ModelConfig, init_path: str | None) -> Model:
    model = Model(cfg)
    if init_path is not None:
        ckpt_io.load_into(init_path, model)
    return model


def _require_init(args) -> str:
    if getattr(args, "init", None) is None:
        raise ConfigError(f"--init: {args.subcommand} needs a checkpoint to load")
    return args.init


def _decode_split(model: Model, task: TaskSpec, split: str, beam: int,
                  alpha: float):
    """Decode a whole split; returns (sources, hypotheses, references, seconds)."""
    pairs = corpus(task, split)
    max_len = task.len_max + 2
    srcs, hyps, refs = [], [], []
    start = time.perf_counter()
    for src, tgt in pairs:
        srcs.append(list(src))
        refs.append(list(tgt))
        hyps.append(beam_decode(model, src, beam, max_len, alpha))
    return srcs, hyps, refs, time.perf_counter() - start


# ---------------------------------------------------------------------------
# subcommands


def cmd_train(args) -> int:
    cfg, task = build_specs(args)
    out = _run_dir(args, "train")
    write_snapshot(out, cfg, task, args)
    result = train(cfg, task, args.steps, batch_size=args.batch_size,
                   init_path=args.init,
                   checkpoint_path=os.path.join(out, "model.ckpt"),
                   checkpoint_every=args.checkpoint_every)
    h = cfg.config_hash()
    rows = [MetricRow("train", h, i + 1, "loss", loss, 0.0)
            for i, loss in enumerate(result.losses)]
    rows.append(MetricRow("train", h, args.steps, "wall_seconds",
                          result.wall_seconds, result.wall_seconds))
    write_metrics(os.path.join(out, "metrics.csv"), rows)
    print(f"trained {args.steps} steps on {task.kind}: "
          f"final loss {result.losses[-1]:.6g}, checkpoint {out}/model.ckpt")
    return 0


def cmd_eval(args) -> int:
    cfg, task = build_specs(args)
    out = _run_dir(args, "eval")
    write_snapshot(out, cfg, task, args)
    model = _load_model(cfg, _require_init(args))
    _, hyps, refs, secs = _decode_split(model, task, "test", args.beam, args.alpha)
    score = bleu(hyps, refs)
    exact = exact_match(hyps, refs)
    h = cfg.config_hash()
    write_metrics(os.path.join(out, "metrics.csv"), [
        MetricRow("eval", h, "test", "bleu", score, secs),
        MetricRow("eval", h, "test", "exact_match", exact, secs),
    ])
    print(f"test bleu {score:.2f}  exact_match {exact:.4f}  ({len(hyps)} sequences)")
    return 0


def cmd_decode(args) -> int:
    cfg, task = build_specs(args)
    out = _run_dir(args, "decode")
    write_snapshot(out, cfg, task, args)
    model = _load_model(cfg, _require_init(args))
    srcs, hyps, refs, secs = _decode_split(model, task, "test", args.beam, args.alpha)
    lines = []
    for src, hyp, ref in zip(srcs, hyps, refs):
        lines.append("{}\t{}\t{}".format(" ".join(map(str, src)),
                                         " ".join(map(str, hyp)),
                                         " ".join(map(str, ref))))
    with open(os.path.join(out, "decodes.txt"), "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")
    for line in lines:
        print(line)
    write_metrics(os.path.join(out, "metrics.csv"), [
        MetricRow("decode", cfg.config_hash(), "test", "exact_match",
                  exact_match(hyps, refs), secs),
    ])
    return 0


def cmd_probe(args) -> int:
    cfg, task = build_specs(args)
    out = _run_dir(args, "probe")
    write_snapshot(out, cfg, task, args)
    model = _load_model(cfg, _require_init(args))
    poolings = POOLINGS if args.pooling == "all" else (args.pooling,)
    if "gret" in poolings and not cfg.flags:
        raise ConfigError("pooling: 'gret' needs capsule/aggregate/gate flags on; "
                          "pick --pooling average|last or pass --flags")
    h = cfg.config_hash()
    rows = []
    for pooling in poolings:
        start = time.perf_counter()
        precisions = probe_train_eval(model, task, DEFAULT_TOPK, pooling,
                                      seed=cfg.seed, steps=args.steps)
        secs = time.perf_counter() - start
        for k, p in sorted(precisions.items()):
            rows.append(MetricRow(f"probe/{pooling}", h, "test",
                                  f"precision@{k}", p, secs))
        summary = "  ".join(f"p@{k} {p:.4f}" for k, p in sorted(precisions.items()))
        print(f"{pooling:8s} {summary}")
    write_metrics(os.path.join(out, "metrics.csv"), rows)
    return 0


def _flag_name(flags: tuple) -> str:
    return "+".join(flags) if flags else "base"


def cmd_ablate(args) -> int:
    cfg, task = build_specs(args)
    out = _run_dir(args, "ablate")
    write_snapshot(out, cfg, task, args)
    rows, base_rate = [], None
    for flags in ABLATION_GRID:
        cell = cfg.replace(capsule="capsule" in flags,
                           aggregate="aggregate" in flags,
                           gate="gate" in flags)
        name = _flag_name(flags)
        ckpt = os.path.join(out, f"{name.replace('+', '_')}.ckpt")
        result = train(cell, task, args.steps, batch_size=args.batch_size,
                       checkpoint_path=ckpt)
        _, hyps, refs, secs = _decode_split(result.model, task, "test",
                                            args.beam, args.alpha)
        tokens = sum(len(hyp) + 1 for hyp in hyps)  # +1 for the EOS emission
        rate = tokens / secs
        if base_rate is None:
            base_rate = rate
        score = bleu(hyps, refs)
        h = cell.config_hash()
        exp = f"ablate/{name}"
        rows += [
            MetricRow(exp, h, "test", "bleu", score, secs),
            MetricRow(exp, h, "test", "param_count", result.model.param_count(), secs),
            MetricRow(exp, h, "test", "rel_speed", rate / base_rate, secs),
        ]
        print(f"{name:24s} bleu {score:7.2f}  params {result.model.param_count():7d}  "
              f"rel_speed {rate / base_rate:.2f}")
    write_metrics(os.path.join(out, "metrics.csv"), rows)
    return 0


def cmd_sweep_capsules(args) -> int:
    cfg, task = build_specs(args)
    out = _run_dir(args, "sweep-capsules")
    write_snapshot(out, cfg, task, args)
    rows = []
    for k in SWEEP_CAPSULES:
        for r in SWEEP_ITERS:
            cell = cfg.replace(capsule=True, aggregate=True, gate=True,
                               capsules=k, routing_iters=r)
            result = train(cell, task, args.steps, batch_size=args.batch_size,
                           checkpoint_path=os.path.join(out, f"K{k}_r{r}.ckpt"))
            _, hyps, refs, secs = _decode_split(result.model, task, "valid",
                                                args.beam, args.alpha)
            score = bleu(hyps, refs)
            rows.append(MetricRow(f"sweep/K{k}-r{r}", cell.config_hash(),
                                  "valid", "bleu", score, secs))
            print(f"K={k:2d} r={r}  bleu {score:7.2f}")
    write_metrics(os.path.join(out, "metrics.csv"), rows)
    return 0


def cmd_length_buckets(args) -> int:
    cfg, task = build_specs(args)
    out = _run_dir(args, "length-buckets")
    write_snapshot(out, cfg, task, args)
    model = _load_model(cfg, _require_init(args))
    srcs, hyps, refs, secs = _decode_split(model, task, "test", args.beam, args.alpha)
    h = cfg.config_hash()
    rows = []
    for lo, hi in LENGTH_BUCKETS:
        idx = [i for i, src in enumerate(srcs)
               if lo <= len(src) <= hi or (hi == LENGTH_BUCKETS[-1][1] and len(src) > hi)]
        name = f"len{lo}-{hi}"
        rows.append(MetricRow(f"buckets/{name}", h, "test", "count", len(idx), secs))
        if idx:
            sub_h = [hyps[i] for i in idx]
            sub_r = [refs[i] for i in idx]
            rows.append(MetricRow(f"buckets/{name}", h, "test", "bleu",
                                  bleu(sub_h, sub_r), secs))
            rows.append(MetricRow(f"buckets/{name}", h, "test", "exact_match",
                                  exact_match(sub_h, sub_r), secs))
        print(f"{name:10s} n={len(idx)}")
    write_metrics(os.path.join(out, "metrics.csv"), rows)
    return 0


def cmd_param_count(args) -> int:
    cfg, _ = build_specs(args)
    total, breakdown = param_count(cfg)
    print(total)
    for head, n in breakdown.items():
        print(f"  {head:8s} {n}")
    if getattr(args, "out", None):
        out = _run_dir(args, "param-count")
        rows = [MetricRow("param-count", cfg.config_hash(), 0, "param_count",
                          total, 0.0)]
        rows += [MetricRow("param-count", cfg.config_hash(), 0, f"params/{head}",
                           n, 0.0) for head, n in breakdown.items()]
        write_metrics(os.path.join(out, "metrics.csv"), rows)
    return 0


# ---------------------------------------------------------------------------
# argument parsing


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="gret",
        description="Train, decode, and analyze global-state transformer models "
                    "on synthetic sequence tasks.")
    sub = parser.add_subparsers(dest="subcommand", required=True)

    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", metavar="PATH", help="key = value config file")
    common.add_argument("--seed", type=int, metavar="U64",
                        help="overrides both model and task seeds")
    common.add_argument("--task", choices=KINDS, help="synthetic task kind")
    common.add_argument("--out", metavar="DIR", help="run directory")
    common.add_argument("--flags", metavar="F[,F...]",
                        help="exactly these model flags on: capsule,aggregate,gate "
                             "(or 'none')")
    common.add_argument("--capsules", type=int, metavar="K")
    common.add_argument("--routing-iters", type=int, metavar="R", dest="routing_iters")

    fit = argparse.ArgumentParser(add_help=False)
    fit.add_argument("--steps", type=int, default=200, metavar="N")
    fit.add_argument("--batch-size", type=int, default=16, metavar="B",
                     dest="batch_size")

    search = argparse.ArgumentParser(add_help=False)
    search.add_argument("--beam", type=int, default=1, metavar="B")
    search.add_argument("--alpha", type=float, default=DEFAULT_ALPHA,
                        help="length-normalization exponent")

    init = argparse.ArgumentParser(add_help=False)
    init.add_argument("--init", metavar="CHECKPOINT", help="checkpoint to load")

    p = sub.add_parser("train", parents=[common, fit, init],
                       help="train a model and save its checkpoint")
    p.add_argument("--checkpoint-every", type=int, default=0, metavar="N",
                   dest="checkpoint_every")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", parents=[common, search, init],
                       help="BLEU and exact match on the test split")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("decode", parents=[common, search, init],
                       help="print src/hyp/ref token ids for the test split")
    p.set_defaults(func=cmd_decode)

    p = sub.add_parser("probe", parents=[common, init],
                       help="bag-of-words probing of sentence representations")
    p.add_argument("--pooling", choices=POOLINGS + ("all",), default="all")
    p.add_argument("--steps", type=int, default=300, metavar="N")
    p.set_defaults(func=cmd_probe)

    p = sub.add_parser("ablate", parents=[common, fit, search],
                       help="train and score all 8 flag combinations")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("sweep-capsules", parents=[common, fit, search],
                       help="capsule-count x routing-iteration grid")
    p.set_defaults(func=cmd_sweep_capsules)

    p = sub.add_parser("length-buckets", parents=[common, search, init],
                       help="test metrics grouped by source length")
    p.set_defaults(func=cmd_length_buckets)

    p = sub.add_parser("param-count", parents=[common],
                       help="parameter count and per-module breakdown")
    p.set_defaults(func=cmd_param_count)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as err:
        print(f"config error: {err}", file=sys.stderr)
        return 3
    except (ContractError, ShapeError, OSError, ValueError) as err:
        print(f"error: {err}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
