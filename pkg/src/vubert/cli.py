"""Command line: ``vubert {train,eval,generate,ablate,params,synth}``.

Exit codes: 0 success, 1 usage or configuration error (including a
checkpoint/config mismatch), 2 data error, 3 training error.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

from vubert.config import PRESETS, ConfigError, RunConfig
from vubert.data import save_corpus
from vubert.embeddings import PatchEmbedConfig, Vocab, count_patch_params, detokenize
from vubert.errors import ContractError, DataError, ShapeError, TrainingError, TruncationError
from vubert.model import PAPER_BASE, VUBert
from vubert.objectives import generate_answer
from vubert.runner import (
    AblationCell, apply_ablation, build_vocab, check_compatible, evaluate_checkpoint, format_table, load_checkpoint,
    load_split, run_ablation, train,
)

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_TRAIN = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def resolve_config(args) -> RunConfig:
    if args.preset not in PRESETS:
        raise ConfigError(f"unknown preset {args.preset!r}; choose from {sorted(PRESETS)}")
    cfg = PRESETS[args.preset]
    if args.config:
        cfg = RunConfig.from_file(args.config, base=cfg)
    overrides = {}
    for item in args.set or []:
        key, sep, value = item.partition("=")
        if not sep:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        overrides[key.strip()] = value.strip()
    if args.seed is not None:
        overrides["train.seed"] = str(args.seed)
    return cfg.with_overrides(overrides).validate()


def parse_indices(text: str, n: int) -> list[int]:
    """``"0,3,5-7"`` style selector over ``range(n)``."""
    out = []
    for part in text.split(","):
        part = part.strip()
        lo, dash, hi = part.partition("-")
        try:
            idx = list(range(int(lo), int(hi) + 1)) if dash else [int(part)]
        except ValueError:
            raise UsageError(f"bad instance selector {part!r}") from None
        for i in idx:
            if not 0 <= i < n:
                raise UsageError(f"instance {i} out of range: split has {n} instances")
        out += idx
    return out


def parse_cells(text: str) -> list[AblationCell]:
    cells = []
    for part in text.split(","):
        turns, sep, vis = part.strip().partition(":")
        if not sep or vis not in ("0", "1"):
            raise UsageError(f"bad cell {part!r}; expected TURNS:VIS such as 9:1")
        cells.append(AblationCell(int(turns), vis == "1"))
    return cells


def _out_dir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


# ---------------------------------------------------------------- commands

def cmd_train(args) -> int:
    cfg = resolve_config(args)
    out = _out_dir(args)
    print(f"config_hash={cfg.hash()}")
    result = train(cfg, out, log=print)
    print(f"checkpoint={result.checkpoint} steps={result.state.step}")
    return EXIT_OK


def cmd_eval(args) -> int:
    cfg = resolve_config(args)
    split = args.split or cfg.data.eval_split
    report = evaluate_checkpoint(args.checkpoint, cfg, split, args.mode, args.cache)
    out = _out_dir(args)
    stem = f"eval_{split}_{args.mode}"
    (out / f"{stem}.txt").write_text(report.text, encoding="utf-8")
    (out / f"{stem}.json").write_text(report.record + "\n", encoding="utf-8")
    sys.stdout.write(report.text)
    return EXIT_OK


def cmd_generate(args) -> int:
    cfg = resolve_config(args)
    model, _, meta = load_checkpoint(args.checkpoint)
    check_compatible(meta, cfg)
    split = args.split or cfg.data.eval_split
    instances = apply_ablation(load_split(cfg, split), cfg)
    if args.max_len < 1:
        raise UsageError("--max-len must be >= 1")
    print(f"config_hash={cfg.hash()} model_hash={meta['model_hash']} split={split}")
    for i in parse_indices(args.instances, len(instances)):
        answer = detokenize(generate_answer(instances[i], model, args.max_len), model.vocab)
        print(f"{i}\t{instances[i].question}\t{answer}\t(gt: {instances[i].answer})")
    return EXIT_OK


def cmd_ablate(args) -> int:
    cfg = resolve_config(args)
    if args.cells:
        cells = parse_cells(args.cells)
    else:
        turns = [int(t) for t in args.turns.split(",")]
        vis = [v.strip() == "1" for v in args.vis.split(",")]
        cells = [AblationCell(t, v) for v in vis for t in turns]
    out = _out_dir(args)
    rows, failures = run_ablation(cfg, cells, out, log=print)
    table = format_table(rows, cfg.hash())
    (out / "ablation.tsv").write_text(table, encoding="utf-8")
    sys.stdout.write(table)
    for f in failures:
        print(f"FAILED {f}", file=sys.stderr)
    return EXIT_TRAIN if failures else EXIT_OK


def params_report(cfg: RunConfig, vocab_size: int | None = None) -> str:
    """Parameter accounting for ``cfg`` plus reference evaluations of the patch formula."""
    m = cfg.model
    if vocab_size is None:
        vocab_size = len(build_vocab(cfg))
    model = VUBert(m, Vocab([f"w{i}" for i in range(vocab_size - 7)]), np.random.default_rng(0))
    params = model.named_params()
    patch_counted = params["patch.w"].size + params["patch.b"].size
    groups = {"embeddings": sum(p.size for k, p in params.items() if k.startswith("emb.")),
              "patch": patch_counted,
              "encoder": sum(p.size for k, p in params.items() if k.startswith("layer")),
              "mlm_head": params["mlm.bias"].size}
    base_patch = PatchEmbedConfig.init(PAPER_BASE.patch, PAPER_BASE.channels, PAPER_BASE.hidden,
                                       np.random.default_rng(0))
    lines = [f"config_hash={cfg.hash()}", f"vocab_size={vocab_size}", f"total={model.n_params()}"]
    lines += [f"subtotal.{k}={v}" for k, v in groups.items()]
    lines += [
        f"patch.formula=({m.patch}^2*{m.channels}+1)*{m.hidden}",
        f"patch.formula_value={count_patch_params(m.patch, m.channels, m.hidden)}",
        f"patch.formula_matches_counted={count_patch_params(m.patch, m.channels, m.hidden) == patch_counted}",
        f"reference.patch.P32_C3_D768={count_patch_params(32, 3, 768)}",
        f"reference.patch.P32_C3_D768_counted={base_patch.n_params()}",
        f"reference.patch.P32_C3_D192={count_patch_params(32, 3, 192)}",
        "note=a 0.59M patch-pathway count matches the D=192 evaluation (590016), "
        "not the D=768 base configuration (2360064); both are reported, neither is assumed",
    ]
    return "\n".join(lines) + "\n"


def cmd_params(args) -> int:
    cfg = resolve_config(args)
    text = params_report(cfg, args.vocab_size)
    if args.out:
        (_out_dir(args) / "params.txt").write_text(text, encoding="utf-8")
    sys.stdout.write(text)
    return EXIT_OK


def cmd_synth(args) -> int:
    cfg = resolve_config(args)
    if cfg.data.source != "synthetic":
        raise UsageError("synth needs data.source=synthetic")
    out = _out_dir(args)
    for split in (cfg.data.train_split, cfg.data.eval_split):
        instances = load_split(cfg, split)
        save_corpus(instances, out, split)
        print(f"split={split} instances={len(instances)}")
    (out / "config.txt").write_text(f"# config_hash = {cfg.hash()}\n" + cfg.to_text(), encoding="utf-8")
    print(f"config_hash={cfg.hash()} out={out}")
    return EXIT_OK


# ---------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="flat key = value config file")
    common.add_argument("--preset", default="desk", help="base preset (desk or paper-base)")
    common.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config key")
    common.add_argument("--seed", type=int, help="shorthand for --set train.seed=N")
    common.add_argument("--out", default="runs/latest", help="output directory")

    parser = _Parser(prog="vubert", description="Unified vision-dialog encoder: train, evaluate, ablate.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("train", parents=[common], help="train from scratch and checkpoint")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", parents=[common], help="rank candidates and report metrics")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--split", help="split to evaluate (default: data.eval_split)")
    p.add_argument("--mode", choices=("discriminative", "generative"), default="discriminative")
    p.add_argument("--cache", help="candidate cache file to build or reuse")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("generate", parents=[common], help="greedy answers for selected instances")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--split")
    p.add_argument("--instances", default="0", help="indices such as 0,3,5-7")
    p.add_argument("--max-len", type=int, default=5)
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("ablate", parents=[common], help="dialog-turn / image ablation grid")
    p.add_argument("--turns", default="0,3,9", help="history turn counts")
    p.add_argument("--vis", default="1,0", help="image flags (1 keeps the image)")
    p.add_argument("--cells", help="explicit TURNS:VIS list, e.g. 9:1,9:0,3:1,0:1 (overrides the grid)")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("params", parents=[common], help="parameter accounting")
    p.add_argument("--vocab-size", type=int, help="skip building the vocabulary from data")
    p.set_defaults(func=cmd_params, out=None)

    p = sub.add_parser("synth", parents=[common], help="write the synthetic corpus to --out")
    p.set_defaults(func=cmd_synth)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, UsageError, ContractError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, TruncationError, ShapeError, FileNotFoundError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except TrainingError as exc:
        print(f"training error: {exc}", file=sys.stderr)
        return EXIT_TRAIN


if __name__ == "__main__":
    sys.exit(main())
