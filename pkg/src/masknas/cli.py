"""Command-line front end.

One subcommand per pipeline stage plus the verification and study tools.
Exit codes: 0 success, 2 configuration problems, 3 missing or unreadable
prerequisites (earlier stage not run, corrupted checkpoint), 4 training
divergence (the message names the last usable checkpoint).
"""

from __future__ import annotations

import argparse
import sys

from . import pipeline as P
from .config import apply_overrides, parse_config_file
from .errors import ConfigError, DivergenceError, FormatError, \
    PrerequisiteError
from .gradcheck import run_gradcheck

STAGE_COMMANDS = ("train-supernet", "search-mask", "finetune", "derive",
                  "eval", "ablate")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="masknas",
        description="Differentiable architecture search with hierarchical "
                    "binary masks.")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, help_ in (
            ("train-supernet", "train the weight-sharing model"),
            ("search-mask", "learn binary masks over the trained supernet"),
            ("finetune", "fine-tune the masked network"),
            ("derive", "export the discrete architecture and summaries"),
            ("eval", "report loss/accuracy and parameter counts"),
            ("ablate", "compare mask search against simpler derivations")):
        p = sub.add_parser(name, help=help_)
        p.add_argument("--config", required=True,
                       help="path to a key = value config file")
        p.add_argument("--out", default=None,
                       help="output directory (defaults to output_dir "
                            "from the config)")
        p.add_argument("--seed", type=int, default=None,
                       help="override the config seed")
        p.add_argument("--stage-override", action="append", default=[],
                       metavar="KEY=VALUE",
                       help="override one config key; repeatable")
    g = sub.add_parser("check-grad",
                       help="finite-difference audit of all gradients")
    g.add_argument("--seeds", type=int, default=10,
                   help="number of independent random draws (default 10)")
    return parser


def _load_config(args):
    cfg = parse_config_file(args.config)
    if args.stage_override:
        cfg = apply_overrides(cfg, args.stage_override)
    if args.seed is not None:
        cfg = apply_overrides(cfg, [f"seed={args.seed}"])
    out = args.out or cfg.output_dir
    if not out:
        raise ConfigError(
            "no output directory: pass --out or set output_dir")
    return cfg, out


def _print_rows(rows):
    print(P.CSV_HEADER)
    for r in rows:
        print(P.format_row(r))


def _cmd_train_supernet(args) -> int:
    cfg, out = _load_config(args)
    _net, rows = P.stage_supernet(cfg, out)
    _print_rows(rows[-2:])
    return 0


def _cmd_search_mask(args) -> int:
    cfg, out = _load_config(args)
    from .masker import sparsity_report
    _net, masks, rows = P.stage_masks(cfg, out)
    _print_rows(rows[-1:])
    for level, r in sorted(sparsity_report(masks).items()):
        print(f"kept[{level}] = {r['kept']}/{r['total']} "
              f"({r['fraction']:.4f})")
    return 0


def _cmd_finetune(args) -> int:
    cfg, out = _load_config(args)
    _model, rows = P.stage_finetune(cfg, out)
    _print_rows(rows[-2:])
    return 0


def _cmd_derive(args) -> int:
    cfg, out = _load_config(args)
    arch = P.stage_derive(cfg, out)
    ops = arch.spec.ops
    for kind in sorted(arch.cells):
        cell = arch.cells[kind]
        print(f"{kind}: " + "; ".join(
            f"n{n}<-{p}:{'+'.join(ops[i] for i in kept)}"
            for (n, p), kept in sorted(cell.kept.items())))
    print(f"artifacts written to {out}")
    return 0


def _cmd_eval(args) -> int:
    cfg, out = _load_config(args)
    _print_rows(P.run_eval(cfg, out))
    return 0


def _cmd_ablate(args) -> int:
    cfg, out = _load_config(args)
    P.run_ablation(cfg, out)
    with open(P.RunPaths(out).ablation_csv, "r", encoding="utf-8") as f:
        print(f.read(), end="")
    return 0


def _cmd_check_grad(args) -> int:
    report = run_gradcheck(num_seeds=args.seeds)
    worst = {}
    for name, _k, err in report["rows"]:
        worst[name] = max(worst.get(name, 0.0), err)
    for name in sorted(worst):
        print(f"{name:24s} max_rel_err {worst[name]:.3e}")
    verdict = "PASS" if report["passed"] else "FAIL"
    print(f"{verdict}: {len(report['rows'])} checks over "
          f"{report['num_seeds']} seeds, worst {report['max_err']:.3e} "
          f"(tolerance {report['tolerance']:g}), "
          f"{report['seconds']:.1f}s")
    return 0 if report["passed"] else 1


_HANDLERS = {
    "train-supernet": _cmd_train_supernet,
    "search-mask": _cmd_search_mask,
    "finetune": _cmd_finetune,
    "derive": _cmd_derive,
    "eval": _cmd_eval,
    "ablate": _cmd_ablate,
    "check-grad": _cmd_check_grad,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return _HANDLERS[args.command](args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except (PrerequisiteError, FormatError) as exc:
        print(f"prerequisite error: {exc}", file=sys.stderr)
        return 3
    except DivergenceError as exc:
        print(f"divergence: {exc}", file=sys.stderr)
        if exc.last_checkpoint:
            print(f"last usable checkpoint: {exc.last_checkpoint}",
                  file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
