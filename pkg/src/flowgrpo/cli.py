"""Command line entry point: ``python -m flowgrpo <command> ...``.

Failures print a single ``error: CODE: message`` line on stderr and exit
with a nonzero status.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import harness as H
from .rewards import ExternalScorerError

EXIT_CODES = {
    "CONFIG_INVALID": 2,
    "CHECKPOINT_MISMATCH": 3,
    "CHECKPOINT_INVALID": 4,
    "NOT_FOUND": 5,
    "NON_FINITE": 6,
    "SCORER": 7,
    "INTERNAL": 1,
}


class CliError(Exception):
    def __init__(self, code: str, message: str):
        super().__init__(message)
        self.code = code


def _config(args) -> H.ExperimentConfig:
    overrides = {}
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.out is not None:
        overrides["out_dir"] = args.out
    source = args.config if args.config is not None else f"preset:{getattr(args, 'default_preset', 'circle_loglik')}"
    return H.load_config(source, overrides)


def _load(path):
    try:
        return H.load_params(path)
    except FileNotFoundError:
        raise CliError("NOT_FOUND", f"checkpoint not found: {path}") from None
    except (ValueError, KeyError) as exc:
        raise CliError("CHECKPOINT_INVALID", str(exc)) from None


def cmd_pretrain(args) -> int:
    cfg = _config(args)
    out = Path(cfg.out_dir)
    params, loss_log = H.pretrain(cfg, out, resume=args.resume)
    last = loss_log.last("loss") if len(loss_log) else float("nan")
    print(f"pretrain: {len(loss_log)} steps, final loss {last:.6f}, checkpoint {out / 'pretrain.ckpt'}")
    return 0


def cmd_grpo(args) -> int:
    cfg = _config(args)
    params, meta = _load(args.init)
    H.check_compatible(cfg, params, f"checkpoint {args.init}")
    out = Path(cfg.out_dir)
    result, reward = H.run_grpo(cfg, params, out, dump_trajectories=args.dump_trajectories)
    ev = result.eval_log
    for col in ev.columns:
        first, last = ev.column(col)[0], ev.last(col)
        print(f"{col:>12}: step0 {first:.6f} -> step{ev.steps[-1]} {last:.6f}")
    print(f"grpo: {cfg.grpo.steps} update steps in {result.rounds} rounds; outputs in {out}")
    return 0


def cmd_eval(args) -> int:
    cfg = _config(args)
    summaries = {}
    dumps = {}
    for path in [args.ckpt, *(args.compare or [])]:
        params, _ = _load(path)
        H.check_compatible(cfg, params, f"checkpoint {path}")
        summaries[Path(path).name], dumps[Path(path).name] = H.evaluate(cfg, params, args.n)
    table = H.comparison_table(summaries)
    print(table, end="")
    if args.out is not None:
        out = Path(cfg.out_dir)
        H.write_resolved(cfg, out)
        (out / "eval_summary.json").write_text(json.dumps(summaries, indent=2, sort_keys=True) + "\n", encoding="utf-8")
        (out / "eval_samples.json").write_text(json.dumps(dumps) + "\n", encoding="utf-8")
        (out / "eval_table.tsv").write_text(table, encoding="utf-8")
    return 0


def cmd_ablate(args) -> int:
    if args.preset not in H.ABLATIONS:
        raise CliError("CONFIG_INVALID", f"unknown ablation preset '{args.preset}' (choose from {', '.join(H.ABLATIONS)})")
    cfg = _config(args)
    out = Path(cfg.out_dir)
    H.write_resolved(cfg, out)
    base = None
    if args.init is not None:
        base, _ = _load(args.init)
        H.check_compatible(cfg, base, f"checkpoint {args.init}")
    results = H.run_ablation(args.preset, cfg, base, out)
    for arm, res in results.items():
        ev = res.eval_log
        cells = ", ".join(f"{c} {ev.last(c):.5f}" for c in ev.columns)
        print(f"{arm:>12}: {cells}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=None, help="override the config's master seed")
    common.add_argument("--out", default=None, help="output directory (overrides out_dir)")
    common.add_argument("--dump-trajectories", action="store_true", help="write rollout trajectories as JSON")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="flowgrpo", description="Flow-matching pretraining and GRPO post-training.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("pretrain", parents=[common], help="flow-matching pretraining")
    p.add_argument("--config", required=True)
    p.add_argument("--resume", default=None, help="continue from a pretrain checkpoint")
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("grpo", parents=[common], help="GRPO post-training from a base checkpoint")
    p.add_argument("--config", required=True)
    p.add_argument("--init", required=True)
    p.set_defaults(func=cmd_grpo)

    p = sub.add_parser("eval", parents=[common], help="held-out evaluation with all-ODE inference")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--config", required=True)
    p.add_argument("--n", type=int, default=256)
    p.add_argument("--compare", nargs="*", help="additional checkpoints for the comparison table")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", parents=[common], help="run an ablation sweep")
    p.add_argument("--preset", required=True, help=", ".join(H.ABLATIONS))
    p.add_argument("--config", default=None)
    p.add_argument("--init", default=None, help="shared base checkpoint (pretrained from the config if omitted)")
    p.set_defaults(func=cmd_ablate)
    return parser


def _classify(exc: BaseException) -> tuple[str, str]:
    if isinstance(exc, CliError):
        return exc.code, str(exc)
    if isinstance(exc, H.ConfigError):
        return "CONFIG_INVALID", str(exc)
    if isinstance(exc, H.CheckpointMismatch):
        return "CHECKPOINT_MISMATCH", str(exc)
    if isinstance(exc, ExternalScorerError):
        return exc.code, str(exc).split(": ", 1)[-1]
    if isinstance(exc, FloatingPointError):
        return "NON_FINITE", str(exc)
    if isinstance(exc, FileNotFoundError):
        return "NOT_FOUND", str(exc)
    return "INTERNAL", f"{type(exc).__name__}: {exc}"


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except Exception as exc:  # noqa: BLE001 - every failure becomes one parsable line
        code, msg = _classify(exc)
        print(f"error: {code}: {' '.join(msg.split())}", file=sys.stderr)
        return EXIT_CODES.get(code, EXIT_CODES["SCORER"] if code.startswith("SCORER") else 1)


if __name__ == "__main__":
    sys.exit(main())
