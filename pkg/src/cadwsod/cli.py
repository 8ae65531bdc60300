"""Command-line entry point: ``cadwsod <subcommand> ...``.

Exit codes: 0 success, 1 usage error, 2 numeric failure, 3 I/O error.
"""

from __future__ import annotations

import argparse
import json
import logging
import re
import sys
from pathlib import Path

EXIT_OK, EXIT_USAGE, EXIT_NUMERIC, EXIT_IO = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _size(text: str) -> tuple[int, int]:
    m = re.fullmatch(r"(\d+)[xX×](\d+)", text.strip())
    if not m:
        raise argparse.ArgumentTypeError(f"size must look like 64x64, got {text!r}")
    return int(m.group(1)), int(m.group(2))


def cmd_synth(args) -> int:
    from .data import generate_scenes, save_dataset

    h, w = args.size
    try:
        scenes = generate_scenes(args.n, args.seed, args.classes, h, w)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    save_dataset(args.out, scenes)
    print(f"wrote {len(scenes)} scenes to {args.out}")
    return EXIT_OK


def cmd_train(args) -> int:
    from .checkpoint import load_checkpoint, save_checkpoint
    from .config import load_config
    from .train import make_dataset, train

    cfg = load_config(args.config)
    if args.data:
        cfg = cfg.replace(data=args.data)
    resume = load_checkpoint(args.resume) if args.resume else None
    scenes = make_dataset(cfg if resume is None else _resume_cfg(resume, args.data))
    log_path = args.log or f"{args.out}.log.jsonl"
    dump_dir = str(Path(args.out).parent or ".")
    with open(log_path, "a" if resume else "w") as log_file:
        res = train(cfg, scenes, resume=resume, log_file=log_file, dump_dir=dump_dir)
    save_checkpoint(args.out, res.checkpoint())
    last = res.records[-1] if res.records else {}
    print(f"trained to iteration {res.iteration}; final loss {last.get('total', float('nan')):.6f}")
    print(f"checkpoint {args.out}, log {log_path}")
    return EXIT_OK


def _resume_cfg(ckpt, data):
    from .config import parse_config

    cfg = parse_config(ckpt.config)
    return cfg.replace(data=data) if data else cfg


def cmd_eval(args) -> int:
    from .checkpoint import load_checkpoint
    from .data import load_dataset
    from .metrics import write_detections
    from .train import evaluate, model_from_checkpoint

    model = model_from_checkpoint(load_checkpoint(args.ckpt))
    scenes = load_dataset(args.data)
    if not scenes:
        raise UsageError(f"dataset {args.data} is empty")
    ev = evaluate(model, scenes)
    with open(args.report, "w") as fh:
        for rec in ev.records():
            fh.write(json.dumps(rec) + "\n")
    det_path = args.detections or f"{args.report}.detections.txt"
    write_detections(det_path, ev.detections)
    print(f"mAP {ev.mAP:.4f}  CorLoc {ev.corloc:.4f}")
    print(f"report {args.report}, detections {det_path}")
    return EXIT_OK


def cmd_ablate(args) -> int:
    from .ablate import format_plot_data, format_table, parse_grid, run_grid
    from .config import TrainConfig, load_config

    base = load_config(args.config) if args.config else TrainConfig()
    axes = parse_grid(Path(args.grid).read_text())
    results = run_grid(base, axes)
    Path(args.out).write_text(format_table(results, [a.key for a in axes]))
    plot_path = args.plot or f"{args.out}.plot.tsv"
    Path(plot_path).write_text(format_plot_data(results, axes))
    print(f"{len(results)} cells; table {args.out}, plot data {plot_path}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    from .checks import run_checks

    ok = True
    for name, rep in run_checks(args.module, args.coords, args.seed).items():
        status = "PASS" if rep.passed else "FAIL"
        ok &= rep.passed
        print(f"{status} {name}: {rep.checked} coords checked, {len(rep.excluded)} excluded, "
              f"max rel error {rep.max_error:.3e} (tol {rep.tol:g})")
    return EXIT_OK if ok else EXIT_NUMERIC


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="cadwsod", description="Weakly supervised detection with CADM and GCM.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("synth", help="generate a synthetic dataset")
    s.add_argument("--out", required=True)
    s.add_argument("--n", type=int, default=200)
    s.add_argument("--seed", type=int, default=7)
    s.add_argument("--classes", type=int, default=4)
    s.add_argument("--size", type=_size, default=(64, 64), help="HxW, e.g. 64x64")
    s.set_defaults(fn=cmd_synth)

    s = sub.add_parser("train", help="train a detector")
    s.add_argument("--config", required=True, help="key=value config file")
    s.add_argument("--out", required=True, help="checkpoint path")
    s.add_argument("--data", help="dataset directory (overrides the config)")
    s.add_argument("--log", help="JSON-lines log (default <out>.log.jsonl)")
    s.add_argument("--resume", help="continue from this checkpoint")
    s.set_defaults(fn=cmd_train)

    s = sub.add_parser("eval", help="evaluate a checkpoint on a dataset")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--report", required=True, help="JSON-lines metrics file")
    s.add_argument("--detections", help="detection lines (default <report>.detections.txt)")
    s.set_defaults(fn=cmd_eval)

    s = sub.add_parser("ablate", help="train and evaluate a config grid")
    s.add_argument("--grid", required=True)
    s.add_argument("--out", required=True, help="TSV table")
    s.add_argument("--config", help="base config file")
    s.add_argument("--plot", help="plot-data TSV (default <out>.plot.tsv)")
    s.set_defaults(fn=cmd_ablate)

    s = sub.add_parser("gradcheck", help="finite-difference gradient checks")
    s.add_argument("--module", choices=["all", "cadm", "gcm", "head"], default="all")
    s.add_argument("--coords", type=int, default=250, help="sampled coordinates per check")
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(fn=cmd_gradcheck)
    return p


def main(argv=None) -> int:
    from .checkpoint import CheckpointError
    from .config import ConfigError
    from .tensor import NonFiniteError
    from .train import NumericFailure

    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.fn(args)
    except (UsageError, ConfigError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (NumericFailure, NonFiniteError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (OSError, CheckpointError) as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
