"""Command-line entry point.

Commands: train-score, learn, select, train-head, eval, explain, pipeline.
Errors print machine-readable JSON on stderr with stable codes; exit codes
are 0 success, 2 config, 3 data, 4 divergence, 5 infeasible selection.

Heavy imports happen inside main() so the CLEAR_THREADS cap can be applied
to the BLAS thread pools before numpy is loaded.
"""

from __future__ import annotations

import argparse
import json
import os
import sys


def _apply_thread_cap() -> None:
    cap = os.environ.get("CLEAR_THREADS")
    if cap is None:
        return
    try:
        n = max(1, int(cap))  # 0 means fully serial, i.e. one thread
    except ValueError:
        n = 1
    for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS",
                "NUMEXPR_NUM_THREADS"):
        os.environ.setdefault(var, str(n))


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="clear",
        description="Concept-bottleneck pipeline over precomputed embeddings",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for name in ("train-score", "learn", "select", "train-head", "eval",
                 "explain", "pipeline"):
        p = sub.add_parser(name)
        p.add_argument("--config", required=True, help="run config JSON")
        p.add_argument("--out", default=None, help="output directory override")
        p.add_argument("--seed", type=int, default=None, help="seed override")
        p.add_argument("--method", default=None,
                       choices=["hungarian", "nn", "random"],
                       help="selection method override")
        p.add_argument("--k", type=int, default=None, help="bottleneck size override")
        if name == "explain":
            p.add_argument("--items", required=True,
                           help="comma-separated manifest item ids")
    return parser


def main(argv: list[str] | None = None) -> int:
    _apply_thread_cap()
    args = build_parser().parse_args(argv)

    from . import pipeline
    from .errors import ClearError

    try:
        cfg = pipeline.load_config(
            args.config, out_dir=args.out, seed=args.seed,
            method=args.method, k=args.k,
        )
        if args.command == "train-score":
            result = pipeline.cmd_train_score(cfg)
        elif args.command == "learn":
            result = pipeline.cmd_learn(cfg)
        elif args.command == "select":
            result = pipeline.cmd_select(cfg)
        elif args.command == "train-head":
            result = pipeline.cmd_train_head(cfg)
        elif args.command == "eval":
            result = pipeline.cmd_eval(cfg)
        elif args.command == "explain":
            items = [s for s in args.items.split(",") if s]
            result = pipeline.cmd_explain(cfg, items)
        else:
            result = pipeline.cmd_pipeline(cfg)
    except ClearError as e:
        sys.stderr.write(json.dumps(e.to_json()) + "\n")
        return e.exit_code
    except Exception as e:  # pragma: no cover - unexpected failure path
        sys.stderr.write(json.dumps({"error": "internal", "message": str(e)}) + "\n")
        return 1

    compact = dict(result) if isinstance(result, dict) else {"reports": result}
    for noisy in ("losses", "val_curve", "loss_curve", "stages", "config"):
        compact.pop(noisy, None)
    sys.stdout.write(json.dumps(compact, indent=2, sort_keys=True) + "\n")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
