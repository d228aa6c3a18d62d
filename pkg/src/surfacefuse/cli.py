"""Command-line entry point: gen / train / decode / analyze / gradcheck.

Only stdlib is imported at module level so SURFACEFUSE_THREADS can cap the
BLAS worker threads before numpy loads. Exit codes: 0 success, 1 validation
error, 2 runtime numeric error.
"""

from __future__ import annotations

import argparse
import os
import sys

_THREAD_VARS = ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS",
                "NUMEXPR_NUM_THREADS", "VECLIB_MAXIMUM_THREADS")


def _apply_thread_cap() -> None:
    cap = os.environ.get("SURFACEFUSE_THREADS")
    if not cap:
        return
    for var in _THREAD_VARS:
        os.environ.setdefault(var, cap)


class _Parser(argparse.ArgumentParser):
    # argparse exits 2 on bad usage by default; our contract reserves 2 for
    # numeric failures and 1 for validation problems
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="surfacefuse",
                     description="Seq2seq toolkit with encoder layer fusion and surface fusion")
    sub = parser.add_subparsers(dest="command", required=True)

    gen = sub.add_parser("gen", help="generate dataset splits")
    gen.add_argument("--task", choices=("copy", "cipher", "parallel"), required=True)
    gen.add_argument("--out", required=True, help="dataset directory to write")
    gen.add_argument("--seed", type=int, default=0)
    gen.add_argument("--n-train", type=int, default=4000)
    gen.add_argument("--n-valid", type=int, default=300)
    gen.add_argument("--n-test", type=int, default=300)
    gen.add_argument("--len-min", type=int, default=4)
    gen.add_argument("--len-max", type=int, default=10)
    gen.add_argument("--vocab-size", type=int, default=40, help="content tokens (synthetic tasks)")
    gen.add_argument("--shared-fraction", type=float, default=0.25)
    gen.add_argument("--reorder", action="store_true", help="adjacent swaps after ciphering")
    gen.add_argument("--skew", type=float, default=0.0,
                     help="Zipf exponent for token frequencies (0 = uniform)")
    gen.add_argument("--src-file", help="source side for task=parallel")
    gen.add_argument("--tgt-file", help="target side for task=parallel")
    gen.add_argument("--min-freq", type=int, default=1)

    tr = sub.add_parser("train", help="train from a run config")
    tr.add_argument("--config", required=True, help="run config JSON")
    tr.add_argument("--seed", type=int, default=None, help="override config seed")
    tr.add_argument("--out", default=None, help="override run directory")
    tr.add_argument("--mode", choices=("none", "coarse", "fine", "fine-uppermost",
                                       "surface-hard", "surface-soft"), default=None)
    tr.add_argument("--lambda", dest="lambda_", type=float, default=None)
    tr.add_argument("--tau", type=float, default=None)
    tr.add_argument("--dropconnect", type=float, default=None)
    tr.add_argument("--resume", action="store_true", help="continue from last.ckpt")

    dec = sub.add_parser("decode", help="decode with a trained checkpoint")
    dec.add_argument("--ckpt", required=True)
    dec.add_argument("--input", default=None, help="source file (default: dataset test split)")
    dec.add_argument("--out", default=None, help="write hypotheses here (default: stdout)")
    dec.add_argument("--beam", type=int, default=1)
    dec.add_argument("--alpha", type=float, default=0.0, help="length-normalization power")
    dec.add_argument("--max-len", type=int, default=None)
    dec.add_argument("--dump-scores", default=None,
                     help="write per-token fused/base/surface log-probabilities to this JSON file")

    an = sub.add_parser("analyze", help="run a diagnostic over a checkpoint")
    an.add_argument("kind", choices=("heatmap", "mask-sweep", "svd", "embed-sim"))
    an.add_argument("--ckpt", required=True)
    an.add_argument("--out", default=None, help="report directory (default: run dir)")
    an.add_argument("--seed", type=int, default=0, help="seed for the random dimension split")
    an.add_argument("--metric", choices=("acc", "bleu"), default="acc")
    an.add_argument("--layer", type=int, default=None, help="restrict mask-sweep to one source")
    an.add_argument("--decode-limit", type=int, default=100,
                    help="sequences greedy-decoded for length stats (0 disables)")
    an.add_argument("--m", type=int, default=None, help="decoder layer whose weights pick the dim split")
    an.add_argument("--split", choices=("all", "non-shared"), default=None)

    gc = sub.add_parser("gradcheck", help="verify analytic gradients")
    gc.add_argument("--scope", choices=("primitives", "model", "all"), default="all")
    gc.add_argument("--seed", type=int, default=0)
    gc.add_argument("--inject-fault", action="store_true",
                    help="add a deliberately wrong gradient (negative control)")

    return parser


def main(argv=None) -> int:
    _apply_thread_cap()
    args = build_parser().parse_args(argv)

    from . import commands
    from .errors import NumericError

    try:
        if args.command == "gen":
            out = commands.generate_dataset(args)
            print(f"dataset written to {out}")
        elif args.command == "train":
            overrides = {"seed": args.seed, "out": args.out, "mode": args.mode,
                         "lambda": args.lambda_, "tau": args.tau, "p": args.dropconnect}
            summary = commands.run_train(args.config, overrides, resume=args.resume)
            last = summary["rows"][-1] if summary["rows"] else {}
            print(f"run dir: {summary['run_dir']}")
            if last:
                print(f"final: step={last['step']} loss={last['loss']:.4f} "
                      f"val_loss={last['val_loss']:.4f}")
        elif args.command == "decode":
            result = commands.run_decode(args)
            if args.out:
                print(f"wrote {result['n']} hypotheses to {args.out}")
            else:
                for line in result["hyps"]:
                    print(line)
        elif args.command == "analyze":
            payload = commands.run_analyze(args)
            print(f"analysis kind={args.kind} done; keys: {sorted(payload)}")
        elif args.command == "gradcheck":
            rows, ok = commands.run_gradcheck(args)
            for name, err, passed in rows:
                print(f"{'PASS' if passed else 'FAIL'} {name}: max relative error {err:.3e}")
            if not ok:
                print("gradient check FAILED", file=sys.stderr)
                return 2
            print("all gradient checks passed")
    except NumericError as exc:
        print(f"numeric error: {exc}", file=sys.stderr)
        return 2
    except (ValueError, OSError, IndexError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
