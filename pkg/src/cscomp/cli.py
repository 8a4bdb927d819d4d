"""Command-line interface.

Subcommands::

    gen-matrix  write the sensing matrix as CMPX
    gen-test    draw an on-grid synthetic sample (Y and its truth X)
    solve       recover X from Y with one algorithm
    train       train an L-AMP-MMV model and save it as LMP1
    eval        evaluate a model on a file or on a fresh synthetic set
    bench       run an experiment grid from a JSON config

Exit codes: 0 success, 1 usage error, 2 runtime error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from pathlib import Path
from typing import List, Optional

import numpy as np

from .bench import ExperimentConfig, run_benchmark, write_results
from .errors import ConfigError, DegenerateInputError, FormatError, ParameterError, SolverError
from .io import read_cmpx, write_cmpx
from .lamp import TrainConfig, lamp_forward, load_model, loss, save_model, train, training_batch
from .model import SensingMatrix, build_sensing_matrix, generate_sparse_sample, synthesize_measurements
from .postprocess import prune_and_refit
from .solvers import FistaConfig, amp_mmv, fista, niht, omp_mmv

log = logging.getLogger("cscomp")

SOLVERS = ("omp", "niht", "fista", "amp_mmv", "lamp")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: error: {message}")


def _snr(text: str) -> Optional[float]:
    if text.lower() in ("none", "inf", "off"):
        return None
    return float(text)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="cscomp", description="Row-sparse MMV compression of CSI measurements.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("gen-matrix", help="write the sensing matrix")
    p.add_argument("--os", type=int, default=1)
    p.add_argument("--out", required=True)

    p = sub.add_parser("gen-test", help="draw an on-grid synthetic sample")
    p.add_argument("--os", type=int, default=1)
    p.add_argument("--s", type=int, default=10)
    p.add_argument("--p", type=int, default=16)
    p.add_argument("--snr", type=_snr, default=None, help="SNR in dB, or 'none' for noiseless")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, help="measurement file; truth goes to <stem>.truth.cmpx")

    p = sub.add_parser("solve", help="recover X from measurements")
    p.add_argument("--alg", choices=SOLVERS, required=True)
    p.add_argument("--s", type=int, default=10)
    p.add_argument("--os", type=int, default=1)
    p.add_argument("--matrix", help="CMPX sensing matrix (default: built from --os)")
    p.add_argument("--data", required=True, help="CMPX measurement matrix Y")
    p.add_argument("--model", help="LMP1 model, required for --alg lamp")
    p.add_argument("--out", help="write the estimate as CMPX")
    p.add_argument("--no-postprocess", action="store_true")

    p = sub.add_parser("train", help="train an L-AMP-MMV model")
    p.add_argument("--os", type=int, default=1)
    p.add_argument("--layers", type=int, default=20)
    p.add_argument("--gamma", type=float, default=0.5)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--pre-epochs", type=int, default=2)
    p.add_argument("--post-epochs", type=int, default=5)
    p.add_argument("--batches", type=int, default=1000)
    p.add_argument("--batch-size", type=int, default=64)
    p.add_argument("--s", type=int, default=10)
    p.add_argument("--p", type=int, default=16)
    p.add_argument("--snr", type=_snr, default=20.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)

    p = sub.add_parser("eval", help="evaluate a trained model")
    p.add_argument("--model", required=True)
    p.add_argument("--matrix")
    p.add_argument("--data", help="CMPX measurements; omit to draw a synthetic set")
    p.add_argument("--s", type=int, default=10)
    p.add_argument("--p", type=int, default=16)
    p.add_argument("--snr", type=_snr, default=20.0)
    p.add_argument("--batch-size", type=int, default=200, help="size of the synthetic set")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", help="write the estimate (file mode only)")
    p.add_argument("--no-postprocess", action="store_true")

    p = sub.add_parser("bench", help="run an experiment grid")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, help="override the config seed")
    p.add_argument("--no-postprocess", action="store_true")
    return parser


def _sensing_matrix(args) -> SensingMatrix:
    if getattr(args, "matrix", None):
        return SensingMatrix.from_array(read_cmpx(args.matrix), os=getattr(args, "os", 1) or 1)
    return build_sensing_matrix(args.os)


def _cmd_gen_matrix(args) -> int:
    f = build_sensing_matrix(args.os)
    write_cmpx(args.out, f.entries)
    print(f"wrote {f.M}x{f.N} sensing matrix to {args.out}")
    return 0


def _cmd_gen_test(args) -> int:
    f = build_sensing_matrix(args.os)
    x = generate_sparse_sample(f.N, args.p, args.s, args.seed)
    y = synthesize_measurements(f, x, args.snr, args.seed + 1)
    out = Path(args.out)
    truth = out.with_name(out.stem + ".truth.cmpx")
    write_cmpx(out, y)
    write_cmpx(truth, x)
    print(f"wrote measurements {y.shape} to {out} and truth {x.shape} to {truth}")
    return 0


def _cmd_solve(args) -> int:
    y = read_cmpx(args.data)
    if args.alg == "lamp":
        if not args.model:
            raise UsageError("solve: --model is required for --alg lamp")
        model = load_model(args.model, _sensing_matrix(args) if args.matrix else None)
        f = model.F
    else:
        f = _sensing_matrix(args)
    start = time.perf_counter()
    if args.alg == "omp":
        result = omp_mmv(f, y, args.s)
        estimate, iterations = result.estimate, result.iterations
    elif args.alg == "niht":
        result = niht(f, y, args.s)
        estimate, iterations = result.estimate, result.iterations
    elif args.alg == "fista":
        result = fista(f, y, FistaConfig())
        estimate, iterations = result.estimate, result.iterations
    elif args.alg == "amp_mmv":
        result = amp_mmv(f, y)
        estimate, iterations = result.estimate, result.iterations
    else:
        estimate, _ = lamp_forward(model, y)
        iterations = model.T
    if not args.no_postprocess:
        estimate = prune_and_refit(estimate, f, y, args.s).estimate
    elapsed = (time.perf_counter() - start) * 1e3
    residual = float(np.linalg.norm(y - f.entries @ estimate))
    if args.out:
        write_cmpx(args.out, estimate)
    print("algorithm,s,os,iterations,final_residual,wall_time_ms")
    print(f"{args.alg},{args.s},{f.os},{iterations},{residual!r},{elapsed:.3f}")
    return 0


def _cmd_train(args) -> int:
    f = build_sensing_matrix(args.os)
    cfg = TrainConfig(T=args.layers, n_pre=args.pre_epochs, n_post=args.post_epochs,
                      batches_per_epoch=args.batches, batch_size=args.batch_size, gamma=args.gamma,
                      lr=args.lr, s=args.s, p=args.p, snr_db=args.snr, seed=args.seed)

    def report(layer, phase, epoch, batch, value):
        if batch == cfg.batches_per_epoch - 1:
            log.info("layer %d %s epoch %d: last batch loss %.6g", layer, phase, epoch, value)

    model = train(f, cfg, on_batch=report)
    save_model(model, args.out)
    print(f"saved model with T={model.T}, {model.num_parameters()} parameters to {args.out}")
    return 0


def _cmd_eval(args) -> int:
    model = load_model(args.model, _sensing_matrix(args) if args.matrix else None)
    f = model.F
    if args.data:
        y = read_cmpx(args.data)
        estimate, _ = lamp_forward(model, y)
        if not args.no_postprocess:
            estimate = prune_and_refit(estimate, f, y, args.s).estimate
        if args.out:
            write_cmpx(args.out, estimate)
        print(f"residual {float(np.linalg.norm(y - f.entries @ estimate))!r}")
        return 0
    x, y = training_batch(f, args.batch_size, args.s, args.p, args.snr, np.random.default_rng(args.seed))
    x_hat, _ = lamp_forward(model, y)
    value = loss(x_hat, x, y, f, model.gamma)
    residuals = [prune_and_refit(x_hat[i], f, y[i], args.s).final_residual for i in range(len(y))]
    print(json.dumps({"samples": len(y), "loss": value, "postprocessed_residual": float(np.mean(residuals))}))
    return 0


def _cmd_bench(args) -> int:
    cfg = ExperimentConfig.from_json(args.config)
    if args.seed is not None:
        cfg.seed = args.seed
    if args.no_postprocess:
        cfg.postprocess = False
    rows, summary = run_benchmark(cfg, progress=log.info)
    summary_path = write_results(rows, summary, args.out)
    print(f"wrote {len(rows)} rows to {args.out} and {len(summary)} cells to {summary_path}")
    return 0


COMMANDS = {
    "gen-matrix": _cmd_gen_matrix,
    "gen-test": _cmd_gen_test,
    "solve": _cmd_solve,
    "train": _cmd_train,
    "eval": _cmd_eval,
    "bench": _cmd_bench,
}


def cli_main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(asctime)s %(name)s %(message)s")
        return COMMANDS[args.command](args)
    except UsageError as exc:
        print(str(exc), file=sys.stderr)
        parser.print_usage(sys.stderr)
        return 1
    except (ParameterError, DegenerateInputError, SolverError, FormatError, ConfigError, OSError) as exc:
        print(f"cscomp: error: {exc}", file=sys.stderr)
        return 2


def main() -> None:
    sys.exit(cli_main())
