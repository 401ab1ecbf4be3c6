"""Command-line entry point: ``fedvol run|synth|consensus-check|grad-check``.

Exit codes: 0 success, 1 validation or config error, 2 runtime or verification failure.
"""
from __future__ import annotations

import argparse
import logging
import sys
import time
from datetime import date

from .config import SEED_ENV, load_config
from .consensus import consensus_report
from .data import GarchParams, generate_synthetic, write_price_csv
from .errors import FedVolError, VerificationError
from .model import ModelConfig, grad_check
from .scenarios import format_summary, run_scenario

EXIT_OK, EXIT_INVALID, EXIT_RUNTIME = 0, 1, 2
GRAD_TOL = 1e-4
GRAD_SEEDS = (0, 1, 2)


def _cmd_run(args) -> int:
    cfg = load_config(args.config)
    t0 = time.perf_counter()
    result = run_scenario(cfg)
    title = f"scenario={cfg.scenario} seed={cfg.seed} N={cfg.n_clients} T={cfg.rounds} E={cfg.local_epochs}"
    if cfg.scenario == "dp":
        title += f" clip={cfg.dp_clip:g} sigma={cfg.dp_sigma:g}"
    print(format_summary(result.summary, title), end="")
    for e in result.history.events:
        print(f"note: {e}")
    print(f"wrote {cfg.output} ({time.perf_counter() - t0:.1f}s)")
    return EXIT_OK


def _cmd_synth(args) -> int:
    params = GarchParams(args.omega, args.alpha, args.beta)
    series = generate_synthetic(args.days, params, args.seasonal_amp, args.start,
                                seed=args.seed, market_id=args.market)
    write_price_csv(series, args.out)
    print(f"wrote {len(series)} rows to {args.out}")
    return EXIT_OK


def _cmd_consensus(args) -> int:
    if args.n < 1:
        raise FedVolError("--n must be >= 1")
    t0 = time.perf_counter()
    rep = consensus_report(args.n, seed=args.seed)
    for line in rep.lines():
        print(line)
    print(f"{'PASS' if rep.passed else 'FAIL'} ({time.perf_counter() - t0:.3f}s)")
    return EXIT_OK if rep.passed else EXIT_RUNTIME


def _cmd_grad(args) -> int:
    cfg = ModelConfig(args.input_dim, args.hidden_dim, args.horizon)
    worst = 0.0
    for seed in args.seeds:
        err = grad_check(cfg, seed=seed)
        worst = max(worst, err)
        print(f"seed {seed}: max relative error {err:.3e}")
    ok = worst < GRAD_TOL
    print(f"{'PASS' if ok else 'FAIL'}: worst {worst:.3e} (tol {GRAD_TOL:.0e})")
    return EXIT_OK if ok else EXIT_RUNTIME


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="fedvol", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run a scenario config",
                         epilog=f"{SEED_ENV} overrides the seed in the config file.")
    run.add_argument("--config", required=True)
    run.set_defaults(func=_cmd_run)

    syn = sub.add_parser("synth", help="write a synthetic GARCH(1,1) price CSV")
    syn.add_argument("--out", required=True)
    syn.add_argument("--days", type=int, default=2000)
    syn.add_argument("--seed", type=int, default=0)
    syn.add_argument("--omega", type=float, default=5e-6)
    syn.add_argument("--alpha", type=float, default=0.10)
    syn.add_argument("--beta", type=float, default=0.85)
    syn.add_argument("--seasonal-amp", type=float, default=0.0)
    syn.add_argument("--start", type=date.fromisoformat, default=date(2015, 1, 1))
    syn.add_argument("--market", default="SYN")
    syn.set_defaults(func=_cmd_synth)

    con = sub.add_parser("consensus-check", help="verify one-shot consensus of the uniform matrix")
    con.add_argument("--n", type=int, default=3)
    con.add_argument("--seed", type=int, default=0)
    con.set_defaults(func=_cmd_consensus)

    gc = sub.add_parser("grad-check", help="compare BPTT gradients to central differences")
    gc.add_argument("--seeds", type=int, nargs="+", default=list(GRAD_SEEDS))
    gc.add_argument("--input-dim", type=int, default=3)
    gc.add_argument("--hidden-dim", type=int, default=4)
    gc.add_argument("--horizon", type=int, default=3)
    gc.set_defaults(func=_cmd_grad)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        # argparse exits 2 on usage errors; usage errors are validation errors here
        return EXIT_OK if exc.code == 0 else EXIT_INVALID
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except VerificationError as exc:
        print(f"verification failed: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except (FedVolError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except (ArithmeticError, RuntimeError) as exc:
        print(f"runtime failure: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
