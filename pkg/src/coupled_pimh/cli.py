"""Command-line entry point: ``coupled-pimh <subcommand> [options]``."""

from __future__ import annotations

import argparse
import logging
import sys

from .harness import KINDS, ExperimentConfig, rows_to_csv, run_experiment, write_outputs

log = logging.getLogger("coupled_pimh")


def _add_common(p: argparse.ArgumentParser):
    p.add_argument("--config", help="YAML experiment config; command-line flags override it")
    p.add_argument("--seed", type=int, help="master seed (u64)")
    p.add_argument("--replicates", type=int, help="number of independent replicates R")
    p.add_argument("--threads", type=int, help="worker threads for replicate farming")
    p.add_argument("--out", help="output CSV path (default: stdout)")
    p.add_argument("--plot-data", action="store_true", help="also write two-column .dat files next to --out")
    p.add_argument("--model", choices=["ar1", "kinetic", "sv"])
    p.add_argument("--T", type=int, dest="T", help="length of the synthetic dataset")
    p.add_argument("--data-seed", type=int)
    p.add_argument("--data", dest="data_path", help="observations CSV (one row per time, header y_1,...)")
    p.add_argument("--N", type=int, dest="N", help="number of particles")
    p.add_argument("--N-grid", dest="N_grid", type=lambda s: [int(v) for v in s.split(",")], help="comma-separated particle counts")
    p.add_argument("--scheme", choices=["multinomial", "systematic"])
    p.add_argument("--k", type=int)
    p.add_argument("--m", type=int)
    p.add_argument("--h", help="test function (x1, xT, sum_x, sum_x2, identity, component:c, mixture)")
    p.add_argument("--rao-blackwell", action="store_const", const=True, default=None)
    p.add_argument("--sigma-replicates", type=int)
    p.add_argument("--z", type=float, help="CI multiplier")
    p.add_argument("-v", "--verbose", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="coupled-pimh", description="Unbiased smoothing with coupled particle independent Metropolis-Hastings.")
    sub = parser.add_subparsers(dest="kind", required=True)
    helps = {
        "pf": "log-likelihood estimates from independent particle filters",
        "sigma": "estimate sd(log p_N) and the recommended particle count",
        "coupled": "coupled PIMH runs: meeting times and unbiased estimates",
        "filtering": "unbiased filtering estimates for every t from one proposal stream",
        "large-sample": "meeting-time law under the log-normal limit",
        "smc": "coupled PIMH with a tempered SMC sampler proposal",
        "inefficiency-grid": "inefficiency (m-k+1) Var[H] N over a particle-count grid",
    }
    for kind in KINDS:
        p = sub.add_parser(kind, help=helps[kind])
        _add_common(p)
        if kind == "large-sample":
            p.add_argument("--sigma", type=float, help="sigma; estimated from model and N when omitted")
            p.add_argument("--n-max", type=int)
        if kind == "smc":
            p.add_argument("--target", choices=["mixture", "conjugate-gaussian"])
            p.add_argument("--smc-T", type=int, help="number of temperatures")
            p.add_argument("--no-resample", dest="resample", action="store_const", const=False, default=None)
            p.add_argument("--mh-steps", type=int)
            p.add_argument("--mh-scale", type=float)
    return parser


_SKIP = {"config", "out", "plot_data", "verbose", "kind"}


def config_from_args(args) -> ExperimentConfig:
    if args.config:
        cfg = ExperimentConfig.from_yaml(args.config)
        if cfg.kind != args.kind:
            log.info("config kind %r overridden by subcommand %r", cfg.kind, args.kind)
    else:
        cfg = ExperimentConfig(kind=args.kind)
    overrides = {k: v for k, v in vars(args).items() if k not in _SKIP}
    overrides["kind"] = args.kind
    if args.out:
        overrides["out"] = args.out
    cfg = cfg.with_overrides(**overrides)
    return cfg.validate()


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = config_from_args(args)
        output = run_experiment(cfg)
        if cfg.out:
            for path in write_outputs(output, cfg.out, args.plot_data):
                log.info("wrote %s", path)
        else:
            sys.stdout.write(rows_to_csv(output.rows))
            if output.summary:
                sys.stdout.write("\n" + rows_to_csv(output.summary))
        failed = sum(1 for r in output.rows if r.get("ok") == 0)
        if failed:
            print(f"coupled-pimh: {failed} replicate(s) failed; see the error column", file=sys.stderr)
            return 3
    except Exception as exc:
        print(f"coupled-pimh: error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
