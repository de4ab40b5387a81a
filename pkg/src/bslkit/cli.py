"""Command-line entry point: ``bslkit <subcommand> [options]``.

Exit codes: 0 success, 1 invalid usage or configuration, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import os
import sys

import numpy as np

from . import __version__
from .core import BSLError
from .harness import ConfigError, load_config, preset_config, run_experiment
from .models import MA2Model, ToadModel, ToyModel
from .synlik import CovarianceSpec, loglik_variance_diagnostic

EXPERIMENT_COMMANDS = {
    "toy-figure1": "toy posterior: misspecified, exact, adjusted and bootstrap-adjusted",
    "ma2-coverage": "MA(2) credible-interval coverage over replicate datasets",
    "toad": "toad movement model: standard, shrinkage and adjusted posteriors",
    "bvm-check": "normality of the toy posterior over a ladder of sample sizes",
    "acceptance-rate": "rejection-sampler acceptance rates as n grows",
    "m-convergence": "distance to the idealized toy posterior as m grows",
    "sandwich-check": "sampling variance of the toy posterior mean",
    "sample": "ad-hoc posterior sampling for a bundled model",
}

EPILOG = """\
common options (all experiment subcommands):
  --config PATH         INI config file with [experiment] [model] [sampler]
                        [covariance] [adjust] sections
  --preset {paper,desk}  base settings (desk: minutes, paper: full scale)
  --seed INT            random seed (default: from config, else 1)
  --out DIR             output directory (default: $BSLKIT_OUT or ./results)
  --threads INT         worker threads for replicate loops (default: 1)

sample options: --model {toy,ma2,toad}  --sampler {mh,is}
diagnose-sigma2 options: --model --theta --m [--R] [--n] [--covariance]
                         [--gamma] [--seed]

One of --config or --preset is required for experiment subcommands.
Exit codes: 0 success, 1 usage/config error, 2 runtime error.
"""


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _formatter(prog):
    return argparse.RawDescriptionHelpFormatter(prog, width=80, max_help_position=28)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(
        prog="bslkit",
        description="Bayesian synthetic likelihood experiments and diagnostics.",
        epilog=EPILOG,
        formatter_class=_formatter,
    )
    parser.add_argument("--version", action="version", version=f"bslkit {__version__}")
    common = _Parser(add_help=False)
    common.add_argument("--config", metavar="PATH", help="INI config file")
    common.add_argument("--preset", choices=("paper", "desk"), help="preset settings")
    common.add_argument("--seed", type=int, metavar="INT", help="random seed (default 1)")
    common.add_argument("--out", metavar="DIR", help="output directory (default $BSLKIT_OUT or ./results)")
    common.add_argument("--threads", type=int, metavar="INT", help="worker threads (default 1)")

    sub = parser.add_subparsers(dest="command", metavar="<command>", parser_class=_Parser)
    for name, text in EXPERIMENT_COMMANDS.items():
        p = sub.add_parser(name, parents=[common], help=text, description=text,
                           formatter_class=_formatter)
        if name == "sample":
            p.add_argument("--model", choices=("toy", "ma2", "toad"), help="model (default toy)")
            p.add_argument("--sampler", choices=("mh", "is"), help="sampler (default mh)")
    p = sub.add_parser(
        "diagnose-sigma2",
        help="variance of the log synthetic likelihood estimate at one theta",
        description="Variance of repeated log-likelihood estimates at theta; "
                    "values in [1, 3] suit pseudo-marginal MCMC.",
        formatter_class=_formatter,
    )
    p.add_argument("--model", choices=("toy", "ma2", "toad"), required=True)
    p.add_argument("--theta", required=True, metavar="VALUES", help="comma-separated parameter values")
    p.add_argument("--m", type=int, required=True, help="simulations per estimate")
    p.add_argument("--R", type=int, default=50, help="repeated estimates (default 50)")
    p.add_argument("--n", type=int, help="observations per dataset (model default)")
    p.add_argument("--covariance", choices=("full", "shrinkage", "diagonal"), default="full")
    p.add_argument("--gamma", type=float, default=1.0, help="shrinkage weight (default 1)")
    p.add_argument("--seed", type=int, default=1, metavar="INT", help="random seed (default 1)")
    return parser


def _model(name, n=None):
    if name == "toy":
        return ToyModel(n or 20)
    if name == "ma2":
        return MA2Model(n or 1000)
    return ToadModel()


def _diagnose(args) -> int:
    try:
        theta = np.array([float(v) for v in args.theta.split(",")])
    except ValueError:
        raise ConfigError(f"--theta: cannot parse {args.theta!r}") from None
    if args.m < 2:
        raise ConfigError("--m: m must be ≥ 2")
    if not 0.0 <= args.gamma <= 1.0:
        raise ConfigError("--gamma: shrinkage γ must lie in [0,1]")
    model = _model(args.model, args.n)
    if theta.size != model.dim_theta:
        raise ConfigError(f"--theta: {args.model} needs {model.dim_theta} values, got {theta.size}")
    if not model.support(theta):
        raise ConfigError(f"--theta: {theta.tolist()} outside the prior support")
    spec = CovarianceSpec(args.covariance, gamma=args.gamma)
    rng = np.random.Generator(np.random.Philox(key=np.array([args.seed, 0], dtype=np.uint64)))
    s_obs = model.simulate_summary(theta, rng)
    var = loglik_variance_diagnostic(model, theta, args.m, args.R, spec, s_obs, rng)
    verdict = "within [1, 3]" if 1.0 <= var <= 3.0 else ("below 1: m could be reduced" if var < 1.0
                                                          else "above 3: increase m")
    print(f"sigma2_hat = {var:.4f} (model={args.model}, m={args.m}, R={args.R}); {verdict}")
    return 0


def _one_line(name, s) -> str:
    if name == "toy-figure1":
        return (f"toy-figure1: sd bsl={s['bslm']['sd']:.4f} adjusted={s['adjusted']['sd']:.4f} "
                f"bootstrap={s['bootstrap_adjusted']['sd']:.4f} exact={s['exact']['sd']:.4f}")
    if name == "ma2-coverage":
        t = s["coverage_table"]
        cov = ", ".join(f"{int(100 * l)}%: " + "/".join(f"{100 * c:.0f}" for c in row)
                        for l, row in zip(t["levels"], t["coverage"]))
        return f"ma2-coverage: R={t['R']} excluded={t['excluded']} coverage {cov}"
    if name == "toad":
        return ("toad: sd standard=" + ",".join(f"{v:.3g}" for v in s["standard"]["sd"])
                + " shrinkage=" + ",".join(f"{v:.3g}" for v in s["shrinkage"]["sd"])
                + " adjusted=" + ",".join(f"{v:.3g}" for v in s["adjusted"]["sd"]))
    if name == "bvm-check":
        last = s["results"][str(s["ladder"][-1])]
        return (f"bvm-check: n={s['ladder'][-1]} skewness={last['skewness']:.3f} "
                f"excess kurtosis={last['excess_kurtosis']:.3f} sd ratios={s['sd_ratios']}")
    if name == "acceptance-rate":
        return (f"acceptance-rate: max/min ratio {s['shrinking_ratio']:.3f}, "
                f"fixed-proposal slope {s['fixed_slope']:.3f}")
    if name == "m-convergence":
        return f"m-convergence: log-log slope {s['slope_mean']:.3f} (mean), {s['slope_sd']:.3f} (sd)"
    if name == "sandwich-check":
        return f"sandwich-check: n*var(posterior mean) = {s['n_times_variance']:.3f} (target 10)"
    return f"sample: mean={s['mean']} sd={s['sd']}"


def _experiment(args) -> int:
    out = args.out or os.environ.get("BSLKIT_OUT") or "results"
    if args.config:
        cfg = load_config(args.config, experiment=args.command, preset=args.preset,
                          seed=args.seed, out=out)
    elif args.preset:
        cfg = preset_config(args.command, args.preset, seed=1 if args.seed is None else args.seed,
                            out=out)
    else:
        raise UsageError(f"bslkit {args.command}: error: one of --config or --preset is required")
    overrides = {}
    if args.threads is not None:
        overrides["threads"] = args.threads
    if args.command == "sample":
        if args.model:
            overrides["model"] = args.model
            if not args.config:
                overrides["n"] = {"toy": 20, "ma2": 1000, "toad": 66 * 63}[args.model]
                overrides["pilot_scale"] = ({"toy": 1.0, "ma2": 0.03, "toad": 0.02}[args.model],)
        if args.sampler:
            overrides["sampler"] = args.sampler
    if overrides:
        cfg = cfg.replace(**overrides)
    summary = run_experiment(cfg)
    print(_one_line(args.command, summary))
    for p in summary["outputs"]:
        print(f"  wrote {p}")
    return 0


def main(argv=None) -> int:
    parser = build_parser()
    try:
        try:
            args = parser.parse_args(argv)
        except SystemExit as exc:  # --help and --version
            return int(exc.code or 0)
        if args.command is None:
            parser.print_usage(sys.stderr)
            raise UsageError("bslkit: error: a subcommand is required")
        if args.command == "diagnose-sigma2":
            return _diagnose(args)
        return _experiment(args)
    except UsageError as exc:
        if "--config or --preset" in str(exc):
            parser.print_usage(sys.stderr)
        print(exc, file=sys.stderr)
        return 1
    except ConfigError as exc:
        print(f"bslkit: config error: {exc}", file=sys.stderr)
        return 1
    except (BSLError, ArithmeticError, ValueError, np.linalg.LinAlgError, OSError) as exc:
        chain = []
        e = exc
        while e is not None:
            chain.append(f"{type(e).__name__}: {e}")
            e = e.__cause__ or e.__context__
        print("bslkit: runtime error: " + " <- ".join(chain), file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
