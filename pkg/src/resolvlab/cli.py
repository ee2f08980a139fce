"""Command-line front end: ``resolvlab <command> [flags]``.

Every command is a pure function of its resolved configuration.  JSON output
carries ``schemaVersion`` and the configuration echo; CSV output has a header
row and a deterministic row order.

Exit codes: 0 success, 2 validation error, 3 budget or truncation error,
4 a verified inequality failed.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import math
import os
import sys

import numpy as np

from . import dmc
from .codebook import RandomCodebook
from .divergence import (
    DEFAULT_BUDGET,
    bound_report,
    ensemble_divergence,
    exponent_curve,
)
from .errors import BudgetExceeded, InequalityViolation, ResolvlabError, TruncationError
from .simulator import FixedTime, law_histogram_deviation, martingale_check, run_many
from .stopping import StoppingProfile, lemma1_bounds, stop_law_dp

SCHEMA_VERSION = 1
EXIT_OK, EXIT_VALIDATION, EXIT_BUDGET, EXIT_INEQUALITY = 0, 2, 3, 4


class ConfigError(ValueError):
    """One or more configuration problems, reported together."""

    def __init__(self, problems):
        self.problems = list(problems)
        super().__init__("; ".join(self.problems))


class Failed(Exception):
    """A verified inequality failed; the payload is still emitted."""

    def __init__(self, payload, message):
        self.payload = payload
        super().__init__(message)


# ---------------------------------------------------------------------------
# parsing helpers


def parse_rates(text):
    """``start:stop:step`` (inclusive) or a comma-separated list."""
    text = text.strip()
    if ":" in text:
        parts = text.split(":")
        if len(parts) != 3:
            raise ValueError(f"rate grid {text!r} must be start:stop:step")
        a, b, s = (float(x) for x in parts)
        if s <= 0 or b < a:
            raise ValueError(f"rate grid {text!r} needs step > 0 and stop >= start")
        count = int(math.floor((b - a) / s + 1e-9)) + 1
        return [round(a + i * s, 12) for i in range(count)]
    return [float(x) for x in text.split(",") if x.strip()]


def parse_int_list(text):
    return [int(x) for x in text.split(",") if x.strip()]


def _channel(args, problems):
    if args.channel and args.channel_file:
        problems.append("give either --channel or --channel-file, not both")
        return None
    try:
        if args.channel_file:
            return dmc.load_channel(args.channel_file)
        return dmc.parse_channel(args.channel or "bsc:0.11")
    except (OSError, ValueError) as exc:
        problems.append(f"channel: {exc}")
        return None


def _distribution(text, size, name, problems):
    if text is None:
        return dmc.uniform(size) if size else None
    try:
        d = dmc.parse_distribution(text)
    except ValueError as exc:
        problems.append(f"{name}: {exc}")
        return None
    if size and d.size != size:
        problems.append(f"{name}: expected {size} entries, got {d.size}")
        return None
    return d


def _profile(args, problems):
    if args.k is None:
        problems.append("--k is required")
    elif args.k < 1:
        problems.append("--k must be at least 1")
    if args.alpha is None or not args.alpha > 0:
        problems.append("--alpha must be positive")
    if args.p is None or not 0 < args.p < 1 or args.p == 0.5:
        problems.append("--p must lie in (0, 1) and differ from 1/2")
    if problems:
        return None
    try:
        return StoppingProfile(args.k, args.alpha, args.p, n_max=getattr(args, "n_max", None))
    except ValueError as exc:
        problems.append(f"profile: {exc}")
        return None


def _check(problems):
    if problems:
        raise ConfigError(problems)


def _config_echo(args):
    skip = {"func", "config", "out", "format"}
    return {k: v for k, v in sorted(vars(args).items()) if k not in skip}


def _workers(args):
    return args.workers if args.workers else (os.cpu_count() or 1)


# ---------------------------------------------------------------------------
# commands; each returns (payload dict, csv rows or None)


def cmd_exponents(args):
    problems = []
    channel = _channel(args, problems)
    rates = []
    try:
        rates = parse_rates(args.rates)
        if any(r < 0 for r in rates):
            problems.append("rates must be nonnegative")
    except ValueError as exc:
        problems.append(str(exc))
    inp = _distribution(args.input, channel.input_size if channel else 0, "--input", problems)
    ref = _distribution(args.reference, None, "--reference", problems) if args.reference else None
    _check(problems)
    rows = dmc.exponent_table(channel, inp, rates, reference=ref)
    payload = {
        "mutualInformation": dmc.mutual_information(channel, inp),
        "rows": rows,
    }
    return payload, rows


def cmd_stopping(args):
    problems = []
    prof = _profile(args, problems)
    if args.mode == "mc" and (args.runs is None or args.runs < 1):
        problems.append("--runs must be at least 1 in mc mode")
    _check(problems)
    law = stop_law_dp(prof)
    payload = {
        "nMin": prof.n_min,
        "nMax": prof.n_max,
        "residualMass": law.residual_mass,
        "moments": law.moments,
        "expectedLength": law.expected_length,
        "rate": law.rate(),
        "rateLimit": prof.rate_limit(),
        "law": law.to_rows(),
    }
    if prof.k >= prof.alpha:
        lo, hi = lemma1_bounds(prof)
        payload["bounds"] = {"lower": lo, "upper": hi, "holds": bool(lo <= law.rate() <= hi)}
    if args.mode == "mc":
        summary = run_many(RandomCodebook(prof.k, args.seed), prof, args.runs, args.seed,
                           workers=_workers(args))
        summary.pop("stopStates")
        summary["maxHistogramDeviationSigma"] = law_histogram_deviation(law, summary)
        payload["simulation"] = summary
    return payload, law.to_rows()


def cmd_divergence(args):
    problems = []
    prof = _profile(args, problems)
    if args.codes < 1:
        problems.append("--codes must be at least 1")
    if args.budget < 1:
        problems.append("--budget must be positive")
    if prof is not None and not 0 < prof.p < 0.5:
        problems.append("the divergence bounds need --p in (0, 1/2)")
    if prof is not None and prof.k < 2:
        problems.append("the divergence bounds need --k >= 2")
    _check(problems)
    law = stop_law_dp(prof)
    ens = ensemble_divergence(prof, args.codes, args.master_seed, method=args.method, law=law,
                              budget=args.budget, horizon=args.horizon, runs=args.runs,
                              seed=args.seed, workers=_workers(args))
    bounds = bound_report(prof, law).to_dict()
    slack = 4 * ens["stderr"]
    holds = ens["meanUpper"] <= bounds["totalBound"] + slack
    payload = {
        "ensemble": ens,
        "bounds": bounds,
        "check": {"meanLeTotalBound": bool(holds), "slack": slack},
    }
    rows = [
        {"codeId": i, "divergence": d, "upper": u}
        for i, (d, u) in enumerate(zip(ens["perCode"], ens["perCodeUpper"]))
    ]
    if not holds:
        raise Failed(payload, "ensemble mean exceeds the analytic bound")
    return payload, rows


def cmd_curve(args):
    problems = []
    try:
        ks = parse_int_list(args.ks)
        if not ks or min(ks) < 2:
            problems.append("--ks needs integers >= 2")
    except ValueError as exc:
        problems.append(f"--ks: {exc}")
    if not 0 < args.p < 0.5:
        problems.append("--p must lie in (0, 1/2)")
    if not args.alpha > 0:
        problems.append("--alpha must be positive")
    _check(problems)
    rows = exponent_curve(ks, args.alpha, args.p, args.codes, args.master_seed, method=args.method,
                          budget=args.budget, runs=args.runs, seed=args.seed, workers=_workers(args))
    return {"rows": rows}, rows


def cmd_converse(args):
    problems = []
    channel = _channel(args, problems)
    ref = _distribution(args.reference, channel.output_size if channel else 0, "--reference", problems)
    if args.div < 0:
        problems.append("--div must be nonnegative")
    if not args.exp_length > 0:
        problems.append("--exp-length must be positive")
    _check(problems)
    bound = dmc.converse_lower_bound(channel, ref, args.div, args.exp_length)
    payload = {"lowerBound": bound}
    if args.rate is not None:
        payload["rate"] = args.rate
        payload["holds"] = bool(args.rate >= bound - 1e-9)
        if not payload["holds"]:
            raise Failed(payload, f"rate {args.rate} is below the converse bound {bound}")
    return payload, [payload]


def cmd_martingale(args):
    problems = []
    if args.fixed_time is not None:
        if args.fixed_time < 1:
            problems.append("--fixed-time must be at least 1")
        if args.p is None or not 0 < args.p < 1:
            problems.append("--p must lie in (0, 1)")
        rule = FixedTime(args.fixed_time, args.p) if not problems else None
    else:
        rule = _profile(args, problems)
    if args.runs < 1:
        problems.append("--runs must be at least 1")
    _check(problems)
    res = martingale_check(rule, args.runs, args.seed)
    if not res["holds"]:
        raise Failed(res, "stopped-martingale inequality failed")
    return res, [res]


# ---------------------------------------------------------------------------
# argument parser


def _common(p, channel=False, profile=False):
    p.add_argument("--format", choices=("json", "csv"), default="json")
    p.add_argument("--out", help="output path (default: stdout)")
    p.add_argument("--workers", type=int, default=None, help="worker processes (default: all CPUs)")
    p.add_argument("--seed", type=int, default=0, help="unsigned 64-bit experiment seed")
    p.add_argument("--config", help="JSON file of flag defaults (keys are flag names)")
    if channel:
        p.add_argument("--channel", help="bsc:<p> or an inline matrix")
        p.add_argument("--channel-file", help="plain-text transition matrix")
    if profile:
        p.add_argument("--k", type=int)
        p.add_argument("--alpha", type=float, default=2.0)
        p.add_argument("--p", type=float, default=0.11)


def build_parser():
    parser = argparse.ArgumentParser(prog="resolvlab", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("exponents", help="resolvability exponents over a rate grid")
    _common(p, channel=True)
    p.add_argument("--rates", default="0:1:0.01")
    p.add_argument("--input", help="input distribution (default uniform)")
    p.add_argument("--reference", help="target output distribution (default: induced output)")
    p.set_defaults(func=cmd_exponents)

    p = sub.add_parser("stopping", help="exact stopping-time law and finite-k rate bounds")
    _common(p, profile=True)
    mode = p.add_mutually_exclusive_group()
    mode.add_argument("--exact", dest="mode", action="store_const", const="exact")
    mode.add_argument("--mc", dest="mode", action="store_const", const="mc")
    p.add_argument("--runs", type=int, default=100_000)
    p.add_argument("--n-max", type=int, default=None)
    p.set_defaults(func=cmd_stopping, mode="exact")

    p = sub.add_parser("divergence", help="ensemble output divergence and its analytic bound")
    _common(p, profile=True)
    mode = p.add_mutually_exclusive_group()
    mode.add_argument("--exact", dest="method", action="store_const", const="exact")
    mode.add_argument("--mc", dest="method", action="store_const", const="mc")
    p.add_argument("--codes", type=int, default=50)
    p.add_argument("--master-seed", type=int, default=0)
    p.add_argument("--runs", type=int, default=10_000, help="runs per code in mc mode")
    p.add_argument("--budget", type=int, default=DEFAULT_BUDGET, help="enumeration events per n")
    p.add_argument("--horizon", type=int, default=None)
    p.set_defaults(func=cmd_divergence, method="exact")

    p = sub.add_parser("curve", help="exponent-curve rows (k, E[N], mean D, exponent, bound)")
    _common(p)
    p.add_argument("--ks", default="6,8,10")
    p.add_argument("--alpha", type=float, default=2.0)
    p.add_argument("--p", type=float, default=0.11)
    p.add_argument("--codes", type=int, default=10)
    p.add_argument("--master-seed", type=int, default=0)
    p.add_argument("--method", choices=("exact", "mc"), default="exact")
    p.add_argument("--runs", type=int, default=10_000)
    p.add_argument("--budget", type=int, default=1 << 22)
    p.set_defaults(func=cmd_curve)

    p = sub.add_parser("converse", help="lower bound on the randomness rate of any scheme")
    _common(p, channel=True)
    p.add_argument("--reference", help="target output distribution (default uniform)")
    p.add_argument("--div", type=float, default=0.0, help="expected divergence per block (bits)")
    p.add_argument("--exp-length", type=float, default=1.0, help="expected block length")
    p.add_argument("--rate", type=float, default=None, help="rate to verify against the bound")
    p.set_defaults(func=cmd_converse)

    p = sub.add_parser("martingale", help="stopped-martingale variance inequality")
    _common(p, profile=True)
    p.add_argument("--runs", type=int, default=100_000)
    p.add_argument("--fixed-time", type=int, default=None, help="use a rule that always stops at m")
    p.set_defaults(func=cmd_martingale)
    return parser


def _apply_config(parser, argv):
    """Re-parse with defaults taken from --config (explicit flags still win)."""
    args = parser.parse_args(argv)
    if not args.config:
        return args
    try:
        with open(args.config, encoding="utf-8") as fh:
            cfg = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError([f"--config: {exc}"]) from exc
    if not isinstance(cfg, dict):
        raise ConfigError(["--config must hold a JSON object"])
    known = vars(args)
    cfg = {k.replace("-", "_"): v for k, v in cfg.items()}
    unknown = sorted(set(cfg) - set(known))
    if unknown:
        raise ConfigError([f"--config: unknown key {k!r}" for k in unknown])
    sub = parser._subparsers._group_actions[0].choices[args.command]
    sub.set_defaults(**cfg)
    return parser.parse_args(argv)


def _cell(v):
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    if isinstance(v, (dict, list)):
        return json.dumps(v, sort_keys=True)
    return v


def _render(args, payload, rows):
    if args.format == "csv":
        if not rows:
            return ""
        buf = io.StringIO()
        cols = list(rows[0].keys())
        writer = csv.DictWriter(buf, fieldnames=cols, lineterminator="\n", extrasaction="ignore")
        writer.writeheader()
        for row in rows:
            writer.writerow({c: _cell(v) for c, v in row.items()})
        return buf.getvalue()
    doc = {"schemaVersion": SCHEMA_VERSION, "command": args.command, "config": _config_echo(args)}
    doc["result"] = payload
    return json.dumps(doc, sort_keys=True, indent=2, default=float) + "\n"


def _emit(args, text):
    if args.out:
        with open(args.out, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
    else:
        sys.stdout.write(text)


def main(argv=None):
    parser = build_parser()
    try:
        args = _apply_config(parser, argv)
        payload, rows = args.func(args)
        _emit(args, _render(args, payload, rows))
        return EXIT_OK
    except Failed as exc:
        _emit(args, _render(args, exc.payload, [exc.payload]))
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INEQUALITY
    except ConfigError as exc:
        for problem in exc.problems:
            print(f"error: {problem}", file=sys.stderr)
        return EXIT_VALIDATION
    except (BudgetExceeded, TruncationError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_BUDGET
    except InequalityViolation as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INEQUALITY
    except (ValueError, ResolvlabError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION


if __name__ == "__main__":
    sys.exit(main())
