"""Command-line entry point: ``eulervisc <subcommand> ...``.

Exit status is 0 when every check of the subcommand passes, 1 when a check
fails or a run ends in failure, 2 for unreadable or invalid configuration.
"""
from __future__ import annotations

import argparse
import contextlib
import json
import logging
import os
import sys

from . import __version__
from .audit import audit_rows, convergence_study, read_csv
from .config import ConfigParseError, ConfigValidationError, parse_config
from .materials import (BarotropicFluid, DomainBox, FJPower, MooneyRivlin, NeoHookean, ReferentialNeoHookean,
                        convexity_probe, fj_power_identity_check, kinetic_identity_check)
from .runner import read_summary, run

EXIT_OK, EXIT_FAIL, EXIT_CONFIG = 0, 1, 2

_PROBE_MATERIALS = {
    "neo-hookean": lambda p: NeoHookean(power=p if p is not None else 2.0 / 3.0),
    "mooney-rivlin": lambda p: MooneyRivlin(G_MR=1.0, power=p if p is not None else 2.0 / 3.0),
    "barotropic": lambda p: BarotropicFluid(),
    "referential-neo-hookean": lambda p: ReferentialNeoHookean(),
    "fj-power": lambda p: FJPower(p if p is not None else 2.0 / 3.0),
}


def thread_limit():
    """Context limiting BLAS/OpenMP pools to ``EULERVISC_THREADS`` when set."""
    width = os.environ.get("EULERVISC_THREADS")
    if not width:
        return contextlib.nullcontext()
    try:
        n = int(width)
    except ValueError:
        raise SystemExit(f"EULERVISC_THREADS must be a positive integer, got {width!r}") from None
    if n < 1:
        raise SystemExit(f"EULERVISC_THREADS must be a positive integer, got {width!r}")
    from threadpoolctl import threadpool_limits
    return threadpool_limits(limits=n)


def _cmd_run(args, model):
    try:
        with open(args.config, encoding="utf-8") as fh:
            cfg = parse_config(fh.read(), override_unsafe=args.override_unsafe)
    except (ConfigParseError, ConfigValidationError) as exc:
        print(f"error: {args.config}: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    if cfg.model != model:
        print(f"error: {args.config} describes a {cfg.model}-model run; use run-{cfg.model}", file=sys.stderr)
        return EXIT_CONFIG
    for flag in cfg.flags:
        print(f"warning: {flag}", file=sys.stderr)
    res = run(cfg, args.out, args.snapshot_every, args.quiet)
    if not args.quiet:
        for k in ("status", "steps_completed", "final_time", "total", "slack_max", "mass_drift_max",
                  "bound_violations", "halvings"):
            print(f"{k}={res.summary[k]}")
        print(f"artifacts in {os.path.abspath(args.out)}")
    return EXIT_OK if res.ok else EXIT_FAIL


def _cmd_audit(args):
    rows = read_csv(args.csv)
    verdict = audit_rows(rows, args.factor)
    for k, v in verdict.items():
        print(f"{k}={v}")
    ok = verdict["inequality_ok"]
    summary_path = args.summary or os.path.join(os.path.dirname(os.path.abspath(args.csv)), "summary.txt")
    if os.path.exists(summary_path):
        recorded = read_summary(summary_path)
        same = recorded.get("inequality_ok") == ("true" if ok else "false")
        print(f"summary_match={'true' if same else 'false'}")
        ok = ok and same
    return EXIT_OK if ok else EXIT_FAIL


def _cmd_convexity(args):
    name = args.material
    if name == "fj-power" and args.p is None:
        print("error: fj-power needs --p", file=sys.stderr)
        return EXIT_CONFIG
    energy = _PROBE_MATERIALS[name](args.p)
    box = DomainBox(j_min=args.j_min, j_max=args.j_max)
    rep = convexity_probe(energy, box, n_samples=args.samples, seed=args.seed)
    print(f"convexity_probe {name}: {rep.summary()}")
    det_ok, psd_ok, worst = kinetic_identity_check(seed=args.seed)
    print(f"kinetic_identity: {'PASS' if det_ok and psd_ok else 'FAIL'} det_ratio_max={worst['det_ratio']:.3e}")
    pw = args.p if args.p is not None else getattr(energy, "power", 2.0 / 3.0)
    fj_ok, fj_worst = fj_power_identity_check(pw, seed=args.seed)
    print(f"fj_power_identity p={pw:.6g}: {'PASS' if fj_ok else 'FAIL'} closed={fj_worst['closed']:.6e} "
          f"numeric={fj_worst['numeric']:.6e}")
    return EXIT_OK if rep.passed and det_ok and psd_ok and fj_ok else EXIT_FAIL


def _cmd_convergence(args):
    try:
        with open(args.config, encoding="utf-8") as fh:
            cfg = parse_config(fh.read(), override_unsafe=args.override_unsafe)
    except (ConfigParseError, ConfigValidationError) as exc:
        print(f"error: {args.config}: {exc}", file=sys.stderr)
        return EXIT_CONFIG

    def final_state(tau):
        res = run(cfg.with_tau(tau), None, 0, True)
        if not res.ok:
            raise RuntimeError(f"run with tau={tau} failed: {res.summary.get('failure_reason', 'audit failure')}")
        return res.state

    try:
        res = convergence_study(final_state, args.taus)
    except (ValueError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAIL
    out = res.summary()
    if args.json:
        print(json.dumps(out, default=float, indent=1))
    else:
        print("taus=" + ",".join(repr(t) for t in res.taus))
        print("successive_differences=" + ",".join(f"{d:.6e}" for d in res.successive))
        print("orders=" + ",".join(f"{o:.4f}" for o in res.orders))
        for name, orders in res.field_orders.items():
            print(f"order_{name}=" + ",".join(f"{o:.4f}" for o in orders))
        if res.drifts:
            print("drifts=" + ",".join(f"{d:.6e}" for d in res.drifts))
            print("drift_orders=" + ",".join(f"{o:.4f}" for o in res.drift_orders))
    ok = res.order >= args.min_order
    if args.require_drift:
        ok = ok and res.drift_order >= args.min_order
    print(f"verdict={'PASS' if ok else 'FAIL'} min_order={args.min_order}")
    return EXIT_OK if ok else EXIT_FAIL


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="eulervisc", description="Implicit Eulerian viscoelastic solvers with "
                                 "energy audits.")
    ap.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    ap.add_argument("-v", "--verbose", action="store_true", help="debug logging on stderr")
    sub = ap.add_subparsers(dest="command", required=True)

    for model in ("small", "large"):
        sp = sub.add_parser(f"run-{model}", help=f"run a {model}-strain configuration")
        sp.add_argument("--config", required=True, metavar="PATH")
        sp.add_argument("--out", default="out", metavar="DIR")
        sp.add_argument("--snapshot-every", type=int, default=None, metavar="N",
                        help="snapshot cadence in steps (overrides [output] snapshot_every; 0 disables)")
        sp.add_argument("--override-unsafe", action="store_true",
                        help="run even when exponent or regularization hypotheses are violated")
        sp.add_argument("--quiet", action="store_true")
        sp.set_defaults(func=lambda a, m=model: _cmd_run(a, m))

    sp = sub.add_parser("audit", help="recompute the verdicts of an audit CSV")
    sp.add_argument("csv")
    sp.add_argument("--summary", default=None, metavar="PATH", help="summary.txt to compare against")
    sp.add_argument("--factor", type=float, default=10.0, help="allowed slack in units of the Newton tolerance")
    sp.set_defaults(func=_cmd_audit)

    sp = sub.add_parser("convexity-check", help="sample Hessians of a stored energy")
    sp.add_argument("material", choices=sorted(_PROBE_MATERIALS))
    sp.add_argument("--p", type=float, default=None, help="power of |F|^2/J^p")
    sp.add_argument("--samples", type=int, default=2000)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--j-min", type=float, default=0.5)
    sp.add_argument("--j-max", type=float, default=2.0)
    sp.set_defaults(func=_cmd_convexity)

    sp = sub.add_parser("convergence", help="self-convergence under tau halving")
    sp.add_argument("config")
    sp.add_argument("--taus", type=float, nargs="+", required=True)
    sp.add_argument("--min-order", type=float, default=0.8)
    sp.add_argument("--require-drift", action="store_true", help="also require the J - det F drift order")
    sp.add_argument("--override-unsafe", action="store_true")
    sp.add_argument("--json", action="store_true")
    sp.set_defaults(func=_cmd_convergence)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(name)s: %(message)s")
    with thread_limit():
        return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
