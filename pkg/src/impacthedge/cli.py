"""Command-line experiment runner.

    impacthedge {solve,price,hedge-sim,expand,converge,selftest}
                [--config PATH] [--set section.key=value ...] [--out DIR]
                [--threads N] [--quiet]

Exit status: 0 success, 1 failed selftest criteria, 2 configuration error,
3 numerical failure. Errors are also written to stderr as one JSON object.
"""

from __future__ import annotations

import argparse
import json
import logging
import math
import sys
from pathlib import Path

from . import __version__
from .config import ConfigError, ExperimentConfig, load, render
from .core_model import ModelError

log = logging.getLogger("impacthedge")

EXIT_OK = 0
EXIT_FAILED = 1
EXIT_CONFIG = 2
EXIT_NUMERIC = 3


def _stamp(cfg: ExperimentConfig, command: str) -> dict:
    return {"version": __version__, "command": command, "config": cfg.resolved}


def _json_default(o):
    import numpy as np

    if isinstance(o, (np.floating, np.integer)):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, np.bool_):
        return bool(o)
    return str(o)


def _clean(o):
    """NaN/inf are not JSON; write them as null."""
    if isinstance(o, float) and not math.isfinite(o):
        return None
    if isinstance(o, dict):
        return {k: _clean(v) for k, v in o.items()}
    if isinstance(o, (list, tuple)):
        return [_clean(v) for v in o]
    return o


def _write_json(path: Path, doc: dict) -> None:
    doc = json.loads(json.dumps(doc, default=_json_default))
    path.write_text(json.dumps(_clean(doc), indent=2, sort_keys=True, allow_nan=False) + "\n", encoding="utf-8")


def _csv_preamble(cfg, command) -> str:
    lines = [f"# impacthedge {__version__} {command}"]
    lines += ["# " + ln for ln in render(cfg.resolved).splitlines() if ln]
    return "\n".join(lines) + "\n"


def _emit(args, text):
    if not args.quiet:
        print(text)


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------


def cmd_solve(cfg, args, out: Path):
    from .hjb import solve

    surf = solve(cfg.params, cfg.payoff, cfg.Q, cfg.grid, cfg.options)
    path = out / "value_surface.txt"
    surf.write(path, extra_header={"version": __version__, "config": cfg.resolved})
    _emit(args, f"u(t0, s0, pi0) = {surf.value(cfg.t0, cfg.s0, cfg.pi0):.10g}; wrote {path}")
    return EXIT_OK


def cmd_price(cfg, args, out: Path):
    from .pricing import price_report

    sc = cfg.scenario()
    rep = price_report(sc, cfg.grid, cfg.options, cfg.mc.n_paths, cfg.mc.n_steps, cfg.mc.seed,
                       args.threads, cfg.study.dQ)
    doc = {**rep.as_dict(), **_stamp(cfg, "price")}
    if "json" in cfg.formats:
        _write_json(out / "price_report.json", doc)
    if "csv" in cfg.formats:
        (out / "price_report.csv").write_text(_csv_preamble(cfg, "price") + rep.csv_header() + "\n"
                                              + rep.csv_row() + "\n", encoding="utf-8")
    _emit(args, f"P={rep.frictionless:.10g} pstar_fd={rep.pstar_fd:.10g} (+-{rep.fd_err:.2g}) "
                f"pstar_mc={rep.pstar_mc:.10g} (+-{rep.mc_stderr:.2g}) expansion={rep.pstar_expansion:.10g}")
    return EXIT_OK


def cmd_hedge_sim(cfg, args, out: Path):
    import numpy as np

    from .hedging import deviation_stats, evaluate_objective, martingale_diagnostic, optimal_inventory, simulate_paths
    from .hjb import solve

    sc = cfg.scenario()
    surf = solve(cfg.params, cfg.payoff, cfg.Q, cfg.grid, cfg.options)
    ens = simulate_paths(cfg.params, sc.t0, sc.s0, cfg.mc.n_paths, cfg.mc.n_steps, cfg.mc.seed, args.threads)
    res = optimal_inventory(surf, ens, sc.pi0, sc.x0, threads=args.threads)
    ev = evaluate_objective(surf, ens, sc.pi0, sc.x0, outcome=res)
    summary = {
        **res.summary(),
        "objective": ev,
        "deviation": deviation_stats(res, cfg.params),
        "deviation_tilted": deviation_stats(res, cfg.params, weights=np.exp(res.log_weight)),
        "martingale_z": martingale_diagnostic(res),
        "seed": cfg.mc.seed,
        **_stamp(cfg, "hedge-sim"),
    }
    if "csv" in cfg.formats:
        path = out / "hedge_paths.csv"
        res.write_csv(path)
        text = path.read_text(encoding="utf-8")
        path.write_text(_csv_preamble(cfg, "hedge-sim") + text, encoding="utf-8")
    if "json" in cfg.formats:
        _write_json(out / "hedge_summary.json", summary)
    _emit(args, f"E[exp(Psi+Q Gamma)] = {ev['mc_mean']:.8g} +- {ev['mc_stderr']:.2g}, exp(u) = {ev['pde_value']:.8g}")
    return EXIT_OK


def cmd_expand(cfg, args, out: Path):
    from .expansion import expansion_price, impact_coefficient

    rep = expansion_price(cfg.payoff, cfg.t0, cfg.s0, cfg.pi0, cfg.Q, cfg.params)
    doc = {**rep.as_dict(), "impact_coefficient": impact_coefficient(cfg.payoff, cfg.t0, cfg.s0, cfg.params),
           "leading_order_total": rep.base + rep.gamma_term, **_stamp(cfg, "expand")}
    _write_json(out / "expansion_report.json", doc)
    _emit(args, f"P={rep.base:.10g} gamma_term={rep.gamma_term:.6g} displacement={rep.displacement_term:.6g} "
                f"total={rep.total:.10g}")
    return EXIT_OK


def cmd_converge(cfg, args, out: Path):
    from .expansion import StudyError, convergence_study, format_table

    path = out / "convergence.csv"
    try:
        rows = convergence_study(cfg.scenario(), cfg.study.eta_list, cfg.grid, cfg.options,
                                 cfg.mc.n_paths, cfg.mc.n_steps, cfg.mc.seed, args.threads, cfg.study.dQ)
    except StudyError as exc:
        path.write_text(_csv_preamble(cfg, "converge") + "# partial table\n" + format_table(exc.rows),
                        encoding="utf-8")
        raise
    path.write_text(_csv_preamble(cfg, "converge") + format_table(rows), encoding="utf-8")
    _emit(args, format_table(rows).rstrip())
    return EXIT_OK


def cmd_selftest(cfg, args, out: Path):
    from .acceptance import Budget, Suite, ac9

    suite = Suite(Budget.from_config(cfg, args.threads))
    echo = None if args.quiet else print
    results = suite.run(echo=echo)
    if not args.no_reproducibility:
        r = ac9(args.config)
        if echo:
            echo(r.line())
        results.append(r)
    n_pass = sum(r.passed for r in results)
    doc = {
        "passed": n_pass,
        "failed": len(results) - n_pass,
        "results": [{"name": r.name, "passed": r.passed, "message": r.message, "details": r.details}
                    for r in results],
        **_stamp(cfg, "selftest"),
    }
    _write_json(out / "selftest.json", doc)
    _emit(args, f"{n_pass}/{len(results)} criteria passed")
    return EXIT_OK if n_pass == len(results) else EXIT_FAILED


COMMANDS = {
    "solve": cmd_solve,
    "price": cmd_price,
    "hedge-sim": cmd_hedge_sim,
    "expand": cmd_expand,
    "converge": cmd_converge,
    "selftest": cmd_selftest,
}


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="impacthedge", description=__doc__.splitlines()[0])
    ap.add_argument("--version", action="version", version=f"impacthedge {__version__}")
    sub = ap.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        sp = sub.add_parser(name)
        sp.add_argument("--config", metavar="PATH")
        sp.add_argument("--set", metavar="K=V", action="append", default=[], dest="overrides")
        sp.add_argument("--out", metavar="DIR")
        sp.add_argument("--threads", type=int, default=1, metavar="N")
        sp.add_argument("--quiet", action="store_true")
        if name == "selftest":
            sp.add_argument("--no-reproducibility", action="store_true",
                            help="skip the two-run reproducibility check")
    return ap


def _fail(code: int, kind: str, exc: BaseException) -> int:
    err = {"error": kind, "message": str(exc), "exit_code": code}
    where = getattr(exc, "where", None)
    if where:
        err["where"] = where
    sys.stderr.write(json.dumps(err, sort_keys=True) + "\n")
    return code


def main(argv=None) -> int:
    from .expansion import StudyError
    from .hedging import GridExitError
    from .hjb import OutOfGridError, SolverError
    from .pricing import WeightError

    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO, format="%(levelname)s %(message)s")
    if args.threads < 1:
        return _fail(EXIT_CONFIG, "config", ConfigError("--threads must be >= 1"))
    try:
        cfg = load(args.config, args.overrides)
    except ConfigError as exc:
        return _fail(EXIT_CONFIG, "config", exc)
    out = Path(args.out or cfg.out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        return _fail(EXIT_CONFIG, "output", exc)
    try:
        return COMMANDS[args.command](cfg, args, out)
    except (SolverError, GridExitError, WeightError, StudyError, OutOfGridError, FloatingPointError,
            ModelError, OverflowError) as exc:
        return _fail(EXIT_NUMERIC, "numerical", exc)


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
