"""``wideformer`` command line: plan, propagate, verify, report.

Exit codes: 0 success, 1 a check or the numerics failed, 2 bad input
(config, arguments or CSV files).
"""
from __future__ import annotations

import argparse
import os
import sys
import tempfile
from pathlib import Path
from typing import Sequence

import numpy as np

from .arch_plan import ScalingPlan, build_plan, plan_table, table_literals
from .config import ConfigError, RunConfig, load_config
from .ntk_engine import propagate
from .report import ReportError, render_reports
from .verify import (
    CRITERIA,
    INCONCLUSIVE,
    FAIL,
    Suite,
    by_criterion,
    criterion_verdict,
    measurements_csv,
    report_json,
    results_csv,
    run_suite,
)

EXIT_OK, EXIT_FAIL, EXIT_INPUT = 0, 1, 2


class InputError(Exception):
    pass


def write_atomic(path: Path, text: str) -> None:
    """Write via a temporary file in the same directory, then rename over ``path``."""
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def config_plan(cfg: RunConfig, n: int | None = None) -> ScalingPlan:
    arch = cfg.arch if n is None else cfg.arch.widen(n)
    plan = build_plan(arch, cfg.strategy, cfg.constants)
    for opt, table in cfg.overrides.items():
        for group, value in table.items():
            plan = plan.with_factor(opt, group, value)
    return plan


def render_table(plan: ScalingPlan, optimizer: str) -> str:
    """The plan as width monomials: one line per group, rescale on the word-embedding line."""
    lits = table_literals(plan.arch)
    a = plan.arch
    lines = [
        f"# {a.modality} model, width n={a.n} (symbolic below), strategy {plan.strategy.label}, {optimizer} learning rates",
    ]
    rescale = plan.symbolic["_rescale"]["output_rescale"].render(lits)
    for row in plan_table(plan, optimizer):
        line = row.render(lits)
        if row.group == "WordEmb":
            line += f", rescale {rescale}"
        lines.append(line)
    return "\n".join(lines) + "\n"


def _output_dir(args, cfg: RunConfig) -> Path:
    out = args.out or cfg.out
    if not out:
        raise InputError("no output directory: pass --out or set run.out in the config")
    return Path(out)


def cmd_plan(args) -> int:
    cfg = load_config(args.config)
    out = _output_dir(args, cfg)
    plan = config_plan(cfg)
    write_atomic(out / "plan.json", plan.to_json())
    write_atomic(out / "table.txt", render_table(plan, cfg.optimizer))
    sys.stdout.write(render_table(plan, cfg.optimizer))
    return EXIT_OK


def cmd_propagate(args) -> int:
    cfg = load_config(args.config)
    out = _output_dir(args, cfg)
    plan = config_plan(cfg)
    kt, nt = propagate(cfg.arch, plan, cfg.batch(), cfg.n_samples, cfg.seed, cfg.replicates)
    write_atomic(out / "kernels.csv", kt.to_csv())
    write_atomic(out / "ntk.csv", nt.to_csv())
    print(f"wrote {out / 'kernels.csv'} and {out / 'ntk.csv'} ({len(kt)} stages)")
    return EXIT_OK


def parse_widths(text: str) -> tuple[int, ...]:
    try:
        widths = tuple(int(w) for w in text.split(",") if w.strip())
    except ValueError:
        raise InputError(f"--widths: expected comma-separated integers, got {text!r}") from None
    return widths


def parse_criteria(text: str) -> list[int]:
    try:
        cs = sorted({int(c) for c in text.split(",") if c.strip()})
    except ValueError:
        raise InputError(f"--criteria: expected comma-separated integers, got {text!r}") from None
    bad = [c for c in cs if c not in CRITERIA]
    if bad or not cs:
        raise InputError(f"--criteria: choose from {sorted(CRITERIA)}, got {text!r}")
    return cs


def cmd_verify(args) -> int:
    cfg = load_config(args.config)
    if args.widths:
        try:
            cfg = cfg.with_widths(parse_widths(args.widths))
        except ConfigError as exc:
            raise InputError(f"--widths: {exc}") from None
    if len(cfg.widths) < 2:
        raise InputError(f"verification needs at least two widths, got {list(cfg.widths)}")
    bad = [w for w in cfg.widths if w % cfg.arch.H]
    if bad:
        raise InputError(f"widths {bad} are not divisible by H={cfg.arch.H}")
    criteria = parse_criteria(args.criteria) if args.criteria else None
    out = _output_dir(args, cfg)
    suite = Suite.from_config(cfg)
    measurements: list = []
    log = (lambda line: print(line, flush=True)) if not args.quiet else None
    results = run_suite(suite, criteria, log=log, sink=measurements)
    meta = {
        "arch": cfg.arch.to_dict(),
        "strategy": cfg.strategy.to_dict(),
        "widths": list(cfg.widths),
        "seed": cfg.seed,
        "n_inits": dict(suite.inits),
    }
    write_atomic(out / "report.json", report_json(results, meta))
    write_atomic(out / "verify.csv", results_csv(results))
    if measurements:
        write_atomic(out / "scaling.csv", measurements_csv(measurements))
    verdicts = [criterion_verdict(rows) for rows in by_criterion(results).values()]
    if FAIL in verdicts:
        return EXIT_FAIL
    if args.strict and INCONCLUSIVE in verdicts:
        return EXIT_FAIL
    return EXIT_OK


def cmd_report(args) -> int:
    written = render_reports(Path(args.inp), Path(args.out))
    for name, info in written.items():
        if isinstance(info, dict):
            slopes = ", ".join(f"{k} {v:+.2f}" for k, v in info.items())
            print(f"{name}: slopes {slopes}")
        else:
            print(f"{name}: {info} lines")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="wideformer", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    sp = sub.add_parser("plan", help="write plan.json and the symbolic table")
    sp.add_argument("--config", required=True)
    sp.add_argument("--out")
    sp.set_defaults(func=cmd_plan)

    sp = sub.add_parser("propagate", help="write kernels.csv and ntk.csv from the infinite-width recursions")
    sp.add_argument("--config", required=True)
    sp.add_argument("--out")
    sp.set_defaults(func=cmd_propagate)

    sp = sub.add_parser("verify", help="run the theory-vs-simulation checks")
    sp.add_argument("--config", required=True)
    sp.add_argument("--out")
    sp.add_argument("--widths", help="comma-separated widths, overriding run.widths")
    sp.add_argument("--criteria", help="comma-separated subset of criteria 1-10")
    sp.add_argument("--strict", action="store_true", help="treat inconclusive criteria as failures")
    sp.add_argument("--quiet", action="store_true")
    sp.set_defaults(func=cmd_verify)

    sp = sub.add_parser("report", help="render SVG plots from kernels.csv / scaling.csv")
    sp.add_argument("--in", dest="inp", required=True)
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_report)
    return p


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse exits 2 on usage errors already
        return int(exc.code or 0)
    try:
        return args.func(args)
    except (ConfigError, InputError, ReportError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except (FloatingPointError, np.linalg.LinAlgError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_FAIL


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
