"""Command-line driver.

    clpose {simulate,shifts,poses,evaluate,fsc,pipeline} --config FILE [--out DIR]

Exit codes: 0 ok, 2 config error, 3 input error, 4 numerical failure.
"""

from __future__ import annotations

import argparse
import contextlib
import logging
import sys
from pathlib import Path

import numpy as np

from . import io
from .commonline import write_commonlines_csv
from .config import ConfigError, PipelineConfig, load_config, parse_config
from . import pipeline as pl

logger = logging.getLogger("clpose")

EXIT_OK, EXIT_CONFIG, EXIT_INPUT, EXIT_NUMERIC = 0, 2, 3, 4


class StageError(Exception):
    def __init__(self, module: str, exc: BaseException, code: int):
        super().__init__(f"[{module}] {exc}")
        self.code = code


@contextlib.contextmanager
def _stage(module: str):
    try:
        yield
    except (FloatingPointError, np.linalg.LinAlgError, ArithmeticError) as e:
        raise StageError(module, e, EXIT_NUMERIC) from e
    except (ValueError, OSError) as e:
        raise StageError(module, e, EXIT_INPUT) from e


class Run:
    """Paths and flags of one CLI invocation."""

    def __init__(self, cfg: PipelineConfig, args):
        self.cfg = cfg
        self.out = Path(args.out or cfg.out_dir)
        self.args = args

    def path(self, name: str) -> Path:
        p = Path(name)
        return p if p.is_absolute() else self.out / p

    def need(self, name: str) -> Path:
        p = self.path(name)
        if not p.exists():
            raise StageError("cli", FileNotFoundError(f"missing input file {p}"), EXIT_INPUT)
        return p

    def save_config(self) -> None:
        self.out.mkdir(parents=True, exist_ok=True)
        (self.out / "config.txt").write_text(self.cfg.to_text())


def cmd_simulate(run: Run):
    with _stage("simdata"):
        vol, stack = pl.run_simulate(run.cfg)
        io.write_volume(run.path(run.cfg.volume_path), vol, {"seed": run.cfg.seed})
        io.write_stack(run.path(run.cfg.stack_path), stack)
    return vol, stack


def _load_stack(run: Run):
    with _stage("simdata"):
        return io.read_stack(run.need(run.cfg.stack_path))


def _load_shifts(run: Run, required: bool = False):
    p = run.path(run.cfg.shifts_path)
    if not p.exists():
        if required:
            run.need(run.cfg.shifts_path)
        return None
    with _stage("shiftfix"):
        return io.read_shifts(p)


def cmd_shifts(run: Run, stack=None):
    stack = stack if stack is not None else _load_stack(run)
    with _stage("shiftfix"):
        est, hist = pl.run_shifts(run.cfg, stack)
        shifts = est.displacements
        io.write_shifts(run.path(run.cfg.shifts_path), shifts)
        if run.args.shift_trace:
            hist.write_csv(run.args.shift_trace)
    if hist.flagged:
        logger.warning("shift refinement hit max_rounds; returned round %d", hist.best_round)
    return shifts


def cmd_poses(run: Run, stack=None, shifts=None):
    if stack is None:
        stack = _load_stack(run)
        shifts = _load_shifts(run)
    with _stage("poseopt"):
        res = pl.run_poses(run.cfg, stack, shifts)
        io.write_rotations(run.path(run.cfg.poses_path), res.rotations)
        if run.args.dump_commonlines:
            write_commonlines_csv(run.args.dump_commonlines, res.cl, res.dih)
        if run.args.trace:
            res.trace.write_csv(run.args.trace)
    return res.rotations


def cmd_evaluate(run: Run, stack=None, rotations=None, shifts=None):
    if stack is None:
        stack = _load_stack(run)
        shifts = _load_shifts(run)
    if rotations is None:
        with _stage("eval"):
            rotations = io.read_rotations(run.need(run.cfg.poses_path))
    with _stage("eval"):
        report, al = pl.run_evaluate(stack, rotations, shifts, run.cfg.n_theta)
        report.write_csv(run.path("metrics.csv"))
        run.path("metrics.txt").write_text(report.pretty() + "\n")
    print(report.pretty())
    return report, al


def cmd_fsc(run: Run, vol=None, stack=None, aligned=None, shifts=None):
    if stack is None:
        stack = _load_stack(run)
        shifts = _load_shifts(run)
    if vol is None:
        with _stage("eval"):
            vol = io.read_volume(run.need(run.cfg.volume_path))
    if aligned is None:
        _, al = cmd_evaluate(run, stack, None, shifts)
        aligned = al.aligned
    with _stage("eval"):
        curve, rec = pl.run_fsc(vol, stack, aligned, shifts)
        curve.write_csv(run.path("fsc.csv"))
        io.write_volume(run.path("reconstruction.cpv"), rec)
    return curve


def cmd_pipeline(run: Run):
    vol, stack = cmd_simulate(run)
    shifts = cmd_shifts(run, stack) if pl.wants_shifts(run.cfg, stack) else None
    rotations = cmd_poses(run, stack, shifts)
    _, al = cmd_evaluate(run, stack, rotations, shifts)
    if run.cfg.fsc:
        cmd_fsc(run, vol, stack, al.aligned, shifts)


COMMANDS = {
    "simulate": cmd_simulate,
    "shifts": cmd_shifts,
    "poses": cmd_poses,
    "evaluate": cmd_evaluate,
    "fsc": cmd_fsc,
    "pipeline": cmd_pipeline,
}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="clpose", description="Common-line pose and shift estimation on synthetic data.")
    p.add_argument("command", choices=sorted(COMMANDS))
    p.add_argument("--config", help="key: value experiment file (defaults if omitted)")
    p.add_argument("--out", help="output directory (overrides out_dir)")
    p.add_argument("--dump-commonlines", metavar="CSV", help="write i, j, c_ij, c_ji, ncc, theta, W")
    p.add_argument("--trace", metavar="CSV", help="write the pose optimizer trace")
    p.add_argument("--shift-trace", metavar="CSV", help="write per-round shift diagnostics")
    p.add_argument("--threads", type=int, help="worker cap for projection")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        overrides = {"threads": args.threads}
        cfg = load_config(args.config, **overrides) if args.config else parse_config("", **overrides)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    run = Run(cfg, args)
    try:
        run.save_config()
        COMMANDS[args.command](run)
    except StageError as e:
        print(f"error: {e}", file=sys.stderr)
        return e.code
    except OSError as e:
        print(f"error: [cli] {e}", file=sys.stderr)
        return EXIT_INPUT
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
