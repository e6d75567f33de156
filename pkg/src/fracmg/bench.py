"""Batch driver for the notched-tension benchmark matrix.

Reads a flat key = value configuration (all keys defaulted to the standard
single-notch setup), runs the load schedule with the selected solver and
streams force and solver-statistics rows to CSV after every step, so a
crashed run keeps everything computed so far.  Optional VTK snapshots of
the damage and displacement fields are written per step.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np

from . import opsplit, tnnmg
from .grid import build_single_notch_mesh
from .increment import IncrementProblem, State, reaction_force, stationarity_measure
from .materials import MaterialModel

SOLVERS = ("tnnmg-ex", "tnnmg-pre", "opsplit-full", "opsplit-semi")

FORCE_HEADER = ["step", "load_mm", "force_kN"]
STATS_HEADER = ["step", "iterations", "walltime_s", "final_stationarity",
                "truncated_dofs", "dofs"]


@dataclass
class RunConfig:
    """One benchmark run; defaults reproduce the standard tension setup.

    The desk-scale default grid is refine_steps = 2 (128 x 64 cells);
    refine_steps = 3 reproduces the finest-documented 256 x 128 grid for
    long runs.
    """

    length: float = 1.0
    refine_steps: int = 2
    lam: float = 121.0
    mu: float = 80.0
    k: float = 1.0e-5
    g_c: float = 2.7e-3
    l: float = 0.03125
    degradation: str = "ga"
    split: str = "isotropic"
    at_variant: str = "at2"
    beta: float | None = None
    gd_b: float = 4.0
    steps: int = 160
    load_increment: float = 2.0e-5
    solver: str = "tnnmg-ex"
    tolerance: float = 1.0e-7
    max_iterations: int = 2000
    truncation_tol: float = 1.0e-10
    warm_start_displacement: bool = False
    out_dir: str = "out"
    write_csv: bool = True
    write_vtk: bool = False
    vtk_every: int = 1

    def __post_init__(self):
        self.solver = self.solver.lower()
        if self.solver not in SOLVERS:
            raise ValueError(f"unknown solver {self.solver!r}; choose from {SOLVERS}")
        if self.steps < 0:
            raise ValueError("steps must be non-negative")

    def material(self) -> MaterialModel:
        return MaterialModel(
            lam=self.lam, mu=self.mu, k=self.k, g_c=self.g_c, l=self.l,
            degradation=self.degradation, split=self.split,
            at_variant=self.at_variant, beta=self.beta, gd_b=self.gd_b)

    def tnnmg_config(self) -> tnnmg.TnnmgConfig:
        return tnnmg.TnnmgConfig(
            smoother="ex" if self.solver == "tnnmg-ex" else "pre",
            tolerance=self.tolerance,
            max_iterations=self.max_iterations,
            truncation_tol=self.truncation_tol,
            warm_start_displacement=self.warm_start_displacement)


_BOOL_VALUES = {"true": True, "false": False, "1": True, "0": False,
                "yes": True, "no": False}


def parse_config(path) -> RunConfig:
    """Read a flat ``key = value`` file; unknown keys are errors.

    Blank lines and ``#`` comments are ignored.  Booleans accept
    true/false, yes/no, 1/0; ``beta =`` with an empty value keeps the
    AT-variant default.
    """
    text = Path(path).read_text()
    return config_from_items(_parse_items(text), source=str(path))


def _parse_items(text: str):
    items = []
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if "=" not in stripped:
            raise ValueError(f"line {lineno}: expected 'key = value', got {line!r}")
        key, value = stripped.split("=", 1)
        items.append((key.strip(), value.strip(), lineno))
    return items


def config_from_items(items, source: str = "<config>") -> RunConfig:
    known = {f.name: f for f in fields(RunConfig)}
    kwargs = {}
    for key, value, lineno in items:
        if key not in known:
            raise ValueError(f"{source}, line {lineno}: unknown key {key!r}")
        kwargs[key] = _convert(known[key], value)
    return RunConfig(**kwargs)


def _convert(field_info, value: str):
    typ = field_info.type
    if value == "" or value.lower() == "none":
        return None
    if typ == "bool":
        try:
            return _BOOL_VALUES[value.lower()]
        except KeyError:
            raise ValueError(f"cannot parse boolean from {value!r}") from None
    if typ == "int":
        return int(value)
    if typ in ("float", "float | None"):
        return float(value)
    return value


# ---------------------------------------------------------------------------
# CSV / VTK output
# ---------------------------------------------------------------------------

def _fmt(x) -> str:
    if isinstance(x, float):
        return format(x, ".17g")
    return str(x)


class CsvWriter:
    """Line-buffered CSV writer; every row is flushed immediately."""

    def __init__(self, path, header):
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self._fh = open(self.path, "w", newline="")
        self._writer = csv.writer(self._fh)
        self._writer.writerow(header)
        self._fh.flush()

    def write_row(self, row) -> None:
        self._writer.writerow([_fmt(x) for x in row])
        self._fh.flush()

    def close(self) -> None:
        self._fh.close()


def write_force_csv(path, rows) -> None:
    """Write (step, load_mm, force_kN) rows; header-only for an empty run."""
    w = CsvWriter(path, FORCE_HEADER)
    for row in rows:
        w.write_row(row)
    w.close()


def write_stats_csv(path, rows) -> None:
    """Write per-step solver statistics rows."""
    w = CsvWriter(path, STATS_HEADER)
    for row in rows:
        w.write_row(row)
    w.close()


def write_vtk(path, level, state: State, title: str = "fracmg output") -> None:
    """Legacy ASCII VTK (version 3.0) snapshot of one state.

    UNSTRUCTURED_GRID of quad cells with POINT_DATA: scalar ``damage`` and
    vector ``displacement``.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    n = level.num_vertices
    with open(path, "w") as f:
        f.write("# vtk DataFile Version 3.0\n")
        f.write(f"{title}\n")
        f.write("ASCII\n")
        f.write("DATASET UNSTRUCTURED_GRID\n")
        f.write(f"POINTS {n} double\n")
        for x, y in level.coords:
            f.write(f"{x:.17g} {y:.17g} 0\n")
        nc = level.num_cells
        f.write(f"CELLS {nc} {5 * nc}\n")
        for cell in level.cells:
            f.write(f"4 {cell[0]} {cell[1]} {cell[2]} {cell[3]}\n")
        f.write(f"CELL_TYPES {nc}\n")
        for _ in range(nc):
            f.write("9\n")
        f.write(f"POINT_DATA {n}\n")
        f.write("SCALARS damage double 1\n")
        f.write("LOOKUP_TABLE default\n")
        for d in state.d:
            f.write(f"{d:.17g}\n")
        f.write("VECTORS displacement double\n")
        for ux, uy in state.u:
            f.write(f"{ux:.17g} {uy:.17g} 0\n")


# ---------------------------------------------------------------------------
# experiment driver
# ---------------------------------------------------------------------------

def run_experiment(config: RunConfig, progress=None) -> int:
    """Run the configured load schedule; returns 0 if every step converged.

    Each step builds the increment problem from the previous damage field
    (the irreversibility obstacle), starts the solver from the previous
    solution, and appends one row to the force and stats CSVs immediately.
    Non-convergence is recorded and the run continues.
    """
    mat_model = config.material()
    hierarchy, bc = build_single_notch_mesh(config.length, config.refine_steps)
    level = hierarchy.finest
    state = State(level.num_vertices)
    d_prev = np.zeros(level.num_vertices)
    history = opsplit.HistoryField.zeros(level)
    out = Path(config.out_dir)
    force_writer = stats_writer = None
    if config.write_csv:
        force_writer = CsvWriter(out / "force.csv", FORCE_HEADER)
        stats_writer = CsvWriter(out / "stats.csv", STATS_HEADER)
    tn_cfg = config.tnnmg_config() if config.solver.startswith("tnnmg") else None
    dofs = 3 * level.num_vertices
    failures = 0
    try:
        for step in range(1, config.steps + 1):
            load = step * config.load_increment
            # the H-field baseline is unconstrained and may leave [0, 1];
            # the obstacle only carries meaning for the variational solver
            problem = IncrementProblem(hierarchy, mat_model, bc, load,
                                       np.clip(d_prev, 0.0, 1.0))
            if config.solver.startswith("tnnmg"):
                state, report = tnnmg.solve_increment(problem, state, tn_cfg)
            else:
                mode = ("fully_implicit" if config.solver == "opsplit-full"
                        else "semi_implicit")
                state, history, report = opsplit.solve_increment_opsplit(
                    problem, state, history, mode, tol=config.tolerance)
            if not report.converged:
                failures += 1
            force = reaction_force(problem, state)
            d_prev = state.d.copy()
            if force_writer is not None:
                force_writer.write_row([step, load, force])
                stats_writer.write_row([
                    step, report.iterations, report.walltime_s,
                    report.final_stationarity
                    if report.stationarity
                    else stationarity_measure(problem, state),
                    report.truncated_dofs[-1] if report.truncated_dofs else 0,
                    dofs,
                ])
            if config.write_vtk and config.vtk_every > 0 \
                    and step % config.vtk_every == 0:
                write_vtk(out / f"step_{step:04d}.vtk", level, state,
                          title=f"{config.solver} step {step}")
            if progress is not None:
                progress(step, report, force)
        if config.solver.startswith("opsplit"):
            # restart data: the history field lives at quadrature points and
            # cannot be rebuilt from the nodal state alone
            out.mkdir(parents=True, exist_ok=True)
            history.save(out / "history.npy")
            np.save(out / "state.npy", state.array)
    finally:
        if force_writer is not None:
            force_writer.close()
            stats_writer.close()
    return 0 if failures == 0 else 1
