"""Continuous-time Markov chains on raster grids.

A chain occupies one cell at a time; each rook edge (i, j) carries a rate
that is log-linear in the design covariates. Residence in cell i is
exponential with the summed outgoing rate, and the jump picks a neighbor
with probability proportional to its rate. Because motility covariates
enter every candidate's rate identically, they cancel from the jump
probabilities and only shift the speed of movement.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import InputError

#: Sojourns shorter than this are treated as carrying no usable duration.
MIN_SOJOURN = 1e-9


@dataclass(frozen=True)
class CtmcPath:
    """An embedded-chain path: visited cells with residence times.

    ``residence_times`` has one entry per completed sojourn, so its length
    is ``len(cells) - 1``. ``final_residence`` is the censored time spent
    in the last cell before observation ended, when known.
    """

    cells: np.ndarray
    residence_times: np.ndarray
    start_time: float = 0.0
    final_residence: float | None = None
    absorbed: bool = False

    def __post_init__(self):
        cells = np.asarray(self.cells, dtype=np.int64)
        res = np.asarray(self.residence_times, dtype=float)
        if cells.ndim != 1 or cells.size < 1:
            raise InputError("path needs at least one cell")
        if res.shape != (cells.size - 1,):
            raise InputError(
                f"expected {cells.size - 1} residence times, got {res.shape}"
            )
        if np.any(res <= 0) or not np.all(np.isfinite(res)):
            raise InputError("residence times must be positive and finite")
        if cells.size > 1 and np.any(cells[1:] == cells[:-1]):
            raise InputError("consecutive path cells must be distinct")
        if self.final_residence is not None and self.final_residence < 0:
            raise InputError("final residence must be nonnegative")
        cells.setflags(write=False)
        res.setflags(write=False)
        object.__setattr__(self, "cells", cells)
        object.__setattr__(self, "residence_times", res)

    @property
    def n_transitions(self) -> int:
        return self.cells.size - 1

    @property
    def entry_times(self) -> np.ndarray:
        """Absolute entry time of each visited cell."""
        return self.start_time + np.concatenate(
            [[0.0], np.cumsum(self.residence_times)]
        )

    @property
    def end_time(self) -> float:
        t = self.start_time + float(np.sum(self.residence_times))
        if self.final_residence is not None:
            t += self.final_residence
        return t

    def validate_on(self, grid):
        """Check cells are valid state-space cells and steps are rook moves."""
        if np.any(self.cells < 0) or np.any(self.cells >= grid.n_cells):
            raise InputError("path contains cell ids outside the grid")
        if not np.all(grid.valid[self.cells]):
            raise InputError("path visits a no-data cell")
        r, c = grid.rc(self.cells)
        if self.cells.size > 1:
            step = np.abs(np.diff(r)) + np.abs(np.diff(c))
            if np.any(step != 1):
                raise InputError("consecutive path cells must be rook neighbors")


@dataclass(frozen=True)
class RateRow:
    """Outgoing rates from one cell at one instant."""

    from_cell: int
    candidates: np.ndarray
    rates: np.ndarray

    @property
    def total_rate(self) -> float:
        return float(np.sum(self.rates))


def transition_rates(design, beta, cur: int, prev: int | None = None, time: float = 0.0) -> RateRow:
    """Rates to every valid neighbor of ``cur`` under coefficients ``beta``."""
    beta = np.asarray(beta, dtype=float)
    if beta.shape != (design.n_columns,):
        raise InputError(
            f"coefficient vector has length {beta.size}, design has "
            f"{design.n_columns} columns"
        )
    cand = design.candidates(cur)
    p = -1 if prev is None else prev
    X = design.matrix(
        np.full(cand.size, cur), np.full(cand.size, p), np.full(cand.size, time), cand
    )
    lp = X @ beta
    if not np.all(np.isfinite(lp)):
        raise InputError("non-finite linear predictor in transition rates")
    return RateRow(cur, cand, np.exp(lp))


def transition_probabilities(row: RateRow) -> np.ndarray:
    """Jump distribution over the candidates of a rate row."""
    tot = row.total_rate
    if not tot > 0:
        raise InputError(f"cell {row.from_cell} is absorbing: total rate is zero")
    return row.rates / tot


def _sojourn_frame(path: CtmcPath, design, censor_final: bool = True):
    """Per-candidate arrays for every sojourn of a path.

    Returns (X, z, tau, sojourn_index, cur, cand, t, n_sojourns) where each
    row is one (sojourn, candidate) pair. Completed sojourns contribute an
    indicator z marking the realized next cell; the final residence, when
    censored and known, contributes all-zero indicator rows.
    """
    path.validate_on(design.grid)
    cells = path.cells
    entries = path.entry_times
    T = cells.size

    keep_final = (
        censor_final
        and path.final_residence is not None
        and path.final_residence > MIN_SOJOURN
    )
    n_sojourn = (T - 1) + (1 if keep_final else 0)
    cur = cells[:n_sojourn]
    prev = np.empty(n_sojourn, dtype=np.int64)
    prev[0] = -1
    prev[1:] = cells[: n_sojourn - 1]
    t = entries[:n_sojourn]
    tau = np.empty(n_sojourn)
    tau[: T - 1] = path.residence_times
    if keep_final:
        tau[T - 1] = path.final_residence

    nb = design.table[cur]
    valid = nb >= 0
    counts = valid.sum(axis=1)
    if np.any(counts == 0):
        raise InputError("path visits an absorbing cell with no neighbors")
    sou = np.repeat(np.arange(n_sojourn), counts)
    cand = nb[valid]
    z = np.zeros(cand.size)
    completed = sou < T - 1
    realized = np.zeros(cand.size, dtype=bool)
    realized[completed] = cand[completed] == cells[sou[completed] + 1]
    z[realized] = 1.0
    per_sojourn = np.bincount(sou[realized], minlength=n_sojourn)[: T - 1]
    if not np.all(per_sojourn == 1):
        raise InputError("a realized transition leaves the candidate set")

    X = design.matrix(cur[sou], prev[sou], t[sou], cand)
    return X, z, tau[sou], sou, cur[sou], cand, t[sou], n_sojourn


def path_log_likelihood(path: CtmcPath, design, beta, censor_final: bool = True) -> float:
    """Log-likelihood of a path under log-linear rates.

    Each completed sojourn contributes the log rate of the realized move
    minus the residence time times the summed outgoing rate; a censored
    final residence contributes only the survival part. Underflow of a
    realized rate to zero yields ``-inf`` rather than an exception.
    """
    beta = np.asarray(beta, dtype=float)
    X, z, tau, sou, _, _, _, _ = _sojourn_frame(path, design, censor_final)
    lp = X @ beta
    rates = np.exp(lp)
    realized = z == 1.0
    if np.any(rates[realized] == 0.0):
        return float("-inf")
    return float(lp[realized].sum() - (tau * rates).sum())


def path_score(path: CtmcPath, design, beta, censor_final: bool = True) -> np.ndarray:
    """Gradient of :func:`path_log_likelihood` in ``beta``."""
    beta = np.asarray(beta, dtype=float)
    X, z, tau, _, _, _, _, _ = _sojourn_frame(path, design, censor_final)
    rates = np.exp(X @ beta)
    return X.T @ (z - tau * rates)


class _Simulator:
    """Precomputed edge structure for fast jump-by-jump simulation.

    The time-invariant part of each edge's linear predictor is evaluated
    once; varying terms re-enter through their base edge columns times the
    time-dependent basis combination, and the autocovariate through a
    direction-pair lookup table.
    """

    def __init__(self, design, beta):
        beta = np.asarray(beta, dtype=float)
        if beta.shape != (design.n_columns,):
            raise InputError(
                f"coefficient vector has length {beta.size}, design has "
                f"{design.n_columns} columns"
            )
        self.design = design
        grid = design.grid
        n = grid.n_cells
        table = design.table
        valid = table >= 0
        cur_e = np.repeat(np.arange(n), 4)[valid.reshape(-1)]
        cand_e = table[valid]

        slices = design.column_slices()
        beta_static = beta.copy()
        self._varying = []
        for term, basis in design.varying_bases().items():
            sl = slices[f"varying:{term}"]
            beta_static[sl] = 0.0
            base = np.full((n, 4), 0.0)
            base[valid] = design._base_column(term, cur_e, cand_e)
            self._varying.append((base, basis, beta[sl]))
        self._beta_auto = 0.0
        if "auto" in slices:
            self._beta_auto = float(beta[slices["auto"].start])
            beta_static[slices["auto"]] = 0.0

        X = design.matrix(cur_e, np.full(cur_e.size, -1), np.zeros(cur_e.size), cand_e)
        lp = np.full((n, 4), -np.inf)
        lp[valid] = X @ beta_static
        self._lp_static = lp
        self._table = table
        cs = grid.cell_size
        # dot of candidate displacement with unit previous heading, by
        # (previous slot + 1, candidate slot); slot order E, N, W, S
        self._auto_dot = cs * np.array(
            [
                [0.0, 0.0, 0.0, 0.0],
                [1.0, 0.0, -1.0, 0.0],
                [0.0, 1.0, 0.0, -1.0],
                [-1.0, 0.0, 1.0, 0.0],
                [0.0, -1.0, 0.0, 1.0],
            ]
        )

    def slot_rates(self, cell: int, prev_slot: int, t: float) -> np.ndarray:
        """Rates for the four candidate slots; missing slots are zero."""
        lp = self._lp_static[cell].copy()
        for base, basis, bv in self._varying:
            lp += base[cell] * float(basis.design_matrix(t, clamp=True)[0] @ bv)
        if self._beta_auto != 0.0:
            lp = lp + self._beta_auto * self._auto_dot[prev_slot + 1]
        with np.errstate(over="raise"):
            try:
                return np.exp(lp)
            except FloatingPointError:
                raise InputError("transition rate overflow during simulation")


def simulate_path(
    design,
    beta,
    start_cell: int,
    start_time: float,
    duration: float,
    seed,
) -> CtmcPath:
    """Simulate a chain trajectory over a fixed observation window.

    Residence times are drawn from the exponential sojourn distribution
    and jumps from the candidate rates by inverse transform with a single
    uniform draw, with candidates in deterministic E, N, W, S order. Rates
    are recomputed at every jump, so time-varying terms are piecewise
    constant over sojourns. Reaching an absorbing cell ends the path early
    and flags it. The residence underway when the window closes is
    censored at the window end.
    """
    grid = design.grid
    if duration < 0:
        raise InputError("duration must be nonnegative")
    if not (0 <= start_cell < grid.n_cells) or not grid.valid[start_cell]:
        raise InputError(f"start cell {start_cell} is not a valid state-space cell")
    rng = np.random.default_rng(seed)
    sim = _Simulator(design, beta)

    end = start_time + duration
    t = start_time
    cell = start_cell
    prev_slot = -1
    cells = [start_cell]
    res: list[float] = []
    final = None
    absorbed = False

    while True:
        rates = sim.slot_rates(cell, prev_slot, t)
        cum = np.cumsum(rates)
        total = cum[-1]
        if not total > 0:
            final = end - t
            absorbed = True
            break
        tau = rng.exponential(1.0 / total)
        if t + tau >= end:
            final = end - t
            break
        t += tau
        slot = int(np.searchsorted(cum, rng.random() * total, side="right"))
        slot = min(slot, 3)
        nxt = int(sim._table[cell, slot])
        if nxt < 0:
            raise AssertionError("jump draw selected a missing neighbor slot")
        res.append(tau)
        cells.append(nxt)
        cell = nxt
        prev_slot = slot

    return CtmcPath(
        np.asarray(cells),
        np.asarray(res),
        start_time=start_time,
        final_residence=final,
        absorbed=absorbed,
    )


# -- path CSV I/O ---------------------------------------------------------


def write_path_csv(path: CtmcPath, grid, file):
    """Write a path as rows of (cell_row, cell_col, entry_time).

    A trailing row repeating the last cell marks the end of observation
    when a censored final residence is known; its entry_time is the
    observation end.
    """
    rows, cols = grid.rc(path.cells)
    entries = path.entry_times
    with open(file, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["cell_row", "cell_col", "entry_time"])
        for r, c, t in zip(rows, cols, entries):
            w.writerow([int(r), int(c), repr(float(t))])
        if path.final_residence is not None:
            w.writerow([int(rows[-1]), int(cols[-1]), repr(float(path.end_time))])


def read_path_csv(file, grid) -> CtmcPath:
    """Read a path written by :func:`write_path_csv`."""
    file = Path(file)
    with open(file, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise InputError(f"{file}: empty path file")
        if [h.strip() for h in header] != ["cell_row", "cell_col", "entry_time"]:
            raise InputError(
                f"{file}: expected header cell_row,cell_col,entry_time, got {header}"
            )
        rows = []
        for lineno, rec in enumerate(reader, start=2):
            if not rec:
                continue
            try:
                rows.append((int(rec[0]), int(rec[1]), float(rec[2])))
            except (ValueError, IndexError):
                raise InputError(f"{file}:{lineno}: bad path row {rec!r}")
    if not rows:
        raise InputError(f"{file}: path file has no rows")
    cells = np.array([grid.cell_id(r, c) for r, c, _ in rows])
    times = np.array([t for _, _, t in rows])
    final = None
    if cells.size >= 2 and cells[-1] == cells[-2]:
        final = float(times[-1] - times[-2])
        cells, times = cells[:-1], times[:-1]
    res = np.diff(times)
    return CtmcPath(cells, res, start_time=float(times[0]), final_residence=final)
