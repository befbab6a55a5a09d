"""From telemetry fixes to stacked Poisson regression rows.

The chain of custody is: telemetry fixes -> several stochastic imputations
of the continuous track between fixes -> exact discretization of each
imputed track against the state-space grid -> per-sojourn expansion into
weighted Poisson rows -> a stack over imputations with weight 1/P.

The expansion turns the path likelihood into a weighted Poisson
log-likelihood: each sojourn contributes one row per candidate neighbor,
with indicator response marking the realized move, log residence time as
offset, and the design covariates evaluated at the sojourn's entry state.
Summing row log-likelihoods reproduces the path log-likelihood up to a
term that does not involve the coefficients.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import InputError
from .raster import RasterGrid, cell_index_arrays
from .ctmc import MIN_SOJOURN, CtmcPath, _sojourn_frame

_TEL_COLUMNS = ("x", "y", "t")


@dataclass(frozen=True)
class Telemetry:
    """Location fixes: coordinates with strictly increasing times."""

    x: np.ndarray
    y: np.ndarray
    t: np.ndarray

    def __post_init__(self):
        x = np.asarray(self.x, dtype=float)
        y = np.asarray(self.y, dtype=float)
        t = np.asarray(self.t, dtype=float)
        if not (x.shape == y.shape == t.shape) or x.ndim != 1:
            raise InputError("telemetry columns must be equal-length 1-d arrays")
        if x.size < 2:
            raise InputError("telemetry needs at least two fixes")
        if not (np.all(np.isfinite(x)) and np.all(np.isfinite(y)) and np.all(np.isfinite(t))):
            raise InputError("telemetry values must be finite")
        if np.any(np.diff(t) <= 0):
            raise InputError("telemetry times must be strictly increasing")
        for name, arr in (("x", x), ("y", y), ("t", t)):
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    @property
    def n_fixes(self) -> int:
        return self.x.size

    @classmethod
    def from_csv(cls, file) -> "Telemetry":
        file = Path(file)
        with open(file, newline="") as fh:
            reader = csv.reader(fh)
            try:
                header = [h.strip() for h in next(reader)]
            except StopIteration:
                raise InputError(f"{file}: empty telemetry file")
            missing = [c for c in _TEL_COLUMNS if c not in header]
            if missing:
                raise InputError(
                    f"{file}: telemetry header must name columns x,y,t; "
                    f"missing {', '.join(missing)}"
                )
            idx = [header.index(c) for c in _TEL_COLUMNS]
            rows = []
            for lineno, rec in enumerate(reader, start=2):
                if not rec:
                    continue
                try:
                    rows.append([float(rec[i]) for i in idx])
                except (ValueError, IndexError):
                    raise InputError(f"{file}:{lineno}: bad telemetry row {rec!r}")
        if not rows:
            raise InputError(f"{file}: telemetry file has no data rows")
        arr = np.asarray(rows)
        return cls(arr[:, 0], arr[:, 1], arr[:, 2])

    def to_csv(self, file):
        with open(file, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(_TEL_COLUMNS)
            for xi, yi, ti in zip(self.x, self.y, self.t):
                w.writerow([repr(float(xi)), repr(float(yi)), repr(float(ti))])


@dataclass(frozen=True)
class ContinuousPath:
    """A continuous track as a densely sampled polyline."""

    x: np.ndarray
    y: np.ndarray
    t: np.ndarray

    def __post_init__(self):
        x = np.asarray(self.x, dtype=float)
        y = np.asarray(self.y, dtype=float)
        t = np.asarray(self.t, dtype=float)
        if not (x.shape == y.shape == t.shape) or x.ndim != 1 or x.size < 2:
            raise InputError("continuous path needs matching 1-d arrays of length >= 2")
        if np.any(np.diff(t) <= 0):
            raise InputError("continuous path times must be strictly increasing")
        for name, arr in (("x", x), ("y", y), ("t", t)):
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    @classmethod
    def from_csv(cls, file) -> "ContinuousPath":
        file = Path(file)
        with open(file, newline="") as fh:
            reader = csv.reader(fh)
            header = [h.strip() for h in next(reader)]
            if header != list(_TEL_COLUMNS):
                raise InputError(f"{file}: expected header x,y,t, got {header}")
            arr = np.asarray([[float(v) for v in rec] for rec in reader if rec])
        return cls(arr[:, 0], arr[:, 1], arr[:, 2])

    def to_csv(self, file):
        with open(file, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(_TEL_COLUMNS)
            for xi, yi, ti in zip(self.x, self.y, self.t):
                w.writerow([repr(float(xi)), repr(float(yi)), repr(float(ti))])


def fit_bridge_sigma(telemetry: Telemetry) -> float:
    """Diffusion scale from fix-to-fix increments.

    Closed-form maximum likelihood under planar Brownian motion observed
    at the fix times: with n fixes, sigma^2 is the sum of squared
    displacement norms over their time gaps, divided by 2(n - 1).
    """
    if telemetry.n_fixes < 3:
        raise InputError("need at least three fixes to estimate the diffusion scale")
    dt = np.diff(telemetry.t)
    d2 = np.diff(telemetry.x) ** 2 + np.diff(telemetry.y) ** 2
    sigma2 = float(np.sum(d2 / dt) / (2.0 * (telemetry.n_fixes - 1)))
    return float(np.sqrt(sigma2))


def default_bridge_dt(telemetry: Telemetry, sigma: float, grid: RasterGrid | None = None) -> float:
    """Default sampling resolution: smallest fix gap over 20.

    When a grid is given and sigma is positive, the resolution is
    additionally capped so a typical bridge step is at most one cell size.
    """
    dt = float(np.min(np.diff(telemetry.t))) / 20.0
    if grid is not None and sigma > 0:
        dt = min(dt, (grid.cell_size / sigma) ** 2)
    return dt


def impute_paths(
    telemetry: Telemetry,
    n_paths: int,
    dt: float | None = None,
    sigma: float | None = None,
    seed=None,
    grid: RasterGrid | None = None,
) -> list[ContinuousPath]:
    """Draw continuous tracks consistent with the fixes.

    Each gap between consecutive fixes is filled with a Brownian bridge of
    diffusion ``sigma`` per axis, sampled on a regular lattice of spacing
    ``dt`` plus the fix endpoints, which every draw passes through exactly.
    ``sigma=0`` degenerates to linear interpolation. Defaults: ``sigma``
    from :func:`fit_bridge_sigma`, ``dt`` from :func:`default_bridge_dt`.
    Path p is drawn from the p-th spawn of the seed, so results do not
    depend on evaluation order.
    """
    if n_paths < 1:
        raise InputError("n_paths must be at least 1")
    if sigma is None:
        sigma = fit_bridge_sigma(telemetry)
    if sigma < 0:
        raise InputError("sigma must be nonnegative")
    if dt is None:
        dt = default_bridge_dt(telemetry, sigma, grid)
    if not dt > 0:
        raise InputError("dt must be positive")

    seeds = np.random.SeedSequence(seed).spawn(n_paths)
    out = []
    tx, ty, tt = telemetry.x, telemetry.y, telemetry.t
    for p in range(n_paths):
        rng = np.random.default_rng(seeds[p])
        xs, ys, ts = [tx[:1]], [ty[:1]], [tt[:1]]
        for i in range(telemetry.n_fixes - 1):
            t0, t1 = tt[i], tt[i + 1]
            span = t1 - t0
            n_interior = int(np.floor(span / dt - 1e-12))
            interior = t0 + dt * np.arange(1, n_interior + 1)
            interior = interior[interior < t1 - 1e-12 * span]
            times = np.concatenate([[t0], interior, [t1]])
            steps = np.diff(times)
            sd = sigma * np.sqrt(steps)
            wx = np.concatenate([[0.0], np.cumsum(rng.normal(0.0, sd))])
            wy = np.concatenate([[0.0], np.cumsum(rng.normal(0.0, sd))])
            frac = (times - t0) / span
            bx = tx[i] + wx + frac * (tx[i + 1] - tx[i] - wx[-1])
            by = ty[i] + wy + frac * (ty[i + 1] - ty[i] - wy[-1])
            bx[0], by[0] = tx[i], ty[i]
            bx[-1], by[-1] = tx[i + 1], ty[i + 1]
            xs.append(bx[1:])
            ys.append(by[1:])
            ts.append(times[1:])
        out.append(
            ContinuousPath(np.concatenate(xs), np.concatenate(ys), np.concatenate(ts))
        )
    return out


# -- discretization -------------------------------------------------------


def _crossing_events(cx, cy, t):
    """Cell boundary crossings of a polyline given in continuous cell
    coordinates.

    Returns (times, dcol, drow, col0, row0): per-crossing entry times and
    cell index deltas ordered along the line, plus the starting cell
    indices. Simultaneous crossings at a cell corner are ordered with the
    x-axis crossing first.
    """
    fx = np.floor(cx).astype(np.int64)
    fy = np.floor(cy).astype(np.int64)
    nseg = len(cx) - 1

    def axis_events(f, coord):
        a, b = f[:-1], f[1:]
        m = np.abs(b - a)
        total = int(m.sum())
        if total == 0:
            return (
                np.empty(0, dtype=np.int64),
                np.empty(0),
                np.empty(0, dtype=np.int64),
            )
        seg = np.repeat(np.arange(nseg), m)
        direction = np.repeat(np.sign(b - a), m)
        offsets = np.concatenate([[0], np.cumsum(m)[:-1]])
        within = np.arange(total) - np.repeat(offsets, m)
        line = np.repeat(a, m) + np.where(direction > 0, within + 1, -within)
        s = (line - coord[seg]) / (coord[seg + 1] - coord[seg])
        return seg, s, direction

    seg_x, s_x, dir_x = axis_events(fx, cx)
    seg_y, s_y, dir_y = axis_events(fy, cy)

    seg = np.concatenate([seg_x, seg_y])
    s = np.concatenate([s_x, s_y])
    axis = np.concatenate([np.zeros(len(seg_x)), np.ones(len(seg_y))])
    dcol = np.concatenate([dir_x, np.zeros(len(seg_y), dtype=np.int64)])
    drow = np.concatenate([np.zeros(len(seg_x), dtype=np.int64), dir_y])

    order = np.lexsort((axis, s, seg))
    times = t[seg[order]] + s[order] * (t[seg[order] + 1] - t[seg[order]])
    times = np.maximum.accumulate(times)
    return times, dcol[order], drow[order], fx[0], fy[0]


def _paths_from_events(cells, times, run_end, grid):
    """Turn an entry-event sequence into state-space paths.

    Splits at no-data cells, merges sojourns shorter than the minimum into
    the following one (keeping the cell when dropping it would break rook
    adjacency, with its entry nudged to preserve total time), and censors
    the final residence of each piece.
    """
    valid = grid.valid[cells]
    paths = []
    i = 0
    n = len(cells)
    while i < n:
        if not valid[i]:
            i += 1
            continue
        j = i
        while j + 1 < n and valid[j + 1]:
            j += 1
        end = times[j + 1] if j + 1 < n else run_end
        paths.extend(_finalize_run(cells[i : j + 1], times[i : j + 1], end, grid))
        i = j + 1
    return paths


def _finalize_run(cells, entries, run_end, grid):
    cells = list(map(int, cells))
    entries = list(map(float, entries))

    def adjacent(a, b):
        ra, ca = divmod(a, grid.ncols)
        rb, cb = divmod(b, grid.ncols)
        return abs(ra - rb) + abs(ca - cb) == 1

    k = 0
    while k < len(cells) - 1:
        tau = entries[k + 1] - entries[k]
        if tau >= MIN_SOJOURN:
            k += 1
            continue
        if k == 0:
            # fold the opening sliver into the next cell's sojourn
            entries[1] = entries[0]
            del cells[0], entries[0]
            continue
        prev_c, next_c = cells[k - 1], cells[k + 1]
        if prev_c == next_c:
            del cells[k], entries[k]
            del cells[k], entries[k]  # dedupe: next cell equals the previous
            k = max(k - 1, 0)
        elif adjacent(prev_c, next_c):
            entries[k + 1] = entries[k]
            del cells[k], entries[k]
            k = max(k - 1, 0)
        else:
            # corner clip: dropping the cell would leave a diagonal step,
            # so keep it and borrow a sliver of time from the next sojourn
            nxt_end = entries[k + 2] if k + 2 < len(entries) else run_end
            entries[k + 1] = entries[k] + min(MIN_SOJOURN, 0.5 * (nxt_end - entries[k]))
            k += 1

    if not cells:
        return []
    final = run_end - entries[-1]
    if len(cells) == 1 and final <= MIN_SOJOURN:
        return []
    res = np.diff(entries)
    return [
        CtmcPath(
            np.asarray(cells),
            res,
            start_time=entries[0],
            final_residence=final if final > MIN_SOJOURN else None,
        )
    ]


def discretize(path: ContinuousPath, grid: RasterGrid) -> list[CtmcPath]:
    """Reduce a continuous track to grid-cell paths with exact crossing
    times.

    Every segment of the polyline is intersected with the grid lines;
    entering a cell at the crossing instant follows the half-open
    containment rule. Samples outside the grid (or in no-data cells) split
    the track, and each on-grid piece becomes its own path with the time
    after its last crossing censored. Sub-nanosecond sojourns are folded
    into the following sojourn.
    """
    cells, on = cell_index_arrays(path.x, path.y, grid)
    on = on & np.where(on, grid.valid[np.where(on, cells, 0)], False)

    out = []
    i = 0
    n = path.t.size
    while i < n:
        if not on[i]:
            i += 1
            continue
        j = i
        while j + 1 < n and on[j + 1]:
            j += 1
        if j > i:
            cx = (path.x[i : j + 1] - grid.x_origin) / grid.cell_size
            cy = (path.y[i : j + 1] - grid.y_origin) / grid.cell_size
            tt = path.t[i : j + 1]
            times, dcol, drow, c0, r0 = _crossing_events(cx, cy, tt)
            cols = c0 + np.concatenate([[0], np.cumsum(dcol)])
            rows = r0 + np.concatenate([[0], np.cumsum(drow)])
            run_cells = rows * grid.ncols + cols
            run_entries = np.concatenate([[tt[0]], times])
            out.extend(
                _paths_from_events(run_cells, run_entries, float(tt[-1]), grid)
            )
        i = j + 1
    return out


# -- expansion ------------------------------------------------------------


@dataclass
class ExpandedData:
    """Poisson regression rows produced from cell paths.

    One row per (sojourn, candidate neighbor): indicator response ``z``,
    ``log_offset`` holding the log residence time, a per-row weight, the
    imputation's path id, the sojourn entry time, the from/to cell ids,
    and the design matrix ``X`` with its column labels. Rows belonging to
    one sojourn are contiguous.
    """

    z: np.ndarray
    log_offset: np.ndarray
    weights: np.ndarray
    path_id: np.ndarray
    time: np.ndarray
    from_cell: np.ndarray
    to_cell: np.ndarray
    X: np.ndarray
    labels: tuple[str, ...]

    def __post_init__(self):
        n = self.z.size
        for name in ("log_offset", "weights", "path_id", "time", "from_cell", "to_cell"):
            if getattr(self, name).shape != (n,):
                raise InputError(f"expanded column {name} has wrong length")
        if self.X.shape != (n, len(self.labels)):
            raise InputError(
                f"design matrix shape {self.X.shape} does not match "
                f"{n} rows x {len(self.labels)} labels"
            )

    @property
    def n_rows(self) -> int:
        return self.z.size

    def sojourn_ids(self) -> np.ndarray:
        """Contiguous group index of rows sharing (path_id, time)."""
        change = np.empty(self.n_rows, dtype=bool)
        change[0] = True
        change[1:] = (self.path_id[1:] != self.path_id[:-1]) | (
            self.time[1:] != self.time[:-1]
        )
        return np.cumsum(change) - 1

    def subset(self, rows) -> "ExpandedData":
        return ExpandedData(
            self.z[rows],
            self.log_offset[rows],
            self.weights[rows],
            self.path_id[rows],
            self.time[rows],
            self.from_cell[rows],
            self.to_cell[rows],
            self.X[rows],
            self.labels,
        )

    def to_csv(self, file, grid: RasterGrid):
        fr, fc = grid.rc(self.from_cell)
        tr, tc = grid.rc(self.to_cell)
        with open(file, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(
                [
                    "z",
                    "log_offset",
                    "weight",
                    "path_id",
                    "from_row",
                    "from_col",
                    "to_row",
                    "to_col",
                    "time",
                ]
                + list(self.labels)
            )
            for i in range(self.n_rows):
                w.writerow(
                    [
                        int(self.z[i]),
                        repr(float(self.log_offset[i])),
                        repr(float(self.weights[i])),
                        int(self.path_id[i]),
                        int(fr[i]),
                        int(fc[i]),
                        int(tr[i]),
                        int(tc[i]),
                        repr(float(self.time[i])),
                    ]
                    + [repr(float(v)) for v in self.X[i]]
                )

    @classmethod
    def from_csv(cls, file, grid: RasterGrid) -> "ExpandedData":
        file = Path(file)
        fixed = ["z", "log_offset", "weight", "path_id", "from_row", "from_col", "to_row", "to_col", "time"]
        with open(file, newline="") as fh:
            reader = csv.reader(fh)
            header = next(reader)
            if header[: len(fixed)] != fixed:
                raise InputError(
                    f"{file}: expanded data header must start with "
                    f"{','.join(fixed)}"
                )
            labels = tuple(header[len(fixed) :])
            rows = [rec for rec in reader if rec]
        if not rows:
            raise InputError(f"{file}: expanded data file has no rows")
        arr = np.asarray(rows, dtype=float)
        z = arr[:, 0]
        from_cell = (arr[:, 4] * grid.ncols + arr[:, 5]).astype(np.int64)
        to_cell = (arr[:, 6] * grid.ncols + arr[:, 7]).astype(np.int64)
        return cls(
            z,
            arr[:, 1],
            arr[:, 2],
            arr[:, 3].astype(np.int64),
            arr[:, 8],
            from_cell,
            to_cell,
            arr[:, len(fixed) :],
            labels,
        )


def expand(path: CtmcPath, design, path_id: int = 0, censor_final: bool = True) -> ExpandedData:
    """Poisson rows for one cell path.

    Each completed sojourn yields one row per candidate neighbor with the
    realized move marked; with ``censor_final`` a known final residence
    adds all-zero rows for its candidates. Weights are 1.
    """
    X, z, tau, sou, cur, cand, t, _ = _sojourn_frame(path, design, censor_final)
    n = z.size
    return ExpandedData(
        z,
        np.log(tau),
        np.ones(n),
        np.full(n, path_id, dtype=np.int64),
        t,
        cur,
        cand,
        X,
        design.labels,
    )


def concat_expansions(parts: list[ExpandedData]) -> ExpandedData:
    """Row-concatenate expansions sharing one design, keeping weights."""
    if not parts:
        raise InputError("nothing to concatenate")
    labels = parts[0].labels
    for p in parts[1:]:
        if p.labels != labels:
            raise InputError("expansions have mismatched design columns")
    return ExpandedData(
        np.concatenate([p.z for p in parts]),
        np.concatenate([p.log_offset for p in parts]),
        np.concatenate([p.weights for p in parts]),
        np.concatenate([p.path_id for p in parts]),
        np.concatenate([p.time for p in parts]),
        np.concatenate([p.from_cell for p in parts]),
        np.concatenate([p.to_cell for p in parts]),
        np.vstack([p.X for p in parts]),
        labels,
    )


def stack(expansions: list[ExpandedData]) -> ExpandedData:
    """Stack one expansion per imputation, reweighting rows by 1/P.

    The stacked weighted log-likelihood is then the average of the
    per-imputation log-likelihoods, the geometric-mean pooling that the
    stacked fit maximizes. A single expansion keeps weight 1.
    """
    P = len(expansions)
    out = concat_expansions(expansions)
    out.weights = out.weights / P
    return out
