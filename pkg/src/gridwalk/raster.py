"""Rectangular raster grids: geometry, 4-neighbor adjacency, finite-difference
gradients, and ESRI ASCII grid I/O.

Grids are immutable. Cell ids are row-major counted from the lower-left
corner: ``id = row * ncols + col`` with row 0 the southernmost row. A point
belongs to the half-open cell ``[x_lo, x_lo + cell_size)`` on each axis, so a
point exactly on an interior boundary ties to the larger-index cell.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import InputError

#: Marker returned by :func:`cell_index` for points outside the grid extent.
OUT_OF_BOUNDS = -1

DEFAULT_NODATA = -9999.0

# Candidate neighbor slots in fixed order: east, north, west, south.
NEIGHBOR_OFFSETS = ((0, 1), (1, 0), (0, -1), (-1, 0))  # (drow, dcol)
NEIGHBOR_DIRECTIONS = np.array(
    [(1.0, 0.0), (0.0, 1.0), (-1.0, 0.0), (0.0, -1.0)]
)

_HEADER_KEYS = ("ncols", "nrows", "xllcorner", "yllcorner", "cellsize")


class GridParseError(InputError):
    """Malformed ASCII grid file. The message points at the offending line."""

    def __init__(self, path, lineno, message):
        super().__init__(f"{path}:{lineno}: {message}")
        self.path = str(path)
        self.lineno = lineno


def _fmt(v: float) -> str:
    """Canonical decimal form: shortest exact repr, integral values bare."""
    s = repr(float(v))
    return s[:-2] if s.endswith(".0") else s


@dataclass(frozen=True)
class RasterGrid:
    """An immutable rectangular grid of cell values on a planar coordinate
    system.

    Parameters
    ----------
    nrows, ncols : int
        Grid dimensions, both at least 1.
    x_origin, y_origin : float
        Coordinates of the lower-left corner of the lower-left cell.
    cell_size : float
        Side length of the square cells, strictly positive.
    values : ndarray, shape (nrows, ncols)
        Cell values; row 0 is the southernmost row. Entries under the
        no-data mask are ignored, all others must be finite.
    nodata : ndarray of bool, shape (nrows, ncols), optional
        True marks cells carrying no value. Defaults to all False.
    """

    nrows: int
    ncols: int
    x_origin: float
    y_origin: float
    cell_size: float
    values: np.ndarray
    nodata: np.ndarray | None = None

    def __post_init__(self):
        if self.nrows < 1 or self.ncols < 1:
            raise InputError("grid must have at least one row and column")
        if not (self.cell_size > 0) or not np.isfinite(self.cell_size):
            raise InputError(f"cell_size must be positive, got {self.cell_size}")
        vals = np.array(self.values, dtype=float)
        if vals.shape != (self.nrows, self.ncols):
            raise InputError(
                f"values shape {vals.shape} does not match "
                f"({self.nrows}, {self.ncols})"
            )
        if self.nodata is None:
            mask = np.zeros((self.nrows, self.ncols), dtype=bool)
        else:
            mask = np.array(self.nodata, dtype=bool)
            if mask.shape != vals.shape:
                raise InputError("nodata mask shape does not match values")
        if not np.all(np.isfinite(vals[~mask])):
            raise InputError("grid values must be finite outside the no-data mask")
        vals[mask] = 0.0
        vals.setflags(write=False)
        mask.setflags(write=False)
        object.__setattr__(self, "values", vals)
        object.__setattr__(self, "nodata", mask)

    # -- geometry ---------------------------------------------------------

    @property
    def n_cells(self) -> int:
        return self.nrows * self.ncols

    @property
    def x_max(self) -> float:
        return self.x_origin + self.ncols * self.cell_size

    @property
    def y_max(self) -> float:
        return self.y_origin + self.nrows * self.cell_size

    def rc(self, cell):
        """Split row-major cell ids into (row, col)."""
        cell = np.asarray(cell)
        return cell // self.ncols, cell % self.ncols

    def cell_id(self, row, col):
        return np.asarray(row) * self.ncols + np.asarray(col)

    def centers(self, cells):
        """Map cell ids to center coordinates ``(x, y)``."""
        row, col = self.rc(cells)
        x = self.x_origin + (np.asarray(col) + 0.5) * self.cell_size
        y = self.y_origin + (np.asarray(row) + 0.5) * self.cell_size
        return x, y

    @property
    def valid(self) -> np.ndarray:
        """Flat boolean mask of cells that are part of the state space."""
        return ~self.nodata.reshape(-1)

    def is_valid_cell(self, cell) -> bool:
        return 0 <= cell < self.n_cells and bool(self.valid[cell])

    def aligned_with(self, other: "RasterGrid") -> bool:
        """Exact equality of the five geometry fields."""
        return (
            self.nrows == other.nrows
            and self.ncols == other.ncols
            and self.x_origin == other.x_origin
            and self.y_origin == other.y_origin
            and self.cell_size == other.cell_size
        )

    def require_aligned(self, other: "RasterGrid", what: str = "layer"):
        if not self.aligned_with(other):
            raise InputError(f"{what} is not aligned with the state-space grid")

    def with_values(self, values, nodata=None) -> "RasterGrid":
        """A new grid on the same geometry with different cell values."""
        return RasterGrid(
            self.nrows,
            self.ncols,
            self.x_origin,
            self.y_origin,
            self.cell_size,
            values,
            self.nodata if nodata is None else nodata,
        )


@dataclass(frozen=True)
class VectorField:
    """A planar vector layer: per-cell x and y components on one geometry."""

    gx: RasterGrid
    gy: RasterGrid

    def __post_init__(self):
        self.gx.require_aligned(self.gy, "y-component grid")


def cell_index(x, y, grid: RasterGrid) -> int:
    """Row-major id of the cell containing ``(x, y)``.

    Containment is half-open on each axis, so boundary points tie to the
    larger-index cell. Points outside the grid extent return
    :data:`OUT_OF_BOUNDS`.
    """
    col = int(np.floor((x - grid.x_origin) / grid.cell_size))
    row = int(np.floor((y - grid.y_origin) / grid.cell_size))
    if col < 0 or col >= grid.ncols or row < 0 or row >= grid.nrows:
        return OUT_OF_BOUNDS
    return row * grid.ncols + col


def cell_index_arrays(x, y, grid: RasterGrid):
    """Vectorized :func:`cell_index`: returns (cells, on_grid mask)."""
    cx = (np.asarray(x, dtype=float) - grid.x_origin) / grid.cell_size
    cy = (np.asarray(y, dtype=float) - grid.y_origin) / grid.cell_size
    col = np.floor(cx).astype(np.int64)
    row = np.floor(cy).astype(np.int64)
    on = (col >= 0) & (col < grid.ncols) & (row >= 0) & (row < grid.nrows)
    cells = np.where(on, row * grid.ncols + col, OUT_OF_BOUNDS)
    return cells, on


def neighbor_table(grid: RasterGrid) -> np.ndarray:
    """Rook adjacency as an ``(n_cells, 4)`` id table in E, N, W, S order.

    Missing neighbors (outside the grid or no-data) are -1. Rows for no-data
    cells are all -1.
    """
    n = grid.n_cells
    table = np.full((n, 4), -1, dtype=np.int64)
    row, col = grid.rc(np.arange(n))
    valid = grid.valid
    for slot, (dr, dc) in enumerate(NEIGHBOR_OFFSETS):
        nr, nc = row + dr, col + dc
        ok = (nr >= 0) & (nr < grid.nrows) & (nc >= 0) & (nc < grid.ncols)
        nb = np.where(ok, nr * grid.ncols + nc, -1)
        ok &= valid & (nb >= 0)
        ok[ok] &= valid[nb[ok]]
        table[ok, slot] = nb[ok]
    return table


def neighbors(cell: int, grid: RasterGrid):
    """Valid rook neighbors of ``cell`` with their unit direction vectors.

    Returns a list of ``(neighbor_id, (ux, uy))`` in deterministic
    E, N, W, S order, omitting neighbors outside the grid or under the
    no-data mask. Raises for ids outside the grid or no-data cells.
    """
    if not 0 <= cell < grid.n_cells:
        raise InputError(f"cell id {cell} outside grid with {grid.n_cells} cells")
    if not grid.valid[cell]:
        raise InputError(f"cell id {cell} is a no-data cell")
    row, col = grid.rc(cell)
    out = []
    for slot, (dr, dc) in enumerate(NEIGHBOR_OFFSETS):
        nr, nc = row + dr, col + dc
        if 0 <= nr < grid.nrows and 0 <= nc < grid.ncols:
            nb = nr * grid.ncols + nc
            if grid.valid[nb]:
                out.append((int(nb), tuple(NEIGHBOR_DIRECTIONS[slot])))
    return out


def gradient(grid: RasterGrid) -> VectorField:
    """Finite-difference gradient of a scalar layer.

    Central differences at interior cells, one-sided where a stencil
    neighbor is missing (grid edge or no-data), and zero for cells with no
    valid neighbor along an axis. No-data cells map to (0, 0) and keep the
    mask. Differences are scaled by ``cell_size``.
    """
    v = grid.values
    ok = ~grid.nodata
    cs = grid.cell_size

    def axis_grad(shift_axis):
        has_lo = np.zeros_like(ok)
        has_hi = np.zeros_like(ok)
        v_lo = np.zeros_like(v)
        v_hi = np.zeros_like(v)
        if shift_axis == 1:  # x: columns
            has_lo[:, 1:] = ok[:, :-1]
            has_hi[:, :-1] = ok[:, 1:]
            v_lo[:, 1:] = v[:, :-1]
            v_hi[:, :-1] = v[:, 1:]
        else:  # y: rows (row 0 southernmost, so +row is +y)
            has_lo[1:, :] = ok[:-1, :]
            has_hi[:-1, :] = ok[1:, :]
            v_lo[1:, :] = v[:-1, :]
            v_hi[:-1, :] = v[1:, :]
        g = np.zeros_like(v)
        both = has_lo & has_hi
        g[both] = (v_hi[both] - v_lo[both]) / (2.0 * cs)
        hi_only = has_hi & ~has_lo
        g[hi_only] = (v_hi[hi_only] - v[hi_only]) / cs
        lo_only = has_lo & ~has_hi
        g[lo_only] = (v[lo_only] - v_lo[lo_only]) / cs
        g[~ok] = 0.0
        return g

    gx = grid.with_values(axis_grad(1))
    gy = grid.with_values(axis_grad(0))
    return VectorField(gx, gy)


# -- ASCII grid I/O -------------------------------------------------------


def read_ascii_grid(path) -> RasterGrid:
    """Read an ESRI ASCII grid file.

    The header must provide ncols, nrows, xllcorner, yllcorner and cellsize;
    nodata_value is optional and defaults to -9999. Data rows follow with
    the northernmost row first. Malformed headers, ragged rows, wrong row
    counts, and non-numeric or non-finite tokens raise
    :class:`GridParseError` with the offending line number.
    """
    path = Path(path)
    lines = path.read_text().splitlines()
    header = {}
    nodata_value = DEFAULT_NODATA
    i = 0
    while i < len(lines):
        parts = lines[i].split()
        if not parts:
            i += 1
            continue
        key = parts[0].lower()
        if key not in _HEADER_KEYS and key != "nodata_value":
            break
        if len(parts) != 2:
            raise GridParseError(path, i + 1, f"header line needs 'key value', got {lines[i]!r}")
        try:
            val = float(parts[1])
        except ValueError:
            raise GridParseError(path, i + 1, f"bad numeric value {parts[1]!r} for {key}")
        if key in ("ncols", "nrows"):
            if val != int(val) or val < 1:
                raise GridParseError(path, i + 1, f"{key} must be a positive integer")
            header[key] = int(val)
        elif key == "nodata_value":
            nodata_value = val
        else:
            header[key] = val
        i += 1
    missing = [k for k in _HEADER_KEYS if k not in header]
    if missing:
        raise GridParseError(path, min(i + 1, len(lines)), f"missing header keys: {', '.join(missing)}")
    nrows, ncols = header["nrows"], header["ncols"]

    rows = []
    for j in range(i, len(lines)):
        parts = lines[j].split()
        if not parts:
            continue
        if len(rows) == nrows:
            raise GridParseError(path, j + 1, f"expected {nrows} data rows, found more")
        if len(parts) != ncols:
            raise GridParseError(path, j + 1, f"row has {len(parts)} values, expected {ncols}")
        row = np.empty(ncols)
        for k, tok in enumerate(parts):
            try:
                row[k] = float(tok)
            except ValueError:
                raise GridParseError(path, j + 1, f"non-numeric token {tok!r}")
        bad = ~np.isfinite(row) & (row != nodata_value)
        if np.any(bad):
            raise GridParseError(path, j + 1, "non-finite value outside the no-data sentinel")
        rows.append(row)
    if len(rows) != nrows:
        raise GridParseError(path, len(lines), f"expected {nrows} data rows, found {len(rows)}")

    vals = np.array(rows)[::-1]  # file stores the top row first
    mask = vals == nodata_value
    return RasterGrid(
        nrows,
        ncols,
        header["xllcorner"],
        header["yllcorner"],
        header["cellsize"],
        vals,
        mask,
    )


def write_ascii_grid(grid: RasterGrid, path, nodata_value: float = DEFAULT_NODATA):
    """Write a grid in canonical ESRI ASCII form.

    Values are printed in shortest exact decimal form so a read/write
    round-trip reproduces the file byte for byte.
    """
    lines = [
        f"ncols {grid.ncols}",
        f"nrows {grid.nrows}",
        f"xllcorner {_fmt(grid.x_origin)}",
        f"yllcorner {_fmt(grid.y_origin)}",
        f"cellsize {_fmt(grid.cell_size)}",
        f"nodata_value {_fmt(nodata_value)}",
    ]
    nod = _fmt(nodata_value)
    for r in range(grid.nrows - 1, -1, -1):
        toks = [
            nod if grid.nodata[r, c] else _fmt(grid.values[r, c])
            for c in range(grid.ncols)
        ]
        lines.append(" ".join(toks))
    Path(path).write_text("\n".join(lines) + "\n")
