"""Model specification and design-row construction.

A :class:`ModelSpec` declares which covariates drive the movement rates:

* motility terms: scalar layer values at the current cell, shifting the
  overall jump rate without touching the choice among neighbors;
* directional terms: dot products of the candidate displacement with the
  finite-difference gradient of a layer at the current cell;
* an autocovariate: dot product of the candidate displacement with the
  unit heading of the previous move, a directional-persistence effect;
* varying terms: a declared motility or directional term whose coefficient
  changes over time through a spline basis, so its single column expands
  into one column per basis function;
* surface terms: a motility surface evaluated at the current cell center,
  and a potential surface entering through the drop along the candidate
  edge, ``phi(center_cur) - phi(center_cand)``, so that with positive
  coefficients low values of the fitted surface attract movement.

:class:`Design` binds a spec to a state-space grid and named covariate
layers and builds design rows for (state, candidate) pairs. Design rows are
concatenated in a fixed order: intercept, static motility terms, static
directional terms, autocovariate, varying-term expansions, surface
motility, surface potential.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import InputError
from .raster import RasterGrid, VectorField, gradient, neighbor_table
from .splines import SplineBasis1D, SplineBasis2D


@dataclass(frozen=True)
class MotilityTerm:
    layer: str
    label: str


@dataclass(frozen=True)
class DirectionalTerm:
    layer: str
    label: str


@dataclass(frozen=True)
class VaryingTerm:
    """Reference to a motility or directional term made time-varying."""

    term: str
    basis: SplineBasis1D


@dataclass(frozen=True)
class SurfaceTerms:
    """Optional motility and potential surfaces over the grid extent."""

    motility: SplineBasis2D | None = None
    potential: SplineBasis2D | None = None
    motility_label: str = "motility_surface"
    potential_label: str = "potential_surface"


@dataclass(frozen=True)
class ModelSpec:
    """Declarative description of the rate model's covariate structure."""

    motility_terms: tuple[MotilityTerm, ...] = ()
    directional_terms: tuple[DirectionalTerm, ...] = ()
    autocovariate: str | None = None
    varying_terms: tuple[VaryingTerm, ...] = ()
    surface_terms: SurfaceTerms | None = None
    intercept: bool = True

    def __post_init__(self):
        object.__setattr__(self, "motility_terms", tuple(self.motility_terms))
        object.__setattr__(self, "directional_terms", tuple(self.directional_terms))
        object.__setattr__(self, "varying_terms", tuple(self.varying_terms))
        labels = [t.label for t in self.motility_terms + self.directional_terms]
        if self.autocovariate is not None:
            labels.append(self.autocovariate)
        if len(set(labels)) != len(labels):
            raise InputError(f"duplicate term labels in model spec: {labels}")
        known = {t.label for t in self.motility_terms + self.directional_terms}
        seen = set()
        for v in self.varying_terms:
            if v.term not in known:
                raise InputError(
                    f"varying term references unknown motility/directional "
                    f"term {v.term!r}"
                )
            if v.term in seen:
                raise InputError(f"term {v.term!r} referenced by two varying terms")
            seen.add(v.term)

    @property
    def varying_refs(self) -> frozenset:
        return frozenset(v.term for v in self.varying_terms)

    def layer_names(self) -> set[str]:
        return {t.layer for t in self.motility_terms + self.directional_terms}

    # -- serialization ----------------------------------------------------

    def to_dict(self) -> dict:
        doc: dict = {"intercept": self.intercept}
        doc["motility"] = [
            {"layer": t.layer, "label": t.label} for t in self.motility_terms
        ]
        doc["directional"] = [
            {"layer": t.layer, "label": t.label} for t in self.directional_terms
        ]
        if self.autocovariate is not None:
            doc["autocovariate"] = {"label": self.autocovariate}
        doc["varying"] = [
            {"term": v.term, "basis": v.basis.to_dict()} for v in self.varying_terms
        ]
        if self.surface_terms is not None:
            s = self.surface_terms
            surf: dict = {}
            if s.motility is not None:
                surf["motility"] = dict(s.motility.to_dict(), label=s.motility_label)
            if s.potential is not None:
                surf["potential"] = dict(s.potential.to_dict(), label=s.potential_label)
            doc["surface"] = surf
        return doc

    @classmethod
    def from_dict(cls, doc: dict, grid: RasterGrid | None = None) -> "ModelSpec":
        """Build a spec from a JSON-style document.

        Surface bases may omit their axis ranges when ``grid`` is given, in
        which case the grid extent is used.
        """

        def surface_basis(sdoc):
            if "x" in sdoc and "y" in sdoc:
                return SplineBasis2D.from_dict(sdoc)
            if grid is None:
                raise InputError("surface basis without ranges needs a grid")
            nb = sdoc.get("num_basis", [8, 8])
            if np.isscalar(nb):
                nb = [nb, nb]
            return SplineBasis2D.uniform(
                (grid.x_origin, grid.x_max),
                (grid.y_origin, grid.y_max),
                (int(nb[0]), int(nb[1])),
                int(sdoc.get("degree", 3)),
            )

        mot = tuple(
            MotilityTerm(d["layer"], d.get("label", d["layer"]))
            for d in doc.get("motility", [])
        )
        dire = tuple(
            DirectionalTerm(d["layer"], d.get("label", d["layer"] + "_dir"))
            for d in doc.get("directional", [])
        )
        auto = doc.get("autocovariate")
        if isinstance(auto, dict):
            auto = auto.get("label", "autocovariate")
        elif auto is True:
            auto = "autocovariate"
        varying = tuple(
            VaryingTerm(d["term"], SplineBasis1D.from_dict(d["basis"]))
            for d in doc.get("varying", [])
        )
        surface = None
        if doc.get("surface"):
            s = doc["surface"]
            surface = SurfaceTerms(
                motility=surface_basis(s["motility"]) if "motility" in s else None,
                potential=surface_basis(s["potential"]) if "potential" in s else None,
                motility_label=s.get("motility", {}).get("label", "motility_surface"),
                potential_label=s.get("potential", {}).get("label", "potential_surface"),
            )
        return cls(
            motility_terms=mot,
            directional_terms=dire,
            autocovariate=auto,
            varying_terms=varying,
            surface_terms=surface,
            intercept=bool(doc.get("intercept", True)),
        )

    def to_json(self, path):
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")

    @classmethod
    def from_json(cls, path, grid: RasterGrid | None = None) -> "ModelSpec":
        return cls.from_dict(json.loads(Path(path).read_text()), grid)


class Design:
    """A model spec bound to a grid and covariate layers.

    Validates that every referenced layer exists, is aligned with the
    state-space grid, and carries values on every state-space cell, then
    precomputes per-cell quantities (layer values, gradients, surface basis
    evaluations) so design rows can be built in bulk.
    """

    def __init__(self, spec: ModelSpec, grid: RasterGrid, layers: dict[str, RasterGrid] | None = None):
        layers = dict(layers or {})
        self.spec = spec
        self.grid = grid
        self.layers = layers
        for name in sorted(spec.layer_names()):
            if name not in layers:
                raise InputError(f"model references layer {name!r} which was not provided")
            grid.require_aligned(layers[name], f"layer {name!r}")
            uncovered = layers[name].nodata & ~grid.nodata
            if np.any(uncovered):
                raise InputError(
                    f"layer {name!r} has no data on {int(uncovered.sum())} state-space cells"
                )

        self.table = neighbor_table(grid)
        cells = np.arange(grid.n_cells)
        self._cx, self._cy = grid.centers(cells)

        self._flat = {name: lyr.values.reshape(-1) for name, lyr in layers.items()}
        self._grad = {}
        for t in spec.directional_terms:
            if t.layer not in self._grad:
                f = gradient(layers[t.layer])
                self._grad[t.layer] = (
                    f.gx.values.reshape(-1),
                    f.gy.values.reshape(-1),
                )

        labels: list[str] = []
        self._blocks: list[tuple[str, object, slice]] = []

        def add(kind, payload, cols):
            start = len(labels)
            labels.extend(cols)
            self._blocks.append((kind, payload, slice(start, len(labels))))

        if spec.intercept:
            add("intercept", None, ["intercept"])
        refs = spec.varying_refs
        for t in spec.motility_terms:
            if t.label not in refs:
                add("motility", t, [t.label])
        for t in spec.directional_terms:
            if t.label not in refs:
                add("directional", t, [t.label])
        if spec.autocovariate is not None:
            add("auto", None, [spec.autocovariate])
        self._base_terms = {
            t.label: ("motility", t)
            for t in spec.motility_terms
        } | {t.label: ("directional", t) for t in spec.directional_terms}
        for v in spec.varying_terms:
            cols = [f"{v.term}:t{k}" for k in range(v.basis.num_basis)]
            add("varying", v, cols)
        surf = spec.surface_terms
        self._phi_m = self._phi_p = None
        if surf is not None and surf.motility is not None:
            self._phi_m = surf.motility.design_matrix(self._cx, self._cy, clamp=True)
            add(
                "surface_motility",
                surf.motility,
                [f"{surf.motility_label}[{k}]" for k in range(surf.motility.num_basis)],
            )
        if surf is not None and surf.potential is not None:
            self._phi_p = surf.potential.design_matrix(self._cx, self._cy, clamp=True)
            add(
                "surface_potential",
                surf.potential,
                [f"{surf.potential_label}[{k}]" for k in range(surf.potential.num_basis)],
            )
        self.labels = tuple(labels)
        self.n_columns = len(labels)
        if self.n_columns == 0:
            raise InputError("model spec has no terms")

    # -- helpers ----------------------------------------------------------

    def candidates(self, cell: int) -> np.ndarray:
        """Valid neighbor ids of a cell in E, N, W, S order."""
        row = self.table[cell]
        return row[row >= 0]

    def _edge(self, cur, cand):
        """Displacement components from cell centers, each +-cell_size or 0."""
        ex = self._cx[cand] - self._cx[cur]
        ey = self._cy[cand] - self._cy[cur]
        return ex, ey

    def _base_column(self, label, cur, cand):
        kind, term = self._base_terms[label]
        if kind == "motility":
            return self._flat[term.layer][cur]
        gx, gy = self._grad[term.layer]
        ex, ey = self._edge(cur, cand)
        return ex * gx[cur] + ey * gy[cur]

    def matrix(self, cur, prev, t, cand) -> np.ndarray:
        """Design rows for aligned arrays of (state, candidate) pairs.

        ``prev`` uses -1 for "no previous cell". Varying-term bases are
        evaluated with time clamped to their domain.
        """
        cur = np.asarray(cur, dtype=np.int64)
        prev = np.asarray(prev, dtype=np.int64)
        t = np.asarray(t, dtype=float)
        cand = np.asarray(cand, dtype=np.int64)
        m = cur.size
        X = np.empty((m, self.n_columns))
        for kind, payload, cols in self._blocks:
            if kind == "intercept":
                X[:, cols] = 1.0
            elif kind == "motility":
                X[:, cols.start] = self._flat[payload.layer][cur]
            elif kind == "directional":
                gx, gy = self._grad[payload.layer]
                ex, ey = self._edge(cur, cand)
                X[:, cols.start] = ex * gx[cur] + ey * gy[cur]
            elif kind == "auto":
                X[:, cols.start] = self._auto_column(cur, prev, cand)
            elif kind == "varying":
                base = self._base_column(payload.term, cur, cand)
                B = payload.basis.design_matrix(t, clamp=True)
                X[:, cols] = np.asarray(base)[:, None] * B
            elif kind == "surface_motility":
                X[:, cols] = self._phi_m[cur]
            elif kind == "surface_potential":
                X[:, cols] = self._phi_p[cur] - self._phi_p[cand]
        return X

    def _auto_column(self, cur, prev, cand):
        ex, ey = self._edge(cur, cand)
        has_prev = (prev >= 0) & (prev != cur)
        p = np.where(has_prev, prev, 0)
        hx = self._cx[cur] - self._cx[p]
        hy = self._cy[cur] - self._cy[p]
        norm = np.hypot(hx, hy)
        ok = has_prev & (norm > 0)
        inv = np.where(ok, 1.0 / np.where(norm > 0, norm, 1.0), 0.0)
        return (ex * hx + ey * hy) * inv

    def row(self, cur: int, prev: int | None, t: float, cand: int) -> np.ndarray:
        """A single design row; ``prev=None`` means no previous cell."""
        p = -1 if prev is None else prev
        return self.matrix([cur], [p], [t], [cand])[0]

    def column_slices(self) -> dict[str, slice]:
        """Column block positions keyed by kind-discriminated names."""
        out = {}
        for kind, payload, cols in self._blocks:
            if kind == "varying":
                out[f"varying:{payload.term}"] = cols
            elif kind in ("intercept", "auto"):
                out[kind] = cols
            elif kind in ("surface_motility", "surface_potential"):
                out[kind] = cols
            else:
                out[payload.label] = cols
        return out

    def varying_bases(self) -> dict[str, SplineBasis1D]:
        return {v.term: v.basis for v in self.spec.varying_terms}


# -- covariate construction helpers --------------------------------------


def build_design_row(design: Design, state, candidate: int) -> np.ndarray:
    """Design row for ``state = (cur, prev, time)`` and a candidate cell."""
    cur, prev, t = state
    return design.row(cur, prev, t, candidate)


def directional_covariate(
    d_layer: RasterGrid, from_cell: int, to_cell: int, field: VectorField | None = None
) -> float:
    """Dot product of the candidate displacement with the layer gradient.

    The displacement from the current to the candidate cell center keeps
    its physical length (one cell size), so coefficients scale with the
    grid resolution.
    """
    f = field if field is not None else gradient(d_layer)
    g = d_layer
    fx, fy = g.centers(np.asarray([from_cell, to_cell]))
    ex, ey = fx[1] - fx[0], fy[1] - fy[0]
    return float(
        ex * f.gx.values.reshape(-1)[from_cell] + ey * f.gy.values.reshape(-1)[from_cell]
    )


def autocovariate(
    prev_cell: int | None, cur_cell: int, to_cell: int, grid: RasterGrid
) -> float:
    """Directional-persistence covariate.

    Dot product of the displacement to the candidate cell with the unit
    vector of the previous move; zero when there is no previous cell or it
    equals the current one.
    """
    if prev_cell is None or prev_cell == cur_cell:
        return 0.0
    xs, ys = grid.centers(np.asarray([prev_cell, cur_cell, to_cell]))
    hx, hy = xs[1] - xs[0], ys[1] - ys[0]
    norm = float(np.hypot(hx, hy))
    if norm == 0.0:
        return 0.0
    ex, ey = xs[2] - xs[1], ys[2] - ys[1]
    return float((ex * hx + ey * hy) / norm)


def expand_varying_term(base_value, t: float, basis: SplineBasis1D) -> np.ndarray:
    """Columns of a time-varying term: base value times each basis function."""
    return np.asarray(base_value, dtype=float) * basis.design_matrix(t)[0]


def distance_to_point_layer(grid: RasterGrid, px: float, py: float) -> RasterGrid:
    """Layer of Euclidean distances from each cell center to a point."""
    x, y = grid.centers(np.arange(grid.n_cells))
    d = np.hypot(x - px, y - py).reshape(grid.nrows, grid.ncols)
    return grid.with_values(d)


def memory_layer(path, grid: RasterGrid, up_to: float) -> RasterGrid:
    """Minimum distance from each cell center to cells visited before ``up_to``.

    ``path`` is a cell path with entry times; cells entered strictly before
    ``up_to`` count as visited. Raises when no cell qualifies.
    """
    entries = path.entry_times
    visited = np.unique(np.asarray(path.cells)[entries < up_to])
    if visited.size == 0:
        raise InputError(f"path has no cells entered before t={up_to}")
    x, y = grid.centers(np.arange(grid.n_cells))
    vx, vy = grid.centers(visited)
    d = np.hypot(x[:, None] - vx[None, :], y[:, None] - vy[None, :]).min(axis=1)
    return grid.with_values(d.reshape(grid.nrows, grid.ncols))
