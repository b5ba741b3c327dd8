"""Quadtree meshes over a structured coarse grid, and space-time slab meshes.

The spatial mesh is a forest of quadtrees: a coarse structured grid of
rectangular cells (optionally with inactive cells cut out, e.g. obstacles)
where every coarse cell may be recursively quadrisected.  Refinement is
isotropic and one-irregular: edge-adjacent active cells differ by at most one
level, enforced by transitive closure.  Meshes are immutable; refinement
returns a new mesh and never coarsens.

Node positions are tracked as exact dyadic integers (coarse-cell units scaled
by ``2**COORD_BITS``) so nodes created at different levels unify exactly.

A :class:`SpaceTimeMesh` pairs a 1D temporal mesh with one spatial mesh per
time interval (slab).  Temporal refinement bisects intervals; the children
inherit the parent slab's spatial mesh object.
"""

from __future__ import annotations

from typing import Iterable, NamedTuple

import numpy as np

# Fixed sub-coarse-cell resolution of the integer coordinates.  26 levels of
# refinement is far beyond anything a run can afford, and 64 * 2**26 still
# fits comfortably in an int64.
COORD_BITS = 26

# Side numbering: 0 = south (y-), 1 = east (x+), 2 = north (y+), 3 = west (x-)
SOUTH, EAST, NORTH, WEST = 0, 1, 2, 3


class MeshError(RuntimeError):
    """Raised for invalid mesh operations (bad marks, broken structure...)."""


class Cell(NamedTuple):
    """A quadtree cell: coarse indices, level, and in-tree indices.

    Within coarse cell ``(cx, cy)`` at refinement ``level`` the cell covers
    the sub-rectangle ``(ix, iy)`` of the ``2**level x 2**level`` subdivision.
    """

    cx: int
    cy: int
    level: int
    ix: int
    iy: int

    def parent(self) -> "Cell":
        if self.level == 0:
            raise MeshError("coarse cell has no parent")
        return Cell(self.cx, self.cy, self.level - 1, self.ix >> 1, self.iy >> 1)

    def children(self) -> tuple["Cell", "Cell", "Cell", "Cell"]:
        cx, cy, lv, ix, iy = self
        lv += 1
        ix <<= 1
        iy <<= 1
        return (
            Cell(cx, cy, lv, ix, iy),
            Cell(cx, cy, lv, ix + 1, iy),
            Cell(cx, cy, lv, ix, iy + 1),
            Cell(cx, cy, lv, ix + 1, iy + 1),
        )


class SpatialMesh:
    """Immutable quadtree-forest mesh of axis-aligned rectangles."""

    def __init__(self, origin, spacing, dims, coarse_active=None, _split=None):
        self.origin = (float(origin[0]), float(origin[1]))
        self.spacing = (float(spacing[0]), float(spacing[1]))
        self.dims = (int(dims[0]), int(dims[1]))
        ncx, ncy = self.dims
        if ncx < 1 or ncy < 1 or self.spacing[0] <= 0 or self.spacing[1] <= 0:
            raise MeshError("mesh dimensions and spacing must be positive")
        if coarse_active is None:
            coarse_active = {(i, j) for i in range(ncx) for j in range(ncy)}
        self.coarse_active = frozenset(coarse_active)
        for (i, j) in self.coarse_active:
            if not (0 <= i < ncx and 0 <= j < ncy):
                raise MeshError(f"coarse cell {(i, j)} outside {self.dims} grid")
        if not self.coarse_active:
            raise MeshError("mesh has no active coarse cells")
        self._split = frozenset(_split) if _split is not None else frozenset()
        self._active = None  # lazy tuple of active cells
        self._index = None  # lazy dict cell -> position in active tuple

    # -- basic structure ---------------------------------------------------

    @classmethod
    def structured(cls, nx, ny, origin=(0.0, 0.0), extent=(1.0, 1.0), inactive=()):
        """Coarse ``nx x ny`` grid over the box ``origin + extent``.

        ``inactive`` lists coarse cells to cut out (holes / obstacles).
        """
        hx = extent[0] / nx
        hy = extent[1] / ny
        active = {(i, j) for i in range(nx) for j in range(ny)}
        active -= set(inactive)
        return cls(origin, (hx, hy), (nx, ny), active)

    def _is_split(self, cell: Cell) -> bool:
        return cell in self._split

    @property
    def active_cells(self) -> tuple:
        if self._active is None:
            out = []
            roots = sorted(self.coarse_active, key=lambda c: (c[1], c[0]))
            stack = []
            for cx, cy in roots:
                root = Cell(cx, cy, 0, 0, 0)
                stack.append(root)
                while stack:
                    c = stack.pop()
                    if c in self._split:
                        # push in reverse so children come out SW, SE, NW, NE
                        ch = c.children()
                        stack.extend((ch[3], ch[2], ch[1], ch[0]))
                    else:
                        out.append(c)
            self._active = tuple(out)
        return self._active

    @property
    def num_cells(self) -> int:
        return len(self.active_cells)

    def cell_index(self, cell: Cell) -> int:
        if self._index is None:
            self._index = {c: i for i, c in enumerate(self.active_cells)}
        return self._index[cell]

    def is_active(self, cell: Cell) -> bool:
        if self._index is None:
            self._index = {c: i for i, c in enumerate(self.active_cells)}
        return cell in self._index

    # -- geometry ----------------------------------------------------------

    def cell_box(self, cell: Cell):
        """Return ``(x0, y0, w, h)`` of the cell rectangle."""
        x0, y0 = self.origin
        hx, hy = self.spacing
        scale = 1.0 / (1 << cell.level)
        return (
            x0 + hx * (cell.cx + cell.ix * scale),
            y0 + hy * (cell.cy + cell.iy * scale),
            hx * scale,
            hy * scale,
        )

    def cell_boxes(self) -> np.ndarray:
        """All active cell boxes as an ``(n, 4)`` array of (x0, y0, w, h)."""
        return np.array([self.cell_box(c) for c in self.active_cells])

    def total_area(self) -> float:
        boxes = self.cell_boxes()
        return float(np.sum(boxes[:, 2] * boxes[:, 3]))

    def domain_area(self) -> float:
        hx, hy = self.spacing
        return hx * hy * len(self.coarse_active)

    # integer (dyadic) extent of a cell, in units of 2**-COORD_BITS coarse cells
    def _extent(self, cell: Cell):
        shift = COORD_BITS - cell.level
        gx = (cell.cx << cell.level) + cell.ix
        gy = (cell.cy << cell.level) + cell.iy
        return (gx << shift, (gx + 1) << shift, gy << shift, (gy + 1) << shift)

    # -- adjacency ---------------------------------------------------------

    def adjacent_actives(self, cell: Cell, side: int) -> list:
        """Active cells sharing a positive-length edge across ``side``.

        Returns ``[]`` when the side lies on the domain (or hole) boundary.
        Works for arbitrary level differences, so it can drive the closure.
        """
        x0, x1, y0, y1 = self._extent(cell)
        ncx, ncy = self.dims
        one = 1 << COORD_BITS
        if side == EAST:
            if x1 == ncx * one:
                return []
            plane, lo, hi, horiz = x1, y0, y1, True
        elif side == WEST:
            if x0 == 0:
                return []
            plane, lo, hi, horiz = x0, y0, y1, True
        elif side == NORTH:
            if y1 == ncy * one:
                return []
            plane, lo, hi, horiz = y1, x0, x1, False
        elif side == SOUTH:
            if y0 == 0:
                return []
            plane, lo, hi, horiz = y0, x0, x1, False
        else:
            raise MeshError(f"bad side {side}")

        # Coarse cell holding the neighbor strip.  The strip extends away
        # from ``cell``: for east/north the plane is the strip's lower edge,
        # for west/south its upper edge.  ``horiz`` = strip varies in y.
        outward = side in (EAST, NORTH)
        across = plane >> COORD_BITS if outward else (plane - 1) >> COORD_BITS
        along = lo >> COORD_BITS
        root_c = (across, along) if horiz else (along, across)
        if root_c not in self.coarse_active:
            return []

        # An adjacent active cell has its near edge exactly on the plane:
        # lower edge == plane when outward, upper edge == plane when inward.
        out = []
        stack = [Cell(root_c[0], root_c[1], 0, 0, 0)]
        while stack:
            c = stack.pop()
            cx0, cx1, cy0, cy1 = self._extent(c)
            p0, p1 = (cx0, cx1) if horiz else (cy0, cy1)
            a0, a1 = (cy0, cy1) if horiz else (cx0, cx1)
            if a1 <= lo or a0 >= hi:
                continue  # no overlap along the shared edge direction
            if outward:
                if not (p0 <= plane < p1):
                    continue  # cannot contain leaves with lower edge == plane
            else:
                if not (p0 < plane <= p1):
                    continue
            if c in self._split:
                stack.extend(c.children())
            elif (p0 == plane if outward else p1 == plane):
                out.append(c)
        out.sort()
        return out

    def is_boundary_side(self, cell: Cell, side: int) -> bool:
        return not self.adjacent_actives(cell, side)

    def side_midpoint(self, cell: Cell, side: int):
        x0, y0, w, h = self.cell_box(cell)
        if side == SOUTH:
            return (x0 + 0.5 * w, y0)
        if side == NORTH:
            return (x0 + 0.5 * w, y0 + h)
        if side == WEST:
            return (x0, y0 + 0.5 * h)
        return (x0 + w, y0 + 0.5 * h)

    # -- refinement --------------------------------------------------------

    def _split_cells(self, cells) -> "SpatialMesh":
        cells = set(cells)
        for c in cells:
            if not self.is_active(c):
                raise MeshError(f"cannot split non-active cell {c}")
        return SpatialMesh(
            self.origin, self.spacing, self.dims, self.coarse_active,
            _split=self._split | cells,
        )

    def _closure_violations(self) -> list:
        """Active cells whose neighbor across some edge is >= 2 levels finer."""
        bad = []
        for c in self.active_cells:
            for side in range(4):
                if any(n.level >= c.level + 2 for n in self.adjacent_actives(c, side)):
                    bad.append(c)
                    break
        return bad

    def refine(self, marks: Iterable[Cell | int]) -> "SpatialMesh":
        """Quadrisection of the marked active cells plus one-irregular closure.

        Marks may be :class:`Cell` tuples or indices into ``active_cells``.
        An empty mark set returns ``self`` unchanged (identity preserved).
        """
        cells = set()
        actives = self.active_cells
        for m in marks:
            cells.add(m if isinstance(m, Cell) else actives[int(m)])
        if not cells:
            return self
        mesh = self._split_cells(cells)
        while True:
            bad = mesh._closure_violations()
            if not bad:
                return mesh
            mesh = mesh._split_cells(bad)

    def refine_all(self) -> "SpatialMesh":
        return self._split_cells(self.active_cells)

    def patch_promoted_marks(self, marks: Iterable[Cell | int]) -> set:
        """Expand marks so whole sibling patches refine together, pre-closed.

        Every marked cell pulls in its active siblings; the one-irregular
        closure is computed with the same promotion so ``refine`` on the
        result triggers no further splits.  Keeps a patch-structured mesh
        patch-structured (needed by the patchwise recovery operator).
        """
        actives = self.active_cells
        out: set = set()

        def add_with_siblings(c: Cell):
            if c.level == 0:
                out.add(c)
                return
            for sib in c.parent().children():
                if self.is_active(sib):
                    out.add(sib)

        for m in marks:
            add_with_siblings(m if isinstance(m, Cell) else actives[int(m)])
        if not out:
            return out
        while True:
            tentative = self._split_cells(out)
            bad = tentative._closure_violations()
            if not bad:
                return out
            for c in bad:
                add_with_siblings(c)
        # unreachable

    # -- patch structure ---------------------------------------------------

    def patches(self) -> list:
        """Group active cells into complete sibling quadruples.

        Returns a list of ``(parent_cell, (i_sw, i_se, i_nw, i_ne))`` with
        indices into ``active_cells``.  Raises :class:`MeshError` if any
        active cell is level 0 or its siblings are not all active — i.e. the
        mesh is not patch-structured.
        """
        groups: dict[Cell, list] = {}
        for i, c in enumerate(self.active_cells):
            if c.level == 0:
                raise MeshError(
                    "mesh is not patch-structured: level-0 active cell present"
                )
            groups.setdefault(c.parent(), []).append(i)
        out = []
        for parent in sorted(groups):
            idx = groups[parent]
            if len(idx) != 4:
                raise MeshError(
                    f"mesh is not patch-structured: incomplete sibling patch {parent}"
                )
            cells = sorted(idx, key=lambda i: (self.active_cells[i].iy & 1,
                                               self.active_cells[i].ix & 1))
            out.append((parent, tuple(cells)))
        return out

    def is_patch_structured(self) -> bool:
        try:
            self.patches()
            return True
        except MeshError:
            return False

    # -- point location ----------------------------------------------------

    def locate(self, x: float, y: float):
        """Find the active cell containing ``(x, y)``.

        Returns ``(cell, xi, eta)`` with reference coordinates in [0, 1]^2.
        Points on interior dyadic lines resolve deterministically to the
        upper/right cell.  Raises :class:`MeshError` for points outside the
        active region (e.g. inside a hole).
        """
        x0, y0 = self.origin
        hx, hy = self.spacing
        ncx, ncy = self.dims
        ux = (x - x0) / hx
        uy = (y - y0) / hy
        tol = 1e-12 * max(ncx, ncy)
        if not (-tol <= ux <= ncx + tol and -tol <= uy <= ncy + tol):
            raise MeshError(f"point ({x}, {y}) outside mesh bounding box")
        ux = min(max(ux, 0.0), ncx)
        uy = min(max(uy, 0.0), ncy)
        cx = min(int(ux), ncx - 1)
        cy = min(int(uy), ncy - 1)
        fx = ux - cx
        fy = uy - cy
        # points on a coarse line with the containing cell inactive belong to
        # the lower/left neighbor (hole or domain boundary)
        if (cx, cy) not in self.coarse_active:
            moved = False
            if fx <= tol and cx > 0 and (cx - 1, cy) in self.coarse_active:
                cx, fx, moved = cx - 1, 1.0, True
            elif fy <= tol and cy > 0 and (cx, cy - 1) in self.coarse_active:
                cy, fy, moved = cy - 1, 1.0, True
            elif (fx <= tol and fy <= tol and cx > 0 and cy > 0
                  and (cx - 1, cy - 1) in self.coarse_active):
                cx, cy, fx, fy, moved = cx - 1, cy - 1, 1.0, 1.0, True
            if not moved:
                raise MeshError(f"point ({x}, {y}) lies outside the active region")
        cell = Cell(cx, cy, 0, 0, 0)
        while cell in self._split:
            dx = 1 if fx >= 0.5 else 0
            dy = 1 if fy >= 0.5 else 0
            fx = 2.0 * fx - dx
            fy = 2.0 * fy - dy
            ch = cell.children()
            cell = ch[dx + 2 * dy]
        return cell, min(max(fx, 0.0), 1.0), min(max(fy, 0.0), 1.0)

    # -- invariants ----------------------------------------------------------

    def check_one_irregular(self):
        """Raise if any edge-adjacent active cells differ by > 1 level."""
        bad = self._closure_violations()
        if bad:
            raise MeshError(f"one-irregularity violated at {bad[0]}")

    def __repr__(self):
        return (f"SpatialMesh({self.dims[0]}x{self.dims[1]} coarse, "
                f"{self.num_cells} active cells)")


class TemporalMesh:
    """Strictly increasing time knots t_0 < t_1 < ... < t_M."""

    def __init__(self, knots):
        knots = np.asarray(knots, dtype=float)
        if knots.ndim != 1 or len(knots) < 2 or not np.all(np.diff(knots) > 0):
            raise MeshError("temporal knots must be strictly increasing, >= 2")
        self.knots = knots
        self.knots.setflags(write=False)

    @classmethod
    def uniform(cls, t0: float, t1: float, m: int) -> "TemporalMesh":
        return cls(np.linspace(t0, t1, m + 1))

    @property
    def num_intervals(self) -> int:
        return len(self.knots) - 1

    @property
    def lengths(self) -> np.ndarray:
        return np.diff(self.knots)

    def interval(self, m: int):
        return self.knots[m], self.knots[m + 1]

    def refine(self, marks: Iterable[int]):
        """Bisect marked intervals (0-based indices).

        Returns ``(mesh, parent)`` where ``parent[j]`` is the index of the
        old interval that the new interval ``j`` came from.  Empty marks
        return ``(self, identity)``.
        """
        marks = set(int(m) for m in marks)
        for m in marks:
            if not 0 <= m < self.num_intervals:
                raise MeshError(f"temporal mark {m} out of range")
        if not marks:
            return self, list(range(self.num_intervals))
        knots = []
        parent = []
        for m in range(self.num_intervals):
            knots.append(self.knots[m])
            parent.append(m)
            if m in marks:
                knots.append(0.5 * (self.knots[m] + self.knots[m + 1]))
                parent.append(m)
        knots.append(self.knots[-1])
        return TemporalMesh(np.array(knots)), parent

    def __repr__(self):
        return (f"TemporalMesh({self.num_intervals} intervals on "
                f"[{self.knots[0]:g}, {self.knots[-1]:g}])")


class SpaceTimeMesh:
    """A temporal mesh with one (shared or individual) spatial mesh per slab."""

    def __init__(self, tmesh: TemporalMesh, slab_meshes):
        slab_meshes = tuple(slab_meshes)
        if len(slab_meshes) != tmesh.num_intervals:
            raise MeshError("need exactly one spatial mesh per time interval")
        self.tmesh = tmesh
        self.slab_meshes = slab_meshes

    @classmethod
    def uniform(cls, mesh: SpatialMesh, t0: float, t1: float, m: int):
        tm = TemporalMesh.uniform(t0, t1, m)
        return cls(tm, (mesh,) * m)

    @property
    def num_slabs(self) -> int:
        return self.tmesh.num_intervals

    def refine_temporal(self, marks: Iterable[int]) -> "SpaceTimeMesh":
        """Bisect marked intervals; children inherit the slab's spatial mesh."""
        tm, parent = self.tmesh.refine(marks)
        if tm is self.tmesh:
            return self
        meshes = tuple(self.slab_meshes[p] for p in parent)
        return SpaceTimeMesh(tm, meshes)

    def refine_spatial(self, marks_per_slab: dict) -> "SpaceTimeMesh":
        """Refine slab meshes; ``marks_per_slab`` maps slab index -> marks."""
        meshes = list(self.slab_meshes)
        for m, marks in marks_per_slab.items():
            meshes[m] = meshes[m].refine(marks)
        return SpaceTimeMesh(self.tmesh, tuple(meshes))

    def total_cells(self) -> int:
        return sum(mesh.num_cells for mesh in self.slab_meshes)

    def __repr__(self):
        return (f"SpaceTimeMesh({self.num_slabs} slabs, "
                f"{self.total_cells()} space-time cells)")
