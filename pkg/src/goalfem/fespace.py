"""Continuous Q1/Q2 finite element spaces on quadtree meshes.

Provides Gauss quadrature, tensor-product Lagrange shape functions, DoF
numbering by exact dyadic node keys (so nodes created at different refinement
levels unify automatically), hanging-node and Dirichlet constraints, boundary
side bookkeeping with user tags, patchwise biquadratic recovery of bilinear
fields, cross-mesh evaluation operators, and the usual mass/stiffness/load
assembly helpers (vectorized, reference-matrix scaling on axis-aligned
rectangles).

Vector-valued spaces store DoFs component-major: ``dof = comp * nnodes + node``.
"""

from __future__ import annotations

import numpy as np
import scipy.sparse as sp

from .mesh import COORD_BITS, MeshError, SpatialMesh

# ---------------------------------------------------------------------------
# quadrature


def gauss01(n: int):
    """n-point Gauss-Legendre rule on [0, 1] (exact for degree 2n-1)."""
    x, w = np.polynomial.legendre.leggauss(n)
    return 0.5 * (x + 1.0), 0.5 * w


_QUAD_CACHE: dict = {}


def quad_rule(n: int):
    """Tensor Gauss rule on the reference square [0, 1]^2.

    Returns ``(points (nq, 2), weights (nq,))`` with x fastest.
    """
    if n not in _QUAD_CACHE:
        x, w = gauss01(n)
        X, Y = np.meshgrid(x, x, indexing="xy")
        W = np.outer(w, w)  # W[j, i] = w_j * w_i (y outer)
        pts = np.column_stack([X.ravel(), Y.ravel()])
        _QUAD_CACHE[n] = (pts, W.ravel())
    return _QUAD_CACHE[n]


#: Temporal quadrature rules as (nodes, weights) on the unit interval with
#: unit weight sum; a slab integral is k * sum(w_q * g(t_{m-1} + xi_q * k)).
_G2 = 0.5 / np.sqrt(3.0)
TEMPORAL_RULES = {
    "midpoint": (np.array([0.5]), np.array([1.0])),
    "rightbox": (np.array([1.0]), np.array([1.0])),
    "gauss2": (np.array([0.5 - _G2, 0.5 + _G2]), np.array([0.5, 0.5])),
    "simpson": (np.array([0.0, 0.5, 1.0]), np.array([1, 4, 1]) / 6.0),
}


# ---------------------------------------------------------------------------
# shape functions (tensor Lagrange on [0, 1]^2)

#: local node fractions (numerators over the degree) per degree, x fastest
NODE_FRACS = {
    1: [(0, 0), (1, 0), (0, 1), (1, 1)],
    2: [(i, j) for j in range(3) for i in range(3)],
}


def _lag_1d(degree: int, x: np.ndarray) -> np.ndarray:
    """1D Lagrange basis values at ``x``; nodes equispaced on [0, 1]."""
    x = np.asarray(x, dtype=float)
    if degree == 1:
        return np.stack([1.0 - x, x], axis=-1)
    if degree == 2:
        return np.stack(
            [2.0 * x * x - 3.0 * x + 1.0, 4.0 * x * (1.0 - x), 2.0 * x * x - x],
            axis=-1,
        )
    raise ValueError(f"unsupported degree {degree}")


def _dlag_1d(degree: int, x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    if degree == 1:
        return np.stack([-np.ones_like(x), np.ones_like(x)], axis=-1)
    if degree == 2:
        return np.stack([4.0 * x - 3.0, 4.0 - 8.0 * x, 4.0 * x - 1.0], axis=-1)
    raise ValueError(f"unsupported degree {degree}")


def shape_values(degree: int, pts: np.ndarray) -> np.ndarray:
    """Shape function values, ``(npts, (degree+1)**2)``, x-fastest node order."""
    pts = np.atleast_2d(np.asarray(pts, dtype=float))
    lx = _lag_1d(degree, pts[:, 0])
    ly = _lag_1d(degree, pts[:, 1])
    return np.einsum("pj,pi->pji", ly, lx).reshape(len(pts), -1)


def shape_grads(degree: int, pts: np.ndarray) -> np.ndarray:
    """Reference gradients, ``(npts, nloc, 2)``."""
    pts = np.atleast_2d(np.asarray(pts, dtype=float))
    lx = _lag_1d(degree, pts[:, 0])
    ly = _lag_1d(degree, pts[:, 1])
    dx = _dlag_1d(degree, pts[:, 0])
    dy = _dlag_1d(degree, pts[:, 1])
    gx = np.einsum("pj,pi->pji", ly, dx).reshape(len(pts), -1)
    gy = np.einsum("pj,pi->pji", dy, lx).reshape(len(pts), -1)
    return np.stack([gx, gy], axis=-1)


def _ref_matrices(degree: int):
    """Reference mass and directional stiffness matrices on [0, 1]^2."""
    pts, w = quad_rule(degree + 1)
    V = shape_values(degree, pts)
    G = shape_grads(degree, pts)
    M = np.einsum("q,qi,qj->ij", w, V, V)
    Kx = np.einsum("q,qi,qj->ij", w, G[:, :, 0], G[:, :, 0])
    Ky = np.einsum("q,qi,qj->ij", w, G[:, :, 1], G[:, :, 1])
    return M, Kx, Ky


_REF_MATS = {d: _ref_matrices(d) for d in (1, 2)}


def _ref_edge_matrices(degree: int):
    """1D reference edge mass matrix and load vector for the side trace."""
    x, w = gauss01(degree + 1)
    L = _lag_1d(degree, x)
    M = np.einsum("q,qi,qj->ij", w, L, L)
    b = np.einsum("q,qi->i", w, L)
    return M, b


_REF_EDGE = {d: _ref_edge_matrices(d) for d in (1, 2)}

# side-local node selection: nodes of a cell side, sorted along the edge
_SIDE_AXIS = {0: 0, 1: 1, 2: 0, 3: 1}  # coordinate varying along the side


def _side_locals(degree: int, side: int):
    d = degree
    fr = NODE_FRACS[d]
    if side == 0:
        sel = [(k, fi) for k, (fi, fj) in enumerate(fr) if fj == 0]
    elif side == 2:
        sel = [(k, fi) for k, (fi, fj) in enumerate(fr) if fj == d]
    elif side == 3:
        sel = [(k, fj) for k, (fi, fj) in enumerate(fr) if fi == 0]
    else:
        sel = [(k, fj) for k, (fi, fj) in enumerate(fr) if fi == d]
    sel.sort(key=lambda t: t[1])
    return [k for k, _ in sel]


_OPPOSITE = {0: 2, 2: 0, 1: 3, 3: 1}


# ---------------------------------------------------------------------------
# constraints


class ConstraintSet:
    """Hanging-node and Dirichlet constraints over a vector DoF range.

    Hanging slaves carry master/weight lists (resolved transitively);
    Dirichlet DoFs are slaves with no masters whose values are supplied at
    solve time.  Exposes the prolongation ``P`` (n x nfree) and Dirichlet
    distribution ``D`` (n x n, acting on a full-size vector of boundary
    values) with ``u = P u_free + D g``.
    """

    def __init__(self, n: int, hanging: dict, dirichlet_dofs):
        self.n = int(n)
        self.dirichlet_dofs = np.asarray(sorted(set(map(int, dirichlet_dofs))),
                                         dtype=int)
        dirset = set(self.dirichlet_dofs.tolist())
        hanging = {int(s): m for s, m in hanging.items() if int(s) not in dirset}

        resolved: dict = {}

        def resolve(dof, stack):
            if dof in resolved:
                return resolved[dof]
            if dof in stack:
                raise MeshError(f"cyclic constraint chain through DoF {dof}")
            if dof in dirset:
                return ({}, {dof: 1.0})
            if dof not in hanging:
                return ({dof: 1.0}, {})
            stack = stack | {dof}
            free: dict = {}
            dirc: dict = {}
            for m, w in hanging[dof]:
                f2, d2 = resolve(int(m), stack)
                for k, v in f2.items():
                    free[k] = free.get(k, 0.0) + w * v
                for k, v in d2.items():
                    dirc[k] = dirc.get(k, 0.0) + w * v
            resolved[dof] = (free, dirc)
            return resolved[dof]

        for s in hanging:
            resolve(s, frozenset())

        self.hanging_dofs = np.asarray(sorted(hanging), dtype=int)
        constrained = dirset | set(hanging)
        self.free_dofs = np.asarray(
            [d for d in range(self.n) if d not in constrained], dtype=int
        )
        pos = {int(d): i for i, d in enumerate(self.free_dofs)}

        prows, pcols, pvals = [], [], []
        drows, dcols, dvals = [], [], []
        for d in self.free_dofs:
            prows.append(d)
            pcols.append(pos[int(d)])
            pvals.append(1.0)
        for d in self.dirichlet_dofs:
            drows.append(d)
            dcols.append(d)
            dvals.append(1.0)
        for s in self.hanging_dofs:
            free, dirc = resolved[int(s)]
            for m, w in free.items():
                prows.append(s)
                pcols.append(pos[m])
                pvals.append(w)
            for m, w in dirc.items():
                drows.append(s)
                dcols.append(m)
                dvals.append(w)
        self.P = sp.csr_matrix(
            (pvals, (prows, pcols)), shape=(self.n, len(self.free_dofs))
        )
        self.D = sp.csr_matrix((dvals, (drows, dcols)), shape=(self.n, self.n))

    @property
    def n_free(self) -> int:
        return len(self.free_dofs)

    def lift(self, dirichlet_values: np.ndarray) -> np.ndarray:
        """Full-size inhomogeneity from values at the Dirichlet DoFs."""
        return self.D @ np.asarray(dirichlet_values, dtype=float)

    def restrict(self, u_full: np.ndarray) -> np.ndarray:
        return np.asarray(u_full, dtype=float)[self.free_dofs]

    def expand(self, u_free: np.ndarray, g_full=None) -> np.ndarray:
        u = self.P @ np.asarray(u_free, dtype=float)
        if g_full is not None:
            u = u + g_full
        return u

    def distribute(self, u_full: np.ndarray, g_full=None) -> np.ndarray:
        """Overwrite constrained entries so every constraint holds exactly."""
        return self.expand(self.restrict(u_full), g_full)


# ---------------------------------------------------------------------------
# the space


class FESpace:
    """Continuous Lagrange space of given degree on a quadtree mesh.

    Construction walks the active cells once, numbering nodes by first
    appearance of their dyadic key.  ``boundary_tag(x, y) -> str`` classifies
    boundary sides by their midpoint (default tag ``"boundary"``);
    ``dirichlet`` maps tags to the tuple of constrained components.
    """

    def __init__(self, mesh: SpatialMesh, degree: int, ncomp: int = 1,
                 boundary_tag=None, dirichlet=None):
        if degree not in (1, 2):
            raise ValueError(f"unsupported polynomial degree {degree}")
        self.mesh = mesh
        self.degree = int(degree)
        self.ncomp = int(ncomp)
        self.dirichlet_spec = dict(dirichlet or {})

        d = self.degree
        fracs = NODE_FRACS[d]
        nloc = len(fracs)
        cells = mesh.active_cells
        key_to_id: dict = {}
        cell_nodes = np.empty((len(cells), nloc), dtype=np.int64)
        for ci, c in enumerate(cells):
            x0, x1, y0, y1 = mesh._extent(c)
            sx, sy = x1 - x0, y1 - y0
            for k, (fi, fj) in enumerate(fracs):
                key = (x0 + sx * fi // d, y0 + sy * fj // d)
                nid = key_to_id.setdefault(key, len(key_to_id))
                cell_nodes[ci, k] = nid
        self.cell_nodes = cell_nodes
        self.key_to_id = key_to_id
        self.nnodes = len(key_to_id)
        self._id_xy = None

        scale = 1.0 / (1 << COORD_BITS)
        ox, oy = mesh.origin
        hx, hy = mesh.spacing
        xy = np.empty((self.nnodes, 2))
        for (kx, ky), nid in key_to_id.items():
            xy[nid, 0] = ox + hx * (kx * scale)
            xy[nid, 1] = oy + hy * (ky * scale)
        self.node_xy = xy

        boxes = mesh.cell_boxes()
        self.cell_w = boxes[:, 2].copy()
        self.cell_h = boxes[:, 3].copy()
        self.cell_x0 = boxes[:, 0].copy()
        self.cell_y0 = boxes[:, 1].copy()

        # boundary sides with tags
        tag_fn = boundary_tag or (lambda x, y: "boundary")
        bsides = []
        for ci, c in enumerate(cells):
            for side in range(4):
                if mesh.is_boundary_side(c, side):
                    mx, my = mesh.side_midpoint(c, side)
                    bsides.append((ci, side, tag_fn(mx, my)))
        self.boundary_sides = tuple(bsides)

        # hanging-node constraints (per scalar node)
        hang: dict = {}
        for ci, c in enumerate(cells):
            for side in range(4):
                adj = mesh.adjacent_actives(c, side)
                if len(adj) != 1 or adj[0].level != c.level - 1:
                    continue
                nb = adj[0]
                nci = mesh.cell_index(nb)
                my = [cell_nodes[ci, k] for k in _side_locals(d, side)]
                th = [cell_nodes[nci, k]
                      for k in _side_locals(d, _OPPOSITE[side])]
                axis = _SIDE_AXIS[side]
                th_keys = np.array(
                    [self._node_key_axis(t, axis) for t in th], dtype=float
                )
                k0, k1 = th_keys[0], th_keys[-1]
                th_set = set(th)
                for s in my:
                    if s in th_set:
                        continue
                    t = (self._node_key_axis(s, axis) - k0) / (k1 - k0)
                    w = _lag_1d(d, np.array([t]))[0]
                    entry = [(int(m), float(wi)) for m, wi in zip(th, w)]
                    if s in hang:
                        assert hang[s] == entry, "inconsistent hanging constraint"
                    else:
                        hang[int(s)] = entry
        self.hanging_nodes = hang

        # Dirichlet node sets per component
        dir_nodes = [set() for _ in range(self.ncomp)]
        for ci, side, tag in bsides:
            comps = self.dirichlet_spec.get(tag)
            if not comps:
                continue
            for k in _side_locals(d, side):
                nid = int(cell_nodes[ci, k])
                for comp in comps:
                    dir_nodes[comp].add(nid)
        self.dirichlet_nodes = tuple(
            np.asarray(sorted(s), dtype=int) for s in dir_nodes
        )

        self._constraints = None
        self._mass = None
        self._stiffness = None
        self._quad: dict = {}
        self._bquad: dict = {}
        self._recon = None

    # -- bookkeeping --------------------------------------------------------

    def _node_key_axis(self, nid: int, axis: int):
        # reverse lookup used only during construction (small side sets)
        if self._id_xy is None:
            self._id_xy = {v: k for k, v in self.key_to_id.items()}
        return self._id_xy[int(nid)][axis]

    @property
    def n_dofs(self) -> int:
        return self.ncomp * self.nnodes

    def dof(self, comp: int, node) -> np.ndarray:
        return comp * self.nnodes + np.asarray(node, dtype=int)

    def component(self, u: np.ndarray, comp: int) -> np.ndarray:
        return np.asarray(u)[comp * self.nnodes:(comp + 1) * self.nnodes]

    def constraints(self) -> ConstraintSet:
        if self._constraints is None:
            hang = {}
            for comp in range(self.ncomp):
                off = comp * self.nnodes
                for s, masters in self.hanging_nodes.items():
                    hang[s + off] = [(m + off, w) for m, w in masters]
            dir_dofs = []
            for comp in range(self.ncomp):
                dir_dofs.extend(
                    (comp * self.nnodes + self.dirichlet_nodes[comp]).tolist()
                )
            self._constraints = ConstraintSet(self.n_dofs, hang, dir_dofs)
        return self._constraints

    def dirichlet_value_vector(self, value_fn, t: float) -> np.ndarray:
        """Full-size vector holding g(comp, x, y, t) at the Dirichlet DoFs."""
        g = np.zeros(self.n_dofs)
        for comp in range(self.ncomp):
            nodes = self.dirichlet_nodes[comp]
            if len(nodes) == 0:
                continue
            xy = self.node_xy[nodes]
            g[comp * self.nnodes + nodes] = value_fn(comp, xy[:, 0], xy[:, 1], t)
        return g

    def interpolate(self, fn, comp: int | None = None) -> np.ndarray:
        """Nodal interpolation of ``fn(x, y)`` (per component if vector)."""
        if self.ncomp == 1 or comp is not None:
            vals = np.asarray(fn(self.node_xy[:, 0], self.node_xy[:, 1]),
                              dtype=float)
            if self.ncomp == 1:
                return vals
            u = np.zeros(self.n_dofs)
            u[comp * self.nnodes:(comp + 1) * self.nnodes] = vals
            return u
        u = np.empty(self.n_dofs)
        for c in range(self.ncomp):
            u[c * self.nnodes:(c + 1) * self.nnodes] = fn(
                c, self.node_xy[:, 0], self.node_xy[:, 1]
            )
        return u

    # -- quadrature data ------------------------------------------------------

    def quad(self, n: int):
        """Cached physical quadrature: (points (nc, nq, 2), JxW (nc, nq))."""
        if n not in self._quad:
            pts, w = quad_rule(n)
            x = self.cell_x0[:, None] + np.outer(self.cell_w, pts[:, 0])
            y = self.cell_y0[:, None] + np.outer(self.cell_h, pts[:, 1])
            jxw = np.outer(self.cell_w * self.cell_h, w)
            self._quad[n] = (np.stack([x, y], axis=-1), jxw)
        return self._quad[n]

    def eval_values(self, coeffs: np.ndarray, n: int) -> np.ndarray:
        """Values of a scalar coefficient vector at the n-rule quad points."""
        pts, _ = quad_rule(n)
        V = shape_values(self.degree, pts)
        return np.asarray(coeffs)[self.cell_nodes] @ V.T

    def eval_grads(self, coeffs: np.ndarray, n: int) -> np.ndarray:
        """Gradients ``(nc, nq, 2)`` of a scalar coefficient vector."""
        pts, _ = quad_rule(n)
        G = shape_grads(self.degree, pts)
        c = np.asarray(coeffs)[self.cell_nodes]
        out = np.einsum("cl,qld->cqd", c, G)
        out[:, :, 0] /= self.cell_w[:, None]
        out[:, :, 1] /= self.cell_h[:, None]
        return out

    # -- boundary quadrature ---------------------------------------------------

    def boundary_quad(self, tags, n: int):
        """Edge quadrature for boundary sides with the given tags.

        Returns a list of orientation groups ``(cells, locals?, refpts, V, pts,
        wds)``: per group, cell indices, reference points on the side
        ``(nq, 2)``, trace shape values ``(nq, nloc)``, physical points
        ``(len, nq, 2)`` and weights*ds ``(len, nq)``.
        """
        if isinstance(tags, str):
            tags = (tags,)
        key = (tuple(sorted(tags)), n)
        if key in self._bquad:
            return self._bquad[key]
        x1, w1 = gauss01(n)
        groups = []
        for side in range(4):
            cells = [ci for ci, s, tag in self.boundary_sides
                     if s == side and tag in tags]
            if not cells:
                continue
            cells = np.asarray(cells, dtype=int)
            if side == 0:
                ref = np.column_stack([x1, np.zeros_like(x1)])
            elif side == 2:
                ref = np.column_stack([x1, np.ones_like(x1)])
            elif side == 3:
                ref = np.column_stack([np.zeros_like(x1), x1])
            else:
                ref = np.column_stack([np.ones_like(x1), x1])
            V = shape_values(self.degree, ref)
            lens = self.cell_w[cells] if side in (0, 2) else self.cell_h[cells]
            px = self.cell_x0[cells, None] + np.outer(self.cell_w[cells], ref[:, 0])
            py = self.cell_y0[cells, None] + np.outer(self.cell_h[cells], ref[:, 1])
            groups.append({
                "cells": cells,
                "side": side,
                "ref": ref,
                "V": V,
                "points": np.stack([px, py], axis=-1),
                "wds": np.outer(lens, w1),
            })
        self._bquad[key] = groups
        return groups

    def eval_boundary(self, coeffs: np.ndarray, group) -> np.ndarray:
        """Scalar field values at one boundary_quad group's points."""
        return np.asarray(coeffs)[self.cell_nodes[group["cells"]]] @ group["V"].T

    # -- assembled operators --------------------------------------------------

    def _scatter(self, cellmats: np.ndarray) -> sp.csr_matrix:
        nc, nl, _ = cellmats.shape
        cn = self.cell_nodes
        rows = np.broadcast_to(cn[:, :, None], (nc, nl, nl)).ravel()
        cols = np.broadcast_to(cn[:, None, :], (nc, nl, nl)).ravel()
        A = sp.coo_matrix(
            (cellmats.ravel(), (rows, cols)), shape=(self.nnodes, self.nnodes)
        )
        return A.tocsr()

    def mass_matrix(self) -> sp.csr_matrix:
        """Scalar mass matrix (per component)."""
        if self._mass is None:
            M, _, _ = _REF_MATS[self.degree]
            vals = np.einsum("c,ij->cij", self.cell_w * self.cell_h, M)
            self._mass = self._scatter(vals)
        return self._mass

    def stiffness_matrix(self) -> sp.csr_matrix:
        """Scalar stiffness (Laplace) matrix (per component)."""
        if self._stiffness is None:
            _, Kx, Ky = _REF_MATS[self.degree]
            vals = np.einsum("c,ij->cij", self.cell_h / self.cell_w, Kx)
            vals = vals + np.einsum("c,ij->cij", self.cell_w / self.cell_h, Ky)
            self._stiffness = self._scatter(vals)
        return self._stiffness

    def weighted_mass_matrix(self, wq: np.ndarray, n: int) -> sp.csr_matrix:
        """Mass matrix weighted by values ``wq (nc, nq)`` at n-rule points."""
        pts, _ = quad_rule(n)
        V = shape_values(self.degree, pts)
        _, jxw = self.quad(n)
        vals = np.einsum("cq,qi,qj->cij", wq * jxw, V, V)
        return self._scatter(vals)

    def load_vector(self, fq: np.ndarray, n: int) -> np.ndarray:
        """Assemble ``(f, phi_i)`` from values ``fq (nc, nq)`` at n-rule points."""
        pts, _ = quad_rule(n)
        V = shape_values(self.degree, pts)
        _, jxw = self.quad(n)
        vals = np.einsum("cq,qi->ci", fq * jxw, V)
        b = np.zeros(self.nnodes)
        np.add.at(b, self.cell_nodes, vals)
        return b

    def boundary_mass_matrix(self, tags) -> sp.csr_matrix:
        """Scalar edge mass matrix over boundary sides with the given tags."""
        if isinstance(tags, str):
            tags = (tags,)
        Me, _ = _REF_EDGE[self.degree]
        rows, cols, vals = [], [], []
        for ci, side, tag in self.boundary_sides:
            if tag not in tags:
                continue
            loc = _side_locals(self.degree, side)
            ln = self.cell_w[ci] if side in (0, 2) else self.cell_h[ci]
            ids = self.cell_nodes[ci, loc]
            for a, ia in enumerate(ids):
                for b, ib in enumerate(ids):
                    rows.append(ia)
                    cols.append(ib)
                    vals.append(ln * Me[a, b])
        return sp.csr_matrix((vals, (rows, cols)),
                             shape=(self.nnodes, self.nnodes))

    def boundary_load_vector(self, tags) -> np.ndarray:
        """Assemble ``int_edge phi_i ds`` over tagged boundary sides."""
        if isinstance(tags, str):
            tags = (tags,)
        _, be = _REF_EDGE[self.degree]
        out = np.zeros(self.nnodes)
        for ci, side, tag in self.boundary_sides:
            if tag not in tags:
                continue
            loc = _side_locals(self.degree, side)
            ln = self.cell_w[ci] if side in (0, 2) else self.cell_h[ci]
            out[self.cell_nodes[ci, loc]] += ln * be
        return out

    def boundary_length(self, tags) -> float:
        if isinstance(tags, str):
            tags = (tags,)
        total = 0.0
        for ci, side, tag in self.boundary_sides:
            if tag in tags:
                total += self.cell_w[ci] if side in (0, 2) else self.cell_h[ci]
        return total

    # -- patch recovery ---------------------------------------------------------

    def patch_recovery(self) -> "PatchRecovery":
        if self.degree != 1:
            raise ValueError("patch recovery operates on bilinear spaces")
        if self._recon is None:
            self._recon = PatchRecovery(self)
        return self._recon

    def __repr__(self):
        return (f"FESpace(Q{self.degree}, {self.nnodes} nodes x {self.ncomp} "
                f"comp on {self.mesh!r})")


class PatchRecovery:
    """Patchwise biquadratic recovery of a bilinear field.

    On each complete sibling patch the nine Q1 nodal values determine a
    biquadratic polynomial; across patch interfaces with hanging nodes the
    recovered field may be discontinuous (it is evaluated patch-locally).
    """

    def __init__(self, space: FESpace):
        self.space = space
        mesh = space.mesh
        patches = mesh.patches()
        self.npatch = len(patches)
        pn = np.empty((self.npatch, 9), dtype=np.int64)
        box = np.empty((self.npatch, 4))
        cell_patch = np.full(mesh.num_cells, -1, dtype=np.int64)
        cell_pos = np.full(mesh.num_cells, -1, dtype=np.int64)
        for p, (parent, child_idx) in enumerate(patches):
            x0, x1, y0, y1 = mesh._extent(parent)
            hx_half, hy_half = (x1 - x0) // 2, (y1 - y0) // 2
            for j in range(3):
                for i in range(3):
                    key = (x0 + i * hx_half, y0 + j * hy_half)
                    pn[p, 3 * j + i] = space.key_to_id[key]
            scale = 1.0 / (1 << COORD_BITS)
            ox, oy = mesh.origin
            sx, sy = mesh.spacing
            box[p] = (ox + sx * x0 * scale, oy + sy * y0 * scale,
                      sx * (x1 - x0) * scale, sy * (y1 - y0) * scale)
            for pos, ci in enumerate(child_idx):
                cell_patch[ci] = p
                cell_pos[ci] = pos
        self.patch_nodes = pn
        self.patch_box = box
        self.cell_patch = cell_patch
        self.cell_pos = cell_pos
        self._tables: dict = {}

    def _pos_tables(self, n: int):
        """Per child position: biquadratic shape tables at mapped quad points."""
        if n not in self._tables:
            pts, _ = quad_rule(n)
            tabs = []
            for pos in range(4):
                off = np.array([pos & 1, pos >> 1], dtype=float)
                ppts = 0.5 * (pts + off)
                tabs.append((shape_values(2, ppts), shape_grads(2, ppts)))
            self._tables[n] = tabs
        return self._tables[n]

    def eval_values(self, coeffs: np.ndarray, n: int) -> np.ndarray:
        """Recovered values at the space's own n-rule quad points, (nc, nq)."""
        pts, _ = quad_rule(n)
        nq = len(pts)
        out = np.empty((self.space.mesh.num_cells, nq))
        pc = np.asarray(coeffs)[self.patch_nodes]
        tabs = self._pos_tables(n)
        for pos in range(4):
            cells = np.nonzero(self.cell_pos == pos)[0]
            V, _ = tabs[pos]
            out[cells] = pc[self.cell_patch[cells]] @ V.T
        return out

    def eval_grads(self, coeffs: np.ndarray, n: int) -> np.ndarray:
        pts, _ = quad_rule(n)
        nq = len(pts)
        out = np.empty((self.space.mesh.num_cells, nq, 2))
        pc = np.asarray(coeffs)[self.patch_nodes]
        tabs = self._pos_tables(n)
        for pos in range(4):
            cells = np.nonzero(self.cell_pos == pos)[0]
            _, G = tabs[pos]
            p = self.cell_patch[cells]
            g = np.einsum("cl,qld->cqd", pc[p], G)
            g[:, :, 0] /= self.patch_box[p, 2][:, None]
            g[:, :, 1] /= self.patch_box[p, 3][:, None]
            out[cells] = g
        return out

    def eval_at_cell_refpts(self, coeffs, cells, refpts, deriv=None):
        """Recovered values/derivative at per-cell reference points.

        ``cells (m,)`` indexes active cells, ``refpts (m, k, 2)`` their local
        coordinates; returns ``(m, k)``.
        """
        cells = np.asarray(cells, dtype=int)
        refpts = np.asarray(refpts, dtype=float)
        m, k, _ = refpts.shape
        off = np.stack([self.cell_pos[cells] & 1, self.cell_pos[cells] >> 1],
                       axis=-1).astype(float)
        ppts = 0.5 * (refpts + off[:, None, :])
        pc = np.asarray(coeffs)[self.patch_nodes[self.cell_patch[cells]]]
        flat = ppts.reshape(-1, 2)
        if deriv is None:
            V = shape_values(2, flat).reshape(m, k, 9)
            return np.einsum("ml,mkl->mk", pc, V)
        G = shape_grads(2, flat).reshape(m, k, 9, 2)[..., deriv]
        vals = np.einsum("ml,mkl->mk", pc, G)
        scale = self.patch_box[self.cell_patch[cells], 2 + deriv]
        return vals / scale[:, None]


# ---------------------------------------------------------------------------
# transfers between spaces / meshes


def node_match_map(space_lo: FESpace, space_hi: FESpace) -> np.ndarray:
    """For each node of ``space_lo``, the matching node id in ``space_hi``.

    Both spaces must live on the same mesh (Q1 nodes are a subset of Q2
    nodes there, matched by exact dyadic keys).
    """
    if space_lo.mesh is not space_hi.mesh:
        raise ValueError("node matching requires a shared mesh")
    out = np.empty(space_lo.nnodes, dtype=np.int64)
    for key, nid in space_lo.key_to_id.items():
        out[nid] = space_hi.key_to_id[key]
    return out


def interp_down(space_hi: FESpace, coeffs_hi: np.ndarray,
                space_lo: FESpace) -> np.ndarray:
    """Nodal interpolation of a Q2 field into the Q1 space on the same mesh."""
    m = node_match_map(space_lo, space_hi)
    coeffs_hi = np.asarray(coeffs_hi)
    if space_hi.ncomp == 1 and coeffs_hi.ndim == 1 and \
            len(coeffs_hi) == space_hi.nnodes:
        return coeffs_hi[m]
    out = np.empty(space_lo.n_dofs)
    for comp in range(space_lo.ncomp):
        out[comp * space_lo.nnodes:(comp + 1) * space_lo.nnodes] = \
            coeffs_hi[comp * space_hi.nnodes + m]
    return out


def evaluation_matrix(space: FESpace, points: np.ndarray, kind: str = "nodal",
                      deriv=None) -> sp.csr_matrix:
    """Sparse operator evaluating a scalar field at arbitrary points.

    ``kind="nodal"`` evaluates the FE field itself, ``kind="patch"`` the
    patchwise biquadratic recovery (Q1 spaces only).  ``deriv`` of 0/1 builds
    the x/y derivative operator instead of values.  Rows follow ``points``.
    """
    points = np.atleast_2d(np.asarray(points, dtype=float))
    mesh = space.mesh
    npts = len(points)
    if kind == "patch":
        rec = space.patch_recovery()
    rows, cols, vals = [], [], []
    for p, (x, y) in enumerate(points):
        cell, xi, eta = mesh.locate(x, y)
        ci = mesh.cell_index(cell)
        if kind == "nodal":
            ids = space.cell_nodes[ci]
            ref = np.array([[xi, eta]])
            if deriv is None:
                row = shape_values(space.degree, ref)[0]
            else:
                row = shape_grads(space.degree, ref)[0, :, deriv]
                row = row / (space.cell_w[ci] if deriv == 0 else space.cell_h[ci])
        else:
            pidx = rec.cell_patch[ci]
            pos = rec.cell_pos[ci]
            ids = rec.patch_nodes[pidx]
            ref = np.array([[0.5 * (xi + (pos & 1)), 0.5 * (eta + (pos >> 1))]])
            if deriv is None:
                row = shape_values(2, ref)[0]
            else:
                row = shape_grads(2, ref)[0, :, deriv]
                row = row / rec.patch_box[pidx, 2 + deriv]
        rows.extend([p] * len(ids))
        cols.extend(ids.tolist())
        vals.extend(row.tolist())
    return sp.csr_matrix((vals, (rows, cols)), shape=(npts, space.nnodes))


class TransferCache:
    """Caches evaluation operators keyed by (space, kind, deriv, token).

    The token identifies the target point set (e.g. the quad points of some
    other slab mesh); callers guarantee token/point consistency.  Identical
    spatial meshes across slabs share :class:`FESpace` objects, so uniform
    runs build each operator once.
    """

    def __init__(self):
        self._ops: dict = {}

    def matrix(self, space: FESpace, points, token, kind="nodal", deriv=None):
        key = (id(space), kind, deriv, token)
        op = self._ops.get(key)
        if op is None:
            op = evaluation_matrix(space, points, kind=kind, deriv=deriv)
            self._ops[key] = op
        return op


class SpaceCache:
    """Per-run cache of FE spaces keyed by (mesh, degree)."""

    def __init__(self, ncomp=1, boundary_tag=None, dirichlet=None):
        self.ncomp = ncomp
        self.boundary_tag = boundary_tag
        self.dirichlet = dirichlet
        self._spaces: dict = {}

    def get(self, mesh: SpatialMesh, degree: int) -> FESpace:
        key = (mesh, degree)
        spc = self._spaces.get(key)
        if spc is None:
            spc = FESpace(mesh, degree, self.ncomp,
                          boundary_tag=self.boundary_tag,
                          dirichlet=self.dirichlet)
            self._spaces[key] = spc
        return spc


# ---------------------------------------------------------------------------
# temporal transfer helpers (piecewise constant-in-time <-> linear-in-time)


def temporal_interp_down(v_left, v_right):
    """Restrict a linear-in-time slab profile to its piecewise-constant
    representative: the right-endpoint value."""
    return v_right


def temporal_reconstruct_up(knots, values, v_initial=None):
    """Piecewise-linear-in-time reconstruction of slabwise constants.

    ``values[m]`` is the constant on slab m (between ``knots[m]`` and
    ``knots[m+1]``); the reconstruction interpolates them at the right slab
    endpoints.  On the first slab the left value is ``v_initial`` when given,
    otherwise the line of the second slab is extended backwards.  Returns an
    evaluator ``f(t)``; at the slab midpoint it equals the mean of the two
    endpoint values.
    """
    knots = np.asarray(knots, dtype=float)
    values = [np.asarray(v, dtype=float) for v in values]
    M = len(values)
    if len(knots) != M + 1:
        raise ValueError("need one knot more than slab values")

    def left_value(m):
        if m > 0:
            return values[m - 1]
        if v_initial is not None:
            return np.asarray(v_initial, dtype=float)
        if M == 1:
            return values[0]
        k1 = knots[1] - knots[0]
        k2 = knots[2] - knots[1]
        return values[0] + (values[0] - values[1]) * (k1 / k2)

    def evaluate(t):
        m = int(np.searchsorted(knots, t, side="left")) - 1
        m = min(max(m, 0), M - 1)
        k = knots[m + 1] - knots[m]
        tau = (t - knots[m]) / k
        return (1.0 - tau) * left_value(m) + tau * values[m]

    return evaluate
