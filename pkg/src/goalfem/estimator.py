"""Goal-oriented space-time error indicators with partition-of-unity weights.

The estimator measures the goal error ``J(u) - J(u_kh)`` of a slab-wise
constant-in-time finite element solution.  The primal part tests the
space-time residual of the forward solution with reconstructed adjoint
weights; the adjoint part tests the residual of the linearized backward
problem with reconstructed forward weights.  Localization multiplies the
weights by the bilinear vertex tent functions of each slab mesh, which sum
to one on every cell, so contributions land per time interval (temporal
part) and per mesh vertex (spatial part) without integration by parts.

Two localization variants exist: ``joint`` keeps one indicator per vertex
covering both error sources, ``split`` separates a scalar temporal
indicator per slab from the per-vertex spatial indicators.  Their per-slab
sums agree identically.  A second partition of unity that is also piecewise
linear in time ("cg1") is available for the split primal heat estimator.
"""

from __future__ import annotations

import dataclasses
from typing import Optional, Sequence

import numpy as np

from .fespace import (
    TEMPORAL_RULES,
    SpaceCache,
    TransferCache,
    interp_down,
    quad_rule,
    shape_grads,
    shape_values,
    temporal_reconstruct_up,
)
from .solver import problem_space_cache

__all__ = [
    "EstimatorError",
    "EstimatorConfig",
    "IndicatorField",
    "Cg1Indicators",
    "EstimateReport",
    "estimate_slab",
    "estimate_slab_cg1pu",
    "estimate_all",
    "element_indicators",
    "cg1_temporal_combination",
    "cg1_element_indicators",
    "aggregate",
]


class EstimatorError(ValueError):
    """Unsupported estimator configuration or inconsistent inputs."""


_VARIANTS = ("split", "joint")
_PARTS = ("primal", "adjoint", "full")
_PUS = ("dg0", "cg1")
_ORDER_PAIRS = ((1, 1), (1, 2), (2, 2))


@dataclasses.dataclass(frozen=True)
class EstimatorConfig:
    """Choices that shape the indicator assembly.

    ``orders = (s, s_tilde)`` are the forward/backward polynomial degrees.
    Weight reconstructions follow the pair: with equal degree 1 the enriched
    weights come from patchwise biquadratic recovery, with a degree-2
    backward solve they are native and the low-order weight is its vertex
    interpolant, and with both solves at degree 2 the forward low-order
    weight is the vertex interpolant of the forward solution.

    ``f_rule`` integrates source terms and time-dependent goal densities in
    time; every term that is polynomial in time uses exact midpoint-based
    closed forms.  ``weight_mode="external"`` bypasses the weight table and
    uses the supplied backward solution directly as the reconstruction (no
    low-order subtraction); it serves enrichment and orthogonality checks.
    """

    variant: str = "split"
    part: str = "primal"
    pu: str = "dg0"
    orders: tuple = (1, 2)
    f_rule: str = "gauss2"
    quad_n: int = 3
    weight_mode: str = "table"

    def __post_init__(self):
        if self.variant not in _VARIANTS:
            raise EstimatorError(f"unknown variant {self.variant!r}")
        if self.part not in _PARTS:
            raise EstimatorError(f"unknown part {self.part!r}")
        if self.pu not in _PUS:
            raise EstimatorError(f"unknown partition of unity {self.pu!r}")
        if tuple(self.orders) not in _ORDER_PAIRS:
            raise EstimatorError(
                f"unsupported order pair {self.orders!r}; "
                f"choose one of {_ORDER_PAIRS}")
        if self.f_rule not in TEMPORAL_RULES:
            raise EstimatorError(f"unknown temporal rule {self.f_rule!r}")
        if self.quad_n < 2:
            raise EstimatorError("estimator quadrature needs quad_n >= 2")
        if self.weight_mode not in ("table", "external"):
            raise EstimatorError(f"unknown weight mode {self.weight_mode!r}")
        if self.pu == "cg1" and (self.variant, self.part) != ("split", "primal"):
            raise EstimatorError(
                "the cg1 partition of unity supports only the split primal "
                "estimator")
        if self.weight_mode == "external" and self.part != "primal":
            raise EstimatorError("external weights apply to the primal part")


# ---------------------------------------------------------------------------
# result containers


@dataclasses.dataclass
class IndicatorField:
    """Per-slab indicators of one estimate (natural, piecewise-constant PU).

    ``eta_h``/``eta_h_adj`` hold one value per vertex of the slab mesh
    (including constrained vertices).  Split estimates also carry the scalar
    temporal indicators; joint estimates fold everything into the vertex
    values.
    """

    slab: int
    variant: str
    part: str
    orders: tuple
    eta_k: Optional[float] = None
    eta_h: Optional[np.ndarray] = None
    eta_k_adj: Optional[float] = None
    eta_h_adj: Optional[np.ndarray] = None

    def temporal_value(self) -> float:
        """Part-combined temporal indicator (0.0 for joint estimates)."""
        if self.part == "full":
            if self.eta_k is None:
                return 0.0
            return 0.5 * (self.eta_k + self.eta_k_adj)
        v = self.eta_k if self.part == "primal" else self.eta_k_adj
        return 0.0 if v is None else v

    def spatial_vector(self) -> np.ndarray:
        """Part-combined per-vertex indicators."""
        if self.part == "full":
            return 0.5 * (self.eta_h + self.eta_h_adj)
        return self.eta_h if self.part == "primal" else self.eta_h_adj

    def slab_sum(self) -> float:
        return self.temporal_value() + float(np.sum(self.spatial_vector()))

    def indicator_abs_sum(self) -> float:
        """Contribution to the indicator-index denominator."""
        total = float(np.sum(np.abs(self.spatial_vector())))
        if self.variant == "split":
            total += abs(self.temporal_value())
        return total


@dataclasses.dataclass
class Cg1Indicators:
    """Per-slab indicator families of the piecewise-linear-in-time PU.

    Each interval yields two temporal scalars and two per-vertex vectors,
    one for the time tent anchored at the slab start and one for the tent
    anchored at the slab end.  Their sums reproduce the natural-PU split
    estimate of the same slab.
    """

    slab: int
    orders: tuple
    eta_k_start: float
    eta_k_end: float
    eta_h_start: np.ndarray
    eta_h_end: np.ndarray
    variant: str = "split"
    part: str = "primal"

    def temporal_value(self) -> float:
        return self.eta_k_start + self.eta_k_end

    def spatial_vector(self) -> np.ndarray:
        return self.eta_h_start + self.eta_h_end

    def slab_sum(self) -> float:
        return self.temporal_value() + float(np.sum(self.spatial_vector()))

    def indicator_abs_sum(self) -> float:
        return (abs(self.eta_k_start) + abs(self.eta_k_end)
                + float(np.sum(np.abs(self.eta_h_start)))
                + float(np.sum(np.abs(self.eta_h_end))))


@dataclasses.dataclass
class EstimateReport:
    """Aggregated estimate with effectivity data when a reference exists.

    ``i_eff`` uses the signed convention ``eta / error``; the quotient
    ``|error| / |eta|`` is its reciprocal magnitude and is not emitted.
    ``i_ind`` compares the error against the sum of indicator magnitudes.
    """

    eta_k: float
    eta_h: float
    eta: float
    j_value: float
    variant: str
    part: str
    orders: tuple
    error: Optional[float] = None
    i_eff: Optional[float] = None
    i_ind: Optional[float] = None


# ---------------------------------------------------------------------------
# small helpers


def _nodal_transfer(src_space, vec, dst_space, transfers):
    """Pointwise values of a field from ``src_space`` at ``dst_space`` nodes.

    Transfers each component of the (distributed) coefficient vector; the
    result is a coefficient vector on ``dst_space``.  Spaces over the same
    mesh and degree share their node ordering, so the vector passes through
    untouched.
    """
    vec = np.asarray(vec, dtype=float)
    if src_space is dst_space or (src_space.mesh is dst_space.mesh
                                  and src_space.degree == dst_space.degree):
        return vec
    E = transfers.matrix(src_space, dst_space.node_xy,
                         token=("nodes", id(dst_space)), kind="nodal")
    out = np.empty(dst_space.n_dofs)
    for c in range(dst_space.ncomp):
        lo = c * dst_space.nnodes
        out[lo:lo + dst_space.nnodes] = E @ src_space.component(vec, c)
    return out


def _component_fields(space, vec, n, kind, grads=True):
    """Per-component (values, grads) arrays at the space's quad points."""
    vals, grd = [], []
    rec = space.patch_recovery() if kind == "patch" else None
    for c in range(space.ncomp):
        comp = space.component(vec, c)
        if kind == "patch":
            vals.append(rec.eval_values(comp, n))
            grd.append(rec.eval_grads(comp, n) if grads else None)
        else:
            vals.append(space.eval_values(comp, n))
            grd.append(space.eval_grads(comp, n) if grads else None)
    return vals, grd


def _boundary_values(space, vec, groups, kind):
    """Per-component scalar traces on each boundary group."""
    rec = space.patch_recovery() if kind == "patch" else None
    out = []
    for c in range(space.ncomp):
        comp = space.component(vec, c)
        rows = []
        for g in groups:
            if kind == "patch":
                ref = np.broadcast_to(
                    g["ref"], (len(g["cells"]),) + g["ref"].shape)
                rows.append(rec.eval_at_cell_refpts(comp, g["cells"], ref))
            else:
                rows.append(space.eval_boundary(comp, g))
        out.append(rows)
    return out


def _zeros_like_fields(ncomp, nc, nq, grads=True):
    vals = [np.zeros((nc, nq)) for _ in range(ncomp)]
    grd = [np.zeros((nc, nq, 2)) if grads else None for _ in range(ncomp)]
    return vals, grd


class _TentScatter:
    """Accumulates tent-weighted cell integrands into per-vertex values."""

    def __init__(self, q1, n):
        ref, _ = quad_rule(n)
        self.q1 = q1
        self.V = shape_values(1, ref)           # (nq, 4)
        self.G = shape_grads(1, ref)            # (nq, 4, 2)
        _, self.jxw = q1.quad(n)
        self._cellvals = None                   # (nc, 4) accumulator

    def add_values(self, field):
        """field (nc, nq): integrand multiplying the tent values."""
        contrib = (field * self.jxw) @ self.V
        self._cellvals = contrib if self._cellvals is None \
            else self._cellvals + contrib

    def add_gradients(self, field):
        """field (nc, nq, 2): integrand dotted with the tent gradients."""
        gx = ((field[:, :, 0] * self.jxw) @ self.G[:, :, 0])
        gx /= self.q1.cell_w[:, None]
        gy = ((field[:, :, 1] * self.jxw) @ self.G[:, :, 1])
        gy /= self.q1.cell_h[:, None]
        contrib = gx + gy
        self._cellvals = contrib if self._cellvals is None \
            else self._cellvals + contrib

    def vector(self, boundary_terms=()):
        out = np.zeros(self.q1.nnodes)
        if self._cellvals is not None:
            np.add.at(out, self.q1.cell_nodes, self._cellvals)
        for group, vals in boundary_terms:
            Vb = shape_values(1, group["ref"])
            contrib = (vals * group["wds"]) @ Vb
            np.add.at(out, self.q1.cell_nodes[group["cells"]], contrib)
        return out


# ---------------------------------------------------------------------------
# per-slab field preparation


class _SlabContext:
    """Everything one slab estimate needs, evaluated at its quad points."""

    def __init__(self, problem, goal, primal, adjoint, m, cfg,
                 scache, transfers):
        self.problem = problem
        self.goal = goal
        self.cfg = cfg
        self.m = m
        self.M = primal.tmesh.num_intervals
        if not 0 <= m < self.M:
            raise EstimatorError(f"slab {m} outside 0..{self.M - 1}")
        s, st = cfg.orders
        if primal.order != s:
            raise EstimatorError(
                f"forward solution has degree {primal.order}, config wants {s}")
        if cfg.weight_mode == "table" and adjoint.order != st:
            raise EstimatorError(
                f"backward solution has degree {adjoint.order}, "
                f"config wants {st}")
        self.primal = primal
        self.adjoint = adjoint
        self.scache = scache
        self.transfers = transfers

        self.sspace = primal.spaces[m]
        mesh = self.sspace.mesh
        self.q1 = scache.get(mesh, 1)
        self.n = cfg.quad_n
        self.pts, self.jxw = self.q1.quad(self.n)
        self.k = primal.tmesh.lengths[m]
        self.t0, self.t1 = primal.tmesh.interval(m)
        self.ncomp = problem.ncomp
        self.diffusion = tuple(problem.diffusion)
        # Robin data as (tag, component, coefficient) triples
        self.robin = [(tag, comp, coef)
                      for tag, pairs in problem.robin.items()
                      for comp, coef in pairs]
        self._bgroups = {}

        if cfg.weight_mode == "table":
            self.zspace = adjoint.spaces[m]
            if self.zspace.mesh is not mesh:
                raise EstimatorError(
                    "forward and backward slabs must share their mesh")
        else:
            zsp = adjoint.spaces[0]
            for sp in adjoint.spaces:
                if sp is not zsp:
                    raise EstimatorError(
                        "external weights need one shared backward space")
            self.zspace = zsp

        # lazily-built field groups
        self._cache = {}

    # -- boundary groups ----------------------------------------------------

    def boundary_groups(self, space):
        """Boundary quadrature groups for the union of flux/goal tags."""
        tags = sorted({tag for tag, _, _ in self.robin}
                      | set(self.goal.boundary_weight(self.q1)))
        if not tags:
            return ()
        key = (id(space), tuple(tags))
        if key not in self._bgroups:
            self._bgroups[key] = space.boundary_quad(tuple(tags), self.n)
        return self._bgroups[key]

    # -- forward low-order fields --------------------------------------------

    def _low_u_vec(self, idx):
        """Low-order forward coefficient vector of slab ``idx`` (own mesh)."""
        s = self.cfg.orders[0]
        if idx < 0:
            space = self.primal.spaces[0]
            vec = self.primal.initial_vector
        else:
            space = self.primal.spaces[idx]
            vec = self.primal.vectors[idx]
        if s == 2:
            lo = self.scache.get(space.mesh, 1)
            return interp_down(space, vec, lo), lo
        return np.asarray(vec, dtype=float), space

    def u_fields(self):
        """u_kh values/grads at this slab's end."""
        if "u" not in self._cache:
            vec, space = self._low_u_vec(self.m)
            self._cache["u"] = _component_fields(space, vec, self.n, "nodal")
        return self._cache["u"]

    def u_prev_values(self):
        """u_kh values carried over from the previous slab (jump partner)."""
        if "uprev" not in self._cache:
            vec, space = self._low_u_vec(self.m - 1)
            here = _nodal_transfer(space, vec, self.q1, self.transfers)
            vals, _ = _component_fields(self.q1, here, self.n, "nodal",
                                        grads=False)
            self._cache["uprev"] = vals
        return self._cache["uprev"]

    # -- backward weight fields ----------------------------------------------

    def _z_on_slab(self, idx):
        """Backward coefficient vector of slab ``idx`` brought to this mesh."""
        st = self.cfg.orders[1]
        zdst = self.scache.get(self.q1.mesh, st)
        src = self.adjoint.spaces[idx]
        return _nodal_transfer(src, self.adjoint.vectors[idx], zdst,
                               self.transfers), zdst

    def _enriched_z(self, vec, space):
        kind = "patch" if self.cfg.orders[1] == 1 else "nodal"
        return _component_fields(space, vec, self.n, kind)

    def z_end_fields(self):
        """Reconstructed weight at the slab end."""
        if "zc" not in self._cache:
            if self.cfg.weight_mode == "external":
                self._cache["zc"] = self._external_z(self.t1)
            else:
                vec, space = self._z_on_slab(self.m)
                self._cache["zc"] = self._enriched_z(vec, space)
                self._cache["zc_vec"] = (vec, space)
        return self._cache["zc"]

    def z_start_fields(self):
        """Reconstructed weight at the slab start (extrapolated on slab 0)."""
        if "zp" not in self._cache:
            if self.cfg.weight_mode == "external":
                self._cache["zp"] = self._external_z(self.t0)
            elif self.M == 1:
                self._cache["zp"] = self.z_end_fields()
            elif self.m == 0:
                v0, space = self._z_on_slab(0)
                v1, _ = self._z_on_slab(1)
                r = self.primal.tmesh.lengths[0] / self.primal.tmesh.lengths[1]
                self._cache["zp"] = self._enriched_z(
                    (1.0 + r) * v0 - r * v1, space)
            else:
                vec, space = self._z_on_slab(self.m - 1)
                self._cache["zp"] = self._enriched_z(vec, space)
        return self._cache["zp"]

    def z_low_fields(self):
        """Low-order weight at the slab end (zero in external mode)."""
        if "zh" not in self._cache:
            if self.cfg.weight_mode == "external":
                self._cache["zh"] = _zeros_like_fields(
                    self.ncomp, *self.jxw.shape)
                self._cache["zh_vec"] = (np.zeros(self.q1.n_dofs), self.q1)
            else:
                vec, space = self._z_on_slab(self.m)
                if self.cfg.orders[1] == 2:
                    vec = interp_down(space, vec, self.q1)
                self._cache["zh"] = _component_fields(
                    self.q1, vec, self.n, "nodal")
                self._cache["zh_vec"] = (vec, self.q1)
        return self._cache["zh"]

    def z_next_low_values(self):
        """Low-order weight carried back from the next slab (jump partner)."""
        if "znext" not in self._cache:
            if self.m == self.M - 1:
                term = self.adjoint.terminal_vector
                space = self.adjoint.spaces[self.m]
                vec = (np.zeros(space.n_dofs) if term is None
                       else np.asarray(term, dtype=float))
            else:
                space = self.adjoint.spaces[self.m + 1]
                vec = self.adjoint.vectors[self.m + 1]
            if self.cfg.orders[1] == 2:
                lo = self.scache.get(space.mesh, 1)
                vec, space = interp_down(space, vec, lo), lo
            here = _nodal_transfer(space, vec, self.q1, self.transfers)
            vals, _ = _component_fields(self.q1, here, self.n, "nodal",
                                        grads=False)
            self._cache["znext"] = vals
        return self._cache["znext"]

    def _external_z_vec(self, t):
        """Coefficient vector of the external backward weight at time t."""
        if "zrec" not in self._cache:
            self._cache["zrec"] = temporal_reconstruct_up(
                self.adjoint.tmesh.knots, self.adjoint.vectors)
        return self._cache["zrec"](t)

    def _external_z(self, t):
        """Values/grads of the external backward reconstruction at time t."""
        vec = self._external_z_vec(t)
        zsp = self.zspace
        if zsp is self.q1 or zsp.mesh is self.q1.mesh:
            space = zsp if zsp.mesh is self.q1.mesh else self.q1
            return _component_fields(space, vec, self.n, "nodal")
        flat = self.pts.reshape(-1, 2)
        shape = self.jxw.shape
        token = ("quadpts", id(self.q1), self.n)
        vals, grads = [], []
        for c in range(zsp.ncomp):
            comp = zsp.component(vec, c)
            E = self.transfers.matrix(zsp, flat, token, kind="nodal")
            vals.append((E @ comp).reshape(shape))
            g = np.empty(shape + (2,))
            for d in (0, 1):
                Ed = self.transfers.matrix(zsp, flat, token, kind="nodal",
                                           deriv=d)
                g[:, :, d] = (Ed @ comp).reshape(shape)
            grads.append(g)
        return vals, grads

    # -- forward reconstruction fields (adjoint part) -------------------------

    def _enriched_u_local(self, vec, space):
        kind = "patch" if self.cfg.orders[0] == 1 else "nodal"
        return _component_fields(space, vec, self.n, kind)

    def _u_on_slab(self, idx):
        sdst = self.scache.get(self.q1.mesh, self.cfg.orders[0])
        src = self.primal.spaces[idx]
        return _nodal_transfer(src, self.primal.vectors[idx], sdst,
                               self.transfers), sdst

    def u_recon_fields(self):
        """(current, start, end) enriched forward fields for this slab.

        ``start``/``end`` are the endpoint values of the piecewise-linear
        forward reconstruction on this slab: the forward-shifted rule uses
        (current, next); the last slab falls back to (previous, current),
        which makes its end-point jump weight vanish.
        """
        if "urec" not in self._cache:
            vec_c, space_c = self._u_on_slab(self.m)
            cur = self._enriched_u_local(vec_c, space_c)
            if self.M == 1:
                start = end = cur
            elif self.m == self.M - 1:
                vec_p, space_p = self._u_on_slab(self.m - 1)
                start = self._enriched_u_local(vec_p, space_p)
                end = cur
            else:
                vec_n, space_n = self._u_on_slab(self.m + 1)
                start = cur
                end = self._enriched_u_local(vec_n, space_n)
            self._cache["urec"] = (cur, start, end)
        return self._cache["urec"]

    # -- problem data ----------------------------------------------------------

    def omega_values(self):
        """Reaction rate at u_kh (combustion only)."""
        if "omega" not in self._cache:
            uv, _ = self.u_fields()
            self._cache["omega"] = self.problem.omega(uv[0], uv[1])
        return self._cache["omega"]

    def omega_derivative_values(self):
        if "omega_d" not in self._cache:
            uv, _ = self.u_fields()
            self._cache["omega_d"] = self.problem.omega_derivatives(
                uv[0], uv[1])
        return self._cache["omega_d"]

    def source_terms(self):
        """[(xi, w, f(pts, t0 + xi k)) ...] for the configured rule."""
        if self.problem.kind != "heat":
            return ()
        if "f" not in self._cache:
            xi, w = TEMPORAL_RULES[self.cfg.f_rule]
            self._cache["f"] = [
                (float(x), float(wt),
                 self.problem.f(self.pts[:, :, 0], self.pts[:, :, 1],
                                self.t0 + x * self.k))
                for x, wt in zip(xi, w)]
        return self._cache["f"]

    def goal_rule_points(self):
        """Temporal rule for goal-density integrals of the adjoint part."""
        if self.goal.time_dependent:
            xi, w = TEMPORAL_RULES[self.cfg.f_rule]
            return [(float(x), float(wt)) for x, wt in zip(xi, w)]
        return [(0.5, 1.0)]

    def goal_densities(self):
        """[(xi, w, density (nc, nq, ncomp) or None)] at u_kh."""
        if "gdens" not in self._cache:
            uv, _ = self.u_fields()
            out = []
            for x, wt in self.goal_rule_points():
                d = self.goal.volume_density(
                    self.q1, self.pts, uv, self.t0 + x * self.k)
                out.append((x, wt, d))
            self._cache["gdens"] = out
        return self._cache["gdens"]

    def goal_boundary_coeffs(self):
        return self.goal.boundary_weight(self.q1)

    # -- boundary traces -------------------------------------------------------

    def boundary_trace(self, name):
        """Per-component boundary values of a named field group."""
        key = ("trace", name)
        if key in self._cache:
            return self._cache[key]
        st_kind = "patch" if self.cfg.orders[1] == 1 else "nodal"
        s_kind = "patch" if self.cfg.orders[0] == 1 else "nodal"
        if name == "u":
            vec, space = self._low_u_vec(self.m)
            groups = self.boundary_groups(space)
            out = _boundary_values(space, vec, groups, "nodal")
        elif name == "zh":
            self.z_low_fields()
            vec, space = self._cache["zh_vec"]
            groups = self.boundary_groups(space)
            out = _boundary_values(space, vec, groups, "nodal")
        elif name in ("zc", "zp"):
            if self.cfg.weight_mode == "external":
                out = self._external_z_trace(
                    self.t1 if name == "zc" else self.t0)
            else:
                if name == "zc":
                    self.z_end_fields()
                    vec, space = self._cache["zc_vec"]
                else:
                    if self.M == 1:
                        return self.boundary_trace("zc")
                    if self.m == 0:
                        v0, space = self._z_on_slab(0)
                        v1, _ = self._z_on_slab(1)
                        r = (self.primal.tmesh.lengths[0]
                             / self.primal.tmesh.lengths[1])
                        vec = (1.0 + r) * v0 - r * v1
                    else:
                        vec, space = self._z_on_slab(self.m - 1)
                groups = self.boundary_groups(space)
                out = _boundary_values(space, vec, groups, st_kind)
        elif name in ("ucur", "ustart", "uend"):
            idx = {"ucur": self.m, "ustart": self.m, "uend": self.m}[name]
            if name == "ustart":
                idx = self.m - 1 if self.m == self.M - 1 and self.M > 1 \
                    else self.m
            elif name == "uend":
                idx = self.m if self.m == self.M - 1 or self.M == 1 \
                    else self.m + 1
            vec, space = self._u_on_slab(idx)
            groups = self.boundary_groups(space)
            out = _boundary_values(space, vec, groups, s_kind)
        elif name == "ukh":
            vec, space = self._low_u_vec(self.m)
            groups = self.boundary_groups(space)
            out = _boundary_values(space, vec, groups, "nodal")
        elif name == "znext":
            if self.m == self.M - 1:
                term = self.adjoint.terminal_vector
                space = self.adjoint.spaces[self.m]
                vec = (np.zeros(space.n_dofs) if term is None
                       else np.asarray(term, dtype=float))
            else:
                space = self.adjoint.spaces[self.m + 1]
                vec = self.adjoint.vectors[self.m + 1]
            if self.cfg.orders[1] == 2:
                lo = self.scache.get(space.mesh, 1)
                vec, space = interp_down(space, vec, lo), lo
            here = _nodal_transfer(space, vec, self.q1, self.transfers)
            groups = self.boundary_groups(self.q1)
            out = _boundary_values(self.q1, here, groups, "nodal")
        else:  # pragma: no cover - internal misuse
            raise KeyError(name)
        self._cache[key] = out
        return out

    def _external_z_trace(self, t):
        vec = self._external_z_vec(t)
        here = _nodal_transfer(self.zspace, vec, self.q1, self.transfers)
        groups = self.boundary_groups(self.q1)
        return _boundary_values(self.q1, here, groups, "nodal")

    def tagged_groups(self, space, wanted_tag):
        """(group index, group, rows) of ``boundary_groups`` under a tag."""
        groups = self.boundary_groups(space)
        out = []
        for gi, g in enumerate(groups):
            keep = [i for i in range(len(g["cells"]))
                    if self._face_tag(g, i) == wanted_tag]
            if keep:
                out.append((gi, g, np.asarray(keep, dtype=int)))
        return out

    def _face_tag(self, group, row):
        # boundary_sides stores (cell, side, tag); map back via cell+side
        key = (int(group["cells"][row]), group["side"])
        tags = self._side_tags()
        return tags.get(key)

    def _side_tags(self):
        if "side_tags" not in self._cache:
            self._cache["side_tags"] = {
                (ci, side): tag
                for ci, side, tag in self.q1.boundary_sides}
        return self._cache["side_tags"]


# ---------------------------------------------------------------------------
# assembly of the printed forms


def _volume_pairing(ctx, ug, wg):
    """sum_c d_c (grad u_c, grad w_c) over the slab mesh."""
    total = 0.0
    for c in range(ctx.ncomp):
        total += ctx.diffusion[c] * float(
            np.sum(ctx.jxw * np.sum(ug[c] * wg[c], axis=-1)))
    return total


def _boundary_pairing(ctx, left_name, right_name):
    """sum over Robin data of coef * (left_comp, right_comp) on its faces."""
    if not ctx.robin:
        return 0.0
    lt = ctx.boundary_trace(left_name)
    rt = ctx.boundary_trace(right_name)
    total = 0.0
    for tag, comp, coef in ctx.robin:
        for gi, g, rows in ctx.tagged_groups(ctx.q1, tag):
            total += coef * float(np.sum(
                g["wds"][rows] * lt[comp][gi][rows] * rt[comp][gi][rows]))
    return total


def _reaction_pairing(ctx, wv):
    """-(omega, w_0) + (omega, w_1) evaluated at u_kh."""
    if ctx.problem.kind != "combustion":
        return 0.0
    om = ctx.omega_values()
    return float(np.sum(ctx.jxw * om * (wv[1] - wv[0])))


def _jump_pairing(ctx, wv):
    """(u_kh - previous u_kh, w) at the slab start."""
    uv, _ = ctx.u_fields()
    upv = ctx.u_prev_values()
    total = 0.0
    for c in range(ctx.ncomp):
        total += float(np.sum(ctx.jxw * (uv[c] - upv[c]) * wv[c]))
    return total


def _estimate_primal(ctx):
    """Split (eta_k, eta_h) or joint (None, eta_joint) primal indicators."""
    cfg = ctx.cfg
    k = ctx.k
    uv, ug = ctx.u_fields()
    upv = ctx.u_prev_values()
    zpv, zpg = ctx.z_start_fields()
    zcv, zcg = ctx.z_end_fields()
    zhv, zhg = ctx.z_low_fields()
    om = ctx.omega_values() if ctx.problem.kind == "combustion" else None

    if cfg.variant == "split":
        # temporal: weight endpoints (z_start - z_end) shrinking linearly
        dzv = [zpv[c] - zcv[c] for c in range(ctx.ncomp)]
        dzg = [zpg[c] - zcg[c] for c in range(ctx.ncomp)]
        eta_k = 0.0
        for x, wt, fv in ctx.source_terms():
            eta_k += k * wt * (1.0 - x) * float(np.sum(ctx.jxw * fv * dzv[0]))
        eta_k -= 0.5 * k * (_volume_pairing(ctx, ug, dzg)
                            + _boundary_pairing(ctx, "u", "zp")
                            - _boundary_pairing(ctx, "u", "zc")
                            + _reaction_pairing(ctx, dzv))
        eta_k -= _jump_pairing(ctx, dzv)

        # spatial: weight (z_end - z_low), constant in time
        ezv = [zcv[c] - zhv[c] for c in range(ctx.ncomp)]
        ezg = [zcg[c] - zhg[c] for c in range(ctx.ncomp)]
        sc = _TentScatter(ctx.q1, ctx.n)
        field = np.zeros_like(ctx.jxw)
        fbar = None
        for x, wt, fv in ctx.source_terms():
            fbar = k * wt * fv if fbar is None else fbar + k * wt * fv
        if fbar is not None:
            field += fbar * ezv[0]
        gvec = np.zeros(ctx.jxw.shape + (2,))
        for c in range(ctx.ncomp):
            field -= k * ctx.diffusion[c] * np.sum(ug[c] * ezg[c], axis=-1)
            field -= (uv[c] - upv[c]) * ezv[c]
            gvec -= k * ctx.diffusion[c] * ug[c] * ezv[c][:, :, None]
        if om is not None:
            field += k * om * (ezv[0] - ezv[1])
        sc.add_values(field)
        sc.add_gradients(gvec)
        eta_h = sc.vector(boundary_terms=_robin_boundary_terms(
            ctx, "zc", "zh", -k))
        return eta_k, eta_h

    # joint: weight = reconstruction minus low-order weight, tent-localized
    mzv = [0.5 * (zpv[c] + zcv[c]) - zhv[c] for c in range(ctx.ncomp)]
    mzg = [0.5 * (zpg[c] + zcg[c]) - zhg[c] for c in range(ctx.ncomp)]
    jzv = [zpv[c] - zhv[c] for c in range(ctx.ncomp)]
    sc = _TentScatter(ctx.q1, ctx.n)
    field = np.zeros_like(ctx.jxw)
    for x, wt, fv in ctx.source_terms():
        field += k * wt * fv * ((1.0 - x) * zpv[0] + x * zcv[0] - zhv[0])
    gvec = np.zeros(ctx.jxw.shape + (2,))
    for c in range(ctx.ncomp):
        field -= k * ctx.diffusion[c] * np.sum(ug[c] * mzg[c], axis=-1)
        field -= (uv[c] - upv[c]) * jzv[c]
        gvec -= k * ctx.diffusion[c] * ug[c] * mzv[c][:, :, None]
    if om is not None:
        field += k * om * (mzv[0] - mzv[1])
    sc.add_values(field)
    sc.add_gradients(gvec)
    terms = _robin_boundary_terms(ctx, "zc", "zh", -0.5 * k)
    terms += _robin_boundary_terms(ctx, "zp", "zh", -0.5 * k)
    return None, sc.vector(boundary_terms=terms)


def _robin_boundary_terms(ctx, z_name, z_low_name, factor):
    """Tent-scatter rows for factor * u_comp * (z - z_low)_comp on faces."""
    if not ctx.robin:
        return []
    ut = ctx.boundary_trace("u")
    zt = ctx.boundary_trace(z_name)
    zlt = ctx.boundary_trace(z_low_name)
    out = []
    for tag, comp, coef in ctx.robin:
        for gi, g, rows in ctx.tagged_groups(ctx.q1, tag):
            vals = factor * coef * ut[comp][gi][rows] * (
                zt[comp][gi][rows] - zlt[comp][gi][rows])
            sub = {"cells": g["cells"][rows], "ref": g["ref"],
                   "wds": g["wds"][rows]}
            out.append((sub, vals))
    return out


def _estimate_adjoint(ctx):
    """Split (eta_k*, eta_h*) or joint (None, eta*) adjoint indicators."""
    cfg = ctx.cfg
    k = ctx.k
    ncomp = ctx.ncomp
    zhv, zhg = ctx.z_low_fields()
    znv = ctx.z_next_low_values()
    jz = [znv[c] - zhv[c] for c in range(ncomp)]
    cur, start, end = ctx.u_recon_fields()
    ukh_v, ukh_g = ctx.u_fields()
    omd = (ctx.omega_derivative_values()
           if ctx.problem.kind == "combustion" else None)
    gdens = ctx.goal_densities()
    gb = ctx.goal_boundary_coeffs()

    def lin_terms(weight_base_v, weight_base_g):
        """Midpoint and end values of the linear weight over a base field."""
        wmv = [0.5 * (start[0][c] + end[0][c]) - weight_base_v[c]
               for c in range(ncomp)]
        wmg = [0.5 * (start[1][c] + end[1][c]) - weight_base_g[c]
               for c in range(ncomp)]
        wev = [end[0][c] - weight_base_v[c] for c in range(ncomp)]
        return wmv, wmg, wev

    def density_sum(weight_at):
        """k * integral of the goal density against a linear-in-t weight.

        ``weight_at(xi)`` returns per-component (nc, nq) weight values.
        Returns an (nc, nq) field (volume part) to localize or integrate.
        """
        acc = None
        for x, wt, dens in gdens:
            if dens is None:
                continue
            wv = weight_at(x)
            term = sum(dens[..., c] * wv[c] for c in range(ncomp))
            acc = k * wt * term if acc is None else acc + k * wt * term
        return acc

    def goal_boundary_sum(weight_trace_pair, localized):
        """Boundary goal terms; returns scalar or tent rows."""
        if not gb:
            return 0.0 if not localized else []
        rows_out = []
        total = 0.0
        for tag, coefs in gb.items():
            for gi, g, rows in ctx.tagged_groups(ctx.q1, tag):
                for c, coef in enumerate(coefs):
                    if coef == 0.0:
                        continue
                    vals = None
                    for x, wt in ctx.goal_rule_points():
                        wtr = weight_trace_pair(x, c, gi, rows)
                        vals = (k * wt * coef) * wtr if vals is None \
                            else vals + (k * wt * coef) * wtr
                    if localized:
                        sub = {"cells": g["cells"][rows], "ref": g["ref"],
                               "wds": g["wds"][rows]}
                        rows_out.append((sub, vals))
                    else:
                        total += float(np.sum(g["wds"][rows] * vals))
        return rows_out if localized else total

    ust_t = ctx.boundary_trace("ustart") if (ctx.robin or gb) else None
    uen_t = ctx.boundary_trace("uend") if (ctx.robin or gb) else None
    ucur_t = ctx.boundary_trace("ucur") if (ctx.robin or gb) else None
    ukh_t = ctx.boundary_trace("ukh") if (ctx.robin or gb) else None
    zh_t = ctx.boundary_trace("zh") if ctx.robin else None

    def robin_lin(base_trace, factor, localized):
        """factor * kappa * (w_mid)_comp * z_low_comp on Robin faces."""
        if not ctx.robin:
            return 0.0 if not localized else []
        rows_out = []
        total = 0.0
        for tag, comp, coef in ctx.robin:
            for gi, g, rows in ctx.tagged_groups(ctx.q1, tag):
                wmid = (0.5 * (ust_t[comp][gi][rows] + uen_t[comp][gi][rows])
                        - base_trace[comp][gi][rows])
                vals = factor * coef * wmid * zh_t[comp][gi][rows]
                if localized:
                    sub = {"cells": g["cells"][rows], "ref": g["ref"],
                           "wds": g["wds"][rows]}
                    rows_out.append((sub, vals))
                else:
                    total += float(np.sum(g["wds"][rows] * vals))
        return rows_out if localized else total

    if cfg.variant == "split":
        # temporal: weight = reconstruction minus its end value
        wmv, wmg, wev = lin_terms(cur[0], cur[1])
        eta = 0.0
        dsum = density_sum(lambda x: [
            (1.0 - x) * (start[0][c] - cur[0][c])
            + x * (end[0][c] - cur[0][c]) for c in range(ncomp)])
        if dsum is not None:
            eta += float(np.sum(ctx.jxw * dsum))
        eta += goal_boundary_sum(
            lambda x, c, gi, rows: (1.0 - x) * (
                ust_t[c][gi][rows] - ucur_t[c][gi][rows])
            + x * (uen_t[c][gi][rows] - ucur_t[c][gi][rows]),
            localized=False)
        eta -= k * _volume_pairing(ctx, wmg, zhg)
        eta -= k * robin_lin(ucur_t, 1.0, localized=False)
        if omd is not None:
            omw = sum(omd[c] * wmv[c] for c in range(ncomp))
            eta += k * float(np.sum(ctx.jxw * omw * (zhv[0] - zhv[1])))
        for c in range(ncomp):
            eta += float(np.sum(ctx.jxw * wev[c] * jz[c]))
        eta_k = eta

        # spatial: weight = enriched minus low-order forward, constant in t
        euv = [cur[0][c] - ukh_v[c] for c in range(ncomp)]
        eug = [cur[1][c] - ukh_g[c] for c in range(ncomp)]
        sc = _TentScatter(ctx.q1, ctx.n)
        field = np.zeros_like(ctx.jxw)
        dsum = density_sum(lambda x: euv)
        if dsum is not None:
            field += dsum
        gvec = np.zeros(ctx.jxw.shape + (2,))
        for c in range(ncomp):
            field -= k * ctx.diffusion[c] * np.sum(eug[c] * zhg[c], axis=-1)
            field += euv[c] * jz[c]
            gvec -= k * ctx.diffusion[c] * zhg[c] * euv[c][:, :, None]
        if omd is not None:
            omw = sum(omd[c] * euv[c] for c in range(ncomp))
            field += k * omw * (zhv[0] - zhv[1])
        sc.add_values(field)
        sc.add_gradients(gvec)
        terms = []
        if ctx.robin:
            for tag, comp, coef in ctx.robin:
                for gi, g, rows in ctx.tagged_groups(ctx.q1, tag):
                    eub = ucur_t[comp][gi][rows] - ukh_t[comp][gi][rows]
                    vals = -k * coef * eub * zh_t[comp][gi][rows]
                    sub = {"cells": g["cells"][rows], "ref": g["ref"],
                           "wds": g["wds"][rows]}
                    terms.append((sub, vals))
        terms += goal_boundary_sum(
            lambda x, c, gi, rows: ucur_t[c][gi][rows] - ukh_t[c][gi][rows],
            localized=True)
        eta_h = sc.vector(boundary_terms=terms)
        return eta_k, eta_h

    # joint: weight = reconstruction minus low-order forward
    wmv, wmg, wev = lin_terms(ukh_v, ukh_g)
    sc = _TentScatter(ctx.q1, ctx.n)
    field = np.zeros_like(ctx.jxw)
    dsum = density_sum(lambda x: [
        (1.0 - x) * (start[0][c] - ukh_v[c])
        + x * (end[0][c] - ukh_v[c]) for c in range(ncomp)])
    if dsum is not None:
        field += dsum
    gvec = np.zeros(ctx.jxw.shape + (2,))
    for c in range(ncomp):
        field -= k * ctx.diffusion[c] * np.sum(wmg[c] * zhg[c], axis=-1)
        field += wev[c] * jz[c]
        gvec -= k * ctx.diffusion[c] * zhg[c] * wmv[c][:, :, None]
    if omd is not None:
        omw = sum(omd[c] * wmv[c] for c in range(ncomp))
        field += k * omw * (zhv[0] - zhv[1])
    sc.add_values(field)
    sc.add_gradients(gvec)
    terms = robin_lin(ukh_t, -k, localized=True) if ctx.robin else []
    terms += goal_boundary_sum(
        lambda x, c, gi, rows: (1.0 - x) * (
            ust_t[c][gi][rows] - ukh_t[c][gi][rows])
        + x * (uen_t[c][gi][rows] - ukh_t[c][gi][rows]),
        localized=True)
    return None, sc.vector(boundary_terms=terms)


# ---------------------------------------------------------------------------
# public operations


def estimate_slab(problem, goal, primal, adjoint, m, cfg=None,
                  space_cache=None, transfers=None) -> IndicatorField:
    """Indicators of one slab with the natural piecewise-constant-time PU."""
    cfg = cfg or EstimatorConfig()
    if cfg.pu != "dg0":
        raise EstimatorError("estimate_slab serves the natural PU; use "
                             "estimate_slab_cg1pu for the cg1 variant")
    scache = space_cache or problem_space_cache(problem)
    transfers = transfers or TransferCache()
    ctx = _SlabContext(problem, goal, primal, adjoint, m, cfg,
                       scache, transfers)
    field = IndicatorField(slab=m, variant=cfg.variant, part=cfg.part,
                           orders=tuple(cfg.orders))
    if cfg.part in ("primal", "full"):
        field.eta_k, field.eta_h = _estimate_primal(ctx)
    if cfg.part in ("adjoint", "full"):
        field.eta_k_adj, field.eta_h_adj = _estimate_adjoint(ctx)
    return field


def estimate_slab_cg1pu(problem, goal, primal, adjoint, m, cfg=None,
                        space_cache=None, transfers=None) -> Cg1Indicators:
    """Split primal heat indicators with the bilinear-in-time PU.

    Each slab produces two indicator families, one per temporal tent
    (anchored at the slab start and end).  Time integration uses the
    three-point closed rule, exact for the cubic-in-time integrands.
    """
    cfg = cfg or EstimatorConfig(pu="cg1")
    if problem.kind != "heat":
        raise EstimatorError(
            "the cg1 partition of unity is implemented for the heat "
            "operator only")
    if (cfg.variant, cfg.part) != ("split", "primal"):
        raise EstimatorError(
            "the cg1 partition of unity supports only the split primal "
            "estimator")
    scache = space_cache or problem_space_cache(problem)
    transfers = transfers or TransferCache()
    work = dataclasses.replace(cfg, pu="dg0", f_rule="simpson")
    ctx = _SlabContext(problem, goal, primal, adjoint, m, work,
                       scache, transfers)
    k = ctx.k
    uv, ug = ctx.u_fields()
    upv = ctx.u_prev_values()
    zpv, zpg = ctx.z_start_fields()
    zcv, zcg = ctx.z_end_fields()
    zhv, zhg = ctx.z_low_fields()
    d = ctx.diffusion[0]

    dzv = zpv[0] - zcv[0]
    dzg = zpg[0] - zcg[0]
    grad_pair = d * float(np.sum(ctx.jxw * np.sum(ug[0] * dzg, axis=-1)))
    jump = _jump_pairing(ctx, [dzv])
    f_start = f_end = 0.0
    for x, wt, fv in ctx.source_terms():
        base = k * wt * (1.0 - x) * float(np.sum(ctx.jxw * fv * dzv))
        f_start += (1.0 - x) * base
        f_end += x * base
    eta_k_start = f_start - (k / 3.0) * grad_pair - jump
    eta_k_end = f_end - (k / 6.0) * grad_pair

    ezv = zcv[0] - zhv[0]
    ezg = zcg[0] - zhg[0]
    fb_start = fb_end = None
    for x, wt, fv in ctx.source_terms():
        term = k * wt * fv
        fb_start = (1.0 - x) * term if fb_start is None \
            else fb_start + (1.0 - x) * term
        fb_end = x * term if fb_end is None else fb_end + x * term
    grad_field = -0.5 * k * d * np.sum(ug[0] * ezg, axis=-1)
    gvec = -0.5 * k * d * ug[0] * ezv[:, :, None]

    sc = _TentScatter(ctx.q1, ctx.n)
    field = grad_field - (uv[0] - upv[0]) * ezv
    if fb_start is not None:
        field = field + fb_start * ezv
    sc.add_values(field)
    sc.add_gradients(gvec)
    eta_h_start = sc.vector()

    sc = _TentScatter(ctx.q1, ctx.n)
    field = grad_field.copy()
    if fb_end is not None:
        field = field + fb_end * ezv
    sc.add_values(field)
    sc.add_gradients(gvec)
    eta_h_end = sc.vector()

    return Cg1Indicators(slab=m, orders=tuple(cfg.orders),
                         eta_k_start=eta_k_start, eta_k_end=eta_k_end,
                         eta_h_start=eta_h_start, eta_h_end=eta_h_end)


def estimate_all(problem, goal, primal, adjoint, cfg=None,
                 space_cache=None, transfers=None) -> list:
    """Estimate every slab in order; returns the per-slab fields."""
    cfg = cfg or EstimatorConfig()
    scache = space_cache or problem_space_cache(problem)
    transfers = transfers or TransferCache()
    fn = estimate_slab_cg1pu if cfg.pu == "cg1" else estimate_slab
    return [fn(problem, goal, primal, adjoint, m, cfg,
               space_cache=scache, transfers=transfers)
            for m in range(primal.tmesh.num_intervals)]


def element_indicators(field, space) -> np.ndarray:
    """Per-active-cell indicators: sum of the cell's four vertex values.

    Vertices shared by several cells contribute to each of them, so the
    cell values over-count relative to the global sum; marking consumes
    them as-is.  ``space`` must be the slab's bilinear space.
    """
    if space.degree != 1:
        raise EstimatorError("element indicators need the bilinear space")
    vec = field.spatial_vector()
    if len(vec) != space.nnodes:
        raise EstimatorError("indicator vector does not match the mesh")
    return vec[space.cell_nodes].sum(axis=1)


def cg1_temporal_combination(fields: Sequence[Cg1Indicators]) -> np.ndarray:
    """Marking indicator per interval for the bilinear-in-time PU.

    The time tents anchored at an interval's two endpoints overlap the
    neighboring intervals, so each interval collects the end family of its
    predecessor, both own families, and the start family of its successor.
    """
    M = len(fields)
    out = np.zeros(M)
    for m in range(M):
        total = fields[m].eta_k_start + fields[m].eta_k_end
        if m > 0:
            total += fields[m - 1].eta_k_end
        if m + 1 < M:
            total += fields[m + 1].eta_k_start
        out[m] = total
    return out


def cg1_element_indicators(fields: Sequence[Cg1Indicators], m, primal,
                           space_cache=None, transfers=None) -> np.ndarray:
    """Per-cell marking indicators of slab ``m`` for the cg1 PU.

    Neighbor-slab families are interpolated onto slab ``m``'s mesh by
    evaluating their piecewise-bilinear vertex data at its vertices.
    """
    scache = space_cache or SpaceCache()
    transfers = transfers or TransferCache()
    q1 = scache.get(primal.spaces[m].mesh, 1)
    vec = fields[m].eta_h_start + fields[m].eta_h_end
    if m > 0:
        nb = scache.get(primal.spaces[m - 1].mesh, 1)
        vec = vec + _nodal_transfer(nb, fields[m - 1].eta_h_end, q1,
                                    transfers)
    if m + 1 < len(fields):
        nb = scache.get(primal.spaces[m + 1].mesh, 1)
        vec = vec + _nodal_transfer(nb, fields[m + 1].eta_h_start, q1,
                                    transfers)
    return vec[q1.cell_nodes].sum(axis=1)


def aggregate(fields: Sequence, j_value: float,
              reference: Optional[float] = None) -> EstimateReport:
    """Reduce per-slab fields, in slab order, to the global estimate."""
    if not fields:
        raise EstimatorError("no slab indicators to aggregate")
    eta_k = 0.0
    eta_h = 0.0
    denom = 0.0
    for f in fields:
        eta_k += f.temporal_value()
        eta_h += float(np.sum(f.spatial_vector()))
        denom += f.indicator_abs_sum()
    eta = eta_k + eta_h
    first = fields[0]
    report = EstimateReport(eta_k=eta_k, eta_h=eta_h, eta=eta,
                            j_value=float(j_value), variant=first.variant,
                            part=first.part, orders=tuple(first.orders))
    if reference is not None:
        error = float(reference) - float(j_value)
        report.error = error
        if error != 0.0:
            report.i_eff = eta / error
        if denom > 0.0:
            report.i_ind = abs(error) / denom
    return report
