"""Solve–estimate–mark–refine driver with space/time equilibration.

Each loop solves forward and backward, assembles the per-slab indicator
fields, reduces them to a global report, and refines: the temporal and
spatial error totals are compared through an equilibration factor, and each
branch that is within that factor of the other marks a fixed fraction of its
entities (time intervals, or cells per slab) ranked by indicator magnitude.
Spatial marks are promoted to whole sibling patches, temporal bisection
copies the slab mesh to both children, and the loop stops on its iteration
budget, a degree-of-freedom budget, or when nothing is marked.
"""

from __future__ import annotations

import dataclasses
import math
import time
from typing import Optional, Sequence

import numpy as np

from .estimator import (
    Cg1Indicators,
    EstimateReport,
    EstimatorConfig,
    EstimatorError,
    aggregate,
    cg1_element_indicators,
    cg1_temporal_combination,
    element_indicators,
    estimate_all,
)
from .fespace import SpaceCache, TransferCache
from .mesh import SpaceTimeMesh
from .solver import (
    SolverError,
    problem_space_cache,
    solve_adjoint,
    solve_primal,
)

__all__ = [
    "AdaptivityError",
    "AdaptiveLoopError",
    "MarkingConfig",
    "LoopRecord",
    "ranked_marks",
    "temporal_marking_indicators",
    "spatial_marking_indicators",
    "mark_and_refine",
    "adaptive_loop",
]


class AdaptivityError(ValueError):
    """Invalid marking configuration or inconsistent marking inputs."""


class AdaptiveLoopError(RuntimeError):
    """A loop iteration failed; ``history`` holds the completed records."""

    def __init__(self, message, history=()):
        super().__init__(message)
        self.history = list(history)


@dataclasses.dataclass(frozen=True)
class MarkingConfig:
    """Equilibration and fixed-rate marking parameters.

    A branch fires when its error total is within a factor ``c`` of the
    other's, so both fire unless one dominates by more than ``c``.  The
    firing branch marks the top ``ceil(fraction * n)`` entities by
    indicator magnitude; entities with exactly zero indicator are never
    marked.  ``dof_budget`` caps the forward space-time unknowns of the
    *next* mesh — refinement that would exceed it ends the loop.
    """

    c: float = 5.0
    theta_t: float = 0.95
    theta_x: float = 0.40
    max_loops: int = 5
    dof_budget: Optional[int] = None

    def __post_init__(self):
        if not self.c > 0.0:
            raise AdaptivityError("equilibration factor c must be positive")
        for name in ("theta_t", "theta_x"):
            frac = getattr(self, name)
            if not 0.0 <= frac <= 1.0:
                raise AdaptivityError(f"{name} must lie in [0, 1]")
        if self.max_loops < 1:
            raise AdaptivityError("max_loops must be at least 1")
        if self.dof_budget is not None and self.dof_budget < 1:
            raise AdaptivityError("dof_budget must be positive when given")


@dataclasses.dataclass
class LoopRecord:
    """One adaptive iteration: mesh sizes, goal value, and the estimate."""

    loop: int
    M: int
    N_max: int
    st_cells: int
    st_dofs_primal: int
    st_dofs_total: int
    report: EstimateReport
    wall_seconds: float

    @property
    def j_value(self):
        return self.report.j_value

    @property
    def error(self):
        return self.report.error

    @property
    def eta_k(self):
        return self.report.eta_k

    @property
    def eta_h(self):
        return self.report.eta_h

    @property
    def eta(self):
        return self.report.eta

    @property
    def i_eff(self):
        return self.report.i_eff

    @property
    def i_ind(self):
        return self.report.i_ind


def ranked_marks(values, fraction) -> np.ndarray:
    """Indices of the top ``ceil(fraction * n)`` entries by magnitude.

    Ties break by ascending index, entries of exactly zero magnitude are
    dropped, and the result is returned in ascending index order so the
    selection is independent of any upstream permutation.
    """
    mags = np.abs(np.asarray(values, dtype=float))
    n = mags.size
    count = min(n, math.ceil(float(fraction) * n))
    if count <= 0:
        return np.empty(0, dtype=int)
    order = np.lexsort((np.arange(n), -mags))
    picked = order[:count]
    return np.sort(picked[mags[picked] > 0.0])


def temporal_marking_indicators(fields: Sequence) -> np.ndarray:
    """Per-interval marking magnitudes for either partition of unity."""
    if fields and isinstance(fields[0], Cg1Indicators):
        return cg1_temporal_combination(fields)
    return np.asarray([f.temporal_value() for f in fields], dtype=float)


def spatial_marking_indicators(fields: Sequence, m, stmesh, space_cache,
                               transfers, primal=None) -> np.ndarray:
    """Per-cell marking magnitudes of slab ``m``."""
    if isinstance(fields[m], Cg1Indicators):
        if primal is None:
            raise AdaptivityError(
                "cg1 cell indicators need the forward solution")
        return cg1_element_indicators(fields, m, primal,
                                      space_cache=space_cache,
                                      transfers=transfers)
    q1 = space_cache.get(stmesh.slab_meshes[m], 1)
    return element_indicators(fields[m], q1)


def mark_and_refine(report: EstimateReport, fields: Sequence,
                    stmesh: SpaceTimeMesh, cfg: MarkingConfig = None, *,
                    primal=None, space_cache=None,
                    transfers=None) -> SpaceTimeMesh:
    """One marking step; returns ``stmesh`` itself when nothing is marked.

    Spatial refinement is applied before temporal bisection so cell marks
    and interval marks both refer to the incoming slab numbering; bisected
    intervals then hand the (possibly refined) slab mesh to both children.
    """
    cfg = cfg or MarkingConfig()
    if len(fields) != stmesh.num_slabs:
        raise AdaptivityError("one indicator field per slab is required")
    space_cache = space_cache or SpaceCache()
    transfers = transfers or TransferCache()
    abs_k = abs(report.eta_k)
    abs_h = abs(report.eta_h)
    fire_t = abs_k * cfg.c >= abs_h
    fire_x = abs_h * cfg.c >= abs_k

    out = stmesh
    if fire_x and cfg.theta_x > 0.0:
        marks = {}
        for m in range(stmesh.num_slabs):
            cells = spatial_marking_indicators(fields, m, stmesh,
                                               space_cache, transfers,
                                               primal=primal)
            picked = ranked_marks(cells, cfg.theta_x)
            if picked.size:
                promoted = stmesh.slab_meshes[m].patch_promoted_marks(picked)
                if promoted:
                    marks[m] = promoted
        if marks:
            out = out.refine_spatial(marks)
    if fire_t and cfg.theta_t > 0.0:
        intervals = ranked_marks(temporal_marking_indicators(fields),
                                 cfg.theta_t)
        if intervals.size:
            out = out.refine_temporal(intervals)
    return out


def _space_time_dofs(stmesh, degree, space_cache):
    return sum(space_cache.get(mesh, degree).n_dofs
               for mesh in stmesh.slab_meshes)


def adaptive_loop(problem, goal, stmesh: SpaceTimeMesh,
                  est_cfg: EstimatorConfig = None,
                  mark_cfg: MarkingConfig = None, *, newton=None,
                  quadrature="midpoint", reference=None, space_cache=None,
                  transfers=None) -> list:
    """Run solve → estimate → mark/refine until a budget stops it.

    Returns the list of :class:`LoopRecord`.  ``reference`` overrides the
    goal's own reference value for error/effectivity reporting.  A solver
    or estimator failure raises :class:`AdaptiveLoopError` carrying the
    records of the loops that completed.
    """
    est_cfg = est_cfg or EstimatorConfig()
    mark_cfg = mark_cfg or MarkingConfig()
    if est_cfg.weight_mode != "table":
        raise AdaptivityError(
            "the adaptive loop drives its own backward solves; external "
            "weights are not supported")
    scache = space_cache or problem_space_cache(problem)
    transfers = transfers or TransferCache()
    if reference is None:
        reference = goal.reference(problem)
    history: list = []
    srder, wdeg = est_cfg.orders
    loop = 0
    try:
        for loop in range(mark_cfg.max_loops):
            started = time.perf_counter()
            factors: dict = {}
            kwargs = {"quadrature": quadrature, "space_cache": scache,
                      "transfers": transfers, "factor_cache": factors}
            if newton is not None:
                primal = solve_primal(problem, stmesh, srder, newton=newton,
                                      **kwargs)
            else:
                primal = solve_primal(problem, stmesh, srder, **kwargs)
            adjoint = solve_adjoint(problem, goal, primal, wdeg, **kwargs)
            fields = estimate_all(problem, goal, primal, adjoint, est_cfg,
                                  space_cache=scache, transfers=transfers)
            report = aggregate(fields, goal.value(primal),
                               reference=reference)
            history.append(LoopRecord(
                loop=loop, M=stmesh.num_slabs,
                N_max=max(mesh.num_cells for mesh in stmesh.slab_meshes),
                st_cells=stmesh.total_cells(),
                st_dofs_primal=_space_time_dofs(stmesh, srder, scache),
                st_dofs_total=(_space_time_dofs(stmesh, srder, scache)
                               + _space_time_dofs(stmesh, wdeg, scache)),
                report=report,
                wall_seconds=time.perf_counter() - started))
            if loop == mark_cfg.max_loops - 1:
                break
            refined = mark_and_refine(report, fields, stmesh, mark_cfg,
                                      primal=primal, space_cache=scache,
                                      transfers=transfers)
            if refined is stmesh:
                break
            if (mark_cfg.dof_budget is not None
                    and _space_time_dofs(refined, srder, scache)
                    > mark_cfg.dof_budget):
                break
            stmesh = refined
    except (SolverError, EstimatorError) as exc:
        raise AdaptiveLoopError(
            f"adaptive loop stopped in iteration {loop}: {exc}",
            history=history) from exc
    return history
