"""Goal functionals.

Each goal supplies its value over a space-time solution, the derivative
integrand J'_u(u_kh)(psi) as volume/boundary densities (consumed by the
adjoint right-hand side and by the adjoint-part error indicators), the
terminal adjoint data z^M, and an optional reference value J(u).

A ``scale`` factor multiplies the functional; adjoint solutions and all
indicators scale with it while effectivity indices stay unchanged.
"""

from __future__ import annotations

import math

import numpy as np

from .fespace import TEMPORAL_RULES
from .problems import omega, omega_derivatives


class GoalError(RuntimeError):
    """Goal functional used outside its admissible state."""


def temporal_points(t0: float, t1: float, rule: str):
    """(time, weight) pairs integrating over [t0, t1] with the named rule."""
    pts, wts = TEMPORAL_RULES[rule]
    k = t1 - t0
    return [(t0 + xi * k, w * k) for xi, w in zip(pts, wts)]


class GoalFunctional:
    """Base contract; subclasses override value() and the densities."""

    ncomp = 1
    #: whether volume_density varies with t beyond the linearization state
    time_dependent = False

    def __init__(self, scale: float = 1.0):
        self.scale = float(scale)

    # -- lifecycle -----------------------------------------------------------

    def prepare(self, solution, problem=None):
        """Per-loop hook run before the adjoint solve (freezes normalization)."""
        return None

    def reference(self, problem=None):
        """J evaluated at the exact solution, when known."""
        return None

    def terminal_data(self, space) -> np.ndarray:
        return np.zeros(space.n_dofs)

    # -- derivative densities --------------------------------------------------

    def volume_density(self, space, pts, uvals, t):
        """Density g (..., ncomp) with J'(psi) = sum_q JxW_q g . psi(x_q).

        ``pts`` are physical points (..., 2) and ``uvals`` the linearization
        state's component values at those points; ``space`` supplies geometry
        (area, boundary lengths) only, so callers may evaluate the state on
        any space sharing the mesh.
        """
        return None

    def volume_weight(self, space, u_vec, t, n: int = 3):
        """volume_density at the n-rule quad points of ``space``'s own state."""
        pts, _ = space.quad(n)
        uvals = [space.eval_values(space.component(u_vec, c), n)
                 for c in range(space.ncomp)]
        return self.volume_density(space, pts, uvals, t)

    def boundary_weight(self, space):
        """Constant boundary densities {tag: per-component coefficients}."""
        return {}

    # -- assembled derivative ---------------------------------------------------

    def _load(self, space, u_vec, t) -> np.ndarray:
        out = np.zeros(space.n_dofs)
        g = self.volume_weight(space, u_vec, t)
        if g is not None:
            for comp in range(space.ncomp):
                sl = slice(comp * space.nnodes, (comp + 1) * space.nnodes)
                out[sl] += space.load_vector(g[:, :, comp], 3)
        for tag, dens in self.boundary_weight(space).items():
            bl = space.boundary_load_vector(tag)
            for comp, c in enumerate(dens):
                if c != 0.0:
                    sl = slice(comp * space.nnodes, (comp + 1) * space.nnodes)
                    out[sl] += c * bl
        return out

    def adjoint_rhs(self, space, u_vec, t0, t1, rule: str = "midpoint"):
        """int_{I_m} J'_u(u_kh)(phi) dt for every basis function phi."""
        out = np.zeros(space.n_dofs)
        for t, w in temporal_points(t0, t1, rule):
            out += w * self._load(space, u_vec, t)
        return out

    def derivative_value(self, solution, psis, rule: str = "midpoint") -> float:
        """J'_u(u_kh)(psi) for slab-wise constant directions psi."""
        total = 0.0
        for m in range(solution.tmesh.num_intervals):
            t0, t1 = solution.tmesh.interval(m)
            rhs = self.adjoint_rhs(
                solution.spaces[m], solution.vectors[m], t0, t1, rule)
            total += float(rhs @ psis[m])
        return total


# ---------------------------------------------------------------------------


class AverageGoal(GoalFunctional):
    """Space-time average  J = scale/(|Omega| T) int_0^T int_Omega u."""

    def __init__(self, time_final: float, scale: float = 1.0,
                 reference_value=None):
        super().__init__(scale)
        self.time_final = float(time_final)
        self.reference_value = reference_value

    def reference(self, problem=None):
        if self.reference_value is None:
            return None
        return self.scale * self.reference_value

    def _const(self, space) -> float:
        return self.scale / (space.mesh.total_area() * self.time_final)

    def value(self, solution, problem=None) -> float:
        total = 0.0
        for m, space in enumerate(solution.spaces):
            k = solution.tmesh.lengths[m]
            uq = space.eval_values(space.component(solution.vectors[m], 0), 3)
            _, jxw = space.quad(3)
            total += k * self._const(space) * float(np.sum(uq * jxw))
        return total

    def volume_density(self, space, pts, uvals, t):
        return np.full(pts.shape[:-1] + (1,), self._const(space))


class L2ErrorGoal(GoalFunctional):
    """Space-time L2 norm of the error against a known exact solution.

    J(u_kh) = scale * ||u - u_kh||_{L2(Omega x (0,T))}, evaluated with
    elevated quadrature (spatial 4x4 Gauss, temporal 2-point Gauss).  The
    derivative is the normalized pairing -(u - u_kh, psi)/||u - u_kh||;
    its norm is frozen by prepare() once per adaptive loop.
    """

    time_dependent = True

    def __init__(self, exact, scale: float = 1.0):
        super().__init__(scale)
        self.exact = exact
        self._frozen_norm = None

    def reference(self, problem=None):
        return 0.0

    def _norms(self, solution):
        err_sq = 0.0
        sol_sq = 0.0
        for m, space in enumerate(solution.spaces):
            t0, t1 = solution.tmesh.interval(m)
            pts, jxw = space.quad(4)
            uq = space.eval_values(space.component(solution.vectors[m], 0), 4)
            for t, w in temporal_points(t0, t1, "gauss2"):
                e = self.exact(pts[:, :, 0], pts[:, :, 1], t) - uq
                err_sq += w * float(np.sum(e * e * jxw))
                sol_sq += w * float(np.sum(uq * uq * jxw))
        return math.sqrt(err_sq), math.sqrt(sol_sq)

    def raw_norm(self, solution) -> float:
        return self._norms(solution)[0]

    def value(self, solution, problem=None) -> float:
        return self.scale * self.raw_norm(solution)

    def prepare(self, solution, problem=None):
        norm, sol_norm = self._norms(solution)
        if norm <= 1e-14 * max(sol_norm, 1.0):
            raise GoalError(
                "zero error norm: the L2-error derivative is undefined")
        self._frozen_norm = norm
        return norm

    def volume_density(self, space, pts, uvals, t):
        if self._frozen_norm is None:
            raise GoalError(
                "prepare() must freeze the error norm before derivatives")
        e = self.exact(pts[..., 0], pts[..., 1], t) - uvals[0]
        return (-self.scale / self._frozen_norm) * e[..., None]


class ReactionRateGoal(GoalFunctional):
    """Average reaction rate  J = scale/(T |Omega|) int int omega(theta, Y)."""

    ncomp = 2

    def __init__(self, params, time_final: float, scale: float = 1.0,
                 reference_value=None):
        super().__init__(scale)
        self.params = params
        self.time_final = float(time_final)
        self.reference_value = reference_value

    def reference(self, problem=None):
        if self.reference_value is None:
            return None
        return self.scale * self.reference_value

    def _const(self, space) -> float:
        return self.scale / (space.mesh.total_area() * self.time_final)

    def value(self, solution, problem=None) -> float:
        total = 0.0
        for m, space in enumerate(solution.spaces):
            k = solution.tmesh.lengths[m]
            th = space.eval_values(space.component(solution.vectors[m], 0), 3)
            Yv = space.eval_values(space.component(solution.vectors[m], 1), 3)
            _, jxw = space.quad(3)
            total += k * self._const(space) * float(
                np.sum(omega(th, Yv, self.params) * jxw))
        return total

    def volume_density(self, space, pts, uvals, t):
        dth, dY = omega_derivatives(uvals[0], uvals[1], self.params)
        c = self._const(space)
        return np.stack([c * dth, c * dY], axis=-1)


class RodSpeciesGoal(GoalFunctional):
    """Average species concentration on tagged boundary faces.

    J = scale/(T |Gamma|) int_0^T int_Gamma Y ds dt over the faces carrying
    ``tag`` (the cooled-rod walls in the channel problem).
    """

    ncomp = 2

    def __init__(self, time_final: float, scale: float = 1.0,
                 reference_value=None, tag: str = "rod"):
        super().__init__(scale)
        self.time_final = float(time_final)
        self.reference_value = reference_value
        self.tag = tag

    def reference(self, problem=None):
        if self.reference_value is None:
            return None
        return self.scale * self.reference_value

    def _const(self, space) -> float:
        length = space.boundary_length((self.tag,))
        if length == 0.0:
            raise GoalError(f"no boundary faces tagged {self.tag!r}")
        return self.scale / (length * self.time_final)

    def value(self, solution, problem=None) -> float:
        total = 0.0
        for m, space in enumerate(solution.spaces):
            k = solution.tmesh.lengths[m]
            bl = space.boundary_load_vector((self.tag,))
            Yv = space.component(solution.vectors[m], 1)
            total += k * self._const(space) * float(bl @ Yv)
        return total

    def boundary_weight(self, space):
        return {self.tag: (0.0, self._const(space))}
