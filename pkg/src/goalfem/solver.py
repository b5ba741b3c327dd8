"""Forward dG(0) time stepping and backward adjoint marching.

The primal problem is solved slab by slab: one linear solve per interval
for the heat equation, a damped Newton iteration for the combustion
system.  The adjoint problem marches backwards through the transposed
slab systems, linearized at the stored primal trajectory.  All slab
vectors are retained in memory.

Slab system (per interval I_m of length k_m):

    M (u_m - P_m u_{m-1}) + k_m * a-terms(u_m) = int_{I_m} (f, phi) dt

where ``P_m`` evaluates the previous slab's function at the current
slab's quadrature points (cross-mesh point evaluation) and the source
integral uses a configurable temporal rule.
"""

from __future__ import annotations

import dataclasses
from typing import List, Optional

import numpy as np

from .fespace import FESpace, SpaceCache, TransferCache
from .goals import temporal_points
from .linalg import Factorization, LinearSystem, block_matrix
from .problems import omega, omega_derivatives


class SolverError(RuntimeError):
    """Slab solve failed; carries the slab index and last residual norm."""

    def __init__(self, message, slab=None, residual=None):
        super().__init__(message)
        self.slab = slab
        self.residual = residual


@dataclasses.dataclass
class NewtonConfig:
    """Damped-Newton controls for the nonlinear slab systems."""

    tol: float = 1e-8          # absolute tolerance on the free-dof residual norm
    max_iterations: int = 25
    rho_skip: float = 0.1      # keep the old Jacobian while reduction < this
    alpha_min: float = 2.0**-10
    slope: float = 1e-4        # sufficient-decrease constant of the line search

    def __post_init__(self):
        if self.tol <= 0.0:
            raise ValueError("Newton tolerance must be positive")


@dataclasses.dataclass
class NewtonRecord:
    """Convergence history of one slab's Newton iteration."""

    slab: int
    residuals: List[float]
    alphas: List[float]
    reassembled: List[bool]

    @property
    def iterations(self) -> int:
        return len(self.alphas)


@dataclasses.dataclass
class SpaceTimeSolution:
    """Per-slab coefficient vectors of a forward or adjoint solve."""

    tmesh: object
    spaces: List[FESpace]
    vectors: List[np.ndarray]
    order: int
    initial_vector: Optional[np.ndarray] = None
    terminal_vector: Optional[np.ndarray] = None
    newton_history: Optional[List[NewtonRecord]] = None

    @property
    def num_slabs(self) -> int:
        return len(self.spaces)


# ---------------------------------------------------------------------------
# assembly helpers


def problem_space_cache(problem) -> SpaceCache:
    return SpaceCache(ncomp=problem.ncomp, boundary_tag=problem.boundary_tag,
                      dirichlet=problem.dirichlet)


def _k_key(k: float) -> float:
    """Cache key for a step size, merging last-ulp noise between intervals
    of a nominally uniform grid while keeping distinct steps distinct."""
    return float(np.format_float_scientific(k, precision=13))


def _component_operators(problem, space: FESpace, k: float, cache=None):
    """Per-component linear operator  M + k (d_c K + R_c)."""
    key = ("ops", id(space), _k_key(k))
    if cache is not None and key in cache:
        return cache[key]
    M = space.mass_matrix()
    K = space.stiffness_matrix()
    ops = []
    for comp in range(problem.ncomp):
        A = M + k * problem.diffusion[comp] * K
        for tag, pairs in problem.robin.items():
            for (rc, coeff) in pairs:
                if rc == comp and coeff != 0.0:
                    A = A + k * coeff * space.boundary_mass_matrix((tag,))
        ops.append(A.tocsr())
    if cache is not None:
        cache[key] = ops
    return ops


def _per_component(space: FESpace, mat_action, vec: np.ndarray) -> np.ndarray:
    out = np.empty(space.n_dofs)
    nn = space.nnodes
    for c in range(space.ncomp):
        out[c * nn:(c + 1) * nn] = mat_action(vec[c * nn:(c + 1) * nn])
    return out


def _jump_load(space_to: FESpace, space_from: FESpace, coeffs: np.ndarray,
               transfers: TransferCache, n: Optional[int] = None) -> np.ndarray:
    """(v_prev, phi)_m assembled with slab-m quadrature of order n."""
    if space_to is space_from:
        M = space_to.mass_matrix()
        return _per_component(space_to, lambda v: M @ v, coeffs)
    if n is None:
        n = max(space_to.degree, space_from.degree) + 1
    pts, jxw = space_to.quad(n)
    E = transfers.matrix(space_from, pts.reshape(-1, 2),
                         token=("quad", id(space_to), n))
    out = np.empty(space_to.n_dofs)
    nn_to, nn_from = space_to.nnodes, space_from.nnodes
    for c in range(space_to.ncomp):
        vals = (E @ coeffs[c * nn_from:(c + 1) * nn_from]).reshape(jxw.shape)
        out[c * nn_to:(c + 1) * nn_to] = space_to.load_vector(vals, n)
    return out


def _jump_load_transposed(space_next: FESpace, space_m: FESpace,
                          z_next: np.ndarray, transfers: TransferCache,
                          n: Optional[int] = None) -> np.ndarray:
    """Transpose action of the slab-(m+1) jump: pair slab-m basis with z_{m+1}."""
    if space_next is space_m:
        M = space_m.mass_matrix()
        return _per_component(space_m, lambda v: M @ v, z_next)
    if n is None:
        n = max(space_next.degree, space_m.degree) + 1
    pts, jxw = space_next.quad(n)
    E = transfers.matrix(space_m, pts.reshape(-1, 2),
                         token=("quad", id(space_next), n))
    out = np.empty(space_m.n_dofs)
    nn_m, nn_next = space_m.nnodes, space_next.nnodes
    for c in range(space_m.ncomp):
        zv = space_next.eval_values(z_next[c * nn_next:(c + 1) * nn_next], n)
        out[c * nn_m:(c + 1) * nn_m] = E.T @ (zv * jxw).ravel()
    return out


def _source_load(problem, space: FESpace, t0: float, t1: float,
                 rule: str) -> np.ndarray:
    """int_{I_m} (f, phi) dt with the configured temporal rule."""
    out = np.zeros(space.n_dofs)
    if problem.kind != "heat":
        return out        # the combustion system has no external source
    n = space.degree + 1
    pts, _ = space.quad(n)
    for t, w in temporal_points(t0, t1, rule):
        fq = problem.f(pts[:, :, 0], pts[:, :, 1], t)
        out += w * space.load_vector(fq, n)
    return out


def _combustion_state(problem, space: FESpace, u: np.ndarray):
    nn = space.nnodes
    n = space.degree + 1
    th = space.eval_values(u[:nn], n)
    Yv = space.eval_values(u[nn:], n)
    return th, Yv


def _combustion_residual(problem, space: FESpace, ops, u: np.ndarray,
                         jump: np.ndarray, k: float) -> np.ndarray:
    nn = space.nnodes
    th, Yv = _combustion_state(problem, space, u)
    Lw = space.load_vector(omega(th, Yv, problem.params), space.degree + 1)
    r = np.empty(space.n_dofs)
    r[:nn] = ops[0] @ u[:nn] - k * Lw - jump[:nn]
    r[nn:] = ops[1] @ u[nn:] + k * Lw - jump[nn:]
    return r


def _combustion_jacobian(problem, space: FESpace, ops, u: np.ndarray,
                         k: float):
    th, Yv = _combustion_state(problem, space, u)
    dth, dY = omega_derivatives(th, Yv, problem.params)
    n = space.degree + 1
    Wth = space.weighted_mass_matrix(dth, n)
    WY = space.weighted_mass_matrix(dY, n)
    return block_matrix([
        [ops[0] - k * Wth, -k * WY],
        [k * Wth, ops[1] + k * WY],
    ])


def _embed_free(cons, reduced: np.ndarray, n: int) -> np.ndarray:
    full = np.zeros(n)
    full[cons.free_dofs] = reduced
    return full


# ---------------------------------------------------------------------------
# primal solve


def solve_primal(problem, stmesh, order: int, newton: Optional[NewtonConfig] = None,
                 quadrature: str = "midpoint", space_cache: Optional[SpaceCache] = None,
                 transfers: Optional[TransferCache] = None,
                 factor_cache: Optional[dict] = None) -> SpaceTimeSolution:
    """March the dG(0) slab systems forward through all intervals."""
    newton = newton or NewtonConfig()
    space_cache = space_cache or problem_space_cache(problem)
    transfers = transfers or TransferCache()
    factor_cache = {} if factor_cache is None else factor_cache

    tmesh = stmesh.tmesh
    spaces = [space_cache.get(mesh, order) for mesh in stmesh.slab_meshes]

    g0 = spaces[0].dirichlet_value_vector(problem.dirichlet_value,
                                          tmesh.knots[0])
    u0 = spaces[0].constraints().distribute(
        spaces[0].interpolate(problem.initial), g0)

    vectors: List[np.ndarray] = []
    history: List[NewtonRecord] = []
    u_prev, space_prev = u0, spaces[0]
    for m in range(tmesh.num_intervals):
        space = spaces[m]
        t0, t1 = tmesh.interval(m)
        k = t1 - t0
        jump = _jump_load(space, space_prev, u_prev, transfers)
        b = _source_load(problem, space, t0, t1, quadrature) + jump
        g = space.dirichlet_value_vector(problem.dirichlet_value, t1)
        if problem.kind == "heat":
            A = _component_operators(problem, space, k, factor_cache)[0]
            u = _solve_linear_slab(space, A, b, g, k, factor_cache)
        else:
            u, record = _solve_newton_slab(problem, space, u_prev, space_prev,
                                           jump, k, g, newton, m, transfers,
                                           factor_cache)
            history.append(record)
        vectors.append(u)
        u_prev, space_prev = u, space

    return SpaceTimeSolution(tmesh=tmesh, spaces=spaces, vectors=vectors,
                             order=order, initial_vector=u0,
                             newton_history=history or None)


def _solve_linear_slab(space: FESpace, A, b, g, k, factor_cache) -> np.ndarray:
    cons = space.constraints()
    key = (id(space), _k_key(k))
    fact = factor_cache.get(key)
    g_full = cons.lift(g)
    if fact is None:
        system = LinearSystem(A, b, cons, dirichlet_values=g).condense()
        fact = Factorization(system.A)
        factor_cache[key] = fact
        b_c = system.b
    else:
        b_c = _embed_free(cons, cons.P.T @ (b - A @ g_full), space.n_dofs)
    return cons.distribute(fact.solve(b_c), g_full)


def _solve_newton_slab(problem, space: FESpace, u_prev, space_prev, jump,
                       k, g, cfg: NewtonConfig, m: int,
                       transfers: TransferCache, factor_cache=None):
    cons = space.constraints()
    ops = _component_operators(problem, space, k, factor_cache)

    if space_prev is space:
        guess = u_prev.copy()
    else:
        E = transfers.matrix(space_prev, space.node_xy,
                             token=("nodes", id(space)))
        guess = np.concatenate([
            E @ space_prev.component(u_prev, c) for c in range(space.ncomp)])
    u = cons.distribute(guess, g)

    def residual_norm(vec):
        r = _combustion_residual(problem, space, ops, vec, jump, k)
        return r, float(np.linalg.norm(cons.P.T @ r))

    r, rn = residual_norm(u)
    tol = cfg.tol
    residuals, alphas, reassembled = [rn], [], []
    fact = None
    last_factor = None

    for _ in range(cfg.max_iterations):
        if rn <= tol:
            return u, NewtonRecord(m, residuals, alphas, reassembled)
        refresh = fact is None or last_factor is None \
            or last_factor >= cfg.rho_skip
        if refresh:
            J = _combustion_jacobian(problem, space, ops, u, k)
            fact = Factorization(LinearSystem(J, np.zeros_like(r),
                                              cons).condense().A)
        reassembled.append(refresh)
        delta = cons.distribute(
            fact.solve(_embed_free(cons, cons.P.T @ (-r), space.n_dofs)),
            np.zeros(space.n_dofs))
        alpha = 1.0
        while True:
            u_trial = u + alpha * delta
            r_trial, rn_trial = residual_norm(u_trial)
            if rn_trial < (1.0 - cfg.slope * alpha) * rn:
                break
            alpha *= 0.5
            if alpha < cfg.alpha_min:
                raise SolverError(
                    f"line search stalled on slab {m + 1} "
                    f"(residual {rn:.3e})", slab=m, residual=rn)
        last_factor = rn_trial / rn
        u, r, rn = u_trial, r_trial, rn_trial
        residuals.append(rn)
        alphas.append(alpha)

    raise SolverError(
        f"Newton did not converge on slab {m + 1} within "
        f"{cfg.max_iterations} iterations (residual {rn:.3e})",
        slab=m, residual=rn)


# ---------------------------------------------------------------------------
# adjoint solve


def _adjoint_matrix(problem, zspace: FESpace, uspace: FESpace,
                    u_vec: np.ndarray, k: float, cache=None):
    ops = _component_operators(problem, zspace, k, cache)
    if problem.kind == "heat":
        return ops[0]
    n = zspace.degree + 1
    th = uspace.eval_values(uspace.component(u_vec, 0), n)
    Yv = uspace.eval_values(uspace.component(u_vec, 1), n)
    dth, dY = omega_derivatives(th, Yv, problem.params)
    Wth = zspace.weighted_mass_matrix(dth, n)
    WY = zspace.weighted_mass_matrix(dY, n)
    # exact transpose of the primal Jacobian's block structure
    return block_matrix([
        [ops[0] - k * Wth, k * Wth],
        [-k * WY, ops[1] + k * WY],
    ])


def _goal_rhs(goal, zspace: FESpace, uspace: FESpace, u_vec: np.ndarray,
              t0: float, t1: float, rule: str) -> np.ndarray:
    """int_{I_m} J'_u(u_kh)(phi) dt on the adjoint test space."""
    if zspace.mesh is not uspace.mesh:
        raise SolverError("adjoint slab mesh must match the primal slab mesh")
    out = np.zeros(zspace.n_dofs)
    k = t1 - t0
    pts, _ = zspace.quad(3)
    uvals = [uspace.eval_values(uspace.component(u_vec, c), 3)
             for c in range(uspace.ncomp)]
    nn = zspace.nnodes
    for t, w in temporal_points(t0, t1, rule):
        dens = goal.volume_density(zspace, pts, uvals, t)
        if dens is None:
            break
        for c in range(zspace.ncomp):
            out[c * nn:(c + 1) * nn] += w * zspace.load_vector(dens[..., c], 3)
    for tag, coeffs in goal.boundary_weight(zspace).items():
        bl = zspace.boundary_load_vector((tag,))
        for c, coeff in enumerate(coeffs):
            if coeff != 0.0:
                out[c * nn:(c + 1) * nn] += k * coeff * bl
    return out


def solve_adjoint(problem, goal, primal: SpaceTimeSolution, order: int,
                  quadrature: str = "midpoint",
                  space_cache: Optional[SpaceCache] = None,
                  transfers: Optional[TransferCache] = None,
                  factor_cache: Optional[dict] = None) -> SpaceTimeSolution:
    """March the transposed slab systems backwards from the terminal data."""
    space_cache = space_cache or problem_space_cache(problem)
    transfers = transfers or TransferCache()
    factor_cache = {} if factor_cache is None else factor_cache

    tmesh = primal.tmesh
    M = tmesh.num_intervals
    zspaces = [space_cache.get(primal.spaces[m].mesh, order)
               for m in range(M)]

    terminal = goal.terminal_data(zspaces[-1])
    vectors: List[Optional[np.ndarray]] = [None] * M
    z_next = terminal
    for m in range(M - 1, -1, -1):
        zsp, usp = zspaces[m], primal.spaces[m]
        t0, t1 = tmesh.interval(m)
        k = t1 - t0
        if m == M - 1:
            couple = _jump_load(zsp, zsp, z_next, transfers)
        else:
            couple = _jump_load_transposed(zspaces[m + 1], zsp, z_next,
                                           transfers)
        b = _goal_rhs(goal, zsp, usp, primal.vectors[m], t0, t1, quadrature) \
            + couple
        cons = zsp.constraints()
        if problem.kind == "heat":
            # self-adjoint slab operator: shares the primal factorization
            key = (id(zsp), _k_key(k))
            fact = factor_cache.get(key)
            if fact is None:
                A = _component_operators(problem, zsp, k, factor_cache)[0]
                fact = Factorization(LinearSystem(A, b, cons).condense().A)
                factor_cache[key] = fact
        else:
            A = _adjoint_matrix(problem, zsp, usp, primal.vectors[m], k,
                                factor_cache)
            fact = Factorization(LinearSystem(A, b, cons).condense().A)
        b_c = _embed_free(cons, cons.P.T @ b, zsp.n_dofs)
        z = cons.distribute(fact.solve(b_c), np.zeros(zsp.n_dofs))
        vectors[m] = z
        z_next = z

    return SpaceTimeSolution(tmesh=tmesh, spaces=zspaces, vectors=vectors,
                             order=order, terminal_vector=terminal)


# ---------------------------------------------------------------------------
# residual evaluation (testing and diagnostics)


def primal_residual(problem, solution: SpaceTimeSolution, m: int,
                    quadrature: str = "midpoint",
                    transfers: Optional[TransferCache] = None) -> np.ndarray:
    """Full-size residual of slab m at the stored solution."""
    transfers = transfers or TransferCache()
    space = solution.spaces[m]
    t0, t1 = solution.tmesh.interval(m)
    k = t1 - t0
    if m == 0:
        prev_space, prev = solution.spaces[0], solution.initial_vector
    else:
        prev_space, prev = solution.spaces[m - 1], solution.vectors[m - 1]
    jump = _jump_load(space, prev_space, prev, transfers)
    ops = _component_operators(problem, space, k)
    if problem.kind == "heat":
        F = _source_load(problem, space, t0, t1, quadrature)
        return ops[0] @ solution.vectors[m] - F - jump
    return _combustion_residual(problem, space, ops, solution.vectors[m],
                                jump, k)


def adjoint_defect(problem, goal, primal: SpaceTimeSolution,
                   adjoint: SpaceTimeSolution, m: int,
                   quadrature: str = "midpoint",
                   transfers: Optional[TransferCache] = None) -> np.ndarray:
    """Full-size defect of the adjoint recursion on slab m (zero if solved)."""
    transfers = transfers or TransferCache()
    zsp, usp = adjoint.spaces[m], primal.spaces[m]
    t0, t1 = primal.tmesh.interval(m)
    k = t1 - t0
    M = primal.tmesh.num_intervals
    if m == M - 1:
        couple = _jump_load(zsp, zsp, adjoint.terminal_vector, transfers)
    else:
        couple = _jump_load_transposed(adjoint.spaces[m + 1], zsp,
                                       adjoint.vectors[m + 1], transfers)
    A = _adjoint_matrix(problem, zsp, usp, primal.vectors[m], k)
    rhs = _goal_rhs(goal, zsp, usp, primal.vectors[m], t0, t1, quadrature)
    return A @ adjoint.vectors[m] - rhs - couple
