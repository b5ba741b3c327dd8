"""Constrained-system condensation and sparse solve contracts."""

import numpy as np
import pytest
import scipy.sparse as sp

from goalfem.fespace import ConstraintSet
from goalfem.linalg import (
    Factorization,
    LinAlgError,
    LinearSystem,
    block_matrix,
    factor_solve,
    solve_cg,
)


def thomas(low, diag, up, rhs):
    """Independent tridiagonal oracle (Thomas algorithm)."""
    n = len(diag)
    c = np.zeros(n)
    d = np.zeros(n)
    c[0] = up[0] / diag[0]
    d[0] = rhs[0] / diag[0]
    for i in range(1, n):
        den = diag[i] - low[i - 1] * c[i - 1]
        c[i] = up[i] / den if i < n - 1 else 0.0
        d[i] = (rhs[i] - low[i - 1] * d[i - 1]) / den
    x = np.zeros(n)
    x[-1] = d[-1]
    for i in range(n - 2, -1, -1):
        x[i] = d[i] - c[i] * x[i + 1]
    return x


def test_factor_solve_identity():
    b = np.array([3.0, -1.0, 2.5])
    x = factor_solve(sp.identity(3, format="csr"), b)
    np.testing.assert_allclose(x, b, atol=0)


def test_factor_solve_1d_poisson_vs_thomas():
    # 4 interior nodes of -u'' = 1 on (0,1), h = 0.2
    h = 0.2
    n = 4
    main = np.full(n, 2.0 / h)
    off = np.full(n - 1, -1.0 / h)
    A = sp.diags([off, main, off], [-1, 0, 1], format="csr")
    b = np.full(n, h)
    x = factor_solve(A, b)
    x_oracle = thomas(off, main, off, b)
    np.testing.assert_allclose(x, x_oracle, atol=1e-12)


def test_factor_solve_random_spd_residual():
    rng = np.random.default_rng(17)
    B = rng.standard_normal((50, 50))
    A = sp.csr_matrix(B.T @ B + np.eye(50))
    b = rng.standard_normal(50)
    x = factor_solve(A, b)
    assert np.linalg.norm(A @ x - b) < 1e-12 * np.linalg.norm(b)


def test_factorization_reuse_and_errors():
    A = sp.csr_matrix(np.array([[2.0, 1.0], [1.0, 2.0]]))
    f = Factorization(A)
    for k in range(3):
        b = np.array([1.0, float(k)])
        np.testing.assert_allclose(A @ f.solve(b), b, atol=1e-13)
    with pytest.raises(LinAlgError, match="(row|column) 2"):
        factor_solve(
            sp.csr_matrix(np.array([[1.0, 0, 0], [0, 1.0, 0], [0, 0, 0.0]])),
            np.ones(3),
        )
    with pytest.raises(LinAlgError):
        factor_solve(sp.csr_matrix(np.array([[1.0, 1.0], [1.0, 1.0]])),
                     np.ones(2))


def test_solve_cg_matches_direct():
    rng = np.random.default_rng(23)
    B = rng.standard_normal((40, 40))
    A = sp.csr_matrix(B.T @ B + 40 * np.eye(40))
    b = rng.standard_normal(40)
    x = solve_cg(A, b, tol=1e-13)
    np.testing.assert_allclose(x, factor_solve(A, b), atol=1e-9)


def test_block_matrix_layout():
    I2 = sp.identity(2, format="csr")
    M = block_matrix([[I2, 2 * I2], [None, 3 * I2]])
    expect = np.array(
        [[1, 0, 2, 0], [0, 1, 0, 2], [0, 0, 3, 0], [0, 0, 0, 3.0]])
    np.testing.assert_allclose(M.toarray(), expect, atol=0)


# ---------------------------------------------------------------------------
# constrained systems


def hand_system():
    A = sp.csr_matrix(np.array([[2.0, 1.0, 0.0],
                                [1.0, 3.0, 1.0],
                                [0.0, 1.0, 4.0]]))
    b = np.array([1.0, 2.0, 3.0])
    return A, b


def test_condense_matches_hand_elimination():
    # constraint u2 = (u0 + u1)/2, eliminated by hand:
    #   A_red = [[3, 2.5], [2.5, 5]],  b_red = [2.5, 3.5]
    A, b = hand_system()
    cons = ConstraintSet(3, {2: [(0, 0.5), (1, 0.5)]}, [])
    sysc = LinearSystem(A, b, cons).condense()
    Ac = sysc.A.toarray()
    np.testing.assert_allclose(Ac[:2, :2], [[3.0, 2.5], [2.5, 5.0]], atol=1e-14)
    # constrained row/column are eliminated symmetrically, unit diagonal
    np.testing.assert_allclose(Ac[2], [0.0, 0.0, 1.0], atol=0)
    np.testing.assert_allclose(Ac[:, 2], [0.0, 0.0, 1.0], atol=0)
    np.testing.assert_allclose(sysc.b, [2.5, 3.5, 0.0], atol=1e-14)

    x = LinearSystem(A, b, cons).solve()
    np.testing.assert_allclose(x, [3.0 / 7.0, 17.0 / 35.0, 16.0 / 35.0],
                               atol=1e-13)
    # constraint holds exactly and the variational equations hold on the
    # unconstrained subspace (P^T residual = 0)
    assert abs(x[2] - 0.5 * (x[0] + x[1])) < 1e-14
    np.testing.assert_allclose(cons.P.T @ (A @ x - b), 0.0, atol=1e-13)


def test_condense_is_idempotent():
    A, b = hand_system()
    cons = ConstraintSet(3, {2: [(0, 0.5), (1, 0.5)]}, [])
    once = LinearSystem(A, b, cons).condense()
    twice = once.condense()
    assert twice is once
    np.testing.assert_allclose(twice.A.toarray(), once.A.toarray(), atol=0)
    np.testing.assert_allclose(twice.b, once.b, atol=0)


def test_dirichlet_value_passes_through():
    A, b = hand_system()
    cons = ConstraintSet(3, {}, [0])
    g = np.array([5.0, 0.0, 0.0])
    x = LinearSystem(A, b, cons, dirichlet_values=g).solve()
    assert x[0] == pytest.approx(5.0, abs=1e-14)
    np.testing.assert_allclose(x[1:], [-15.0 / 11.0, 12.0 / 11.0], atol=1e-13)
    np.testing.assert_allclose((A @ x - b)[1:], 0.0, atol=1e-13)


def test_dirichlet_propagates_through_hanging_masters():
    # u2 = (u0 + u1)/2 with u0 Dirichlet: after solve the slave sees the
    # boundary value through its master.
    A, b = hand_system()
    cons = ConstraintSet(3, {2: [(0, 0.5), (1, 0.5)]}, [0])
    g = np.array([4.0, 0.0, 0.0])
    x = LinearSystem(A, b, cons, dirichlet_values=g).solve()
    assert x[0] == pytest.approx(4.0, abs=1e-14)
    assert x[2] == pytest.approx(0.5 * (x[0] + x[1]), abs=1e-14)


def test_cyclic_constraints_fail_at_construction():
    from goalfem.mesh import MeshError

    with pytest.raises(MeshError):
        ConstraintSet(3, {0: [(1, 1.0)], 1: [(2, 1.0)], 2: [(0, 1.0)]}, [])
