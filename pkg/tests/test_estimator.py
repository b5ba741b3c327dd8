"""Indicator assembly invariants: localization, identities, orthogonality."""

import dataclasses

import numpy as np
import pytest

from goalfem.estimator import (
    Cg1Indicators,
    EstimateReport,
    EstimatorConfig,
    EstimatorError,
    IndicatorField,
    aggregate,
    cg1_element_indicators,
    cg1_temporal_combination,
    element_indicators,
    estimate_all,
    estimate_slab,
    estimate_slab_cg1pu,
)
from goalfem.fespace import SpaceCache, TransferCache
from goalfem.goals import AverageGoal, ReactionRateGoal
from goalfem.mesh import SpaceTimeMesh, SpatialMesh
from goalfem.problems import (
    CombustionProblem,
    HeatProblem,
    combustion_channel_problem,
    heat_polynomial_case,
)
from goalfem.solver import (
    NewtonConfig,
    SpaceTimeSolution,
    problem_space_cache,
    solve_adjoint,
    solve_primal,
)

EXACT_AVERAGE = -1.0 / 288.0


def small_combustion():
    """Channel flame on a 224-cell mesh over a short burn window."""
    return CombustionProblem(time_final=2.0, coarse_dims=(16, 4))


def promoted(st, marks):
    """Patch-promote raw per-slab cell marks, as the adaptive driver does."""
    return {m: st.slab_meshes[m].patch_promoted_marks(raw)
            for m, raw in marks.items()}


def solve_pair(problem, goal, stmesh, orders, quadrature="midpoint",
               newton=None):
    sc = problem_space_cache(problem)
    tc = TransferCache()
    kwargs = {"space_cache": sc, "transfers": tc, "quadrature": quadrature}
    if newton is not None:
        primal = solve_primal(problem, stmesh, orders[0], newton=newton,
                              **kwargs)
    else:
        primal = solve_primal(problem, stmesh, orders[0], **kwargs)
    adjoint = solve_adjoint(problem, goal, primal, orders[1], **kwargs)
    return primal, adjoint, sc, tc


def constant_in_time_weight(primal, seed):
    """A discrete spatial test vector, replicated across all slabs."""
    space = primal.spaces[0]
    rng = np.random.default_rng(seed)
    cons = space.constraints()
    free = rng.uniform(-1.0, 1.0, size=cons.free_dofs.size)
    phi = cons.expand(free)
    return SpaceTimeSolution(
        tmesh=primal.tmesh, spaces=list(primal.spaces),
        vectors=[phi.copy() for _ in range(primal.num_slabs)], order=1,
        initial_vector=phi.copy())


# ---------------------------------------------------------------------------
# split = joint identity


@pytest.mark.parametrize("orders", [(1, 1), (1, 2), (2, 2)])
@pytest.mark.parametrize("part", ["primal", "adjoint"])
def test_split_equals_joint_heat_uniform(orders, part):
    case = heat_polynomial_case()
    goal = AverageGoal(case.time_final, reference_value=EXACT_AVERAGE)
    st = SpaceTimeMesh.uniform(case.initial_mesh(0), 0.0, case.time_final, 7)
    primal, adjoint, sc, tc = solve_pair(case, goal, st, orders)
    for m in range(st.num_slabs):
        sums = {}
        for variant in ("split", "joint"):
            cfg = EstimatorConfig(variant=variant, part=part, orders=orders)
            field = estimate_slab(case, goal, primal, adjoint, m, cfg,
                                  space_cache=sc, transfers=tc)
            sums[variant] = field.slab_sum()
        assert abs(sums["split"] - sums["joint"]) <= 1e-12 * max(
            1.0, abs(sums["split"]))


def test_split_equals_joint_heat_mixed_meshes():
    case = heat_polynomial_case()
    goal = AverageGoal(case.time_final, reference_value=EXACT_AVERAGE)
    st = SpaceTimeMesh.uniform(case.initial_mesh(0), 0.0, case.time_final, 5)
    st = st.refine_temporal([1])
    st = st.refine_spatial(promoted(st, {2: [0, 1, 2], 4: [5], 5: [3, 9]}))
    primal, adjoint, sc, tc = solve_pair(case, goal, st, (1, 2))
    for m in range(st.num_slabs):
        vals = {}
        for variant in ("split", "joint"):
            cfg = EstimatorConfig(variant=variant, part="primal",
                                  orders=(1, 2))
            field = estimate_slab(case, goal, primal, adjoint, m, cfg,
                                  space_cache=sc, transfers=tc)
            vals[variant] = field.slab_sum()
        assert abs(vals["split"] - vals["joint"]) <= 1e-12 * max(
            1.0, abs(vals["split"]))


def test_split_equals_joint_combustion():
    prob = small_combustion()
    goal = ReactionRateGoal(prob.params, prob.time_final)
    st = SpaceTimeMesh.uniform(prob.initial_mesh(0), 0.0, prob.time_final, 8)
    st = st.refine_spatial(promoted(st, {2: [10, 11], 3: [40]}))
    primal, adjoint, sc, tc = solve_pair(prob, goal, st, (1, 1))
    for m in range(st.num_slabs):
        vals = {}
        for variant in ("split", "joint"):
            for part in ("primal", "adjoint"):
                cfg = EstimatorConfig(variant=variant, part=part,
                                      orders=(1, 1))
                field = estimate_slab(prob, goal, primal, adjoint, m, cfg,
                                      space_cache=sc, transfers=tc)
                vals[(variant, part)] = field.slab_sum()
        for part in ("primal", "adjoint"):
            s, j = vals[("split", part)], vals[("joint", part)]
            assert abs(s - j) <= 1e-12 * max(1.0, abs(s))


# ---------------------------------------------------------------------------
# exact discrete solutions annihilate the primal residual


def test_exact_linear_solution_gives_zero_primal_estimate():
    prob = HeatProblem(
        name="linear-in-x", time_final=1.0,
        f=lambda x, y, t: np.zeros_like(np.asarray(x, dtype=float)),
        initial=lambda x, y: np.asarray(x, dtype=float),
        exact=lambda x, y, t: np.asarray(x, dtype=float),
        inhomogeneous=True)
    goal = AverageGoal(prob.time_final)
    st = SpaceTimeMesh.uniform(prob.initial_mesh(0), 0.0, prob.time_final, 4)
    primal, adjoint, sc, tc = solve_pair(prob, goal, st, (1, 2))
    cfg = EstimatorConfig(variant="split", part="primal", orders=(1, 2))
    fields = estimate_all(prob, goal, primal, adjoint, cfg,
                          space_cache=sc, transfers=tc)
    for field in fields:
        assert abs(field.slab_sum()) < 1e-13


# ---------------------------------------------------------------------------
# localized orthogonality: discrete weights annihilate the slab residual


def test_discrete_weight_annihilates_heat_residual():
    case = heat_polynomial_case()
    goal = AverageGoal(case.time_final, reference_value=EXACT_AVERAGE)
    st = SpaceTimeMesh.uniform(case.initial_mesh(1), 0.0, case.time_final, 6)
    primal, _, sc, tc = solve_pair(case, goal, st, (1, 1))
    phi = constant_in_time_weight(primal, seed=7)
    cfg = EstimatorConfig(variant="split", part="primal", orders=(1, 1),
                          f_rule="midpoint", weight_mode="external")
    fields = estimate_all(case, goal, primal, phi, cfg,
                          space_cache=sc, transfers=tc)
    for field in fields:
        assert abs(field.slab_sum()) < 1e-10


def test_discrete_weight_annihilates_combustion_residual():
    prob = small_combustion()
    goal = ReactionRateGoal(prob.params, prob.time_final)
    st = SpaceTimeMesh.uniform(prob.initial_mesh(0), 0.0, prob.time_final, 8)
    newton = NewtonConfig(tol=1e-12)
    primal, _, sc, tc = solve_pair(prob, goal, st, (1, 1), newton=newton)
    phi = constant_in_time_weight(primal, seed=3)
    cfg = EstimatorConfig(variant="split", part="primal", orders=(1, 1),
                          quad_n=2, weight_mode="external")
    fields = estimate_all(prob, goal, primal, phi, cfg,
                          space_cache=sc, transfers=tc)
    for field in fields:
        assert abs(field.slab_sum()) < 5e-10


# ---------------------------------------------------------------------------
# frozen effectivity spot checks (full sweeps live in the acceptance suite)


def test_polynomial_average_effectivity_mixed_order():
    case = heat_polynomial_case()
    goal = AverageGoal(case.time_final, reference_value=EXACT_AVERAGE)
    st = SpaceTimeMesh.uniform(case.initial_mesh(0), 0.0, case.time_final,
                               1000)
    primal, adjoint, sc, tc = solve_pair(case, goal, st, (1, 2),
                                         quadrature="midpoint")
    jv = goal.value(primal)
    for part, want in (("primal", 1.000479), ("adjoint", 1.031224)):
        cfg = EstimatorConfig(variant="split", part=part, orders=(1, 2))
        fields = estimate_all(case, goal, primal, adjoint, cfg,
                              space_cache=sc, transfers=tc)
        rep = aggregate(fields, jv, reference=goal.reference(case))
        assert rep.i_eff == pytest.approx(want, abs=0.02)


# ---------------------------------------------------------------------------
# weight enrichment drives the external estimate toward the true error


def test_external_weight_enrichment_converges_to_true_error():
    # temporally fine / spatially coarse forward solve, so the estimate is
    # limited by the reference weight's spatial resolution, not by the
    # per-interval linearization of the weight
    case = heat_polynomial_case()
    goal = AverageGoal(case.time_final, reference_value=EXACT_AVERAGE)
    sc = problem_space_cache(case)
    tc = TransferCache()
    coarse_mesh = case.initial_mesh(0)
    st = SpaceTimeMesh.uniform(coarse_mesh, 0.0, case.time_final, 64)
    primal = solve_primal(case, st, 1, space_cache=sc, transfers=tc,
                          quadrature="midpoint")
    err = goal.reference(case) - goal.value(primal)
    cfg = EstimatorConfig(variant="split", part="primal", orders=(1, 1),
                          f_rule="gauss2", weight_mode="external")
    gaps = []
    mesh = coarse_mesh
    slabs = 64
    for _ in range(3):
        mesh = mesh.refine_all()
        slabs *= 2
        fine_st = SpaceTimeMesh.uniform(mesh, 0.0, case.time_final, slabs)
        fine_primal = solve_primal(case, fine_st, 1, space_cache=sc,
                                   transfers=tc, quadrature="midpoint")
        # a biquadratic reference weight: its spatial error is small and
        # smooth, so the residual pairing converges cleanly
        fine_adjoint = solve_adjoint(case, goal, fine_primal, 2,
                                     space_cache=sc, transfers=tc)
        fields = estimate_all(case, goal, primal, fine_adjoint, cfg,
                              space_cache=sc, transfers=tc)
        eta = aggregate(fields, goal.value(primal)).eta
        gaps.append(abs(eta / err - 1.0))
    assert gaps[1] < gaps[0]
    assert gaps[2] < gaps[1]
    assert gaps[2] < 0.05


# ---------------------------------------------------------------------------
# goal scaling covariance


def test_goal_scaling_covariance():
    case = heat_polynomial_case()
    st = SpaceTimeMesh.uniform(case.initial_mesh(0), 0.0, case.time_final, 6)
    scale = -2.5
    runs = {}
    for label, goal in (
            ("base", AverageGoal(case.time_final,
                                 reference_value=EXACT_AVERAGE)),
            ("scaled", AverageGoal(case.time_final, scale=scale,
                                   reference_value=EXACT_AVERAGE))):
        primal, adjoint, sc, tc = solve_pair(case, goal, st, (1, 2))
        cfg = EstimatorConfig(variant="split", part="primal", orders=(1, 2))
        fields = estimate_all(case, goal, primal, adjoint, cfg,
                              space_cache=sc, transfers=tc)
        runs[label] = (goal, fields,
                       aggregate(fields, goal.value(primal),
                                 reference=goal.reference(case)))
    base_fields = runs["base"][1]
    scaled_fields = runs["scaled"][1]
    for fb, fs in zip(base_fields, scaled_fields):
        assert fs.eta_k == pytest.approx(scale * fb.eta_k, rel=1e-12,
                                         abs=1e-18)
        np.testing.assert_allclose(fs.eta_h, scale * fb.eta_h,
                                   rtol=1e-12, atol=1e-18)
    assert runs["scaled"][2].eta == pytest.approx(
        scale * runs["base"][2].eta, rel=1e-12)
    assert runs["scaled"][2].i_eff == pytest.approx(
        runs["base"][2].i_eff, rel=1e-10)


# ---------------------------------------------------------------------------
# the bilinear-in-time partition of unity


def cg1_setup(slabs=5):
    case = heat_polynomial_case()
    goal = AverageGoal(case.time_final, reference_value=EXACT_AVERAGE)
    st = SpaceTimeMesh.uniform(case.initial_mesh(0), 0.0, case.time_final,
                               slabs)
    primal, adjoint, sc, tc = solve_pair(case, goal, st, (1, 2))
    return case, goal, primal, adjoint, sc, tc


def test_cg1_families_sum_to_natural_split_estimate():
    case, goal, primal, adjoint, sc, tc = cg1_setup()
    dg0 = EstimatorConfig(variant="split", part="primal", orders=(1, 2),
                          f_rule="simpson")
    for m in range(primal.num_slabs):
        ref = estimate_slab(case, goal, primal, adjoint, m, dg0,
                            space_cache=sc, transfers=tc)
        fam = estimate_slab_cg1pu(case, goal, primal, adjoint, m,
                                  space_cache=sc, transfers=tc)
        assert fam.temporal_value() == pytest.approx(ref.eta_k, rel=1e-12,
                                                     abs=1e-16)
        np.testing.assert_allclose(fam.spatial_vector(), ref.eta_h,
                                   rtol=1e-12, atol=1e-16)


def test_cg1_rejects_combustion_and_wrong_parts():
    prob = small_combustion()
    goal = ReactionRateGoal(prob.params, prob.time_final)
    with pytest.raises(EstimatorError, match="heat"):
        estimate_slab_cg1pu(prob, goal, None, None, 0)
    with pytest.raises(EstimatorError, match="split primal"):
        EstimatorConfig(pu="cg1", part="adjoint")
    with pytest.raises(EstimatorError, match="split primal"):
        EstimatorConfig(pu="cg1", variant="joint")
    case, goal1, primal, adjoint, sc, tc = cg1_setup(slabs=2)
    bad = EstimatorConfig(variant="split", part="adjoint", orders=(1, 2))
    with pytest.raises(EstimatorError, match="split primal"):
        estimate_slab_cg1pu(case, goal1, primal, adjoint, 0, bad,
                            space_cache=sc, transfers=tc)


def synthetic_cg1_fields(nnodes=4, slabs=3):
    fields = []
    for m in range(slabs):
        fields.append(Cg1Indicators(
            slab=m, orders=(1, 2),
            eta_k_start=1.0 * (m + 1), eta_k_end=0.1 * (m + 1),
            eta_h_start=np.full(nnodes, float(m + 1)),
            eta_h_end=np.full(nnodes, 10.0 * (m + 1))))
    return fields


def test_cg1_temporal_combination_overlaps_neighbors():
    fields = synthetic_cg1_fields()
    comb = cg1_temporal_combination(fields)
    # interval m collects: end of m-1, both of m, start of m+1
    assert comb[0] == pytest.approx(1.0 + 0.1 + 2.0)
    assert comb[1] == pytest.approx(0.1 + 2.0 + 0.2 + 3.0)
    assert comb[2] == pytest.approx(0.2 + 3.0 + 0.3)


def test_cg1_element_indicators_share_mesh_fast_path():
    case, goal, primal, adjoint, sc, tc = cg1_setup(slabs=3)
    fields = [estimate_slab_cg1pu(case, goal, primal, adjoint, m,
                                  space_cache=sc, transfers=tc)
              for m in range(3)]
    cells = cg1_element_indicators(fields, 1, primal, space_cache=sc,
                                   transfers=tc)
    space = sc.get(primal.spaces[1].mesh, 1)
    expected_vec = (fields[1].eta_h_start + fields[1].eta_h_end
                    + fields[0].eta_h_end + fields[2].eta_h_start)
    np.testing.assert_allclose(
        cells, expected_vec[space.cell_nodes].sum(axis=1), rtol=1e-13)


# ---------------------------------------------------------------------------
# container and reduction conventions


def test_element_indicators_sum_cell_corners():
    mesh = SpatialMesh.structured(2, 2, extent=(1.0, 1.0))
    space = SpaceCache().get(mesh, 1)
    field = IndicatorField(slab=0, variant="split", part="primal",
                           orders=(1, 1), eta_k=0.0,
                           eta_h=np.ones(space.nnodes))
    np.testing.assert_allclose(element_indicators(field, space),
                               np.full(4, 4.0))
    q2 = SpaceCache().get(mesh, 2)
    with pytest.raises(EstimatorError, match="bilinear"):
        element_indicators(field, q2)


def test_full_part_averages_before_taking_magnitudes():
    field = IndicatorField(
        slab=0, variant="split", part="full", orders=(1, 1),
        eta_k=2.0, eta_k_adj=-2.0,
        eta_h=np.array([1.0, -3.0]), eta_h_adj=np.array([1.0, 3.0]))
    assert field.temporal_value() == 0.0
    np.testing.assert_allclose(field.spatial_vector(), [1.0, 0.0])
    assert field.slab_sum() == pytest.approx(1.0)
    assert field.indicator_abs_sum() == pytest.approx(1.0)


def test_aggregate_reports_signed_effectivity():
    f1 = IndicatorField(slab=0, variant="split", part="primal",
                        orders=(1, 1), eta_k=0.5,
                        eta_h=np.array([0.25, -0.05]))
    f2 = IndicatorField(slab=1, variant="split", part="primal",
                        orders=(1, 1), eta_k=-0.1,
                        eta_h=np.array([0.1, 0.0]))
    rep = aggregate([f1, f2], j_value=1.0, reference=0.3)
    assert rep.eta_k == pytest.approx(0.4)
    assert rep.eta_h == pytest.approx(0.3)
    assert rep.eta == pytest.approx(0.7)
    assert rep.error == pytest.approx(-0.7)
    assert rep.i_eff == pytest.approx(-1.0)
    # |error| over the sum of indicator magnitudes
    assert rep.i_ind == pytest.approx(0.7 / (0.8 + 0.2))


def test_aggregate_edge_cases():
    field = IndicatorField(slab=0, variant="split", part="primal",
                           orders=(1, 1), eta_k=0.25,
                           eta_h=np.zeros(3))
    rep = aggregate([field], j_value=1.0)
    assert rep.error is None and rep.i_eff is None and rep.i_ind is None
    rep = aggregate([field], j_value=1.0, reference=1.0)
    assert rep.error == 0.0 and rep.i_eff is None
    with pytest.raises(EstimatorError, match="no slab"):
        aggregate([], j_value=0.0)


def test_configuration_validation():
    with pytest.raises(EstimatorError, match="order pair"):
        EstimatorConfig(orders=(2, 1))
    with pytest.raises(EstimatorError, match="variant"):
        EstimatorConfig(variant="both")
    with pytest.raises(EstimatorError, match="part"):
        EstimatorConfig(part="dual")
    with pytest.raises(EstimatorError, match="temporal rule"):
        EstimatorConfig(f_rule="trapezoid")
    with pytest.raises(EstimatorError, match="quad_n"):
        EstimatorConfig(quad_n=1)
    with pytest.raises(EstimatorError, match="primal"):
        EstimatorConfig(weight_mode="external", part="full")


def test_order_mismatch_between_config_and_solutions():
    case = heat_polynomial_case()
    goal = AverageGoal(case.time_final, reference_value=EXACT_AVERAGE)
    st = SpaceTimeMesh.uniform(case.initial_mesh(0), 0.0, case.time_final, 2)
    primal, adjoint, sc, tc = solve_pair(case, goal, st, (1, 1))
    cfg = EstimatorConfig(variant="split", part="primal", orders=(2, 2))
    with pytest.raises(EstimatorError, match="degree"):
        estimate_slab(case, goal, primal, adjoint, 0, cfg,
                      space_cache=sc, transfers=tc)
