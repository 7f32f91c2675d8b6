import logging
import math

import numpy as np
import pytest
from scipy import sparse

from core.domain import Point2
from core.errors import PlacementError, ReconstructionError, SizeLimitError, ValidationError
from core.fd_system import Grid, assemble, solve_forward
from core.placement import (
    AugmentedSystem,
    augment,
    condition_number,
    evaluate_candidate,
    least_squares_reconstruct,
    select_positions,
    selection_from_positions,
    snap_to_node,
    solve_least_squares,
    verify_error_bound,
)
from core.sampling import PositionSet, Provenance, lds_sample, lhs_sample


def test_snap_matches_exhaustive_nearest_node():
    grid = Grid(11, 0.1)
    rng = np.random.default_rng(0)
    points = rng.random((200, 2)) * 0.1
    nodes = grid.coordinates()
    expected = np.argmin(((points[:, None, :] - nodes[None, :, :]) ** 2).sum(axis=2), axis=1)
    np.testing.assert_array_equal(snap_to_node(points, grid), expected)


def test_snap_half_way_rounds_up():
    grid = Grid(5, 4.0)
    assert snap_to_node([[0.5, 0.0], [1.0, 2.5]], grid).tolist() == [1, 16]


def test_selection_matrix_rows():
    grid = Grid(11, 0.1)
    ps = PositionSet((Point2(0.05, 0.05), Point2(0.0, 0.0)))
    sel = selection_from_positions(ps, grid, 2)
    assert sel.matrix.shape == (2, 123)
    assert sel.nodes == (60, 0)
    assert sel.matrix[0, 60] == 1.0
    assert sel.matrix[:, 121:].nnz == 0


def test_duplicate_snaps_are_collapsed_and_averaged(caplog):
    grid = Grid(11, 0.1)
    ps = PositionSet((Point2(0.0501, 0.05), Point2(0.0499, 0.05), Point2(0.02, 0.02)))
    with caplog.at_level(logging.WARNING):
        sel = selection_from_positions(ps, grid, 0)
    assert sel.n_obs == 2
    assert sel.multiplicity == (2, 1)
    assert "1 個の観測位置" in caplog.text
    np.testing.assert_allclose(sel.aggregate([300.0, 302.0, 310.0]), [301.0, 310.0])
    np.testing.assert_allclose(sel.aggregate([1.0, 2.0]), [1.0, 2.0])
    with pytest.raises(ValidationError):
        sel.aggregate([1.0, 2.0, 3.0, 4.0])


def test_augment_matches_hand_stacking(two_source_spec):
    system = assemble(two_source_spec, 6)
    ps = PositionSet((Point2(0.02, 0.04), Point2(0.06, 0.06)))
    sel = selection_from_positions(ps, system.grid, 2)
    aug = augment(system, sel, [300.0, 301.0], lam=2.0)
    h2 = (0.1 / 5) ** 2
    top = np.hstack([system.a1.toarray(), -h2 * system.b.toarray()])
    expected = np.vstack([2.0 * top, sel.matrix.toarray()])
    np.testing.assert_array_equal(aug.a_hat, expected)
    np.testing.assert_array_equal(aug.c_hat, np.concatenate([2.0 * system.c1, [300.0, 301.0]]))
    assert aug.shape == (36 + 2, 36 + 2)


def test_augment_validates_lambda(two_source_spec):
    system = assemble(two_source_spec, 6)
    sel = selection_from_positions(PositionSet((Point2(0.05, 0.05),)), system.grid, 2)
    with pytest.raises(ValidationError):
        augment(system, sel, [300.0], lam=0.0)


def test_size_limit(two_source_spec):
    system = assemble(two_source_spec, 55)
    sel = selection_from_positions(PositionSet((Point2(0.05, 0.05),)), system.grid, 2)
    with pytest.raises(SizeLimitError):
        augment(system, sel, [300.0])


def test_condition_number_examples():
    assert condition_number(np.eye(4)) == pytest.approx(1.0)
    assert condition_number(np.diag([1.0, 2.0, 4.0])) == pytest.approx(4.0)
    assert math.isinf(condition_number(np.ones((3, 3))))
    assert math.isinf(condition_number(np.ones((2, 3))))
    assert condition_number(sparse.identity(3, format="csr")) == pytest.approx(1.0)


def test_condition_number_matches_dense_svd():
    rng = np.random.default_rng(1)
    matrix = rng.standard_normal((30, 12))
    s = np.linalg.svd(matrix, compute_uv=False)
    assert condition_number(matrix) == pytest.approx(s[0] / s[-1], rel=1e-12)


def test_kappa_matches_numpy_cond(two_source_spec):
    system = assemble(two_source_spec, 11)
    candidate = evaluate_candidate(lds_sample(20, two_source_spec), system)
    sel = candidate.selection
    aug = augment(system, sel, np.zeros(sel.n_obs))
    assert candidate.kappa == pytest.approx(np.linalg.cond(aug.a_hat), rel=1e-9)


def test_boundary_only_observation_is_not_identifiable(two_source_spec):
    system = assemble(two_source_spec, 11)
    corner = PositionSet((Point2(0.0, 0.0),))
    assert math.isinf(evaluate_candidate(corner, system).kappa)


def test_select_positions_picks_minimum(two_source_spec):
    system = assemble(two_source_spec, 11)
    candidates = [lhs_sample(12, two_source_spec, seed=s) for s in range(4)]
    candidates.append(PositionSet((Point2(0.0, 0.0),)))
    best, ranking = select_positions(candidates, system)
    assert [entry.candidate_id for entry in ranking] == [0, 1, 2, 3, 4]
    assert math.isinf(ranking[4].kappa)
    assert best.kappa == min(entry.kappa for entry in ranking)
    assert evaluate_candidate(best.positions, system).kappa == best.kappa


def test_select_positions_without_identifiable_candidate(two_source_spec):
    system = assemble(two_source_spec, 11)
    with pytest.raises(PlacementError):
        select_positions([PositionSet((Point2(0.0, 0.0),)), PositionSet(())], system)
    with pytest.raises(ValidationError):
        select_positions([], system)


def test_least_squares_matches_lstsq():
    rng = np.random.default_rng(2)
    matrix = rng.standard_normal((25, 8))
    rhs = rng.standard_normal(25)
    x = solve_least_squares(AugmentedSystem.from_dense(matrix, rhs))
    np.testing.assert_allclose(x, np.linalg.lstsq(matrix, rhs, rcond=None)[0], rtol=1e-10, atol=1e-12)


def test_rank_deficient_reconstruction_fails():
    aug = AugmentedSystem.from_dense(np.ones((4, 2)), np.ones(4))
    with pytest.raises(ReconstructionError):
        solve_least_squares(aug)


def test_noiseless_reconstruction_recovers_truth(two_source_spec):
    system = assemble(two_source_spec, 11)
    truth = solve_forward(system, two_source_spec.true_intensities())
    interior = np.nonzero(system.interior_mask)[0]
    ps = PositionSet.from_array(system.grid.coordinates()[interior], Provenance.MANUAL)
    sel = selection_from_positions(ps, system.grid, 2)
    field, y = least_squares_reconstruct(augment(system, sel, truth.values[interior]))
    np.testing.assert_allclose(y, two_source_spec.true_intensities(), rtol=1e-6)
    np.testing.assert_allclose(field.values, truth.values, atol=1e-8)


def test_error_bound_on_random_systems():
    rng = np.random.default_rng(3)
    for trial in range(10):
        matrix = rng.standard_normal((20, 6))
        rhs = rng.standard_normal(20)
        report = verify_error_bound(AugmentedSystem.from_dense(matrix, rhs), trials=100, seed=trial)
        assert report.all_hold
        assert 0.0 < report.cos_theta <= 1.0 + 1e-12
        assert report.max_ratio <= 1.0


def test_error_bound_on_augmented_system(two_source_spec):
    system = assemble(two_source_spec, 11)
    truth = solve_forward(system, two_source_spec.true_intensities())
    ps = lds_sample(30, two_source_spec)
    sel = selection_from_positions(ps, system.grid, 2)
    aug = augment(system, sel, truth.sample(ps.as_array()))
    report = verify_error_bound(aug, trials=1000, seed=4)
    assert len(report.trials) == 1000
    assert report.all_hold
    for trial in report.trials[:5]:
        assert trial.relaxed_bound <= trial.bound * (1.0 + 1e-12)


def test_error_bound_with_explicit_perturbation():
    aug = AugmentedSystem.from_dense(np.eye(3), [1.0, 2.0, 3.0])
    report = verify_error_bound(aug, delta_c=[0.1, 0.0, 0.0])
    (trial,) = report.trials
    assert report.kappa == pytest.approx(1.0)
    assert report.cos_theta == pytest.approx(1.0)
    assert trial.relative_error == pytest.approx(0.1 / math.sqrt(14.0))
    assert trial.holds
    with pytest.raises(ValidationError):
        verify_error_bound(aug, delta_c=[0.1, 0.0])


def test_error_bound_undefined_when_solution_is_zero():
    aug = AugmentedSystem.from_dense([[1.0], [0.0]], [0.0, 1.0])
    report = verify_error_bound(aug, trials=3)
    assert report.undefined == 3
    assert report.all_hold


@pytest.mark.parametrize("alpha", [1e-3, 7.0, 1e5])
def test_condition_number_is_scale_invariant(two_source_spec, alpha):
    rng = np.random.default_rng(5)
    matrix = rng.standard_normal((18, 7))
    assert condition_number(alpha * matrix) == pytest.approx(condition_number(matrix), rel=1e-10)

    system = assemble(two_source_spec, 11)
    sel = selection_from_positions(lds_sample(15, two_source_spec), system.grid, 2)
    a_hat = augment(system, sel, np.zeros(sel.n_obs)).a_hat
    assert condition_number(alpha * a_hat) == pytest.approx(condition_number(a_hat), rel=1e-8)


def test_kappa_ranking_skips_singular_vectors(two_source_spec):
    system = assemble(two_source_spec, 11)
    sel = selection_from_positions(lds_sample(15, two_source_spec), system.grid, 2)
    aug = augment(system, sel, np.zeros(sel.n_obs))
    kappa = aug.kappa
    assert "_svd" not in vars(aug)
    solve_least_squares(aug)
    assert aug.kappa == pytest.approx(kappa, rel=1e-12)


def test_error_bound_is_attained_along_worst_direction():
    rng = np.random.default_rng(6)
    matrix = rng.standard_normal((20, 6))
    u, s, _ = np.linalg.svd(matrix)
    # 解が最大特異方向、摂動が最小特異方向のとき上界は等号に近づく
    outside = u[:, 10]
    rhs = u[:, 0] + 0.5 * outside
    aug = AugmentedSystem.from_dense(matrix, rhs)
    report = verify_error_bound(aug, delta_c=1e-3 * u[:, 5])
    (trial,) = report.trials
    assert report.kappa == pytest.approx(s[0] / s[5], rel=1e-10)
    assert report.cos_theta == pytest.approx(1.0 / math.sqrt(1.25), rel=1e-10)
    assert trial.holds
    assert trial.relative_error >= 0.1 * trial.bound
    assert trial.relative_error == pytest.approx(trial.bound, rel=1e-6)


def test_select_positions_ignores_candidate_order(two_source_spec):
    system = assemble(two_source_spec, 11)
    candidates = [lhs_sample(12, two_source_spec, seed=s) for s in range(6)]
    best, _ = select_positions(candidates, system)
    rng = np.random.default_rng(7)
    for _ in range(3):
        shuffled = [candidates[i] for i in rng.permutation(len(candidates))]
        reordered, _ = select_positions(shuffled, system)
        assert reordered.positions.points == best.positions.points
        assert reordered.kappa == best.kappa
