import math

import numpy as np
import pytest

from core.domain import BoundaryCondition, CaseId, Edge, HeatSource, Point2, case_preset
from core.errors import SingularSystemError, ValidationError
from core.fd_system import (
    Grid,
    ScalarField,
    assemble,
    eliminate_boundary,
    grid_index,
    grid_position,
    solve_forward,
)

from conftest import plate, uniform


def test_grid_index_layout():
    assert grid_index(0, 0, 5) == 0
    assert grid_index(0, 4, 5) == 4
    assert grid_index(1, 0, 5) == 5
    assert grid_position(12, 5) == (2, 2)
    with pytest.raises(IndexError):
        grid_index(5, 0, 5)


def test_grid_requires_three_nodes():
    with pytest.raises(ValidationError):
        Grid(2, 0.1)


def test_k3_matrix_matches_hand_assembly(empty_case1):
    system = assemble(empty_case1, 3)
    expected = np.eye(9)
    expected[4] = [0, -1, 0, -1, 4, -1, 0, -1, 0]
    np.testing.assert_array_equal(system.a1.toarray(), expected)
    c1 = np.full(9, 298.0)
    c1[4] = 0.0
    np.testing.assert_array_equal(system.c1, c1)
    assert system.b.shape == (9, 0)


def test_interior_rows_scale_with_conductivity():
    spec = plate(uniform(BoundaryCondition.dirichlet(298.0)), conductivity=2.5)
    system = assemble(spec, 3)
    assert system.a1[4, 4] == pytest.approx(10.0)
    assert system.a1[4, 1] == pytest.approx(-2.5)


def test_zero_sources_give_constant_field(empty_case1):
    field = solve_forward(assemble(empty_case1, 11), [])
    np.testing.assert_allclose(field.values, 298.0, atol=1e-10)


def test_neumann_row_copies_inner_neighbour():
    spec = case_preset(CaseId.CASE2, ())
    system = assemble(spec, 4)
    idx = grid_index(1, 0, 4)
    row = system.a1[idx].toarray().ravel()
    assert row[idx] == 1.0
    assert row[grid_index(1, 1, 4)] == -1.0
    assert np.count_nonzero(row) == 2


def test_corner_takes_strongest_condition():
    spec = case_preset(CaseId.CASE2, ())
    system = assemble(spec, 4)
    # 左下角: 下辺 Dirichlet と左辺 Neumann → Dirichlet
    row = system.a1[0].toarray().ravel()
    assert row[0] == 1.0 and np.count_nonzero(row) == 1
    assert system.c1[0] == 298.0
    # 左上角: 上辺・左辺とも Neumann → 対角の内部ノード
    top_left = grid_index(3, 0, 4)
    row = system.a1[top_left].toarray().ravel()
    assert row[grid_index(2, 1, 4)] == -1.0


def test_robin_rows_edge_and_corner():
    spec = plate(uniform(BoundaryCondition.robin(10.0, 300.0)))
    k_nodes = 5
    system = assemble(spec, k_nodes)
    h = 0.1 / (k_nodes - 1)

    edge_node = grid_index(0, 2, k_nodes)
    row = system.a1[edge_node].toarray().ravel()
    assert row[edge_node] == pytest.approx(1.0 / h + 10.0)
    assert row[grid_index(1, 2, k_nodes)] == pytest.approx(-1.0 / h)
    assert system.c1[edge_node] == pytest.approx(3000.0)

    corner = grid_index(0, 0, k_nodes)
    row = system.a1[corner].toarray().ravel()
    d = h * math.sqrt(2.0)
    assert row[corner] == pytest.approx(1.0 / d + 10.0)
    assert row[grid_index(1, 1, k_nodes)] == pytest.approx(-1.0 / d)


def test_robin_plate_without_sources_relaxes_to_ambient():
    spec = plate(uniform(BoundaryCondition.robin(10.0, 300.0)))
    field = solve_forward(assemble(spec, 9), [])
    np.testing.assert_allclose(field.values, 300.0, atol=1e-8)


def test_no_reference_node_is_singular():
    # 区間 Dirichlet がどの格子点にも掛からない
    boundaries = uniform(BoundaryCondition.neumann())
    boundaries[Edge.BOTTOM] = (
        BoundaryCondition.neumann(),
        BoundaryCondition.dirichlet(298.0, segment=(0.031, 0.032)),
    )
    spec = plate(boundaries)
    with pytest.raises(SingularSystemError):
        assemble(spec, 3)
    assert assemble(spec, 101).m == 101 * 101


def test_non_square_plate_is_rejected():
    from core.domain import DomainSpec

    spec = DomainSpec(0.1, 0.2, 1.0, (), uniform(BoundaryCondition.dirichlet(298.0)))
    with pytest.raises(ValidationError):
        assemble(spec, 5)


def test_source_matrix_marks_interior_nodes_only(reference_spec):
    system = assemble(reference_spec, 50)
    b = system.b.toarray()
    assert b.shape == (2500, 6)
    assert np.all(b.sum(axis=1) <= 1)
    assert np.all(b.sum(axis=0) > 0)
    assert np.all(system.interior_mask[b.sum(axis=1) > 0])


def test_intensities_length_is_checked(two_source_spec):
    with pytest.raises(ValidationError):
        solve_forward(assemble(two_source_spec, 11), [1.0])


def test_heated_plate_stays_above_ambient(reference_spec):
    field = solve_forward(assemble(reference_spec, 50), reference_spec.true_intensities())
    assert field.values.min() >= 298.0 - 1e-9
    assert field.values.max() > 300.0


def test_field_is_affine_in_intensities(two_source_spec):
    system = assemble(two_source_spec, 21)
    y = two_source_spec.true_intensities()
    base = solve_forward(system, np.zeros(2)).values
    once = solve_forward(system, y).values - base
    twice = solve_forward(system, 2 * y).values - base
    np.testing.assert_allclose(twice, 2 * once, rtol=1e-9, atol=1e-9)


def _manufactured_error(spec, k_nodes: int) -> float:
    system = assemble(spec, k_nodes)
    coords = system.grid.coordinates()
    wave = math.pi / 0.1
    shape = np.sin(wave * coords[:, 0]) * np.sin(wave * coords[:, 1])
    exact = 298.0 + 10.0 * shape
    q = spec.conductivity * 10.0 * 2 * wave ** 2 * shape
    field = solve_forward(system, [], extra_source=q)
    return float(np.max(np.abs(field.values - exact)))


def test_manufactured_solution_converges_second_order(empty_case1):
    coarse = _manufactured_error(empty_case1, 21)
    fine = _manufactured_error(empty_case1, 41)
    assert coarse / fine == pytest.approx(4.0, rel=0.25)


def test_eliminate_boundary_leaves_laplacian_block(empty_case1):
    block = eliminate_boundary(assemble(empty_case1, 6)).toarray()
    assert block.shape == (16, 16)
    np.testing.assert_array_equal(np.diag(block), 4.0)
    np.testing.assert_array_equal(block, block.T)


def test_scalar_field_sample_is_bilinear():
    grid = Grid(3, 0.1)
    field = ScalarField(grid, np.arange(9, dtype=float))
    assert field.sample([[0.05, 0.05]])[0] == pytest.approx(4.0)
    assert field.sample([[0.025, 0.0]])[0] == pytest.approx(0.5)
    assert field.sample([[0.025, 0.025]])[0] == pytest.approx(2.0)


def test_scalar_field_is_read_only():
    field = ScalarField(Grid(3, 0.1), np.zeros(9))
    with pytest.raises(ValueError):
        field.values[0] = 1.0


def _hand_matrix_k5() -> np.ndarray:
    expected = np.eye(25)
    for row in range(1, 4):
        for col in range(1, 4):
            idx = grid_index(row, col, 5)
            expected[idx, idx] = 4.0
            for r, c in ((row - 1, col), (row + 1, col), (row, col - 1), (row, col + 1)):
                expected[idx, grid_index(r, c, 5)] = -1.0
    return expected


@pytest.mark.parametrize(
    "size, inside",
    [
        (0.02, [(2, 2)]),
        (0.06, [(r, c) for r in range(1, 4) for c in range(1, 4)]),
    ],
)
def test_k5_centred_source_matches_hand_assembly(size, inside):
    source = HeatSource(Point2(0.05, 0.05), size, size, 1000.0, 1000.0, name="c")
    spec = case_preset(CaseId.CASE1, (source,))
    system = assemble(spec, 5)

    np.testing.assert_array_equal(system.a1.toarray(), _hand_matrix_k5())
    expected_b = np.zeros((25, 1))
    for row, col in inside:
        expected_b[grid_index(row, col, 5), 0] = 1.0
    np.testing.assert_array_equal(system.b.toarray(), expected_b)
    expected_c1 = np.where(system.interior_mask, 0.0, 298.0)
    np.testing.assert_array_equal(system.c1, expected_c1)

    field = solve_forward(system, [1000.0])
    residual = system.a1 @ field.values - system.h2 * (system.b @ np.array([1000.0])) - system.c1
    np.testing.assert_allclose(residual, 0.0, atol=1e-6)


def _nodes_between(low: float, high: float, h: float, tol: float) -> int:
    return math.floor((high + tol) / h) - math.ceil((low - tol) / h) + 1


@pytest.mark.parametrize("k", [11, 21, 50])
def test_source_columns_count_enclosed_nodes(reference_spec, k):
    system = assemble(reference_spec, k)
    h = system.grid.h
    tol = reference_spec.tolerance
    expected = [
        _nodes_between(xmin, xmax, h, tol) * _nodes_between(ymin, ymax, h, tol)
        for xmin, xmax, ymin, ymax in (src.bounds for src in reference_spec.sources)
    ]
    np.testing.assert_array_equal(np.asarray(system.b.sum(axis=0)).ravel(), expected)
    assert system.b.max() == 1.0
