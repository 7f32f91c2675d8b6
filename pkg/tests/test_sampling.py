import numpy as np
import pytest

from core.domain import BoundaryCondition, Point2
from core.errors import DomainViolationError, ValidationError
from core.sampling import (
    PositionSet,
    Provenance,
    default_predefined,
    discrepancy_estimate,
    generate_candidates,
    grid_sample,
    lds_sample,
    lhs_sample,
)

from conftest import plate, uniform


def test_first_halton_point(empty_case1):
    point = lds_sample(1, empty_case1).points[0]
    assert point.x == pytest.approx(0.05)
    assert point.y == pytest.approx(0.1 / 3)


def test_halton_base2_coordinates(empty_case1):
    xs = sorted(p.x / 0.1 for p in lds_sample(3, empty_case1).points)
    assert xs == pytest.approx([0.25, 0.5, 0.75])


def test_halton_skip_continues_the_sequence(empty_case1):
    full = lds_sample(6, empty_case1).as_array()
    tail = lds_sample(4, empty_case1, skip=2).as_array()
    np.testing.assert_allclose(tail, full[2:])


def test_lhs_is_stratified_on_both_axes(empty_case1):
    n = 25
    coords = lhs_sample(n, empty_case1, seed=7).as_array() / 0.1
    for axis in range(2):
        bins = np.floor(coords[:, axis] * n).astype(int)
        assert sorted(bins.tolist()) == list(range(n))


def test_lhs_is_reproducible(empty_case1):
    a = lhs_sample(10, empty_case1, seed=3).as_array()
    b = lhs_sample(10, empty_case1, seed=3).as_array()
    c = lhs_sample(10, empty_case1, seed=4).as_array()
    np.testing.assert_array_equal(a, b)
    assert not np.allclose(a, c)


def test_sample_size_must_be_positive(empty_case1):
    with pytest.raises(ValidationError):
        lds_sample(0, empty_case1)
    with pytest.raises(ValidationError):
        lhs_sample(0, empty_case1, seed=0)


def test_grid_sample_fills_empty_cells(empty_case1):
    predefined = PositionSet((Point2(0.01, 0.01),))
    result = grid_sample(empty_case1, predefined, 2)
    assert result.provenance is Provenance.GS
    assert result.as_array().tolist() == pytest.approx(
        [[0.01, 0.01], [0.075, 0.025], [0.025, 0.075], [0.075, 0.075]]
    )


def test_grid_line_point_belongs_to_upper_right_cell(empty_case1):
    predefined = PositionSet((Point2(0.05, 0.01),))
    added = grid_sample(empty_case1, predefined, 2).as_array()[1:]
    assert added.tolist() == pytest.approx([[0.025, 0.025], [0.025, 0.075], [0.075, 0.075]])


def test_grid_sample_rejects_outside_points(empty_case1):
    with pytest.raises(DomainViolationError):
        grid_sample(empty_case1, PositionSet((Point2(0.2, 0.01),)), 2)
    with pytest.raises(ValidationError):
        grid_sample(empty_case1, PositionSet((Point2(0.01, 0.01),)), 0)


def test_duplicate_positions_are_rejected():
    with pytest.raises(ValidationError):
        PositionSet((Point2(0.01, 0.01), Point2(0.01, 0.01)))


def test_default_predefined_has_source_centres_then_engineer_points(reference_spec):
    points = default_predefined(reference_spec).points
    assert list(points[:6]) == reference_spec.source_centers()
    assert list(points[6:]) == list(reference_spec.predefined_points)


def test_discrepancy_of_single_centre_point(empty_case1):
    ps = PositionSet((Point2(0.05, 0.05),))
    assert discrepancy_estimate(ps, trials=200, seed=0, spec=empty_case1) == pytest.approx(0.75)


def test_discrepancy_is_a_fraction(empty_case1):
    value = discrepancy_estimate(lhs_sample(30, empty_case1, seed=1), 500, 0, spec=empty_case1)
    assert 0.0 < value <= 1.0


def test_halton_has_lower_discrepancy_than_lhs(empty_case1):
    n = 100
    lds = discrepancy_estimate(lds_sample(n, empty_case1), 2000, 0, spec=empty_case1)
    lhs = [
        discrepancy_estimate(lhs_sample(n, empty_case1, seed=s), 2000, 0, spec=empty_case1)
        for s in range(10)
    ]
    assert lds < float(np.mean(lhs))


def test_generate_candidates_protocol(reference_spec):
    counts = {Provenance.LHS: 2, Provenance.LDS: 2, Provenance.GS: 2}
    candidates = generate_candidates(reference_spec, 20, counts, seed=11)
    assert [c.provenance for c in candidates] == [
        Provenance.LHS, Provenance.LHS, Provenance.LDS, Provenance.LDS, Provenance.GS, Provenance.GS,
    ]
    assert all(len(c) == 20 for c in candidates)
    # LDS 候補は Halton 列の連続した別ブロック
    np.testing.assert_allclose(
        np.vstack([candidates[2].as_array(), candidates[3].as_array()]),
        lds_sample(40, reference_spec).as_array(),
    )
    assert not np.allclose(candidates[0].as_array(), candidates[1].as_array())
    fixed = set(default_predefined(reference_spec).points)
    for gs in candidates[4:]:
        assert fixed <= set(gs.points)


def test_generate_candidates_is_reproducible(reference_spec):
    counts = {Provenance.LHS: 2, Provenance.GS: 1}
    a = generate_candidates(reference_spec, 15, counts, seed=5)
    b = generate_candidates(reference_spec, 15, counts, seed=5)
    for x, y in zip(a, b):
        np.testing.assert_array_equal(x.as_array(), y.as_array())


def test_gs_needs_room_for_predefined_points(reference_spec):
    with pytest.raises(ValidationError):
        generate_candidates(reference_spec, 5, {Provenance.GS: 1}, seed=0)


def test_check_within(empty_case1):
    PositionSet((Point2(0.0, 0.1),)).check_within(empty_case1)
    with pytest.raises(DomainViolationError):
        PositionSet((Point2(-0.01, 0.05),)).check_within(empty_case1)


@pytest.mark.parametrize("n", [2, 7, 16, 40])
def test_lhs_is_stratified_for_every_seed(empty_case1, n):
    for seed in range(50):
        coords = lhs_sample(n, empty_case1, seed=seed).as_array() / 0.1
        for axis in range(2):
            bins = np.floor(coords[:, axis] * n).astype(int)
            assert sorted(bins.tolist()) == list(range(n)), (seed, axis)


@pytest.mark.parametrize("n, extra", [(1, 1), (5, 11), (64, 36)])
def test_halton_prefix_is_stable(empty_case1, n, extra):
    short = lds_sample(n, empty_case1).as_array()
    longer = lds_sample(n + extra, empty_case1).as_array()
    np.testing.assert_array_equal(longer[:n], short)


def test_halton_64_beats_average_of_100_lhs_draws(empty_case1):
    n = 64
    lds = discrepancy_estimate(lds_sample(n, empty_case1), 2000, 0, spec=empty_case1)
    lhs = [
        discrepancy_estimate(lhs_sample(n, empty_case1, seed=s), 2000, 0, spec=empty_case1)
        for s in range(100)
    ]
    assert lds < float(np.mean(lhs))


def test_discrepancy_is_measured_on_the_normalised_plate(empty_case1):
    unit = lhs_sample(20, empty_case1, seed=2).as_array() / 0.1
    large = plate(uniform(BoundaryCondition.dirichlet(298.0)), size=1.0)
    small = discrepancy_estimate(PositionSet.from_array(unit * 0.1), 300, 4, spec=empty_case1)
    assert discrepancy_estimate(PositionSet.from_array(unit), 300, 4, spec=large) == pytest.approx(small)
    with pytest.raises(DomainViolationError):
        discrepancy_estimate(PositionSet.from_array(unit), 300, 4, spec=empty_case1)


@pytest.mark.parametrize("cells, expected", [(1, 8), (2, 8), (3, 10), (4, 17)])
def test_grid_sample_counts_on_reference_layout(reference_spec, cells, expected):
    # 事前配置点 8 個 (熱源中心 6 + 指定点 2) に、空セル数ぶんの中心が加わる
    result = grid_sample(reference_spec, None, cells)
    assert len(result) == expected


def test_grid_sample_reference_layout_three_cells(reference_spec):
    added = grid_sample(reference_spec, None, 3).as_array()[8:]
    assert added.tolist() == pytest.approx([[0.1 / 6, 0.05], [0.5 / 6, 0.05]])
