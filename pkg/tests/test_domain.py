import pytest

from core.config import parse_domain
from core.domain import (
    AMBIENT_TEMPERATURE,
    BoundaryCondition,
    BoundaryKind,
    CaseId,
    DomainSpec,
    Edge,
    HeatSource,
    Point2,
    case_preset,
    intensity_at,
    membership_matrix,
    source_membership,
)
from core.errors import DomainViolationError, ValidationError

from conftest import plate, uniform


def test_heat_source_rejects_non_positive_size():
    with pytest.raises(ValidationError):
        HeatSource(Point2(0.05, 0.05), 0.0, 0.01, 1000.0, 1000.0)


def test_heat_source_rejects_negative_intensity():
    with pytest.raises(ValidationError):
        HeatSource(Point2(0.05, 0.05), 0.01, 0.01, -1.0, 1000.0)


def test_dirichlet_requires_t0():
    with pytest.raises(ValidationError):
        BoundaryCondition(BoundaryKind.DIRICHLET)


def test_robin_requires_non_negative_h_conv():
    with pytest.raises(ValidationError):
        BoundaryCondition.robin(-1.0, 298.0)


def test_source_touching_boundary_is_rejected():
    source = HeatSource(Point2(0.005, 0.05), 0.01, 0.01, 1000.0, 1000.0)
    with pytest.raises(ValidationError):
        case_preset(CaseId.CASE1, (source,))


def test_overlapping_sources_are_rejected():
    a = HeatSource(Point2(0.04, 0.05), 0.02, 0.02, 1000.0, 1000.0)
    b = HeatSource(Point2(0.055, 0.05), 0.02, 0.02, 1000.0, 1000.0)
    with pytest.raises(ValidationError):
        case_preset(CaseId.CASE1, (a, b))


def test_all_neumann_plate_is_rejected():
    with pytest.raises(ValidationError):
        plate(uniform(BoundaryCondition.neumann()))


def test_each_edge_needs_one_base_condition():
    boundaries = uniform(BoundaryCondition.dirichlet(298.0))
    boundaries[Edge.TOP] = (BoundaryCondition.dirichlet(298.0, segment=(0.0, 0.05)),)
    with pytest.raises(ValidationError):
        plate(boundaries)


def test_case_presets():
    case1 = case_preset(CaseId.CASE1, ())
    assert all(case1.boundaries[e][0].kind is BoundaryKind.DIRICHLET for e in Edge)

    case2 = case_preset(CaseId.CASE2, ())
    assert case2.boundaries[Edge.BOTTOM][0].kind is BoundaryKind.DIRICHLET
    for edge in (Edge.LEFT, Edge.TOP, Edge.RIGHT):
        assert case2.boundaries[edge][0].kind is BoundaryKind.NEUMANN


def test_case3_heat_sink_segment_takes_priority():
    spec = case_preset(CaseId.CASE3, ())
    assert spec.condition_at(Edge.BOTTOM, 0.05).kind is BoundaryKind.DIRICHLET
    assert spec.condition_at(Edge.BOTTOM, 0.045).kind is BoundaryKind.DIRICHLET
    assert spec.condition_at(Edge.BOTTOM, 0.02).kind is BoundaryKind.NEUMANN
    assert spec.condition_at(Edge.TOP, 0.05).kind is BoundaryKind.NEUMANN


def test_intensity_inside_and_outside_sources(two_source_spec):
    assert intensity_at(two_source_spec, Point2(0.03, 0.03)) == 18000.0
    assert intensity_at(two_source_spec, Point2(0.03, 0.03), rated=True) == 20000.0
    assert intensity_at(two_source_spec, Point2(0.05, 0.05)) == 0.0


def test_intensity_on_source_edge_counts_as_inside(two_source_spec):
    # 閉矩形: 辺上の点も熱源に含まれる
    assert intensity_at(two_source_spec, Point2(0.04, 0.025)) == 18000.0


def test_intensity_outside_plate_raises(two_source_spec):
    with pytest.raises(DomainViolationError):
        intensity_at(two_source_spec, Point2(0.11, 0.05))


def test_membership_matrix(two_source_spec):
    points = [[0.03, 0.03], [0.07, 0.07], [0.05, 0.05]]
    matrix = membership_matrix(two_source_spec, points)
    assert matrix.tolist() == [[1.0, 0.0], [0.0, 1.0], [0.0, 0.0]]
    assert source_membership(two_source_spec, 0.05, 0.05) == -1


def test_to_dict_parses_back_to_equal_spec(reference_spec):
    assert parse_domain(reference_spec.to_dict()) == reference_spec


def test_reference_layout(reference_spec):
    assert reference_spec.n_sources == 6
    assert reference_spec.rated_intensities().tolist() == [20000, 30000, 15000, 25000, 10000, 8000]
    assert reference_spec.condition_at(Edge.LEFT, 0.05).t0 == AMBIENT_TEMPERATURE


def test_predefined_point_outside_plate_is_rejected():
    with pytest.raises(ValidationError):
        DomainSpec(
            0.1, 0.1, 1.0, (), uniform(BoundaryCondition.dirichlet(298.0)),
            predefined_points=(Point2(0.2, 0.05),),
        )
