"""テスト共通のフィクスチャ。"""

from __future__ import annotations

from pathlib import Path

import pytest

from core.config import load_domain
from core.domain import BoundaryCondition, CaseId, DomainSpec, Edge, HeatSource, Point2, case_preset

CONFIG_DIR = Path(__file__).resolve().parents[1] / "configs"


@pytest.fixture(scope="session")
def reference_spec() -> DomainSpec:
    return load_domain(CONFIG_DIR / "reference_layout.yaml")


@pytest.fixture
def two_source_spec() -> DomainSpec:
    """Case1 (全周 298 K) に熱源2つの小さなレイアウト。"""
    sources = (
        HeatSource(Point2(0.03, 0.03), 0.02, 0.02, 20000.0, 18000.0, name="a"),
        HeatSource(Point2(0.07, 0.065), 0.02, 0.03, 10000.0, 12000.0, name="b"),
    )
    return case_preset(CaseId.CASE1, sources)


@pytest.fixture
def empty_case1() -> DomainSpec:
    return case_preset(CaseId.CASE1, ())


def plate(boundaries, sources=(), size: float = 0.1, conductivity: float = 1.0) -> DomainSpec:
    """辺ごとの条件を与えて DomainSpec を作る。"""
    full = {edge: tuple(boundaries[edge]) for edge in Edge}
    return DomainSpec(size, size, conductivity, tuple(sources), full)


def uniform(bc: BoundaryCondition):
    return {edge: (bc,) for edge in Edge}
