"""発熱プレートの幾何・境界条件・熱源レイアウトのドメインモデル。"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Any, Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np

from .errors import DomainViolationError, ValidationError

AMBIENT_TEMPERATURE = 298.0
PLATE_SIZE = 0.1
HEAT_SINK_WIDTH = 0.01

# 閉矩形判定・領域判定の許容誤差 (プレート寸法に対する相対値)
_REL_TOL = 1e-12


@dataclass(frozen=True)
class Point2:
    """プレート上の座標 (m)。"""

    x: float
    y: float

    def as_tuple(self) -> Tuple[float, float]:
        return (self.x, self.y)


@dataclass(frozen=True)
class HeatSource:
    """矩形熱源 Γᵢ。強度は面密度 (W/m²)。"""

    center: Point2
    width: float
    height: float
    rated_intensity: float
    true_intensity: float
    name: str = ""

    def __post_init__(self) -> None:
        label = self.name or "heat source"
        if not (self.width > 0 and self.height > 0):
            raise ValidationError(f"{label}: width/height は正でなければなりません")
        for attr in ("rated_intensity", "true_intensity"):
            value = getattr(self, attr)
            if not math.isfinite(value) or value < 0:
                raise ValidationError(f"{label}: {attr} は0以上の有限値でなければなりません")

    @property
    def bounds(self) -> Tuple[float, float, float, float]:
        """(xmin, xmax, ymin, ymax) を返す。"""
        hw, hh = 0.5 * self.width, 0.5 * self.height
        return (self.center.x - hw, self.center.x + hw, self.center.y - hh, self.center.y + hh)

    @property
    def area(self) -> float:
        return self.width * self.height

    def contains(self, x: Any, y: Any, tol: float = 0.0) -> Any:
        """閉矩形に含まれるかを返す。配列入力にも対応する。"""
        xmin, xmax, ymin, ymax = self.bounds
        return (x >= xmin - tol) & (x <= xmax + tol) & (y >= ymin - tol) & (y <= ymax + tol)

    def overlaps(self, other: "HeatSource") -> bool:
        """閉矩形同士が共有点を持つならTrue。"""
        axmin, axmax, aymin, aymax = self.bounds
        bxmin, bxmax, bymin, bymax = other.bounds
        return axmin <= bxmax and bxmin <= axmax and aymin <= bymax and bymin <= aymax


class BoundaryKind(str, Enum):
    DIRICHLET = "dirichlet"
    NEUMANN = "neumann"
    ROBIN = "robin"


class Edge(str, Enum):
    """プレートの4辺。"""

    BOTTOM = "bottom"
    RIGHT = "right"
    TOP = "top"
    LEFT = "left"

    @property
    def outward_normal(self) -> Tuple[float, float]:
        return _NORMALS[self]


_NORMALS = {
    Edge.BOTTOM: (0.0, -1.0),
    Edge.RIGHT: (1.0, 0.0),
    Edge.TOP: (0.0, 1.0),
    Edge.LEFT: (-1.0, 0.0),
}


@dataclass(frozen=True)
class BoundaryCondition:
    """辺(または辺上の区間)に課す境界条件。segment は辺に沿った座標区間 (m)。"""

    kind: BoundaryKind
    t0: Optional[float] = None
    h_conv: Optional[float] = None
    segment: Optional[Tuple[float, float]] = None

    def __post_init__(self) -> None:
        if self.kind in (BoundaryKind.DIRICHLET, BoundaryKind.ROBIN):
            if self.t0 is None or not math.isfinite(self.t0):
                raise ValidationError(f"{self.kind.value} 条件には有限な t0 が必要です")
        if self.kind is BoundaryKind.ROBIN:
            if self.h_conv is None or not math.isfinite(self.h_conv) or self.h_conv < 0:
                raise ValidationError("robin 条件には0以上の h_conv が必要です")
        if self.segment is not None:
            lo, hi = self.segment
            if not lo < hi:
                raise ValidationError(f"segment {self.segment} は lo < hi でなければなりません")

    @classmethod
    def dirichlet(cls, t0: float, segment: Optional[Tuple[float, float]] = None) -> "BoundaryCondition":
        return cls(BoundaryKind.DIRICHLET, t0=t0, segment=segment)

    @classmethod
    def neumann(cls, segment: Optional[Tuple[float, float]] = None) -> "BoundaryCondition":
        return cls(BoundaryKind.NEUMANN, segment=segment)

    @classmethod
    def robin(
        cls, h_conv: float, t0: float, segment: Optional[Tuple[float, float]] = None
    ) -> "BoundaryCondition":
        return cls(BoundaryKind.ROBIN, t0=t0, h_conv=h_conv, segment=segment)

    def covers(self, s: float, tol: float = 0.0) -> bool:
        if self.segment is None:
            return True
        lo, hi = self.segment
        return lo - tol <= s <= hi + tol

    def to_dict(self) -> Dict[str, Any]:
        data: Dict[str, Any] = {"kind": self.kind.value}
        if self.t0 is not None:
            data["t0"] = self.t0
        if self.h_conv is not None:
            data["h_conv"] = self.h_conv
        if self.segment is not None:
            data["segment"] = list(self.segment)
        return data


class CaseId(str, Enum):
    CASE1 = "case1"
    CASE2 = "case2"
    CASE3 = "case3"


@dataclass(frozen=True)
class DomainSpec:
    """プレート寸法・熱伝導率・熱源・4辺の境界条件をまとめた不変オブジェクト。"""

    lx: float
    ly: float
    conductivity: float
    sources: Tuple[HeatSource, ...]
    boundaries: Dict[Edge, Tuple[BoundaryCondition, ...]] = field(hash=False)
    predefined_points: Tuple[Point2, ...] = ()

    def __post_init__(self) -> None:
        if not (self.lx > 0 and self.ly > 0):
            raise ValidationError("lx/ly は正でなければなりません")
        if not self.conductivity > 0:
            raise ValidationError("conductivity は正でなければなりません")
        object.__setattr__(self, "sources", tuple(self.sources))
        object.__setattr__(self, "predefined_points", tuple(self.predefined_points))
        self._validate_sources()
        self._validate_boundaries()
        for point in self.predefined_points:
            if not self.contains(point.x, point.y):
                raise ValidationError(f"predefined point {point.as_tuple()} が領域外です")

    # ----- 検証 ----------------------------------------------------------
    def _validate_sources(self) -> None:
        for idx, source in enumerate(self.sources):
            xmin, xmax, ymin, ymax = source.bounds
            if not (0.0 < xmin and xmax < self.lx and 0.0 < ymin and ymax < self.ly):
                raise ValidationError(
                    f"sources[{idx}] ({source.name or '-'}) は領域の内部に収まっていません"
                )
            for jdx in range(idx):
                if source.overlaps(self.sources[jdx]):
                    raise ValidationError(f"sources[{jdx}] と sources[{idx}] が重なっています")

    def _validate_boundaries(self) -> None:
        missing = [edge.value for edge in Edge if edge not in self.boundaries]
        if missing:
            raise ValidationError(f"境界条件が未定義の辺があります: {', '.join(missing)}")
        has_reference = False
        for edge, conditions in self.boundaries.items():
            bases = [bc for bc in conditions if bc.segment is None]
            if len(bases) != 1:
                raise ValidationError(f"{edge.value}: 区間指定の無い基本条件がちょうど1つ必要です")
            length = self.edge_length(edge)
            for bc in conditions:
                if bc.segment is not None:
                    lo, hi = bc.segment
                    if lo < 0.0 or hi > length:
                        raise ValidationError(f"{edge.value}: segment {bc.segment} が辺の外にあります")
                if bc.kind is not BoundaryKind.NEUMANN:
                    has_reference = True
        if not has_reference:
            raise ValidationError("Dirichlet または Robin 境界が少なくとも1つ必要です (全Neumannは特異)")

    # ----- 幾何 ----------------------------------------------------------
    @property
    def tolerance(self) -> float:
        return _REL_TOL * max(self.lx, self.ly)

    def edge_length(self, edge: Edge) -> float:
        return self.lx if edge in (Edge.BOTTOM, Edge.TOP) else self.ly

    def contains(self, x: Any, y: Any) -> Any:
        tol = self.tolerance
        return (x >= -tol) & (x <= self.lx + tol) & (y >= -tol) & (y <= self.ly + tol)

    def condition_at(self, edge: Edge, s: float) -> BoundaryCondition:
        """辺上の座標 s における境界条件を返す。区間指定の条件が基本条件より優先される。"""
        conditions = self.boundaries[edge]
        tol = self.tolerance
        for bc in reversed(conditions):
            if bc.segment is not None and bc.covers(s, tol):
                return bc
        return next(bc for bc in conditions if bc.segment is None)

    @property
    def n_sources(self) -> int:
        return len(self.sources)

    def rated_intensities(self) -> np.ndarray:
        return np.array([src.rated_intensity for src in self.sources], dtype=float)

    def true_intensities(self) -> np.ndarray:
        return np.array([src.true_intensity for src in self.sources], dtype=float)

    def source_centers(self) -> List[Point2]:
        return [src.center for src in self.sources]

    def to_dict(self) -> Dict[str, Any]:
        """YAML設定と同じスキーマの辞書へシリアライズする。"""
        return {
            "plate": {"lx": self.lx, "ly": self.ly, "conductivity": self.conductivity},
            "boundaries": {
                edge.value: [bc.to_dict() for bc in self.boundaries[edge]] for edge in Edge
            },
            "sources": [
                {
                    "name": src.name,
                    "center": [src.center.x, src.center.y],
                    "size": [src.width, src.height],
                    "rated": src.rated_intensity,
                    "true": src.true_intensity,
                }
                for src in self.sources
            ],
            "observations": {"predefined": [[p.x, p.y] for p in self.predefined_points]},
        }


def source_membership(spec: DomainSpec, x: Any, y: Any) -> np.ndarray:
    """各点を含む熱源のインデックスを返す (含まれなければ -1)。閉矩形で判定する。"""
    xs = np.asarray(x, dtype=float)
    ys = np.asarray(y, dtype=float)
    index = np.full(np.broadcast(xs, ys).shape, -1, dtype=int)
    tol = spec.tolerance
    for j, source in enumerate(spec.sources):
        index[source.contains(xs, ys, tol)] = j
    return index


def membership_matrix(spec: DomainSpec, points: np.ndarray) -> np.ndarray:
    """点 × 熱源 の 0/1 指示行列を返す。"""
    points = np.asarray(points, dtype=float).reshape(-1, 2)
    index = source_membership(spec, points[:, 0], points[:, 1])
    matrix = np.zeros((points.shape[0], spec.n_sources))
    inside = index >= 0
    matrix[np.nonzero(inside)[0], index[inside]] = 1.0
    return matrix


def intensity_at(spec: DomainSpec, p: Point2, *, rated: bool = False) -> float:
    """点 p における熱源強度 (W/m²) を返す。熱源外では0。

    Raises:
        DomainViolationError: p がプレート外の場合。
    """
    if not bool(spec.contains(p.x, p.y)):
        raise DomainViolationError(f"点 {p.as_tuple()} はプレート領域外です")
    index = int(source_membership(spec, p.x, p.y))
    if index < 0:
        return 0.0
    source = spec.sources[index]
    return source.rated_intensity if rated else source.true_intensity


def case_preset(
    case_id: CaseId,
    layout: Sequence[HeatSource],
    *,
    predefined_points: Iterable[Point2] = (),
) -> DomainSpec:
    """0.1 m × 0.1 m プレートの3ケースの境界条件プリセットを組み立てる。"""
    case_id = CaseId(case_id)
    dirichlet = BoundaryCondition.dirichlet(AMBIENT_TEMPERATURE)
    neumann = BoundaryCondition.neumann()
    if case_id is CaseId.CASE1:
        boundaries = {edge: (dirichlet,) for edge in Edge}
    elif case_id is CaseId.CASE2:
        boundaries = {edge: (neumann,) for edge in Edge}
        boundaries[Edge.BOTTOM] = (dirichlet,)
    else:
        half = 0.5 * HEAT_SINK_WIDTH
        mid = 0.5 * PLATE_SIZE
        sink = BoundaryCondition.dirichlet(AMBIENT_TEMPERATURE, segment=(mid - half, mid + half))
        boundaries = {edge: (neumann,) for edge in Edge}
        boundaries[Edge.BOTTOM] = (neumann, sink)
    return DomainSpec(
        lx=PLATE_SIZE,
        ly=PLATE_SIZE,
        conductivity=1.0,
        sources=tuple(layout),
        boundaries=boundaries,
        predefined_points=tuple(predefined_points),
    )
