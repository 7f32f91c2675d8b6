"""観測位置候補のサンプリング (LHS / LDS / GS) と星型ディスクレパンシー推定。"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from enum import Enum
from typing import Any, Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np
from scipy.spatial.distance import pdist
from scipy.stats import qmc

from .domain import DomainSpec, Point2
from .errors import DomainViolationError, ValidationError

logger = logging.getLogger(__name__)

MIN_SEPARATION = 1e-9


class Provenance(str, Enum):
    LHS = "lhs"
    LDS = "lds"
    GS = "gs"
    MANUAL = "manual"


@dataclass(frozen=True)
class PositionSet:
    """観測位置の集合と、その生成方法。"""

    points: Tuple[Point2, ...]
    provenance: Provenance = Provenance.MANUAL
    seed: Optional[int] = None

    def __post_init__(self) -> None:
        object.__setattr__(self, "points", tuple(self.points))
        object.__setattr__(self, "provenance", Provenance(self.provenance))
        if len(self.points) >= 2:
            gaps = pdist(self.as_array())
            if float(gaps.min()) < MIN_SEPARATION:
                raise ValidationError(f"{MIN_SEPARATION} m より近い観測位置の組があります")

    def __len__(self) -> int:
        return len(self.points)

    def as_array(self) -> np.ndarray:
        """(n, 2) の座標配列を返す。"""
        if not self.points:
            return np.zeros((0, 2))
        return np.array([p.as_tuple() for p in self.points], dtype=float)

    @classmethod
    def from_array(
        cls, array: Any, provenance: Provenance = Provenance.MANUAL, seed: Optional[int] = None
    ) -> "PositionSet":
        coords = np.asarray(array, dtype=float).reshape(-1, 2)
        return cls(tuple(Point2(float(x), float(y)) for x, y in coords), provenance, seed)

    def check_within(self, spec: DomainSpec) -> None:
        """全点がプレート内にあることを確認する。"""
        coords = self.as_array()
        if coords.size and not np.all(spec.contains(coords[:, 0], coords[:, 1])):
            raise DomainViolationError("観測位置にプレート領域外の点が含まれています")


def qmc_engine(engine_cls: Any, rng: Optional[np.random.Generator], **kwargs: Any) -> Any:
    # SciPy 1.15 で seed= から rng= へ移行したため両方に対応する
    if rng is None:
        return engine_cls(**kwargs)
    try:
        return engine_cls(rng=rng, **kwargs)
    except TypeError:
        return engine_cls(seed=rng, **kwargs)


def _to_domain(unit: np.ndarray, spec: DomainSpec) -> np.ndarray:
    return unit * np.array([spec.lx, spec.ly])


def lhs_sample(n: int, spec: DomainSpec, seed: int) -> PositionSet:
    """ラテン超方格サンプリング。各軸の n 等分区間にちょうど1点ずつ、区間内では一様に置く。"""
    if n < 1:
        raise ValidationError("n は1以上が必要です")
    engine = qmc_engine(qmc.LatinHypercube, np.random.default_rng(seed), d=2, scramble=True)
    unit = engine.random(n)
    return PositionSet.from_array(_to_domain(unit, spec), Provenance.LHS, seed)


def lds_sample(n: int, spec: DomainSpec, *, skip: int = 0) -> PositionSet:
    """Halton 列 (基数 2, 3) の先頭 n 点 (skip 点読み飛ばし) を領域へ写像する。

    原点 (0, 0) となる0番目の要素は使わないため、n=1 は (1/2, 1/3) になる。
    """
    if n < 1:
        raise ValidationError("n は1以上が必要です")
    if skip < 0:
        raise ValidationError("skip は0以上が必要です")
    engine = qmc.Halton(d=2, scramble=False)
    engine.fast_forward(1 + skip)
    unit = engine.random(n)
    return PositionSet.from_array(_to_domain(unit, spec), Provenance.LDS, None)


def _cell_of(point: Point2, spec: DomainSpec, cells: int) -> Tuple[int, int]:
    # 格子線上の点は右上のセルに属する
    wx, wy = spec.lx / cells, spec.ly / cells
    col = min(int(math.floor(point.x / wx + 1e-9)), cells - 1)
    row = min(int(math.floor(point.y / wy + 1e-9)), cells - 1)
    return row, col


def grid_cells(spec: DomainSpec, cells: int) -> List[Tuple[int, int, Point2]]:
    """N×N セルの (row, col, 中心) を下から上・左から右の順に返す。"""
    wx, wy = spec.lx / cells, spec.ly / cells
    return [
        (row, col, Point2((col + 0.5) * wx, (row + 0.5) * wy))
        for row in range(cells)
        for col in range(cells)
    ]


def default_predefined(spec: DomainSpec) -> PositionSet:
    """熱源中心と設定済みの技術者指定点を合わせた事前配置点を返す。"""
    points: List[Point2] = list(spec.source_centers())
    for point in spec.predefined_points:
        if point not in points:
            points.append(point)
    return PositionSet(tuple(points), Provenance.MANUAL)


def grid_sample(spec: DomainSpec, predefined: Optional[PositionSet], cells: int) -> PositionSet:
    """グリッドベースサンプリング。事前配置点の無い N×N セルの中心に観測点を追加する。

    Raises:
        ValidationError: N < 1、または事前配置点に重複がある場合。
        DomainViolationError: 事前配置点が領域外の場合。
    """
    if cells < 1:
        raise ValidationError("N は1以上が必要です")
    if predefined is None:
        predefined = default_predefined(spec)
    if len(set(predefined.points)) != len(predefined.points):
        raise ValidationError("事前配置点に重複があります")
    predefined.check_within(spec)
    occupied = {_cell_of(point, spec, cells) for point in predefined.points}
    added = [center for row, col, center in grid_cells(spec, cells) if (row, col) not in occupied]
    logger.debug("grid sample N=%d: occupied=%d added=%d", cells, len(occupied), len(added))
    return PositionSet(tuple(predefined.points) + tuple(added), Provenance.GS, None)


def discrepancy_estimate(
    positions: PositionSet, trials: int, seed: int, *, spec: DomainSpec
) -> float:
    """星型ディスクレパンシーの下界推定値を返す。

    座標は spec のプレート寸法で割って単位正方形へ正規化してから評価する。
    原点に固定したランダムな箱 `trials` 個と、標本点の座標を角とする全ての箱について、
    |箱内点数/n − 箱の体積| の最大値をとる。

    Raises:
        ValidationError: trials < 1 または点集合が空の場合。
        DomainViolationError: プレート外の点を含む場合。
    """
    if trials < 1:
        raise ValidationError("trials は1以上が必要です")
    coords = positions.as_array()
    n = coords.shape[0]
    if n == 0:
        raise ValidationError("空の点集合のディスクレパンシーは定義されません")
    positions.check_within(spec)
    coords = np.clip(coords / np.array([spec.lx, spec.ly]), 0.0, 1.0)
    rng = np.random.default_rng(seed)
    random_corners = rng.random((trials, 2))
    xs, ys = np.meshgrid(np.append(coords[:, 0], 1.0), np.append(coords[:, 1], 1.0))
    anchored = np.column_stack([xs.ravel(), ys.ravel()])
    corners = np.vstack([random_corners, anchored])

    best = 0.0
    for start in range(0, corners.shape[0], 2048):
        block = corners[start:start + 2048]
        volume = block[:, 0] * block[:, 1]
        below_x = coords[None, :, 0] < block[:, None, 0]
        below_y = coords[None, :, 1] < block[:, None, 1]
        upto_x = coords[None, :, 0] <= block[:, None, 0]
        upto_y = coords[None, :, 1] <= block[:, None, 1]
        open_count = np.sum(below_x & below_y, axis=1) / n
        closed_count = np.sum(upto_x & upto_y, axis=1) / n
        local = max(
            float(np.max(np.abs(open_count - volume))),
            float(np.max(np.abs(closed_count - volume))),
        )
        best = max(best, local)
    return min(best, 1.0)


def generate_candidates(
    spec: DomainSpec,
    n_obs: int,
    counts: Dict[Provenance, int],
    seed: int,
) -> List[PositionSet]:
    """観測数 n_obs の候補集合を、サンプラごとに指定個数ずつ生成する。

    LHS は候補ごとに独立なシードから、LDS は Halton 列の互いに素な連続ブロックから、
    GS は事前配置点を覆う最小の N×N 格子の空セル中心から、余剰分をシード付きで間引いて作る。
    """
    if n_obs < 1:
        raise ValidationError("n_obs は1以上が必要です")
    candidates: List[PositionSet] = []
    seeds = np.random.SeedSequence(seed).generate_state(max(1, sum(counts.values())) + 1)
    cursor = 0
    for provenance, count in counts.items():
        provenance = Provenance(provenance)
        for j in range(count):
            sub_seed = int(seeds[cursor])
            cursor += 1
            if provenance is Provenance.LHS:
                candidates.append(lhs_sample(n_obs, spec, sub_seed))
            elif provenance is Provenance.LDS:
                candidates.append(lds_sample(n_obs, spec, skip=j * n_obs))
            elif provenance is Provenance.GS:
                candidates.append(_gs_candidate(spec, n_obs, sub_seed))
            else:
                raise ValidationError(f"候補生成に対応していないサンプラです: {provenance.value}")
    return candidates


def _gs_candidate(spec: DomainSpec, n_obs: int, seed: int) -> PositionSet:
    predefined = default_predefined(spec)
    if len(predefined) > n_obs:
        raise ValidationError(
            f"事前配置点 {len(predefined)} 個が観測数 {n_obs} を超えています"
        )
    cells = 1
    full = grid_sample(spec, predefined, cells)
    while len(full) < n_obs:
        cells += 1
        full = grid_sample(spec, predefined, cells)
    fixed = list(predefined.points)
    extra = list(full.points[len(fixed):])
    rng = np.random.default_rng(seed)
    keep = np.sort(rng.choice(len(extra), size=n_obs - len(fixed), replace=False))
    points = fixed + [extra[i] for i in keep]
    return PositionSet(tuple(points), Provenance.GS, seed)


def iter_points(positions: Iterable[PositionSet]) -> Iterable[Point2]:
    for position_set in positions:
        yield from position_set.points
