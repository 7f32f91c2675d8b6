"""定常熱伝導方程式の有限差分離散化 (A1, B, C1) と順解析ソルバ。"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from functools import cached_property
from typing import Any, List, Optional, Sequence, Tuple

import numpy as np
from scipy import sparse
from scipy.interpolate import RegularGridInterpolator
from scipy.sparse.linalg import splu

from .domain import BoundaryCondition, BoundaryKind, DomainSpec, Edge, source_membership
from .errors import SingularSystemError, SolveError, ValidationError

logger = logging.getLogger(__name__)

# 密行列での条件数推定を行う上限ノード数
_DENSE_ESTIMATE_LIMIT = 3000

_STRENGTH = {BoundaryKind.DIRICHLET: 2, BoundaryKind.ROBIN: 1, BoundaryKind.NEUMANN: 0}


def grid_index(row: int, col: int, k: int) -> int:
    """(row, col) を線形インデックス row·K + col に変換する。行は下から上、列は左から右。"""
    if not (0 <= row < k and 0 <= col < k):
        raise IndexError(f"格子インデックス ({row}, {col}) は K={k} の範囲外です")
    return row * k + col


def grid_position(index: int, k: int) -> Tuple[int, int]:
    """線形インデックスを (row, col) に戻す。"""
    if not 0 <= index < k * k:
        raise IndexError(f"線形インデックス {index} は K={k} の範囲外です")
    return divmod(index, k)


@dataclass(frozen=True)
class Grid:
    """境界ノードを含む K×K の一様格子。"""

    k: int
    length: float

    def __post_init__(self) -> None:
        if self.k < 3:
            raise ValidationError(f"K は3以上が必要です (K={self.k})")
        if not self.length > 0:
            raise ValidationError("格子の一辺長は正でなければなりません")

    @property
    def h(self) -> float:
        return self.length / (self.k - 1)

    @property
    def m(self) -> int:
        return self.k * self.k

    @property
    def axis(self) -> np.ndarray:
        return np.arange(self.k) * self.h

    def node_xy(self, index: int) -> Tuple[float, float]:
        row, col = grid_position(index, self.k)
        return (col * self.h, row * self.h)

    def coordinates(self) -> np.ndarray:
        """全ノードの (x, y) を線形インデックス順に (m, 2) で返す。"""
        rows, cols = np.divmod(np.arange(self.m), self.k)
        return np.column_stack([cols * self.h, rows * self.h])

    def matches(self, other: "Grid") -> bool:
        """同じ K と (丸め誤差の範囲で) 同じ一辺長を持つか。"""
        return self.k == other.k and math.isclose(self.length, other.length, rel_tol=1e-12)

    def boundary_ring(self) -> np.ndarray:
        """最外周ノードのブールマスクを返す。"""
        rows, cols = np.divmod(np.arange(self.m), self.k)
        last = self.k - 1
        return (rows == 0) | (rows == last) | (cols == 0) | (cols == last)


@dataclass(frozen=True, eq=False)
class ScalarField:
    """格子上の温度場 (K)。values は線形インデックス順。"""

    grid: Grid
    values: np.ndarray

    def __post_init__(self) -> None:
        values = np.array(self.values, dtype=float).reshape(-1)
        if values.shape[0] != self.grid.m:
            raise ValidationError(f"値の個数 {values.shape[0]} が K²={self.grid.m} と一致しません")
        if not np.all(np.isfinite(values)):
            raise ValidationError("温度場に非有限値が含まれています")
        values.setflags(write=False)
        object.__setattr__(self, "values", values)

    def as_matrix(self) -> np.ndarray:
        """(row, col) 形状 K×K の行列を返す。0行目が下端。"""
        return self.values.reshape(self.grid.k, self.grid.k)

    def sample(self, points: Any) -> np.ndarray:
        """任意座標の温度を双線形補間で返す。"""
        points = np.asarray(points, dtype=float).reshape(-1, 2)
        axis = self.grid.axis
        interpolator = RegularGridInterpolator((axis, axis), self.as_matrix(), method="linear")
        clipped = np.clip(points, 0.0, self.grid.length)
        return interpolator(clipped[:, ::-1])


@dataclass(frozen=True, eq=False)
class CoefficientSystem:
    """有限差分の係数系 A1·T = h²·B·Y + C1。"""

    a1: sparse.csr_matrix
    b: sparse.csr_matrix
    c1: np.ndarray
    grid: Grid
    interior_mask: np.ndarray
    conductivity: float

    @property
    def m(self) -> int:
        return self.grid.m

    @property
    def n(self) -> int:
        return self.b.shape[1]

    @property
    def h2(self) -> float:
        return self.grid.h ** 2

    @cached_property
    def _factor(self) -> Any:
        try:
            return splu(self.a1.tocsc())
        except RuntimeError as exc:
            raise SolveError(f"A1 の LU 分解に失敗しました: {exc}", _condition_estimate(self.a1)) from exc


def _node_edges(row: int, col: int, k: int) -> List[Edge]:
    edges: List[Edge] = []
    if row == 0:
        edges.append(Edge.BOTTOM)
    if row == k - 1:
        edges.append(Edge.TOP)
    if col == 0:
        edges.append(Edge.LEFT)
    if col == k - 1:
        edges.append(Edge.RIGHT)
    return edges


def _node_condition(spec: DomainSpec, grid: Grid, row: int, col: int, edges: Sequence[Edge]) -> BoundaryCondition:
    # 角ノードは Dirichlet > Robin > Neumann の順で強い条件を採用する
    best: Optional[BoundaryCondition] = None
    for edge in edges:
        s = col * grid.h if edge in (Edge.BOTTOM, Edge.TOP) else row * grid.h
        bc = spec.condition_at(edge, s)
        if best is None or _STRENGTH[bc.kind] > _STRENGTH[best.kind]:
            best = bc
    assert best is not None
    return best


def _condition_estimate(a1: sparse.spmatrix) -> float:
    if a1.shape[0] > _DENSE_ESTIMATE_LIMIT:
        return math.inf
    with np.errstate(all="ignore"):
        return float(np.linalg.cond(a1.toarray(), 1))


def assemble(spec: DomainSpec, k: int) -> CoefficientSystem:
    """DomainSpec を K×K 格子上で離散化し、A1, B, C1 を組み立てる。

    内部ノード行は k·(4t − Σ近傍) = h²φ、Dirichlet 行は t = T0、
    Neumann 行は t_b − t_in = 0、Robin 行は k(t_b − t_in)/d + h_conv(t_b − T0) = 0。

    Raises:
        ValidationError: K < 3 または非正方プレートの場合。
        SingularSystemError: Dirichlet/Robin のノードが1つも無い場合。
    """
    if abs(spec.lx - spec.ly) > spec.tolerance:
        raise ValidationError("有限差分格子は正方形プレート (lx == ly) のみ対応しています")
    grid = Grid(k, spec.lx)
    h = grid.h
    kappa = spec.conductivity
    m = grid.m
    rows: List[int] = []
    cols: List[int] = []
    vals: List[float] = []
    c1 = np.zeros(m)
    interior = np.zeros(m, dtype=bool)
    n_reference = 0

    for row in range(k):
        for col in range(k):
            idx = row * k + col
            edges = _node_edges(row, col, k)
            if not edges:
                interior[idx] = True
                rows.extend([idx] * 5)
                cols.extend([idx, idx - 1, idx + 1, idx - k, idx + k])
                vals.extend([4.0 * kappa, -kappa, -kappa, -kappa, -kappa])
                continue
            bc = _node_condition(spec, grid, row, col, edges)
            if bc.kind is BoundaryKind.DIRICHLET:
                rows.append(idx)
                cols.append(idx)
                vals.append(1.0)
                c1[idx] = float(bc.t0)  # type: ignore[arg-type]
                n_reference += 1
                continue
            inner_row = row + (1 if row == 0 else -1 if row == k - 1 else 0)
            inner_col = col + (1 if col == 0 else -1 if col == k - 1 else 0)
            inner = grid_index(inner_row, inner_col, k)
            if bc.kind is BoundaryKind.NEUMANN:
                rows.extend([idx, idx])
                cols.extend([idx, inner])
                vals.extend([1.0, -1.0])
                continue
            dist = h * math.sqrt(len(edges))
            h_conv = float(bc.h_conv)  # type: ignore[arg-type]
            rows.extend([idx, idx])
            cols.extend([idx, inner])
            vals.extend([kappa / dist + h_conv, -kappa / dist])
            c1[idx] = h_conv * float(bc.t0)  # type: ignore[arg-type]
            if h_conv > 0:
                n_reference += 1

    if n_reference == 0:
        raise SingularSystemError(
            f"K={k} の格子上に Dirichlet/Robin ノードがありません。定常問題が特異になります"
        )

    a1 = sparse.csr_matrix((vals, (rows, cols)), shape=(m, m))
    coords = grid.coordinates()
    owner = source_membership(spec, coords[:, 0], coords[:, 1])
    nodes = np.nonzero(owner >= 0)[0]
    b = sparse.csr_matrix(
        (np.ones(nodes.shape[0]), (nodes, owner[nodes])), shape=(m, spec.n_sources)
    )
    c1.setflags(write=False)
    interior.setflags(write=False)
    logger.debug(
        "assembled FD system: K=%d m=%d boundary=%d reference=%d source_nodes=%d",
        k, m, int(m - interior.sum()), n_reference, nodes.shape[0],
    )
    return CoefficientSystem(
        a1=a1, b=b, c1=c1, grid=grid, interior_mask=interior, conductivity=kappa
    )


def solve_forward(
    system: CoefficientSystem,
    intensities: Any,
    *,
    extra_source: Optional[Any] = None,
) -> ScalarField:
    """A1·T = h²·B·Y + C1 を直接法で解く。

    Args:
        system: assemble() の結果。
        intensities: 各熱源の強度 (W/m²)、長さ n。
        extra_source: 内部ノードに加える滑らかな発熱分布 (W/m²)、長さ m (任意)。

    Raises:
        ValidationError: 入力長が一致しない場合。
        SolveError: 分解の失敗または残差が許容値を超えた場合。
    """
    y = np.asarray(intensities, dtype=float).reshape(-1)
    if y.shape[0] != system.n:
        raise ValidationError(f"intensities の長さ {y.shape[0]} が熱源数 {system.n} と一致しません")
    rhs = system.h2 * (system.b @ y) + system.c1
    if extra_source is not None:
        q = np.asarray(extra_source, dtype=float).reshape(-1)
        if q.shape[0] != system.m:
            raise ValidationError(f"extra_source の長さ {q.shape[0]} が m={system.m} と一致しません")
        rhs = rhs + system.h2 * np.where(system.interior_mask, q, 0.0)
    t = system._factor.solve(rhs)
    if not np.all(np.isfinite(t)):
        raise SolveError("順解析の解に非有限値が含まれています", _condition_estimate(system.a1))
    residual = float(np.max(np.abs(system.a1 @ t - rhs)))
    tolerance = 1e-8 * max(1.0, float(np.max(np.abs(system.c1), initial=0.0)))
    logger.debug("forward solve residual=%.3e (tol=%.3e)", residual, tolerance)
    if residual > tolerance:
        raise SolveError(f"残差 {residual:.3e} が許容値 {tolerance:.3e} を超えました", _condition_estimate(system.a1))
    return ScalarField(system.grid, t)


def eliminate_boundary(system: CoefficientSystem) -> sparse.csr_matrix:
    """境界ノードの行と列を除いた内部ブロックを返す (検証用の変換)。"""
    inner = np.nonzero(system.interior_mask)[0]
    return system.a1[inner][:, inner].tocsr()
