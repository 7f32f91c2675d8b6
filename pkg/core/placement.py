"""条件数最小化による観測配置選択 (選択行列・拡大系・条件数・最小二乗再構成)。"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from functools import cached_property
from typing import Any, List, Optional, Sequence, Tuple

import numpy as np
from scipy import sparse

from .errors import PlacementError, ReconstructionError, SizeLimitError, ValidationError
from .fd_system import CoefficientSystem, Grid, ScalarField
from .sampling import PositionSet

logger = logging.getLogger(__name__)

# 密行列SVDで扱う未知数 (m + n) の上限
DENSE_SVD_LIMIT = 3000
# σ_min ≤ RANK_TOL·σ_max をランク落ちとみなす
RANK_TOL = 1e-12


@dataclass(frozen=True, eq=False)
class SelectionMatrix:
    """観測ノードを選ぶ 0/1 行列 (n_obs × (m + n))。熱源列のブロックは常に0。

    `position_rows[i]` は i 番目の観測位置が対応する行。重複ノードは1行にまとめられ、
    `multiplicity` にその個数が入る。
    """

    matrix: sparse.csr_matrix
    nodes: Tuple[int, ...]
    multiplicity: Tuple[int, ...]
    position_rows: Tuple[int, ...]

    @property
    def n_obs(self) -> int:
        return len(self.nodes)

    def aggregate(self, values: Any) -> np.ndarray:
        """観測位置ごとの値を行ごとの値にまとめる (重複ノードは平均)。"""
        values = np.asarray(values, dtype=float).reshape(-1)
        if values.shape[0] == self.n_obs:
            return values
        if values.shape[0] != len(self.position_rows):
            raise ValidationError(
                f"観測値の個数 {values.shape[0]} が観測位置数 {len(self.position_rows)} と一致しません"
            )
        sums = np.zeros(self.n_obs)
        np.add.at(sums, np.asarray(self.position_rows), values)
        return sums / np.asarray(self.multiplicity, dtype=float)


def snap_to_node(points: Any, grid: Grid) -> np.ndarray:
    """各座標を最近傍の格子ノードの線形インデックスに丸める。中間点は大きい側。"""
    points = np.asarray(points, dtype=float).reshape(-1, 2)
    scaled = points / grid.h
    cols = np.clip(np.floor(scaled[:, 0] + 0.5).astype(int), 0, grid.k - 1)
    rows = np.clip(np.floor(scaled[:, 1] + 0.5).astype(int), 0, grid.k - 1)
    return rows * grid.k + cols


def selection_from_positions(ps: PositionSet, grid: Grid, n_sources: int) -> SelectionMatrix:
    """観測位置集合から選択行列 Ô を作る。"""
    snapped = snap_to_node(ps.as_array(), grid)
    nodes: List[int] = []
    counts: List[int] = []
    position_rows: List[int] = []
    row_of = {}
    for node in snapped.tolist():
        if node not in row_of:
            row_of[node] = len(nodes)
            nodes.append(node)
            counts.append(0)
        counts[row_of[node]] += 1
        position_rows.append(row_of[node])
    collapsed = [(node, count) for node, count in zip(nodes, counts) if count > 1]
    if collapsed:
        logger.warning(
            "%d 個の観測位置が同じ格子ノードに丸められたため1行にまとめました: %s",
            sum(count - 1 for _, count in collapsed),
            ", ".join(f"node {node} x{count}" for node, count in collapsed),
        )
    n_rows = len(nodes)
    matrix = sparse.csr_matrix(
        (np.ones(n_rows), (np.arange(n_rows), np.asarray(nodes, dtype=int))),
        shape=(n_rows, grid.m + n_sources),
    )
    return SelectionMatrix(matrix, tuple(nodes), tuple(counts), tuple(position_rows))


@dataclass(frozen=True, eq=False)
class AugmentedSystem:
    """罰則法の拡大系 Â·T̂ ≈ Ĉ。Â = [λ(A1, −h²B); Ô]、Ĉ = (λC1, 観測値)。"""

    a_hat: np.ndarray
    c_hat: np.ndarray
    lam: float
    m: int
    n: int
    grid: Optional[Grid] = None

    @classmethod
    def from_dense(cls, matrix: Any, rhs: Any, lam: float = 1.0) -> "AugmentedSystem":
        """任意の密行列と右辺から作る (格子を持たない一般の最小二乗系)。"""
        a_hat = np.asarray(matrix, dtype=float)
        c_hat = np.asarray(rhs, dtype=float).reshape(-1)
        if a_hat.ndim != 2 or a_hat.shape[0] != c_hat.shape[0]:
            raise ValidationError(f"行列 {a_hat.shape} と右辺 {c_hat.shape} の次元が一致しません")
        return cls(a_hat, c_hat, float(lam), m=a_hat.shape[1], n=0)

    @property
    def shape(self) -> Tuple[int, int]:
        return self.a_hat.shape  # type: ignore[return-value]

    @cached_property
    def _svd(self) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
        _check_size(self.a_hat.shape[1])
        return np.linalg.svd(self.a_hat, full_matrices=False)

    @cached_property
    def _singular(self) -> np.ndarray:
        if "_svd" in self.__dict__:
            return self._svd[1]
        _check_size(self.a_hat.shape[1])
        return np.linalg.svd(self.a_hat, compute_uv=False)

    @property
    def kappa(self) -> float:
        if self.a_hat.shape[0] < self.a_hat.shape[1]:
            return math.inf
        return _kappa_from_singular(self._singular)


def _check_size(cols: int) -> None:
    if cols > DENSE_SVD_LIMIT:
        raise SizeLimitError(f"未知数 {cols} 個は密行列SVDの上限 {DENSE_SVD_LIMIT} を超えています")


def _kappa_from_singular(singular: np.ndarray) -> float:
    if singular.size == 0:
        return math.inf
    s_max, s_min = float(singular[0]), float(singular[-1])
    if s_max == 0.0 or s_min <= RANK_TOL * s_max:
        return math.inf
    return s_max / s_min


def augment(
    system: CoefficientSystem, sel: SelectionMatrix, obs_values: Any, lam: float = 1.0
) -> AugmentedSystem:
    """係数系と観測から拡大系を組み立てる。

    obs_values は選択行列の行ごと、または元の観測位置ごとの値 (重複ノードは平均) を受け付ける。

    Raises:
        ValidationError: λ ≤ 0 または次元が一致しない場合。
        SizeLimitError: m + n が密行列SVDの上限を超える場合。
    """
    if not lam > 0:
        raise ValidationError(f"λ は正でなければなりません (λ={lam})")
    m, n = system.m, system.n
    if sel.matrix.shape[1] != m + n:
        raise ValidationError(
            f"選択行列の列数 {sel.matrix.shape[1]} が m + n = {m + n} と一致しません"
        )
    _check_size(m + n)
    values = sel.aggregate(obs_values) if sel.n_obs else np.zeros(0)
    if not np.all(np.isfinite(values)):
        raise ValidationError("観測値に非有限値が含まれています")
    top = sparse.hstack([system.a1, -system.h2 * system.b]).toarray()
    a_hat = np.vstack([lam * top, sel.matrix.toarray()])
    c_hat = np.concatenate([lam * system.c1, values])
    return AugmentedSystem(a_hat, c_hat, float(lam), m=m, n=n, grid=system.grid)


def condition_number(matrix: Any) -> float:
    """2-ノルム条件数 σ_max/σ_min。ランク落ち (行数不足を含む) は +∞ を返す。"""
    if sparse.issparse(matrix):
        matrix = matrix.toarray()
    matrix = np.asarray(matrix, dtype=float)
    if matrix.ndim != 2:
        raise ValidationError("condition_number には2次元行列が必要です")
    rows, cols = matrix.shape
    if rows < cols:
        logger.debug("rows %d < cols %d: rank deficient", rows, cols)
        return math.inf
    _check_size(cols)
    return _kappa_from_singular(np.linalg.svd(matrix, compute_uv=False))


@dataclass(frozen=True, eq=False)
class PlacementCandidate:
    """評価済みの観測配置候補。"""

    positions: PositionSet
    selection: SelectionMatrix
    kappa: float


@dataclass(frozen=True)
class RankingEntry:
    """順位表の1行。"""

    candidate_id: int
    provenance: str
    n_obs: int
    kappa: float

    def to_row(self) -> List[str]:
        kappa = "inf" if math.isinf(self.kappa) else f"{self.kappa:.9e}"
        return [str(self.candidate_id), self.provenance, str(self.n_obs), kappa]


def evaluate_candidate(ps: PositionSet, system: CoefficientSystem, lam: float = 1.0) -> PlacementCandidate:
    """1つの候補の条件数を計算する。観測値は条件数に影響しないため0で埋める。"""
    sel = selection_from_positions(ps, system.grid, system.n)
    aug = augment(system, sel, np.zeros(sel.n_obs), lam)
    return PlacementCandidate(ps, sel, aug.kappa)


def select_positions(
    candidates: Sequence[PositionSet], system: CoefficientSystem, lam: float = 1.0
) -> Tuple[PlacementCandidate, List[RankingEntry]]:
    """全候補の条件数を評価し、最小のものを返す。同値なら先に現れた候補。

    Returns:
        (最良候補, 候補順の順位表)

    Raises:
        ValidationError: 候補が空の場合。
        PlacementError: 全候補の条件数が +∞ の場合。
    """
    if not candidates:
        raise ValidationError("候補が1つもありません")
    best: Optional[PlacementCandidate] = None
    ranking: List[RankingEntry] = []
    for candidate_id, ps in enumerate(candidates):
        evaluated = evaluate_candidate(ps, system, lam)
        logger.debug("candidate %d (%s): kappa=%.6e", candidate_id, ps.provenance.value, evaluated.kappa)
        ranking.append(
            RankingEntry(candidate_id, ps.provenance.value, evaluated.selection.n_obs, evaluated.kappa)
        )
        if math.isfinite(evaluated.kappa) and (best is None or evaluated.kappa < best.kappa):
            best = evaluated
    if best is None:
        raise PlacementError(f"{len(candidates)} 個の候補すべてで条件数が無限大です (識別不能)")
    winner = next(entry for entry in ranking if entry.kappa == best.kappa)
    logger.info(
        "最良配置: candidate %d (%s), n_obs=%d, kappa=%.6e",
        winner.candidate_id, winner.provenance, winner.n_obs, best.kappa,
    )
    return best, ranking


def solve_least_squares(aug: AugmentedSystem, rhs: Optional[Any] = None) -> np.ndarray:
    """SVD による最小ノルム最小二乗解を返す。

    Raises:
        ReconstructionError: Â がランク落ちしている場合。
    """
    u, s, vh = aug._svd
    if math.isinf(aug.kappa):
        raise ReconstructionError(f"拡大行列 {aug.shape} がランク落ちしているため再構成できません")
    c = aug.c_hat if rhs is None else np.asarray(rhs, dtype=float).reshape(-1)
    return vh.T @ ((u.T @ c) / s)


def least_squares_reconstruct(aug: AugmentedSystem) -> Tuple[ScalarField, np.ndarray]:
    """拡大系の最小二乗解から温度場 T と熱源強度 Y を取り出す。"""
    if aug.grid is None:
        raise ValidationError("格子を持たない拡大系からは温度場を再構成できません")
    x = solve_least_squares(aug)
    residual = aug.c_hat - aug.a_hat @ x
    scale = max(1e-300, float(np.linalg.norm(aug.a_hat)) * float(np.linalg.norm(residual)))
    logger.debug(
        "least squares: |r|=%.3e, |Aᵀr|/scale=%.3e",
        float(np.linalg.norm(residual)), float(np.linalg.norm(aug.a_hat.T @ residual)) / scale,
    )
    return ScalarField(aug.grid, x[: aug.m]), x[aug.m:]


@dataclass(frozen=True)
class BoundTrial:
    """誤差上界検証の1試行。relative_error が None のときは x̂ = 0 で未定義。"""

    perturbation_norm: float
    relative_error: Optional[float]
    bound: float
    relaxed_bound: float

    @property
    def holds(self) -> Optional[bool]:
        if self.relative_error is None:
            return None
        return self.relative_error <= self.bound


@dataclass(frozen=True)
class ErrorBoundReport:
    """相対誤差上界 ‖δx̂‖/‖x̂‖ ≤ (κ/cosθ)·‖δĈ‖/‖Ĉ‖ の検証結果。"""

    kappa: float
    cos_theta: float
    trials: Tuple[BoundTrial, ...] = field(default_factory=tuple)

    @property
    def all_hold(self) -> bool:
        return all(trial.holds is not False for trial in self.trials)

    @property
    def undefined(self) -> int:
        return sum(1 for trial in self.trials if trial.relative_error is None)

    @property
    def max_ratio(self) -> float:
        """観測された相対誤差と上界の比の最大値。"""
        ratios = [
            trial.relative_error / trial.bound
            for trial in self.trials
            if trial.relative_error is not None and trial.bound > 0
        ]
        return max(ratios, default=0.0)


def verify_error_bound(
    aug: AugmentedSystem,
    delta_c: Optional[Any] = None,
    trials: int = 0,
    *,
    seed: int = 0,
    relative_size: float = 1e-3,
) -> ErrorBoundReport:
    """右辺の摂動に対する最小二乗解の相対誤差が条件数の上界に収まるかを検証する。

    delta_c を与えるとその摂動で1試行を行い、さらに trials 回、‖Ĉ‖·relative_size の大きさの
    ランダム摂動で試行する。

    Raises:
        ValidationError: ‖Ĉ‖ = 0、または delta_c の長さが一致しない場合。
        ReconstructionError: Â がランク落ちしている場合。
    """
    c_norm = float(np.linalg.norm(aug.c_hat))
    if c_norm == 0.0:
        raise ValidationError("‖Ĉ‖ = 0 の系では相対誤差を定義できません")
    if trials < 0:
        raise ValidationError("trials は0以上が必要です")
    x = solve_least_squares(aug)
    kappa = aug.kappa
    x_norm = float(np.linalg.norm(x))
    cos_theta = float(np.linalg.norm(aug.a_hat @ x)) / c_norm

    perturbations: List[np.ndarray] = []
    if delta_c is not None:
        delta = np.asarray(delta_c, dtype=float).reshape(-1)
        if delta.shape != aug.c_hat.shape:
            raise ValidationError(f"δC の長さ {delta.shape[0]} が Ĉ の長さ {aug.c_hat.shape[0]} と一致しません")
        perturbations.append(delta)
    rng = np.random.default_rng(seed)
    for _ in range(trials):
        direction = rng.standard_normal(aug.c_hat.shape[0])
        perturbations.append(direction / np.linalg.norm(direction) * relative_size * c_norm)

    results: List[BoundTrial] = []
    for delta in perturbations:
        delta_norm = float(np.linalg.norm(delta))
        relaxed = kappa * delta_norm / c_norm * (1.0 + 1e-8)
        bound = relaxed / cos_theta if cos_theta > 0 else math.inf
        if x_norm == 0.0:
            logger.warning("x̂ = 0 のため相対誤差が定義できません")
            results.append(BoundTrial(delta_norm, None, bound, relaxed))
            continue
        dx = solve_least_squares(aug, aug.c_hat + delta) - x
        results.append(BoundTrial(delta_norm, float(np.linalg.norm(dx)) / x_norm, bound, relaxed))

    report = ErrorBoundReport(kappa, cos_theta, tuple(results))
    logger.debug(
        "error bound: kappa=%.3e cos_theta=%.6f trials=%d max_ratio=%.3e",
        kappa, cos_theta, len(results), report.max_ratio,
    )
    return report
