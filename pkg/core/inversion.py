"""PINN による温度場逆解析: 定格強度での事前学習、転移、観測データを用いた逆解析学習。"""

from __future__ import annotations

import logging
import time
from dataclasses import asdict, dataclass, field, replace
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy.stats import qmc

from .diffnet import (
    DEFAULT_WIDTHS,
    BoundaryBatch,
    InitScheme,
    LossBatches,
    LossScales,
    LossWeights,
    NetParams,
    OptState,
    Scaling,
    eval_jet,
    init_params,
    loss_and_grads,
    opt_step,
)
from .domain import DomainSpec, Edge, membership_matrix
from .errors import OptimizerError, TrainingError, ValidationError
from .fd_system import Grid, ScalarField
from .sampling import PositionSet, qmc_engine

logger = logging.getLogger(__name__)

ARCHITECTURES: Dict[str, Tuple[int, ...]] = {
    "nn1": DEFAULT_WIDTHS,
    "nn2": (2, 100, 100, 100, 100, 1),
    "nn3": (2, 50, 50, 50, 50, 50, 1),
    "nn4": (2, 50, 50, 50, 1),
}

WEIGHT_PRESETS: Dict[str, LossWeights] = {
    "w1": LossWeights(1.0, 1.0, 1e4),
    "w2": LossWeights(1.0, 1.0, 1e2),
    "w3": LossWeights(1.0, 1.0, 1e6),
    "w4": LossWeights(1.0, 1e2, 1e4),
    "w5": LossWeights(1e2, 1.0, 1e4),
}


@dataclass(frozen=True)
class TrainConfig:
    """学習設定。pde_scale/flux_scale が None のときは熱伝導率と寸法から既定値を決める。"""

    weights: LossWeights = field(default_factory=LossWeights)
    iterations: int = 5000
    learning_rate: float = 1e-3
    n_interior: int = 4000
    n_per_edge: int = 100
    seed: int = 0
    phi_trainable: bool = True
    init: InitScheme = InitScheme.TRANSFER
    widths: Tuple[int, ...] = DEFAULT_WIDTHS
    pde_scale: Optional[float] = None
    flux_scale: Optional[float] = None
    log_every: int = 500

    def __post_init__(self) -> None:
        object.__setattr__(self, "init", InitScheme(self.init))
        object.__setattr__(self, "widths", tuple(int(w) for w in self.widths))
        if self.iterations < 1:
            raise ValidationError("iterations は1以上が必要です")
        if self.n_interior < 1 or self.n_per_edge < 1:
            raise ValidationError("コロケーション点数は1以上が必要です")
        if not self.learning_rate > 0:
            raise ValidationError("learning_rate は正でなければなりません")
        for name in ("pde_scale", "flux_scale"):
            value = getattr(self, name)
            if value is not None and not value > 0:
                raise ValidationError(f"{name} は正でなければなりません")

    @classmethod
    def from_presets(cls, architecture: str = "nn1", weights: str = "w1", **overrides: Any) -> "TrainConfig":
        try:
            widths = ARCHITECTURES[architecture.lower()]
        except KeyError as exc:
            raise ValidationError(f"未知のアーキテクチャです: {architecture}") from exc
        try:
            loss_weights = WEIGHT_PRESETS[weights.lower()]
        except KeyError as exc:
            raise ValidationError(f"未知の重みプリセットです: {weights}") from exc
        return cls(weights=loss_weights, widths=widths, **overrides)

    def scales(self, spec: DomainSpec) -> LossScales:
        default = LossScales.default(spec.conductivity, spec.lx, spec.ly)
        return LossScales(
            pde=self.pde_scale if self.pde_scale is not None else default.pde,
            flux=self.flux_scale if self.flux_scale is not None else default.flux,
        )

    def to_dict(self) -> Dict[str, Any]:
        data = asdict(self)
        data["init"] = self.init.value
        data["widths"] = list(self.widths)
        return data


@dataclass(frozen=True, eq=False)
class InversionResult:
    """学習結果。history は各イテレーションの (total, pde, bc, data)。"""

    params: NetParams
    phi_hat: np.ndarray
    history: np.ndarray
    wall_time: float

    @property
    def final_loss(self) -> float:
        return float(self.history[-1, 0])


# ----- 残差 --------------------------------------------------------------------


def pde_residual(
    params: NetParams,
    phi_field: Callable[[np.ndarray], np.ndarray],
    points: Any,
    conductivity: float,
) -> np.ndarray:
    """k(∂xx + ∂yy)T_θ + φ を物理単位 (W/m³ 相当) で返す。"""
    points = np.asarray(points, dtype=float).reshape(-1, 2)
    jet = eval_jet(params, points)
    return conductivity * jet.laplacian + np.asarray(phi_field(points), dtype=float).reshape(-1)


def phi_field_of(spec: DomainSpec, phi: Any, *, normalized: bool = True) -> Callable[[np.ndarray], np.ndarray]:
    """熱源ごとの強度ベクトルから発熱分布 φ(p) の評価関数を作る。"""
    phi = np.asarray(phi, dtype=float).reshape(-1)
    intensities = phi * spec.rated_intensities() if normalized else phi

    def evaluate(points: np.ndarray) -> np.ndarray:
        return membership_matrix(spec, points) @ intensities

    return evaluate


# ----- コロケーション点 --------------------------------------------------------


def collocation_sets(spec: DomainSpec, cfg: TrainConfig, seed: int) -> Tuple[np.ndarray, Dict[Edge, np.ndarray]]:
    """内部点 (LHS) と各辺の等間隔境界点を作る。学習中は固定。"""
    engine = qmc_engine(qmc.LatinHypercube, np.random.default_rng(seed), d=2, scramble=True)
    unit = engine.random(cfg.n_interior)
    # 境界上の点は内部点に含めない
    unit = np.clip(unit, 1e-9, 1.0 - 1e-9)
    interior = unit * np.array([spec.lx, spec.ly])
    s = (np.arange(cfg.n_per_edge) + 0.5) / cfg.n_per_edge
    edges = {
        Edge.BOTTOM: np.column_stack([s * spec.lx, np.zeros_like(s)]),
        Edge.TOP: np.column_stack([s * spec.lx, np.full_like(s, spec.ly)]),
        Edge.LEFT: np.column_stack([np.zeros_like(s), s * spec.ly]),
        Edge.RIGHT: np.column_stack([np.full_like(s, spec.lx), s * spec.ly]),
    }
    return interior, edges


def build_batches(spec: DomainSpec, cfg: TrainConfig) -> LossBatches:
    """コロケーション点を境界条件ごとにまとめ、損失の評価点集合を作る。"""
    interior, edges = collocation_sets(spec, cfg, cfg.seed)
    boundary: List[BoundaryBatch] = []
    for edge, points in edges.items():
        coords = points[:, 0] if edge in (Edge.BOTTOM, Edge.TOP) else points[:, 1]
        conditions = [spec.condition_at(edge, float(s)) for s in coords]
        for bc in dict.fromkeys(conditions):
            mask = np.array([c == bc for c in conditions])
            boundary.append(
                BoundaryBatch(
                    points=points[mask],
                    kind=bc.kind,
                    normal=edge.outward_normal,
                    t0=float(bc.t0) if bc.t0 is not None else 0.0,
                    h_conv=float(bc.h_conv) if bc.h_conv is not None else 0.0,
                )
            )
    source_matrix = membership_matrix(spec, interior) * spec.rated_intensities()[None, :]
    return LossBatches(interior=interior, source_matrix=source_matrix, boundary=tuple(boundary))


# ----- 学習 --------------------------------------------------------------------


def train(
    spec: DomainSpec,
    params: NetParams,
    phi: Any,
    batches: LossBatches,
    cfg: TrainConfig,
    *,
    phi_trainable: bool,
    label: str = "train",
) -> InversionResult:
    """全バッチ勾配で cfg.iterations 回 Adam を回す。φ は定格比で扱う。

    Raises:
        TrainingError: 損失が NaN になった、または勾配が非有限になった場合。
    """
    phi = np.asarray(phi, dtype=float).reshape(-1)
    scales = cfg.scales(spec)
    state = OptState.create(params, phi, cfg.learning_rate)
    history = np.zeros((cfg.iterations, 4))
    started = time.perf_counter()
    for iteration in range(cfg.iterations):
        loss, grad_theta, grad_phi = loss_and_grads(
            params, phi, batches, cfg.weights, spec.conductivity, scales
        )
        if not np.isfinite(loss.total):
            raise TrainingError(f"{label}: 損失が発散しました", iteration)
        history[iteration] = loss.as_tuple()
        try:
            state, params, phi = opt_step(
                state, params, phi, grad_theta, grad_phi, phi_trainable=phi_trainable
            )
        except OptimizerError as exc:
            raise TrainingError(f"{label}: {exc}", iteration) from exc
        if cfg.log_every and (iteration + 1) % cfg.log_every == 0:
            logger.info(
                "%s iter %d/%d: total=%.4e pde=%.4e bc=%.4e data=%.4e",
                label, iteration + 1, cfg.iterations, *loss.as_tuple(),
            )
    elapsed = time.perf_counter() - started
    return InversionResult(params, phi * spec.rated_intensities(), history, elapsed)


def run_pretrain(spec: DomainSpec, cfg: TrainConfig) -> InversionResult:
    """定格強度 φ_rated で PDE 損失と BC 損失のみを最小化する (観測データは使わない)。"""
    params = init_params(
        cfg.widths, InitScheme.XAVIER, cfg.seed, scaling=Scaling(spec.lx, spec.ly)
    )
    batches = build_batches(spec, cfg)
    pretrain_cfg = replace(cfg, weights=replace(cfg.weights, data=0.0))
    logger.info("pretrain: widths=%s iterations=%d", list(cfg.widths), cfg.iterations)
    return train(
        spec, params, np.ones(spec.n_sources), batches, pretrain_cfg,
        phi_trainable=False, label="pretrain",
    )


def pretrain(spec: DomainSpec, cfg: TrainConfig) -> NetParams:
    """事前学習済みパラメータ θ* を返す。"""
    return run_pretrain(spec, cfg).params


def invert(
    spec: DomainSpec,
    pretrained: Optional[NetParams],
    observations: Tuple[PositionSet, Any],
    cfg: TrainConfig,
    *,
    init_seed: Optional[int] = None,
) -> InversionResult:
    """観測データを加えた損失で θ と φ を同時に学習する。φ は定格値から始める。

    Args:
        spec: 領域定義。
        pretrained: 事前学習済みパラメータ (cfg.init が transfer のとき使用)。
        observations: 観測位置と観測温度 (K)。
        cfg: 学習設定。
        init_seed: Xavier 初期化のシード。None なら cfg.seed。

    Raises:
        ValidationError: 観測値が非有限、または w_data > 0 で観測が0件の場合。
        TrainingError: 学習が発散した場合。
    """
    positions, values = observations
    values = np.asarray(values, dtype=float).reshape(-1)
    if values.shape[0] != len(positions):
        raise ValidationError(f"観測値の個数 {values.shape[0]} が観測位置数 {len(positions)} と一致しません")
    if not np.all(np.isfinite(values)):
        raise ValidationError("観測値に非有限値が含まれています")
    if len(positions) == 0 and cfg.weights.data > 0:
        raise ValidationError("w_data > 0 ですが観測が0件です")
    positions.check_within(spec)

    if cfg.init is InitScheme.TRANSFER:
        if pretrained is None:
            raise ValidationError("transfer 初期化には事前学習済みパラメータが必要です")
        params = init_params(cfg.widths, InitScheme.TRANSFER, source=pretrained)
    else:
        seed = cfg.seed if init_seed is None else init_seed
        params = init_params(cfg.widths, InitScheme.XAVIER, seed, scaling=Scaling(spec.lx, spec.ly))
    batches = build_batches(spec, cfg).with_data(positions.as_array(), values)
    logger.info(
        "invert: n_obs=%d init=%s phi_trainable=%s", len(positions), cfg.init.value, cfg.phi_trainable
    )
    result = train(
        spec, params, np.ones(spec.n_sources), batches, cfg,
        phi_trainable=cfg.phi_trainable, label="invert",
    )
    logger.info("invert: phi_hat=%s", np.array2string(result.phi_hat, precision=1))
    return result


def evaluate_field(params: NetParams, grid: Grid) -> ScalarField:
    """サロゲートを格子ノード上で評価する。"""
    return ScalarField(grid, eval_jet(params, grid.coordinates()).value)
