"""再構成温度場の誤差指標と観測ノイズモデル。"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Any, List

import numpy as np

from .domain import DomainSpec, source_membership
from .errors import MetricError, ValidationError
from .fd_system import ScalarField

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class MetricReport:
    """MAE (全体)、CMAE (熱源領域)、BMAE (最外周)、MCAE (最大) [K]。"""

    mae: float
    cmae: float
    bmae: float
    mcae: float

    def to_row(self, run_id: str) -> List[str]:
        return [run_id] + [f"{value:.9g}" for value in (self.mae, self.cmae, self.bmae, self.mcae)]


def metrics(pred: ScalarField, truth: ScalarField, spec: DomainSpec) -> MetricReport:
    """予測場と真値場の誤差指標を計算する。

    Raises:
        ValidationError: 格子が一致しない場合。
        MetricError: 熱源に含まれる格子ノードが無く CMAE が定義できない場合。
    """
    if not pred.grid.matches(truth.grid):
        raise ValidationError(f"格子が一致しません: {pred.grid} / {truth.grid}")
    error = np.abs(pred.values - truth.values)
    coords = truth.grid.coordinates()
    in_source = source_membership(spec, coords[:, 0], coords[:, 1]) >= 0
    if not np.any(in_source):
        raise MetricError("熱源に含まれる格子ノードが無いため CMAE を定義できません")
    ring = truth.grid.boundary_ring()
    return MetricReport(
        mae=float(np.mean(error)),
        cmae=float(np.mean(error[in_source])),
        bmae=float(np.mean(error[ring])),
        mcae=float(np.max(error)),
    )


def add_noise(values: Any, eps: float, seed: int) -> np.ndarray:
    """乗法ガウスノイズ T·(1 + ε·g) を加える。g は seed から生成する標準正規乱数。"""
    if eps < 0:
        raise ValidationError(f"ε は0以上が必要です (ε={eps})")
    values = np.asarray(values, dtype=float).reshape(-1)
    g = np.random.default_rng(seed).standard_normal(values.shape[0])
    return values * (1.0 + eps * g)
