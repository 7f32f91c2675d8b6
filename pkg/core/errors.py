"""tfi-util 共通の例外階層。"""

from __future__ import annotations

from typing import Optional


class TfiError(RuntimeError):
    """tfi-util が送出する例外の基底クラス。"""


class ValidationError(TfiError, ValueError):
    """入力値・不変条件の検証に失敗した。"""


class ConfigError(ValidationError):
    """設定ファイルの解釈に失敗した。`key` に問題のあるキーを保持する。"""

    def __init__(self, key: str, message: str) -> None:
        super().__init__(f"設定キー '{key}': {message}")
        self.key = key


class DomainViolationError(ValidationError):
    """点がプレート領域の外にある。"""


class SizeLimitError(ValidationError):
    """密行列SVDの上限サイズを超えた。"""


class MetricError(ValidationError):
    """評価指標が定義できない (例: 熱源ノードが存在しない)。"""


class SingularSystemError(TfiError):
    """定常問題が特異 (Dirichlet/Robin 境界ノードが存在しない)。"""


class SolveError(TfiError):
    """順解析の線形ソルブに失敗した。"""

    def __init__(self, message: str, condition_estimate: Optional[float] = None) -> None:
        if condition_estimate is not None:
            message = f"{message} (条件数推定値: {condition_estimate:.3e})"
        super().__init__(message)
        self.condition_estimate = condition_estimate


class PlacementError(TfiError):
    """識別可能な観測配置が1つも無い (全候補の条件数が無限大)。"""


class ReconstructionError(TfiError):
    """拡大行列がランク落ちしており最小二乗再構成ができない。"""


class OptimizerError(TfiError):
    """オプティマイザに非有限な勾配が渡された。"""


class TrainingError(TfiError):
    """学習が発散した。`iteration` に発散したイテレーションを保持する。"""

    def __init__(self, message: str, iteration: int) -> None:
        super().__init__(f"{message} (iteration={iteration})")
        self.iteration = iteration


class OutputConflictError(TfiError):
    """出力先に異なるマニフェストの結果が既に存在する。"""


__all__ = [
    "ConfigError",
    "DomainViolationError",
    "MetricError",
    "OptimizerError",
    "OutputConflictError",
    "PlacementError",
    "ReconstructionError",
    "SingularSystemError",
    "SizeLimitError",
    "SolveError",
    "TfiError",
    "TrainingError",
    "ValidationError",
]
