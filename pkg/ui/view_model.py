"""スイープ結果 (metrics.csv) の表示用ビューモデル。"""

from __future__ import annotations

import logging
import re
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from core.evaluation import MetricReport
from core.repository import read_failures, read_metrics

logger = logging.getLogger(__name__)

_RUN_ID = re.compile(r"^n(?P<n>\d+)_(?P<strategy>.+)_eps(?P<eps>[^_]+)_s(?P<seed>-?\d+)$")

GroupKey = Tuple[int, str, float]


@dataclass(frozen=True)
class ResultRow:
    run_id: str
    n_obs: Optional[int]
    strategy: str
    eps: Optional[float]
    seed: Optional[int]
    report: MetricReport

    @classmethod
    def parse(cls, run_id: str, report: MetricReport) -> "ResultRow":
        match = _RUN_ID.match(run_id)
        if match is None:
            return cls(run_id, None, "-", None, None, report)
        try:
            eps = float(match.group("eps"))
        except ValueError:
            return cls(run_id, None, "-", None, None, report)
        return cls(
            run_id,
            int(match.group("n")),
            match.group("strategy"),
            eps,
            int(match.group("seed")),
            report,
        )

    def group_key(self) -> Optional[GroupKey]:
        if self.n_obs is None or self.eps is None:
            return None
        return (self.n_obs, self.strategy, self.eps)


@dataclass(frozen=True)
class GroupSummary:
    """同一 (観測数, 戦略, ノイズ) のシード横断集計。"""

    n_obs: int
    strategy: str
    eps: float
    count: int
    mae_mean: float
    mae_std: float
    cmae_mean: float
    mcae_max: float

    def label(self) -> str:
        return f"n={self.n_obs} {self.strategy} eps={self.eps:g}"


class SweepResultsViewModel:
    """metrics.csv / failures.csv を読み込み、一覧と集計を提供する。"""

    def __init__(self, rows: Sequence[Tuple[str, MetricReport]] = (), failures: Optional[Dict[str, str]] = None) -> None:
        self.rows: List[ResultRow] = [ResultRow.parse(run_id, report) for run_id, report in rows]
        self.failures: Dict[str, str] = dict(failures or {})
        self.selected_index: int = 0 if self.rows else -1

    @classmethod
    def from_files(
        cls,
        metrics_path: Union[str, Path],
        failures_path: Optional[Union[str, Path]] = None,
    ) -> "SweepResultsViewModel":
        rows = read_metrics(metrics_path)
        failures: Dict[str, str] = {}
        if failures_path is not None and Path(failures_path).exists():
            failures = read_failures(failures_path)
        logger.debug("loaded %d rows and %d failures from %s", len(rows), len(failures), metrics_path)
        return cls(rows, failures)

    # ----- 選択ヘルパー ---------------------------------------------------
    def row_count(self) -> int:
        return len(self.rows)

    def select_by_index(self, index: int) -> None:
        if not self.rows:
            self.selected_index = -1
            return
        self.selected_index = max(0, min(index, len(self.rows) - 1))

    def select_by_run_id(self, run_id: str) -> None:
        for idx, row in enumerate(self.rows):
            if row.run_id == run_id:
                self.selected_index = idx
                return
        self.selected_index = 0 if self.rows else -1

    def current_row(self) -> Optional[ResultRow]:
        if not self.rows or self.selected_index < 0:
            return None
        return self.rows[min(self.selected_index, len(self.rows) - 1)]

    # ----- 表示用派生データ ----------------------------------------------
    def info_values(self) -> Dict[str, str]:
        row = self.current_row()
        if row is None:
            return {}
        return {
            "Run": row.run_id,
            "観測数": str(row.n_obs) if row.n_obs is not None else "―",
            "配置戦略": row.strategy,
            "ノイズ": f"{row.eps:g}" if row.eps is not None else "―",
            "シード": str(row.seed) if row.seed is not None else "―",
            "MAE [K]": f"{row.report.mae:.4g}",
            "CMAE [K]": f"{row.report.cmae:.4g}",
            "BMAE [K]": f"{row.report.bmae:.4g}",
            "MCAE [K]": f"{row.report.mcae:.4g}",
        }

    def list_entries(self) -> List[Tuple[str, bool]]:
        """(表示テキスト, 失敗フラグ) の一覧。失敗セルは末尾に並べる。"""
        entries = [(f"{row.run_id}  MAE={row.report.mae:.4g} K", False) for row in self.rows]
        entries.extend((f"{run_id}  失敗: {error}", True) for run_id, error in sorted(self.failures.items()))
        return entries

    def group_summaries(self) -> List[GroupSummary]:
        groups: Dict[GroupKey, List[MetricReport]] = {}
        for row in self.rows:
            key = row.group_key()
            if key is None:
                continue
            groups.setdefault(key, []).append(row.report)

        summaries = []
        for (n_obs, strategy, eps), reports in sorted(groups.items()):
            mae = np.array([report.mae for report in reports])
            summaries.append(
                GroupSummary(
                    n_obs=n_obs,
                    strategy=strategy,
                    eps=eps,
                    count=len(reports),
                    mae_mean=float(mae.mean()),
                    mae_std=float(mae.std()),
                    cmae_mean=float(np.mean([report.cmae for report in reports])),
                    mcae_max=float(max(report.mcae for report in reports)),
                )
            )
        return summaries

    def best_strategy(self, n_obs: int, eps: float) -> Optional[str]:
        """指定条件で平均 MAE が最小の戦略。"""
        candidates = [s for s in self.group_summaries() if s.n_obs == n_obs and np.isclose(s.eps, eps)]
        if not candidates:
            return None
        return min(candidates, key=lambda s: s.mae_mean).strategy

    def summary_text(self) -> str:
        lines = [f"{len(self.rows)} 件完了 / {len(self.failures)} 件失敗"]
        for summary in self.group_summaries():
            lines.append(
                f"{summary.label()}: MAE {summary.mae_mean:.4g} ± {summary.mae_std:.2g} K "
                f"(CMAE {summary.cmae_mean:.4g}, MCAE max {summary.mcae_max:.4g}, runs={summary.count})"
            )
        return "\n".join(lines)
