"""結果ファイル (温度場・観測位置・順位表・チェックポイント・指標) の保存と読み込み。"""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import math
from pathlib import Path
from typing import Any, Dict, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np

from .diffnet import NetParams
from .errors import OutputConflictError, ValidationError
from .evaluation import MetricReport
from .fd_system import Grid, ScalarField
from .placement import PlacementCandidate, RankingEntry
from .sampling import PositionSet, Provenance

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]

CHECKPOINT_FORMAT = "tfi-util-netparams"
CHECKPOINT_VERSION = 1

POSITIONS_HEADER = ["x_m", "y_m"]
RANKING_HEADER = ["candidate_id", "provenance", "n_obs", "kappa"]
HISTORY_HEADER = ["iter", "total", "pde", "bc", "data"]
METRICS_HEADER = ["run_id", "mae", "cmae", "bmae", "mcae"]
PHI_HEADER = ["source", "phi_hat", "rated"]
FAILURES_HEADER = ["run_id", "error"]


def manifest_hash(manifest: Dict[str, Any]) -> str:
    """マニフェストの正規化JSONの SHA-256 を返す。"""
    canonical = json.dumps(manifest, sort_keys=True, separators=(",", ":"), ensure_ascii=False)
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()


def _fmt(value: float) -> str:
    return repr(float(value))


def _sig9(value: float) -> str:
    return f"{value:.9g}"


# ----- 温度場 ----------------------------------------------------------------


def write_field(path: PathLike, field: ScalarField, manifest: Optional[str] = None) -> None:
    """ヘッダ `K=<K> h=<h>` の後に、下の行から順に K 個ずつカンマ区切りで書き出す。"""
    header = f"K={field.grid.k} h={_fmt(field.grid.h)}"
    if manifest:
        header += f" manifest={manifest}"
    lines = [header]
    lines.extend(",".join(_fmt(v) for v in row) for row in field.as_matrix())
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_field(path: PathLike) -> Tuple[ScalarField, Optional[str]]:
    """温度場ファイルを読み込み、(場, マニフェストハッシュ) を返す。"""
    text = Path(path).read_text(encoding="utf-8").splitlines()
    if not text:
        raise ValidationError(f"{path}: 空のファイルです")
    tokens = dict(token.split("=", 1) for token in text[0].split() if "=" in token)
    try:
        k = int(tokens["K"])
        h = float(tokens["h"])
    except (KeyError, ValueError) as exc:
        raise ValidationError(f"{path}: ヘッダ行 '{text[0]}' が不正です") from exc
    rows = [line for line in text[1:] if line.strip()]
    if len(rows) != k:
        raise ValidationError(f"{path}: 行数 {len(rows)} が K={k} と一致しません")
    values = np.array([[float(v) for v in row.split(",")] for row in rows])
    grid = Grid(k, h * (k - 1))
    return ScalarField(grid, values.reshape(-1)), tokens.get("manifest")


# ----- CSV 共通 ----------------------------------------------------------------


def _write_csv(path: PathLike, header: Sequence[str], rows: Iterable[Sequence[str]], manifest: Optional[str]) -> None:
    with Path(path).open("w", encoding="utf-8", newline="") as outfile:
        if manifest:
            outfile.write(f"# manifest: {manifest}\n")
        writer = csv.writer(outfile)
        writer.writerow(header)
        writer.writerows(rows)


def _read_csv(path: PathLike, header: Sequence[str]) -> List[List[str]]:
    with Path(path).open("r", encoding="utf-8", newline="") as infile:
        lines = [line for line in infile if not line.startswith("#")]
    rows = list(csv.reader(lines))
    if not rows or rows[0] != list(header):
        raise ValidationError(f"{path}: ヘッダが {','.join(header)} ではありません")
    return [row for row in rows[1:] if row]


def read_manifest(path: PathLike) -> Optional[str]:
    """出力ファイルに記録されたマニフェストハッシュを返す。無ければ None。"""
    path = Path(path)
    if not path.exists():
        return None
    if path.suffix == ".json":
        try:
            return json.loads(path.read_text(encoding="utf-8")).get("manifest_hash")
        except (OSError, json.JSONDecodeError, AttributeError):
            return None
    with path.open("r", encoding="utf-8") as infile:
        first = infile.readline().strip()
    if first.startswith("# manifest:"):
        return first.split(":", 1)[1].strip()
    for token in first.split():
        if token.startswith("manifest="):
            return token.split("=", 1)[1]
    return None


# ----- 観測位置・順位表・配置結果 ------------------------------------------------


def write_positions(path: PathLike, positions: PositionSet, manifest: Optional[str] = None) -> None:
    rows = ([_sig9(p.x), _sig9(p.y)] for p in positions.points)
    _write_csv(path, POSITIONS_HEADER, rows, manifest)


def read_positions(path: PathLike, provenance: Provenance = Provenance.MANUAL) -> PositionSet:
    rows = _read_csv(path, POSITIONS_HEADER)
    try:
        coords = [(float(x), float(y)) for x, y in rows]
    except ValueError as exc:
        raise ValidationError(f"{path}: 座標が数値ではありません: {exc}") from exc
    return PositionSet.from_array(np.array(coords).reshape(-1, 2), provenance)


def write_ranking(path: PathLike, ranking: Sequence[RankingEntry], manifest: Optional[str] = None) -> None:
    """条件数の昇順 (同値は候補順) で順位表を書き出す。"""
    ordered = sorted(ranking, key=lambda entry: (entry.kappa, entry.candidate_id))
    _write_csv(path, RANKING_HEADER, (entry.to_row() for entry in ordered), manifest)


def read_ranking(path: PathLike) -> List[RankingEntry]:
    return [
        RankingEntry(int(cid), provenance, int(n_obs), math.inf if kappa == "inf" else float(kappa))
        for cid, provenance, n_obs, kappa in _read_csv(path, RANKING_HEADER)
    ]


def write_placement(
    path: PathLike,
    candidate: PlacementCandidate,
    candidate_id: int,
    manifest: Optional[str] = None,
    **extra: Any,
) -> None:
    """最良配置を JSON で書き出す。"""
    data: Dict[str, Any] = {
        "candidate_id": candidate_id,
        "provenance": candidate.positions.provenance.value,
        "n_obs": len(candidate.positions),
        "kappa": candidate.kappa,
        "positions": [[p.x, p.y] for p in candidate.positions.points],
        "snapped_nodes": list(candidate.selection.nodes),
    }
    data.update(extra)
    if manifest:
        data["manifest_hash"] = manifest
    _write_json(path, data)


def read_placement(path: PathLike) -> Tuple[PositionSet, float]:
    data = _read_json(path)
    try:
        positions = PositionSet.from_array(
            np.asarray(data["positions"], dtype=float).reshape(-1, 2), Provenance(data["provenance"])
        )
        return positions, float(data["kappa"])
    except (KeyError, ValueError) as exc:
        raise ValidationError(f"{path}: 配置ファイルの形式が不正です: {exc}") from exc


# ----- チェックポイント・学習結果 -------------------------------------------------


def write_checkpoint(path: PathLike, params: NetParams, manifest: Optional[str] = None) -> None:
    """パラメータを JSON で書き出す。重みは (fan_in, fan_out) の行優先。"""
    data: Dict[str, Any] = {"format": CHECKPOINT_FORMAT, "version": CHECKPOINT_VERSION}
    data.update(params.to_dict())
    if manifest:
        data["manifest_hash"] = manifest
    _write_json(path, data)


def read_checkpoint(path: PathLike) -> NetParams:
    data = _read_json(path)
    if data.get("format") != CHECKPOINT_FORMAT:
        raise ValidationError(f"{path}: チェックポイントではありません")
    if data.get("version") != CHECKPOINT_VERSION:
        raise ValidationError(f"{path}: 未対応のチェックポイント版数です: {data.get('version')}")
    return NetParams.from_dict(data)


def write_phi(
    path: PathLike, names: Sequence[str], phi_hat: Any, rated: Any, manifest: Optional[str] = None
) -> None:
    rows = ([name, _fmt(value), _fmt(r)] for name, value, r in zip(names, phi_hat, rated))
    _write_csv(path, PHI_HEADER, rows, manifest)


def write_history(path: PathLike, history: Any, manifest: Optional[str] = None) -> None:
    history = np.asarray(history, dtype=float).reshape(-1, 4)
    rows = ([str(i)] + [_sig9(v) for v in row] for i, row in enumerate(history))
    _write_csv(path, HISTORY_HEADER, rows, manifest)


def read_history(path: PathLike) -> np.ndarray:
    rows = _read_csv(path, HISTORY_HEADER)
    return np.array([[float(v) for v in row[1:]] for row in rows]).reshape(-1, 4)


# ----- 指標 --------------------------------------------------------------------


def write_metrics(path: PathLike, rows: Sequence[Tuple[str, MetricReport]], manifest: Optional[str] = None) -> None:
    _write_csv(path, METRICS_HEADER, (report.to_row(run_id) for run_id, report in rows), manifest)


def read_metrics(path: PathLike) -> List[Tuple[str, MetricReport]]:
    return [
        (run_id, MetricReport(float(mae), float(cmae), float(bmae), float(mcae)))
        for run_id, mae, cmae, bmae, mcae in _read_csv(path, METRICS_HEADER)
    ]


def write_failures(path: PathLike, failures: Dict[str, str], manifest: Optional[str] = None) -> None:
    """失敗したセルの run_id とエラーメッセージを書き出す。"""
    _write_csv(path, FAILURES_HEADER, ([run_id, error] for run_id, error in failures.items()), manifest)


def read_failures(path: PathLike) -> Dict[str, str]:
    return {run_id: error for run_id, error in _read_csv(path, FAILURES_HEADER)}


def _write_json(path: PathLike, data: Dict[str, Any]) -> None:
    with Path(path).open("w", encoding="utf-8") as outfile:
        json.dump(data, outfile, ensure_ascii=False, indent=2)


def _read_json(path: PathLike) -> Dict[str, Any]:
    try:
        with Path(path).open("r", encoding="utf-8") as infile:
            data = json.load(infile)
    except (OSError, json.JSONDecodeError) as exc:
        raise ValidationError(f"{path}: JSONの読み込みに失敗しました: {exc}") from exc
    if not isinstance(data, dict):
        raise ValidationError(f"{path}: JSONオブジェクトではありません")
    return data


class ResultRepository:
    """1つの出力ディレクトリへの結果保存を扱う。全ファイルにマニフェストハッシュを記録する。"""

    def __init__(self, out_dir: PathLike, manifest: str) -> None:
        self.out_dir = Path(out_dir)
        self.manifest = manifest

    def path(self, name: str) -> Path:
        return self.out_dir / name

    def prepare(self, names: Iterable[str]) -> None:
        """出力ディレクトリを作り、既存ファイルのマニフェストが異なれば拒否する。"""
        self.out_dir.mkdir(parents=True, exist_ok=True)
        for name in names:
            existing = read_manifest(self.path(name))
            if existing is not None and existing != self.manifest:
                raise OutputConflictError(
                    f"{self.path(name)} は別のマニフェスト ({existing[:12]}…) の結果です。"
                    " 出力先を変えるかファイルを削除してください"
                )

    def is_complete(self, names: Iterable[str]) -> bool:
        """全ファイルが同じマニフェストで存在するか。"""
        return all(read_manifest(self.path(name)) == self.manifest for name in names)

    def save_field(self, name: str, field: ScalarField) -> Path:
        write_field(self.path(name), field, self.manifest)
        return self.path(name)

    def save_positions(self, name: str, positions: PositionSet) -> Path:
        write_positions(self.path(name), positions, self.manifest)
        return self.path(name)

    def save_ranking(self, name: str, ranking: Sequence[RankingEntry]) -> Path:
        write_ranking(self.path(name), ranking, self.manifest)
        return self.path(name)

    def save_placement(self, name: str, candidate: PlacementCandidate, candidate_id: int) -> Path:
        write_placement(self.path(name), candidate, candidate_id, self.manifest)
        return self.path(name)

    def save_checkpoint(self, name: str, params: NetParams) -> Path:
        write_checkpoint(self.path(name), params, self.manifest)
        return self.path(name)

    def save_phi(self, name: str, names: Sequence[str], phi_hat: Any, rated: Any) -> Path:
        write_phi(self.path(name), names, phi_hat, rated, self.manifest)
        return self.path(name)

    def save_history(self, name: str, history: Any) -> Path:
        write_history(self.path(name), history, self.manifest)
        return self.path(name)

    def save_metrics(self, name: str, rows: Sequence[Tuple[str, MetricReport]]) -> Path:
        write_metrics(self.path(name), rows, self.manifest)
        return self.path(name)

    def save_manifest(self, name: str, manifest: Dict[str, Any]) -> Path:
        _write_json(self.path(name), dict(manifest, manifest_hash=self.manifest))
        return self.path(name)
