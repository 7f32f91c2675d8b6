"""YAML設定ファイル (領域定義・学習設定) の読み込み。"""

from __future__ import annotations

import logging
import math
from pathlib import Path
from typing import Any, Dict, List, Mapping, Optional, Sequence, Tuple, Union

import yaml

from .diffnet import LossWeights
from .domain import (
    BoundaryCondition,
    BoundaryKind,
    CaseId,
    DomainSpec,
    Edge,
    HeatSource,
    PLATE_SIZE,
    Point2,
    case_preset,
)
from .errors import ConfigError, ValidationError
from .inversion import ARCHITECTURES, WEIGHT_PRESETS, TrainConfig

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]

_TRAIN_KEYS = {
    "architecture",
    "weights",
    "iterations",
    "learning_rate",
    "n_interior",
    "n_per_edge",
    "seed",
    "phi_trainable",
    "init",
    "widths",
    "pde_scale",
    "flux_scale",
    "log_every",
}


def load_yaml(path: PathLike) -> Dict[str, Any]:
    """YAMLファイルを読み込み、トップレベルのマッピングを返す。"""
    path = Path(path)
    try:
        with path.open("r", encoding="utf-8") as infile:
            data = yaml.safe_load(infile)
    except OSError as exc:
        raise ConfigError(str(path), f"読み込みに失敗しました: {exc}") from exc
    except yaml.YAMLError as exc:
        raise ConfigError(str(path), f"YAMLの構文エラー: {exc}") from exc
    if data is None:
        data = {}
    if not isinstance(data, dict):
        raise ConfigError(str(path), "トップレベルはマッピングでなければなりません")
    return data


# ----- 値の取り出し ----------------------------------------------------------


def _join(parent: str, child: Union[str, int]) -> str:
    if isinstance(child, int):
        return f"{parent}[{child}]"
    return f"{parent}.{child}" if parent else child


def _mapping(value: Any, key: str) -> Mapping[str, Any]:
    if not isinstance(value, Mapping):
        raise ConfigError(key, "マッピングが必要です")
    return value


def _sequence(value: Any, key: str) -> Sequence[Any]:
    if not isinstance(value, (list, tuple)):
        raise ConfigError(key, "リストが必要です")
    return value


def _require(data: Mapping[str, Any], name: str, parent: str) -> Any:
    if name not in data:
        raise ConfigError(_join(parent, name), "必須キーがありません")
    return data[name]


def as_float(value: Any, key: str) -> float:
    if isinstance(value, bool):
        raise ConfigError(key, f"数値が必要です: {value!r}")
    try:
        number = float(value)
    except (TypeError, ValueError) as exc:
        raise ConfigError(key, f"数値が必要です: {value!r}") from exc
    if not math.isfinite(number):
        raise ConfigError(key, f"有限の数値が必要です: {value!r}")
    return number


def as_int(value: Any, key: str) -> int:
    if isinstance(value, bool) or not isinstance(value, (int, float)) or int(value) != value:
        raise ConfigError(key, f"整数が必要です: {value!r}")
    return int(value)


def _pair(value: Any, key: str) -> Tuple[float, float]:
    items = _sequence(value, key)
    if len(items) != 2:
        raise ConfigError(key, "2要素のリストが必要です")
    return as_float(items[0], _join(key, 0)), as_float(items[1], _join(key, 1))


def parse_points(value: Any, key: str) -> List[Point2]:
    return [Point2(*_pair(item, _join(key, i))) for i, item in enumerate(_sequence(value, key))]


# ----- 領域定義 --------------------------------------------------------------


def _parse_condition(data: Any, key: str) -> BoundaryCondition:
    data = _mapping(data, key)
    try:
        kind = BoundaryKind(_require(data, "kind", key))
    except ValueError as exc:
        raise ConfigError(_join(key, "kind"), f"dirichlet/neumann/robin のいずれかが必要です: {data['kind']!r}") from exc
    t0 = as_float(data["t0"], _join(key, "t0")) if "t0" in data else None
    h_conv = as_float(data["h_conv"], _join(key, "h_conv")) if "h_conv" in data else None
    segment = _pair(data["segment"], _join(key, "segment")) if "segment" in data else None
    try:
        return BoundaryCondition(kind, t0=t0, h_conv=h_conv, segment=segment)
    except ValidationError as exc:
        raise ConfigError(key, str(exc)) from exc


def _parse_boundaries(
    data: Any, key: str, lx: float, ly: float
) -> Dict[Edge, Tuple[BoundaryCondition, ...]]:
    data = _mapping(data, key)
    boundaries: Dict[Edge, Tuple[BoundaryCondition, ...]] = {}
    for name, conditions in data.items():
        edge_key = _join(key, str(name))
        try:
            edge = Edge(name)
        except ValueError as exc:
            raise ConfigError(edge_key, "bottom/right/top/left のいずれかが必要です") from exc
        if isinstance(conditions, Mapping):
            conditions = [conditions]
        boundaries[edge] = tuple(
            _parse_condition(item, _join(edge_key, i))
            for i, item in enumerate(_sequence(conditions, edge_key))
        )
        _check_edge(boundaries[edge], edge_key, lx if edge in (Edge.BOTTOM, Edge.TOP) else ly)
    missing = [edge.value for edge in Edge if edge not in boundaries]
    if missing:
        raise ConfigError(key, f"境界条件が未定義の辺があります: {', '.join(missing)}")
    if all(bc.kind is BoundaryKind.NEUMANN for conditions in boundaries.values() for bc in conditions):
        raise ConfigError(key, "Dirichlet または Robin 境界が少なくとも1つ必要です (全Neumannは特異)")
    return boundaries


def _check_edge(conditions: Sequence[BoundaryCondition], key: str, length: float) -> None:
    if sum(1 for bc in conditions if bc.segment is None) != 1:
        raise ConfigError(key, "区間指定の無い基本条件がちょうど1つ必要です")
    for i, bc in enumerate(conditions):
        if bc.segment is not None and (bc.segment[0] < 0.0 or bc.segment[1] > length):
            segment_key = _join(_join(key, i), "segment")
            raise ConfigError(segment_key, f"{list(bc.segment)} が辺の範囲 [0, {length:g}] の外にあります")


def _parse_source(data: Any, key: str) -> HeatSource:
    data = _mapping(data, key)
    center = Point2(*_pair(_require(data, "center", key), _join(key, "center")))
    width, height = _pair(_require(data, "size", key), _join(key, "size"))
    rated = as_float(_require(data, "rated", key), _join(key, "rated"))
    true = as_float(data["true"], _join(key, "true")) if "true" in data else rated
    try:
        return HeatSource(center, width, height, rated, true, name=str(data.get("name", "")))
    except ValidationError as exc:
        raise ConfigError(key, str(exc)) from exc


def _check_sources(sources: Sequence[HeatSource], lx: float, ly: float) -> None:
    for idx, source in enumerate(sources):
        key = _join("sources", idx)
        xmin, xmax, ymin, ymax = source.bounds
        if not (0.0 < xmin and xmax < lx and 0.0 < ymin and ymax < ly):
            raise ConfigError(key, f"熱源 {source.name or '-'} がプレートの内部に収まっていません")
        for jdx in range(idx):
            if source.overlaps(sources[jdx]):
                raise ConfigError(key, f"{_join('sources', jdx)} と重なっています")


def parse_domain(data: Mapping[str, Any]) -> DomainSpec:
    """領域定義のマッピングから DomainSpec を組み立てる。"""
    plate = _mapping(_require(data, "plate", ""), "plate")
    lx = as_float(_require(plate, "lx", "plate"), "plate.lx")
    ly = as_float(_require(plate, "ly", "plate"), "plate.ly")
    conductivity = as_float(plate.get("conductivity", 1.0), "plate.conductivity")
    for name, value in (("lx", lx), ("ly", ly), ("conductivity", conductivity)):
        if not value > 0:
            raise ConfigError(_join("plate", name), f"正の値が必要です: {value!r}")
    sources = tuple(
        _parse_source(item, _join("sources", i))
        for i, item in enumerate(_sequence(data.get("sources", []), "sources"))
    )
    _check_sources(sources, lx, ly)
    predefined: List[Point2] = []
    if "observations" in data:
        observations = _mapping(data["observations"], "observations")
        predefined = parse_points(observations.get("predefined", []), "observations.predefined")
        for i, point in enumerate(predefined):
            if not (0.0 <= point.x <= lx and 0.0 <= point.y <= ly):
                raise ConfigError(_join("observations.predefined", i), f"{point.as_tuple()} が領域外です")

    if "case" in data:
        if "boundaries" in data:
            raise ConfigError("case", "case と boundaries は同時に指定できません")
        try:
            case_id = CaseId(data["case"])
        except ValueError as exc:
            raise ConfigError("case", f"case1/case2/case3 のいずれかが必要です: {data['case']!r}") from exc
        if abs(lx - PLATE_SIZE) > 1e-12 or abs(ly - PLATE_SIZE) > 1e-12:
            raise ConfigError("case", f"ケースプリセットは {PLATE_SIZE} m 角のプレート専用です")
        try:
            preset = case_preset(case_id, sources, predefined_points=predefined)
        except ValidationError as exc:
            raise ConfigError("case", str(exc)) from exc
        boundaries = preset.boundaries
    else:
        boundaries = _parse_boundaries(_require(data, "boundaries", ""), "boundaries", lx, ly)

    try:
        spec = DomainSpec(
            lx=lx,
            ly=ly,
            conductivity=conductivity,
            sources=sources,
            boundaries=boundaries,
            predefined_points=tuple(predefined),
        )
    except ValidationError as exc:
        raise ConfigError("domain", str(exc)) from exc
    logger.debug("domain loaded: %d sources, plate %.4g x %.4g m", spec.n_sources, lx, ly)
    return spec


def load_domain(path: PathLike) -> DomainSpec:
    """領域定義ファイルを読み込む。"""
    return parse_domain(load_yaml(path))


# ----- 学習設定 --------------------------------------------------------------


def _parse_weights(value: Any, key: str) -> LossWeights:
    if isinstance(value, str):
        preset = WEIGHT_PRESETS.get(value.lower())
        if preset is None:
            raise ConfigError(key, f"未知の重みプリセットです: {value} ({', '.join(WEIGHT_PRESETS)})")
        return preset
    data = _mapping(value, key)
    unknown = set(data) - {"pde", "bc", "data"}
    if unknown:
        raise ConfigError(_join(key, sorted(unknown)[0]), "未知のキーです")
    try:
        return LossWeights(
            pde=as_float(data.get("pde", 1.0), _join(key, "pde")),
            bc=as_float(data.get("bc", 1.0), _join(key, "bc")),
            data=as_float(data.get("data", 1e4), _join(key, "data")),
        )
    except ValidationError as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(key, str(exc)) from exc


def parse_train_config(data: Optional[Mapping[str, Any]], key: str = "train") -> TrainConfig:
    """学習設定のマッピングから TrainConfig を組み立てる。"""
    if data is None:
        return TrainConfig()
    data = _mapping(data, key)
    unknown = set(data) - _TRAIN_KEYS
    if unknown:
        raise ConfigError(_join(key, sorted(unknown)[0]), "未知のキーです")
    if "architecture" in data and "widths" in data:
        raise ConfigError(_join(key, "architecture"), "architecture と widths は同時に指定できません")

    kwargs: Dict[str, Any] = {}
    if "architecture" in data:
        name = str(data["architecture"]).lower()
        if name not in ARCHITECTURES:
            raise ConfigError(_join(key, "architecture"), f"未知のアーキテクチャです: {data['architecture']}")
        kwargs["widths"] = ARCHITECTURES[name]
    if "widths" in data:
        kwargs["widths"] = tuple(
            as_int(w, _join(_join(key, "widths"), i))
            for i, w in enumerate(_sequence(data["widths"], _join(key, "widths")))
        )
    if "weights" in data:
        kwargs["weights"] = _parse_weights(data["weights"], _join(key, "weights"))
    for name in ("iterations", "n_interior", "n_per_edge", "seed", "log_every"):
        if name in data:
            kwargs[name] = as_int(data[name], _join(key, name))
    for name in ("learning_rate", "pde_scale", "flux_scale"):
        if name in data and data[name] is not None:
            kwargs[name] = as_float(data[name], _join(key, name))
    if "phi_trainable" in data:
        if not isinstance(data["phi_trainable"], bool):
            raise ConfigError(_join(key, "phi_trainable"), "true/false が必要です")
        kwargs["phi_trainable"] = data["phi_trainable"]
    if "init" in data:
        kwargs["init"] = data["init"]
    try:
        return TrainConfig(**kwargs)
    except ValidationError as exc:
        raise ConfigError(key, str(exc)) from exc
    except ValueError as exc:
        raise ConfigError(_join(key, "init"), f"xavier/transfer のいずれかが必要です: {exc}") from exc
