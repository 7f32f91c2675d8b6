"""順解析・配置選択・逆解析・スイープ実験を統括するサービス。"""

from __future__ import annotations

import hashlib
import itertools
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Mapping, Optional, Tuple, Union

import numpy as np

from .config import as_float, as_int, load_domain, load_yaml, parse_train_config
from .diffnet import InitScheme, NetParams
from .domain import DomainSpec
from .errors import ConfigError, TfiError, ValidationError
from .evaluation import MetricReport, add_noise, metrics
from .fd_system import CoefficientSystem, ScalarField, assemble, solve_forward
from .inversion import TrainConfig, evaluate_field, invert, run_pretrain
from .placement import (
    DENSE_SVD_LIMIT,
    PlacementCandidate,
    RankingEntry,
    augment,
    least_squares_reconstruct,
    select_positions,
    selection_from_positions,
)
from .repository import (
    ResultRepository,
    manifest_hash,
    read_checkpoint,
    read_field,
    read_metrics,
    write_checkpoint,
    write_failures,
)
from .sampling import PositionSet, Provenance, generate_candidates

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]

STRATEGIES = ("lhs", "lds", "gs", "min_kappa", "median_kappa")
SOLVERS = ("pinn", "linear")

FIELD_FILE = "field.txt"
POSITIONS_FILE = "positions.csv"
RANKING_FILE = "ranking.csv"
PLACEMENT_FILE = "placement.json"
CHECKPOINT_FILE = "checkpoint.json"
PHI_FILE = "phi_hat.csv"
HISTORY_FILE = "history.csv"
METRICS_FILE = "metrics.csv"
MANIFEST_FILE = "manifest.json"
FAILURES_FILE = "failures.csv"


def derive_seed(root: int, *names: Any) -> int:
    """ルートシードと名前の列から独立な部分ストリームのシードを作る。"""
    entropy = [int(root) & 0xFFFFFFFF]
    for name in names:
        digest = hashlib.sha256(str(name).encode("utf-8")).digest()
        entropy.append(int.from_bytes(digest[:4], "little"))
    return int(np.random.SeedSequence(entropy).generate_state(1)[0])


def cell_run_id(n_obs: int, strategy: str, eps: float, seed: int) -> str:
    return f"n{n_obs}_{strategy}_eps{eps:g}_s{seed}"


@dataclass(frozen=True)
class ExperimentPlan:
    """スイープ実験の計画。観測数 × 配置戦略 × ノイズ水準 × シードの直積を実行する。"""

    spec_path: str
    out_dir: str
    k: int = 50
    sensor_counts: Tuple[int, ...] = (42,)
    strategies: Tuple[str, ...] = ("lds",)
    candidate_counts: Dict[Provenance, int] = field(
        default_factory=lambda: {Provenance.LHS: 50, Provenance.LDS: 50, Provenance.GS: 50}
    )
    noise_levels: Tuple[float, ...] = (0.0,)
    seeds: Tuple[int, ...] = (0,)
    seed: int = 0
    solver: str = "pinn"
    lam: float = 1.0
    train: TrainConfig = field(default_factory=TrainConfig)

    def __post_init__(self) -> None:
        for name in ("sensor_counts", "strategies", "noise_levels", "seeds"):
            value = tuple(getattr(self, name))
            object.__setattr__(self, name, value)
            if not value:
                raise ConfigError(name, "空のリストは指定できません")
        unknown = [s for s in self.strategies if s not in STRATEGIES]
        if unknown:
            raise ConfigError("strategies", f"未知の配置戦略です: {unknown} ({', '.join(STRATEGIES)})")
        if self.solver not in SOLVERS:
            raise ConfigError("solver", f"pinn/linear のいずれかが必要です: {self.solver!r}")
        if any(n < 1 for n in self.sensor_counts):
            raise ConfigError("sensor_counts", "観測数は1以上が必要です")
        if any(eps < 0 for eps in self.noise_levels):
            raise ConfigError("noise_levels", "ノイズ水準は0以上が必要です")
        if self.k < 3:
            raise ConfigError("k", "K は3以上が必要です")

    @property
    def needs_kappa(self) -> bool:
        return self.solver == "linear" or any(s.endswith("_kappa") for s in self.strategies)

    def check_size(self, spec: DomainSpec) -> None:
        """条件数計算や線形再構成を使う計画で K が密行列SVDの上限内か確認する。"""
        if self.needs_kappa and self.k * self.k + spec.n_sources > DENSE_SVD_LIMIT:
            raise ConfigError(
                "k", f"K={self.k} では未知数が密行列SVDの上限 {DENSE_SVD_LIMIT} を超えます"
            )

    def cells(self) -> List[Tuple[int, str, float, int]]:
        return list(itertools.product(self.sensor_counts, self.strategies, self.noise_levels, self.seeds))

    def to_dict(self) -> Dict[str, Any]:
        return {
            "spec": self.spec_path,
            "out_dir": self.out_dir,
            "k": self.k,
            "sensor_counts": list(self.sensor_counts),
            "strategies": list(self.strategies),
            "candidates": {p.value: c for p, c in self.candidate_counts.items()},
            "noise_levels": list(self.noise_levels),
            "seeds": list(self.seeds),
            "seed": self.seed,
            "solver": self.solver,
            "lambda": self.lam,
            "train": self.train.to_dict(),
        }

    @classmethod
    def from_dict(cls, data: Mapping[str, Any], base_dir: PathLike = ".") -> "ExperimentPlan":
        """計画のマッピングを解釈する。相対パスは base_dir 基準。"""
        known = {
            "spec", "out_dir", "k", "sensor_counts", "strategies", "candidates",
            "noise_levels", "seeds", "seed", "solver", "lambda", "train",
        }
        unknown = sorted(set(data) - known)
        if unknown:
            raise ConfigError(unknown[0], "未知のキーです")
        base = Path(base_dir)
        if "spec" not in data:
            raise ConfigError("spec", "必須キーがありません")
        kwargs: Dict[str, Any] = {
            "spec_path": str(base / str(data["spec"])),
            "out_dir": str(base / str(data.get("out_dir", "results"))),
        }
        if "k" in data:
            kwargs["k"] = as_int(data["k"], "k")
        if "sensor_counts" in data:
            kwargs["sensor_counts"] = tuple(
                as_int(v, f"sensor_counts[{i}]") for i, v in enumerate(_as_list(data["sensor_counts"], "sensor_counts"))
            )
        if "strategies" in data:
            kwargs["strategies"] = tuple(str(s) for s in _as_list(data["strategies"], "strategies"))
        if "candidates" in data:
            counts = data["candidates"]
            if not isinstance(counts, Mapping):
                raise ConfigError("candidates", "マッピングが必要です")
            parsed: Dict[Provenance, int] = {}
            for name, count in counts.items():
                try:
                    provenance = Provenance(name)
                except ValueError as exc:
                    raise ConfigError(f"candidates.{name}", "lhs/lds/gs のいずれかが必要です") from exc
                if provenance is Provenance.MANUAL:
                    raise ConfigError(f"candidates.{name}", "lhs/lds/gs のいずれかが必要です")
                parsed[provenance] = as_int(count, f"candidates.{name}")
            kwargs["candidate_counts"] = parsed
        if "noise_levels" in data:
            kwargs["noise_levels"] = tuple(
                as_float(v, f"noise_levels[{i}]") for i, v in enumerate(_as_list(data["noise_levels"], "noise_levels"))
            )
        if "seeds" in data:
            kwargs["seeds"] = tuple(
                as_int(v, f"seeds[{i}]") for i, v in enumerate(_as_list(data["seeds"], "seeds"))
            )
        if "seed" in data:
            kwargs["seed"] = as_int(data["seed"], "seed")
        if "solver" in data:
            kwargs["solver"] = str(data["solver"])
        if "lambda" in data:
            kwargs["lam"] = as_float(data["lambda"], "lambda")
        if "train" in data:
            kwargs["train"] = parse_train_config(data["train"], "train")
        return cls(**kwargs)


def _as_list(value: Any, key: str) -> List[Any]:
    if not isinstance(value, (list, tuple)):
        raise ConfigError(key, "リストが必要です")
    return list(value)


def load_plan(path: PathLike) -> ExperimentPlan:
    """実験計画ファイルを読み込む。"""
    path = Path(path)
    return ExperimentPlan.from_dict(load_yaml(path), path.parent)


@dataclass(frozen=True)
class PlaceOutcome:
    best: PlacementCandidate
    best_id: int
    ranking: List[RankingEntry]
    paths: Dict[str, Path]


@dataclass(frozen=True)
class InvertOutcome:
    run_id: str
    report: MetricReport
    paths: Dict[str, Path]
    skipped: bool = False


@dataclass
class SweepOutcome:
    completed: List[str] = field(default_factory=list)
    skipped: List[str] = field(default_factory=list)
    failed: Dict[str, str] = field(default_factory=dict)

    @property
    def ok(self) -> bool:
        return not self.failed


class ExperimentService:
    """1つの領域定義に対する実験コマンドを提供する。

    FD 係数系・真値場・事前学習済みパラメータはキャッシュし、コマンド間で再利用する。
    """

    def __init__(self, spec: DomainSpec, *, cache_dir: Optional[PathLike] = None) -> None:
        self.spec = spec
        self.cache_dir = Path(cache_dir) if cache_dir is not None else None
        self._systems: Dict[int, CoefficientSystem] = {}
        self._truths: Dict[int, ScalarField] = {}
        self._pretrained: Dict[str, NetParams] = {}

    # ----- 共有資源 ----------------------------------------------------------
    def system(self, k: int) -> CoefficientSystem:
        if k not in self._systems:
            self._systems[k] = assemble(self.spec, k)
        return self._systems[k]

    def truth(self, k: int) -> ScalarField:
        """真の強度による FD 解 (真値場)。"""
        if k not in self._truths:
            self._truths[k] = solve_forward(self.system(k), self.spec.true_intensities())
        return self._truths[k]

    def pretrained(self, cfg: TrainConfig, *, cache_dir: Optional[PathLike] = None) -> NetParams:
        """(spec, cfg) ごとの事前学習済みパラメータ。cache_dir (既定は self.cache_dir) があればディスクにも保存する。"""
        cache_dir = Path(cache_dir) if cache_dir is not None else self.cache_dir
        key = manifest_hash({"spec": self.spec.to_dict(), "train": _pretrain_key(cfg)})
        if key in self._pretrained:
            return self._pretrained[key]
        path = cache_dir / f"pretrain-{key[:16]}.json" if cache_dir else None
        if path is not None and path.exists():
            logger.info("事前学習チェックポイントを再利用します: %s", path)
            params = read_checkpoint(path)
        else:
            params = run_pretrain(self.spec, cfg).params
            if path is not None:
                path.parent.mkdir(parents=True, exist_ok=True)
                write_checkpoint(path, params, key)
        self._pretrained[key] = params
        return params

    # ----- コマンド ------------------------------------------------------------
    def cmd_forward(self, k: int, out_dir: PathLike) -> Tuple[ScalarField, Path]:
        """真の強度で順解析し、温度場ファイルを書き出す。"""
        manifest = {"command": "forward", "spec": self.spec.to_dict(), "k": k}
        repo = ResultRepository(out_dir, manifest_hash(manifest))
        repo.prepare([FIELD_FILE, MANIFEST_FILE])
        field_ = self.truth(k)
        path = repo.save_field(FIELD_FILE, field_)
        repo.save_manifest(MANIFEST_FILE, manifest)
        logger.info("forward: K=%d T=[%.3f, %.3f] K -> %s", k, field_.values.min(), field_.values.max(), path)
        return field_, path

    def cmd_place(
        self,
        k: int,
        n_obs: int,
        counts: Mapping[Provenance, int],
        seed: int,
        out_dir: PathLike,
        *,
        lam: float = 1.0,
    ) -> PlaceOutcome:
        """候補を生成して条件数で順位付けし、順位表と最良配置を書き出す。

        Raises:
            PlacementError: 全候補の条件数が無限大の場合。
        """
        manifest = {
            "command": "place",
            "spec": self.spec.to_dict(),
            "k": k,
            "n_obs": n_obs,
            "candidates": {Provenance(p).value: c for p, c in counts.items()},
            "seed": seed,
            "lambda": lam,
        }
        repo = ResultRepository(out_dir, manifest_hash(manifest))
        names = [RANKING_FILE, PLACEMENT_FILE, POSITIONS_FILE, MANIFEST_FILE]
        repo.prepare(names)
        candidates = generate_candidates(self.spec, n_obs, dict(counts), derive_seed(seed, "sampler"))
        best, ranking = select_positions(candidates, self.system(k), lam)
        best_id = next(entry.candidate_id for entry in ranking if entry.kappa == best.kappa)
        paths = {
            "ranking": repo.save_ranking(RANKING_FILE, ranking),
            "placement": repo.save_placement(PLACEMENT_FILE, best, best_id),
            "positions": repo.save_positions(POSITIONS_FILE, best.positions),
            "manifest": repo.save_manifest(MANIFEST_FILE, manifest),
        }
        return PlaceOutcome(best, best_id, ranking, paths)

    def cmd_invert(
        self,
        k: int,
        positions: PositionSet,
        eps: float,
        seed: int,
        cfg: TrainConfig,
        out_dir: PathLike,
        *,
        solver: str = "pinn",
        lam: float = 1.0,
        run_id: str = "run",
    ) -> InvertOutcome:
        """FD 真値場から観測を作り、ノイズを加えて再構成し、結果一式を書き出す。

        同じマニフェストの結果が揃っていれば再計算せずに既存の指標を返す。

        Args:
            k: 評価格子の K。
            positions: 観測位置。
            eps: 乗法ノイズの水準 ε。
            seed: ノイズ系列のシード。
            cfg: 学習設定 (solver="pinn" のとき)。
            out_dir: 出力ディレクトリ。
            solver: "pinn" または "linear"。
            lam: 線形再構成の罰則重み λ。
            run_id: 指標行の識別子。

        Raises:
            OutputConflictError: 出力先に別マニフェストの結果がある場合。
        """
        if solver not in SOLVERS:
            raise ValidationError(f"未知のソルバです: {solver}")
        positions.check_within(self.spec)
        manifest: Dict[str, Any] = {
            "command": "invert",
            "spec": self.spec.to_dict(),
            "k": k,
            "positions": [[p.x, p.y] for p in positions.points],
            "eps": eps,
            "seed": seed,
            "solver": solver,
            "run_id": run_id,
        }
        if solver == "pinn":
            manifest["train"] = cfg.to_dict()
        else:
            manifest["lambda"] = lam
        repo = ResultRepository(out_dir, manifest_hash(manifest))
        names = [FIELD_FILE, PHI_FILE, METRICS_FILE, POSITIONS_FILE, MANIFEST_FILE]
        if solver == "pinn":
            names += [CHECKPOINT_FILE, HISTORY_FILE]
        repo.prepare(names)
        paths = {name: repo.path(name) for name in names}
        if repo.is_complete(names):
            logger.info("%s: 既存の結果を再利用します (%s)", run_id, repo.out_dir)
            return InvertOutcome(run_id, read_metrics(repo.path(METRICS_FILE))[0][1], paths, skipped=True)

        truth = self.truth(k)
        observed = truth.sample(positions.as_array())
        noisy = add_noise(observed, eps, derive_seed(seed, "noise"))
        if solver == "pinn":
            pretrained = self.pretrained(cfg) if cfg.init is InitScheme.TRANSFER else None
            result = invert(
                self.spec, pretrained, (positions, noisy), cfg, init_seed=derive_seed(seed, "init")
            )
            field_ = evaluate_field(result.params, truth.grid)
            phi_hat = result.phi_hat
            repo.save_checkpoint(CHECKPOINT_FILE, result.params)
            repo.save_history(HISTORY_FILE, result.history)
        else:
            system = self.system(k)
            sel = selection_from_positions(positions, system.grid, system.n)
            field_, phi_hat = least_squares_reconstruct(augment(system, sel, noisy, lam))
        report = metrics(field_, truth, self.spec)
        names_ = [src.name or f"source{i}" for i, src in enumerate(self.spec.sources)]
        repo.save_field(FIELD_FILE, field_)
        repo.save_phi(PHI_FILE, names_, phi_hat, self.spec.rated_intensities())
        repo.save_positions(POSITIONS_FILE, positions)
        repo.save_manifest(MANIFEST_FILE, manifest)
        # 完了判定に使うため指標ファイルは最後に書く
        repo.save_metrics(METRICS_FILE, [(run_id, report)])
        logger.info(
            "%s: MAE=%.4f CMAE=%.4f BMAE=%.4f MCAE=%.4f",
            run_id, report.mae, report.cmae, report.bmae, report.mcae,
        )
        return InvertOutcome(run_id, report, paths)

    def cmd_metrics(self, pred_path: PathLike, truth_path: PathLike) -> MetricReport:
        pred, _ = read_field(pred_path)
        truth, _ = read_field(truth_path)
        return metrics(pred, truth, self.spec)

    # ----- スイープ ------------------------------------------------------------
    def sweep_positions(self, plan: ExperimentPlan) -> Dict[Tuple[int, str], PositionSet]:
        """観測数 × 配置戦略ごとの観測位置を決める。"""
        resolved: Dict[Tuple[int, str], PositionSet] = {}
        for n_obs in plan.sensor_counts:
            counts = dict(plan.candidate_counts)
            for strategy in plan.strategies:
                if strategy in ("lhs", "lds", "gs"):
                    counts[Provenance(strategy)] = max(counts.get(Provenance(strategy), 0), 1)
            counts = {p: c for p, c in counts.items() if c > 0}
            candidates = generate_candidates(
                self.spec, n_obs, counts, derive_seed(plan.seed, "sampler", n_obs)
            )
            ranking: List[RankingEntry] = []
            if any(s.endswith("_kappa") for s in plan.strategies):
                _, ranking = select_positions(candidates, self.system(plan.k), plan.lam)
            for strategy in plan.strategies:
                if strategy in ("lhs", "lds", "gs"):
                    chosen = next(c for c in candidates if c.provenance.value == strategy)
                else:
                    ordered = sorted(ranking, key=lambda e: (e.kappa, e.candidate_id))
                    index = 0 if strategy == "min_kappa" else (len(ordered) - 1) // 2
                    chosen = candidates[ordered[index].candidate_id]
                resolved[(n_obs, strategy)] = chosen
        return resolved

    def cmd_sweep(self, plan: ExperimentPlan, *, jobs: int = 1) -> SweepOutcome:
        """計画の全セルを実行する。既存の完了セルは飛ばし、失敗はセルごとに記録して続行する。"""
        plan.check_size(self.spec)
        out_dir = Path(plan.out_dir)
        plan_manifest = {"command": "sweep", "spec": self.spec.to_dict(), "plan": plan.to_dict()}
        repo = ResultRepository(out_dir, manifest_hash(plan_manifest))
        repo.prepare([METRICS_FILE, FAILURES_FILE, MANIFEST_FILE])
        repo.save_manifest(MANIFEST_FILE, plan_manifest)
        cache_dir = self.cache_dir if self.cache_dir is not None else out_dir / "pretrain"
        positions = self.sweep_positions(plan)
        if plan.solver == "pinn":
            self.pretrained(plan.train, cache_dir=cache_dir)

        tasks = [
            (n_obs, strategy, eps, seed, positions[(n_obs, strategy)])
            for n_obs, strategy, eps, seed in plan.cells()
        ]
        outcome = SweepOutcome()
        if jobs > 1 and len(tasks) > 1:
            with ProcessPoolExecutor(max_workers=jobs) as pool:
                futures = [
                    pool.submit(_run_cell, self.spec, str(cache_dir), plan, task) for task in tasks
                ]
                results = [future.result() for future in futures]
        else:
            results = [self._run_cell(plan, task) for task in tasks]

        rows: List[Tuple[str, MetricReport]] = []
        for run_id, report, skipped, error in results:
            if error is not None:
                outcome.failed[run_id] = error
            elif skipped:
                outcome.skipped.append(run_id)
            else:
                outcome.completed.append(run_id)
            if report is not None:
                rows.append((run_id, report))
        repo.save_metrics(METRICS_FILE, rows)
        write_failures(repo.path(FAILURES_FILE), outcome.failed, repo.manifest)
        logger.info(
            "sweep: completed=%d skipped=%d failed=%d",
            len(outcome.completed), len(outcome.skipped), len(outcome.failed),
        )
        return outcome

    def _run_cell(
        self, plan: ExperimentPlan, task: Tuple[int, str, float, int, PositionSet]
    ) -> Tuple[str, Optional[MetricReport], bool, Optional[str]]:
        n_obs, strategy, eps, seed, positions = task
        run_id = cell_run_id(n_obs, strategy, eps, seed)
        cell_dir = Path(plan.out_dir) / "cells" / run_id
        logger.info("cell %s: start", run_id)
        try:
            result = self.cmd_invert(
                plan.k, positions, eps, seed, plan.train, cell_dir,
                solver=plan.solver, lam=plan.lam, run_id=run_id,
            )
        except TfiError as exc:
            logger.error("cell %s: failed: %s", run_id, exc)
            return run_id, None, False, str(exc)
        except Exception as exc:
            logger.exception("cell %s: unexpected failure", run_id)
            return run_id, None, False, f"{type(exc).__name__}: {exc}"
        return run_id, result.report, result.skipped, None


def _run_cell(
    spec: DomainSpec, cache_dir: str, plan: ExperimentPlan, task: Tuple[int, str, float, int, PositionSet]
) -> Tuple[str, Optional[MetricReport], bool, Optional[str]]:
    # ワーカープロセス側でサービスを作り直す
    service = ExperimentService(spec, cache_dir=cache_dir)
    return service._run_cell(plan, task)


def _pretrain_key(cfg: TrainConfig) -> Dict[str, Any]:
    # 事前学習に影響しない設定は除く
    data = cfg.to_dict()
    for name in ("phi_trainable", "init"):
        data.pop(name, None)
    data["weights"] = {"pde": cfg.weights.pde, "bc": cfg.weights.bc}
    return data


def load_service(spec_path: PathLike, *, cache_dir: Optional[PathLike] = None) -> ExperimentService:
    return ExperimentService(load_domain(spec_path), cache_dir=cache_dir)
