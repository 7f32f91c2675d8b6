"""温度場逆解析ユーティリティ (tfi-util) のコマンドラインエントリーポイント。"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path
from typing import Dict, List, Optional

from core.bootstrap import setup_services
from core.config import load_yaml, parse_train_config
from core.errors import TfiError
from core.experiment import FAILURES_FILE, METRICS_FILE, load_plan
from core.inversion import TrainConfig
from core.repository import METRICS_HEADER, read_positions
from core.sampling import Provenance
from ui.view_model import SweepResultsViewModel

logger = logging.getLogger(__name__)

LOG_FORMAT = "%(asctime)s - %(levelname)s - %(name)s - %(message)s"
DEFAULT_CANDIDATES = "lhs=50,lds=50,gs=50"


def _candidate_counts(text: str) -> Dict[Provenance, int]:
    """`lhs=50,lds=50,gs=50` 形式の候補数指定を解釈する。"""
    counts: Dict[Provenance, int] = {}
    for item in filter(None, (part.strip() for part in text.split(","))):
        name, sep, value = item.partition("=")
        try:
            provenance = Provenance(name.strip())
            count = int(value)
        except ValueError:
            raise argparse.ArgumentTypeError(f"候補数の指定が不正です: {item!r}") from None
        if not sep or provenance is Provenance.MANUAL or count < 0:
            raise argparse.ArgumentTypeError(f"候補数の指定が不正です: {item!r}")
        counts[provenance] = count
    if not any(counts.values()):
        raise argparse.ArgumentTypeError("候補数が1つも指定されていません")
    return counts


def parse_args(argv: Optional[List[str]] = None) -> argparse.Namespace:
    """CLI用の引数を定義し、与えられたargvからNamespaceを生成する。"""
    parser = argparse.ArgumentParser(
        prog="tfi-util", description="Temperature field inversion and sensor placement utility"
    )
    verbosity = parser.add_mutually_exclusive_group()
    verbosity.add_argument("-v", "--verbose", action="store_true", help="DEBUG ログを出力する")
    verbosity.add_argument("-q", "--quiet", action="store_true", help="WARNING 以上のログのみ出力する")
    sub = parser.add_subparsers(dest="command", required=True)

    forward = sub.add_parser("forward", help="真の強度で順解析し温度場ファイルを書き出す")
    forward.add_argument("--spec", required=True, help="領域定義 YAML")
    forward.add_argument("-K", dest="k", type=int, default=50, help="格子の1辺あたりの節点数（default: 50）")
    forward.add_argument("--out", required=True, help="出力ディレクトリ")

    place = sub.add_parser("place", help="候補配置を条件数で順位付けし最良配置を書き出す")
    place.add_argument("--spec", required=True, help="領域定義 YAML")
    place.add_argument("-K", dest="k", type=int, default=50, help="格子の1辺あたりの節点数（default: 50）")
    place.add_argument("--n-obs", type=int, required=True, help="観測点数")
    place.add_argument(
        "--candidates",
        type=_candidate_counts,
        default=_candidate_counts(DEFAULT_CANDIDATES),
        help=f"サンプラごとの候補数（default: {DEFAULT_CANDIDATES}）",
    )
    place.add_argument("--seed", type=int, default=0, help="ルートシード（default: 0）")
    place.add_argument("--lambda", dest="lam", type=float, default=1.0, help="拡大系の重み λ（default: 1.0）")
    place.add_argument("--out", required=True, help="出力ディレクトリ")

    inv = sub.add_parser("invert", help="観測から温度場と熱源強度を再構成する")
    inv.add_argument("--spec", required=True, help="領域定義 YAML")
    inv.add_argument("-K", dest="k", type=int, default=50, help="評価格子の1辺あたりの節点数（default: 50）")
    inv.add_argument("--sensors", required=True, help="観測位置 CSV (x_m,y_m)")
    inv.add_argument("--eps", type=float, default=0.0, help="乗法ノイズの水準 ε（default: 0）")
    inv.add_argument("--seed", type=int, default=0, help="ノイズ系列のシード（default: 0）")
    inv.add_argument("--config", help="学習設定 YAML（train キー、または設定そのもの）")
    inv.add_argument("--solver", choices=("pinn", "linear"), default="pinn", help="再構成ソルバ（default: pinn）")
    inv.add_argument("--lambda", dest="lam", type=float, default=1.0, help="線形再構成の重み λ（default: 1.0）")
    inv.add_argument("--run-id", default="run", help="指標行の識別子（default: run）")
    inv.add_argument("--cache-dir", help="事前学習チェックポイントの保存先（default: <out>/pretrain）")
    inv.add_argument("--out", required=True, help="出力ディレクトリ")

    sweep = sub.add_parser("sweep", help="実験計画の全セルを実行する")
    sweep.add_argument("--plan", required=True, help="実験計画 YAML")
    sweep.add_argument("--jobs", type=int, default=1, help="並列ワーカー数（default: 1）")

    met = sub.add_parser("metrics", help="誤差指標の計算、またはスイープ結果の集計")
    met.add_argument("--pred", help="予測温度場ファイル")
    met.add_argument("--truth", help="真値温度場ファイル")
    met.add_argument("--spec", help="領域定義 YAML（--pred/--truth と併用）")
    met.add_argument("--results", help="スイープ結果ディレクトリ")

    return parser.parse_args(argv)


def _load_train_config(path: Optional[str]) -> TrainConfig:
    if path is None:
        return TrainConfig()
    data = load_yaml(path)
    if "train" in data:
        return parse_train_config(data["train"], "train")
    return parse_train_config(data, "train")


def run_forward(args: argparse.Namespace) -> int:
    service, _ = setup_services(args.spec)
    field_, path = service.cmd_forward(args.k, args.out)
    print(f"Field : {path}")
    print(f"K     : {field_.grid.k}")
    print(f"T min : {field_.values.min():.6f} K")
    print(f"T max : {field_.values.max():.6f} K")
    return 0


def run_place(args: argparse.Namespace) -> int:
    service, _ = setup_services(args.spec)
    outcome = service.cmd_place(args.k, args.n_obs, args.candidates, args.seed, args.out, lam=args.lam)
    kappas = [entry.kappa for entry in outcome.ranking]
    print(f"Candidates: {len(kappas)}")
    print(f"Best      : #{outcome.best_id} ({outcome.best.positions.provenance.value}) kappa={outcome.best.kappa:.6g}")
    print(f"Ranking   : {outcome.paths['ranking']}")
    print(f"Positions : {outcome.paths['positions']}")
    return 0


def run_invert(args: argparse.Namespace) -> int:
    cfg = _load_train_config(args.config)
    cache_dir = args.cache_dir or str(Path(args.out) / "pretrain")
    service, _ = setup_services(args.spec, cache_dir=cache_dir)
    positions = read_positions(args.sensors)
    outcome = service.cmd_invert(
        args.k, positions, args.eps, args.seed, cfg, args.out,
        solver=args.solver, lam=args.lam, run_id=args.run_id,
    )
    if outcome.skipped:
        print("(既存の結果を再利用しました)")
    print(",".join(METRICS_HEADER))
    print(",".join(outcome.report.to_row(outcome.run_id)))
    return 0


def run_sweep(args: argparse.Namespace) -> int:
    if args.jobs < 1:
        print("--jobs は1以上を指定してください", file=sys.stderr)
        return 2
    plan = load_plan(args.plan)
    service, _ = setup_services(plan.spec_path)
    outcome = service.cmd_sweep(plan, jobs=args.jobs)
    print(f"Completed: {len(outcome.completed)}")
    print(f"Skipped  : {len(outcome.skipped)}")
    print(f"Failed   : {len(outcome.failed)}")
    for run_id, error in sorted(outcome.failed.items()):
        print(f"{run_id}: {error}", file=sys.stderr)
    print(f"Results  : {Path(plan.out_dir) / METRICS_FILE}")
    return 0 if outcome.ok else 3


def run_metrics(args: argparse.Namespace) -> int:
    if args.results:
        results = Path(args.results)
        view = SweepResultsViewModel.from_files(results / METRICS_FILE, results / FAILURES_FILE)
        print(view.summary_text())
        return 0
    if not (args.pred and args.truth and args.spec):
        print("--results か、--pred/--truth/--spec の組を指定してください", file=sys.stderr)
        return 2
    service, _ = setup_services(args.spec)
    report = service.cmd_metrics(args.pred, args.truth)
    print(",".join(METRICS_HEADER))
    print(",".join(report.to_row(Path(args.pred).stem)))
    return 0


HANDLERS = {
    "forward": run_forward,
    "place": run_place,
    "invert": run_invert,
    "sweep": run_sweep,
    "metrics": run_metrics,
}


def run_cli(args: argparse.Namespace) -> int:
    """サブコマンドを実行し終了コードを返す。ライブラリ例外は 1 に変換する。"""
    try:
        return HANDLERS[args.command](args)
    except TfiError as exc:
        logger.debug("command %s failed", args.command, exc_info=True)
        print(f"エラー: {exc}", file=sys.stderr)
        return 1


def configure_logging(args: argparse.Namespace) -> None:
    level = logging.DEBUG if args.verbose else logging.WARNING if args.quiet else logging.INFO
    logging.basicConfig(level=level, format=LOG_FORMAT, stream=sys.stderr)


def main(argv: Optional[List[str]] = None) -> None:
    """tfi-util のエントリーポイント。"""
    args = parse_args(argv)
    configure_logging(args)
    sys.exit(run_cli(args))


__all__ = ["main", "parse_args", "run_cli"]


if __name__ == "__main__":
    main()
