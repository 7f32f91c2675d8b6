import pytest

from core.evaluation import MetricReport
from core.repository import read_metrics, write_failures, write_metrics
from core.sampling import Provenance
from tfi_util_cli import main, parse_args, run_cli

LAYOUT = """\
plate: {lx: 0.1, ly: 0.1, conductivity: 1.0}
case: case1
sources:
  - {name: a, center: [0.03, 0.03], size: [0.02, 0.02], rated: 20000, true: 18000}
  - {name: b, center: [0.07, 0.065], size: [0.02, 0.03], rated: 10000}
"""


@pytest.fixture
def layout(tmp_path):
    path = tmp_path / "layout.yaml"
    path.write_text(LAYOUT, encoding="utf-8")
    return path


def exit_code(argv) -> int:
    with pytest.raises(SystemExit) as exc:
        main(argv)
    return exc.value.code


def test_parse_args_defaults():
    args = parse_args(["place", "--spec", "a.yaml", "--n-obs", "42", "--out", "o"])
    assert args.k == 50
    assert args.lam == 1.0
    assert args.candidates == {Provenance.LHS: 50, Provenance.LDS: 50, Provenance.GS: 50}

    args = parse_args(["-v", "invert", "--spec", "a.yaml", "--sensors", "s.csv", "--out", "o", "--solver", "linear"])
    assert args.verbose and args.solver == "linear"
    assert args.cache_dir is None


@pytest.mark.parametrize("value", ["sobol=3", "lhs", "lhs=-1", "lhs=0", "manual=2"])
def test_bad_candidate_counts_exit_2(value):
    with pytest.raises(SystemExit) as exc:
        parse_args(["place", "--spec", "a.yaml", "--n-obs", "4", "--out", "o", "--candidates", value])
    assert exc.value.code == 2


def test_verbose_and_quiet_are_exclusive():
    with pytest.raises(SystemExit):
        parse_args(["-v", "-q", "sweep", "--plan", "p.yaml"])


def test_forward_place_invert_metrics(tmp_path, layout, capsys):
    assert exit_code(["forward", "--spec", str(layout), "-K", "11", "--out", str(tmp_path / "fwd")]) == 0
    assert (tmp_path / "fwd" / "field.txt").exists()

    place_args = [
        "place", "--spec", str(layout), "-K", "11", "--n-obs", "10",
        "--candidates", "lhs=1,lds=1", "--seed", "4", "--out", str(tmp_path / "place"),
    ]
    assert exit_code(place_args) == 0
    assert "Candidates: 2" in capsys.readouterr().out

    invert_args = [
        "invert", "--spec", str(layout), "-K", "11", "--solver", "linear",
        "--sensors", str(tmp_path / "place" / "positions.csv"), "--run-id", "demo",
        "--out", str(tmp_path / "inv"),
    ]
    assert exit_code(invert_args) == 0
    out = capsys.readouterr().out.splitlines()
    assert out[-2] == "run_id,mae,cmae,bmae,mcae"
    assert out[-1].startswith("demo,")

    metrics_args = [
        "metrics", "--spec", str(layout),
        "--pred", str(tmp_path / "inv" / "field.txt"), "--truth", str(tmp_path / "fwd" / "field.txt"),
    ]
    assert exit_code(metrics_args) == 0
    row = capsys.readouterr().out.splitlines()[-1].split(",")
    ((_, expected),) = read_metrics(tmp_path / "inv" / "metrics.csv")
    assert row[0] == "field"
    assert float(row[1]) == pytest.approx(expected.mae, rel=1e-8)


def test_library_errors_exit_1(tmp_path, capsys):
    args = parse_args(["forward", "--spec", str(tmp_path / "missing.yaml"), "--out", str(tmp_path)])
    assert run_cli(args) == 1
    assert "エラー:" in capsys.readouterr().err


def test_metrics_requires_arguments(capsys):
    assert run_cli(parse_args(["metrics", "--pred", "p.txt"])) == 2
    assert "--results" in capsys.readouterr().err


def test_metrics_summarises_results(tmp_path, capsys):
    write_metrics(
        tmp_path / "metrics.csv",
        [
            ("n68_min_kappa_eps0.01_s0", MetricReport(0.2, 0.4, 0.1, 1.0)),
            ("n68_min_kappa_eps0.01_s1", MetricReport(0.4, 0.6, 0.1, 2.0)),
        ],
    )
    write_failures(tmp_path / "failures.csv", {"n68_median_kappa_eps0.01_s0": "発散"})
    assert run_cli(parse_args(["metrics", "--results", str(tmp_path)])) == 0
    lines = capsys.readouterr().out.splitlines()
    assert lines[0] == "2 件完了 / 1 件失敗"
    assert lines[1].startswith("n=68 min_kappa eps=0.01: MAE 0.3")


def test_sweep_rejects_zero_jobs(capsys):
    assert run_cli(parse_args(["sweep", "--plan", "p.yaml", "--jobs", "0"])) == 2
