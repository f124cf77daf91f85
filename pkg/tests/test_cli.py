import csv
import io

import pytest

from memento import cli


def bench(capsys, *argv):
    code = cli.main(["bench", *argv])
    out = capsys.readouterr().out
    return code, list(csv.DictReader(io.StringIO(out)))


def test_bench_single_row(capsys):
    code, rows = bench(capsys, "--ops", "10000", "--prefill", "0")
    assert code == 0 and len(rows) == 1
    assert tuple(rows[0]) == cli.CSV_COLUMNS
    assert float(rows[0]["throughput"]) > 0


def test_bench_thread_sweep(capsys):
    code, rows = bench(capsys, "--ds", "stack", "--threads", "1,2,4,8", "--ops", "50",
                       "--prefill", "10")
    assert code == 0
    assert [int(r["threads"]) for r in rows] == [1, 2, 4, 8]


def test_bench_flush_economy(capsys):
    code, rows = bench(capsys, "--ds", "msq-cas,msq-vol", "--threads", "4", "--ops", "200",
                       "--prefill", "50")
    flushes = {r["ds"]: int(r["flush_count"]) for r in rows}
    assert code == 0 and flushes["msq-vol"] < flushes["msq-cas"]


def test_bench_os_threads(capsys, tmp_path):
    out = tmp_path / "b.csv"
    assert cli.main(["bench", "--mode", "threads", "--threads", "2", "--ops", "50",
                     "--prefill", "0", "--out", str(out)]) == 0
    assert len(out.read_text().splitlines()) == 2


@pytest.mark.parametrize("argv", [
    ["bench", "--ds", "skiplist"],
    ["bench", "--threads", "0"],
    ["bench", "--threads", "two"],
    ["bench", "--workload", "enq99"],
    ["bench", "--crash-plan", "/nonexistent/plan"],
    ["crashtest", "--seeds", "0"],
])
def test_usage_errors(argv, capsys):
    assert cli.main(argv) == cli.EXIT_USAGE
    assert "mmtk: error" in capsys.readouterr().err


def test_bad_plan_file(tmp_path, capsys):
    plan = tmp_path / "p"
    plan.write_text("kind=sometimes\n")
    assert cli.main(["bench", "--crash-plan", str(plan)]) == cli.EXIT_USAGE


def test_crashtest_clean(tmp_path, capsys):
    code = cli.main(["crashtest", "--ds", "msq-indel", "--threads", "2", "--ops", "100",
                     "--seeds", "2", "--out", str(tmp_path / "v")])
    out = capsys.readouterr().out
    assert code == 0, out
    assert out.rstrip().endswith("PASS")
    assert not list(tmp_path.iterdir())


def test_crashtest_bug_switch_fails_with_image(tmp_path, capsys):
    code = cli.main(["crashtest", "--ds", "msq-vol", "--threads", "2", "--ops", "50",
                     "--seeds", "1", "--bug-switch", "--skip-windows",
                     "--out", str(tmp_path / "v")])
    out = capsys.readouterr().out
    assert code == cli.EXIT_FAIL
    assert "freed block" in out
    images = list(tmp_path.glob("v.msq-vol.*.img"))
    assert images and images[0].stat().st_size > 0
