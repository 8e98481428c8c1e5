import pytest

from ctattn.bench import bench_report, loglog_slope


def test_loglog_slope_of_power_law():
    assert loglog_slope([2, 4, 8, 16], [3 * n ** 2 for n in (2, 4, 8, 16)]) == pytest.approx(2.0)


def test_nfe_halves_when_step_doubles():
    report = bench_report(lengths=(4, 8), step_sizes=(0.05, 0.1), repeats=1, d_model=4, heads=2)
    nfe = {(r["length"], r["step_size"]): r["nfe"] for r in report["rows"]}
    assert nfe[4, 0.05] == nfe[8, 0.05] == 160
    assert nfe[4, 0.1] == nfe[8, 0.1] == 80
    assert all(r["ratio"] > 0 and r["state_mb"] > 0 for r in report["rows"])
    assert set(report["slopes"]) == {"0.05", "0.1"}
