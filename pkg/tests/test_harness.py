import math

import numpy as np
import pytest

from mimo_uplink.errors import ConfigurationError
from mimo_uplink.grid import SystemConfig
from mimo_uplink.harness import (ExperimentSpec, ResultRow, ResultTable, check_ordering, choose_L, emit_plots,
                                 generate_weights, measure_timing, refine_L, run_ber_experiment,
                                 run_mse_experiment, scenario_slots, significantly_lower, wilson_interval,
                                 write_timing_csv)

CFG = SystemConfig()


@pytest.fixture(scope="module")
def bank_dir(tmp_path_factory):
    d = tmp_path_factory.mktemp("banks")
    generate_weights(CFG, d, kinds=("12W",))
    return d


def mse(kind="mse_vs_snr", **kw):
    kw.setdefault("trials", 4000)
    return run_mse_experiment(ExperimentSpec(kind, **kw))


class TestStatistics:
    def test_wilson_frozen_values(self):
        # reference values of the 95% Wilson score interval
        lo, hi = wilson_interval(5, 100)
        assert lo == pytest.approx(0.021543, abs=1e-6) and hi == pytest.approx(0.111750, abs=1e-6)
        lo, hi = wilson_interval(0, 1000)
        assert lo == 0.0 and hi == pytest.approx(0.0038267, rel=1e-4)
        with pytest.raises(ValueError):
            wilson_interval(0, 0)

    def test_significance(self):
        t = ResultTable("ber_vs_gain", "snr_db", "ber")
        for name, (e, n) in {"a": (0, 10**6), "b": (100, 10**6), "c": (3, 10**6)}.items():
            lo, hi = wilson_interval(e, n)
            t.add(ResultRow(25.0, name, e / n, (hi - lo) / 2, n, lo, hi))
        assert significantly_lower(t, 25.0, "a", "b")
        assert not significantly_lower(t, 25.0, "a", "c")


class TestResultTable:
    def test_csv_round_trip(self, tmp_path):
        t = ResultTable("mse_vs_snr", "snr_db", "mse_db")
        t.add(ResultRow(10.0, "ls", -10.5, 0.01, 100, -10.51, -10.49))
        t.add(ResultRow(20.0, "ls", -20.25, 0.02, 100, -20.27, -20.23))
        t.to_csv(tmp_path / "t.csv")
        back = ResultTable.from_csv(tmp_path / "t.csv")
        assert back == t
        header = (tmp_path / "t.csv").read_text().splitlines()[1]
        assert header.startswith("snr_db,estimator,mse_db")

    def test_duplicate_rejected(self):
        t = ResultTable("x", "snr_db", "ber")
        t.add(ResultRow(1.0, "ls", 0.1, 0, 1))
        with pytest.raises(ValueError):
            t.add(ResultRow(1.0, "ls", 0.2, 0, 1))

    def test_check_ordering(self):
        t = ResultTable("x", "snr_db", "mse_db")
        t.add(ResultRow(1.0, "a", 1.0, 0, 1))
        t.add(ResultRow(1.0, "b", 0.5, 0, 1))
        assert check_ordering(t, ["b", "a"]) == []
        assert len(check_ordering(t, ["a", "b"])) == 1


class TestSpec:
    def test_validation(self):
        with pytest.raises(ConfigurationError):
            ExperimentSpec("mse_vs_magic")
        with pytest.raises(ConfigurationError):
            ExperimentSpec("mse_vs_snr", trials=0)
        with pytest.raises(ConfigurationError):
            ExperimentSpec("mse_vs_snr", snr_db=())

    def test_operating_point(self):
        s = ExperimentSpec("mse_vs_L", L_values=(3, 5), snr_db=(20.0,))
        assert s.points == (3, 5) and s.operating(5) == (20.0, 5, 40.0)
        s = ExperimentSpec("mse_vs_snrfixed", snr_fixed_db=(10.0,))
        assert s.operating(10.0) == (25.0, 8, 10.0)

    def test_kind_mismatch(self):
        with pytest.raises(ConfigurationError):
            run_mse_experiment(ExperimentSpec("ber_vs_gain"))
        with pytest.raises(ConfigurationError):
            run_ber_experiment(ExperimentSpec("mse_vs_snr"))


class TestMse:
    def test_noiseless_ls_exact(self):
        t = mse(estimators=("ls",), snr_db=(400.0,), trials=200)
        assert 10 ** (t.value(400.0, "ls") / 10) < 1e-20

    def test_ordering_across_snr(self):
        t = mse(snr_db=(10.0, 20.0, 30.0))
        assert check_ordering(t, ["lmmse", "12w", "3w", "ils", "ls"]) == []

    def test_ls_mse_equals_noise_variance(self):
        # unit-modulus pilots: LS error power is exactly sigma^2 in expectation
        t = mse(estimators=("ls",), snr_db=(20.0,), trials=8000)
        assert t.value(20.0, "ls") == pytest.approx(-20.0, abs=0.05)

    def test_reproducible_and_worker_independent(self):
        a = mse(estimators=("ls", "3w"), trials=3000, chunk=1000)
        b = mse(estimators=("ls", "3w"), trials=3000, chunk=1000)
        c = mse(estimators=("ls", "3w"), trials=3000, chunk=1000, workers=3)
        assert a == b
        assert [r.value for r in a.rows] == pytest.approx([r.value for r in c.rows], abs=1e-12)

    def test_confidence_shrinks_with_trials(self):
        a = mse(estimators=("12w",), trials=8000)
        b = mse(estimators=("12w",), trials=16000)
        ratio = b.row(25.0, "12w").half_width / a.row(25.0, "12w").half_width
        assert ratio == pytest.approx(1 / math.sqrt(2), rel=0.2)

    def test_timing_error_slight(self):
        base = mse(estimators=("3w", "12w"))
        off = mse(estimators=("3w", "12w"), timing_error=2)
        for name in ("3w", "12w"):
            assert off.value(25.0, name) - base.value(25.0, name) < 3.0

    def test_L_sweep_shape(self):
        t = mse("mse_vs_L", estimators=("12w",), L_values=(1, 4, 7, 12), channel="uniform")
        assert t.value(1, "12w") - t.value(7, "12w") >= 3.0
        assert t.value(4, "12w") > t.value(7, "12w")

    def test_output_csv(self, tmp_path):
        t = mse(estimators=("ls",), trials=100, output=str(tmp_path / "m.csv"))
        assert ResultTable.from_csv(tmp_path / "m.csv") == t


class TestBer:
    def test_perfect_csi(self):
        t = run_ber_experiment(ExperimentSpec("ber_vs_gain", estimators=("perfect",), trials=4))
        assert t.value(25.0, "perfect") < 1e-5

    def test_zero_snr_is_bad(self):
        t = run_ber_experiment(ExperimentSpec("ber_vs_gain", estimators=("ls",), snr_db=(0.0,), trials=1))
        assert t.value(0.0, "ls") > 0.1

    def test_windowed_beats_ls_at_moderate_snr(self):
        t = run_ber_experiment(ExperimentSpec("ber_vs_gain", estimators=("ls", "12w"), snr_db=(15.0,), trials=6))
        assert t.value(15.0, "12w") < t.value(15.0, "ls")
        assert significantly_lower(t, 15.0, "12w", "ls")

    def test_scenario_slots_deterministic(self):
        a = [g for g, *_ in scenario_slots(CFG, 2, 20.0, seed=4)]
        b = [g for g, *_ in scenario_slots(CFG, 2, 20.0, seed=4)]
        assert all(np.array_equal(x, y) for x, y in zip(a, b))


class TestRefineL:
    def test_choose_L(self):
        assert choose_L({L: 1.0 / L for L in range(1, 16)}) == 15
        assert choose_L({1: 0.1, 2: 0.05, 3: 0.05, 4: 0.2}) == 2
        assert choose_L({1: 0.0, 2: 0.0}) == 1

    def test_seven_paths(self, bank_dir):
        stream = list(scenario_slots(CFG, 6, 15.0, channel="uniform", true_L=7, true_paths=7))
        L, table = refine_L(stream, bank_dir, CFG)
        assert 5 <= L <= 10
        assert table.value(1, "12w") > 10 * table.value(L, "12w")

    def test_single_path(self, bank_dir):
        stream = list(scenario_slots(CFG, 6, 15.0, channel="uniform", true_L=1, true_paths=1))
        assert refine_L(stream, bank_dir, CFG)[0] <= 3

    def test_missing_bank(self, tmp_path):
        with pytest.raises(ConfigurationError):
            refine_L([], tmp_path, CFG, L_values=(4,))


class TestTiming:
    def test_duty_cycle_and_csv(self, tmp_path):
        rows = measure_timing(CFG, ("ls", "12w"), slots=6)
        for r in rows:
            assert r.duty_cycle == pytest.approx(r.total_ms / CFG.frame_ms)
            assert r.estimation_ms + r.detection_ms <= r.total_ms
        assert rows[0].estimation_ms < rows[1].estimation_ms
        write_timing_csv(rows, tmp_path / "t.csv")
        lines = (tmp_path / "t.csv").read_text().splitlines()
        assert lines[0].startswith("estimator,estimation_ms") and len(lines) == 3


class TestPlots:
    def test_empty_table(self, tmp_path):
        (p,) = emit_plots([ResultTable("mse_vs_snr", "snr_db", "mse_db")], [tmp_path / "e.svg"])
        assert p.read_text().startswith("<?xml")

    def test_five_curves_and_deterministic(self, tmp_path):
        t = ResultTable("mse_vs_snr", "snr_db", "mse_db")
        for i, name in enumerate(["ls", "ils", "3w", "12w", "lmmse"]):
            for snr in (10.0, 20.0):
                t.add(ResultRow(snr, name, -snr - 2 * i, 0.1, 10))
        t.to_csv(tmp_path / "t.csv")
        a, = emit_plots([ResultTable.from_csv(tmp_path / "t.csv")], [tmp_path / "a.svg"])
        b, = emit_plots([ResultTable.from_csv(tmp_path / "t.csv")], [tmp_path / "b.svg"])
        svg = a.read_text()
        for colour in ("#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd"):
            assert colour in svg
        assert a.read_bytes() == b.read_bytes()
