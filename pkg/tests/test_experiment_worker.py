import csv
import math
from pathlib import Path

import numpy as np
import pytest

from app import main
from config.settings import settings
from workers.experiment_worker import (
    EXIT_OK,
    MONOTONE_SPEARMAN,
    matched_budget_comparison,
    tradeoff_statistics,
)

CONFIG_DIR = Path(__file__).resolve().parent.parent / "configs"


def sweep_row(series, value, comm, final, parameter="policy.lambda"):
    return {
        "series": series,
        "params": f"{parameter}={value}",
        "swept_value": float(value),
        "mean_total_transmits": float(comm),
        "mean_final_objective": float(final),
    }


def curve(series, comms, finals):
    return [sweep_row(series, i + 1, c, f) for i, (c, f) in enumerate(zip(comms, finals))]


def read_rows(path: Path):
    lines = path.read_text().splitlines()
    assert lines[0] == settings.CSV_SCHEMA_TAG
    return list(csv.DictReader(lines[1:]))


def run_shipped(command: str, name: str, out: Path) -> int:
    return main([command, "--config", str(CONFIG_DIR / name), "--out", str(out), "--no-plots"])


class TestTradeoffStatistics:
    def test_monotone_series(self):
        rows = [
            sweep_row("est", 0.3, 15, 1.3),
            sweep_row("est", 0.1, 20, 1.0),
            sweep_row("est", 0.4, 10, 1.6),
            sweep_row("est", 0.2, 18, 1.1),
        ]
        (stats,) = tradeoff_statistics(rows)
        assert stats["parameter"] == "policy.lambda"
        assert stats["points"] == 4
        assert stats["spearman_comm"] == pytest.approx(-1.0)
        assert stats["spearman_objective"] == pytest.approx(1.0)
        assert stats["comm_strictly_decreasing"] is True
        assert stats["objective_monotone"] is True

    def test_flags_catch_plateau_and_dip(self):
        rows = curve("est", [20, 18, 18, 10], [2.1, 2.0, 1.9, 2.2])
        (stats,) = tradeoff_statistics(rows)
        assert stats["comm_strictly_decreasing"] is False
        assert stats["spearman_objective"] < MONOTONE_SPEARMAN
        assert stats["objective_monotone"] is False

    def test_single_point_has_no_correlation(self):
        (stats,) = tradeoff_statistics([sweep_row("est", 0.1, 20, 1.0)])
        assert math.isnan(stats["spearman_comm"])
        assert stats["comm_strictly_decreasing"] is False
        assert stats["objective_monotone"] is False

    def test_multi_axis_series_skipped(self):
        rows = [
            {**sweep_row("grid", 5, 20, 1.0), "params": "policy.lambda=0.1;stream.batch_size=5"},
            {**sweep_row("grid", 10, 18, 1.1), "params": "policy.lambda=0.1;stream.batch_size=10"},
        ] + curve("gn", [20, 10], [1.0, 1.5])
        assert [s["series"] for s in tradeoff_statistics(rows)] == ["gn"]


class TestMatchedBudgetComparison:
    def test_interpolated_excess_and_flags(self):
        rows = curve("a", [10, 20], [3, 1]) + curve("b", [12, 18], [4, 2])
        matched = matched_budget_comparison(rows, optimal_objective=0.0, points=2)

        assert [(m["budget"], m["series"]) for m in matched] == [(12.0, "a"), (12.0, "b"), (18.0, "a"), (18.0, "b")]
        np.testing.assert_allclose([m["excess_over_optimum"] for m in matched], [2.6, 4.0, 1.4, 2.0])
        a_low, b_low = matched[0], matched[1]
        assert a_low["best_other_excess"] == pytest.approx(4.0)
        assert a_low["relative_improvement"] == pytest.approx(0.35)
        assert a_low["no_worse"] and a_low["strictly_better"]
        assert b_low["relative_improvement"] == pytest.approx(1 - 4.0 / 2.6)
        assert not b_low["no_worse"] and not b_low["strictly_better"]

    def test_small_improvement_is_not_strict(self):
        rows = curve("a", [10, 20], [1.98, 1.0]) + curve("b", [10, 20], [2.0, 1.0])
        first = matched_budget_comparison(rows, optimal_objective=0.0, points=2)[0]
        assert first["relative_improvement"] == pytest.approx(0.01)
        assert first["no_worse"] and not first["strictly_better"]

    def test_equal_budgets_are_averaged(self):
        rows = curve("a", [10, 10, 20], [3, 5, 1]) + curve("b", [12, 18], [4, 2])
        matched = matched_budget_comparison(rows, optimal_objective=0.0, points=2)
        assert matched[0]["series"] == "a"
        assert matched[0]["interpolated_final_objective"] == pytest.approx(3.4)

    def test_excess_below_optimum_gives_no_ratio(self):
        rows = curve("a", [10, 20], [3, 1]) + curve("b", [10, 20], [4, 2])
        matched = matched_budget_comparison(rows, optimal_objective=5.0, points=2)
        assert all(math.isnan(m["relative_improvement"]) for m in matched)
        assert not any(m["strictly_better"] for m in matched)

    def test_single_budget_when_ranges_touch(self):
        rows = curve("a", [5, 10], [3, 1]) + curve("b", [10, 15], [4, 2])
        matched = matched_budget_comparison(rows, optimal_objective=0.0)
        assert [m["budget"] for m in matched] == [10.0, 10.0]

    def test_disjoint_ranges(self):
        rows = curve("a", [1, 2], [3, 1]) + curve("b", [5, 6], [4, 2])
        assert matched_budget_comparison(rows, optimal_objective=0.0) == []

    def test_single_series(self):
        assert matched_budget_comparison(curve("a", [1, 2], [3, 1]), optimal_objective=0.0) == []


@pytest.mark.slow
class TestShippedSweeps:
    def test_two_dimensional_tradeoff(self, tmp_path):
        # Communication falls with lambda; final J is only reported, it is not monotone
        assert run_shipped("sweep", "n2_tradeoff.cfg", tmp_path) == EXIT_OK
        (stats,) = read_rows(tmp_path / "tradeoff.csv")
        assert int(stats["points"]) == 8
        assert float(stats["spearman_comm"]) == pytest.approx(-1.0)
        assert stats["comm_strictly_decreasing"] == "true"
        monotone = float(stats["spearman_objective"]) >= MONOTONE_SPEARMAN
        assert stats["objective_monotone"] == ("true" if monotone else "false")

    def test_ten_dimensional_matched_budgets(self, tmp_path):
        assert run_shipped("sweep", "n10_compare.cfg", tmp_path) == EXIT_OK
        rows = read_rows(tmp_path / "sweep.csv")
        estimated = [float(r["mean_total_transmits"]) for r in rows if r["series"] == "estimated"]
        assert len(estimated) == 8
        assert estimated[0] - estimated[-1] >= 5.0

        matched = read_rows(tmp_path / "matched.csv")
        assert len(matched) == 16
        assert len({r["budget"] for r in matched}) == 8
        for row in matched:
            excess, other = float(row["excess_over_optimum"]), float(row["best_other_excess"])
            assert (row["no_worse"] == "true") == (excess <= other)
            if row["strictly_better"] == "true":
                assert 1 - excess / other >= 0.05

    def test_gain_compare_agreement(self, tmp_path):
        assert run_shipped("gain-compare", "gain_compare.cfg", tmp_path) == EXIT_OK
        rows = read_rows(tmp_path / "gain_compare.csv")
        assert len(rows) == 8
        assert all(float(r["agreement_rate"]) > 0.8 for r in rows)
