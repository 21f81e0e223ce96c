import math

import numpy as np
import pytest
from epiweeks import Week
from hypothesis import given, settings
from hypothesis import strategies as st

from denguenet.evaluation import (ABLATION_CONFIGS, SplitSpec, ablation_grid, ablation_table, chrono_split,
                                  comparison_table, emit_plot_data, evaluate_repeated, mae, mean_series, mean_std,
                                  metrics_table, rmse, smape, split_labels, write_ablation_csv, write_metrics_csv)
from denguenet.forecaster import PredictionSeries


@pytest.mark.parametrize("n,sizes", [(100, (80, 10, 10)), (13, (10, 1, 2)), (10, (8, 1, 1)), (55, (44, 5, 6))])
def test_split_sizes(n, sizes):
    tr, va, te = chrono_split(list(range(n)))
    assert (len(tr), len(va), len(te)) == sizes
    assert tr + va + te == list(range(n))


def test_split_refuses_short_series():
    with pytest.raises(ValueError):
        chrono_split(list(range(9)))


def test_split_boundaries_avoid_float_error():
    # 0.7 * 10 and (0.7 + 0.2) * 10 are not exact in binary floating point
    assert SplitSpec(0.7, 0.2, 0.1).boundaries(10) == (7, 9)
    with pytest.raises(ValueError):
        SplitSpec(0.8, 0.1, 0.2)


@settings(max_examples=100, deadline=None)
@given(st.integers(10, 2000))
def test_split_is_a_contiguous_partition(n):
    tr, va, te = chrono_split(list(range(n)))
    assert len(tr) == (8 * n) // 10 and len(tr) + len(va) == (9 * n) // 10
    assert tr + va + te == list(range(n))
    assert split_labels(n) == ["train"] * len(tr) + ["val"] * len(va) + ["test"] * len(te)


def test_metric_examples():
    y, y_hat = [1, 2, 3], [2, 2, 5]
    assert mae(y, y_hat) == pytest.approx(1.0)
    assert rmse(y, y_hat) == pytest.approx(math.sqrt(5 / 3))
    assert smape(y, y_hat) == pytest.approx(100 * (2 / 3 + 0.5) / 3)
    assert rmse([0, 0], [2, 2 * math.sqrt(3)]) == pytest.approx(math.sqrt(8))


def test_smape_zero_cases():
    assert smape([0, 0], [0, 0]) == 0.0
    assert smape([0], [5]) == 200.0
    assert smape([0, 4], [0, 4]) == 0.0


def test_metrics_reject_bad_input():
    with pytest.raises(ValueError):
        mae([], [])
    with pytest.raises(ValueError):
        rmse([1, 2], [1])


@settings(max_examples=100, deadline=None)
@given(st.lists(st.tuples(st.floats(0, 1e4), st.floats(0, 1e4)), min_size=1, max_size=50))
def test_metric_bounds(pairs):
    y, y_hat = np.array(pairs).T
    m, s, r = mae(y, y_hat), smape(y, y_hat), rmse(y, y_hat)
    assert 0 <= m <= r * (1 + 1e-12) + 1e-12
    assert 0 <= s <= 200 + 1e-9


def test_population_std():
    mean, std = mean_std([10, 12, 14])
    assert mean == 12 and std == pytest.approx(math.sqrt(8 / 3))


def _series(values, start=Week(2017, 1), splits=None):
    y = np.arange(len(values), dtype=float)
    return PredictionSeries("r", [start + i for i in range(len(values))], y, np.asarray(values, dtype=float),
                            splits or split_labels(len(values)))


def test_evaluate_repeated_keeps_partial_results():
    def runner(region, variant, seed):
        if seed == 1:
            raise RuntimeError("diverged")
        return _series(np.arange(10.0) + seed)

    row = evaluate_repeated(runner, "r", "v", (0, 1, 2))
    assert sorted(row.per_seed) == [0, 2] and row.incomplete and 1 in row.failures
    assert row.n_test == 1
    assert row.stat("mae") == (1.0, 1.0)


def test_metrics_table_layout(tmp_path):
    row = evaluate_repeated(lambda r, v, s: _series(np.arange(10.0) + s), "Ibagué", "combined", (0, 1))
    text = metrics_table([row])
    lines = text.splitlines()
    assert lines[0].split() == ["Metric", "Ibagué", "Average"]
    assert [l.split()[0] for l in lines[2:]] == ["MAE", "sMAPE", "RMSE"]
    assert "0.50±0.50" in lines[2]
    csv_text = write_metrics_csv(tmp_path / "m.csv", [row], "abc").read_text()
    assert csv_text.splitlines()[1].startswith("Ibagué,combined,1,2,0,0.5,0.5")


def test_ablation_grid_cardinality_and_unavailable_rows():
    calls = []

    def runner(region, fs, csr, seed):
        calls.append((region, fs, csr, seed))
        if fs == "ViT" and not csr:
            raise FileNotFoundError("no cached embeddings")
        return _series(np.arange(10.0) + 1)

    table = ablation_grid(runner, ["a", "b"], (0, 1, 2))
    assert len(table.rows) == 6 and all(len(v) == 2 for v in table.rows.values())
    assert len(calls) == 6 * 2 * 3
    assert table.rows[("ViT", False)]["a"] is None
    assert table.rows[("FEng", True)]["b"].stat("mae") == (1.0, 0.0)
    text = ablation_table(table)
    assert text.count("unavailable") == 2
    assert len(text.splitlines()) == 2 + len(ABLATION_CONFIGS)
    assert len(comparison_table(table).splitlines()) == 5


def test_ablation_csv(tmp_path):
    table = ablation_grid(lambda r, fs, csr, s: _series(np.arange(10.0)), ["a"], (0,))
    lines = write_ablation_csv(tmp_path / "a.csv", table).read_text().splitlines()
    assert len(lines) == 1 + 6


def test_plot_data(tmp_path):
    runs = {"combined": _series(np.arange(20.0)), "case-only": _series(np.arange(20.0) * 2)}
    data = emit_plot_data(runs, path=tmp_path / "plot.csv")
    assert data.val_start == Week(2017, 1) + 16 and data.test_start == Week(2017, 1) + 18
    lines = (tmp_path / "plot.csv").read_text().splitlines()
    assert lines[0] == "# boundary,val,2017-W17" and lines[1] == "# boundary,test,2017-W19"
    assert lines[2] == "epiweek,ground_truth,combined,case-only"
    assert len(lines) == 3 + 20
    assert lines[4] == "2017-W02,1,1,2"


def test_plot_data_errors():
    with pytest.raises(ValueError):
        emit_plot_data({})
    with pytest.raises(ValueError):
        emit_plot_data({"a": _series(np.zeros(12)), "b": _series(np.zeros(12), Week(2017, 2))})


def test_mean_series():
    m = mean_series([_series([1.0, 2.0]), _series([3.0, 6.0])])
    assert m.y_hat.tolist() == [2.0, 4.0]
