"""Chronological splits, MAE / sMAPE / RMSE, repeated-seed aggregation and report tables."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np

from .forecaster import PredictionSeries
from .ingestion import format_epiweek, week_index

logger = logging.getLogger(__name__)

METRICS = ("mae", "smape", "rmse")
ABLATION_CONFIGS = (
    ("ViT", True), ("ViT", False),
    ("FEng", True), ("FEng", False),
    ("ViT+FEng", True), ("ViT+FEng", False),
)
FEATURE_SETS = {"ViT": ("embedding",), "FEng": ("texture",), "ViT+FEng": ("texture", "embedding")}


@dataclass(frozen=True)
class SplitSpec:
    train: float = 0.8
    val: float = 0.1
    test: float = 0.1

    def __post_init__(self):
        if min(self.train, self.val, self.test) <= 0 or abs(self.train + self.val + self.test - 1) > 1e-9:
            raise ValueError("split fractions must be positive and sum to 1")

    def boundaries(self, n: int) -> tuple[int, int]:
        a = Fraction(str(self.train))
        b = a + Fraction(str(self.val))
        return math.floor(a * n), math.floor(b * n)


def chrono_split(samples: Sequence, spec: SplitSpec = SplitSpec()):
    """Contiguous (train, val, test) in original order; no shuffling."""
    n = len(samples)
    if n < 10:
        raise ValueError(f"need at least 10 samples to split, got {n}")
    i, j = spec.boundaries(n)
    return list(samples[:i]), list(samples[i:j]), list(samples[j:])


def split_labels(n: int, spec: SplitSpec = SplitSpec()) -> list[str]:
    i, j = spec.boundaries(n)
    return ["train"] * i + ["val"] * (j - i) + ["test"] * (n - j)


def _pair(y, y_hat):
    y = np.asarray(y, dtype=np.float64).ravel()
    y_hat = np.asarray(y_hat, dtype=np.float64).ravel()
    if y.size != y_hat.size:
        raise ValueError(f"length mismatch: {y.size} vs {y_hat.size}")
    if y.size == 0:
        raise ValueError("empty input")
    return y, y_hat


def mae(y, y_hat) -> float:
    y, y_hat = _pair(y, y_hat)
    return float(np.mean(np.abs(y_hat - y)))


def smape(y, y_hat) -> float:
    """Symmetric MAPE in percent; a term with both values zero counts as 0."""
    y, y_hat = _pair(y, y_hat)
    num = 2.0 * np.abs(y_hat - y)
    den = np.abs(y_hat) + np.abs(y)
    terms = np.divide(num, den, out=np.zeros_like(num), where=den > 0)
    return float(100.0 * terms.mean())


def rmse(y, y_hat) -> float:
    y, y_hat = _pair(y, y_hat)
    return float(np.sqrt(np.mean((y - y_hat) ** 2)))


def score(y, y_hat) -> dict[str, float]:
    return {"mae": mae(y, y_hat), "smape": smape(y, y_hat), "rmse": rmse(y, y_hat)}


def mean_std(values: Sequence[float]) -> tuple[float, float]:
    """Mean and population standard deviation."""
    v = np.asarray(values, dtype=np.float64)
    return float(v.mean()), float(v.std())


@dataclass
class MetricsRow:
    region: str
    variant: str
    per_seed: dict[int, dict[str, float]] = field(default_factory=dict)
    n_test: int = 0
    failures: dict[int, str] = field(default_factory=dict)

    @property
    def incomplete(self) -> bool:
        return bool(self.failures)

    def stat(self, metric: str) -> tuple[float, float]:
        if not self.per_seed:
            return math.nan, math.nan
        return mean_std([self.per_seed[s][metric] for s in sorted(self.per_seed)])


Runner = Callable[[str, str, int], PredictionSeries]


def evaluate_repeated(runner: Runner, region: str, variant: str, seeds: Sequence[int] = (0, 1, 2)) -> MetricsRow:
    """Run ``runner(region, variant, seed)`` per seed and score its test split.

    A failing seed is recorded in ``failures``; the other seeds still count.
    """
    row = MetricsRow(region, variant)
    for seed in seeds:
        try:
            series = runner(region, variant, seed).subset("test")
            row.per_seed[seed] = score(series.y_true, series.y_hat)
            row.n_test = len(series.y_true)
        except Exception as exc:  # noqa: BLE001 - partial results are kept by contract
            logger.warning("%s/%s seed %s failed: %s", region, variant, seed, exc)
            row.failures[seed] = f"{type(exc).__name__}: {exc}"
    return row


# ---------------------------------------------------------------------------
# Ablation
# ---------------------------------------------------------------------------

@dataclass
class AblationTable:
    regions: list[str]
    rows: dict[tuple[str, bool], dict[str, MetricsRow | None]]

    def averaged(self, csr: bool = True) -> list[tuple[str, dict[str, float]]]:
        """Per feature set: mean over regions of each metric's seed-mean."""
        out = []
        for fs in FEATURE_SETS:
            cells = [self.rows[(fs, csr)].get(r) for r in self.regions]
            cells = [c for c in cells if c is not None and c.per_seed]
            vals = {m: float(np.mean([c.stat(m)[0] for c in cells])) if cells else math.nan for m in METRICS}
            out.append((f"{fs} ({'w/' if csr else 'w/o'} CSR)", vals))
        return out


AblationRunner = Callable[[str, str, bool, int], PredictionSeries]


def ablation_grid(runner: AblationRunner, regions: Sequence[str], seeds: Sequence[int] = (0, 1, 2)) -> AblationTable:
    """Six (feature set x CSR) rows per region; a row whose runner raises FileNotFoundError is unavailable."""
    rows: dict[tuple[str, bool], dict[str, MetricsRow | None]] = {}
    for fs, csr in ABLATION_CONFIGS:
        rows[(fs, csr)] = {}
        for region in regions:
            missing = []

            def run(reg, _variant, seed, fs=fs, csr=csr):
                try:
                    return runner(reg, fs, csr, seed)
                except FileNotFoundError:
                    missing.append(seed)
                    raise

            row = evaluate_repeated(run, region, f"{fs} ({'w/' if csr else 'w/o'} CSR)", seeds)
            rows[(fs, csr)][region] = None if len(missing) == len(seeds) else row
    return AblationTable(list(regions), rows)


# ---------------------------------------------------------------------------
# Reports
# ---------------------------------------------------------------------------

def _pm(mean: float, std: float) -> str:
    return "n/a" if math.isnan(mean) else f"{mean:.2f}±{std:.2f}"


def _aligned(header: Sequence[str], body: Sequence[Sequence[str]]) -> str:
    widths = [max(len(str(r[i])) for r in [header, *body]) for i in range(len(header))]
    fmt = lambda r: "  ".join(str(c).ljust(w) for c, w in zip(r, widths)).rstrip()  # noqa: E731
    return "\n".join([fmt(header), "  ".join("-" * w for w in widths), *map(fmt, body)]) + "\n"


def metrics_table(rows: Sequence[MetricsRow]) -> str:
    """Metrics as rows, regions as columns, plus an across-region average (mean±std of seed means)."""
    regions = [r.region for r in rows]
    body = []
    for m in METRICS:
        means = [r.stat(m)[0] for r in rows]
        valid = [v for v in means if not math.isnan(v)]
        avg = _pm(*mean_std(valid)) if valid else "n/a"
        body.append([m.upper() if m != "smape" else "sMAPE", *(_pm(*r.stat(m)) for r in rows), avg])
    return _aligned(["Metric", *regions, "Average"], body)


def write_metrics_csv(path, rows: Sequence[MetricsRow], config_hash: str = "") -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["region", "variant", "n_test", "n_seeds", "incomplete",
                    *(f"{m}_{s}" for m in METRICS for s in ("mean", "std")), "config_hash"])
        for r in rows:
            stats = [f"{v:.10g}" for m in METRICS for v in r.stat(m)]
            w.writerow([r.region, r.variant, r.n_test, len(r.per_seed), int(r.incomplete), *stats, config_hash])
    return path


def ablation_table(table: AblationTable) -> str:
    body = []
    for fs, csr in ABLATION_CONFIGS:
        marks = ["x" if "ViT" in fs else "", "x" if "FEng" in fs else "", "x" if csr else ""]
        cells = []
        for region in table.regions:
            row = table.rows[(fs, csr)].get(region)
            cells.append("unavailable" if row is None else _pm(*row.stat("mae")))
        body.append([*marks, *cells])
    return _aligned(["ViT", "FEng", "CSR", *table.regions], body)


def comparison_table(table: AblationTable) -> str:
    body = [[name, *(f"{vals[m]:.2f}" for m in METRICS)] for name, vals in table.averaged(True)]
    return _aligned(["Model", "MAE", "sMAPE", "RMSE"], body)


def write_ablation_csv(path, table: AblationTable, config_hash: str = "") -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["features", "csr", "region", "available",
                    *(f"{m}_{s}" for m in METRICS for s in ("mean", "std")), "config_hash"])
        for fs, csr in ABLATION_CONFIGS:
            for region in table.regions:
                row = table.rows[(fs, csr)].get(region)
                if row is None:
                    w.writerow([fs, int(csr), region, 0, *([""] * 6), config_hash])
                else:
                    stats = [f"{v:.10g}" for m in METRICS for v in row.stat(m)]
                    w.writerow([fs, int(csr), region, 1, *stats, config_hash])
    return path


@dataclass
class PlotData:
    weeks: list
    y_true: np.ndarray
    predictions: dict[str, np.ndarray]
    val_start: object
    test_start: object

    def to_csv(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        lines = [f"# boundary,val,{format_epiweek(self.val_start)}",
                 f"# boundary,test,{format_epiweek(self.test_start)}",
                 ",".join(["epiweek", "ground_truth", *self.predictions])]
        for i, w in enumerate(self.weeks):
            vals = [float(self.y_true[i]), *(float(p[i]) for p in self.predictions.values())]
            lines.append(",".join([format_epiweek(w), *(f"{v:.10g}" for v in vals)]))
        path.write_text("\n".join(lines) + "\n")
        return path


def emit_plot_data(series: Mapping[str, PredictionSeries], spec: SplitSpec = SplitSpec(),
                   path=None) -> PlotData:
    """Ground truth plus one prediction column per variant, with validation/test start weeks.

    Every series must cover the same target weeks in the same order.
    """
    if not series:
        raise ValueError("no variants to plot")
    names = list(series)
    ref = series[names[0]]
    ref_idx = [week_index(w) for w in ref.weeks]
    for name in names[1:]:
        if [week_index(w) for w in series[name].weeks] != ref_idx:
            raise ValueError(f"variant {name} is not aligned on the same epi weeks as {names[0]}")
        if not np.array_equal(series[name].y_true, ref.y_true):
            raise ValueError(f"variant {name} disagrees on ground truth")
    i, j = spec.boundaries(len(ref.weeks))
    data = PlotData(list(ref.weeks), np.asarray(ref.y_true), {n: np.asarray(series[n].y_hat) for n in names},
                    ref.weeks[i], ref.weeks[j])
    if path is not None:
        data.to_csv(path)
    return data


def mean_series(runs: Sequence[PredictionSeries]) -> PredictionSeries:
    """Seed-average of aligned prediction series."""
    if not runs:
        raise ValueError("no runs")
    first = runs[0]
    return PredictionSeries(first.region, list(first.weeks), first.y_true.copy(),
                            np.mean([r.y_hat for r in runs], axis=0), list(first.splits))
