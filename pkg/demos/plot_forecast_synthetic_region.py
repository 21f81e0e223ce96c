"""
Forecasting next week's cases on the synthetic fixture
======================================================

The fixture plants a seasonal signal in the SWIR brightness and makes next
week's case count linear in it. The pipeline has to find that signal through
cloud removal, texture extraction and the LSTM branches.

Runs every stage with fewer epochs and one seed so it finishes in seconds;
``denguenet all --config demos/synthetic.yaml`` is the full-size run.
"""
import tempfile
from pathlib import Path

import yaml

from denguenet.pipeline import Pipeline, RunConfig, run_synth

here = Path(__file__).parent
raw = yaml.safe_load((here / "synthetic.yaml").read_text(encoding="utf-8"))
raw["model"]["epochs"] = 20
raw["seeds"] = [0]
raw["ablation"]["enabled"] = False

with tempfile.TemporaryDirectory() as tmp:
    config = RunConfig.from_dict(raw, tmp)
    run_synth(config)
    pipeline = Pipeline(config)
    for stage in ("extract", "correlate", "clean", "featurize", "train", "evaluate", "plotdata"):
        info = pipeline.run(stage)
        if stage == "correlate":
            print("selected bands:", info["selection"])

    reports = Path(tmp) / "out" / "reports"
    print((reports / "table1.txt").read_text())
    plot = (reports / "plot_ibague.csv").read_text().splitlines()
    print("\n".join(plot[:6]), "\n...")
