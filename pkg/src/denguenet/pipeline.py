"""Config-driven pipeline stages: extract -> correlate -> clean -> featurize -> train -> evaluate -> ablate -> plotdata.

Every stage writes ``manifests/<stage>.json`` carrying the config hash. A
stage refuses to run when its upstream manifest is missing, or when an
existing manifest was produced by a different config (unless forced).
"""

from __future__ import annotations

import copy
import csv
import dataclasses
import hashlib
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np
import yaml

from . import evaluation as ev
from .bands import BandSelection, SelectionPolicy, correlation_matrix, select_bands
from .csr import CloudShadowRemover, crop_to_tiles, swap_tiles
from .features import (GlcmSpec, embed_rgb, extract_texture, load_encoder, read_embeddings, read_texture_csv,
                       write_embeddings, write_texture_csv)
from .forecaster import ModelConfig, PredictionSeries, build_windows, make_variant, predict, train
from .ingestion import (FixtureProvider, MissingSceneError, MunicipalityRegion, SceneStore, SentinelHubProvider,
                        fetch_scene, format_epiweek, load_cases, longest_run, parse_epiweek, region_key,
                        resample_to_uniform, week_index, week_range)

logger = logging.getLogger(__name__)

STAGES = ("extract", "correlate", "clean", "featurize", "train", "evaluate", "ablate", "plotdata")
UPSTREAM = {
    "extract": None, "correlate": "extract", "clean": "correlate", "featurize": "clean",
    "train": "featurize", "evaluate": "train", "ablate": "featurize", "plotdata": "train",
}
DEFAULT_VARIANTS = ("satellite-only", "case-only", "combined")


class StageError(RuntimeError):
    def __init__(self, stage: str, message: str):
        super().__init__(f"[{stage}] {message}")
        self.stage = stage


# ---------------------------------------------------------------------------
# Configuration
# ---------------------------------------------------------------------------

@dataclass
class RunConfig:
    raw: dict
    base_dir: Path
    output_root: Path
    regions: list[MunicipalityRegion]
    start: Any
    end: Any
    provider: dict
    cases_path: Path
    band_policy: SelectionPolicy
    p_cloud: int
    p_shadow: int
    csr_overrides: dict
    glcm: GlcmSpec
    encoder: dict
    model: ModelConfig
    split: ev.SplitSpec
    seeds: tuple[int, ...]
    variants: tuple[str, ...]
    ablation: bool
    synth: dict = field(default_factory=dict)

    @classmethod
    def from_file(cls, path) -> "RunConfig":
        path = Path(path)
        if not path.is_file():
            raise FileNotFoundError(f"config file {path} not found")
        with open(path, encoding="utf-8") as fh:
            raw = yaml.safe_load(fh) or {}
        return cls.from_dict(raw, path.parent)

    @classmethod
    def from_dict(cls, raw: dict, base_dir=".") -> "RunConfig":
        base = Path(base_dir)
        resolve = lambda p: (base / p) if p is not None else None  # noqa: E731
        try:
            regions = [MunicipalityRegion(r["name"], tuple(float(v) for v in r["bbox"])) for r in raw["regions"]]
            weeks = raw["weeks"]
            start, end = parse_epiweek(str(weeks["start"])), parse_epiweek(str(weeks["end"]))
        except (KeyError, TypeError) as exc:
            raise ValueError(f"config missing required key: {exc}") from None
        if week_index(end) < week_index(start):
            raise ValueError("weeks.end precedes weeks.start")
        provider = dict(raw.get("provider", {"kind": "fixture", "path": "fixture/scenes"}))
        if provider.get("kind", "fixture") == "fixture":
            provider["path"] = resolve(provider.get("path", "fixture/scenes"))
        bands = raw.get("bands", {})
        csr = raw.get("csr", {})
        feats = raw.get("features", {})
        encoder = dict(feats.get("encoder", {"kind": "vit"}))
        if encoder.get("weights"):
            encoder["weights"] = str(resolve(encoder["weights"]))
        model_kw = dict(raw.get("model", {}))
        for key in ("hidden_sizes", "branches"):
            if key in model_kw:
                model_kw[key] = tuple(model_kw[key])
        split = raw.get("split", {})
        variants = tuple(raw.get("variants", DEFAULT_VARIANTS))
        return cls(
            raw=raw,
            base_dir=base,
            output_root=resolve(raw.get("output_root", "out")),
            regions=regions,
            start=start,
            end=end,
            provider=provider,
            cases_path=resolve(raw.get("cases", "fixture/cases.csv")),
            band_policy=SelectionPolicy(mode=bands.get("mode", "fixed"), threshold=float(bands.get("threshold", 0.8))),
            p_cloud=int(csr.get("p_cloud", 95)),
            p_shadow=int(csr.get("p_shadow", 5)),
            csr_overrides=csr.get("overrides", {}) or {},
            glcm=GlcmSpec(n_gray_levels=int(feats.get("glcm_levels", 32))),
            encoder=encoder,
            model=ModelConfig(**model_kw),
            split=ev.SplitSpec(**split) if split else ev.SplitSpec(),
            seeds=tuple(int(s) for s in raw.get("seeds", (0, 1, 2))),
            variants=variants,
            ablation=bool(raw.get("ablation", {}).get("enabled", True)),
            synth=raw.get("synth", {}) or {},
        )

    @property
    def hash(self) -> str:
        """Provenance hash of the config contents; the output root is excluded."""
        content = {k: v for k, v in self.raw.items() if k != "output_root"}
        blob = json.dumps(content, sort_keys=True, default=str).encode()
        return hashlib.sha256(blob).hexdigest()[:16]

    def only(self, region_name: str | None) -> "RunConfig":
        if region_name is None:
            return self
        keep = [r for r in self.regions if r.key == region_key(region_name)]
        if not keep:
            raise ValueError(f"region {region_name!r} not in config")
        return dataclasses.replace(self, regions=keep)

    def csr_percentiles(self, region: MunicipalityRegion, band: str) -> tuple[int, int]:
        over = self.csr_overrides.get(region.name, {}).get(band, {})
        return int(over.get("p_cloud", self.p_cloud)), int(over.get("p_shadow", self.p_shadow))


# ---------------------------------------------------------------------------
# Pipeline
# ---------------------------------------------------------------------------

def _write_text(path: Path, text: str) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text)
    return path


class Pipeline:
    def __init__(self, config: RunConfig, force: bool = False):
        self.cfg = config
        self.force = force
        self.root = Path(config.output_root)
        self.store = SceneStore(self.root)
        self._cases = None

    # -- manifests ---------------------------------------------------------

    def manifest_path(self, stage: str) -> Path:
        return self.root / "manifests" / f"{stage}.json"

    def manifest(self, stage: str) -> dict | None:
        p = self.manifest_path(stage)
        return json.loads(p.read_text()) if p.exists() else None

    def _check(self, stage: str):
        up = UPSTREAM[stage]
        if up is not None:
            m = self.manifest(up)
            if m is None:
                raise StageError(stage, f"missing upstream artifacts: run {up} first")
            if m["config_hash"] != self.cfg.hash and not self.force:
                raise StageError(stage, f"{up} artifacts were produced by config {m['config_hash']}, "
                                        f"current config is {self.cfg.hash}; rerun {up} or pass --force")
        own = self.manifest(stage)
        if own is not None and own["config_hash"] != self.cfg.hash and not self.force:
            raise StageError(stage, f"existing {stage} artifacts come from config {own['config_hash']}; "
                                    "use --force to overwrite")

    def _done(self, stage: str, **info) -> dict:
        m = {"stage": stage, "config_hash": self.cfg.hash, **info}
        _write_text(self.manifest_path(stage), json.dumps(m, indent=1, sort_keys=True, default=str) + "\n")
        return m

    def _fresh(self, stage: str) -> bool:
        """True when cached per-item artifacts of ``stage`` may be reused."""
        m = self.manifest(stage)
        return not self.force and m is not None and m["config_hash"] == self.cfg.hash

    # -- shared loaders ----------------------------------------------------

    def cases(self):
        if self._cases is None:
            if not Path(self.cfg.cases_path).is_file():
                raise StageError("extract", f"case file {self.cfg.cases_path} not found")
            self._cases = load_cases(self.cfg.cases_path, self.cfg.regions)
        return self._cases

    def aligned_weeks(self, region: MunicipalityRegion) -> list:
        m = self.manifest("extract")
        stored = {week_index(parse_epiweek(w)): parse_epiweek(w) for w in m["regions"][region.name]["weeks"]}
        cases = {week_index(c.epiweek) for c in self.cases() if c.region == region.name}
        common = sorted(stored.keys() & cases)
        if not common:
            raise StageError("correlate", f"{region.name}: no week has both a scene and a case count")
        lo, hi = longest_run(common)
        return [stored[i] for i in common[lo:hi]]

    def case_series(self, region: MunicipalityRegion, weeks) -> np.ndarray:
        by_week = {week_index(c.epiweek): c.cases for c in self.cases() if c.region == region.name}
        return np.array([by_week[week_index(w)] for w in weeks], dtype=np.float64)

    def scene(self, region, week):
        return resample_to_uniform(self.store.read(region, week))

    def training_weeks(self, weeks) -> list:
        """Weeks whose features feed training windows only (no validation/test leakage)."""
        w = self.cfg.model.window
        n_windows = len(weeks) - w
        if n_windows < 10:
            raise StageError("correlate", f"only {n_windows} windows; need at least 10 to split")
        i, _ = self.cfg.split.boundaries(n_windows)
        return list(weeks[:i + w - 1])

    def selection(self) -> BandSelection:
        m = self.manifest("correlate")
        return BandSelection(m["selection"]["texture_band"], tuple(m["selection"]["embedding_bands"]))

    # -- stages ------------------------------------------------------------

    def provider(self):
        kind = self.cfg.provider.get("kind", "fixture")
        if kind == "fixture":
            return FixtureProvider(self.cfg.provider["path"])
        if kind == "sentinelhub":
            return SentinelHubProvider.from_env(resolution=int(self.cfg.provider.get("resolution", 10)))
        raise StageError("extract", f"unknown provider kind {kind!r}")

    def extract(self):
        self._check("extract")
        try:
            provider = self.provider()
        except Exception as exc:
            raise StageError("extract", str(exc)) from exc
        reuse = self._fresh("extract")
        info = {}
        for region in self.cfg.regions:
            got, missing = [], []
            for week in week_range(self.cfg.start, self.cfg.end):
                if reuse and self.store.path(region, week).exists():
                    got.append(format_epiweek(week))
                    continue
                try:
                    fetch_scene(region, week, provider, self.store)
                    got.append(format_epiweek(week))
                except MissingSceneError:
                    missing.append(format_epiweek(week))
            logger.info("%s: %d scenes, %d weeks without acquisition", region.name, len(got), len(missing))
            info[region.name] = {"weeks": got, "missing": missing}
        self.cases()
        return self._done("extract", regions=info)

    def correlate(self):
        self._check("correlate")
        scenes, per_region = [], {}
        for region in self.cfg.regions:
            weeks = self.aligned_weeks(region)
            train_weeks = self.training_weeks(weeks)
            per_region[region.name] = {"aligned": [format_epiweek(w) for w in weeks],
                                       "training": [format_epiweek(w) for w in train_weeks]}
            scenes.extend(self.scene(region, w) for w in train_weeks)
        corr = correlation_matrix(scenes)
        sel = select_bands(corr, self.cfg.band_policy)
        reports = self.root / "reports"
        corr.to_csv(reports / "correlation.csv")
        with open(reports / "correlation_heatmap.csv", "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["band_row", "band_col", "rho", "p_value"])
            for a, b, r, p in corr.heatmap_rows():
                w.writerow([a, b, f"{r:.6f}", f"{p:.6g}"])
        return self._done("correlate", n_scenes=corr.n_scenes, regions=per_region,
                          selection={"texture_band": sel.texture_band, "embedding_bands": list(sel.embedding_bands)})

    def _bands(self):
        sel = self.selection()
        return [sel.texture_band, *sel.embedding_bands]

    def clean(self):
        self._check("clean")
        corr_m = self.manifest("correlate")
        bands = self._bands()
        info = {}
        for region in self.cfg.regions:
            weeks = [parse_epiweek(w) for w in corr_m["regions"][region.name]["aligned"]]
            train_weeks = {week_index(parse_epiweek(w)) for w in corr_m["regions"][region.name]["training"]}
            scenes = {week_index(w): self.scene(region, w) for w in weeks}
            removers, thresholds = {}, {}
            for band in bands:
                p_cloud, p_shadow = self.cfg.csr_percentiles(region, band)
                rasters = [scenes[week_index(w)].band(band) for w in weeks if week_index(w) in train_weeks]
                removers[band] = CloudShadowRemover(p_cloud, p_shadow).fit(rasters)
                th = removers[band].thresholds
                thresholds[band] = {"cloud": th.cloud_threshold, "shadow": th.shadow_threshold,
                                    "percentiles": [p_cloud, p_shadow]}
            out_dir = self.root / "clean" / region.key
            out_dir.mkdir(parents=True, exist_ok=True)
            rows = []
            for w in weeks:
                scene = scenes[week_index(w)]
                cleaned, masks = {}, {}
                for band in bands:
                    cropped, mask, grid = removers[band].masks(scene.band(band))
                    out, report = swap_tiles(cropped, grid, removers[band].bank)
                    cleaned[band] = out.astype(np.float32)
                    masks[band] = (mask.cloud.astype(np.uint8) | (mask.shadow.astype(np.uint8) << 1))
                    rows.append([format_epiweek(w), band, grid.n_abnormal, len(report.swapped), len(report.missing)])
                np.savez_compressed(out_dir / f"{format_epiweek(w)}.npz", **cleaned)
                np.savez_compressed(out_dir / f"{format_epiweek(w)}-masks.npz", **masks)
            path = self.root / "reports" / f"csr_{region.key}.csv"
            path.parent.mkdir(parents=True, exist_ok=True)
            with open(path, "w", newline="") as fh:
                wr = csv.writer(fh, lineterminator="\n")
                wr.writerow(["epiweek", "band", "abnormal_tiles", "swapped", "missing_bank"])
                wr.writerows(rows)
            info[region.name] = thresholds
        return self._done("clean", thresholds=info, bands=bands)

    def featurize(self):
        self._check("featurize")
        corr_m = self.manifest("correlate")
        sel = self.selection()
        try:
            opts = dict(self.cfg.encoder)
            encoder = load_encoder(opts.pop("kind", "vit"), opts.pop("weights", None), opts.pop("arch", "vit_b_16"),
                                   int(opts.pop("grid", 4)), **opts)
        except Exception as exc:
            raise StageError("featurize", str(exc)) from exc
        out = self.root / "features"
        for region in self.cfg.regions:
            weeks = [parse_epiweek(w) for w in corr_m["regions"][region.name]["aligned"]]
            rows = []
            emb = {"on": [], "off": []}
            for w in weeks:
                label = format_epiweek(w)
                with np.load(self.root / "clean" / region.key / f"{label}.npz") as z:
                    cleaned = {b: z[b] for b in z.files}
                scene = self.scene(region, w)
                raw = {b: crop_to_tiles(np.asarray(scene.band(b), dtype=np.float32)) for b in cleaned}
                for csr, src in (("on", cleaned), ("off", raw)):
                    rows.append((label, csr, extract_texture(src[sel.texture_band], self.cfg.glcm)))
                    emb[csr].append(embed_rgb(np.stack([src[b] for b in sel.embedding_bands]), encoder))
            write_texture_csv(out / f"{region.key}.csv", rows)
            for csr in ("on", "off"):
                write_embeddings(out, region.key, csr, [format_epiweek(w) for w in weeks], np.stack(emb[csr]),
                                 encoder.identity)
        return self._done("featurize", encoder=encoder.identity, dim=int(encoder.dim))

    def windows(self, region: MunicipalityRegion, csr: bool = True):
        out = self.root / "features"
        csv_path = out / f"{region.key}.csv"
        if not csv_path.exists():
            raise FileNotFoundError(f"feature cache {csv_path} missing")
        tex = read_texture_csv(csv_path)
        tag = "on" if csr else "off"
        weeks_lbl, emb, _ = read_embeddings(out, region.key, tag)
        weeks = [parse_epiweek(w) for w in weeks_lbl]
        texture = np.stack([tex[(w, tag)].as_array() for w in weeks_lbl])
        return build_windows(weeks, texture, emb, self.case_series(region, weeks), self.cfg.model.window)

    def _fit_predict(self, region, model_cfg: ModelConfig, csr: bool, name: str) -> PredictionSeries:
        pred_path = self.root / "predictions" / f"{name}.csv"
        model_dir = self.root / "models" / name
        if self._fresh("train") and pred_path.exists() and (model_dir / "weights.npz").exists():
            return PredictionSeries.from_csv(pred_path, region.name)
        windows = self.windows(region, csr)
        tr, va, te = ev.chrono_split(windows, self.cfg.split)
        model = train(tr, va, model_cfg)
        model.save(model_dir)
        labels = ev.split_labels(len(windows), self.cfg.split)
        series = predict(model, windows, region.name, labels)
        series.to_csv(pred_path)
        return series

    def train(self):
        self._check("train")
        runs = []
        for region in self.cfg.regions:
            for variant in self.cfg.variants:
                for seed in self.cfg.seeds:
                    cfg = dataclasses.replace(make_variant(self.cfg.model, variant), seed=seed)
                    name = f"{region.key}-{variant}-{seed}"
                    logger.info("training %s", name)
                    self._fit_predict(region, cfg, True, name)
                    runs.append(name)
        return self._done("train", runs=runs)

    def _load_predictions(self, region_name: str, variant: str, seed: int) -> PredictionSeries:
        region = next(r for r in self.cfg.regions if r.name == region_name)
        path = self.root / "predictions" / f"{region.key}-{variant}-{seed}.csv"
        if not path.exists():
            raise FileNotFoundError(f"{path} missing: run train first")
        return PredictionSeries.from_csv(path, region_name)

    def evaluate(self):
        self._check("evaluate")
        rows = [ev.evaluate_repeated(self._load_predictions, r.name, v, self.cfg.seeds)
                for v in self.cfg.variants for r in self.cfg.regions]
        reports = self.root / "reports"
        ev.write_metrics_csv(reports / "metrics.csv", rows, self.cfg.hash)
        text = [f"# config {self.cfg.hash}; seeds {list(self.cfg.seeds)}; mean±std (population)\n"]
        for v in self.cfg.variants:
            text.append(f"\n[{v}]\n")
            text.append(ev.metrics_table([row for row in rows if row.variant == v]))
        _write_text(reports / "table1.txt", "".join(text))
        return self._done("evaluate", incomplete=[f"{r.region}/{r.variant}" for r in rows if r.incomplete])

    def _ablation_runner(self, region_name: str, feature_set: str, csr: bool, seed: int) -> PredictionSeries:
        region = next(r for r in self.cfg.regions if r.name == region_name)
        branches = ev.FEATURE_SETS[feature_set]
        if csr and set(branches) == {"texture", "embedding"} and "satellite-only" in self.cfg.variants:
            shared = self.root / "predictions" / f"{region.key}-satellite-only-{seed}.csv"
            if shared.exists() and self._fresh("train"):
                return PredictionSeries.from_csv(shared, region_name)
        cfg = dataclasses.replace(self.cfg.model, branches=branches, seed=seed)
        tag = feature_set.lower().replace("+", "-")
        name = f"{region.key}-ablation-{tag}-csr{'on' if csr else 'off'}-{seed}"
        return self._fit_predict(region, cfg, csr, name)

    def ablate(self):
        self._check("ablate")
        table = ev.ablation_grid(self._ablation_runner, [r.name for r in self.cfg.regions], self.cfg.seeds)
        reports = self.root / "reports"
        ev.write_ablation_csv(reports / "ablation.csv", table, self.cfg.hash)
        head = f"# config {self.cfg.hash}; MAE mean±std over seeds {list(self.cfg.seeds)}\n"
        _write_text(reports / "table2.txt", head + ev.ablation_table(table))
        _write_text(reports / "table3.txt", f"# config {self.cfg.hash}; averaged over regions\n"
                    + ev.comparison_table(table))
        return self._done("ablate")

    def plotdata(self):
        self._check("plotdata")
        for region in self.cfg.regions:
            series = {}
            for v in self.cfg.variants:
                runs = [self._load_predictions(region.name, v, s) for s in self.cfg.seeds]
                series[v] = ev.mean_series(runs)
            data = ev.emit_plot_data(series, self.cfg.split)
            path = data.to_csv(self.root / "reports" / f"plot_{region.key}.csv")
            text = path.read_text()
            path.write_text(f"# config {self.cfg.hash}\n" + text)
        return self._done("plotdata")

    def run(self, stage: str):
        if stage == "all":
            stages = [s for s in STAGES if s != "ablate" or self.cfg.ablation]
            return [self.run(s) for s in stages]
        if stage not in STAGES:
            raise ValueError(f"unknown stage {stage!r}")
        logger.info("stage %s", stage)
        return getattr(self, stage)()


def run_synth(config: RunConfig) -> dict:
    """Generate the synthetic fixture at the config's provider path and case file."""
    from .synth import SynthConfig, generate

    if config.provider.get("kind", "fixture") != "fixture":
        raise StageError("synth", "synth writes an offline fixture; set provider.kind to 'fixture'")
    opts = copy.deepcopy(config.synth)
    start = parse_epiweek(str(opts.pop("start", format_epiweek(config.start))))
    n_weeks = int(opts.pop("weeks", week_index(config.end) - week_index(config.start) + 1))
    scfg = SynthConfig(config.regions, start, n_weeks=n_weeks, **opts)
    truth = generate(scfg, config.provider["path"], config.cases_path)
    return {name: {"weeks": n_weeks} for name in truth}
