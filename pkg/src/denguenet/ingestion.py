"""Scene acquisition, scene storage, case files and week alignment.

Scenes are per municipality and per epidemiological week. Weeks follow the
MMWR/CDC calendar (Sunday start, week 1 contains January 4th) through
:class:`epiweeks.Week`, which is used directly as the week type.
"""

from __future__ import annotations

import csv
import datetime as dt
import io
import json
import logging
import math
import os
import threading
import time
import unicodedata
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Protocol, Sequence

import numpy as np
import tifffile
from epiweeks import Week

logger = logging.getLogger(__name__)

EpiWeek = Week

# Sentinel-2 L2A has no B10; 12 bands as stored.
BAND_NAMES = ("B01", "B02", "B03", "B04", "B05", "B06", "B07", "B08", "B8A", "B09", "B11", "B12")
NATIVE_MPP = {
    "B01": 60, "B02": 10, "B03": 10, "B04": 10, "B05": 20, "B06": 20,
    "B07": 20, "B08": 10, "B8A": 20, "B09": 60, "B11": 20, "B12": 20,
}

CASE_HEADER = ("region", "year", "epiweek", "cases")


class IngestionError(Exception):
    pass


class MissingSceneError(IngestionError):
    def __init__(self, region: str, epiweek: Week, detail: str = "no acquisition in week"):
        super().__init__(f"{region} {format_epiweek(epiweek)}: {detail}")
        self.region = region
        self.epiweek = epiweek


class ProviderError(IngestionError):
    """Authentication, quota or transport failure reported by a scene provider."""

    def __init__(self, message: str, status: int | None = None, retry_after: float | None = None):
        super().__init__(message)
        self.status = status
        self.retry_after = retry_after


class CaseFileError(IngestionError):
    def __init__(self, message: str, row: int | None = None):
        super().__init__(f"row {row}: {message}" if row is not None else message)
        self.row = row


class AlignmentError(IngestionError):
    pass


# ---------------------------------------------------------------------------
# Weeks and regions
# ---------------------------------------------------------------------------

def format_epiweek(week: Week) -> str:
    return f"{week.year}-W{week.week:02d}"


def parse_epiweek(text: str) -> Week:
    """Parse ``2017-W10`` (also accepts ``201710``)."""
    text = text.strip()
    try:
        if "-W" in text:
            year, wk = text.split("-W")
            return Week(int(year), int(wk))
        if len(text) == 6 and text.isdigit():
            return Week(int(text[:4]), int(text[4:]))
    except ValueError as exc:
        raise ValueError(f"invalid epi week {text!r}: {exc}") from None
    raise ValueError(f"invalid epi week {text!r}")


def week_index(week: Week) -> int:
    """Number of weeks since an arbitrary fixed origin; consecutive weeks differ by 1."""
    return (week.startdate() - dt.date(1970, 1, 4)).days // 7


def week_range(start: Week, end: Week) -> list[Week]:
    n = week_index(end) - week_index(start)
    return [start + i for i in range(n + 1)]


def region_key(name: str) -> str:
    """Accent- and case-insensitive key, also used as the on-disk directory name."""
    stripped = unicodedata.normalize("NFKD", name).encode("ascii", "ignore").decode()
    return "-".join(stripped.lower().split())


@dataclass(frozen=True)
class MunicipalityRegion:
    name: str
    bbox: tuple[float, float, float, float]  # lat_min, lon_min, lat_max, lon_max

    def __post_init__(self):
        lat_min, lon_min, lat_max, lon_max = self.bbox
        if not (lat_min < lat_max and lon_min < lon_max):
            raise ValueError(f"degenerate bbox for {self.name}: {self.bbox}")
        if not (-90 <= lat_min and lat_max <= 90 and -180 <= lon_min and lon_max <= 180):
            raise ValueError(f"bbox outside WGS84 range for {self.name}: {self.bbox}")

    @property
    def key(self) -> str:
        return region_key(self.name)


# ---------------------------------------------------------------------------
# Scenes
# ---------------------------------------------------------------------------

def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.asarray(a)
    if a.flags.writeable:
        a = a.copy()
        a.flags.writeable = False
    return a


@dataclass(frozen=True, eq=False)
class SatelliteScene:
    """One region/week observation. Band arrays are read-only."""

    region: MunicipalityRegion
    epiweek: Week
    bands: tuple[np.ndarray, ...]
    resolutions: tuple[int, ...]
    band_names: tuple[str, ...] = BAND_NAMES
    acquired: dt.date | None = None
    cloud_cover: float | None = None

    def __post_init__(self):
        if not (len(self.bands) == len(self.resolutions) == len(self.band_names)):
            raise ValueError("bands, resolutions and band_names differ in length")
        object.__setattr__(self, "bands", tuple(_frozen(b) for b in self.bands))
        object.__setattr__(self, "resolutions", tuple(int(r) for r in self.resolutions))
        for b in self.bands:
            if b.ndim != 2:
                raise ValueError("each band must be a 2D raster")

    @property
    def is_uniform(self) -> bool:
        return len(set(self.resolutions)) == 1 and len({b.shape for b in self.bands}) == 1

    @property
    def shape(self) -> tuple[int, int]:
        if not self.is_uniform:
            raise ValueError("scene has mixed band resolutions; resample first")
        return self.bands[0].shape

    def band(self, name: str) -> np.ndarray:
        return self.bands[self.band_names.index(name)]

    def stack(self, names: Sequence[str] | None = None) -> np.ndarray:
        names = self.band_names if names is None else names
        return np.stack([self.band(n) for n in names])


def resample_to_uniform(scene: SatelliteScene, target_mpp: int = 10) -> SatelliteScene:
    """Nearest-neighbour upsampling of every band to ``target_mpp``.

    Each source pixel is replicated into a ``factor x factor`` block, so no
    new values are created. Already-uniform bands pass through untouched.
    """
    out = []
    for name, band, mpp in zip(scene.band_names, scene.bands, scene.resolutions):
        factor = mpp / target_mpp
        if factor < 1 or not float(factor).is_integer():
            raise ValueError(f"{name}: {mpp} m/px is not an integer multiple of {target_mpp} m/px")
        factor = int(factor)
        out.append(band if factor == 1 else np.repeat(np.repeat(band, factor, axis=0), factor, axis=1))
    shapes = {b.shape for b in out}
    if len(shapes) != 1:
        raise ValueError(f"bands disagree in footprint after resampling: {sorted(shapes)}")
    return SatelliteScene(scene.region, scene.epiweek, tuple(out), (target_mpp,) * len(out),
                          scene.band_names, scene.acquired, scene.cloud_cover)


# ---------------------------------------------------------------------------
# Scene store (multi-page GeoTIFF, one page per band, uint16)
# ---------------------------------------------------------------------------

def _geotags(bbox, shape, mpp):
    lat_min, lon_min, lat_max, lon_max = bbox
    h, w = shape
    scale = ((lon_max - lon_min) / w, (lat_max - lat_min) / h, 0.0)
    tiepoint = (0.0, 0.0, 0.0, lon_min, lat_max, 0.0)
    # GeoKeyDirectory: geographic model, pixel-is-area, EPSG:4326
    keys = (1, 1, 0, 3, 1024, 0, 1, 2, 1025, 0, 1, 1, 2048, 0, 1, 4326)
    return [
        (33550, "d", 3, scale, False),
        (33922, "d", 6, tiepoint, False),
        (34735, "H", len(keys), keys, False),
    ]


def write_scene_tiff(path: str | os.PathLike, scene: SatelliteScene) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    meta = {
        "region": scene.region.name,
        "bbox": list(scene.region.bbox),
        "epiweek": format_epiweek(scene.epiweek),
        "band_names": list(scene.band_names),
        "resolutions": list(scene.resolutions),
        "acquired": scene.acquired.isoformat() if scene.acquired else None,
        "cloud_cover": scene.cloud_cover,
    }
    tmp = path.with_name(f".{path.name}.{os.getpid()}.{threading.get_ident()}.tmp")
    with tifffile.TiffWriter(tmp) as tw:
        for i, (band, mpp) in enumerate(zip(scene.bands, scene.resolutions)):
            if band.min(initial=0) < 0 or band.max(initial=0) > 65535:
                raise ValueError("reflectance outside uint16 range")
            tw.write(
                np.ascontiguousarray(band, dtype=np.uint16),
                description=json.dumps(meta, sort_keys=True) if i == 0 else None,
                metadata=None,
                extratags=_geotags(scene.region.bbox, band.shape, mpp),
            )
    os.replace(tmp, path)
    return path


def read_scene_tiff(path: str | os.PathLike) -> SatelliteScene:
    with tifffile.TiffFile(path) as tf:
        meta = json.loads(tf.pages[0].description)
        bands = tuple(p.asarray() for p in tf.pages)
    region = MunicipalityRegion(meta["region"], tuple(meta["bbox"]))
    acquired = dt.date.fromisoformat(meta["acquired"]) if meta.get("acquired") else None
    return SatelliteScene(region, parse_epiweek(meta["epiweek"]), bands, tuple(meta["resolutions"]),
                          tuple(meta["band_names"]), acquired, meta.get("cloud_cover"))


class SceneStore:
    """``<root>/scenes/<region>/<year>-W<week>.tiff``."""

    def __init__(self, root: str | os.PathLike):
        self.root = Path(root)

    def path(self, region: MunicipalityRegion | str, epiweek: Week) -> Path:
        key = region.key if isinstance(region, MunicipalityRegion) else region_key(region)
        return self.root / "scenes" / key / f"{format_epiweek(epiweek)}.tiff"

    def write(self, scene: SatelliteScene) -> Path:
        return write_scene_tiff(self.path(scene.region, scene.epiweek), scene)

    def read(self, region, epiweek: Week) -> SatelliteScene:
        p = self.path(region, epiweek)
        if not p.exists():
            name = region.name if isinstance(region, MunicipalityRegion) else region
            raise MissingSceneError(name, epiweek, f"not in scene store ({p})")
        return read_scene_tiff(p)

    def weeks(self, region) -> list[Week]:
        key = region.key if isinstance(region, MunicipalityRegion) else region_key(region)
        d = self.root / "scenes" / key
        if not d.is_dir():
            return []
        return sorted(parse_epiweek(p.stem) for p in d.glob("*.tiff"))


# ---------------------------------------------------------------------------
# Providers
# ---------------------------------------------------------------------------

class SceneProvider(Protocol):
    def least_cloudy(self, region: MunicipalityRegion, epiweek: Week) -> SatelliteScene:
        """Least-cloud-cover scene acquired inside ``epiweek``; raises MissingSceneError."""


class FixtureProvider:
    """Offline provider backed by a directory of scene files.

    Files live in ``<root>/<region>/`` and are either already keyed by week
    (``2017-W10.tiff``) or are individual acquisitions named by date
    (``2017-03-06.tiff``) whose metadata carries ``cloud_cover``; in the latter
    case the acquisition with the least cloud cover inside the week wins.
    """

    def __init__(self, root: str | os.PathLike):
        self.root = Path(root)
        if not self.root.is_dir():
            raise IngestionError(f"fixture directory {self.root} does not exist")

    def least_cloudy(self, region: MunicipalityRegion, epiweek: Week) -> SatelliteScene:
        d = self.root / region.key
        keyed = d / f"{format_epiweek(epiweek)}.tiff"
        if keyed.exists():
            return read_scene_tiff(keyed)
        start, end = epiweek.startdate(), epiweek.enddate()
        candidates = []
        for p in sorted(d.glob("????-??-??.tiff")):
            day = dt.date.fromisoformat(p.stem)
            if start <= day <= end:
                candidates.append(read_scene_tiff(p))
        if not candidates:
            raise MissingSceneError(region.name, epiweek)
        best = min(candidates, key=lambda s: (math.inf if s.cloud_cover is None else s.cloud_cover, s.acquired))
        return SatelliteScene(region, epiweek, best.bands, best.resolutions, best.band_names,
                              best.acquired, best.cloud_cover)


class RateLimiter:
    """Minimum spacing between calls, shared across threads."""

    def __init__(self, calls_per_second: float):
        self.interval = 1.0 / calls_per_second if calls_per_second > 0 else 0.0
        self._lock = threading.Lock()
        self._next = 0.0

    def wait(self):
        with self._lock:
            now = time.monotonic()
            delay = self._next - now
            self._next = max(now, self._next) + self.interval
        if delay > 0:
            time.sleep(delay)


EVALSCRIPT = """//VERSION=3
function setup() {
  return {
    input: [{bands: %s, units: "REFLECTANCE"}],
    output: {bands: %d, sampleType: "UINT16"}
  };
}
function evaluatePixel(s) {
  return [%s];
}
"""


class SentinelHubProvider:
    """Live provider using the Sentinel Hub Catalog and Process APIs.

    The catalog search decides whether the week has any acquisition and
    records the least cloudy one; the process request then mosaics with
    ``leastCC`` over the week at ``resolution`` metres, so all bands come
    back on the same grid.
    """

    token_url = "https://services.sentinel-hub.com/auth/realms/main/protocol/openid-connect/token"
    base_url = "https://services.sentinel-hub.com"
    collection = "sentinel-2-l2a"

    def __init__(self, client_id: str, client_secret: str, session=None, resolution: int = 10,
                 band_names: Sequence[str] = BAND_NAMES, rate_limiter: RateLimiter | None = None):
        if session is None:
            import requests
            session = requests.Session()
        self.client_id = client_id
        self.client_secret = client_secret
        self.session = session
        self.resolution = resolution
        self.band_names = tuple(band_names)
        self.rate_limiter = rate_limiter or RateLimiter(5.0)
        self._token: str | None = None
        self._token_expiry = 0.0

    @classmethod
    def from_env(cls, **kwargs) -> "SentinelHubProvider":
        try:
            return cls(os.environ["SH_CLIENT_ID"], os.environ["SH_CLIENT_SECRET"], **kwargs)
        except KeyError as exc:
            raise ProviderError(f"missing credential environment variable {exc.args[0]}") from None

    def grid_size(self, region: MunicipalityRegion) -> tuple[int, int]:
        lat_min, lon_min, lat_max, lon_max = region.bbox
        lat_mid = math.radians((lat_min + lat_max) / 2)
        width_m = (lon_max - lon_min) * 111_320.0 * math.cos(lat_mid)
        height_m = (lat_max - lat_min) * 110_574.0
        return max(1, round(height_m / self.resolution)), max(1, round(width_m / self.resolution))

    def _interval(self, epiweek: Week) -> tuple[str, str]:
        return (f"{epiweek.startdate().isoformat()}T00:00:00Z", f"{epiweek.enddate().isoformat()}T23:59:59Z")

    def catalog_request(self, region: MunicipalityRegion, epiweek: Week) -> dict:
        lat_min, lon_min, lat_max, lon_max = region.bbox
        start, end = self._interval(epiweek)
        return {
            "bbox": [lon_min, lat_min, lon_max, lat_max],
            "datetime": f"{start}/{end}",
            "collections": [self.collection],
            "limit": 100,
            "fields": {"include": ["id", "properties.datetime", "properties.eo:cloud_cover"]},
        }

    def process_request(self, region: MunicipalityRegion, epiweek: Week) -> dict:
        lat_min, lon_min, lat_max, lon_max = region.bbox
        start, end = self._interval(epiweek)
        height, width = self.grid_size(region)
        bands = json.dumps(list(self.band_names))
        scaled = ", ".join(f"s.{b} * 10000" for b in self.band_names)
        return {
            "input": {
                "bounds": {
                    "bbox": [lon_min, lat_min, lon_max, lat_max],
                    "properties": {"crs": "http://www.opengis.net/def/crs/OGC/1.3/CRS84"},
                },
                "data": [{
                    "type": self.collection,
                    "dataFilter": {"timeRange": {"from": start, "to": end}, "mosaickingOrder": "leastCC"},
                }],
            },
            "output": {
                "width": width,
                "height": height,
                "responses": [{"identifier": "default", "format": {"type": "image/tiff"}}],
            },
            "evalscript": EVALSCRIPT % (bands, len(self.band_names), scaled),
        }

    def _headers(self) -> dict:
        if self._token is None or time.time() > self._token_expiry - 60:
            resp = self.session.post(self.token_url, data={
                "grant_type": "client_credentials",
                "client_id": self.client_id,
                "client_secret": self.client_secret,
            })
            self._check(resp)
            body = resp.json()
            self._token = body["access_token"]
            self._token_expiry = time.time() + float(body.get("expires_in", 3600))
        return {"Authorization": f"Bearer {self._token}"}

    @staticmethod
    def _check(resp):
        if resp.status_code < 400:
            return
        retry_after = resp.headers.get("Retry-After")
        retry_after = float(retry_after) if retry_after is not None else None
        if resp.status_code in (401, 403):
            raise ProviderError(f"authentication failed ({resp.status_code})", resp.status_code)
        if resp.status_code == 429:
            raise ProviderError("rate limited", resp.status_code, retry_after)
        raise ProviderError(f"provider error {resp.status_code}: {resp.text[:200]}", resp.status_code, retry_after)

    def _post(self, path: str, payload: dict, **kwargs):
        self.rate_limiter.wait()
        resp = self.session.post(self.base_url + path, json=payload, headers=self._headers(), **kwargs)
        self._check(resp)
        return resp

    def least_cloudy(self, region: MunicipalityRegion, epiweek: Week) -> SatelliteScene:
        found = self._post("/api/v1/catalog/1.0.0/search", self.catalog_request(region, epiweek)).json()
        features = found.get("features", [])
        if not features:
            raise MissingSceneError(region.name, epiweek)
        best = min(features, key=lambda f: (f["properties"].get("eo:cloud_cover", math.inf),
                                            f["properties"]["datetime"]))
        acquired = dt.date.fromisoformat(best["properties"]["datetime"][:10])
        resp = self._post("/api/v1/process", self.process_request(region, epiweek))
        cube = tifffile.imread(io.BytesIO(resp.content))
        if cube.ndim == 2:
            cube = cube[..., None]
        bands = tuple(np.ascontiguousarray(cube[..., i]) for i in range(cube.shape[-1]))
        return SatelliteScene(region, epiweek, bands, (self.resolution,) * len(bands), self.band_names,
                              acquired, best["properties"].get("eo:cloud_cover"))


def fetch_scene(region: MunicipalityRegion, epiweek: Week, provider: SceneProvider,
                store: SceneStore | None = None) -> SatelliteScene:
    """Least-cloudy scene for the week, persisted to ``store`` before returning."""
    scene = provider.least_cloudy(region, epiweek)
    if store is not None:
        store.write(scene)
    return scene


# ---------------------------------------------------------------------------
# Case counts
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class CaseRecord:
    region: str
    epiweek: Week
    cases: int


def load_cases(path: str | os.PathLike, regions: Iterable[MunicipalityRegion] | None = None) -> list[CaseRecord]:
    """Parse a ``region,year,epiweek,cases`` CSV.

    When ``regions`` is given, region names are matched accent- and
    case-insensitively and replaced by the configured spelling; rows for
    other regions are skipped. Row numbers in errors count the header as 1.
    """
    canonical = {r.key: r.name for r in regions} if regions is not None else None
    records, seen = [], {}
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or tuple(h.strip().lower() for h in header) != CASE_HEADER:
            raise CaseFileError(f"expected header {','.join(CASE_HEADER)}, got {header}", 1)
        for rowno, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != 4:
                raise CaseFileError(f"expected 4 fields, got {len(row)}", rowno)
            name, year, week, cases = (c.strip() for c in row)
            try:
                epiweek = Week(int(year), int(week))
            except ValueError as exc:
                raise CaseFileError(f"malformed epi week {year}/{week}: {exc}", rowno) from None
            try:
                count = int(cases)
            except ValueError:
                raise CaseFileError(f"case count {cases!r} is not an integer", rowno) from None
            if count < 0:
                raise CaseFileError(f"negative case count {count}", rowno)
            if canonical is not None:
                if region_key(name) not in canonical:
                    continue
                name = canonical[region_key(name)]
            key = (region_key(name), week_index(epiweek))
            if key in seen:
                raise CaseFileError(f"duplicate record for {name} {format_epiweek(epiweek)} "
                                    f"(first at row {seen[key]})", rowno)
            seen[key] = rowno
            records.append(CaseRecord(name, epiweek, count))
    return records


def write_cases(path: str | os.PathLike, records: Iterable[CaseRecord]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CASE_HEADER)
        for r in records:
            w.writerow([r.region, r.epiweek.year, r.epiweek.week, r.cases])
    return path


# ---------------------------------------------------------------------------
# Alignment
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class AlignedSeries:
    region: MunicipalityRegion
    weeks: tuple[Week, ...]
    scenes: tuple[SatelliteScene, ...]
    cases: tuple[CaseRecord, ...]
    excluded: tuple[Week, ...] = field(default=())

    def __len__(self):
        return len(self.weeks)


def longest_run(indices: Sequence[int]) -> tuple[int, int]:
    """(start, stop) slice of the longest run of consecutive integers; earliest wins ties."""
    if not indices:
        return 0, 0
    best = (0, 1)
    start = 0
    for i in range(1, len(indices) + 1):
        if i == len(indices) or indices[i] != indices[i - 1] + 1:
            if i - start > best[1] - best[0]:
                best = (start, i)
            start = i
    return best


def align(scenes: Sequence[SatelliteScene], cases: Sequence[CaseRecord],
          region: MunicipalityRegion | str | None = None) -> AlignedSeries:
    """Longest run of consecutive weeks having both a scene and a case count.

    Weeks present in either input but outside the returned run are listed in
    ``excluded``.
    """
    if region is None:
        if not scenes:
            raise AlignmentError("no scenes and no region given")
        region = scenes[0].region
    key = region.key if isinstance(region, MunicipalityRegion) else region_key(region)
    by_scene = {week_index(s.epiweek): s for s in scenes if s.region.key == key}
    by_case = {week_index(c.epiweek): c for c in cases if region_key(c.region) == key}
    common = sorted(by_scene.keys() & by_case.keys())
    if not common:
        raise AlignmentError(f"no week has both a scene and a case count for {region}")
    lo, hi = longest_run(common)
    kept = common[lo:hi]
    if isinstance(region, str):
        region = by_scene[kept[0]].region
    weeks = tuple(by_scene[i].epiweek for i in kept)
    kept_set = set(kept)
    every = {**{i: s.epiweek for i, s in by_scene.items()}, **{i: c.epiweek for i, c in by_case.items()}}
    excluded = tuple(every[i] for i in sorted(every) if i not in kept_set)
    if excluded:
        logger.info("%s: aligned %d weeks, excluded %d", region.name, len(kept), len(excluded))
    return AlignedSeries(region, weeks, tuple(by_scene[i] for i in kept),
                         tuple(by_case[i] for i in kept), excluded)
