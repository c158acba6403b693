"""Desk-scale reproduction of the GPS trace case study.

Synthetic vehicle traces are loaded once per layout of the ladder

    row      [[r.t, r.lat, r.lon, r.id] | \\r <- Traces]
    dropcol  [[r.lat, r.lon] | \\r <- Traces, orderby r.t, groupby r.id]
    grid     grid[lat:S:O, lon:S:O](dropcol)
    zgrid    zorder(grid)
    zdelta   delta[lat, lon](zgrid)

and every workload square is answered with a scan, counting pages and seeks.
"""
from __future__ import annotations

import csv
import io
import math
import random
from dataclasses import dataclass, field

from .access import CostModel, Predicate, preload, scan, scan_cost
from .storage import Database

TRACE_SCHEMA = "t:int,lat:float,lon:float,id:string"
LAYOUTS = ("row", "dropcol", "grid", "zgrid", "zdelta")
REPORT_HEADER = ("layout", "avg_pages_read", "avg_seeks", "avg_est_ms", "bytes_on_disk")


class BenchError(ValueError):
    pass


@dataclass(frozen=True)
class BenchConfig:
    n_points: int = 100_000
    n_vehicles: int = 50
    lat_min: float = 42.2
    lat_max: float = 42.5
    lon_min: float = -71.3
    lon_max: float = -70.9
    n_queries: int = 200
    coverage: float = 0.01
    page_size: int = 65536
    grid_cells: int = 100      # cells per axis
    step: float = 0.00015      # per-second bound on |dlat| and |dlon|
    seed: int = 42

    def validate(self) -> None:
        if not (self.lat_min < self.lat_max and self.lon_min < self.lon_max):
            raise BenchError("invalid bounding box")
        if self.n_points < 1 or self.n_vehicles < 1:
            raise BenchError("need at least one point and one vehicle")
        if not 0 < self.coverage < 1:
            raise BenchError(f"coverage must lie in (0, 1), got {self.coverage}")
        if self.grid_cells < 1 or self.step <= 0:
            raise BenchError("grid_cells and step must be positive")

    @property
    def strides(self) -> tuple[float, float]:
        return (round((self.lat_max - self.lat_min) / self.grid_cells, 9),
                round((self.lon_max - self.lon_min) / self.grid_cells, 9))


def _q(x: float) -> float:
    return round(x * 1e6) / 1e6


# --------------------------------------------------------------------------
# generators

def trace_records(cfg: BenchConfig) -> list[tuple]:
    """Bounded random walks with momentum, one per vehicle, sorted by (t, id)."""
    cfg.validate()
    rng = random.Random(cfg.seed)
    out = []
    t0 = 1_200_000_000
    for v in range(cfg.n_vehicles):
        n = cfg.n_points // cfg.n_vehicles + (v < cfg.n_points % cfg.n_vehicles)
        vid = f"taxi-{v:03d}"
        lat = rng.uniform(cfg.lat_min, cfg.lat_max)
        lon = rng.uniform(cfg.lon_min, cfg.lon_max)
        vlat = vlon = 0.0
        start = t0 + rng.randrange(3600)
        prev = (_q(lat), _q(lon))
        for k in range(n):
            if k:
                vlat = max(-cfg.step, min(cfg.step, 0.9 * vlat + rng.gauss(0, cfg.step / 3)))
                vlon = max(-cfg.step, min(cfg.step, 0.9 * vlon + rng.gauss(0, cfg.step / 3)))
                lat, vlat = _reflect(lat + vlat, vlat, cfg.lat_min, cfg.lat_max)
                lon, vlon = _reflect(lon + vlon, vlon, cfg.lon_min, cfg.lon_max)
                # quantization must not push a step past the bound
                qlat = _clamp_step(_q(lat), prev[0], cfg.step)
                qlon = _clamp_step(_q(lon), prev[1], cfg.step)
                prev = (qlat, qlon)
            out.append((start + k, prev[0], prev[1], vid))
    out.sort(key=lambda r: (r[0], r[3]))
    return out


def _reflect(x: float, v: float, low: float, high: float) -> tuple[float, float]:
    if x < low:
        return low + (low - x), -v
    if x > high:
        return high - (x - high), -v
    return x, v


def _clamp_step(x: float, prev: float, step: float) -> float:
    if abs(x - prev) <= step:
        return x
    return _q(prev + math.copysign(math.floor(step * 1e6) / 1e6, x - prev))


def gen_traces(cfg: BenchConfig, path: str | None = None) -> str:
    buf = io.StringIO(newline="")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["t", "lat", "lon", "id"])
    for t, lat, lon, vid in trace_records(cfg):
        w.writerow([t, repr(lat), repr(lon), vid])
    text = buf.getvalue()
    if path is not None:
        with open(path, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
    return text


def workload_boxes(cfg: BenchConfig) -> list[tuple[float, float, float, float]]:
    """Squares of `coverage` x box area (lowlat, highlat, lowlon, highlon).

    A square whose center falls near the border is shifted inside the box
    rather than clipped, so every query covers the same area.
    """
    cfg.validate()
    rng = random.Random(cfg.seed + 1)
    side = math.sqrt(cfg.coverage)
    hlat = side * (cfg.lat_max - cfg.lat_min) / 2
    hlon = side * (cfg.lon_max - cfg.lon_min) / 2
    out = []
    for _ in range(cfg.n_queries):
        clat = min(max(rng.uniform(cfg.lat_min, cfg.lat_max), cfg.lat_min + hlat), cfg.lat_max - hlat)
        clon = min(max(rng.uniform(cfg.lon_min, cfg.lon_max), cfg.lon_min + hlon), cfg.lon_max - hlon)
        out.append((_q(clat - hlat), _q(clat + hlat), _q(clon - hlon), _q(clon + hlon)))
    return out


def gen_workload(cfg: BenchConfig, path: str | None = None) -> str:
    buf = io.StringIO(newline="")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["lowlat", "highlat", "lowlon", "highlon"])
    for box in workload_boxes(cfg):
        w.writerow([repr(x) for x in box])
    text = buf.getvalue()
    if path is not None:
        with open(path, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
    return text


def read_traces(path: str) -> list[tuple]:
    with open(path, newline="", encoding="utf-8") as fh:
        return [(int(r["t"]), float(r["lat"]), float(r["lon"]), r["id"]) for r in csv.DictReader(fh)]


def read_workload(path: str) -> list[tuple]:
    with open(path, newline="", encoding="utf-8") as fh:
        return [tuple(float(r[k]) for k in ("lowlat", "highlat", "lowlon", "highlon"))
                for r in csv.DictReader(fh)]


# --------------------------------------------------------------------------
# layouts

def layout_expressions(cfg: BenchConfig, table: str = "Traces") -> dict[str, str]:
    slat, slon = cfg.strides
    n1 = f"[[r.t, r.lat, r.lon, r.id] | \\r <- {table}]"
    n2 = f"[[r.lat, r.lon] | \\r <- {table}, orderby r.t, groupby r.id]"
    n3 = f"grid[lat:{slat!r}:{cfg.lat_min!r}, lon:{slon!r}:{cfg.lon_min!r}]({n2})"
    n3z = f"zorder({n3})"
    n4 = f"delta[lat, lon]({n3z})"
    return {"row": n1, "dropcol": n2, "grid": n3, "zgrid": n3z, "zdelta": n4}


def bench_table(layout: str) -> str:
    return f"Traces_{layout}"


def prepare(db: Database, records: list[tuple], cfg: BenchConfig, layouts=LAYOUTS) -> None:
    """One table per layout, each loaded with `records` then re-rendered."""
    for name in layouts:
        if name not in LAYOUTS:
            raise BenchError(f"unknown layout {name!r}; expected one of {', '.join(LAYOUTS)}")
    for name in layouts:
        table = bench_table(name)
        if table in db.tables:
            db.drop_table(table)
        db.create_table(table, TRACE_SCHEMA)
        db.load(table, records)
        db.reorganize(table, layout_expressions(cfg, table)[name], allow_drop=name != "row")


@dataclass
class ReportRow:
    layout: str
    avg_pages_read: float
    avg_seeks: float
    avg_est_ms: float
    bytes_on_disk: int


@dataclass
class BenchReport:
    rows: list = field(default_factory=list)

    def row(self, layout: str) -> ReportRow:
        for r in self.rows:
            if r.layout == layout:
                return r
        raise KeyError(layout)


def run_benchmark(db: Database, layouts, workload, model: CostModel | None = None) -> BenchReport:
    """Scan every workload box on every prepared layout and average the IO."""
    model = model or CostModel()
    boxes = list(workload)
    if not boxes:
        raise BenchError("empty workload")
    report = BenchReport()
    answers: list | None = None
    for name in layouts:
        if name not in LAYOUTS:
            raise BenchError(f"unknown layout {name!r}")
        table = bench_table(name)
        if table not in db.tables:
            raise BenchError(f"layout {name} has no data; prepare it first")
        preload(db, table)
        pages = seeks = 0
        est = 0.0
        got = []
        for lowlat, highlat, lowlon, highlon in boxes:
            pred = Predicate((("lat", lowlat, highlat), ("lon", lowlon, highlon)))
            est += scan_cost(db, table, ("lat", "lon"), pred, model=model)
            db.pf.reset_counters()
            got.append(sorted(scan(db, table, ("lat", "lon"), pred, model=model)))
            pages += db.pf.counters.pages_read
            seeks += db.pf.counters.seeks
        db.pf.reset_counters()
        if answers is None:
            answers = got
        elif got != answers:
            bad = next(i for i, (a, b) in enumerate(zip(answers, got)) if a != b)
            raise BenchError(f"layout {name} answers query {bad} differently")
        n = len(boxes)
        report.rows.append(ReportRow(name, pages / n, seeks / n, est / n, db.tables[table].bytes_on_disk()))
    return report


def format_report(report: BenchReport) -> str:
    buf = io.StringIO(newline="")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(REPORT_HEADER)
    for r in report.rows:
        w.writerow([r.layout, f"{r.avg_pages_read:.3f}", f"{r.avg_seeks:.3f}", f"{r.avg_est_ms:.3f}", r.bytes_on_disk])
    return buf.getvalue()


def emit_report(report: BenchReport, path: str) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(format_report(report))


def read_report(path: str) -> BenchReport:
    with open(path, newline="", encoding="utf-8") as fh:
        return BenchReport([ReportRow(r["layout"], float(r["avg_pages_read"]), float(r["avg_seeks"]),
                                      float(r["avg_est_ms"]), int(r["bytes_on_disk"]))
                            for r in csv.DictReader(fh)])


def run_standard(path: str, cfg: BenchConfig | None = None, layouts=LAYOUTS,
                 model: CostModel | None = None) -> BenchReport:
    """Generate, prepare and measure the whole ladder in a fresh database."""
    cfg = cfg or BenchConfig()
    db = Database.create(path, cfg.page_size)
    try:
        prepare(db, trace_records(cfg), cfg, layouts)
        return run_benchmark(db, layouts, workload_boxes(cfg), model)
    finally:
        db.close()
