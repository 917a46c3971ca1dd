"""Sensor file parsing and hourly-rate normalization.

Two CSV layouts are read:

sites file
    ``highway,km,direction,type,land_use,lanes,post_speed_car,post_speed_truck,
    vert_align,horiz_align,grade,interval_min``
records file (one site per file)
    ``timestamp,lane,car_count,heavy_count,car_speed,heavy_speed``

Interval speeds are taken as given; whether the detector reports time-mean or
space-mean speed does not change the calibration.
"""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass
from datetime import datetime
from pathlib import Path
from typing import Iterable, Optional, Sequence

logger = logging.getLogger(__name__)

__all__ = [
    "IngestError",
    "SiteMeta",
    "RawRecord",
    "Observation",
    "SITES_HEADER",
    "RECORDS_HEADER",
    "OBSERVATIONS_HEADER",
    "load_sites",
    "load_records",
    "to_observations",
    "write_sites",
    "write_records",
    "write_observations",
    "read_observations",
]

SITES_HEADER = (
    "highway", "km", "direction", "type", "land_use", "lanes", "post_speed_car",
    "post_speed_truck", "vert_align", "horiz_align", "grade", "interval_min",
)
RECORDS_HEADER = ("timestamp", "lane", "car_count", "heavy_count", "car_speed", "heavy_speed")
OBSERVATIONS_HEADER = ("timestamp", "lane", "q", "u", "heavy_share", "k")

_DIRECTIONS = {"n": "N", "north": "N", "s": "S", "south": "S",
               "e": "E", "east": "E", "w": "W", "west": "W"}
_HIGHWAY_TYPES = {"freeway", "multilane"}
_LAND_USES = {"rural", "urban"}
DEFAULT_INTERVAL_MIN = 5


class IngestError(ValueError):
    """Parse or validation failure, with the offending row when known."""

    def __init__(self, message: str, row: Optional[int] = None, column: Optional[str] = None):
        self.row = row
        self.column = column
        where = []
        if row is not None:
            where.append(f"row {row}")
        if column is not None:
            where.append(f"column {column!r}")
        super().__init__(f"{', '.join(where)}: {message}" if where else message)


@dataclass(frozen=True)
class SiteMeta:
    highway: str
    km: float
    direction: str
    highway_type: str
    land_use: str
    lanes: int
    post_speed_car: float
    post_speed_truck: float
    vertical_alignment: float
    horizontal_alignment: float
    grade: float
    interval_minutes: int = DEFAULT_INTERVAL_MIN

    def __post_init__(self):
        if self.direction not in {"N", "S", "E", "W"}:
            raise IngestError(f"unknown direction {self.direction!r}")
        if self.highway_type not in _HIGHWAY_TYPES:
            raise IngestError(f"unknown highway type {self.highway_type!r}")
        if self.land_use not in _LAND_USES:
            raise IngestError(f"unknown land use {self.land_use!r}")
        if self.lanes < 2:
            raise IngestError(f"lanes must be >= 2, got {self.lanes}")
        if self.interval_minutes not in (5, 6):
            raise IngestError(f"interval_min must be 5 or 6, got {self.interval_minutes}")
        if not (self.post_speed_car > 0 and self.post_speed_truck > 0):
            raise IngestError("posted speeds must be positive")

    @property
    def site_id(self) -> str:
        return f"{self.highway}:{self.km:g}:{self.direction}"


@dataclass(frozen=True)
class RawRecord:
    timestamp: datetime
    lane_index: int
    car_count: float
    heavy_count: float
    mean_speed: float
    heavy_speed: Optional[float] = None


@dataclass(frozen=True)
class Observation:
    """One interval on one lane, flow as an hourly rate.

    ``k`` is ``None`` when the speed is not positive (density undefined).
    """

    timestamp: datetime
    q: float
    u: float
    heavy_share: float = 0.0
    k: Optional[float] = None
    lane: int = 1


def _field(row: dict, name: str, rownum: int, kind=float):
    raw = row.get(name)
    if raw is None or raw.strip() == "":
        raise IngestError("missing value", rownum, name)
    try:
        value = _number(raw.strip()) if kind is float else kind(raw.strip())
    except ValueError:
        raise IngestError(f"malformed {kind.__name__} {raw!r}", rownum, name) from None
    if kind is float and not math.isfinite(value):
        raise IngestError(f"non-finite value {raw!r}", rownum, name)
    return value


def _number(raw: str) -> float:
    # Table 1 style decimals ("32,0") are accepted alongside "32.0".
    return float(raw.replace(",", ".")) if raw.count(",") == 1 and "." not in raw else float(raw)


def _check_header(fieldnames, expected: Sequence[str], path, optional=()):
    names = [f.strip() for f in (fieldnames or [])]
    required = [c for c in expected if c not in optional]
    missing = [c for c in required if c not in names]
    if missing:
        raise IngestError(f"{path}: header missing columns {missing}; expected {list(expected)}")


def load_sites(path) -> list[SiteMeta]:
    """Read site metadata, one :class:`SiteMeta` per data row."""
    path = Path(path)
    with path.open(newline="", encoding="utf-8") as fh:
        text = fh.read()
    if not text.strip():
        logger.warning("sites file %s is empty", path)
        return []
    lines = text.splitlines()
    first = [c.strip().lower() for c in next(csv.reader([lines[0]]))]
    if first and first[0] == "highway":
        reader = csv.DictReader(lines)
        reader.fieldnames = [f.strip().lower() for f in reader.fieldnames]
        _check_header(reader.fieldnames, SITES_HEADER, path, optional=("interval_min",))
        rows = list(reader)
        start = 2
    else:
        rows = [dict(zip(SITES_HEADER, r)) for r in csv.reader(lines)]
        start = 1

    sites = []
    for rownum, row in enumerate(rows, start=start):
        if not any((v or "").strip() for v in row.values() if isinstance(v, str)):
            continue
        sites.append(_parse_site(row, rownum))
    if not sites:
        logger.warning("sites file %s has no data rows", path)
    return sites


def _parse_site(row: dict, rownum: int) -> SiteMeta:
    direction = (row.get("direction") or "").strip().lower()
    if direction not in _DIRECTIONS:
        raise IngestError(f"unknown direction {row.get('direction')!r}", rownum, "direction")
    htype = (row.get("type") or "").strip().lower()
    if htype not in _HIGHWAY_TYPES:
        raise IngestError(f"unknown highway type {row.get('type')!r}", rownum, "type")
    land_use = (row.get("land_use") or "").strip().lower()
    if land_use not in _LAND_USES:
        raise IngestError(f"unknown land use {row.get('land_use')!r}", rownum, "land_use")

    interval_raw = row.get("interval_min")
    if interval_raw is None or not interval_raw.strip():
        logger.warning("row %d: interval_min missing, assuming %d minutes", rownum, DEFAULT_INTERVAL_MIN)
        interval = DEFAULT_INTERVAL_MIN
    else:
        interval = _field(row, "interval_min", rownum, int)

    try:
        return SiteMeta(
            highway=(row.get("highway") or "").strip(),
            km=_field(row, "km", rownum),
            direction=_DIRECTIONS[direction],
            highway_type=htype,
            land_use=land_use,
            lanes=_field(row, "lanes", rownum, int),
            post_speed_car=_field(row, "post_speed_car", rownum),
            post_speed_truck=_field(row, "post_speed_truck", rownum),
            vertical_alignment=_field(row, "vert_align", rownum),
            horizontal_alignment=_field(row, "horiz_align", rownum),
            grade=_field(row, "grade", rownum),
            interval_minutes=interval,
        )
    except IngestError as exc:
        if exc.row is None:
            raise IngestError(str(exc), rownum) from None
        raise


def _parse_timestamp(raw: str, rownum: int) -> datetime:
    try:
        return datetime.fromisoformat(raw.strip())
    except ValueError:
        raise IngestError(f"malformed ISO-8601 timestamp {raw!r}", rownum, "timestamp") from None


def load_records(path, site: SiteMeta) -> list[RawRecord]:
    """Read one site's detector records.

    Timestamps must increase strictly within each lane, in file order.
    The result is ordered by ``(timestamp, lane)``.
    """
    path = Path(path)
    records = []
    last_seen: dict[int, tuple[datetime, int]] = {}
    bad_order = []
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None:
            return []
        _check_header(reader.fieldnames, RECORDS_HEADER, path, optional=("heavy_speed",))
        for rownum, row in enumerate(reader, start=2):
            ts = _parse_timestamp(row.get("timestamp") or "", rownum)
            lane = _field(row, "lane", rownum, int)
            if not 1 <= lane <= site.lanes:
                raise IngestError(f"lane {lane} outside 1..{site.lanes}", rownum, "lane")
            car = _field(row, "car_count", rownum)
            heavy = _field(row, "heavy_count", rownum)
            for name, value in (("car_count", car), ("heavy_count", heavy)):
                if value < 0:
                    raise IngestError(f"negative count {value:g}", rownum, name)
            speed = _field(row, "car_speed", rownum)
            heavy_raw = (row.get("heavy_speed") or "").strip()
            heavy_speed = _field(row, "heavy_speed", rownum) if heavy_raw else None

            prev = last_seen.get(lane)
            if prev is not None:
                if ts == prev[0]:
                    raise IngestError(
                        f"duplicate (timestamp, lane) pair, first seen at row {prev[1]}", rownum
                    )
                if ts < prev[0]:
                    bad_order.append(rownum)
            last_seen[lane] = (ts, rownum)
            records.append(RawRecord(ts, lane, car, heavy, speed, heavy_speed))

    if bad_order:
        raise IngestError(f"{path}: timestamps not increasing within lane at rows {bad_order}")
    records.sort(key=lambda r: (r.timestamp, r.lane_index))
    return records


def to_observations(records: Iterable[RawRecord], site: SiteMeta) -> list[Observation]:
    """Scale counts to hourly rates and derive heavy share and density."""
    scale = 60.0 / site.interval_minutes
    out = []
    for rec in records:
        total = rec.car_count + rec.heavy_count
        share = rec.heavy_count / total if total > 0 else 0.0
        q = rec.car_count * scale
        u = rec.mean_speed
        k = q / u if u > 0 else None
        out.append(Observation(rec.timestamp, q, u, share, k, rec.lane_index))
    return out


def _atomic_write_rows(path, header, rows) -> None:
    from .io import atomic_open

    with atomic_open(path) as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        writer.writerows(rows)


def write_sites(path, sites: Iterable[SiteMeta]) -> None:
    _atomic_write_rows(path, SITES_HEADER, (
        (s.highway, repr(s.km), s.direction, s.highway_type, s.land_use, s.lanes,
         repr(s.post_speed_car), repr(s.post_speed_truck), repr(s.vertical_alignment),
         repr(s.horizontal_alignment), repr(s.grade), s.interval_minutes)
        for s in sites
    ))


def write_records(path, records: Iterable[RawRecord]) -> None:
    def fmt(x):
        return "" if x is None else (str(int(x)) if float(x).is_integer() else repr(float(x)))

    _atomic_write_rows(path, RECORDS_HEADER, (
        (r.timestamp.isoformat(), r.lane_index, fmt(r.car_count), fmt(r.heavy_count),
         repr(float(r.mean_speed)), fmt(r.heavy_speed))
        for r in records
    ))


def write_observations(path, observations: Iterable[Observation]) -> None:
    """Write observations; floats use the shortest round-trip representation."""
    _atomic_write_rows(path, OBSERVATIONS_HEADER, (
        (o.timestamp.isoformat(), o.lane, repr(float(o.q)), repr(float(o.u)),
         repr(float(o.heavy_share)), "" if o.k is None else repr(float(o.k)))
        for o in observations
    ))


def read_observations(path) -> list[Observation]:
    path = Path(path)
    out = []
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None:
            return []
        _check_header(reader.fieldnames, OBSERVATIONS_HEADER, path, optional=("k", "lane", "heavy_share"))
        for rownum, row in enumerate(reader, start=2):
            k_raw = (row.get("k") or "").strip()
            lane_raw = (row.get("lane") or "").strip()
            share_raw = (row.get("heavy_share") or "").strip()
            out.append(Observation(
                timestamp=_parse_timestamp(row.get("timestamp") or "", rownum),
                q=_field(row, "q", rownum),
                u=_field(row, "u", rownum),
                heavy_share=float(share_raw) if share_raw else 0.0,
                k=float(k_raw) if k_raw else None,
                lane=int(lane_raw) if lane_raw else 1,
            ))
    return out
