import logging
from datetime import datetime, timedelta

import pytest
from hypothesis import given, settings, strategies as st

from flowcal.ingest import (IngestError, Observation, RawRecord, SiteMeta, load_records, load_sites,
                            read_observations, to_observations, write_observations, write_records)

HEADER = "highway,km,direction,type,land_use,lanes,post_speed_car,post_speed_truck,vert_align,horiz_align,grade,interval_min\n"
RECORDS_HEADER = "timestamp,lane,car_count,heavy_count,car_speed,heavy_speed\n"


def site(interval=6, land_use="rural"):
    return SiteMeta("SP-348", 32.0, "N", "freeway", land_use, 4, 120, 90, 37.2, 42.3, 3.5, interval)


def test_load_sites_first_table_row(tmp_path):
    path = tmp_path / "sites.csv"
    path.write_text(HEADER + "SP-348,32.0,North,Freeway,Rural,4,120,90,37.2,42.3,3.5,6\n")
    (s,) = load_sites(path)
    assert s.lanes == 4 and s.grade == 3.5 and s.direction == "N"
    assert s.highway_type == "freeway" and s.land_use == "rural"
    assert s.vertical_alignment == 37.2 and s.horizontal_alignment == 42.3
    assert s.interval_minutes == 6


def test_load_sites_row_without_interval_defaults(tmp_path, caplog):
    path = tmp_path / "sites.csv"
    path.write_text("SP-348,32.0,North,Freeway,Rural,4,120,90,37.2,42.3,3.5\n")
    with caplog.at_level(logging.WARNING):
        (s,) = load_sites(path)
    assert s.lanes == 4 and s.grade == 3.5 and s.interval_minutes == 5
    assert "interval_min missing" in caplog.text


def test_load_sites_empty_file_warns(tmp_path, caplog):
    path = tmp_path / "sites.csv"
    path.write_text("")
    with caplog.at_level(logging.WARNING):
        assert load_sites(path) == []
    assert "empty" in caplog.text


def test_load_sites_single_lane_rejected(tmp_path):
    path = tmp_path / "sites.csv"
    path.write_text(HEADER + "SP-348,32.0,North,Freeway,Rural,1,120,90,37.2,42.3,3.5,5\n")
    with pytest.raises(IngestError, match="lanes"):
        load_sites(path)


def test_load_sites_malformed_number_reports_row_and_column(tmp_path):
    path = tmp_path / "sites.csv"
    path.write_text(HEADER + "SP-348,32.0,North,Freeway,Rural,4,120,90,37.2,42.3,3.5,5\n"
                    + "SP-348,50.0,South,Freeway,Rural,3,abc,90,41.4,12.6,3.0,5\n")
    with pytest.raises(IngestError) as err:
        load_sites(path)
    assert err.value.row == 3 and err.value.column == "post_speed_car"


def test_load_sites_unknown_land_use(tmp_path):
    path = tmp_path / "sites.csv"
    path.write_text(HEADER + "SP-348,32.0,North,Freeway,Suburban,4,120,90,37.2,42.3,3.5,5\n")
    with pytest.raises(IngestError, match="land use"):
        load_sites(path)


def _records_file(tmp_path, rows):
    path = tmp_path / "records.csv"
    path.write_text(RECORDS_HEADER + "".join(r + "\n" for r in rows))
    return path


def _rows(n, lane=1, start=datetime(2011, 7, 1), step=6):
    return [f"{(start + timedelta(minutes=step * i)).isoformat()},{lane},{20 + i},0,{100 + i}.5,"
            for i in range(n)]


def test_load_records_valid(tmp_path):
    recs = load_records(_records_file(tmp_path, _rows(12)), site())
    assert len(recs) == 12
    assert [r.timestamp for r in recs] == sorted(r.timestamp for r in recs)
    assert recs[0].car_count == 20 and recs[0].mean_speed == 100.5


def test_load_records_sorted_across_lanes(tmp_path):
    rows = _rows(3, lane=2) + _rows(3, lane=1)
    recs = load_records(_records_file(tmp_path, rows), site())
    assert [(r.timestamp, r.lane_index) for r in recs] == sorted((r.timestamp, r.lane_index) for r in recs)


def test_negative_count_rejected(tmp_path):
    rows = _rows(2) + ["2011-07-02T00:00:00,1,-1,0,100,"]
    with pytest.raises(IngestError, match="negative") as err:
        load_records(_records_file(tmp_path, rows), site())
    assert err.value.row == 4


def test_duplicate_timestamp_lane_rejected(tmp_path):
    rows = _rows(2) + [_rows(1)[0]]
    with pytest.raises(IngestError, match="duplicate"):
        load_records(_records_file(tmp_path, rows), site())


def test_non_monotone_timestamps_listed(tmp_path):
    rows = _rows(3)
    rows = [rows[0], rows[2], rows[1]]
    with pytest.raises(IngestError, match=r"rows \[4\]"):
        load_records(_records_file(tmp_path, rows), site())


def test_six_minute_count_scaled_to_hourly():
    rec = RawRecord(datetime(2011, 7, 1), 1, 30, 0, 100.0)
    (o,) = to_observations([rec], site(interval=6))
    assert o.q == 30 * 60 / 6 == 300


def test_five_minute_observation():
    rec = RawRecord(datetime(2011, 7, 1), 1, 25, 0, 100.0)
    (o,) = to_observations([rec], site(interval=5))
    assert o.q == 300 and o.heavy_share == 0 and o.k == 3.0


def test_zero_counts_and_speed_leave_density_undefined():
    (o,) = to_observations([RawRecord(datetime(2011, 7, 1), 1, 0, 0, 0.0)], site())
    assert o.q == 0 and o.u == 0 and o.k is None and o.heavy_share == 0


def test_heavy_share():
    (o,) = to_observations([RawRecord(datetime(2011, 7, 1), 1, 10, 10, 90.0)], site())
    assert o.heavy_share == 0.5


counts = st.integers(0, 400)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.tuples(counts, counts, st.floats(0.1, 200)), min_size=1, max_size=40),
       st.sampled_from([5, 6]))
def test_rate_scaling_and_count_preservation(rows, interval):
    s = site(interval=interval)
    recs = [RawRecord(datetime(2011, 7, 1) + timedelta(minutes=interval * i), 1, c, h, u)
            for i, (c, h, u) in enumerate(rows)]
    obs = to_observations(recs, s)
    assert len(obs) == len(recs)
    for o, r in zip(obs, recs):
        assert o.q * interval / 60 == pytest.approx(r.car_count, abs=1e-9)


@settings(max_examples=30, deadline=None)
@given(st.lists(st.tuples(st.floats(0, 3000), st.floats(0.01, 180), st.floats(0, 1)), min_size=1, max_size=30))
def test_observation_round_trip(tmp_path_factory, rows):
    obs = [Observation(datetime(2011, 7, 1) + timedelta(minutes=5 * i), q, u, h, q / u, 1)
           for i, (q, u, h) in enumerate(rows)]
    path = tmp_path_factory.mktemp("rt") / "obs.csv"
    write_observations(path, obs)
    back = read_observations(path)
    assert [(o.q, o.u, o.heavy_share) for o in back] == [(o.q, o.u, o.heavy_share) for o in obs]
    assert back == obs


def test_records_round_trip(tmp_path):
    s = site()
    recs = load_records(_records_file(tmp_path, _rows(5)), s)
    out = tmp_path / "again.csv"
    write_records(out, recs)
    assert load_records(out, s) == recs
