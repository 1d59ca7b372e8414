import numpy as np
from hypothesis import given, strategies as st

from cfl._common import SCHEMA_LINE, fmt, parallel_map, read_csv, stream, write_csv


def test_stream_is_keyed_not_sequential():
    a = stream(3, 1, 2).standard_normal(4)
    stream(3, 9).standard_normal(100)  # unrelated consumer in between
    b = stream(3, 1, 2).standard_normal(4)
    assert np.array_equal(a, b)
    assert not np.array_equal(a, stream(3, 1, 3).standard_normal(4))


def test_stream_accepts_negative_domain_ids():
    assert not np.array_equal(stream(0, -1).random(3), stream(0, -2).random(3))


@given(st.floats(allow_nan=False, allow_infinity=False))
def test_fmt_round_trips(x):
    assert float(fmt(x)) == x


def test_csv_schema_line_and_round_trip(tmp_path):
    vals = [0.1, 1 / 3, -2.5e-300, 12345678.901234567]
    write_csv(tmp_path / "a.csv", ["i", "v"], ([i, v] for i, v in enumerate(vals)))
    assert (tmp_path / "a.csv").read_text().splitlines()[0] == SCHEMA_LINE
    header, rows = read_csv(tmp_path / "a.csv")
    assert header == ["i", "v"]
    assert [float(r[1]) for r in rows] == vals


def test_parallel_map_matches_sequential():
    items = list(range(50))
    assert parallel_map(lambda x: x * x, items, threads=4) == [x * x for x in items]
