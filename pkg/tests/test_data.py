import numpy as np
import pytest

from qrspec.data import DataError, Dataset, read_csv, write_csv


def make_dataset():
    rng = np.random.default_rng(7)
    x = rng.normal(size=(20, 2))
    y = x @ [1.0, -0.5] + rng.normal(size=20)
    return Dataset(y=y, x=x, columns=("a", "b"))


def test_round_trip_is_byte_stable(tmp_path):
    data = make_dataset()
    p1 = tmp_path / "one.csv"
    p2 = tmp_path / "two.csv"
    write_csv(p1, data)
    again = read_csv(p1, response="y")
    write_csv(p2, again)
    assert p1.read_bytes() == p2.read_bytes()
    np.testing.assert_array_equal(again.y, data.y)
    np.testing.assert_array_equal(again.x, data.x)
    assert again.columns == data.columns


def test_missing_response_column(tmp_path):
    p = tmp_path / "bad.csv"
    p.write_text("a,b\n1,2\n")
    with pytest.raises(DataError, match="response"):
        read_csv(p, response="y")


def test_non_numeric_cell_reports_line(tmp_path):
    p = tmp_path / "bad.csv"
    p.write_text("y,a\n1.0,2.0\n3.0,oops\n")
    with pytest.raises(DataError, match=r":3: non-numeric"):
        read_csv(p, response="y")


def test_headerless_file_rejected(tmp_path):
    p = tmp_path / "raw.csv"
    p.write_text("1.0,2.0\n3.0,4.0\n")
    with pytest.raises(DataError):
        read_csv(p, response="y")


def test_validation_rules():
    with pytest.raises(DataError):
        Dataset(y=np.array([1.0, np.nan]), x=np.ones((2, 1)), columns=("a",))
    with pytest.raises(DataError):
        Dataset(y=np.ones(3), x=np.ones((2, 1)), columns=("a",))
    with pytest.raises(DataError):
        Dataset(y=np.ones(2), x=np.ones((2, 2)), columns=("a", "a"))


def test_take_resamples_rows():
    data = make_dataset()
    sub = data.take([3, 3, 0])
    assert sub.n == 3
    np.testing.assert_array_equal(sub.y, data.y[[3, 3, 0]])
    np.testing.assert_array_equal(sub.x, data.x[[3, 3, 0]])
    assert sub.columns == data.columns
