import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from panelnn.errors import (
    DimensionError,
    EmptyInputError,
    InsufficientPeriodsError,
    ParseError,
    SchemaError,
)
from panelnn.panel_data import (
    CsvSchema,
    PanelDataset,
    demean,
    group_index,
    load_csv,
    read_columns,
    save_csv,
    split_by_codes,
    temporal_split,
    within_transform,
)

from conftest import make_panel


@st.composite
def grouped_matrices(draw):
    n = draw(st.integers(1, 40))
    k = draw(st.integers(1, 4))
    labels = draw(arrays(np.int64, n, elements=st.integers(-3, 5)))
    M = draw(arrays(np.float64, (n, k), elements=st.floats(-1e3, 1e3)))
    return labels, M


@given(grouped_matrices())
def test_within_transform_zero_group_means(case):
    labels, M = case
    idx = group_index(labels)
    dm = demean(M, idx)
    np.testing.assert_allclose(idx.means(dm), 0.0, atol=1e-10 * max(1.0, np.abs(M).max()))


@given(grouped_matrices())
def test_within_transform_restores_and_is_idempotent(case):
    labels, M = case
    idx = group_index(labels)
    view = within_transform(M, idx)
    scale = max(1.0, np.abs(M).max())
    np.testing.assert_allclose(view.restore(idx), M, atol=1e-12 * scale)
    np.testing.assert_allclose(demean(view.matrix, idx), view.matrix, atol=1e-12 * scale)


@given(grouped_matrices(), st.randoms(use_true_random=False))
def test_group_means_ignore_row_order(case, rnd):
    labels, M = case
    perm = np.array(rnd.sample(range(len(labels)), len(labels)))
    a = group_index(labels).means(M)
    b = group_index(labels[perm]).means(M[perm])
    np.testing.assert_allclose(a, b, rtol=1e-12, atol=1e-9)


def test_group_index_on_unsorted_labels():
    idx = group_index([7, 3, 7, 3, 9])
    assert list(idx.labels) == [3, 7, 9]
    assert list(idx.counts) == [2, 2, 1]
    np.testing.assert_allclose(idx.means(np.array([1.0, 2, 3, 4, 5])), [3.0, 2.0, 5.0])


def test_singleton_unit_demeans_to_zero():
    idx = group_index([1, 2, 2])
    dm = demean(np.array([5.0, 1.0, 3.0]), idx)
    np.testing.assert_allclose(dm, [0.0, -1.0, 1.0])


def test_dataset_is_read_only_and_validates():
    d = make_panel()
    with pytest.raises(ValueError):
        d.y[0] = 1.0
    with pytest.raises(DimensionError):
        PanelDataset([1, 2], [1, 1], [0.0, 1.0], np.zeros((3, 1)), np.zeros((2, 1)))
    with pytest.raises(ParseError):
        PanelDataset([1, 2], [1, 1], [0.0, np.nan], np.zeros((2, 1)), np.zeros((2, 1)))
    with pytest.raises(EmptyInputError):
        PanelDataset([], [], [], np.zeros((0, 1)), np.zeros((0, 1)))
    assert np.array_equal(d.cluster, d.unit_id)


def test_temporal_split_shape():
    d = make_panel(n_units=4, n_times=20)
    tr, te, va = temporal_split(d)
    assert (tr.n_rows, te.n_rows, va.n_rows) == (36, 36, 8)
    assert set(va.time) == {19, 20}
    assert np.all(tr.time % 2 == 0) and np.all(te.time % 2 == 1)


def test_temporal_split_needs_ten_periods():
    with pytest.raises(InsufficientPeriodsError):
        temporal_split(make_panel(n_times=9))


def test_split_by_codes():
    d = make_panel(n_units=2, n_times=10)
    codes = np.tile([0, 1, 0, 1, 0, 1, 0, 1, 2, 2], 2)
    s = split_by_codes(d, codes)
    assert (s.train.n_rows, s.test.n_rows, s.validation.n_rows) == (8, 8, 4)
    with pytest.raises(SchemaError):
        split_by_codes(d, np.full(d.n_rows, 3))


def test_csv_round_trip_is_exact(tmp_path):
    d = make_panel(unbalanced=True)
    path = tmp_path / "p.csv"
    save_csv(d, path)
    schema = CsvSchema("unit", "time", "y", d.x_names, d.z_names)
    back = load_csv(path, schema)
    for name in ("unit_id", "time", "y", "X", "Z"):
        assert np.array_equal(getattr(back, name), getattr(d, name)), name


def test_csv_errors_name_the_line(tmp_path):
    path = tmp_path / "bad.csv"
    path.write_text("id,t,y,z\n1,1,0.5,1\n1,2,oops,2\n")
    schema = CsvSchema("id", "t", "y", (), ("z",))
    with pytest.raises(ParseError, match="line 3"):
        read_columns(path, schema)
    with pytest.raises(SchemaError):
        read_columns(path, CsvSchema("id", "t", "y", (), ("missing",)))


def test_validation_takes_the_latest_tenth_of_periods():
    d = make_panel(n_units=45, n_times=40, p_x=1, p_z=1)
    assert temporal_split(d).validation.n_rows == 180
    assert set(temporal_split(make_panel(n_times=10)).validation.time) == {10}
