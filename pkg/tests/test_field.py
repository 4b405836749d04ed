import json

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from conftest import random_spd
from gwpdti.field import (
    FieldFormatError,
    TensorGrid,
    downsample_by_two,
    field_from_dict,
    read_field,
    site_coordinates,
    write_field,
)


def make_grid(dims, rng, spacing=(1.0, 1.0, 1.0), mask=None):
    n = int(np.prod(dims))
    return TensorGrid(dims, spacing, random_spd(rng, n, 1e-3), mask)


class TestTensorGrid:
    def test_validation(self, rng):
        with pytest.raises(FieldFormatError):
            TensorGrid((2, 2, 1), (1, 1, 1), random_spd(rng, 3))
        with pytest.raises(FieldFormatError):
            TensorGrid((2, 2, 1), (1, 0, 1), random_spd(rng, 4))
        with pytest.raises(FieldFormatError):
            TensorGrid((0, 2, 1), (1, 1, 1), np.zeros((0, 3, 3)))
        with pytest.raises(FieldFormatError):
            TensorGrid((2, 2, 1), (1, 1, 1), random_spd(rng, 4), mask=[1, 0, 1])

    def test_immutable(self, rng):
        g = make_grid((2, 2, 1), rng)
        with pytest.raises(ValueError):
            g.tensors[0, 0, 0] = 1.0

    def test_x_fastest_order(self, rng):
        g = make_grid((3, 2, 2), rng)
        idx = g.indices()
        np.testing.assert_array_equal(idx[:4], [[0, 0, 0], [1, 0, 0], [2, 0, 0], [0, 1, 0]])
        for n, i in enumerate(idx):
            assert g.flat_index(i) == n

    def test_site_coordinates(self, rng):
        g = make_grid((3, 4, 2), rng, spacing=(0.5, 0.5, 2.0))
        np.testing.assert_array_equal(site_coordinates(g, (0, 0, 0)), [0, 0, 0])
        np.testing.assert_array_equal(site_coordinates(g, (1, 1, 1)), [0.5, 0.5, 2.0])
        g1 = make_grid((3, 4, 1), rng)
        np.testing.assert_array_equal(site_coordinates(g1, (2, 3, 0)), [2, 3, 0])
        with pytest.raises(IndexError):
            site_coordinates(g1, (3, 0, 0))


class TestDownsample:
    @pytest.mark.parametrize("n, kept, held", [(37, 19, 1008), (31, 16, 705), (2, 1, 3)])
    def test_counts(self, n, kept, held, rng):
        g = make_grid((n, n, 1), rng)
        low, split = downsample_by_two(g)
        assert low.dims == (kept, kept, 1)
        assert len(split.kept) == kept * kept
        assert len(split.held_out) == held

    def test_values_and_coordinates(self, rng):
        g = make_grid((7, 6, 1), rng, spacing=(0.5, 1.5, 2.0))
        low, split = downsample_by_two(g)
        assert low.spacing == (1.0, 3.0, 2.0)
        np.testing.assert_array_equal(low.tensors, g.tensors[split.kept])
        np.testing.assert_array_equal(low.coordinates(), g.coordinates()[split.kept])

    @given(st.integers(2, 9), st.integers(2, 9), st.integers(1, 4))
    def test_partition(self, nx, ny, nz):
        rng = np.random.default_rng(nx * 100 + ny * 10 + nz)
        mask = rng.uniform(size=nx * ny * nz) > 0.2
        g = make_grid((nx, ny, nz), rng, mask=mask)
        _, split = downsample_by_two(g)
        both = np.concatenate([split.kept, split.held_out])
        assert len(np.intersect1d(split.kept, split.held_out)) == 0
        np.testing.assert_array_equal(np.sort(both), np.flatnonzero(mask))
        assert np.all(g.indices()[split.kept] % 2 == 0)

    def test_single_site(self, rng):
        with pytest.raises(FieldFormatError):
            downsample_by_two(make_grid((1, 1, 1), rng))


class TestFieldFile:
    def test_round_trip(self, rng, tmp_path):
        g = make_grid((4, 4, 1), rng, spacing=(1.0, 2.0, 1.0), mask=rng.uniform(size=16) > 0.5)
        p = tmp_path / "f.json"
        write_field(g, p)
        back = read_field(p)
        np.testing.assert_array_equal(back.tensors, g.tensors)
        np.testing.assert_array_equal(back.mask, g.mask)
        assert back.dims == g.dims and back.spacing == g.spacing
        p2 = tmp_path / "g.json"
        write_field(back, p2)
        assert p.read_bytes() == p2.read_bytes()

    def test_header(self, rng, tmp_path):
        p = tmp_path / "f.json"
        write_field(make_grid((2, 2, 1), rng), p)
        doc = json.loads(p.read_text())
        assert doc["version"] == 1
        assert doc["units"] == "mm^2/s"
        assert doc["order"] == "row-major-x-fastest"

    def test_length_mismatch(self):
        doc = {"version": 1, "dims": [2, 2, 1], "spacing": [1, 1, 1], "tensors": [[1, 1, 1, 0, 0, 0]]}
        with pytest.raises(FieldFormatError, match="expected 4 tensors"):
            field_from_dict(doc)

    def test_empty_dims(self):
        doc = {"version": 1, "dims": [0, 1, 1], "spacing": [1, 1, 1], "tensors": []}
        with pytest.raises(FieldFormatError):
            field_from_dict(doc)

    def test_parse_error_location(self, tmp_path):
        p = tmp_path / "bad.json"
        p.write_text('{\n  "version": 1,\n  "dims": [1, 1, 1]\n  "spacing": [1, 1, 1]\n}\n')
        with pytest.raises(FieldFormatError, match="line 4"):
            read_field(p)

    @pytest.mark.parametrize("patch, msg", [
        ({"version": 2}, "version"),
        ({"order": "column-major"}, "order"),
        ({"tensors": [[1, 1, 1, 0, 0]]}, "6-vectors"),
        ({"tensors": [["a", 1, 1, 0, 0, 0]]}, "tensors"),
    ])
    def test_bad_fields(self, patch, msg):
        doc = {"version": 1, "dims": [1, 1, 1], "spacing": [1, 1, 1],
               "tensors": [[1, 1, 1, 0, 0, 0]], **patch}
        with pytest.raises(FieldFormatError, match=msg):
            field_from_dict(doc)

    def test_missing_key(self):
        with pytest.raises(FieldFormatError, match="spacing"):
            field_from_dict({"version": 1, "dims": [1, 1, 1], "tensors": []})
