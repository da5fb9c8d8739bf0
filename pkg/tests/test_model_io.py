import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from samforge import model_io as mio
from samforge.errors import BadMagicError, DegenerateTriangleError, FormatError, ModelValidationError, TruncatedFileError
from samforge.shape import build_shape_model


def write(path, text):
    path.write_text(text, encoding="utf-8")
    return path


def test_point_file_in_order(tmp_path):
    p = write(tmp_path / "scan1.csv", "point_index,x_px,y_px\n0,1.0,2.0\n1,3.0,4.0\n2,5.0,6.0\n")
    ps = mio.read_point_file(p)
    assert ps.scan_id == "scan1"
    np.testing.assert_array_equal(ps.points, [[1, 2], [3, 4], [5, 6]])


def test_point_file_crlf(tmp_path):
    p = write(tmp_path / "s.csv", "point_index,x_px,y_px\r\n0,1,2\r\n1,3,4\r\n2,5,6\r\n")
    assert mio.read_point_file(p).n == 3


def test_point_file_gap(tmp_path):
    p = write(tmp_path / "s.csv", "point_index,x_px,y_px\n0,1,2\n2,3,4\n")
    with pytest.raises(FormatError, match="non-contiguous index at row 2"):
        mio.read_point_file(p)


def test_point_file_duplicate(tmp_path):
    p = write(tmp_path / "s.csv", "point_index,x_px,y_px\n0,1,2\n0,3,4\n")
    with pytest.raises(FormatError, match="duplicate index at row 2"):
        mio.read_point_file(p)


@pytest.mark.parametrize("bad", ["nan", "inf", "-inf"])
def test_point_file_non_finite(tmp_path, bad):
    p = write(tmp_path / "s.csv", f"point_index,x_px,y_px\n0,1,2\n1,{bad},4\n")
    with pytest.raises(FormatError, match="non-finite"):
        mio.read_point_file(p)


def test_point_file_105(tmp_path):
    rows = "".join(f"{i},{i * 0.5},{i * 1.5}\n" for i in range(105))
    p = write(tmp_path / "s.csv", "point_index,x_px,y_px\n" + rows)
    assert mio.read_point_file(p).n == mio.DEFAULT_N_POINTS == 105


def test_point_file_round_trip(tmp_path, rng):
    ps = mio.PointSet("abc", rng.normal(size=(105, 2)) * 50)
    mio.write_point_file(ps, tmp_path / "abc.csv")
    back = mio.read_point_file(tmp_path / "abc.csv")
    np.testing.assert_array_equal(back.points, ps.points)


def test_triangulation_ok(tmp_path):
    p = write(tmp_path / "t.txt", "# header\n0 1 2\n")
    tri = mio.read_triangulation(p, 3)
    np.testing.assert_array_equal(tri.triangles, [[0, 1, 2]])


def test_triangulation_out_of_range(tmp_path):
    with pytest.raises(FormatError, match="index out of range"):
        mio.read_triangulation(write(tmp_path / "t.txt", "0 1 5\n"), 3)


def test_triangulation_degenerate(tmp_path):
    with pytest.raises(FormatError, match="degenerate triangle"):
        mio.read_triangulation(write(tmp_path / "t.txt", "0 0 1\n"), 3)


def test_triangulation_zero_area_against_points(tmp_path):
    p = write(tmp_path / "t.txt", "0 1 2\n")
    with pytest.raises(DegenerateTriangleError):
        mio.read_triangulation(p, 3, points=[[0, 0], [1, 1], [2, 2]])


def test_triangulation_not_simply_connected(tmp_path):
    # annulus: six triangles around the hole 0-1-2
    ring = "0 1 3\n1 4 3\n1 2 4\n2 5 4\n2 0 5\n0 3 5\n"
    with pytest.raises(FormatError, match="simply connected"):
        mio.read_triangulation(write(tmp_path / "t.txt", ring), 6)


def test_image_pgm_raw_size(tmp_path, rng):
    pixels = rng.integers(0, 65536, size=(150, 109))
    mio.write_image(pixels, tmp_path / "scan7_r_air.pgm")
    im = mio.read_image(tmp_path / "scan7_r_air.pgm")
    assert (im.scan_id, im.mode, im.width, im.height) == ("scan7", "r_air", 109, 150)
    np.testing.assert_array_equal(im.pixels, pixels.astype(float))


def test_image_png_exact(tmp_path, rng):
    pixels = rng.integers(0, 65536, size=(20, 30))
    mio.write_image(pixels, tmp_path / "a_b_m_bone_irs.png")
    im = mio.read_image(tmp_path / "a_b_m_bone_irs.png")
    assert (im.scan_id, im.mode) == ("a_b", "m_bone_irs")
    np.testing.assert_array_equal(im.pixels, pixels)


def test_image_unknown_mode(tmp_path):
    mio.write_image(np.zeros((4, 4)), tmp_path / "scan7_xray.pgm")
    with pytest.raises(FormatError, match="unknown mode") as info:
        mio.read_image(tmp_path / "scan7_xray.pgm")
    for mode in mio.MODES:
        assert mode in str(info.value)


def test_image_multichannel_rejected(tmp_path):
    from PIL import Image

    Image.fromarray(np.zeros((4, 4, 3), dtype=np.uint8)).save(tmp_path / "s_d_fat.png")
    with pytest.raises(FormatError, match="multi-channel"):
        mio.read_image(tmp_path / "s_d_fat.png")
    (tmp_path / "s_d_lean.pgm").write_bytes(b"P6\n2 2\n255\n" + bytes(12))
    with pytest.raises(FormatError, match="multi-channel"):
        mio.read_image(tmp_path / "s_d_lean.pgm")


def test_upsample_constant(tmp_path):
    mio.write_image(np.full((10, 8), 7), tmp_path / "c_d_fat.pgm")
    im = mio.read_image(tmp_path / "c_d_fat.pgm", upsample=2)
    assert im.pixels.shape == (20, 16)
    np.testing.assert_allclose(im.pixels, 7.0, atol=1e-9)


def test_cohort_completion(tmp_path):
    p = write(tmp_path / "c.csv", "scan_id,subject_id,sex,glucose\na,1,F,5.5\nb,2,M,\nc,3,F,6.0\n")
    table = mio.read_cohort(p)
    assert table.completion("glucose") == pytest.approx(2 / 3)
    assert np.isnan(table.values("glucose", ["b"])[0])


def test_cohort_duplicate(tmp_path):
    with pytest.raises(FormatError, match="duplicate scan_id"):
        mio.read_cohort(write(tmp_path / "c.csv", "scan_id,subject_id,sex\na,1,F\na,2,F\n"))


def test_cohort_invalid_sex(tmp_path):
    with pytest.raises(FormatError, match="invalid sex"):
        mio.read_cohort(write(tmp_path / "c.csv", "scan_id,subject_id,sex\na,1,X\n"))


def test_cohort_round_trip(tmp_path, small_phantoms):
    mio.write_cohort(small_phantoms.cohort, tmp_path / "c.csv")
    back = mio.read_cohort(tmp_path / "c.csv")
    assert back.biomarker_names == small_phantoms.cohort.biomarker_names
    for name in back.biomarker_names:
        np.testing.assert_array_equal(back.values(name, back.scan_ids),
                                      small_phantoms.cohort.values(name, back.scan_ids))


# ---------------------------------------------------------------- containers

@pytest.fixture
def shape_container(small_phantoms):
    return build_shape_model(small_phantoms.point_sets, "F").to_container()


def assert_containers_identical(a, b):
    assert (a.kind, a.sex, a.mode, a.n_points, a.frame_dims, a.variance_fraction, a.meta) == (
        b.kind, b.sex, b.mode, b.n_points, b.frame_dims, b.variance_fraction, b.meta)
    assert sorted(a.arrays) == sorted(b.arrays)
    for name in a.arrays:
        assert a.arrays[name].shape == b.arrays[name].shape
        assert a.arrays[name].tobytes() == b.arrays[name].tobytes(), name


def test_model_round_trip_bit_exact(tmp_path, shape_container):
    mio.write_model(shape_container, tmp_path / "m.samm")
    back = mio.read_model(tmp_path / "m.samm")
    assert_containers_identical(shape_container, back)
    mio.write_model(back, tmp_path / "m2.samm")
    assert (tmp_path / "m.samm").read_bytes() == (tmp_path / "m2.samm").read_bytes()


def test_model_bad_magic(tmp_path, shape_container):
    mio.write_model(shape_container, tmp_path / "m.samm")
    data = bytearray((tmp_path / "m.samm").read_bytes())
    data[:8] = b"XXXX0001"
    (tmp_path / "m.samm").write_bytes(bytes(data))
    with pytest.raises(BadMagicError, match="bad magic"):
        mio.read_model(tmp_path / "m.samm")


def test_model_truncated(tmp_path, shape_container):
    mio.write_model(shape_container, tmp_path / "m.samm")
    data = (tmp_path / "m.samm").read_bytes()
    (tmp_path / "m.samm").write_bytes(data[:-9])
    with pytest.raises(TruncatedFileError):
        mio.read_model(tmp_path / "m.samm")
    (tmp_path / "m.samm").write_bytes(data[:12])
    with pytest.raises(TruncatedFileError):
        mio.read_model(tmp_path / "m.samm")


def _patch_array(path, name, fn):
    import json

    data = bytearray(path.read_bytes())
    (hlen,) = struct.unpack("<Q", data[8:16])
    header = json.loads(data[16 : 16 + hlen])
    spec = next(s for s in header["arrays"] if s["name"] == name)
    count = int(np.prod(spec["shape"]))
    start = 16 + hlen + 8 * spec["offset"]
    arr = np.frombuffer(bytes(data[start : start + 8 * count]), dtype="<f8").reshape(spec["shape"]).copy()
    data[start : start + 8 * count] = np.ascontiguousarray(fn(arr), dtype="<f8").tobytes()
    path.write_bytes(bytes(data))


def test_model_unsorted_eigenvalues(tmp_path, shape_container):
    mio.write_model(shape_container, tmp_path / "m.samm")
    _patch_array(tmp_path / "m.samm", "eigenvalues", lambda ev: ev[::-1])
    with pytest.raises(ModelValidationError, match="eigenvalues not sorted"):
        mio.read_model(tmp_path / "m.samm")


def test_model_non_orthonormal(tmp_path, shape_container):
    mio.write_model(shape_container, tmp_path / "m.samm")
    _patch_array(tmp_path / "m.samm", "components", lambda c: c * 1.001)
    with pytest.raises(ModelValidationError, match="orthonormal"):
        mio.read_model(tmp_path / "m.samm")


@settings(max_examples=25, deadline=None)
@given(st.lists(st.floats(-1e6, 1e6), min_size=2, max_size=40))
def test_point_file_property_round_trip(tmp_path_factory, values):
    coords = np.array(values[: len(values) // 2 * 2]).reshape(-1, 2)
    path = tmp_path_factory.mktemp("pp") / "x.csv"
    mio.write_point_file(mio.PointSet("x", coords), path)
    np.testing.assert_array_equal(mio.read_point_file(path).points, coords)
