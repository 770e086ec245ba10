from __future__ import annotations

import json
import shutil
import tempfile
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp
from PIL import Image

from lowoverlap.errors import (
    DanglingReference,
    FormatError,
    MalformedHeader,
    MalformedLine,
    MissingFile,
    SchemaError,
    TruncatedData,
    UnsupportedCameraModel,
    UnsupportedImageFormat,
    UnsupportedPlyVariant,
)
from lowoverlap.fusion import PointCloud
from lowoverlap.geometry import CameraIntrinsics, CameraPose, nadir_rotation
from lowoverlap.ingest import (
    ImageEntry,
    TiePointTable,
    load_manifest,
    manifest_from_dict,
    manifest_to_dict,
    parse_sparse_model,
    read_asc_grid,
    read_color_image,
    read_depth_pfm,
    read_ply,
    reprojection_violations,
    write_asc_grid,
    write_depth_pfm,
    write_ply,
    write_png,
    write_sparse_model,
    write_world_file,
)
from lowoverlap.ingest.ascgrid import encode_asc_grid, parse_asc_grid
from lowoverlap.ingest.pfm import encode_pfm, parse_pfm
from lowoverlap.ingest.ply import encode_ply, parse_ply
from lowoverlap.rasters import DepthMap, RasterGrid

FIXTURE = Path(__file__).parent / "fixtures" / "sparse_two_views"


def triad(directory):
    return [Path(directory) / n for n in ("cameras.txt", "images.txt", "points3D.txt")]


def write_triad(directory, cameras="", images="", points=""):
    directory = Path(directory)
    for name, text in zip(("cameras.txt", "images.txt", "points3D.txt"), (cameras, images, points)):
        (directory / name).write_text(text)
    return triad(directory)


class TestSparseModel:
    def test_hand_written_fixture(self):
        skeleton, table = parse_sparse_model(*triad(FIXTURE))
        k = skeleton.cameras[1]
        assert (k.fx, k.fy, k.cx, k.cy, k.width, k.height) == (4600, 4600, 3000, 2000, 6000, 4000)
        assert [e.name for e in skeleton.images] == ["a.png", "b.png"]
        assert np.allclose(skeleton.images[1].pose.center, [40, 0, 200])
        # point 3 is seen by one image only and is dropped
        assert table.point_ids.tolist() == [1, 2]
        assert table.track(0) == [(1, 3230.0, 1885.0), (2, 2310.0, 1885.0)]
        assert table.rgb[1].tolist() == [0, 255, 0]
        assert reprojection_violations(skeleton, table) == []

    def test_simple_pinhole(self, tmp_path):
        files = write_triad(tmp_path, cameras="7 SIMPLE_PINHOLE 100 80 90 49.5 39.5\n")
        skeleton, table = parse_sparse_model(*files)
        k = skeleton.cameras[7]
        assert (k.fx, k.fy, k.cx, k.cy) == (90, 90, 49.5, 39.5)
        assert len(table) == 0

    def test_empty_points_file(self, tmp_path):
        shutil.copy(FIXTURE / "cameras.txt", tmp_path)
        shutil.copy(FIXTURE / "images.txt", tmp_path)
        (tmp_path / "points3D.txt").write_text("")
        _, table = parse_sparse_model(*triad(tmp_path))
        assert len(table) == 0 and table.xyz.shape == (0, 3)

    def test_distortion_model_rejected(self, tmp_path):
        files = write_triad(tmp_path, cameras="1 OPENCV 6000 4000 4600 4600 3000 2000 0 0 0 0\n")
        with pytest.raises(UnsupportedCameraModel):
            parse_sparse_model(*files)

    def test_malformed_line_reports_number(self, tmp_path):
        files = write_triad(tmp_path, cameras="# header\n1 PINHOLE 6000 4000 4600 x 3000 2000\n")
        with pytest.raises(MalformedLine) as info:
            parse_sparse_model(*files)
        assert info.value.lineno == 2

    def test_unknown_camera(self, tmp_path):
        files = write_triad(tmp_path, cameras=(FIXTURE / "cameras.txt").read_text(),
                            images="1 1 0 0 0 0 0 0 5 a.png\n\n")
        with pytest.raises(DanglingReference):
            parse_sparse_model(*files)

    def test_unknown_image_in_track(self, tmp_path):
        shutil.copy(FIXTURE / "cameras.txt", tmp_path)
        shutil.copy(FIXTURE / "images.txt", tmp_path)
        (tmp_path / "points3D.txt").write_text("1 0 0 0 1 2 3 0 1 0 9 0\n")
        with pytest.raises(DanglingReference):
            parse_sparse_model(*triad(tmp_path))

    def test_bad_observation_index(self, tmp_path):
        shutil.copy(FIXTURE / "cameras.txt", tmp_path)
        shutil.copy(FIXTURE / "images.txt", tmp_path)
        (tmp_path / "points3D.txt").write_text("1 0 0 0 1 2 3 0 1 0 2 7\n")
        with pytest.raises(DanglingReference):
            parse_sparse_model(*triad(tmp_path))

    def test_pixel_offset(self, tmp_path):
        skeleton, table = parse_sparse_model(*triad(FIXTURE), pixel_offset=-0.5)
        assert skeleton.cameras[1].cx == 2999.5
        assert table.track(0)[0][1:] == (3229.5, 1884.5)

    def test_violations_reported(self, tmp_path):
        text = (FIXTURE / "images.txt").read_text().replace("3230 1885 1", "3240 1885 1")
        shutil.copy(FIXTURE / "cameras.txt", tmp_path)
        shutil.copy(FIXTURE / "points3D.txt", tmp_path)
        (tmp_path / "images.txt").write_text(text)
        skeleton, table = parse_sparse_model(*triad(tmp_path))
        bad = reprojection_violations(skeleton, table, threshold=3.0)
        assert [(p, i) for p, i, _ in bad] == [(1, 1)]
        assert bad[0][2] == pytest.approx(10.0)
        assert reprojection_violations(skeleton, table, threshold=11.0) == []

    def test_write_read_round_trip(self, tmp_path, rng):
        k = CameraIntrinsics(400.123, 401.5, 159.25, 119.75, 320, 240)
        entries = [ImageEntry(i, f"im{i}", 1, CameraPose.from_center(nadir_rotation(7.0 * i),
                                                                      [i * 30.0, 1.0, 200.0]))
                   for i in (1, 2, 3)]
        xyz = rng.uniform(-50, 50, (5, 3))
        obs_point = np.repeat(np.arange(5), 2)
        obs_image = np.array([1, 2, 2, 3, 1, 3, 1, 2, 2, 3])
        table = TiePointTable(np.arange(10, 15), xyz, obs_point, obs_image,
                              rng.uniform(0, 300, (10, 2)), rng.integers(0, 256, (5, 3)).astype(np.uint8))
        write_sparse_model(tmp_path, {1: k}, entries, table)
        skeleton, back = parse_sparse_model(*triad(tmp_path))
        assert skeleton.cameras[1] == k
        for a, b in zip(entries, skeleton.images):
            assert np.array_equal(a.pose.translation, b.pose.translation)
            assert np.allclose(a.pose.rotation, b.pose.rotation, atol=1e-15)
        assert np.array_equal(back.xyz, xyz)
        assert np.array_equal(back.point_ids, table.point_ids)
        for i in range(5):
            assert sorted(back.track(i)) == sorted(table.track(i))


class TestPfm:
    def test_round_trip_bit_exact(self, tmp_path, rng):
        vals = rng.normal(100, 30, (48, 64)).astype(np.float32)
        vals[3, 5] = np.nan
        d = DepthMap.from_array(vals, "relative")
        write_depth_pfm(d, tmp_path / "a.pfm")
        back = read_depth_pfm(tmp_path / "a.pfm")
        assert np.array_equal(back.values, d.values, equal_nan=True)
        assert np.array_equal(back.valid, d.valid)
        assert not back.valid[3, 5]

    def test_truncated(self):
        data = b"Pf\n100 100\n-1.0\n" + b"\0" * 400
        with pytest.raises(TruncatedData):
            parse_pfm(data)

    def test_big_endian_and_row_order(self):
        vals = np.array([[1, 2, 3], [4, 5, 6]], dtype=">f4")
        data = b"Pf\n3 2\n1.0\n" + vals[::-1].tobytes()
        assert np.array_equal(parse_pfm(data).values, vals.astype(np.float32))

    def test_header_errors(self):
        for data in (b"PF\n1 1\n-1\n" + b"\0" * 12, b"P5\n1 1\n-1\n", b"Pf\n0 1\n-1\n",
                     b"Pf\n1 1\n0\n\0\0\0\0", b"Pf\n1 x\n-1\n", b"Pf", b""):
            with pytest.raises(MalformedHeader):
                parse_pfm(data)

    def test_metric_kind_marks_nonpositive_invalid(self):
        data = encode_pfm(DepthMap.from_array(np.array([[1.0, -1.0]]), "relative"))
        d = parse_pfm(data, kind="metric")
        assert d.valid.tolist() == [[True, False]]

    @given(st.binary(max_size=200))
    def test_fuzz_never_crashes(self, data):
        try:
            parse_pfm(data)
        except FormatError:
            pass

    @given(st.binary(max_size=64))
    def test_fuzz_after_valid_header(self, tail):
        try:
            parse_pfm(b"Pf\n2 2\n-1.0\n" + tail)
        except FormatError:
            pass


class TestPly:
    def test_empty(self, tmp_path):
        write_ply(PointCloud.empty(), tmp_path / "e.ply")
        assert b"element vertex 0" in (tmp_path / "e.ply").read_bytes()
        assert len(read_ply(tmp_path / "e.ply")) == 0

    def test_single_point(self, tmp_path):
        cloud = PointCloud([[1.5, -2.0, 200.0]], [[10, 20, 30]])
        write_ply(cloud, tmp_path / "p.ply")
        back = read_ply(tmp_path / "p.ply")
        assert back.xyz.tolist() == [[1.5, -2.0, 200.0]]
        assert back.rgb.tolist() == [[10, 20, 30]]

    def test_round_trip_bit_exact(self, rng):
        cloud = PointCloud(rng.normal(0, 1e3, (500, 3)), rng.integers(0, 256, (500, 3)))
        back = parse_ply(encode_ply(cloud))
        assert np.array_equal(back.xyz, cloud.xyz) and np.array_equal(back.rgb, cloud.rgb)

    def test_unknown_property(self):
        data = (b"ply\nformat binary_little_endian 1.0\nelement vertex 0\nproperty double x\n"
                b"property double y\nproperty double z\nproperty float intensity\nend_header\n")
        with pytest.raises(UnsupportedPlyVariant):
            parse_ply(data)

    def test_ascii_variant_rejected(self):
        data = b"ply\nformat ascii 1.0\nelement vertex 0\nproperty double x\nproperty double y\nproperty double z\nend_header\n"
        with pytest.raises(UnsupportedPlyVariant):
            parse_ply(data)

    def test_float_xyz_without_color(self):
        header = (b"ply\nformat binary_little_endian 1.0\ncomment hi\nelement vertex 2\n"
                  b"property float x\nproperty float y\nproperty float z\nend_header\n")
        body = np.array([[1, 2, 3], [4, 5, 6]], "<f4").tobytes()
        cloud = parse_ply(header + body)
        assert cloud.rgb is None and cloud.xyz[1].tolist() == [4, 5, 6]

    def test_truncated(self):
        data = encode_ply(PointCloud([[1.0, 2.0, 3.0]], [[1, 2, 3]]))
        with pytest.raises(TruncatedData):
            parse_ply(data[:-2])

    @given(st.binary(max_size=300))
    def test_fuzz_never_crashes(self, data):
        try:
            parse_ply(b"ply\n" + data)
        except FormatError:
            pass


class TestAscGrid:
    def test_single_cell(self, tmp_path):
        g = RasterGrid(0.0, 0.0, 1.0, np.array([[42.0]]))
        write_asc_grid(g, tmp_path / "g.asc")
        text = (tmp_path / "g.asc").read_text()
        assert "ncols 1" in text.splitlines()
        assert read_asc_grid(tmp_path / "g.asc").values[0, 0] == 42.0

    def test_all_nodata(self):
        g = RasterGrid.empty(0, 0, 1.0, 3, 2)
        text = encode_asc_grid(g)
        assert text.splitlines()[6:] == ["-9999 -9999 -9999"] * 2
        assert not parse_asc_grid(text).valid.any()

    def test_missing_cellsize(self):
        with pytest.raises(MalformedHeader):
            parse_asc_grid("ncols 1\nnrows 1\nxllcorner 0\nyllcorner 0\nNODATA_value -9999\n5\n")

    def test_case_insensitive_keys(self):
        g = parse_asc_grid("NCOLS 2\nNROWS 1\nXLLCORNER 1\nYLLCORNER 2\nCELLSIZE 0.5\n3 -9999\n")
        assert g.cell_size == 0.5 and g.valid.tolist() == [[True, False]]

    def test_truncated(self):
        with pytest.raises(TruncatedData):
            parse_asc_grid("ncols 2\nnrows 2\nxllcorner 0\nyllcorner 0\ncellsize 1\n1 2 3\n")

    def test_sentinel_collision(self, tmp_path):
        with pytest.raises(ValueError):
            write_asc_grid(RasterGrid(0, 0, 1.0, np.array([[-9999.0]])), tmp_path / "x.asc")

    @given(hnp.arrays(np.float64, (4, 5), elements=st.floats(-1e4, 1e4)),
           hnp.arrays(np.bool_, (4, 5)), st.floats(-1e5, 1e5), st.floats(0.01, 100))
    def test_round_trip_print_precision(self, vals, holes, x0, cell):
        vals = np.where(holes | (vals == -9999.0), np.nan, vals)
        g = RasterGrid(x0, -x0, cell, vals)
        back = parse_asc_grid(encode_asc_grid(g))
        assert back.same_geometry(g, tol=0)
        assert np.array_equal(back.valid, g.valid)
        ok = g.valid
        assert np.allclose(back.values[ok], vals[ok], rtol=5e-6, atol=0)

    @given(st.text(max_size=200))
    def test_fuzz_never_crashes(self, text):
        try:
            parse_asc_grid(text)
        except FormatError:
            pass


class TestImages:
    def test_png_round_trip(self, tmp_path, rng):
        rgb = rng.integers(0, 256, (7, 9, 3)).astype(np.uint8)
        write_png(rgb, tmp_path / "a.png")
        assert np.array_equal(read_color_image(tmp_path / "a.png").rgb, rgb)

    def test_ppm(self, tmp_path):
        Image.new("RGB", (3, 2), (1, 2, 3)).save(tmp_path / "a.ppm")
        assert read_color_image(tmp_path / "a.ppm").rgb[1, 2].tolist() == [1, 2, 3]

    def test_jpeg_rejected(self, tmp_path):
        Image.new("RGB", (3, 2)).save(tmp_path / "a.jpg")
        with pytest.raises(UnsupportedImageFormat):
            read_color_image(tmp_path / "a.jpg")

    def test_16_bit_rejected(self, tmp_path):
        Image.fromarray(np.zeros((2, 2), np.uint16)).save(tmp_path / "a.png")
        with pytest.raises(UnsupportedImageFormat):
            read_color_image(tmp_path / "a.png")

    def test_missing(self, tmp_path):
        with pytest.raises(MissingFile):
            read_color_image(tmp_path / "none.png")

    def test_world_file(self, tmp_path):
        write_world_file(RasterGrid.empty(100.0, 200.0, 0.5, 4, 2), tmp_path / "o.pgw")
        vals = [float(x) for x in (tmp_path / "o.pgw").read_text().split()]
        assert vals == [0.5, 0.0, 0.0, -0.5, 100.25, 200.75]


def minimal_doc():
    return {
        "version": 1,
        "units": {"length": "m", "pixel": "px"},
        "cameras": [{"id": 1, "model": "PINHOLE", "width": 6000, "height": 4000,
                     "fx": 4600, "fy": 4600, "cx": 3000, "cy": 2000}],
        "images": [{"id": 1, "name": "a", "camera_id": 1, "qvec": [0, 1, 0, 0], "tvec": [0, 0, 200]}],
        "tie_points": {"cameras": "sparse/cameras.txt", "images": "sparse/images.txt",
                       "points": "sparse/points3D.txt"},
        "depth": {"pattern": "mono/{name}.pfm", "kind": "relative"},
    }


@pytest.fixture
def dataset_dir(tmp_path):
    shutil.copytree(FIXTURE, tmp_path / "sparse")
    return tmp_path


class TestManifest:
    def test_minimal_loads(self, dataset_dir):
        (dataset_dir / "manifest.json").write_text(json.dumps(minimal_doc()))
        m = load_manifest(dataset_dir / "manifest.json")
        assert m.depth_path(m.images[0]) == dataset_dir / "mono" / "a.pfm"
        assert m.gt_depth_path(m.images[0]) is None
        assert m.intrinsics(m.images[0]).fx == 4600

    def test_unknown_camera(self, dataset_dir):
        doc = minimal_doc()
        doc["images"][0]["camera_id"] = 99
        with pytest.raises(SchemaError) as info:
            manifest_from_dict(doc, dataset_dir)
        assert info.value.field_path == "images.0.camera_id"

    def test_bad_kind(self, dataset_dir):
        doc = minimal_doc()
        doc["depth"]["kind"] = "magic"
        with pytest.raises(SchemaError) as info:
            manifest_from_dict(doc, dataset_dir)
        assert info.value.field_path == "depth.kind"

    @pytest.mark.parametrize("mutate", [
        lambda d: d.pop("cameras"),
        lambda d: d.update(version=2),
        lambda d: d["cameras"][0].update(model="OPENCV"),
        lambda d: d["images"][0].update(qvec=[0, 0, 0, 0]),
        lambda d: d["images"].append(dict(d["images"][0])),
        lambda d: d.update(extra=1),
        lambda d: d["depth"].update(pattern="mono/{nope}.pfm"),
        lambda d: d.update(aoi=[10, 0, 0, 5]),
    ])
    def test_schema_errors(self, dataset_dir, mutate):
        doc = minimal_doc()
        mutate(doc)
        with pytest.raises(SchemaError):
            manifest_from_dict(doc, dataset_dir)

    def test_missing_files_are_eager(self, dataset_dir):
        doc = minimal_doc()
        doc["images"][0]["path"] = "images/a.png"
        with pytest.raises(MissingFile):
            manifest_from_dict(doc, dataset_dir)
        doc = minimal_doc()
        doc["ground_truth"] = {"dsm": "gt.asc"}
        with pytest.raises(MissingFile):
            manifest_from_dict(doc, dataset_dir)
        with pytest.raises(MissingFile):
            load_manifest(dataset_dir / "nothing.json")

    def test_not_json(self, dataset_dir):
        (dataset_dir / "m.json").write_text("{nope")
        with pytest.raises(SchemaError):
            load_manifest(dataset_dir / "m.json")

    def test_tie_point_image_ids_checked(self, dataset_dir):
        m = manifest_from_dict(minimal_doc(), dataset_dir)
        with pytest.raises(SchemaError):
            m.load_tie_points()

    def test_dict_round_trip(self, dataset_dir):
        doc = minimal_doc()
        doc["images"].append({"id": 2, "name": "b", "camera_id": 1, "qvec": [0, 1, 0, 0],
                              "tvec": [-40, 0, 200]})
        doc["aoi"] = [0, 0, 10, 10]
        doc["ground_truth"] = {"depth_pattern": "gt/{id}.pfm"}
        m = manifest_from_dict(doc, dataset_dir)
        assert len(m.load_tie_points()) == 2
        again = manifest_from_dict(manifest_to_dict(m, dataset_dir), dataset_dir)
        assert again.aoi == m.aoi and again.gt_depth_pattern == "gt/{id}.pfm"
        assert [e.pose.translation.tolist() for e in again.images] == \
            [e.pose.translation.tolist() for e in m.images]


SFM_TOKENS = st.sampled_from(["1", "2", "-1", "0.5", "PINHOLE", "SIMPLE_PINHOLE", "OPENCV",
                              "6000", "4000", "nan", "x", "#", "1e400", ""])
SFM_LINE = st.lists(SFM_TOKENS, max_size=14).map(" ".join)
SFM_TEXT = st.lists(SFM_LINE, max_size=6).map("\n".join)


class TestSfmFuzz:
    @given(SFM_TEXT, SFM_TEXT, SFM_TEXT)
    def test_structured_errors_only(self, cams, imgs, pts):
        with tempfile.TemporaryDirectory() as d:
            files = write_triad(d, cams, imgs, pts)
            try:
                parse_sparse_model(*files)
            except FormatError:
                pass

    @given(st.binary(max_size=120))
    def test_raw_bytes(self, data):
        with tempfile.TemporaryDirectory() as d:
            files = write_triad(d)
            files[0].write_bytes(data)
            try:
                parse_sparse_model(*files)
            except FormatError:
                pass
