"""KITTI-format readers and writers."""

import json
import struct

import cv2
import numpy as np
import pytest

from conftest import rect_mask
from vpdense.geometry import PointCloud
from vpdense.gtgen import VisibleDepthGT
from vpdense.kitti_io import (MAX_DEPTH, DataError, decode_depth, encode_depth, filter_by_iou, format_calib,
                              list_frames, load_frame, parse_calib, parse_label_row, read_calib, read_depth,
                              read_labels, read_mask_records, read_masks, read_point_cloud, write_depth,
                              write_masks, write_point_cloud)
from vpdense.synthetic import box_to_label_row, kitti_calib, write_synthetic_split

CALIB_TEXT = """P0: 7.215377e+02 0.000000e+00 6.095593e+02 0.000000e+00 0.000000e+00 7.215377e+02 1.728540e+02 0.000000e+00 0.000000e+00 0.000000e+00 1.000000e+00 0.000000e+00
P2: 7.215377e+02 0.000000e+00 6.095593e+02 4.485728e+01 0.000000e+00 7.215377e+02 1.728540e+02 2.163791e-01 0.000000e+00 0.000000e+00 1.000000e+00 2.745884e-03
R0_rect: 1 0 0 0 1 0 0 0 1
Tr_velo_to_cam: 0 -1 0 0 0 0 -1 -0.08 1 0 0 -0.27
"""


class TestPointCloud:
    def test_golden_records(self, tmp_path):
        path = tmp_path / "a.bin"
        path.write_bytes(struct.pack("<8f", 1.0, 2.0, 3.0, 0.5, -4.0, 5.5, -6.25, 1.0))
        pc = read_point_cloud(path)
        assert pc.points.tolist() == [[1.0, 2.0, 3.0], [-4.0, 5.5, -6.25]]
        assert pc.intensity.tolist() == [0.5, 1.0]

    def test_empty(self, tmp_path):
        path = tmp_path / "e.bin"
        path.write_bytes(b"")
        assert len(read_point_cloud(path)) == 0

    def test_round_trip_bit_identical(self, tmp_path, rng):
        pts = rng.normal(0, 20, (500, 3)).astype(np.float32).astype(np.float64)
        inten = rng.uniform(0, 1, 500).astype(np.float32).astype(np.float64)
        path = tmp_path / "r.bin"
        write_point_cloud(path, PointCloud(pts, inten))
        back = read_point_cloud(path)
        assert back.points.tobytes() == pts.tobytes() and back.intensity.tobytes() == inten.tobytes()

    def test_truncated(self, tmp_path):
        path = tmp_path / "t.bin"
        path.write_bytes(b"\x00" * 20)
        with pytest.raises(DataError):
            read_point_cloud(path)
        with pytest.raises(DataError):
            read_point_cloud(tmp_path / "missing.bin")


class TestCalib:
    def test_golden(self):
        cal = parse_calib(CALIB_TEXT)
        assert cal.P[0, 3] == 44.85728 and cal.P[1, 2] == 172.854
        assert cal.Tr[0, 1] == -1 and cal.Tr[2, 3] == -0.27 and cal.Tr[3].tolist() == [0, 0, 0, 1]

    def test_missing_key(self):
        with pytest.raises(DataError, match="P2"):
            parse_calib("\n".join(l for l in CALIB_TEXT.splitlines() if not l.startswith("P2")))

    def test_bad_rows(self):
        with pytest.raises(DataError):
            parse_calib(CALIB_TEXT.replace("R0_rect: 1 0 0", "R0_rect: 1 0"))
        with pytest.raises(DataError):
            parse_calib(CALIB_TEXT + "garbage line\n")
        with pytest.raises(DataError):
            parse_calib(CALIB_TEXT.replace("R0_rect: 1", "R0_rect: x"))

    def test_round_trip(self, tmp_path):
        cal = kitti_calib()
        path = tmp_path / "c.txt"
        path.write_text(format_calib(cal))
        back = read_calib(path, cal.image_size)
        assert np.array_equal(back.P, cal.P) and np.array_equal(back.R0, cal.R0) and np.array_equal(back.Tr, cal.Tr)


class TestLabels:
    def test_golden_car_row(self):
        cal = parse_calib(CALIB_TEXT)
        row = "Car 0.00 1 -1.57 500.0 150.0 600.0 200.0 1.50 1.60 4.00 2.00 1.70 20.00 0.00"
        lab = parse_label_row(row, cal, 3)
        assert lab.cls == "car" and lab.occlusion == 1 and lab.index == 3
        assert lab.bbox2d == (500.0, 150.0, 600.0, 200.0)
        assert lab.box.size.tolist() == [4.0, 1.6, 1.5]
        # bottom centre (2, 1.7, 20) in camera -> box centre raised by h / 2
        want = cal.rect_to_sensor([2.0, 1.7 - 0.75, 20.0])[0]
        assert np.allclose(lab.box.center, want)
        assert lab.box.heading == pytest.approx(-np.pi / 2)

    def test_dontcare_skipped(self, tmp_path):
        cal = parse_calib(CALIB_TEXT)
        path = tmp_path / "l.txt"
        path.write_text("DontCare -1 -1 -10 1 2 3 4 -1 -1 -1 -1000 -1000 -1000 -10\n"
                        "Pedestrian 0.1 2 0.2 1 2 3 4 1.8 0.6 0.8 1 1.5 10 0.3\n")
        labs = read_labels(path, cal)
        assert len(labs) == 1 and labs[0].cls == "pedestrian" and labs[0].index == 1
        assert labs[0].truncation == pytest.approx(0.1)

    def test_short_row(self):
        with pytest.raises(DataError):
            parse_label_row("Car 0 0 0 1 2 3", parse_calib(CALIB_TEXT))

    def test_box_round_trip(self, rng):
        from vpdense.geometry import Box3D
        cal = kitti_calib()
        box = Box3D([20.0, 3.0, -0.9], [4.2, 1.8, 1.6], 0.7)
        lab = parse_label_row(box_to_label_row(box, "car", cal), cal)
        assert np.allclose(lab.box.center, box.center, atol=0.02)
        assert lab.box.heading == pytest.approx(box.heading, abs=0.01)


class TestMasks:
    def test_two_instances(self, tmp_path):
        a = rect_mask(10, 10, 4, 3, image_size=(50, 40))
        b = rect_mask(30, 5, 2, 6, image_size=(50, 40), cls="pedestrian")
        path = tmp_path / "m.png"
        write_masks(path, [a, b], [0, 4])
        recs = read_mask_records(path)
        assert [r.id for r in recs] == [1, 2] and [r.label_index for r in recs] == [0, 4]
        assert recs[0].mask.pixel_set() == a.pixel_set() and recs[1].mask.pixel_set() == b.pixel_set()
        assert recs[1].mask.cls == "pedestrian"

    def test_all_zero_image(self, tmp_path):
        path = tmp_path / "z.png"
        cv2.imwrite(str(path), np.zeros((8, 8), np.uint16))
        path.with_suffix(".json").write_text("{}")
        assert read_masks(path) == []

    def test_histogram_oracle(self, tmp_path, rng):
        img = rng.integers(0, 6, (30, 40)).astype(np.uint16)
        path = tmp_path / "h.png"
        cv2.imwrite(str(path), img)
        path.with_suffix(".json").write_text(json.dumps({str(i): {"class": "car"} for i in range(1, 6)}))
        counts = np.bincount(img.ravel(), minlength=6)
        assert [len(m) for m in read_masks(path)] == counts[1:].tolist()

    def test_bad_inputs(self, tmp_path):
        path = tmp_path / "b.png"
        cv2.imwrite(str(path), np.ones((4, 4), np.uint16))
        with pytest.raises(DataError):
            read_masks(path)  # no sidecar table
        path.with_suffix(".json").write_text(json.dumps({"1": {"class": "tram"}}))
        with pytest.raises(DataError):
            read_masks(path)
        path.with_suffix(".json").write_text("{")
        with pytest.raises(DataError):
            read_masks(path)
        rgb = tmp_path / "rgb.png"
        cv2.imwrite(str(rgb), np.zeros((4, 4, 3), np.uint8))
        with pytest.raises(DataError):
            read_masks(rgb)
        trunc = tmp_path / "trunc.png"
        trunc.write_bytes(path.read_bytes()[:30])
        with pytest.raises(DataError):
            read_masks(trunc)

    def test_filter_by_iou(self):
        lab = rect_mask(0, 0, 10, 10, image_size=(40, 40))
        good = rect_mask(0, 0, 10, 9, image_size=(40, 40))
        bad = rect_mask(5, 5, 10, 10, image_size=(40, 40))
        assert filter_by_iou([lab], [good, bad]) == [good]


class TestDepth:
    def test_codec(self):
        assert encode_depth(np.array([1.0]))[0] == 256
        assert decode_depth(np.array([0]))[0] == 0.0
        assert encode_depth(np.array([np.nan, -1.0, 0.0])).tolist() == [0, 0, 0]
        with pytest.raises(ValueError):
            encode_depth(np.array([MAX_DEPTH + 1]))

    def test_round_trip_error(self, tmp_path, rng):
        d = rng.uniform(0.01, 250, (40, 60))
        path = tmp_path / "d.png"
        write_depth(path, d)
        assert np.abs(read_depth(path) - d).max() <= 1 / 512

    def test_visible_depth_written_as_image(self, tmp_path):
        m = rect_mask(2, 3, 2, 2, image_size=(10, 8))
        path = tmp_path / "v.png"
        write_depth(path, VisibleDepthGT(m, [10.0, 11.0, 12.0, 13.0]))
        img = read_depth(path)
        assert img.shape == (8, 10) and np.count_nonzero(img) == 4 and img[3, 2] == 10.0


class TestFrames:
    def test_synthetic_split_loads(self, tmp_path):
        ids = write_synthetic_split(tmp_path, n_frames=2, seed=3)
        assert list_frames(tmp_path) == ids == ["000000", "000001"]
        fr = load_frame(tmp_path, ids[0])
        assert len(fr.cloud) > 1000 and fr.calib.image_size == (1242, 375)
        assert fr.masks and all(fr.label_for(r) is not None for r in fr.masks)
        assert all(fr.label_for(r).cls == r.mask.cls for r in fr.masks)

    def test_missing_pieces(self, tmp_path):
        with pytest.raises(DataError):
            list_frames(tmp_path)
        write_synthetic_split(tmp_path, n_frames=1, seed=0)
        (tmp_path / "calib" / "000000.txt").unlink()
        with pytest.raises(DataError):
            load_frame(tmp_path, "000000")
