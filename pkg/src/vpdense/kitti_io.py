"""KITTI-format readers and writers.

Layout of a split directory::

    velodyne/<id>.bin        float32 (x, y, z, intensity) records
    calib/<id>.txt           P2, R0_rect, Tr_velo_to_cam rows
    label_2/<id>.txt         object labels (camera frame)
    instance_masks/<id>.png  uint16 instance ids, 0 = background
    instance_masks/<id>.json {"<id>": {"class": "car", "label_index": 3}}
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass
from pathlib import Path

import cv2
import numpy as np

from .geometry import CLASSES, Box3D, CameraCalib, InstanceMask, PointCloud, wrap_angle

DEPTH_SCALE = 256.0
MAX_DEPTH = 65535 / DEPTH_SCALE


class DataError(ValueError):
    """Malformed or missing input data."""


def _need(path) -> Path:
    path = Path(path)
    if not path.is_file():
        raise DataError(f"missing file: {path}")
    return path


# ---------------------------------------------------------------------------
# point clouds

def read_point_cloud(path) -> PointCloud:
    path = _need(path)
    raw = path.read_bytes()
    if len(raw) % 16:
        raise DataError(f"{path}: size {len(raw)} is not a multiple of 16 bytes")
    rec = np.frombuffer(raw, dtype="<f4").reshape(-1, 4)
    return PointCloud(rec[:, :3].astype(np.float64), rec[:, 3].astype(np.float64))


def write_point_cloud(path, cloud: PointCloud) -> None:
    inten = cloud.intensity if cloud.intensity is not None else np.zeros(len(cloud))
    np.column_stack([cloud.points, inten]).astype("<f4").tofile(path)


# ---------------------------------------------------------------------------
# calibration

_CALIB_SHAPES = {"P2": (3, 4), "R0_rect": (3, 3), "Tr_velo_to_cam": (3, 4)}


def parse_calib(text: str, image_size=None, source="calib") -> CameraCalib:
    rows = {}
    for n, line in enumerate(text.splitlines(), 1):
        if not line.strip():
            continue
        if ":" not in line:
            raise DataError(f"{source}:{n}: expected 'key: values'")
        key, values = line.split(":", 1)
        try:
            rows[key.strip()] = np.array([float(v) for v in values.split()])
        except ValueError as exc:
            raise DataError(f"{source}:{n}: {exc}") from None
    mats = {}
    for key, shape in _CALIB_SHAPES.items():
        if key not in rows:
            raise DataError(f"{source}: missing key {key}")
        if rows[key].size != shape[0] * shape[1]:
            raise DataError(f"{source}: {key} has {rows[key].size} values, expected {shape[0] * shape[1]}")
        mats[key] = rows[key].reshape(shape)
    try:
        return CameraCalib(mats["P2"], mats["R0_rect"], mats["Tr_velo_to_cam"], image_size)
    except ValueError as exc:
        raise DataError(f"{source}: {exc}") from None


def read_calib(path, image_size=None) -> CameraCalib:
    path = _need(path)
    return parse_calib(path.read_text(), image_size, str(path))


def format_calib(calib: CameraCalib) -> str:
    def row(m):
        return " ".join(repr(float(v)) for v in np.ravel(m))

    return (f"P2: {row(calib.P)}\nR0_rect: {row(calib.R0)}\n"
            f"Tr_velo_to_cam: {row(calib.Tr[:3])}\n")


# ---------------------------------------------------------------------------
# labels

@dataclass(frozen=True)
class Label:
    cls: str
    box: Box3D
    truncation: float
    occlusion: int
    bbox2d: tuple
    index: int


def parse_label_row(row: str, calib: CameraCalib, index: int = 0) -> Label | None:
    """One label row as a sensor-frame box; DontCare gives ``None``."""
    f = row.split()
    if not f:
        return None
    if f[0] == "DontCare":
        return None
    if len(f) < 15:
        raise DataError(f"label row {index} has {len(f)} fields, expected 15")
    try:
        v = [float(x) for x in f[1:15]]
    except ValueError as exc:
        raise DataError(f"label row {index}: {exc}") from None
    h, w, l = v[7:10]
    loc = np.array(v[10:13])
    # the label location is the bottom centre; camera y points down
    center = calib.rect_to_sensor(loc - np.array([0.0, h / 2, 0.0]))[0]
    heading = wrap_angle(-v[13] - np.pi / 2)
    try:
        box = Box3D(center, (l, w, h), heading)
    except ValueError as exc:
        raise DataError(f"label row {index}: {exc}") from None
    return Label(f[0].lower(), box, v[0], int(v[1]), tuple(v[3:7]), index)


def read_labels(path, calib: CameraCalib) -> list:
    path = _need(path)
    out = []
    for i, row in enumerate(path.read_text().splitlines()):
        lab = parse_label_row(row, calib, i)
        if lab is not None:
            out.append(lab)
    return out


# ---------------------------------------------------------------------------
# instance masks

@dataclass(frozen=True)
class MaskRecord:
    id: int
    mask: InstanceMask
    label_index: int | None


def _read_png16(path) -> np.ndarray:
    path = _need(path)
    img = cv2.imread(str(path), cv2.IMREAD_UNCHANGED)
    if img is None:
        raise DataError(f"{path}: unreadable or truncated PNG")
    if img.ndim != 2 or img.dtype != np.uint16:
        raise DataError(f"{path}: expected a 16-bit single-channel image")
    return img


def read_mask_records(path, table_path=None) -> list:
    path = Path(path)
    img = _read_png16(path)
    table_path = Path(table_path) if table_path else path.with_suffix(".json")
    try:
        table = json.loads(_need(table_path).read_text())
    except json.JSONDecodeError as exc:
        raise DataError(f"{table_path}: {exc}") from None
    h, w = img.shape
    out = []
    for iid in np.unique(img):
        if iid == 0:
            continue
        entry = table.get(str(int(iid)))
        if entry is None:
            raise DataError(f"{path}: instance id {iid} has no class entry")
        cls = entry.get("class")
        if cls not in CLASSES:
            raise DataError(f"{path}: unknown class {cls!r} for id {iid}")
        mask = InstanceMask.from_bool(img == iid, cls)
        out.append(MaskRecord(int(iid), mask, entry.get("label_index")))
    return out


def read_masks(path, table_path=None) -> list:
    """One InstanceMask per nonzero id, in increasing id order."""
    return [r.mask for r in read_mask_records(path, table_path)]


def write_masks(path, masks, label_indices=None) -> None:
    masks = list(masks)
    if not masks:
        raise ValueError("nothing to write")
    w, h = masks[0].image_size
    img = np.zeros((h, w), dtype=np.uint16)
    table = {}
    for i, m in enumerate(masks, 1):
        img[m.pixels[:, 1], m.pixels[:, 0]] = i
        table[str(i)] = {"class": m.cls, "label_index": None if label_indices is None else label_indices[i - 1]}
    cv2.imwrite(str(path), img)
    Path(path).with_suffix(".json").write_text(json.dumps(table, indent=1, sort_keys=True) + "\n")


def filter_by_iou(label_masks, predicted_masks, threshold: float = 0.7) -> list:
    """Predicted masks whose best IOU against a label mask exceeds ``threshold``."""
    from .gtgen import pixel_mask_iou

    keep = []
    for p in predicted_masks:
        best = max((pixel_mask_iou(p, m) for m in label_masks if m.cls == p.cls), default=0.0)
        if best > threshold:
            keep.append(p)
    return keep


# ---------------------------------------------------------------------------
# depth maps

def encode_depth(depth) -> np.ndarray:
    d = np.asarray(depth, dtype=np.float64)
    valid = np.isfinite(d) & (d > 0)
    if np.any(d[valid] > MAX_DEPTH):
        raise ValueError(f"depth above the encodable maximum {MAX_DEPTH:.3f} m")
    out = np.zeros(d.shape, dtype=np.uint16)
    out[valid] = np.floor(d[valid] * DEPTH_SCALE + 0.5).astype(np.uint16)
    return out


def decode_depth(stored) -> np.ndarray:
    """Metres, with 0 for invalid pixels."""
    return np.asarray(stored, dtype=np.float64) / DEPTH_SCALE


def write_depth(path, depth) -> None:
    """Write a depth map, or a VisibleDepthGT rendered to a full image."""
    img = depth.to_image() if hasattr(depth, "to_image") else depth
    if np.asarray(img).ndim != 2:
        raise ValueError("depth map must be 2-D")
    if not cv2.imwrite(str(path), encode_depth(img)):
        raise DataError(f"cannot write {path}")


def read_depth(path) -> np.ndarray:
    return decode_depth(_read_png16(path))


# ---------------------------------------------------------------------------
# frames

@dataclass(frozen=True)
class FrameBundle:
    id: str
    cloud: PointCloud
    calib: CameraCalib
    labels: list
    masks: list

    def label_for(self, record: MaskRecord) -> Label | None:
        if record.label_index is None:
            return None
        for lab in self.labels:
            if lab.index == record.label_index:
                return lab
        return None


def list_frames(root) -> list:
    d = Path(root) / "velodyne"
    if not d.is_dir():
        raise DataError(f"{root}: no velodyne directory")
    return sorted(p.stem for p in d.glob("*.bin"))


def load_frame(root, frame_id: str) -> FrameBundle:
    root = Path(root)
    mask_png = root / "instance_masks" / f"{frame_id}.png"
    records = read_mask_records(mask_png) if mask_png.exists() else []
    size = records[0].mask.image_size if records else None
    if size is None and mask_png.exists():
        h, w = _read_png16(mask_png).shape
        size = (w, h)
    calib = read_calib(root / "calib" / f"{frame_id}.txt", size)
    label_path = root / "label_2" / f"{frame_id}.txt"
    labels = read_labels(label_path, calib) if label_path.exists() else []
    return FrameBundle(frame_id, read_point_cloud(root / "velodyne" / f"{frame_id}.bin"), calib, labels, records)


def kitti_root() -> Path | None:
    """A real KITTI object split if ``KITTI_ROOT`` points at one."""
    env = os.environ.get("KITTI_ROOT")
    if env and (Path(env) / "velodyne").is_dir():
        return Path(env)
    return None
