"""
utils/pcrv.py · PCRV container codec for ConDA Desk

Little-endian throughout. Two payload layouts share the "PCRV" magic and are
told apart by the u32 version field:

  version 1 (point cloud):
      "PCRV" u32 version u32 count u8 has_labels
      count × { 4×f32 x y z intensity [u16 label] }      label 0xFFFF = IGNORE

  version 2 (grids):
      "PCRV" u32 version u32 blocks
      blocks × { u32 h u32 w u32 channels u8 dtype  data[channels][h][w] }
      dtype: 0 f32, 1 u16 label (0xFFFF = IGNORE), 2 i32, 3 f64

A RangeImage is three grid blocks: channels (f32, 6), point_index (i32, 1)
and the field of view (f64, 1×1×2). A LabelMap is one u16 block.
See docs/formats.md.
"""

import hashlib
import struct
from pathlib import Path

import numpy as np

from modules.pointcloud import IGNORE, LabelMap, PointCloud, RangeImage
from utils.errors import DataError

MAGIC = b"PCRV"
VERSION_CLOUD = 1
VERSION_GRID = 2
IGNORE_U16 = 0xFFFF

DTYPES = {0: "<f4", 1: "<u2", 2: "<i4", 3: "<f8"}


def file_digest(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _labels_to_u16(labels: np.ndarray) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64)
    if np.any((labels != IGNORE) & ((labels < 0) | (labels >= IGNORE_U16))):
        raise DataError("label outside the u16 range of the PCRV container")
    return np.where(labels == IGNORE, IGNORE_U16, labels).astype("<u2")


def _labels_from_u16(raw: np.ndarray) -> np.ndarray:
    raw = raw.astype(np.int64)
    return np.where(raw == IGNORE_U16, IGNORE, raw)


def _read_header(buf: bytes, path) -> int:
    if len(buf) < 8 or buf[:4] != MAGIC:
        raise DataError(f"{path}: not a PCRV file")
    (version,) = struct.unpack_from("<I", buf, 4)
    return version


# ── Point clouds ───────────────────────────────────────────────────────────────
def encode_cloud(cloud: PointCloud) -> bytes:
    has_labels = cloud.labels is not None
    fields = [("xyzi", "<f4", (4,))]
    if has_labels:
        fields.append(("label", "<u2"))
    rec = np.zeros(len(cloud), dtype=np.dtype(fields))
    rec["xyzi"] = cloud.points.astype("<f4")
    if has_labels:
        rec["label"] = _labels_to_u16(cloud.labels)
    header = MAGIC + struct.pack("<IIB", VERSION_CLOUD, len(cloud), int(has_labels))
    return header + rec.tobytes()


def decode_cloud(buf: bytes, path="<bytes>") -> PointCloud:
    version = _read_header(buf, path)
    if version != VERSION_CLOUD:
        raise DataError(f"{path}: expected a point-cloud payload, found version {version}")
    count, has_labels = struct.unpack_from("<IB", buf, 8)
    fields = [("xyzi", "<f4", (4,))]
    if has_labels:
        fields.append(("label", "<u2"))
    dt = np.dtype(fields)
    body = buf[13:]
    if len(body) != count * dt.itemsize:
        raise DataError(f"{path}: truncated payload ({len(body)} bytes for {count} points)")
    rec = np.frombuffer(body, dtype=dt, count=count)
    labels = _labels_from_u16(rec["label"]) if has_labels else None
    return PointCloud(points=rec["xyzi"].astype(np.float64), labels=labels)


def write_cloud(path, cloud: PointCloud) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_bytes(encode_cloud(cloud))


def read_cloud(path) -> PointCloud:
    path = Path(path)
    if not path.exists():
        raise DataError(f"missing point-cloud file: {path}")
    return decode_cloud(path.read_bytes(), path)


# ── Grids ──────────────────────────────────────────────────────────────────────
def encode_grids(blocks: list) -> bytes:
    """blocks: arrays shaped (channels, h, w) with a dtype listed in DTYPES."""
    out = [MAGIC, struct.pack("<II", VERSION_GRID, len(blocks))]
    for arr in blocks:
        arr = np.asarray(arr)
        codes = [k for k, v in DTYPES.items() if np.dtype(v) == arr.dtype]
        if not codes:
            raise DataError(f"grid dtype {arr.dtype} has no PCRV code")
        code = codes[0]
        c, h, w = arr.shape
        out.append(struct.pack("<IIIB", h, w, c, code))
        out.append(np.ascontiguousarray(arr, dtype=DTYPES[code]).tobytes())
    return b"".join(out)


def decode_grids(buf: bytes, path="<bytes>") -> list:
    version = _read_header(buf, path)
    if version != VERSION_GRID:
        raise DataError(f"{path}: expected a grid payload, found version {version}")
    (count,) = struct.unpack_from("<I", buf, 8)
    offset, blocks = 12, []
    for _ in range(count):
        h, w, c, code = struct.unpack_from("<IIIB", buf, offset)
        offset += 13
        if code not in DTYPES:
            raise DataError(f"{path}: unknown grid dtype code {code}")
        dt = np.dtype(DTYPES[code])
        n = h * w * c
        if offset + n * dt.itemsize > len(buf):
            raise DataError(f"{path}: truncated grid block")
        arr = np.frombuffer(buf, dtype=dt, count=n, offset=offset).reshape(c, h, w)
        offset += n * dt.itemsize
        blocks.append(arr)
    return blocks


def write_range_image(path, ri: RangeImage) -> None:
    blocks = [
        ri.channels.astype("<f4"),
        ri.point_index.astype("<i4")[None],
        np.array([[[ri.fov_up, ri.fov_down]]], dtype="<f8"),
    ]
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_bytes(encode_grids(blocks))


def read_range_image(path) -> RangeImage:
    blocks = decode_grids(Path(path).read_bytes(), path)
    if len(blocks) != 3:
        raise DataError(f"{path}: range image needs 3 grid blocks, found {len(blocks)}")
    channels, index, fov = blocks
    return RangeImage(
        channels=channels.astype(np.float64),
        point_index=index[0].astype(np.int64),
        fov_up=float(fov[0, 0, 0]),
        fov_down=float(fov[0, 0, 1]),
    )


def write_label_map(path, lm: LabelMap) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_bytes(encode_grids([_labels_to_u16(lm.grid)[None]]))


def read_label_map(path) -> LabelMap:
    blocks = decode_grids(Path(path).read_bytes(), path)
    if len(blocks) != 1 or blocks[0].dtype != np.dtype("<u2"):
        raise DataError(f"{path}: not a label-map container")
    return LabelMap(grid=_labels_from_u16(blocks[0][0]))
