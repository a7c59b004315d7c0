"""Feature sets and their binary "SAFE" file format.

Layout (little-endian): ``b"SAFE"``, version u32, count u32, then per feature
u, v, scale, orientation, response (5 x f32), anchor validity (u8), anchor
xyz (3 x f64), descriptor (128 x f32).
"""
from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

MAGIC = b"SAFE"
VERSION = 1
RECORD = np.dtype([
    ("kp", "<f4", (5,)),
    ("valid", "u1"),
    ("anchor", "<f8", (3,)),
    ("desc", "<f4", (128,)),
])


class FeatureFileError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class FeatureSet:
    """Keypoints ``(N, 5)`` (u, v, scale, orientation, response), unit
    descriptors ``(N, 128)``, anchors ``(N, 3)`` with validity flags."""

    keypoints: np.ndarray
    descriptors: np.ndarray
    anchors: np.ndarray
    valid: np.ndarray
    pose_id: int = 0
    view_index: int = 0

    def __post_init__(self):
        kp = np.array(self.keypoints, dtype=np.float32).reshape(-1, 5)
        desc = np.array(self.descriptors, dtype=np.float32).reshape(-1, 128)
        anc = np.array(self.anchors, dtype=np.float64).reshape(-1, 3)
        val = np.array(self.valid, dtype=bool).reshape(-1)
        if not len(kp) == len(desc) == len(anc) == len(val):
            raise ValueError("feature arrays differ in length")
        for name, arr in (("keypoints", kp), ("descriptors", desc), ("anchors", anc), ("valid", val)):
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    def __len__(self):
        return len(self.keypoints)

    @property
    def n_valid(self) -> int:
        return int(self.valid.sum())


def encode_features(fs: FeatureSet) -> bytes:
    rec = np.zeros(len(fs), dtype=RECORD)
    rec["kp"] = fs.keypoints
    rec["valid"] = fs.valid
    rec["anchor"] = fs.anchors
    rec["desc"] = fs.descriptors
    return MAGIC + struct.pack("<II", VERSION, len(fs)) + rec.tobytes()


def decode_features(buf: bytes, pose_id=0, view_index=0) -> FeatureSet:
    if buf[:4] != MAGIC:
        raise FeatureFileError("not a SAFE feature file")
    if len(buf) < 12:
        raise FeatureFileError("truncated SAFE header")
    version, count = struct.unpack_from("<II", buf, 4)
    if version != VERSION:
        raise FeatureFileError(f"unsupported SAFE version {version}")
    need = 12 + count * RECORD.itemsize
    if len(buf) < need:
        raise FeatureFileError(f"SAFE file truncated: {len(buf)} < {need} bytes")
    rec = np.frombuffer(buf, dtype=RECORD, count=count, offset=12)
    return FeatureSet(rec["kp"], rec["desc"], rec["anchor"], rec["valid"] != 0, pose_id, view_index)


def save_features(fs: FeatureSet, path):
    Path(path).write_bytes(encode_features(fs))


def load_features(path, pose_id=0, view_index=0) -> FeatureSet:
    return decode_features(Path(path).read_bytes(), pose_id, view_index)
