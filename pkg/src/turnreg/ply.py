"""PLY point clouds: ASCII and binary little-endian.

Only the ``vertex`` element is kept. ``x, y, z`` and an optional
``intensity`` fill the cloud; any other scalar vertex property is returned in
``PointCloud.extra``. Writing emits x, y, z (and intensity when present) only.
"""
from __future__ import annotations

import io
from pathlib import Path

import numpy as np

from .geom import PointCloud

_TYPES = {
    "char": "i1", "int8": "i1", "uchar": "u1", "uint8": "u1",
    "short": "i2", "int16": "i2", "ushort": "u2", "uint16": "u2",
    "int": "i4", "int32": "i4", "uint": "u4", "uint32": "u4",
    "float": "f4", "float32": "f4", "double": "f8", "float64": "f8",
}


class PlyError(ValueError):
    pass


def _parse_header(buf: bytes):
    end = buf.find(b"end_header")
    if not buf.startswith(b"ply") or end < 0:
        raise PlyError("not a PLY file")
    nl = buf.find(b"\n", end)
    if nl < 0:
        raise PlyError("header has no terminating newline")
    fmt = None
    elements = []  # [name, count, [(prop, dtype or ("list", count_t, item_t))]]
    for raw in buf[:end].decode("ascii", "replace").splitlines()[1:]:
        tok = raw.split()
        if not tok or tok[0] in ("comment", "obj_info"):
            continue
        if tok[0] == "format":
            fmt = tok[1]
        elif tok[0] == "element":
            elements.append([tok[1], int(tok[2]), []])
        elif tok[0] == "property":
            if not elements:
                raise PlyError("property before element")
            try:
                if tok[1] == "list":
                    elements[-1][2].append((tok[4], ("list", _TYPES[tok[2]], _TYPES[tok[3]])))
                else:
                    elements[-1][2].append((tok[2], _TYPES[tok[1]]))
            except (KeyError, IndexError):
                raise PlyError(f"bad property line {raw!r}") from None
        else:
            raise PlyError(f"unexpected header line {raw!r}")
    if fmt not in ("ascii", "binary_little_endian"):
        raise PlyError(f"unsupported PLY format {fmt!r}")
    return fmt, elements, nl + 1


def _skip_binary(buf, pos, count, props):
    if all(not isinstance(t, tuple) for _, t in props):
        return pos + count * sum(np.dtype(t).itemsize for _, t in props)
    for _ in range(count):
        for _, t in props:
            if isinstance(t, tuple):
                n = int(np.frombuffer(buf, "<" + t[1], 1, pos)[0])
                pos += np.dtype(t[1]).itemsize + n * np.dtype(t[2]).itemsize
            else:
                pos += np.dtype(t).itemsize
    return pos


def decode_ply(buf: bytes) -> PointCloud:
    fmt, elements, pos = _parse_header(buf)
    vertex = None
    if fmt == "ascii":
        lines = buf[pos:].decode("ascii").splitlines()
        line = 0
        for name, count, props in elements:
            if name == "vertex":
                if any(isinstance(t, tuple) for _, t in props):
                    raise PlyError("list properties on vertices are not supported")
                rows = lines[line:line + count]
                if len(rows) < count:
                    raise PlyError("truncated vertex data")
                table = np.array([r.split()[:len(props)] for r in rows], dtype=np.float64).reshape(count, len(props))
                vertex = {p: table[:, k].astype(t) for k, (p, t) in enumerate(props)}
            line += count
    else:
        for name, count, props in elements:
            if name == "vertex":
                if any(isinstance(t, tuple) for _, t in props):
                    raise PlyError("list properties on vertices are not supported")
                dt = np.dtype([(p, "<" + t) for p, t in props])
                if len(buf) - pos < count * dt.itemsize:
                    raise PlyError("truncated vertex data")
                rec = np.frombuffer(buf, dt, count, pos)
                vertex = {p: np.array(rec[p]) for p, _ in props}
                pos += count * dt.itemsize
            else:
                pos = _skip_binary(buf, pos, count, props)
    if vertex is None:
        raise PlyError("no vertex element")
    if not {"x", "y", "z"} <= vertex.keys():
        raise PlyError("vertex element lacks x, y, z")
    pts = np.column_stack([vertex.pop(k).astype(np.float64) for k in "xyz"])
    inten = vertex.pop("intensity", None)
    if inten is not None:
        inten = inten.astype(np.float64)
    return PointCloud(pts, inten, vertex)


def read_ply(path) -> PointCloud:
    buf = Path(path).read_bytes()
    try:
        return decode_ply(buf)
    except PlyError as exc:
        raise PlyError(f"{path}: {exc}") from None


def encode_ply(cloud: PointCloud, binary: bool = True, double: bool = False) -> bytes:
    t = "f8" if double else "f4"
    name = "double" if double else "float"
    fields = [("x", "<" + t), ("y", "<" + t), ("z", "<" + t)]
    if cloud.intensity is not None:
        fields.append(("intensity", "<" + t))
    header = ["ply", f"format {'binary_little_endian' if binary else 'ascii'} 1.0",
              f"element vertex {len(cloud)}"]
    header += [f"property {name} {f}" for f, _ in fields]
    header.append("end_header")
    head = ("\n".join(header) + "\n").encode("ascii")
    rec = np.empty(len(cloud), dtype=fields)
    for k, c in enumerate("xyz"):
        rec[c] = cloud.points[:, k]
    if cloud.intensity is not None:
        rec["intensity"] = cloud.intensity
    if binary:
        return head + rec.tobytes()
    cols = np.column_stack([rec[f].astype(np.float64) for f, _ in fields]).reshape(len(cloud), len(fields))
    out = io.StringIO()
    np.savetxt(out, cols, fmt="%.17g" if double else "%.9g")
    return head + out.getvalue().encode("ascii")


def write_ply(cloud: PointCloud, path, binary: bool = True, double: bool = False):
    Path(path).write_bytes(encode_ply(cloud, binary, double))
