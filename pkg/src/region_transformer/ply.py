"""PLY reading and writing (ascii, binary little/big endian)."""

from __future__ import annotations

import colorsys
import os

import numpy as np

from .pointcloud import RawCloud

__all__ = ["PLYError", "load_ply", "save_ply", "label_palette", "read_label_sidecar"]

_TYPES = {
    "char": "i1", "int8": "i1",
    "uchar": "u1", "uint8": "u1",
    "short": "i2", "int16": "i2",
    "ushort": "u2", "uint16": "u2",
    "int": "i4", "int32": "i4",
    "uint": "u4", "uint32": "u4",
    "float": "f4", "float32": "f4",
    "double": "f8", "float64": "f8",
}
_FORMATS = {"ascii": None, "binary_little_endian": "<", "binary_big_endian": ">"}


class PLYError(ValueError):
    """Malformed or truncated PLY input; the message names the byte offset."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset


class _Element:
    def __init__(self, name, count):
        self.name = name
        self.count = count
        self.props: list[tuple[str, str, str | None]] = []  # (name, dtype, list-count dtype)


def _parse_header(data: bytes):
    if not data.startswith(b"ply"):
        raise PLYError("missing 'ply' magic", 0)
    fmt = None
    elements: list[_Element] = []
    pos = 0
    while True:
        end = data.find(b"\n", pos)
        if end < 0:
            raise PLYError("header has no end_header line", pos)
        line = data[pos:end].decode("ascii", errors="replace").strip()
        words = line.split()
        lineno_offset = pos
        pos = end + 1
        if not words or words[0] in ("ply", "comment", "obj_info"):
            continue
        if words[0] == "end_header":
            break
        if words[0] == "format":
            if len(words) != 3 or words[1] not in _FORMATS:
                raise PLYError(f"unsupported format line {line!r}", lineno_offset)
            fmt = words[1]
        elif words[0] == "element":
            if len(words) != 3 or not words[2].isdigit():
                raise PLYError(f"bad element line {line!r}", lineno_offset)
            elements.append(_Element(words[1], int(words[2])))
        elif words[0] == "property":
            if not elements:
                raise PLYError("property before any element", lineno_offset)
            if len(words) == 5 and words[1] == "list":
                if words[2] not in _TYPES or words[3] not in _TYPES:
                    raise PLYError(f"unsupported property type in {line!r}", lineno_offset)
                elements[-1].props.append((words[4], _TYPES[words[3]], _TYPES[words[2]]))
            elif len(words) == 3:
                if words[1] not in _TYPES:
                    raise PLYError(f"unsupported property type {words[1]!r}", lineno_offset)
                elements[-1].props.append((words[2], _TYPES[words[1]], None))
            else:
                raise PLYError(f"bad property line {line!r}", lineno_offset)
        else:
            raise PLYError(f"unknown header keyword {words[0]!r}", lineno_offset)
    if fmt is None:
        raise PLYError("header lacks a format line", 0)
    return fmt, elements, pos


def _read_binary(data, offset, elem: _Element, endian):
    if all(p[2] is None for p in elem.props):
        dtype = np.dtype([(name, endian + t) for name, t, _ in elem.props])
        nbytes = dtype.itemsize * elem.count
        if offset + nbytes > len(data):
            have = (len(data) - offset) // max(dtype.itemsize, 1)
            raise PLYError(
                f"truncated body: element {elem.name!r} declares {elem.count} rows, "
                f"only {have} present",
                len(data),
            )
        arr = np.frombuffer(data, dtype=dtype, count=elem.count, offset=offset)
        return {name: arr[name] for name, _, _ in elem.props}, offset + nbytes
    # elements with list properties are walked row by row
    cols: dict[str, list] = {name: [] for name, _, _ in elem.props}
    for _ in range(elem.count):
        for name, t, count_t in elem.props:
            if count_t is not None:
                ct = np.dtype(endian + count_t)
                if offset + ct.itemsize > len(data):
                    raise PLYError(f"truncated list in element {elem.name!r}", offset)
                cnt = int(np.frombuffer(data, ct, 1, offset)[0])
                offset += ct.itemsize
                vt = np.dtype(endian + t)
                if offset + vt.itemsize * cnt > len(data):
                    raise PLYError(f"truncated list in element {elem.name!r}", offset)
                cols[name].append(np.frombuffer(data, vt, cnt, offset))
                offset += vt.itemsize * cnt
            else:
                vt = np.dtype(endian + t)
                if offset + vt.itemsize > len(data):
                    raise PLYError(f"truncated body in element {elem.name!r}", offset)
                cols[name].append(np.frombuffer(data, vt, 1, offset)[0])
                offset += vt.itemsize
    out = {}
    for name, t, count_t in elem.props:
        out[name] = cols[name] if count_t is not None else np.asarray(cols[name], dtype=t)
    return out, offset


def _read_ascii(data, offset, elem: _Element):
    cols: dict[str, list] = {name: [] for name, _, _ in elem.props}
    for row in range(elem.count):
        end = data.find(b"\n", offset)
        if end < 0:
            end = len(data)
        if offset >= len(data):
            raise PLYError(
                f"truncated body: element {elem.name!r} declares {elem.count} rows, only {row} present",
                offset,
            )
        words = data[offset:end].split()
        i = 0
        try:
            for name, t, count_t in elem.props:
                if count_t is not None:
                    cnt = int(words[i])
                    cols[name].append(np.asarray(words[i + 1 : i + 1 + cnt], dtype=t))
                    i += 1 + cnt
                else:
                    cols[name].append(float(words[i]) if t[0] == "f" else int(words[i]))
                    i += 1
        except (IndexError, ValueError) as exc:
            raise PLYError(f"bad ascii row {row} of element {elem.name!r}: {exc}", offset) from None
        offset = end + 1
    out = {}
    for name, t, count_t in elem.props:
        out[name] = cols[name] if count_t is not None else np.asarray(cols[name], dtype=t)
    return out, offset


def read_label_sidecar(path, n: int) -> np.ndarray:
    """One decimal instance id per line."""
    with open(path, "r") as fh:
        labels = [int(tok) for tok in fh.read().split()]
    if len(labels) != n:
        raise ValueError(f"label sidecar {path} has {len(labels)} entries, expected {n}")
    return np.asarray(labels, dtype=np.int64)


def load_ply(path, labels_path=None) -> RawCloud:
    """Read the ``vertex`` element of a PLY file into a :class:`RawCloud`.

    Colors default to 0.5 gray when absent; integer colors are rescaled by
    their type's maximum.  A ``label`` property, or else an optional sidecar
    file, supplies instance ids.
    """
    with open(path, "rb") as fh:
        data = fh.read()
    fmt, elements, offset = _parse_header(data)
    endian = _FORMATS[fmt]
    vertex = None
    for elem in elements:
        if endian is None:
            cols, offset = _read_ascii(data, offset, elem)
        else:
            cols, offset = _read_binary(data, offset, elem, endian)
        if elem.name == "vertex":
            vertex = (elem, cols)
            break
    if vertex is None:
        raise PLYError("no vertex element", 0)
    elem, cols = vertex
    for axis in "xyz":
        if axis not in cols:
            raise PLYError(f"vertex element lacks property {axis!r}", 0)
    positions = np.stack([np.asarray(cols[a], dtype=np.float64) for a in "xyz"], axis=1)
    if elem.count == 0:
        raise PLYError("vertex element is empty", offset)
    if all(c in cols for c in ("red", "green", "blue")):
        chans = []
        for c in ("red", "green", "blue"):
            arr = np.asarray(cols[c])
            if arr.dtype.kind in "ui":
                chans.append(arr.astype(np.float64) / np.iinfo(arr.dtype).max)
            else:
                chans.append(arr.astype(np.float64))
        colors = np.clip(np.stack(chans, axis=1), 0.0, 1.0)
    else:
        colors = np.full_like(positions, 0.5)
    labels = None
    if "label" in cols:
        labels = np.asarray(cols["label"]).astype(np.int64)
    elif labels_path is not None:
        labels = read_label_sidecar(labels_path, len(positions))
    return RawCloud(positions, colors, labels)


def label_palette(labels) -> np.ndarray:
    """Deterministic label -> uint8 RGB map; distinct labels get distinct colors."""
    labels = np.asarray(labels, dtype=np.int64)
    uniq, inv = np.unique(labels, return_inverse=True)
    table = np.empty((len(uniq), 3), dtype=np.uint8)
    seen: set[tuple[int, int, int]] = set()
    for i, lab in enumerate(uniq):
        j = 0
        while True:
            h = ((int(lab) + j) * 0.618033988749895) % 1.0
            s = 0.55 + 0.4 * (((int(lab) + j) * 7) % 5) / 4
            v = 0.65 + 0.3 * (((int(lab) + j) * 3) % 4) / 3
            rgb = tuple(int(round(255 * c)) for c in colorsys.hsv_to_rgb(h, s, v))
            if rgb not in seen:
                break
            j += 1 + len(uniq)
        seen.add(rgb)
        table[i] = rgb
    return table[inv]


def save_ply(cloud: RawCloud, labels, path, keep_colors: bool = False) -> None:
    """Binary little-endian PLY: double xyz, uchar RGB, int32 ``label``.

    RGB is the label palette unless ``keep_colors`` writes the cloud's own
    colors (quantised to 8 bits).
    """
    labels = np.asarray(labels, dtype=np.int64)
    if labels.shape != (len(cloud),):
        raise ValueError(f"labels length {labels.shape} does not match N={len(cloud)}")
    if keep_colors:
        rgb = np.round(np.asarray(cloud.colors) * 255).astype(np.uint8)
    else:
        rgb = label_palette(labels)
    dtype = np.dtype(
        [("x", "<f8"), ("y", "<f8"), ("z", "<f8"),
         ("red", "u1"), ("green", "u1"), ("blue", "u1"), ("label", "<i4")]
    )
    rows = np.empty(len(cloud), dtype=dtype)
    for i, a in enumerate("xyz"):
        rows[a] = cloud.positions[:, i]
    rows["red"], rows["green"], rows["blue"] = rgb[:, 0], rgb[:, 1], rgb[:, 2]
    rows["label"] = labels
    header = (
        "ply\nformat binary_little_endian 1.0\n"
        f"element vertex {len(cloud)}\n"
        "property double x\nproperty double y\nproperty double z\n"
        "property uchar red\nproperty uchar green\nproperty uchar blue\n"
        "property int label\nend_header\n"
    )
    tmp = f"{os.fspath(path)}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(header.encode("ascii"))
        fh.write(rows.tobytes())
    os.replace(tmp, path)
