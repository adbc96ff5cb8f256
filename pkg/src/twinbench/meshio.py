"""Readers and writers for the mesh formats the harness accepts.

Supported: OBJ, PLY (ASCII and binary), STL (ASCII and binary), GLB
(glTF 2.0 binary container). Readers return raw (vertices, faces) arrays;
degenerate-face filtering and validation happen in :mod:`twinbench.mesh`.

Polygonal faces (quads etc.) are fan-triangulated. Only geometry is read;
textures, colors and materials are ignored.
"""
from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .errors import UnreadableFile, UnsupportedFormat

FORMATS = ("obj", "ply", "stl", "glb")


def detect_format(path: str | Path) -> str:
    ext = Path(path).suffix.lower().lstrip(".")
    if ext in FORMATS:
        return ext
    raise UnsupportedFormat(f"cannot infer mesh format from suffix {Path(path).suffix!r}")


def read_mesh_file(path: str | Path, fmt: str | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Read raw vertices (n,3) and triangle faces (m,3) from a mesh file."""
    path = Path(path)
    if fmt is None:
        fmt = detect_format(path)
    fmt = fmt.lower()
    if fmt not in FORMATS:
        raise UnsupportedFormat(f"unsupported mesh format {fmt!r}")
    if not path.is_file():
        raise UnreadableFile(f"no such file: {path}")
    try:
        data = path.read_bytes()
    except OSError as exc:
        raise UnreadableFile(f"cannot read {path}: {exc}") from exc
    try:
        if fmt == "obj":
            return _read_obj(data)
        if fmt == "ply":
            return _read_ply(data)
        if fmt == "stl":
            return _read_stl(data)
        return _read_glb(data)
    except (UnreadableFile, UnsupportedFormat):
        raise
    except Exception as exc:
        raise UnreadableFile(f"failed to parse {path} as {fmt}: {exc}") from exc


def _triangulate(indices: list[int]) -> list[tuple[int, int, int]]:
    return [(indices[0], indices[k], indices[k + 1]) for k in range(1, len(indices) - 1)]


# ---------------------------------------------------------------- OBJ


def _read_obj(data: bytes) -> tuple[np.ndarray, np.ndarray]:
    vertices: list[tuple[float, float, float]] = []
    faces: list[tuple[int, int, int]] = []
    for raw in data.decode("utf-8", errors="replace").splitlines():
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split()
        if parts[0] == "v" and len(parts) >= 4:
            vertices.append((float(parts[1]), float(parts[2]), float(parts[3])))
        elif parts[0] == "f" and len(parts) >= 4:
            idx = []
            for token in parts[1:]:
                # tokens look like "3", "3/1" or "3/1/2"; only vertex index matters
                i = int(token.split("/")[0])
                idx.append(i - 1 if i > 0 else len(vertices) + i)
            faces.extend(_triangulate(idx))
    return _as_arrays(vertices, faces)


def write_obj(path: str | Path, vertices: np.ndarray, faces: np.ndarray) -> None:
    lines = [f"v {x:.17g} {y:.17g} {z:.17g}" for x, y, z in np.asarray(vertices, dtype=float)]
    lines += [f"f {a + 1} {b + 1} {c + 1}" for a, b, c in np.asarray(faces, dtype=int)]
    Path(path).write_text("\n".join(lines) + "\n")


# ---------------------------------------------------------------- PLY


def _read_ply(data: bytes) -> tuple[np.ndarray, np.ndarray]:
    if not data.startswith(b"ply"):
        raise UnreadableFile("missing 'ply' magic")
    header_end = data.find(b"end_header")
    if header_end < 0:
        raise UnreadableFile("missing 'end_header'")
    header = data[:header_end].decode("ascii", errors="replace").splitlines()
    body = data[data.find(b"\n", header_end) + 1 :]

    fmt = None
    elements: list[tuple[str, int, list[tuple[str, str, str]]]] = []
    for line in header:
        parts = line.split()
        if not parts:
            continue
        if parts[0] == "format":
            fmt = parts[1]
        elif parts[0] == "element":
            elements.append((parts[1], int(parts[2]), []))
        elif parts[0] == "property" and elements:
            if parts[1] == "list":
                elements[-1][2].append(("list", parts[2], parts[3]))
            else:
                elements[-1][2].append(("scalar", parts[1], parts[-1]))
    if fmt == "ascii":
        return _read_ply_ascii(body, elements)
    if fmt in ("binary_little_endian", "binary_big_endian"):
        return _read_ply_binary(body, elements, "<" if fmt.endswith("little_endian") else ">")
    raise UnreadableFile(f"unknown ply format {fmt!r}")


_PLY_STRUCT = {
    "char": "b", "int8": "b", "uchar": "B", "uint8": "B",
    "short": "h", "int16": "h", "ushort": "H", "uint16": "H",
    "int": "i", "int32": "i", "uint": "I", "uint32": "I",
    "float": "f", "float32": "f", "double": "d", "float64": "d",
}


def _read_ply_ascii(body: bytes, elements) -> tuple[np.ndarray, np.ndarray]:
    tokens = body.decode("ascii", errors="replace").split("\n")
    vertices: list[tuple[float, float, float]] = []
    faces: list[tuple[int, int, int]] = []
    row = 0
    lines = [t for t in tokens if t.strip()]
    for name, count, props in elements:
        for _ in range(count):
            parts = lines[row].split()
            row += 1
            if name == "vertex":
                record = {}
                cursor = 0
                for kind, a, b in props:
                    record[b if kind == "scalar" else a] = parts[cursor]
                    cursor += 1
                vertices.append((float(record["x"]), float(record["y"]), float(record["z"])))
            elif name == "face":
                n = int(parts[0])
                faces.extend(_triangulate([int(v) for v in parts[1 : 1 + n]]))
    return _as_arrays(vertices, faces)


def _read_ply_binary(body: bytes, elements, endian: str) -> tuple[np.ndarray, np.ndarray]:
    offset = 0
    vertices: list[tuple[float, float, float]] = []
    faces: list[tuple[int, int, int]] = []
    for name, count, props in elements:
        for _ in range(count):
            record = {}
            for kind, a, b in props:
                if kind == "scalar":
                    code = _PLY_STRUCT[a]
                    (value,) = struct.unpack_from(endian + code, body, offset)
                    offset += struct.calcsize(code)
                    record[b] = value
                else:
                    count_code, item_code = _PLY_STRUCT[a], _PLY_STRUCT[b]
                    (n,) = struct.unpack_from(endian + count_code, body, offset)
                    offset += struct.calcsize(count_code)
                    items = struct.unpack_from(endian + item_code * n, body, offset)
                    offset += struct.calcsize(item_code) * n
                    record["list"] = items
            if name == "vertex":
                vertices.append((float(record["x"]), float(record["y"]), float(record["z"])))
            elif name == "face" and "list" in record:
                faces.extend(_triangulate([int(v) for v in record["list"]]))
    return _as_arrays(vertices, faces)


def write_ply(path: str | Path, vertices: np.ndarray, faces: np.ndarray, binary: bool = True) -> None:
    vertices = np.asarray(vertices, dtype="<f4")
    faces = np.asarray(faces, dtype="<i4")
    header = (
        "ply\n"
        f"format {'binary_little_endian' if binary else 'ascii'} 1.0\n"
        f"element vertex {len(vertices)}\n"
        "property float x\nproperty float y\nproperty float z\n"
        f"element face {len(faces)}\n"
        "property list uchar int vertex_indices\n"
        "end_header\n"
    )
    with open(path, "wb") as fh:
        fh.write(header.encode("ascii"))
        if binary:
            fh.write(vertices.tobytes())
            for f in faces:
                fh.write(struct.pack("<Biii", 3, *f))
        else:
            for v in vertices:
                fh.write(f"{v[0]:.9g} {v[1]:.9g} {v[2]:.9g}\n".encode("ascii"))
            for f in faces:
                fh.write(f"3 {f[0]} {f[1]} {f[2]}\n".encode("ascii"))


# ---------------------------------------------------------------- STL


def _read_stl(data: bytes) -> tuple[np.ndarray, np.ndarray]:
    # ASCII STL starts with "solid", but some binary exporters do too;
    # trust the triangle count arithmetic over the magic word.
    if len(data) >= 84:
        (n_tri,) = struct.unpack_from("<I", data, 80)
        if len(data) == 84 + 50 * n_tri:
            return _read_stl_binary(data, n_tri)
    if data.lstrip().startswith(b"solid"):
        return _read_stl_ascii(data)
    raise UnreadableFile("not a valid STL file")


def _read_stl_binary(data: bytes, n_tri: int) -> tuple[np.ndarray, np.ndarray]:
    raw = np.frombuffer(data, dtype=np.uint8, count=50 * n_tri, offset=84)
    tri = raw.reshape(n_tri, 50)[:, 12:48].copy().view("<f4").reshape(n_tri, 3, 3)
    return _weld(tri.astype(float))


def _read_stl_ascii(data: bytes) -> tuple[np.ndarray, np.ndarray]:
    coords = []
    for line in data.decode("ascii", errors="replace").splitlines():
        parts = line.split()
        if parts and parts[0] == "vertex":
            coords.append([float(parts[1]), float(parts[2]), float(parts[3])])
    tri = np.array(coords, dtype=float).reshape(-1, 3, 3)
    return _weld(tri)


def _weld(triangles: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Merge exactly-equal corner coordinates into shared vertices."""
    flat = triangles.reshape(-1, 3)
    vertices, inverse = np.unique(flat, axis=0, return_inverse=True)
    return vertices, inverse.reshape(-1, 3).astype(np.int64)


def write_stl(path: str | Path, vertices: np.ndarray, faces: np.ndarray) -> None:
    vertices = np.asarray(vertices, dtype=float)
    faces = np.asarray(faces, dtype=int)
    with open(path, "wb") as fh:
        fh.write(b"\0" * 80)
        fh.write(struct.pack("<I", len(faces)))
        for a, b, c in faces:
            va, vb, vc = vertices[a], vertices[b], vertices[c]
            n = np.cross(vb - va, vc - va)
            norm = np.linalg.norm(n)
            n = n / norm if norm > 0 else n
            fh.write(struct.pack("<3f", *n))
            for v in (va, vb, vc):
                fh.write(struct.pack("<3f", *v))
            fh.write(b"\0\0")


# ---------------------------------------------------------------- GLB

_GLTF_COMPONENT = {5120: "b", 5121: "B", 5122: "h", 5123: "H", 5125: "I", 5126: "f"}
_GLTF_NCOMP = {"SCALAR": 1, "VEC2": 2, "VEC3": 3, "VEC4": 4, "MAT4": 16}


def _read_glb(data: bytes) -> tuple[np.ndarray, np.ndarray]:
    if data[:4] != b"glTF":
        raise UnreadableFile("missing glTF magic")
    (version,) = struct.unpack_from("<I", data, 4)
    if version != 2:
        raise UnsupportedFormat(f"glTF version {version} not supported")
    offset = 12
    gltf = None
    binary = b""
    while offset < len(data):
        length, kind = struct.unpack_from("<II", data, offset)
        chunk = data[offset + 8 : offset + 8 + length]
        if kind == 0x4E4F534A:  # JSON
            gltf = json.loads(chunk.decode("utf-8"))
        elif kind == 0x004E4942:  # BIN
            binary = chunk
        offset += 8 + length + ((-length) % 4)
    if gltf is None:
        raise UnreadableFile("GLB has no JSON chunk")

    def accessor_array(index: int) -> np.ndarray:
        acc = gltf["accessors"][index]
        view = gltf["bufferViews"][acc["bufferView"]]
        code = _GLTF_COMPONENT[acc["componentType"]]
        ncomp = _GLTF_NCOMP[acc["type"]]
        start = view.get("byteOffset", 0) + acc.get("byteOffset", 0)
        itemsize = struct.calcsize(code)
        stride = view.get("byteStride", itemsize * ncomp)
        if stride == itemsize * ncomp:
            flat = np.frombuffer(binary, dtype="<" + code, count=acc["count"] * ncomp, offset=start)
            return flat.reshape(acc["count"], ncomp).astype(float)
        out = np.empty((acc["count"], ncomp))
        for i in range(acc["count"]):
            out[i] = struct.unpack_from("<" + code * ncomp, binary, start + i * stride)
        return out

    all_vertices: list[np.ndarray] = []
    all_faces: list[np.ndarray] = []

    def node_matrix(node: dict) -> np.ndarray:
        if "matrix" in node:
            return np.array(node["matrix"], dtype=float).reshape(4, 4).T
        m = np.eye(4)
        if "scale" in node:
            m[:3, :3] = np.diag(node["scale"])
        if "rotation" in node:
            x, y, z, w = node["rotation"]  # glTF stores xyzw
            from .transforms import quat_to_matrix

            m[:3, :3] = quat_to_matrix([w, x, y, z]) @ m[:3, :3]
        if "translation" in node:
            m[:3, 3] = node["translation"]
        return m

    def walk(node_index: int, parent: np.ndarray) -> None:
        node = gltf["nodes"][node_index]
        m = parent @ node_matrix(node)
        if "mesh" in node:
            for prim in gltf["meshes"][node["mesh"]]["primitives"]:
                if prim.get("mode", 4) != 4:  # triangles only
                    continue
                verts = accessor_array(prim["attributes"]["POSITION"])
                if "indices" in prim:
                    faces = accessor_array(prim["indices"]).astype(np.int64).reshape(-1, 3)
                else:
                    faces = np.arange(len(verts), dtype=np.int64).reshape(-1, 3)
                verts_h = np.concatenate([verts, np.ones((len(verts), 1))], axis=1)
                base = sum(len(v) for v in all_vertices)
                all_vertices.append((verts_h @ m.T)[:, :3])
                all_faces.append(faces + base)
        for child in node.get("children", []):
            walk(child, m)

    scene = gltf.get("scene", 0)
    roots = gltf["scenes"][scene]["nodes"] if "scenes" in gltf else range(len(gltf["nodes"]))
    for root in roots:
        walk(root, np.eye(4))
    if not all_vertices:
        # meshes may exist without a node referencing them
        for mesh in gltf.get("meshes", []):
            for prim in mesh["primitives"]:
                if prim.get("mode", 4) != 4:
                    continue
                verts = accessor_array(prim["attributes"]["POSITION"])
                if "indices" in prim:
                    faces = accessor_array(prim["indices"]).astype(np.int64).reshape(-1, 3)
                else:
                    faces = np.arange(len(verts), dtype=np.int64).reshape(-1, 3)
                base = sum(len(v) for v in all_vertices)
                all_vertices.append(verts)
                all_faces.append(faces + base)
    if not all_vertices:
        return np.zeros((0, 3)), np.zeros((0, 3), dtype=np.int64)
    return np.concatenate(all_vertices), np.concatenate(all_faces)


def write_glb(path: str | Path, vertices: np.ndarray, faces: np.ndarray) -> None:
    vertices = np.asarray(vertices, dtype="<f4")
    faces = np.asarray(faces, dtype="<u4")
    positions = vertices.tobytes()
    indices = faces.tobytes()
    pad_pos = (-len(positions)) % 4
    bin_chunk = positions + b"\0" * pad_pos + indices
    bin_chunk += b"\0" * ((-len(bin_chunk)) % 4)
    gltf = {
        "asset": {"version": "2.0"},
        "scene": 0,
        "scenes": [{"nodes": [0]}],
        "nodes": [{"mesh": 0}],
        "meshes": [{"primitives": [{"attributes": {"POSITION": 0}, "indices": 1, "mode": 4}]}],
        "accessors": [
            {
                "bufferView": 0,
                "componentType": 5126,
                "count": len(vertices),
                "type": "VEC3",
                "min": [float(x) for x in vertices.min(axis=0)] if len(vertices) else [0, 0, 0],
                "max": [float(x) for x in vertices.max(axis=0)] if len(vertices) else [0, 0, 0],
            },
            {"bufferView": 1, "componentType": 5125, "count": faces.size, "type": "SCALAR"},
        ],
        "bufferViews": [
            {"buffer": 0, "byteOffset": 0, "byteLength": len(positions)},
            {"buffer": 0, "byteOffset": len(positions) + pad_pos, "byteLength": len(indices)},
        ],
        "buffers": [{"byteLength": len(bin_chunk)}],
    }
    json_chunk = json.dumps(gltf, separators=(",", ":")).encode("utf-8")
    json_chunk += b" " * ((-len(json_chunk)) % 4)
    total = 12 + 8 + len(json_chunk) + 8 + len(bin_chunk)
    with open(path, "wb") as fh:
        fh.write(b"glTF" + struct.pack("<II", 2, total))
        fh.write(struct.pack("<II", len(json_chunk), 0x4E4F534A) + json_chunk)
        fh.write(struct.pack("<II", len(bin_chunk), 0x004E4942) + bin_chunk)


def write_mesh_file(path: str | Path, vertices: np.ndarray, faces: np.ndarray, fmt: str | None = None) -> None:
    if fmt is None:
        fmt = detect_format(path)
    fmt = fmt.lower()
    if fmt == "obj":
        write_obj(path, vertices, faces)
    elif fmt == "ply":
        write_ply(path, vertices, faces)
    elif fmt == "stl":
        write_stl(path, vertices, faces)
    elif fmt == "glb":
        write_glb(path, vertices, faces)
    else:
        raise UnsupportedFormat(f"unsupported mesh format {fmt!r}")


def _as_arrays(vertices, faces) -> tuple[np.ndarray, np.ndarray]:
    v = np.asarray(vertices, dtype=float).reshape(-1, 3)
    f = np.asarray(faces, dtype=np.int64).reshape(-1, 3)
    return v, f
