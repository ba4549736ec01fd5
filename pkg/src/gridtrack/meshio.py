"""Readers and writers for PLY point clouds, OBJ/PLY meshes, and trajectories.

Supported subset:
  * PLY: ASCII and binary_little_endian, vertex properties x,y,z and optional
    nx,ny,nz (float32 or float64), optional triangular faces.
  * OBJ: v / vn / f records, triangular faces only.
  * trajectory file: binary, header magic b"GTRJ", uint32 version (1),
    uint32 frame count T, uint32 vertex count N, followed by T*N*3
    little-endian float32 values in frame-major order.

Frame files in a directory are ordered by their zero-padded numeric suffix.
"""

from __future__ import annotations

import re
import struct
from pathlib import Path

import numpy as np

from .geometry import GeometryError, PointCloud, TriMesh

TRAJ_MAGIC = b"GTRJ"
TRAJ_VERSION = 1

_PLY_DTYPES = {
    "float": ("f", 4), "float32": ("f", 4),
    "double": ("d", 8), "float64": ("d", 8),
    "uchar": ("B", 1), "uint8": ("B", 1), "char": ("b", 1), "int8": ("b", 1),
    "short": ("h", 2), "int16": ("h", 2), "ushort": ("H", 2), "uint16": ("H", 2),
    "int": ("i", 4), "int32": ("i", 4), "uint": ("I", 4), "uint32": ("I", 4),
}


class FileFormatError(ValueError):
    """Raised for unreadable or malformed geometry files."""


def _parse_ply_header(fh) -> tuple[str, list[tuple[str, int, list[tuple[str, str, str | None]]]]]:
    """Returns (format, elements); each element is (name, count, properties).

    A property is (dtype, name, list_count_dtype) with list_count_dtype set
    for list properties.
    """
    line = fh.readline().strip()
    if line != b"ply":
        raise FileFormatError("not a PLY file")
    fmt = None
    elements: list = []
    while True:
        line = fh.readline()
        if not line:
            raise FileFormatError("truncated PLY header")
        tokens = line.decode("ascii", "replace").strip().split()
        if not tokens or tokens[0] == "comment":
            continue
        if tokens[0] == "format":
            fmt = tokens[1]
        elif tokens[0] == "element":
            elements.append((tokens[1], int(tokens[2]), []))
        elif tokens[0] == "property":
            if tokens[1] == "list":
                elements[-1][2].append((tokens[3], tokens[4], tokens[2]))
            else:
                elements[-1][2].append((tokens[1], tokens[2], None))
        elif tokens[0] == "end_header":
            break
    if fmt not in ("ascii", "binary_little_endian"):
        raise FileFormatError(f"unsupported PLY format {fmt!r}")
    return fmt, elements


def _read_ply(path: Path) -> tuple[np.ndarray, np.ndarray | None, np.ndarray | None]:
    """Returns (vertices, normals-or-None, faces-or-None)."""
    with open(path, "rb") as fh:
        fmt, elements = _parse_ply_header(fh)
        verts = norms = faces = None
        for name, count, props in elements:
            if fmt == "ascii":
                rows, face_rows = [], []
                for _ in range(count):
                    tokens = fh.readline().split()
                    if any(p[2] is not None for p in props):
                        n = int(tokens[0])
                        face_rows.append([int(v) for v in tokens[1 : 1 + n]])
                    else:
                        rows.append([float(v) for v in tokens])
                data = np.array(rows, dtype=np.float64) if rows else None
                lists = face_rows
            else:
                if any(p[2] is not None for p in props):
                    lists = []
                    for _ in range(count):
                        cnt_code, cnt_size = _PLY_DTYPES[props[0][2]]
                        (n,) = struct.unpack("<" + cnt_code, fh.read(cnt_size))
                        item_code, item_size = _PLY_DTYPES[props[0][0]]
                        vals = struct.unpack("<" + item_code * n, fh.read(item_size * n))
                        lists.append(list(vals))
                    data = None
                else:
                    codes = "".join(_PLY_DTYPES[p[0]][0] for p in props)
                    row_size = sum(_PLY_DTYPES[p[0]][1] for p in props)
                    buf = fh.read(row_size * count)
                    if len(buf) != row_size * count:
                        raise FileFormatError(f"truncated PLY payload in {path}")
                    unpacked = struct.iter_unpack("<" + codes, buf)
                    data = np.array(list(unpacked), dtype=np.float64)
                    lists = []
            if name == "vertex" and data is not None:
                cols = {p[1]: i for i, p in enumerate(props)}
                if not all(a in cols for a in "xyz"):
                    raise FileFormatError(f"PLY vertex element lacks x/y/z in {path}")
                verts = data[:, [cols["x"], cols["y"], cols["z"]]]
                if all(a in cols for a in ("nx", "ny", "nz")):
                    norms = data[:, [cols["nx"], cols["ny"], cols["nz"]]]
            elif name == "face":
                for row in lists:
                    if len(row) != 3:
                        raise FileFormatError("only triangular PLY faces are supported")
                faces = np.array(lists, dtype=np.int64) if lists else np.zeros((0, 3), np.int64)
    if verts is None:
        raise FileFormatError(f"no vertex element in {path}")
    return verts, norms, faces


def read_point_cloud(path: str | Path) -> PointCloud:
    """Load a PLY point cloud (normals kept if present)."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(path)
    verts, norms, _ = _read_ply(path)
    return PointCloud(verts, norms)


def write_point_cloud(path: str | Path, cloud: PointCloud, binary: bool = True) -> None:
    """Write a PLY point cloud; binary little-endian float32 by default."""
    path = Path(path)
    has_n = cloud.normals is not None
    header = ["ply", "format binary_little_endian 1.0" if binary else "format ascii 1.0",
              f"element vertex {len(cloud)}"]
    header += [f"property float {a}" for a in "xyz"]
    if has_n:
        header += [f"property float n{a}" for a in "xyz"]
    header += ["end_header"]
    data = cloud.points if not has_n else np.hstack([cloud.points, cloud.normals])
    if binary:
        with open(path, "wb") as fh:
            fh.write(("\n".join(header) + "\n").encode("ascii"))
            fh.write(np.ascontiguousarray(data, dtype="<f4").tobytes())
    else:
        with open(path, "w") as fh:
            fh.write("\n".join(header) + "\n")
            for row in data:
                fh.write(" ".join(f"{v:.9g}" for v in row) + "\n")


def read_mesh(path: str | Path) -> TriMesh:
    """Load an OBJ or PLY triangle mesh; normals are recomputed from faces."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(path)
    if path.suffix.lower() == ".obj":
        return _read_obj(path)
    verts, _, faces = _read_ply(path)
    if faces is None or len(faces) == 0:
        raise FileFormatError(f"{path} has no faces; not a mesh")
    return TriMesh(verts, faces)


def _read_obj(path: Path) -> TriMesh:
    verts, faces = [], []
    with open(path) as fh:
        for line in fh:
            tokens = line.split()
            if not tokens:
                continue
            if tokens[0] == "v":
                verts.append([float(v) for v in tokens[1:4]])
            elif tokens[0] == "f":
                refs = [t.split("/")[0] for t in tokens[1:]]
                if len(refs) != 3:
                    raise FileFormatError(f"non-triangular face in {path}")
                faces.append([int(r) - 1 if int(r) > 0 else len(verts) + int(r) for r in refs])
    if not verts:
        raise FileFormatError(f"no vertices in {path}")
    if not faces:
        raise FileFormatError(f"no faces in {path}")
    return TriMesh(np.array(verts, dtype=np.float64), np.array(faces, dtype=np.int64))


def write_mesh(path: str | Path, mesh: TriMesh) -> None:
    """Write an OBJ mesh (v and f records, 9 significant digits)."""
    with open(path, "w") as fh:
        for v in mesh.vertices:
            fh.write(f"v {v[0]:.9g} {v[1]:.9g} {v[2]:.9g}\n")
        for f in mesh.faces:
            fh.write(f"f {f[0] + 1} {f[1] + 1} {f[2] + 1}\n")


def write_trajectories(path: str | Path, trajectories: np.ndarray) -> None:
    """Write a (T, N, 3) trajectory array in the documented binary layout."""
    traj = np.asarray(trajectories)
    if traj.ndim != 3 or traj.shape[2] != 3:
        raise ValueError(f"trajectories must be (T, N, 3), got {traj.shape}")
    with open(path, "wb") as fh:
        fh.write(TRAJ_MAGIC)
        fh.write(struct.pack("<III", TRAJ_VERSION, traj.shape[0], traj.shape[1]))
        fh.write(np.ascontiguousarray(traj, dtype="<f4").tobytes())


def read_trajectories(path: str | Path) -> np.ndarray:
    """Read a trajectory file back as a (T, N, 3) float64 array."""
    with open(path, "rb") as fh:
        if fh.read(4) != TRAJ_MAGIC:
            raise FileFormatError(f"{path} is not a trajectory file")
        version, t, n = struct.unpack("<III", fh.read(12))
        if version != TRAJ_VERSION:
            raise FileFormatError(f"unsupported trajectory version {version}")
        data = np.frombuffer(fh.read(t * n * 3 * 4), dtype="<f4")
        if data.size != t * n * 3:
            raise FileFormatError(f"truncated trajectory payload in {path}")
    return data.reshape(t, n, 3).astype(np.float64)


_SUFFIX_RE = re.compile(r"(\d+)\D*$")


def list_frame_files(directory: str | Path, extensions: tuple[str, ...]) -> list[Path]:
    """Frame files under `directory`, ordered by trailing numeric suffix."""
    directory = Path(directory)
    if not directory.is_dir():
        raise FileNotFoundError(directory)
    found = [p for p in directory.iterdir() if p.suffix.lower() in extensions]

    def key(p: Path):
        m = _SUFFIX_RE.search(p.stem)
        return (int(m.group(1)) if m else -1, p.name)

    return sorted(found, key=key)


def load_cloud_sequence(directory: str | Path) -> list[PointCloud]:
    files = list_frame_files(directory, (".ply",))
    if not files:
        raise FileNotFoundError(f"no .ply clouds in {directory}")
    return [read_point_cloud(p) for p in files]


def load_mesh_sequence(directory: str | Path) -> list[TriMesh]:
    files = list_frame_files(directory, (".obj", ".ply"))
    if not files:
        raise FileNotFoundError(f"no mesh frames in {directory}")
    return [read_mesh(p) for p in files]
