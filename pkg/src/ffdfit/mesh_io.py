"""Surface mesh types and their on-disk formats.

Supported formats
-----------------
* OBJ (ASCII, 1-based indices). ``g <name>`` groups become structure labels
  in order of first appearance.
* PLY (binary little-endian) with a per-face integer ``label`` property.
  Structure names travel as ``comment structure <label> <name>`` header lines.

Named face sets ("tags", e.g. inlet/outlet caps) live in a JSON sidecar next to
the mesh, ``<stem>.tags.json``, mapping tag name to a list of triangle indices.
Mesh sequences are described by a JSON manifest
``{"frames": [{"path": ..., "time": ...}, ...]}`` with paths relative to the
manifest.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping

import numpy as np

from .errors import (
    ConnectivityMismatchError,
    DegenerateTriangleError,
    FFDError,
    MeshIndexError,
    ParseError,
    SequenceError,
)

__all__ = [
    "TemplateMesh",
    "MeshSequence",
    "load_mesh",
    "save_mesh",
    "load_sequence",
    "save_sequence",
    "tags_path",
]


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.array(a, copy=True)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class TemplateMesh:
    """Triangle surface mesh with per-triangle structure labels and face tags.

    Arrays are copied and made read-only on construction, so instances can be
    shared freely.
    """

    vertices: np.ndarray
    triangles: np.ndarray
    structure_labels: np.ndarray | None = None
    tags: Mapping[str, np.ndarray] = field(default_factory=dict)
    structure_names: tuple[str, ...] | None = None

    def __post_init__(self):
        verts = np.asarray(self.vertices, dtype=np.float64)
        if verts.ndim != 2 or verts.shape[1] != 3:
            raise FFDError(f"vertices must have shape (N, 3), got {verts.shape}")
        tris = np.asarray(self.triangles)
        if tris.size == 0:
            tris = np.zeros((0, 3), dtype=np.int64)
        if tris.ndim != 2 or tris.shape[1] != 3:
            raise FFDError(f"triangles must have shape (F, 3), got {tris.shape}")
        if not np.issubdtype(tris.dtype, np.integer):
            raise FFDError("triangle indices must be integers")
        tris = tris.astype(np.int64)
        n = len(verts)
        if tris.size and (tris.min() < 0 or tris.max() >= n):
            bad = int(np.flatnonzero((tris < 0).any(1) | (tris >= n).any(1))[0])
            raise MeshIndexError(
                f"triangle {bad} references vertex outside [0, {n}): {tris[bad].tolist()}"
            )
        degen = (tris[:, 0] == tris[:, 1]) | (tris[:, 1] == tris[:, 2]) | (tris[:, 0] == tris[:, 2])
        if degen.any():
            bad = int(np.flatnonzero(degen)[0])
            raise DegenerateTriangleError(
                f"triangle {bad} repeats a vertex: {tris[bad].tolist()}"
            )

        if self.structure_labels is None:
            labels = np.zeros(len(tris), dtype=np.int64)
        else:
            labels = np.asarray(self.structure_labels, dtype=np.int64).reshape(-1)
            if len(labels) != len(tris):
                raise FFDError(
                    f"{len(labels)} structure labels for {len(tris)} triangles"
                )
        present = np.unique(labels)
        if len(present) and not np.array_equal(present, np.arange(len(present))):
            raise FFDError(
                f"structure labels must be contiguous from 0, got {present.tolist()}"
            )

        tags = {}
        for name, idx in dict(self.tags).items():
            idx = np.unique(np.asarray(idx, dtype=np.int64).reshape(-1))
            if idx.size and (idx.min() < 0 or idx.max() >= len(tris)):
                raise MeshIndexError(f"tag {name!r} references a missing triangle")
            tags[str(name)] = _frozen(idx)

        names = self.structure_names
        if names is not None:
            names = tuple(str(s) for s in names)
            if len(names) < len(present):
                raise FFDError(
                    f"{len(names)} structure names for {len(present)} labels"
                )

        object.__setattr__(self, "vertices", _frozen(verts))
        object.__setattr__(self, "triangles", _frozen(tris))
        object.__setattr__(self, "structure_labels", _frozen(labels))
        object.__setattr__(self, "tags", tags)
        object.__setattr__(self, "structure_names", names)

    @property
    def n_structures(self) -> int:
        return int(self.structure_labels.max()) + 1 if len(self.structure_labels) else 0

    def structure_name(self, label: int) -> str:
        if self.structure_names is not None and label < len(self.structure_names):
            return self.structure_names[label]
        return f"structure_{label}"

    def structure_vertex_ids(self, label: int) -> np.ndarray:
        """Sorted ids of the vertices used by triangles of one structure."""
        return np.unique(self.triangles[self.structure_labels == label])

    def structure_mesh(self, label: int) -> "TemplateMesh":
        """Sub-mesh of one structure, vertices re-indexed compactly."""
        keep = self.structure_labels == label
        used = np.unique(self.triangles[keep])
        remap = np.full(len(self.vertices), -1, dtype=np.int64)
        remap[used] = np.arange(len(used))
        return TemplateMesh(self.vertices[used], remap[self.triangles[keep]])

    def with_vertices(self, vertices: np.ndarray) -> "TemplateMesh":
        """Same connectivity, labels and tags with new vertex positions."""
        vertices = np.asarray(vertices, dtype=np.float64)
        if vertices.shape != self.vertices.shape:
            raise FFDError(
                f"vertex array shape {vertices.shape} != {self.vertices.shape}"
            )
        return TemplateMesh(
            vertices, self.triangles, self.structure_labels, self.tags, self.structure_names
        )

    def euler_characteristic(self) -> int:
        edges = np.sort(self.triangles[:, [0, 1, 1, 2, 2, 0]].reshape(-1, 2), axis=1)
        n_edges = len(np.unique(edges, axis=0))
        return len(self.vertices) - n_edges + len(self.triangles)


@dataclass(frozen=True, eq=False)
class MeshSequence:
    """Time-ordered meshes that share one connectivity (vertex correspondence)."""

    frames: tuple[TemplateMesh, ...]
    frame_times: np.ndarray

    def __post_init__(self):
        frames = tuple(self.frames)
        times = np.asarray(self.frame_times, dtype=np.float64).reshape(-1)
        if len(frames) != len(times):
            raise SequenceError(f"{len(frames)} frames but {len(times)} times")
        if len(frames) < 2:
            raise SequenceError("a sequence needs at least 2 frames")
        if np.any(np.diff(times) <= 0):
            bad = int(np.flatnonzero(np.diff(times) <= 0)[0]) + 1
            raise SequenceError(
                f"frame times must be strictly increasing (frame {bad}: "
                f"{times[bad]} after {times[bad - 1]})"
            )
        first = frames[0]
        for i, f in enumerate(frames[1:], start=1):
            if len(f.vertices) != len(first.vertices) or not np.array_equal(
                f.triangles, first.triangles
            ):
                raise ConnectivityMismatchError(
                    f"frame {i} connectivity differs from frame 0 "
                    f"({len(f.vertices)} vs {len(first.vertices)} vertices, "
                    f"{len(f.triangles)} vs {len(first.triangles)} triangles)"
                )
        object.__setattr__(self, "frames", frames)
        object.__setattr__(self, "frame_times", _frozen(times))

    def __len__(self):
        return len(self.frames)


def tags_path(mesh_path) -> Path:
    p = Path(mesh_path)
    return p.with_name(p.stem + ".tags.json")


def _fmt(path, format):
    if format is None:
        format = Path(path).suffix.lstrip(".").lower()
    if format not in ("obj", "ply"):
        raise FFDError(f"unsupported mesh format {format!r} (expected obj or ply)")
    return format


def load_mesh(path, format: str | None = None) -> TemplateMesh:
    """Read an OBJ or PLY mesh, plus its ``.tags.json`` sidecar if present."""
    path = Path(path)
    format = _fmt(path, format)
    data = path.read_bytes()
    if format == "obj":
        verts, tris, labels, names = _parse_obj(data)
    else:
        verts, tris, labels, names = _parse_ply(data)
    tags = {}
    side = tags_path(path)
    if side.exists():
        tags = _read_tags(side)
    return TemplateMesh(verts, tris, labels, tags, names)


def save_mesh(mesh: TemplateMesh, path, format: str | None = None) -> None:
    """Write ``mesh``; the tags sidecar is written when the mesh has tags."""
    path = Path(path)
    format = _fmt(path, format)
    if format == "obj":
        path.write_text(_format_obj(mesh))
    else:
        path.write_bytes(_format_ply(mesh))
    side = tags_path(path)
    if mesh.tags:
        payload = {k: v.tolist() for k, v in sorted(mesh.tags.items())}
        side.write_text(json.dumps(payload, indent=1) + "\n")
    elif side.exists():
        side.unlink()


def _read_tags(path: Path) -> dict:
    try:
        raw = json.loads(path.read_text())
    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise ParseError(f"{path.name}: malformed tag sidecar ({exc})") from None
    if not isinstance(raw, dict):
        raise ParseError(f"{path.name}: tag sidecar must be a JSON object")
    tags = {}
    for name, idx in raw.items():
        if not isinstance(idx, list) or not all(
            isinstance(i, int) and not isinstance(i, bool) for i in idx
        ):
            raise ParseError(f"{path.name}: tag {name!r} must be a list of integers")
        tags[name] = np.asarray(idx, dtype=np.int64)
    return tags


# --- OBJ -------------------------------------------------------------------

_OBJ_IGNORED = {"vn", "vt", "vp", "o", "s", "usemtl", "mtllib", "l", "p"}


def _parse_obj(data: bytes):
    try:
        text = data.decode("utf-8")
    except UnicodeDecodeError as exc:
        raise ParseError("file is not valid UTF-8 text", offset=exc.start) from None

    verts: list[tuple[float, float, float]] = []
    tris: list[tuple[int, int, int]] = []
    tri_group: list[int] = []
    group_ids: dict[str, int] = {}
    current = "default"

    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        key = parts[0]
        if key == "v":
            if len(parts) not in (4, 5, 7):
                raise ParseError(f"vertex record needs 3 coordinates: {raw!r}", line=lineno)
            try:
                xyz = tuple(float(t) for t in parts[1:4])
            except ValueError:
                raise ParseError(f"bad vertex coordinate: {raw!r}", line=lineno) from None
            if not all(np.isfinite(xyz)):
                raise ParseError(f"non-finite vertex coordinate: {raw!r}", line=lineno)
            verts.append(xyz)
        elif key == "f":
            if len(parts) < 4:
                raise ParseError(f"face needs at least 3 vertices: {raw!r}", line=lineno)
            idx = []
            for tok in parts[1:]:
                head = tok.split("/", 1)[0]
                try:
                    k = int(head)
                except ValueError:
                    raise ParseError(f"bad face index {tok!r}", line=lineno) from None
                if k == 0:
                    raise ParseError("face index 0 is invalid (OBJ is 1-based)", line=lineno)
                k = k - 1 if k > 0 else len(verts) + k
                if k < 0 or k >= len(verts):
                    raise ParseError(
                        f"face index {tok} refers to a vertex not yet defined "
                        f"({len(verts)} so far)",
                        line=lineno,
                    )
                idx.append(k)
            if len(set(idx)) != len(idx):
                raise DegenerateTriangleError(
                    f"line {lineno}: face repeats a vertex: {raw.strip()!r}"
                )
            gid = group_ids.setdefault(current, len(group_ids))
            # fan triangulation for polygons
            for j in range(1, len(idx) - 1):
                tris.append((idx[0], idx[j], idx[j + 1]))
                tri_group.append(gid)
        elif key == "g":
            current = " ".join(parts[1:]) or "default"
        elif key in _OBJ_IGNORED:
            continue
        else:
            raise ParseError(f"unknown record {key!r}", line=lineno)

    names = tuple(group_ids) if group_ids else None
    return (
        np.asarray(verts, dtype=np.float64).reshape(-1, 3),
        np.asarray(tris, dtype=np.int64).reshape(-1, 3),
        np.asarray(tri_group, dtype=np.int64),
        names,
    )


def _format_obj(mesh: TemplateMesh) -> str:
    out = [f"# {len(mesh.vertices)} vertices, {len(mesh.triangles)} triangles\n"]
    out.extend("v %r %r %r\n" % (float(x), float(y), float(z)) for x, y, z in mesh.vertices)
    labels = mesh.structure_labels
    # the parser numbers groups by first appearance
    _, first = np.unique(labels, return_index=True)
    if np.any(np.diff(first) < 0):
        raise FFDError(
            "structure labels must first appear in increasing order to round-trip "
            "through OBJ groups"
        )
    last = None
    for t, lab in zip(mesh.triangles + 1, labels):
        if lab != last:
            out.append(f"g {mesh.structure_name(int(lab))}\n")
            last = lab
        out.append(f"f {t[0]} {t[1]} {t[2]}\n")
    return "".join(out)


# --- PLY (binary little-endian) ----------------------------------------------

_PLY_TYPES = {
    "char": "b", "int8": "b", "uchar": "B", "uint8": "B",
    "short": "h", "int16": "h", "ushort": "H", "uint16": "H",
    "int": "i", "int32": "i", "uint": "I", "uint32": "I",
    "float": "f", "float32": "f", "double": "d", "float64": "d",
}


def _parse_ply(data: bytes):
    end = data.find(b"end_header")
    if not data.startswith(b"ply") or end < 0:
        raise ParseError("missing 'ply' magic or 'end_header'", offset=0)
    nl = data.find(b"\n", end)
    if nl < 0:
        raise ParseError("header not newline-terminated", offset=end)
    try:
        header = data[:end].decode("ascii").splitlines()
    except UnicodeDecodeError as exc:
        raise ParseError("non-ASCII header", offset=exc.start) from None
    body_start = nl + 1

    elements: list[list] = []  # [name, count, [props]]
    names: dict[int, str] = {}
    fmt_seen = False
    for lineno, line in enumerate(header, start=1):
        parts = line.split()
        if not parts or parts[0] == "ply":
            continue
        if parts[0] == "format":
            if len(parts) < 2 or parts[1] != "binary_little_endian":
                raise ParseError(
                    "only binary_little_endian PLY is supported", line=lineno
                )
            fmt_seen = True
        elif parts[0] == "comment":
            if len(parts) >= 4 and parts[1] == "structure":
                try:
                    names[int(parts[2])] = " ".join(parts[3:])
                except ValueError:
                    raise ParseError("bad structure comment", line=lineno) from None
        elif parts[0] == "obj_info":
            continue
        elif parts[0] == "element":
            if len(parts) != 3:
                raise ParseError("malformed element line", line=lineno)
            try:
                count = int(parts[2])
            except ValueError:
                raise ParseError("element count is not an integer", line=lineno) from None
            if count < 0:
                raise ParseError("negative element count", line=lineno)
            elements.append([parts[1], count, []])
        elif parts[0] == "property":
            if not elements:
                raise ParseError("property before any element", line=lineno)
            if len(parts) == 5 and parts[1] == "list":
                if parts[2] not in _PLY_TYPES or parts[3] not in _PLY_TYPES:
                    raise ParseError("unknown list property type", line=lineno)
                elements[-1][2].append((parts[4], _PLY_TYPES[parts[2]], _PLY_TYPES[parts[3]]))
            elif len(parts) == 3 and parts[1] in _PLY_TYPES:
                elements[-1][2].append((parts[2], None, _PLY_TYPES[parts[1]]))
            else:
                raise ParseError(f"malformed property: {line!r}", line=lineno)
        else:
            raise ParseError(f"unknown header keyword {parts[0]!r}", line=lineno)
    if not fmt_seen:
        raise ParseError("missing format line", offset=0)

    pos = body_start
    verts = np.zeros((0, 3))
    tris = np.zeros((0, 3), dtype=np.int64)
    labels = None
    for name, count, props in elements:
        has_list = any(p[1] is not None for p in props)
        if not has_list:
            dt = np.dtype([(p[0], "<" + p[2]) for p in props])
            nbytes = dt.itemsize * count
            if pos + nbytes > len(data):
                raise ParseError(f"truncated {name} data", offset=pos)
            rec = np.frombuffer(data, dtype=dt, count=count, offset=pos)
            pos += nbytes
            if name == "vertex":
                try:
                    verts = np.stack([rec["x"], rec["y"], rec["z"]], axis=1).astype(np.float64)
                except (ValueError, KeyError):
                    raise ParseError("vertex element lacks x/y/z", offset=pos) from None
                if not np.isfinite(verts).all():
                    raise ParseError("non-finite vertex coordinate", offset=pos)
            continue
        faces, labs, pos = _read_list_element(data, pos, count, props, name)
        if name == "face":
            tris, labels = faces, labs
    if labels is not None:
        labels = np.asarray(labels, dtype=np.int64)
    if tris.size and (tris.min() < 0 or tris.max() >= len(verts)):
        raise MeshIndexError("face index outside the vertex range")
    struct_names = None
    if names:
        n = max(names) + 1
        struct_names = tuple(names.get(i, f"structure_{i}") for i in range(n))
    return verts, tris, labels, struct_names


def _read_list_element(data, pos, count, props, name):
    faces = []
    labels = []
    for row in range(count):
        poly = None
        label = 0
        for pname, ctype, vtype in props:
            if ctype is not None:
                csz = struct.calcsize("<" + ctype)
                if pos + csz > len(data):
                    raise ParseError(f"truncated {name} {row}", offset=pos)
                (n,) = struct.unpack_from("<" + ctype, data, pos)
                pos += csz
                vsz = struct.calcsize("<" + vtype) * n
                if n < 0 or pos + vsz > len(data):
                    raise ParseError(f"truncated {name} {row}", offset=pos)
                vals = struct.unpack_from(f"<{n}{vtype}", data, pos)
                pos += vsz
                if pname in ("vertex_indices", "vertex_index"):
                    poly = vals
            else:
                sz = struct.calcsize("<" + vtype)
                if pos + sz > len(data):
                    raise ParseError(f"truncated {name} {row}", offset=pos)
                (v,) = struct.unpack_from("<" + vtype, data, pos)
                pos += sz
                if pname == "label":
                    label = v
        if name == "face":
            if poly is None or len(poly) < 3:
                raise ParseError(f"face {row} has fewer than 3 vertices", offset=pos)
            if any(isinstance(k, float) for k in poly):
                raise ParseError(f"face {row} has non-integer indices", offset=pos)
            if len(set(poly)) != len(poly):
                raise DegenerateTriangleError(f"face {row} repeats a vertex: {list(poly)}")
            for j in range(1, len(poly) - 1):
                faces.append((poly[0], poly[j], poly[j + 1]))
                labels.append(label)
    return np.asarray(faces, dtype=np.int64).reshape(-1, 3), labels, pos


def _format_ply(mesh: TemplateMesh) -> bytes:
    header = ["ply", "format binary_little_endian 1.0"]
    for lab in range(mesh.n_structures):
        header.append(f"comment structure {lab} {mesh.structure_name(lab)}")
    header += [
        f"element vertex {len(mesh.vertices)}",
        "property double x",
        "property double y",
        "property double z",
        f"element face {len(mesh.triangles)}",
        "property list uchar int vertex_indices",
        "property int label",
        "end_header",
    ]
    head = ("\n".join(header) + "\n").encode("ascii")
    vbytes = np.ascontiguousarray(mesh.vertices, dtype="<f8").tobytes()
    face_dt = np.dtype([("n", "u1"), ("idx", "<i4", 3), ("label", "<i4")])
    faces = np.empty(len(mesh.triangles), dtype=face_dt)
    faces["n"] = 3
    faces["idx"] = mesh.triangles
    faces["label"] = mesh.structure_labels
    return head + vbytes + faces.tobytes()


# --- sequences -------------------------------------------------------------

def load_sequence(manifest_path) -> MeshSequence:
    """Load a mesh sequence from a JSON manifest; frames must share connectivity."""
    manifest_path = Path(manifest_path)
    try:
        raw = json.loads(manifest_path.read_text())
    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise ParseError(f"{manifest_path.name}: malformed manifest ({exc})") from None
    frames = raw.get("frames") if isinstance(raw, dict) else None
    if not isinstance(frames, list):
        raise ParseError(f"{manifest_path.name}: manifest needs a 'frames' list")
    if len(frames) < 2:
        raise SequenceError(f"manifest lists {len(frames)} frame(s); need at least 2")
    meshes, times = [], []
    for i, fr in enumerate(frames):
        if not isinstance(fr, dict) or "path" not in fr or "time" not in fr:
            raise ParseError(f"frame {i}: needs 'path' and 'time'")
        p = Path(fr["path"])
        if not p.is_absolute():
            p = manifest_path.parent / p
        meshes.append(load_mesh(p))
        times.append(float(fr["time"]))
    return MeshSequence(tuple(meshes), np.asarray(times))


def save_sequence(seq: MeshSequence, directory, stem: str = "frame", format: str = "obj",
                  extra: dict | None = None) -> Path:
    """Write every frame plus ``manifest.json`` into ``directory``."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    width = max(4, len(str(len(seq) - 1)))
    entries = []
    for i, (mesh, t) in enumerate(zip(seq.frames, seq.frame_times)):
        name = f"{stem}_{i:0{width}d}.{format}"
        save_mesh(mesh, directory / name, format)
        entries.append({"path": name, "time": float(t)})
    payload = {"frames": entries}
    if extra:
        payload.update(extra)
    manifest = directory / "manifest.json"
    manifest.write_text(json.dumps(payload, indent=1) + "\n")
    return manifest


def read_manifest_extra(manifest_path) -> dict:
    """Keys of the manifest other than ``frames`` (e.g. ``period``)."""
    raw = json.loads(Path(manifest_path).read_text())
    return {k: v for k, v in raw.items() if k != "frames"}

