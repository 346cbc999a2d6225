"""Triangle-mesh scene geometry: ingestion, validation and ray queries.

Meshes are stored as flat float64 arrays. Faces are treated as two-sided
(reconstructed scans have inconsistent winding), so every query returns a
normal flipped to oppose the incoming ray direction.
"""

from __future__ import annotations

import json
import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

log = logging.getLogger(__name__)

#: Offset applied along the geometric normal when spawning secondary rays,
#: in meters. Safely above float64 intersection noise at room scale and far
#: below mmWave-relevant geometry (wavelength ~1.07 cm at 28 GHz).
RAY_EPSILON = 1e-4

_DEGENERATE_AREA = 1e-14


@dataclass(frozen=True)
class Ray:
    """A ray with unit direction. Lengths in meters."""

    origin: np.ndarray
    direction: np.ndarray

    def __post_init__(self):
        o = np.asarray(self.origin, dtype=np.float64)
        d = np.asarray(self.direction, dtype=np.float64)
        n = np.linalg.norm(d)
        if abs(n - 1.0) > 1e-12:
            d = d / n
        object.__setattr__(self, "origin", o)
        object.__setattr__(self, "direction", d)


@dataclass(frozen=True)
class Intersection:
    """Nearest ray-surface hit. ``normal`` opposes the incoming ray."""

    point: np.ndarray
    normal: np.ndarray
    distance: float
    face_id: int
    material_id: int


@dataclass
class TriangleMesh:
    """Indexed triangle mesh with per-face unit normals and material ids."""

    vertices: np.ndarray          # (V, 3) float64
    faces: np.ndarray             # (F, 3) int64
    face_normals: np.ndarray = field(default=None)  # (F, 3) float64
    material_ids: np.ndarray = field(default=None)  # (F,) int64
    n_degenerate_dropped: int = 0

    def __post_init__(self):
        self.vertices = np.ascontiguousarray(self.vertices, dtype=np.float64)
        self.faces = np.ascontiguousarray(self.faces, dtype=np.int64)
        if self.faces.ndim != 2 or self.faces.shape[1] != 3:
            raise ValueError("faces must be (F, 3) vertex-index triples")
        if self.faces.size and (self.faces.min() < 0 or self.faces.max() >= len(self.vertices)):
            raise ValueError("face indices out of range")
        if self.material_ids is None:
            self.material_ids = np.zeros(len(self.faces), dtype=np.int64)
        else:
            self.material_ids = np.ascontiguousarray(self.material_ids, dtype=np.int64)
        kept = self._drop_degenerate()
        if self.face_normals is None:
            self.face_normals = self._normals_from_winding()
        else:
            self.face_normals = np.ascontiguousarray(self.face_normals, dtype=np.float64)[kept]
        norms = np.linalg.norm(self.face_normals, axis=1)
        if self.faces.size and np.any(np.abs(norms - 1.0) > 1e-9):
            raise ValueError("face normals must be unit length")

    def _drop_degenerate(self) -> np.ndarray:
        v0, v1, v2 = (self.vertices[self.faces[:, k]] for k in range(3))
        areas = 0.5 * np.linalg.norm(np.cross(v1 - v0, v2 - v0), axis=1)
        kept = areas > _DEGENERATE_AREA
        dropped = int((~kept).sum())
        if dropped:
            log.info("dropped %d degenerate face(s) on load", dropped)
            self.faces = self.faces[kept]
            self.material_ids = self.material_ids[kept]
            self.n_degenerate_dropped += dropped
        return kept

    def _normals_from_winding(self) -> np.ndarray:
        if not len(self.faces):
            return np.zeros((0, 3))
        v0, v1, v2 = (self.vertices[self.faces[:, k]] for k in range(3))
        n = np.cross(v1 - v0, v2 - v0)
        return n / np.linalg.norm(n, axis=1, keepdims=True)

    @property
    def n_faces(self) -> int:
        return len(self.faces)

    def triangles(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Per-face vertex triples as three (F, 3) arrays."""
        return (self.vertices[self.faces[:, 0]],
                self.vertices[self.faces[:, 1]],
                self.vertices[self.faces[:, 2]])


# ---------------------------------------------------------------------------
# Loaders


def load_mesh(path: str | Path, material_map: str | Path | None = None) -> TriangleMesh:
    """Load an OBJ or PLY file into a :class:`TriangleMesh`.

    ``material_map`` optionally points to a JSON sidecar mapping object/group
    names (OBJ ``o``/``g`` records) to integer material indices. Faces outside
    any named object get material 0. Normals always come from face winding;
    degenerate faces are dropped and counted.
    """
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"mesh file not found: {path}")
    suffix = path.suffix.lower()
    if suffix == ".obj":
        mesh = _load_obj(path, material_map)
    elif suffix == ".ply":
        mesh = _load_ply(path)
    else:
        raise ValueError(f"unsupported mesh format {suffix!r} (expected .obj or .ply)")
    if mesh.n_faces == 0:
        raise ValueError(f"empty mesh after load: {path}")
    return mesh


def _load_obj(path: Path, material_map) -> TriangleMesh:
    name_to_mat = {}
    if material_map is not None:
        name_to_mat = json.loads(Path(material_map).read_text())
    vertices: list[list[float]] = []
    faces: list[list[int]] = []
    mats: list[int] = []
    current_mat = 0
    for line_no, raw in enumerate(path.read_text().splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split()
        tag = parts[0]
        if tag == "v":
            if len(parts) < 4:
                raise ValueError(f"{path}:{line_no}: malformed vertex record")
            xyz = [float(x) for x in parts[1:4]]
            if not all(np.isfinite(xyz)):
                raise ValueError(f"{path}:{line_no}: non-finite vertex position")
            vertices.append(xyz)
        elif tag in ("o", "g"):
            name = parts[1] if len(parts) > 1 else ""
            current_mat = int(name_to_mat.get(name, 0))
        elif tag == "f":
            idx = []
            for tok in parts[1:]:
                i = int(tok.split("/")[0])
                idx.append(i - 1 if i > 0 else len(vertices) + i)
            # fan-triangulate polygons
            for k in range(1, len(idx) - 1):
                faces.append([idx[0], idx[k], idx[k + 1]])
                mats.append(current_mat)
    if not vertices:
        raise ValueError(f"no vertices in {path}")
    return TriangleMesh(np.array(vertices), np.array(faces).reshape(-1, 3),
                        material_ids=np.array(mats, dtype=np.int64))


def _load_ply(path: Path) -> TriangleMesh:
    with path.open("rb") as fh:
        magic = fh.readline().strip()
        if magic != b"ply":
            raise ValueError(f"{path}: not a PLY file")
        fmt = None
        n_vertex = n_face = 0
        vertex_props: list[str] = []
        in_vertex = False
        while True:
            line = fh.readline()
            if not line:
                raise ValueError(f"{path}: truncated PLY header")
            tokens = line.decode("ascii", "replace").split()
            if not tokens:
                continue
            if tokens[0] == "format":
                fmt = tokens[1]
            elif tokens[0] == "element":
                in_vertex = tokens[1] == "vertex"
                if tokens[1] == "vertex":
                    n_vertex = int(tokens[2])
                elif tokens[1] == "face":
                    n_face = int(tokens[2])
            elif tokens[0] == "property" and in_vertex and tokens[1] != "list":
                vertex_props.append(tokens[2])
            elif tokens[0] == "end_header":
                break
        if fmt not in ("ascii", "binary_little_endian"):
            raise ValueError(f"{path}: unsupported PLY format {fmt!r}")
        try:
            ix, iy, iz = (vertex_props.index(k) for k in ("x", "y", "z"))
        except ValueError as exc:
            raise ValueError(f"{path}: vertex element lacks x/y/z") from exc

        verts = np.empty((n_vertex, 3), dtype=np.float64)
        faces: list[list[int]] = []
        if fmt == "ascii":
            for i in range(n_vertex):
                vals = fh.readline().split()
                verts[i] = [float(vals[ix]), float(vals[iy]), float(vals[iz])]
            for _ in range(n_face):
                vals = [int(v) for v in fh.readline().split()]
                count, idx = vals[0], vals[1:]
                for k in range(1, count - 1):
                    faces.append([idx[0], idx[k], idx[k + 1]])
        else:
            n_props = len(vertex_props)
            rec = struct.Struct(f"<{n_props}f")
            for i in range(n_vertex):
                vals = rec.unpack(fh.read(rec.size))
                verts[i] = [vals[ix], vals[iy], vals[iz]]
            for _ in range(n_face):
                (count,) = struct.unpack("<B", fh.read(1))
                idx = struct.unpack(f"<{count}i", fh.read(4 * count))
                for k in range(1, count - 1):
                    faces.append([idx[0], idx[k], idx[k + 1]])
    if not np.all(np.isfinite(verts)):
        raise ValueError(f"{path}: non-finite vertex positions")
    return TriangleMesh(verts, np.array(faces, dtype=np.int64).reshape(-1, 3))


def save_obj(mesh: TriangleMesh, path: str | Path, object_names: dict[int, str] | None = None) -> None:
    """Write a mesh as ASCII OBJ, grouping faces by material id."""
    path = Path(path)
    lines = ["# mmray mesh"]
    for v in mesh.vertices:
        lines.append(f"v {v[0]:.17g} {v[1]:.17g} {v[2]:.17g}")
    order = np.argsort(mesh.material_ids, kind="stable")
    current = None
    for fi in order:
        mat = int(mesh.material_ids[fi])
        if mat != current:
            name = (object_names or {}).get(mat, f"material_{mat}")
            lines.append(f"o {name}")
            current = mat
        a, b, c = (int(i) + 1 for i in mesh.faces[fi])
        lines.append(f"f {a} {b} {c}")
    path.write_text("\n".join(lines) + "\n")


# ---------------------------------------------------------------------------
# Ray-triangle intersection (Moller-Trumbore), vectorized over faces or rays.


def _moller_trumbore(origins, directions, v0, v1, v2):
    """Batched ray/triangle test. Broadcasts rays against triangles.

    Returns (t, hit_mask) where t is the ray parameter of valid hits.
    """
    e1 = v1 - v0
    e2 = v2 - v0
    pvec = np.cross(directions, e2)
    det = np.einsum("...i,...i->...", e1, pvec)
    ok = np.abs(det) > 1e-14
    inv_det = np.where(ok, 1.0 / np.where(ok, det, 1.0), 0.0)
    tvec = origins - v0
    u = np.einsum("...i,...i->...", tvec, pvec) * inv_det
    qvec = np.cross(tvec, e1)
    v = np.einsum("...i,...i->...", directions, qvec) * inv_det
    t = np.einsum("...i,...i->...", e2, qvec) * inv_det
    hit = ok & (u >= -1e-12) & (v >= -1e-12) & (u + v <= 1.0 + 1e-12)
    return t, hit


def intersect_brute(mesh: TriangleMesh, origins: np.ndarray, directions: np.ndarray,
                    t_min: float = 0.0, t_max: float = np.inf):
    """Nearest hit of each ray against every face (reference path).

    Parameters are (R, 3) arrays. Returns a dict of arrays with keys
    ``hit`` (bool), ``t``, ``face``, ``point``, ``normal`` where ``normal``
    is flipped to oppose the ray (two-sided surfaces).
    """
    origins = np.atleast_2d(np.asarray(origins, dtype=np.float64))
    directions = np.atleast_2d(np.asarray(directions, dtype=np.float64))
    n_rays = len(origins)
    best_t = np.full(n_rays, np.inf)
    best_face = np.full(n_rays, -1, dtype=np.int64)
    v0, v1, v2 = mesh.triangles()
    # broadcast rays (R,1,3) against faces (F,3)
    t, hit = _moller_trumbore(origins[:, None, :], directions[:, None, :], v0, v1, v2)
    valid = hit & (t > t_min) & (t < t_max)
    t = np.where(valid, t, np.inf)
    if t.size:
        best = np.argmin(t, axis=1)
        rows = np.arange(n_rays)
        best_t = t[rows, best]
        best_face = np.where(np.isfinite(best_t), best, -1)
    hit_mask = np.isfinite(best_t)
    return _pack_hits(mesh, origins, directions, hit_mask, best_t, best_face)


def _pack_hits(mesh, origins, directions, hit_mask, t, face):
    safe_t = np.where(hit_mask, t, 0.0)
    point = origins + safe_t[:, None] * directions
    normal = np.zeros_like(point)
    idx = np.where(hit_mask)[0]
    if idx.size:
        n = mesh.face_normals[face[idx]]
        # two-sided: flip to oppose the incoming direction
        sign = np.sign(np.einsum("ij,ij->i", n, directions[idx]))
        sign = np.where(sign == 0.0, 1.0, sign)
        normal[idx] = -sign[:, None] * n
    return {"hit": hit_mask, "t": safe_t, "face": np.where(hit_mask, face, -1),
            "point": point, "normal": normal,
            "material": np.where(hit_mask, mesh.material_ids[np.where(hit_mask, face, 0)], -1)}
