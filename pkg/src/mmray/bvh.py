"""BVH acceleration over a TriangleMesh.

Median-split over the longest axis, flat node arrays, numba-compiled
traversal. Query results are bit-identical to the brute-force scan in
:mod:`mmray.geometry`, which stays available both as the oracle and as the
fast path for small meshes.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numba import njit

from .geometry import TriangleMesh, _pack_hits, intersect_brute, Intersection, Ray, RAY_EPSILON

#: Below this face count a vectorized all-faces scan beats BVH traversal.
BRUTE_FORCE_MAX_FACES = 64

_LEAF_SIZE = 4


@dataclass
class AccelStructure:
    """Flat-array BVH over a mesh. Immutable once built; safe to share."""

    mesh: TriangleMesh
    bbox_min: np.ndarray     # (N, 3)
    bbox_max: np.ndarray     # (N, 3)
    left: np.ndarray         # (N,) child index or -1 for leaves
    right: np.ndarray        # (N,)
    leaf_start: np.ndarray   # (N,) offset into face_order
    leaf_count: np.ndarray   # (N,)
    face_order: np.ndarray   # (F,) permutation of face ids
    use_brute: bool = False

    @property
    def n_nodes(self) -> int:
        return len(self.left)


def build_accel(mesh: TriangleMesh) -> AccelStructure:
    """Build the BVH for a mesh. Deterministic and single-threaded."""
    if mesh.n_faces == 0:
        raise ValueError("cannot build an acceleration structure over an empty mesh")
    v0, v1, v2 = mesh.triangles()
    fmin = np.minimum(np.minimum(v0, v1), v2)
    fmax = np.maximum(np.maximum(v0, v1), v2)
    centroids = (fmin + fmax) * 0.5

    bbox_min, bbox_max, left, right, leaf_start, leaf_count = [], [], [], [], [], []
    face_order = np.arange(mesh.n_faces, dtype=np.int64)

    def new_node():
        bbox_min.append(np.zeros(3))
        bbox_max.append(np.zeros(3))
        left.append(-1)
        right.append(-1)
        leaf_start.append(0)
        leaf_count.append(0)
        return len(left) - 1

    # iterative build; stack holds (node_id, lo, hi) ranges into face_order
    root = new_node()
    stack = [(root, 0, mesh.n_faces)]
    while stack:
        node, lo, hi = stack.pop()
        ids = face_order[lo:hi]
        bbox_min[node] = fmin[ids].min(axis=0)
        bbox_max[node] = fmax[ids].max(axis=0)
        if hi - lo <= _LEAF_SIZE:
            leaf_start[node] = lo
            leaf_count[node] = hi - lo
            continue
        extent = bbox_max[node] - bbox_min[node]
        axis = int(np.argmax(extent))
        order = np.argsort(centroids[ids, axis], kind="stable")
        face_order[lo:hi] = ids[order]
        mid = lo + (hi - lo) // 2
        lc, rc = new_node(), new_node()
        left[node], right[node] = lc, rc
        stack.append((lc, lo, mid))
        stack.append((rc, mid, hi))

    return AccelStructure(
        mesh=mesh,
        bbox_min=np.ascontiguousarray(bbox_min, dtype=np.float64),
        bbox_max=np.ascontiguousarray(bbox_max, dtype=np.float64),
        left=np.asarray(left, dtype=np.int64),
        right=np.asarray(right, dtype=np.int64),
        leaf_start=np.asarray(leaf_start, dtype=np.int64),
        leaf_count=np.asarray(leaf_count, dtype=np.int64),
        face_order=face_order,
        use_brute=mesh.n_faces <= BRUTE_FORCE_MAX_FACES,
    )


@njit(cache=True)
def _traverse(origins, directions, t_min, t_max, bbox_min, bbox_max, left, right,
              leaf_start, leaf_count, face_order, tri0, tri1, tri2, any_hit):
    n_rays = origins.shape[0]
    out_t = np.full(n_rays, np.inf)
    out_face = np.full(n_rays, -1, dtype=np.int64)
    stack = np.empty(128, dtype=np.int64)
    for r in range(n_rays):
        ox, oy, oz = origins[r, 0], origins[r, 1], origins[r, 2]
        dx, dy, dz = directions[r, 0], directions[r, 1], directions[r, 2]
        ix = 1.0 / dx if dx != 0.0 else np.inf
        iy = 1.0 / dy if dy != 0.0 else np.inf
        iz = 1.0 / dz if dz != 0.0 else np.inf
        best_t = t_max[r]
        best_f = -1
        top = 0
        stack[top] = 0
        top += 1
        while top > 0:
            top -= 1
            node = stack[top]
            # slab test
            tx1 = (bbox_min[node, 0] - ox) * ix
            tx2 = (bbox_max[node, 0] - ox) * ix
            tn = min(tx1, tx2)
            tf = max(tx1, tx2)
            ty1 = (bbox_min[node, 1] - oy) * iy
            ty2 = (bbox_max[node, 1] - oy) * iy
            tn = max(tn, min(ty1, ty2))
            tf = min(tf, max(ty1, ty2))
            tz1 = (bbox_min[node, 2] - oz) * iz
            tz2 = (bbox_max[node, 2] - oz) * iz
            tn = max(tn, min(tz1, tz2))
            tf = min(tf, max(tz1, tz2))
            if tn > tf or tf < t_min[r] or tn > best_t:
                continue
            if left[node] < 0:
                for k in range(leaf_start[node], leaf_start[node] + leaf_count[node]):
                    f = face_order[k]
                    # Moller-Trumbore
                    e1x = tri1[f, 0] - tri0[f, 0]
                    e1y = tri1[f, 1] - tri0[f, 1]
                    e1z = tri1[f, 2] - tri0[f, 2]
                    e2x = tri2[f, 0] - tri0[f, 0]
                    e2y = tri2[f, 1] - tri0[f, 1]
                    e2z = tri2[f, 2] - tri0[f, 2]
                    px = dy * e2z - dz * e2y
                    py = dz * e2x - dx * e2z
                    pz = dx * e2y - dy * e2x
                    det = e1x * px + e1y * py + e1z * pz
                    if abs(det) <= 1e-14:
                        continue
                    inv = 1.0 / det
                    tx = ox - tri0[f, 0]
                    ty = oy - tri0[f, 1]
                    tz = oz - tri0[f, 2]
                    u = (tx * px + ty * py + tz * pz) * inv
                    if u < -1e-12 or u > 1.0 + 1e-12:
                        continue
                    qx = ty * e1z - tz * e1y
                    qy = tz * e1x - tx * e1z
                    qz = tx * e1y - ty * e1x
                    v = (dx * qx + dy * qy + dz * qz) * inv
                    if v < -1e-12 or u + v > 1.0 + 1e-12:
                        continue
                    t = (e2x * qx + e2y * qy + e2z * qz) * inv
                    if t > t_min[r] and t < best_t:
                        best_t = t
                        best_f = f
                        if any_hit:
                            top = 0
                            break
            else:
                stack[top] = left[node]
                top += 1
                stack[top] = right[node]
                top += 1
        if best_f >= 0:
            out_t[r] = best_t
            out_face[r] = best_f
    return out_t, out_face


def intersect_batch(accel: AccelStructure, origins: np.ndarray, directions: np.ndarray,
                    t_min: float = 0.0, t_max: float = np.inf):
    """Nearest hit for a batch of rays; same dict layout as intersect_brute."""
    origins = np.ascontiguousarray(np.atleast_2d(origins), dtype=np.float64)
    directions = np.ascontiguousarray(np.atleast_2d(directions), dtype=np.float64)
    if accel.use_brute:
        return intersect_brute(accel.mesh, origins, directions, t_min, t_max)
    n = len(origins)
    tmin = np.full(n, t_min)
    tmax = np.full(n, t_max)
    tri0, tri1, tri2 = accel.mesh.triangles()
    t, face = _traverse(origins, directions, tmin, tmax, accel.bbox_min, accel.bbox_max,
                        accel.left, accel.right, accel.leaf_start, accel.leaf_count,
                        accel.face_order, tri0, tri1, tri2, False)
    hit = face >= 0
    return _pack_hits(accel.mesh, origins, directions, hit, np.where(hit, t, np.inf), face)


def intersect(accel: AccelStructure, ray: Ray, t_min: float = 0.0,
              t_max: float = np.inf) -> Intersection | None:
    """Nearest intersection of a single ray in (t_min, t_max), or None."""
    if not (t_min >= 0.0 and t_min < t_max):
        raise ValueError("need 0 <= t_min < t_max")
    res = intersect_batch(accel, ray.origin[None, :], ray.direction[None, :], t_min, t_max)
    if not res["hit"][0]:
        return None
    face = int(res["face"][0])
    return Intersection(point=res["point"][0], normal=res["normal"][0],
                        distance=float(res["t"][0]), face_id=face,
                        material_id=int(accel.mesh.material_ids[face]))


def occluded_batch(accel: AccelStructure, starts: np.ndarray, ends: np.ndarray,
                   eps: float = RAY_EPSILON) -> np.ndarray:
    """True where any surface blocks the open segment between point pairs."""
    starts = np.atleast_2d(np.asarray(starts, dtype=np.float64))
    ends = np.atleast_2d(np.asarray(ends, dtype=np.float64))
    seg = ends - starts
    dist = np.linalg.norm(seg, axis=1)
    if np.any(dist == 0.0):
        raise ValueError("occlusion endpoints must differ")
    dirs = seg / dist[:, None]
    if accel.use_brute:
        res = intersect_brute(accel.mesh, starts, dirs, eps, np.inf)
        return res["hit"] & (res["t"] < dist - eps)
    tri0, tri1, tri2 = accel.mesh.triangles()
    tmin = np.full(len(starts), eps)
    tmax = dist - eps
    _, face = _traverse(np.ascontiguousarray(starts), np.ascontiguousarray(dirs),
                        tmin, tmax, accel.bbox_min, accel.bbox_max, accel.left,
                        accel.right, accel.leaf_start, accel.leaf_count,
                        accel.face_order, tri0, tri1, tri2, True)
    return face >= 0


def occluded(accel: AccelStructure, a: np.ndarray, b: np.ndarray,
             eps: float = RAY_EPSILON) -> bool:
    """Visibility test between two points with endpoint epsilon offsets."""
    return bool(occluded_batch(accel, np.asarray(a)[None, :], np.asarray(b)[None, :], eps)[0])
