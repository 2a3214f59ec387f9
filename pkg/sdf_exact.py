"""
Exact signed distance to watertight triangle meshes.

A bounding volume hierarchy (axis-aligned boxes, longest-axis median split) accelerates
closest-point queries; the sign comes from the angle-weighted pseudo-normal of the
closest feature (face, edge or vertex). Queries are batched: a whole point set walks
the tree level by level, with the distance to the nearest mesh vertex as the initial
pruning bound.
"""
import threading
import time
from dataclasses import dataclass
from typing import Optional, Protocol

import numpy as np
from scipy.spatial import cKDTree

from logger import get_logger
from mesh_core import TriMesh

logger = get_logger("sdf.exact")

DEFAULT_LEAF_SIZE: int = 4
QUERY_CHUNK: int = 4096
PAIR_CHUNK: int = 1 << 18
SURFACE_DISTANCE: float = 1e-12

# closest feature codes: triangle corners, triangle edges, interior
VERTEX_A, VERTEX_B, VERTEX_C = 0, 1, 2
EDGE_AB, EDGE_BC, EDGE_CA = 3, 4, 5
FACE_INTERIOR = 6

# generic direction for the containment oracle, chosen off every axis and diagonal
RAY_DIRECTION = np.array([0.2718281828459045, 0.5772156649015329, 0.7853981633974483])
RAY_DIRECTION = RAY_DIRECTION / np.linalg.norm(RAY_DIRECTION)


class SdfError(ValueError):
    """Raised for meshes the SDF engines cannot handle."""


@dataclass(frozen=True)
class SdfQuery:
    """
    Batched SDF evaluation.

    Attributes:
        values (np.ndarray): (n,) signed distances, negative inside.
        gradients (np.ndarray): (n, 3) spatial gradients of the SDF (unit length for the exact engine).
    """
    values: np.ndarray
    gradients: np.ndarray


class SdfEngine(Protocol):
    """Anything the repulsion layer, the metrics and the baselines can query."""

    def evaluate(self, points: np.ndarray) -> SdfQuery:
        ...

    def hessian_vector(self, points: np.ndarray, vectors: np.ndarray) -> np.ndarray:
        ...


@dataclass(frozen=True)
class PseudoNormals:
    """Angle-weighted pseudo-normals per face, edge and vertex."""
    faces: np.ndarray
    edges: np.ndarray
    vertices: np.ndarray


@dataclass(frozen=True, eq=False)
class Bvh:
    """
    Box tree over the faces of one mesh, stored as flat node arrays.

    Attributes:
        mesh (TriMesh): the indexed mesh.
        leaf_size (int): maximum faces per leaf.
        node_min, node_max (np.ndarray): (K, 3) node boxes.
        left, right (np.ndarray): (K,) child node ids, -1 for leaves.
        start, count (np.ndarray): (K,) slice of `order` owned by each leaf.
        order (np.ndarray): (F,) face permutation; leaves own contiguous ranges.
        normals (PseudoNormals): sign data for signed queries.
        vertex_tree (cKDTree): nearest referenced vertex, used as the initial upper bound.
    """
    mesh: TriMesh
    leaf_size: int
    node_min: np.ndarray
    node_max: np.ndarray
    left: np.ndarray
    right: np.ndarray
    start: np.ndarray
    count: np.ndarray
    order: np.ndarray
    normals: PseudoNormals
    vertex_tree: cKDTree

    @property
    def node_count(self) -> int:
        return int(self.left.shape[0])

    def leaves(self) -> np.ndarray:
        return np.flatnonzero(self.left < 0)

    def leaf_faces(self, node: int) -> np.ndarray:
        return self.order[self.start[node]:self.start[node] + self.count[node]]


@dataclass(frozen=True)
class ClosestPointResult:
    """
    Closest surface point for one query.

    Attributes:
        point (np.ndarray): closest point on the mesh.
        face (int): index of the face holding it (lowest index on ties).
        barycentric (np.ndarray): coordinates of `point` in that face.
        distance (float): unsigned distance in meters.
    """
    point: np.ndarray
    face: int
    barycentric: np.ndarray
    distance: float


@dataclass(frozen=True)
class ClosestPoints:
    """Batched closest points; see ClosestPointResult. `features` holds the closest feature codes."""
    points: np.ndarray
    faces: np.ndarray
    barycentric: np.ndarray
    distances: np.ndarray
    features: np.ndarray


@dataclass(frozen=True)
class SignedDistanceResult:
    """
    Signed distance with its unit gradient.

    Attributes:
        value (float): signed meters, negative inside.
        gradient (np.ndarray): unit vector pointing toward increasing distance.
    """
    value: float
    gradient: np.ndarray


def _dot(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    return np.einsum("ij,ij->i", a, b)


def _safe_ratio(num: np.ndarray, den: np.ndarray) -> np.ndarray:
    return np.divide(num, den, out=np.zeros_like(num), where=den != 0)


def compute_pseudo_normals(mesh: TriMesh) -> PseudoNormals:
    """Face normals, edge normals (sum of incident face normals) and angle-weighted vertex normals."""
    face_normals = mesh.face_normals()
    edge_acc = np.zeros((len(mesh.edges), 3))
    for column in range(3):
        np.add.at(edge_acc, mesh.face_edges[:, column], face_normals)
    lengths = np.linalg.norm(edge_acc, axis=1, keepdims=True)
    edge_normals = np.divide(edge_acc, lengths, out=np.zeros_like(edge_acc), where=lengths > 0)
    return PseudoNormals(face_normals, edge_normals, mesh.vertex_normals())


def closest_point_on_triangles(p: np.ndarray, a: np.ndarray, b: np.ndarray, c: np.ndarray):
    """
    Closest point on each triangle (a, b, c) to the matching query p, all (n, 3).

    Region classification over the Voronoi regions of vertices, edges and interior.
    Zero-area triangles fall back to the closest of their three edge segments.

    Returns:
        (np.ndarray, np.ndarray, np.ndarray): closest points (n, 3), barycentric
        coordinates (n, 3), and closest feature codes (n,).
    """
    n = p.shape[0]
    ab = b - a
    ac = c - a
    ap = p - a
    bp = p - b
    cp = p - c
    d1, d2 = _dot(ab, ap), _dot(ac, ap)
    d3, d4 = _dot(ab, bp), _dot(ac, bp)
    d5, d6 = _dot(ab, cp), _dot(ac, cp)
    vc = d1 * d4 - d3 * d2
    vb = d5 * d2 - d1 * d6
    va = d3 * d6 - d5 * d4

    bary = np.zeros((n, 3))
    feature = np.full(n, FACE_INTERIOR, dtype=np.int8)
    done = np.zeros(n, dtype=bool)

    def assign(mask, u, v, w, code):
        mask = mask & ~done
        bary[mask, 0] = np.broadcast_to(u, (n,))[mask]
        bary[mask, 1] = np.broadcast_to(v, (n,))[mask]
        bary[mask, 2] = np.broadcast_to(w, (n,))[mask]
        feature[mask] = code
        done[mask] = True

    assign((d1 <= 0) & (d2 <= 0), 1.0, 0.0, 0.0, VERTEX_A)
    assign((d3 >= 0) & (d4 <= d3), 0.0, 1.0, 0.0, VERTEX_B)
    t_ab = _safe_ratio(d1, d1 - d3)
    assign((vc <= 0) & (d1 >= 0) & (d3 <= 0), 1.0 - t_ab, t_ab, 0.0, EDGE_AB)
    assign((d6 >= 0) & (d5 <= d6), 0.0, 0.0, 1.0, VERTEX_C)
    t_ca = _safe_ratio(d2, d2 - d6)
    assign((vb <= 0) & (d2 >= 0) & (d6 <= 0), 1.0 - t_ca, 0.0, t_ca, EDGE_CA)
    t_bc = _safe_ratio(d4 - d3, (d4 - d3) + (d5 - d6))
    assign((va <= 0) & ((d4 - d3) >= 0) & ((d5 - d6) >= 0), 0.0, 1.0 - t_bc, t_bc, EDGE_BC)

    interior = ~done
    if interior.any():
        denom = va + vb + vc
        degenerate = interior & ~(np.abs(denom) > 0)
        regular = interior & ~degenerate
        weights = np.stack([va, vb, vc], axis=1)[regular]
        weights = np.clip(weights / denom[regular, None], 0.0, None)
        bary[regular] = weights / weights.sum(axis=1, keepdims=True)
        if degenerate.any():
            idx = np.flatnonzero(degenerate)
            bary[idx], feature[idx] = _closest_on_edges(p[idx], a[idx], b[idx], c[idx])

    closest = bary[:, 0, None] * a + bary[:, 1, None] * b + bary[:, 2, None] * c
    return closest, bary, feature


def _closest_on_edges(p, a, b, c):
    """Best of the three edge segments, for zero-area triangles."""
    n = p.shape[0]
    best_bary = np.zeros((n, 3))
    best_feature = np.full(n, EDGE_AB, dtype=np.int8)
    best_dist = np.full(n, np.inf)
    for start, end, (i, j), code in ((a, b, (0, 1), EDGE_AB), (b, c, (1, 2), EDGE_BC), (c, a, (2, 0), EDGE_CA)):
        seg = end - start
        t = np.clip(_safe_ratio(_dot(p - start, seg), _dot(seg, seg)), 0.0, 1.0)
        dist = np.linalg.norm(p - (start + t[:, None] * seg), axis=1)
        better = dist < best_dist
        best_dist[better] = dist[better]
        best_bary[better] = 0.0
        best_bary[better, i] = 1.0 - t[better]
        best_bary[better, j] = t[better]
        best_feature[better] = code
    return best_bary, best_feature


def build_bvh(mesh: TriMesh, leaf_size: int = DEFAULT_LEAF_SIZE) -> Bvh:
    """
    Build the box tree. Splits at the median face centroid along the longest centroid
    extent; stable sorting keeps the result deterministic for a given mesh.

    Raises:
        SdfError: if the mesh has no faces.
    """
    if mesh.face_count == 0:
        raise SdfError("cannot build a BVH over an empty mesh")
    if leaf_size < 1:
        raise SdfError(f"leaf size must be positive, got {leaf_size}")
    tri = mesh.vertices[mesh.faces]
    face_min = tri.min(axis=1)
    face_max = tri.max(axis=1)
    centroids = tri.mean(axis=1)
    order = np.arange(mesh.face_count)

    node_min, node_max, left, right, start, count = [], [], [], [], [], []

    def new_node() -> int:
        for column in (left, right, start, count):
            column.append(-1)
        node_min.append(None)
        node_max.append(None)
        return len(left) - 1

    stack = [(new_node(), 0, mesh.face_count)]
    while stack:
        node, lo, hi = stack.pop()
        idx = order[lo:hi]
        node_min[node] = face_min[idx].min(axis=0)
        node_max[node] = face_max[idx].max(axis=0)
        if hi - lo <= leaf_size:
            start[node], count[node] = lo, hi - lo
            continue
        axis = int(np.argmax(centroids[idx].max(axis=0) - centroids[idx].min(axis=0)))
        order[lo:hi] = idx[np.argsort(centroids[idx, axis], kind="stable")]
        mid = lo + (hi - lo) // 2
        left_node, right_node = new_node(), new_node()
        left[node], right[node] = left_node, right_node
        start[node], count[node] = lo, 0
        stack.append((right_node, mid, hi))
        stack.append((left_node, lo, mid))

    used = np.unique(mesh.faces)
    return Bvh(
        mesh=mesh, leaf_size=leaf_size,
        node_min=np.array(node_min), node_max=np.array(node_max),
        left=np.array(left, dtype=np.int64), right=np.array(right, dtype=np.int64),
        start=np.array(start, dtype=np.int64), count=np.array(count, dtype=np.int64),
        order=order, normals=compute_pseudo_normals(mesh),
        vertex_tree=cKDTree(mesh.vertices[used]),
    )


def _box_distance(points: np.ndarray, lo: np.ndarray, hi: np.ndarray) -> np.ndarray:
    gap = np.maximum(np.maximum(lo - points, points - hi), 0.0)
    return np.linalg.norm(gap, axis=1)


def _closest_chunk(bvh: Bvh, queries: np.ndarray) -> ClosestPoints:
    n = queries.shape[0]
    bound, _ = bvh.vertex_tree.query(queries)
    bound = bound * (1.0 + 1e-9) + 1e-12

    q_idx = np.arange(n)
    nodes = np.zeros(n, dtype=np.int64)
    leaf_q, leaf_nodes = [], []
    while q_idx.size:
        near = _box_distance(queries[q_idx], bvh.node_min[nodes], bvh.node_max[nodes]) <= bound[q_idx]
        q_idx, nodes = q_idx[near], nodes[near]
        is_leaf = bvh.left[nodes] < 0
        leaf_q.append(q_idx[is_leaf])
        leaf_nodes.append(nodes[is_leaf])
        inner_q, inner_nodes = q_idx[~is_leaf], nodes[~is_leaf]
        q_idx = np.concatenate([inner_q, inner_q])
        nodes = np.concatenate([bvh.left[inner_nodes], bvh.right[inner_nodes]])

    leaf_q = np.concatenate(leaf_q)
    leaf_nodes = np.concatenate(leaf_nodes)
    counts = bvh.count[leaf_nodes]
    pair_q = np.repeat(leaf_q, counts)
    offsets = np.arange(pair_q.size) - np.repeat(np.cumsum(counts) - counts, counts)
    pair_f = bvh.order[np.repeat(bvh.start[leaf_nodes], counts) + offsets]

    vertices, faces = bvh.mesh.vertices, bvh.mesh.faces
    closest = np.empty((pair_q.size, 3))
    bary = np.empty((pair_q.size, 3))
    feature = np.empty(pair_q.size, dtype=np.int8)
    for lo in range(0, pair_q.size, PAIR_CHUNK):
        sl = slice(lo, lo + PAIR_CHUNK)
        tri = faces[pair_f[sl]]
        closest[sl], bary[sl], feature[sl] = closest_point_on_triangles(
            queries[pair_q[sl]], vertices[tri[:, 0]], vertices[tri[:, 1]], vertices[tri[:, 2]])
    dist = np.linalg.norm(queries[pair_q] - closest, axis=1)

    ranked = np.lexsort((pair_f, dist, pair_q))
    _, first = np.unique(pair_q[ranked], return_index=True)
    pick = ranked[first]
    return ClosestPoints(closest[pick], pair_f[pick], bary[pick], dist[pick], feature[pick])


def closest_points(bvh: Bvh, points: np.ndarray) -> ClosestPoints:
    """Batched exact closest points; ties between faces go to the lowest face index."""
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    if points.shape[0] == 0:
        return ClosestPoints(np.empty((0, 3)), np.empty(0, dtype=np.int64), np.empty((0, 3)),
                             np.empty(0), np.empty(0, dtype=np.int8))
    parts = [_closest_chunk(bvh, points[lo:lo + QUERY_CHUNK]) for lo in range(0, points.shape[0], QUERY_CHUNK)]
    return ClosestPoints(*(np.concatenate([getattr(part, name) for part in parts])
                           for name in ("points", "faces", "barycentric", "distances", "features")))


def closest_point(bvh: Bvh, q: np.ndarray) -> ClosestPointResult:
    """Globally closest point on the mesh to `q`."""
    batch = closest_points(bvh, np.asarray(q, dtype=np.float64).reshape(1, 3))
    return ClosestPointResult(batch.points[0], int(batch.faces[0]), batch.barycentric[0], float(batch.distances[0]))


def _feature_normals(bvh: Bvh, found: ClosestPoints) -> np.ndarray:
    normals = bvh.normals
    faces = bvh.mesh.faces
    result = normals.faces[found.faces].copy()
    feature = found.features.astype(np.int64)
    on_vertex = feature <= VERTEX_C
    if on_vertex.any():
        result[on_vertex] = normals.vertices[faces[found.faces[on_vertex], feature[on_vertex]]]
    on_edge = (feature >= EDGE_AB) & (feature <= EDGE_CA)
    if on_edge.any():
        edge_ids = bvh.mesh.face_edges[found.faces[on_edge], feature[on_edge] - EDGE_AB]
        result[on_edge] = normals.edges[edge_ids]
    return result


def signed_distances(bvh: Bvh, points: np.ndarray):
    """
    Batched signed distance.

    Returns:
        (np.ndarray, np.ndarray, ClosestPoints): values (n,), unit gradients (n, 3) and
        the closest points they were derived from.
    """
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    found = closest_points(bvh, points)
    pseudo = _feature_normals(bvh, found)
    offset = points - found.points
    inside = _dot(offset, pseudo) < 0
    sign = np.where(inside, -1.0, 1.0)
    on_surface = found.distances <= SURFACE_DISTANCE
    values = np.where(on_surface, 0.0, sign * found.distances)
    direction = np.divide(offset, found.distances[:, None], out=np.zeros_like(offset),
                          where=found.distances[:, None] > SURFACE_DISTANCE)
    gradients = np.where(on_surface[:, None], pseudo, sign[:, None] * direction)
    return values, gradients, found


def signed_distance(bvh: Bvh, mesh: TriMesh, q: np.ndarray) -> SignedDistanceResult:
    """
    Signed distance of a single point, with the sign from the pseudo-normal at the closest feature.

    Raises:
        SdfError: if `bvh` was not built over `mesh`.
    """
    if bvh.mesh is not mesh:
        raise SdfError("BVH was built over a different mesh")
    values, gradients, _ = signed_distances(bvh, np.asarray(q, dtype=np.float64).reshape(1, 3))
    return SignedDistanceResult(float(values[0]), gradients[0])


def inside_by_ray_parity(mesh: TriMesh, points: np.ndarray, direction: Optional[np.ndarray] = None) -> np.ndarray:
    """
    Containment by counting ray crossings along a fixed generic direction (odd = inside).
    Brute force over all faces; used as an independent oracle for the pseudo-normal sign.
    """
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    direction = RAY_DIRECTION if direction is None else np.asarray(direction, dtype=np.float64)
    tri = mesh.vertices[mesh.faces]
    e1 = tri[:, 1] - tri[:, 0]
    e2 = tri[:, 2] - tri[:, 0]
    pvec = np.cross(direction, e2)
    det = _dot(e1, pvec)
    usable = np.abs(det) > 1e-300
    inv_det = np.divide(1.0, det, out=np.zeros_like(det), where=usable)
    chunk = max(1, PAIR_CHUNK // max(1, mesh.face_count))
    inside = np.zeros(points.shape[0], dtype=bool)
    for lo in range(0, points.shape[0], chunk):
        tvec = points[lo:lo + chunk, None, :] - tri[None, :, 0]
        u = np.einsum("qfk,fk->qf", tvec, pvec) * inv_det
        qvec = np.cross(tvec, e1[None])
        v = np.einsum("k,qfk->qf", direction, qvec) * inv_det
        t = np.einsum("fk,qfk->qf", e2, qvec) * inv_det
        hit = usable & (u >= 0) & (v >= 0) & (u + v <= 1) & (t > 0)
        inside[lo:lo + chunk] = hit.sum(axis=1) % 2 == 1
    return inside


class ExactSdf:
    """
    Exact body SDF engine: one BVH and one set of pseudo-normals per body mesh.

    Query time is accumulated in `query_seconds` / `query_points` for the timing report;
    updates are serialized so one engine can serve several evaluation threads.
    """

    def __init__(self, mesh: TriMesh, leaf_size: int = DEFAULT_LEAF_SIZE) -> None:
        self.logger = logger
        self.mesh = mesh
        self.bvh = build_bvh(mesh, leaf_size)
        self.watertight = mesh.is_watertight()
        if not self.watertight:
            self.logger.warning("Body mesh with %d faces is not watertight, signs are best-effort",
                                mesh.face_count)
        degenerate = mesh.degenerate_faces()
        if degenerate.size:
            self.logger.info("Body mesh has %d degenerate faces", degenerate.size)
        self.query_seconds = 0.0
        self.query_points = 0
        self._timing_lock = threading.Lock()

    def closest_points(self, points: np.ndarray) -> ClosestPoints:
        return closest_points(self.bvh, points)

    def signed_distances(self, points: np.ndarray):
        start = time.perf_counter()
        result = signed_distances(self.bvh, points)
        elapsed = time.perf_counter() - start
        with self._timing_lock:
            self.query_seconds += elapsed
            self.query_points += int(np.asarray(points).reshape(-1, 3).shape[0])
        return result

    def evaluate(self, points: np.ndarray) -> SdfQuery:
        values, gradients, _ = self.signed_distances(points)
        return SdfQuery(values, gradients)

    def hessian_vector(self, points: np.ndarray, vectors: np.ndarray) -> np.ndarray:
        """Curvature of the exact field is ignored: the Hessian term is taken as zero."""
        return np.zeros_like(np.asarray(vectors, dtype=np.float64))
