"""
Garment/body collision detection and the metric suite.

Detection has two parts:
* vertex-face: garment vertices with a negative body SDF;
* surface crossings: garment triangles intersecting body triangles (BVH-vs-BVH broad
  phase, triangle-triangle narrow phase).

A garment triangle counts as a VF triangle when it owns a penetrating vertex and as an
EE triangle when it crosses the body surface with all three vertices outside.
"""
import csv
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from logger import get_logger
from mesh_core import DEGENERATE_AREA, MeshError, TriMesh, uniform_laplacian
from refu_datatypes import METRICS_COLUMNS, ContactType, DistanceBucketRecord, HistogramRecord, MetricsRow
from sdf_exact import Bvh, ExactSdf, SdfEngine, build_bvh

logger = get_logger("metrics")

PLANE_TOLERANCE: float = 1e-12
INSIDE_TOLERANCE: float = 1e-15
BOX_PADDING: float = 1e-12
PAIR_CHUNK: int = 1 << 16
DEFAULT_HISTOGRAM_BINS: int = 50
PathLike = Union[str, Path]


def _dot(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    return np.einsum("ij,ij->i", a, b)


def _orient2(a: np.ndarray, b: np.ndarray, c: np.ndarray) -> np.ndarray:
    return (b[:, 0] - a[:, 0]) * (c[:, 1] - a[:, 1]) - (b[:, 1] - a[:, 1]) * (c[:, 0] - a[:, 0])


def _segments_cross_2d(p1, p2, q1, q2) -> np.ndarray:
    d1, d2 = _orient2(q1, q2, p1), _orient2(q1, q2, p2)
    d3, d4 = _orient2(p1, p2, q1), _orient2(p1, p2, q2)
    proper = (d1 * d2 <= 0) & (d3 * d4 <= 0)
    collinear = (d1 == 0) & (d2 == 0)
    overlap = np.ones(p1.shape[0], dtype=bool)
    for axis in range(2):
        overlap &= (np.maximum(p1[:, axis], p2[:, axis]) >= np.minimum(q1[:, axis], q2[:, axis]))
        overlap &= (np.maximum(q1[:, axis], q2[:, axis]) >= np.minimum(p1[:, axis], p2[:, axis]))
    return np.where(collinear, overlap, proper)


def _point_in_triangle_2d(x, a, b, c) -> np.ndarray:
    s1, s2, s3 = _orient2(a, b, x), _orient2(b, c, x), _orient2(c, a, x)
    return ((s1 >= 0) & (s2 >= 0) & (s3 >= 0)) | ((s1 <= 0) & (s2 <= 0) & (s3 <= 0))


def _drop_axis(points: np.ndarray, axis: np.ndarray) -> np.ndarray:
    """Project (P, 3) points to 2D by removing the given per-row axis."""
    keep = np.array([[1, 2], [0, 2], [0, 1]])[axis]
    return np.take_along_axis(points, keep, axis=1)


def _coplanar_intersect(t1: np.ndarray, t2: np.ndarray, normal: np.ndarray) -> np.ndarray:
    axis = np.argmax(np.abs(normal), axis=1)
    a = [_drop_axis(t1[:, i], axis) for i in range(3)]
    b = [_drop_axis(t2[:, i], axis) for i in range(3)]
    hit = np.zeros(t1.shape[0], dtype=bool)
    for i in range(3):
        for j in range(3):
            hit |= _segments_cross_2d(a[i], a[(i + 1) % 3], b[j], b[(j + 1) % 3])
    hit |= _point_in_triangle_2d(a[0], b[0], b[1], b[2])
    hit |= _point_in_triangle_2d(b[0], a[0], a[1], a[2])
    return hit


def _segment_triangle(p: np.ndarray, q: np.ndarray, tri: np.ndarray, normal: np.ndarray) -> np.ndarray:
    """Closed segment/triangle test; segments lying in the triangle plane use the 2D test."""
    a, b, c = tri[:, 0], tri[:, 1], tri[:, 2]
    dp = _dot(p - a, normal)
    dq = _dot(q - a, normal)
    dp = np.where(np.abs(dp) <= PLANE_TOLERANCE, 0.0, dp)
    dq = np.where(np.abs(dq) <= PLANE_TOLERANCE, 0.0, dq)
    in_plane = (dp == 0) & (dq == 0)
    crosses = (dp * dq <= 0) & ~in_plane
    t = np.divide(dp, dp - dq, out=np.zeros_like(dp), where=(dp - dq) != 0)
    x = p + t[:, None] * (q - p)
    s1 = _dot(np.cross(b - a, x - a), normal)
    s2 = _dot(np.cross(c - b, x - b), normal)
    s3 = _dot(np.cross(a - c, x - c), normal)
    inside = (s1 >= -INSIDE_TOLERANCE) & (s2 >= -INSIDE_TOLERANCE) & (s3 >= -INSIDE_TOLERANCE)
    hit = crosses & inside
    if in_plane.any():
        idx = np.flatnonzero(in_plane)
        axis = np.argmax(np.abs(normal[idx]), axis=1)
        p2, q2 = _drop_axis(p[idx], axis), _drop_axis(q[idx], axis)
        a2, b2, c2 = (_drop_axis(v[idx], axis) for v in (a, b, c))
        planar = _point_in_triangle_2d(p2, a2, b2, c2)
        for u, v in ((a2, b2), (b2, c2), (c2, a2)):
            planar |= _segments_cross_2d(p2, q2, u, v)
        hit[idx] = planar
    return hit


def _longest_edge(tri: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Endpoints of the longest edge: the point set of a zero-area triangle."""
    starts = tri
    ends = np.roll(tri, -1, axis=1)
    pick = np.argmax(np.linalg.norm(ends - starts, axis=2), axis=1)
    rows = np.arange(tri.shape[0])
    return starts[rows, pick], ends[rows, pick]


def _segment_distance(p1: np.ndarray, q1: np.ndarray, p2: np.ndarray, q2: np.ndarray) -> np.ndarray:
    """Distance between closed 3D segments, rows paired; zero-length segments are points."""
    d1, d2, r = q1 - p1, q2 - p2, p1 - p2
    a, e = _dot(d1, d1), _dot(d2, d2)
    b, c, f = _dot(d1, d2), _dot(d1, r), _dot(d2, r)
    point1, point2 = a <= DEGENERATE_AREA, e <= DEGENERATE_AREA
    safe_a = np.where(point1, 1.0, a)
    safe_e = np.where(point2, 1.0, e)
    denom = a * e - b * b
    s = np.where(denom > 0, np.clip((b * f - c * e) / np.where(denom > 0, denom, 1.0), 0.0, 1.0), 0.0)
    t = (b * s + f) / safe_e
    s = np.where(t < 0, np.clip(-c / safe_a, 0.0, 1.0), np.where(t > 1, np.clip((b - c) / safe_a, 0.0, 1.0), s))
    t = np.clip(t, 0.0, 1.0)
    s = np.where(point2, np.clip(-c / safe_a, 0.0, 1.0), s)
    t = np.where(point2, 0.0, t)
    t = np.where(point1, np.clip(f / safe_e, 0.0, 1.0), t)
    s = np.where(point1, 0.0, s)
    t = np.where(point1 & point2, 0.0, t)
    gap = (p1 + s[:, None] * d1) - (p2 + t[:, None] * d2)
    return np.linalg.norm(gap, axis=1)


def _degenerate_pairs(t1: np.ndarray, t2: np.ndarray, n1: np.ndarray, n2: np.ndarray,
                      flat1: np.ndarray, flat2: np.ndarray) -> np.ndarray:
    """Pairs where at least one triangle has zero area: that triangle is tested as a segment."""
    p1, q1 = _longest_edge(t1)
    p2, q2 = _longest_edge(t2)
    hit = np.zeros(t1.shape[0], dtype=bool)
    both = flat1 & flat2
    hit[both] = _segment_distance(p1[both], q1[both], p2[both], q2[both]) <= PLANE_TOLERANCE
    first = flat1 & ~flat2
    hit[first] = _segment_triangle(p1[first], q1[first], t2[first], n2[first])
    second = flat2 & ~flat1
    hit[second] = _segment_triangle(p2[second], q2[second], t1[second], n1[second])
    return hit


def triangle_pairs_intersect(t1: np.ndarray, t2: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """
    Vectorised closed triangle/triangle intersection.

    A zero-area triangle is tested as the segment it spans.

    Args:
        t1, t2 (np.ndarray): (P, 3, 3) triangle corner pairs.

    Returns:
        (np.ndarray, np.ndarray): intersecting flags and coplanar flags, both (P,).
    """
    n1 = np.cross(t1[:, 1] - t1[:, 0], t1[:, 2] - t1[:, 0])
    n2 = np.cross(t2[:, 1] - t2[:, 0], t2[:, 2] - t2[:, 0])
    norm1 = np.linalg.norm(n1, axis=1)
    norm2 = np.linalg.norm(n2, axis=1)
    flat1 = 0.5 * norm1 <= DEGENERATE_AREA
    flat2 = 0.5 * norm2 <= DEGENERATE_AREA
    n1 /= np.maximum(norm1, 1e-300)[:, None]
    n2 /= np.maximum(norm2, 1e-300)[:, None]
    regular = ~flat1 & ~flat2
    side = np.stack([_dot(t2[:, i] - t1[:, 0], n1) for i in range(3)], axis=1)
    coplanar = regular & (np.abs(side) <= PLANE_TOLERANCE).all(axis=1)
    separated = (side > PLANE_TOLERANCE).all(axis=1) | (side < -PLANE_TOLERANCE).all(axis=1)
    hit = np.zeros(t1.shape[0], dtype=bool)
    general = regular & ~coplanar & ~separated
    if general.any():
        idx = np.flatnonzero(general)
        a, b, na, nb = t1[idx], t2[idx], n1[idx], n2[idx]
        found = np.zeros(idx.size, dtype=bool)
        for i in range(3):
            found |= _segment_triangle(a[:, i], a[:, (i + 1) % 3], b, nb)
            found |= _segment_triangle(b[:, i], b[:, (i + 1) % 3], a, na)
        hit[idx] = found
    if coplanar.any():
        idx = np.flatnonzero(coplanar)
        hit[idx] = _coplanar_intersect(t1[idx], t2[idx], n1[idx])
    if not regular.all():
        idx = np.flatnonzero(~regular)
        hit[idx] = _degenerate_pairs(t1[idx], t2[idx], n1[idx], n2[idx], flat1[idx], flat2[idx])
    return hit, coplanar & hit


def tri_tri_intersect(t1: np.ndarray, t2: np.ndarray) -> bool:
    """Whether two closed triangles, each (3, 3), share a point. Coplanar contact counts."""
    hit, _ = triangle_pairs_intersect(np.asarray(t1, dtype=np.float64)[None], np.asarray(t2, dtype=np.float64)[None])
    return bool(hit[0])


def _leaf_pairs(first: Bvh, second: Bvh) -> Tuple[np.ndarray, np.ndarray]:
    """Overlapping (leaf of first, leaf of second) node pairs, by simultaneous descent."""
    a = np.zeros(1, dtype=np.int64)
    b = np.zeros(1, dtype=np.int64)
    leaves_a, leaves_b = [], []
    while a.size:
        overlap = ((first.node_min[a] <= second.node_max[b] + BOX_PADDING)
                   & (second.node_min[b] <= first.node_max[a] + BOX_PADDING)).all(axis=1)
        a, b = a[overlap], b[overlap]
        leaf_a = first.left[a] < 0
        leaf_b = second.left[b] < 0
        leaves_a.append(a[leaf_a & leaf_b])
        leaves_b.append(b[leaf_a & leaf_b])
        next_a, next_b = [], []
        both = ~leaf_a & ~leaf_b
        for child_a in (first.left[a[both]], first.right[a[both]]):
            for child_b in (second.left[b[both]], second.right[b[both]]):
                next_a.append(child_a)
                next_b.append(child_b)
        only_a = ~leaf_a & leaf_b
        for child_a in (first.left[a[only_a]], first.right[a[only_a]]):
            next_a.append(child_a)
            next_b.append(b[only_a])
        only_b = leaf_a & ~leaf_b
        for child_b in (second.left[b[only_b]], second.right[b[only_b]]):
            next_a.append(a[only_b])
            next_b.append(child_b)
        a = np.concatenate(next_a)
        b = np.concatenate(next_b)
    return np.concatenate(leaves_a), np.concatenate(leaves_b)


def _expand_leaves(bvh_a: Bvh, bvh_b: Bvh, leaves_a: np.ndarray, leaves_b: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    faces_a, faces_b = [], []
    for la, lb in zip(leaves_a.tolist(), leaves_b.tolist()):
        fa, fb = bvh_a.leaf_faces(la), bvh_b.leaf_faces(lb)
        faces_a.append(np.repeat(fa, fb.size))
        faces_b.append(np.tile(fb, fa.size))
    if not faces_a:
        return np.empty(0, dtype=np.int64), np.empty(0, dtype=np.int64)
    return np.concatenate(faces_a), np.concatenate(faces_b)


def intersecting_pairs(garment: TriMesh, body: TriMesh, body_bvh: Optional[Bvh] = None) -> Tuple[np.ndarray, np.ndarray]:
    """
    All (garment face, body face) pairs that intersect, sorted lexicographically.

    Returns:
        (np.ndarray, np.ndarray): (K, 2) pairs and (K,) coplanar flags.
    """
    if garment.face_count == 0 or body.face_count == 0:
        return np.empty((0, 2), dtype=np.int64), np.empty(0, dtype=bool)
    garment_bvh = build_bvh(garment)
    body_bvh = body_bvh or build_bvh(body)
    leaves_g, leaves_b = _leaf_pairs(garment_bvh, body_bvh)
    cand_g, cand_b = _expand_leaves(garment_bvh, body_bvh, leaves_g, leaves_b)
    tri_g = garment.vertices[garment.faces]
    tri_b = body.vertices[body.faces]
    boxes = ((tri_g.min(axis=1)[cand_g] <= tri_b.max(axis=1)[cand_b] + BOX_PADDING)
             & (tri_b.min(axis=1)[cand_b] <= tri_g.max(axis=1)[cand_g] + BOX_PADDING)).all(axis=1)
    cand_g, cand_b = cand_g[boxes], cand_b[boxes]
    hits = np.zeros(cand_g.size, dtype=bool)
    coplanar = np.zeros(cand_g.size, dtype=bool)
    for lo in range(0, cand_g.size, PAIR_CHUNK):
        sl = slice(lo, lo + PAIR_CHUNK)
        hits[sl], coplanar[sl] = triangle_pairs_intersect(tri_g[cand_g[sl]], tri_b[cand_b[sl]])
    pairs = np.stack([cand_g[hits], cand_b[hits]], axis=1)
    flags = coplanar[hits]
    order = np.lexsort((pairs[:, 1], pairs[:, 0]))
    return pairs[order], flags[order]


@dataclass
class CollisionReport:
    """
    Collisions of one garment against one body.

    Attributes:
        vertex_count (int): garment vertices.
        penetrating_vertices (np.ndarray): garment vertices inside the body.
        vf_triangles (np.ndarray): garment triangles owning a penetrating vertex.
        ee_triangles (np.ndarray): garment triangles crossing the body surface with no vertex inside.
        pairs (np.ndarray): (K, 2) intersecting (garment face, body face) pairs.
        coplanar_pairs (int): pairs decided by the coplanar fallback.
        energy (float): penetration energy in m^2.
    """
    vertex_count: int
    penetrating_vertices: np.ndarray
    vf_triangles: np.ndarray
    ee_triangles: np.ndarray
    pairs: np.ndarray
    coplanar_pairs: int = 0
    energy: float = 0.0

    def triangles(self, contact: ContactType) -> np.ndarray:
        return self.vf_triangles if contact is ContactType.VF else self.ee_triangles

    def contact_counts(self) -> Dict[str, int]:
        return {contact.value: int(self.triangles(contact).size) for contact in ContactType}

    @property
    def collision_free(self) -> bool:
        return self.penetrating_vertices.size == 0 and self.vf_triangles.size == 0 and self.ee_triangles.size == 0


def detect_vf(garment: TriMesh, engine: SdfEngine) -> np.ndarray:
    """Indices of garment vertices with a negative body SDF."""
    if garment.vertex_count == 0:
        return np.empty(0, dtype=np.int64)
    return np.flatnonzero(engine.evaluate(garment.vertices).values < 0)


def classify_triangles(garment: TriMesh, penetrating: np.ndarray, pairs: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """(VF triangles, EE triangles) from penetrating vertices and intersecting pairs."""
    inside = np.zeros(garment.vertex_count, dtype=bool)
    inside[penetrating] = True
    owns = inside[garment.faces].any(axis=1) if garment.face_count else np.empty(0, dtype=bool)
    vf = np.flatnonzero(owns)
    crossing = np.unique(pairs[:, 0]) if pairs.size else np.empty(0, dtype=np.int64)
    ee = crossing[~owns[crossing]] if crossing.size else crossing
    return vf, ee


def detect_intersections(garment: TriMesh, body: TriMesh, engine: Optional[ExactSdf] = None) -> CollisionReport:
    """
    Full collision report: penetrating vertices, intersecting triangle pairs and the
    VF/EE classification of garment triangles.
    """
    engine = engine or ExactSdf(body)
    values = engine.evaluate(garment.vertices).values if garment.vertex_count else np.empty(0)
    penetrating = np.flatnonzero(values < 0)
    pairs, coplanar = intersecting_pairs(garment, body, engine.bvh if isinstance(engine, ExactSdf) else None)
    if coplanar.any():
        logger.info("%d coplanar triangle contacts counted as collisions", int(coplanar.sum()))
    vf, ee = classify_triangles(garment, penetrating, pairs)
    energy = float(np.sum(values[penetrating] ** 2))
    report = CollisionReport(garment.vertex_count, penetrating, vf, ee, pairs, int(coplanar.sum()), energy)
    logger.debug("Collision report", extra={"fields": report.contact_counts()})
    return report


def _positions(mesh_or_array) -> np.ndarray:
    if isinstance(mesh_or_array, TriMesh):
        return mesh_or_array.vertices
    return np.asarray(mesh_or_array, dtype=np.float64).reshape(-1, 3)


def mpve(pred, truth) -> float:
    """
    Mean per-vertex Euclidean error in millimeters.

    Raises:
        MeshError: if the vertex counts differ.
    """
    a, b = _positions(pred), _positions(truth)
    if a.shape != b.shape:
        raise MeshError(f"prediction has {a.shape[0]} vertices, ground truth {b.shape[0]}")
    if a.shape[0] == 0:
        return 0.0
    return float(np.linalg.norm(a - b, axis=1).mean() * 1000.0)


def _require(reports: Sequence[CollisionReport]) -> None:
    if not reports:
        raise ValueError("metrics need at least one collision report")


def vfcp(reports: Sequence[CollisionReport]) -> float:
    """Percentage of garment vertices inside the body over the whole set."""
    _require(reports)
    total = sum(report.vertex_count for report in reports)
    inside = sum(report.penetrating_vertices.size for report in reports)
    return 100.0 * inside / total if total else 0.0


def cfmp(reports: Sequence[CollisionReport]) -> float:
    """Percentage of garments free of VF and EE collisions."""
    _require(reports)
    return 100.0 * sum(report.collision_free for report in reports) / len(reports)


def avg_contacts(reports: Sequence[CollisionReport], contact: ContactType) -> float:
    """Mean number of colliding garment triangles of one contact type per frame."""
    _require(reports)
    return float(np.mean([report.triangles(contact).size for report in reports]))


def avg_vf(reports: Sequence[CollisionReport]) -> float:
    return avg_contacts(reports, ContactType.VF)


def avg_ee(reports: Sequence[CollisionReport]) -> float:
    return avg_contacts(reports, ContactType.EE)


def penetration_energy(garment, engine: SdfEngine) -> float:
    """Sum of f^2 over penetrating vertices, m^2."""
    points = _positions(garment)
    if points.shape[0] == 0:
        return 0.0
    values = engine.evaluate(points).values
    return float(np.sum(values[values < 0] ** 2))


def energy_histogram(energies: Sequence[float], bins: int = DEFAULT_HISTOGRAM_BINS,
                     upper: Optional[float] = None) -> Tuple[List[float], List[int]]:
    """Uniform bins over [0, upper] (upper defaults to the largest energy)."""
    energies = np.asarray(energies, dtype=np.float64)
    if upper is None:
        upper = float(energies.max()) if energies.size else 0.0
    if upper <= 0:
        upper = 1.0
    counts, edges = np.histogram(np.clip(energies, 0.0, upper), bins=bins, range=(0.0, upper))
    return edges.tolist(), counts.astype(int).tolist()


def collision_region(mesh: TriMesh, vertices: np.ndarray) -> np.ndarray:
    """The given vertices plus their one-ring neighbours, sorted."""
    vertices = np.asarray(vertices, dtype=np.int64).reshape(-1)
    if vertices.size == 0:
        return vertices
    rings = [mesh.one_ring[v] for v in vertices.tolist()]
    return np.unique(np.concatenate([vertices] + rings))


def local_laplacian_error(pred, truth, region: np.ndarray, mesh: TriMesh) -> Optional[float]:
    """
    Mean |L(pred) - L(truth)| over the region, millimeters; None for an empty region.

    Args:
        pred, truth: positions (or meshes) sharing the topology of `mesh`.
        region (np.ndarray): vertex indices, typically `collision_region` of the initially colliding vertices.
        mesh (TriMesh): the shared topology.
    """
    region = np.asarray(region, dtype=np.int64).reshape(-1)
    if region.size == 0:
        return None
    diff = uniform_laplacian(mesh, _positions(pred)) - uniform_laplacian(mesh, _positions(truth))
    return float(np.linalg.norm(diff[region], axis=1).mean() * 1000.0)


@dataclass
class MetricsReport:
    """
    Aggregated metrics for one method/setting over a frame set.

    Attributes:
        method, sdf_mode (str): row labels.
        mpve_mm, vfcp_pct, cfmp_pct, avg_vf, avg_ee (float): accuracy and collision metrics.
        pen_energy (float): mean penetration energy per frame.
        lap_err_mm (float, optional): local Laplacian error; None when no frame had a collision region.
        t_sdf_ms, t_refu_ms, t_backbone_ms (float, optional): per-frame stage timings.
        histogram (HistogramRecord, optional): penetration-energy histogram.
        config_hash (str), seed (int): provenance of the row.
    """
    method: str
    sdf_mode: str
    mpve_mm: float
    vfcp_pct: float
    cfmp_pct: float
    avg_vf: float
    avg_ee: float
    pen_energy: float
    lap_err_mm: Optional[float] = None
    t_sdf_ms: Optional[float] = None
    t_refu_ms: Optional[float] = None
    t_backbone_ms: Optional[float] = None
    histogram: Optional[HistogramRecord] = None
    config_hash: str = ""
    seed: int = 0
    energies: List[float] = field(default_factory=list, repr=False)

    def to_row(self) -> MetricsRow:
        return MetricsRow(method=self.method, sdf_mode=self.sdf_mode, MPVE_mm=self.mpve_mm, VFCP_pct=self.vfcp_pct,
                          CFMP_pct=self.cfmp_pct, avg_VF=self.avg_vf, avg_EE=self.avg_ee, pen_energy=self.pen_energy,
                          lap_err_mm=self.lap_err_mm, t_sdf_ms=self.t_sdf_ms, t_refu_ms=self.t_refu_ms,
                          t_backbone_ms=self.t_backbone_ms, config_hash=self.config_hash, seed=self.seed)


def summarize(method: str, sdf_mode: str, preds: Sequence[np.ndarray], truths: Sequence[np.ndarray],
              reports: Sequence[CollisionReport], laplacian_errors: Sequence[Optional[float]] = (),
              bins: int = DEFAULT_HISTOGRAM_BINS) -> MetricsReport:
    """Aggregate per-frame results into one MetricsReport (timings and provenance are filled by the caller)."""
    _require(reports)
    energies = [report.energy for report in reports]
    edges, counts = energy_histogram(energies, bins)
    lap = [value for value in laplacian_errors if value is not None]
    return MetricsReport(
        method=method, sdf_mode=sdf_mode,
        mpve_mm=float(np.mean([mpve(p, t) for p, t in zip(preds, truths)])),
        vfcp_pct=vfcp(reports), cfmp_pct=cfmp(reports), avg_vf=avg_vf(reports), avg_ee=avg_ee(reports),
        pen_energy=float(np.mean(energies)), lap_err_mm=float(np.mean(lap)) if lap else None,
        histogram=HistogramRecord(method=method, sdf_mode=sdf_mode, bin_edges=edges, counts=counts),
        energies=energies,
    )


def distance_buckets(distances: Sequence[float], reports: Sequence[CollisionReport],
                     names: Sequence[str] = ("near", "far")) -> List[DistanceBucketRecord]:
    """
    Split frames into equally sized groups by distance to the training set and report
    VFCP / CFMP per group.
    """
    distances = np.asarray(distances, dtype=np.float64)
    if distances.size != len(reports):
        raise ValueError(f"{distances.size} distances for {len(reports)} reports")
    order = np.argsort(distances, kind="stable")
    records: List[DistanceBucketRecord] = []
    for name, chunk in zip(names, np.array_split(order, len(names))):
        if chunk.size == 0:
            continue
        subset = [reports[i] for i in chunk.tolist()]
        records.append(DistanceBucketRecord(bucket=name, frames=int(chunk.size),
                                            min_distance=float(distances[chunk].min()),
                                            max_distance=float(distances[chunk].max()),
                                            VFCP_pct=vfcp(subset), CFMP_pct=cfmp(subset)))
    return records


def _cell(value) -> str:
    if value is None:
        return ""
    if isinstance(value, float):
        return f"{value:.10g}"
    return str(value)


def write_rows_csv(rows: Sequence[MetricsRow], path: PathLike) -> None:
    """Metrics rows in the fixed column order; None becomes an empty cell."""
    with open(path, "w", encoding="utf-8", newline="") as file:
        writer = csv.writer(file, lineterminator="\n")
        writer.writerow(METRICS_COLUMNS)
        for row in rows:
            writer.writerow([_cell(row[column]) for column in METRICS_COLUMNS])


def write_metrics_csv(reports: Sequence[MetricsReport], path: PathLike) -> None:
    write_rows_csv([report.to_row() for report in reports], path)


def write_json(payload, path: PathLike) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as file:
        json.dump(payload, file, indent=2, sort_keys=True)
        file.write("\n")


def write_metrics_json(reports: Sequence[MetricsReport], path: PathLike, notes: Sequence[str] = ()) -> None:
    """Rows in CSV column order plus free-text notes about how they were produced."""
    write_json({"notes": list(notes), "rows": [dict(report.to_row()) for report in reports]}, path)


def histograms_payload(reports: Sequence[MetricsReport]) -> List[Dict]:
    return [dict(report.histogram) for report in reports if report.histogram is not None]
