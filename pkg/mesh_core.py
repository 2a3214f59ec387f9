"""
Triangle meshes for bodies and garments: the TriMesh data model, OBJ reading and
writing, adjacency, and the uniform (one-ring mean) Laplacian.

OBJ is the only mesh format. Only `v` and `f` records are interpreted, faces must be
triangles, indices are 1-based. Coordinates are written with 17 significant digits so
a save/load round trip is bit-exact in float64.
"""
from dataclasses import dataclass
from functools import cached_property
from pathlib import Path
from typing import Dict, List, Tuple, Union

import numpy as np
import scipy.sparse

from logger import get_logger

logger = get_logger("mesh")

DEGENERATE_AREA: float = 1e-20
PathLike = Union[str, Path]


class MeshError(ValueError):
    """Raised when a mesh violates the triangle mesh invariants."""


class ObjParseError(MeshError):
    """Raised when an OBJ file cannot be parsed. Carries the 1-based line number."""

    def __init__(self, message: str, line_number: int) -> None:
        super().__init__(f"line {line_number}: {message}")
        self.line_number = line_number


@dataclass(frozen=True, eq=False)
class TriMesh:
    """
    Indexed triangle mesh. Immutable after construction: both arrays are copied and
    marked read-only, and derived adjacency is computed lazily and cached.

    Attributes:
        vertices (np.ndarray): (N, 3) float64 positions in meters.
        faces (np.ndarray): (F, 3) int64 vertex indices, 0-based.
    """
    vertices: np.ndarray
    faces: np.ndarray

    def __post_init__(self) -> None:
        vertices = np.array(self.vertices, dtype=np.float64).reshape(-1, 3)
        faces = np.array(self.faces, dtype=np.int64).reshape(-1, 3)
        if faces.size:
            if faces.min() < 0 or faces.max() >= len(vertices):
                bad = int(np.argmax(((faces < 0) | (faces >= len(vertices))).any(axis=1)))
                raise MeshError(
                    f"face {bad} {faces[bad].tolist()} references a vertex outside 0..{len(vertices) - 1}")
            repeated = (faces[:, 0] == faces[:, 1]) | (faces[:, 1] == faces[:, 2]) | (faces[:, 0] == faces[:, 2])
            if repeated.any():
                bad = int(np.argmax(repeated))
                raise MeshError(f"face {bad} {faces[bad].tolist()} repeats a vertex index")
        vertices.setflags(write=False)
        faces.setflags(write=False)
        object.__setattr__(self, "vertices", vertices)
        object.__setattr__(self, "faces", faces)

    @property
    def vertex_count(self) -> int:
        return int(self.vertices.shape[0])

    @property
    def face_count(self) -> int:
        return int(self.faces.shape[0])

    def with_vertices(self, vertices: np.ndarray) -> "TriMesh":
        """Same topology, new positions."""
        return TriMesh(vertices, self.faces)

    @cached_property
    def _edge_data(self) -> Tuple[np.ndarray, np.ndarray]:
        if self.face_count == 0:
            return np.empty((0, 2), dtype=np.int64), np.empty((0, 3), dtype=np.int64)
        half = self.faces[:, [0, 1, 1, 2, 2, 0]].reshape(-1, 2)
        undirected = np.sort(half, axis=1)
        edges, inverse = np.unique(undirected, axis=0, return_inverse=True)
        return edges.astype(np.int64), np.asarray(inverse).reshape(-1, 3).astype(np.int64)

    @property
    def edges(self) -> np.ndarray:
        """(E, 2) unique undirected edges, each stored once as (low, high), sorted."""
        return self._edge_data[0]

    @property
    def face_edges(self) -> np.ndarray:
        """(F, 3) edge indices of (v0, v1), (v1, v2), (v2, v0) for every face."""
        return self._edge_data[1]

    @cached_property
    def one_ring(self) -> List[np.ndarray]:
        """Sorted neighbour indices of every vertex."""
        return one_ring_from_edges(self.vertex_count, self.edges)

    @cached_property
    def laplacian(self) -> scipy.sparse.csr_matrix:
        """Uniform Laplacian as a sparse matrix, see `edge_laplacian`."""
        return edge_laplacian(self.vertex_count, self.edges)

    def face_areas(self) -> np.ndarray:
        tri = self.vertices[self.faces]
        return 0.5 * np.linalg.norm(np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0]), axis=1)

    def face_normals(self) -> np.ndarray:
        """Unit face normals following the right-hand rule; zero for degenerate faces."""
        tri = self.vertices[self.faces]
        normals = np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0])
        lengths = np.linalg.norm(normals, axis=1, keepdims=True)
        return np.divide(normals, lengths, out=np.zeros_like(normals), where=lengths > 0)

    def corner_angles(self) -> np.ndarray:
        """(F, 3) interior angle at each face corner."""
        tri = self.vertices[self.faces]
        angles = np.empty((self.face_count, 3))
        for corner in range(3):
            e1 = tri[:, (corner + 1) % 3] - tri[:, corner]
            e2 = tri[:, (corner + 2) % 3] - tri[:, corner]
            angles[:, corner] = np.arctan2(np.linalg.norm(np.cross(e1, e2), axis=1), np.einsum("ij,ij->i", e1, e2))
        return angles

    def vertex_normals(self) -> np.ndarray:
        """Angle-weighted vertex normals (unit; zero for isolated vertices)."""
        acc = np.zeros((self.vertex_count, 3))
        normals = self.face_normals()
        angles = self.corner_angles()
        for corner in range(3):
            np.add.at(acc, self.faces[:, corner], normals * angles[:, corner, None])
        lengths = np.linalg.norm(acc, axis=1, keepdims=True)
        return np.divide(acc, lengths, out=np.zeros_like(acc), where=lengths > 0)

    def degenerate_faces(self) -> np.ndarray:
        return np.flatnonzero(self.face_areas() <= DEGENERATE_AREA)

    def isolated_vertices(self) -> np.ndarray:
        degree = np.bincount(self.edges.reshape(-1), minlength=self.vertex_count)
        return np.flatnonzero(degree == 0)

    def is_watertight(self) -> bool:
        """Every directed half-edge is unique and has its opposite twin (closed, consistently oriented)."""
        if self.face_count == 0:
            return False
        half = self.faces[:, [0, 1, 1, 2, 2, 0]].reshape(-1, 2)
        n = self.vertex_count
        codes = half[:, 0] * n + half[:, 1]
        twins = half[:, 1] * n + half[:, 0]
        if np.unique(codes).size != codes.size:
            return False
        return bool(np.isin(twins, codes).all())

    def bounding_radius(self) -> float:
        """Largest distance from the bounding-box center to a vertex."""
        if self.vertex_count == 0:
            return 0.0
        center = 0.5 * (self.vertices.min(axis=0) + self.vertices.max(axis=0))
        return float(np.linalg.norm(self.vertices - center, axis=1).max())


@dataclass(frozen=True, eq=False)
class BodyState:
    """
    Body and garment parameters of one frame plus the resolved body mesh.

    Attributes:
        shape (np.ndarray): shape parameters (beta).
        pose (np.ndarray): pose parameters (theta).
        style (np.ndarray): garment style parameters (gamma).
        mesh (TriMesh): watertight body mesh resolved from shape and pose.
    """
    shape: np.ndarray
    pose: np.ndarray
    style: np.ndarray
    mesh: TriMesh

    def conditioning(self) -> np.ndarray:
        """(shape, pose) concatenated: the input the learned body SDF is conditioned on."""
        return np.concatenate([np.ravel(self.shape), np.ravel(self.pose)]).astype(np.float64)

    def parameters(self) -> np.ndarray:
        """(shape, pose, style) concatenated: the backbone input and the global latent input."""
        return np.concatenate([np.ravel(self.shape), np.ravel(self.pose), np.ravel(self.style)]).astype(np.float64)


def one_ring_from_edges(vertex_count: int, edges: np.ndarray) -> List[np.ndarray]:
    """Neighbour lists from an undirected edge list."""
    if len(edges) == 0:
        return [np.empty(0, dtype=np.int64) for _ in range(vertex_count)]
    both = np.concatenate([edges, edges[:, ::-1]])
    both = both[np.lexsort((both[:, 1], both[:, 0]))]
    counts = np.bincount(both[:, 0], minlength=vertex_count)
    return np.split(both[:, 1], np.cumsum(counts)[:-1])


def edge_laplacian(vertex_count: int, edges: np.ndarray) -> scipy.sparse.csr_matrix:
    """
    Uniform Laplacian L with (L @ u)_i = mean over neighbours j of (u_j - u_i).
    Rows of isolated vertices are zero.
    """
    edges = np.asarray(edges, dtype=np.int64).reshape(-1, 2)
    rows = np.concatenate([edges[:, 0], edges[:, 1]])
    cols = np.concatenate([edges[:, 1], edges[:, 0]])
    adjacency = scipy.sparse.csr_matrix(
        (np.ones(rows.size), (rows, cols)), shape=(vertex_count, vertex_count))
    degree = np.asarray(adjacency.sum(axis=1)).reshape(-1)
    inv_degree = np.divide(1.0, degree, out=np.zeros_like(degree), where=degree > 0)
    diagonal = np.where(degree > 0, -1.0, 0.0)
    return (scipy.sparse.diags(inv_degree) @ adjacency + scipy.sparse.diags(diagonal)).tocsr()


def laplacian_matrix(mesh: TriMesh) -> scipy.sparse.csr_matrix:
    """Sparse L with `L @ values == uniform_laplacian(mesh, values)`."""
    return mesh.laplacian


def uniform_laplacian(mesh: TriMesh, values: np.ndarray) -> np.ndarray:
    """
    Per-vertex mean over the one-ring of (value_j - value_i).

    Args:
        mesh (TriMesh): mesh providing the adjacency.
        values (np.ndarray): (N, 3) per-vertex field.

    Returns:
        np.ndarray: (N, 3) Laplacian field; isolated vertices get the zero vector.
    """
    values = np.asarray(values, dtype=np.float64)
    if values.shape[0] != mesh.vertex_count:
        raise MeshError(f"field has {values.shape[0]} rows, mesh has {mesh.vertex_count} vertices")
    isolated = mesh.isolated_vertices()
    if isolated.size:
        logger.debug("Laplacian on mesh with %d isolated vertices, set to zero", isolated.size)
    return np.asarray(mesh.laplacian @ values)


def load_obj(path: PathLike) -> TriMesh:
    """
    Read an ASCII OBJ file. Vertex order is preserved.

    Args:
        path: OBJ file path.

    Returns:
        TriMesh: the parsed mesh.

    Raises:
        ObjParseError: malformed record, non-triangle face, or out-of-range index.
    """
    vertices: List[List[float]] = []
    faces: List[List[int]] = []
    face_lines: List[int] = []
    with open(path, "r", encoding="utf-8") as file:
        for line_number, line in enumerate(file, start=1):
            tokens = line.split()
            if not tokens or tokens[0].startswith("#"):
                continue
            if tokens[0] == "v":
                if len(tokens) < 4:
                    raise ObjParseError("vertex record needs three coordinates", line_number)
                try:
                    vertices.append([float(token) for token in tokens[1:4]])
                except ValueError:
                    raise ObjParseError(f"invalid coordinate in {line.strip()!r}", line_number) from None
            elif tokens[0] == "f":
                if len(tokens) != 4:
                    raise ObjParseError(f"only triangles are supported, got {len(tokens) - 1} indices", line_number)
                try:
                    index = [int(token.split("/")[0]) for token in tokens[1:]]
                except ValueError:
                    raise ObjParseError(f"invalid face index in {line.strip()!r}", line_number) from None
                if len(set(index)) != 3:
                    raise ObjParseError(f"face {index} repeats a vertex index", line_number)
                faces.append(index)
                face_lines.append(line_number)

    for index, line_number in zip(faces, face_lines):
        for value in index:
            if value < 1 or value > len(vertices):
                raise ObjParseError(f"face index {value} out of range 1..{len(vertices)}", line_number)

    face_array = np.array(faces, dtype=np.int64).reshape(-1, 3) - 1
    mesh = TriMesh(np.array(vertices, dtype=np.float64).reshape(-1, 3), face_array)
    degenerate = mesh.degenerate_faces()
    if degenerate.size:
        logger.warning("Mesh %s has %d degenerate faces", path, degenerate.size,
                       extra={"fields": {"degenerate_faces": degenerate[:20].tolist()}})
    return mesh


def save_obj(mesh: TriMesh, path: PathLike) -> None:
    """
    Write `mesh` as ASCII OBJ with 17 significant digits per coordinate.

    Raises:
        OSError: on I/O failure.
    """
    lines = [f"v {x:.17g} {y:.17g} {z:.17g}\n" for x, y, z in mesh.vertices.tolist()]
    lines += [f"f {a + 1} {b + 1} {c + 1}\n" for a, b, c in mesh.faces.tolist()]
    with open(path, "w", encoding="utf-8", newline="\n") as file:
        file.writelines(lines)


def submesh(mesh: TriMesh, vertex_mask: np.ndarray) -> Tuple[TriMesh, np.ndarray]:
    """
    Faces whose three vertices are all selected, reindexed.

    Returns:
        (TriMesh, np.ndarray): the cut mesh and, for each of its vertices, the index in `mesh`.
    """
    vertex_mask = np.asarray(vertex_mask, dtype=bool)
    keep = vertex_mask[mesh.faces].all(axis=1)
    kept_vertices = np.flatnonzero(vertex_mask)
    remap = np.full(mesh.vertex_count, -1, dtype=np.int64)
    remap[kept_vertices] = np.arange(kept_vertices.size)
    return TriMesh(mesh.vertices[kept_vertices], remap[mesh.faces[keep]]), kept_vertices


def box(half_extents=(0.5, 0.5, 0.5), center=(0.0, 0.0, 0.0)) -> TriMesh:
    """Axis-aligned box with outward-facing triangles (12 faces)."""
    hx, hy, hz = half_extents
    corners = np.array([
        [-hx, -hy, -hz], [hx, -hy, -hz], [hx, hy, -hz], [-hx, hy, -hz],
        [-hx, -hy, hz], [hx, -hy, hz], [hx, hy, hz], [-hx, hy, hz],
    ]) + np.asarray(center, dtype=np.float64)
    faces = [
        [0, 2, 1], [0, 3, 2],  # -z
        [4, 5, 6], [4, 6, 7],  # +z
        [0, 1, 5], [0, 5, 4],  # -y
        [3, 7, 6], [3, 6, 2],  # +y
        [0, 4, 7], [0, 7, 3],  # -x
        [1, 2, 6], [1, 6, 5],  # +x
    ]
    return TriMesh(corners, faces)


def icosphere(subdivisions: int = 2, radius: float = 1.0, center=(0.0, 0.0, 0.0)) -> TriMesh:
    """Subdivided icosahedron projected to a sphere; 20 * 4**subdivisions faces."""
    t = (1.0 + 5.0 ** 0.5) / 2.0
    vertices = [
        [-1, t, 0], [1, t, 0], [-1, -t, 0], [1, -t, 0],
        [0, -1, t], [0, 1, t], [0, -1, -t], [0, 1, -t],
        [t, 0, -1], [t, 0, 1], [-t, 0, -1], [-t, 0, 1],
    ]
    faces = [
        [0, 11, 5], [0, 5, 1], [0, 1, 7], [0, 7, 10], [0, 10, 11],
        [1, 5, 9], [5, 11, 4], [11, 10, 2], [10, 7, 6], [7, 1, 8],
        [3, 9, 4], [3, 4, 2], [3, 2, 6], [3, 6, 8], [3, 8, 9],
        [4, 9, 5], [2, 4, 11], [6, 2, 10], [8, 6, 7], [9, 8, 1],
    ]
    points = [np.array(v, dtype=np.float64) / np.linalg.norm(v) for v in vertices]
    for _ in range(subdivisions):
        midpoints: Dict[Tuple[int, int], int] = {}

        def midpoint(a: int, b: int) -> int:
            key = (a, b) if a < b else (b, a)
            if key not in midpoints:
                mid = points[a] + points[b]
                points.append(mid / np.linalg.norm(mid))
                midpoints[key] = len(points) - 1
            return midpoints[key]

        refined = []
        for a, b, c in faces:
            ab, bc, ca = midpoint(a, b), midpoint(b, c), midpoint(c, a)
            refined += [[a, ab, ca], [b, bc, ab], [c, ca, bc], [ab, bc, ca]]
        faces = refined
    return TriMesh(np.array(points) * radius + np.asarray(center, dtype=np.float64), faces)


def uv_sphere(rings: int = 16, segments: int = 24, radius: float = 1.0) -> TriMesh:
    """
    Latitude/longitude sphere around the z axis, outward oriented.

    Vertex 0 is the north pole, followed by `rings - 1` rings of `segments` vertices
    from north to south, and the south pole last.
    """
    if rings < 2 or segments < 3:
        raise MeshError(f"uv sphere needs rings >= 2 and segments >= 3, got {rings} x {segments}")
    polar, azimuth = np.meshgrid(np.pi * np.arange(1, rings) / rings, 2.0 * np.pi * np.arange(segments) / segments,
                                 indexing="ij")
    ring_points = np.stack([np.sin(polar) * np.cos(azimuth), np.sin(polar) * np.sin(azimuth), np.cos(polar)],
                           axis=-1).reshape(-1, 3)
    vertices = np.vstack([[0.0, 0.0, 1.0], ring_points, [0.0, 0.0, -1.0]]) * radius
    south = vertices.shape[0] - 1

    def ring(index: int) -> np.ndarray:
        return 1 + index * segments + np.arange(segments)

    first = ring(0)
    faces = [np.stack([np.zeros(segments, dtype=np.int64), first, np.roll(first, -1)], axis=1)]
    for index in range(rings - 2):
        upper, lower = ring(index), ring(index + 1)
        faces.append(np.stack([upper, lower, np.roll(lower, -1)], axis=1))
        faces.append(np.stack([upper, np.roll(lower, -1), np.roll(upper, -1)], axis=1))
    last = ring(rings - 2)
    faces.append(np.stack([np.full(segments, south), np.roll(last, -1), last], axis=1))
    return TriMesh(vertices, np.vstack(faces))
