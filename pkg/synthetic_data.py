"""
Synthetic bodies and garments.

Bodies are deformed latitude/longitude spheres: the sphere is stretched along its axis
into a tube whose radius is scaled by the shape parameters (beta) and whose upper and
lower halves are bent by the pose parameters (theta). The sphere family keeps the body
round and unposed. Garments are a band of body rings pushed out along the vertex normals
by the offset h plus a sinusoidal wrinkle driven by the style parameters (gamma), then
projected onto their target level set with the exact SDF. A frame is kept only when
both collision detectors report it clean.

Parameter vectors are laid out as (shape[3], pose[2], style[2]).
"""
import io
import json
import zipfile
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy.spatial import cKDTree

from collision_metrics import detect_intersections
from logger import get_logger
from mesh_core import BodyState, TriMesh, box, save_obj, submesh, uv_sphere
from refu_layer import GRADIENT_GUARD
from sdf_exact import ExactSdf, SdfEngine
from settings import NUM_WORKERS

logger = get_logger("data")

SHAPE_DIM: int = 3
POSE_DIM: int = 2
STYLE_DIM: int = 2
PARAMETER_BLOCKS: Tuple[Tuple[int, int], ...] = ((0, 3), (3, 5), (5, 7))

BASE_RADIUS: float = 0.15
BASE_HALF_LENGTH: float = 0.5
RADIUS_RANGE: float = 0.2
LENGTH_RANGE: float = 0.2
TAPER_RANGE: float = 0.15
MAX_BEND: float = 0.6
WRINKLE_AZIMUTH_FREQUENCY: int = 4
WRINKLE_POLAR_FREQUENCY: float = 6.0
PROJECTION_ITERATIONS: int = 8
PROJECTION_TOLERANCE: float = 1e-7
ACCEPT_TOLERANCE: float = 1e-6
NPZ_DATE = (1980, 1, 1, 0, 0, 0)

WEDGE_HALF_EXTENTS = (1.0, 2.0, 1.0)
WEDGE_ROWS = (-0.2, 0.2)
WEDGE_CLEARANCE: float = 0.02

PathLike = Union[str, Path]


class DatasetError(RuntimeError):
    """Raised when a dataset cannot be generated or read back."""


@dataclass
class DatasetSpec:
    """
    Synthetic dataset settings.

    Attributes:
        body_family (str): "capsule" (bent, tapered tube) or "sphere".
        garment_family (str): only "band" is provided.
        train_frames (int): frames in the training split.
        test_frames (int): frames in the test split; half of them are the farthest from
            the parameter centroid.
        body_rings (int): latitude rings of the body grid.
        body_segments (int): vertices per ring.
        band (Tuple[int, int]): first and one-past-last ring index of the garment band.
        garment_offset (float): h, garment distance from the body in meters.
        wrinkle_amplitude (float): largest wrinkle height, reached at style[0] = 1.
        max_attempts (int): parameter draws per frame before giving up.
    """
    body_family: str = "capsule"
    garment_family: str = "band"
    train_frames: int = 240
    test_frames: int = 40
    body_rings: int = 20
    body_segments: int = 24
    band: Tuple[int, int] = (6, 13)
    garment_offset: float = 0.01
    wrinkle_amplitude: float = 0.02
    max_attempts: int = 5

    def __post_init__(self) -> None:
        self.band = tuple(int(v) for v in self.band)

    def validate(self) -> None:
        """
        Raises:
            ValueError: on an inconsistent setting.
        """
        if self.body_family not in ("capsule", "sphere"):
            raise ValueError(f"unknown body family {self.body_family!r}")
        if self.garment_family != "band":
            raise ValueError(f"unknown garment family {self.garment_family!r}")
        if self.train_frames < 1 or self.test_frames < 1:
            raise ValueError(f"need at least one train and one test frame, got {self.train_frames}/{self.test_frames}")
        start, stop = self.band
        if not 0 <= start < stop - 1 < self.body_rings - 1:
            raise ValueError(f"band {self.band} does not fit {self.body_rings - 1} body rings")
        if self.garment_offset <= 0 or self.wrinkle_amplitude < 0:
            raise ValueError(f"invalid offset {self.garment_offset} or wrinkle amplitude {self.wrinkle_amplitude}")
        if self.max_attempts < 1:
            raise ValueError("max_attempts must be positive")


@dataclass(frozen=True, eq=False)
class BodyTemplate:
    """Unit sphere grid shared by every body plus the garment band cut out of it."""
    sphere: TriMesh
    band_vertices: np.ndarray
    garment_faces: np.ndarray
    polar: np.ndarray
    azimuth: np.ndarray


@dataclass(eq=False)
class GarmentFrame:
    """
    One frame: the body, the collision-free ground-truth garment, and its index in the
    generated sequence.
    """
    index: int
    body: BodyState
    garment: TriMesh

    @property
    def parameters(self) -> np.ndarray:
        """Backbone input features (shape, pose, style)."""
        return self.body.parameters()


@dataclass(eq=False)
class SyntheticDataset:
    """
    Train/test frames plus, for every test frame, the distance to the nearest training
    frame in block-normalized parameter space.
    """
    spec: DatasetSpec
    seed: int
    train: List[GarmentFrame]
    test: List[GarmentFrame]
    test_distances: np.ndarray
    band_vertices: np.ndarray = field(repr=False)

    @property
    def garment_faces(self) -> np.ndarray:
        return (self.train or self.test)[0].garment.faces

    def sdf_pairs(self) -> List[Tuple[BodyState, TriMesh]]:
        """(body, garment) pairs of the training split, the learned SDF's training set."""
        return [(frame.body, frame.garment) for frame in self.train]


def body_template(spec: DatasetSpec) -> BodyTemplate:
    sphere = uv_sphere(spec.body_rings, spec.body_segments)
    start, stop = spec.band
    mask = np.zeros(sphere.vertex_count, dtype=bool)
    mask[1 + start * spec.body_segments:1 + stop * spec.body_segments] = True
    band, kept = submesh(sphere, mask)
    polar = np.arccos(np.clip(sphere.vertices[:, 2], -1.0, 1.0))
    azimuth = np.arctan2(sphere.vertices[:, 1], sphere.vertices[:, 0])
    return BodyTemplate(sphere, kept, band.faces, polar, azimuth)


def body_vertices(template: BodyTemplate, shape: np.ndarray, pose: np.ndarray, family: str = "capsule") -> np.ndarray:
    """
    Deform the unit sphere grid into a body.

    shape[0] scales the radius, shape[1] the half length and shape[2] tapers the radius
    along the axis; pose[0] and pose[1] are the bend angles (radians) of the upper and
    lower half. The sphere family uses shape[0] only.
    """
    p = template.sphere.vertices
    radius = BASE_RADIUS * (1.0 + RADIUS_RANGE * shape[0])
    if family == "sphere":
        half_length, taper, angles = radius, 0.0, (0.0, 0.0)
    else:
        half_length = BASE_HALF_LENGTH * (1.0 + LENGTH_RANGE * shape[1])
        taper, angles = TAPER_RANGE * shape[2], (pose[0], pose[1])
    axial_unit = p[:, 2]
    s = axial_unit * half_length
    section = radius * (1.0 + taper * axial_unit)
    rx, ry = p[:, 0] * section, p[:, 1] * section
    phi = np.where(s >= 0, angles[0], angles[1]) * axial_unit
    # spine point of an arc with curvature phi / s, written without dividing by phi
    spine_x = s * 0.5 * phi * np.sinc(phi / (2.0 * np.pi)) ** 2
    spine_z = s * np.sinc(phi / np.pi)
    return np.stack([spine_x + rx * np.cos(phi), ry, spine_z - rx * np.sin(phi)], axis=1)


def draw_parameters(spec: DatasetSpec, rng: np.random.Generator) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    shape = rng.uniform(-1.0, 1.0, SHAPE_DIM)
    pose = rng.uniform(-MAX_BEND, MAX_BEND, POSE_DIM)
    style = rng.uniform(0.0, 1.0, STYLE_DIM)
    if spec.body_family == "sphere":
        shape[1:] = 0.0
        pose[:] = 0.0
    return shape, pose, style


def make_body(template: BodyTemplate, shape: np.ndarray, pose: np.ndarray, style: np.ndarray,
              family: str = "capsule") -> BodyState:
    mesh = TriMesh(body_vertices(template, shape, pose, family), template.sphere.faces)
    return BodyState(np.asarray(shape, dtype=np.float64), np.asarray(pose, dtype=np.float64),
                     np.asarray(style, dtype=np.float64), mesh)


def garment_targets(template: BodyTemplate, style: np.ndarray, spec: DatasetSpec) -> np.ndarray:
    """Target SDF value of every band vertex: h plus a wrinkle in [0, amplitude * style[0]]."""
    band = template.band_vertices
    phase = WRINKLE_AZIMUTH_FREQUENCY * template.azimuth[band] + WRINKLE_POLAR_FREQUENCY * template.polar[band]
    wave = 0.5 * (1.0 + np.sin(phase + 2.0 * np.pi * style[1]))
    return spec.garment_offset + spec.wrinkle_amplitude * style[0] * wave


def project_to_level(points: np.ndarray, engine: SdfEngine, targets: np.ndarray,
                     iterations: int = PROJECTION_ITERATIONS,
                     tolerance: float = PROJECTION_TOLERANCE) -> Tuple[np.ndarray, float]:
    """
    Move every point onto its target level set by repeating y += (target - f(y)) grad f / |grad f|^2.

    Returns:
        (np.ndarray, float): projected points and the final max |f - target|.
    """
    projected = np.array(points, dtype=np.float64).reshape(-1, 3)
    targets = np.broadcast_to(np.asarray(targets, dtype=np.float64), (projected.shape[0],))
    for _ in range(iterations):
        query = engine.evaluate(projected)
        residual = float(np.abs(query.values - targets).max())
        if residual <= tolerance:
            return projected, residual
        norms_sq = np.einsum("ij,ij->i", query.gradients, query.gradients)
        usable = norms_sq >= GRADIENT_GUARD ** 2
        step = np.divide(targets - query.values, norms_sq, out=np.zeros_like(norms_sq), where=usable)
        projected += step[:, None] * query.gradients
    return projected, float(np.abs(engine.evaluate(projected).values - targets).max())


def garment_for_body(template: BodyTemplate, body: BodyState, spec: DatasetSpec,
                     engine: Optional[ExactSdf] = None) -> Tuple[TriMesh, float]:
    """Offset band with wrinkles, projected onto its level set. Returns the mesh and the projection residual."""
    engine = engine or ExactSdf(body.mesh)
    band = template.band_vertices
    targets = garment_targets(template, body.style, spec)
    start = body.mesh.vertices[band] + targets[:, None] * body.mesh.vertex_normals()[band]
    positions, residual = project_to_level(start, engine, targets)
    return TriMesh(positions, template.garment_faces), residual


def generate_frame(template: BodyTemplate, spec: DatasetSpec, seed: int, index: int) -> GarmentFrame:
    """
    Draw parameters for frame `index` from its own sub-stream until the frame passes
    projection and both collision checks.

    Raises:
        DatasetError: if `max_attempts` draws all fail.
    """
    rng = np.random.default_rng([seed, 10, index])
    for attempt in range(spec.max_attempts):
        shape, pose, style = draw_parameters(spec, rng)
        body = make_body(template, shape, pose, style, spec.body_family)
        engine = ExactSdf(body.mesh)
        garment, residual = garment_for_body(template, body, spec, engine)
        if residual > ACCEPT_TOLERANCE:
            logger.warning("Frame %d attempt %d: projection residual %.3g, regenerating", index, attempt, residual)
            continue
        report = detect_intersections(garment, body.mesh, engine)
        if not report.collision_free:
            logger.warning("Frame %d attempt %d: ground truth collides (%d VF, %d EE triangles), regenerating",
                           index, attempt, report.vf_triangles.size, report.ee_triangles.size)
            continue
        return GarmentFrame(index, body, garment)
    raise DatasetError(f"frame {index}: no collision-free garment after {spec.max_attempts} attempts")


def normalize_blocks(parameters: np.ndarray, blocks: Sequence[Tuple[int, int]] = PARAMETER_BLOCKS) -> np.ndarray:
    """Center the parameters and scale each block (shape, pose, style) to unit total variance."""
    parameters = np.asarray(parameters, dtype=np.float64)
    centered = parameters - parameters.mean(axis=0)
    for lo, hi in blocks:
        spread = float(np.sqrt(centered[:, lo:hi].var(axis=0).sum()))
        if spread > 0:
            centered[:, lo:hi] /= spread
    return centered


def split_by_distance(parameters: np.ndarray, test_count: int,
                      rng: np.random.Generator) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """
    Pick test frames so the split holds near and far samples: the `test_count // 2`
    frames farthest from the centroid plus a random draw from the rest.

    Returns:
        (train indices, test indices, distance of each test frame to its nearest training frame)
    """
    normalized = normalize_blocks(parameters)
    count = normalized.shape[0]
    if not 0 < test_count < count:
        raise DatasetError(f"cannot take {test_count} test frames out of {count}")
    radius = np.linalg.norm(normalized, axis=1)
    order = np.argsort(-radius, kind="stable")
    far = order[:test_count // 2]
    rest = order[test_count // 2:]
    near = rng.choice(rest, size=test_count - far.size, replace=False)
    test = np.sort(np.concatenate([far, near]))
    train = np.setdiff1d(np.arange(count), test)
    distances, _ = cKDTree(normalized[train]).query(normalized[test])
    return train, test, np.asarray(distances, dtype=np.float64)


def gen_synthetic_dataset(spec: DatasetSpec, seed: int, workers: int = NUM_WORKERS) -> SyntheticDataset:
    """
    Generate all frames and split them.

    Raises:
        DatasetError: if a frame cannot be made collision-free.
    """
    spec.validate()
    template = body_template(spec)
    total = spec.train_frames + spec.test_frames
    with ThreadPoolExecutor(max_workers=workers) as pool:
        frames = list(pool.map(lambda index: generate_frame(template, spec, seed, index), range(total)))
    parameters = np.stack([frame.parameters for frame in frames])
    train, test, distances = split_by_distance(parameters, spec.test_frames, np.random.default_rng([seed, 11]))
    logger.info("Generated synthetic dataset", extra={"fields": {
        "train_frames": int(train.size), "test_frames": int(test.size), "seed": seed,
        "garment_vertices": int(template.band_vertices.size), "body_vertices": template.sphere.vertex_count}})
    return SyntheticDataset(spec, seed, [frames[i] for i in train], [frames[i] for i in test], distances,
                            template.band_vertices)


def _write_npz(path: PathLike, arrays: Dict[str, np.ndarray]) -> None:
    with zipfile.ZipFile(path, "w", compression=zipfile.ZIP_STORED) as archive:
        for name in sorted(arrays):
            buffer = io.BytesIO()
            np.lib.format.write_array(buffer, np.ascontiguousarray(arrays[name]), allow_pickle=False)
            archive.writestr(zipfile.ZipInfo(f"{name}.npy", date_time=NPZ_DATE), buffer.getvalue())


def save_dataset(dataset: SyntheticDataset, path: PathLike) -> None:
    """Write the dataset as an .npz archive; the same dataset always gives the same bytes."""
    frames = dataset.train + dataset.test
    spec_json = json.dumps({"spec": asdict(dataset.spec), "seed": dataset.seed}, sort_keys=True)
    _write_npz(path, {
        "index": np.array([frame.index for frame in frames], dtype=np.int64),
        "shape": np.stack([frame.body.shape for frame in frames]),
        "pose": np.stack([frame.body.pose for frame in frames]),
        "style": np.stack([frame.body.style for frame in frames]),
        "body": np.stack([frame.body.mesh.vertices for frame in frames]),
        "garment": np.stack([frame.garment.vertices for frame in frames]),
        "body_faces": frames[0].body.mesh.faces,
        "garment_faces": frames[0].garment.faces,
        "band_vertices": dataset.band_vertices,
        "is_test": np.arange(len(frames)) >= len(dataset.train),
        "test_distances": dataset.test_distances,
        "spec": np.frombuffer(spec_json.encode("utf-8"), dtype=np.uint8),
    })


def load_dataset(path: PathLike) -> SyntheticDataset:
    """
    Raises:
        DatasetError: if the archive is missing entries.
    """
    try:
        with np.load(path, allow_pickle=False) as archive:
            data = {name: archive[name] for name in archive.files}
        meta = json.loads(data["spec"].tobytes().decode("utf-8"))
        spec = DatasetSpec(**meta["spec"])
        frames = []
        for row in range(data["index"].size):
            body = BodyState(data["shape"][row], data["pose"][row], data["style"][row],
                             TriMesh(data["body"][row], data["body_faces"]))
            frames.append(GarmentFrame(int(data["index"][row]), body, TriMesh(data["garment"][row],
                                                                              data["garment_faces"])))
        is_test = data["is_test"]
    except (KeyError, TypeError, ValueError) as error:
        raise DatasetError(f"{path} is not a dataset archive: {error}") from error
    train = [frame for frame, test in zip(frames, is_test) if not test]
    test = [frame for frame, test in zip(frames, is_test) if test]
    return SyntheticDataset(spec, int(meta["seed"]), train, test, data["test_distances"], data["band_vertices"])


def export_obj_frames(dataset: SyntheticDataset, out_dir: PathLike, count: int = 2) -> List[Path]:
    """Write body and garment OBJs of the first `count` frames of each split."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    for split, frames in (("train", dataset.train), ("test", dataset.test)):
        for frame in frames[:count]:
            for kind, mesh in (("body", frame.body.mesh), ("garment", frame.garment)):
                path = out_dir / f"{split}_{frame.index:05d}_{kind}.obj"
                save_obj(mesh, path)
                written.append(path)
    return written


@dataclass(eq=False)
class WedgeScene:
    """
    Strip of garment near a box edge. Column p lies above the top face, column i just
    inside the box under the top face, column q outside the side face and below the
    top. Moving i onto the top face leaves the i-q triangles crossing the side face.

    Attributes:
        body (TriMesh): box with half extents (1, 2, 1).
        garment (TriMesh): six vertices (p, i, q at y = -0.2 and 0.2), four triangles.
        target (np.ndarray): (6, 3) collision-free positions with i lifted above the edge.
        parameters (np.ndarray): (depth of i, extra distance of i to the side face, height of q).
    """
    body: TriMesh
    garment: TriMesh
    target: np.ndarray
    parameters: np.ndarray


def wedge_scene(depth: float = 0.04, slack: float = 0.01, q_height: float = 0.9, q_reach: float = 1.3,
                body: Optional[TriMesh] = None) -> WedgeScene:
    """
    Build one edge-crossing scene. `depth` is the distance of column i below the top
    face (x_i = 1 - depth - slack, so the top face is the closest one).
    """
    body = body if body is not None else box(WEDGE_HALF_EXTENTS)
    x_i, z_i = 1.0 - depth - slack, 1.0 - depth
    columns = [(0.5, 1.1), (x_i, z_i), (q_reach, q_height)]
    vertices = np.array([[x, y, z] for x, z in columns for y in WEDGE_ROWS])
    faces = [[2 * c, 2 * c + 2, 2 * c + 3] for c in range(2)] + [[2 * c, 2 * c + 3, 2 * c + 1] for c in range(2)]
    weight = (1.0 - x_i) / (q_reach - x_i)
    lifted = (1.0 + WEDGE_CLEARANCE - q_height * weight) / (1.0 - weight)
    target = vertices.copy()
    target[2:4, 2] = lifted
    return WedgeScene(body, TriMesh(vertices, faces), target, np.array([depth, slack, q_height]))


def wedge_family(count: int, rng: np.random.Generator, body: Optional[TriMesh] = None) -> List[WedgeScene]:
    """Scenes with random depth, slack and q height sharing one box."""
    body = body if body is not None else box(WEDGE_HALF_EXTENTS)
    scenes = []
    for _ in range(count):
        scenes.append(wedge_scene(depth=rng.uniform(0.02, 0.05), slack=rng.uniform(0.005, 0.015),
                                  q_height=rng.uniform(0.85, 0.93), body=body))
    return scenes
