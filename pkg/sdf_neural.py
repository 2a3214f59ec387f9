"""
Learned body SDF f(x, beta, theta).

The network takes the query point concatenated with the body conditioning vector
(shape, pose) and returns one signed distance. Training samples come in five
categories (body surface, disturbed body surface, garment surface, disturbed garment
surface, uniform points in a fixed 4 m cube) and are labeled by the exact engine.

Loss: lambda_a * L_v + lambda_b * L_sg + lambda_c * L_se with
    L_v  = mean |f - s| over all samples,
    L_sg = mean ||grad f - n|| over undisturbed body-surface samples (I_S),
    L_se = mean (||grad f|| - 1)^2 over every other sample (I_E).
"""
import csv
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np
from tqdm import tqdm

from logger import get_logger
from mesh_core import BodyState, TriMesh
from nn_core import (AdamState, Mlp, Parameters, TrainingDivergedError, TrainingState, backward,
                     dual_backward, dual_forward, forward_with_cache, hessian_vector_product, init_mlp,
                     input_gradient, load_training_state, optimizer_step, save_checkpoint,
                     save_training_state)
from refu_datatypes import SDF_CURVE_COLUMNS, Activation, SampleCategory
from sdf_exact import ExactSdf, SdfError, SdfQuery

logger = get_logger("sdf.neural")

BBOX_HALF_EXTENT: float = 2.0
MRE_GUARD: float = 1e-6
EVAL_CHUNK: int = 8192
PathLike = Union[str, Path]


@dataclass(frozen=True)
class SampleCounts:
    """Samples drawn per body for each category."""
    body_surface: int = 300
    body_disturbed: int = 300
    garment_surface: int = 100
    garment_disturbed: int = 100
    bbox: int = 200

    def total(self) -> int:
        return self.body_surface + self.body_disturbed + self.garment_surface + self.garment_disturbed + self.bbox

    def scaled(self, factor: float) -> "SampleCounts":
        return SampleCounts(*(int(round(factor * count)) for count in
                              (self.body_surface, self.body_disturbed, self.garment_surface,
                               self.garment_disturbed, self.bbox)))


@dataclass
class SdfNetConfig:
    """
    Learned SDF architecture, sampling and optimisation settings.

    Attributes:
        hidden_layers (int): number of hidden layers.
        hidden_width (int): neurons per hidden layer.
        softplus_beta (float): Softplus sharpness.
        skip_layer (int, optional): layer receiving the network input again; must be < hidden_layers.
        lambda_a, lambda_b, lambda_c (float): weights of L_v, L_sg, L_se.
        bodies_per_batch (int): bodies per optimizer step.
        counts (SampleCounts): samples per body per category.
        noise_fraction (float): disturbance sigma as a fraction of the body bounding radius.
        learning_rate (float): Adam step size.
        epochs (int): passes over the body set.
        probe_points (int): size of the fixed probe set for the Eikonal deviation column.
    """
    hidden_layers: int = 4
    hidden_width: int = 256
    softplus_beta: float = 100.0
    skip_layer: Optional[int] = 2
    lambda_a: float = 2.0
    lambda_b: float = 1.0
    lambda_c: float = 0.1
    bodies_per_batch: int = 8
    counts: SampleCounts = field(default_factory=SampleCounts)
    noise_fraction: float = 0.05
    learning_rate: float = 1e-4
    epochs: int = 40
    probe_points: int = 256

    def validate(self) -> None:
        """
        Raises:
            ValueError: on an inconsistent configuration.
        """
        if self.hidden_layers < 1 or self.hidden_width < 1:
            raise ValueError(f"invalid SDF network size {self.hidden_layers} x {self.hidden_width}")
        if self.skip_layer is not None and not 0 < self.skip_layer < self.hidden_layers:
            raise ValueError(f"skip layer {self.skip_layer} must lie in 1..{self.hidden_layers - 1}")
        if self.lambda_a <= 0 or self.lambda_b < 0 or self.lambda_c < 0:
            raise ValueError(f"invalid loss weights ({self.lambda_a}, {self.lambda_b}, {self.lambda_c})")
        if self.bodies_per_batch < 1 or self.counts.total() < 1:
            raise ValueError("batch must contain at least one body and one sample")


@dataclass(frozen=True)
class SdfSample:
    """
    One labeled sample.

    Attributes:
        point (np.ndarray): query position.
        value (float): exact signed distance.
        normal (np.ndarray, optional): surface normal, only for undisturbed body-surface samples.
        category (SampleCategory): origin of the sample.
        body_id (int): index of the body it was drawn for.
    """
    point: np.ndarray
    value: float
    normal: Optional[np.ndarray]
    category: SampleCategory
    body_id: int


@dataclass(frozen=True)
class SdfSampleSet:
    """
    Samples stored column-wise. `normals` rows are NaN outside I_S; `conditioning`
    holds the (shape, pose) vector of each sample's body.
    """
    points: np.ndarray
    values: np.ndarray
    normals: np.ndarray
    categories: np.ndarray
    body_ids: np.ndarray
    conditioning: np.ndarray

    def __len__(self) -> int:
        return int(self.values.shape[0])

    @property
    def surface_mask(self) -> np.ndarray:
        """I_S: samples supervised on their normal."""
        return self.categories == SampleCategory.BODY_SURFACE

    def sample(self, index: int) -> SdfSample:
        category = SampleCategory(int(self.categories[index]))
        normal = self.normals[index].copy() if category is SampleCategory.BODY_SURFACE else None
        return SdfSample(self.points[index].copy(), float(self.values[index]), normal, category,
                         int(self.body_ids[index]))

    def network_inputs(self) -> np.ndarray:
        return np.concatenate([self.points, self.conditioning], axis=1)

    def subset(self, mask: np.ndarray) -> "SdfSampleSet":
        return SdfSampleSet(self.points[mask], self.values[mask], self.normals[mask], self.categories[mask],
                            self.body_ids[mask], self.conditioning[mask])

    @staticmethod
    def concatenate(parts: Sequence["SdfSampleSet"]) -> "SdfSampleSet":
        if not parts:
            raise SdfError("cannot concatenate an empty list of sample sets")
        return SdfSampleSet(*(np.concatenate([getattr(part, name) for part in parts])
                              for name in ("points", "values", "normals", "categories", "body_ids", "conditioning")))


@dataclass(frozen=True)
class SdfLossTerms:
    total: float
    l_v: float
    l_sg: float
    l_se: float


def sample_surface(mesh: TriMesh, count: int, rng: np.random.Generator) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """
    Area-weighted uniform points on a mesh.

    Returns:
        (np.ndarray, np.ndarray, np.ndarray): points (count, 3), face ids, barycentric coordinates.
    """
    areas = mesh.face_areas()
    if count == 0:
        return np.empty((0, 3)), np.empty(0, dtype=np.int64), np.empty((0, 3))
    if areas.sum() <= 0:
        raise SdfError("cannot sample a mesh with zero total area")
    faces = rng.choice(mesh.face_count, size=count, p=areas / areas.sum())
    r1 = np.sqrt(rng.random(count))
    r2 = rng.random(count)
    bary = np.stack([1.0 - r1, r1 * (1.0 - r2), r1 * r2], axis=1)
    tri = mesh.vertices[mesh.faces[faces]]
    return np.einsum("ij,ijk->ik", bary, tri), faces, bary


def _disturbed(base: np.ndarray, count: int, sigma: float, rng: np.random.Generator) -> np.ndarray:
    if count == 0:
        return np.empty((0, 3))
    picked = base[np.arange(count) % max(1, base.shape[0])]
    return picked + sigma * rng.standard_normal((count, 3))


def sample_training_points(body: BodyState, garment: Optional[TriMesh], counts: SampleCounts, noise_sigma: float,
                           rng: Union[int, np.random.Generator], engine: Optional[ExactSdf] = None,
                           body_id: int = 0) -> SdfSampleSet:
    """
    Draw and label SDF samples around one body.

    Disturbed samples perturb the first points of the undisturbed draw of the same
    surface, so sigma = 0 reproduces those positions exactly.

    Args:
        body (BodyState): body to sample; its mesh must be watertight.
        garment (TriMesh, optional): garment worn on that body; garment categories need it.
        counts (SampleCounts): samples per category.
        noise_sigma (float): Gaussian disturbance in meters.
        rng: seed or generator.
        engine (ExactSdf, optional): labeling engine bound to `body.mesh`; built when omitted.
        body_id (int): id stored with every sample.

    Raises:
        SdfError: if the body is not watertight or garment samples are requested without a garment.
    """
    rng = np.random.default_rng(rng)
    if not body.mesh.is_watertight():
        raise SdfError("SDF samples need a watertight body mesh")
    if garment is None and (counts.garment_surface or counts.garment_disturbed):
        raise SdfError("garment samples requested but no garment mesh given")
    engine = engine or ExactSdf(body.mesh)

    body_base, faces, bary = sample_surface(body.mesh, max(counts.body_surface, counts.body_disturbed), rng)
    vertex_normals = body.mesh.vertex_normals()
    normals = np.einsum("ij,ijk->ik", bary, vertex_normals[body.mesh.faces[faces]])
    normals /= np.linalg.norm(normals, axis=1, keepdims=True)
    body_surface = body_base[:counts.body_surface]
    body_disturbed = _disturbed(body_base, counts.body_disturbed, noise_sigma, rng)

    if garment is not None:
        garment_base, _, _ = sample_surface(garment, max(counts.garment_surface, counts.garment_disturbed), rng)
    else:
        garment_base = np.empty((0, 3))
    garment_surface = garment_base[:counts.garment_surface]
    garment_disturbed = _disturbed(garment_base, counts.garment_disturbed, noise_sigma, rng)
    bbox = rng.uniform(-BBOX_HALF_EXTENT, BBOX_HALF_EXTENT, size=(counts.bbox, 3))

    groups = [
        (body_surface, SampleCategory.BODY_SURFACE), (body_disturbed, SampleCategory.BODY_DISTURBED),
        (garment_surface, SampleCategory.GARMENT_SURFACE), (garment_disturbed, SampleCategory.GARMENT_DISTURBED),
        (bbox, SampleCategory.BBOX),
    ]
    points = np.concatenate([group for group, _ in groups])
    categories = np.concatenate([np.full(len(group), category, dtype=np.int8) for group, category in groups])
    all_normals = np.full((points.shape[0], 3), np.nan)
    all_normals[:counts.body_surface] = normals[:counts.body_surface]
    values = engine.evaluate(points).values
    conditioning = np.tile(body.conditioning(), (points.shape[0], 1))
    return SdfSampleSet(points, values, all_normals, categories,
                        np.full(points.shape[0], body_id, dtype=np.int64), conditioning)


def build_sdf_network(cfg: SdfNetConfig, conditioning_width: int, rng: np.random.Generator) -> Mlp:
    widths = [3 + conditioning_width] + [cfg.hidden_width] * cfg.hidden_layers + [1]
    return init_mlp(widths, rng, Activation.SOFTPLUS, Activation.IDENTITY, cfg.softplus_beta, cfg.skip_layer)


def eikonal_loss(gradients: np.ndarray) -> float:
    """Mean (||g|| - 1)^2 over rows of `gradients`; 0 for an empty set."""
    gradients = np.asarray(gradients, dtype=np.float64).reshape(-1, 3)
    if gradients.shape[0] == 0:
        return 0.0
    return float(((np.linalg.norm(gradients, axis=1) - 1.0) ** 2).mean())


def sdf_loss(net: Mlp, batch: SdfSampleSet, cfg: SdfNetConfig) -> Tuple[SdfLossTerms, Parameters]:
    """
    Loss and weight gradients for one batch.

    The normal and Eikonal terms depend on grad_x f; their weight gradients come from
    one dual pass with tangent dL/d(grad_x f), fused with the L_v cotangent.

    Raises:
        SdfError: if the batch is empty.
    """
    n = len(batch)
    if n == 0:
        raise SdfError("sdf_loss needs a non-empty batch")
    inputs = batch.network_inputs()
    y, cache = forward_with_cache(net, inputs)
    _, input_bar = backward(net, cache, np.ones_like(y))
    f = y[:, 0]
    grad = input_bar[:, :3]

    residual = f - batch.values
    l_v = float(np.abs(residual).mean())
    f_bar = cfg.lambda_a * np.sign(residual) / n

    grad_bar = np.zeros_like(grad)
    surface = batch.surface_mask
    eikonal = ~surface
    l_sg = 0.0
    if surface.any():
        diff = grad[surface] - batch.normals[surface]
        norm = np.linalg.norm(diff, axis=1)
        l_sg = float(norm.mean())
        unit = np.divide(diff, norm[:, None], out=np.zeros_like(diff), where=norm[:, None] > 0)
        grad_bar[surface] += cfg.lambda_b * unit / surface.sum()
    l_se = 0.0
    if eikonal.any():
        g = grad[eikonal]
        norm = np.linalg.norm(g, axis=1)
        l_se = eikonal_loss(g)
        unit = np.divide(g, norm[:, None], out=np.zeros_like(g), where=norm[:, None] > 0)
        grad_bar[eikonal] += cfg.lambda_c * 2.0 * (norm - 1.0)[:, None] * unit / eikonal.sum()
    elif cfg.lambda_c > 0:
        logger.warning("Batch has no Eikonal samples, L_se contributes 0")

    tangent = np.concatenate([grad_bar, np.zeros((n, inputs.shape[1] - 3))], axis=1)
    _, _, dual_cache = dual_forward(net, inputs, tangent)
    grads, _, _ = dual_backward(net, dual_cache, f_bar[:, None], np.ones((n, 1)))
    total = cfg.lambda_a * l_v + cfg.lambda_b * l_sg + cfg.lambda_c * l_se
    return SdfLossTerms(total, l_v, l_sg, l_se), grads


def predict_values(net: Mlp, inputs: np.ndarray) -> np.ndarray:
    out = [forward_with_cache(net, inputs[lo:lo + EVAL_CHUNK])[0][:, 0] for lo in range(0, inputs.shape[0], EVAL_CHUNK)]
    return np.concatenate(out) if out else np.empty(0)


def evaluate_sdf(net: Mlp, samples: SdfSampleSet) -> Tuple[float, float]:
    """
    Mean absolute error (meters) and mean relative error (percent).

    Samples with |s| < 1e-6 are left out of the relative error; NaN when none remain.
    """
    if len(samples) == 0:
        return 0.0, 0.0
    error = predict_values(net, samples.network_inputs()) - samples.values
    mae = float(np.abs(error).mean())
    usable = np.abs(samples.values) >= MRE_GUARD
    if not usable.all():
        logger.info("Relative error skips %d near-surface samples", int((~usable).sum()))
    mre = float(np.abs(error[usable] / samples.values[usable]).mean() * 100.0) if usable.any() else float("nan")
    return mae, mre


def eikonal_deviation(net: Mlp, inputs: np.ndarray) -> float:
    """Mean | ||grad_x f|| - 1 | over the given network inputs."""
    if inputs.shape[0] == 0:
        return 0.0
    _, grad = input_gradient(net, inputs)
    return float(np.abs(np.linalg.norm(grad[:, :3], axis=1) - 1.0).mean())


@dataclass
class SdfTrainingResult:
    net: Mlp
    curve: List[dict]


class SdfTrainer:
    """
    Trains the learned SDF on a set of (body, garment) pairs.

    Randomness is split into named sub-streams of the seed: network init, sample pool,
    batch order. Only the batch-order stream advances during epochs, so a run resumed
    from a training-state checkpoint replays the uninterrupted run exactly.
    """

    def __init__(self, dataset: Sequence[Tuple[BodyState, Optional[TriMesh]]], cfg: SdfNetConfig, seed: int,
                 progress: bool = False) -> None:
        if not dataset:
            raise SdfError("SDF training needs at least one body")
        cfg.validate()
        self.logger = logger
        self.cfg = cfg
        self.seed = seed
        self.progress = progress
        self.dataset = list(dataset)
        self.conditioning_width = self.dataset[0][0].conditioning().size
        pool_rng = np.random.default_rng([seed, 1])
        self.pools: List[SdfSampleSet] = []
        self.tests: List[SdfSampleSet] = []
        for body_id, (body, garment) in enumerate(self.dataset):
            if body.conditioning().size != self.conditioning_width:
                raise SdfError(f"body {body_id} conditioning width {body.conditioning().size} "
                               f"!= {self.conditioning_width}")
            counts = cfg.counts if garment is not None else SampleCounts(
                cfg.counts.body_surface, cfg.counts.body_disturbed, 0, 0, cfg.counts.bbox)
            sigma = cfg.noise_fraction * body.mesh.bounding_radius()
            engine = ExactSdf(body.mesh)
            self.pools.append(sample_training_points(body, garment, counts, sigma, pool_rng, engine, body_id))
            self.tests.append(sample_training_points(body, garment, counts.scaled(0.25), sigma, pool_rng,
                                                     engine, body_id))
        self.test_set = SdfSampleSet.concatenate(self.tests)
        off_surface = self.test_set.subset(~self.test_set.surface_mask)
        self.probe_inputs = off_surface.network_inputs()[:cfg.probe_points]

    def _fresh_state(self) -> TrainingState:
        net = build_sdf_network(self.cfg, self.conditioning_width, np.random.default_rng([self.seed, 0]))
        adam = AdamState.for_parameters(net.parameters(), self.cfg.learning_rate)
        order_rng = np.random.default_rng([self.seed, 2])
        return TrainingState({"sdf": net}, {"sdf": adam}, 0, order_rng.bit_generator.state, [])

    def train(self, epochs: Optional[int] = None, resume_from: Optional[PathLike] = None,
              state_path: Optional[PathLike] = None, curve_path: Optional[PathLike] = None) -> SdfTrainingResult:
        """
        Run (or continue) training up to `epochs` total epochs.

        Args:
            epochs (int, optional): total epochs; defaults to the config value.
            resume_from (path, optional): training-state checkpoint to continue from.
            state_path (path, optional): where to write the training state after every epoch.
            curve_path (path, optional): training curve CSV written at the end.

        Raises:
            TrainingDivergedError: if a batch loss is not finite.
        """
        epochs = self.cfg.epochs if epochs is None else epochs
        state = load_training_state(resume_from) if resume_from else self._fresh_state()
        net, adam = state.networks["sdf"], state.optimizers["sdf"]
        order_rng = np.random.default_rng()
        order_rng.bit_generator.state = state.rng_state
        batch = self.cfg.bodies_per_batch

        for epoch in tqdm(range(state.epoch, epochs), desc="sdf", disable=not self.progress):
            order = order_rng.permutation(len(self.pools))
            sums = np.zeros(3)
            steps = 0
            for lo in range(0, len(order), batch):
                samples = SdfSampleSet.concatenate([self.pools[i] for i in order[lo:lo + batch]])
                terms, grads = sdf_loss(net, samples, self.cfg)
                if not np.isfinite(terms.total):
                    raise TrainingDivergedError(f"SDF loss {terms.total} at epoch {epoch}, batch {lo // batch}")
                optimizer_step(net, adam, grads)
                sums += (terms.l_v, terms.l_sg, terms.l_se)
                steps += 1
            mae, mre = evaluate_sdf(net, self.test_set)
            l_v, l_sg, l_se = sums / steps
            row = {"epoch": epoch + 1, "L_v": l_v, "L_sg": l_sg, "L_se": l_se, "MAE": mae, "MRE": mre,
                   "eikonal_dev": eikonal_deviation(net, self.probe_inputs)}
            state.curve.append(row)
            state.epoch = epoch + 1
            state.rng_state = order_rng.bit_generator.state
            self.logger.info("SDF epoch finished", extra={"fields": row})
            if state_path:
                save_training_state(state, state_path)

        if curve_path:
            write_curve(state.curve, curve_path)
        return SdfTrainingResult(net, state.curve)


def train_sdf(dataset: Sequence[Tuple[BodyState, Optional[TriMesh]]], cfg: SdfNetConfig, epochs: Optional[int] = None,
              seed: int = 0, checkpoint_path: Optional[PathLike] = None, curve_path: Optional[PathLike] = None,
              progress: bool = False) -> SdfTrainingResult:
    """Train a learned SDF from scratch and optionally write the network checkpoint and the curve CSV."""
    result = SdfTrainer(dataset, cfg, seed, progress).train(epochs, curve_path=curve_path)
    if checkpoint_path:
        save_checkpoint(result.net, checkpoint_path)
    return result


def write_curve(rows: Iterable[dict], path: PathLike) -> None:
    with open(path, "w", encoding="utf-8", newline="") as file:
        writer = csv.DictWriter(file, fieldnames=SDF_CURVE_COLUMNS, lineterminator="\n")
        writer.writeheader()
        for row in rows:
            writer.writerow({key: repr(float(value)) if key != "epoch" else int(value) for key, value in row.items()})


class NeuralSdf:
    """
    Learned SDF engine bound to one body: queries append the body's conditioning
    vector to every point. Same interface as ExactSdf.
    """

    def __init__(self, net: Mlp, conditioning: np.ndarray) -> None:
        self.logger = logger
        self.net = net
        self.conditioning = np.asarray(conditioning, dtype=np.float64).reshape(-1)
        if net.input_width != 3 + self.conditioning.size or net.output_width != 1:
            raise SdfError(f"network input width {net.input_width} does not fit 3 + {self.conditioning.size}")
        self.query_seconds = 0.0
        self.query_points = 0
        self._timing_lock = threading.Lock()

    def _inputs(self, points: np.ndarray) -> np.ndarray:
        points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
        return np.concatenate([points, np.tile(self.conditioning, (points.shape[0], 1))], axis=1)

    def evaluate(self, points: np.ndarray) -> SdfQuery:
        start = time.perf_counter()
        inputs = self._inputs(points)
        values, grads = [], []
        for lo in range(0, inputs.shape[0], EVAL_CHUNK):
            value, grad = input_gradient(self.net, inputs[lo:lo + EVAL_CHUNK])
            values.append(value)
            grads.append(grad[:, :3])
        elapsed = time.perf_counter() - start
        with self._timing_lock:
            self.query_seconds += elapsed
            self.query_points += inputs.shape[0]
        if not values:
            return SdfQuery(np.empty(0), np.empty((0, 3)))
        return SdfQuery(np.concatenate(values), np.concatenate(grads))

    def hessian_vector(self, points: np.ndarray, vectors: np.ndarray) -> np.ndarray:
        inputs = self._inputs(points)
        tangent = np.zeros_like(inputs)
        tangent[:, :3] = np.asarray(vectors, dtype=np.float64).reshape(-1, 3)
        return hessian_vector_product(self.net, inputs, tangent)[:, :3]
