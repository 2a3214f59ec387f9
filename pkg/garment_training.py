"""
Garment backbone and its training loop.

The backbone is a dense network mapping the frame parameters (shape, pose, style) to
per-vertex offsets from a template garment, the mean training garment. Training minimizes,
per frame and averaged over the batch,

    lambda_r * sum ||x' - x_gt||^2 + lambda_c * sum max(-f_c(x'), 0)

where x' is the backbone output, or the repulsion layer's output in refu mode. Modes:
backbone (lambda_c term off), collision-loss (no layer), refu (layer attached).

Engines by SDF mode: acc uses the exact SDF in the layer and in the loss, approx the
learned one in both, hybrid the learned one in the layer and the exact one in the loss.
"""
import csv
import json
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Union

import numpy as np
from tqdm import tqdm

from logger import get_logger
from nn_core import (AdamState, CheckpointError, Mlp, Parameters, TrainingDivergedError, add_gradients, backward,
                     forward_with_cache, init_mlp, load_checkpoint, network_from_record, network_to_record,
                     optimizer_step, save_checkpoint)
from refu_datatypes import Activation, AlphaVariant, ScaleMode, SdfMode, TrainingMode
from refu_layer import RefuConfig, RefuLayer, RefuNetworks, build_refu_networks
from sdf_exact import ExactSdf, SdfEngine
from sdf_neural import NeuralSdf
from synthetic_data import GarmentFrame

logger = get_logger("training")

OUTPUT_SCALE: float = 0.1
BACKBONE_FORMAT = "refu-backbone"
BACKBONE_VERSION = 1
TRAIN_CURVE_COLUMNS: List[str] = ["epoch", "loss", "L_r", "L_c", "VFCP_pct"]
PathLike = Union[str, Path]


@dataclass
class BackboneSpec:
    """Backbone architecture: `hidden_layers` ReLU layers of `hidden_width`, then the offset layer."""
    hidden_width: int = 128
    hidden_layers: int = 4


@dataclass
class OptimizerSpec:
    """
    Attributes:
        learning_rate (float): Adam step for the backbone.
        refu_learning_rate (float): Adam step for the alpha networks.
        epochs (int): backbone pre-training epochs.
        finetune_epochs (int): epochs of collision-loss or repulsion-layer training.
        batch_size (int): frames per step.
    """
    learning_rate: float = 1e-3
    refu_learning_rate: float = 1e-3
    epochs: int = 60
    finetune_epochs: int = 15
    batch_size: int = 16


@dataclass
class TrainingSpec:
    """
    Backbone training settings.

    Attributes:
        mode (TrainingMode): backbone, collision-loss or refu.
        lambda_r (float): weight of the reconstruction term.
        lambda_c (float): weight of the collision term.
        fine_tune (bool): start collision-loss / refu training from a pre-trained backbone.
        refu (RefuConfig): layer wiring, also selects the SDF mode of the loss.
        backbone (BackboneSpec): backbone architecture.
        optimizer (OptimizerSpec): step sizes, epochs and batch size.
    """
    mode: TrainingMode = TrainingMode.BACKBONE
    lambda_r: float = 1.5
    lambda_c: float = 0.5
    fine_tune: bool = True
    refu: RefuConfig = field(default_factory=RefuConfig)
    backbone: BackboneSpec = field(default_factory=BackboneSpec)
    optimizer: OptimizerSpec = field(default_factory=OptimizerSpec)

    def validate(self) -> None:
        if self.lambda_r < 0 or self.lambda_c < 0:
            raise ValueError(f"loss weights must be non-negative, got ({self.lambda_r}, {self.lambda_c})")
        if self.optimizer.batch_size < 1:
            raise ValueError(f"batch size must be positive, got {self.optimizer.batch_size}")
        self.refu.validate()


class Backbone:
    """
    Parameters -> garment vertices. Inputs are standardized with training statistics;
    outputs are offsets from the template scaled by OUTPUT_SCALE.

    Args:
        net (Mlp): ReLU network from standardized parameters to flattened offsets.
        template (np.ndarray): (V, 3) mean garment the offsets are added to.
        input_mean (np.ndarray): per-parameter mean of the training frames.
        input_scale (np.ndarray): per-parameter standard deviation, 1 where constant.
    """

    def __init__(self, net: Mlp, template: np.ndarray, input_mean: np.ndarray, input_scale: np.ndarray) -> None:
        self.logger = logger
        self.net = net
        self.template = np.asarray(template, dtype=np.float64).reshape(-1, 3)
        self.input_mean = np.asarray(input_mean, dtype=np.float64)
        self.input_scale = np.asarray(input_scale, dtype=np.float64)
        self.seconds = 0.0
        self.calls = 0
        self._timing_lock = threading.Lock()

    @classmethod
    def initialise(cls, spec: BackboneSpec, frames: Sequence[GarmentFrame], rng: np.random.Generator) -> "Backbone":
        params = np.stack([frame.parameters for frame in frames])
        scale = params.std(axis=0)
        scale[scale == 0] = 1.0
        template = np.mean([frame.garment.vertices for frame in frames], axis=0)
        widths = [params.shape[1]] + [spec.hidden_width] * spec.hidden_layers + [template.size]
        return cls(init_mlp(widths, rng, Activation.RELU), template, params.mean(axis=0), scale)

    @property
    def vertex_count(self) -> int:
        return self.template.shape[0]

    def forward(self, params: np.ndarray):
        """
        Args:
            params (np.ndarray): (P,) or (B, P) shape and pose parameters.

        Returns:
            (np.ndarray, ForwardCache): (B, V, 3) positions and the cache for `backward`.
        """
        params = np.atleast_2d(np.asarray(params, dtype=np.float64))
        out, cache = forward_with_cache(self.net, (params - self.input_mean) / self.input_scale)
        return self.template + OUTPUT_SCALE * out.reshape(params.shape[0], -1, 3), cache

    def backward(self, cache, positions_bar: np.ndarray) -> Parameters:
        """
        Args:
            cache (ForwardCache): from `forward`.
            positions_bar (np.ndarray): (B, V, 3) cotangent of the predicted positions.
        """
        upstream = OUTPUT_SCALE * np.asarray(positions_bar, dtype=np.float64).reshape(cache.output.shape)
        return backward(self.net, cache, upstream)[0]

    def predict_frame(self, frame: GarmentFrame) -> np.ndarray:
        start = time.perf_counter()
        positions = self.forward(frame.parameters)[0][0]
        elapsed = time.perf_counter() - start
        with self._timing_lock:
            self.seconds += elapsed
            self.calls += 1
        return positions

    def copy(self) -> "Backbone":
        return Backbone(self.net.copy(), self.template.copy(), self.input_mean.copy(), self.input_scale.copy())

    def save(self, path: PathLike) -> None:
        record = {"format": BACKBONE_FORMAT, "version": BACKBONE_VERSION, "network": network_to_record(self.net),
                  "template": self.template.reshape(-1).tolist(), "input_mean": self.input_mean.tolist(),
                  "input_scale": self.input_scale.tolist()}
        with open(path, "w", encoding="utf-8", newline="\n") as file:
            json.dump(record, file)

    @classmethod
    def load(cls, path: PathLike) -> "Backbone":
        """
        Raises:
            CheckpointError: if the file is not a backbone checkpoint.
        """
        try:
            with open(path, "r", encoding="utf-8") as file:
                record = json.load(file)
        except json.JSONDecodeError as error:
            raise CheckpointError(f"{path} is not valid JSON: {error}") from error
        if record.get("format") != BACKBONE_FORMAT or record.get("version") != BACKBONE_VERSION:
            raise CheckpointError(f"{path} is not a version {BACKBONE_VERSION} backbone checkpoint")
        return cls(network_from_record(record["network"]), record["template"], record["input_mean"],
                   record["input_scale"])


class IdentityBackbone:
    """
    Returns the ground-truth garment; isolates the collision handling from prediction error.

    `seconds` stays 0, so the backbone timing column reads 0 ms.
    """

    def __init__(self) -> None:
        self.logger = logger
        self.seconds = 0.0
        self.calls = 0
        self._timing_lock = threading.Lock()
        self.logger.info("Identity backbone: predictions are the ground-truth garments")

    def predict_frame(self, frame: GarmentFrame) -> np.ndarray:
        """
        Args:
            frame (GarmentFrame): frame whose ground-truth garment is returned.

        Returns:
            np.ndarray: (V, 3) copy of the ground-truth vertices.
        """
        with self._timing_lock:
            self.calls += 1
        return np.array(frame.garment.vertices)


class EngineSet:
    """
    Hands out SDF engines per frame. Exact engines are built once per body mesh;
    learned engines bind the shared network to the body's conditioning vector.
    """

    def __init__(self, sdf_net: Optional[Mlp] = None) -> None:
        self.logger = logger
        self.sdf_net = sdf_net
        self._exact: Dict[int, tuple] = {}
        self._neural: Dict[int, tuple] = {}
        self._lock = threading.Lock()

    def exact(self, frame: GarmentFrame) -> ExactSdf:
        key = id(frame.body.mesh)
        with self._lock:
            if key not in self._exact:
                self._exact[key] = (frame.body.mesh, ExactSdf(frame.body.mesh))
            return self._exact[key][1]

    def neural(self, frame: GarmentFrame) -> NeuralSdf:
        if self.sdf_net is None:
            raise CheckpointError("the learned SDF engine needs a trained SDF network")
        key = id(frame.body)
        with self._lock:
            if key not in self._neural:
                self._neural[key] = (frame.body, NeuralSdf(self.sdf_net, frame.body.conditioning()))
            return self._neural[key][1]

    def layer_engine(self, frame: GarmentFrame, sdf_mode: SdfMode) -> SdfEngine:
        return self.exact(frame) if sdf_mode is SdfMode.ACC else self.neural(frame)

    def loss_engine(self, frame: GarmentFrame, sdf_mode: SdfMode) -> SdfEngine:
        return self.neural(frame) if sdf_mode is SdfMode.APPROX else self.exact(frame)

    def timings(self) -> Dict[str, float]:
        """Accumulated query time (s) and query count of both engine kinds."""
        exact = [engine for _, engine in self._exact.values()]
        neural = [engine for _, engine in self._neural.values()]
        return {"exact_seconds": sum(e.query_seconds for e in exact), "exact_points": sum(e.query_points for e in exact),
                "neural_seconds": sum(e.query_seconds for e in neural),
                "neural_points": sum(e.query_points for e in neural)}


@dataclass
class TrainingResult:
    backbone: Backbone
    layer: Optional[RefuLayer]
    curve: List[dict]


class GarmentTrainer:
    """
    Trains the backbone (and, in refu mode with predicted scale, the alpha networks).

    Randomness comes from sub-streams of the seed: backbone init, alpha-network init,
    batch order. A given backbone is copied, never modified.
    """

    def __init__(self, frames: Sequence[GarmentFrame], spec: TrainingSpec, engines: EngineSet,
                 backbone: Optional[Backbone] = None, seed: int = 0, progress: bool = False) -> None:
        if not frames:
            raise ValueError("training needs at least one frame")
        spec.validate()
        self.logger = logger
        self.frames = list(frames)
        self.spec = spec
        self.engines = engines
        self.seed = seed
        self.progress = progress
        self.backbone = backbone.copy() if backbone is not None else Backbone.initialise(
            spec.backbone, self.frames, np.random.default_rng([seed, 20]))
        self.layer: Optional[RefuLayer] = None
        if spec.mode is TrainingMode.REFU:
            networks = None
            if spec.refu.scale_mode is ScaleMode.PREDICTED:
                networks = build_refu_networks(spec.refu, self.frames[0].parameters.size, self.backbone.vertex_count,
                                               np.random.default_rng([seed, 21]))
            self.layer = RefuLayer(spec.refu, networks)

    def _step(self, batch: Sequence[GarmentFrame], adams: Dict[str, AdamState]) -> dict:
        spec = self.spec
        sdf_mode = spec.refu.sdf_mode
        params = np.stack([frame.parameters for frame in batch])
        positions, cache = self.backbone.forward(params)
        positions_bar = np.empty_like(positions)
        network_grads: Dict[str, Parameters] = {}
        l_r = l_c = 0.0
        inside = 0
        scale = 1.0 / len(batch)
        for row, frame in enumerate(batch):
            output = None
            x = positions[row]
            if self.layer is not None:
                output = self.layer.forward(params[row], x, self.engines.layer_engine(frame, sdf_mode))
                x = output.positions
            diff = x - frame.garment.vertices
            l_r += float(np.sum(diff * diff))
            u = 2.0 * spec.lambda_r * diff
            if spec.mode is not TrainingMode.BACKBONE:
                query = self.engines.loss_engine(frame, sdf_mode).evaluate(x)
                penetrating = query.values < 0
                l_c -= float(query.values[penetrating].sum())
                inside += int(penetrating.sum())
                if spec.lambda_c:
                    u[penetrating] -= spec.lambda_c * query.gradients[penetrating]
            u *= scale
            if output is None:
                positions_bar[row] = u
                continue
            grads = self.layer.backward(output, u)
            positions_bar[row] = grads.positions
            for name, value in grads.networks.items():
                network_grads[name] = add_gradients(network_grads[name], value) if name in network_grads else value

        loss = scale * (spec.lambda_r * l_r + spec.lambda_c * l_c)
        if not np.isfinite(loss):
            raise TrainingDivergedError(f"loss {loss} (L_r {l_r}, L_c {l_c}) on frames "
                                        f"{[frame.index for frame in batch]}")
        optimizer_step(self.backbone.net, adams["backbone"], self.backbone.backward(cache, positions_bar))
        if self.layer is not None and self.layer.networks is not None:
            named = self.layer.networks.named()
            for name, grads in network_grads.items():
                optimizer_step(named[name], adams[name], grads)
        return {"loss": loss, "L_r": scale * l_r, "L_c": scale * l_c, "inside": inside}

    def train(self, epochs: int) -> TrainingResult:
        """
        Raises:
            TrainingDivergedError: if a batch loss is not finite.
        """
        opt = self.spec.optimizer
        adams = {"backbone": AdamState.for_parameters(self.backbone.net.parameters(), opt.learning_rate)}
        if self.layer is not None and self.layer.networks is not None:
            for name, net in self.layer.networks.named().items():
                adams[name] = AdamState.for_parameters(net.parameters(), opt.refu_learning_rate)
        order_rng = np.random.default_rng([self.seed, 22])
        vertex_count = self.backbone.vertex_count
        curve: List[dict] = []
        for epoch in tqdm(range(epochs), desc=self.spec.mode.value, disable=not self.progress):
            order = order_rng.permutation(len(self.frames))
            sums = np.zeros(3)
            inside = steps = 0
            for lo in range(0, order.size, opt.batch_size):
                stats = self._step([self.frames[i] for i in order[lo:lo + opt.batch_size]], adams)
                sums += (stats["loss"], stats["L_r"], stats["L_c"])
                inside += stats["inside"]
                steps += 1
            collision = self.spec.mode is not TrainingMode.BACKBONE
            row = {"epoch": epoch + 1, "loss": sums[0] / steps, "L_r": sums[1] / steps,
                   "L_c": sums[2] / steps if collision else None,
                   "VFCP_pct": 100.0 * inside / (len(self.frames) * vertex_count) if collision else None}
            curve.append(row)
            self.logger.info("Garment epoch finished", extra={"fields": dict(row, mode=self.spec.mode.value)})
        return TrainingResult(self.backbone, self.layer, curve)


def train_backbone(frames: Sequence[GarmentFrame], spec: TrainingSpec, engines: EngineSet,
                   backbone: Optional[Backbone] = None, epochs: Optional[int] = None, seed: int = 0,
                   progress: bool = False) -> TrainingResult:
    """
    Train in `spec.mode`.

    Args:
        frames: training frames.
        spec (TrainingSpec): mode, loss weights, layer wiring and optimizer settings.
        engines (EngineSet): SDF engines; needs a learned SDF for approx and hybrid modes.
        backbone (Backbone, optional): pre-trained backbone to fine-tune; a new one is
            initialised when omitted (from-scratch training).
        epochs (int, optional): defaults to `epochs` for the backbone mode and
            `finetune_epochs` otherwise.

    Returns:
        TrainingResult: trained backbone, the layer (refu mode) and the per-epoch curve.
    """
    if epochs is None:
        epochs = spec.optimizer.epochs if spec.mode is TrainingMode.BACKBONE else spec.optimizer.finetune_epochs
    return GarmentTrainer(frames, spec, engines, backbone, seed, progress).train(epochs)


def write_train_curve(rows: Sequence[dict], path: PathLike) -> None:
    with open(path, "w", encoding="utf-8", newline="") as file:
        writer = csv.DictWriter(file, fieldnames=TRAIN_CURVE_COLUMNS, lineterminator="\n")
        writer.writeheader()
        for row in rows:
            writer.writerow({key: "" if row[key] is None else repr(row[key]) for key in TRAIN_CURVE_COLUMNS})


def save_alpha_networks(networks: RefuNetworks, out_dir: PathLike) -> None:
    """One checkpoint per alpha network plus a small JSON describing the wiring."""
    out_dir = Path(out_dir)
    for name, net in networks.named().items():
        save_checkpoint(net, out_dir / f"alpha_{name}.json")
    with open(out_dir / "alpha.json", "w", encoding="utf-8", newline="\n") as file:
        json.dump({"variant": networks.variant.value, "vertex_count": networks.vertex_count}, file, sort_keys=True)


def load_alpha_networks(out_dir: PathLike) -> RefuNetworks:
    """
    Raises:
        CheckpointError: if a checkpoint is missing.
    """
    out_dir = Path(out_dir)
    try:
        with open(out_dir / "alpha.json", "r", encoding="utf-8") as file:
            meta = json.load(file)
        variant = AlphaVariant(meta["variant"])
        nets = {name: load_checkpoint(out_dir / f"alpha_{name}.json")
                for name in (("g",) if variant is AlphaVariant.ALT2 else ("h", "k", "g"))}
    except FileNotFoundError as error:
        raise CheckpointError(f"missing alpha network checkpoint: {error.filename}") from error
    return RefuNetworks(variant, int(meta["vertex_count"]), nets.get("h"), nets.get("k"), nets["g"])
