"""
Experiment configuration and the stages behind the command line.

A config is a JSON document::

    {"schema_version": 1, "preset": "desk" | "full", "seed": 0,
     "method": "none" | "naive" | "optimize" | "closs" | "refu-fixed" | "refu-predicted",
     "output_dir": "runs/default", "identity_backbone": false, "fine_tune": true,
     "lambda_r": 1.5, "lambda_c": 0.5,
     "dataset": {...DatasetSpec}, "backbone": {...BackboneSpec}, "refu": {...RefuConfig},
     "sdf": {...SdfNetConfig}, "optimizer": {...OptimizerSpec},
     "baseline": {...BaselineSpec}, "metrics": {...MetricsSpec}}

Missing keys take the preset's value, then the dataclass default; unknown keys are
rejected. `refu.sdf_mode` selects approx, acc or hybrid; when `refu.range_mode` is not
given it follows the SDF mode (acc for the exact engine, approx otherwise).

Output directory layout::

    dataset.npz, obj/                     gen-data
    sdf.json, sdf_curve.csv, sdf_state.json   train-sdf
    models/backbone.json, models/<method>-<sdf mode>/   train
    eval/<method>-<sdf mode>/metrics.csv, metrics.json, histogram.json,
        alpha_bars.json, distance_buckets.json, timings.json   eval
    report.csv, report.json               report
"""
import copy
import hashlib
import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, fields, is_dataclass, replace
from enum import Enum
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple, Union, get_origin, get_type_hints

import numpy as np

from baselines import OPTIMIZE_LABEL, collision_loss_only_mode, naive_postprocess, optimize_postprocess
from collision_metrics import (MetricsReport, avg_ee, cfmp, collision_region, detect_intersections, detect_vf,
                               distance_buckets, energy_histogram, histograms_payload, local_laplacian_error,
                               summarize, write_json, write_metrics_csv, write_metrics_json, write_rows_csv)
from garment_training import (Backbone, BackboneSpec, EngineSet, IdentityBackbone, OptimizerSpec, TrainingSpec,
                              load_alpha_networks, save_alpha_networks, train_backbone, write_train_curve)
from logger import get_logger
from mesh_core import TriMesh, save_obj
from nn_core import (AdamState, CheckpointError, TrainingDivergedError, add_gradients, load_checkpoint,
                     optimizer_step, save_checkpoint)
from refu_datatypes import AlphaVariant, Method, RangeMode, ScaleMode, SdfMode, TrainingMode
from refu_layer import RefuConfig, RefuLayer, alpha_ratio_buckets, build_refu_networks
from sdf_exact import ExactSdf
from sdf_neural import NeuralSdf, SdfNetConfig, SdfTrainer, build_sdf_network
from settings import NUM_WORKERS
from synthetic_data import (DatasetSpec, GarmentFrame, SyntheticDataset, body_template, export_obj_frames,
                            gen_synthetic_dataset, generate_frame, load_dataset, save_dataset, wedge_family)

logger = get_logger("experiment")

SCHEMA_VERSION = 1
HASH_LENGTH = 12
PathLike = Union[str, Path]

PRESETS: Dict[str, Dict[str, Any]] = {
    "desk": {
        "sdf": {"hidden_layers": 4, "hidden_width": 64, "skip_layer": 2, "learning_rate": 1e-3, "epochs": 30,
                "counts": {"body_surface": 150, "body_disturbed": 150, "garment_surface": 50,
                           "garment_disturbed": 50, "bbox": 100}},
        "refu": {"latent_width": 32, "vertex_latent_width": 4, "h_width": 64, "g_width": 10},
    },
    "full": {
        "dataset": {"train_frames": 2000, "test_frames": 300},
        "backbone": {"hidden_width": 512},
        "sdf": {"hidden_layers": 9, "hidden_width": 1024, "skip_layer": 4, "learning_rate": 1e-5, "epochs": 200},
        "refu": {"latent_width": 1024, "vertex_latent_width": 10, "h_width": 1024, "g_width": 10},
        "optimizer": {"learning_rate": 1e-4, "refu_learning_rate": 1e-4},
    },
}


class ConfigError(ValueError):
    """Raised for an invalid experiment configuration."""


@dataclass
class BaselineSpec:
    """Settings of the optimization post-process."""
    laplacian_weight: float = 0.5
    max_iters: int = 200
    margin: float = 1e-3


@dataclass
class MetricsSpec:
    """
    Attributes:
        histogram_bins (int): penetration-energy histogram bins.
        histogram_upper (float, optional): upper bin edge; defaults to the largest energy.
        distance_buckets (Tuple[str, ...]): names of the equal-size distance groups, nearest first.
        obj_exports (int): frames per split exported as OBJ by gen-data, and predictions written by eval.
    """
    histogram_bins: int = 50
    histogram_upper: Optional[float] = None
    distance_buckets: Tuple[str, ...] = ("near", "far")
    obj_exports: int = 1


@dataclass
class ExperimentConfig:
    schema_version: int = SCHEMA_VERSION
    preset: str = "desk"
    seed: int = 0
    method: Method = Method.REFU_PREDICTED
    output_dir: str = "runs/default"
    identity_backbone: bool = False
    fine_tune: bool = True
    lambda_r: float = 1.5
    lambda_c: float = 0.5
    dataset: DatasetSpec = field(default_factory=DatasetSpec)
    backbone: BackboneSpec = field(default_factory=BackboneSpec)
    refu: RefuConfig = field(default_factory=RefuConfig)
    sdf: SdfNetConfig = field(default_factory=SdfNetConfig)
    optimizer: OptimizerSpec = field(default_factory=OptimizerSpec)
    baseline: BaselineSpec = field(default_factory=BaselineSpec)
    metrics: MetricsSpec = field(default_factory=MetricsSpec)

    @property
    def sdf_mode(self) -> SdfMode:
        return self.refu.sdf_mode

    @property
    def method_label(self) -> str:
        """Method tag, with the alpha variant appended when it is not the main one."""
        if self.method is Method.REFU_PREDICTED and self.refu.variant is not AlphaVariant.MAIN:
            return f"{self.method.value}-{self.refu.variant.value}"
        return self.method.value

    @property
    def tag(self) -> str:
        return f"{self.method_label}-{self.sdf_mode.value}"

    def validate(self) -> None:
        """
        Raises:
            ConfigError: on any invalid setting.
        """
        if self.schema_version != SCHEMA_VERSION:
            raise ConfigError(f"unsupported schema_version {self.schema_version}")
        if self.preset not in PRESETS:
            raise ConfigError(f"unknown preset {self.preset!r}")
        try:
            self.dataset.validate()
            self.sdf.validate()
            self.training_spec().validate()
        except ValueError as error:
            raise ConfigError(str(error)) from error

    def training_spec(self) -> TrainingSpec:
        """Training settings implied by the method tag."""
        spec = TrainingSpec(TrainingMode.BACKBONE, self.lambda_r, self.lambda_c, self.fine_tune, self.refu,
                            self.backbone, self.optimizer)
        if self.method is Method.CLOSS:
            return collision_loss_only_mode(spec)
        if self.method is Method.REFU_FIXED:
            return replace(spec, mode=TrainingMode.REFU, refu=replace(self.refu, scale_mode=ScaleMode.FIXED))
        if self.method is Method.REFU_PREDICTED:
            return replace(spec, mode=TrainingMode.REFU, refu=replace(self.refu, scale_mode=ScaleMode.PREDICTED))
        return spec


def _merge(base: Dict[str, Any], override: Dict[str, Any]) -> Dict[str, Any]:
    for key, value in override.items():
        if isinstance(value, dict) and isinstance(base.get(key), dict):
            base[key] = _merge(base[key], value)
        else:
            base[key] = value
    return base


def _from_dict(cls, raw: Any, where: str):
    if not isinstance(raw, dict):
        raise ConfigError(f"{where} must be a JSON object, got {type(raw).__name__}")
    hints = get_type_hints(cls)
    names = {f.name for f in fields(cls)}
    unknown = sorted(set(raw) - names)
    if unknown:
        raise ConfigError(f"unknown keys in {where}: {unknown}")
    kwargs = {}
    for name, value in raw.items():
        kind = hints[name]
        if is_dataclass(kind):
            kwargs[name] = _from_dict(kind, value, f"{where}.{name}")
        elif isinstance(kind, type) and issubclass(kind, Enum):
            try:
                kwargs[name] = kind(value)
            except ValueError:
                raise ConfigError(f"{where}.{name}: {value!r} is not one of "
                                  f"{[member.value for member in kind]}") from None
        elif get_origin(kind) is tuple:
            if not isinstance(value, list):
                raise ConfigError(f"{where}.{name} must be a list")
            kwargs[name] = tuple(value)
        elif kind is float and isinstance(value, int) and not isinstance(value, bool):
            kwargs[name] = float(value)
        else:
            kwargs[name] = value
    return cls(**kwargs)


def _to_dict(value: Any) -> Any:
    if is_dataclass(value):
        return {f.name: _to_dict(getattr(value, f.name)) for f in fields(value)}
    if isinstance(value, Enum):
        return value.value
    if isinstance(value, (list, tuple)):
        return [_to_dict(item) for item in value]
    return value


def config_from_dict(raw: Dict[str, Any]) -> ExperimentConfig:
    """
    Parse a config document on top of its preset.

    Raises:
        ConfigError: unknown keys, bad enum values, or an invalid combination.
    """
    if not isinstance(raw, dict):
        raise ConfigError("config must be a JSON object")
    preset = raw.get("preset", "desk")
    if preset not in PRESETS:
        raise ConfigError(f"unknown preset {preset!r}, expected one of {sorted(PRESETS)}")
    merged = _merge(copy.deepcopy(PRESETS[preset]), raw)
    cfg = _from_dict(ExperimentConfig, merged, "config")
    if "range_mode" not in merged.get("refu", {}):
        cfg.refu.range_mode = RangeMode.ACC if cfg.sdf_mode is SdfMode.ACC else RangeMode.APPROX
    cfg.validate()
    return cfg


def config_to_dict(cfg: ExperimentConfig) -> Dict[str, Any]:
    return _to_dict(cfg)


def load_config(path: Optional[PathLike] = None, seed: Optional[int] = None,
                output_dir: Optional[PathLike] = None) -> ExperimentConfig:
    """Read a config file (or use the desk preset) and apply command-line overrides."""
    raw: Dict[str, Any] = {}
    if path is not None:
        try:
            with open(path, "r", encoding="utf-8") as file:
                raw = json.load(file)
        except json.JSONDecodeError as error:
            raise ConfigError(f"{path} is not valid JSON: {error}") from error
    if seed is not None:
        raw["seed"] = seed
    if output_dir is not None:
        raw["output_dir"] = str(output_dir)
    return config_from_dict(raw)


def config_hash(cfg: ExperimentConfig) -> str:
    """First 12 hex digits of SHA-256 over the canonical JSON (sorted keys, output_dir left out)."""
    record = config_to_dict(cfg)
    record.pop("output_dir")
    canonical = json.dumps(record, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()[:HASH_LENGTH]


class RunPaths:
    """File locations inside one output directory."""

    def __init__(self, cfg: ExperimentConfig) -> None:
        self.root = Path(cfg.output_dir)
        self.dataset = self.root / "dataset.npz"
        self.obj = self.root / "obj"
        self.sdf = self.root / "sdf.json"
        self.sdf_curve = self.root / "sdf_curve.csv"
        self.sdf_state = self.root / "sdf_state.json"
        self.models = self.root / "models"
        self.backbone = self.models / "backbone.json"
        self.method_models = self.models / cfg.tag
        self.eval = self.root / "eval" / cfg.tag


def _require_file(path: Path, stage: str) -> Path:
    if not path.exists():
        raise CheckpointError(f"missing {path}; run the {stage} stage first")
    return path


def _load_sdf_net(paths: RunPaths):
    return load_checkpoint(paths.sdf) if paths.sdf.exists() else None


def gen_data(cfg: ExperimentConfig) -> SyntheticDataset:
    paths = RunPaths(cfg)
    paths.root.mkdir(parents=True, exist_ok=True)
    dataset = gen_synthetic_dataset(cfg.dataset, cfg.seed)
    save_dataset(dataset, paths.dataset)
    export_obj_frames(dataset, paths.obj, cfg.metrics.obj_exports)
    return dataset


def train_sdf_stage(cfg: ExperimentConfig, resume: bool = False, progress: bool = False):
    """Train the learned SDF on the training bodies; resumes from sdf_state.json when asked."""
    paths = RunPaths(cfg)
    dataset = load_dataset(_require_file(paths.dataset, "gen-data"))
    trainer = SdfTrainer(dataset.sdf_pairs(), cfg.sdf, cfg.seed, progress)
    resume_from = paths.sdf_state if resume and paths.sdf_state.exists() else None
    result = trainer.train(resume_from=resume_from, state_path=paths.sdf_state, curve_path=paths.sdf_curve)
    save_checkpoint(result.net, paths.sdf)
    return result


def train_stage(cfg: ExperimentConfig, progress: bool = False) -> Optional[Backbone]:
    """
    Pre-train the backbone when models/backbone.json is missing, then train the
    method's models (collision-loss fine-tuning or the repulsion layer).
    """
    paths = RunPaths(cfg)
    dataset = load_dataset(_require_file(paths.dataset, "gen-data"))
    engines = EngineSet(_load_sdf_net(paths))
    spec = cfg.training_spec()
    paths.models.mkdir(parents=True, exist_ok=True)
    if paths.backbone.exists():
        backbone = Backbone.load(paths.backbone)
    else:
        result = train_backbone(dataset.train, replace(spec, mode=TrainingMode.BACKBONE), engines,
                                seed=cfg.seed, progress=progress)
        backbone = result.backbone
        backbone.save(paths.backbone)
        write_train_curve(result.curve, paths.models / "backbone_curve.csv")
    if spec.mode is TrainingMode.BACKBONE:
        return backbone
    if cfg.fine_tune:
        result = train_backbone(dataset.train, spec, engines, backbone, seed=cfg.seed, progress=progress)
    else:
        result = train_backbone(dataset.train, spec, engines, epochs=spec.optimizer.epochs, seed=cfg.seed,
                                progress=progress)
    paths.method_models.mkdir(parents=True, exist_ok=True)
    result.backbone.save(paths.method_models / "backbone.json")
    if result.layer is not None and result.layer.networks is not None:
        save_alpha_networks(result.layer.networks, paths.method_models)
    write_train_curve(result.curve, paths.method_models / "train_curve.csv")
    return result.backbone


@dataclass
class FrameOutcome:
    positions: np.ndarray
    report: object
    laplacian_error: Optional[float]
    alpha_data: Optional[Tuple[np.ndarray, np.ndarray, np.ndarray]] = None


class Evaluator:
    """Applies one method to test frames and measures the result against the exact body."""

    def __init__(self, cfg: ExperimentConfig, backbone, layer: Optional[RefuLayer], method_engines: EngineSet,
                 faces: np.ndarray) -> None:
        self.logger = logger
        self.cfg = cfg
        self.backbone = backbone
        self.layer = layer
        self.method_engines = method_engines
        self.metric_engines = EngineSet()
        self.faces = faces

    def evaluate(self, frame: GarmentFrame) -> FrameOutcome:
        cfg = self.cfg
        mesh = TriMesh(self.backbone.predict_frame(frame), self.faces)
        exact = self.metric_engines.exact(frame)
        method = cfg.method
        alpha_data = None
        if method in (Method.NONE, Method.CLOSS):
            positions = mesh.vertices
        elif method is Method.NAIVE:
            positions = naive_postprocess(mesh.vertices, self.method_engines.layer_engine(frame, cfg.sdf_mode))
        elif method is Method.OPTIMIZE:
            positions = optimize_postprocess(mesh.vertices, self.method_engines.layer_engine(frame, cfg.sdf_mode), mesh,
                                             cfg.baseline.laplacian_weight, cfg.baseline.max_iters,
                                             cfg.baseline.margin).positions
        else:
            output = self.layer.forward(frame.parameters, mesh.vertices,
                                        self.method_engines.layer_engine(frame, cfg.sdf_mode))
            positions = output.positions
            if cfg.sdf_mode is not SdfMode.ACC and output.moved.any():
                moved = output.moved
                exact_values = exact.evaluate(mesh.vertices[moved]).values
                alpha_data = (output.sdf_values[moved], exact_values, output.alpha[moved])
        region = collision_region(mesh, detect_vf(mesh, exact))
        result = TriMesh(positions, self.faces)
        report = detect_intersections(result, frame.body.mesh, exact)
        return FrameOutcome(np.array(positions), report,
                            local_laplacian_error(positions, frame.garment.vertices, region, mesh), alpha_data)


def _build_backbone(cfg: ExperimentConfig, paths: RunPaths):
    if cfg.identity_backbone:
        return IdentityBackbone()
    if cfg.method in (Method.CLOSS, Method.REFU_FIXED, Method.REFU_PREDICTED):
        return Backbone.load(_require_file(paths.method_models / "backbone.json", "train"))
    return Backbone.load(_require_file(paths.backbone, "train"))


def _build_layer(cfg: ExperimentConfig, paths: RunPaths) -> Optional[RefuLayer]:
    spec = cfg.training_spec()
    if spec.mode is not TrainingMode.REFU:
        return None
    networks = None
    if spec.refu.scale_mode is ScaleMode.PREDICTED:
        _require_file(paths.method_models / "alpha.json", "train")
        networks = load_alpha_networks(paths.method_models)
    return RefuLayer(spec.refu, networks)


def _per_frame_ms(seconds: float, frames: int) -> Optional[float]:
    return 1000.0 * seconds / frames if frames else None


def run_experiment(cfg: ExperimentConfig, timings: bool = False, workers: int = NUM_WORKERS) -> MetricsReport:
    """
    Evaluate the configured method on the test split and write the report files.

    Timing columns are filled only when `timings` is set, so two runs without it write
    identical bytes.

    Raises:
        CheckpointError: if a dataset or model file the method needs is missing.
    """
    paths = RunPaths(cfg)
    dataset = load_dataset(_require_file(paths.dataset, "gen-data"))
    needs_learned_sdf = cfg.sdf_mode is not SdfMode.ACC and cfg.method not in (Method.NONE, Method.CLOSS)
    sdf_net = load_checkpoint(_require_file(paths.sdf, "train-sdf")) if needs_learned_sdf else None
    evaluator = Evaluator(cfg, _build_backbone(cfg, paths), _build_layer(cfg, paths), EngineSet(sdf_net),
                          dataset.garment_faces)
    with ThreadPoolExecutor(max_workers=workers) as pool:
        outcomes = list(pool.map(evaluator.evaluate, dataset.test))

    reports = [outcome.report for outcome in outcomes]
    summary = summarize(cfg.method_label, cfg.sdf_mode.value, [o.positions for o in outcomes],
                        [frame.garment.vertices for frame in dataset.test], reports,
                        [o.laplacian_error for o in outcomes], cfg.metrics.histogram_bins)
    if cfg.metrics.histogram_upper is not None:
        edges, counts = energy_histogram(summary.energies, cfg.metrics.histogram_bins, cfg.metrics.histogram_upper)
        summary.histogram = dict(summary.histogram, bin_edges=edges, counts=counts)
    summary.config_hash = config_hash(cfg)
    summary.seed = cfg.seed
    frames = len(dataset.test)
    if timings:
        engine_times = evaluator.method_engines.timings()
        kind = "exact_seconds" if cfg.sdf_mode is SdfMode.ACC else "neural_seconds"
        summary.t_sdf_ms = _per_frame_ms(engine_times[kind], frames) if cfg.method not in (
            Method.NONE, Method.CLOSS) else None
        summary.t_refu_ms = _per_frame_ms(evaluator.layer.seconds, evaluator.layer.calls) \
            if evaluator.layer is not None else None
        summary.t_backbone_ms = _per_frame_ms(evaluator.backbone.seconds, frames)

    paths.eval.mkdir(parents=True, exist_ok=True)
    notes = [OPTIMIZE_LABEL] if cfg.method is Method.OPTIMIZE else []
    if cfg.identity_backbone:
        notes.append("identity backbone: ground truth fed to the collision handler")
    write_metrics_csv([summary], paths.eval / "metrics.csv")
    write_metrics_json([summary], paths.eval / "metrics.json", notes)
    write_json(histograms_payload([summary]), paths.eval / "histogram.json")
    alpha_rows = [o.alpha_data for o in outcomes if o.alpha_data is not None]
    bars = alpha_ratio_buckets(*(np.concatenate(parts) for parts in zip(*alpha_rows))) if alpha_rows else []
    write_json(bars, paths.eval / "alpha_bars.json")
    write_json(distance_buckets(dataset.test_distances, reports, cfg.metrics.distance_buckets),
               paths.eval / "distance_buckets.json")
    for frame, outcome in list(zip(dataset.test, outcomes))[:cfg.metrics.obj_exports]:
        save_obj(TriMesh(outcome.positions, dataset.garment_faces), paths.eval / f"pred_{frame.index:05d}.obj")
    if timings:
        write_json(benchmark_timings(cfg), paths.eval / "timings.json")
    logger.info("Evaluation finished", extra={"fields": dict(summary.to_row())})
    return summary


def build_report(output_dir: PathLike) -> List[dict]:
    """Collect every eval/*/metrics.json under the output directory into report.csv and report.json."""
    root = Path(output_dir)
    rows = []
    for path in sorted((root / "eval").glob("*/metrics.json")):
        with open(path, "r", encoding="utf-8") as file:
            rows.extend(json.load(file)["rows"])
    write_rows_csv(rows, root / "report.csv")
    write_json(rows, root / "report.json")
    return rows


def benchmark_timings(cfg: ExperimentConfig, frames: int = 4) -> Dict[str, Any]:
    """
    Per-frame query cost of the exact SDF versus the learned SDF at the config's network
    preset, on the garment vertices of freshly generated frames. Network weights are
    random: only the cost is measured.
    """
    template = body_template(cfg.dataset)
    samples = [generate_frame(template, cfg.dataset, cfg.seed, index) for index in range(frames)]
    net = build_sdf_network(cfg.sdf, samples[0].body.conditioning().size, np.random.default_rng([cfg.seed, 40]))
    exact_seconds = neural_seconds = 0.0
    for frame in samples:
        exact = ExactSdf(frame.body.mesh)
        exact.evaluate(frame.garment.vertices)
        exact_seconds += exact.query_seconds
        neural = NeuralSdf(net, frame.body.conditioning())
        neural.evaluate(frame.garment.vertices)
        neural_seconds += neural.query_seconds
    return {"preset": cfg.preset, "frames": frames, "points_per_frame": int(template.band_vertices.size),
            "sdf_parameters": net.parameter_count(),
            "exact_ms_per_frame": 1000.0 * exact_seconds / frames,
            "neural_ms_per_frame": 1000.0 * neural_seconds / frames}


@dataclass
class WedgeAblationResult:
    """Edge-crossing counts on held-out wedge scenes for a fixed and a learned scale."""
    fixed_avg_ee: float
    predicted_avg_ee: float
    fixed_cfmp: float
    predicted_cfmp: float
    alpha_parameters: int
    final_loss: float
    curve: List[float] = field(default_factory=list, repr=False)


def run_wedge_ablation(seed: int = 0, variant: AlphaVariant = AlphaVariant.MAIN, train_scenes: int = 32,
                       test_scenes: int = 16, steps: int = 400, learning_rate: float = 5e-3,
                       lambda_r: float = 1.5, lambda_c: float = 0.5) -> WedgeAblationResult:
    """
    Train the alpha networks on a family of wedge scenes with the exact SDF (the garment
    positions are given, nothing else is learned) and compare edge crossings against
    alpha fixed to 1 on held-out scenes.
    """
    rng = np.random.default_rng([seed, 30])
    train = wedge_family(train_scenes, rng)
    test = wedge_family(test_scenes, rng, train[0].body)
    engine = ExactSdf(train[0].body)
    params = np.stack([scene.parameters for scene in train])
    mean, scale = params.mean(axis=0), params.std(axis=0)
    scale[scale == 0] = 1.0
    cfg = RefuConfig(latent_width=16, vertex_latent_width=4, h_width=32, g_width=10, scale_mode=ScaleMode.PREDICTED,
                     range_mode=RangeMode.ACC, sdf_mode=SdfMode.ACC, variant=variant)
    networks = build_refu_networks(cfg, params.shape[1], train[0].garment.vertex_count,
                                   np.random.default_rng([seed, 31]))
    layer = RefuLayer(cfg, networks)
    named = networks.named()
    adams = {name: AdamState.for_parameters(net.parameters(), learning_rate) for name, net in named.items()}
    curve = []
    for step in range(steps):
        grads: Dict[str, list] = {}
        loss = 0.0
        for scene in train:
            output = layer.forward((scene.parameters - mean) / scale, scene.garment.vertices, engine)
            diff = output.positions - scene.target
            query = engine.evaluate(output.positions)
            penetrating = query.values < 0
            loss += lambda_r * float(np.sum(diff * diff)) - lambda_c * float(query.values[penetrating].sum())
            u = 2.0 * lambda_r * diff
            u[penetrating] -= lambda_c * query.gradients[penetrating]
            for name, value in layer.backward(output, u / len(train)).networks.items():
                grads[name] = add_gradients(grads[name], value) if name in grads else value
        loss /= len(train)
        if not np.isfinite(loss):
            raise TrainingDivergedError(f"wedge ablation loss {loss} at step {step}")
        for name, value in grads.items():
            optimizer_step(named[name], adams[name], value)
        curve.append(loss)
        if (step + 1) % 100 == 0:
            logger.info("Wedge ablation step", extra={"fields": {"step": step + 1, "loss": loss}})

    fixed = RefuLayer(replace(cfg, scale_mode=ScaleMode.FIXED))
    fixed_reports, predicted_reports = [], []
    for scene in test:
        for chosen, reports in ((fixed, fixed_reports), (layer, predicted_reports)):
            output = chosen.forward((scene.parameters - mean) / scale, scene.garment.vertices, engine)
            reports.append(detect_intersections(scene.garment.with_vertices(output.positions), scene.body, engine))
    return WedgeAblationResult(avg_ee(fixed_reports), avg_ee(predicted_reports), cfmp(fixed_reports),
                               cfmp(predicted_reports), networks.parameter_count(), curve[-1] if curve else 0.0, curve)
