"""
Datatypes shared across the collision-handling modules: enumerations used in
configs and serialized records, and the TypedDicts written to checkpoints and reports.
"""
from enum import Enum, IntEnum
from typing import List, Optional, TypedDict


class Activation(Enum):
    """
    Activation applied after a dense layer.

    Attributes:
        RELU (str): max(z, 0), with the subgradient at 0 taken as 0.
        SOFTPLUS (str): log(1 + exp(beta * z)) / beta, evaluated in a stable form.
        IDENTITY (str): no activation.
    """
    RELU = "relu"
    SOFTPLUS = "softplus"
    IDENTITY = "identity"


class SampleCategory(IntEnum):
    """Origin of an SDF training sample. Stored as small ints inside sample arrays."""
    BODY_SURFACE = 0
    BODY_DISTURBED = 1
    GARMENT_SURFACE = 2
    GARMENT_DISTURBED = 3
    BBOX = 4


class ScaleMode(Enum):
    """Whether the moving-offset scale is fixed to 1 or predicted by networks."""
    FIXED = "fixed"
    PREDICTED = "predicted"


class RangeMode(Enum):
    """
    Output range of the predicted scale.

    Attributes:
        ACC (str): alpha in [1, inf), used with the exact body SDF.
        APPROX (str): alpha in [0, inf), used with the learned body SDF.
    """
    ACC = "acc"
    APPROX = "approx"


class SdfMode(Enum):
    """
    Which SDF engine feeds the repulsion layer and the collision loss.

    Attributes:
        APPROX (str): learned SDF everywhere.
        ACC (str): exact SDF everywhere.
        HYBRID (str): exact SDF for the training-time collision loss, learned SDF in the layer.
    """
    APPROX = "approx"
    ACC = "acc"
    HYBRID = "hybrid"


class AlphaVariant(Enum):
    """
    Network wiring that predicts the per-vertex scale.

    Attributes:
        MAIN (str): alpha_i = g(k(z)_i, f(x_i)), one latent per vertex.
        ALT1 (str): alpha_i = g(k'(z), f(x_i)), one shared latent.
        ALT2 (str): alpha_i = g'(f(x_i)), SDF value only.
    """
    MAIN = "main"
    ALT1 = "alt1"
    ALT2 = "alt2"


class Method(Enum):
    """Collision handling method evaluated by an experiment."""
    NONE = "none"
    NAIVE = "naive"
    OPTIMIZE = "optimize"
    CLOSS = "closs"
    REFU_FIXED = "refu-fixed"
    REFU_PREDICTED = "refu-predicted"


class TrainingMode(Enum):
    """
    Backbone training modes.

    Attributes:
        BACKBONE (str): reconstruction loss only.
        COLLISION_LOSS (str): reconstruction plus collision loss, no repulsion layer.
        REFU (str): repulsion layer attached, reconstruction plus collision loss on its output.
    """
    BACKBONE = "backbone"
    COLLISION_LOSS = "collision-loss"
    REFU = "refu"


class ContactType(Enum):
    """Classification of a colliding garment triangle."""
    VF = "vf"
    EE = "ee"


class LayerRecord(TypedDict):
    """
    One dense layer inside a network checkpoint. Weights are stored row-major.
    """
    in_width: int
    out_width: int
    activation: str
    beta: float
    weight: List[float]
    bias: List[float]


class CheckpointRecord(TypedDict):
    """
    Network checkpoint container.

    Attributes:
        format (str): always "refu-mlp".
        version (int): container version, currently 1.
        input_width (int): width of the network input.
        skip_layer (Optional[int]): index of the layer that also receives the network input.
        layers (List[LayerRecord]): dense layers in evaluation order.
    """
    format: str
    version: int
    input_width: int
    skip_layer: Optional[int]
    layers: List[LayerRecord]


class MetricsRow(TypedDict):
    """
    One row of metrics.csv. Timing fields are None when timings were not recorded;
    config_hash and seed identify the run that produced the row.
    """
    method: str
    sdf_mode: str
    MPVE_mm: float
    VFCP_pct: float
    CFMP_pct: float
    avg_VF: float
    avg_EE: float
    pen_energy: float
    lap_err_mm: Optional[float]
    t_sdf_ms: Optional[float]
    t_refu_ms: Optional[float]
    t_backbone_ms: Optional[float]
    config_hash: str
    seed: int


class HistogramRecord(TypedDict):
    """Penetration-energy histogram for one method/setting."""
    method: str
    sdf_mode: str
    bin_edges: List[float]
    counts: List[int]


class AlphaBucketRecord(TypedDict):
    """Mean predicted scale over resolved vertices whose approx/exact SDF ratio falls in (lower, upper]."""
    lower: float
    upper: Optional[float]
    count: int
    mean_alpha: Optional[float]


class DistanceBucketRecord(TypedDict):
    """Collision metrics over test frames grouped by distance to the training set."""
    bucket: str
    frames: int
    min_distance: float
    max_distance: float
    VFCP_pct: float
    CFMP_pct: float


METRICS_COLUMNS: List[str] = [
    "method", "sdf_mode", "MPVE_mm", "VFCP_pct", "CFMP_pct", "avg_VF", "avg_EE",
    "pen_energy", "lap_err_mm", "t_sdf_ms", "t_refu_ms", "t_backbone_ms", "config_hash", "seed",
]
SDF_CURVE_COLUMNS: List[str] = ["epoch", "L_v", "L_sg", "L_se", "MAE", "MRE", "eikonal_dev"]
