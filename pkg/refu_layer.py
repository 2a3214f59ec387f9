"""
Repulsive force unit.

Every garment vertex with f(x) < 0 is moved along the normalized SDF gradient:

    x' = x - alpha * f(x) * grad f(x) / |grad f(x)|

and every other vertex is left where it is. alpha is either fixed to 1 or predicted
per vertex from the frame parameters (shape, pose, style) and the vertex's SDF value:

    main: alpha_i = g(k(z)_i, f(x_i)),  z = h(params)   one latent of width D per vertex
    alt1: alpha_i = g(k'(z), f(x_i))                    one shared latent of width D'
    alt2: alpha_i = g'(f(x_i))                          SDF value only

The final activation sets the range: 1 + softplus for the exact engine (alpha >= 1),
softplus for the learned one (alpha >= 0).
"""
import threading
import time
from dataclasses import dataclass, field
from typing import List, Optional, Sequence

import numpy as np
from scipy.special import expit

from logger import get_logger
from nn_core import ForwardCache, MissingCacheError, Mlp, NetworkShapeError, backward, forward_with_cache, init_mlp
from refu_datatypes import Activation, AlphaBucketRecord, AlphaVariant, RangeMode, ScaleMode, SdfMode
from sdf_exact import SdfEngine

logger = get_logger("refu")

GRADIENT_GUARD: float = 1e-9
ALPHA_BUCKET_EDGES: List[float] = [0.0, 0.25, 0.75, 1.25, 1.75, 2.25, 2.75, float("inf")]


@dataclass
class RefuConfig:
    """
    Wiring of the repulsion layer.

    Attributes:
        latent_width (int): global latent width M.
        vertex_latent_width (int): per-vertex latent width D.
        h_width (int): hidden width of h (two hidden layers, then M outputs).
        g_width (int): hidden width of g (two hidden layers).
        scale_mode (ScaleMode): fixed alpha = 1 or predicted.
        range_mode (RangeMode): acc (alpha >= 1) or approx (alpha >= 0).
        sdf_mode (SdfMode): engine used in the layer and in the collision loss.
        variant (AlphaVariant): network wiring for alpha.
    """
    latent_width: int = 64
    vertex_latent_width: int = 10
    h_width: int = 128
    g_width: int = 10
    scale_mode: ScaleMode = ScaleMode.PREDICTED
    range_mode: RangeMode = RangeMode.ACC
    sdf_mode: SdfMode = SdfMode.HYBRID
    variant: AlphaVariant = AlphaVariant.MAIN

    def validate(self) -> None:
        if min(self.latent_width, self.vertex_latent_width, self.h_width, self.g_width) < 1:
            raise ValueError(f"RefuConfig widths must be positive: {self}")


@dataclass
class RefuNetworks:
    """
    Networks computing alpha. `h` and `k` are None for alt2; `k` maps M to N*D (main)
    or to D' (alt1).
    """
    variant: AlphaVariant
    vertex_count: int
    h: Optional[Mlp]
    k: Optional[Mlp]
    g: Mlp

    def named(self) -> dict:
        return {name: net for name, net in (("h", self.h), ("k", self.k), ("g", self.g)) if net is not None}

    def parameter_count(self) -> int:
        return sum(net.parameter_count() for net in self.named().values())


def _g_count(input_width: int, width: int) -> int:
    return (input_width + 1) * width + (width + 1) * width + width + 1


def _h_widths(cfg: RefuConfig, parameter_width: int) -> List[int]:
    return [parameter_width, cfg.h_width, cfg.h_width, cfg.latent_width]


def _mlp_count(widths: Sequence[int]) -> int:
    return sum((a + 1) * b for a, b in zip(widths[:-1], widths[1:]))


def main_parameter_count(cfg: RefuConfig, parameter_width: int, vertex_count: int) -> int:
    latent = vertex_count * cfg.vertex_latent_width
    return (_mlp_count(_h_widths(cfg, parameter_width)) + (cfg.latent_width + 1) * latent
            + _g_count(cfg.vertex_latent_width + 1, cfg.g_width))


def shared_latent_width(cfg: RefuConfig, parameter_width: int, vertex_count: int) -> int:
    """D' such that the alt1 networks have the parameter count of the main ones."""
    target = main_parameter_count(cfg, parameter_width, vertex_count)
    fixed = _mlp_count(_h_widths(cfg, parameter_width)) + _g_count(1, cfg.g_width)
    return max(1, int(round((target - fixed) / (cfg.latent_width + 1 + cfg.g_width))))


def sdf_only_width(cfg: RefuConfig, parameter_width: int, vertex_count: int) -> int:
    """Hidden width W of g' = [1, W, W, 1], with W^2 + 4W + 1 matching the main parameter count."""
    target = main_parameter_count(cfg, parameter_width, vertex_count)
    return max(1, int(round(-2.0 + np.sqrt(3.0 + target))))


def build_refu_networks(cfg: RefuConfig, parameter_width: int, vertex_count: int,
                        rng: np.random.Generator) -> RefuNetworks:
    """Initialise h, k (or k') and g (or g') for one garment topology."""
    cfg.validate()
    if cfg.variant is AlphaVariant.ALT2:
        width = sdf_only_width(cfg, parameter_width, vertex_count)
        g = init_mlp([1, width, width, 1], rng, Activation.RELU)
        return RefuNetworks(cfg.variant, vertex_count, None, None, g)
    h = init_mlp(_h_widths(cfg, parameter_width), rng, Activation.RELU)
    if cfg.variant is AlphaVariant.MAIN:
        latent = cfg.vertex_latent_width
        k = init_mlp([cfg.latent_width, vertex_count * latent], rng)
    else:
        latent = shared_latent_width(cfg, parameter_width, vertex_count)
        k = init_mlp([cfg.latent_width, latent], rng)
    g = init_mlp([latent + 1, cfg.g_width, cfg.g_width, 1], rng, Activation.RELU)
    return RefuNetworks(cfg.variant, vertex_count, h, k, g)


def global_latent(params: np.ndarray, h: Mlp) -> np.ndarray:
    """
    z = h(shape, pose, style).

    Raises:
        NetworkShapeError: if the parameter vector does not match h.
    """
    z = forward_with_cache(h, params)[0]
    return z[0] if np.ndim(params) == 1 else z


def _alpha_from_pre(pre: np.ndarray, range_mode: RangeMode) -> np.ndarray:
    alpha = np.logaddexp(0.0, pre)
    return alpha + 1.0 if range_mode is RangeMode.ACC else alpha


@dataclass
class ScaleCache:
    params: np.ndarray
    h_cache: Optional[ForwardCache]
    k_cache: Optional[ForwardCache]
    g_cache: ForwardCache
    pre: np.ndarray


def _scale_from_latent(networks: RefuNetworks, z: Optional[np.ndarray], f_values: np.ndarray, range_mode: RangeMode):
    f_column = np.asarray(f_values, dtype=np.float64).reshape(-1, 1)
    n = f_column.shape[0]
    k_cache = None
    if networks.variant is AlphaVariant.ALT2:
        g_in = f_column
    else:
        if z is None:
            raise NetworkShapeError("main and alt1 scale networks need the global latent")
        latent, k_cache = forward_with_cache(networks.k, np.asarray(z, dtype=np.float64).reshape(1, -1))
        if networks.variant is AlphaVariant.MAIN:
            if n != networks.vertex_count:
                raise NetworkShapeError(f"k is bound to {networks.vertex_count} vertices, got {n}")
            latent = latent.reshape(n, -1)
        else:
            latent = np.tile(latent.reshape(1, -1), (n, 1))
        g_in = np.concatenate([latent, f_column], axis=1)
    pre, g_cache = forward_with_cache(networks.g, g_in)
    pre = pre[:, 0]
    return _alpha_from_pre(pre, range_mode), ScaleCache(None, None, k_cache, g_cache, pre)


def _scale_forward(networks: RefuNetworks, params: Optional[np.ndarray], f_values: np.ndarray,
                   range_mode: RangeMode):
    z = h_cache = None
    if networks.variant is not AlphaVariant.ALT2:
        if params is None:
            raise NetworkShapeError("main and alt1 scale networks need the frame parameters")
        z, h_cache = forward_with_cache(networks.h, params)
    alpha, cache = _scale_from_latent(networks, z, f_values, range_mode)
    cache.params = params
    cache.h_cache = h_cache
    return alpha, cache


def predict_scale(z: Optional[np.ndarray], f_values: np.ndarray, cfg: RefuConfig,
                  networks: Optional[RefuNetworks] = None) -> np.ndarray:
    """
    Per-vertex alpha for one frame.

    Args:
        z (np.ndarray, optional): global latent from `global_latent`; unused by alt2.
        f_values (np.ndarray): (N,) signed SDF values of the garment vertices.
        cfg (RefuConfig): scale and range mode.
        networks (RefuNetworks, optional): required in predicted mode.

    Returns:
        np.ndarray: (N,) scales, >= 1 in acc range mode and >= 0 in approx range mode.
    """
    f_values = np.asarray(f_values, dtype=np.float64).reshape(-1)
    if cfg.scale_mode is ScaleMode.FIXED:
        return np.ones_like(f_values)
    if networks is None:
        raise NetworkShapeError("predicted scale needs the alpha networks")
    return _scale_from_latent(networks, z, f_values, cfg.range_mode)[0]


@dataclass
class RefuCache:
    """What the backward pass needs from `apply_refu`."""
    points: np.ndarray
    gradients: np.ndarray
    gradient_norms: np.ndarray
    unit_gradients: np.ndarray
    engine: SdfEngine
    scale: Optional[ScaleCache] = None


@dataclass
class RefuOutput:
    """
    Result of the layer for one frame.

    Attributes:
        positions (np.ndarray): (N, 3) output positions.
        alpha (np.ndarray): (N,) scale per vertex.
        sdf_values (np.ndarray): (N,) f at the input positions.
        moved (np.ndarray): (N,) vertices displaced (f < 0 and a usable gradient).
        degenerate (np.ndarray): (N,) penetrating vertices left in place because |grad f| < 1e-9.
    """
    positions: np.ndarray
    alpha: np.ndarray
    sdf_values: np.ndarray
    moved: np.ndarray
    degenerate: np.ndarray
    cache: Optional[RefuCache] = field(default=None, repr=False)


@dataclass
class RefuGradients:
    """
    Cotangents produced by `refu_backward`.

    Attributes:
        positions (np.ndarray): (N, 3) cotangent of the input positions (the backbone output).
        alpha (np.ndarray): (N,) cotangent of alpha.
        networks (dict): weight gradients per network name (empty in fixed mode).
        params (np.ndarray, optional): cotangent of the frame parameters.
    """
    positions: np.ndarray
    alpha: np.ndarray
    networks: dict
    params: Optional[np.ndarray] = None


def _displace(positions: np.ndarray, query, alpha: np.ndarray, engine: SdfEngine) -> RefuOutput:
    values = query.values
    norms = np.linalg.norm(query.gradients, axis=1)
    penetrating = values < 0
    degenerate = penetrating & (norms < GRADIENT_GUARD)
    moved = penetrating & ~degenerate
    unit = np.divide(query.gradients, norms[:, None], out=np.zeros_like(query.gradients),
                     where=norms[:, None] >= GRADIENT_GUARD)
    out = positions.copy()
    out[moved] -= (alpha[moved] * values[moved])[:, None] * unit[moved]
    if degenerate.any():
        logger.warning("%d penetrating vertices have a vanishing SDF gradient and stay in place",
                       int(degenerate.sum()))
    cache = RefuCache(positions, query.gradients, norms, unit, engine)
    return RefuOutput(out, alpha, values, moved, degenerate, cache)


def apply_refu(positions: np.ndarray, engine: SdfEngine, alpha) -> RefuOutput:
    """
    Move penetrating vertices out along the normalized SDF gradient by alpha * |f|.

    Args:
        positions (np.ndarray): (N, 3) garment vertices.
        engine (SdfEngine): SDF bound to the current body.
        alpha: scalar or (N,) scales.

    Returns:
        RefuOutput: positions plus per-vertex diagnostics.
    """
    positions = np.asarray(positions, dtype=np.float64).reshape(-1, 3)
    alpha = np.broadcast_to(np.asarray(alpha, dtype=np.float64), (positions.shape[0],)).copy()
    return _displace(positions, engine.evaluate(positions), alpha, engine)


def refu_backward(output: RefuOutput, upstream: np.ndarray,
                  networks: Optional[RefuNetworks] = None) -> RefuGradients:
    """
    Reverse-mode pass through the displacement and, when the output came from a
    predicted scale, through g, k and h.

    For a moved vertex with u the upstream cotangent, g_hat the unit gradient and
    P = I - g_hat g_hat^T:
        alpha_bar = -f (u . g_hat)
        f_bar     = -alpha (u . g_hat) + (d alpha / d f) alpha_bar
        x_bar     = u + f_bar grad f - alpha f H P u / |grad f|
    The exact engine reports H = 0.

    Raises:
        MissingCacheError: if the output carries no forward cache.
    """
    cache = output.cache
    if cache is None:
        raise MissingCacheError("RefuOutput has no forward cache")
    u = np.asarray(upstream, dtype=np.float64).reshape(output.positions.shape)
    moved = output.moved
    x_bar = u.copy()
    alpha_bar = np.zeros(u.shape[0])
    f_bar = np.zeros(u.shape[0])
    grads: dict = {}
    params_bar = None
    if not moved.any():
        return RefuGradients(x_bar, alpha_bar, grads, params_bar)

    unit = cache.unit_gradients[moved]
    f = output.sdf_values[moved]
    alpha = output.alpha[moved]
    s = np.einsum("ij,ij->i", u[moved], unit)
    alpha_bar[moved] = -f * s
    f_bar[moved] = -alpha * s

    scale = cache.scale
    if scale is not None:
        if networks is None:
            raise MissingCacheError("predicted-scale output needs its networks for the backward pass")
        pre_bar = alpha_bar * expit(scale.pre)
        grads["g"], g_in_bar = backward(networks.g, scale.g_cache, pre_bar[:, None])
        f_bar += g_in_bar[:, -1]
        if networks.variant is not AlphaVariant.ALT2:
            latent_bar = g_in_bar[:, :-1]
            if networks.variant is AlphaVariant.MAIN:
                latent_bar = latent_bar.reshape(1, -1)
            else:
                latent_bar = latent_bar.sum(axis=0, keepdims=True)
            grads["k"], z_bar = backward(networks.k, scale.k_cache, latent_bar)
            if scale.h_cache is not None:
                grads["h"], params_bar = backward(networks.h, scale.h_cache, z_bar)
                params_bar = params_bar[0]

    x_bar[moved] += f_bar[moved][:, None] * cache.gradients[moved]
    projected = u[moved] - s[:, None] * unit
    hv = cache.engine.hessian_vector(cache.points[moved], projected)
    x_bar[moved] -= (alpha * f / cache.gradient_norms[moved])[:, None] * hv
    return RefuGradients(x_bar, alpha_bar, grads, params_bar)


class RefuLayer:
    """
    Layer chaining global_latent -> predict_scale -> apply_refu for one garment topology.

    Per-call timing is accumulated in `seconds` / `calls` under a lock.
    """

    def __init__(self, cfg: RefuConfig, networks: Optional[RefuNetworks] = None) -> None:
        self.logger = logger
        self.cfg = cfg
        if cfg.scale_mode is ScaleMode.PREDICTED and networks is None:
            raise NetworkShapeError("predicted scale mode needs alpha networks")
        self.networks = networks if cfg.scale_mode is ScaleMode.PREDICTED else None
        self.seconds = 0.0
        self.calls = 0
        self._timing_lock = threading.Lock()

    def forward(self, params: Optional[np.ndarray], positions: np.ndarray, engine: SdfEngine) -> RefuOutput:
        start = time.perf_counter()
        positions = np.asarray(positions, dtype=np.float64).reshape(-1, 3)
        query = engine.evaluate(positions)
        if self.networks is None:
            output = _displace(positions, query, np.ones(positions.shape[0]), engine)
        else:
            alpha, scale_cache = _scale_forward(self.networks, params, query.values, self.cfg.range_mode)
            output = _displace(positions, query, alpha, engine)
            output.cache.scale = scale_cache
        elapsed = time.perf_counter() - start
        with self._timing_lock:
            self.seconds += elapsed
            self.calls += 1
        return output

    def backward(self, output: RefuOutput, upstream: np.ndarray) -> RefuGradients:
        return refu_backward(output, upstream, self.networks)


def alpha_ratio_buckets(approx_values: np.ndarray, exact_values: np.ndarray, alpha: np.ndarray,
                        edges: Sequence[float] = ALPHA_BUCKET_EDGES) -> List[AlphaBucketRecord]:
    """
    Mean alpha of resolved vertices grouped by the ratio approx SDF / exact SDF.

    Only vertices inside the body by both fields take part; bucket i holds ratios in
    (edges[i], edges[i + 1]]. An infinite upper edge is reported as None.
    """
    approx_values = np.asarray(approx_values, dtype=np.float64).reshape(-1)
    exact_values = np.asarray(exact_values, dtype=np.float64).reshape(-1)
    alpha = np.asarray(alpha, dtype=np.float64).reshape(-1)
    usable = (approx_values < 0) & (exact_values < 0)
    ratio = approx_values[usable] / exact_values[usable]
    alpha = alpha[usable]
    records: List[AlphaBucketRecord] = []
    for lower, upper in zip(edges[:-1], edges[1:]):
        inside = (ratio > lower) & (ratio <= upper)
        count = int(inside.sum())
        records.append(AlphaBucketRecord(lower=float(lower),
                                         upper=None if np.isinf(upper) else float(upper),
                                         count=count,
                                         mean_alpha=float(alpha[inside].mean()) if count else None))
    return records
