"""
Dense networks with hand-written differentiation.

Every network in the repo is an `Mlp`: a chain of dense layers, each followed by
ReLU, Softplus(beta) or nothing, with an optional skip connection that concatenates
the network input to the input of one layer. Inputs are batched row-wise: x has
shape (B, input_width).

Three differentiation paths are provided:

* `backward`: reverse mode, weight gradients and the input cotangent.
* `input_jacobian_vector`: forward mode, directional derivative along an input tangent.
* `dual_backward`: reverse mode through the forward-mode computation. For a scalar
  network this gives the weight gradients of sum(G . grad_x f), which is what the
  normal and Eikonal losses need, and the Hessian-vector product H @ G.

Checkpoint format (JSON, UTF-8)::

    {"format": "refu-mlp", "version": 1, "input_width": int, "skip_layer": int | null,
     "layers": [{"in_width", "out_width", "activation", "beta", "weight", "bias"}, ...]}

`weight` is the (out_width, in_width) matrix flattened row-major. Floats are written
with Python's shortest round-trip repr, so save/load is exact in float64.
"""
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy.special import expit

from logger import get_logger
from refu_datatypes import Activation, CheckpointRecord, LayerRecord

logger = get_logger("nn")

CHECKPOINT_FORMAT = "refu-mlp"
CHECKPOINT_VERSION = 1
TRAINING_STATE_FORMAT = "refu-training-state"
DEFAULT_SOFTPLUS_BETA: float = 100.0

Parameters = List[np.ndarray]
PathLike = Union[str, Path]


class NetworkShapeError(ValueError):
    """Raised when layer widths, inputs or parameter lists do not compose."""


class MissingCacheError(RuntimeError):
    """Raised when a backward pass has no matching forward cache."""


class CheckpointError(ValueError):
    """Raised when a checkpoint file cannot be interpreted."""


class TrainingDivergedError(RuntimeError):
    """Raised when a training loss stops being finite."""


@dataclass
class DenseLayer:
    """
    z = a @ weight.T + bias, followed by the activation.

    Attributes:
        weight (np.ndarray): (out_width, in_width).
        bias (np.ndarray): (out_width,).
        activation (Activation): nonlinearity after the affine map.
        beta (float): Softplus sharpness, ignored by the other activations.
    """
    weight: np.ndarray
    bias: np.ndarray
    activation: Activation = Activation.IDENTITY
    beta: float = DEFAULT_SOFTPLUS_BETA

    @property
    def in_width(self) -> int:
        return int(self.weight.shape[1])

    @property
    def out_width(self) -> int:
        return int(self.weight.shape[0])


class Mlp:
    """
    Ordered dense layers with an optional skip connection.

    When `skip_layer` is s, layer s receives the concatenation (output of layer s-1,
    network input), so its input width is the previous width plus `input_width`.
    """

    def __init__(self, layers: Sequence[DenseLayer], input_width: int, skip_layer: Optional[int] = None) -> None:
        self.layers: List[DenseLayer] = list(layers)
        self.input_width = int(input_width)
        self.skip_layer = skip_layer
        self.version = 0
        self._validate()

    def _validate(self) -> None:
        if not self.layers:
            raise NetworkShapeError("network needs at least one layer")
        if self.skip_layer is not None and not 0 < self.skip_layer < len(self.layers):
            raise NetworkShapeError(f"skip layer {self.skip_layer} outside 1..{len(self.layers) - 1}")
        width = self.input_width
        for index, layer in enumerate(self.layers):
            if layer.bias.shape != (layer.out_width,):
                raise NetworkShapeError(f"layer {index} bias shape {layer.bias.shape} != ({layer.out_width},)")
            expected = width + (self.input_width if index == self.skip_layer else 0)
            if layer.in_width != expected:
                raise NetworkShapeError(f"layer {index} expects input width {layer.in_width}, receives {expected}")
            width = layer.out_width

    @property
    def output_width(self) -> int:
        return self.layers[-1].out_width

    def parameters(self) -> Parameters:
        """[W0, b0, W1, b1, ...], the arrays themselves (not copies)."""
        params: Parameters = []
        for layer in self.layers:
            params += [layer.weight, layer.bias]
        return params

    def set_parameters(self, params: Parameters) -> None:
        """Replace every weight and bias; invalidates outstanding forward caches."""
        if len(params) != 2 * len(self.layers):
            raise NetworkShapeError(f"expected {2 * len(self.layers)} parameter arrays, got {len(params)}")
        for index, layer in enumerate(self.layers):
            weight, bias = params[2 * index], params[2 * index + 1]
            if weight.shape != layer.weight.shape or bias.shape != layer.bias.shape:
                raise NetworkShapeError(f"layer {index}: got {weight.shape}/{bias.shape}, "
                                        f"expected {layer.weight.shape}/{layer.bias.shape}")
            layer.weight = np.array(weight, dtype=np.float64)
            layer.bias = np.array(bias, dtype=np.float64)
        self.version += 1

    def parameter_count(self) -> int:
        return int(sum(p.size for p in self.parameters()))

    def copy(self) -> "Mlp":
        layers = [DenseLayer(l.weight.copy(), l.bias.copy(), l.activation, l.beta) for l in self.layers]
        return Mlp(layers, self.input_width, self.skip_layer)


def init_mlp(widths: Sequence[int], rng: np.random.Generator, activation: Activation = Activation.SOFTPLUS,
             output_activation: Activation = Activation.IDENTITY, beta: float = DEFAULT_SOFTPLUS_BETA,
             skip_layer: Optional[int] = None) -> Mlp:
    """
    Build a network with widths [input, hidden..., output] and uniform(-1/sqrt(fan_in), 1/sqrt(fan_in))
    weights and biases.
    """
    widths = [int(w) for w in widths]
    if len(widths) < 2 or min(widths) < 1:
        raise NetworkShapeError(f"invalid widths {widths}")
    layers = []
    count = len(widths) - 1
    for index in range(count):
        fan_in = widths[index] + (widths[0] if index == skip_layer else 0)
        bound = 1.0 / np.sqrt(fan_in)
        weight = rng.uniform(-bound, bound, size=(widths[index + 1], fan_in))
        bias = rng.uniform(-bound, bound, size=widths[index + 1])
        act = output_activation if index == count - 1 else activation
        layers.append(DenseLayer(weight, bias, act, beta))
    return Mlp(layers, widths[0], skip_layer)


def activate(z: np.ndarray, activation: Activation, beta: float) -> np.ndarray:
    if activation is Activation.RELU:
        return np.maximum(z, 0.0)
    if activation is Activation.SOFTPLUS:
        return np.logaddexp(0.0, beta * z) / beta
    return z


def activation_slope(z: np.ndarray, activation: Activation, beta: float) -> np.ndarray:
    """First derivative; ReLU'(0) is taken as 0."""
    if activation is Activation.RELU:
        return (z > 0).astype(np.float64)
    if activation is Activation.SOFTPLUS:
        return expit(beta * z)
    return np.ones_like(z)


def activation_curvature(z: np.ndarray, activation: Activation, beta: float) -> np.ndarray:
    """Second derivative (zero almost everywhere for ReLU)."""
    if activation is Activation.SOFTPLUS:
        s = expit(beta * z)
        return beta * s * (1.0 - s)
    return np.zeros_like(z)


@dataclass
class ForwardCache:
    """
    Values recorded by a forward pass. `tangents` and `pre_tangents` are only set by
    `dual_forward`.
    """
    network_id: int
    network_version: int
    x: np.ndarray
    inputs: List[np.ndarray]
    pre_activations: List[np.ndarray]
    output: np.ndarray
    tangents: Optional[List[np.ndarray]] = None
    pre_tangents: Optional[List[np.ndarray]] = None
    output_tangent: Optional[np.ndarray] = None


def _as_batch(net: Mlp, x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1:
        x = x[None, :]
    if x.ndim != 2 or x.shape[1] != net.input_width:
        raise NetworkShapeError(f"input shape {x.shape} does not match input width {net.input_width}")
    return x


def _check_cache(net: Mlp, cache: Optional[ForwardCache], need_tangents: bool = False) -> ForwardCache:
    if cache is None:
        raise MissingCacheError("backward pass called without a forward cache")
    if cache.network_id != id(net) or cache.network_version != net.version:
        raise MissingCacheError("forward cache belongs to another network or to stale parameters")
    if need_tangents and cache.tangents is None:
        raise MissingCacheError("dual backward needs a cache recorded by dual_forward")
    return cache


def forward_with_cache(net: Mlp, x: np.ndarray) -> Tuple[np.ndarray, ForwardCache]:
    """Batched evaluation, keeping what `backward` needs."""
    x = _as_batch(net, x)
    inputs, pre = [], []
    a = x
    for index, layer in enumerate(net.layers):
        if index == net.skip_layer:
            a = np.concatenate([a, x], axis=1)
        z = a @ layer.weight.T + layer.bias
        inputs.append(a)
        pre.append(z)
        a = activate(z, layer.activation, layer.beta)
    return a, ForwardCache(id(net), net.version, x, inputs, pre, a)


def forward(net: Mlp, x: np.ndarray) -> np.ndarray:
    """
    Evaluate the network.

    Args:
        net (Mlp): network.
        x (np.ndarray): (input_width,) or (B, input_width).

    Returns:
        np.ndarray: (B, output_width); a 1-D input gives B = 1.

    Raises:
        NetworkShapeError: if x does not match the input width.
    """
    return forward_with_cache(net, x)[0]


def backward(net: Mlp, cache: Optional[ForwardCache], upstream: np.ndarray) -> Tuple[Parameters, np.ndarray]:
    """
    Reverse-mode pass.

    Args:
        net (Mlp): the network the cache was recorded on.
        cache (ForwardCache): from `forward_with_cache`.
        upstream (np.ndarray): (B, output_width) cotangent of the output.

    Returns:
        (Parameters, np.ndarray): gradients in `parameters()` order (summed over the
        batch) and the (B, input_width) input cotangent.

    Raises:
        MissingCacheError: if the cache is absent or stale.
    """
    cache = _check_cache(net, cache)
    delta = np.asarray(upstream, dtype=np.float64).reshape(cache.output.shape)
    grads: Parameters = [None] * (2 * len(net.layers))
    x_bar = np.zeros_like(cache.x)
    for index in range(len(net.layers) - 1, -1, -1):
        layer = net.layers[index]
        dz = delta * activation_slope(cache.pre_activations[index], layer.activation, layer.beta)
        grads[2 * index] = dz.T @ cache.inputs[index]
        grads[2 * index + 1] = dz.sum(axis=0)
        delta = dz @ layer.weight
        if index == net.skip_layer:
            x_bar += delta[:, -net.input_width:]
            delta = delta[:, :-net.input_width]
    return grads, x_bar + delta


def input_gradient(net: Mlp, x: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Values (B,) and input gradients (B, input_width) of a scalar-output network."""
    if net.output_width != 1:
        raise NetworkShapeError(f"input_gradient needs a scalar network, output width is {net.output_width}")
    y, cache = forward_with_cache(net, x)
    _, x_bar = backward(net, cache, np.ones_like(y))
    return y[:, 0], x_bar


def dual_forward(net: Mlp, x: np.ndarray, v: np.ndarray) -> Tuple[np.ndarray, np.ndarray, ForwardCache]:
    """Forward pass carrying an input tangent; returns (output, output tangent, cache)."""
    x = _as_batch(net, x)
    v = np.asarray(v, dtype=np.float64).reshape(x.shape)
    inputs, pre, tangents, pre_tangents = [], [], [], []
    a, a_dot = x, v
    for index, layer in enumerate(net.layers):
        if index == net.skip_layer:
            a = np.concatenate([a, x], axis=1)
            a_dot = np.concatenate([a_dot, v], axis=1)
        z = a @ layer.weight.T + layer.bias
        z_dot = a_dot @ layer.weight.T
        inputs.append(a)
        tangents.append(a_dot)
        pre.append(z)
        pre_tangents.append(z_dot)
        a_dot = activation_slope(z, layer.activation, layer.beta) * z_dot
        a = activate(z, layer.activation, layer.beta)
    cache = ForwardCache(id(net), net.version, x, inputs, pre, a, tangents, pre_tangents, a_dot)
    return a, a_dot, cache


def input_jacobian_vector(net: Mlp, x: np.ndarray, v: np.ndarray) -> np.ndarray:
    """
    Forward-mode directional derivative J(x) @ v.

    Args:
        net (Mlp): network.
        x (np.ndarray): (B, input_width) points.
        v (np.ndarray): (B, input_width) input tangents.

    Returns:
        np.ndarray: (B, output_width) output tangents.
    """
    return dual_forward(net, x, v)[1]


def dual_backward(net: Mlp, cache: Optional[ForwardCache], output_bar: Optional[np.ndarray],
                  tangent_bar: np.ndarray) -> Tuple[Parameters, np.ndarray, np.ndarray]:
    """
    Reverse pass through `dual_forward`.

    Args:
        net (Mlp): network the cache was recorded on.
        cache (ForwardCache): from `dual_forward`.
        output_bar (np.ndarray, optional): cotangent of the output (None for zero).
        tangent_bar (np.ndarray): cotangent of the output tangent.

    Returns:
        (Parameters, np.ndarray, np.ndarray): weight gradients, cotangent of x, cotangent of v.
    """
    cache = _check_cache(net, cache, need_tangents=True)
    a_bar = np.zeros_like(cache.output) if output_bar is None else np.asarray(output_bar, dtype=np.float64).reshape(cache.output.shape)
    a_dot_bar = np.asarray(tangent_bar, dtype=np.float64).reshape(cache.output.shape)
    grads: Parameters = [None] * (2 * len(net.layers))
    x_bar = np.zeros_like(cache.x)
    v_bar = np.zeros_like(cache.x)
    for index in range(len(net.layers) - 1, -1, -1):
        layer = net.layers[index]
        z, z_dot = cache.pre_activations[index], cache.pre_tangents[index]
        slope = activation_slope(z, layer.activation, layer.beta)
        z_bar = slope * a_bar + activation_curvature(z, layer.activation, layer.beta) * z_dot * a_dot_bar
        z_dot_bar = slope * a_dot_bar
        grads[2 * index] = z_bar.T @ cache.inputs[index] + z_dot_bar.T @ cache.tangents[index]
        grads[2 * index + 1] = z_bar.sum(axis=0)
        a_bar = z_bar @ layer.weight
        a_dot_bar = z_dot_bar @ layer.weight
        if index == net.skip_layer:
            x_bar += a_bar[:, -net.input_width:]
            v_bar += a_dot_bar[:, -net.input_width:]
            a_bar = a_bar[:, :-net.input_width]
            a_dot_bar = a_dot_bar[:, :-net.input_width]
    return grads, x_bar + a_bar, v_bar + a_dot_bar


def hessian_vector_product(net: Mlp, x: np.ndarray, v: np.ndarray) -> np.ndarray:
    """H(x) @ v for a scalar-output network, (B, input_width)."""
    if net.output_width != 1:
        raise NetworkShapeError(f"hessian_vector_product needs a scalar network, output width is {net.output_width}")
    y, _, cache = dual_forward(net, x, v)
    _, hv, _ = dual_backward(net, cache, None, np.ones_like(y))
    return hv


def add_gradients(first: Parameters, second: Parameters) -> Parameters:
    return [a + b for a, b in zip(first, second)]


def scale_gradients(grads: Parameters, factor: float) -> Parameters:
    return [factor * g for g in grads]


@dataclass
class AdamState:
    """
    Adam moments for one parameter list.

    Attributes:
        learning_rate (float): step size.
        first, second (Parameters): moment buffers shaped like the parameters.
        step (int): number of updates applied so far.
    """
    learning_rate: float
    first: Parameters
    second: Parameters
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    step: int = 0

    @classmethod
    def for_parameters(cls, params: Parameters, learning_rate: float, beta1: float = 0.9,
                       beta2: float = 0.999, epsilon: float = 1e-8) -> "AdamState":
        return cls(learning_rate, [np.zeros_like(p) for p in params], [np.zeros_like(p) for p in params],
                   beta1, beta2, epsilon)


def adam_step(state: AdamState, params: Parameters, grads: Parameters) -> Parameters:
    """
    One bias-corrected Adam update. Moments in `state` are updated in place.

    Returns:
        Parameters: new parameter arrays.

    Raises:
        NetworkShapeError: if the lists or any shapes disagree.
    """
    if not len(params) == len(grads) == len(state.first):
        raise NetworkShapeError(f"{len(params)} parameters, {len(grads)} gradients, "
                                f"{len(state.first)} moment buffers")
    for index, (p, g, m) in enumerate(zip(params, grads, state.first)):
        if p.shape != g.shape or p.shape != m.shape:
            raise NetworkShapeError(f"parameter {index}: shape {p.shape}, gradient {g.shape}, moment {m.shape}")
    state.step += 1
    correction1 = 1.0 - state.beta1 ** state.step
    correction2 = 1.0 - state.beta2 ** state.step
    updated = []
    for index, (p, g) in enumerate(zip(params, grads)):
        state.first[index] = state.beta1 * state.first[index] + (1.0 - state.beta1) * g
        state.second[index] = state.beta2 * state.second[index] + (1.0 - state.beta2) * g * g
        m_hat = state.first[index] / correction1
        v_hat = state.second[index] / correction2
        updated.append(p - state.learning_rate * m_hat / (np.sqrt(v_hat) + state.epsilon))
    return updated


def optimizer_step(net: Mlp, state: AdamState, grads: Parameters) -> None:
    net.set_parameters(adam_step(state, net.parameters(), grads))


def network_to_record(net: Mlp) -> CheckpointRecord:
    layers: List[LayerRecord] = [
        LayerRecord(in_width=layer.in_width, out_width=layer.out_width, activation=layer.activation.value,
                    beta=float(layer.beta), weight=layer.weight.reshape(-1).tolist(), bias=layer.bias.tolist())
        for layer in net.layers
    ]
    return CheckpointRecord(format=CHECKPOINT_FORMAT, version=CHECKPOINT_VERSION, input_width=net.input_width,
                            skip_layer=net.skip_layer, layers=layers)


def network_from_record(record: Dict[str, Any]) -> Mlp:
    """
    Raises:
        CheckpointError: unknown format or version, or inconsistent layer data.
    """
    if record.get("format") != CHECKPOINT_FORMAT:
        raise CheckpointError(f"not a network checkpoint: format {record.get('format')!r}")
    if record.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {record.get('version')!r}")
    try:
        layers = []
        for entry in record["layers"]:
            weight = np.array(entry["weight"], dtype=np.float64).reshape(entry["out_width"], entry["in_width"])
            layers.append(DenseLayer(weight, np.array(entry["bias"], dtype=np.float64),
                                     Activation(entry["activation"]), float(entry["beta"])))
        return Mlp(layers, int(record["input_width"]), record.get("skip_layer"))
    except (KeyError, TypeError, ValueError) as error:
        raise CheckpointError(f"malformed checkpoint: {error}") from error


def save_checkpoint(net: Mlp, path: PathLike) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as file:
        json.dump(network_to_record(net), file)


def load_checkpoint(path: PathLike) -> Mlp:
    try:
        with open(path, "r", encoding="utf-8") as file:
            record = json.load(file)
    except json.JSONDecodeError as error:
        raise CheckpointError(f"{path} is not valid JSON: {error}") from error
    return network_from_record(record)


@dataclass
class TrainingState:
    """
    Everything needed to resume a training run bit-exactly.

    Attributes:
        networks (Dict[str, Mlp]): named networks being trained.
        optimizers (Dict[str, AdamState]): Adam state per network name.
        epoch (int): number of completed epochs.
        rng_state (dict): `bit_generator.state` of the run's generator.
        curve (List[dict]): training curve rows recorded so far.
    """
    networks: Dict[str, Mlp]
    optimizers: Dict[str, AdamState]
    epoch: int
    rng_state: Dict[str, Any]
    curve: List[Dict[str, Any]] = field(default_factory=list)


def _adam_to_record(state: AdamState) -> Dict[str, Any]:
    return {
        "learning_rate": state.learning_rate, "beta1": state.beta1, "beta2": state.beta2,
        "epsilon": state.epsilon, "step": state.step,
        "first": [m.reshape(-1).tolist() for m in state.first],
        "second": [v.reshape(-1).tolist() for v in state.second],
    }


def save_training_state(state: TrainingState, path: PathLike) -> None:
    record = {
        "format": TRAINING_STATE_FORMAT,
        "version": CHECKPOINT_VERSION,
        "epoch": state.epoch,
        "rng_state": state.rng_state,
        "curve": state.curve,
        "networks": {name: network_to_record(net) for name, net in state.networks.items()},
        "optimizers": {name: _adam_to_record(opt) for name, opt in state.optimizers.items()},
    }
    with open(path, "w", encoding="utf-8", newline="\n") as file:
        json.dump(record, file)


def load_training_state(path: PathLike) -> TrainingState:
    """
    Raises:
        CheckpointError: if the file is not a training-state checkpoint.
    """
    with open(path, "r", encoding="utf-8") as file:
        try:
            record = json.load(file)
        except json.JSONDecodeError as error:
            raise CheckpointError(f"{path} is not valid JSON: {error}") from error
    if record.get("format") != TRAINING_STATE_FORMAT or record.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path} is not a version {CHECKPOINT_VERSION} training state")
    networks = {name: network_from_record(entry) for name, entry in record["networks"].items()}
    optimizers = {}
    for name, entry in record["optimizers"].items():
        shapes = [p.shape for p in networks[name].parameters()]
        optimizers[name] = AdamState(
            learning_rate=entry["learning_rate"],
            first=[np.array(m, dtype=np.float64).reshape(s) for m, s in zip(entry["first"], shapes)],
            second=[np.array(v, dtype=np.float64).reshape(s) for v, s in zip(entry["second"], shapes)],
            beta1=entry["beta1"], beta2=entry["beta2"], epsilon=entry["epsilon"], step=entry["step"],
        )
    logger.info("Loaded training state from %s at epoch %d", path, record["epoch"])
    return TrainingState(networks, optimizers, int(record["epoch"]), record["rng_state"], record["curve"])
