"""
Collision handlers that ReFU is compared against.

* naive: move every penetrating vertex straight onto the surface along the normalized
  SDF gradient (the repulsion layer with alpha fixed to 1 and nothing learned).
* optimize: a reconstructed post-process. It minimizes

      sum ||y - x||^2 + w_lap * sum ||L (y - x)||^2   subject to f(y_i) >= eps

  by projected gradient descent, projecting violators onto the eps level set along the
  SDF gradient after every step. Reports label the method as reconstructed.
* collision loss: training-time only, see `collision_loss_only_mode`.
"""
import dataclasses
from dataclasses import dataclass, field
from typing import List

import numpy as np
import scipy.sparse.linalg

from garment_training import TrainingSpec
from logger import get_logger
from mesh_core import TriMesh, laplacian_matrix
from refu_datatypes import TrainingMode
from refu_layer import GRADIENT_GUARD, apply_refu
from sdf_exact import SdfEngine

logger = get_logger("baselines")

DEFAULT_MARGIN: float = 1e-3
DEFAULT_LAPLACIAN_WEIGHT: float = 0.5
DEFAULT_MAX_ITERS: int = 200
VIOLATION_TOLERANCE: float = 1e-6
STEP_TOLERANCE: float = 1e-9
PROJECTION_PASSES: int = 3
MAX_HALVINGS: int = 20
OPTIMIZE_LABEL: str = "reconstructed: min |y-x|^2 + w_lap |L(y-x)|^2 s.t. f(y) >= eps, projected gradient descent"


@dataclass
class OptimizationResult:
    """
    Outcome of `optimize_postprocess`.

    Attributes:
        positions (np.ndarray): (N, 3) returned positions (best feasible iterate when one exists).
        iterations (int): gradient steps taken.
        converged (bool): feasible within 1e-6 and stationary before the iteration cap.
        max_violation (float): max(eps - f) over vertices of the returned positions, floored at 0.
        history (List[float]): objective of every accepted iterate, non-increasing.
    """
    positions: np.ndarray
    iterations: int
    converged: bool
    max_violation: float
    history: List[float] = field(default_factory=list)


def naive_postprocess(positions: np.ndarray, engine: SdfEngine) -> np.ndarray:
    """
    x' = x - f(x) grad f / |grad f| for every vertex with f(x) < 0.

    Vertices with a vanishing gradient stay in place and are logged by the layer.
    """
    return apply_refu(positions, engine, 1.0).positions


def project_to_margin(positions: np.ndarray, engine: SdfEngine, margin: float,
                      passes: int = PROJECTION_PASSES) -> np.ndarray:
    """Move vertices with f < margin onto the margin level set along the normalized gradient."""
    projected = np.array(positions, dtype=np.float64).reshape(-1, 3)
    for _ in range(passes):
        query = engine.evaluate(projected)
        norms = np.linalg.norm(query.gradients, axis=1)
        active = (query.values < margin) & (norms >= GRADIENT_GUARD)
        if not active.any():
            break
        shift = (margin - query.values[active]) / norms[active]
        projected[active] += shift[:, None] * query.gradients[active]
    return projected


def _violation(positions: np.ndarray, engine: SdfEngine, margin: float) -> float:
    values = engine.evaluate(positions).values
    return float(max(0.0, np.max(margin - values))) if values.size else 0.0


def _objective(y: np.ndarray, x: np.ndarray, lap, weight: float) -> float:
    d = y - x
    ld = lap @ d
    return float(np.sum(d * d) + weight * np.sum(ld * ld))


def _objective_gradient(y: np.ndarray, x: np.ndarray, lap, weight: float) -> np.ndarray:
    d = y - x
    return 2.0 * d + 2.0 * weight * (lap.T @ (lap @ d))


def _lipschitz(lap, weight: float) -> float:
    if lap.shape[0] == 0 or weight == 0:
        return 2.0
    bound = scipy.sparse.linalg.norm(lap, 1) * scipy.sparse.linalg.norm(lap, np.inf)
    return 2.0 * (1.0 + weight * bound)


def optimize_postprocess(positions: np.ndarray, engine: SdfEngine, mesh: TriMesh,
                         laplacian_weight: float = DEFAULT_LAPLACIAN_WEIGHT,
                         max_iters: int = DEFAULT_MAX_ITERS,
                         margin: float = DEFAULT_MARGIN) -> OptimizationResult:
    """
    Resolve penetrations while staying close to the input and to its Laplacian.

    Args:
        positions (np.ndarray): (N, 3) predicted garment vertices.
        engine (SdfEngine): SDF bound to the body.
        mesh (TriMesh): garment topology, used for the Laplacian.
        laplacian_weight (float): w_lap.
        max_iters (int): gradient step cap.
        margin (float): eps, the distance kept from the body.

    Returns:
        OptimizationResult: input unchanged with zero iterations when nothing penetrates.
    """
    x = np.array(positions, dtype=np.float64).reshape(-1, 3)
    if x.shape[0] != mesh.vertex_count:
        raise ValueError(f"{x.shape[0]} positions for a mesh with {mesh.vertex_count} vertices")
    if not (engine.evaluate(x).values < 0).any():
        return OptimizationResult(x, 0, True, 0.0, [])

    lap = laplacian_matrix(mesh)
    step = 1.0 / _lipschitz(lap, laplacian_weight)
    y = project_to_margin(x, engine, margin)
    energy = _objective(y, x, lap, laplacian_weight)
    history = [energy]
    violation = _violation(y, engine, margin)
    best, best_energy = (y, energy) if violation < VIOLATION_TOLERANCE else (None, np.inf)
    converged = False
    iterations = 0

    while iterations < max_iters:
        iterations += 1
        grad = _objective_gradient(y, x, lap, laplacian_weight)
        trial = step
        for _ in range(MAX_HALVINGS):
            candidate = project_to_margin(y - trial * grad, engine, margin)
            candidate_energy = _objective(candidate, x, lap, laplacian_weight)
            if candidate_energy <= energy:
                break
            trial *= 0.5
        else:
            # no descent step left: stationary under the projection
            converged = violation < VIOLATION_TOLERANCE
            break
        change = float(np.abs(candidate - y).max())
        y, energy = candidate, candidate_energy
        history.append(energy)
        violation = _violation(y, engine, margin)
        if violation < VIOLATION_TOLERANCE and energy <= best_energy:
            best, best_energy = y, energy
        if violation < VIOLATION_TOLERANCE and change < STEP_TOLERANCE:
            converged = True
            break

    if best is not None:
        y = best
        violation = _violation(y, engine, margin)
    if not converged:
        logger.warning("Optimization post-process stopped after %d iterations, max violation %.3g m",
                       iterations, violation)
    return OptimizationResult(y, iterations, converged, violation, history)


def collision_loss_only_mode(spec: TrainingSpec) -> TrainingSpec:
    """
    Training settings for the collision-loss baseline: the backbone is fine-tuned with
    lambda_r * L_r + lambda_c * L_c and no repulsion layer, so inference has no
    collision handling at all.
    """
    return dataclasses.replace(spec, mode=TrainingMode.COLLISION_LOSS)
