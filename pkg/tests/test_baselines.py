import numpy as np
import pytest

from baselines import (OPTIMIZE_LABEL, collision_loss_only_mode, naive_postprocess, optimize_postprocess,
                       project_to_margin)
from garment_training import TrainingSpec
from mesh_core import TriMesh, icosphere
from refu_datatypes import TrainingMode
from refu_layer import apply_refu
from sdf_exact import ExactSdf


@pytest.fixture
def overlapping_garment() -> TriMesh:
    """Small sphere whose left half sits inside the unit cube."""
    mesh = icosphere(1, 0.3)
    return mesh.with_vertices(mesh.vertices + [0.5, 0.0, 0.0])


def test_naive_matches_unit_scale_layer(unit_cube, overlapping_garment):
    engine = ExactSdf(unit_cube)
    positions = overlapping_garment.vertices
    np.testing.assert_array_equal(naive_postprocess(positions, engine), apply_refu(positions, engine, 1.0).positions)
    assert (engine.evaluate(naive_postprocess(positions, engine)).values > -1e-12).all()


def test_project_to_margin_reaches_level_set(unit_cube, overlapping_garment):
    engine = ExactSdf(unit_cube)
    projected = project_to_margin(overlapping_garment.vertices, engine, 0.01)
    assert (engine.evaluate(projected).values >= 0.01 - 1e-12).all()


def test_optimize_leaves_clean_input_alone(unit_cube):
    garment = icosphere(1, 1.2)
    result = optimize_postprocess(garment.vertices, ExactSdf(unit_cube), garment)
    np.testing.assert_array_equal(result.positions, garment.vertices)
    assert result.iterations == 0
    assert result.converged
    assert result.history == []


def test_optimize_returns_feasible_positions(unit_cube, overlapping_garment):
    engine = ExactSdf(unit_cube)
    result = optimize_postprocess(overlapping_garment.vertices, engine, overlapping_garment, max_iters=50)
    assert result.max_violation < 1e-6
    assert (engine.evaluate(result.positions).values >= 1e-3 - 1e-6).all()
    assert all(later <= earlier for earlier, later in zip(result.history, result.history[1:]))
    assert 0 < result.iterations <= 50


def test_optimize_rejects_vertex_count_mismatch(unit_cube, overlapping_garment):
    with pytest.raises(ValueError):
        optimize_postprocess(np.zeros((3, 3)), ExactSdf(unit_cube), overlapping_garment)


def test_collision_loss_mode_only_changes_mode():
    spec = TrainingSpec(lambda_r=2.0, lambda_c=0.25, fine_tune=False)
    baseline = collision_loss_only_mode(spec)
    assert baseline.mode is TrainingMode.COLLISION_LOSS
    assert (baseline.lambda_r, baseline.lambda_c, baseline.fine_tune) == (2.0, 0.25, False)
    assert spec.mode is TrainingMode.BACKBONE


def test_optimize_label_marks_reconstruction():
    assert OPTIMIZE_LABEL.startswith("reconstructed")
