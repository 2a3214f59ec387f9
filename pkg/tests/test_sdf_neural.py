from concurrent.futures import ThreadPoolExecutor

import numpy as np
import pytest

from mesh_core import BodyState, TriMesh, box, icosphere
from nn_core import AdamState, DenseLayer, Mlp, backward, forward, forward_with_cache, input_gradient, optimizer_step
from refu_datatypes import Activation, SampleCategory
from sdf_exact import ExactSdf, SdfError
from sdf_neural import (NeuralSdf, SampleCounts, SdfNetConfig, SdfSampleSet, SdfTrainer, build_sdf_network,
                        eikonal_loss, evaluate_sdf, sample_surface, sample_training_points, sdf_loss)


def sphere_body(radius: float = 0.5) -> BodyState:
    return BodyState(np.array([radius]), np.array([0.0]), np.array([0.0]), icosphere(2, radius))


def small_config(**overrides) -> SdfNetConfig:
    settings = dict(hidden_layers=2, hidden_width=12, skip_layer=None, softplus_beta=4.0,
                    counts=SampleCounts(30, 30, 0, 0, 30), bodies_per_batch=2, epochs=2, probe_points=32,
                    learning_rate=1e-3)
    settings.update(overrides)
    return SdfNetConfig(**settings)


def plane_net(conditioning_width: int, bias: float = -0.1) -> Mlp:
    """f(x) = z + bias, ignoring the conditioning."""
    weight = np.zeros((1, 3 + conditioning_width))
    weight[0, 2] = 1.0
    return Mlp([DenseLayer(weight, np.array([bias]), Activation.IDENTITY)], 3 + conditioning_width)


def test_sample_surface_points_lie_on_faces(unit_cube):
    points, faces, bary = sample_surface(unit_cube, 200, np.random.default_rng(0))
    np.testing.assert_allclose(np.abs(points).max(axis=1), 0.5, atol=1e-12)
    np.testing.assert_allclose(bary.sum(axis=1), 1.0)
    assert faces.min() >= 0 and faces.max() < unit_cube.face_count


def test_sample_training_points_categories_and_labels():
    body = sphere_body()
    garment = icosphere(1, 0.6)
    counts = SampleCounts(40, 30, 20, 10, 25)
    samples = sample_training_points(body, garment, counts, 0.01, 0)
    assert len(samples) == counts.total()
    for category, expected in zip(SampleCategory, (40, 30, 20, 10, 25)):
        assert int((samples.categories == category).sum()) == expected
    np.testing.assert_allclose(samples.values[samples.surface_mask], 0.0, atol=1e-12)
    np.testing.assert_allclose(np.linalg.norm(samples.normals[samples.surface_mask], axis=1), 1.0)
    assert np.isnan(samples.normals[~samples.surface_mask]).all()
    np.testing.assert_array_equal(samples.conditioning, np.tile(body.conditioning(), (len(samples), 1)))
    assert samples.sample(0).category is SampleCategory.BODY_SURFACE
    assert samples.sample(len(samples) - 1).normal is None


def test_zero_noise_reproduces_surface_positions():
    samples = sample_training_points(sphere_body(), None, SampleCounts(20, 20, 0, 0, 0), 0.0, 3)
    surface = samples.points[samples.categories == SampleCategory.BODY_SURFACE]
    disturbed = samples.points[samples.categories == SampleCategory.BODY_DISTURBED]
    np.testing.assert_array_equal(surface, disturbed)


def test_sampling_rejects_open_body_and_missing_garment():
    mesh = box()
    open_body = BodyState(np.zeros(1), np.zeros(1), np.zeros(1), TriMesh(mesh.vertices, mesh.faces[:-1]))
    with pytest.raises(SdfError):
        sample_training_points(open_body, None, SampleCounts(5, 5, 0, 0, 5), 0.01, 0)
    with pytest.raises(SdfError):
        sample_training_points(sphere_body(), None, SampleCounts(5, 5, 5, 0, 5), 0.01, 0)


def test_perfect_plane_predictor_has_zero_loss():
    rng = np.random.default_rng(1)
    n = 40
    points = rng.uniform(-1, 1, size=(n, 3))
    categories = np.where(np.arange(n) < 10, SampleCategory.BODY_SURFACE, SampleCategory.BBOX).astype(np.int8)
    normals = np.full((n, 3), np.nan)
    normals[:10] = [0.0, 0.0, 1.0]
    samples = SdfSampleSet(points, points[:, 2] - 0.1, normals, categories, np.zeros(n, dtype=np.int64),
                           np.zeros((n, 2)))
    terms, _ = sdf_loss(plane_net(2), samples, small_config())
    assert terms.total == pytest.approx(0.0, abs=1e-12)
    mae, _ = evaluate_sdf(plane_net(2), samples)
    assert mae == pytest.approx(0.0, abs=1e-12)


def test_exact_distance_field_has_no_eikonal_loss():
    body = sphere_body()
    samples = sample_training_points(body, None, SampleCounts(20, 60, 0, 0, 60), 0.02, 8)
    off_surface = samples.subset(~samples.surface_mask & (np.abs(samples.values) > 1e-6))
    assert len(off_surface) > 100
    query = ExactSdf(body.mesh).evaluate(off_surface.points)
    assert eikonal_loss(query.gradients) < 1e-6
    assert eikonal_loss(np.empty((0, 3))) == 0.0
    assert eikonal_loss([[0.0, 0.0, 2.0]]) == pytest.approx(1.0)


def test_relative_error_skips_near_surface_samples():
    rng = np.random.default_rng(9)
    offsets = rng.uniform(0.01, 0.5, size=30) * rng.choice([-1.0, 1.0], size=30)
    points = np.zeros((33, 3))
    points[:30, 2] = 0.1 + offsets
    points[30:, 2] = 0.1
    values = points[:, 2] - 0.1
    values[30:] = 0.0
    samples = SdfSampleSet(points, values, np.full((33, 3), np.nan),
                           np.full(33, SampleCategory.BBOX, dtype=np.int8), np.zeros(33, dtype=np.int64),
                           np.zeros((33, 2)))
    one_mm_off = plane_net(2, bias=-0.099)
    mae, mre = evaluate_sdf(one_mm_off, samples)
    assert mae == pytest.approx(0.001, rel=1e-6)
    assert np.isfinite(mre) and mre <= 10.0
    assert mre == pytest.approx(100.0 * np.mean(0.001 / np.abs(values[:30])), rel=1e-6)

    mae, mre = evaluate_sdf(one_mm_off, samples.subset(np.arange(33) >= 30))
    assert mae == pytest.approx(0.001, rel=1e-6)
    assert np.isnan(mre)


def test_sdf_loss_gradients_match_finite_differences():
    cfg = small_config(lambda_a=2.0, lambda_b=1.0, lambda_c=0.5)
    body = sphere_body()
    samples = sample_training_points(body, None, SampleCounts(8, 8, 0, 0, 8), 0.02, 4)
    net = build_sdf_network(cfg, body.conditioning().size, np.random.default_rng(5))
    _, grads = sdf_loss(net, samples, cfg)
    eps = 1e-6
    for array, grad in zip(net.parameters(), grads):
        flat = array.reshape(-1)
        for index in range(min(3, flat.size)):
            original = flat[index]
            flat[index] = original + eps
            plus = sdf_loss(net, samples, cfg)[0].total
            flat[index] = original - eps
            minus = sdf_loss(net, samples, cfg)[0].total
            flat[index] = original
            numeric = (plus - minus) / (2 * eps)
            assert numeric == pytest.approx(grad.reshape(-1)[index], rel=1e-4, abs=1e-7)


def test_sdf_loss_rejects_empty_batch():
    empty = SdfSampleSet(np.empty((0, 3)), np.empty(0), np.empty((0, 3)), np.empty(0, dtype=np.int8),
                         np.empty(0, dtype=np.int64), np.empty((0, 2)))
    with pytest.raises(SdfError):
        sdf_loss(plane_net(2), empty, small_config())


def test_neural_engine_matches_network():
    rng = np.random.default_rng(6)
    cfg = small_config()
    net = build_sdf_network(cfg, 2, rng)
    conditioning = np.array([0.3, -0.2])
    engine = NeuralSdf(net, conditioning)
    points = rng.normal(size=(7, 3))
    query = engine.evaluate(points)
    inputs = np.concatenate([points, np.tile(conditioning, (7, 1))], axis=1)
    values, grads = input_gradient(net, inputs)
    np.testing.assert_allclose(query.values, values)
    np.testing.assert_allclose(query.gradients, grads[:, :3])
    assert engine.query_points == 7


def test_neural_engine_hessian_of_linear_field_is_zero():
    engine = NeuralSdf(plane_net(2), np.zeros(2))
    np.testing.assert_allclose(engine.hessian_vector(np.ones((3, 3)), np.ones((3, 3))), 0.0)
    np.testing.assert_allclose(engine.evaluate([[0.0, 0.0, 0.5]]).values, [0.4])


def test_neural_engine_counts_every_threaded_query():
    engine = NeuralSdf(plane_net(2), np.zeros(2))
    with ThreadPoolExecutor(max_workers=4) as pool:
        list(pool.map(lambda _: engine.evaluate(np.zeros((6, 3))), range(30)))
    assert engine.query_points == 180


def test_neural_engine_rejects_wrong_conditioning():
    with pytest.raises(SdfError):
        NeuralSdf(plane_net(2), np.zeros(3))


def test_config_validation():
    with pytest.raises(ValueError):
        small_config(skip_layer=2).validate()
    with pytest.raises(ValueError):
        small_config(lambda_a=0.0).validate()


def test_trainer_resume_replays_uninterrupted_run(tmp_path):
    bodies = [(sphere_body(r), None) for r in (0.4, 0.5, 0.6)]
    cfg = small_config()
    straight = SdfTrainer(bodies, cfg, seed=11).train(epochs=2)
    state = tmp_path / "state.json"
    SdfTrainer(bodies, cfg, seed=11).train(epochs=1, state_path=state)
    resumed = SdfTrainer(bodies, cfg, seed=11).train(epochs=2, resume_from=state, curve_path=tmp_path / "curve.csv")
    for a, b in zip(straight.net.parameters(), resumed.net.parameters()):
        np.testing.assert_array_equal(a, b)
    assert [row["epoch"] for row in resumed.curve] == [1, 2]
    header = (tmp_path / "curve.csv").read_text().splitlines()[0]
    assert header == "epoch,L_v,L_sg,L_se,MAE,MRE,eikonal_dev"


def test_training_reduces_value_error():
    bodies = [(sphere_body(r), None) for r in (0.45, 0.5, 0.55, 0.6)]
    cfg = small_config(epochs=60, learning_rate=5e-3, hidden_width=24)
    result = SdfTrainer(bodies, cfg, seed=2).train()
    assert result.curve[-1]["MAE"] < result.curve[0]["MAE"]
    assert np.isfinite(forward(result.net, np.zeros((1, 5)))).all()


def regression_only_run(trainer: SdfTrainer, cfg: SdfNetConfig, epochs: int):
    """Adam on lambda_a * L_v alone, through the plain reverse pass."""
    net = build_sdf_network(cfg, trainer.conditioning_width, np.random.default_rng([trainer.seed, 0]))
    adam = AdamState.for_parameters(net.parameters(), cfg.learning_rate)
    order_rng = np.random.default_rng([trainer.seed, 2])
    curve = []
    for _ in range(epochs):
        order = order_rng.permutation(len(trainer.pools))
        total, steps = 0.0, 0
        for lo in range(0, len(order), cfg.bodies_per_batch):
            batch = SdfSampleSet.concatenate([trainer.pools[i] for i in order[lo:lo + cfg.bodies_per_batch]])
            y, cache = forward_with_cache(net, batch.network_inputs())
            residual = y[:, 0] - batch.values
            grads, _ = backward(net, cache, (cfg.lambda_a * np.sign(residual) / len(batch))[:, None])
            optimizer_step(net, adam, grads)
            total += float(np.abs(residual).mean())
            steps += 1
        curve.append(total / steps)
    return net, curve


def test_value_only_weights_match_plain_regression():
    bodies = [(sphere_body(r), None) for r in (0.4, 0.5, 0.6)]
    cfg = small_config(lambda_b=0.0, lambda_c=0.0, epochs=3)
    trainer = SdfTrainer(bodies, cfg, seed=4)
    result = trainer.train()
    net, curve = regression_only_run(trainer, cfg, 3)
    for a, b in zip(result.net.parameters(), net.parameters()):
        np.testing.assert_array_equal(a, b)
    assert [row["L_v"] for row in result.curve] == curve


def test_zero_learning_rate_leaves_weights_unchanged():
    bodies = [(sphere_body(r), None) for r in (0.4, 0.6)]
    cfg = small_config(learning_rate=0.0)
    trainer = SdfTrainer(bodies, cfg, seed=6)
    initial = build_sdf_network(cfg, trainer.conditioning_width, np.random.default_rng([6, 0]))
    result = trainer.train(epochs=1)
    assert len(result.curve) == 1
    for a, b in zip(result.net.parameters(), initial.parameters()):
        np.testing.assert_array_equal(a, b)
