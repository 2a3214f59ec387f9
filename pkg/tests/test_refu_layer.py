from concurrent.futures import ThreadPoolExecutor

import numpy as np
import pytest

from mesh_core import box, icosphere
from nn_core import NetworkShapeError
from refu_datatypes import AlphaVariant, RangeMode, ScaleMode, SdfMode
from refu_layer import (RefuConfig, RefuLayer, alpha_ratio_buckets, apply_refu, build_refu_networks, global_latent,
                        main_parameter_count, predict_scale, refu_backward)
from sdf_exact import ExactSdf, SdfQuery


class SphereField:
    """Analytic sphere SDF with its Hessian, |x - c| - r."""

    def __init__(self, radius: float = 0.5, center=(0.0, 0.0, 0.0)) -> None:
        self.radius = radius
        self.center = np.asarray(center, dtype=np.float64)

    def evaluate(self, points):
        d = np.asarray(points, dtype=np.float64).reshape(-1, 3) - self.center
        norm = np.linalg.norm(d, axis=1)
        return SdfQuery(norm - self.radius, d / norm[:, None])

    def hessian_vector(self, points, vectors):
        d = np.asarray(points, dtype=np.float64).reshape(-1, 3) - self.center
        norm = np.linalg.norm(d, axis=1, keepdims=True)
        n = d / norm
        v = np.asarray(vectors, dtype=np.float64).reshape(-1, 3)
        return (v - np.sum(v * n, axis=1, keepdims=True) * n) / norm


class FlatField:
    """f = 0.5 * z - 0.1, gradient of norm 0.5."""

    def evaluate(self, points):
        p = np.asarray(points, dtype=np.float64).reshape(-1, 3)
        return SdfQuery(0.5 * p[:, 2] - 0.1, np.tile([0.0, 0.0, 0.5], (p.shape[0], 1)))

    def hessian_vector(self, points, vectors):
        return np.zeros_like(np.asarray(vectors, dtype=np.float64))


class ZeroGradientField:
    def evaluate(self, points):
        p = np.asarray(points, dtype=np.float64).reshape(-1, 3)
        return SdfQuery(np.full(p.shape[0], -0.2), np.zeros_like(p))

    def hessian_vector(self, points, vectors):
        return np.zeros_like(np.asarray(vectors, dtype=np.float64))


def random_inside(rng, count, radius=0.45):
    directions = rng.normal(size=(count, 3))
    directions /= np.linalg.norm(directions, axis=1, keepdims=True)
    return directions * rng.uniform(0.05, radius, size=(count, 1))


def small_config(**overrides) -> RefuConfig:
    settings = dict(latent_width=6, vertex_latent_width=3, h_width=8, g_width=5, scale_mode=ScaleMode.PREDICTED,
                    range_mode=RangeMode.ACC, sdf_mode=SdfMode.ACC, variant=AlphaVariant.MAIN)
    settings.update(overrides)
    return RefuConfig(**settings)


@pytest.mark.parametrize("body", [box((0.5, 0.4, 0.3)), icosphere(2, 0.5)])
def test_exact_engine_with_unit_scale_lands_on_surface(body):
    rng = np.random.default_rng(0)
    engine = ExactSdf(body)
    points = np.vstack([random_inside(rng, 100, 0.28), rng.uniform(0.6, 1.0, size=(20, 3))])
    output = apply_refu(points, engine, 1.0)
    assert output.moved[:100].all()
    assert not output.moved[100:].any()
    np.testing.assert_allclose(engine.evaluate(output.positions[:100]).values, 0.0, atol=1e-8)
    np.testing.assert_array_equal(output.positions[100:], points[100:])


def test_acc_range_never_leaves_vertices_inside_convex_body():
    rng = np.random.default_rng(1)
    body = icosphere(2, 0.5)
    engine = ExactSdf(body)
    points = random_inside(rng, 60, 0.4)
    cfg = small_config()
    networks = build_refu_networks(cfg, 4, 60, rng)
    output = RefuLayer(cfg, networks).forward(rng.normal(size=4), points, engine)
    assert (output.alpha >= 1.0).all()
    assert (engine.evaluate(output.positions).values >= -1e-8).all()


def test_non_unit_gradient_is_normalized():
    output = apply_refu([[0.0, 0.0, 0.0]], FlatField(), 1.0)
    np.testing.assert_allclose(output.positions, [[0.0, 0.0, 0.1]])


def test_vanishing_gradient_leaves_vertex_in_place():
    output = apply_refu(np.ones((2, 3)), ZeroGradientField(), 1.0)
    np.testing.assert_array_equal(output.positions, np.ones((2, 3)))
    assert output.degenerate.all()
    assert not output.moved.any()


def test_zero_scale_is_identity():
    rng = np.random.default_rng(2)
    points = random_inside(rng, 10)
    np.testing.assert_array_equal(apply_refu(points, SphereField(), 0.0).positions, points)


def test_predict_scale_ranges_and_fixed_mode():
    rng = np.random.default_rng(3)
    f = rng.normal(size=12)
    fixed = small_config(scale_mode=ScaleMode.FIXED)
    np.testing.assert_array_equal(predict_scale(None, f, fixed), 1.0)
    for range_mode, low in ((RangeMode.ACC, 1.0), (RangeMode.APPROX, 0.0)):
        cfg = small_config(range_mode=range_mode)
        networks = build_refu_networks(cfg, 5, 12, rng)
        z = global_latent(rng.normal(size=5), networks.h)
        assert z.shape == (cfg.latent_width,)
        assert (predict_scale(z, f, cfg, networks) >= low).all()


def test_main_variant_is_bound_to_vertex_count():
    rng = np.random.default_rng(4)
    cfg = small_config()
    networks = build_refu_networks(cfg, 5, 12, rng)
    z = global_latent(rng.normal(size=5), networks.h)
    with pytest.raises(NetworkShapeError):
        predict_scale(z, np.zeros(11), cfg, networks)


def test_predicted_layer_needs_networks():
    with pytest.raises(NetworkShapeError):
        RefuLayer(small_config())


@pytest.mark.parametrize("variant", [AlphaVariant.ALT1, AlphaVariant.ALT2])
def test_variant_parameter_counts_match_main(variant):
    cfg = small_config(latent_width=32, vertex_latent_width=4, h_width=64, g_width=10)
    rng = np.random.default_rng(5)
    target = main_parameter_count(cfg, 7, 300)
    main = build_refu_networks(cfg, 7, 300, rng)
    assert main.parameter_count() == target
    other = build_refu_networks(small_config(latent_width=32, vertex_latent_width=4, h_width=64, g_width=10,
                                             variant=variant), 7, 300, rng)
    assert abs(other.parameter_count() - target) <= 0.05 * target


def test_alt2_ignores_frame_parameters():
    rng = np.random.default_rng(6)
    cfg = small_config(variant=AlphaVariant.ALT2)
    layer = RefuLayer(cfg, build_refu_networks(cfg, 5, 8, rng))
    points = random_inside(rng, 8)
    first = layer.forward(None, points, SphereField())
    second = layer.forward(rng.normal(size=5), points, SphereField())
    np.testing.assert_array_equal(first.positions, second.positions)


def test_fixed_scale_backward_matches_finite_differences_with_curvature():
    rng = np.random.default_rng(7)
    field = SphereField()
    points = np.vstack([random_inside(rng, 6, 0.4), rng.uniform(0.5, 0.8, size=(2, 3))])
    u = rng.normal(size=points.shape)
    output = apply_refu(points, field, 1.7)
    x_bar = refu_backward(output, u).positions
    eps = 1e-6
    numeric = np.zeros_like(points)
    for i in range(points.shape[0]):
        for k in range(3):
            step = np.zeros_like(points)
            step[i, k] = eps
            plus = np.sum(u * apply_refu(points + step, field, 1.7).positions)
            minus = np.sum(u * apply_refu(points - step, field, 1.7).positions)
            numeric[i, k] = (plus - minus) / (2 * eps)
    np.testing.assert_allclose(x_bar, numeric, atol=1e-6)


def test_alpha_cotangent_is_minus_f_times_projection():
    rng = np.random.default_rng(8)
    points = random_inside(rng, 5)
    u = rng.normal(size=points.shape)
    output = apply_refu(points, SphereField(), 1.0)
    grads = refu_backward(output, u)
    unit = points / np.linalg.norm(points, axis=1, keepdims=True)
    np.testing.assert_allclose(grads.alpha, -output.sdf_values * np.sum(u * unit, axis=1))


@pytest.mark.parametrize("variant", list(AlphaVariant))
@pytest.mark.parametrize("range_mode", list(RangeMode))
def test_predicted_scale_backward_matches_finite_differences(variant, range_mode):
    rng = np.random.default_rng(9)
    n, width = 7, 4
    cfg = small_config(variant=variant, range_mode=range_mode)
    layer = RefuLayer(cfg, build_refu_networks(cfg, width, n, rng))
    field = SphereField()
    points = np.vstack([random_inside(rng, n - 1, 0.4), [[0.6, 0.1, 0.0]]])
    params = rng.normal(size=width)
    u = rng.normal(size=points.shape)

    def loss(p=params, x=points):
        return float(np.sum(u * layer.forward(p, x, field).positions))

    grads = layer.backward(layer.forward(params, points, field), u)
    eps = 1e-6
    for name, net in layer.networks.named().items():
        for array, grad in zip(net.parameters(), grads.networks[name]):
            flat = array.reshape(-1)
            for index in range(min(3, flat.size)):
                original = flat[index]
                flat[index] = original + eps
                plus = loss()
                flat[index] = original - eps
                minus = loss()
                flat[index] = original
                assert (plus - minus) / (2 * eps) == pytest.approx(grad.reshape(-1)[index], rel=1e-4, abs=1e-8)
    numeric_x = np.zeros_like(points)
    for i in range(n):
        for k in range(3):
            step = np.zeros_like(points)
            step[i, k] = eps
            numeric_x[i, k] = (loss(x=points + step) - loss(x=points - step)) / (2 * eps)
    np.testing.assert_allclose(grads.positions, numeric_x, atol=1e-6)
    if variant is not AlphaVariant.ALT2:
        numeric_p = np.array([(loss(p=params + eps * e) - loss(p=params - eps * e)) / (2 * eps) for e in np.eye(width)])
        np.testing.assert_allclose(grads.params, numeric_p, atol=1e-6)


def test_backward_without_moved_vertices_passes_upstream_through():
    points = np.array([[1.0, 0.0, 0.0]])
    output = apply_refu(points, SphereField(), 1.0)
    u = np.array([[0.3, -0.2, 0.5]])
    grads = refu_backward(output, u)
    np.testing.assert_array_equal(grads.positions, u)
    assert grads.networks == {}


def test_layer_accumulates_timing():
    layer = RefuLayer(small_config(scale_mode=ScaleMode.FIXED))
    layer.forward(None, np.zeros((3, 3)) + 0.1, SphereField())
    layer.forward(None, np.zeros((3, 3)) + 0.1, SphereField())
    assert layer.calls == 2
    assert layer.seconds >= 0.0


def test_layer_timing_counts_every_threaded_call():
    layer = RefuLayer(small_config(scale_mode=ScaleMode.FIXED))
    positions = np.zeros((3, 3)) + 0.1
    with ThreadPoolExecutor(max_workers=4) as pool:
        list(pool.map(lambda _: layer.forward(None, positions, SphereField()), range(64)))
    assert layer.calls == 64
    assert layer.seconds > 0.0


def test_alpha_ratio_buckets():
    approx = np.array([-0.1, -0.2, -0.5, -0.31, 0.1, -0.9])
    exact = np.array([-0.2, -0.2, -0.2, -0.1, -0.1, -0.1])
    alpha = np.array([1.0, 2.0, 3.0, 4.0, 5.0, 6.0])
    records = alpha_ratio_buckets(approx, exact, alpha)
    by_range = {(r["lower"], r["upper"]): r for r in records}
    assert by_range[(0.25, 0.75)]["count"] == 1
    assert by_range[(0.25, 0.75)]["mean_alpha"] == pytest.approx(1.0)
    assert by_range[(0.75, 1.25)]["mean_alpha"] == pytest.approx(2.0)
    assert by_range[(2.25, 2.75)]["mean_alpha"] == pytest.approx(3.0)
    assert by_range[(2.75, None)]["count"] == 2
    assert by_range[(2.75, None)]["mean_alpha"] == pytest.approx(5.0)
    assert by_range[(0.0, 0.25)]["mean_alpha"] is None
    assert sum(r["count"] for r in records) == 5
