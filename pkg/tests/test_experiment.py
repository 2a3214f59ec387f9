import json
from pathlib import Path

import pytest

import settings
from experiment import (ConfigError, benchmark_timings, build_report, config_from_dict, config_hash, config_to_dict,
                        gen_data, load_config, run_experiment, run_wedge_ablation, train_sdf_stage, train_stage)
from nn_core import CheckpointError
from refu_cli import build_parser, main
from refu_datatypes import AlphaVariant, RangeMode, ScaleMode, TrainingMode

CONFIG_DIR = Path(__file__).resolve().parent.parent / "configs"


def tiny(output_dir, **overrides) -> dict:
    raw = {
        "seed": 0, "output_dir": str(output_dir),
        "dataset": {"train_frames": 4, "test_frames": 2},
        "backbone": {"hidden_width": 8, "hidden_layers": 2},
        "optimizer": {"epochs": 2, "finetune_epochs": 1, "batch_size": 2},
        "refu": {"latent_width": 4, "vertex_latent_width": 2, "h_width": 8, "g_width": 4, "sdf_mode": "acc"},
        "sdf": {"hidden_layers": 3, "hidden_width": 8, "skip_layer": None, "epochs": 1, "bodies_per_batch": 2,
                "probe_points": 8, "counts": {"body_surface": 20, "body_disturbed": 20, "garment_surface": 10,
                                              "garment_disturbed": 10, "bbox": 10}},
        "metrics": {"histogram_bins": 5},
    }
    for key, value in overrides.items():
        if isinstance(value, dict):
            raw.setdefault(key, {}).update(value)
        else:
            raw[key] = value
    return raw


@pytest.mark.parametrize("raw", [
    {"bogus": 1},
    {"refu": {"bogus": 1}},
    {"sdf": {"counts": {"bogus": 1}}},
    {"method": "magic"},
    {"refu": {"sdf_mode": "fast"}},
    {"schema_version": 2},
    {"preset": "huge"},
    {"dataset": {"band": 3}},
    {"lambda_c": -1.0},
])
def test_invalid_configs_are_rejected(raw):
    with pytest.raises(ConfigError):
        config_from_dict(raw)


def test_presets_fill_missing_keys():
    desk = config_from_dict({})
    assert desk.preset == "desk"
    assert desk.refu.latent_width == 32
    assert desk.sdf.hidden_width == 64
    full = config_from_dict({"preset": "full", "sdf": {"epochs": 3}})
    assert full.dataset.train_frames == 2000
    assert full.sdf.hidden_width == 1024
    assert full.sdf.skip_layer == 4
    assert full.sdf.epochs == 3


def test_range_mode_follows_sdf_mode_unless_given():
    assert config_from_dict({"refu": {"sdf_mode": "acc"}}).refu.range_mode is RangeMode.ACC
    assert config_from_dict({"refu": {"sdf_mode": "hybrid"}}).refu.range_mode is RangeMode.APPROX
    assert config_from_dict({"refu": {"sdf_mode": "approx"}}).refu.range_mode is RangeMode.APPROX
    explicit = config_from_dict({"refu": {"sdf_mode": "hybrid", "range_mode": "acc"}})
    assert explicit.refu.range_mode is RangeMode.ACC


def test_integers_are_accepted_for_floats():
    cfg = config_from_dict({"lambda_r": 2})
    assert cfg.lambda_r == 2.0 and isinstance(cfg.lambda_r, float)


def test_config_hash_is_stable_and_ignores_output_dir():
    a = config_from_dict({"output_dir": "runs/a"})
    b = config_from_dict({"output_dir": "runs/b"})
    assert config_hash(a) == config_hash(b)
    assert len(config_hash(a)) == 12
    assert config_hash(config_from_dict({"seed": 1})) != config_hash(a)
    assert config_from_dict(config_to_dict(a)) == a


def test_tags_and_training_specs():
    cfg = config_from_dict({"method": "refu-predicted", "refu": {"sdf_mode": "hybrid", "variant": "alt1"}})
    assert cfg.tag == "refu-predicted-alt1-hybrid"
    assert cfg.training_spec().refu.scale_mode is ScaleMode.PREDICTED
    fixed = config_from_dict({"method": "refu-fixed", "refu": {"sdf_mode": "acc"}})
    assert fixed.tag == "refu-fixed-acc"
    assert fixed.training_spec().mode is TrainingMode.REFU
    assert fixed.training_spec().refu.scale_mode is ScaleMode.FIXED
    assert config_from_dict({"method": "closs"}).training_spec().mode is TrainingMode.COLLISION_LOSS
    assert config_from_dict({"method": "naive"}).training_spec().mode is TrainingMode.BACKBONE


@pytest.mark.parametrize("path", sorted(CONFIG_DIR.glob("*.json")), ids=lambda p: p.stem)
def test_shipped_configs_load(path):
    cfg = load_config(path, seed=5, output_dir="elsewhere")
    assert cfg.seed == 5
    assert cfg.output_dir == "elsewhere"


def test_load_config_rejects_broken_json(tmp_path):
    path = tmp_path / "bad.json"
    path.write_text("{")
    with pytest.raises(ConfigError):
        load_config(path)


def test_identity_backbone_without_handling_reproduces_ground_truth(tmp_path):
    cfg = config_from_dict(tiny(tmp_path, method="none", identity_backbone=True))
    gen_data(cfg)
    summary = run_experiment(cfg, workers=2)
    assert summary.mpve_mm == 0.0
    assert summary.vfcp_pct == 0.0
    assert summary.cfmp_pct == 100.0
    assert summary.lap_err_mm is None
    assert summary.t_backbone_ms is None
    payload = json.loads((tmp_path / "eval" / "none-acc" / "metrics.json").read_text())
    assert any("identity backbone" in note for note in payload["notes"])
    assert len(list((tmp_path / "obj").glob("*.obj"))) == 4


def test_exact_refu_pipeline_is_reproducible(tmp_path):
    cfg = config_from_dict(tiny(tmp_path, method="refu-predicted"))
    gen_data(cfg)
    train_stage(cfg)
    assert (tmp_path / "models" / "backbone.json").exists()
    assert (tmp_path / "models" / "refu-predicted-acc" / "alpha_g.json").exists()
    first = run_experiment(cfg, workers=1)
    eval_dir = tmp_path / "eval" / "refu-predicted-acc"
    metrics_csv = (eval_dir / "metrics.csv").read_bytes()
    metrics_json = (eval_dir / "metrics.json").read_bytes()
    second = run_experiment(cfg, workers=3)
    assert (eval_dir / "metrics.csv").read_bytes() == metrics_csv
    assert (eval_dir / "metrics.json").read_bytes() == metrics_json
    assert first.vfcp_pct == 0.0
    assert second.to_row() == first.to_row()
    assert json.loads((eval_dir / "alpha_bars.json").read_text()) == []
    assert [row["bucket"] for row in json.loads((eval_dir / "distance_buckets.json").read_text())] == ["near", "far"]
    assert list(eval_dir.glob("pred_*.obj"))

    naive = config_from_dict(tiny(tmp_path, method="naive"))
    run_experiment(naive)
    rows = build_report(tmp_path)
    assert sorted(row["method"] for row in rows) == ["naive", "refu-predicted"]
    assert (tmp_path / "report.csv").read_text().splitlines()[0].startswith("method,sdf_mode,MPVE_mm")


def test_eval_without_models_names_missing_stage(tmp_path):
    cfg = config_from_dict(tiny(tmp_path, method="closs"))
    gen_data(cfg)
    with pytest.raises(CheckpointError, match="train"):
        run_experiment(cfg)


@pytest.mark.slow
def test_hybrid_pipeline_with_timings(tmp_path):
    cfg = config_from_dict(tiny(tmp_path, method="refu-predicted", refu={"sdf_mode": "hybrid"}))
    gen_data(cfg)
    train_sdf_stage(cfg)
    assert (tmp_path / "sdf_curve.csv").exists()
    train_stage(cfg)
    summary = run_experiment(cfg, timings=True)
    eval_dir = tmp_path / "eval" / "refu-predicted-hybrid"
    timings = json.loads((eval_dir / "timings.json").read_text())
    assert timings["frames"] == 4
    assert summary.t_refu_ms is not None and summary.t_sdf_ms is not None
    bars = json.loads((eval_dir / "alpha_bars.json").read_text())
    assert isinstance(bars, list)


def test_benchmark_timings_reports_both_engines(tmp_path):
    cfg = config_from_dict(tiny(tmp_path))
    timings = benchmark_timings(cfg, frames=2)
    assert timings["frames"] == 2
    assert timings["preset"] == "desk"
    assert timings["points_per_frame"] > 0
    assert timings["sdf_parameters"] > 0
    assert timings["exact_ms_per_frame"] > 0.0
    assert timings["neural_ms_per_frame"] > 0.0


@pytest.mark.slow
def test_wedge_ablation_learned_scale_reduces_edge_crossings():
    result = run_wedge_ablation(seed=0, train_scenes=8, test_scenes=4, steps=200)
    assert result.fixed_avg_ee >= 2.0
    assert result.fixed_cfmp == 0.0
    assert result.curve[-1] < result.curve[0]
    assert result.predicted_avg_ee <= result.fixed_avg_ee


def test_cli_parser():
    args = build_parser().parse_args(["eval", "--timings", "--seed", "3"])
    assert args.command == "eval" and args.timings and args.seed == 3
    args = build_parser().parse_args(["wedge", "--variant", AlphaVariant.ALT2.value])
    assert args.variant == "alt2"
    with pytest.raises(SystemExit):
        build_parser().parse_args(["wedge", "--variant", "other"])


def test_cli_gen_data_and_failure(tmp_path):
    config = tmp_path / "exp.json"
    config.write_text(json.dumps(tiny(tmp_path / "run", method="naive")))
    assert main(["gen-data", "--config", str(config)]) == 0
    assert (tmp_path / "run" / "dataset.npz").exists()
    with pytest.raises(CheckpointError):
        main(["eval", "--config", str(config)])


def test_cli_rejects_other_float_dtype(tmp_path, monkeypatch):
    config = tmp_path / "exp.json"
    config.write_text(json.dumps(tiny(tmp_path / "run", method="naive")))
    monkeypatch.setattr(settings, "FLOAT_DTYPE_NAME", "float16")
    with pytest.raises(ValueError, match="float16"):
        main(["gen-data", "--config", str(config)])
    assert not (tmp_path / "run" / "dataset.npz").exists()
