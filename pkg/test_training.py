import numpy as np
import pandas as pd
import pytest

from config import OptimizerConfig, SceneSpec, TrainSettings, desk_preset
from counterfactual import BASELINE_NAME, COUNTERFACTUAL_VARIANTS
from error_handler import ConfigError, InputError, NumericalAbort
from metrics import METRIC_NAMES
from pipeline import GateDapModel
from synthetic_data import generate_dataset, slow_scene_spec
from trainer import (
    AGGREGATE_ID, CHECKPOINT_DIR, TRAIN_COLUMNS, clip_for_step, counterfactual_sweep, evaluate, gate_ablation,
    prepare_inputs, train,
)


def _settings(steps, **kwargs):
    return TrainSettings(steps=steps, log_every=1, eval_every=0, checkpoint_every=0, **kwargs)


# =============================================================================
# Training
# =============================================================================

def test_clip_schedule_is_a_permutation_per_epoch():
    first_epoch = sorted(clip_for_step(step, 5, seed=1) for step in range(1, 6))
    assert first_epoch == [0, 1, 2, 3, 4]
    assert [clip_for_step(s, 5, 1) for s in range(1, 11)] == [clip_for_step(s, 5, 1) for s in range(1, 11)]


def test_training_is_deterministic(tiny_model_config, tiny_clips, loss_config, tmp_path):
    runs = []
    for name in ("a", "b"):
        model = GateDapModel(tiny_model_config, seed=5)
        result = train(tiny_clips, model, loss_config, OptimizerConfig(), _settings(3), seed=5,
                       out_dir=str(tmp_path / name))
        runs.append(result.history["loss"].to_numpy())
        assert result.step == 3
        assert list(result.history.columns) == TRAIN_COLUMNS
    assert np.array_equal(runs[0], runs[1])
    written = pd.read_csv(tmp_path / "a" / "train.csv")
    assert written["step"].tolist() == [1, 2, 3]
    assert (tmp_path / "a" / CHECKPOINT_DIR / "manifest.json").is_file()


def test_zero_learning_rate_keeps_parameters(tiny_model_config, tiny_clip, loss_config):
    model = GateDapModel(tiny_model_config, seed=5)
    checksum = model.store.checksum()
    result = train([tiny_clip], model, loss_config, OptimizerConfig(learning_rate=0.0), _settings(3))
    assert model.store.checksum() == checksum
    losses = result.history["loss"].to_numpy()
    np.testing.assert_allclose(losses, losses[0])


def test_resume_continues_the_same_run(tiny_model_config, tiny_clips, loss_config, tmp_path):
    full = train(tiny_clips, GateDapModel(tiny_model_config, seed=5), loss_config, OptimizerConfig(),
                 _settings(4), seed=2)

    out = tmp_path / "run"
    train(tiny_clips, GateDapModel(tiny_model_config, seed=5), loss_config, OptimizerConfig(), _settings(2),
          seed=2, out_dir=str(out))
    model = GateDapModel(tiny_model_config, seed=0)
    resume = model.store.load(str(out / CHECKPOINT_DIR))
    resumed = train(tiny_clips, model, loss_config, OptimizerConfig(), _settings(4), seed=2,
                    out_dir=str(out), resume=resume)

    assert resumed.history["step"].tolist() == [3, 4]
    np.testing.assert_allclose(resumed.history["loss"].to_numpy(), full.history["loss"].to_numpy()[2:], atol=1e-12)
    assert pd.read_csv(out / "train.csv")["step"].tolist() == [1, 2, 3, 4]


def test_non_finite_loss_aborts(tiny_model_config, tiny_clip, loss_config):
    model = GateDapModel(tiny_model_config, seed=5)
    model.store["decoder.head.bias"] = np.array([np.nan])
    with pytest.raises(NumericalAbort) as info:
        train([tiny_clip], model, loss_config, OptimizerConfig(), _settings(2))
    assert info.value.step == 1


def test_inputs_must_match_model(tiny_model_config, loss_config):
    clips = generate_dataset(SceneSpec(seed=0, image_size=32, clip_len=2), 1)
    with pytest.raises(ConfigError):
        prepare_inputs(clips, GateDapModel(tiny_model_config))
    with pytest.raises(InputError):
        train([], GateDapModel(tiny_model_config), loss_config, OptimizerConfig(), _settings(1))


# =============================================================================
# Evaluation, ablation, counterfactuals
# =============================================================================

def test_evaluate_rows_maps_and_threads(tiny_model, tiny_clips, tmp_path):
    result = evaluate(tiny_clips, tiny_model, seed=1, n_splits=4, maps_dir=tmp_path / "maps")
    table = result.table()
    assert table["clip_id"].tolist() == ["0000", "0001", "0002", AGGREGATE_ID]
    assert len(list((tmp_path / "maps").glob("*.pgm"))) == len(tiny_clips)
    assert all(result.rows[name].notna().all() for name in METRIC_NAMES)

    threaded = evaluate(list(reversed(tiny_clips)), tiny_model, seed=1, n_splits=4, threads=2)
    pd.testing.assert_frame_equal(result.rows, threaded.rows)


def test_gate_ablation_has_eight_rows_and_keeps_weights(tiny_model, tiny_clips, tmp_path):
    checksum = tiny_model.store.checksum()
    table = gate_ablation(tiny_clips, tiny_model, n_splits=2, maps_dir=tmp_path / "maps")
    assert len(table) == 8
    assert table.iloc[0]["label"] == "no-gating"
    assert table.iloc[-1]["label"] == "SpaG+MemoG+MU-InfoG"
    assert tiny_model.store.checksum() == checksum
    maps = sorted(p.stem for p in (tmp_path / "maps").glob("*.pgm"))
    assert len(maps) == 8
    assert "no_gating" in maps and "SpaG_MemoG_MU_InfoG" in maps


def test_counterfactual_sweep(tiny_model, tiny_clips, tmp_path):
    checksum = tiny_model.store.checksum()
    table = counterfactual_sweep(tiny_clips, tiny_model, n_splits=2, mask_overrides={"semantic": 0.0},
                                 maps_dir=tmp_path / "maps")
    assert table["variant"].tolist() == [BASELINE_NAME, *COUNTERFACTUAL_VARIANTS]
    assert tiny_model.store.checksum() == checksum
    assert len(list((tmp_path / "maps").glob("*.pgm"))) == 11

    semantic_rows = table[table["stream"] == "semantic"]
    assert len(semantic_rows) == 3
    for metric in METRIC_NAMES:
        assert (semantic_rows[f"delta_{metric}"].abs() < 1e-9).all()
    baseline = table[table["variant"] == BASELINE_NAME].iloc[0]
    assert all(baseline[f"delta_{m}"] == 0.0 for m in METRIC_NAMES)


# =============================================================================
# Desk-scale experiments
# =============================================================================

def _overfit(model_config=None, scene=None):
    config = desk_preset()
    clips = generate_dataset(scene or config.scene.model_copy(update={"seed": 0}), 8)
    model = GateDapModel(model_config or config.model, seed=0)
    result = train(clips, model, config.loss, config.optimizer, config.train.model_copy(update={"eval_every": 0}),
                   seed=0)
    return clips, model, result


@pytest.mark.slow
def test_overfit_eight_clips_and_ablation_direction():
    clips, model, _ = _overfit()
    result = evaluate(clips, model, seed=0)
    assert result.aggregate.cc > 0.9
    assert result.aggregate.kld < 0.3

    table = gate_ablation(clips, model)
    assert len(table) == 8
    assert table.iloc[-1]["cc"] >= table.iloc[0]["cc"]


@pytest.mark.slow
@pytest.mark.parametrize("temporal_uncertainty", [True, False])
def test_both_memory_variants_overfit(temporal_uncertainty):
    config = desk_preset()
    gate = config.model.gate.with_flags(temporal_uncertainty=temporal_uncertainty)
    clips, model, _ = _overfit(model_config=config.model.model_copy(update={"gate": gate}))
    assert evaluate(clips, model, seed=0).aggregate.cc > 0.9


@pytest.mark.slow
def test_drivable_mask_matters_more_than_moving_flow_on_slow_scenes():
    clips, model, _ = _overfit(scene=slow_scene_spec(seed=0))
    table = counterfactual_sweep(clips, model).set_index("variant")
    assert abs(table.loc["Gate-DAP-D w/o Mask", "delta_kld"]) > abs(table.loc["Gate-DAP-F w/o V-P", "delta_kld"])
