import numpy as np
import pytest

from config import SceneSpec
from counterfactual import (
    BASELINE_NAME, COUNTERFACTUAL_VARIANTS, CounterfactSpec, apply_counterfactual, counterfact_remove_classes,
    counterfact_remove_drivable,
)
from data_manager import ClipStore, clip_io, normalize_inputs, one_hot
from error_handler import InputError, UsageError
from synthetic_data import (
    BACKGROUND, PEDESTRIAN, ROAD, VEHICLE, SceneObject, _render, empty_scene_spec, fixation_peaks,
    generate_dataset, generate_synthetic_clip, slow_scene_spec,
)


# =============================================================================
# Synthetic generator
# =============================================================================

def test_same_seed_gives_identical_clips(tiny_scene):
    a, b = generate_synthetic_clip(tiny_scene), generate_synthetic_clip(tiny_scene)
    assert np.array_equal(a.saliency, b.saliency)
    for fa, fb in zip(a.frames, b.frames):
        assert np.array_equal(fa.rgb, fb.rgb)
        assert np.array_equal(fa.flow, fb.flow)
        assert np.array_equal(fa.semantic, fb.semantic)


def test_clip_contract(tiny_clip, tiny_scene):
    assert tiny_clip.k == tiny_scene.clip_len
    assert len(tiny_clip.frames) == tiny_scene.clip_len + 1
    assert tiny_clip.saliency.sum() == pytest.approx(1.0)
    assert np.all(tiny_clip.saliency >= 0)
    assert 1 <= tiny_clip.fixations.sum() <= tiny_scene.fixations
    for frame in tiny_clip.frames:
        assert frame.rgb.shape == (3, 16, 16)
        assert set(np.unique(frame.semantic)) <= {BACKGROUND, ROAD, VEHICLE, PEDESTRIAN}
        assert np.all(frame.drivable[frame.semantic == VEHICLE] == 0)


def test_empty_scene_has_uniform_road_saliency_and_no_flow():
    spec = empty_scene_spec(seed=1, image_size=16, clip_len=2)
    clip = generate_synthetic_clip(spec)
    road_row = int(round(spec.road_top * 16))
    assert np.all(clip.saliency[:road_row] == 0)
    np.testing.assert_allclose(clip.saliency[road_row:], 1.0 / ((16 - road_row) * 16))
    for frame in clip.frames:
        assert not frame.flow.any()


def test_flow_equals_displacement_on_footprint():
    car = SceneObject(label=VEHICLE, x=2, y=8, w=4, h=2, vx=2, vy=0, color=np.ones(3))
    car.plan(3, max_speed=4.0)
    assert car.positions == [(2, 8), (4, 8), (6, 8)]
    frame = _render([car], 1, 16, road_row=6)
    footprint = frame.semantic == VEHICLE
    assert footprint.sum() == 8
    assert np.all(frame.flow[0][footprint] == 2) and np.all(frame.flow[1][footprint] == 0)
    assert not frame.flow[:, ~footprint].any()
    assert not frame.drivable[footprint].any()


def test_accelerate_event_doubles_speed_up_to_limit():
    car = SceneObject(label=VEHICLE, x=0, y=8, w=3, h=2, vx=3, vy=0, color=np.ones(3),
                      event="accelerate", event_frame=2)
    car.plan(4, max_speed=4.0)
    assert [v[0] for v in car.velocities] == [3, 3, 4, 4]


def test_fixation_peaks_pick_highest_local_maxima():
    saliency = np.zeros((7, 7))
    saliency[1, 1], saliency[5, 5], saliency[1, 5] = 0.5, 0.3, 0.2
    fixations = fixation_peaks(saliency, 2)
    assert fixations.sum() == 2
    assert fixations[1, 1] == 1 and fixations[5, 5] == 1
    with pytest.raises(UsageError):
        fixation_peaks(saliency, 0)


def test_dataset_ids_and_seeds(tiny_scene):
    clips = generate_dataset(tiny_scene, 3)
    assert [c.clip_id for c in clips] == ["0000", "0001", "0002"]
    assert [c.meta["seed"] for c in clips] == [3, 4, 5]
    with pytest.raises(UsageError, match="clips must be ≥ 1"):
        generate_dataset(tiny_scene, 0)


# =============================================================================
# Normalization and storage
# =============================================================================

def test_one_hot_and_normalization(tiny_clip):
    encoded = one_hot(np.array([[2, 0]]))
    assert encoded[:, 0, 0].tolist() == [0.0, 0.0, 1.0, 0.0]
    with pytest.raises(InputError):
        one_hot(np.array([[7]]))

    clip = tiny_clip.copy()
    clip.frames[0].flow[:] = 0.0
    clip.frames[0].flow[0, 0, 0] = 4.0
    clip.frames[0].flow[1, 0, 1] = -9.0
    inputs = normalize_inputs(clip, max_speed=4.0)
    assert inputs["flow"][0, 0, 0, 0] == 1.0
    assert inputs["flow"][0, 1, 0, 1] == -1.0
    assert inputs["semantic"].shape == (clip.k, 4, 16, 16)
    assert inputs["drivable"].shape == (clip.k, 1, 16, 16)
    np.testing.assert_allclose(inputs["semantic"].sum(axis=1), 1.0)

    zeroed = normalize_inputs(counterfact_remove_drivable(clip), streams=["drivable"])
    assert not zeroed["drivable"].any()


def test_clip_store_round_trip(tmp_path, tiny_clip):
    store = ClipStore(str(tmp_path))
    store.save_clip(tiny_clip)
    assert store.list_clips() == ["0000"]
    loaded = clip_io("load", str(tmp_path), clip_id="0000")
    assert loaded.k == tiny_clip.k
    assert np.array_equal(loaded.saliency, tiny_clip.saliency)
    assert np.array_equal(loaded.fixations, tiny_clip.fixations)
    for a, b in zip(loaded.frames, tiny_clip.frames):
        assert np.array_equal(a.rgb, b.rgb)
        assert np.array_equal(a.flow, b.flow)
        assert np.array_equal(a.semantic, b.semantic)
        assert np.array_equal(a.drivable, b.drivable)


def test_missing_stream_file_is_named(tmp_path, tiny_clip):
    store = ClipStore(str(tmp_path))
    directory = store.save_clip(tiny_clip)
    (directory / "frame_1" / "flow.gdap").unlink()
    with pytest.raises(InputError, match="flow.gdap"):
        store.load_clip("0000")
    with pytest.raises(InputError):
        ClipStore(str(tmp_path / "nowhere")).load_all()
    with pytest.raises(UsageError):
        clip_io("copy", str(tmp_path))


# =============================================================================
# Counterfactuals
# =============================================================================

def test_variant_registry():
    names = list(COUNTERFACTUAL_VARIANTS)
    assert len(names) == 10
    assert "Gate-DAP-S w/o V-P" in names
    assert "Gate-DAP-I w/o P" in names
    assert "Gate-DAP-D w/o Mask" in names
    assert BASELINE_NAME not in COUNTERFACTUAL_VARIANTS


def test_spec_validation():
    with pytest.raises(ValueError):
        CounterfactSpec(stream="depth")
    with pytest.raises(ValueError):
        CounterfactSpec(stream="rgb", remove=frozenset({"cyclist"}))
    with pytest.raises(ValueError):
        CounterfactSpec(stream="rgb", drivable_mask_removal=True)


def test_semantic_without_vehicles_and_pedestrians(tiny_clip):
    out = apply_counterfactual(tiny_clip, COUNTERFACTUAL_VARIANTS["Gate-DAP-S w/o V-P"])
    for frame in out.frames:
        assert set(np.unique(frame.semantic)) <= {BACKGROUND, ROAD}
    assert (tiny_clip.frames[0].semantic >= VEHICLE).any()


def test_removal_from_empty_clip_is_noop():
    clip = generate_synthetic_clip(empty_scene_spec(image_size=16, clip_len=2))
    out = counterfact_remove_classes(clip, COUNTERFACTUAL_VARIANTS["Gate-DAP-I w/o V-P"])
    for a, b in zip(out.frames, clip.frames):
        assert np.array_equal(a.rgb, b.rgb)
        assert np.array_equal(a.semantic, b.semantic)


def test_rgb_vehicle_removal_fills_median_background(tiny_clip):
    out = counterfact_remove_classes(tiny_clip, CounterfactSpec(stream="rgb", remove=frozenset({"vehicle"})))
    touched = 0
    for before, after in zip(tiny_clip.frames, out.frames):
        footprint = before.semantic == VEHICLE
        background = (before.semantic == BACKGROUND) | (before.semantic == ROAD)
        median = np.median(before.rgb[:, background], axis=1)
        assert np.allclose(after.rgb[:, footprint], median[:, None])
        assert np.array_equal(after.rgb[:, ~footprint], before.rgb[:, ~footprint])
        assert np.array_equal(after.flow, before.flow)
        assert np.array_equal(after.semantic, before.semantic)
        assert np.array_equal(after.drivable, before.drivable)
        touched += int(footprint.sum())
    assert touched > 0


def test_drivable_removal_and_original_untouched(tiny_clip):
    before = tiny_clip.frames[0].drivable.copy()
    out = apply_counterfactual(tiny_clip, COUNTERFACTUAL_VARIANTS["Gate-DAP-D w/o Mask"])
    assert all(not f.drivable.any() for f in out.frames)
    assert np.array_equal(tiny_clip.frames[0].drivable, before)
    with pytest.raises(UsageError):
        counterfact_remove_classes(tiny_clip, COUNTERFACTUAL_VARIANTS["Gate-DAP-D w/o Mask"])


def test_drivable_removal_changes_more_input_than_flow_removal_on_slow_scenes():
    clip = generate_synthetic_clip(slow_scene_spec(seed=0, image_size=32, clip_len=2))
    base = normalize_inputs(clip)
    no_mask = normalize_inputs(apply_counterfactual(clip, COUNTERFACTUAL_VARIANTS["Gate-DAP-D w/o Mask"]))
    no_movers = normalize_inputs(apply_counterfactual(clip, COUNTERFACTUAL_VARIANTS["Gate-DAP-F w/o V-P"]))
    drivable_change = np.abs(base["drivable"] - no_mask["drivable"]).sum()
    flow_change = np.abs(base["flow"] - no_movers["flow"]).sum()
    assert flow_change > 0
    assert drivable_change > flow_change
