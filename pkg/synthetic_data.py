"""Synthetic driving clips with exact flow, semantics, drivable area and saliency.

Vehicles are rectangles and pedestrians small squares moving with integer
velocities over a road band. A sudden event makes an object appear or
accelerate part-way through the clip.
"""

import logging
from dataclasses import dataclass, field
from typing import List, Optional, Tuple

import numpy as np
from scipy.ndimage import maximum_filter

from config import SceneSpec
from data_manager import ClipSample, FrameStreams
from error_handler import UsageError

logger = logging.getLogger(__name__)

BACKGROUND, ROAD, VEHICLE, PEDESTRIAN = 0, 1, 2, 3
SKY_COLOR = np.array([0.60, 0.75, 0.95])
ROAD_COLOR = np.array([0.35, 0.35, 0.38])
EVENT_WEIGHT = 2.0


@dataclass
class SceneObject:
    label: int
    x: int
    y: int
    w: int
    h: int
    vx: int
    vy: int
    color: np.ndarray
    event: Optional[str] = None
    event_frame: int = 0
    positions: List[Tuple[int, int]] = field(default_factory=list)
    velocities: List[Tuple[int, int]] = field(default_factory=list)

    def visible(self, t: int) -> bool:
        return not (self.event == "appear" and t < self.event_frame)

    def velocity(self, t: int, max_speed: float) -> Tuple[int, int]:
        """Displacement applied between frame t−1 and frame t."""
        vx, vy = self.vx, self.vy
        if self.event == "accelerate" and t >= self.event_frame:
            limit = int(max_speed)
            vx = int(np.clip(2 * vx, -limit, limit))
            vy = int(np.clip(2 * vy, -limit, limit))
        return vx, vy

    def plan(self, frames: int, max_speed: float) -> None:
        self.positions = [(self.x, self.y)]
        self.velocities = [self.velocity(1, max_speed)]
        for t in range(1, frames):
            vx, vy = self.velocity(t, max_speed)
            px, py = self.positions[-1]
            self.positions.append((px + vx, py + vy))
            self.velocities.append((vx, vy))

    def footprint(self, t: int, size: int) -> Optional[Tuple[slice, slice]]:
        if not self.visible(t):
            return None
        x, y = self.positions[t]
        x0, x1 = max(x, 0), min(x + self.w, size)
        y0, y1 = max(y, 0), min(y + self.h, size)
        if x0 >= x1 or y0 >= y1:
            return None
        return slice(y0, y1), slice(x0, x1)


def _signed(rng: np.random.Generator, low: int, high: int) -> int:
    return int(rng.integers(low, high + 1)) * (1 if rng.random() < 0.5 else -1)


def _spawn_objects(spec: SceneSpec, rng: np.random.Generator, road_row: int) -> List[SceneObject]:
    size = spec.image_size
    objects = []
    n_vehicles = int(rng.integers(spec.vehicles[0], spec.vehicles[1] + 1))
    n_pedestrians = int(rng.integers(spec.pedestrians[0], spec.pedestrians[1] + 1))

    for _ in range(n_vehicles):
        w = int(rng.integers(max(3, size // 10), max(4, size // 5) + 1))
        h = max(2, w // 2)
        objects.append(SceneObject(
            label=VEHICLE,
            x=int(rng.integers(0, size - w + 1)),
            y=int(rng.integers(road_row, max(road_row, size - h) + 1)),
            w=w, h=h,
            vx=_signed(rng, spec.speed_range[0], spec.speed_range[1]),
            vy=0,
            color=rng.uniform(0.2, 1.0, size=3),
        ))
    for _ in range(n_pedestrians):
        side = max(2, size // 32)
        objects.append(SceneObject(
            label=PEDESTRIAN,
            x=int(rng.integers(0, size - side + 1)),
            y=int(rng.integers(road_row, max(road_row, size - side) + 1)),
            w=side, h=side,
            vx=0,
            vy=_signed(rng, 1, 1),
            color=np.array([0.9, 0.2, 0.2]) * rng.uniform(0.8, 1.0),
        ))

    for obj in objects:
        if spec.clip_len >= 1 and rng.random() < spec.sudden_event_prob:
            obj.event = "appear" if rng.random() < 0.5 else "accelerate"
            obj.event_frame = int(rng.integers(1, spec.clip_len + 1))
        obj.plan(spec.clip_len + 1, spec.max_speed)
    return objects


def _render(objects: List[SceneObject], t: int, size: int, road_row: int) -> FrameStreams:
    semantic = np.full((size, size), BACKGROUND, dtype=np.uint8)
    semantic[road_row:] = ROAD
    rgb = np.empty((3, size, size))
    rgb[:, :road_row] = SKY_COLOR[:, None, None]
    rgb[:, road_row:] = ROAD_COLOR[:, None, None]
    flow = np.zeros((2, size, size))
    occupied = np.zeros((size, size), dtype=bool)

    # vehicles first so pedestrians stay on top
    for obj in sorted(objects, key=lambda o: o.label):
        region = obj.footprint(t, size)
        if region is None:
            continue
        semantic[region] = obj.label
        rgb[(slice(None), *region)] = obj.color[:, None, None]
        vx, vy = obj.velocities[t]
        flow[(0, *region)] = vx
        flow[(1, *region)] = vy
        occupied[region] = True

    road = np.zeros((size, size), dtype=bool)
    road[road_row:] = True
    drivable = (road & ~occupied).astype(np.uint8)
    return FrameStreams(rgb=rgb, flow=flow, semantic=semantic, drivable=drivable)


def _saliency(objects: List[SceneObject], t: int, spec: SceneSpec, road_row: int) -> np.ndarray:
    size = spec.image_size
    rows, cols = np.mgrid[0:size, 0:size].astype(np.float64)
    ego_x = (size - 1) / 2.0
    mixture = np.zeros((size, size))
    for obj in objects:
        region = obj.footprint(t, size)
        if region is None:
            continue
        cy = (region[0].start + region[0].stop - 1) / 2.0
        cx = (region[1].start + region[1].stop - 1) / 2.0
        speed = float(np.hypot(*obj.velocities[t]))
        weight = (1.0 + speed / spec.max_speed)
        weight *= np.exp(-((cx - ego_x) / (size / 4.0)) ** 2) * (0.5 + 0.5 * cy / max(size - 1, 1))
        if obj.event is not None and obj.event_frame >= t - 1:
            weight *= EVENT_WEIGHT
        mixture += weight * np.exp(-((rows - cy) ** 2 + (cols - cx) ** 2) / (2.0 * spec.sigma_g ** 2))

    if mixture.sum() <= 0:
        mixture = np.zeros((size, size))
        mixture[road_row:] = 1.0
    return mixture / mixture.sum()


def fixation_peaks(saliency: np.ndarray, count: int, size: int = 3) -> np.ndarray:
    """Binary map of the ``count`` highest local maxima (ties broken by raster order)."""
    if count < 1:
        raise UsageError("fixation count must be >= 1")
    peaks = (saliency == maximum_filter(saliency, size=size, mode="constant")) & (saliency > 0)
    candidates = np.flatnonzero(peaks)
    order = np.lexsort((candidates, -saliency.reshape(-1)[candidates]))
    chosen = candidates[order[:count]]
    fixations = np.zeros(saliency.size, dtype=np.uint8)
    fixations[chosen] = 1
    return fixations.reshape(saliency.shape)


def generate_synthetic_clip(spec: SceneSpec, clip_id: Optional[str] = None) -> ClipSample:
    """Render k+1 frames; saliency and fixations describe the last one."""
    if spec.clip_len < 1:
        raise UsageError("clip_len must be >= 1")
    size = spec.image_size
    road_row = int(round(spec.road_top * size))
    rng = np.random.default_rng(spec.seed)
    objects = _spawn_objects(spec, rng, road_row)

    frames = [_render(objects, t, size, road_row) for t in range(spec.clip_len + 1)]
    target = spec.clip_len
    saliency = _saliency(objects, target, spec, road_row)
    fixations = fixation_peaks(saliency, spec.fixations)

    meta = {
        "seed": spec.seed,
        "objects": [
            {"label": int(o.label), "w": o.w, "h": o.h, "velocity": [o.vx, o.vy],
             "event": o.event, "event_frame": o.event_frame}
            for o in objects
        ],
    }
    clip_id = clip_id if clip_id is not None else f"{spec.seed:04d}"
    return ClipSample(clip_id=clip_id, frames=frames, saliency=saliency, fixations=fixations, meta=meta)


def generate_dataset(spec: SceneSpec, clips: int) -> List[ClipSample]:
    """``clips`` clips with seeds spec.seed, spec.seed+1, …"""
    if clips < 1:
        raise UsageError("clips must be ≥ 1")
    samples = []
    for i in range(clips):
        sample = generate_synthetic_clip(spec.model_copy(update={"seed": spec.seed + i}), clip_id=f"{i:04d}")
        samples.append(sample)
        logger.info(f"✅ Generated clip {sample.clip_id}: {len(sample.meta['objects'])} objects, "
                    f"{sample.k + 1} frames, {spec.image_size}×{spec.image_size}")
    return samples


def slow_scene_spec(seed: int = 0, image_size: int = 64, clip_len: int = 4) -> SceneSpec:
    """Scenes with crawling objects and no sudden events."""
    return SceneSpec(seed=seed, image_size=image_size, clip_len=clip_len, speed_range=(1, 1),
                     sudden_event_prob=0.0)


def empty_scene_spec(seed: int = 0, image_size: int = 64, clip_len: int = 4) -> SceneSpec:
    return SceneSpec(seed=seed, image_size=image_size, clip_len=clip_len, vehicles=(0, 0), pedestrians=(0, 0))
