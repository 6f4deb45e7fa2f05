import json
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence

import numpy as np

from config import GDAP_DATA_DIR, INFO_TYPES, SEMANTIC_PALETTE, STREAM_CHANNELS
from error_handler import InputError, UsageError
from tensor_io import read_binary_pgm, read_gdap, read_pgm, write_binary_pgm, write_gdap, write_pgm

logger = logging.getLogger(__name__)

MANIFEST_FILE = "meta.json"
NUM_CLASSES = len(SEMANTIC_PALETTE)


@dataclass
class FrameStreams:
    """The four aligned information streams of one frame."""

    rgb: np.ndarray        # 3×H×W in [0, 1]
    flow: np.ndarray       # 2×H×W (dx, dy) in pixels/frame
    semantic: np.ndarray   # H×W labels 0..3
    drivable: np.ndarray   # H×W in {0, 1}

    def copy(self) -> "FrameStreams":
        return FrameStreams(self.rgb.copy(), self.flow.copy(), self.semantic.copy(), self.drivable.copy())

    def stream(self, name: str) -> np.ndarray:
        if name not in STREAM_CHANNELS:
            raise UsageError(f"unknown stream '{name}'")
        return getattr(self, name)


@dataclass
class ClipSample:
    """k input frames plus the target frame, with the target's saliency and fixations."""

    clip_id: str
    frames: List[FrameStreams]
    saliency: np.ndarray
    fixations: np.ndarray
    meta: Dict[str, Any] = field(default_factory=dict)

    @property
    def k(self) -> int:
        return len(self.frames) - 1

    @property
    def height(self) -> int:
        return int(self.saliency.shape[0])

    @property
    def width(self) -> int:
        return int(self.saliency.shape[1])

    @property
    def input_frames(self) -> List[FrameStreams]:
        return self.frames[:-1]

    def copy(self) -> "ClipSample":
        return replace(self, frames=[f.copy() for f in self.frames], saliency=self.saliency.copy(),
                       fixations=self.fixations.copy(), meta=json.loads(json.dumps(self.meta)))


def normalize_inputs(sample: ClipSample, max_speed: float = 4.0,
                     streams: Sequence[str] = INFO_TYPES) -> Dict[str, np.ndarray]:
    """Per stream, a k×C×H×W array of model-ready input frames.

    rgb passes through, flow is divided by ``max_speed`` and clipped to
    [−1, 1], semantic labels become a 4-channel one-hot, drivable becomes one
    {0, 1} channel. The learned per-stream projection happens in the model.
    """
    if sample.k < 1:
        raise InputError(f"clip {sample.clip_id} has no input frames")
    out: Dict[str, np.ndarray] = {}
    for name in streams:
        frames = []
        for index, frame in enumerate(sample.input_frames):
            values = frame.stream(name)
            if name == "rgb":
                encoded = values.astype(np.float64)
            elif name == "flow":
                encoded = np.clip(values / max_speed, -1.0, 1.0)
            elif name == "semantic":
                encoded = one_hot(values, sample.clip_id, index)
            else:
                encoded = (values > 0).astype(np.float64)[None]
            frames.append(encoded)
        out[name] = np.stack(frames)
    return out


def one_hot(labels: np.ndarray, clip_id: str = "?", frame_index: int = 0) -> np.ndarray:
    labels = np.asarray(labels)
    unknown = np.setdiff1d(np.unique(labels), np.arange(NUM_CLASSES))
    if unknown.size:
        raise InputError(f"clip {clip_id} frame {frame_index}: unknown semantic labels {unknown.tolist()}")
    return (labels[None] == np.arange(NUM_CLASSES)[:, None, None]).astype(np.float64)


class ClipStore:
    """Clip directories under one root:

    clip_<id>/frame_<t>/{rgb.gdap, flow.gdap, semantic.pgm, drivable.pgm}
    clip_<id>/{saliency.gdap, fixations.pgm, meta.json}
    """

    def __init__(self, root: Optional[str] = None):
        self.root = Path(root or GDAP_DATA_DIR)

    def clip_dir(self, clip_id: str) -> Path:
        return self.root / f"clip_{clip_id}"

    def list_clips(self) -> List[str]:
        if not self.root.is_dir():
            raise InputError(f"data directory not found: {self.root}")
        return sorted(p.name[len("clip_"):] for p in self.root.iterdir() if p.is_dir() and p.name.startswith("clip_"))

    def save_clip(self, sample: ClipSample) -> Path:
        directory = self.clip_dir(sample.clip_id)
        for t, frame in enumerate(sample.frames):
            frame_dir = directory / f"frame_{t}"
            write_gdap(frame_dir / "rgb.gdap", frame.rgb)
            write_gdap(frame_dir / "flow.gdap", frame.flow)
            write_pgm(frame_dir / "semantic.pgm", frame.semantic.astype(np.uint8))
            write_binary_pgm(frame_dir / "drivable.pgm", frame.drivable)
        write_gdap(directory / "saliency.gdap", sample.saliency)
        write_binary_pgm(directory / "fixations.pgm", sample.fixations)

        manifest = dict(sample.meta)
        manifest.update({
            "clip_id": sample.clip_id,
            "k": sample.k,
            "height": sample.height,
            "width": sample.width,
            "palette": {str(label): name for label, name in SEMANTIC_PALETTE.items()},
        })
        (directory / MANIFEST_FILE).write_text(json.dumps(manifest, indent=2, sort_keys=True))
        logger.debug(f"Saved clip {sample.clip_id} to {directory}")
        return directory

    def load_clip(self, clip_id: str) -> ClipSample:
        directory = self.clip_dir(clip_id)
        manifest_path = directory / MANIFEST_FILE
        if not manifest_path.is_file():
            raise InputError(f"missing clip manifest: {manifest_path}")
        try:
            manifest = json.loads(manifest_path.read_text())
        except json.JSONDecodeError as e:
            raise InputError(f"{manifest_path}: invalid manifest ({e})")
        for key in ("k", "height", "width"):
            if key not in manifest:
                raise InputError(f"{manifest_path}: manifest lacks '{key}'")

        shape = (manifest["height"], manifest["width"])
        frames = []
        for t in range(manifest["k"] + 1):
            frame_dir = directory / f"frame_{t}"
            frame = FrameStreams(
                rgb=read_gdap(frame_dir / "rgb.gdap"),
                flow=read_gdap(frame_dir / "flow.gdap"),
                semantic=read_pgm(frame_dir / "semantic.pgm"),
                drivable=read_binary_pgm(frame_dir / "drivable.pgm"),
            )
            _check_frame(frame, shape, frame_dir)
            frames.append(frame)

        saliency = read_gdap(directory / "saliency.gdap")
        fixations = read_binary_pgm(directory / "fixations.pgm")
        if saliency.shape != shape or fixations.shape != shape:
            raise InputError(f"{directory}: target maps do not match {shape}")
        return ClipSample(clip_id=str(manifest.get("clip_id", clip_id)), frames=frames,
                          saliency=saliency, fixations=fixations, meta=manifest)

    def load_all(self) -> List[ClipSample]:
        clips = [self.load_clip(clip_id) for clip_id in self.list_clips()]
        if not clips:
            raise InputError(f"no clips found under {self.root}")
        logger.info(f"✅ Loaded {len(clips)} clips from {self.root}")
        return clips


def _check_frame(frame: FrameStreams, shape, frame_dir: Path) -> None:
    if frame.rgb.shape != (3, *shape) or frame.flow.shape != (2, *shape):
        raise InputError(f"{frame_dir}: rgb/flow shapes {frame.rgb.shape}, {frame.flow.shape} do not match {shape}")
    if frame.semantic.shape != shape or frame.drivable.shape != shape:
        raise InputError(f"{frame_dir}: label map shapes do not match {shape}")
    if frame.semantic.max(initial=0) >= NUM_CLASSES:
        raise InputError(f"{frame_dir}/semantic.pgm: labels outside 0..{NUM_CLASSES - 1}")


def clip_io(mode: str, directory: str, sample: Optional[ClipSample] = None,
            clip_id: Optional[str] = None) -> ClipSample:
    """Save ``sample`` under ``directory`` or load ``clip_id`` from it."""
    store = ClipStore(directory)
    if mode == "save":
        if sample is None:
            raise UsageError("clip_io save needs a sample")
        store.save_clip(sample)
        return sample
    if mode == "load":
        if clip_id is None:
            raise UsageError("clip_io load needs a clip id")
        return store.load_clip(clip_id)
    raise UsageError(f"clip_io mode must be 'save' or 'load', got '{mode}'")
