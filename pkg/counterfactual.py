"""Counterfactual inputs: strip object classes or the drivable mask from one stream.

The model is never retrained; a counterfactual clip is simply evaluated in
place of the original and the metric deltas show how much the removed
information mattered.
"""

import logging
from typing import Dict, FrozenSet

import numpy as np
from pydantic import BaseModel, ConfigDict, field_validator, model_validator

from config import INFO_TYPES
from data_manager import ClipSample
from error_handler import UsageError
from synthetic_data import BACKGROUND, PEDESTRIAN, ROAD, VEHICLE

logger = logging.getLogger(__name__)

CLASS_LABELS = {"vehicle": VEHICLE, "pedestrian": PEDESTRIAN}
STREAM_LETTERS = {"rgb": "I", "flow": "F", "semantic": "S", "drivable": "D"}


class CounterfactSpec(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    stream: str
    remove: FrozenSet[str] = frozenset()
    drivable_mask_removal: bool = False

    @field_validator("stream")
    @classmethod
    def _known_stream(cls, value: str) -> str:
        if value not in INFO_TYPES:
            raise ValueError(f"unknown stream '{value}'")
        return value

    @field_validator("remove")
    @classmethod
    def _known_classes(cls, value: FrozenSet[str]) -> FrozenSet[str]:
        unknown = set(value) - set(CLASS_LABELS)
        if unknown:
            raise ValueError(f"cannot remove classes {sorted(unknown)}; choose from {sorted(CLASS_LABELS)}")
        return value

    @model_validator(mode="after")
    def _consistent(self) -> "CounterfactSpec":
        if self.drivable_mask_removal and self.stream != "drivable":
            raise ValueError("drivable_mask_removal only applies to the drivable stream")
        if self.stream == "drivable" and self.remove:
            raise ValueError("the drivable stream supports mask removal only")
        return self

    def label(self) -> str:
        letter = STREAM_LETTERS[self.stream]
        if self.drivable_mask_removal:
            return f"Gate-DAP-{letter} w/o Mask"
        parts = [tag for tag, name in (("V", "vehicle"), ("P", "pedestrian")) if name in self.remove]
        return f"Gate-DAP-{letter} w/o {'-'.join(parts)}"


def _variants() -> Dict[str, CounterfactSpec]:
    variants = {}
    for stream in ("rgb", "flow", "semantic"):
        for remove in (("pedestrian",), ("vehicle",), ("vehicle", "pedestrian")):
            spec = CounterfactSpec(stream=stream, remove=frozenset(remove))
            variants[spec.label()] = spec
    spec = CounterfactSpec(stream="drivable", drivable_mask_removal=True)
    variants[spec.label()] = spec
    return variants


# Gate-DAP-{I,F,S} w/o {P, V, V-P} and Gate-DAP-D w/o Mask
COUNTERFACTUAL_VARIANTS: Dict[str, CounterfactSpec] = _variants()
BASELINE_NAME = "Gate-DAP-Full-Model"


def _median_background(rgb: np.ndarray, semantic: np.ndarray) -> np.ndarray:
    background = (semantic == BACKGROUND) | (semantic == ROAD)
    if not background.any():
        return np.median(rgb.reshape(3, -1), axis=1)
    return np.median(rgb[:, background], axis=1)


def counterfact_remove_classes(sample: ClipSample, spec: CounterfactSpec) -> ClipSample:
    """Erase the listed classes from ``spec.stream`` in every frame.

    Footprints come from each frame's semantic map. Semantic labels fall back
    to background, rgb footprints take the frame's median background colour
    and flow footprints are zeroed.
    """
    if spec.stream == "drivable":
        raise UsageError("object classes cannot be removed from the drivable stream")
    labels = [CLASS_LABELS[name] for name in sorted(spec.remove)]
    result = sample.copy()
    for frame in result.frames:
        footprint = np.isin(frame.semantic, labels)
        if not footprint.any():
            continue
        if spec.stream == "semantic":
            frame.semantic[footprint] = BACKGROUND
        elif spec.stream == "rgb":
            fill = _median_background(frame.rgb, frame.semantic)
            frame.rgb[:, footprint] = fill[:, None]
        elif spec.stream == "flow":
            frame.flow[:, footprint] = 0.0
    return result


def counterfact_remove_drivable(sample: ClipSample) -> ClipSample:
    result = sample.copy()
    for frame in result.frames:
        frame.drivable = np.zeros_like(frame.drivable)
    return result


def apply_counterfactual(sample: ClipSample, spec: CounterfactSpec) -> ClipSample:
    if spec.drivable_mask_removal:
        return counterfact_remove_drivable(sample)
    return counterfact_remove_classes(sample, spec)
