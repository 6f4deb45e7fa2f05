import os
import json
import logging
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple

from dotenv import load_dotenv
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

from error_handler import ConfigError

# Load environment variables
load_dotenv()

# Set up dynamic logging level
LOG_LEVEL = os.getenv("LOG_LEVEL", "INFO").upper()
logging.basicConfig(level=getattr(logging, LOG_LEVEL, logging.INFO),
                    format='%(asctime)s - %(name)s - %(levelname)s - %(message)s')
logger = logging.getLogger(__name__)

# Numerics
GDAP_DTYPE = os.getenv("GDAP_DTYPE", "float64").lower()
GDAP_SEED = int(os.getenv("GDAP_SEED", "0"))
GDAP_THREADS = int(os.getenv("GDAP_THREADS", "1"))

# Paths
GDAP_DATA_DIR = os.getenv("GDAP_DATA_DIR", "data")
GDAP_OUTPUT_DIR = os.getenv("GDAP_OUTPUT_DIR", "runs")

# Stream names in the order the model stacks them (I, S, F, D)
INFO_TYPES = ("rgb", "semantic", "flow", "drivable")
STREAM_CHANNELS = {"rgb": 3, "flow": 2, "semantic": 4, "drivable": 1}
SEMANTIC_PALETTE = {0: "background", 1: "road", 2: "vehicle", 3: "pedestrian"}


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid", populate_by_name=True)


class GateConfig(_Strict):
    """Open/closed switches for every gate. Closing never touches parameters."""

    spag_open: bool = Field(True, alias="spag")
    memog_open: bool = Field(True, alias="memog")
    mu_infog_open: bool = Field(True, alias="mu_infog")
    temporal_uncertainty: bool = True

    def with_flags(self, **flags: bool) -> "GateConfig":
        data = self.model_dump()
        data.update(flags)
        return GateConfig(**data)

    def label(self) -> str:
        parts = [name for name, on in (("SpaG", self.spag_open), ("MemoG", self.memog_open),
                                        ("MU-InfoG", self.mu_infog_open)) if on]
        return "+".join(parts) if parts else "no-gating"


class EncoderConfig(_Strict):
    image_size: int = 64
    patch_size: int = 8
    embed_dim: int = 32
    depth: int = 2
    num_heads: int = 2
    mlp_ratio: float = 2.0

    @model_validator(mode="after")
    def _check_shapes(self) -> "EncoderConfig":
        if self.image_size % self.patch_size:
            raise ValueError(f"image_size {self.image_size} not divisible by patch_size {self.patch_size}")
        if self.embed_dim % self.num_heads:
            raise ValueError(f"embed_dim {self.embed_dim} not divisible by num_heads {self.num_heads}")
        if self.patch_size & (self.patch_size - 1):
            raise ValueError(f"patch_size {self.patch_size} must be a power of two")
        return self

    @property
    def grid_size(self) -> int:
        return self.image_size // self.patch_size

    @property
    def num_tokens(self) -> int:
        return self.grid_size ** 2

    @property
    def upsample_blocks(self) -> int:
        return self.patch_size.bit_length() - 1


class ModelConfig(_Strict):
    encoder: EncoderConfig = Field(default_factory=EncoderConfig)
    gate: GateConfig = Field(default_factory=GateConfig)
    clip_len: int = 4
    info_types: List[str] = Field(default_factory=lambda: list(INFO_TYPES))
    in_channels: int = 3
    gru_input: int = 64
    gru_hidden: int = 64
    memory_channels: int = 4
    tu_window: Optional[int] = None
    share_memory_gate: bool = False
    spag_kernel: int = 7
    decoder_width: int = 32
    max_speed: float = 4.0

    @field_validator("info_types")
    @classmethod
    def _check_types(cls, value: List[str]) -> List[str]:
        if not value:
            raise ValueError("info_types must not be empty")
        if len(set(value)) != len(value):
            raise ValueError(f"info_types has duplicates: {value}")
        unknown = [v for v in value if v not in STREAM_CHANNELS]
        if unknown:
            raise ValueError(f"unknown info types: {unknown}")
        return value

    @model_validator(mode="after")
    def _check_model(self) -> "ModelConfig":
        if self.clip_len < 1:
            raise ValueError("clip_len must be >= 1")
        if self.spag_kernel % 2 == 0:
            raise ValueError("spag_kernel must be odd")
        if self.tu_window is not None and self.tu_window < 1:
            raise ValueError("tu_window must be >= 1")
        return self

    @property
    def window(self) -> int:
        return self.tu_window or self.clip_len


class LossConfig(_Strict):
    alpha: float = Field(0.1, ge=0.0)
    beta: float = Field(0.1, ge=0.0)
    epsilon: float = Field(1e-7, gt=0.0)


class OptimizerConfig(_Strict):
    learning_rate: float = Field(1e-3, ge=0.0)
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    weight_decay: float = Field(0.0, ge=0.0)


class SceneSpec(_Strict):
    seed: int = 0
    image_size: int = 64
    clip_len: int = 4
    vehicles: Tuple[int, int] = (1, 3)
    pedestrians: Tuple[int, int] = (0, 2)
    speed_range: Tuple[int, int] = (1, 3)
    max_speed: float = 4.0
    sigma_g: float = 4.0
    sudden_event_prob: float = Field(0.3, ge=0.0, le=1.0)
    fixations: int = 3
    road_top: float = Field(0.4, gt=0.0, lt=1.0)


class TrainSettings(_Strict):
    steps: int = 2000
    log_every: int = 50
    eval_every: int = 500
    checkpoint_every: int = 500
    dtype: str = GDAP_DTYPE


class RunConfig(_Strict):
    command: str = "train"
    data_dir: str = GDAP_DATA_DIR
    output_dir: str = GDAP_OUTPUT_DIR
    checkpoint: Optional[str] = None
    model: ModelConfig = Field(default_factory=ModelConfig)
    loss: LossConfig = Field(default_factory=LossConfig)
    optimizer: OptimizerConfig = Field(default_factory=OptimizerConfig)
    train: TrainSettings = Field(default_factory=TrainSettings)
    scene: SceneSpec = Field(default_factory=SceneSpec)
    seed: int = GDAP_SEED
    threads: int = Field(GDAP_THREADS, ge=1)
    n_splits: int = Field(10, ge=1)


def desk_preset() -> RunConfig:
    """Small CPU-friendly configuration used by the overfit experiments."""
    return RunConfig()


def reference_preset() -> RunConfig:
    """Full-scale hyperparameters: ViT-B/16 backbone and a 1e-6 learning rate."""
    model = ModelConfig(
        encoder=EncoderConfig(image_size=224, patch_size=16, embed_dim=768, depth=12, num_heads=12, mlp_ratio=4.0),
        gru_input=256,
        gru_hidden=256,
        decoder_width=128,
    )
    return RunConfig(
        model=model,
        optimizer=OptimizerConfig(learning_rate=1e-6, weight_decay=1e-4),
        scene=SceneSpec(image_size=224),
    )


PRESETS = {"desk": desk_preset, "reference": reference_preset}


def load_run_config(path: Optional[str] = None, preset: str = "desk") -> RunConfig:
    """Load a RunConfig from a JSON file layered over a preset."""
    if preset not in PRESETS:
        raise ConfigError(f"unknown preset '{preset}', expected one of {sorted(PRESETS)}")
    base = PRESETS[preset]().model_dump(by_alias=True)
    if path:
        with open(path, "r") as f:
            try:
                overrides = json.load(f)
            except json.JSONDecodeError as e:
                raise ConfigError(f"{path}: invalid JSON ({e})")
        base = _deep_merge(base, overrides)
        logger.info(f"📄 Loaded run config from {path}")
    return RunConfig.model_validate(base)


def save_run_config(config: RunConfig, out_dir: str, filename: str = "config.echo") -> Path:
    """Write the resolved config next to the run's outputs."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    path = out / filename
    path.write_text(config.model_dump_json(by_alias=True, indent=2))
    logger.debug(f"Echoed run config to {path}")
    return path


def merge_overrides(config: RunConfig, overrides: Dict[str, Any]) -> RunConfig:
    """Layer a nested dict of (alias-keyed) overrides onto a config and re-validate."""
    return RunConfig.model_validate(_deep_merge(config.model_dump(by_alias=True), overrides))


def _deep_merge(base: Dict[str, Any], overrides: Dict[str, Any]) -> Dict[str, Any]:
    merged = dict(base)
    for key, value in overrides.items():
        if isinstance(value, dict) and isinstance(merged.get(key), dict):
            merged[key] = _deep_merge(merged[key], value)
        else:
            merged[key] = value
    return merged


__all__ = ['LOG_LEVEL', 'GDAP_DTYPE', 'GDAP_SEED', 'GDAP_THREADS', 'GDAP_DATA_DIR', 'GDAP_OUTPUT_DIR',
           'INFO_TYPES', 'STREAM_CHANNELS', 'SEMANTIC_PALETTE', 'GateConfig', 'EncoderConfig', 'ModelConfig',
           'LossConfig', 'OptimizerConfig', 'SceneSpec', 'TrainSettings', 'RunConfig', 'desk_preset',
           'reference_preset', 'load_run_config', 'save_run_config', 'merge_overrides']
