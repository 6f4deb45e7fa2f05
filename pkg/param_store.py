"""Named parameter storage, initializers and checkpoint directories."""

import hashlib
import json
import logging
from pathlib import Path
from typing import Any, Dict, Iterator, List, Optional, Sequence, Tuple

import numpy as np
from scipy.stats import truncnorm

from error_handler import ConfigError, InputError, UsageError
from tensor_core import RunningStats, Tensor
from tensor_io import read_gdap, write_gdap

logger = logging.getLogger(__name__)

MANIFEST_FILE = "manifest.json"
CHECKPOINT_FORMAT = "gdap-checkpoint"
INIT_STD = 0.02


class ParamStore:
    """Parameters keyed by dotted path, iterated in sorted-name order.

    Buffers (batch-norm running statistics) live beside the parameters but
    receive no gradients and are excluded from the checksum.
    """

    def __init__(self, seed: int = 0):
        self.seed = int(seed)
        self.rng = np.random.default_rng(self.seed)
        self._params: Dict[str, Tensor] = {}
        self._buffers: Dict[str, Tensor] = {}

    # ---- registration ----
    def _register(self, name: str, values: np.ndarray) -> Tensor:
        if name in self._params:
            raise UsageError(f"parameter '{name}' registered twice")
        tensor = Tensor(values, requires_grad=True)
        self._params[name] = tensor
        return tensor

    def truncated_normal(self, name: str, shape: Sequence[int], std: float = INIT_STD) -> Tensor:
        values = truncnorm.rvs(-2.0, 2.0, loc=0.0, scale=std, size=tuple(shape), random_state=self.rng)
        return self._register(name, np.asarray(values))

    def kaiming_uniform(self, name: str, shape: Sequence[int]) -> Tensor:
        fan_in = int(np.prod(shape[1:]))
        bound = np.sqrt(6.0 / fan_in)
        return self._register(name, self.rng.uniform(-bound, bound, size=tuple(shape)))

    def zeros(self, name: str, shape: Sequence[int]) -> Tensor:
        return self._register(name, np.zeros(tuple(shape)))

    def ones(self, name: str, shape: Sequence[int]) -> Tensor:
        return self._register(name, np.ones(tuple(shape)))

    def batchnorm(self, prefix: str, channels: int) -> None:
        self.ones(f"{prefix}.gamma", (channels,))
        self.zeros(f"{prefix}.beta", (channels,))
        self._buffers[f"{prefix}.running_mean"] = Tensor(np.zeros(channels))
        self._buffers[f"{prefix}.running_var"] = Tensor(np.ones(channels))

    def running_stats(self, prefix: str) -> RunningStats:
        try:
            return RunningStats(self._buffers[f"{prefix}.running_mean"], self._buffers[f"{prefix}.running_var"])
        except KeyError:
            raise UsageError(f"no batch-norm statistics registered under '{prefix}'")

    # ---- access ----
    def __getitem__(self, name: str) -> Tensor:
        try:
            return self._params[name]
        except KeyError:
            raise UsageError(f"unknown parameter '{name}'")

    def __setitem__(self, name: str, values: np.ndarray) -> None:
        current = self[name]
        values = np.asarray(values)
        if values.shape != current.shape:
            raise ShapeMismatch(name, current.shape, values.shape)
        current.data = values.astype(current.data.dtype, copy=True)

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __len__(self) -> int:
        return len(self._params)

    def __iter__(self) -> Iterator[str]:
        return iter(self.names())

    def names(self) -> List[str]:
        return sorted(self._params)

    def items(self) -> List[Tuple[str, Tensor]]:
        return [(name, self._params[name]) for name in self.names()]

    def buffer_items(self) -> List[Tuple[str, Tensor]]:
        return [(name, self._buffers[name]) for name in sorted(self._buffers)]

    def num_parameters(self) -> int:
        return sum(t.size for t in self._params.values())

    # ---- bookkeeping ----
    def zero_grad(self) -> None:
        for tensor in self._params.values():
            tensor.grad = None

    def param_norms(self) -> Dict[str, float]:
        return {name: float(np.linalg.norm(t.data)) for name, t in self.items()}

    def checksum(self) -> str:
        digest = hashlib.sha256()
        for name, tensor in self.items():
            digest.update(name.encode())
            digest.update(str(tensor.shape).encode())
            digest.update(np.ascontiguousarray(tensor.data, dtype=np.float64).tobytes())
        return digest.hexdigest()

    # ---- persistence ----
    def save(self, directory: str, optimizer_state: Optional[Dict[str, Any]] = None) -> Path:
        """Write every tensor as GDAP plus a manifest (name → file, shape, dtype)."""
        root = Path(directory)
        root.mkdir(parents=True, exist_ok=True)
        manifest: Dict[str, Any] = {"format": CHECKPOINT_FORMAT, "seed": self.seed,
                                    "params": {}, "buffers": {}, "optimizer": None}
        for name, tensor in self.items():
            manifest["params"][name] = _write_entry(root, "params", name, tensor.data)
        for name, tensor in self.buffer_items():
            manifest["buffers"][name] = _write_entry(root, "buffers", name, tensor.data)

        if optimizer_state is not None:
            moments = {}
            for kind in ("m", "v"):
                moments[kind] = {name: _write_entry(root, f"optimizer/{kind}", name, value)
                                 for name, value in sorted(optimizer_state[kind].items())}
            manifest["optimizer"] = {"step": int(optimizer_state["step"]),
                                     "hyper": optimizer_state.get("hyper", {}), **moments}

        (root / MANIFEST_FILE).write_text(json.dumps(manifest, indent=2, sort_keys=True))
        logger.info(f"💾 Saved {len(self)} parameters to {root}")
        return root

    def load(self, directory: str) -> Optional[Dict[str, Any]]:
        """Copy checkpoint values into the registered parameters.

        Returns the stored optimizer state (moments and step) when present.
        """
        root = Path(directory)
        manifest_path = root / MANIFEST_FILE
        if not manifest_path.is_file():
            raise InputError(f"missing checkpoint manifest: {manifest_path}")
        manifest = json.loads(manifest_path.read_text())
        if manifest.get("format") != CHECKPOINT_FORMAT:
            raise ConfigError(f"{manifest_path}: not a {CHECKPOINT_FORMAT} manifest")

        stored = manifest.get("params", {})
        missing = sorted(set(self._params) - set(stored))
        unexpected = sorted(set(stored) - set(self._params))
        if missing or unexpected:
            raise ConfigError(f"checkpoint does not match model: missing={missing[:5]} unexpected={unexpected[:5]}")
        for name, entry in stored.items():
            values = read_gdap(root / entry["file"])
            if tuple(values.shape) != self._params[name].shape:
                raise ShapeMismatch(name, self._params[name].shape, values.shape)
            self._params[name].data = values.astype(self._params[name].data.dtype)
        for name, entry in manifest.get("buffers", {}).items():
            if name in self._buffers:
                self._buffers[name].data = read_gdap(root / entry["file"]).astype(self._buffers[name].data.dtype)

        optimizer = manifest.get("optimizer")
        logger.info(f"✅ Loaded checkpoint {root} ({len(stored)} parameters)")
        if not optimizer:
            return None
        return {
            "step": optimizer["step"],
            "hyper": optimizer.get("hyper", {}),
            "m": {name: read_gdap(root / e["file"]) for name, e in optimizer["m"].items()},
            "v": {name: read_gdap(root / e["file"]) for name, e in optimizer["v"].items()},
        }


class ShapeMismatch(ConfigError):
    def __init__(self, name: str, expected: Tuple[int, ...], found: Tuple[int, ...]):
        super().__init__(f"shape mismatch for '{name}': model expects {tuple(expected)}, checkpoint has {tuple(found)}")


def _write_entry(root: Path, group: str, name: str, values: np.ndarray) -> Dict[str, Any]:
    relative = f"{group}/{name}.gdap"
    write_gdap(root / relative, values)
    return {"file": relative, "shape": list(values.shape), "dtype": str(values.dtype)}
