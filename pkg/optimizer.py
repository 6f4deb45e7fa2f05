import logging
from dataclasses import dataclass, field
from typing import Any, Dict, Iterable, Optional

import numpy as np

from config import OptimizerConfig
from error_handler import ConfigError, UsageError
from param_store import ParamStore

logger = logging.getLogger(__name__)


@dataclass
class AdamState:
    """First/second moments per parameter plus the shared step counter."""

    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    weight_decay: float = 0.0
    step: int = 0
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)

    @classmethod
    def from_config(cls, cfg: OptimizerConfig) -> "AdamState":
        return cls(learning_rate=cfg.learning_rate, beta1=cfg.beta1, beta2=cfg.beta2,
                   epsilon=cfg.epsilon, weight_decay=cfg.weight_decay)

    def state_dict(self) -> Dict[str, Any]:
        return {
            "step": self.step,
            "hyper": {"learning_rate": self.learning_rate, "beta1": self.beta1, "beta2": self.beta2,
                      "epsilon": self.epsilon, "weight_decay": self.weight_decay},
            "m": self.m,
            "v": self.v,
        }

    def load_state_dict(self, state: Dict[str, Any], store: ParamStore) -> None:
        """Restore moments and step; hyperparameters stay as configured."""
        for kind in ("m", "v"):
            for name, value in state[kind].items():
                if name not in store:
                    raise ConfigError(f"optimizer moment for unknown parameter '{name}'")
                if tuple(value.shape) != store[name].shape:
                    raise ConfigError(f"optimizer moment '{name}' has shape {value.shape}, expected {store[name].shape}")
        self.m = {name: np.array(value, dtype=np.float64) for name, value in state["m"].items()}
        self.v = {name: np.array(value, dtype=np.float64) for name, value in state["v"].items()}
        self.step = int(state["step"])
        logger.info(f"✅ Restored optimizer state at step {self.step}")


def adam_step(store: ParamStore, state: AdamState, skip: Iterable[str] = ()) -> None:
    """One Adam update with bias correction and decoupled weight decay.

    Parameters listed in ``skip`` may lack a gradient (their gate is closed);
    they are left untouched. Any other missing gradient is a usage error.
    Gradients are cleared afterwards.
    """
    skip = set(skip)
    missing = [name for name, p in store.items() if p.grad is None and name not in skip]
    if missing:
        raise UsageError(f"missing gradient for {len(missing)} parameter(s), e.g. {missing[:3]}; run backward() first")

    state.step += 1
    b1, b2 = state.beta1, state.beta2
    correction1 = 1.0 - b1 ** state.step
    correction2 = 1.0 - b2 ** state.step

    for name, param in store.items():
        grad = param.grad
        if grad is None:
            continue
        m = state.m.get(name)
        v = state.v.get(name)
        if m is None:
            m = np.zeros(param.shape)
            v = np.zeros(param.shape)
        m = b1 * m + (1.0 - b1) * grad
        v = b2 * v + (1.0 - b2) * grad * grad
        state.m[name], state.v[name] = m, v

        update = (m / correction1) / (np.sqrt(v / correction2) + state.epsilon)
        values = param.data - state.learning_rate * update
        if state.weight_decay:
            values = values - state.learning_rate * state.weight_decay * param.data
        param.data = values.astype(param.data.dtype)

    store.zero_grad()


def make_optimizer(cfg: OptimizerConfig, resume: Optional[Dict[str, Any]] = None,
                   store: Optional[ParamStore] = None) -> AdamState:
    state = AdamState.from_config(cfg)
    if resume is not None and store is not None:
        state.load_state_dict(resume, store)
    return state
