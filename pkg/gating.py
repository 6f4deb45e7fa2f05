"""Gating modules: spatial (SpaG), information (MO-/MU-InfoG) and memory (MemoG).

Every gate multiplies features by a mask. Closing a gate swaps the mask for its
neutral constant (ones, or 1/n across n information types) without touching
any stored parameter, so a trained model can be ablated and restored freely.
"""

import logging
from typing import Dict, Iterable, List, Mapping, Optional, Sequence, Set, Tuple

import numpy as np

from config import GateConfig, ModelConfig
from error_handler import ShapeError, UsageError
from param_store import ParamStore
from tensor_core import (
    Tensor, concat, conv2d, elu, linear, pool_channel, reshape, sigmoid, softmax, tanh,
)

logger = logging.getLogger(__name__)

Params = Mapping[str, Tensor]

# Name components that identify gate-owned parameters
SPAG = "spag"
MO = "mo"
TU = "tu"
MU = "mu"


# ---------------------------------------------------------------------------
# Parameter initialization
# ---------------------------------------------------------------------------

def init_spag(store: ParamStore, prefix: str, kernel_size: int = 7) -> None:
    store.kaiming_uniform(f"{prefix}.weight", (1, 2, kernel_size, kernel_size))
    store.zeros(f"{prefix}.bias", (1,))


def init_mo_infog(store: ParamStore, prefix: str, channels: int) -> None:
    for branch in ("wf", "wg"):
        store.kaiming_uniform(f"{prefix}.{branch}.weight", (channels, channels, 1, 1))
        store.zeros(f"{prefix}.{branch}.bias", (channels,))


def init_reducer(store: ParamStore, prefix: str, channels: int) -> None:
    store.kaiming_uniform(f"{prefix}.weight", (1, channels, 1, 1))
    store.zeros(f"{prefix}.bias", (1,))


def init_gru(store: ParamStore, prefix: str, input_dim: int, hidden_dim: int) -> None:
    for gate in ("z", "r", "h"):
        store.truncated_normal(f"{prefix}.w{gate}", (hidden_dim + input_dim, hidden_dim))
        store.zeros(f"{prefix}.b{gate}", (hidden_dim,))


# ---------------------------------------------------------------------------
# SpaG
# ---------------------------------------------------------------------------

def spag_attention(S: Tensor, params: Params, prefix: str = SPAG) -> Tensor:
    """A_s = σ(conv([avg_c(S); max_c(S)])), a 1×H×W map in (0,1)."""
    if S.ndim != 3:
        raise ShapeError(f"SpaG expects C×H×W features, got {S.shape}")
    weight = params[f"{prefix}.weight"]
    pad = (weight.shape[-1] - 1) // 2
    pooled = concat([pool_channel("avg", S), pool_channel("max", S)], axis=0)
    return sigmoid(conv2d(pooled, weight, params[f"{prefix}.bias"], padding=pad))


def spag_forward(S: Tensor, params: Params, prefix: str = SPAG, enabled: bool = True,
                 trace: Optional[dict] = None, trace_key: str = SPAG) -> Tensor:
    if not enabled:
        return S
    attention = spag_attention(S, params, prefix)
    if trace is not None:
        trace.setdefault(trace_key, []).append(attention.data[0].copy())
    return attention * S


# ---------------------------------------------------------------------------
# MO-InfoG / MU-InfoG
# ---------------------------------------------------------------------------

def mo_infog_forward(M: Tensor, params: Params, prefix: str = MO, enabled: bool = True) -> Tensor:
    """M' = ELU(W_f·M) ⊙ σ(W_g·M) with 1×1 convolutions."""
    if not enabled:
        return M
    features = elu(conv2d(M, params[f"{prefix}.wf.weight"], params[f"{prefix}.wf.bias"]))
    gate = sigmoid(conv2d(M, params[f"{prefix}.wg.weight"], params[f"{prefix}.wg.bias"]))
    return features * gate


def _validate_forced(forced: Mapping[int, float], n: int) -> None:
    for index, value in forced.items():
        if not 0 <= index < n:
            raise UsageError(f"forced mask index {index} out of range for {n} inputs")
        if not 0.0 <= value <= 1.0:
            raise UsageError(f"forced mask value {value} must lie in [0, 1]")
    if sum(forced.values()) > 1.0 + 1e-12:
        raise UsageError(f"forced masks sum to {sum(forced.values())} > 1")


def mu_infog_forward(M_list: Sequence[Tensor], params: Params, reducers: Sequence[str],
                     enabled: bool = True, forced: Optional[Mapping[int, float]] = None
                     ) -> Tuple[List[Tensor], List[Tensor]]:
    """Softmax-weighted mixing of n same-shaped C×H×W inputs.

    ``reducers`` names one 1×1 reduction per input, or a single shared one.
    ``forced`` pins chosen inputs' masks to constants; the other inputs then
    share the remaining mass through a softmax over themselves only.
    Returns the gated inputs and the H×W masks, which sum to 1 everywhere.
    """
    n = len(M_list)
    if n == 0:
        raise UsageError("MU-InfoG needs at least one input")
    shape = M_list[0].shape
    if len(shape) != 3 or any(m.shape != shape for m in M_list):
        raise ShapeError(f"MU-InfoG inputs must share one C×H×W shape, got {[m.shape for m in M_list]}")
    if len(reducers) not in (1, n):
        raise UsageError(f"MU-InfoG got {len(reducers)} reducers for {n} inputs")
    forced = dict(forced or {})
    _validate_forced(forced, n)

    spatial = shape[1:]
    free = [i for i in range(n) if i not in forced]
    remaining = 1.0 - sum(forced.values())
    masks: List[Optional[Tensor]] = [None] * n
    for i, value in forced.items():
        masks[i] = Tensor.full(spatial, value)

    if free:
        if not enabled:
            for i in free:
                masks[i] = Tensor.full(spatial, remaining * neutral_mask_value(MU, len(free)))
        else:
            logits = []
            for i in free:
                prefix = reducers[0] if len(reducers) == 1 else reducers[i]
                logits.append(conv2d(M_list[i], params[f"{prefix}.weight"], params[f"{prefix}.bias"]))
            weights = softmax(concat(logits, axis=0), axis=0)
            if remaining != 1.0:
                weights = weights * remaining
            for slot, i in enumerate(free):
                masks[i] = weights[slot]

    outputs = [masks[i] * M_list[i] for i in range(n)]
    return outputs, masks


# ---------------------------------------------------------------------------
# GRU and MemoG
# ---------------------------------------------------------------------------

def gru_cell(H_prev: Tensor, X: Tensor, params: Params, prefix: str = "gru") -> Tensor:
    """z gates the candidate: H = (1−z)⊙H_prev + z⊙h̃."""
    wz = params[f"{prefix}.wz"]
    hidden = wz.shape[1]
    if H_prev.shape != (hidden,) or X.shape != (wz.shape[0] - hidden,):
        raise ShapeError(f"GRU expects hidden ({hidden},) and input ({wz.shape[0] - hidden},), "
                         f"got {H_prev.shape} and {X.shape}")
    joint = concat([H_prev, X], axis=0)
    z = sigmoid(linear(joint, wz, params[f"{prefix}.bz"]))
    r = sigmoid(linear(joint, params[f"{prefix}.wr"], params[f"{prefix}.br"]))
    candidate = tanh(linear(concat([r * H_prev, X], axis=0), params[f"{prefix}.wh"], params[f"{prefix}.bh"]))
    return (1.0 - z) * H_prev + z * candidate


def memog_forward(H_prev: Tensor, X_window: Sequence[Tensor], gate: GateConfig, params: Params,
                  prefix: str = "memog", mo_prefix: Optional[str] = None, tu_prefix: Optional[str] = None,
                  trace: Optional[dict] = None, trace_key: str = TU) -> Tensor:
    """One MemoG step.

    ``X_window`` runs oldest to current. The hidden state passes through
    MO-InfoG as a d_h×1×1 map; with temporal uncertainty on, the window frames
    are mixed by MU-InfoG with one shared reduction and the current frame's
    gated share feeds the GRU. Closed, it is a plain GRU step on the current
    frame.
    """
    if not X_window:
        raise UsageError("MemoG needs a window of at least one frame")
    mo_prefix = mo_prefix or f"{prefix}.{MO}"
    tu_prefix = tu_prefix or f"{prefix}.{TU}"
    hidden = H_prev.shape[0]

    if gate.memog_open:
        gated_hidden = mo_infog_forward(reshape(H_prev, (hidden, 1, 1)), params, mo_prefix)
        H_in = reshape(gated_hidden, (hidden,))
    else:
        H_in = H_prev

    current = X_window[-1]
    if gate.temporal_uncertainty and gate.memog_open:
        width = current.shape[0]
        frames = [reshape(x, (width, 1, 1)) for x in X_window]
        gated, masks = mu_infog_forward(frames, params, [tu_prefix])
        current = reshape(gated[-1], (width,))
        if trace is not None:
            trace.setdefault(trace_key, []).append(np.array([m.data.reshape(-1)[0] for m in masks]))
    elif gate.temporal_uncertainty and trace is not None:
        # closed: the current frame passes through; the TU weights read as uniform
        trace.setdefault(trace_key, []).append(np.full(len(X_window), neutral_mask_value(TU, len(X_window))))

    return gru_cell(H_in, current, params, f"{prefix}.gru")


# ---------------------------------------------------------------------------
# Gate closing
# ---------------------------------------------------------------------------

def neutral_mask_value(kind: str, n: int = 1) -> float:
    """Constant that replaces a closed gate's mask."""
    if kind in (SPAG, MO):
        return 1.0
    if kind in (MU, TU):
        if n < 1:
            raise UsageError("neutral MU mask needs n >= 1")
        return 1.0 / n
    raise UsageError(f"unknown gate kind '{kind}'")


def apply_gate_closing(config: ModelConfig, gate: GateConfig) -> ModelConfig:
    """Return ``config`` running under ``gate``; parameters are shared, never altered."""
    closed = [name for name, on in (("spag", gate.spag_open), ("memog", gate.memog_open),
                                    ("mu_infog", gate.mu_infog_open)) if not on]
    if closed:
        logger.debug(f"Closing gates: {', '.join(closed)}")
    return config.model_copy(update={"gate": gate})


def inactive_parameters(gate: GateConfig, names: Iterable[str], forced_streams: Iterable[str] = ()) -> Set[str]:
    """Names of parameters the given gate setting disconnects from the graph."""
    dead = set()
    if not gate.spag_open:
        dead.add(SPAG)
    if not gate.memog_open:
        dead.update((MO, TU))
    if not gate.temporal_uncertainty:
        dead.add(TU)
    if not gate.mu_infog_open:
        dead.add(MU)
    forced_streams = set(forced_streams)

    inactive = set()
    for name in names:
        parts = name.split(".")
        if dead.intersection(parts):
            inactive.add(name)
        elif MU in parts and forced_streams.intersection(parts):
            inactive.add(name)
    return inactive
