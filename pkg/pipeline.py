"""Full Gate-DAP forward pass over a clip and the joint saliency loss."""

import logging
from dataclasses import dataclass
from typing import Dict, List, Mapping, Optional, Sequence, Set, Union

import numpy as np

from config import STREAM_CHANNELS, GateConfig, LossConfig, ModelConfig
from encoder_decoder import decode_attention_map, encode_frame, init_decoder, init_encoder, tokens_to_grid
from error_handler import InputError, ShapeError, UsageError
from gating import (
    MU, apply_gate_closing, inactive_parameters, init_gru, init_mo_infog, init_reducer, init_spag,
    memog_forward, mu_infog_forward, spag_forward,
)
from param_store import ParamStore
from tensor_core import Tensor, concat, conv2d, linear, log, reshape, sqrt, square

logger = logging.getLogger(__name__)

STD_FLOOR = 1e-12

ArrayOrTensor = Union[np.ndarray, Tensor]


class GateDapModel:
    """Parameters plus the configuration that decides how they are wired.

    Several models may share one ParamStore; ``with_gate`` uses that to
    ablate gates on a trained model without copying or altering weights.
    """

    def __init__(self, config: ModelConfig, store: Optional[ParamStore] = None, seed: int = 0):
        self.config = config
        self.store = store if store is not None else self.init_params(ParamStore(seed))

    @property
    def gate(self) -> GateConfig:
        return self.config.gate

    @property
    def streams(self) -> List[str]:
        return list(self.config.info_types)

    def with_gate(self, gate: GateConfig) -> "GateDapModel":
        return GateDapModel(apply_gate_closing(self.config, gate), self.store)

    def memory_gate_prefix(self, stream: str) -> str:
        return "memog.shared.mo" if self.config.share_memory_gate else f"memog.{stream}.mo"

    def init_params(self, store: ParamStore) -> ParamStore:
        cfg = self.config
        enc = cfg.encoder
        grid = enc.grid_size
        init_encoder(store, enc, cfg.in_channels)
        init_decoder(store, len(cfg.info_types) * cfg.memory_channels, cfg.decoder_width, enc.upsample_blocks)
        if cfg.share_memory_gate:
            init_mo_infog(store, "memog.shared.mo", cfg.gru_hidden)
        for stream in cfg.info_types:
            store.kaiming_uniform(f"stream.{stream}.proj.weight", (cfg.in_channels, STREAM_CHANNELS[stream], 1, 1))
            store.zeros(f"stream.{stream}.proj.bias", (cfg.in_channels,))
            init_spag(store, f"stream.{stream}.spag", cfg.spag_kernel)
            store.truncated_normal(f"stream.{stream}.to_x.weight", (enc.embed_dim * enc.num_tokens, cfg.gru_input))
            store.zeros(f"stream.{stream}.to_x.bias", (cfg.gru_input,))
            if not cfg.share_memory_gate:
                init_mo_infog(store, f"memog.{stream}.mo", cfg.gru_hidden)
            init_reducer(store, f"memog.{stream}.tu", cfg.gru_input)
            init_gru(store, f"memog.{stream}.gru", cfg.gru_input, cfg.gru_hidden)
            store.truncated_normal(f"stream.{stream}.readout.weight",
                                   (cfg.gru_hidden, cfg.memory_channels * grid * grid))
            store.zeros(f"stream.{stream}.readout.bias", (cfg.memory_channels * grid * grid,))
            init_reducer(store, f"{MU}.{stream}", cfg.memory_channels)
        logger.info(f"🚀 Initialized Gate-DAP with {store.num_parameters()} parameters "
                    f"({len(cfg.info_types)} streams, gates: {cfg.gate.label()})")
        return store

    def inactive_parameters(self, forced_streams: Sequence[str] = ()) -> Set[str]:
        return inactive_parameters(self.gate, self.store.names(), forced_streams)

    # ------------------------------------------------------------------
    def _frames(self, inputs: Mapping[str, Sequence[np.ndarray]], stream: str) -> List[Tensor]:
        if stream not in inputs:
            raise InputError(f"clip is missing the '{stream}' stream")
        frames = list(inputs[stream])
        k = self.config.clip_len
        if len(frames) < k:
            raise InputError(f"stream '{stream}' has {len(frames)} frames, model needs {k}")
        size = self.config.encoder.image_size
        tensors = []
        for frame in frames[-k:]:
            frame = frame if isinstance(frame, Tensor) else Tensor(frame)
            if frame.shape != (STREAM_CHANNELS[stream], size, size):
                raise ShapeError(f"stream '{stream}' frame has shape {frame.shape}, "
                                 f"expected {(STREAM_CHANNELS[stream], size, size)}")
            tensors.append(frame)
        return tensors

    def _encode_stream(self, stream: str, frames: List[Tensor], trace: Optional[dict]) -> List[Tensor]:
        """Per frame: projection → encoder → grid → SpaG → d_x vector."""
        params, cfg = self.store, self.config
        vectors = []
        for frame in frames:
            projected = conv2d(frame, params[f"stream.{stream}.proj.weight"], params[f"stream.{stream}.proj.bias"])
            grid = tokens_to_grid(encode_frame(projected, cfg.encoder, params))
            gated = spag_forward(grid, params, f"stream.{stream}.spag", enabled=cfg.gate.spag_open,
                                 trace=trace, trace_key=f"spag.{stream}")
            vectors.append(linear(gated.flatten(), params[f"stream.{stream}.to_x.weight"],
                                  params[f"stream.{stream}.to_x.bias"]))
        return vectors

    def _memory(self, stream: str, vectors: List[Tensor], trace: Optional[dict]) -> Tensor:
        cfg, params = self.config, self.store
        hidden = Tensor.zeros((cfg.gru_hidden,))
        for t in range(len(vectors)):
            window = vectors[max(0, t - cfg.window + 1): t + 1]
            hidden = memog_forward(hidden, window, cfg.gate, params, prefix=f"memog.{stream}",
                                   mo_prefix=self.memory_gate_prefix(stream), trace=trace,
                                   trace_key=f"tu.{stream}")
        grid = cfg.encoder.grid_size
        readout = linear(hidden, params[f"stream.{stream}.readout.weight"], params[f"stream.{stream}.readout.bias"])
        return reshape(readout, (cfg.memory_channels, grid, grid))

    def forward_clip(self, inputs: Mapping[str, Sequence[np.ndarray]], mode: str = "train",
                     mask_overrides: Optional[Mapping[str, float]] = None,
                     trace: Optional[dict] = None) -> Tensor:
        """Predict the attention map of the frame after the clip.

        ``inputs`` maps each stream name to its normalized frames (oldest
        first). ``mask_overrides`` pins MU-InfoG masks of named streams;
        ``trace`` collects the SpaG, TU and MU-InfoG masks when given.
        """
        streams = self.streams
        forced = {}
        for stream, value in (mask_overrides or {}).items():
            if stream not in streams:
                raise UsageError(f"mask override for unknown stream '{stream}' (model streams: {streams})")
            forced[streams.index(stream)] = float(value)

        memories = []
        for stream in streams:
            vectors = self._encode_stream(stream, self._frames(inputs, stream), trace)
            memories.append(self._memory(stream, vectors, trace))

        gated, masks = mu_infog_forward(memories, self.store, [f"{MU}.{s}" for s in streams],
                                        enabled=self.gate.mu_infog_open, forced=forced)
        if trace is not None:
            trace[MU] = {s: m.data.copy() for s, m in zip(streams, masks)}
        stacked = concat(gated, axis=0)
        return decode_attention_map(stacked, self.store, self.config.encoder.upsample_blocks, mode=mode)


# ---------------------------------------------------------------------------
# Joint loss
# ---------------------------------------------------------------------------

@dataclass
class LossTerms:
    total: Tensor
    kld_term: float
    cc_term: float
    nss_term: float


def _as_array(value: ArrayOrTensor) -> np.ndarray:
    return value.data if isinstance(value, Tensor) else np.asarray(value, dtype=np.float64)


def joint_loss(Y_hat: Tensor, Y: ArrayOrTensor, P: ArrayOrTensor, cfg: LossConfig) -> LossTerms:
    """KLD(Ŷ/ΣŶ ‖ Y) − α·CC(Y, Ŷ) − β·NSS(Ŷ, P).

    Standard deviations are population ones. A near-constant Y or Ŷ zeroes the
    CC and NSS terms, and a fixation-free P zeroes the NSS term.
    """
    target = _as_array(Y)
    fixations = _as_array(P)
    if target.shape != Y_hat.shape or fixations.shape != Y_hat.shape:
        raise ShapeError(f"loss inputs disagree: prediction {Y_hat.shape}, saliency {target.shape}, "
                         f"fixations {fixations.shape}")
    total_mass = target.sum()
    if total_mass <= 0:
        raise InputError("ground-truth saliency map has no mass")
    if abs(total_mass - 1.0) > 1e-6:
        logger.warning(f"⚠️ Saliency map sums to {total_mass:.6f}; normalizing")
        target = target / total_mass
    eps = cfg.epsilon

    normalized = Y_hat / Y_hat.sum()
    kld = (log(eps + target / (normalized + eps)) * target).sum()
    loss = kld

    centered = Y_hat - Y_hat.mean()
    spread = sqrt(square(centered).mean())
    target_std = target.std()
    degenerate = spread.item() < STD_FLOOR or target_std < STD_FLOOR
    if degenerate:
        logger.warning("⚠️ Constant saliency map in loss; CC and NSS terms set to 0")

    cc_term = 0.0
    if not degenerate and cfg.alpha:
        cc = ((target - target.mean()) * centered).mean() / (spread * target_std)
        loss = loss - cc * cfg.alpha
        cc_term = -cfg.alpha * cc.item()

    nss_term = 0.0
    fixation_count = fixations.sum()
    if not degenerate and cfg.beta and fixation_count > 0:
        nss = ((centered / spread) * fixations).sum() / fixation_count
        loss = loss - nss * cfg.beta
        nss_term = -cfg.beta * nss.item()

    return LossTerms(total=loss, kld_term=kld.item(), cc_term=cc_term, nss_term=nss_term)
