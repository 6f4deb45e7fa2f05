"""Training, evaluation, gate-closing ablation and counterfactual sweeps."""

import logging
import re
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from config import LossConfig, OptimizerConfig, TrainSettings
from counterfactual import BASELINE_NAME, COUNTERFACTUAL_VARIANTS, apply_counterfactual
from data_manager import ClipSample, normalize_inputs
from error_handler import ConfigError, InputError, NumericalAbort, UsageError
from metrics import METRIC_NAMES, MetricsReport, aggregate, metrics_report
from optimizer import adam_step, make_optimizer
from pipeline import GateDapModel, joint_loss
from tensor_core import no_grad
from tensor_io import write_map_pgm

logger = logging.getLogger(__name__)

TRAIN_COLUMNS = ["step", "loss", "kld_term", "cc_term", "nss_term", "wall_ms"]
EVAL_COLUMNS = ["clip_id", "frame_id", *METRIC_NAMES]
AGGREGATE_ID = "mean"
CHECKPOINT_DIR = "checkpoint"

# spag, memog, mu_infog: none, each alone, each pair, all
ABLATION_ORDER = [
    (False, False, False),
    (True, False, False),
    (False, True, False),
    (False, False, True),
    (True, True, False),
    (True, False, True),
    (False, True, True),
    (True, True, True),
]


def write_report(frame: pd.DataFrame, path: Path) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    frame.to_csv(path, index=False, na_rep="NA", float_format="%.10g")
    logger.info(f"💾 Wrote {path} ({len(frame)} rows)")
    return path


def prepare_inputs(clips: Sequence[ClipSample], model: GateDapModel) -> List[Dict[str, np.ndarray]]:
    size = model.config.encoder.image_size
    prepared = []
    for clip in clips:
        if clip.height != size or clip.width != size:
            raise ConfigError(f"clip {clip.clip_id} is {clip.height}×{clip.width}, model expects {size}×{size}")
        if clip.k < model.config.clip_len:
            raise ConfigError(f"clip {clip.clip_id} has {clip.k} input frames, model needs {model.config.clip_len}")
        prepared.append(normalize_inputs(clip, model.config.max_speed, model.streams))
    return prepared


def clip_for_step(step: int, count: int, seed: int) -> int:
    """Index of the clip used at ``step`` (1-based): a fresh seeded permutation per epoch."""
    epoch, offset = divmod(step - 1, count)
    return int(np.random.default_rng([seed, epoch]).permutation(count)[offset])


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------

@dataclass
class TrainResult:
    history: pd.DataFrame
    evaluations: pd.DataFrame
    step: int
    checkpoint: Optional[Path] = None


def train(clips: Sequence[ClipSample], model: GateDapModel, loss_cfg: LossConfig, optimizer_cfg: OptimizerConfig,
          settings: TrainSettings, seed: int = 0, out_dir: Optional[str] = None,
          resume: Optional[Dict] = None, n_splits: int = 10) -> TrainResult:
    """Adam on one clip per step until ``settings.steps`` total steps.

    Aborts with NumericalAbort on a non-finite loss or parameter. ``resume`` is
    the optimizer state returned by ParamStore.load and continues its step count.
    """
    if not clips:
        raise InputError("training set is empty")
    inputs = prepare_inputs(clips, model)
    state = make_optimizer(optimizer_cfg, resume, model.store)
    skip = model.inactive_parameters()
    if skip:
        logger.info(f"Gates {model.gate.label()}: {len(skip)} parameters receive no gradient")

    out = Path(out_dir) if out_dir else None
    history, evaluations = [], []
    start = state.step + 1
    if start > settings.steps:
        logger.warning(f"⚠️ Checkpoint already at step {state.step} >= {settings.steps}; nothing to train")
    else:
        logger.info(f"🚀 Training steps {start}..{settings.steps} on {len(clips)} clips "
                    f"(lr {state.learning_rate:g}, gates {model.gate.label()})")

    for step in range(start, settings.steps + 1):
        index = clip_for_step(step, len(clips), seed)
        clip = clips[index]
        began = time.perf_counter()

        prediction = model.forward_clip(inputs[index], mode="train")
        terms = joint_loss(prediction, clip.saliency, clip.fixations, loss_cfg)
        loss = terms.total.item()
        if not np.isfinite(loss):
            raise NumericalAbort(step, loss, model.store.param_norms())
        terms.total.backward()
        adam_step(model.store, state, skip)
        norms = model.store.param_norms()
        if not all(np.isfinite(v) for v in norms.values()):
            raise NumericalAbort(step, loss, norms)

        history.append({"step": step, "loss": loss, "kld_term": terms.kld_term, "cc_term": terms.cc_term,
                        "nss_term": terms.nss_term, "wall_ms": (time.perf_counter() - began) * 1000.0})

        if settings.log_every and step % settings.log_every == 0:
            logger.info(f"step {step}: loss {loss:.5f} (kld {terms.kld_term:.4f}, cc {terms.cc_term:.4f}, "
                        f"nss {terms.nss_term:.4f})")
        if settings.eval_every and step % settings.eval_every == 0:
            result = evaluate(clips, model, seed=seed, n_splits=n_splits)
            evaluations.append({"step": step, **result.aggregate.as_row()})
            logger.info(f"📊 step {step}: train CC {result.aggregate.cc:.4f}, KLD {result.aggregate.kld:.4f}")
        if out and settings.checkpoint_every and step % settings.checkpoint_every == 0:
            model.store.save(str(out / CHECKPOINT_DIR), optimizer_state=state.state_dict())

    history_frame = pd.DataFrame(history, columns=TRAIN_COLUMNS)
    eval_frame = pd.DataFrame(evaluations, columns=["step", *METRIC_NAMES])
    checkpoint = None
    if out:
        checkpoint = model.store.save(str(out / CHECKPOINT_DIR), optimizer_state=state.state_dict())
        train_csv = out / "train.csv"
        if resume is not None and train_csv.is_file() and not history_frame.empty:
            history_frame.to_csv(train_csv, mode="a", header=False, index=False, float_format="%.10g")
        else:
            write_report(history_frame, train_csv)
        if not eval_frame.empty:
            write_report(eval_frame, out / "train_eval.csv")
    return TrainResult(history=history_frame, evaluations=eval_frame, step=state.step, checkpoint=checkpoint)


# ---------------------------------------------------------------------------
# Evaluation
# ---------------------------------------------------------------------------

@dataclass
class EvalResult:
    rows: pd.DataFrame
    aggregate: MetricsReport
    predictions: Dict[str, np.ndarray] = field(default_factory=dict)

    def table(self) -> pd.DataFrame:
        """Per-frame rows followed by the aggregate row."""
        summary = {"clip_id": AGGREGATE_ID, "frame_id": None, **self.aggregate.as_row()}
        return pd.concat([self.rows, pd.DataFrame([summary], columns=EVAL_COLUMNS)], ignore_index=True)


def _evaluate_one(model: GateDapModel, clip: ClipSample, inputs: Dict[str, np.ndarray],
                  pool: List[np.ndarray], seed: int, n_splits: int,
                  mask_overrides: Optional[Mapping[str, float]]) -> Tuple[dict, np.ndarray]:
    with no_grad():
        prediction = model.forward_clip(inputs, mode="eval", mask_overrides=mask_overrides).data
    report = metrics_report(prediction, clip.saliency, clip.fixations, pool, seed=seed, n_splits=n_splits)
    return {"clip_id": clip.clip_id, "frame_id": clip.k, **report.as_row()}, prediction


def evaluate(clips: Sequence[ClipSample], model: GateDapModel, seed: int = 0, n_splits: int = 10,
             threads: int = 1, mask_overrides: Optional[Mapping[str, float]] = None,
             maps_dir: Optional[Path] = None) -> EvalResult:
    """All six metrics on the target frame of every clip.

    Shuffled-AUC negatives come from the other clips' fixations. Clips may be
    scored on several threads; rows are merged in clip-id order.
    """
    if not clips:
        raise InputError("evaluation set is empty")
    if threads < 1:
        raise UsageError("threads must be >= 1")
    ordered = sorted(clips, key=lambda c: c.clip_id)
    inputs = prepare_inputs(ordered, model)
    pools = [[other.fixations for other in ordered if other.clip_id != clip.clip_id] for clip in ordered]

    jobs = [(model, clip, inputs[i], pools[i], seed + i, n_splits, mask_overrides) for i, clip in enumerate(ordered)]
    if threads == 1:
        results = [_evaluate_one(*job) for job in jobs]
    else:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(lambda job: _evaluate_one(*job), jobs))

    rows = sorted((row for row, _ in results), key=lambda r: r["clip_id"])
    predictions = {row["clip_id"]: prediction for row, prediction in results}
    if maps_dir is not None:
        for row in rows:
            write_map_pgm(Path(maps_dir) / f"clip_{row['clip_id']}_frame_{row['frame_id']}.pgm",
                          predictions[row["clip_id"]])

    reports = [MetricsReport(**{name: row[name] for name in METRIC_NAMES}) for row in rows]
    return EvalResult(rows=pd.DataFrame(rows, columns=EVAL_COLUMNS), aggregate=aggregate(reports),
                      predictions=predictions)


# ---------------------------------------------------------------------------
# Ablation and counterfactual sweeps
# ---------------------------------------------------------------------------

def _slug(name: str) -> str:
    return re.sub(r"[^A-Za-z0-9]+", "_", name).strip("_")


def gate_ablation(clips: Sequence[ClipSample], model: GateDapModel, seed: int = 0, n_splits: int = 10,
                  threads: int = 1, maps_dir: Optional[Path] = None) -> pd.DataFrame:
    """Evaluate all eight open/closed combinations of SpaG, MemoG and MU-InfoG on the same weights.

    With ``maps_dir`` each combination also writes its prediction for the first clip (by id).
    """
    checksum = model.store.checksum()
    first = min(clip.clip_id for clip in clips)
    rows = []
    for spag, memog, mu in ABLATION_ORDER:
        gate = model.gate.with_flags(spag_open=spag, memog_open=memog, mu_infog_open=mu)
        result = evaluate(clips, model.with_gate(gate), seed=seed, n_splits=n_splits, threads=threads)
        rows.append({"spag": int(spag), "memog": int(memog), "mu_infog": int(mu),
                     "label": gate.label(), **result.aggregate.as_row()})
        logger.info(f"Ablation {gate.label()}: CC {result.aggregate.cc:.4f}")
        if maps_dir is not None:
            write_map_pgm(Path(maps_dir) / f"{_slug(gate.label())}.pgm", result.predictions[first])
    if model.store.checksum() != checksum:
        raise UsageError("gate ablation modified stored parameters")
    return pd.DataFrame(rows, columns=["spag", "memog", "mu_infog", "label", *METRIC_NAMES])


def counterfactual_sweep(clips: Sequence[ClipSample], model: GateDapModel, seed: int = 0, n_splits: int = 10,
                         threads: int = 1, mask_overrides: Optional[Mapping[str, float]] = None,
                         maps_dir: Optional[Path] = None) -> pd.DataFrame:
    """Baseline plus the ten counterfactual variants, with metric deltas against the baseline."""
    checksum = model.store.checksum()
    ordered = sorted(clips, key=lambda c: c.clip_id)
    baseline = evaluate(ordered, model, seed=seed, n_splits=n_splits, threads=threads, mask_overrides=mask_overrides)
    runs = [(BASELINE_NAME, "-", baseline)]
    for name, spec in COUNTERFACTUAL_VARIANTS.items():
        altered = [apply_counterfactual(clip, spec) for clip in ordered]
        runs.append((name, spec.stream, evaluate(altered, model, seed=seed, n_splits=n_splits, threads=threads,
                                                 mask_overrides=mask_overrides)))
    if model.store.checksum() != checksum:
        raise UsageError("counterfactual sweep modified stored parameters")

    rows = []
    for name, stream, result in runs:
        row = {"variant": name, "stream": stream, **result.aggregate.as_row()}
        for metric in METRIC_NAMES:
            value, reference = getattr(result.aggregate, metric), getattr(baseline.aggregate, metric)
            row[f"delta_{metric}"] = None if value is None or reference is None else value - reference
        rows.append(row)
        if maps_dir is not None:
            first = ordered[0].clip_id
            write_map_pgm(Path(maps_dir) / f"{_slug(name)}.pgm", result.predictions[first])
    columns = ["variant", "stream", *METRIC_NAMES, *[f"delta_{m}" for m in METRIC_NAMES]]
    return pd.DataFrame(rows, columns=columns)
