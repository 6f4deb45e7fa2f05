import argparse
import logging
import sys
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional

import tensor_core
from config import PRESETS, RunConfig, load_run_config, merge_overrides, save_run_config
from data_manager import ClipStore
from error_handler import EXIT_OK, UsageError, report_error
from gradcheck import ABS_FLOOR, run_gradcheck
from pipeline import GateDapModel
from synthetic_data import generate_dataset
from trainer import CHECKPOINT_DIR, counterfactual_sweep, evaluate, gate_ablation, train, write_report

logger = logging.getLogger(__name__)

ECHO_FILE = "config.echo"
GATE_FLAGS = {"spag": "spag", "memog": "memog", "mu_infog": "mu_infog", "tu": "temporal_uncertainty"}
SWITCH_VALUES = {"on": True, "off": False, "true": True, "false": False, "1": True, "0": False}


# ---------------------------------------------------------------------------
# Flag parsing
# ---------------------------------------------------------------------------

def _key_values(items: Optional[List[str]], flag: str) -> Dict[str, str]:
    pairs = {}
    for item in items or []:
        if "=" not in item:
            raise UsageError(f"{flag} expects NAME=VALUE, got '{item}'")
        key, value = item.split("=", 1)
        pairs[key.strip()] = value.strip()
    return pairs


def parse_gate_flags(items: Optional[List[str]]) -> Dict[str, bool]:
    """'spag=off' style switches → GateConfig alias keys."""
    gate = {}
    for name, value in _key_values(items, "--gate").items():
        if name not in GATE_FLAGS:
            raise UsageError(f"unknown gate '{name}', expected one of {', '.join(GATE_FLAGS)}")
        if value.lower() not in SWITCH_VALUES:
            raise UsageError(f"gate '{name}' must be on or off, got '{value}'")
        gate[GATE_FLAGS[name]] = SWITCH_VALUES[value.lower()]
    return gate


def parse_mask_overrides(items: Optional[List[str]]) -> Dict[str, float]:
    overrides = {}
    for stream, value in _key_values(items, "--force-mask").items():
        try:
            overrides[stream] = float(value)
        except ValueError:
            raise UsageError(f"--force-mask value for '{stream}' is not a number: '{value}'")
    return overrides


def _echoed_config(checkpoint: Optional[str]) -> Optional[Path]:
    if not checkpoint:
        return None
    path = Path(checkpoint) / ECHO_FILE
    return path if path.is_file() else None


def build_config(args: argparse.Namespace) -> RunConfig:
    """Preset, then config file (or the checkpoint's echoed config), then flags."""
    config = load_run_config(args.config, args.preset)
    echoed = _echoed_config(getattr(args, "checkpoint", None))
    if args.config is None and echoed is not None and args.command != "train":
        trained = load_run_config(str(echoed), args.preset)
        config = config.model_copy(update={"model": trained.model, "loss": trained.loss})
        logger.info(f"📄 Using model configuration echoed in {echoed}")

    overrides: Dict[str, Any] = {"command": args.command}
    for flag, key in (("seed", "seed"), ("threads", "threads"), ("checkpoint", "checkpoint")):
        value = getattr(args, flag, None)
        if value is not None:
            overrides[key] = value
    if getattr(args, "data", None):
        overrides["data_dir"] = args.data
    if getattr(args, "out", None):
        overrides["output_dir"] = args.out
    if getattr(args, "steps", None) is not None:
        overrides.setdefault("train", {})["steps"] = args.steps
    if getattr(args, "dtype", None):
        overrides.setdefault("train", {})["dtype"] = args.dtype
    if getattr(args, "lr", None) is not None:
        overrides["optimizer"] = {"learning_rate": args.lr}
    gate = parse_gate_flags(getattr(args, "gate", None))
    if gate:
        overrides["model"] = {"gate": gate}
    return merge_overrides(config, overrides)


def _fmt(value: Optional[float]) -> str:
    return "NA" if value is None else f"{value:.4f}"


def _load_model(config: RunConfig) -> GateDapModel:
    model = GateDapModel(config.model, seed=config.seed)
    if not config.checkpoint:
        raise UsageError(f"'{config.command}' needs --checkpoint")
    model.store.load(config.checkpoint)
    return model


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------

def cmd_gen_data(args: argparse.Namespace, config: RunConfig) -> int:
    if args.clips < 1:
        raise UsageError("clips must be ≥ 1")
    scene = config.scene.model_copy(update={
        "seed": config.seed,
        "image_size": args.size or config.scene.image_size,
        "clip_len": args.clip_len or config.model.clip_len,
    })
    out = Path(config.output_dir)
    store = ClipStore(str(out))
    for sample in generate_dataset(scene, args.clips):
        directory = store.save_clip(sample)
        print(f"✅ {directory}: k={sample.k}, {sample.height}×{sample.width}, "
              f"{len(sample.meta['objects'])} objects, {int(sample.fixations.sum())} fixations")
    save_run_config(config.model_copy(update={"scene": scene}), str(out), ECHO_FILE)
    return EXIT_OK


def cmd_train(args: argparse.Namespace, config: RunConfig) -> int:
    tensor_core.set_default_dtype(config.train.dtype)
    out = Path(config.output_dir)
    save_run_config(config, str(out), ECHO_FILE)
    clips = ClipStore(config.data_dir).load_all()
    model = GateDapModel(config.model, seed=config.seed)
    resume = model.store.load(config.checkpoint) if config.checkpoint else None

    result = train(clips, model, config.loss, config.optimizer, config.train, seed=config.seed,
                   out_dir=str(out), resume=resume, n_splits=config.n_splits)
    save_run_config(config, str(out / CHECKPOINT_DIR), ECHO_FILE)
    if not result.history.empty:
        print(f"🏁 Trained to step {result.step}; final loss {result.history['loss'].iloc[-1]:.5f}")
    return EXIT_OK


def cmd_eval(args: argparse.Namespace, config: RunConfig) -> int:
    out = Path(config.output_dir)
    save_run_config(config, str(out), ECHO_FILE)
    model = _load_model(config)
    clips = ClipStore(config.data_dir).load_all()
    result = evaluate(clips, model, seed=config.seed, n_splits=config.n_splits, threads=config.threads,
                      mask_overrides=parse_mask_overrides(args.force_mask), maps_dir=out / "maps")
    write_report(result.table(), out / "metrics.csv")
    print("📊 " + "  ".join(f"{name.upper()} {_fmt(value)}" for name, value in result.aggregate.as_row().items()))
    return EXIT_OK


def cmd_ablate(args: argparse.Namespace, config: RunConfig) -> int:
    out = Path(config.output_dir)
    save_run_config(config, str(out), ECHO_FILE)
    model = _load_model(config)
    clips = ClipStore(config.data_dir).load_all()
    table = gate_ablation(clips, model, seed=config.seed, n_splits=config.n_splits, threads=config.threads,
                          maps_dir=out / "maps" if args.save_maps else None)
    write_report(table, out / "ablation.csv")
    return EXIT_OK


def cmd_counterfact(args: argparse.Namespace, config: RunConfig) -> int:
    out = Path(config.output_dir)
    save_run_config(config, str(out), ECHO_FILE)
    model = _load_model(config)
    clips = ClipStore(config.data_dir).load_all()
    table = counterfactual_sweep(clips, model, seed=config.seed, n_splits=config.n_splits, threads=config.threads,
                                 mask_overrides=parse_mask_overrides(args.force_mask),
                                 maps_dir=out / "maps" if args.save_maps else None)
    write_report(table, out / "counterfact.csv")
    return EXIT_OK


def cmd_gradcheck(args: argparse.Namespace, config: RunConfig) -> int:
    save_run_config(config, str(config.output_dir), ECHO_FILE)
    names = [name for item in args.ops for name in item.split(",") if name]
    reports = run_gradcheck(names, tol=args.tol, seed=config.seed)
    print(f"   {'case':<16} {'max error':>10} {'max rel.':>10}  (error = |a − n| / max(|a|, |n|, {ABS_FLOOR}))")
    for report in reports:
        print(f"✅ {report.name:<16} {report.max_error:>10.2e} {report.max_rel_error:>10.2e}  "
              f"({report.checked} entries)")
    return EXIT_OK


COMMANDS: Dict[str, Callable[[argparse.Namespace, RunConfig], int]] = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "eval": cmd_eval,
    "ablate": cmd_ablate,
    "counterfact": cmd_counterfact,
    "gradcheck": cmd_gradcheck,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="gate-dap", description="Gated driver-attention prediction toolkit")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON run config layered over the preset")
    common.add_argument("--preset", choices=sorted(PRESETS), default="desk")
    common.add_argument("--seed", type=int)
    common.add_argument("--out", help="output directory")

    sub = parser.add_subparsers(dest="command", required=True)

    gen = sub.add_parser("gen-data", parents=[common], help="render synthetic clips")
    gen.add_argument("--clips", type=int, default=8)
    gen.add_argument("--size", type=int)
    gen.add_argument("--clip-len", type=int)

    def model_flags(p: argparse.ArgumentParser, needs_checkpoint: bool) -> None:
        p.add_argument("--data", help="clip directory root")
        p.add_argument("--checkpoint", required=needs_checkpoint)
        p.add_argument("--gate", action="append", metavar="NAME=on|off",
                       help="override a gate (spag, memog, mu_infog, tu); repeatable")
        p.add_argument("--threads", type=int, help="evaluation worker threads (default: $GDAP_THREADS)")

    tr = sub.add_parser("train", parents=[common], help="train on a clip directory")
    model_flags(tr, needs_checkpoint=False)
    tr.add_argument("--steps", type=int)
    tr.add_argument("--lr", type=float)
    tr.add_argument("--dtype", choices=sorted(tensor_core.DTYPES))

    ev = sub.add_parser("eval", parents=[common], help="score a checkpoint")
    model_flags(ev, needs_checkpoint=True)
    ev.add_argument("--force-mask", action="append", metavar="STREAM=VALUE")

    ab = sub.add_parser("ablate", parents=[common], help="gate-closing ablation (8 rows)")
    model_flags(ab, needs_checkpoint=True)
    ab.add_argument("--save-maps", action="store_true", help="write one predicted map per gate combination")

    cf = sub.add_parser("counterfact", parents=[common], help="counterfactual input sweep")
    model_flags(cf, needs_checkpoint=True)
    cf.add_argument("--force-mask", action="append", metavar="STREAM=VALUE")
    cf.add_argument("--save-maps", action="store_true", help="write one predicted map per variant")

    gc = sub.add_parser("gradcheck", parents=[common], help="finite-difference gradient suite")
    gc.add_argument("--ops", action="append", default=[], help="'all' or comma-separated case names")
    gc.add_argument("--tol", type=float)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        config = build_config(args)
        logger.info(f"🚀 Running '{args.command}'")
        return COMMANDS[args.command](args, config)
    except Exception as e:
        return report_error(e)


def cli() -> None:
    sys.exit(main())


if __name__ == "__main__":
    cli()
