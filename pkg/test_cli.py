import json

import pandas as pd
import pytest

from data_manager import ClipStore
from error_handler import EXIT_OK, EXIT_USAGE, UsageError
from main import ECHO_FILE, build_config, build_parser, main, parse_gate_flags, parse_mask_overrides

TINY_RUN = {
    "model": {
        "encoder": {"image_size": 16, "patch_size": 4, "embed_dim": 8, "depth": 1, "num_heads": 2},
        "clip_len": 2,
        "gru_input": 8,
        "gru_hidden": 8,
        "memory_channels": 2,
        "decoder_width": 4,
        "spag_kernel": 3,
    },
    "train": {"steps": 2, "log_every": 1, "eval_every": 0, "checkpoint_every": 0},
    "n_splits": 2,
}


@pytest.fixture
def tiny_run_file(tmp_path):
    path = tmp_path / "tiny.json"
    path.write_text(json.dumps(TINY_RUN))
    return str(path)


@pytest.fixture
def data_dir(tmp_path):
    out = tmp_path / "data"
    assert main(["gen-data", "--clips", "2", "--size", "16", "--clip-len", "2", "--out", str(out)]) == EXIT_OK
    return out


# =============================================================================
# Flag parsing
# =============================================================================

def test_gate_flags():
    assert parse_gate_flags(["spag=off", "tu=on"]) == {"spag": False, "temporal_uncertainty": True}
    with pytest.raises(UsageError):
        parse_gate_flags(["depth=off"])
    with pytest.raises(UsageError):
        parse_gate_flags(["spag=maybe"])
    with pytest.raises(UsageError):
        parse_gate_flags(["spag"])


def test_mask_overrides():
    assert parse_mask_overrides(["semantic=0", "flow=0.5"]) == {"semantic": 0.0, "flow": 0.5}
    with pytest.raises(UsageError):
        parse_mask_overrides(["semantic=none"])


def test_cli_overrides_layer_over_config_file(tiny_run_file):
    args = build_parser().parse_args(["train", "--config", tiny_run_file, "--gate", "spag=off", "--steps", "5",
                                      "--lr", "0.01", "--seed", "9"])
    config = build_config(args)
    assert config.model.encoder.image_size == 16
    assert not config.model.gate.spag_open
    assert config.model.gate.memog_open
    assert config.train.steps == 5
    assert config.optimizer.learning_rate == 0.01
    assert config.seed == 9


# =============================================================================
# Commands
# =============================================================================

def test_gen_data_rejects_zero_clips(tmp_path):
    assert main(["gen-data", "--clips", "0", "--out", str(tmp_path)]) == EXIT_USAGE


def test_gen_data_writes_clips(data_dir):
    assert ClipStore(str(data_dir)).list_clips() == ["0000", "0001"]
    assert (data_dir / ECHO_FILE).is_file()


def test_unknown_gate_is_a_usage_error(tmp_path):
    assert main(["train", "--gate", "depth=off", "--out", str(tmp_path)]) == EXIT_USAGE


def test_eval_requires_existing_checkpoint(tmp_path, data_dir, tiny_run_file):
    code = main(["eval", "--config", tiny_run_file, "--data", str(data_dir), "--checkpoint", str(tmp_path / "none"),
                 "--out", str(tmp_path / "eval")])
    assert code == EXIT_USAGE


def test_gradcheck_subset(tmp_path):
    assert main(["gradcheck", "--ops", "spag,mo_infog", "--out", str(tmp_path)]) == EXIT_OK
    assert (tmp_path / ECHO_FILE).is_file()
    assert main(["gradcheck", "--ops", "nothing", "--out", str(tmp_path)]) == EXIT_USAGE


def test_train_then_eval_from_echoed_config(tmp_path, data_dir, tiny_run_file):
    run = tmp_path / "run"
    assert main(["train", "--config", tiny_run_file, "--data", str(data_dir), "--out", str(run)]) == EXIT_OK
    assert pd.read_csv(run / "train.csv")["step"].tolist() == [1, 2]
    assert (run / "checkpoint" / ECHO_FILE).is_file()

    scores = tmp_path / "eval"
    assert main(["eval", "--checkpoint", str(run / "checkpoint"), "--data", str(data_dir),
                 "--out", str(scores), "--force-mask", "drivable=0"]) == EXIT_OK
    table = pd.read_csv(scores / "metrics.csv", dtype={"clip_id": str})
    assert table["clip_id"].tolist() == ["0000", "0001", "mean"]
    assert len(list((scores / "maps").glob("*.pgm"))) == 2

    ablation = tmp_path / "ablate"
    assert main(["ablate", "--checkpoint", str(run / "checkpoint"), "--data", str(data_dir),
                 "--out", str(ablation), "--save-maps"]) == EXIT_OK
    assert len(pd.read_csv(ablation / "ablation.csv")) == 8
    assert len(list((ablation / "maps").glob("*.pgm"))) == 8
