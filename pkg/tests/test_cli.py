import json

import numpy as np
import pytest

import remixsep.cli as cli_module
import remixsep.trainer as trainer_module
from remixsep.array_sim import load_manifest
from remixsep.cli import EXIT_DIVERGED, EXIT_OK, EXIT_RUNTIME, EXIT_USAGE, main
from remixsep.objectives import pit_loss


def test_help_lists_the_subcommands(capsys):
    with pytest.raises(SystemExit) as excinfo:
        main(["--help"])

    assert excinfo.value.code == 0
    out = capsys.readouterr().out
    for command in ("gen-data", "train", "eval", "sweep"):
        assert command in out


@pytest.mark.parametrize("argv", [
    [],
    ["train", "--stage", "al"],
    ["train", "--stage", "warmup", "--config", "run.cfg"],
    ["sweep", "--seeds", "1,x", "--config", "run.cfg"],
    ["sweep", "--seeds", "1,2", "--methods", "al,dpcl", "--config", "run.cfg"],
])
def test_usage_errors_exit_with_one(argv):
    with pytest.raises(SystemExit) as excinfo:
        main(argv)
    assert excinfo.value.code == EXIT_USAGE


def test_gen_data_writes_the_manifest(tmp_path, capsys):
    out_dir = tmp_path / "data"
    code = main(["gen-data", "--n-train", "8", "--n-val", "2", "--n-test", "2",
                 "--seed", "7", "--out", str(out_dir), "--duration", "0.1"])

    assert code == EXIT_OK
    assert len(load_manifest(out_dir / "manifest.jsonl")) == 12
    printed = json.loads(capsys.readouterr().out)
    assert printed["counts"] == {"train": 8, "val": 2, "test": 2, "clean": 8}
    print("✓ gen-data wrote 12 mixtures")


def test_oracle_eval(tiny_dataset, tmp_path, capsys):
    out_csv = tmp_path / "oracle.csv"
    code = main(["eval", "--oracle", "--manifest", str(tiny_dataset.manifest_path), "--out", str(out_csv)])

    assert code == EXIT_OK
    assert out_csv.is_file()
    assert json.loads(capsys.readouterr().out)["n_rows"] == 4


def test_eval_without_checkpoint_is_a_usage_error(tiny_dataset):
    assert main(["eval", "--manifest", str(tiny_dataset.manifest_path)]) == EXIT_USAGE


def test_eval_on_missing_manifest_is_a_runtime_error(tmp_path):
    assert main(["eval", "--oracle", "--manifest", str(tmp_path / "none.jsonl")]) == EXIT_RUNTIME


@pytest.mark.parametrize("line", [
    '{"id": "test-00000", "split": "test"}',
    '{"id": "test-00000", "split": ',
])
def test_eval_on_malformed_manifest_is_a_runtime_error(tmp_path, line):
    manifest = tmp_path / "manifest.jsonl"
    manifest.write_text(line + "\n")

    assert main(["eval", "--oracle", "--manifest", str(manifest), "--out", str(tmp_path / "m.csv")]) == EXIT_RUNTIME
    print("✓ malformed manifest exits with the runtime code")


def test_unexpected_failure_is_a_runtime_error(tiny_dataset, tmp_path, monkeypatch):
    def singular(*args, **kwargs):
        raise np.linalg.LinAlgError("Singular matrix")

    monkeypatch.setattr(cli_module, "evaluate_checkpoint", singular)
    code = main(["eval", "--oracle", "--manifest", str(tiny_dataset.manifest_path),
                 "--out", str(tmp_path / "m.csv")])
    assert code == EXIT_RUNTIME


def test_train_with_missing_config(tmp_path):
    assert main(["train", "--stage", "pit", "--config", str(tmp_path / "none.cfg")]) == EXIT_USAGE


def test_train_pit_prints_the_result(tiny_config, capsys):
    code = main(["train", "--stage", "pit", "--config", str(tiny_config), "--seed", "5"])

    assert code == EXIT_OK
    printed = json.loads(capsys.readouterr().out)
    assert printed["stage"] == "pit"
    assert printed["checkpoint"].endswith("best.ckpt")
    assert len(printed["param_hash"]) == 64


def test_divergence_exits_with_three(tiny_config, monkeypatch):
    monkeypatch.setattr(trainer_module, "pit_loss", lambda sep, truths: pit_loss(sep, truths) * float("nan"))

    assert main(["train", "--stage", "pit", "--config", str(tiny_config)]) == EXIT_DIVERGED


def test_sweep_with_one_seed_is_a_usage_error(tiny_config):
    assert main(["sweep", "--seeds", "4", "--config", str(tiny_config)]) == EXIT_USAGE
