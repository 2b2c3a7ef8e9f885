import json

from remixsep.config import RunConfig

from server import (
    describe_manifest,
    evaluate,
    experiment_navigator,
    generate_dataset,
    get_config_defaults,
    get_runtime_settings,
    seed_sweep,
    train_stage,
)


def _payload(result):
    assert not result.isError, f"Tool returned error: {result.content[0].text if result.content else 'No content'}"
    return json.loads(result.content[0].text)


def test_generate_dataset(mock_env, tmp_path):
    """Test that generate_dataset renders under REMIXSEP_WORKDIR."""
    response_data = _payload(generate_dataset(n_train=2, n_val=1, n_test=1, seed=3,
                                              out_dir="data", duration=0.1))

    assert response_data["type"] == "dataset"
    assert response_data["manifest"] == str(tmp_path / "data" / "manifest.jsonl")
    assert response_data["counts"] == {"train": 2, "val": 1, "test": 1, "clean": 2}
    print(f"✓ Rendered dataset at {response_data['manifest']}")


def test_describe_manifest(mock_env, tiny_dataset):
    """Test per-split counts, direction usage and the observation baseline."""
    response_data = _payload(describe_manifest(str(tiny_dataset.manifest_path), with_observation=True))

    assert response_data["type"] == "manifest_summary"
    assert response_data["total_mixtures"] == 8
    assert response_data["counts"] == {"train": 4, "val": 2, "test": 2}
    assert response_data["clean_pool_size"] == 4
    assert sum(response_data["direction_usage"].values()) == 16
    assert response_data["observation"]["n_rows"] == 4
    print(f"✓ Manifest has {response_data['total_mixtures']} mixtures")


def test_describe_manifest_split_filter(mock_env, tiny_dataset):
    response_data = _payload(describe_manifest(str(tiny_dataset.manifest_path), split="val"))
    assert response_data["counts"] == {"val": 2}


def test_describe_missing_manifest(mock_env):
    result = describe_manifest("nowhere/manifest.jsonl")
    assert result.isError
    assert "nowhere" in result.content[0].text


def test_evaluate_oracle(mock_env, tiny_dataset, tmp_path):
    """Test that evaluate scores oracle masks and writes the CSV."""
    response_data = _payload(evaluate(str(tiny_dataset.manifest_path), oracle=True, out_csv="oracle.csv"))

    assert response_data["type"] == "metric_report"
    assert response_data["oracle"] is True
    assert response_data["n_rows"] == 4
    assert response_data["undefined"] == []
    assert (tmp_path / "oracle.csv").is_file()
    print(f"✓ Oracle mean SIR {response_data['mean_sir_db']:.1f} dB")


def test_evaluate_requires_a_checkpoint(mock_env, tiny_dataset):
    result = evaluate(str(tiny_dataset.manifest_path))
    assert result.isError


def test_train_stage_then_evaluate(mock_env, tiny_config):
    """Test a PIT run followed by scoring its checkpoint."""
    trained = _payload(train_stage("pit", str(tiny_config)))

    assert trained["type"] == "training_result"
    assert trained["stage"] == "pit"
    assert trained["epochs_run"] == 1
    assert len(trained["config_hash"]) == 64

    manifest = RunConfig.from_file(tiny_config).get("data", "manifest")
    scored = _payload(evaluate(manifest, checkpoint=trained["checkpoint"]))
    assert scored["n_rows"] == 4
    print(f"✓ Trained {trained['checkpoint']} and scored {scored['n_rows']} sources")


def test_train_stage_rejects_unknown_stage(mock_env, tiny_config):
    result = train_stage("warmup", str(tiny_config))
    assert result.isError


def test_seed_sweep_needs_two_seeds(mock_env, tiny_config):
    result = seed_sweep(str(tiny_config), seeds="1")
    assert result.isError
    assert "2 distinct seeds" in result.content[0].text


def test_resources(mock_env, tmp_path):
    defaults = json.loads(get_config_defaults())
    runtime = json.loads(get_runtime_settings())

    assert set(defaults) == {"data", "model", "train", "eval"}
    assert runtime["workdir"] == str(tmp_path)


def test_prompt_mentions_every_tool():
    messages = experiment_navigator("compare AL and AL+RCCL")
    text = " ".join(str(m.content) for m in messages)
    for tool in ("generate_dataset", "describe_manifest", "train_stage", "evaluate", "seed_sweep"):
        assert tool in text
