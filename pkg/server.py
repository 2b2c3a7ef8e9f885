from typing import Optional
import os
import json
import math
import logging
from pathlib import Path
from mcp.server.fastmcp import FastMCP
from mcp.server.fastmcp.prompts import base
from mcp.types import CallToolResult, TextContent

from remixsep.array_sim import generate_dataset as render_dataset, load_clean_pool, load_manifest, CLEAN_POOL_NAME
from remixsep.config import RunConfig, defaults_document, get_runtime_config
from remixsep.errors import DivergenceError
from remixsep.metrics import evaluate_checkpoint, observation_report
from remixsep.trainer import SWEEP_METHODS, seed_sweep as run_seed_sweep, train_stage as run_train_stage

# Set up logging
logging.basicConfig(level=getattr(logging, get_runtime_config()['log_level'], logging.INFO))
logger = logging.getLogger(__name__)

# Create an MCP server
mcp = FastMCP("RemixSep")


def _resolve(path: str) -> Path:
    """Resolve a relative path against REMIXSEP_WORKDIR."""
    p = Path(path)
    if p.is_absolute():
        return p
    return Path(get_runtime_config()['workdir']) / p


def _finite(value):
    """Replace NaN/inf floats (not valid JSON) with None, recursively."""
    if isinstance(value, dict):
        return {k: _finite(v) for k, v in value.items()}
    elif isinstance(value, list):
        return [_finite(v) for v in value]
    elif isinstance(value, float) and not math.isfinite(value):
        return None
    return value


def _ok(response_data: dict) -> CallToolResult:
    return CallToolResult(
        content=[
            TextContent(
                type="text",
                text=json.dumps(_finite(response_data), indent=2)
            )
        ]
    )


def _error(error_message: str) -> CallToolResult:
    logger.error(error_message)
    return CallToolResult(
        isError=True,
        content=[
            TextContent(
                type="text",
                text=error_message
            )
        ]
    )


@mcp.prompt(title="Experiment Navigator")
def experiment_navigator(goal: str) -> list[base.Message]:
    return [
        base.UserMessage("Separation experiment:"),
        base.UserMessage(goal),
        base.AssistantMessage(
            (
                "Use the available MCP tools to run the experiment step by step.\n"
                "- generate_dataset(n_train, n_val, n_test, seed, out_dir): render simulated mixtures.\n"
                "- describe_manifest(manifest): inspect a dataset before training.\n"
                "- train_stage(stage, config, init): stage 'al' first, then 'rccl' with init set to the "
                "stage-1 checkpoint; 'pit' trains the supervised baseline.\n"
                "- evaluate(manifest, checkpoint, oracle): SDR/SIR on the test split; oracle=true gives "
                "the ideal-mask ceiling.\n"
                "- seed_sweep(config, seeds, methods): stability across seeds.\n"
                "Resource: config://defaults lists every config key and its default.\n"
                "State which tool you'll call next and why; keep outputs concise."
            )
        ),
    ]

@mcp.tool()
def generate_dataset(n_train: int, n_val: int, n_test: int, seed: int = 0,
                     out_dir: str = "data", duration: float = 3.0) -> CallToolResult:
    """Render a simulated 4-microphone, 2-source dataset plus an unpaired clean pool.

    Args:
        n_train: Number of training mixtures
        n_val: Number of validation mixtures
        n_test: Number of test mixtures
        seed: Dataset seed (default: 0)
        out_dir: Output directory, relative to REMIXSEP_WORKDIR unless absolute
        duration: Seconds per utterance (default: 3.0)

    Returns:
        JSON with the manifest path and per-split counts
    """
    try:
        target = _resolve(out_dir)
        logger.info(f"Generating dataset in {target} with seed {seed}")
        summary = render_dataset(n_train, n_val, n_test, seed, target, duration=duration)
        response_data = {
            "type": "dataset",
            "manifest": str(summary.manifest_path),
            "clean_pool": str(summary.clean_pool_path),
            "counts": summary.counts,
            "seed": seed
        }
        return _ok(response_data)

    except Exception as e:
        return _error(f"Error generating dataset: {str(e)}")

@mcp.tool()
def describe_manifest(manifest: str, split: Optional[str] = None,
                      with_observation: bool = False) -> CallToolResult:
    """Summarise a dataset manifest.

    Args:
        manifest: Path to manifest.jsonl
        split: Restrict to one split (train, val or test)
        with_observation: Also score the unprocessed mixtures on the test split

    Returns:
        JSON with per-split counts, direction usage and optionally the observation baseline
    """
    try:
        path = _resolve(manifest)
        entries = load_manifest(path, split)
        counts = {}
        directions = {}
        for entry in entries:
            counts[entry.split] = counts.get(entry.split, 0) + 1
            for d in entry.directions:
                directions[str(d)] = directions.get(str(d), 0) + 1
        clean_path = path.parent / CLEAN_POOL_NAME
        response_data = {
            "type": "manifest_summary",
            "manifest": str(path),
            "total_mixtures": len(entries),
            "counts": counts,
            "direction_usage": dict(sorted(directions.items(), key=lambda kv: int(kv[0]))),
            "clean_pool_size": len(load_clean_pool(clean_path)) if clean_path.is_file() else 0
        }
        if with_observation:
            report = observation_report(path)
            response_data["observation"] = report.aggregates()
        return _ok(response_data)

    except Exception as e:
        return _error(f"Error describing manifest '{manifest}': {str(e)}")

@mcp.tool()
def train_stage(stage: str, config: str, init: Optional[str] = None,
                resume: Optional[str] = None, seed: Optional[int] = None) -> CallToolResult:
    """Run one training stage from a run config file.

    Args:
        stage: 'al' (adversarial), 'rccl' (remix-cycle fine-tuning) or 'pit' (supervised baseline)
        config: Path to the INI run config
        init: Stage-1 checkpoint to fine-tune from (rccl only)
        resume: Checkpoint of the same stage to continue from
        seed: Override the config seed

    Returns:
        JSON with checkpoint paths, run log and parameter hash
    """
    try:
        run_config = RunConfig.from_file(_resolve(config))
        overrides = {} if seed is None else {"seed": seed}
        cfg = run_config.to_train_config(stage, **overrides)
        logger.info(f"Training stage {cfg.stage} with seed {cfg.seed}")
        if cfg.stage == "rccl" and init is None:
            logger.warning("No init checkpoint given for rccl")
        result = run_train_stage(cfg, init=_resolve(init) if init else None,
                                 resume=_resolve(resume) if resume else None)
        response_data = {
            "type": "training_result",
            "stage": result.stage,
            "checkpoint": str(result.checkpoint),
            "last_checkpoint": str(result.last_checkpoint),
            "run_log": str(result.run_log),
            "best_val_sdr": result.best_val_sdr,
            "epochs_run": result.epochs_run,
            "param_hash": result.param_hash,
            "config_hash": cfg.config_hash
        }
        return _ok(response_data)

    except DivergenceError as e:
        return _error(f"Training diverged: {str(e)} (last good checkpoint: {e.last_checkpoint})")
    except Exception as e:
        return _error(f"Error training stage '{stage}': {str(e)}")

@mcp.tool()
def evaluate(manifest: str, checkpoint: Optional[str] = None, oracle: bool = False,
             split: str = "test", out_csv: str = "metrics.csv",
             mvdr_form: Optional[str] = None) -> CallToolResult:
    """Score a checkpoint (or oracle masks) with SDR/SIR on a manifest split.

    Args:
        manifest: Path to manifest.jsonl
        checkpoint: Training checkpoint; ignored when oracle is true
        oracle: Use ideal ratio masks instead of a trained estimator
        split: Manifest split to evaluate (default: test)
        out_csv: Per-source metric CSV, relative to REMIXSEP_WORKDIR unless absolute
        mvdr_form: 'inverse' or 'literal' to override the checkpoint setting

    Returns:
        JSON with aggregates and the CSV path
    """
    try:
        csv_path = _resolve(out_csv)
        report = evaluate_checkpoint(
            _resolve(checkpoint) if checkpoint else None, _resolve(manifest),
            split=split, out_csv=csv_path, oracle=oracle, mvdr_form=mvdr_form,
            workers=get_runtime_config()['workers']
        )
        response_data = {
            "type": "metric_report",
            "csv": str(csv_path),
            "oracle": oracle,
            **report.aggregates(),
            "undefined": [f"{r.mixture_id}/{r.source_idx}" for r in report.undefined]
        }
        return _ok(response_data)

    except Exception as e:
        return _error(f"Error evaluating: {str(e)}")

@mcp.tool()
def seed_sweep(config: str, seeds: str, methods: str = ",".join(SWEEP_METHODS),
               out_dir: Optional[str] = None) -> CallToolResult:
    """Train and evaluate each method for several seeds and summarise stability.

    Args:
        config: Path to the INI run config
        seeds: Comma-separated seeds, at least two (e.g. "1,2,3")
        methods: Comma-separated subset of al, al+rccl, pit
        out_dir: Report directory (default: <out_dir>/sweep from the config)

    Returns:
        JSON with per-method five-number summaries and flagged failures
    """
    try:
        run_config = RunConfig.from_file(_resolve(config))
        seed_list = [int(s) for s in seeds.split(",") if s.strip()]
        method_list = [m.strip() for m in methods.split(",") if m.strip()]
        report = run_seed_sweep(run_config.stage_configs(), seed_list, methods=method_list,
                                out_dir=_resolve(out_dir) if out_dir else None,
                                workers=get_runtime_config()['workers'],
                                eval_split=run_config.get("eval", "split"))
        response_data = {
            "type": "stability_report",
            "stability_csv": str(report.stability_csv),
            "summary_csv": str(report.summary_csv),
            "sdr": report.summary("sdr"),
            "sir": report.summary("sir"),
            "runs": [
                {"method": r.method, "seed": r.seed, "sdr": r.sdr, "sir": r.sir,
                 "param_hash": r.param_hash, "error": r.error or None}
                for r in report.rows
            ]
        }
        return _ok(response_data)

    except Exception as e:
        return _error(f"Error running seed sweep: {str(e)}")

@mcp.resource("config://defaults")
def get_config_defaults() -> str:
    """Return every run-config key with its default as JSON."""
    return json.dumps(defaults_document(), indent=2)

@mcp.resource("config://runtime")
def get_runtime_settings() -> str:
    """Return the REMIXSEP_* environment settings in effect as JSON."""
    return json.dumps({**get_runtime_config(), "cwd": os.getcwd()}, indent=2)

if __name__ == "__main__":
    mcp.run()
