"""Run configuration files and process-level settings.

A run config is an INI file with ``[data]``, ``[model]``, ``[train]`` and
``[eval]`` sections. Every key has a default (see :data:`DEFAULTS`); unknown
sections or keys are rejected.
"""

import configparser
import hashlib
import json
import logging
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Dict, Mapping, Optional, Tuple, Union

from remixsep.errors import ConfigError
from remixsep.trainer import STAGE_DEFAULTS, STAGES, TrainConfig

logger = logging.getLogger(__name__)

STAGE_ALIASES = {"al": "adversarial", "adversarial": "adversarial", "rccl": "rccl", "pit": "pit"}


def _int_tuple(text: str) -> Tuple[int, ...]:
    return tuple(int(part) for part in str(text).replace(" ", "").split(",") if part)


def _optional_path(text: str) -> Optional[str]:
    return str(text).strip() or None


# section -> key -> (parser, default)
DEFAULTS: Dict[str, Dict[str, Tuple[Callable[[str], Any], Any]]] = {
    "data": {
        "manifest": (str, "data/manifest.jsonl"),
        "clean_pool": (_optional_path, None),
        "out_dir": (str, "runs"),
        "val_limit": (int, 0),
    },
    "model": {
        "n_fft": (int, 512),
        "hop": (int, 128),
        "hidden": (_int_tuple, (256,)),
        "context": (int, 3),
        "disc_channels": (_int_tuple, (8, 16)),
        "disc_kernel": (_int_tuple, (3, 3)),
        "disc_stride": (_int_tuple, (2, 2)),
        "mvdr_form": (str, "inverse"),
        "loading": (float, 1e-3),
    },
    "train": {
        "seed": (int, 0),
        "learning_rate": (float, 5e-4),
        "generator_form": (str, "non_saturating"),
        "max_steps": (int, 0),
        **{f"epochs_{stage}": (int, STAGE_DEFAULTS[stage]["epochs"]) for stage in STAGES},
        **{f"batch_size_{stage}": (int, STAGE_DEFAULTS[stage]["batch_size"]) for stage in STAGES},
        **{f"{weight}_{stage}": (float, STAGE_DEFAULTS[stage][weight])
           for stage in STAGES for weight in ("lambda_gan", "lambda_cycle", "lambda_energy")},
    },
    "eval": {
        "split": (str, "test"),
        "workers": (int, 1),
    },
}


def get_runtime_config() -> dict:
    """Get process settings from environment variables."""
    try:
        workers = int(os.environ.get("REMIXSEP_WORKERS", "1"))
    except ValueError as e:
        raise ConfigError(f"REMIXSEP_WORKERS must be an integer: {e}") from e
    return {
        "workdir": os.environ.get("REMIXSEP_WORKDIR", "./runs"),
        "log_level": os.environ.get("REMIXSEP_LOG_LEVEL", "INFO").upper(),
        "workers": max(1, workers),
    }


def _jsonable(value: Any) -> Any:
    return list(value) if isinstance(value, tuple) else value


@dataclass
class RunConfig:
    values: Dict[str, Dict[str, Any]] = field(default_factory=dict)
    source: Optional[Path] = None

    def __post_init__(self):
        resolved = {section: {key: default for key, (_, default) in keys.items()}
                    for section, keys in DEFAULTS.items()}
        for section, keys in self.values.items():
            if section not in DEFAULTS:
                raise ConfigError(f"Unknown config section [{section}]")
            for key, raw in keys.items():
                if key not in DEFAULTS[section]:
                    raise ConfigError(f"Unknown config key '{key}' in [{section}]")
                parser = DEFAULTS[section][key][0]
                try:
                    resolved[section][key] = parser(raw) if isinstance(raw, str) else raw
                except ValueError as e:
                    raise ConfigError(f"Bad value for {section}.{key}: {raw!r} ({e})") from e
        self.values = resolved

    @classmethod
    def from_file(cls, path: Union[str, Path]) -> "RunConfig":
        path = Path(path)
        if not path.is_file():
            raise ConfigError(f"Config file not found: {path}")
        parser = configparser.ConfigParser(interpolation=None)
        try:
            parser.read(path)
        except configparser.Error as e:
            raise ConfigError(f"Malformed config {path}: {e}") from e
        values = {section: dict(parser[section]) for section in parser.sections()}
        config = cls(values, source=path)
        config._resolve_paths(path.parent)
        return config

    def _resolve_paths(self, base: Path) -> None:
        data = self.values["data"]
        for key in ("manifest", "clean_pool", "out_dir"):
            if data[key] is not None and not Path(data[key]).is_absolute():
                data[key] = str(base / data[key])

    def get(self, section: str, key: str) -> Any:
        return self.values[section][key]

    def to_dict(self) -> dict:
        return {section: {key: _jsonable(v) for key, v in sorted(keys.items())}
                for section, keys in sorted(self.values.items())}

    def config_hash(self) -> str:
        canonical = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canonical.encode("utf-8")).hexdigest()

    def to_train_config(self, stage: str, **overrides) -> TrainConfig:
        if stage not in STAGE_ALIASES:
            raise ConfigError(f"Unknown stage '{stage}', expected al, rccl or pit")
        stage = STAGE_ALIASES[stage]
        data, model, train = self.values["data"], self.values["model"], self.values["train"]
        kwargs = dict(
            stage=stage,
            manifest=Path(data["manifest"]),
            clean_pool=None if data["clean_pool"] is None else Path(data["clean_pool"]),
            out_dir=Path(data["out_dir"]),
            val_limit=data["val_limit"],
            epochs=train[f"epochs_{stage}"],
            batch_size=train[f"batch_size_{stage}"],
            learning_rate=train["learning_rate"],
            lambda_gan=train[f"lambda_gan_{stage}"],
            lambda_cycle=train[f"lambda_cycle_{stage}"],
            lambda_energy=train[f"lambda_energy_{stage}"],
            generator_form=train["generator_form"],
            seed=train["seed"],
            max_steps=train["max_steps"],
            mvdr_form=model["mvdr_form"],
            loading=model["loading"],
            n_fft=model["n_fft"],
            hop=model["hop"],
            hidden=model["hidden"],
            context=model["context"],
            disc_channels=model["disc_channels"],
            disc_kernel=model["disc_kernel"],
            disc_stride=model["disc_stride"],
            config_hash=self.config_hash(),
        )
        kwargs.update(overrides)
        return TrainConfig(**kwargs)

    def stage_configs(self, **overrides) -> Dict[str, TrainConfig]:
        return {stage: self.to_train_config(stage, **overrides) for stage in STAGES}

    def write(self, path: Union[str, Path]) -> Path:
        parser = configparser.ConfigParser(interpolation=None)
        for section, keys in self.to_dict().items():
            parser[section] = {key: _format_value(value) for key, value in keys.items()}
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with path.open("w") as fh:
            parser.write(fh)
        return path


def _format_value(value: Any) -> str:
    if value is None:
        return ""
    if isinstance(value, list):
        return ",".join(str(v) for v in value)
    return str(value)


def defaults_document() -> Mapping[str, Mapping[str, Any]]:
    """Every config key with its default, as plain JSON-able values."""
    return RunConfig().to_dict()
