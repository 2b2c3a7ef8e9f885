"""Two-stage training: adversarial learning, remix-cycle fine-tuning, and the PIT baseline.

Every stage writes ``last.ckpt`` each epoch, ``best.ckpt`` whenever the
validation SDR improves, and a JSON-lines run log. Randomness for an epoch
comes from ``(seed, stage, epoch)`` only, so a resumed run follows the same
trajectory as an uninterrupted one.
"""

import csv
import json
import logging
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable, Dict, Iterable, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np

from remixsep import autodiff as ad
from remixsep.array_sim import CLEAN_POOL_NAME, load_clean_pool, load_manifest, load_record
from remixsep.autodiff import DiffTensor
from remixsep.errors import CheckpointError, ConfigError, DataError, DivergenceError, RemixSepError
from remixsep.metrics import MetricReport, evaluate_checkpoint, five_number_summary, score_record
from remixsep.nn import (
    Adam,
    Discriminator,
    MaskEstimator,
    load_checkpoint,
    parameter_hash,
    prefixed,
    save_checkpoint,
    unprefixed,
)
from remixsep.objectives import GENERATOR_FORMS, cycle_loss, energy_loss, gan_losses, pit_loss, remix_cycle
from remixsep.seeding import derive_seed, rng_for
from remixsep.separator import MVDR_FORMS, separate_tensor
from remixsep.signal_core import read_wav, stft

logger = logging.getLogger(__name__)

STAGES = ("adversarial", "rccl", "pit")
SWEEP_METHODS = ("al", "al+rccl", "pit")
STAGE_DEFAULTS = {
    "adversarial": {"epochs": 30, "batch_size": 32, "lambda_gan": 1.0, "lambda_cycle": 0.0, "lambda_energy": 0.0},
    "rccl": {"epochs": 15, "batch_size": 16, "lambda_gan": 0.0, "lambda_cycle": 1.0, "lambda_energy": 0.0},
    "pit": {"epochs": 30, "batch_size": 32, "lambda_gan": 0.0, "lambda_cycle": 0.0, "lambda_energy": 0.0},
}
RUN_LOG_NAME = "runlog.jsonl"
TIMING_NAME = "timing.jsonl"
BEST_NAME = "best.ckpt"
LAST_NAME = "last.ckpt"
METHOD_STAGES = {"al": ("adversarial",), "al+rccl": ("adversarial", "rccl"), "pit": ("pit",)}
STABILITY_COLUMNS = ("method", "seed", "sdr", "sir", "config_hash")
SUMMARY_COLUMNS = ("method", "min", "q1", "median", "q3", "max", "config_hash")


@dataclass(frozen=True)
class TrainConfig:
    stage: str
    manifest: Path
    out_dir: Path = Path("runs")
    clean_pool: Optional[Path] = None
    epochs: int = 30
    batch_size: int = 32
    learning_rate: float = 5e-4
    lambda_gan: float = 1.0
    lambda_cycle: float = 0.0
    lambda_energy: float = 0.0
    generator_form: str = "non_saturating"
    seed: int = 0
    mvdr_form: str = "inverse"
    loading: float = 1e-3
    n_fft: int = 512
    hop: int = 128
    hidden: Tuple[int, ...] = (256,)
    context: int = 3
    disc_channels: Tuple[int, ...] = (8, 16)
    disc_kernel: Tuple[int, int] = (3, 3)
    disc_stride: Tuple[int, int] = (2, 2)
    val_limit: int = 0
    max_steps: int = 0
    config_hash: str = ""

    def __post_init__(self):
        if self.stage not in STAGES:
            raise ConfigError(f"Unknown stage '{self.stage}', expected one of {STAGES}")
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigError("epochs and batch_size must be positive")
        if self.learning_rate <= 0:
            raise ConfigError(f"learning_rate must be > 0, got {self.learning_rate}")
        for name in ("lambda_gan", "lambda_cycle", "lambda_energy"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be >= 0, got {getattr(self, name)}")
        if self.mvdr_form not in MVDR_FORMS:
            raise ConfigError(f"Unknown mvdr_form '{self.mvdr_form}'")
        if self.generator_form not in GENERATOR_FORMS:
            raise ConfigError(f"Unknown generator_form '{self.generator_form}', expected one of {GENERATOR_FORMS}")
        object.__setattr__(self, "manifest", Path(self.manifest))
        object.__setattr__(self, "out_dir", Path(self.out_dir))
        if self.clean_pool is not None:
            object.__setattr__(self, "clean_pool", Path(self.clean_pool))

    @classmethod
    def for_stage(cls, stage: str, manifest: Union[str, Path], **overrides) -> "TrainConfig":
        """Config with the stage's default epochs, batch size and loss weights."""
        if stage not in STAGE_DEFAULTS:
            raise ConfigError(f"Unknown stage '{stage}', expected one of {STAGES}")
        return cls(stage=stage, manifest=Path(manifest), **{**STAGE_DEFAULTS[stage], **overrides})

    @property
    def stage_dir(self) -> Path:
        return self.out_dir / self.stage

    @property
    def clean_pool_path(self) -> Path:
        return self.clean_pool or self.manifest.parent / CLEAN_POOL_NAME

    def to_dict(self) -> dict:
        out = asdict(self)
        for key in ("manifest", "out_dir", "clean_pool"):
            out[key] = None if out[key] is None else str(out[key])
        return out


@dataclass
class TrainResult:
    stage: str
    best_checkpoint: Optional[Path]
    last_checkpoint: Path
    run_log: Path
    best_val_sdr: float
    epochs_run: int
    param_hash: str

    @property
    def checkpoint(self) -> Path:
        return self.best_checkpoint or self.last_checkpoint


class RunLog:
    """Append-only JSON-lines log of step losses and per-epoch validation scores.

    Wall-clock times go to a sidecar file so the log itself is reproducible.
    """

    def __init__(self, path: Union[str, Path], seed: int, config_hash: str, stage: str,
                 resume_at: Optional[Tuple[int, int]] = None):
        self.path = Path(path)
        self.timing_path = self.path.with_name(TIMING_NAME)
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self.last_step = -1
        if resume_at is not None and self.path.is_file():
            self._truncate(*resume_at)
        else:
            self.path.write_text("")
            self.timing_path.write_text("")
            self._append({"type": "header", "seed": seed, "config_hash": config_hash, "stage": stage})

    def _truncate(self, step: int, epoch: int) -> None:
        """Drop records written after the checkpoint being resumed from."""
        kept = [r for r in self.records()
                if r.get("step", -1) <= step and r.get("epoch", -1) <= epoch]
        self.path.write_text("".join(json.dumps(r, sort_keys=True) + "\n" for r in kept))
        self.last_step = step

    def _append(self, record: dict) -> None:
        with self.path.open("a") as fh:
            fh.write(json.dumps(record, sort_keys=True) + "\n")

    def step(self, step: int, stage: str, losses: Mapping[str, float]) -> None:
        if step <= self.last_step:
            raise RemixSepError(f"Run log steps must increase: {step} after {self.last_step}")
        losses = {k: float(v) for k, v in losses.items()}
        bad = sorted(k for k, v in losses.items() if not math.isfinite(v))
        if bad:
            raise DivergenceError(f"Non-finite loss at step {step}: {', '.join(bad)}")
        self.last_step = step
        self._append({"step": step, "stage": stage, "losses": losses})

    def epoch(self, epoch: int, val_sdr: float, val_sir: float, elapsed: float) -> None:
        if not (math.isfinite(val_sdr) and math.isfinite(val_sir)):
            raise DivergenceError(f"Non-finite validation score after epoch {epoch}")
        self._append({"epoch": epoch, "val_sdr": round(val_sdr, 9), "val_sir": round(val_sir, 9)})
        with self.timing_path.open("a") as fh:
            fh.write(json.dumps({"epoch": epoch, "elapsed": elapsed}) + "\n")

    def records(self) -> List[dict]:
        with self.path.open() as fh:
            return [json.loads(line) for line in fh if line.strip()]


@dataclass
class _Data:
    train: list
    train_specs: List[DiffTensor]
    train_images: List[DiffTensor]
    val_records: list
    clean: List[np.ndarray] = field(default_factory=list)


def _load_data(cfg: TrainConfig, need_clean: bool = False, need_images: bool = False) -> _Data:
    if not cfg.manifest.is_file():
        raise DataError(f"Manifest not found: {cfg.manifest}")
    train = load_manifest(cfg.manifest, "train")
    if not train:
        raise DataError(f"No training mixtures in {cfg.manifest}")
    val = load_manifest(cfg.manifest, "val")
    if cfg.val_limit > 0:
        val = val[:cfg.val_limit]
    records = [load_record(e) for e in train]
    specs = [DiffTensor(stft(r.mixture, cfg.n_fft, cfg.hop).bins) for r in records]
    images = []
    if need_images:
        for r in records:
            if not r.ground_truth_images:
                raise DataError(f"Mixture {r.record_id} has no ground-truth images")
            images.append(DiffTensor(np.stack([stft(img, cfg.n_fft, cfg.hop).bins
                                               for img in r.ground_truth_images])))
    data = _Data(train=train, train_specs=specs, train_images=images,
                 val_records=[load_record(e) for e in val])
    if need_clean:
        pool = load_clean_pool(cfg.clean_pool_path)
        if not pool:
            raise DataError(f"Clean pool {cfg.clean_pool_path} is empty")
        data.clean = [stft(read_wav(c.path), cfg.n_fft, cfg.hop).bins[0] for c in pool]
    logger.info(f"Loaded {len(train)} training and {len(val)} validation mixtures")
    return data


def build_models(cfg: TrainConfig) -> Tuple[MaskEstimator, Discriminator]:
    estimator = MaskEstimator(n_freq=cfg.n_fft // 2 + 1, n_sources=2, hidden=cfg.hidden,
                              context=cfg.context, seed=derive_seed(cfg.seed, "estimator"))
    discriminator = Discriminator(channels=cfg.disc_channels, kernel=cfg.disc_kernel,
                                  stride=cfg.disc_stride, seed=derive_seed(cfg.seed, "discriminator"))
    return estimator, discriminator


def _architecture(spec: Optional[Mapping]) -> Optional[dict]:
    return None if spec is None else {k: v for k, v in spec.items() if k != "seed"}


class _Trainer:
    """Shared state and bookkeeping of one training stage."""

    def __init__(self, cfg: TrainConfig, init: Optional[Union[str, Path]] = None,
                 resume: Optional[Union[str, Path]] = None, need_clean: bool = False,
                 need_images: bool = False):
        self.cfg = cfg
        self.data = _load_data(cfg, need_clean=need_clean, need_images=need_images)
        self.estimator, self.discriminator = build_models(cfg)
        self.adam_estimator = Adam(self.estimator.parameters(), cfg.learning_rate)
        self.adam_discriminator = Adam(self.discriminator.parameters(), cfg.learning_rate)
        self.start_epoch = 1
        self.step = 0
        self.best_val_sdr = -math.inf
        self.stage_dir = cfg.stage_dir
        self.stage_dir.mkdir(parents=True, exist_ok=True)
        if init is not None:
            self._load_models(init)
        resume_at = self._resume(resume) if resume is not None else None
        self.log = RunLog(self.stage_dir / RUN_LOG_NAME, cfg.seed, cfg.config_hash, cfg.stage,
                          resume_at=resume_at)

    def separate(self, x: DiffTensor) -> DiffTensor:
        return separate_tensor(x, self.estimator, self.cfg.loading, self.cfg.mvdr_form)

    def _load_models(self, path: Union[str, Path]) -> Tuple[dict, dict]:
        arrays, meta = load_checkpoint(path)
        if _architecture(meta.get("estimator")) != _architecture(self.estimator.spec()):
            raise CheckpointError(f"Checkpoint {path} estimator {meta.get('estimator')} "
                                  f"does not match config {self.estimator.spec()}")
        self.estimator.load_state_dict(unprefixed(arrays, "estimator"))
        self.discriminator.load_state_dict(unprefixed(arrays, "discriminator"))
        logger.info(f"Initialised {self.cfg.stage} models from {path}")
        return arrays, meta

    def _resume(self, path: Union[str, Path]) -> Tuple[int, int]:
        arrays, meta = self._load_models(path)
        if meta.get("stage") != self.cfg.stage:
            raise CheckpointError(f"Cannot resume {self.cfg.stage} from a {meta.get('stage')} checkpoint")
        self.adam_estimator.load_state_dict(unprefixed(arrays, "adam_estimator"))
        self.adam_discriminator.load_state_dict(unprefixed(arrays, "adam_discriminator"))
        self.start_epoch = int(meta["epoch"]) + 1
        self.step = int(meta["step"])
        best = meta.get("best_val_sdr")
        self.best_val_sdr = -math.inf if best is None else float(best)
        logger.info(f"Resuming {self.cfg.stage} after epoch {meta['epoch']} (step {self.step})")
        return self.step, self.start_epoch - 1

    def save(self, name: str, epoch: int) -> Path:
        arrays = {
            **prefixed(self.estimator.state_dict(), "estimator"),
            **prefixed(self.discriminator.state_dict(), "discriminator"),
            **prefixed(self.adam_estimator.state_dict(), "adam_estimator"),
            **prefixed(self.adam_discriminator.state_dict(), "adam_discriminator"),
        }
        meta = {
            "stage": self.cfg.stage,
            "epoch": epoch,
            "step": self.step,
            "seed": self.cfg.seed,
            "config_hash": self.cfg.config_hash,
            "estimator": self.estimator.spec(),
            "discriminator": self.discriminator.spec(),
            "n_fft": self.cfg.n_fft,
            "hop": self.cfg.hop,
            "mvdr_form": self.cfg.mvdr_form,
            "loading": self.cfg.loading,
            "best_val_sdr": None if math.isinf(self.best_val_sdr) else self.best_val_sdr,
        }
        return save_checkpoint(self.stage_dir / name, arrays, meta)

    @property
    def last_good(self) -> Optional[str]:
        for name in (BEST_NAME, LAST_NAME):
            if (self.stage_dir / name).is_file():
                return str(self.stage_dir / name)
        return None

    def record_step(self, losses: Mapping[str, float]) -> None:
        self.step += 1
        try:
            self.log.step(self.step, self.cfg.stage, losses)
        except DivergenceError as e:
            logger.error(f"{self.cfg.stage} diverged at step {self.step}; keeping {self.last_good}")
            raise DivergenceError(str(e), last_checkpoint=self.last_good) from e

    def step_limit_reached(self) -> bool:
        return 0 < self.cfg.max_steps <= self.step

    def validate(self) -> MetricReport:
        report = MetricReport()
        for record in self.data.val_records:
            report.extend(score_record(record, self.estimator, self.cfg.n_fft, self.cfg.hop,
                                       self.cfg.loading, self.cfg.mvdr_form))
        return report

    def batches(self, epoch: int, n_items: int) -> Iterable[np.ndarray]:
        order = rng_for(self.cfg.seed, self.cfg.stage, epoch, "order").permutation(n_items)
        for start in range(0, n_items, self.cfg.batch_size):
            yield order[start:start + self.cfg.batch_size]

    def run(self, epoch_fn: Callable[[int], None]) -> TrainResult:
        cfg = self.cfg
        epoch = self.start_epoch - 1
        for epoch in range(self.start_epoch, cfg.epochs + 1):
            started = time.monotonic()
            logger.info(f"Training {cfg.stage} epoch {epoch}/{cfg.epochs}")
            epoch_fn(epoch)
            if self.data.val_records:
                report = self.validate()
                val_sdr, val_sir = report.mean_sdr, report.mean_sir
            else:
                val_sdr = val_sir = 0.0
            try:
                self.log.epoch(epoch, val_sdr, val_sir, time.monotonic() - started)
            except DivergenceError as e:
                raise DivergenceError(str(e), last_checkpoint=self.last_good) from e
            if val_sdr > self.best_val_sdr:
                self.best_val_sdr = val_sdr
                self.save(BEST_NAME, epoch)
                logger.info(f"New best validation SDR {val_sdr:.2f} dB at epoch {epoch}")
            self.save(LAST_NAME, epoch)
            if self.step_limit_reached():
                logger.info(f"Reached max_steps={cfg.max_steps}")
                break
        best = self.stage_dir / BEST_NAME
        return TrainResult(
            stage=cfg.stage,
            best_checkpoint=best if best.is_file() else None,
            last_checkpoint=self.stage_dir / LAST_NAME,
            run_log=self.log.path,
            best_val_sdr=self.best_val_sdr,
            epochs_run=epoch,
            param_hash=parameter_hash(self.estimator.state_dict()),
        )


def _accumulate(total: Optional[Dict[str, np.ndarray]], grads: Dict[str, np.ndarray]) -> Dict[str, np.ndarray]:
    if total is None:
        return grads
    return {name: total[name] + g for name, g in grads.items()}


def _generator_terms(trainer: _Trainer, separated: Sequence[DiffTensor]) -> Dict[str, DiffTensor]:
    """Weighted adversarial and energy terms shared by the generator and RCCL updates."""
    cfg = trainer.cfg
    terms = {}
    if cfg.lambda_gan > 0:
        fakes = [trainer.discriminator(sep[k, 0]) for sep in separated for k in range(sep.shape[0])]
        _, g_loss = gan_losses([0.5], fakes, cfg.generator_form)
        terms["gan"] = cfg.lambda_gan * g_loss
    if cfg.lambda_energy > 0:
        terms["energy"] = cfg.lambda_energy * energy_loss(*separated)
    return terms


def _adversarial_epoch(trainer: _Trainer, epoch: int) -> None:
    cfg, data = trainer.cfg, trainer.data
    rng = rng_for(cfg.seed, cfg.stage, epoch, "clean")
    d_params = trainer.discriminator.parameters()
    g_params = trainer.estimator.parameters()
    for batch in trainer.batches(epoch, len(data.train_specs)):
        if trainer.step_limit_reached():
            return
        # discriminator update: both separated sources of each mixture as fakes
        fakes = []
        for i in batch:
            separated = trainer.separate(data.train_specs[i]).value
            fakes.extend(DiffTensor(separated[k, 0]) for k in range(separated.shape[0]))
        picks = rng.choice(len(data.clean), size=len(fakes), replace=len(data.clean) < len(fakes))
        d_real = [trainer.discriminator(DiffTensor(data.clean[j])) for j in picks]
        d_fake = [trainer.discriminator(f) for f in fakes]
        d_loss, _ = gan_losses(d_real, d_fake, cfg.generator_form)
        trainer.adam_discriminator.step(ad.backward(d_loss, d_params))

        # generator update against the frozen discriminator
        grads, totals = None, {}
        for i in batch:
            separated = trainer.separate(data.train_specs[i])
            terms = _generator_terms(trainer, [separated])
            if not terms:
                raise ConfigError("Adversarial stage needs lambda_gan > 0 or lambda_energy > 0")
            loss = sum(terms.values()) / len(batch)
            grads = _accumulate(grads, ad.backward(loss, g_params))
            for name, term in terms.items():
                totals[name] = totals.get(name, 0.0) + term.item() / len(batch)
        trainer.record_step({"d_loss": d_loss.item(), **totals})
        trainer.adam_estimator.step(grads)


def _mixture_pairs(rng: np.random.Generator, n_items: int) -> List[Tuple[int, int]]:
    """Random distinct pairs covering every mixture once (the odd one out pairs with the first)."""
    if n_items < 2:
        raise DataError("Remix-cycle training needs at least 2 training mixtures")
    order = rng.permutation(n_items)
    pairs = [(int(order[k]), int(order[k + 1])) for k in range(0, n_items - 1, 2)]
    if n_items % 2:
        pairs.append((int(order[-1]), int(order[0])))
    return pairs


def _rccl_epoch(trainer: _Trainer, epoch: int) -> None:
    cfg, data = trainer.cfg, trainer.data
    pairs = _mixture_pairs(rng_for(cfg.seed, cfg.stage, epoch, "pairs"), len(data.train_specs))
    g_params = trainer.estimator.parameters()
    for start in range(0, len(pairs), cfg.batch_size):
        if trainer.step_limit_reached():
            return
        batch = pairs[start:start + cfg.batch_size]
        grads, totals = None, {}
        for i, j in batch:
            pair, sep1, sep2 = remix_cycle(trainer.separate, data.train_specs[i], data.train_specs[j])
            terms = {"cycle": cfg.lambda_cycle * cycle_loss(pair)}
            terms.update(_generator_terms(trainer, [sep1, sep2]))
            loss = sum(terms.values()) / len(batch)
            grads = _accumulate(grads, ad.backward(loss, g_params))
            for name, term in terms.items():
                totals[name] = totals.get(name, 0.0) + term.item() / len(batch)
        trainer.record_step(totals)
        trainer.adam_estimator.step(grads)


def _pit_epoch(trainer: _Trainer, epoch: int) -> None:
    data = trainer.data
    g_params = trainer.estimator.parameters()
    for batch in trainer.batches(epoch, len(data.train_specs)):
        if trainer.step_limit_reached():
            return
        grads, total = None, 0.0
        for i in batch:
            loss = pit_loss(trainer.separate(data.train_specs[i]), data.train_images[i]) / len(batch)
            grads = _accumulate(grads, ad.backward(loss, g_params))
            total += loss.item()
        trainer.record_step({"pit": total})
        trainer.adam_estimator.step(grads)


def _require_stage(cfg: TrainConfig, stage: str) -> None:
    if cfg.stage != stage:
        raise ConfigError(f"Expected a '{stage}' config, got '{cfg.stage}'")


def train_adversarial(cfg: TrainConfig, resume: Optional[Union[str, Path]] = None) -> TrainResult:
    """Stage 1: alternate discriminator and separator updates against unpaired clean speech."""
    _require_stage(cfg, "adversarial")
    trainer = _Trainer(cfg, resume=resume, need_clean=True)
    return trainer.run(lambda epoch: _adversarial_epoch(trainer, epoch))


def train_rccl(cfg: TrainConfig, init: Optional[Union[str, Path]] = None,
               resume: Optional[Union[str, Path]] = None) -> TrainResult:
    """Stage 2: remix-cycle-consistent fine-tuning of the mask estimator.

    The discriminator is carried over from ``init`` and never updated.
    """
    _require_stage(cfg, "rccl")
    if init is None and resume is None:
        logger.warning("RCCL should be used for tuning a well-trained separator; "
                       "training from a random initialisation")
    trainer = _Trainer(cfg, init=init, resume=resume, need_clean=False)
    return trainer.run(lambda epoch: _rccl_epoch(trainer, epoch))


def train_pit(cfg: TrainConfig, resume: Optional[Union[str, Path]] = None) -> TrainResult:
    """Supervised permutation-invariant baseline on the ground-truth source images."""
    _require_stage(cfg, "pit")
    trainer = _Trainer(cfg, resume=resume, need_images=True)
    return trainer.run(lambda epoch: _pit_epoch(trainer, epoch))


def train_stage(cfg: TrainConfig, init: Optional[Union[str, Path]] = None,
                resume: Optional[Union[str, Path]] = None) -> TrainResult:
    if cfg.stage == "adversarial":
        return train_adversarial(cfg, resume=resume)
    if cfg.stage == "rccl":
        return train_rccl(cfg, init=init, resume=resume)
    return train_pit(cfg, resume=resume)


@dataclass
class SweepRow:
    method: str
    seed: int
    sdr: Optional[float] = None
    sir: Optional[float] = None
    param_hash: str = ""
    checkpoint: str = ""
    error: str = ""

    @property
    def failed(self) -> bool:
        return bool(self.error)


@dataclass
class StabilityReport:
    rows: List[SweepRow]
    config_hash: str = ""
    stability_csv: Optional[Path] = None
    summary_csv: Optional[Path] = None
    summary_sir_csv: Optional[Path] = None

    @property
    def failed(self) -> List[SweepRow]:
        return [r for r in self.rows if r.failed]

    def methods(self) -> List[str]:
        return list(dict.fromkeys(r.method for r in self.rows))

    def summary(self, metric: str = "sdr") -> Dict[str, Dict[str, float]]:
        return {m: five_number_summary([getattr(r, metric) for r in self.rows
                                        if r.method == m and not r.failed])
                for m in self.methods()}

    def write(self, out_dir: Union[str, Path]) -> None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        self.stability_csv = out_dir / "stability.csv"
        with self.stability_csv.open("w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=STABILITY_COLUMNS, lineterminator="\n")
            writer.writeheader()
            for r in self.rows:
                writer.writerow({"method": r.method, "seed": r.seed,
                                 "sdr": "" if r.sdr is None else f"{r.sdr:.6f}",
                                 "sir": "" if r.sir is None else f"{r.sir:.6f}",
                                 "config_hash": self.config_hash})
        self.summary_csv = self._write_summary(out_dir / "stability_summary.csv", "sdr")
        self.summary_sir_csv = self._write_summary(out_dir / "stability_summary_sir.csv", "sir")

    def _write_summary(self, path: Path, metric: str) -> Path:
        with path.open("w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=SUMMARY_COLUMNS, lineterminator="\n")
            writer.writeheader()
            for method, stats in self.summary(metric).items():
                writer.writerow({"method": method, **{k: f"{v:.6f}" for k, v in stats.items()},
                                 "config_hash": self.config_hash})
        return path


def _stage_config(configs: Mapping[str, TrainConfig], stage: str, seed: int, out_dir: Path) -> TrainConfig:
    return replace(configs[stage], seed=seed, out_dir=out_dir)


def _run_seed(configs: Mapping[str, TrainConfig], seed: int, methods: Sequence[str],
              out_dir: Path, eval_split: str) -> List[SweepRow]:
    rows = []
    seed_dir = out_dir / f"seed-{seed}"
    al_result = None
    for method in methods:
        row = SweepRow(method=method, seed=seed)
        try:
            if method in ("al", "al+rccl") and al_result is None:
                al_result = train_adversarial(_stage_config(configs, "adversarial", seed, seed_dir))
            if method == "al":
                result = al_result
            elif method == "al+rccl":
                result = train_rccl(_stage_config(configs, "rccl", seed, seed_dir), init=al_result.checkpoint)
            else:
                result = train_pit(_stage_config(configs, "pit", seed, seed_dir))
            report = evaluate_checkpoint(result.checkpoint, next(iter(configs.values())).manifest,
                                         split=eval_split)
            row.sdr, row.sir = report.mean_sdr, report.mean_sir
            row.param_hash = result.param_hash
            row.checkpoint = str(result.checkpoint)
        except Exception as e:
            logger.error(f"Seed {seed} method {method} failed: {str(e)}")
            row.error = f"{type(e).__name__}: {e}"
        rows.append(row)
    return rows


def seed_sweep(configs: Mapping[str, TrainConfig], seeds: Sequence[int],
               methods: Sequence[str] = SWEEP_METHODS, out_dir: Optional[Union[str, Path]] = None,
               workers: int = 1, eval_split: str = "test") -> StabilityReport:
    """Train and evaluate every method for every seed; failed runs are kept as flagged rows.

    ``configs`` maps each stage to its config, as built by ``RunConfig.stage_configs``.
    """
    seeds = [int(s) for s in seeds]
    if len(set(seeds)) < 2:
        raise ConfigError(f"A seed sweep needs at least 2 distinct seeds, got {seeds}")
    unknown = [m for m in methods if m not in SWEEP_METHODS]
    if unknown:
        raise ConfigError(f"Unknown sweep method(s) {unknown}, expected {SWEEP_METHODS}")
    if not isinstance(configs, Mapping):
        raise ConfigError(f"seed_sweep needs per-stage configs, got {type(configs).__name__}")
    needed = ({stage for m in methods for stage in METHOD_STAGES[m]}
              | ({"rccl"} if "al+rccl" in methods else set()) | ({"pit"} if "pit" in methods else set()))
    missing = sorted(needed - set(configs))
    if missing:
        raise ConfigError(f"seed_sweep is missing stage config(s) {missing}")
    configs = dict(configs)
    hashes = {c.config_hash for c in configs.values()}
    if len(hashes) != 1:
        raise ConfigError(f"Stage configs come from different run configs: {sorted(hashes)}")
    out_dir = Path(out_dir) if out_dir is not None else next(iter(configs.values())).out_dir / "sweep"

    logger.info(f"Sweeping {len(seeds)} seeds over methods {list(methods)} with {workers} worker(s)")
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            futures = [pool.submit(_run_seed, configs, s, tuple(methods), out_dir, eval_split) for s in seeds]
            per_seed = [f.result() for f in futures]
    else:
        per_seed = [_run_seed(configs, s, methods, out_dir, eval_split) for s in seeds]

    rows = [row for method in methods for seed_rows in per_seed for row in seed_rows if row.method == method]
    report = StabilityReport(rows, config_hash=hashes.pop())
    report.write(out_dir)
    if report.failed:
        logger.warning(f"{len(report.failed)} of {len(rows)} sweep runs failed")
    logger.info(f"Wrote stability report to {report.stability_csv}")
    return report
