"""SDR / SIR scoring with best-permutation matching, and manifest-level evaluation."""

import csv
import itertools
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import fast_bss_eval
import numpy as np

from remixsep.array_sim import MixtureRecord, load_manifest, load_record
from remixsep.errors import DataError, SignalError
from remixsep.nn import load_mask_estimator
from remixsep.separator import DEFAULT_LOADING, OracleMasks, separate
from remixsep.signal_core import DEFAULT_HOP, DEFAULT_N_FFT, Waveform, istft, stft

logger = logging.getLogger(__name__)

METRIC_CAP_DB = 60.0
FILTER_LENGTH = 512
REFERENCE_CHANNEL = 0
SILENT_ENERGY = 1e-20
CSV_COLUMNS = ("mixture_id", "source_idx", "sdr_db", "sir_db", "permutation", "config_hash")


@dataclass(frozen=True)
class SourceMetric:
    mixture_id: str
    source_idx: int
    sdr_db: Optional[float]
    sir_db: Optional[float]
    permutation: Tuple[int, ...]

    @property
    def defined(self) -> bool:
        return self.sdr_db is not None

    def csv_row(self) -> dict:
        return {
            "mixture_id": self.mixture_id,
            "source_idx": self.source_idx,
            "sdr_db": "" if self.sdr_db is None else f"{self.sdr_db:.6f}",
            "sir_db": "" if self.sir_db is None else f"{self.sir_db:.6f}",
            "permutation": "-".join(str(p) for p in self.permutation),
        }


def five_number_summary(values: Sequence[float]) -> Dict[str, float]:
    """min / q1 / median / q3 / max of the given values (NaN when empty)."""
    values = np.asarray(list(values), dtype=np.float64)
    if values.size == 0:
        return {key: float("nan") for key in ("min", "q1", "median", "q3", "max")}
    q = np.percentile(values, [0, 25, 50, 75, 100])
    return {"min": float(q[0]), "q1": float(q[1]), "median": float(q[2]),
            "q3": float(q[3]), "max": float(q[4])}


@dataclass
class MetricReport:
    rows: List[SourceMetric] = field(default_factory=list)
    config_hash: str = ""

    @property
    def undefined(self) -> List[SourceMetric]:
        return [r for r in self.rows if not r.defined]

    def values(self, metric: str) -> List[float]:
        return [getattr(r, metric) for r in self.rows if r.defined]

    @property
    def mean_sdr(self) -> float:
        values = self.values("sdr_db")
        return float(np.mean(values)) if values else float("nan")

    @property
    def mean_sir(self) -> float:
        values = self.values("sir_db")
        return float(np.mean(values)) if values else float("nan")

    def aggregates(self) -> dict:
        return {
            "n_rows": len(self.rows),
            "n_undefined": len(self.undefined),
            "mean_sdr_db": self.mean_sdr,
            "mean_sir_db": self.mean_sir,
            "sdr_db": five_number_summary(self.values("sdr_db")),
            "sir_db": five_number_summary(self.values("sir_db")),
        }

    def per_mixture(self, metric: str = "sir_db") -> Dict[str, float]:
        """Mean of ``metric`` over the defined sources of each mixture."""
        grouped: Dict[str, List[float]] = {}
        for r in self.rows:
            if r.defined:
                grouped.setdefault(r.mixture_id, []).append(getattr(r, metric))
        return {key: float(np.mean(vals)) for key, vals in grouped.items()}

    def extend(self, other: "MetricReport") -> None:
        self.rows.extend(other.rows)

    def write_csv(self, path: Union[str, Path]) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with path.open("w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=CSV_COLUMNS, lineterminator="\n")
            writer.writeheader()
            for row in self.rows:
                writer.writerow({**row.csv_row(), "config_hash": self.config_hash})
        return path


def _reference_channel(w: Waveform) -> np.ndarray:
    return w.samples[REFERENCE_CHANNEL]


def sdr_sir(estimates: Sequence[Waveform], references: Sequence[Waveform], mixture_id: str = "",
            filter_length: int = FILTER_LENGTH, cap: float = METRIC_CAP_DB) -> MetricReport:
    """BSS-eval SDR and SIR at the reference channel, maximised over source permutations.

    A silent reference leaves its row undefined. Every defined value lies in
    ``[-cap, cap]``.
    """
    if len(estimates) != len(references) or not references:
        raise SignalError(f"{len(estimates)} estimates vs {len(references)} references")
    est = np.stack([_reference_channel(e) for e in estimates])
    ref = np.stack([_reference_channel(r) for r in references])
    if est.shape != ref.shape:
        raise SignalError(f"Estimate length {est.shape[1]} differs from reference length {ref.shape[1]}")

    n_sources, n_samples = ref.shape
    energy = np.sum(ref ** 2, axis=1)
    active = np.flatnonzero(energy > SILENT_ENERGY)
    if active.size < n_sources:
        logger.warning(f"{mixture_id}: {n_sources - active.size} silent reference(s), metrics undefined")
    identity = tuple(range(n_sources))
    if active.size == 0:
        return MetricReport([SourceMetric(mixture_id, i, None, None, identity) for i in range(n_sources)])

    taps = min(filter_length, n_samples)
    load = 1e-10 * float(energy.max())
    best = None
    for perm in itertools.permutations(range(n_sources)):
        candidate = est[list(perm)][active]
        sdr, sir, _ = fast_bss_eval.bss_eval_sources(
            ref[active], candidate, filter_length=taps, load_diag=load,
            compute_permutation=False, clamp_db=cap,
        )
        sdr = np.clip(np.nan_to_num(np.asarray(sdr, dtype=np.float64), nan=-cap, posinf=cap, neginf=-cap), -cap, cap)
        sir = np.clip(np.nan_to_num(np.asarray(sir, dtype=np.float64), nan=-cap, posinf=cap, neginf=-cap), -cap, cap)
        if best is None or sdr.mean() > best[0].mean():
            best = (sdr, sir, perm)

    sdr, sir, perm = best
    rows = []
    values = {int(i): (float(s), float(r)) for i, s, r in zip(active, sdr, sir)}
    for i in range(n_sources):
        sdr_i, sir_i = values.get(i, (None, None))
        rows.append(SourceMetric(mixture_id, i, sdr_i, sir_i, tuple(perm)))
    return MetricReport(rows)


def _mask_provider(record: MixtureRecord, estimator, n_fft: int, hop: int):
    if estimator is not None:
        return estimator
    return OracleMasks([stft(img, n_fft, hop) for img in record.ground_truth_images])


def score_record(record: MixtureRecord, mask_fn, n_fft: int = DEFAULT_N_FFT, hop: int = DEFAULT_HOP,
                 loading: float = DEFAULT_LOADING, form: str = "inverse") -> MetricReport:
    """Separate one mixture with ``mask_fn`` and score channel 0 of every output."""
    x = stft(record.mixture, n_fft, hop)
    separated = separate(x, mask_fn, loading, form, origin=record.record_id)
    length = record.mixture.n_samples
    estimates = [istft(s.channel(REFERENCE_CHANNEL), length=length) for s in separated.sources]
    references = [img.channel(REFERENCE_CHANNEL) for img in record.ground_truth_images]
    return sdr_sir(estimates, references, mixture_id=record.record_id)


def _score_entry(entry, estimator, n_fft: int, hop: int, loading: float, form: str) -> MetricReport:
    record = load_record(entry)
    return score_record(record, _mask_provider(record, estimator, n_fft, hop), n_fft, hop, loading, form)


def _entries(manifest: Union[str, Path], split: str):
    entries = load_manifest(manifest, split)
    if not entries:
        raise DataError(f"No '{split}' mixtures in manifest {manifest}")
    return entries


def evaluate_checkpoint(checkpoint: Optional[Union[str, Path]], manifest: Union[str, Path],
                        split: str = "test", out_csv: Optional[Union[str, Path]] = None,
                        oracle: bool = False, mvdr_form: Optional[str] = None,
                        loading: Optional[float] = None, workers: int = 1) -> MetricReport:
    """Separate every mixture of ``split`` and score channel 0 against the ground-truth images.

    With ``oracle=True`` the checkpoint is ignored and ideal ratio masks drive the MVDR.
    Every CSV row carries the checkpoint's config hash (empty for oracle masks).
    """
    entries = _entries(manifest, split)
    estimator, meta = None, {}
    if not oracle:
        if checkpoint is None:
            raise DataError("A checkpoint is required unless oracle masks are used")
        estimator, meta = load_mask_estimator(checkpoint)
    n_fft = meta.get("n_fft", DEFAULT_N_FFT)
    hop = meta.get("hop", DEFAULT_HOP)
    form = mvdr_form or meta.get("mvdr_form", "inverse")
    loading = meta.get("loading", DEFAULT_LOADING) if loading is None else loading

    label = "oracle masks" if oracle else str(checkpoint)
    logger.info(f"Evaluating {label} on {len(entries)} {split} mixtures ({form} MVDR)")
    with ThreadPoolExecutor(max_workers=max(1, workers)) as pool:
        parts = list(pool.map(lambda e: _score_entry(e, estimator, n_fft, hop, loading, form), entries))

    report = MetricReport(config_hash=meta.get("config_hash", ""))
    for part in parts:
        report.extend(part)
    logger.info(f"Mean SDR {report.mean_sdr:.2f} dB, mean SIR {report.mean_sir:.2f} dB")
    if out_csv is not None:
        report.write_csv(out_csv)
        logger.info(f"Wrote metrics to {out_csv}")
    return report


def observation_report(manifest: Union[str, Path], split: str = "test",
                       out_csv: Optional[Union[str, Path]] = None) -> MetricReport:
    """Scores of the unprocessed mixture used as the estimate of every source."""
    report = MetricReport()
    for entry in _entries(manifest, split):
        record = load_record(entry)
        mixture = record.mixture.channel(REFERENCE_CHANNEL)
        references = [img.channel(REFERENCE_CHANNEL) for img in record.ground_truth_images]
        report.extend(sdr_sir([mixture] * len(references), references, mixture_id=entry.id))
    if out_csv is not None:
        report.write_csv(out_csv)
    return report
