"""Anechoic far-field microphone-array simulation and dataset generation."""

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np

from remixsep.errors import DataError, SceneError
from remixsep.seeding import derive_seed, rng_for
from remixsep.signal_core import (
    DEFAULT_HOP,
    DEFAULT_N_FFT,
    DEFAULT_SAMPLE_RATE,
    Spectrogram,
    Waveform,
    istft,
    read_wav,
    stft,
    write_wav,
)

logger = logging.getLogger(__name__)

DIRECTION_GRID = tuple(range(-90, 91, 15))
SPEED_OF_SOUND = 343.0
MANIFEST_NAME = "manifest.jsonl"
CLEAN_POOL_NAME = "clean_pool.jsonl"
SPLITS = ("train", "val", "test")


@dataclass(frozen=True, eq=False)
class ArrayGeometry:
    """Microphone coordinates in metres, shaped (M, 2); x is the array axis."""

    mic_positions: np.ndarray
    speed_of_sound: float = SPEED_OF_SOUND

    def __post_init__(self):
        positions = np.asarray(self.mic_positions, dtype=np.float64)
        if positions.ndim != 2 or positions.shape[1] != 2:
            raise SceneError(f"mic_positions must be (M, 2), got {positions.shape}")
        if positions.shape[0] < 2:
            raise SceneError(f"At least two microphones are required, got {positions.shape[0]}")
        if len({tuple(p) for p in positions.round(12)}) != positions.shape[0]:
            raise SceneError("Microphone positions must be distinct")
        if self.speed_of_sound <= 0:
            raise SceneError(f"speed_of_sound must be positive, got {self.speed_of_sound}")
        object.__setattr__(self, "mic_positions", positions)

    @classmethod
    def linear(cls, n_mics: int = 4, spacing: float = 0.03,
               speed_of_sound: float = SPEED_OF_SOUND) -> "ArrayGeometry":
        """Uniform linear array centred on the origin."""
        x = (np.arange(n_mics) - (n_mics - 1) / 2.0) * spacing
        return cls(np.stack([x, np.zeros(n_mics)], axis=1), speed_of_sound)

    @property
    def n_mics(self) -> int:
        return self.mic_positions.shape[0]

    @property
    def center(self) -> np.ndarray:
        return self.mic_positions.mean(axis=0)


@dataclass(frozen=True, eq=False)
class SteeringVector:
    values: np.ndarray  # (mic, freq)
    direction: float


@dataclass(frozen=True)
class SceneSpec:
    source_directions: Tuple[int, ...]
    source_distance: float = 1.0
    seed: int = 0

    def __post_init__(self):
        directions = tuple(int(d) for d in self.source_directions)
        if len(set(directions)) != len(directions):
            raise SceneError(f"Source directions must be distinct, got {directions}")
        off_grid = [d for d in directions if d not in DIRECTION_GRID]
        if off_grid:
            raise SceneError(f"Directions {off_grid} are not multiples of 15° within [-90, 90]")
        if self.source_distance <= 0:
            raise SceneError(f"source_distance must be positive, got {self.source_distance}")
        object.__setattr__(self, "source_directions", directions)


@dataclass(frozen=True, eq=False)
class MixtureRecord:
    mixture: Waveform
    ground_truth_images: List[Waveform]
    scene: SceneSpec
    record_id: str = ""


def steering_vector(g: ArrayGeometry, direction: float, n_fft: int = DEFAULT_N_FFT,
                    sample_rate: int = DEFAULT_SAMPLE_RATE) -> SteeringVector:
    """Plane-wave phase factors at the STFT bin frequencies, array centre as origin.

    ``direction`` is measured from broadside (0° is the front, ±90° endfire).
    """
    if abs(direction) > 90:
        raise SceneError(f"|direction| must be <= 90°, got {direction}")
    theta = np.deg2rad(direction)
    toward_source = np.array([np.sin(theta), np.cos(theta)])
    # a mic displaced toward the source hears the wavefront early
    delays = -((g.mic_positions - g.center) @ toward_source) / g.speed_of_sound
    freqs = np.arange(n_fft // 2 + 1) * sample_rate / n_fft
    values = np.exp(-2j * np.pi * freqs[None, :] * delays[:, None])
    return SteeringVector(values=values, direction=float(direction))


def synth_source(seed: int, duration: float,
                 sample_rate: int = DEFAULT_SAMPLE_RATE) -> Waveform:
    """Speech-like test signal, a deterministic function of ``seed``.

    A harmonic stack on a drifting fundamental (80-300 Hz) shaped by three
    formant resonances, gated by a 2-8 Hz syllabic envelope, plus a little
    aspiration noise. Normalised to unit RMS.
    """
    if duration <= 0:
        raise SceneError(f"duration must be positive, got {duration}")
    rng = rng_for(seed, "synth-source")
    n = int(round(duration * sample_rate))
    t = np.arange(n) / sample_rate

    n_knots = max(int(np.ceil(duration * 6)), 1) + 1
    knot_times = np.linspace(0.0, duration, n_knots)
    log_f0 = np.log(rng.uniform(100.0, 220.0)) + np.cumsum(rng.normal(0.0, 0.12, n_knots))
    log_f0 = np.clip(log_f0, np.log(80.0), np.log(300.0))
    f0 = np.exp(np.interp(t, knot_times, log_f0))
    phase = 2.0 * np.pi * np.cumsum(f0) / sample_rate

    formants = np.array([rng.uniform(300, 900), rng.uniform(900, 2200), rng.uniform(2200, 3400)])
    bandwidths = np.array([90.0, 140.0, 200.0])
    gains = np.array([1.0, 0.6, 0.3])

    n_harmonics = int(0.45 * sample_rate / 80.0)
    harmonics = np.arange(1, n_harmonics + 1)[:, None]
    freqs = harmonics * f0[None, :]
    envelope = (gains[:, None, None]
                * np.exp(-0.5 * ((freqs[None] - formants[:, None, None]) / bandwidths[:, None, None]) ** 2)
                ).sum(axis=0) + 0.02 / (1.0 + freqs / 500.0)
    envelope *= freqs < 0.45 * sample_rate
    offsets = rng.uniform(0.0, 2.0 * np.pi, size=(n_harmonics, 1))
    voiced = (envelope * np.sin(harmonics * phase[None, :] + offsets)).sum(axis=0)

    rate = rng.uniform(2.0, 8.0)
    syllables = (0.5 * (1.0 - np.cos(2.0 * np.pi * rate * t + rng.uniform(0, 2 * np.pi)))) ** 1.5
    voiced /= max(np.sqrt(np.mean(voiced ** 2)), 1e-12)
    signal = syllables * (voiced + 0.05 * rng.standard_normal(n))
    signal /= max(np.sqrt(np.mean(signal ** 2)), 1e-12)
    return Waveform(signal, sample_rate)


def random_scene(seed: int, n_sources: int = 2, source_distance: float = 1.0) -> SceneSpec:
    rng = rng_for(seed, "scene")
    directions = rng.choice(DIRECTION_GRID, size=n_sources, replace=False)
    return SceneSpec(tuple(int(d) for d in directions), source_distance, seed)


def project_to_array(source: Spectrogram, sv: SteeringVector) -> Spectrogram:
    """M-channel image of a single-channel spectrogram as observed at the microphones."""
    if source.n_channels != 1:
        raise SceneError(f"Expected a single-channel spectrogram, got {source.n_channels} channels")
    if sv.values.shape[1] != source.n_freq:
        raise SceneError(f"Steering vector has {sv.values.shape[1]} bins, spectrogram {source.n_freq}")
    return source.with_bins(source.bins * sv.values[:, :, None])


def render_scene(spec: SceneSpec, sources: Sequence[Waveform], g: ArrayGeometry,
                 n_fft: int = DEFAULT_N_FFT, hop: int = DEFAULT_HOP) -> MixtureRecord:
    """Spatialise each source with its steering vector (STFT multiply, overlap-add) and sum."""
    if len(sources) != len(spec.source_directions):
        raise SceneError(f"{len(sources)} sources for {len(spec.source_directions)} directions")
    lengths = {s.n_samples for s in sources}
    rates = {s.sample_rate for s in sources}
    if len(lengths) != 1 or len(rates) != 1:
        raise SceneError(f"Sources must share length and sample rate, got {lengths} / {rates}")
    if any(s.n_channels != 1 for s in sources):
        raise SceneError("Sources must be single-channel")
    length, sample_rate = lengths.pop(), rates.pop()

    images = []
    for source, direction in zip(sources, spec.source_directions):
        sv = steering_vector(g, direction, n_fft, sample_rate)
        images.append(istft(project_to_array(stft(source, n_fft, hop), sv), length=length))
    mixture = Waveform(np.sum([img.samples for img in images], axis=0), sample_rate)
    return MixtureRecord(mixture=mixture, ground_truth_images=images, scene=spec)


@dataclass(frozen=True)
class ManifestEntry:
    id: str
    split: str
    mixture_path: Path
    source_paths: Tuple[Path, ...]
    directions: Tuple[int, ...]
    seed: int
    source_distance: float = 1.0


@dataclass(frozen=True)
class CleanEntry:
    id: str
    path: Path
    seed: int


@dataclass
class DatasetSummary:
    manifest_path: Path
    clean_pool_path: Path
    counts: dict = field(default_factory=dict)


def _render_record(seed: int, split: str, index: int, duration: float, sample_rate: int,
                   g: ArrayGeometry, n_fft: int, hop: int, source_distance: float) -> Tuple[MixtureRecord, int]:
    record_seed = derive_seed(seed, split, index)
    scene = random_scene(record_seed, 2, source_distance)
    sources = [synth_source(derive_seed(record_seed, "source", k), duration, sample_rate)
               for k in range(len(scene.source_directions))]
    return render_scene(scene, sources, g, n_fft, hop), record_seed


def generate_dataset(n_train: int, n_val: int, n_test: int, seed: int,
                     out_dir: Union[str, Path], duration: float = 3.0,
                     sample_rate: int = DEFAULT_SAMPLE_RATE, n_clean: Optional[int] = None,
                     geometry: Optional[ArrayGeometry] = None, n_fft: int = DEFAULT_N_FFT,
                     hop: int = DEFAULT_HOP, source_distance: float = 1.0) -> DatasetSummary:
    """Render train/val/test mixtures plus an unpaired clean pool; a pure function of the arguments."""
    for name, count in (("n_train", n_train), ("n_val", n_val), ("n_test", n_test)):
        if count < 1:
            raise DataError(f"{name} must be >= 1, got {count}")
    n_clean = n_train if n_clean is None else n_clean
    g = geometry or ArrayGeometry.linear()
    out_dir = Path(out_dir)
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
        probe = out_dir / ".write-test"
        probe.write_text("")
        probe.unlink()
    except OSError as e:
        raise DataError(f"Output directory {out_dir} is not writable: {e}") from e

    lines = []
    used_seeds = set()
    counts = {}
    for split, count in zip(SPLITS, (n_train, n_val, n_test)):
        counts[split] = count
        for index in range(count):
            record, record_seed = _render_record(seed, split, index, duration, sample_rate,
                                                 g, n_fft, hop, source_distance)
            record_id = f"{split}-{index:05d}"
            rel_dir = Path(split) / record_id
            mixture_rel = rel_dir / "mixture.wav"
            # FLOAT WAVs hold float32; the mixture file is the sum of the stored images
            images = [Waveform(img.samples.astype(np.float32), img.sample_rate)
                      for img in record.ground_truth_images]
            write_wav(out_dir / mixture_rel,
                      Waveform(np.sum([img.samples for img in images], axis=0), sample_rate))
            source_rels = []
            for k, image in enumerate(images):
                rel = rel_dir / f"source{k}.wav"
                write_wav(out_dir / rel, image)
                source_rels.append(rel.as_posix())
                used_seeds.add(derive_seed(record_seed, "source", k))
            lines.append({
                "id": record_id,
                "split": split,
                "mixture_path": mixture_rel.as_posix(),
                "source_paths": source_rels,
                "directions": list(record.scene.source_directions),
                "seed": record_seed,
                "source_distance": source_distance,
            })
        logger.info(f"Rendered {count} {split} mixtures")

    clean_lines = []
    for index in range(n_clean):
        clean_seed = derive_seed(seed, "clean", index)
        bump = 0
        while clean_seed in used_seeds:
            bump += 1
            clean_seed = derive_seed(seed, "clean", index, bump)
        rel = Path("clean") / f"clean-{index:05d}.wav"
        write_wav(out_dir / rel, synth_source(clean_seed, duration, sample_rate))
        clean_lines.append({"id": f"clean-{index:05d}", "path": rel.as_posix(), "seed": clean_seed})
    counts["clean"] = n_clean

    manifest_path = out_dir / MANIFEST_NAME
    clean_path = out_dir / CLEAN_POOL_NAME
    manifest_path.write_text("".join(json.dumps(line, sort_keys=True) + "\n" for line in lines))
    clean_path.write_text("".join(json.dumps(line, sort_keys=True) + "\n" for line in clean_lines))
    logger.info(f"Wrote {len(lines)} mixtures and {n_clean} clean utterances to {out_dir}")
    return DatasetSummary(manifest_path=manifest_path, clean_pool_path=clean_path, counts=counts)


def _read_jsonl(path: Path) -> List[dict]:
    if not path.is_file():
        raise DataError(f"File not found: {path}")
    items = []
    with path.open() as fh:
        for number, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                items.append(json.loads(line))
            except json.JSONDecodeError as e:
                raise DataError(f"{path}:{number}: malformed JSON line: {e}") from e
    return items


def load_manifest(path: Union[str, Path], split: Optional[str] = None) -> List[ManifestEntry]:
    path = Path(path)
    root = path.parent
    entries = []
    for number, item in enumerate(_read_jsonl(path), 1):
        try:
            entry = ManifestEntry(
                id=item["id"],
                split=item["split"],
                mixture_path=root / item["mixture_path"],
                source_paths=tuple(root / p for p in item["source_paths"]),
                directions=tuple(item["directions"]),
                seed=item["seed"],
                source_distance=item.get("source_distance", 1.0),
            )
        except (KeyError, TypeError) as e:
            raise DataError(f"{path}: entry {number} is missing or has a malformed field {e}") from e
        if split is None or entry.split == split:
            entries.append(entry)
    return entries


def load_clean_pool(path: Union[str, Path]) -> List[CleanEntry]:
    path = Path(path)
    try:
        return [CleanEntry(item["id"], path.parent / item["path"], item["seed"]) for item in _read_jsonl(path)]
    except (KeyError, TypeError) as e:
        raise DataError(f"{path}: clean-pool entry is missing or has a malformed field {e}") from e


def load_record(entry: ManifestEntry) -> MixtureRecord:
    """Read one manifest entry.

    The mixture is rebuilt from the stored images so it equals their sum
    exactly; ``mixture.wav`` is only checked for shape.
    """
    try:
        stored = read_wav(entry.mixture_path)
        images = [read_wav(p) for p in entry.source_paths]
    except (OSError, RuntimeError) as e:
        raise DataError(f"Cannot read audio for {entry.id}: {e}") from e
    if not images or any(img.samples.shape != stored.samples.shape for img in images):
        raise DataError(f"Source images of {entry.id} do not match the mixture shape {stored.samples.shape}")
    mixture = Waveform(np.sum([img.samples for img in images], axis=0), stored.sample_rate)
    scene = SceneSpec(entry.directions, entry.source_distance, entry.seed)
    return MixtureRecord(mixture=mixture, ground_truth_images=images, scene=scene, record_id=entry.id)
