import hashlib
import json
from dataclasses import replace

import numpy as np
import pytest

from remixsep.array_sim import (
    DIRECTION_GRID,
    ArrayGeometry,
    SceneSpec,
    generate_dataset,
    load_clean_pool,
    load_manifest,
    load_record,
    project_to_array,
    random_scene,
    render_scene,
    steering_vector,
    synth_source,
)
from remixsep.errors import DataError, SceneError
from remixsep.signal_core import Waveform, read_wav, stft, write_wav


def test_steering_vector_is_unit_modulus(geometry):
    sv = steering_vector(geometry, 45, n_fft=512, sample_rate=16000)

    assert sv.values.shape == (4, 257)
    np.testing.assert_allclose(np.abs(sv.values), 1.0)
    print("✓ steering vector entries all have modulus 1")


def test_broadside_steering_vector_is_all_ones(geometry):
    """0° arrives at every microphone of a linear array at once."""
    sv = steering_vector(geometry, 0)
    np.testing.assert_allclose(sv.values, 1.0, atol=1e-12)


def test_endfire_delays_follow_mic_spacing(geometry):
    """At 90° adjacent mics differ by spacing / c seconds."""
    sv = steering_vector(geometry, 90, n_fft=512, sample_rate=16000)
    f = 1000.0
    k = int(f * 512 / 16000)
    ratio = sv.values[1, k] / sv.values[0, k]
    expected = np.exp(-2j * np.pi * (k * 16000 / 512) * (-0.03 / 343.0))
    np.testing.assert_allclose(ratio, expected, atol=1e-12)


def test_steering_vector_rejects_out_of_range_direction(geometry):
    with pytest.raises(SceneError):
        steering_vector(geometry, 95)


def test_synth_source_is_deterministic_and_unit_rms():
    a, b, c = synth_source(5, 0.5), synth_source(5, 0.5), synth_source(6, 0.5)

    np.testing.assert_array_equal(a.samples, b.samples)
    assert not np.allclose(a.samples, c.samples)
    assert np.sqrt(np.mean(a.samples ** 2)) == pytest.approx(1.0, rel=1e-9)
    assert a.n_samples == 8000
    print("✓ synth_source is seed-deterministic with unit RMS")


def test_synth_source_energy_sits_in_speech_band():
    w = synth_source(9, 1.0)
    spectrum = np.abs(np.fft.rfft(w.samples[0])) ** 2
    freqs = np.fft.rfftfreq(w.n_samples, 1 / 16000)
    in_band = spectrum[(freqs >= 80) & (freqs <= 4000)].sum() / spectrum.sum()
    assert in_band > 0.8, f"only {in_band:.2f} of the energy lies in 80 Hz-4 kHz"


def test_synth_source_rejects_non_positive_duration():
    with pytest.raises(SceneError):
        synth_source(0, 0.0)


def test_scene_spec_validation():
    with pytest.raises(SceneError):
        SceneSpec((30, 30))
    with pytest.raises(SceneError):
        SceneSpec((10, 30))
    with pytest.raises(SceneError):
        SceneSpec((0, 30), source_distance=0.0)
    scene = random_scene(4)
    assert set(scene.source_directions) <= set(DIRECTION_GRID)


def test_mixture_is_exact_sum_of_images(tiny_scene):
    images = np.sum([img.samples for img in tiny_scene.ground_truth_images], axis=0)

    np.testing.assert_array_equal(tiny_scene.mixture.samples, images)
    assert tiny_scene.mixture.n_channels == 4
    print("✓ mixture equals the sum of the source images")


def test_broadside_source_image_equals_source(geometry):
    """A source at 0° reaches every microphone unchanged."""
    source = synth_source(11, 0.25)
    record = render_scene(SceneSpec((0, 45)), [source, synth_source(12, 0.25)], geometry)
    image = record.ground_truth_images[0]

    assert image.n_channels == 4
    for m in range(4):
        np.testing.assert_allclose(image.samples[m], source.samples[0], atol=1e-9)


def test_project_to_array_requires_single_channel(tiny_scene, geometry):
    sv = steering_vector(geometry, 0)
    with pytest.raises(SceneError):
        project_to_array(stft(tiny_scene.mixture), sv)


def test_render_scene_rejects_length_mismatch(geometry):
    spec = SceneSpec((-30, 30))
    with pytest.raises(SceneError):
        render_scene(spec, [synth_source(1, 0.25), synth_source(2, 0.5)], geometry)
    with pytest.raises(SceneError):
        render_scene(spec, [synth_source(1, 0.25)], geometry)


def test_generate_dataset_writes_manifest_and_clean_pool(tiny_dataset):
    entries = load_manifest(tiny_dataset.manifest_path)
    pool = load_clean_pool(tiny_dataset.clean_pool_path)

    assert len(entries) == 8
    assert [len(load_manifest(tiny_dataset.manifest_path, s)) for s in ("train", "val", "test")] == [4, 2, 2]
    assert len(pool) == 4
    for entry in entries:
        assert set(entry.directions) <= set(DIRECTION_GRID)
        assert entry.mixture_path.is_file()
        assert all(p.is_file() for p in entry.source_paths)
    mixture_seeds = {e.seed for e in entries}
    assert not mixture_seeds & {c.seed for c in pool}
    print(f"✓ dataset has {len(entries)} mixtures and {len(pool)} clean utterances")


def test_loaded_record_round_trips(tiny_dataset):
    entry = load_manifest(tiny_dataset.manifest_path, "train")[0]
    record = load_record(entry)

    assert record.record_id == entry.id
    summed = np.sum([img.samples for img in record.ground_truth_images], axis=0)
    assert np.array_equal(record.mixture.samples, summed), "loaded mixture differs from the sum of its images"
    stored = read_wav(entry.mixture_path)
    np.testing.assert_allclose(stored.samples, summed, rtol=1e-6, atol=1e-6)
    print("✓ loaded mixture is exactly the sum of the loaded images")


def test_load_record_rejects_mismatched_images(tiny_dataset, tmp_path):
    entry = load_manifest(tiny_dataset.manifest_path, "train")[0]
    short = tmp_path / "short.wav"
    write_wav(short, Waveform(np.zeros((4, 10))))
    with pytest.raises(DataError):
        load_record(replace(entry, source_paths=(short, entry.source_paths[1])))

@pytest.mark.parametrize("text", [
    '{"id": "train-00000", "split": "train", "seed": 1}\n',
    '{"id": "train-00000"\n',
])
def test_load_manifest_wraps_malformed_lines(tmp_path, text):
    path = tmp_path / "manifest.jsonl"
    path.write_text(text)
    with pytest.raises(DataError):
        load_manifest(path)


def test_generate_dataset_is_deterministic(tmp_path):
    digests = []
    for name in ("a", "b"):
        summary = generate_dataset(2, 1, 1, seed=7, out_dir=tmp_path / name, duration=0.1)
        digests.append(hashlib.sha256(summary.manifest_path.read_bytes()).hexdigest())
        first = json.loads(summary.manifest_path.read_text().splitlines()[0])
        assert first["id"] == "train-00000"
    assert digests[0] == digests[1]
    print("✓ identical flags give an identical manifest")


def test_generate_dataset_rejects_bad_counts(tmp_path):
    with pytest.raises(DataError):
        generate_dataset(0, 1, 1, seed=1, out_dir=tmp_path)


def test_generate_dataset_rejects_unwritable_directory(tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("not a directory")
    with pytest.raises(DataError):
        generate_dataset(1, 1, 1, seed=1, out_dir=blocker / "data")


def test_geometry_validation():
    with pytest.raises(SceneError):
        ArrayGeometry(np.zeros((1, 2)))
    with pytest.raises(SceneError):
        ArrayGeometry(np.zeros((2, 2)))
    assert ArrayGeometry.linear(n_mics=3).n_mics == 3


def test_synth_source_centroid_stays_in_speech_band():
    freqs = np.fft.rfftfreq(8000, 1 / 16000)
    centroids = []
    for seed in range(100):
        power = np.abs(np.fft.rfft(synth_source(seed, 0.5).samples[0])) ** 2
        centroids.append(float(np.sum(freqs * power) / np.sum(power)))

    assert min(centroids) > 100.0, f"lowest centroid {min(centroids):.0f} Hz"
    assert max(centroids) < 4000.0, f"highest centroid {max(centroids):.0f} Hz"
    print(f"✓ centroids over 100 seeds lie in {min(centroids):.0f}-{max(centroids):.0f} Hz")


def _lowpass(w, cutoff=6000.0):
    spectrum = np.fft.rfft(w.samples[0])
    spectrum[np.fft.rfftfreq(w.n_samples, 1 / w.sample_rate) > cutoff] = 0.0
    return Waveform(np.fft.irfft(spectrum, n=w.n_samples), w.sample_rate)


def _delay_line(samples, delay, half_taps=64):
    """Hann-windowed sinc interpolator: output[n] = samples[n - delay] for a fractional delay."""
    k = np.arange(-half_taps, half_taps + 1)
    taps = np.sinc(k - delay) * np.hanning(2 * half_taps + 3)[1:-1]
    return np.convolve(samples, taps)[half_taps:half_taps + len(samples)]


@pytest.mark.parametrize("directions", [(-60, 45), (90, -15), (-90, 30)])
def test_render_scene_matches_time_domain_delay_line(geometry, directions):
    """Each image is the source delayed by the plane-wave lag at that microphone."""
    sources = [_lowpass(synth_source(31, 0.5)), _lowpass(synth_source(32, 0.5))]
    record = render_scene(SceneSpec(directions), sources, geometry)

    interior = slice(1024, 8000 - 1024)
    oracle_images = []
    for source, direction, image in zip(sources, directions, record.ground_truth_images):
        theta = np.deg2rad(direction)
        toward = np.array([np.sin(theta), np.cos(theta)])
        delays = -((geometry.mic_positions - geometry.center) @ toward) / geometry.speed_of_sound
        expected = np.stack([_delay_line(source.samples[0], d * 16000) for d in delays])
        oracle_images.append(expected)
        error = (np.linalg.norm(image.samples[:, interior] - expected[:, interior])
                 / np.linalg.norm(expected[:, interior]))
        assert error < 1e-2, f"image at {direction}° deviates from the delay line by {error:.2e}"

    def cross_term(a, b):
        return 2.0 * float(np.sum(a[:, interior] * b[:, interior]))

    rendered = cross_term(*(img.samples for img in record.ground_truth_images))
    oracle = cross_term(*oracle_images)
    energies = sum(float(np.sum(img.samples[:, interior] ** 2)) for img in record.ground_truth_images)
    mixture_energy = float(np.sum(record.mixture.samples[:, interior] ** 2))

    assert mixture_energy - energies == pytest.approx(rendered, rel=1e-9, abs=1e-6 * energies)
    assert abs(rendered - oracle) < 2e-2 * energies
    assert abs(rendered) < 0.5 * energies
    print(f"✓ {directions} images follow the fractional-delay oracle")
