import numpy as np
import pytest

from remixsep.autodiff import DiffTensor
from remixsep.errors import SeparatorError
from remixsep.metrics import score_record, sdr_sir
from remixsep.separator import (
    ABSOLUTE_LOADING,
    BeamformerWeights,
    ConstantMasks,
    FixedMasks,
    MaskSet,
    OracleMasks,
    ScmPair,
    apply_beamformer,
    estimate_masks,
    estimate_scm,
    ideal_ratio_masks,
    mvdr_weights,
    separate,
    select_channel,
)
from remixsep.signal_core import Spectrogram, stft


@pytest.fixture
def mixture_spec(tiny_scene):
    return stft(tiny_scene.mixture)


@pytest.fixture
def oracle(tiny_scene):
    return OracleMasks([stft(img) for img in tiny_scene.ground_truth_images])


def test_scms_are_hermitian_psd(mixture_spec, oracle):
    scm = estimate_scm(mixture_spec, MaskSet(oracle.masks))

    assert scm.speech.shape == (2, 257, 4, 4)
    for r in (scm.speech, scm.noise):
        np.testing.assert_allclose(r, np.conj(np.swapaxes(r, -1, -2)), atol=1e-12)
        eigs = np.linalg.eigvalsh(r)
        assert eigs.min() > -1e-9 * max(1.0, np.abs(eigs).max())
    print("✓ masked SCMs are Hermitian positive semi-definite")


def test_empty_mask_falls_back_to_loaded_average(mixture_spec):
    masks = np.full((2, mixture_spec.n_freq, mixture_spec.n_frames), 0.5)
    masks[0, 40] = 0.0
    masks[1, 40] = 1.0
    scm = estimate_scm(mixture_spec, MaskSet(masks))

    fallback = scm.speech[0, 40]
    assert np.all(np.isfinite(fallback))
    assert np.linalg.eigvalsh(fallback).min() > 0
    xf = mixture_spec.bins[:, 40, :]
    unweighted = xf @ xf.conj().T / mixture_spec.n_frames
    np.testing.assert_allclose(fallback, unweighted, rtol=1e-2, atol=1e-9)


def test_silent_mixture_degenerates_to_channel_average():
    silent = Spectrogram(np.zeros((4, 257, 6), dtype=complex))
    scm = estimate_scm(silent, MaskSet(np.full((2, 257, 6), 0.5)))
    weights = mvdr_weights(scm)

    assert weights.degenerate.all()
    np.testing.assert_allclose(weights.weights[0, 0], np.eye(4) / 4)
    out = apply_beamformer(silent, weights)
    assert np.all(out.stacked() == 0)
    print("✓ degenerate bins fall back to I/M")


@pytest.mark.parametrize("form", ["inverse", "literal"])
def test_weights_have_unit_trace(mixture_spec, oracle, form):
    weights = mvdr_weights(estimate_scm(mixture_spec, MaskSet(oracle.masks)), form=form)
    traces = np.trace(weights.weights, axis1=-2, axis2=-1)

    np.testing.assert_allclose(traces[~weights.degenerate], 1.0, atol=1e-9)


def test_mvdr_forms_differ(mixture_spec, oracle):
    scm = estimate_scm(mixture_spec, MaskSet(oracle.masks))
    inverse, literal = mvdr_weights(scm, form="inverse"), mvdr_weights(scm, form="literal")
    assert not np.allclose(inverse.weights, literal.weights)


def test_mvdr_rejects_bad_options():
    scm = ScmPair(speech=np.tile(np.eye(2), (2, 3, 1, 1)), noise=np.tile(np.eye(2), (2, 3, 1, 1)))
    with pytest.raises(SeparatorError):
        mvdr_weights(scm, form="pseudo")
    with pytest.raises(SeparatorError):
        mvdr_weights(scm, loading=-1.0)


def test_beamforming_is_linear_in_the_mixture(mixture_spec, rng):
    weights = rng.standard_normal((2, 257, 4, 4)) + 1j * rng.standard_normal((2, 257, 4, 4))
    w = BeamformerWeights(weights=weights, degenerate=np.zeros((2, 257), dtype=bool))
    other = mixture_spec.with_bins(rng.standard_normal(mixture_spec.bins.shape) + 0j)

    combined = apply_beamformer(mixture_spec * 2.0 + other * (-0.5), w).stacked()
    expected = 2.0 * apply_beamformer(mixture_spec, w).stacked() - 0.5 * apply_beamformer(other, w).stacked()
    np.testing.assert_allclose(combined, expected, atol=1e-9)


def test_equal_masks_give_identical_outputs(mixture_spec):
    separated = separate(mixture_spec, ConstantMasks(0.5))
    first, second = separated.stacked()

    assert separated.n_sources == 2
    assert np.all(np.isfinite(first))
    np.testing.assert_array_equal(first, second)


def test_oracle_masks_improve_sir(tiny_scene, oracle):
    separated_report = score_record(tiny_scene, oracle)
    mixture = tiny_scene.mixture.channel(0)
    references = [img.channel(0) for img in tiny_scene.ground_truth_images]
    observed = sdr_sir([mixture, mixture], references)

    gain = separated_report.mean_sir - observed.mean_sir
    assert gain > 3.0, f"oracle SIR gain only {gain:.2f} dB"
    print(f"✓ oracle-mask MVDR improves SIR by {gain:.1f} dB")


def test_ideal_ratio_masks_partition_unity(tiny_scene):
    masks = ideal_ratio_masks([stft(img) for img in tiny_scene.ground_truth_images])
    active = masks.sum(axis=0) > 0

    np.testing.assert_allclose(masks.sum(axis=0)[active], 1.0, atol=1e-12)


def test_mask_validation(mixture_spec, oracle):
    with pytest.raises(SeparatorError):
        MaskSet(np.full((2, 4, 4), 1.5))
    with pytest.raises(SeparatorError):
        MaskSet(np.ones((4, 4)))
    with pytest.raises(SeparatorError):
        estimate_scm(mixture_spec, MaskSet(np.full((2, 100, 3), 0.5)))
    with pytest.raises(SeparatorError):
        FixedMasks(oracle.masks[:, :10])(DiffTensor(mixture_spec.bins))


def test_estimate_masks_and_select_channel(mixture_spec, oracle):
    masks = estimate_masks(mixture_spec, oracle)
    assert masks.n_sources == 2

    separated = separate(mixture_spec, oracle, origin="tiny")
    channel0 = select_channel(separated)
    assert separated.origin == "tiny"
    assert [s.n_channels for s in channel0] == [1, 1]


def test_scm_matches_direct_summation(rng):
    x = rng.standard_normal((4, 9, 10)) + 1j * rng.standard_normal((4, 9, 10))
    masks = rng.uniform(0.05, 0.95, size=(2, 9, 10))
    scm = estimate_scm(Spectrogram(x, n_fft=16, hop=4), MaskSet(masks))

    for i in range(2):
        for f in range(9):
            for target, weights in ((scm.speech, masks[i, f]), (scm.noise, 1 - masks[i, f])):
                expected = sum(w * np.outer(x[:, f, t], x[:, f, t].conj()) for t, w in enumerate(weights))
                np.testing.assert_allclose(target[i, f], expected / weights.sum(), atol=1e-12)


def test_mvdr_matches_solve_then_normalise(rng):
    a = rng.standard_normal((4, 4)) + 1j * rng.standard_normal((4, 4))
    b = rng.standard_normal((4, 4)) + 1j * rng.standard_normal((4, 4))
    speech, noise = a @ a.conj().T, b @ b.conj().T
    weights = mvdr_weights(ScmPair(speech=speech[None, None], noise=noise[None, None]), loading=1e-3)

    load = 1e-3 * np.trace(noise).real / 4 + ABSOLUTE_LOADING
    ratio = np.linalg.solve(noise + load * np.eye(4), speech)
    np.testing.assert_allclose(weights.weights[0, 0], ratio / np.trace(ratio), atol=1e-10)
    assert np.trace(weights.weights[0, 0]) == pytest.approx(1.0, abs=1e-10)
