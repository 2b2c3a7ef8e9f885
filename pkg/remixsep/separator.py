"""Mask-based MVDR separator: masks -> SCMs -> MVDR filters -> M-channel source images.

The public functions take and return the domain types. The ``*_tensor``
variants run the same computation on :class:`DiffTensor` values so the whole
chain can be differentiated by the trainer.
"""

import logging
from dataclasses import dataclass
from typing import Callable, List, Sequence, Tuple

import numpy as np

from remixsep import autodiff as ad
from remixsep.autodiff import DiffTensor
from remixsep.errors import SeparatorError
from remixsep.signal_core import Spectrogram

logger = logging.getLogger(__name__)

MVDR_FORMS = ("inverse", "literal")
DEFAULT_LOADING = 1e-3
DEGENERATE_TRACE = 1e-12
EMPTY_MASK = 1e-10
ABSOLUTE_LOADING = 1e-12

MaskFn = Callable[[DiffTensor], DiffTensor]


@dataclass(frozen=True, eq=False)
class MaskSet:
    masks: np.ndarray  # (source, freq, frame)

    def __post_init__(self):
        masks = np.asarray(self.masks, dtype=np.float64)
        if masks.ndim != 3:
            raise SeparatorError(f"Masks must be (source, freq, frame), got {masks.shape}")
        if np.any(masks < 0.0) or np.any(masks > 1.0):
            raise SeparatorError("Mask entries must lie in [0, 1]")
        object.__setattr__(self, "masks", masks)

    @property
    def n_sources(self) -> int:
        return self.masks.shape[0]


@dataclass(frozen=True, eq=False)
class ScmPair:
    speech: np.ndarray  # (source, freq, mic, mic)
    noise: np.ndarray


@dataclass(frozen=True, eq=False)
class BeamformerWeights:
    weights: np.ndarray  # (source, freq, mic, mic)
    degenerate: np.ndarray  # (source, freq) bool


@dataclass(frozen=True, eq=False)
class SeparatedSet:
    sources: List[Spectrogram]
    origin: str = ""

    @property
    def n_sources(self) -> int:
        return len(self.sources)

    def stacked(self) -> np.ndarray:
        """(source, mic, freq, frame) array of all outputs."""
        return np.stack([s.bins for s in self.sources])

    @classmethod
    def from_tensor(cls, value: np.ndarray, like: Spectrogram, origin: str = "") -> "SeparatedSet":
        return cls([like.with_bins(v) for v in np.asarray(value)], origin)


def _eye_like(m: int) -> np.ndarray:
    return np.eye(m, dtype=np.complex128)


def scm_tensor(x: DiffTensor, masks: DiffTensor) -> Tuple[DiffTensor, DiffTensor]:
    """Masked SCMs for mixture (mic, freq, frame) and masks (source, freq, frame).

    Where a mask sums to zero over time at some (source, freq), the SCM falls
    back to the unweighted average with diagonal loading.
    """
    x, masks = ad.as_tensor(x), ad.as_tensor(masks)
    if masks.ndim != 3 or x.ndim != 3 or masks.shape[1:] != x.shape[1:]:
        raise SeparatorError(f"Mask shape {masks.shape} does not match mixture shape {x.shape}")
    n_mics, _, n_frames = x.shape
    xf = ad.transpose(x, (1, 0, 2))  # (freq, mic, frame)
    outer_h = xf.H  # (freq, frame, mic)
    eye = _eye_like(n_mics)

    def weighted(weights: DiffTensor) -> DiffTensor:
        total = ad.tsum(weights, axis=-1)  # (source, freq)
        empty = total.value < EMPTY_MASK
        weights = ad.where(empty[..., None], 1.0, weights)
        total = ad.where(empty, float(n_frames), total)
        scm = ((xf * ad.expand_dims(weights, 2)) @ outer_h) / total.reshape(*total.shape, 1, 1)
        if np.any(empty):
            load = DEFAULT_LOADING * ad.trace(scm).real / n_mics + ABSOLUTE_LOADING
            scm = scm + ad.where(empty[..., None, None], load.reshape(*load.shape, 1, 1) * eye, 0.0)
        return scm

    return weighted(masks), weighted(1.0 - masks)


def mvdr_tensor(speech: DiffTensor, noise: DiffTensor, loading: float = DEFAULT_LOADING,
                form: str = "inverse") -> Tuple[DiffTensor, np.ndarray]:
    """Trace-normalised MVDR filters ``R_n^{-1} R_s / tr(R_n^{-1} R_s)`` per (source, freq).

    ``form="literal"`` drops the inverse (``R_n R_s / tr(R_n R_s)``). Returns
    the filters and the boolean map of degenerate bins, where the filter is I/M.
    """
    if form not in MVDR_FORMS:
        raise SeparatorError(f"Unknown MVDR form '{form}', expected one of {MVDR_FORMS}")
    if loading < 0:
        raise SeparatorError(f"Diagonal loading must be >= 0, got {loading}")
    speech, noise = ad.as_tensor(speech), ad.as_tensor(noise)
    n_mics = speech.shape[-1]
    eye = _eye_like(n_mics)
    if form == "inverse":
        load = loading * ad.trace(noise).real / n_mics + ABSOLUTE_LOADING
        loaded = noise + load.reshape(*load.shape, 1, 1) * eye
        ratio = ad.solve(loaded, speech)
    else:
        ratio = noise @ speech
    tr = ad.trace(ratio)
    degenerate = np.abs(tr.value) < DEGENERATE_TRACE
    safe_tr = ad.where(degenerate, 1.0 + 0j, tr)
    weights = ad.where(degenerate[..., None, None], eye / n_mics,
                       ratio / safe_tr.reshape(*safe_tr.shape, 1, 1))
    return weights, degenerate


def beamform_tensor(x: DiffTensor, weights: DiffTensor) -> DiffTensor:
    """``W_i(f)^H x(f, t)`` for every source; returns (source, mic, freq, frame)."""
    x, weights = ad.as_tensor(x), ad.as_tensor(weights)
    if weights.ndim != 4 or weights.shape[1] != x.shape[1] or weights.shape[2] != x.shape[0]:
        raise SeparatorError(f"Weights {weights.shape} do not fit mixture {x.shape}")
    xf = ad.transpose(x, (1, 0, 2))  # (freq, mic, frame)
    out = weights.H @ ad.expand_dims(xf, 0)  # (source, freq, mic, frame)
    return ad.transpose(out, (0, 2, 1, 3))


def separate_tensor(x: DiffTensor, mask_estimator: MaskFn, loading: float = DEFAULT_LOADING,
                    form: str = "inverse") -> DiffTensor:
    """estimate masks -> SCMs -> MVDR -> filtering, differentiable end to end."""
    x = ad.as_tensor(x)
    masks = mask_estimator(x)
    speech, noise = scm_tensor(x, masks)
    weights, degenerate = mvdr_tensor(speech, noise, loading, form)
    if np.any(degenerate):
        logger.debug(f"{int(degenerate.sum())} degenerate (source, freq) bins fell back to I/M")
    return beamform_tensor(x, weights)


def estimate_scm(x: Spectrogram, m: MaskSet) -> ScmPair:
    speech, noise = scm_tensor(ad.DiffTensor(x.bins), ad.DiffTensor(m.masks))
    return ScmPair(speech=speech.value, noise=noise.value)


def mvdr_weights(scm: ScmPair, loading: float = DEFAULT_LOADING,
                 form: str = "inverse") -> BeamformerWeights:
    weights, degenerate = mvdr_tensor(ad.DiffTensor(scm.speech), ad.DiffTensor(scm.noise),
                                      loading, form)
    if np.any(degenerate):
        logger.warning(f"{int(degenerate.sum())} degenerate (source, freq) bins fell back to I/M")
    return BeamformerWeights(weights=weights.value, degenerate=degenerate)


def apply_beamformer(x: Spectrogram, w: BeamformerWeights, origin: str = "") -> SeparatedSet:
    out = beamform_tensor(ad.DiffTensor(x.bins), ad.DiffTensor(w.weights))
    return SeparatedSet.from_tensor(out.value, x, origin)


def separate(x: Spectrogram, mask_estimator: MaskFn, loading: float = DEFAULT_LOADING,
             form: str = "inverse", origin: str = "") -> SeparatedSet:
    out = separate_tensor(ad.DiffTensor(x.bins), mask_estimator, loading, form)
    return SeparatedSet.from_tensor(out.value, x, origin)


def estimate_masks(x: Spectrogram, mask_estimator: MaskFn) -> MaskSet:
    return MaskSet(mask_estimator(ad.DiffTensor(x.bins)).value)


class ConstantMasks:
    """Every source gets the same constant mask."""

    def __init__(self, value: float = 0.5, n_sources: int = 2):
        self.value = value
        self.n_sources = n_sources

    def __call__(self, x: DiffTensor) -> DiffTensor:
        _, n_freq, n_frames = x.shape
        return ad.DiffTensor(np.full((self.n_sources, n_freq, n_frames), self.value))


class FixedMasks:
    """Returns a precomputed mask array regardless of the input."""

    def __init__(self, masks: np.ndarray):
        self.masks = MaskSet(masks).masks

    def __call__(self, x: DiffTensor) -> DiffTensor:
        if self.masks.shape[1:] != x.shape[1:]:
            raise SeparatorError(f"Fixed masks {self.masks.shape} do not fit mixture {x.shape}")
        return ad.DiffTensor(self.masks)


def ideal_ratio_masks(images: Sequence[Spectrogram], floor: float = 1e-12) -> np.ndarray:
    """|S_i| / sum_j |S_j| per bin, magnitudes averaged over microphones."""
    mags = np.stack([np.abs(img.bins).mean(axis=0) for img in images])
    return mags / np.maximum(mags.sum(axis=0, keepdims=True), floor)


class OracleMasks(FixedMasks):
    """Ideal ratio masks computed from ground-truth source images."""

    def __init__(self, images: Sequence[Spectrogram]):
        super().__init__(ideal_ratio_masks(images))


def select_channel(separated: SeparatedSet, channel: int = 0) -> List[Spectrogram]:
    return [s.channel(channel) for s in separated.sources]
