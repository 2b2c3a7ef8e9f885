"""Adversarial, remix-cycle, energy and permutation-invariant losses.

Separated outputs are handled as (source, mic, freq, frame) tensors; a
:class:`~remixsep.separator.SeparatedSet` is accepted wherever such a tensor is.
All losses return real scalar :class:`DiffTensor` values.
"""

import itertools
import logging
from dataclasses import dataclass
from typing import Callable, List, Sequence, Tuple, Union

import numpy as np

from remixsep import autodiff as ad
from remixsep.autodiff import DiffTensor
from remixsep.errors import ObjectiveError
from remixsep.separator import SeparatedSet
from remixsep.signal_core import Spectrogram

logger = logging.getLogger(__name__)

PROB_CLAMP = 1e-7
GENERATOR_FORMS = ("non_saturating", "minimax")

SeparatedLike = Union[SeparatedSet, DiffTensor, np.ndarray]
SpecLike = Union[Spectrogram, DiffTensor, np.ndarray]


def _as_sources(sep: SeparatedLike) -> DiffTensor:
    if isinstance(sep, SeparatedSet):
        return DiffTensor(sep.stacked())
    return ad.as_tensor(sep)


def _as_spec(x: SpecLike) -> DiffTensor:
    if isinstance(x, Spectrogram):
        return DiffTensor(x.bins)
    return ad.as_tensor(x)


def frobenius(x: DiffTensor) -> DiffTensor:
    """Frobenius norm of a complex tensor over all axes."""
    return ad.sqrt(ad.tsum(ad.abs2(x)))


@dataclass(frozen=True, eq=False)
class Assignment:
    """Binary 2 x 2N matrix routing each second-stage output to one pseudo-mixture."""

    matrix: np.ndarray

    def __post_init__(self):
        matrix = np.asarray(self.matrix, dtype=np.int64)
        if matrix.ndim != 2 or matrix.shape[0] != 2 or matrix.shape[1] % 2:
            raise ObjectiveError(f"Assignment must be 2 x 2N, got {matrix.shape}")
        if not np.isin(matrix, (0, 1)).all():
            raise ObjectiveError("Assignment entries must be 0 or 1")
        n = matrix.shape[1] // 2
        if not (matrix.sum(axis=0) == 1).all() or not (matrix.sum(axis=1) == n).all():
            raise ObjectiveError("Each column must sum to 1 and each row to N")
        object.__setattr__(self, "matrix", matrix)

    def rows(self) -> Tuple[Tuple[int, ...], Tuple[int, ...]]:
        return (tuple(np.flatnonzero(self.matrix[0])), tuple(np.flatnonzero(self.matrix[1])))

    def __eq__(self, other) -> bool:
        return isinstance(other, Assignment) and np.array_equal(self.matrix, other.matrix)

    def __hash__(self) -> int:
        return hash(self.matrix.tobytes())


def enumerate_assignments(n_sources: int = 2) -> List[Assignment]:
    """All valid assignments, ordered by the lexicographic index set of row 0."""
    n_candidates = 2 * n_sources
    out = []
    for first in itertools.combinations(range(n_candidates), n_sources):
        matrix = np.zeros((2, n_candidates), dtype=np.int64)
        matrix[0, list(first)] = 1
        matrix[1] = 1 - matrix[0]
        out.append(Assignment(matrix))
    return out


@dataclass(eq=False)
class CyclePair:
    x1: DiffTensor
    x2: DiffTensor
    z1: DiffTensor
    z2: DiffTensor
    xhat1: DiffTensor
    xhat2: DiffTensor
    chosen: Assignment


def cross_remix(sep1: SeparatedLike, sep2: SeparatedLike) -> Tuple[DiffTensor, DiffTensor]:
    """Pseudo-mixtures ``z1 = s1(x1) + s2(x2)`` and ``z2 = s1(x2) + s2(x1)``."""
    s1, s2 = _as_sources(sep1), _as_sources(sep2)
    if s1.shape != s2.shape:
        raise ObjectiveError(f"Separated sets differ in shape: {s1.shape} vs {s2.shape}")
    if s1.shape[0] != 2:
        raise ObjectiveError(f"cross_remix needs N = 2 sources, got {s1.shape[0]}")
    return s1[0] + s2[1], s2[0] + s1[1]


def assignment_costs(candidates: Sequence[SpecLike], x1: SpecLike, x2: SpecLike) -> np.ndarray:
    """Σ_j ‖x_j − [A Ŝ]_j‖ for every assignment of :func:`enumerate_assignments`."""
    values = np.stack([_as_spec(c).value for c in candidates])
    targets = (_as_spec(x1).value, _as_spec(x2).value)
    costs = []
    for a in enumerate_assignments(len(candidates) // 2):
        costs.append(sum(np.linalg.norm((target - values[list(row)].sum(axis=0)).ravel())
                         for target, row in zip(targets, a.rows())))
    return np.array(costs)


def best_assignment(candidates: Sequence[SpecLike], x1: SpecLike,
                    x2: SpecLike) -> Tuple[Assignment, DiffTensor, DiffTensor]:
    """Exhaustive search for the remix closest to the observed mixtures.

    Ties resolve to the lowest assignment index.
    """
    if len(candidates) != 4:
        raise ObjectiveError(f"best_assignment needs exactly 4 candidates, got {len(candidates)}")
    tensors = [_as_spec(c) for c in candidates]
    shapes = {t.shape for t in tensors} | {_as_spec(x1).shape, _as_spec(x2).shape}
    if len(shapes) != 1:
        raise ObjectiveError(f"Candidate and mixture shapes differ: {sorted(shapes)}")
    costs = assignment_costs(tensors, x1, x2)
    chosen = enumerate_assignments(2)[int(np.argmin(costs))]
    row1, row2 = chosen.rows()
    xhat1 = tensors[row1[0]] + tensors[row1[1]]
    xhat2 = tensors[row2[0]] + tensors[row2[1]]
    return chosen, xhat1, xhat2


def cycle_loss(pair: CyclePair) -> DiffTensor:
    """L_C = Σ_j ‖x_j − x̂_j‖_F over (mic, freq, frame)."""
    return frobenius(_as_spec(pair.x1) - pair.xhat1) + frobenius(_as_spec(pair.x2) - pair.xhat2)


def remix_cycle(separate_fn: Callable[[DiffTensor], DiffTensor], x1: SpecLike,
                x2: SpecLike) -> Tuple[CyclePair, DiffTensor, DiffTensor]:
    """separate -> cross_remix -> separate -> best_assignment for one mixture pair.

    Returns the cycle pair and the first-stage outputs for ``x1`` and ``x2``.
    The two mixtures must be different observations.
    """
    same = x1 is x2
    x1, x2 = _as_spec(x1), _as_spec(x2)
    if same or (x1.shape == x2.shape and np.array_equal(x1.value, x2.value)):
        raise ObjectiveError("remix_cycle needs two different mixtures, got the same one twice")
    sep1, sep2 = separate_fn(x1), separate_fn(x2)
    z1, z2 = cross_remix(sep1, sep2)
    sep_z1, sep_z2 = separate_fn(z1), separate_fn(z2)
    chosen, xhat1, xhat2 = best_assignment([sep_z1[0], sep_z1[1], sep_z2[0], sep_z2[1]], x1, x2)
    return CyclePair(x1, x2, z1, z2, xhat1, xhat2, chosen), sep1, sep2


def energy_loss(*seps: SeparatedLike) -> DiffTensor:
    """L_E: total energy of all separated outputs of the given mixtures."""
    if not seps:
        raise ObjectiveError("energy_loss needs at least one separated set")
    total = None
    for sep in seps:
        sources = _as_sources(sep)
        if sources.shape[0] != 2:
            raise ObjectiveError(f"energy_loss needs N = 2 sources, got {sources.shape[0]}")
        term = ad.tsum(ad.abs2(sources))
        total = term if total is None else total + term
    return total


def gan_losses(d_real: Union[DiffTensor, Sequence[float]], d_fake: Union[DiffTensor, Sequence[float]],
               generator_form: str = "non_saturating") -> Tuple[DiffTensor, DiffTensor]:
    """Discriminator and generator losses from post-sigmoid probabilities.

    ``d_loss = −mean log D(real) − mean log(1 − D(fake))``. The generator loss is
    ``−mean log D(fake)`` (non-saturating) or ``mean log(1 − D(fake))`` (minimax).
    """
    if generator_form not in GENERATOR_FORMS:
        raise ObjectiveError(f"Unknown generator form '{generator_form}'")
    d_real, d_fake = _as_probs(d_real), _as_probs(d_fake)
    real_p = ad.clip(d_real, PROB_CLAMP, 1.0 - PROB_CLAMP)
    fake_p = ad.clip(d_fake, PROB_CLAMP, 1.0 - PROB_CLAMP)
    d_loss = -ad.mean(ad.log(real_p)) - ad.mean(ad.log(1.0 - fake_p))
    if generator_form == "non_saturating":
        g_loss = -ad.mean(ad.log(fake_p))
    else:
        g_loss = ad.mean(ad.log(1.0 - fake_p))
    return d_loss, g_loss


def _as_probs(values) -> DiffTensor:
    if isinstance(values, DiffTensor):
        probs = values.reshape(-1)
    elif isinstance(values, (list, tuple)) and values and isinstance(values[0], DiffTensor):
        probs = ad.stack([v.reshape(()) for v in values])
    else:
        probs = DiffTensor(np.asarray(values, dtype=np.float64).reshape(-1))
    if probs.size == 0:
        raise ObjectiveError("Discriminator output batch is empty")
    return probs


def best_permutation(sep: SeparatedLike, truths: Union[Sequence[SpecLike], DiffTensor]) -> Tuple[int, ...]:
    """Permutation π minimising Σ_i ‖ŝ_π(i) − s_i‖² (first one on ties).

    Non-finite costs never win, so all-NaN estimates give the identity.
    """
    estimates = _as_sources(sep).value
    references = _stack_truths(truths).value
    if estimates.shape != references.shape:
        raise ObjectiveError(f"{estimates.shape[0]} outputs vs {references.shape[0]} references")
    best, best_cost = tuple(range(estimates.shape[0])), np.inf
    for perm in itertools.permutations(range(estimates.shape[0])):
        cost = float(np.sum(np.abs(estimates[list(perm)] - references) ** 2))
        if cost < best_cost:
            best, best_cost = perm, cost
    return best


def _stack_truths(truths) -> DiffTensor:
    if isinstance(truths, DiffTensor):
        return truths
    if isinstance(truths, np.ndarray):
        return DiffTensor(truths)
    return ad.stack([_as_spec(t) for t in truths])


def pit_loss(sep: SeparatedLike, truths: Union[Sequence[SpecLike], DiffTensor]) -> DiffTensor:
    """min_π Σ_i ‖ŝ_π(i) − s_i‖², differentiable through the chosen permutation."""
    estimates = _as_sources(sep)
    references = _stack_truths(truths)
    if estimates.shape[0] != references.shape[0]:
        raise ObjectiveError(f"{estimates.shape[0]} outputs vs {references.shape[0]} references")
    perm = best_permutation(estimates, references)
    return ad.tsum(ad.abs2(estimates[np.array(perm)] - references))
