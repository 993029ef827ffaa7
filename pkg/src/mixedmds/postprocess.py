"""Feature identifiability post-processing and posterior summaries.

Latent distances are identified but features are only unique up to
translation, scale transfer between weights and features, and signed
permutations of the axes.  Each draw is centered and rescaled to a canonical
form, then all draws are aligned to a common reference by the signed
permutation with the smallest Frobenius residual.
"""

from __future__ import annotations

import itertools
import logging
from dataclasses import dataclass, field
from typing import Optional, Sequence, Union

import numpy as np

from . import model
from .errors import DegenerateDrawError, DomainError
from .sampler import ChainOutput

logger = logging.getLogger(__name__)

MAX_EXHAUSTIVE_H = 8
REFERENCE_CANDIDATES = 50
MAX_PASSES = 20


@dataclass
class NormalizedDraw:
    eta_shared: np.ndarray  # (S, H)
    w_group: np.ndarray  # (J,)
    w_ind: np.ndarray  # (N, H)
    group: np.ndarray

    @property
    def scales(self) -> np.ndarray:
        return self.w_group[self.group][:, None] * self.w_ind

    @property
    def eta_ind(self) -> np.ndarray:
        return self.scales[:, None, :] * self.eta_shared[None]

    def eta_group(self, J: int) -> np.ndarray:
        x = self.eta_ind
        counts = np.bincount(self.group, minlength=J)
        out = np.zeros((J,) + x.shape[1:])
        np.add.at(out, self.group, x)
        return out / counts[:, None, None]


def center_and_rescale(eta, w_group, w_ind, group) -> NormalizedDraw:
    """Canonical representative of one draw with identical latent distances.

    1. Shared features are centered per dimension (individual features move
       with them, since they are rescaled copies).
    2. Each dimension's scale moves into the features so that the mean
       combined weight ``w_group[j] * w_ind[i, h]`` over all subjects is 1;
       the shared features are then the average individual features.
    3. Group weights take the mean combined weight of their group over
       subjects and dimensions, so ``sum_i sum_h w_ind[i, h] = n_j H`` and
       ``sum_j n_j w_group[j] = n`` (``sum_j w_group[j] = J`` for equal
       group sizes).
    """
    eta = np.asarray(eta, dtype=float)
    w_group = np.asarray(w_group, dtype=float)
    w_ind = np.asarray(w_ind, dtype=float)
    group = np.asarray(group, dtype=int)
    J = w_group.size
    c = w_group[group][:, None] * w_ind
    k = c.mean(axis=0)
    if not np.all(np.isfinite(k) & (k > 0)):
        raise DegenerateDrawError("zero or non-finite weight sum")
    eta_c = (eta - eta.mean(axis=0)) * k
    c = c / k
    counts = np.bincount(group, minlength=J)
    g = np.bincount(group, weights=c.sum(axis=1), minlength=J) / (counts * c.shape[1])
    if not np.all(np.isfinite(g) & (g > 0)):
        raise DegenerateDrawError("zero or non-finite group weight sum")
    return NormalizedDraw(eta_shared=eta_c, w_group=g, w_ind=c / g[group][:, None], group=group)


# ---------------------------------------------------------------------------
# Signed permutations


@dataclass(frozen=True)
class SignedPermutation:
    """Column map ``aligned[:, h] = signs[h] * x[:, perm[h]]``."""

    perm: tuple
    signs: tuple

    @classmethod
    def identity(cls, H: int) -> "SignedPermutation":
        return cls(tuple(range(H)), (1,) * H)

    @classmethod
    def from_matrix(cls, P) -> "SignedPermutation":
        P = np.asarray(P)
        perm = tuple(int(np.flatnonzero(P[:, h])[0]) for h in range(P.shape[1]))
        signs = tuple(int(P[perm[h], h]) for h in range(P.shape[1]))
        return cls(perm, signs)

    @property
    def matrix(self) -> np.ndarray:
        """``P`` with ``x @ P`` equal to :meth:`apply`."""
        H = len(self.perm)
        P = np.zeros((H, H))
        P[list(self.perm), list(range(H))] = self.signs
        return P

    def apply(self, x: np.ndarray, signed: bool = True) -> np.ndarray:
        """Permute (and sign) the last axis of ``x``."""
        out = x[..., list(self.perm)]
        return out * np.asarray(self.signs) if signed else out

    def then(self, other: "SignedPermutation") -> "SignedPermutation":
        """Composition: apply ``self`` first, then ``other``."""
        return SignedPermutation.from_matrix(self.matrix @ other.matrix)

    @property
    def is_identity(self) -> bool:
        return self == SignedPermutation.identity(len(self.perm))


_PERMS: dict = {}


def _permutations(H: int) -> np.ndarray:
    if H not in _PERMS:
        _PERMS[H] = np.array(list(itertools.permutations(range(H))), dtype=int).reshape(-1, H)
    return _PERMS[H]


def align_signed_permutation(x: np.ndarray, reference: np.ndarray) -> tuple[SignedPermutation, float]:
    """Signed permutation of the columns of ``x`` closest to ``reference``.

    Searches all ``2**H H!`` candidates.  For a fixed permutation the
    residual splits over columns, so each column's best sign is the sign of
    its inner product with the reference column; the search over signs is
    therefore exact without enumerating them.  Candidates are ordered
    lexicographically by permutation, then by signs with ``+1`` before
    ``-1``; the first minimizer wins ties.

    Returns the permutation and the Frobenius residual.
    """
    x = np.asarray(x, dtype=float)
    reference = np.asarray(reference, dtype=float)
    if x.shape != reference.shape:
        raise DomainError(f"shape mismatch {x.shape} vs {reference.shape}")
    H = x.shape[-1]
    if H > MAX_EXHAUSTIVE_H:
        raise DomainError(f"exhaustive signed-permutation search is limited to H <= {MAX_EXHAUSTIVE_H}")
    xm = x.reshape(-1, H)
    rm = reference.reshape(-1, H)
    inner = xm.T @ rm  # inner[a, b] = <x[:, a], ref[:, b]>
    perms = _permutations(H)
    picked = inner[perms, np.arange(H)]  # (K, H)
    scores = np.abs(picked).sum(axis=1)
    best = int(np.argmax(scores))
    perm = perms[best]
    signs = np.where(picked[best] < 0, -1, 1)
    sp = SignedPermutation(tuple(int(p) for p in perm), tuple(int(s) for s in signs))
    resid2 = np.sum(xm**2) + np.sum(rm**2) - 2.0 * scores[best]
    return sp, float(np.sqrt(max(resid2, 0.0)))


def brute_force_alignment(x: np.ndarray, reference: np.ndarray) -> tuple[SignedPermutation, float]:
    """Reference enumeration of every signed permutation (for testing)."""
    H = x.shape[-1]
    best, best_res = None, np.inf
    for perm in itertools.permutations(range(H)):
        for signs in itertools.product((1, -1), repeat=H):
            sp = SignedPermutation(perm, signs)
            res = float(np.linalg.norm(sp.apply(x) - reference))
            if res < best_res:
                best, best_res = sp, res
    return best, best_res


# ---------------------------------------------------------------------------
# Chains


@dataclass
class AlignedSamples:
    """Normalized and aligned feature and weight draws.

    ``perm_log[t]`` maps the normalized draw ``t`` onto the reference frame.
    """

    eta_shared: np.ndarray  # (T, S, H)
    w_group: np.ndarray  # (T, J)
    w_ind: np.ndarray  # (T, N, H)
    group: np.ndarray
    perm_log: list
    reference: np.ndarray
    kept: np.ndarray  # indices of retained chain draws
    dropped: int = 0
    passes: int = 0

    @property
    def T(self) -> int:
        return self.eta_shared.shape[0]

    @property
    def J(self) -> int:
        return self.w_group.shape[1]

    @property
    def n(self) -> np.ndarray:
        return np.bincount(self.group, minlength=self.J)

    @property
    def scales(self) -> np.ndarray:
        return self.w_group[:, self.group, None] * self.w_ind

    @property
    def eta_ind(self) -> np.ndarray:
        """(T, N, S, H) individual features."""
        return self.scales[:, :, None, :] * self.eta_shared[:, None, :, :]

    @property
    def eta_group(self) -> np.ndarray:
        """(T, J, S, H) within-group means of individual features."""
        x = self.eta_ind
        out = np.zeros((self.T, self.J) + x.shape[2:])
        for j in range(self.J):
            out[:, j] = x[:, self.group == j].mean(axis=1)
        return out

    def latent_distances(self) -> np.ndarray:
        """(T, N, P) latent distances recomputed from aligned quantities."""
        rows, cols = model.pair_indices(self.eta_shared.shape[1])
        diff2 = (self.eta_shared[:, rows] - self.eta_shared[:, cols]) ** 2  # (T, P, H)
        return np.sqrt(np.einsum("tnh,tph->tnp", self.scales**2, diff2))


def _normalize_all(eta, w_group, w_ind, group):
    normalized, kept = [], []
    for t in range(eta.shape[0]):
        try:
            normalized.append(center_and_rescale(eta[t], w_group[t], w_ind[t], group))
            kept.append(t)
        except DegenerateDrawError as exc:
            logger.warning("dropping draw %d: %s", t, exc)
    if not normalized:
        raise DegenerateDrawError("every draw is degenerate")
    return normalized, np.asarray(kept, dtype=int)


def _initial_reference(etas: np.ndarray, rng) -> np.ndarray:
    T = etas.shape[0]
    idx = np.sort(rng.choice(T, size=min(REFERENCE_CANDIDATES, T), replace=False))
    totals = []
    for a in idx:
        totals.append(sum(align_signed_permutation(etas[b], etas[a])[1] for b in idx if b != a))
    return etas[idx[int(np.argmin(totals))]].copy()


def align_arrays(eta, w_group, w_ind, group, seed: int = 0) -> AlignedSamples:
    """Normalize and align stacked draws ``eta (T,S,H)``, ``w_group (T,J)``, ``w_ind (T,N,H)``."""
    eta = np.asarray(eta, dtype=float)
    normalized, kept = _normalize_all(eta, np.asarray(w_group, float), np.asarray(w_ind, float), group)
    etas = np.stack([d.eta_shared for d in normalized])
    w_g = np.stack([d.w_group for d in normalized])
    w_i = np.stack([d.w_ind for d in normalized])
    reference = _initial_reference(etas, np.random.default_rng(seed))
    perms = None
    passes = 0
    for passes in range(1, MAX_PASSES + 1):
        new = [align_signed_permutation(e, reference)[0] for e in etas]
        aligned = np.stack([sp.apply(e) for sp, e in zip(new, etas)])
        stable = perms is not None and new == perms
        perms = new
        if stable:
            break
        reference = np.median(aligned, axis=0)
    return AlignedSamples(
        eta_shared=aligned,
        w_group=w_g,
        w_ind=np.stack([sp.apply(w, signed=False) for sp, w in zip(perms, w_i)]),
        group=np.asarray(group, dtype=int),
        perm_log=perms,
        reference=reference,
        kept=kept,
        dropped=eta.shape[0] - kept.size,
        passes=passes,
    )


def align_chain(chain: Union[ChainOutput, AlignedSamples], seed: int = 0) -> AlignedSamples:
    """Normalize every draw and align all of them to a common reference.

    The initial reference is the draw (among up to 50 random ones) with the
    smallest summed alignment residual to the others; afterwards the
    reference is the element-wise median of the aligned draws, until no
    draw changes its permutation (at most 20 passes).
    """
    if isinstance(chain, AlignedSamples):
        return align_arrays(chain.eta_shared, chain.w_group, chain.w_ind, chain.group, seed)
    if not chain.constant_H:
        raise DomainError("draws must share one number of dimensions; freeze H before storing draws")
    group = chain.draws[0].group
    return align_arrays(chain.stack("eta"), chain.stack("w_group"), chain.stack("w_ind"), group, seed)


def merge_aligned(samples: Sequence[AlignedSamples]) -> AlignedSamples:
    """Pool separately aligned chains in the frame of the first chain's reference."""
    first = samples[0]
    etas, w_g, w_i, logs, kept = [first.eta_shared], [first.w_group], [first.w_ind], list(first.perm_log), [first.kept]
    for other in samples[1:]:
        sp, _ = align_signed_permutation(other.reference, first.reference)
        etas.append(sp.apply(other.eta_shared))
        w_g.append(other.w_group)
        w_i.append(sp.apply(other.w_ind, signed=False))
        logs.extend(p.then(sp) for p in other.perm_log)
        kept.append(other.kept)
    return AlignedSamples(
        eta_shared=np.concatenate(etas),
        w_group=np.concatenate(w_g),
        w_ind=np.concatenate(w_i),
        group=first.group,
        perm_log=logs,
        reference=first.reference,
        kept=np.concatenate(kept),
        dropped=sum(s.dropped for s in samples),
        passes=max(s.passes for s in samples),
    )


# ---------------------------------------------------------------------------
# Summaries


@dataclass
class Interval:
    median: np.ndarray
    lower: np.ndarray
    upper: np.ndarray


def interval(samples, level: float = 0.9, axis: int = 0) -> Interval:
    """Median and equal-tailed interval with linear interpolation between
    order statistics (``numpy.quantile`` ``method="linear"``, Hyndman-Fan type 7)."""
    samples = np.asarray(samples, dtype=float)
    if samples.shape[axis] == 0:
        raise DomainError("cannot summarize an empty sample")
    if not 0 < level < 1:
        raise DomainError("level must lie in (0, 1)")
    tail = (1.0 - level) / 2.0
    q = np.quantile(samples, [0.5, tail, 1.0 - tail], axis=axis, method="linear")
    return Interval(median=q[0], lower=q[1], upper=q[2])


@dataclass
class PosteriorSummary:
    level: float
    quantities: dict = field(default_factory=dict)

    def __getitem__(self, name) -> Interval:
        return self.quantities[name]


def group_distances(individual: np.ndarray, group) -> np.ndarray:
    """Within-group averages of per-draw individual distances, (T, J, P)."""
    group = np.asarray(group, dtype=int)
    J = int(group.max()) + 1
    return np.stack([individual[:, group == j].mean(axis=1) for j in range(J)], axis=1)


def summarize(aligned: Optional[AlignedSamples], chain: ChainOutput, level: float = 0.9) -> PosteriorSummary:
    """Medians and equal-tailed credible intervals of all reported quantities.

    Distances and noise variances come from the raw chain (they are
    identified without alignment); features and weights from ``aligned``.
    """
    if len(chain) == 0:
        raise DomainError("chain has no stored draws")
    out = PosteriorSummary(level=level)
    delta = chain.latent_distances()
    group = chain.draws[0].group
    out.quantities["individual_distance"] = interval(delta, level)
    out.quantities["group_distance"] = interval(group_distances(delta, group), level)
    out.quantities["sigma2"] = interval(np.stack([d.sigma2 for d in chain.draws]), level)
    post = chain.H_trace[chain.meta.get("burn_in", 0):]
    out.quantities["H"] = interval(post if post.size else chain.H_trace, level)
    if aligned is not None:
        out.quantities["shared_feature"] = interval(aligned.eta_shared, level)
        out.quantities["group_feature"] = interval(aligned.eta_group, level)
        out.quantities["individual_feature"] = interval(aligned.eta_ind, level)
        out.quantities["w_group"] = interval(aligned.w_group, level)
        out.quantities["w_ind"] = interval(aligned.w_ind, level)
    return out
