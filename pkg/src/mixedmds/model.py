"""Probabilistic core of the mixed multidimensional scaling model.

Observed dissimilarities ``d`` for subject ``i`` of group ``j`` between stimuli
``s > r`` are Gamma distributed with mean equal to the latent distance and a
group-specific variance.  Latent distances are Euclidean distances between
individual feature vectors ``w_group[j] * w_ind[i, h] * eta[s, h]``.  Shared
features get a multiplicative gamma process (MGP) shrinkage prior, the
multiplicative weights get moment-matched priors on ``w**-2`` and the noise
variances get inverse-gamma priors.

Everything here is a pure function of its arguments.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from typing import Optional, Sequence, Union

import numpy as np
from scipy import optimize, special

from .errors import ConfigurationError, DomainError, ValidationError

# Latent distances below this make the Gamma mean degenerate.
DISTANCE_FLOOR = 1e-12

WEIGHT_PRIORS = ("gamma_inv_sq", "invgamma")
ERROR_NORMALIZATIONS = ("subject", "global")

DEFAULT_PROPOSAL_SCALES = {"eta": 0.05, "sigma2": 0.2, "w_ind": 0.1, "w_group": 0.05}


def pair_indices(S: int) -> tuple[np.ndarray, np.ndarray]:
    """Canonical lower-triangular pair order ``(s, r)`` with ``r < s``.

    Row-major over ``s``: (1,0), (2,0), (2,1), (3,0), ... (0-based).
    """
    return np.tril_indices(S, -1)


def n_pairs(S: int) -> int:
    return S * (S - 1) // 2


def pair_position(s: int, r: int) -> int:
    """Column of pair ``(s, r)`` in lower-triangular storage (symmetrized)."""
    if s == r:
        raise DomainError("diagonal pairs are not stored")
    if s < r:
        s, r = r, s
    return s * (s - 1) // 2 + r


@dataclass
class DistanceDataset:
    """Observed dissimilarities for every subject, stored lower-triangular.

    Parameters
    ----------
    d : (N, P) array
        ``d[k, p]`` is the dissimilarity of subject ``k`` for pair ``p`` in
        :func:`pair_indices` order, ``P = S(S-1)/2``.
    group : (N,) int array
        0-based group of each subject.  Subjects are stored group-major.
    S : int
        Number of stimuli.
    """

    d: np.ndarray
    group: np.ndarray
    S: int
    group_labels: Optional[list] = None
    subject_labels: Optional[list] = None
    stimulus_labels: Optional[list] = None

    def __post_init__(self):
        self.d = np.atleast_2d(np.asarray(self.d, dtype=float))
        self.group = np.asarray(self.group, dtype=int).reshape(-1)
        self.S = int(self.S)
        if self.S < 2:
            raise ValidationError(f"need at least 2 stimuli, got S={self.S}")
        if self.d.shape != (self.group.size, n_pairs(self.S)):
            raise ValidationError(
                f"d has shape {self.d.shape}, expected ({self.group.size}, {n_pairs(self.S)})"
            )
        if self.group.size == 0:
            raise ValidationError("dataset has no subjects")
        if np.any(np.diff(self.group) < 0):
            raise ValidationError("subjects must be ordered by group")
        J = int(self.group.max()) + 1
        counts = np.bincount(self.group, minlength=J)
        if self.group.min() < 0 or np.any(counts == 0):
            raise ValidationError(f"groups must be labelled 0..J-1 without gaps, got counts {counts}")
        bad = ~np.isfinite(self.d) | (self.d <= 0)
        if bad.any():
            rows, cols = pair_indices(self.S)
            offending = [
                (int(self.group[k]), int(k - self.start(int(self.group[k]))), int(rows[p]), int(cols[p]), float(self.d[k, p]))
                for k, p in zip(*np.nonzero(bad))
            ]
            raise ValidationError(
                f"{len(offending)} distances are not finite and positive", rows=offending
            )

    @property
    def N(self) -> int:
        return self.group.size

    @property
    def J(self) -> int:
        return int(self.group.max()) + 1

    @property
    def n(self) -> np.ndarray:
        """Subjects per group."""
        return np.bincount(self.group, minlength=self.J)

    @property
    def P(self) -> int:
        return n_pairs(self.S)

    def start(self, j: int) -> int:
        return int(np.searchsorted(self.group, j))

    def subjects(self, j: int) -> slice:
        lo = self.start(j)
        return slice(lo, lo + int(self.n[j]))

    def index(self, j: int, i: int) -> int:
        """Flat subject index of subject ``i`` (0-based) in group ``j``."""
        if not 0 <= i < self.n[j]:
            raise IndexError(f"group {j} has {self.n[j]} subjects")
        return self.start(j) + i

    def matrix(self, k: int) -> np.ndarray:
        """Full symmetric (S, S) matrix of subject ``k`` with zero diagonal."""
        return to_matrix(self.d[k], self.S)

    def value(self, j: int, i: int, s: int, r: int) -> float:
        return float(self.d[self.index(j, i), pair_position(s, r)])


def to_matrix(lower: np.ndarray, S: int) -> np.ndarray:
    out = np.zeros((S, S))
    rows, cols = pair_indices(S)
    out[rows, cols] = lower
    out[cols, rows] = lower
    return out


@dataclass
class ModelState:
    """One full configuration of the sampler.

    ``w_ind`` is stored flat over subjects, ``(N, H)``, with ``group`` giving
    each subject's group; weights are stored as ``w`` (not ``w**-2``).
    """

    eta: np.ndarray
    w_group: np.ndarray
    w_ind: np.ndarray
    phi: np.ndarray
    mgp_delta: np.ndarray
    sigma2: np.ndarray
    group: np.ndarray

    def __post_init__(self):
        self.eta = np.atleast_2d(np.asarray(self.eta, dtype=float))
        self.w_group = np.atleast_1d(np.asarray(self.w_group, dtype=float))
        self.w_ind = np.atleast_2d(np.asarray(self.w_ind, dtype=float))
        self.phi = np.atleast_2d(np.asarray(self.phi, dtype=float))
        self.mgp_delta = np.atleast_1d(np.asarray(self.mgp_delta, dtype=float))
        self.sigma2 = np.atleast_1d(np.asarray(self.sigma2, dtype=float))
        self.group = np.atleast_1d(np.asarray(self.group, dtype=int))
        S, H = self.eta.shape
        N = self.group.size
        expected = {
            "phi": (self.phi.shape, (S, H)),
            "w_ind": (self.w_ind.shape, (N, H)),
            "mgp_delta": (self.mgp_delta.shape, (H,)),
            "sigma2": (self.sigma2.shape, self.w_group.shape),
        }
        for name, (got, want) in expected.items():
            if got != want:
                raise ValueError(f"{name} has shape {got}, expected {want}")

    @property
    def S(self) -> int:
        return self.eta.shape[0]

    @property
    def H(self) -> int:
        return self.eta.shape[1]

    @property
    def J(self) -> int:
        return self.w_group.size

    @property
    def tau(self) -> np.ndarray:
        return mgp_tau(self.mgp_delta)

    def copy(self) -> "ModelState":
        return ModelState(
            **{f.name: np.array(getattr(self, f.name), copy=True) for f in dataclasses.fields(self)}
        )

    def is_valid(self) -> bool:
        positive = (self.w_group, self.w_ind, self.phi, self.mgp_delta, self.sigma2)
        return all(np.all(np.isfinite(a) & (a > 0)) for a in positive) and bool(
            np.all(np.isfinite(self.eta))
        )


@dataclass
class Hyperparameters:
    """Prior and tuning constants.

    Fields left as ``None`` are derived from the data by :meth:`resolve`:
    ``a_w``/``b_w`` from the weight moment targets, the noise-prior mean as
    ``noise_mean_factor`` times the per-group empirical variance of the
    distances (variance ``noise_var_factor`` times the squared mean), and
    ``H_max`` as ``S - 1``.
    """

    a1: float = 2.0
    a2: float = 3.0
    nu: float = 3.0
    weight_mean: float = 1.0
    weight_var: float = 10.0
    weight_prior: str = "gamma_inv_sq"
    a_w: Optional[float] = None
    b_w: Optional[float] = None
    mu_sigma2: Optional[Sequence[float]] = None
    var_sigma2: Optional[Sequence[float]] = None
    noise_mean_factor: float = 0.01
    noise_var_factor: float = 10.0
    D_T: Union[float, str] = 0.9
    alpha0: float = 0.0
    alpha1: float = -5e-4
    H_init: int = 2
    H_max: Optional[int] = None
    proposal_scale_init: dict = field(default_factory=lambda: dict(DEFAULT_PROPOSAL_SCALES))
    target_accept: float = 0.44
    adapt_batch: int = 50
    error_normalization: str = "subject"
    seed: int = 0

    def resolve(self, data: DistanceDataset) -> "Hyperparameters":
        """Fill data-dependent defaults and validate; returns a new object."""
        hp = dataclasses.replace(self, proposal_scale_init={**DEFAULT_PROPOSAL_SCALES, **self.proposal_scale_init})
        if hp.weight_prior not in WEIGHT_PRIORS:
            raise ConfigurationError(f"weight_prior must be one of {WEIGHT_PRIORS}")
        if hp.a_w is None or hp.b_w is None:
            if hp.weight_prior == "gamma_inv_sq":
                hp.a_w, hp.b_w = solve_weight_hyperparams(hp.weight_mean, hp.weight_var)
            else:
                hp.a_w, hp.b_w = invgamma_mean_var_to_shape_scale(hp.weight_mean, hp.weight_var)
        if hp.mu_sigma2 is None:
            mu = []
            for j in range(data.J):
                vals = data.d[data.subjects(j)].ravel()
                v = float(np.var(vals))
                v = v if v > 0 else (0.1 * float(np.mean(vals))) ** 2
                mu.append(hp.noise_mean_factor * v)
            hp.mu_sigma2 = mu
        hp.mu_sigma2 = [float(x) for x in np.broadcast_to(np.asarray(hp.mu_sigma2, float), (data.J,))]
        if hp.var_sigma2 is None:
            hp.var_sigma2 = [hp.noise_var_factor * m**2 for m in hp.mu_sigma2]
        hp.var_sigma2 = [float(x) for x in np.broadcast_to(np.asarray(hp.var_sigma2, float), (data.J,))]
        if hp.D_T == "auto":
            hp.D_T = relative_noise_level(data, hp.mu_sigma2)
        elif isinstance(hp.D_T, str):
            raise ConfigurationError(f"D_T must be a number or 'auto', got {hp.D_T!r}")
        if hp.H_max is None:
            hp.H_max = data.S - 1
        hp.validate(data.S)
        return hp

    def validate(self, S: Optional[int] = None):
        positive = {
            "a1": self.a1, "a2": self.a2, "nu": self.nu, "a_w": self.a_w, "b_w": self.b_w,
            "D_T": self.D_T, "H_init": self.H_init, "H_max": self.H_max,
            "target_accept": self.target_accept, "adapt_batch": self.adapt_batch,
        }
        for name, value in positive.items():
            if value is None or not value > 0:
                raise ConfigurationError(f"{name} must be positive, got {value}")
        for name in ("mu_sigma2", "var_sigma2"):
            if any(not x > 0 for x in getattr(self, name)):
                raise ConfigurationError(f"{name} must be positive")
        if any(not v > 0 for v in self.proposal_scale_init.values()):
            raise ConfigurationError("proposal scales must be positive")
        if not self.alpha1 < 0 or self.alpha0 < 0:
            raise ConfigurationError("need alpha0 >= 0 and alpha1 < 0")
        if self.H_init > self.H_max:
            raise ConfigurationError(f"H_init={self.H_init} exceeds H_max={self.H_max}")
        if S is not None and self.H_max >= S:
            raise ConfigurationError(f"H_max={self.H_max} must be below S={S}")
        if self.error_normalization not in ERROR_NORMALIZATIONS:
            raise ConfigurationError(f"error_normalization must be one of {ERROR_NORMALIZATIONS}")

    @property
    def noise_prior(self) -> tuple[np.ndarray, np.ndarray]:
        """Inverse-gamma (shape, scale) per group."""
        return invgamma_mean_var_to_shape_scale(np.asarray(self.mu_sigma2), np.asarray(self.var_sigma2))

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


def relative_noise_level(data: DistanceDataset, sigma2) -> float:
    """Mean over subjects of ``sqrt(P * sigma2_j) / ||d_k||``.

    The per-subject relative reconstruction error of the true latent
    distances concentrates near this value when ``sigma2`` is the noise
    variance, which makes it a natural scale for ``D_T``.
    """
    sigma2 = np.asarray(sigma2, dtype=float)[data.group]
    return float(np.mean(np.sqrt(data.P * sigma2) / np.sqrt(np.sum(data.d**2, axis=1))))


# ---------------------------------------------------------------------------
# Parameterizations


def gamma_mean_var_to_shape_rate(mean, var):
    """Gamma (shape, rate) with the given mean and variance."""
    mean = np.asarray(mean, dtype=float)
    var = np.asarray(var, dtype=float)
    if np.any(~(mean > 0)) or np.any(~(var > 0)):
        raise DomainError("Gamma mean and variance must be positive")
    shape = mean**2 / var
    rate = mean / var
    if shape.ndim == 0:
        return float(shape), float(rate)
    return shape, rate


def invgamma_mean_var_to_shape_scale(mean, var):
    """Inverse-gamma (shape, scale) with the given mean and variance.

    ``shape = mean**2/var + 2 > 2`` so both moments exist.
    """
    mean = np.asarray(mean, dtype=float)
    var = np.asarray(var, dtype=float)
    if np.any(~(mean > 0)) or np.any(~(var > 0)):
        raise DomainError("inverse-gamma mean and variance must be positive")
    shape = mean**2 / var + 2.0
    scale = mean * (shape - 1.0)
    if shape.ndim == 0:
        return float(shape), float(scale)
    return shape, scale


def weight_moments(a_w: float, b_w: float, kind: str = "gamma_inv_sq") -> tuple[float, float]:
    """Mean and variance of a weight under its prior (``inf`` when undefined)."""
    if kind == "gamma_inv_sq":
        # w**-2 ~ Gamma(a, rate=b)
        mean = np.sqrt(b_w) * np.exp(special.gammaln(a_w - 0.5) - special.gammaln(a_w)) if a_w > 0.5 else np.inf
        second = b_w / (a_w - 1.0) if a_w > 1 else np.inf
    elif kind == "invgamma":
        mean = b_w / (a_w - 1.0) if a_w > 1 else np.inf
        second = b_w**2 / ((a_w - 1.0) * (a_w - 2.0)) if a_w > 2 else np.inf
    else:
        raise ConfigurationError(f"unknown weight prior {kind!r}")
    return float(mean), float(second - mean**2)


def solve_weight_hyperparams(target_mean: float = 1.0, target_var: float = 10.0) -> tuple[float, float]:
    """Gamma(shape, rate) on ``w**-2`` giving ``w`` the requested mean and variance.

    With ``E[w] = sqrt(b) G(a - 1/2) / G(a)`` and ``E[w^2] = b / (a - 1)``
    the ratio ``E[w]^2 / E[w^2]`` depends on ``a`` only; it increases from 0
    to 1 on ``a > 1`` and is solved by bracketing, then ``b`` follows.
    """
    if not (target_mean > 0 and target_var > 0):
        raise DomainError("weight moment targets must be positive")
    target = target_mean**2 / (target_var + target_mean**2)

    def gap(log_excess):
        a = 1.0 + np.exp(log_excess)
        ratio = (a - 1.0) * np.exp(2.0 * (special.gammaln(a - 0.5) - special.gammaln(a)))
        return ratio - target

    lo, hi = -40.0, 1.0
    while gap(hi) < 0:
        hi += 5.0
        if hi > 60:
            raise ConfigurationError(f"no weight prior with a_w > 1 matches mean={target_mean}, var={target_var}")
    if gap(lo) > 0:
        raise ConfigurationError(f"no weight prior with a_w > 1 matches mean={target_mean}, var={target_var}")
    log_excess = optimize.brentq(gap, lo, hi, xtol=1e-14, rtol=1e-15, maxiter=500)
    a_w = 1.0 + np.exp(log_excess)
    b_w = (target_var + target_mean**2) * (a_w - 1.0)
    return float(a_w), float(b_w)


def mgp_tau(mgp_delta) -> np.ndarray:
    """Cumulative products of the MGP increments."""
    return np.cumprod(np.asarray(mgp_delta, dtype=float))


# ---------------------------------------------------------------------------
# Latent geometry


def subject_scales(state: ModelState) -> np.ndarray:
    """Combined multiplicative weight ``w_group[j] * w_ind[i, h]``, shape (N, H)."""
    return state.w_group[state.group][:, None] * state.w_ind


def individual_features(state: ModelState) -> np.ndarray:
    """Individual features ``w_ind * w_group * eta``, shape (N, S, H)."""
    return subject_scales(state)[:, None, :] * state.eta[None, :, :]


def latent_distances(state: ModelState) -> np.ndarray:
    """All latent distances in lower-triangular storage, shape (N, P)."""
    rows, cols = pair_indices(state.S)
    diff2 = (state.eta[rows] - state.eta[cols]) ** 2  # (P, H)
    return np.sqrt(subject_scales(state) ** 2 @ diff2.T)


def latent_distance(state: ModelState, j: int, i: int, s: int, r: int) -> float:
    """Latent distance between stimuli ``s`` and ``r`` for subject ``i`` of group ``j``.

    Indices are 0-based; ``i`` counts within group ``j``.
    """
    if s == r:
        raise DomainError("latent distance requested on the diagonal")
    k = int(np.flatnonzero(state.group == j)[i])
    x = individual_features(state)[k]
    return float(np.sqrt(np.sum((x[s] - x[r]) ** 2)))


# ---------------------------------------------------------------------------
# Densities


def gamma_logpdf(x, shape, rate):
    x = np.asarray(x, dtype=float)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = shape * np.log(rate) - special.gammaln(shape) + (shape - 1.0) * np.log(x) - rate * x
    return np.where((x > 0) & np.isfinite(out), out, -np.inf)


def invgamma_logpdf(x, shape, scale):
    x = np.asarray(x, dtype=float)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = shape * np.log(scale) - special.gammaln(shape) - (shape + 1.0) * np.log(x) - scale / x
    return np.where(x > 0, out, -np.inf)


def normal_logpdf(x, precision):
    x = np.asarray(x, dtype=float)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = 0.5 * (np.log(precision) - np.log(2.0 * np.pi)) - 0.5 * precision * x**2
    return np.where(precision > 0, out, -np.inf)


def likelihood_terms(d, delta, sigma2):
    """Gamma log-densities of ``d`` with mean ``delta`` and variance ``sigma2``.

    Broadcasts; entries with ``delta`` below :data:`DISTANCE_FLOOR` are ``-inf``.
    """
    delta = np.asarray(delta, dtype=float)
    sigma2 = np.asarray(sigma2, dtype=float)
    ok = (delta > DISTANCE_FLOOR) & (sigma2 > 0)
    safe = np.where(ok, delta, 1.0)
    shape = safe**2 / np.where(sigma2 > 0, sigma2, 1.0)
    rate = safe / np.where(sigma2 > 0, sigma2, 1.0)
    out = shape * np.log(rate) - special.gammaln(shape) + (shape - 1.0) * np.log(d) - rate * d
    return np.where(ok, out, -np.inf)


def log_likelihood(state: ModelState, data: DistanceDataset) -> float:
    """Sum of Gamma log-densities over all subjects and pairs."""
    terms = likelihood_terms(data.d, latent_distances(state), state.sigma2[data.group][:, None])
    return float(np.sum(terms))


def log_weight_prior(w, a_w: float, b_w: float, kind: str = "gamma_inv_sq"):
    """Log prior density of weights stored as ``w``.

    ``gamma_inv_sq``: ``w**-2 ~ Gamma(a_w, rate=b_w)``, with Jacobian ``2 w**-3``.
    ``invgamma``: ``w ~ Inv-Gamma(a_w, scale=b_w)``.
    """
    w = np.asarray(w, dtype=float)
    with np.errstate(divide="ignore", invalid="ignore"):
        if kind == "gamma_inv_sq":
            out = a_w * np.log(b_w) - special.gammaln(a_w) + np.log(2.0) - (2.0 * a_w + 1.0) * np.log(w) - b_w / w**2
        elif kind == "invgamma":
            out = a_w * np.log(b_w) - special.gammaln(a_w) - (a_w + 1.0) * np.log(w) - b_w / w
        else:
            raise ConfigurationError(f"unknown weight prior {kind!r}")
    return np.where(w > 0, out, -np.inf)


def mgp_shapes(H: int, hp: Hyperparameters) -> np.ndarray:
    shapes = np.full(H, float(hp.a2))
    if H:
        shapes[0] = hp.a1
    return shapes


def log_prior(state: ModelState, hp: Hyperparameters) -> float:
    """Joint log prior density of a state (``hp`` must be resolved)."""
    if not state.is_valid():
        return -np.inf
    tau = state.tau
    lp = np.sum(normal_logpdf(state.eta, state.phi * tau[None, :]))
    lp += np.sum(gamma_logpdf(state.phi, hp.nu / 2.0, hp.nu / 2.0))
    lp += np.sum(gamma_logpdf(state.mgp_delta, mgp_shapes(state.H, hp), 1.0))
    lp += np.sum(log_weight_prior(state.w_group, hp.a_w, hp.b_w, hp.weight_prior))
    lp += np.sum(log_weight_prior(state.w_ind, hp.a_w, hp.b_w, hp.weight_prior))
    shape, scale = hp.noise_prior
    lp += np.sum(invgamma_logpdf(state.sigma2, shape, scale))
    return float(lp)


def log_joint(state: ModelState, data: DistanceDataset, hp: Hyperparameters) -> float:
    lp = log_prior(state, hp)
    if lp == -np.inf:
        return lp
    return lp + log_likelihood(state, data)


# ---------------------------------------------------------------------------
# Prior simulation


def sample_weights(size, hp: Hyperparameters, rng: np.random.Generator) -> np.ndarray:
    if hp.weight_prior == "gamma_inv_sq":
        return rng.gamma(hp.a_w, 1.0 / hp.b_w, size=size) ** -0.5
    return 1.0 / rng.gamma(hp.a_w, 1.0 / hp.b_w, size=size)


def sample_column(S: int, N: int, tau_prev: float, shape: float, hp: Hyperparameters, rng):
    """Prior draw of one new dimension: (eta column, phi column, increment, w_ind column)."""
    delta = rng.gamma(shape, 1.0)
    phi = rng.gamma(hp.nu / 2.0, 2.0 / hp.nu, size=S)
    eta = rng.normal(size=S) / np.sqrt(phi * tau_prev * delta)
    w = sample_weights(N, hp, rng)
    return eta, phi, delta, w


def sample_prior(S: int, group, H: int, hp: Hyperparameters, rng: np.random.Generator) -> ModelState:
    """Draw a full state from the prior."""
    group = np.asarray(group, dtype=int)
    J = int(group.max()) + 1
    mgp_delta = rng.gamma(mgp_shapes(H, hp), 1.0)
    phi = rng.gamma(hp.nu / 2.0, 2.0 / hp.nu, size=(S, H))
    tau = mgp_tau(mgp_delta)
    eta = rng.normal(size=(S, H)) / np.sqrt(phi * tau[None, :])
    shape, scale = hp.noise_prior
    sigma2 = scale / rng.gamma(shape, 1.0, size=J)
    return ModelState(
        eta=eta,
        w_group=sample_weights(J, hp, rng),
        w_ind=sample_weights((group.size, H), hp, rng),
        phi=phi,
        mgp_delta=mgp_delta,
        sigma2=sigma2,
        group=group,
    )


def simulate_distances(state: ModelState, rng: np.random.Generator) -> np.ndarray:
    """Draw observed distances given a state, shape (N, P)."""
    delta = latent_distances(state)
    sigma2 = state.sigma2[state.group][:, None]
    shape = delta**2 / sigma2
    rate = delta / sigma2
    return rng.gamma(shape, 1.0 / rate)
