"""Metropolis-within-Gibbs sampler with adaptive feature dimension.

One iteration runs, in order:

1. Gibbs draw of the first MGP increment,
2. Gibbs draws of the remaining increments,
3. Gibbs draws of the MGP local precisions ``phi``,
4. random-walk Metropolis for each shared feature ``eta[s, h]`` (row-major),
5. random-walk Metropolis on ``log sigma2`` per group,
6. random-walk Metropolis on ``log w_ind`` per subject and dimension,
7. random-walk Metropolis on ``log w_group`` per group,

then the reconstruction error ``D(t)`` and, while dimension adaptation is
active, a birth/death move on the number of features.

Updates of conditionally independent scalars (weights of different subjects
for the same dimension, noise variances and weights of different groups) are
carried out as one vectorized step; this is the same transition as updating
them one at a time.
"""

from __future__ import annotations

import dataclasses
import logging
from dataclasses import dataclass, field
from typing import Optional, Union

import numpy as np

from . import model
from .errors import ConfigurationError, DomainError
from .model import DistanceDataset, Hyperparameters, ModelState

logger = logging.getLogger(__name__)

BLOCKS = ("eta", "sigma2", "w_ind", "w_group")


# ---------------------------------------------------------------------------
# Adaptive proposal scales


class ProposalAdaptState:
    """Batch-wise adaptation of random-walk scales (Roberts & Rosenthal).

    Every scalar has its own log proposal sd.  After each batch of
    ``batch_size`` attempts of a scalar its log sd moves by
    ``min(0.01, n**-0.5)`` (``n`` = batch number) up if the batch
    acceptance rate exceeded ``target`` and down otherwise.
    """

    def __init__(self, shapes: dict, init_scales: dict, batch_size: int = 50,
                 target: float = 0.44, adapt: bool = True):
        self.batch_size = int(batch_size)
        self.target = float(target)
        self.adapt = adapt
        self.log_scale = {k: np.full(shape, np.log(init_scales[k])) for k, shape in shapes.items()}
        self.batch_accept = {k: np.zeros(shape) for k, shape in shapes.items()}
        self.batch_attempt = {k: np.zeros(shape) for k, shape in shapes.items()}
        self.n_batches = {k: np.zeros(shape) for k, shape in shapes.items()}
        self.accept_count = {k: np.zeros(shape) for k, shape in shapes.items()}
        self.attempt_count = {k: np.zeros(shape) for k, shape in shapes.items()}

    def scale(self, block, idx):
        return np.exp(self.log_scale[block][idx])

    def record(self, block, idx, accepted):
        accepted = np.asarray(accepted, dtype=float)
        self.accept_count[block][idx] += accepted
        self.attempt_count[block][idx] += 1
        if not self.adapt:
            return
        acc = self.batch_accept[block]
        att = self.batch_attempt[block]
        acc[idx] += accepted
        att[idx] += 1
        full = att >= self.batch_size
        if full.any():
            nb = self.n_batches[block]
            nb[full] += 1
            step = np.minimum(0.01, nb[full] ** -0.5)
            rate = acc[full] / att[full]
            self.log_scale[block][full] += np.where(rate > self.target, step, -step)
            acc[full] = 0
            att[full] = 0

    def reset_counts(self):
        for k in self.accept_count:
            self.accept_count[k][...] = 0
            self.attempt_count[k][...] = 0

    def accept_rates(self) -> dict:
        out = {}
        for k in self.accept_count:
            with np.errstate(invalid="ignore", divide="ignore"):
                out[k] = self.accept_count[k] / self.attempt_count[k]
        return out


def make_adapt_state(data: DistanceDataset, hp: Hyperparameters, adapt: bool = True) -> ProposalAdaptState:
    shapes = {
        "eta": (data.S, hp.H_max),
        "sigma2": (data.J,),
        "w_ind": (data.N, hp.H_max),
        "w_group": (data.J,),
    }
    return ProposalAdaptState(shapes, hp.proposal_scale_init, hp.adapt_batch, hp.target_accept, adapt)


# ---------------------------------------------------------------------------
# Cached likelihood terms


class LikelihoodCache:
    """Current latent distances and per-entry log-likelihood terms."""

    def __init__(self, state: ModelState, data: DistanceDataset):
        self.refresh(state, data)

    def refresh(self, state: ModelState, data: DistanceDataset):
        self.dist = model.latent_distances(state)
        self.ll = model.likelihood_terms(data.d, self.dist, state.sigma2[data.group][:, None])


def _stimulus_pairs(S: int):
    """For each stimulus, the other stimuli and the pair columns they share."""
    out = []
    for s in range(S):
        others = np.array([r for r in range(S) if r != s], dtype=int)
        cols = np.array([model.pair_position(s, r) for r in others], dtype=int)
        out.append((others, cols))
    return out


def _group_sums(values: np.ndarray, group: np.ndarray, J: int) -> np.ndarray:
    return np.bincount(group, weights=values, minlength=J)


def _accept(log_ratio, rng):
    log_ratio = np.where(np.isnan(log_ratio), -np.inf, log_ratio)
    return np.log(rng.random(np.shape(log_ratio))) < log_ratio


# ---------------------------------------------------------------------------
# Conjugate (Gibbs) steps


def mgp_delta_conditional(state: ModelState, hp: Hyperparameters, h: int) -> tuple[float, float]:
    """Gamma (shape, rate) of the full conditional of ``mgp_delta[h]`` (0-based ``h``)."""
    H, S = state.H, state.S
    if not 0 <= h < H:
        raise DomainError(f"dimension {h} outside 0..{H - 1}")
    shape = (hp.a1 if h == 0 else hp.a2) + S * (H - h) / 2.0
    partial = state.mgp_delta.copy()
    partial[h] = 1.0
    tau_excl = np.cumprod(partial)
    col = np.sum(state.phi * state.eta**2, axis=0)
    rate = 1.0 + 0.5 * np.sum(tau_excl[h:] * col[h:])
    return shape, rate


def step_mgp_delta(state: ModelState, hp: Hyperparameters, h: int, rng) -> ModelState:
    shape, rate = mgp_delta_conditional(state, hp, h)
    state.mgp_delta[h] = rng.gamma(shape, 1.0 / rate)
    return state


def step_mgp_delta1(state: ModelState, hp: Hyperparameters, rng) -> ModelState:
    """Gibbs update of the first MGP increment."""
    return step_mgp_delta(state, hp, 0, rng)


def step_mgp_deltah(state: ModelState, hp: Hyperparameters, h: int, rng) -> ModelState:
    """Gibbs update of increment ``h`` (0-based, ``1 <= h < H``)."""
    if h < 1:
        raise DomainError("use step_mgp_delta1 for the first increment")
    return step_mgp_delta(state, hp, h, rng)


def phi_conditional(state: ModelState, hp: Hyperparameters):
    """Gamma (shape, rate array) of the full conditionals of all ``phi[s, h]``."""
    shape = (hp.nu + 1.0) / 2.0
    rate = (hp.nu + state.tau[None, :] * state.eta**2) / 2.0
    return shape, rate


def step_phi(state: ModelState, hp: Hyperparameters, s: int, h: int, rng) -> ModelState:
    shape, rate = phi_conditional(state, hp)
    state.phi[s, h] = rng.gamma(shape, 1.0 / rate[s, h])
    return state


def step_phi_all(state: ModelState, hp: Hyperparameters, rng) -> ModelState:
    shape, rate = phi_conditional(state, hp)
    state.phi[...] = rng.gamma(shape, 1.0 / rate)
    return state


# ---------------------------------------------------------------------------
# Metropolis steps


def step_eta(state, hp, data, adapt, s, h, rng, cache=None, use_likelihood=True,
             _pairs=None) -> ModelState:
    """Random-walk Metropolis update of ``eta[s, h]``.

    Only likelihood terms of pairs involving stimulus ``s`` enter the ratio.
    """
    current = state.eta[s, h]
    proposal = current + adapt.scale("eta", (s, h)) * rng.normal()
    precision = state.phi[s, h] * state.tau[h]
    log_ratio = -0.5 * precision * (proposal**2 - current**2)
    new_dist = new_ll = cols = None
    if use_likelihood:
        others, cols = (_pairs or _stimulus_pairs(state.S))[s]
        row = state.eta[s].copy()
        row[h] = proposal
        diff2 = (row[None, :] - state.eta[others]) ** 2
        scales2 = model.subject_scales(state) ** 2
        new_dist = np.sqrt(scales2 @ diff2.T)
        new_ll = model.likelihood_terms(data.d[:, cols], new_dist, state.sigma2[data.group][:, None])
        old_ll = cache.ll[:, cols] if cache is not None else model.likelihood_terms(
            data.d[:, cols], model.latent_distances(state)[:, cols], state.sigma2[data.group][:, None])
        log_ratio += np.sum(new_ll) - np.sum(old_ll)
    accepted = bool(_accept(log_ratio, rng))
    adapt.record("eta", (s, h), accepted)
    if accepted:
        state.eta[s, h] = proposal
        if cache is not None and use_likelihood:
            cache.dist[:, cols] = new_dist
            cache.ll[:, cols] = new_ll
    return state


def step_sigma2(state, hp, data, adapt, rng, j=None, cache=None, use_likelihood=True) -> ModelState:
    """Random-walk Metropolis on ``log sigma2``; all groups at once if ``j`` is None."""
    groups = np.arange(state.J) if j is None else np.atleast_1d(j)
    current = state.sigma2[groups]
    proposal = current * np.exp(adapt.scale("sigma2", groups) * rng.normal(size=groups.size))
    shape, scale = hp.noise_prior
    log_ratio = (model.invgamma_logpdf(proposal, shape[groups], scale[groups])
                 - model.invgamma_logpdf(current, shape[groups], scale[groups])
                 + np.log(proposal) - np.log(current))
    new_ll = None
    if use_likelihood:
        sig = state.sigma2.copy()
        sig[groups] = proposal
        dist = cache.dist if cache is not None else model.latent_distances(state)
        old_ll = cache.ll if cache is not None else model.likelihood_terms(
            data.d, dist, state.sigma2[data.group][:, None])
        new_ll = model.likelihood_terms(data.d, dist, sig[data.group][:, None])
        delta = _group_sums(new_ll.sum(axis=1) - old_ll.sum(axis=1), data.group, state.J)
        log_ratio = log_ratio + delta[groups]
    accepted = _accept(log_ratio, rng)
    adapt.record("sigma2", groups, accepted)
    state.sigma2[groups[accepted]] = proposal[accepted]
    if cache is not None and use_likelihood and accepted.any():
        rows = np.isin(data.group, groups[accepted])
        cache.ll[rows] = new_ll[rows]
    return state


def step_w_individual(state, hp, data, adapt, h, rng, subjects=None, cache=None,
                      use_likelihood=True) -> ModelState:
    """Random-walk Metropolis on ``log w_ind[k, h]`` for each subject ``k``.

    ``subjects`` are flat indices (default all); each uses its own terms only.
    """
    subjects = np.arange(state.group.size) if subjects is None else np.atleast_1d(subjects)
    current = state.w_ind[subjects, h]
    proposal = current * np.exp(adapt.scale("w_ind", (subjects, h)) * rng.normal(size=subjects.size))
    log_ratio = (model.log_weight_prior(proposal, hp.a_w, hp.b_w, hp.weight_prior)
                 - model.log_weight_prior(current, hp.a_w, hp.b_w, hp.weight_prior)
                 + np.log(proposal) - np.log(current))
    new_dist = new_ll = None
    if use_likelihood:
        rows, cols = model.pair_indices(state.S)
        diff2 = (state.eta[rows] - state.eta[cols]) ** 2
        scales = state.w_group[state.group[subjects]][:, None] * state.w_ind[subjects]
        scales[:, h] = state.w_group[state.group[subjects]] * proposal
        new_dist = np.sqrt(scales**2 @ diff2.T)
        sig = state.sigma2[state.group[subjects]][:, None]
        new_ll = model.likelihood_terms(data.d[subjects], new_dist, sig)
        if cache is not None:
            old_ll = cache.ll[subjects]
        else:
            old_ll = model.likelihood_terms(data.d[subjects], model.latent_distances(state)[subjects], sig)
        log_ratio = log_ratio + new_ll.sum(axis=1) - old_ll.sum(axis=1)
    accepted = _accept(log_ratio, rng)
    adapt.record("w_ind", (subjects, h), accepted)
    state.w_ind[subjects[accepted], h] = proposal[accepted]
    if cache is not None and use_likelihood and accepted.any():
        cache.dist[subjects[accepted]] = new_dist[accepted]
        cache.ll[subjects[accepted]] = new_ll[accepted]
    return state


def step_w_group(state, hp, data, adapt, rng, j=None, cache=None, use_likelihood=True) -> ModelState:
    """Random-walk Metropolis on ``log w_group``; all groups at once if ``j`` is None.

    Latent distances of every subject in a group scale linearly with its weight.
    """
    groups = np.arange(state.J) if j is None else np.atleast_1d(j)
    current = state.w_group[groups]
    proposal = current * np.exp(adapt.scale("w_group", groups) * rng.normal(size=groups.size))
    log_ratio = (model.log_weight_prior(proposal, hp.a_w, hp.b_w, hp.weight_prior)
                 - model.log_weight_prior(current, hp.a_w, hp.b_w, hp.weight_prior)
                 + np.log(proposal) - np.log(current))
    new_dist = new_ll = None
    if use_likelihood:
        factor = np.ones(state.J)
        factor[groups] = proposal / current
        dist = cache.dist if cache is not None else model.latent_distances(state)
        old_ll = cache.ll if cache is not None else model.likelihood_terms(
            data.d, dist, state.sigma2[data.group][:, None])
        new_dist = dist * factor[data.group][:, None]
        new_ll = model.likelihood_terms(data.d, new_dist, state.sigma2[data.group][:, None])
        delta = _group_sums(new_ll.sum(axis=1) - old_ll.sum(axis=1), data.group, state.J)
        log_ratio = log_ratio + delta[groups]
    accepted = _accept(log_ratio, rng)
    adapt.record("w_group", groups, accepted)
    state.w_group[groups[accepted]] = proposal[accepted]
    if cache is not None and use_likelihood and accepted.any():
        rows = np.isin(data.group, groups[accepted])
        cache.dist[rows] = new_dist[rows]
        cache.ll[rows] = new_ll[rows]
    return state


# ---------------------------------------------------------------------------
# Dimension adaptation


def reconstruction_error(state: ModelState, data: DistanceDataset, normalization: str = "subject",
                         dist: Optional[np.ndarray] = None) -> float:
    """Relative Frobenius error between observed and latent distance matrices.

    ``subject``: mean over subjects of ``||D_obs - Delta|| / ||D_obs||``.
    ``global``: mean of ``||D_obs - Delta||`` over mean of ``||D_obs||``.
    Full symmetric matrices count each pair twice, which cancels in the ratio.
    """
    if dist is None:
        dist = model.latent_distances(state)
    num = np.sqrt(np.sum((data.d - dist) ** 2, axis=1))
    den = np.sqrt(np.sum(data.d**2, axis=1))
    if np.any(den == 0):
        raise DomainError("observed distance matrix is identically zero")
    if normalization == "subject":
        return float(np.mean(num / den))
    if normalization == "global":
        return float(np.mean(num) / np.mean(den))
    raise ConfigurationError(f"unknown normalization {normalization!r}")


def add_dimension(state: ModelState, hp: Hyperparameters, rng) -> ModelState:
    """Append one dimension with all its parameters drawn from the prior."""
    tau_prev = state.tau[-1] if state.H else 1.0
    shape = hp.a1 if state.H == 0 else hp.a2
    eta, phi, delta, w = model.sample_column(state.S, state.group.size, tau_prev, shape, hp, rng)
    return dataclasses.replace(
        state,
        eta=np.column_stack([state.eta, eta]),
        phi=np.column_stack([state.phi, phi]),
        mgp_delta=np.append(state.mgp_delta, delta),
        w_ind=np.column_stack([state.w_ind, w]),
    )


def drop_dimension(state: ModelState) -> ModelState:
    """Remove the last (highest-index) dimension."""
    return dataclasses.replace(
        state,
        eta=state.eta[:, :-1].copy(),
        phi=state.phi[:, :-1].copy(),
        mgp_delta=state.mgp_delta[:-1].copy(),
        w_ind=state.w_ind[:, :-1].copy(),
    )


def adaptation_probability(hp: Hyperparameters, t: int) -> float:
    return float(min(1.0, np.exp(hp.alpha0 + hp.alpha1 * t)))


def adapt_dimension(state: ModelState, hp: Hyperparameters, D: float, t: int, rng) -> ModelState:
    """With probability ``exp(alpha0 + alpha1 t)`` grow (``D > D_T``) or shrink by one."""
    if rng.random() >= adaptation_probability(hp, t):
        return state
    if D > hp.D_T:
        if state.H < hp.H_max:
            return add_dimension(state, hp, rng)
    elif state.H > 1:
        return drop_dimension(state)
    return state


def lower_median(values) -> int:
    values = np.sort(np.asarray(values))
    return int(values[(values.size - 1) // 2])


# ---------------------------------------------------------------------------
# Initialization


def classical_mds(D: np.ndarray, H: int) -> np.ndarray:
    """Torgerson classical scaling of a symmetric distance matrix, (S, H)."""
    S = D.shape[0]
    C = np.eye(S) - np.full((S, S), 1.0 / S)
    B = -0.5 * C @ (D**2) @ C
    evals, evecs = np.linalg.eigh(B)
    order = np.argsort(evals)[::-1][:H]
    evals = np.maximum(evals[order], 1e-6 * max(evals.max(), 1e-12))
    X = evecs[:, order] * np.sqrt(evals)
    # deterministic sign: largest-magnitude entry of each column positive
    signs = np.sign(X[np.argmax(np.abs(X), axis=0), np.arange(X.shape[1])])
    return X * np.where(signs == 0, 1.0, signs)


def _residual_sigma2(state: ModelState, data: DistanceDataset) -> np.ndarray:
    resid = (data.d - model.latent_distances(state)) ** 2
    out = _group_sums(resid.mean(axis=1), data.group, data.J) / data.n
    floor = 1e-6 * np.mean(data.d) ** 2
    return np.maximum(out, floor)


def initial_state(data: DistanceDataset, hp: Hyperparameters, scheme: Union[str, ModelState, dict],
                  rng) -> ModelState:
    """Starting state for a chain.

    Schemes
    -------
    ``"prior"``
        shared features from the MGP prior, all weights 1.
    ``"cmds"`` / ``"cmds:<j>"``
        classical scaling of the average distance matrix over all subjects
        (or over group ``j``), all weights 1.
    ``ModelState`` or ``dict``
        user-supplied values (e.g. loaded from an external INDSCAL fit);
        missing entries fall back to the ``"prior"`` scheme's values.
    """
    H = hp.H_init
    ones_w = np.ones((data.N, H))
    if isinstance(scheme, ModelState):
        state = scheme.copy()
        if state.S != data.S or state.group.size != data.N or state.J != data.J:
            raise ConfigurationError("initial state does not match the dataset")
        if state.H > hp.H_max:
            raise ConfigurationError(f"initial state has H={state.H} > H_max={hp.H_max}")
        return state
    if isinstance(scheme, dict):
        eta = np.asarray(scheme["eta"], dtype=float)
        H = eta.shape[1]
        if eta.shape[0] != data.S or H > hp.H_max:
            raise ConfigurationError(f"initial eta has shape {eta.shape}")
        state = ModelState(
            eta=eta,
            w_group=np.asarray(scheme.get("w_group", np.ones(data.J)), dtype=float),
            w_ind=np.asarray(scheme.get("w_ind", np.ones((data.N, H))), dtype=float),
            phi=np.asarray(scheme.get("phi", np.ones((data.S, H))), dtype=float),
            mgp_delta=np.asarray(scheme.get("mgp_delta", np.ones(H)), dtype=float),
            sigma2=np.ones(data.J),
            group=data.group,
        )
        if "sigma2" in scheme:
            state.sigma2 = np.asarray(scheme["sigma2"], dtype=float).reshape(data.J)
        else:
            state.sigma2 = _residual_sigma2(state, data)
        return state
    if scheme == "prior":
        prior = model.sample_prior(data.S, data.group, H, hp, rng)
        state = dataclasses.replace(prior, w_group=np.ones(data.J), w_ind=ones_w)
    elif isinstance(scheme, str) and scheme.startswith("cmds"):
        _, _, which = scheme.partition(":")
        rows = slice(None) if which in ("", "all") else data.subjects(int(which))
        mean = model.to_matrix(data.d[rows].mean(axis=0), data.S)
        eta = classical_mds(mean, H)
        state = ModelState(eta=eta, w_group=np.ones(data.J), w_ind=ones_w, phi=np.ones((data.S, H)),
                           mgp_delta=np.ones(H), sigma2=np.ones(data.J), group=data.group)
    else:
        raise ConfigurationError(f"unknown initialization scheme {scheme!r}")
    state.sigma2 = _residual_sigma2(state, data)
    return state


# ---------------------------------------------------------------------------
# Chain driver


@dataclass
class Schedule:
    n_iter: int = 100_000
    burn_in: int = 4_000
    thin: int = 10
    freeze_H_after: Optional[int] = None  # defaults to burn_in

    def __post_init__(self):
        if self.freeze_H_after is None:
            self.freeze_H_after = self.burn_in
        if self.n_iter <= 0 or self.thin <= 0 or self.burn_in < 0 or self.freeze_H_after < 0:
            raise ConfigurationError("schedule values must be positive")
        if self.burn_in >= self.n_iter:
            raise ConfigurationError("burn_in must be smaller than n_iter")

    @property
    def n_draws(self) -> int:
        return (self.n_iter - self.burn_in) // self.thin


@dataclass
class ChainOutput:
    """Stored draws and traces of one chain."""

    draws: list
    iterations: np.ndarray
    H_trace: np.ndarray
    D_trace: np.ndarray
    accept_rates: dict
    meta: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.draws)

    @property
    def constant_H(self) -> bool:
        return len({d.H for d in self.draws}) <= 1

    def stack(self, name: str) -> np.ndarray:
        """Array of one state field across draws, shape (T, ...); needs constant H."""
        if not self.constant_H:
            raise DomainError("draws have varying numbers of dimensions")
        return np.stack([getattr(d, name) for d in self.draws])

    def latent_distances(self) -> np.ndarray:
        """Individual latent distances per draw, shape (T, N, P)."""
        return np.stack([model.latent_distances(d) for d in self.draws])


class Sampler:
    """Transition kernel bound to one dataset; owns the caches of a running chain."""

    def __init__(self, data: DistanceDataset, hp: Hyperparameters, state: ModelState, rng,
                 adapt: Optional[ProposalAdaptState] = None, use_likelihood: bool = True,
                 adapt_proposals: bool = True):
        self.data = data
        self.hp = hp
        self.rng = rng
        self.state = state.copy()
        self.use_likelihood = use_likelihood
        self.adapt = adapt or make_adapt_state(data, hp, adapt=adapt_proposals)
        self._pairs = _stimulus_pairs(data.S)
        self.cache = LikelihoodCache(self.state, data) if use_likelihood else None

    def set_data(self, data: DistanceDataset):
        self.data = data
        if self.use_likelihood:
            self.cache.refresh(self.state, data)

    def set_state(self, state: ModelState):
        self.state = state
        if self.use_likelihood:
            self.cache.refresh(state, self.data)

    def sweep(self) -> ModelState:
        st, hp, data, rng, adapt, cache = self.state, self.hp, self.data, self.rng, self.adapt, self.cache
        lik = self.use_likelihood
        step_mgp_delta1(st, hp, rng)
        for h in range(1, st.H):
            step_mgp_deltah(st, hp, h, rng)
        step_phi_all(st, hp, rng)
        for s in range(st.S):
            for h in range(st.H):
                step_eta(st, hp, data, adapt, s, h, rng, cache, lik, self._pairs)
        step_sigma2(st, hp, data, adapt, rng, cache=cache, use_likelihood=lik)
        for h in range(st.H):
            step_w_individual(st, hp, data, adapt, h, rng, cache=cache, use_likelihood=lik)
        step_w_group(st, hp, data, adapt, rng, cache=cache, use_likelihood=lik)
        return st

    def error(self) -> float:
        dist = self.cache.dist if self.cache is not None else None
        return reconstruction_error(self.state, self.data, self.hp.error_normalization, dist)

    def resize(self, H: int):
        """Grow or shrink to ``H`` dimensions (prior births, last-index deaths)."""
        st = self.state
        while st.H < H:
            st = add_dimension(st, self.hp, self.rng)
        while st.H > H:
            st = drop_dimension(st)
        self.set_state(st)


def run_chain(data: DistanceDataset, hp: Hyperparameters, init: Union[str, ModelState, dict] = "prior",
              schedule: Optional[Schedule] = None, seed: Optional[int] = None,
              use_likelihood: bool = True, adapt_proposals: bool = True,
              adapt_dimensions: bool = True) -> ChainOutput:
    """Run one chain and return thinned post-burn-in draws.

    Dimension moves happen while ``t < freeze_H_after``; at that point ``H``
    is set to the (lower) median of the trace so far and kept fixed.  The run
    is a deterministic function of the seed (``hp.seed`` unless given).
    """
    schedule = schedule or Schedule()
    hp = hp.resolve(data)
    seed = hp.seed if seed is None else seed
    rng = np.random.default_rng(seed)
    state = initial_state(data, hp, init, rng)
    sampler = Sampler(data, hp, state, rng, use_likelihood=use_likelihood, adapt_proposals=adapt_proposals)
    freeze = schedule.freeze_H_after if (adapt_dimensions and use_likelihood) else 0

    H_trace = np.empty(schedule.n_iter, dtype=int)
    D_trace = np.empty(schedule.n_iter)
    draws, iterations = [], []
    frozen_H = None
    for t in range(schedule.n_iter):
        if t == freeze and freeze > 0:
            frozen_H = lower_median(H_trace[:t])
            if frozen_H != sampler.state.H:
                sampler.resize(frozen_H)
        if t == schedule.burn_in:
            sampler.adapt.reset_counts()
        sampler.sweep()
        D = sampler.error()
        if t < freeze:
            new = adapt_dimension(sampler.state, hp, D, t, rng)
            if new is not sampler.state:
                sampler.set_state(new)
                D = sampler.error()
        H_trace[t] = sampler.state.H
        D_trace[t] = D
        if t >= schedule.burn_in and (t - schedule.burn_in + 1) % schedule.thin == 0:
            draws.append(sampler.state.copy())
            iterations.append(t)
    if frozen_H is None:
        frozen_H = sampler.state.H

    meta = {
        "seed": int(seed),
        "n_iter": schedule.n_iter,
        "burn_in": schedule.burn_in,
        "thin": schedule.thin,
        "freeze_H_after": int(freeze),
        "frozen_H": int(frozen_H),
        "init": init if isinstance(init, str) else "user",
        "use_likelihood": use_likelihood,
        "hyperparameters": hp.to_dict(),
    }
    return ChainOutput(
        draws=draws,
        iterations=np.asarray(iterations, dtype=int),
        H_trace=H_trace,
        D_trace=D_trace,
        accept_rates=sampler.adapt.accept_rates(),
        meta=meta,
    )
