"""Convergence and mixing diagnostics for multiple chains."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy import linalg

from .errors import DomainError

PSRF_FLOOR = 0.99
PSRF_THRESHOLD = 1.1
MIN_DRAWS = 10


def _as_chains(chains, ndim: int, min_chains: int = 2) -> np.ndarray:
    x = np.asarray(chains, dtype=float)
    if x.ndim != ndim:
        raise DomainError(f"expected an array with {ndim} dimensions, got shape {x.shape}")
    if x.shape[0] < min_chains:
        raise DomainError(f"at least {min_chains} chains are required")
    if x.shape[1] < MIN_DRAWS:
        raise DomainError(f"at least {MIN_DRAWS} draws per chain are required")
    return x


def psrf(chains) -> float:
    """Univariate potential scale reduction factor.

    With ``m`` chains of length ``n``, ``W`` the mean within-chain variance
    and ``B/n`` the variance of the chain means::

        V = (n - 1)/n * W + (m + 1)/m * B/n
        R = sqrt(V / W)

    i.e. the original Gelman-Rubin estimator without the degrees-of-freedom
    correction.  Returns ``inf`` when ``W == 0 < B`` and 1 when both vanish.
    """
    x = _as_chains(chains, 2)
    m, n = x.shape
    W = x.var(axis=1, ddof=1).mean()
    B_n = x.mean(axis=1).var(ddof=1)
    if W == 0:
        return 1.0 if B_n == 0 else float("inf")
    V = (n - 1) / n * W + (m + 1) / m * B_n
    return float(np.sqrt(V / W))


def mpsrf(chains) -> float:
    """Multivariate PSRF (Brooks-Gelman), chains of shape (m, n, p).

    ``R = sqrt((n - 1)/n + (m + 1)/m * lambda_max)`` where ``lambda_max`` is
    the largest eigenvalue of ``W^-1 B/n``.  Components with zero within-chain
    variance are dropped if they are also constant across chains; otherwise
    the result is ``inf``.
    """
    x = _as_chains(chains, 3)
    m, n, p = x.shape
    within_sd = x.std(axis=1, ddof=1).max(axis=0)
    between_sd = x.mean(axis=1).std(axis=0, ddof=1)
    dead = within_sd == 0
    if np.any(dead & (between_sd > 0)):
        return float("inf")
    x = x[:, :, ~dead]
    if x.shape[2] == 0:
        return 1.0
    centered = x - x.mean(axis=1, keepdims=True)
    W = np.einsum("cti,ctj->ij", centered, centered) / (m * (n - 1))
    means = x.mean(axis=1)
    B_n = np.cov(means, rowvar=False, ddof=1).reshape(x.shape[2], x.shape[2])
    try:
        lam = linalg.eigh(B_n, W, eigvals_only=True)[-1]
    except linalg.LinAlgError:
        # singular W: fall back to a pseudo-inverse
        lam = np.max(np.real(np.linalg.eigvals(np.linalg.pinv(W) @ B_n)))
    return float(np.sqrt((n - 1) / n + (m + 1) / m * max(lam, 0.0)))


def autocorrelation(x) -> np.ndarray:
    """Sample autocorrelations at every lag (FFT, biased normalization)."""
    x = np.asarray(x, dtype=float)
    n = x.size
    y = x - x.mean()
    size = 1 << int(np.ceil(np.log2(2 * n)))
    f = np.fft.rfft(y, size)
    acov = np.fft.irfft(f * np.conj(f), size)[:n] / n
    return acov / acov[0]


def ess(series) -> tuple[float, bool]:
    """Effective sample size with Geyer's initial monotone sequence.

    Sums of adjacent autocorrelation pairs ``rho_{2k} + rho_{2k+1}`` are
    accumulated while positive and forced to be non-increasing.  The result
    is capped at ``n``.  Returns ``(ess, zero_variance)``; a constant series
    yields ``(n, True)``.
    """
    x = np.asarray(series, dtype=float).reshape(-1)
    n = x.size
    if n < MIN_DRAWS:
        raise DomainError(f"at least {MIN_DRAWS} draws are required")
    if np.all(x == x[0]):
        return float(n), True
    rho = autocorrelation(x)
    pairs = rho[: 2 * (n // 2)].reshape(-1, 2).sum(axis=1)
    positive = pairs > 0
    k = int(np.argmin(positive)) if not positive.all() else pairs.size
    gamma = np.minimum.accumulate(pairs[:k])
    tau = -1.0 + 2.0 * gamma.sum()
    return float(min(n, n / tau)) if tau > 0 else float(n), False


@dataclass
class DiagnosticsReport:
    psrf: dict
    mpsrf: float
    ess: dict
    accept_rates: dict
    flags: list
    zero_variance: list = field(default_factory=list)
    threshold: float = PSRF_THRESHOLD
    n_chains: int = 0
    n_draws: int = 0

    @property
    def ok(self) -> bool:
        return not self.flags

    def to_dict(self) -> dict:
        return _jsonable(asdict(self))

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def to_text(self) -> str:
        lines = [f"chains: {self.n_chains}  draws per chain: {self.n_draws}",
                 f"multivariate PSRF: {self.mpsrf:.4f}",
                 f"{'quantity':<28}{'PSRF':>10}{'ESS':>12}"]
        for name in self.ess:
            lines.append(f"{name:<28}{self.psrf.get(name, float('nan')):>10.4f}{self.ess[name]:>12.1f}")
        for block, rates in self.accept_rates.items():
            r = np.asarray(rates, dtype=float)
            r = r[np.isfinite(r)]
            if r.size:
                lines.append(f"accept {block:<21}min {r.min():.3f}  max {r.max():.3f}")
        lines.append("flags: " + (", ".join(self.flags) if self.flags else "none"))
        return "\n".join(lines) + "\n"


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, (np.floating, float)):
        v = float(obj)
        return v if np.isfinite(v) else str(v)
    if isinstance(obj, np.integer):
        return int(obj)
    return obj


def diagnose(series: dict, vector: Optional[np.ndarray] = None, accept_rates: Optional[dict] = None,
             threshold: float = PSRF_THRESHOLD) -> DiagnosticsReport:
    """Diagnostics for named scalar series of shape (m, n).

    ``vector`` (m, n, p) feeds the multivariate PSRF.  Reported PSRF values
    are floored at 0.99; quantities above ``threshold`` are flagged.  With a
    single chain only effective sample sizes are computed.
    """
    psrfs, esss, flags, zero = {}, {}, [], []
    m = n = 0
    for name, x in series.items():
        x = _as_chains(x, 2, min_chains=1)
        m, n = x.shape
        pooled = [ess(chain) for chain in x]
        esss[name] = float(sum(e for e, _ in pooled))
        if all(z for _, z in pooled):
            zero.append(name)
        if m < 2:
            continue
        r = max(psrf(x), PSRF_FLOOR)
        psrfs[name] = r
        if not r < threshold:
            flags.append(name)
    multi = vector is not None and np.shape(vector)[0] >= 2
    R = max(mpsrf(vector), PSRF_FLOOR) if multi else float("nan")
    if multi and not R < threshold:
        flags.append("mpsrf")
    return DiagnosticsReport(psrf=psrfs, mpsrf=R, ess=esss, accept_rates=accept_rates or {}, flags=flags,
                             zero_variance=zero, threshold=threshold, n_chains=m, n_draws=n)


def diagnose_chains(chains: Sequence, threshold: float = PSRF_THRESHOLD) -> DiagnosticsReport:
    """Default tracked quantities of raw chains: every latent distance, the
    noise variances and H.  Features are not identified before alignment and
    are left out.
    """
    if not chains:
        raise DomainError("no chains given")
    T = min(len(c) for c in chains)
    delta = np.stack([c.latent_distances()[:T] for c in chains])  # (m, T, N, P)
    m, _, N, P = delta.shape
    series = {}
    for k in range(N):
        for p in range(P):
            series[f"delta[{k},{p}]"] = delta[:, :, k, p]
    sigma2 = np.stack([np.stack([d.sigma2 for d in c.draws[:T]]) for c in chains])
    for j in range(sigma2.shape[2]):
        series[f"sigma2[{j}]"] = sigma2[:, :, j]
    H = np.stack([np.array([d.H for d in c.draws[:T]], dtype=float) for c in chains])
    series["H"] = H
    rates = {}
    for block in chains[0].accept_rates:
        rates[block] = np.stack([np.asarray(c.accept_rates[block], dtype=float) for c in chains]).tolist()
    return diagnose(series, vector=delta.reshape(m, T, N * P), accept_rates=rates, threshold=threshold)
