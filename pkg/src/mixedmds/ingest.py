"""Building distance datasets from signals, files, or simulation."""

from __future__ import annotations

import csv
import io
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import model
from .errors import ConfigurationError, DegenerateDataError, ValidationError
from .model import DistanceDataset, Hyperparameters, ModelState

logger = logging.getLogger(__name__)

DISTANCE_COLUMNS = ("group", "subject", "s", "r", "d")


# ---------------------------------------------------------------------------
# Repeated-trial signals


@dataclass
class TrialSignals:
    """Repeated-trial time series per subject and stimulus.

    ``f`` has shape (N, S, M, T).  Trial counts may differ per cell: missing
    trials are NaN-padded and each cell needs at least two observed trials.
    """

    f: np.ndarray
    group: np.ndarray

    def __post_init__(self):
        self.f = np.asarray(self.f, dtype=float)
        self.group = np.asarray(self.group, dtype=int).reshape(-1)
        if self.f.ndim != 4:
            raise ValidationError(f"signals need shape (N, S, M, T), got {self.f.shape}")
        if self.group.size != self.f.shape[0]:
            raise ValidationError("one group label per subject required")
        present = ~np.isnan(self.f)
        # a trial is either fully observed or fully missing
        trial_present = present.all(axis=3)
        if np.any(present.any(axis=3) & ~trial_present):
            raise ValidationError("trials must be complete across time points")
        if np.any(np.isinf(self.f)):
            raise ValidationError("signals must be finite")
        counts = trial_present.sum(axis=2)
        bad = np.argwhere(counts < 2)
        if bad.size:
            raise ValidationError("every (subject, stimulus) cell needs at least 2 trials",
                                  rows=[tuple(map(int, b)) for b in bad])

    @property
    def trial_counts(self) -> np.ndarray:
        return (~np.isnan(self.f[..., 0])).sum(axis=2)


def preprocess_trials(signals: TrialSignals) -> np.ndarray:
    """Trial means divided by the stimulus-averaged trial standard deviation.

    Returns the rescaled mean signals, shape (N, S, T).
    """
    f = signals.f
    M = signals.trial_counts[..., None]  # (N, S, 1)
    mean = np.nansum(f, axis=2) / M
    sse = np.nansum((f - mean[:, :, None, :]) ** 2, axis=2)
    sd = np.sqrt(sse / (M - 1))
    dispersion = sd.mean(axis=1)  # (N, T)
    zero = np.argwhere(dispersion == 0)
    if zero.size:
        i, t = zero[0]
        raise DegenerateDataError(f"zero trial dispersion for subject {i} at time {t}")
    return mean / dispersion[:, None, :]


def distances_from_signals(rescaled: np.ndarray, group, S_labels=None) -> DistanceDataset:
    """Euclidean distances between rescaled mean signals of every stimulus pair."""
    rescaled = np.asarray(rescaled, dtype=float)
    N, S, _ = rescaled.shape
    rows, cols = model.pair_indices(S)
    d = np.sqrt(np.sum((rescaled[:, rows, :] - rescaled[:, cols, :]) ** 2, axis=2))
    zero = np.argwhere(d == 0)
    if zero.size:
        cells = [(int(k), int(rows[p]), int(cols[p])) for k, p in zero]
        raise DegenerateDataError(f"zero distance between stimulus signals (subject, s, r): {cells}")
    group = np.asarray(group, dtype=int)
    order = np.argsort(group, kind="stable")
    return DistanceDataset(d=d[order], group=group[order], S=S, stimulus_labels=S_labels)


def load_trial_signals(path) -> TrialSignals:
    """Read a ``.npy`` tensor (N, S, M, T) with a JSON sidecar ``<path>.json``.

    The sidecar holds ``{"group": [...], "shape": [N, S, M, T]}``.
    """
    path = Path(path)
    f = np.load(path)
    sidecar = json.loads(Path(str(path) + ".json").read_text())
    if "shape" in sidecar and tuple(sidecar["shape"]) != f.shape:
        raise ValidationError(f"sidecar shape {sidecar['shape']} does not match array {f.shape}")
    return TrialSignals(f=f, group=sidecar["group"])


# ---------------------------------------------------------------------------
# CSV long format


def read_distances_csv(source) -> DistanceDataset:
    """Read ``group,subject,s,r,d`` rows (1-based labels, any pair orientation).

    Raises ValidationError listing every offending row.
    """
    text = Path(source).read_text() if not hasattr(source, "read") else source.read()
    reader = csv.DictReader(io.StringIO(text))
    missing = [c for c in DISTANCE_COLUMNS if c not in (reader.fieldnames or [])]
    if missing:
        raise ValidationError(f"missing columns {missing}")
    records, bad = [], []
    for lineno, row in enumerate(reader, start=2):
        try:
            g, subj, s, r = (int(row[c]) for c in ("group", "subject", "s", "r"))
            d = float(row["d"])
        except (TypeError, ValueError):
            bad.append((lineno, "unparseable", dict(row)))
            continue
        if s == r:
            bad.append((lineno, "diagonal pair", dict(row)))
        elif not (np.isfinite(d) and d > 0):
            bad.append((lineno, "distance not finite and positive", dict(row)))
        elif min(s, r) < 1:
            bad.append((lineno, "stimulus index below 1", dict(row)))
        else:
            records.append((lineno, g, subj, max(s, r), min(s, r), d))
    if bad:
        raise ValidationError(f"{len(bad)} invalid rows", rows=bad)
    if not records:
        raise ValidationError("no distance rows")
    S = max(rec[3] for rec in records)
    groups = sorted({rec[1] for rec in records})
    subjects = {g: sorted({rec[2] for rec in records if rec[1] == g}) for g in groups}
    keys = [(g, s) for g in groups for s in subjects[g]]
    index = {k: n for n, k in enumerate(keys)}
    d = np.full((len(keys), model.n_pairs(S)), np.nan)
    seen = {}
    for lineno, g, subj, s, r, value in records:
        key = (index[(g, subj)], model.pair_position(s - 1, r - 1))
        if key in seen:
            bad.append((lineno, f"duplicate of row {seen[key]}", (g, subj, s, r)))
        seen[key] = lineno
        d[key] = value
    missing_cells = np.argwhere(np.isnan(d))
    rows, cols = model.pair_indices(S)
    for k, p in missing_cells:
        g, subj = keys[k]
        bad.append((None, "missing pair", (g, subj, int(rows[p]) + 1, int(cols[p]) + 1)))
    if bad:
        raise ValidationError(f"{len(bad)} invalid rows", rows=bad)
    group = np.array([groups.index(g) for g, _ in keys])
    return DistanceDataset(
        d=d, group=group, S=S,
        group_labels=[str(g) for g in groups],
        subject_labels=[f"{g}:{s}" for g, s in keys],
    )


def distance_rows(data: DistanceDataset):
    """Long-format rows ``(group, subject, s, r, d)`` with 1-based labels."""
    rows, cols = model.pair_indices(data.S)
    for k in range(data.N):
        j = int(data.group[k])
        i = k - data.start(j)
        for p in range(data.P):
            yield j + 1, i + 1, int(rows[p]) + 1, int(cols[p]) + 1, float(data.d[k, p])


def format_distances_csv(data: DistanceDataset) -> str:
    out = io.StringIO()
    writer = csv.writer(out, lineterminator="\n")
    writer.writerow(DISTANCE_COLUMNS)
    for g, i, s, r, d in distance_rows(data):
        writer.writerow([g, i, s, r, repr(d)])
    return out.getvalue()


# ---------------------------------------------------------------------------
# Synthetic data


@dataclass
class SyntheticSpec:
    """Design of a simulated study.

    Shared features are centered orthogonal columns with standard deviations
    ``feature_scales``;
    multiplicative weights have mean 1 and variances ``group_weight_var`` /
    ``ind_weight_var`` (priors on ``w**-2`` as in the model); observations
    are Gamma with the per-group ``noise_var``.
    """

    S: int = 4
    n: Sequence[int] = (14, 14)
    H_true: int = 3
    feature_scales: Sequence[float] = (1.0, 0.7, 0.4)
    eta: Optional[Sequence[Sequence[float]]] = None
    group_weight_var: float = 0.04
    ind_weight_var: float = 0.04
    noise_var: Sequence[float] = (0.005, 0.01)
    min_distance: float = 0.05
    seed: int = 1

    def __post_init__(self):
        self.n = tuple(int(x) for x in self.n)
        self.noise_var = tuple(float(x) for x in np.broadcast_to(self.noise_var, (len(self.n),)))
        self.feature_scales = tuple(float(x) for x in self.feature_scales)
        if self.S < 2 or not self.n or min(self.n) < 1 or self.H_true < 1:
            raise ConfigurationError("counts must be positive and S >= 2")
        if self.H_true >= self.S:
            raise ConfigurationError(f"H_true={self.H_true} must be below S={self.S}")
        if self.eta is None and len(self.feature_scales) < self.H_true:
            raise ConfigurationError("need one feature scale per true dimension")
        if min(self.noise_var) <= 0 or self.group_weight_var <= 0 or self.ind_weight_var <= 0:
            raise ConfigurationError("variances must be positive")

    @property
    def J(self) -> int:
        return len(self.n)

    @property
    def group(self) -> np.ndarray:
        return np.repeat(np.arange(self.J), self.n)


def _weights(rng, size, var):
    a, b = model.solve_weight_hyperparams(1.0, var)
    return rng.gamma(a, 1.0 / b, size=size) ** -0.5


def _orthogonal_features(rng, S, scales):
    """Centered, mutually orthogonal columns with standard deviations ``scales``.

    A plain Gaussian draw on few stimuli often leaves a column nearly
    constant, which makes that dimension unrecoverable.
    """
    x = rng.normal(size=(S, len(scales)))
    q, r = np.linalg.qr(x - x.mean(axis=0))
    q = q * np.sign(np.diag(r))
    return q * np.sqrt(S) * np.asarray(scales)


def generate_synthetic(spec: SyntheticSpec) -> tuple[DistanceDataset, ModelState]:
    """Simulate a dataset and return it with the generating state.

    The returned state carries the true features and weights; ``phi`` and
    ``mgp_delta`` are set to 1 (unused by the likelihood) and ``sigma2`` to
    the true noise variances.
    """
    rng = np.random.default_rng(spec.seed)
    group = spec.group
    for attempt in range(100):
        if spec.eta is not None:
            eta = np.asarray(spec.eta, dtype=float)
            if eta.shape != (spec.S, spec.H_true):
                raise ConfigurationError(f"eta must have shape {(spec.S, spec.H_true)}")
        else:
            eta = _orthogonal_features(rng, spec.S, spec.feature_scales[: spec.H_true])
        truth = ModelState(
            eta=eta,
            w_group=_weights(rng, spec.J, spec.group_weight_var),
            w_ind=_weights(rng, (group.size, spec.H_true), spec.ind_weight_var),
            phi=np.ones((spec.S, spec.H_true)),
            mgp_delta=np.ones(spec.H_true),
            sigma2=np.asarray(spec.noise_var, dtype=float),
            group=group,
        )
        if model.latent_distances(truth).min() > spec.min_distance:
            break
        if spec.eta is not None:
            raise ConfigurationError("supplied features give near-zero latent distances")
        logger.warning("degenerate synthetic configuration (attempt %d), redrawing features", attempt + 1)
    else:
        raise ConfigurationError("could not draw a non-degenerate configuration")
    d = model.simulate_distances(truth, rng)
    d = np.maximum(d, np.finfo(float).tiny)
    data = DistanceDataset(d=d, group=group, S=spec.S)
    return data, truth


def expected_relative_noise(data: DistanceDataset, sigma2) -> float:
    """Relative reconstruction error expected from noise alone (see
    :func:`model.relative_noise_level`)."""
    return model.relative_noise_level(data, sigma2)


def truth_record(truth: ModelState, data: DistanceDataset, spec: SyntheticSpec) -> dict:
    return {
        "spec": {k: (list(v) if isinstance(v, tuple) else v) for k, v in spec.__dict__.items()},
        "eta": truth.eta.tolist(),
        "w_group": truth.w_group.tolist(),
        "w_ind": truth.w_ind.tolist(),
        "sigma2": truth.sigma2.tolist(),
        "group": truth.group.tolist(),
        "latent_distances": model.latent_distances(truth).tolist(),
        "expected_relative_noise": expected_relative_noise(data, truth.sigma2),
    }
