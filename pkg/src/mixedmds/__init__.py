"""Bayesian mixed multidimensional scaling.

Observed distances between stimuli are modeled per subject as Gamma
variables around latent Euclidean distances.  Subject and group features
are shared features rescaled by multiplicative weights, and a multiplicative
gamma process prior shrinks superfluous dimensions.
"""

__version__ = "0.1.0"

from .errors import (  # noqa: E402
    ConfigurationError,
    DegenerateDataError,
    DegenerateDrawError,
    DomainError,
    MissingArtifactError,
    MixedMDSError,
    ValidationError,
)
from .model import DistanceDataset, Hyperparameters, ModelState  # noqa: E402
from .sampler import ChainOutput, Schedule, run_chain  # noqa: E402
from .postprocess import AlignedSamples, PosteriorSummary, align_chain, summarize  # noqa: E402
from .diagnostics import DiagnosticsReport, diagnose_chains, ess, mpsrf, psrf  # noqa: E402
from .ingest import SyntheticSpec, generate_synthetic, read_distances_csv  # noqa: E402

__all__ = [
    "AlignedSamples", "ChainOutput", "ConfigurationError", "DegenerateDataError", "DegenerateDrawError",
    "DiagnosticsReport", "DistanceDataset", "DomainError", "Hyperparameters", "MissingArtifactError",
    "MixedMDSError", "ModelState", "PosteriorSummary", "Schedule", "SyntheticSpec", "ValidationError",
    "align_chain", "diagnose_chains", "ess", "generate_synthetic", "mpsrf", "psrf", "read_distances_csv",
    "run_chain", "summarize",
]
