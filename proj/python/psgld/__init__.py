"""Posterior sampling for Tweedie matrix factorisation models.

The heavy lifting lives in the compiled extension ``psgld._core``: block
partitioning, the PSGLD/LD/SGLD/Gibbs/DSGD chains, the ring-protocol
simulator, and the data ingestion helpers.
"""

from ._core import (
    Algorithm,
    ModelSpec,
    ObservationMatrix,
    StepSchedule,
    __version__,
    beta_divergence,
    dloglik_dmu,
    generate_synthetic,
    gradient_noise,
    holdout_split,
    ingest,
    log_posterior,
    rmse,
    run_chain,
    run_ring,
)

__all__ = [
    "Algorithm",
    "ModelSpec",
    "ObservationMatrix",
    "StepSchedule",
    "__version__",
    "beta_divergence",
    "dloglik_dmu",
    "generate_synthetic",
    "gradient_noise",
    "holdout_split",
    "ingest",
    "log_posterior",
    "rmse",
    "run_chain",
    "run_ring",
]
