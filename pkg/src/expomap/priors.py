"""Prior images fed to the kernel and to the generative baseline.

Two priors are supported: a local image prior (LIP) that interpolates the
observed pixels with k-nearest-neighbor inverse-distance weighting, and a
random normal prior (RNP) of i.i.d. standard normal entries.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import EmptyObservation
from .grid import GridSpec, ObservationGrid

KIND_LIP = "LIP"
KIND_RNP = "RNP"

DEFAULT_LIP_K = 5
DEFAULT_LIP_POWER = 2.0


@dataclass
class PriorImage:
    """M x N prior image plus the parameters that produced it."""

    values: np.ndarray
    kind: str
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if not np.all(np.isfinite(self.values)):
            raise ValueError("prior image entries must be finite")

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape


def build_lip(
    obs: ObservationGrid,
    k: int = DEFAULT_LIP_K,
    power: float = DEFAULT_LIP_POWER,
) -> PriorImage:
    """Inverse-distance interpolation of the observed pixels.

    Observed pixels keep their values exactly. Every other pixel is the
    d^(-power)-weighted mean of its k nearest observed pixels (Euclidean
    distance in pixel units); with fewer than k observed pixels all of them
    are used. Distance ties at the k-th neighbor break toward the lower
    flat pixel index, so the result is deterministic.
    """
    if obs.n_observed == 0:
        raise EmptyObservation("LIP needs at least one observed pixel")
    obs_rc = np.argwhere(obs.mask)  # row-major sorted
    obs_vals = obs.values[obs.mask]
    k_eff = min(k, len(obs_vals))

    values = obs.values.copy()
    free = ~obs.mask
    if np.any(free):
        targets = np.argwhere(free)
        d2 = ((targets[:, None, :] - obs_rc[None, :, :]) ** 2).sum(axis=2)
        nearest = np.argsort(d2, axis=1, kind="stable")[:, :k_eff]
        dists = np.sqrt(np.take_along_axis(d2, nearest, axis=1).astype(np.float64))
        weights = dists ** (-power)
        values[free] = (weights * obs_vals[nearest]).sum(axis=1) / weights.sum(axis=1)

    return PriorImage(
        values=values,
        kind=KIND_LIP,
        provenance={"k": k, "power": power},
    )


def build_rnp(spec: GridSpec, seed: int) -> PriorImage:
    """I.i.d. standard normal prior, deterministic per (seed, rows, cols)."""
    rng = np.random.default_rng(seed)
    values = rng.standard_normal(spec.shape)
    return PriorImage(values=values, kind=KIND_RNP, provenance={"seed": seed})
