"""Density estimation in latent space.

Each generated point is labelled with the prior log-density of the latent code
that produced it, leaving out the generator's volume term. A regressor
trained on these labels scores arbitrary data vectors.
"""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass

import numpy as np

from .density import TripletSet
from .models import Discriminator, LatentPrior, QNetwork, log_prior_density
from .training import REGRESSOR_CONFIG, Regressor, TrainingConfig, train_regressor

log = logging.getLogger(__name__)


class IllPosedLabelsWarning(UserWarning):
    """Identical inputs carry different targets, so no regressor can fit them."""


@dataclass(frozen=True)
class LatentDensityLabel:
    x: np.ndarray
    log_pz: float


@dataclass
class LatentLabels:
    x: np.ndarray
    log_pz: np.ndarray

    def __len__(self) -> int:
        return self.x.shape[0]

    def __getitem__(self, i) -> LatentDensityLabel:
        return LatentDensityLabel(self.x[i], float(self.log_pz[i]))

    def __iter__(self):
        return (self[i] for i in range(len(self)))


def latent_labels_from_triplets(triplets: TripletSet, prior: LatentPrior) -> LatentLabels:
    """Pair every generated point with ``log p(z)`` of its own latent code."""
    return LatentLabels(triplets.x.copy(), np.atleast_1d(log_prior_density(prior, triplets.z)))


@dataclass(frozen=True)
class LabelDiagnostics:
    duplicate_groups: int
    max_target_spread: float
    ill_posed: bool


def label_diagnostics(x, y, tol: float = 1e-9) -> LabelDiagnostics:
    """Look for repeated inputs whose targets disagree by more than ``tol``."""
    x = np.ascontiguousarray(np.asarray(x, dtype=np.float64))
    y = np.asarray(y, dtype=np.float64)
    _, inverse, counts = np.unique(x, axis=0, return_inverse=True, return_counts=True)
    inverse = inverse.reshape(-1)
    lo = np.full(counts.shape[0], np.inf)
    hi = np.full(counts.shape[0], -np.inf)
    np.minimum.at(lo, inverse, y)
    np.maximum.at(hi, inverse, y)
    spread = np.where(counts > 1, hi - lo, 0.0)
    worst = float(spread.max()) if spread.size else 0.0
    return LabelDiagnostics(int(np.count_nonzero(counts > 1)), worst, worst > tol)


def train_latent_regressor(labels: LatentLabels, config: TrainingConfig = REGRESSOR_CONFIG,
                           hidden=(128, 128)) -> Regressor:
    """Image -> predicted ``log p(z)``; same network and loss as the pixel regressor.

    Warns with :class:`IllPosedLabelsWarning` when identical images carry
    different latent labels (e.g. a generator that ignores its input).
    """
    diag = label_diagnostics(labels.x, labels.log_pz)
    if diag.ill_posed:
        warnings.warn(f"{diag.duplicate_groups} repeated inputs with target spread up to "
                      f"{diag.max_target_spread:.3g}; latent labels are not a function of the image",
                      IllPosedLabelsWarning, stacklevel=2)
    return train_regressor(labels.x, labels.log_pz, config, hidden)


def q_latent_log_density(disc: Discriminator, q: QNetwork, prior: LatentPrior, x) -> np.ndarray:
    """Alternative scorer: prior log-density of the Q-network's latent reconstruction."""
    return np.atleast_1d(log_prior_density(prior, q(disc.features(x))))
