"""Synthetic scenarios and the end-to-end fitting recipe shared by the demos and tests.

Three scenarios live on a curved 2-D sheet in R^3 (a paraboloid), so that
pixel-space density differs from intrinsic density by a position-dependent
area factor, as it does for real generators:

* ``tight_mode_scenario``: three diffuse clusters plus a tight cluster at
  their centroid (label 3).
* ``holdout_scenario``: the same mixture, with the tight cluster withheld
  from GAN training.
* ``cross_scenario``: one diffuse blob offset from the sheet's apex as the
  native set, and a tight foreign cluster sitting at the apex, where the
  sheet is flattest.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass

import numpy as np

from . import data, density, latent, training
from .data import Dataset, SmoothEmbedding, SyntheticMixtureSpec
from .models import Generator

log = logging.getLogger(__name__)

TIGHT_LABEL = 3


@dataclass(frozen=True)
class GanRecipe:
    latent_dim: int = 2
    hidden: tuple[int, ...] = (128, 128)
    steps: int = 20000
    batch_size: int = 128
    seed: int = 0
    with_q: bool = False
    lambda_mi: float = 1.0

    def config(self) -> training.TrainingConfig:
        return training.TrainingConfig(max_steps=self.steps, batch_size=self.batch_size,
                                       seed=self.seed, lambda_mi=self.lambda_mi)

    def architecture(self) -> training.GanArchitecture:
        return training.GanArchitecture(latent_dim=self.latent_dim, gen_hidden=self.hidden,
                                        disc_hidden=self.hidden)


@dataclass(frozen=True)
class RegressorRecipe:
    triplets: int = 20000
    heldout_fraction: float = 0.1
    epochs: int = 10
    hidden: tuple[int, ...] = (128, 128)
    seed: int = 1

    def config(self) -> training.TrainingConfig:
        return training.TrainingConfig(learning_rate=1e-4, epochs=self.epochs, batch_size=64,
                                       seed=self.seed)


@dataclass
class DensityModels:
    generator: Generator
    pixel: training.Regressor
    latent: training.Regressor
    triplets: density.TripletSet
    pixel_r2: float
    latent_r2: float
    seconds: float


def fit_regressors(gen: Generator, recipe: RegressorRecipe = RegressorRecipe(),
                   sample_seed: int = 5) -> DensityModels:
    """Sample triplets from ``gen`` and fit pixel and latent regressors on the same split."""
    t0 = time.perf_counter()
    triplets = density.sample_triplets(gen, recipe.triplets, sample_seed).usable()
    labels = latent.latent_labels_from_triplets(triplets, gen.prior)
    order = np.random.default_rng(recipe.seed).permutation(len(triplets))
    cut = int(round(recipe.heldout_fraction * len(triplets)))
    held, train = np.sort(order[:cut]), np.sort(order[cut:])
    cfg = recipe.config()
    pixel = training.train_regressor(triplets.x[train], triplets.log_px[train], cfg, recipe.hidden)
    lat = latent.train_latent_regressor(latent.LatentLabels(triplets.x[train], labels.log_pz[train]),
                                        cfg, recipe.hidden)
    pixel_r2 = training.r_squared(triplets.log_px[held], pixel(triplets.x[held]))
    latent_r2 = training.r_squared(labels.log_pz[held], lat(triplets.x[held]))
    return DensityModels(gen, pixel, lat, triplets, pixel_r2, latent_r2, time.perf_counter() - t0)


def fit_density_models(train_x, gan: GanRecipe = GanRecipe(),
                       regressor: RegressorRecipe = RegressorRecipe()) -> DensityModels:
    """Train a GAN on ``train_x``, then the two regressors on its triplets."""
    t0 = time.perf_counter()
    result = training.train_gan(train_x, gan.config(), gan.architecture(), with_q=gan.with_q)
    log.info("GAN trained in %.1fs", time.perf_counter() - t0)
    models = fit_regressors(result.generator, regressor)
    models.seconds += time.perf_counter() - t0
    return models


# -- scenarios -------------------------------------------------------------------------

def sheet(bend: float = 1.0, seed: int = 1) -> SmoothEmbedding:
    return SmoothEmbedding(2, 3, bend, seed)


def tight_mode_spec(radius: float = 1.5, bend: float = 1.0) -> SyntheticMixtureSpec:
    return data.tight_mode_mixture(dim=2, radius=radius, embedding=sheet(bend))


@dataclass
class Scenario:
    spec: SyntheticMixtureSpec
    train: Dataset
    evaluation: Dataset


def tight_mode_scenario(train_count: int = 20000, eval_count: int = 4000,
                        seed: int = 1) -> Scenario:
    spec = tight_mode_spec()
    return Scenario(spec, data.synth_mixture(spec, train_count, seed, "train"),
                    data.synth_mixture(spec, eval_count, seed + 1000, "eval"))


def holdout_scenario(train_count: int = 20000, eval_count: int = 4000, seed: int = 1) -> Scenario:
    """Train on the diffuse clusters only; evaluate on all four."""
    spec = tight_mode_spec()
    train_spec = data.diffuse_part(spec, drop=(TIGHT_LABEL,))
    return Scenario(spec, data.synth_mixture(train_spec, train_count, seed, "train"),
                    data.synth_mixture(spec, eval_count, seed + 1000, "eval"))


@dataclass
class CrossScenario:
    native_spec: SyntheticMixtureSpec
    foreign_spec: SyntheticMixtureSpec
    train: Dataset
    native: Dataset
    foreign: Dataset


def cross_scenario(offset: float = 1.5, bend: float = 2.0, train_count: int = 20000,
                   eval_count: int = 3000, foreign_count: int = 1000, seed: int = 1) -> CrossScenario:
    emb = sheet(bend)
    native = SyntheticMixtureSpec(((offset, 0.0),), (1.0,), (1.0,), emb)
    foreign = SyntheticMixtureSpec(((0.0, 0.0),), (0.05,), (1.0,), emb)
    return CrossScenario(native, foreign,
                         data.synth_mixture(native, train_count, seed, "native"),
                         data.synth_mixture(native, eval_count, seed + 1000, "native"),
                         data.synth_mixture(foreign, foreign_count, seed + 2000, "foreign"))


def manifold_log_density_truth(spec: SyntheticMixtureSpec, intrinsic_x) -> np.ndarray:
    """Exact density on the sheet: intrinsic mixture density over the area element."""
    out = spec.log_density(intrinsic_x)
    if spec.embedding is not None:
        out = out - spec.embedding.log_area_element(intrinsic_x)
    return out


def ambient_kde(reference, query, intrinsic_dim: int = 2) -> np.ndarray:
    """Isotropic-bandwidth Gaussian KDE in the ambient space.

    For points on a smooth sheet the isotropic kernel's normal direction only
    contributes a constant factor, so rankings follow the density on the
    sheet. The bandwidth is Silverman's rule at the intrinsic dimension with
    the mean per-coordinate spread.
    """
    reference = np.asarray(reference, dtype=np.float64)
    n = reference.shape[0]
    spread = float(np.mean(reference.std(axis=0, ddof=1)))
    h = spread * (4.0 / ((intrinsic_dim + 2) * n)) ** (1.0 / (intrinsic_dim + 4))
    return np.atleast_1d(data.kde_log_density(reference, np.full(reference.shape[1], h), query))
