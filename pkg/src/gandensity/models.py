"""Latent prior, generator, discriminator and Q-network built on :mod:`gandensity.nn`."""

from __future__ import annotations

import math
import os
from dataclasses import dataclass

import numpy as np

from . import nn
from .nn import NetworkSpec, ParameterSet, ShapeError

LOG_2PI = math.log(2.0 * math.pi)


@dataclass(frozen=True)
class LatentPrior:
    """Standard normal N(0, I) over ``dim`` latent coordinates."""

    dim: int

    def __post_init__(self):
        if int(self.dim) < 1:
            raise ValueError(f"latent dimension must be positive, got {self.dim}")


def sample_latent(prior: LatentPrior, rng, count: int | None = None) -> np.ndarray:
    """Draw one latent vector ``(n,)`` or a batch ``(count, n)``.

    ``rng`` is a :class:`numpy.random.Generator` or an integer seed; the
    caller owns the RNG state.
    """
    rng = np.random.default_rng(rng)
    if count is None:
        return rng.standard_normal(prior.dim)
    return rng.standard_normal((count, prior.dim))


def log_prior_density(prior: LatentPrior, z) -> np.ndarray | float:
    """``-(n/2) log(2 pi) - |z|^2 / 2`` for a vector or each row of a batch."""
    z = np.asarray(z, dtype=np.float64)
    if z.shape[-1] != prior.dim:
        raise ShapeError(f"latent vector has length {z.shape[-1]}, prior dim is {prior.dim}")
    out = -0.5 * prior.dim * LOG_2PI - 0.5 * np.sum(z * z, axis=-1)
    return float(out) if z.ndim == 1 else out


@dataclass
class Generator:
    prior: LatentPrior
    spec: NetworkSpec
    params: ParameterSet

    def __post_init__(self):
        if self.spec.input_dim != self.prior.dim:
            raise ShapeError(f"generator input dim {self.spec.input_dim} != prior dim {self.prior.dim}")
        if self.output_dim < self.prior.dim:
            raise ShapeError(f"generator output dim {self.output_dim} is smaller than latent "
                             f"dim {self.prior.dim}; the image manifold cannot be injective")
        self.params.check(self.spec)

    @property
    def output_dim(self) -> int:
        return self.spec.output_dim

    @property
    def latent_dim(self) -> int:
        return self.prior.dim

    def __call__(self, z) -> np.ndarray:
        return generate(self, z)


def generate(gen: Generator, z) -> np.ndarray:
    z = np.asarray(z, dtype=np.float64)
    if z.shape[-1] != gen.prior.dim:
        raise ShapeError(f"latent vector has length {z.shape[-1]}, generator expects {gen.prior.dim}")
    return nn.predict(gen.spec, gen.params, z)


@dataclass
class Discriminator:
    """Maps data vectors to one real-valued logit.

    ``feature_layer`` indexes the layer whose post-activation feeds the
    Q-network; ``None`` means the penultimate layer.
    """

    spec: NetworkSpec
    params: ParameterSet
    feature_layer: int | None = None

    def __post_init__(self):
        if self.spec.output_dim != 1:
            raise ShapeError("discriminator must end in a single logit")
        if len(self.spec.layers) < 2 and self.feature_layer is None:
            raise ShapeError("discriminator needs a hidden layer to expose features")
        self.params.check(self.spec)

    @property
    def feature_index(self) -> int:
        idx = len(self.spec.layers) - 2 if self.feature_layer is None else self.feature_layer
        if not 0 <= idx < len(self.spec.layers) - 1:
            raise ShapeError(f"feature layer {idx} is not a hidden layer")
        return idx

    @property
    def feature_dim(self) -> int:
        return self.spec.layers[self.feature_index].out_dim

    def logits(self, x) -> np.ndarray:
        return nn.predict(self.spec, self.params, x)[..., 0]

    def features(self, x) -> np.ndarray:
        _, trace = nn.forward(self.spec, self.params, x)
        return trace.post[self.feature_index]


@dataclass
class QNetwork:
    """Reconstructs the latent code from discriminator features."""

    spec: NetworkSpec
    params: ParameterSet

    def __post_init__(self):
        self.params.check(self.spec)

    def __call__(self, features) -> np.ndarray:
        return nn.predict(self.spec, self.params, features)


def make_generator(latent_dim: int, output_dim: int, hidden=(64, 64), activation="tanh",
                   output_activation="identity", seed: int = 0) -> Generator:
    spec = NetworkSpec.mlp(latent_dim, hidden, output_dim, activation, output_activation)
    return Generator(LatentPrior(latent_dim), spec, nn.init_parameters(spec, seed))


def make_discriminator(input_dim: int, hidden=(64, 64), slope=0.2, seed: int = 0,
                       feature_layer: int | None = None) -> Discriminator:
    spec = NetworkSpec.mlp(input_dim, hidden, 1, "leaky_relu", "identity", slope)
    return Discriminator(spec, nn.init_parameters(spec, seed), feature_layer)


def make_q_network(disc: Discriminator, latent_dim: int, hidden=(64,), slope=0.2,
                   seed: int = 0) -> QNetwork:
    spec = NetworkSpec.mlp(disc.feature_dim, hidden, latent_dim, "leaky_relu", "identity", slope)
    return QNetwork(spec, nn.init_parameters(spec, seed))


def affine_generator(a, b=None) -> Generator:
    """Single identity-activation layer ``z -> A z + b``; handy for closed-form checks."""
    a = np.atleast_2d(np.asarray(a, dtype=np.float64))
    m, n = a.shape
    b = np.zeros(m) if b is None else np.asarray(b, dtype=np.float64)
    spec = NetworkSpec(n, (nn.LayerSpec(m, "identity"),))
    return Generator(LatentPrior(n), spec, ParameterSet([a.copy()], [b.copy()]))


# -- model-set checkpoints --------------------------------------------------

GENERATOR_FILE = "generator.bin"
DISCRIMINATOR_FILE = "discriminator.bin"
Q_FILE = "q_network.bin"


def save_models(directory, gen: Generator, disc: Discriminator | None = None,
                q: QNetwork | None = None) -> None:
    os.makedirs(directory, exist_ok=True)
    nn.save_parameters(os.path.join(directory, GENERATOR_FILE), gen.spec, gen.params, "generator")
    if disc is not None:
        role = "discriminator" if disc.feature_layer is None else f"discriminator:{disc.feature_layer}"
        nn.save_parameters(os.path.join(directory, DISCRIMINATOR_FILE), disc.spec, disc.params, role)
    if q is not None:
        nn.save_parameters(os.path.join(directory, Q_FILE), q.spec, q.params, "q")


def _load_role(path, expected: str):
    spec, params, role = nn.load_parameters(path)
    if role.split(":")[0] != expected:
        raise nn.CheckpointError(f"{path} holds a {role!r} network, expected {expected!r}")
    return spec, params, role


def load_generator(directory) -> Generator:
    spec, params, _ = _load_role(os.path.join(directory, GENERATOR_FILE), "generator")
    return Generator(LatentPrior(spec.input_dim), spec, params)


def load_models(directory) -> tuple[Generator, Discriminator | None, QNetwork | None]:
    gen = load_generator(directory)
    disc = q = None
    path = os.path.join(directory, DISCRIMINATOR_FILE)
    if os.path.exists(path):
        spec, params, role = _load_role(path, "discriminator")
        feature_layer = int(role.split(":")[1]) if ":" in role else None
        disc = Discriminator(spec, params, feature_layer)
    path = os.path.join(directory, Q_FILE)
    if os.path.exists(path):
        spec, params, _ = _load_role(path, "q")
        q = QNetwork(spec, params)
    return gen, disc, q
