"""Adam, the adversarial / InfoGAN / L2 losses, and the training loops."""

from __future__ import annotations

import csv
import logging
import time
from dataclasses import dataclass, field, replace

import numpy as np

from . import nn
from .models import (Discriminator, Generator, QNetwork, make_discriminator,
                     make_generator, make_q_network)
from .nn import NetworkSpec, ParameterSet, ShapeError

log = logging.getLogger(__name__)

LOSS_VARIANTS = ("minimax", "non_saturating")


class NonFiniteGradientError(FloatingPointError):
    pass


class TrainingDivergedError(FloatingPointError):
    """A loss went non-finite; ``result`` holds the last finite state."""

    def __init__(self, message, result=None):
        super().__init__(message)
        self.result = result


@dataclass(frozen=True)
class TrainingConfig:
    learning_rate: float = 2e-4
    beta1: float = 0.5
    beta2: float = 0.999
    epsilon: float = 1e-8
    batch_size: int = 64
    epochs: int = 1
    max_steps: int | None = None
    lambda_mi: float = 1.0
    seed: int = 0
    loss_variant: str = "non_saturating"
    d_steps: int = 1

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")
        for name in ("beta1", "beta2"):
            if not 0.0 < getattr(self, name) < 1.0:
                raise ValueError(f"{name} must lie in (0, 1)")
        if not self.epsilon > 0:
            raise ValueError("epsilon must be positive")
        if self.batch_size < 1 or self.epochs < 1 or self.d_steps < 1:
            raise ValueError("batch_size, epochs and d_steps must be positive")
        if self.max_steps is not None and self.max_steps < 1:
            raise ValueError("max_steps must be positive")
        if not self.lambda_mi >= 0:
            raise ValueError("lambda_mi must be nonnegative")
        if self.loss_variant not in LOSS_VARIANTS:
            raise ValueError(f"loss_variant must be one of {LOSS_VARIANTS}")


GAN_CONFIG = TrainingConfig()
REGRESSOR_CONFIG = TrainingConfig(learning_rate=1e-4, epochs=20, batch_size=64)


# -- Adam ------------------------------------------------------------------

@dataclass
class AdamState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    step: int = 0

    @classmethod
    def zeros(cls, params: ParameterSet) -> "AdamState":
        arrays = params.arrays()
        return cls([np.zeros_like(a) for a in arrays], [np.zeros_like(a) for a in arrays], 0)


def _rebuild(template: ParameterSet, arrays: list[np.ndarray]) -> ParameterSet:
    return ParameterSet(arrays[0::2], arrays[1::2])


def adam_step(params: ParameterSet, grads: ParameterSet, state: AdamState,
              config: TrainingConfig) -> tuple[ParameterSet, AdamState]:
    """One bias-corrected Adam update. Inputs are not modified."""
    p_arrays, g_arrays = params.arrays(), grads.arrays()
    if len(p_arrays) != len(g_arrays) or len(p_arrays) != len(state.m):
        raise ShapeError("parameters, gradients and optimizer state are not congruent")
    for p, g in zip(p_arrays, g_arrays):
        if p.shape != g.shape:
            raise ShapeError(f"gradient shape {g.shape} != parameter shape {p.shape}")
        if not np.all(np.isfinite(g)):
            raise NonFiniteGradientError(f"non-finite gradient at optimizer step {state.step + 1}")

    b1, b2 = config.beta1, config.beta2
    t = state.step + 1
    step_size = config.learning_rate / (1.0 - b1 ** t)
    bc2 = 1.0 - b2 ** t
    new_p, new_m, new_v = [], [], []
    for p, g, m, v in zip(p_arrays, g_arrays, state.m, state.v):
        m = b1 * m + (1.0 - b1) * g
        v = b2 * v + (1.0 - b2) * (g * g)
        new_p.append(p - step_size * m / (np.sqrt(v / bc2) + config.epsilon))
        new_m.append(m)
        new_v.append(v)
    return _rebuild(params, new_p), AdamState(new_m, new_v, t)


# -- losses ----------------------------------------------------------------

def log_sigmoid(x):
    return -np.logaddexp(0.0, -x)


def sigmoid(x):
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def _discriminator_loss(real_logits, fake_logits):
    """Value and logit gradients of -E log s(D(x)) - E log(1 - s(D(G(z))))."""
    loss = -np.mean(log_sigmoid(real_logits)) - np.mean(log_sigmoid(-fake_logits))
    d_real = -sigmoid(-real_logits) / real_logits.shape[0]
    d_fake = sigmoid(fake_logits) / fake_logits.shape[0]
    return float(loss), d_real, d_fake


def _generator_loss(fake_logits, variant):
    b = fake_logits.shape[0]
    if variant == "minimax":
        return float(np.mean(log_sigmoid(-fake_logits))), -sigmoid(fake_logits) / b
    if variant == "non_saturating":
        return float(-np.mean(log_sigmoid(fake_logits))), -sigmoid(-fake_logits) / b
    raise ValueError(f"unknown loss variant {variant!r}")


def _check_batches(real_batch, z_batch):
    if real_batch is not None and len(real_batch) == 0:
        raise ValueError("empty real batch")
    if len(z_batch) == 0:
        raise ValueError("empty latent batch")


def gan_losses(disc: Discriminator, gen: Generator, real_batch, z_batch,
               variant: str = "non_saturating") -> tuple[float, float]:
    """Discriminator and generator losses computed from logits."""
    _check_batches(real_batch, z_batch)
    real_logits = disc.logits(np.asarray(real_batch, dtype=np.float64))
    fake_logits = disc.logits(gen(np.asarray(z_batch, dtype=np.float64)))
    d_loss, _, _ = _discriminator_loss(real_logits, fake_logits)
    g_loss, _ = _generator_loss(fake_logits, variant)
    return d_loss, g_loss


def discriminator_gradients(disc: Discriminator, gen: Generator, real_batch,
                            z_batch) -> tuple[float, ParameterSet]:
    _check_batches(real_batch, z_batch)
    fake = gen(np.asarray(z_batch, dtype=np.float64))
    x = np.concatenate([np.asarray(real_batch, dtype=np.float64), fake])
    out, trace = nn.forward(disc.spec, disc.params, x)
    n_real = len(real_batch)
    loss, d_real, d_fake = _discriminator_loss(out[:n_real, 0], out[n_real:, 0])
    _, grads = nn.backward(disc.spec, disc.params, trace, np.concatenate([d_real, d_fake])[:, None])
    return loss, grads


def infogan_loss(disc: Discriminator, gen: Generator, q: QNetwork, z_batch,
                 lambda_mi: float) -> float:
    """``lambda * mean_batch |Q(features(D(G(z)))) - z|^2``."""
    z = np.asarray(z_batch, dtype=np.float64)
    _check_batches(None, z)
    recon = q(disc.features(gen(z)))
    if recon.shape != z.shape:
        raise ShapeError(f"Q output shape {recon.shape} != latent shape {z.shape}")
    return float(lambda_mi * np.mean(np.sum((recon - z) ** 2, axis=1)))


@dataclass
class GeneratorStep:
    g_loss: float
    mi_penalty: float
    gen_grads: ParameterSet
    q_grads: ParameterSet | None


def generator_gradients(disc: Discriminator, gen: Generator, z_batch, variant: str,
                        q: QNetwork | None = None, lambda_mi: float = 0.0) -> GeneratorStep:
    """Gradients of the generator-side objective, optionally with the Q penalty.

    The penalty's gradient reaches G through the discriminator's lower layers;
    the discriminator parameters themselves are not updated here.
    """
    z = np.asarray(z_batch, dtype=np.float64)
    _check_batches(None, z)
    fake, g_trace = nn.forward(gen.spec, gen.params, z)
    logits, d_trace = nn.forward(disc.spec, disc.params, fake)
    g_loss, d_logits = _generator_loss(logits[:, 0], variant)
    dx, _ = nn.backward(disc.spec, disc.params, d_trace, d_logits[:, None])

    mi, q_grads = 0.0, None
    if q is not None:
        fidx = disc.feature_index
        recon, q_trace = nn.forward(q.spec, q.params, d_trace.post[fidx])
        if recon.shape != z.shape:
            raise ShapeError(f"Q output shape {recon.shape} != latent shape {z.shape}")
        diff = recon - z
        mi = float(lambda_mi * np.mean(np.sum(diff * diff, axis=1)))
        d_recon = (2.0 * lambda_mi / z.shape[0]) * diff
        d_feat, q_grads = nn.backward(q.spec, q.params, q_trace, d_recon)
        if lambda_mi != 0.0:
            dx_mi, _ = nn.backward(disc.spec, disc.params, d_trace, d_feat, from_layer=fidx)
            dx = dx + dx_mi

    _, gen_grads = nn.backward(gen.spec, gen.params, g_trace, dx)
    return GeneratorStep(g_loss, mi, gen_grads, q_grads)


# -- reports -----------------------------------------------------------------

@dataclass
class LossReport:
    steps: list[int] = field(default_factory=list)
    d_loss: list[float] = field(default_factory=list)
    g_loss: list[float] = field(default_factory=list)
    mi_penalty: list[float] = field(default_factory=list)
    timestamps: list[float] = field(default_factory=list)

    def append(self, step, d_loss, g_loss, mi):
        self.steps.append(step)
        self.d_loss.append(d_loss)
        self.g_loss.append(g_loss)
        self.mi_penalty.append(mi)
        self.timestamps.append(time.time())

    def __len__(self):
        return len(self.steps)

    def losses(self) -> np.ndarray:
        """``(steps, 3)`` array of d_loss, g_loss, mi_penalty; timestamps excluded."""
        return np.column_stack([self.d_loss, self.g_loss, self.mi_penalty])

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["step", "d_loss", "g_loss", "mi_penalty"])
            for row in zip(self.steps, self.d_loss, self.g_loss, self.mi_penalty):
                writer.writerow([row[0]] + [repr(float(v)) for v in row[1:]])


# -- GAN training --------------------------------------------------------------

@dataclass(frozen=True)
class GanArchitecture:
    latent_dim: int = 8
    gen_hidden: tuple[int, ...] = (64, 64)
    gen_activation: str = "tanh"
    gen_output_activation: str = "identity"
    disc_hidden: tuple[int, ...] = (64, 64)
    q_hidden: tuple[int, ...] = (64,)
    slope: float = 0.2


@dataclass
class GanResult:
    generator: Generator
    discriminator: Discriminator
    q: QNetwork | None
    report: LossReport
    steps: int = 0


def _iter_batches(data: np.ndarray, config: TrainingConfig, rng: np.random.Generator):
    count = data.shape[0]
    per_epoch = max(1, count // config.batch_size)
    step = 0
    for _ in range(config.epochs):
        order = rng.permutation(count)
        for k in range(per_epoch):
            if config.max_steps is not None and step >= config.max_steps:
                return
            idx = order[k * config.batch_size:(k + 1) * config.batch_size]
            yield data[idx]
            step += 1
    # max_steps may run past the nominal epoch budget
    while config.max_steps is not None and step < config.max_steps:
        order = rng.permutation(count)
        for k in range(per_epoch):
            if step >= config.max_steps:
                return
            yield data[order[k * config.batch_size:(k + 1) * config.batch_size]]
            step += 1


def train_gan(data, config: TrainingConfig = GAN_CONFIG, arch: GanArchitecture | None = None,
              with_q: bool = False, generator: Generator | None = None,
              discriminator: Discriminator | None = None, q: QNetwork | None = None) -> GanResult:
    """Alternate discriminator and generator Adam steps over ``data`` (rows are samples).

    Models are initialized from ``config.seed`` unless given. With ``with_q``
    a Q-network is trained jointly with G on the reconstruction penalty.
    Raises :class:`TrainingDivergedError` on a non-finite loss.
    """
    data = np.asarray(data, dtype=np.float64)
    if data.ndim != 2 or data.shape[0] == 0:
        raise ShapeError("training data must be a non-empty (count, dim) array")
    arch = arch or GanArchitecture()
    seeds = np.random.SeedSequence(config.seed).spawn(4)
    init = [int(s.generate_state(1)[0]) for s in seeds[:3]]
    gen = generator or make_generator(arch.latent_dim, data.shape[1], arch.gen_hidden,
                                      arch.gen_activation, arch.gen_output_activation, init[0])
    if gen.output_dim != data.shape[1]:
        raise ShapeError(f"data dim {data.shape[1]} != generator output dim {gen.output_dim}")
    disc = discriminator or make_discriminator(data.shape[1], arch.disc_hidden, arch.slope, init[1])
    if disc.spec.input_dim != data.shape[1]:
        raise ShapeError(f"data dim {data.shape[1]} != discriminator input dim {disc.spec.input_dim}")
    if with_q and q is None:
        q = make_q_network(disc, gen.latent_dim, arch.q_hidden, arch.slope, init[2])
    if not with_q:
        q = None

    rng = np.random.default_rng(seeds[3])
    g_state, d_state = AdamState.zeros(gen.params), AdamState.zeros(disc.params)
    q_state = AdamState.zeros(q.params) if q is not None else None
    report = LossReport()
    result = GanResult(gen, disc, q, report)
    batches = _iter_batches(data, config, rng)
    step = 0
    done = False
    while not done:
        d_loss = 0.0
        for _ in range(config.d_steps):
            real = next(batches, None)
            if real is None:
                done = True
                break
            z = rng.standard_normal((real.shape[0], gen.latent_dim))
            d_loss, d_grads = discriminator_gradients(disc, gen, real, z)
            if not np.isfinite(d_loss):
                raise TrainingDivergedError(f"discriminator loss non-finite at step {step}", result)
            new_params, d_state = adam_step(disc.params, d_grads, d_state, config)
            disc = replace(disc, params=new_params)
        if done:
            break
        z = rng.standard_normal((config.batch_size, gen.latent_dim))
        gs = generator_gradients(disc, gen, z, config.loss_variant, q, config.lambda_mi)
        if not (np.isfinite(gs.g_loss) and np.isfinite(gs.mi_penalty)):
            raise TrainingDivergedError(f"generator loss non-finite at step {step}", result)
        new_params, g_state = adam_step(gen.params, gs.gen_grads, g_state, config)
        gen = replace(gen, params=new_params)
        if q is not None:
            new_params, q_state = adam_step(q.params, gs.q_grads, q_state, config)
            q = replace(q, params=new_params)
        report.append(step, d_loss, gs.g_loss, gs.mi_penalty)
        step += 1
        result = GanResult(gen, disc, q, report, step)
    log.info("trained GAN for %d steps", step)
    return result


def discriminator_accuracy(disc: Discriminator, real, fake) -> float:
    """Fraction of real and fake points classified correctly at logit 0."""
    real_ok = disc.logits(real) > 0
    fake_ok = disc.logits(fake) <= 0
    return float((real_ok.sum() + fake_ok.sum()) / (len(real_ok) + len(fake_ok)))


# -- regression ----------------------------------------------------------------

@dataclass
class Regressor:
    """Network predicting a scalar log-density from a data vector."""

    spec: NetworkSpec
    params: ParameterSet

    def __call__(self, x) -> np.ndarray:
        return nn.predict(self.spec, self.params, x)[..., 0]

    @property
    def input_dim(self) -> int:
        return self.spec.input_dim


def regressor_spec(input_dim: int, hidden=(128, 128), slope: float = 0.2) -> NetworkSpec:
    return NetworkSpec.mlp(input_dim, hidden, 1, "leaky_relu", "identity", slope)


def _fold_normalization(spec, params, x_mean, x_std, y_mean, y_std) -> ParameterSet:
    """Absorb input standardization and target scaling into the first and last layers."""
    p = params.copy()
    w0 = p.weights[0] / x_std[None, :]
    p.biases[0] = p.biases[0] - w0 @ x_mean
    p.weights[0] = w0
    p.weights[-1] = p.weights[-1] * y_std
    p.biases[-1] = p.biases[-1] * y_std + y_mean
    return p


def train_regressor(inputs, targets, config: TrainingConfig = REGRESSOR_CONFIG,
                    hidden=(128, 128), slope: float = 0.2) -> Regressor:
    """Fit a leaky-ReLU MLP with a linear head under mean squared error.

    Inputs and targets are standardized during training; the affine maps are
    folded back into the weights, so the returned network consumes raw inputs
    and emits raw log-densities.
    """
    x = np.asarray(inputs, dtype=np.float64)
    y = np.asarray(targets, dtype=np.float64).reshape(-1)
    if x.ndim != 2 or x.shape[0] == 0:
        raise ShapeError("regressor inputs must be a non-empty (count, dim) array")
    if y.shape[0] != x.shape[0]:
        raise ShapeError(f"{x.shape[0]} inputs but {y.shape[0]} targets")
    if not np.all(np.isfinite(y)):
        raise ValueError("regression targets contain non-finite values")
    if not np.all(np.isfinite(x)):
        raise ValueError("regression inputs contain non-finite values")

    x_mean, x_std = x.mean(axis=0), x.std(axis=0)
    x_std = np.where(x_std > 1e-12, x_std, 1.0)
    y_mean, y_std = float(y.mean()), float(y.std())
    y_std = y_std if y_std > 1e-12 else 1.0
    xs = (x - x_mean) / x_std
    ys = ((y - y_mean) / y_std)[:, None]
    data = np.hstack([xs, ys])

    spec = regressor_spec(x.shape[1], hidden, slope)
    seeds = np.random.SeedSequence(config.seed).spawn(2)
    params = nn.init_parameters(spec, int(seeds[0].generate_state(1)[0]), std=1.0, fan_in=True)
    # zero head: an untrained regressor predicts the target mean
    params.weights[-1][:] = 0.0
    state = AdamState.zeros(params)
    rng = np.random.default_rng(seeds[1])
    d = x.shape[1]
    for batch in _iter_batches(data, config, rng):
        out, trace = nn.forward(spec, params, batch[:, :d])
        resid = out - batch[:, d:]
        _, grads = nn.backward(spec, params, trace, (2.0 / batch.shape[0]) * resid)
        params, state = adam_step(params, grads, state, config)
    return Regressor(spec, _fold_normalization(spec, params, x_mean, x_std, y_mean, y_std))


REGRESSOR_MODES = ("pixel", "latent")


def save_regressor(path, reg: Regressor, mode: str) -> None:
    if mode not in REGRESSOR_MODES:
        raise ValueError(f"mode must be one of {REGRESSOR_MODES}")
    nn.save_parameters(path, reg.spec, reg.params, f"regressor:{mode}")


def load_regressor(path) -> tuple[Regressor, str]:
    spec, params, role = nn.load_parameters(path)
    kind, _, mode = role.partition(":")
    if kind != "regressor" or mode not in REGRESSOR_MODES:
        raise nn.CheckpointError(f"{path} holds a {role!r} network, not a regressor")
    if spec.output_dim != 1:
        raise nn.CheckpointError(f"{path}: regressor must have a scalar output")
    return Regressor(spec, params), mode


def r_squared(y_true, y_pred) -> float:
    y_true = np.asarray(y_true, dtype=np.float64)
    y_pred = np.asarray(y_pred, dtype=np.float64)
    ss_res = np.sum((y_true - y_pred) ** 2)
    ss_tot = np.sum((y_true - y_true.mean()) ** 2)
    return float(1.0 - ss_res / ss_tot) if ss_tot > 0 else float("nan")
