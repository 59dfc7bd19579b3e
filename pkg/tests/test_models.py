import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gandensity import data, models, nn, training
from gandensity.models import LatentPrior
from gandensity.nn import ShapeError

LOG_2PI = math.log(2 * math.pi)


def test_prior_rejects_zero_dim():
    with pytest.raises(ValueError):
        LatentPrior(0)


def test_sample_latent_is_deterministic_per_seed():
    prior = LatentPrior(3)
    a = models.sample_latent(prior, 12)
    assert a.shape == (3,)
    assert np.array_equal(a, models.sample_latent(prior, 12))
    assert not np.array_equal(a, models.sample_latent(prior, 13))


def test_sample_latent_moments():
    z = models.sample_latent(LatentPrior(2), 0, 100_000)
    assert np.all(np.abs(z.mean(axis=0)) < 0.02)
    assert np.all(np.abs(z.var(axis=0) - 1.0) < 0.03)


def test_shared_generator_gives_iid_draws_across_calls():
    rng = np.random.default_rng(4)
    prior = LatentPrior(2)
    assert not np.array_equal(models.sample_latent(prior, rng), models.sample_latent(prior, rng))


@pytest.mark.parametrize("dim, z, expected", [
    (1, [0.0], -0.9189385332),
    (2, [0.0, 0.0], -1.8378770664),
    (2, [3.0, 4.0], -14.3378770664),
])
def test_log_prior_density_examples(dim, z, expected):
    assert models.log_prior_density(LatentPrior(dim), z) == pytest.approx(expected, abs=1e-10)


def test_log_prior_density_rejects_wrong_length():
    with pytest.raises(ShapeError):
        models.log_prior_density(LatentPrior(2), [1.0, 2.0, 3.0])


@pytest.mark.parametrize("dim", [1, 2])
def test_prior_integrates_to_one(dim):
    step = 0.01
    axis = np.arange(-9.0, 9.0, step) + step / 2
    grid = np.stack(np.meshgrid(*([axis] * dim), indexing="ij"), axis=-1).reshape(-1, dim)
    total = np.exp(models.log_prior_density(LatentPrior(dim), grid)).sum() * step ** dim
    assert abs(total - 1.0) < 1e-3


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-1e3, 1e3, allow_nan=False), min_size=1, max_size=6))
def test_log_prior_density_is_finite(z):
    assert np.isfinite(models.log_prior_density(LatentPrior(len(z)), z))


def test_identity_and_affine_generators():
    gen = models.affine_generator(np.eye(2))
    z = np.array([0.3, -1.2])
    assert np.array_equal(gen(z), z)
    a, b = np.array([[1.0, 2.0], [0.0, 1.0], [3.0, -1.0]]), np.array([0.5, 0.0, -2.0])
    np.testing.assert_allclose(models.affine_generator(a, b)(z), a @ z + b, atol=1e-15)


def test_generator_shape_rules():
    with pytest.raises(ShapeError):
        models.make_generator(3, 2)  # m < n
    gen = models.make_generator(2, 5, hidden=(4,))
    with pytest.raises(ShapeError):
        gen(np.zeros(3))
    out = gen(models.sample_latent(gen.prior, 0, 7))
    assert out.shape == (7, 5)


def test_generate_is_side_effect_free():
    gen = models.make_generator(2, 3, hidden=(4,), seed=1)
    before = [a.copy() for a in gen.params.arrays()]
    z = np.array([0.1, 0.2])
    first = gen(z)
    assert np.array_equal(first, gen(z))
    assert all(np.array_equal(a, b) for a, b in zip(before, gen.params.arrays()))


def test_trained_toy_generator_pin():
    ds = data.two_moons(2000, 0)
    arch = training.GanArchitecture(latent_dim=2, gen_hidden=(16, 16), disc_hidden=(16, 16))
    result = training.train_gan(ds.x, training.TrainingConfig(max_steps=200, batch_size=64, seed=7), arch)
    np.testing.assert_allclose(result.generator(np.zeros(2)),
                               [0.5460785003796356, 0.36765942385876527], rtol=0, atol=1e-12)


def test_discriminator_features_and_logit():
    disc = models.make_discriminator(4, hidden=(6, 5))
    x = np.random.default_rng(0).standard_normal((3, 4))
    assert disc.logits(x).shape == (3,)
    assert disc.feature_index == 1 and disc.features(x).shape == (3, 5)
    tapped = models.make_discriminator(4, hidden=(6, 5), feature_layer=0)
    assert tapped.features(x).shape == (3, 6)
    with pytest.raises(ShapeError):
        models.make_discriminator(4, hidden=(6,), feature_layer=1).feature_index
    with pytest.raises(ShapeError):
        models.Discriminator(nn.NetworkSpec.mlp(4, (3,), 2), nn.init_parameters(nn.NetworkSpec.mlp(4, (3,), 2), 0))


def test_q_network_output_matches_latent_dim():
    disc = models.make_discriminator(4, hidden=(6, 5))
    q = models.make_q_network(disc, 3)
    assert q(disc.features(np.zeros((2, 4)))).shape == (2, 3)


def test_model_set_round_trip(tmp_path):
    gen = models.make_generator(2, 4, hidden=(3,), seed=2)
    disc = models.make_discriminator(4, hidden=(5, 3), feature_layer=0, seed=3)
    q = models.make_q_network(disc, 2, seed=4)
    models.save_models(tmp_path, gen, disc, q)
    gen2, disc2, q2 = models.load_models(tmp_path)
    z = np.array([0.4, -0.1])
    assert np.array_equal(gen(z), gen2(z))
    assert disc2.feature_layer == 0
    x = gen(z)
    assert np.array_equal(q(disc.features(x)), q2(disc2.features(x)))


def test_generator_only_directory(tmp_path):
    gen = models.make_generator(2, 3, hidden=(3,))
    models.save_models(tmp_path, gen)
    _, disc, q = models.load_models(tmp_path)
    assert disc is None and q is None


def test_load_rejects_wrong_role(tmp_path):
    disc = models.make_discriminator(3, hidden=(2, 2))
    nn.save_parameters(tmp_path / models.GENERATOR_FILE, disc.spec, disc.params, "discriminator")
    with pytest.raises(nn.CheckpointError):
        models.load_generator(tmp_path)
