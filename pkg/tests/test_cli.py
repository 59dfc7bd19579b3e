import hashlib
import json
import os

import numpy as np
import pytest
from filelock import FileLock

from gandensity import cli, data, density, models, nn, training
from gandensity.config import RunConfig


def sha(path):
    return hashlib.sha256(open(path, "rb").read()).hexdigest()


def write_ini(path, text):
    path.write_text(text)
    return str(path)


GAN_INI = """
[run]
seed = 7
out = gan_out
[gan]
dataset = moons
latent_dim = 2
gen_hidden = 16
disc_hidden = 16
max_steps = 40
batch_size = 32
{extra}
[moons]
source = two_moons
count = 256
"""


def run(*argv):
    return cli.main([str(a) for a in argv])


# -- train-gan ----------------------------------------------------------------------

def test_train_gan_is_reproducible_and_writes_resolved_config(tmp_path, capsys):
    ini = write_ini(tmp_path / "g.ini", GAN_INI.format(extra=""))
    assert run("train-gan", "--config", ini) == cli.EXIT_OK
    out = tmp_path / "gan_out"
    first = sha(out / models.GENERATOR_FILE)
    assert first in capsys.readouterr().out
    assert run("train-gan", "--config", ini, "--out", tmp_path / "again") == cli.EXIT_OK
    assert sha(tmp_path / "again" / models.GENERATOR_FILE) == first
    resolved = RunConfig.load(str(out / cli.RESOLVED_CONFIG))
    assert resolved.parser["run"]["out"] == str(out)
    assert resolved.parser["gan"]["learning_rate"] == "0.0002"
    assert len((out / "losses.csv").read_text().splitlines()) == 41
    assert not (out / models.Q_FILE).exists()


def test_info_penalty_at_zero_weight_leaves_generator_unchanged(tmp_path):
    plain = write_ini(tmp_path / "a.ini", GAN_INI.format(extra=""))
    info = write_ini(tmp_path / "b.ini", GAN_INI.format(extra="with_q = yes\nlambda_mi = 0"))
    assert run("train-gan", "--config", plain, "--out", tmp_path / "a") == 0
    assert run("train-gan", "--config", info, "--out", tmp_path / "b") == 0
    assert (tmp_path / "b" / models.Q_FILE).exists()
    assert sha(tmp_path / "a" / models.GENERATOR_FILE) == sha(tmp_path / "b" / models.GENERATOR_FILE)


@pytest.mark.parametrize("text, argv", [
    ("[run]\nout = o\n[gan]\n", ()),
    ("[run]\nseed = 1\nout = o\n[gan]\nmax_steps = many\n[data]\nsource = two_moons\n", ()),
    ("[run]\nseed = 1\nout = o\n[gan]\ndataset = absent\n", ()),
    ("[run]\nseed = 1\nout = o\n[data]\nsource = two_moons\n", ("--threads", "0")),
])
def test_config_errors_exit_2(tmp_path, text, argv):
    ini = write_ini(tmp_path / "c.ini", text)
    assert run("train-gan", "--config", ini, *argv) == cli.EXIT_CONFIG
    assert not (tmp_path / "o" / cli.RESOLVED_CONFIG).exists()


def test_missing_config_file_exits_2(tmp_path):
    assert run("train-gan", "--config", tmp_path / "absent.ini", "--seed", 1) == cli.EXIT_CONFIG


def test_missing_dataset_file_exits_3(tmp_path):
    ini = write_ini(tmp_path / "c.ini", "[run]\nseed = 1\nout = o\n[data]\nsource = file\npath = nope.bin\n")
    assert run("train-gan", "--config", ini) == cli.EXIT_DATA


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_nonfinite_data_exits_4_and_keeps_partial_state(tmp_path):
    x = np.random.default_rng(0).standard_normal((32, 2))
    x[3, 0] = np.inf
    data.save_dataset(tmp_path / "bad.bin", data.Dataset(x, np.zeros(32, int)))
    ini = write_ini(tmp_path / "c.ini", "[run]\nseed = 1\nout = o\n[gan]\nlatent_dim = 2\ngen_hidden = 8\n"
                    "disc_hidden = 8\nbatch_size = 32\nmax_steps = 5\n[data]\nsource = file\npath = bad.bin\n")
    assert run("train-gan", "--config", ini) == cli.EXIT_NUMERICAL
    assert (tmp_path / "o" / cli.RESOLVED_CONFIG).exists()
    assert (tmp_path / "o" / "partial" / models.GENERATOR_FILE).exists()


def test_held_lock_exits_5(tmp_path):
    ini = write_ini(tmp_path / "g.ini", GAN_INI.format(extra=""))
    (tmp_path / "gan_out").mkdir()
    with FileLock(str(tmp_path / "gan_out" / cli.LOCK_FILE)):
        assert run("train-gan", "--config", ini) == cli.EXIT_LOCKED
    assert not (tmp_path / "gan_out" / models.GENERATOR_FILE).exists()


# -- sample-densities -------------------------------------------------------------------

def sample_ini(tmp_path, ckpt, extra=""):
    return write_ini(tmp_path / "s.ini", f"[run]\nseed = 3\nout = s_out\n[sample]\ncheckpoint = {ckpt}\n"
                                         f"count = 500\n{extra}")


def test_identity_checkpoint_gives_prior_density(tmp_path):
    models.save_models(tmp_path / "ckpt", models.affine_generator(np.eye(2)))
    ini = sample_ini(tmp_path, "ckpt", "csv = yes\n")
    assert run("sample-densities", "--config", ini) == cli.EXIT_OK
    trip = density.read_triplets(tmp_path / "s_out" / "triplets.bin")
    assert len(trip) == 500 and (tmp_path / "s_out" / "triplets.csv").exists()
    np.testing.assert_allclose(trip.log_px, models.log_prior_density(models.LatentPrior(2), trip.z),
                               atol=1e-12, rtol=0)
    first = sha(tmp_path / "s_out" / "triplets.bin")
    assert run("sample-densities", "--config", ini, "--out", tmp_path / "again") == 0
    assert sha(tmp_path / "again" / "triplets.bin") == first
    assert run("sample-densities", "--config", ini, "--out", tmp_path / "few", "--count", 7) == 0
    assert len(density.read_triplets(tmp_path / "few" / "triplets.bin")) == 7


def test_sample_errors(tmp_path):
    models.save_models(tmp_path / "ckpt", models.affine_generator(np.eye(2)))
    assert run("sample-densities", "--config", sample_ini(tmp_path, "ckpt"), "--count", 0) == cli.EXIT_CONFIG
    assert run("sample-densities", "--config", sample_ini(tmp_path, "ckpt", "latent_dim = 3\n")) == cli.EXIT_DATA
    assert run("sample-densities", "--config", sample_ini(tmp_path, "missing")) == cli.EXIT_DATA


# -- train-regressor ---------------------------------------------------------------------

@pytest.fixture(scope="module")
def toy_triplets(tmp_path_factory):
    root = tmp_path_factory.mktemp("toy")
    spec = nn.NetworkSpec.mlp(2, (32,), 3, "tanh")
    gen = models.Generator(models.LatentPrior(2), spec, nn.init_parameters(spec, 0, std=0.3))
    density.write_triplets(root / "t.bin", density.sample_triplets(gen, 8000, seed=2))
    return root / "t.bin"


def regressor_ini(tmp_path, triplets, mode):
    return write_ini(tmp_path / f"{mode}.ini",
                     f"[run]\nseed = 1\nout = {mode}\n[regressor]\ntriplets = {triplets}\nmode = {mode}\n"
                     f"hidden = 64, 64\nepochs = 15\nlearning_rate = 1e-3\n")


def test_train_regressor_pixel_and_latent(tmp_path, toy_triplets):
    for mode in ("pixel", "latent"):
        assert run("train-regressor", "--config", regressor_ini(tmp_path, toy_triplets, mode)) == 0
    pixel = json.loads((tmp_path / "pixel" / "regressor_metrics.json").read_text())
    lat = json.loads((tmp_path / "latent" / "regressor_metrics.json").read_text())
    assert pixel["heldout_r2"] >= 0.9 and lat["heldout_r2"] >= 0.9
    assert pixel["heldout_count"] == 800 and pixel["train_count"] == 7200
    assert training.load_regressor(tmp_path / "latent" / "regressor.bin")[1] == "latent"


def test_mode_flag_overrides_config(tmp_path, toy_triplets):
    ini = regressor_ini(tmp_path, toy_triplets, "pixel")
    write_ini(tmp_path / "pixel.ini", open(ini).read().replace("epochs = 15", "epochs = 1"))
    assert run("train-regressor", "--config", ini, "--mode", "latent", "--out", tmp_path / "m") == 0
    assert training.load_regressor(tmp_path / "m" / "regressor.bin")[1] == "latent"


def test_missing_triplets_exit_3(tmp_path):
    assert run("train-regressor", "--config", regressor_ini(tmp_path, "nope.bin", "pixel")) == cli.EXIT_DATA


# -- evaluate -------------------------------------------------------------------------------

def first_coordinate_regressor(tmp_path, dim=2):
    # log-density prediction equal to x[0]
    spec = training.regressor_spec(dim, hidden=(dim,))
    w0, b0 = np.eye(dim), np.full(dim, 100.0)
    w1, b1 = np.eye(1, dim), np.array([-100.0])
    reg = training.Regressor(spec, nn.ParameterSet([w0, w1], [b0, b1]))
    training.save_regressor(tmp_path / "r.bin", reg, "pixel")
    return reg


EVAL_INI = """
[run]
seed = 11
out = e_out
[evaluate]
regressor = r.bin
datasets = {datasets}
k = 10
bins = 20
[train]
source = synthetic
preset = blob
center = 0, 0
count = 5000
seed = 1
[test]
source = synthetic
preset = blob
center = 0, 0
count = 5000
seed = 2
[far]
source = synthetic
preset = blob
center = 3, 0
count = 300
seed = 3
tag = foreign
[wide]
source = synthetic
preset = blob
center = 0, 0, 0
count = 10
[empty]
source = two_moons
count = 0
"""


def test_evaluate_single_dataset(tmp_path):
    reg = first_coordinate_regressor(tmp_path)
    assert reg(np.array([[0.25, -4.0]]))[0] == pytest.approx(0.25)
    ini = write_ini(tmp_path / "e.ini", EVAL_INI.format(datasets="train"))
    assert run("evaluate", "--config", ini) == cli.EXIT_OK
    summary = json.loads((tmp_path / "e_out" / "summary.json").read_text())
    assert len(summary["top_ids"]) == 10 and summary["mode"] == "pixel"
    assert len((tmp_path / "e_out" / "report.csv").read_text().splitlines()) == 5001


def test_evaluate_train_vs_test_and_cross(tmp_path, capsys):
    first_coordinate_regressor(tmp_path)
    same = write_ini(tmp_path / "a.ini", EVAL_INI.format(datasets="train, test"))
    assert run("evaluate", "--config", same, "--out", tmp_path / "a") == 0
    summary = json.loads((tmp_path / "a" / "summary.json").read_text())
    assert summary["ks"] < 0.05
    cross = write_ini(tmp_path / "b.ini", EVAL_INI.format(datasets="train, far"))
    assert run("evaluate", "--config", cross, "--out", tmp_path / "b") == 0
    summary = json.loads((tmp_path / "b" / "summary.json").read_text())
    assert summary["cross"]["foreign_dominates"]
    assert "INVERSION" in capsys.readouterr().out


@pytest.mark.parametrize("datasets, code", [
    ("empty", cli.EXIT_DATA), ("wide", cli.EXIT_DATA), ("train, test, far", cli.EXIT_CONFIG),
])
def test_evaluate_errors(tmp_path, datasets, code):
    first_coordinate_regressor(tmp_path)
    ini = write_ini(tmp_path / "e.ini", EVAL_INI.format(datasets=datasets))
    assert run("evaluate", "--config", ini) == code


def test_evaluate_writes_mosaics_for_raster_data(tmp_path):
    images = np.random.default_rng(0).integers(0, 256, (30, 4, 4), dtype=np.uint8)
    data.write_mnist_idx(tmp_path / "i", tmp_path / "l", images, np.arange(30) % 3)
    first_coordinate_regressor(tmp_path, dim=16)
    ini = write_ini(tmp_path / "e.ini", "[run]\nseed = 0\nout = o\n[evaluate]\nregressor = r.bin\n"
                    "k = 4\nholdout_labels = 1\n[data]\nsource = mnist\nimages = i\nlabels = l\n")
    assert run("evaluate", "--config", ini) == 0
    assert (tmp_path / "o" / "top_4.pnm").exists() and (tmp_path / "o" / "bottom_4.pnm").exists()
    summary = json.loads((tmp_path / "o" / "summary.json").read_text())
    assert 0.0 <= summary["holdout"]["top_k_fraction"] <= 1.0


# -- verify ----------------------------------------------------------------------------------

def test_verify_passes_and_writes_json(tmp_path, capsys):
    assert run("verify", "--out", tmp_path / "v") == cli.EXIT_OK
    lines = capsys.readouterr().out.splitlines()
    assert len(lines) == 7 and all(line.startswith("PASS") for line in lines)
    report = json.loads((tmp_path / "v" / "verify.json").read_text())
    assert report["passed"] and len(report["checks"]) == 7
    assert os.path.exists(tmp_path / "v" / cli.RESOLVED_CONFIG)


def test_help_lists_subcommands(capsys):
    with pytest.raises(SystemExit):
        run("--help")
    text = capsys.readouterr().out
    for name in cli.COMMANDS:
        assert name in text
