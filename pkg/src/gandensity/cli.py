"""Command-line pipeline: train-gan, sample-densities, train-regressor, evaluate, verify.

Stages talk only through files in their output directories. Every run
writes ``resolved_config.ini`` before its main computation and holds
``.lock`` in the output directory while it works.
"""

from __future__ import annotations

import argparse
import contextlib
import hashlib
import logging
import os
import sys
import warnings

import numpy as np

from . import analysis, density, latent, models, training, verify
from .config import ConfigError, RunConfig, load_dataset_section
from .data import DataFormatError
from .nn import CheckpointError, ShapeError

log = logging.getLogger("gandensity")

EXIT_OK = 0
EXIT_CHECKS_FAILED = 1
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_NUMERICAL = 4
EXIT_LOCKED = 5

RESOLVED_CONFIG = "resolved_config.ini"
LOCK_FILE = ".lock"


class DataError(Exception):
    """Inputs exist but cannot be used (missing files, wrong shapes, empty sets)."""


class OutputLocked(Exception):
    pass


def _sha256(path) -> str:
    with open(path, "rb") as fh:
        return hashlib.sha256(fh.read()).hexdigest()


@contextlib.contextmanager
def output_dir(path: str):
    """Create ``path`` and hold its lock file for the duration of the block."""
    from filelock import FileLock, Timeout

    os.makedirs(path, exist_ok=True)
    lock = FileLock(os.path.join(path, LOCK_FILE), timeout=0)
    try:
        lock.acquire()
    except Timeout:
        raise OutputLocked(f"{path} is in use by another run ({LOCK_FILE} is held)") from None
    try:
        yield path
    finally:
        lock.release()


def _require_file(path: str | None, what: str) -> str:
    if path is None or not os.path.exists(path):
        raise DataError(f"{what} not found: {path}")
    return path


def _out_dir(cfg: RunConfig, args) -> str:
    if args.out:
        cfg.set("run", "out", os.path.abspath(args.out))
    return cfg.section("run").path("out")


def _training_config(sec, defaults: training.TrainingConfig, seed: int) -> training.TrainingConfig:
    max_steps = sec.int("max_steps", 0)
    try:
        return training.TrainingConfig(
            learning_rate=sec.float("learning_rate", defaults.learning_rate),
            beta1=sec.float("beta1", defaults.beta1), beta2=sec.float("beta2", defaults.beta2),
            epsilon=sec.float("epsilon", defaults.epsilon),
            batch_size=sec.int("batch_size", defaults.batch_size),
            epochs=sec.int("epochs", defaults.epochs), max_steps=max_steps or None,
            lambda_mi=sec.float("lambda_mi", defaults.lambda_mi), seed=seed,
            loss_variant=sec.choice("loss_variant", training.LOSS_VARIANTS, defaults.loss_variant),
            d_steps=sec.int("d_steps", defaults.d_steps))
    except ValueError as exc:
        raise ConfigError(f"[{sec.name}] {exc}") from None


# -- subcommands -----------------------------------------------------------------

def cmd_train_gan(cfg: RunConfig, args) -> int:
    """Train a GAN (optionally with a Q-network) and write its checkpoints."""
    seed = cfg.seed()
    out = _out_dir(cfg, args)
    gan = cfg.section("gan")
    config = _training_config(gan, training.GAN_CONFIG, seed)
    arch = training.GanArchitecture(
        latent_dim=gan.int("latent_dim", 2), gen_hidden=gan.ints("gen_hidden", (128, 128)),
        gen_activation=gan.str("gen_activation", "tanh"),
        gen_output_activation=gan.str("gen_output_activation", "identity"),
        disc_hidden=gan.ints("disc_hidden", (128, 128)), q_hidden=gan.ints("q_hidden", (64,)),
        slope=gan.float("slope", 0.2))
    with_q = gan.bool("with_q", False)
    with output_dir(out):
        dataset = load_dataset_section(cfg, gan.str("dataset", "data"), seed)
        if len(dataset) == 0:
            raise DataError(f"training dataset {dataset.tag!r} is empty")
        cfg.write(os.path.join(out, RESOLVED_CONFIG))
        log.info("training GAN on %d items of dim %d", len(dataset), dataset.dim)
        try:
            result = training.train_gan(dataset.x, config, arch, with_q=with_q)
        except training.TrainingDivergedError as exc:
            if exc.result is not None:
                partial = os.path.join(out, "partial")
                models.save_models(partial, exc.result.generator, exc.result.discriminator, exc.result.q)
                exc.result.report.write_csv(os.path.join(partial, "losses.csv"))
                log.error("last finite state saved to %s", partial)
            raise
        models.save_models(out, result.generator, result.discriminator, result.q)
        result.report.write_csv(os.path.join(out, "losses.csv"))
    digest = _sha256(os.path.join(out, models.GENERATOR_FILE))
    d, g, mi = result.report.losses()[-1]
    print(f"steps={result.steps} d_loss={d:.4f} g_loss={g:.4f} mi_penalty={mi:.4f}")
    print(f"generator sha256={digest}")
    return EXIT_OK


def cmd_sample_densities(cfg: RunConfig, args) -> int:
    """Sample (z, G(z), log p) triplets from a generator checkpoint."""
    seed = cfg.seed()
    out = _out_dir(cfg, args)
    sec = cfg.section("sample")
    if args.count is not None:
        cfg.set("sample", "count", args.count)
    count = sec.int("count", 50000)
    if count < 1:
        raise ConfigError(f"[sample] count must be >= 1, got {count}")
    threshold = sec.float("threshold", density.DEFAULT_THRESHOLD)
    ckpt = sec.path("checkpoint")
    _require_file(os.path.join(ckpt, models.GENERATOR_FILE), "generator checkpoint")
    with output_dir(out):
        gen = models.load_generator(ckpt)
        for key, actual in (("latent_dim", gen.latent_dim), ("output_dim", gen.output_dim)):
            expected = sec.int(key, None)
            if expected is not None and expected != actual:
                raise DataError(f"checkpoint {key} is {actual}, config expects {expected}")
        cfg.write(os.path.join(out, RESOLVED_CONFIG))
        triplets = density.sample_triplets(gen, count, seed, threshold)
        path = os.path.join(out, "triplets.bin")
        density.write_triplets(path, triplets)
        if sec.bool("csv", False):
            density.export_triplets_csv(os.path.join(out, "triplets.csv"), triplets)
    print(f"triplets={len(triplets)} degenerate={triplets.degenerate_count} threshold={threshold:g}")
    print(f"log_px mean={triplets.log_px[~triplets.degenerate].mean():.4f} file={path}")
    return EXIT_OK


def cmd_train_regressor(cfg: RunConfig, args) -> int:
    """Fit a pixel or latent density regressor on a triplet file."""
    seed = cfg.seed()
    out = _out_dir(cfg, args)
    sec = cfg.section("regressor")
    if args.mode is not None:
        cfg.set("regressor", "mode", args.mode)
    mode = sec.choice("mode", training.REGRESSOR_MODES, "pixel")
    config = _training_config(sec, training.REGRESSOR_CONFIG, seed)
    hidden = sec.ints("hidden", (128, 128))
    fraction = sec.float("holdout_fraction", 0.1)
    if not 0.0 < fraction < 1.0:
        raise ConfigError("[regressor] holdout_fraction must lie in (0, 1)")
    path = _require_file(sec.path("triplets"), "triplet file")
    with output_dir(out):
        triplets = density.read_triplets(path)
        usable = triplets.usable()
        if len(usable) < 2:
            raise DataError(f"{path} has {len(usable)} usable triplets")
        if mode == "pixel":
            targets = usable.log_px
        else:
            targets = latent.latent_labels_from_triplets(usable, models.LatentPrior(usable.latent_dim)).log_pz
        order = np.random.default_rng(seed).permutation(len(usable))
        cut = max(1, int(round(fraction * len(usable))))
        held, train = np.sort(order[:cut]), np.sort(order[cut:])
        cfg.write(os.path.join(out, RESOLVED_CONFIG))
        if mode == "latent":
            with warnings.catch_warnings(record=True) as caught:
                warnings.simplefilter("always", latent.IllPosedLabelsWarning)
                reg = latent.train_latent_regressor(
                    latent.LatentLabels(usable.x[train], targets[train]), config, hidden)
            for w in caught:
                log.warning("%s", w.message)
        else:
            reg = training.train_regressor(usable.x[train], targets[train], config, hidden)
        pred = reg(usable.x[held])
        r2 = training.r_squared(targets[held], pred)
        reg_path = os.path.join(out, "regressor.bin")
        training.save_regressor(reg_path, reg, mode)
        metrics = {"mode": mode, "heldout_r2": r2, "heldout_count": int(held.size),
                   "train_count": int(train.size), "heldout_prediction_std": float(pred.std()),
                   "degenerate_dropped": triplets.degenerate_count}
        analysis.write_summary(os.path.join(out, "regressor_metrics.json"), metrics)
    print(f"mode={mode} heldout_r2={r2:.4f} prediction_std={pred.std():.4f} file={reg_path}")
    return EXIT_OK


def cmd_evaluate(cfg: RunConfig, args) -> int:
    """Score one dataset, or two for a cross report, with a trained regressor."""
    seed = cfg.seed()
    out = _out_dir(cfg, args)
    sec = cfg.section("evaluate")
    names = [n.strip() for n in sec.str("datasets", "data").split(",") if n.strip()]
    if not 1 <= len(names) <= 2:
        raise ConfigError("[evaluate] datasets names one section, or two for a cross report")
    bins = sec.int("bins", 50)
    k = sec.int("k", 100)
    cols = sec.int("mosaic_cols", 10)
    holdout = sec.ints("holdout_labels", ())
    reg_path = _require_file(sec.path("regressor"), "regressor checkpoint")
    with output_dir(out):
        reg, mode = training.load_regressor(reg_path)
        sets = [load_dataset_section(cfg, name, seed) for name in names]
        for ds in sets:
            if len(ds) == 0:
                raise DataError(f"evaluation dataset {ds.tag!r} is empty")
            if ds.dim != reg.input_dim:
                raise DataError(f"dataset {ds.tag!r} has dim {ds.dim}, regressor expects {reg.input_dim}")
        cfg.write(os.path.join(out, RESOLVED_CONFIG))
        extra = {"mode": mode}
        if len(sets) == 1:
            report = analysis.evaluate_dataset(reg, sets[0], bins)
        else:
            report = analysis.cross_dataset_report(reg, sets[0], sets[1], bins)
            tags = report.tag_names()
            extra["cross"] = analysis.inversion_summary(report, tags[0], tags[1])
        if holdout:
            held = np.isin(report.labels, holdout)
            if held.any() and (~held).any():
                top, _ = analysis.rank_extremes(report, min(k, len(report)))
                extra["holdout"] = {
                    "labels": list(holdout),
                    "top_k_fraction": float(np.isin(report.labels[top], holdout).mean()),
                    "heldout_median": float(np.median(report.log_density[held])),
                    "other_median": float(np.median(report.log_density[~held])),
                }
        summary = analysis.summarize(report, k, extra)
        analysis.write_report_csv(os.path.join(out, "report.csv"), report)
        analysis.write_summary(os.path.join(out, "summary.json"), summary)
        raster = [ds for ds in sets if ds.shape is not None]
        if raster and len(raster) == len(sets) and len({ds.shape for ds in sets}) == 1:
            items = np.concatenate([ds.x for ds in sets])
            for name, ids in (("top", summary["top_ids"]), ("bottom", summary["bottom_ids"])):
                if len(ids):
                    analysis.image_grid_dump(items[np.asarray(ids)], os.path.join(out, f"{name}_{k}.pnm"),
                                             cols, sets[0].shape)
    stats = summary["stats"]["all"]
    print(f"items={len(report)} mean={stats['mean']:.4f} std={stats['std']:.4f}")
    if "ks" in summary:
        print(f"ks={summary['ks']:.4f}")
    if "cross" in extra:
        c = extra["cross"]
        flag = "INVERSION" if c["foreign_dominates"] else "no inversion"
        print(f"native_median={c['native_median']:.4f} foreign_median={c['foreign_median']:.4f} {flag}")
    return EXIT_OK


def cmd_verify(cfg: RunConfig, args) -> int:
    """Run the self-contained checks of the density math."""
    seed = cfg.seed() if (args.seed is not None or cfg.section("run").has("seed")) else 0
    report = verify.run_suite(seed=seed)
    for line in report.lines():
        print(line)
    out = args.out or (cfg.section("run").path("out", None) if cfg.section("run").has("out") else None)
    if out:
        with output_dir(out):
            cfg.set("run", "seed", seed)
            cfg.write(os.path.join(out, RESOLVED_CONFIG))
            analysis.write_summary(os.path.join(out, "verify.json"), report.as_dict())
    return EXIT_OK if report.passed else EXIT_CHECKS_FAILED


COMMANDS = {
    "train-gan": cmd_train_gan,
    "sample-densities": cmd_sample_densities,
    "train-regressor": cmd_train_regressor,
    "evaluate": cmd_evaluate,
    "verify": cmd_verify,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="INI config file with one section per stage")
    common.add_argument("--seed", type=int, help="overrides [run] seed")
    common.add_argument("--out", help="output directory, overrides [run] out")
    common.add_argument("--mode", choices=training.REGRESSOR_MODES, help="regressor label type")
    common.add_argument("--count", type=int, help="number of triplets to sample")
    common.add_argument("--threads", type=int, help="BLAS thread cap (default 1)")
    common.add_argument("-v", "--verbose", action="store_true")
    parser = argparse.ArgumentParser(prog="gandensity", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name, fn in COMMANDS.items():
        sub.add_parser(name, parents=[common], help=fn.__doc__)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = RunConfig.load(args.config)
        if args.seed is not None:
            cfg.set("run", "seed", args.seed)
        if args.threads is not None:
            cfg.set("run", "threads", args.threads)
        threads = cfg.section("run").int("threads", 1)
        if threads < 1:
            raise ConfigError("threads must be >= 1")
        from threadpoolctl import threadpool_limits

        with threadpool_limits(limits=threads):
            return COMMANDS[args.command](cfg, args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except OutputLocked as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_LOCKED
    except (DataError, DataFormatError, CheckpointError, density.TripletFormatError,
            ShapeError, OSError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (training.TrainingDivergedError, training.NonFiniteGradientError,
            density.NumericalError, FloatingPointError) as exc:
        print(f"numerical error: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL


if __name__ == "__main__":
    sys.exit(main())
