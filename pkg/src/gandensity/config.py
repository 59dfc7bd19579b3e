"""INI-style run configuration: one section per pipeline stage.

Relative paths are resolved against the directory holding the config file.
Values are read through typed accessors that raise :class:`ConfigError`
naming the section and key, so the CLI can map every bad value to one exit
code.
"""

from __future__ import annotations

import configparser
import os
from dataclasses import dataclass

import numpy as np

from . import data as data_mod


class ConfigError(ValueError):
    pass


_MISSING = object()


@dataclass
class Section:
    """Typed view over one config section."""

    config: "RunConfig"
    name: str

    @property
    def raw(self) -> configparser.SectionProxy:
        if not self.config.parser.has_section(self.name):
            self.config.parser.add_section(self.name)
        return self.config.parser[self.name]

    def has(self, key: str) -> bool:
        return self.config.parser.has_option(self.name, key)

    def _get(self, key, default):
        if self.has(key):
            return self.raw[key].strip()
        if default is _MISSING:
            raise ConfigError(f"[{self.name}] {key} is required")
        # record defaults so the resolved config shows every value actually used
        if default is not None:
            self.raw[key] = _format(default)
        return default

    def str(self, key, default=_MISSING):
        return self._get(key, default)

    def int(self, key, default=_MISSING):
        value = self._get(key, default)
        try:
            return None if value is None else int(value)
        except (TypeError, ValueError):
            raise ConfigError(f"[{self.name}] {key} must be an integer, got {value!r}") from None

    def float(self, key, default=_MISSING):
        value = self._get(key, default)
        try:
            return None if value is None else float(value)
        except (TypeError, ValueError):
            raise ConfigError(f"[{self.name}] {key} must be a number, got {value!r}") from None

    def bool(self, key, default=_MISSING):
        value = self._get(key, default)
        if isinstance(value, bool):
            return value
        low = str(value).lower()
        if low in ("1", "yes", "true", "on"):
            return True
        if low in ("0", "no", "false", "off"):
            return False
        raise ConfigError(f"[{self.name}] {key} must be a boolean, got {value!r}")

    def ints(self, key, default=_MISSING) -> tuple[int, ...]:
        value = self._get(key, default)
        if isinstance(value, tuple):
            return value
        try:
            return tuple(int(v) for v in str(value).replace(",", " ").split())
        except ValueError:
            raise ConfigError(f"[{self.name}] {key} must be a list of integers, got {value!r}") from None

    def floats(self, key, default=_MISSING) -> tuple[float, ...]:
        value = self._get(key, default)
        if isinstance(value, tuple):
            return value
        try:
            return tuple(float(v) for v in str(value).replace(",", " ").split())
        except ValueError:
            raise ConfigError(f"[{self.name}] {key} must be a list of numbers, got {value!r}") from None

    def path(self, key, default=_MISSING):
        value = self._get(key, default)
        if value is None:
            return None
        resolved = self.config.resolve(value)
        self.raw[key] = resolved
        return resolved

    def choice(self, key, options, default=_MISSING):
        value = self._get(key, default)
        if value not in options:
            raise ConfigError(f"[{self.name}] {key} must be one of {', '.join(options)}, got {value!r}")
        return value


def _format(value) -> str:
    if isinstance(value, bool):
        return "yes" if value else "no"
    if isinstance(value, (tuple, list)):
        return ", ".join(_format(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


class RunConfig:
    def __init__(self, parser: configparser.ConfigParser, base_dir: str):
        self.parser = parser
        self.base_dir = base_dir

    @classmethod
    def load(cls, path: str | None) -> "RunConfig":
        parser = configparser.ConfigParser(interpolation=None)
        if path is None:
            return cls(parser, os.getcwd())
        if not os.path.isfile(path):
            raise ConfigError(f"config file not found: {path}")
        try:
            with open(path) as fh:
                parser.read_file(fh)
        except configparser.Error as exc:
            raise ConfigError(f"cannot parse {path}: {exc}") from None
        return cls(parser, os.path.dirname(os.path.abspath(path)))

    @classmethod
    def from_string(cls, text: str, base_dir: str = ".") -> "RunConfig":
        parser = configparser.ConfigParser(interpolation=None)
        try:
            parser.read_string(text)
        except configparser.Error as exc:
            raise ConfigError(str(exc)) from None
        return cls(parser, os.path.abspath(base_dir))

    def section(self, name: str) -> Section:
        return Section(self, name)

    def resolve(self, path: str) -> str:
        path = os.path.expanduser(path)
        return path if os.path.isabs(path) else os.path.normpath(os.path.join(self.base_dir, path))

    def set(self, section: str, key: str, value) -> None:
        if not self.parser.has_section(section):
            self.parser.add_section(section)
        self.parser[section][key] = _format(value)

    def seed(self) -> int:
        run = self.section("run")
        if not run.has("seed"):
            raise ConfigError("a seed is required: set [run] seed or pass --seed")
        return run.int("seed")

    def write(self, path: str) -> None:
        """Write every section, including defaults filled in so far, with absolute paths."""
        with open(path, "w") as fh:
            fh.write(f"# base_dir = {self.base_dir}\n")
            self.parser.write(fh)


# -- dataset sections -----------------------------------------------------------

SOURCES = ("synthetic", "two_moons", "mnist", "cifar", "file")
PRESETS = ("tight_mode", "blob", "custom")


def embedding_from(sec: Section, dim: int):
    embed_dim = sec.int("embed_dim", 0)
    if not embed_dim:
        return None
    try:
        return data_mod.SmoothEmbedding(dim, embed_dim, sec.float("bend", 1.0), sec.int("embed_seed", 1))
    except ValueError as exc:
        raise ConfigError(f"[{sec.name}] {exc}") from None


def _vectors(sec: Section, key: str) -> tuple[tuple[float, ...], ...]:
    text = sec.str(key)
    try:
        rows = tuple(tuple(float(v) for v in row.replace(",", " ").split())
                     for row in text.split(";") if row.strip())
    except ValueError:
        raise ConfigError(f"[{sec.name}] {key} must be ';'-separated vectors, got {text!r}") from None
    if not rows or len({len(r) for r in rows}) != 1:
        raise ConfigError(f"[{sec.name}] {key} vectors must share one length")
    return rows


def mixture_from(sec: Section) -> data_mod.SyntheticMixtureSpec:
    preset = sec.choice("preset", PRESETS, "tight_mode")
    try:
        if preset == "tight_mode":
            dim = sec.int("dim", 2)
            spec = data_mod.tight_mode_mixture(dim, sec.float("radius", 1.5), sec.float("diffuse_scale", 1.0),
                                               sec.float("tight_scale", 0.05),
                                               sec.floats("weights", (0.25, 0.25, 0.25, 0.25)),
                                               embedding_from(sec, dim))
        elif preset == "blob":
            center = sec.floats("center")
            spec = data_mod.SyntheticMixtureSpec((center,), (sec.float("scale", 1.0),), (1.0,),
                                                 embedding_from(sec, len(center)))
        else:
            means = _vectors(sec, "means")
            spec = data_mod.SyntheticMixtureSpec(means, sec.floats("scales"), sec.floats("weights"),
                                                 embedding_from(sec, len(means[0])))
    except ConfigError:
        raise
    except ValueError as exc:
        raise ConfigError(f"[{sec.name}] {exc}") from None
    return spec


def load_dataset_section(config: RunConfig, name: str, default_seed: int) -> data_mod.Dataset:
    """Build the dataset a section describes.

    Raises :class:`ConfigError` for bad settings; file problems surface as
    ``OSError`` / :class:`~gandensity.data.DataFormatError`.
    """
    if not config.parser.has_section(name):
        raise ConfigError(f"missing dataset section [{name}]")
    sec = config.section(name)
    source = sec.choice("source", SOURCES)
    tag = sec.str("tag", name)
    if source == "synthetic":
        ds = data_mod.synth_mixture(mixture_from(sec), sec.int("count", 20000),
                                    sec.int("seed", default_seed), tag)
    elif source == "two_moons":
        ds = data_mod.two_moons(sec.int("count", 20000), sec.int("seed", default_seed),
                                sec.float("noise", 0.05), tag)
    elif source == "mnist":
        ds = data_mod.load_mnist_idx(sec.path("images"), sec.path("labels"))
    elif source == "cifar":
        paths = [config.resolve(p.strip()) for p in sec.str("paths").split(",") if p.strip()]
        config.set(name, "paths", paths)
        ds = data_mod.load_cifar_binary(paths)
    else:
        ds = data_mod.load_dataset(sec.path("path"))
    if sec.has("rescale"):
        dims = sec.ints("rescale")
        if len(dims) != 3:
            raise ConfigError(f"[{name}] rescale needs height, width, channels")
        ds = data_mod.rescale(ds, *dims)
    exclude = sec.ints("exclude", ())
    if exclude:
        ds = data_mod.holdout_filter(ds, exclude)
    keep = sec.ints("keep", ())
    if keep:
        ds = ds.subset(np.isin(ds.labels, keep))
    limit = sec.int("limit", 0)
    if limit:
        ds = ds.subset(slice(0, limit))
    ds.tag = tag
    return ds
