"""Datasets: MNIST/CIFAR-10 readers, rescaling, hold-out, synthetic mixtures, KDE.

Raster datasets store each image flattened in height-width-channel order with
pixel values mapped linearly from ``[0, 255]`` to ``[-1, 1]``.
"""

from __future__ import annotations

import gzip
import logging
import math
import os
import struct
import warnings
from dataclasses import dataclass

import numpy as np
from scipy.special import logsumexp

log = logging.getLogger(__name__)

IDX_IMAGE_MAGIC = 0x00000803
IDX_LABEL_MAGIC = 0x00000801
CIFAR_RECORD = 1 + 32 * 32 * 3

_DATASET_MAGIC = b"GDDATASET"
_DATASET_VERSION = 1


class DataFormatError(ValueError):
    """A data file does not match its declared binary format."""


@dataclass
class Dataset:
    """Rows of ``x`` are items; ``labels`` holds one integer class per item.

    ``shape`` is ``(height, width, channels)`` for raster data, ``None`` otherwise.
    """

    x: np.ndarray
    labels: np.ndarray
    shape: tuple[int, int, int] | None = None
    tag: str = ""

    def __post_init__(self):
        self.x = np.asarray(self.x, dtype=np.float64)
        if self.x.ndim == 1 and self.x.size == 0:
            self.x = self.x.reshape(0, int(np.prod(self.shape)) if self.shape else 0)
        self.labels = np.asarray(self.labels, dtype=np.int64).reshape(-1)
        if self.x.ndim != 2:
            raise ValueError("dataset vectors must form a (count, dim) array")
        if self.labels.shape[0] != self.x.shape[0]:
            raise ValueError(f"{self.x.shape[0]} items but {self.labels.shape[0]} labels")
        if self.shape is not None:
            self.shape = tuple(int(s) for s in self.shape)
            if int(np.prod(self.shape)) != self.x.shape[1]:
                raise ValueError(f"raster shape {self.shape} does not match dim {self.x.shape[1]}")

    def __len__(self) -> int:
        return self.x.shape[0]

    @property
    def dim(self) -> int:
        return self.x.shape[1]

    def items(self):
        return zip(self.x, self.labels)

    def subset(self, index, tag: str | None = None) -> "Dataset":
        return Dataset(self.x[index], self.labels[index], self.shape,
                       self.tag if tag is None else tag)

    def split(self, fraction: float, seed: int) -> tuple["Dataset", "Dataset"]:
        """Random split into ``(first, rest)`` with ``fraction`` of items in ``first``."""
        order = np.random.default_rng(seed).permutation(len(self))
        cut = int(round(fraction * len(self)))
        return self.subset(np.sort(order[:cut])), self.subset(np.sort(order[cut:]))

    def images(self) -> np.ndarray:
        if self.shape is None:
            raise ValueError("dataset is not a raster dataset")
        return self.x.reshape((len(self),) + self.shape)


# -- MNIST IDX ---------------------------------------------------------------

def _read_bytes(path) -> bytes:
    opener = gzip.open if str(path).endswith(".gz") else open
    with opener(path, "rb") as fh:
        return fh.read()


def _idx_header(data: bytes, path, magic: int, ndims: int) -> tuple[int, ...]:
    size = 4 * (1 + ndims)
    if len(data) < size:
        raise DataFormatError(f"{path}: truncated IDX header, file ends at byte offset {len(data)}")
    got, *dims = struct.unpack(">" + "I" * (1 + ndims), data[:size])
    if got != magic:
        raise DataFormatError(f"{path}: bad IDX magic 0x{got:08x}, expected 0x{magic:08x}")
    return tuple(dims)


def load_mnist_idx(images_path, labels_path) -> Dataset:
    """Read an IDX image file and its label file (optionally gzipped)."""
    raw = _read_bytes(images_path)
    count, rows, cols = _idx_header(raw, images_path, IDX_IMAGE_MAGIC, 3)
    need = 16 + count * rows * cols
    if len(raw) < need:
        raise DataFormatError(f"{images_path}: truncated image data at byte offset {len(raw)}, "
                              f"expected {need} bytes")
    pixels = np.frombuffer(raw, dtype=np.uint8, count=count * rows * cols, offset=16)

    lraw = _read_bytes(labels_path)
    (lcount,) = _idx_header(lraw, labels_path, IDX_LABEL_MAGIC, 1)
    if lcount != count:
        raise DataFormatError(f"{labels_path}: {lcount} labels for {count} images")
    if len(lraw) < 8 + lcount:
        raise DataFormatError(f"{labels_path}: truncated label data at byte offset {len(lraw)}")
    labels = np.frombuffer(lraw, dtype=np.uint8, count=lcount, offset=8)

    x = pixels.reshape(count, rows * cols).astype(np.float64) / 127.5 - 1.0
    return Dataset(x, labels.astype(np.int64), (rows, cols, 1), tag="mnist")


def write_mnist_idx(images_path, labels_path, images: np.ndarray, labels) -> None:
    """Write uint8 images ``(count, rows, cols)`` and labels as IDX files."""
    images = np.asarray(images, dtype=np.uint8)
    labels = np.asarray(labels, dtype=np.uint8)
    with open(images_path, "wb") as fh:
        fh.write(struct.pack(">IIII", IDX_IMAGE_MAGIC, *images.shape))
        fh.write(images.tobytes())
    with open(labels_path, "wb") as fh:
        fh.write(struct.pack(">II", IDX_LABEL_MAGIC, labels.shape[0]))
        fh.write(labels.tobytes())


# -- CIFAR-10 binary -----------------------------------------------------------

def load_cifar_binary(paths) -> Dataset:
    """Read CIFAR-10 binary batches: per record one label byte and 3072 CHW pixel bytes."""
    if isinstance(paths, (str, os.PathLike)):
        paths = [paths]
    xs, ys = [], []
    for path in paths:
        raw = _read_bytes(path)
        if len(raw) % CIFAR_RECORD:
            raise DataFormatError(f"{path}: length {len(raw)} is not a multiple of {CIFAR_RECORD}")
        if not raw:
            warnings.warn(f"{path}: empty CIFAR batch file")
            continue
        rec = np.frombuffer(raw, dtype=np.uint8).reshape(-1, CIFAR_RECORD)
        ys.append(rec[:, 0].astype(np.int64))
        chw = rec[:, 1:].reshape(-1, 3, 32, 32)
        xs.append(chw.transpose(0, 2, 3, 1).reshape(-1, CIFAR_RECORD - 1))
    if not xs:
        return Dataset(np.zeros((0, CIFAR_RECORD - 1)), np.zeros(0), (32, 32, 3), tag="cifar")
    x = np.concatenate(xs).astype(np.float64) / 127.5 - 1.0
    return Dataset(x, np.concatenate(ys), (32, 32, 3), tag="cifar")


# -- raster transforms ---------------------------------------------------------

def rescale(dataset: Dataset, target_h: int, target_w: int, target_c: int) -> Dataset:
    """Nearest-neighbor resampling (source index ``floor(i * H / h)``).

    One channel can be replicated to ``target_c``; otherwise the channel count
    must already match.
    """
    if dataset.shape is None:
        raise ValueError("rescale needs a raster dataset")
    h, w, c = dataset.shape
    if (h, w, c) == (target_h, target_w, target_c):
        return Dataset(dataset.x.copy(), dataset.labels.copy(), dataset.shape, dataset.tag)
    if c != target_c and c != 1:
        raise ValueError(f"cannot convert {c} channels to {target_c}")
    rows = (np.arange(target_h) * h) // target_h
    cols = (np.arange(target_w) * w) // target_w
    img = dataset.images()[:, rows][:, :, cols]
    if c != target_c:
        img = np.repeat(img, target_c, axis=3)
    return Dataset(img.reshape(len(dataset), -1), dataset.labels.copy(),
                   (target_h, target_w, target_c), dataset.tag)


def holdout_filter(dataset: Dataset, excluded_labels) -> Dataset:
    excluded = np.asarray(sorted(set(int(v) for v in excluded_labels)), dtype=np.int64)
    keep = ~np.isin(dataset.labels, excluded)
    out = dataset.subset(keep)
    log.info("hold-out filter kept %d of %d items (excluded labels %s)",
             len(out), len(dataset), excluded.tolist())
    if len(out) == 0:
        warnings.warn("hold-out filter removed every item")
    return out


# -- synthetic mixtures -----------------------------------------------------------

@dataclass(frozen=True)
class SmoothEmbedding:
    """Paraboloid embedding ``R^d -> R^m``: ``x -> U x + bend * |x|^2 / 2 * v``.

    ``U`` has orthonormal columns and ``v`` is a unit vector orthogonal to
    them, so ``U^T`` recovers ``x`` exactly. The area element
    ``sqrt(1 + bend^2 |x|^2)`` grows away from the origin.
    """

    in_dim: int
    out_dim: int
    bend: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.out_dim <= self.in_dim:
            raise ValueError("embedding needs out_dim > in_dim")

    def matrices(self) -> tuple[np.ndarray, np.ndarray]:
        rng = np.random.default_rng(self.seed)
        basis, _ = np.linalg.qr(rng.standard_normal((self.out_dim, self.out_dim)))
        return basis[:, :self.in_dim], basis[:, self.in_dim]

    def __call__(self, x) -> np.ndarray:
        u, v = self.matrices()
        x = np.asarray(x, dtype=np.float64)
        lift = 0.5 * self.bend * np.sum(x * x, axis=-1)
        return x @ u.T + lift[..., None] * v

    def log_area_element(self, x) -> np.ndarray:
        """``1/2 log det(J^T J)`` of the embedding at intrinsic points ``x``."""
        x = np.asarray(x, dtype=np.float64)
        return 0.5 * np.log1p(self.bend ** 2 * np.sum(x * x, axis=-1))


@dataclass(frozen=True)
class SyntheticMixtureSpec:
    """Isotropic Gaussian mixture; component ``k`` has covariance ``scales[k]^2 I``."""

    means: tuple
    scales: tuple
    weights: tuple
    embedding: SmoothEmbedding | None = None

    def __post_init__(self):
        means = np.asarray(self.means, dtype=np.float64)
        if means.ndim != 2 or means.shape[0] == 0:
            raise ValueError("means must be a non-empty (components, dim) array")
        k = means.shape[0]
        if len(self.scales) != k or len(self.weights) != k:
            raise ValueError("means, scales and weights must have one entry per component")
        if any(s <= 0 for s in self.scales):
            raise ValueError("covariance scales must be positive")
        if any(w < 0 for w in self.weights) or not math.isclose(sum(self.weights), 1.0, abs_tol=1e-9):
            raise ValueError("weights must be nonnegative and sum to 1")
        if self.embedding is not None and self.embedding.in_dim != means.shape[1]:
            raise ValueError("embedding input dim must equal the mixture dim")

    @property
    def dim(self) -> int:
        return len(self.means[0])

    @property
    def ambient_dim(self) -> int:
        return self.embedding.out_dim if self.embedding is not None else self.dim

    def log_density(self, x) -> np.ndarray:
        """Exact mixture log-density in the intrinsic (pre-embedding) coordinates."""
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        means = np.asarray(self.means, dtype=np.float64)
        d = means.shape[1]
        terms = []
        for mu, s, w in zip(means, self.scales, self.weights):
            if w == 0:
                continue
            sq = np.sum((x - mu) ** 2, axis=1)
            terms.append(math.log(w) - 0.5 * d * math.log(2 * math.pi * s * s) - 0.5 * sq / (s * s))
        return logsumexp(np.stack(terms), axis=0)


def synth_mixture(spec: SyntheticMixtureSpec, count: int, seed: int, tag: str = "synthetic",
                  intrinsic: bool = False) -> Dataset:
    """I.i.d. mixture draws labelled by component index, embedded last.

    Draws: component indices first, then all Gaussian noise, from one PCG64
    stream seeded by ``seed``.
    """
    rng = np.random.default_rng(seed)
    means = np.asarray(spec.means, dtype=np.float64)
    comp = rng.choice(len(spec.weights), size=count, p=np.asarray(spec.weights, dtype=np.float64))
    noise = rng.standard_normal((count, means.shape[1]))
    x = means[comp] + np.asarray(spec.scales, dtype=np.float64)[comp, None] * noise
    if spec.embedding is not None and not intrinsic:
        x = spec.embedding(x)
    return Dataset(x, comp, None, tag)


def tight_mode_mixture(dim: int = 8, radius: float = 2.0, diffuse_scale: float = 1.0,
                       tight_scale: float = 0.05, weights=(0.25, 0.25, 0.25, 0.25),
                       embedding: SmoothEmbedding | None = None) -> SyntheticMixtureSpec:
    """Three diffuse components around the origin plus a tight one at their centroid.

    Diffuse means sit at distance ``radius`` from the origin along three
    directions 120 degrees apart in the first two coordinates. Component 3 is
    the tight mode.
    """
    if dim < 2:
        raise ValueError("tight-mode mixture needs dim >= 2")
    means = np.zeros((4, dim))
    for k in range(3):
        angle = 2.0 * math.pi * k / 3.0
        means[k, 0], means[k, 1] = radius * math.cos(angle), radius * math.sin(angle)
    return SyntheticMixtureSpec(tuple(map(tuple, means)), (diffuse_scale,) * 3 + (tight_scale,),
                                tuple(weights), embedding)


def diffuse_part(spec: SyntheticMixtureSpec, drop=(3,)) -> SyntheticMixtureSpec:
    """The same mixture with components ``drop`` removed and weights renormalized."""
    keep = [k for k in range(len(spec.weights)) if k not in set(drop)]
    w = np.asarray([spec.weights[k] for k in keep], dtype=np.float64)
    return SyntheticMixtureSpec(tuple(spec.means[k] for k in keep), tuple(spec.scales[k] for k in keep),
                                tuple((w / w.sum()).tolist()), spec.embedding)


def two_moons(count: int, seed: int, noise: float = 0.05, tag: str = "two_moons") -> Dataset:
    """Two interleaved half circles in 2D; label 0 for the upper moon, 1 for the lower."""
    rng = np.random.default_rng(seed)
    labels = rng.integers(0, 2, size=count)
    t = rng.uniform(0.0, math.pi, size=count)
    x = np.where(labels == 0, np.cos(t), 1.0 - np.cos(t))
    y = np.where(labels == 0, np.sin(t), 0.5 - np.sin(t))
    pts = np.column_stack([x, y]) + noise * rng.standard_normal((count, 2))
    return Dataset(pts, labels, None, tag)


# -- kernel density oracle ----------------------------------------------------------

def silverman_bandwidth(samples) -> np.ndarray:
    """Per-dimension Silverman rule ``sigma_j (4 / ((d + 2) N))^(1 / (d + 4))``."""
    samples = np.atleast_2d(np.asarray(samples, dtype=np.float64))
    n, d = samples.shape
    return samples.std(axis=0, ddof=1) * (4.0 / ((d + 2) * n)) ** (1.0 / (d + 4))


def kde_log_density(reference, bandwidth, query, chunk: int = 256) -> np.ndarray | float:
    """Gaussian-kernel KDE log-density with diagonal bandwidth.

    Per query, the log-kernel terms are sorted before the log-sum-exp so the
    result does not depend on the order of ``reference``.
    """
    ref = np.atleast_2d(np.asarray(reference, dtype=np.float64))
    if ref.shape[0] == 0:
        raise ValueError("KDE needs at least one reference sample")
    q = np.asarray(query, dtype=np.float64)
    single = q.ndim == 1
    q = np.atleast_2d(q)
    d = ref.shape[1]
    if q.shape[1] != d:
        raise ValueError(f"query dim {q.shape[1]} != reference dim {d}")
    h = np.broadcast_to(np.asarray(bandwidth, dtype=np.float64), (d,))
    if np.any(h <= 0):
        raise ValueError("bandwidth must be positive")
    ref_s = ref / h
    ref_sq = np.sum(ref_s * ref_s, axis=1)
    norm = -0.5 * d * math.log(2 * math.pi) - float(np.sum(np.log(h))) - math.log(ref.shape[0])
    out = np.empty(q.shape[0])
    for start in range(0, q.shape[0], chunk):
        qs = q[start:start + chunk] / h
        # direct differences keep full precision far from the reference cloud
        sq = np.sum((qs[:, None, :] - ref_s[None, :, :]) ** 2, axis=2) if d <= 4 else \
            np.maximum(np.sum(qs * qs, axis=1)[:, None] - 2.0 * qs @ ref_s.T + ref_sq[None, :], 0.0)
        terms = np.sort(-0.5 * sq, axis=1)
        out[start:start + chunk] = logsumexp(terms, axis=1) + norm
    return float(out[0]) if single else out


# -- serialization and image files -------------------------------------------------

def save_dataset(path, dataset: Dataset) -> None:
    tag = dataset.tag.encode("utf-8")
    shape = dataset.shape or (0, 0, 0)
    with open(path, "wb") as fh:
        fh.write(_DATASET_MAGIC)
        fh.write(struct.pack("<IQI3I", _DATASET_VERSION, len(dataset), dataset.dim, *shape))
        fh.write(struct.pack("<I", len(tag)))
        fh.write(tag)
        fh.write(np.ascontiguousarray(dataset.x, dtype="<f8").tobytes())
        fh.write(np.ascontiguousarray(dataset.labels, dtype="<i8").tobytes())


def load_dataset(path) -> Dataset:
    with open(path, "rb") as fh:
        data = fh.read()
    if not data.startswith(_DATASET_MAGIC):
        raise DataFormatError(f"{path}: not a dataset file")
    off = len(_DATASET_MAGIC)
    version, count, dim, h, w, c = struct.unpack_from("<IQI3I", data, off)
    if version != _DATASET_VERSION:
        raise DataFormatError(f"{path}: unsupported dataset version {version}")
    off += struct.calcsize("<IQI3I")
    (tag_len,) = struct.unpack_from("<I", data, off)
    off += 4
    tag = data[off:off + tag_len].decode("utf-8")
    off += tag_len
    if len(data) != off + 8 * count * dim + 8 * count:
        raise DataFormatError(f"{path}: payload size does not match header")
    x = np.frombuffer(data, dtype="<f8", count=count * dim, offset=off).reshape(count, dim)
    labels = np.frombuffer(data, dtype="<i8", count=count, offset=off + 8 * count * dim)
    shape = (h, w, c) if h else None
    return Dataset(x.astype(np.float64), labels.astype(np.int64), shape, tag)


def to_bytes(values) -> np.ndarray:
    """Map ``[-1, 1]`` linearly to ``[0, 255]`` (clipped, rounded)."""
    v = np.asarray(values, dtype=np.float64)
    return np.clip(np.rint((v + 1.0) * 127.5), 0, 255).astype(np.uint8)


def write_pnm(path, image) -> None:
    """Binary PGM for ``(h, w)`` / ``(h, w, 1)`` images, PPM for ``(h, w, 3)``."""
    img = np.asarray(image, dtype=np.float64)
    if img.ndim == 2:
        img = img[:, :, None]
    if img.ndim != 3 or img.shape[2] not in (1, 3):
        raise ValueError(f"cannot write an image of shape {img.shape}")
    h, w, c = img.shape
    magic = b"P5" if c == 1 else b"P6"
    with open(path, "wb") as fh:
        fh.write(magic + b"\n%d %d\n255\n" % (w, h))
        fh.write(to_bytes(img).tobytes())
