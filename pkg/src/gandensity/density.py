"""Log-densities of generated points on the image manifold of a generator.

For ``x = G(z)`` with an injective ``G: R^n -> R^m`` (``m >= n``) the density
with respect to n-dimensional volume on the manifold is

    log p(x) = log p(z) - 1/2 log det(J^T J),   J = dG/dz.

``1/2 log det(J^T J)`` equals ``sum_i log |r_ii|`` where ``J = Q R`` is a thin
QR factorization, which is how it is evaluated here (in log space, to stay
clear of overflow for wide generators).
"""

from __future__ import annotations

import csv
import hashlib
import struct
from dataclasses import dataclass

import numpy as np

from . import nn
from .models import Generator, generate, log_prior_density
from .nn import ShapeError

DEFAULT_THRESHOLD = 1e-10
TRIPLET_CHUNK = 1024

_TRIPLET_MAGIC = b"GDTRIPLT"
_TRIPLET_VERSION = 1


class NumericalError(ArithmeticError):
    """A Jacobian or log-determinant contained non-finite values."""


class TripletFormatError(ValueError):
    """A triplet file is truncated, foreign or of an unknown version."""


@dataclass(frozen=True)
class DegeneracyFlag:
    rank_deficient: bool
    min_abs_rii: float
    threshold: float


def _householder_inplace(r: np.ndarray, vectors: list | None = None) -> None:
    """Reduce each ``(m, n)`` slice of ``r`` (shape ``(B, m, n)``) to upper-triangular form.

    No column pivoting. The reflector for column k maps ``x = r[k:, k]`` to
    ``-sign(x_0) |x| e_1`` (sign(0) taken as +1), so ``|r_kk| = |x|``.
    """
    batch, m, n = r.shape
    for k in range(n):
        x = r[:, k:, k]
        norm_x = np.sqrt(np.einsum("bi,bi->b", x, x))
        sign = np.where(x[:, 0] >= 0.0, 1.0, -1.0)
        v = x.copy()
        v[:, 0] += sign * norm_x
        norm_v = np.sqrt(np.einsum("bi,bi->b", v, v))
        live = norm_v > 0.0
        v[live] /= norm_v[live, None]
        v[~live] = 0.0
        block = r[:, k:, k:]
        block -= 2.0 * v[:, :, None] * np.einsum("bi,bij->bj", v, block)[:, None, :]
        # clean the annihilated entries and pin the diagonal to its exact magnitude
        r[:, k + 1:, k] = 0.0
        r[:, k, k] = np.where(live, -sign * norm_x, x[:, 0])
        if vectors is not None:
            vectors.append(v)


def householder_r_batch(jac: np.ndarray) -> np.ndarray:
    """Upper-triangular ``R`` factors ``(B, n, n)`` of a stack of ``(m, n)`` matrices."""
    jac = np.asarray(jac, dtype=np.float64)
    if jac.ndim != 3:
        raise ShapeError("expected a (B, m, n) stack of matrices")
    _, m, n = jac.shape
    if m < n:
        raise ShapeError(f"metric tensor of a {m}x{n} Jacobian is singular by construction (m < n)")
    r = jac.copy()
    _householder_inplace(r)
    return r[:, :n, :]


def householder_qr(a) -> tuple[np.ndarray, np.ndarray]:
    """Thin QR ``A = Q R`` with ``Q`` ``(m, n)`` orthonormal columns and ``R`` ``(n, n)``."""
    a = np.asarray(a, dtype=np.float64)
    if a.ndim != 2:
        raise ShapeError("householder_qr takes a 2-D matrix")
    m, n = a.shape
    if m < n:
        raise ShapeError(f"thin QR needs m >= n, got {m}x{n}")
    r = a[None].copy()
    vectors: list[np.ndarray] = []
    _householder_inplace(r, vectors)
    # Q = H_0 H_1 ... H_{n-1} applied to the first n columns of the identity
    q = np.eye(m, n)
    for k in range(n - 1, -1, -1):
        v = vectors[k][0]
        q[k:, :] -= 2.0 * np.outer(v, v @ q[k:, :])
    return q, r[0, :n, :]


def log_det_metric_batch(jac: np.ndarray, threshold: float = DEFAULT_THRESHOLD):
    """Vectorized :func:`log_det_metric`; returns (log_det_sqrt, min |r_ii|, degenerate)."""
    r = householder_r_batch(jac)
    diag = np.abs(np.diagonal(r, axis1=1, axis2=2))
    with np.errstate(divide="ignore"):
        log_det = np.sum(np.log(diag), axis=1)
    r_min = diag.min(axis=1)
    return log_det, r_min, r_min < threshold


def log_det_metric(jac, threshold: float = DEFAULT_THRESHOLD) -> tuple[float, DegeneracyFlag]:
    """``sum_i log |r_ii| = 1/2 log det(J^T J)`` for one ``(m, n)`` Jacobian, ``m >= n``."""
    jac = np.asarray(jac, dtype=np.float64)
    if jac.ndim != 2:
        raise ShapeError("log_det_metric takes a single (m, n) matrix")
    log_det, r_min, degenerate = log_det_metric_batch(jac[None], threshold)
    return float(log_det[0]), DegeneracyFlag(bool(degenerate[0]), float(r_min[0]), threshold)


def manifold_log_density_batch(gen: Generator, z, threshold: float = DEFAULT_THRESHOLD,
                               chunk: int = 4096):
    """Manifold log-densities for a batch of latents.

    Returns ``(log_px, min_abs_rii, degenerate)`` arrays of length B.
    """
    z = np.atleast_2d(np.asarray(z, dtype=np.float64))
    if z.shape[1] != gen.latent_dim:
        raise ShapeError(f"latent batch has width {z.shape[1]}, generator expects {gen.latent_dim}")
    if gen.output_dim < gen.latent_dim:
        raise ShapeError("generator output dim is smaller than latent dim")
    out_logp, out_rmin, out_flag = [], [], []
    for start in range(0, z.shape[0], chunk):
        zc = z[start:start + chunk]
        jac = nn.jacobian_batch(gen.spec, gen.params, zc)
        if not np.all(np.isfinite(jac)):
            raise NumericalError("non-finite generator Jacobian")
        log_det, r_min, degenerate = log_det_metric_batch(jac, threshold)
        log_px = log_prior_density(gen.prior, zc) - log_det
        if np.any(np.isnan(log_px)) or np.any(np.isinf(log_px) & ~degenerate):
            raise NumericalError("non-finite log-density at a non-degenerate point")
        out_logp.append(log_px)
        out_rmin.append(r_min)
        out_flag.append(degenerate)
    return np.concatenate(out_logp), np.concatenate(out_rmin), np.concatenate(out_flag)


def manifold_log_density(gen: Generator, z, threshold: float = DEFAULT_THRESHOLD
                         ) -> tuple[float, DegeneracyFlag]:
    """``log p(G(z)) = log p(z) - sum_i log |r_ii|``.

    A rank-deficient Jacobian is not an error: the value comes back with the
    flag set and the caller decides whether to trust it.
    """
    z = np.asarray(z, dtype=np.float64)
    if z.ndim != 1:
        raise ShapeError("manifold_log_density takes one latent vector")
    log_px, r_min, degenerate = manifold_log_density_batch(gen, z[None], threshold)
    return float(log_px[0]), DegeneracyFlag(bool(degenerate[0]), float(r_min[0]), threshold)


def bijective_log_density(gen: Generator, z) -> float:
    """``log p(z) - log |det J|`` for a square generator, through an LU determinant."""
    if gen.output_dim != gen.latent_dim:
        raise ShapeError("bijective change of variables needs a square generator (m == n)")
    jac = nn.jacobian_analytic(gen.spec, gen.params, z)
    sign, logabs = np.linalg.slogdet(jac)
    if sign == 0 or not np.isfinite(logabs):
        raise np.linalg.LinAlgError("singular generator Jacobian")
    return float(log_prior_density(gen.prior, z) - logabs)


# -- triplets ----------------------------------------------------------------

@dataclass(frozen=True)
class DensityTriplet:
    z: np.ndarray
    x: np.ndarray
    log_px: float
    degenerate: bool = False


@dataclass
class TripletSet:
    """Column storage for many ``(z, G(z), log p(G(z)))`` records."""

    z: np.ndarray
    x: np.ndarray
    log_px: np.ndarray
    degenerate: np.ndarray
    generator_hash: bytes = b"\0" * 32

    def __len__(self) -> int:
        return self.z.shape[0]

    def __getitem__(self, i) -> DensityTriplet:
        return DensityTriplet(self.z[i], self.x[i], float(self.log_px[i]), bool(self.degenerate[i]))

    def __iter__(self):
        return (self[i] for i in range(len(self)))

    @property
    def latent_dim(self) -> int:
        return self.z.shape[1]

    @property
    def output_dim(self) -> int:
        return self.x.shape[1]

    def subset(self, mask_or_index) -> "TripletSet":
        return TripletSet(self.z[mask_or_index], self.x[mask_or_index], self.log_px[mask_or_index],
                          self.degenerate[mask_or_index], self.generator_hash)

    def usable(self) -> "TripletSet":
        """Records fit for regressor training (degenerate ones dropped)."""
        return self.subset(~self.degenerate)

    @property
    def degenerate_count(self) -> int:
        return int(np.count_nonzero(self.degenerate))


def generator_hash(gen: Generator) -> bytes:
    return hashlib.sha256(nn.dump_parameters(gen.spec, gen.params, "generator")).digest()


def sample_triplets(gen: Generator, count: int, seed: int = 0,
                    threshold: float = DEFAULT_THRESHOLD) -> TripletSet:
    """Draw ``count`` latents and label each generated point with its log-density.

    Latents come in fixed chunks of :data:`TRIPLET_CHUNK`, chunk ``c`` using its
    own stream spawned from ``seed``; a smaller count therefore yields a
    prefix of a larger one.
    """
    if count < 1:
        raise ValueError(f"triplet count must be >= 1, got {count}")
    n_chunks = -(-count // TRIPLET_CHUNK)
    streams = np.random.SeedSequence(seed).spawn(n_chunks)
    zs = []
    for c, stream in enumerate(streams):
        size = min(TRIPLET_CHUNK, count - c * TRIPLET_CHUNK)
        zs.append(np.random.default_rng(stream).standard_normal((TRIPLET_CHUNK, gen.latent_dim))[:size])
    z = np.concatenate(zs)
    x = generate(gen, z)
    log_px, _, degenerate = manifold_log_density_batch(gen, z, threshold)
    return TripletSet(z, x, log_px, degenerate, generator_hash(gen))


def _record_dtype(n: int, m: int) -> np.dtype:
    return np.dtype([("z", "<f8", (n,)), ("x", "<f8", (m,)), ("log_px", "<f8"), ("flag", "u1")])


def write_triplets(path, triplets: TripletSet) -> None:
    """Header (magic, version, n, m, count, 32-byte generator hash), then packed records."""
    n, m, count = triplets.latent_dim, triplets.output_dim, len(triplets)
    rec = np.empty(count, dtype=_record_dtype(n, m))
    rec["z"], rec["x"] = triplets.z, triplets.x
    rec["log_px"], rec["flag"] = triplets.log_px, triplets.degenerate.astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(_TRIPLET_MAGIC)
        fh.write(struct.pack("<IIIQ", _TRIPLET_VERSION, n, m, count))
        fh.write(triplets.generator_hash.ljust(32, b"\0")[:32])
        fh.write(rec.tobytes())


def read_triplets(path) -> TripletSet:
    with open(path, "rb") as fh:
        data = fh.read()
    head = len(_TRIPLET_MAGIC) + 20 + 32
    if len(data) < head or data[:len(_TRIPLET_MAGIC)] != _TRIPLET_MAGIC:
        raise TripletFormatError(f"{path}: not a triplet file")
    version, n, m, count = struct.unpack("<IIIQ", data[8:28])
    if version != _TRIPLET_VERSION:
        raise TripletFormatError(f"{path}: unsupported triplet file version {version}")
    digest = data[28:60]
    dtype = _record_dtype(n, m)
    if len(data) - head != count * dtype.itemsize:
        raise TripletFormatError(f"{path}: expected {count} records, payload has {len(data) - head} bytes")
    rec = np.frombuffer(data, dtype=dtype, offset=head)
    return TripletSet(rec["z"].astype(np.float64), rec["x"].astype(np.float64),
                      rec["log_px"].astype(np.float64), rec["flag"].astype(bool), digest)


def export_triplets_csv(path, triplets: TripletSet) -> None:
    n, m = triplets.latent_dim, triplets.output_dim
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow([f"z{i}" for i in range(n)] + [f"x{i}" for i in range(m)]
                        + ["log_px", "degenerate"])
        for t in triplets:
            writer.writerow([repr(float(v)) for v in t.z] + [repr(float(v)) for v in t.x]
                            + [repr(t.log_px), int(t.degenerate)])
