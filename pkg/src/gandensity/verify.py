"""Self-contained checks of the density math on toy generators.

Each check builds its own small networks from a seed and compares the
library's log-densities against an independent route (finite differences,
SVD, LU determinants, closed forms, quadrature). The Jacobian and log-det
routines are injectable through :class:`Hooks`, which lets tests plant a bug
and confirm that the suite notices.
"""

from __future__ import annotations

import functools
import inspect
import math
import time
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import nn
from .density import bijective_log_density, log_det_metric_batch
from .models import Generator, LatentPrior, affine_generator, log_prior_density
from .nn import LayerSpec, NetworkSpec, ParameterSet


def _default_log_det(jac: np.ndarray) -> np.ndarray:
    return log_det_metric_batch(jac)[0]


@dataclass
class Hooks:
    """``jacobian(spec, params, z_batch) -> (B, m, n)``; ``log_det(jac) -> (B,)``."""

    jacobian: Callable = nn.jacobian_batch
    log_det: Callable = _default_log_det


@dataclass
class CheckResult:
    name: str
    passed: bool
    error: float
    tolerance: float
    detail: str = ""
    seconds: float = 0.0

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return f"{status} {self.name} error={self.error:.3e} tol={self.tolerance:.0e} {self.detail}".rstrip()


def hooked_log_density(gen: Generator, z, hooks: Hooks) -> np.ndarray:
    z = np.atleast_2d(np.asarray(z, dtype=np.float64))
    jac = hooks.jacobian(gen.spec, gen.params, z)
    return log_prior_density(gen.prior, z) - hooks.log_det(jac)


# -- toy generators ------------------------------------------------------------

def random_mlp(rng: np.random.Generator, n: int, m: int, depth: int | None = None,
               activations=("tanh", "leaky_relu")) -> Generator:
    """Random dense generator with O(1) weights and biases and an identity output layer."""
    depth = int(rng.integers(1, 4)) if depth is None else depth
    layers = []
    for _ in range(depth):
        act = activations[int(rng.integers(len(activations)))]
        layers.append(LayerSpec(int(rng.integers(4, 33)), act, 0.2))
    layers.append(LayerSpec(m, "identity"))
    spec = NetworkSpec(n, tuple(layers))
    widths = spec.widths
    weights = [rng.normal(0.0, 1.0 / math.sqrt(widths[i]), (widths[i + 1], widths[i]))
               for i in range(len(layers))]
    biases = [rng.normal(0.0, 0.5, widths[i + 1]) for i in range(len(layers))]
    return Generator(LatentPrior(n), spec, ParameterSet(weights, biases))


def compose_output(gen: Generator, mat, scale: float = 1.0) -> Generator:
    """``z -> scale * mat @ G(z)``; needs an identity-activation output layer."""
    if gen.spec.layers[-1].activation != "identity":
        raise ValueError("output composition needs an identity output layer")
    mat = np.asarray(mat, dtype=np.float64)
    params = gen.params.copy()
    params.weights[-1] = scale * mat @ params.weights[-1]
    params.biases[-1] = scale * mat @ params.biases[-1]
    layers = gen.spec.layers[:-1] + (LayerSpec(mat.shape[0], "identity"),)
    return Generator(gen.prior, NetworkSpec(gen.spec.input_dim, layers), params)


def _kink_free(gen: Generator, z: np.ndarray, h: float, margin: float) -> bool:
    """True when no leaky/relu pre-activation is within ``margin`` of 0 or flips sign under +-h steps."""
    n = z.shape[0]
    pts = np.concatenate([z[None], z[None] + h * np.eye(n), z[None] - h * np.eye(n)])
    _, trace = nn.forward(gen.spec, gen.params, pts)
    for layer, pre in zip(gen.spec.layers, trace.pre):
        if layer.activation not in ("relu", "leaky_relu"):
            continue
        if np.any(np.abs(pre[0]) < margin) or np.any(np.sign(pre) != np.sign(pre[0])):
            return False
    return True


def random_mixed_generators(seed: int, count: int = 10, max_n: int = 8, max_m: int = 32):
    """``count`` random generators with both tanh and leaky-relu hidden layers."""
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(count):
        n = int(rng.integers(1, max_n + 1))
        m = int(rng.integers(n, max_m + 1))
        depth = int(rng.integers(2, 4))
        gen = random_mlp(rng, n, m, depth)
        acts = {layer.activation for layer in gen.spec.layers[:-1]}
        if acts != {"tanh", "leaky_relu"}:
            # force one of each kind so every generator mixes both nonlinearities
            layers = list(gen.spec.layers)
            layers[0] = LayerSpec(layers[0].out_dim, "tanh")
            layers[1] = LayerSpec(layers[1].out_dim, "leaky_relu", 0.2)
            gen = Generator(gen.prior, NetworkSpec(n, tuple(layers)), gen.params)
        out.append(gen)
    return out


# -- checks ---------------------------------------------------------------------

def _timed(name: str):
    def decorate(fn):
        default_tol = inspect.signature(fn).parameters["tol"].default

        @functools.wraps(fn)
        def wrapper(*args, **kwargs):
            t0 = time.perf_counter()
            try:
                result = fn(*args, **kwargs)
            except Exception as exc:  # a planted bug may crash instead of drifting
                result = CheckResult(name, False, math.inf, kwargs.get("tol", default_tol),
                                     f"raised {type(exc).__name__}: {exc}")
            result.seconds = time.perf_counter() - t0
            return result
        wrapper.check_name = name
        return wrapper
    return decorate


@_timed("jacobian")
def check_jacobian(hooks: Hooks, seed: int = 0, count: int = 10, points: int = 5,
                   h: float = 1e-4, margin: float = 1e-3, tol: float = 1e-5) -> CheckResult:
    """Analytic vs central-difference Jacobians; error is max|dJ| / max|J| per point."""
    rng = np.random.default_rng(seed + 1)
    worst = 0.0
    for gen in random_mixed_generators(seed, count):
        done = 0
        while done < points:
            z = rng.standard_normal(gen.latent_dim)
            if not _kink_free(gen, z, h, margin):
                continue
            ja = hooks.jacobian(gen.spec, gen.params, z[None])[0]
            jf = nn.jacobian_finite_diff(gen.spec, gen.params, z, h)
            worst = max(worst, float(np.max(np.abs(ja - jf)) / np.max(np.abs(jf))))
            done += 1
    return CheckResult("jacobian", worst < tol, worst, tol, f"{count} generators x {points} points")


@_timed("bijective_equivalence")
def check_bijective(hooks: Hooks, seed: int = 0, count: int = 1000, tol: float = 1e-10) -> CheckResult:
    """Square generators: manifold route vs LU determinant route."""
    rng = np.random.default_rng(seed)
    worst = 0.0
    per_gen = 100
    for _ in range(count // per_gen):
        n = int(rng.integers(1, 9))
        gen = random_mlp(rng, n, n, activations=("tanh",))
        z = rng.standard_normal((per_gen, n))
        manifold = hooked_log_density(gen, z, hooks)
        exact = np.array([bijective_log_density(gen, zi) for zi in z])
        worst = max(worst, float(np.max(np.abs(manifold - exact))))
    return CheckResult("bijective_equivalence", worst < tol, worst, tol, f"{count} latent points")


@_timed("qr_vs_svd")
def check_qr_svd(hooks: Hooks, seed: int = 0, count: int = 50, tol: float = 1e-10) -> CheckResult:
    """QR log-det vs sum of log singular values on random m x n matrices up to 128 x 32."""
    rng = np.random.default_rng(seed)
    worst = 0.0
    shapes = [(128, 32), (16, 4), (32, 32)] + [
        (int(m), int(rng.integers(1, min(m, 32) + 1))) for m in rng.integers(1, 129, count)]
    for m, n in shapes:
        a = rng.standard_normal((m, n))
        ours = float(hooks.log_det(a[None])[0])
        ref = float(np.sum(np.log(np.linalg.svd(a, compute_uv=False))))
        worst = max(worst, abs(ours - ref) / max(1.0, abs(ref)))
    return CheckResult("qr_vs_svd", worst < tol, worst, tol, f"{len(shapes)} matrices")


CLOSED_FORM_CASES = (
    # (name, A, z, expected log-density)
    ("identity", np.eye(2), (0.0, 0.0), -math.log(2 * math.pi)),
    ("duplication", np.array([[1.0], [1.0]]), (0.0,), -0.5 * math.log(2 * math.pi) - 0.5 * math.log(2.0)),
    ("scaling", 2.0 * np.eye(2), (0.0, 0.0), -math.log(2 * math.pi) - 2.0 * math.log(2.0)),
    ("identity_offset", np.eye(2), (3.0, 4.0), -math.log(2 * math.pi) - 12.5),
)


@_timed("closed_form")
def check_closed_form(hooks: Hooks, tol: float = 1e-10) -> CheckResult:
    worst = 0.0
    for _, a, z, expected in CLOSED_FORM_CASES:
        got = float(hooked_log_density(affine_generator(a), np.asarray(z), hooks)[0])
        worst = max(worst, abs(got - expected))
    return CheckResult("closed_form", worst < tol, worst, tol,
                       ",".join(c[0] for c in CLOSED_FORM_CASES))


def random_orthogonal(rng: np.random.Generator, m: int) -> np.ndarray:
    q, r = np.linalg.qr(rng.standard_normal((m, m)))
    return q * np.sign(np.diag(r))


@_timed("isometry_invariance")
def check_isometry(hooks: Hooks, seed: int = 0, count: int = 5, points: int = 100,
                   tol: float = 1e-10) -> CheckResult:
    """Rotating the output space leaves every log-density unchanged."""
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(count):
        n = int(rng.integers(1, 6))
        m = int(rng.integers(n + 1, 17))
        gen = random_mlp(rng, n, m)
        rotated = compose_output(gen, random_orthogonal(rng, m))
        z = rng.standard_normal((points, n))
        diff = hooked_log_density(rotated, z, hooks) - hooked_log_density(gen, z, hooks)
        worst = max(worst, float(np.max(np.abs(diff))))
    return CheckResult("isometry_invariance", worst < tol, worst, tol, f"{count} generators")


@_timed("scaling_law")
def check_scaling(hooks: Hooks, seed: int = 0, count: int = 5, points: int = 100,
                  tol: float = 1e-10) -> CheckResult:
    """Scaling the output by c lowers every log-density by n log c."""
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(count):
        n = int(rng.integers(1, 6))
        m = int(rng.integers(n, 17))
        gen = random_mlp(rng, n, m)
        c = float(rng.uniform(0.2, 5.0))
        scaled = compose_output(gen, np.eye(m), c)
        z = rng.standard_normal((points, n))
        shift = hooked_log_density(scaled, z, hooks) - hooked_log_density(gen, z, hooks)
        worst = max(worst, float(np.max(np.abs(shift + n * math.log(c)))))
    return CheckResult("scaling_law", worst < tol, worst, tol, f"{count} generators")


def curve_generator(seed: int = 0, hidden: int = 16) -> Generator:
    """A smooth bending curve ``R -> R^2`` (tanh hidden layer, identity output)."""
    rng = np.random.default_rng(seed)
    spec = NetworkSpec(1, (LayerSpec(hidden, "tanh"), LayerSpec(2, "identity")))
    params = ParameterSet([rng.normal(0.0, 1.5, (hidden, 1)), rng.normal(0.0, 1.0, (2, hidden))],
                          [rng.normal(0.0, 1.0, hidden), np.zeros(2)])
    return Generator(LatentPrior(1), spec, params)


def arc_length_integral(gen: Generator, hooks: Hooks, h: float = 1e-6, bound: float = 12.0) -> float:
    """Integral of exp(log-density) against arc length along a 1-D latent curve.

    The speed |G'(z)| comes from central differences of G, independent of the
    Jacobian under test. The latent line is cut at ``+-bound``; the prior mass
    beyond 12 is below 1e-32, and far out the saturated tanh layer would
    otherwise produce 0 * inf.
    """
    from scipy.integrate import quad

    def integrand(t: float) -> float:
        z = np.array([t])
        speed = float(np.linalg.norm(nn.jacobian_finite_diff(gen.spec, gen.params, z, h)))
        return math.exp(float(hooked_log_density(gen, z, hooks)[0])) * speed

    value, _ = quad(integrand, -bound, bound, epsabs=1e-12, epsrel=1e-9, limit=400)
    return value


@_timed("normalization")
def check_normalization(hooks: Hooks, seed: int = 0, tol: float = 1e-2) -> CheckResult:
    total = arc_length_integral(curve_generator(seed), hooks)
    err = abs(total - 1.0)
    return CheckResult("normalization", err < tol, err, tol, f"integral={total:.6f}")


CHECKS = (check_jacobian, check_bijective, check_qr_svd, check_closed_form,
          check_isometry, check_scaling, check_normalization)


@dataclass
class SuiteReport:
    results: list[CheckResult] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return all(r.passed for r in self.results)

    def by_name(self, name: str) -> CheckResult:
        return next(r for r in self.results if r.name == name)

    def lines(self) -> list[str]:
        return [r.line() for r in self.results]

    def as_dict(self) -> dict:
        return {"passed": self.passed,
                "checks": [{"name": r.name, "passed": r.passed, "error": r.error,
                            "tolerance": r.tolerance, "detail": r.detail,
                            "seconds": round(r.seconds, 3)} for r in self.results]}


def run_suite(hooks: Hooks | None = None, seed: int = 0) -> SuiteReport:
    hooks = Hooks() if hooks is None else hooks
    report = SuiteReport()
    for check in CHECKS:
        if check is check_closed_form:
            report.results.append(check(hooks))
        else:
            report.results.append(check(hooks, seed=seed))
    return report
