"""Gaussian-process sequence model: time embeddings, temporal kernel, sampling."""

from __future__ import annotations

import hashlib
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg

from . import rng

KERNEL_MODES = ("index", "embedding")
DENSE_CAP = 4096
PSD_TOL = 1e-10


class CovarianceError(ValueError):
    """Covariance matrix is not (numerically) positive semidefinite."""


def _frozen(a) -> np.ndarray:
    a = np.array(a, dtype=np.float64)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class GpSpec:
    """Stationary GP observed on ``N`` uniform time points, ``d`` dims each.

    ``mu`` has shape ``(N, d)``; the stacked vector is patch-major, i.e.
    ``x.reshape(N, d)[i]`` is patch ``i``.
    """

    d: int
    N: int
    sigma: np.ndarray
    mu: np.ndarray | None = None
    nu: float = 1.0
    ell: float = 1.0
    kernel_mode: str = "index"
    r: float = 1.0
    period: float | None = None
    d_e: int = field(default=2, init=False)

    def __post_init__(self):
        if self.d < 1 or self.N < 2:
            raise ValueError(f"need d >= 1 and N >= 2, got d={self.d}, N={self.N}")
        if not 1.0 <= self.nu <= 2.0:
            raise ValueError(f"nu must lie in [1, 2], got {self.nu}")
        if self.ell <= 0:
            raise ValueError(f"ell must be positive, got {self.ell}")
        if self.kernel_mode not in KERNEL_MODES:
            raise ValueError(f"kernel_mode must be one of {KERNEL_MODES}")
        if self.r <= 0:
            raise ValueError("embedding radius r must be positive")
        period = 4.0 * self.N if self.period is None else float(self.period)
        if period < 2 * (self.N - 1):
            raise ValueError(
                f"period {period} < 2(N-1) = {2 * (self.N - 1)}: "
                "embedding distance would not be increasing in the lag"
            )
        object.__setattr__(self, "period", period)

        sigma = _frozen(self.sigma)
        if sigma.shape != (self.d, self.d):
            raise ValueError(f"sigma must be {self.d}x{self.d}, got {sigma.shape}")
        if not np.allclose(sigma, sigma.T, rtol=0, atol=1e-12 * max(1.0, np.abs(sigma).max())):
            raise ValueError("sigma is not symmetric")
        try:
            np.linalg.cholesky(sigma)
        except np.linalg.LinAlgError as exc:
            raise CovarianceError("sigma is not positive definite") from exc
        object.__setattr__(self, "sigma", sigma)

        mu = np.zeros((self.N, self.d)) if self.mu is None else self.mu
        mu = _frozen(np.asarray(mu, dtype=np.float64).reshape(self.N, self.d))
        object.__setattr__(self, "mu", mu)

    @property
    def dim(self) -> int:
        return self.N * self.d

    @property
    def c(self) -> float:
        """Lower slope of the lag-to-distance map, ``f(k) >= c k``."""
        if self.kernel_mode == "index":
            return 1.0
        return 4.0 * self.r / self.period

    @property
    def mu_flat(self) -> np.ndarray:
        return self.mu.reshape(-1)

    def digest(self) -> str:
        """Stable content hash (used in run manifests)."""
        h = hashlib.sha256()
        for key in ("d", "N", "nu", "ell", "kernel_mode", "r", "period"):
            h.update(f"{key}={getattr(self, key)!r};".encode())
        h.update(np.ascontiguousarray(self.sigma).tobytes())
        h.update(np.ascontiguousarray(self.mu).tobytes())
        return h.hexdigest()


@dataclass(frozen=True)
class TimeEmbeddings:
    e: np.ndarray  # (N, d_e)
    r: float
    period: float
    f: np.ndarray  # f(k), k = 0..N-1
    f2: np.ndarray  # f(k)^2
    delta: float

    @property
    def c(self) -> float:
        return 4.0 * self.r / self.period

    def gram(self) -> np.ndarray:
        return self.e @ self.e.T


def embedding_distance(k, r: float, period: float):
    """``f(k) = 2 r sin(k pi / C)``."""
    return 2.0 * r * np.sin(np.asarray(k, dtype=np.float64) * np.pi / period)


def build_embeddings(spec: GpSpec) -> TimeEmbeddings:
    N, r, C = spec.N, spec.r, spec.period
    if C < 2 * (N - 1):
        raise ValueError(f"period {C} < 2(N-1)")
    idx = np.arange(N, dtype=np.float64)
    e = np.stack([r * np.sin(2 * idx * np.pi / C), r * np.cos(2 * idx * np.pi / C)], axis=1)
    f = embedding_distance(np.arange(N), r, C)
    f2 = f * f
    # Include the 0 -> 1 gap: the lag-0 trapezoid needs it as well.
    delta = float(np.min(np.diff(f2)))
    if not delta > 0:
        raise ValueError("embedding gaps are not strictly increasing")
    return TimeEmbeddings(_frozen(e), float(r), float(C), _frozen(f), _frozen(f2), delta)


@dataclass(frozen=True)
class TemporalKernel:
    """Symmetric Toeplitz correlation ``Gamma_ij = gamma_{|i-j|}``."""

    gamma_diag: np.ndarray

    @property
    def N(self) -> int:
        return len(self.gamma_diag)

    @property
    def matrix(self) -> np.ndarray:
        return scipy.linalg.toeplitz(self.gamma_diag)

    @classmethod
    def identity(cls, N: int) -> TemporalKernel:
        g = np.zeros(N)
        g[0] = 1.0
        return cls(_frozen(g))


def build_kernel(spec: GpSpec, emb: TimeEmbeddings | None = None) -> TemporalKernel:
    m = np.arange(spec.N, dtype=np.float64)
    if spec.kernel_mode == "embedding":
        if emb is None:
            emb = build_embeddings(spec)
        dist = emb.f
    else:
        dist = m
    gamma = np.exp(-(dist**spec.nu) / spec.ell)
    return TemporalKernel(_frozen(gamma))


def check_diag_dominance(kernel: TemporalKernel) -> tuple[bool, float]:
    """Row-sum test on the worst (middle) row; returns ``(dominant, margin)``."""
    margin = 1.0 - 2.0 * float(np.sum(np.abs(kernel.gamma_diag[1:])))
    return margin >= 0.0, margin


class KronCov:
    """``Gamma (x) Sigma`` acting on patch-major vectors of length ``N d``."""

    def __init__(self, gamma: np.ndarray, sigma: np.ndarray, cap: int = DENSE_CAP):
        self.gamma = np.asarray(gamma, dtype=np.float64)
        self.sigma = np.asarray(sigma, dtype=np.float64)
        self.N = self.gamma.shape[0]
        self.d = self.sigma.shape[0]
        self.cap = cap

    @property
    def shape(self):
        n = self.N * self.d
        return (n, n)

    def matvec(self, v: np.ndarray) -> np.ndarray:
        v = np.asarray(v, dtype=np.float64)
        V = v.reshape(*v.shape[:-1], self.N, self.d)
        out = self.gamma @ V @ self.sigma.T
        return out.reshape(v.shape)

    def dense(self) -> np.ndarray:
        if self.N * self.d > self.cap:
            raise MemoryError(
                f"dense Gamma(x)Sigma of size {self.N * self.d} exceeds cap {self.cap}; use matvec"
            )
        return np.kron(self.gamma, self.sigma)

    def eigvals(self) -> np.ndarray:
        lg = np.linalg.eigvalsh(self.gamma)
        ls = np.linalg.eigvalsh(self.sigma)
        return np.sort(np.outer(lg, ls).ravel())


def kron_cov(kernel: TemporalKernel | np.ndarray, sigma: np.ndarray, cap: int = DENSE_CAP) -> KronCov:
    gamma = kernel.matrix if isinstance(kernel, TemporalKernel) else kernel
    return KronCov(gamma, sigma, cap)


def psd_sqrt(a: np.ndarray, tol: float = PSD_TOL) -> np.ndarray:
    """Lower Cholesky factor, or a clamped eigen square root for PSD-singular input."""
    try:
        return np.linalg.cholesky(a)
    except np.linalg.LinAlgError:
        pass
    w, q = np.linalg.eigh(a)
    if w[0] < -tol:
        raise CovarianceError(f"matrix is indefinite: min eigenvalue {w[0]:.3e} < -{tol:g}")
    return q * np.sqrt(np.clip(w, 0.0, None))


def _map_rows(fn, n: int, workers: int, chunk: int = 512):
    """Apply ``fn(start, stop)`` to row chunks; output is independent of ``workers``."""
    bounds = [(a, min(a + chunk, n)) for a in range(0, n, chunk)]
    if workers <= 1 or len(bounds) <= 1:
        parts = [fn(a, b) for a, b in bounds]
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            parts = list(pool.map(lambda ab: fn(*ab), bounds))
    return parts


def sample_gp(
    spec: GpSpec,
    kernel: TemporalKernel,
    n: int,
    seed: int,
    workers: int = 1,
) -> np.ndarray:
    """Draw ``n`` sequences, shape ``(n, N, d)``; sample ``k`` uses stream ``seed_split(seed, k)``."""
    if n == 0:
        return np.empty((0, spec.N, spec.d))
    lg = psd_sqrt(kernel.matrix)
    ls = np.linalg.cholesky(spec.sigma)

    def run(a, b):
        z = rng.stacked_normals(seed, b - a, (spec.N, spec.d), offset=a)
        return spec.mu + lg @ z @ ls.T

    return np.concatenate(_map_rows(run, n, workers), axis=0)


def random_spd(d: int, seed: int, ridge: float = 0.0) -> np.ndarray:
    """``A^T A (+ ridge I)`` with ``A`` a standard Gaussian ``d x d`` matrix."""
    a = rng.normals(seed, (d, d))
    s = a.T @ a + ridge * np.eye(d)
    return 0.5 * (s + s.T)
