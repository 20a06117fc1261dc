"""Empirical covariance, kernel recovery and the relative-error metric."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import rng
from .diffusion import DiffusionSchedule, ScoreFn, backward_sample
from .gp import GpSpec, TemporalKernel, sample_gp


@dataclass(frozen=True)
class CovEstimate:
    mu_hat: np.ndarray  # (N, d)
    sigma_hat: np.ndarray  # (N, N, d, d); [i, j] is the (i, j) cross-covariance
    n_used: int

    @property
    def pooled_sigma(self) -> np.ndarray:
        """Average of the diagonal blocks; all of them estimate the same matrix."""
        N = self.sigma_hat.shape[0]
        return np.einsum("iikl->kl", self.sigma_hat) / N


def estimate_cov(batch: np.ndarray, N: int | None = None, d: int | None = None) -> CovEstimate:
    """Mean and all block cross-covariances with ``1/n`` normalisation.

    ``batch`` is ``(n, N, d)`` or ``(n, N d)`` (then ``N`` and ``d`` are required).
    """
    batch = np.asarray(batch, dtype=np.float64)
    if batch.ndim == 2:
        if N is None or d is None:
            raise ValueError("flat batches need N and d")
        batch = batch.reshape(len(batch), N, d)
    n = batch.shape[0]
    if n < 2:
        raise ValueError(f"need at least 2 samples, got {n}")
    mu = batch.mean(axis=0)
    c = batch - mu
    flat = c.reshape(n, -1)
    cov = flat.T @ flat / n
    N, d = batch.shape[1], batch.shape[2]
    blocks = cov.reshape(N, d, N, d).transpose(0, 2, 1, 3)
    return CovEstimate(mu_hat=mu, sigma_hat=blocks, n_used=n)


def estimate_kernel(cov: CovEstimate, sigma_true: np.ndarray) -> np.ndarray:
    """Least-squares ``gamma_ij = <S_ij, Sigma>_F / ||Sigma||_F^2`` for every block."""
    norm2 = float(np.sum(sigma_true * sigma_true))
    if norm2 == 0.0:
        raise ValueError("sigma_true must be nonzero")
    return np.einsum("ijkl,kl->ij", cov.sigma_hat, sigma_true) / norm2


def kron_frob_distance(a: np.ndarray, b: np.ndarray, c: np.ndarray, d: np.ndarray) -> float:
    """``||a (x) b - c (x) d||_F`` without forming either product."""
    sq = (np.sum(a * a) * np.sum(b * b) - 2.0 * np.sum(a * c) * np.sum(b * d)
          + np.sum(c * c) * np.sum(d * d))
    return float(np.sqrt(max(sq, 0.0)))


def raw_frob(batch: np.ndarray, spec: GpSpec, kernel: TemporalKernel) -> float:
    """``||Gamma_hat (x) Sigma_hat - Gamma (x) Sigma||_F`` with pooled ``Sigma_hat``."""
    cov = estimate_cov(np.asarray(batch).reshape(len(batch), spec.N, spec.d))
    g_hat = estimate_kernel(cov, spec.sigma)
    return kron_frob_distance(g_hat, cov.pooled_sigma, kernel.matrix, spec.sigma)


def relative_error(gen: np.ndarray, truth: np.ndarray, spec: GpSpec, kernel: TemporalKernel) -> float:
    """Squared covariance error of ``gen`` relative to that of an equal-size real batch."""
    if len(gen) != len(truth):
        raise ValueError(f"batch sizes differ: {len(gen)} vs {len(truth)}")
    den = raw_frob(truth, spec, kernel) ** 2
    if den == 0.0:
        raise ZeroDivisionError("truth batch reproduces the covariance exactly")
    return raw_frob(gen, spec, kernel) ** 2 / den


SWEEP_COLUMNS = ["n", "seed", "epsilon", "raw_frob"]


def error_vs_n_sweep(
    score: ScoreFn,
    spec: GpSpec,
    kernel: TemporalKernel,
    n_list,
    seed: int,
    schedule_for=None,
    workers: int = 1,
) -> list[tuple]:
    """Rows ``(n, seed, epsilon, raw_frob)``; ``schedule_for(n)`` defaults to ``T = log n``."""
    n_list = list(n_list)
    if any(b <= a for a, b in zip(n_list, n_list[1:])):
        raise ValueError("n_list must be strictly increasing")
    if schedule_for is None:
        schedule_for = DiffusionSchedule.for_sample_size
    rows = []
    for n in n_list:
        s = rng.seed_path(seed, n)
        gen = backward_sample(schedule_for(n), score, n, rng.seed_split(s, rng.STREAM_BACKWARD),
                              workers=workers)
        truth = sample_gp(spec, kernel, n, rng.seed_split(s, rng.STREAM_TRUTH), workers)
        truth = truth.reshape(n, -1)
        rows.append((n, seed, relative_error(gen, truth, spec, kernel), raw_frob(gen, spec, kernel)))
    return rows
