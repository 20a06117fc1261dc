"""Closed-form score, covariance truncation and the gradient-descent score."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import scipy.linalg

from .gp import DENSE_CAP, PSD_TOL, CovarianceError, GpSpec, KronCov, TemporalKernel


def alpha(t):
    return np.exp(-0.5 * np.asarray(t, dtype=np.float64))


def sigma2(t):
    return -np.expm1(-np.asarray(t, dtype=np.float64))


class KronSolver:
    """Solves ``(a^2 Gamma(x)Sigma + s^2 I) y = v`` through the Kronecker eigenbasis.

    The two small eigendecompositions are computed once; each ``t`` only
    changes the diagonal, so repeated calls across a time grid are cheap.
    """

    def __init__(self, gamma: np.ndarray, sigma: np.ndarray):
        self.lg, self.qg = np.linalg.eigh(gamma)
        self.ls, self.qs = np.linalg.eigh(sigma)
        self.N, self.d = len(self.lg), len(self.ls)
        self.spectrum = np.outer(self.lg, self.ls)

    def solve(self, t: float, v: np.ndarray) -> np.ndarray:
        a2, s2 = float(alpha(t)) ** 2, float(sigma2(t))
        diag = a2 * self.spectrum + s2
        if diag.min() <= 0:
            raise CovarianceError(f"covariance at t={t} is singular (min eigenvalue {diag.min():.3e})")
        V = v.reshape(*v.shape[:-1], self.N, self.d)
        W = (self.qg.T @ V @ self.qs) / diag
        out = self.qg @ W @ self.qs.T
        return out.reshape(v.shape)


def oracle_score(spec: GpSpec, kernel: TemporalKernel, t: float, x: np.ndarray, solver: KronSolver | None = None):
    """``-(a_t^2 Gamma(x)Sigma + s_t^2 I)^{-1} (x - a_t mu)``; ``x`` may be batched on leading axes."""
    if t < 0:
        raise ValueError("t must be nonnegative")
    if solver is None:
        solver = KronSolver(kernel.matrix, spec.sigma)
    x = np.asarray(x, dtype=np.float64)
    return -solver.solve(t, x - float(alpha(t)) * spec.mu_flat)


def truncate_kernel(kernel: TemporalKernel, J: int) -> tuple[np.ndarray, float]:
    """Banded ``Gamma_bar`` (lags ``< J`` kept) and the exact ``||Gamma - Gamma_bar||_F``."""
    N = kernel.N
    if not 1 <= J <= N:
        raise ValueError(f"J must lie in [1, {N}], got {J}")
    g = np.array(kernel.gamma_diag)
    g[J:] = 0.0
    lags = np.arange(J, N)
    dropped = kernel.gamma_diag[J:]
    frob = math.sqrt(2.0 * float(np.sum((N - lags) * dropped**2)))
    return scipy.linalg.toeplitz(g), frob


def truncation_bound(spec: GpSpec, J: int) -> float:
    """Certified upper bound on ``||Gamma - Gamma_bar||_F^2``."""
    c_nu = spec.c**spec.nu
    return spec.N * spec.ell / c_nu * math.exp(-2.0 * c_nu * (J - 1) ** spec.nu / spec.ell)


def _min_eig(a: np.ndarray) -> float:
    return float(np.linalg.eigvalsh(a)[0])


def choose_J(spec: GpSpec, kernel: TemporalKernel, eps: float, t: float | None = None) -> int:
    """Smallest ``J`` whose certified truncation bound is below the target.

    Without ``t`` the target is ``||dGamma||_F <= eps``.  With ``t`` it is
    tightened to ``eps * min(1, s_t^2 / ||Sigma||_F)`` so that the truncation
    term of the score error stays below the optimisation term.  If the band
    is not PSD, ``J`` grows until it is.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    target = eps
    if t is not None:
        target = eps * min(1.0, float(sigma2(t)) / float(np.linalg.norm(spec.sigma)))
    c_nu = spec.c**spec.nu
    log_arg = spec.N * spec.ell / (target**2 * c_nu)
    if log_arg <= 1.0:
        J = 1
    else:
        root = (spec.ell / (2.0 * c_nu) * math.log(log_arg)) ** (1.0 / spec.nu)
        J = math.ceil(root) + 1
        # Guard against rounding at an exact integer root.
        while J > 1 and truncation_bound(spec, J - 1) <= target**2:
            J -= 1
    J = min(max(J, 1), spec.N)
    while J < spec.N and _min_eig(truncate_kernel(kernel, J)[0]) < -PSD_TOL:
        J += 1
    if _min_eig(truncate_kernel(kernel, J)[0]) < -PSD_TOL:
        raise CovarianceError("kernel matrix is not PSD even without truncation")
    return J


def condition_number(gamma_bar: np.ndarray, sigma: np.ndarray, t: float) -> tuple[float, float, float]:
    """``(kappa, lam_min, lam_max)`` of ``a_t^2 Gamma_bar(x)Sigma + s_t^2 I``."""
    lg = np.linalg.eigvalsh(gamma_bar)
    ls = np.linalg.eigvalsh(sigma)
    return _cond_from_extremes(lg[0], lg[-1], ls[0], ls[-1], t)


def _cond_from_extremes(g_min, g_max, s_min, s_max, t):
    a2, s2 = float(alpha(t)) ** 2, float(sigma2(t))
    lam_max = a2 * g_max * s_max + s2
    lam_min = a2 * max(g_min, 0.0) * s_min + s2
    return lam_max / lam_min, lam_min, lam_max


def iteration_count(kappa: float, eps: float) -> int:
    return max(1, math.ceil((kappa + 1.0) / 2.0 * math.log(1.0 / eps)))


@dataclass(frozen=True)
class GdPlan:
    """Truncation and step-size plan for gradient descent at time ``t``.

    ``K`` is fixed at plan time; :meth:`eta` and :meth:`kappa` can be
    evaluated at any other time, which is how one plan built at the early
    stopping time serves the whole grid (``kappa_t`` decreases in ``t``).
    """

    J: int
    gamma_bar: np.ndarray
    t: float
    eps: float
    K: int
    eta_t: float
    kappa_t: float
    delta_gamma_frob: float
    g_min: float
    g_max: float
    s_min: float
    s_max: float

    def extremes(self, t: float) -> tuple[float, float]:
        _, lo, hi = _cond_from_extremes(self.g_min, self.g_max, self.s_min, self.s_max, t)
        return lo, hi

    def eta(self, t: float) -> float:
        lo, hi = self.extremes(t)
        return 2.0 / (lo + hi)

    def kappa(self, t: float) -> float:
        lo, hi = self.extremes(t)
        return hi / lo

    def ratio(self, t: float) -> float:
        k = self.kappa(t)
        return (k - 1.0) / (k + 1.0)


def build_plan(
    spec: GpSpec,
    kernel: TemporalKernel,
    t: float,
    eps: float,
    J: int | None = None,
    K: int | None = None,
) -> GdPlan:
    if J is None:
        J = choose_J(spec, kernel, eps, t)
    gamma_bar, dfrob = truncate_kernel(kernel, J)
    lg = np.linalg.eigvalsh(gamma_bar)
    if lg[0] < -PSD_TOL:
        raise CovarianceError(f"truncated kernel (J={J}) is indefinite: min eigenvalue {lg[0]:.3e}")
    ls = np.linalg.eigvalsh(spec.sigma)
    kappa, lo, hi = _cond_from_extremes(lg[0], lg[-1], ls[0], ls[-1], t)
    if K is None:
        K = iteration_count(kappa, eps)
    gamma_bar.setflags(write=False)
    return GdPlan(
        J=J, gamma_bar=gamma_bar, t=float(t), eps=float(eps), K=int(K),
        eta_t=2.0 / (lo + hi), kappa_t=kappa, delta_gamma_frob=dfrob,
        g_min=float(lg[0]), g_max=float(lg[-1]), s_min=float(ls[0]), s_max=float(ls[-1]),
    )


def _apply_exact(plan: GdPlan, sigma: np.ndarray, t: float):
    a2, s2 = float(alpha(t)) ** 2, float(sigma2(t))
    N, d = plan.gamma_bar.shape[0], sigma.shape[0]
    if N * d <= DENSE_CAP:
        A = a2 * np.kron(plan.gamma_bar, sigma) + s2 * np.eye(N * d)
        return lambda s: s @ A.T
    op = KronCov(plan.gamma_bar, sigma)
    return lambda s: a2 * op.matvec(s) + s2 * s


def _apply_per_patch(plan: GdPlan, sigma: np.ndarray, t: float):
    a2, s2 = float(alpha(t)) ** 2, float(sigma2(t))
    N, d = plan.gamma_bar.shape[0], sigma.shape[0]
    gamma = plan.gamma_bar

    def apply(s):
        S = s.reshape(*s.shape[:-1], N, d)
        out = np.empty_like(S)
        for i in range(N):
            acc = s2 * S[..., i, :]
            for j in range(max(0, i - plan.J + 1), min(N, i + plan.J)):
                acc = acc + a2 * gamma[i, j] * (S[..., j, :] @ sigma.T)
            out[..., i, :] = acc
        return out.reshape(s.shape)

    return apply


def gd_score(
    plan: GdPlan,
    spec: GpSpec,
    t: float,
    x: np.ndarray,
    mode: str = "exact",
    K: int | None = None,
    s0: np.ndarray | None = None,
) -> np.ndarray:
    """Iterates ``s^(0..K)`` of gradient descent on the truncated quadratic objective.

    Returns an array of shape ``(K + 1, *x.shape)``; the last entry is the
    score estimate.
    """
    if mode == "exact":
        apply = _apply_exact(plan, spec.sigma, t)
    elif mode == "per_patch":
        apply = _apply_per_patch(plan, spec.sigma, t)
    else:
        raise ValueError(f"unknown mode {mode!r}")
    K = plan.K if K is None else K
    x = np.asarray(x, dtype=np.float64)
    r = x - float(alpha(t)) * spec.mu_flat
    eta = plan.eta(t)
    traj = np.empty((K + 1, *x.shape))
    traj[0] = 0.0 if s0 is None else s0
    for k in range(K):
        s = traj[k]
        traj[k + 1] = s - eta * (apply(s) + r)
    return traj


def truncated_solution(plan: GdPlan, spec: GpSpec, t: float, x: np.ndarray) -> np.ndarray:
    """Minimiser of the truncated objective, by a direct solve."""
    r = np.asarray(x, dtype=np.float64) - float(alpha(t)) * spec.mu_flat
    return -KronSolver(plan.gamma_bar, spec.sigma).solve(t, r)


def objective(plan: GdPlan, spec: GpSpec, t: float, x: np.ndarray, s: np.ndarray) -> np.ndarray:
    """``s^T A s / 2 + s^T (x - a_t mu)`` for the truncated system matrix ``A``."""
    r = np.asarray(x, dtype=np.float64) - float(alpha(t)) * spec.mu_flat
    As = _apply_exact(plan, spec.sigma, t)(s)
    return 0.5 * np.sum(s * As, axis=-1) + np.sum(s * r, axis=-1)


@dataclass(frozen=True)
class ScoreEvalReport:
    t: float
    J: int
    K: int
    kappa: float
    err_l2: float
    bound_e1: float
    bound_e2: float
    contraction_measured: float
    contraction_bound: float

    @property
    def holds(self) -> bool:
        return self.err_l2 <= self.bound_e1 + self.bound_e2 + 1e-9

    def row(self) -> list[float]:
        return [self.t, self.J, self.K, self.kappa, self.err_l2, self.bound_e1, self.bound_e2,
                self.contraction_measured]


REPORT_COLUMNS = ["t", "J", "K", "kappa", "err_l2", "E1", "E2", "contraction"]


def measured_contraction(traj: np.ndarray, s_bar: np.ndarray, floor: float = 1e-4) -> float:
    """Largest one-step ratio of distances to ``s_bar``.

    Steps whose starting distance is below ``floor * ||s^(0) - s_bar||`` are
    skipped: there the ratio is dominated by rounding, not by the iteration.
    """
    dist = np.linalg.norm(traj - s_bar, axis=-1)
    start = dist[0]
    worst = 0.0
    for k in range(len(dist) - 1):
        if dist[k] <= floor * start or dist[k] == 0.0:
            break
        worst = max(worst, dist[k + 1] / dist[k])
    return worst


def error_report(
    plan: GdPlan,
    spec: GpSpec,
    kernel: TemporalKernel,
    t: float,
    x: np.ndarray,
    check: bool = True,
) -> ScoreEvalReport:
    """Compare ``s^(K)`` with the exact score against the two-term error bound."""
    x = np.asarray(x, dtype=np.float64)
    r_norm = float(np.linalg.norm(x - float(alpha(t)) * spec.mu_flat))
    s2 = float(sigma2(t))
    traj = gd_score(plan, spec, t, x)
    exact = oracle_score(spec, kernel, t, x)
    err = float(np.linalg.norm(traj[-1] - exact))
    # With an under-sized K fall back to the raw contraction factor.
    rate = plan.eps if plan.K >= iteration_count(plan.kappa(t), plan.eps) else plan.ratio(t) ** plan.K
    e1 = r_norm * rate / s2
    e2 = float(np.linalg.norm(spec.sigma)) * r_norm / s2**2 * plan.delta_gamma_frob
    s_bar = truncated_solution(plan, spec, t, x)
    rep = ScoreEvalReport(
        t=float(t), J=plan.J, K=plan.K, kappa=plan.kappa(t), err_l2=err, bound_e1=e1, bound_e2=e2,
        contraction_measured=measured_contraction(traj, s_bar), contraction_bound=plan.ratio(t),
    )
    if check and not rep.holds:
        raise AssertionError(f"score error {err:.3e} exceeds bound {e1 + e2:.3e}")
    return rep
