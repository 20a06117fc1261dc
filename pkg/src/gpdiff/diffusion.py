"""Forward noising, backward sampling and the denoising loss."""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.integrate import trapezoid

from . import rng
from .gp import GpSpec, TemporalKernel, _map_rows, sample_gp
from .score import GdPlan, KronSolver, alpha, build_plan, gd_score, sigma2

INTEGRATORS = ("em", "ddpm_exp")


@dataclass(frozen=True)
class DiffusionSchedule:
    """Geometric time grid from ``T`` down to ``t0`` for the OU process."""

    T: float
    t0: float = 1e-3
    steps: int = 500
    grid: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        if not (self.T > 0 and 0 < self.t0 <= self.T):
            raise ValueError(f"need 0 < t0 <= T, got t0={self.t0}, T={self.T}")
        if self.steps < 1:
            raise ValueError("steps must be >= 1")
        k = np.arange(self.steps + 1) / self.steps
        grid = self.T * (self.t0 / self.T) ** k
        grid[0], grid[-1] = self.T, self.t0
        grid.setflags(write=False)
        object.__setattr__(self, "grid", grid)

    @classmethod
    def for_sample_size(cls, n: int, t0: float = 1e-3, steps: int = 500) -> DiffusionSchedule:
        return cls(T=math.log(n), t0=t0, steps=steps)

    def alpha(self, t):
        return alpha(t)

    def sigma2(self, t):
        return sigma2(t)

    def sigma(self, t):
        return np.sqrt(sigma2(t))

    def as_dict(self) -> dict:
        return {"T": self.T, "t0": self.t0, "steps": self.steps}


class ScoreFn:
    """Callable ``(x, t) -> score`` on patch-major vectors; ``x`` may be batched."""

    tag = "abstract"
    dim: int

    def __call__(self, x: np.ndarray, t: float) -> np.ndarray:
        raise NotImplementedError


class OracleScore(ScoreFn):
    tag = "oracle"

    def __init__(self, spec: GpSpec, kernel: TemporalKernel):
        self.spec, self.kernel = spec, kernel
        self.dim = spec.dim
        self._solver = KronSolver(kernel.matrix, spec.sigma)

    def __call__(self, x, t):
        r = np.asarray(x, dtype=np.float64) - float(alpha(t)) * self.spec.mu_flat
        return -self._solver.solve(t, r)


class GdScore(ScoreFn):
    """``K`` gradient steps on the truncated objective; ``J`` and ``K`` fixed by one plan."""

    tag = "gd"

    def __init__(self, spec: GpSpec, plan: GdPlan, K: int | None = None):
        self.spec, self.plan = spec, plan
        self.K = plan.K if K is None else K
        self.dim = spec.dim

    @classmethod
    def at_early_stop(cls, spec, kernel, t0: float, eps: float, **kw) -> GdScore:
        return cls(spec, build_plan(spec, kernel, t0, eps, **kw))

    def __call__(self, x, t):
        return gd_score(self.plan, self.spec, t, x, K=self.K)[-1]


def forward_marginal_sample(
    spec: GpSpec, kernel: TemporalKernel, t: float, n: int, seed: int, workers: int = 1
) -> np.ndarray:
    """Exact draws of ``x_t = a_t x_0 + s_t z``, shape ``(n, N d)``."""
    if t < 0:
        raise ValueError("t must be nonnegative")
    x0 = sample_gp(spec, kernel, n, rng.seed_split(seed, rng.STREAM_DATA), workers).reshape(n, -1)
    z = rng.stacked_normals(rng.seed_split(seed, rng.STREAM_PROBE), n, spec.dim)
    return float(alpha(t)) * x0 + math.sqrt(float(sigma2(t))) * z


class NonFiniteStateError(FloatingPointError):
    pass


def _integrate(y, score, schedule, noise, integrator):
    grid = schedule.grid
    for k in range(schedule.steps):
        t, t_next = grid[k], grid[k + 1]
        h = t - t_next
        s = score(y, t)
        z = noise[:, k + 1]
        if integrator == "em":
            y = y + h * (0.5 * y + s) + math.sqrt(h) * z
        else:
            e = math.exp(0.5 * h)
            y = e * y + 2.0 * (e - 1.0) * s + math.sqrt(math.expm1(h)) * z
        if not np.all(np.isfinite(y)):
            raise NonFiniteStateError(f"non-finite state at backward step {k} (t={t:.6g})")
    return y


def backward_sample(
    schedule: DiffusionSchedule,
    score: ScoreFn,
    n: int,
    seed: int,
    integrator: str = "ddpm_exp",
    workers: int = 1,
    chunk: int = 256,
) -> np.ndarray:
    """Simulate the reverse-time SDE from ``N(0, I)`` at ``T`` to ``t0``.

    Trajectory ``i`` consumes stream ``seed_split(seed, i)``: row 0 is the
    initial draw, row ``k + 1`` the noise of step ``k``.  The output is
    therefore independent of ``chunk`` and ``workers``.
    """
    if integrator not in INTEGRATORS:
        raise ValueError(f"integrator must be one of {INTEGRATORS}")
    dim = score.dim
    if n == 0:
        return np.empty((0, dim))

    def run(a, b):
        noise = rng.stacked_normals(seed, b - a, (schedule.steps + 1, dim), offset=a)
        return _integrate(noise[:, 0].copy(), score, schedule, noise, integrator)

    return np.concatenate(_map_rows(run, n, workers, chunk), axis=0)


def _row_stream(seed: int, row: np.ndarray) -> int:
    # Noise keyed by row content, so the loss does not depend on row order.
    digest = hashlib.sha256(np.ascontiguousarray(row, dtype=np.float64).tobytes()).digest()
    return rng.seed_split(seed, int.from_bytes(digest[:8], "little"))


def denoising_loss(
    score: ScoreFn,
    data: np.ndarray,
    schedule: DiffusionSchedule,
    mc_nodes: int = 8,
    seed: int = 0,
) -> float:
    """Monte-Carlo denoising score-matching loss, trapezoid rule over the grid."""
    data = np.asarray(data, dtype=np.float64).reshape(len(data), -1)
    n, dim = data.shape
    if n == 0:
        raise ValueError("data must be nonempty")
    grid = schedule.grid
    noise = np.stack([rng.normals(_row_stream(seed, row), (len(grid), mc_nodes, dim)) for row in data])
    vals = np.empty(len(grid))
    for k, t in enumerate(grid):
        a, s = float(alpha(t)), math.sqrt(float(sigma2(t)))
        z = noise[:, k]
        xt = a * data[:, None, :] + s * z
        resid = score(xt, t) + z / s
        vals[k] = np.mean(np.sum(resid**2, axis=-1))
    return float(trapezoid(vals[::-1], grid[::-1]))
