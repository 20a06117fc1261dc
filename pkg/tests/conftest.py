import numpy as np
import pytest

from gpdiff import gp


def make_spec(N=8, d=2, nu=1.0, ell=None, mode="index", seed=0, ridge=0.3, mean=True, **kw):
    sigma = gp.random_spd(d, 1000 + seed, ridge=ridge)
    mu = np.random.default_rng(seed).normal(size=(N, d)) if mean else None
    probe = gp.GpSpec(d=d, N=N, sigma=sigma, nu=nu, kernel_mode=mode, **kw)
    if ell is None:
        ell = 0.5 * probe.c**nu
    return gp.GpSpec(d=d, N=N, sigma=sigma, mu=mu, nu=nu, ell=ell, kernel_mode=mode, **kw)


@pytest.fixture
def small_spec():
    return make_spec()


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
