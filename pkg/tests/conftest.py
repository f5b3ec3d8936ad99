import numpy as np
import pytest

from geefit.simulation import GeneratorConfig, generate_dataset


def make_config(n=12, m=3, p=2, link="linear", correlation="ar1", corr_param=0.4,
                beta0=None, seed=0, **kw):
    if beta0 is None:
        beta0 = np.linspace(0.8, -0.4, p)
    return GeneratorConfig(
        n=n, m=m, p=p, beta0=np.asarray(beta0, dtype=float), link=link,
        correlation=correlation, corr_param=corr_param, seed=seed, **kw,
    )


def make_dataset(n=12, m=3, p=2, link="linear", correlation="ar1", corr_param=0.4,
                 beta0=None, seed=0, replication=0, **kw):
    cfg = make_config(n=n, m=m, p=p, link=link, correlation=correlation,
                      corr_param=corr_param, beta0=beta0, seed=seed, **kw)
    return generate_dataset(cfg, replication=replication), cfg


def fd_jacobian(func, beta, h=1e-6, relative=True):
    """Central-difference Jacobian of a vector function of beta."""
    beta = np.asarray(beta, dtype=float)
    f0 = np.asarray(func(beta))
    out = np.empty(f0.shape + (beta.size,))
    for l in range(beta.size):
        step = h * (1.0 + abs(beta[l])) if relative else h
        e = np.zeros_like(beta)
        e[l] = step
        out[..., l] = (np.asarray(func(beta + e)) - np.asarray(func(beta - e))) / (2 * step)
    return out


@pytest.fixture
def rng():
    return np.random.default_rng(20240817)
