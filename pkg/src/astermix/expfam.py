"""One-parameter exponential families used as aster arrows.

Each family is written in canonical form with cumulant function ``c``:

    log f(y | theta) = y * theta - c(theta) + log h(y)

so that ``c'(theta)`` is the mean and ``c''(theta)`` the variance.  All
functions accept scalars or numpy arrays and broadcast.

Conditional simulation follows the aster convention: given ``n`` trials
(the value of the predecessor node), the node is the sum of ``n``
independent draws from the arrow family.
"""

from __future__ import annotations

import enum

import numpy as np
from scipy import special, stats

from .errors import DomainError

__all__ = ["Family", "cumulant", "mean", "variance", "simulate_arrow"]


class Family(enum.Enum):
    """Arrow distribution of an aster graph node.

    The Gaussian family has unit dispersion, so its canonical parameter is
    its mean.
    """

    BERNOULLI = "ber"
    POISSON = "pois"
    ZERO_TRUNCATED_POISSON = "ztpois"
    GAUSSIAN = "gauss"

    @classmethod
    def parse(cls, label: str) -> "Family":
        key = label.strip().lower()
        aliases = {
            "ber": cls.BERNOULLI,
            "bernoulli": cls.BERNOULLI,
            "pois": cls.POISSON,
            "poi": cls.POISSON,
            "poisson": cls.POISSON,
            "ztpois": cls.ZERO_TRUNCATED_POISSON,
            "0-poi": cls.ZERO_TRUNCATED_POISSON,
            "zero.truncated.poisson": cls.ZERO_TRUNCATED_POISSON,
            "gauss": cls.GAUSSIAN,
            "normal": cls.GAUSSIAN,
        }
        try:
            return aliases[key]
        except KeyError:
            raise DomainError(
                f"unknown family {label!r}; expected one of ber, pois, ztpois, gauss"
            ) from None

    @property
    def integer_valued(self) -> bool:
        return self is not Family.GAUSSIAN


def _theta(theta):
    t = np.asarray(theta, dtype=float)
    if not np.all(np.isfinite(t)):
        raise DomainError("canonical parameter must be finite")
    return t


def _out(x, like):
    return float(x) if np.ndim(like) == 0 else x


def _ztp_cumulant(t):
    lam = np.exp(t)
    big = t > 0
    out = np.empty_like(lam)
    # lam + log(1 - exp(-lam)) avoids overflow of exp(lam)
    out[big] = lam[big] + np.log(-np.expm1(-lam[big]))
    out[~big] = np.log(np.expm1(lam[~big]))
    return out


def _ztp_mean(t):
    lam = np.exp(t)
    return lam / -np.expm1(-lam)


def _ztp_variance(t):
    lam = np.exp(t)
    # var = m (1 + lam - m); 1 - exp(-lam)(1 + lam) is the regularized
    # incomplete gamma P(2, lam), which stays accurate as lam -> 0
    return _ztp_mean(t) * special.gammainc(2.0, lam) / -np.expm1(-lam)


def cumulant(family: Family, theta):
    """Cumulant function ``c(theta)``."""
    t = np.atleast_1d(_theta(theta))
    with np.errstate(over="ignore"):
        if family is Family.BERNOULLI:
            out = np.logaddexp(0.0, t)
        elif family is Family.POISSON:
            out = np.exp(t)
        elif family is Family.ZERO_TRUNCATED_POISSON:
            out = _ztp_cumulant(t)
        else:
            out = 0.5 * t * t
    return _out(out[0] if np.ndim(theta) == 0 else out, theta)


def mean(family: Family, theta):
    """Mean value parameter ``c'(theta)``."""
    t = np.atleast_1d(_theta(theta))
    with np.errstate(over="ignore"):
        if family is Family.BERNOULLI:
            out = special.expit(t)
        elif family is Family.POISSON:
            out = np.exp(t)
        elif family is Family.ZERO_TRUNCATED_POISSON:
            out = _ztp_mean(t)
        else:
            out = t.copy()
    return _out(out[0] if np.ndim(theta) == 0 else out, theta)


def variance(family: Family, theta):
    """Variance ``c''(theta)``; strictly positive for finite theta."""
    t = np.atleast_1d(_theta(theta))
    with np.errstate(over="ignore"):
        if family is Family.BERNOULLI:
            out = special.expit(t) * special.expit(-t)
        elif family is Family.POISSON:
            out = np.exp(t)
        elif family is Family.ZERO_TRUNCATED_POISSON:
            out = _ztp_variance(t)
        else:
            out = np.ones_like(t)
    return _out(out[0] if np.ndim(theta) == 0 else out, theta)


def _ztp_draws(lam, rng, size):
    # inversion restricted to the part of the Poisson cdf above P(Y = 0)
    p0 = np.exp(-lam)
    u = p0 + rng.random(size) * (1.0 - p0)
    y = stats.poisson.ppf(u, lam)
    return np.maximum(y, 1.0)


def _simulate(family: Family, theta, trials, rng):
    """Vectorized conditional simulation; ``theta`` and ``trials`` broadcast."""
    theta, trials = np.broadcast_arrays(np.asarray(theta, float), np.asarray(trials))
    if np.any(trials < 0):
        raise DomainError("number of trials must be nonnegative")
    n = trials.astype(np.int64)
    if np.any(n != trials):
        raise DomainError("number of trials must be an integer")
    out = np.zeros(theta.shape, dtype=float)
    live = n > 0
    if not np.any(live):
        return out
    t, k = theta[live], n[live]
    if family is Family.BERNOULLI:
        out[live] = rng.binomial(k, special.expit(t))
    elif family is Family.POISSON:
        out[live] = rng.poisson(k * np.exp(t))
    elif family is Family.GAUSSIAN:
        out[live] = rng.normal(k * t, np.sqrt(k))
    else:
        lam = np.repeat(np.exp(t), k)
        draws = _ztp_draws(lam, rng, lam.size)
        starts = np.concatenate(([0], np.cumsum(k)[:-1]))
        out[live] = np.add.reduceat(draws, starts)
    return out


def simulate_arrow(family: Family, theta: float, trials: int, rng: np.random.Generator) -> float:
    """Sum of ``trials`` independent draws from ``family`` at ``theta``.

    Only ``rng`` is mutated.  ``trials == 0`` returns exactly 0.
    """
    if trials < 0:
        raise DomainError("number of trials must be nonnegative")
    _theta(theta)
    return float(_simulate(family, theta, trials, rng))
