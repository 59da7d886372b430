"""Asymmetric Laplace distribution and the sampling kernels shared by the Gibbs samplers.

The quantile samplers in this package all rest on the same machinery: the
asymmetric Laplace (AL) error law whose ``tau``-quantile is zero, its
normal-exponential mixture representation, and the generalised inverse
Gaussian (GIG) full conditional of the exponential mixing variable.  This
module provides those pieces as pure functions of an explicit
``numpy.random.Generator``.

Conventions
-----------
* ``AL(tau, sigma)`` has density ``tau*(1-tau)/sigma * exp(-rho_tau(x/sigma))``
  where ``rho_tau`` is the check loss; its ``tau``-quantile is exactly 0.
* The exponential mixing variable is parameterised by its MEAN: ``v ~ Exp(sigma)``
  means ``E[v] = sigma`` (density ``exp(-v/sigma)/sigma``).  This is the one
  place the rate/mean convention is fixed; everything else derives from it.
* ``GIG(lam, chi, psi)`` has density proportional to
  ``x**(lam-1) * exp(-(chi/x + psi*x)/2)`` on ``x > 0``.
"""

from __future__ import annotations

from typing import NamedTuple

import numpy as np

__all__ = [
    "MixtureConstants",
    "mixture_constants",
    "check_loss",
    "al_log_density",
    "al_cdf",
    "al_ppf",
    "al_rvs",
    "al_rvs_mixture",
    "sample_gig_half",
    "CHI_FLOOR",
]

# Floor applied to squared residuals (the chi parameter of the GIG full
# conditional) and to sampled mixing variables before they appear in a
# denominator.
CHI_FLOOR = 1e-12


def _validate_tau(tau: float) -> float:
    tau = float(tau)
    if not 0.0 < tau < 1.0:
        raise ValueError(f"quantile level tau must lie in (0, 1), got {tau}")
    return tau


def _validate_sigma(sigma: float) -> float:
    sigma = float(sigma)
    if not sigma > 0.0:
        raise ValueError(f"scale sigma must be positive, got {sigma}")
    return sigma


class MixtureConstants(NamedTuple):
    """Constants of the normal-exponential mixture representation of the AL law.

    With ``v ~ Exp(sigma)`` (mean ``sigma``) and ``z ~ N(0, 1)``,
    ``kappa1*v + sqrt(sigma*kappa2*v)*z`` is distributed ``AL(tau, sigma)``.
    """

    kappa1: float
    kappa2: float


def mixture_constants(tau: float) -> MixtureConstants:
    """Return ``(kappa1, kappa2)`` for quantile level ``tau``."""
    tau = _validate_tau(tau)
    denom = tau * (1.0 - tau)
    return MixtureConstants((1.0 - 2.0 * tau) / denom, 2.0 / denom)


def check_loss(u, tau: float):
    """Check (pinball) loss ``u * (tau - 1{u < 0})``.

    Nonnegative, zero only at ``u = 0``; accepts scalars or arrays.
    """
    tau = _validate_tau(tau)
    u = np.asarray(u, dtype=float)
    out = u * (tau - (u < 0.0))
    return float(out) if out.ndim == 0 else out


def al_log_density(eps, tau: float, sigma: float):
    """Log density of ``AL(tau, sigma)`` at ``eps``."""
    tau = _validate_tau(tau)
    sigma = _validate_sigma(sigma)
    eps = np.asarray(eps, dtype=float)
    out = np.log(tau * (1.0 - tau) / sigma) - check_loss(eps / sigma, tau)
    return float(out) if np.ndim(out) == 0 else out


def al_cdf(x, tau: float, sigma: float):
    """Distribution function of ``AL(tau, sigma)``.

    Closed form: ``tau*exp((1-tau)*x/sigma)`` for ``x <= 0`` and
    ``1 - (1-tau)*exp(-tau*x/sigma)`` for ``x > 0``; in particular the mass
    below zero is exactly ``tau``.
    """
    tau = _validate_tau(tau)
    sigma = _validate_sigma(sigma)
    x = np.asarray(x, dtype=float)
    left = tau * np.exp((1.0 - tau) * np.minimum(x, 0.0) / sigma)
    right = 1.0 - (1.0 - tau) * np.exp(-tau * np.maximum(x, 0.0) / sigma)
    out = np.where(x <= 0.0, left, right)
    return float(out) if out.ndim == 0 else out


def al_ppf(p, tau: float, sigma: float):
    """Quantile function of ``AL(tau, sigma)`` (inverse of :func:`al_cdf`)."""
    tau = _validate_tau(tau)
    sigma = _validate_sigma(sigma)
    p = np.asarray(p, dtype=float)
    if np.any((p <= 0.0) | (p >= 1.0)):
        raise ValueError("probabilities must lie strictly in (0, 1)")
    lower = sigma / (1.0 - tau) * np.log(p / tau)
    upper = -sigma / tau * np.log((1.0 - p) / (1.0 - tau))
    out = np.where(p <= tau, lower, upper)
    return float(out) if out.ndim == 0 else out


def al_rvs(tau: float, sigma: float, size, rng: np.random.Generator):
    """Draw from ``AL(tau, sigma)`` by inversion."""
    u = rng.uniform(size=size)
    # keep u strictly inside (0, 1) for the log transforms
    u = np.clip(u, 1e-15, 1.0 - 1e-15)
    return al_ppf(u, tau, sigma)


def al_rvs_mixture(tau: float, sigma: float, size, rng: np.random.Generator):
    """Draw from ``AL(tau, sigma)`` through the normal-exponential mixture.

    This is the construction the Gibbs samplers rely on; :func:`al_rvs` is the
    independent inversion route, so the two can be checked against each other.
    """
    sigma = _validate_sigma(sigma)
    k1, k2 = mixture_constants(tau)
    v = rng.exponential(scale=sigma, size=size)
    z = rng.standard_normal(size=size)
    return k1 * v + np.sqrt(sigma * k2 * v) * z


def sample_gig_half(chi, psi, rng: np.random.Generator):
    """Draw from ``GIG(1/2, chi, psi)``, elementwise over broadcast arrays.

    Uses the exact reciprocal inverse-Gaussian construction: if
    ``Y ~ InverseGaussian(mean=sqrt(psi/chi), shape=psi)`` then ``1/Y`` has the
    ``GIG(1/2, chi, psi)`` law.  ``chi = 0`` degenerates to the
    ``Gamma(1/2, rate=psi/2)`` limit.

    Parameters
    ----------
    chi : float or array
        Nonnegative "squared residual" parameter.
    psi : float or array
        Positive rate-like parameter.
    rng : numpy.random.Generator

    Returns
    -------
    float or ndarray
        Positive draws with the broadcast shape of ``chi`` and ``psi``.
    """
    chi = np.asarray(chi, dtype=float)
    psi = np.asarray(psi, dtype=float)
    if np.any(~np.isfinite(chi)) or np.any(~np.isfinite(psi)):
        raise ValueError("chi and psi must be finite")
    if np.any(psi <= 0.0):
        raise ValueError("psi must be positive")
    if np.any(chi < 0.0):
        raise ValueError("chi must be nonnegative")

    chi_b, psi_b = np.broadcast_arrays(chi, psi)
    out = np.empty(chi_b.shape, dtype=float)

    zero = chi_b == 0.0
    if np.any(zero):
        out[zero] = rng.gamma(shape=0.5, scale=2.0 / psi_b[zero])
    if np.any(~zero):
        c = chi_b[~zero]
        p = psi_b[~zero]
        y = rng.wald(np.sqrt(p / c), p)
        out[~zero] = 1.0 / y

    if out.ndim == 0 or (np.ndim(chi) == 0 and np.ndim(psi) == 0):
        return float(out.reshape(-1)[0]) if out.size == 1 else out
    return out
