"""Discount-factor dynamic linear model machinery.

Three building blocks shared by the agent model and both synthesizers:

* :func:`ffbs_conjugate` -- joint forward-filter / backward-sample draw of a
  state path together with a gamma-beta random-walk precision path, for the
  conditionally Gaussian model produced by the asymmetric-Laplace mixture
  (scalar observations, unknown time-varying scale).
* :func:`ffbs_known_variance` -- standard FFBS for a vector-observation DLM
  with known diagonal observation variances and discount-specified state
  evolution.
* :func:`gbrw_filter_sample` -- forward gamma filter and backward sampler for
  per-series precision paths under the gamma-beta random walk.

All evolution noise is discount-implied: the time-``t`` prior scale matrix is
``R_t = C_{t-1} / delta``.  Gamma laws are (shape, rate) throughout.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .distributions import MixtureConstants

__all__ = [
    "DiscountConfig",
    "NormalGammaPrior",
    "ConjugateFFBS",
    "KnownVarianceFFBS",
    "GBRWSample",
    "ffbs_conjugate",
    "ffbs_known_variance",
    "gbrw_filter_sample",
    "psd_sqrt",
]

# Eigenvalue handling for filtered state scale matrices: anything below
# -PSD_FAIL_RATIO * trace(C) is a hard error, small negatives up to
# PSD_CLIP_RATIO * max eigenvalue are clipped.
PSD_FAIL_RATIO = 1e-8
PSD_CLIP_RATIO = 1e-12


@dataclass(frozen=True)
class DiscountConfig:
    """Discount factors: ``delta`` for the state scale, ``beta`` for the precision walk."""

    delta: float = 0.9
    beta: float = 0.9

    def __post_init__(self):
        if not 0.0 < self.delta <= 1.0:
            raise ValueError(f"delta must lie in (0, 1], got {self.delta}")
        if not 0.0 < self.beta <= 1.0:
            raise ValueError(f"beta must lie in (0, 1], got {self.beta}")


@dataclass(frozen=True)
class NormalGammaPrior:
    """Conjugate prior: ``theta_0 | phi ~ N(m0, C0/(phi*s0))``, ``phi_0 ~ Gamma(n0/2, n0*s0/2)``."""

    m0: np.ndarray
    C0: np.ndarray
    n0: float
    s0: float

    def __post_init__(self):
        m0 = np.atleast_1d(np.asarray(self.m0, dtype=float))
        C0 = np.atleast_2d(np.asarray(self.C0, dtype=float))
        object.__setattr__(self, "m0", m0)
        object.__setattr__(self, "C0", C0)
        if C0.shape != (m0.size, m0.size):
            raise ValueError("C0 must be square with dimension matching m0")
        if not np.allclose(C0, C0.T):
            raise ValueError("C0 must be symmetric")
        if np.linalg.eigvalsh(C0).min() < -PSD_FAIL_RATIO * max(np.trace(C0), 1.0):
            raise ValueError("C0 must be positive semidefinite")
        if not (self.n0 > 0 and self.s0 > 0):
            raise ValueError("n0 and s0 must be positive")


def psd_sqrt(C: np.ndarray, t: int | None = None) -> np.ndarray:
    """Symmetric square root of (a batch of) PSD matrices via eigendecomposition.

    Eigenvalues below ``-1e-8 * trace`` are treated as a numerical failure;
    small negative eigenvalues are clipped to ``1e-12`` of the largest one.
    The symmetric (rather than Cholesky) root keeps the map equivariant under
    coordinate permutations, which the samplers rely on for agent
    exchangeability.
    """
    C = np.asarray(C, dtype=float)
    C = 0.5 * (C + np.swapaxes(C, -1, -2))
    w, V = np.linalg.eigh(C)
    trace = np.trace(C, axis1=-2, axis2=-1)
    bad = w[..., 0] < -PSD_FAIL_RATIO * np.maximum(np.abs(trace), 1.0)
    if np.any(bad):
        where = f" at t={t}" if t is not None else ""
        raise np.linalg.LinAlgError(
            f"state scale matrix failed PSD check{where}: "
            f"min eigenvalue {w[..., 0].min():.3e} vs trace {np.max(np.abs(trace)):.3e}"
        )
    floor = PSD_CLIP_RATIO * np.maximum(w[..., -1:], 0.0)
    w = np.clip(w, floor, None)
    return (V * np.sqrt(w)[..., None, :]) @ np.swapaxes(V, -1, -2)


@dataclass
class ConjugateFFBS:
    """One joint draw of ``(theta_{1:T}, phi_{1:T})`` plus the filtered moments behind it."""

    theta: np.ndarray  # (T, p) sampled state path
    phi: np.ndarray  # (T,) sampled precision path (sigma_t = 1/phi_t)
    m: np.ndarray  # (T, p) filtered means
    C: np.ndarray  # (T, p, p) filtered scale matrices
    n: np.ndarray  # (T,) degrees of freedom
    s: np.ndarray  # (T,) scale point estimates


def ffbs_conjugate(
    y: np.ndarray,
    F: np.ndarray,
    v: np.ndarray,
    consts: MixtureConstants,
    prior: NormalGammaPrior,
    disc: DiscountConfig,
    rng: np.random.Generator,
    z_state: np.ndarray | None = None,
) -> ConjugateFFBS:
    """Forward filter, backward sample for the mixture-form quantile DLM.

    Observation ``t`` is ``y_t = F_t' theta_t + kappa1 * v_t + e_t`` with
    ``e_t ~ N(0, sigma_t * kappa2 * v_t)``; the precision ``phi_t = 1/sigma_t``
    follows a gamma-beta random walk with discount ``beta``, and ``theta_t``
    a random walk with discount ``delta`` and ``sigma_t``-scaled noise.

    Parameters
    ----------
    y : (T,) observations.
    F : (T, p) design vectors per time.
    v : (T,) positive mixing variables (conditioned on).
    consts : mixture constants for the targeted quantile level.
    prior, disc : conjugate prior and discounts.
    rng : generator for the gamma draws.
    z_state : optional (T, p) standard normals for the state draws; supplying
        them lets the caller key the noise by coordinate identity.  Drawn from
        ``rng`` when omitted.
    """
    y = np.asarray(y, dtype=float)
    F = np.atleast_2d(np.asarray(F, dtype=float))
    v = np.asarray(v, dtype=float)
    T = y.size
    p = prior.m0.size
    if F.shape != (T, p):
        raise ValueError(f"F must have shape ({T}, {p}), got {F.shape}")
    if v.shape != (T,) or np.any(v <= 0.0):
        raise ValueError("v must be positive with one entry per observation")

    k1, k2 = consts
    delta, beta = disc.delta, disc.beta

    m = np.empty((T, p))
    C = np.empty((T, p, p))
    n = np.empty(T)
    s = np.empty(T)

    m_prev, C_prev = prior.m0, prior.C0
    n_prev, s_prev = float(prior.n0), float(prior.s0)
    for t in range(T):
        R = C_prev / delta
        RF = R @ F[t]
        f_t = float(F[t] @ m_prev)
        Q = float(F[t] @ RF) + s_prev * k2 * v[t]
        if not np.isfinite(Q) or Q <= 0.0:
            raise FloatingPointError(f"non-finite or nonpositive predictive variance Q at t={t}")
        e = y[t] - f_t - k1 * v[t]
        n_t = beta * n_prev + 3.0
        r_t = (beta * n_prev + e * e / Q + 2.0 * v[t] / s_prev) / n_t
        A = RF / Q
        m[t] = m_prev + A * e
        C_t = r_t * (R - Q * np.outer(A, A))
        C[t] = 0.5 * (C_t + C_t.T)
        n[t] = n_t
        s[t] = r_t * s_prev
        m_prev, C_prev = m[t], C[t]
        n_prev, s_prev = n[t], s[t]

    sqrtC = psd_sqrt(C)
    if z_state is None:
        z_state = rng.standard_normal((T, p))
    elif z_state.shape != (T, p):
        raise ValueError(f"z_state must have shape ({T}, {p})")

    phi = np.empty(T)
    theta = np.empty((T, p))
    phi[T - 1] = rng.gamma(shape=n[T - 1] / 2.0, scale=2.0 / (n[T - 1] * s[T - 1]))
    theta[T - 1] = m[T - 1] + (sqrtC[T - 1] @ z_state[T - 1]) / np.sqrt(phi[T - 1] * s[T - 1])

    if T > 1:
        shape = (1.0 - beta) * n[: T - 1] / 2.0
        eta = np.zeros(T - 1)
        pos = shape > 0.0
        if np.any(pos):
            eta[pos] = rng.gamma(shape=shape[pos], scale=2.0 / (n[: T - 1][pos] * s[: T - 1][pos]))
        sd_factor = np.sqrt(1.0 - delta)
        for t in range(T - 2, -1, -1):
            phi[t] = beta * phi[t + 1] + eta[t]
            mean = m[t] + delta * (theta[t + 1] - m[t])
            theta[t] = mean + sd_factor * (sqrtC[t] @ z_state[t]) / np.sqrt(phi[t] * s[t])

    if not (np.all(np.isfinite(theta)) and np.all(np.isfinite(phi))):
        raise FloatingPointError("non-finite state draw in backward pass")
    return ConjugateFFBS(theta=theta, phi=phi, m=m, C=C, n=n, s=s)


@dataclass
class KnownVarianceFFBS:
    """One sampled state path from a known-variance DLM, with filtered moments."""

    state: np.ndarray  # (T, p) sampled path
    m: np.ndarray  # (T, p) filtered means
    C: np.ndarray  # (T, p, p) filtered covariances
    loglik: np.ndarray  # (T,) one-step-ahead predictive log densities


def ffbs_known_variance(
    y: np.ndarray,
    F: np.ndarray,
    offsets: np.ndarray,
    obs_var: np.ndarray,
    m0: np.ndarray,
    C0: np.ndarray,
    delta: float,
    rng: np.random.Generator,
    z_state: np.ndarray | None = None,
) -> KnownVarianceFFBS:
    """FFBS for ``y_t = offsets_t + F_t state_t + N(0, diag(obs_var_t))``.

    The state follows a random walk with discount-implied evolution
    covariance ``R_t = C_{t-1}/delta``.  ``y`` is ``(T, N)`` (``N`` may be 1),
    ``F`` is ``(T, N, p)``.  Returns the sampled path along with the filtered
    moments and the per-step predictive log density (whose sum is the
    marginal log likelihood of ``y`` given the variances).
    """
    y = np.asarray(y, dtype=float)
    if y.ndim == 1:
        y = y[:, None]
    T, N = y.shape
    F = np.asarray(F, dtype=float)
    if F.shape[:2] != (T, N):
        raise ValueError(f"F must have shape ({T}, {N}, p), got {F.shape}")
    p = F.shape[2]
    offsets = np.broadcast_to(np.asarray(offsets, dtype=float), (T, N))
    obs_var = np.broadcast_to(np.asarray(obs_var, dtype=float), (T, N))
    if np.any(obs_var <= 0.0):
        raise ValueError("observation variances must be positive")
    if not 0.0 < delta <= 1.0:
        raise ValueError(f"delta must lie in (0, 1], got {delta}")

    m = np.empty((T, p))
    C = np.empty((T, p, p))
    loglik = np.empty(T)

    m_prev = np.atleast_1d(np.asarray(m0, dtype=float)).copy()
    C_prev = np.atleast_2d(np.asarray(C0, dtype=float)).copy()
    log2pi = np.log(2.0 * np.pi)
    if N == 1:
        # scalar-observation path: same recursions without matrix factorization
        for t in range(T):
            R = C_prev / delta
            Ft = F[t, 0]
            RFt = R @ Ft
            q = float(Ft @ RFt) + obs_var[t, 0]
            if not np.isfinite(q) or q <= 0.0:
                raise np.linalg.LinAlgError(
                    f"singular predictive covariance at t={t}: min eigenvalue {q:.3e}"
                )
            e = y[t, 0] - offsets[t, 0] - float(Ft @ m_prev)
            gain = RFt / q
            m[t] = m_prev + gain * e
            C_t = R - np.outer(gain, gain) * q
            C[t] = 0.5 * (C_t + C_t.T)
            loglik[t] = -0.5 * (log2pi + np.log(q) + e * e / q)
            m_prev, C_prev = m[t], C[t]
    else:
        for t in range(T):
            R = C_prev / delta
            Ft = F[t]
            f_t = offsets[t] + Ft @ m_prev
            RFt = R @ Ft.T  # (p, N)
            Q = Ft @ RFt + np.diag(obs_var[t])
            Q = 0.5 * (Q + Q.T)
            try:
                Lq = np.linalg.cholesky(Q)
            except np.linalg.LinAlgError:
                w = np.linalg.eigvalsh(Q)
                raise np.linalg.LinAlgError(
                    f"singular predictive covariance at t={t}: min eigenvalue {w[0]:.3e}"
                ) from None
            e = y[t] - f_t
            alpha = np.linalg.solve(Lq.T, np.linalg.solve(Lq, e))  # Q^{-1} e
            gain = np.linalg.solve(Lq.T, np.linalg.solve(Lq, RFt.T)).T  # R F' Q^{-1}, (p, N)
            m[t] = m_prev + gain @ e
            C_t = R - gain @ Q @ gain.T
            C[t] = 0.5 * (C_t + C_t.T)
            loglik[t] = -0.5 * (N * log2pi + 2.0 * np.sum(np.log(np.diag(Lq))) + e @ alpha)
            m_prev, C_prev = m[t], C[t]

    sqrtC = psd_sqrt(C)
    if z_state is None:
        z_state = rng.standard_normal((T, p))
    elif z_state.shape != (T, p):
        raise ValueError(f"z_state must have shape ({T}, {p})")

    state = np.empty((T, p))
    state[T - 1] = m[T - 1] + sqrtC[T - 1] @ z_state[T - 1]
    sd_factor = np.sqrt(1.0 - delta)
    for t in range(T - 2, -1, -1):
        mean = m[t] + delta * (state[t + 1] - m[t])
        state[t] = mean + sd_factor * (sqrtC[t] @ z_state[t])

    return KnownVarianceFFBS(state=state, m=m, C=C, loglik=loglik)


@dataclass
class GBRWSample:
    """Sampled precision path(s) plus the forward gamma filter parameters."""

    phi: np.ndarray  # (T,) or (T, N)
    n: np.ndarray
    d: np.ndarray


def gbrw_filter_sample(
    sq_resid: np.ndarray,
    v: np.ndarray,
    kappa2: float,
    n0,
    d0,
    beta,
    rng: np.random.Generator,
) -> GBRWSample:
    """Forward gamma filter and backward draw of precision paths.

    Forward recursion per series: ``n_t = beta*n_{t-1} + 3`` and
    ``d_t = beta*d_{t-1} + sq_resid_t/(kappa2*v_t) + 2*v_t``.  Backward:
    ``phi_T ~ Gamma(n_T/2, d_T/2)`` then
    ``phi_t = beta*phi_{t+1} + Gamma((1-beta)*n_t/2, d_t/2)``.

    ``sq_resid`` and ``v`` are ``(T,)`` or ``(T, N)``; ``n0``, ``d0`` and
    ``beta`` broadcast over series.
    """
    sq_resid = np.asarray(sq_resid, dtype=float)
    v = np.asarray(v, dtype=float)
    squeeze = sq_resid.ndim == 1
    if squeeze:
        sq_resid = sq_resid[:, None]
        v = v[:, None]
    if v.shape != sq_resid.shape:
        raise ValueError("sq_resid and v must share a shape")
    if np.any(v <= 0.0):
        raise ValueError("mixing variables v must be positive")
    if np.any(sq_resid < 0.0):
        raise ValueError("squared residuals must be nonnegative")
    T, N = sq_resid.shape
    n0 = np.broadcast_to(np.asarray(n0, dtype=float), (N,))
    d0 = np.broadcast_to(np.asarray(d0, dtype=float), (N,))
    beta = np.broadcast_to(np.asarray(beta, dtype=float), (N,))
    if np.any(n0 <= 0) or np.any(d0 <= 0):
        raise ValueError("n0 and d0 must be positive")
    if np.any((beta <= 0) | (beta > 1)):
        raise ValueError("beta must lie in (0, 1]")

    n = np.empty((T, N))
    d = np.empty((T, N))
    n_prev, d_prev = n0, d0
    for t in range(T):
        n[t] = beta * n_prev + 3.0
        d[t] = beta * d_prev + sq_resid[t] / (kappa2 * v[t]) + 2.0 * v[t]
        n_prev, d_prev = n[t], d[t]

    phi = np.empty((T, N))
    phi[T - 1] = rng.gamma(shape=n[T - 1] / 2.0, scale=2.0 / d[T - 1])
    if T > 1:
        shape = (1.0 - beta) * n[: T - 1] / 2.0
        eta = np.zeros((T - 1, N))
        pos = shape > 0.0
        if np.any(pos):
            eta[pos] = rng.gamma(shape=shape[pos], scale=2.0 / d[: T - 1][pos])
        for t in range(T - 2, -1, -1):
            phi[t] = beta * phi[t + 1] + eta[t]

    if squeeze:
        return GBRWSample(phi=phi[:, 0], n=n[:, 0], d=d[:, 0])
    return GBRWSample(phi=phi, n=n, d=d)
