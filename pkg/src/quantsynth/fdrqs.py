"""Factor-structured multivariate synthesis sampler and forecaster.

Extends the univariate synthesis model to N series by putting a factor
structure on the synthesis weights: series i's weight on agent j is
``theta_itj = lambda_ij' u_tj`` with an L-vector of loadings per (series,
agent block) and shared factor paths ``u_tj``.  Loadings get a multiplicative
gamma process prior that shrinks higher-index factors.  Per-series scales
follow independent discounted random walks.

State layout: blocks are ordered (intercept block, agent 1, ..., agent J),
each of length L, so vectors over factors have dimension K = L*(J+1) and the
(j, l) coordinate sits at index j*L + l.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .agents import AgentForecastSet
from .distributions import CHI_FLOOR, mixture_constants, sample_gig_half
from .dlm import ffbs_known_variance, gbrw_filter_sample, psd_sqrt
from .drqs import QuantileForecast, latent_predictor_moments

__all__ = [
    "FDRQSConfig",
    "FDRQSDraws",
    "FactorForecast",
    "gibbs_fdrqs",
    "forecast_fdrqs",
    "omegas_from_deltas",
    "mgp_prior_omegas",
    "sample_local_precisions",
    "delta_full_conditional",
    "observation_loglik",
]

OMEGA_UNDERFLOW = 1e-300


@dataclass(frozen=True)
class FDRQSConfig:
    """Factor synthesis configuration.

    ``L`` must be smaller than ``N`` when loadings are free; passing
    ``fixed_loadings`` (an (N, L*(J+1)) array) freezes the loading matrix,
    skips the shrinkage-prior updates, and lifts that restriction (used for
    degenerate and reduction setups).  ``beta`` may be a scalar or per-series
    vector; ``n0``/``s0`` likewise.
    """

    tau: float
    N: int
    J: int
    L: int = 5
    m0: np.ndarray | None = None
    C0: np.ndarray | None = None
    n0: float | np.ndarray = 0.001
    s0: float | np.ndarray = 0.001
    nu: float | np.ndarray = 3.0
    a1: float | np.ndarray = 2.5
    a2: float | np.ndarray = 3.5
    delta: float = 0.85
    beta: float | np.ndarray = 0.85
    fixed_loadings: np.ndarray | None = None

    def __post_init__(self):
        if not 0.0 < self.tau < 1.0:
            raise ValueError(f"tau must lie in (0, 1), got {self.tau}")
        if self.N < 1 or self.J < 1 or self.L < 1:
            raise ValueError("N, J, L must all be at least 1")
        K = self.L * (self.J + 1)
        if self.fixed_loadings is None:
            if self.L >= self.N:
                raise ValueError(
                    f"free loadings need L < N, got L={self.L}, N={self.N}; "
                    "pass fixed_loadings to override"
                )
        else:
            fl = np.asarray(self.fixed_loadings, dtype=float)
            if fl.shape != (self.N, K):
                raise ValueError(f"fixed_loadings must have shape ({self.N}, {K})")
            object.__setattr__(self, "fixed_loadings", fl)
        m0 = self.m0
        if m0 is None:
            m0 = np.concatenate([np.zeros(self.L), np.full(self.L * self.J, 1.0 / self.J)])
        m0 = np.asarray(m0, dtype=float)
        if m0.shape != (K,):
            raise ValueError(f"m0 must have shape ({K},)")
        object.__setattr__(self, "m0", m0)
        C0 = self.C0
        if C0 is None:
            C0 = np.diag(np.concatenate([np.full(self.L, 1000.0), np.ones(self.L * self.J)]))
        C0 = np.asarray(C0, dtype=float)
        if C0.shape != (K, K):
            raise ValueError(f"C0 must have shape ({K}, {K})")
        object.__setattr__(self, "C0", C0)
        for name in ("n0", "s0", "beta"):
            val = np.broadcast_to(np.asarray(getattr(self, name), dtype=float), (self.N,)).copy()
            if np.any(val <= 0.0):
                raise ValueError(f"{name} entries must be positive")
            object.__setattr__(self, name, val)
        if np.any(self.beta > 1.0):
            raise ValueError("beta entries must lie in (0, 1]")
        for name in ("nu", "a1", "a2"):
            val = np.broadcast_to(np.asarray(getattr(self, name), dtype=float), (self.J + 1,)).copy()
            if np.any(val <= 0.0):
                raise ValueError(f"{name} entries must be positive")
            object.__setattr__(self, name, val)
        if not 0.0 < self.delta <= 1.0:
            raise ValueError(f"delta must lie in (0, 1], got {self.delta}")

    @property
    def K(self) -> int:
        return self.L * (self.J + 1)


def omegas_from_deltas(deltas: np.ndarray) -> np.ndarray:
    """Cumulative products down the factor index: omega_l = prod_{h<=l} delta_h."""
    return np.cumprod(np.asarray(deltas, dtype=float), axis=0)


def mgp_prior_omegas(
    L: int, a1: float, a2: float, size: int, rng: np.random.Generator
) -> np.ndarray:
    """Draw (size, L) omega vectors from the shrinkage prior.

    delta_1 ~ Gamma(a1, 1), delta_h ~ Gamma(a2, 1) for h >= 2, omega is the
    running product; precisions grow (loading variances shrink) with the
    factor index when a2 > 1.
    """
    deltas = np.empty((size, L))
    deltas[:, 0] = rng.gamma(shape=a1, scale=1.0, size=size)
    if L > 1:
        deltas[:, 1:] = rng.gamma(shape=a2, scale=1.0, size=(size, L - 1))
    return np.cumprod(deltas, axis=1)


def sample_local_precisions(
    lam_blocks: np.ndarray,
    omegas: np.ndarray,
    nu: np.ndarray,
    rng: np.random.Generator,
) -> np.ndarray:
    """Draw the local loading precisions phi_ilj.

    ``lam_blocks`` is (N, L, J+1) loadings, ``omegas`` (L, J+1); the full
    conditional is Gamma((nu_j + 1)/2, (omega_lj * lambda^2 + nu_j)/2).
    """
    shape = (nu + 1.0) / 2.0
    rate = (omegas[None, :, :] * lam_blocks**2 + nu[None, None, :]) / 2.0
    return rng.gamma(shape=np.broadcast_to(shape, rate.shape), scale=1.0 / rate)


def delta_full_conditional(
    lam_blocks: np.ndarray,
    phi: np.ndarray,
    deltas: np.ndarray,
    h: int,
    j: int,
    a1: np.ndarray,
    a2: np.ndarray,
) -> tuple[float, float]:
    """(shape, rate) of the multiplicative-shock full conditional for delta_hj.

    ``h`` and ``j`` are zero-based; the leave-one-out products
    ``omega^(h)_lj = prod_{s<=l, s!=h} delta_sj`` use the current deltas.
    """
    N, L, _ = lam_blocks.shape
    dj = deltas[:, j].copy()
    dj[h] = 1.0
    omega_wo = np.cumprod(dj)
    sums = np.sum(phi[:, :, j] * lam_blocks[:, :, j] ** 2, axis=0)  # (L,)
    tail = float(np.sum(omega_wo[h:] * sums[h:]))
    if h == 0:
        shape = N * L / 2.0 + a1[j]
    else:
        shape = N * (L - h) / 2.0 + a2[j]
    return shape, 1.0 + 0.5 * tail


def _update_deltas(
    lam_blocks: np.ndarray,
    phi: np.ndarray,
    deltas: np.ndarray,
    a1: np.ndarray,
    a2: np.ndarray,
    rng: np.random.Generator,
) -> np.ndarray:
    """Cycle through delta_hj site by site, refreshing products as they change."""
    L, Jp1 = deltas.shape
    out = deltas.copy()
    for j in range(Jp1):
        for h in range(L):
            shape, rate = delta_full_conditional(lam_blocks, phi, out, h, j, a1, a2)
            out[h, j] = rng.gamma(shape=shape, scale=1.0 / rate)
    return out


def observation_loglik(
    y: np.ndarray,
    u: np.ndarray,
    lam: np.ndarray,
    f: np.ndarray,
    v: np.ndarray,
    sigma: np.ndarray,
    tau: float,
) -> float:
    """Gaussian observation log density of the panel given all latents.

    ``y, v, sigma`` are (T, N); ``f`` is (T, N, J); ``u`` is (T, K);
    ``lam`` is (N, K).  Invariant under rotating any factor block of
    (lam, u) jointly.
    """
    k1, k2 = mixture_constants(tau)
    T, N = y.shape
    J = f.shape[2]
    L = lam.shape[1] // (J + 1)
    mult = np.concatenate([np.ones((T, N, 1)), f], axis=2)  # (T, N, J+1)
    design = np.repeat(mult, L, axis=2) * lam[None, :, :]  # (T, N, K)
    mean = np.einsum("tnk,tk->tn", design, u) + k1 * v
    var = k2 * sigma * v
    return float(np.sum(-0.5 * (np.log(2.0 * np.pi * var) + (y - mean) ** 2 / var)))


@dataclass
class FDRQSDraws:
    """Stacked retained draws from :func:`gibbs_fdrqs`.

    ``theta(r)`` recomputes the implied synthesis weights from the stored
    loadings and factors; weights are never stored independently.
    """

    cfg: FDRQSConfig
    agent_names: list[str]
    series_ids: list[str]
    u: np.ndarray  # (R, T, K)
    lam: np.ndarray  # (R, N, K)
    sigma: np.ndarray  # (R, T, N)
    v: np.ndarray  # (R, T, N)
    f: np.ndarray  # (R, T, N, J)
    deltas: np.ndarray  # (R, L, J+1)
    phi_loadings: np.ndarray  # (R, N, L, J+1)
    u_C_T: np.ndarray  # (R, K, K)
    n_T: np.ndarray  # (R, N)

    @property
    def n_draws(self) -> int:
        return self.u.shape[0]

    @property
    def T(self) -> int:
        return self.u.shape[1]

    def omegas(self, r: int) -> np.ndarray:
        return omegas_from_deltas(self.deltas[r])

    def theta(self, r: int) -> np.ndarray:
        """Implied weights (T, N, J+1) for draw r: theta_itj = lambda_ij' u_tj."""
        cfg = self.cfg
        lam_b = self.lam[r].reshape(cfg.N, cfg.J + 1, cfg.L)
        u_b = self.u[r].reshape(self.T, cfg.J + 1, cfg.L)
        return np.einsum("njl,tjl->tnj", lam_b, u_b)


def _resolve_panel_agents(agents, cfg, T, series_ids=None, agent_names=None):
    """Normalize agent input to (series_ids, names, a (T,N,J), A (T,N,J))."""
    if isinstance(agents, AgentForecastSet):
        sids = series_ids if series_ids is not None else agents.series_ids()
        if len(sids) != cfg.N:
            raise ValueError(f"forecast set covers {len(sids)} series, config says N={cfg.N}")
        names = agent_names
        a = np.empty((T, cfg.N, cfg.J))
        A = np.empty((T, cfg.N, cfg.J))
        for i, sid in enumerate(sids):
            _, names_i, a_i, A_i = agents.panel(sid, cfg.tau, agents=names)
            if names is None:
                names = names_i
            a[:, i, :] = a_i
            A[:, i, :] = A_i
        return list(sids), list(names), a, A
    a, A = agents
    a = np.asarray(a, dtype=float)
    A = np.asarray(A, dtype=float)
    if a.shape != A.shape or a.ndim != 3:
        raise ValueError("agent mean/variance arrays must both have shape (T, N, J)")
    sids = series_ids if series_ids is not None else [f"series{i + 1}" for i in range(a.shape[1])]
    names = agent_names if agent_names is not None else [f"agent{j + 1}" for j in range(a.shape[2])]
    return list(sids), list(names), a, A


def gibbs_fdrqs(
    Y: np.ndarray,
    agents,
    cfg: FDRQSConfig,
    mcmc: tuple[int, int] = (3000, 1000),
    rng: np.random.Generator | None = None,
    series_ids: list[str] | None = None,
    agent_names: list[str] | None = None,
) -> FDRQSDraws:
    """Gibbs sampler for the factor synthesis model.

    Sweep: per-series mixing variables and latent predictors (as in the
    univariate sampler), loadings row by row, local precisions, shrinkage
    shocks, the factor path in one FFBS block, and per-series precision
    paths.

    ``Y`` is (T, N); ``agents`` an AgentForecastSet covering the N series or
    a pair of (T, N, J) arrays.
    """
    if rng is None:
        rng = np.random.default_rng()
    Y = np.asarray(Y, dtype=float)
    if Y.ndim != 2:
        raise ValueError("Y must be a (T, N) panel")
    T, N = Y.shape
    if N != cfg.N:
        raise ValueError(f"panel has {N} series, config says {cfg.N}")
    sids, names, a_mean, A_var = _resolve_panel_agents(agents, cfg, T, series_ids, agent_names)
    J, L, K = cfg.J, cfg.L, cfg.K
    if a_mean.shape != (T, N, J):
        raise ValueError(f"agent panel must have shape ({T}, {N}, {J}), got {a_mean.shape}")
    if np.any(A_var <= 0.0) or not np.all(np.isfinite(A_var)):
        raise ValueError("agent variances must be positive and finite")
    if not (np.all(np.isfinite(Y)) and np.all(np.isfinite(a_mean))):
        raise ValueError("inputs must be finite")
    n_keep, n_burn = int(mcmc[0]), int(mcmc[1])
    if n_keep <= 0:
        raise ValueError("mcmc draw count must be positive")

    consts = mixture_constants(cfg.tau)
    k1, k2 = consts
    free_lam = cfg.fixed_loadings is None
    d0 = cfg.n0 * cfg.s0

    # initial state: unit loading on the first factor of each block
    if free_lam:
        lam = np.zeros((N, K))
        lam[:, ::L] = 1.0
    else:
        lam = cfg.fixed_loadings.copy()
    u = np.broadcast_to(cfg.m0, (T, K)).copy()
    sigma = np.ones((T, N))
    v = np.ones((T, N))
    f = a_mean.copy()
    phi_load = np.ones((N, L, J + 1))
    deltas = np.ones((L, J + 1))

    keep = FDRQSDraws(
        cfg=cfg,
        agent_names=names,
        series_ids=sids,
        u=np.empty((n_keep, T, K)),
        lam=np.empty((n_keep, N, K)),
        sigma=np.empty((n_keep, T, N)),
        v=np.empty((n_keep, T, N)),
        f=np.empty((n_keep, T, N, J)),
        deltas=np.empty((n_keep, L, J + 1)),
        phi_loadings=np.empty((n_keep, N, L, J + 1)),
        u_C_T=np.empty((n_keep, K, K)),
        n_T=np.empty((n_keep, N)),
    )

    for it in range(n_burn + n_keep):
        lam_blocks = lam.reshape(N, J + 1, L).transpose(0, 2, 1)  # (N, L, J+1)
        u_blocks = u.reshape(T, J + 1, L)
        theta = np.einsum("nlj,tjl->tnj", lam_blocks, u_blocks)  # (T, N, J+1)

        # (1) mixing variables and latent predictors, series by series
        mult = np.concatenate([np.ones((T, N, 1)), f], axis=2)
        resid = Y - np.einsum("tnj,tnj->tn", theta, mult)
        chi = np.maximum(resid * resid, CHI_FLOOR) / (sigma * k2)
        psi = 2.0 / sigma + k1 * k1 / (sigma * k2)
        v = np.maximum(sample_gig_half(chi, psi, rng), CHI_FLOOR)
        for i in range(N):
            f_hat, _, root = latent_predictor_moments(
                Y[:, i], theta[:, i, :], sigma[:, i], v[:, i],
                a_mean[:, i, :], A_var[:, i, :], consts,
            )
            f[:, i, :] = f_hat + np.einsum("tjk,tk->tj", root, rng.standard_normal((T, J)))
        mult = np.concatenate([np.ones((T, N, 1)), f], axis=2)

        # (2)-(4) loadings and shrinkage prior
        if free_lam:
            omegas = omegas_from_deltas(deltas)
            if np.any(omegas < OMEGA_UNDERFLOW):
                raise FloatingPointError(f"shrinkage weight underflow at sweep {it}")
            prior_prec = (phi_load * omegas[None, :, :]).transpose(0, 2, 1).reshape(N, K)
            w_obs = 1.0 / (k2 * sigma * v)  # (T, N)
            for i in range(N):
                util = np.repeat(mult[:, i, :], L, axis=1) * u  # (T, K)
                prec = util.T @ (util * w_obs[:, i, None])
                prec[np.arange(K), np.arange(K)] += prior_prec[i]
                rhs = util.T @ ((Y[:, i] - k1 * v[:, i]) * w_obs[:, i])
                try:
                    cf = np.linalg.cholesky(prec)
                except np.linalg.LinAlgError:
                    raise np.linalg.LinAlgError(
                        f"loading precision factorization failed for series {sids[i]}"
                    ) from None
                h_hat = np.linalg.solve(cf.T, np.linalg.solve(cf, rhs))
                lam[i] = h_hat + np.linalg.solve(cf.T, rng.standard_normal(K))
            lam_blocks = lam.reshape(N, J + 1, L).transpose(0, 2, 1)
            phi_load = sample_local_precisions(lam_blocks, omegas, cfg.nu, rng)
            deltas = _update_deltas(lam_blocks, phi_load, deltas, cfg.a1, cfg.a2, rng)

        # (5) factor path in one block
        Ftil = np.repeat(mult, L, axis=2) * lam[None, :, :]  # (T, N, K)
        ffbs = ffbs_known_variance(
            Y, Ftil, k1 * v, k2 * sigma * v, cfg.m0, cfg.C0, cfg.delta, rng
        )
        u = ffbs.state

        # (6) per-series precision paths
        fitted = np.einsum("tnk,tk->tn", Ftil, u)
        sq = (Y - fitted - k1 * v) ** 2
        g = gbrw_filter_sample(sq, v, k2, cfg.n0, d0, cfg.beta, rng)
        sigma = 1.0 / g.phi

        if not (np.all(np.isfinite(u)) and np.all(np.isfinite(lam)) and np.all(np.isfinite(sigma))):
            raise FloatingPointError(f"non-finite sweep state at iteration {it}")
        if it >= n_burn:
            r = it - n_burn
            keep.u[r] = u
            keep.lam[r] = lam
            keep.sigma[r] = sigma
            keep.v[r] = v
            keep.f[r] = f
            keep.deltas[r] = deltas
            keep.phi_loadings[r] = phi_load
            keep.u_C_T[r] = ffbs.C[-1]
            keep.n_T[r] = g.n[-1]

    return keep


@dataclass
class FactorForecast:
    """Joint one-step forecast: per-series summaries plus aligned joint draws."""

    forecasts: list[QuantileForecast]
    joint: np.ndarray  # (R, N) aligned across series
    sigma_next: np.ndarray  # (R, N) evolved scales


def forecast_fdrqs(
    draws: FDRQSDraws,
    agents_next,
    rng: np.random.Generator,
    t_next: int | None = None,
) -> FactorForecast:
    """One-step-ahead joint quantile forecast for all series.

    Per retained draw: advance the factors by a random-walk step with
    covariance ``C_T (1-delta)/delta``, evolve each series' scale by a beta
    shock, draw fresh latent predictors from the agents' reports, and emit
    the N quantiles from one shared draw so cross-series dependence is
    preserved.
    """
    cfg = draws.cfg
    N, J, L = cfg.N, cfg.J, cfg.L
    a_next, A_next = agents_next
    a_next = np.asarray(a_next, dtype=float)
    A_next = np.asarray(A_next, dtype=float)
    if a_next.shape != (N, J) or A_next.shape != (N, J):
        raise ValueError(f"need agent forecasts for every (series, agent): shape ({N}, {J})")
    if np.any(A_next <= 0.0) or not np.all(np.isfinite(a_next)):
        raise ValueError("agent forecasts must be finite with positive variances")

    R = draws.n_draws
    delta = cfg.delta
    u_T = draws.u[:, -1, :]
    if delta < 1.0:
        sqrtC = psd_sqrt(draws.u_C_T * ((1.0 - delta) / delta))
        z = rng.standard_normal(u_T.shape)
        u_next = u_T + np.einsum("rkq,rq->rk", sqrtC, z)
    else:
        u_next = u_T

    sigma_T = draws.sigma[:, -1, :]  # (R, N)
    sigma_next = np.empty_like(sigma_T)
    for i in range(N):
        b = cfg.beta[i]
        if b >= 1.0:
            sigma_next[:, i] = sigma_T[:, i]
        else:
            gam = rng.beta(b * draws.n_T[:, i] / 2.0, (1.0 - b) * draws.n_T[:, i] / 2.0)
            sigma_next[:, i] = b * sigma_T[:, i] / gam

    f_next = a_next[None, :, :] + np.sqrt(A_next)[None, :, :] * rng.standard_normal((R, N, J))
    mult = np.concatenate([np.ones((R, N, 1)), f_next], axis=2)  # (R, N, J+1)
    design = np.repeat(mult, L, axis=2) * draws.lam  # (R, N, K)
    q = np.einsum("rnk,rk->rn", design, u_next)
    t = draws.T if t_next is None else int(t_next)
    forecasts = [QuantileForecast.from_draws(t, cfg.tau, q[:, i]) for i in range(N)]
    return FactorForecast(forecasts=forecasts, joint=q, sigma_next=sigma_next)
