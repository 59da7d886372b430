"""Forecast evaluation: weighted CRPS on a quantile grid, cumulative score
ratios, probability integral transforms, and predictive-density
reconstruction from a set of quantile forecasts.

The CRPS variant integrates the quantile check loss over a grid of levels
with an optional emphasis weight (uniform, right-tail ``tau^2`` or left-tail
``(1-tau)^2``), approximated by the trapezoidal rule on exactly the grid
span (no tail extrapolation).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.stats import norm

__all__ = [
    "QuantileGrid",
    "WEIGHT_KINDS",
    "quantile_weights",
    "crps_quantile_weighted",
    "rcs",
    "rtcs",
    "pit",
    "ReconstructedPredictive",
    "reconstruct_predictive",
    "ScorePanel",
]

WEIGHT_KINDS = ("none", "right", "left")


@dataclass(frozen=True)
class QuantileGrid:
    """Strictly increasing quantile levels in (0, 1)."""

    taus: np.ndarray

    def __post_init__(self):
        taus = np.asarray(self.taus, dtype=float)
        object.__setattr__(self, "taus", taus)
        if taus.ndim != 1 or taus.size < 1:
            raise ValueError("need a one-dimensional grid of levels")
        if np.any(taus <= 0.0) or np.any(taus >= 1.0):
            raise ValueError("levels must lie strictly inside (0, 1)")
        if np.any(np.diff(taus) <= 0.0):
            raise ValueError("levels must be strictly increasing")

    @classmethod
    def default(cls) -> "QuantileGrid":
        """The 19-level grid 0.05, 0.10, ..., 0.95."""
        return cls(np.round(np.arange(1, 20) * 0.05, 10))

    @property
    def K(self) -> int:
        return self.taus.size


def quantile_weights(taus: np.ndarray, kind: str = "none") -> np.ndarray:
    """Emphasis weight nu(tau): 1, tau^2 (right tail) or (1-tau)^2 (left tail)."""
    taus = np.asarray(taus, dtype=float)
    if kind == "none":
        return np.ones_like(taus)
    if kind == "right":
        return taus**2
    if kind == "left":
        return (1.0 - taus) ** 2
    raise ValueError(f"unknown weight kind {kind!r}; expected one of {WEIGHT_KINDS}")


def crps_quantile_weighted(y: float, qhat: np.ndarray, grid: QuantileGrid, kind: str = "none") -> float:
    """Trapezoidal quantile-weighted CRPS of forecasts ``qhat`` on the grid.

    The integrand at each level is ``2 (1{y < qhat} - tau)(qhat - y) nu(tau)``,
    which is nonnegative node by node.
    """
    qhat = np.asarray(qhat, dtype=float)
    taus = grid.taus
    if qhat.shape != taus.shape:
        raise ValueError(f"forecasts must match the grid: {qhat.shape} vs {taus.shape}")
    nu = quantile_weights(taus, kind)
    integrand = 2.0 * ((y < qhat).astype(float) - taus) * (qhat - y) * nu
    return float(np.trapezoid(integrand, taus))


def _window_sum(values: np.ndarray, times: np.ndarray, t_start: int, t_star: int) -> float:
    mask = (times >= t_start) & (times <= t_star)
    covered = times[mask]
    expected = np.arange(t_start, t_star + 1)
    if covered.size != expected.size or np.any(np.sort(covered) != expected):
        raise ValueError(f"scores do not cover the window [{t_start}, {t_star}]")
    return float(np.sum(values[..., mask]))


def rcs(
    crps_self: np.ndarray,
    crps_ref: np.ndarray,
    t_start: int,
    t_star: int,
    times: np.ndarray | None = None,
) -> float:
    """Cumulative score ratio sum(self)/sum(ref) over the inclusive window."""
    crps_self = np.asarray(crps_self, dtype=float)
    crps_ref = np.asarray(crps_ref, dtype=float)
    if crps_self.shape != crps_ref.shape:
        raise ValueError("score series must share a shape")
    if times is None:
        times = np.arange(crps_self.shape[-1])
    times = np.asarray(times, dtype=int)
    num = _window_sum(crps_self, times, t_start, t_star)
    den = _window_sum(crps_ref, times, t_start, t_star)
    if den <= 0.0:
        raise ZeroDivisionError("reference score sum is zero over the window")
    return num / den


def rtcs(
    crps_self: np.ndarray,
    crps_ref: np.ndarray,
    t_start: int,
    t_star: int,
    times: np.ndarray | None = None,
) -> float:
    """Total cumulative ratio: like :func:`rcs` with an extra sum over series rows."""
    crps_self = np.atleast_2d(np.asarray(crps_self, dtype=float))
    crps_ref = np.atleast_2d(np.asarray(crps_ref, dtype=float))
    return rcs(crps_self, crps_ref, t_start, t_star, times)


def pit(y: float, draws: np.ndarray) -> float:
    """Fraction of predictive draws at or above the realized value."""
    draws = np.asarray(draws, dtype=float)
    if draws.size == 0:
        raise ValueError("need at least one predictive draw")
    return float(np.mean(y <= draws))


@dataclass
class ReconstructedPredictive:
    """Draws reconstructed from grid quantiles plus the fitted tail parameters."""

    draws: np.ndarray
    mu1: float
    sigma1: float
    mu2: float
    sigma2: float
    counts: np.ndarray  # pieces: left tail, K-1 interior intervals, right tail


def _largest_remainder_counts(weights: np.ndarray, R: int) -> np.ndarray:
    """Integer piece sizes summing to R, proportional to nonnegative weights."""
    raw = weights * R
    counts = np.floor(raw).astype(int)
    short = R - counts.sum()
    if short > 0:
        order = np.argsort(-(raw - np.floor(raw)), kind="stable")
        counts[order[:short]] += 1
    return counts


def reconstruct_predictive(
    qhat: np.ndarray,
    grid: QuantileGrid,
    R: int = 10000,
    rng: np.random.Generator | None = None,
    truncate_tails: bool = True,
) -> ReconstructedPredictive:
    """Rebuild a predictive sample from quantile forecasts on a grid.

    Steps: sort the forecasts ascending (monotone rearrangement); fill each
    interior interval ``(qhat_{k-1}, qhat_k]`` with its probability share of
    uniform draws; fit a Gaussian to each tail through the two outermost
    quantiles and draw the tail mass from it.

    With ``truncate_tails=True`` tail draws are confined to their tail
    regions (left at or below the lowest quantile, right above the highest),
    so the empirical quantiles of the sample reproduce the sorted inputs.
    With ``truncate_tails=False`` tail draws come from the unconditioned
    fitted Gaussians; most of that mass lands inside the interior range, so
    the sample's extreme quantiles sit well inside the inputs.
    """
    if rng is None:
        rng = np.random.default_rng()
    qhat = np.sort(np.asarray(qhat, dtype=float))
    taus = grid.taus
    K = taus.size
    if qhat.shape != taus.shape:
        raise ValueError(f"forecasts must match the grid: {qhat.shape} vs {taus.shape}")
    if K < 4:
        raise ValueError("need at least 4 grid levels to fit both tails")

    z = norm.ppf(taus)
    if qhat[1] == qhat[0]:
        raise ValueError("two lowest quantiles coincide after rearrangement; left tail scale is zero")
    if qhat[-1] == qhat[-2]:
        raise ValueError("two highest quantiles coincide after rearrangement; right tail scale is zero")
    sigma1 = (qhat[1] - qhat[0]) / (z[1] - z[0])
    mu1 = qhat[0] - sigma1 * z[0]
    sigma2 = (qhat[-1] - qhat[-2]) / (z[-1] - z[-2])
    mu2 = qhat[-1] - sigma2 * z[-1]

    weights = np.concatenate([[taus[0]], np.diff(taus), [1.0 - taus[-1]]])
    counts = _largest_remainder_counts(weights, int(R))

    if truncate_tails:
        # Inverse-CDF draws restricted to quantile levels (0, tau_1] and
        # [tau_K, 1) of the fitted Gaussians.
        u = rng.uniform(size=counts[0])
        left = mu1 + sigma1 * norm.ppf(taus[0] * (1.0 - u))
    else:
        left = mu1 + sigma1 * rng.standard_normal(counts[0])
    pieces = [left]
    for k in range(1, K):
        lo, hi = qhat[k - 1], qhat[k]
        u = rng.uniform(size=counts[k])
        pieces.append(hi - u * (hi - lo))  # lands in (lo, hi]
    if truncate_tails:
        u = rng.uniform(size=counts[-1])
        right = mu2 + sigma2 * norm.ppf(taus[-1] + u * (1.0 - taus[-1]))
    else:
        right = mu2 + sigma2 * rng.standard_normal(counts[-1])
    pieces.append(right)
    draws = np.concatenate(pieces)
    return ReconstructedPredictive(
        draws=draws, mu1=float(mu1), sigma1=float(sigma1),
        mu2=float(mu2), sigma2=float(sigma2), counts=counts,
    )


@dataclass
class ScorePanel:
    """Per-(series, time) scores for one model under one weighting scheme."""

    model: str
    scheme: str
    crps: dict = field(default_factory=dict)  # (series, time) -> score
    pit: dict = field(default_factory=dict)  # (series, time) -> PIT value

    def add(self, series: str, t: int, crps_value: float, pit_value: float | None = None) -> None:
        if crps_value < 0.0:
            raise ValueError("scores must be nonnegative")
        self.crps[(series, int(t))] = float(crps_value)
        if pit_value is not None:
            if not 0.0 <= pit_value <= 1.0:
                raise ValueError("PIT values must lie in [0, 1]")
            self.pit[(series, int(t))] = float(pit_value)

    def series_ids(self) -> list[str]:
        return sorted({k[0] for k in self.crps})

    def times(self, series: str) -> np.ndarray:
        return np.array(sorted(t for s, t in self.crps if s == series), dtype=int)

    def _series_scores(self, series: str) -> tuple[np.ndarray, np.ndarray]:
        times = self.times(series)
        vals = np.array([self.crps[(series, t)] for t in times])
        return times, vals

    def rcs_vs(self, ref: "ScorePanel", series: str, t_star: int, t_start: int | None = None) -> float:
        """Per-series cumulative ratio against a reference panel."""
        times, vals = self._series_scores(series)
        rtimes, rvals = ref._series_scores(series)
        if t_start is None:
            t_start = int(times.min())
        if not np.array_equal(times, rtimes):
            raise ValueError(f"panels disagree on times for series {series}")
        return rcs(vals, rvals, t_start, t_star, times)

    def rtcs_vs(self, ref: "ScorePanel", t_star: int, t_start: int | None = None) -> float:
        """Cumulative ratio summed over every series in the panel."""
        sids = self.series_ids()
        if sids != ref.series_ids():
            raise ValueError("panels cover different series")
        num = 0.0
        den = 0.0
        for s in sids:
            times, vals = self._series_scores(s)
            rtimes, rvals = ref._series_scores(s)
            if not np.array_equal(times, rtimes):
                raise ValueError(f"panels disagree on times for series {s}")
            start = int(times.min()) if t_start is None else t_start
            num += _window_sum(vals, times, start, t_star)
            den += _window_sum(rvals, times, start, t_star)
        if den <= 0.0:
            raise ZeroDivisionError("reference score sum is zero over the window")
        return num / den
