"""Gaussian-approximation activity detection by per-symbol thresholding.

Each decorrelator output r_{k,j}^m is modelled as Gaussian with mean
mu = ||g_{m,k} c_k||^2 (times the device amplitude) and the
interference-plus-noise spread sigma.  Thresholding |r| at tau gives the
per-symbol error probability

    Pe(tau) = 2 (1 - pa) Q(tau / sigma) + pa Q((mu - tau) / sigma)

whose stationary point has the closed form returned by
:func:`optimal_threshold`.  Per-symbol votes are combined over symbols and
antennas by a count rule.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Union

import numpy as np
from scipy.special import ndtr
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_is_fitted

from ._validation import check_frames, check_probability
from .frontend import DecorrelatedTensor, decorrelate_frames
from .simulator import (FrameBatch, PowerProfile, SpreadingMatrix, complex_noise,
                        gen_spreading, snr_to_noise_var)

STATISTICS = ("real", "abs")


def gaussian_tail(x):
    """Q(x) = P(Z > x) for standard normal Z."""
    return ndtr(-np.asarray(x, dtype=float))


@dataclass(frozen=True)
class SymbolStatParams:
    """Mean, spread and assumed activity rate of one decision statistic.

    Fields may be scalars or broadcastable arrays (one entry per device and
    antenna).
    """

    mu: Union[float, np.ndarray]
    sigma: Union[float, np.ndarray]
    pa: Union[float, np.ndarray]

    def __post_init__(self):
        if not np.all(np.asarray(self.sigma) > 0):
            raise ValueError("sigma must be positive")
        pa = np.asarray(self.pa)
        if not np.all((pa > 0) & (pa < 1)):
            raise ValueError("assumed activity rate must lie strictly inside (0, 1)")


@dataclass
class ThresholdDecision:
    tau: np.ndarray        # (..., M, K)
    per_symbol: np.ndarray  # (..., M, K, Ns) votes
    combined: np.ndarray   # (..., K)


def cross_correlations(codes: SpreadingMatrix) -> np.ndarray:
    C = codes.codes.astype(float)
    return C.T @ C


def interference_variance(G: np.ndarray, codes: SpreadingMatrix, k: int, m: int, pa: float,
                          noise_var: float, powers: Optional[PowerProfile] = None,
                          part: str = "complex") -> float:
    """Variance of the interference-plus-noise in r_{k,j}^m for one (k, m).

    ``part="complex"`` gives the variance of the complex statistic,
    sum_{i != k} |g*_{mk} g_{mi} c_k^T c_i|^2 P_i pa + |g_{mk}|^2 Nc noise_var.
    ``part="real"`` gives the variance of its real part, which is what a
    real-valued threshold on the phase-aligned statistic sees.
    """
    check_probability(pa, "pa")
    G = np.asarray(G)
    if G.ndim != 2 or G.shape[1] != codes.K:
        raise ValueError("G must be (M, K) and agree with the codes")
    if not (0 <= k < codes.K and 0 <= m < G.shape[0]):
        raise IndexError(f"(k={k}, m={m}) out of range")
    P = np.ones(codes.K) if powers is None else powers.device_powers
    cc = cross_correlations(codes)[k]
    h = np.conj(G[m, k]) * G[m] * cc
    h[k] = 0.0
    if part == "complex":
        interf = np.sum(np.abs(h) ** 2 * P) * pa
        noise = abs(G[m, k]) ** 2 * codes.Nc * noise_var
    elif part == "real":
        interf = np.sum(h.real ** 2 * P) * pa
        noise = abs(G[m, k]) ** 2 * codes.Nc * noise_var / 2.0
    else:
        raise ValueError(f"part must be 'complex' or 'real', got {part!r}")
    return float(interf + noise)


def statistic_moments(G: np.ndarray, codes: SpreadingMatrix, noise_var: float,
                      powers: PowerProfile, pa: float, part: str = "real",
                      normalize: bool = True):
    """Vectorized (mu, sigma) for every (antenna, device), shapes (..., M, K).

    ``G`` may carry leading frame axes.  With ``normalize`` the moments refer
    to the power-normalized tensor (rows scaled by 1/P_k).
    """
    G = np.asarray(G)
    P = powers.device_powers
    cc = cross_correlations(codes)
    np.fill_diagonal(cc, 0.0)
    gain = np.abs(G) ** 2
    # h[..., m, k, i] = conj(g_mk) g_mi c_k^T c_i
    h = np.conj(G)[..., :, None] * G[..., None, :] * cc
    if part == "complex":
        interf = (np.abs(h) ** 2 * P).sum(-1) * pa
        noise = gain * codes.Nc * noise_var
    elif part == "real":
        interf = (h.real ** 2 * P).sum(-1) * pa
        noise = gain * codes.Nc * noise_var / 2.0
    else:
        raise ValueError(f"part must be 'complex' or 'real', got {part!r}")
    mu = gain * codes.Nc * np.sqrt(P)
    sigma = np.sqrt(interf + noise)
    if normalize:
        mu = mu / P
        sigma = sigma / P
    return mu, sigma


def error_probability(tau, params: SymbolStatParams):
    """Per-symbol activity error probability at threshold ``tau``."""
    tau = np.asarray(tau, dtype=float)
    if np.any(tau < 0):
        raise ValueError("threshold must be non-negative")
    mu, sigma, pa = (np.asarray(v, dtype=float) for v in (params.mu, params.sigma, params.pa))
    pe = 2.0 * (1.0 - pa) * gaussian_tail(tau / sigma) + pa * gaussian_tail((mu - tau) / sigma)
    return pe if pe.ndim else float(pe)


def optimal_threshold(params: SymbolStatParams):
    """Minimizer of :func:`error_probability`.

    Setting the derivative to zero gives
    tau* = mu/2 - (sigma^2/mu) ln(pa / (2 (1 - pa))), clamped at 0.  The
    objective's derivative changes sign exactly once, so this is the unique
    minimizer on [0, inf).
    """
    mu, sigma, pa = (np.asarray(v, dtype=float) for v in (params.mu, params.sigma, params.pa))
    if np.any(mu <= 0):
        raise ValueError("signal mean must be positive")
    tau = mu / 2.0 - sigma ** 2 / mu * np.log(pa / (2.0 * (1.0 - pa)))
    tau = np.maximum(tau, 0.0)
    return tau if tau.ndim else float(tau)


def _stat(R, statistic):
    if statistic == "real":
        return np.abs(R.real)
    if statistic == "abs":
        return np.abs(R)
    raise ValueError(f"statistic must be one of {STATISTICS}, got {statistic!r}")


def detect_symbolwise(R, taus, statistic: str = "real") -> np.ndarray:
    """Votes (..., M, K, Ns): 1 where the statistic's magnitude exceeds tau_{k,m}.

    ``statistic="real"`` thresholds |Re r| (the statistic is already phase
    aligned by the conjugate channel in the decorrelator); ``"abs"`` uses
    the complex magnitude.
    """
    arr = R.R if isinstance(R, DecorrelatedTensor) else np.asarray(R)
    taus = np.asarray(taus, dtype=float)
    if taus.shape != arr.shape[:-1] and taus.ndim != 0:
        raise ValueError(f"thresholds {taus.shape} do not match tensor {arr.shape[:-1]}")
    return (_stat(arr, statistic) > taus[..., None]).astype(np.uint8)


def combine_votes(votes: np.ndarray, rule: Union[str, int] = "majority") -> np.ndarray:
    """Declare a device active when its votes over antennas and symbols reach n.

    ``votes`` is (..., M, K, Ns); ``rule`` is ``"majority"`` (n = ceil(M Ns / 2))
    or an integer count threshold n in [1, M Ns].
    """
    votes = np.asarray(votes)
    M, Ns = votes.shape[-3], votes.shape[-1]
    total = M * Ns
    if rule == "majority":
        n = math.ceil(total / 2)
    elif isinstance(rule, (int, np.integer)) and not isinstance(rule, bool):
        n = int(rule)
        if not 1 <= n <= total:
            raise ValueError(f"count threshold must lie in [1, {total}], got {n}")
    else:
        raise ValueError(f"unknown combining rule {rule!r}")
    counts = votes.sum(axis=(-3, -1))
    return (counts >= n).astype(np.uint8)


class ThresholdDetector(ClassifierMixin, BaseEstimator):
    """Per-symbol Gaussian threshold detector with vote combining.

    Parameters
    ----------
    pmax : float
        Upper end of the activity-rate prior; the assumed rate defaults to
        its mean, ``pmax / 2``.
    assumed_pa : float, optional
        Activity rate plugged into the error objective, overriding ``pmax / 2``.
    rule : {"majority"} or int
        Vote combining rule, see :func:`combine_votes`.
    statistic : {"real", "abs"}
        Which magnitude of the decision statistic is thresholded.
    """

    def __init__(self, pmax=0.1, assumed_pa=None, rule="majority", statistic="real"):
        self.pmax = pmax
        self.assumed_pa = assumed_pa
        self.rule = rule
        self.statistic = statistic

    def _pa(self):
        pa = self.pmax / 2.0 if self.assumed_pa is None else self.assumed_pa
        if not 0 < pa < 1:
            raise ValueError(f"assumed activity rate must lie in (0, 1), got {pa}")
        return pa

    def fit(self, X, y=None):
        frames = check_frames(X)
        self._pa()
        if self.statistic not in STATISTICS:
            raise ValueError(f"statistic must be one of {STATISTICS}")
        self.n_devices_ = frames.codes.K
        self.classes_ = np.array([0, 1])
        return self

    def decide(self, X) -> ThresholdDecision:
        check_is_fitted(self, "n_devices_")
        frames = check_frames(X)
        part = "real" if self.statistic == "real" else "complex"
        mu, sigma = statistic_moments(frames.G, frames.codes, frames.noise_var, frames.powers,
                                      self._pa(), part=part)
        sigma = np.maximum(sigma, np.finfo(float).tiny)
        tau = optimal_threshold(SymbolStatParams(mu, sigma, self._pa()))
        R = decorrelate_frames(frames)
        votes = detect_symbolwise(R, tau, self.statistic)
        return ThresholdDecision(tau, votes, combine_votes(votes, self.rule))

    def predict(self, X):
        return self.decide(X).combined


@dataclass
class PeReport:
    """Outcome of the analytic-versus-empirical validation run."""

    rows: list
    n_decisions: int
    errors: int
    pe_empirical: float
    pe_analytic: float
    standard_error: float
    z_score: float
    ci_low: float
    ci_high: float
    fa_one_sided_empirical: float
    fa_one_sided_analytic: float
    fa_two_sided_empirical: float
    fa_two_sided_analytic: float

    @property
    def relative_gap(self) -> float:
        if self.pe_analytic == 0:
            return 0.0 if self.pe_empirical == 0 else math.inf
        return abs(self.pe_empirical - self.pe_analytic) / self.pe_analytic

    def summary(self) -> dict:
        d = {k: v for k, v in self.__dict__.items() if k != "rows"}
        d["relative_gap"] = self.relative_gap
        return d


ROW_FIELDS = ("draw", "k", "m", "mu", "sigma", "tau_star", "pe_analytic", "pe_empirical",
              "ci_low", "ci_high")


def analytic_vs_empirical_pe(K: int = 1, Nc: int = 16, M: int = 1, gamma_db: float = 10.0,
                             pa: float = 0.1, pa_nominal: Optional[float] = None,
                             n_draws: int = 1000, symbols_per_draw: int = 100,
                             tau_scale: float = 1.0, statistic: str = "real",
                             seed: int = 0, codes: Optional[SpreadingMatrix] = None) -> PeReport:
    """Monte Carlo check of the per-symbol error probability at tau*.

    Every draw fixes a Rayleigh channel, computes (mu, sigma, tau*) for each
    (device, antenna), then simulates ``symbols_per_draw`` independent symbol
    slots in which every device is active with probability ``pa``.  The
    empirical error rate of |stat| > tau decisions is compared to the mean of
    the analytic error probability over the same channels.  Noise is set
    from ``gamma_db`` with ``pa_nominal`` (default ``pa``) as the average
    activity.  Unit powers throughout.
    """
    from .metrics import wilson_interval

    if statistic not in STATISTICS:
        raise ValueError(f"statistic must be one of {STATISTICS}")
    check_probability(pa, "pa")
    rng = np.random.default_rng(seed)
    if codes is None:
        codes = gen_spreading(K, Nc, rng.integers(2 ** 32))
    K, Nc = codes.K, codes.Nc
    powers = PowerProfile.homogeneous(K)
    pa_nom = pa if pa_nominal is None else pa_nominal
    noise_var = snr_to_noise_var(gamma_db, powers, pa_nom)
    C = codes.codes.astype(float)
    part = "real" if statistic == "real" else "complex"
    # objective needs pa strictly inside (0, 1); a pa = 0 stream still gets a finite tau
    pa_obj = min(max(pa, 1e-6), 1 - 1e-6)

    rows = []
    errors = 0
    n_dec = 0
    pe_sum = 0.0
    var_sum = 0.0
    fa_hits1 = fa_hits2 = fa_n = 0
    fa1_pred = fa2_pred = 0.0
    S = symbols_per_draw
    for d in range(n_draws):
        G = np.sqrt(0.5) * (rng.standard_normal((M, K)) + 1j * rng.standard_normal((M, K)))
        mu, sigma = statistic_moments(G, codes, noise_var, powers, pa_obj, part=part)
        sigma = np.maximum(sigma, np.finfo(float).tiny)
        params = SymbolStatParams(mu, sigma, pa_obj)
        tau = optimal_threshold(params) * tau_scale
        pe = error_probability(tau, SymbolStatParams(mu, sigma, pa_obj)) if pa > 0 else \
            2.0 * gaussian_tail(tau / sigma)
        active = rng.random((K, S)) < pa
        B = np.where(rng.random((K, S)) < 0.5, -1.0, 1.0) * active
        Y = np.einsum("ck,mk,ks->mcs", C, G, B) + complex_noise(rng, (M, Nc, S), noise_var)
        R = np.conj(G)[:, :, None] * np.einsum("ck,mcs->mks", C, Y)
        votes = _stat(R, statistic) > tau[..., None]
        wrong = votes != active[None, :, :]
        errs = wrong.sum(axis=-1)
        errors += int(errs.sum())
        n_dec += M * K * S
        pe_sum += float(pe.sum()) * S
        var_sum += float((pe * (1 - np.minimum(pe, 1))).sum()) * S

        idle = ~active[None, :, :].repeat(M, axis=0)
        stat = R.real if statistic == "real" else np.abs(R)
        fa_hits1 += int(((stat > tau[..., None]) & idle).sum())
        fa_hits2 += int(((np.abs(stat) > tau[..., None]) & idle).sum())
        n_idle = idle.sum(axis=-1)
        fa_n += int(n_idle.sum())
        fa1_pred += float((gaussian_tail(tau / sigma) * n_idle).sum())
        fa2_pred += float((2 * gaussian_tail(tau / sigma) * n_idle).sum())

        for m in range(M):
            for k in range(K):
                lo, hi = wilson_interval(int(errs[m, k]), S)
                rows.append(dict(draw=d, k=k, m=m, mu=float(mu[m, k]), sigma=float(sigma[m, k]),
                                 tau_star=float(tau[m, k]), pe_analytic=float(pe[m, k]),
                                 pe_empirical=errs[m, k] / S, ci_low=lo, ci_high=hi))

    pe_emp = errors / n_dec
    pe_an = pe_sum / n_dec
    se = math.sqrt(var_sum) / n_dec
    z = (pe_emp - pe_an) / se if se > 0 else (0.0 if pe_emp == pe_an else math.inf)
    lo, hi = wilson_interval(errors, n_dec)
    fa_n = max(fa_n, 1)
    return PeReport(rows, n_dec, errors, pe_emp, pe_an, se, z, lo, hi,
                    fa_hits1 / fa_n, fa1_pred / fa_n, fa_hits2 / fa_n, fa2_pred / fa_n)
