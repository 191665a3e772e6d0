"""Compressed-sensing activity detectors: simultaneous OMP and complex AMP.

OMP works on the block system obtained by stacking all antennas,
``[Y_1; ...; Y_M] = [Phi_1; ...; Phi_M] X``, where every column of X is one
symbol slot.  AMP runs on each antenna separately and pools the per-antenna
estimates.  Neither detector is told how many devices are active: OMP
stops on a relative-residual tolerance and AMP thresholds per-device row
energies.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_is_fitted

from ._validation import check_activity_matrix, check_frames
from .metrics import aer
from .simulator import ActivityVector

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class CsConfig:
    omp_residual_tol: float = 0.3
    omp_max_iters: Optional[int] = None
    amp_iters: int = 30
    amp_damping: float = 0.0
    amp_threshold_mode: str = "residual"
    amp_alpha: float = 1.5
    amp_score_threshold: float = 0.5

    def __post_init__(self):
        if not self.omp_residual_tol > 0:
            raise ValueError("omp_residual_tol must be positive")
        if self.omp_max_iters is not None and self.omp_max_iters < 1:
            raise ValueError("omp_max_iters must be at least 1")
        if self.amp_iters < 1:
            raise ValueError("amp_iters must be at least 1")
        if not 0.0 <= self.amp_damping <= 1.0:
            raise ValueError("amp_damping must lie in [0, 1]")
        if self.amp_threshold_mode not in ("residual", "fixed"):
            raise ValueError("amp_threshold_mode must be 'residual' or 'fixed'")
        if not self.amp_alpha > 0:
            raise ValueError("amp_alpha must be positive")


def stack_system(Y: np.ndarray, phi: np.ndarray):
    """Stack (M, Nc, Ns) observations and (M, Nc, K) dictionaries into one system."""
    Y, phi = np.asarray(Y), np.asarray(phi)
    if Y.ndim == 2:
        Y, phi = Y[None], phi[None]
    if Y.shape[:2] != phi.shape[:2]:
        raise ValueError(f"observations {Y.shape} and dictionaries {phi.shape} disagree")
    M, Nc, Ns = Y.shape
    return Y.reshape(M * Nc, Ns), phi.reshape(M * Nc, phi.shape[-1])


@dataclass
class OmpResult:
    support: np.ndarray
    coef: np.ndarray           # (K, Ns)
    residual_norms: list       # relative residual after 0, 1, ... selections
    order: list                # atoms in selection order
    rank_deficient: bool = False

    @property
    def iterations(self) -> int:
        return len(self.order)


def omp_path(Y, phi, max_iters: Optional[int] = None, tol: float = 0.0) -> OmpResult:
    """Simultaneous OMP on the stacked system.

    Each step picks the atom whose normalized correlation energy with the
    residual, summed over symbol slots, is largest, then re-fits all
    selected atoms by least squares.  Stops once the relative residual
    ||R||_F / ||Y||_F drops below ``tol`` or after ``max_iters`` atoms.
    """
    y, A = stack_system(Y, phi)
    n, K = A.shape
    max_iters = min(K, n) if max_iters is None else min(max_iters, K, n)
    coef = np.zeros((K, y.shape[1]), dtype=complex)
    y_norm = np.linalg.norm(y)
    if y_norm == 0:
        return OmpResult(np.array([], dtype=int), coef, [0.0], [])
    col_norm = np.linalg.norm(A, axis=0)
    col_norm[col_norm == 0] = np.inf
    residual = y.copy()
    history = [1.0]
    order = []
    rank_deficient = False
    x_s = np.zeros((0, y.shape[1]), dtype=complex)
    while len(order) < max_iters and history[-1] >= tol:
        corr = np.sum(np.abs(A.conj().T @ residual) ** 2, axis=1) / col_norm ** 2
        corr[order] = -np.inf
        order.append(int(np.argmax(corr)))
        A_s = A[:, order]
        x_s, _, rank, _ = np.linalg.lstsq(A_s, y, rcond=None)
        if rank < len(order):
            rank_deficient = True
        residual = y - A_s @ x_s
        history.append(float(np.linalg.norm(residual) / y_norm))
    if order:
        coef[order] = x_s
    return OmpResult(np.array(sorted(order), dtype=int), coef, history, order, rank_deficient)


def omp_detect(Y, phi, cfg: CsConfig = CsConfig()) -> OmpResult:
    return omp_path(Y, phi, max_iters=cfg.omp_max_iters, tol=cfg.omp_residual_tol)


def support_at_tolerance(result: OmpResult, tol: float) -> np.ndarray:
    """Support OMP would have returned had it stopped at relative residual ``tol``."""
    n_sel = len(result.order)
    for t, r in enumerate(result.residual_norms):
        if r < tol:
            n_sel = t
            break
    return np.array(sorted(result.order[:n_sel]), dtype=int)


def complex_soft_threshold(u: np.ndarray, theta) -> np.ndarray:
    mag = np.abs(u)
    shrink = np.maximum(mag - theta, 0.0)
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(mag > 0, u * (shrink / np.where(mag > 0, mag, 1.0)), 0.0)


@dataclass
class AmpResult:
    scores: np.ndarray
    support: np.ndarray
    coef: np.ndarray           # (M, K, Ns) de-normalized per-antenna estimates
    iterations: int
    residual_norms: np.ndarray  # (iterations, M)
    diverged: bool = False


def amp_iterate(y: np.ndarray, A: np.ndarray, n_iters: int, alpha: float = 1.5,
                damping: float = 0.0, theta: Optional[float] = None, callback=None):
    """Complex AMP with soft thresholding on column-normalized dictionaries.

    ``y`` is (..., n, L) and ``A`` is (..., n, K); leading axes index
    independent systems and the L columns of each are run as separate AMP
    instances sharing the dictionary.  The threshold of each instance is
    ``alpha * ||z|| / sqrt(n)`` unless a fixed ``theta`` is given.

    Returns ``(x, history, diverged)``: the best iterate of every system
    (smallest residual), the residual norms (iterations, ...) and a boolean
    array marking systems whose residual grew five iterations in a row.
    Those systems stop updating at that point.
    """
    y = np.asarray(y)
    A = np.asarray(A)
    n, K = A.shape[-2:]
    batch = y.shape[:-2]
    AH = np.conj(np.swapaxes(A, -1, -2))
    x = np.zeros(batch + (K, y.shape[-1]), dtype=complex)
    z = y.astype(complex)
    best_x = x.copy()
    best_res = np.full(batch, np.inf)
    growth = np.zeros(batch, dtype=int)
    diverged = np.zeros(batch, dtype=bool)
    history = []
    for _ in range(n_iters):
        u = x + AH @ z
        if theta is None:
            th = alpha * np.linalg.norm(z, axis=-2, keepdims=True) / np.sqrt(n)
        else:
            th = float(theta)
        x_new = complex_soft_threshold(u, th)
        mag = np.abs(u)
        with np.errstate(divide="ignore", invalid="ignore"):
            div = np.where(mag > th, 1.0 - th / (2.0 * np.where(mag > 0, mag, 1.0)), 0.0)
        onsager = div.sum(axis=-2, keepdims=True) / n
        z_new = y - A @ x_new + onsager * z
        if damping > 0:
            x_new = (1 - damping) * x_new + damping * x
            z_new = (1 - damping) * z_new + damping * z
        frozen = diverged[..., None, None]
        x = np.where(frozen, x, x_new)
        z = np.where(frozen, z, z_new)
        res = np.linalg.norm(y - A @ x, axis=(-2, -1))
        if history:
            grew = res > history[-1]
            growth = np.where(grew & ~diverged, growth + 1, np.where(diverged, growth, 0))
        history.append(res)
        better = res < best_res
        best_x = np.where(better[..., None, None], x, best_x)
        best_res = np.where(better, res, best_res)
        if callback is not None:
            callback(x)
        diverged |= growth >= 5
        if np.all(diverged):
            break
    return best_x, np.array(history), diverged


SCORE_MODES = ("denormalized", "normalized")


def amp_scores(Y, phi, cfg: CsConfig = CsConfig(), device_powers=None,
               score_mode: str = "denormalized"):
    """Run AMP on every antenna's system and pool per-device row energies.

    ``Y`` is (..., M, Nc, Ns) and ``phi`` (..., M, Nc, K).  With
    ``score_mode="denormalized"`` the score is the mean of |x_{m,k,j}|^2 over
    antennas and symbols, x being the coefficients mapped back through the
    column norms; ``"normalized"`` pools the coefficients of the
    unit-norm dictionary instead, which weights antennas by channel gain.
    Scores are divided by the device power so active devices sit near 1.

    Returns ``(scores, coef, history, diverged)``.
    """
    if score_mode not in SCORE_MODES:
        raise ValueError(f"score_mode must be one of {SCORE_MODES}")
    Y = np.asarray(Y)
    phi = np.asarray(phi)
    if Y.shape[:-1] != phi.shape[:-1]:
        raise ValueError(f"observations {Y.shape} and dictionaries {phi.shape} disagree")
    col_norm = np.linalg.norm(phi, axis=-2)                      # (..., M, K)
    safe = np.where(col_norm > 0, col_norm, 1.0)
    theta = cfg.amp_alpha if cfg.amp_threshold_mode == "fixed" else None
    x, history, diverged = amp_iterate(Y, phi / safe[..., None, :], cfg.amp_iters,
                                       alpha=cfg.amp_alpha, damping=cfg.amp_damping, theta=theta)
    coef = np.where((col_norm > 0)[..., None], x / safe[..., None], 0)
    pooled = x if score_mode == "normalized" else coef
    scores = np.mean(np.abs(pooled) ** 2, axis=(-3, -1))
    if device_powers is not None:
        scores = scores / np.asarray(device_powers)
    return scores, coef, history, diverged


def amp_detect(Y, phi, cfg: CsConfig = CsConfig(), device_powers=None,
               score_mode: str = "denormalized") -> AmpResult:
    """AMP activity detection for one frame, (M, Nc, Ns) observations."""
    Y, phi = np.asarray(Y), np.asarray(phi)
    if Y.ndim == 2:
        Y, phi = Y[None], phi[None]
    scores, coef, history, diverged = amp_scores(Y, phi, cfg, device_powers, score_mode)
    support = np.flatnonzero(scores >= cfg.amp_score_threshold)
    if np.any(diverged):
        logger.debug("AMP residual grew for five iterations on %d antenna(s)", diverged.sum())
    return AmpResult(scores, support, coef, len(history), history, bool(np.any(diverged)))


def support_to_activity(support, K: int) -> ActivityVector:
    support = np.asarray(support, dtype=int)
    if support.size and (support.min() < 0 or support.max() >= K):
        raise ValueError(f"support indices must lie in [0, {K})")
    a = np.zeros(K, dtype=np.uint8)
    a[support] = 1
    return ActivityVector(a)


def activity_to_support(activity) -> np.ndarray:
    a = activity.a if isinstance(activity, ActivityVector) else np.asarray(activity)
    return np.flatnonzero(a)


def best_score_threshold(scores: np.ndarray, labels: np.ndarray) -> float:
    """Threshold t minimizing the count of (score >= t) != label.

    Candidates are midpoints between consecutive distinct scores plus the
    two extremes; ties resolve to the smallest threshold.
    """
    s = np.asarray(scores, dtype=float).ravel()
    lab = np.asarray(labels).ravel().astype(bool)
    order = np.argsort(s, kind="stable")
    s, lab = s[order], lab[order]
    uniq = np.unique(s)
    cands = np.concatenate([[uniq[0] - 1.0], (uniq[:-1] + uniq[1:]) / 2, [uniq[-1] + 1.0]])
    # errors(t) = positives below t + negatives at or above t
    pos_below = np.searchsorted(s, cands, side="left")
    cum_pos = np.concatenate([[0], np.cumsum(lab)])
    pos_err = cum_pos[pos_below]
    neg_err = (~lab).sum() - (pos_below - cum_pos[pos_below])
    return float(cands[np.argmin(pos_err + neg_err)])


DEFAULT_TOL_GRID = tuple(np.round(np.arange(0.05, 1.0, 0.025), 3))


class OmpDetector(ClassifierMixin, BaseEstimator):
    """Simultaneous-OMP activity detector with relative-residual stopping.

    Parameters
    ----------
    residual_tol : float
        Stop once ||R||_F / ||Y||_F falls below this value.
    max_iters : int, optional
        Cap on the number of selected devices (default K).
    calibrate : bool
        If true, ``fit`` picks ``residual_tol`` from ``tol_grid`` by
        minimizing the activity error rate on the labelled frames.
    """

    def __init__(self, residual_tol=0.3, max_iters=None, calibrate=True,
                 tol_grid=DEFAULT_TOL_GRID):
        self.residual_tol = residual_tol
        self.max_iters = max_iters
        self.calibrate = calibrate
        self.tol_grid = tol_grid

    def _paths(self, frames):
        phi = frames.phi()
        return [omp_path(frames.Y[i], phi[i], max_iters=self.max_iters, tol=0.0)
                for i in range(len(frames))]

    def fit(self, X, y=None):
        frames = check_frames(X)
        K = frames.codes.K
        self.n_devices_ = K
        self.classes_ = np.array([0, 1])
        self.residual_tol_ = float(self.residual_tol)
        if self.calibrate and y is not None:
            labels = check_activity_matrix(y, len(frames), K)
            paths = self._paths(frames)
            best = None
            for tol in self.tol_grid:
                est = np.zeros_like(labels)
                for i, p in enumerate(paths):
                    est[i, support_at_tolerance(p, tol)] = 1
                err = aer(est, labels)
                if best is None or err < best[0]:
                    best = (err, float(tol))
            self.residual_tol_ = best[1]
            logger.info("OMP residual tolerance calibrated to %.3f (AER %.4g)", best[1], best[0])
        return self

    def detect(self, X):
        """Per-frame :class:`OmpResult` objects at the fitted tolerance."""
        check_is_fitted(self, "residual_tol_")
        frames = check_frames(X)
        phi = frames.phi()
        return [omp_path(frames.Y[i], phi[i], max_iters=self.max_iters, tol=self.residual_tol_)
                for i in range(len(frames))]

    def predict(self, X):
        results = self.detect(X)
        out = np.zeros((len(results), self.n_devices_), dtype=np.uint8)
        for i, r in enumerate(results):
            out[i, r.support] = 1
        return out


class AmpDetector(ClassifierMixin, BaseEstimator):
    """AMP activity detector with a score threshold learned from labelled frames.

    Parameters
    ----------
    n_iters, damping, alpha : see :func:`amp_iterate`.
    score_threshold : float, optional
        Fixed threshold on the per-device score.  When None, ``fit`` needs
        labels and picks the AER-minimizing threshold.
    score_mode : {"denormalized", "normalized"}
        Pooling of per-antenna coefficients, see :func:`amp_scores`.
    chunk : int
        Frames processed per vectorized AMP call.
    """

    def __init__(self, n_iters=30, damping=0.0, alpha=1.5, score_threshold=None,
                 score_mode="denormalized", chunk=256):
        self.n_iters = n_iters
        self.damping = damping
        self.alpha = alpha
        self.score_threshold = score_threshold
        self.score_mode = score_mode
        self.chunk = chunk

    def _cfg(self, threshold=0.5):
        return CsConfig(amp_iters=self.n_iters, amp_damping=self.damping, amp_alpha=self.alpha,
                        amp_score_threshold=threshold)

    def decision_function(self, X):
        frames = check_frames(X)
        cfg = self._cfg()
        P = frames.powers.device_powers
        out = []
        for s in range(0, len(frames), self.chunk):
            sub = frames.subset(np.arange(s, min(s + self.chunk, len(frames))))
            scores, _, _, diverged = amp_scores(sub.Y, sub.phi(), cfg, P, self.score_mode)
            if np.any(diverged):
                logger.debug("AMP flagged divergence in %d frame(s)",
                             int(np.any(diverged, axis=-1).sum()))
            out.append(scores)
        return np.concatenate(out)

    def detect(self, X):
        """Per-frame :class:`AmpResult` objects at the fitted threshold."""
        check_is_fitted(self, "score_threshold_")
        frames = check_frames(X)
        cfg = self._cfg(self.score_threshold_)
        phi = frames.phi()
        P = frames.powers.device_powers
        return [amp_detect(frames.Y[i], phi[i], cfg, P, self.score_mode)
                for i in range(len(frames))]

    def fit(self, X, y=None):
        frames = check_frames(X)
        self.n_devices_ = frames.codes.K
        self.classes_ = np.array([0, 1])
        if self.score_threshold is not None:
            self.score_threshold_ = float(self.score_threshold)
        else:
            if y is None:
                raise ValueError("labels are required to calibrate the AMP score threshold")
            labels = check_activity_matrix(y, len(frames), self.n_devices_)
            self.score_threshold_ = best_score_threshold(self.decision_function(frames), labels)
            logger.info("AMP score threshold calibrated to %.4g", self.score_threshold_)
        return self

    def predict(self, X):
        check_is_fitted(self, "score_threshold_")
        return (self.decision_function(X) >= self.score_threshold_).astype(np.uint8)
