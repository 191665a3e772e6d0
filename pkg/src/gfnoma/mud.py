"""Linear MMSE multi-user detection on the declared active set, and BER bookkeeping."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin

from ._validation import check_activity_matrix, check_frames
from .cs import stack_system
from .metrics import BerResult, ConfusionCounts, aer, ber
from .simulator import FrameBatch


@dataclass
class MudResult:
    support: np.ndarray
    soft: np.ndarray   # (|support|, Ns) complex estimates of sqrt(P) b
    bits: np.ndarray   # (|support|, Ns) in {-1, +1}


def slice_bpsk(x: np.ndarray) -> np.ndarray:
    """Sign of the real part; an exact zero maps to +1."""
    return np.where(np.real(x) < 0, -1, 1).astype(np.int8)


def mmse_detect(Y, phi, support, noise_var: float, device_powers) -> MudResult:
    """Per-slot linear MMSE estimate of the declared devices' symbols.

    Solves x = (A^H A + noise_var Sigma_x^{-1})^{-1} A^H y with A the stacked
    dictionary restricted to ``support`` and Sigma_x = diag(P_k).  With
    ``noise_var == 0`` the pseudo-inverse (zero forcing) is used.
    """
    support = np.asarray(support, dtype=int)
    if support.size == 0:
        raise ValueError("MMSE detection needs a non-empty active set")
    y, A_full = stack_system(Y, phi)
    A = A_full[:, support]
    P = np.asarray(device_powers, dtype=float)[support]
    if noise_var > 0:
        gram = A.conj().T @ A + noise_var * np.diag(1.0 / P)
        soft = np.linalg.solve(gram, A.conj().T @ y)
    else:
        soft = np.linalg.pinv(A) @ y
    return MudResult(support, soft, slice_bpsk(soft))


class OracleDetector(ClassifierMixin, BaseEstimator):
    """Returns the true activity; the lower bound for any practical detector."""

    def fit(self, X, y=None):
        self.n_devices_ = check_frames(X).codes.K
        self.classes_ = np.array([0, 1])
        return self

    def predict(self, X):
        return check_frames(X).activity.copy()


@dataclass
class AdEvaluation:
    estimates: np.ndarray      # (n, K) declared activity
    bit_estimates: np.ndarray  # (n, K, Ns), 0 where not declared
    confusion: ConfusionCounts
    ber: BerResult
    aer: float


def detect_bits(frames: FrameBatch, estimates: np.ndarray) -> np.ndarray:
    """Run MMSE-MUD per frame on the declared set; (n, K, Ns) bits, 0 off the set."""
    n, K = estimates.shape
    Ns = frames.Y.shape[-1]
    out = np.zeros((n, K, Ns), dtype=np.int8)
    phi = frames.phi()
    P = frames.powers.device_powers
    for i in range(n):
        support = np.flatnonzero(estimates[i])
        if support.size == 0:
            continue
        res = mmse_detect(frames.Y[i], phi[i], support, frames.noise_var, P)
        out[i, support] = res.bits
    return out


def ber_with_ad(frames: FrameBatch, detector, mode: str = "missed_as_errors",
                estimates=None) -> AdEvaluation:
    """Activity detection followed by MMSE-MUD, scored against the truth.

    ``detector`` is a fitted estimator with ``predict(frames)``; pass
    precomputed ``estimates`` to skip detection.
    """
    frames = check_frames(frames)
    K = frames.codes.K
    if estimates is None:
        estimates = detector.predict(frames)
    estimates = check_activity_matrix(estimates, len(frames), K)
    bits = detect_bits(frames, estimates)
    return AdEvaluation(estimates, bits,
                        ConfusionCounts.from_predictions(estimates, frames.activity),
                        ber(bits, frames.symbols, mode=mode),
                        aer(estimates, frames.activity))
