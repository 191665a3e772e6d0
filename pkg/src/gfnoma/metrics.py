"""Activity error rate, bit error rate and per-device classification metrics."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from statsmodels.stats.proportion import proportion_confint

BER_MODES = ("missed_as_errors", "detected_only")


def wilson_interval(successes: int, trials: int, alpha: float = 0.05):
    """Two-sided Wilson score interval for a binomial rate."""
    if trials <= 0:
        return float("nan"), float("nan")
    lo, hi = proportion_confint(successes, trials, alpha=alpha, method="wilson")
    return float(lo), float(hi)


def _as_bits(x):
    x = np.asarray(x)
    if x.ndim == 1:
        x = x[None, :]
    return x.astype(bool)


@dataclass
class ConfusionCounts:
    """Per-device TP/FP/TN/FN tallies; ``+`` merges two campaigns."""

    tp: np.ndarray
    fp: np.ndarray
    tn: np.ndarray
    fn: np.ndarray

    @classmethod
    def from_predictions(cls, estimates, truths) -> "ConfusionCounts":
        est, tru = _as_bits(estimates), _as_bits(truths)
        if est.shape != tru.shape:
            raise ValueError(f"estimates {est.shape} and truths {tru.shape} differ in shape")
        if est.size == 0:
            raise ValueError("no decisions to count")
        return cls((est & tru).sum(0), (est & ~tru).sum(0), (~est & ~tru).sum(0),
                   (~est & tru).sum(0))

    @classmethod
    def zeros(cls, K: int) -> "ConfusionCounts":
        z = np.zeros(K, dtype=np.int64)
        return cls(z.copy(), z.copy(), z.copy(), z.copy())

    def __add__(self, other: "ConfusionCounts") -> "ConfusionCounts":
        return ConfusionCounts(self.tp + other.tp, self.fp + other.fp, self.tn + other.tn,
                               self.fn + other.fn)

    @property
    def K(self) -> int:
        return len(self.tp)

    @property
    def n_frames(self) -> int:
        return int(self.tp[0] + self.fp[0] + self.tn[0] + self.fn[0])

    def aggregate(self) -> tuple:
        return int(self.tp.sum()), int(self.fp.sum()), int(self.tn.sum()), int(self.fn.sum())


def aer(estimates, truths) -> float:
    """Fraction of wrong device-frame activity decisions, (FP + FN) / (frames K)."""
    est, tru = _as_bits(estimates), _as_bits(truths)
    if est.shape != tru.shape:
        raise ValueError(f"estimates {est.shape} and truths {tru.shape} differ in shape")
    if est.size == 0:
        raise ValueError("no decisions to score")
    return float(np.mean(est != tru))


@dataclass(frozen=True)
class PrfScore:
    precision: float
    recall: float
    f1: float
    precision_undefined: bool = False
    recall_undefined: bool = False

    def __iter__(self):
        return iter((self.precision, self.recall, self.f1))


def _prf(tp, fp, fn) -> PrfScore:
    p_undef = tp + fp == 0
    r_undef = tp + fn == 0
    p = 0.0 if p_undef else tp / (tp + fp)
    r = 0.0 if r_undef else tp / (tp + fn)
    f1 = 0.0 if p + r == 0 else 2 * p * r / (p + r)
    return PrfScore(float(p), float(r), float(f1), bool(p_undef), bool(r_undef))


def precision_recall_f1(counts: ConfusionCounts, device=None) -> PrfScore:
    """Precision, recall and F1 for one device, or pooled over all devices.

    A zero denominator yields 0 with the matching ``*_undefined`` flag set.
    """
    if device is None:
        tp, fp, _, fn = counts.aggregate()
    else:
        tp, fp, fn = int(counts.tp[device]), int(counts.fp[device]), int(counts.fn[device])
    return _prf(tp, fp, fn)


@dataclass(frozen=True)
class BerResult:
    value: float
    errors: int
    bits: int
    missed_bits: int
    false_alarm_bits: int
    undefined: bool


def ber(estimates, truths, mode: str = "missed_as_errors") -> BerResult:
    """Bit error rate over transmitted bits.

    ``estimates`` and ``truths`` are (frames, K, Ns) arrays over {-1, 0, +1}.
    A 0 in ``truths`` marks an idle device; a 0 in ``estimates`` marks a
    device the activity detector did not declare.  In ``missed_as_errors``
    mode every bit of a missed device counts as an error; in
    ``detected_only`` mode missed devices leave both numerator and
    denominator.  Bits estimated for idle devices (false alarms) never enter
    the rate and are only tallied.  No transmitted bits gives NaN with
    ``undefined`` set.
    """
    if mode not in BER_MODES:
        raise ValueError(f"mode must be one of {BER_MODES}, got {mode!r}")
    est, tru = np.asarray(estimates), np.asarray(truths)
    if est.shape != tru.shape:
        raise ValueError(f"estimates {est.shape} and truths {tru.shape} differ in shape")
    sent = tru != 0
    declared = est != 0
    missed = int((sent & ~declared).sum())
    wrong = int((sent & declared & (est != tru)).sum())
    fa_bits = int((~sent & declared).sum())
    if mode == "missed_as_errors":
        errors, bits = wrong + missed, int(sent.sum())
    else:
        errors, bits = wrong, int((sent & declared).sum())
    if bits == 0:
        return BerResult(float("nan"), errors, 0, missed, fa_bits, True)
    return BerResult(errors / bits, errors, bits, missed, fa_bits, False)
