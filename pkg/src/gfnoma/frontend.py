"""Decorrelating receiver front-end and the normalized observation tensor."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin

from ._validation import check_frames
from .simulator import FrameBatch, PowerProfile


@dataclass(frozen=True)
class DecorrelatedTensor:
    """Stack of power-normalized decorrelator outputs, stored (antenna, device, symbol)."""

    R: np.ndarray

    def __post_init__(self):
        R = np.asarray(self.R)
        if R.ndim != 3:
            raise ValueError(f"tensor must be 3-D (M, K, Ns), got shape {R.shape}")
        object.__setattr__(self, "R", R)

    @property
    def M(self) -> int:
        return self.R.shape[0]

    @property
    def K(self) -> int:
        return self.R.shape[1]

    @property
    def Ns(self) -> int:
        return self.R.shape[2]


def decorrelate(Y: np.ndarray, phi: np.ndarray) -> np.ndarray:
    """Matched-filter bank output Phi^H Y, shape (K, Ns)."""
    Y = np.asarray(Y)
    phi = np.asarray(phi)
    if Y.ndim != 2 or phi.ndim != 2 or Y.shape[0] != phi.shape[0]:
        raise ValueError(f"cannot decorrelate Y {Y.shape} with Phi {phi.shape}")
    return phi.conj().T @ Y


def stack_tensor(slices: Sequence[np.ndarray], powers: PowerProfile) -> DecorrelatedTensor:
    """Scale each device row by 1/P_j of its group and stack the antennas."""
    if len(slices) == 0:
        raise ValueError("need at least one antenna slice")
    shape = np.shape(slices[0])
    if any(np.shape(s) != shape for s in slices):
        raise ValueError("all antenna slices must share the same (K, Ns) shape")
    if shape[0] != powers.K:
        raise ValueError(f"slices have {shape[0]} device rows but powers cover {powers.K}")
    R = np.stack(slices) * powers.normalization[None, :, None]
    return DecorrelatedTensor(R)


def received_symbol_stat(R, k: int, j: int, m: int) -> complex:
    """Decision statistic for symbol j of device k at antenna m.

    It is the sum of the device's own term ||g_{m,k} c_k||^2 b_{k,j}, the
    multi-user interference and the filtered noise.  Accepts a
    ``DecorrelatedTensor``, an (M, K, Ns) array or a single (K, Ns) slice
    (in which case ``m`` must be 0).
    """
    arr = R.R if isinstance(R, DecorrelatedTensor) else np.asarray(R)
    if arr.ndim == 2:
        arr = arr[None]
    M, K, Ns = arr.shape
    if not (0 <= m < M and 0 <= k < K and 0 <= j < Ns):
        raise IndexError(f"(k={k}, j={j}, m={m}) out of range for tensor of shape {arr.shape}")
    return complex(arr[m, k, j])


def decorrelate_frames(frames: FrameBatch, normalize: bool = True) -> np.ndarray:
    """Vectorized front-end for a batch: (n, M, K, Ns) complex tensors.

    Uses Phi_m^H Y_m = diag(conj(g_m)) C^T Y_m, which avoids forming Phi_m.
    """
    C = frames.codes.codes.astype(float)
    Z = np.einsum("ck,nmcs->nmks", C, frames.Y, optimize=True)
    R = frames.G.conj()[..., None] * Z
    if normalize:
        R = R * frames.powers.normalization[None, None, :, None]
    return R


class Decorrelator(TransformerMixin, BaseEstimator):
    """Transformer turning a ``FrameBatch`` into stacked observation tensors.

    Stateless; ``fit`` only records the tensor dimensions.
    """

    def __init__(self, normalize=True):
        self.normalize = normalize

    def fit(self, X, y=None):
        frames = check_frames(X)
        s = frames.shape
        self.tensor_shape_ = (s["M"], s["K"], s["Ns"])
        return self

    def transform(self, X):
        return decorrelate_frames(check_frames(X), normalize=self.normalize)
