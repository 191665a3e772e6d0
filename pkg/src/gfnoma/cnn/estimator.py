"""CNN activity detector: preprocessing, training loop and the estimator wrapper."""
from __future__ import annotations

import logging
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Optional

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_is_fitted

from .._validation import check_activity_matrix
from ..frontend import DecorrelatedTensor, decorrelate_frames
from ..io import read_container, write_container
from ..simulator import ActivityVector, FrameBatch
from .network import (AdamState, CnnParameters, adam_step, backward, bce_with_logits,
                      default_architecture, forward, forward_logits, init_parameters)
from .layers import sigmoid

logger = logging.getLogger(__name__)


class TrainingDivergedError(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    batch_size: int = 64
    epochs: int = 30
    train_fraction: float = 0.8
    val_fraction: float = 0.1
    test_fraction: float = 0.1
    patience: int = 5
    seed: int = 0
    pos_weight: float = 1.0
    threshold: float = 0.5
    augment: bool = True

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")
        fr = (self.train_fraction, self.val_fraction, self.test_fraction)
        if any(f < 0 for f in fr) or abs(sum(fr) - 1.0) > 1e-9:
            raise ValueError(f"split fractions must be non-negative and sum to 1, got {fr}")
        if self.batch_size < 1 or self.epochs < 1 or self.patience < 1:
            raise ValueError("batch_size, epochs and patience must be at least 1")


@dataclass
class Dataset:
    """Observation tensors (n, M, K, Ns) with activity labels (n, K)."""

    tensors: np.ndarray
    labels: np.ndarray
    fingerprint: str = ""

    def __post_init__(self):
        if self.tensors.ndim != 4:
            raise ValueError("tensors must be (n, M, K, Ns)")
        self.labels = check_activity_matrix(self.labels, self.tensors.shape[0],
                                            self.tensors.shape[2])

    def __len__(self):
        return self.tensors.shape[0]

    def split(self, fractions, seed):
        """Shuffle with ``seed`` and cut into consecutive parts of the given fractions."""
        n = len(self)
        perm = np.random.default_rng(seed).permutation(n)
        cuts = np.round(np.cumsum(fractions)[:-1] * n).astype(int)
        return [Dataset(self.tensors[idx], self.labels[idx], self.fingerprint)
                for idx in np.split(perm, cuts)]


def tensor_to_input(R) -> np.ndarray:
    """Complex (…, M, K, Ns) tensor -> real (…, 2M, K, Ns); channel 2m is Re, 2m+1 is Im."""
    arr = R.R if isinstance(R, DecorrelatedTensor) else np.asarray(R)
    out = np.stack([arr.real, arr.imag], axis=-3)  # (…, M, 2, K, Ns)
    return out.reshape(arr.shape[:-3] + (2 * arr.shape[-3],) + arr.shape[-2:])


def input_to_tensor(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x)
    C = x.shape[-3]
    if C % 2:
        raise ValueError("channel count must be even")
    pairs = x.reshape(x.shape[:-3] + (C // 2, 2) + x.shape[-2:])
    return pairs[..., 0, :, :] + 1j * pairs[..., 1, :, :]


def channel_statistics(x: np.ndarray, center: bool = False):
    """Per-channel offset and scale over (samples, devices, symbols).

    The default keeps a zero offset (scale is the RMS): the observations are
    symmetric in sign, and an uncentered input keeps that symmetry exact.
    """
    mean = x.mean(axis=(0, 2, 3)) if center else np.zeros(x.shape[1])
    std = np.sqrt(np.mean((x - mean[None, :, None, None]) ** 2, axis=(0, 2, 3)))
    std = np.where(std > 0, std, 1.0)
    return mean, std


def augment_batch(x: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Random symbol-axis permutation and per-symbol sign flip of a (b, C, K, Ns) batch.

    Both leave the activity labels unchanged: symbols are exchangeable, and
    negating every device's symbol at one time index only flips the sign of
    that column (noise is sign-symmetric).
    """
    b, _, _, ns = x.shape
    order = rng.permuted(np.broadcast_to(np.arange(ns), (b, ns)), axis=1)
    signs = rng.choice(np.array([-1, 1], dtype=x.dtype), size=(b, 1, 1, ns))
    return np.take_along_axis(x, order[:, None, None, :], axis=3) * signs


def hypothesis_test(probs, threshold: float = 0.5):
    """Device k is declared active iff its probability is at least ``threshold``."""
    if not 0 < threshold < 1:
        raise ValueError(f"threshold must lie in (0, 1), got {threshold}")
    p = np.asarray(probs)
    est = (p >= threshold).astype(np.uint8)
    return ActivityVector(est) if est.ndim == 1 else est


def _batched_logits(params, x, chunk=1024):
    return np.concatenate([forward_logits(params, x[i:i + chunk])
                           for i in range(0, x.shape[0], chunk)])


def _save_state(path, params, best, adam, progress, log, extra_header):
    arrays = {}
    for tag, p in (("p", params), ("best", best)):
        for i, name, a in p.arrays():
            arrays[f"{tag}.{i}.{name}"] = a
    for tag, store in (("m", adam.m), ("v", adam.v)):
        for i, w in enumerate(store):
            for name, a in w.items():
                arrays[f"{tag}.{i}.{name}"] = a
    header = dict(extra_header, progress=progress, log=log, adam_t=adam.t,
                  architecture=params.architecture, input_shape=list(params.input_shape))
    write_container(path, "cnn_train_state", arrays, header)


def _load_state(path, dtype):
    header, arrays = read_container(path, kind="cnn_train_state")
    arch, shape = header["architecture"], tuple(header["input_shape"])

    def collect(tag):
        out = [dict() for _ in arch]
        for key, a in arrays.items():
            t, i, name = key.split(".")
            if t == tag:
                out[int(i)][name] = a.astype(dtype)
        return out

    params = CnnParameters(arch, shape, collect("p"))
    best = CnnParameters(arch, shape, collect("best"))
    adam = AdamState(collect("m"), collect("v"), int(header["adam_t"]))
    return header, params, best, adam


def train(x_train, y_train, x_val, y_val, params: CnnParameters, cfg: TrainConfig,
          state_path=None, resume: bool = False, state_header: Optional[dict] = None):
    """Mini-batch Adam on the BCE loss with best-validation checkpointing.

    Inputs are already standardized real arrays (n, 2M, K, Ns).  Returns
    ``(best_params, log)`` where ``log`` has one dict per epoch with
    ``epoch, train_loss, val_loss, val_aer``.  Shuffling for epoch e uses
    its own generator, so a run resumed from ``state_path`` follows the
    same trajectory as an uninterrupted one.
    """
    if x_train.shape[0] == 0:
        raise ValueError("training split is empty")
    dtype = params.dtype
    adam = AdamState.zeros_like(params)
    best = params.copy()
    progress = dict(epoch=0, best_val=float("inf"), best_epoch=0, bad_epochs=0)
    log = []
    if resume and state_path is not None and Path(state_path).exists():
        header, params, best, adam = _load_state(state_path, dtype)
        progress, log = header["progress"], header["log"]
        logger.info("resuming training after epoch %d", progress["epoch"])

    n = x_train.shape[0]
    bs = cfg.batch_size
    while progress["epoch"] < cfg.epochs and progress["bad_epochs"] < cfg.patience:
        epoch = progress["epoch"] + 1
        perm = np.random.default_rng(np.random.SeedSequence(cfg.seed, spawn_key=(1, epoch))).permutation(n)
        total = 0.0
        aug_rng = np.random.default_rng(np.random.SeedSequence(cfg.seed, spawn_key=(2, epoch)))
        for s in range(0, n, bs):
            idx = perm[s:s + bs]
            xb = augment_batch(x_train[idx], aug_rng) if cfg.augment else x_train[idx]
            loss, grads = backward(params, xb, y_train[idx], cfg.pos_weight)
            if not np.isfinite(loss):
                raise TrainingDivergedError(f"loss became {loss} at epoch {epoch}")
            adam_step(params, grads, adam, cfg.learning_rate, (cfg.beta1, cfg.beta2), cfg.epsilon)
            total += loss * len(idx)
        if not params.is_finite():
            raise TrainingDivergedError(f"non-finite weights after epoch {epoch}")
        train_loss = total / n
        if x_val is not None and x_val.shape[0] > 0:
            z = _batched_logits(params, x_val)
            val_loss = bce_with_logits(z, y_val, cfg.pos_weight)
            val_aer = float(np.mean((sigmoid(z) >= cfg.threshold) != y_val.astype(bool)))
        else:
            val_loss, val_aer = train_loss, float("nan")
        log.append(dict(epoch=epoch, train_loss=float(train_loss), val_loss=float(val_loss),
                        val_aer=val_aer))
        logger.info("epoch %d  train %.5f  val %.5f  val AER %.5f", epoch, train_loss, val_loss,
                    val_aer)
        progress["epoch"] = epoch
        if val_loss < progress["best_val"]:
            progress.update(best_val=float(val_loss), best_epoch=epoch, bad_epochs=0)
            best = params.copy()
        else:
            progress["bad_epochs"] += 1
        if state_path is not None:
            _save_state(state_path, params, best, adam, progress, log, state_header or {})
    return best, log


class CnnActivityDetector(ClassifierMixin, BaseEstimator):
    """Convolutional activity detector over decorrelated observation tensors.

    ``X`` may be a :class:`FrameBatch` (decorrelated internally) or a complex
    array of tensors shaped (n, M, K, Ns).  ``predict_proba`` returns an
    (n, K) array of per-device activity probabilities and ``predict`` the
    thresholded activity matrix.

    Parameters
    ----------
    conv_channels : tuple of int
        Filters in each convolution layer.
    kernel_size : (int, int)
        Kernel extent over (devices, symbols).  Width 1 along devices keeps
        the feature extractor free of any device ordering.
    hidden_units : int
        Width of the dense layer before the output.
    threshold : float
        Hypothesis-test threshold on the output probabilities.
    augment : bool
        Train on randomly symbol-permuted and column-sign-flipped batches.
    dtype : str
        Floating type used for training and inference.
    """

    def __init__(self, conv_channels=(8, 16), kernel_size=(1, 3), hidden_units=64,
                 learning_rate=1e-3, beta1=0.9, beta2=0.999, epsilon=1e-8, batch_size=64,
                 max_epochs=30, patience=5, validation_fraction=0.1, threshold=0.5,
                 pos_weight=1.0, augment=True, dtype="float32", random_state=0):
        self.conv_channels = conv_channels
        self.kernel_size = kernel_size
        self.hidden_units = hidden_units
        self.learning_rate = learning_rate
        self.beta1 = beta1
        self.beta2 = beta2
        self.epsilon = epsilon
        self.batch_size = batch_size
        self.max_epochs = max_epochs
        self.patience = patience
        self.validation_fraction = validation_fraction
        self.threshold = threshold
        self.pos_weight = pos_weight
        self.augment = augment
        self.dtype = dtype
        self.random_state = random_state

    def _train_config(self):
        return TrainConfig(learning_rate=self.learning_rate, beta1=self.beta1, beta2=self.beta2,
                           epsilon=self.epsilon, batch_size=self.batch_size,
                           epochs=self.max_epochs, patience=self.patience,
                           seed=int(self.random_state), pos_weight=self.pos_weight,
                           threshold=self.threshold, augment=self.augment)

    @staticmethod
    def _tensors(X):
        if isinstance(X, FrameBatch):
            return decorrelate_frames(X)
        if isinstance(X, DecorrelatedTensor):
            return X.R[None]
        X = np.asarray(X)
        if X.ndim == 3:
            X = X[None]
        if X.ndim != 4:
            raise ValueError(f"expected tensors shaped (n, M, K, Ns), got {X.shape}")
        return X

    def _prepare(self, X):
        x = tensor_to_input(self._tensors(X))
        return ((x - self.input_mean_[None, :, None, None])
                / self.input_std_[None, :, None, None]).astype(self.dtype)

    def fit(self, X, y, X_val=None, y_val=None, state_path=None, resume=False,
            state_header=None):
        """Train from scratch (or resume from ``state_path``).

        Without ``X_val`` a ``validation_fraction`` share of ``X`` is held out.
        """
        R = self._tensors(X)
        labels = check_activity_matrix(y, R.shape[0], R.shape[2])
        if X_val is None:
            perm = np.random.default_rng(self.random_state).permutation(R.shape[0])
            n_val = int(round(self.validation_fraction * R.shape[0]))
            val_idx, tr_idx = perm[:n_val], perm[n_val:]
            R_val, lab_val = R[val_idx], labels[val_idx]
            R, labels = R[tr_idx], labels[tr_idx]
        else:
            R_val = self._tensors(X_val)
            lab_val = check_activity_matrix(y_val, R_val.shape[0], R.shape[2])
        if R.shape[0] == 0:
            raise ValueError("no training samples")

        x_raw = tensor_to_input(R)
        self.input_mean_, self.input_std_ = channel_statistics(x_raw)
        x_tr = self._prepare(R)
        x_va = self._prepare(R_val)
        _, M, K, Ns = R.shape
        self.n_devices_ = K
        self.classes_ = np.array([0, 1])
        arch = default_architecture(K, self.conv_channels, self.kernel_size, self.hidden_units)
        rng = np.random.default_rng(np.random.SeedSequence(int(self.random_state), spawn_key=(0,)))
        params = init_parameters(arch, (2 * M, K, Ns), rng, dtype=np.dtype(self.dtype))
        cfg = self._train_config()
        self.params_, self.training_log_ = train(x_tr, labels, x_va, lab_val, params, cfg,
                                                 state_path=state_path, resume=resume,
                                                 state_header=state_header)
        self.best_epoch_ = min(self.training_log_, key=lambda r: r["val_loss"])["epoch"]
        return self

    def predict_proba(self, X):
        check_is_fitted(self, "params_")
        x = self._prepare(X)
        p = sigmoid(_batched_logits(self.params_, x)).astype(float)
        return np.clip(p, np.finfo(float).tiny, 1.0 - np.finfo(float).epsneg)

    def predict(self, X):
        return hypothesis_test(self.predict_proba(X), self.threshold)

    def save(self, path, config_hash: str = "") -> Path:
        """Checkpoint: architecture and settings in the header, float32 weights."""
        check_is_fitted(self, "params_")
        arrays = {f"L{i}.{name}": a for i, name, a in self.params_.arrays()}
        dtypes = {k: "f4" for k in arrays}
        arrays["input_mean"] = self.input_mean_
        arrays["input_std"] = self.input_std_
        settings = self.get_params()
        settings["conv_channels"] = list(settings["conv_channels"])
        settings["kernel_size"] = list(settings["kernel_size"])
        header = dict(architecture=self.params_.architecture,
                      input_shape=list(self.params_.input_shape), settings=settings,
                      best_epoch=int(self.best_epoch_), training_log=self.training_log_)
        return write_container(path, "cnn_checkpoint", arrays, header, dtypes, config_hash)

    @classmethod
    def load(cls, path) -> "CnnActivityDetector":
        header, arrays = read_container(path, kind="cnn_checkpoint")
        settings = dict(header["settings"])
        settings["conv_channels"] = tuple(settings["conv_channels"])
        settings["kernel_size"] = tuple(settings["kernel_size"])
        est = cls(**settings)
        arch = header["architecture"]
        weights = [dict() for _ in arch]
        for key, a in arrays.items():
            if key.startswith("L"):
                i, name = key[1:].split(".")
                weights[int(i)][name] = a.astype(est.dtype)
        est.params_ = CnnParameters(arch, tuple(header["input_shape"]), weights)
        est.input_mean_ = arrays["input_mean"]
        est.input_std_ = arrays["input_std"]
        est.n_devices_ = est.params_.n_outputs
        est.classes_ = np.array([0, 1])
        est.training_log_ = header["training_log"]
        est.best_epoch_ = header["best_epoch"]
        est.config_hash_ = header.get("config_hash", "")
        return est
