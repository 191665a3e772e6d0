"""Parameter container, forward/backward passes, loss and Adam for the detector CNN."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import List, Optional, Tuple

import numpy as np

from . import layers

PARAM_KINDS = ("conv", "dense")


def default_architecture(K: int, conv_channels=(8, 16), kernel_size=(1, 3), hidden_units=64):
    """conv -> ReLU -> conv -> ReLU -> mean over symbols -> flatten -> dense -> ReLU -> dense(K)."""
    arch = []
    for ch in conv_channels:
        arch.append({"kind": "conv", "out_channels": int(ch), "kernel": list(kernel_size)})
        arch.append({"kind": "relu"})
    arch.append({"kind": "mean_pool"})
    arch.append({"kind": "flatten"})
    if hidden_units:
        arch.append({"kind": "dense", "units": int(hidden_units)})
        arch.append({"kind": "relu"})
    arch.append({"kind": "dense", "units": int(K)})
    return arch


@dataclass
class CnnParameters:
    """Trainable weights plus the architecture they belong to.

    ``weights[i]`` holds ``{"W": ..., "b": ...}`` for conv/dense layer i and
    is empty for parameter-free layers.
    """

    architecture: list
    input_shape: Tuple[int, int, int]
    weights: List[dict] = field(default_factory=list)

    def __post_init__(self):
        self.input_shape = tuple(int(s) for s in self.input_shape)
        if self.weights:
            self.check_shapes()

    def arrays(self):
        """(layer index, name, array) for every trainable array, in a fixed order."""
        for i, w in enumerate(self.weights):
            for name in ("W", "b"):
                if name in w:
                    yield i, name, w[name]

    @property
    def n_outputs(self) -> int:
        return self.architecture[-1]["units"]

    @property
    def dtype(self):
        for _, _, a in self.arrays():
            return a.dtype
        return np.dtype(float)

    def copy(self) -> "CnnParameters":
        return CnnParameters([dict(l) for l in self.architecture], self.input_shape,
                             [{k: v.copy() for k, v in w.items()} for w in self.weights])

    def astype(self, dtype) -> "CnnParameters":
        out = self.copy()
        for w in out.weights:
            for k in w:
                w[k] = w[k].astype(dtype)
        return out

    def is_finite(self) -> bool:
        return all(np.all(np.isfinite(a)) for _, _, a in self.arrays())

    def expected_shapes(self):
        C, H, W = self.input_shape
        shape = (C, H, W)
        out = []
        for layer in self.architecture:
            kind = layer["kind"]
            if kind == "conv":
                kh, kw = layer["kernel"]
                o = layer["out_channels"]
                out.append({"W": (o, shape[0], kh, kw), "b": (o,)})
                shape = (o,) + shape[1:]
            elif kind == "dense":
                if len(shape) != 1:
                    raise ValueError("dense layer needs a flattened input")
                out.append({"W": (layer["units"], shape[0]), "b": (layer["units"],)})
                shape = (layer["units"],)
            elif kind == "relu":
                out.append({})
            elif kind == "mean_pool":
                if len(shape) != 3:
                    raise ValueError("mean_pool needs a (C, H, W) input")
                out.append({})
                shape = shape[:2]
            elif kind == "flatten":
                out.append({})
                shape = (int(np.prod(shape)),)
            else:
                raise ValueError(f"unknown layer kind {kind!r}")
        if len(shape) != 1:
            raise ValueError("architecture must end in a flat output")
        return out

    def check_shapes(self):
        expected = self.expected_shapes()
        if len(expected) != len(self.weights):
            raise ValueError("weights list does not match the architecture")
        for i, (exp, got) in enumerate(zip(expected, self.weights)):
            if set(exp) != set(got):
                raise ValueError(f"layer {i}: expected arrays {sorted(exp)}, got {sorted(got)}")
            for name, shp in exp.items():
                if tuple(got[name].shape) != tuple(shp):
                    raise ValueError(f"layer {i} {name}: expected shape {shp}, got {got[name].shape}")


def init_parameters(architecture, input_shape, rng: np.random.Generator,
                    dtype=np.float64) -> CnnParameters:
    """Fan-in scaled uniform weights (limit sqrt(6 / fan_in)), zero biases."""
    params = CnnParameters(architecture, input_shape)
    weights = []
    for exp in params.expected_shapes():
        if not exp:
            weights.append({})
            continue
        wshape = exp["W"]
        fan_in = int(np.prod(wshape[1:]))
        limit = np.sqrt(6.0 / fan_in)
        weights.append({"W": rng.uniform(-limit, limit, size=wshape).astype(dtype),
                        "b": np.zeros(exp["b"], dtype=dtype)})
    params.weights = weights
    params.check_shapes()
    return params


def zero_parameters(architecture, input_shape, dtype=np.float64) -> CnnParameters:
    params = CnnParameters(architecture, input_shape)
    params.weights = [{k: np.zeros(s, dtype=dtype) for k, s in exp.items()}
                      for exp in params.expected_shapes()]
    return params


def forward_logits(params: CnnParameters, x: np.ndarray, keep_cache: bool = False):
    """Logits (B, K); with ``keep_cache`` also the per-layer inputs for backprop."""
    if tuple(x.shape[1:]) != params.input_shape:
        raise ValueError(f"input shape {x.shape[1:]} does not match network {params.input_shape}")
    cache = []
    h = x
    for layer, w in zip(params.architecture, params.weights):
        if keep_cache:
            cache.append(h)
        kind = layer["kind"]
        if kind == "conv":
            h = layers.conv2d_forward(h, w["W"], w["b"])
        elif kind == "relu":
            h = layers.relu_forward(h)
        elif kind == "mean_pool":
            h = layers.mean_pool_forward(h)
        elif kind == "flatten":
            h = h.reshape(h.shape[0], -1)
        elif kind == "dense":
            h = layers.dense_forward(h, w["W"], w["b"])
    return (h, cache) if keep_cache else h


def forward(params: CnnParameters, x: np.ndarray) -> np.ndarray:
    """Activity probabilities (B, K) in (0, 1)."""
    p = layers.sigmoid(forward_logits(params, x))
    # saturated logits would otherwise round to exactly 0 or 1
    fi = np.finfo(p.dtype)
    return np.clip(p, fi.tiny, 1.0 - fi.epsneg)


def bce_loss(probs, labels, eps: float = 1e-7) -> float:
    """Binary cross-entropy summed over devices, averaged over samples."""
    p = np.clip(np.asarray(probs, dtype=float), eps, 1 - eps)
    a = np.asarray(labels, dtype=float)
    if p.shape != a.shape:
        raise ValueError(f"predictions {p.shape} and labels {a.shape} differ in shape")
    if p.ndim == 1:
        p, a = p[None], a[None]
    return float(np.mean(np.sum(-(a * np.log(p) + (1 - a) * np.log(1 - p)), axis=1)))


def bce_with_logits(logits, labels, pos_weight: float = 1.0) -> float:
    """Same loss evaluated from logits without forming probabilities.

    -log sigmoid(z) = softplus(-z) and -log(1 - sigmoid(z)) = softplus(z).
    """
    z = np.asarray(logits)
    a = np.asarray(labels, dtype=z.dtype)
    sp_pos = np.logaddexp(0, -z)
    sp_neg = np.logaddexp(0, z)
    per = pos_weight * a * sp_pos + (1 - a) * sp_neg
    return float(np.mean(per.sum(axis=1)))


def logit_gradient(logits, labels, pos_weight: float = 1.0):
    """d loss / d logits for :func:`bce_with_logits` (mean over the batch)."""
    z = np.asarray(logits)
    a = np.asarray(labels, dtype=z.dtype)
    p = layers.sigmoid(z)
    if pos_weight == 1.0:
        g = p - a
    else:
        g = pos_weight * a * (p - 1) + (1 - a) * p
    return g / z.shape[0]


def backward(params: CnnParameters, x: np.ndarray, labels: np.ndarray,
             pos_weight: float = 1.0):
    """Loss and reverse-mode gradients, one ``{"W", "b"}`` dict per layer."""
    logits, cache = forward_logits(params, x, keep_cache=True)
    loss = bce_with_logits(logits, labels, pos_weight)
    grads = [{} for _ in params.weights]
    d = logit_gradient(logits, labels, pos_weight)
    for i in range(len(params.architecture) - 1, -1, -1):
        kind = params.architecture[i]["kind"]
        inp = cache[i]
        w = params.weights[i]
        if kind == "dense":
            d, gW, gb = layers.dense_backward(d, inp, w["W"])
            grads[i] = {"W": gW, "b": gb}
        elif kind == "conv":
            d, gW, gb = layers.conv2d_backward(d, inp, w["W"])
            grads[i] = {"W": gW, "b": gb}
        elif kind == "relu":
            d = layers.relu_backward(d, inp)
        elif kind == "mean_pool":
            d = layers.mean_pool_backward(d, inp)
        elif kind == "flatten":
            d = d.reshape(inp.shape)
    return loss, grads


@dataclass
class AdamState:
    m: List[dict]
    v: List[dict]
    t: int = 0

    @classmethod
    def zeros_like(cls, params: CnnParameters) -> "AdamState":
        m = [{k: np.zeros_like(a) for k, a in w.items()} for w in params.weights]
        v = [{k: np.zeros_like(a) for k, a in w.items()} for w in params.weights]
        return cls(m, v, 0)


def adam_step(params: CnnParameters, grads: List[dict], state: AdamState, lr: float = 1e-3,
              betas=(0.9, 0.999), eps: float = 1e-8):
    """One bias-corrected Adam update, applied in place; returns (params, state)."""
    if len(grads) != len(params.weights):
        raise ValueError("gradient list does not match the parameters")
    b1, b2 = betas
    state.t += 1
    c1 = 1.0 - b1 ** state.t
    c2 = 1.0 - b2 ** state.t
    for w, g, m, v in zip(params.weights, grads, state.m, state.v):
        for k in w:
            gk = g[k].astype(w[k].dtype, copy=False)
            m[k] *= b1
            m[k] += (1 - b1) * gk
            v[k] *= b2
            v[k] += (1 - b2) * gk * gk
            w[k] -= (lr * (m[k] / c1) / (np.sqrt(v[k] / c2) + eps)).astype(w[k].dtype)
    return params, state
