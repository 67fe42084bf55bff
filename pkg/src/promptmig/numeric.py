"""Dense kernels, seeded randomness, Adam, and a finite-difference checker.

All arrays are float64 numpy arrays.  Matrices are 2-D (rows x cols);
row vectors are 1-D.  Batched variants operate row-wise on 2-D inputs.

Randomness uses numpy's ``Generator`` over the PCG64 bit generator, whose
stream is fixed by numpy's stability policy and identical across platforms
for a given seed.  Stage seeds are derived with BLAKE2b so that every
pipeline stage can be reproduced on its own.
"""
from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

GELU_C = np.sqrt(2.0 / np.pi)


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


def make_rng(seed: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(int(seed) & 0xFFFFFFFFFFFFFFFF))


def derive_seed(seed: int, *names: object) -> int:
    """Deterministic 64-bit child seed for ``(seed, names...)``."""
    h = hashlib.blake2b(digest_size=8)
    h.update(str(int(seed)).encode())
    for n in names:
        h.update(b"/")
        h.update(str(n).encode())
    return int.from_bytes(h.digest(), "little")


def dense_affine(x: np.ndarray, W: np.ndarray, b: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    W = np.asarray(W, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if x.ndim != 2 or W.ndim != 2 or x.shape[1] != W.shape[0]:
        raise ShapeError(f"dense_affine: x{x.shape} incompatible with W{W.shape}")
    if b.shape != (W.shape[1],):
        raise ShapeError(f"dense_affine: bias{b.shape} incompatible with W{W.shape}")
    return x @ W + b


def layer_norm(x, gamma, beta, eps: float = 1e-5) -> np.ndarray:
    """Row-wise layer normalization with population variance."""
    return layer_norm_forward(x, gamma, beta, eps)[0]


def layer_norm_forward(x, gamma, beta, eps: float = 1e-5):
    """Returns ``(out, cache)``; works on a vector or on each row of a matrix."""
    x = np.asarray(x, dtype=np.float64)
    gamma = np.asarray(gamma, dtype=np.float64)
    beta = np.asarray(beta, dtype=np.float64)
    if gamma.shape != (x.shape[-1],) or beta.shape != gamma.shape:
        raise ShapeError(
            f"layer_norm: x{x.shape}, gamma{gamma.shape}, beta{beta.shape} lengths differ"
        )
    if eps <= 0:
        raise ValueError("layer_norm: eps must be positive")
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = xc * rstd
    return xhat * gamma + beta, (xhat, rstd, gamma)


def layer_norm_backward(g_out, cache):
    """Gradients ``(g_x, g_gamma, g_beta)``; parameter grads summed over rows."""
    xhat, rstd, gamma = cache
    g_xhat = g_out * gamma
    n = xhat.shape[-1]
    g_x = rstd * (
        g_xhat
        - g_xhat.mean(axis=-1, keepdims=True)
        - xhat * (g_xhat * xhat).mean(axis=-1, keepdims=True)
    )
    g_gamma = (g_out * xhat).reshape(-1, n).sum(axis=0)
    g_beta = g_out.reshape(-1, n).sum(axis=0)
    return g_x, g_gamma, g_beta


def activation(x, kind: str) -> np.ndarray:
    """Elementwise nonlinearity.

    ``gelu`` is the tanh approximation
    ``0.5 * x * (1 + tanh(sqrt(2/pi) * (x + 0.044715 x^3)))``.
    """
    x = np.asarray(x, dtype=np.float64)
    if kind == "tanh":
        return np.tanh(x)
    if kind == "relu":
        return np.maximum(x, 0.0)
    if kind == "gelu":
        return 0.5 * x * (1.0 + np.tanh(GELU_C * (x + 0.044715 * x * x * x)))
    if kind == "linear":
        return x.copy()
    raise ValueError(f"unknown activation {kind!r}")


def activation_grad(x, kind: str) -> np.ndarray:
    """Derivative of :func:`activation` with respect to its input."""
    x = np.asarray(x, dtype=np.float64)
    if kind == "tanh":
        t = np.tanh(x)
        return 1.0 - t * t
    if kind == "relu":
        return (x > 0).astype(np.float64)
    if kind == "gelu":
        u = GELU_C * (x + 0.044715 * x * x * x)
        t = np.tanh(u)
        du = GELU_C * (1.0 + 3 * 0.044715 * x * x)
        return 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
    if kind == "linear":
        return np.ones_like(x)
    raise ValueError(f"unknown activation {kind!r}")


def log_softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def softmax_cross_entropy(logits, label: int):
    """``(loss, grad)`` of ``-log softmax(logits)[label]`` for one row."""
    logits = np.asarray(logits, dtype=np.float64)
    if not 0 <= label < logits.shape[-1]:
        raise IndexError(f"label {label} out of range for {logits.shape[-1]} classes")
    lp = log_softmax(logits)
    grad = np.exp(lp)
    grad[label] -= 1.0
    return float(-lp[label]), grad


def softmax_cross_entropy_batch(logits: np.ndarray, labels: np.ndarray):
    """Per-row losses and gradients for a batch of logits."""
    labels = np.asarray(labels, dtype=np.int64)
    if labels.min(initial=0) < 0 or labels.max(initial=0) >= logits.shape[1]:
        raise IndexError("label out of range")
    lp = log_softmax(logits)
    rows = np.arange(len(labels))
    grad = np.exp(lp)
    grad[rows, labels] -= 1.0
    return -lp[rows, labels], grad


def sigmoid(z):
    z = np.asarray(z, dtype=np.float64)
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def softplus(z):
    """``log(1 + exp(z))`` without overflow."""
    z = np.asarray(z, dtype=np.float64)
    return np.maximum(z, 0.0) + np.log1p(np.exp(-np.abs(z)))


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params: dict, grads: dict, state: AdamState) -> tuple[dict, AdamState]:
    """One bias-corrected Adam update, applied in place to ``params``."""
    for k, g in grads.items():
        if k not in params:
            raise KeyError(f"gradient for unknown parameter {k!r}")
        if params[k].shape != g.shape:
            raise ShapeError(f"adam_step: {k} param{params[k].shape} vs grad{g.shape}")
    state.step += 1
    t = state.step
    bc1 = 1.0 - state.beta1**t
    bc2 = 1.0 - state.beta2**t
    for k, g in grads.items():
        if k not in state.m:
            state.m[k] = np.zeros_like(params[k])
            state.v[k] = np.zeros_like(params[k])
        m, v = state.m[k], state.v[k]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        params[k] -= state.lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)
    return params, state


def finite_difference_gradient(
    f: Callable[[np.ndarray], float], x: np.ndarray, h: float = 1e-5
) -> np.ndarray:
    """Central-difference gradient of scalar ``f`` at ``x`` (any shape)."""
    if h <= 0:
        raise ValueError("h must be positive")
    x = np.array(x, dtype=np.float64)
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        fp = f(x)
        flat[i] = old - h
        fm = f(x)
        flat[i] = old
        gflat[i] = (fp - fm) / (2 * h)
    return grad


def rel_error(a: np.ndarray, b: np.ndarray, floor: float = 1e-8) -> float:
    """Max-norm relative error ``|a-b| / max(|a|, |b|, floor)``."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    denom = max(np.abs(a).max(initial=0.0), np.abs(b).max(initial=0.0), floor)
    return float(np.abs(a - b).max(initial=0.0) / denom)
