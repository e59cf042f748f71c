"""Deterministic numeric core.

Tensors are plain :class:`numpy.ndarray` objects (float32 for training,
float64 for gradient checks).  This module adds the pieces numpy does not
provide with the guarantees the rest of the package relies on: a portable
seeded generator, finite-checked primitive ops with hand-written backward
passes, and Adam.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import AllMasked, NonFinite, OddWidth, ShapeMismatch, TargetOutOfRange

_MASK64 = (1 << 64) - 1

RMS_EPS = 1e-6


def _rotl(x: int, k: int) -> int:
    return ((x << k) | (x >> (64 - k))) & _MASK64


def splitmix64(state: int) -> tuple[int, int]:
    """One splitmix64 step; returns ``(new_state, output)``."""
    state = (state + 0x9E3779B97F4A7C15) & _MASK64
    z = state
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
    return state, z ^ (z >> 31)


class Prng:
    """xoshiro256** seeded through splitmix64.

    Scalar draws (ranks, shuffles) come straight from the xoshiro stream.
    Bulk array draws take one 64-bit word from the stream and use it to seed
    a numpy ``PCG64`` generator, which is also a fixed, platform-independent
    algorithm, so the whole stream stays reproducible from ``seed``.
    """

    def __init__(self, seed: int = 0):
        self.seed = int(seed) & _MASK64
        sm = self.seed
        words = []
        for _ in range(4):
            sm, out = splitmix64(sm)
            words.append(out)
        self.state = words

    @classmethod
    def from_state(cls, state) -> "Prng":
        obj = cls.__new__(cls)
        obj.seed = None
        obj.state = [int(s) & _MASK64 for s in state]
        if not any(obj.state):
            raise ValueError("xoshiro256** state must not be all zero")
        return obj

    def next_u64(self) -> int:
        s = self.state
        result = (_rotl((s[1] * 5) & _MASK64, 7) * 9) & _MASK64
        t = (s[1] << 17) & _MASK64
        s[2] ^= s[0]
        s[3] ^= s[1]
        s[1] ^= s[2]
        s[0] ^= s[3]
        s[2] ^= t
        s[3] = _rotl(s[3], 45)
        return result

    def random(self) -> float:
        """Uniform double in [0, 1) with 53 random bits."""
        return (self.next_u64() >> 11) * (1.0 / (1 << 53))

    def randbelow(self, n: int) -> int:
        if n <= 0:
            raise ValueError("n must be positive")
        # rejection sampling keeps the draw exactly uniform
        limit = (1 << 64) - ((1 << 64) % n)
        while True:
            x = self.next_u64()
            if x < limit:
                return x % n

    def randint(self, lo: int, hi: int) -> int:
        """Uniform integer in the closed range [lo, hi]."""
        return lo + self.randbelow(hi - lo + 1)

    def categorical(self, weights) -> int:
        u = self.random()
        acc = 0.0
        for i, w in enumerate(weights):
            acc += w
            if u < acc:
                return i
        # u landed in the rounding slack past the last cumulative sum
        for i in range(len(weights) - 1, -1, -1):
            if weights[i] > 0:
                return i
        raise ValueError("categorical weights are all zero")

    def permutation(self, n: int) -> list[int]:
        out = list(range(n))
        for i in range(n - 1, 0, -1):
            j = self.randbelow(i + 1)
            out[i], out[j] = out[j], out[i]
        return out

    def numpy_generator(self) -> np.random.Generator:
        return np.random.Generator(np.random.PCG64(self.next_u64()))

    def normal(self, shape, std: float = 1.0, dtype=np.float32) -> np.ndarray:
        return (self.numpy_generator().standard_normal(shape) * std).astype(dtype)

    def uniform(self, shape, dtype=np.float64) -> np.ndarray:
        return self.numpy_generator().random(shape).astype(dtype)

    def spawn(self) -> "Prng":
        return Prng(self.next_u64())


def check_finite(x: np.ndarray, what: str = "tensor") -> np.ndarray:
    if not np.all(np.isfinite(x)):
        raise NonFinite(f"{what} contains NaN or Inf")
    return x


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    a = np.asarray(a)
    b = np.asarray(b)
    if a.ndim < 1 or b.ndim != 2 or a.shape[-1] != b.shape[0]:
        raise ShapeMismatch(f"cannot multiply {a.shape} by {b.shape}")
    return check_finite(a @ b, "matmul output")


def softmax(x: np.ndarray, axis: int = -1) -> np.ndarray:
    x = np.asarray(x)
    if not -x.ndim <= axis < max(x.ndim, 1):
        raise ShapeMismatch(f"axis {axis} invalid for shape {x.shape}")
    check_finite(x, "softmax input")
    z = x - np.max(x, axis=axis, keepdims=True)
    e = np.exp(z)
    return e / np.sum(e, axis=axis, keepdims=True)


def softmax_backward(p: np.ndarray, dp: np.ndarray, axis: int = -1) -> np.ndarray:
    return p * (dp - np.sum(dp * p, axis=axis, keepdims=True))


def rms_norm(x: np.ndarray, gain: np.ndarray, eps: float = RMS_EPS) -> np.ndarray:
    y, _ = rms_norm_forward(x, gain, eps)
    return y


def rms_norm_forward(x, gain, eps=RMS_EPS):
    """Returns the output and the inverse rms needed by the backward pass."""
    if x.shape[-1] != gain.shape[-1] or gain.ndim != 1:
        raise ShapeMismatch(f"gain {gain.shape} does not match last dim of {x.shape}")
    if eps <= 0:
        raise ValueError("eps must be positive")
    inv = 1.0 / np.sqrt(np.mean(x * x, axis=-1, keepdims=True) + eps)
    return check_finite(gain * (x * inv), "rms_norm output"), inv


def rms_norm_backward(x, gain, inv, dy):
    d = x.shape[-1]
    u = dy * gain
    dx = inv * u - x * (inv ** 3) * np.sum(u * x, axis=-1, keepdims=True) / d
    dgain = np.sum((dy * x * inv).reshape(-1, d), axis=0)
    return dx, dgain


def sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def swiglu(x: np.ndarray) -> np.ndarray:
    if x.shape[-1] % 2:
        raise OddWidth(f"swiglu needs an even last dim, got {x.shape[-1]}")
    h = x.shape[-1] // 2
    u, v = x[..., :h], x[..., h:]
    return check_finite(u * sigmoid(u) * v, "swiglu output")


def swiglu_backward(x: np.ndarray, dy: np.ndarray) -> np.ndarray:
    h = x.shape[-1] // 2
    u, v = x[..., :h], x[..., h:]
    s = sigmoid(u)
    silu = u * s
    dsilu = s * (1.0 + u * (1.0 - s))
    return np.concatenate([dy * v * dsilu, dy * silu], axis=-1)


def log_softmax(x: np.ndarray, axis: int = -1) -> np.ndarray:
    z = x - np.max(x, axis=axis, keepdims=True)
    return z - np.log(np.sum(np.exp(z), axis=axis, keepdims=True))


def cross_entropy(logits: np.ndarray, targets, mask=None):
    """Mean negative log-likelihood over unmasked rows.

    Returns ``(loss, dlogits)`` where ``dlogits`` is the gradient of the
    returned loss.
    """
    logits = np.asarray(logits)
    if logits.ndim != 2:
        raise ShapeMismatch(f"logits must be 2-d, got {logits.shape}")
    n, vocab = logits.shape
    targets = np.asarray(targets, dtype=np.int64)
    if targets.shape != (n,):
        raise ShapeMismatch(f"targets {targets.shape} vs logits {logits.shape}")
    mask = np.ones(n, dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
    count = int(mask.sum())
    if count == 0:
        raise AllMasked("no unmasked positions")
    live = targets[mask]
    if live.size and (live.min() < 0 or live.max() >= vocab):
        raise TargetOutOfRange(f"target ids must lie in [0, {vocab})")
    check_finite(logits, "logits")
    logp = log_softmax(logits)
    safe_t = np.where(mask, targets, 0)
    picked = logp[np.arange(n), safe_t]
    loss = -float(np.sum(picked[mask])) / count
    grad = np.exp(logp)
    grad[np.arange(n), safe_t] -= 1.0
    grad *= (mask[:, None] / count).astype(logits.dtype)
    return loss, grad.astype(logits.dtype)


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self):
        if not (0 < self.beta1 < 1 and 0 < self.beta2 < 1):
            raise ValueError("betas must lie in (0, 1)")
        if self.m.shape != self.v.shape:
            raise ShapeMismatch("m and v must share a shape")

    @classmethod
    def like(cls, param: np.ndarray, lr: float = 1e-3, **kw) -> "AdamState":
        return cls(np.zeros_like(param), np.zeros_like(param), lr=lr, **kw)


def adam_step(state: AdamState, param: np.ndarray, grad: np.ndarray, region=None) -> np.ndarray:
    """In-place Adam update with bias correction.

    ``region`` restricts the update (moments included) to ``param[region]``;
    ``grad`` then has the shape of that region.
    """
    if state.m.shape != param.shape:
        raise ShapeMismatch(f"state {state.m.shape} vs param {param.shape}")
    region = (...,) if region is None else region
    target_shape = param[region].shape
    if grad.shape != target_shape:
        raise ShapeMismatch(f"grad {grad.shape} vs update region {target_shape}")
    check_finite(grad, "gradient")
    state.t += 1
    m = state.m[region]
    v = state.v[region]
    m *= state.beta1
    m += (1 - state.beta1) * grad
    v *= state.beta2
    v += (1 - state.beta2) * grad * grad
    state.m[region] = m
    state.v[region] = v
    m_hat = m / (1 - state.beta1 ** state.t)
    v_hat = v / (1 - state.beta2 ** state.t)
    param[region] -= (state.lr * m_hat / (np.sqrt(v_hat) + state.eps)).astype(param.dtype)
    return param
