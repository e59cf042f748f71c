"""Building blocks with explicit forward/backward passes.

Every block caches what its backward pass needs on the instance, so a block
object must be used exactly once per forward.  Linear-like projections are
interchangeable: a plain :class:`Linear` or an
:class:`~microvlm.adapters.AdapterLinear`.
"""
from __future__ import annotations

import math

import numpy as np

from .adapters import AdapterLinear
from .errors import EmptyVisual, ShapeMismatch, StaleCache
from .tensor import (
    Prng,
    check_finite,
    rms_norm_backward,
    rms_norm_forward,
    softmax,
    softmax_backward,
    swiglu,
    swiglu_backward,
)

_NEG = -1e30


class Module:
    """Container for named arrays, their gradients and child blocks."""

    def __init__(self):
        self.params: dict[str, np.ndarray] = {}
        self.grads: dict[str, np.ndarray] = {}
        self.frozen: set[str] = set()
        self.children: dict[str, object] = {}

    def add(self, name, child):
        self.children[name] = child
        return child

    def walk(self, prefix=""):
        """Yield ``(dotted_path, block)`` for self and every descendant."""
        yield prefix, self
        for name, child in self.children.items():
            path = f"{prefix}.{name}" if prefix else name
            if isinstance(child, Module):
                yield from child.walk(path)
            else:
                yield path, child

    def adapters(self):
        return [(p, m) for p, m in self.walk() if isinstance(m, AdapterLinear)]

    def trainable_params(self):
        """``(path, owner, key)`` for every non-adapter trainable array."""
        out = []
        for path, mod in self.walk():
            if isinstance(mod, Module):
                for key in mod.params:
                    if key not in mod.frozen:
                        out.append((f"{path}.{key}" if path else key, mod, key))
        return out

    def freeze(self):
        for _, mod in self.walk():
            if isinstance(mod, Module):
                mod.frozen = set(mod.params)

    def zero_grad(self):
        for _, mod in self.walk():
            if isinstance(mod, (Module, AdapterLinear)):
                mod.grads = {}

    def astype(self, dtype):
        for _, mod in self.walk():
            if isinstance(mod, Module):
                for k, v in mod.params.items():
                    mod.params[k] = v.astype(dtype)
            elif isinstance(mod, AdapterLinear):
                mod.A = mod.A.astype(dtype)
                mod.B = mod.B.astype(dtype)
                if not mod.quantized:
                    mod.W0 = mod.W0.astype(dtype)
                mod._dense = None
        return self


class Linear(Module):
    def __init__(self, d_in, d_out, prng: Prng, bias=False, dtype=np.float32, std=None):
        super().__init__()
        std = 1.0 / np.sqrt(d_in) if std is None else std
        self.params["W"] = prng.normal((d_in, d_out), std, dtype) if std else np.zeros((d_in, d_out), dtype)
        if bias:
            self.params["b"] = np.zeros(d_out, dtype)
        self._x = None

    def forward(self, x):
        if x.shape[-1] != self.params["W"].shape[0]:
            raise ShapeMismatch(f"input width {x.shape[-1]} != {self.params['W'].shape[0]}")
        self._x = x
        y = x @ self.params["W"]
        if "b" in self.params:
            y = y + self.params["b"]
        return y

    __call__ = forward

    def backward(self, dy):
        if self._x is None:
            raise StaleCache("Linear.backward without forward")
        x, self._x = self._x, None
        W = self.params["W"]
        self.grads["W"] = x.reshape(-1, W.shape[0]).T @ dy.reshape(-1, W.shape[1])
        if "b" in self.params:
            self.grads["b"] = dy.reshape(-1, W.shape[1]).sum(axis=0)
        return dy @ W.T


class RMSNorm(Module):
    def __init__(self, d, dtype=np.float32):
        super().__init__()
        self.params["gain"] = np.ones(d, dtype)
        self._cache = None

    def forward(self, x):
        y, inv = rms_norm_forward(x, self.params["gain"])
        self._cache = (x, inv)
        return y

    __call__ = forward

    def backward(self, dy):
        if self._cache is None:
            raise StaleCache("RMSNorm.backward without forward")
        x, inv = self._cache
        self._cache = None
        dx, self.grads["gain"] = rms_norm_backward(x, self.params["gain"], inv, dy)
        return dx


def _split_heads(x, h):
    B, T, D = x.shape
    return x.reshape(B, T, h, D // h).transpose(0, 2, 1, 3)


def _merge_heads(x):
    B, H, T, dh = x.shape
    return x.transpose(0, 2, 1, 3).reshape(B, T, H * dh)


class Attention(Module):
    """Multi-head attention over ``(batch, time, width)`` inputs.

    ``forward(xq, xkv)`` attends queries from ``xq`` over keys and values
    projected from ``xkv``; ``backward`` returns ``(dxq, dxkv)``.
    """

    def __init__(self, q, k, v, o, n_heads, causal=False):
        super().__init__()
        self.q = self.add("q", q)
        self.k = self.add("k", k)
        self.v = self.add("v", v)
        self.o = self.add("o", o)
        self.n_heads = n_heads
        self.causal = causal
        self._cache = None

    def forward(self, xq, xkv=None):
        xkv = xq if xkv is None else xkv
        if xq.ndim != 3 or xkv.ndim != 3 or xq.shape[0] != xkv.shape[0]:
            raise ShapeMismatch(f"attention inputs {xq.shape} / {xkv.shape}")
        h = self.n_heads
        Q = _split_heads(self.q(xq), h)
        K = _split_heads(self.k(xkv), h)
        V = _split_heads(self.v(xkv), h)
        scale = 1.0 / math.sqrt(Q.shape[-1])
        S = (Q @ K.transpose(0, 1, 3, 2)) * scale
        if self.causal:
            Tq, Tk = S.shape[-2:]
            allowed = np.tril(np.ones((Tq, Tk), dtype=bool), k=Tk - Tq)
            S = np.where(allowed, S, S.dtype.type(_NEG))
        P = softmax(S, axis=-1)
        O = _merge_heads(P @ V)
        self._cache = (Q, K, V, P, scale)
        return self.o(O)

    __call__ = forward

    def backward(self, dout):
        if self._cache is None:
            raise StaleCache("Attention.backward without forward")
        Q, K, V, P, scale = self._cache
        self._cache = None
        h = self.n_heads
        dO = _split_heads(self.o.backward(dout), h)
        dP = dO @ V.transpose(0, 1, 3, 2)
        dV = P.transpose(0, 1, 3, 2) @ dO
        dS = softmax_backward(P, dP) * scale
        dQ = dS @ K
        dK = dS.transpose(0, 1, 3, 2) @ Q
        dxq = self.q.backward(_merge_heads(dQ))
        dxkv = self.k.backward(_merge_heads(dK)) + self.v.backward(_merge_heads(dV))
        return dxq, dxkv


class SwiGLUFFN(Module):
    def __init__(self, w_in, w_out):
        super().__init__()
        self.w_in = self.add("w_in", w_in)
        self.w_out = self.add("w_out", w_out)
        self._z = None

    def forward(self, x):
        z = self.w_in(x)
        self._z = z
        return self.w_out(swiglu(z))

    __call__ = forward

    def backward(self, dy):
        if self._z is None:
            raise StaleCache("SwiGLUFFN.backward without forward")
        z, self._z = self._z, None
        return self.w_in.backward(swiglu_backward(z, self.w_out.backward(dy)))


class GatedCrossAttention(Module):
    """``x + tanh(gate) * MHA(norm(x), visual)`` with a scalar gate."""

    def __init__(self, attn: Attention, d, dtype=np.float32):
        super().__init__()
        self.norm = self.add("norm", RMSNorm(d, dtype))
        self.attn = self.add("attn", attn)
        self.params["gate"] = np.zeros(1, dtype)
        self._cache = None

    def forward(self, x, visual):
        if visual.shape[1] < 1:
            raise EmptyVisual("cross-attention needs at least one visual state")
        a = self.attn(self.norm(x), visual)
        t = np.tanh(self.params["gate"][0])
        self._cache = (a, t)
        return check_finite(x + t * a, "cross-attention output")

    __call__ = forward

    def backward(self, dy):
        if self._cache is None:
            raise StaleCache("GatedCrossAttention.backward without forward")
        a, t = self._cache
        self._cache = None
        self.grads["gate"] = np.array([np.sum(dy * a) * (1 - t * t)], dtype=self.params["gate"].dtype)
        dq, dvis = self.attn.backward(dy * t)
        return dy + self.norm.backward(dq), dvis


class SelfAttentionBlock(Module):
    """Pre-norm residual causal self-attention."""

    def __init__(self, attn: Attention, d, dtype=np.float32):
        super().__init__()
        self.norm = self.add("norm", RMSNorm(d, dtype))
        self.attn = self.add("attn", attn)

    def forward(self, x):
        return x + self.attn(self.norm(x))

    __call__ = forward

    def backward(self, dy):
        dq, dkv = self.attn.backward(dy)
        return dy + self.norm.backward(dq + dkv)


class FFNBlock(Module):
    def __init__(self, ffn: SwiGLUFFN, d, dtype=np.float32):
        super().__init__()
        self.norm = self.add("norm", RMSNorm(d, dtype))
        self.ffn = self.add("ffn", ffn)

    def forward(self, x):
        return x + self.ffn(self.norm(x))

    __call__ = forward

    def backward(self, dy):
        return dy + self.norm.backward(self.ffn.backward(dy))
