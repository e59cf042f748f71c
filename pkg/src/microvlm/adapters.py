"""Dynamic-rank low-rank adapters over frozen, optionally int8, base weights.

Convention (row vectors): ``Y = X @ W0 + alpha(b) * dropout(X @ A[:, :b]) @ B[:b, :]``
with ``W0`` of shape ``(d_in, d_out)``, ``A`` of ``(d_in, r_max)`` and ``B``
of ``(r_max, d_out)``.  Gradients are derived for that convention and are
checked against finite differences in the test suite.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import (
    BadRank,
    EmptyAccumulator,
    NonFinite,
    RankMismatch,
    RankOutOfRange,
    ShapeMismatch,
    StaleCache,
)
from .tensor import AdamState, Prng, adam_step, check_finite

MODES = ("lora", "lora_fa")


@dataclass
class QuantizedMatrix:
    """Symmetric per-output-column int8 weights."""

    q: np.ndarray
    scales: np.ndarray

    @property
    def shape(self):
        return self.q.shape

    @property
    def nbytes(self) -> int:
        return self.q.nbytes + self.scales.nbytes


def quantize_woq(W: np.ndarray) -> QuantizedMatrix:
    W = np.asarray(W)
    if W.ndim != 2:
        raise ShapeMismatch(f"expected a 2-d weight, got {W.shape}")
    if not np.all(np.isfinite(W)):
        raise NonFinite("cannot quantize non-finite weights")
    absmax = np.max(np.abs(W), axis=0).astype(np.float64)
    scales = np.where(absmax > 0, absmax / 127.0, 1.0).astype(np.float32)
    ratio = W.astype(np.float64) / scales.astype(np.float64)
    q = np.sign(ratio) * np.floor(np.abs(ratio) + 0.5)
    q = np.clip(q, -127, 127).astype(np.int8)
    return QuantizedMatrix(q=q, scales=scales)


def dequantize(qm: QuantizedMatrix, dtype=np.float32) -> np.ndarray:
    return qm.q.astype(dtype) * qm.scales.astype(dtype)


@dataclass
class RankSampler:
    r_min: int = 4
    r_max: int = 16
    weights: list | None = None

    def __post_init__(self):
        if not 1 <= self.r_min <= self.r_max:
            raise BadRank(f"need 1 <= r_min <= r_max, got [{self.r_min}, {self.r_max}]")
        n = self.r_max - self.r_min + 1
        if self.weights is None:
            self.weights = [1.0 / n] * n
        w = np.asarray(self.weights, dtype=np.float64)
        if w.shape != (n,) or np.any(w < 0) or abs(w.sum() - 1.0) > 1e-9:
            raise ValueError(f"weights must be {n} non-negative masses summing to 1")
        self.weights = [float(x) for x in w]

    @property
    def support(self) -> range:
        return range(self.r_min, self.r_max + 1)

    def sample(self, prng: Prng) -> int:
        return self.r_min + prng.categorical(self.weights)


def sample_rank(sampler: RankSampler, prng: Prng) -> int:
    return sampler.sample(prng)


class AdapterLinear:
    """Linear layer with frozen base weight and a nested low-rank update.

    ``mode="lora_fa"`` freezes ``A`` and trains only ``B``; ``mode="lora"``
    trains both.  ``alpha`` is either a float or ``"one_over_rank"``.
    """

    def __init__(self, W0, A, B, r_min, r_max, *, alpha="one_over_rank",
                 dropout_p=0.05, mode="lora_fa"):
        if mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}")
        d_in, d_out = W0.shape
        if not 1 <= r_min <= r_max <= min(d_in, d_out):
            raise BadRank(f"ranks [{r_min}, {r_max}] invalid for {d_in}x{d_out}")
        if A.shape != (d_in, r_max) or B.shape != (r_max, d_out):
            raise ShapeMismatch(f"A {A.shape} / B {B.shape} inconsistent with W0 {W0.shape}")
        if not 0.0 <= dropout_p < 1.0:
            raise ValueError("dropout_p must lie in [0, 1)")
        self.W0 = W0
        self.A = A
        self.B = B
        self.r_min = r_min
        self.r_max = r_max
        self.alpha = alpha
        self.dropout_p = dropout_p
        self.mode = mode
        self.active_rank = r_max
        self.training = False
        self.prng = None
        self.grads = {}
        self._cache = None
        self._dense = None

    @property
    def d_in(self) -> int:
        return self.W0.shape[0]

    @property
    def d_out(self) -> int:
        return self.W0.shape[1]

    @property
    def quantized(self) -> bool:
        return isinstance(self.W0, QuantizedMatrix)

    @property
    def trainable(self) -> tuple[str, ...]:
        return ("A", "B") if self.mode == "lora" else ("B",)

    def base_weight(self) -> np.ndarray:
        if self.quantized:
            if self._dense is None or self._dense.dtype != self.A.dtype:
                self._dense = dequantize(self.W0, self.A.dtype)
            return self._dense
        return self.W0

    def quantize(self) -> None:
        if not self.quantized:
            self.W0 = quantize_woq(self.W0)
            self._dense = None

    def alpha_for(self, b: int) -> float:
        if self.alpha == "one_over_rank":
            return 1.0 / b
        return float(self.alpha)

    def _check_rank(self, b):
        if not self.r_min <= b <= self.r_max:
            raise RankOutOfRange(f"rank {b} outside [{self.r_min}, {self.r_max}]")

    def forward(self, X, b=None, training=None, prng=None):
        b = self.active_rank if b is None else b
        training = self.training if training is None else training
        prng = self.prng if prng is None else prng
        self._check_rank(b)
        if X.shape[-1] != self.d_in:
            raise ShapeMismatch(f"input width {X.shape[-1]} != d_in {self.d_in}")
        lead = X.shape[:-1]
        X2 = X.reshape(-1, self.d_in)
        alpha = self.alpha_for(b)
        XA = X2 @ self.A[:, :b]
        keep = None
        if training and self.dropout_p > 0:
            if prng is None:
                raise ValueError("training with dropout needs a Prng")
            keep = (prng.uniform(XA.shape) >= self.dropout_p).astype(XA.dtype) / (1 - self.dropout_p)
            XA = XA * keep
        Y = X2 @ self.base_weight() + alpha * (XA @ self.B[:b])
        # lora_fa only needs the rank-b activation for dB; X is kept only when A trains
        self._cache = {
            "b": b, "XA": XA, "keep": keep, "lead": lead,
            "X": X2 if self.mode == "lora" else None,
        }
        return check_finite(Y.reshape(*lead, self.d_out), "adapter output")

    __call__ = forward

    def backward(self, dY):
        if self._cache is None:
            raise StaleCache("backward without a preceding forward")
        c = self._cache
        self._cache = None
        b = c["b"]
        if dY.shape[:-1] != c["lead"] or dY.shape[-1] != self.d_out:
            raise ShapeMismatch(f"dY {dY.shape} does not match the cached forward")
        dY2 = dY.reshape(-1, self.d_out)
        alpha = self.alpha_for(b)
        A_b, B_b = self.A[:, :b], self.B[:b]
        grads = {"B": alpha * (c["XA"].T @ dY2)}
        dXA = alpha * (dY2 @ B_b.T)
        if c["keep"] is not None:
            dXA = dXA * c["keep"]
        if self.mode == "lora":
            grads["A"] = c["X"].T @ dXA
        self.grads = grads
        self.grad_rank = b
        dX = dY2 @ self.base_weight().T + dXA @ A_b.T
        return dX.reshape(*c["lead"], self.d_in)

    def trainable_state_bytes(self, with_optimizer=True) -> int:
        """Bytes held for trainable tensors plus their two Adam moments."""
        total = 0
        for name in self.trainable:
            n = getattr(self, name).nbytes
            total += n * (3 if with_optimizer else 1)
        return total


def init_adapter(d_in, d_out, r_min=4, r_max=16, mode="lora_fa", prng=None, *,
                 W0=None, alpha="one_over_rank", dropout_p=0.05, dtype=np.float32):
    """Fresh adapter: ``A ~ N(0, 1/d_in)``, ``B = 0``.

    ``W0`` defaults to a random ``N(0, 1/d_in)`` matrix standing in for
    pretrained weights.
    """
    if d_in < 1 or d_out < 1:
        raise ShapeMismatch("dimensions must be positive")
    if not 1 <= r_min <= r_max <= min(d_in, d_out):
        raise BadRank(f"ranks [{r_min}, {r_max}] invalid for {d_in}x{d_out}")
    prng = Prng(0) if prng is None else prng
    std = 1.0 / np.sqrt(d_in)
    if W0 is None:
        W0 = prng.normal((d_in, d_out), std, dtype)
    A = prng.normal((d_in, r_max), std, dtype)
    B = np.zeros((r_max, d_out), dtype=dtype)
    return AdapterLinear(W0, A, B, r_min, r_max, alpha=alpha, dropout_p=dropout_p, mode=mode)


def adapter_forward(layer: AdapterLinear, X, b, training=False, prng=None):
    return layer.forward(X, b, training, prng)


def adapter_backward(layer: AdapterLinear, dY):
    dX = layer.backward(dY)
    return {**layer.grads, "X": dX}


def make_adam_states(layer: AdapterLinear, lr=1e-3) -> dict:
    return {name: AdamState.like(getattr(layer, name), lr=lr) for name in layer.trainable}


def apply_update(layer: AdapterLinear, grads: dict, states: dict, b: int, rank_norm=False):
    """Adam step on the leading rank-``b`` slice, written back in place."""
    scale = layer.r_max / b if rank_norm else 1.0
    for name in layer.trainable:
        g = grads[name]
        if name == "B":
            region = (slice(0, b), slice(None))
            expected = (b, layer.d_out)
        else:
            region = (slice(None), slice(0, b))
            expected = (layer.d_in, b)
        if g.shape != expected:
            raise RankMismatch(f"grad for {name} has shape {g.shape}, rank {b} needs {expected}")
        adam_step(states[name], getattr(layer, name), g * scale if scale != 1.0 else g, region)


@dataclass
class GradAccumulator:
    """Sums gradients over micro-steps; ``flush`` returns their mean."""

    sums: dict = field(default_factory=dict)
    steps: int = 0

    def add(self, grads: dict) -> None:
        for name, g in grads.items():
            if name in self.sums:
                if self.sums[name].shape != g.shape:
                    raise RankMismatch(f"{name}: {g.shape} vs accumulated {self.sums[name].shape}")
                self.sums[name] += g
            else:
                self.sums[name] = np.array(g, copy=True)
        self.steps += 1

    def flush(self) -> dict:
        if self.steps == 0:
            raise EmptyAccumulator("flush on an empty accumulator")
        out = {k: v / self.steps for k, v in self.sums.items()}
        self.sums = {}
        self.steps = 0
        return out
