"""Central finite-difference checks for every hand-written backward pass.

Relative error is ``max|analytic - numeric| / max(max|analytic|, max|numeric|)``,
which stays meaningful when individual entries are near zero.
"""
from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from .adapters import init_adapter
from .layers import (
    Attention,
    FFNBlock,
    GatedCrossAttention,
    Linear,
    RMSNorm,
    SelfAttentionBlock,
    SwiGLUFFN,
)
from .tensor import Prng, cross_entropy, swiglu, swiglu_backward

TOLERANCE = 1e-5


def numerical_grad(f, x: np.ndarray, eps: float = 1e-5, indices=None) -> np.ndarray:
    """Central differences of scalar ``f()`` w.r.t. ``x`` (perturbed in place)."""
    grad = np.zeros_like(x, dtype=np.float64)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    idx = range(flat.size) if indices is None else indices
    for i in idx:
        old = flat[i]
        flat[i] = old + eps
        fp = f()
        flat[i] = old - eps
        fm = f()
        flat[i] = old
        gflat[i] = (fp - fm) / (2 * eps)
    return grad


def rel_error(analytic, numeric) -> float:
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    scale = max(np.max(np.abs(a)), np.max(np.abs(n)), 1e-12)
    return float(np.max(np.abs(a - n)) / scale)


def _sample(size, k, prng):
    if size <= k:
        return list(range(size))
    return sorted(prng.permutation(size)[:k])


@dataclass
class CheckResult:
    name: str
    max_rel_err: float
    passed: bool

    def line(self) -> str:
        return f"{'PASS' if self.passed else 'FAIL'} {self.name} rel_err={self.max_rel_err:.3e}"


def _check(name, loss_fn, backward_fn, tensors, prng, max_entries=40, tol=TOLERANCE):
    """``tensors`` maps label -> (array, getter of its analytic gradient)."""
    loss_fn()
    backward_fn()
    analytic = {k: np.array(get(), dtype=np.float64) for k, (_, get) in tensors.items()}
    worst = 0.0
    for k, (arr, _) in tensors.items():
        idx = _sample(arr.size, max_entries, prng)
        num = numerical_grad(loss_fn, arr, indices=idx)
        worst = max(worst, rel_error(analytic[k].reshape(-1)[idx], num.reshape(-1)[idx]))
    return CheckResult(name, worst, worst < tol)


def _half_sq(y):
    return 0.5 * float(np.sum(y.astype(np.float64) ** 2))


def check_adapter(mode: str, seed: int = 0) -> CheckResult:
    prng = Prng(seed)
    layer = init_adapter(12, 10, 2, 6, mode, prng, dtype=np.float64)
    layer.B[...] = prng.normal(layer.B.shape, 0.5, np.float64)
    X = prng.normal((5, 12), 1.0, np.float64)
    b = 4
    state = {}

    def loss():
        state["y"] = layer.forward(X, b, training=False)
        return _half_sq(state["y"])

    def back():
        state["dX"] = layer.backward(state["y"])

    tensors = {"X": (X, lambda: state["dX"]),
               "B": (layer.B, lambda: _pad_rows(layer.grads["B"], layer.B.shape))}
    if mode == "lora":
        tensors["A"] = (layer.A, lambda: _pad_cols(layer.grads["A"], layer.A.shape))
    return _check(f"adapter_linear[{mode}]", loss, back, tensors, prng)


def _pad_rows(g, shape):
    out = np.zeros(shape)
    out[: g.shape[0]] = g
    return out


def _pad_cols(g, shape):
    out = np.zeros(shape)
    out[:, : g.shape[1]] = g
    return out


def _attention(d, heads, causal, prng):
    def lin():
        return Linear(d, d, prng, dtype=np.float64)
    return Attention(lin(), lin(), lin(), lin(), heads, causal=causal)


def check_self_attention(seed: int = 0) -> CheckResult:
    prng = Prng(seed)
    block = SelfAttentionBlock(_attention(8, 2, True, prng), 8, np.float64)
    x = prng.normal((2, 5, 8), 1.0, np.float64)
    st = {}

    def loss():
        st["y"] = block(x)
        return _half_sq(st["y"])

    def back():
        st["dx"] = block.backward(st["y"])

    q = block.attn.q
    return _check("self_attention", loss, back,
                  {"x": (x, lambda: st["dx"]), "Wq": (q.params["W"], lambda: q.grads["W"]),
                   "gain": (block.norm.params["gain"], lambda: block.norm.grads["gain"])}, prng)


def check_gated_cross_attention(seed: int = 0) -> CheckResult:
    prng = Prng(seed)
    block = GatedCrossAttention(_attention(8, 2, False, prng), 8, np.float64)
    block.params["gate"][0] = 0.7
    x = prng.normal((2, 4, 8), 1.0, np.float64)
    vis = prng.normal((2, 6, 8), 1.0, np.float64)
    st = {}

    def loss():
        st["y"] = block(x, vis)
        return _half_sq(st["y"])

    def back():
        st["dx"], st["dv"] = block.backward(st["y"])

    return _check("gated_cross_attention", loss, back,
                  {"x": (x, lambda: st["dx"]), "visual": (vis, lambda: st["dv"]),
                   "gate": (block.params["gate"], lambda: block.grads["gate"])}, prng)


def check_ffn(seed: int = 0) -> CheckResult:
    prng = Prng(seed)
    d, h = 8, 12
    block = FFNBlock(SwiGLUFFN(Linear(d, 2 * h, prng, dtype=np.float64), Linear(h, d, prng, dtype=np.float64)),
                     d, np.float64)
    x = prng.normal((3, 8), 1.0, np.float64)
    st = {}

    def loss():
        st["y"] = block(x)
        return _half_sq(st["y"])

    def back():
        st["dx"] = block.backward(st["y"])

    w = block.ffn.w_in
    return _check("ffn_swiglu", loss, back,
                  {"x": (x, lambda: st["dx"]), "W_in": (w.params["W"], lambda: w.grads["W"])}, prng)


def check_swiglu(seed: int = 0) -> CheckResult:
    prng = Prng(seed)
    x = prng.normal((4, 10), 1.0, np.float64)
    return _check("swiglu", lambda: _half_sq(swiglu(x)), lambda: None,
                  {"x": (x, lambda: swiglu_backward(x, swiglu(x)))}, prng)


def check_rms_norm(seed: int = 0) -> CheckResult:
    prng = Prng(seed)
    norm = RMSNorm(7, np.float64)
    norm.params["gain"][...] = prng.normal((7,), 1.0, np.float64)
    x = prng.normal((3, 7), 1.0, np.float64)
    st = {}

    def loss():
        st["y"] = norm(x)
        return _half_sq(st["y"])

    def back():
        st["dx"] = norm.backward(st["y"])

    return _check("rms_norm", loss, back,
                  {"x": (x, lambda: st["dx"]), "gain": (norm.params["gain"], lambda: norm.grads["gain"])}, prng)


def check_cross_entropy(seed: int = 0) -> CheckResult:
    prng = Prng(seed)
    logits = prng.normal((5, 7), 1.0, np.float64)
    targets = [prng.randbelow(7) for _ in range(5)]
    mask = [True, False, True, True, False]
    return _check("cross_entropy", lambda: cross_entropy(logits, targets, mask)[0], lambda: None,
                  {"logits": (logits, lambda: cross_entropy(logits, targets, mask)[1])}, prng)


def tiny_fusion_model(seed: int = 0, dtype=np.float64, perturb=True, mode="lora_fa", vocab_size=11):
    """Two-block miniature model with every gate and adapter made non-trivial."""
    from .fusion import FusionConfig, FusionModel
    from .vision import VisionConfig

    vcfg = VisionConfig(image_size=8, patch=4, dim=8, layers=1, heads=2)
    cfg = FusionConfig(vocab_size=vocab_size, d_model=8, heads=2, head_dim=4, blocks=2, max_len=16,
                       vision_dim=8, ffn_hidden=6, r_min=1, r_max=4, adapter_mode=mode,
                       quantize_base=False, dropout=0.0)
    model = FusionModel(cfg, vcfg, seed=seed, dtype=dtype)
    if perturb:
        prng = Prng(seed + 1)
        for _, layer in model.adapters():
            layer.B[...] = prng.normal(layer.B.shape, 0.3, dtype)
        for block in model.blocks:
            block.cross.params["gate"][0] = 0.5
        model.vision_proj.params["W"][...] = prng.normal(model.vision_proj.params["W"].shape, 0.3, dtype)
    return model


def check_fusion_model(seed: int = 0, mode: str = "lora_fa") -> CheckResult:
    """Every trainable tensor of a 2-block model, plus the image pixels."""
    from .fusion import lm_loss
    from .vision import patchify

    model = tiny_fusion_model(seed, mode=mode)
    prng = Prng(seed + 2)
    model.set_rank(3)
    img = prng.normal((8, 8, 3), 0.5, np.float64)
    ids = np.array([[2, 7, 4, 8, 5, 9, 10], [2, 4, 6, 8, 5, 10, 3]])
    targets = np.array([[7, 4, 8, 5, 9, 10, 3], [4, 6, 8, 5, 10, 3, 0]])
    mask = np.array([[0, 0, 0, 0, 1, 1, 1], [0, 0, 0, 1, 1, 1, 0]], dtype=bool)
    slots = [2, 1]
    st = {}

    def loss():
        _, states = model.vision(np.stack([patchify(img, 4)] * 2))
        st["logits"] = model.forward(ids, slots, states[:, None])
        st["loss"], st["d"] = lm_loss(st["logits"], targets, mask)
        return st["loss"]

    def back():
        dv = model.backward(st["d"])
        st["dimg"] = model.vision.backward(dv[:, 0])

    def img_grad():
        from .vision import unpatchify
        return sum(unpatchify(st["dimg"][i], 8, 8, 4) for i in range(2))

    tensors = {"pixels": (img, img_grad)}
    for path, owner, key in model.trainable_params():
        tensors[path] = (owner.params[key], lambda o=owner, k=key: o.grads[k])
    for path, layer in model.adapters():
        tensors[path + ".B"] = (layer.B, lambda l=layer: _pad_rows(l.grads["B"], l.B.shape))
        if mode == "lora":
            tensors[path + ".A"] = (layer.A, lambda l=layer: _pad_cols(l.grads["A"], l.A.shape))
    return _check(f"fusion_model[{mode}]", loss, back, tensors, prng, max_entries=12)


def check_vision_encoder(seed: int = 0) -> CheckResult:
    from .vision import VisionConfig, VisionEncoder

    prng = Prng(seed)
    enc = VisionEncoder(VisionConfig(image_size=8, patch=4, dim=8, layers=2, heads=2), prng, np.float64)
    patches = prng.normal((4, 48), 0.5, np.float64)
    st = {}

    def loss():
        h, states = enc(patches)
        st["states"] = states
        return float(np.sum(h)) + _half_sq(states) * 0.1

    def back():
        g = 0.1 * st["states"]
        g[0] += 1.0
        st["dp"] = enc.backward(g)

    return _check("vision_encoder", loss, back, {"patches": (patches, lambda: st["dp"])}, prng)


CHECKS = (
    ("adapter_linear[lora_fa]", lambda s: check_adapter("lora_fa", s)),
    ("adapter_linear[lora]", lambda s: check_adapter("lora", s)),
    ("gated_cross_attention", check_gated_cross_attention),
    ("self_attention", check_self_attention),
    ("ffn_swiglu", check_ffn),
    ("swiglu", check_swiglu),
    ("rms_norm", check_rms_norm),
    ("cross_entropy", check_cross_entropy),
    ("vision_encoder", check_vision_encoder),
    ("fusion_model[lora_fa]", lambda s: check_fusion_model(s, "lora_fa")),
    ("fusion_model[lora]", lambda s: check_fusion_model(s, "lora")),
)


def run_all(seed: int = 0):
    start = time.perf_counter()
    results = [fn(seed) for _, fn in CHECKS]
    return results, time.perf_counter() - start
