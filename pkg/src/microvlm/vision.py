"""Image ingestion, patch tokenization and the patch-attention encoder."""
from __future__ import annotations

import struct
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .errors import (
    BadChannelCount,
    EmptyImage,
    ImageFormatError,
    KTooLarge,
    NonDivisible,
    ShapeMismatch,
    ZeroNorm,
)
from .layers import Attention, Linear, Module, RMSNorm, SwiGLUFFN
from .tensor import Prng, check_finite

IMAGE_SIZE = 224


@dataclass
class VisionConfig:
    image_size: int = IMAGE_SIZE
    patch: int = 32
    dim: int = 64
    layers: int = 4
    heads: int = 4

    def __post_init__(self):
        if self.image_size % self.patch:
            raise NonDivisible(f"{self.image_size} is not a multiple of patch {self.patch}")
        if self.dim % self.heads:
            raise ShapeMismatch(f"dim {self.dim} not divisible by {self.heads} heads")

    @property
    def n_patches(self) -> int:
        return (self.image_size // self.patch) ** 2

    @property
    def patch_width(self) -> int:
        return self.patch * self.patch * 3

    def to_dict(self):
        return asdict(self)


# --------------------------------------------------------------------- I/O

def decode_ppm(data: bytes) -> np.ndarray:
    """Parse a binary P6 PPM with maxval 255 into ``uint8[H, W, 3]``."""
    if not data.startswith(b"P6"):
        raise ImageFormatError("not a P6 PPM")
    fields = []
    pos = 2
    while len(fields) < 3:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            while pos < len(data) and data[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise ImageFormatError("truncated PPM header")
        fields.append(int(data[start:pos]))
    w, h, maxval = fields
    if maxval != 255:
        raise ImageFormatError(f"only maxval 255 is supported, got {maxval}")
    pos += 1  # single whitespace byte before the raster
    raster = data[pos:pos + w * h * 3]
    if len(raster) != w * h * 3:
        raise ImageFormatError("truncated PPM raster")
    return np.frombuffer(raster, dtype=np.uint8).reshape(h, w, 3)


def encode_ppm(img: np.ndarray) -> bytes:
    img = np.asarray(img, dtype=np.uint8)
    if img.ndim != 3 or img.shape[2] != 3:
        raise BadChannelCount(f"PPM needs H x W x 3, got {img.shape}")
    h, w, _ = img.shape
    return f"P6\n{w} {h}\n255\n".encode() + img.tobytes()


def decode_mraw(data: bytes) -> np.ndarray:
    """``MRAW`` raw float image: magic, u32 H, W, C, then little-endian f32."""
    if data[:4] != b"MRAW" or len(data) < 16:
        raise ImageFormatError("not an MRAW image")
    h, w, c = struct.unpack("<3I", data[4:16])
    payload = data[16:16 + 4 * h * w * c]
    if len(payload) != 4 * h * w * c:
        raise ImageFormatError("truncated MRAW payload")
    return np.frombuffer(payload, dtype="<f4").reshape(h, w, c).astype(np.float32)


def encode_mraw(img: np.ndarray) -> bytes:
    img = np.asarray(img, dtype="<f4")
    if img.ndim != 3:
        raise ShapeMismatch(f"MRAW needs H x W x C, got {img.shape}")
    h, w, c = img.shape
    return b"MRAW" + struct.pack("<3I", h, w, c) + img.tobytes()


def decode_image(data: bytes) -> np.ndarray:
    if data[:4] == b"MRAW":
        return decode_mraw(data)
    if data[:2] == b"P6":
        return decode_ppm(data)
    raise ImageFormatError("unsupported image format (expected P6 PPM or MRAW)")


def load_image(path) -> np.ndarray:
    return decode_image(Path(path).read_bytes())


def is_image_file(path) -> bool:
    try:
        with open(path, "rb") as fh:
            head = fh.read(4)
    except OSError:
        return False
    return head == b"MRAW" or head[:2] == b"P6"


# ------------------------------------------------------------ preprocessing

def _resize_axis(x: np.ndarray, out: int, axis: int) -> np.ndarray:
    n = x.shape[axis]
    if n == out:
        return x
    # half-pixel centres (align_corners=False)
    src = (np.arange(out, dtype=np.float64) + 0.5) * (n / out) - 0.5
    src = np.clip(src, 0.0, n - 1)
    lo = np.floor(src).astype(np.int64)
    hi = np.minimum(lo + 1, n - 1)
    frac = src - lo
    shape = [1] * x.ndim
    shape[axis] = out
    frac = frac.reshape(shape)
    return np.take(x, lo, axis=axis) * (1 - frac) + np.take(x, hi, axis=axis) * frac


def resize_bilinear(img: np.ndarray, height: int, width: int) -> np.ndarray:
    x = np.asarray(img, dtype=np.float64)
    return _resize_axis(_resize_axis(x, height, 0), width, 1)


def preprocess(raw, cfg: VisionConfig | None = None) -> np.ndarray:
    """Resize to a square of ``cfg.image_size`` and map ``[0, 255]`` to ``[-1, 1]``."""
    size = (cfg or VisionConfig()).image_size
    img = np.asarray(raw)
    if img.ndim != 3 or img.shape[0] < 1 or img.shape[1] < 1:
        raise EmptyImage(f"image must be H x W x C with H, W >= 1, got {img.shape}")
    if img.shape[2] != 3:
        raise BadChannelCount(f"expected 3 channels, got {img.shape[2]}")
    x = resize_bilinear(img, size, size)
    x = (x / 255.0 - 0.5) / 0.5
    return np.clip(x, -1.0, 1.0).astype(np.float32)


def patchify(img: np.ndarray, P: int) -> np.ndarray:
    """Raster-ordered flattened patches, shape ``(n, P*P*C)``."""
    H, W, C = img.shape
    if H % P or W % P:
        raise NonDivisible(f"{H}x{W} image is not divisible into {P}px patches")
    x = img.reshape(H // P, P, W // P, P, C).transpose(0, 2, 1, 3, 4)
    return x.reshape((H // P) * (W // P), P * P * C)


def unpatchify(patches: np.ndarray, H: int, W: int, P: int) -> np.ndarray:
    C = patches.shape[1] // (P * P)
    x = patches.reshape(H // P, W // P, P, P, C).transpose(0, 2, 1, 3, 4)
    return x.reshape(H, W, C)


# ------------------------------------------------------------------ encoder

class VisionLayer(Module):
    """Local phase over patch tokens, then the cls token attends globally."""

    def __init__(self, d, heads, prng: Prng, dtype=np.float32):
        super().__init__()

        def lin(a, b):
            return Linear(a, b, prng, dtype=dtype)

        self.norm_local = self.add("norm_local", RMSNorm(d, dtype))
        self.local = self.add("local", Attention(lin(d, d), lin(d, d), lin(d, d), lin(d, d), heads))
        self.norm_global = self.add("norm_global", RMSNorm(d, dtype))
        self.glob = self.add("global", Attention(lin(d, d), lin(d, d), lin(d, d), lin(d, d), heads))
        self.norm_ffn = self.add("norm_ffn", RMSNorm(d, dtype))
        self.ffn = self.add("ffn", SwiGLUFFN(lin(d, 4 * d), lin(2 * d, d)))

    def forward(self, x):
        cls, p = x[:, :1], x[:, 1:]
        p = p + self.local(self.norm_local(p))
        u = self.norm_global(np.concatenate([cls, p], axis=1))
        cls = cls + self.glob(u[:, :1], u)
        x2 = np.concatenate([cls, p], axis=1)
        return x2 + self.ffn(self.norm_ffn(x2))

    __call__ = forward

    def backward(self, dy):
        dx2 = dy + self.norm_ffn.backward(self.ffn.backward(dy))
        dcls = dx2[:, :1]
        dp = dx2[:, 1:]
        dq, dkv = self.glob.backward(dcls)
        du = dkv.copy()
        du[:, :1] += dq
        dx1 = self.norm_global.backward(du)
        dcls_in = dcls + dx1[:, :1]
        dp = dp + dx1[:, 1:]
        dq_l, dkv_l = self.local.backward(dp)
        dp_in = dp + self.norm_local.backward(dq_l + dkv_l)
        return np.concatenate([dcls_in, dp_in], axis=1)


class VisionEncoder(Module):
    def __init__(self, cfg: VisionConfig | None = None, prng: Prng | None = None, dtype=np.float32):
        super().__init__()
        self.cfg = cfg = cfg or VisionConfig()
        prng = prng or Prng(0)
        d = cfg.dim
        self.proj = self.add("proj", Linear(cfg.patch_width, d, prng, bias=True, dtype=dtype))
        self.params["cls"] = prng.normal((d,), 0.02, dtype)
        self.params["pos"] = prng.normal((cfg.n_patches + 1, d), 0.02, dtype)
        self.layers = [self.add(f"layer{i}", VisionLayer(d, cfg.heads, prng, dtype)) for i in range(cfg.layers)]
        self.norm = self.add("norm", RMSNorm(d, dtype))

    def forward(self, patches):
        """Encode patches of shape ``(n, P*P*3)`` or ``(batch, n, P*P*3)``.

        Returns ``(h_cls, states)``; ``states`` includes the cls slot at index 0.
        """
        single = patches.ndim == 2
        x = patches[None] if single else patches
        if x.shape[1:] != (self.cfg.n_patches, self.cfg.patch_width):
            raise ShapeMismatch(
                f"expected (*, {self.cfg.n_patches}, {self.cfg.patch_width}) patches, got {patches.shape}")
        tok = self.proj(x.astype(self.params["pos"].dtype, copy=False))
        cls = np.broadcast_to(self.params["cls"], (x.shape[0], 1, self.cfg.dim))
        h = np.concatenate([cls, tok], axis=1) + self.params["pos"]
        for layer in self.layers:
            h = layer(h)
        states = check_finite(self.norm(h), "vision states")
        if single:
            return states[0, 0], states[0]
        return states[:, 0], states

    __call__ = forward

    def backward(self, d_states):
        """Backprop ``d(loss)/d(states)``; returns ``d(loss)/d(patches)``."""
        single = d_states.ndim == 2
        dh = self.norm.backward(d_states[None] if single else d_states)
        for layer in reversed(self.layers):
            dh = layer.backward(dh)
        self.grads["pos"] = dh.sum(axis=0)
        self.grads["cls"] = dh[:, 0].sum(axis=0)
        dx = self.proj.backward(dh[:, 1:])
        return dx[0] if single else dx

    def encode_image(self, raw):
        img = preprocess(raw, self.cfg)
        return self.forward(patchify(img, self.cfg.patch))


def encode(enc: VisionEncoder, patches):
    return enc.forward(patches)


# ------------------------------------------------------------- similarity

def cosine_similarities(query, corpus) -> np.ndarray:
    q = np.asarray(query, dtype=np.float64)
    C = np.asarray(corpus, dtype=np.float64)
    if C.ndim != 2 or q.shape != (C.shape[1],):
        raise ShapeMismatch(f"query {q.shape} vs corpus {C.shape}")
    qn = np.linalg.norm(q)
    cn = np.linalg.norm(C, axis=1)
    if qn == 0 or np.any(cn == 0):
        raise ZeroNorm("cosine similarity is undefined for zero vectors")
    return (C @ q) / (cn * qn)


def cosine_rank(query, corpus, descending=True) -> np.ndarray:
    """All corpus indices ordered by cosine similarity; ties go to the lower index."""
    sims = cosine_similarities(query, corpus)
    key = -sims if descending else sims
    return np.lexsort((np.arange(len(sims)), key))


def cosine_topk(query, corpus, K: int) -> np.ndarray:
    m = len(corpus)
    if K > m:
        raise KTooLarge(f"K={K} exceeds corpus size {m}")
    return cosine_rank(query, corpus)[:K]
