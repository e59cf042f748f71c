"""Autoregressive decoder that fuses vision states through gated cross-attention."""
from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .adapters import AdapterLinear, init_adapter
from .errors import (
    AllMasked,
    EmptyVisual,
    SequenceTooLong,
    ShapeMismatch,
    TooFewLabels,
)
from .layers import (
    Attention,
    FFNBlock,
    GatedCrossAttention,
    Linear,
    Module,
    RMSNorm,
    SelfAttentionBlock,
    SwiGLUFFN,
)
from .tensor import Prng, check_finite, cross_entropy, log_softmax, softmax
from .tokenizer import ENCODE_ID, EOS_ID, PAD_ID, MultimodalPrompt, Vocabulary, decode_text, encode_text
from .vision import VisionConfig, VisionEncoder


@dataclass
class FusionConfig:
    vocab_size: int = 64
    d_model: int = 128
    heads: int = 4
    head_dim: int = 32
    blocks: int = 4
    max_len: int = 256
    vision_dim: int = 64
    ffn_hidden: int = 256
    r_min: int = 4
    r_max: int = 16
    alpha: object = "one_over_rank"
    dropout: float = 0.05
    adapter_mode: str = "lora_fa"
    quantize_base: bool = True

    def __post_init__(self):
        if self.heads * self.head_dim != self.d_model:
            raise ShapeMismatch(f"heads*head_dim = {self.heads * self.head_dim} != d_model {self.d_model}")
        if self.blocks < 1:
            raise ValueError("need at least one block")

    def to_dict(self):
        return asdict(self)


class FusionBlock(Module):
    """Gated cross-attention, then causal self-attention, then SwiGLU FFN."""

    def __init__(self, cfg: FusionConfig, prng: Prng, dtype=np.float32):
        super().__init__()
        d = cfg.d_model

        def ad(a, b):
            layer = init_adapter(a, b, cfg.r_min, cfg.r_max, cfg.adapter_mode, prng,
                                 alpha=cfg.alpha, dropout_p=cfg.dropout, dtype=dtype)
            if cfg.quantize_base:
                layer.quantize()
            return layer

        def attn(causal):
            return Attention(ad(d, d), ad(d, d), ad(d, d), ad(d, d), cfg.heads, causal=causal)

        self.cross = self.add("cross", GatedCrossAttention(attn(False), d, dtype))
        self.self_attn = self.add("self", SelfAttentionBlock(attn(True), d, dtype))
        self.ffn = self.add("ffn", FFNBlock(SwiGLUFFN(ad(d, 2 * cfg.ffn_hidden), ad(cfg.ffn_hidden, d)), d, dtype))


class FusionModel(Module):
    """Token embeddings, fusion blocks and a tied LM head, plus the (frozen) vision encoder.

    Base projections inside every block are frozen stand-ins for pretrained
    weights wrapped by low-rank adapters.  The vision projection starts at
    zero and every gate at zero, so a fresh model ignores the image.
    """

    def __init__(self, cfg: FusionConfig, vision_cfg: VisionConfig | None = None,
                 vocab: Vocabulary | None = None, seed: int = 0, dtype=np.float32):
        super().__init__()
        if vocab is not None and len(vocab) != cfg.vocab_size:
            raise ShapeMismatch(f"vocab has {len(vocab)} tokens, config says {cfg.vocab_size}")
        self.cfg = cfg
        self.vocab = vocab
        self.seed = seed
        prng = Prng(seed)
        self.vision = self.add("vision", VisionEncoder(vision_cfg or VisionConfig(), prng.spawn(), dtype))
        self.vision.freeze()
        vision_cfg = self.vision.cfg
        if vision_cfg.dim != cfg.vision_dim:
            raise ShapeMismatch(f"vision dim {vision_cfg.dim} != fusion vision_dim {cfg.vision_dim}")
        self.vision_cfg = vision_cfg
        p = prng.spawn()
        self.params["tok_emb"] = p.normal((cfg.vocab_size, cfg.d_model), 0.02, dtype)
        self.params["pos_emb"] = p.normal((cfg.max_len, cfg.d_model), 0.02, dtype)
        self.vision_proj = self.add("vision_proj", Linear(cfg.vision_dim, cfg.d_model, p, bias=True, dtype=dtype, std=0.0))
        self.blocks = [self.add(f"block{i}", FusionBlock(cfg, prng.spawn(), dtype)) for i in range(cfg.blocks)]
        self.final_norm = self.add("final_norm", RMSNorm(cfg.d_model, dtype))
        self._cache = None

    @property
    def dtype(self):
        return self.params["tok_emb"].dtype

    # ------------------------------------------------------------ adapters

    def set_rank(self, b) -> None:
        """Set the active rank of every adapter (an int, or one int per adapter)."""
        layers = [m for _, m in self.adapters()]
        ranks = [b] * len(layers) if np.isscalar(b) else list(b)
        if len(ranks) != len(layers):
            raise ValueError(f"{len(layers)} adapters but {len(ranks)} ranks")
        for layer, r in zip(layers, ranks):
            layer._check_rank(int(r))
            layer.active_rank = int(r)

    def set_training(self, training: bool, prng: Prng | None = None) -> None:
        for _, layer in self.adapters():
            layer.training = training
            layer.prng = prng

    def quantize(self) -> None:
        for _, layer in self.adapters():
            layer.quantize()

    # ------------------------------------------------------------ forward

    def _prepare_vision(self, vision_states, batch, n_slots):
        v = np.asarray(vision_states, dtype=self.dtype)
        if v.ndim == 2:
            v = v[None, None]
        elif v.ndim == 3:
            v = v[:, None] if batch > 1 or n_slots == 1 else v[None]
        if v.ndim != 4 or v.shape[0] != batch or v.shape[1] != n_slots or v.shape[3] != self.cfg.vision_dim:
            raise ShapeMismatch(f"vision states {np.shape(vision_states)} do not fit batch {batch} x {n_slots} images")
        if v.shape[2] < 1:
            raise EmptyVisual("no vision states")
        return v

    def forward(self, ids, slots=None, vision_states=None):
        """Next-token logits ``(batch, time, vocab)``.

        ``ids`` is ``(time,)`` or ``(batch, time)``; ``slots`` gives the image
        position(s) per sequence; ``vision_states`` is ``(n+1, d_v)`` for one
        image or ``(batch, images, n+1, d_v)``.  Without vision states the
        image slots receive a zero embedding and cross-attention is skipped.
        """
        ids = np.asarray(ids, dtype=np.int64)
        if ids.ndim == 1:
            ids = ids[None]
        B, T = ids.shape
        if T > self.cfg.max_len:
            raise SequenceTooLong(f"sequence of {T} tokens exceeds max_len {self.cfg.max_len}")
        slots = _normalize_slots(slots, B)
        emb = self.params["tok_emb"][ids]
        pv = None
        n_states = 0
        if vision_states is not None:
            v = self._prepare_vision(vision_states, B, len(slots[0]))
            n_states = v.shape[2]
            pv = self.vision_proj(v.reshape(B, -1, v.shape[3]))
        for bi, row in enumerate(slots):
            for m, s in enumerate(row):
                emb[bi, s] = pv[bi, m * n_states] if pv is not None else 0.0
        x = emb + self.params["pos_emb"][:T]
        for block in self.blocks:
            if pv is not None:
                x = block.cross(x, pv)
            x = block.self_attn(x)
            x = block.ffn(x)
        h = self.final_norm(x)
        logits = h @ self.params["tok_emb"].T
        self._cache = (ids, slots, h, pv is not None, n_states)
        return check_finite(logits, "logits")

    __call__ = forward

    def backward(self, dlogits):
        """Accumulate parameter gradients; returns d(loss)/d(vision states) or None."""
        ids, slots, h, has_vision, n_states = self._cache
        self._cache = None
        E = self.params["tok_emb"]
        g_emb = np.einsum("btv,btd->vd", dlogits, h)
        dx = self.final_norm.backward(dlogits @ E)
        dpv = None
        for block in reversed(self.blocks):
            dx = block.ffn.backward(dx)
            dx = block.self_attn.backward(dx)
            if has_vision:
                dx, dvis = block.cross.backward(dx)
                dpv = dvis if dpv is None else dpv + dvis
        T = ids.shape[1]
        g_pos = np.zeros_like(self.params["pos_emb"])
        g_pos[:T] = dx.sum(axis=0)
        demb = dx.copy()
        for bi, row in enumerate(slots):
            for m, s in enumerate(row):
                if has_vision:
                    dpv[bi, m * n_states] += demb[bi, s]
                demb[bi, s] = 0.0
        np.add.at(g_emb, ids, demb)
        self.grads["tok_emb"] = g_emb
        self.grads["pos_emb"] = g_pos
        if not has_vision:
            return None
        dv = self.vision_proj.backward(dpv)
        B = ids.shape[0]
        return dv.reshape(B, -1, n_states, self.cfg.vision_dim)

    # ------------------------------------------------------------ vision

    def encode_images(self, raws) -> np.ndarray:
        """Vision states ``(len(raws), n+1, d_v)`` for raw RGB images."""
        return np.stack([self.vision.encode_image(r)[1] for r in raws])


def _normalize_slots(slots, batch):
    if slots is None:
        return [[] for _ in range(batch)]
    if np.isscalar(slots):
        return [[int(slots)]] * batch
    rows = []
    for s in slots:
        rows.append([int(s)] if np.isscalar(s) else [int(x) for x in s])
    if len(rows) != batch:
        raise ShapeMismatch(f"{len(rows)} slot rows for a batch of {batch}")
    return rows


def gated_cross_attn(block: GatedCrossAttention, x, visual):
    return block.forward(x, visual)


def lm_loss(logits, targets, mask):
    """Masked next-token cross-entropy; returns ``(loss, dlogits)``."""
    B, T, V = logits.shape
    mask = np.asarray(mask, dtype=bool).reshape(-1)
    if not mask.any():
        raise AllMasked("answer mask selects no tokens")
    loss, d = cross_entropy(logits.reshape(-1, V), np.asarray(targets).reshape(-1), mask)
    return loss, d.reshape(B, T, V)


# ------------------------------------------------------------ batching

@dataclass
class Example:
    """One tokenized training pair: prompt ids, image slot, answer ids."""

    prompt: list
    slot: int
    answer: list
    image_index: int = 0


def collate(examples, pad_to=None):
    """Pack examples into ``(inputs, targets, mask, slots)`` arrays.

    The sequence is ``prompt + answer + <eos>``; the mask selects positions
    whose target is an answer token or the closing ``<eos>``.
    """
    seqs = [list(e.prompt) + list(e.answer) + [EOS_ID] for e in examples]
    T = max(len(s) for s in seqs) - 1
    if pad_to is not None:
        T = max(T, pad_to)
    B = len(seqs)
    inputs = np.full((B, T), PAD_ID, dtype=np.int64)
    targets = np.full((B, T), PAD_ID, dtype=np.int64)
    mask = np.zeros((B, T), dtype=bool)
    for i, (e, s) in enumerate(zip(examples, seqs)):
        n = len(s) - 1
        inputs[i, :n] = s[:-1]
        targets[i, :n] = s[1:]
        mask[i, len(e.prompt) - 1:n] = True
    return inputs, targets, mask, [e.slot for e in examples]


def masked_accuracy(logits, targets, mask) -> float:
    pred = np.argmax(logits, axis=-1)
    return float(np.mean(pred[mask] == np.asarray(targets)[mask]))


# ------------------------------------------------------------ inference

def generate(model: FusionModel, prompt: MultimodalPrompt, vision_states, max_new=32,
             strategy="greedy", temperature=1.0, prng: Prng | None = None):
    """Decode until ``<eos>`` or ``max_new`` tokens; returns ``(text, ids)``."""
    ids = list(prompt.ids)
    if not ids or ids[-1] != ENCODE_ID:
        raise ValueError("prompt must end with <Encode>")
    if len(ids) > model.cfg.max_len:
        raise SequenceTooLong(f"prompt of {len(ids)} tokens exceeds max_len {model.cfg.max_len}")
    if strategy not in ("greedy", "temperature"):
        raise ValueError(f"unknown strategy {strategy!r}")
    if strategy == "temperature":
        if temperature <= 0:
            raise ValueError("temperature must be positive")
        prng = prng or Prng(0)
    model.set_training(False)
    out = []
    slots = [prompt.image_slots]
    for _ in range(max_new):
        if len(ids) >= model.cfg.max_len:
            break
        logits = model.forward(np.array(ids)[None], slots, _as_batch(vision_states, len(prompt.image_slots)))[0, -1]
        logits = logits.astype(np.float64)
        logits[[PAD_ID, ENCODE_ID]] = -1e30  # never valid continuations
        if strategy == "greedy":
            nxt = int(np.argmax(logits))
        else:
            p = softmax(logits / temperature)
            nxt = prng.categorical(p.tolist())
        if nxt == EOS_ID:
            break
        ids.append(nxt)
        out.append(nxt)
    text = decode_text(model.vocab, out) if model.vocab is not None else ""
    return text, out


def _as_batch(vision_states, n_images):
    if vision_states is None:
        return None
    v = np.asarray(vision_states)
    if v.ndim == 2:
        return v[None, None]
    if v.ndim == 3:
        if v.shape[0] != n_images:
            raise ShapeMismatch(f"{v.shape[0]} images for {n_images} slots")
        return v[None]
    return v


def score_answers(model: FusionModel, prompt: MultimodalPrompt, vision_states, answers):
    """Mean per-token log-likelihood of each answer string given the prompt."""
    model.set_training(False)
    encoded = [encode_text(model.vocab, a) for a in answers]
    unique = sorted(set(map(tuple, encoded)))
    scores = {}
    if unique:
        examples = [Example(prompt.ids, prompt.image_slots, list(u)) for u in unique]
        inputs, targets, mask, _ = collate(examples)
        # score the answer tokens only, not the closing <eos>
        for i, e in enumerate(examples):
            mask[i, len(e.prompt) - 1 + len(e.answer)] = False
        v = _as_batch(vision_states, len(prompt.image_slots))
        v = np.broadcast_to(v, (len(examples),) + v.shape[1:])
        logits = model.forward(inputs, [prompt.image_slots] * len(examples), v)
        logp = log_softmax(logits.astype(np.float64))
        picked = np.take_along_axis(logp, targets[..., None], axis=-1)[..., 0]
        for i, u in enumerate(unique):
            row = picked[i][mask[i]]
            scores[u] = float(row.mean()) if row.size else float("-inf")
    return [scores[tuple(e)] for e in encoded]


def classify(model: FusionModel, vision_states, labels, question, description="", prompt=None):
    """Rank candidate labels by mean per-token answer log-likelihood."""
    from .tokenizer import assemble_prompt

    labels = list(labels)
    if len(labels) < 2:
        raise TooFewLabels("classification needs at least two labels")
    prompt = prompt or assemble_prompt(model.vocab, description, question)
    scores = score_answers(model, prompt, vision_states, labels)
    order = sorted(range(len(labels)), key=lambda i: (-scores[i], i))
    return [(labels[i], scores[i]) for i in order]
