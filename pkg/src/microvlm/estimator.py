"""scikit-learn style wrappers around the vision encoder and the fusion model."""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin

from ._validation import check_images, check_is_fitted, check_texts
from .fusion import Example, FusionConfig, FusionModel, classify, generate
from .metrics import bleu_n
from .synthetic import CAPTION_QUESTION
from .tokenizer import assemble_prompt, build_vocab, encode_text
from .trainer import Split, TrainConfig, train
from .vision import VisionConfig, VisionEncoder
from .tensor import Prng


class VisionFeaturizer(BaseEstimator, TransformerMixin):
    """Map RGB images to frozen-encoder cls embeddings, shape ``(n, dim)``."""

    def __init__(self, image_size=224, patch=32, dim=64, layers=4, heads=4, seed=0):
        self.image_size = image_size
        self.patch = patch
        self.dim = dim
        self.layers = layers
        self.heads = heads
        self.seed = seed

    def fit(self, X=None, y=None):
        cfg = VisionConfig(self.image_size, self.patch, self.dim, self.layers, self.heads)
        # same stream position as the encoder inside FusionModel(seed)
        self.encoder_ = VisionEncoder(cfg, Prng(self.seed).spawn())
        self.encoder_.freeze()
        return self

    def transform(self, X):
        check_is_fitted(self, "encoder_")
        return np.stack([self.encoder_.encode_image(img)[0] for img in check_images(X)])


class MultimodalAssistant(BaseEstimator):
    """Instruction-tune a fresh fusion model on ``(image, answer)`` pairs.

    ``questions`` defaults to a fixed captioning prompt, so ``fit(X, y)``
    trains a captioner and ``predict(X)`` returns captions.
    """

    def __init__(self, question=CAPTION_QUESTION, epochs=50, lr=1e-3, batch_size=16, r_min=4, r_max=16,
                 blocks=4, d_model=128, heads=4, ffn_hidden=256, rank=None, max_new=32,
                 quantize_base=True, early_stop_patience=10, seed=0):
        self.question = question
        self.epochs = epochs
        self.lr = lr
        self.batch_size = batch_size
        self.r_min = r_min
        self.r_max = r_max
        self.blocks = blocks
        self.d_model = d_model
        self.heads = heads
        self.ffn_hidden = ffn_hidden
        self.rank = rank
        self.max_new = max_new
        self.quantize_base = quantize_base
        self.early_stop_patience = early_stop_patience
        self.seed = seed

    def _questions(self, questions, n):
        return check_texts(self.question if questions is None else questions, n, "questions")

    def fit(self, X, y, questions=None):
        images = check_images(X)
        answers = check_texts(y, len(images))
        qs = self._questions(questions, len(images))
        vocab = build_vocab(answers + qs)
        cfg = FusionConfig(vocab_size=len(vocab), d_model=self.d_model, heads=self.heads,
                           head_dim=self.d_model // self.heads, blocks=self.blocks, ffn_hidden=self.ffn_hidden,
                           r_min=self.r_min, r_max=self.r_max, quantize_base=self.quantize_base)
        model = FusionModel(cfg, vocab=vocab, seed=self.seed)
        vision = model.encode_images(images)
        examples = []
        for i, (q, a) in enumerate(zip(qs, answers)):
            p = assemble_prompt(vocab, "", q)
            examples.append(Example(p.ids, p.slot, encode_text(vocab, a), i))
        split = Split(examples, vision)
        tcfg = TrainConfig(epochs=self.epochs, lr=self.lr, batch_size=self.batch_size, r_min=self.r_min,
                           r_max=self.r_max, early_stop_patience=self.early_stop_patience, seed=self.seed)
        self.history_ = train(model, split, split, tcfg).history
        self.model_ = model
        return self

    def _states(self, X):
        check_is_fitted(self, "model_")
        self.model_.set_rank(self.rank or self.r_max)
        return self.model_.encode_images(check_images(X))

    def predict(self, X, questions=None):
        states = self._states(X)
        qs = self._questions(questions, len(states))
        out = []
        for s, q in zip(states, qs):
            text, _ = generate(self.model_, assemble_prompt(self.model_.vocab, "", q), s, self.max_new)
            out.append(text)
        return out

    def classify(self, X, labels, questions=None):
        """Most likely label per image among ``labels``."""
        states = self._states(X)
        qs = self._questions(questions, len(states))
        return [classify(self.model_, s, labels, q)[0][0] for s, q in zip(states, qs)]

    def score(self, X, y, questions=None):
        """Mean sentence BLEU-2 of the predictions against ``y``."""
        preds = self.predict(X, questions)
        refs = check_texts(y, len(preds))
        return float(np.mean([bleu_n(p, r, 2) if p.strip() else 0.0 for p, r in zip(preds, refs)]))
