"""Small model factories shared by tests."""
import numpy as np

from microvlm.fusion import Example, FusionConfig, FusionModel
from microvlm.tensor import Prng
from microvlm.tokenizer import assemble_prompt, build_vocab, encode_text
from microvlm.trainer import Split
from microvlm.vision import VisionConfig

SMALL_VISION = VisionConfig(image_size=32, patch=8, dim=16, layers=1, heads=2)
CAPTIONS = ["red square .", "blue circle .", "green line .", "red circle ."]
QUESTION = "what is shown ?"
SMALL_RANKS = {"r_min": 2, "r_max": 8}


def small_model(vocab=None, seed=0, **kw):
    vocab = vocab or build_vocab(CAPTIONS + [QUESTION])
    opts = dict(vocab_size=len(vocab), d_model=32, heads=2, head_dim=16, blocks=2, max_len=32,
                vision_dim=16, ffn_hidden=64, r_min=2, r_max=8)
    opts.update(kw)
    return FusionModel(FusionConfig(**opts), SMALL_VISION, vocab, seed=seed)


def small_task(seed=0, **kw):
    model = small_model(seed=seed, **kw)
    prng = Prng(123)
    images = [(prng.uniform((32, 32, 3)) * 255).astype(np.uint8) for _ in CAPTIONS]
    vision = model.encode_images(images)
    prompt = assemble_prompt(model.vocab, "", QUESTION)
    ex = [Example(prompt.ids, prompt.slot, encode_text(model.vocab, c), i) for i, c in enumerate(CAPTIONS)]
    return model, Split(ex, vision), prompt, images
