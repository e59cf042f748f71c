"""Glue between instruction datasets, the fusion model and the trainer."""
from __future__ import annotations

import logging
from pathlib import Path

from .datagen import InstructionSample
from .errors import EmptySplit
from .fusion import Example, FusionModel, generate
from .tokenizer import assemble_prompt, build_vocab, encode_text
from .trainer import Split, TrainConfig, train
from .vision import VisionConfig, load_image

log = logging.getLogger(__name__)


def dataset_vocab(samples, extra=()):
    return build_vocab([s.question for s in samples] + [s.answer for s in samples] + list(extra))


def encode_samples(model: FusionModel, samples, root):
    """Load each distinct image once; returns ``(vision_states, image_paths)``."""
    paths = sorted({str(Path(root) / s.image) for s in samples})
    states = model.encode_images([load_image(p) for p in paths]) if paths else None
    return states, paths


def to_examples(model: FusionModel, samples, image_index: dict, root) -> list[Example]:
    """Tokenize samples; answers that would overflow ``max_len`` are truncated."""
    out = []
    for s in samples:
        prompt = assemble_prompt(model.vocab, "", s.question)
        answer = encode_text(model.vocab, s.answer)
        room = model.cfg.max_len - len(prompt.ids)
        if room < 1:
            log.warning("%s: prompt longer than max_len, skipped", s.id)
            continue
        if len(answer) >= room:
            log.warning("%s: answer truncated from %d to %d tokens", s.id, len(answer), room - 1)
            answer = answer[:room - 1]
        out.append(Example(prompt.ids, prompt.slot, answer, image_index[str(Path(root) / s.image)]))
    return out


def build_splits(model: FusionModel, samples, root):
    states, paths = encode_samples(model, samples, root)
    index = {p: i for i, p in enumerate(paths)}
    by_split = {name: [s for s in samples if s.split == name] for name in ("train", "val", "test")}
    splits = {name: Split(to_examples(model, group, index, root), states) for name, group in by_split.items()}
    if len(splits["train"]) == 0:
        raise EmptySplit("dataset has no training records")
    if len(splits["val"]) == 0:
        log.warning("no validation records; validating on the training split")
        splits["val"] = splits["train"]
    return splits


def fit_dataset(samples: list[InstructionSample], root, fusion_cfg_for_vocab, vision_cfg: VisionConfig,
                train_cfg: TrainConfig, log_file=None, model_seed=None):
    """Build vocabulary and model from ``samples``, then train.

    ``fusion_cfg_for_vocab(vocab_size)`` returns the fusion config; returns
    ``(model, result, splits)``.
    """
    vocab = dataset_vocab(samples)
    cfg = fusion_cfg_for_vocab(len(vocab))
    seed = train_cfg.seed if model_seed is None else model_seed
    model = FusionModel(cfg, vision_cfg, vocab, seed=seed)
    splits = build_splits(model, samples, root)
    result = train(model, splits["train"], splits["val"], train_cfg, log_file=log_file)
    return model, result, splits


def predict_samples(model: FusionModel, samples, root, rank=None, max_new: int = 64):
    """Greedy answers for ``samples`` as metric pair records."""
    if rank is not None:
        model.set_rank(rank)
    else:
        model.set_rank(max(l.r_max for _, l in model.adapters()))
    states, paths = encode_samples(model, samples, root)
    index = {p: i for i, p in enumerate(paths)}
    pairs = []
    for s in samples:
        prompt = assemble_prompt(model.vocab, "", s.question)
        room = max(0, model.cfg.max_len - len(prompt.ids))
        text, _ = generate(model, prompt, states[index[str(Path(root) / s.image)]], min(max_new, room))
        pairs.append({"id": s.id, "reference": s.answer, "candidate": text})
    return pairs

