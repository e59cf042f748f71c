"""Word/punctuation tokenizer, vocabulary and multimodal prompt assembly."""
from __future__ import annotations

import hashlib
import re
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path

from .errors import EmptyCorpus, EmptyQuestion, MalformedRecord

PAD, UNK, BOS, EOS, IMAGE, ENCODE = "<pad>", "<unk>", "<bos>", "<eos>", "<image>", "<Encode>"
SPECIALS = (PAD, UNK, BOS, EOS, IMAGE, ENCODE)
PAD_ID, UNK_ID, BOS_ID, EOS_ID, IMAGE_ID, ENCODE_ID = range(6)

# a literal "<unk>" stays one token so decoded output re-encodes to the same ids;
# every other special spelled out in text splits into ordinary pieces
_TOKEN_RE = re.compile(r"<unk>|\w+|[^\w\s]", re.UNICODE)


def normalize_tokens(text: str) -> list[str]:
    """Lowercase, split on whitespace, emit punctuation marks as their own tokens."""
    return _TOKEN_RE.findall(text.lower())


@dataclass
class Vocabulary:
    itos: list[str]
    stoi: dict[str, int] = field(default_factory=dict)

    def __post_init__(self):
        if tuple(self.itos[:6]) != SPECIALS:
            raise ValueError("vocabulary must start with the six special tokens")
        self.stoi = {tok: i for i, tok in enumerate(self.itos)}
        if len(self.stoi) != len(self.itos):
            raise ValueError("duplicate tokens in vocabulary")

    def __len__(self):
        return len(self.itos)

    def __contains__(self, token):
        return token in self.stoi

    def id_of(self, token: str) -> int:
        return self.stoi.get(token, UNK_ID)

    def digest(self) -> str:
        return hashlib.sha256("\n".join(self.itos).encode("utf-8")).hexdigest()

    def dumps(self) -> str:
        return "".join(f"{tok}\t{i}\n" for i, tok in enumerate(self.itos))

    def save(self, path) -> None:
        Path(path).write_text(self.dumps(), encoding="utf-8")

    @classmethod
    def loads(cls, text: str) -> "Vocabulary":
        itos = []
        for lineno, line in enumerate(text.splitlines(), 1):
            if not line:
                continue
            tok, sep, idx = line.rpartition("\t")
            if not sep or not idx.isdigit() or int(idx) != len(itos):
                raise MalformedRecord("expected 'token<TAB>id' with consecutive ids", lineno)
            itos.append(tok)
        return cls(itos)

    @classmethod
    def load(cls, path) -> "Vocabulary":
        return cls.loads(Path(path).read_text(encoding="utf-8"))


def build_vocab(corpus, min_freq: int = 1) -> Vocabulary:
    corpus = list(corpus)
    if not corpus:
        raise EmptyCorpus("cannot build a vocabulary from an empty corpus")
    counts = Counter()
    for text in corpus:
        counts.update(normalize_tokens(text))
    # a special spelled out in raw text is just text; it never gets its own id
    for tok in SPECIALS:
        counts.pop(tok.lower(), None)
    kept = sorted((t for t, c in counts.items() if c >= min_freq), key=lambda t: (-counts[t], t))
    return Vocabulary(list(SPECIALS) + kept)


def encode_text(vocab: Vocabulary, s: str) -> list[int]:
    return [vocab.id_of(tok) for tok in normalize_tokens(s)]


def decode_text(vocab: Vocabulary, ids) -> str:
    words = []
    for i in ids:
        i = int(i)
        if i in (PAD_ID, BOS_ID, EOS_ID, IMAGE_ID, ENCODE_ID):
            continue
        words.append(vocab.itos[i] if 0 <= i < len(vocab) else UNK)
    return " ".join(words)


@dataclass
class MultimodalPrompt:
    """Token ids of an assembled prompt and where each image enters the stream."""

    ids: list[int]
    image_slots: list[int]

    @property
    def slot(self) -> int:
        return self.image_slots[0]


def assemble_prompt(vocab: Vocabulary, description: str, question: str, image_ref=None) -> MultimodalPrompt:
    """``[<bos>, description, <image>, question, <Encode>]``."""
    if not question or not normalize_tokens(question):
        raise EmptyQuestion("question must be non-empty")
    desc = encode_text(vocab, description or "")
    ids = [BOS_ID, *desc, IMAGE_ID, *encode_text(vocab, question), ENCODE_ID]
    return MultimodalPrompt(ids, [1 + len(desc)])


def assemble_few_shot_prompt(vocab: Vocabulary, demos, question: str, description: str = "") -> MultimodalPrompt:
    """Repeat ``[description, <image>, answer]`` per demonstration, then the query.

    ``demos`` is a sequence of ``(description, answer)`` pairs; their images
    take the leading slots in order and the query image takes the last one.
    """
    if not question or not normalize_tokens(question):
        raise EmptyQuestion("question must be non-empty")
    ids = [BOS_ID]
    slots = []
    for desc, answer in demos:
        ids += encode_text(vocab, desc or "")
        slots.append(len(ids))
        ids += [IMAGE_ID, *encode_text(vocab, answer)]
    ids += encode_text(vocab, description or "")
    slots.append(len(ids))
    ids += [IMAGE_ID, *encode_text(vocab, question), ENCODE_ID]
    return MultimodalPrompt(ids, slots)
