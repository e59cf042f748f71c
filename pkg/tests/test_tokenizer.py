import pytest
from hypothesis import given
from hypothesis import strategies as st

from microvlm.errors import EmptyQuestion
from microvlm.tokenizer import (
    BOS_ID,
    ENCODE_ID,
    IMAGE_ID,
    SPECIALS,
    UNK_ID,
    Vocabulary,
    assemble_few_shot_prompt,
    assemble_prompt,
    build_vocab,
    decode_text,
    encode_text,
    normalize_tokens,
)

VOCAB = build_vocab(["the cat sat on the mat .", "a dog ran", "describe the image ?"])


def test_frequency_order():
    v = build_vocab(["a b", "a"])
    assert v.id_of("a") < v.id_of("b")
    assert v.itos[: len(SPECIALS)] == list(SPECIALS)


def test_build_deterministic():
    assert build_vocab(["x y z", "y"]).itos == build_vocab(["x y z", "y"]).itos


def test_min_freq_maps_to_unk():
    v = build_vocab(["a a b"], min_freq=2)
    assert encode_text(v, "b") == [UNK_ID]


def test_roundtrip_and_empty():
    ids = encode_text(VOCAB, "The cat sat on the mat.")
    assert decode_text(VOCAB, ids) == "the cat sat on the mat ."
    assert encode_text(VOCAB, "") == []
    assert encode_text(VOCAB, "zebra") == [UNK_ID]


def test_specials_never_from_raw_text():
    ids = encode_text(VOCAB, "<image> <Encode> <bos> <eos> <pad>")
    assert not set(ids) & {0, BOS_ID, 3, IMAGE_ID, ENCODE_ID}


@given(st.text(alphabet=st.characters(codec="ascii"), max_size=60))
def test_tokenization_idempotent(s):
    once = " ".join(normalize_tokens(s))
    assert normalize_tokens(once) == normalize_tokens(s)


def test_vocab_serialization(tmp_path):
    path = tmp_path / "v.tsv"
    VOCAB.save(path)
    back = Vocabulary.load(path)
    assert back.itos == VOCAB.itos and back.digest() == VOCAB.digest()


def test_assemble_prompt_layout():
    p = assemble_prompt(VOCAB, "", "describe the image ?")
    assert p.ids[:2] == [BOS_ID, IMAGE_ID]
    assert p.ids[-1] == ENCODE_ID
    assert p.ids[p.slot] == IMAGE_ID
    p2 = assemble_prompt(VOCAB, "a dog", "describe")
    assert p2.ids[p2.slot] == IMAGE_ID and p2.slot == 3


def test_assemble_prompt_empty_question():
    with pytest.raises(EmptyQuestion):
        assemble_prompt(VOCAB, "a", "   ")


def test_few_shot_prompt_slots():
    p = assemble_few_shot_prompt(VOCAB, [("", "cat"), ("", "dog")], "describe")
    assert len(p.image_slots) == 3
    assert all(p.ids[s] == IMAGE_ID for s in p.image_slots)
    assert p.ids[-1] == ENCODE_ID
