import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from microvlm.errors import BadChannelCount, EmptyImage, ImageFormatError, KTooLarge, NonDivisible, ZeroNorm
from microvlm.gradcheck import check_vision_encoder
from microvlm.tensor import Prng
from microvlm.vision import (
    VisionConfig,
    VisionEncoder,
    cosine_rank,
    cosine_similarities,
    cosine_topk,
    decode_image,
    encode,
    encode_mraw,
    encode_ppm,
    patchify,
    preprocess,
    resize_bilinear,
    unpatchify,
)


def const(value, size=224):
    return np.full((size, size, 3), value, np.uint8)


def test_preprocess_constants():
    assert np.allclose(preprocess(const(128)), (128 / 255 - 0.5) / 0.5)
    assert preprocess(const(128))[0, 0, 0] == pytest.approx(0.003922, abs=1e-6)
    assert np.all(preprocess(const(255)) == 1.0)
    assert np.all(preprocess(const(0)) == -1.0)


def test_preprocess_passthrough_at_224():
    img = np.random.default_rng(0).integers(0, 256, (224, 224, 3)).astype(np.uint8)
    assert np.allclose(preprocess(img), (img / 255.0 - 0.5) / 0.5, atol=1e-6)


def test_preprocess_resizes():
    out = preprocess(const(10, 50))
    assert out.shape == (224, 224, 3)
    assert np.allclose(out, (10 / 255 - 0.5) / 0.5, atol=1e-6)


def test_preprocess_errors():
    with pytest.raises(EmptyImage):
        preprocess(np.zeros((0, 5, 3), np.uint8))
    with pytest.raises(BadChannelCount):
        preprocess(np.zeros((5, 5, 4), np.uint8))


def test_resize_constant_preserved():
    img = np.full((7, 13, 3), 0.25)
    assert np.allclose(resize_bilinear(img, 20, 5), 0.25)


def test_patch_count():
    assert patchify(np.zeros((224, 224, 3)), 32).shape == (49, 32 * 32 * 3)
    assert VisionConfig().n_patches == 49


@settings(max_examples=20)
@given(st.integers(1, 4), st.integers(1, 4), st.sampled_from([2, 4, 8]))
def test_patch_roundtrip(h, w, P):
    img = np.random.default_rng(h * 10 + w).normal(size=(h * P, w * P, 3))
    patches = patchify(img, P)
    assert patches.size == img.size
    assert np.array_equal(unpatchify(patches, h * P, w * P, P), img)


def test_patchify_nondivisible():
    with pytest.raises(NonDivisible):
        patchify(np.zeros((30, 32, 3)), 32)
    with pytest.raises(NonDivisible):
        VisionConfig(image_size=100)


def test_image_codecs_roundtrip():
    img = np.random.default_rng(1).integers(0, 256, (9, 11, 3)).astype(np.uint8)
    assert np.array_equal(decode_image(encode_ppm(img)), img)
    assert np.array_equal(decode_image(encode_mraw(img.astype(np.float32))), img.astype(np.float32))
    with pytest.raises(ImageFormatError):
        decode_image(b"GIF89a")
    with pytest.raises(ImageFormatError):
        decode_image(encode_ppm(img)[:-5])


def test_encoder_shapes_and_determinism():
    enc = VisionEncoder(VisionConfig(), Prng(0))
    x = patchify(preprocess(const(77)), 32)
    h, states = encode(enc, x)
    assert h.shape == (64,) and states.shape == (50, 64)
    h2, _ = encode(enc, x)
    assert np.array_equal(h, h2)
    assert np.array_equal(h, states[0])


def test_encoder_batch_matches_single():
    enc = VisionEncoder(VisionConfig(image_size=64, patch=16, dim=16, layers=2, heads=2), Prng(1))
    xs = np.random.default_rng(0).normal(size=(3, 16, 768)).astype(np.float32)
    _, batched = enc.forward(xs)
    for i in range(3):
        assert np.allclose(enc.forward(xs[i])[1], batched[i], atol=1e-6)


def test_encoder_gradient_fd():
    assert check_vision_encoder(0).passed


# --- similarity

def test_topk_self_first():
    C = np.random.default_rng(0).normal(size=(20, 8))
    idx = cosine_topk(C[7], C, 3)
    assert idx[0] == 7
    assert cosine_similarities(C[7], C)[7] == pytest.approx(1.0)


@settings(max_examples=25)
@given(st.integers(0, 10_000), st.integers(1, 30))
def test_topk_matches_bruteforce(seed, m):
    rng = np.random.default_rng(seed)
    C = rng.normal(size=(m, 5))
    q = rng.normal(size=5)
    sims = [float(q @ c / np.linalg.norm(q) / np.linalg.norm(c)) for c in C]
    brute = sorted(range(m), key=lambda i: (-sims[i], i))
    assert list(cosine_topk(q, C, m)) == brute
    assert sorted(cosine_topk(q, C, m)) == list(range(m))


@given(st.floats(0.01, 100))
def test_topk_scale_invariant(c):
    rng = np.random.default_rng(0)
    C = rng.normal(size=(15, 6))
    q = rng.normal(size=6)
    assert list(cosine_topk(c * q, C, 5)) == list(cosine_topk(q, C, 5))


def test_topk_errors():
    C = np.ones((3, 2))
    with pytest.raises(KTooLarge):
        cosine_topk(np.ones(2), C, 4)
    with pytest.raises(ZeroNorm):
        cosine_topk(np.zeros(2), C, 1)


def test_rank_ascending_ties_by_index():
    C = np.ones((4, 3))
    assert list(cosine_rank(np.ones(3), C, descending=False)) == [0, 1, 2, 3]
