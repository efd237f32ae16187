import numpy as np
import pytest

from discgan import tensor as T
from discgan.network import (
    GENERATOR_LAYERS,
    StyleBank,
    discriminate,
    encode_content,
    encode_style,
    generate,
    gram_matrix,
    init_discriminator,
    init_generator,
    receptive_field,
    score_map_size,
)
from discgan.tensor import Tensor


@pytest.fixture(scope="module")
def bank():
    return StyleBank(0)


@pytest.fixture(scope="module")
def gen():
    return init_generator(np.random.default_rng(0))


def images(seed, n=2, size=32):
    return list(np.random.default_rng(seed).random((n, size, size, 3)))


def test_zero_params_zero_image_zero_code(gen):
    zero = {k: Tensor(np.zeros_like(v.data)) for k, v in gen.items()}
    code = encode_content(np.zeros((16, 16, 3)), zero)
    assert code.shape == (1, 32, 4, 4)
    assert not code.data.any()


def test_content_code_deterministic_and_quarter_size(gen):
    img = images(1, 1, 24)[0]
    a, b = encode_content(img, gen), encode_content(img, gen)
    assert a.shape == (1, 32, 6, 6)
    assert np.array_equal(a.data, b.data)


def test_content_code_rejects_odd_sizes(gen):
    with pytest.raises(ValueError, match="divisible by 4"):
        encode_content(np.zeros((18, 18, 3)), gen)


def test_flip_equivariance_with_symmetric_encoder(gen):
    sym = {k: Tensor((v.data + v.data[..., ::-1]) / 2 if v.ndim == 4 else v.data)
           for k, v in gen.items()}
    img = images(2, 1)[0]
    code = encode_content(img, sym).data
    flipped = encode_content(img[:, ::-1], sym).data
    np.testing.assert_allclose(flipped, code[..., ::-1], atol=1e-6)


def test_constant_image_has_zero_style_variance(bank):
    code = encode_style(np.full((32, 32, 3), 0.4), bank)
    for s in code.stds:
        # stds carry sqrt(var + 1e-5); the variance itself is zero
        np.testing.assert_allclose(s.astype(np.float64) ** 2, 1e-5, atol=1e-9)


def test_style_stats_are_permutation_invariant_on_features(bank):
    img = images(3, 1)[0]
    code = encode_style(img, bank)
    rng = np.random.default_rng(0)
    for f, m, s in zip(bank.features(img), code.means, code.stds):
        n, c, h, w = f.shape
        perm = rng.permutation(h * w)
        fp = f.reshape(n, c, h * w)[..., perm].reshape(f.shape)
        mp, sp = T.instance_stats(Tensor(fp))
        np.testing.assert_allclose(mp.data, m, atol=1e-6)
        np.testing.assert_allclose(sp.data, s, atol=1e-6)


def test_gram_of_constant_map():
    np.testing.assert_array_equal(gram_matrix(np.ones((1, 1, 2, 2))), [[[1.0]]])


def test_gram_symmetric_psd(bank):
    for g in encode_style(images(4, 2), bank).grams:
        np.testing.assert_allclose(g, g.transpose(0, 2, 1), atol=1e-12)
        assert np.linalg.eigvalsh(g).min() >= -1e-9


def test_style_codes_non_negative_and_shaped(bank):
    code = encode_style(images(5, 3), bank)
    assert [m.shape for m in code.means] == [(3, 8), (3, 24), (3, 32)]
    assert all(np.all(s >= 0) for s in code.stds)
    assert [m.shape[1] for m, _ in code.injection_targets()] == [32, 32]


def test_generate_shape_and_range(gen, bank):
    imgs = images(6, 2, 32)
    out = generate(encode_content(imgs, gen), encode_style(images(7, 2, 32), bank), gen)
    assert out.shape == (2, 3, 32, 32)
    assert out.data.min() > 0 and out.data.max() < 1


def test_self_styling_smoke(gen, bank):
    img = images(8, 1, 32)[0]
    out = generate(encode_content(img, gen), encode_style(img, bank), gen)
    assert out.shape == (1, 3, 32, 32) and np.all(np.isfinite(out.data))


@pytest.mark.parametrize("seed", range(5))
def test_adain_taps_carry_style_statistics(gen, bank, seed):
    taps = []
    code = encode_style(images(100 + seed, 3), bank)
    generate(encode_content(images(seed, 3), gen), code, gen, taps=taps)
    assert len(taps) == len(code.injection_targets()) == 2
    for tap, (m, s) in zip(taps, code.injection_targets()):
        mean, std = T.instance_stats(tap)
        assert np.max(np.abs(mean.data - m)) < 1e-4
        assert np.max(np.abs(std.data - s)) < 1e-4


def test_generator_layers_cover_params(gen):
    assert {k.rsplit(".", 1)[0] for k in gen} == set(GENERATOR_LAYERS)


def test_discriminator_shapes():
    d = init_discriminator(np.random.default_rng(0))
    assert receptive_field() == 22
    for size in (32, 64):
        scores = discriminate(np.zeros((size, size, 3)), d)
        assert scores.shape == (1, 1, score_map_size(size), score_map_size(size))
    assert score_map_size(64) == 15 and score_map_size(32) == 7


def test_discriminator_zero_weights_constant():
    d = init_discriminator(np.random.default_rng(0))
    d = {k: Tensor(np.zeros_like(v.data) if k.endswith(".w") else np.full_like(v.data, 0.3))
         for k, v in d.items()}
    scores = discriminate(images(9, 1)[0], d).data
    assert np.all(scores == scores.flat[0])


def test_discriminator_shift_equivariance():
    d = init_discriminator(np.random.default_rng(1))
    big = np.random.default_rng(2).random((72, 72, 3))
    stride, size = 4, 64  # stride is the product of the block strides
    a = discriminate(big[:size, :size], d).data[0, 0]
    b = discriminate(big[stride:stride + size, stride:stride + size], d).data[0, 0]
    # score j sees input rows 4j - 7 .. 4j + 14; keep scores that never touch padding
    lo, hi = 2, (size - 1 - 14) // 4
    np.testing.assert_allclose(b[lo:hi, lo:hi], a[lo + 1:hi + 1, lo + 1:hi + 1], atol=1e-5)
