import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from otappear.image_io import ImageBuffer, save_mask, load_image
from otappear.mixgame import (
    LossWeights,
    MixMask,
    generate_mix_mask,
    l1_loss,
    mix_images,
    msd_loss,
    toy_patch_critic,
    total_loss,
)
from otappear.neural import DenseLayer, SmallDenseNetwork, init_network, network_forward


def test_zero_patches_gives_zero_mask():
    m = generate_mix_mask(10, 12, num_patches=0, seed=3)
    assert m.shape == (10, 12) and np.all(m.values == 0)


def test_full_frame_patch_gives_ones():
    m = generate_mix_mask(9, 7, num_patches=1, patch_fraction_range=(1.0, 1.0))
    assert np.all(m.values == 1)
    assert m.patches == ((0, 0, 9, 7),)


def test_mask_seed_determinism_and_variation():
    a = generate_mix_mask(32, 32, num_patches=2, seed=5)
    b = generate_mix_mask(32, 32, num_patches=2, seed=5)
    assert np.array_equal(a.values, b.values)
    differ = sum(
        not np.array_equal(generate_mix_mask(32, 32, 2, seed=s).values, generate_mix_mask(32, 32, 2, seed=s + 1000).values)
        for s in range(100)
    )
    assert differ >= 95


def test_patch_sizes_respect_fraction_range():
    for s in range(50):
        m = generate_mix_mask(40, 20, num_patches=3, patch_fraction_range=(0.2, 0.4), seed=s)
        for top, left, ph, pw in m.patches:
            assert 8 <= ph <= 16 and 4 <= pw <= 8
            assert top + ph <= 40 and left + pw <= 20


def test_soft_edge_ramp():
    m = generate_mix_mask(9, 9, 1, patch_fraction_range=(1.0, 1.0), soft_edge=3)
    assert m.values[4, 4] == 1.0
    assert m.values[0, 4] == pytest.approx(0.25)
    assert m.values[1, 4] == pytest.approx(0.5)
    assert 0 < m.values.min() and m.values.max() == 1


def test_mask_validation():
    with pytest.raises(ValueError):
        generate_mix_mask(0, 5)
    with pytest.raises(ValueError):
        generate_mix_mask(5, 5, patch_fraction_range=(0.6, 0.4))
    with pytest.raises(ValueError):
        MixMask(np.full((2, 2), 1.5))


def images(rng, h=6, w=5):
    return ImageBuffer(rng.random((h, w, 3))), ImageBuffer(rng.random((h, w, 3)))


def test_mix_endpoints_and_half(rng):
    y, x = images(rng)
    assert np.array_equal(mix_images(y, x, MixMask.constant(6, 5, 1.0)).data, x.data)
    assert np.array_equal(mix_images(y, x, MixMask.constant(6, 5, 0.0)).data, y.data)
    half = mix_images(y, x, MixMask.constant(6, 5, 0.5)).data
    assert np.allclose(half, (y.data + x.data) / 2, atol=1e-15)


def test_mix_same_image_is_idempotent(rng):
    y, _ = images(rng)
    m = MixMask(rng.random((6, 5)))
    assert np.allclose(mix_images(y, y, m).data, y.data, atol=1e-15)


def test_mix_shape_mismatch(rng):
    y, x = images(rng)
    with pytest.raises(ValueError):
        mix_images(y, x, MixMask.constant(5, 5, 1.0))


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_binary_mask_selects_exactly(seed):
    rng = np.random.default_rng(seed)
    y, x = images(rng)
    mask = generate_mix_mask(6, 5, num_patches=2, seed=seed)
    out = mix_images(y, x, mask).data
    on = mask.values == 1
    assert np.array_equal(out[on], x.data[on])
    assert np.array_equal(out[~on], y.data[~on])


def test_msd_simple_cases(rng):
    r = msd_loss(np.ones((4, 4)), MixMask.constant(4, 4, 1.0))
    assert r.real_term == 1 and r.fake_term == 0
    m = MixMask(rng.random((4, 4)))
    r = msd_loss(np.full((4, 4), 0.7), m)
    assert r.real_term + r.fake_term == pytest.approx(0.7, abs=1e-15)


def test_msd_matches_elementwise_sums(rng):
    s, m = rng.normal(size=(5, 7)), rng.random((5, 7))
    real = sum(m[i, j] * s[i, j] for i in range(5) for j in range(7)) / 35
    fake = sum((1 - m[i, j]) * s[i, j] for i in range(5) for j in range(7)) / 35
    r = msd_loss(s, m)
    assert r.real_term == pytest.approx(real, abs=1e-14)
    assert r.fake_term == pytest.approx(fake, abs=1e-14)
    assert r.critic_loss == pytest.approx(fake - real, abs=1e-14)
    assert r.generator_loss == -r.fake_term
    with pytest.raises(ValueError):
        msd_loss(s, m[:4])


def patch_critic(rng, p):
    return init_network([p * p * 3, 8, 1], rng, last_scale=1.0)


def test_zero_critic_scores_zero(rng):
    net = SmallDenseNetwork([DenseLayer(np.zeros((1, 12)), np.zeros(1), "identity")])
    img, _ = images(rng, 4, 4)
    assert np.all(toy_patch_critic(img, net, 2) == 0)


def test_constant_image_constant_scores(rng):
    net = patch_critic(rng, 3)
    s = toy_patch_critic(ImageBuffer.constant(7, 8, (0.2, 0.4, 0.9)), net, 3)
    assert s.shape == (7, 8) and np.allclose(s, s[0, 0], rtol=0, atol=1e-15)


def test_scores_match_per_patch_forward(rng):
    net = patch_critic(rng, 2)
    img = ImageBuffer(rng.random((5, 4, 3)))
    s = toy_patch_critic(img, net, 2)
    padded = np.pad(img.data, ((0, 1), (0, 0), (0, 0)), mode="edge")
    for r in range(5):
        for c in range(4):
            pr, pc = r // 2 * 2, c // 2 * 2
            expected = network_forward(net, padded[pr : pr + 2, pc : pc + 2].ravel())[0]
            assert s[r, c] == pytest.approx(expected, abs=1e-14)


def test_critic_size_checked(rng):
    with pytest.raises(ValueError):
        toy_patch_critic(ImageBuffer.constant(4, 4, 0.5), patch_critic(rng, 3), 2)


def test_total_loss_arithmetic_and_linearity(rng):
    assert total_loss(0.1, 0.2, 0.3, 0.4, LossWeights(0, 0, 0, 0)) == 0
    assert total_loss(0.1, 0.2, 0.3, 0.4) == pytest.approx(1.0)
    losses = rng.random(4)
    base = LossWeights(*rng.random(4))
    for i, name in enumerate(("content", "appearance", "recon", "msd")):
        vals = [total_loss(*losses, LossWeights(**{**base.__dict__, name: w})) for w in (0.0, 1.0, 2.0)]
        assert vals[2] - vals[1] == pytest.approx(vals[1] - vals[0], abs=1e-14)
        assert vals[1] - vals[0] == pytest.approx(losses[i], abs=1e-14)
    with pytest.raises(ValueError):
        LossWeights(content=-1)


def test_l1_loss(rng):
    a, b = images(rng)
    assert l1_loss(a, a) == 0
    assert l1_loss(a, b) == pytest.approx(np.abs(a.data - b.data).mean())


def test_mask_png_round_trip(tmp_path):
    m = generate_mix_mask(10, 10, 2, soft_edge=2, seed=1)
    path = tmp_path / "mask.png"
    save_mask(m.values, path)
    back = load_image(path).data[:, :, 0]
    assert np.array_equal(np.round(back * 255), np.round(m.values * 255))
