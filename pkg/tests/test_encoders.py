import numpy as np
import pytest

import oracles
from conftest import toy_backbone, toy_model_config
from comma_workbench import numerics as nx
from comma_workbench.encoders import (
    Backbone, ModelConfig, VisionEncoderConfig, encode_image, encode_images, encode_text, encode_texts,
    insert_prompts, patchify, transformer_layer, unpatchify,
)
from comma_workbench.errors import ConfigError, DimensionError
from comma_workbench.numerics import Tensor


# --------------------------------------------------------------------------- patchify


def test_patchify_shape():
    assert patchify(np.arange(16.0).reshape(4, 4, 1), 2).shape == (4, 4)


def test_patchify_row_major_order():
    img = np.arange(16.0).reshape(4, 4, 1)
    rows = patchify(img, 2)
    assert rows[0].tolist() == [0, 1, 4, 5]
    assert rows[1].tolist() == [2, 3, 6, 7]
    assert rows[2].tolist() == [8, 9, 12, 13]


def test_patchify_constant_image_rows_identical():
    rows = patchify(np.full((4, 4, 3), 0.7), 2)
    assert np.all(rows == rows[0])


@pytest.mark.parametrize("side,patch,channels", [(4, 2, 1), (8, 2, 3), (6, 3, 2), (8, 4, 3)])
def test_patchify_round_trip(side, patch, channels):
    img = np.random.default_rng(side * patch).normal(size=(side, side, channels))
    back = unpatchify(patchify(img, patch), side, patch, channels)
    assert np.array_equal(back, img)


def test_patchify_rejects_non_divisible():
    with pytest.raises(DimensionError):
        patchify(np.zeros((5, 5, 1)), 2)


def test_vision_config_invariants():
    assert VisionEncoderConfig().num_patches == 16
    with pytest.raises(ConfigError):
        VisionEncoderConfig(image_side=7, patch_size=2)


def test_model_config_requires_equal_depth():
    with pytest.raises(ConfigError):
        ModelConfig(vision=VisionEncoderConfig(layers=2), text=toy_model_config().text)


# --------------------------------------------------------------------------- transformer layer


def test_layer_preserves_shape_and_is_deterministic(toy):
    x = Tensor(np.random.default_rng(0).normal(size=(2, 5, 4)))
    p = toy.layer("vision", 0)
    a, b = transformer_layer(x, p, 1), transformer_layer(x, p, 1)
    assert a.shape == x.shape
    assert np.array_equal(a.data, b.data)


def test_layer_matches_loop_oracle(toy):
    x = np.random.default_rng(1).normal(size=(5, 6))
    got = transformer_layer(Tensor(x), toy.layer("text", 0), 1).data
    np.testing.assert_allclose(got, oracles.transformer_layer(x, oracles.layer_params(toy, "text", 0), 1),
                               atol=1e-10, rtol=0)


def test_two_head_layer_matches_loop_oracle():
    bb = toy_backbone(toy_model_config(heads=2))
    x = np.random.default_rng(2).normal(size=(3, 4))
    got = transformer_layer(Tensor(x), bb.layer("vision", 0), 2).data
    np.testing.assert_allclose(got, oracles.transformer_layer(x, oracles.layer_params(bb, "vision", 0), 2),
                               atol=1e-10, rtol=0)


def test_layer_width_mismatch(toy):
    with pytest.raises(DimensionError):
        transformer_layer(Tensor(np.zeros((3, 5))), toy.layer("vision", 0), 1)


def test_layer_gradient_wrt_tokens(toy):
    p = toy.layer("vision", 0)
    w = Tensor(np.random.default_rng(3).normal(size=(3, 4)))
    x = Tensor(np.random.default_rng(4).normal(size=(3, 4)))
    assert nx.finite_diff_check(lambda t: nx.sum_all(nx.mul(transformer_layer(t, p, 1), w)), x) < 1e-6


# --------------------------------------------------------------------------- encoders vs hand-computed forward


def test_encode_image_matches_hand_forward(toy):
    img = np.random.default_rng(5).normal(size=(2, 2, 1))
    x = encode_image(toy, img)
    assert x.shape == (3,)
    np.testing.assert_allclose(x.data, oracles.encode_image(toy, img), atol=1e-10, rtol=0)


def test_encode_text_matches_hand_forward(toy):
    ids = [1, 5, 9, 2]
    z = encode_text(toy, ids)
    assert z.shape == (3,)
    np.testing.assert_allclose(z.data, oracles.encode_text(toy, ids), atol=1e-10, rtol=0)


def test_deep_encoders_match_hand_forward():
    bb = toy_backbone(toy_model_config(layers=3, heads=2, image_side=4, patch_size=2, channels=2), seed=4)
    img = np.random.default_rng(6).normal(size=(4, 4, 2))
    np.testing.assert_allclose(encode_image(bb, img).data, oracles.encode_image(bb, img), atol=1e-10, rtol=0)
    np.testing.assert_allclose(encode_text(bb, [1, 3, 4, 2]).data, oracles.encode_text(bb, [1, 3, 4, 2]),
                               atol=1e-10, rtol=0)


def test_encoders_are_pure(toy):
    img = np.random.default_rng(7).normal(size=(2, 2, 1))
    assert np.array_equal(encode_image(toy, img).data, encode_image(toy, img).data)
    assert np.array_equal(encode_text(toy, [1, 4, 4, 2]).data, encode_text(toy, [1, 4, 4, 2]).data)


def test_batched_matches_single(toy):
    imgs = np.random.default_rng(8).normal(size=(3, 2, 2, 1))
    batch = encode_images(toy, imgs).data
    for i in range(3):
        np.testing.assert_allclose(batch[i], encode_image(toy, imgs[i]).data, atol=1e-12, rtol=0)


def test_default_config_output_width():
    bb = Backbone.initialize(ModelConfig(), 0)
    img = np.zeros((8, 8, 3))
    assert encode_image(bb, img).shape == (16,)
    assert encode_text(bb, [1, 3, 4, 5, 3, 9, 6, 2]).shape == (16,)


def test_text_length_must_match(toy):
    with pytest.raises(DimensionError):
        encode_text(toy, [1, 2])


def test_pad_permutation_is_a_no_op(toy):
    # sequences are fixed length, so reordering identical PAD ids changes nothing
    a = encode_text(toy, [1, 0, 0, 2]).data
    b = encode_text(toy, [1, 0, 0, 2][:1] + [0, 0][::-1] + [2]).data
    assert np.array_equal(a, b)


# --------------------------------------------------------------------------- prompt insertion


def test_depth_zero_is_vanilla(toy):
    img = np.random.default_rng(9).normal(size=(2, 2, 1))
    assert np.array_equal(encode_images(toy, img[None], prompts=[]).data, encode_images(toy, img[None]).data)


def test_prompted_token_counts():
    bb = Backbone.initialize(ModelConfig(), 0)
    m = 2
    rng = np.random.default_rng(10)
    vp = [Tensor(rng.normal(size=(m, 32))) for _ in range(3)]
    tp = [Tensor(rng.normal(size=(m, 24))) for _ in range(3)]
    _, hv = encode_images(bb, np.zeros((1, 8, 8, 3)), vp, return_hidden=True)
    _, ht = encode_texts(bb, [[1, 3, 4, 5, 3, 9, 6, 2]], tp, return_hidden=True)
    assert all(h.shape[1] == m + 1 + 16 for h in hv)
    assert all(h.shape[1] == m + 8 for h in ht)


def test_prompts_replace_previous_prompt_outputs():
    bb = toy_backbone(toy_model_config(layers=2))
    rng = np.random.default_rng(11)
    p0, p1 = Tensor(rng.normal(size=(2, 4))), Tensor(rng.normal(size=(2, 4)))
    _, hidden = encode_images(bb, rng.normal(size=(1, 2, 2, 1)), [p0, p1], return_hidden=True)
    after0 = transformer_layer(hidden[0], bb.layer("vision", 0), 1).data
    assert np.array_equal(hidden[1].data[0, :2], p1.data)
    assert np.array_equal(hidden[1].data[:, 2:], after0[:, 2:])


def test_depth_one_prompt_positions_propagate():
    bb = toy_backbone(toy_model_config(layers=2))
    rng = np.random.default_rng(12)
    p0 = Tensor(rng.normal(size=(2, 6)))
    _, hidden = encode_texts(bb, [[1, 5, 7, 2]], [p0], return_hidden=True)
    x0 = np.vstack([p0.data, bb.params["text.token_embed"].data[[1, 5, 7, 2]] + bb.params["text.pos_embed"].data])
    np.testing.assert_allclose(hidden[0].data[0], x0, atol=1e-15, rtol=0)
    layer0 = oracles.transformer_layer(x0, oracles.layer_params(bb, "text", 0), 1)
    np.testing.assert_allclose(hidden[1].data[0, :2], layer0[:2], atol=1e-10, rtol=0)


def test_insert_prompts_width_mismatch():
    with pytest.raises(DimensionError):
        insert_prompts(0, Tensor(np.zeros((1, 3, 4))), Tensor(np.zeros((2, 5))), 1)


def test_insert_prompts_beyond_depth_is_identity():
    t = Tensor(np.ones((1, 3, 4)))
    assert insert_prompts(2, t, None, 2) is t


# --------------------------------------------------------------------------- backbone bookkeeping


def test_checksum_tracks_any_change(toy):
    before = toy.checksum()
    assert toy.copy().checksum() == before
    toy.params["text.proj"].data[0, 0] += 1e-12
    assert toy.checksum() != before


def test_initialize_is_seeded():
    a, b = Backbone.initialize(ModelConfig(), 3), Backbone.initialize(ModelConfig(), 3)
    assert a.checksum() == b.checksum()
    assert Backbone.initialize(ModelConfig(), 4).checksum() != a.checksum()
