"""Network contracts: shapes, shared weights, attention degeneracy, checkpoints."""

import dataclasses

import numpy as np
import pytest

from poseadapt.autodiff import Tensor, finite_diff_check, global_avg_pool
from poseadapt.model import (
    AprModel,
    ArchConfig,
    BlockSpec,
    ConfigError,
    apr_forward,
    backbone_forward,
    desk_small,
    encode_latents,
    get_profile,
    init_params,
    rotation_head,
    se_block,
    translation_head,
)

from oracles import gap_loops


@pytest.fixture(scope="module")
def desk_model():
    return AprModel(desk_small(), seed=7)


def _rand_image(rng, n=None):
    shape = (3, 64, 64) if n is None else (n, 3, 64, 64)
    return Tensor(rng.random(shape))


# -- config validation ------------------------------------------------------------


def test_desk_profile_feature_shape():
    assert desk_small().feature_shape() == (64, 7, 7)


def test_large_profile_feature_shape():
    assert get_profile("mobilenetv3-large").feature_shape() == (960, 7, 7)


def test_small_profile_feature_shape():
    assert get_profile("mobilenetv3-small").feature_shape() == (576, 7, 7)


def test_embed_must_divide_heads():
    cfg = dataclasses.replace(desk_small(), mha_heads=5)
    with pytest.raises(ConfigError):
        cfg.validate()


def test_embed_must_match_feature_positions():
    cfg = dataclasses.replace(desk_small(), mha_embed=42, mha_heads=7)
    with pytest.raises(ConfigError):
        cfg.validate()


def test_unknown_profile():
    with pytest.raises(ConfigError):
        get_profile("resnet50")


# -- SE block -----------------------------------------------------------------------


def test_se_block_identity_gate():
    """Zero fc2 weights with bias 3 force h_sigmoid(3) = 1: output equals input."""
    rng = np.random.default_rng(0)
    c, sq = 8, 2
    f = Tensor(rng.normal(size=(c, 5, 5)))
    w1 = Tensor(rng.normal(size=(c, sq)))
    b1 = Tensor(np.zeros(sq))
    w2 = Tensor(np.zeros((sq, c)))
    b2 = Tensor(np.full(c, 3.0))
    out = se_block(f, w1, b1, w2, b2)
    np.testing.assert_allclose(out.data, f.data, atol=1e-15)


def test_se_block_half_gate_on_one_channel():
    c, sq = 2, 1
    f = Tensor(np.ones((c, 3, 3)))
    w1 = Tensor(np.zeros((c, sq)))
    b1 = Tensor(np.zeros(sq))
    w2 = Tensor(np.zeros((sq, c)))
    b2 = Tensor(np.array([0.0, 3.0]))       # gates: h_sigmoid(0)=0.5, h_sigmoid(3)=1
    out = se_block(f, w1, b1, w2, b2)
    np.testing.assert_allclose(out.data[0], 0.5, atol=1e-15)
    np.testing.assert_allclose(out.data[1], 1.0, atol=1e-15)


def test_se_block_matches_scalar_oracle():
    rng = np.random.default_rng(1)
    c, sq = 6, 2
    f = rng.normal(size=(c, 4, 4))
    w1, b1 = rng.normal(size=(c, sq)), rng.normal(size=sq)
    w2, b2 = rng.normal(size=(sq, c)), rng.normal(size=c)
    pooled = gap_loops(f)
    hidden = np.maximum(pooled @ w1 + b1, 0.0)
    gate = np.clip(hidden @ w2 + b2 + 3.0, 0.0, 6.0) / 6.0
    expected = f * gate.reshape(c, 1, 1)
    got = se_block(Tensor(f), Tensor(w1), Tensor(b1), Tensor(w2), Tensor(b2))
    np.testing.assert_allclose(got.data, expected, atol=1e-12)


def test_se_reduction_larger_than_channels_rejected():
    blocks = list(desk_small().blocks)
    blocks[1] = dataclasses.replace(blocks[1], expand=4)   # squeeze would exceed it
    cfg = dataclasses.replace(desk_small(), blocks=tuple(blocks))
    with pytest.raises(ConfigError):
        cfg.validate()


# -- backbone ------------------------------------------------------------------------


def test_backbone_desk_shape(desk_model):
    rng = np.random.default_rng(2)
    feature = backbone_forward(desk_model.params, _rand_image(rng), desk_model.config)
    assert feature.shape == (64, 7, 7)
    batched = backbone_forward(desk_model.params, _rand_image(rng, 5), desk_model.config)
    assert batched.shape == (5, 64, 7, 7)


def test_backbone_large_profile_runs_at_full_scale():
    cfg = get_profile("mobilenetv3-large")
    params = init_params(cfg, seed=0)
    image = Tensor(np.zeros((3, 224, 224)))
    feature = backbone_forward(params, image, cfg)
    assert feature.shape == (960, 7, 7)


def test_backbone_zero_weights_zero_image(desk_model):
    cfg = desk_model.config
    params = {k: Tensor(np.zeros_like(p.data), True)
              for k, p in desk_model.params.items()}
    feature = backbone_forward(params, Tensor(np.zeros((3, 64, 64))), cfg)
    np.testing.assert_array_equal(feature.data, 0.0)


def test_backbone_shape_mismatch(desk_model):
    with pytest.raises(ConfigError):
        backbone_forward(desk_model.params, Tensor(np.zeros((3, 32, 32))),
                         desk_model.config)


# -- heads ---------------------------------------------------------------------------


def test_encode_latents_lengths():
    for d in (32, 256, 512):
        cfg = dataclasses.replace(desk_small(), latent_dim=d)
        params = init_params(cfg, seed=1)
        feature = Tensor(np.random.default_rng(3).normal(size=(2, 64, 7, 7)))
        lat_t, lat_r = encode_latents(feature, params)
        assert lat_t.shape == (2, d) and lat_r.shape == (2, d)


def test_encode_latents_deterministic(desk_model):
    feature = Tensor(np.random.default_rng(4).normal(size=(2, 64, 7, 7)))
    a = encode_latents(feature, desk_model.params)
    b = encode_latents(feature, desk_model.params)
    np.testing.assert_array_equal(a[0].data, b[0].data)
    np.testing.assert_array_equal(a[1].data, b[1].data)


def test_single_linear_identity_encoder_passes_gap_through():
    """With identity out-weights and D = C_f, the latent equals GAP(F)."""
    blocks = (BlockSpec(kind="conv", out_channels=4, kernel=3, stride=2, padding=0),)
    cfg = ArchConfig(name="tiny", input_size=(16, 16), blocks=blocks,
                     latent_dim=4, mha_heads=7, mha_embed=49, head_hidden=False)
    # feature is 4 x 7 x 7 so the embed constraint holds
    params = init_params(cfg, seed=0)
    params["enc_t.out.w"] = Tensor(np.eye(4), True)
    params["enc_t.out.b"] = Tensor(np.zeros(4), True)
    feature = Tensor(np.random.default_rng(5).normal(size=(3, 4, 7, 7)))
    lat_t, _ = encode_latents(feature, params)
    np.testing.assert_allclose(lat_t.data, global_avg_pool(feature).data, atol=1e-15)


def test_translation_head_bias_only(desk_model):
    params = dict(desk_model.params)
    d = desk_model.config.latent_dim
    params["head_t.fc1.w"] = Tensor(np.zeros((d, d)), True)
    params["head_t.fc1.b"] = Tensor(np.zeros(d), True)
    params["head_t.out.w"] = Tensor(np.zeros((d, 3)), True)
    params["head_t.out.b"] = Tensor(np.array([1.0, 2.0, 3.0]), True)
    out = translation_head(Tensor(np.random.default_rng(6).normal(size=(2, d))), params)
    np.testing.assert_array_equal(out.data, [[1.0, 2.0, 3.0], [1.0, 2.0, 3.0]])


def test_translation_head_gradient(desk_model):
    rng = np.random.default_rng(7)
    d = desk_model.config.latent_dim
    latent = rng.normal(size=(2, d))
    gt = rng.normal(size=(2, 3))
    probe = {k: p for k, p in desk_model.params.items() if k.startswith("head_t.")}

    def loss():
        out = translation_head(Tensor(latent), desk_model.params)
        diff = out - Tensor(gt)
        return (diff * diff).sum()

    assert finite_diff_check(loss, probe, step=1e-5) < 1e-4


def test_rotation_head_ignores_feature_values(desk_model):
    """Single-token attention makes the output independent of Q and K."""
    rng = np.random.default_rng(8)
    d = desk_model.config.latent_dim
    latent = Tensor(rng.normal(size=(2, d)))
    f1 = Tensor(rng.normal(size=(2, 64, 7, 7)))
    f2 = Tensor(rng.normal(size=(2, 64, 7, 7)) * 13.0 + 5.0)
    q1 = rotation_head(latent, f1, desk_model.params, desk_model.config)
    q2 = rotation_head(latent, f2, desk_model.params, desk_model.config)
    np.testing.assert_array_equal(q1.data, q2.data)
    assert q1.shape == (2, 4)


def test_rotation_head_attention_param_count(desk_model):
    n = sum(desk_model.params[k].size for k in desk_model.params if k.startswith("mha."))
    assert n == 4 * (49 * 49 + 49) == 9800


def test_attention_dropout_draws_from_rng(desk_model):
    cfg = dataclasses.replace(desk_model.config, attention_dropout=0.5)
    rng = np.random.default_rng(9)
    latent = Tensor(np.random.default_rng(10).normal(size=(8, cfg.latent_dim)))
    feature = Tensor(np.random.default_rng(11).normal(size=(8, 64, 7, 7)))
    outs = {rotation_head(latent, feature, desk_model.params, cfg,
                          mode="train", rng=rng).data.tobytes() for _ in range(4)}
    assert len(outs) > 1          # masks actually vary across draws
    with pytest.raises(ConfigError):
        rotation_head(latent, feature, desk_model.params, cfg, mode="train")


# -- full forward -------------------------------------------------------------------


def test_apr_forward_eval_quaternion_unit_and_canonical(desk_model):
    rng = np.random.default_rng(12)
    out = desk_model.forward(_rand_image(rng, 6), mode="eval")
    q = out.pose.data[:, 3:]
    np.testing.assert_allclose(np.linalg.norm(q, axis=1), 1.0, atol=1e-12)
    assert (q[:, 0] >= 0).all()


def test_apr_forward_eval_deterministic(desk_model):
    rng = np.random.default_rng(13)
    image = _rand_image(rng, 2)
    a = desk_model.forward(image, mode="eval").pose.data
    b = desk_model.forward(image, mode="eval").pose.data
    np.testing.assert_array_equal(a, b)


def test_branches_share_parameter_objects(desk_model):
    """Three branch calls read the very same parameter tensors."""
    rng = np.random.default_rng(14)
    images = [_rand_image(rng, 2) for _ in range(3)]
    before = {k: id(v) for k, v in desk_model.params.items()}
    for image in images:
        apr_forward(desk_model.params, image, desk_model.config, mode="eval")
    after = {k: id(v) for k, v in desk_model.params.items()}
    assert before == after


def test_shared_weights_mutation_moves_all_branches(desk_model):
    rng = np.random.default_rng(15)
    image = _rand_image(rng, 1)
    base = desk_model.forward(image).pose.data.copy()
    key = "head_t.out.b"
    desk_model.params[key].data = desk_model.params[key].data + 0.5
    moved = desk_model.forward(image).pose.data
    desk_model.params[key].data = desk_model.params[key].data - 0.5
    restored = desk_model.forward(image).pose.data
    assert np.abs(moved[:, :3] - base[:, :3]).max() > 0.1
    np.testing.assert_allclose(restored, base, atol=1e-12)


def test_single_image_forward_matches_batch(desk_model):
    rng = np.random.default_rng(16)
    image = rng.random((3, 64, 64))
    single = desk_model.forward(Tensor(image)).pose.data
    batched = desk_model.forward(Tensor(image[None])).pose.data[0]
    np.testing.assert_allclose(single, batched, atol=1e-12)
    assert single.shape == (7,)


def test_desk_model_parameter_budget(desk_model):
    assert desk_model.num_params() < 500_000


def test_invalid_mode_rejected(desk_model):
    with pytest.raises(ConfigError):
        desk_model.forward(Tensor(np.zeros((3, 64, 64))), mode="predict")


# -- checkpoint -----------------------------------------------------------------------


def test_checkpoint_round_trip_bit_exact(tmp_path, desk_model):
    rng = np.random.default_rng(17)
    image = _rand_image(rng, 4)
    before = desk_model.forward(image).pose.data.copy()
    path = tmp_path / "ckpt"
    desk_model.save(path)
    loaded = AprModel.load(path)
    after = loaded.forward(image).pose.data
    np.testing.assert_array_equal(before, after)
    for key, p in desk_model.params.items():
        np.testing.assert_array_equal(p.data, loaded.params[key].data)
    assert loaded.scales.s_x.item() == desk_model.scales.s_x.item()
    assert loaded.scales.s_q.item() == desk_model.scales.s_q.item()
    assert loaded.config == desk_model.config


def test_checkpoint_rejects_wrong_format(tmp_path):
    path = tmp_path / "bad"
    blob = b'{"format":"something-else/9"}'
    path.write_bytes(len(blob).to_bytes(8, "little") + blob)
    with pytest.raises(ConfigError):
        AprModel.load(path)
