"""Architecture contracts: causality, normalization, masking, combination."""

import math

import numpy as np
import pytest

from bilingual_rnnt import autodiff as ad
from bilingual_rnnt import model as M
from bilingual_rnnt.autodiff import Tensor
from bilingual_rnnt.corpus import CorpusConfig, language_tables, synth_utterance
from bilingual_rnnt.model import (
    ArchitectureError,
    AttentionConfig,
    ModelConfig,
    attention_weights,
    combine_posteriors,
    init_model,
    parameter_manifest,
    posterior_grid,
)

CFG = CorpusConfig(num_graphemes_a=3, num_graphemes_b=3, raw_dim=4)
COMBINED = language_tables(CFG)


def tiny_config(arch: str, look_ahead=None) -> ModelConfig:
    return ModelConfig(
        architecture=arch,
        input_dim=CFG.stack * CFG.raw_dim,
        encoder_layers=1,
        encoder_hidden=8,
        prediction_layers=1,
        prediction_hidden=6,
        embed_dim=5,
        joint_hidden=7,
        attention=AttentionConfig(key_dim=4, ffn_hidden=4, look_ahead=look_ahead),
    )


def tiny_model(arch: str, seed=0, look_ahead=None) -> M.Model:
    return init_model(tiny_config(arch, look_ahead), COMBINED, seed)


def utt(seed=0, mode="mixed"):
    return synth_utterance(CFG, mode, seed)


def test_encode_single_frame():
    m = tiny_model("vanilla")
    h = M.encode(m, np.zeros((1, 12)))
    assert h.shape == (1, 8)


def test_encode_causality_prefix():
    m = tiny_model("vanilla")
    x = np.random.default_rng(1).normal(size=(10, 12))
    full = M.encode(m, x).data
    half = M.encode(m, x[:5].copy()).data
    np.testing.assert_array_equal(full[:5], half)


def test_encode_zero_params_zero_output():
    m = tiny_model("vanilla")
    for name, p in m.params.items():
        if name.startswith("encoder"):
            p.data[:] = 0.0
    h = M.encode(m, np.zeros((4, 12)))
    np.testing.assert_array_equal(h.data, 0.0)


def test_encode_dim_mismatch():
    m = tiny_model("vanilla")
    with pytest.raises(ad.ShapeError):
        M.encode(m, np.zeros((3, 5)))


def test_predict_empty_labels_single_row():
    m = tiny_model("vanilla")
    out = M.predict(m, np.array([], dtype=np.int64))
    assert out.shape == (1, 6)


def test_predict_prefix_property():
    m = tiny_model("vanilla")
    rng = np.random.default_rng(3)
    for _ in range(5):
        shared = rng.integers(0, COMBINED.size - 1, size=4)
        l1 = np.concatenate([shared, rng.integers(0, COMBINED.size - 1, size=2)])
        l2 = np.concatenate([shared, rng.integers(0, COMBINED.size - 1, size=3)])
        o1 = M.predict(m, l1).data
        o2 = M.predict(m, l2).data
        np.testing.assert_array_equal(o1[:5], o2[:5])


def test_predict_rejects_blank():
    m = tiny_model("vanilla")
    with pytest.raises(ValueError):
        M.predict(m, np.array([COMBINED.blank_index]))


def test_joint_vanilla_shape_and_normalization():
    m = tiny_model("vanilla")
    rng = np.random.default_rng(4)
    out = M.joint_vanilla(m, rng.normal(size=8), rng.normal(size=6))
    assert out.shape == (COMBINED.size,)
    assert abs(np.exp(out.data).sum() - 1.0) < 1e-9


def test_joint_vanilla_zero_params_uniform():
    m = tiny_model("vanilla")
    for p in m.params.values():
        p.data[:] = 0.0
    out = M.joint_vanilla(m, np.zeros(8), np.zeros(6))
    np.testing.assert_allclose(out.data, math.log(1.0 / COMBINED.size), atol=1e-12)


def test_joint_vanilla_wrong_architecture():
    m = tiny_model("multisoftmax")
    with pytest.raises(ArchitectureError):
        M.joint_vanilla(m, np.zeros(8), np.zeros(6))


def test_joint_language_shapes_and_independence():
    m = tiny_model("multisoftmax")
    rng = np.random.default_rng(5)
    he, hp = rng.normal(size=8), rng.normal(size=6)
    out_a = M.joint_language(m, he, hp, "A")
    assert out_a.shape == (COMBINED.table_a.size,)
    assert abs(np.exp(out_a.data).sum() - 1.0) < 1e-9
    # perturbing B's joint must leave A's output untouched
    m.params["joint_B.w_out"].data += 3.0
    out_a2 = M.joint_language(m, he, hp, "A")
    np.testing.assert_array_equal(out_a.data, out_a2.data)
    with pytest.raises(ArchitectureError):
        M.joint_language(tiny_model("vanilla"), he, hp, "A")


def test_attention_weights_simplex():
    m = tiny_model("multisoftmax_attn", look_ahead=2)
    h = np.random.default_rng(6).normal(size=(9, 8))
    for t in range(9):
        w_a, w_b = attention_weights(m, h, t, 2)
        assert 0.0 <= w_a <= 1.0 and 0.0 <= w_b <= 1.0
        assert abs(w_a + w_b - 1.0) < 1e-9


def test_attention_masking_bit_exact():
    m = tiny_model("multisoftmax_attn", look_ahead=3)
    rng = np.random.default_rng(7)
    h = rng.normal(size=(12, 8))
    t = 4
    ref = attention_weights(m, h, t, 3)
    h2 = h.copy()
    h2[t + 3 + 1 :] += rng.normal(size=h2[t + 4 :].shape) * 10
    assert attention_weights(m, h2, t, 3) == ref
    # grid version: same property through the masked softmax
    g1 = M.attention_logweight_grid(m, Tensor(h), 3).data
    g2 = M.attention_logweight_grid(m, Tensor(h2), 3).data
    np.testing.assert_array_equal(g1[t], g2[t])


def test_attention_grid_matches_per_frame():
    for look in (0, 2, None):
        m = tiny_model("multisoftmax_attn", look_ahead=look)
        h = np.random.default_rng(8).normal(size=(7, 8))
        grid = np.exp(M.attention_logweight_grid(m, Tensor(h), look).data)
        for t in range(7):
            w = attention_weights(m, h, t, look)
            np.testing.assert_allclose(grid[t], w, atol=1e-12)


def test_attention_zero_ffn_is_half_half():
    m = tiny_model("multisoftmax_attn", look_ahead=5)
    m.params["attention.ffn_w2"].data[:] = 0.0
    m.params["attention.ffn_b2"].data[:] = 0.0
    h = np.random.default_rng(9).normal(size=(4, 8))
    for t in range(4):
        np.testing.assert_allclose(attention_weights(m, h, t, 5), (0.5, 0.5), atol=1e-12)


def test_attention_frame_out_of_range():
    m = tiny_model("multisoftmax_attn")
    with pytest.raises(IndexError):
        attention_weights(m, np.zeros((3, 8)), 3, 1)


def test_combine_degenerate_weight_reproduces_language_a():
    rng = np.random.default_rng(10)
    lp_a = np.log(rng.dirichlet(np.ones(COMBINED.table_a.size)))
    lp_b = np.log(rng.dirichlet(np.ones(COMBINED.table_b.size)))
    out = combine_posteriors(lp_a, lp_b, 1.0, 0.0, COMBINED)
    a_idx = np.asarray(COMBINED.a_nonblank)
    np.testing.assert_allclose(out[list(COMBINED.a_segment)], lp_a[a_idx], atol=1e-12)
    assert np.all(np.isneginf(out[list(COMBINED.b_segment)]))
    np.testing.assert_allclose(
        out[COMBINED.blank_index], lp_a[COMBINED.table_a.blank_index], atol=1e-12
    )


def test_combine_uniform_half_half():
    n = COMBINED.table_a.size
    lp = np.log(np.full(n, 1.0 / n))
    out = np.exp(combine_posteriors(lp, lp, 0.5, 0.5, COMBINED))
    np.testing.assert_allclose(out[COMBINED.blank_index], 1.0 / n, atol=1e-12)
    np.testing.assert_allclose(out[: COMBINED.size - 1], 0.5 / n, atol=1e-12)


def test_combine_sum_against_direct_summation():
    rng = np.random.default_rng(11)
    for _ in range(10):
        lp_a = np.log(rng.dirichlet(np.ones(COMBINED.table_a.size)))
        lp_b = np.log(rng.dirichlet(np.ones(COMBINED.table_b.size)))
        w_a = rng.uniform()
        out = np.exp(combine_posteriors(lp_a, lp_b, w_a, 1.0 - w_a, COMBINED))
        direct = w_a * np.exp(lp_a).sum() + (1 - w_a) * np.exp(lp_b).sum()
        np.testing.assert_allclose(out.sum(), direct, atol=1e-9)
        np.testing.assert_allclose(out.sum(), 1.0, atol=1e-9)


def test_combine_rejects_bad_weights():
    lp = np.log(np.full(COMBINED.table_a.size, 1.0 / COMBINED.table_a.size))
    with pytest.raises(ValueError):
        combine_posteriors(lp, lp, 1.2, -0.2, COMBINED)


@pytest.mark.parametrize("arch", ["vanilla", "multisoftmax", "multisoftmax_attn"])
def test_grid_slices_normalized(arch):
    m = tiny_model(arch, look_ahead=3)
    u = utt(12)
    grid, traj = posterior_grid(m, u.features, u.label_seq)
    sums = np.exp(grid.data).sum(axis=-1)
    np.testing.assert_allclose(sums, 1.0, atol=1e-6)
    if arch == "multisoftmax_attn":
        assert traj.shape == (u.num_frames, 2)
        np.testing.assert_allclose(traj.sum(axis=1), 1.0, atol=1e-9)
    else:
        assert traj is None


def test_vanilla_zero_params_uniform_grid():
    m = tiny_model("vanilla")
    for p in m.params.values():
        p.data[:] = 0.0
    u = utt(13)
    grid, _ = posterior_grid(m, u.features, u.label_seq)
    np.testing.assert_allclose(grid.data, math.log(1.0 / COMBINED.size), atol=1e-12)


def test_multisoftmax_zero_params_per_language_uniform():
    # fixed 0.5/0.5 weighting: non-blank mass 0.5/n each, blank 1/n
    m = tiny_model("multisoftmax")
    for p in m.params.values():
        p.data[:] = 0.0
    u = utt(14)
    grid, _ = posterior_grid(m, u.features, u.label_seq)
    n = COMBINED.table_a.size
    probs = np.exp(grid.data)
    np.testing.assert_allclose(probs[..., : COMBINED.size - 1], 0.5 / n, atol=1e-12)
    np.testing.assert_allclose(probs[..., COMBINED.blank_index], 1.0 / n, atol=1e-12)


def test_attn_with_frozen_half_weights_equals_multisoftmax():
    att = tiny_model("multisoftmax_attn", seed=3, look_ahead=4)
    ms = tiny_model("multisoftmax", seed=99)
    for name, p in ms.params.items():
        p.data[:] = att.params[name].data  # shared trunk + joints
    u = utt(15)
    g_forced, _ = posterior_grid(att, u.features, u.label_seq, forced_weights=(0.5, 0.5))
    g_ms, _ = posterior_grid(ms, u.features, u.label_seq)
    np.testing.assert_allclose(g_forced.data, g_ms.data, atol=1e-12)


def test_forced_unit_weight_reproduces_monolingual_grid():
    m = tiny_model("multisoftmax_attn", seed=4)
    u = utt(16, mode="A")
    grid, traj = posterior_grid(m, u.features, u.label_seq, forced_weights=(1.0, 0.0))
    np.testing.assert_array_equal(traj[:, 0], 1.0)
    h_enc = M.encode(m, u.features)
    h_pred = M.predict(m, u.label_seq)
    mono = M._joint_grid(h_enc, h_pred, m.params, "joint_A").data
    a_idx = np.asarray(COMBINED.a_nonblank)
    np.testing.assert_allclose(grid.data[:, :, list(COMBINED.a_segment)], mono[:, :, a_idx], atol=1e-12)
    np.testing.assert_allclose(
        grid.data[:, :, COMBINED.blank_index],
        mono[:, :, COMBINED.table_a.blank_index],
        atol=1e-12,
    )
    assert np.all(np.isneginf(grid.data[:, :, list(COMBINED.b_segment)]))


def test_grid_look_ahead_causality_end_to_end():
    # changing input frames beyond t+L leaves weight w[t] bit-identical
    m = tiny_model("multisoftmax_attn", seed=5, look_ahead=2)
    u = utt(17)
    if u.num_frames < 6:
        u = utt(18)
    _, traj = posterior_grid(m, u.features, u.label_seq, look_ahead=2)
    feats = u.features.copy()
    t = 2
    feats[t + 3 :] += 5.0
    _, traj2 = posterior_grid(m, feats, u.label_seq, look_ahead=2)
    np.testing.assert_array_equal(traj[: t + 1], traj2[: t + 1])


def test_parameter_manifest_architecture_split():
    cfg_v = tiny_config("vanilla")
    cfg_m = tiny_config("multisoftmax")
    cfg_a = tiny_config("multisoftmax_attn")
    names_v = set(parameter_manifest(cfg_v, COMBINED))
    names_m = set(parameter_manifest(cfg_m, COMBINED))
    names_a = set(parameter_manifest(cfg_a, COMBINED))
    assert any(n.startswith("joint.") for n in names_v)
    assert not any(n.startswith("joint_A") for n in names_v)
    assert names_m < names_a
    assert {n for n in names_a - names_m} == {
        "attention.wq", "attention.wk", "attention.wv",
        "attention.ffn_w1", "attention.ffn_b1", "attention.ffn_w2", "attention.ffn_b2",
    }


def test_model_config_roundtrip_and_unknown_keys():
    cfg = tiny_config("multisoftmax_attn", look_ahead=7)
    back = ModelConfig.from_dict(cfg.to_dict())
    assert back == cfg
    with pytest.raises(ValueError):
        ModelConfig.from_dict({"architecture": "vanilla", "bogus": 3})
    with pytest.raises(ValueError):
        ModelConfig.from_dict({"architecture": "nope"})
