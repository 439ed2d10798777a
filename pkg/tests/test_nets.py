"""Backbone, head, parameter-set and backward-contract tests."""

import numpy as np
import pytest

from minidino import autograd as ag
from minidino import nets

from gradcheck import check_gradients

rng = np.random.default_rng(7)


def tiny_backbone_config(**kw):
    defaults = dict(
        family="mobilevit-like",
        stage_widths=(4, 6),
        depths=(1, 1),
        strides=(2, 2),
        heads=2,
        patch_size=2,
        attn_dims=(8,),
        attn_layers=(1,),
        expand_ratio=2,
        final_width=8,
        input_sizes=(16, 8),
        scale="desk",
    )
    defaults.update(kw)
    return nets.BackboneConfig(**defaults)


# ParameterSet ------------------------------------------------------------


def test_parameter_set_basics():
    ps = nets.ParameterSet()
    ps.add("a.w", np.zeros((2, 3), dtype=np.float32))
    with pytest.raises(ValueError, match="duplicate"):
        ps.add("a.w", np.zeros(1))
    with pytest.raises(ValueError, match="fixed shape"):
        ps["a.w"] = np.zeros((3, 2))
    assert ps.names() == ["a.w"]


def test_count_params_cases():
    ps = nets.ParameterSet()
    assert nets.count_params(ps) == 0
    ps.add("conv.w", np.zeros((16, 8, 3, 3), dtype=np.float32))
    ps.add("conv.b", np.zeros(16, dtype=np.float32))
    assert nets.count_params(ps) == 3 * 3 * 8 * 16 + 16 == 1168


def test_desk_preset_parameter_ranges():
    for family in ("mobilevit-like", "resnet-like"):
        cfg = nets.backbone_preset(family, "desk")
        ps, _ = nets.build_backbone(cfg, np.random.default_rng(0))
        n = nets.count_params(ps)
        assert n < 3e5, f"{family} desk preset too large: {n}"
    mv = nets.backbone_preset("mobilevit-like", "desk")
    ps, _ = nets.build_backbone(mv, np.random.default_rng(0))
    assert 3e4 <= nets.count_params(ps) <= 3e5


def test_paper_preset_parameter_targets():
    ps, _ = nets.build_backbone(nets.backbone_preset("mobilevit-like", "paper"), np.random.default_rng(0))
    n = nets.count_params(ps)
    assert abs(n - 5.5e6) <= 0.10 * 5.5e6, f"mobilevit paper preset {n}"
    ps, _ = nets.build_backbone(nets.backbone_preset("resnet-like", "paper"), np.random.default_rng(0))
    n = nets.count_params(ps)
    assert abs(n - 4.9e6) <= 0.10 * 4.9e6, f"resnet paper preset {n}"


# MV2 block ----------------------------------------------------------------


def test_mv2_block_identity_skip_with_zero_weights():
    ps = nets.ParameterSet()
    fwd = nets.mv2_block(ps, np.random.default_rng(0), "blk", cin=6, cout=6, stride=1, expand=2)
    for name in ps.names():
        ps[name] = np.zeros_like(ps[name])
    x = rng.normal(size=(2, 6, 8, 8)).astype(np.float32)
    out = fwd(ps.tensors(), ag.Tensor(x))
    np.testing.assert_array_equal(out.data, x)


def test_mv2_block_shapes_and_expansion():
    ps = nets.ParameterSet()
    nets.mv2_block(ps, np.random.default_rng(0), "blk", cin=4, cout=8, stride=2, expand=2)
    assert ps["blk.expand.conv.w"].shape[0] == 8  # e=2 on 4 channels -> 8
    fwd = nets.mv2_block(ps := nets.ParameterSet(), np.random.default_rng(0), "b", 4, 8, 2, 2) if False else None
    ps2 = nets.ParameterSet()
    fwd2 = nets.mv2_block(ps2, np.random.default_rng(0), "b", 4, 8, 2, 2)
    x = rng.normal(size=(1, 4, 32, 32)).astype(np.float32)
    out = fwd2(ps2.tensors(), ag.Tensor(x))
    assert out.shape == (1, 8, 16, 16)  # stride 2 halves the side


# MobileViT block -----------------------------------------------------------


def test_mobilevit_block_preserves_spatial_shape():
    ps = nets.ParameterSet()
    fwd = nets.mobilevit_block(ps, np.random.default_rng(0), "mv", c=6, d=8, p=2, L=1, heads=2)
    x = rng.normal(size=(2, 6, 8, 8)).astype(np.float32)
    out = fwd(ps.tensors(), ag.Tensor(x))
    assert out.shape == (2, 6, 8, 8)


def test_mobilevit_block_rejects_bad_patch_side():
    ps = nets.ParameterSet()
    fwd = nets.mobilevit_block(ps, np.random.default_rng(0), "mv", c=6, d=8, p=2, L=1, heads=2)
    x = ag.Tensor(np.zeros((1, 6, 7, 7), dtype=np.float32))
    with pytest.raises(ValueError, match="not divisible by patch size"):
        fwd(ps.tensors(), x)


def test_mobilevit_L0_depends_only_on_convs():
    ps = nets.ParameterSet()
    fwd = nets.mobilevit_block(ps, np.random.default_rng(0), "mv", c=4, d=6, p=2, L=0, heads=2)
    assert not any(".tf" in n for n in ps.names())
    x = rng.normal(size=(1, 4, 4, 4)).astype(np.float32)
    out = fwd(ps.tensors(), ag.Tensor(x))
    assert out.shape == (1, 4, 4, 4)


def test_attention_rows_sum_to_one():
    # run a transformer layer and capture the softmax via a probe
    d, heads, S, N = 8, 2, 3, 4
    x = rng.normal(size=(S, N, d)).astype(np.float32)
    q = rng.normal(size=(S, heads, N, d // heads)).astype(np.float32)
    k = rng.normal(size=(S, heads, N, d // heads)).astype(np.float32)
    att = ag.softmax(ag.mul(ag.matmul(ag.Tensor(q), ag.transpose(ag.Tensor(k), (0, 1, 3, 2))), 0.5))
    np.testing.assert_allclose(att.data.sum(axis=-1), 1.0, atol=1e-6)


# Backbone construction -------------------------------------------------------


def test_backbone_forward_both_input_sizes():
    cfg = tiny_backbone_config()
    ps, bb = nets.build_backbone(cfg, np.random.default_rng(1))
    t = ps.tensors()
    out16 = bb(t, np.zeros((2, 3, 16, 16), dtype=np.float32))
    out8 = bb(t, np.zeros((2, 3, 8, 8), dtype=np.float32))
    assert out16.shape == out8.shape == (2, 8)


def test_backbone_construction_rejects_incompatible_patch():
    cfg = tiny_backbone_config(input_sizes=(10,))  # 10 -> 5 -> 3 at attention, 3 % 2 != 0
    with pytest.raises(ValueError, match="patch size"):
        nets.build_backbone(cfg, np.random.default_rng(0))


def test_backbone_validation_errors():
    with pytest.raises(ValueError, match="family"):
        nets.BackboneConfig(family="vgg", stage_widths=(4,), depths=(1,), strides=(1,)).validate()
    with pytest.raises(ValueError, match="equal length"):
        tiny_backbone_config(depths=(1,)).validate()
    with pytest.raises(ValueError, match="heads"):
        tiny_backbone_config(attn_dims=(9,)).validate()


def test_resnet_backbone_runs():
    cfg = nets.desk_resnet_config()
    ps, bb = nets.build_backbone(cfg, np.random.default_rng(2))
    out = bb(ps.tensors(), np.zeros((2, 3, 64, 64), dtype=np.float32))
    assert out.shape == (2, bb.embed_dim)


def test_construction_determinism():
    cfg = tiny_backbone_config()
    ps1, _ = nets.build_backbone(cfg, np.random.default_rng(9))
    ps2, _ = nets.build_backbone(cfg, np.random.default_rng(9))
    assert ps1.names() == ps2.names()
    for n in ps1.names():
        np.testing.assert_array_equal(ps1[n], ps2[n])


# Head -------------------------------------------------------------------------


def test_head_output_width_and_bottleneck_norm():
    cfg = nets.HeadConfig(in_dim=16, hidden_dims=(24,), bottleneck_dim=8, out_dim=32)
    ps, fwd = nets.build_head(cfg, np.random.default_rng(3))
    z = rng.normal(size=(5, 16)).astype(np.float32)
    out = fwd(ps.tensors(), ag.Tensor(z))
    assert out.shape == (5, 32)
    # bottleneck activations are L2-normalized before the final layer: rerun
    # the mlp portion manually via zero final weights -> zero logits
    ps["head.out.w"] = np.zeros_like(ps["head.out.w"])
    out0 = fwd(ps.tensors(), ag.Tensor(z))
    np.testing.assert_array_equal(out0.data, np.zeros((5, 32), dtype=np.float32))


def test_head_norm_last_layer_unit_rows():
    cfg = nets.HeadConfig(in_dim=6, hidden_dims=(), bottleneck_dim=4, out_dim=8, norm_last_layer=True)
    ps, fwd = nets.build_head(cfg, np.random.default_rng(3))
    z = np.eye(6, dtype=np.float32)
    out = fwd(ps.tensors(), ag.Tensor(z))
    # with unit bottleneck rows and unit weight columns, logits are cosines in [-1, 1]
    assert np.abs(out.data).max() <= 1.0 + 1e-5


def test_head_rejects_nonfinite_input():
    cfg = nets.HeadConfig(in_dim=4, hidden_dims=(), bottleneck_dim=4, out_dim=8)
    ps, fwd = nets.build_head(cfg, np.random.default_rng(0))
    z = np.zeros((3, 4), dtype=np.float32)
    z[1, 2] = np.nan
    with pytest.raises(FloatingPointError, match="batch index 1"):
        fwd(ps.tensors(), ag.Tensor(z))


# backward() contract -----------------------------------------------------------


def test_backward_contract_zero_output_gradient():
    cfg = tiny_backbone_config()
    ps, bb = nets.build_backbone(cfg, np.random.default_rng(4))
    x = rng.normal(size=(1, 3, 8, 8)).astype(np.float32)
    grads, xgrad = nets.backward(bb.fwd, ps, x, np.zeros((1, 8), dtype=np.float32))
    assert set(grads) == set(ps.names())
    assert all(np.all(g == 0) for g in grads.values())
    assert np.all(xgrad == 0)


def test_backward_contract_matches_finite_differences():
    # a <=1k-parameter net: conv -> gn -> silu -> gap -> linear
    ps = nets.ParameterSet()
    r = np.random.default_rng(5)
    ps.add("c.w", r.normal(0, 0.4, (4, 3, 3, 3)))
    ps.add("g.gain", np.ones(4))
    ps.add("g.beta", np.zeros(4))
    ps.add("l.w", r.normal(0, 0.4, (4, 2)))
    ps.add("l.b", np.zeros(2))
    assert nets.count_params(ps) <= 1000

    def fwd(t, x):
        h = ag.conv2d(x, t["c.w"], None, stride=2)
        h = ag.group_norm(h, t["g.gain"], t["g.beta"], groups=2)
        h = ag.silu(h)
        h = ag.global_avg_pool(h)
        return ag.linear(h, t["l.w"], t["l.b"])

    x = r.normal(size=(2, 3, 6, 6))
    out_grad = r.normal(size=(2, 2))
    grads, xgrad = nets.backward(fwd, ps, x, out_grad)

    def scalar(*tensors):
        t = dict(zip(ps.names(), tensors[:-1]))
        return ag.tsum(ag.mul(fwd(t, tensors[-1]), out_grad))

    arrays = [ps[n] for n in ps.names()] + [x]
    tens = [ag.Tensor(a.copy(), requires_grad=True) for a in arrays]
    scalar(*tens).backward()
    for tt, (name, g) in zip(tens, list(grads.items()) + [("x", xgrad)]):
        np.testing.assert_allclose(tt.grad, g, rtol=1e-6, atol=1e-9)

    from gradcheck import finite_difference

    numeric = finite_difference(scalar, arrays)
    for num, analytic in zip(numeric, [grads[n] for n in ps.names()] + [xgrad]):
        err = np.linalg.norm(analytic - num) / max(np.linalg.norm(num), 1.0)
        assert err <= 1e-4


def test_whole_tiny_model_gradcheck():
    # end-to-end backbone+head gradient vs finite differences (<=1k params)
    cfg = nets.BackboneConfig(
        family="mobilevit-like", stage_widths=(2, 3), depths=(1, 1), strides=(2, 2),
        heads=1, patch_size=2, attn_dims=(4,), attn_layers=(1,), expand_ratio=1,
        final_width=4, input_sizes=(8,),
    )
    model = nets.build_model(cfg, nets.HeadConfig(in_dim=0, hidden_dims=(), bottleneck_dim=3, out_dim=4), np.random.default_rng(6))
    params = model.params
    assert nets.count_params(params) <= 1000
    x = np.random.default_rng(8).normal(0.5, 0.2, size=(1, 3, 8, 8))
    proj = np.random.default_rng(9).normal(size=(1, 4))
    names = params.names()

    def scalar(*tensors):
        t = dict(zip(names, tensors))
        return ag.tsum(ag.mul(model.forward(t, ag.Tensor(x)), proj))

    worst = check_gradients(scalar, [params[n] for n in names])
    assert worst <= 1e-4
