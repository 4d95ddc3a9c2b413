import numpy as np
import pytest

from rdafnet import tensor as T
from rdafnet.blocks import RDAFB, AttentionFusionModule, AttentionModule, RDAFBConfig
from rdafnet.tensor import ShapeError, Tensor, finite_diff_grad, rel_error


def randomize(module, rng, scale=0.3):
    for _, p in module.named_parameters():
        p.data[...] = rng.normal(0, scale, p.shape)
    return module


def t64(a, grad=False):
    return Tensor(np.asarray(a, dtype=np.float64), requires_grad=grad)


# ---------------------------------------------------------------------------
# attention module


def test_am_zero_init_gives_half():
    am = AttentionModule(8, dtype=np.float64)
    m = am(t64(np.zeros((1, 8, 4, 4))))
    np.testing.assert_array_equal(m.data, 0.5)


def test_am_preserves_shape():
    am = AttentionModule(128)
    assert am(Tensor(np.ones((1, 128, 16, 16), dtype=np.float32))).shape == (1, 128, 16, 16)


def test_am_values_in_open_interval(rng):
    am = randomize(AttentionModule(6, dtype=np.float64), rng, 2.0)
    for _ in range(100):
        m = am(t64(rng.normal(0, 3, (1, 6, 5, 5)))).data
        assert np.all((m > 0) & (m < 1))


def test_am_channel_mismatch():
    with pytest.raises(ShapeError, match="8 channels"):
        AttentionModule(8)(Tensor(np.zeros((1, 4, 3, 3), dtype=np.float32)))


# ---------------------------------------------------------------------------
# attention fusion module


def fusion_logits(afm, maps):
    return afm.depthwise(afm.fuse(T.concat_channels(maps)))


def test_afm_averaging_weights_reproduce_the_map(rng):
    f = 4
    afm = AttentionFusionModule(2, f, dtype=np.float64)
    w = np.zeros((f, 2 * f, 1, 1))
    for c in range(f):
        w[c, c] = w[c, c + f] = 0.5
    afm.fuse.weight.data[...] = w
    afm.fuse.bias.data[...] = 0
    afm.depthwise.weight.data[...] = 0
    afm.depthwise.weight.data[:, 0, 1, 1] = 1
    afm.depthwise.bias.data[...] = 0
    m = t64(rng.uniform(0.05, 0.95, (1, f, 5, 5)))
    # the fused pre-activation is the map itself; the module then re-squashes it
    np.testing.assert_allclose(fusion_logits(afm, [m, m]).data, m.data, atol=1e-15)
    np.testing.assert_allclose(afm([m, m]).data, 1 / (1 + np.exp(-m.data)), atol=1e-15)


def test_afm_weight_shape_for_two_maps():
    assert AttentionFusionModule(2, 128).fuse.weight.shape == (128, 256, 1, 1)


def test_afm_needs_two_maps():
    with pytest.raises(ValueError):
        AttentionFusionModule(1, 4)


def test_afm_spatial_mismatch():
    afm = AttentionFusionModule(2, 4)
    a = Tensor(np.zeros((1, 4, 4, 4), dtype=np.float32))
    b = Tensor(np.zeros((1, 4, 4, 5), dtype=np.float32))
    with pytest.raises(ShapeError):
        afm([a, b])


def test_afm_outputs_in_open_interval(rng):
    for k in (2, 3, 5):
        afm = randomize(AttentionFusionModule(k, 4, dtype=np.float64), rng, 1.5)
        for _ in range(20):
            maps = [t64(rng.uniform(0, 1, (1, 4, 5, 5))) for _ in range(k)]
            out = afm(maps).data
            assert out.shape == (1, 4, 5, 5)
            assert np.all((out > 0) & (out < 1))


# ---------------------------------------------------------------------------
# block


def test_config_rejects_afm_without_am():
    with pytest.raises(ValueError, match="requires use_am"):
        RDAFBConfig(use_am=False, use_afm=True)


@pytest.mark.parametrize("tag,flags", [
    ("am1_afm1_lrl1", (True, True, True)), ("am1_afm0_lrl1", (True, False, True)),
    ("am0_afm0_lrl0", (False, False, False)),
])
def test_variant_parsing(tag, flags):
    cfg = RDAFBConfig.from_variant(tag)
    assert (cfg.use_am, cfg.use_afm, cfg.use_lrl) == flags
    assert cfg.variant == tag


@pytest.mark.parametrize("tag", ["am0_afm1_lrl1", "am2_afm0_lrl1", "foo", "am1_lrl1_afm1"])
def test_variant_parsing_rejects(tag):
    with pytest.raises(ValueError):
        RDAFBConfig.from_variant(tag)


def test_zero_last_conv_is_identity(rng):
    block = randomize(RDAFB(RDAFBConfig(conv_layers=4, filters=8), dtype=np.float64), rng)
    block.convs[-1].zero_()
    x = rng.normal(size=(1, 8, 5, 5))
    np.testing.assert_array_equal(block(t64(x)).data, x)


def test_paper_block_structure():
    block = RDAFB(RDAFBConfig(conv_layers=4, filters=128), rng=None)
    assert len(block.ams) == 4 and len(block.afms) == 3 and len(block.convs) == 4
    assert all(c.kernel == 3 for c in block.convs)
    f = 128
    expected = (
        4 * (9 * f * f + f)                        # 3x3 convs
        + 4 * (f * f + f)                          # attention modules
        + sum(k * f * f + f for k in (2, 3, 4))    # fusion 1x1 convs
        + 3 * (9 * f + f)                          # depthwise 3x3
    )
    assert block.num_parameters() == expected


def test_gate_last_conv_switch():
    block = RDAFB(RDAFBConfig(conv_layers=4, filters=8, gate_last_conv=True))
    assert len(block.ams) == 5 and len(block.afms) == 4


@pytest.mark.parametrize("c", [2, 3, 4, 6])
def test_fusion_consumes_growing_map_lists(c):
    block = RDAFB(RDAFBConfig(conv_layers=c, filters=4))
    assert [a.n_maps for a in block.afms] == list(range(2, c + 1))
    assert [a.fuse.cin for a in block.afms] == [4 * k for k in range(2, c + 1)]


@pytest.mark.parametrize("c", [2, 3, 4, 6])
def test_recorded_maps_follow_dense_wiring(rng, c):
    block = RDAFB(RDAFBConfig(conv_layers=c, filters=4), rng=rng)
    block(Tensor(rng.normal(size=(1, 4, 4, 4)).astype(np.float32)), record=True)
    labels = [lbl for lbl, _ in block.last_maps]
    assert labels[0] == "input"
    assert labels.count("afm1") == 1 and f"afm{c - 1}" in labels and f"afm{c}" not in labels


def _chain(block, x, gate=None):
    h = x if gate is None else T.scale(x, gate)
    n = len(block.convs)
    for i, conv in enumerate(block.convs, 1):
        f = T.conv2d(h, conv.weight, conv.bias, 1, 1)
        if i < n:
            f = T.relu(f)
            if gate is not None:
                f = T.scale(f, gate)
        h = f
    return h


def test_ablation_without_attention_is_residual_conv_chain(rng):
    block = randomize(RDAFB(RDAFBConfig(conv_layers=3, filters=8, use_am=False, use_afm=False), dtype=np.float64), rng)
    assert block.ams == [] and block.afms == []
    x = t64(rng.normal(size=(1, 8, 5, 5)))
    np.testing.assert_allclose(block(x).data, x.data + _chain(block, x).data, atol=1e-13)


def test_ablation_without_residual(rng):
    cfg = RDAFBConfig(conv_layers=3, filters=8, use_am=False, use_afm=False, use_lrl=False)
    block = randomize(RDAFB(cfg, dtype=np.float64), rng)
    x = t64(rng.normal(size=(1, 8, 5, 5)))
    np.testing.assert_allclose(block(x).data, _chain(block, x).data, atol=1e-13)


@pytest.mark.parametrize("use_afm", [True, False])
def test_half_gates_halve_features(rng, use_afm):
    block = randomize(RDAFB(RDAFBConfig(conv_layers=4, filters=8, use_afm=use_afm), dtype=np.float64), rng)
    for m in (*block.ams, *block.afms):
        m.zero_()
    x = t64(rng.normal(size=(1, 8, 4, 4)))
    expected = x.data + _chain(block, x, gate=0.5).data
    np.testing.assert_allclose(block(x).data, expected, atol=1e-13)


def test_eq4_literal_gates_block_input(rng):
    cfg = RDAFBConfig(conv_layers=2, filters=4, eq4_literal=True)
    block = randomize(RDAFB(cfg, dtype=np.float64), rng)
    x = t64(rng.normal(size=(1, 4, 4, 4)))
    m0 = block.ams[0](x)
    f1 = T.relu(block.convs[0](T.mul(m0, x)))
    gate = block.afms[0]([m0, block.ams[1](f1)])
    expected = x.data + block.convs[1](T.mul(gate, x)).data
    np.testing.assert_allclose(block(x).data, expected, atol=1e-13)


def test_residual_keeps_input_gradient_alive(rng):
    block = RDAFB(RDAFBConfig(conv_layers=3, filters=4), dtype=np.float64)
    for conv in block.convs:
        conv.weight.data[...] = 0
    x = t64(rng.normal(size=(1, 4, 4, 4)), True)
    num = finite_diff_grad(lambda xx: T.sum_(block(xx)), x)
    assert np.all(np.abs(num) > 0.5)


def test_full_block_gradcheck(rng):
    block = randomize(RDAFB(RDAFBConfig(conv_layers=3, filters=8), dtype=np.float64), rng, 0.3)
    x = t64(rng.normal(size=(1, 8, 6, 6)), True)
    r = Tensor(rng.normal(size=(1, 8, 6, 6)))

    def loss(_=None):
        return T.sum_(T.mul(block(x), r))

    block.zero_grad()
    loss().backward()
    worst = rel_error(x.grad, finite_diff_grad(loss, x))
    for _, p in block.named_parameters():
        worst = max(worst, rel_error(p.grad, finite_diff_grad(loss, p)))
    assert worst < 1e-3
