import numpy as np
import pytest

from meun.autodiff import Tensor, backward, no_grad, ops
from meun.errors import ConfigError, DepthError, PoolDegeneracyError, WiringError
from meun.losses import make_edge_label, total_loss
from meun.model import (
    ADM,
    MEUN,
    UEN,
    UEN_A_DILATIONS,
    UEN_VARIANTS,
    UENA,
    ModelConfig,
    PlainBlock,
    make_uen,
    stage_sizes,
)


def small(size=64, **kw):
    kw.setdefault("base_channels", 8)
    kw.setdefault("mini_stage_channels", (8, 8, 8, 8, 8))
    return ModelConfig(input_size=size, **kw)


def image(n, size, seed=0):
    return np.random.default_rng(seed).normal(size=(n, 3, size, size)).astype(np.float32)


@pytest.mark.parametrize("size", [64, 96, 224])
def test_halving_contract(size):
    model = MEUN(small(size)).eval()
    with no_grad():
        out = model(image(1, size))
    sizes = stage_sizes(size)
    for i, s in enumerate(sizes, start=1):
        assert out.shapes[f"b{i}"] == (1, 8, s, s)
        assert out.shapes[f"raw{i}"][2:] == (s, s)
        assert out.shapes[f"input{i}"] == (1, 8, s, s)
        assert out.shapes[f"uen{i}"] == (1, 8, s, s)
    assert out.shapes["adm"] == out.shapes["b5"]
    maps = out.maps()
    assert len(maps) == 7
    for t in maps.values():
        assert t.shape == (1, 1, size, size)
        assert np.all((t.data > 0) & (t.data < 1))


def test_224_stage_sizes():
    assert stage_sizes(224) == [112, 56, 28, 14, 7]
    assert stage_sizes(64) == [32, 16, 8, 4, 2]


def test_mini_stage_channels_follow_config():
    cfg = small(64, mini_stage_channels=(4, 6, 8, 10, 12))
    model = MEUN(cfg)
    raw = model.encoder_forward(image(1, 64))
    assert [r.shape[1] for r in raw] == [4, 6, 8, 10, 12]


def test_resnet_shape_encoder_widths():
    model = MEUN(small(64, encoder="resnet50-shape"))
    raw = model.encoder_forward(image(1, 64))
    assert [r.shape[1] for r in raw] == [64, 256, 512, 1024, 2048]
    assert all(p.shape[1] == 8 for p in model.channel_squeeze(raw))


def test_variant_map():
    assert UEN_VARIANTS == {1: "UEN_5", 2: "UEN_4", 3: "UEN_4", 4: "UEN_A", 5: "UEN_A"}
    model = MEUN(small())
    assert [model.decoder.uen(i).variant for i in range(1, 6)] == [UEN_VARIANTS[i] for i in range(1, 6)]
    assert UEN_A_DILATIONS == (1, 2, 4)
    assert tuple(b.conv.dilation for b in model.decoder.uen4.branch) == (1, 2, 4)


@pytest.mark.parametrize("variant,size", [("UEN_5", 8), ("UEN_5", 13), ("UEN_4", 4), ("UEN_A", 3)])
def test_uen_preserves_shape(variant, size):
    block = make_uen(variant, 4, rng=np.random.default_rng(0), dtype=np.float64).eval()
    x = Tensor(np.random.default_rng(1).normal(size=(1, 4, size, size)))
    assert block(x).shape == x.shape


def test_uen_depth_error():
    block = UEN(4, 3, rng=np.random.default_rng(0), dtype=np.float64)
    with pytest.raises(DepthError):
        block(Tensor(np.zeros((1, 4, 7, 7))))


def test_config_errors():
    with pytest.raises(ConfigError):
        ModelConfig(input_size=48)
    with pytest.raises(ConfigError):
        ModelConfig(base_channels=4)
    model = MEUN(small(64))
    with pytest.raises(ConfigError):
        model(image(1, 96))


def test_adm_sizes():
    adm = ADM(8, 4, rng=np.random.default_rng(0), dtype=np.float64).eval()
    b5 = Tensor(np.random.default_rng(1).normal(size=(1, 8, 7, 7)))
    out, v = adm(b5, return_vector=True)
    assert out.shape == (1, 8, 7, 7)
    assert v.shape == (1, 8)
    with pytest.raises(PoolDegeneracyError):
        adm(Tensor(np.zeros((1, 8, 1, 1))))


def test_adm_saturated_gate_is_plain_upsample():
    adm = ADM(8, 4, rng=np.random.default_rng(0), dtype=np.float64).eval()
    adm.fc2.weight.data[:] = 0.0
    adm.fc2.bias.data[:] = 40.0
    b5 = Tensor(np.random.default_rng(1).normal(size=(1, 8, 7, 7)))
    d = ops.maxpool2(adm.conv_b(adm.conv_a(b5)))
    np.testing.assert_allclose(adm(b5).data, ops.upsample_bilinear(d, 7, 7).data, atol=1e-12)


def test_channel_attention_ordering():
    d = np.abs(np.random.default_rng(0).normal(size=(1, 1, 4, 4))) + 0.1
    d = np.concatenate([d, d], axis=1)
    out = ops.channel_scale(Tensor(d), Tensor(np.array([0.9, 0.3])))
    assert np.all(out.data[0, 0] > out.data[0, 1])


def test_squeeze_of_zero_input_is_uniform():
    model = MEUN(small()).eval()
    unit = model.squeeze.units[2]
    unit.bn.bias.data[:] = np.linspace(-0.5, 0.5, 8)
    out = unit(Tensor(np.zeros((1, 8, 8, 8), dtype=np.float32))).data
    expected = np.maximum(unit.bn.bias.data - unit.bn.weight.data * unit.bn.running_mean
                          / np.sqrt(unit.bn.running_var + 1e-5), 0)
    np.testing.assert_allclose(out, np.broadcast_to(expected[None, :, None, None], out.shape), atol=1e-6)


def test_edge_branch_sizes():
    model = MEUN(small()).eval()
    pyr = model.channel_squeeze(model.encoder_forward(image(1, 64)))
    per_stage, logits = model.edge_branch(pyr[0], [p.shape[2:] for p in pyr[:4]], (64, 64))
    assert len(per_stage) == 4
    assert per_stage[0].shape == pyr[0].shape
    assert per_stage[3].shape[2:] == (64 // 16, 64 // 16)
    assert logits.shape == (1, 1, 64, 64)


def test_zero_heads_give_half():
    model = MEUN(small()).eval()
    for head in model.decoder.head:
        head.out.weight.data[:] = 0
        head.out.bias.data[:] = 0
    with no_grad():
        out = model(image(1, 64))
    for s in out.sal:
        np.testing.assert_array_equal(s.data, 0.5)


def test_wiring_error_names_stage():
    model = MEUN(small()).eval()
    pyr = model.channel_squeeze(model.encoder_forward(image(1, 64)))
    edge = model.edge_branch(pyr[0], [p.shape[2:] for p in pyr[:4]], (64, 64))
    bad = Tensor(np.zeros((1, 8, 3, 3), dtype=np.float32))
    with pytest.raises(WiringError, match="stage 5"):
        model.decoder_forward(pyr, bad, edge, (64, 64))


def test_ablation_ladder():
    counts = [
        MEUN(small(use_adm=False, use_uen=False)).num_parameters(),
        MEUN(small(use_adm=True, use_uen=False)).num_parameters(),
        MEUN(small(use_adm=True, use_uen=True)).num_parameters(),
    ]
    assert counts[0] < counts[1] < counts[2]
    assert isinstance(MEUN(small(use_uen=False)).decoder.uen1, PlainBlock)
    assert isinstance(MEUN(small()).decoder.uen5, UENA)


def test_lr_groups():
    model = MEUN(small())
    groups = {p.name: p.lr_group for p in model.parameters()}
    assert all((g == "backbone") == n.startswith("encoder.") for n, g in groups.items())
    assert {"backbone", "head"} == set(groups.values())


def test_eval_forward_is_deterministic():
    model = MEUN(small()).eval()
    x = image(2, 64)
    with no_grad():
        a, b = model(x), model(x)
    for k, t in a.maps().items():
        assert t.data.tobytes() == b.maps()[k].data.tobytes()


def test_same_seed_same_weights():
    a, b = MEUN(small(), seed=3), MEUN(small(), seed=3)
    for (na, pa), (nb, pb) in zip(a.named_parameters(), b.named_parameters()):
        assert na == nb and pa.data.tobytes() == pb.data.tobytes()


def test_gradients_reach_every_block():
    model = MEUN(small()).train()
    x = image(2, 64)
    mask = np.zeros((2, 64, 64), dtype=np.uint8)
    mask[:, 16:48, 20:40] = 1
    out = model(x)
    loss, _ = total_loss(out, mask, make_edge_label(mask))
    backward(loss)
    prefixes = ["encoder.", "squeeze.", "adm.", "edge.", "decoder.pre", "decoder.fuse",
                "decoder.uen1", "decoder.uen5", "decoder.head", "decoder.united"]
    for prefix in prefixes:
        grads = [p.grad for n, p in model.named_parameters() if n.startswith(prefix)]
        assert grads and all(np.all(np.isfinite(g)) for g in grads)
        assert any(np.any(g != 0) for g in grads), prefix


def test_backward_on_32px_without_adm():
    model = MEUN(small(32, use_adm=False)).eval()
    out = model(image(1, 32))
    mask = np.zeros((1, 32, 32), dtype=np.uint8)
    mask[:, 8:24, 8:24] = 1
    loss, _ = total_loss(out, mask, make_edge_label(mask))
    backward(loss)
    assert all(np.all(np.isfinite(p.grad)) for p in model.parameters())
