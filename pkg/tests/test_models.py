import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from cascade3d import nnengine as nn
from cascade3d.gradcheck import check_cascade, check_unet
from cascade3d.models import (
    CascadeBundle,
    UNet,
    UNetSpec,
    bundle_arch_text,
    build_unet,
    cascade_forward,
    load_bundle,
    lnet_spec,
    make_bundle,
    parse_arch_text,
    save_bundle,
    tnet_spec,
    wnet_spec,
)
from cascade3d.preprocess import PatchGrid
from cascade3d.vio import ArchitectureMismatch, save_params, load_params
from cascade3d.volcore import scalar_volume


def zero_bundle(depth=1, base=2):
    return CascadeBundle(
        lnet=UNet(lnet_spec(depth=depth, base_channels=base)),
        wnet=UNet(wnet_spec(depth=depth, base_channels=base)),
        tnet=UNet(tnet_spec(depth=depth, base_channels=base)),
        lnet_shape=(2, 4, 4), patch_shape=(4, 4, 4), overlap=(2, 2, 2),
    )


def test_depth1_shape_preserved():
    net = build_unet(UNetSpec(depth=1, base_channels=2), (4, 4, 4), np.random.default_rng(0))
    assert net.forward(np.zeros((1, 1, 4, 4, 4), dtype=np.float32)).shape == (1, 1, 4, 4, 4)


def test_zero_weight_net_outputs_half():
    net = UNet(wnet_spec(depth=2, base_channels=2, se=True))
    out = net.forward(np.random.default_rng(0).normal(size=(1, 1, 4, 8, 8)))
    assert np.all(out == 0.5)


def test_pyramid_channel_counts():
    spec = tnet_spec(depth=3, base_channels=4)
    net = UNet(spec)
    # level i takes pooled features (base*2**(i-1)) plus the 2-channel raw input pooled by 2**i
    assert net.level_input_channels == [2, 4 + 2, 8 + 2, 16 + 2]
    assert [p.factor for p in net.pyramid] == [2, 4, 8]
    lines = net.describe()
    assert "enc2.pyramid DownsampleInput x4" in lines
    assert "enc2.concat ConcatChannels -> 10" in lines
    plain = UNet(lnet_spec(depth=3, base_channels=4))
    assert plain.level_input_channels == [1, 4, 8, 16]


def test_pyramid_input_is_average_pooled_raw_image():
    net = UNet(wnet_spec(depth=2, base_channels=2), np.random.default_rng(0), np.float64)
    x = np.random.default_rng(1).normal(size=(1, 1, 4, 4, 4))
    net.forward(x)
    pooled = net.pyramid[1].forward(x)
    np.testing.assert_allclose(pooled[0, 0, 0, 0, 0], x[0, 0].mean())


def test_se_block_present_when_enabled():
    net = UNet(wnet_spec(depth=1, base_channels=2, se=True))
    assert sum("SEBlock" in line for line in net.describe()) == 3  # enc0, bottleneck, dec0


def test_channels_double_per_level():
    assert UNet(UNetSpec(depth=3, base_channels=8)).channels == [8, 16, 32, 64]


def test_indivisible_dims_rejected_before_arithmetic():
    with pytest.raises(nn.ShapeError):
        build_unet(UNetSpec(depth=2), (4, 6, 8))
    net = UNet(UNetSpec(depth=2))
    with pytest.raises(nn.ShapeError):
        net.forward(np.zeros((1, 1, 4, 4, 6)))
    with pytest.raises(nn.ShapeError):
        net.forward(np.zeros((1, 2, 4, 4, 4)))


def test_fully_convolutional_doubling_dims():
    net = UNet(wnet_spec(depth=2, base_channels=2), np.random.default_rng(0))
    before = [p.shape for p in net.params()]
    for shape in [(4, 4, 4), (8, 8, 8), (8, 16, 4)]:
        assert net.forward(np.zeros((1, 1) + shape, dtype=np.float32)).shape == (1, 1) + shape
    assert [p.shape for p in net.params()] == before


def test_unique_param_names():
    net = UNet(tnet_spec(depth=3, base_channels=4, se=True))
    names = [p.name for p in net.params()]
    assert len(names) == len(set(names))


@pytest.mark.parametrize("seed", range(3))
def test_unet_gradients(seed):
    r = check_unet(wnet_spec(depth=2, base_channels=2, se=True), (4, 4, 4), seed)
    assert r.worst < 1e-4, r.errors


def test_cascade_loss_gradients():
    r = check_cascade(0, se=True)
    assert r.worst < 1e-4, r.errors


# -- cascade ----------------------------------------------------------------

def test_zero_bundle_maps_are_half():
    b = zero_bundle()
    img = scalar_volume(np.random.default_rng(0).normal(size=(4, 8, 8)))
    for m in cascade_forward(img, b):
        assert np.all(m.data == 0.5)


def test_tnet_second_channel_is_stitched_wnet_output():
    b = make_bundle((4, 8, 8), (2, 4, 4), (4, 4, 4), (2, 2, 2), depth=1, base_channels=2, seed=3)
    img = scalar_volume(np.random.default_rng(1).normal(size=(4, 8, 8)))
    trace = {}
    whole, tumor, loc = cascade_forward(img, b, trace)
    np.testing.assert_array_equal(trace["tnet_input"][1], whole.data)
    np.testing.assert_array_equal(trace["tnet_input"][0], img.data)
    # stitched W-Net output by hand
    g = PatchGrid((4, 8, 8), (4, 4, 4), (2, 2, 2))
    acc = np.zeros((4, 8, 8))
    cnt = np.zeros((4, 8, 8))
    for o in g.origins:
        sl = g.slices(o)
        acc[sl] += b.wnet.forward(img.data[sl][None, None])[0, 0]
        cnt[sl] += 1
    np.testing.assert_allclose(whole.data, acc / cnt, atol=1e-6)
    assert loc.shape == (2, 4, 4)


@settings(max_examples=10, deadline=None)
@given(st.integers(0, 2 ** 31))
def test_cascade_outputs_bounded(seed):
    rng = np.random.default_rng(seed)
    b = make_bundle((4, 8, 8), (2, 4, 4), (4, 4, 4), (2, 2, 2), depth=1, base_channels=2, seed=seed)
    for net in b.networks().values():
        for p in net.params():
            p.value += rng.normal(size=p.shape).astype(p.value.dtype)
    img = scalar_volume(rng.normal(size=(4, 8, 8)) * 10)
    for m in cascade_forward(img, b):
        assert m.data.min() >= 0 and m.data.max() <= 1


def test_bundle_channel_validation():
    with pytest.raises(ValueError):
        CascadeBundle(UNet(lnet_spec(depth=1)), UNet(wnet_spec(depth=1)), UNet(wnet_spec(depth=1)),
                      (2, 2, 2), (2, 2, 2), (0, 0, 0))


def test_bundle_save_load_roundtrip(tmp_path):
    b = make_bundle((4, 8, 8), (2, 4, 4), (4, 4, 4), (2, 2, 2), depth=2, lnet_depth=1, base_channels=2,
                    se=True, seed=5)
    save_bundle(b, tmp_path / "b.mpar")
    back = load_bundle(tmp_path / "b.mpar")
    assert back.patch_shape == b.patch_shape and back.lnet_shape == b.lnet_shape
    assert back.wnet.spec == b.wnet.spec and back.lnet.spec.depth == 1
    img = scalar_volume(np.random.default_rng(0).normal(size=(4, 8, 8)))
    for m1, m2 in zip(cascade_forward(img, b), cascade_forward(img, back)):
        assert m1.data.tobytes() == m2.data.tobytes()


def test_bundle_load_detects_mismatch(tmp_path):
    b = make_bundle((4, 8, 8), (2, 4, 4), (4, 4, 4), (2, 2, 2), depth=1, base_channels=2, seed=0)
    save_bundle(b, tmp_path / "b.mpar")
    params, arch = load_params(tmp_path / "b.mpar")
    params["wnet.head.weight"] = np.zeros((1, 3, 3, 3, 3), dtype=np.float32)
    save_params(params, tmp_path / "bad.mpar", arch)
    with pytest.raises(ArchitectureMismatch) as e:
        load_bundle(tmp_path / "bad.mpar")
    assert e.value.block == "head.weight"


def test_arch_text_roundtrip():
    b = zero_bundle(depth=1, base=2)
    specs, geo = parse_arch_text(bundle_arch_text(b))
    assert specs["tnet"] == b.tnet.spec
    assert geo == {"lnet_shape": (2, 4, 4), "patch_shape": (4, 4, 4), "overlap": (2, 2, 2)}
