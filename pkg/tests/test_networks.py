import numpy as np
import pytest

from pcaseg.errors import ConfigurationError
from pcaseg.networks import (DESK_PATCH_LAYERS, PAPER_PATCH_LAYERS, ConvLayer, DiscriminatorSpec,
                             SegmenterSpec, build_discriminator, build_segmenter, load_checkpoint,
                             output_geometry, parse_layers, receptive_field, save_checkpoint)
from pcaseg.numcore import RngStream, Tensor


def rand_input(shape, seed=0):
    return Tensor(RngStream(seed).uniform(0, 1, shape))


def test_paper_geometry_anchors():
    spec = DiscriminatorSpec.paper()
    assert receptive_field(spec) == 22
    assert output_geometry(spec, (256, 256)) == (32, 32)
    assert output_geometry(spec, (64, 64)) == (8, 8)


def test_paper_spec_forward_matches_geometry():
    D = build_discriminator(DiscriminatorSpec.paper(), RngStream(0))
    out = D(rand_input((1, 4, 64, 64)))
    assert out.confidence.shape == (1, 1, 8, 8)
    assert out.features.shape == (1, 64, 16, 16)


def test_receptive_field_small_cases():
    assert receptive_field(DiscriminatorSpec("pixel", ((1, 1, 1, 0),))) == 1
    assert receptive_field(DiscriminatorSpec("patch", ((8, 3, 1, 1), (1, 3, 1, 1)))) == 5
    assert receptive_field(DiscriminatorSpec.desk("patch")) == 10


def test_desk_granularity_outputs():
    z = rand_input((2, 4, 32, 32))
    shapes = {}
    for g in ("image", "patch", "pixel"):
        D = build_discriminator(DiscriminatorSpec.desk(g), RngStream(1))
        out = D(z)
        shapes[g] = out.confidence.shape
        c = out.confidence.data
        assert np.all((c > 0) & (c < 1))
        assert out.confidence.shape[2:] == output_geometry(D.spec, (32, 32))
    assert shapes == {"image": (2, 1, 1, 1), "patch": (2, 1, 8, 8), "pixel": (2, 1, 32, 32)}


def _analytic_cover(spec, hw, pixel):
    """Output cells whose analytic input window contains ``pixel``."""
    jump, offset = 1, 0
    for layer in spec.layers:
        offset -= layer.pad * jump
        jump *= layer.stride
    rf = receptive_field(spec)
    oh, ow = output_geometry(spec, hw)
    cells = set()
    for u in range(oh):
        for v in range(ow):
            r0, c0 = u * jump + offset, v * jump + offset
            if r0 <= pixel[0] < r0 + rf and c0 <= pixel[1] < c0 + rf:
                cells.add((u, v))
    return cells


@pytest.mark.parametrize("layers", [DESK_PATCH_LAYERS, ((8, 3, 1, 1), (1, 3, 1, 1)), ((8, 4, 2, 1), (1, 3, 1, 0))])
def test_empirical_receptive_field_matches_analytic(layers):
    spec = DiscriminatorSpec("patch", layers, 0.2, 2)
    D = build_discriminator(spec, RngStream(5))
    hw = (16, 16)
    z = rand_input((1, 2, *hw), seed=6)
    base = D(z).logits.data[0, 0]
    for pixel in [(0, 0), (5, 9), (15, 15), (8, 3)]:
        pert = z.data.copy()
        pert[0, :, pixel[0], pixel[1]] += 1.0
        changed = np.argwhere(D(Tensor(pert)).logits.data[0, 0] != base)
        assert set(map(tuple, changed.tolist())) == _analytic_cover(spec, hw, pixel)


def test_discriminator_spec_errors():
    with pytest.raises(ConfigurationError):
        build_discriminator(DiscriminatorSpec("patch", ((8, 4, 2, 1), (2, 1, 1, 0))), RngStream(0))
    with pytest.raises(ConfigurationError):
        build_discriminator(DiscriminatorSpec("pixel", ((8, 3, 1, 1), (1, 1, 1, 0))), RngStream(0))
    with pytest.raises(ConfigurationError):
        DiscriminatorSpec.desk("voxel")
    with pytest.raises(ConfigurationError):
        output_geometry(DiscriminatorSpec.paper(), (4, 4))


def test_parse_layers():
    assert parse_layers("32:4:2:1,64:4:2:1,1:4:2:1") == PAPER_PATCH_LAYERS
    assert parse_layers(" 1:1:1:0 ") == (ConvLayer(1, 1, 1, 0),)
    for bad in ("32:4:2", "a:4:2:1"):
        with pytest.raises(ConfigurationError):
            parse_layers(bad)


def _unet_param_count(cin, C, depth, base):
    ch = [base * 2 ** i for i in range(depth + 1)]

    def conv(ci, co, k=3):
        return co * ci * k * k + co

    n, prev = 0, cin
    for i in range(depth):
        n += conv(prev, ch[i]) + conv(ch[i], ch[i])
        prev = ch[i]
    n += conv(ch[depth - 1], ch[depth]) + conv(ch[depth], ch[depth])
    for i in range(depth):
        n += conv(ch[i + 1] + ch[i], ch[i]) + conv(ch[i], ch[i])
    return n + conv(ch[0], C, 1)


@pytest.mark.parametrize("depth,base", [(2, 8), (2, 4), (3, 8), (2, 16)])
def test_segmenter_parameter_count(depth, base):
    S = build_segmenter(SegmenterSpec(1, 4, depth, base), RngStream(0))
    assert S.num_parameters() == _unet_param_count(1, 4, depth, base)


def test_doubling_width_roughly_quadruples_parameters():
    small = build_segmenter(SegmenterSpec(base_channels=8), RngStream(0)).num_parameters()
    large = build_segmenter(SegmenterSpec(base_channels=16), RngStream(0)).num_parameters()
    assert 3.5 < large / small < 4.1


def test_segmenter_outputs_distribution():
    S = build_segmenter(SegmenterSpec(), RngStream(2))
    p = S(rand_input((3, 1, 32, 32))).data
    assert p.shape == (3, 4, 32, 32)
    assert np.all(p >= 0)
    assert np.allclose(p.sum(axis=1), 1.0, atol=1e-9)
    z = S(Tensor(np.zeros((1, 1, 32, 32)))).data
    assert np.all(np.isfinite(z))


def test_segmenter_input_errors():
    S = build_segmenter(SegmenterSpec(), RngStream(2))
    with pytest.raises(ConfigurationError):
        S(rand_input((1, 1, 30, 30)))
    with pytest.raises(ConfigurationError):
        S(rand_input((1, 2, 32, 32)))
    for bad in (SegmenterSpec(depth=1), SegmenterSpec(base_channels=2), SegmenterSpec(num_classes=1)):
        with pytest.raises(ConfigurationError):
            build_segmenter(bad, RngStream(0))


def test_initialization_is_a_pure_function_of_the_stream():
    a = build_segmenter(SegmenterSpec(), RngStream(9)).snapshot()
    b = build_segmenter(SegmenterSpec(), RngStream(9)).snapshot()
    assert all(np.array_equal(a[k], b[k]) for k in a)


@pytest.mark.parametrize("state_factory", [
    lambda: build_segmenter(SegmenterSpec(), RngStream(3)),
    lambda: build_discriminator(DiscriminatorSpec.desk("image"), RngStream(4)),
    lambda: build_discriminator(DiscriminatorSpec.paper(), RngStream(4)),
])
def test_checkpoint_round_trip_is_bit_exact(tmp_path, state_factory):
    state = state_factory()
    path = tmp_path / "net.bin"
    save_checkpoint(state, path)
    back = load_checkpoint(path)
    assert back.spec == state.spec
    assert list(back.params) == list(state.params)
    for k in state.params:
        assert back.params[k].data.tobytes() == state.params[k].data.tobytes()


def test_checkpoint_rejects_other_files(tmp_path):
    path = tmp_path / "x.bin"
    path.write_text("hello\n")
    with pytest.raises(ConfigurationError):
        load_checkpoint(path)


def test_clone_is_independent():
    S = build_segmenter(SegmenterSpec(), RngStream(0))
    C = S.clone()
    C.params["head.b"].data[:] = 7.0
    assert not np.any(S.params["head.b"].data == 7.0)
