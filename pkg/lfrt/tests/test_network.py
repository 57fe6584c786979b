import numpy as np
import pytest
from numpy.testing import assert_allclose, assert_array_equal
from scipy import special

from lfrt import tensor as T
from lfrt.errors import ConfigError, FormatError, ShapeError
from lfrt.lightfield import LightField, bilinear_matrix
from lfrt.network import (ARAM, AngularBlock, LRTNet, ModelConfig, ResBlock, SpatialBlock, angular_block_forward,
                          aram_forward, build_model, count_parameters, load_checkpoint, lrt_forward,
                          read_checkpoint, save_checkpoint, spatial_block_forward, spatial_resblock_forward)

EPS = 1e-5


@pytest.fixture(scope='module')
def toy():
    return build_model('toy')


def layer_norm(x, gamma, beta):
    mu = x.mean(axis=-1, keepdims=True)
    var = ((x - mu) ** 2).mean(axis=-1, keepdims=True)
    return (x - mu) / np.sqrt(var + EPS) * gamma + beta


def gelu(x):
    return 0.5 * x * (1.0 + special.erf(x / np.sqrt(2.0)))


def softmax(x):
    e = np.exp(x - x.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def test_default_parameter_count():
    model = build_model('default')
    assert count_parameters(model) == 1634959
    assert 1.0e6 <= model.count_parameters() <= 2.0e6


def test_config_validation():
    with pytest.raises(ConfigError):
        ModelConfig(widths=(16, 32, 64)).validate()
    with pytest.raises(ConfigError):
        ModelConfig(widths=(6, 32, 64, 128)).validate()
    with pytest.raises(ConfigError):
        ModelConfig.preset('huge')
    config = ModelConfig.preset('toy', seed=3)
    assert ModelConfig.from_dict(config.to_dict()) == config


def test_resblock(rng):
    block = ResBlock(4, np.random.default_rng(0))
    x = T.Tensor(rng.standard_normal((4, 8, 8)))
    assert spatial_resblock_forward(x, block).shape == (4, 8, 8)


def test_angular_block_dense_oracle(rng):
    block = AngularBlock(4, 1, 2, 3, np.random.default_rng(1))
    features = rng.standard_normal((2, 2, 4, 2, 2))
    out = angular_block_forward(T.Tensor(features), block).data

    flat = features.reshape(4, -1)
    tokens = layer_norm(flat, block.norms[0].gamma.data, block.norms[0].beta.data)
    q = tokens @ block.queries[0].weight.data
    k = tokens @ block.keys[0].weight.data
    weights = softmax(q @ k.T / np.sqrt(3))
    mixed = (weights @ flat).reshape(4, 4, 2, 2)
    fused = mixed.transpose(0, 2, 3, 1) @ block.fuse.weight.data + block.fuse.bias.data
    expected = features.reshape(4, 4, 2, 2) + fused.transpose(0, 3, 1, 2)
    assert_allclose(out, expected.reshape(2, 2, 4, 2, 2), atol=1e-10)


def test_angular_block_symmetry(rng):
    block = AngularBlock(32, 4, 4, 32, np.random.default_rng(2))
    features = rng.standard_normal((7, 7, 32, 16, 16))
    out = angular_block_forward(T.Tensor(features), block).data
    assert out.shape == (7, 7, 32, 16, 16)

    small = AngularBlock(8, 4, 4, 8, np.random.default_rng(2))
    x = rng.standard_normal((6, 8, 8, 8))
    perm = rng.permutation(6)
    assert_allclose(small(T.Tensor(x[perm])).data, small(T.Tensor(x)).data[perm], atol=1e-10)

    same = np.broadcast_to(rng.standard_normal((8, 8, 8)), (6, 8, 8, 8)).copy()
    out = small(T.Tensor(same)).data
    assert_allclose(out, np.broadcast_to(out[0], out.shape), atol=1e-12)


def naive_group_attention(block, index, x):
    """Per-window dense evaluation of one spatial attention group."""
    n, t = block._groups[index]
    b, c, h, w = x.shape
    half, quarter = c // 2, c // 4
    normed = layer_norm(x.transpose(0, 2, 3, 1), block.norm.gamma.data, block.norm.beta.data)
    q_all = normed @ block.queries[index].weight.data + block.queries[index].bias.data
    conv = block.reducers[index]
    size = h // n
    out = np.zeros((b, h, w, half))
    for bi in range(b):
        for wy in range(n):
            for wx in range(n):
                ys, xs = slice(wy * size, (wy + 1) * size), slice(wx * size, (wx + 1) * size)
                window = normed[bi, ys, xs]
                m = size // t
                reduced = np.zeros((m, m, quarter))
                for i in range(m):
                    for j in range(m):
                        patch = window[i * t:(i + 1) * t, j * t:(j + 1) * t]
                        reduced[i, j] = np.einsum('yxc,ocyx->o', patch, conv.weight.data) + conv.bias.data
                tokens = gelu(layer_norm(reduced.reshape(-1, quarter), block.reducer_norms[index].gamma.data,
                                         block.reducer_norms[index].beta.data))
                keys = tokens @ block.keys[index].weight.data + block.keys[index].bias.data
                values = tokens @ block.values[index].weight.data + block.values[index].bias.data
                q = q_all[bi, ys, xs].reshape(-1, half)
                attended = softmax(q @ keys.T / np.sqrt(half)) @ values
                out[bi, ys, xs] = attended.reshape(size, size, half)
    return out.transpose(0, 3, 1, 2)


def test_spatial_block_window_oracle(rng):
    block = SpatialBlock(8, ((1, 4), (2, 4), (4, 2), (8, 2)), 2, 3, np.random.default_rng(3))
    x = rng.standard_normal((1, 8, 16, 16))
    normed = T.Tensor(layer_norm(x.transpose(0, 2, 3, 1), block.norm.gamma.data, block.norm.beta.data)
                      .transpose(0, 3, 1, 2))
    for index in range(4):
        got = block.group_attention(index, normed).data
        assert_allclose(got, naive_group_attention(block, index, x), atol=1e-6)


def test_spatial_block_shape_and_constant_input(rng):
    block = SpatialBlock(32, ((1, 4), (2, 4), (4, 2), (8, 2)), 2, 3, np.random.default_rng(4))
    x = T.Tensor(rng.standard_normal((32, 16, 16)))
    assert spatial_block_forward(x, block).shape == (32, 16, 16)

    constant = np.broadcast_to(rng.standard_normal((32, 1, 1)), (32, 16, 16)).copy()
    out = spatial_block_forward(T.Tensor(constant), block).data
    assert_allclose(out, np.broadcast_to(out[:, :1, :1], out.shape), atol=1e-10)


def test_spatial_reduction_folds_small_windows(rng):
    block = SpatialBlock(8, ((8, 2),), 2, 3, np.random.default_rng(5))
    windows = T.Tensor(rng.standard_normal((64, 8, 1, 1)))
    folded = block.reduce(0, windows, 2).data
    upsampled = T.Tensor(np.repeat(np.repeat(windows.data, 2, axis=2), 2, axis=3))
    assert_allclose(folded, block.reducers[0](upsampled).data, atol=1e-12)


def test_aram(rng):
    aram = ARAM(2, 3, 40.0, np.random.default_rng(6))
    illum = rng.uniform(0.01, 1, (4, 1, 4, 4))
    l_in = rng.uniform(0, 1, (4, 3, 4, 4))
    alpha, l_adj = aram_forward(T.Tensor(illum), T.Tensor(l_in), aram)
    alpha = float(alpha.data.reshape(()))
    assert 1.0 <= alpha <= 40.0
    assert_allclose(l_adj.data.mean(), alpha * l_in.mean(), rtol=1e-12)

    pooled = illum.reshape(4, 2, 2, 2, 2).mean(axis=(2, 4)).reshape(4, 4).mean(axis=0, keepdims=True)
    hidden = gelu(pooled @ aram.hidden.weight.data + aram.hidden.bias.data)
    logit = hidden @ aram.out.weight.data + aram.out.bias.data
    assert_allclose(alpha, 1.0 + 39.0 * special.expit(logit[0, 0]), rtol=1e-12)


def test_forward_shapes_and_ranges(toy, scene):
    lf = LightField(scene.views[:2, :2])
    out = lrt_forward(lf, toy)
    assert out.l_out.shape == (2, 2, 3, 64, 64)
    assert out.l_re_q.shape == (2, 2, 3, 16, 16)
    assert out.r_half.shape == (2, 2, 3, 32, 32)
    assert out.illum_q.shape == (2, 2, 1, 16, 16)
    assert out.illum_q.views.min() >= 0.01 and out.illum_q.views.max() <= 1.0
    assert np.all(np.isfinite(out.l_out.views))
    assert 1.0 <= out.alpha <= toy.config.alpha_max


def test_forward_pads_odd_sizes(toy, rng):
    lf = LightField(rng.uniform(0, 1, (1, 2, 3, 40, 50)))
    out = lrt_forward(lf, toy)
    assert out.l_out.spatial_dims == (40, 50)
    assert out.l_re_q.spatial_dims == (10, 13)
    assert out.l_re_half.spatial_dims == (20, 25)


def test_forward_recomposition(toy, rng):
    x = rng.uniform(0, 1, (2, 3, 64, 64))
    with T.no_grad():
        out = toy(T.Tensor(x))
    up = lambda a: np.matmul(np.matmul(bilinear_matrix(a.shape[-2]), a), bilinear_matrix(a.shape[-1]).T)
    l_re_q = out.l_de_q.data / out.illum_q.data
    l_re_half = up(l_re_q) + out.r_half.data
    l_re = up(l_re_half) + out.r_full.data
    assert_allclose(out.l_re_q.data, l_re_q, atol=1e-6)
    assert_allclose(out.l_out.data, l_re + out.h_map.data, atol=1e-6)


def test_retinex_identity_with_unit_illumination(rng):
    model = build_model('toy')
    model.illum_head.weight.data[...] = 0.0
    model.illum_head.bias.data[...] = 50.0
    with T.no_grad():
        out = model(T.Tensor(rng.uniform(0, 1, (1, 3, 64, 64))))
    assert np.all(out.illum_q.data == 1.0)
    assert_array_equal(out.l_re_q.data, out.l_de_q.data)


def test_ablation_switches(rng):
    model = build_model('toy', use_aram=False, use_hf_head=False)
    x = rng.uniform(0, 1, (1, 3, 64, 64))
    with T.no_grad():
        out = model(T.Tensor(x))
    assert float(out.alpha.data.reshape(())) == 1.0
    assert_array_equal(out.l_adj.data, x)
    assert not np.any(out.h_map.data)
    assert model.count_parameters() < build_model('toy').count_parameters()


def test_forward_rejects_bad_shapes(toy):
    with pytest.raises(ShapeError):
        toy(T.Tensor(np.zeros((1, 3, 48, 64))))
    with pytest.raises(ShapeError):
        toy(T.Tensor(np.zeros((1, 1, 64, 64))))


def test_checkpoint_round_trip(toy, tmp_path, rng):
    filename = str(tmp_path / 'm.lrt')
    save_checkpoint(toy, filename, extra={'epoch': 3})
    header, state = read_checkpoint(filename)
    assert header['config']['widths'] == [8, 16, 32, 32]
    model, extra = load_checkpoint(filename)
    assert extra == {'epoch': 3}
    for (name, a), (_, b) in zip(toy.named_parameters(), model.named_parameters()):
        assert_array_equal(b.data, a.data.astype(np.float32), err_msg=name)

    with open(filename, 'rb') as infile:
        payload = infile.read()
    with open(filename, 'wb') as outfile:
        outfile.write(payload[:-10])
    with pytest.raises(FormatError):
        load_checkpoint(filename)
    with open(filename, 'wb') as outfile:
        outfile.write(b'NOPE' + payload[4:])
    with pytest.raises(FormatError):
        read_checkpoint(filename)


def test_model_is_seeded():
    a, b = build_model('toy', seed=7), build_model('toy', seed=7)
    for (_, pa), (_, pb) in zip(a.named_parameters(), b.named_parameters()):
        assert_array_equal(pa.data, pb.data)
