import numpy as np
import pytest

from afcf3d import ops
from afcf3d.config import ModelConfig
from afcf3d.decoder import build_decoder, decode, fr_block, fullscale_concat, level_shapes, predict_head
from afcf3d.errors import ConfigurationError, SequencingError
from afcf3d.gradcheck import grad_check
from afcf3d.model import build_model, count_complexity, forward
from afcf3d.params import ParamStore
from afcf3d.tensor import Tensor

F64 = np.float64
CFG = ModelConfig()
MICRO = ModelConfig(stage_channels=(2, 2, 2, 2, 2), reduce_channels=2, se_ratio=16)


def decoder_store(cfg=CFG, seed=0):
    store = ParamStore()
    build_decoder(store, cfg, np.random.default_rng(seed), F64)
    return store


def const_levels(size=32, t=2, base=1.0):
    return [Tensor(np.full((1, 32, t, size >> i, size >> i), base + i)) for i in range(5)]


def test_cf3_follows_level_order():
    af = const_levels()
    cf = fullscale_concat(CFG, af, {}, 3).data
    assert cf.shape == (1, 32, 10, 4, 4)
    for j in range(5):
        assert np.all(cf[:, :, 2 * j:2 * j + 2] == 1.0 + j)


def test_cf0_uses_decoded_deeper_levels():
    af = const_levels()
    dec = {j: Tensor(np.full((1, 32, 2, 32 >> j, 32 >> j), 10.0 + j)) for j in (1, 2, 3)}
    cf = fullscale_concat(CFG, af, dec, 0).data
    assert cf.shape == (1, 32, 10, 32, 32)
    want = [1.0, 11.0, 12.0, 13.0, 5.0]
    for j, v in enumerate(want):
        np.testing.assert_allclose(cf[:, :, 2 * j:2 * j + 2], v, atol=1e-12)


def test_cf_requires_deeper_levels_first():
    with pytest.raises(SequencingError):
        fullscale_concat(CFG, const_levels(), {}, 1)


def test_cf_downsampling_is_repeated_maxpool(rng):
    af = [Tensor(rng.standard_normal((1, 32, 2, 32 >> i, 32 >> i))) for i in range(5)]
    cf = fullscale_concat(CFG, af, {}, 3).data
    x = af[0].data.reshape(1, 32, 2, 4, 8, 4, 8)
    np.testing.assert_array_equal(cf[:, :, 0:2], x.max(axis=(4, 6)))


def test_fr_block_time_trajectory(rng):
    store = decoder_store()
    y = Tensor(rng.standard_normal((1, 32, 10, 6, 6)))
    ts = []
    from afcf3d.decoder import FR_LAYERS_3D
    for j, (_, stride, pad) in enumerate(FR_LAYERS_3D):
        y = ops.conv3d(y, store[f"dec0.fr{j}.w"], store[f"dec0.fr{j}.b"], stride, pad)
        ts.append(y.shape[2])
        assert y.shape[3:] == (6, 6)
    assert ts == [10, 4, 2]
    out = fr_block(store, CFG, 0, Tensor(rng.standard_normal((1, 32, 10, 6, 6))), True)
    assert out.shape == (1, 32, 2, 6, 6)
    with pytest.raises(ConfigurationError):
        fr_block(store, CFG, 0, Tensor(rng.standard_normal((1, 32, 8, 6, 6))), True)


def test_fr_conv_of_zeros_is_zero():
    store = decoder_store()
    z = np.zeros((1, 32, 10, 4, 4))
    out = ops.conv3d(z, store["dec1.fr0.w"], store["dec1.fr0.b"], 1, 1).data
    assert np.array_equal(out, np.zeros_like(out))


def test_head_shape_range_and_zero_logits(rng):
    store = decoder_store()
    p = predict_head(store, Tensor(rng.standard_normal((2, 32, 2, 16, 16)))).data
    assert p.shape == (2, 32, 32)
    assert np.all((p > 0) & (p < 1))
    store["head.w"].data[...] = 0
    p0 = predict_head(store, Tensor(rng.standard_normal((1, 32, 2, 16, 16)))).data
    assert np.all(p0 == 0.5)


def test_decode_trace_shapes(rng):
    store = decoder_store()
    af = [Tensor(rng.standard_normal((1, 32, 2, 16 >> i, 16 >> i))) for i in range(5)]
    trace = {}
    p = decode(store, CFG, af, True, trace)
    assert p.shape == (1, 32, 32)
    assert all(s[2] == 10 for s in trace["cf"].values())
    assert all(s[2] == 2 for s in trace["f"].values())
    assert level_shapes(32, 32) == [(16, 16), (8, 8), (4, 4), (2, 2), (1, 1)]


def test_forward_small_input_and_determinism(rng):
    model = build_model(ModelConfig(stage_channels=(8, 8, 8, 16, 16)), dtype=F64)
    i1, i2 = rng.random((2, 2, 3, 1, 32, 32))
    trace = {}
    p = forward(model.params, model.config, i1, i2, train=False, trace=trace)
    assert p.shape == (2, 32, 32)
    assert [s[3] for s in trace["encoder"]] == [16, 8, 4, 2, 1]
    again = forward(model.params, model.config, i1, i2, train=False).data
    assert p.data.tobytes() == again.tobytes()


def test_gradient_reaches_every_parameter(rng):
    # eval-mode statistics: under batch statistics a bias feeding a
    # normalization has an exactly zero gradient by construction
    model = build_model(ModelConfig(), dtype=np.float32)
    i1, i2 = rng.random((2, 1, 3, 1, 32, 32)).astype(np.float32)
    p = forward(model.params, model.config, i1, i2, train=False)
    t = (rng.random(p.shape) > 0.5).astype(np.float32)
    from afcf3d.losses import hybrid_loss

    hybrid_loss(p, t).backward()
    dead = [n for n, e in model.params.entries.items() if e.tensor.grad is None or not np.any(e.tensor.grad)]
    assert dead == []


def test_end_to_end_micro_gradients(rng):
    """Whole network in double precision on 32x32 pairs, two channels per stage."""
    model = build_model(MICRO, dtype=F64, seed=3)
    store = model.params
    i1 = Tensor(rng.random((2, 3, 1, 32, 32)), requires_grad=True)
    i2 = Tensor(rng.random((2, 3, 1, 32, 32)), requires_grad=True)
    t = (rng.random((2, 32, 32)) > 0.5).astype(F64)
    from afcf3d.losses import hybrid_loss

    names = store.names()
    params = [store[n] for n in names]

    def loss(a, b, *_):
        return hybrid_loss(forward(store, MICRO, a, b, train=True), t)

    # two channels per stage leave ReLU kinks within the default step of many
    # coordinates; the checker shrinks the step until no ReLU mask or max-pool
    # winner flips and then applies the full tolerance
    report = grad_check(loss, [i1, i2] + params, tolerance=1e-4, samples=2, rng=5, skip_nonsmooth=True)
    drawn = sum(min(2, x.data.size) for x in [i1, i2] + params)
    assert report.checked + len(report.nonsmooth) == drawn
    assert len(report.nonsmooth) <= drawn // 50


def test_two_dimensional_model(rng):
    cfg = ModelConfig(stage_channels=(8, 8, 8, 16, 16), mode="2d")
    model = build_model(cfg, dtype=F64)
    assert model.params["dec0.fr0.w"].shape == (32, 160, 1, 3, 3)
    assert model.params["head.w"].shape == (1, 32, 1, 1, 1)
    trace = {}
    p = forward(model.params, cfg, *rng.random((2, 1, 3, 1, 32, 32)), trace=trace)
    assert p.shape == (1, 32, 32)
    assert all(s[1] == 160 and s[2] == 1 for s in trace["cf"].values())


def test_decoder_se_switch(rng):
    cfg = ModelConfig(stage_channels=(8, 8, 8, 16, 16), decoder_se=True)
    model = build_model(cfg, dtype=F64)
    assert "dec0.se.w_down" in model.params
    assert forward(model.params, cfg, *rng.random((2, 1, 3, 1, 32, 32))).shape == (1, 32, 32)


def test_complexity_scaling():
    model = build_model(ModelConfig())
    p64, f64 = count_complexity(model, 64)
    p32, f32 = count_complexity(model, 32)
    assert p64 == p32
    assert 3.6 < f64 / f32 < 4.4
