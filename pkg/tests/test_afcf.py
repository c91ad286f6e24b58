import numpy as np
import pytest

from afcf3d import ops
from afcf3d.afcf import (afcf_forward, build_afcf, channel_reduce, cross_fuse, resample_adjacent,
                         se4d, se_width)
from afcf3d.config import ModelConfig
from afcf3d.errors import ConfigurationError
from afcf3d.gradcheck import grad_check
from afcf3d.params import ParamStore
from afcf3d.tensor import Tensor

F64 = np.float64
CFG = ModelConfig()


def afcf_store(cfg=CFG, seed=0):
    store = ParamStore()
    build_afcf(store, cfg, np.random.default_rng(seed), F64)
    return store


def stage_feats(rng, cfg=CFG, size=16, n=1):
    t = cfg.frames
    return [rng.standard_normal((n, c, t, size >> i, size >> i)) for i, c in enumerate(cfg.stage_channels)]


def test_channel_reduce_shapes_and_oracle(rng):
    store = afcf_store()
    feats = stage_feats(rng, size=128)
    feats[4] = rng.standard_normal((1, 512, 2, 8, 8))
    out = channel_reduce(store, [Tensor(f) for f in feats])
    assert out[4].shape == (1, 32, 2, 8, 8)
    assert all(o.shape[1] == 32 for o in out)
    w, b = store["afcf.reduce4.w"].data[:, :, 0, 0, 0], store["afcf.reduce4.b"].data
    f = feats[4]
    for idx in [(0, 0, 0), (1, 3, 5), (0, 7, 7)]:
        t, p, q = idx
        want = w @ f[0, :, t, p, q] + b
        np.testing.assert_allclose(out[4].data[0, :, t, p, q], want, rtol=0, atol=1e-9)
    with pytest.raises(ConfigurationError):
        channel_reduce(store, out[:4])


def test_identity_embedding_reduce(rng):
    x = rng.standard_normal((1, 32, 2, 4, 4))
    out = ops.conv3d(x, np.eye(32).reshape(32, 32, 1, 1, 1), np.zeros(32)).data
    assert np.array_equal(out, x)


def test_resample_adjacent_boundaries(rng):
    fhat = [Tensor(rng.standard_normal((1, 32, 2, 64 >> i, 64 >> i))) for i in range(5)]
    prev, nxt = resample_adjacent(fhat, 0)
    assert prev is None and nxt.shape == fhat[0].shape
    prev, nxt = resample_adjacent(fhat, 4)
    assert nxt is None and prev.shape == fhat[4].shape
    prev, nxt = resample_adjacent(fhat, 2)
    assert fhat[1].shape == (1, 32, 2, 32, 32) and fhat[3].shape == (1, 32, 2, 8, 8)
    assert prev.shape == nxt.shape == (1, 32, 2, 16, 16)
    with pytest.raises(ConfigurationError):
        resample_adjacent(fhat, 5)


def test_cross_fuse_zero_conv_is_identity(rng):
    store = afcf_store()
    for i in range(5):
        store[f"afcf.fuse{i}.w"].data[...] = 0
        store[f"afcf.fuse{i}.b"].data[...] = 0
    fhat = rng.standard_normal((1, 32, 2, 8, 8))
    prev, nxt = rng.standard_normal((2, 1, 32, 2, 8, 8))
    assert np.array_equal(cross_fuse(store, CFG, 2, Tensor(fhat), Tensor(prev), Tensor(nxt)).data, fhat)


@pytest.mark.parametrize("i,branches", [(0, ("cur", "next")), (2, ("prev", "cur", "next")), (4, ("prev", "cur"))])
def test_cross_fuse_sums_present_branches(i, branches, rng):
    store = afcf_store()
    cfg = CFG
    fhat = [Tensor(f) for f in rng.standard_normal((5, 1, 32, 2, 8, 8))]
    prev = fhat[i - 1] if i >= 1 else None
    nxt = fhat[i + 1] if i <= 3 else None
    got = cross_fuse(store, cfg, i, fhat[i], prev, nxt).data
    parts = {"prev": prev, "cur": fhat[i], "next": nxt}
    s = sum(parts[b].data for b in branches)
    y = ops.conv3d(s, store[f"afcf.fuse{i}.w"], store[f"afcf.fuse{i}.b"], padding=1)
    want = fhat[i].data + se4d(store, f"afcf.se{i}", y).data
    np.testing.assert_allclose(got, want, rtol=0, atol=1e-12)


def test_cross_fuse_shape_mismatch(rng):
    store = afcf_store()
    with pytest.raises(ConfigurationError):
        cross_fuse(store, CFG, 1, Tensor(rng.standard_normal((1, 32, 2, 8, 8))),
                   Tensor(rng.standard_normal((1, 32, 2, 4, 4))))


def test_perturbing_deeper_level_changes_fused_output(rng):
    store = afcf_store()
    feats = stage_feats(rng, size=32)
    _, af = afcf_forward(store, CFG, [Tensor(f) for f in feats])
    feats[3] = feats[3] + rng.standard_normal(feats[3].shape)
    _, af2 = afcf_forward(store, CFG, [Tensor(f) for f in feats])
    assert not np.allclose(af[2].data, af2[2].data)
    assert np.array_equal(af[0].data, af2[0].data)
    assert all(a.shape == (1, 32, 2, 32 >> i, 32 >> i) for i, a in enumerate(af))


def test_se_width_and_shapes(rng):
    assert se_width(32, 2, 16) == 4
    assert se_width(3, 1, 16) == 1
    store = afcf_store()
    assert store["afcf.se0.w_down"].shape == (4, 64)
    f = rng.standard_normal((1, 32, 2, 16, 16))
    out = se4d(store, "afcf.se0", Tensor(f)).data
    assert out.shape == f.shape
    nz = f != 0
    assert np.all(np.abs(out[nz]) < np.abs(f[nz]))


def test_se_identity_gate_roundtrip(rng):
    store = afcf_store()
    store["afcf.se1.w_up"].data[...] = 0
    store["afcf.se1.b_up"].data[...] = 50.0  # sigmoid saturates to exactly 1.0
    f = rng.standard_normal((2, 32, 2, 4, 4))
    assert np.array_equal(se4d(store, "afcf.se1", Tensor(f)).data, f)


def test_se_spatial_permutation_equivariance(rng):
    store = afcf_store()
    f = rng.standard_normal((1, 32, 2, 4, 4))
    perm = rng.permutation(16)
    permute = lambda a: a.reshape(a.shape[:3] + (16,))[..., perm].reshape(a.shape)
    a = permute(se4d(store, "afcf.se2", Tensor(f)).data)
    b = se4d(store, "afcf.se2", Tensor(permute(f))).data
    np.testing.assert_allclose(a, b, rtol=0, atol=1e-12)


def test_ablation_switches(rng):
    f = rng.standard_normal((1, 32, 2, 4, 4))
    plain = ModelConfig(afcf=False, se=False)
    store = afcf_store(plain)
    assert not any("fuse" in n or ".se" in n for n in store.names())
    assert np.array_equal(cross_fuse(store, plain, 1, Tensor(f)).data, f)
    se_only = ModelConfig(afcf=False)
    store = afcf_store(se_only)
    np.testing.assert_allclose(cross_fuse(store, se_only, 1, Tensor(f)).data,
                               se4d(store, "afcf.se1", Tensor(f)).data)
    no_res = ModelConfig(afcf_residual=False)
    store = afcf_store(no_res)
    with_res = cross_fuse(afcf_store(CFG), CFG, 1, Tensor(f)).data
    assert not np.allclose(cross_fuse(store, no_res, 1, Tensor(f)).data, with_res)


def test_afcf_end_to_end_gradients(rng):
    cfg = ModelConfig(stage_channels=(3, 3, 4, 4, 5), reduce_channels=4, se_ratio=4)
    store = afcf_store(cfg)
    feats = [Tensor(f, requires_grad=True) for f in stage_feats(rng, cfg, size=16)]
    params = [store[n] for n in store.names()]
    _, af = afcf_forward(store, cfg, feats)
    projs = [rng.standard_normal(a.shape) for a in af]

    # parameters are perturbed in place, so the closure reads them from the store
    def loss(*args):
        _, out = afcf_forward(store, cfg, list(args[:5]))
        total = ops.sum_all(ops.mul(out[0], projs[0]))
        for a, pr in zip(out[1:], projs[1:]):
            total = ops.add(total, ops.sum_all(ops.mul(a, pr)))
        return total

    report = grad_check(loss, feats + params, tolerance=1e-5, samples=6, rng=1)
    assert report.checked > 100
