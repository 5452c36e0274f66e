import numpy as np
import pytest

from petrlite import diffarray as da
from petrlite.diffarray import Tape, backward, constant
from petrlite.errors import DimensionError, ParameterError
from petrlite.geometry import (RoI, build_frustum_grid, make_depth_bins, unproject,
                               world_coord_grid)
from petrlite.layers import Linear, make_rng
from petrlite.posenc import (MVPrior, PE3DNet, PEConfig, PositionEncoder, encode_2d_pe,
                             encode_3d_pe, encode_mv_prior, flatten_views, fuse,
                             neighbor_similarity_stats, pe_similarity_map, unflatten_views)
from petrlite.scenegen import make_ring_rig


def small_net(n_in=8, hidden=6, c=4, seed=0):
    return PE3DNet(n_in, hidden, c, make_rng(seed, "test.pe3d"))


# ---- 3D PE --------------------------------------------------------------------------

def test_identical_cells_identical_pe():
    p3d = np.random.default_rng(0).uniform(size=(1, 8, 2, 3))
    p3d[0, :, 1, 2] = p3d[0, :, 0, 0]
    pe = encode_3d_pe(p3d, small_net()).data
    np.testing.assert_array_equal(pe[0, :, 1, 2], pe[0, :, 0, 0])


def test_zero_second_layer_gives_bias():
    net = small_net()
    net.fc2.w.data[:] = 0.0
    net.fc2.b.data[:] = [1.0, -2.0, 0.5, 3.0]
    pe = encode_3d_pe(np.random.default_rng(1).uniform(size=(2, 8, 3, 3)), net).data
    np.testing.assert_array_equal(pe, np.broadcast_to(net.fc2.b.data[None, :, None, None], pe.shape))


def test_pe_matches_per_cell_loop():
    net = small_net()
    p3d = np.random.default_rng(2).uniform(size=(2, 8, 3, 4))
    pe = encode_3d_pe(p3d, net).data
    w1, b1, w2, b2 = net.fc1.w.data, net.fc1.b.data, net.fc2.w.data, net.fc2.b.data
    for n, r, c in np.ndindex(2, 3, 4):
        x = p3d[n, :, r, c]
        hidden = [max(0.0, sum(x[i] * w1[i, j] for i in range(8)) + b1[j]) for j in range(6)]
        out = [sum(hidden[j] * w2[j, k] for j in range(6)) + b2[k] for k in range(4)]
        np.testing.assert_allclose(pe[n, :, r, c], out, rtol=0, atol=1e-12)


def test_pe_commutes_with_cell_permutation():
    net = small_net()
    rng = np.random.default_rng(3)
    p3d = rng.uniform(size=(1, 8, 3, 4))
    perm = rng.permutation(12)
    flat = p3d.reshape(1, 8, 12)
    shuffled = flat[:, :, perm].reshape(1, 8, 3, 4)
    a = encode_3d_pe(p3d, net).data.reshape(1, 4, 12)[:, :, perm]
    b = encode_3d_pe(shuffled, net).data.reshape(1, 4, 12)
    np.testing.assert_array_equal(a, b)


def test_pe_channel_mismatch():
    with pytest.raises(DimensionError):
        encode_3d_pe(np.zeros((1, 12, 2, 2)), small_net())


# ---- 2D PE ---------------------------------------------------------------------------

def test_2d_pe_deterministic_and_distinct():
    a, b = encode_2d_pe(6, 6, 16), encode_2d_pe(6, 6, 16)
    assert a.tobytes() == b.tobytes()
    assert not np.array_equal(a[:, 0, 0], a[:, 0, 1])


def test_2d_pe_norms_equal_across_positions():
    pe = encode_2d_pe(5, 7, 32)
    norms = np.linalg.norm(pe, axis=0)
    np.testing.assert_allclose(norms, np.sqrt(16.0), atol=1e-9)


def test_2d_pe_layout():
    pe = encode_2d_pe(3, 4, 8)
    # first half depends on the row only, second half on the column only
    assert np.ptp(pe[:4], axis=2).max() == 0.0
    assert np.ptp(pe[4:], axis=1).max() == 0.0
    y = 1 / (3 + 1e-6) * 2 * np.pi
    np.testing.assert_allclose(pe[:2, 0, 0], [np.sin(y), np.cos(y)], atol=1e-15)


def test_2d_pe_channel_check():
    with pytest.raises(ParameterError):
        encode_2d_pe(4, 4, 6)


# ---- MV prior ---------------------------------------------------------------------------

def test_mv_prior_views_differ_and_broadcast():
    prior = MVPrior(3, 8, make_rng(0, "test.mv"))
    assert not np.array_equal(encode_mv_prior(prior, 0).data, encode_mv_prior(prior, 1).data)
    assert abs(prior.table.data.std() - 0.02) < 0.02
    rows = prior.broadcast(3, 2, 2)
    assert rows.shape == (12, 8)
    maps = constant(np.zeros((3 * 4, 8))) + rows
    np.testing.assert_array_equal(maps.data[4], prior.table.data[1])
    with pytest.raises(ParameterError):
        encode_mv_prior(prior, 3)


def test_mv_prior_learns():
    prior = MVPrior(2, 4, make_rng(0, "test.mv"))
    before = prior.table.data.copy()
    with Tape():
        backward(da.sum_(prior(1) * prior(1)))
    da.adamw_step([prior.table], [prior.table.grad], da.AdamWState(), 0.01, 0.0)
    assert not np.array_equal(prior.table.data[1], before[1])
    np.testing.assert_array_equal(prior.table.data[0], before[0])


# ---- fusion ---------------------------------------------------------------------------------

def test_fuse_add_multiply():
    rng = np.random.default_rng(4)
    f = constant(rng.normal(size=(5, 8)))
    np.testing.assert_array_equal(fuse(f, constant(np.zeros((5, 8))), "add").data, f.data)
    np.testing.assert_array_equal(fuse(f, constant(np.ones((5, 8))), "multiply").data, f.data)


def test_fuse_concat_block_matrix():
    rng = np.random.default_rng(5)
    f, pe = rng.normal(size=(5, 8)), rng.normal(size=(5, 8))
    reduce = Linear(16, 8, make_rng(0, "test.reduce"))
    out = fuse(constant(f), constant(pe), "concat", reduce).data
    w = reduce.w.data
    ref = f @ w[:8] + pe @ w[8:] + reduce.b.data
    assert out.shape == (5, 8)
    np.testing.assert_allclose(out, ref, atol=1e-12)


def test_fuse_add_is_linear():
    rng = np.random.default_rng(6)
    a, b, pe = (rng.normal(size=(4, 8)) for _ in range(3))
    lhs = fuse(constant(2 * a + 3 * b), constant(pe), "add").data
    rhs = 2 * fuse(constant(a), constant(pe), "add").data + 3 * fuse(constant(b), constant(pe), "add").data
    np.testing.assert_allclose(lhs, rhs - 4 * pe, atol=1e-12)


def test_fuse_errors():
    with pytest.raises(DimensionError):
        fuse(constant(np.ones((2, 3))), constant(np.ones((3, 3))), "add")
    with pytest.raises(ParameterError):
        fuse(constant(np.ones((2, 3))), constant(np.ones((2, 3))), "concat")
    with pytest.raises(ParameterError):
        fuse(constant(np.ones((2, 3))), constant(np.ones((2, 3))), "max")


def test_flatten_round_trip_and_order():
    x = np.arange(2 * 3 * 2 * 4, dtype=float).reshape(2, 3, 2, 4)
    tokens = flatten_views(constant(x))
    assert tokens.shape == (16, 3)
    v, r, c = 1, 1, 2
    np.testing.assert_array_equal(tokens.data[(v * 2 + r) * 4 + c], x[v, :, r, c])
    np.testing.assert_array_equal(unflatten_views(tokens, 2, 2, 4).data, x)


def test_pe_config_validation():
    assert PEConfig().pe_hidden == 256
    with pytest.raises(ParameterError):
        PEConfig(use_3d_pe=False)
    with pytest.raises(ParameterError):
        PEConfig(no_pe=True)
    PEConfig(use_3d_pe=False, no_pe=True)


def test_encoder_output_shape():
    enc = PositionEncoder(PEConfig(True, True, True, "concat", 8), 5, 12, 2, seed=0)
    f2d = constant(np.random.default_rng(7).normal(size=(2, 5, 3, 3)))
    out = enc(f2d, np.random.default_rng(8).uniform(size=(2, 12, 3, 3)))
    assert out.tokens.shape == (18, 8)
    assert out.maps().shape == (2, 8, 3, 3)


# ---- similarity ------------------------------------------------------------------------------

def test_self_similarity_and_sign():
    pe = np.random.default_rng(9).normal(size=(2, 4, 3, 3))
    pe[1, :, 2, 2] = -pe[0, :, 1, 1]
    pe[1, :, 0, 0] = 0.0
    sim = pe_similarity_map(pe, (0, 1, 1))
    assert sim.shape == (2, 3, 3)
    assert sim[0, 1, 1] == pytest.approx(1.0, abs=1e-12)
    assert sim[1, 2, 2] == pytest.approx(-1.0, abs=1e-12)
    assert sim[1, 0, 0] == 0.0
    assert np.all(np.abs(sim) <= 1.0)
    with pytest.raises(ParameterError):
        pe_similarity_map(pe, (2, 0, 0))


def test_neighbor_stats_by_enumeration():
    rng = np.random.default_rng(10)
    pe = rng.normal(size=(2, 3, 2, 2))
    pts = rng.uniform(0, 4, size=(2, 2, 2, 3))
    near, rand, count = neighbor_similarity_stats(pe, pts, radius=2.0)
    vecs = pe.transpose(0, 2, 3, 1).reshape(-1, 3)
    flat = pts.reshape(-1, 3)
    near_vals, all_vals = [], []
    for i in range(8):
        for j in range(8):
            if i // 4 == j // 4:
                continue
            s = vecs[i] @ vecs[j] / np.linalg.norm(vecs[i]) / np.linalg.norm(vecs[j])
            all_vals.append(s)
            if np.linalg.norm(flat[i] - flat[j]) < 2.0:
                near_vals.append(s)
    assert count == len(near_vals) // 2
    assert rand == pytest.approx(np.mean(all_vals), abs=1e-12)
    assert near == pytest.approx(np.mean(near_vals), abs=1e-12)


def test_near_pairs_more_similar_on_ring_rig():
    rig = make_ring_rig(6, 0.5, (96, 96), 16, 70.0)
    roi = RoI((-20, -20, -2, 20, 20, 2))
    bins = make_depth_bins("LID", 1.0, 30.0, 16)
    enc = PositionEncoder(PEConfig(channels=32), 8, 64, 6, seed=0)
    coords = world_coord_grid(rig, bins, roi)
    pe = enc.embedding(coords).data.reshape(6, 6, 6, 32).transpose(0, 3, 1, 2)
    grid = build_frustum_grid(rig, bins)
    pts = np.stack([unproject(rig, v, grid)[8, ..., :3] for v in range(6)])
    near, rand, count = neighbor_similarity_stats(pe, pts)
    assert count > 0
    assert near > rand
