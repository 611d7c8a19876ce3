import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mind_eeg import autodiff as ad
from mind_eeg.autodiff import ShapeError, Tensor
from mind_eeg.config import ModelConfig
from mind_eeg.model import MindEegModel
from mind_eeg.regional import (
    PartitionError,
    RegionPartition,
    inter_regional_forward,
    intra_regional_forward,
    partition,
    region_attention_fuse,
)

from conftest import small_config


def fuse_oracle(X, W, scaled=False):
    XW = X @ W
    a = XW @ XW.T
    C = np.array([a[i].sum() for i in range(X.shape[0])])
    if scaled:
        C = C / (X.shape[0] * np.sqrt(X.shape[1]))
    e = np.exp(C - C.max())
    return (e / e.sum()) @ X


def copy_params(src, dst):
    for (ns, ps), (nd, pd) in zip(src.named_parameters(), dst.named_parameters()):
        assert ps.shape == pd.shape, (ns, nd)
        pd.data[...] = ps.data


# ---------------------------------------------------------------- partitions


def test_partition_small_example(rng):
    X = rng.normal(size=(4, 3))
    p = RegionPartition(["a", "b"], [(0, 1), (2, 3)], 4)
    parts = partition(Tensor(X), p)
    assert [s.shape for s in parts] == [(2, 3), (2, 3)]
    np.testing.assert_array_equal(parts[1].data, X[2:])


def test_partition_reassembles_by_inverse_permutation(rng):
    p = RegionPartition.default()
    X = rng.normal(size=(62, 5))
    parts = partition(Tensor(X), p)
    order = np.concatenate([list(r) for r in p.regions])
    stacked = np.concatenate([s.data for s in parts])
    np.testing.assert_array_equal(stacked[np.argsort(order)], X)


def test_partition_gradient_scatters_back(rng):
    p = RegionPartition(["a", "b"], [(3, 0), (1, 2)], 4)
    X = Tensor(rng.normal(size=(4, 2)), requires_grad=True)
    parts = partition(X, p)
    ad.backward(parts[0].sum() * 2.0 + parts[1].sum())
    np.testing.assert_array_equal(X.grad[:, 0], [2, 1, 1, 2])


def test_default_partition_table():
    p = RegionPartition.default()
    p.validate()
    assert p.Q == 7
    assert sum(p.sizes) == 62
    assert sorted(i for r in p.regions for i in r) == list(range(62))
    assert len(set(p.names)) == 7


def test_partition_text_round_trip(tmp_path):
    p = RegionPartition.default()
    path = tmp_path / "regions.txt"
    path.write_text("# custom table\n" + p.to_text())
    q = RegionPartition.load(path)
    assert q.names == p.names and q.regions == p.regions


@pytest.mark.parametrize("text, match", [
    ("a: 0,1\nb: 2,5\n", "out of range"),
    ("a: 0,1\nb:\nc: 2,3\n", "empty"),
    ("a: 0,0,1\nb: 2,3\n", "repeats"),
    ("a: 0,1\nb: 1,2,3\n", "several regions"),
    ("a: 0,1\nb: 2\n", "not covered"),
    ("a 0,1,2,3\n", "expected"),
    ("a: 0,x\n", "integers"),
])
def test_partition_errors(text, match):
    with pytest.raises(PartitionError, match=match):
        RegionPartition.from_text(text, n=4)


def test_partition_overlap_behind_flag():
    p = RegionPartition.from_text("a: 0,1,2\nb: 2,3\n", n=4, allow_overlap=True)
    assert p.sizes == [3, 2]


def test_partition_index_error(rng):
    p = RegionPartition(["a"], [(0, 1, 2)], 3)
    with pytest.raises(ShapeError):
        partition(Tensor(rng.normal(size=(4, 2))), p)


# ---------------------------------------------------------------- attention fusion


def test_fuse_single_node_and_identical_rows(rng):
    W = Tensor(rng.normal(size=(4, 4)))
    row = rng.normal(size=(1, 4))
    np.testing.assert_allclose(region_attention_fuse(Tensor(row), W).data, row, atol=1e-15)
    same = np.repeat(row, 5, axis=0)
    np.testing.assert_allclose(region_attention_fuse(Tensor(same), W).data, row, atol=1e-14)


@pytest.mark.parametrize("scaled", [False, True])
def test_fuse_matches_oracle(rng, scaled):
    X, W = rng.normal(size=(3, 4)), rng.normal(size=(4, 4))
    out = region_attention_fuse(Tensor(X), Tensor(W), scaled).data
    assert out.shape == (1, 4)
    np.testing.assert_allclose(out[0], fuse_oracle(X, W, scaled), atol=1e-13)


def test_fuse_is_convex_combination(rng):
    X = rng.normal(size=(2, 6, 4))
    out = region_attention_fuse(Tensor(X), Tensor(rng.normal(size=(4, 4)))).data
    assert np.all(out[:, 0] >= X.min(axis=1) - 1e-12)
    assert np.all(out[:, 0] <= X.max(axis=1) + 1e-12)


def test_fuse_shape_error(rng):
    with pytest.raises(ShapeError):
        region_attention_fuse(Tensor(np.zeros((3, 4))), Tensor(np.zeros((5, 5))))


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000), st.integers(1, 6), st.booleans())
def test_fuse_permutation_equivariance(seed, rows, scaled):
    rng = np.random.default_rng(seed)
    X, W = rng.normal(size=(rows, 3)), Tensor(rng.normal(size=(3, 3)))
    perm = rng.permutation(rows)
    np.testing.assert_allclose(region_attention_fuse(Tensor(X[perm]), W, scaled).data,
                               region_attention_fuse(Tensor(X), W, scaled).data, atol=1e-12)


# ---------------------------------------------------------------- intra / inter streams


def test_intra_shapes_and_loss_additivity(rng):
    cfg = small_config()
    model = MindEegModel(cfg)
    X = Tensor(rng.normal(size=(3, cfg.n, cfg.d)))
    rf = intra_regional_forward(X, model.partition_map, model.intra, model.fusion)
    p = model.partition_map
    assert rf.fused.shape == (3, p.Q, cfg.intra_out)
    assert [f.shape for f in rf.per_region] == [(3, s, cfg.intra_out) for s in p.sizes]
    total = np.zeros(3)
    for enc, xs in zip(model.intra.encoders, partition(X, p)):
        total += enc(xs).vq_loss.data
    np.testing.assert_allclose(rf.vq_loss.data, total, rtol=1e-13)


def test_intra_default_shape_is_7_by_50(rng):
    model = MindEegModel(ModelConfig())
    rf = intra_regional_forward(Tensor(rng.normal(size=(62, 5))), model.partition_map, model.intra, model.fusion)
    assert rf.fused.shape == (7, 50)


def test_intra_deterministic_on_zero_input():
    cfg = small_config()
    outs = []
    for _ in range(2):
        model = MindEegModel(cfg)
        rf = intra_regional_forward(Tensor(np.zeros((cfg.n, cfg.d))), model.partition_map, model.intra,
                                    model.fusion)
        outs.append(rf.fused.data.tobytes())
    assert outs[0] == outs[1]


def test_single_region_equals_global_path(rng):
    cfg = small_config(k_intra=4, intra_out=6)
    whole = RegionPartition(["all"], [tuple(range(cfg.n))], cfg.n)
    model = MindEegModel(cfg, whole)
    copy_params(model.global_encoder, model.intra.encoders[0])
    X = Tensor(rng.normal(size=(4, cfg.n, cfg.d)))
    g = model.global_encoder(X)
    rf = intra_regional_forward(X, whole, model.intra, model.fusion)
    assert np.max(np.abs(rf.per_region[0].data - g.features.data)) < 1e-9
    assert np.max(np.abs(rf.vq_loss.data - g.vq_loss.data)) < 1e-9
    np.testing.assert_array_equal(rf.index[0], g.index)


def test_inter_default_shape_is_7_by_60(rng):
    model = MindEegModel(ModelConfig())
    feats, vq, idx = inter_regional_forward(Tensor(rng.normal(size=(7, 50))), model.inter)
    assert feats.shape == (7, 60)
    assert vq.shape == ()
    assert idx.shape == (5,)


def test_inter_single_region_degenerate(rng):
    cfg = ModelConfig()
    one = RegionPartition(["all"], [tuple(range(62))], 62)
    model = MindEegModel(cfg, one)
    fused = Tensor(rng.normal(size=(1, 50)))
    feats, _, _ = inter_regional_forward(fused, model.inter)
    assert feats.shape == (1, 60)
    out = model.inter.encoder(fused, graph_input=model.inter.band_proj(fused))
    assert out.fused_graph.shape == (1, 1)


def test_inter_shape_error(rng):
    model = MindEegModel(small_config())
    with pytest.raises(ShapeError):
        inter_regional_forward(Tensor(rng.normal(size=(2, 6))), model.inter)


def test_gradient_reaches_input_through_both_encoders(rng):
    # single-channel regions normalize to the constant 1x1 graph, so use 4-channel ones
    cfg = small_config()
    model = MindEegModel(cfg, RegionPartition.contiguous(cfg.n, 3))
    X = Tensor(rng.normal(size=(cfg.n, cfg.d)), requires_grad=True)
    rf = intra_regional_forward(X, model.partition_map, model.intra, model.fusion)
    feats, _, _ = inter_regional_forward(rf.fused, model.inter)
    ad.backward(ad.sq_norm(feats))
    assert np.any(X.grad != 0)
    assert np.any(model.inter.encoder.age.M.grad != 0)
    for enc in model.intra.encoders:
        assert np.any(enc.age.M.grad != 0)


def test_single_channel_region_graph_is_constant(rng):
    model = MindEegModel(small_config(), RegionPartition(["a", "b"], [(0,), tuple(range(1, 12))], 12))
    out = model.intra.encoders[0](Tensor(rng.normal(size=(2, 1, 3))))
    np.testing.assert_allclose(out.fused_graph.data, 1.0, atol=1e-15)


def test_shared_region_weight_flag():
    shared = MindEegModel(small_config(shared_region_weight=True))
    separate = MindEegModel(small_config())
    assert len(shared.fusion.weights) == 1
    assert len(separate.fusion.weights) == separate.partition_map.Q
