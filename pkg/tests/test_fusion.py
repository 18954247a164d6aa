"""Projector and fusion tests.

The interleave law is checked against a permutation oracle built from
unique token tags: output rows must be a permutation of the inputs,
tile-major, A-block before B-block per tile, each branch's relative
order intact. Channel fusion is checked by its length law and by the
[I | 0] selector: a down map that copies branch A must reproduce branch
A exactly.
"""

import numpy as np
import pytest

from tilefusion import tensor as tz
from tilefusion.encoders import TokenGrid
from tilefusion.errors import ConfigError, ContractError, DimensionError
from tilefusion.fusion import (
    FUSION_KINDS,
    Projector,
    VisualSequence,
    fuse_post_channel,
    fuse_post_interleave,
    fuse_pre,
    project,
)


def tagged_sequence(n_tiles, per_tile, width, branch, tag_base, rng):
    """VisualSequence whose column 0 holds a unique increasing tag."""
    n = n_tiles * per_tile
    data = rng.standard_normal((n, width))
    data[:, 0] = tag_base + np.arange(n)
    prov = [(t, branch, i) for t in range(n_tiles) for i in range(per_tile)]
    return VisualSequence(tz.Tensor(data, requires_grad=True), prov)


def grid_from(rng, n_tiles, side, channels, requires_grad=False):
    data = rng.standard_normal((n_tiles, channels, side, side))
    return TokenGrid(tz.Tensor(data, requires_grad=requires_grad))


# ---------------------------------------------------------------------------
# projector


def test_zero_projector_gives_zero_embeddings():
    rng = np.random.default_rng(0)
    proj = Projector("projectorA", in_dim=3, hidden=5, d_lm=4, seed=0)
    for p in proj.parameters():
        p.data[...] = 0.0
    out = project(proj, grid_from(rng, 2, 2, 3), "A")
    assert out.embeddings.shape == (8, 4)
    np.testing.assert_array_equal(out.embeddings.data, np.zeros((8, 4)))


def test_identity_projector_is_gelu():
    rng = np.random.default_rng(1)
    d = 4
    proj = Projector("p", in_dim=d, hidden=d, d_lm=d, seed=0)
    proj.w1.data[...] = np.eye(d)
    proj.w2.data[...] = np.eye(d)
    proj.b1.data[...] = 0.0
    proj.b2.data[...] = 0.0
    grid = grid_from(rng, 1, 2, d)
    out = project(proj, grid, "A")
    want = tz.gelu(grid.flatten_tokens()).data
    np.testing.assert_array_equal(out.embeddings.data, want)


def test_project_desk_token_count():
    rng = np.random.default_rng(2)
    proj = Projector("p", in_dim=6, hidden=8, d_lm=5, seed=3)
    out = project(proj, grid_from(rng, 7, 4, 6), "A")
    assert out.n_tokens == 112
    assert out.width == 5
    assert out.tokens_per_tile() == {t: 16 for t in range(7)}


def test_project_preserves_scan_order():
    rng = np.random.default_rng(3)
    grid = grid_from(rng, 2, 2, 3)
    proj = Projector("p", in_dim=3, hidden=3, d_lm=3, seed=0)
    out = project(proj, grid, "B")
    assert out.provenance == [(t, "B", i) for t in range(2) for i in range(4)]


def test_projector_rejects_width_mismatch():
    rng = np.random.default_rng(4)
    proj = Projector("p", in_dim=5, hidden=4, d_lm=3, seed=0)
    with pytest.raises(DimensionError):
        project(proj, grid_from(rng, 1, 2, 4), "A")


# ---------------------------------------------------------------------------
# post-interleave


def test_interleave_hand_case():
    a = VisualSequence(
        tz.Tensor(np.array([[1.0], [2.0], [3.0], [4.0]])),
        [(0, "A", 0), (0, "A", 1), (1, "A", 0), (1, "A", 1)],
    )
    b = VisualSequence(
        tz.Tensor(np.array([[10.0], [20.0], [30.0], [40.0]])),
        [(0, "B", 0), (0, "B", 1), (1, "B", 0), (1, "B", 1)],
    )
    out = fuse_post_interleave(a, b)
    np.testing.assert_array_equal(
        out.embeddings.data.ravel(),
        [1.0, 2.0, 10.0, 20.0, 3.0, 4.0, 30.0, 40.0],
    )
    assert out.n_tokens == 8


def test_interleave_empty_b_returns_a():
    rng = np.random.default_rng(5)
    a = tagged_sequence(2, 3, 4, "A", 0, rng)
    b = VisualSequence(tz.Tensor(np.zeros((0, 4))), [])
    out = fuse_post_interleave(a, b)
    assert out.embeddings.data.tobytes() == a.embeddings.data.tobytes()
    assert out.provenance == a.provenance
    flipped = fuse_post_interleave(b, a)
    assert flipped.embeddings.data.tobytes() == a.embeddings.data.tobytes()


def test_interleave_permutation_oracle_random_configs():
    rng = np.random.default_rng(6)
    for _ in range(30):
        n_tiles = int(rng.integers(1, 5))
        ta = int(rng.integers(1, 6))
        tb = int(rng.integers(1, 6))
        width = int(rng.integers(2, 7))
        a = tagged_sequence(n_tiles, ta, width, "A", 1000, rng)
        b = tagged_sequence(n_tiles, tb, width, "B", 2000, rng)
        out = fuse_post_interleave(a, b)

        assert out.n_tokens == a.n_tokens + b.n_tokens
        tags = out.embeddings.data[:, 0]
        all_tags = np.concatenate([a.embeddings.data[:, 0],
                                   b.embeddings.data[:, 0]])
        np.testing.assert_array_equal(np.sort(tags), np.sort(all_tags))

        a_tags = tags[[i for i, (_, br, _) in enumerate(out.provenance)
                       if br == "A"]]
        b_tags = tags[[i for i, (_, br, _) in enumerate(out.provenance)
                       if br == "B"]]
        assert (np.diff(a_tags) > 0).all()
        assert (np.diff(b_tags) > 0).all()

        tiles = [t for t, _, _ in out.provenance]
        assert tiles == sorted(tiles)
        for t in range(n_tiles):
            branches = [br for tt, br, _ in out.provenance if tt == t]
            assert branches == ["A"] * ta + ["B"] * tb


def test_interleave_paper_scale_length():
    rng = np.random.default_rng(7)
    a = tagged_sequence(1, 256, 2, "A", 0, rng)
    b = tagged_sequence(1, 256, 2, "B", 1000, rng)
    assert fuse_post_interleave(a, b).n_tokens == 512


def test_interleave_rejects_mismatched_tiles():
    rng = np.random.default_rng(8)
    a = tagged_sequence(2, 2, 3, "A", 0, rng)
    b = tagged_sequence(3, 2, 3, "B", 100, rng)
    with pytest.raises(ContractError):
        fuse_post_interleave(a, b)


def test_interleave_gradients_reach_both_inputs():
    rng = np.random.default_rng(9)
    a = tagged_sequence(2, 2, 3, "A", 0, rng)
    b = tagged_sequence(2, 3, 3, "B", 100, rng)
    out = fuse_post_interleave(a, b)
    r = tz.Tensor(rng.standard_normal(out.embeddings.shape))
    tz.backward(tz.sum_all(tz.mul(out.embeddings, r)))
    assert np.abs(a.embeddings.grad).max() > 0
    assert np.abs(b.embeddings.grad).max() > 0


# ---------------------------------------------------------------------------
# post-channel


def test_post_channel_length_law_and_selector():
    rng = np.random.default_rng(10)
    d = 4
    a = tagged_sequence(2, 3, d, "A", 0, rng)
    b = tagged_sequence(2, 3, d, "B", 100, rng)
    down = tz.Tensor(np.vstack([np.eye(d), np.zeros((d, d))]))
    out = fuse_post_channel(a, b, down)
    assert out.n_tokens == a.n_tokens
    np.testing.assert_array_equal(out.embeddings.data, a.embeddings.data)
    assert all(br == "A+B" for _, br, _ in out.provenance)


def test_post_channel_desk_arithmetic():
    rng = np.random.default_rng(11)
    a = tagged_sequence(1, 16, 3, "A", 0, rng)
    b = tagged_sequence(1, 16, 3, "B", 50, rng)
    down = tz.Tensor(rng.standard_normal((6, 3)))
    assert fuse_post_channel(a, b, down).n_tokens == 16


def test_post_channel_rejects_unequal_counts():
    rng = np.random.default_rng(12)
    a = tagged_sequence(1, 4, 3, "A", 0, rng)
    b = tagged_sequence(1, 5, 3, "B", 50, rng)
    down = tz.Tensor(np.zeros((6, 3)))
    with pytest.raises(ContractError):
        fuse_post_channel(a, b, down)


def test_post_channel_rejects_bad_down_shape():
    rng = np.random.default_rng(13)
    a = tagged_sequence(1, 2, 3, "A", 0, rng)
    b = tagged_sequence(1, 2, 3, "B", 10, rng)
    with pytest.raises(DimensionError):
        fuse_post_channel(a, b, tz.Tensor(np.zeros((5, 3))))


# ---------------------------------------------------------------------------
# pre-adaptation baselines


def test_pre_sequence_single_projector_paper_count():
    rng = np.random.default_rng(14)
    a = grid_from(rng, 1, 16, 3)
    b = grid_from(rng, 1, 16, 3)
    shared = Projector("projector_shared", in_dim=3, hidden=4, d_lm=5, seed=0)
    out = fuse_pre(a, b, "pre-sequence", shared)
    assert out.n_tokens == 512
    assert out.width == 5


def test_pre_sequence_block_structure():
    rng = np.random.default_rng(15)
    a = grid_from(rng, 2, 2, 3)
    b = grid_from(rng, 2, 1, 3)
    shared = Projector("s", in_dim=3, hidden=3, d_lm=2, seed=1)
    out = fuse_pre(a, b, "pre-sequence", shared)
    assert [(t, br) for t, br, _ in out.provenance] == [
        (0, "A")] * 4 + [(0, "B")] + [(1, "A")] * 4 + [(1, "B")]


def test_pre_sequence_rejects_channel_mismatch():
    rng = np.random.default_rng(16)
    shared = Projector("s", in_dim=3, hidden=3, d_lm=2, seed=1)
    with pytest.raises(DimensionError):
        fuse_pre(grid_from(rng, 1, 2, 3), grid_from(rng, 1, 2, 4),
                 "pre-sequence", shared)


def test_pre_channel_width_and_count():
    rng = np.random.default_rng(17)
    a = grid_from(rng, 2, 4, 3)
    b = grid_from(rng, 2, 4, 5)
    shared = Projector("s", in_dim=8, hidden=6, d_lm=4, seed=2)
    out = fuse_pre(a, b, "pre-channel", shared)
    assert out.n_tokens == 32
    assert out.width == 4


def test_pre_channel_zero_b_slice_is_branch_a_projection():
    rng = np.random.default_rng(18)
    ca, cb = 3, 2
    a = grid_from(rng, 1, 2, ca)
    b = grid_from(rng, 1, 2, cb)
    shared = Projector("s", in_dim=ca + cb, hidden=5, d_lm=4, seed=3)
    shared.w1.data[ca:, :] = 0.0
    solo = Projector("solo", in_dim=ca, hidden=5, d_lm=4, seed=99)
    solo.w1.data[...] = shared.w1.data[:ca, :]
    solo.b1.data[...] = shared.b1.data
    solo.w2.data[...] = shared.w2.data
    solo.b2.data[...] = shared.b2.data
    fused = fuse_pre(a, b, "pre-channel", shared)
    alone = solo.apply(a.flatten_tokens())
    np.testing.assert_allclose(fused.embeddings.data, alone.data,
                               rtol=0, atol=1e-15)


def test_pre_channel_rejects_unequal_counts_and_bad_kind():
    rng = np.random.default_rng(19)
    shared = Projector("s", in_dim=6, hidden=3, d_lm=2, seed=0)
    with pytest.raises(ContractError):
        fuse_pre(grid_from(rng, 1, 2, 3), grid_from(rng, 1, 3, 3),
                 "pre-channel", shared)
    with pytest.raises(ConfigError):
        fuse_pre(grid_from(rng, 1, 2, 3), grid_from(rng, 1, 2, 3),
                 "mid-fusion", shared)
    with pytest.raises(ContractError):
        fuse_pre(grid_from(rng, 1, 2, 3), grid_from(rng, 2, 2, 3),
                 "pre-sequence", shared)


def test_gradients_flow_to_both_projectors_under_interleave():
    rng = np.random.default_rng(20)
    pa = Projector("projectorA", in_dim=3, hidden=4, d_lm=5, seed=0)
    pb = Projector("projectorB", in_dim=2, hidden=4, d_lm=5, seed=1)
    ga = grid_from(rng, 2, 2, 3)
    gb = grid_from(rng, 2, 3, 2)
    out = fuse_post_interleave(project(pa, ga, "A"), project(pb, gb, "B"))
    r = tz.Tensor(rng.standard_normal(out.embeddings.shape))
    tz.backward(tz.sum_all(tz.mul(out.embeddings, r)))
    assert np.abs(pa.w1.grad).max() > 0
    assert np.abs(pb.w1.grad).max() > 0


# ---------------------------------------------------------------------------
# sequence validation


def test_visual_sequence_validation():
    with pytest.raises(ContractError):
        VisualSequence(tz.Tensor(np.zeros((2, 3))), [(0, "A", 0)])
    with pytest.raises(ContractError):
        VisualSequence(tz.Tensor(np.zeros((2, 3))),
                       [(0, "A", 1), (0, "A", 1)])
    with pytest.raises(DimensionError):
        VisualSequence(tz.Tensor(np.zeros(4)), [])


def test_fusion_kind_registry():
    assert FUSION_KINDS == ("post-interleave", "post-channel",
                            "pre-sequence", "pre-channel")
