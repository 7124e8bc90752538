import numpy as np
import pytest
import torch

from pointfit.errors import OutOfBoundsPointError, TooManyPointsError
from pointfit.points import (MAX_POINTS, DiskMapPair, PointEmbeddingNet, PointPair,
                             PointPairSet, assign_ids, embed_disks, one_hot_disks,
                             rasterize)


class TestAssignIds:
    def test_empty_set_valid(self):
        ps = assign_ids([], np.random.default_rng(0))
        assert len(ps) == 0

    def test_full_set_is_permutation(self):
        pairs = [((i, 0), (0, i)) for i in range(24)]
        ps = assign_ids(pairs, np.random.default_rng(1))
        assert sorted(p.id for p in ps.pairs) == list(range(1, 25))

    def test_too_many_points(self):
        pairs = [((i, 0), (0, i)) for i in range(25)]
        with pytest.raises(TooManyPointsError, match="exceeds maximum control points"):
            assign_ids(pairs, np.random.default_rng(2))

    def test_ids_distinct_and_in_range(self):
        for seed in range(5):
            ps = assign_ids([((1, 1), (2, 2))] * 8, np.random.default_rng(seed))
            ids = [p.id for p in ps.pairs]
            assert len(set(ids)) == 8 and all(1 <= i <= 24 for i in ids)

    def test_pairs_share_id(self):
        ps = assign_ids([((3, 4), (5, 6))], np.random.default_rng(3))
        assert ps.pairs[0].g == (3.0, 4.0) and ps.pairs[0].p == (5.0, 6.0)

    def test_set_invariants(self):
        with pytest.raises(ValueError):
            PointPairSet((PointPair((0, 0), (0, 0), 1), PointPair((1, 1), (1, 1), 1)))
        with pytest.raises(ValueError):
            PointPairSet((PointPair((0, 0), (0, 0), 0),))
        with pytest.raises(TooManyPointsError):
            PointPairSet(tuple(PointPair((i, 0), (0, i), i + 1) for i in range(5)), k=4)


class TestRasterize:
    def test_empty_set_all_zeros(self):
        d = rasterize(PointPairSet(()), (8, 8), (8, 8), 1.0)
        assert d.d_g.sum() == 0 and d.d_p.sum() == 0

    def test_single_pixel_disk(self):
        ps = PointPairSet((PointPair((2, 2), (5, 5), 7),))
        d = rasterize(ps, (8, 8), (8, 8), 0.0)
        assert d.d_g[0, 2, 2] == 7 and d.d_g.sum() == 7
        assert d.d_p[0, 5, 5] == 7 and d.d_p.sum() == 7

    def test_higher_id_wins_overlap(self):
        ps = PointPairSet((PointPair((3, 3), (3, 3), 3), PointPair((3, 3), (3, 3), 9)))
        d = rasterize(ps, (8, 8), (8, 8), 1.0)
        assert (d.d_g[d.d_g > 0] == 9).all()

    def test_order_invariance(self):
        a = PointPairSet((PointPair((1, 1), (2, 2), 4), PointPair((2, 2), (1, 1), 11)))
        b = PointPairSet((PointPair((2, 2), (1, 1), 11), PointPair((1, 1), (2, 2), 4)))
        da = rasterize(a, (8, 8), (8, 8), 1.5)
        db = rasterize(b, (8, 8), (8, 8), 1.5)
        assert np.array_equal(da.d_g, db.d_g) and np.array_equal(da.d_p, db.d_p)

    def test_values_are_exactly_the_ids(self):
        ps = assign_ids([((4, 4), (10, 10)), ((20, 20), (30, 30))], np.random.default_rng(0))
        d = rasterize(ps, (64, 64), (64, 64), 2.0)
        ids = {p.id for p in ps.pairs}
        assert set(np.unique(d.d_g)) == ids | {0}
        assert set(np.unique(d.d_p)) == ids | {0}

    def test_out_of_bounds(self):
        ps = PointPairSet((PointPair((8, 2), (1, 1), 1),))
        with pytest.raises(OutOfBoundsPointError):
            rasterize(ps, (8, 8), (8, 8), 1.0)

    def test_zero_pixel_disk_is_error(self):
        # fractional center with radius 0 covers no pixel center
        ps = PointPairSet((PointPair((2.5, 2.5), (1, 1), 1),))
        with pytest.raises(OutOfBoundsPointError, match="covers no pixels"):
            rasterize(ps, (8, 8), (8, 8), 0.0)

    def test_every_id_in_both_maps(self):
        rng = np.random.default_rng(7)
        pairs = [((rng.uniform(0, 63), rng.uniform(0, 63)),
                  (rng.uniform(0, 63), rng.uniform(0, 63))) for _ in range(10)]
        ps = assign_ids(pairs, rng)
        d = rasterize(ps, (64, 64), (64, 64), 2.0)
        for p in ps.pairs:
            assert (d.d_g == p.id).any() and (d.d_p == p.id).any()


class TestOneHot:
    def test_shape_and_content(self):
        d = np.zeros((1, 8, 8), dtype=np.int32)
        d[0, 1, 2] = 5
        oh = one_hot_disks(d, k=24)
        assert oh.shape == (1, 25, 8, 8)
        assert oh[0, 5, 1, 2] == 1 and oh[0, 0, 1, 2] == 0
        assert oh[0, 0].sum() == 63  # background channel everywhere else


class TestEmbeddingNet:
    def test_fresh_network_emits_exact_zeros(self):
        torch.manual_seed(0)
        net = PointEmbeddingNet(24, {"enc0": (2, 16), "enc1": (3, 32)}, 64)
        d = np.zeros((1, 64, 64), dtype=np.int32)
        d[0, 10:14, 10:14] = 7
        out = net(one_hot_disks(d, 24))
        for site, e in out.items():
            assert (e == 0).all(), site

    def test_token_shapes(self):
        net = PointEmbeddingNet(24, {"enc0": (2, 16), "enc1": (3, 32)}, 64)
        out = net(one_hot_disks(np.zeros((1, 64, 64), dtype=np.int32), 24))
        assert out["enc0"].shape == (1, 256, 16)
        assert out["enc1"].shape == (1, 64, 32)

    def test_width_doubled_garment_tokens(self):
        net = PointEmbeddingNet(24, {"enc0": (2, 16)}, 64)
        out = net(one_hot_disks(np.zeros((1, 64, 128), dtype=np.int32), 24))
        assert out["enc0"].shape == (1, 512, 16)

    def test_purity(self):
        torch.manual_seed(1)
        net = PointEmbeddingNet(24, {"enc0": (2, 16)}, 64, zero_init=False)
        ps = assign_ids([((5, 5), (9, 9))], np.random.default_rng(0))
        disks = rasterize(ps, (64, 64), (64, 64), 2.0)
        a_p, a_g = embed_disks(net, disks)
        b_p, b_g = embed_disks(net, disks)
        assert torch.equal(a_p["enc0"], b_p["enc0"])
        assert torch.equal(a_g["enc0"], b_g["enc0"])

    def test_nonzero_after_breaking_zero_init(self):
        torch.manual_seed(2)
        net = PointEmbeddingNet(24, {"enc0": (2, 16)}, 64, zero_init=False)
        d = np.zeros((1, 64, 64), dtype=np.int32)
        d[0, 4:9, 4:9] = 3
        out = net(one_hot_disks(d, 24))
        assert out["enc0"].abs().sum() > 0
