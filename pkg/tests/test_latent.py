"""Style-latent container, block partitioning, and structural edits."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from genviews.latent import (
    BlockPartition,
    BlockRangeError,
    Granularity,
    LatentShapeError,
    StyleLatent,
    add_block_delta,
    default_partition,
    style_mix,
)


class TestDefaultPartition:
    def test_eighteen_blocks_splits_4_6_8(self):
        p = default_partition(18)
        assert p.coarse == (0, 4)
        assert p.middle == (4, 10)
        assert p.fine == (10, 18)

    def test_three_blocks_one_each(self):
        p = default_partition(3)
        assert p.coarse == (0, 1)
        assert p.middle == (1, 2)
        assert p.fine == (2, 3)

    def test_eight_blocks(self):
        # 8 * (4,6,8)/18 = (1.78, 2.67, 3.56) -> largest remainder gives 2/3/3.
        p = default_partition(8)
        assert p.coarse == (0, 2)
        assert p.middle == (2, 5)
        assert p.fine == (5, 8)

    def test_too_few_blocks_rejected(self):
        with pytest.raises(LatentShapeError):
            default_partition(2)

    @given(blocks=st.integers(min_value=3, max_value=100))
    @settings(max_examples=60)
    def test_partition_covers_all_blocks_nonempty(self, blocks):
        p = default_partition(blocks)
        sizes = [hi - lo for lo, hi in (p.coarse, p.middle, p.fine)]
        assert all(s >= 1 for s in sizes)
        assert sum(sizes) == blocks
        assert p.coarse[0] == 0 and p.fine[1] == blocks
        assert p.middle[0] == p.coarse[1] and p.fine[0] == p.middle[1]

    @given(blocks=st.integers(min_value=9, max_value=100))
    @settings(max_examples=40)
    def test_band_ordering_follows_weights(self, blocks):
        # With enough blocks the 4:6:8 proportions keep coarse <= middle <= fine.
        p = default_partition(blocks)
        sizes = [hi - lo for lo, hi in (p.coarse, p.middle, p.fine)]
        assert sizes[0] <= sizes[1] <= sizes[2]


class TestBlockPartitionValidation:
    def test_noncontiguous_rejected(self):
        with pytest.raises(LatentShapeError):
            BlockPartition(coarse=(0, 2), middle=(3, 5), fine=(5, 8))

    def test_must_start_at_zero(self):
        with pytest.raises(LatentShapeError):
            BlockPartition(coarse=(1, 3), middle=(3, 5), fine=(5, 8))

    def test_empty_band_rejected(self):
        with pytest.raises(LatentShapeError):
            BlockPartition(coarse=(0, 0), middle=(0, 5), fine=(5, 8))

    def test_range_for(self):
        p = BlockPartition(coarse=(0, 2), middle=(2, 5), fine=(5, 8))
        assert p.range_for(Granularity.COARSE) == (0, 2)
        assert p.range_for(Granularity.MIDDLE) == (2, 5)
        assert p.range_for(Granularity.FINE) == (5, 8)
        assert p.blocks == 8


class TestStyleLatent:
    def test_copies_and_freezes_input(self):
        raw = np.ones((4, 3), dtype=np.float64)
        lat = StyleLatent(raw)
        raw[0, 0] = 99.0
        assert lat.values[0, 0] == 1.0
        assert lat.values.dtype == np.float32
        with pytest.raises(ValueError):
            lat.values[0, 0] = 5.0

    def test_shape_validation(self):
        with pytest.raises(LatentShapeError):
            StyleLatent(np.ones(6, dtype=np.float32))
        with pytest.raises(LatentShapeError):
            StyleLatent(np.ones((2, 4), dtype=np.float32))  # B < 3

    def test_nonfinite_rejected(self):
        bad = np.ones((4, 2), dtype=np.float32)
        bad[1, 1] = np.nan
        with pytest.raises(LatentShapeError):
            StyleLatent(bad)

    def test_copy_values_is_writable(self):
        lat = StyleLatent(np.zeros((3, 2), dtype=np.float32))
        v = lat.copy_values()
        v[0, 0] = 1.0
        assert lat.values[0, 0] == 0.0


class TestStyleMix:
    def setup_method(self):
        self.partition = default_partition(8)
        rng = np.random.default_rng(0)
        self.a = StyleLatent(rng.standard_normal((8, 5)).astype(np.float32))
        self.b = StyleLatent(rng.standard_normal((8, 5)).astype(np.float32))

    def test_swapped_rows_bit_identical(self):
        for gran in Granularity:
            lo, hi = self.partition.range_for(gran)
            mixed = style_mix(self.a, self.b, gran, self.partition)
            np.testing.assert_array_equal(mixed.values[lo:hi], self.b.values[lo:hi])
            keep = [i for i in range(8) if not lo <= i < hi]
            np.testing.assert_array_equal(mixed.values[keep], self.a.values[keep])

    def test_bands_disjoint_and_exhaustive(self):
        mixed_all = self.a.copy_values()
        for gran in Granularity:
            lo, hi = self.partition.range_for(gran)
            mixed_all[lo:hi] = self.b.values[lo:hi]
        np.testing.assert_array_equal(mixed_all, self.b.values)

    def test_shape_mismatch_rejected(self):
        c = StyleLatent(np.zeros((8, 4), dtype=np.float32))
        with pytest.raises(LatentShapeError):
            style_mix(self.a, c, Granularity.FINE, self.partition)

    def test_partition_mismatch_rejected(self):
        with pytest.raises(LatentShapeError):
            style_mix(self.a, self.b, Granularity.FINE, default_partition(6))


class TestAddBlockDelta:
    def setup_method(self):
        self.lat = StyleLatent(np.zeros((6, 4), dtype=np.float32))

    def test_vector_broadcast(self):
        out = add_block_delta(self.lat, np.ones(4, dtype=np.float32), (2, 5))
        np.testing.assert_array_equal(out.values[2:5], 1.0)
        np.testing.assert_array_equal(out.values[:2], 0.0)
        np.testing.assert_array_equal(out.values[5:], 0.0)

    def test_per_row_matrix(self):
        delta = np.arange(8, dtype=np.float32).reshape(2, 4)
        out = add_block_delta(self.lat, delta, (1, 3))
        np.testing.assert_array_equal(out.values[1:3], delta)

    def test_bad_range_rejected(self):
        with pytest.raises(BlockRangeError):
            add_block_delta(self.lat, np.ones(4, dtype=np.float32), (4, 8))
        with pytest.raises(BlockRangeError):
            add_block_delta(self.lat, np.ones(4, dtype=np.float32), (3, 3))

    def test_bad_delta_shape_rejected(self):
        with pytest.raises(LatentShapeError):
            add_block_delta(self.lat, np.ones(3, dtype=np.float32), (0, 2))
        with pytest.raises(LatentShapeError):
            add_block_delta(self.lat, np.ones((3, 4), dtype=np.float32), (0, 2))

    def test_original_untouched(self):
        add_block_delta(self.lat, np.ones(4, dtype=np.float32), (0, 6))
        np.testing.assert_array_equal(self.lat.values, 0.0)

    @given(
        blocks=st.integers(min_value=3, max_value=12),
        dim=st.integers(min_value=1, max_value=6),
        lo=st.integers(min_value=0, max_value=11),
        span=st.integers(min_value=1, max_value=12),
    )
    @settings(max_examples=60)
    def test_zero_delta_is_identity(self, blocks, dim, lo, span):
        if lo + span > blocks:
            return
        lat = StyleLatent(np.random.default_rng(1).standard_normal((blocks, dim)).astype(np.float32))
        out = add_block_delta(lat, np.zeros(dim, dtype=np.float32), (lo, lo + span))
        np.testing.assert_array_equal(out.values, lat.values)
