import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gpcache.groups import GroupPartition, make_partition


class TestPartition:
    @settings(max_examples=100, deadline=None)
    @given(st.integers(1, 200), st.data(), st.integers(0, 2**31))
    def test_disjoint_balanced_cover(self, c, data, seed):
        g = data.draw(st.integers(1, c))
        p = make_partition(c, g, seed)
        flat = [x for grp in p.groups for x in grp]
        assert sorted(flat) == list(range(c))
        sizes = [len(grp) for grp in p.groups]
        assert p.g == g and max(sizes) - min(sizes) <= 1

    def test_deterministic(self):
        assert make_partition(17, 4, 3) == make_partition(17, 4, 3)

    def test_class_order(self):
        p = GroupPartition(4, ((1, 3), (0, 2)))
        np.testing.assert_array_equal(p.class_order, [1, 3, 0, 2])

    @pytest.mark.parametrize("g", [0, 6])
    def test_bad_group_count(self, g):
        with pytest.raises(ValueError):
            make_partition(5, g)

    def test_not_a_cover(self):
        with pytest.raises(ValueError):
            GroupPartition(3, ((0, 1), (1, 2)))
