import math

import numpy as np
import pytest
from hypothesis import assume, given, settings
from hypothesis import strategies as st

from bitnet_lab.accounting import fc_bitblock_params
from bitnet_lab.errors import GuardError, SpecError
from bitnet_lab.regions import (
    ReluNetFC,
    activation_patterns,
    bound_bitnet,
    bound_conven,
    build_sawtooth_1d,
    count_pieces_1d,
    count_regions_exact,
    default_box_bound,
    grid_sign_regions,
    random_relu_net,
    zaslavsky_regions,
)


class TestExactCount:
    def test_three_lines_in_the_plane(self):
        net = random_relu_net(2, [3], seed=0)
        assert count_regions_exact(net) == 7 == zaslavsky_regions(3, 2)

    def test_grid_oracle_agrees(self):
        net = random_relu_net(2, [3], seed=0)
        B = default_box_bound(net)
        # every vertex lies well inside half the default box, so a coarse grid resolves all regions
        assert grid_sign_regions(net, B / 2, resolution=2001) == 7

    def test_zero_weights(self):
        net = ReluNetFC([np.zeros((4, 2)), np.zeros((3, 4))], [np.zeros(4), np.ones(3)])
        assert count_regions_exact(net, box_bound=10.0) == 1

    def test_breakpoints_on_a_line(self):
        net = ReluNetFC([np.ones((4, 1))], [np.array([-1.0, 0.0, 0.5, 2.0])])
        assert count_regions_exact(net) == 5

    @pytest.mark.parametrize("n", [1, 2, 3])
    @pytest.mark.parametrize("D", [1, 4, 8])
    def test_single_layer_matches_zaslavsky(self, n, D):
        for seed in range(5):
            net = random_relu_net(n, [D], seed=seed)
            assert count_regions_exact(net) == zaslavsky_regions(D, n)

    def test_grid_never_exceeds_exact(self):
        # the grid can only see regions that exist, so it never exceeds the exact count
        net = random_relu_net(2, [4, 3], seed=5)
        assert grid_sign_regions(net, 4.0, resolution=401) <= count_regions_exact(net, box_bound=4.0)

    @pytest.mark.parametrize("seed", range(6))
    def test_doubling_box_never_decreases(self, seed):
        net = random_relu_net(2, [3, 3], seed=seed)
        counts = [count_regions_exact(net, box_bound=B) for B in (0.5, 1.0, 2.0, 4.0, 8.0, 16.0)]
        assert counts == sorted(counts)
        assert counts[-1] <= count_regions_exact(net)

    def test_guards(self):
        with pytest.raises(GuardError):
            count_regions_exact(random_relu_net(4, [2], seed=0))
        with pytest.raises(GuardError):
            count_regions_exact(random_relu_net(2, [13, 12], seed=0))
        with pytest.raises(SpecError):
            count_regions_exact(random_relu_net(2, [2], seed=0), box_bound=0.0)

    def test_default_box_contains_far_vertices(self):
        W = np.array([[1.0, 0.0], [1.0, 1e-4]])
        net = ReluNetFC([W], [np.array([0.0, -1.0])])
        # the two lines meet at y = 1e4, beyond 1000 * max|w|
        assert default_box_bound(net) >= 2e4
        assert count_regions_exact(net) == 4


class TestNetValidation:
    def test_chain_mismatch(self):
        with pytest.raises(SpecError):
            ReluNetFC([np.ones((3, 2)), np.ones((2, 4))], [np.zeros(3), np.zeros(2)])

    def test_non_finite(self):
        with pytest.raises(SpecError):
            ReluNetFC([np.array([[np.nan]])], [np.zeros(1)])

    def test_patterns_shape(self):
        net = random_relu_net(2, [3, 2], seed=1)
        assert activation_patterns(net, np.zeros((5, 2))).shape == (5, 5)


class TestZaslavsky:
    @pytest.mark.parametrize("D,n,expected", [(3, 2, 7), (8, 2, 37), (1, 5, 2), (4, 1, 5)])
    def test_values(self, D, n, expected):
        assert zaslavsky_regions(D, n) == expected

    def test_all_orthants_when_n_at_least_D(self):
        assert zaslavsky_regions(5, 7) == 2**5


class TestBounds:
    @pytest.mark.parametrize("args,expected", [((4, 1, 1, 2), 4), ((4, 2, 1, 2), 16), ((3, 5, 2, 3), 1)])
    def test_conven_examples(self, args, expected):
        assert bound_conven(*args, form="simplified") == expected

    def test_conven_tight(self):
        assert bound_conven(4, 2, 1, 2, form="tight") == 2**2 * 16

    def test_bitnet_examples(self):
        assert bound_bitnet(8, 2, 1, 2, form="per_layer_product") == 4
        assert bound_bitnet(8, 2, 1, 2, form="simplified") == 1
        assert bound_bitnet(2**3 * 2, 3, 4, 2, form="simplified") == 1

    def test_big_integers(self):
        value = bound_conven(64, 6, 6, 1)
        assert value == 2 ** (6 * 36)
        assert value > 2**64

    def test_preconditions(self):
        with pytest.raises(SpecError):
            bound_conven(1, 1, 1, 2)
        with pytest.raises(SpecError):
            bound_bitnet(7, 2, 1, 2)
        with pytest.raises(SpecError):
            bound_bitnet(8, 1, 1, 1, form="tight")
        with pytest.raises(SpecError):
            bound_conven(4, 0, 1, 1)

    @given(st.integers(1, 3), st.integers(1, 4), st.integers(1, 3), st.integers(1, 200))
    def test_ordering(self, n, K, L, D):
        assume(D >= 2**K * n)
        simple = bound_bitnet(D, K, L, n)
        assert simple <= bound_bitnet(D, K, L, n, form="per_layer_product")
        assert simple <= bound_conven(D, K, L, n)

    @given(st.integers(1, 3), st.integers(1, 4), st.integers(1, 3), st.integers(1, 200))
    def test_monotone_in_L_and_K(self, n, K, L, D):
        assume(D >= 2**K * n)
        for form in ("simplified", "per_layer_product"):
            assert bound_bitnet(D, K, L, n, form) <= bound_bitnet(D, K, L + 1, n, form)
        assert bound_conven(D, K, L, n) <= bound_conven(D, K, L + 1, n)
        assert bound_conven(D, K, L, n) <= bound_conven(D, K + 1, L, n)
        if D >= 2 ** (K + 1) * n:
            assert bound_bitnet(D, K, L, n, "per_layer_product") <= bound_bitnet(D, K + 1, L, n, "per_layer_product")

    @settings(max_examples=50)
    @given(st.integers(1, 3), st.integers(1, 5), st.integers(1, 3), st.integers(1, 8))
    def test_capacity_grows_while_parameter_increments_shrink(self, n, K, L, mult):
        D = mult * 2 ** (K + 2) * n
        step = fc_bitblock_params(D, K + 1) - fc_bitblock_params(D, K)
        assert step == (D // 2**K) ** 2
        if K >= 2:
            previous = fc_bitblock_params(D, K) - fc_bitblock_params(D, K - 1)
            assert step * 4 == previous
        lo = math.log(bound_bitnet(D, K, L, n, "per_layer_product"))
        hi = math.log(bound_bitnet(D, K + 1, L, n, "per_layer_product"))
        assert hi > lo


class TestSawtooth:
    @pytest.mark.parametrize("widths,pieces", [([2], 2), ([2, 2], 4), ([3, 3], 9), ([3, 3, 3], 27), ([4, 2], 8)])
    def test_pieces(self, widths, pieces):
        assert count_pieces_1d(build_sawtooth_1d(widths)) == pieces

    def test_maps_unit_interval_onto_itself(self):
        net = build_sawtooth_1d([3, 2])
        y = net(np.linspace(0, 1, 1001)[:, None])[:, 0]
        assert y.min() == pytest.approx(0.0, abs=1e-12)
        assert y.max() == pytest.approx(1.0, abs=1e-12)

    def test_coarse_grid_detected(self):
        with pytest.raises(GuardError):
            count_pieces_1d(build_sawtooth_1d([3, 3, 3, 3]), resolution=100)

    def test_bad_widths(self):
        with pytest.raises(SpecError):
            build_sawtooth_1d([1, 2])
        with pytest.raises(SpecError):
            count_pieces_1d(random_relu_net(2, [2], seed=0))
