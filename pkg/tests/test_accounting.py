import csv
import io
import json
from decimal import Decimal
from fractions import Fraction

import pytest
from hypothesis import given
from hypothesis import strategies as st

from bitnet_lab.accounting import (
    count_graph,
    fc_bitblock_params,
    fc_bitblock_params_closed,
    fc_conven_params,
    flop_count,
    megarounded,
    param_count,
    table2_report,
    table3_report,
)
from bitnet_lab.arch import (
    BitBlockSpec,
    Group,
    LayerGraph,
    LayerNode,
    NetworkSpec,
    build_cifar_net,
    expand_bitblock,
)
from bitnet_lab.errors import SpecError


def single_conv_graph():
    nodes = (LayerNode(0, "input", 16, 16), LayerNode(1, "conv3x3", 16, 64, 1, (0,)))
    return LayerGraph(nodes, (32, 32, 16), 1)


class TestLayerRules:
    def test_conv3x3_no_bias(self):
        report = count_graph(single_conv_graph())
        assert report.total_params == 9 * 16 * 64 == 9216

    def test_conv_flops(self):
        assert count_graph(single_conv_graph()).total_flops == 9216 * 1024 == 9_437_184

    def test_dense_and_batchnorm(self):
        nodes = (
            LayerNode(0, "input", 5, 5),
            LayerNode(1, "dense", 5, 7, 1, (0,)),
            LayerNode(2, "batchnorm", 7, 7, 1, (1,)),
            LayerNode(3, "relu", 7, 7, 1, (2,)),
            LayerNode(4, "classifier", 7, 3, 1, (3,), bias=True),
        )
        report = count_graph(LayerGraph(nodes, (1, 1, 5), 4))
        assert [r.params for r in report.per_layer] == [0, 35, 14, 0, 24]
        assert [r.flops for r in report.per_layer] == [0, 35, 0, 0, 21]

    def test_totals_are_sums(self):
        report = param_count(build_cifar_net(4, 3, 4, "bit"))
        assert report.total_params == sum(r.params for r in report.per_layer)
        assert report.total_flops == sum(r.flops for r in report.per_layer)
        assert all(r.params >= 0 and r.flops >= 0 for r in report.per_layer)


@given(st.integers(1, 6).flatmap(lambda k: st.tuples(st.just(k), st.integers(1, 64))), st.integers(1, 128))
def test_bitblock_conv_weights(kd, c):
    k, mult = kd
    D = mult * 2**k
    nodes = tuple(expand_bitblock(BitBlockSpec(D, k, 1, c)))
    report = count_graph(LayerGraph(nodes, (4, 4, c), nodes[-1].id))
    conv = sum(r.params for r in report.per_layer if r.kind == "conv3x3")
    assert conv == 9 * c * D + 9 * sum((D // 2 ** (j - 1)) ** 2 for j in range(2, k + 1))


class TestClosedForms:
    def test_examples(self):
        assert fc_bitblock_params(256, 3) == 65536 + 16384 + 4096 == 86016
        assert fc_bitblock_params(256, 1) == 65536
        assert fc_bitblock_params(64, 6) == 4096 + 1024 + 256 + 64 + 16 + 4 == 5460

    @pytest.mark.parametrize("D", [64, 128, 256, 512])
    @pytest.mark.parametrize("K", range(1, 7))
    def test_closed_form_matches_sum(self, D, K):
        exact = Fraction(4, 3) * (1 - Fraction(1, 4**K)) * D * D
        assert fc_bitblock_params(D, K) == fc_bitblock_params_closed(D, K) == exact

    def test_indivisible(self):
        with pytest.raises(SpecError):
            fc_bitblock_params(100, 3)

    def test_conven(self):
        assert fc_conven_params(4, 2, 3) == 96
        assert fc_conven_params(1, 1, 1) == 1
        assert fc_conven_params(256, 3, 1) == 196608
        assert fc_conven_params(256, 3, 1) / fc_bitblock_params(256, 3) == pytest.approx(2.2857, abs=1e-4)

    @given(st.integers(1, 7).flatmap(lambda k: st.tuples(st.just(k), st.integers(1, 40))))
    def test_bitblock_cheaper_than_conven(self, kd):
        K, mult = kd
        D = mult * 2**K
        if K == 1:
            assert fc_bitblock_params(D, K) == fc_conven_params(D, K, 1)
        else:
            assert fc_bitblock_params(D, K) < fc_conven_params(D, K, 1)


class TestNetworkCounts:
    def test_headline_bitnet(self):
        report = param_count(build_cifar_net(4, 3, 4, "bit"))
        assert report.params_megarounded == Decimal("3.7")

    def test_flops_quadruple_with_input_area(self):
        net = build_cifar_net(2, 3, 2, "bit")
        small = flop_count(net, (32, 32))
        big = flop_count(net, (64, 64))

        def conv_flops(r):
            return sum(x.flops for x in r.per_layer if x.kind.startswith("conv"))

        assert conv_flops(big) == 4 * conv_flops(small)
        # the classifier does not depend on spatial size
        assert big.total_flops - 4 * small.total_flops == -3 * (128 * 10)

    @pytest.mark.parametrize("kind", ["bit", "conven"])
    def test_adding_a_block_increases_counts(self, kind):
        base = build_cifar_net(2, 2, 2, kind)
        for g in range(3):
            groups = list(base.groups)
            groups[g] = Group(groups[g].block, groups[g].n + 1)
            bigger = NetworkSpec(base.stem, tuple(groups), base.num_classes, base.input_shape)
            a, b = flop_count(base), flop_count(bigger)
            assert b.total_params > a.total_params
            assert b.total_flops > a.total_flops

    def test_bad_input_size(self):
        with pytest.raises(SpecError):
            flop_count(build_cifar_net(1, 1, 1, "bit"), (0, 32))

    def test_megarounding_half_up(self):
        assert megarounded(8_949_210) == Decimal("8.9")
        assert megarounded(8_950_000) == Decimal("9.0")


class TestReports:
    def test_table2_rows(self):
        rows = {r["model"]: r for r in table2_report("cifar10")}
        assert len(rows) == 14
        r = rows["BitNet (d=12,k=4,n=2)"]
        assert (r["depth"], r["params_m"], round(r["flops"] / 1e9, 2)) == (26, 14.9, 2.06)
        r = rows["Wide ResNet (d=12,k=2,n=4)"]
        assert (r["depth"], r["params_m"]) == (26, 52.5)
        r = rows["BitNet (d=4,k=6,n=2)"]
        assert (r["depth"], r["params_m"], round(r["flops"] / 1e9, 2)) == (38, 1.7, 0.24)

    def test_cifar100_head(self):
        a = {r["model"]: r["params"] for r in table2_report("cifar10")}
        b = {r["model"]: r["params"] for r in table2_report("cifar100")}
        assert b["BitNet (d=4,k=3,n=4)"] - a["BitNet (d=4,k=3,n=4)"] == 256 * 90 + 90

    def test_unknown_task(self):
        with pytest.raises(SpecError):
            table2_report("mnist")

    def test_table3(self):
        rows = table3_report()
        assert [r["depth"] for r in rows] == [26, 34]

    def test_csv_and_json(self):
        report = param_count(build_cifar_net(1, 1, 1, "bit"))
        rows = list(csv.DictReader(io.StringIO(report.to_csv())))
        assert list(rows[0]) == ["layer_id", "kind", "params", "flops"]
        assert sum(int(r["params"]) for r in rows) == report.total_params
        summary = json.loads(report.to_json())
        assert summary["total_params"] == report.total_params
