"""Trainable-parameter and FLOP tallies.

Counting rules:

* conv: ``k*k*c_in*c_out`` weights, no bias; FLOPs = weights x output pixels
* dense / classifier: ``c_in*c_out`` (+ ``c_out`` when the layer has a bias);
  FLOPs = ``c_in*c_out``
* batchnorm: scale and shift, ``2*channels``; running statistics are buffers
* pooling, relu, concat, residual add: nothing

One FLOP is one multiply-accumulate.
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import asdict, dataclass
from decimal import ROUND_HALF_UP, Decimal

from .arch import (
    CONV_KINDS,
    KERNEL_SIZE,
    LayerGraph,
    NetworkSpec,
    build_cifar_net,
    build_bitnet26,
    build_bitnet34,
    depth,
    infer_shapes,
    lower,
)
from .errors import SpecError


@dataclass(frozen=True)
class LayerCount:
    layer_id: int
    kind: str
    params: int
    flops: int


@dataclass(frozen=True)
class CountReport:
    per_layer: tuple[LayerCount, ...]
    total_params: int
    total_flops: int

    @property
    def params_megarounded(self) -> Decimal:
        return megarounded(self.total_params)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["layer_id", "kind", "params", "flops"])
        for row in self.per_layer:
            w.writerow([row.layer_id, row.kind, row.params, row.flops])
        return buf.getvalue()

    def summary(self) -> dict:
        return {
            "total_params": self.total_params,
            "total_flops": self.total_flops,
            "params_m": float(self.params_megarounded),
            "layers": len(self.per_layer),
        }

    def to_json(self) -> str:
        return json.dumps(self.summary())


def megarounded(count: int) -> Decimal:
    """Parameter count in millions, rounded half-up to one decimal (``3.7M`` style)."""
    return (Decimal(count) / Decimal(10**6)).quantize(Decimal("0.1"), rounding=ROUND_HALF_UP)


def layer_params(node) -> int:
    if node.kind in CONV_KINDS:
        k = KERNEL_SIZE[node.kind]
        return k * k * node.in_channels * node.out_channels
    if node.kind in ("dense", "classifier"):
        return node.in_channels * node.out_channels + (node.out_channels if node.bias else 0)
    if node.kind == "batchnorm":
        return 2 * node.out_channels
    return 0


def count_graph(graph: LayerGraph, input_hw: tuple[int, int] | None = None) -> CountReport:
    h, w, c = graph.input_shape
    if input_hw is not None:
        if min(input_hw) <= 0:
            raise SpecError(f"input size must be positive, got {input_hw}")
        h, w = input_hw
    shapes = infer_shapes(graph.nodes, (h, w, c))
    rows = []
    for node in graph.nodes:
        params = layer_params(node)
        if node.kind in CONV_KINDS:
            _, ho, wo = shapes[node.id]
            flops = params * ho * wo
        elif node.kind in ("dense", "classifier"):
            flops = node.in_channels * node.out_channels
        else:
            flops = 0
        rows.append(LayerCount(node.id, node.kind, params, flops))
    return CountReport(
        tuple(rows), sum(r.params for r in rows), sum(r.flops for r in rows)
    )


def param_count(net: NetworkSpec) -> CountReport:
    return count_graph(lower(net))


def flop_count(net: NetworkSpec, input_hw: tuple[int, int] | None = None) -> CountReport:
    """FLOPs at ``input_hw`` (defaults to the network's own input size)."""
    return count_graph(lower(net), input_hw)


def fc_bitblock_params(D: int, K: int) -> int:
    """Weights of a bias-free fully connected BitBlock whose input width is D.

    Level k holds two ``D/2**(k-1) -> D/2**k`` layers, i.e. ``(D/2**(k-1))**2``
    weights. The sum equals ``(4/3)(1 - 4**-K) D**2`` exactly.
    """
    if D <= 0 or K <= 0:
        raise SpecError("D and K must be positive")
    if D % (2**K):
        raise SpecError(f"D={D} not divisible by 2^{K}")
    return sum((D >> (k - 1)) ** 2 for k in range(1, K + 1))


def fc_bitblock_params_closed(D: int, K: int) -> int:
    # (4/3)(1 - 4^-K) D^2 == (4^K - 1) D^2 / (3 * 4^(K-1)), exact in integers
    num = (4**K - 1) * D * D
    den = 3 * 4 ** (K - 1)
    if num % den:
        raise SpecError(f"closed form not integral for D={D}, K={K}")
    return num // den


def fc_conven_params(D: int, K: int, L: int) -> int:
    """Weights of L stacked bias-free dense blocks of K width-D layers."""
    if min(D, K, L) <= 0:
        raise SpecError("D, K and L must be positive")
    return L * K * D * D


# -- published tables -------------------------------------------------------

# (label, block kind, d, k, n, depth, params in M, FLOPs in 1e9)
TABLE2 = (
    ("Wide ResNet (d=4,k=2,n=6)", "conven", 4, 2, 6, 38, 8.9, 1.34),
    ("BitNet (d=4,k=3,n=4)", "bit", 4, 3, 4, 38, 3.7, 0.53),
    ("BitNet (d=4,k=4,n=3)", "bit", 4, 4, 3, 38, 2.7, 0.39),
    ("BitNet (d=4,k=2,n=6)", "bit", 4, 2, 6, 38, 5.4, 0.78),
    ("BitNet (d=4,k=6,n=2)", "bit", 4, 6, 2, 38, 1.7, 0.24),
    ("Wide ResNet (d=10,k=2,n=2)", "conven", 10, 2, 2, 14, 17.1, 2.64),
    ("BitNet (d=10,k=2,n=2)", "bit", 10, 2, 2, 14, 9.6, 1.32),
    ("BitNet (d=10,k=4,n=1)", "bit", 10, 4, 1, 14, 3.9, 0.49),
    ("Wide ResNet (d=10,k=2,n=3)", "conven", 10, 2, 3, 20, 26.8, 4.06),
    ("BitNet (d=10,k=2,n=3)", "bit", 10, 2, 3, 20, 15.6, 2.21),
    ("BitNet (d=10,k=3,n=2)", "bit", 10, 3, 2, 20, 10.2, 1.41),
    ("Wide ResNet (d=12,k=2,n=4)", "conven", 12, 2, 4, 26, 52.5, 7.87),
    ("BitNet (d=12,k=2,n=4)", "bit", 12, 2, 4, 26, 31.2, 4.45),
    ("BitNet (d=12,k=4,n=2)", "bit", 12, 4, 2, 26, 14.9, 2.06),
)

# name -> (depth, params in M, FLOPs in 1e9)
TABLE3 = {
    "BitNet-26": (26, 12.79, 2.8),
    "BitNet-34": (34, 22.99, 7.8),
}

TASK_CLASSES = {"cifar10": 10, "cifar100": 100}

REPORT_COLUMNS = (
    "model", "depth", "depth_published", "params", "params_m", "params_m_published",
    "params_rel_dev", "flops", "flops_g", "flops_g_published", "flops_rel_dev",
)


def _row(label, net, depth_published, p_published, f_published):
    report = flop_count(net)
    p_m = report.total_params / 1e6
    f_g = report.total_flops / 1e9
    return {
        "model": label,
        "depth": depth(net),
        "depth_published": depth_published,
        "params": report.total_params,
        "params_m": float(report.params_megarounded),
        "params_m_published": p_published,
        "params_rel_dev": (p_m - p_published) / p_published,
        "flops": report.total_flops,
        "flops_g": round(f_g, 3),
        "flops_g_published": f_published,
        "flops_rel_dev": (f_g - f_published) / f_published,
    }


def table2_report(task: str = "cifar10") -> list[dict]:
    """Depth, parameter and FLOP columns of the CIFAR comparison, computed vs published.

    The published parameter column is shared by both tasks; the 100-way head
    adds ``64*d*90 + 90`` parameters, which can move a rounded value by 0.1M.
    """
    if task not in TASK_CLASSES:
        raise SpecError(f"task must be one of {sorted(TASK_CLASSES)}, got {task!r}")
    rows = []
    for label, kind, d, k, n, dep, p, f in TABLE2:
        net = build_cifar_net(d, k, n, kind, TASK_CLASSES[task])
        rows.append(_row(label, net, dep, p, f))
    return rows


def table3_report() -> list[dict]:
    nets = {"BitNet-26": build_bitnet26(), "BitNet-34": build_bitnet34()}
    return [_row(name, nets[name], *TABLE3[name]) for name in TABLE3]


def rows_to_csv(rows: list[dict], columns=None) -> str:
    columns = list(columns or (rows[0].keys() if rows else ()))
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=columns, lineterminator="\n", extrasaction="ignore")
    w.writeheader()
    for row in rows:
        w.writerow(row)
    return buf.getvalue()


def report_dict(report: CountReport) -> dict:
    return {**report.summary(), "per_layer": [asdict(r) for r in report.per_layer]}
