"""Linear-region counting for small fully connected ReLU nets, and capacity bounds.

The exact counter refines the input box layer by layer: every region is a
polytope ``A x <= b`` (rows kept at unit norm) on which the net up to the
current layer is affine. Each unit's hyperplane splits a region in two, and
a side survives only if it contains a ball of radius greater than ``eps``,
found with a Chebyshev-centre linear program.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass

import numpy as np
from scipy.optimize import linprog

from .errors import GuardError, LPFailure, SpecError

LP_EPS = 1e-7
MAX_INPUT_DIM = 3
MAX_UNITS = 24


@dataclass
class ReluNetFC:
    """Dense ReLU layers ``h_l = relu(W_l h_{l-1} + b_l)`` with an optional linear readout."""

    weights: list[np.ndarray]
    biases: list[np.ndarray]
    out_weight: np.ndarray | None = None
    out_bias: np.ndarray | None = None

    def __post_init__(self):
        self.weights = [np.atleast_2d(np.asarray(w, dtype=np.float64)) for w in self.weights]
        self.biases = [np.asarray(b, dtype=np.float64).reshape(-1) for b in self.biases]
        if len(self.weights) != len(self.biases) or not self.weights:
            raise SpecError("need one bias vector per weight matrix and at least one layer")
        prev = self.weights[0].shape[1]
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.shape[1] != prev or b.shape != (w.shape[0],):
                raise SpecError(f"layer {i}: weight {w.shape} / bias {b.shape} do not chain from width {prev}")
            prev = w.shape[0]
        if self.out_weight is not None:
            self.out_weight = np.atleast_2d(np.asarray(self.out_weight, dtype=np.float64))
            if self.out_weight.shape[1] != prev:
                raise SpecError("readout does not chain from the last hidden layer")
            if self.out_bias is None:
                self.out_bias = np.zeros(self.out_weight.shape[0])
        params = self.weights + self.biases
        if not all(np.all(np.isfinite(p)) for p in params):
            raise SpecError("parameters must be finite")

    @property
    def input_dim(self) -> int:
        return self.weights[0].shape[1]

    @property
    def layer_widths(self) -> list[int]:
        return [w.shape[0] for w in self.weights]

    def max_weight(self) -> float:
        return max(float(np.abs(w).max()) for w in self.weights)

    def hidden(self, x: np.ndarray) -> list[np.ndarray]:
        """Pre-activations of every layer for a batch ``x`` of shape (m, n)."""
        h = np.atleast_2d(x)
        pres = []
        for w, b in zip(self.weights, self.biases):
            z = h @ w.T + b
            pres.append(z)
            h = np.maximum(z, 0.0)
        return pres

    def __call__(self, x: np.ndarray) -> np.ndarray:
        h = np.maximum(self.hidden(x)[-1], 0.0)
        if self.out_weight is None:
            return h
        return h @ self.out_weight.T + self.out_bias


def random_relu_net(input_dim: int, widths: list[int], seed: int = 0) -> ReluNetFC:
    """Standard-normal weights and biases (generic with probability one)."""
    rng = np.random.default_rng(seed)
    weights, biases = [], []
    prev = input_dim
    for width in widths:
        weights.append(rng.standard_normal((width, prev)))
        biases.append(rng.standard_normal(width))
        prev = width
    return ReluNetFC(weights, biases)


def activation_patterns(net: ReluNetFC, x: np.ndarray) -> np.ndarray:
    """Boolean on/off pattern of every unit, one row per input point."""
    return np.concatenate([z > 0 for z in net.hidden(x)], axis=1)


# -- exact counting ---------------------------------------------------------

@dataclass
class _Region:
    A: np.ndarray  # unit-norm rows
    b: np.ndarray
    point: np.ndarray  # strictly interior
    radius: float  # clearance of ``point`` from every facet
    M: np.ndarray  # current layer output = M x + c on this region
    c: np.ndarray


def _chebyshev(A, b, cap):
    """Largest inscribed ball of ``A x <= b``; returns (centre, radius) or None if empty."""
    n = A.shape[1]
    res = linprog(
        c=np.r_[np.zeros(n), -1.0],
        A_ub=np.c_[A, np.ones(len(A))],
        b_ub=b,
        bounds=[(None, None)] * n + [(None, cap)],
        method="highs",
    )
    if res.status == 2:
        return None
    if res.status != 0:
        raise LPFailure(f"feasibility LP failed: {res.message}")
    return res.x[:n], float(res.x[n])


def _split(region: _Region, a: np.ndarray, beta: float, eps: float, cap: float):
    """Full-dimensional pieces of ``region`` on each side of ``a.x + beta = 0``.

    Yields ``(active, child)`` pairs.
    """
    norm = float(np.linalg.norm(a))
    if norm < 1e-12:
        # the unit is constant on the region
        yield beta > 0, region
        return
    a_unit, beta_unit = a / norm, beta / norm
    dist = float(a_unit @ region.point + beta_unit)
    for active in (True, False):
        # active: a.x + beta >= 0  <=>  -a.x <= beta
        row, rhs = (-a_unit, beta_unit) if active else (a_unit, -beta_unit)
        A = np.vstack([region.A, row])
        b = np.r_[region.b, rhs]
        signed = dist if active else -dist
        if signed > 0 and min(region.radius, signed) > eps:
            # the current centre stays interior with enough clearance
            yield active, _Region(A, b, region.point, min(region.radius, signed), region.M, region.c)
            continue
        found = _chebyshev(A, b, cap)
        if found is not None and found[1] > eps:
            yield active, _Region(A, b, found[0], found[1], region.M, region.c)


def default_box_bound(net: ReluNetFC) -> float:
    """``1000 * max |weight|``, widened to contain every vertex of the first-layer arrangement.

    Nearly parallel first-layer hyperplanes can meet far outside the
    weight-scaled box; those vertices are computed exactly and the box
    grows to twice their largest coordinate.
    """
    bound = 1e3 * max(net.max_weight(), 1.0)
    W, b = net.weights[0], net.biases[0]
    n = net.input_dim
    for rows in itertools.combinations(range(W.shape[0]), n):
        sub = W[list(rows)]
        if abs(np.linalg.det(sub)) < 1e-12:
            continue
        vertex = np.linalg.solve(sub, -b[list(rows)])
        bound = max(bound, 2.0 * float(np.abs(vertex).max()))
    return bound


def count_regions_exact(net: ReluNetFC, box_bound: float | None = None, eps: float = LP_EPS) -> int:
    """Number of full-dimensional activation regions of ``net`` inside ``[-B, B]^n``.

    ``box_bound`` defaults to :func:`default_box_bound`. Regions of deeper
    layers whose vertices lie outside the box are clipped, so the result
    approximates the count over all of R^n.
    """
    n = net.input_dim
    units = sum(net.layer_widths)
    if n > MAX_INPUT_DIM or units > MAX_UNITS:
        raise GuardError(
            f"exact counting limited to input_dim <= {MAX_INPUT_DIM} and <= {MAX_UNITS} units "
            f"(got {n}, {units})"
        )
    B = box_bound if box_bound is not None else default_box_bound(net)
    if B <= 0:
        raise SpecError(f"box bound must be positive, got {B}")
    eye = np.eye(n)
    regions = [_Region(np.vstack([eye, -eye]), np.full(2 * n, float(B)), np.zeros(n), float(B), eye, np.zeros(n))]
    for W, bias in zip(net.weights, net.biases):
        pending = []
        for region in regions:
            P = W @ region.M
            q = W @ region.c + bias
            pieces = [(region, [])]
            for j in range(W.shape[0]):
                pieces = [
                    (child, signs + [active])
                    for piece, signs in pieces
                    for active, child in _split(piece, P[j], q[j], eps, B)
                ]
            for child, signs in pieces:
                s = np.asarray(signs, dtype=np.float64)
                child.M = P * s[:, None]
                child.c = q * s
                pending.append(child)
        regions = pending
    return len(regions)


def grid_sign_regions(net: ReluNetFC, bound: float, resolution: int = 1001) -> int:
    """Distinct activation patterns seen on a uniform grid over ``[-bound, bound]^n``.

    Brute-force cross-check: a lower bound on the region count that reaches
    it once the grid resolves every region.
    """
    axes = [np.linspace(-bound, bound, resolution)] * net.input_dim
    pts = np.stack([g.ravel() for g in np.meshgrid(*axes, indexing="ij")], axis=1)
    pats = activation_patterns(net, pts)
    return len(np.unique(np.packbits(pats, axis=1), axis=0))


def zaslavsky_regions(D: int, n: int) -> int:
    """Regions cut by D generic hyperplanes in R^n: sum of C(D, i) for i <= n."""
    if D < 1 or n < 1:
        raise SpecError("D and n must be at least 1")
    return sum(math.comb(D, i) for i in range(n + 1))


# -- capacity lower bounds --------------------------------------------------

def _positive(**kw):
    for name, v in kw.items():
        if not isinstance(v, int) or v <= 0:
            raise SpecError(f"{name} must be a positive integer, got {v!r}")


def bound_conven(D: int, K: int, L: int, n: int, form: str = "simplified") -> int:
    """Region lower bound for L stacked dense blocks of K width-D layers.

    ``simplified``: ``floor(D/n)^(nKL)``; ``tight``: ``floor(D/n)^(n(KL-1)) * D^n``.
    """
    _positive(D=D, K=K, L=L, n=n)
    if D < n:
        raise SpecError(f"bound needs D >= n (D={D}, n={n})")
    base = D // n
    if form == "simplified":
        return base ** (n * K * L)
    if form == "tight":
        return base ** (n * (K * L - 1)) * D**n
    raise SpecError(f"unknown form {form!r}")


def bound_bitnet(D: int, K: int, L: int, n: int, form: str = "simplified") -> int:
    """Region lower bound for L stacked dense BitBlocks of width D, depth K.

    ``simplified``: ``floor(D/(2^K n))^(nKL)``; ``per_layer_product``:
    ``(prod_k floor(D/(2^k n))^n)^L``.
    """
    _positive(D=D, K=K, L=L, n=n)
    if D < 2**K * n:
        raise SpecError(f"bound needs D >= 2^K * n (D={D}, K={K}, n={n})")
    if form == "simplified":
        return (D // (2**K * n)) ** (n * K * L)
    if form == "per_layer_product":
        block = 1
        for k in range(1, K + 1):
            block *= (D // (2**k * n)) ** n
        return block**L
    raise SpecError(f"unknown form {form!r}")


# -- one-dimensional folding witness ----------------------------------------

def build_sawtooth_1d(widths: list[int]) -> ReluNetFC:
    """Net on [0, 1] whose layer of width m folds its input into m identical ramps.

    Layer units compute ``relu(t - i/m)`` for ``i < m``; the alternating
    combination ``m*h_0 - 2m*h_1 + 2m*h_2 - ...`` is a zigzag mapping each
    of the m intervals onto [0, 1]. Composing layers multiplies the number
    of linear pieces.
    """
    if not widths or any((not isinstance(m, int)) or m < 2 for m in widths):
        raise SpecError(f"widths must be integers >= 2, got {widths}")
    weights, biases = [], []
    mix = np.ones(1)  # how the previous layer's units combine into the current scalar t
    for m in widths:
        weights.append(np.outer(np.ones(m), mix))
        biases.append(-np.arange(m) / m)
        mix = np.r_[m, np.tile([-2 * m, 2 * m], m)[: m - 1]].astype(np.float64)
    return ReluNetFC(weights, biases, out_weight=mix[None, :], out_bias=np.zeros(1))


def count_pieces_1d(net: ReluNetFC, resolution: int = 100_000, tol: float = 1e-6) -> int:
    """Linear pieces of a scalar 1-D net on [0, 1], read off secant slopes on a grid.

    A breakpoint inside a grid cell shows up as a single cell whose slope
    matches neither neighbour; such cells are skipped. Two such cells in a
    row, or one at either end, mean a piece narrower than the grid spacing
    and raise :class:`GuardError`.
    """
    if net.input_dim != 1:
        raise SpecError("count_pieces_1d needs a one-dimensional input")
    x = np.linspace(0.0, 1.0, resolution + 1)
    y = net(x[:, None])
    if y.ndim == 2:
        if y.shape[1] != 1:
            raise SpecError("count_pieces_1d needs a scalar output")
        y = y[:, 0]
    slopes = np.diff(y) / np.diff(x)
    runs = []  # lengths of maximal runs of equal slope
    start = 0
    for i in range(1, len(slopes) + 1):
        if i == len(slopes) or abs(slopes[i] - slopes[i - 1]) > tol:
            runs.append(i - start)
            start = i
    pieces = 0
    for i, length in enumerate(runs):
        if length >= 2:
            pieces += 1
            continue
        edge = i == 0 or i == len(runs) - 1
        if edge or runs[i - 1] == 1:
            raise GuardError(f"grid of {resolution} cells too coarse: adjacent slopes alias")
    return pieces
