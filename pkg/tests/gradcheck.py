"""Central finite-difference oracle for the reverse-mode engine."""

import numpy as np

from bitnet_lab.nn import backward, forward, init_params


def relative_error(analytic, numeric):
    den = max(np.abs(analytic).max(), np.abs(numeric).max())
    return 0.0 if den < 1e-10 else float(np.abs(analytic - numeric).max() / den)


def perturbed_store(graph, seed):
    """He-initialized store with generic batchnorm scale/shift and biases."""
    store = init_params(graph, seed)
    rng = np.random.default_rng(seed + 1)
    for _, name, p in store.items():
        if name in ("scale", "shift", "bias"):
            p.value += rng.normal(0.0, 0.3, p.value.shape)
    return store


def kink_margin(graph, store, x):
    """Smallest distance of any relu input from zero or any max-pool window from a tie.

    Central differences are only meaningful when every perturbation stays
    on one linear piece, so callers redraw inputs until this is comfortably
    larger than the step.
    """
    outputs = forward(graph, store, x, "train").outputs
    margin = np.inf
    for node in graph.nodes:
        z = outputs[node.inputs[0]] if node.inputs else None
        if node.kind == "relu":
            margin = min(margin, float(np.abs(z).min()))
        elif node.kind == "maxpool3x3s2":
            padded = np.pad(z, ((0, 0), (0, 0), (1, 1), (1, 1)), constant_values=-np.inf)
            windows = np.lib.stride_tricks.sliding_window_view(padded, (3, 3), axis=(2, 3))[:, :, ::2, ::2]
            top = np.sort(windows.reshape(*windows.shape[:4], 9), axis=-1)
            # ties among zeros come from inactive relus and carry no gradient
            gaps = (top[..., -1] - top[..., -2])[top[..., -1] != 0.0]
            if gaps.size:
                margin = min(margin, float(gaps.min()))
    return margin


def generic_input(graph, store, shape, rng, margin=1e-3, tries=50):
    """Draw standard-normal inputs until no unit sits within ``margin`` of a kink."""
    for _ in range(tries):
        x = rng.normal(size=shape)
        if kink_margin(graph, store, x) > margin:
            return x
    raise RuntimeError("could not draw an input away from the activation kinks")


def max_fd_error(graph, x, labels, store, eps=1e-5):
    """Worst per-tensor relative error between backprop and central differences."""
    store.zero_grad()
    backward(forward(graph, store, x, "train", labels))

    def loss():
        return forward(graph, store, x, "train", labels).loss

    worst = 0.0
    for _, _, p in store.items():
        numeric = np.zeros_like(p.value)
        for idx in np.ndindex(p.value.shape):
            old = p.value[idx]
            p.value[idx] = old + eps
            up = loss()
            p.value[idx] = old - eps
            down = loss()
            p.value[idx] = old
            numeric[idx] = (up - down) / (2 * eps)
        worst = max(worst, relative_error(p.grad, numeric))
    return worst
