"""Independent NumPy reference for the MLP, its losses and one training step.

Nothing here imports the autodiff engine: gradients are derived by hand so
the package can be checked against a separate implementation.
"""

from __future__ import annotations

import numpy as np


def layer_names(n_layers: int) -> list[tuple[str, str]]:
    return [(f"fc{i}.weight", f"fc{i}.bias") for i in range(n_layers)]


def mlp_forward(params: dict, x: np.ndarray, n_layers: int):
    """Returns logits and the cache of layer inputs and pre-activations."""
    h = x
    cache = []
    for i, (wn, bn) in enumerate(layer_names(n_layers)):
        z = h @ params[wn] + params[bn]
        cache.append((h, z))
        h = np.maximum(z, 0.0) if i < n_layers - 1 else z
    return h, cache


def softmax(z: np.ndarray) -> np.ndarray:
    e = np.exp(z - z.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


def weighted_ce(logits: np.ndarray, labels: np.ndarray, weights: np.ndarray):
    """sum_i w_i * -log softmax(logits_i)[labels_i] and its gradient w.r.t. logits."""
    p = softmax(logits)
    rows = np.arange(len(labels))
    z = logits - logits.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    loss = float(-(weights * logp[rows, labels]).sum())
    d = p.copy()
    d[rows, labels] -= 1.0
    return loss, d * weights[:, None]


def mlp_backward(params: dict, cache, dlogits: np.ndarray, n_layers: int) -> dict:
    grads = {}
    delta = dlogits
    for i in reversed(range(n_layers)):
        wn, bn = layer_names(n_layers)[i]
        h, _ = cache[i]
        grads[wn] = h.T @ delta
        grads[bn] = delta.sum(axis=0)
        if i > 0:
            _, z_prev = cache[i - 1]
            delta = (delta @ params[wn].T) * (z_prev > 0)
    return grads


def ce_and_grad(params, x, y, n_layers):
    logits, cache = mlp_forward(params, x, n_layers)
    w = np.full(len(y), 1.0 / len(y))
    loss, d = weighted_ce(logits, y, w)
    return loss, mlp_backward(params, cache, d, n_layers)


def masked_ce_and_grad(params, x, pseudo, mask, n_layers):
    logits, cache = mlp_forward(params, x, n_layers)
    k = int(mask.sum())
    w = mask.astype(float) / k if k else np.zeros(len(pseudo))
    loss, d = weighted_ce(logits, pseudo, w)
    return loss, mlp_backward(params, cache, d, n_layers)


def flat(d: dict, names: list[str]) -> np.ndarray:
    return np.concatenate([d[n].reshape(-1) for n in names])


def add(a: dict, b: dict, scale: float = 1.0) -> dict:
    return {k: a[k] + scale * b[k] for k in a}


def two_pass_step(params, x_l, y_l, x_u, x_s, *, rho, tau, lam, lr, momentum, wd, alpha, velocity=None, buffer=None):
    """One brute-force FlatMatch update.

    Pass 1: labeled gradient -> eps.  Pass 2: labeled gradient at theta plus
    masked pseudo-label CE gradient at theta + eps (targets from theta on x_u),
    applied to theta.  Returns new params, velocity, buffer (dicts).
    """
    n_layers = len(params) // 2
    names = [n for pair in layer_names(n_layers) for n in pair]
    _, g1 = ce_and_grad(params, x_l, y_l, n_layers)
    norm = np.linalg.norm(flat(g1, names))
    eps = {k: (rho / norm) * v for k, v in g1.items()} if norm >= 1e-12 else {k: 0 * v for k, v in g1.items()}
    tilde = add(params, eps)
    anchor_p = softmax(mlp_forward(params, x_u, n_layers)[0])
    pseudo = anchor_p.argmax(axis=1)
    mask = anchor_p.max(axis=1) > tau
    _, g_l = ce_and_grad(params, x_l, y_l, n_layers)
    _, g_x = masked_ce_and_grad(tilde, x_s, pseudo, mask, n_layers)
    g = add(g_l, g_x, lam)
    step = add(g, params, wd)
    velocity = step if velocity is None else add(step, {k: momentum * v for k, v in velocity.items()})
    new = add(params, velocity, -lr)
    buffer = buffer if buffer is not None else {k: np.zeros_like(v) for k, v in params.items()}
    buffer = {k: alpha * buffer[k] + (1 - alpha) * g_l[k] for k in buffer}
    return new, velocity, buffer
