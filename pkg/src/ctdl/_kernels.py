"""Compiled inner loops for the dense network and the SOM.

Network parameters live in one flat float64 vector. Layer l occupies
``W_l`` (out x in, row-major) followed by ``b_l`` (out), so a layer computes
``W_l @ h + b_l``. ``act`` selects the hidden nonlinearity: 0 relu, 1 tanh.
"""
import math

import numpy as np
from numba import njit


@njit(cache=True, fastmath=True, error_model="numpy")
def forward(params, sizes, act, x):
    n_layers = sizes.shape[0] - 1
    h = x.copy()
    off = 0
    for l in range(n_layers):
        n_in = sizes[l]
        n_out = sizes[l + 1]
        b_off = off + n_in * n_out
        z = np.empty(n_out)
        for j in range(n_out):
            s = params[b_off + j]
            row = off + j * n_in
            for i in range(n_in):
                s += params[row + i] * h[i]
            z[j] = s
        if l < n_layers - 1:
            for j in range(n_out):
                if act == 0:
                    if z[j] < 0.0:
                        z[j] = 0.0
                else:
                    z[j] = math.tanh(z[j])
        h = z
        off = b_off + n_out
    return h


@njit(cache=True, fastmath=True, error_model="numpy")
def vjp(params, sizes, act, x, dout, grad):
    """Write d(dout . f(x)) / d(params) into ``grad``; return f(x)."""
    n_layers = sizes.shape[0] - 1
    width = 0
    for l in range(n_layers + 1):
        if sizes[l] > width:
            width = sizes[l]
    acts = np.zeros((n_layers + 1, width))
    offsets = np.empty(n_layers, dtype=np.int64)
    for i in range(sizes[0]):
        acts[0, i] = x[i]
    off = 0
    for l in range(n_layers):
        offsets[l] = off
        n_in = sizes[l]
        n_out = sizes[l + 1]
        b_off = off + n_in * n_out
        for j in range(n_out):
            s = params[b_off + j]
            row = off + j * n_in
            for i in range(n_in):
                s += params[row + i] * acts[l, i]
            if l < n_layers - 1:
                if act == 0:
                    if s < 0.0:
                        s = 0.0
                else:
                    s = math.tanh(s)
            acts[l + 1, j] = s
        off = b_off + n_out

    out = acts[n_layers, : sizes[n_layers]].copy()
    g = dout.copy()
    for l in range(n_layers - 1, -1, -1):
        n_in = sizes[l]
        n_out = sizes[l + 1]
        off = offsets[l]
        b_off = off + n_in * n_out
        if l < n_layers - 1:
            # g is d/d(activation); convert to d/d(pre-activation)
            for j in range(n_out):
                a = acts[l + 1, j]
                if act == 0:
                    if a <= 0.0:
                        g[j] = 0.0
                else:
                    g[j] *= 1.0 - a * a
        for j in range(n_out):
            gj = g[j]
            grad[b_off + j] = gj
            row = off + j * n_in
            for i in range(n_in):
                grad[row + i] = gj * acts[l, i]
        if l > 0:
            g_in = np.zeros(n_in)
            for j in range(n_out):
                gj = g[j]
                if gj != 0.0:
                    row = off + j * n_in
                    for i in range(n_in):
                        g_in[i] += gj * params[row + i]
            g = g_in
    return out


@njit(cache=True, fastmath=True, error_model="numpy")
def adam_update(params, grad, m, v, t, lr, beta1, beta2, eps):
    c1 = 1.0 - beta1**t
    c2 = 1.0 - beta2**t
    for k in range(params.shape[0]):
        gk = grad[k]
        mk = beta1 * m[k] + (1.0 - beta1) * gk
        vk = beta2 * v[k] + (1.0 - beta2) * gk * gk
        # flush before moments decay into subnormals (10-100x slower arithmetic);
        # written as selects so the loop vectorizes
        mk = mk if abs(mk) >= 1e-200 else 0.0
        vk = vk if vk >= 1e-200 else 0.0
        m[k] = mk
        v[k] = vk
        params[k] -= lr * (mk / c1) / (math.sqrt(vk / c2) + eps)


@njit(cache=True, error_model="numpy")
def sgd_update(params, grad, lr):
    for k in range(params.shape[0]):
        params[k] -= lr * grad[k]


@njit(cache=True, error_model="numpy")
def bmu(weights, s):
    best = 0
    best_d2 = np.inf
    for j in range(weights.shape[0]):
        d2 = 0.0
        for k in range(weights.shape[1]):
            diff = s[k] - weights[j, k]
            d2 += diff * diff
        if d2 < best_d2:
            best_d2 = d2
            best = j
    return best, math.sqrt(best_d2)


@njit(cache=True, error_model="numpy")
def som_pull(weights, frozen, lattice, s, b, alpha, sigma):
    """Move every unfrozen unit toward ``s`` by alpha * gaussian(lattice distance to b)."""
    two_s2 = 2.0 * sigma * sigma
    for j in range(weights.shape[0]):
        if frozen[j]:
            continue
        dx = lattice[j, 0] - lattice[b, 0]
        dy = lattice[j, 1] - lattice[b, 1]
        h = alpha * math.exp(-(dx * dx + dy * dy) / two_s2)
        if h == 0.0:
            continue
        for k in range(weights.shape[1]):
            weights[j, k] += h * (s[k] - weights[j, k])
