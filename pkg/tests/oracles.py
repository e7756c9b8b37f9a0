"""Independent oracles: deliberately naive implementations used only to check
the real ones.  Nothing here may import the code paths it verifies."""

import numpy as np


def matmul_triple_loop(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    m, k = a.shape
    k2, n = b.shape
    assert k == k2
    out = np.zeros((m, n))
    for i in range(m):
        for j in range(n):
            for t in range(k):
                out[i, j] += a[i, t] * b[t, j]
    return out


def pair_counts_loop(x, y):
    """Pure-python O(m^2) pair classification: (Nc, Nd, Tx_only, Ty_only, both)."""
    x = list(x)
    y = list(y)
    nc = nd = tx = ty = tb = 0
    m = len(x)
    for a in range(m):
        for b in range(a + 1, m):
            dx = x[a] - x[b]
            dy = y[a] - y[b]
            if dx == 0 and dy == 0:
                tb += 1
            elif dx == 0:
                tx += 1
            elif dy == 0:
                ty += 1
            elif (dx > 0) == (dy > 0):
                nc += 1
            else:
                nd += 1
    return nc, nd, tx, ty, tb


def pair_counts_broadcast(x, y):
    """Vectorized O(m^2) pair classification over full sign matrices."""
    x = np.asarray(x)
    y = np.asarray(y)
    m = x.size
    iu = np.triu_indices(m, k=1)
    sx = np.sign(x[:, None] - x[None, :])[iu]
    sy = np.sign(y[:, None] - y[None, :])[iu]
    nc = int(np.sum((sx * sy) > 0))
    nd = int(np.sum((sx * sy) < 0))
    tb = int(np.sum((sx == 0) & (sy == 0)))
    tx = int(np.sum((sx == 0) & (sy != 0)))
    ty = int(np.sum((sx != 0) & (sy == 0)))
    return nc, nd, tx, ty, tb


def somers_from_counts(counts, independent_ties):
    nc, nd = counts[0], counts[1]
    denom = nc + nd + independent_ties
    return 0.0 if denom == 0 else (nc - nd) / denom


def kl_monte_carlo(mu, log_var, n_draws, seed=0):
    """MC estimate of KL(N(mu, diag exp(log_var)) || N(0, I)) summed over dims."""
    gen = np.random.Generator(np.random.PCG64(seed))
    mu = np.asarray(mu, dtype=np.float64).ravel()
    lv = np.asarray(log_var, dtype=np.float64).ravel()
    std = np.exp(0.5 * lv)
    z = mu + std * gen.normal(size=(n_draws, mu.size))
    log_q = -0.5 * ((z - mu) ** 2 / np.exp(lv) + lv + np.log(2 * np.pi))
    log_p = -0.5 * (z ** 2 + np.log(2 * np.pi))
    return float(np.mean(np.sum(log_q - log_p, axis=1)))


def finite_difference_gradients(loss_fn, tensors, h=1e-5):
    """Central-difference gradient of loss_fn() for every entry of each tensor."""
    grads = []
    for t in tensors:
        flat = t.value.ravel()
        g = np.zeros(flat.size)
        for idx in range(flat.size):
            orig = flat[idx]
            flat[idx] = orig + h
            lp = loss_fn()
            flat[idx] = orig - h
            lm = loss_fn()
            flat[idx] = orig
            g[idx] = (lp - lm) / (2.0 * h)
        grads.append(g.reshape(t.value.shape))
    return grads


def max_relative_error(analytic, numeric, floor=1e-6):
    analytic = np.asarray(analytic).ravel()
    numeric = np.asarray(numeric).ravel()
    scale = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return float(np.max(np.abs(analytic - numeric) / scale))


def check_gradients(loss_fn, named_tensors, h=1e-5, floor=1e-6):
    """Return (worst relative error, offending name) over all tracked tensors."""
    worst, worst_name = 0.0, ""
    for name, t in named_tensors:
        fd = finite_difference_gradients(loss_fn, [t], h=h)[0]
        rel = max_relative_error(t.grad_or_zeros(), fd, floor=floor)
        if rel > worst:
            worst, worst_name = rel, name
    return worst, worst_name
