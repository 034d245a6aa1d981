"""Independent reference computations used as test oracles.

Nothing here calls into the autodiff core; everything is plain numpy with
explicit loops so that it can disagree with the code under test.
"""

import numpy as np

from mobilellm.numerics import relative_error


def ref_rope(x, positions, base=10000.0):
    """Pairwise rotation, one (position, pair) at a time. ``x`` is [T, d]."""
    t, d = x.shape
    out = np.array(x, dtype=np.float64)
    for i, pos in enumerate(positions):
        for j in range(d // 2):
            theta = pos * base ** (-2.0 * j / d)
            a, b = x[i, 2 * j], x[i, 2 * j + 1]
            out[i, 2 * j] = a * np.cos(theta) - b * np.sin(theta)
            out[i, 2 * j + 1] = a * np.sin(theta) + b * np.cos(theta)
    return out


def ref_mha(x, wq, wk, wv, wo, n_heads, n_kv_heads):
    """Causal attention for one sequence ``x`` [T, d] with per-head loops.

    Query head h reads kv-head ``h // (n_heads // n_kv_heads)``.
    """
    x = np.asarray(x, dtype=np.float64)
    t = x.shape[0]
    hd = wq.shape[0] // n_heads
    group = n_heads // n_kv_heads
    pos = np.arange(t)
    q_all = x @ np.asarray(wq, np.float64).T
    k_all = x @ np.asarray(wk, np.float64).T
    v_all = x @ np.asarray(wv, np.float64).T
    heads = []
    for h in range(n_heads):
        g = h // group
        q = ref_rope(q_all[:, h * hd:(h + 1) * hd], pos)
        k = ref_rope(k_all[:, g * hd:(g + 1) * hd], pos)
        v = v_all[:, g * hd:(g + 1) * hd]
        out = np.zeros((t, hd))
        for i in range(t):
            s = np.array([q[i] @ k[j] / np.sqrt(hd) for j in range(i + 1)])
            w = np.exp(s - s.max())
            w /= w.sum()
            out[i] = w @ v[: i + 1]
        heads.append(out)
    return np.concatenate(heads, axis=1) @ np.asarray(wo, np.float64).T


def fd_check(loss_fn, params, step=1e-5):
    """Finite-difference every element of ``params``; return all relative errors.

    ``loss_fn()`` must rebuild the graph from the current ``.data`` arrays and
    return a scalar DiffTensor. Analytic gradients come from one backward pass.
    """
    for p in params:
        p.zero_grad()
    loss_fn().backward()
    analytic = [p.grad.copy() for p in params]
    errs = []
    for p, a in zip(params, analytic):
        flat = p.data.reshape(-1)
        num = np.zeros(flat.size)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            hi = loss_fn().item()
            flat[i] = orig - step
            lo = loss_fn().item()
            flat[i] = orig
            num[i] = (hi - lo) / (2 * step)
        errs.append(relative_error(a.reshape(-1), num))
    return np.concatenate(errs)
