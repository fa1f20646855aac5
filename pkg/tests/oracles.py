"""Independent reference computations used by the test suite."""

import itertools

import mpmath
import numpy as np

mpmath.mp.dps = 50


def depround_distribution(q, eps=1e-12):
    """Exact subset distribution of dependent rounding.

    Branches over both outcomes of every pair update, always pairing the
    two lowest-index fractional entries.  Returns {frozenset: probability}.
    """
    out = {}

    def rec(p, prob):
        frac = [i for i, x in enumerate(p) if eps < x < 1 - eps]
        if len(frac) < 2:
            p = [round(x) for x in p]
            key = frozenset(i for i, x in enumerate(p) if x == 1)
            out[key] = out.get(key, 0.0) + prob
            return
        i, j = frac[:2]
        a, b = p[i], p[j]
        beta, gamma = min(1 - a, b), min(a, 1 - b)
        up = list(p)
        up[i], up[j] = a + beta, b - beta
        down = list(p)
        down[i], down[j] = a - gamma, b + gamma
        rec(up, prob * gamma / (beta + gamma))
        rec(down, prob * beta / (beta + gamma))

    rec([float(x) for x in q], 1.0)
    return out


def subset_marginals(dist, n):
    m = np.zeros(n)
    for s, p in dist.items():
        for j in s:
            m[j] += p
    return m


def exp3_step_mp(w, q, rewards, eta, delta):
    """One EXP3 step in 50-digit arithmetic; returns (w, q) as mpf lists."""
    n = len(w)
    w = [mpmath.mpf(x) for x in w]
    for j, r in rewards.items():
        w[j] = w[j] * mpmath.exp(mpmath.mpf(delta) * (mpmath.mpf(r) / mpmath.mpf(q[j])) / n)
    total = mpmath.fsum(w)
    eta = mpmath.mpf(eta)
    return w, [(1 - eta) * x / total + eta / n for x in w]


def cap_threshold_mp(w, ratio):
    """Solve a = ratio * sum_j min(w_j, a) by bisection."""
    w = [mpmath.mpf(x) for x in w]
    ratio = mpmath.mpf(ratio)
    f = lambda a: a - ratio * mpmath.fsum(min(x, a) for x in w)  # noqa: E731
    lo, hi = mpmath.mpf(0) + mpmath.mpf(10) ** -40, max(w)
    for _ in range(400):
        mid = (lo + hi) / 2
        if f(mid) < 0:
            lo = mid
        else:
            hi = mid
    return (lo + hi) / 2


def exp3m_step_mp(w, q, capped, rewards, k, eta, delta):
    """One EXP3.M step in 50-digit arithmetic; returns (w, q, capped, a)."""
    n = len(w)
    w = [mpmath.mpf(x) for x in w]
    for j, r in rewards.items():
        if not capped[j]:
            w[j] = w[j] * mpmath.exp(mpmath.mpf(delta) * (mpmath.mpf(r) / mpmath.mpf(q[j])) / n)
    eta = mpmath.mpf(eta)
    ratio = (mpmath.mpf(1) / k - eta / n) / (1 - eta)
    a = None
    new_capped = [False] * n
    w_eff = list(w)
    if max(w) >= ratio * mpmath.fsum(w):
        a = cap_threshold_mp(w, ratio)
        new_capped = [x >= a for x in w]
        w_eff = [a if c else x for x, c in zip(w, new_capped)]
    total = mpmath.fsum(w_eff)
    q = [mpmath.mpf(1) if c else k * ((1 - eta) * x / total + eta / n)
         for x, c in zip(w_eff, new_capped)]
    return w, q, new_capped, a


def simplex_grid(n, resolution=1e-3):
    """Every point of the n-simplex (n <= 3) on a regular grid."""
    m = int(round(1 / resolution))
    if n == 2:
        i = np.arange(m + 1)
        return np.stack([i, m - i], axis=1) / m
    if n == 3:
        i, j = np.meshgrid(np.arange(m + 1), np.arange(m + 1), indexing="ij")
        keep = i + j <= m
        i, j = i[keep], j[keep]
        return np.stack([i, j, m - i - j], axis=1) / m
    raise ValueError("grid search only for n <= 3")


def grid_argmin_single(alphas, norms_sq, k=1, resolution=1e-3):
    """Minimize (1/k) sum alpha^2 |h|^2 / q over the simplex grid."""
    grid = simplex_grid(len(alphas), resolution)
    num = np.asarray(alphas) ** 2 * np.asarray(norms_sq)
    with np.errstate(divide="ignore", invalid="ignore"):
        vals = np.where(num > 0, num / grid, 0.0).sum(axis=1) / k
    vals[~np.isfinite(vals)] = np.inf
    return grid[np.argmin(vals)]


def k_subsets(n, k):
    return [frozenset(c) for c in itertools.combinations(range(n), k)]


def offset_view_arrays(rng, n, dim=3, k=1):
    """Random (alphas, embeddings, q) whose aggregate has no near-zero coordinate.

    Embeddings are centred at one so a relative tolerance per coordinate is
    meaningful; q mixes alpha with uniform and sums to k with entries <= 1.
    """
    alphas = rng.dirichlet(np.ones(n))
    emb = 1.0 + 0.5 * rng.uniform(-1, 1, size=(n, dim))
    q = k * (0.5 * alphas + 0.5 / n)
    while q.max() > 1 + 1e-15:
        free = q < 1
        q = np.minimum(q, 1.0)
        q[free] *= (k - (~free).sum()) / q[free].sum()
    return alphas, emb, q
