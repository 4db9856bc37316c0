"""Independent reference computations used by the tests.

Nothing here calls the package's own gradient, Jacobian or covariance code.
"""

import numpy as np


def central_difference(f, theta, h=1e-3):
    """Richardson-extrapolated central differences of a function of a flat vector.

    Combining steps ``h`` and ``h/2`` cancels the second-order error term,
    so the truncation error is O(h^4) while rounding noise stays near
    ``eps / h``.
    """
    theta = np.asarray(theta, dtype=float)
    f0 = np.asarray(f(theta), dtype=float)
    out = np.empty(f0.shape + theta.shape)

    def diff(j, step):
        up, dn = theta.copy(), theta.copy()
        up[j] += step
        dn[j] -= step
        return (np.asarray(f(up)) - np.asarray(f(dn))) / (2.0 * step)

    for j in range(theta.size):
        step = h * max(1.0, abs(theta[j]))
        out[..., j] = (4.0 * diff(j, step / 2) - diff(j, step)) / 3.0
    return out


def max_relative_error(analytic, numeric, floor=1e-6):
    """Largest elementwise relative gap.

    The denominator is floored at ``floor`` times the largest magnitude so that
    entries that are exactly zero do not turn rounding noise into huge ratios.
    """
    a, b = np.asarray(analytic, float), np.asarray(numeric, float)
    scale = max(np.abs(a).max(initial=0.0), np.abs(b).max(initial=0.0), 1e-300)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), floor * scale)
    return float(np.max(np.abs(a - b) / denom, initial=0.0))


def dummies(labels):
    labels = np.asarray(labels)
    levels = np.unique(labels)
    return (labels[:, None] == levels[None, :]).astype(float)


def fe_ols(y, X, units):
    """Least squares with explicit unit dummies; returns beta and the full design."""
    D = np.hstack([X, dummies(units)])
    coef, *_ = np.linalg.lstsq(D, y, rcond=None)
    return coef[: X.shape[1]], D, coef


def ols_homoskedastic_cov(X, e, k=None):
    n, p = X.shape
    k = p if k is None else k
    return (e @ e) / (n - k) * np.linalg.inv(X.T @ X)


def ols_cluster_cov(X, e, clusters, k=None):
    """Cluster sandwich with small-sample factor G/(G-1) * N/(N-k), summed cluster by cluster."""
    n, p = X.shape
    k = p if k is None else k
    bread = np.linalg.inv(X.T @ X)
    meat = np.zeros((p, p))
    levels = np.unique(clusters)
    for g in levels:
        s = X[clusters == g].T @ e[clusters == g]
        meat += np.outer(s, s)
    G = len(levels)
    return G / (G - 1) * n / (n - k) * bread @ meat @ bread
