"""Delta-method inference for a fitted panel network.

The fitted values are linearised in all parameters through the Jacobian
``xi`` (one column per parameter, blocks in ``Architecture.blocks`` order).
Parameter covariances use ``xi`` like a regression design, with a ridge
term on penalised entries in the bread.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import linalg, stats

from panelnn.errors import (
    CovarianceInvalidError,
    DegenerateClusterError,
    DimensionError,
    SingularityError,
)
from panelnn.network import Architecture, ParamSet, activate_prime, forward
from panelnn.panel_data import GroupIndex, PanelDataset, demean


@dataclass(frozen=True)
class Jacobian:
    matrix: np.ndarray
    block_index: dict[str, slice]

    @property
    def n_params(self) -> int:
        return self.matrix.shape[1]

    def block(self, name: str) -> np.ndarray:
        return self.matrix[:, self.block_index[name]]


def param_jacobian(params: ParamSet, arch: Architecture, X, Z) -> Jacobian:
    """Derivatives of ``forward(...).fitted`` with respect to every parameter.

    Reverse accumulation row by row: ``delta`` carries d fitted / d(layer
    output) down the network, starting from the top weights.
    """
    cache = forward(params, arch, X, Z)
    X = np.asarray(X, dtype=float)
    n = X.shape[0]
    sl = arch.block_slices()
    J = np.empty((n, arch.n_params))
    J[:, sl["beta"]] = X
    J[:, sl["top"]] = cache.top
    inputs = [np.asarray(Z, dtype=float)] + cache.node_matrices[:-1]
    delta = np.broadcast_to(params.top_weights, (n, arch.top_size))
    depth = arch.depth
    for k, w in enumerate(params.hidden_weights):
        layer = depth - 1 - k  # bottom-up position of this layer
        delta = delta * activate_prime(arch.activation, cache.preactivations[layer])
        h_in = inputs[layer]
        J[:, sl[f"W{k + 2}"]] = (h_in[:, :, None] * delta[:, None, :]).reshape(n, -1)
        J[:, sl[f"b{k + 2}"]] = delta
        delta = delta @ w.T
    return Jacobian(J, sl)


def jacobian(model, X, Z) -> Jacobian:
    return param_jacobian(model.params, model.arch, X, Z)


@dataclass(frozen=True)
class ParamCovariance:
    matrix: np.ndarray
    estimator_kind: str
    dof: float
    block_index: dict = field(default_factory=dict)

    def se(self) -> np.ndarray:
        d = np.diag(self.matrix)
        scale = max(np.abs(d).max(initial=0.0), 1e-300)
        if np.any(d < -1e-10 * scale):
            raise CovarianceInvalidError("covariance has a negative diagonal entry")
        return np.sqrt(np.clip(d, 0.0, None))


def _bread(xi: np.ndarray, lam, mask) -> tuple[np.ndarray, np.ndarray]:
    """``(xi'xi + lam I*)^-1`` and ``xi'xi``; ``I*`` zeroes unpenalised entries.

    ``lam`` may be a scalar or one value per parameter.
    """
    p = xi.shape[1]
    ridge = np.broadcast_to(np.asarray(lam, dtype=float), (p,)).copy()
    if mask is not None:
        ridge[np.asarray(mask, dtype=bool)] = 0.0
    xtx = xi.T @ xi
    A = xtx + np.diag(ridge)
    try:
        c = linalg.cho_factor(A, check_finite=False)
    except linalg.LinAlgError:
        raise SingularityError("bread matrix is singular") from None
    d = np.diag(c[0])
    if d.min() <= d.max() * 1e-8:
        raise SingularityError("bread matrix is numerically singular")
    return linalg.cho_solve(c, np.eye(p), check_finite=False), xtx


def _dof(n: int, p_raw: int, bread: np.ndarray, xtx: np.ndarray, dof: str) -> tuple[float, str]:
    if dof == "raw" and n > p_raw:
        return float(p_raw), "raw"
    if dof not in ("raw", "effective"):
        raise ValueError("dof must be 'raw' or 'effective'")
    # trace of the ridge hat matrix xi (xi'xi + lam I*)^-1 xi'
    eff = float(np.sum(bread * xtx))
    if n <= eff:
        raise CovarianceInvalidError("no residual degrees of freedom left")
    return eff, "effective"


def _symmetrize(M):
    return 0.5 * (M + M.T)


def covariance_homoskedastic(jac: Jacobian, residuals, lam=0.0, mask=None, dof: str = "effective",
                             absorbed: int = 0) -> ParamCovariance:
    """``sigma^2 (xi'xi + lam I*)^-1`` with ``sigma^2 = e'e / (N - absorbed - p)``.

    ``dof="raw"`` takes ``p`` as the parameter count; ``"effective"`` uses the
    trace of the ridge hat matrix, which equals the count when nothing is
    penalised. A raw count with ``N <= p`` falls back to the effective one;
    ``ParamCovariance.dof`` records what was used. ``absorbed`` counts
    intercepts removed by demeaning before ``xi`` was formed.
    """
    xi = jac.matrix
    e = np.asarray(residuals, dtype=float).reshape(-1)
    if e.shape[0] != xi.shape[0]:
        raise DimensionError("residual length does not match Jacobian rows")
    n, p = xi.shape
    if n <= p and np.all(np.asarray(lam) == 0):
        raise SingularityError(f"bread is singular with N={n} <= p={p} and no penalty")
    bread, xtx = _bread(xi, lam, mask)
    k, _ = _dof(n - absorbed, p, bread, xtx, dof)
    sigma2 = float(e @ e) / (n - absorbed - k)
    return ParamCovariance(_symmetrize(sigma2 * bread), "homoskedastic", k, jac.block_index)


def covariance_cluster(jac: Jacobian, residuals, clusters: GroupIndex, lam=0.0, mask=None,
                       dof: str = "effective") -> ParamCovariance:
    """Cluster-robust sandwich with factor ``G/(G-1) * N/(N-p)``.

    The meat sums outer products of within-cluster score totals
    ``xi_g' e_g``.
    """
    xi = jac.matrix
    e = np.asarray(residuals, dtype=float).reshape(-1)
    if e.shape[0] != xi.shape[0] or clusters.n_rows != xi.shape[0]:
        raise DimensionError("residuals, clusters and Jacobian disagree on N")
    g = clusters.group_count
    if g < 2:
        raise DegenerateClusterError("cluster-robust covariance needs at least two clusters")
    n, p = xi.shape
    if n <= p and np.all(np.asarray(lam) == 0):
        raise SingularityError(f"bread is singular with N={n} <= p={p} and no penalty")
    bread, xtx = _bread(xi, lam, mask)
    k, _ = _dof(n, p, bread, xtx, dof)
    scores = clusters.sums(xi * e[:, None])
    meat = scores.T @ scores
    factor = g / (g - 1) * n / (n - k)
    return ParamCovariance(_symmetrize(factor * bread @ meat @ bread), "cluster_robust", k, jac.block_index)


@dataclass(frozen=True)
class IntervalEstimate:
    point: float
    se: float
    lower: float
    upper: float
    level: float

    def covers(self, value: float) -> bool:
        return self.lower <= value <= self.upper


def critical_value(level: float) -> float:
    if not 0.0 < level < 1.0:
        raise ValueError("level must lie in (0, 1)")
    return float(stats.norm.ppf(0.5 + level / 2.0))


def interval(point: float, se: float, level: float) -> IntervalEstimate:
    z = critical_value(level)
    return IntervalEstimate(float(point), float(se), float(point - z * se), float(point + z * se), level)


@dataclass(frozen=True)
class ModelInference:
    """Everything needed for intervals on a fitted model.

    ``unit_jacobian_means`` holds the training-sample mean Jacobian row of
    each unit: the recovered fixed effect depends on the parameters through
    these means, so prediction gradients are taken relative to them.
    """

    cov: ParamCovariance
    sigma2: float
    units: np.ndarray
    unit_counts: np.ndarray
    unit_jacobian_means: np.ndarray
    penalty_diag: np.ndarray = field(repr=False, default=None)


def penalty_diagonal(model, n: int) -> np.ndarray:
    """Per-parameter ridge weights on the residual-sum-of-squares scale.

    Hidden-layer entries were fitted against a mean-squared loss with
    penalty ``lam``, i.e. ``n * lam`` on the sum scale; the re-solved top
    layer sits at its implicit penalty. Unpenalised entries get zero.
    """
    arch = model.arch
    sl = arch.block_slices()
    diag = np.full(arch.n_params, n * model.lam)
    top_pen = model.lambda_tilde if math.isfinite(model.lambda_tilde) else n * model.lam
    diag[sl["top"]] = top_pen
    diag[model.penalty.unpenalized_mask] = 0.0
    return diag


def infer(model, train: PanelDataset, kind: str = "cluster", dof: str = "effective") -> ModelInference:
    """Covariance of all parameters from the within-transformed training sample.

    The cluster-robust version does not charge the unit intercepts against
    the degrees of freedom (they are nested in the clusters); the
    homoskedastic version does.
    """
    idx = train.unit_groups()
    jac_raw = jacobian(model, train.X, train.Z)
    xi = Jacobian(demean(jac_raw.matrix, idx), jac_raw.block_index)
    resid = train.y - model.predict_panel(train)
    n = train.n_rows
    diag = penalty_diagonal(model, n)
    mask = model.penalty.unpenalized_mask
    if kind == "cluster":
        cov = covariance_cluster(xi, resid, train.cluster_groups(), diag, mask, dof)
    elif kind == "homoskedastic":
        cov = covariance_homoskedastic(xi, resid, diag, mask, dof, absorbed=idx.group_count)
    else:
        raise ValueError("kind must be 'cluster' or 'homoskedastic'")
    bread, xtx = _bread(xi.matrix, diag, mask)
    df_fit = float(np.sum(bread * xtx))
    # unit intercepts cost one degree of freedom each
    sigma2 = float(resid @ resid) / max(n - idx.group_count - df_fit, 1.0)
    return ModelInference(
        cov=cov,
        sigma2=sigma2,
        units=idx.labels,
        unit_counts=idx.counts,
        unit_jacobian_means=idx.means(jac_raw.matrix),
        penalty_diag=diag,
    )


def parametric_ci(model, cov: ParamCovariance, level: float = 0.95) -> list[IntervalEstimate]:
    """Normal intervals for each unpenalised parametric coefficient."""
    se = cov.se()
    sl = model.arch.block_slices()["beta"]
    unpen = model.penalty.unpenalized_mask[sl]
    out = []
    for j in np.flatnonzero(unpen):
        out.append(interval(model.params.beta[j], se[sl.start + j], level))
    return out


def prediction_interval(model, inference: ModelInference, X, Z, unit_ids, level: float = 0.95) -> list[IntervalEstimate]:
    """Pointwise intervals for observed outcomes at new rows of known units.

    Variance is the delta-method term plus the noise variance and the
    noise carried into the unit's recovered intercept.
    """
    unit_ids = np.asarray(unit_ids).astype(np.int64)
    point = model.predict(X, Z, unit_ids)  # raises for unknown units
    pos = np.searchsorted(inference.units, unit_ids)
    jac = jacobian(model, X, Z).matrix - inference.unit_jacobian_means[pos]
    var_fit = np.einsum("ij,jk,ik->i", jac, inference.cov.matrix, jac)
    var = np.clip(var_fit, 0.0, None) + inference.sigma2 * (1.0 + 1.0 / inference.unit_counts[pos])
    se = np.sqrt(var)
    z = critical_value(level)
    return [IntervalEstimate(float(p), float(s), float(p - z * s), float(p + z * s), level) for p, s in zip(point, se)]


def prediction_arrays(model, inference: ModelInference, X, Z, unit_ids, level: float = 0.95):
    """Vectorised :func:`prediction_interval`: returns (point, se, lower, upper)."""
    ints = prediction_interval(model, inference, X, Z, unit_ids, level)
    arr = np.array([(i.point, i.se, i.lower, i.upper) for i in ints]).reshape(-1, 4)
    return arr[:, 0], arr[:, 1], arr[:, 2], arr[:, 3]
