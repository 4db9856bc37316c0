"""Closed-form re-solve of the network's top linear layer.

Gradient descent leaves the top layer ``[beta, top_weights]`` near, but not
at, a penalised optimum. Given the hidden layers, the top layer is a ridge
regression of the demeaned outcome on ``W = [X_dm, V1_dm]``. We find the
ridge penalty whose solution has the same penalised squared norm as the
descent output and substitute that solution.

Unpenalised columns (normally the parametric ``beta``) get a zero on the
penalty diagonal. Marking every column penalised gives the full-identity
variant.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import linalg

from panelnn.errors import DimensionError, DomainError, SingularityError

LAMBDA_LO = 1e-12
LAMBDA_HI = 1e12
MAX_BISECTIONS = 200


@dataclass(frozen=True)
class TopDesign:
    W: np.ndarray
    y: np.ndarray
    penalized: np.ndarray

    def __post_init__(self):
        W = np.asarray(self.W, dtype=float)
        y = np.asarray(self.y, dtype=float).reshape(-1)
        pen = np.asarray(self.penalized, dtype=bool).reshape(-1)
        if W.ndim != 2 or W.shape[0] != y.shape[0] or W.shape[0] < 1:
            raise DimensionError(f"design {W.shape} incompatible with outcome {y.shape}")
        if pen.shape != (W.shape[1],):
            raise DimensionError("penalty mask must have one entry per design column")
        object.__setattr__(self, "W", W)
        object.__setattr__(self, "y", y)
        object.__setattr__(self, "penalized", pen)

    @property
    def gram(self) -> np.ndarray:
        return self.W.T @ self.W

    @property
    def wty(self) -> np.ndarray:
        return self.W.T @ self.y

    def objective(self, theta, lambda_tilde: float) -> float:
        """Residual sum of squares plus ``lambda_tilde`` times the penalised squared norm."""
        r = self.y - self.W @ theta
        return float(r @ r + lambda_tilde * penalized_norm_sq(self, theta))


@dataclass(frozen=True)
class ImplicitPenalty:
    lambda_tilde: float
    # set when the target norm exceeds the unpenalised solution's norm
    clamped: bool = False

    def __post_init__(self):
        if not self.lambda_tilde >= 0:
            raise DomainError("implicit penalty must be non-negative")


def penalized_norm_sq(design: TopDesign, theta) -> float:
    theta = np.asarray(theta, dtype=float)
    return float(np.sum(theta[design.penalized] ** 2))


class RidgeSystem:
    """Ridge solutions for every penalty from one factorisation.

    Unpenalised columns are profiled out with a QR step; the residualised
    penalised block is decomposed by SVD, so the penalised solution and its
    norm are closed-form functions of the penalty. Directions with zero
    singular value (e.g. dead nodes) get a zero coefficient.
    """

    def __init__(self, design: TopDesign):
        pen = design.penalized
        self.pen = pen
        W, y = design.W, design.y
        P, U = W[:, pen], W[:, ~pen]
        self.P, self.U, self.y = P, U, y
        if U.shape[1]:
            self.Q, self.R = np.linalg.qr(U)
            d = np.abs(np.diag(self.R))
            if d.min() <= max(d.max(), 1.0) * 1e-10:
                raise SingularityError("unpenalised top-layer columns are collinear")
            P_res = P - self.Q @ (self.Q.T @ P)
            y_res = y - self.Q @ (self.Q.T @ y)
        else:
            self.Q = self.R = None
            P_res, y_res = P, y
        if P.shape[1]:
            left, s, self.Vt = np.linalg.svd(P_res, full_matrices=False)
            tiny = s.max() * max(P_res.shape) * np.finfo(float).eps if s.size else 0.0
            self.rank_deficient = bool(np.any(s <= tiny))
            self.s = np.where(s > tiny, s, 0.0)
            self.sc = self.s * (left.T @ y_res)
        else:
            self.Vt, self.s, self.sc = np.zeros((0, 0)), np.zeros(0), np.zeros(0)
            self.rank_deficient = False

    def _shrunk(self, lam):
        denom = self.s ** 2 + lam
        return np.divide(self.sc, denom, out=np.zeros_like(self.sc), where=denom > 0)

    def norm_sq(self, lam: float) -> float:
        return float(np.sum(self._shrunk(lam) ** 2))

    def solve(self, lam: float, allow_min_norm: bool = False) -> np.ndarray:
        if lam < 0:
            raise DomainError("penalty must be non-negative")
        if lam == 0 and self.rank_deficient and not allow_min_norm:
            raise SingularityError("top-layer system is singular at zero penalty")
        b_pen = self.Vt.T @ self._shrunk(lam)
        theta = np.empty(len(self.pen))
        theta[self.pen] = b_pen
        if self.U.shape[1]:
            rhs = self.Q.T @ (self.y - self.P @ b_pen)
            theta[~self.pen] = linalg.solve_triangular(self.R, rhs)
        return theta


def ridge_solve(design: TopDesign, lambda_tilde: float) -> np.ndarray:
    """Solve ``(W'W + lambda_tilde D) b = W'y`` with D the penalty diagonal."""
    return RidgeSystem(design).solve(lambda_tilde)


def solve_implicit_lambda(design: TopDesign, target_norm_sq: float,
                          system: RidgeSystem | None = None) -> ImplicitPenalty:
    """Penalty at which the ridge solution's penalised squared norm equals ``target_norm_sq``.

    The norm decreases strictly in the penalty, so bisection on the log
    penalty is safe. A target at or above the unpenalised norm returns 0.
    """
    if not target_norm_sq > 0:
        raise DomainError("target norm must be positive")
    if not design.penalized.any():
        raise DomainError("no penalised columns to match a norm on")
    system = system or RidgeSystem(design)
    norm_at = system.norm_sq

    n0 = norm_at(0.0)
    if target_norm_sq >= n0:
        return ImplicitPenalty(0.0, clamped=target_norm_sq > n0 * (1 + 1e-12))

    lo, hi = LAMBDA_LO, LAMBDA_HI
    while norm_at(hi) > target_norm_sq:
        hi *= 1e3
        if hi > 1e300:
            raise SingularityError("could not bracket the implicit penalty")
    if norm_at(lo) <= target_norm_sq:
        # target lies between the norms at 0 and at the lower bracket
        a, b = 0.0, lo
        for _ in range(MAX_BISECTIONS):
            mid = 0.5 * (a + b)
            if norm_at(mid) > target_norm_sq:
                a = mid
            else:
                b = mid
        return ImplicitPenalty(0.5 * (a + b))

    log_lo, log_hi = math.log(lo), math.log(hi)
    for _ in range(MAX_BISECTIONS):
        mid = 0.5 * (log_lo + log_hi)
        n = norm_at(math.exp(mid))
        if abs(n - target_norm_sq) <= 1e-13 * target_norm_sq:
            return ImplicitPenalty(math.exp(mid))
        if n > target_norm_sq:
            log_lo = mid
        else:
            log_hi = mid
        if log_hi - log_lo < 1e-15:
            break
    return ImplicitPenalty(math.exp(0.5 * (log_lo + log_hi)))


@dataclass(frozen=True)
class OlsTrickResult:
    theta: np.ndarray
    penalty: ImplicitPenalty
    norm_before: float
    norm_after: float


def ols_trick(design: TopDesign, theta_current, match_norm: bool = True) -> OlsTrickResult:
    """Replace the current top-layer vector by the norm-matched ridge solution.

    With ``match_norm=False`` (an unpenalised fit) the plain least-squares
    solution is returned instead.
    """
    theta_current = np.asarray(theta_current, dtype=float)
    target = penalized_norm_sq(design, theta_current)
    system = RidgeSystem(design)
    if not match_norm or not design.penalized.any():
        theta = system.solve(0.0)
        return OlsTrickResult(theta, ImplicitPenalty(0.0), target, penalized_norm_sq(design, theta))
    if target == 0.0:
        # infinite penalty: penalised entries vanish, the rest is least squares
        theta = system.solve(math.inf)
        return OlsTrickResult(theta, ImplicitPenalty(math.inf), 0.0, 0.0)
    pen = solve_implicit_lambda(design, target, system)
    theta = system.solve(pen.lambda_tilde, allow_min_norm=True)
    return OlsTrickResult(theta, pen, target, penalized_norm_sq(design, theta))


def apply_ols_trick(model, design: TopDesign, match_norm: bool = True):
    """Model-level wrapper: returns a copy of ``model`` with its top layer re-solved.

    Fixed effects are not touched here; :func:`panelnn.training.fit` recovers
    them after calling this.
    """
    from dataclasses import replace

    p_x = model.arch.p_x
    theta = np.concatenate([model.params.beta, model.params.top_weights])
    res = ols_trick(design, theta, match_norm=match_norm)
    params = model.params.replace_top(res.theta[:p_x], res.theta[p_x:])
    return replace(model, params=params, lambda_tilde=res.penalty.lambda_tilde)
