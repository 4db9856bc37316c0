"""Synthetic panel, fixed-effects OLS baseline and the Monte Carlo harness.

The outcome is ``y* = alpha_i + t + log phi_5(Z_it)`` with ``alpha_i = i``
and ``phi_5`` the standard normal density in five dimensions; observed
``y`` adds gaussian noise. Each unit draws its own mean vector and
covariance for ``Z``.
"""

from __future__ import annotations

import csv
import dataclasses
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy import linalg

from panelnn.errors import HarnessError, PanelNNError, SingularityError, UnknownUnitError
from panelnn.inference import infer, parametric_ci, prediction_arrays
from panelnn.panel_data import PanelDataset, demean, temporal_split
from panelnn.training import lambda_path

N_Z = 5
LOG_2PI = math.log(2.0 * math.pi)


def log_mvn_density(z) -> np.ndarray | float:
    """Log standard-normal density; ``z`` is a vector or a matrix of row vectors."""
    z = np.asarray(z, dtype=float)
    return -0.5 * z.shape[-1] * LOG_2PI - 0.5 * np.sum(z * z, axis=-1)


@dataclass(frozen=True)
class DGPConfig:
    n_i: int = 100
    n_t: int = 20
    noise_sd: float = 20.0
    mean_scale: float = 2.0
    cov_scale: float = 3.0
    # shifts unit means along the diagonal in proportion to i/n_i, which
    # makes the nonlinear term correlated with the unit intercept
    fe_link: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.n_t < 10:
            raise ValueError("need at least 10 periods for the temporal split")
        if self.n_i < 1:
            raise ValueError("need at least one unit")
        if self.noise_sd < 0:
            raise ValueError("noise_sd must be non-negative")


@dataclass(frozen=True)
class SimulatedPanel:
    data: PanelDataset
    y_star: np.ndarray
    alpha: np.ndarray
    true_beta: float = 1.0
    unit_means: np.ndarray = field(default=None, repr=False)
    unit_covs: np.ndarray = field(default=None, repr=False)


def unit_distributions(config: DGPConfig, rng) -> tuple[np.ndarray, np.ndarray]:
    shift = config.fe_link * np.arange(1, config.n_i + 1) / config.n_i
    mus = config.mean_scale * (rng.standard_normal((config.n_i, N_Z)) + shift[:, None])
    A = config.cov_scale * rng.standard_normal((config.n_i, N_Z, N_Z))
    covs = A @ A.transpose(0, 2, 1) / N_Z + 0.1 * np.eye(N_Z)
    return mus, covs


def generate_panel(config: DGPConfig) -> SimulatedPanel:
    rng = np.random.default_rng(config.seed)
    mus, covs = unit_distributions(config, rng)
    n_i, n_t = config.n_i, config.n_t
    chol = np.linalg.cholesky(covs)
    e = rng.standard_normal((n_i, n_t, N_Z))
    Z = mus[:, None, :] + np.einsum("ijk,itk->itj", chol, e)
    Z = Z.reshape(n_i * n_t, N_Z)
    unit = np.repeat(np.arange(1, n_i + 1), n_t)
    t = np.tile(np.arange(1, n_t + 1), n_i)
    alpha = np.arange(1, n_i + 1, dtype=float)
    y_star = unit + t + log_mvn_density(Z)
    y = y_star + config.noise_sd * rng.standard_normal(len(y_star))
    data = PanelDataset(
        unit_id=unit,
        time=t,
        y=y,
        X=t.astype(float).reshape(-1, 1),
        Z=Z,
        x_names=("t",),
        z_names=tuple(f"z{j + 1}" for j in range(N_Z)),
    )
    return SimulatedPanel(data, y_star.astype(float), alpha, 1.0, mus, covs)


@dataclass(frozen=True)
class FEOLSResult:
    coef: np.ndarray
    units: np.ndarray
    fixed_effects: np.ndarray
    fitted: np.ndarray
    cov: np.ndarray
    val_mse: float = math.nan

    @property
    def beta_hat(self) -> np.ndarray:
        return self.coef

    @property
    def se(self) -> np.ndarray:
        return np.sqrt(np.diag(self.cov))

    def predict(self, data: PanelDataset) -> np.ndarray:
        pos = np.searchsorted(self.units, data.unit_id)
        pos = np.clip(pos, 0, len(self.units) - 1)
        if np.any(self.units[pos] != data.unit_id):
            raise UnknownUnitError(int(data.unit_id[np.argmax(self.units[pos] != data.unit_id)]))
        return self.fixed_effects[pos] + np.hstack([data.X, data.Z]) @ self.coef


def fit_fe_ols(train: PanelDataset, validation: PanelDataset | None = None) -> FEOLSResult:
    """Within-estimator regression of ``y`` on ``[X, Z]`` with unit effects.

    The covariance is the usual cluster-robust one (clusters from ``train.cluster``)
    with the Stata small-sample factor.
    """
    idx = train.unit_groups()
    D = np.hstack([train.X, train.Z])
    Dd = demean(D, idx)
    yd = demean(train.y, idx)
    coef, _, rank, _ = linalg.lstsq(Dd, yd, lapack_driver="gelsd")
    if rank < Dd.shape[1]:
        raise SingularityError("demeaned FE-OLS design is rank deficient")
    resid = yd - Dd @ coef
    alpha = idx.means(train.y) - idx.means(D) @ coef
    fitted = idx.broadcast(alpha) + D @ coef
    bread = np.linalg.inv(Dd.T @ Dd)
    cl = train.cluster_groups()
    scores = cl.sums(Dd * resid[:, None])
    n, k, g = len(yd), Dd.shape[1], cl.group_count
    # the within transformation uses up one degree of freedom per unit
    k_total = k + idx.group_count
    factor = g / (g - 1) * (n - 1) / (n - k_total) if g > 1 else 1.0
    cov = factor * bread @ (scores.T @ scores) @ bread
    res = FEOLSResult(coef, idx.labels, alpha, fitted, cov)
    if validation is not None:
        r = validation.y - res.predict(validation)
        res = FEOLSResult(coef, idx.labels, alpha, fitted, cov, float(r @ r) / len(r))
    return res


@dataclass(frozen=True)
class RepResult:
    rep: int
    seed: int
    nn_val_mse: float = math.nan
    fe_val_mse: float = math.nan
    beta_hat: float = math.nan
    beta_se: float = math.nan
    beta_covered: bool = False
    yhat_coverage: float = math.nan
    lam: float = math.nan
    n_fits: int = 0
    n_train: int = 0
    n_test: int = 0
    n_val: int = 0
    error: str = ""

    @property
    def ok(self) -> bool:
        return not self.error


REP_FIELDS = (
    "rep", "seed", "nn_val_mse", "fe_val_mse", "beta_hat", "beta_se", "beta_covered",
    "yhat_coverage", "lam", "n_fits", "n_train", "n_test", "n_val", "error",
)


@dataclass(frozen=True)
class MCResult:
    per_rep: list[RepResult]
    n_t: int
    true_beta: float = 1.0

    @property
    def succeeded(self) -> list[RepResult]:
        return [r for r in self.per_rep if r.ok]

    @property
    def n_failed(self) -> int:
        return len(self.per_rep) - len(self.succeeded)

    def column(self, name: str) -> np.ndarray:
        return np.array([getattr(r, name) for r in self.succeeded], dtype=float)

    def mean_sd_se(self, name: str) -> tuple[float, float, float]:
        v = self.column(name)
        sd = float(v.std(ddof=1)) if len(v) > 1 else math.nan
        return float(v.mean()), sd, sd / math.sqrt(len(v)) if len(v) > 1 else math.nan

    @property
    def aggregate(self) -> dict[str, tuple[float, float, float]]:
        """Mean, across-replication SD and Monte Carlo SE of each metric."""
        out = {name: self.mean_sd_se(name) for name in
               ("nn_val_mse", "fe_val_mse", "beta_hat", "beta_covered", "yhat_coverage")}
        bias = self.column("beta_hat") - self.true_beta
        sd = float(bias.std(ddof=1)) if len(bias) > 1 else math.nan
        out["beta_bias"] = (float(bias.mean()), sd, sd / math.sqrt(len(bias)) if len(bias) > 1 else math.nan)
        return out

    @property
    def mse_ratio(self) -> float:
        return self.mean_sd_se("nn_val_mse")[0] / self.mean_sd_se("fe_val_mse")[0]

    @property
    def nn_win_rate(self) -> float:
        return float(np.mean(self.column("nn_val_mse") < self.column("fe_val_mse")))


def rep_seed(seed: int, rep: int) -> int:
    """Seed of one replication; depends only on (seed, rep), not on execution order."""
    return int(np.random.SeedSequence([seed, rep]).generate_state(1)[0])


def run_replication(rep: int, config: DGPConfig, arch, fit_config, level: float = 0.95) -> RepResult:
    seed = rep_seed(config.seed, rep)
    try:
        sim = generate_panel(_replace(config, seed=seed))
        train, test, val = temporal_split(sim.data)
        fe = fit_fe_ols(train, val)
        model, trace = lambda_path(train, test, arch, _replace(fit_config, seed=seed))
        inf = infer(model, train)
        ci = parametric_ci(model, inf.cov, level)[0]
        _, _, lo, hi = prediction_arrays(model, inf, val.X, val.Z, val.unit_id, level)
        return RepResult(
            rep=rep, seed=seed,
            nn_val_mse=model.mse(val), fe_val_mse=fe.val_mse,
            beta_hat=ci.point, beta_se=ci.se, beta_covered=ci.covers(sim.true_beta),
            yhat_coverage=float(np.mean((val.y >= lo) & (val.y <= hi))),
            lam=model.lam, n_fits=len(trace),
            n_train=train.n_rows, n_test=test.n_rows, n_val=val.n_rows,
        )
    except (PanelNNError, np.linalg.LinAlgError, FloatingPointError) as exc:
        return RepResult(rep=rep, seed=seed, error=f"{type(exc).__name__}: {exc}")


def _replace(obj, **kw):
    return dataclasses.replace(obj, **kw)


def _run_one(args):
    return run_replication(*args)


def run_monte_carlo(config: DGPConfig, reps: int, arch, fit_config, jobs: int = 1,
                    level: float = 0.95, rep_ids=None, max_failure_rate: float = 0.2) -> MCResult:
    """Independent replications of simulate -> split -> penalty path -> inference.

    Each replication's seed is derived from ``(config.seed, rep)`` so results
    do not depend on ``jobs`` or on the order in ``rep_ids``.
    """
    if reps < 1:
        raise ValueError("reps must be at least 1")
    ids = list(range(reps)) if rep_ids is None else list(rep_ids)
    tasks = [(r, config, arch, fit_config, level) for r in ids]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_run_one, tasks))
    else:
        results = [_run_one(t) for t in tasks]
    results.sort(key=lambda r: r.rep)
    out = MCResult(results, config.n_t)
    if out.n_failed > max_failure_rate * len(results):
        raise HarnessError(f"{out.n_failed} of {len(results)} replications failed")
    return out


def format_float(x) -> str:
    return format(float(x), ".17g")


def write_rep_csv(result: MCResult, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(REP_FIELDS)
        for r in result.per_rep:
            row = []
            for name in REP_FIELDS:
                v = getattr(r, name)
                if isinstance(v, bool):
                    row.append(str(int(v)))
                elif isinstance(v, float):
                    row.append(format_float(v))
                else:
                    row.append(str(v))
            w.writerow(row)


TABLE_COLUMNS = ("T", "N.Train", "N.Test", "N.Val", "MSE", "MSE(FE)", "Bias beta", "beta coverage", "yhat coverage")


def summary_table(result: MCResult) -> str:
    """Table-1-shaped summary: a row of means and a row of across-replication SDs."""
    ok = result.succeeded
    agg = result.aggregate
    first = ok[0] if ok else RepResult(0, 0)
    means = [str(result.n_t), str(first.n_train), str(first.n_test), str(first.n_val),
             format_float(agg["nn_val_mse"][0]), format_float(agg["fe_val_mse"][0]),
             format_float(agg["beta_bias"][0]), format_float(agg["beta_covered"][0]),
             format_float(agg["yhat_coverage"][0])]
    sds = ["", "", "", "", format_float(agg["nn_val_mse"][1]), format_float(agg["fe_val_mse"][1]),
           format_float(agg["beta_bias"][1]), "", ""]
    lines = [",".join(TABLE_COLUMNS), ",".join(means), ",".join(sds)]
    lines.append(f"# replications={len(result.per_rep)} failed={result.n_failed}"
                 f" mse_ratio={format_float(result.mse_ratio)} nn_win_rate={format_float(result.nn_win_rate)}"
                 f" bias_mc_se={format_float(agg['beta_bias'][2])}")
    return "\n".join(lines) + "\n"
