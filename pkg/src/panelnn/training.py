"""Penalised loss, backpropagation, full-batch RMSprop and the halving penalty path.

Training works on the within-transformed problem: the outcome and ``X`` are
demeaned once by unit, and the top-layer output ``V1 @ top_weights`` is
demeaned on every pass, so unit intercepts never enter the optimisation.
"""

from __future__ import annotations

import dataclasses
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from panelnn.errors import ConfigError, DimensionError, DivergenceError, PathError, UnknownUnitError
from panelnn.network import Architecture, ParamSet, activate, activate_prime, forward, init_params, top_nodes
from panelnn.panel_data import GroupIndex, PanelDataset, demean
from panelnn.top_layer import TopDesign, ols_trick

log = logging.getLogger(__name__)

CONVERGENCE_WINDOW = 10
RMS_EPS = 1e-8


@dataclass(frozen=True)
class PenaltySpec:
    lam: float
    unpenalized_mask: np.ndarray

    def __post_init__(self):
        if not self.lam >= 0:
            raise ValueError("penalty must be non-negative")
        object.__setattr__(self, "unpenalized_mask", np.asarray(self.unpenalized_mask, dtype=bool))

    @classmethod
    def default(cls, arch: Architecture, lam: float, penalize_beta: bool = False) -> PenaltySpec:
        """Penalise everything except (by default) the parametric coefficients."""
        mask = np.zeros(arch.n_params, dtype=bool)
        if not penalize_beta:
            mask[arch.block_slices()["beta"]] = True
        return cls(lam, mask)

    @property
    def penalized(self) -> np.ndarray:
        return ~self.unpenalized_mask

    def with_lambda(self, lam: float) -> PenaltySpec:
        return PenaltySpec(lam, self.unpenalized_mask)


@dataclass(frozen=True)
class FitConfig:
    max_epochs: int = 20000
    tol: float = 1e-6
    step_size: float = 1e-3
    rms_decay: float = 0.9
    jitter_sd: float = 0.1
    # network share of within variance below which a path step restarts from scratch
    collapse_tol: float = 1e-4
    patience: int = 3
    lambda_init: float = 8.0
    seed: int = 0
    # safety cap on the number of penalty halvings
    max_path_steps: int = 40

    def __post_init__(self):
        if not self.tol > 0:
            raise ConfigError("tol must be positive")
        if self.patience < 1:
            raise ConfigError("patience must be at least 1")
        if not self.lambda_init > 0:
            raise ConfigError("lambda_init must be positive")
        if self.max_epochs < 0 or self.max_path_steps < 1:
            raise ConfigError("max_epochs must be >= 0 and max_path_steps >= 1")
        if not 0 <= self.rms_decay < 1 or not self.step_size > 0 or self.jitter_sd < 0:
            raise ConfigError("need 0 <= rms_decay < 1, step_size > 0, jitter_sd >= 0")

    def with_overrides(self, overrides: dict[str, str]) -> FitConfig:
        types = {f.name: f.type for f in dataclasses.fields(self)}
        values = {}
        for key, raw in overrides.items():
            if key not in types:
                raise ConfigError(f"unknown config key {key!r}")
            cast = int if types[key] in (int, "int") else float
            try:
                values[key] = cast(raw)
            except ValueError:
                raise ConfigError(f"bad value {raw!r} for {key}") from None
        return dataclasses.replace(self, **values)

    @classmethod
    def from_file(cls, path: str | Path) -> FitConfig:
        return cls().with_overrides(read_key_values(path))


def read_key_values(path: str | Path) -> dict[str, str]:
    out = {}
    for n, line in enumerate(Path(path).read_text().splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{n}: expected key=value")
        key, value = (s.strip() for s in line.split("=", 1))
        out[key] = value
    return out


@dataclass(frozen=True)
class TrainingData:
    """Within-transformed outcome and ``X``; raw ``Z`` plus the unit grouping."""

    y: np.ndarray
    X: np.ndarray
    Z: np.ndarray
    groups: GroupIndex

    @classmethod
    def from_panel(cls, data: PanelDataset) -> TrainingData:
        idx = data.unit_groups()
        return cls(demean(data.y, idx), demean(data.X, idx), data.Z, idx)

    @property
    def n(self) -> int:
        return len(self.y)


class _Objective:
    """Loss and flat gradient for a fixed architecture and data set.

    Works on views into the flat parameter vector to keep the epoch loop cheap.
    """

    def __init__(self, arch: Architecture, data: TrainingData, spec: PenaltySpec):
        if spec.unpenalized_mask.shape != (arch.n_params,):
            raise DimensionError("penalty mask length does not match the parameter count")
        if data.X.shape[1] != arch.p_x or data.Z.shape[1] != arch.p_z:
            raise DimensionError("training data does not match the architecture")
        self.arch = arch
        self.data = data
        self.lam = spec.lam
        self.pen = spec.penalized.astype(float)
        self.sl = arch.block_slices()
        shapes = arch.hidden_shapes()
        # bottom-up order for the loop
        self.layers = [(self.sl[f"W{k + 2}"], self.sl[f"b{k + 2}"], shapes[k]) for k in range(len(shapes))][::-1]
        self.codes = data.groups.group_of_row
        self.counts = data.groups.counts.astype(float)

    def _demean_vec(self, v):
        means = np.bincount(self.codes, weights=v, minlength=len(self.counts)) / self.counts
        return v - means[self.codes]

    def __call__(self, theta, want_grad=True):
        d, act = self.data, self.arch.activation
        beta, top = theta[self.sl["beta"]], theta[self.sl["top"]]
        h = d.Z
        ins, pres = [], []
        for sw, sb, shape in self.layers:
            pre = h @ theta[sw].reshape(shape) + theta[sb]
            ins.append(h)
            pres.append(pre)
            h = activate(act, pre)
        r = d.y - d.X @ beta - self._demean_vec(h @ top)
        loss = float(r @ r) / d.n + self.lam * float(np.sum(self.pen * theta * theta))
        if not want_grad:
            return loss, None
        g = np.empty_like(theta)
        gf = -2.0 * r / d.n
        g[self.sl["beta"]] = d.X.T @ gf
        # gf has zero unit means, so demeaning commutes into the raw nodes
        g[self.sl["top"]] = h.T @ gf
        delta = np.outer(gf, top)
        for (sw, sb, shape), h_in, pre in zip(reversed(self.layers), reversed(ins), reversed(pres)):
            delta = delta * activate_prime(act, pre)
            g[sw] = (h_in.T @ delta).ravel()
            g[sb] = delta.sum(axis=0)
            delta = delta @ theta[sw].reshape(shape).T
        g += 2.0 * self.lam * self.pen * theta
        return loss, g


def penalized_loss(params: ParamSet, arch: Architecture, data: TrainingData, spec: PenaltySpec) -> float:
    """Mean squared within-residual plus ``lam`` times the squared norm of penalised entries."""
    params.check(arch)
    return _Objective(arch, data, spec)(params.flatten(), want_grad=False)[0]


def gradients(params: ParamSet, arch: Architecture, data: TrainingData, spec: PenaltySpec) -> ParamSet:
    params.check(arch)
    _, g = _Objective(arch, data, spec)(params.flatten())
    return ParamSet.from_flat(arch, g)


@dataclass
class DescentResult:
    theta: np.ndarray
    loss_trace: list[float]
    epochs: int
    converged: bool


def rmsprop(objective: Callable, theta0, config: FitConfig, trainable=None) -> DescentResult:
    """Full-batch RMSprop until the relative loss change over a short window drops below ``tol``.

    ``trainable`` (boolean mask) freezes the remaining coordinates.
    """
    theta = np.array(theta0, dtype=float)
    mask = None if trainable is None else np.asarray(trainable, dtype=float)
    acc = np.zeros_like(theta)
    rho, eta = config.rms_decay, config.step_size
    trace = []
    for epoch in range(config.max_epochs):
        loss, g = objective(theta)
        if not math.isfinite(loss) or not np.all(np.isfinite(g)):
            raise DivergenceError(epoch)
        trace.append(loss)
        if epoch >= CONVERGENCE_WINDOW:
            prev = trace[-1 - CONVERGENCE_WINDOW]
            if abs(prev - loss) <= config.tol * max(abs(prev), 1e-300):
                return DescentResult(theta, trace, epoch, True)
        if mask is not None:
            g = g * mask
        acc *= rho
        acc += (1.0 - rho) * g * g
        theta -= eta * g / np.sqrt(acc + RMS_EPS)
    if config.max_epochs:
        loss, _ = objective(theta, want_grad=False)
        if not math.isfinite(loss):
            raise DivergenceError(config.max_epochs)
        trace.append(loss)
    return DescentResult(theta, trace, config.max_epochs, False)


@dataclass(frozen=True)
class FittedModel:
    params: ParamSet
    arch: Architecture
    lam: float
    penalty: PenaltySpec
    units: np.ndarray
    fixed_effects: np.ndarray
    # training-sample unit means of y, X and the top-layer nodes
    group_means: dict = field(repr=False)
    train_loss_trace: list = field(default_factory=list, repr=False)
    test_mse: float = math.nan
    lambda_tilde: float = math.nan
    epochs: int = 0
    converged: bool = False

    def fixed_effect_for(self, unit_ids) -> np.ndarray:
        unit_ids = np.asarray(unit_ids).astype(np.int64)
        pos = np.searchsorted(self.units, unit_ids)
        pos = np.clip(pos, 0, len(self.units) - 1)
        bad = self.units[pos] != unit_ids
        if bad.any():
            raise UnknownUnitError(int(unit_ids[np.argmax(bad)]))
        return self.fixed_effects[pos]

    def predict(self, X, Z, unit_ids) -> np.ndarray:
        return self.fixed_effect_for(unit_ids) + forward(self.params, self.arch, X, Z).fitted

    def predict_panel(self, data: PanelDataset) -> np.ndarray:
        return self.predict(data.X, data.Z, data.unit_id)

    def mse(self, data: PanelDataset) -> float:
        r = data.y - self.predict_panel(data)
        return float(r @ r) / len(r)

    @property
    def penalized_norm_sq(self) -> float:
        theta = self.params.flatten()
        return float(np.sum(theta[self.penalty.penalized] ** 2))


def top_design(params: ParamSet, arch: Architecture, data: TrainingData, spec: PenaltySpec) -> TopDesign:
    V = top_nodes(params, arch, data.Z).top
    sl = arch.block_slices()
    pen = spec.penalized
    mask = np.concatenate([pen[sl["beta"]], pen[sl["top"]]])
    return TopDesign(np.hstack([data.X, demean(V, data.groups)]), data.y, mask)


def recover_fixed_effects(params: ParamSet, arch: Architecture, train: PanelDataset):
    """Unit intercepts making every unit's mean training residual zero."""
    idx = train.unit_groups()
    V = top_nodes(params, arch, train.Z).top
    means = {"y": idx.means(train.y), "X": idx.means(train.X), "V": idx.means(V)}
    alpha = means["y"] - means["X"] @ params.beta - means["V"] @ params.top_weights
    return idx.labels, alpha, means


def fit(
    train: PanelDataset,
    test: PanelDataset | None,
    arch: Architecture,
    spec: PenaltySpec,
    config: FitConfig = FitConfig(),
    warm_start: ParamSet | None = None,
    ols_trick_enabled: bool = True,
) -> FittedModel:
    """Fit at a single penalty: RMSprop on the demeaned data, then the top-layer re-solve."""
    data = TrainingData.from_panel(train)
    objective = _Objective(arch, data, spec)
    start = warm_start if warm_start is not None else init_params(arch, config.seed)
    start.check(arch)
    res = rmsprop(objective, start.flatten(), config)
    params = ParamSet.from_flat(arch, res.theta)
    lambda_tilde = math.nan
    if ols_trick_enabled:
        design = top_design(params, arch, data, spec)
        theta_top = np.concatenate([params.beta, params.top_weights])
        trick = ols_trick(design, theta_top, match_norm=spec.lam > 0)
        params = params.replace_top(trick.theta[: arch.p_x], trick.theta[arch.p_x:])
        lambda_tilde = trick.penalty.lambda_tilde
    units, alpha, means = recover_fixed_effects(params, arch, train)
    model = FittedModel(
        params=params,
        arch=arch,
        lam=spec.lam,
        penalty=spec,
        units=units,
        fixed_effects=alpha,
        group_means=means,
        train_loss_trace=res.loss_trace,
        lambda_tilde=lambda_tilde,
        epochs=res.epochs,
        converged=res.converged,
    )
    if test is not None:
        model = dataclasses.replace(model, test_mse=model.mse(test))
    return model


@dataclass(frozen=True)
class PathStep:
    lam: float
    test_mse: float
    penalized_norm_sq: float
    epochs: int


def jitter(params: ParamSet, arch: Architecture, spec: PenaltySpec, sd: float, rng) -> ParamSet:
    theta = params.flatten()
    noise = rng.normal(0.0, sd, size=theta.shape) if sd > 0 else np.zeros_like(theta)
    return ParamSet.from_flat(arch, theta + noise * spec.penalized)


def network_share(model: FittedModel, train: PanelDataset) -> float:
    """Within-unit variance of the network term relative to that of the outcome."""
    idx = train.unit_groups()
    f = demean(top_nodes(model.params, model.arch, train.Z).top @ model.params.top_weights, idx)
    y = demean(train.y, idx)
    return float(f @ f) / max(float(y @ y), 1e-300)


def lambda_path(
    train: PanelDataset,
    test: PanelDataset,
    arch: Architecture,
    config: FitConfig = FitConfig(),
    penalize_beta: bool = False,
    warm_start: ParamSet | None = None,
    fit_fn: Callable = fit,
) -> tuple[FittedModel, list[PathStep]]:
    """Halve the penalty from ``lambda_init`` until test MSE fails to improve ``patience`` times.

    Each refit starts from the previous solution plus gaussian jitter on the
    penalised entries. A network whose output has collapsed to a constant sits
    at a saddle that jitter rarely escapes, so it is re-initialised instead
    (keeping ``beta``). Returns the model with the lowest test MSE and the trace.
    """
    if test is None or test.n_rows == 0:
        raise PathError("the penalty path needs a non-empty test set")
    rng = np.random.default_rng(np.random.SeedSequence([config.seed, 1]))
    lam = config.lambda_init
    spec = PenaltySpec.default(arch, lam, penalize_beta)
    try:
        model = fit_fn(train, test, arch, spec, config, warm_start)
    except DivergenceError as exc:
        raise PathError(f"initial fit at lambda={lam:g} diverged at epoch {exc.epoch}") from exc
    trace = [PathStep(lam, model.test_mse, model.penalized_norm_sq, model.epochs)]
    best, misses = model, 0
    while misses < config.patience and len(trace) < config.max_path_steps:
        lam /= 2.0
        spec = spec.with_lambda(lam)
        if arch.depth and network_share(model, train) < config.collapse_tol:
            fresh = init_params(arch, int(rng.integers(2**32)))
            start = dataclasses.replace(fresh, beta=model.params.beta.copy())
        else:
            start = jitter(model.params, arch, spec, config.jitter_sd, rng)
        model = fit_fn(train, test, arch, spec, config, start)
        trace.append(PathStep(lam, model.test_mse, model.penalized_norm_sq, model.epochs))
        log.debug("lambda=%g test_mse=%g epochs=%d", lam, model.test_mse, model.epochs)
        if model.test_mse < best.test_mse:
            best, misses = model, 0
        else:
            misses += 1
    return best, trace
