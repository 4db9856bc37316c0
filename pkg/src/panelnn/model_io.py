"""Plain-text model files.

Line 1 is a version tag. Each entry then has a header line
``<name> <float|int|str> <dim> [<dim>]`` followed by its values, one matrix
row (or one vector/scalar) per line, space separated, floats written with
17 significant digits so that reading back is exact.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from panelnn.errors import ModelFormatError
from panelnn.inference import ModelInference, ParamCovariance
from panelnn.network import Activation, Architecture, ParamSet
from panelnn.training import FittedModel, PenaltySpec

VERSION_TAG = "panelnn-model v1"


def _fmt(x) -> str:
    return format(float(x), ".17g")


def _write_entry(lines: list[str], name: str, value) -> None:
    if isinstance(value, str):
        lines += [f"{name} str 1", value]
        return
    if isinstance(value, (tuple, list)) and value and isinstance(value[0], str):
        lines.append(f"{name} str {len(value)}")
        lines += list(value)
        return
    arr = np.asarray(value)
    kind = "int" if arr.dtype.kind in "iub" else "float"
    fmt = str if kind == "int" else _fmt
    if arr.dtype.kind == "b":
        arr = arr.astype(int)
    if arr.ndim == 0:
        lines += [f"{name} {kind} 1", fmt(arr.item())]
    elif arr.ndim == 1:
        lines += [f"{name} {kind} {arr.shape[0]}", " ".join(fmt(v) for v in arr)]
    elif arr.ndim == 2:
        lines.append(f"{name} {kind} {arr.shape[0]} {arr.shape[1]}")
        lines += [" ".join(fmt(v) for v in row) for row in arr]
    else:
        raise ModelFormatError(f"cannot store {arr.ndim}-d entry {name}")


def _read_entries(text: str) -> dict:
    lines = text.splitlines()
    if not lines or lines[0].strip() != VERSION_TAG:
        raise ModelFormatError(f"missing version tag {VERSION_TAG!r}")
    out, i = {}, 1
    while i < len(lines):
        head = lines[i].split()
        i += 1
        if not head:
            continue
        if len(head) not in (3, 4):
            raise ModelFormatError(f"line {i}: bad entry header {' '.join(head)!r}")
        name, kind, dims = head[0], head[1], [int(d) for d in head[2:]]
        if kind == "str":
            out[name] = lines[i:i + dims[0]]
            i += dims[0]
            continue
        cast = int if kind == "int" else float
        if len(dims) == 1:
            row = lines[i].split() if dims[0] else []
            i += 1
            vals = np.array([cast(v) for v in row])
            if len(vals) != dims[0]:
                raise ModelFormatError(f"entry {name}: expected {dims[0]} values")
        else:
            rows = [[cast(v) for v in lines[i + r].split()] for r in range(dims[0])]
            i += dims[0]
            vals = np.array(rows, dtype=float if kind == "float" else int).reshape(dims)
        out[name] = vals
    return out


@dataclass(frozen=True)
class SavedModel:
    model: FittedModel
    inference: ModelInference | None = None
    columns: dict = field(default_factory=dict)


def save_model(path, model: FittedModel, inference: ModelInference | None = None,
               columns: dict | None = None) -> None:
    arch = model.arch
    lines = [VERSION_TAG]
    put = lambda name, value: _write_entry(lines, name, value)  # noqa: E731
    put("layer_sizes", np.array(arch.layer_sizes, dtype=int))
    put("p_x", np.array(arch.p_x))
    put("p_z", np.array(arch.p_z))
    put("activation", str(arch.activation))
    put("lambda", model.lam)
    put("lambda_tilde", model.lambda_tilde)
    put("test_mse", model.test_mse)
    put("epochs", np.array(model.epochs))
    put("converged", np.array(int(model.converged)))
    put("unpenalized_mask", model.penalty.unpenalized_mask.astype(int))
    put("beta", model.params.beta)
    put("top_weights", model.params.top_weights)
    for k, (w, b) in enumerate(zip(model.params.hidden_weights, model.params.hidden_biases)):
        put(f"W{k + 2}", w)
        put(f"b{k + 2}", b)
    put("units", np.asarray(model.units, dtype=int))
    put("fixed_effects", model.fixed_effects)
    for key in ("y", "X", "V"):
        if key in model.group_means:
            put(f"group_mean_{key}", model.group_means[key])
    for key, value in (columns or {}).items():
        put(f"column_{key}", list(value) if isinstance(value, (list, tuple)) else str(value))
    if inference is not None:
        put("cov_kind", inference.cov.estimator_kind)
        put("cov_dof", inference.cov.dof)
        put("cov", inference.cov.matrix)
        put("sigma2", inference.sigma2)
        put("unit_counts", np.asarray(inference.unit_counts, dtype=int))
        put("unit_jacobian_means", inference.unit_jacobian_means)
    Path(path).write_text("\n".join(lines) + "\n")


def load_model(path) -> SavedModel:
    try:
        e = _read_entries(Path(path).read_text())
        arch = Architecture(
            tuple(int(s) for s in e["layer_sizes"]), int(e["p_x"][0]), int(e["p_z"][0]),
            Activation.parse(e["activation"][0]),
        )
        n_hidden = arch.depth
        params = ParamSet(
            e["beta"], e["top_weights"],
            tuple(np.asarray(e[f"W{k + 2}"], float).reshape(arch.hidden_shapes()[k]) for k in range(n_hidden)),
            tuple(e[f"b{k + 2}"] for k in range(n_hidden)),
        )
        params.check(arch)
        lam = float(e["lambda"][0])
        model = FittedModel(
            params=params,
            arch=arch,
            lam=lam,
            penalty=PenaltySpec(lam, e["unpenalized_mask"].astype(bool)),
            units=e["units"].astype(np.int64),
            fixed_effects=e["fixed_effects"],
            group_means={k: np.asarray(e[f"group_mean_{k}"]) for k in ("y", "X", "V") if f"group_mean_{k}" in e},
            test_mse=float(e["test_mse"][0]),
            lambda_tilde=float(e["lambda_tilde"][0]),
            epochs=int(e["epochs"][0]),
            converged=bool(e["converged"][0]),
        )
        if "group_mean_X" in model.group_means:
            model.group_means["X"] = model.group_means["X"].reshape(len(model.units), arch.p_x)
        if "group_mean_V" in model.group_means:
            model.group_means["V"] = model.group_means["V"].reshape(len(model.units), arch.top_size)
        inference = None
        if "cov" in e:
            p = arch.n_params
            inference = ModelInference(
                cov=ParamCovariance(np.asarray(e["cov"], float).reshape(p, p), e["cov_kind"][0],
                                    float(e["cov_dof"][0]), arch.block_slices()),
                sigma2=float(e["sigma2"][0]),
                units=model.units,
                unit_counts=e["unit_counts"],
                unit_jacobian_means=np.asarray(e["unit_jacobian_means"], float).reshape(len(model.units), p),
            )
        columns = {}
        for key, value in e.items():
            if key.startswith("column_"):
                columns[key[len("column_"):]] = value
    except (KeyError, ValueError, IndexError) as exc:
        raise ModelFormatError(f"{path}: malformed model file ({exc})") from exc
    if not math.isfinite(model.lam):
        raise ModelFormatError("lambda must be finite")
    return SavedModel(model, inference, columns)
