"""Config validation, CSV ingestion, and result serialization."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Iterable, Sequence

import jsonschema
import numpy as np

from .core import ConfigError, Dataset, LabelKernel, LossFunction
from .sim import ExperimentConfig, ResultRow

SPEC_VERSION = 1
LABEL_COLUMNS = ("y", "label")

_num = {"type": "number"}
_pos = {"type": "number", "exclusiveMinimum": 0}
_frac = {"type": "number", "exclusiveMinimum": 0, "maximum": 1}
_unit = {"type": "number", "minimum": 0, "maximum": 1}
_alpha = {"anyOf": [{"type": "number"}, {"enum": ["inf", "-inf"]}]}
_count = {"type": "integer", "minimum": 1}


def _obj(props: dict, required: Sequence[str] = ()) -> dict:
    return {"type": "object", "additionalProperties": False, "properties": props, "required": list(required)}


def _list(item: dict, min_items: int = 1) -> dict:
    return {"type": "array", "items": item, "minItems": min_items}


CONFIG_SCHEMA = _obj(
    {
        "spec_version": {"const": SPEC_VERSION},
        "experiment": _obj({"N": _count, "p": _count, "seed": {"type": "integer", "minimum": 0},
                            "replicates": _count, "holdout": {"type": "integer", "minimum": 0}}),
        "kernel": _obj({
            "kind": {"enum": ["glm-logistic", "sign-flip", "staircase", "gaussian-noise", "deterministic"]},
            "theta0_norm": {"type": "number", "minimum": 0},
            "params": _obj({"eta": _unit, "zeta": _unit, "tau": _pos, "cubic_c": _num}),
        }, ["kind"]),
        "loss": _obj({"train": {"enum": ["square", "logistic"]},
                      "test": {"enum": ["same-as-train", "misclassification"]}}, ["train"]),
        "selection": _obj({
            "kind": {"enum": ["random", "alpha-family", "topk-hard", "topk-easy"]},
            "gamma": _list(_frac),
            "alpha": _list(_alpha),
            "reweight": {"type": "boolean"},
        }, ["kind", "gamma"]),
        "surrogate": _obj({"mode": {"enum": ["perfect", "fitted"]}, "N_su": _count, "lambda": _pos,
                           "beta0": _num, "beta_s": {"type": "number", "minimum": 0}}, ["mode"]),
        "ridge": {
            "oneOf": [
                _obj({"lambda": {"anyOf": [_pos, _list(_pos)]}}, ["lambda"]),
                _obj({"grid": _list(_pos)}, ["grid"]),
            ]
        },
        "output": _obj({"path": {"type": "string", "minLength": 1}, "format": {"enum": ["csv", "json"]}}),
        "lowdim": _obj({
            "population": _obj({"kind": {"enum": ["uniform", "power-law", "gaussian"]}, "x_max": _pos,
                                "alpha": {"type": "number", "exclusiveMinimum": 1}, "p": _count,
                                "points": _count}, ["kind"]),
            "model": _obj({"kind": {"enum": ["linear-regression", "glm-logistic"]}, "tau": _pos,
                           "theta_star": _list(_num)}, ["kind"]),
            "metric": {"enum": ["sigma", "identity", "hessian"]},
            "schemes": _list({"enum": ["random", "unbiased-influence", "nonreweight-optimal"]}),
        }, ["population"]),
        "nonmono": _obj({"p": {"type": "integer", "minimum": 2}, "cubic_c": _num, "draws": _count,
                         "gamma": _frac, "grid_points": _count, "seed": {"type": "integer", "minimum": 0}}),
        "minimax": _obj({"p_x": _list(_pos), "q_x": _list({"type": "number", "minimum": 0}),
                         "theta_su": _list(_unit), "eps": {"type": "number", "minimum": 0}},
                        ["p_x", "q_x", "theta_su", "eps"]),
        "ridgeless": _obj({
            "delta": _list(_pos),
            "shapes": _list(_obj({"kind": {"enum": ["random", "alpha-family", "topk-hard", "topk-easy"]},
                                  "alpha": _num}, ["kind"])),
        }, ["delta"]),
    },
    ["spec_version"],
)


def _pointer(path: Iterable[Any]) -> str:
    parts = [str(p).replace("~", "~0").replace("/", "~1") for p in path]
    return "/" + "/".join(parts)


def validate_config(doc: Any) -> dict:
    """Schema check; errors carry the JSON pointer of the offending value."""
    validator = jsonschema.Draft202012Validator(CONFIG_SCHEMA)
    errors = sorted(validator.iter_errors(doc), key=lambda e: (len(e.absolute_path), list(map(str, e.absolute_path))))
    if errors:
        err = jsonschema.exceptions.best_match(errors)
        raise ConfigError(f"{_pointer(err.absolute_path)}: {err.message}")
    return doc


def read_config(path: str | Path) -> dict:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from exc
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config is not valid JSON (line {exc.lineno}): {exc.msg}") from exc
    return validate_config(doc)


def parse_alpha(v: Any) -> float:
    """Numbers pass through; strings may also spell inf, +inf or -inf."""
    try:
        a = float(v)
    except (TypeError, ValueError):
        a = math.nan
    if math.isnan(a):
        raise ConfigError(f"alpha must be a number or +-inf, got {v!r}")
    return a


def kernel_from(doc: dict) -> LabelKernel:
    k = doc.get("kernel")
    if k is None:
        raise ConfigError("/kernel: required for this command")
    params = k.get("params", {})
    norm = k.get("theta0_norm", 1.0)
    try:
        if k["kind"] == "deterministic":
            if "cubic_c" not in params:
                raise ConfigError("deterministic kernel needs params.cubic_c")
            return LabelKernel.cubic(params["cubic_c"], norm)
        return LabelKernel(k["kind"], norm, eta=params.get("eta"), zeta=params.get("zeta"), tau=params.get("tau"))
    except ConfigError as exc:
        raise ConfigError(f"/kernel: {exc}") from exc


def loss_from(doc: dict) -> LossFunction:
    spec = doc.get("loss", {"train": "logistic"})
    return LossFunction(spec["train"], spec.get("test", "same-as-train"))


def ridges_from(doc: dict) -> tuple[tuple[float, ...], tuple[float, ...] | None]:
    r = doc.get("ridge", {"lambda": 1e-2})
    if "grid" in r:
        return (), tuple(r["grid"])
    lam = r["lambda"]
    return (tuple(lam) if isinstance(lam, list) else (float(lam),)), None


def experiment_config_from(doc: dict) -> ExperimentConfig:
    ex = doc.get("experiment")
    if ex is None or "N" not in ex or "p" not in ex:
        raise ConfigError("/experiment: N and p are required for simulation commands")
    sel = doc.get("selection")
    if sel is None:
        raise ConfigError("/selection: required for simulation commands")
    sur = doc.get("surrogate", {"mode": "perfect"})
    ridges, grid = ridges_from(doc)
    return ExperimentConfig(
        n=ex["N"], p=ex["p"], kernel=kernel_from(doc), loss=loss_from(doc),
        selection_kind=sel["kind"], gammas=tuple(sel["gamma"]),
        alphas=tuple(parse_alpha(a) for a in sel.get("alpha", [0.0])),
        reweight=sel.get("reweight", False), ridges=ridges, ridge_grid=grid,
        surrogate_mode=sur["mode"], n_su=sur.get("N_su", 0), ridge_su=sur.get("lambda", 1e-2),
        replicates=ex.get("replicates", 1), seed=ex.get("seed", 0), holdout=ex.get("holdout", 100_000),
    )


# -- CSV ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Ingested:
    """A CSV dataset plus the column transform applied to its features."""

    dataset: Dataset
    columns: tuple[str, ...]
    center: np.ndarray
    scale: np.ndarray
    label_column: str | None = None


def ingest_csv(path: str | Path, label_column: str | None = None, standardize: bool = True) -> Ingested:
    """Numeric CSV with a header row.

    Labels come from `label_column`, else from a column named y or label;
    {0, 1} labels become {-1, +1}. Features are centered and scaled to unit
    population variance (ddof = 0); the transform is returned alongside.
    """
    try:
        with open(path, newline="", encoding="utf-8") as fh:
            rows = list(csv.reader(fh))
    except OSError as exc:
        raise ConfigError(f"cannot read dataset {path}: {exc.strerror}") from exc
    if len(rows) < 2:
        raise ConfigError(f"{path}: need a header and at least one data row")
    header = [h.strip() for h in rows[0]]
    if label_column is not None:
        if label_column not in header:
            raise ConfigError(f"{path}: no column named {label_column!r}")
        label_idx = header.index(label_column)
    else:
        label_idx = next((i for i, h in enumerate(header) if h.lower() in LABEL_COLUMNS), None)
    values = np.empty((len(rows) - 1, len(header)))
    for r, row in enumerate(rows[1:], start=2):
        if len(row) != len(header):
            raise ConfigError(f"{path}: row {r} has {len(row)} fields, expected {len(header)}")
        for c, cell in enumerate(row):
            try:
                v = float(cell)
            except ValueError:
                v = math.nan
            if not math.isfinite(v):
                raise ConfigError(f"{path}: row {r}, column {header[c]!r}: missing or non-numeric value {cell!r}")
            values[r - 2, c] = v
    feat_cols = [i for i in range(len(header)) if i != label_idx]
    if not feat_cols:
        raise ConfigError(f"{path}: no feature columns")
    x = values[:, feat_cols]
    center, scale = np.zeros(x.shape[1]), np.ones(x.shape[1])
    if standardize:
        center, scale = x.mean(axis=0), x.std(axis=0)
        if np.any(scale == 0):
            col = header[feat_cols[int(np.argmax(scale == 0))]]
            raise ConfigError(f"{path}: column {col!r} is constant and cannot be standardized")
        x = (x - center) / scale
    y = None
    if label_idx is not None:
        y = values[:, label_idx]
        if np.all(np.isin(y, (0.0, 1.0))) and np.any(y == 0):
            y = 2 * y - 1
    cols = tuple(header[i] for i in feat_cols)
    return Ingested(Dataset(x, y), cols, center, scale, None if label_idx is None else header[label_idx])


def read_dataset_csv(path: str | Path, label_column: str | None = None, standardize: bool = True) -> Dataset:
    return ingest_csv(path, label_column, standardize).dataset


def fmt(v: Any) -> str:
    """Floats with 17 significant digits (round-trip exact); None as empty."""
    if v is None:
        return ""
    if isinstance(v, (bool, np.bool_)):
        return "true" if v else "false"
    if isinstance(v, (float, np.floating)):
        return format(float(v), ".17g")
    return str(v)


def write_table(path: str | Path | None, header: Sequence[str], rows: Iterable[Sequence[Any]],
                fmt_kind: str = "csv", stream=None) -> None:
    rows = [list(r) for r in rows]
    if fmt_kind == "json":
        recs = [{h: _jsonable(v) for h, v in zip(header, r)} for r in rows]
        text = json.dumps(recs, indent=1) + "\n"
        if path is None:
            stream.write(text)
        else:
            Path(path).write_text(text)
        return
    fh = open(path, "w", newline="") if path is not None else stream
    try:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow([fmt(v) for v in r])
    finally:
        if path is not None:
            fh.close()


def _jsonable(v: Any) -> Any:
    if isinstance(v, (float, np.floating)):
        v = float(v)
        return v if math.isfinite(v) else str(v)
    if isinstance(v, np.integer):
        return int(v)
    if isinstance(v, np.bool_):
        return bool(v)
    return v


def write_selection(path: str | Path, pi: np.ndarray, weight: np.ndarray, included: np.ndarray) -> None:
    rows = ((i, float(p), float(w), int(bool(s))) for i, (p, w, s) in enumerate(zip(pi, weight, included)))
    write_table(path, ["index", "pi", "weight", "included"], rows)


def write_results(rows: Sequence[ResultRow], path: str | Path | None, fmt_kind: str = "csv", stream=None) -> None:
    if not rows:
        raise ConfigError("no result rows to write")
    try:
        write_table(path, ResultRow.header(), [r.values() for r in rows], fmt_kind, stream)
    except OSError as exc:
        raise ConfigError(f"cannot write {path}: {exc.strerror}") from exc


def write_transform(path: str | Path, ing: Ingested) -> None:
    """Per-column center and scale, so selections can be reproduced on re-ingestion."""
    write_table(path, ["column", "center", "scale"], zip(ing.columns, ing.center, ing.scale))


def read_table(path: str | Path) -> list[dict[str, str]]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))
