"""Panel files, run configs and report serialization."""
from __future__ import annotations

import csv
import io
import json
import math
from pathlib import Path
from typing import Any

import jsonschema

from .core import (ConfigError, MigrationParams, ModelConfig, Panel, ParamVector,
                   WaveState, config_dict)

_value = {"type": ["integer", "string", "boolean"]}
_probs = {"type": "array", "items": {"type": "array", "items": {"type": "number", "minimum": 0}}}
_floats = {"type": "array", "items": {"type": "number"}}

PANEL_SCHEMA = {
    "type": "object",
    "required": ["d", "q", "supports", "waves"],
    "properties": {
        "d": {"type": "integer", "minimum": 1},
        "q": {"type": "integer", "minimum": 0},
        "supports": {"type": "array", "items": {"type": "array", "items": _value, "minItems": 1}},
        "waves": {"type": "array", "items": {
            "type": "object",
            "required": ["t", "actors"],
            "properties": {
                "t": {"type": "integer", "minimum": 0},
                "actors": {"type": "array", "items": {
                    "type": "object",
                    "required": ["id", "z", "x"],
                    "properties": {"id": {"type": "string"}, "z": _floats,
                                   "x": {"type": "array", "items": _value}},
                }},
            },
        }},
    },
}

_selector = {
    "type": "object",
    "properties": {
        "kind": {"enum": ["all", "ids", "match"]},
        "ids": {"type": "array", "items": {"type": "string"}},
        "covariate": {"type": "integer", "minimum": 1},
        "value": _value,
        "limit": {"type": "integer", "minimum": 0},
        "rank": {"enum": ["random", "central"]},
    },
    "additionalProperties": False,
}

RUN_SCHEMA = {
    "type": "object",
    "required": ["model"],
    "properties": {
        "model": {
            "type": "object",
            "required": ["d", "q", "supports"],
            "properties": {
                "d": {"type": "integer", "minimum": 1},
                "q": {"type": "integer", "minimum": 0},
                "supports": {"type": "array", "items": {"type": "array", "items": _value, "minItems": 1}},
                "k": {"type": "integer", "minimum": 1},
                "c": {"type": "number", "exclusiveMinimum": 0, "maximum": 1},
                "homophily": {"type": "array", "items": {"enum": ["attraction", "repulsion"]}},
                "heterophily": {"type": "array", "items": {"enum": ["attraction", "repulsion"]}},
            },
            "additionalProperties": False,
        },
        "theta": {"$ref": "#/$defs/theta"},
        "null": {"$ref": "#/$defs/theta"},
        "migration": {
            "type": "object",
            "properties": {
                "emigration_prob": {"type": "number", "minimum": 0, "maximum": 1},
                "immigration_rate": {"type": "number", "minimum": 0},
                "immigrant_position_spread": {"type": "number", "minimum": 0},
                "immigrant_covariate_probs": _probs,
            },
            "additionalProperties": False,
        },
        "initial": {
            "type": "object",
            "properties": {
                "n_actors": {"type": "integer", "minimum": 1},
                "position_sd": {"type": "number", "minimum": 0},
                "covariate_probs": _probs,
                "panel": {"type": "string"},
            },
            "additionalProperties": False,
        },
        "seed": {"type": "integer", "minimum": 0},
        "replicates": {"type": "integer", "minimum": 1},
        "horizon": {"type": "integer", "minimum": 1},
        "interventions": {"type": "array", "items": {
            "type": "object",
            "required": ["time", "covariate", "value"],
            "properties": {
                "time": {"type": "integer", "minimum": 0},
                "covariate": {"type": "integer", "minimum": 1},
                "value": _value,
                "success_prob": {"type": "number", "minimum": 0, "maximum": 1},
                "selector": _selector,
            },
            "additionalProperties": False,
        }},
        "fit": {
            "type": "object",
            "properties": {
                "starts": {"type": "integer", "minimum": 1},
                "max_iter": {"type": "integer", "minimum": 1},
                "fixed": {"type": "object", "additionalProperties": {"type": "number"}},
                "fit_migration": {"type": "boolean"},
                "one_sided": {"type": "boolean"},
                "init": {"$ref": "#/$defs/theta"},
            },
            "additionalProperties": False,
        },
        "outputs": {"type": "object", "additionalProperties": {"type": "string"}},
    },
    "additionalProperties": False,
    "$defs": {
        "theta": {
            "type": "object",
            "required": ["delta0"],
            "properties": {
                "delta0": {"type": "number", "minimum": 0},
                "delta1": {"type": "number", "minimum": 0},
                "rho": {"type": "array", "items": {"type": "number", "minimum": 0, "maximum": 1}},
                "homo": {"type": "array", "items": {"type": "number", "minimum": 0}},
                "hetero": {"type": "array", "items": {"type": "number", "minimum": 0}},
            },
            "additionalProperties": False,
        },
    },
}


def _where(err: jsonschema.ValidationError) -> str:
    return "/".join(str(p) for p in err.absolute_path) or "<root>"


def validate_schema(doc: Any, schema: dict, what: str) -> None:
    validator = jsonschema.Draft202012Validator(schema)
    errors = sorted(validator.iter_errors(doc), key=lambda e: list(e.absolute_path))
    if errors:
        e = errors[0]
        raise ConfigError(f"{what}: field '{_where(e)}': {e.message}")


# --- canonical JSON ---------------------------------------------------------

def _fmt_float(v: float) -> str:
    if not math.isfinite(v):
        raise ValueError(f"cannot serialize non-finite number {v!r}")
    s = format(v, ".17g")
    if "e" not in s and "." not in s:
        s += ".0"
    return s


def canonical_dumps(obj: Any, indent: int | None = None) -> str:
    """Deterministic JSON: sorted keys, floats at 17 significant digits."""

    def enc(o, level):
        pad = "" if indent is None else "\n" + " " * (indent * (level + 1))
        end = "" if indent is None else "\n" + " " * (indent * level)
        if isinstance(o, bool) or o is None:
            return json.dumps(o)
        if isinstance(o, int):
            return str(int(o))
        if isinstance(o, float):
            return _fmt_float(o)
        if isinstance(o, str):
            return json.dumps(o, ensure_ascii=False)
        if isinstance(o, dict):
            if not o:
                return "{}"
            items = [f"{pad}{json.dumps(str(k), ensure_ascii=False)}:{'' if indent is None else ' '}"
                     f"{enc(o[k], level + 1)}" for k in sorted(o, key=str)]
            return "{" + ",".join(items) + end + "}"
        if isinstance(o, (list, tuple)):
            if not o:
                return "[]"
            return "[" + ",".join(f"{pad}{enc(v, level + 1)}" for v in o) + end + "]"
        if hasattr(o, "item"):
            return enc(o.item(), level)
        raise TypeError(f"cannot serialize {type(o).__name__}")

    return enc(obj, 0)


def panel_to_dict(panel: Panel) -> dict:
    cfg = panel.config
    return {
        "d": cfg.d,
        "q": cfg.q,
        "supports": [list(s) for s in cfg.supports],
        "waves": [
            {"t": w.t, "actors": [
                {"id": a, "z": [float(v) for v in w.positions[a]], "x": list(w.covariates[a])}
                for a in w.ids
            ]}
            for w in panel.waves
        ],
    }


def dumps_panel(panel: Panel) -> str:
    return canonical_dumps(panel_to_dict(panel)) + "\n"


def panel_from_dict(doc: dict, cfg: ModelConfig | None = None) -> Panel:
    validate_schema(doc, PANEL_SCHEMA, "panel file")
    if cfg is None:
        cfg = ModelConfig(d=doc["d"], q=doc["q"], supports=tuple(tuple(s) for s in doc["supports"]))
    elif (cfg.d, cfg.q) != (doc["d"], doc["q"]) or [list(s) for s in cfg.supports] != doc["supports"]:
        raise ConfigError("panel file d/q/supports disagree with the model config")
    waves = []
    for w in doc["waves"]:
        ids = [a["id"] for a in w["actors"]]
        if len(set(ids)) != len(ids):
            raise ConfigError(f"panel file: wave t={w['t']} repeats an actor id")
        waves.append(WaveState(
            t=w["t"],
            actors=frozenset(ids),
            positions={a["id"]: tuple(a["z"]) for a in w["actors"]},
            covariates={a["id"]: tuple(a["x"]) for a in w["actors"]},
        ))
    return Panel(tuple(waves), cfg)


def read_panel(path, cfg: ModelConfig | None = None) -> Panel:
    try:
        doc = json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise ConfigError(f"panel file not found: {path}") from None
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path}: not valid JSON ({e})") from None
    return panel_from_dict(doc, cfg)


def write_panel(panel: Panel, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(dumps_panel(panel))


# --- run config -------------------------------------------------------------

def model_config_from(doc: dict) -> ModelConfig:
    m = doc["model"]
    kw = dict(d=m["d"], q=m["q"], supports=tuple(tuple(s) for s in m["supports"]))
    if "k" in m:
        kw["k"] = m["k"]
    if "c" in m:
        kw["c"] = float(m["c"])
    if "homophily" in m:
        kw["homophily_mode"] = tuple(m["homophily"])
    if "heterophily" in m:
        kw["heterophily_mode"] = tuple(m["heterophily"])
    return ModelConfig(**kw)


def migration_from(doc: dict | None) -> MigrationParams:
    doc = doc or {}
    return MigrationParams(
        emigration_prob=float(doc.get("emigration_prob", 0.0)),
        immigration_rate=float(doc.get("immigration_rate", 0.0)),
        immigrant_position_spread=float(doc.get("immigrant_position_spread", 1.0)),
        immigrant_covariate_probs=tuple(tuple(p) for p in doc.get("immigrant_covariate_probs", ())),
    )


def theta_from(doc: dict, cfg: ModelConfig, migration: MigrationParams | None = None,
               field: str = "theta") -> ParamVector:
    q = cfg.q
    for name in ("rho", "homo", "hetero"):
        if name in doc and len(doc[name]) != q:
            raise ConfigError(f"field '{field}/{name}': expected {q} values, got {len(doc[name])}")
    return ParamVector(
        delta0=doc["delta0"],
        delta1=doc.get("delta1", 0.0),
        rho=tuple(doc.get("rho", [0.5] * q)),
        homo=tuple(doc.get("homo", [0.0] * q)),
        hetero=tuple(doc.get("hetero", [0.0] * q)),
        migration=migration or MigrationParams(),
    )


def theta_to_dict(theta: ParamVector) -> dict:
    return {"delta0": theta.delta0, "delta1": theta.delta1, "rho": list(theta.rho),
            "homo": list(theta.homo), "hetero": list(theta.hetero)}


def load_run_config(path) -> dict:
    """Read and schema-check a JSON run config; raises :class:`ConfigError`."""
    try:
        doc = json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path}: not valid JSON ({e})") from None
    validate_schema(doc, RUN_SCHEMA, "config")
    return doc


def rows_to_csv(rows: list[dict]) -> str:
    if not rows:
        return ""
    fields = list(rows[0])
    for r in rows[1:]:
        fields.extend(k for k in r if k not in fields)
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=fields, lineterminator="\n")
    writer.writeheader()
    for r in rows:
        writer.writerow({k: ("" if r.get(k) is None else _csv_cell(r.get(k))) for k in fields})
    return buf.getvalue()


def _csv_cell(v):
    if isinstance(v, float):
        return "nan" if math.isnan(v) else repr(v)
    return v


__all__ = ["canonical_dumps", "config_dict", "dumps_panel", "load_run_config", "read_panel",
           "write_panel", "panel_from_dict", "panel_to_dict", "rows_to_csv", "theta_from"]
