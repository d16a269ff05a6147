"""JSON case files, MATPOWER import, event scripts and results output."""

from __future__ import annotations

import csv
import datetime as _dt
import json
import math
import re
from dataclasses import fields
from pathlib import Path

import jsonschema
import numpy as np

from .network import (
    Area,
    Branch,
    Bus,
    BusKind,
    Generator,
    Load,
    NetworkCase,
    Status,
    ValidationError,
    to_per_unit,
    to_physical,
    validate,
)
from .staged import (
    BranchOutage,
    GeneratorOutage,
    LoadOverride,
    LoadScale,
    ReplaceCase,
)
from .solver import losses

__all__ = [
    "CaseFormatError",
    "MalformedInputError",
    "SchemaViolationError",
    "UnsupportedRecordError",
    "case_to_dict",
    "dump_case",
    "import_matpower",
    "parse_case",
    "parse_events",
    "results_to_dict",
    "write_generator_csv",
    "write_results",
]

SCHEMA_VERSION = 1


class CaseFormatError(ValueError):
    pass


class MalformedInputError(CaseFormatError):
    pass


class SchemaViolationError(CaseFormatError):
    def __init__(self, message, pointer=""):
        self.pointer = pointer
        super().__init__(f"{pointer or '/'}: {message}")


class UnsupportedRecordError(CaseFormatError):
    def __init__(self, records):
        self.records = list(records)
        super().__init__("unsupported records: " + ", ".join(self.records))


_num = {"type": "number"}
_int = {"type": "integer"}
_triple = {"type": "array", "items": _num, "minItems": 3, "maxItems": 3}
_status = {"enum": [s.value for s in Status]}


def _obj(props, required):
    return {
        "type": "object",
        "properties": props,
        "required": required,
        "additionalProperties": False,
    }


CASE_SCHEMA = _obj(
    {
        "version": {"const": SCHEMA_VERSION},
        "name": {"type": "string"},
        "mva_base": _num,
        "f_nominal": _num,
        "buses": {"type": "array", "items": _obj({
            "id": _int, "base_kv": _num, "kind": {"enum": [k.value for k in BusKind]},
            "area_id": _int, "v_set": {"type": ["number", "null"]}, "angle_set": _num,
        }, ["id", "base_kv", "kind"])},
        "branches": {"type": "array", "items": _obj({
            "id": _int, "from_bus": _int, "to_bus": _int, "r": _num, "x": _num,
            "b_sh": _num, "tap": _num, "status": _status,
        }, ["id", "from_bus", "to_bus", "r", "x"])},
        "generators": {"type": "array", "items": _obj({
            "id": _int, "bus_id": _int, "p_set": _num, "p_min": _num, "p_max": _num,
            "droop_gain": _num, "kappa": _num, "agc": {"type": "boolean"}, "status": _status,
        }, ["id", "bus_id", "p_set", "p_min", "p_max"])},
        "loads": {"type": "array", "items": _obj({
            "id": _int, "bus_id": _int, "p0": _num, "q0": _num, "zip_p": _triple,
            "zip_q": _triple, "k_pf": _num, "k_qf": _num, "status": _status,
        }, ["id", "bus_id", "p0"])},
        "areas": {"type": "array", "items": _obj({
            "id": _int, "beta": _num, "scheduled_interchange": _num,
        }, ["id"])},
    },
    ["version", "mva_base", "buses"],
)


def _pointer(path) -> str:
    return "/" + "/".join(str(p) for p in path) if path else ""


def _check_schema(doc, schema):
    validator = jsonschema.Draft202012Validator(schema)
    errors = sorted(validator.iter_errors(doc), key=lambda e: list(e.absolute_path))
    if errors:
        err = errors[0]
        raise SchemaViolationError(err.message, _pointer(err.absolute_path))


def _load_json(source):
    if hasattr(source, "read"):
        text = source.read()
    else:
        text = Path(source).read_text()
    try:
        return json.loads(text)
    except json.JSONDecodeError as exc:
        raise MalformedInputError(
            f"malformed JSON at line {exc.lineno}, column {exc.colno}: {exc.msg}"
        ) from None


def _build(cls, record, **convert):
    names = {f.name for f in fields(cls)}
    kw = {k: v for k, v in record.items() if k in names}
    for key, fn in convert.items():
        if key in kw:
            kw[key] = fn(kw[key])
    return cls(**kw)


def case_from_dict(doc) -> NetworkCase:
    """Build a physical-unit case from a schema-checked document."""
    _check_schema(doc, CASE_SCHEMA)
    for key in ("buses", "branches", "generators", "loads", "areas"):
        seen = set()
        for i, rec in enumerate(doc.get(key, [])):
            if rec["id"] in seen:
                raise SchemaViolationError(f"duplicate id {rec['id']}", f"/{key}/{i}/id")
            seen.add(rec["id"])
    st = Status
    return NetworkCase(
        mva_base=float(doc["mva_base"]),
        f_nominal=float(doc.get("f_nominal", 60.0)),
        buses=[_build(Bus, r, kind=BusKind) for r in doc["buses"]],
        branches=[_build(Branch, r, status=st) for r in doc.get("branches", [])],
        generators=[_build(Generator, r, status=st) for r in doc.get("generators", [])],
        loads=[_build(Load, r, zip_p=tuple, zip_q=tuple, status=st)
               for r in doc.get("loads", [])],
        areas=[_build(Area, r) for r in doc.get("areas", [])],
        name=doc.get("name", ""),
    )


def _finalise(case: NetworkCase) -> NetworkCase:
    problems = validate(case)
    if problems:
        raise ValidationError(problems)
    return to_per_unit(case)


def parse_case(source) -> NetworkCase:
    """Read, schema-check, validate and per-unit a JSON case (path or stream)."""
    return _finalise(case_from_dict(_load_json(source)))


def _plain(value):
    if isinstance(value, (Status, BusKind)):
        return value.value
    if isinstance(value, tuple):
        return [_plain(v) for v in value]
    if isinstance(value, (np.floating,)):
        return float(value)
    return value


def case_to_dict(case: NetworkCase) -> dict:
    """Serialize a case to the versioned JSON layout in physical units."""
    case = to_physical(case)

    def records(items):
        return [{f.name: _plain(getattr(it, f.name)) for f in fields(it)} for it in items]

    doc = {"version": SCHEMA_VERSION}
    if case.name:
        doc["name"] = case.name
    doc.update(
        mva_base=case.mva_base,
        f_nominal=case.f_nominal,
        buses=records(case.buses),
        branches=records(case.branches),
        generators=records(case.generators),
        loads=records(case.loads),
        areas=records(case.areas),
    )
    return doc


def dump_case(case: NetworkCase, path) -> None:
    Path(path).write_text(json.dumps(case_to_dict(case), indent=1) + "\n")


# -- MATPOWER ---------------------------------------------------------------

_KNOWN_IGNORED = {"gencost", "areas", "bus_name", "version"}
_MATRIX_RE = re.compile(r"mpc\.(\w+)\s*=\s*\[(.*?)\]\s*;", re.S)
_CELL_RE = re.compile(r"mpc\.(\w+)\s*=\s*\{(.*?)\}\s*;", re.S)
_SCALAR_RE = re.compile(r"mpc\.(\w+)\s*=\s*([^\[\{;]+);")


def _strip_comments(text):
    return "\n".join(line.split("%", 1)[0] for line in text.splitlines())


def _matrix(body):
    rows = []
    for chunk in re.split(r"[;\n]", body):
        chunk = chunk.strip()
        if chunk:
            rows.append([float(v) for v in chunk.replace(",", " ").split()])
    return rows


SIDECAR_FIELDS = {
    "generator": {"droop_gain", "kappa", "agc", "p_min", "p_max"},
    "load": {"zip_p", "zip_q", "k_pf", "k_qf"},
    "area": {"beta", "scheduled_interchange"},
}


def _apply_overrides(items, overrides, allowed, kind):
    by_id = {it["id"]: it for it in items}
    for rec in overrides:
        rec = dict(rec)
        item_id = rec.pop("id", None)
        if item_id not in by_id:
            raise SchemaViolationError(f"sidecar refers to unknown {kind} {item_id}")
        bad = set(rec) - allowed
        if bad:
            raise SchemaViolationError(f"sidecar {kind} fields not allowed: {sorted(bad)}")
        by_id[item_id].update(rec)


def import_matpower(path, sidecar=None) -> NetworkCase:
    """Import a MATPOWER text case and optional frequency-parameter sidecar.

    Bus ``PD/QD`` become constant-power loads with the bus id as load id;
    fixed shunts ``GS/BS`` become constant-impedance loads with id ``-bus``.
    Generators are numbered by their row (1-based). Frequency parameters
    default to zero, so without a sidecar the case solves as a classic
    power flow.
    """
    text = _strip_comments(Path(path).read_text())
    matrices = {m.group(1): m.group(2) for m in _MATRIX_RE.finditer(text)}
    cells = {m.group(1) for m in _CELL_RE.finditer(text)}
    scalars = {m.group(1): m.group(2).strip() for m in _SCALAR_RE.finditer(text)}
    unsupported = sorted(
        (set(matrices) | cells) - {"bus", "gen", "branch"} - _KNOWN_IGNORED
    )
    for key in ("bus", "gen", "branch"):
        if key not in matrices:
            raise MalformedInputError(f"MATPOWER case has no mpc.{key} table")
    bus_rows = _matrix(matrices["bus"])
    gen_rows = _matrix(matrices["gen"])
    br_rows = _matrix(matrices["branch"])
    for i, row in enumerate(bus_rows):
        if int(row[1]) == 4:
            unsupported.append(f"bus[{i + 1}] (isolated bus type 4)")
    for i, row in enumerate(br_rows):
        if len(row) > 9 and row[9] != 0:
            unsupported.append(f"branch[{i + 1}] (phase shift {row[9]:g} deg)")
    if unsupported:
        raise UnsupportedRecordError(unsupported)
    mva_base = float(scalars.get("baseMVA", 100.0))

    gen_vset = {}
    gen_buses = set()
    gens = []
    for i, row in enumerate(gen_rows, start=1):
        bus_id, pg, vg, on = int(row[0]), row[1], row[5], row[7] > 0
        pmax, pmin = row[8], row[9]
        if on:
            gen_buses.add(bus_id)
            gen_vset.setdefault(bus_id, vg)
        gens.append({
            "id": i, "bus_id": bus_id, "p_set": pg,
            "p_min": min(pmin, pg), "p_max": max(pmax, pg),
            "status": (Status.IN_SERVICE if on else Status.OUT).value,
        })

    kinds = {1: BusKind.PQ, 2: BusKind.PV, 3: BusKind.SLACK}
    buses, loads, area_ids = [], [], []
    for row in bus_rows:
        bid, btype = int(row[0]), int(row[1])
        pd, qd, gs, bs, area, vm, va, kv = row[2], row[3], row[4], row[5], int(row[6]), row[7], row[8], row[9]
        kind = kinds[btype]
        v_set = None
        if kind is not BusKind.PQ:
            v_set = gen_vset.get(bid, vm)
        buses.append({
            "id": bid, "base_kv": kv if kv > 0 else 1.0, "kind": kind.value,
            "area_id": area, "v_set": v_set,
            "angle_set": math.radians(va) if kind is BusKind.SLACK else 0.0,
        })
        if area not in area_ids:
            area_ids.append(area)
        if pd or qd:
            loads.append({"id": bid, "bus_id": bid, "p0": pd, "q0": qd})
        if gs or bs:
            loads.append({"id": -bid, "bus_id": bid, "p0": gs, "q0": -bs,
                          "zip_p": [1.0, 0.0, 0.0], "zip_q": [1.0, 0.0, 0.0]})

    branches = []
    for i, row in enumerate(br_rows, start=1):
        tap = row[8] if len(row) > 8 and row[8] != 0 else 1.0
        status = row[10] if len(row) > 10 else 1
        branches.append({
            "id": i, "from_bus": int(row[0]), "to_bus": int(row[1]),
            "r": row[2], "x": row[3], "b_sh": row[4], "tap": tap,
            "status": (Status.IN_SERVICE if status > 0 else Status.OUT).value,
        })
    areas = [{"id": a} for a in sorted(area_ids)]

    if sidecar is not None:
        extra = _load_json(sidecar)
        unknown = set(extra) - {"defaults", "generators", "loads", "areas"}
        if unknown:
            raise SchemaViolationError(f"unknown sidecar keys {sorted(unknown)}")
        for kind, items in (("generator", gens), ("load", loads), ("area", areas)):
            default = extra.get("defaults", {}).get(kind, {})
            bad = set(default) - SIDECAR_FIELDS[kind]
            if bad:
                raise SchemaViolationError(f"sidecar {kind} defaults not allowed: {sorted(bad)}")
            for it in items:
                it.update(default)
            _apply_overrides(items, extra.get(kind + "s", []), SIDECAR_FIELDS[kind], kind)

    doc = {
        "version": SCHEMA_VERSION,
        "name": Path(path).stem,
        "mva_base": mva_base,
        "f_nominal": 60.0,
        "buses": buses,
        "branches": branches,
        "generators": gens,
        "loads": loads,
        "areas": areas,
    }
    return _finalise(case_from_dict(doc))


# -- events -----------------------------------------------------------------

_EVENT_SCHEMA = _obj(
    {
        "version": {"const": SCHEMA_VERSION},
        "events": {"type": "array", "items": {"oneOf": [
            _obj({"type": {"const": "generator_outage"}, "id": _int}, ["type", "id"]),
            _obj({"type": {"const": "branch_outage"}, "id": _int}, ["type", "id"]),
            _obj({"type": {"const": "load_scale"}, "factor": _num}, ["type", "factor"]),
            _obj({"type": {"const": "load_override"}, "id": _int, "p0": _num, "q0": _num},
                 ["type", "id", "p0"]),
            _obj({"type": {"const": "replace_case"}, "path": {"type": "string"}},
                 ["type", "path"]),
        ]}},
    },
    ["version", "events"],
)


def parse_events(source) -> list:
    """Read an event script; ``replace_case`` paths resolve next to the script."""
    doc = _load_json(source)
    _check_schema(doc, _EVENT_SCHEMA)
    base = Path(source).parent if not hasattr(source, "read") else Path(".")
    events = []
    for ev in doc["events"]:
        kind = ev["type"]
        if kind == "generator_outage":
            events.append(GeneratorOutage(ev["id"]))
        elif kind == "branch_outage":
            events.append(BranchOutage(ev["id"]))
        elif kind == "load_scale":
            events.append(LoadScale(float(ev["factor"])))
        elif kind == "load_override":
            events.append(LoadOverride(ev["id"], float(ev["p0"]), ev.get("q0")))
        else:
            events.append(ReplaceCase(parse_case(base / ev["path"])))
    return events


# -- results ----------------------------------------------------------------


def stage_to_dict(result) -> dict:
    case = result.case
    mva = case.mva_base
    v = result.state.voltages
    gens = []
    for gid, d in result.dispatch.items():
        gens.append({
            "id": gid,
            "p_set": d["p_set"] * mva,
            "dp_primary": d["dp_primary"] * mva,
            "dp_secondary": d["dp_secondary"] * mva,
            "p_total": d["p_total"] * mva,
            "q": d["q"] * mva,
        })
    buses = [
        {"id": b.id, "v_mag": float(abs(v[k])), "v_angle_deg": float(np.degrees(np.angle(v[k])))}
        for k, b in enumerate(case.buses)
    ]
    return {
        "label": result.label.value,
        "time": f"t{result.time_index}",
        "cycle": result.cycle,
        "converged": result.report.converged,
        "iterations": result.report.iterations,
        "residual_norm": result.report.final_residual_norm,
        "df_hz": result.df,
        "ace_by_area_mw": {str(a): m.ace * mva for a, m in result.ace_by_area.items()},
        "total_ace_mw": result.total_ace * mva,
        "generators": gens,
        "buses": buses,
        "losses_mw": losses(case, result.state) * mva,
        "warnings": list(result.report.warnings),
    }


def results_to_dict(results, *, timestamp=None) -> dict:
    if timestamp is None:
        timestamp = _dt.datetime.now(_dt.timezone.utc).isoformat()
    return {
        "version": SCHEMA_VERSION,
        "generated_at": timestamp,
        "stages": [stage_to_dict(r) for r in results],
    }


def write_results(results, path, *, timestamp=None) -> None:
    # json emits the shortest repr that round-trips, so no precision is lost
    doc = results_to_dict(results, timestamp=timestamp)
    Path(path).write_text(json.dumps(doc, indent=1, allow_nan=True) + "\n")


GEN_COLUMNS = ["time", "label", "cycle", "id", "p_set", "dp_primary", "dp_secondary", "p_total", "q"]


def write_generator_csv(results, path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(GEN_COLUMNS)
        for r in results:
            stage = stage_to_dict(r)
            for g in stage["generators"]:
                writer.writerow(
                    [stage["time"], stage["label"], stage["cycle"], g["id"]]
                    + [repr(g[k]) for k in GEN_COLUMNS[4:]]
                )
