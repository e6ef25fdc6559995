"""Scenario files: JSON validated against the bundled schema, mapped onto model builders."""
from __future__ import annotations

import json
from functools import lru_cache
from importlib import resources
from pathlib import Path

import jsonschema

from .errors import ScenarioError
from .linalg import DEFAULT_TOL
from .models import (
    Scenario,
    build_chain_scenario,
    build_records_scenario,
    build_spin_measurement_scenario,
    build_twoslit_scenario,
    build_wave_packet_scenario,
)

SHIPPED = ("spin", "spin_copy_after", "twoslit", "records", "chain", "wavepacket")

# top-level sections each model type accepts besides name/description/model/tolerances/assert_checks
_SECTIONS = {
    "spin": set(),
    "twoslit": set(),
    "records": {"initial_state"},
    "chain": {"initial_state", "volumes", "ranges", "grid", "refine"},
    "wavepacket": {"initial_state", "grid", "rules"},
}
_STATE_KEYS = {
    "records": {"seed"},
    "chain": {"occupations", "superpose"},
    "wavepacket": {"width", "center", "momentum"},
}
_COMMON = {"name", "description", "model", "tolerances", "assert_checks"}


@lru_cache(maxsize=1)
def schema() -> dict:
    text = resources.files("realms").joinpath("scenarios/schema.json").read_text()
    return json.loads(text)


def shipped_path(name: str) -> Path:
    p = resources.files("realms").joinpath(f"scenarios/{name}.json")
    return Path(str(p))


def validate_document(doc) -> None:
    try:
        jsonschema.validate(doc, schema())
    except jsonschema.ValidationError as exc:
        where = "/".join(str(p) for p in exc.absolute_path) or "<root>"
        raise ScenarioError(f"scenario invalid at {where}: {exc.message}") from None
    kind = doc["model"]["type"]
    extra = set(doc) - _COMMON - _SECTIONS[kind]
    if extra:
        raise ScenarioError(f"sections {sorted(extra)} do not apply to model type {kind!r}")
    state = doc.get("initial_state", {})
    bad = set(state) - _STATE_KEYS.get(kind, set())
    if bad:
        raise ScenarioError(f"initial_state fields {sorted(bad)} do not apply to model type {kind!r}")
    if "occupations" in state and "superpose" in state:
        raise ScenarioError("give either occupations or superpose, not both")


def _default_ranges(volumes) -> list[float]:
    """[0, x, 1] with x halfway between the volume-average eigenvalues around one half.

    Average occupations take the values k/|V|, so a fixed split such as 0.5
    would sit on an eigenvalue for every even volume.
    """
    values = sorted({k / len(v) for v in volumes for k in range(len(v) + 1)})
    below = max(x for x in values if x <= 0.5)
    above = min(x for x in values if x > below)
    return [0.0, 0.5 * (below + above), 1.0]


def scenario_from_dict(doc: dict, overrides: dict | None = None) -> Scenario:
    validate_document(doc)
    tol = DEFAULT_TOL.replace(**doc.get("tolerances", {}))
    if overrides:
        tol = tol.replace(**overrides)
    m = doc["model"]
    kind = m["type"]
    name = doc.get("name", kind)
    state = doc.get("initial_state", {})
    try:
        if kind == "spin":
            sc = build_spin_measurement_scenario(copy_after=m.get("copy_after", False), tol=tol, name=name)
        elif kind == "twoslit":
            sc = build_twoslit_scenario(tol=tol, name=name)
        elif kind == "records":
            sc = build_records_scenario(seed=state.get("seed", 7), tol=tol, name=name)
        elif kind == "chain":
            grid = doc.get("grid", {})
            n = m["sites"]
            volumes = doc.get("volumes", [list(range(n))])
            sc = build_chain_scenario(
                n_sites=n,
                volumes=volumes,
                ranges=doc.get("ranges") or _default_ranges(volumes),
                steps=grid.get("steps", 2), dt=grid.get("dt", 0.5), hop=m.get("hop", 1.0),
                occupations=state.get("occupations"), superpose=state.get("superpose"),
                tol=tol, name=name,
            )
            sc.refine_mode = doc.get("refine", {}).get("mode", "medium")
        elif kind == "wavepacket":
            grid = doc.get("grid", {})
            rules = doc.get("rules", {})
            kwargs = {k: state[k] for k in ("center", "momentum") if k in state}
            sc = build_wave_packet_scenario(
                n_sites=m["sites"], hop_strength=m.get("hop", 1.0), packet_width=state.get("width", 1.0),
                n_steps=grid.get("steps", 3), dt=grid.get("dt", 1.0),
                p_min=rules.get("p_min", 1e-8), threshold=rules.get("threshold", 1e-3),
                cell_size=m.get("cell_size", 1), adaptive=rules.get("adaptive", "follow"),
                tol=tol, name=name, **kwargs,
            )
        else:  # pragma: no cover - schema rejects other types
            raise ScenarioError(f"unknown model type {kind!r}")
    except ScenarioError:
        raise
    except (ValueError, IndexError) as exc:
        raise ScenarioError(f"scenario {name!r} is inconsistent: {exc}") from exc
    if "assert_checks" in doc:
        sc.assert_checks = bool(doc["assert_checks"])
    sc.params = dict(sc.params, source=doc)
    return sc


def load_scenario(path, overrides: dict | None = None) -> Scenario:
    """Parse a scenario file (or the name of a shipped scenario)."""
    p = Path(path)
    if not p.exists() and str(path) in SHIPPED:
        p = shipped_path(str(path))
    try:
        doc = json.loads(p.read_text())
    except FileNotFoundError:
        raise ScenarioError(f"scenario file {path} not found") from None
    except json.JSONDecodeError as exc:
        raise ScenarioError(f"scenario file {path} is not valid JSON: {exc}") from None
    return scenario_from_dict(doc, overrides)
