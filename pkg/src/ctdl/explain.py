"""Turn a learning-free test episode into a short ordered explanation.

A trace records, per step, which SOM unit matched the state (the memory), its
value for the action taken, the reliance weight beta, and the action. Pruning
keeps one row per memory (the one with the largest beta, earliest on ties),
drops rows whose beta does not exceed the threshold, and orders the survivors
by when they were used.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from typing import Iterable, Optional, Union

import numpy as np

from . import env as envs
from .agent import Agent, EpisodeTrace, TraceStep
from .errors import ConfigurationError, ExplanationFormatError, UnsupportedVersionError

SCHEMA_VERSION = 1

ActionT = Union[int, float, tuple]


@dataclass(frozen=True)
class TraceRow:
    t: int
    unit: int
    memory: tuple
    value: float
    beta: float
    action: ActionT


@dataclass(frozen=True)
class ExplanationEntry:
    memory: tuple  # normalized state of the memory
    value: float
    action: ActionT
    beta: float
    source_t: int


@dataclass
class Explanation:
    entries: list = field(default_factory=list)
    threshold_used: float = 0.5
    provenance: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.entries)

    def memories(self) -> list:
        return [e.memory for e in self.entries]


def _freeze_action(a) -> ActionT:
    if isinstance(a, (int, np.integer)) and not isinstance(a, (bool, np.bool_)):
        return int(a)
    arr = np.asarray(a, dtype=float).reshape(-1)
    return float(arr[0]) if arr.size == 1 else tuple(float(v) for v in arr)


def trace_rows(trace: Union[EpisodeTrace, Iterable]) -> list[TraceRow]:
    """Convert agent test-trial steps to rows; steps without a memory are skipped."""
    steps = trace.steps if isinstance(trace, EpisodeTrace) else trace
    rows = []
    for step in steps:
        if isinstance(step, TraceRow):
            rows.append(step)
        elif step.unit is not None:
            rows.append(_row(step))
    return rows


def _row(step: TraceStep) -> TraceRow:
    return TraceRow(step.t, int(step.unit), tuple(float(v) for v in step.memory), float(step.value),
                    float(step.beta), _freeze_action(step.action))


def _entry(row: TraceRow) -> ExplanationEntry:
    return ExplanationEntry(row.memory, row.value, row.action, row.beta, row.t)


def _check_threshold(threshold: float) -> None:
    if not 0 <= threshold < 1:
        raise ConfigurationError(f"threshold must lie in [0, 1), got {threshold}")


def best_rows(rows: Iterable[TraceRow]) -> dict[int, TraceRow]:
    """Per memory (unit), the row with the highest beta; earliest wins ties."""
    best: dict[int, TraceRow] = {}
    for row in rows:
        held = best.get(row.unit)
        if held is None or row.beta > held.beta:
            best[row.unit] = row
    return best


def prune(trace, threshold: float = 0.5, provenance: Optional[dict] = None) -> Explanation:
    _check_threshold(threshold)
    kept = [r for r in best_rows(trace_rows(trace)).values() if r.beta > threshold]
    kept.sort(key=lambda r: r.t)
    return Explanation([_entry(r) for r in kept], threshold, dict(provenance or {}))


def online_prune(steps: Iterable, threshold: float = 0.5, provenance: Optional[dict] = None) -> Explanation:
    """Streaming prune: holds at most one row per memory.

    A row is appended when its beta exceeds the threshold; if its memory is
    already listed with a lower beta, the old row is dropped and the new one
    appended at the end.
    """
    _check_threshold(threshold)
    held: dict[int, TraceRow] = {}
    for step in steps:
        if isinstance(step, TraceStep):
            if step.unit is None or not step.beta > threshold:
                continue
            row = _row(step)
        else:
            row = step
            if not row.beta > threshold:
                continue
        old = held.get(row.unit)
        if old is None or row.beta > old.beta:
            held.pop(row.unit, None)
            held[row.unit] = row
    return Explanation([_entry(r) for r in held.values()], threshold, dict(provenance or {}))


def generate_online(agent: Agent, env, threshold: float, rng: np.random.Generator, stochastic: bool = False,
                    provenance: Optional[dict] = None) -> Explanation:
    """Explanation built while the test episode runs, without storing the trace."""
    return online_prune(agent.test_steps(env, rng, stochastic), threshold, provenance)


def shuffle_baseline(trace, target_size: int, rng: np.random.Generator,
                     provenance: Optional[dict] = None) -> Explanation:
    """Random size-matched subset of the trace's memories (each with its max-beta row)."""
    best = best_rows(trace_rows(trace))
    if not 0 <= target_size <= len(best):
        raise ConfigurationError(f"cannot sample {target_size} memories from {len(best)} unique memories")
    units = list(best)
    picked = rng.choice(len(units), size=target_size, replace=False) if target_size else []
    rows = sorted((best[units[k]] for k in picked), key=lambda r: r.t)
    prov = dict(provenance or {})
    prov["shuffled"] = True
    return Explanation([_entry(r) for r in rows], 0.0, prov)


def unique_memory_count(trace) -> int:
    return len(best_rows(trace_rows(trace)))


# file format --------------------------------------------------------------

def _action_json(a: ActionT):
    if isinstance(a, int):
        return a
    if isinstance(a, float):
        return [a]
    return list(a)


def explanation_to_dict(expl: Explanation, env_spec=None) -> dict:
    entries = []
    for e in expl.entries:
        norm = list(e.memory)
        raw = envs.denormalize(env_spec, norm).tolist() if env_spec is not None else None
        entries.append({
            "t": e.source_t,
            "state_raw": raw,
            "state_norm": norm,
            "value": e.value,
            "action": _action_json(e.action),
            "beta": e.beta,
        })
    d = {
        "version": SCHEMA_VERSION,
        "provenance": dict(expl.provenance),
        "threshold": expl.threshold_used,
        "entries": entries,
    }
    if env_spec is not None:
        d["environment"] = env_spec.to_dict()
    return d


def _num(value, path: str) -> float:
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise ExplanationFormatError(f"expected a number, got {value!r}", path)
    if not math.isfinite(value):
        raise ExplanationFormatError("non-finite number", path)
    return float(value)


def _vector(value, path: str) -> tuple:
    if not isinstance(value, list) or not value:
        raise ExplanationFormatError("expected a non-empty list of numbers", path)
    return tuple(_num(v, f"{path}[{i}]") for i, v in enumerate(value))


def explanation_from_dict(d: dict) -> Explanation:
    if not isinstance(d, dict):
        raise ExplanationFormatError("top level must be an object")
    if "version" not in d:
        raise ExplanationFormatError("missing field", "version")
    if d["version"] != SCHEMA_VERSION:
        raise UnsupportedVersionError(f"unsupported explanation schema version {d['version']!r}", "version")
    threshold = _num(d.get("threshold"), "threshold")
    if not 0 <= threshold < 1:
        raise ExplanationFormatError(f"threshold {threshold} outside [0, 1)", "threshold")
    provenance = d.get("provenance", {})
    if not isinstance(provenance, dict):
        raise ExplanationFormatError("expected an object", "provenance")
    spec = None
    if d.get("environment") is not None:
        try:
            spec = envs.spec_from_dict(d["environment"])
        except ConfigurationError as e:
            raise ExplanationFormatError(str(e), "environment") from None
    raw_entries = d.get("entries")
    if not isinstance(raw_entries, list):
        raise ExplanationFormatError("expected a list", "entries")
    entries = []
    seen = set()
    last_t = -1
    for i, item in enumerate(raw_entries):
        p = f"entries[{i}]"
        if not isinstance(item, dict):
            raise ExplanationFormatError("expected an object", p)
        for key in ("t", "state_norm", "value", "action", "beta"):
            if key not in item:
                raise ExplanationFormatError("missing field", f"{p}.{key}")
        t = item["t"]
        if isinstance(t, bool) or not isinstance(t, int) or t < 0:
            raise ExplanationFormatError(f"expected a non-negative integer, got {t!r}", f"{p}.t")
        if t <= last_t:
            raise ExplanationFormatError("entries must be strictly ordered by t", f"{p}.t")
        last_t = t
        memory = _vector(item["state_norm"], f"{p}.state_norm")
        if memory in seen:
            raise ExplanationFormatError("duplicate memory", f"{p}.state_norm")
        seen.add(memory)
        b = _num(item["beta"], f"{p}.beta")
        if not 0 <= b <= 1:
            raise ExplanationFormatError(f"beta {b} outside [0, 1]", f"{p}.beta")
        if b < threshold:
            raise ExplanationFormatError(f"beta {b} below threshold {threshold}", f"{p}.beta")
        action = item["action"]
        if isinstance(action, bool):
            raise ExplanationFormatError("boolean action", f"{p}.action")
        if isinstance(action, int):
            act: ActionT = action
        else:
            vec = _vector(action, f"{p}.action")
            act = vec[0] if len(vec) == 1 else vec
        if spec is not None and item.get("state_raw") is not None:
            raw = _vector(item["state_raw"], f"{p}.state_raw")
            if not np.allclose(envs.denormalize(spec, memory), raw, rtol=1e-9, atol=1e-9):
                raise ExplanationFormatError("state_raw disagrees with state_norm", f"{p}.state_raw")
        entries.append(ExplanationEntry(memory, _num(item["value"], f"{p}.value"), act, b, t))
    return Explanation(entries, threshold, dict(provenance))


def save_explanation(expl: Explanation, path, env_spec=None) -> None:
    with open(path, "w") as f:
        json.dump(explanation_to_dict(expl, env_spec), f, indent=2)


def load_explanation(path) -> Explanation:
    with open(path) as f:
        text = f.read()
    try:
        d = json.loads(text)
    except json.JSONDecodeError as e:
        raise ExplanationFormatError(e.msg, f"line {e.lineno} col {e.colno}") from None
    return explanation_from_dict(d)


def load_environment(path):
    """Environment spec embedded in an explanation file, if any."""
    with open(path) as f:
        d = json.load(f)
    return envs.spec_from_dict(d["environment"]) if d.get("environment") else None
