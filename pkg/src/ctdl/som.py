"""TD-gated self-organizing map: the fast, pattern-separated episodic store.

Units live on a 2-D lattice; each holds a state vector in normalized
observation space plus a tabular value per action. Weight plasticity (both
learning rate and neighbourhood width) is scaled by the magnitude of the
network's TD error, so units migrate toward states the network predicts badly.
"""
from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field

import numpy as np

from . import _kernels
from .errors import ConfigurationError, ExplanationFormatError, NumericalError, UnsupportedVersionError

CHECKPOINT_VERSION = 1


@dataclass
class Som:
    grid_width: int
    grid_height: int
    weights: np.ndarray  # (units, obs_dim)
    values: np.ndarray  # (units, n_values)
    frozen: np.ndarray = None  # (units,) bool
    stored_actions: list = None
    alpha_max: float = 0.5
    sigma_max: float = 1.0
    sigma_min: float = 0.1
    tau: float = 1.0
    value_lr: float = 0.2
    td_norm: float = 1.0
    lattice: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        n = self.grid_width * self.grid_height
        if n < 1:
            raise ConfigurationError("SOM must have at least one unit")
        self.weights = np.asarray(self.weights, dtype=float)
        self.values = np.asarray(self.values, dtype=float)
        if self.weights.shape[0] != n or self.values.shape[0] != n:
            raise ConfigurationError(f"expected {n} units for a {self.grid_width}x{self.grid_height} lattice")
        if self.frozen is None:
            self.frozen = np.zeros(n, dtype=bool)
        self.frozen = np.asarray(self.frozen, dtype=bool)
        if self.stored_actions is None:
            self.stored_actions = [None] * n
        for name in ("alpha_max", "sigma_max", "sigma_min", "tau", "value_lr", "td_norm"):
            if not getattr(self, name) > 0:
                raise ConfigurationError(f"SOM hyperparameter {name} must be positive")
        if self.sigma_min > self.sigma_max:
            raise ConfigurationError("sigma_min exceeds sigma_max")
        idx = np.arange(n)
        self.lattice = np.stack([idx % self.grid_width, idx // self.grid_width], axis=1).astype(float)

    @property
    def n_units(self) -> int:
        return self.weights.shape[0]

    @property
    def n_values(self) -> int:
        return self.values.shape[1]

    def hyperparameters(self) -> dict:
        return {
            "alpha_max": self.alpha_max,
            "sigma_max": self.sigma_max,
            "sigma_min": self.sigma_min,
            "tau": self.tau,
            "value_lr": self.value_lr,
            "td_norm": self.td_norm,
        }

    def copy(self) -> "Som":
        return Som(self.grid_width, self.grid_height, self.weights.copy(), self.values.copy(), self.frozen.copy(),
                   list(self.stored_actions), **self.hyperparameters())

    def frozen_digest(self) -> str:
        h = hashlib.sha256()
        for j in np.flatnonzero(self.frozen):
            h.update(int(j).to_bytes(4, "little"))
            h.update(self.weights[j].tobytes())
            h.update(self.values[j].tobytes())
            h.update(repr(self.stored_actions[j]).encode())
        return h.hexdigest()

    def to_dict(self) -> dict:
        return {
            "version": CHECKPOINT_VERSION,
            "lattice": [self.grid_width, self.grid_height],
            "hyperparameters": self.hyperparameters(),
            "units": [
                {
                    "weights": self.weights[j].tolist(),
                    "values": self.values[j].tolist(),
                    "frozen": bool(self.frozen[j]),
                    "stored_action": _action_to_json(self.stored_actions[j]),
                }
                for j in range(self.n_units)
            ],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Som":
        if d.get("version") != CHECKPOINT_VERSION:
            raise UnsupportedVersionError(f"unsupported SOM checkpoint version {d.get('version')!r}", "version")
        try:
            w, h = d["lattice"]
            units = d["units"]
            return cls(
                int(w), int(h),
                np.array([u["weights"] for u in units], dtype=float),
                np.array([u["values"] for u in units], dtype=float),
                np.array([u["frozen"] for u in units], dtype=bool),
                [_action_from_json(u.get("stored_action")) for u in units],
                **{k: float(v) for k, v in d["hyperparameters"].items()},
            )
        except (KeyError, TypeError, ValueError) as e:
            raise ExplanationFormatError(f"bad SOM checkpoint: {e}") from None


def _action_to_json(a):
    if a is None or isinstance(a, int):
        return a
    return [float(v) for v in np.asarray(a, dtype=float).reshape(-1)]


def _action_from_json(a):
    if a is None or isinstance(a, int):
        return a
    return np.array(a, dtype=float)


def som_init(grid_width: int, grid_height: int, obs_dim: int, n_values: int, rng: np.random.Generator,
             **hyper) -> Som:
    """Units scattered uniformly over the unit box, values zero."""
    n = grid_width * grid_height
    if n < 1:
        raise ConfigurationError("SOM must have at least one unit")
    return Som(grid_width, grid_height, rng.uniform(0.0, 1.0, size=(n, obs_dim)), np.zeros((n, n_values)), **hyper)


def bmu(som: Som, s_norm) -> tuple[int, float]:
    """Index of the closest unit (lowest index on ties) and its Euclidean distance."""
    if som.n_units == 0:
        raise ConfigurationError("empty SOM")
    s = np.asarray(s_norm, dtype=float)
    if s.shape != (som.weights.shape[1],):
        raise TypeError(f"state shape {s.shape} does not match SOM dimension {som.weights.shape[1]}")
    j, d = _kernels.bmu(som.weights, s)
    return int(j), float(d)


def beta(distance: float, tau: float) -> float:
    """Episodic reliance exp(-d^2 / tau), in (0, 1]."""
    return math.exp(-distance * distance / tau)


def gating(som: Som, td_dnn: float) -> float:
    return min(1.0, abs(td_dnn) / som.td_norm)


def som_update_weights(som: Som, s_norm, td_dnn: float) -> None:
    """TD-gated SOM step; frozen units never move."""
    if not math.isfinite(td_dnn):
        raise NumericalError(f"non-finite TD error {td_dnn}")
    rho = gating(som, td_dnn)
    if rho == 0.0:
        return
    s = np.asarray(s_norm, dtype=float)
    b, _ = bmu(som, s)
    sigma = max(som.sigma_min, som.sigma_max * rho)
    _kernels.som_pull(som.weights, som.frozen, som.lattice, s, b, som.alpha_max * rho, sigma)


def som_update_value(som: Som, unit_index: int, action_index: int, td_som: float) -> None:
    if not 0 <= unit_index < som.n_units or not 0 <= action_index < som.n_values:
        raise IndexError(f"unit {unit_index} / value slot {action_index} out of range")
    if not math.isfinite(td_som):
        raise NumericalError(f"non-finite SOM TD error {td_som}")
    if som.frozen[unit_index]:
        return
    som.values[unit_index, action_index] += som.value_lr * td_som


def som_seed(som: Som, explanation, rng: np.random.Generator) -> list[int]:
    """Transplant explanation entries into randomly chosen units and freeze them.

    Each seeded unit carries the entry's state, its value in every value slot,
    and the entry's action. Returns the chosen unit indices in entry order.
    """
    entries = list(getattr(explanation, "entries", explanation))
    if len(entries) > som.n_units:
        raise ConfigurationError(f"explanation of {len(entries)} entries exceeds SOM capacity {som.n_units}")
    if not entries:
        return []
    chosen = rng.choice(som.n_units, size=len(entries), replace=False)
    for j, entry in zip(chosen, entries):
        som.weights[j] = np.asarray(entry.memory, dtype=float)
        som.values[j] = float(entry.value)
        som.frozen[j] = True
        som.stored_actions[j] = entry.action
    return [int(j) for j in chosen]
