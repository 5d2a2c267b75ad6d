"""CTDL agents and the plain actor-critic baseline.

``DiscreteCTDL`` pairs a Q-network with a per-action SOM (grid worlds).
``ContinuousAgent`` is a Gaussian actor with a state-value critic; with a SOM
it is the continuous CTDL variant, without one it is the A2C baseline.

Every agent optionally carries *guidance*: a list of (state, value, action)
entries from an explanation. When any entry lies close enough to the current
state (beta above the threshold), the agent takes that entry's action and
bootstraps from that entry's value.
"""
from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass, field
from typing import Iterator, Optional

import numpy as np

from . import _steps, approx, env as envs
from .approx import net_forward
from .errors import ConfigurationError, ExplanationFormatError, UnsupportedVersionError
from .som import Som, beta, bmu, som_init

VARIANTS = ("ctdl-discrete", "ctdl-continuous", "a2c-baseline")
CHECKPOINT_VERSION = 1


@dataclass
class AgentConfig:
    variant: str = "ctdl-discrete"
    gamma: float = 0.99
    epsilon_start: float = 1.0
    epsilon_end: float = 0.1
    epsilon_anneal_episodes: int = 200
    guidance_threshold: float = 0.5
    hidden: tuple = (128, 128)
    activation: str = "relu"
    optimizer: str = "adam"
    lr: float = 1e-3
    actor_lr: float = 1e-3
    actor_optimizer: str = ""  # empty: same as ``optimizer``
    init_log_std: float = 0.0
    som_width: int = 6
    som_height: int = 6
    alpha_max: float = 0.5
    sigma_max: float = 1.0
    sigma_min: float = 0.1
    tau: float = 1.0
    value_lr: float = 0.2
    td_norm: float = 1.0

    def __post_init__(self):
        self.hidden = tuple(int(h) for h in self.hidden)
        self.validate()

    def validate(self) -> None:
        if self.variant not in VARIANTS:
            raise ConfigurationError(f"unknown agent variant {self.variant!r}")
        if not 0 < self.gamma <= 1:
            raise ConfigurationError("gamma must lie in (0, 1]")
        if not 0 <= self.epsilon_end <= self.epsilon_start <= 1:
            raise ConfigurationError("need 0 <= epsilon_end <= epsilon_start <= 1")
        if self.epsilon_anneal_episodes < 0:
            raise ConfigurationError("epsilon_anneal_episodes must be non-negative")
        if not 0 < self.guidance_threshold < 1:
            raise ConfigurationError("guidance_threshold must lie in (0, 1)")
        if self.som_width < 1 or self.som_height < 1:
            raise ConfigurationError("SOM lattice must be at least 1x1")

    def epsilon(self, episode: int) -> float:
        if self.epsilon_anneal_episodes == 0:
            return self.epsilon_end
        frac = min(1.0, episode / self.epsilon_anneal_episodes)
        return self.epsilon_start + (self.epsilon_end - self.epsilon_start) * frac

    def som_hyperparameters(self) -> dict:
        return {
            "alpha_max": self.alpha_max,
            "sigma_max": self.sigma_max,
            "sigma_min": self.sigma_min,
            "tau": self.tau,
            "value_lr": self.value_lr,
            "td_norm": self.td_norm,
        }

    def to_dict(self) -> dict:
        d = asdict(self)
        d["hidden"] = list(self.hidden)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "AgentConfig":
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ConfigurationError(f"unknown agent config keys {sorted(unknown)}")
        return cls(**d)


@dataclass(frozen=True)
class CombinedEstimate:
    beta: float
    per_action: np.ndarray
    bmu_index: int
    bmu_distance: float


class Guidance:
    """Explanation entries packed for the compiled beta lookup.

    ``action_dim`` None packs integer (discrete) actions, otherwise float rows.
    """

    def __init__(self, entries, tau: float, threshold: float, action_dim: Optional[int] = None):
        self.entries = list(entries)
        self.tau = tau
        self.threshold = threshold
        n = len(self.entries)
        self.memories = np.array([np.asarray(e.memory, dtype=float) for e in self.entries]).reshape(n, -1) \
            if n else np.zeros((0, 2))
        self.values = np.array([float(e.value) for e in self.entries]) if n else np.zeros(0)
        if action_dim is None and all(isinstance(e.action, (int, np.integer)) for e in self.entries):
            actions = np.array([int(e.action) for e in self.entries], dtype=np.int64)
        else:
            dim = action_dim or 1
            actions = np.array([np.asarray(e.action, dtype=float).reshape(-1) for e in self.entries]).reshape(n, dim) \
                if n else np.zeros((0, dim))
        self.packed = (np.ascontiguousarray(self.memories), self.values, actions, float(threshold), float(tau))

    def __len__(self) -> int:
        return len(self.entries)

    def betas(self, s_norm) -> np.ndarray:
        diff = self.memories - s_norm
        return np.exp(-np.einsum("ij,ij->i", diff, diff) / self.tau)

    def lookup(self, s_norm) -> Optional[tuple[float, object]]:
        """(value, action) of the highest-valued entry with beta > threshold, else None."""
        if not self.entries:
            return None
        k = _steps.guide_index(self.packed, np.asarray(s_norm, dtype=float))
        if k < 0:
            return None
        return float(self.values[k]), self.entries[k].action


def _empty_guidance(action_dim: Optional[int]) -> tuple:
    acts = np.zeros(0, dtype=np.int64) if action_dim is None else np.zeros((0, action_dim))
    return (np.zeros((0, 2)), np.zeros(0), acts, 0.5, 1.0)


def guidance_lookup(explanation, s_norm, tau: float, threshold: float):
    entries = getattr(explanation, "entries", explanation)
    return Guidance(entries, tau, threshold).lookup(np.asarray(s_norm, dtype=float))


@dataclass
class TraceStep:
    t: int
    state: np.ndarray
    action: object
    reward: float
    unit: Optional[int]
    memory: Optional[np.ndarray]
    value: Optional[float]
    beta: Optional[float]


@dataclass
class EpisodeTrace:
    steps: list = field(default_factory=list)
    total_reward: float = 0.0
    reached_goal: bool = False

    def __len__(self) -> int:
        return len(self.steps)


class Agent:
    """Shared plumbing: normalization, guidance, checkpoints, hashing."""

    som: Optional[Som] = None

    def __init__(self, config: AgentConfig, env_spec):
        self.config = config
        self.env_spec = env_spec
        self._lo, self._span = envs.bounds(env_spec)
        self.guidance: Optional[Guidance] = None
        self.skipped_transitions = 0

    def normalize(self, obs) -> np.ndarray:
        return (np.asarray(obs, dtype=float) - self._lo) / self._span

    def set_guidance(self, explanation) -> None:
        if explanation is None:
            self.guidance = None
            return
        entries = getattr(explanation, "entries", explanation)
        self.guidance = Guidance(entries, self.tau, self.config.guidance_threshold,
                                 None if self.discrete else self.action_dim)

    def _guide_pack(self) -> tuple:
        if self.guidance is not None:
            return self.guidance.packed
        return _empty_guidance(None if self.discrete else self.action_dim)

    def _som_pack(self) -> tuple:
        som = self.som
        hyper = np.array([som.alpha_max, som.sigma_max, som.sigma_min, som.tau, som.value_lr, som.td_norm])
        return (som.weights, som.values, som.frozen, som.lattice, hyper)

    @property
    def tau(self) -> float:
        return self.som.tau if self.som is not None else self.config.tau

    def _guide(self, x):
        if self.guidance is None:
            return None
        return self.guidance.lookup(x)

    def state_hash(self) -> str:
        h = hashlib.sha256()
        for arr in self._state_arrays():
            h.update(np.ascontiguousarray(arr).tobytes())
        h.update(str(self.skipped_transitions).encode())
        return h.hexdigest()

    def _state_arrays(self):
        raise NotImplementedError

    # test trial ---------------------------------------------------------
    def test_steps(self, env, rng: np.random.Generator, stochastic: bool = False) -> Iterator[TraceStep]:
        """Yield one record per step of a learning-free episode."""
        s = env.reset(rng)
        for t in range(env.max_steps):
            a = self.act(s, 0, rng, greedy=not stochastic)
            x = self.normalize(s)
            unit = memory = value = b = None
            if self.som is not None:
                unit, d = bmu(self.som, x)
                b = beta(d, self.som.tau)
                memory = self.som.weights[unit].copy()
                slot = a if self.discrete else 0
                value = float(self.som.values[unit, slot])
            res = env.step(a)
            yield TraceStep(t, np.asarray(s, dtype=float).copy(), a, res.reward, unit, memory, value, b)
            s = res.next_obs
            if res.done or res.truncated:
                return


class DiscreteCTDL(Agent):
    discrete = True

    def __init__(self, config: AgentConfig, env_spec, n_actions: int, rng: np.random.Generator,
                 obs_dim: int = 2):
        super().__init__(config, env_spec)
        self.n_actions = n_actions
        self.q_net = approx.net_init([obs_dim, *config.hidden, n_actions], rng, config.activation)
        self.opt = approx.optimizer_for(self.q_net, config.optimizer, config.lr)
        self.som = som_init(config.som_width, config.som_height, obs_dim, n_actions, rng,
                            **config.som_hyperparameters())

    def _state_arrays(self):
        return [self.q_net.params, self.opt.m, self.opt.v, np.array([self.opt.t]),
                self.som.weights, self.som.values, self.som.frozen]

    def combined_estimate(self, s) -> CombinedEstimate:
        return self._combined(self.normalize(s))

    def _combined(self, x) -> CombinedEstimate:
        q_dnn = net_forward(self.q_net, x)
        j, d = bmu(self.som, x)
        b = beta(d, self.som.tau)
        return CombinedEstimate(b, b * self.som.values[j] + (1.0 - b) * q_dnn, j, d)

    def act(self, s, episode: int, rng: np.random.Generator, greedy: bool = False) -> int:
        x = self.normalize(s)
        return int(_steps.dq_act(approx.pack_net(self.q_net), self._som_pack(), self._guide_pack(), x,
                                 self.config.epsilon(episode), greedy, rng))

    def bootstrap(self, x2) -> float:
        hit = self._guide(x2)
        if hit is not None:
            return hit[0]
        return float(np.max(self._combined(x2).per_action))

    def learn(self, s, a: int, r: float, s2, done: bool) -> None:
        opt = approx.pack_opt(self.q_net, self.opt)
        self.skipped_transitions += _steps.dq_learn(
            approx.pack_net(self.q_net), opt, self._som_pack(), self._guide_pack(), self.config.gamma,
            self.normalize(s), int(a), float(r), self.normalize(s2), bool(done))
        approx.unpack_opt(self.opt, opt)

    def fused_episode(self, env, episode: int, rng: np.random.Generator) -> tuple[float, int]:
        spec = env.spec
        env.reset(rng)
        penalty = np.zeros((spec.width, spec.height), dtype=np.bool_)
        for x, y in spec.penalty_cells:
            penalty[x, y] = True
        moves = np.array([envs.MOVES[k] for k in range(4)], dtype=np.int64)
        rewards = np.array([spec.step_reward, spec.goal_reward, spec.penalty_reward])
        opt = approx.pack_opt(self.q_net, self.opt)
        total, steps, skipped = _steps.grid_episode(
            approx.pack_net(self.q_net), opt, self._som_pack(), self._guide_pack(), self.config.gamma,
            self.config.epsilon(episode), rng, np.array(spec.start, dtype=np.int64),
            np.array(spec.goal, dtype=np.int64), penalty, moves, rewards, spec.max_steps, self._lo, self._span)
        approx.unpack_opt(self.opt, opt)
        self.skipped_transitions += skipped
        return float(total), int(steps)


class ContinuousAgent(Agent):
    """Gaussian actor + state-value critic; CTDL when ``use_som`` else A2C."""

    discrete = False

    def __init__(self, config: AgentConfig, env_spec, action_dim: int, rng: np.random.Generator,
                 obs_dim: int = 2):
        super().__init__(config, env_spec)
        self.action_dim = action_dim
        self.critic = approx.net_init([obs_dim, *config.hidden, 1], rng, config.activation)
        self.actor = approx.net_init([obs_dim, *config.hidden, 2 * action_dim], rng, config.activation)
        self.actor.biases(self.actor.n_layers - 1)[action_dim:] = config.init_log_std
        self.critic_opt = approx.optimizer_for(self.critic, config.optimizer, config.lr)
        self.actor_opt = approx.optimizer_for(self.actor, config.actor_optimizer or config.optimizer, config.actor_lr)
        if config.variant == "ctdl-continuous":
            self.som = som_init(config.som_width, config.som_height, obs_dim, 1, rng,
                                **config.som_hyperparameters())
        else:
            self.som = None
        self._no_som = (np.zeros((1, obs_dim)), np.zeros((1, 1)), np.zeros(1, dtype=np.bool_), np.zeros((1, 2)),
                        np.ones(6))
        self._sample = None  # (unclipped draw, action returned) of the last act()

    def _state_arrays(self):
        arrays = [self.critic.params, self.actor.params, self.critic_opt.m, self.critic_opt.v,
                  self.actor_opt.m, self.actor_opt.v, np.array([self.critic_opt.t, self.actor_opt.t])]
        if self.som is not None:
            arrays += [self.som.weights, self.som.values, self.som.frozen]
        return arrays

    def combined_estimate(self, s) -> CombinedEstimate:
        return self._combined(self.normalize(s))

    def _combined(self, x) -> CombinedEstimate:
        v_dnn = net_forward(self.critic, x)
        if self.som is None:
            return CombinedEstimate(0.0, v_dnn, -1, math.inf)
        j, d = bmu(self.som, x)
        b = beta(d, self.som.tau)
        return CombinedEstimate(b, b * self.som.values[j] + (1.0 - b) * v_dnn, j, d)

    def _som_pack(self) -> tuple:
        if self.som is None:
            return self._no_som
        return super()._som_pack()

    def _action_out(self, a: np.ndarray):
        return float(a[0]) if self.action_dim == 1 else a

    def act(self, s, episode: int, rng: np.random.Generator, greedy: bool = False):
        a, raw, guided = _steps.ca_act(approx.pack_net(self.actor), self._guide_pack(), self.normalize(s), greedy, rng)
        out = self._action_out(a)
        if not (guided or greedy):
            self._sample = (raw, out)
        return out

    def bootstrap(self, x2) -> float:
        hit = self._guide(x2)
        if hit is not None:
            return hit[0]
        return float(self._combined(x2).per_action[0])

    def learn(self, s, a, r: float, s2, done: bool) -> None:
        # the score function belongs to the draw, not to the clipped action sent to the env
        sample = self._sample
        if sample is not None and np.array_equal(sample[1], a):
            a_raw = sample[0]
        else:
            a_raw = np.asarray(a, dtype=float).reshape(-1)
        self._sample = None
        copt = approx.pack_opt(self.critic, self.critic_opt)
        aopt = approx.pack_opt(self.actor, self.actor_opt)
        self.skipped_transitions += _steps.ca_learn(
            approx.pack_net(self.critic), copt, approx.pack_net(self.actor), aopt, self._som_pack(),
            self.som is not None, self._guide_pack(), self.config.gamma, self.normalize(s), a_raw, float(r),
            self.normalize(s2), bool(done))
        approx.unpack_opt(self.critic_opt, copt)
        approx.unpack_opt(self.actor_opt, aopt)

    def fused_episode(self, env, episode: int, rng: np.random.Generator) -> tuple[float, int]:
        spec = env.spec
        s0 = env.reset(rng)
        params = np.array([spec.power, spec.gravity_coeff, spec.max_speed, spec.min_position, spec.max_position,
                           spec.goal_position, spec.goal_reward, spec.action_cost])
        copt = approx.pack_opt(self.critic, self.critic_opt)
        aopt = approx.pack_opt(self.actor, self.actor_opt)
        total, steps, skipped = _steps.mc_episode(
            approx.pack_net(self.critic), copt, approx.pack_net(self.actor), aopt, self._som_pack(),
            self.som is not None, self._guide_pack(), self.config.gamma, rng, s0, params, spec.max_steps,
            self._lo, self._span)
        approx.unpack_opt(self.critic_opt, copt)
        approx.unpack_opt(self.actor_opt, aopt)
        self.skipped_transitions += skipped
        self._sample = None
        return float(total), int(steps)


def make_agent(config: AgentConfig, env_spec, rng: np.random.Generator) -> Agent:
    discrete = isinstance(env_spec, envs.GridWorldSpec)
    if config.variant == "ctdl-discrete":
        if not discrete:
            raise ConfigurationError("ctdl-discrete needs a discrete-action environment")
        return DiscreteCTDL(config, env_spec, 4, rng)
    if discrete:
        raise ConfigurationError(f"{config.variant} needs a continuous-action environment")
    return ContinuousAgent(config, env_spec, 1, rng)


def run_test_trial(agent: Agent, env, rng: np.random.Generator, stochastic: bool = False) -> EpisodeTrace:
    """Learning-free episode; greedy (or policy-mean) unless ``stochastic``."""
    trace = EpisodeTrace()
    for step in agent.test_steps(env, rng, stochastic):
        trace.steps.append(step)
        trace.total_reward += step.reward
    if trace.steps:
        trace.reached_goal = bool(env.state is not None and _at_goal(env))
    return trace


def _at_goal(env) -> bool:
    spec = env.spec
    if isinstance(spec, envs.GridWorldSpec):
        return tuple(int(v) for v in env.state) == spec.goal
    return env.state[0] >= spec.goal_position


def run_episode(agent: Agent, env, episode: int, rng: np.random.Generator, learn: bool = True,
                fused: bool = True) -> tuple[float, int]:
    """One training episode; returns (total reward, steps).

    Learning episodes run in a single compiled loop unless ``fused`` is False;
    both paths are bit-identical.
    """
    if learn and fused:
        return agent.fused_episode(env, episode, rng)
    s = env.reset(rng)
    total = 0.0
    for t in range(env.max_steps):
        a = agent.act(s, episode, rng)
        res = env.step(a)
        if learn:
            agent.learn(s, a, res.reward, res.next_obs, res.done)
        total += res.reward
        s = res.next_obs
        if res.done or res.truncated:
            return total, t + 1
    return total, env.max_steps


# checkpoints --------------------------------------------------------------

def agent_to_dict(agent: Agent) -> dict:
    d = {
        "version": CHECKPOINT_VERSION,
        "config": agent.config.to_dict(),
        "env": agent.env_spec.to_dict(),
        "skipped_transitions": agent.skipped_transitions,
    }
    if isinstance(agent, DiscreteCTDL):
        d["networks"] = {"q": agent.q_net.to_dict()}
        d["optimizers"] = {"q": agent.opt.to_dict()}
    else:
        d["networks"] = {"critic": agent.critic.to_dict(), "actor": agent.actor.to_dict()}
        d["optimizers"] = {"critic": agent.critic_opt.to_dict(), "actor": agent.actor_opt.to_dict()}
    d["som"] = agent.som.to_dict() if agent.som is not None else None
    return d


def agent_from_dict(d: dict) -> Agent:
    if d.get("version") != CHECKPOINT_VERSION:
        raise UnsupportedVersionError(f"unsupported agent checkpoint version {d.get('version')!r}", "version")
    try:
        config = AgentConfig.from_dict(d["config"])
        spec = envs.spec_from_dict(d["env"])
        agent = make_agent(config, spec, np.random.default_rng(0))
        nets, opts = d["networks"], d["optimizers"]
        if isinstance(agent, DiscreteCTDL):
            agent.q_net = approx.Network.from_dict(nets["q"])
            agent.opt = approx.OptimizerState.from_dict(opts["q"])
        else:
            agent.critic = approx.Network.from_dict(nets["critic"])
            agent.actor = approx.Network.from_dict(nets["actor"])
            agent.critic_opt = approx.OptimizerState.from_dict(opts["critic"])
            agent.actor_opt = approx.OptimizerState.from_dict(opts["actor"])
        agent.som = Som.from_dict(d["som"]) if d.get("som") is not None else None
        agent.skipped_transitions = int(d.get("skipped_transitions", 0))
    except KeyError as e:
        raise ExplanationFormatError(f"agent checkpoint missing field {e}") from None
    return agent


def save_agent(agent: Agent, path) -> None:
    with open(path, "w") as f:
        json.dump(agent_to_dict(agent), f)


def load_agent(path) -> Agent:
    with open(path) as f:
        try:
            d = json.load(f)
        except json.JSONDecodeError as e:
            raise ExplanationFormatError(e.msg, f"{e.lineno}:{e.colno}") from None
    return agent_from_dict(d)
