"""Population training, best-agent selection, and group comparisons.

Every random draw in a run comes from a generator keyed by
(master seed, stream, agent index, episode), so agent ``i`` sees the same
environment and initialisation randomness in every group and reruns are
bit-reproducible regardless of execution order.
"""
from __future__ import annotations

import csv
import json
import logging
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import env as envs
from .agent import Agent, make_agent, run_episode, run_test_trial, save_agent
from .config import ExperimentConfig, save_config
from .errors import ConfigurationError
from .explain import Explanation, load_explanation, prune, save_explanation, shuffle_baseline, trace_rows
from .som import som_seed

log = logging.getLogger(__name__)

TRAIN, TEST, INIT, PICK, SEED_SOM = range(5)


def derive_rng(master: int, stream: int, agent: int = 0, episode: int = 0) -> np.random.Generator:
    return np.random.default_rng([master, stream, agent, episode])


@dataclass
class RunRecord:
    agent_id: int
    seed: int
    rewards: list = field(default_factory=list)
    lengths: list = field(default_factory=list)
    checkpoints: dict = field(default_factory=dict)  # episode -> [Explanation]
    traces: dict = field(default_factory=dict)  # episode -> [[TraceRow]]
    test_rewards: dict = field(default_factory=dict)  # episode -> [float]
    final_test_reward: float = float("nan")
    explanation_used: Optional[int] = None
    failed: bool = False
    error: str = ""
    agent: Optional[Agent] = field(default=None, repr=False, compare=False)

    @property
    def total_training_reward(self) -> float:
        return float(np.sum(self.rewards))

    @property
    def final_episode_reward(self) -> float:
        return float(self.rewards[-1]) if self.rewards else float("nan")

    def summary(self) -> dict:
        return {
            "agent_id": self.agent_id,
            "seed": self.seed,
            "rewards": [float(r) for r in self.rewards],
            "lengths": [int(n) for n in self.lengths],
            "final_test_reward": self.final_test_reward,
            "total_training_reward": self.total_training_reward,
            "test_rewards": {str(k): v for k, v in self.test_rewards.items()},
            "checkpoint_sizes": {str(k): [len(e) for e in v] for k, v in self.checkpoints.items()},
            "explanation_used": self.explanation_used,
            "failed": self.failed,
            "error": self.error,
        }


def provision(agent: Agent, explanation: Optional[Explanation], rng: np.random.Generator) -> None:
    """Hand an explanation to a fresh agent.

    Every agent gets threshold guidance; agents with a SOM additionally get the
    entries transplanted into frozen units.
    """
    if explanation is None:
        return
    agent.set_guidance(explanation)
    if agent.som is not None and len(explanation):
        som_seed(agent.som, explanation, rng)


def checkpoint_explanations(agent: Agent, env, cfg: ExperimentConfig, agent_id: int, episode: int):
    """Learning-free test trials at a checkpoint: (explanations, traces, test rewards)."""
    explanations, traces, rewards = [], [], []
    for k in range(cfg.test_episodes):
        rng = derive_rng(cfg.seed, TEST, agent_id, episode * 1000 + k)
        trace = run_test_trial(agent, env, rng, stochastic=cfg.test_stochastic)
        prov = {"agent_id": agent_id, "episode": episode, "environment": cfg.env.kind, "test_episode": k,
                "test_reward": trace.total_reward}
        rows = trace_rows(trace)
        explanations.append(prune(rows, cfg.threshold, prov))
        traces.append(rows)
        rewards.append(trace.total_reward)
    return explanations, traces, rewards


def train_agent(cfg: ExperimentConfig, agent_id: int, explanations: Sequence[Explanation] = (),
                variant: Optional[str] = None, keep_agent: bool = False) -> RunRecord:
    record = RunRecord(agent_id, cfg.seed)
    try:
        agent_cfg = cfg.agent if variant is None else type(cfg.agent)(**{**cfg.agent.to_dict(), "variant": variant})
        env = envs.make_env(cfg.env)
        agent = make_agent(agent_cfg, cfg.env, derive_rng(cfg.seed, INIT, agent_id))
        if explanations:
            pick = int(derive_rng(cfg.seed, PICK, agent_id).integers(len(explanations)))
            record.explanation_used = pick
            provision(agent, explanations[pick], derive_rng(cfg.seed, SEED_SOM, agent_id))
        checkpoints = set(cfg.checkpoints)
        for episode in range(cfg.episodes):
            reward, length = run_episode(agent, env, episode, derive_rng(cfg.seed, TRAIN, agent_id, episode))
            record.rewards.append(reward)
            record.lengths.append(length)
            if episode + 1 in checkpoints and agent.som is not None:
                ex, tr, rw = checkpoint_explanations(agent, env, cfg, agent_id, episode + 1)
                record.checkpoints[episode + 1] = ex
                record.traces[episode + 1] = tr
                record.test_rewards[episode + 1] = rw
        if cfg.episodes in record.test_rewards:
            record.final_test_reward = float(np.mean(record.test_rewards[cfg.episodes]))
        else:
            trace = run_test_trial(agent, env, derive_rng(cfg.seed, TEST, agent_id, cfg.episodes * 1000),
                                   stochastic=cfg.test_stochastic)
            record.final_test_reward = trace.total_reward
        if keep_agent:
            record.agent = agent
    except Exception as e:  # one diverging agent must not abort its siblings
        log.warning("agent %d failed: %s", agent_id, e)
        record.failed = True
        record.error = f"{type(e).__name__}: {e}"
    return record


def _train_star(args):
    return train_agent(*args)


def train_population(cfg: ExperimentConfig, explanations: Sequence[Explanation] = (), variant: Optional[str] = None,
                     keep_agents: bool = False) -> list[RunRecord]:
    jobs = [(cfg, i, list(explanations), variant, keep_agents) for i in range(cfg.population)]
    if cfg.n_jobs > 1:
        with ProcessPoolExecutor(cfg.n_jobs) as pool:
            records = list(pool.map(_train_star, jobs))
    else:
        records = [train_agent(*job) for job in jobs]
    return sorted(records, key=lambda r: r.agent_id)


def select_best(records: Sequence[RunRecord], selection: str = "test_trial") -> int:
    """Best agent id: top score, then top total training reward, then lowest id."""
    pool = [r for r in records if not r.failed]
    if not pool:
        raise ConfigurationError("no (successful) records to select from")

    def score(r: RunRecord) -> float:
        return r.final_test_reward if selection == "test_trial" else r.final_episode_reward

    best = max(pool, key=lambda r: (score(r), r.total_training_reward, -r.agent_id))
    return best.agent_id


# comparisons ----------------------------------------------------------------

@dataclass
class GroupSpec:
    name: str
    explanations: list = field(default_factory=list)
    variant: Optional[str] = None

    @classmethod
    def from_files(cls, name: str, paths: Sequence, variant: Optional[str] = None) -> "GroupSpec":
        missing = [str(p) for p in paths if not Path(p).exists()]
        if missing:
            raise ConfigurationError(f"explanation file(s) not found: {', '.join(missing)}")
        return cls(name, [load_explanation(p) for p in paths], variant)


@dataclass
class GroupResult:
    name: str
    records: list
    mean_reward: np.ndarray
    std_reward: np.ndarray
    mean_length: np.ndarray
    best_agent: int
    best_agent_reward: np.ndarray

    @property
    def auc(self) -> float:
        return float(np.sum(self.mean_reward))

    def smoothed(self, window: int) -> np.ndarray:
        if window <= 1:
            return self.mean_reward.copy()
        kernel = np.ones(window) / window
        pad = np.concatenate([np.full(window - 1, self.mean_reward[0]), self.mean_reward])
        return np.convolve(pad, kernel, mode="valid")


@dataclass
class ComparisonReport:
    groups: dict
    config: ExperimentConfig
    summary: dict = field(default_factory=dict)


def group_result(name: str, records: Sequence[RunRecord], selection: str) -> GroupResult:
    ok = [r for r in records if not r.failed]
    if not ok:
        raise ConfigurationError(f"every run in group {name!r} failed")
    rewards = np.array([r.rewards for r in ok], dtype=float)
    lengths = np.array([r.lengths for r in ok], dtype=float)
    best = select_best(ok, selection)
    best_rec = next(r for r in ok if r.agent_id == best)
    return GroupResult(name, list(records), rewards.mean(0), rewards.std(0), lengths.mean(0), best,
                       np.array(best_rec.rewards, dtype=float))


def first_fast_episode(lengths: Sequence[int], optimal: int, factor: float = 2.0) -> int:
    """1-based index of the first episode shorter than factor*optimal steps (len+1 if never)."""
    for i, n in enumerate(lengths):
        if n < factor * optimal:
            return i + 1
    return len(lengths) + 1


def summarize(report: ComparisonReport) -> dict:
    cfg = report.config
    worst, best = envs.return_range(cfg.env)
    out = {"smoothing_window": cfg.smoothing_window, "groups": {}}
    optimal = envs.shortest_path_length(cfg.env) if isinstance(cfg.env, envs.GridWorldSpec) else None
    for name, g in report.groups.items():
        entry = {
            "auc": g.auc,
            "normalized_auc": float(np.mean((g.mean_reward - worst) / (best - worst))),
            "final_100_mean_reward": float(np.mean(g.mean_reward[-100:])),
            "first_50_mean_reward": float(np.mean(g.mean_reward[:50])),
            "best_agent": g.best_agent,
            "failed_runs": sum(r.failed for r in g.records),
        }
        if optimal is not None:
            firsts = [first_fast_episode(r.lengths, optimal) for r in g.records if not r.failed]
            entry["optimal_length"] = optimal
            entry["mean_episodes_to_fast_goal"] = float(np.mean(firsts))
        out["groups"][name] = entry
    return out


def run_group_comparison(cfg: ExperimentConfig, groups: Sequence[GroupSpec],
                         cached: Optional[dict] = None) -> ComparisonReport:
    """Train every group with seed-matched agents and aggregate their curves.

    ``cached`` maps group names to already-trained records (e.g. the source
    population doubling as the no-explanation group).
    """
    cached = cached or {}
    for g in groups:
        if g.name not in cached and g.name != "none" and not g.explanations and g.variant is None:
            raise ConfigurationError(f"group {g.name!r} has no explanations")
    results = {}
    for g in groups:
        if g.name in cached:
            records = cached[g.name]
        else:
            log.info("training group %s", g.name)
            records = train_population(cfg, g.explanations, g.variant)
        results[g.name] = group_result(g.name, records, cfg.selection)
    report = ComparisonReport(results, cfg)
    report.summary = summarize(report)
    return report


@dataclass
class SourceRun:
    """The no-explanation population and the explanations of its best agent."""

    records: list
    best: int
    explanations: dict  # checkpoint episode -> [Explanation]
    shuffled: dict  # checkpoint episode -> [Explanation]
    traces: dict


def explanations_from_source(records: Sequence[RunRecord], cfg: ExperimentConfig) -> SourceRun:
    best = select_best(records, cfg.selection)
    rec = next(r for r in records if r.agent_id == best)
    shuffled = {}
    for episode, traces in rec.traces.items():
        shuffled[episode] = []
        for k, (rows, expl) in enumerate(zip(traces, rec.checkpoints[episode])):
            rng = derive_rng(cfg.seed, SEED_SOM + 1, best, episode * 1000 + k)
            prov = dict(expl.provenance)
            shuffled[episode].append(shuffle_baseline(rows, len(expl), rng, prov))
    return SourceRun(list(records), best, rec.checkpoints, shuffled, rec.traces)


def run_protocol(cfg: ExperimentConfig, groups: Sequence[str] = ("none", "explanation", "shuffled"),
                 a2c: bool = False) -> tuple[SourceRun, ComparisonReport]:
    """Source population -> best agent's explanations -> seed-matched receiver groups.

    Groups: ``none``, ``explanation`` (final checkpoint), ``explanation-<ep>``
    (checkpoint ``ep``), ``shuffled``. With ``a2c`` the A2C baseline with and
    without the final explanation is added.
    """
    source_records = train_population(cfg)
    source = explanations_from_source(source_records, cfg)
    final = cfg.checkpoints[-1]
    specs = []
    for name in groups:
        if name == "none":
            specs.append(GroupSpec("none"))
        elif name == "explanation":
            specs.append(GroupSpec("explanation", source.explanations[final]))
        elif name == "shuffled":
            specs.append(GroupSpec("shuffled", source.shuffled[final]))
        elif name.startswith("explanation-"):
            ep = int(name.split("-", 1)[1])
            if ep not in source.explanations:
                raise ConfigurationError(f"no checkpoint at episode {ep}")
            specs.append(GroupSpec(name, source.explanations[ep]))
        else:
            raise ConfigurationError(f"unknown group {name!r}")
    if a2c:
        specs.append(GroupSpec("a2c", [], "a2c-baseline"))
        specs.append(GroupSpec("a2c-explanation", source.explanations[final], "a2c-baseline"))
    report = run_group_comparison(cfg, specs, cached={"none": source_records})
    return source, report


# persistence ------------------------------------------------------------------

def make_run_dir(root, cfg: ExperimentConfig) -> Path:
    stamp = time.strftime("%Y%m%d-%H%M%S")
    path = Path(root) / f"{cfg.digest()}-{stamp}"
    n = 1
    while path.exists():
        path = Path(root) / f"{cfg.digest()}-{stamp}-{n}"
        n += 1
    path.mkdir(parents=True)
    return path


def write_group_csv(group: GroupResult, path, window: int) -> None:
    smooth = group.smoothed(window)
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["episode", "mean_reward", "std_reward", "mean_length", "best_agent_reward", "smoothed_mean_reward"])
        for i in range(len(group.mean_reward)):
            w.writerow([i + 1, repr(float(group.mean_reward[i])), repr(float(group.std_reward[i])),
                        repr(float(group.mean_length[i])), repr(float(group.best_agent_reward[i])),
                        repr(float(smooth[i]))])


def write_report(report: ComparisonReport, run_dir) -> None:
    run_dir = Path(run_dir)
    for name, g in report.groups.items():
        write_group_csv(g, run_dir / f"group_{name}.csv", report.config.smoothing_window)
    (run_dir / "summary.json").write_text(json.dumps(report.summary, indent=2))


def write_records(records: Sequence[RunRecord], cfg: ExperimentConfig, run_dir, save_agents: bool = False) -> None:
    run_dir = Path(run_dir)
    (run_dir / "records.json").write_text(json.dumps([r.summary() for r in records]))
    expl_dir = run_dir / "explanations"
    expl_dir.mkdir(exist_ok=True)
    for r in records:
        for episode, expls in r.checkpoints.items():
            for k, e in enumerate(expls):
                save_explanation(e, expl_dir / f"agent{r.agent_id:03d}_ep{episode:05d}_test{k:02d}.json", cfg.env)
        if save_agents and r.agent is not None:
            (run_dir / "agents").mkdir(exist_ok=True)
            save_agent(r.agent, run_dir / "agents" / f"agent{r.agent_id:03d}.json")


def write_source(source: SourceRun, cfg: ExperimentConfig, run_dir) -> None:
    run_dir = Path(run_dir)
    best_dir = run_dir / "best"
    best_dir.mkdir(exist_ok=True)
    for episode, expls in source.explanations.items():
        for k, e in enumerate(expls):
            save_explanation(e, best_dir / f"explanation_ep{episode:05d}_test{k:02d}.json", cfg.env)
    for episode, expls in source.shuffled.items():
        for k, e in enumerate(expls):
            save_explanation(e, best_dir / f"shuffled_ep{episode:05d}_test{k:02d}.json", cfg.env)
    (best_dir / "best_agent.json").write_text(json.dumps({"agent_id": source.best}))
    save_config(cfg, run_dir / "config.json")
