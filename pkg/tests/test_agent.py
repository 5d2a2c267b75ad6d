import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ctdl import approx, env as envs
from ctdl.agent import (AgentConfig, ContinuousAgent, DiscreteCTDL, guidance_lookup, load_agent, make_agent,
                        run_episode, run_test_trial, save_agent)
from ctdl.errors import ConfigurationError
from ctdl.explain import Explanation, ExplanationEntry
from ctdl.som import Som

GRID = envs.GridWorldSpec(5, 5, (0, 0), (4, 4), {(2, 2)})
MC = envs.MountainCarSpec()


def entry(mem, value, action, beta=0.9, t=0):
    return ExplanationEntry(tuple(float(v) for v in mem), value, action, beta, t)


def discrete(**kw):
    cfg = AgentConfig(**{"hidden": (8,), "tau": 0.001, **kw})
    return DiscreteCTDL(cfg, GRID, 4, np.random.default_rng(0))


def one_unit_som(agent, state_norm, values, tau):
    n = len(values)
    agent.som = Som(1, 1, np.array([state_norm], dtype=float), np.array([values], dtype=float), tau=tau)


def zero_linear(agent, sgd_lr=1.0):
    """Replace the Q network by an all-zero linear layer trained with plain sgd."""
    n_out = agent.q_net.sizes[-1] if hasattr(agent, "q_net") else 1
    agent.q_net = approx.Network((2, n_out), np.zeros(2 * n_out + n_out))
    agent.opt = approx.optimizer_for(agent.q_net, "sgd", sgd_lr)


# combined estimate --------------------------------------------------------------

def test_combined_full_episodic_reliance():
    a = discrete()
    x = a.normalize([1, 3])
    one_unit_som(a, x, [0.3, -0.2, 0.7, 0.1], 0.01)
    est = a.combined_estimate([1, 3])
    assert est.beta == 1.0 and est.per_action.tolist() == [0.3, -0.2, 0.7, 0.1]


def test_combined_full_semantic_reliance():
    a = discrete(tau=1e-6)
    one_unit_som(a, [0.9, 0.9], [5.0, 5.0, 5.0, 5.0], 1e-6)
    est = a.combined_estimate([0, 0])
    q = approx.net_forward(a.q_net, a.normalize([0, 0]))
    assert np.all(np.abs(est.per_action - q) <= est.beta * 5.0 + 1e-15)


def test_combined_half_blend():
    a = discrete()
    tau = 0.1
    d = math.sqrt(tau * math.log(2))
    x = a.normalize([0, 0])
    one_unit_som(a, x + np.array([d, 0.0]), [1.0, 0.0, 1.0, 0.0], tau)
    zero_linear(a)
    a.q_net.biases(0)[...] = [0.0, 1.0, 0.0, 1.0]
    est = a.combined_estimate([0, 0])
    assert est.beta == pytest.approx(0.5)
    assert est.per_action == pytest.approx([0.5, 0.5, 0.5, 0.5])


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**31), st.integers(0, 4), st.integers(0, 4))
def test_blend_bounds(seed, x, y):
    rng = np.random.default_rng(seed)
    a = DiscreteCTDL(AgentConfig(hidden=(6,), tau=float(rng.uniform(0.001, 1))), GRID, 4, rng)
    a.som.values[:] = rng.normal(size=a.som.values.shape)
    est = a.combined_estimate([x, y])
    q = approx.net_forward(a.q_net, a.normalize([x, y]))
    v = a.som.values[est.bmu_index]
    lo, hi = np.minimum(q, v), np.maximum(q, v)
    assert np.all(est.per_action >= lo - 1e-12) and np.all(est.per_action <= hi + 1e-12)


# acting -----------------------------------------------------------------------

def test_guidance_overrides_exploration():
    a = discrete()
    a.set_guidance(Explanation([entry(a.normalize([2, 1]), 0.4, envs.LEFT)]))
    rng = np.random.default_rng(0)
    assert all(a.act([2, 1], 0, rng) == envs.LEFT for _ in range(200))


def test_epsilon_one_is_uniform():
    a = discrete()
    rng = np.random.default_rng(1)
    counts = np.bincount([a.act([1, 1], 0, rng) for _ in range(10_000)], minlength=4)
    chi2 = float(np.sum((counts - 2500.0) ** 2 / 2500.0))
    assert chi2 < 16.27  # chi-square, 3 dof, p = 0.001


def test_greedy_picks_argmax_of_blend():
    a = discrete(epsilon_start=0.0, epsilon_end=0.0)
    one_unit_som(a, a.normalize([3, 3]), [0.1, 0.9, 0.2, 0.0], 0.01)
    assert a.act([3, 3], 500, np.random.default_rng(0)) == 1


def test_epsilon_schedule():
    cfg = AgentConfig()
    assert cfg.epsilon(0) == 1.0 and cfg.epsilon(100) == pytest.approx(0.55)
    assert cfg.epsilon(200) == pytest.approx(0.1) and cfg.epsilon(900) == pytest.approx(0.1)


def test_guidance_lookup_examples():
    s = np.array([0.5, 0.5])
    tau = 0.1
    d_for = lambda b: math.sqrt(-tau * math.log(b))
    far = [entry(s + [0.9, 0.0], 1.0, 0)]
    assert guidance_lookup(far, s, tau, 0.5) is None
    two = [entry(s + [d_for(0.8), 0], 0.2, 1, t=0), entry(s - [d_for(0.6), 0], 0.7, 2, t=1)]
    assert guidance_lookup(two, s, tau, 0.5) == (0.7, 2)
    exact = [entry(s + [0.3, 0.0], 9.0, 0, t=0), entry(s, 0.1, 3, t=1)]
    assert guidance_lookup(exact, s, 1e-3, 0.5) == (0.1, 3)


def test_guidance_tie_goes_to_earliest():
    s = np.array([0.2, 0.2])
    ents = [entry(s + [0.01, 0], 0.5, 1, t=0), entry(s - [0.01, 0], 0.5, 2, t=4)]
    assert guidance_lookup(ents, s, 0.1, 0.5) == (0.5, 1)


def test_override_precedence_fuzz():
    rng = np.random.default_rng(5)
    fired = 0
    for trial in range(20):
        a = discrete(tau=0.02)
        cells = [tuple(rng.integers(0, 5, size=2)) for _ in range(4)]
        expl = Explanation([entry(a.normalize(c), float(rng.normal()), int(rng.integers(4)), t=k)
                            for k, c in enumerate(cells)])
        a.set_guidance(expl)
        for _ in range(50):
            s = rng.integers(0, 5, size=2)
            hit = guidance_lookup(expl, a.normalize(s), a.tau, 0.5)
            act = a.act(s, 0, rng)
            if hit is not None:
                fired += 1
                assert act == hit[1]
    assert fired > 0


# discrete learning ----------------------------------------------------------------

def test_terminal_td_error():
    a = discrete()
    zero_linear(a)
    a.learn([3, 4], envs.RIGHT, 1.0, [4, 4], True)
    # sgd lr 1 on a zero linear layer: the output bias moves by exactly delta
    assert a.q_net.biases(0)[envs.RIGHT] == pytest.approx(1.0)


def test_bootstrap_td_error():
    a = discrete()
    zero_linear(a)
    a.q_net.biases(0)[...] = 0.5
    s, s2 = [1, 1], [1, 2]
    one_unit_som(a, a.normalize(s2), [1.0, 1.0, 1.0, 1.0], 1e-3)
    a.learn(s, envs.UP, -0.05, s2, False)
    assert a.q_net.biases(0)[envs.UP] - 0.5 == pytest.approx(-0.05 + 0.99 * 1.0 - 0.5)
    assert a.q_net.biases(0)[envs.UP] - 0.5 == pytest.approx(0.44)


def test_guidance_value_replaces_bootstrap():
    a = discrete()
    zero_linear(a)
    s2 = [2, 3]
    a.set_guidance([entry(a.normalize(s2), 3.0, 0)])
    a.learn([1, 3], envs.RIGHT, 0.0, s2, False)
    assert a.q_net.biases(0)[envs.RIGHT] == pytest.approx(0.99 * 3.0)


def test_converged_fixed_point_changes_nothing():
    a = discrete()
    zero_linear(a)
    s, s2 = [0, 0], [0, 1]
    x2 = a.normalize(s2)
    one_unit_som(a, x2, [0.0, 0.0, 0.0, 0.0], 1e-3)
    before = a.state_hash()
    a.learn(s, envs.UP, 0.0, s2, False)
    assert a.state_hash() == before


def test_learning_order_uses_pre_update_predictions():
    a = discrete()
    zero_linear(a)
    x = a.normalize([0, 0])
    one_unit_som(a, x, [0.2, 0.0, 0.0, 0.0], 1e-3)
    a.som.value_lr = 0.5
    a.learn([0, 0], envs.UP, 1.0, [0, 1], True)
    # dnn delta = 1 - 0, som delta = 1 - 0.2, both from values before this transition
    assert a.q_net.biases(0)[envs.UP] == pytest.approx(1.0)
    assert a.som.values[0, envs.UP] == pytest.approx(0.2 + 0.5 * 0.8)


def test_nonfinite_transition_skipped():
    a = discrete()
    before = a.state_hash()
    a.learn([0, 0], 0, float("nan"), [0, 1], False)
    assert a.skipped_transitions == 1
    a.skipped_transitions = 0
    assert a.state_hash() == before


# continuous learning ----------------------------------------------------------------

def continuous(variant="ctdl-continuous", **kw):
    cfg = AgentConfig(**{"variant": variant, "hidden": (8,), "tau": 0.05, **kw})
    return ContinuousAgent(cfg, MC, 1, np.random.default_rng(0))


def zero_critic(a):
    a.critic = approx.Network((2, 1), np.zeros(3))
    a.critic_opt = approx.optimizer_for(a.critic, "sgd", 1.0)


def test_continuous_terminal_critic_delta():
    a = continuous("a2c-baseline")
    zero_critic(a)
    a.learn([0.4, 0.05], 0.5, 100.0, [0.46, 0.06], True)
    assert a.critic.biases(0)[0] == pytest.approx(100.0)


def test_continuous_som_bootstrap_exact():
    a = continuous()
    zero_critic(a)
    s2 = [0.1, 0.02]
    a.som = Som(1, 1, np.array([a.normalize(s2)]), np.array([[7.0]]), tau=0.05)
    s = [0.0, 0.01]
    x = a.normalize(s)
    b = math.exp(-float(np.sum((x - a.normalize(s2)) ** 2)) / 0.05)
    a.learn(s, 0.2, -0.004, s2, False)
    target = -0.004 + 0.99 * 7.0
    # critic delta is target - V_dnn(s) = target (zero critic), regardless of beta at s
    assert a.critic.biases(0)[0] == pytest.approx(target)
    assert a.som.values[0, 0] == pytest.approx(7.0 + 0.2 * (target - 7.0))
    assert 0 < b < 1


def test_zero_advantage_leaves_actor():
    a = continuous("a2c-baseline")
    zero_critic(a)
    before = a.actor.params.copy()
    a.learn([0.0, 0.0], 0.3, 0.0, [0.0, 0.0], True)
    assert np.array_equal(before, a.actor.params)


def test_overridden_action_skips_actor_step():
    a = continuous("a2c-baseline")
    s = [-0.5, 0.0]
    a.set_guidance([entry(a.normalize(s), 10.0, 0.8)])
    rng = np.random.default_rng(0)
    act = a.act(s, 0, rng)
    assert act == 0.8
    actor_before, critic_before = a.actor.params.copy(), a.critic.params.copy()
    a.learn(s, act, -0.064, [-0.499, 0.001], False)
    assert np.array_equal(actor_before, a.actor.params)
    assert not np.array_equal(critic_before, a.critic.params)


def test_continuous_actions_clamped():
    a = continuous(init_log_std=1.0)
    rng = np.random.default_rng(0)
    acts = [a.act([-0.5, 0.0], 0, rng) for _ in range(500)]
    assert all(-1.0 <= v <= 1.0 for v in acts) and isinstance(acts[0], float)


# test trials, equivalences ----------------------------------------------------------

def test_test_trial_is_learning_free():
    a = discrete()
    env = envs.GridWorld(GRID)
    run_episode(a, env, 0, np.random.default_rng(0))
    before = a.state_hash()
    trace = run_test_trial(a, env, np.random.default_rng(1))
    assert a.state_hash() == before
    assert len(trace) <= GRID.max_steps


def test_test_trial_on_solved_toy_grid():
    spec = envs.GridWorldSpec(3, 3, (0, 0), (2, 2))
    a = DiscreteCTDL(AgentConfig(hidden=(4,), som_width=3, som_height=3, tau=1e-4), spec, 4,
                     np.random.default_rng(0))
    for j in range(9):
        x, y = j % 3, j // 3
        a.som.weights[j] = a.normalize([x, y])
        # optimal values: moving towards the goal is worth more
        a.som.values[j] = [-(2 - x) - (2 - y - 1 if y < 2 else 3), -10, -10, -(2 - x - 1 if x < 2 else 3) - (2 - y)]
    trace = run_test_trial(a, envs.GridWorld(spec), np.random.default_rng(0))
    assert len(trace) == 4 and trace.reached_goal


def test_empty_guidance_equals_no_guidance():
    env = envs.GridWorld(GRID)
    a, b = discrete(), discrete()
    b.set_guidance(Explanation([]))
    for ep in range(5):
        run_episode(a, env, ep, np.random.default_rng(ep))
        run_episode(b, env, ep, np.random.default_rng(ep))
    assert a.state_hash() == b.state_hash()


def reference_q_learning(spec, cfg, seed, episodes):
    """Plain online Q-learning on the network alone (no memory), mirroring the seeding."""
    rng = np.random.default_rng(seed)
    net = approx.net_init([2, *cfg.hidden, 4], rng, cfg.activation)
    opt = approx.optimizer_for(net, cfg.optimizer, cfg.lr)
    lo, span = np.zeros(2), np.array([spec.width - 1, spec.height - 1], dtype=float)
    env = envs.GridWorld(spec)
    history = []
    for ep in range(episodes):
        erng = np.random.default_rng([seed, ep])
        s = env.reset(erng)
        eps = cfg.epsilon(ep)
        for _ in range(spec.max_steps):
            x = (np.asarray(s, dtype=float) - lo) / span
            if erng.random() < eps:
                a = int(erng.integers(4))
            else:
                a = int(np.argmax(approx.net_forward(net, x)))
            res = env.step(a)
            x2 = (np.asarray(res.next_obs, dtype=float) - lo) / span
            target = res.reward if res.done else res.reward + cfg.gamma * float(np.max(approx.net_forward(net, x2)))
            delta = target - approx.net_forward(net, x)[a]
            approx.net_td_step(net, opt, x, a, delta)
            s = res.next_obs
            if res.done or res.truncated:
                break
        history.append(net.params.copy())
    return history


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_q_learning_reduction(seed):
    spec = envs.GridWorldSpec(5, 5, (0, 0), (4, 4), {(1, 2), (3, 2)}, max_steps=60)
    cfg = AgentConfig(hidden=(16, 16), tau=1e-300, epsilon_anneal_episodes=10)
    ref = reference_q_learning(spec, cfg, seed, 15)
    agent = make_agent(cfg, spec, np.random.default_rng(seed))
    env = envs.GridWorld(spec)
    for ep in range(15):
        run_episode(agent, env, ep, np.random.default_rng([seed, ep]))
        assert np.array_equal(agent.q_net.params, ref[ep])


@pytest.mark.slow
def test_learning_sanity_4x4():
    spec = envs.GridWorldSpec(4, 4, (0, 0), (3, 3))
    ok = 0
    for seed in range(10):
        agent = make_agent(AgentConfig(), spec, np.random.default_rng(seed))
        env = envs.GridWorld(spec)
        for ep in range(300):
            run_episode(agent, env, ep, np.random.default_rng([seed, ep]))
        trace = run_test_trial(agent, env, np.random.default_rng(0))
        ok += trace.reached_goal and len(trace) <= 2 * (4 + 4)
    assert ok >= 9


# config and checkpoints ----------------------------------------------------------------

@pytest.mark.parametrize("kw", [dict(gamma=0.0), dict(gamma=1.5), dict(epsilon_end=0.5, epsilon_start=0.2),
                                dict(guidance_threshold=1.0), dict(variant="dqn")])
def test_config_validation(kw):
    with pytest.raises(ConfigurationError):
        AgentConfig(**kw)


def test_variant_environment_mismatch():
    with pytest.raises(ConfigurationError):
        make_agent(AgentConfig(variant="ctdl-discrete"), MC, np.random.default_rng(0))
    with pytest.raises(ConfigurationError):
        make_agent(AgentConfig(variant="a2c-baseline"), GRID, np.random.default_rng(0))


@pytest.mark.parametrize("variant,spec", [("ctdl-discrete", GRID), ("ctdl-continuous", MC), ("a2c-baseline", MC)])
def test_agent_checkpoint_roundtrip(tmp_path, variant, spec):
    a = make_agent(AgentConfig(variant=variant, hidden=(8,)), spec, np.random.default_rng(0))
    env = envs.make_env(spec)
    run_episode(a, env, 0, np.random.default_rng(0))
    save_agent(a, tmp_path / "a.json")
    b = load_agent(tmp_path / "a.json")
    assert b.state_hash() == a.state_hash()
    t1 = run_test_trial(a, env, np.random.default_rng(3))
    t2 = run_test_trial(b, env, np.random.default_rng(3))
    assert [s.action for s in t1.steps] == [s.action for s in t2.steps]


# compiled episode loop -----------------------------------------------------------

def _guided_explanation(agent, states, actions):
    return Explanation([entry(agent.normalize(s), 0.5 + 0.1 * k, a, t=k) for k, (s, a) in enumerate(zip(states, actions))])


@pytest.mark.parametrize("variant,spec,optimizer", [
    ("ctdl-discrete", GRID, "adam"), ("ctdl-discrete", GRID, "sgd"),
    ("ctdl-continuous", envs.MountainCarSpec(max_steps=300), "adam"),
    ("a2c-baseline", envs.MountainCarSpec(max_steps=300), "sgd"),
])
@pytest.mark.parametrize("guided", [False, True])
def test_fused_episode_matches_stepwise(variant, spec, optimizer, guided):
    cfg = AgentConfig(variant=variant, hidden=(8, 8), optimizer=optimizer, tau=0.05, epsilon_anneal_episodes=3)
    agents = [make_agent(cfg, spec, np.random.default_rng(4)) for _ in range(2)]
    if guided:
        discrete = variant == "ctdl-discrete"
        states = [(1, 0), (3, 3)] if discrete else [(-0.5, 0.0), (-0.9, -0.02)]
        actions = [envs.UP, envs.RIGHT] if discrete else [0.7, -1.0]
        for a in agents:
            a.set_guidance(_guided_explanation(a, states, actions))
    env = envs.make_env(spec)
    for ep in range(6):
        r1 = run_episode(agents[0], env, ep, np.random.default_rng([9, ep]), fused=True)
        r2 = run_episode(agents[1], env, ep, np.random.default_rng([9, ep]), fused=False)
        assert r1 == r2
        assert agents[0].state_hash() == agents[1].state_hash()
