"""Compiled per-transition agent logic and fused training episodes.

The Python agents call the ``*_act`` / ``*_learn`` kernels one transition at a
time; the ``*_episode`` loops run the very same kernels for a whole training
episode without returning to the interpreter. Both consume the numpy Generator
identically, so a fused episode is bit-identical to the stepwise one.

Packed arguments:
  net   (params, sizes, activation code)
  opt   (algorithm 0 sgd / 1 adam, lr, m, v, t as int64[1], beta1, beta2, eps)
  som   (weights, values, frozen, lattice, hyper) with
        hyper = [alpha_max, sigma_max, sigma_min, tau, value_lr, td_norm]
  guide (memories, values, actions, threshold, tau), zero rows when absent
"""
import math

import numpy as np
from numba import njit

from ._kernels import adam_update, bmu, forward, sgd_update, som_pull, vjp

LOG_STD_MIN, LOG_STD_MAX = -4.0, 1.0
OK, SKIPPED = 0, 1


@njit(cache=True, error_model="numpy")
def apply_update(net, opt, grad):
    """Optimizer step; False (and no change) when the gradient is not finite."""
    for k in range(grad.shape[0]):
        if not math.isfinite(grad[k]):
            return False
    algo, lr, m, v, t, b1, b2, eps = opt
    if algo == 0:
        sgd_update(net[0], grad, lr)
    else:
        t[0] += 1
        adam_update(net[0], grad, m, v, t[0], lr, b1, b2, eps)
    return True


@njit(cache=True, error_model="numpy")
def policy_grad(net, x, a, advantage, grad):
    """Gradient of -advantage * log N(a | mean, std) into ``grad``."""
    out = forward(net[0], net[1], net[2], x)
    k = out.shape[0] // 2
    dout = np.empty_like(out)
    for i in range(k):
        raw = out[k + i]
        log_std = min(max(raw, LOG_STD_MIN), LOG_STD_MAX)
        std = math.exp(log_std)
        z = (a[i] - out[i]) / std
        dout[i] = -advantage * z / std
        if LOG_STD_MIN < raw < LOG_STD_MAX:
            dout[k + i] = -advantage * (z * z - 1.0)
        else:
            dout[k + i] = 0.0
    vjp(net[0], net[1], net[2], x, dout, grad)


@njit(cache=True, error_model="numpy")
def guide_index(guide, x):
    """Row of the highest-valued entry with beta above threshold (earliest on ties), else -1."""
    mem, vals, _, thr, tau = guide
    best = -1
    for k in range(mem.shape[0]):
        d2 = 0.0
        for i in range(x.shape[0]):
            diff = mem[k, i] - x[i]
            d2 += diff * diff
        if math.exp(-d2 / tau) > thr and (best < 0 or vals[k] > vals[best]):
            best = k
    return best


@njit(cache=True, error_model="numpy")
def som_lookup(som, x):
    j, d = bmu(som[0], x)
    return j, math.exp(-d * d / som[4][3])


@njit(cache=True, error_model="numpy")
def som_step(som, x, td_dnn):
    weights, _, frozen, lattice, hyper = som
    rho = min(1.0, abs(td_dnn) / hyper[5])
    if rho == 0.0:
        return
    b, _ = bmu(weights, x)
    sigma = max(hyper[2], hyper[1] * rho)
    som_pull(weights, frozen, lattice, x, b, hyper[0] * rho, sigma)


@njit(cache=True, error_model="numpy")
def som_value_step(som, j, slot, td_som):
    if not som[2][j]:
        som[1][j, slot] += som[4][4] * td_som


@njit(cache=True, error_model="numpy")
def normalize(s, lo, span):
    x = np.empty(s.shape[0])
    for i in range(s.shape[0]):
        x[i] = (s[i] - lo[i]) / span[i]
    return x


# discrete CTDL ------------------------------------------------------------

@njit(cache=True, error_model="numpy")
def dq_combined(q, som, x):
    qd = forward(q[0], q[1], q[2], x)
    j, b = som_lookup(som, x)
    out = np.empty_like(qd)
    for i in range(qd.shape[0]):
        out[i] = b * som[1][j, i] + (1.0 - b) * qd[i]
    return out


@njit(cache=True, error_model="numpy")
def dq_act(q, som, guide, x, epsilon, greedy, rng):
    k = guide_index(guide, x)
    if k >= 0:
        return guide[2][k]
    n = q[1][q[1].shape[0] - 1]
    if not greedy and rng.random() < epsilon:
        return rng.integers(0, n)
    return np.argmax(dq_combined(q, som, x))


@njit(cache=True, error_model="numpy")
def dq_learn(q, opt, som, guide, gamma, x, a, r, x2, done):
    if done:
        target = r
    else:
        k = guide_index(guide, x2)
        boot = guide[1][k] if k >= 0 else np.max(dq_combined(q, som, x2))
        target = r + gamma * boot
    q_s = forward(q[0], q[1], q[2], x)
    j, _ = bmu(som[0], x)
    td_dnn = target - q_s[a]
    td_som = target - som[1][j, a]
    if not (math.isfinite(td_dnn) and math.isfinite(td_som)):
        return SKIPPED
    if td_dnn != 0.0:
        dout = np.zeros(q_s.shape[0])
        dout[a] = -td_dnn
        grad = np.empty_like(q[0])
        vjp(q[0], q[1], q[2], x, dout, grad)
        if not apply_update(q, opt, grad):
            return SKIPPED
    som_step(som, x, td_dnn)
    som_value_step(som, j, a, td_som)
    return OK


@njit(cache=True, error_model="numpy")
def grid_episode(q, opt, som, guide, gamma, epsilon, rng, start, goal, penalty, moves, rewards, max_steps, lo, span):
    """rewards = [step, goal, penalty]; returns (total reward, steps, skipped transitions)."""
    w, h = penalty.shape
    cx, cy = start[0], start[1]
    s = np.empty(2)
    total = 0.0
    skipped = 0
    for t in range(max_steps):
        s[0] = cx
        s[1] = cy
        x = normalize(s, lo, span)
        a = dq_act(q, som, guide, x, epsilon, False, rng)
        cx = min(max(cx + moves[a, 0], 0), w - 1)
        cy = min(max(cy + moves[a, 1], 0), h - 1)
        r = rewards[0]
        done = cx == goal[0] and cy == goal[1]
        if done:
            r += rewards[1]
        elif penalty[cx, cy]:
            r += rewards[2]
        s[0] = cx
        s[1] = cy
        skipped += dq_learn(q, opt, som, guide, gamma, x, a, r, normalize(s, lo, span), done)
        total += r
        if done:
            return total, t + 1, skipped
    return total, max_steps, skipped


# continuous actor-critic (CTDL when has_som) -----------------------------------

@njit(cache=True, error_model="numpy")
def ca_act(actor, guide, x, greedy, rng):
    """(action, unclipped draw, guided)."""
    k = guide_index(guide, x)
    if k >= 0:
        a = guide[2][k].copy()
        return a, a.copy(), True
    out = forward(actor[0], actor[1], actor[2], x)
    kd = out.shape[0] // 2
    raw = np.empty(kd)
    a = np.empty(kd)
    for i in range(kd):
        if greedy:
            raw[i] = out[i]
        else:
            std = math.exp(min(max(out[kd + i], LOG_STD_MIN), LOG_STD_MAX))
            raw[i] = out[i] + std * rng.standard_normal()
        a[i] = min(max(raw[i], -1.0), 1.0)
    return a, raw, False


@njit(cache=True, error_model="numpy")
def ca_value(critic, som, has_som, x):
    v = forward(critic[0], critic[1], critic[2], x)[0]
    if not has_som:
        return v
    j, b = som_lookup(som, x)
    return b * som[1][j, 0] + (1.0 - b) * v


@njit(cache=True, error_model="numpy")
def ca_learn(critic, copt, actor, aopt, som, has_som, guide, gamma, x, a_raw, r, x2, done):
    if done:
        target = r
    else:
        k = guide_index(guide, x2)
        boot = guide[1][k] if k >= 0 else ca_value(critic, som, has_som, x2)
        target = r + gamma * boot
    dv = np.empty_like(critic[0])
    v_dnn = vjp(critic[0], critic[1], critic[2], x, np.ones(1), dv)[0]
    j = -1
    v_som = 0.0
    v = v_dnn
    if has_som:
        j, b = som_lookup(som, x)
        v_som = som[1][j, 0]
        v = b * v_som + (1.0 - b) * v_dnn
    advantage = target - v
    td_dnn = target - v_dnn
    td_som = target - v_som if has_som else 0.0
    if not (math.isfinite(advantage) and math.isfinite(td_dnn) and math.isfinite(td_som)):
        return SKIPPED
    overridden = guide_index(guide, x) >= 0
    if td_dnn != 0.0:
        for k in range(dv.shape[0]):
            dv[k] = -td_dnn * dv[k]
        if not apply_update(critic, copt, dv):
            return SKIPPED
    if has_som:
        som_step(som, x, td_dnn)
        som_value_step(som, j, 0, td_som)
    if not overridden and advantage != 0.0:
        grad = np.empty_like(actor[0])
        policy_grad(actor, x, a_raw, advantage, grad)
        if not apply_update(actor, aopt, grad):
            return SKIPPED
    return OK


@njit(cache=True, error_model="numpy")
def mc_step(p, s, force):
    """p = [power, gravity, max_speed, min_pos, max_pos, goal_pos, goal_reward, action_cost]."""
    f = min(max(force, -1.0), 1.0)
    position, velocity = s[0], s[1]
    velocity += f * p[0] - p[1] * math.cos(3 * position)
    velocity = min(max(velocity, -p[2]), p[2])
    position += velocity
    position = min(max(position, p[3]), p[4])
    if position == p[3]:
        velocity = 0.0
    done = position >= p[5]
    reward = (p[6] if done else 0.0) - p[7] * f * f
    out = np.empty(2)
    out[0] = position
    out[1] = velocity
    return out, reward, done


@njit(cache=True, error_model="numpy")
def mc_episode(critic, copt, actor, aopt, som, has_som, guide, gamma, rng, s0, params, max_steps, lo, span):
    s = s0.copy()
    total = 0.0
    skipped = 0
    for t in range(max_steps):
        x = normalize(s, lo, span)
        a, raw, _ = ca_act(actor, guide, x, False, rng)
        s2, r, done = mc_step(params, s, a[0])
        skipped += ca_learn(critic, copt, actor, aopt, som, has_som, guide, gamma, x, raw, r,
                            normalize(s2, lo, span), done)
        total += r
        s = s2
        if done:
            return total, t + 1, skipped
    return total, max_steps, skipped
