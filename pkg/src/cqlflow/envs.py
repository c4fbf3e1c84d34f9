"""Gridworld MDPs with observation features, addressable by id string.

States are products of a grid position and a nuisance id that is redrawn
uniformly at every step, independent of the action. Observations are the
one-hot position concatenated with a fixed random embedding of the
nuisance id, so a network can memorize individual samples through the
nuisance part while the dynamics only depend on position. A single
absorbing terminal state follows every goal.
"""

from __future__ import annotations

import re

import numpy as np

from .mdp_env import TabularMDP, TabularPolicy, epsilon_greedy, random_mdp

MOVES = np.array([(-1, 0), (1, 0), (0, -1), (0, 1)])  # up, down, left, right


def _grid_moves(height, width, walls):
    """next_pos[p, a] for deterministic moves; blocked moves stay put."""
    n = height * width
    nxt = np.zeros((n, len(MOVES)), dtype=int)
    for p in range(n):
        r, c = divmod(p, width)
        for a, (dr, dc) in enumerate(MOVES):
            rr, cc = r + dr, c + dc
            if 0 <= rr < height and 0 <= cc < width and (rr, cc) not in walls:
                nxt[p, a] = rr * width + cc
            else:
                nxt[p, a] = p
    return nxt


def _shortest_path_actions(nxt, goals, n_pos):
    """Action moving one step closer to the nearest goal, and step distances."""
    dist = np.full(n_pos, np.inf)
    dist[list(goals)] = 0.0
    for _ in range(n_pos):  # Bellman-Ford sweeps; grids here are tiny
        new = np.minimum(dist, dist[nxt].min(axis=1) + 1.0)
        new[list(goals)] = 0.0
        if np.array_equal(new, dist):
            break
        dist = new
    acts = np.argmin(dist[nxt], axis=1)
    return acts, dist


def nuisance_gridworld(height=5, width=5, goals=None, goal_rewards=None, n_nuisance=8,
                       nuisance_dim=8, nuisance_scale=1.0, slip=0.1, gamma=0.9, horizon=30,
                       walls=(), start=0, seed=0, mdp_id="grid", nuisance_mode="step"):
    """Gridworld whose observations carry a resampled distractor embedding.

    Entering a goal position pays that goal's reward and moves to the
    absorbing terminal state. With probability ``slip`` the chosen move is
    replaced by a uniformly random one. ``start=None`` spreads the initial
    distribution over every free non-goal cell. ``nuisance_mode="episode"``
    draws the nuisance id once per episode instead of at every step.
    """
    if nuisance_mode not in ("step", "episode"):
        raise ValueError("nuisance_mode must be 'step' or 'episode'")
    rng = np.random.default_rng(seed)
    walls = {tuple(w) for w in walls}
    n_pos = height * width
    goals = [n_pos - 1] if goals is None else list(goals)
    goal_rewards = [1.0] * len(goals) if goal_rewards is None else list(goal_rewards)
    K, A = n_nuisance, len(MOVES)
    S = n_pos * K + 1
    term = S - 1
    nxt = _grid_moves(height, width, walls)
    move_p = np.full((A, A), slip / A) + (1.0 - slip) * np.eye(A)  # [chosen, executed]
    P = np.zeros((S, A, S))
    R = np.zeros((S, A))
    goal_r = dict(zip(goals, goal_rewards))
    for p in range(n_pos):
        for a in range(A):
            for b in range(A):
                q = nxt[p, b]
                w = move_p[a, b]
                if q in goal_r:
                    R[p * K:(p + 1) * K, a] += w * goal_r[q]
                    P[p * K:(p + 1) * K, a, term] += w
                elif nuisance_mode == "step":
                    P[p * K:(p + 1) * K, a, q * K:(q + 1) * K] += w / K
                else:
                    for k in range(K):
                        P[p * K + k, a, q * K + k] += w
    # goal cells themselves are never occupied; route them to the terminal too
    for g in goals:
        P[g * K:(g + 1) * K] = 0.0
        P[g * K:(g + 1) * K, :, term] = 1.0
        R[g * K:(g + 1) * K] = 0.0
    P[term, :, term] = 1.0
    starts = [p for p in range(n_pos) if p not in goal_r and divmod(p, width) not in walls] \
        if start is None else [start]
    mu0 = np.zeros(S)
    for p in starts:
        mu0[p * K:(p + 1) * K] = 1.0 / (K * len(starts))
    emb = nuisance_scale * rng.normal(size=(K, nuisance_dim))
    feats = np.zeros((S, n_pos + nuisance_dim + 1))
    for p in range(n_pos):
        feats[p * K:(p + 1) * K, p] = 1.0
        feats[p * K:(p + 1) * K, n_pos:n_pos + nuisance_dim] = emb
    feats[term, -1] = 1.0
    terminal = np.zeros(S, dtype=bool)
    terminal[term] = True
    info = {"height": height, "width": width, "n_nuisance": K, "goals": goals,
            "goal_rewards": goal_rewards, "slip": slip, "next_pos": nxt, "n_pos": n_pos,
            "nuisance_mode": nuisance_mode}
    return TabularMDP(P, R, gamma, mu0, horizon=horizon, terminal=terminal, features=feats,
                      reward_bounds=(0.0, max(1.0, max(goal_rewards))), mdp_id=mdp_id, info=info)


def position_actions_to_states(mdp: TabularMDP, pos_actions) -> np.ndarray:
    K = mdp.info["n_nuisance"]
    acts = np.repeat(np.asarray(pos_actions, dtype=int), K)
    return np.r_[acts, 0]


def scripted_behavior(mdp: TabularMDP, eps: float, target_goal: int | None = None,
                      policy_id=None) -> TabularPolicy:
    """Epsilon-greedy shortest-path walker toward one goal (default: the nearest)."""
    info = mdp.info
    goals = info["goals"] if target_goal is None else [target_goal]
    acts, _ = _shortest_path_actions(info["next_pos"], goals, info["n_pos"])
    name = "nearest" if target_goal is None else f"g{target_goal}"
    return epsilon_greedy(position_actions_to_states(mdp, acts), mdp.n_actions, eps,
                          policy_id or f"walker-{name}-eps{eps:g}")


def distractor_gridworld(seed=0):
    return nuisance_gridworld(5, 5, n_nuisance=8, nuisance_dim=8, seed=seed,
                              mdp_id=f"distractor-grid-{seed}")


def multigoal_gridworld(seed=0):
    """Larger grid with a near low-value goal and far higher-value goals."""
    return nuisance_gridworld(7, 7, goals=[6, 42, 48], goal_rewards=[0.3, 0.6, 1.0],
                              n_nuisance=4, nuisance_dim=4, walls=[(1, 1), (2, 3), (3, 1), (4, 4), (5, 2)],
                              start=None, seed=seed, mdp_id=f"multigoal-grid-{seed}")


def drawer_gridworld(seed=0, nuisance_scale=1.0, n_nuisance=32, mode="step"):
    """Narrow 3x6 corridor with a single far goal and many nuisance ids per cell."""
    return nuisance_gridworld(3, 6, goals=[17], n_nuisance=n_nuisance, nuisance_dim=8, slip=0.1,
                              nuisance_scale=nuisance_scale, nuisance_mode=mode,
                              seed=seed, mdp_id=f"drawer-grid-{seed}")


_REGISTRY = {
    "distractor-grid": distractor_gridworld,
    "multigoal-grid": multigoal_gridworld,
    "drawer-grid": drawer_gridworld,
}

DEFAULT_BEHAVIOR = {
    "distractor-grid": 0.5,
    "multigoal-grid": 0.5,
    "drawer-grid": 0.5,
}


def make_mdp(mdp_id: str) -> TabularMDP:
    """Build an MDP from ids like ``distractor-grid-3`` or ``random-7-s5-a3``."""
    m = re.fullmatch(r"random-(\d+)-s(\d+)-a(\d+)", mdp_id)
    if m:
        seed, S, A = (int(g) for g in m.groups())
        mdp = random_mdp(seed, S, A)
        return mdp
    m = re.fullmatch(r"([a-z-]+?)(?:-(\d+))?", mdp_id)
    if m and m.group(1) in _REGISTRY:
        return _REGISTRY[m.group(1)](int(m.group(2) or 0))
    raise KeyError(f"unknown mdp id {mdp_id!r}; known: {sorted(_REGISTRY)} or random-<seed>-s<S>-a<A>")


def make_behavior(mdp: TabularMDP, spec: str = "default") -> TabularPolicy:
    """Behavior policy by name: ``uniform``, ``eps:<e>`` or ``default``."""
    if spec == "uniform":
        return TabularPolicy.uniform(mdp.n_states, mdp.n_actions)
    family = re.sub(r"-\d+$", "", mdp.mdp_id)
    if spec == "default":
        spec = f"eps:{DEFAULT_BEHAVIOR.get(family, 0.5)}"
    if spec.startswith("eps:"):
        if "next_pos" not in mdp.info:
            raise ValueError("scripted behavior needs a gridworld")
        return scripted_behavior(mdp, float(spec[4:]))
    raise ValueError(f"unknown behavior spec {spec!r}")
