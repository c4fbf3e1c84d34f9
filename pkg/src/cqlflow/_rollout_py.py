"""Pure-Python rollout kernels (reference semantics for ``_rollout.pyx``).

Sampling is inverse-CDF on caller-supplied uniforms: the drawn index is the
number of CDF entries ``<= u``, clipped to the last index. Keeping the
randomness outside the kernel makes both backends bit-identical.
"""

import numpy as np


def _draw(cdf_rows, u):
    idx = (u[:, None] >= cdf_rows).sum(axis=1)
    return np.minimum(idx, cdf_rows.shape[1] - 1)


def sample_trajectories(trans_cdf, policy_cdf, init_cdf, reward, terminal, u_init, u):
    """Roll out ``len(u_init)`` episodes of at most ``u.shape[1]`` steps.

    ``u`` has shape ``[n_traj, horizon, 2]`` (action draw, next-state draw).
    Returns flat int/float arrays ``(s, a, r, s2, done, traj)``.
    """
    n_traj, horizon = u.shape[0], u.shape[1]
    s = _draw(np.broadcast_to(init_cdf, (n_traj, init_cdf.shape[0])), u_init)
    alive = np.ones(n_traj, dtype=bool)
    cols = {k: [] for k in ("s", "a", "r", "s2", "done", "traj")}
    traj_ids = np.arange(n_traj)
    for t in range(horizon):
        if not alive.any():
            break
        a = _draw(policy_cdf[s], u[:, t, 0])
        s2 = _draw(trans_cdf[s, a], u[:, t, 1])
        r = reward[s, a]
        done = terminal[s2].astype(bool)
        cols["s"].append(np.where(alive, s, -1))
        cols["a"].append(a)
        cols["r"].append(r)
        cols["s2"].append(s2)
        cols["done"].append(done)
        cols["traj"].append(traj_ids)
        alive = alive & ~done
        s = s2
    if not cols["s"]:
        empty_i = np.zeros(0, dtype=np.int64)
        return empty_i, empty_i, np.zeros(0), empty_i, np.zeros(0, dtype=bool), empty_i
    # [horizon, n_traj] -> trajectory-major order
    stacked = {k: np.stack(v, axis=1).ravel() for k, v in cols.items()}
    keep = stacked["s"] >= 0
    return (
        stacked["s"][keep].astype(np.int64),
        stacked["a"][keep].astype(np.int64),
        stacked["r"][keep].astype(float),
        stacked["s2"][keep].astype(np.int64),
        stacked["done"][keep].astype(bool),
        stacked["traj"][keep].astype(np.int64),
    )


def geometric_returns(trans_cdf, policy_cdf, init_cdf, reward, gamma, u):
    """Undiscounted returns of episodes stopped with probability 1 - gamma.

    Each row of ``u`` (shape ``[n_steps, 4]``) supplies the draws for one
    step: (episode start state, action, next state, stop). The expected
    return equals the discounted value from the initial distribution.
    Only completed episodes are reported.
    """
    n_states = init_cdf.shape[0]
    n_actions = policy_cdf.shape[1]
    returns = []
    total = 0.0
    s = -1
    for i in range(u.shape[0]):
        if s < 0:
            s = _draw_scalar(init_cdf, u[i, 0], n_states)
            total = 0.0
        a = _draw_scalar(policy_cdf[s], u[i, 1], n_actions)
        total += reward[s, a]
        if u[i, 3] >= gamma:
            returns.append(total)
            s = -1
        else:
            s = _draw_scalar(trans_cdf[s, a], u[i, 2], n_states)
    return np.asarray(returns, dtype=float)


def _draw_scalar(cdf, x, n):
    j = 0
    while j < n - 1 and x >= cdf[j]:
        j += 1
    return j
