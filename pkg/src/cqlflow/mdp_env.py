"""Enumerable MDPs, offline datasets and exact ground-truth evaluation.

Ground-truth evaluation (:func:`exact_policy_return`) exists for tests and
the quarantined ``eval-oracle`` command only; the workflow advisor never
calls it.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import rollout

_TOL = 1e-12


class EmptyDatasetError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class TabularMDP:
    transition: np.ndarray  # [s, a, s']
    reward: np.ndarray  # [s, a]
    gamma: float
    initial_dist: np.ndarray
    horizon: int = 30
    terminal: np.ndarray | None = None  # bool per state; entering ends an episode
    features: np.ndarray | None = None  # [s, d] observation per state
    reward_bounds: tuple[float, float] = (0.0, 1.0)
    mdp_id: str = "custom"
    info: dict = field(default_factory=dict)

    def __post_init__(self):
        P = np.asarray(self.transition, dtype=float)
        R = np.asarray(self.reward, dtype=float)
        mu0 = np.asarray(self.initial_dist, dtype=float)
        if P.ndim != 3 or P.shape[0] != P.shape[2]:
            raise ValueError("transition must have shape [S, A, S]")
        S, A, _ = P.shape
        if R.shape != (S, A):
            raise ValueError(f"reward shape {R.shape} != {(S, A)}")
        if np.any(P < 0) or np.max(np.abs(P.sum(axis=2) - 1.0)) > _TOL * S:
            raise ValueError("transition rows must be probability vectors")
        if mu0.shape != (S,) or np.any(mu0 < 0) or abs(mu0.sum() - 1.0) > _TOL * S:
            raise ValueError("initial_dist must be a probability vector over states")
        lo, hi = self.reward_bounds
        if R.min() < lo - _TOL or R.max() > hi + _TOL:
            raise ValueError(f"rewards outside declared bounds {self.reward_bounds}")
        if not 0.0 <= self.gamma < 1.0:
            raise ValueError("gamma must lie in [0, 1)")
        if self.horizon < 1:
            raise ValueError("horizon must be >= 1")
        term = np.zeros(S, dtype=bool) if self.terminal is None else np.asarray(self.terminal, dtype=bool)
        if term.shape != (S,):
            raise ValueError("terminal must be a boolean per state")
        feats = self.features
        if feats is None:
            feats = np.eye(S)
        feats = np.asarray(feats, dtype=float)
        if feats.ndim != 2 or feats.shape[0] != S:
            raise ValueError("features must have one row per state")
        for name, val in (("transition", P), ("reward", R), ("initial_dist", mu0),
                          ("terminal", term), ("features", feats)):
            val.setflags(write=False)
            object.__setattr__(self, name, val)

    @property
    def n_states(self) -> int:
        return self.transition.shape[0]

    @property
    def n_actions(self) -> int:
        return self.transition.shape[1]

    @property
    def feature_dim(self) -> int:
        return self.features.shape[1]

    def permuted(self, perm) -> "TabularMDP":
        """Same MDP with state ``i`` relabelled as ``perm[i]``."""
        perm = np.asarray(perm)
        inv = np.argsort(perm)
        return TabularMDP(
            transition=self.transition[inv][:, :, inv],
            reward=self.reward[inv],
            gamma=self.gamma,
            initial_dist=self.initial_dist[inv],
            horizon=self.horizon,
            terminal=self.terminal[inv],
            features=self.features[inv],
            reward_bounds=self.reward_bounds,
            mdp_id=self.mdp_id + "-perm",
        )


@dataclass(frozen=True, eq=False)
class TabularPolicy:
    probs: np.ndarray
    policy_id: str = "tabular"

    def __post_init__(self):
        p = np.asarray(self.probs, dtype=float)
        if p.ndim != 2:
            raise ValueError("policy probs must be a [S, A] matrix")
        if np.any(p < 0) or np.max(np.abs(p.sum(axis=1) - 1.0)) > _TOL * p.shape[1]:
            raise ValueError("policy rows must be probability vectors")
        p.setflags(write=False)
        object.__setattr__(self, "probs", p)

    @classmethod
    def deterministic(cls, actions, n_actions, policy_id="deterministic"):
        actions = np.asarray(actions, dtype=int)
        probs = np.zeros((actions.size, n_actions))
        probs[np.arange(actions.size), actions] = 1.0
        return cls(probs, policy_id)

    @classmethod
    def uniform(cls, n_states, n_actions):
        return cls(np.full((n_states, n_actions), 1.0 / n_actions), "uniform")


def epsilon_greedy(actions, n_actions, eps, policy_id=None) -> TabularPolicy:
    """Scripted action per state, replaced by a uniform action with prob ``eps``."""
    base = TabularPolicy.deterministic(actions, n_actions).probs
    probs = (1.0 - eps) * base + eps / n_actions
    return TabularPolicy(probs, policy_id or f"eps-greedy-{eps:g}")


@dataclass(frozen=True)
class Transition:
    state: int
    action: int
    reward: float
    next_state: int
    done: bool


@dataclass(frozen=True, eq=False)
class Dataset:
    """Offline experience stored column-wise; iterate for :class:`Transition` rows."""

    states: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    next_states: np.ndarray
    dones: np.ndarray
    traj: np.ndarray
    n_states: int
    n_actions: int
    source_seed: int = 0
    behavior_policy_id: str = "unknown"
    mdp_id: str = "custom"
    horizon: int = 30
    n_traj: int = 0

    def __post_init__(self):
        cols = {
            "states": np.asarray(self.states, dtype=np.int64),
            "actions": np.asarray(self.actions, dtype=np.int64),
            "rewards": np.asarray(self.rewards, dtype=float),
            "next_states": np.asarray(self.next_states, dtype=np.int64),
            "dones": np.asarray(self.dones, dtype=bool),
            "traj": np.asarray(self.traj, dtype=np.int64),
        }
        n = cols["states"].size
        if n == 0:
            raise EmptyDatasetError("dataset has no transitions")
        if any(c.shape != (n,) for c in cols.values()):
            raise ValueError("dataset columns must be equal-length vectors")
        for key in ("states", "next_states"):
            if cols[key].min() < 0 or cols[key].max() >= self.n_states:
                raise ValueError(f"{key} out of range")
        if cols["actions"].min() < 0 or cols["actions"].max() >= self.n_actions:
            raise ValueError("actions out of range")
        if np.any(np.diff(cols["traj"]) < 0):
            raise ValueError("transitions must be grouped by trajectory in order")
        for k, v in cols.items():
            v.setflags(write=False)
            object.__setattr__(self, k, v)
        if self.n_traj == 0:
            object.__setattr__(self, "n_traj", int(np.unique(cols["traj"]).size))

    def __len__(self):
        return self.states.size

    def __iter__(self):
        for i in range(len(self)):
            yield self[i]

    def __getitem__(self, i) -> Transition:
        return Transition(int(self.states[i]), int(self.actions[i]), float(self.rewards[i]),
                          int(self.next_states[i]), bool(self.dones[i]))

    @property
    def transitions(self) -> list[Transition]:
        return list(self)

    @property
    def trajectory_boundaries(self) -> np.ndarray:
        """Start index of every trajectory, plus ``len(self)`` as sentinel."""
        starts = np.flatnonzero(np.r_[True, np.diff(self.traj) != 0])
        return np.r_[starts, len(self)]

    def header(self) -> dict:
        return {
            "mdp_id": self.mdp_id,
            "seed": self.source_seed,
            "n_traj": self.n_traj,
            "horizon": self.horizon,
            "n_states": self.n_states,
            "n_actions": self.n_actions,
            "behavior_policy_id": self.behavior_policy_id,
        }

    def equals(self, other: "Dataset") -> bool:
        cols = ("states", "actions", "rewards", "next_states", "dones", "traj")
        return self.header() == other.header() and all(
            np.array_equal(getattr(self, c), getattr(other, c)) for c in cols
        )


def _cdf(p, axis=-1):
    c = np.cumsum(p, axis=axis)
    return c


def generate_dataset(mdp: TabularMDP, behavior: TabularPolicy, n_traj: int, seed: int,
                     backend: str | None = None) -> Dataset:
    if n_traj < 1:
        raise EmptyDatasetError("at least one trajectory is required")
    if behavior.probs.shape != (mdp.n_states, mdp.n_actions):
        raise ValueError("behavior policy does not match the MDP's state/action space")
    rng = np.random.default_rng(seed)
    u_init = rng.random(n_traj)
    u = rng.random((n_traj, mdp.horizon, 2))
    s, a, r, s2, done, traj = rollout.sample_trajectories(
        _cdf(mdp.transition), _cdf(behavior.probs), _cdf(mdp.initial_dist),
        mdp.reward, mdp.terminal, u_init, u, backend=backend,
    )
    return Dataset(s, a, r, s2, done, traj, mdp.n_states, mdp.n_actions, source_seed=seed,
                   behavior_policy_id=behavior.policy_id, mdp_id=mdp.mdp_id,
                   horizon=mdp.horizon, n_traj=n_traj)


@dataclass(frozen=True, eq=False)
class EmpiricalMDP:
    """Tallies of a dataset. Unvisited entries are NaN and flagged by masks."""

    counts: np.ndarray  # [s, a, s'] (real-valued weights allowed)
    reward_sum: np.ndarray  # [s, a]
    done_counts: np.ndarray  # [s, a]
    gamma: float | None = None

    @property
    def n_states(self):
        return self.counts.shape[0]

    @property
    def n_actions(self):
        return self.counts.shape[1]

    @property
    def sa_counts(self) -> np.ndarray:
        return self.counts.sum(axis=2)

    @property
    def state_counts(self) -> np.ndarray:
        return self.sa_counts.sum(axis=1)

    @property
    def visited_mask(self) -> np.ndarray:
        return self.sa_counts > 0

    @property
    def state_visited(self) -> np.ndarray:
        return self.state_counts > 0

    @property
    def empirical_transition(self) -> np.ndarray:
        n = self.sa_counts
        with np.errstate(invalid="ignore", divide="ignore"):
            return np.where(n[..., None] > 0, self.counts / n[..., None], np.nan)

    @property
    def empirical_reward(self) -> np.ndarray:
        n = self.sa_counts
        with np.errstate(invalid="ignore", divide="ignore"):
            return np.where(n > 0, self.reward_sum / n, np.nan)

    @property
    def done_prob(self) -> np.ndarray:
        n = self.sa_counts
        with np.errstate(invalid="ignore", divide="ignore"):
            return np.where(n > 0, self.done_counts / n, np.nan)

    @property
    def empirical_behavior(self) -> np.ndarray:
        """count(s, a) / count(s); rows of unvisited states are NaN."""
        n = self.sa_counts
        ns = n.sum(axis=1, keepdims=True)
        with np.errstate(invalid="ignore", divide="ignore"):
            return np.where(ns > 0, n / ns, np.nan)

    @property
    def data_distribution(self) -> np.ndarray:
        """Normalised (s, a) weights of the dataset."""
        n = self.sa_counts
        return n / n.sum()


def build_empirical_mdp(data: Dataset) -> EmpiricalMDP:
    if len(data) == 0:
        raise EmptyDatasetError("dataset has no transitions")
    S, A = data.n_states, data.n_actions
    counts = np.zeros((S, A, S))
    np.add.at(counts, (data.states, data.actions, data.next_states), 1.0)
    reward_sum = np.zeros((S, A))
    np.add.at(reward_sum, (data.states, data.actions), data.rewards)
    done_counts = np.zeros((S, A))
    np.add.at(done_counts, (data.states, data.actions), data.dones.astype(float))
    return EmpiricalMDP(counts, reward_sum, done_counts)


def stationary_distribution(mdp: TabularMDP, policy: TabularPolicy) -> np.ndarray:
    """Stationary state distribution of the chain induced by ``policy``.

    For chains with several recurrent classes the least-squares solution of
    ``d P = d, sum(d) = 1`` is returned.
    """
    P = np.einsum("sa,sat->st", policy.probs, mdp.transition)
    S = P.shape[0]
    M = np.vstack([P.T - np.eye(S), np.ones((1, S))])
    b = np.r_[np.zeros(S), 1.0]
    d, *_ = np.linalg.lstsq(M, b, rcond=None)
    d = np.clip(d, 0.0, None)
    return d / d.sum()


def stationary_empirical_mdp(mdp: TabularMDP, behavior: TabularPolicy) -> EmpiricalMDP:
    """Infinite-data limit of a dataset drawn from the behavior's stationary visitation.

    Weights replace counts: ``counts[s, a, s'] = d(s) pi_b(a|s) P(s'|s, a)``,
    so the dataset's next-state marginal equals its state marginal exactly.
    """
    d = stationary_distribution(mdp, behavior)
    w = d[:, None] * behavior.probs
    counts = w[:, :, None] * mdp.transition
    return EmpiricalMDP(counts, w * mdp.reward, np.zeros_like(w), gamma=mdp.gamma)


def policy_q_values(mdp: TabularMDP, policy: TabularPolicy) -> np.ndarray:
    """Exact Q^pi by solving the linear policy-evaluation system."""
    P, R, g = mdp.transition, mdp.reward, mdp.gamma
    P_pi = np.einsum("sa,sat->st", policy.probs, P)
    r_pi = np.sum(policy.probs * R, axis=1)
    V = np.linalg.solve(np.eye(mdp.n_states) - g * P_pi, r_pi)
    return R + g * P @ V


def exact_policy_return(mdp: TabularMDP, policy: TabularPolicy) -> float:
    """E_{s ~ mu0}[V^pi(s)] for the infinite-horizon discounted objective."""
    if policy.probs.shape != (mdp.n_states, mdp.n_actions):
        raise ValueError("policy does not match the MDP")
    Q = policy_q_values(mdp, policy)
    V = np.sum(policy.probs * Q, axis=1)
    return float(mdp.initial_dist @ V)


def optimal_q_values(mdp: TabularMDP, tol: float = 1e-12, max_iter: int = 100_000) -> np.ndarray:
    Q = np.zeros((mdp.n_states, mdp.n_actions))
    for _ in range(max_iter):
        Qn = mdp.reward + mdp.gamma * mdp.transition @ Q.max(axis=1)
        if np.max(np.abs(Qn - Q)) < tol:
            return Qn
        Q = Qn
    return Q


def monte_carlo_return(mdp: TabularMDP, policy: TabularPolicy, n_steps: int, seed: int,
                       backend: str | None = None) -> tuple[float, float]:
    """Monte-Carlo estimate of :func:`exact_policy_return` and its standard error.

    Episodes stop with probability ``1 - gamma`` per step and sum undiscounted
    rewards, which is an unbiased estimator of the discounted value.
    """
    rng = np.random.default_rng(seed)
    u = rng.random((n_steps, 4))
    returns = rollout.geometric_returns(
        _cdf(mdp.transition), _cdf(policy.probs), _cdf(mdp.initial_dist),
        mdp.reward, mdp.gamma, u, backend=backend,
    )
    if returns.size < 2:
        raise ValueError("too few completed episodes for an estimate")
    return float(returns.mean()), float(returns.std(ddof=1) / np.sqrt(returns.size))


def dataset_mc_return(data: Dataset, gamma: float) -> float:
    """Mean dataset reward divided by (1 - gamma)."""
    if not 0.0 <= gamma < 1.0:
        raise ValueError("gamma must lie in [0, 1)")
    if len(data) == 0:
        raise EmptyDatasetError("dataset has no transitions")
    return float(np.mean(data.rewards) / (1.0 - gamma))


def random_mdp(seed: int, n_states: int, n_actions: int, gamma: float = 0.9,
               reward_density: float = 0.3, concentration: float = 0.5,
               horizon: int = 30) -> TabularMDP:
    """Random dense MDP with sparse {0, 1} rewards."""
    rng = np.random.default_rng(seed)
    P = rng.dirichlet(np.full(n_states, concentration), size=(n_states, n_actions))
    R = (rng.random((n_states, n_actions)) < reward_density).astype(float)
    mu0 = rng.dirichlet(np.ones(n_states))
    return TabularMDP(P, R, gamma, mu0, horizon=horizon, mdp_id=f"random-{seed}")


def horizon_gamma(horizon: float) -> float:
    """Discount whose effective horizon 1 / (1 - gamma) equals ``horizon``."""
    return 1.0 - 1.0 / horizon


# -- dataset files -----------------------------------------------------------

def write_dataset(data: Dataset, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w") as fh:
        fh.write(json.dumps(data.header()) + "\n")
        for i in range(len(data)):
            row = {
                "s": int(data.states[i]), "a": int(data.actions[i]),
                "r": float(data.rewards[i]), "s2": int(data.next_states[i]),
                "done": bool(data.dones[i]), "traj": int(data.traj[i]),
            }
            fh.write(json.dumps(row) + "\n")
    return path


def read_dataset(path) -> Dataset:
    with Path(path).open() as fh:
        header = json.loads(fh.readline())
        rows = [json.loads(line) for line in fh if line.strip()]
    if not rows:
        raise EmptyDatasetError(f"{path}: no transitions")
    col = lambda k: [row[k] for row in rows]  # noqa: E731
    return Dataset(
        col("s"), col("a"), col("r"), col("s2"), col("done"), col("traj"),
        n_states=header["n_states"], n_actions=header["n_actions"],
        source_seed=header["seed"], behavior_policy_id=header.get("behavior_policy_id", "unknown"),
        mdp_id=header["mdp_id"], horizon=header["horizon"], n_traj=header["n_traj"],
    )
