"""Exact tabular CQL iteration with greedy policy improvement.

Each step computes

    Q_{k+1}(s, a) = r(s, a) + gamma * E_{s'}[max_a' Q_k(s', a')]
                    - alpha * (mu_k(a|s) / pi_b(a|s) - 1)

on the empirical MDP, with ``mu_k`` the point mass on the greedy action of
``Q_k``. Greedy actions are restricted to actions present in the data at
that state, and ties go to the lowest action index. Entries for (s, a)
pairs absent from the data are NaN.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass

import numpy as np

from .mdp_env import EmpiricalMDP, TabularPolicy, random_mdp, stationary_empirical_mdp

DECREASE_TOL = 1e-9


class DivergenceError(RuntimeError):
    def __init__(self, iteration: int, magnitude: float):
        super().__init__(f"|Q| reached {magnitude:.3g} at iteration {iteration}")
        self.iteration = iteration
        self.magnitude = magnitude


@dataclass(frozen=True, eq=False)
class QTable:
    values: np.ndarray
    iteration: int

    def greedy_actions(self, visited: np.ndarray) -> np.ndarray:
        return greedy_actions(self.values, visited)


@dataclass(frozen=True)
class Theorem1Report:
    iteration: int
    f_k: float
    f_k_next: float
    mc_return: float
    cond1_holds: bool
    cond2_gap: float
    zeta: float
    cond2_holds: bool
    worst_state_margin: float  # min over dataset states of gap(s) - zeta(s)
    decreased: bool

    @property
    def violation(self) -> bool:
        """A decrease while either non-decrease condition held."""
        return self.decreased and (self.cond1_holds or self.cond2_holds)

    def to_json(self) -> str:
        d = asdict(self)
        d["violation"] = self.violation
        return json.dumps(d)


@dataclass(frozen=True, eq=False)
class TabularRun:
    qtables: list
    f: np.ndarray
    alpha: float
    gamma: float


def greedy_actions(values: np.ndarray, visited: np.ndarray) -> np.ndarray:
    """Argmax over visited actions, lowest index on ties; -1 for unvisited states."""
    masked = np.where(visited, values, -np.inf)
    acts = np.argmax(masked, axis=1)
    acts[~visited.any(axis=1)] = -1
    return acts


def _state_values(values, visited):
    masked = np.where(visited, values, -np.inf)
    v = masked.max(axis=1)
    return np.where(np.isfinite(v), v, 0.0)


def _resolve_gamma(emp: EmpiricalMDP, gamma):
    g = emp.gamma if gamma is None else gamma
    if g is None:
        raise ValueError("gamma is required (the empirical MDP does not carry one)")
    if not 0.0 <= g < 1.0:
        raise ValueError("gamma must lie in [0, 1)")
    return float(g)


def greedy_mu(values: np.ndarray, visited: np.ndarray) -> np.ndarray:
    acts = greedy_actions(values, visited)
    mu = np.zeros_like(values, dtype=float)
    rows = np.flatnonzero(acts >= 0)
    mu[rows, acts[rows]] = 1.0
    return mu


def regularizer_mean(emp: EmpiricalMDP, mu: np.ndarray, alpha: float) -> float:
    """E_{s,a ~ D}[alpha * (mu(a|s) / pi_b(a|s) - 1)] over the dataset."""
    visited = emp.visited_mask
    if np.any((mu > 0) & ~visited):
        raise ValueError("mu places mass on actions absent from the data")
    pib = emp.empirical_behavior
    with np.errstate(invalid="ignore", divide="ignore"):
        pen = np.where(visited, alpha * (mu / pib - 1.0), 0.0)
    return float(np.sum(emp.data_distribution * pen))


def cql_exact_backup(q: QTable, emp: EmpiricalMDP, alpha: float, gamma: float | None = None,
                     tie_break: str = "lowest") -> QTable:
    if tie_break != "lowest":
        raise ValueError(f"unsupported tie-break rule {tie_break!r}")
    g = _resolve_gamma(emp, gamma)
    visited = emp.visited_mask
    mu = greedy_mu(q.values, visited)
    pib = emp.empirical_behavior
    V = _state_values(q.values, visited)
    with np.errstate(invalid="ignore", divide="ignore"):
        P = np.where(visited[..., None], emp.empirical_transition, 0.0)
        target = emp.empirical_reward + g * P @ V
        penalty = alpha * (mu / pib - 1.0)
    values = np.where(visited, target - penalty, np.nan)
    return QTable(values, q.iteration + 1)


def dataset_average(values: np.ndarray, emp: EmpiricalMDP) -> float:
    """f = E_{s,a ~ D}[Q(s, a)] with dataset counts as weights."""
    w = emp.data_distribution
    return float(np.sum(np.where(emp.visited_mask, w * values, 0.0)))


def run_tabular_cql(emp: EmpiricalMDP, alpha: float, k_max: int, gamma: float | None = None,
                    q0: np.ndarray | None = None, bound: float = 1e8) -> TabularRun:
    if k_max < 1:
        raise ValueError("k_max must be >= 1")
    g = _resolve_gamma(emp, gamma)
    visited = emp.visited_mask
    init = np.zeros(visited.shape) if q0 is None else np.asarray(q0, dtype=float)
    q = QTable(np.where(visited, init, np.nan), 0)
    qtables = [q]
    for _ in range(k_max):
        q = cql_exact_backup(q, emp, alpha, g)
        mag = float(np.nanmax(np.abs(q.values))) if visited.any() else 0.0
        if not np.isfinite(mag) or mag > bound:
            raise DivergenceError(q.iteration, mag)
        qtables.append(q)
    f = np.array([dataset_average(t.values, emp) for t in qtables])
    return TabularRun(qtables, f, alpha, g)


def check_theorem1(run: TabularRun, emp: EmpiricalMDP, alpha: float | None = None) -> list:
    """One report per consecutive pair (k, k+1) of the run."""
    if len(run.qtables) < 2:
        raise ValueError("need at least two iterates")
    alpha = run.alpha if alpha is None else alpha
    visited = emp.visited_mask
    pib = emp.empirical_behavior
    w = emp.data_distribution
    ds = w.sum(axis=1)
    states = np.flatnonzero(ds > 0)
    mc = float(np.sum(np.where(visited, w * emp.empirical_reward, 0.0)) / (1.0 - run.gamma))
    reports = []
    for k in range(len(run.qtables) - 1):
        qk = run.qtables[k].values
        qprev = run.qtables[k - 1].values if k > 0 else qk
        a2 = greedy_actions(qprev, visited)[states]
        qmax = np.where(visited, qk, -np.inf).max(axis=1)[states]
        gap_s = qmax - qk[states, a2]
        zeta_s = alpha / pib[states, a2]
        gap = float(ds[states] @ gap_s)
        zeta = float(ds[states] @ zeta_s)
        f_k, f_next = float(run.f[k]), float(run.f[k + 1])
        reports.append(Theorem1Report(
            iteration=k,
            f_k=f_k,
            f_k_next=f_next,
            mc_return=mc,
            cond1_holds=bool(f_k <= mc),
            cond2_gap=gap,
            zeta=zeta,
            cond2_holds=bool(gap >= zeta),
            worst_state_margin=float(np.min(gap_s - zeta_s)),
            decreased=bool(f_next < f_k - DECREASE_TOL),
        ))
    return reports


def random_behavior(seed: int, n_states: int, n_actions: int, floor: float = 0.02) -> TabularPolicy:
    rng = np.random.default_rng(seed)
    p = rng.dirichlet(np.ones(n_actions), size=n_states)
    p = (p + floor) / (1.0 + floor * n_actions)
    return TabularPolicy(p / p.sum(axis=1, keepdims=True), f"dirichlet-{seed}")


def random_instance(seed: int, max_states: int = 10, max_actions: int = 4):
    """A random MDP with behavior policy and its stationary-data empirical MDP."""
    rng = np.random.default_rng(seed)
    S = int(rng.integers(2, max_states + 1))
    A = int(rng.integers(2, max_actions + 1))
    gamma = float(rng.choice([0.5, 0.9, 0.95]))
    mdp = random_mdp(int(rng.integers(2**31)), S, A, gamma=gamma)
    behavior = random_behavior(int(rng.integers(2**31)), S, A)
    return mdp, behavior, stationary_empirical_mdp(mdp, behavior)


@dataclass
class SuiteResult:
    n_instances: int
    n_runs: int
    n_pairs: int
    n_decreases: int
    n_violations: int
    n_cond1_violations: int
    n_cond2_violations: int
    violations: list

    def to_dict(self) -> dict:
        d = asdict(self)
        d["violations"] = d["violations"][:20]
        return d


def theorem1_suite(n_instances: int = 100, alphas=(0.1, 0.4, 1.0, 2.0), k_max: int = 50,
                   seed: int = 0) -> SuiteResult:
    res = SuiteResult(n_instances, 0, 0, 0, 0, 0, 0, [])
    for i in range(n_instances):
        _, _, emp = random_instance(seed * 100_003 + i)
        for alpha in alphas:
            run = run_tabular_cql(emp, alpha, k_max)
            res.n_runs += 1
            for rep in check_theorem1(run, emp, alpha):
                res.n_pairs += 1
                res.n_decreases += rep.decreased
                if rep.violation:
                    res.n_violations += 1
                    res.n_cond1_violations += rep.cond1_holds
                    res.n_cond2_violations += rep.cond2_holds
                    res.violations.append({"instance": i, "alpha": alpha, **asdict(rep)})
    return res
