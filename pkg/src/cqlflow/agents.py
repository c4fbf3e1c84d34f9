"""CQL and BRAC-v actor-critics for discrete actions over feature-vector states.

Both trainers consume a :class:`~cqlflow.mdp_env.Dataset` plus the MDP's
observation features and initial-state distribution. The MDP's dynamics
and rewards are only touched when ``oracle=True`` asks for the
analysis-only ``eval_return`` column.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from . import nn
from .divergence import log_softmax, softmax
from .mdp_env import Dataset, TabularMDP, TabularPolicy, exact_policy_return
from .runlog import CheckpointRef, RunLog, config_hash

ARCH_NOTE = "conv/ResNet architectures replaced by MLP capacity tiers (small/medium/large)"


class TrainingAborted(RuntimeError):
    pass


def parse_widths(tier) -> tuple:
    """Capacity tier name or an explicit ``"64x64"`` width string."""
    if isinstance(tier, (tuple, list)):
        return tuple(int(w) for w in tier)
    if tier in nn.CAPACITY_TIERS:
        return nn.CAPACITY_TIERS[tier]
    try:
        return tuple(int(w) for w in str(tier).split("x"))
    except ValueError:
        raise ValueError(f"unknown capacity tier {tier!r}") from None


@dataclass(frozen=True)
class CqlConfig:
    alpha: float = 1.0
    gamma: float = 0.9
    critic_tier: str = "medium"
    policy_tier: str = "medium"
    activation: str = "relu"
    vib_beta: float = 0.0
    vib_dim: int = 0
    dr3_beta: float = 0.0
    dropout_p: float = 0.0
    l1_rho: float = 0.0
    l2_rho: float = 0.0
    critic_lr: float = 3e-4
    policy_lr: float = 3e-4
    entropy_alpha: float = 0.02
    target_update_period: int = 50
    actor_delay: int = 1
    batch_size: int = 64
    total_steps: int = 3000
    eval_period: int = 100
    checkpoint_period: int = 0  # 0 -> same as eval_period
    q_bound: float = 1e4
    seed: int = 0

    def __post_init__(self):
        if self.alpha < 0:
            raise ValueError("alpha must be >= 0")
        if min(self.target_update_period, self.actor_delay, self.eval_period, self.batch_size) < 1:
            raise ValueError("periods and batch size must be >= 1")
        if self.total_steps < 0:
            raise ValueError("total_steps must be >= 0")
        if not 0.0 <= self.gamma < 1.0:
            raise ValueError("gamma must lie in [0, 1)")
        for name in ("vib_beta", "dr3_beta", "l1_rho", "l2_rho", "entropy_alpha"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        parse_widths(self.critic_tier)
        parse_widths(self.policy_tier)

    @property
    def algo(self) -> str:
        return "cql"

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict):
        names = {f.name for f in fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)

    def replace(self, **kw):
        return replace(self, **kw)

    def critic_spec(self, input_dim, n_actions) -> nn.MlpSpec:
        return nn.MlpSpec(input_dim, parse_widths(self.critic_tier), n_actions, self.activation,
                          dropout_p=self.dropout_p, vib_enabled=self.vib_beta > 0, vib_dim=self.vib_dim)

    def policy_spec(self, input_dim, n_actions) -> nn.MlpSpec:
        return nn.MlpSpec(input_dim, parse_widths(self.policy_tier), n_actions, self.activation)


@dataclass(frozen=True)
class BracConfig(CqlConfig):
    alpha: float = 0.0  # unused by BRAC-v; entropy weight is entropy_alpha
    beta_div: float = 0.1
    behavior_tier: str = "medium"
    behavior_fit_steps: int = 2000
    behavior_dropout_p: float = 0.0
    behavior_lr: float = 1e-3
    behavior_joint: bool = False  # train the behavior model alongside the critic instead of first
    log_floor: float = math.log(1e-4)

    def __post_init__(self):
        super().__post_init__()
        if self.beta_div < 0:
            raise ValueError("beta_div must be >= 0")
        parse_widths(self.behavior_tier)

    @property
    def algo(self) -> str:
        return "brac"

    def behavior_spec(self, input_dim, n_actions) -> nn.MlpSpec:
        return nn.MlpSpec(input_dim, parse_widths(self.behavior_tier), n_actions, self.activation,
                          dropout_p=self.behavior_dropout_p)


# -- losses --------------------------------------------------------------------

@dataclass
class CriticLoss:
    loss: float
    td: float
    reg: float
    grad_q: np.ndarray  # dLoss/dQ(s, .) for the batch


def bellman_targets(rewards, dones, gamma, next_q, next_pi, bonus=None):
    """r + gamma * (1 - done) * E_{a' ~ pi}[Qbar(s', a') (+ bonus(s', a'))]."""
    vals = next_q if bonus is None else next_q + bonus
    return rewards + gamma * (1.0 - dones) * np.sum(next_pi * vals, axis=1)


def cql_critic_loss(q, actions, targets, alpha) -> CriticLoss:
    """alpha * (E[logsumexp_a Q] - E_D[Q]) + 1/2 E[(Q - y)^2] and its gradient."""
    n = q.shape[0]
    idx = np.arange(n)
    q_data = q[idx, actions]
    err = q_data - targets
    td = 0.5 * float(np.mean(err * err))
    m = q.max(axis=1, keepdims=True)
    lse = (m + np.log(np.exp(q - m).sum(axis=1, keepdims=True)))[:, 0]
    reg = float(np.mean(lse - q_data))
    grad = np.zeros_like(q)
    grad[idx, actions] += err / n
    if alpha != 0.0:
        grad += alpha * softmax(q) / n
        grad[idx, actions] -= alpha / n
    return CriticLoss(alpha * reg + td, td, reg, grad)


def policy_loss(logits, values, entropy_alpha):
    """E_s[sum_a pi(a|s) (-values(s, a) + entropy_alpha * log pi(a|s))] and dLoss/dlogits.

    The expectation over actions is exact; ``values`` are held fixed.
    """
    n = logits.shape[0]
    logp = log_softmax(logits)
    pi = np.exp(logp)
    g = -values + entropy_alpha * logp
    loss = float(np.sum(pi * g) / n)
    grad = pi * (g - np.sum(pi * g, axis=1, keepdims=True)) / n
    return loss, grad


def cql_policy_loss(logits, q_values, cfg: CqlConfig):
    return policy_loss(logits, q_values, cfg.entropy_alpha)


def initial_state_value(q_all, pi_all, initial_dist) -> float:
    """E_{s ~ mu0, a ~ pi}[Q(s, a)] computed exactly over the discrete spaces."""
    return float(np.asarray(initial_dist) @ np.sum(pi_all * q_all, axis=1))


# -- behavior model ---------------------------------------------------------------

@dataclass
class BehaviorModel:
    net: nn.Mlp
    nll: float
    steps: int

    def log_probs(self, x) -> np.ndarray:
        return log_softmax(self.net.forward(x, "eval").output)

    def probs(self, x) -> np.ndarray:
        return np.exp(self.log_probs(x))


class BehaviorFitter:
    """Cross-entropy trainer for a categorical behavior model, one minibatch per step."""

    def __init__(self, data: Dataset, spec: nn.MlpSpec, features: np.ndarray, seed: int = 0,
                 lr: float = 1e-3, batch_size: int = 64):
        self.data = data
        self.X = np.asarray(features, dtype=float)
        self.rng = np.random.default_rng(seed)
        self.net = nn.Mlp(spec, seed=int(self.rng.integers(2**31)))
        # zero output layer -> uniform initial model
        self.net.params["Wout"][:] = 0.0
        self.net.params["bout"][:] = 0.0
        self.opt = nn.AdamState(lr=lr)
        self.batch_size = batch_size
        self.steps = 0

    def step(self) -> None:
        d, b = self.data, self.batch_size
        idx = self.rng.integers(len(d), size=b)
        rec = self.net.forward(self.X[d.states[idx]], "train", self.rng)
        p = softmax(rec.output)
        p[np.arange(b), d.actions[idx]] -= 1.0
        nn.optimizer_step(self.net, self.net.backward(rec, p / b), self.opt)
        self.steps += 1

    def nll(self) -> float:
        d = self.data
        logp = log_softmax(self.net.forward(self.X[d.states], "eval").output)
        return float(-np.mean(logp[np.arange(len(d)), d.actions]))

    def model(self) -> BehaviorModel:
        return BehaviorModel(self.net, self.nll(), self.steps)


def fit_behavior(data: Dataset, spec: nn.MlpSpec, steps: int, features: np.ndarray,
                 seed: int = 0, lr: float = 1e-3, batch_size: int = 64) -> BehaviorModel:
    """Categorical maximum-likelihood fit of the behavior policy by cross-entropy."""
    fitter = BehaviorFitter(data, spec, features, seed, lr, batch_size)
    for _ in range(steps):
        fitter.step()
    return fitter.model()


# -- trainer -----------------------------------------------------------------------

@dataclass
class TrainResult:
    log: RunLog
    checkpoints: list
    critic: nn.Mlp
    policy: nn.Mlp
    behavior: BehaviorModel | None = None
    snapshots: dict = field(default_factory=dict)  # step -> policy probs over all states

    def __iter__(self):
        return iter((self.log, self.checkpoints))


def _run_meta(cfg, data: Dataset, mdp: TabularMDP) -> dict:
    cfg_dict = cfg.to_dict()
    return {
        "algo": cfg.algo,
        "config": cfg_dict,
        "config_hash": config_hash(cfg_dict),
        "capacity_tier": cfg.critic_tier,
        "architecture_note": ARCH_NOTE,
        "dataset": data.header(),
        "mdp_id": mdp.mdp_id,
        "gamma": cfg.gamma,
    }


class _Trainer:
    def __init__(self, data: Dataset, cfg: CqlConfig, mdp: TabularMDP, run_dir=None,
                 oracle: bool = False, behavior: BehaviorModel | None = None):
        if len(data) == 0:
            raise ValueError("empty dataset")
        if mdp.n_states != data.n_states or mdp.n_actions != data.n_actions:
            raise ValueError("dataset does not match the MDP's spaces")
        self.data, self.cfg, self.mdp = data, cfg, mdp
        self.brac = isinstance(cfg, BracConfig)
        self.oracle = oracle
        self.run_dir = Path(run_dir) if run_dir is not None else None
        self.rng = np.random.default_rng(cfg.seed)
        seeds = self.rng.integers(2**31, size=3)
        X = np.asarray(mdp.features, dtype=float)
        self.X = X
        A = data.n_actions
        self.critic = nn.Mlp(cfg.critic_spec(X.shape[1], A), seed=int(seeds[0]))
        self.policy = nn.Mlp(cfg.policy_spec(X.shape[1], A), seed=int(seeds[1]))
        self.target = self.critic.copy()
        self.copt = nn.AdamState(lr=cfg.critic_lr)
        self.popt = nn.AdamState(lr=cfg.policy_lr)
        self.behavior = behavior
        self.fitter = None
        self.log_behavior = None
        if self.brac and behavior is None:
            self.fitter = BehaviorFitter(data, cfg.behavior_spec(X.shape[1], A), X, seed=int(seeds[2]),
                                         lr=cfg.behavior_lr, batch_size=cfg.batch_size)
            if not cfg.behavior_joint:
                for _ in range(cfg.behavior_fit_steps):
                    self.fitter.step()
            self.behavior = self.fitter.model()
        if self.brac:
            self._refresh_behavior()
        self.log = RunLog(_run_meta(cfg, data, mdp))
        self.checkpoints = []
        self.snapshots = {}

    def _refresh_behavior(self):
        """Floored log-probabilities of the behavior model for every state."""
        logb = self.behavior.log_probs(self.X)
        self.log_behavior = np.maximum(logb, self.cfg.log_floor)

    # metrics over the full dataset, eval mode
    def _tables(self):
        q_all = self.critic.forward(self.X, "eval")
        qbar_all = self.target.forward(self.X, "eval").output
        pi_all = softmax(self.policy.forward(self.X, "eval").output)
        return q_all, qbar_all, pi_all

    def metrics(self, step: int) -> dict:
        d, cfg = self.data, self.cfg
        rec, qbar_all, pi_all = self._tables()
        q_all = rec.output
        n = len(d)
        idx = np.arange(n)
        q = q_all[d.states]
        q_data = q[idx, d.actions]
        bonus = None if not self.brac else cfg.beta_div * self.log_behavior[d.next_states]
        y = bellman_targets(d.rewards, d.dones.astype(float), cfg.gamma, qbar_all[d.next_states],
                            pi_all[d.next_states], bonus)
        closs = cql_critic_loss(q, d.actions, y, cfg.alpha if not self.brac else 0.0)
        ent = -np.sum(pi_all * np.log(np.maximum(pi_all, 1e-300)), axis=1)
        out = {
            "step": int(step),
            "avg_dataset_q": float(np.mean(q_data)),
            "td_error": closs.td,
            "cql_reg": closs.reg,
            "loss": closs.loss,
            "conservative_q": None,
            "policy_entropy": float(np.mean(ent[d.states])),
            "vib_kl": None,
            "dr3": None,
            "init_state_value": None,
            "max_abs_q": float(np.max(np.abs(q_all))),
        }
        if self.brac:
            lb = self.log_behavior[d.states, d.actions]
            out["conservative_q"] = float(np.mean(q_data + cfg.beta_div * lb))
            qc_all = q_all + cfg.beta_div * self.log_behavior
            out["init_state_value"] = float(self.mdp.initial_dist @ np.sum(pi_all * qc_all, axis=1))
        else:
            out["init_state_value"] = initial_state_value(q_all, pi_all, self.mdp.initial_dist)
        if rec.vib is not None:
            out["vib_kl"] = float(np.mean(rec.vib.kl[d.states]))
        if cfg.dr3_beta > 0:
            feats = rec.features
            out["dr3"] = float(np.mean(np.abs(np.sum(feats[d.states] * feats[d.next_states], axis=1))))
        if self.oracle:
            out["eval_return"] = exact_policy_return(self.mdp, TabularPolicy(pi_all, "learned"))
        for k, v in out.items():
            if isinstance(v, float) and not np.isfinite(v):
                raise TrainingAborted(f"non-finite {k} at step {step}")
        self.snapshots[int(step)] = pi_all
        return out

    def save_checkpoint(self, step: int, metrics: dict) -> CheckpointRef:
        cpath = ppath = None
        if self.run_dir is not None:
            cdir = self.run_dir / "checkpoints"
            cpath = str(nn.save_checkpoint(cdir / f"critic_{step:07d}.json", self.critic, self.copt, step))
            ppath = str(nn.save_checkpoint(cdir / f"policy_{step:07d}.json", self.policy, self.popt, step))
        ref = CheckpointRef(int(step), cpath, ppath,
                            {k: v for k, v in metrics.items() if k != "eval_return"})
        self.checkpoints.append(ref)
        return ref

    def critic_step(self, idx):
        d, cfg, rng = self.data, self.cfg, self.rng
        s, a, s2 = d.states[idx], d.actions[idx], d.next_states[idx]
        x, x2 = self.X[s], self.X[s2]
        rec = self.critic.forward(x, "train", rng)
        next_q = self.target.forward(x2, "eval").output
        next_pi = softmax(self.policy.forward(x2, "eval").output)
        bonus = None if not self.brac else cfg.beta_div * self.log_behavior[s2]
        y = bellman_targets(d.rewards[idx], d.dones[idx].astype(float), cfg.gamma, next_q, next_pi, bonus)
        closs = cql_critic_loss(rec.output, a, y, 0.0 if self.brac else cfg.alpha)
        n = len(idx)
        grad_kl = cfg.vib_beta / n if cfg.vib_beta > 0 else None
        if cfg.dr3_beta > 0:
            rec2 = self.critic.forward(x2, "train", rng)
            _, g1, g2 = nn.dr3_penalty(rec.features, rec2.features)
            grads = nn.add_grads(
                self.critic.backward(rec, closs.grad_q, cfg.dr3_beta * g1, grad_kl),
                self.critic.backward(rec2, np.zeros_like(rec2.output), cfg.dr3_beta * g2),
            )
        else:
            grads = self.critic.backward(rec, closs.grad_q, None, grad_kl)
        for kind, rho in (("l1", cfg.l1_rho), ("l2", cfg.l2_rho)):
            if rho > 0:
                grads = nn.add_grads(grads, nn.weight_penalty(self.critic, kind, rho)[1])
        nn.optimizer_step(self.critic, grads, self.copt)

    def policy_step(self, idx):
        cfg = self.cfg
        x = self.X[self.data.states[idx]]
        values = self.critic.forward(x, "eval").output
        if self.brac:
            values = values + cfg.beta_div * self.log_behavior[self.data.states[idx]]
        rec = self.policy.forward(x, "train", self.rng)
        _, grad = policy_loss(rec.output, values, cfg.entropy_alpha)
        nn.optimizer_step(self.policy, self.policy.backward(rec, grad), self.popt)

    def run(self) -> TrainResult:
        cfg = self.cfg
        ckpt_period = cfg.checkpoint_period or cfg.eval_period
        n = len(self.data)
        m = self.metrics(0)
        self.log.append(m)
        self.save_checkpoint(0, m)
        diverged_at = None
        for step in range(1, cfg.total_steps + 1):
            idx = self.rng.integers(n, size=cfg.batch_size)
            if self.brac and cfg.behavior_joint:
                self.fitter.step()
                self._refresh_behavior()
            self.critic_step(idx)
            if step % cfg.actor_delay == 0:
                self.policy_step(idx)
            if step % cfg.target_update_period == 0:
                self.target = self.critic.copy()
            if step % cfg.eval_period == 0 or step == cfg.total_steps:
                m = self.metrics(step)
                self.log.append(m)
                if step % ckpt_period == 0 or step == cfg.total_steps:
                    self.save_checkpoint(step, m)
                if m["max_abs_q"] > cfg.q_bound:
                    diverged_at = step
                    break
        self.log.meta["diverged_at"] = diverged_at
        self.log.meta["checkpoints"] = [c.to_dict() for c in self.checkpoints]
        if self.fitter is not None and cfg.behavior_joint:
            self.behavior = self.fitter.model()
        if self.behavior is not None:
            self.log.meta["behavior_nll"] = self.behavior.nll
        if self.run_dir is not None:
            self.log.write(self.run_dir / "runlog.jsonl")
        return TrainResult(self.log, self.checkpoints, self.critic, self.policy, self.behavior,
                           self.snapshots)


def train_cql(data: Dataset, cfg: CqlConfig, mdp: TabularMDP, run_dir=None,
              oracle: bool = False) -> TrainResult:
    if isinstance(cfg, BracConfig):
        raise TypeError("use train_brac for BRAC configs")
    return _Trainer(data, cfg, mdp, run_dir, oracle).run()


def train_brac(data: Dataset, cfg: BracConfig, mdp: TabularMDP, run_dir=None,
               oracle: bool = False, behavior: BehaviorModel | None = None) -> TrainResult:
    if not isinstance(cfg, BracConfig):
        raise TypeError("train_brac needs a BracConfig")
    return _Trainer(data, cfg, mdp, run_dir, oracle, behavior).run()


def train(data: Dataset, cfg, mdp: TabularMDP, run_dir=None, oracle: bool = False) -> TrainResult:
    if isinstance(cfg, BracConfig):
        return train_brac(data, cfg, mdp, run_dir, oracle)
    return train_cql(data, cfg, mdp, run_dir, oracle)


def policy_table(policy: nn.Mlp, features: np.ndarray) -> TabularPolicy:
    """Tabular view of a policy network over every state's features."""
    return TabularPolicy(softmax(policy.forward(features, "eval").output), "network")
