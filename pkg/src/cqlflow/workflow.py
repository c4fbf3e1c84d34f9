"""Offline diagnosis of CQL-style runs from logged metrics alone.

Every function here reads only the offline fields of a :class:`RunLog`
(dataset Q-values, TD error, regularizer value); none of them look at the
ground-truth return column, so adding or stripping it cannot change an
output.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import asdict, dataclass, field
from fractions import Fraction

import numpy as np

from .agents import BracConfig, CqlConfig
from .nn import TIER_ORDER
from .runlog import CheckpointRef, RunLog

ALPHA_GRID = (0.01, 0.1, 1.0, 2.0, 10.0, 50.0)
REG_FLOOR = -2.0
CAPACITY_DECREASING = frozenset({"vib", "dropout", "l1", "l2"})
CAPACITY_INCREASING = frozenset({"dr3", "capacity_up", "bigger_policy"})
# keys allowed to differ between runs compared for underfitting
CAPACITY_KEYS = frozenset({"critic_tier", "policy_tier", "dr3_beta", "vib_dim"})

GUIDELINE_SELECT = "pick the checkpoint at the peak of the average dataset Q-value"
GUIDELINE_OVERFIT = "overfitting: add a capacity-decreasing regularizer (VIB, dropout)"
GUIDELINE_UNDERFIT = "underfitting: add capacity (bigger networks) or DR3"
GUIDELINE_ALPHA_DOWN = "overfitting persists after correction: rerun with smaller alpha"
GUIDELINE_ALPHA_UP = "regularizer stays high despite more capacity: increase alpha"


class InconclusiveError(ValueError):
    pass


@dataclass
class TrendAnalysis:
    smoothed_series: np.ndarray
    peak_index: int
    post_peak_drop: float | None
    monotone_class: str  # rising | rise_then_fall | flat | falling | diverging | inconclusive
    sustained_records: int = 0
    below_mc_return: bool | None = None

    def to_dict(self) -> dict:
        d = asdict(self)
        d["smoothed_series"] = [float(v) for v in self.smoothed_series]
        return d


@dataclass
class Diagnosis:
    verdict: str
    evidence: list
    source_run_ids: list = field(default_factory=list)
    peak_step: int | None = None

    def __post_init__(self):
        if not self.evidence:
            raise ValueError("a diagnosis needs at least one evidence item")

    def to_dict(self) -> dict:
        return {"verdict": self.verdict, "peak_step": self.peak_step,
                "evidence": [list(e) for e in self.evidence], "source_run_ids": list(self.source_run_ids)}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "Diagnosis":
        return cls(d["verdict"], [tuple(e) for e in d["evidence"]], d.get("source_run_ids", []),
                   d.get("peak_step"))


@dataclass
class Recommendation:
    action: str
    value: object
    rationale: str

    def to_dict(self) -> dict:
        return {"action": self.action, "value": self.value, "rationale": self.rationale}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)


def moving_average(series, window: int) -> np.ndarray:
    """Centered moving average; the window shrinks symmetrically at the edges."""
    x = np.asarray(series, dtype=float)
    if window < 1:
        raise ValueError("window must be >= 1")
    h = window // 2
    out = np.empty_like(x)
    n = x.size
    for i in range(n):
        k = min(h, i, n - 1 - i)
        out[i] = x[i - k:i + k + 1].mean()
    return out


def detect_overfitting(q_series, window: int = 5, drop_threshold: float = 0.1, sustain: int = 3,
                       bound: float | None = None, mc_return: float | None = None):
    """Rise-then-fall test on the smoothed series.

    Returns ``(TrendAnalysis, overfit)``. The drop at record ``t`` after the
    peak is ``(peak - s_t) / |peak|``. The run counts as overfitting when the
    series rose to its peak and the last ``sustain`` records all sit at
    least ``drop_threshold`` below it.
    """
    x = np.asarray(q_series, dtype=float)
    if x.size < max(window, sustain + 1):
        return TrendAnalysis(x.copy(), 0, None, "inconclusive"), False
    if not np.all(np.isfinite(x)) or (bound is not None and np.max(np.abs(x)) > bound):
        return TrendAnalysis(x.copy(), int(np.nanargmax(np.abs(x))), None, "diverging"), False
    s = moving_average(x, window)
    peak = int(np.argmax(s))
    scale = abs(s[peak]) if s[peak] != 0 else float(np.max(np.abs(s)))
    if scale == 0.0:
        return TrendAnalysis(s, peak, None, "flat"), False
    drops = (s[peak] - s) / scale
    post = drops[peak + 1:]
    post_drop = float(np.clip(post[-1], 0.0, 1.0)) if post.size else None
    run = 0
    for d in post[::-1]:
        if d < drop_threshold:
            break
        run += 1
    rose = drops[0] >= drop_threshold
    fell = run > 0
    cls = {(True, True): "rise_then_fall", (True, False): "rising",
           (False, True): "falling", (False, False): "flat"}[(bool(rose), bool(fell))]
    below = None if mc_return is None else bool(s[-1] < mc_return)
    overfit = cls == "rise_then_fall" and run >= sustain
    return TrendAnalysis(s, peak, post_drop, cls, run, below), overfit


def q_series_for(log: RunLog) -> np.ndarray:
    """Series fed to the overfitting test: conservative Q for BRAC runs."""
    return log.series("conservative_q" if log.algo == "brac" else "avg_dataset_q")


def _run_id(log: RunLog) -> str:
    return str(log.meta.get("run_id", log.meta.get("config_hash", "run")))


def diagnose_run(log: RunLog, window: int = 5, drop_threshold: float = 0.1, sustain: int = 3,
                 bound: float | None = None) -> Diagnosis:
    """Single-run verdict: alpha_too_small (diverging), overfitting, healthy or inconclusive."""
    q = q_series_for(log)
    metric = "conservative_q" if log.algo == "brac" else "avg_dataset_q"
    if bound is None:
        bound = float(log.meta.get("config", {}).get("q_bound", 1e4))
    ids = [_run_id(log)]
    if log.meta.get("diverged_at") is not None:
        return Diagnosis("alpha_too_small", [("diverged_at_step", log.meta["diverged_at"], bound)], ids)
    trend, overfit = detect_overfitting(q, window, drop_threshold, sustain, bound)
    ev = [(f"{metric}_trend", trend.monotone_class, "rise_then_fall")]
    if trend.monotone_class == "inconclusive":
        return Diagnosis("inconclusive", [("records", int(q.size), window)], ids)
    if trend.monotone_class == "diverging":
        return Diagnosis("alpha_too_small", [(f"max_abs_{metric}", float(np.max(np.abs(q))), bound)], ids)
    ev.append(("post_peak_drop", trend.post_peak_drop, drop_threshold))
    ev.append(("sustained_records", trend.sustained_records, sustain))
    # the training objective is reported but does not gate the verdict
    td = log.series("td_error")
    ev.append(("final_td_error", float(td[-1]), None))
    ev.append(("final_cql_reg", float(log.series("cql_reg")[-1]), REG_FLOOR))
    if overfit:
        return Diagnosis("overfitting", ev, ids, int(log.steps[trend.peak_index]))
    return Diagnosis("healthy", ev, ids)


def select_checkpoint(q_series, steps, checkpoints, actor_delayed: bool = False, window: int = 5,
                      overfit: bool | None = None, drop_threshold: float = 0.1, sustain: int = 3,
                      plateau_tol: float = 0.02) -> CheckpointRef:
    """Checkpoint at the peak of the smoothed series.

    Only checkpointed steps compete for the peak. With ``actor_delayed`` the
    first checkpoint after the peak is taken instead. For runs that are not
    overfitting, the latest checkpoint within ``plateau_tol`` of the peak is
    returned, i.e. the end of a stable plateau.
    """
    if not checkpoints:
        raise ValueError("no checkpoints")
    steps = np.asarray(steps, dtype=int)
    s = moving_average(q_series, min(window, len(steps)))
    by_step = {c.step: c for c in checkpoints}
    cand = [i for i, st in enumerate(steps) if int(st) in by_step]
    if not cand:
        raise ValueError("no checkpoint aligns with a logged step")
    if overfit is None:
        overfit = detect_overfitting(q_series, window, drop_threshold, sustain)[1]
    best = max(cand, key=lambda i: (s[i], -i))
    if not overfit:
        tol = plateau_tol * abs(s[best])
        best = max(i for i in cand if s[i] >= s[best] - tol)
    if actor_delayed:
        after = [i for i in cand if i > best]
        if after:
            best = after[0]
        else:
            warnings.warn("no checkpoint after the peak; using the peak checkpoint", stacklevel=2)
    return by_step[int(steps[best])]


def select_from_log(log: RunLog, actor_delayed: bool = False, **kw) -> CheckpointRef:
    q = q_series_for(log)
    kw.setdefault("overfit", diagnose_run(log).verdict == "overfitting")
    return select_checkpoint(q, log.steps, log.checkpoints, actor_delayed, **kw)


def qvalue_error_bound(td_error: float, gamma: float) -> float:
    """Q-value error implied by a TD error: ``td_error / (1 - gamma)``.

    ``gamma`` is snapped to the nearest fraction with denominator up to
    10**6 so horizon-derived discounts such as ``1 - 1/30`` give an exact
    effective horizon.
    """
    if td_error < 0:
        raise ValueError("td_error must be >= 0")
    if not 0.0 <= gamma < 1.0:
        raise ValueError("gamma must lie in [0, 1)")
    g = Fraction(gamma).limit_denominator(10**6)
    return float(Fraction(td_error) / (1 - g))


def _tail_mean(log: RunLog, name: str, tail: int) -> float:
    return float(np.mean(log.series(name)[-tail:]))


def config_difference(a: dict, b: dict) -> set:
    keys = set(a) | set(b)
    return {k for k in keys if a.get(k) != b.get(k)}


def detect_underfitting(run_small: RunLog, run_large: RunLog, q_range: float, margin: float = 0.02,
                        tail: int = 3) -> Diagnosis:
    """Capacity comparison: lower final losses with more capacity means underfitting.

    Final values are means over the last ``tail`` records. Both the TD error
    and the regularizer must drop by more than ``margin`` of the smaller
    run's magnitude. The absolute error bound is reported as evidence.
    """
    diff = config_difference(run_small.meta.get("config", {}), run_large.meta.get("config", {}))
    extra = diff - CAPACITY_KEYS
    if extra:
        raise ValueError(f"runs differ beyond capacity settings: {sorted(extra)}")
    ids = [_run_id(run_small), _run_id(run_large)]
    td_s, td_l = _tail_mean(run_small, "td_error", tail), _tail_mean(run_large, "td_error", tail)
    rg_s, rg_l = _tail_mean(run_small, "cql_reg", tail), _tail_mean(run_large, "cql_reg", tail)
    gamma = float(run_small.meta.get("gamma", run_small.meta.get("config", {}).get("gamma", 0.9)))
    bound = qvalue_error_bound(max(td_s, 0.0), gamma)
    td_lower = td_l < td_s - margin * abs(td_s)
    reg_lower = rg_l < rg_s - margin * abs(rg_s)
    small_overfit = diagnose_run(run_small).verdict == "overfitting"
    ev = [
        ("final_td_error_small", td_s, None),
        ("final_td_error_large", td_l, td_s - margin * abs(td_s)),
        ("final_cql_reg_small", rg_s, None),
        ("final_cql_reg_large", rg_l, rg_s - margin * abs(rg_s)),
        ("qvalue_error_bound", bound, q_range),
        ("small_run_overfitting", small_overfit, False),
    ]
    if small_overfit:
        return Diagnosis("overfitting", ev, ids, diagnose_run(run_small).peak_step)
    if td_lower and reg_lower:
        return Diagnosis("underfitting", ev, ids)
    return Diagnosis("healthy", ev, ids)


@dataclass
class AlphaTrial:
    """One completed run in an alpha-tuning history."""

    alpha: float
    diagnosis: Diagnosis
    corrections: tuple = ()
    final_cql_reg: float | None = None

    @classmethod
    def from_dict(cls, d: dict) -> "AlphaTrial":
        return cls(float(d["alpha"]), Diagnosis.from_dict(d["diagnosis"]), tuple(d.get("corrections", ())),
                   d.get("final_cql_reg"))

    def to_dict(self) -> dict:
        return {"alpha": self.alpha, "diagnosis": self.diagnosis.to_dict(),
                "corrections": list(self.corrections), "final_cql_reg": self.final_cql_reg}


def _grid_below(target: float) -> float:
    below = [a for a in ALPHA_GRID if a <= target * (1 + 1e-12)]
    return below[-1] if below else target


def _grid_above(target: float) -> float:
    above = [a for a in ALPHA_GRID if a >= target * (1 - 1e-12)]
    return above[0] if above else target


def _raise_alpha(alpha: float, factor: float) -> float:
    # alpha = 0 has no multiplicative successor; start at the bottom of the grid
    return _grid_above(alpha * factor) if alpha > 0 else ALPHA_GRID[0]


def advise_alpha(history, factor: float = 10.0, reg_floor: float = REG_FLOOR,
                 reg_tol: float = 0.1) -> Recommendation:
    """Alpha advice from a history of diagnosed runs.

    Decrease when a run stayed overfitting after a capacity-decreasing
    correction and the smallest alpha tried is still overfitting. Increase
    when a run diverged, or when the regularizer stayed at or above
    ``reg_floor`` and a capacity-increasing rerun at the same alpha did not
    lower it by more than ``reg_tol`` (relative). Overfitting is checked
    first, so the two never fire together.
    """
    trials = [t if isinstance(t, AlphaTrial) else AlphaTrial.from_dict(t) for t in history]
    if not trials:
        raise ValueError("empty history")
    overfit = [t for t in trials if t.diagnosis.verdict == "overfitting"]
    corrected = [t for t in overfit if CAPACITY_DECREASING & set(t.corrections)]
    smallest = min(t.alpha for t in trials)
    at_smallest = [t for t in trials if t.alpha == smallest]
    if smallest > 0 and corrected and any(t.diagnosis.verdict == "overfitting" for t in at_smallest):
        new = _grid_below(smallest / factor)
        if new >= smallest:
            new = smallest / factor
        return Recommendation("decrease_alpha", new, GUIDELINE_ALPHA_DOWN)

    latest = trials[-1]
    if latest.diagnosis.verdict == "alpha_too_small":
        return Recommendation("increase_alpha", _raise_alpha(latest.alpha, factor), GUIDELINE_ALPHA_UP)
    same = [t for t in trials if t.alpha == latest.alpha and t.final_cql_reg is not None]
    base = [t for t in same if not CAPACITY_INCREASING & set(t.corrections)]
    bigger = [t for t in same if CAPACITY_INCREASING & set(t.corrections)]
    if base and bigger:
        r0, r1 = base[0].final_cql_reg, bigger[-1].final_cql_reg
        if r0 >= reg_floor and r1 >= reg_floor and r1 >= r0 - reg_tol * abs(r0):
            return Recommendation("increase_alpha", _raise_alpha(latest.alpha, factor), GUIDELINE_ALPHA_UP)
    return Recommendation("keep_alpha", latest.alpha, "no alpha change indicated")


def recommend(diagnosis: Diagnosis, cfg: CqlConfig | None = None) -> list:
    """Next steps for a verdict; select_checkpoint only for overfitting or healthy runs."""
    v = diagnosis.verdict
    if v == "overfitting":
        return [Recommendation("select_checkpoint", diagnosis.peak_step, GUIDELINE_SELECT),
                Recommendation("add_capacity_decreasing_reg", "vib", GUIDELINE_OVERFIT)]
    if v == "healthy":
        return [Recommendation("select_checkpoint", None, GUIDELINE_SELECT)]
    if v == "underfitting":
        recs = [Recommendation("add_capacity_increasing", "dr3", GUIDELINE_UNDERFIT)]
        if cfg is not None and cfg.critic_tier in TIER_ORDER[:-1]:
            nxt = TIER_ORDER[TIER_ORDER.index(cfg.critic_tier) + 1]
            recs.append(Recommendation("rerun_with_capacity_tier", nxt, GUIDELINE_UNDERFIT))
        return recs
    if v == "alpha_too_small":
        return [Recommendation("increase_alpha", None, GUIDELINE_ALPHA_UP)]
    if v == "alpha_too_large":
        return [Recommendation("decrease_alpha", None, GUIDELINE_ALPHA_DOWN)]
    return []


def capacity_probe_plan(base_cfg: CqlConfig, dr3_beta: float = 0.01) -> list:
    """Base config, the next capacity tier up (critic and policy) and a DR3 variant."""
    plan = [base_cfg]
    tier = base_cfg.critic_tier
    if tier in TIER_ORDER and tier != TIER_ORDER[-1]:
        nxt = TIER_ORDER[TIER_ORDER.index(tier) + 1]
        plan.append(base_cfg.replace(critic_tier=nxt, policy_tier=nxt))
    plan.append(base_cfg.replace(dr3_beta=base_cfg.dr3_beta or dr3_beta))
    return plan


__all__ = [
    "ALPHA_GRID", "REG_FLOOR", "AlphaTrial", "BracConfig", "Diagnosis", "Recommendation",
    "TrendAnalysis", "advise_alpha", "capacity_probe_plan", "detect_overfitting", "detect_underfitting",
    "diagnose_run", "moving_average", "q_series_for", "qvalue_error_bound", "recommend",
    "select_checkpoint", "select_from_log",
]
