"""Closed-form divergences and small numeric primitives."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

_SIMPLEX_TOL = 1e-12


class SupportError(ValueError):
    """Raised when p puts mass where q has none."""


@dataclass(frozen=True)
class Categorical:
    probs: np.ndarray

    def __post_init__(self):
        p = np.asarray(self.probs, dtype=float)
        if p.ndim != 1 or p.size == 0:
            raise ValueError("probs must be a non-empty vector")
        if np.any(p < 0) or abs(p.sum() - 1.0) > _SIMPLEX_TOL * max(1, p.size):
            raise ValueError(f"not a probability vector: {p}")
        object.__setattr__(self, "probs", p)


@dataclass(frozen=True)
class DiagGaussian:
    mean: np.ndarray
    var: np.ndarray

    def __post_init__(self):
        mean = np.asarray(self.mean, dtype=float)
        var = np.asarray(self.var, dtype=float)
        if mean.shape != var.shape:
            raise ValueError("mean and var shapes differ")
        if np.any(var <= 0):
            raise ValueError("variances must be positive")
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "var", var)

    @classmethod
    def from_logvar(cls, mean, logvar):
        return cls(mean, np.exp(logvar))


def _as_probs(x) -> np.ndarray:
    return x.probs if isinstance(x, Categorical) else Categorical(x).probs


def _check_support(p: np.ndarray, q: np.ndarray) -> None:
    if p.shape != q.shape:
        raise ValueError("distributions have different sizes")
    bad = (p > 0) & (q <= 0)
    if np.any(bad):
        raise SupportError(f"p has mass outside support of q at {np.flatnonzero(bad).tolist()}")


def d_cql(p, q) -> float:
    """sum_x p(x) * (p(x)/q(x) - 1); a chi-square style divergence."""
    p, q = _as_probs(p), _as_probs(q)
    _check_support(p, q)
    m = p > 0
    return float(np.sum(p[m] * (p[m] / q[m] - 1.0)))


def kl_categorical(p, q) -> float:
    p, q = _as_probs(p), _as_probs(q)
    _check_support(p, q)
    m = p > 0
    return float(np.sum(p[m] * (np.log(p[m]) - np.log(q[m]))))


def kl_gauss_to_std(g: DiagGaussian) -> float:
    """KL(N(mean, diag(var)) || N(0, I))."""
    return float(0.5 * np.sum(g.var + g.mean**2 - 1.0 - np.log(g.var)))


def kl_gauss_to_std_grad(mean, logvar):
    """Gradient of the standard-normal KL w.r.t. (mean, logvar)."""
    mean = np.asarray(mean, dtype=float)
    logvar = np.asarray(logvar, dtype=float)
    return mean.copy(), 0.5 * (np.exp(logvar) - 1.0)


def log_sum_exp(values, axis=None):
    """Max-shifted log(sum(exp(values))).

    With ``axis=None`` the input must be a non-empty vector and a float is
    returned; otherwise the reduction runs along ``axis`` of an array.
    """
    v = np.asarray(values, dtype=float)
    if v.size == 0:
        raise ValueError("log_sum_exp of an empty vector")
    if not np.all(np.isfinite(v)):
        raise ValueError("log_sum_exp requires finite inputs")
    if axis is None:
        m = v.max()
        return float(m + np.log(np.sum(np.exp(v - m))))
    m = v.max(axis=axis, keepdims=True)
    out = m + np.log(np.sum(np.exp(v - m), axis=axis, keepdims=True))
    return np.squeeze(out, axis=axis)


def softmax(logits, axis=-1):
    z = np.asarray(logits, dtype=float)
    z = z - z.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def log_softmax(logits, axis=-1):
    z = np.asarray(logits, dtype=float)
    z = z - z.max(axis=axis, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=axis, keepdims=True))
