"""Small multilayer perceptrons with hand-written backprop.

Everything works on batches: inputs are ``[batch, input_dim]`` arrays and
weights are stored as ``[fan_in, fan_out]`` so a layer is ``x @ W + b``.
A train-mode forward pass returns a :class:`ForwardPass` that records the
dropout masks and VIB noise it used, so :meth:`Mlp.backward` reproduces the
exact computation.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

CHECKPOINT_FORMAT = "cqlflow.checkpoint"
CHECKPOINT_VERSION = 1

# Ordered capacity knob standing in for conv/ResNet architectures.
CAPACITY_TIERS = {
    "small": (16,),
    "medium": (64, 64),
    "large": (128, 128, 128),
}
TIER_ORDER = ("small", "medium", "large")


@dataclass(frozen=True)
class MlpSpec:
    input_dim: int
    hidden_widths: tuple[int, ...]
    output_dim: int
    activation: str = "relu"
    dropout_p: float = 0.0
    vib_enabled: bool = False
    vib_dim: int = 0

    def __post_init__(self):
        object.__setattr__(self, "hidden_widths", tuple(int(w) for w in self.hidden_widths))
        if self.input_dim < 1 or self.output_dim < 1:
            raise ValueError("input_dim and output_dim must be >= 1")
        if not self.hidden_widths or min(self.hidden_widths) < 1:
            raise ValueError("hidden widths must be >= 1")
        if self.activation not in ("relu", "tanh"):
            raise ValueError(f"unknown activation {self.activation!r}")
        if not 0.0 <= self.dropout_p < 1.0:
            raise ValueError("dropout_p must lie in [0, 1)")
        if self.vib_enabled and self.vib_dim < 1:
            object.__setattr__(self, "vib_dim", self.hidden_widths[-1])

    @property
    def feature_dim(self) -> int:
        return self.vib_dim if self.vib_enabled else self.hidden_widths[-1]

    def to_dict(self) -> dict:
        d = asdict(self)
        d["hidden_widths"] = list(self.hidden_widths)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "MlpSpec":
        return cls(**d)


@dataclass
class VibHead:
    mean_out: np.ndarray
    logvar_out: np.ndarray
    sampled: np.ndarray
    noise: np.ndarray | None
    kl: np.ndarray  # per-sample KL to N(0, I)


@dataclass
class ForwardPass:
    output: np.ndarray
    features: np.ndarray
    vib: VibHead | None
    mode: str
    version: int
    inputs: list = field(default_factory=list)
    pre_acts: list = field(default_factory=list)
    masks: list = field(default_factory=list)


class StaleRecordingError(RuntimeError):
    pass


def _act(z, kind):
    return np.maximum(z, 0.0) if kind == "relu" else np.tanh(z)


def _act_grad(z, a, kind):
    return (z > 0).astype(z.dtype) if kind == "relu" else 1.0 - a * a


class Mlp:
    def __init__(self, spec: MlpSpec, seed: int | None = 0, params: dict | None = None):
        self.spec = spec
        self.version = 0
        if params is not None:
            self.params = {k: np.array(v, dtype=float) for k, v in params.items()}
            self._check_shapes()
        else:
            self.params = self._init_params(np.random.default_rng(seed))

    def _layer_shapes(self) -> dict:
        s = self.spec
        shapes = {}
        fan_in = s.input_dim
        for i, w in enumerate(s.hidden_widths):
            shapes[f"W{i}"] = (fan_in, w)
            shapes[f"b{i}"] = (w,)
            fan_in = w
        if s.vib_enabled:
            shapes["Wm"] = (fan_in, s.vib_dim)
            shapes["bm"] = (s.vib_dim,)
            shapes["Wv"] = (fan_in, s.vib_dim)
            shapes["bv"] = (s.vib_dim,)
            fan_in = s.vib_dim
        shapes["Wout"] = (fan_in, s.output_dim)
        shapes["bout"] = (s.output_dim,)
        return shapes

    def _init_params(self, rng) -> dict:
        params = {}
        for name, shape in self._layer_shapes().items():
            if name.startswith("W"):
                bound = np.sqrt(6.0 / (shape[0] + shape[1]))
                if name == "Wv":
                    bound *= 0.1
                params[name] = rng.uniform(-bound, bound, size=shape)
            else:
                params[name] = np.zeros(shape)
        return params

    def _check_shapes(self):
        expected = self._layer_shapes()
        if set(expected) != set(self.params):
            raise ValueError(f"parameter names {sorted(self.params)} != {sorted(expected)}")
        for k, shape in expected.items():
            if self.params[k].shape != shape:
                raise ValueError(f"{k}: shape {self.params[k].shape} != {shape}")

    def copy(self) -> "Mlp":
        return Mlp(self.spec, params={k: v.copy() for k, v in self.params.items()})

    def n_params(self) -> int:
        return sum(v.size for v in self.params.values())

    def forward(self, x, mode: str = "eval", rng: np.random.Generator | None = None) -> ForwardPass:
        s = self.spec
        x = np.asarray(x, dtype=float)
        if x.ndim == 1:
            x = x[None, :]
        if x.shape[1] != s.input_dim:
            raise ValueError(f"input dim {x.shape[1]} != {s.input_dim}")
        if mode not in ("train", "eval"):
            raise ValueError(f"unknown mode {mode!r}")
        train = mode == "train"
        needs_rng = train and (s.dropout_p > 0 or s.vib_enabled)
        if needs_rng and rng is None:
            raise ValueError("train-mode forward with dropout/VIB needs an rng")

        rec = ForwardPass(output=None, features=None, vib=None, mode=mode, version=self.version)
        p = self.params
        h = x
        for i in range(len(s.hidden_widths)):
            rec.inputs.append(h)
            z = h @ p[f"W{i}"] + p[f"b{i}"]
            a = _act(z, s.activation)
            rec.pre_acts.append((z, a))
            if train and s.dropout_p > 0:
                mask = (rng.random(a.shape) >= s.dropout_p) / (1.0 - s.dropout_p)
                a = a * mask
                rec.masks.append(mask)
            else:
                rec.masks.append(None)
            h = a
        rec.inputs.append(h)

        if s.vib_enabled:
            mean = h @ p["Wm"] + p["bm"]
            logvar = h @ p["Wv"] + p["bv"]
            kl = 0.5 * np.sum(np.exp(logvar) + mean**2 - 1.0 - logvar, axis=1)
            if train:
                noise = rng.standard_normal(mean.shape)
                feats = mean + np.exp(0.5 * logvar) * noise
            else:
                noise = None
                feats = mean
            rec.vib = VibHead(mean, logvar, feats, noise, kl)
        else:
            feats = h
        rec.features = feats
        rec.output = feats @ p["Wout"] + p["bout"]
        return rec

    def backward(self, rec: ForwardPass, grad_out, grad_features=None, grad_kl=None) -> dict:
        """Parameter gradients of a scalar loss through a recorded pass.

        ``grad_out`` is dLoss/dOutput, ``grad_features`` an optional extra
        dLoss/dFeatures (e.g. from DR3) and ``grad_kl`` dLoss/dKL per sample
        (scalar or ``[batch]``) for the VIB penalty.
        """
        if rec.version != self.version:
            raise StaleRecordingError("parameters changed since this forward pass")
        s = self.spec
        p = self.params
        grads = {}
        grad_out = np.asarray(grad_out, dtype=float)
        feats = rec.features
        grads["Wout"] = feats.T @ grad_out
        grads["bout"] = grad_out.sum(axis=0)
        g = grad_out @ p["Wout"].T
        if grad_features is not None:
            g = g + grad_features

        if s.vib_enabled:
            v = rec.vib
            h = rec.inputs[-1]
            d_mean = g
            if v.noise is not None:
                d_logvar = g * v.noise * 0.5 * np.exp(0.5 * v.logvar_out)
            else:
                d_logvar = np.zeros_like(g)
            if grad_kl is not None:
                gk = np.broadcast_to(np.asarray(grad_kl, dtype=float), (g.shape[0],))[:, None]
                d_mean = d_mean + gk * v.mean_out
                d_logvar = d_logvar + gk * 0.5 * (np.exp(v.logvar_out) - 1.0)
            grads["Wm"] = h.T @ d_mean
            grads["bm"] = d_mean.sum(axis=0)
            grads["Wv"] = h.T @ d_logvar
            grads["bv"] = d_logvar.sum(axis=0)
            g = d_mean @ p["Wm"].T + d_logvar @ p["Wv"].T

        for i in reversed(range(len(s.hidden_widths))):
            z, a = rec.pre_acts[i]
            mask = rec.masks[i]
            if mask is not None:
                g = g * mask
            g = g * _act_grad(z, a, s.activation)
            grads[f"W{i}"] = rec.inputs[i].T @ g
            grads[f"b{i}"] = g.sum(axis=0)
            if i > 0:
                g = g @ p[f"W{i}"].T
        return grads

    def __call__(self, x):
        return self.forward(x, mode="eval").output


def add_grads(*grad_dicts) -> dict:
    out = {}
    for gd in grad_dicts:
        for k, v in gd.items():
            out[k] = out[k] + v if k in out else v.copy()
    return out


def dr3_penalty(phi_s, phi_s2):
    """Mean of |phi(s) . phi(s')| over a batch, with its gradients.

    Returns ``(value, grad_phi_s, grad_phi_s2)``; the subgradient at an
    exactly zero dot product is 0.
    """
    a = np.atleast_2d(np.asarray(phi_s, dtype=float))
    b = np.atleast_2d(np.asarray(phi_s2, dtype=float))
    if a.shape != b.shape:
        raise ValueError(f"feature shapes differ: {a.shape} vs {b.shape}")
    dots = np.sum(a * b, axis=1)
    n = a.shape[0]
    sgn = np.sign(dots)[:, None] / n
    return float(np.mean(np.abs(dots))), sgn * b, sgn * a


def weight_penalty(net: Mlp, kind: str, rho: float):
    """rho * ||W||_1 or rho * ||W||_2^2 over weight matrices (biases excluded)."""
    if rho < 0:
        raise ValueError("rho must be non-negative")
    if kind not in ("l1", "l2"):
        raise ValueError(f"unknown penalty {kind!r}")
    value = 0.0
    grads = {}
    for name, w in net.params.items():
        if not name.startswith("W"):
            grads[name] = np.zeros_like(w)
            continue
        if kind == "l1":
            value += np.abs(w).sum()
            grads[name] = rho * np.sign(w)
        else:
            value += np.sum(w * w)
            grads[name] = 2.0 * rho * w
    return rho * float(value), grads


@dataclass
class AdamState:
    lr: float = 3e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    clip_norm: float | None = None
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "lr": self.lr, "beta1": self.beta1, "beta2": self.beta2, "eps": self.eps,
            "clip_norm": self.clip_norm, "t": self.t,
            "m": {k: _encode_array(a) for k, a in self.m.items()},
            "v": {k: _encode_array(a) for k, a in self.v.items()},
        }

    @classmethod
    def from_dict(cls, d: dict) -> "AdamState":
        d = dict(d)
        m = {k: _decode_array(a) for k, a in d.pop("m").items()}
        v = {k: _decode_array(a) for k, a in d.pop("v").items()}
        return cls(m=m, v=v, **d)


def optimizer_step(net: Mlp, grads: dict, state: AdamState) -> Mlp:
    """One bias-corrected Adam update, applied in place."""
    for k, g in grads.items():
        if k not in net.params:
            raise KeyError(f"gradient for unknown parameter {k}")
        if g.shape != net.params[k].shape:
            raise ValueError(f"{k}: gradient shape {g.shape} != {net.params[k].shape}")
    if state.clip_norm is not None:
        norm = np.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
        if norm > state.clip_norm:
            grads = {k: g * (state.clip_norm / norm) for k, g in grads.items()}
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**state.t
    c2 = 1.0 - b2**state.t
    for k, g in grads.items():
        m = state.m.get(k)
        if m is None:
            m = state.m[k] = np.zeros_like(g)
            state.v[k] = np.zeros_like(g)
        v = state.v[k]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        net.params[k] -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    net.version += 1
    return net


def _encode_array(a: np.ndarray) -> dict:
    a = np.asarray(a, dtype=float)
    return {"shape": list(a.shape), "data": a.ravel().tolist()}


def _decode_array(d: dict) -> np.ndarray:
    return np.asarray(d["data"], dtype=float).reshape(d["shape"])


def save_checkpoint(path, net: Mlp, opt_state: AdamState | None = None, step: int = 0,
                    meta: dict | None = None) -> Path:
    path = Path(path)
    doc = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "spec": net.spec.to_dict(),
        "step": int(step),
        "meta": meta or {},
        "params": {k: _encode_array(v) for k, v in net.params.items()},
        "optimizer": opt_state.to_dict() if opt_state is not None else None,
    }
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(doc))
    return path


def load_checkpoint(path):
    """Returns ``(net, opt_state_or_None, step, meta)``."""
    doc = json.loads(Path(path).read_text())
    if doc.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"{path}: not a checkpoint file")
    if doc.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {doc.get('version')}")
    spec = MlpSpec.from_dict(doc["spec"])
    net = Mlp(spec, params={k: _decode_array(v) for k, v in doc["params"].items()})
    opt = AdamState.from_dict(doc["optimizer"]) if doc.get("optimizer") else None
    return net, opt, doc["step"], doc.get("meta", {})
