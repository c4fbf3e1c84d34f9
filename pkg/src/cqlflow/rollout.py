"""Backend selection for the rollout kernels.

The compiled extension is used when it was built; otherwise the numpy
fallback is used. Set ``CQLFLOW_PURE_PYTHON=1`` to force the fallback.
"""

import os

import numpy as np

from . import _rollout_py

_compiled = None
if not os.environ.get("CQLFLOW_PURE_PYTHON"):
    try:
        from . import _rollout as _compiled
    except ImportError:  # extension not built
        _compiled = None

BACKEND = "cython" if _compiled is not None else "python"
_impl = _compiled if _compiled is not None else _rollout_py


def get_backend(name: str | None = None):
    """Kernel module by name ("cython" / "python"); default is the active one."""
    if name is None:
        return _impl
    if name == "python":
        return _rollout_py
    if name == "cython":
        if _compiled is None:
            raise ImportError("compiled rollout extension is not available")
        return _compiled
    raise ValueError(f"unknown backend {name!r}")


def sample_trajectories(trans_cdf, policy_cdf, init_cdf, reward, terminal, u_init, u, backend=None):
    k = get_backend(backend)
    return k.sample_trajectories(
        np.ascontiguousarray(trans_cdf, dtype=float),
        np.ascontiguousarray(policy_cdf, dtype=float),
        np.ascontiguousarray(init_cdf, dtype=float),
        np.ascontiguousarray(reward, dtype=float),
        np.ascontiguousarray(terminal, dtype=np.uint8),
        np.ascontiguousarray(u_init, dtype=float),
        np.ascontiguousarray(u, dtype=float),
    )


def geometric_returns(trans_cdf, policy_cdf, init_cdf, reward, gamma, u, backend=None):
    k = get_backend(backend)
    return k.geometric_returns(
        np.ascontiguousarray(trans_cdf, dtype=float),
        np.ascontiguousarray(policy_cdf, dtype=float),
        np.ascontiguousarray(init_cdf, dtype=float),
        np.ascontiguousarray(reward, dtype=float),
        float(gamma),
        np.ascontiguousarray(u, dtype=float),
    )
