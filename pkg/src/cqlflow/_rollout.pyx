# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled rollout kernels; semantics mirror ``_rollout_py``."""

import numpy as np
cimport numpy as cnp

cnp.import_array()


cdef inline Py_ssize_t _draw(const double[:] cdf, double x) noexcept nogil:
    cdef Py_ssize_t n = cdf.shape[0]
    cdef Py_ssize_t j = 0
    while j < n - 1 and x >= cdf[j]:
        j += 1
    return j


def sample_trajectories(const double[:, :, :] trans_cdf, const double[:, :] policy_cdf,
                        const double[:] init_cdf, const double[:, :] reward,
                        const unsigned char[:] terminal, const double[:] u_init,
                        const double[:, :, :] u):
    cdef Py_ssize_t n_traj = u.shape[0]
    cdef Py_ssize_t horizon = u.shape[1]
    cdef Py_ssize_t cap = n_traj * horizon
    out_s = np.empty(cap, dtype=np.int64)
    out_a = np.empty(cap, dtype=np.int64)
    out_r = np.empty(cap, dtype=np.float64)
    out_s2 = np.empty(cap, dtype=np.int64)
    out_done = np.empty(cap, dtype=np.uint8)
    out_traj = np.empty(cap, dtype=np.int64)
    cdef long long[:] vs = out_s
    cdef long long[:] va = out_a
    cdef double[:] vr = out_r
    cdef long long[:] vs2 = out_s2
    cdef unsigned char[:] vd = out_done
    cdef long long[:] vt = out_traj
    cdef Py_ssize_t i, t, s, a, s2, k = 0
    with nogil:
        for i in range(n_traj):
            s = _draw(init_cdf, u_init[i])
            for t in range(horizon):
                a = _draw(policy_cdf[s], u[i, t, 0])
                s2 = _draw(trans_cdf[s, a], u[i, t, 1])
                vs[k] = s
                va[k] = a
                vr[k] = reward[s, a]
                vs2[k] = s2
                vd[k] = terminal[s2]
                vt[k] = i
                k += 1
                if terminal[s2]:
                    break
                s = s2
    return (out_s[:k].copy(), out_a[:k].copy(), out_r[:k].copy(), out_s2[:k].copy(),
            out_done[:k].astype(bool), out_traj[:k].copy())


def geometric_returns(const double[:, :, :] trans_cdf, const double[:, :] policy_cdf,
                      const double[:] init_cdf, const double[:, :] reward, double gamma,
                      const double[:, :] u):
    cdef Py_ssize_t n = u.shape[0]
    out = np.empty(n, dtype=np.float64)
    cdef double[:] vo = out
    cdef Py_ssize_t i, a, s = -1, k = 0
    cdef double total = 0.0
    with nogil:
        for i in range(n):
            if s < 0:
                s = _draw(init_cdf, u[i, 0])
                total = 0.0
            a = _draw(policy_cdf[s], u[i, 1])
            total += reward[s, a]
            if u[i, 3] >= gamma:
                vo[k] = total
                k += 1
                s = -1
            else:
                s = _draw(trans_cdf[s, a], u[i, 2])
    return out[:k].copy()
