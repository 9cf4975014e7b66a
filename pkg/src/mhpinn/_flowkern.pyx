# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled flow density-gradient kernel (same contract as ``_flowkern_py``)."""
import numpy as np
cimport numpy as cnp
from libc.math cimport exp, tanh, log, M_PI
from scipy.linalg.cython_blas cimport dgemv

cnp.import_array()


cdef inline void matvec(char trans, double[:, ::1] W, double* x, double* y, double beta) noexcept nogil:
    # W is C-ordered (r, c); BLAS sees its transpose (c, r) in column-major order.
    # trans='N': y = W.T @ x (length c); trans='T': y = W @ x (length r).
    cdef int m = W.shape[1]
    cdef int n = W.shape[0]
    cdef int inc = 1
    cdef double one = 1.0
    dgemv(&trans, &m, &n, &one, &W[0, 0], &m, x, &inc, &beta, y, &inc)


def flow_logp_grad(pk, h):
    cdef double[:, :, ::1] W1 = pk.W1
    cdef double[:, ::1] b1 = pk.b1
    cdef double[:, :, ::1] W2 = pk.W2
    cdef double[:, ::1] b2 = pk.b2
    cdef double[:, :, ::1] W3 = pk.W3
    cdef double[:, ::1] b3 = pk.b3
    cdef double[::1] mean = pk.mean
    cdef double[::1] std = pk.std
    cdef double[::1] hv = np.ascontiguousarray(h, dtype=np.float64)
    cdef Py_ssize_t K = W1.shape[0], D = W1.shape[1], H1 = W1.shape[2], H2 = W2.shape[2]
    cdef Py_ssize_t k, i
    if hv.shape[0] != D:
        raise ValueError(f"expected dimension {D}, got {hv.shape[0]}")
    # per-stage buffers: x (stage input), pre-activations, s, z
    cdef double[:, ::1] X = np.empty((K + 1, D))
    cdef double[:, ::1] A1 = np.empty((K, H1))
    cdef double[:, ::1] A2 = np.empty((K, H2))
    cdef double[:, ::1] S = np.empty((K, D))
    cdef double[:, ::1] Z = np.empty((K, D))
    cdef double[:, ::1] H1b = np.empty((K, H1))
    cdef double[:, ::1] H2b = np.empty((K, H2))
    cdef double[::1] out = np.empty(2 * D)
    cdef double[::1] go = np.empty(2 * D)
    cdef double[::1] gh1 = np.empty(H1)
    cdef double[::1] gh2 = np.empty(H2)
    cdef double[::1] gz = np.empty(D)
    cdef double[::1] tmp = np.empty(D)
    cdef double logdet = 0.0, sq = 0.0, logstd = 0.0, e, s
    grad = np.empty(D)
    cdef double[::1] g = grad

    with nogil:
        for i in range(D):
            X[0, i] = (hv[i] - mean[i]) / std[i]
            logstd += log(std[i])
        for k in range(K):
            if k:
                for i in range(D):
                    tmp[i] = X[k, D - 1 - i]
                for i in range(D):
                    X[k, i] = tmp[i]
            for i in range(H1):
                A1[k, i] = b1[k, i]
            matvec(b'N', W1[k], &X[k, 0], &A1[k, 0], 1.0)
            for i in range(H1):
                H1b[k, i] = A1[k, i] if A1[k, i] > 0 else 0.0
            for i in range(H2):
                A2[k, i] = b2[k, i]
            matvec(b'N', W2[k], &H1b[k, 0], &A2[k, 0], 1.0)
            for i in range(H2):
                H2b[k, i] = A2[k, i] if A2[k, i] > 0 else 0.0
            for i in range(2 * D):
                out[i] = b3[k, i]
            matvec(b'N', W3[k], &H2b[k, 0], &out[0], 1.0)
            for i in range(D):
                s = tanh(out[D + i])
                S[k, i] = s
                logdet -= s
                Z[k, i] = (X[k, i] - out[i]) * exp(-s)
                X[k + 1, i] = Z[k, i]
        for i in range(D):
            sq += X[K, i] * X[K, i]
            gz[i] = -X[K, i]
        for k in range(K - 1, -1, -1):
            for i in range(D):
                s = S[k, i]
                e = exp(-s)
                go[i] = -gz[i] * e
                go[D + i] = (-gz[i] * Z[k, i] - 1.0) * (1.0 - s * s)
                gz[i] = gz[i] * e
            matvec(b'T', W3[k], &go[0], &gh2[0], 0.0)
            for i in range(H2):
                if A2[k, i] <= 0:
                    gh2[i] = 0.0
            matvec(b'T', W2[k], &gh2[0], &gh1[0], 0.0)
            for i in range(H1):
                if A1[k, i] <= 0:
                    gh1[i] = 0.0
            matvec(b'T', W1[k], &gh1[0], &gz[0], 1.0)
            if k:
                for i in range(D):
                    tmp[i] = gz[D - 1 - i]
                for i in range(D):
                    gz[i] = tmp[i]
        for i in range(D):
            g[i] = gz[i] / std[i]
    logp = -0.5 * sq - 0.5 * D * log(2 * M_PI) + logdet - logstd
    return logp, grad
