"""Compiled kernels: batched Householder QR and cyclic Jacobi EIG.

Both routines loop over a stack of matrices with the GIL released. Each
matrix is factored independently, so a result never depends on what else
shares the batch.
"""
import numpy as np

from libc.math cimport sqrt, fabs, copysign


cdef void _qr_one(double[:, ::1] a, double[:, ::1] q, double[:, ::1] r,
                  double[:, ::1] hv, double[::1] beta) noexcept nogil:
    cdef Py_ssize_t m = a.shape[0], n = a.shape[1]
    cdef Py_ssize_t i, j, c
    cdef double norm, alpha, s, v0

    for j in range(n):
        norm = 0.0
        for i in range(j, m):
            norm += a[i, j] * a[i, j]
        norm = sqrt(norm)
        for i in range(m):
            hv[i, j] = 0.0
        if norm == 0.0:
            beta[j] = 0.0
            continue
        alpha = -copysign(norm, a[j, j])
        v0 = a[j, j] - alpha
        hv[j, j] = v0
        for i in range(j + 1, m):
            hv[i, j] = a[i, j]
        s = v0 * v0
        for i in range(j + 1, m):
            s += hv[i, j] * hv[i, j]
        beta[j] = 2.0 / s
        for c in range(j, n):
            s = 0.0
            for i in range(j, m):
                s += hv[i, j] * a[i, c]
            s *= beta[j]
            for i in range(j, m):
                a[i, c] -= s * hv[i, j]
        a[j, j] = alpha
        for i in range(j + 1, m):
            a[i, j] = 0.0

    for i in range(n):
        for c in range(n):
            r[i, c] = a[i, c] if c >= i else 0.0

    for i in range(m):
        for c in range(n):
            q[i, c] = 1.0 if i == c else 0.0
    for j in range(n - 1, -1, -1):
        if beta[j] == 0.0:
            continue
        for c in range(j, n):
            s = 0.0
            for i in range(j, m):
                s += hv[i, j] * q[i, c]
            s *= beta[j]
            for i in range(j, m):
                q[i, c] -= s * hv[i, j]

    # positive-diagonal convention
    for j in range(n):
        if r[j, j] < 0.0:
            for c in range(j, n):
                r[j, c] = -r[j, c]
            for i in range(m):
                q[i, j] = -q[i, j]


def qr_batch(x):
    """Thin QR of every matrix in an (N, m, n) stack, m >= n.

    Returns ``(q, r, ratio)`` where ``r`` has a non-negative diagonal and
    ``ratio[k]`` is min|R_ii| / max|R_ii| of matrix k (0 when R vanishes).
    """
    x = np.ascontiguousarray(x, dtype=np.float64)
    cdef Py_ssize_t nb = x.shape[0], m = x.shape[1], n = x.shape[2]
    work_arr = x.copy()
    q_arr = np.empty((nb, m, n))
    r_arr = np.empty((nb, n, n))
    ratio_arr = np.empty(nb)
    hv_arr = np.empty((m, n))
    beta_arr = np.empty(n)
    cdef double[:, :, ::1] work = work_arr
    cdef double[:, :, ::1] qv = q_arr
    cdef double[:, :, ::1] rv = r_arr
    cdef double[::1] ratio = ratio_arr
    cdef double[:, ::1] hv = hv_arr
    cdef double[::1] beta = beta_arr
    cdef Py_ssize_t k, j
    cdef double lo, hi, d
    with nogil:
        for k in range(nb):
            _qr_one(work[k], qv[k], rv[k], hv, beta)
            lo = fabs(rv[k, 0, 0])
            hi = lo
            for j in range(1, n):
                d = fabs(rv[k, j, j])
                if d < lo:
                    lo = d
                if d > hi:
                    hi = d
            ratio[k] = lo / hi if hi > 0.0 else 0.0
    return q_arr, r_arr, ratio_arr


cdef int _jacobi_one(double[:, ::1] a, double[:, ::1] v, double tol,
                     int max_sweeps) noexcept nogil:
    cdef Py_ssize_t n = a.shape[0]
    cdef Py_ssize_t p, qq, k
    cdef double off, on, apq, tau, t, c, s, x, y
    cdef int sweep

    for p in range(n):
        for k in range(n):
            v[p, k] = 1.0 if p == k else 0.0

    for sweep in range(max_sweeps + 1):
        off = 0.0
        on = 0.0
        for p in range(n):
            on += a[p, p] * a[p, p]
            for k in range(p + 1, n):
                off += 2.0 * a[p, k] * a[p, k]
        if sqrt(off) <= tol * sqrt(on):
            return sweep
        if sweep == max_sweeps:
            break
        for p in range(n - 1):
            for qq in range(p + 1, n):
                apq = a[p, qq]
                if apq == 0.0:
                    continue
                tau = (a[qq, qq] - a[p, p]) / (2.0 * apq)
                if fabs(tau) > 1e150:
                    t = 0.5 / tau
                else:
                    t = copysign(1.0, tau) / (fabs(tau) + sqrt(1.0 + tau * tau))
                c = 1.0 / sqrt(1.0 + t * t)
                s = t * c
                for k in range(n):
                    x = a[k, p]
                    y = a[k, qq]
                    a[k, p] = c * x - s * y
                    a[k, qq] = s * x + c * y
                for k in range(n):
                    x = a[p, k]
                    y = a[qq, k]
                    a[p, k] = c * x - s * y
                    a[qq, k] = s * x + c * y
                a[p, qq] = 0.0
                a[qq, p] = 0.0
                for k in range(n):
                    x = v[k, p]
                    y = v[k, qq]
                    v[k, p] = c * x - s * y
                    v[k, qq] = s * x + c * y
    return -1


def eigh_batch(a, double tol=1e-12, int max_sweeps=100):
    """Cyclic Jacobi eigendecomposition of an (N, n, n) stack of symmetric matrices.

    Returns unsorted ``(w, v, sweeps)``; ``sweeps[k]`` is -1 when matrix k
    did not converge within ``max_sweeps``.
    """
    a = np.ascontiguousarray(a, dtype=np.float64)
    cdef Py_ssize_t nb = a.shape[0], n = a.shape[1]
    work_arr = a.copy()
    v_arr = np.empty((nb, n, n))
    w_arr = np.empty((nb, n))
    sweeps_arr = np.empty(nb, dtype=np.intc)
    cdef double[:, :, ::1] work = work_arr
    cdef double[:, :, ::1] vv = v_arr
    cdef double[:, ::1] w = w_arr
    cdef int[::1] sweeps = sweeps_arr
    cdef Py_ssize_t k, i
    with nogil:
        for k in range(nb):
            sweeps[k] = _jacobi_one(work[k], vv[k], tol, max_sweeps)
            for i in range(n):
                w[k, i] = work[k, i, i]
    return w_arr, v_arr, sweeps_arr
