# cython: language_level=3
"""Compiled cell kernels; same contracts as ``_kernels_py``."""
import numpy as np
cimport numpy as cnp
from libc.math cimport fabs
from libc.stdlib cimport malloc, free

cnp.import_array()

NAME = "cython"


def envelope_argmin(B, double tie=1e-12):
    cdef const double[:, ::1] b = np.ascontiguousarray(B, dtype=np.float64)
    cdef Py_ssize_t N = b.shape[0], M = b.shape[1], i, j
    act = np.zeros(N, dtype=np.intp)
    flag = np.zeros(N, dtype=np.uint8)
    cdef Py_ssize_t[::1] a = act
    cdef unsigned char[::1] f = flag
    cdef double m
    cdef int cnt
    for i in range(N):
        m = b[i, 0]
        for j in range(1, M):
            if b[i, j] < m:
                m = b[i, j]
        cnt = 0
        a[i] = -1
        for j in range(M):
            if b[i, j] <= m + tie:
                cnt += 1
                if a[i] < 0:
                    a[i] = j
        f[i] = cnt > 1
    return act, flag.astype(bool)


cdef inline double _interval(double* D, double* E, int k, double hw) nogil:
    cdef double lo = -hw, hi = hw, r
    cdef int c
    for c in range(k):
        r = -D[c] / E[c]
        if E[c] > 0:
            if r < hi:
                hi = r
        else:
            if r > lo:
                lo = r
    if hi <= lo:
        return 0.0
    return (hi - lo) / (2.0 * hw)


cdef double _polygon(double* D, double* E, int k, double h0, double h1,
                     double* px, double* py, double* qx, double* qy) nogil:
    cdef int nv = 4, nout, v, c
    cdef double fp, fq, lam, acc
    cdef double* tx
    cdef double* ty
    px[0] = -h0; py[0] = -h1
    px[1] = h0; py[1] = -h1
    px[2] = h0; py[2] = h1
    px[3] = -h0; py[3] = h1
    for c in range(k):
        nout = 0
        for v in range(nv):
            fp = D[c] + E[2 * c] * px[v] + E[2 * c + 1] * py[v]
            fq = D[c] + E[2 * c] * px[(v + 1) % nv] + E[2 * c + 1] * py[(v + 1) % nv]
            if fp <= 0:
                qx[nout] = px[v]; qy[nout] = py[v]
                nout += 1
            if (fp < 0 and fq > 0) or (fq < 0 and fp > 0):
                lam = fp / (fp - fq)
                qx[nout] = px[v] + lam * (px[(v + 1) % nv] - px[v])
                qy[nout] = py[v] + lam * (py[(v + 1) % nv] - py[v])
                nout += 1
        nv = nout
        if nv < 3:
            return 0.0
        tx = px; px = qx; qx = tx
        ty = py; py = qy; qy = ty
    acc = 0.0
    for v in range(nv):
        acc += px[v] * py[(v + 1) % nv] - px[(v + 1) % nv] * py[v]
    return 0.5 * fabs(acc) / (4.0 * h0 * h1)


cdef double _fraction(const double[:, ::1] b, const double[:, :, ::1] g, const double* hw,
                      Py_ssize_t i, Py_ssize_t j, double tie,
                      double* D, double* E, double* px, double* py, double* qx, double* qy) nogil:
    cdef Py_ssize_t M = b.shape[1], n = g.shape[2], l, k
    cdef int ncut = 0
    cdef double d, reach, e
    for l in range(M):
        if l == j:
            continue
        d = b[i, j] - b[i, l]
        reach = 0.0
        for k in range(n):
            reach += hw[k] * fabs(g[i, j, k] - g[i, l, k])
        if reach <= tie:
            if d > tie or (fabs(d) <= tie and l < j):
                return 0.0
            continue
        if d - reach >= 0:
            return 0.0
        if d + reach <= 0:
            continue
        D[ncut] = d
        for k in range(n):
            E[n * ncut + k] = g[i, j, k] - g[i, l, k]
        ncut += 1
    if ncut == 0:
        return 1.0
    if n == 1:
        return _interval(D, E, ncut, hw[0])
    return _polygon(D, E, ncut, hw[0], hw[1], px, py, qx, qy)


cdef class _Work:
    cdef double* buf
    cdef Py_ssize_t M

    def __cinit__(self, Py_ssize_t M):
        self.M = M
        self.buf = <double*> malloc(sizeof(double) * (3 * M + 4 * (2 * M + 8)))
        if self.buf == NULL:
            raise MemoryError()

    def __dealloc__(self):
        free(self.buf)


def cell_fractions(B, G, hw, double tie=1e-12):
    cdef const double[:, ::1] b = np.ascontiguousarray(B, dtype=np.float64)
    cdef const double[:, :, ::1] g = np.ascontiguousarray(G, dtype=np.float64)
    cdef const double[::1] h = np.ascontiguousarray(hw, dtype=np.float64)
    cdef Py_ssize_t N = b.shape[0], M = b.shape[1], i, j
    out = np.empty((N, M))
    cdef double[:, ::1] o = out
    cdef _Work w = _Work(M)
    cdef Py_ssize_t V = 2 * M + 8
    cdef double* D = w.buf
    cdef double* E = w.buf + M
    cdef double* poly = w.buf + 3 * M
    with nogil:
        for i in range(N):
            for j in range(M):
                o[i, j] = _fraction(b, g, &h[0], i, j, tie, D, E, poly, poly + V, poly + 2 * V, poly + 3 * V)
    return out


def atom_mass(B, G, hw, mass, Py_ssize_t j, double tie=1e-12):
    cdef const double[:, ::1] b = np.ascontiguousarray(B, dtype=np.float64)
    cdef const double[:, :, ::1] g = np.ascontiguousarray(G, dtype=np.float64)
    cdef const double[::1] h = np.ascontiguousarray(hw, dtype=np.float64)
    cdef const double[::1] m = np.ascontiguousarray(mass, dtype=np.float64)
    cdef Py_ssize_t N = b.shape[0], M = b.shape[1], i
    cdef _Work w = _Work(M)
    cdef Py_ssize_t V = 2 * M + 8
    cdef double* D = w.buf
    cdef double* E = w.buf + M
    cdef double* poly = w.buf + 3 * M
    cdef double acc = 0.0
    with nogil:
        for i in range(N):
            acc += m[i] * _fraction(b, g, &h[0], i, j, tie, D, E, poly, poly + V, poly + 2 * V, poly + 3 * V)
    return acc


def nearest_atom(points, atoms):
    cdef const double[:, ::1] p = np.ascontiguousarray(points, dtype=np.float64)
    cdef const double[:, ::1] a = np.ascontiguousarray(atoms, dtype=np.float64)
    cdef Py_ssize_t N = p.shape[0], M = a.shape[0], n = p.shape[1], i, j, k
    out = np.zeros(N, dtype=np.intp)
    cdef Py_ssize_t[::1] o = out
    cdef double best, d, t
    with nogil:
        for i in range(N):
            best = 1e300
            for j in range(M):
                d = 0.0
                for k in range(n):
                    t = p[i, k] - a[j, k]
                    d += t * t
                if d < best:
                    best = d
                    o[i] = j
    return out
