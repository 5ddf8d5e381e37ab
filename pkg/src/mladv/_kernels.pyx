# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled hot kernels. Same signatures and semantics as ``_kernels_py``."""

import numpy as np

from libc.math cimport exp, tanh, sqrt, pow, INFINITY, isnan, NAN
from libc.string cimport memcpy, memset
from scipy.linalg.cython_blas cimport dgemv

DEF ACT_IDENTITY = 0
DEF ACT_SIGMOID = 1
DEF ACT_RELU = 2
DEF ACT_TANH = 3
DEF DIST_SQUARED = 0
DEF SELECT_COUNT = 0
DEF OPT_ADAM = 1
DEF OPT_NORMALIZED = 2
DEF ADAM_BETA1 = 0.9
DEF ADAM_BETA2 = 0.999
DEF ADAM_EPS = 1e-8
DEF TAU_UNDEFINED = -2.0


cdef struct Net:
    int nl
    const long long* dims
    const int* acts
    double* params
    long long* p_off      # start of each layer's weights in params
    long long* a_off      # start of each layer's input in the activation buffer
    int max_dim


cdef inline double _sigmoid(double z) noexcept nogil:
    cdef double e
    if z >= 0:
        return 1.0 / (1.0 + exp(-z))
    e = exp(z)
    return e / (1.0 + e)


cdef inline double _dact(double a, int code) noexcept nogil:
    if code == ACT_SIGMOID:
        return a * (1.0 - a)
    if code == ACT_RELU:
        return 1.0 if a > 0.0 else 0.0
    if code == ACT_TANH:
        return 1.0 - a * a
    return 1.0


cdef void _forward(Net* net, double* buf) noexcept nogil:
    """``buf[a_off[0]:]`` holds the input; fills every layer's output."""
    cdef int k, n_in, n_out, i, code
    cdef double one = 1.0
    cdef int inc = 1
    cdef double* W
    cdef double* x
    cdef double* out
    for k in range(net.nl):
        n_in = <int>net.dims[k]
        n_out = <int>net.dims[k + 1]
        W = net.params + net.p_off[k]
        x = buf + net.a_off[k]
        out = buf + net.a_off[k + 1]
        memcpy(out, W + n_in * n_out, n_out * sizeof(double))
        dgemv("T", &n_in, &n_out, &one, W, &n_in, x, &inc, &one, out, &inc)
        code = net.acts[k]
        if code == ACT_SIGMOID:
            for i in range(n_out):
                out[i] = _sigmoid(out[i])
        elif code == ACT_RELU:
            for i in range(n_out):
                if out[i] < 0.0:
                    out[i] = 0.0
        elif code == ACT_TANH:
            for i in range(n_out):
                out[i] = tanh(out[i])


cdef void _backward(Net* net, const double* buf, double* cot, double* tmp,
                    double* grad_x) noexcept nogil:
    """Overwrites ``cot`` and ``tmp``; writes ``J^T cot`` into ``grad_x``."""
    cdef int k, i, n_in, n_out
    cdef double one = 1.0
    cdef double zero = 0.0
    cdef int inc = 1
    cdef double* delta = cot
    cdef double* g
    cdef double* swap
    cdef const double* a
    n_out = <int>net.dims[net.nl]
    a = buf + net.a_off[net.nl]
    for i in range(n_out):
        delta[i] = delta[i] * _dact(a[i], net.acts[net.nl - 1])
    for k in range(net.nl - 1, -1, -1):
        n_in = <int>net.dims[k]
        n_out = <int>net.dims[k + 1]
        g = grad_x if k == 0 else tmp
        dgemv("N", &n_in, &n_out, &one, net.params + net.p_off[k], &n_in,
              delta, &inc, &zero, g, &inc)
        if k > 0:
            a = buf + net.a_off[k]
            for i in range(n_in):
                g[i] = g[i] * _dact(a[i], net.acts[k - 1])
            swap = delta
            delta = g
            tmp = swap


cdef class _Workspace:
    cdef object dims_arr, acts_arr, params_arr, poff_arr, aoff_arr
    cdef public object buf, cot, tmp, gx
    cdef Net net

    def __cinit__(self, dims, acts, params):
        cdef long long[::1] poff, aoff
        cdef int k, nl
        self.dims_arr = np.ascontiguousarray(dims, dtype=np.int64)
        self.acts_arr = np.ascontiguousarray(acts, dtype=np.int32)
        self.params_arr = np.array(params, dtype=np.float64, copy=True, order="C")
        nl = len(self.acts_arr)
        if len(self.dims_arr) != nl + 1:
            raise ValueError("dims/acts length mismatch")
        self.poff_arr = np.zeros(nl + 1, dtype=np.int64)
        self.aoff_arr = np.zeros(nl + 1, dtype=np.int64)
        poff = self.poff_arr
        aoff = self.aoff_arr
        for k in range(nl):
            poff[k + 1] = poff[k] + self.dims_arr[k] * self.dims_arr[k + 1] + self.dims_arr[k + 1]
            aoff[k + 1] = aoff[k] + self.dims_arr[k]
        if poff[nl] != len(self.params_arr):
            raise ValueError("params length does not match dims")
        max_dim = int(np.max(self.dims_arr))
        self.buf = np.zeros(aoff[nl] + self.dims_arr[nl])
        self.cot = np.zeros(max_dim)
        self.tmp = np.zeros(max_dim)
        self.gx = np.zeros(self.dims_arr[0])
        self._bind()

    cdef void _bind(self):
        cdef const long long[::1] dims = self.dims_arr
        cdef const int[::1] acts = self.acts_arr
        cdef double[::1] params = self.params_arr
        cdef long long[::1] poff = self.poff_arr
        cdef long long[::1] aoff = self.aoff_arr
        self.net.nl = len(self.acts_arr)
        self.net.dims = &dims[0]
        self.net.acts = &acts[0]
        self.net.params = &params[0]
        self.net.p_off = &poff[0]
        self.net.a_off = &aoff[0]
        self.net.max_dim = len(self.cot)


cdef double _objective_terms(const double* s, int l, const double* r, int d,
                             int dist_kind, double lam,
                             const long long* hidx, const double* hsign, const double* hc, int nh,
                             const long long* tptr, const long long* tidx, int nt,
                             double* g_s, double* g_r) noexcept nogil:
    cdef int i, k, t, j, amax, amin
    cdef double sq = 0.0, value, v, emax, emin, e
    for i in range(d):
        sq += r[i] * r[i]
    if dist_kind == DIST_SQUARED:
        value = sq
        for i in range(d):
            g_r[i] = 2.0 * r[i]
    else:
        value = sqrt(sq)
        for i in range(d):
            g_r[i] = r[i] / value if value > 0.0 else 0.0
    memset(g_s, 0, l * sizeof(double))
    for k in range(nh):
        j = <int>hidx[k]
        v = hsign[k] * s[j] - hc[k]
        if v > 0.0:
            value += lam * v
            g_s[j] += lam * hsign[k]
    for t in range(nt):
        if tptr[2 * t + 1] == tptr[2 * t] or tptr[2 * t + 2] == tptr[2 * t + 1]:
            continue
        amax = -1
        emax = -INFINITY
        for k in range(<int>tptr[2 * t], <int>tptr[2 * t + 1]):
            e = exp(s[tidx[k]])
            if e > emax:
                emax = e
                amax = <int>tidx[k]
        amin = -1
        emin = INFINITY
        for k in range(<int>tptr[2 * t + 1], <int>tptr[2 * t + 2]):
            e = exp(s[tidx[k]])
            if e < emin:
                emin = e
                amin = <int>tidx[k]
        v = emax - emin
        if v > 0.0:
            value += lam * v
            g_s[amax] += lam * emax
            g_s[amin] -= lam * emin
    return value


cdef double _tau_b(const double* u, const double* v, int n) noexcept nogil:
    cdef long long C = 0, D = 0, n1 = 0, n2 = 0, n0, den
    cdef int i, j
    cdef double du, dv
    for i in range(n):
        for j in range(i + 1, n):
            du = u[i] - u[j]
            dv = v[i] - v[j]
            if du == 0.0:
                n1 += 1
            if dv == 0.0:
                n2 += 1
            if du != 0.0 and dv != 0.0:
                if (du > 0.0) == (dv > 0.0):
                    C += 1
                else:
                    D += 1
    n0 = <long long>n * (n - 1) // 2
    den = (n0 - n1) * (n0 - n2)
    if den == 0:
        return NAN
    return (C - D) / sqrt(<double>den)


def _as_f64(a):
    return np.ascontiguousarray(a, dtype=np.float64)


def _as_i64(a):
    return np.ascontiguousarray(a, dtype=np.int64)


def forward(dims, acts, params, x):
    cdef _Workspace ws = _Workspace(dims, acts, params)
    cdef double[::1] buf = ws.buf
    cdef const double[::1] xv = _as_f64(x)
    cdef int d = <int>ws.net.dims[0]
    cdef int l = <int>ws.net.dims[ws.net.nl]
    if xv.shape[0] != d:
        raise ValueError("input length mismatch")
    memcpy(&buf[0], &xv[0], d * sizeof(double))
    with nogil:
        _forward(&ws.net, &buf[0])
    return np.array(ws.buf[ws.net.a_off[ws.net.nl]:ws.net.a_off[ws.net.nl] + l])


def input_vjp(dims, acts, params, x, cot):
    cdef _Workspace ws = _Workspace(dims, acts, params)
    cdef double[::1] buf = ws.buf
    cdef double[::1] cv = ws.cot
    cdef double[::1] tv = ws.tmp
    cdef double[::1] gv = ws.gx
    cdef const double[::1] xv = _as_f64(x)
    cdef const double[::1] cin = _as_f64(cot)
    cdef int d = <int>ws.net.dims[0]
    cdef int l = <int>ws.net.dims[ws.net.nl]
    if xv.shape[0] != d or cin.shape[0] != l:
        raise ValueError("length mismatch")
    memcpy(&buf[0], &xv[0], d * sizeof(double))
    memcpy(&cv[0], &cin[0], l * sizeof(double))
    with nogil:
        _forward(&ws.net, &buf[0])
        _backward(&ws.net, &buf[0], &cv[0], &tv[0], &gv[0])
    off = ws.net.a_off[ws.net.nl]
    return np.array(ws.buf[off:off + l]), np.array(ws.gx)


def objective(dims, acts, params, x_orig, x, int dist_kind, double lam, hinge_idx,
              hinge_sign, hinge_c, term_ptr, term_idx):
    cdef _Workspace ws = _Workspace(dims, acts, params)
    cdef int d = <int>ws.net.dims[0]
    cdef int l = <int>ws.net.dims[ws.net.nl]
    cdef double[::1] buf = ws.buf
    cdef double[::1] cv = ws.cot
    cdef double[::1] tv = ws.tmp
    cdef double[::1] gv = ws.gx
    cdef const double[::1] xo = _as_f64(x_orig)
    cdef const double[::1] xv = _as_f64(x)
    cdef const long long[::1] hidx = _as_i64(hinge_idx) if len(hinge_idx) else np.zeros(1, np.int64)
    cdef const double[::1] hs = _as_f64(hinge_sign) if len(hinge_sign) else np.zeros(1)
    cdef const double[::1] hc = _as_f64(hinge_c) if len(hinge_c) else np.zeros(1)
    cdef const long long[::1] tptr = _as_i64(term_ptr) if len(term_ptr) else np.zeros(1, np.int64)
    cdef const long long[::1] tidx = _as_i64(term_idx) if len(term_idx) else np.zeros(1, np.int64)
    cdef int nh = len(hinge_idx)
    cdef int nt = len(term_ptr) // 2 if len(term_ptr) else 0
    cdef double[::1] r = np.empty(d)
    cdef double[::1] g_r = np.empty(d)
    cdef double value
    cdef int i
    cdef double* s
    memcpy(&buf[0], &xv[0], d * sizeof(double))
    for i in range(d):
        r[i] = xv[i] - xo[i]
    with nogil:
        _forward(&ws.net, &buf[0])
        s = &buf[0] + ws.net.a_off[ws.net.nl]
        value = _objective_terms(s, l, &r[0], d, dist_kind, lam, &hidx[0], &hs[0], &hc[0], nh,
                                 &tptr[0], &tidx[0], nt, &cv[0], &g_r[0])
        _backward(&ws.net, &buf[0], &cv[0], &tv[0], &gv[0])
    off = ws.net.a_off[ws.net.nl]
    return value, np.asarray(g_r) + ws.gx, np.array(ws.buf[off:off + l])


def tau_b(u, v):
    cdef const double[::1] uu = _as_f64(u)
    cdef const double[::1] vv = _as_f64(v)
    if uu.shape[0] != vv.shape[0]:
        raise ValueError("length mismatch")
    if uu.shape[0] < 2:
        return float("nan")
    return _tau_b(&uu[0], &vv[0], uu.shape[0])


def descend(dims, acts, params, x_orig, w0, double mid, double half, int dist_kind,
            double lam, hinge_idx, hinge_sign, hinge_c, term_ptr, term_idx,
            int sel_mode, crit, double lr, int max_iter, int optimizer, double rmsd_cap):
    cdef _Workspace ws = _Workspace(dims, acts, params)
    cdef int d = <int>ws.net.dims[0]
    cdef int l = <int>ws.net.dims[ws.net.nl]
    cdef double[::1] buf = ws.buf
    cdef double[::1] cv = ws.cot
    cdef double[::1] tv = ws.tmp
    cdef double[::1] gv = ws.gx
    cdef const double[::1] xo = _as_f64(x_orig)
    cdef double[::1] w = np.array(w0, dtype=np.float64)
    cdef double[::1] th = np.empty(d)
    cdef double[::1] r = np.empty(d)
    cdef double[::1] g_r = np.empty(d)
    cdef double[::1] m = np.zeros(d)
    cdef double[::1] v = np.zeros(d)
    cdef double[::1] best_x = np.empty(d)
    cdef double[::1] best_s = np.empty(l)
    cdef const double[::1] cr = _as_f64(crit) if len(crit) else np.zeros(1)
    cdef const long long[::1] hidx = _as_i64(hinge_idx) if len(hinge_idx) else np.zeros(1, np.int64)
    cdef const double[::1] hs = _as_f64(hinge_sign) if len(hinge_sign) else np.zeros(1)
    cdef const double[::1] hc = _as_f64(hinge_c) if len(hinge_c) else np.zeros(1)
    cdef const long long[::1] tptr = _as_i64(term_ptr) if len(term_ptr) else np.zeros(1, np.int64)
    cdef const long long[::1] tidx = _as_i64(term_idx) if len(term_idx) else np.zeros(1, np.int64)
    cdef int nh = len(hinge_idx)
    cdef int nt = len(term_ptr) // 2 if len(term_ptr) else 0
    cdef int k, i, cnt, best_k = -1
    cdef double sq, rmsd, prim, g, mhat, vhat, b1t, b2t
    cdef double best_prim = -INFINITY, best_rmsd = 0.0
    cdef double* x = &buf[0]
    cdef double* s = &buf[0] + ws.net.a_off[ws.net.nl]
    if xo.shape[0] != d or w.shape[0] != d:
        raise ValueError("input length mismatch")
    if sel_mode != SELECT_COUNT and cr.shape[0] != l:
        raise ValueError("criterion length mismatch")
    with nogil:
        for k in range(max_iter + 1):
            for i in range(d):
                th[i] = tanh(w[i])
            if k == 0:
                memcpy(x, &xo[0], d * sizeof(double))
            else:
                for i in range(d):
                    x[i] = mid + half * th[i]
            _forward(&ws.net, x)
            sq = 0.0
            for i in range(d):
                r[i] = x[i] - xo[i]
                sq += r[i] * r[i]
            rmsd = sqrt(sq / d)
            if rmsd <= rmsd_cap:
                if sel_mode == SELECT_COUNT:
                    cnt = 0
                    for i in range(nh):
                        if hs[i] * s[hidx[i]] <= hc[i]:
                            cnt += 1
                    prim = cnt
                else:
                    prim = _tau_b(s, &cr[0], l)
                    if isnan(prim):
                        prim = TAU_UNDEFINED
                if prim > best_prim or (prim == best_prim and rmsd < best_rmsd):
                    best_prim = prim
                    best_rmsd = rmsd
                    best_k = k
                    memcpy(&best_x[0], x, d * sizeof(double))
                    memcpy(&best_s[0], s, l * sizeof(double))
            if k == max_iter:
                break
            _objective_terms(s, l, &r[0], d, dist_kind, lam, &hidx[0], &hs[0], &hc[0], nh,
                             &tptr[0], &tidx[0], nt, &cv[0], &g_r[0])
            _backward(&ws.net, &buf[0], &cv[0], &tv[0], &gv[0])
            if optimizer == OPT_ADAM:
                b1t = 1.0 - pow(ADAM_BETA1, k + 1)
                b2t = 1.0 - pow(ADAM_BETA2, k + 1)
                for i in range(d):
                    g = (g_r[i] + gv[i]) * half * (1.0 - th[i] * th[i])
                    m[i] = ADAM_BETA1 * m[i] + (1.0 - ADAM_BETA1) * g
                    v[i] = ADAM_BETA2 * v[i] + (1.0 - ADAM_BETA2) * g * g
                    mhat = m[i] / b1t
                    vhat = v[i] / b2t
                    w[i] = w[i] - lr * mhat / (sqrt(vhat) + ADAM_EPS)
            elif optimizer == OPT_NORMALIZED:
                sq = 0.0
                for i in range(d):
                    m[i] = (g_r[i] + gv[i]) * half * (1.0 - th[i] * th[i])
                    sq += m[i] * m[i]
                if sq > 0.0:
                    g = lr * sqrt(d / sq)
                    for i in range(d):
                        w[i] = w[i] - g * m[i]
            else:
                for i in range(d):
                    g = (g_r[i] + gv[i]) * half * (1.0 - th[i] * th[i])
                    w[i] = w[i] - lr * g
    if best_k < 0:
        return None
    return (np.asarray(best_x), np.asarray(best_s), best_prim, best_rmsd, best_k)
