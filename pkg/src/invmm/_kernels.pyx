# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled hot kernels: fused MLP forward/backward and the DDIM loop.

Same signatures and semantics as ``_kernels_py``.  Matrix products go through
scipy's BLAS bindings; bias, SiLU and the DDIM update are fused C loops.
"""
import numpy as np
cimport numpy as cnp
from libc.math cimport exp, sqrt
from scipy.linalg.cython_blas cimport dgemm

cnp.import_array()


cdef inline void _gemm_rm(int m, int n, int k, double* a, double* b, double* c, double beta) noexcept nogil:
    # row-major C(m,n) = A(m,k) @ B(k,n) + beta*C
    cdef char tr = b'N'
    cdef double one = 1.0
    dgemm(&tr, &tr, &n, &m, &k, &one, b, &n, a, &k, &beta, c, &n)


cdef inline void _gemm_at_b(int m, int n, int k, double* a, double* b, double* c) noexcept nogil:
    # C(m,n) = A(k,m)^T @ B(k,n), all row-major
    cdef char tn = b'N'
    cdef char tt = b'T'
    cdef double one = 1.0
    cdef double zero = 0.0
    dgemm(&tn, &tt, &n, &m, &k, &one, b, &n, a, &m, &zero, c, &n)


cdef inline void _gemm_a_bt(int m, int n, int k, double* a, double* b, double* c) noexcept nogil:
    # C(m,n) = A(m,k) @ B(n,k)^T, all row-major
    cdef char tn = b'N'
    cdef char tt = b'T'
    cdef double one = 1.0
    cdef double zero = 0.0
    dgemm(&tt, &tn, &n, &m, &k, &one, b, &k, a, &k, &zero, c, &n)


cdef inline void _bias_silu(double* z, double* h, double* s, double* bias, int rows, int cols) noexcept nogil:
    # flat inner loops so the compiler can vectorize exp
    cdef int i, j
    cdef double* zr
    cdef double* hr
    cdef double* sr
    for i in range(rows):
        zr = z + i * cols
        hr = h + i * cols
        for j in range(cols):
            zr[j] = zr[j] + bias[j]
        if s != NULL:
            sr = s + i * cols
            for j in range(cols):
                sr[j] = 1.0 / (1.0 + exp(-zr[j]))
            for j in range(cols):
                hr[j] = zr[j] * sr[j]
        else:
            for j in range(cols):
                hr[j] = zr[j] / (1.0 + exp(-zr[j]))


cdef inline void _bias(double* z, double* bias, int rows, int cols) noexcept nogil:
    cdef int i, j
    for i in range(rows):
        for j in range(cols):
            z[i * cols + j] += bias[j]


def mlp_forward(x, weights, biases):
    cdef cnp.ndarray[cnp.float64_t, ndim=2, mode="c"] h = np.ascontiguousarray(x, dtype=np.float64)
    cdef cnp.ndarray[cnp.float64_t, ndim=2, mode="c"] w, z, hn, s
    cdef cnp.ndarray[cnp.float64_t, ndim=1, mode="c"] b
    cdef int rows = h.shape[0]
    cdef int nl = len(weights)
    cdef int i, din, dout
    acts = [h]
    pres = []
    sigs = []
    for i in range(nl):
        w = weights[i]
        b = biases[i]
        din = w.shape[0]
        dout = w.shape[1]
        z = np.empty((rows, dout), dtype=np.float64)
        if rows > 0:
            _gemm_rm(rows, dout, din, &h[0, 0], &w[0, 0], &z[0, 0], 0.0)
        if i < nl - 1:
            hn = np.empty((rows, dout), dtype=np.float64)
            s = np.empty((rows, dout), dtype=np.float64)
            if rows > 0:
                _bias_silu(&z[0, 0], &hn[0, 0], &s[0, 0], &b[0], rows, dout)
            pres.append(z)
            sigs.append(s)
            acts.append(hn)
            h = hn
        else:
            if rows > 0:
                _bias(&z[0, 0], &b[0], rows, dout)
            h = z
    return h, (acts, pres, sigs)


def mlp_backward(gout, weights, cache, bint need_params=True):
    acts, pres, sigs = cache
    cdef int nl = len(weights)
    cdef cnp.ndarray[cnp.float64_t, ndim=2, mode="c"] g = np.ascontiguousarray(gout, dtype=np.float64)
    cdef cnp.ndarray[cnp.float64_t, ndim=2, mode="c"] a, w, gw, gin, s, z
    cdef int rows = g.shape[0]
    cdef int i, r, j, din, dout
    cdef double sg, v
    gws = [None] * nl
    gbs = [None] * nl
    for i in range(nl - 1, -1, -1):
        a = acts[i]
        w = weights[i]
        din = w.shape[0]
        dout = w.shape[1]
        gin = np.empty((rows, din), dtype=np.float64)
        if need_params:
            gw = np.zeros((din, dout), dtype=np.float64)
            if rows > 0:
                _gemm_at_b(din, dout, rows, &a[0, 0], &g[0, 0], &gw[0, 0])
            gws[i] = gw
            gbs[i] = g.sum(axis=0)
        if rows > 0:
            _gemm_a_bt(rows, din, dout, &g[0, 0], &w[0, 0], &gin[0, 0])
        if i > 0:
            s = sigs[i - 1]
            z = pres[i - 1]
            for r in range(rows):
                for j in range(din):
                    sg = s[r, j]
                    v = z[r, j]
                    gin[r, j] = gin[r, j] * (sg * (1.0 + v * (1.0 - sg)))
        g = gin
    return g, gws, gbs


cdef class _Net:
    # preallocated scratch for repeated no-grad evaluation at a fixed batch size
    cdef list ws
    cdef list bs
    cdef list bufs
    cdef int rows, nl, din0, dout

    def __init__(self, weights, biases, int rows):
        self.ws = [np.ascontiguousarray(w, dtype=np.float64) for w in weights]
        self.bs = [np.ascontiguousarray(b, dtype=np.float64) for b in biases]
        self.nl = len(self.ws)
        self.rows = rows
        self.din0 = self.ws[0].shape[0]
        self.dout = self.ws[self.nl - 1].shape[1]
        self.bufs = [np.empty((rows, w.shape[1]), dtype=np.float64) for w in self.ws]

    cdef void run(self, double* inp, double* out) noexcept:
        cdef int i, din, dout
        cdef double* h = inp
        cdef cnp.ndarray[cnp.float64_t, ndim=2, mode="c"] w
        cdef cnp.ndarray[cnp.float64_t, ndim=1, mode="c"] b
        cdef cnp.ndarray[cnp.float64_t, ndim=2, mode="c"] buf
        cdef double* z
        for i in range(self.nl):
            w = self.ws[i]
            b = self.bs[i]
            din = w.shape[0]
            dout = w.shape[1]
            if i == self.nl - 1:
                z = out
            else:
                buf = self.bufs[i]
                z = &buf[0, 0]
            _gemm_rm(self.rows, dout, din, h, &w[0, 0], z, 0.0)
            if i < self.nl - 1:
                _bias_silu(z, z, NULL, &b[0], self.rows, dout)
            else:
                _bias(z, &b[0], self.rows, dout)
            h = z


def mlp_apply(x, weights, biases):
    cdef cnp.ndarray[cnp.float64_t, ndim=2, mode="c"] xin = np.ascontiguousarray(x, dtype=np.float64)
    cdef int rows = xin.shape[0]
    out = np.empty((rows, weights[len(weights) - 1].shape[1]), dtype=np.float64)
    if rows == 0:
        return out
    cdef cnp.ndarray[cnp.float64_t, ndim=2, mode="c"] o = out
    cdef _Net net = _Net(weights, biases, rows)
    net.run(&xin[0, 0], &o[0, 0])
    return out


cdef void _fill_input(double* inp, double* x, double* trow, double* c, int rows, int n, int e, int ec) noexcept nogil:
    cdef int r, j, d
    d = n + e + ec
    for r in range(rows):
        for j in range(n):
            inp[r * d + j] = x[r * n + j]
        for j in range(e):
            inp[r * d + n + j] = trow[j]
        for j in range(ec):
            inp[r * d + n + e + j] = c[r * ec + j]


def ddim_loop(x_T, weights, biases, temb, steps, ab_t, ab_prev, sigma, out_a, out_b,
              cemb_cond, cemb_null, double cfg_scale, noise):
    cdef cnp.ndarray[cnp.float64_t, ndim=2, mode="c"] x = np.array(x_T, dtype=np.float64, order="C", copy=True)
    cdef cnp.ndarray[cnp.float64_t, ndim=2, mode="c"] te = np.ascontiguousarray(temb, dtype=np.float64)
    cdef cnp.ndarray[cnp.int64_t, ndim=1] st = np.asarray(steps, dtype=np.int64)
    cdef cnp.ndarray[cnp.float64_t, ndim=1] abt = np.asarray(ab_t, dtype=np.float64)
    cdef cnp.ndarray[cnp.float64_t, ndim=1] abp = np.asarray(ab_prev, dtype=np.float64)
    cdef cnp.ndarray[cnp.float64_t, ndim=1] sg = np.asarray(sigma, dtype=np.float64)
    cdef cnp.ndarray[cnp.float64_t, ndim=1] oa = np.asarray(out_a, dtype=np.float64)
    cdef cnp.ndarray[cnp.float64_t, ndim=1] ob = np.asarray(out_b, dtype=np.float64)
    cdef int rows = x.shape[0]
    cdef int n = x.shape[1]
    cdef int e = te.shape[1]
    cdef bint conditional = cemb_null is not None
    cdef int ec = 0
    cdef cnp.ndarray[cnp.float64_t, ndim=2, mode="c"] cc, cn
    if cemb_cond is not None and np.shape(cemb_cond)[1] > 0:
        cc = np.ascontiguousarray(cemb_cond, dtype=np.float64)
        ec = cc.shape[1]
    if conditional:
        cn = np.ascontiguousarray(cemb_null, dtype=np.float64)
    cdef cnp.ndarray[cnp.float64_t, ndim=3, mode="c"] nz
    cdef bint has_noise = noise is not None
    if has_noise:
        nz = np.ascontiguousarray(noise, dtype=np.float64)
    if rows == 0:
        return x
    cdef _Net net = _Net(weights, biases, rows)
    cdef cnp.ndarray[cnp.float64_t, ndim=2, mode="c"] inp = np.empty((rows, n + e + ec), dtype=np.float64)
    cdef cnp.ndarray[cnp.float64_t, ndim=2, mode="c"] e1 = np.empty((rows, n), dtype=np.float64)
    cdef cnp.ndarray[cnp.float64_t, ndim=2, mode="c"] e2 = np.empty((rows, n), dtype=np.float64)
    cdef double* cptr_c = NULL
    cdef double* cptr_n = NULL
    if ec > 0:
        cptr_c = &cc[0, 0]
        if conditional:
            cptr_n = &cn[0, 0]
    cdef int i, r, j, k
    cdef double a, bb, at, ap, s, eps, x0, c0, c1, s_cfg = cfg_scale
    cdef int mode
    # mode 0: single pass with cond (or uncond model); 1: null only; 2: both
    if not conditional or s_cfg == 1.0:
        mode = 0
    elif s_cfg == 0.0:
        mode = 1
    else:
        mode = 2
    for i in range(st.shape[0]):
        a = oa[i]
        bb = ob[i]
        at = abt[i]
        ap = abp[i]
        s = sg[i]
        if mode == 0 or mode == 2:
            _fill_input(&inp[0, 0], &x[0, 0], &te[st[i], 0], cptr_c, rows, n, e, ec)
            net.run(&inp[0, 0], &e1[0, 0])
        if mode == 1 or mode == 2:
            _fill_input(&inp[0, 0], &x[0, 0], &te[st[i], 0], cptr_n, rows, n, e, ec)
            net.run(&inp[0, 0], &e2[0, 0])
        c0 = sqrt(1.0 - at)
        c1 = 1.0 - ap - s * s
        if c1 < 0.0:
            c1 = 0.0
        c1 = sqrt(c1)
        for r in range(rows):
            for j in range(n):
                k = r * n + j
                if mode == 0:
                    eps = a * x[r, j] + bb * e1[r, j]
                elif mode == 1:
                    eps = a * x[r, j] + bb * e2[r, j]
                else:
                    eps = a * x[r, j] + bb * e2[r, j]
                    eps = eps + s_cfg * ((a * x[r, j] + bb * e1[r, j]) - eps)
                x0 = (x[r, j] - c0 * eps) / sqrt(at)
                x[r, j] = sqrt(ap) * x0 + c1 * eps
                if s > 0.0 and has_noise:
                    x[r, j] += s * nz[i, r, j]
    return x
