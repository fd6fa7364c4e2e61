# Compiled twin of fedanom.kernels.pure. Matmuls go through BLAS dgemm,
# everything elementwise runs as fused C loops. Semantics must track pure.py;
# bit-identity across the two backends is not promised (see pure.py notes).

import numpy as np

cimport numpy as cnp
from libc.math cimport pow as c_pow
from libc.math cimport sqrt as c_sqrt
from scipy.linalg.cython_blas cimport dgemm

ACT_TANH = 0
ACT_SIGMOID = 1

name = "compiled"
compiled = True


# Row-major wrappers around column-major dgemm. Shapes in comments are the
# row-major shapes of the numpy buffers involved.

cdef void _gemm_x_wt(double* x, double* w, double* z,
                     int b, int in_dim, int out_dim) noexcept nogil:
    # z[b, out] = x[b, in] @ w[out, in]^T
    cdef char ta = c'T'
    cdef char tb = c'N'
    cdef double alpha = 1.0
    cdef double beta = 0.0
    dgemm(&ta, &tb, &out_dim, &b, &in_dim, &alpha, w, &in_dim,
          x, &in_dim, &beta, z, &out_dim)


cdef void _gemm_dt_a(double* delta, double* a_prev, double* dw,
                     int b, int in_dim, int out_dim) noexcept nogil:
    # dw[out, in] = delta[b, out]^T @ a_prev[b, in]
    cdef char ta = c'N'
    cdef char tb = c'T'
    cdef double alpha = 1.0
    cdef double beta = 0.0
    dgemm(&ta, &tb, &in_dim, &out_dim, &b, &alpha, a_prev, &in_dim,
          delta, &out_dim, &beta, dw, &in_dim)


cdef void _gemm_d_w(double* delta, double* w, double* da,
                    int b, int in_dim, int out_dim) noexcept nogil:
    # da[b, in] = delta[b, out] @ w[out, in]
    cdef char ta = c'N'
    cdef char tb = c'N'
    cdef double alpha = 1.0
    cdef double beta = 0.0
    dgemm(&ta, &tb, &in_dim, &b, &out_dim, &alpha, w, &in_dim,
          delta, &out_dim, &beta, da, &in_dim)


cdef void _bias_add(double* z, double* bias, int b, int out) noexcept nogil:
    cdef Py_ssize_t i, j
    for i in range(b):
        for j in range(out):
            z[i * out + j] += bias[j]


def _activate_inplace(z, int act):
    # transcendentals go through numpy's SIMD loops, which beat scalar libm
    # by a large margin at these batch sizes
    if act == 0:
        np.tanh(z, out=z)
    else:
        np.negative(z, out=z)
        np.exp(z, out=z)
        z += 1.0
        np.reciprocal(z, out=z)


cdef double _deriv(double a, int act) noexcept nogil:
    if act == 0:
        return 1.0 - a * a
    return a * (1.0 - a)


def forward(list weights, list biases, int act, bint activate_output, x):
    cdef int layers = len(weights)
    cdef int k
    a = np.asarray(x)
    cdef double[:, ::1] av
    cdef double[:, ::1] wv
    cdef double[::1] bv
    cdef double[:, ::1] zv
    cdef int b = a.shape[0]
    cdef int in_dim, out_dim
    for k in range(layers):
        wv = weights[k]
        bv = biases[k]
        out_dim = wv.shape[0]
        in_dim = wv.shape[1]
        z = np.empty((b, out_dim), dtype=np.float64)
        zv = z
        av = a
        with nogil:
            _gemm_x_wt(&av[0, 0], &wv[0, 0], &zv[0, 0], b, in_dim, out_dim)
            _bias_add(&zv[0, 0], &bv[0], b, out_dim)
        if k < layers - 1 or activate_output:
            _activate_inplace(z, act)
        a = z
    return a


def loss_and_grads(list weights, list biases, int act, bint activate_output, x):
    cdef int layers = len(weights)
    cdef int k
    cdef double[:, ::1] xv = x
    cdef int b = xv.shape[0]
    cdef int d = xv.shape[1]

    acts = [np.asarray(x)]
    a = acts[0]
    cdef double[:, ::1] av
    cdef double[:, ::1] wv
    cdef double[::1] bv
    cdef double[:, ::1] zv
    cdef int in_dim, out_dim
    for k in range(layers):
        wv = weights[k]
        bv = biases[k]
        out_dim = wv.shape[0]
        in_dim = wv.shape[1]
        z = np.empty((b, out_dim), dtype=np.float64)
        zv = z
        av = a
        with nogil:
            _gemm_x_wt(&av[0, 0], &wv[0, 0], &zv[0, 0], b, in_dim, out_dim)
            _bias_add(&zv[0, 0], &bv[0], b, out_dim)
        if k < layers - 1 or activate_output:
            _activate_inplace(z, act)
        a = z
        acts.append(a)

    # loss and the output-layer delta in one pass
    cdef double[:, ::1] topv = acts[layers]
    delta = np.empty((b, d), dtype=np.float64)
    cdef double[:, ::1] dv = delta
    cdef double scale = 2.0 / (<double>b * <double>d)
    cdef double loss = 0.0
    cdef double r, g
    cdef Py_ssize_t i, j
    with nogil:
        for i in range(b):
            for j in range(d):
                r = topv[i, j] - xv[i, j]
                loss += r * r
                g = scale * r
                if activate_output:
                    g *= _deriv(topv[i, j], act)
                dv[i, j] = g
    loss /= <double>b * <double>d

    dws = [None] * layers
    dbs = [None] * layers
    cdef double[:, ::1] dwv
    cdef double[::1] dbv
    cdef double[:, ::1] apv
    cdef double[:, ::1] ndv
    cdef double s
    for k in range(layers - 1, -1, -1):
        wv = weights[k]
        out_dim = wv.shape[0]
        in_dim = wv.shape[1]
        dw = np.empty((out_dim, in_dim), dtype=np.float64)
        db = np.empty(out_dim, dtype=np.float64)
        dwv = dw
        dbv = db
        apv = acts[k]
        dv = delta
        with nogil:
            _gemm_dt_a(&dv[0, 0], &apv[0, 0], &dwv[0, 0], b, in_dim, out_dim)
            for j in range(out_dim):
                s = 0.0
                for i in range(b):
                    s += dv[i, j]
                dbv[j] = s
        dws[k] = dw
        dbs[k] = db
        if k > 0:
            nd = np.empty((b, in_dim), dtype=np.float64)
            ndv = nd
            with nogil:
                _gemm_d_w(&dv[0, 0], &wv[0, 0], &ndv[0, 0], b, in_dim, out_dim)
                for i in range(b):
                    for j in range(in_dim):
                        ndv[i, j] *= _deriv(apv[i, j], act)
            delta = nd
    return loss, dws, dbs


cdef void _adam_block(double* p, double* g, double* m, double* v,
                      Py_ssize_t n, double lr, double beta1, double beta2,
                      double eps, double c1, double c2) noexcept nogil:
    cdef Py_ssize_t i
    cdef double mi, vi
    for i in range(n):
        mi = beta1 * m[i] + (1.0 - beta1) * g[i]
        vi = beta2 * v[i] + (1.0 - beta2) * (g[i] * g[i])
        m[i] = mi
        v[i] = vi
        p[i] -= lr * (mi / c1) / (c_sqrt(vi / c2) + eps)


def adam_update(list weights, list biases, list dws, list dbs,
                list mw, list mb, list vw, list vb,
                long step, double lr, double beta1, double beta2, double eps):
    cdef double c1 = 1.0 - c_pow(beta1, <double>step)
    cdef double c2 = 1.0 - c_pow(beta2, <double>step)
    cdef int layers = len(weights)
    cdef int k
    cdef double[:, ::1] w2, g2, m2, v2
    cdef double[::1] w1, g1, m1, v1
    for k in range(layers):
        w2 = weights[k]
        g2 = dws[k]
        m2 = mw[k]
        v2 = vw[k]
        with nogil:
            _adam_block(&w2[0, 0], &g2[0, 0], &m2[0, 0], &v2[0, 0],
                        w2.shape[0] * w2.shape[1], lr, beta1, beta2, eps, c1, c2)
        w1 = biases[k]
        g1 = dbs[k]
        m1 = mb[k]
        v1 = vb[k]
        with nogil:
            _adam_block(&w1[0], &g1[0], &m1[0], &v1[0],
                        w1.shape[0], lr, beta1, beta2, eps, c1, c2)


def mse_per_sample(x, xhat):
    cdef double[:, ::1] xv = x
    cdef double[:, ::1] hv = xhat
    cdef Py_ssize_t b = xv.shape[0]
    cdef Py_ssize_t d = xv.shape[1]
    out = np.empty(b, dtype=np.float64)
    cdef double[::1] ov = out
    cdef Py_ssize_t i, j
    cdef double s, r
    with nogil:
        for i in range(b):
            s = 0.0
            for j in range(d):
                r = hv[i, j] - xv[i, j]
                s += r * r
            ov[i] = s / <double>d
    return out
