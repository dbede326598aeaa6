# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled cost-curve kernel: one pass over the trace per capacity level."""

import numpy as np
from libc.math cimport ceil


def cost_curve(loads, betas, double alpha, double gamma, double price_vm,
               double price_fn, double mult, bint ceil_cores=False):
    cdef const double[::1] d = np.ascontiguousarray(loads, dtype=np.float64)
    cdef const double[::1] b = np.ascontiguousarray(betas, dtype=np.float64)
    out_arr = np.empty(b.shape[0], dtype=np.float64)
    cdef double[::1] out = out_arr
    cdef Py_ssize_t i, t, n = d.shape[0], m = b.shape[0]
    cdef double beta, vm, fn, excess, total
    with nogil:
        for i in range(m):
            beta = b[i]
            vm = beta / alpha
            if ceil_cores:
                vm = ceil(vm)
            vm = vm * price_vm
            total = vm * n
            fn = 0.0
            for t in range(n):
                excess = d[t] - beta
                if excess > 0.0:
                    excess = mult * excess / gamma
                    if ceil_cores:
                        excess = ceil(excess)
                    fn += excess * price_fn
            out[i] = total + fn
    return out_arr
