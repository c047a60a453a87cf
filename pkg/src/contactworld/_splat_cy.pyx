# cython: boundscheck=False, wraparound=False, cdivision=True
"""Compiled accumulation kernel for splat rendering.

Must stay arithmetically in lockstep with ``_splat_py.accumulate_contact``:
same expressions, same evaluation order, same libm exp. The pure-Python
module is the fallback when this extension is unavailable.
"""

from libc.math cimport exp


def accumulate_contact(double[:, :, ::1] acc, double[:, ::1] wacc,
                       long u0, long v0, long win, double sigma,
                       double depth_w, double cr, double cg, double cb):
    cdef long height = wacc.shape[0]
    cdef long width = wacc.shape[1]
    cdef long du_lo = -win if u0 - win >= 0 else -u0
    cdef long du_hi = win if u0 + win <= width - 1 else width - 1 - u0
    cdef long dv_lo = -win if v0 - win >= 0 else -v0
    cdef long dv_hi = win if v0 + win <= height - 1 else height - 1 - v0
    cdef long du, dv, u, v
    cdef double k, w
    if du_lo > du_hi or dv_lo > dv_hi:
        return
    for dv in range(dv_lo, dv_hi + 1):
        v = v0 + dv
        for du in range(du_lo, du_hi + 1):
            u = u0 + du
            k = exp(-(du * du + dv * dv) / (2.0 * sigma * sigma))
            w = depth_w * k
            wacc[v, u] += w
            acc[v, u, 0] += w * cr
            acc[v, u, 1] += w * cg
            acc[v, u, 2] += w * cb
