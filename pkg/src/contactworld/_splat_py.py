"""Pure-Python fallback for the splat accumulation kernel.

Arithmetic mirrors ``_splat_cy.accumulate_contact`` statement for statement
so both backends produce bit-identical images (both evaluate in C doubles
against the same libm exp).
"""

from math import exp


def accumulate_contact(acc, wacc, u0, v0, win, sigma, depth_w, cr, cg, cb):
    height, width = wacc.shape
    du_lo = -win if u0 - win >= 0 else -u0
    du_hi = win if u0 + win <= width - 1 else width - 1 - u0
    dv_lo = -win if v0 - win >= 0 else -v0
    dv_hi = win if v0 + win <= height - 1 else height - 1 - v0
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
