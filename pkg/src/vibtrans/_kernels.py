"""Fused numba kernel for the hierarchy right-hand side.

One pass per ADO: banded commutator with the (driven) system Hamiltonian,
diagonal decay, then the incoming coupling edges.  Operators are applied
structurally: the lead operators move electron blocks, the displacement
acts tridiagonally within each block.  Edge opcodes: 0 = d^dag, 1 = d,
2 = a^dag + a.
"""

import numpy as np
from numba import njit


@njit(cache=True, fastmath=True)
def heom_rhs_kernel(y, out, band0, band1, band2, nd_diag, drive, gsum,
                    e_ptr, e_src, e_op, e_a, e_b, m, sq):
    n_ados, n, _ = y.shape
    diag = band0 + drive * nd_diag
    for k in range(n_ados):
        yk = y[k]
        ok = out[k]
        g = gsum[k]
        # -i [H, y] - gsum * y with pentadiagonal real symmetric H
        for i in range(n):
            for j in range(n):
                acc = diag[i] * yk[i, j]
                if i >= 1:
                    acc += band1[i - 1] * yk[i - 1, j]
                if i + 1 < n:
                    acc += band1[i] * yk[i + 1, j]
                if i >= 2:
                    acc += band2[i - 2] * yk[i - 2, j]
                if i + 2 < n:
                    acc += band2[i] * yk[i + 2, j]
                acc2 = diag[j] * yk[i, j]
                if j >= 1:
                    acc2 += band1[j - 1] * yk[i, j - 1]
                if j + 1 < n:
                    acc2 += band1[j] * yk[i, j + 1]
                if j >= 2:
                    acc2 += band2[j - 2] * yk[i, j - 2]
                if j + 2 < n:
                    acc2 += band2[j] * yk[i, j + 2]
                ok[i, j] = -1j * (acc - acc2) - g * yk[i, j]
        # incoming edges
        for e in range(e_ptr[k], e_ptr[k + 1]):
            ys = y[e_src[e]]
            a = e_a[e]
            b = e_b[e]
            op = e_op[e]
            if op == 0:
                if a != 0:
                    for i in range(m):
                        for j in range(n):
                            ok[m + i, j] += a * ys[i, j]
                if b != 0:
                    for i in range(n):
                        for j in range(m):
                            ok[i, j] += b * ys[i, m + j]
            elif op == 1:
                if a != 0:
                    for i in range(m):
                        for j in range(n):
                            ok[i, j] += a * ys[m + i, j]
                if b != 0:
                    for i in range(n):
                        for j in range(m):
                            ok[i, m + j] += b * ys[i, j]
            else:
                if a != 0:
                    for blk in range(2):
                        base = blk * m
                        for i in range(m):
                            for j in range(n):
                                acc3 = 0.0 + 0.0j
                                if i >= 1:
                                    acc3 += sq[i - 1] * ys[base + i - 1, j]
                                if i + 1 < m:
                                    acc3 += sq[i] * ys[base + i + 1, j]
                                ok[base + i, j] += a * acc3
                if b != 0:
                    for blk in range(2):
                        base = blk * m
                        for i in range(n):
                            for j in range(m):
                                acc3 = 0.0 + 0.0j
                                if j >= 1:
                                    acc3 += sq[j - 1] * ys[i, base + j - 1]
                                if j + 1 < m:
                                    acc3 += sq[j] * ys[i, base + j + 1]
                                ok[i, base + j] += b * acc3
