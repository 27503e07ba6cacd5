"""Compiled inner loops for the trajectory optimizer.

Everything here works on plain float64 arrays so numba can compile it in
nopython mode.  Loops are written out explicitly: the matrices are 3x3 at
most, where BLAS dispatch costs more than the arithmetic.
"""

import math

import numpy as np
from numba import njit

FAIL_NONE = -1
FAIL_THETA = -2


@njit(cache=True)
def _chol_solve(a, b):
    # Solves a x = b for a small SPD matrix; returns (x, ok).
    m = a.shape[0]
    low = np.zeros((m, m))
    for i in range(m):
        for j in range(i + 1):
            s = a[i, j]
            for p in range(j):
                s -= low[i, p] * low[j, p]
            if i == j:
                if s <= 1e-14:
                    return np.zeros_like(b), False
                low[i, i] = math.sqrt(s)
            else:
                low[i, j] = s / low[j, j]
    x = b.copy()
    ncol = b.shape[1]
    for c in range(ncol):
        for i in range(m):
            s = x[i, c]
            for p in range(i):
                s -= low[i, p] * x[p, c]
            x[i, c] = s / low[i, i]
        for i in range(m - 1, -1, -1):
            s = x[i, c]
            for p in range(i + 1, m):
                s -= low[p, i] * x[p, c]
            x[i, c] = s / low[i, i]
    return x, True


@njit(cache=True)
def backward_kernel(fx, fu, ft, lx, lxx, lu, luu, vx_n, vxx_n, vt_n, vtt_n, reg, freeze_theta,
                    u_nom, u_lo, u_hi, fzz, second_order):
    """Riccati-like sweep with a scalar free parameter.

    With `second_order` the next-step value gradient is contracted with
    the dynamics second derivatives `fzz` (N, n, n+m+1, n+m+1) over the
    joint variable (x, u, theta) and added to the Q blocks.

    A feedforward step that would leave the control box is cut at the
    bound, and that control channel gets no feedback or parameter gain
    (it is held at the bound by the forward pass anyway).

    Returns (k, K, M, dtheta, fail_index, dv1, dv2, vt0, vtt0).  A fail
    index of -1 means success, -2 means the parameter curvature was not
    positive, otherwise it is the step where Q_uu lost definiteness.
    """
    big_n = fx.shape[0]
    n = fx.shape[1]
    m = fu.shape[2]
    k_ff = np.zeros((big_n, m))
    k_fb = np.zeros((big_n, m, n))
    m_th = np.zeros((big_n, m))

    vx = vx_n.copy()
    vxx = vxx_n.copy()
    vt = vt_n
    vtt = vtt_n
    vxt = np.zeros(n)
    dv1 = 0.0
    dv2 = 0.0

    vxx_a = np.zeros((n, n))
    vxx_b = np.zeros((n, m))
    vxx_c = np.zeros(n)
    qx = np.zeros(n)
    qu = np.zeros(m)
    qxx = np.zeros((n, n))
    quu = np.zeros((m, m))
    qux = np.zeros((m, n))
    qxt = np.zeros(n)
    qut = np.zeros(m)
    rhs = np.zeros((m, n + 2))

    for i in range(big_n - 1, -1, -1):
        a = fx[i]
        b = fu[i]
        c = ft[i]
        for r in range(n):
            for s in range(n):
                acc = 0.0
                for p in range(n):
                    acc += vxx[r, p] * a[p, s]
                vxx_a[r, s] = acc
            for s in range(m):
                acc = 0.0
                for p in range(n):
                    acc += vxx[r, p] * b[p, s]
                vxx_b[r, s] = acc
            acc = 0.0
            for p in range(n):
                acc += vxx[r, p] * c[p]
            vxx_c[r] = acc
        # first-order terms
        for r in range(n):
            acc = lx[i, r]
            for p in range(n):
                acc += a[p, r] * vx[p]
            qx[r] = acc
        for r in range(m):
            acc = lu[i, r]
            for p in range(n):
                acc += b[p, r] * vx[p]
            qu[r] = acc
        qt = vt
        for p in range(n):
            qt += c[p] * vx[p]
        # second-order terms
        for r in range(n):
            for s in range(n):
                acc = lxx[i, r, s]
                for p in range(n):
                    acc += a[p, r] * vxx_a[p, s]
                qxx[r, s] = acc
            acc = 0.0
            for p in range(n):
                acc += a[p, r] * (vxx_c[p] + vxt[p])
            qxt[r] = acc
        for r in range(m):
            for s in range(m):
                acc = luu[i, r, s]
                for p in range(n):
                    acc += b[p, r] * vxx_b[p, s]
                quu[r, s] = acc
            for s in range(n):
                acc = 0.0
                for p in range(n):
                    acc += b[p, r] * vxx_a[p, s]
                qux[r, s] = acc
            acc = 0.0
            for p in range(n):
                acc += b[p, r] * (vxx_c[p] + vxt[p])
            qut[r] = acc
        qtt = vtt
        for p in range(n):
            qtt += c[p] * vxx_c[p] + 2.0 * c[p] * vxt[p]

        if second_order:
            nz = n + m + 1
            for r in range(nz):
                for q in range(nz):
                    acc = 0.0
                    for p in range(n):
                        acc += vx[p] * fzz[i, p, r, q]
                    if r < n and q < n:
                        qxx[r, q] += acc
                    elif r < n and q == nz - 1:
                        qxt[r] += acc
                    elif n <= r < n + m and q < n:
                        qux[r - n, q] += acc
                    elif n <= r < n + m and n <= q < n + m:
                        quu[r - n, q - n] += acc
                    elif n <= r < n + m and q == nz - 1:
                        qut[r - n] += acc
                    elif r == nz - 1 and q == nz - 1:
                        qtt += acc

        quu_r = quu.copy()
        for r in range(m):
            quu_r[r, r] += reg
        for r in range(m):
            rhs[r, 0] = qu[r]
            for s in range(n):
                rhs[r, 1 + s] = qux[r, s]
            rhs[r, n + 1] = qut[r]
        sol, ok = _chol_solve(quu_r, rhs)
        if not ok:
            return k_ff, k_fb, m_th, 0.0, i, dv1, dv2, vt, vtt
        for r in range(m):
            k_ff[i, r] = -sol[r, 0]
            for s in range(n):
                k_fb[i, r, s] = -sol[r, 1 + s]
            m_th[i, r] = -sol[r, n + 1]
        for r in range(m):
            lo = u_lo - u_nom[i, r]
            hi = u_hi - u_nom[i, r]
            if k_ff[i, r] < lo or k_ff[i, r] > hi:
                k_ff[i, r] = min(max(k_ff[i, r], lo), hi)
                for s in range(n):
                    k_fb[i, r, s] = 0.0
                m_th[i, r] = 0.0
        kk = k_ff[i]
        kf = k_fb[i]
        mm = m_th[i]

        # value update written with the gains (robust to regularization)
        quu_k = np.zeros(m)
        quu_m = np.zeros(m)
        quu_kf = np.zeros((m, n))
        for r in range(m):
            for s in range(m):
                quu_k[r] += quu[r, s] * kk[s]
                quu_m[r] += quu[r, s] * mm[s]
                for q in range(n):
                    quu_kf[r, q] += quu[r, s] * kf[s, q]
        for r in range(n):
            acc = qx[r]
            acc2 = qxt[r]
            for s in range(m):
                acc += kf[s, r] * quu_k[s] + kf[s, r] * qu[s] + qux[s, r] * kk[s]
                acc2 += kf[s, r] * quu_m[s] + kf[s, r] * qut[s] + qux[s, r] * mm[s]
            vx[r] = acc
            vxt[r] = acc2
        for r in range(n):
            for q in range(n):
                acc = qxx[r, q]
                for s in range(m):
                    acc += kf[s, r] * quu_kf[s, q] + kf[s, r] * qux[s, q] + qux[s, r] * kf[s, q]
                vxx[r, q] = acc
        for r in range(n):
            for q in range(r + 1, n):
                avg = 0.5 * (vxx[r, q] + vxx[q, r])
                vxx[r, q] = avg
                vxx[q, r] = avg
        nvt = qt
        nvtt = qtt
        for s in range(m):
            nvt += mm[s] * quu_k[s] + mm[s] * qu[s] + qut[s] * kk[s]
            nvtt += mm[s] * quu_m[s] + 2.0 * mm[s] * qut[s]
            dv1 += kk[s] * qu[s]
            dv2 += 0.5 * kk[s] * quu_k[s]
        vt = nvt
        vtt = nvtt

    dtheta = 0.0
    if not freeze_theta:
        denom = vtt + reg
        if denom <= 1e-14:
            return k_ff, k_fb, m_th, 0.0, FAIL_THETA, dv1, dv2, vt, vtt
        dtheta = -vt / denom
        dv1 += dtheta * vt
        dv2 += 0.5 * dtheta * dtheta * vtt
    return k_ff, k_fb, m_th, dtheta, FAIL_NONE, dv1, dv2, vt, vtt


@njit(cache=True)
def unicycle_step(x, y, hd, omega, h, speed, rk4):
    if not rk4:
        return x + h * speed * math.cos(hd), y + h * speed * math.sin(hd), hd + h * omega
    h2 = hd + 0.5 * h * omega
    h4 = hd + h * omega
    cx = math.cos(hd) + 4.0 * math.cos(h2) + math.cos(h4)
    cy = math.sin(hd) + 4.0 * math.sin(h2) + math.sin(h4)
    return x + h / 6.0 * speed * cx, y + h / 6.0 * speed * cy, hd + h * omega


@njit(cache=True)
def unicycle_forward(states, controls, t_new, k_ff, k_fb, m_th, alpha, dtheta, speed, u_lo, u_hi, rk4):
    """Closed-loop rollout of the unicycle with clamped turn rate."""
    big_n = controls.shape[0]
    new_x = np.empty_like(states)
    new_u = np.empty_like(controls)
    new_x[0, :] = states[0, :]
    h = t_new / big_n
    for i in range(big_n):
        u = controls[i, 0] + alpha * k_ff[i, 0] + m_th[i, 0] * dtheta
        for s in range(3):
            u += k_fb[i, 0, s] * (new_x[i, s] - states[i, s])
        if u < u_lo:
            u = u_lo
        elif u > u_hi:
            u = u_hi
        new_u[i, 0] = u
        nx, ny, nh = unicycle_step(new_x[i, 0], new_x[i, 1], new_x[i, 2], u, h, speed, rk4)
        new_x[i + 1, 0] = nx
        new_x[i + 1, 1] = ny
        new_x[i + 1, 2] = nh
    return new_x, new_u
