"""Time propagation backends shared by both solvers.

``propagate_rk45`` wraps the adaptive Dormand-Prince pair on complex states
and is the default contract (relative tolerance, dense sampling at request
times, stiffness reported as an error).  ``EtdPropagator`` is a fixed-step
Krogstad ETDRK4 scheme that integrates a constant diagonal decay exactly;
it removes the step-size ceiling the lead bandwidth imposes on explicit
solvers and is used for long driven sweeps.
"""

from __future__ import annotations

import numpy as np
from scipy.integrate import solve_ivp

from .errors import StiffnessError


def propagate_rk45(rhs, y0, t0, t1, *, t_eval=None, rtol=1e-8, atol=None,
                   max_step=np.inf):
    """Adaptive RK45 on a complex state vector.

    Returns ``(y_end, samples)`` where ``samples`` is an array of states at
    ``t_eval`` (or None).  Step-size underflow is reported as
    :class:`StiffnessError` with a hint at the fastest scale.
    """
    if t1 == t0:
        if t_eval is not None:
            return y0.copy(), np.tile(y0, (len(t_eval), 1))
        return y0.copy(), None
    if atol is None:
        atol = rtol * 1e-2
    y0 = np.asarray(y0, dtype=complex).ravel()
    sol = solve_ivp(rhs, (t0, t1), y0, method="RK45", rtol=rtol, atol=atol,
                    t_eval=None if t_eval is None else np.asarray(t_eval),
                    max_step=max_step, dense_output=False)
    if not sol.success:
        raise StiffnessError(
            f"RK45 failed: {sol.message}; the fastest decay scale is set by "
            "the lead bandwidth D -- consider more Padé poles, a smaller D, "
            "or the exponential integrator")
    y_end = sol.y[:, -1] if t_eval is None else None
    samples = None
    if t_eval is not None:
        samples = sol.y.T.copy()
        y_end = samples[-1]
    return y_end, samples


def _phi_funcs(z):
    """phi_1..phi_3 of the exponential integrator, stable near z = 0."""
    z = np.asarray(z, dtype=complex)
    out1 = np.empty_like(z)
    out2 = np.empty_like(z)
    out3 = np.empty_like(z)
    small = np.abs(z) < 0.25
    zs = z[small]
    # Taylor: phi_k(z) = sum_j z^j / (j + k)!
    p1 = np.zeros_like(zs)
    p2 = np.zeros_like(zs)
    p3 = np.zeros_like(zs)
    term = np.ones_like(zs)
    for j in range(16):
        p1 += term / _factorial(j + 1)
        p2 += term / _factorial(j + 2)
        p3 += term / _factorial(j + 3)
        term = term * zs
    out1[small], out2[small], out3[small] = p1, p2, p3
    zb = z[~small]
    ez = np.exp(zb)
    out1[~small] = (ez - 1.0) / zb
    out2[~small] = (ez - 1.0 - zb) / zb**2
    out3[~small] = (ez - 1.0 - zb - 0.5 * zb**2) / zb**3
    return out1, out2, out3


def _factorial(k):
    out = 1.0
    for i in range(2, k + 1):
        out *= i
    return out


class EtdPropagator:
    """Fixed-step Krogstad ETDRK4 for y' = -decay*y + N(t, y).

    ``decay`` is a constant complex array broadcastable to the state; the
    exponential factors exp(-decay*h) are applied exactly, so only the
    remaining generator limits the step.  Coefficients are cached per step
    size; pass ``coeff_cache`` to share the cache across instances.
    """

    def __init__(self, nonstiff_rhs, decay, coeff_cache=None):
        self.rhs = nonstiff_rhs
        self.decay = decay
        self._coeff = {} if coeff_cache is None else coeff_cache

    def _coeffs(self, h):
        cached = self._coeff.get(h)
        if cached is not None:
            return cached
        z_half = -self.decay * (0.5 * h)
        z_full = -self.decay * h
        e_half = np.exp(z_half)
        e_full = np.exp(z_full)
        p1h, p2h, _ = _phi_funcs(z_half)
        p1f, p2f, p3f = _phi_funcs(z_full)
        coeffs = (e_half, e_full,
                  0.5 * h * p1h, h * p2h,
                  h * p1f, 2.0 * h * p2f,
                  h * (p1f - 3.0 * p2f + 4.0 * p3f),
                  h * (2.0 * p2f - 4.0 * p3f),
                  h * (4.0 * p3f - p2f))
        self._coeff[h] = coeffs
        return coeffs

    def step(self, t, y, h):
        e2, e1, a21, b_diff, c41, c43, w1, w23, w4 = self._coeffs(h)
        n1 = self.rhs(t, y)
        u2 = e2 * y + a21 * n1
        n2 = self.rhs(t + 0.5 * h, u2)
        u3 = u2 + b_diff * (n2 - n1)
        n3 = self.rhs(t + 0.5 * h, u3)
        u4 = e1 * y + c41 * n1 + c43 * (n3 - n1)
        n4 = self.rhs(t + h, u4)
        return e1 * y + w1 * n1 + w23 * (n2 + n3) + w4 * n4

    def run(self, y, t0, t1, h, *, t_record=None):
        """March from t0 to t1; optionally collect states at t_record.

        Record times must coincide with step boundaries (the caller picks h
        accordingly); they are matched to within h*1e-6.
        """
        n_steps = int(round((t1 - t0) / h))
        if abs(t0 + n_steps * h - t1) > 1e-9 * max(1.0, abs(t1)):
            raise ValueError("step size must divide the interval")
        samples = [] if t_record is not None else None
        rec = list(t_record) if t_record is not None else []
        ri = 0
        t = t0
        if rec and abs(rec[0] - t) <= h * 1e-6:
            samples.append(y.copy())
            ri += 1
        for k in range(n_steps):
            y = self.step(t, y, h)
            t = t0 + (k + 1) * h
            while ri < len(rec) and abs(rec[ri] - t) <= h * 1e-6:
                samples.append(y.copy())
                ri += 1
        if t_record is not None and ri != len(rec):
            raise ValueError("record times must lie on step boundaries")
        return y, (np.array(samples) if samples is not None else None)


def divide_step(interval, h_max):
    """Largest step <= h_max that divides ``interval`` exactly."""
    n = max(1, int(np.ceil(interval / h_max)))
    return interval / n
