"""Time-periodic Born-Markov master equation in the polaron eigenbasis.

Valid for ``Lambda = 0`` (no direct phonon bath).  The reduced density
matrix is split into the unoccupied/occupied electronic sectors ``rho0``
and ``rho1``, each expanded in the eigenstates of its own oscillator
Hamiltonian: the occupied-sector states are displaced by g = lam/Omega,
so lead-induced transitions carry Franck-Condon overlap factors.  The
sinusoidal drive is absorbed into an accumulated phase
``g(t) = (A_D/Omega_D)(1 - cos(Omega_D t))`` and expanded with the
Jacobi-Anger identity, which turns the Fermi function into a
Bessel-weighted sum over replicas shifted by multiples of Omega_D.
"""

from __future__ import annotations

from math import lgamma

import numpy as np
from scipy.special import eval_genlaguerre, jv

from .errors import ContractViolationError, InvalidParameterError
from .model import ModelParams, drive_energy

_LEADS = ("L", "R")


def franck_condon(i, ip, g):
    """Overlap <i'|i> between Fock states of oscillators displaced by g.

    Stable evaluation through log-space prefactors and the generalized
    Laguerre recurrence; beyond index ~200 the Laguerre recurrence itself
    loses accuracy, so that regime is rejected.
    """
    if i < 0 or ip < 0:
        raise InvalidParameterError("Fock indices must be >= 0")
    if max(i, ip) > 200:
        raise InvalidParameterError("Franck-Condon factors unreliable beyond index 200")
    if g == 0.0:
        return 1.0 if i == ip else 0.0
    p, q = min(i, ip), max(i, ip)
    lag = eval_genlaguerre(p, q - p, g * g)
    log_pref = 0.5 * (lgamma(p + 1) - lgamma(q + 1)) + (q - p) * np.log(abs(g)) \
        - 0.5 * g * g
    sign = (-1.0) ** (q - p) if g < 0 else 1.0
    if ip < i:
        sign *= (-1.0) ** (i - ip)
    return float(sign * np.exp(log_pref) * lag)


def franck_condon_matrix(n, g):
    """Table F[i, i'] = <i'|i> for i, i' < n."""
    f = np.empty((n, n))
    for i in range(n):
        for ip in range(n):
            f[i, ip] = franck_condon(i, ip, g)
    return f


def bessel_replica_cut(z, tol=1e-10):
    """Smallest cut with sum_{|m|<=cut} J_m(z)^2 > 1 - tol."""
    z = abs(float(z))
    if z == 0.0:
        return 0
    cut = max(4, int(np.ceil(z)))
    while True:
        m = np.arange(-cut, cut + 1)
        if np.sum(jv(m, z) ** 2) > 1.0 - tol:
            return cut
        cut += max(2, cut // 4)


def modified_fermi(x, t, z, omega_d, temperature, replica_cut, mu=0.0):
    """Drive-dressed Fermi function with Bessel-weighted replicas.

    sum_{n,m} i^n (-i)^m J_n(z) J_m(z) e^{i(n-m) omega_d t} f(x - mu - m*omega_d)
    truncated at |n|, |m| <= replica_cut.  The double sum factorizes into a
    pure phase factor (the n sum) times the replica-weighted m sum.
    """
    x = np.asarray(x, dtype=float)
    ms = np.arange(-replica_cut, replica_cut + 1)
    jm = jv(ms, z)
    phase_n = np.sum(jm * (1j) ** ms * np.exp(1j * ms * omega_d * t))
    f = _fermi((x[..., None] - mu - ms * omega_d) / temperature)
    msum = np.sum(jm * (-1j) ** ms * np.exp(-1j * ms * omega_d * t) * f, axis=-1)
    out = phase_n * msum
    return out if out.ndim else out[()]


def _fermi(x):
    x = np.asarray(x, dtype=float)
    out = np.empty_like(x)
    pos = x > 0
    out[pos] = np.exp(-x[pos]) / (1.0 + np.exp(-x[pos]))
    out[~pos] = 1.0 / (1.0 + np.exp(x[~pos]))
    return out


class QmeSolver:
    """Generator, propagator, and observables of the driven master equation.

    State layout: complex vector ``[rho0.ravel(), rho1.ravel()]`` with
    ``n_levels`` oscillator states per sector.  The generator conserves
    tr rho0 + tr rho1 identically and preserves Hermiticity of both blocks.
    """

    def __init__(self, params: ModelParams, *, n_levels=None, replica_cut=None,
                 replica_tol=1e-10):
        if params.Lambda != 0.0:
            raise ContractViolationError(
                "the Born-Markov master equation excludes the phonon bath; "
                "set Lambda = 0 or use the hierarchy solver")
        self.params = params
        self.n = int(n_levels if n_levels is not None else params.n_osc)
        if self.n < 1:
            raise InvalidParameterError("need at least one oscillator level")
        n = self.n
        g = params.lam / params.Omega
        self.g = g
        self.eps_bar = params.eps0 - params.lam**2 / params.Omega
        self.E0 = params.Omega * (np.arange(n) + 0.5)
        self.E1 = self.E0 + self.eps_bar
        self.F = franck_condon_matrix(n, g)
        # transition energies E1(i') - E0(k), indexed [i', k]
        self.delta = self.E1[:, None] - self.E0[None, :]
        self.z = params.A_D / params.Omega_D if params.A_D else 0.0
        if replica_cut is None:
            replica_cut = bessel_replica_cut(self.z, replica_tol)
        self.replica_cut = int(replica_cut)
        ms = np.arange(-self.replica_cut, self.replica_cut + 1)
        self._ms = ms
        self._jm = jv(ms, self.z)
        # static per-lead Fermi tables on all replica-shifted energies
        self._f_static = {}
        self._f_replica = {}
        for alpha in _LEADS:
            gam, _, mu, temp = params.lead(alpha)
            self._f_static[alpha] = _fermi((self.delta - mu) / temp)
            shifted = (self.delta[None, :, :] - mu
                       - ms[:, None, None] * params.Omega_D) / temp
            self._f_replica[alpha] = _fermi(shifted)
        self._weights = {a: params.lead(a)[0] / params.gamma_total
                         for a in _LEADS}
        # oscillator operators within each sector eigenbasis
        x = np.diag(np.sqrt(np.arange(1, n)), 1)
        x = x + x.T
        self._x0 = x
        self._x1 = x - 2.0 * g * np.eye(n)
        self._occ0 = np.diag(np.arange(n, dtype=float))
        self._occ1 = self._occ0 - g * x + g * g * np.eye(n)

    # -- generator -----------------------------------------------------

    def _ftilde(self, alpha, t, driven):
        """Per-lead drive-dressed Fermi table on the transition energies."""
        if not driven or self.z == 0.0:
            return self._f_static[alpha]
        wd = self.params.Omega_D
        phase_n = np.sum(self._jm * (1j) ** self._ms * np.exp(1j * self._ms * wd * t))
        coef = self._jm * (-1j) ** self._ms * np.exp(-1j * self._ms * wd * t)
        return phase_n * np.tensordot(coef, self._f_replica[alpha], axes=(0, 0))

    def _w_matrix(self, t, driven):
        w = 0.0
        for alpha in _LEADS:
            w = w + self._weights[alpha] * self._ftilde(alpha, t, driven)
        return w

    def split(self, y):
        n = self.n
        rho0 = y[:n * n].reshape(n, n)
        rho1 = y[n * n:].reshape(n, n)
        return rho0, rho1

    def rhs(self, t, y, driven=True):
        """Time derivative of the stacked (rho0, rho1) state."""
        n = self.n
        rho0, rho1 = self.split(y)
        f = self.F
        w = self._w_matrix(t, driven)
        gam = self.params.gamma_total
        return self._rhs_with_w(rho0, rho1, w, f, gam)

    def _rhs_with_w(self, rho0, rho1, w, f, gam):
        # Loss kernels act as (K rho + rho K^dag)/2; the gain kernels are the
        # adjoint pair, with the drive-dressed Fermi factor attached to the
        # transition of the same side (row kernel unconjugated, column kernel
        # conjugated).  This pairing conserves tr(rho0) + tr(rho1) for any
        # state and reduces to the static non-secular form for A_D = 0.
        wc = np.conj(w)
        # sector-0 loss: M[i,k] = sum_{i'} F[i,i'] w[i',k] F[k,i']
        m_in = np.einsum('ip,pk,kp->ik', f, w, f, optimize=True)
        # sector-0 gain from rho1: column kernel (1-w), row kernel (1-w*)
        k3 = (1.0 - w) * f.T           # [j', j]
        l5 = (1.0 - wc.T) * f          # [i, i']
        d0 = -1j * (self.E0[:, None] - self.E0[None, :]) * rho0
        d0 += 0.5 * gam * (-(m_in @ rho0) - rho0 @ m_in.conj().T
                           + f @ rho1 @ k3 + l5 @ rho1 @ f.T)
        # sector-1 loss: P[i',k'] = sum_i F[i,i'] (1 - w*[k',i]) F[i,k']
        p_loss = f.T @ ((1.0 - wc.T) * f)
        # sector-1 gain from rho0: row kernel w, column kernel w*
        gl = w * f.T                   # [i', i]
        d1 = -1j * (self.E1[:, None] - self.E1[None, :]) * rho1
        d1 += 0.5 * gam * (-(p_loss @ rho1) - rho1 @ p_loss.conj().T
                           + gl @ rho0 @ f + f.T @ rho0 @ gl.conj().T)
        return np.concatenate([d0.ravel(), d1.ravel()])

    # -- propagation ----------------------------------------------------

    def initial_state(self):
        """Thermal-weight diagonal start combining both sectors."""
        temp = max(self.params.T_L, self.params.T_R)
        w0 = np.exp(-(self.E0 - self.E0.min()) / temp)
        w1 = np.exp(-(self.E1 - self.E0.min()) / temp)
        z = w0.sum() + w1.sum()
        y = np.concatenate([np.diag(w0 / z).ravel(), np.diag(w1 / z).ravel()])
        return y.astype(complex)

    def propagate(self, y, t0, t1, *, driven=True, t_eval=None, rtol=1e-8,
                  atol=None):
        """Adaptive RK45 propagation; returns (y_end, samples or None)."""
        from .integrators import propagate_rk45
        return propagate_rk45(lambda t, v: self.rhs(t, v, driven),
                              y, t0, t1, t_eval=t_eval, rtol=rtol, atol=atol)

    def with_eps0(self, eps0):
        """Same solver with a different static level energy (for frozen-drive use)."""
        return QmeSolver(self.params.replace(eps0=eps0), n_levels=self.n,
                         replica_cut=self.replica_cut)

    # -- observables ----------------------------------------------------

    def trace(self, y):
        rho0, rho1 = self.split(y)
        return np.trace(rho0) + np.trace(rho1)

    def observables(self, y):
        rho0, rho1 = self.split(y)
        return {
            "population": float(np.trace(rho1).real),
            "displacement": float((np.trace(rho0 @ self._x0)
                                   + np.trace(rho1 @ self._x1)).real),
            "occupation": float((np.trace(rho0 @ self._occ0)
                                 + np.trace(rho1 @ self._occ1)).real),
        }

    def currents(self, y, t=0.0, driven=True):
        """Per-lead electron flow into the dot: (I_L, I_R, (I_L - I_R)/2)."""
        rho0, rho1 = self.split(y)
        f = self.F
        out = {}
        for alpha in _LEADS:
            gam_a = self.params.lead(alpha)[0]
            w = self._ftilde(alpha, t, driven)
            wc = np.conj(w)
            gl = w * f.T
            gain = 0.5 * (np.trace(gl @ rho0 @ f)
                          + np.trace(f.T @ rho0 @ gl.conj().T))
            p_loss = f.T @ ((1.0 - wc.T) * f)
            loss = 0.5 * (np.trace(p_loss @ rho1) + np.trace(rho1 @ p_loss.conj().T))
            out[alpha] = float((gain - loss).real) * gam_a
        return out["L"], out["R"], 0.5 * (out["L"] - out["R"])

    def hermiticity_defect(self, y):
        rho0, rho1 = self.split(y)
        return max(float(np.max(np.abs(rho0 - rho0.conj().T))),
                   float(np.max(np.abs(rho1 - rho1.conj().T))))
