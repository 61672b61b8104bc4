"""Sum-over-poles expansion of the free-bath correlation functions.

Both reservoir types are reduced to finite sums of decaying exponentials,

    C_bose(t)     = Lambda  * sum_p  eta_p  exp(-gamma_p t),        t > 0
    C_fermi^s(t)  = Gamma_a * sum_q  eta_q  exp(-gamma_{a,s,q} t),  t > 0

by representing the Fermi function and coth through their [N-1/N] Padé
approximants and closing the Fourier integrals over the correct half-plane.
The expansion residues ``eta`` are kept dimensionless relative to the
coupling prefactors Gamma_alpha and Lambda.

Conventions used here (x, y dimensionless):

    f(x)    ~  1/2 - sum_q kappa_q * 2x / (x^2 + zeta_q^2)
    coth(y) ~  1/y + sum_j kappa_j * 2y / (y^2 + zeta_j^2)

For the Ohmic density with Lorentzian cutoff the 1/y term of coth is
cancelled by the ~omega prefactor of the density, so no zero-frequency
pole has to be subtracted before expanding.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass
from functools import lru_cache

import numpy as np
from scipy import linalg

from .errors import DecompositionError, InvalidParameterError
from .model import ModelParams

_LEADS = ("L", "R")
_SIGNS = (1, -1)

#: poles closer than this (relative) are nudged apart before use
_COLLISION_RTOL = 1e-8
_NUDGE = 1e-7


@dataclass(frozen=True)
class ExpansionMode:
    """One decaying exponential of a correlation-function expansion.

    ``eta`` is dimensionless (the coupling prefactor is applied by the
    consumer); Re(gamma) > 0 so the mode decays.
    """

    eta: complex
    gamma: complex


@lru_cache(maxsize=64)
def pade_fermi(n_poles: int):
    """[N-1/N] Padé poles and residues of the Fermi function.

    Returns ``(kappa, zeta)`` with ``f(x) ~ 1/2 - sum kappa*2x/(x^2+zeta^2)``
    for dimensionless x = eps/T.  Poles sit on the imaginary axis at
    x = +/- i*zeta; residues are relative to the exact Matsubara residue,
    so kappa -> 1 for the low poles.
    """
    if n_poles < 1:
        raise InvalidParameterError("need at least one Padé pole")
    m = 2 * n_poles
    a = -np.diagflat(np.arange(1, 2 * m, 2)).astype(float)
    b = np.zeros_like(a)
    np.fill_diagonal(b[1:, :], 0.5)
    np.fill_diagonal(b[:, 1:], 0.5)
    try:
        eig, vecs = linalg.eig(a, b=b, overwrite_a=True, overwrite_b=True)
    except linalg.LinAlgError as exc:  # pragma: no cover
        raise DecompositionError(f"Fermi Padé eigenproblem failed: {exc}")
    if np.max(np.abs(eig.imag)) > 1e-8 * np.max(np.abs(eig.real)):
        raise DecompositionError("Fermi Padé eigenvalues are not real")
    eig = eig.real
    order = np.argsort(eig)
    resid = 0.25 * vecs[0] * np.linalg.inv(vecs)[:, 0] * eig.astype(complex) ** 2
    resid = resid[order].real
    zeta = eig[order][m // 2:]
    kappa = resid[m // 2:]
    return kappa.copy(), zeta.copy()


@lru_cache(maxsize=64)
def pade_bose(n_poles: int):
    """[N-1/N] Padé poles and residues of the Bose-type coth.

    Returns ``(kappa, zeta)`` with
    ``coth(y) ~ 1/y + sum kappa*2y/(y^2+zeta^2)`` for y = omega/(2T).
    All residues are positive.
    """
    if n_poles < 1:
        raise InvalidParameterError("need at least one Padé pole")
    n = n_poles

    def tridiag_desc(sub):
        mat = np.diag(sub, -1) + np.diag(sub, 1)
        return np.sort(np.linalg.eigvalsh(mat))[::-1]

    sub_q = np.array([1.0 / np.sqrt((2 * i + 3) * (2 * i + 5))
                      for i in range(2 * n - 1)])
    # poles in x = 2y units; convert at the end
    zeta_x = 2.0 / tridiag_desc(sub_q)[:n]
    roots_q = zeta_x**2
    if n > 1:
        sub_p = np.array([1.0 / np.sqrt((2 * i + 5) * (2 * i + 7))
                          for i in range(2 * n - 2)])
        roots_p = (2.0 / tridiag_desc(sub_p)[:n - 1]) ** 2
    else:
        roots_p = np.empty(0)
    kappa = np.zeros(n)
    for i in range(n):
        r = 0.5 * n * (2 * n + 3)
        if i < n - 1:
            r *= (roots_p[i] - roots_q[i]) / (roots_q[n - 1] - roots_q[i])
        for j in range(n - 1):
            if j != i:
                r *= (roots_p[j] - roots_q[i]) / (roots_q[j] - roots_q[i])
        kappa[i] = r
    return kappa, zeta_x / 2.0


def fermi_pade_eval(x, kappa, zeta):
    """Evaluate the Padé form of f at real or complex dimensionless x."""
    x = np.asarray(x, dtype=complex)
    terms = 2.0 * x[..., None] / (x[..., None] ** 2 + zeta**2)
    out = 0.5 - np.sum(kappa * terms, axis=-1)
    return out if out.ndim else out[()]


def coth_pade_eval(y, kappa, zeta):
    """Evaluate the Padé form of coth at real or complex dimensionless y."""
    y = np.asarray(y, dtype=complex)
    terms = 2.0 * y[..., None] / (y[..., None] ** 2 + zeta**2)
    out = 1.0 / y + np.sum(kappa * terms, axis=-1)
    return out if out.ndim else out[()]


def _nudge_collisions(values, reference):
    """Shift entries of ``values`` that coincide with ``reference`` or each other."""
    vals = np.array(values, dtype=float)
    scale = max(abs(reference), vals.max(initial=0.0), 1.0)
    for i in range(len(vals)):
        while (abs(vals[i] - reference) < _COLLISION_RTOL * scale
               or np.any(np.abs(vals[i] - np.delete(vals, i)) < _COLLISION_RTOL * scale)):
            vals[i] *= 1.0 + _NUDGE
    return vals


def fermionic_modes(p: ModelParams, alpha, s, n_pade):
    """Exponential expansion of C^s_alpha(t) (prefactor Gamma_alpha removed).

    One mode comes from the pole of the Lorentzian coupling density at
    eps = mu + i*s*D (decay rate D - i*s*mu); the remaining ``n_pade`` modes
    are the Padé poles of the Fermi function (decay rates zeta_q*T - i*s*mu).
    The residues carry the Padé-consistent value of f at the Lorentzian pole
    so that the finite sum reproduces the Padé-approximated integral exactly.
    """
    if s not in _SIGNS:
        raise InvalidParameterError(f"sign must be +1 or -1, got {s}")
    _, d_band, mu, temp = p.lead(alpha)
    if temp <= 0:
        raise InvalidParameterError("lead temperature must be > 0")
    kappa, zeta = pade_fermi(n_pade)
    # keep Padé decay rates clear of the Lorentzian rate D
    zt = _nudge_collisions(zeta * temp, d_band)
    beta_d = d_band / temp
    # f_Padé(i*beta*D): the 2x/(x^2+zeta^2) terms evaluated on the imaginary axis
    f_at_pole = 0.5 - 1j * np.sum(kappa * 2.0 * beta_d / (zeta**2 - beta_d**2))
    modes = [ExpansionMode(eta=complex(0.5 * d_band * f_at_pole),
                           gamma=complex(d_band, -s * mu))]
    for kq, g in zip(kappa, zt):
        eta = -1j * temp * kq * d_band**2 / (d_band**2 - g**2)
        modes.append(ExpansionMode(eta=complex(eta), gamma=complex(g, -s * mu)))
    return modes


def bosonic_modes(p: ModelParams, n_pade):
    """Exponential expansion of C_bose(t) (prefactor Lambda removed).

    The Lorentzian cutoff contributes the mode at gamma = omega_c with the
    Padé-consistent coth value on the imaginary axis; each Padé pole of coth
    contributes a real mode at gamma = 2*zeta_j*T_bath.
    """
    if p.T_bath <= 0:
        raise InvalidParameterError("bath temperature must be > 0")
    wc, om, temp = p.omega_c, p.Omega, p.T_bath
    kappa, zeta = pade_bose(n_pade)
    nu = _nudge_collisions(2.0 * zeta * temp, wc)
    u = wc / (2.0 * temp)
    zeta_eff = nu / (2.0 * temp)
    # Padé value of cot(beta*wc/2): coth_P(-i u) = i * c0
    c0 = 1.0 / u - np.sum(kappa * 2.0 * u / (zeta_eff**2 - u**2))
    modes = [ExpansionMode(eta=complex(wc**2 / (2.0 * om) * (c0 - 1j)),
                           gamma=complex(wc))]
    for kj, nj in zip(kappa, nu):
        eta = -2.0 * kj * temp * nj * wc**2 / (om * (wc**2 - nj**2))
        modes.append(ExpansionMode(eta=complex(eta), gamma=complex(nj)))
    return modes


def reconstruct(modes, t):
    """Sum of exponentials sum_q eta_q exp(-gamma_q t) on an array of times."""
    t = np.asarray(t, dtype=float)
    out = np.zeros(t.shape, dtype=complex)
    for m in modes:
        out += m.eta * np.exp(-m.gamma * t)
    return out


def _expansion_error(modes_small, modes_ref, t_grid):
    ref = reconstruct(modes_ref, t_grid)
    small = reconstruct(modes_small, t_grid)
    scale = max(abs(reconstruct(modes_ref, np.array([0.0]))[0]), 1e-300)
    return float(np.max(np.abs(ref - small)) / scale)


_AUTO_LADDER = (6, 8, 12, 16, 20, 28, 40, 60)
_AUTO_REF = 90


def auto_pade_count_fermi(p: ModelParams, alpha, s, tol=1e-6):
    """Smallest ladder Padé count reproducing C^s_alpha to ``tol`` (relative).

    The error is measured against a large-N reference expansion on a linear
    grid over [0, 10/max(Gamma, T)].  Note that any finite pole count leaves
    a transient error in Im C on the sub-1/D scale (the Padé form of f is
    exact at t = 0 and accurate for t well above 1/D, with a hump between);
    the linear grid matches the scale on which the expansion is consumed.
    """
    gam, _, _, temp = p.lead(alpha)
    t_max = 10.0 / max(gam, temp)
    t_grid = np.linspace(0.0, t_max, 161)
    ref = fermionic_modes(p, alpha, s, _AUTO_REF)
    for n in _AUTO_LADDER:
        if _expansion_error(fermionic_modes(p, alpha, s, n), ref, t_grid) < tol:
            return n
    return _AUTO_REF


def auto_pade_count_bose(p: ModelParams, tol=1e-6):
    """Smallest ladder Padé count reproducing C_bose on t in [1/(2 Omega), 20/Omega].

    The grid starts above t = 0 because the zero-point part of C_bose(0) is
    log-divergent for the Lorentzian-cutoff Ohmic density, so the t -> 0
    value is representation-dependent at any finite pole count.
    """
    t_max = 20.0 / p.Omega
    t_grid = np.linspace(0.5 / p.Omega, t_max, 161)
    ref = bosonic_modes(p, _AUTO_REF)
    for n in _AUTO_LADDER:
        if _expansion_error(bosonic_modes(p, n), ref, t_grid) < tol:
            return n
    return _AUTO_REF


class BathExpansion:
    """All expansion modes of one parameter set, plus flat mode tables.

    ``fermionic[(alpha, s)]`` lists the modes of C^s_alpha; ``bosonic`` those
    of C_bose (empty when Lambda = 0).  ``f_table`` flattens the fermionic
    modes into global ids used by the hierarchy, ordered (lead, sign, q).
    """

    def __init__(self, params: ModelParams, *, n_fermi=None, n_bose=None,
                 tol=1e-6):
        if n_fermi is None:
            n_fermi = max(auto_pade_count_fermi(params, a, s, tol)
                          for a in _LEADS for s in _SIGNS)
        self.pade_count_fermi = int(n_fermi)
        self.fermionic = {}
        for alpha in _LEADS:
            for s in _SIGNS:
                self.fermionic[(alpha, s)] = tuple(
                    fermionic_modes(params, alpha, s, self.pade_count_fermi))
        if params.Lambda > 0:
            if n_bose is None:
                n_bose = auto_pade_count_bose(params, tol)
            self.pade_count_bose = int(n_bose)
            self.bosonic = tuple(bosonic_modes(params, self.pade_count_bose))
        else:
            self.pade_count_bose = 0
            self.bosonic = ()

        # flat fermionic table: fid -> (alpha_idx, s, q, eta, gamma)
        table = []
        for ai, alpha in enumerate(_LEADS):
            for s in _SIGNS:
                for q, mode in enumerate(self.fermionic[(alpha, s)]):
                    table.append((ai, s, q, mode.eta, mode.gamma))
        self.f_table = tuple(table)
        self.n_modes_per_branch = self.pade_count_fermi + 1
        self._conj = {}
        lookup = {(ai, s, q): fid for fid, (ai, s, q, _, _) in enumerate(table)}
        for fid, (ai, s, q, _, _) in enumerate(table):
            self._conj[fid] = lookup[(ai, -s, q)]
        self.gamma_L = params.Gamma_L
        self.gamma_R = params.Gamma_R
        self.Lambda = params.Lambda

    @property
    def n_fermionic(self):
        return len(self.f_table)

    @property
    def n_bosonic(self):
        return len(self.bosonic)

    def conjugate_fid(self, fid):
        """Mode id of the sign-flipped partner (same lead and Padé index)."""
        return self._conj[fid]

    def fid_coupling(self, fid):
        """Lead coupling Gamma_alpha of a fermionic mode id."""
        return self.gamma_L if self.f_table[fid][0] == 0 else self.gamma_R


_cache: dict = {}
_cache_lock = threading.Lock()


def _cache_key(params: ModelParams, n_fermi, n_bose, tol):
    lead_part = tuple((params.lead(a)[0], params.lead(a)[1], params.lead(a)[2],
                       params.lead(a)[3]) for a in _LEADS)
    bose_part = (params.Lambda, params.omega_c, params.Omega, params.T_bath)
    return (lead_part, bose_part, n_fermi, n_bose, tol)


def build_bath_expansion(params: ModelParams, *, n_fermi=None, n_bose=None,
                         tol=1e-6):
    """Cached :class:`BathExpansion` for a parameter set.

    The cache key contains every quantity the modes depend on (per-lead
    Gamma, D, mu, T plus the bosonic parameters), so bias or temperature
    sweeps automatically rebuild.  Safe for concurrent readers.
    """
    key = _cache_key(params, n_fermi, n_bose, tol)
    with _cache_lock:
        hit = _cache.get(key)
    if hit is not None:
        return hit
    exp = BathExpansion(params, n_fermi=n_fermi, n_bose=n_bose, tol=tol)
    with _cache_lock:
        _cache.setdefault(key, exp)
        return _cache[key]
