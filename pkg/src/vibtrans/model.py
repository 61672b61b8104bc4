"""Model parameters, system operators, and spectral densities.

The system is a single electronic level with an externally driven energy
``eps_d(t) = eps0 + A_D*sin(Omega_D*t)``, coupled linearly to one harmonic
mode (frequency ``Omega``, coupling ``lam``).  Transport enters through two
electron reservoirs with Lorentzian spectral densities centered at their
chemical potentials; the mode is damped by an Ohmic phonon bath with a
Lorentzian cutoff.  Units: hbar = k_B = e = 1, energies in eV, times in
hbar/eV (multiply by ``HBAR_FS`` for femtoseconds).

The truncated system Hilbert space is |electron occupation> x |Fock level>
with the electron occupation as the slow (block) index: basis state
``e*n_osc + m`` for occupation ``e`` in {0, 1} and Fock level ``m``.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from functools import lru_cache

import numpy as np

from .errors import InvalidParameterError

#: hbar in eV*fs; converts times in hbar/eV to femtoseconds.
HBAR_FS = 0.6582119569


@dataclass(frozen=True)
class ModelParams:
    """Complete parameter set of the driven vibronic junction.

    All energies in eV (k_B = 1, so temperatures are in eV as well).

    Attributes
    ----------
    eps0 : float
        Static electronic level energy.
    lam : float
        Electronic-vibrational coupling.
    Omega : float
        Vibrational frequency.
    A_D, Omega_D : float
        Drive amplitude and drive frequency.
    Gamma_L, Gamma_R : float
        Lead coupling strengths (peak values of the Lorentzian densities).
    D_L, D_R : float
        Lead bandwidths.
    mu_L, mu_R : float
        Lead chemical potentials; the Lorentzian densities are centered here.
    T_L, T_R, T_bath : float
        Lead and phonon-bath temperatures.
    Lambda : float
        Phonon-bath coupling strength.
    omega_c : float
        Phonon-bath cutoff frequency.
    n_osc : int
        Fock-space truncation of the harmonic mode.
    """

    eps0: float = 0.0
    lam: float = 0.0
    Omega: float = 0.2
    A_D: float = 0.0
    Omega_D: float = 0.2
    Gamma_L: float = 0.0125
    Gamma_R: float = 0.0125
    D_L: float = 30.0
    D_R: float = 30.0
    mu_L: float = 0.0
    mu_R: float = 0.0
    T_L: float = 0.025
    T_R: float = 0.025
    T_bath: float = 0.025
    Lambda: float = 0.0
    omega_c: float | None = None
    n_osc: int = 20

    def __post_init__(self):
        if self.omega_c is None:
            # default cutoff equals the mode frequency
            object.__setattr__(self, "omega_c", self.Omega)
        for name in ("eps0", "lam", "Omega", "A_D", "Omega_D", "Gamma_L",
                     "Gamma_R", "D_L", "D_R", "mu_L", "mu_R", "T_L", "T_R",
                     "T_bath", "Lambda", "omega_c"):
            v = getattr(self, name)
            if not np.isfinite(v):
                raise InvalidParameterError(f"{name} must be finite, got {v}")
        if self.Gamma_L < 0 or self.Gamma_R < 0:
            raise InvalidParameterError("lead couplings must be >= 0")
        if self.Lambda < 0:
            raise InvalidParameterError("phonon coupling must be >= 0")
        if min(self.T_L, self.T_R, self.T_bath) <= 0:
            raise InvalidParameterError("temperatures must be > 0")
        if self.Omega <= 0:
            raise InvalidParameterError("vibrational frequency must be > 0")
        if self.n_osc < 2:
            raise InvalidParameterError("n_osc must be >= 2")

    @classmethod
    def make(cls, *, gamma=0.025, phi=0.0, temperature=0.025, t_bath=None,
             eps0=None, eps_bar0=None, lam=0.0, omega=0.2, **kwargs):
        """Build parameters from the customary scalar knobs.

        ``gamma`` is the total coupling, split symmetrically
        (Gamma_L = Gamma_R = gamma/2); ``phi`` is the bias, applied
        symmetrically (mu_L = phi/2 = -mu_R).  Exactly one of ``eps0``
        (bare level) or ``eps_bar0`` (polaron-shifted level, see
        :func:`polaron_shifted_energy`) may be given; default eps_bar0 = 0.
        """
        if eps0 is not None and eps_bar0 is not None:
            raise InvalidParameterError("give either eps0 or eps_bar0")
        if eps0 is None:
            shift = lam**2 / omega
            eps0 = (0.0 if eps_bar0 is None else eps_bar0) + shift
        if t_bath is None:
            t_bath = temperature
        return cls(eps0=eps0, lam=lam, Omega=omega,
                   Gamma_L=gamma / 2, Gamma_R=gamma / 2,
                   mu_L=phi / 2, mu_R=-phi / 2,
                   T_L=temperature, T_R=temperature, T_bath=t_bath,
                   **kwargs)

    def lead(self, alpha):
        """Return (Gamma, D, mu, T) of lead ``alpha`` ('L'/'R' or 0/1)."""
        if alpha in ("L", 0):
            return self.Gamma_L, self.D_L, self.mu_L, self.T_L
        if alpha in ("R", 1):
            return self.Gamma_R, self.D_R, self.mu_R, self.T_R
        raise InvalidParameterError(f"unknown lead {alpha!r}")

    @property
    def gamma_total(self):
        return self.Gamma_L + self.Gamma_R

    @property
    def bias(self):
        return self.mu_L - self.mu_R

    def replace(self, **kwargs):
        return replace(self, **kwargs)


def drive_energy(p: ModelParams, t):
    """Instantaneous level energy eps0 + A_D*sin(Omega_D*t)."""
    return p.eps0 + p.A_D * np.sin(p.Omega_D * t)


def polaron_shifted_energy(p: ModelParams, t):
    """Level energy renormalized by the vibronic coupling, eps_d(t) - lam^2/Omega."""
    if p.Omega <= 0:
        raise InvalidParameterError("Omega must be > 0 for the polaron shift")
    return drive_energy(p, t) - p.lam**2 / p.Omega


def lead_spectral_density(p: ModelParams, alpha, eps):
    """Lorentzian lead coupling density Gamma_a * D_a^2 / (D_a^2 + (eps - mu_a)^2).

    Centered at the chemical potential of the lead, so bath expansion modes
    must be rebuilt whenever ``mu_alpha`` changes.
    """
    gam, d, mu, _ = p.lead(alpha)
    return gam * d**2 / (d**2 + (np.asarray(eps) - mu) ** 2)


def phonon_spectral_density(p: ModelParams, omega):
    """Ohmic density with Lorentzian cutoff, Lambda*(w/Omega)*wc^2/(wc^2+w^2)."""
    w = np.asarray(omega, dtype=float)
    return p.Lambda * (w / p.Omega) * p.omega_c**2 / (p.omega_c**2 + w**2)


def counter_term_coefficient(p: ModelParams):
    """Coefficient of the (a^dag + a)^2 correction.

    Equals (1/pi) * Int_0^inf phonon_spectral_density(w)/w dw, which for the
    Lorentzian-cutoff Ohmic form evaluates to Lambda*omega_c/(2*Omega); it
    cancels the bath-induced softening of the mode frequency.
    """
    return p.Lambda * p.omega_c / (2.0 * p.Omega)


@lru_cache(maxsize=32)
def _cached_operators(n_osc: int):
    m = n_osc
    n = 2 * m
    a_osc = np.diag(np.sqrt(np.arange(1, m)), 1).astype(complex)
    eye2 = np.eye(2, dtype=complex)
    a = np.kron(eye2, a_osc)
    d = np.zeros((n, n), dtype=complex)
    d[:m, m:] = np.eye(m)
    return d, a


class SystemOperators:
    """Fixed operators on the truncated |occupation> x |Fock> space.

    ``d`` annihilates the electron (maps the occupied block onto the
    unoccupied one), ``a`` the vibrational quantum; ``x = a^dag + a`` is the
    displacement and ``n_d`` the electronic population.  The anticommutator
    {d, d^dag} = 1 holds exactly on the truncated space; [a, a^dag] = 1
    everywhere except the highest Fock level, where it equals 1 - n_osc.
    """

    def __init__(self, n_osc: int):
        self.n_osc = n_osc
        self.dim = 2 * n_osc
        d, a = _cached_operators(n_osc)
        self.d = d
        self.ddag = d.conj().T
        self.a = a
        self.adag = a.conj().T
        self.x = self.a + self.adag
        self.n_d = self.ddag @ self.d
        self.n_osc_op = self.adag @ self.a


def build_system_hamiltonian(p: ModelParams, t, *, include_counter_term=True,
                             eps_d=None):
    """Assemble the (time-dependent) system Hamiltonian as a dense matrix.

    H = eps_d(t) d^dag d + lam (a^dag + a) d^dag d + Omega a^dag a
        + c_ct (a^dag + a)^2,  c_ct = Lambda*omega_c/(2*Omega).

    ``eps_d`` overrides the driven level energy (used for frozen-drive
    stationary solves).
    """
    ops = SystemOperators(p.n_osc)
    if eps_d is None:
        eps_d = drive_energy(p, t)
    h = eps_d * ops.n_d + p.lam * (ops.x @ ops.n_d) + p.Omega * ops.n_osc_op
    if include_counter_term and p.Lambda > 0:
        h = h + counter_term_coefficient(p) * (ops.x @ ops.x)
    return h


def thermal_state(p: ModelParams, *, temperature=None):
    """Normalized Boltzmann state of the undriven system Hamiltonian."""
    if temperature is None:
        temperature = max(p.T_L, p.T_R, p.T_bath)
    h = build_system_hamiltonian(p, 0.0, eps_d=p.eps0)
    evals, vecs = np.linalg.eigh(h)
    w = np.exp(-(evals - evals.min()) / temperature)
    w /= w.sum()
    return (vecs * w) @ vecs.conj().T
