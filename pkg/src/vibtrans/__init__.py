"""Solvers and analysis tools for a periodically driven vibronic junction."""

from .bathdecomp import (BathExpansion, ExpansionMode, bosonic_modes,
                         build_bath_expansion, fermionic_modes, pade_bose,
                         pade_fermi)
from .fqme import QmeSolver, franck_condon, franck_condon_matrix, modified_fermi
from .heom import (AdoKey, HeomSolver, HierarchyState, charge_current,
                   enumerate_hierarchy, heom_rhs, importance_value,
                   observables, propagate)
from .model import (HBAR_FS, ModelParams, SystemOperators,
                    build_system_hamiltonian, counter_term_coefficient,
                    drive_energy, lead_spectral_density,
                    phonon_spectral_density, polaron_shifted_energy)
from .protocol import (LimitCycleSummary, TimeSeries, adiabatic_reference,
                       fourier_components, induced_power, phase_shift,
                       run_protocol)

__all__ = [
    "AdoKey", "BathExpansion", "ExpansionMode", "HBAR_FS", "HeomSolver",
    "HierarchyState", "LimitCycleSummary", "ModelParams", "QmeSolver",
    "SystemOperators", "TimeSeries", "adiabatic_reference",
    "bosonic_modes", "build_bath_expansion", "build_system_hamiltonian",
    "charge_current", "counter_term_coefficient", "drive_energy",
    "enumerate_hierarchy", "fermionic_modes", "fourier_components",
    "franck_condon", "franck_condon_matrix", "heom_rhs", "importance_value",
    "induced_power", "lead_spectral_density", "modified_fermi", "observables",
    "pade_bose", "pade_fermi", "phase_shift", "phonon_spectral_density",
    "polaron_shifted_energy", "propagate", "run_protocol",
]

__version__ = "0.1.0"
