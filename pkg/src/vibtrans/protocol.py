"""Driving protocol, limit-cycle detection, and cycle characterization.

A run has three phases: relax the undriven system to its stationary state,
switch on the drive and iterate whole periods until the stroboscopic state
stops changing (the limit cycle), then record one period at fine
resolution.  Cycle observables are characterized by their average,
peak-to-peak amplitude, and the phase of the fundamental discrete Fourier
component (optionally relative to the quasi-static response).

Both solvers are linear in the state, so the stationary state and the
limit cycle are fixed points of linear maps; when plain iteration
converges slowly (near-resonant driving) the fixed point is obtained
matrix-free with LGMRES and then re-verified against the plain
stroboscopic criterion.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse.linalg as spla

from .errors import InvalidParameterError, NonConvergenceError, UndefinedPhaseError
from .model import drive_energy

_CHANNELS = ("population", "displacement", "occupation")


@dataclass
class TimeSeries:
    """Sampled observable trajectories: one row of ``values`` per channel."""

    times: np.ndarray
    channels: tuple
    values: np.ndarray

    def __post_init__(self):
        self.times = np.asarray(self.times, dtype=float)
        self.values = np.atleast_2d(np.asarray(self.values, dtype=float))
        if np.any(np.diff(self.times) <= 0):
            raise InvalidParameterError("times must be strictly increasing")
        if self.values.shape != (len(self.channels), len(self.times)):
            raise InvalidParameterError("values shape does not match channels/times")

    def channel(self, name):
        return self.values[self.channels.index(name)]


@dataclass
class LimitCycleSummary:
    """Cycle averages, amplitudes, and phases of the recorded limit cycle."""

    average: dict
    amplitude: dict
    phase: dict
    delay: dict
    avg_power: float
    avg_current_L: float
    avg_current_R: float
    avg_current: float
    omega_d: float
    n_warmup_cycles: int = 0
    residual: float = 0.0
    converged: bool = True
    fundamental: dict = field(default_factory=dict)


def fourier_components(times, values, omega_d):
    """Discrete Fourier components a_k = (1/N) sum_j e^{-i k w t_j} O_j.

    The samples must cover exactly one period of ``omega_d`` with uniform
    spacing (endpoint excluded); returns a_0 .. a_{N//2}.
    """
    times = np.asarray(times, dtype=float)
    values = np.asarray(values, dtype=float)
    n = len(times)
    if n < 2:
        raise InvalidParameterError("need at least two samples")
    dt = np.diff(times)
    if np.max(np.abs(dt - dt[0])) > 1e-9 * dt[0]:
        raise InvalidParameterError("samples must be uniformly spaced")
    period = 2 * np.pi / omega_d
    if abs(n * dt[0] - period) > 1e-6 * period:
        raise InvalidParameterError("samples must cover exactly one period")
    ks = np.arange(n // 2 + 1)
    phases = np.exp(-1j * omega_d * np.outer(ks, times))
    return phases @ values / n


def phase_shift(series, reference, omega_d, *, times=None, ref_times=None):
    """Principal-branch phase of the fundamental relative to a reference.

    ``series`` and ``reference`` are sample arrays over one period (their
    time grids default to a shared uniform grid).  Raises
    :class:`UndefinedPhaseError` when either fundamental vanishes, which
    happens at the resonant response collapse.
    """
    series = np.asarray(series, dtype=float)
    reference = np.asarray(reference, dtype=float)
    period = 2 * np.pi / omega_d
    if times is None:
        times = np.arange(len(series)) * period / len(series)
    if ref_times is None:
        ref_times = np.arange(len(reference)) * period / len(reference)
    a1 = fourier_components(times, series, omega_d)[1]
    b1 = fourier_components(ref_times, reference, omega_d)[1]
    if abs(a1) < 1e-12 or abs(b1) < 1e-12:
        raise UndefinedPhaseError(
            f"fundamental too small to define a phase (|a1|={abs(a1):.2e}, "
            f"|b1|={abs(b1):.2e})")
    return wrap_phase(np.angle(a1) - np.angle(b1))


def wrap_phase(phi):
    """Map an angle to the principal branch (-pi, pi]."""
    out = (phi + np.pi) % (2 * np.pi) - np.pi
    if out == -np.pi:
        out = np.pi
    return float(out)


def induced_power(times, population, params):
    """Instantaneous drive power A_D*w_D*cos(w_D t)*<n_d> and its average."""
    times = np.asarray(times, dtype=float)
    population = np.asarray(population, dtype=float)
    series = params.A_D * params.Omega_D * np.cos(params.Omega_D * times) * population
    return series, float(series.mean())


# -- fixed-point machinery ----------------------------------------------------


def _observable_residual(obs_a, obs_b, scales):
    return max(abs(obs_a[c] - obs_b[c]) / scales[c] for c in _CHANNELS)


def _channel_scales(solver):
    p = solver.params
    g = abs(p.lam) / p.Omega
    return {"population": 1.0,
            "displacement": max(1.0, 4.0 * g),
            "occupation": max(1.0, 2.0 * g * g)}


def _lgmres_fixed_point(apply_map, y, tol, budget):
    """Solve y* = M(y*) for the linear map M, starting from y.

    Returns (y*, n_applications).  The map preserves the root trace, so the
    Krylov correction stays traceless and the fixed point keeps trace one.
    """
    count = [0]

    def wrapped(v):
        count[0] += 1
        return apply_map(v.reshape(y.shape)).ravel()

    r0 = wrapped(y.ravel()).reshape(y.shape) - y
    op = spla.LinearOperator((y.size, y.size), dtype=complex,
                             matvec=lambda v: v - wrapped(v))
    rhs = r0.ravel()
    maxiter = max(2, int(budget // 25))
    z, info = spla.lgmres(op, rhs, rtol=tol, atol=tol * np.linalg.norm(rhs),
                          inner_m=25, maxiter=maxiter)
    return y + z.reshape(y.shape), count[0]


def _aitken_step(y_prev2, y_prev, y_now):
    """Vector Aitken extrapolation; returns None when not contracting."""
    d1 = y_prev - y_prev2
    d2 = y_now - y_prev
    denom = np.vdot(d1, d1)
    if denom == 0:
        return None
    r = np.vdot(d1, d2) / denom
    if abs(r) >= 0.99:
        return None
    return y_now + d2 * (r / (1.0 - r))


def find_stationary(solver, y=None, *, tol=1e-6, window=None, max_windows=200,
                    use_lgmres=True, record=None, propagate_kwargs=None):
    """Relax to the stationary state of the undriven generator.

    Convergence requires the observables to drift by less than ``tol``
    (channel-normalized) across a window of ten relaxation times.  The
    trajectory can be recorded through ``record`` (a callable receiving
    (t, state)).
    """
    p = solver.params
    if y is None:
        y = solver.initial_state()
    if window is None:
        window = 1.0 / max(p.gamma_total, 1e-6)
    kw = dict(propagate_kwargs or {})
    scales = _channel_scales(solver)

    def step(state, t0=0.0):
        out, _ = solver.propagate(state, t0, t0 + window, driven=False, **kw)
        return out

    history = [dict(solver.observables(y))]
    states = [y]
    t = 0.0
    plain_budget = 12 if use_lgmres else max_windows
    for it in range(max_windows):
        y = step(y, t)
        t += window
        history.append(dict(solver.observables(y)))
        if record is not None:
            record(t, y)
        states.append(y)
        if len(states) > 3:
            states.pop(0)
        lookback = min(10, len(history) - 1)
        res = max(_observable_residual(history[-1], history[-1 - j], scales)
                  for j in range(1, lookback + 1))
        if len(history) >= 11 and res < tol:
            return y, res
        if len(states) == 3 and it % 3 == 2:
            cand = _aitken_step(*states)
            if cand is not None:
                cand_next = step(cand, t)
                if _observable_residual(solver.observables(cand_next),
                                        solver.observables(cand), scales) < \
                        _observable_residual(history[-1], history[-2], scales):
                    y = cand_next
                    history.append(dict(solver.observables(y)))
                    states = [y]
        if use_lgmres and it + 1 >= plain_budget:
            y_fix, _ = _lgmres_fixed_point(lambda v: step(v, t), y,
                                           min(tol * 1e-2, 1e-8),
                                           budget=25 * 40)
            y_next = step(y_fix, t)
            res = _observable_residual(solver.observables(y_next),
                                       solver.observables(y_fix), scales)
            if res < tol:
                return y_next, res
            states = [y_next]
            history.append(dict(solver.observables(y_next)))
            y = y_next
            plain_budget += 12
    raise NonConvergenceError("stationary state did not converge", residual=res)


def find_limit_cycle(solver, y, *, cycle_tol=1e-6, max_cycles=500,
                     plain_cycles=8, record=None, propagate_kwargs=None):
    """Iterate whole driving periods until the stroboscopic state is periodic.

    Returns (state at a period boundary, cycles used, residual).  After any
    accelerated solve the stroboscopic criterion is re-verified with one
    plain period, so the returned state always satisfies it.
    """
    p = solver.params
    period = 2 * np.pi / p.Omega_D
    kw = dict(propagate_kwargs or {})
    scales = _channel_scales(solver)

    cycles = [0]

    def one_period(state):
        t0 = cycles[0] * period
        out, _ = solver.propagate(state, t0, t0 + period, driven=True, **kw)
        return out

    def one_period_map(state):
        # map for the accelerated solve: fixed t-origin, same monodromy
        out, _ = solver.propagate(state, 0.0, period, driven=True, **kw)
        return out

    prev_obs = dict(solver.observables(y))
    res = np.inf
    states = [y]
    for n in range(1, max_cycles + 1):
        y = one_period(y)
        cycles[0] = n
        obs = dict(solver.observables(y))
        if record is not None:
            record(n * period, y)
        res = _observable_residual(obs, prev_obs, scales)
        prev_obs = obs
        states.append(y)
        if len(states) > 3:
            states.pop(0)
        if res < cycle_tol:
            return y, n, res
        if n >= plain_cycles:
            break
    # accelerated fixed point of the monodromy map
    budget = max(25, max_cycles - cycles[0])
    y_fix, used = _lgmres_fixed_point(one_period_map, y,
                                      min(cycle_tol * 1e-2, 1e-8), budget)
    y_next = one_period_map(y_fix)
    res = _observable_residual(solver.observables(y_next),
                               solver.observables(y_fix), scales)
    cycles[0] += used + 1
    if res < cycle_tol:
        return y_next, cycles[0], res
    # fall back to plain iteration with the remaining budget
    y = y_next
    prev_obs = dict(solver.observables(y))
    while cycles[0] < max_cycles:
        y = one_period_map(y)
        cycles[0] += 1
        obs = dict(solver.observables(y))
        res = _observable_residual(obs, prev_obs, scales)
        prev_obs = obs
        if res < cycle_tol:
            return y, cycles[0], res
    raise NonConvergenceError(
        f"limit cycle not reached within {max_cycles} cycles", residual=res)


# -- protocol ----------------------------------------------------------------


def _record_cycle(solver, y, samples_per_cycle, propagate_kwargs):
    """One period at fine sampling; returns times, channel data, currents."""
    p = solver.params
    period = 2 * np.pi / p.Omega_D
    n_s = samples_per_cycle
    t_eval = np.arange(n_s + 1) * period / n_s
    kw = dict(propagate_kwargs or {})
    y_end, samples = solver.propagate(y, 0.0, period, driven=True,
                                      t_eval=t_eval, **kw)
    if samples.ndim == 2:
        samples = samples.reshape(n_s + 1, *np.shape(y))
    obs = {c: np.empty(n_s) for c in _CHANNELS}
    cur = np.empty((3, n_s))
    for j in range(n_s):
        rec = solver.observables(samples[j])
        for c in _CHANNELS:
            obs[c][j] = rec[c]
        cur[:, j] = solver.currents(samples[j], t_eval[j], True)
    closure = _channel_scales(solver)
    defect = max(abs(solver.observables(samples[-1])[c]
                     - solver.observables(samples[0])[c]) / closure[c]
                 for c in _CHANNELS)
    return t_eval[:n_s], obs, cur, defect, y_end


def run_protocol(params, solver, *, samples_per_cycle=128, cycle_tol=1e-6,
                 max_cycles=500, stationary_tol=None, y0=None,
                 adiabatic=None, record_transients=True,
                 propagate_kwargs=None):
    """Initialization, warm-up, and one finely sampled limit cycle.

    Returns ``(TimeSeries, LimitCycleSummary)``.  ``adiabatic`` optionally
    supplies the quasi-static reference series used for the phase shifts
    (otherwise phases are reported relative to the drive).  With A_D = 0
    the protocol degenerates to the stationary solve and the summary has
    zero amplitudes and power.
    """
    if samples_per_cycle < 16:
        raise InvalidParameterError("samples_per_cycle must be >= 16")
    p = params
    if stationary_tol is None:
        stationary_tol = cycle_tol
    trans_t, trans_v = [], []

    def rec(t, state):
        if record_transients:
            trans_t.append(t)
            trans_v.append([solver.observables(state)[c] for c in _CHANNELS])

    y_st, res0 = find_stationary(solver, y0, tol=stationary_tol,
                                 record=rec, propagate_kwargs=propagate_kwargs)

    if p.A_D == 0.0:
        obs = solver.observables(y_st)
        cur = solver.currents(y_st, 0.0, False)
        summary = LimitCycleSummary(
            average={c: obs[c] for c in _CHANNELS},
            amplitude={c: 0.0 for c in _CHANNELS},
            phase={c: 0.0 for c in _CHANNELS},
            delay={c: 0.0 for c in _CHANNELS},
            avg_power=0.0, avg_current_L=cur[0], avg_current_R=cur[1],
            avg_current=cur[2], omega_d=p.Omega_D, n_warmup_cycles=0,
            residual=res0, converged=True)
        times = np.asarray(trans_t) if trans_t else np.array([0.0])
        vals = (np.asarray(trans_v).T if trans_v
                else np.array([[obs[c]] for c in _CHANNELS]))
        return TimeSeries(times, _CHANNELS, vals), summary

    t_off = trans_t[-1] if trans_t else 0.0

    def rec2(t, state):
        if record_transients:
            trans_t.append(t_off + t)
            trans_v.append([solver.observables(state)[c] for c in _CHANNELS])

    y_lc, n_cycles, res = find_limit_cycle(
        solver, y_st, cycle_tol=cycle_tol, max_cycles=max_cycles,
        record=rec2, propagate_kwargs=propagate_kwargs)

    times, obs, cur, defect, _ = _record_cycle(solver, y_lc,
                                               samples_per_cycle,
                                               propagate_kwargs)
    power_series, p_avg = induced_power(times, obs["population"], p)

    average, amplitude, phase, delay, fundamental = {}, {}, {}, {}, {}
    for c in _CHANNELS:
        a = fourier_components(times, obs[c], p.Omega_D)
        average[c] = float(a[0].real)
        amplitude[c] = float(obs[c].max() - obs[c].min())
        fundamental[c] = complex(a[1])
        ref = None
        if adiabatic is not None:
            try:
                ref_a1 = fourier_components(
                    adiabatic.times, adiabatic.channel(c), p.Omega_D)[1]
                if abs(ref_a1) > 1e-12 and abs(a[1]) > 1e-12:
                    ref = wrap_phase(np.angle(a[1]) - np.angle(ref_a1))
            except InvalidParameterError:
                ref = None
        if ref is None:
            ref = wrap_phase(np.angle(a[1])) if abs(a[1]) > 1e-12 else np.nan
        phase[c] = ref
        delay[c] = ref / p.Omega_D if np.isfinite(ref) else np.nan

    summary = LimitCycleSummary(
        average=average, amplitude=amplitude, phase=phase, delay=delay,
        avg_power=p_avg, avg_current_L=float(cur[0].mean()),
        avg_current_R=float(cur[1].mean()), avg_current=float(cur[2].mean()),
        omega_d=p.Omega_D, n_warmup_cycles=n_cycles,
        residual=max(res, defect), converged=True, fundamental=fundamental)

    period = 2 * np.pi / p.Omega_D
    t3_off = (trans_t[-1] if trans_t else 0.0) + period
    full_t = np.concatenate([np.asarray(trans_t), t3_off + times]) \
        if trans_t else times
    cyc_vals = np.vstack([obs[c] for c in _CHANNELS])
    full_v = (np.hstack([np.asarray(trans_v).T, cyc_vals])
              if trans_v else cyc_vals)
    series = TimeSeries(full_t, _CHANNELS, full_v)
    return series, summary


def adiabatic_reference(params, solver, samples=32, *, tol=1e-8,
                        propagate_kwargs=None):
    """Quasi-static response over one drive phase (the slow-drive limit).

    For each sampled drive phase the level is frozen at its instantaneous
    energy and the stationary state is solved; the assembled series is the
    reference trajectory for phase-shift extraction.  It does not depend on
    the drive frequency, so one reference serves a whole frequency sweep.
    """
    p = params
    period = 2 * np.pi / p.Omega_D
    times = np.arange(samples) * period / samples
    eps_vals = drive_energy(p, times)
    cache = {}
    vals = np.empty((len(_CHANNELS), samples))
    for j, eps in enumerate(eps_vals):
        key = round(float(eps), 14)
        if key not in cache:
            sol_j = solver.with_eps0(float(eps))
            y, _ = find_stationary(sol_j, tol=tol,
                                   propagate_kwargs=propagate_kwargs)
            cache[key] = [sol_j.observables(y)[c] for c in _CHANNELS]
        vals[:, j] = cache[key]
    return TimeSeries(times, _CHANNELS, vals)
