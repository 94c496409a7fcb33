"""Reduced-order Li-ion cell model with two degradation knobs.

The cell is a single 18650 described by

    ocv(z) = v_min + (v_full - v_min) * z**p_exp        (open circuit)
    v(z,i) = ocv(z) - i * r0                            (under discharge)
    dz/dt  = -i / q_max                                 (coulomb counting)

where z is the state of charge in [0, 1].  The two degradation parameters
are ``q_max`` (total available charge, coulombs; larger = healthier) and
``r0`` (ohmic internal resistance; larger = more degraded).  Discharge
ends when the terminal voltage first touches the cutoff ``v_cut``.

Discharge-only model: charging is handled upstream as an instantaneous
reset to z = 1.  Thermal and diffusion transients are out of scope.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

# Sampling box for the degradation parameters (uniform draws).
DEFAULT_Q_MAX_RANGE = (5000.0, 8000.0)  # coulombs
DEFAULT_R0_RANGE = (0.017, 0.45)        # ohms


@dataclass(frozen=True)
class BatteryParams:
    """Cell parameters: the (q_max, r0) degradation pair plus OCV shape."""

    q_max: float
    r0: float
    v_full: float = 4.2   # OCV at z = 1
    v_min: float = 3.0    # OCV at z = 0
    p_exp: float = 0.9    # OCV shape exponent
    v_cut: float = 3.0    # end-of-discharge cutoff

    def __post_init__(self):
        if self.q_max <= 0:
            raise ValueError(f"q_max must be positive, got {self.q_max}")
        if self.r0 < 0:
            raise ValueError(f"r0 must be non-negative, got {self.r0}")
        if not self.v_full > self.v_min:
            raise ValueError("v_full must exceed v_min")
        if self.v_cut > self.v_min:
            raise ValueError("v_cut above v_min is not supported")
        if not 0 < self.p_exp <= 2:
            raise ValueError(f"p_exp must be in (0, 2], got {self.p_exp}")


@dataclass(frozen=True)
class BatteryState:
    """Instantaneous cell state during a discharge."""

    z: float            # state of charge in [0, 1]
    v_terminal: float   # volts, under the load applied at time t
    t: float            # elapsed seconds


@dataclass
class VoltageTrajectory:
    """Sampled discharge trace (t, current, voltage) plus the EOD marker.

    ``soc`` is carried alongside for diagnostics; CSV export keeps the
    three-column (t, current, voltage) format.
    """

    t: np.ndarray
    current: np.ndarray
    voltage: np.ndarray
    soc: np.ndarray
    eod_time: float | None
    eod_reached: bool

    def __len__(self) -> int:
        return len(self.t)

    @property
    def samples(self):
        """Iterate (t, current, voltage) tuples."""
        return zip(self.t, self.current, self.voltage)

    @property
    def duration(self) -> float:
        return float(self.t[-1]) if len(self.t) else 0.0


def ocv(z, params: BatteryParams):
    """Open-circuit voltage at state of charge z (scalar or array)."""
    zarr = np.asarray(z, dtype=float)
    if np.any(zarr < 0) or np.any(zarr > 1):
        raise ValueError("state of charge must lie in [0, 1]")
    out = params.v_min + (params.v_full - params.v_min) * zarr ** params.p_exp
    return float(out) if np.isscalar(z) or zarr.ndim == 0 else out


def terminal_voltage(z, current: float, params: BatteryParams):
    """Voltage under a discharge current: ocv(z) - current * r0."""
    if current < 0:
        raise ValueError("charging currents are not supported; recharge is an instantaneous reset")
    v = ocv(z, params) - current * params.r0
    return v


def step(state: BatteryState, current: float, dt: float, params: BatteryParams) -> BatteryState:
    """Advance one explicit-Euler step of the coulomb-counting ODE."""
    if dt <= 0:
        raise ValueError(f"dt must be positive, got {dt}")
    if not 0 <= state.z <= 1:
        raise ValueError("state of charge out of [0, 1]")
    z_new = max(0.0, state.z - current * dt / params.q_max)
    return BatteryState(z=z_new, v_terminal=terminal_voltage(z_new, current, params), t=state.t + dt)


def _segment_pairs(profile) -> list[tuple[float, float]]:
    """Normalize a current profile into (duration_s, current_a) pairs.

    Accepts a flight profile object (anything with ``pairs()``) or a bare
    sequence of (duration, current) tuples.
    """
    if hasattr(profile, "pairs"):
        pairs = list(profile.pairs())
    else:
        pairs = [(float(d), float(i)) for d, i in profile]
    if not pairs:
        raise ValueError("current profile is empty")
    for duration, current in pairs:
        if duration < 0:
            raise ValueError(f"segment duration must be non-negative, got {duration}")
        if current < 0:
            raise ValueError(f"segment current must be non-negative, got {current}")
    return pairs


def simulate_discharge(
    params: BatteryParams,
    profile,
    initial_z: float = 1.0,
    dt: float = 0.1,
) -> VoltageTrajectory:
    """Integrate a piecewise-constant current profile until EOD or profile end.

    Samples are taken at every ``dt`` within each segment plus the exact
    segment boundary, so coulomb counting is exact.  The trace stops at the
    first sample with v <= v_cut; ``eod_time`` is then refined by linear
    interpolation between the bracketing samples.
    """
    if not 0 <= initial_z <= 1:
        raise ValueError("initial_z must lie in [0, 1]")
    if dt <= 0 or dt > 1.0:
        raise ValueError(f"dt must lie in (0, 1] seconds, got {dt}")
    pairs = _segment_pairs(profile)

    t_parts = [np.array([0.0])]
    i_parts = [np.array([pairs[0][1]])]
    dq_parts = [np.array([0.0])]
    t0 = 0.0
    for duration, current in pairs:
        if duration <= 0:
            continue
        n_full = int(math.floor(duration / dt + 1e-9))
        local = np.arange(1, n_full + 1) * dt
        rem = duration - n_full * dt
        if rem > 1e-9:
            local = np.append(local, duration)
        if len(local) == 0:
            continue
        steps = np.diff(np.concatenate(([0.0], local)))
        t_parts.append(t0 + local)
        i_parts.append(np.full(len(local), current))
        dq_parts.append(current * steps)
        t0 += duration

    t = np.concatenate(t_parts)
    current_arr = np.concatenate(i_parts)
    dq = np.concatenate(dq_parts)
    z = np.maximum(0.0, initial_z - np.cumsum(dq) / params.q_max)
    v = params.v_min + (params.v_full - params.v_min) * z ** params.p_exp - current_arr * params.r0

    below = v <= params.v_cut
    if below.any():
        k = int(np.argmax(below))
        if k == 0:
            eod_time = 0.0
        else:
            v_hi, v_lo = v[k - 1], v[k]
            frac = (v_hi - params.v_cut) / (v_hi - v_lo)
            eod_time = float(t[k - 1] + frac * (t[k] - t[k - 1]))
        sl = slice(0, k + 1)
        return VoltageTrajectory(t[sl], current_arr[sl], v[sl], z[sl], eod_time, True)
    return VoltageTrajectory(t, current_arr, v, z, None, False)


def voltage_response(params: BatteryParams, profile, times, initial_z: float = 1.0) -> np.ndarray:
    """Exact open-loop terminal voltage at arbitrary times (no cutoff).

    Measurement-mode evaluation of the same model: charge is integrated in
    closed form (piecewise linear in t), and no end-of-discharge truncation
    is applied.  Used for observation synthesis and model fitting.
    """
    if not 0 <= initial_z <= 1:
        raise ValueError("initial_z must lie in [0, 1]")
    pairs = _segment_pairs(profile)
    times = np.asarray(times, dtype=float)
    bounds = np.cumsum([d for d, _ in pairs])
    if np.any(times < 0) or np.any(times > bounds[-1] + 1e-9):
        raise ValueError("times fall outside the profile span")
    knots_t = np.concatenate(([0.0], bounds))
    knots_q = np.concatenate(([0.0], np.cumsum([d * i for d, i in pairs])))
    charge = np.interp(times, knots_t, knots_q)
    seg_idx = np.minimum(np.searchsorted(bounds, times, side="right"), len(pairs) - 1)
    currents = np.array([i for _, i in pairs])[seg_idx]
    z = np.clip(initial_z - charge / params.q_max, 0.0, 1.0)
    return params.v_min + (params.v_full - params.v_min) * z ** params.p_exp - currents * params.r0


def soc_at_cutoff(params: BatteryParams, current: float) -> float:
    """State of charge at which v(z, current) first equals v_cut.

    Solving ocv(z) - current*r0 = v_cut gives
    z = ((v_cut - v_min + current*r0) / (v_full - v_min)) ** (1/p_exp),
    clamped to [0, 1].  A result of 1 means the cell cuts off instantly.
    """
    if current < 0:
        raise ValueError("current must be non-negative")
    num = params.v_cut - params.v_min + current * params.r0
    if num <= 0:
        return 0.0
    frac = num / (params.v_full - params.v_min)
    if frac >= 1.0:
        return 1.0
    return frac ** (1.0 / params.p_exp)


def eod_time_cc(params: BatteryParams, current: float) -> float:
    """Closed-form end-of-discharge time under a constant current.

    With z_eod = soc_at_cutoff, the linear SOC decay gives
    t = q_max * (1 - z_eod) / current; zero if the cell cuts off instantly.
    Serves as the analytic oracle for simulate_discharge.
    """
    if current <= 0:
        raise ValueError(f"current must be positive, got {current}")
    z_eod = soc_at_cutoff(params, current)
    if z_eod >= 1.0:
        return 0.0
    return params.q_max * (1.0 - z_eod) / current


def sample_health(
    rng: np.random.Generator,
    q_max_range: tuple[float, float] = DEFAULT_Q_MAX_RANGE,
    r0_range: tuple[float, float] = DEFAULT_R0_RANGE,
) -> BatteryParams:
    """Draw (q_max, r0) independently and uniformly from the given ranges."""
    if q_max_range[0] > q_max_range[1] or r0_range[0] > r0_range[1]:
        raise ValueError("sampling ranges must be (low, high) with low <= high")
    q = rng.uniform(q_max_range[0], q_max_range[1])
    r = rng.uniform(r0_range[0], r0_range[1])
    return BatteryParams(q_max=q, r0=r)
