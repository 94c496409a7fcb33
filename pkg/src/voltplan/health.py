"""Health inference from a 20 s observation and conditioned discharge prediction.

Stand-in for a learned encoder/decoder with the same interface: a short
current/voltage observation identifies the degradation pair (q_max, r0) by
nonlinear least squares (coarse grid over the sampling box, then local
refinement), the estimate is min-max normalized into a 2-D health
embedding, and discharge trajectories for any planned current profile are
predicted by forward-simulating the cell model with the estimated pair.

Identifiability within the window comes from two signals: the ohmic drop
at load application pins r0, and the voltage slope under a known current
pins q_max.  The observation is synthesized in measurement mode (no
cutoff truncation), since it is a diagnostic probe rather than a mission
leg.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.optimize import least_squares

from .battery import (
    DEFAULT_Q_MAX_RANGE,
    DEFAULT_R0_RANGE,
    BatteryParams,
    VoltageTrajectory,
    simulate_discharge,
    voltage_response,
)
from . import flight

OBS_WINDOW_S = 20.0
OBS_DT_S = 0.5
DEFAULT_NOISE_SIGMA = 0.005  # volts

# Estimates are clamped to half/double the sampling box.
Q_MAX_CLAMP = (0.5 * DEFAULT_Q_MAX_RANGE[0], 2.0 * DEFAULT_Q_MAX_RANGE[1])
R0_CLAMP = (0.5 * DEFAULT_R0_RANGE[0], 2.0 * DEFAULT_R0_RANGE[1])

# Current scaling of the diagnostic observation profile.  Deliberately
# larger than mission scaling: the 20 s probe needs a few amperes of
# discharge for the voltage slope to resolve q_max above sensor noise.
DEFAULT_OBS_KAPPA = 0.08


class UnidentifiableObservationError(ValueError):
    """Observation carries no usable excitation (e.g. all currents zero)."""


@dataclass(frozen=True)
class Observation:
    """Current/voltage samples on a uniform grid spanning exactly 20 s."""

    t: np.ndarray
    current: np.ndarray
    voltage: np.ndarray
    noise_sigma: float

    def __post_init__(self):
        if abs(self.t[-1] - self.t[0] - OBS_WINDOW_S) > 1e-9:
            raise ValueError("observation must span exactly the 20 s window")


@dataclass(frozen=True)
class HealthEstimate:
    q_max_hat: float
    r0_hat: float
    residual_rms: float   # volts


@dataclass(frozen=True)
class HealthEmbedding:
    """Normalized (q_max, r0) coordinates in [0, 1]^2."""

    pc1: float
    pc2: float


@dataclass(frozen=True)
class DischargePrediction:
    trajectory: VoltageTrajectory
    predicted_eod_margin_s: float   # predicted EOD time minus profile duration
    feasible: bool


def diagnostic_profile(obs_kappa: float = DEFAULT_OBS_KAPPA) -> flight.CurrentProfile:
    """Takeoff/climb probe used to synthesize observations at full charge."""
    return flight.build_leg_profile(flight.reference_leg(), kappa=obs_kappa)


def observe(
    params: BatteryParams,
    profile,
    initial_z: float = 1.0,
    noise_sigma: float = DEFAULT_NOISE_SIGMA,
    rng: np.random.Generator | None = None,
) -> Observation:
    """Sample the first 20 s of the profile's voltage response at 0.5 s.

    Adds i.i.d. zero-mean Gaussian voltage noise of std ``noise_sigma``.
    The profile must span at least the observation window.
    """
    pairs = profile.pairs() if hasattr(profile, "pairs") else list(profile)
    span = sum(d for d, _ in pairs)
    if span < OBS_WINDOW_S - 1e-9:
        raise ValueError(f"profile spans {span:.1f} s; observation needs {OBS_WINDOW_S} s")
    times = np.arange(round(OBS_WINDOW_S / OBS_DT_S) + 1) * OBS_DT_S
    voltage = voltage_response(params, pairs, times, initial_z)
    currents = _currents_at(pairs, times)
    if noise_sigma > 0:
        if rng is None:
            raise ValueError("rng required when noise_sigma > 0")
        voltage = voltage + rng.normal(0.0, noise_sigma, size=times.shape)
    return Observation(t=times, current=currents, voltage=voltage, noise_sigma=noise_sigma)


def _currents_at(pairs, times: np.ndarray) -> np.ndarray:
    bounds = np.cumsum([d for d, _ in pairs])
    idx = np.minimum(np.searchsorted(bounds, times, side="right"), len(pairs) - 1)
    return np.array([i for _, i in pairs])[idx]


def infer_health(
    obs: Observation,
    q_max_range: tuple[float, float] = DEFAULT_Q_MAX_RANGE,
    r0_range: tuple[float, float] = DEFAULT_R0_RANGE,
    grid_shape: tuple[int, int] = (50, 50),
    initial_z: float = 1.0,
) -> HealthEstimate:
    """Fit (q_max, r0) to the observation by grid-initialized least squares.

    The forward model zero-order-holds the observed currents between
    samples; the coarse grid spans the sampling box, the local refinement
    may move within the clamp box.  Grid ties break toward the smallest
    (q, r) lexicographic index.
    """
    if np.all(obs.current == 0):
        raise UnidentifiableObservationError("all-zero currents: r0 is unidentifiable")

    dt = np.diff(obs.t)
    charge = np.concatenate(([0.0], np.cumsum(obs.current[:-1] * dt)))
    p = BatteryParams(q_max=1.0, r0=0.0)  # defaults carry the OCV shape
    v_span = p.v_full - p.v_min

    def model(q: np.ndarray, r: np.ndarray) -> np.ndarray:
        z = np.clip(initial_z - charge / q[..., None], 0.0, 1.0)
        return p.v_min + v_span * z ** p.p_exp - obs.current * r[..., None]

    q_grid = np.linspace(q_max_range[0], q_max_range[1], grid_shape[0])
    r_grid = np.linspace(r0_range[0], r0_range[1], grid_shape[1])
    qq, rr = np.meshgrid(q_grid, r_grid, indexing="ij")
    sse = np.sum((model(qq, rr) - obs.voltage) ** 2, axis=-1)
    iq, ir = np.unravel_index(int(np.argmin(sse)), sse.shape)

    def residuals(x: np.ndarray) -> np.ndarray:
        return model(np.array(x[0]), np.array(x[1])) - obs.voltage

    fit = least_squares(
        residuals,
        x0=[q_grid[iq], r_grid[ir]],
        bounds=([Q_MAX_CLAMP[0], R0_CLAMP[0]], [Q_MAX_CLAMP[1], R0_CLAMP[1]]),
        x_scale=[1000.0, 0.1],
    )
    rms = float(np.sqrt(np.mean(fit.fun ** 2)))
    return HealthEstimate(q_max_hat=float(fit.x[0]), r0_hat=float(fit.x[1]), residual_rms=rms)


def embed(est: HealthEstimate) -> HealthEmbedding:
    """Min-max normalize the estimate against the sampling box, clamped."""
    pc1 = (est.q_max_hat - DEFAULT_Q_MAX_RANGE[0]) / (DEFAULT_Q_MAX_RANGE[1] - DEFAULT_Q_MAX_RANGE[0])
    pc2 = (est.r0_hat - DEFAULT_R0_RANGE[0]) / (DEFAULT_R0_RANGE[1] - DEFAULT_R0_RANGE[0])
    return HealthEmbedding(pc1=float(np.clip(pc1, 0.0, 1.0)), pc2=float(np.clip(pc2, 0.0, 1.0)))


def predict(
    est: HealthEstimate,
    planned,
    initial_z: float = 1.0,
    dt: float = 0.1,
) -> DischargePrediction:
    """Forward-simulate the planned profile with the estimated health pair.

    The margin is predicted EOD time minus profile duration; when the
    profile ends before cutoff, the remaining charge over the final
    current stands in for the unreached EOD time.
    """
    params_hat = BatteryParams(q_max=est.q_max_hat, r0=est.r0_hat)
    traj = simulate_discharge(params_hat, planned, initial_z=initial_z, dt=dt)
    pairs = planned.pairs() if hasattr(planned, "pairs") else list(planned)
    duration = sum(d for d, _ in pairs)
    if traj.eod_reached:
        margin = traj.eod_time - duration
    else:
        last_current = next((i for d, i in reversed(pairs) if i > 0), 0.0)
        if last_current > 0:
            margin = est.q_max_hat * float(traj.soc[-1]) / last_current
        else:
            margin = float("inf")
    return DischargePrediction(trajectory=traj, predicted_eod_margin_s=float(margin), feasible=margin > 0)
