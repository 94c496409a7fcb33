"""Flight phase tables and per-cell current profiles for mission legs.

Embeds the published phase-power, phase-duration, and wind tables for the
multirotor reference vehicle (values transcribed verbatim; a CSV override
hook exists for sensitivity studies).  A leg is flown as six phases:
vertical takeoff, climb, cruise, descent, approach, vertical landing.
Cruise power/airspeed depend on altitude and wind; the other phases depend
on altitude only.  Wind magnitudes are headwind-positive; negative values
are tailwinds.

Pack-to-cell scaling: the vehicle pack is 10S50P (500 cells) at 3.7 V
nominal, so a pack power P kW maps to a cell current
P * 1000 / (500 * 3.7) amperes, further scaled by the dimensionless
knob kappa that reconciles the pack model with the single-cell model.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

from .battery import BatteryParams, simulate_discharge

ALTITUDES_M = (500, 1000, 2000, 3000)
WINDS_KTS = (-39, -26, -13, 13, 26, 39)
PHASES = ("takeoff", "climb", "cruise", "descent", "approach", "landing")

KTS_TO_MS = 0.5144
NM_TO_M = 1852.0
PACK_CELLS = 500          # 10 series x 50 parallel
NOMINAL_CELL_V = 3.7

# Default kappa for mission use; see calibrate_kappa for the throughput
# calibration that motivates the order of magnitude.
DEFAULT_MISSION_KAPPA = 0.008


class TableDomainError(LookupError):
    """Lookup outside the finite altitude/wind table domain."""


class CalibrationError(RuntimeError):
    """kappa calibration could not meet its target."""


# Power required (kW) per phase of the reference 30 nm leg.  The cruise
# column is the 13 kt tailwind case; profile construction overrides it
# from the wind table.  Descent and approach powers are negligible.
PHASE_POWER_KW = {
    500:  {"takeoff": 264.94, "climb": 273.53, "cruise": 138.39, "descent": 0.0, "approach": 0.0, "landing": 139.45},
    1000: {"takeoff": 264.94, "climb": 272.66, "cruise": 141.72, "descent": 0.0, "approach": 0.0, "landing": 139.45},
    2000: {"takeoff": 264.94, "climb": 273.03, "cruise": 145.68, "descent": 0.0, "approach": 0.0, "landing": 139.45},
    3000: {"takeoff": 264.94, "climb": 273.13, "cruise": 155.44, "descent": 0.0, "approach": 0.0, "landing": 139.45},
}

# Phase durations (s) of the reference 30 nm leg.  Cruise duration is
# recomputed per leg from distance and ground speed.
PHASE_DURATION_S = {
    500:  {"takeoff": 15.51, "climb": 85.0,  "cruise": 1167.0, "descent": 0.0,  "approach": 115.0, "landing": 15.5},
    1000: {"takeoff": 15.51, "climb": 180.0, "cruise": 1143.0, "descent": 11.4, "approach": 115.0, "landing": 15.5},
    2000: {"takeoff": 15.51, "climb": 369.0, "cruise": 1120.0, "descent": 32.6, "approach": 115.0, "landing": 15.5},
    3000: {"takeoff": 15.51, "climb": 558.0, "cruise": 1056.0, "descent": 52.1, "approach": 115.0, "landing": 15.5},
}

# Cruise (airspeed m/s, power kW, 30 nm duration s) per (altitude, wind kts).
WIND_CRUISE = {
    (500, -39): (38.0, 130.57, 959.0),
    (500, -26): (39.0, 132.92, 1063.0),
    (500, -13): (41.0, 138.39, 1167.0),
    (500, 13):  (45.0, 152.18, 1453.0),
    (500, 26):  (48.0, 165.22, 1608.0),
    (500, 39):  (52.0, 186.36, 1743.0),
    (1000, -39): (39.0, 133.78, 943.0),
    (1000, -26): (40.0, 136.18, 1043.0),
    (1000, -13): (42.0, 141.72, 1143.0),
    (1000, 13):  (46.0, 155.59, 1416.0),
    (1000, 26):  (49.0, 168.61, 1563.0),
    (1000, 39):  (53.0, 189.71, 1690.0),
    (2000, -39): (41.0, 140.75, 911.0),
    (2000, -26): (42.0, 143.01, 1005.0),
    (2000, -13): (43.0, 148.68, 1120.0),
    (2000, 13):  (48.0, 162.21, 1347.0),
    (2000, 26):  (51.0, 174.99, 1479.0),
    (2000, 39):  (55.0, 195.3, 1594.0),
    (3000, -39): (43.0, 147.82, 882.0),
    (3000, -26): (44.0, 150.07, 970.0),
    (3000, -13): (46.0, 155.44, 1056.0),
    (3000, 13):  (50.0, 172.61, 1256.0),
    (3000, 26):  (53.0, 181.03, 1405.0),
    (3000, 39):  (57.0, 200.77, 1507.0),
}


@dataclass(frozen=True)
class FlightTables:
    """Phase and cruise-wind tables, embedded by default, CSV-overridable."""

    phase_power_kw: dict
    phase_duration_s: dict
    wind_cruise: dict

    @classmethod
    def embedded(cls) -> "FlightTables":
        return cls(PHASE_POWER_KW, PHASE_DURATION_S, WIND_CRUISE)

    @classmethod
    def from_csv(cls, path) -> "FlightTables":
        """Load tables from the override format.

        Columns: altitude, phase_or_wind, power_kw, duration_s, airspeed_ms.
        Phase rows leave airspeed_ms empty; wind rows put the signed wind
        magnitude (kts) in phase_or_wind.
        """
        power: dict = {}
        duration: dict = {}
        wind: dict = {}
        with open(path, newline="") as fh:
            for row in csv.DictReader(fh):
                alt = int(row["altitude"])
                key = row["phase_or_wind"].strip()
                if key in PHASES:
                    power.setdefault(alt, {})[key] = float(row["power_kw"])
                    duration.setdefault(alt, {})[key] = float(row["duration_s"])
                else:
                    wind[(alt, int(key))] = (
                        float(row["airspeed_ms"]),
                        float(row["power_kw"]),
                        float(row["duration_s"]),
                    )
        return cls(power, duration, wind)

    def to_csv(self, path) -> None:
        """Write the tables in the override format (see from_csv)."""
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["altitude", "phase_or_wind", "power_kw", "duration_s", "airspeed_ms"])
            for alt in sorted(self.phase_power_kw):
                for phase in PHASES:
                    writer.writerow([alt, phase, _fmt(self.phase_power_kw[alt][phase]),
                                     _fmt(self.phase_duration_s[alt][phase]), ""])
            for (alt, wind) in sorted(self.wind_cruise):
                airspeed, power, dur = self.wind_cruise[(alt, wind)]
                writer.writerow([alt, wind, _fmt(power), _fmt(dur), _fmt(airspeed)])


def _fmt(x: float) -> str:
    """Render a table number without a trailing .0 (bit-exact fixture form)."""
    return str(int(x)) if float(x).is_integer() else repr(float(x))


DEFAULT_TABLES = FlightTables.embedded()


@dataclass(frozen=True)
class Leg:
    """One point-to-point flight at a fixed altitude under one wind."""

    origin: tuple[float, float]   # nm
    dest: tuple[float, float]     # nm
    altitude: int                 # m, one of ALTITUDES_M
    wind_kts: int                 # headwind-positive, one of WINDS_KTS

    def __post_init__(self):
        if self.altitude not in ALTITUDES_M:
            raise TableDomainError(f"altitude {self.altitude} m not in {ALTITUDES_M}")
        if self.wind_kts not in WINDS_KTS:
            raise TableDomainError(f"wind {self.wind_kts} kts not in {WINDS_KTS}")
        if self.distance_nm <= 0:
            raise ValueError("leg distance must be positive")

    @property
    def distance_nm(self) -> float:
        return math.dist(self.origin, self.dest)


@dataclass(frozen=True)
class ProfileSegment:
    phase: str
    duration_s: float
    current_a: float    # per-cell, kappa applied
    power_kw: float     # pack-level, kappa not applied


@dataclass(frozen=True)
class CurrentProfile:
    """Ordered per-phase cell-current load for one leg."""

    segments: tuple[ProfileSegment, ...]
    kappa: float
    leg: Leg | None = None

    def pairs(self) -> list[tuple[float, float]]:
        return [(s.duration_s, s.current_a) for s in self.segments]

    @property
    def total_duration_s(self) -> float:
        return sum(s.duration_s for s in self.segments)

    @property
    def total_charge_c(self) -> float:
        return sum(s.duration_s * s.current_a for s in self.segments)


def cruise_ground_speed(altitude: int, wind_kts: int, tables: FlightTables = DEFAULT_TABLES) -> float:
    """Ground speed (m/s) in cruise: table airspeed minus the headwind."""
    try:
        airspeed, _, _ = tables.wind_cruise[(altitude, wind_kts)]
    except KeyError:
        raise TableDomainError(f"no cruise row for altitude={altitude} m, wind={wind_kts} kts") from None
    return airspeed - wind_kts * KTS_TO_MS


def cell_current(power_kw: float, kappa: float, nominal_voltage: float = NOMINAL_CELL_V) -> float:
    """Per-cell current for a pack power demand, kappa applied."""
    return kappa * power_kw * 1000.0 / (PACK_CELLS * nominal_voltage)


def build_leg_profile(
    leg: Leg,
    kappa: float,
    nominal_voltage: float = NOMINAL_CELL_V,
    tables: FlightTables = DEFAULT_TABLES,
) -> CurrentProfile:
    """Convert a leg into the six-phase per-cell current profile.

    Non-cruise phases take power and duration from the altitude tables.
    Cruise power comes from the wind table and cruise duration is
    distance / ground speed, so it scales linearly with leg distance.
    """
    if kappa < 0:
        raise ValueError("kappa must be non-negative")
    if leg.altitude not in tables.phase_power_kw:
        raise TableDomainError(f"altitude {leg.altitude} m not tabulated")
    powers = tables.phase_power_kw[leg.altitude]
    durations = tables.phase_duration_s[leg.altitude]
    _, cruise_power, _ = tables.wind_cruise.get((leg.altitude, leg.wind_kts), (None, None, None))
    if cruise_power is None:
        raise TableDomainError(f"no cruise row for altitude={leg.altitude} m, wind={leg.wind_kts} kts")
    cruise_duration = leg.distance_nm * NM_TO_M / cruise_ground_speed(leg.altitude, leg.wind_kts, tables)

    segments = []
    for phase in PHASES:
        power = cruise_power if phase == "cruise" else powers[phase]
        duration = cruise_duration if phase == "cruise" else durations[phase]
        segments.append(ProfileSegment(
            phase=phase,
            duration_s=duration,
            current_a=cell_current(power, kappa, nominal_voltage),
            power_kw=power,
        ))
    return CurrentProfile(segments=tuple(segments), kappa=kappa, leg=leg)


def leg_energy_kj(profile: CurrentProfile) -> float:
    """Pack-level energy of a leg (kJ): sum of phase power times duration."""
    return sum(s.power_kw * s.duration_s for s in profile.segments)


def reference_leg() -> Leg:
    """The 30 nm, 1000 m, 13 kt tailwind leg used for kappa calibration."""
    return Leg(origin=(0.0, 0.0), dest=(30.0, 0.0), altitude=1000, wind_kts=-13)


def calibrate_kappa(
    target_fraction: float = 0.75,
    leg: Leg | None = None,
    params: BatteryParams | None = None,
    dt: float = 0.1,
    tolerance: float = 0.005,
) -> float:
    """Bisect kappa so the reference leg consumes a target charge fraction.

    Simulates the leg from z = 1 with mid-range health and searches for the
    kappa whose final state of charge is 1 - target_fraction.  Calibration
    is a coulomb-throughput exercise, so the cutoff check is disabled for
    the calibration runs (at the resulting current scale a mid-health cell
    crosses the operational cutoff mid-leg; throughput is still the
    quantity the scaling knob must reconcile).
    """
    if not 0 < target_fraction < 1:
        raise CalibrationError(f"target_fraction must lie in (0, 1), got {target_fraction}")
    leg = leg or reference_leg()
    params = params or BatteryParams(q_max=6500.0, r0=0.23)
    open_params = replace(params, v_cut=float("-inf"))

    def final_soc(kappa: float) -> float:
        traj = simulate_discharge(open_params, build_leg_profile(leg, kappa), initial_z=1.0, dt=dt)
        return float(traj.soc[-1])

    target_soc = 1.0 - target_fraction
    lo, hi = 0.0, 0.05
    for _ in range(60):
        if final_soc(hi) < target_soc:
            break
        hi *= 2.0
    else:
        raise CalibrationError("could not bracket the calibration target")

    for _ in range(80):
        mid = 0.5 * (lo + hi)
        soc = final_soc(mid)
        if abs(soc - target_soc) <= 0.25 * tolerance:
            return mid
        if soc > target_soc:
            lo = mid
        else:
            hi = mid
    kappa = 0.5 * (lo + hi)
    if abs(final_soc(kappa) - target_soc) > tolerance:
        raise CalibrationError("bisection did not converge to the target fraction")
    return kappa
