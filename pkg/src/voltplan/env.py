"""Mission MDP: destinations, altitudes, winds, battery continuity, recharging.

Three scenarios share one environment:

* ``single_flight``  -- one destination, the decision is the altitude.
* ``single_charge``  -- visit prioritized destinations, return to the
  station before cutoff; the episode ends at the station (or at EOD).
* ``multi_charge``   -- visit every destination with as few charging
  cycles as possible; the station recharges instantly and the episode
  ends when all destinations are visited (or at EOD).

Rewards: +alpha * priority per destination reached, -beta at the station,
-gamma_pen if the cell voltage ever touches the cutoff.  The agent sees a
2-D health embedding inferred from a 20 s observation, the cell voltage
at the current node, its position, the visited count, and the visited
mask; the true degradation pair and state of charge stay hidden.

Wind is drawn per leg, i.i.d. uniform over the six table values, and is
unknown at decision time.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace

import numpy as np

from . import flight, health
from .battery import BatteryParams, ocv, sample_health, soc_at_cutoff

STATION = -1  # action target sentinel for the charging station

SCENARIOS = ("single_flight", "single_charge", "multi_charge")


class MapGenerationError(RuntimeError):
    """Rejection sampling failed to place all destinations."""


@dataclass(frozen=True)
class Destination:
    id: int
    x: float
    y: float
    priority: int  # 1 (low) to 3 (high)


@dataclass(frozen=True)
class MissionMap:
    destinations: tuple[Destination, ...]
    station: tuple[float, float] = (0.0, 0.0)

    def __post_init__(self):
        ids = [d.id for d in self.destinations]
        if len(set(ids)) != len(ids):
            raise ValueError("destination ids must be unique")
        if not 1 <= len(ids) <= 12:
            raise ValueError("a map carries between 1 and 12 destinations")
        points = [self.station] + [(d.x, d.y) for d in self.destinations]
        if len({(round(x, 9), round(y, 9)) for x, y in points}) != len(points):
            raise ValueError("all map points must be distinct")

    @property
    def sorted_ids(self) -> tuple[int, ...]:
        return tuple(sorted(d.id for d in self.destinations))

    def destination(self, dest_id: int) -> Destination:
        for d in self.destinations:
            if d.id == dest_id:
                return d
        raise KeyError(f"no destination with id {dest_id}")

    def position(self, target: int) -> tuple[float, float]:
        if target == STATION:
            return self.station
        d = self.destination(target)
        return (d.x, d.y)

    def to_json(self, path) -> None:
        payload = {
            "station": list(self.station),
            "destinations": [
                {"id": d.id, "x": d.x, "y": d.y, "priority": d.priority}
                for d in self.destinations
            ],
        }
        with open(path, "w") as fh:
            json.dump(payload, fh, indent=2)

    @classmethod
    def from_json(cls, path) -> "MissionMap":
        with open(path) as fh:
            payload = json.load(fh)
        dests = tuple(
            Destination(id=int(d["id"]), x=float(d["x"]), y=float(d["y"]), priority=int(d["priority"]))
            for d in payload["destinations"]
        )
        return cls(destinations=dests, station=tuple(payload["station"]))


def generate_map(
    seed_or_rng,
    n_destinations: int,
    radius_nm: float = 30.0,
    min_separation_nm: float = 3.0,
) -> MissionMap:
    """Sample destinations uniformly in a disc around the station.

    Rejection sampling enforces pairwise separation (station included);
    priorities are uniform on {1, 2, 3}.
    """
    if not 1 <= n_destinations <= 12:
        raise ValueError("n_destinations must lie in [1, 12]")
    rng = seed_or_rng if isinstance(seed_or_rng, np.random.Generator) else np.random.default_rng(seed_or_rng)
    station = (0.0, 0.0)
    points: list[tuple[float, float]] = []
    attempts = 0
    while len(points) < n_destinations:
        attempts += 1
        if attempts > 10_000:
            raise MapGenerationError(
                f"could not place {n_destinations} destinations with {min_separation_nm} nm separation"
            )
        r = radius_nm * math.sqrt(rng.uniform())
        theta = rng.uniform(0.0, 2.0 * math.pi)
        cand = (r * math.cos(theta), r * math.sin(theta))
        if all(math.dist(cand, p) >= min_separation_nm for p in points + [station]):
            points.append(cand)
    dests = tuple(
        Destination(id=i + 1, x=p[0], y=p[1], priority=int(rng.integers(1, 4)))
        for i, p in enumerate(points)
    )
    return MissionMap(destinations=dests, station=station)


@dataclass(frozen=True)
class ScenarioConfig:
    scenario: str
    alpha: float = 1.0
    beta: float = 1.0
    gamma_pen: float = 5.0
    altitudes: tuple[int, ...] = flight.ALTITUDES_M
    winds: tuple[int, ...] = flight.WINDS_KTS
    kappa: float = flight.DEFAULT_MISSION_KAPPA
    obs_kappa: float = health.DEFAULT_OBS_KAPPA
    noise_sigma: float = health.DEFAULT_NOISE_SIGMA
    q_max_range: tuple[float, float] = (5000.0, 8000.0)
    r0_range: tuple[float, float] = (0.017, 0.45)

    def __post_init__(self):
        if self.scenario not in SCENARIOS:
            raise ValueError(f"scenario must be one of {SCENARIOS}, got {self.scenario!r}")
        if min(self.alpha, self.beta, self.gamma_pen) <= 0:
            raise ValueError("alpha, beta and gamma_pen must be positive")
        if self.gamma_pen < self.beta:
            raise ValueError("gamma_pen must dominate beta")


@dataclass(frozen=True)
class Action:
    target: int    # destination id, or STATION
    altitude: int  # m


@dataclass(frozen=True)
class EnvState:
    """Agent-visible state plus the hidden true state of charge.

    ``cycle_visits`` counts destinations reached since the last recharge;
    it gates the station action.  ``visited_mask`` is a bitset over the
    map's sorted destination ids.
    """

    pc1: float
    pc2: float
    v: float
    pos: tuple[float, float]
    reached_count: int
    visited_mask: int
    cycle_count: int
    cycle_visits: int
    z_internal: float


@dataclass(frozen=True)
class StepOutcome:
    state: EnvState
    reward: float
    done: bool
    info: dict


def leg_requirement(params: BatteryParams, profile) -> tuple[float, float]:
    """Charge demand and minimum viable starting SOC for a leg.

    Within each constant-current segment the SOC falls linearly, so the
    leg avoids cutoff iff the start-of-leg SOC exceeds

        z_need = max_j (cumulative_charge_through_j / q_max + z_cutoff(I_j))

    over segments j.  Returns (total_charge_c, z_need); EOD occurs on the
    leg iff z_start <= z_need.
    """
    pairs = profile.pairs() if hasattr(profile, "pairs") else list(profile)
    z_need = 0.0
    cum = 0.0
    for duration, current in pairs:
        cum += duration * current
        z_need = max(z_need, cum / params.q_max + soc_at_cutoff(params, current))
    return cum, z_need


def fly_leg(params: BatteryParams, profile, z_start: float) -> tuple[bool, float, float]:
    """Analytic leg transit: (eod, z_end, v_end).

    Exact closed-form solution of the same model that simulate_discharge
    integrates; on EOD the endpoint is pinned at the cutoff crossing.
    """
    charge, z_need = leg_requirement(params, profile)
    if z_start <= z_need:
        return True, max(0.0, z_start - charge / params.q_max), params.v_cut
    pairs = profile.pairs() if hasattr(profile, "pairs") else list(profile)
    z_end = z_start - charge / params.q_max
    last_current = pairs[-1][1]
    return False, z_end, ocv(z_end, params) - last_current * params.r0


def legal_actions(state: EnvState, mmap: MissionMap, cfg: ScenarioConfig) -> list[Action]:
    """Enumerate legal (target, altitude) pairs for a live state."""
    ids = mmap.sorted_ids
    if cfg.scenario == "single_flight":
        targets = [ids[0]]
    else:
        targets = [d for k, d in enumerate(ids) if not state.visited_mask >> k & 1]
        if cfg.scenario in ("single_charge", "multi_charge") and state.cycle_visits >= 1:
            targets.append(STATION)
    return [Action(target=t, altitude=a) for t in targets for a in cfg.altitudes]


class MissionEnv:
    """One mission episode at a time; owns its rng; deterministic per seed."""

    def __init__(self, mmap: MissionMap, cfg: ScenarioConfig, seed=None,
                 tables: flight.FlightTables = flight.DEFAULT_TABLES):
        self.map = mmap
        self.cfg = cfg
        self.tables = tables
        self._rng = np.random.default_rng(seed)
        self._state: EnvState | None = None
        self._params: BatteryParams | None = None
        self._done = True
        self._steps = 0
        self.max_steps = len(mmap.destinations) * (len(mmap.destinations) + 1)

    @property
    def state(self) -> EnvState:
        if self._state is None:
            raise RuntimeError("environment not reset")
        return self._state

    @property
    def done(self) -> bool:
        return self._done

    @property
    def true_params(self) -> BatteryParams:
        """Hidden degradation pair; for oracles and diagnostics only."""
        if self._params is None:
            raise RuntimeError("environment not reset")
        return self._params

    def reset(self, seed=None) -> EnvState:
        if seed is not None:
            self._rng = np.random.default_rng(seed)
        cfg = self.cfg
        self._params = sample_health(self._rng, cfg.q_max_range, cfg.r0_range)
        pc1, pc2 = self._observe_health()
        self._state = EnvState(
            pc1=pc1, pc2=pc2,
            v=float(ocv(1.0, self._params)),
            pos=self.map.station,
            reached_count=0,
            visited_mask=0,
            cycle_count=1,
            cycle_visits=0,
            z_internal=1.0,
        )
        self._done = False
        self._steps = 0
        return self._state

    def _observe_health(self) -> tuple[float, float]:
        probe = health.diagnostic_profile(self.cfg.obs_kappa)
        obs = health.observe(self._params, probe, initial_z=1.0,
                             noise_sigma=self.cfg.noise_sigma, rng=self._rng)
        est = health.infer_health(obs, self.cfg.q_max_range, self.cfg.r0_range)
        emb = health.embed(est)
        return emb.pc1, emb.pc2

    def legal_actions(self) -> list[Action]:
        if self._done or self._state is None:
            raise RuntimeError("legal_actions called on a terminal episode")
        return legal_actions(self._state, self.map, self.cfg)

    def step(self, action: Action) -> StepOutcome:
        if self._done or self._state is None:
            raise RuntimeError("step called on a terminal episode")
        if action not in self.legal_actions():
            raise ValueError(f"illegal action {action}")
        cfg, state = self.cfg, self._state

        wind = int(self._rng.choice(cfg.winds))
        leg = flight.Leg(origin=state.pos, dest=self.map.position(action.target),
                         altitude=action.altitude, wind_kts=wind)
        profile = flight.build_leg_profile(leg, cfg.kappa, tables=self.tables)
        eod, z_end, v_end = fly_leg(self._params, profile, state.z_internal)

        info = {
            "wind_kts": wind,
            "distance_nm": leg.distance_nm,
            "leg_duration_s": profile.total_duration_s,
            "leg_charge_c": profile.total_charge_c,
            "eod_violation": False,
            "recharged": False,
            "truncated": False,
        }
        self._steps += 1

        if eod:
            info["eod_violation"] = True
            reward = -cfg.gamma_pen
            new_state = replace(state, v=v_end, pos=leg.dest, z_internal=z_end)
            done = True
        elif action.target == STATION:
            reward = -cfg.beta
            if cfg.scenario == "single_charge":
                new_state = replace(state, v=v_end, pos=leg.dest, z_internal=z_end)
                done = True
            else:  # multi_charge: instantaneous recharge, fresh observation
                info["recharged"] = True
                pc1, pc2 = self._observe_health()
                new_state = replace(
                    state, pc1=pc1, pc2=pc2,
                    v=float(ocv(1.0, self._params)),
                    pos=self.map.station,
                    cycle_count=state.cycle_count + 1,
                    cycle_visits=0,
                    z_internal=1.0,
                )
                done = False
        else:
            dest = self.map.destination(action.target)
            reward = cfg.alpha * dest.priority
            k = self.map.sorted_ids.index(action.target)
            mask = state.visited_mask | (1 << k)
            new_state = replace(
                state, v=v_end, pos=leg.dest,
                reached_count=state.reached_count + 1,
                visited_mask=mask,
                cycle_visits=state.cycle_visits + 1,
                z_internal=z_end,
            )
            done = (
                cfg.scenario == "single_flight"
                or (cfg.scenario == "multi_charge" and mask == (1 << len(self.map.destinations)) - 1)
            )

        if not done and self._steps >= self.max_steps:
            info["truncated"] = True
            done = True
        self._state = new_state
        self._done = done
        return StepOutcome(state=new_state, reward=float(reward), done=done, info=info)
