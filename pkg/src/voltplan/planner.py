"""Exhaustive expectimax baseline over destination orders, altitudes and winds.

Computes the exact optimal expected reward for a mission map when the true
degradation pair is known (a clairvoyant upper bound for any policy that
only sees the health embedding).  Agent decisions alternate with uniform
six-way wind chance nodes; battery evolution uses the same closed-form leg
transit as the environment.

The state of charge is the only continuous coordinate, so values are
computed on a uniform SOC grid (default step 1e-4, matching the
memoization quantization); child lookups round the SOC down one grid cell,
which under the value function's monotonicity in SOC yields a (tightly)
conservative value.  ``solve_exact`` is the unquantized recursive search
kept around for cross-checking on tiny maps.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from . import flight
from .battery import BatteryParams
from .dqn import QNetwork, evaluate
from .env import STATION, Action, MissionEnv, MissionMap, ScenarioConfig, leg_requirement

EXPECTIMAX_MAX_DESTINATIONS = 6
FIXED_WIND_MAX_DESTINATIONS = 8


class PlannerSizeError(ValueError):
    """Map too large for the exact solver; use solve_fixed_wind."""


@dataclass(frozen=True)
class OracleResult:
    value: float
    first_action: Action                       # canonical optimal first action
    best_first_actions: tuple[Action, ...]     # all root actions within tie tolerance
    root_action_values: tuple[tuple[Action, float], ...]
    expected_destinations: float
    expected_cycles: float
    states_evaluated: int
    wall_time_s: float

    def to_json_dict(self) -> dict:
        return {
            "value": self.value,
            "first_action": {"target": self.first_action.target, "altitude": self.first_action.altitude},
            "optimal_first_actions": [
                {"target": a.target, "altitude": a.altitude} for a in self.best_first_actions
            ],
            "expected_destinations": self.expected_destinations,
            "expected_cycles": self.expected_cycles,
            "states_evaluated": self.states_evaluated,
            "wall_time_s": self.wall_time_s,
        }


class _LegTable:
    """Per-map cache of (delta_z, z_need) for every (pair, altitude, wind)."""

    def __init__(self, mmap: MissionMap, cfg: ScenarioConfig, params: BatteryParams,
                 tables: flight.FlightTables = flight.DEFAULT_TABLES):
        self.ids = mmap.sorted_ids
        self.n = len(self.ids)
        self.station_idx = self.n
        self.positions = [mmap.position(i) for i in self.ids] + [mmap.station]
        self.priority = {k: mmap.destination(i).priority for k, i in enumerate(self.ids)}
        self.altitudes = cfg.altitudes
        self.winds = cfg.winds
        self._cache: dict = {}
        self._params = params
        self._cfg = cfg
        self._tables = tables

    def leg(self, i: int, j: int, alt: int, wind: int) -> tuple[float, float]:
        key = (i, j, alt, wind)
        if key not in self._cache:
            leg = flight.Leg(origin=self.positions[i], dest=self.positions[j],
                             altitude=alt, wind_kts=wind)
            profile = flight.build_leg_profile(leg, self._cfg.kappa, tables=self._tables)
            charge, z_need = leg_requirement(self._params, profile)
            self._cache[key] = (charge / self._params.q_max, z_need)
        return self._cache[key]


def _shift_lookup(child: np.ndarray, delta_z: float, res: float) -> np.ndarray:
    """child value at (z - delta_z), rounding the SOC down one grid cell."""
    idx = np.arange(len(child), dtype=float)
    js = np.floor(idx - delta_z / res + 1e-9).astype(int)
    return child[np.clip(js, 0, len(child) - 1)]


def solve(
    mmap: MissionMap,
    cfg: ScenarioConfig,
    params: BatteryParams,
    z_resolution: float = 1e-4,
    tables: flight.FlightTables = flight.DEFAULT_TABLES,
) -> OracleResult:
    """Exact expectimax value (health-clairvoyant) for maps of up to 6 destinations."""
    n = len(mmap.destinations)
    if n > EXPECTIMAX_MAX_DESTINATIONS:
        raise PlannerSizeError(
            f"{n} destinations exceed the exact expectimax cap of "
            f"{EXPECTIMAX_MAX_DESTINATIONS}; use solve_fixed_wind"
        )
    t0 = time.perf_counter()
    legs = _LegTable(mmap, cfg, params, tables)
    N = round(1.0 / z_resolution)
    zgrid = np.arange(N + 1) * z_resolution
    full = (1 << n) - 1
    states = 0

    def wind_mean(parts: list[np.ndarray]) -> np.ndarray:
        return sum(parts) / len(parts)

    if cfg.scenario == "single_flight":
        target_idx = 0
        actions, values, dstats = [], [], []
        for alt in cfg.altitudes:
            branches, dests = [], []
            for w in cfg.winds:
                _, z_need = legs.leg(legs.station_idx, target_idx, alt, w)
                ok = 1.0 > z_need
                branches.append(cfg.alpha * legs.priority[target_idx] if ok else -cfg.gamma_pen)
                dests.append(1.0 if ok else 0.0)
            actions.append(Action(target=legs.ids[target_idx], altitude=alt))
            values.append(float(np.mean(branches)))
            dstats.append(float(np.mean(dests)))
        values_arr = np.array(values)
        best = int(np.argmax(values_arr))
        tie = np.flatnonzero(values_arr >= values_arr[best] - 1e-9)
        return OracleResult(
            value=float(values_arr[best]),
            first_action=actions[tie[0]],
            best_first_actions=tuple(actions[k] for k in tie),
            root_action_values=tuple(zip(actions, (float(v) for v in values_arr))),
            expected_destinations=dstats[best],
            expected_cycles=1.0,
            states_evaluated=len(actions),
            wall_time_s=time.perf_counter() - t0,
        )

    if cfg.scenario == "single_charge":
        V: dict = {}
        D: dict = {}
        for mask in sorted(range(1, full + 1), key=lambda m: -bin(m).count("1")):
            for pos in range(n):
                if not mask >> pos & 1:
                    continue
                vals, dsts = [], []
                unvisited = [d for d in range(n) if not mask >> d & 1]
                for target in unvisited + [legs.station_idx]:
                    for alt in cfg.altitudes:
                        v_parts, d_parts = [], []
                        for w in cfg.winds:
                            dz, z_need = legs.leg(pos, target, alt, w)
                            eod = zgrid <= z_need + 1e-12
                            if target == legs.station_idx:
                                v_w = np.where(eod, -cfg.gamma_pen, -cfg.beta)
                                d_w = np.zeros_like(zgrid)
                            else:
                                child_v = V[(mask | 1 << target, target)]
                                child_d = D[(mask | 1 << target, target)]
                                r = cfg.alpha * legs.priority[target]
                                v_w = np.where(eod, -cfg.gamma_pen, r + _shift_lookup(child_v, dz, z_resolution))
                                d_w = np.where(eod, 0.0, 1.0 + _shift_lookup(child_d, dz, z_resolution))
                            v_parts.append(v_w)
                            d_parts.append(d_w)
                        vals.append(wind_mean(v_parts))
                        dsts.append(wind_mean(d_parts))
                stack_v, stack_d = np.stack(vals), np.stack(dsts)
                pick = np.argmax(stack_v, axis=0)
                cols = np.arange(N + 1)
                V[(mask, pos)] = stack_v[pick, cols]
                D[(mask, pos)] = stack_d[pick, cols]
                states += 1

        actions, values, dstats = [], [], []
        for target in range(n):
            for alt in cfg.altitudes:
                v_parts, d_parts = [], []
                for w in cfg.winds:
                    dz, z_need = legs.leg(legs.station_idx, target, alt, w)
                    if 1.0 <= z_need + 1e-12:
                        v_parts.append(-cfg.gamma_pen)
                        d_parts.append(0.0)
                    else:
                        child_v = V[(1 << target, target)]
                        child_d = D[(1 << target, target)]
                        j = max(0, int(np.floor(N - dz / z_resolution + 1e-9)))
                        v_parts.append(cfg.alpha * legs.priority[target] + child_v[j])
                        d_parts.append(1.0 + child_d[j])
                actions.append(Action(target=legs.ids[target], altitude=alt))
                values.append(float(np.mean(v_parts)))
                dstats.append(float(np.mean(d_parts)))
        values_arr = np.array(values)
        best = int(np.argmax(values_arr))
        tie = np.flatnonzero(values_arr >= values_arr[best] - 1e-9)
        return OracleResult(
            value=float(values_arr[best]),
            first_action=actions[tie[0]],
            best_first_actions=tuple(actions[k] for k in tie),
            root_action_values=tuple(zip(actions, (float(v) for v in values_arr))),
            expected_destinations=dstats[best],
            expected_cycles=1.0,
            states_evaluated=states + 1,
            wall_time_s=time.perf_counter() - t0,
        )

    # multi_charge.  At the station the SOC is always 1 (instantaneous
    # recharge), so station states carry scalar values; destination states
    # carry SOC-gridded values.  The full mask is terminal.
    V_st: dict[int, float] = {}
    C_st: dict[int, float] = {}
    D_st: dict[int, float] = {}
    V: dict = {}
    C: dict = {}
    D: dict = {}

    def station_value(mask: int) -> tuple[float, float, float]:
        vals, cycs, dsts = [], [], []
        for target in (d for d in range(n) if not mask >> d & 1):
            for alt in cfg.altitudes:
                v_parts, c_parts, d_parts = [], [], []
                for w in cfg.winds:
                    dz, z_need = legs.leg(legs.station_idx, target, alt, w)
                    if 1.0 <= z_need + 1e-12:
                        v_parts.append(-cfg.gamma_pen)
                        c_parts.append(0.0)
                        d_parts.append(0.0)
                        continue
                    r = cfg.alpha * legs.priority[target]
                    new_mask = mask | 1 << target
                    if new_mask == full:
                        v_parts.append(r)
                        c_parts.append(0.0)
                        d_parts.append(1.0)
                    else:
                        j = max(0, int(np.floor(N - dz / z_resolution + 1e-9)))
                        v_parts.append(r + V[(new_mask, target)][j])
                        c_parts.append(C[(new_mask, target)][j])
                        d_parts.append(1.0 + D[(new_mask, target)][j])
                vals.append(np.mean(v_parts))
                cycs.append(np.mean(c_parts))
                dsts.append(np.mean(d_parts))
        k = int(np.argmax(vals))
        return float(vals[k]), float(cycs[k]), float(dsts[k])

    for mask in sorted(range(0, full), key=lambda m: -bin(m).count("1")):
        V_st[mask], C_st[mask], D_st[mask] = station_value(mask)
        states += 1
        for pos in range(n):
            if not mask >> pos & 1:
                continue
            vals, cycs, dsts = [], [], []
            unvisited = [d for d in range(n) if not mask >> d & 1]
            for target in unvisited + [legs.station_idx]:
                for alt in cfg.altitudes:
                    v_parts, c_parts, d_parts = [], [], []
                    for w in cfg.winds:
                        dz, z_need = legs.leg(pos, target, alt, w)
                        eod = zgrid <= z_need + 1e-12
                        if target == legs.station_idx:
                            v_w = np.where(eod, -cfg.gamma_pen, -cfg.beta + V_st[mask])
                            c_w = np.where(eod, 0.0, 1.0 + C_st[mask])
                            d_w = np.where(eod, 0.0, D_st[mask])
                        else:
                            r = cfg.alpha * legs.priority[target]
                            new_mask = mask | 1 << target
                            if new_mask == full:
                                v_w = np.where(eod, -cfg.gamma_pen, r)
                                c_w = np.zeros_like(zgrid)
                                d_w = np.where(eod, 0.0, 1.0)
                            else:
                                v_w = np.where(eod, -cfg.gamma_pen,
                                               r + _shift_lookup(V[(new_mask, target)], dz, z_resolution))
                                c_w = np.where(eod, 0.0,
                                               _shift_lookup(C[(new_mask, target)], dz, z_resolution))
                                d_w = np.where(eod, 0.0,
                                               1.0 + _shift_lookup(D[(new_mask, target)], dz, z_resolution))
                        v_parts.append(v_w)
                        c_parts.append(c_w)
                        d_parts.append(d_w)
                    vals.append(wind_mean(v_parts))
                    cycs.append(wind_mean(c_parts))
                    dsts.append(wind_mean(d_parts))
            stack_v = np.stack(vals)
            pick = np.argmax(stack_v, axis=0)
            cols = np.arange(N + 1)
            V[(mask, pos)] = stack_v[pick, cols]
            C[(mask, pos)] = np.stack(cycs)[pick, cols]
            D[(mask, pos)] = np.stack(dsts)[pick, cols]
            states += 1

    # Root action values (station, empty mask, z = 1).
    actions, values, cycles, dstats = [], [], [], []
    for target in range(n):
        for alt in cfg.altitudes:
            v_parts, c_parts, d_parts = [], [], []
            for w in cfg.winds:
                dz, z_need = legs.leg(legs.station_idx, target, alt, w)
                if 1.0 <= z_need + 1e-12:
                    v_parts.append(-cfg.gamma_pen)
                    c_parts.append(0.0)
                    d_parts.append(0.0)
                    continue
                r = cfg.alpha * legs.priority[target]
                new_mask = 1 << target
                if new_mask == full:
                    v_parts.append(r)
                    c_parts.append(0.0)
                    d_parts.append(1.0)
                else:
                    j = max(0, int(np.floor(N - dz / z_resolution + 1e-9)))
                    v_parts.append(r + V[(new_mask, target)][j])
                    c_parts.append(C[(new_mask, target)][j])
                    d_parts.append(1.0 + D[(new_mask, target)][j])
            actions.append(Action(target=legs.ids[target], altitude=alt))
            values.append(float(np.mean(v_parts)))
            cycles.append(float(np.mean(c_parts)))
            dstats.append(float(np.mean(d_parts)))
    values_arr = np.array(values)
    best = int(np.argmax(values_arr))
    tie = np.flatnonzero(values_arr >= values_arr[best] - 1e-9)
    return OracleResult(
        value=float(values_arr[best]),
        first_action=actions[tie[0]],
        best_first_actions=tuple(actions[k] for k in tie),
        root_action_values=tuple(zip(actions, (float(v) for v in values_arr))),
        expected_destinations=dstats[best],
        expected_cycles=1.0 + cycles[best],
        states_evaluated=states + 1,
        wall_time_s=time.perf_counter() - t0,
    )


def solve_exact(mmap: MissionMap, cfg: ScenarioConfig, params: BatteryParams,
                max_destinations: int = 3) -> float:
    """Unquantized, unmemoized recursive expectimax for tiny maps (test baseline)."""
    n = len(mmap.destinations)
    if n > max_destinations:
        raise PlannerSizeError(f"exact recursion capped at {max_destinations} destinations")
    legs = _LegTable(mmap, cfg, params)
    full = (1 << n) - 1

    def value(mask: int, pos: int, z: float, at_station: bool) -> float:
        if cfg.scenario == "multi_charge" and mask == full:
            return 0.0
        unvisited = [d for d in range(n) if not mask >> d & 1]
        targets = list(unvisited)
        if cfg.scenario == "single_flight":
            targets = [0] if mask == 0 else []
        elif not at_station:
            targets.append(legs.station_idx)
        best = -np.inf
        for target in targets:
            for alt in cfg.altitudes:
                acc = 0.0
                for w in cfg.winds:
                    dz, z_need = legs.leg(pos, target, alt, w)
                    if z <= z_need:
                        acc += -cfg.gamma_pen
                    elif target == legs.station_idx:
                        if cfg.scenario == "single_charge":
                            acc += -cfg.beta
                        else:
                            acc += -cfg.beta + value(mask, legs.station_idx, 1.0, True)
                    else:
                        r = cfg.alpha * legs.priority[target]
                        done = cfg.scenario == "single_flight" or (
                            cfg.scenario == "multi_charge" and (mask | 1 << target) == full
                        )
                        acc += r if done else r + value(mask | 1 << target, target, z - dz, False)
                best = max(best, acc / len(cfg.winds))
        return best

    return value(0, legs.station_idx, 1.0, True)


def solve_fixed_wind(
    mmap: MissionMap,
    cfg: ScenarioConfig,
    params: BatteryParams,
    wind_sequence: list[int],
    z_resolution: float = 1e-4,
) -> OracleResult:
    """Deterministic dynamic program with the wind fixed per leg index.

    Winds beyond the end of the sequence repeat its last entry.  Handles
    larger maps than the stochastic solver since there is no chance
    branching.
    """
    n = len(mmap.destinations)
    if n > FIXED_WIND_MAX_DESTINATIONS:
        raise PlannerSizeError(f"{n} destinations exceed the fixed-wind cap of {FIXED_WIND_MAX_DESTINATIONS}")
    if not wind_sequence:
        raise ValueError("wind_sequence must be non-empty")
    t0 = time.perf_counter()
    legs = _LegTable(mmap, cfg, params)
    full = (1 << n) - 1
    memo: dict = {}

    def wind_at(step: int) -> int:
        return wind_sequence[min(step, len(wind_sequence) - 1)]

    def targets_for(mask: int, at_station: bool) -> list[int]:
        unvisited = [d for d in range(n) if not mask >> d & 1]
        if cfg.scenario == "single_flight":
            return [0] if mask == 0 else []
        if at_station:
            return unvisited
        return unvisited + [legs.station_idx]

    def value(mask: int, pos: int, zq: int, step: int, at_station: bool):
        """Returns (value, best (target, alt), recharges, destinations)."""
        if cfg.scenario == "multi_charge" and mask == full:
            return 0.0, None, 0.0, 0.0
        key = (mask, pos, zq, step, at_station)
        if key in memo:
            return memo[key]
        w = wind_at(step)
        best = (-np.inf, None, 0.0, 0.0)
        for target in targets_for(mask, at_station):
            for alt in cfg.altitudes:
                dz, z_need = legs.leg(pos, target, alt, w)
                z = zq * z_resolution
                if z <= z_need + 1e-12:
                    cand = (-cfg.gamma_pen, (target, alt), 0.0, 0.0)
                elif target == legs.station_idx:
                    if cfg.scenario == "single_charge":
                        cand = (-cfg.beta, (target, alt), 0.0, 0.0)
                    else:
                        v, _, rch, dst = value(mask, legs.station_idx, round(1.0 / z_resolution),
                                               step + 1, True)
                        cand = (-cfg.beta + v, (target, alt), 1.0 + rch, dst)
                else:
                    r = cfg.alpha * legs.priority[target]
                    ended = cfg.scenario == "single_flight" or (
                        cfg.scenario == "multi_charge" and (mask | 1 << target) == full
                    )
                    if ended and cfg.scenario != "single_charge":
                        cand = (r, (target, alt), 0.0, 1.0)
                    else:
                        zq_next = int(np.floor(zq - dz / z_resolution + 1e-9))
                        v, _, rch, dst = value(mask | 1 << target, target, max(0, zq_next),
                                               step + 1, False)
                        cand = (r + v, (target, alt), rch, 1.0 + dst)
                if cand[0] > best[0]:
                    best = cand
        memo[key] = best
        return best

    v, first, recharges, dests = value(0, legs.station_idx, round(1.0 / z_resolution), 0, True)
    target, alt = first
    action = Action(target=legs.ids[target] if target < n else STATION, altitude=alt)
    return OracleResult(
        value=float(v),
        first_action=action,
        best_first_actions=(action,),
        root_action_values=((action, float(v)),),
        expected_destinations=float(dests),
        expected_cycles=1.0 + float(recharges),
        states_evaluated=len(memo),
        wall_time_s=time.perf_counter() - t0,
    )


@dataclass(frozen=True)
class GapStats:
    policy_value: float
    policy_ci: tuple[float, float]
    oracle_value: float
    gap: float
    relative: bool   # True when the gap is (oracle - policy) / |oracle|


def policy_gap(net: QNetwork, oracle_value: float, env: MissionEnv,
               n_eval: int, seed: int = 0) -> GapStats:
    """Monte-Carlo value of the greedy policy against the oracle value."""
    report = evaluate(net, env, n_episodes=n_eval, seed=seed)
    if oracle_value > 0:
        gap = (oracle_value - report.mean_reward) / abs(oracle_value)
        relative = True
    else:
        gap = oracle_value - report.mean_reward
        relative = False
    return GapStats(
        policy_value=report.mean_reward,
        policy_ci=report.reward_ci,
        oracle_value=oracle_value,
        gap=float(gap),
        relative=relative,
    )
