"""Coupled road-feeder decision environment for station recommendation.

One environment instance owns a traffic simulation, the charging stations,
and the feeder model. Control-phase EV departures pause the simulation and
become decision steps: the agent picks a station index, the EV is routed
there (or to the nearest station when the driver defects, sampled from a
dedicated compliance stream), and the simulation advances to the next
request or to episode end.

Each decision step covers a segment of simulation ticks and yields

* a reward built from the loaded-vehicle count per tick: small counts mean
  light congestion, so r = w1 * (r_max - R) with R the segment mean count
  (final segment: R = w2 * the segment's count-time integral, since that
  segment runs until every vehicle finishes and a mean would hide it);
* a cost equal to the bus-averaged voltage deviation at the segment's
  highest-charging-load sampled instant (sampled at the decision instant
  and every simulated minute).

A droop controller refreshes the uniform pile setpoint once per interval
using the power flow at the previous interval's peak-load minute sample.

Time advances in 1 s ticks. Within a tick: droop boundary first, then
departures (pausing for decisions before any movement), then movement,
station arrivals in vehicle-id order, charging, and re-routing of finished
chargers; minute sampling happens after the tick's physics. Departure,
arrival, and completion timestamps therefore all land on tick boundaries,
which keeps the per-vehicle travel-time sum exactly equal to the
tick-counted dual (``EpisodeMetrics.ttt_s == EpisodeMetrics.ttt_tick_s``).
"""

from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass

import numpy as np

from .charging import ChargingStation, charging_loads_kw, droop_power
from .power import average_voltage, solve_power_flow, voltage_deviation
from .scenario import RewardParams, ScenarioConfig, build_vehicle, generate_trips
from .traffic import (DRIVE_CS, DRIVE_DEST, DONE, STRANDED, NoPathError,
                      TrafficSim, path_length_m, record_trip_times,
                      shortest_path)

TICK_S = 1.0
WAIT_NORM_S = 600.0      # queue-wait scale used in station observations


class EnvError(RuntimeError):
    """Environment used outside its contract (no pending request, etc.)."""


@dataclass(frozen=True)
class StepOutcome:
    state: np.ndarray | None      # None exactly when terminal
    reward: float
    cost: float
    terminal: bool
    decision_s: float             # caller-measured decision wall clock, echoed


@dataclass(frozen=True)
class EpisodeMetrics:
    ttt_s: float           # per-vehicle travel time sum (drive + wait + charge)
    ttt_tick_s: float      # the same total counted per tick; equal exactly
    cvv: float             # summed per-step voltage deviation cost
    wct_min: float         # mean EV wait+charge minutes (0 when no EV finished)
    wct_defined: bool
    n_steps: int
    n_completed: int
    n_ev_completed: int
    n_stranded: int
    dt_mean_s: float       # mean caller-reported decision latency


def greedy_station(road, stations, origin):
    """Index of the station nearest to origin by path meters (ties: lowest)."""
    meters = {lid: road.links[lid].length_m for lid in road.links}
    best = None
    best_d = math.inf
    for i, st in enumerate(stations):
        try:
            d = path_length_m(road, shortest_path(road, origin, st.node, meters))
        except NoPathError:
            continue
        if d < best_d:
            best, best_d = i, d
    if best is None:
        raise NoPathError(f"no station reachable from node {origin}")
    return best


def segment_reward(counts, last_count, final, rp: RewardParams,
                   dt: float = TICK_S) -> float:
    """Reward for one decision segment from its per-tick loaded counts.

    Zero-length segments (simultaneous requests) pass counts=[] and fall
    back on the most recent counted tick.
    """
    if final:
        r_t = rp.w2 * float(sum(counts)) * dt
    elif counts:
        r_t = float(sum(counts)) / len(counts)
    else:
        r_t = float(last_count)
    return rp.w1 * (rp.r_max - r_t)


def segment_cost(samples, solve, v_ref: float = 1.0) -> float:
    """Deviation cost at the segment's highest-total-load sampled instant.

    samples: [(total_kw, {bus: kw}), ...] in time order; ties keep the
    earliest. solve maps the per-bus extra-load dict to a PF solution.
    """
    if not samples:
        raise EnvError("segment recorded no load samples")
    best = samples[0]
    for s in samples[1:]:
        if s[0] > best[0]:
            best = s
    return voltage_deviation(solve(best[1]), v_ref)


class CouplingEnv:
    """Episodic environment; one instance may be reset for many episodes."""

    def __init__(self, cfg: ScenarioConfig, trace: bool = False):
        self.cfg = cfg
        self.road = cfg.road_net
        self.power = cfg.power_net
        self.compliance_rate = cfg.compliance_rate
        self.trace_enabled = trace
        if cfg.droop.interval_s != int(cfg.droop.interval_s):
            raise EnvError("droop interval must be a whole number of seconds")
        self._droop_every = int(cfg.droop.interval_s)
        self._n_links = len(self.road.link_ids)
        self._greedy_memo = {}
        self._terminal = False
        self._pending = deque()

    @property
    def action_dim(self) -> int:
        return len(self.cfg.stations)

    @property
    def state_dim(self) -> int:
        return 5 + self._n_links + 9 * len(self.cfg.stations)

    @property
    def pending_vid(self):
        return self._pending[0] if self._pending else None

    @property
    def pending_vehicle(self):
        """Vehicle awaiting a station decision (None outside a pause)."""
        return self._vehicles[self._pending[0]] if self._pending else None

    # ------------------------------------------------------------------
    # episode lifecycle
    # ------------------------------------------------------------------

    def reset(self, seed: int) -> np.ndarray:
        cfg = self.cfg
        self._vehicles = [build_vehicle(t, cfg.demand.soc_target)
                          for t in generate_trips(cfg, seed)]
        for veh in self._vehicles:
            veh.depart_s = float(math.ceil(veh.depart_s))   # align to ticks
        warmup = cfg.demand.warmup_s
        if not any(v.is_ev and v.depart_s >= warmup for v in self._vehicles):
            raise EnvError("scenario generates no control-phase charging "
                           "requests (is ev_fraction zero?)")
        self._compliance_rng = np.random.default_rng([seed, cfg.seed, 1])
        self.stations = [ChargingStation(s.cs_id, s.node, s.bus, s.piles)
                         for s in cfg.stations]
        self._cs_index = {cs.cs_id: i for i, cs in enumerate(self.stations)}
        self.sim = TrafficSim(self.road, battery=cfg.battery)
        self._t = 0
        self._mid_tick = False
        self._next_dep = 0
        self._n_loaded = 0
        self._n_unfinished = len(self._vehicles)
        self._setpoint = cfg.droop.p_max_kw
        self._pending = deque()
        self._last_count = 0
        self._ttt_ticks = 0.0
        self._seg_counts = None
        self._seg_samples = None
        self._interval_samples = []
        self._pf_cache = {}
        self.minute_log = []    # (t, occupancy, station features, total kW, setpoint)
        self.droop_log = []     # (t, v_avg, setpoint kW, occupancy tuple)
        self.completed = []
        self.stranded = []
        self.step_rewards = []
        self.step_costs = []
        self.trace = []         # (step, action, reward, cost, elapsed_s, vid, followed)
        self._decision_s_sum = 0.0
        self._n_steps = 0
        self._terminal = False
        self._safety_cap = int(cfg.horizon_s) + 86400
        if self._advance():
            raise EnvError("episode ended before any charging request")
        return self._state()

    def apply_action(self, cs_index: int, decision_s: float = 0.0) -> StepOutcome:
        if self._terminal or not self._pending:
            raise EnvError("no pending charging request")
        idx = int(cs_index)
        if not 0 <= idx < self.action_dim:
            raise EnvError(f"station index {idx} out of range "
                           f"[0, {self.action_dim})")
        vid = self._pending.popleft()
        veh = self._vehicles[vid]
        followed = bool(self._compliance_rng.random() < self.compliance_rate)
        applied = idx if followed else self._greedy(veh.origin)
        t0 = self._t
        self._assign(veh, applied, t0)
        self._seg_counts = []
        self._seg_samples = [self._load_sample()]
        if self._pending:
            terminal = False    # zero-length segment between simultaneous requests
        else:
            terminal = self._advance()
        reward = segment_reward(self._seg_counts, self._last_count, terminal,
                                self.cfg.reward)
        cost = segment_cost(self._seg_samples, self._solve, self.cfg.reward.v_ref)
        self._seg_counts = None
        self._seg_samples = None
        self.step_rewards.append(reward)
        self.step_costs.append(cost)
        self._decision_s_sum += decision_s
        if self.trace_enabled:
            self.trace.append((self._n_steps, applied, reward, cost,
                               self._t - t0, vid, followed))
        self._n_steps += 1
        state = None if terminal else self._state()
        return StepOutcome(state, reward, cost, terminal, decision_s)

    def set_compliance(self, rate: float):
        if not 0.0 <= rate <= 1.0:
            raise EnvError("compliance rate must lie in [0, 1]")
        self.compliance_rate = float(rate)

    def episode_metrics(self) -> EpisodeMetrics:
        if not self._terminal:
            raise EnvError("episode has not terminated")
        ttt = 0.0
        wct_s = 0.0
        n_ev = 0
        for veh in self.completed:
            times = record_trip_times(veh)
            ttt += times.tt_total
            if veh.is_ev and veh.cs_id is not None:
                wct_s += times.tt_wait + times.tt_charge
                n_ev += 1
        return EpisodeMetrics(
            ttt_s=ttt,
            ttt_tick_s=self._ttt_ticks,
            cvv=float(sum(self.step_costs)),
            wct_min=(wct_s / n_ev / 60.0) if n_ev else 0.0,
            wct_defined=n_ev > 0,
            n_steps=self._n_steps,
            n_completed=len(self.completed),
            n_ev_completed=n_ev,
            n_stranded=len(self.stranded),
            dt_mean_s=self._decision_s_sum / self._n_steps if self._n_steps else 0.0,
        )

    # ------------------------------------------------------------------
    # observation assembly
    # ------------------------------------------------------------------

    def _state(self) -> np.ndarray:
        veh = self._vehicles[self._pending[0]]
        ox, oy = self.road.normalized_xy(veh.origin)
        dx, dy = self.road.normalized_xy(veh.dest)
        out = np.empty(self.state_dim)
        out[0:5] = (ox, oy, dx, dy, veh.soc)
        out[5:5 + self._n_links] = self.sim.density_vector()
        out[5 + self._n_links:] = self._station_features()
        return out

    def _station_features(self) -> np.ndarray:
        """Per-station 9-feature blocks, counts scaled by pile count and
        waits by WAIT_NORM_S, concatenated in station order."""
        out = np.empty(9 * len(self.stations))
        for i, cs in enumerate(self.stations):
            f = cs.state_features(float(self._t))
            f[0] /= cs.piles
            f[1] /= cs.piles
            f[6] /= WAIT_NORM_S
            f[7] /= WAIT_NORM_S
            f[8] /= cs.piles
            out[9 * i:9 * i + 9] = f
        return out

    # ------------------------------------------------------------------
    # simulation core
    # ------------------------------------------------------------------

    def _advance(self) -> bool:
        """Run ticks until a decision is pending (False) or terminal (True)."""
        while True:
            if not self._mid_tick:
                self._tick_pre()
                self._mid_tick = True
                if self._pending:
                    return False
            self._tick_post()
            if self._n_unfinished == 0:
                self._terminal = True
                return True
            if self._t > self._safety_cap:
                raise EnvError(f"episode exceeded {self._safety_cap} ticks with "
                               f"{self._n_unfinished} unfinished vehicles")

    def _tick_pre(self):
        t = self._t
        if t > 0 and t % self._droop_every == 0:
            self._update_droop()
        vehicles = self._vehicles
        while self._next_dep < len(vehicles) and vehicles[self._next_dep].depart_s <= t:
            self._depart(vehicles[self._next_dep], t)
            self._next_dep += 1

    def _tick_post(self):
        t = self._t
        n_p = self._n_loaded
        self._ttt_ticks += n_p * TICK_S
        self._last_count = n_p
        if self._seg_counts is not None:
            self._seg_counts.append(n_p)
        t_end = float(t + 1)
        arrivals = self.sim.step(TICK_S)
        arrivals.sort(key=lambda v: v.vid)
        for veh in arrivals:
            if veh.phase == DRIVE_CS:
                self.stations[self._cs_index[veh.cs_id]].submit_arrival(veh, t_end)
            else:
                self._finish(veh, t_end)
        battery = self.cfg.battery
        for cs in self.stations:
            for veh in cs.update_charging(TICK_S, self._setpoint, battery, t_end):
                if veh.dest == cs.node:
                    self._finish(veh, t_end)
                else:
                    veh.phase = DRIVE_DEST
                    veh.route = shortest_path(self.road, cs.node, veh.dest,
                                              self.sim.travel_times())
                    self.sim.enter_road(veh)
        self._check_stranded(t_end)
        self._t = t + 1
        self._mid_tick = False
        if self._t % 60 == 0:
            self._minute_sample()

    def _depart(self, veh, t):
        self._n_loaded += 1
        if veh.is_ev and veh.depart_s >= self.cfg.demand.warmup_s:
            self._pending.append(veh.vid)
        elif veh.is_ev:
            self._assign(veh, self._greedy(veh.origin), t)
        else:
            veh.phase = DRIVE_DEST
            veh.route = shortest_path(self.road, veh.origin, veh.dest,
                                      self.sim.travel_times())
            self.sim.enter_road(veh)

    def _assign(self, veh, index, t):
        st = self.stations[index]
        veh.cs_id = st.cs_id
        st.pending += 1
        if veh.origin == st.node:
            st.submit_arrival(veh, float(t))
        else:
            veh.phase = DRIVE_CS
            veh.route = shortest_path(self.road, veh.origin, st.node,
                                      self.sim.travel_times())
            self.sim.enter_road(veh)

    def _finish(self, veh, t_end):
        veh.phase = DONE
        veh.t_done = t_end
        self._n_loaded -= 1
        self._n_unfinished -= 1
        self.completed.append(veh)

    def _check_stranded(self, t_end):
        bad = [v for v in self.sim.driving if v.is_ev and v.soc <= 0.0]
        for veh in bad:
            self.sim.remove(veh)
            if veh.phase == DRIVE_CS and veh.cs_id is not None:
                cs = self.stations[self._cs_index[veh.cs_id]]
                if cs.pending > 0:
                    cs.pending -= 1
            veh.phase = STRANDED
            self._n_loaded -= 1
            self._n_unfinished -= 1
            self._ttt_ticks -= t_end - veh.depart_s   # keep the tick dual exact
            self.stranded.append(veh)

    def _greedy(self, origin):
        idx = self._greedy_memo.get(origin)
        if idx is None:
            idx = greedy_station(self.road, self.stations, origin)
            self._greedy_memo[origin] = idx
        return idx

    # ------------------------------------------------------------------
    # sampling, droop, and power flow
    # ------------------------------------------------------------------

    def _load_sample(self):
        loads = charging_loads_kw(self.stations, self._setpoint)
        return (sum(loads.values()), loads)

    def _minute_sample(self):
        sample = self._load_sample()
        self._interval_samples.append(sample)
        if self._seg_samples is not None:
            self._seg_samples.append(sample)
        occ = np.array([len(cs.queue) + len(cs.charging) for cs in self.stations],
                       dtype=float)
        self.minute_log.append((self._t, occ, self._station_features(),
                                sample[0], self._setpoint))

    def _update_droop(self):
        samples = self._interval_samples or [self._load_sample()]
        best = samples[0]
        for s in samples[1:]:
            if s[0] > best[0]:
                best = s
        v_avg = average_voltage(self._solve(best[1]))
        self._setpoint = droop_power(v_avg, self.cfg.droop)
        self._interval_samples = []
        occ = tuple(len(cs.queue) + len(cs.charging) for cs in self.stations)
        self.droop_log.append((self._t, v_avg, self._setpoint, occ))

    def _solve(self, loads):
        key = tuple(sorted(loads.items()))
        sol = self._pf_cache.get(key)
        if sol is None:
            sol = solve_power_flow(self.power, loads)
            self._pf_cache[key] = sol
        return sol
