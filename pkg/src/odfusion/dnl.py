"""Mesoscopic dynamic network loading with tagged cumulative curves.

Vehicles move as packets through point-queue links: free-flow traversal to
the link exit, then a FIFO discharge server limited by capacity shared
across classes through passenger-car equivalents. Every packet carries its
(path, departure interval) tag, and every curve increment keeps that tag so
assignment ratios can be recovered afterwards.

Four curves exist per (link, class): arrivals and departures of through
traffic (Am, Dm) and of parking traffic (Ap, Dp). All event times are
snapped up to the next sim_step multiple.
"""

from __future__ import annotations

import heapq
import itertools
import json
import math
from collections import deque
from dataclasses import dataclass, field

import numpy as np

from .network import CLASSES, N_CLASSES, Network, PathSet

ARR_MOVE, ARR_PARK, DEP_MOVE, DEP_PARK = 0, 1, 2, 3
CURVE_NAMES = ("Am", "Ap", "Dm", "Dp")
_EPS = 1e-9


@dataclass
class DnlConfig:
    """Loader settings. Times in seconds, fractions in [0,1]."""

    horizon_intervals: int
    sim_step: float = 5.0
    interval_length: float = 900.0
    logit_scale: float = 0.01
    parking_fraction: float = 0.2
    dwell_time: float = 1800.0
    enroute_fraction: float = 0.0
    density_smoothing_delta: int = 0
    packet_size: float = 1.0
    truck_pce: float = 2.0

    def __post_init__(self):
        if self.horizon_intervals < 1:
            raise ValueError("horizon_intervals must be positive")
        if self.sim_step <= 0 or self.interval_length <= 0:
            raise ValueError("sim_step and interval_length must be positive")
        ratio = self.interval_length / self.sim_step
        if abs(ratio - round(ratio)) > 1e-9:
            raise ValueError("sim_step must divide interval_length")
        for name in ("parking_fraction", "enroute_fraction"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must lie in [0,1]")
        if self.dwell_time < 0:
            raise ValueError("dwell_time must be nonnegative")
        if self.density_smoothing_delta < 0:
            raise ValueError("density_smoothing_delta must be nonnegative")
        if self.packet_size <= 0:
            raise ValueError("packet_size must be positive")
        if self.truck_pce <= 0:
            raise ValueError("truck_pce must be positive")

    @property
    def steps_per_interval(self) -> int:
        return int(round(self.interval_length / self.sim_step))

    @property
    def n_steps(self) -> int:
        return self.horizon_intervals * self.steps_per_interval


def class_od_groups(pathset: PathSet):
    """Per class, map od index to the array of its usable path ids."""
    groups = []
    for c in range(N_CLASSES):
        allowed = set(pathset.class_paths[c])
        by_od: dict[int, np.ndarray] = {}
        for od_idx, ids in pathset.od_paths.items():
            usable = [k for k in ids if k in allowed]
            if usable:
                by_od[od_idx] = np.asarray(usable, dtype=int)
        groups.append(by_od)
    return groups


def route_choice(path_costs: np.ndarray, logit_scale: float, pathset: PathSet) -> np.ndarray:
    """Multinomial-logit path proportions from path costs.

    path_costs has shape (classes, paths, intervals) in seconds. Proportions
    for each (class, OD, interval) follow softmax(-logit_scale * cost) over
    the OD's usable paths and sum to one there.
    """
    costs = np.asarray(path_costs, dtype=float)
    if costs.ndim != 3 or costs.shape[:2] != (N_CLASSES, pathset.n_paths):
        raise ValueError("path_costs must have shape (classes, paths, intervals)")
    if not np.all(np.isfinite(costs)):
        raise ValueError("path costs must be finite")
    if pathset.n_paths == 0:
        raise ValueError("empty path set")
    p = np.zeros_like(costs)
    for c, by_od in enumerate(class_od_groups(pathset)):
        if not by_od:
            raise ValueError(f"class {CLASSES[c]} has no usable paths")
        for ids in by_od.values():
            u = -logit_scale * costs[c, ids, :]
            u -= u.max(axis=0, keepdims=True)
            e = np.exp(u)
            p[c, ids, :] = e / e.sum(axis=0, keepdims=True)
    return p


def assign_path_flows(q: np.ndarray, p: np.ndarray, pathset: PathSet) -> np.ndarray:
    """Path flows f[c,k,t] = p[c,k,t] * q[c,od(k),t]."""
    q = np.asarray(q, dtype=float)
    p = np.asarray(p, dtype=float)
    if np.any(q < 0):
        raise ValueError("demand must be nonnegative")
    if p.shape[0] != N_CLASSES or p.shape[1] != pathset.n_paths or p.shape[2] != q.shape[2]:
        raise ValueError("proportion tensor shape mismatch")
    od_of = np.asarray(pathset.od_of_path(), dtype=int)
    f = p * q[:, od_of, :]
    return f


class CumulativeCurveSet:
    """Tagged step-function curves for every (link, class, curve kind).

    Increments are appended in simulation time order. value_before(t) sums
    increments strictly earlier than t, value_at(t) includes time t.
    """

    def __init__(self, net: Network, pathset: PathSet, cfg: DnlConfig):
        self.link_ids = tuple(ln.id for ln in net.links)
        self.n_links = net.n_links
        self.n_paths = pathset.n_paths
        self.T = cfg.horizon_intervals
        self.interval_length = cfg.interval_length
        self.sim_step = cfg.sim_step
        self.fftt = np.array(
            [[ln.free_flow_time(c) for ln in net.links] for c in range(N_CLASSES)]
        )
        self._raw = {
            (c, a, kind): []
            for c in range(N_CLASSES)
            for a in range(self.n_links)
            for kind in range(4)
        }
        self.f: np.ndarray | None = None
        self.cleared = False
        self._frozen = {}

    def add(self, c, a, kind, t, size, path, t1):
        self._raw[(c, a, kind)].append((t, size, path, t1))

    def finalize(self, f: np.ndarray, cleared: bool):
        self.f = np.array(f, dtype=float)
        self.cleared = bool(cleared)
        for key, rows in self._raw.items():
            if rows:
                times = np.array([r[0] for r in rows])
                sizes = np.array([r[1] for r in rows])
                paths = np.array([r[2] for r in rows], dtype=int)
                t1s = np.array([r[3] for r in rows], dtype=int)
            else:
                times = np.empty(0)
                sizes = np.empty(0)
                paths = np.empty(0, dtype=int)
                t1s = np.empty(0, dtype=int)
            self._frozen[key] = (times, sizes, np.cumsum(sizes), paths, t1s)
        self._raw = None

    def events(self, c, a, kind):
        """(times, sizes, paths, depart_intervals) arrays for one curve."""
        times, sizes, _, paths, t1s = self._frozen[(c, a, kind)]
        return times, sizes, paths, t1s

    def value_before(self, c, a, kind, t) -> float:
        times, _, cum, _, _ = self._frozen[(c, a, kind)]
        i = np.searchsorted(times, t, side="left")
        return float(cum[i - 1]) if i > 0 else 0.0

    def value_at(self, c, a, kind, t) -> float:
        times, _, cum, _, _ = self._frozen[(c, a, kind)]
        i = np.searchsorted(times, t, side="right")
        return float(cum[i - 1]) if i > 0 else 0.0

    def total(self, c, a, kind) -> float:
        _, _, cum, _, _ = self._frozen[(c, a, kind)]
        return float(cum[-1]) if len(cum) else 0.0

    def dump_jsonl(self, path) -> None:
        """Write one JSON object per increment: link, class, curve, t, value, tag."""
        with open(path, "w") as fh:
            for c in range(N_CLASSES):
                for a in range(self.n_links):
                    for kind in range(4):
                        times, sizes, paths, t1s = self.events(c, a, kind)
                        for t, s, k, t1 in zip(times, sizes, paths, t1s):
                            fh.write(json.dumps({
                                "link": self.link_ids[a],
                                "class": CLASSES[c],
                                "curve": CURVE_NAMES[kind],
                                "t": float(t),
                                "value": float(s),
                                "tag": [int(k), int(t1)],
                            }) + "\n")


@dataclass
class LinkStateTensor:
    """Per (class, link, interval) traffic state extracted from curves.

    inflow in vehicles per interval, travel_time in seconds, remaining in
    vehicles present at interval end (window-averaged when the smoothing
    delta is positive).
    """

    inflow: np.ndarray
    travel_time: np.ndarray
    remaining: np.ndarray
    cleared: bool

    def check_bounds(self, net: Network) -> list[str]:
        """Jam-storage diagnostics: remaining must fit within jam + curb."""
        bad = []
        for a, ln in enumerate(net.links):
            cap = sum(ln.jam_density[c] for c in range(N_CLASSES)) * ln.length
            cap += ln.curb_capacity
            worst = self.remaining[:, a, :].sum(axis=0).max() if self.remaining.size else 0.0
            if worst > cap + 1e-6:
                bad.append(f"link {ln.id}: {worst:.1f} vehicles exceed storage {cap:.1f}")
        return bad


class _Packet:
    __slots__ = ("cls", "col", "t1", "size", "pce", "route", "pos", "park_pos", "parked")

    def __init__(self, cls, col, t1, size, pce, route, park_pos):
        self.cls = cls
        self.col = col
        self.t1 = t1
        self.size = size
        self.pce = pce
        self.route = route
        self.pos = 0
        self.park_pos = park_pos
        self.parked = False


class _Loader:
    """One network loading run; single use."""

    def __init__(self, net, pathset, f, cfg, seed):
        self.net = net
        self.paths = pathset
        self.f = np.asarray(f, dtype=float)
        if self.f.shape != (N_CLASSES, pathset.n_paths, cfg.horizon_intervals):
            raise ValueError("path flow tensor shape mismatch")
        if np.any(self.f < 0) or not np.all(np.isfinite(self.f)):
            raise ValueError("path flows must be finite and nonnegative")
        self.cfg = cfg
        self.rng = np.random.default_rng(seed)
        self.curves = CumulativeCurveSet(net, pathset, cfg)
        self.seq = itertools.count()

        n = net.n_links
        dt = cfg.sim_step
        self.dt = dt
        self.fftt_steps = np.empty((N_CLASSES, n), dtype=int)
        for c in range(N_CLASSES):
            for a, ln in enumerate(net.links):
                self.fftt_steps[c, a] = max(
                    1, math.ceil(ln.free_flow_time(c) / dt - 1e-9)
                )
        # discharge budget per step in car equivalents
        self.rate = np.array([ln.capacity[0] * dt / 3600.0 for ln in net.links])
        self.curb_cap = np.array([ln.curb_capacity for ln in net.links])
        self.park_ok = np.array([ln.allows_parking for ln in net.links])
        self.dwell_steps = math.ceil(cfg.dwell_time / dt - 1e-9)
        self.pce_of = (1.0, cfg.truck_pce)

        self.incoming = [[] for _ in range(n)]
        self.service = [deque() for _ in range(n)]
        self.budget = np.zeros(n)
        self.curb_res = np.zeros(n)
        self.curb = [[] for _ in range(n)]
        self.buckets = [[] for _ in range(cfg.n_steps)]
        self.groups = class_od_groups(pathset)
        self.park_pos_of_path = [self._last_parking_pos(p) for p in pathset.paths]
        self.created = 0
        self.finished = 0
        self._route_cache = {}

    def _last_parking_pos(self, path):
        pos = -1
        for i, a in enumerate(path.link_idxs):
            if self.park_ok[a] and self.curb_cap[a] > 0:
                pos = i
        return pos

    def run(self):
        cfg = self.cfg
        spi = cfg.steps_per_interval
        for step in range(cfg.n_steps):
            now = step * self.dt
            if step % spi == 0:
                self._materialize_interval(step // spi)
            for pkt in self.buckets[step]:
                self._enter_link(pkt, now)
            self.buckets[step] = ()
            for a in range(self.net.n_links):
                self._process_link(a, now)
        self.curves.finalize(self.f, cleared=self.created == self.finished)
        state = build_link_state(self.curves, cfg.density_smoothing_delta)
        return self.curves, state

    def _materialize_interval(self, t1):
        cfg = self.cfg
        spi = cfg.steps_per_interval
        for c in range(N_CLASSES):
            pce = self.pce_of[c]
            for k in self.paths.class_paths[c]:
                vol = self.f[c, k, t1]
                if vol <= _EPS:
                    continue
                path = self.paths.paths[k]
                park_pos = self.park_pos_of_path[k]
                vol_park = cfg.parking_fraction * vol if park_pos >= 0 else 0.0
                vol_adapt = cfg.enroute_fraction * (vol - vol_park)
                vol_pre = vol - vol_park - vol_adapt
                plans = [(vol_pre, path.link_idxs, -1)]
                if vol_park > _EPS:
                    plans.append((vol_park, path.link_idxs, park_pos))
                if vol_adapt > _EPS:
                    plans.append((vol_adapt, self._adaptive_route(c, path.od_index, t1), -1))
                for volume, route, ppos in plans:
                    if volume <= _EPS:
                        continue
                    self._spawn(c, k, t1, volume, pce, route, ppos, spi)

    def _spawn(self, c, k, t1, volume, pce, route, park_pos, spi):
        ps = self.cfg.packet_size
        n_full = int(volume / ps + 1e-9)
        rem = volume - n_full * ps
        sizes = [ps] * n_full
        if rem > _EPS:
            sizes.append(rem)
        if not sizes:
            return
        offsets = self.rng.integers(0, spi, size=len(sizes))
        for size, off in zip(sizes, offsets):
            pkt = _Packet(c, k, t1, size, size * pce, route, park_pos)
            self.created += 1
            self.buckets[t1 * spi + int(off)].append(pkt)

    def _adaptive_route(self, c, od_idx, t1):
        key = (c, od_idx, t1)
        cached = self._route_cache.get(key)
        if cached is not None:
            return cached
        net = self.net
        r, s = net.od_pairs[od_idx]
        costs = self._instant_costs(c)
        best = {r: (0.0, ())}
        heap = [(0.0, (), r)]
        done = set()
        route = None
        while heap:
            cost, seq, node = heapq.heappop(heap)
            if node in done:
                continue
            done.add(node)
            if node == s:
                route = seq
                break
            for pos in net.out_links(node):
                ln = net.links[pos]
                if ln.is_connector and ln.from_node != r and ln.to_node != s:
                    continue
                if ln.to_node in done:
                    continue
                heapq.heappush(heap, (cost + costs[pos], seq + (pos,), ln.to_node))
        if route is None:
            # fall back to the first enumerated path of this OD pair
            route = self.paths.paths[self.paths.od_paths[od_idx][0]].link_idxs
        self._route_cache[key] = route
        return route

    def _instant_costs(self, c):
        backlog = np.array(
            [sum(p.pce for p in self.service[a]) for a in range(self.net.n_links)]
        )
        rate_per_sec = self.rate / self.dt
        return self.fftt_steps[c] * self.dt + backlog / rate_per_sec

    def _enter_link(self, pkt, now):
        a = pkt.route[pkt.pos]
        c = pkt.cls
        if (
            pkt.pos == pkt.park_pos
            and self.curb_res[a] + pkt.size <= self.curb_cap[a] + _EPS
        ):
            self.curb_res[a] += pkt.size
            pkt.parked = True
            self.curves.add(c, a, ARR_PARK, now, pkt.size, pkt.col, pkt.t1)
        else:
            pkt.parked = False
            self.curves.add(c, a, ARR_MOVE, now, pkt.size, pkt.col, pkt.t1)
        ready = now + self.fftt_steps[c, a] * self.dt
        heapq.heappush(self.incoming[a], (ready, next(self.seq), pkt))

    def _process_link(self, a, now):
        curb = self.curb[a]
        while curb and curb[0][0] <= now + _EPS:
            _, _, pkt = heapq.heappop(curb)
            self.curves.add(pkt.cls, a, DEP_PARK, now, pkt.size, pkt.col, pkt.t1)
            self.curb_res[a] -= pkt.size
            self._advance(pkt, now)
        incoming = self.incoming[a]
        service = self.service[a]
        while incoming and incoming[0][0] <= now + _EPS:
            _, _, pkt = heapq.heappop(incoming)
            if pkt.parked:
                exit_t = now + self.dwell_steps * self.dt
                heapq.heappush(curb, (exit_t, next(self.seq), pkt))
            else:
                service.append(pkt)
        self.budget[a] += self.rate[a]
        while service and service[0].pce <= self.budget[a] + _EPS:
            pkt = service.popleft()
            self.budget[a] -= pkt.pce
            self.curves.add(pkt.cls, a, DEP_MOVE, now, pkt.size, pkt.col, pkt.t1)
            self._advance(pkt, now)
        if service:
            self.budget[a] = min(self.budget[a], max(self.rate[a], service[0].pce))
        else:
            self.budget[a] = 0.0

    def _advance(self, pkt, now):
        pkt.pos += 1
        if pkt.pos >= len(pkt.route):
            self.finished += 1
        else:
            self._enter_link(pkt, now)


def run_dnl(net: Network, pathset: PathSet, f: np.ndarray, cfg: DnlConfig, seed: int = 0):
    """Load path flows onto the network.

    Returns (CumulativeCurveSet, LinkStateTensor). Identical inputs and seed
    reproduce identical curves; the seed only drives departure spacing
    inside each interval. When packets remain on the network at the end of
    the horizon, curves.cleared is False.
    """
    return _Loader(net, pathset, f, cfg, seed).run()


def _check_cell(curves, link, cls, interval):
    if not 0 <= link < curves.n_links:
        raise ValueError(f"link index {link} out of range")
    if not 0 <= cls < N_CLASSES:
        raise ValueError(f"class index {cls} out of range")
    if not 0 <= interval < curves.T:
        raise ValueError(f"interval {interval} out of range")


def extract_link_flow(curves: CumulativeCurveSet, link: int, cls: int, interval: int) -> float:
    """Vehicles of one class entering a link during one interval."""
    _check_cell(curves, link, cls, interval)
    t0 = interval * curves.interval_length
    t1 = t0 + curves.interval_length
    total = 0.0
    for kind in (ARR_MOVE, ARR_PARK):
        total += curves.value_before(cls, link, kind, t1)
        total -= curves.value_before(cls, link, kind, t0)
    return total


def extract_travel_time(curves: CumulativeCurveSet, link: int, cls: int, interval: int) -> float:
    """Through-traffic traversal time in seconds probed at the interval.

    Evaluates the departure curve inverse at the arrival count of the first
    through arrival inside the interval. Falls back to the free-flow time
    when the interval has no through arrival or the probe has not cleared
    the link by the end of the run.
    """
    _check_cell(curves, link, cls, interval)
    t0 = interval * curves.interval_length
    t1 = t0 + curves.interval_length
    fftt = float(curves.fftt[cls, link])
    times, _, cum, _, _ = curves._frozen[(cls, link, ARR_MOVE)]
    i = np.searchsorted(times, t0, side="left")
    if i >= len(times) or times[i] >= t1:
        return fftt
    t_eval = times[i]
    j = np.searchsorted(times, t_eval, side="right")
    target = cum[j - 1]
    d_times, _, d_cum, _, _ = curves._frozen[(cls, link, DEP_MOVE)]
    m = np.searchsorted(d_cum, target - _EPS, side="left")
    if m >= len(d_times):
        return fftt
    return float(d_times[m] - t_eval)


def extract_density(curves: CumulativeCurveSet, link: int, cls: int, interval: int,
                    delta: int = 0) -> float:
    """Vehicles of one class present on a link at the interval end.

    Counts both moving and parked traffic. A positive delta averages the
    value over the 2*delta+1 intervals centred on the target, clipped to
    the horizon.
    """
    _check_cell(curves, link, cls, interval)
    lo = max(0, interval - delta)
    hi = min(curves.T - 1, interval + delta)
    vals = []
    for j in range(lo, hi + 1):
        t_end = (j + 1) * curves.interval_length
        r = (
            curves.value_before(cls, link, ARR_MOVE, t_end)
            + curves.value_before(cls, link, ARR_PARK, t_end)
            - curves.value_before(cls, link, DEP_MOVE, t_end)
            - curves.value_before(cls, link, DEP_PARK, t_end)
        )
        vals.append(r)
    return float(np.mean(vals))


def build_link_state(curves: CumulativeCurveSet, delta: int = 0) -> LinkStateTensor:
    """Extract the full (class, link, interval) state from curves."""
    C, A, T = N_CLASSES, curves.n_links, curves.T
    inflow = np.zeros((C, A, T))
    tt = np.zeros((C, A, T))
    rem = np.zeros((C, A, T))
    for c in range(C):
        for a in range(A):
            for t in range(T):
                inflow[c, a, t] = extract_link_flow(curves, a, c, t)
                tt[c, a, t] = extract_travel_time(curves, a, c, t)
                rem[c, a, t] = extract_density(curves, a, c, t, delta)
    return LinkStateTensor(inflow=inflow, travel_time=tt, remaining=rem,
                           cleared=curves.cleared)


def instantaneous_path_costs(state: LinkStateTensor, pathset: PathSet) -> np.ndarray:
    """Path costs per departure interval as sums of link travel times."""
    C = N_CLASSES
    K = pathset.n_paths
    T = state.travel_time.shape[2]
    costs = np.zeros((C, K, T))
    for k, path in enumerate(pathset.paths):
        idxs = list(path.link_idxs)
        for c in range(C):
            costs[c, k, :] = state.travel_time[c, idxs, :].sum(axis=0)
    return costs


def free_flow_path_costs(pathset: PathSet, T: int) -> np.ndarray:
    """Constant path costs from per-class free-flow times."""
    base = np.asarray(pathset.fftt_array())
    return np.repeat(base[:, :, None], T, axis=2)
