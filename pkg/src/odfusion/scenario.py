"""End-to-end experiment orchestration on synthetic networks.

A scenario builds a network, draws a ground-truth demand, loads it to
produce noisy observations on a sampled link subset, estimates demand
back, and reports recovery metrics. Everything is seeded: a summary file
carries enough to reproduce the run bit for bit.
"""

from __future__ import annotations

import hashlib
import json
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path as FilePath

import numpy as np

from .network import N_CLASSES, Link, Network, PathSet, enumerate_paths, \
    load_network, save_network, validate_network
from .dnl import DnlConfig, assign_path_flows, free_flow_path_costs, \
    route_choice, run_dnl
from .estimator import EstimatorConfig, LossWeights, ObsRow, ObservationSet, \
    ObsStream, build_operator, demand_metrics, identity_rows, solve_dode, \
    state_metrics, write_demand_csv, write_observations_csv
from .benchmark import SpsaConfig, fit_class_bases, generate_od_samples, \
    solve_pc_spsa
from .observation import inject_noise
from .dar import state_to_vec

# Toy network: twelve road segments with the reference attribute rows plus
# six zone connectors (ids 10 to 15) filling the id gap.
_TOY_SEGMENTS = [
    # id, from, to, len, ffs, cap, jam, parking, curb
    (1, 1, 2, 1.0, (50, 40), (6000, 3600), (540, 240), False, 0),
    (2, 2, 3, 0.5, (50, 40), (2000, 1200), (90, 40), False, 0),
    (3, 3, 4, 1.0, (50, 40), (6000, 3600), (540, 240), True, 40),
    (4, 2, 5, 0.5, (50, 40), (2000, 1200), (180, 80), False, 0),
    (5, 5, 3, 1.0, (50, 40), (6000, 3600), (540, 240), False, 0),
    (6, 3, 6, 0.5, (50, 40), (2000, 1200), (90, 40), True, 20),
    (7, 2, 6, 1.0, (50, 40), (4000, 2400), (360, 160), False, 0),
    (8, 6, 3, 0.5, (50, 40), (2000, 1200), (90, 40), False, 0),
    (9, 5, 4, 1.0, (50, 40), (6000, 3600), (540, 240), True, 30),
    (16, 1, 5, 2.0, (30, 20), (2000, 1200), (360, 160), False, 0),
    (17, 5, 6, 0.5, (30, 20), (2000, 1200), (90, 40), False, 0),
    (18, 6, 4, 2.0, (30, 20), (2000, 1200), (360, 160), True, 60),
]
_TOY_CONNECTORS = [
    (10, 101, 1), (11, 102, 2), (12, 103, 5),
    (13, 4, 201), (14, 3, 202), (15, 6, 203),
]
_TOY_OD = [(101, 201), (101, 202), (102, 201), (102, 203), (103, 201), (103, 202)]
_TOY_XY = {
    1: (0.0, 0.0), 2: (1000.0, 0.0), 3: (1500.0, 0.0), 4: (2500.0, 0.0),
    5: (800.0, -600.0), 6: (1800.0, -600.0),
    101: (-200.0, 150.0), 102: (950.0, 250.0), 103: (550.0, -850.0),
    201: (2700.0, 150.0), 202: (1550.0, 250.0), 203: (1950.0, -850.0),
}


def toy_network() -> Network:
    """The 18-link test network: 12 segments plus 6 zone connectors."""
    links = []
    for lid, u, v, length, ffs, cap, jam, park, curb in _TOY_SEGMENTS:
        links.append(Link(
            id=lid, from_node=u, to_node=v, length=length,
            ffs=tuple(float(x) for x in ffs),
            capacity=tuple(float(x) for x in cap),
            jam_density=tuple(float(x) for x in jam),
            allows_parking=park, curb_capacity=float(curb),
        ))
    for lid, u, v in _TOY_CONNECTORS:
        links.append(Link(
            id=lid, from_node=u, to_node=v, length=0.1,
            ffs=(50.0, 40.0), capacity=(10800.0, 10800.0),
            jam_density=(1000.0, 1000.0), is_connector=True,
        ))
    links.sort(key=lambda ln: ln.id)
    return Network(links, _TOY_OD, _TOY_XY)


def grid_network(rows: int = 4, cols: int = 4, n_od: int = 8,
                 seed: int = 7) -> Network:
    """Seeded lattice stand-in for a mid-scale urban network.

    Bidirectional links join lattice neighbours with attributes sampled
    from the toy palette; zone connectors attach to sampled border nodes.
    """
    if rows < 2 or cols < 2:
        raise ValueError("grid needs at least 2x2 nodes")
    rng = np.random.default_rng(seed)
    palette = [
        (1.0, (50, 40), (6000, 3600), (540, 240)),
        (0.5, (50, 40), (2000, 1200), (90, 40)),
        (1.0, (50, 40), (4000, 2400), (360, 160)),
        (0.5, (30, 20), (2000, 1200), (90, 40)),
    ]
    node_id = lambda r, c: r * cols + c + 1
    links = []
    lid = 1
    xy = {}
    for r in range(rows):
        for c in range(cols):
            xy[node_id(r, c)] = (c * 800.0, -r * 800.0)
    for r in range(rows):
        for c in range(cols):
            here = node_id(r, c)
            for rr, cc in ((r, c + 1), (r + 1, c)):
                if rr >= rows or cc >= cols:
                    continue
                there = node_id(rr, cc)
                for u, v in ((here, there), (there, here)):
                    length, ffs, cap, jam = palette[int(rng.integers(0, len(palette)))]
                    park = bool(rng.uniform() < 0.25)
                    links.append(Link(
                        id=lid, from_node=u, to_node=v, length=length,
                        ffs=tuple(map(float, ffs)), capacity=tuple(map(float, cap)),
                        jam_density=tuple(map(float, jam)),
                        allows_parking=park,
                        curb_capacity=40.0 if park else 0.0,
                    ))
                    lid += 1
    border = sorted(
        node_id(r, c)
        for r in range(rows) for c in range(cols)
        if r in (0, rows - 1) or c in (0, cols - 1)
    )
    od_pairs = []
    zone = 1000
    seen_zone = {}
    attempts = 0
    while len(od_pairs) < n_od and attempts < 50 * n_od:
        attempts += 1
        r_node, s_node = rng.choice(border, size=2, replace=False)
        key = (int(r_node), int(s_node))
        if key in seen_zone or key[0] == key[1]:
            continue
        seen_zone[key] = True
        o_zone, d_zone = zone, zone + 1
        zone += 2
        links.append(Link(id=lid, from_node=o_zone, to_node=int(r_node), length=0.1,
                          ffs=(50.0, 40.0), capacity=(10800.0, 10800.0),
                          jam_density=(1000.0, 1000.0), is_connector=True))
        lid += 1
        links.append(Link(id=lid, from_node=int(s_node), to_node=d_zone, length=0.1,
                          ffs=(50.0, 40.0), capacity=(10800.0, 10800.0),
                          jam_density=(1000.0, 1000.0), is_connector=True))
        lid += 1
        xy[o_zone] = (xy[int(r_node)][0] - 150.0, xy[int(r_node)][1] + 150.0)
        xy[d_zone] = (xy[int(s_node)][0] + 150.0, xy[int(s_node)][1] - 150.0)
        od_pairs.append((o_zone, d_zone))
    return Network(links, od_pairs, xy)


def ground_truth_demand(n_od: int, T: int, seed: int, car_scale: float,
                        truck_scale: float) -> np.ndarray:
    """Peaked deterministic demand, cars roughly ten times trucks.

    The temporal profile is a clipped bell over early intervals so the
    network can clear before the horizon ends.
    """
    rng = np.random.default_rng(seed)
    t = np.arange(T, dtype=float)
    profile = np.exp(-0.5 * ((t - 2.5) / 1.5) ** 2)
    profile[t >= 6] = 0.0
    q = np.zeros((N_CLASSES, n_od, T))
    for od in range(n_od):
        q[0, od] = car_scale * rng.uniform(0.6, 1.4) * profile
        q[1, od] = truck_scale * rng.uniform(0.6, 1.4) * profile
    return q


@dataclass
class ScenarioConfig:
    """Declarative settings for one experiment."""

    name: str = "toy"
    network_kind: str = "toy"          # toy | grid | files
    network_csv: str | None = None
    coords_csv: str | None = None
    od_csv: str | None = None
    out_dir: str = "out"
    seed: int = 1
    truth_seed: int = 4242
    horizon_intervals: int = 10
    k_paths: int = 5
    car_scale: float = 280.0
    truck_scale: float = 28.0
    observed_links: int = 6
    count_noise: float = 0.1
    time_noise: float = 0.1
    density_noise: float = 0.1
    with_density: bool = True
    snapshot_stride: int = 1
    density_weight_scale: float = 0.05
    solver: str = "gradient"           # gradient | pc_spsa
    epochs: int = 60
    optimizer: str = "adam"
    lr: float = 8.0
    lr_decay: float = 0.985
    init_factor: float = 0.5
    tt_grad_mode: str = "on"
    sim_step: float = 5.0
    interval_length: float = 900.0
    logit_scale: float = 0.01
    parking_fraction: float = 0.2
    dwell_time: float = 1800.0
    enroute_fraction: float = 0.0
    density_smoothing_delta: int = 0
    packet_size: float = 1.0
    truck_pce: float = 2.0
    spsa_iterations: int = 29
    spsa_a: float = 1.2
    spsa_c: float = 0.4
    spsa_samples: int = 299
    spsa_perturbation: float = 0.2
    pca_variance: float = 0.95
    grid_rows: int = 4
    grid_cols: int = 4
    grid_od: int = 8

    def dnl_config(self) -> DnlConfig:
        return DnlConfig(
            horizon_intervals=self.horizon_intervals,
            sim_step=self.sim_step,
            interval_length=self.interval_length,
            logit_scale=self.logit_scale,
            parking_fraction=self.parking_fraction,
            dwell_time=self.dwell_time,
            enroute_fraction=self.enroute_fraction,
            density_smoothing_delta=self.density_smoothing_delta,
            packet_size=self.packet_size,
            truck_pce=self.truck_pce,
        )

    def estimator_config(self) -> EstimatorConfig:
        return EstimatorConfig(
            epochs=self.epochs,
            optimizer=self.optimizer,
            lr=self.lr,
            lr_decay=self.lr_decay,
            init_scale=(self.init_factor * self.car_scale,
                        self.init_factor * self.truck_scale),
            seed=self.seed + 31,
            dnl_seed=self.seed + 41,
            tt_grad_mode=self.tt_grad_mode,
        )

    def seeds(self) -> dict:
        return {
            "master": self.seed,
            "truth": self.truth_seed,
            "observed_links": self.seed + 11,
            "noise_count": self.seed + 21,
            "noise_time": self.seed + 22,
            "noise_density": self.seed + 23,
            "init": self.seed + 31,
            "dnl": self.seed + 41,
        }

    def config_hash(self) -> str:
        blob = json.dumps(asdict(self), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]

    def to_json(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(asdict(self), fh, indent=2, sort_keys=True)
            fh.write("\n")

    @classmethod
    def from_json(cls, path) -> "ScenarioConfig":
        with open(path) as fh:
            return cls(**json.load(fh))


def build_scenario_network(cfg: ScenarioConfig) -> Network:
    if cfg.network_kind == "toy":
        return toy_network()
    if cfg.network_kind == "grid":
        return grid_network(cfg.grid_rows, cfg.grid_cols, cfg.grid_od,
                            seed=cfg.truth_seed)
    if cfg.network_kind == "files":
        if not cfg.network_csv:
            raise ValueError("network_kind=files requires network_csv")
        return load_network(cfg.network_csv, cfg.coords_csv, cfg.od_csv)
    raise ValueError(f"unknown network_kind {cfg.network_kind!r}")


def _truth_run(cfg: ScenarioConfig, net: Network, pathset: PathSet):
    dnl_cfg = cfg.dnl_config()
    q_true = ground_truth_demand(net.n_od, cfg.horizon_intervals,
                                 cfg.truth_seed, cfg.car_scale, cfg.truck_scale)
    costs = free_flow_path_costs(pathset, cfg.horizon_intervals)
    p = route_choice(costs, cfg.logit_scale, pathset)
    f = assign_path_flows(q_true, p, pathset)
    curves, state = run_dnl(net, pathset, f, dnl_cfg, seed=cfg.seed + 41)
    return q_true, curves, state


def sample_observed_links(net: Network, n: int, seed: int) -> list[int]:
    """Draw n distinct non-connector link ids, seeded."""
    segment_ids = sorted(net.links[p].id for p in net.segment_indices())
    if n > len(segment_ids):
        raise ValueError("more observed links requested than segments exist")
    rng = np.random.default_rng(seed)
    picked = rng.choice(segment_ids, size=n, replace=False)
    return sorted(int(x) for x in picked)


def build_scenario_observations(cfg: ScenarioConfig, net: Network,
                                truth_state) -> tuple[ObservationSet, list[int]]:
    """Noisy observation set on a sampled link subset.

    Counts and travel times cover the sampled links for every interval;
    density snapshots cover every segment at the configured stride.
    """
    T = cfg.horizon_intervals
    observed = sample_observed_links(net, cfg.observed_links, cfg.seed + 11)
    all_classes = tuple(range(N_CLASSES))
    intervals = tuple(range(T))

    def values_for(rows, source):
        vecs = [state_to_vec(source[c]) for c in range(N_CLASSES)]
        ops = build_operator(rows, net, T)
        vals = np.zeros(len(rows))
        for c in range(N_CLASSES):
            vals += ops[c] @ vecs[c]
        return ops, vals

    count_rows = identity_rows("count", all_classes, observed, intervals)
    count_ops, count_vals = values_for(count_rows, truth_state.inflow)
    counts = ObsStream(
        values=inject_noise(count_vals, cfg.count_noise, cfg.seed + 21),
        ops=count_ops, rows=count_rows,
    )

    time_rows = [
        ObsRow("time", (c,), (l,), (t,), combine="mean")
        for c in all_classes for l in observed for t in intervals
    ]
    time_ops, time_vals = values_for(time_rows, truth_state.travel_time)
    times = ObsStream(
        values=inject_noise(time_vals, cfg.time_noise, cfg.seed + 22),
        ops=time_ops, rows=time_rows,
    )

    densities = None
    if cfg.with_density:
        snap_intervals = tuple(range(0, T, cfg.snapshot_stride))
        segment_ids = sorted(net.links[p].id for p in net.segment_indices())
        dens_rows = identity_rows("density", all_classes, segment_ids,
                                  snap_intervals)
        dens_ops, dens_vals = values_for(dens_rows, truth_state.remaining)
        densities = ObsStream(
            values=inject_noise(dens_vals, cfg.density_noise, cfg.seed + 23),
            ops=dens_ops, rows=dens_rows,
        )

    return ObservationSet(counts=counts, times=times, densities=densities), observed


def _estimate_state(cfg, net, pathset, q_est):
    dnl_cfg = cfg.dnl_config()
    costs = free_flow_path_costs(pathset, cfg.horizon_intervals)
    p = route_choice(costs, cfg.logit_scale, pathset)
    f = assign_path_flows(q_est, p, pathset)
    _, state = run_dnl(net, pathset, f, dnl_cfg, seed=cfg.seed + 41)
    return state


def run_scenario(cfg: ScenarioConfig, write_outputs: bool = True) -> dict:
    """Execute one scenario end to end; returns the summary dict."""
    started = time.perf_counter()
    out = FilePath(cfg.out_dir)
    if write_outputs:
        out.mkdir(parents=True, exist_ok=True)

    net = build_scenario_network(cfg)
    pathset = enumerate_paths(net, cfg.k_paths)
    q_true, _, truth_state = _truth_run(cfg, net, pathset)
    obs, observed_ids = build_scenario_observations(cfg, net, truth_state)
    weights = LossWeights.balanced(obs)
    # single-instant snapshots carry high variance per cell; soften their
    # balanced weight so they inform without dominating the localized streams
    weights.density *= cfg.density_weight_scale
    dnl_cfg = cfg.dnl_config()
    est_cfg = cfg.estimator_config()

    trace_rows = None
    if cfg.solver == "gradient":
        q_est, trace = solve_dode(net, pathset, obs, weights, est_cfg, dnl_cfg)
        norm_trace = trace.normalized().tolist()
        if write_outputs:
            trace.to_csv(out / "trace.csv")
        trace_rows = {"epochs": trace.epochs, "loss": trace.loss}
    elif cfg.solver == "pc_spsa":
        template = ground_truth_demand(net.n_od, cfg.horizon_intervals,
                                       cfg.truth_seed, cfg.car_scale,
                                       cfg.truck_scale)
        samples = generate_od_samples(template, cfg.spsa_samples,
                                      cfg.spsa_perturbation, cfg.seed + 51)
        bases = fit_class_bases(samples, cfg.pca_variance)
        spsa_cfg = SpsaConfig(iterations=cfg.spsa_iterations, a=cfg.spsa_a,
                              c=cfg.spsa_c, seed=cfg.seed + 61)
        q_est, strace = solve_pc_spsa(net, pathset, obs, weights, bases,
                                      spsa_cfg, dnl_cfg, est_cfg)
        norm_trace = list(strace.norm_loss)
        if write_outputs:
            _write_spsa_trace(out / "trace.csv", strace)
        trace_rows = {"dnl_evals": strace.dnl_evals,
                      "norm_loss": strace.norm_loss}
    else:
        raise ValueError(f"unknown solver {cfg.solver!r}")

    est_state = _estimate_state(cfg, net, pathset, q_est)
    observed_idx = [net.index_of(l) for l in observed_ids]
    segments = net.segment_indices()
    unobserved_idx = [i for i in segments if i not in observed_idx]
    subsets = {"observed": observed_idx, "unobserved": unobserved_idx,
               "all": segments}
    metrics = state_metrics(est_state, truth_state, subsets)
    dmetrics = demand_metrics(q_est, q_true)

    summary = {
        "scenario": cfg.name,
        "seeds": cfg.seeds(),
        "config_hash": cfg.config_hash(),
        "metrics": {
            stream: {
                subset: {"r2": vals["r2"], "mae": vals["mae"]}
                for subset, vals in per.items()
            }
            for stream, per in metrics.items()
        },
        "runtime_s": round(time.perf_counter() - started, 3),
        "demand_mae": {c: dmetrics[c]["mae"] for c in dmetrics},
        "observed_links": observed_ids,
        "normalized_trace": norm_trace,
        "config": asdict(cfg),
    }
    if write_outputs:
        cfg.to_json(out / "config.json")
        write_observations_csv(obs, out / "observations.csv")
        write_demand_csv(q_true, net, out / "truth_demand.csv")
        write_demand_csv(q_est, net, out / "estimate.csv")
        with open(out / "summary.json", "w") as fh:
            json.dump(summary, fh, indent=2, sort_keys=True)
            fh.write("\n")
    summary["_trace"] = trace_rows
    return summary


def _write_spsa_trace(path, strace) -> None:
    import csv as _csv
    with open(path, "w", newline="") as fh:
        writer = _csv.writer(fh)
        writer.writerow(["step", "dnl_evals", "norm_loss"])
        for i, (n, v) in enumerate(zip(strace.dnl_evals, strace.norm_loss)):
            writer.writerow([i, n, repr(v)])


def rerun_from_summary(summary_path, out_dir=None) -> dict:
    """Re-execute a scenario from its summary; identical outputs by design."""
    with open(summary_path) as fh:
        summary = json.load(fh)
    cfg = ScenarioConfig(**summary["config"])
    if out_dir is not None:
        cfg.out_dir = str(out_dir)
    return run_scenario(cfg)


def sensitivity_suite(cfg: ScenarioConfig, axis: str, values, replications: int,
                      write_outputs: bool = True) -> dict:
    """Sweep one axis with several seeded replications per value.

    axis "error_level" sets the sensing error of every stream (counts,
    times, densities) to the value; axis "snapshot_frequency" varies the
    snapshot stride (1 is one snapshot per interval). Aggregates metrics
    per subset as mean, min, max.
    """
    if axis not in ("error_level", "snapshot_frequency"):
        raise ValueError(f"unknown sensitivity axis {axis!r}")
    rows = []
    agg = {}
    for value in values:
        per_rep = []
        for rep in range(replications):
            sub = ScenarioConfig(**asdict(cfg))
            sub.name = f"{cfg.name}-{axis}-{value}-rep{rep}"
            sub.seed = cfg.seed + rep
            sub.out_dir = str(FilePath(cfg.out_dir) / f"{axis}_{value}" / f"rep{rep}")
            if axis == "error_level":
                sub.count_noise = float(value)
                sub.time_noise = float(value)
                sub.density_noise = float(value)
            else:
                sub.snapshot_stride = int(value)
            summary = run_scenario(sub, write_outputs=write_outputs)
            per_rep.append(summary)
            for stream, per in summary["metrics"].items():
                for subset, vals in per.items():
                    rows.append({
                        "axis": axis, "value": value, "replication": rep,
                        "stream": stream, "subset": subset,
                        "r2": vals["r2"], "mae": vals["mae"],
                    })
        agg[str(value)] = _aggregate(per_rep)
    result = {"axis": axis, "values": [str(v) for v in values],
              "replications": replications, "aggregate": agg}
    if write_outputs:
        out = FilePath(cfg.out_dir)
        out.mkdir(parents=True, exist_ok=True)
        _write_sensitivity_csv(out / "sensitivity.csv", rows)
        with open(out / "sensitivity.json", "w") as fh:
            json.dump(result, fh, indent=2, sort_keys=True)
            fh.write("\n")
    return result


def _aggregate(summaries) -> dict:
    out = {}
    streams = summaries[0]["metrics"].keys()
    for stream in streams:
        out[stream] = {}
        for subset in summaries[0]["metrics"][stream]:
            r2s = [s["metrics"][stream][subset]["r2"] for s in summaries]
            maes = [s["metrics"][stream][subset]["mae"] for s in summaries]
            r2s = [x for x in r2s if x is not None]
            entry = {
                "mae_mean": float(np.mean(maes)),
                "mae_min": float(np.min(maes)),
                "mae_max": float(np.max(maes)),
            }
            if r2s:
                entry.update({
                    "r2_mean": float(np.mean(r2s)),
                    "r2_min": float(np.min(r2s)),
                    "r2_max": float(np.max(r2s)),
                })
            out[stream][subset] = entry
    return out


def _write_sensitivity_csv(path, rows) -> None:
    import csv as _csv
    with open(path, "w", newline="") as fh:
        writer = _csv.writer(fh)
        writer.writerow(["axis", "value", "replication", "stream", "subset",
                         "r2", "mae"])
        for r in rows:
            writer.writerow([r["axis"], r["value"], r["replication"],
                             r["stream"], r["subset"],
                             "" if r["r2"] is None else repr(r["r2"]),
                             repr(r["mae"])])


def compare_solvers(cfg: ScenarioConfig, write_outputs: bool = True) -> dict:
    """Gradient descent against the component-space SPSA at equal budgets.

    The gradient solver spends one loading run per epoch; the SPSA baseline
    spends two per iteration plus its endpoint evaluations, so its
    iteration count is set to match the epoch budget.
    """
    grad_cfg = ScenarioConfig(**asdict(cfg))
    grad_cfg.solver = "gradient"
    grad_cfg.name = f"{cfg.name}-gradient"
    grad_cfg.out_dir = str(FilePath(cfg.out_dir) / "gradient")
    spsa_cfg = ScenarioConfig(**asdict(cfg))
    spsa_cfg.solver = "pc_spsa"
    spsa_cfg.name = f"{cfg.name}-pc-spsa"
    spsa_cfg.out_dir = str(FilePath(cfg.out_dir) / "pc_spsa")
    spsa_cfg.spsa_iterations = max(1, (cfg.epochs - 2) // 2)

    grad_summary = run_scenario(grad_cfg, write_outputs=write_outputs)
    spsa_summary = run_scenario(spsa_cfg, write_outputs=write_outputs)
    # both solvers return their best-loss iterate, so the objective of the
    # returned estimate is the minimum of the normalized trace
    result = {
        "budget_dnl_evals": cfg.epochs,
        "gradient": {
            "normalized_trace": grad_summary["normalized_trace"],
            "final": min(grad_summary["normalized_trace"]),
            "metrics": grad_summary["metrics"],
        },
        "pc_spsa": {
            "normalized_trace": spsa_summary["normalized_trace"],
            "final": min(spsa_summary["normalized_trace"]),
            "metrics": spsa_summary["metrics"],
        },
    }
    if write_outputs:
        out = FilePath(cfg.out_dir)
        out.mkdir(parents=True, exist_ok=True)
        _write_compare_csv(out / "compare.csv", grad_summary, spsa_summary)
        with open(out / "compare.json", "w") as fh:
            json.dump(result, fh, indent=2, sort_keys=True)
            fh.write("\n")
    return result


def _write_compare_csv(path, grad_summary, spsa_summary) -> None:
    import csv as _csv
    with open(path, "w", newline="") as fh:
        writer = _csv.writer(fh)
        writer.writerow(["solver", "step", "norm_loss"])
        for i, v in enumerate(grad_summary["normalized_trace"]):
            writer.writerow(["gradient", i, repr(float(v))])
        for i, v in enumerate(spsa_summary["normalized_trace"]):
            writer.writerow(["pc_spsa", i, repr(float(v))])


def write_network_files(net: Network, out_dir) -> dict:
    """Write network, coordinate, and OD CSVs; returns the file map."""
    out = FilePath(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    files = {
        "network": str(out / "network.csv"),
        "coords": str(out / "nodes.csv"),
        "od": str(out / "od_pairs.csv"),
    }
    save_network(net, files["network"], files["coords"], files["od"])
    return files


def validate_scenario_network(cfg: ScenarioConfig) -> list[str]:
    net = build_scenario_network(cfg)
    return validate_network(net)
