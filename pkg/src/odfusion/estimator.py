"""Demand estimation from link counts, travel times, and snapshot densities.

The estimator minimizes a weighted sum of squared residuals over three
observation streams. Each stream owns per-class aggregation operators that
map flat link-state vectors (see dar module conventions) onto observation
rows, so class-specific rows, temporal sums, direction merges, and
cross-class merges all share one code path.

The backward pass is the exact chain rule through the linearized loading:
assignment ratio matrices stand in for the loader, route proportions stand
in for the path split, both held fixed within an epoch.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from .network import CLASSES, N_CLASSES, Network, PathSet
from .dnl import DnlConfig, LinkStateTensor, assign_path_flows, build_link_state, \
    free_flow_path_costs, instantaneous_path_costs, route_choice, run_dnl
from .dar import DarMatrixSet, IntervalCumulator, carry_forward_columns, \
    extract_dar, flows_to_vec, state_to_vec

STREAMS = ("count", "time", "density")


@dataclass(frozen=True)
class ObsRow:
    """One observation row: which cells it aggregates and how."""

    stream: str
    classes: tuple[int, ...]
    link_ids: tuple[int, ...]
    intervals: tuple[int, ...]
    combine: str = "sum"  # "sum" or "mean"


@dataclass
class ObsStream:
    """Values plus per-class operators for one observation stream."""

    values: np.ndarray
    ops: tuple
    rows: list[ObsRow] = field(default_factory=list)

    @property
    def n_rows(self) -> int:
        return len(self.values)


@dataclass
class ObservationSet:
    """All observation streams used by one estimation run."""

    counts: ObsStream | None = None
    times: ObsStream | None = None
    densities: ObsStream | None = None

    def stream(self, name: str) -> ObsStream | None:
        return {"count": self.counts, "time": self.times,
                "density": self.densities}[name]

    def observed_link_ids(self) -> set[int]:
        out = set()
        for name in STREAMS:
            s = self.stream(name)
            if s is not None:
                for row in s.rows:
                    out.update(row.link_ids)
        return out


def identity_rows(stream: str, classes, link_ids, intervals) -> list[ObsRow]:
    """One row per (class, link, interval) cell."""
    return [
        ObsRow(stream, (c,), (l,), (t,))
        for c in classes for l in link_ids for t in intervals
    ]


def build_operator(rows: list[ObsRow], net: Network, T: int):
    """Sparse per-class operators over flat (T * n_links) state vectors."""
    A = net.n_links
    data = [([], [], []) for _ in CLASSES]
    for i, row in enumerate(rows):
        cells = []
        for c in row.classes:
            if not 0 <= c < N_CLASSES:
                raise ValueError(f"row {i}: bad class index {c}")
            for lid in row.link_ids:
                a = net.index_of(lid)
                for t in row.intervals:
                    if not 0 <= t < T:
                        raise ValueError(f"row {i}: interval {t} out of range")
                    cells.append((c, t * A + a))
        if not cells:
            raise ValueError(f"row {i}: aggregates no cells")
        w = 1.0 / len(cells) if row.combine == "mean" else 1.0
        for c, j in cells:
            data[c][0].append(i)
            data[c][1].append(j)
            data[c][2].append(w)
    n = len(rows)
    return tuple(
        sp.coo_matrix((vals, (r, cjs)), shape=(n, T * A)).tocsr()
        for r, cjs, vals in data
    )


def build_aggregation(rows_by_stream: dict, net: Network, T: int):
    """Operators (L, M, I, H) for the three streams plus the cumulator.

    rows_by_stream maps stream name to its ObsRow list; missing streams get
    empty operators.
    """
    ops = {}
    for name in STREAMS:
        rows = rows_by_stream.get(name, [])
        if rows:
            ops[name] = build_operator(rows, net, T)
        else:
            ops[name] = tuple(
                sp.csr_matrix((0, T * net.n_links)) for _ in CLASSES
            )
    return ops["count"], ops["time"], ops["density"], IntervalCumulator(net.n_links, T)


@dataclass
class LossWeights:
    count: float = 1.0
    time: float = 1.0
    density: float = 1.0

    @classmethod
    def balanced(cls, obs: ObservationSet) -> "LossWeights":
        """Scale time and density terms to the count magnitude.

        w_time = (mean count / mean time)^2 and likewise for density, so the
        three residual sums enter at comparable size.
        """
        def mean_abs(stream):
            s = obs.stream(stream)
            if s is None or s.n_rows == 0:
                return None
            return float(np.mean(np.abs(s.values)))

        mc = mean_abs("count")
        w = cls()
        if mc is None or mc == 0:
            return w
        for name, attr in (("time", "time"), ("density", "density")):
            m = mean_abs(name)
            if m is not None and m > 0:
                setattr(w, attr, (mc / m) ** 2)
        return w


def _state_vecs(state: LinkStateTensor, stream: str):
    src = {"count": state.inflow, "time": state.travel_time,
           "density": state.remaining}[stream]
    return [state_to_vec(src[c]) for c in range(N_CLASSES)]


def _residual(stream_obs: ObsStream, vecs) -> np.ndarray:
    modeled = np.zeros(stream_obs.n_rows)
    for c in range(N_CLASSES):
        modeled += stream_obs.ops[c] @ vecs[c]
    return stream_obs.values - modeled


def compute_loss(state: LinkStateTensor, obs: ObservationSet, w: LossWeights):
    """Weighted squared-residual loss, returned as (total, per-stream dict)."""
    parts = {"count": 0.0, "time": 0.0, "density": 0.0}
    weights = {"count": w.count, "time": w.time, "density": w.density}
    for name in STREAMS:
        s = obs.stream(name)
        if s is None or s.n_rows == 0:
            continue
        r = _residual(s, _state_vecs(state, name))
        parts[name] = weights[name] * float(r @ r)
    total = sum(parts.values())
    if not np.isfinite(total):
        raise ValueError("loss is not finite")
    return total, parts


def _tt_response_slope(net: Network, cls: int, inflow_cls: np.ndarray,
                       interval_length: float) -> np.ndarray:
    """d(travel time)/d(inflow) per (link, interval), central difference.

    Uses a point-queue response: traversal stays at free flow until the
    interval inflow exceeds what the class capacity can serve, then grows by
    the residual queue discharge time.
    """
    A, T = inflow_cls.shape
    hours = interval_length / 3600.0
    slopes = np.zeros((A, T))
    for a, ln in enumerate(net.links):
        cap = ln.capacity[cls]
        served = cap * hours

        def resp(x):
            return np.maximum(0.0, x - served) * 3600.0 / cap

        x = inflow_cls[a]
        dx = np.maximum(1.0, 0.05 * x)
        slopes[a] = (resp(x + dx) - resp(x - dx)) / (2.0 * dx)
    return slopes


def compute_gradient(pathset: PathSet, p: np.ndarray, f: np.ndarray,
                     dar: DarMatrixSet, h_op: IntervalCumulator,
                     obs: ObservationSet, w: LossWeights,
                     state: LinkStateTensor, net: Network,
                     dnl_cfg: DnlConfig, tt_grad_mode: str = "on"):
    """Exact loss gradient with respect to demand, via the chain rule.

    Returns (grad_q, grad_f) where grad_q has shape (classes, n_od, T) and
    grad_f has shape (classes, n_paths, T). Ratio matrices and route
    proportions are treated as constants.
    """
    C, K, T = f.shape
    grad_f = np.zeros((C, K, T))

    s = obs.counts
    if s is not None and s.n_rows:
        r = _residual(s, _state_vecs(state, "count"))
        for c in range(C):
            g = dar.arrivals(c).T @ (s.ops[c].T @ r)
            grad_f[c] += -2.0 * w.count * g.reshape(T, K).T

    s = obs.times
    if s is not None and s.n_rows and tt_grad_mode == "on":
        r = _residual(s, _state_vecs(state, "time"))
        for c in range(C):
            back = s.ops[c].T @ r
            jdiag = state_to_vec(
                _tt_response_slope(net, c, state.inflow[c], dnl_cfg.interval_length)
            )
            g = dar.arrivals(c).T @ (jdiag * back)
            grad_f[c] += -2.0 * w.time * g.reshape(T, K).T

    s = obs.densities
    if s is not None and s.n_rows:
        r = _residual(s, _state_vecs(state, "density"))
        for c in range(C):
            g = dar.net_accumulation(c).T @ h_op.apply_t(s.ops[c].T @ r)
            grad_f[c] += -2.0 * w.density * g.reshape(T, K).T

    od_of = np.asarray(pathset.od_of_path(), dtype=int)
    n_od = int(od_of.max()) + 1 if len(od_of) else 0
    grad_q = np.zeros((C, n_od, T))
    for c in range(C):
        np.add.at(grad_q[c], od_of, p[c] * grad_f[c])
    return grad_q, grad_f


@dataclass
class EstimatorConfig:
    """Solver settings for the gradient-descent estimator."""

    epochs: int = 100
    optimizer: str = "adam"  # or "fixed"
    lr: float = 2.0
    lr_decay: float = 1.0
    init_scale: tuple[float, ...] = (100.0, 10.0)
    seed: int = 0
    dnl_seed: int = 0
    tol: float = 1e-4
    tol_window: int = 5
    tt_grad_mode: str = "on"
    divergence_loss: float = 1e12

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be positive")
        if self.optimizer not in ("adam", "fixed"):
            raise ValueError("optimizer must be adam or fixed")
        if self.tt_grad_mode not in ("on", "off"):
            raise ValueError("tt_grad_mode must be on or off")


@dataclass
class ConvergenceTrace:
    """Per-epoch solver record."""

    epochs: list = field(default_factory=list)
    loss: list = field(default_factory=list)
    loss_count: list = field(default_factory=list)
    loss_time: list = field(default_factory=list)
    loss_density: list = field(default_factory=list)
    grad_norm: list = field(default_factory=list)
    best_epoch: int = -1
    best_loss: float = float("inf")
    diverged: bool = False

    def append(self, epoch, total, parts, gnorm):
        self.epochs.append(epoch)
        self.loss.append(total)
        self.loss_count.append(parts["count"])
        self.loss_time.append(parts["time"])
        self.loss_density.append(parts["density"])
        self.grad_norm.append(gnorm)

    def normalized(self) -> np.ndarray:
        base = self.loss[0] if self.loss and self.loss[0] > 0 else 1.0
        return np.asarray(self.loss) / base

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(
                ["epoch", "loss", "loss_count", "loss_time", "loss_density", "grad_norm"]
            )
            for i in range(len(self.epochs)):
                writer.writerow([
                    self.epochs[i], repr(self.loss[i]), repr(self.loss_count[i]),
                    repr(self.loss_time[i]), repr(self.loss_density[i]),
                    repr(self.grad_norm[i]),
                ])


class _Adam:
    def __init__(self, shape, lr, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr = lr
        self.b1, self.b2, self.eps = beta1, beta2, eps
        self.m = np.zeros(shape)
        self.v = np.zeros(shape)
        self.t = 0

    def step(self, x, g, lr_scale=1.0):
        self.t += 1
        self.m = self.b1 * self.m + (1 - self.b1) * g
        self.v = self.b2 * self.v + (1 - self.b2) * g * g
        mhat = self.m / (1 - self.b1 ** self.t)
        vhat = self.v / (1 - self.b2 ** self.t)
        return x - self.lr * lr_scale * mhat / (np.sqrt(vhat) + self.eps)


class _FixedStep:
    def __init__(self, lr):
        self.lr = lr

    def step(self, x, g, lr_scale=1.0):
        return x - self.lr * lr_scale * g


def init_demand(cfg: EstimatorConfig, n_od: int, T: int) -> np.ndarray:
    """Uniform random nonnegative start point, seeded."""
    rng = np.random.default_rng(cfg.seed)
    q0 = np.empty((N_CLASSES, n_od, T))
    for c in range(N_CLASSES):
        scale = cfg.init_scale[c] if c < len(cfg.init_scale) else cfg.init_scale[-1]
        q0[c] = rng.uniform(0.0, scale, size=(n_od, T))
    return q0


def solve_dode(net: Network, pathset: PathSet, obs: ObservationSet,
               weights: LossWeights, est_cfg: EstimatorConfig,
               dnl_cfg: DnlConfig, q0: np.ndarray | None = None):
    """Projected gradient descent over nonnegative demand.

    Each epoch runs one forward loading, refreshes the ratio matrices, and
    takes one projected step. Stops early when the relative loss change
    stays below tol for tol_window consecutive epochs; aborts with the
    trace flagged when the loss exceeds the divergence guard. Returns the
    best-loss iterate and the trace.
    """
    T = dnl_cfg.horizon_intervals
    n_od = net.n_od
    q = init_demand(est_cfg, n_od, T) if q0 is None else np.array(q0, dtype=float)
    if np.any(q < 0):
        raise ValueError("initial demand must be nonnegative")

    opt = (_Adam(q.shape, est_cfg.lr) if est_cfg.optimizer == "adam"
           else _FixedStep(est_cfg.lr))
    h_op = IntervalCumulator(net.n_links, T)
    trace = ConvergenceTrace()
    costs = free_flow_path_costs(pathset, T)
    best_q = q.copy()
    prev_dar = None
    recent: list[float] = []

    for epoch in range(est_cfg.epochs):
        p = route_choice(costs, dnl_cfg.logit_scale, pathset)
        f = assign_path_flows(q, p, pathset)
        curves, state = run_dnl(net, pathset, f, dnl_cfg, seed=est_cfg.dnl_seed)
        dar = extract_dar(curves, packet_size=dnl_cfg.packet_size)
        dar = carry_forward_columns(dar, prev_dar, f)
        prev_dar = dar

        total, parts = compute_loss(state, obs, weights)
        grad_q, _ = compute_gradient(
            pathset, p, f, dar, h_op, obs, weights, state, net, dnl_cfg,
            tt_grad_mode=est_cfg.tt_grad_mode,
        )
        gnorm = float(np.linalg.norm(grad_q))
        trace.append(epoch, total, parts, gnorm)

        if total < trace.best_loss:
            trace.best_loss = total
            trace.best_epoch = epoch
            best_q = q.copy()
        if total > est_cfg.divergence_loss:
            trace.diverged = True
            break

        recent.append(total)
        if len(recent) > est_cfg.tol_window + 1:
            recent.pop(0)
        if len(recent) == est_cfg.tol_window + 1:
            rel = [
                abs(recent[i + 1] - recent[i]) / max(recent[i], 1e-30)
                for i in range(est_cfg.tol_window)
            ]
            if max(rel) < est_cfg.tol:
                break

        q = np.maximum(0.0, opt.step(q, grad_q, lr_scale=est_cfg.lr_decay ** epoch))
        costs = instantaneous_path_costs(state, pathset)

    return best_q, trace


def basic_metrics(est: np.ndarray, ref: np.ndarray) -> dict:
    """R squared, MAE, RMSE of est against ref. R squared is None when the
    reference has zero variance."""
    e = np.asarray(est, dtype=float).ravel()
    r = np.asarray(ref, dtype=float).ravel()
    if e.shape != r.shape:
        raise ValueError("shape mismatch")
    err = e - r
    mae = float(np.mean(np.abs(err)))
    rmse = float(np.sqrt(np.mean(err ** 2)))
    ss_tot = float(np.sum((r - r.mean()) ** 2))
    r2 = None if ss_tot == 0 else 1.0 - float(np.sum(err ** 2)) / ss_tot
    return {"r2": r2, "mae": mae, "rmse": rmse}


def state_metrics(est: LinkStateTensor, ref: LinkStateTensor,
                  subsets: dict[str, list[int]]) -> dict:
    """Metrics per stream and link subset, pooled over classes and intervals."""
    src = {
        "count": (est.inflow, ref.inflow),
        "time": (est.travel_time, ref.travel_time),
        "density": (est.remaining, ref.remaining),
    }
    out = {}
    for name, (a, b) in src.items():
        out[name] = {}
        for label, idxs in subsets.items():
            if len(idxs) == 0:
                continue
            out[name][label] = basic_metrics(a[:, idxs, :], b[:, idxs, :])
    return out


def demand_metrics(q_est: np.ndarray, q_ref: np.ndarray) -> dict:
    """Per-class demand recovery metrics."""
    return {
        CLASSES[c]: basic_metrics(q_est[c], q_ref[c]) for c in range(N_CLASSES)
    }


def write_demand_csv(q: np.ndarray, net: Network, path) -> None:
    """Write demand as class,origin,destination,interval,demand rows."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["class", "origin", "destination", "interval", "demand"])
        C, n_od, T = q.shape
        for c in range(C):
            for od, (r, s) in enumerate(net.od_pairs):
                for t in range(T):
                    writer.writerow([CLASSES[c], r, s, t, repr(float(q[c, od, t]))])


def read_demand_csv(path, net: Network, T: int) -> np.ndarray:
    """Inverse of write_demand_csv."""
    q = np.zeros((N_CLASSES, net.n_od, T))
    pair_index = {pair: i for i, pair in enumerate(net.od_pairs)}
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        for row in reader:
            c = CLASSES.index(row["class"])
            od = pair_index[(int(row["origin"]), int(row["destination"]))]
            q[c, od, int(row["interval"])] = float(row["demand"])
    return q


def _encode_group(ids) -> str:
    return "+".join(str(i) for i in ids)


def _decode_group(raw: str) -> tuple[int, ...]:
    return tuple(int(tok) for tok in raw.split("+"))


def write_observations_csv(obs: ObservationSet, path) -> None:
    """Write all rows: stream,class_or_all,link_or_group,interval_or_group,value."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(
            ["stream", "class_or_all", "link_or_group", "interval_or_group", "value"]
        )
        for name in STREAMS:
            s = obs.stream(name)
            if s is None:
                continue
            for row, value in zip(s.rows, s.values):
                cls = "all" if len(row.classes) == N_CLASSES else CLASSES[row.classes[0]]
                writer.writerow([
                    name, cls, _encode_group(row.link_ids),
                    _encode_group(row.intervals), repr(float(value)),
                ])


def read_observations_csv(path, net: Network, T: int) -> ObservationSet:
    """Rebuild an ObservationSet from its CSV dump.

    Combination mode is implied by the stream: time rows average their
    cells, count and density rows sum them.
    """
    rows_by = {name: [] for name in STREAMS}
    vals_by = {name: [] for name in STREAMS}
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        expected = ["stream", "class_or_all", "link_or_group",
                    "interval_or_group", "value"]
        if reader.fieldnames != expected:
            raise ValueError(f"{path}: bad header {reader.fieldnames}")
        for row in reader:
            name = row["stream"]
            if name not in STREAMS:
                raise ValueError(f"{path}: unknown stream {name!r}")
            classes = (tuple(range(N_CLASSES)) if row["class_or_all"] == "all"
                       else (CLASSES.index(row["class_or_all"]),))
            rows_by[name].append(ObsRow(
                stream=name,
                classes=classes,
                link_ids=_decode_group(row["link_or_group"]),
                intervals=_decode_group(row["interval_or_group"]),
                combine="mean" if name == "time" else "sum",
            ))
            vals_by[name].append(float(row["value"]))

    def make(name):
        if not rows_by[name]:
            return None
        return ObsStream(
            values=np.asarray(vals_by[name]),
            ops=build_operator(rows_by[name], net, T),
            rows=rows_by[name],
        )

    return ObservationSet(counts=make("count"), times=make("time"),
                          densities=make("density"))
