"""Detection processing: map matching, snapshot densities, noise, filters.

Detections are point observations of classified vehicles, as produced by
an overhead snapshot. Matching assigns each detection to the nearest link
within a buffer, measured as perpendicular distance to the straight
node-to-node segment. Only car and truck detections take part; any other
class label is dropped before matching.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from .network import CLASSES, N_CLASSES, Network, NetworkError
from .estimator import ObsRow, ObsStream, ObservationSet, build_operator

DEFAULT_BUFFER_M = 15.0


@dataclass(frozen=True)
class Detection:
    """One detected vehicle position."""

    id: int
    x: float
    y: float
    vclass: str
    snapshot_id: int
    interval: int


@dataclass
class DensitySnapshot:
    """Matched per-link per-class vehicle counts for one snapshot."""

    snapshot_id: int
    interval: int
    counts: np.ndarray  # (classes, links)
    link_ids: tuple[int, ...]


@dataclass
class MatchResult:
    """Partition of the detection input into matched, unmatched, dropped."""

    link_of: dict[int, int] = field(default_factory=dict)
    distance_of: dict[int, float] = field(default_factory=dict)
    unmatched: list[int] = field(default_factory=list)
    dropped: list[int] = field(default_factory=list)


def load_detections(path) -> list[Detection]:
    """Read detections from a CSV with header id,x,y,class,snapshot_id,interval."""
    out = []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        expected = ["id", "x", "y", "class", "snapshot_id", "interval"]
        if reader.fieldnames != expected:
            raise ValueError(f"{path}: bad header {reader.fieldnames}")
        for row in reader:
            out.append(Detection(
                id=int(row["id"]), x=float(row["x"]), y=float(row["y"]),
                vclass=row["class"], snapshot_id=int(row["snapshot_id"]),
                interval=int(row["interval"]),
            ))
    return out


def save_detections(dets, path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["id", "x", "y", "class", "snapshot_id", "interval"])
        for d in dets:
            writer.writerow([d.id, repr(d.x), repr(d.y), d.vclass,
                             d.snapshot_id, d.interval])


def _segment_geometry(net: Network, link_positions):
    ax, ay, bx, by, ids = [], [], [], [], []
    for pos in link_positions:
        ln = net.links[pos]
        try:
            x0, y0 = net.node_xy[ln.from_node]
            x1, y1 = net.node_xy[ln.to_node]
        except KeyError as exc:
            raise NetworkError(
                f"link {ln.id}: node {exc.args[0]} has no coordinates"
            ) from None
        ax.append(x0)
        ay.append(y0)
        bx.append(x1)
        by.append(y1)
        ids.append(ln.id)
    return (np.array(ax), np.array(ay), np.array(bx), np.array(by),
            np.array(ids))


def _point_segment_distances(px, py, ax, ay, bx, by):
    """Distances from points (n,) to segments (m,), result (n, m)."""
    dx = bx - ax
    dy = by - ay
    seg_len2 = dx * dx + dy * dy
    seg_len2 = np.where(seg_len2 == 0, 1.0, seg_len2)
    wx = px[:, None] - ax[None, :]
    wy = py[:, None] - ay[None, :]
    t = (wx * dx[None, :] + wy * dy[None, :]) / seg_len2[None, :]
    t = np.clip(t, 0.0, 1.0)
    cx = ax[None, :] + t * dx[None, :]
    cy = ay[None, :] + t * dy[None, :]
    return np.hypot(px[:, None] - cx, py[:, None] - cy)


def match_detections(dets, net: Network, buffer_m: float = DEFAULT_BUFFER_M) -> MatchResult:
    """Assign detections to their nearest non-connector link within the buffer.

    Distance ties go to the lower link id. Detections with a class label
    outside the known classes are dropped. Raises when a candidate link
    endpoint has no coordinates.
    """
    result = MatchResult()
    keep, drop = [], []
    for d in dets:
        (keep if d.vclass in CLASSES else drop).append(d)
    result.dropped = [d.id for d in drop]
    if not keep:
        return result
    positions = net.segment_indices()
    if not positions:
        raise NetworkError("network has no matchable links")
    ax, ay, bx, by, ids = _segment_geometry(net, positions)
    order = np.argsort(ids, kind="stable")
    ax, ay, bx, by, ids = ax[order], ay[order], bx[order], by[order], ids[order]

    px = np.array([d.x for d in keep])
    py = np.array([d.y for d in keep])
    dist = _point_segment_distances(px, py, ax, ay, bx, by)
    # argmin returns the first minimum; columns are in ascending link id
    best = dist.argmin(axis=1)
    best_d = dist[np.arange(len(keep)), best]
    for d, j, dd in zip(keep, best, best_d):
        if dd <= buffer_m + 1e-12:
            result.link_of[d.id] = int(ids[j])
            result.distance_of[d.id] = float(dd)
        else:
            result.unmatched.append(d.id)
    return result


def detections_to_snapshot(dets, match: MatchResult, net: Network,
                           snapshot_id: int, interval: int) -> DensitySnapshot:
    """Aggregate matched detections of one snapshot into per-link counts."""
    positions = net.segment_indices()
    link_ids = tuple(sorted(net.links[p].id for p in positions))
    col = {lid: i for i, lid in enumerate(link_ids)}
    counts = np.zeros((N_CLASSES, len(link_ids)))
    for d in dets:
        if d.snapshot_id != snapshot_id:
            continue
        lid = match.link_of.get(d.id)
        if lid is None:
            continue
        counts[CLASSES.index(d.vclass), col[lid]] += 1
    return DensitySnapshot(snapshot_id=snapshot_id, interval=interval,
                           counts=counts, link_ids=link_ids)


def build_density_observation(snapshots, net: Network, T: int,
                              link_ids=None) -> ObservationSet:
    """Turn snapshots into a density-stream observation set.

    One row per (class, link, snapshot interval). link_ids restricts the
    rows; default uses every link present in the snapshots.
    """
    rows, values = [], []
    for snap in snapshots:
        if not 0 <= snap.interval < T:
            raise ValueError(f"snapshot {snap.snapshot_id}: interval out of range")
        for c in range(N_CLASSES):
            for j, lid in enumerate(snap.link_ids):
                if link_ids is not None and lid not in link_ids:
                    continue
                rows.append(ObsRow("density", (c,), (lid,), (snap.interval,)))
                values.append(float(snap.counts[c, j]))
    if not rows:
        raise ValueError("snapshots produced no observation rows")
    stream = ObsStream(values=np.asarray(values),
                       ops=build_operator(rows, net, T), rows=rows)
    return ObservationSet(densities=stream)


def inject_noise(values: np.ndarray, level: float, seed: int) -> np.ndarray:
    """Multiplicative uniform noise: value * U(1 - level, 1 + level)."""
    if level < 0:
        raise ValueError("noise level must be nonnegative")
    rng = np.random.default_rng(seed)
    v = np.asarray(values, dtype=float)
    return v * rng.uniform(1.0 - level, 1.0 + level, size=v.shape)


def select_consistent_links(counts_a: dict, counts_b: dict, threshold: float = 5.0):
    """Link ids whose two independent count readings agree within threshold.

    Readings absent from either source are treated as inconsistent.
    """
    out = []
    for lid in sorted(set(counts_a) & set(counts_b)):
        if abs(counts_a[lid] - counts_b[lid]) <= threshold:
            out.append(lid)
    return out


def two_stage_filter(estimated: dict, observed: dict, ratio: float = 3.0,
                     zero_cap: float = 10.0):
    """Keep links whose model estimate is compatible with the observation.

    Nonzero observations admit estimates up to ratio times the observation;
    zero observations admit estimates up to zero_cap. Both boundaries are
    inclusive. Links missing an estimate are excluded.
    """
    out = []
    for lid in sorted(observed):
        if lid not in estimated:
            continue
        obs = observed[lid]
        est = estimated[lid]
        if obs > 0:
            if est <= ratio * obs:
                out.append(lid)
        elif est <= zero_cap:
            out.append(lid)
    return out


def generate_detections(net: Network, remaining: np.ndarray, interval: int,
                        snapshot_id: int, seed: int,
                        lateral_jitter: float = 4.0,
                        offroad: int = 0,
                        other_fraction: float = 0.0) -> list[Detection]:
    """Synthesize snapshot detections from a remaining-vehicle state slice.

    remaining has shape (classes, links). Each link contributes its rounded
    vehicle count per class, placed uniformly along the segment with a
    small lateral offset. offroad adds points far from any link;
    other_fraction relabels a share of points with an unknown class.
    """
    rng = np.random.default_rng(seed)
    dets = []
    det_id = 0
    for pos in net.segment_indices():
        ln = net.links[pos]
        if ln.from_node not in net.node_xy or ln.to_node not in net.node_xy:
            raise NetworkError(f"link {ln.id}: missing node coordinates")
        x0, y0 = net.node_xy[ln.from_node]
        x1, y1 = net.node_xy[ln.to_node]
        dx, dy = x1 - x0, y1 - y0
        norm = max(np.hypot(dx, dy), 1e-9)
        nx, ny = -dy / norm, dx / norm
        for c in range(N_CLASSES):
            n = int(round(remaining[c, pos]))
            if n <= 0:
                continue
            ts = rng.uniform(0.0, 1.0, size=n)
            offs = rng.uniform(-lateral_jitter, lateral_jitter, size=n)
            for t, off in zip(ts, offs):
                vclass = CLASSES[c]
                if other_fraction > 0 and rng.uniform() < other_fraction:
                    vclass = "other"
                dets.append(Detection(
                    id=det_id, x=x0 + t * dx + off * nx, y=y0 + t * dy + off * ny,
                    vclass=vclass, snapshot_id=snapshot_id, interval=interval,
                ))
                det_id += 1
    if offroad > 0:
        xs = [xy[0] for xy in net.node_xy.values()]
        ys = [xy[1] for xy in net.node_xy.values()]
        far = max(max(xs) - min(xs), max(ys) - min(ys)) + 1000.0
        for _ in range(offroad):
            dets.append(Detection(
                id=det_id,
                x=min(xs) - far + rng.uniform(0, 100.0),
                y=min(ys) - far + rng.uniform(0, 100.0),
                vclass=CLASSES[int(rng.integers(0, N_CLASSES))],
                snapshot_id=snapshot_id, interval=interval,
            ))
            det_id += 1
    return dets
