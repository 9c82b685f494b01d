"""Road network containers, loaders, and candidate path enumeration.

A network is a directed graph of links carrying per-class free-flow speeds,
discharge capacities, and jam densities. Demand zones attach through
connector links flagged ``is_connector``; connectors take part in loading
but are excluded from observation losses by the callers that build
observation sets.

Link attribute units: length in km, speeds in km/h, capacities in veh/h,
jam densities in veh/km, curb capacity in vehicles.
"""

from __future__ import annotations

import csv
import heapq
import logging
from dataclasses import dataclass, field
from pathlib import Path as FilePath

log = logging.getLogger(__name__)

CLASSES = ("car", "truck")
N_CLASSES = len(CLASSES)

NETWORK_HEADER = [
    "link_id", "from", "to", "length_km",
    "ffs_car", "ffs_truck", "cap_car", "cap_truck",
    "jam_car", "jam_truck", "allows_parking", "curb_capacity", "is_connector",
]


class NetworkError(ValueError):
    """Raised for parse errors, topology errors, and attribute violations."""


@dataclass(frozen=True)
class Link:
    """One directed link with per-class attributes indexed like CLASSES."""

    id: int
    from_node: int
    to_node: int
    length: float
    ffs: tuple[float, ...]
    capacity: tuple[float, ...]
    jam_density: tuple[float, ...]
    allows_parking: bool = False
    curb_capacity: float = 0.0
    is_connector: bool = False

    def free_flow_time(self, cls: int) -> float:
        """Free-flow traversal time in seconds for class index ``cls``."""
        return self.length / self.ffs[cls] * 3600.0

    def check(self) -> list[str]:
        """Return attribute violations as message strings (empty if clean)."""
        bad = []
        if not self.length > 0:
            bad.append(f"link {self.id}: length must be positive")
        for c, name in enumerate(CLASSES):
            if not self.ffs[c] > 0:
                bad.append(f"link {self.id}: {name} free-flow speed must be positive")
            if not self.capacity[c] > 0:
                bad.append(f"link {self.id}: {name} capacity must be positive")
            if not self.jam_density[c] > 0:
                bad.append(f"link {self.id}: {name} jam density must be positive")
        if self.curb_capacity < 0:
            bad.append(f"link {self.id}: curb capacity must be nonnegative")
        if self.curb_capacity > 0 and not self.allows_parking:
            bad.append(f"link {self.id}: curb capacity set but parking not allowed")
        return bad


class Network:
    """Immutable directed network with OD pairs and optional node geometry."""

    def __init__(self, links, od_pairs=(), node_xy=None):
        self.links: tuple[Link, ...] = tuple(links)
        self.od_pairs: tuple[tuple[int, int], ...] = tuple(
            (int(r), int(s)) for r, s in od_pairs
        )
        self.node_xy: dict[int, tuple[float, float]] = dict(node_xy or {})
        self.nodes = frozenset(
            n for ln in self.links for n in (ln.from_node, ln.to_node)
        )
        self._index: dict[int, int] = {}
        for pos, ln in enumerate(self.links):
            self._index.setdefault(ln.id, pos)
        self._out: dict[int, list[int]] = {}
        for pos, ln in enumerate(self.links):
            self._out.setdefault(ln.from_node, []).append(pos)
        for lst in self._out.values():
            lst.sort(key=lambda p: self.links[p].id)

    @property
    def n_links(self) -> int:
        return len(self.links)

    @property
    def n_od(self) -> int:
        return len(self.od_pairs)

    def index_of(self, link_id: int) -> int:
        """Position of a link id in the link tuple."""
        try:
            return self._index[link_id]
        except KeyError:
            raise NetworkError(f"unknown link id {link_id}") from None

    def link_by_id(self, link_id: int) -> Link:
        return self.links[self.index_of(link_id)]

    def out_links(self, node: int) -> list[int]:
        """Positions of links leaving ``node``, ordered by link id."""
        return self._out.get(node, [])

    def segment_indices(self) -> list[int]:
        """Positions of non-connector links."""
        return [i for i, ln in enumerate(self.links) if not ln.is_connector]

    def free_flow_times(self):
        """Per-class free-flow times in seconds, list of tuples per link."""
        return [
            tuple(ln.free_flow_time(c) for c in range(N_CLASSES))
            for ln in self.links
        ]


def _as_bool(raw: str, where: str) -> bool:
    v = raw.strip().lower()
    if v in ("1", "true", "yes"):
        return True
    if v in ("0", "false", "no", ""):
        return False
    raise NetworkError(f"{where}: cannot parse boolean value {raw!r}")


def load_network(network_file, coords_file=None, od_file=None) -> Network:
    """Load a network CSV, with optional node coordinate and OD pair files.

    The network file must carry the exact header NETWORK_HEADER. Raises
    NetworkError on malformed rows, duplicate link ids, nonpositive
    attributes, or OD nodes absent from the link set.
    """
    path = FilePath(network_file)
    links = []
    seen = set()
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != NETWORK_HEADER:
            raise NetworkError(
                f"{path}: bad header {reader.fieldnames}, expected {NETWORK_HEADER}"
            )
        for ln_no, row in enumerate(reader, start=2):
            try:
                link = Link(
                    id=int(row["link_id"]),
                    from_node=int(row["from"]),
                    to_node=int(row["to"]),
                    length=float(row["length_km"]),
                    ffs=(float(row["ffs_car"]), float(row["ffs_truck"])),
                    capacity=(float(row["cap_car"]), float(row["cap_truck"])),
                    jam_density=(float(row["jam_car"]), float(row["jam_truck"])),
                    allows_parking=_as_bool(row["allows_parking"], f"{path}:{ln_no}"),
                    curb_capacity=float(row["curb_capacity"]),
                    is_connector=_as_bool(row["is_connector"], f"{path}:{ln_no}"),
                )
            except (TypeError, KeyError, ValueError) as exc:
                if isinstance(exc, NetworkError):
                    raise
                raise NetworkError(f"{path}:{ln_no}: cannot parse row: {exc}") from None
            if link.id in seen:
                raise NetworkError(f"{path}:{ln_no}: duplicate link id {link.id}")
            seen.add(link.id)
            bad = link.check()
            if bad:
                raise NetworkError(f"{path}:{ln_no}: " + "; ".join(bad))
            links.append(link)
    if not links:
        raise NetworkError(f"{path}: no links")

    node_xy = load_node_coords(coords_file) if coords_file else {}
    od_pairs = load_od_pairs(od_file) if od_file else ()
    net = Network(links, od_pairs, node_xy)
    for r, s in net.od_pairs:
        if r not in net.nodes or s not in net.nodes:
            raise NetworkError(f"OD pair ({r},{s}) references a node with no links")
    return net


def load_node_coords(coords_file) -> dict[int, tuple[float, float]]:
    """Read node coordinates from a CSV with header node_id,x,y."""
    out = {}
    with open(coords_file, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != ["node_id", "x", "y"]:
            raise NetworkError(f"{coords_file}: bad header {reader.fieldnames}")
        for row in reader:
            out[int(row["node_id"])] = (float(row["x"]), float(row["y"]))
    return out


def load_od_pairs(od_file) -> tuple[tuple[int, int], ...]:
    """Read OD pairs from a CSV with header origin,destination."""
    pairs = []
    with open(od_file, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != ["origin", "destination"]:
            raise NetworkError(f"{od_file}: bad header {reader.fieldnames}")
        for row in reader:
            r, s = int(row["origin"]), int(row["destination"])
            if r == s:
                raise NetworkError(f"{od_file}: origin equals destination ({r})")
            pairs.append((r, s))
    return tuple(pairs)


def save_network(net: Network, network_file, coords_file=None, od_file=None) -> None:
    """Serialize a network back to CSV; inverse of load_network."""
    with open(network_file, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(NETWORK_HEADER)
        for ln in net.links:
            writer.writerow([
                ln.id, ln.from_node, ln.to_node, _fmt(ln.length),
                _fmt(ln.ffs[0]), _fmt(ln.ffs[1]),
                _fmt(ln.capacity[0]), _fmt(ln.capacity[1]),
                _fmt(ln.jam_density[0]), _fmt(ln.jam_density[1]),
                int(ln.allows_parking), _fmt(ln.curb_capacity), int(ln.is_connector),
            ])
    if coords_file is not None:
        with open(coords_file, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["node_id", "x", "y"])
            for node in sorted(net.node_xy):
                x, y = net.node_xy[node]
                writer.writerow([node, _fmt(x), _fmt(y)])
    if od_file is not None:
        with open(od_file, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["origin", "destination"])
            for r, s in net.od_pairs:
                writer.writerow([r, s])


def _fmt(x: float) -> str:
    return repr(int(x)) if float(x).is_integer() else repr(float(x))


def validate_network(net: Network) -> list[str]:
    """Collect structural and attribute violations without raising."""
    bad = []
    seen = set()
    for ln in net.links:
        if ln.id in seen:
            bad.append(f"duplicate link id {ln.id}")
        seen.add(ln.id)
        bad.extend(ln.check())
    for r, s in net.od_pairs:
        if r not in net.nodes:
            bad.append(f"origin node {r} has no incident links")
        if s not in net.nodes:
            bad.append(f"destination node {s} has no incident links")
        if r == s:
            bad.append(f"degenerate OD pair ({r},{s})")
    return bad


@dataclass(frozen=True)
class Path:
    """A loopless link sequence serving one OD pair."""

    id: int
    od_index: int
    link_ids: tuple[int, ...]
    link_idxs: tuple[int, ...]
    fftt: tuple[float, ...]  # per class, seconds


@dataclass
class PathSet:
    """Candidate paths for every OD pair, shared across classes by default.

    class_paths lists the path ids available to each class; with a shared
    topology both entries are identical. unreachable collects OD indices
    dropped because no route exists.
    """

    paths: tuple[Path, ...]
    class_paths: tuple[tuple[int, ...], ...]
    od_paths: dict[int, tuple[int, ...]] = field(default_factory=dict)
    unreachable: tuple[int, ...] = ()

    @property
    def n_paths(self) -> int:
        return len(self.paths)

    def od_of_path(self):
        return [p.od_index for p in self.paths]

    def fftt_array(self):
        """Free-flow path times as nested lists [class][path] in seconds."""
        return [
            [p.fftt[c] for p in self.paths] for c in range(N_CLASSES)
        ]


def _dijkstra(net, weights, source, target, banned_nodes, banned_links):
    """Cheapest loopless route; ties broken by lexicographic link-id sequence.

    weights maps link position to cost. Returns (cost, link-position tuple)
    or None when target is unreachable.
    """
    heap = [(0.0, (), source)]
    done = set()
    while heap:
        cost, seq, node = heapq.heappop(heap)
        if node in done:
            continue
        done.add(node)
        if node == target:
            return cost, seq
        for pos in net.out_links(node):
            ln = net.links[pos]
            if pos in banned_links or ln.to_node in banned_nodes:
                continue
            if ln.to_node in done:
                continue
            heapq.heappush(
                heap, (cost + weights[pos], seq + (ln.id,), ln.to_node)
            )
    return None


def _k_shortest(net, weights, source, target, k_max):
    """Yen's algorithm over loopless routes, deterministic under cost ties."""
    id2pos = {net.links[p].id: p for p in range(net.n_links)}
    first = _dijkstra(net, weights, source, target, frozenset(), frozenset())
    if first is None:
        return []
    found = [first]
    candidates: list[tuple[float, tuple[int, ...]]] = []
    in_candidates = set()
    while len(found) < k_max:
        base_cost, base_seq = found[-1]
        base_nodes = [source] + [net.links[id2pos[l]].to_node for l in base_seq]
        for i in range(len(base_seq)):
            spur_node = base_nodes[i]
            root = base_seq[:i]
            root_cost = sum(weights[id2pos[l]] for l in root)
            banned_links = {
                id2pos[seq[i]]
                for _, seq in found
                if len(seq) > i and seq[:i] == root
            }
            for _, seq in candidates:
                if len(seq) > i and seq[:i] == root:
                    banned_links.add(id2pos[seq[i]])
            banned_nodes = frozenset(base_nodes[:i])
            spur = _dijkstra(net, weights, spur_node, target, banned_nodes, banned_links)
            if spur is None:
                continue
            total = root + spur[1]
            if total not in in_candidates:
                in_candidates.add(total)
                heapq.heappush(candidates, (root_cost + spur[0], total))
        if not candidates:
            break
        found.append(heapq.heappop(candidates))
    return found


def enumerate_paths(net: Network, k_max: int, vclass: int | None = None) -> PathSet:
    """Enumerate up to k_max cheapest loopless paths per OD pair.

    Costs are free-flow times of class ``vclass``; None builds one shared
    topology from class 0 costs and exposes it to every class. OD pairs with
    no route are dropped with a warning and listed in PathSet.unreachable.
    """
    if k_max < 1:
        raise NetworkError("k_max must be at least 1")
    if not net.od_pairs:
        raise NetworkError("network has no OD pairs")
    cost_cls = 0 if vclass is None else vclass
    weights = [ln.free_flow_time(cost_cls) for ln in net.links]

    paths: list[Path] = []
    od_paths: dict[int, tuple[int, ...]] = {}
    unreachable = []
    for od_idx, (r, s) in enumerate(net.od_pairs):
        routes = _k_shortest(net, weights, r, s, k_max)
        if not routes:
            log.warning("OD pair (%s,%s) unreachable, dropped", r, s)
            unreachable.append(od_idx)
            continue
        ids = []
        for _, link_id_seq in routes:
            idxs = tuple(net.index_of(l) for l in link_id_seq)
            fftt = tuple(
                sum(net.links[p].free_flow_time(c) for p in idxs)
                for c in range(N_CLASSES)
            )
            pid = len(paths)
            paths.append(Path(pid, od_idx, tuple(link_id_seq), idxs, fftt))
            ids.append(pid)
        od_paths[od_idx] = tuple(ids)

    all_ids = tuple(range(len(paths)))
    return PathSet(
        paths=tuple(paths),
        class_paths=tuple(all_ids for _ in CLASSES),
        od_paths=od_paths,
        unreachable=tuple(unreachable),
    )


def load_path_set(net: Network, path_file) -> PathSet:
    """Read fixed per-class paths from a CSV: od_index,class,link_id;link_id;...

    Listed paths replace enumeration; classes missing an OD pair simply have
    no route choice there.
    """
    paths: list[Path] = []
    class_ids: list[list[int]] = [[] for _ in CLASSES]
    od_paths: dict[int, list[int]] = {}
    keyed: dict[tuple[int, ...], int] = {}
    with open(path_file, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != ["od_index", "class", "links"]:
            raise NetworkError(f"{path_file}: bad header {reader.fieldnames}")
        for row in reader:
            od_idx = int(row["od_index"])
            if not 0 <= od_idx < net.n_od:
                raise NetworkError(f"{path_file}: od_index {od_idx} out of range")
            cls = CLASSES.index(row["class"])
            link_ids = tuple(int(t) for t in row["links"].split(";"))
            idxs = tuple(net.index_of(l) for l in link_ids)
            _check_route(net, od_idx, idxs, path_file)
            key = (od_idx,) + link_ids
            if key not in keyed:
                fftt = tuple(
                    sum(net.links[p].free_flow_time(c) for p in idxs)
                    for c in range(N_CLASSES)
                )
                pid = len(paths)
                paths.append(Path(pid, od_idx, link_ids, idxs, fftt))
                keyed[key] = pid
                od_paths.setdefault(od_idx, []).append(pid)
            class_ids[cls].append(keyed[key])
    if not paths:
        raise NetworkError(f"{path_file}: no paths")
    return PathSet(
        paths=tuple(paths),
        class_paths=tuple(tuple(sorted(set(ids))) for ids in class_ids),
        od_paths={k: tuple(v) for k, v in od_paths.items()},
    )


def save_path_set(pathset: PathSet, path_file) -> None:
    """Write a path set in the load_path_set format, one row per class."""
    with open(path_file, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["od_index", "class", "links"])
        for c, name in enumerate(CLASSES):
            for pid in pathset.class_paths[c]:
                p = pathset.paths[pid]
                writer.writerow(
                    [p.od_index, name, ";".join(str(l) for l in p.link_ids)]
                )


def _check_route(net, od_idx, idxs, where):
    r, s = net.od_pairs[od_idx]
    node = r
    seen_nodes = {r}
    for p in idxs:
        ln = net.links[p]
        if ln.from_node != node:
            raise NetworkError(f"{where}: path for OD {od_idx} is not contiguous")
        node = ln.to_node
        if node in seen_nodes:
            raise NetworkError(f"{where}: path for OD {od_idx} revisits node {node}")
        seen_nodes.add(node)
    if node != s:
        raise NetworkError(f"{where}: path for OD {od_idx} does not end at {s}")
