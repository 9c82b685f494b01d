"""Dynamic assignment ratio matrices and linear state reconstruction.

Each class gets four sparse matrices mapping path departures to link
events: arrivals and departures, split into through and parking traffic.
Entry ((a, t2), (k, t1)) holds the portion of the path flow f[k, t1] that
produced the event on link a during interval t2.

Flat vector conventions used throughout the package:
  link-state vectors:  index = t * n_links + a   (interval-major)
  path-flow vectors:   index = t1 * n_paths + k
Matrix shapes are therefore (T * n_links, T * n_paths).
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from .network import CLASSES, N_CLASSES
from .dnl import ARR_MOVE, ARR_PARK, DEP_MOVE, DEP_PARK, CumulativeCurveSet

_KIND_NAMES = {ARR_MOVE: "arr_move", ARR_PARK: "arr_park",
               DEP_MOVE: "dep_move", DEP_PARK: "dep_park"}


@dataclass
class DarMatrixSet:
    """Per-class assignment ratio matrices plus shape metadata."""

    arr_move: tuple
    arr_park: tuple
    dep_move: tuple
    dep_park: tuple
    n_links: int
    n_paths: int
    T: int
    packet_size: float = 1.0
    link_ids: tuple = ()

    def kinds(self):
        return {ARR_MOVE: self.arr_move, ARR_PARK: self.arr_park,
                DEP_MOVE: self.dep_move, DEP_PARK: self.dep_park}

    def arrivals(self, c: int):
        return self.arr_move[c] + self.arr_park[c]

    def net_accumulation(self, c: int):
        """Arrivals minus departures, both traffic phases."""
        return (self.arr_move[c] + self.arr_park[c]
                - self.dep_move[c] - self.dep_park[c])


class IntervalCumulator:
    """Running sum over intervals, applied per link (lower-triangular blocks)."""

    def __init__(self, n_links: int, T: int):
        self.n_links = n_links
        self.T = T

    def apply(self, v: np.ndarray) -> np.ndarray:
        return np.asarray(v).reshape(self.T, self.n_links).cumsum(axis=0).ravel()

    def apply_t(self, v: np.ndarray) -> np.ndarray:
        m = np.asarray(v).reshape(self.T, self.n_links)
        return m[::-1].cumsum(axis=0)[::-1].ravel()

    def as_matrix(self) -> sp.csr_matrix:
        tri = sp.csr_matrix(np.tril(np.ones((self.T, self.T))))
        return sp.kron(tri, sp.eye(self.n_links), format="csr")


def state_to_vec(arr: np.ndarray) -> np.ndarray:
    """Flatten an (n_links, T) state array to the interval-major vector."""
    return np.asarray(arr).T.ravel()


def vec_to_state(v: np.ndarray, n_links: int, T: int) -> np.ndarray:
    """Inverse of state_to_vec."""
    return np.asarray(v).reshape(T, n_links).T


def flows_to_vec(f_cls: np.ndarray) -> np.ndarray:
    """Flatten an (n_paths, T) flow array to the interval-major vector."""
    return np.asarray(f_cls).T.ravel()


def extract_dar(curves: CumulativeCurveSet, packet_size: float = 1.0) -> DarMatrixSet:
    """Build assignment ratio matrices from tagged curve increments.

    Every increment of size s tagged (k, t1) contributes s / f[k, t1] to
    the matching matrix cell; duplicate cells sum. Raises on a tag whose
    path flow is zero, which would mean the loader leaked packets.
    """
    if curves.f is None:
        raise ValueError("curves must come from a completed loading run")
    A, K, T = curves.n_links, curves.n_paths, curves.T
    L = curves.interval_length
    out = {k: [] for k in _KIND_NAMES}
    for kind in _KIND_NAMES:
        mats = []
        for c in range(N_CLASSES):
            rows, cols, vals = [], [], []
            for a in range(A):
                times, sizes, paths, t1s = curves.events(c, a, kind)
                if len(times) == 0:
                    continue
                t2 = np.minimum((times / L).astype(int), T - 1)
                denom = curves.f[c, paths, t1s]
                if np.any(denom <= 0):
                    raise RuntimeError(
                        "curve tag references a zero-flow path column"
                    )
                rows.append(t2 * A + a)
                cols.append(t1s * K + paths)
                vals.append(sizes / denom)
            if rows:
                m = sp.coo_matrix(
                    (np.concatenate(vals),
                     (np.concatenate(rows), np.concatenate(cols))),
                    shape=(T * A, T * K),
                ).tocsr()
            else:
                m = sp.csr_matrix((T * A, T * K))
            mats.append(m)
        out[kind] = tuple(mats)
    return DarMatrixSet(
        arr_move=out[ARR_MOVE], arr_park=out[ARR_PARK],
        dep_move=out[DEP_MOVE], dep_park=out[DEP_PARK],
        n_links=A, n_paths=K, T=T, packet_size=packet_size,
        link_ids=curves.link_ids,
    )


def reconstruct_flow(dar: DarMatrixSet, f: np.ndarray) -> np.ndarray:
    """Link inflows implied by the ratio matrices, shape (classes, links, T)."""
    out = np.zeros((N_CLASSES, dar.n_links, dar.T))
    for c in range(N_CLASSES):
        vec = dar.arrivals(c) @ flows_to_vec(f[c])
        out[c] = vec_to_state(vec, dar.n_links, dar.T)
    return out


def reconstruct_density(dar: DarMatrixSet, h_op: IntervalCumulator, f: np.ndarray) -> np.ndarray:
    """Vehicles present at interval ends implied by the ratio matrices.

    Returns occupancy (density times length) with shape (classes, links, T).
    """
    out = np.zeros((N_CLASSES, dar.n_links, dar.T))
    for c in range(N_CLASSES):
        vec = h_op.apply(dar.net_accumulation(c) @ flows_to_vec(f[c]))
        out[c] = vec_to_state(vec, dar.n_links, dar.T)
    return out


def carry_forward_columns(current: DarMatrixSet, previous: DarMatrixSet | None,
                          f: np.ndarray) -> DarMatrixSet:
    """Fill zero-flow columns of the current matrices from a previous set.

    Columns whose path flow is zero carry no information this run; reusing
    the latest populated column keeps gradients alive for demand cells that
    were projected to zero.
    """
    if previous is None:
        return current
    K, T = current.n_paths, current.T
    zero_cols = {}
    for c in range(N_CLASSES):
        fz = flows_to_vec(f[c]) <= 0
        zero_cols[c] = np.flatnonzero(fz)
    if all(len(v) == 0 for v in zero_cols.values()):
        return current
    merged = {}
    for kind, mats in current.kinds().items():
        prev_mats = previous.kinds()[kind]
        fixed = []
        for c in range(N_CLASSES):
            cols = zero_cols[c]
            if len(cols) == 0:
                fixed.append(mats[c])
                continue
            cur = mats[c].tocsc(copy=True)
            prev = prev_mats[c].tocsc()
            keep = np.ones(T * K, dtype=bool)
            keep[cols] = False
            parts = []
            for j in range(T * K):
                parts.append(cur[:, j] if keep[j] else prev[:, j])
            fixed.append(sp.hstack(parts, format="csr"))
        merged[kind] = tuple(fixed)
    return DarMatrixSet(
        arr_move=merged[ARR_MOVE], arr_park=merged[ARR_PARK],
        dep_move=merged[DEP_MOVE], dep_park=merged[DEP_PARK],
        n_links=current.n_links, n_paths=K, T=T,
        packet_size=current.packet_size, link_ids=current.link_ids,
    )


def dump_dar_csv(dar: DarMatrixSet, path) -> None:
    """Write all nonzero entries: class,kind,link,t2,path,t1,value."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["class", "kind", "link", "t2", "path", "t1", "value"])
        for kind, mats in sorted(dar.kinds().items()):
            for c in range(N_CLASSES):
                coo = mats[c].tocoo()
                order = np.lexsort((coo.col, coo.row))
                ids = dar.link_ids or tuple(range(dar.n_links))
                for i in order:
                    r, col, v = coo.row[i], coo.col[i], coo.data[i]
                    writer.writerow([
                        CLASSES[c], _KIND_NAMES[kind],
                        ids[r % dar.n_links], r // dar.n_links,
                        col % dar.n_paths, col // dar.n_paths,
                        repr(float(v)),
                    ])
