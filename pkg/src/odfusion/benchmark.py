"""Derivative-free baseline: SPSA in a principal-component demand space.

Historical demand knowledge enters as a template matrix. Perturbed copies
of the template form a sample set, a per-class PCA of the interval-level
OD vectors gives a low-dimensional basis, and simultaneous-perturbation
stochastic approximation searches the component space. Every iteration
spends exactly two loading runs.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .network import N_CLASSES, Network, PathSet
from .dnl import DnlConfig, assign_path_flows, free_flow_path_costs, route_choice, run_dnl
from .estimator import EstimatorConfig, LossWeights, ObservationSet, compute_loss


@dataclass
class OdSampleSet:
    """Template demand plus multiplicative-perturbation samples.

    samples[0] is the template itself; shape (n + 1, classes, n_od, T).
    """

    samples: np.ndarray
    perturbation: float
    seed: int

    @property
    def n_samples(self) -> int:
        return self.samples.shape[0]

    def template(self) -> np.ndarray:
        return self.samples[0]


def generate_od_samples(template: np.ndarray, n: int, perturbation: float,
                        seed: int) -> OdSampleSet:
    """Draw n samples template * U(1 - p, 1 + p), elementwise, seeded."""
    if n < 1:
        raise ValueError("need at least one sample")
    if not 0 <= perturbation < 1:
        raise ValueError("perturbation must lie in [0, 1)")
    rng = np.random.default_rng(seed)
    tpl = np.asarray(template, dtype=float)
    if np.any(tpl < 0):
        raise ValueError("template demand must be nonnegative")
    out = np.empty((n + 1,) + tpl.shape)
    out[0] = tpl
    for i in range(1, n + 1):
        out[i] = tpl * rng.uniform(1.0 - perturbation, 1.0 + perturbation,
                                   size=tpl.shape)
    return OdSampleSet(samples=out, perturbation=perturbation, seed=seed)


@dataclass
class PcBasis:
    """Orthonormal component basis for one class of OD interval vectors."""

    mean: np.ndarray
    components: np.ndarray  # (n_od, n_components)
    explained: np.ndarray   # variance ratio per retained component
    retained_variance: float
    component_scale: np.ndarray | None = None  # per-component sample std

    @property
    def n_components(self) -> int:
        return self.components.shape[1]


def interval_vectors(sample_set: OdSampleSet, cls: int) -> np.ndarray:
    """Stack one class's per-interval OD vectors: (n_samples * T, n_od)."""
    s = sample_set.samples[:, cls, :, :]          # (n, n_od, T)
    return s.transpose(0, 2, 1).reshape(-1, s.shape[1])


def fit_pca(vectors: np.ndarray, variance_threshold: float = 0.95) -> PcBasis:
    """PCA of row vectors keeping the smallest basis reaching the threshold.

    Component signs follow the convention that the largest-magnitude
    coordinate of each component is positive. Raises when the vectors have
    no variance at all.
    """
    x = np.asarray(vectors, dtype=float)
    if x.ndim != 2 or x.shape[0] < 2:
        raise ValueError("need a 2-d stack of at least two vectors")
    if not 0 < variance_threshold <= 1:
        raise ValueError("variance_threshold must lie in (0, 1]")
    mean = x.mean(axis=0)
    centred = x - mean
    _, svals, vt = np.linalg.svd(centred, full_matrices=False)
    var = svals ** 2
    total = var.sum()
    if total <= 0:
        raise ValueError("samples have zero variance")
    ratio = var / total
    m = int(np.searchsorted(np.cumsum(ratio), variance_threshold - 1e-12) + 1)
    m = min(m, len(ratio))
    comps = vt[:m].T.copy()
    for j in range(m):
        peak = np.argmax(np.abs(comps[:, j]))
        if comps[peak, j] < 0:
            comps[:, j] = -comps[:, j]
    return PcBasis(mean=mean, components=comps, explained=ratio[:m],
                   retained_variance=float(ratio[:m].sum()),
                   component_scale=svals[:m] / np.sqrt(x.shape[0] - 1))


def fit_class_bases(sample_set: OdSampleSet, variance_threshold: float = 0.95):
    """One PcBasis per class from the same sample set."""
    return tuple(
        fit_pca(interval_vectors(sample_set, c), variance_threshold)
        for c in range(N_CLASSES)
    )


def demand_from_scores(bases, z_list, T: int) -> np.ndarray:
    """Rebuild nonnegative demand from per-class score blocks.

    z_list[c] has shape (T, n_components of class c).
    """
    n_od = bases[0].mean.shape[0]
    q = np.empty((N_CLASSES, n_od, T))
    for c, basis in enumerate(bases):
        recon = basis.mean[None, :] + z_list[c] @ basis.components.T  # (T, n_od)
        q[c] = np.maximum(0.0, recon).T
    return q


def scores_from_demand(bases, q: np.ndarray):
    """Project demand onto each class basis; inverse of demand_from_scores
    up to the truncation and the nonnegativity clip."""
    out = []
    for c, basis in enumerate(bases):
        cols = q[c].T - basis.mean[None, :]       # (T, n_od)
        out.append(cols @ basis.components)
    return out


@dataclass
class SpsaConfig:
    """Gain schedule and budget for the component-space search."""

    iterations: int = 50
    a: float = 0.4
    c: float = 0.4
    alpha: float = 0.602
    gamma: float = 0.101
    big_a: float | None = None  # default: 10 percent of iterations
    seed: int = 0

    def gains(self, k: int):
        big_a = self.big_a if self.big_a is not None else 0.1 * self.iterations
        a_k = self.a / (k + 1 + big_a) ** self.alpha
        c_k = self.c / (k + 1) ** self.gamma
        return a_k, c_k


@dataclass
class SpsaTrace:
    """Normalized objective trace; one entry per loading-budget checkpoint."""

    norm_loss: list = field(default_factory=list)
    dnl_evals: list = field(default_factory=list)
    eval_count: int = 0


def solve_pc_spsa(net: Network, pathset: PathSet, obs: ObservationSet,
                  weights: LossWeights, bases, spsa_cfg: SpsaConfig,
                  dnl_cfg: DnlConfig, est_cfg: EstimatorConfig,
                  q0: np.ndarray | None = None):
    """SPSA over principal-component scores of the demand.

    Starts from q0 (or the estimator's random init) projected onto the
    bases. Each iteration evaluates the objective at two symmetric
    perturbations, exactly two loading runs, then steps against the
    gradient estimate. Perturbation and step sizes are measured in units
    of the per-component sample spread, and the gradient estimate uses
    the objective normalized by its starting value, so one gain setting
    works across problem scales. Stops early if a probe goes non-finite.
    Returns (q_best, SpsaTrace); the trace starts at exactly 1.0 and ends
    with a re-evaluation of the returned point.
    """
    T = dnl_cfg.horizon_intervals
    rng = np.random.default_rng(spsa_cfg.seed)
    if q0 is None:
        from .estimator import init_demand
        q0 = init_demand(est_cfg, net.n_od, T)
    z_list = scores_from_demand(bases, q0)
    sizes = [z.size for z in z_list]
    shapes = [z.shape for z in z_list]

    def pack(zs):
        return np.concatenate([z.ravel() for z in zs])

    def unpack(v):
        out, at = [], 0
        for size, shape in zip(sizes, shapes):
            out.append(v[at:at + size].reshape(shape))
            at += size
        return out

    costs = free_flow_path_costs(pathset, T)
    p = route_choice(costs, dnl_cfg.logit_scale, pathset)
    trace = SpsaTrace()

    def objective(zvec):
        q = demand_from_scores(bases, unpack(zvec), T)
        f = assign_path_flows(q, p, pathset)
        _, state = run_dnl(net, pathset, f, dnl_cfg, seed=est_cfg.dnl_seed)
        trace.eval_count += 1
        total, _ = compute_loss(state, obs, weights)
        return total

    # per-coordinate spread, packed the same way as the score blocks
    scale = np.concatenate([
        np.tile(b.component_scale if b.component_scale is not None
                else np.ones(b.n_components), T)
        for b in bases
    ])

    z = pack(z_list)
    base_loss = objective(z)
    if base_loss <= 0:
        base_loss = 1.0
    trace.norm_loss.append(1.0)
    trace.dnl_evals.append(trace.eval_count)
    best_z = z.copy()
    best_loss = base_loss

    for k in range(spsa_cfg.iterations):
        a_k, c_k = spsa_cfg.gains(k)
        delta = rng.choice((-1.0, 1.0), size=z.size)
        before = trace.eval_count
        z_plus = z + c_k * delta * scale
        z_minus = z - c_k * delta * scale
        g_plus = objective(z_plus)
        g_minus = objective(z_minus)
        assert trace.eval_count - before == 2, "iteration must cost two loading runs"
        if not (np.isfinite(g_plus) and np.isfinite(g_minus)):
            break
        ghat = (g_plus - g_minus) / (2.0 * c_k * base_loss) / delta
        z = z - a_k * ghat * scale
        probe = 0.5 * (g_plus + g_minus)
        if min(g_plus, g_minus) < best_loss:
            best_loss = min(g_plus, g_minus)
            best_z = z_plus.copy() if g_plus <= g_minus else z_minus.copy()
        trace.norm_loss.append(probe / base_loss)
        trace.dnl_evals.append(trace.eval_count)

    # deterministic re-evaluation of the point actually returned
    final_loss = objective(best_z)
    trace.norm_loss.append(final_loss / base_loss)
    trace.dnl_evals.append(trace.eval_count)
    q_best = demand_from_scores(bases, unpack(best_z), T)
    return q_best, trace
