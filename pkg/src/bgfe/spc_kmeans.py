"""Frequentist counterpart: pairwise-constrained KMeans and the
soft-pairwise-constrained grouped fixed-effects estimator, plus the
small-variance harness linking the Gibbs assignment step to the KMeans
assignment step.

Violation costs follow the same ordered-pair convention as the prior
tilt: every stored constraint is counted once per direction, so a
violated pair contributes twice its cost to the objective.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple

import numpy as np

from .constraints import POSITIVE_LINK, ConstraintSet
from .dp_prior import GroupPartition
from .errors import CollinearDesignError
from .panel import PanelDataset


@dataclass(frozen=True)
class KmeansConfig:
    """Fixed group count, violation costs, and iteration controls.

    w_pl / w_nl override the per-pair costs uniformly; when None the
    costs default to 2 c |W_ij| from the constraint accuracies, the
    translation under which the penalized objective matches the Gibbs
    assignment log-mass up to a partition-independent constant.
    """

    k: int
    w_pl: Optional[float] = None
    w_nl: Optional[float] = None
    c: float = 1.0
    max_iter: int = 200
    tol: float = 1e-10
    n_restarts: int = 20

    def __post_init__(self):
        if self.k < 1:
            raise ValueError("k must be >= 1")
        for name in ("w_pl", "w_nl"):
            v = getattr(self, name)
            if v is not None and v < 0:
                raise ValueError(f"{name} must be nonnegative")


@dataclass
class KmeansState:
    assignment: GroupPartition
    centroids: np.ndarray
    objective: float


@dataclass(frozen=True)
class _CostPairs:
    pl_i: np.ndarray
    pl_j: np.ndarray
    pl_w: np.ndarray
    nl_i: np.ndarray
    nl_j: np.ndarray
    nl_w: np.ndarray

    @property
    def empty(self) -> bool:
        return self.pl_i.size == 0 and self.nl_i.size == 0


def resolve_costs(cs: Optional[ConstraintSet], config: KmeansConfig) -> _CostPairs:
    pl, nl = [], []
    if cs is not None:
        for con in cs.constraints:
            if con.ctype == POSITIVE_LINK:
                w = config.w_pl if config.w_pl is not None else 2.0 * config.c * abs(con.weight)
                pl.append((con.i, con.j, w))
            else:
                w = config.w_nl if config.w_nl is not None else 2.0 * config.c * abs(con.weight)
                nl.append((con.i, con.j, w))

    def unpack(rows):
        if not rows:
            return (np.empty(0, dtype=np.intp),) * 2 + (np.empty(0),)
        arr = np.asarray(rows, dtype=float)
        return arr[:, 0].astype(np.intp), arr[:, 1].astype(np.intp), arr[:, 2]

    pli, plj, plw = unpack(pl)
    nli, nlj, nlw = unpack(nl)
    return _CostPairs(pli, plj, plw, nli, nlj, nlw)


def _adjacency(n: int, costs: _CostPairs):
    """Per-unit (partner indices, costs, is_positive) arrays."""
    partners: List[List[Tuple[int, float, bool]]] = [[] for _ in range(n)]
    for i, j, w in zip(costs.pl_i, costs.pl_j, costs.pl_w):
        partners[i].append((j, w, True))
        partners[j].append((i, w, True))
    for i, j, w in zip(costs.nl_i, costs.nl_j, costs.nl_w):
        partners[i].append((j, w, False))
        partners[j].append((i, w, False))
    out = []
    for rows in partners:
        if rows:
            idx = np.asarray([r[0] for r in rows], dtype=np.intp)
            w = np.asarray([r[1] for r in rows])
            pos = np.asarray([r[2] for r in rows], dtype=bool)
        else:
            idx, w, pos = np.empty(0, dtype=np.intp), np.empty(0), np.empty(0, dtype=bool)
        out.append((idx, w, pos))
    return out


def penalty_total(g: np.ndarray, costs: _CostPairs) -> float:
    """Total violation cost under the ordered-pair convention (each
    stored constraint counted twice)."""
    total = 0.0
    if costs.pl_i.size:
        total += 2.0 * costs.pl_w[g[costs.pl_i] != g[costs.pl_j]].sum()
    if costs.nl_i.size:
        total += 2.0 * costs.nl_w[g[costs.nl_i] == g[costs.nl_j]].sum()
    return float(total)


def kmeans_objective(points: np.ndarray, g: np.ndarray, centroids: np.ndarray,
                     costs: _CostPairs) -> float:
    """Half the within-cluster sum of squares plus violation costs."""
    ssq = float(((points - centroids[g]) ** 2).sum())
    return 0.5 * ssq + penalty_total(g, costs)


def _unit_penalties(i, g, k, adjacency):
    """Per-candidate-group violation cost for reassigning unit i."""
    idx, w, pos = adjacency[i]
    pen = np.zeros(k)
    if idx.size == 0:
        return pen
    labels = g[idx]
    pl_mask = pos
    if pl_mask.any():
        w_pl = w[pl_mask]
        match = np.bincount(labels[pl_mask], weights=w_pl, minlength=k)[:k]
        pen += 2.0 * (w_pl.sum() - match)
    if (~pl_mask).any():
        w_nl = w[~pl_mask]
        pen += 2.0 * np.bincount(labels[~pl_mask], weights=w_nl, minlength=k)[:k]
    return pen


def _kmeanspp_init(points: np.ndarray, k: int, rng) -> np.ndarray:
    n = points.shape[0]
    centroids = [points[rng.integers(n)]]
    for _ in range(1, k):
        d2 = np.min(
            ((points[:, None, :] - np.asarray(centroids)[None]) ** 2).sum(axis=2), axis=1
        )
        total = d2.sum()
        if total <= 0:
            centroids.append(points[rng.integers(n)])
            continue
        r = rng.random() * total
        centroids.append(points[int(np.searchsorted(np.cumsum(d2), r))])
    return np.asarray(centroids)


def _repair_empty(points, g, centroids, k) -> None:
    """Reseed each empty cluster with the point farthest from its own
    centroid, among clusters that can spare a member."""
    for kk in range(k):
        if np.any(g == kk):
            continue
        dist = ((points - centroids[g]) ** 2).sum(axis=1)
        sizes = np.bincount(g, minlength=k)
        dist[sizes[g] <= 1] = -np.inf
        far = int(np.argmax(dist))
        g[far] = kk
        centroids[kk] = points[far]


def _pc_kmeans_single(points, costs, adjacency, config, init, rng) -> KmeansState:
    n, _ = points.shape
    k = config.k
    centroids = np.array(init, dtype=float, copy=True)
    g = np.argmin(((points[:, None, :] - centroids[None]) ** 2).sum(axis=2), axis=1)
    _repair_empty(points, g, centroids, k)
    obj = kmeans_objective(points, g, centroids, costs)
    for _ in range(config.max_iter):
        # assignment step: sequential sweep with immediate constraint updates
        for i in range(n):
            dist2 = 0.5 * ((points[i] - centroids) ** 2).sum(axis=1)
            cost = dist2 + _unit_penalties(i, g, k, adjacency)
            g[i] = int(np.argmin(cost))
        obj_assign = kmeans_objective(points, g, centroids, costs)
        assert obj_assign <= obj + 1e-8, "assignment sweep increased the objective"
        _repair_empty(points, g, centroids, k)
        obj_repaired = kmeans_objective(points, g, centroids, costs)
        # update step: centroids at block means
        for kk in range(k):
            members = g == kk
            if members.any():
                centroids[kk] = points[members].mean(axis=0)
        obj_update = kmeans_objective(points, g, centroids, costs)
        assert obj_update <= obj_repaired + 1e-8, "centroid update increased the objective"
        if 0.0 <= obj - obj_update < config.tol:
            obj = obj_update
            break
        obj = obj_update
    return KmeansState(GroupPartition(g), centroids, obj)


def pc_kmeans(points: np.ndarray, cs: Optional[ConstraintSet],
              config: KmeansConfig, init: Optional[np.ndarray] = None,
              rng=None) -> KmeansState:
    """Pairwise-constrained KMeans.

    Alternates a sequential assignment sweep (squared distance plus
    violation costs, evaluated against the latest labels) with a
    block-mean centroid update.  With an explicit init this is a single
    run; otherwise the best of config.n_restarts runs is returned, the
    first seeded kmeans++-style and the rest uniformly.
    """
    points = np.atleast_2d(np.asarray(points, dtype=float))
    if points.shape[0] < config.k:
        raise ValueError("need at least k points")
    costs = resolve_costs(cs, config)
    adjacency = _adjacency(points.shape[0], costs)
    if init is not None:
        return _pc_kmeans_single(points, costs, adjacency, config, init, rng)
    if rng is None:
        raise ValueError("rng is required when no init is given")
    best: Optional[KmeansState] = None
    for r in range(max(1, config.n_restarts)):
        if r == 0:
            init_r = _kmeanspp_init(points, config.k, rng)
        elif r % 2 == 1:
            init_r = points[rng.choice(points.shape[0], size=config.k, replace=False)]
        else:
            # random-assignment seeding reaches basins point seeding misses
            g0 = rng.integers(0, config.k, size=points.shape[0])
            g0[rng.permutation(points.shape[0])[: config.k]] = np.arange(config.k)
            init_r = np.stack([points[g0 == kk].mean(axis=0) for kk in range(config.k)])
        state = _pc_kmeans_single(points, costs, adjacency, config, init_r, rng)
        if best is None or state.objective < best.objective:
            best = state
    return best


# ---------------------------------------------------------------------------
# SPC-GFE: grouped time fixed-effects with common slopes
# ---------------------------------------------------------------------------

@dataclass
class SpcGfeResult:
    theta: np.ndarray          # common slope coefficients
    alpha_kt: np.ndarray       # (K, T) group-by-period effects
    partition: GroupPartition
    objective: float
    n_iter: int


def _gfe_design(theta_x: Optional[np.ndarray], g: np.ndarray, k: int, n: int, t: int):
    """Stacked regression design: common covariates then K*T group-period
    dummies."""
    cols = []
    if theta_x is not None:
        cols.append(theta_x.reshape(n * t, -1))
    dummies = np.zeros((n * t, k * t))
    rows = np.arange(n * t)
    dummies[rows, g.repeat(t) * t + np.tile(np.arange(t), n)] = 1.0
    cols.append(dummies)
    return np.hstack(cols)


def _gfe_ols(y, theta_x, g, k, n, t, q):
    design = _gfe_design(theta_x, g, k, n, t)
    coef, _, rank, _ = np.linalg.lstsq(design, y.reshape(-1), rcond=None)
    if rank < design.shape[1]:
        raise CollinearDesignError(
            "common covariates are collinear with the group-period effects"
        )
    theta = coef[:q]
    alpha_kt = coef[q:].reshape(k, t)
    return theta, alpha_kt


def spc_gfe(data: PanelDataset, cs: Optional[ConstraintSet], k: int,
            config: Optional[KmeansConfig] = None, rng=None,
            theta_cols: Optional[Sequence[int]] = None) -> SpcGfeResult:
    """Soft-pairwise-constrained grouped fixed-effects estimator.

    Minimizes sum_it (y_it - x_it' theta - alpha_{g_i, t})^2 plus
    c times the constraint-violation cost, alternating a per-unit group
    sweep with an OLS step on the common covariates and group-by-period
    dummies.  Common covariates default to the panel's non-constant x
    columns plus all z columns; constant columns are absorbed by the
    group-period effects.
    """
    if config is None:
        config = KmeansConfig(k=k)
    elif config.k != k:
        raise ValueError("config.k must match k")
    n, t = data.y.shape
    if k > n:
        raise ValueError("more groups than units")
    if theta_cols is None:
        theta_cols = [j for j in range(data.n_x) if np.ptp(data.x[:, :, j]) > 0]
    parts = [data.x[:, :, list(theta_cols)]] if len(theta_cols) else []
    if data.z is not None:
        parts.append(data.z)
    theta_x = np.concatenate(parts, axis=2) if parts else None
    q = 0 if theta_x is None else theta_x.shape[2]

    costs = resolve_costs(cs, config)
    adjacency = _adjacency(n, costs)
    c_scale = config.c

    if rng is None:
        rng = np.random.default_rng(0)
    g = rng.integers(0, k, size=n)
    for kk in range(k):  # every group starts nonempty
        g[kk] = kk
    theta, alpha_kt = _gfe_ols(data.y, theta_x, g, k, n, t, q)

    def objective(g_vec, theta_v, alpha_v):
        resid = data.y - alpha_v[g_vec]
        if theta_x is not None:
            resid = resid - theta_x @ theta_v
        return float((resid**2).sum()) + c_scale * penalty_total(g_vec, costs)

    obj = objective(g, theta, alpha_kt)
    n_iter = 0
    for n_iter in range(1, config.max_iter + 1):
        resid0 = data.y if theta_x is None else data.y - theta_x @ theta
        for i in range(n):
            ssr_k = ((resid0[i][None, :] - alpha_kt) ** 2).sum(axis=1)
            pen = c_scale * _unit_penalties(i, g, k, adjacency)
            g[i] = int(np.argmin(ssr_k + pen))
        for kk in range(k):
            if not np.any(g == kk):
                ssr_units = ((resid0 - alpha_kt[g]) ** 2).sum(axis=1)
                sizes = np.bincount(g, minlength=k)
                ssr_units[sizes[g] <= 1] = -np.inf
                g[int(np.argmax(ssr_units))] = kk
        theta, alpha_kt = _gfe_ols(data.y, theta_x, g, k, n, t, q)
        new_obj = objective(g, theta, alpha_kt)
        if obj - new_obj < config.tol:
            obj = new_obj
            break
        obj = new_obj
    return SpcGfeResult(theta=theta, alpha_kt=alpha_kt,
                        partition=GroupPartition(g), objective=obj, n_iter=n_iter)


# ---------------------------------------------------------------------------
# Small-variance equivalence harness
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class EquivalenceReport:
    sigma2: tuple
    agreement: tuple
    weights_scaled: bool

    @property
    def monotone(self) -> bool:
        agr = self.agreement
        return all(agr[s + 1] >= agr[s] - 1e-12 for s in range(len(agr) - 1))

    @property
    def exact_at_smallest(self) -> bool:
        return self.agreement[-1] == 1.0


def small_variance_equivalence_test(data: PanelDataset, cs: ConstraintSet,
                                    k: int, sigma2_sequence: Sequence[float],
                                    rng, scale_weights: bool = True) -> EquivalenceReport:
    """Compare the Gibbs group-assignment mode with the KMeans assignment
    step as the error variance shrinks.

    Conditions: intercept-only grouping, K fixed, one common variance,
    and (when scale_weights) constraint weights divided by the variance.
    Group means, group probabilities, and the other units' labels are
    held fixed so the two rules see identical inputs; per unit the
    comparison is between

        argmax_k [ -cost_k / sigma2 + log pi_k ]     (Gibbs mode)
        argmin_k cost_k                              (KMeans step)

    with a shared per-unit cost, so agreement is nondecreasing as sigma2
    falls and reaches one in the limit.  Without weight scaling the
    constraint term leaves the shared cost and the equivalence breaks.
    """
    y = data.y
    n, t = y.shape
    sig_seq = [float(s) for s in sigma2_sequence]
    if sorted(sig_seq, reverse=True) != sig_seq:
        raise ValueError("sigma2_sequence must be decreasing")

    unit_means = y.mean(axis=1, keepdims=True)
    base = pc_kmeans(unit_means, None, KmeansConfig(k=k, n_restarts=5), rng=rng)
    alpha = np.sort(base.centroids[:, 0])  # fixed group means
    pi = rng.dirichlet(np.ones(k))
    g_other = rng.integers(0, k, size=n)

    config = KmeansConfig(k=k, c=cs.strength)
    costs = resolve_costs(cs, config)
    adjacency = _adjacency(n, costs)
    c = cs.strength

    ssq = 0.5 * ((y[:, :, None] - alpha[None, None, :]) ** 2).sum(axis=1)  # (N, K)
    agreements = []
    for s2 in sig_seq:
        agree = 0
        for i in range(n):
            pen = _unit_penalties(i, g_other, k, adjacency)
            kmeans_cost = ssq[i] + pen
            km_choice = int(np.argmin(kmeans_cost))
            if scale_weights:
                log_mass = -kmeans_cost / s2 + np.log(pi)
            else:
                # constraint tilt stays at strength c instead of c / sigma2
                partners, weights = cs.partners_of(i)
                tilt = np.zeros(k)
                if partners.size:
                    s_k = np.bincount(g_other[partners], weights=weights, minlength=k)[:k]
                    tilt = 2.0 * c * (2.0 * s_k - weights.sum())
                log_mass = -ssq[i] / s2 + tilt + np.log(pi)
            if int(np.argmax(log_mass)) == km_choice:
                agree += 1
        agreements.append(agree / n)
    return EquivalenceReport(sigma2=tuple(sig_seq), agreement=tuple(agreements),
                             weights_scaled=scale_weights)
