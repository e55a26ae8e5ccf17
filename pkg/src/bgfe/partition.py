"""Posterior similarity matrix and the partition point estimate.

The point estimate minimizes the posterior expected Variation of
Information, evaluated through its similarity-matrix lower-bound
objective over the stored draws, then refined by single-unit greedy
moves.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .dp_prior import GroupPartition
from .errors import EmptyChainError, LengthMismatchError
from .gibbs import PosteriorChain


def compute_psm(chain: PosteriorChain) -> np.ndarray:
    """Pairwise co-grouping frequencies over stored draws: symmetric,
    unit diagonal, entries in [0, 1]."""
    if len(chain) == 0:
        raise EmptyChainError("cannot build a similarity matrix from an empty chain")
    n = chain.n_units
    counts = np.zeros((n, n))
    for s in range(len(chain)):
        g = chain.g[s]
        counts += np.equal.outer(g, g)
    psm = counts / len(chain)
    np.fill_diagonal(psm, 1.0)
    return psm


def _entropy_bits(sizes: np.ndarray, n: int) -> float:
    p = sizes[sizes > 0] / n
    return float(-(p * np.log2(p)).sum())


def variation_of_information(g1, g2) -> float:
    """Entropy-based distance between two partitions, in bits.

    VI = -H(G1) - H(G2) + 2 H(G1 ^ G2) with log base 2; zero exactly when
    the partitions agree up to relabeling, and a metric on that quotient.
    """
    a = g1.g if isinstance(g1, GroupPartition) else np.asarray(g1)
    b = g2.g if isinstance(g2, GroupPartition) else np.asarray(g2)
    if a.shape[0] != b.shape[0]:
        raise LengthMismatchError("partitions cover different numbers of units")
    n = a.shape[0]
    ka, kb = int(a.max()) + 1, int(b.max()) + 1
    joint = np.bincount(a * kb + b, minlength=ka * kb).astype(float)
    h_joint = _entropy_bits(joint, n)
    h_a = _entropy_bits(np.bincount(a).astype(float), n)
    h_b = _entropy_bits(np.bincount(b).astype(float), n)
    return max(0.0, 2.0 * h_joint - h_a - h_b)


def vi_objective(g, psm: np.ndarray) -> float:
    """Similarity-matrix objective whose argmin approximates the
    VI-optimal partition:

        sum_i log2 |{j: g_j = g_i}| - 2 sum_i log2 sum_j psm_ij 1(g_j = g_i).

    Invariant to relabeling of g.
    """
    labels = g.g if isinstance(g, GroupPartition) else np.asarray(g)
    k = int(labels.max()) + 1
    onehot = np.zeros((labels.shape[0], k))
    onehot[np.arange(labels.shape[0]), labels] = 1.0
    sizes = onehot.sum(axis=0)
    s = psm @ onehot
    own = s[np.arange(labels.shape[0]), labels]
    return float(np.log2(sizes[labels]).sum() - 2.0 * np.log2(own).sum())


@dataclass(frozen=True)
class PartitionEstimate:
    g_star: GroupPartition
    vi_score: float
    candidate_source: str


class _GreedyState:
    """Incrementally maintained objective for single-unit moves."""

    def __init__(self, g: np.ndarray, psm: np.ndarray):
        self.psm = psm
        self.n = g.shape[0]
        self.g = g.copy()
        self.k = int(g.max()) + 1
        self.sizes = np.bincount(self.g, minlength=self.k).astype(float)
        onehot = np.zeros((self.n, self.k))
        onehot[np.arange(self.n), self.g] = 1.0
        self.s = psm @ onehot  # s[j, k] = sum_i psm_ji over members of k

    def objective(self) -> float:
        idx = np.arange(self.n)
        return float(
            np.log2(self.sizes[self.g]).sum()
            - 2.0 * np.log2(self.s[idx, self.g]).sum()
        )

    def move_delta(self, i: int, dest: int) -> float:
        """Objective change from moving unit i to group dest (may equal
        self.k for a fresh singleton group)."""
        src = self.g[i]
        if dest == src:
            return 0.0
        psm_i = self.psm[:, i]
        n_src, n_dst = self.sizes[src], self.sizes[dest] if dest < self.k else 0.0
        delta = 0.0
        members_src = np.flatnonzero(self.g == src)
        members_src = members_src[members_src != i]
        if members_src.size:
            delta += members_src.size * (np.log2(n_src - 1.0) - np.log2(n_src))
            s_old = self.s[members_src, src]
            delta -= 2.0 * (np.log2(s_old - psm_i[members_src]) - np.log2(s_old)).sum()
        if dest < self.k:
            members_dst = np.flatnonzero(self.g == dest)
            delta += members_dst.size * (np.log2(n_dst + 1.0) - np.log2(n_dst))
            s_old = self.s[members_dst, dest]
            delta -= 2.0 * (np.log2(s_old + psm_i[members_dst]) - np.log2(s_old)).sum()
            own_new = self.s[i, dest] + self.psm[i, i]
        else:
            own_new = self.psm[i, i]
        delta += np.log2(n_dst + 1.0) - np.log2(n_src)
        delta -= 2.0 * (np.log2(own_new) - np.log2(self.s[i, src]))
        return float(delta)

    def apply_move(self, i: int, dest: int) -> None:
        src = self.g[i]
        psm_i = self.psm[:, i]
        if dest == self.k:
            self.s = np.hstack([self.s, np.zeros((self.n, 1))])
            self.sizes = np.append(self.sizes, 0.0)
            self.k += 1
        self.s[:, src] -= psm_i
        self.s[:, dest] += psm_i
        self.sizes[src] -= 1.0
        self.sizes[dest] += 1.0
        self.g[i] = dest

    def compact(self) -> np.ndarray:
        return self.g.copy()


def greedy_refine(g: np.ndarray, psm: np.ndarray, max_passes: int = 50):
    """Single-unit reassignment passes until no move improves the
    objective.  Monotone by construction; returns (labels, objective)."""
    state = _GreedyState(np.asarray(g), psm)
    best = state.objective()
    for _ in range(max_passes):
        improved = False
        for i in range(state.n):
            candidates = [k for k in range(state.k) if state.sizes[k] > 0]
            if state.sizes[state.g[i]] > 1:
                candidates.append(state.k)  # fresh singleton
            deltas = [(state.move_delta(i, k), k) for k in candidates if k != state.g[i]]
            if not deltas:
                continue
            delta, dest = min(deltas)
            if delta < -1e-12:
                state.apply_move(i, dest)
                new_obj = best + delta
                assert new_obj <= best + 1e-9, "greedy move increased the objective"
                best = new_obj
                improved = True
        if not improved:
            break
    return state.compact(), state.objective()


def point_estimate_partition(chain: PosteriorChain,
                             psm: Optional[np.ndarray] = None,
                             refine: bool = True) -> PartitionEstimate:
    """Partition minimizing the similarity-matrix objective.

    Candidates are the stored draws (ties broken by earliest draw index)
    followed by greedy single-unit refinement, which can only lower the
    objective relative to the best draw.
    """
    if len(chain) == 0:
        raise EmptyChainError("cannot estimate a partition from an empty chain")
    if psm is None:
        psm = compute_psm(chain)
    scores = np.array([vi_objective(chain.g[s], psm) for s in range(len(chain))])
    best_idx = int(np.argmin(scores))
    g_best = chain.g[best_idx].astype(np.int64)
    source = f"draw {best_idx}"
    score = float(scores[best_idx])
    if refine:
        g_ref, score_ref = greedy_refine(g_best, psm)
        if score_ref < score - 1e-12:
            g_best, score, source = g_ref, score_ref, f"draw {best_idx} + greedy"
    return PartitionEstimate(
        g_star=GroupPartition(g_best), vi_score=score, candidate_source=source
    )
