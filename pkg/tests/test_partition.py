
import numpy as np
import pytest

from bgfe.dp_prior import GroupPartition, all_partitions
from bgfe.errors import EmptyChainError, LengthMismatchError
from bgfe.gibbs import PosteriorChain
from bgfe.partition import (
    compute_psm,
    greedy_refine,
    point_estimate_partition,
    variation_of_information,
    vi_objective,
)


def _chain_from_draws(draws):
    draws = np.asarray(draws, dtype=np.int32)
    s, n = draws.shape
    return PosteriorChain(
        g=draws,
        k=np.array([d.max() + 1 for d in draws], dtype=np.int32),
        a=np.ones(s),
        alpha=[np.zeros((d.max() + 1, 1)) for d in draws],
        sigma2=[np.ones(d.max() + 1) for d in draws],
        gamma=None,
        loglik=np.zeros(s),
    )


class TestPsm:
    def test_degenerate_chain(self):
        chain = _chain_from_draws([[0, 0, 1, 1]] * 4)
        psm = compute_psm(chain)
        expect = np.array([
            [1, 1, 0, 0], [1, 1, 0, 0], [0, 0, 1, 1], [0, 0, 1, 1]
        ], dtype=float)
        assert np.array_equal(psm, expect)

    def test_two_draw_average(self):
        chain = _chain_from_draws([[0, 0, 1], [0, 1, 1]])
        psm = compute_psm(chain)
        assert psm[0, 1] == 0.5
        assert psm[1, 2] == 0.5
        assert psm[0, 2] == 0.0
        assert np.allclose(np.diag(psm), 1.0)

    def test_empty_chain_rejected(self):
        chain = _chain_from_draws(np.zeros((0, 3), dtype=int).reshape(0, 3))
        with pytest.raises(EmptyChainError):
            compute_psm(chain)


class TestVariationOfInformation:
    def test_identical_partitions(self):
        g = np.array([0, 1, 1, 2])
        assert variation_of_information(g, g) == 0.0
        relabeled = np.array([2, 0, 0, 1])
        assert variation_of_information(g, relabeled) == 0.0

    def test_hand_computed_crossing(self):
        # two balanced 2-blocks crossing each other: -1 - 1 + 2*2 = 2 bits
        g1 = np.array([0, 0, 1, 1])
        g2 = np.array([0, 1, 0, 1])
        assert variation_of_information(g1, g2) == pytest.approx(2.0)

    def test_one_block_vs_singletons(self):
        g1 = np.zeros(4, dtype=int)
        g2 = np.arange(4)
        assert variation_of_information(g1, g2) == pytest.approx(2.0)

    def test_length_mismatch(self):
        with pytest.raises(LengthMismatchError):
            variation_of_information(np.zeros(3, dtype=int), np.zeros(4, dtype=int))

    def test_metric_properties_exhaustive_n5(self):
        parts = [GroupPartition(g) for g in all_partitions(5)]
        m = len(parts)
        dist = np.empty((m, m))
        for i in range(m):
            for j in range(m):
                dist[i, j] = variation_of_information(parts[i], parts[j])
        assert np.allclose(dist, dist.T)
        assert np.all(np.diag(dist) == 0)
        off = dist[~np.eye(m, dtype=bool)]
        assert np.all(off > 0)
        for b in range(m):
            lhs = dist  # d(a, c)
            rhs = dist[:, b][:, None] + dist[b, :][None, :]
            assert np.all(lhs <= rhs + 1e-9)


class TestPointEstimate:
    def test_degenerate_chain_recovers_partition(self):
        chain = _chain_from_draws([[0, 0, 1, 1, 2]] * 6)
        est = point_estimate_partition(chain)
        assert est.g_star == GroupPartition(np.array([0, 0, 1, 1, 2]))

    def test_objective_matches_hand_computation(self):
        chain = _chain_from_draws([[0, 0, 1], [0, 1, 1]])
        psm = compute_psm(chain)
        g = np.array([0, 0, 1])
        sizes = np.array([2, 2, 1])
        by_hand = 0.0
        for i in range(3):
            cnt = sum(1 for j in range(3) if g[j] == g[i])
            s = sum(psm[i, j] for j in range(3) if g[j] == g[i])
            by_hand += np.log2(cnt) - 2 * np.log2(s)
        assert vi_objective(g, psm) == pytest.approx(by_hand)

    def test_objective_invariant_to_relabeling(self):
        rng = np.random.default_rng(0)
        draws = rng.integers(0, 3, size=(20, 6))
        chain = _chain_from_draws(draws)
        psm = compute_psm(chain)
        g = np.array([0, 1, 0, 2, 1, 2])
        relabeled = np.array([2, 0, 2, 1, 0, 1])
        assert vi_objective(g, psm) == pytest.approx(vi_objective(relabeled, psm))

    def test_greedy_never_increases(self):
        rng = np.random.default_rng(1)
        draws = rng.integers(0, 3, size=(40, 8))
        chain = _chain_from_draws(draws)
        psm = compute_psm(chain)
        start = rng.integers(0, 3, size=8)
        refined, obj = greedy_refine(start, psm)
        assert obj <= vi_objective(start, psm) + 1e-9

    def test_matches_exhaustive_minimum_small_chains(self):
        rng = np.random.default_rng(2)
        for trial in range(6):
            n = 7
            truth = rng.integers(0, 3, size=n)
            draws = []
            for _ in range(30):
                d = truth.copy()
                # sprinkle a little disagreement
                for i in range(n):
                    if rng.random() < 0.15:
                        d[i] = rng.integers(0, 3)
                draws.append(d)
            chain = _chain_from_draws(draws)
            psm = compute_psm(chain)
            est = point_estimate_partition(chain, psm)
            best = min(vi_objective(g, psm) for g in all_partitions(n))
            assert est.vi_score == pytest.approx(best, abs=1e-9)

    def test_tie_breaks_to_earliest_draw(self):
        chain = _chain_from_draws([[0, 0, 1, 1], [0, 1, 0, 1]])
        est = point_estimate_partition(chain, refine=False)
        assert est.candidate_source == "draw 0"
