"""Blocked Gibbs sampler for the grouped panel model.

The model: y_it = alpha_{g_i}' x_it + gamma' z_it + eps_it with
eps_it ~ N(0, sigma2_{g_i}) (or a common sigma2 in the homoskedastic
variant).  Group assignments follow a Dirichlet-process prior, optionally
tilted by soft pairwise constraints, sampled exactly with the
slice-sampler representation (no truncation).

Update order per sweep: label housekeeping, concentration (conditioned
on the partition with sticks integrated out), group coefficients, group
variances, common coefficients, stick lengths, slice variables,
potential-group spawning, group indices.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import List, Optional

import numpy as np
from scipy.special import betaln

from .constraints import ConstraintSet
from .dp_prior import DpHyper, relabel_first_appearance
from .errors import AllZeroMassError, SingularPrecisionError
from .panel import ModelConfig, PanelDataset

LOG_2PI = math.log(2.0 * math.pi)


# ---------------------------------------------------------------------------
# Conditional posterior parameters (shared with the grid-integration oracles)
# ---------------------------------------------------------------------------

def alpha_posterior_params(xtx: np.ndarray, xty: np.ndarray, sigma2: float,
                           mu0: np.ndarray, prec0: Optional[np.ndarray]):
    """Normal conditional for a group-coefficient block.

    Posterior covariance (prec0 + xtx / sigma2)^-1 and mean
    cov @ (prec0 mu0 + xty / sigma2).  prec0=None encodes the improper
    flat prior (zero precision).
    """
    xtx = np.atleast_2d(np.asarray(xtx, dtype=float))
    xty = np.atleast_1d(np.asarray(xty, dtype=float))
    prec = xtx / sigma2
    shift = xty / sigma2
    if prec0 is not None:
        prec = prec + prec0
        shift = shift + prec0 @ mu0
    try:
        chol = np.linalg.cholesky(prec)
    except np.linalg.LinAlgError:
        raise SingularPrecisionError(
            "posterior precision for a coefficient block is not positive definite"
        ) from None
    cov = np.linalg.inv(prec)
    mean = cov @ shift
    return mean, cov, chol


def sigma2_posterior_params(ssr: float, n_obs: int, nu0: float, delta0: float):
    """Inverse-gamma conditional for an error variance:
    shape (nu0 + n_obs) / 2, scale (delta0 + ssr) / 2."""
    return (nu0 + n_obs) / 2.0, (delta0 + ssr) / 2.0


def draw_inverse_gamma(shape: float, scale: float, rng) -> float:
    return scale / rng.gamma(shape, 1.0)


def draw_mvnormal(mean: np.ndarray, cov: np.ndarray, rng) -> np.ndarray:
    chol = np.linalg.cholesky(cov)
    return mean + chol @ rng.standard_normal(mean.shape[0])


# ---------------------------------------------------------------------------
# State and chain containers
# ---------------------------------------------------------------------------

@dataclass
class SamplerState:
    """Full state of one Gibbs iteration.

    Arrays indexed by group run to k_star (active plus spawned potential
    groups); g holds 0-based labels with max label < k_active.
    """

    g: np.ndarray
    alpha: np.ndarray          # (k, p_g)
    sigma2: np.ndarray         # (k,)
    gamma: Optional[np.ndarray]
    xi: np.ndarray
    pi: np.ndarray
    u: np.ndarray
    a: float
    eta: float = 0.5
    k_active: int = 0
    k_star: int = 0


@dataclass
class PosteriorChain:
    """Thinned, canonically relabeled draws from one sampler run."""

    g: np.ndarray                     # (S, N) int
    k: np.ndarray                     # (S,) occupied-group counts
    a: np.ndarray                     # (S,)
    alpha: List[np.ndarray]           # per draw (k_s, p_g)
    sigma2: List[np.ndarray]          # per draw (k_s,)
    gamma: Optional[np.ndarray]       # (S, q_c) or None
    loglik: np.ndarray                # (S,) conditional data log-likelihood
    meta: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return self.g.shape[0]

    @property
    def n_units(self) -> int:
        return self.g.shape[1]

    def unit_coefficients(self, s: int) -> np.ndarray:
        """Per-unit coefficient rows alpha_{g_i} for stored draw s."""
        return self.alpha[s][self.g[s]]

    def unit_sigma2(self, s: int) -> np.ndarray:
        return self.sigma2[s][self.g[s]]


def resolve_design(data: PanelDataset, config: ModelConfig):
    """Split covariates into the grouped block and the common block.

    x-columns flagged as not group-specific join z in the common block.
    Returns (y, xg (N,T,p_g), zc (N,T,q_c) or None).
    """
    if len(config.group_slopes) != data.n_x:
        raise ValueError("group_slopes length must match the number of x columns")
    mask = np.asarray(config.group_slopes, dtype=bool)
    xg = data.x[:, :, mask]
    rest = data.x[:, :, ~mask]
    parts = [p for p in (data.z, rest if rest.shape[2] else None) if p is not None]
    if not parts:
        zc = None
    elif len(parts) == 1:
        zc = parts[0]
    else:
        zc = np.concatenate(parts, axis=2)
    return data.y, xg, zc


# ---------------------------------------------------------------------------
# Sampler
# ---------------------------------------------------------------------------

class GibbsSampler:
    """One single-threaded chain; share data and constraints read-only
    across chains and give each its own Generator."""

    def __init__(self, data: PanelDataset, config: ModelConfig, hyper: DpHyper,
                 constraints: Optional[ConstraintSet] = None,
                 fixed_partition: Optional[np.ndarray] = None,
                 max_groups: Optional[int] = None,
                 check_invariants: bool = False,
                 init: str = "pooled"):
        if init not in ("pooled", "unit"):
            raise ValueError("init must be 'pooled' or 'unit'")
        self.init = init
        self.y, self.xg, self.zc = resolve_design(data, config)
        self.n, self.t = self.y.shape
        self.p = self.xg.shape[2]
        self.q = 0 if self.zc is None else self.zc.shape[2]
        self.config = config
        self.hyper = hyper
        self.check_invariants = check_invariants
        self.max_groups = self.n if max_groups is None else min(max_groups, self.n)

        if hyper.mu_alpha.shape[0] != self.p:
            raise ValueError("hyper.mu_alpha length must match grouped covariates")
        self.prec0 = None if hyper.Sigma_alpha is None else np.linalg.inv(hyper.Sigma_alpha)
        if self.q:
            sg = hyper.Sigma_gamma if hyper.Sigma_gamma is not None else np.eye(self.q)
            if sg.shape != (self.q, self.q):
                raise ValueError("Sigma_gamma shape must match common covariates")
            self.prec_gamma0 = np.linalg.inv(sg)
        else:
            self.prec_gamma0 = None

        self.cs = constraints if (constraints is not None and constraints.is_informative) else None
        if self.cs is not None and self.cs.n_units != self.n:
            raise ValueError("constraint set sized for a different panel")

        self.fixed_partition = None
        if fixed_partition is not None:
            fp = relabel_first_appearance(np.asarray(fixed_partition))
            if fp.shape[0] != self.n:
                raise ValueError("fixed partition length must be N")
            self.fixed_partition = fp
        if hyper.Sigma_alpha is None and self.fixed_partition is None:
            raise ValueError("flat coefficient prior requires a frozen partition")

        # x_i'x_i per unit, reused by every coefficient update
        self.unit_xtx = np.einsum("itp,itq->ipq", self.xg, self.xg)

    # -- initialization ------------------------------------------------------

    def _init_common(self):
        """Within-transformed OLS for the common coefficients.

        Demeaning by unit sweeps out every group-level shift, so the
        starting slope does not soak up the group structure the way
        pooled OLS would (a pooled start can park the chain in a
        one-group mode).  Returns (gamma0, s2) with s2 the within
        residual variance.
        """
        y_w = self.y - self.y.mean(axis=1, keepdims=True)
        if not self.q:
            dof = max(1, y_w.size - self.n)
            return np.empty(0), max(float((y_w**2).sum()) / dof, 1e-8)
        z_w = self.zc - self.zc.mean(axis=1, keepdims=True)
        design = z_w.reshape(self.n * self.t, self.q)
        yvec = y_w.reshape(-1)
        x_w = self.xg - self.xg.mean(axis=1, keepdims=True)
        extra = x_w.reshape(self.n * self.t, self.p)
        keep = np.ptp(extra, axis=0) > 1e-12
        full = np.hstack([design, extra[:, keep]])
        coef, _, _, _ = np.linalg.lstsq(full, yvec, rcond=None)
        resid = yvec - full @ coef
        dof = max(1, yvec.size - full.shape[1] - self.n)
        return coef[: self.q], max(float(resid @ resid) / dof, 1e-8)

    def init_state(self, rng) -> SamplerState:
        """Start from N singleton groups (or the frozen partition).

        Common coefficients initialize at the within estimator; a pooled
        start there parks dynamic panels in a one-group near-unit-root
        mode that single-site moves cannot leave.  Grouped coefficients
        initialize pooled plus jitter (default), leaving the burn-in to
        discover the grouping from near-exchangeable beginnings, or at
        each starting group's conjugate posterior mean (init='unit'),
        which seeds the search at the data's own heterogeneity.
        """
        gamma0, s2 = self._init_common()
        if self.fixed_partition is not None:
            g = self.fixed_partition.copy()
        else:
            g = np.arange(self.n, dtype=np.int64)
        k0 = int(g.max()) + 1
        gamma = gamma0 if self.q else None
        ytil = self.y - self.zc @ gamma if self.q else self.y
        alpha = np.empty((k0, self.p))
        if self.init == "unit" or self.fixed_partition is not None:
            for kk in range(k0):
                members = np.flatnonzero(g == kk)
                xtx = self.unit_xtx[members].sum(axis=0)
                xty = np.einsum("itp,it->p", self.xg[members], ytil[members])
                mean, _, _ = alpha_posterior_params(xtx, xty, s2,
                                                    self.hyper.mu_alpha, self.prec0)
                alpha[kk] = mean
        else:
            xtx = self.unit_xtx.sum(axis=0)
            xty = np.einsum("itp,it->p", self.xg, ytil)
            pooled, _, _ = alpha_posterior_params(xtx, xty, s2,
                                                  self.hyper.mu_alpha, self.prec0)
            jitter = 0.1 * np.abs(pooled)
            alpha[:] = pooled + jitter * rng.standard_normal((k0, self.p))
        sigma2 = np.full(k0, s2)
        a = self.hyper.a_prior_mean
        xi = rng.beta(1.0, a, size=k0)
        one_minus = np.concatenate(([1.0], np.cumprod(1.0 - xi)[:-1]))
        pi = xi * one_minus
        u = np.zeros(self.n)
        return SamplerState(g=g, alpha=alpha, sigma2=sigma2, gamma=gamma, xi=xi,
                            pi=pi, u=u, a=a, k_active=k0, k_star=k0)

    # -- blocks ---------------------------------------------------------------

    def residual_outcome(self, state: SamplerState) -> np.ndarray:
        """y with the common-coefficient part removed."""
        if self.q:
            return self.y - self.zc @ state.gamma
        return self.y

    def update_alpha(self, state: SamplerState, rng, ytil: np.ndarray) -> None:
        k = state.k_active
        for kk in range(k):
            members = np.flatnonzero(state.g == kk)
            if members.size == 0:
                state.alpha[kk] = draw_mvnormal(self.hyper.mu_alpha,
                                                self.hyper.Sigma_alpha, rng)
                continue
            s2 = float(state.sigma2[kk])
            xtx = self.unit_xtx[members].sum(axis=0)
            xty = np.einsum("itp,it->p", self.xg[members], ytil[members])
            mean, cov, _ = alpha_posterior_params(xtx, xty, s2, self.hyper.mu_alpha,
                                                  self.prec0)
            state.alpha[kk] = draw_mvnormal(mean, cov, rng)

    def update_sigma2(self, state: SamplerState, rng, ytil: np.ndarray) -> None:
        k = state.k_active
        resid = ytil - np.einsum("itp,ip->it", self.xg, state.alpha[state.g])
        unit_ssr = np.einsum("it,it->i", resid, resid)
        nu0, d0 = self.hyper.nu_sigma, self.hyper.delta_sigma
        if self.config.heteroskedastic:
            ssr_k = np.bincount(state.g, weights=unit_ssr, minlength=k)
            n_k = np.bincount(state.g, minlength=k) * self.t
            for kk in range(k):
                shape, scale = sigma2_posterior_params(ssr_k[kk], int(n_k[kk]), nu0, d0)
                state.sigma2[kk] = draw_inverse_gamma(shape, scale, rng)
        else:
            shape, scale = sigma2_posterior_params(float(unit_ssr.sum()),
                                                   self.n * self.t, nu0, d0)
            state.sigma2[:k] = draw_inverse_gamma(shape, scale, rng)

    def update_gamma(self, state: SamplerState, rng) -> None:
        if not self.q:
            return
        s2_units = state.sigma2[state.g]
        zw = self.zc / s2_units[:, None, None]
        prec = self.prec_gamma0 + np.einsum("itp,itq->pq", zw, self.zc)
        resid = self.y - np.einsum("itp,ip->it", self.xg, state.alpha[state.g])
        shift = np.einsum("itp,it->p", zw, resid)
        cov = np.linalg.inv(prec)
        state.gamma = draw_mvnormal(cov @ shift, cov, rng)

    def update_sticks(self, state: SamplerState, rng) -> None:
        k = state.k_active
        counts = np.bincount(state.g, minlength=k).astype(float)
        above = counts[::-1].cumsum()[::-1]
        above = np.concatenate((above[1:], [0.0]))  # units in higher-indexed groups
        xi = rng.beta(counts + 1.0, state.a + above)
        one_minus = np.concatenate(([1.0], np.cumprod(1.0 - xi)[:-1]))
        state.xi = xi
        state.pi = xi * one_minus

    def update_slice(self, state: SamplerState, rng) -> None:
        state.u = rng.uniform(0.0, state.pi[state.g])

    def update_concentration(self, state: SamplerState, rng) -> None:
        # the Escobar-West conditional depends on the partition through the
        # number of occupied blocks, not the largest label in use
        m, nrate = self.hyper.gamma_shape, self.hyper.gamma_rate
        k_a = int(np.unique(state.g).size)
        eta = rng.beta(state.a + 1.0, self.n)
        rate = nrate - math.log(eta)
        odds = (m + k_a - 1.0) / (self.n * rate)
        pi_a = odds / (1.0 + odds)
        shape = m + k_a if rng.random() < pi_a else m + k_a - 1.0
        state.eta = eta
        state.a = rng.gamma(shape, 1.0 / rate)

    def spawn_potential_groups(self, state: SamplerState, rng) -> None:
        """Extend sticks and group parameters until the represented mass
        exceeds 1 - u*, drawing new entries from their priors.  Capped at
        one group per unit."""
        u_star = float(state.u.min())
        xi = list(state.xi)
        pi = list(state.pi)
        alpha_new = []
        sigma2_new = []
        leftover = float(np.prod(1.0 - state.xi))
        common_s2 = float(state.sigma2[0])
        while sum(pi) <= 1.0 - u_star and len(pi) < self.max_groups:
            xi_k = rng.beta(1.0, state.a)
            pi.append(xi_k * leftover)
            leftover *= 1.0 - xi_k
            xi.append(xi_k)
            alpha_new.append(draw_mvnormal(self.hyper.mu_alpha, self.hyper.Sigma_alpha, rng))
            if self.config.heteroskedastic:
                sigma2_new.append(
                    draw_inverse_gamma(self.hyper.nu_sigma / 2.0,
                                       self.hyper.delta_sigma / 2.0, rng)
                )
            else:
                sigma2_new.append(common_s2)
        state.xi = np.asarray(xi)
        state.pi = np.asarray(pi)
        if alpha_new:
            state.alpha = np.vstack([state.alpha, np.asarray(alpha_new)])
            state.sigma2 = np.concatenate([state.sigma2, np.asarray(sigma2_new)])
        state.k_star = state.pi.shape[0]
        if self.check_invariants and state.k_star < self.max_groups:
            if state.k_active > state.k_star:
                raise AssertionError("active groups exceed represented groups")
            if 1.0 - state.pi.sum() >= u_star:
                raise AssertionError("represented mass below the slice threshold")

    def update_partition(self, state: SamplerState, rng) -> None:
        """Sequential multinomial redraw of every group index.

        Mass over k <= K*: likelihood x slice indicator x constraint
        term, the last evaluated against the latest indices of all other
        units and skipped entirely when no informative constraint exists.
        """
        k_star = state.k_star
        alpha_t = state.alpha[:k_star].T  # (p, K*)
        sigma2 = state.sigma2[:k_star]
        pi = state.pi
        log_norm = -0.5 * self.t * (LOG_2PI + np.log(sigma2))
        inv_two_s2 = 0.5 / sigma2
        ytil = self.residual_outcome(state)
        g = state.g
        u = state.u
        cs = self.cs
        two_c = 2.0 * cs.strength if cs is not None else 0.0
        for i in range(self.n):
            resid = ytil[i][:, None] - self.xg[i] @ alpha_t  # (T, K*)
            ssr = np.einsum("tk,tk->k", resid, resid)
            log_mass = log_norm - ssr * inv_two_s2
            if cs is not None:
                partners, weights = cs.partners_of(i)
                if partners.size:
                    s_k = np.bincount(g[partners], weights=weights, minlength=k_star)
                    log_mass = log_mass + two_c * (2.0 * s_k[:k_star] - weights.sum())
            feasible = pi >= u[i]
            if not feasible.any():
                raise AllZeroMassError(
                    f"unit {i}: slice variable exceeds every group probability"
                )
            log_mass = np.where(feasible, log_mass, -np.inf)
            probs = np.exp(log_mass - log_mass.max())
            cum = np.cumsum(probs)
            g[i] = int(np.searchsorted(cum, rng.random() * cum[-1], side="right"))
        state.k_active = int(g.max()) + 1

    # -- sweep / run -----------------------------------------------------------

    def compact_labels(self, state: SamplerState, rng) -> None:
        """Bound label drift without breaking the chain's target law.

        Trailing unoccupied labels carry pure-prior sticks and truncate
        freely.  Interior reordering is done by Metropolis swaps of
        adjacent labels under the stick-marginalized partition law
        (deterministic relabeling is not an invariant move; a Geweke run
        flags it): for labels j, j+1 with counts n1, n2 and A units above
        both, the swap odds are

            B(n2+1, a+n1+A) B(n1+1, a+A) / [B(n1+1, a+n2+A) B(n2+1, a+A)],

        which favors larger blocks at lower labels and bubbles empty
        labels upward until truncation removes them.
        """
        k = int(state.g.max()) + 1
        state.alpha = state.alpha[:k]
        state.sigma2 = state.sigma2[:k]
        if k > 1:
            counts = np.bincount(state.g, minlength=k).astype(float)
            a = state.a
            above = 0.0  # mass in labels > j+1, fixed for the rest of the scan
            for j in range(k - 2, -1, -1):
                n1, n2 = counts[j], counts[j + 1]
                if n1 != n2:
                    log_ratio = (
                        betaln(n2 + 1, a + n1 + above)
                        + betaln(n1 + 1, a + above)
                        - betaln(n1 + 1, a + n2 + above)
                        - betaln(n2 + 1, a + above)
                    )
                    if math.log(rng.random()) < log_ratio:
                        sel1 = state.g == j
                        sel2 = state.g == j + 1
                        state.g[sel1] = j + 1
                        state.g[sel2] = j
                        state.alpha[[j, j + 1]] = state.alpha[[j + 1, j]]
                        state.sigma2[[j, j + 1]] = state.sigma2[[j + 1, j]]
                        counts[[j, j + 1]] = counts[[j + 1, j]]
                above += counts[j + 1]
            k = int(state.g.max()) + 1
            state.alpha = state.alpha[:k]
            state.sigma2 = state.sigma2[:k]
        state.k_active = k

    def sweep(self, state: SamplerState, rng) -> None:
        if self.fixed_partition is not None:
            ytil = self.residual_outcome(state)
            self.update_alpha(state, rng, ytil)
            self.update_sigma2(state, rng, ytil)
            self.update_gamma(state, rng)
            return
        self.compact_labels(state, rng)
        # The concentration draw is the Escobar-West conditional given the
        # partition with stick lengths integrated out, so it must come
        # before sticks are drawn for this sweep; drawing sticks first and
        # then treating them as marginal biases the concentration chain
        # (a Geweke successive-conditional run flags it at 5 sigma).
        self.update_concentration(state, rng)
        ytil = self.residual_outcome(state)
        self.update_alpha(state, rng, ytil)
        self.update_sigma2(state, rng, ytil)
        self.update_gamma(state, rng)
        self.update_sticks(state, rng)
        self.update_slice(state, rng)
        if self.check_invariants:
            if np.any(state.u > state.pi[state.g]):
                raise AssertionError("slice variable above its group probability")
        self.spawn_potential_groups(state, rng)
        self.update_partition(state, rng)

    def log_likelihood(self, state: SamplerState) -> float:
        """Conditional data log-likelihood at the current state."""
        resid = self.residual_outcome(state) - np.einsum(
            "itp,ip->it", self.xg, state.alpha[state.g]
        )
        s2 = state.sigma2[state.g]
        return float(
            -0.5 * self.t * np.sum(LOG_2PI + np.log(s2))
            - np.sum(np.einsum("it,it->i", resid, resid) / (2.0 * s2))
        )

    def store(self, state: SamplerState):
        """Canonically relabeled snapshot of the occupied groups."""
        uniq, first, inverse = np.unique(state.g, return_index=True, return_inverse=True)
        appearance = np.argsort(first, kind="stable")
        rank = np.empty(uniq.size, dtype=np.int64)
        rank[appearance] = np.arange(uniq.size)
        g_c = rank[inverse]
        order = uniq[appearance]
        return (
            g_c,
            state.alpha[order].copy(),
            state.sigma2[order].copy(),
            None if state.gamma is None else state.gamma.copy(),
            float(state.a),
            self.log_likelihood(state),
        )

    def run(self, n_burn: int, n_keep: int, rng, thin: int = 1) -> PosteriorChain:
        if n_burn < 0 or n_keep < 0 or thin < 1:
            raise ValueError("n_burn, n_keep must be >= 0 and thin >= 1")
        state = self.init_state(rng)
        for _ in range(n_burn):
            self.sweep(state, rng)
        g_draws = np.empty((n_keep, self.n), dtype=np.int32)
        k_draws = np.empty(n_keep, dtype=np.int32)
        a_draws = np.empty(n_keep)
        ll_draws = np.empty(n_keep)
        alpha_draws: List[np.ndarray] = []
        sigma2_draws: List[np.ndarray] = []
        gamma_draws = np.empty((n_keep, self.q)) if self.q else None
        for s in range(n_keep):
            for _ in range(thin):
                self.sweep(state, rng)
            g_c, alpha_c, sigma2_c, gamma_c, a_val, ll = self.store(state)
            g_draws[s] = g_c
            k_draws[s] = alpha_c.shape[0]
            a_draws[s] = a_val
            ll_draws[s] = ll
            alpha_draws.append(alpha_c)
            sigma2_draws.append(sigma2_c)
            if gamma_draws is not None:
                gamma_draws[s] = gamma_c
        return PosteriorChain(
            g=g_draws, k=k_draws, a=a_draws, alpha=alpha_draws,
            sigma2=sigma2_draws, gamma=gamma_draws, loglik=ll_draws,
            meta={
                "n_burn": n_burn, "n_keep": n_keep, "thin": thin,
                "n_units": self.n, "n_periods": self.t,
                "p_grouped": self.p, "q_common": self.q,
                "heteroskedastic": self.config.heteroskedastic,
                "constrained": self.cs is not None,
                "strength": None if self.cs is None else self.cs.strength,
                "init": self.init,
                "frozen_partition": self.fixed_partition is not None,
            },
        )


def run_chain(data: PanelDataset, config: ModelConfig, hyper: DpHyper,
              n_burn: int, n_keep: int, rng,
              constraints: Optional[ConstraintSet] = None,
              fixed_partition: Optional[np.ndarray] = None,
              thin: int = 1, check_invariants: bool = False,
              init: str = "pooled") -> PosteriorChain:
    """Convenience wrapper: build a sampler and run one chain."""
    sampler = GibbsSampler(data, config, hyper, constraints=constraints,
                           fixed_partition=fixed_partition,
                           check_invariants=check_invariants, init=init)
    return sampler.run(n_burn, n_keep, rng, thin=thin)
