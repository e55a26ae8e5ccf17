"""Soft pairwise constraints between panel units.

A constraint states that two units are likely to share a group
(positive link, type +1) or to sit in different groups (negative link,
type -1), with a stated accuracy psi in [0.5, 1).  Accuracy maps to a
log-odds weight; a global strength multiplier c scales every weight at
once.  Throughout the package the pair sum in the tilted partition
probability runs over ordered pairs, so each stored (unordered)
constraint enters joint expressions twice and per-unit conditionals with
a factor 2.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .errors import AccuracyOutOfRangeError, UnknownUnitError

POSITIVE_LINK = 1
NEGATIVE_LINK = -1

#: Stand-in accuracy for a constraint meant to be imposed outright.
#: Keeps every weight finite while making the prior odds ~ 1e6 per pair.
NEAR_HARD_ACCURACY = 1.0 - 1e-6


def weight_from(ctype: int, accuracy: float) -> float:
    """Log-odds weight of a constraint: T * ln(psi / (1 - psi)).

    Positive for positive links, negative for negative links, zero at
    psi = 0.5 (a coin-flip carries no information).
    """
    if ctype not in (POSITIVE_LINK, NEGATIVE_LINK):
        raise ValueError(f"constraint type must be +1 or -1, got {ctype!r}")
    if not (0.5 <= accuracy < 1.0):
        raise AccuracyOutOfRangeError(
            f"accuracy must lie in [0.5, 1), got {accuracy!r}; represent a hard "
            f"constraint with a finite value such as {NEAR_HARD_ACCURACY}"
        )
    return ctype * math.log(accuracy / (1.0 - accuracy))


@dataclass(frozen=True)
class PairwiseConstraint:
    """One soft link between units i and j (unordered, i != j)."""

    i: int
    j: int
    ctype: int
    accuracy: float

    def __post_init__(self):
        if self.i == self.j:
            raise ValueError("a constraint needs two distinct units")
        a, b = sorted((int(self.i), int(self.j)))
        object.__setattr__(self, "i", a)
        object.__setattr__(self, "j", b)
        weight_from(self.ctype, self.accuracy)  # validates both fields

    @property
    def weight(self) -> float:
        return weight_from(self.ctype, self.accuracy)


class ConstraintSet:
    """Sparse symmetric collection of pairwise weights plus a strength c.

    Immutable after construction; safe to share across chains.
    """

    def __init__(self, n_units: int, constraints: Sequence[PairwiseConstraint] = (),
                 strength: float = 1.0):
        if strength < 0:
            raise ValueError("strength c must be nonnegative")
        self.n_units = int(n_units)
        self.strength = float(strength)
        self.constraints: Tuple[PairwiseConstraint, ...] = tuple(constraints)
        seen = set()
        for con in self.constraints:
            if not (0 <= con.i < n_units and 0 <= con.j < n_units):
                raise ValueError(f"constraint ({con.i},{con.j}) outside 0..{n_units - 1}")
            key = (con.i, con.j)
            if key in seen:
                raise ValueError(f"more than one constraint for pair {key}")
            seen.add(key)
        # per-unit adjacency for the sampler's inner loop
        partners: List[List[int]] = [[] for _ in range(self.n_units)]
        weights: List[List[float]] = [[] for _ in range(self.n_units)]
        for con in self.constraints:
            w = con.weight
            partners[con.i].append(con.j)
            weights[con.i].append(w)
            partners[con.j].append(con.i)
            weights[con.j].append(w)
        self._partners = [np.asarray(p, dtype=np.intp) for p in partners]
        self._weights = [np.asarray(w, dtype=float) for w in weights]

    def __len__(self) -> int:
        return len(self.constraints)

    @property
    def is_informative(self) -> bool:
        """False when the tilt is exactly neutral (no pairs, all psi=0.5 or c=0)."""
        if self.strength == 0.0 or not self.constraints:
            return False
        return any(w.size and np.any(w != 0.0) for w in self._weights)

    def partners_of(self, i: int):
        """(partner indices, weights) arrays for unit i."""
        return self._partners[i], self._weights[i]

    def weight_matrix(self) -> np.ndarray:
        """Dense symmetric N x N weight matrix with zero diagonal."""
        w = np.zeros((self.n_units, self.n_units))
        for con in self.constraints:
            w[con.i, con.j] = w[con.j, con.i] = con.weight
        return w

    def with_strength(self, c: float) -> "ConstraintSet":
        return ConstraintSet(self.n_units, self.constraints, strength=c)

    def counts(self) -> Tuple[int, int]:
        """(number of positive links, number of negative links)."""
        n_pl = sum(1 for c in self.constraints if c.ctype == POSITIVE_LINK)
        return n_pl, len(self.constraints) - n_pl


def empty_constraints(n_units: int, strength: float = 1.0) -> ConstraintSet:
    return ConstraintSet(n_units, (), strength)


def log_constraint_term(cs: Optional[ConstraintSet], i: int, g: np.ndarray) -> float:
    """Log prior contribution of unit i's constraints under assignment g.

    Equals sum_j 2c W_ij delta_ij with delta_ij = +1 when g[i] == g[j]
    and -1 otherwise; the factor 2 reflects that the joint tilt sums
    ordered pairs, so conditioning on unit i picks up both (i, j) and
    (j, i).  Exactly 0 for an unconstrained unit.
    """
    if cs is None:
        return 0.0
    partners, weights = cs.partners_of(i)
    if partners.size == 0:
        return 0.0
    same = g[partners] == g[i]
    return 2.0 * cs.strength * float(np.sum(np.where(same, weights, -weights)))


def log_tilt(cs: Optional[ConstraintSet], g: np.ndarray) -> float:
    """Joint log tilt c * sum_{ordered pairs} W_ij delta_ij(g).

    Each stored constraint contributes twice (once per direction).
    """
    if cs is None:
        return 0.0
    total = 0.0
    for con in cs.constraints:
        delta = 1.0 if g[con.i] == g[con.j] else -1.0
        total += con.weight * delta
    return 2.0 * cs.strength * total


def constraints_from_pregrouping(prior_groups: Dict[int, object], psi_pl: float,
                                 psi_nl: float, n_units: int,
                                 strength: float = 1.0) -> ConstraintSet:
    """Build constraints from a (possibly partial) preliminary grouping.

    Every pair of labeled units gets one constraint: a positive link when
    the preliminary labels agree, a negative link otherwise.  Pairs with
    at least one unlabeled unit stay unconstrained.
    """
    labeled = sorted(prior_groups)
    constraints = []
    for a_pos, i in enumerate(labeled):
        gi = prior_groups[i]
        for j in labeled[a_pos + 1 :]:
            if gi == prior_groups[j]:
                constraints.append(PairwiseConstraint(i, j, POSITIVE_LINK, psi_pl))
            else:
                constraints.append(PairwiseConstraint(i, j, NEGATIVE_LINK, psi_nl))
    return ConstraintSet(n_units, constraints, strength)


def accuracy_from_expert_draw(rng, correct: bool) -> float:
    """Draw an accuracy psi = nu/2 + 0.5 with nu ~ Beta(3,2) for a correct
    constraint and Beta(2,3) for a mislabeled one."""
    nu = rng.beta(3.0, 2.0) if correct else rng.beta(2.0, 3.0)
    return min(nu / 2.0 + 0.5, NEAR_HARD_ACCURACY)


def perturb_constraints(cs: ConstraintSet, e: float, rng) -> ConstraintSet:
    """Mislabel a fraction e of each constraint type.

    floor(e * N_PL) positive links flip to negative links and
    floor(e * N_NL) negative links flip to positive links, chosen
    uniformly at random.  Flipped constraints get their accuracy redrawn
    from the erroneous-expert distribution (Beta(2,3) transform); the
    rest are untouched.
    """
    if not (0.0 <= e <= 1.0):
        raise ValueError("mislabeling fraction e must lie in [0, 1]")
    pl_idx = [k for k, c in enumerate(cs.constraints) if c.ctype == POSITIVE_LINK]
    nl_idx = [k for k, c in enumerate(cs.constraints) if c.ctype == NEGATIVE_LINK]
    n_flip_pl = int(math.floor(e * len(pl_idx)))
    n_flip_nl = int(math.floor(e * len(nl_idx)))
    flips = set()
    if n_flip_pl:
        flips.update(rng.choice(pl_idx, size=n_flip_pl, replace=False).tolist())
    if n_flip_nl:
        flips.update(rng.choice(nl_idx, size=n_flip_nl, replace=False).tolist())
    out = []
    for k, con in enumerate(cs.constraints):
        if k in flips:
            out.append(
                PairwiseConstraint(
                    con.i, con.j, -con.ctype, accuracy_from_expert_draw(rng, correct=False)
                )
            )
        else:
            out.append(con)
    return ConstraintSet(cs.n_units, out, cs.strength)


# ---------------------------------------------------------------------------
# CSV interfaces: constraint files `i,j,type,psi`, pre-grouping files
# `unit,prior_group`.  Units are referenced by panel label.
# ---------------------------------------------------------------------------

def read_constraints_csv(path, unit_ids: Sequence, strength: float = 1.0) -> ConstraintSet:
    index = {str(u): k for k, u in enumerate(unit_ids)}
    constraints = []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        for row in reader:
            try:
                i = index[str(row["i"]).strip()]
                j = index[str(row["j"]).strip()]
            except KeyError as exc:
                raise UnknownUnitError(f"constraint references unknown unit {exc}") from None
            ctype_raw = str(row["type"]).strip().upper()
            if ctype_raw in ("PL", "+1", "1"):
                ctype = POSITIVE_LINK
            elif ctype_raw in ("NL", "-1"):
                ctype = NEGATIVE_LINK
            else:
                raise ValueError(f"unknown constraint type {ctype_raw!r}")
            constraints.append(PairwiseConstraint(i, j, ctype, float(row["psi"])))
    return ConstraintSet(len(unit_ids), constraints, strength)


def write_constraints_csv(cs: ConstraintSet, path, unit_ids: Sequence) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["i", "j", "type", "psi"])
        for con in cs.constraints:
            label = "PL" if con.ctype == POSITIVE_LINK else "NL"
            writer.writerow([unit_ids[con.i], unit_ids[con.j], label, repr(float(con.accuracy))])


def read_pregrouping_csv(path, unit_ids: Sequence) -> Dict[int, str]:
    """Read `unit,prior_group` rows into an index -> label mapping.

    Units absent from the file are unconstrained.
    """
    index = {str(u): k for k, u in enumerate(unit_ids)}
    groups: Dict[int, str] = {}
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        for row in reader:
            unit = str(row["unit"]).strip()
            if unit not in index:
                raise UnknownUnitError(f"pre-grouping references unknown unit {unit!r}")
            groups[index[unit]] = str(row["prior_group"]).strip()
    return groups
