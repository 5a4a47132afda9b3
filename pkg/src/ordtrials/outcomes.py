"""Ordinal outcome distributions and treatment-effect shifts.

The generative side of the simulator: categorical distributions over ordered
outcome levels, cumulative-odds shifts that impose a proportional-odds
treatment effect, collapsing of fine-grained levels into coarser groups, and
patient sampling. Everything here is pure; randomness enters only through an
explicitly passed ``numpy.random.Generator``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ValidationError

STATES = ("low", "high")
ARMS = ("uc", "dpl")

_SIMPLEX_TOL = 1e-12


@dataclass(frozen=True)
class OrdinalDistribution:
    """Probability vector over K ordered outcome categories (lowest first)."""

    probs: np.ndarray

    def __post_init__(self):
        p = np.asarray(self.probs, dtype=float)
        object.__setattr__(self, "probs", p)
        p.setflags(write=False)
        if p.ndim != 1 or p.size < 2:
            raise ValidationError("need a 1-D probability vector with K >= 2")
        if np.any(p < 0):
            raise ValidationError("probabilities must be nonnegative")
        if abs(p.sum() - 1.0) > _SIMPLEX_TOL:
            raise ValidationError(
                f"probabilities must sum to 1 within {_SIMPLEX_TOL}, got {p.sum()!r}"
            )

    @classmethod
    def from_unnormalized(cls, weights) -> "OrdinalDistribution":
        w = np.asarray(weights, dtype=float)
        if np.any(w < 0) or w.sum() <= 0:
            raise ValidationError("weights must be nonnegative with positive sum")
        return cls(w / w.sum())

    @property
    def n_categories(self) -> int:
        return self.probs.size

    def cumulative(self) -> np.ndarray:
        """Nondecreasing cumulative vector; final entry is 1 by construction."""
        c = np.cumsum(self.probs)
        c[-1] = 1.0
        return c


@dataclass(frozen=True)
class CollapseMap:
    """Partition of source categories into contiguous groups, lowest first.

    ``sizes[g]`` is the number of source categories in group ``g``.
    """

    sizes: tuple[int, ...]

    def __post_init__(self):
        object.__setattr__(self, "sizes", tuple(int(s) for s in self.sizes))
        if len(self.sizes) < 1 or any(s < 1 for s in self.sizes):
            raise ValidationError("every group must contain at least one category")

    @property
    def n_source(self) -> int:
        return sum(self.sizes)

    @property
    def n_groups(self) -> int:
        return len(self.sizes)

    def boundaries(self) -> np.ndarray:
        """Index of the last source category in each group (0-based)."""
        return np.cumsum(self.sizes) - 1

    def group_of(self) -> np.ndarray:
        """Group index (0-based) for each source category."""
        return np.repeat(np.arange(self.n_groups), self.sizes)


# Correspondence between the 30-level ventilator-free-days outcome
# (-1 = death, 0 = >28 ventilated days, 1..28 = days free) and the 9-level
# outcome used by the model: {-1}, {0-7}, {8-14}, {15-19}, {20-22}, {23-24},
# {25-26}, {27}, {28}.
VFD_COLLAPSE_MAP = CollapseMap(sizes=(1, 8, 7, 5, 3, 2, 2, 1, 1))


@dataclass(frozen=True)
class StateScenario:
    """Generative truth for one elastance state.

    ``odds_ratio`` multiplies the control-arm cumulative odds at every
    cutpoint (the table-column convention: values below 1 shift mass toward
    higher, better categories).
    """

    baseline: OrdinalDistribution
    odds_ratio: float

    def __post_init__(self):
        if not self.odds_ratio > 0:
            raise ValidationError("odds_ratio must be positive")

    def intervention(self) -> OrdinalDistribution:
        return apply_odds_ratio(self.baseline, self.odds_ratio)


@dataclass(frozen=True)
class PatientRecord:
    state: str  # "low" | "high"
    arm: str  # "uc" | "dpl"
    outcome: int  # 1..K

    def __post_init__(self):
        if self.state not in STATES:
            raise ValidationError(f"unknown state {self.state!r}")
        if self.arm not in ARMS:
            raise ValidationError(f"unknown arm {self.arm!r}")


def apply_odds_ratio(baseline: OrdinalDistribution, or_value: float) -> OrdinalDistribution:
    """Shift a distribution by multiplying every cumulative odds by ``or_value``.

    For cumulative probability g at a cutpoint the shifted value is
    g*or / (1 - g + g*or).  or_value < 1 moves mass toward higher categories.
    """
    if not or_value > 0:
        raise ValueError("or_value must be positive")
    g = baseline.cumulative()[:-1]
    # g can sit at 0 or 1 when leading/trailing categories are empty; the
    # odds-space formula below is exact at both endpoints.
    shifted = g * or_value / (1.0 - g + g * or_value)
    probs = np.diff(np.concatenate(([0.0], shifted, [1.0])))
    probs = np.clip(probs, 0.0, None)
    return OrdinalDistribution.from_unnormalized(probs)


def collapse(dist: OrdinalDistribution, cmap: CollapseMap) -> OrdinalDistribution:
    """Sum source probabilities within each group of the partition."""
    if cmap.n_source != dist.n_categories:
        raise ValidationError(
            f"map covers {cmap.n_source} categories, distribution has {dist.n_categories}"
        )
    cum = np.concatenate(([0.0], np.cumsum(dist.probs)))
    cum[-1] = 1.0
    b = cmap.boundaries()
    # Differences of boundary cumulatives keep the cumulative probability at
    # every group boundary identical to the source distribution's.
    probs = cum[b + 1] - cum[np.concatenate(([0], b[:-1] + 1))]
    return OrdinalDistribution.from_unnormalized(np.clip(probs, 0.0, None))


def build_even_collapse(dist: OrdinalDistribution, target_groups: int) -> CollapseMap:
    """Contiguous partition with group probabilities as even as possible.

    The first category (death) is forced to be its own group; the remaining
    categories are split into ``target_groups - 1`` contiguous blocks
    minimizing the sum of squared deviations of group probabilities from
    1/target_groups.  Dynamic programming over block ends; ties resolved
    toward the partition whose earliest differing boundary is smaller.
    """
    if target_groups < 2:
        raise ValueError("target_groups must be at least 2")
    k_src = dist.n_categories
    if target_groups > k_src:
        raise ValueError("target_groups exceeds the number of source categories")

    ideal = 1.0 / target_groups
    tail = dist.probs[1:]  # categories after the forced death group
    n = tail.size
    g = target_groups - 1
    prefix = np.concatenate(([0.0], np.cumsum(tail)))

    def block_cost(i, j):  # categories i..j-1 of the tail form one group
        return (prefix[j] - prefix[i] - ideal) ** 2

    # best[m][i]: (cost, sizes) for splitting tail[i:] into m blocks.
    best = [[None] * (n + 1) for _ in range(g + 1)]
    best[0][n] = (0.0, ())
    for m in range(1, g + 1):
        # each block is nonempty, so tail[i:] needs at least m categories
        for i in range(n - m, -1, -1):
            choice = None
            for j in range(i + 1, n - m + 2):
                rest = best[m - 1][j]
                if rest is None:
                    continue
                cand = (block_cost(i, j) + rest[0], (j - i,) + rest[1])
                if choice is None or cand[0] < choice[0] or (
                    cand[0] == choice[0] and cand[1] < choice[1]
                ):
                    choice = cand
            best[m][i] = choice

    _, sizes = best[g][0]
    return CollapseMap(sizes=(1,) + sizes)


def sample_patients(
    scenario: StateScenario,
    state: str,
    n_uc: int,
    n_dpl: int,
    rng: np.random.Generator,
) -> list[PatientRecord]:
    """Draw independent multinomial outcomes for one state's two arms.

    Control-arm patients come first. Fully deterministic given the generator
    state.
    """
    if n_uc < 0 or n_dpl < 0:
        raise ValueError("patient counts must be nonnegative")
    records = []
    for arm, n, dist in (
        ("uc", n_uc, scenario.baseline),
        ("dpl", n_dpl, scenario.intervention()),
    ):
        if n == 0:
            continue
        outcomes = rng.choice(dist.n_categories, size=n, p=dist.probs) + 1
        records.extend(PatientRecord(state, arm, int(c)) for c in outcomes)
    return records


def sample_outcome_counts(
    scenario: StateScenario,
    n_uc: int,
    n_dpl: int,
    rng: np.random.Generator,
) -> np.ndarray:
    """Multinomial outcome counts for one state, shape (2 arms, K).

    Equivalent in distribution to tabulating :func:`sample_patients`; used by
    the trial engine, which only ever needs the contingency table.
    """
    if n_uc < 0 or n_dpl < 0:
        raise ValueError("patient counts must be nonnegative")
    uc = rng.multinomial(n_uc, scenario.baseline.probs)
    dpl = rng.multinomial(n_dpl, scenario.intervention().probs)
    return np.stack([uc, dpl])


def split_uniform(dist: OrdinalDistribution, cmap: CollapseMap) -> OrdinalDistribution:
    """Expand a collapsed distribution by spreading each group's probability
    uniformly over its member source categories (the synthetic fine-grained
    reconstruction used in collapse-robustness checks)."""
    if dist.n_categories != cmap.n_groups:
        raise ValidationError("distribution has one entry per group")
    sizes = np.asarray(cmap.sizes)
    probs = np.repeat(dist.probs / sizes, sizes)
    return OrdinalDistribution.from_unnormalized(probs)
