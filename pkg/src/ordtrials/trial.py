"""One adaptive trial replicate: cohort enrollment, interim fits, triggers.

Enrollment proceeds in fixed-size cohorts split between the two elastance
states, each randomized 1:1 to the two arms.  Once the initial-enrollment
gate is reached, every interim fits the joint model on all accumulated data
(closed states keep contributing their data, which the borrowing prior
needs) and evaluates each open state's posterior against the superiority
and futility thresholds.  A state reaching its cap without a trigger closes
as max_reached at that interim.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import FitError, ValidationError
from .laplace import MCID_ODDS_RATIO, FitSettings, PosteriorFit, fit
from .model import Dataset, PriorConfig
from .outcomes import STATES, StateScenario, sample_outcome_counts

SUPERIOR = "superior"
FUTILE = "futile"
MAX_REACHED = "max_reached"
CONTINUE = "continue"

# Hard bound on runaway enrollment if fits keep failing past the cap.
_RUNAWAY_COHORTS = 16


@dataclass(frozen=True)
class DesignConfig:
    """Adaptive design settings: thresholds, cadence and cap."""

    p_sup: float
    p_futi: float
    n_init: int
    cohort_total: int = 190
    cohort_high: int = 64
    cohort_low: int = 126
    max_n_per_state: int = 5000
    mcid_or: float = MCID_ODDS_RATIO
    priors: PriorConfig = field(default_factory=PriorConfig)
    fit_settings: FitSettings = field(default_factory=FitSettings)
    per_state_gate: bool = False  # gate first analysis on per-state counts
    name: str = "design"

    def __post_init__(self):
        problems = []
        if self.cohort_high + self.cohort_low != self.cohort_total:
            problems.append("cohort_high + cohort_low must equal cohort_total")
        if not 0.5 < self.p_sup < 1 or not 0.5 < self.p_futi < 1:
            problems.append("p_sup and p_futi must lie in (0.5, 1)")
        if self.n_init < self.cohort_total:
            problems.append("n_init must be at least one cohort")
        if self.max_n_per_state < 1 or self.mcid_or <= 0:
            problems.append("max_n_per_state and mcid_or must be positive")
        if problems:
            raise ValidationError("; ".join(problems))

    @property
    def cohort_shares(self) -> tuple[int, int]:
        return (self.cohort_low, self.cohort_high)


@dataclass(frozen=True)
class StateResult:
    trigger: str  # superior | futile | max_reached
    final_n: int
    interim: int  # 1-based interim index at which the state closed


@dataclass(frozen=True)
class TrialResult:
    low: StateResult
    high: StateResult
    interims: int  # total interims run (enrollment steps)
    fits: int  # fit attempts performed
    fit_failures: int  # interims where both attempts failed

    def state(self, name: str) -> StateResult:
        return self.low if name == "low" else self.high


def evaluate_triggers(fit_result: PosteriorFit, design: DesignConfig, state: str) -> str:
    """Trigger decision for one state; superiority is checked first and
    threshold comparisons are inclusive."""
    if fit_result.prob_superior(state) >= design.p_sup:
        return SUPERIOR
    if fit_result.prob_futile(state, design.mcid_or) >= design.p_futi:
        return FUTILE
    return CONTINUE


def run_trial(
    design: DesignConfig,
    scenario_low: StateScenario,
    scenario_high: StateScenario,
    rng: np.random.Generator,
) -> TrialResult:
    """Simulate one trial replicate; deterministic given the generator."""
    scenarios = (scenario_low, scenario_high)
    k = scenario_low.baseline.n_categories
    if scenario_high.baseline.n_categories != k:
        raise ValidationError("state scenarios must share the category count")

    data = Dataset.zeros(k)
    enrolled = [0, 0]
    is_open = [True, True]
    trigger: list[str | None] = [None, None]
    closed_at = [0, 0]
    interim = 0
    fits = 0
    fit_failures = 0

    while any(is_open):
        interim += 1
        for s in (0, 1):
            if not is_open[s]:
                continue
            share = design.cohort_shares[s]
            n_dpl = int(rng.binomial(share, 0.5))
            counts = sample_outcome_counts(scenarios[s], share - n_dpl, n_dpl, rng)
            data = data.adding(s, counts)
            enrolled[s] += share

        if design.per_state_gate:
            analyzable = [s for s in (0, 1) if is_open[s] and enrolled[s] >= design.n_init]
        elif sum(enrolled) >= design.n_init:
            analyzable = [s for s in (0, 1) if is_open[s]]
        else:
            analyzable = []
        if not analyzable:
            continue

        fit_result = None
        try:
            fits += 1
            fit_result = fit(data, design.priors, design.fit_settings)
        except FitError:
            try:
                fits += 1
                fit_result = fit(
                    data,
                    design.priors,
                    design.fit_settings.with_grid_size(2 * design.fit_settings.grid_size),
                )
            except FitError:
                fit_failures += 1

        if fit_result is None:
            # Conservative: no stopping decisions on a failed fit, including
            # the cap; enrollment continues to the next interim (bounded by
            # the runaway guard below).
            if any(
                enrolled[s] >= design.max_n_per_state + _RUNAWAY_COHORTS * design.cohort_shares[s]
                for s in (0, 1)
                if is_open[s]
            ):
                for s in (0, 1):
                    if is_open[s]:
                        is_open[s] = False
                        trigger[s] = MAX_REACHED
                        closed_at[s] = interim
            continue

        for s in analyzable:
            decision = evaluate_triggers(fit_result, design, STATES[s])
            if decision in (SUPERIOR, FUTILE):
                is_open[s] = False
                trigger[s] = decision
                closed_at[s] = interim
            elif enrolled[s] >= design.max_n_per_state:
                is_open[s] = False
                trigger[s] = MAX_REACHED
                closed_at[s] = interim

    return TrialResult(
        low=StateResult(trigger[0], enrolled[0], closed_at[0]),
        high=StateResult(trigger[1], enrolled[1], closed_at[1]),
        interims=interim,
        fits=fits,
        fit_failures=fit_failures,
    )
