"""Point estimators of the treatment effect after a two-stage group sequential trial.

All estimators work on the canonical scale: z-statistics plus the observed
information at each analysis. Binary trial data are first reduced to that
scale with :func:`observe_binary`.

The closed-form bias functions accept numpy arrays for ``theta`` so that
curves and Monte Carlo batches can be evaluated without Python loops;
:func:`canonical_estimates` is the batch entry point used by the simulator.
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import numerics as nx
from .design import (BinaryTrialData, Decision, TwoStageDesign,
                     difference_in_proportions, evaluate_stopping, z_statistics)

ESTIMATORS = (
    "mle_overall",
    "mle_stage1",
    "mle_stage2_increment",
    "mue",
    "umvue",
    "ubc_mle",
    "umvcue",
    "cbc_mle",
)
UNCONDITIONAL = ("mle_overall", "mle_stage1", "mue", "umvue", "ubc_mle")
CONDITIONAL = ("mle_stage2_increment", "umvcue", "cbc_mle")

# fallback bracket half-width for fixed points and MUE, in units of 1/sqrt(I1)
BRACKET_SDS = 10.0


class NoStage2DataError(ValueError):
    pass


@dataclass(frozen=True)
class ObservedOutcome:
    """What the trial produced: the stopping stage and the stage-wise estimates.

    ``z2`` and ``theta_hat_stage2_increment`` are ``None`` when the trial
    stopped at the interim analysis.
    """

    stopped_stage: int
    theta_hat_overall: float
    theta_hat_stage1: float
    theta_hat_stage2_increment: Optional[float]
    z1: float
    z2: Optional[float]
    design: TwoStageDesign

    def __post_init__(self):
        expected = 1 if evaluate_stopping(self.design, self.z1) is Decision.STOP_EFFICACY_STAGE1 else 2
        if self.stopped_stage != expected:
            raise ValueError(
                f"stopped_stage={self.stopped_stage} is inconsistent with z1={self.z1} "
                f"and e1={self.design.e1}")
        if (self.z2 is None) != (self.stopped_stage == 1):
            raise ValueError("z2 must be given exactly when the trial reaches stage 2")

    @classmethod
    def from_z(cls, z1: float, z2: Optional[float], design: TwoStageDesign) -> "ObservedOutcome":
        """Outcome on the canonical scale; ``z2`` is ignored if stage 1 stops."""
        th1 = z1 / math.sqrt(design.i1)
        if evaluate_stopping(design, z1) is Decision.STOP_EFFICACY_STAGE1:
            return cls(1, th1, th1, None, z1, None, design)
        if z2 is None:
            raise ValueError("trial continues to stage 2 but z2 is missing")
        th = z2 / math.sqrt(design.i2)
        th2 = (th * design.i2 - th1 * design.i1) / (design.i2 - design.i1)
        return cls(2, th, th1, th2, z1, z2, design)

    @property
    def reached_stage2(self) -> bool:
        return self.stopped_stage == 2


def observed_design(data: BinaryTrialData, e1: float, e2: float) -> TwoStageDesign:
    """Design with the given boundaries and the information observed in ``data``."""
    _, _, i1, i2 = z_statistics(data)
    return TwoStageDesign(e1=e1, e2=e2, i1=i1, i2=i2)


def observe_binary(data: BinaryTrialData, design: TwoStageDesign) -> ObservedOutcome:
    """Reduce binary counts to an :class:`ObservedOutcome`.

    Boundaries come from ``design``; the information is always recomputed from
    the observed counts, so ``design.i1``/``design.i2`` are replaced.
    """
    z1, z2, i1, i2 = z_statistics(data)
    d = dataclasses.replace(design, i1=i1, i2=i2)
    th1 = difference_in_proportions(data.interim)
    if evaluate_stopping(d, z1) is Decision.STOP_EFFICACY_STAGE1:
        return ObservedOutcome(1, th1, th1, None, z1, None, d)
    return ObservedOutcome(2, difference_in_proportions(data.final), th1,
                           mle_stage2_increment(data), z1, z2, d)


# ---------------------------------------------------------------------------
# MLEs

def mle_overall(data: BinaryTrialData, design: Optional[TwoStageDesign] = None) -> float:
    """Difference in proportions at the analysis where the trial stopped.

    Without a design the trial is taken to have reached the final analysis.
    """
    if design is not None:
        return observe_binary(data, design).theta_hat_overall
    return difference_in_proportions(data.final)


def mle_stage1(data: BinaryTrialData) -> float:
    return difference_in_proportions(data.interim)


def mle_stage2_increment(data: BinaryTrialData) -> float:
    """Difference in proportions among patients recruited after the interim."""
    new = []
    for arm in ("control", "treatment"):
        a = getattr(data.interim, arm)
        b = getattr(data.final, arm)
        if b.n - a.n < 1:
            raise NoStage2DataError(f"{arm} arm has no patients after the interim analysis")
        new.append((b.successes - a.successes) / (b.n - a.n))
    return new[1] - new[0]


# ---------------------------------------------------------------------------
# bias functions

def unconditional_bias(theta, design: TwoStageDesign):
    """Expected overall-MLE error averaged over both stopping stages."""
    i1, i2 = design.i1, design.i2
    return (i2 - i1) / (i2 * math.sqrt(i1)) * nx.std_normal_pdf(design.e1 - np.asarray(theta) * math.sqrt(i1))


def conditional_bias_stage2(theta, design: TwoStageDesign):
    """E[overall MLE - theta | trial continues to stage 2]; never positive."""
    u = design.e1 - np.asarray(theta, dtype=float) * math.sqrt(design.i1)
    out = -math.sqrt(design.i1) / design.i2 * nx.lower_tail_ratio(u)
    return out


def conditional_bias_stage1_stop(theta, design: TwoStageDesign):
    """E[stage-1 MLE - theta | trial stops at the interim]; never negative."""
    theta = np.asarray(theta, dtype=float)
    sd = 1.0 / math.sqrt(design.i1)
    return nx.truncated_normal_mean(theta, sd, "above_cut", design.e1 * sd) - theta


def stop_probability(theta, design: TwoStageDesign):
    """Probability of stopping for efficacy at the interim analysis."""
    return nx.std_normal_cdf(np.asarray(theta, dtype=float) * math.sqrt(design.i1) - design.e1)


# ---------------------------------------------------------------------------
# bias-corrected MLEs

def _ubc_map(x, theta_hat, design):
    return theta_hat - unconditional_bias(x, design)


def _cbc_map(x, theta_hat, design):
    return theta_hat - conditional_bias_stage2(x, design)


def ubc_mle(theta_hat_obs: float, design: TwoStageDesign,
            settings: nx.SolverSettings = nx.DEFAULT_SETTINGS) -> float:
    """Whitehead's unconditional bias-corrected MLE: x = theta_hat - bias(x)."""
    return nx.solve_fixed_point(
        lambda x: float(_ubc_map(x, theta_hat_obs, design)), theta_hat_obs, settings,
        half_width=BRACKET_SDS / math.sqrt(design.i1))


def cbc_mle(theta_hat_obs: float, design: TwoStageDesign,
            settings: nx.SolverSettings = nx.DEFAULT_SETTINGS) -> float:
    """Conditional bias-corrected MLE for a trial that reached stage 2."""
    return nx.solve_fixed_point(
        lambda x: float(_cbc_map(x, theta_hat_obs, design)), theta_hat_obs, settings,
        half_width=BRACKET_SDS / math.sqrt(design.i1))


# ---------------------------------------------------------------------------
# Rao-Blackwell estimators

def _umvue_from_overall(theta_hat, design: TwoStageDesign):
    i1, i2 = design.i1, design.i2
    z2 = np.asarray(theta_hat, dtype=float) * math.sqrt(i2)
    t = (design.e1 - z2 * math.sqrt(i1 / i2)) / math.sqrt((i2 - i1) / i2)
    return theta_hat - math.sqrt(i2 - i1) / math.sqrt(i1 * i2) * nx.lower_tail_ratio(t)


def _umvcue_from_overall(theta_hat, design: TwoStageDesign):
    i1, i2 = design.i1, design.i2
    s = math.sqrt(1.0 / i1 + 1.0 / (i2 - i1))
    w1 = 1.0 / ((i2 - i1) * s)
    w2 = i1 * s
    arg = w2 * (design.e1 / math.sqrt(i1) - np.asarray(theta_hat, dtype=float))
    return theta_hat + w1 * nx.lower_tail_ratio(arg)


def _require_stage2(outcome: ObservedOutcome, name: str):
    if not outcome.reached_stage2:
        raise ValueError(f"{name} is defined only for trials that reach stage 2")


def umvue(outcome: ObservedOutcome) -> float:
    """E[stage-1 MLE | T = 2, overall MLE]."""
    _require_stage2(outcome, "umvue")
    return float(_umvue_from_overall(outcome.theta_hat_overall, outcome.design))


def umvcue(outcome: ObservedOutcome) -> float:
    """E[stage-2 increment MLE | T = 2, overall MLE]."""
    _require_stage2(outcome, "umvcue")
    return float(_umvcue_from_overall(outcome.theta_hat_overall, outcome.design))


# ---------------------------------------------------------------------------
# stagewise ordering

def _pvalue_stage2(theta, z2, design: TwoStageDesign):
    # stop at stage 1 (always more extreme) + continue and exceed z2
    theta = np.asarray(theta, dtype=float)
    return 1.0 - nx.bivariate_normal_cdf(
        design.e1 - theta * math.sqrt(design.i1),
        z2 - theta * math.sqrt(design.i2),
        design.rho)


def stagewise_pvalue(theta, outcome: ObservedOutcome):
    """Probability under ``theta`` of a result at least as extreme as observed.

    Uses the stagewise ordering: any stage-1 stop beats every stage-2 outcome,
    and within a stage larger z is more extreme.
    """
    d = outcome.design
    theta = np.asarray(theta, dtype=float)
    if outcome.stopped_stage == 1:
        out = nx.std_normal_cdf(theta * math.sqrt(d.i1) - outcome.z1)
    else:
        out = _pvalue_stage2(theta, outcome.z2, d)
    out = np.asarray(out)
    return out if out.ndim else float(out)


def mue(outcome: ObservedOutcome, settings: nx.SolverSettings = nx.DEFAULT_SETTINGS) -> float:
    """Median-unbiased estimate: the theta at which the p-value function is 1/2."""
    d = outcome.design
    if outcome.stopped_stage == 1:
        return outcome.z1 / math.sqrt(d.i1)
    half = BRACKET_SDS / math.sqrt(d.i1)
    centre = outcome.theta_hat_overall

    def f(t):
        return float(_pvalue_stage2(t, outcome.z2, d)) - 0.5

    lo, hi = centre - half, centre + half
    for _ in range(30):
        if f(lo) * f(hi) <= 0:
            break
        lo, hi = centre - 2 * (centre - lo), centre + 2 * (hi - centre)
    else:
        raise nx.NoSignChangeError("could not bracket the median-unbiased estimate")
    return nx.find_root(f, nx.Interval(lo, hi), settings)


# ---------------------------------------------------------------------------
# everything at once

def _round_percent(x: float) -> int:
    return int(math.copysign(math.floor(abs(x) + 0.5), x))


@dataclass
class EstimateSet:
    """The eight point estimates, with optional bootstrap standard errors.

    Conditional estimators are ``None`` when the trial stopped at stage 1.
    """

    mle_overall: float
    mle_stage1: float
    mle_stage2_increment: Optional[float]
    mue: float
    umvue: float
    ubc_mle: float
    umvcue: Optional[float]
    cbc_mle: Optional[float]
    se: Optional[dict] = field(default=None)

    def values(self) -> dict:
        return {name: getattr(self, name) for name in ESTIMATORS}

    def relative_differences(self) -> dict:
        """Percent difference to the overall MLE, rounded to an integer."""
        base = self.mle_overall
        out = {}
        for name, v in self.values().items():
            if v is None or base == 0:
                out[name] = None
            else:
                out[name] = _round_percent(100.0 * (v - base) / base)
        return out


def estimate_outcome(outcome: ObservedOutcome,
                     settings: nx.SolverSettings = nx.DEFAULT_SETTINGS) -> EstimateSet:
    th1 = outcome.theta_hat_stage1
    if outcome.stopped_stage == 1:
        # the interim MLE is unconditionally unbiased, so all unconditional
        # estimators collapse onto it
        return EstimateSet(th1, th1, None, th1, th1, th1, None, None)
    th = outcome.theta_hat_overall
    d = outcome.design
    return EstimateSet(
        mle_overall=th,
        mle_stage1=th1,
        mle_stage2_increment=outcome.theta_hat_stage2_increment,
        mue=mue(outcome, settings),
        umvue=umvue(outcome),
        ubc_mle=ubc_mle(th, d, settings),
        umvcue=umvcue(outcome),
        cbc_mle=cbc_mle(th, d, settings),
    )


def estimate_all(data: BinaryTrialData, design: TwoStageDesign,
                 settings: nx.SolverSettings = nx.DEFAULT_SETTINGS) -> EstimateSet:
    """All eight estimates from binary counts and the design's boundaries."""
    return estimate_outcome(observe_binary(data, design), settings)


def canonical_estimates(z1, z2, design: TwoStageDesign,
                        settings: nx.SolverSettings = nx.DEFAULT_SETTINGS) -> dict:
    """Vectorised estimates for many replicates on the canonical scale.

    ``z2`` entries are ignored where ``z1`` crosses the interim boundary.
    Returns a dict of arrays keyed by estimator name plus ``"stopped_stage"``;
    conditional estimators are NaN for stage-1 stoppers.
    """
    z1 = np.array(z1, dtype=float, ndmin=1)
    z2 = np.broadcast_to(np.asarray(z2, dtype=float), z1.shape)
    i1, i2 = design.i1, design.i2
    stop = z1 >= design.e1
    cont = ~stop
    th1 = z1 / math.sqrt(i1)
    out = {name: th1.copy() for name in UNCONDITIONAL}
    for name in CONDITIONAL:
        out[name] = np.full(z1.shape, np.nan)
    out["stopped_stage"] = np.where(stop, 1, 2)
    if not np.any(cont):
        return out

    zc = z2[cont]
    th = zc / math.sqrt(i2)
    half = BRACKET_SDS / math.sqrt(i1)
    out["mle_overall"][cont] = th
    out["mle_stage2_increment"][cont] = (th * i2 - th1[cont] * i1) / (i2 - i1)
    out["umvue"][cont] = _umvue_from_overall(th, design)
    out["umvcue"][cont] = _umvcue_from_overall(th, design)
    out["ubc_mle"][cont] = nx.solve_fixed_point_batch(
        lambda x, t: _ubc_map(x, t, design), th, args=(th,), settings=settings,
        half_width=half)
    out["cbc_mle"][cont] = nx.solve_fixed_point_batch(
        lambda x, t: _cbc_map(x, t, design), th, args=(th,), settings=settings,
        half_width=half)
    out["mue"][cont] = nx.find_root_batch(
        lambda t, z: _pvalue_stage2(t, z, design) - 0.5,
        th - half, th + half, args=(zc,), settings=settings)
    return out
