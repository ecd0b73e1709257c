"""Two-stage group sequential designs with O'Brien-Fleming efficacy boundaries."""

from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum
from typing import NamedTuple

from .numerics import (Interval, SolverSettings, bivariate_normal_cdf, find_root,
                       std_normal_cdf)


class DegenerateDataError(ValueError):
    """Pooled success rate of 0 or 1, so the information is undefined."""


class Decision(str, Enum):
    STOP_EFFICACY_STAGE1 = "stop_efficacy_stage1"
    CONTINUE_TO_STAGE2 = "continue_to_stage2"


@dataclass(frozen=True)
class TwoStageDesign:
    """Efficacy boundaries (z scale) and information at the two analyses."""

    e1: float
    e2: float
    i1: float
    i2: float

    def __post_init__(self):
        if not (math.isfinite(self.e1) and math.isfinite(self.e2)):
            raise ValueError("boundaries must be finite")
        if not 0 < self.i1 < self.i2:
            raise ValueError(f"information must satisfy 0 < i1 < i2, got i1={self.i1}, i2={self.i2}")

    @property
    def rho(self) -> float:
        """Correlation between the interim and final z-statistics."""
        return math.sqrt(self.i1 / self.i2)

    @property
    def information_fraction(self) -> float:
        return self.i1 / self.i2

    @property
    def stage1_boundary_difference_scale(self) -> float:
        return self.e1 / math.sqrt(self.i1)

    @classmethod
    def obf(cls, alpha: float, i1: float, i2: float,
            planned_fraction: float | None = None) -> "TwoStageDesign":
        """Build an O'Brien-Fleming design from a one-sided level.

        The boundary constant is solved at the planned information fraction
        (default: the fraction implied by ``i1``/``i2``).
        """
        frac = i1 / i2 if planned_fraction is None else planned_fraction
        c = obf_constant(alpha, math.sqrt(frac))
        return cls(e1=c / math.sqrt(frac), e2=c, i1=i1, i2=i2)


@dataclass(frozen=True)
class ArmCounts:
    successes: int
    n: int


@dataclass(frozen=True)
class StageCounts:
    control: ArmCounts
    treatment: ArmCounts


@dataclass(frozen=True)
class BinaryTrialData:
    """Cumulative per-arm success counts at the interim and final analyses."""

    interim: StageCounts
    final: StageCounts

    def __post_init__(self):
        for stage_name in ("interim", "final"):
            stage = getattr(self, stage_name)
            for arm_name in ("control", "treatment"):
                arm = getattr(stage, arm_name)
                if arm.n < 1:
                    raise ValueError(f"{stage_name}.{arm_name}: n must be at least 1, got {arm.n}")
                if not 0 <= arm.successes <= arm.n:
                    raise ValueError(
                        f"{stage_name}.{arm_name}: successes must lie in [0, n], "
                        f"got {arm.successes}/{arm.n}")
        for arm_name in ("control", "treatment"):
            a = getattr(self.interim, arm_name)
            b = getattr(self.final, arm_name)
            if b.n < a.n or b.successes < a.successes:
                raise ValueError(
                    f"{arm_name} arm: final counts ({b.successes}/{b.n}) are below "
                    f"interim counts ({a.successes}/{a.n})")

    @classmethod
    def from_counts(cls, interim, final) -> "BinaryTrialData":
        """Build from ``((s0, n0), (s1, n1))`` pairs: control first, treatment second."""
        def stage(pairs):
            (s0, n0), (s1, n1) = pairs
            return StageCounts(ArmCounts(int(s0), int(n0)), ArmCounts(int(s1), int(n1)))
        return cls(stage(interim), stage(final))

    def stage(self, k: int) -> StageCounts:
        if k == 1:
            return self.interim
        if k == 2:
            return self.final
        raise ValueError(f"stage must be 1 or 2, got {k}")


class CanonicalParams(NamedTuple):
    mu1: float
    mu2: float
    rho: float


@dataclass(frozen=True)
class NormalEndpointSpec:
    """Two-arm trial with a normally distributed outcome of known SD."""

    total_n: int
    sd: float = 1.0
    allocation: float = 0.5
    interim_fraction: float = 0.5

    def __post_init__(self):
        if self.total_n < 4:
            raise ValueError("total_n must be at least 4")
        if not self.sd > 0:
            raise ValueError("sd must be positive")
        if not 0 < self.allocation < 1:
            raise ValueError("allocation must lie in (0, 1)")
        if not 0 < self.interim_fraction < 1:
            raise ValueError("interim_fraction must lie in (0, 1)")


def obf_constant(alpha: float, rho: float, tol: float = 1e-12) -> float:
    """O'Brien-Fleming constant C for two looks.

    Solves P0(Z1 >= C/rho) + P0(Z1 < C/rho, Z2 >= C) = alpha where (Z1, Z2)
    is standard bivariate normal with correlation ``rho``. The interim boundary
    is C/rho and the final boundary is C.
    """
    if not 0 < alpha < 0.5:
        raise ValueError(f"alpha must lie in (0, 0.5), got {alpha}")
    if not 0 < rho < 1:
        raise ValueError(f"rho must lie in (0, 1), got {rho}")

    def excess(c):
        return 1.0 - bivariate_normal_cdf(c / rho, c, rho) - alpha

    return find_root(excess, Interval(0.0, 10.0), SolverSettings(abs_tol=tol))


def obf_type1_error(c: float, rho: float) -> float:
    return 1.0 - bivariate_normal_cdf(c / rho, c, rho)


def _information(successes_0: int, n_0: int, successes_1: int, n_1: int) -> float:
    pooled = (successes_0 + successes_1) / (n_0 + n_1)
    var = pooled * (1.0 - pooled)
    if var == 0.0:
        raise DegenerateDataError(
            f"pooled success proportion is {pooled}; information is undefined")
    return 1.0 / (var * (1.0 / n_0 + 1.0 / n_1))


def binary_information(counts: StageCounts) -> float:
    """Observed information for a difference in proportions.

    Uses the pooled success rate p: I = 1 / (p (1 - p) (1/n_control + 1/n_treatment)).
    """
    return _information(counts.control.successes, counts.control.n,
                        counts.treatment.successes, counts.treatment.n)


def difference_in_proportions(counts: StageCounts) -> float:
    return (counts.treatment.successes / counts.treatment.n
            - counts.control.successes / counts.control.n)


def z_statistics(data: BinaryTrialData) -> tuple[float, float, float, float]:
    """Return ``(z1, z2, i1, i2)`` from cumulative counts."""
    i1 = binary_information(data.interim)
    i2 = binary_information(data.final)
    z1 = difference_in_proportions(data.interim) * math.sqrt(i1)
    z2 = difference_in_proportions(data.final) * math.sqrt(i2)
    return z1, z2, i1, i2


def normal_information(spec: NormalEndpointSpec) -> tuple[float, float]:
    n1 = spec.total_n * spec.allocation
    n2 = spec.total_n - n1
    i2 = 1.0 / (spec.sd ** 2 * (1.0 / n1 + 1.0 / n2))
    return spec.interim_fraction * i2, i2


def evaluate_stopping(design: TwoStageDesign, z1: float) -> Decision:
    # boundary attainment stops the trial
    if z1 >= design.e1:
        return Decision.STOP_EFFICACY_STAGE1
    return Decision.CONTINUE_TO_STAGE2


def canonical_params(theta: float, design: TwoStageDesign) -> CanonicalParams:
    return CanonicalParams(theta * math.sqrt(design.i1), theta * math.sqrt(design.i2), design.rho)


def interim_p_threshold(design: TwoStageDesign) -> float:
    """One-sided nominal p-value that the interim z-statistic must reach."""
    return std_normal_cdf(-design.e1)
