"""MUSEC case study: embedded inputs, reference values and table builders.

Reference values are the reported MUSEC results, stored as constants. The
builders put each computed value next to its reference together with the
absolute deviation.
"""

from __future__ import annotations

from typing import Optional

import numpy as np

from .design import BinaryTrialData, TwoStageDesign
from .estimators import (CONDITIONAL, ESTIMATORS, UNCONDITIONAL,
                         conditional_bias_stage1_stop, estimate_all, observe_binary)
from .simulation import (DEFAULT_EDGES, Histogram, Scenario, bootstrap_se,
                         export_histogram, run_scenario)

# Table 3: cumulative counts, control (placebo) first, treatment (CE) second
MUSEC_DATA = BinaryTrialData.from_counts(
    interim=((12, 97), (27, 101)),
    final=((21, 134), (42, 143)),
)
# Table 3: OBF boundaries as reported (rounded)
MUSEC_E1 = 2.797
MUSEC_E2 = 1.977
# Table 3: standardised test statistics
MUSEC_Z = (2.540, 2.718)


def musec_design() -> TwoStageDesign:
    """Reported boundaries with the information observed in the MUSEC counts."""
    return observe_binary(MUSEC_DATA, TwoStageDesign(MUSEC_E1, MUSEC_E2, 1.0, 2.0)).design


# Table 4: estimate, bootstrap SE (theta = 0.14), relative difference (%)
TABLE4 = {
    "mle_overall": (0.1370, 0.054, None),
    "mle_stage1": (0.1436, 0.057, 5),
    "mue": (0.1341, 0.054, -2),
    "umvue": (0.1278, 0.054, -7),
    "ubc_mle": (0.1328, 0.055, -3),
    "mle_stage2_increment": (0.1139, 0.111, -17),
    "umvcue": (0.1724, 0.071, 26),
    "cbc_mle": (0.1909, 0.073, 39),
}

THETAS = (0.10, 0.14, 0.18)

# Table 5: (mean, SE) per theta; conditional rows come from stage-2-only runs
TABLE5 = {
    "mle_overall": ((0.103, 0.054), (0.144, 0.054), (0.184, 0.053)),
    "mle_stage1": ((0.100, 0.057), (0.140, 0.057), (0.180, 0.057)),
    "mue": ((0.101, 0.053), (0.142, 0.054), (0.182, 0.054)),
    "umvue": ((0.100, 0.052), (0.140, 0.054), (0.180, 0.055)),
    "ubc_mle": ((0.101, 0.054), (0.142, 0.055), (0.183, 0.054)),
    "mle_stage2_increment": ((0.100, 0.111), (0.140, 0.111), (0.180, 0.111)),
    "umvcue": ((0.100, 0.062), (0.140, 0.071), (0.179, 0.080)),
    "cbc_mle": ((0.111, 0.067), (0.154, 0.073), (0.194, 0.078)),
}
# Table 5: probability of stopping at stage 1
STOP_PROBABILITIES = (0.15, 0.37, 0.65)

# Table 6, "Trial stops early at the interim analysis": stage-1 MLE (mean, SE)
TABLE6_STOP = ((0.188, 0.025), (0.197, 0.031), (0.212, 0.038))
# Table 6, "Trial continues to stage 2"
TABLE6_CONTINUE = {
    "mle_overall": ((0.087, 0.043), (0.113, 0.038), (0.132, 0.033)),
    "mle_stage1": ((0.084, 0.045), (0.106, 0.038), (0.120, 0.030)),
    "mue": ((0.086, 0.041), (0.109, 0.034), (0.126, 0.027)),
    "umvue": ((0.084, 0.039), (0.106, 0.030), (0.120, 0.023)),
    "ubc_mle": ((0.085, 0.041), (0.110, 0.036), (0.128, 0.032)),
}

# Figure 2 / Table 4: stage-2 MLE sampling SD at theta = 0.14
FIGURE2_STAGE2_SD = 0.111


def _row(**kw) -> dict:
    computed, ref = kw.get("computed"), kw.get("reference")
    kw["abs_deviation"] = None if computed is None or ref is None else abs(computed - ref)
    return kw


def table4(bootstrap_reps: int = 0, seed: int = 7) -> list[dict]:
    """Point estimates (and optionally bootstrap SEs at theta = 0.14)."""
    design = musec_design()
    es = estimate_all(MUSEC_DATA, design)
    rel = es.relative_differences()
    se = bootstrap_se(design, 0.14, bootstrap_reps, seed) if bootstrap_reps else None
    rows = []
    for name in ESTIMATORS:
        value, ref_se, ref_rel = TABLE4[name]
        rows.append(_row(estimator=name, quantity="estimate",
                         computed=getattr(es, name), reference=value))
        if name != "mle_overall":
            rows.append(_row(estimator=name, quantity="relative_difference_percent",
                             computed=rel[name], reference=ref_rel))
        if se is not None:
            rows.append(_row(estimator=name, quantity="se", computed=se[name], reference=ref_se))
    return rows


def _simulate_thetas(reps: int, seed: int, conditioning: str, workers=None):
    design = musec_design()
    return [run_scenario(Scenario(t, design, reps, seed, conditioning), workers).summary
            for t in THETAS]


def table5(reps: int = 100_000, seed: int = 7, workers=None) -> list[dict]:
    """Means and SDs over all replicates (conditional rows: stage-2-only runs)."""
    full = _simulate_thetas(reps, seed, "all", workers)
    cont = _simulate_thetas(reps, seed, "stage2_only", workers)
    rows = []
    for j, theta in enumerate(THETAS):
        rows.append(_row(estimator="stop_probability_stage1", theta=theta,
                         quantity="analytic", computed=full[j].analytic_stop_probability,
                         reference=STOP_PROBABILITIES[j]))
        rows.append(_row(estimator="stop_probability_stage1", theta=theta,
                         quantity="empirical", computed=full[j].stop_probability_stage1,
                         reference=STOP_PROBABILITIES[j]))
        for name in ESTIMATORS:
            src = full[j] if name in UNCONDITIONAL else cont[j]
            stat = src.overall[name]
            mean, sd = TABLE5[name][j]
            rows.append(_row(estimator=name, theta=theta, quantity="mean",
                             computed=stat.mean, reference=mean))
            rows.append(_row(estimator=name, theta=theta, quantity="sd",
                             computed=stat.sd, reference=sd))
    return rows


def table6(reps: int = 100_000, seed: int = 7, workers=None) -> list[dict]:
    """Unconditional estimators split by stopping stage within one run per theta."""
    design = musec_design()
    full = _simulate_thetas(reps, seed, "all", workers)
    rows = []
    for j, theta in enumerate(THETAS):
        mean, sd = TABLE6_STOP[j]
        stat = full[j].stage1["mle_stage1"]
        rows.append(_row(group="stop_stage1", estimator="mle_stage1", theta=theta,
                         quantity="mean", computed=stat.mean, reference=mean))
        rows.append(_row(group="stop_stage1", estimator="mle_stage1", theta=theta,
                         quantity="sd", computed=stat.sd, reference=sd))
        rows.append(_row(group="stop_stage1", estimator="mle_stage1", theta=theta,
                         quantity="analytic_mean",
                         computed=theta + float(conditional_bias_stage1_stop(theta, design)),
                         reference=mean))
        for name in UNCONDITIONAL:
            mean, sd = TABLE6_CONTINUE[name][j]
            stat = full[j].stage2[name]
            rows.append(_row(group="continue_stage2", estimator=name, theta=theta,
                             quantity="mean", computed=stat.mean, reference=mean))
            rows.append(_row(group="continue_stage2", estimator=name, theta=theta,
                             quantity="sd", computed=stat.sd, reference=sd))
    return rows


def figure2_histograms(reps: int = 100_000, seed: int = 7, edges=DEFAULT_EDGES,
                       theta: float = 0.14, workers=None):
    """Sampling-distribution histograms at ``theta``.

    Unconditional estimators come from an unconditioned run, conditional ones
    from a run of trials that all continue to stage 2.
    """
    design = musec_design()
    full = run_scenario(Scenario(theta, design, reps, seed, "all"), workers, keep_records=True)
    cont = run_scenario(Scenario(theta, design, reps, seed, "stage2_only"), workers,
                        keep_records=True)
    h_u = export_histogram(full.records, edges, UNCONDITIONAL)
    h_c = export_histogram(cont.records, edges, CONDITIONAL)
    counts = {**h_u.counts, **h_c.counts}
    under = {**h_u.underflow, **h_c.underflow}
    over = {**h_u.overflow, **h_c.overflow}
    sds = {name: float(np.nanstd(full.records[name], ddof=1)) for name in UNCONDITIONAL}
    sds.update({name: float(np.nanstd(cont.records[name], ddof=1)) for name in CONDITIONAL})
    return Histogram(np.asarray(edges, dtype=float),
                     {n: counts[n] for n in ESTIMATORS},
                     {n: under[n] for n in ESTIMATORS},
                     {n: over[n] for n in ESTIMATORS}), sds


def max_deviation(rows: list[dict], quantity: Optional[str] = None) -> float:
    devs = [r["abs_deviation"] for r in rows
            if r["abs_deviation"] is not None and (quantity is None or r["quantity"] == quantity)]
    return max(devs)
