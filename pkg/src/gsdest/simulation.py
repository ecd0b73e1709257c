"""Monte Carlo engine over the canonical joint distribution of (Z1, Z2).

Randomness is counter-based: replicate ``r`` of a run with seed ``s`` is
driven by the 64-bit words ``2r`` and ``2r + 1`` of the Philox stream keyed
by ``s``. Any chunking of the replicate range, and therefore any number of
worker threads, reproduces the same draws bit for bit.
"""

from __future__ import annotations

import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Iterator, Literal, Optional, Sequence

import numpy as np
from scipy import special

from . import estimators as est
from .design import (CanonicalParams, NormalEndpointSpec, TwoStageDesign,
                     canonical_params, normal_information, obf_constant)
from .estimators import (CONDITIONAL, ESTIMATORS, UNCONDITIONAL, EstimateSet,
                         stop_probability)

Conditioning = Literal["all", "stage2_only", "stage1_only"]

GENERATOR_NAME = "numpy.random.Philox(key=seed); word pair (2r, 2r+1) per replicate; inverse-CDF normals"
THREADS_ENV = "GSDEST_THREADS"
CHUNK = 1 << 15
PROBE_SIZE = 1 << 20
MIN_EVENT_PROBABILITY = 1e-6
DEFAULT_EDGES = np.linspace(-0.2, 0.5, 201)

_WORDS_PER_REPLICATE = 2
_PHILOX_WORDS_PER_STEP = 4


class StarvationError(RuntimeError):
    """The conditioning event is too rare for rejection sampling."""


def default_workers() -> int:
    try:
        return max(1, int(os.environ.get(THREADS_ENV, "1")))
    except ValueError:
        return 1


# ---------------------------------------------------------------------------
# random streams

def _uniform_pairs(seed: int, start: int, count: int) -> np.ndarray:
    """Open-interval uniforms for replicates ``start .. start+count-1``, shape (count, 2)."""
    if not 0 <= seed < 2 ** 64:
        raise ValueError("seed must be an unsigned 64-bit integer")
    first = start * _WORDS_PER_REPLICATE
    steps, offset = divmod(first, _PHILOX_WORDS_PER_STEP)
    bg = np.random.Philox(key=seed)
    bg.advance(steps)
    raw = bg.random_raw(offset + count * _WORDS_PER_REPLICATE)[offset:]
    u = ((raw >> np.uint64(11)).astype(np.float64) + 0.5) * 2.0 ** -53
    return u.reshape(count, _WORDS_PER_REPLICATE)


def _draw_z(params: CanonicalParams, u: np.ndarray):
    n = special.ndtri(u)
    z1 = params.mu1 + n[:, 0]
    z2 = params.mu2 + params.rho * (z1 - params.mu1) + math.sqrt(1.0 - params.rho ** 2) * n[:, 1]
    return z1, z2


def draw_canonical(seed: int, start: int, count: int, params: CanonicalParams):
    """Joint draws of (Z1, Z2) for a block of replicate indices.

    Z2 is drawn for every replicate (whether or not it would be observed),
    which is what the stopping-free correlation check uses.
    """
    return _draw_z(params, _uniform_pairs(seed, start, count))


# ---------------------------------------------------------------------------
# single replicate

@dataclass(frozen=True)
class ReplicateRecord:
    z1: float
    stopped_stage: int
    z2: Optional[float]
    estimates: EstimateSet

    def __post_init__(self):
        if (self.z2 is None) != (self.stopped_stage == 1):
            raise ValueError("z2 must be present exactly when the trial reaches stage 2")


def simulate_replicate(seed: int, index: int, params: CanonicalParams,
                       design: TwoStageDesign) -> ReplicateRecord:
    """Replicate ``index`` of the stream ``seed``; identical to the batch path."""
    z1, z2 = draw_canonical(seed, index, 1, params)
    outcome = est.ObservedOutcome.from_z(float(z1[0]), float(z2[0]), design)
    return ReplicateRecord(outcome.z1, outcome.stopped_stage, outcome.z2,
                           est.estimate_outcome(outcome))


# ---------------------------------------------------------------------------
# scenarios

@dataclass(frozen=True)
class Scenario:
    theta: float
    design: TwoStageDesign
    replicates: int
    seed: int = 0
    conditioning: Conditioning = "all"

    def __post_init__(self):
        if self.replicates < 1:
            raise ValueError("replicates must be at least 1")
        if self.conditioning not in ("all", "stage2_only", "stage1_only"):
            raise ValueError(f"unknown conditioning {self.conditioning!r}")
        if not 0 <= self.seed < 2 ** 64:
            raise ValueError("seed must be an unsigned 64-bit integer")


@dataclass(frozen=True)
class Stat:
    n: int
    mean: Optional[float]
    sd: Optional[float]

    @classmethod
    def of(cls, values: np.ndarray) -> "Stat":
        v = values[~np.isnan(values)]
        n = int(v.size)
        mean = float(np.mean(v)) if n else None
        sd = float(np.std(v, ddof=1)) if n > 1 else None
        return cls(n, mean, sd)


@dataclass
class ScenarioSummary:
    """Means and SDs of every estimator, overall and split by stopping stage.

    ``overall`` holds unconditional estimators over all accepted replicates
    and conditional estimators over the stage-2 continuers among them.
    """

    scenario: Scenario
    attempts: int
    stop_probability_stage1: float
    analytic_stop_probability: float
    n_stage1: int
    n_stage2: int
    overall: dict
    stage1: dict
    stage2: dict

    def to_dict(self) -> dict:
        def stats(d):
            return {k: vars(v) for k, v in d.items()}
        s = self.scenario
        return {
            "theta": s.theta,
            "design": vars(s.design),
            "replicates": s.replicates,
            "seed": s.seed,
            "conditioning": s.conditioning,
            "attempts": self.attempts,
            "stop_probability_stage1": self.stop_probability_stage1,
            "analytic_stop_probability": self.analytic_stop_probability,
            "n_stage1": self.n_stage1,
            "n_stage2": self.n_stage2,
            "overall": stats(self.overall),
            "stage1": stats(self.stage1),
            "stage2": stats(self.stage2),
        }


@dataclass
class ScenarioRun:
    summary: ScenarioSummary
    records: Optional[dict] = field(default=None, repr=False)

    def iter_records(self) -> Iterator[ReplicateRecord]:
        if self.records is None:
            raise ValueError("run was made without keep_records=True")
        r = self.records
        for i in range(r["z1"].size):
            stage = int(r["stopped_stage"][i])
            vals = {}
            for name in ESTIMATORS:
                v = float(r[name][i])
                vals[name] = None if math.isnan(v) else v
            yield ReplicateRecord(float(r["z1"][i]), stage,
                                  None if stage == 1 else float(r["z2"][i]),
                                  EstimateSet(**vals))


def _accept(conditioning: Conditioning, z1, e1):
    if conditioning == "stage2_only":
        return z1 < e1
    if conditioning == "stage1_only":
        return z1 >= e1
    return np.ones(z1.shape, dtype=bool)


def _probe(s: Scenario, params: CanonicalParams) -> None:
    if s.conditioning == "all":
        return
    z1, _ = draw_canonical(s.seed, 0, PROBE_SIZE, params)
    rate = np.count_nonzero(_accept(s.conditioning, z1, s.design.e1)) / PROBE_SIZE
    if rate < MIN_EVENT_PROBABILITY:
        raise StarvationError(
            f"conditioning event {s.conditioning!r} occurred with empirical probability "
            f"{rate:.3g} over {PROBE_SIZE} probe draws")


def _chunk(s: Scenario, params: CanonicalParams, start: int, count: int):
    z1, z2 = draw_canonical(s.seed, start, count, params)
    stopped = z1 >= s.design.e1
    keep = _accept(s.conditioning, z1, s.design.e1)
    z1, z2 = z1[keep], z2[keep]
    out = est.canonical_estimates(z1, z2, s.design)
    out["z1"] = z1
    out["z2"] = np.where(out["stopped_stage"] == 2, z2, np.nan)
    out["index"] = start + np.flatnonzero(keep)
    return start, out, stopped


def _concat(parts: Sequence[dict]) -> dict:
    return {k: np.concatenate([p[k] for p in parts]) for k in parts[0]}


def simulate(s: Scenario, workers: Optional[int] = None):
    """Raw replicate arrays, the number of attempts drawn, and how many stopped early.

    Under rejection sampling the attempt stream is consumed in index order
    and cut right after the last accepted replicate, so the result does not
    depend on the chunk size or thread count.
    """
    workers = default_workers() if workers is None else max(1, int(workers))
    params = canonical_params(s.theta, s.design)
    _probe(s, params)
    parts, attempts, stops, accepted = [], 0, 0, 0
    next_start = 0
    pool = ThreadPoolExecutor(workers) if workers > 1 else None
    try:
        while accepted < s.replicates:
            need = s.replicates - accepted
            total = need if s.conditioning == "all" else max(need, CHUNK * workers)
            jobs = [(st, min(CHUNK, next_start + total - st))
                    for st in range(next_start, next_start + total, CHUNK)]
            if pool is None:
                results = [_chunk(s, params, st, n) for st, n in jobs]
            else:
                results = list(pool.map(lambda j: _chunk(s, params, *j), jobs))
            # reduce in chunk order whatever the thread count
            for start, out, stopped in results:
                if accepted >= s.replicates:
                    break
                take = min(out["z1"].size, s.replicates - accepted)
                if take < out["z1"].size:
                    cut = int(out["index"][take - 1]) + 1 - start
                    out = {k: v[:take] for k, v in out.items()}
                    stopped = stopped[:cut]
                parts.append(out)
                accepted += take
                attempts += stopped.size
                stops += int(np.count_nonzero(stopped))
            next_start += total
    finally:
        if pool is not None:
            pool.shutdown()
    return _concat(parts), attempts, stops


def _split_stats(records: dict, mask) -> dict:
    return {name: Stat.of(records[name][mask]) for name in ESTIMATORS}


def run_scenario(s: Scenario, workers: Optional[int] = None,
                 keep_records: bool = False) -> ScenarioRun:
    """Replicate a scenario and summarise every estimator.

    With ``conditioning="stage2_only"`` (or ``"stage1_only"``) trials are
    redrawn until ``s.replicates`` of them satisfy the condition.
    """
    records, attempts, stops = simulate(s, workers)
    stage = records["stopped_stage"]
    summary = ScenarioSummary(
        scenario=s,
        attempts=attempts,
        stop_probability_stage1=stops / attempts,
        analytic_stop_probability=float(stop_probability(s.theta, s.design)),
        n_stage1=int(np.count_nonzero(stage == 1)),
        n_stage2=int(np.count_nonzero(stage == 2)),
        overall=_split_stats(records, np.ones(stage.shape, dtype=bool)),
        stage1=_split_stats(records, stage == 1),
        stage2=_split_stats(records, stage == 2),
    )
    return ScenarioRun(summary, records if keep_records else None)


def bootstrap_se(design: TwoStageDesign, theta_assumed: float, replicates: int,
                 seed: int = 0, workers: Optional[int] = None) -> dict:
    """Parametric-bootstrap standard errors of the eight estimators.

    Unconditional estimators use all replicates; conditional ones use a
    separate run of ``replicates`` trials that all continue to stage 2.
    """
    if replicates < 2:
        raise ValueError("bootstrap needs at least two replicates")
    uncond = run_scenario(Scenario(theta_assumed, design, replicates, seed, "all"), workers)
    cond = run_scenario(Scenario(theta_assumed, design, replicates, seed, "stage2_only"), workers)
    se = {name: uncond.summary.overall[name].sd for name in UNCONDITIONAL}
    se.update({name: cond.summary.overall[name].sd for name in CONDITIONAL})
    return {name: se[name] for name in ESTIMATORS}


# ---------------------------------------------------------------------------
# bias curves for a normal endpoint

def sweep_design(spec: NormalEndpointSpec, alpha: float) -> TwoStageDesign:
    i1, i2 = normal_information(spec)
    c = obf_constant(alpha, math.sqrt(spec.interim_fraction))
    return TwoStageDesign(e1=c / math.sqrt(spec.interim_fraction), e2=c, i1=i1, i2=i2)


def _mc_bias(theta: float, design: TwoStageDesign, reps: int, seed: int) -> dict:
    z1, z2 = draw_canonical(seed, 0, reps, canonical_params(theta, design))
    stop = z1 >= design.e1
    th1 = z1 / math.sqrt(design.i1)
    th = np.where(stop, th1, z2 / math.sqrt(design.i2))
    n_stop = int(np.count_nonzero(stop))
    n_cont = reps - n_stop
    return {
        "mc_bias_stop_stage1": float(np.mean(th1[stop]) - theta) if n_stop else math.nan,
        "mc_bias_continue_stage2": float(np.mean(th[~stop]) - theta) if n_cont else math.nan,
        "mc_bias_unconditional": float(np.mean(th) - theta),
        "mc_prob_stop": n_stop / reps,
        "mc_n_stop": n_stop,
        "mc_n_continue": n_cont,
    }


def bias_sweep(specs: Sequence[NormalEndpointSpec], alpha: float, theta_grid: Sequence[float],
               mc_reps: int = 0, seed: int = 0) -> list[dict]:
    """Analytic conditional/unconditional MLE bias and stopping probability.

    One row per (spec, theta). With ``mc_reps > 0`` each row also carries
    Monte Carlo estimates of the same four quantities.
    """
    grid = np.asarray(theta_grid, dtype=float)
    if grid.size == 0:
        raise ValueError("theta grid is empty")
    if np.any(np.diff(grid) <= 0):
        raise ValueError("theta grid must be strictly increasing")
    rows = []
    for spec in specs:
        d = sweep_design(spec, alpha)
        a = est.conditional_bias_stage1_stop(grid, d)
        b = est.conditional_bias_stage2(grid, d)
        c = est.unconditional_bias(grid, d)
        p = stop_probability(grid, d)
        for j, theta in enumerate(grid):
            row = {
                "n": spec.total_n,
                "theta": float(theta),
                "bias_stop_stage1": float(a[j]),
                "bias_continue_stage2": float(b[j]),
                "bias_unconditional": float(c[j]),
                "prob_stop": float(p[j]),
            }
            if mc_reps > 0:
                row.update(_mc_bias(float(theta), d, mc_reps, seed))
            rows.append(row)
    return rows


# ---------------------------------------------------------------------------
# sampling-distribution histograms

@dataclass
class Histogram:
    """Per-estimator bin counts with explicit underflow/overflow bins."""

    bin_edges: np.ndarray
    counts: dict
    underflow: dict
    overflow: dict

    def total(self, name: str) -> int:
        return int(self.counts[name].sum()) + self.underflow[name] + self.overflow[name]


def export_histogram(records, edges=DEFAULT_EDGES, names: Sequence[str] = ESTIMATORS) -> Histogram:
    """Bin every estimator's replicate values.

    ``records`` is either the array dict from :func:`run_scenario` with
    ``keep_records=True`` or an iterable of :class:`ReplicateRecord`. Absent
    (NaN/None) values do not contribute.
    """
    edges = np.asarray(edges, dtype=float)
    if edges.ndim != 1 or edges.size < 2:
        raise ValueError("need at least two bin edges")
    if np.any(np.diff(edges) <= 0):
        raise ValueError("bin edges must be strictly increasing")
    if not isinstance(records, dict):
        recs = list(records)
        records = {name: np.array([np.nan if getattr(r.estimates, name) is None
                                   else getattr(r.estimates, name) for r in recs])
                   for name in names}
    counts, under, over = {}, {}, {}
    for name in names:
        v = np.asarray(records[name], dtype=float)
        v = v[~np.isnan(v)]
        # right edge is closed, matching numpy.histogram
        inside = (v >= edges[0]) & (v <= edges[-1])
        counts[name], _ = np.histogram(v[inside], bins=edges)
        under[name] = int(np.count_nonzero(v < edges[0]))
        over[name] = int(np.count_nonzero(v > edges[-1]))
    return Histogram(edges, counts, under, over)


def max_bin_jump(counts: np.ndarray) -> int:
    """Largest absolute change in count between adjacent bins."""
    return int(np.max(np.abs(np.diff(np.asarray(counts)))))
