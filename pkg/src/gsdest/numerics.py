"""Normal-distribution kernels and generic solvers.

Everything here is pure and accepts either floats or numpy arrays where that
makes sense, so the simulation engine can evaluate estimators for a whole
batch of replicates at once.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Literal

import numpy as np
from scipy import optimize, special
from scipy.optimize import elementwise

_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)
_TWO_PI = 2.0 * math.pi

# Beyond this the naive pdf/sf quotient loses digits; use the asymptotic series.
TAIL_SWITCH = 8.0
_MILLS_TERMS = 24


class SolverError(RuntimeError):
    """Base class for root-finding and fixed-point failures."""


class NoSignChangeError(SolverError):
    pass


class ConvergenceError(SolverError):
    pass


@dataclass(frozen=True)
class Interval:
    lo: float
    hi: float

    def __post_init__(self):
        if not (math.isfinite(self.lo) and math.isfinite(self.hi)):
            raise ValueError(f"interval bounds must be finite, got [{self.lo}, {self.hi}]")
        if not self.lo < self.hi:
            raise ValueError(f"interval requires lo < hi, got [{self.lo}, {self.hi}]")


@dataclass(frozen=True)
class SolverSettings:
    abs_tol: float = 1e-10
    max_iterations: int = 200

    def __post_init__(self):
        if not self.abs_tol > 0:
            raise ValueError("abs_tol must be positive")
        if self.max_iterations < 1:
            raise ValueError("max_iterations must be at least 1")


DEFAULT_SETTINGS = SolverSettings()


# ---------------------------------------------------------------------------
# univariate normal

def std_normal_pdf(x):
    x = np.asarray(x, dtype=float)
    out = _INV_SQRT_2PI * np.exp(-0.5 * x * x)
    return out if out.ndim else float(out)


def std_normal_cdf(x):
    out = special.ndtr(np.asarray(x, dtype=float))
    return out if np.ndim(out) else float(out)


def std_normal_quantile(p):
    p_arr = np.asarray(p, dtype=float)
    if np.any(~((p_arr > 0) & (p_arr < 1))):
        raise ValueError(f"quantile requires 0 < p < 1, got {p}")
    out = special.ndtri(p_arr)
    return out if np.ndim(out) else float(out)


def _mills_asymptotic(u):
    """(1 - Phi(u)) / phi(u) for large positive u by its asymptotic series."""
    inv_u2 = 1.0 / (u * u)
    total = np.ones_like(u)
    term = np.ones_like(u)
    for n in range(1, _MILLS_TERMS + 1):
        term = -term * (2 * n - 1) * inv_u2
        total = total + term
    return total / u


def upper_tail_ratio(u):
    """Inverse Mills ratio phi(u) / (1 - Phi(u)).

    The lower-tail ratio phi(u) / Phi(u) is ``upper_tail_ratio(-u)``.
    """
    u = np.asarray(u, dtype=float)
    big = u > TAIL_SWITCH
    safe = np.where(big, 0.0, u)
    direct = _INV_SQRT_2PI * np.exp(-0.5 * safe * safe) / special.ndtr(-safe)
    if np.any(big):
        asym = 1.0 / _mills_asymptotic(np.where(big, u, TAIL_SWITCH + 1.0))
        direct = np.where(big, asym, direct)
    return direct if direct.ndim else float(direct)


def lower_tail_ratio(u):
    """phi(u) / Phi(u)."""
    return upper_tail_ratio(-np.asarray(u, dtype=float))


def truncated_normal_mean(
    mu, sigma, side: Literal["above_cut", "below_cut"], cut
):
    """Mean of Normal(mu, sigma^2) restricted to one side of ``cut``.

    ``side="above_cut"`` conditions on X >= cut, ``"below_cut"`` on X < cut.
    An infinite cut on the open side means no truncation.
    """
    sigma = np.asarray(sigma, dtype=float)
    if np.any(sigma <= 0):
        raise ValueError("sigma must be positive")
    mu = np.asarray(mu, dtype=float)
    u = (np.asarray(cut, dtype=float) - mu) / sigma
    if side == "above_cut":
        out = mu + sigma * upper_tail_ratio(u)
    elif side == "below_cut":
        out = mu - sigma * lower_tail_ratio(u)
    else:
        raise ValueError(f"unknown side {side!r}")
    out = np.asarray(out)
    return out if out.ndim else float(out)


# ---------------------------------------------------------------------------
# bivariate normal (Drezner-Wesolowsky reduction, Genz's Gauss-Legendre rules)

_GL6 = (
    np.array([0.1713244923791705, 0.3607615730481384, 0.4679139345726904]),
    np.array([0.9324695142031522, 0.6612093864662647, 0.2386191860831970]),
)
_GL12 = (
    np.array([0.04717533638651177, 0.1069393259953183, 0.1600783285433464,
              0.2031674267230659, 0.2334925365383547, 0.2491470458134029]),
    np.array([0.9815606342467191, 0.9041172563704750, 0.7699026741943050,
              0.5873179542866171, 0.3678314989981802, 0.1252334085114692]),
)
_GL20 = (
    np.array([0.01761400713915212, 0.04060142980038694, 0.06267204833410906,
              0.08327674157670475, 0.1019301198172404, 0.1181945319615184,
              0.1316886384491766, 0.1420961093183821, 0.1491729864726037,
              0.1527533871307259]),
    np.array([0.9931285991850949, 0.9639719272779138, 0.9122344282513259,
              0.8391169718222188, 0.7463319064601508, 0.6360536807265150,
              0.5108670019508271, 0.3737060887154196, 0.2277858511416451,
              0.07652652113349733]),
)


def _gl_rule(r: float):
    w, x = _GL6 if abs(r) < 0.3 else _GL12 if abs(r) < 0.75 else _GL20
    return np.concatenate([w, w]), np.concatenate([1.0 - x, 1.0 + x])


def _bvn_upper(h, k, r: float):
    """P(X > h, Y > k) for finite h, k (arrays of equal shape), scalar r."""
    w, x = _gl_rule(r)
    hk = h * k
    if abs(r) < 0.925:
        hs = 0.5 * (h * h + k * k)
        asr = 0.5 * math.asin(r)
        sn = np.sin(asr * x)
        terms = np.exp((sn * hk[..., None] - hs[..., None]) / (1.0 - sn * sn))
        # row-wise sum rather than matmul: BLAS results can depend on batch size
        bvn = np.sum(terms * w, axis=-1)
        return bvn * asr / _TWO_PI + special.ndtr(-h) * special.ndtr(-k)

    if r < 0:
        k = -k
        hk = -hk
    as_ = 1.0 - r * r
    a = math.sqrt(as_)
    bs = (h - k) ** 2
    c = (4.0 - hk) / 8.0
    d = (12.0 - hk) / 80.0
    asr = -0.5 * (bs / as_ + hk)
    bvn = np.where(
        asr > -100.0,
        a * np.exp(asr) * (1.0 - c * (bs - as_) * (1.0 - d * bs) / 3.0 + c * d * as_ * as_),
        0.0,
    )
    b = np.sqrt(bs)
    sp = math.sqrt(_TWO_PI) * special.ndtr(-b / a)
    corr = np.exp(-0.5 * np.maximum(hk, -100.0)) * sp * b * (1.0 - c * bs * (1.0 - d * bs) / 3.0)
    bvn = bvn - np.where(hk > -100.0, corr, 0.0)

    a2 = 0.5 * a
    xs = (a2 * x) ** 2
    asr_pts = -0.5 * (bs[..., None] / xs + hk[..., None])
    keep = asr_pts > -100.0
    sp_pts = 1.0 + c[..., None] * xs * (1.0 + 5.0 * d[..., None] * xs)
    rs = np.sqrt(1.0 - xs)
    ep = np.exp(-(hk[..., None] / 2.0) * xs / (1.0 + rs) ** 2) / rs
    integrand = np.where(keep, np.exp(np.where(keep, asr_pts, 0.0)) * (sp_pts - ep), 0.0)
    bvn = (a2 * np.sum(integrand * w, axis=-1) - bvn) / _TWO_PI

    if r > 0:
        return bvn + special.ndtr(-np.maximum(h, k))
    lower = np.where(h < 0, special.ndtr(k) - special.ndtr(h), special.ndtr(-h) - special.ndtr(-k))
    return np.where(h >= k, -bvn, lower - bvn)


def bivariate_normal_cdf(h, k, rho: float):
    """P(X <= h, Y <= k) for a standard bivariate normal with correlation rho.

    ``h`` and ``k`` broadcast against each other and may contain infinities;
    ``rho`` is a scalar. Absolute error is below 1e-14 in practice.
    """
    rho = float(rho)
    if not -1.0 < rho < 1.0:
        raise ValueError(f"correlation must satisfy |rho| < 1, got {rho}")
    h, k = np.broadcast_arrays(np.asarray(h, dtype=float), np.asarray(k, dtype=float))
    if np.any(np.isnan(h)) or np.any(np.isnan(k)):
        raise ValueError("bivariate_normal_cdf received NaN limits")
    # lower orthant at (h, k) equals upper orthant at (-h, -k)
    uh, uk = -h, -k
    finite = np.isfinite(uh) & np.isfinite(uk)
    out = np.empty(h.shape)
    if np.any(finite):
        out[finite] = _bvn_upper(uh[finite], uk[finite], rho)
    if not np.all(finite):
        nf = ~finite
        hh, kk = uh[nf], uk[nf]
        val = np.where(
            (hh == np.inf) | (kk == np.inf),
            0.0,
            np.where(hh == -np.inf, special.ndtr(-kk), special.ndtr(-hh)),
        )
        out[nf] = val
    out = np.clip(out, 0.0, 1.0)
    return out if out.ndim else float(out)


# ---------------------------------------------------------------------------
# solvers

def find_root(f: Callable[[float], float], bracket: Interval,
              settings: SolverSettings = DEFAULT_SETTINGS) -> float:
    """Brent's method on a sign-changing bracket."""
    flo, fhi = f(bracket.lo), f(bracket.hi)
    if flo == 0.0:
        return float(bracket.lo)
    if fhi == 0.0:
        return float(bracket.hi)
    if np.sign(flo) == np.sign(fhi):
        raise NoSignChangeError(
            f"f has the same sign at both ends of [{bracket.lo}, {bracket.hi}]: {flo}, {fhi}"
        )
    try:
        x, info = optimize.brentq(
            f, bracket.lo, bracket.hi, xtol=settings.abs_tol,
            maxiter=settings.max_iterations, full_output=True, disp=False,
        )
    except RuntimeError as exc:  # pragma: no cover - brentq only raises with disp=True
        raise ConvergenceError(str(exc)) from exc
    if not info.converged:
        raise ConvergenceError(f"no convergence after {info.iterations} iterations ({info.flag})")
    return float(x)


def find_root_batch(f, lo, hi, args=(), settings: SolverSettings = DEFAULT_SETTINGS,
                    max_expansions: int = 30):
    """Elementwise bracketed root finding.

    ``f(x, *args)`` must be vectorised and elementwise; ``args`` are arrays
    broadcastable to the bracket shape (the solver evaluates ``f`` on shrinking
    subsets of elements, so parameters cannot be captured by closure).
    Brackets that do not change sign are widened symmetrically, doubling the
    width each time, before solving.
    """
    lo, hi, *args = np.broadcast_arrays(
        np.array(lo, dtype=float, ndmin=1), np.array(hi, dtype=float, ndmin=1),
        *[np.asarray(a, dtype=float) for a in args])
    lo, hi = lo.copy(), hi.copy()
    args = tuple(a.copy() for a in args)
    flo, fhi = f(lo, *args), f(hi, *args)
    for _ in range(max_expansions):
        bad = np.sign(flo) * np.sign(fhi) > 0
        if not np.any(bad):
            break
        mid = 0.5 * (lo + hi)
        width = hi - lo
        lo = np.where(bad, mid - width, lo)
        hi = np.where(bad, mid + width, hi)
        flo = np.where(bad, f(lo, *args), flo)
        fhi = np.where(bad, f(hi, *args), fhi)
    else:
        raise NoSignChangeError(f"{int(np.sum(bad))} brackets never changed sign")
    res = elementwise.find_root(
        f, (lo, hi), args=args,
        tolerances=dict(xatol=settings.abs_tol, xrtol=0.0, fatol=0.0, frtol=0.0),
        maxiter=settings.max_iterations,
    )
    if not np.all(res.success):
        raise ConvergenceError(
            f"{int(np.sum(~res.success))} of {res.x.size} elements did not converge"
        )
    return res.x


def solve_fixed_point(g: Callable[[float], float], start: float,
                      settings: SolverSettings = DEFAULT_SETTINGS,
                      half_width: float = 1.0) -> float:
    """Solve x = g(x) by plain iteration, falling back to Brent on x - g(x).

    Iteration is abandoned if the residual fails to shrink for five steps in a
    row. The fallback bracket is ``start +/- half_width``, widened by doubling
    until x - g(x) changes sign.
    """
    x = float(start)
    gx = g(x)
    resid = abs(x - gx)
    stalls = 0
    for _ in range(settings.max_iterations):
        if resid <= settings.abs_tol:
            return x
        x = gx
        gx = g(x)
        new_resid = abs(x - gx)
        stalls = stalls + 1 if new_resid >= resid else 0
        resid = new_resid
        if stalls >= 5 or not math.isfinite(resid):
            break
    if resid <= settings.abs_tol:
        return x

    def h(t):
        return t - g(t)

    width = half_width
    for _ in range(40):
        lo, hi = start - width, start + width
        if np.sign(h(lo)) != np.sign(h(hi)):
            tight = SolverSettings(settings.abs_tol * 0.25, settings.max_iterations)
            root = find_root(h, Interval(lo, hi), tight)
            if abs(h(root)) <= settings.abs_tol:
                return root
            break
        width *= 2.0
    raise ConvergenceError(f"fixed point not found from start={start}")


def _residual(t, g, *args):
    return t - g(t, *args)


def solve_fixed_point_batch(g, start, args=(), settings: SolverSettings = DEFAULT_SETTINGS,
                            half_width=1.0):
    """Vectorised counterpart of :func:`solve_fixed_point`.

    ``g(x, *args)`` is elementwise. Elements still unconverged after
    ``max_iterations`` plain iterations go to :func:`find_root_batch` on
    x - g(x) over ``start +/- half_width``.
    """
    start, hw, *args = np.broadcast_arrays(
        np.array(start, dtype=float, ndmin=1), np.asarray(half_width, dtype=float),
        *[np.asarray(a, dtype=float) for a in args])
    x = start.copy()
    gx = g(x, *args)
    for _ in range(settings.max_iterations):
        done = np.abs(x - gx) <= settings.abs_tol
        if np.all(done):
            return x
        x = np.where(done, x, gx)
        gx = g(x, *args)
    todo = ~(np.abs(x - gx) <= settings.abs_tol)
    if np.any(todo):
        tight = SolverSettings(settings.abs_tol * 0.25, settings.max_iterations)
        sub = tuple(a[todo] for a in args)
        x[todo] = find_root_batch(
            lambda t, *a: _residual(t, g, *a),
            start[todo] - hw[todo], start[todo] + hw[todo], args=sub, settings=tight)
    return x
