"""Well-posedness constants for Type-I / Type-II BSVIEs with jumps.

All quantities depend on the weight ``beta`` of the exponential norm and on the
uniform bound ``frak_f`` of the jumps of the clock A.  Everything here is plain
binary64 arithmetic; the root of the first-order condition for delta* is found
with a bracketed bisection refined by secant steps.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Callable, Literal

SQRT11 = math.sqrt(11.0)
KAPPA_SWITCH = 1e-8

# large-beta admissibility boundaries, expressed in the variable e*frak_f
TYPE1_LIMIT_EF = 3.0 * (SQRT11 - 3.0) / 18.0
TYPE2_LIMIT_EF = 1.0 / (3.0 * (51.0 + math.sqrt(2603.0)))

Condition = Literal["type1", "type1_noY", "type2"]


class DomainError(ValueError):
    pass


class ConvergenceError(RuntimeError):
    pass


class NeverAdmissible(ValueError):
    pass


def _check_f(frak_f: float) -> float:
    frak_f = float(frak_f)
    if not frak_f >= 0.0 or math.isinf(frak_f):
        raise DomainError(f"frak_f must be a finite nonnegative number, got {frak_f}")
    return frak_f


def eval_pi(gamma: float, delta: float, frak_f: float) -> float:
    """Pi^f(gamma, delta) = 11/delta + 9 exp((gamma-delta) f)/(gamma-delta)."""
    frak_f = _check_f(frak_f)
    if not (0.0 < delta < gamma):
        raise DomainError(f"need 0 < delta < gamma, got delta={delta}, gamma={gamma}")
    gap = gamma - delta
    return 11.0 / delta + 9.0 * math.exp(gap * frak_f) / gap


def eval_kappa(delta: float, frak_f: float) -> float:
    """kappa^f(delta), the BSDE contraction constant.

    The factor f^2 / (sqrt(d^2 f^2 + 4) - 2) is rewritten as
    (sqrt(d^2 f^2 + 4) + 2) / d^2, which is exact algebra and avoids the 0/0
    form for small f.  Below KAPPA_SWITCH the closed f = 0 limit is returned.
    """
    frak_f = _check_f(frak_f)
    if not delta > 0.0:
        raise DomainError(f"delta must be positive, got {delta}")
    if frak_f < KAPPA_SWITCH:
        return 9.0 / delta + 4.0 * (2.0 + 9.0 * delta) / delta**2
    a = (delta * frak_f) ** 2
    root = math.sqrt(a + 4.0)
    ratio = (root + 2.0) / delta**2
    expo = 0.5 * (delta * frak_f - a / (root + 2.0))
    return 9.0 / delta + (2.0 + 9.0 * delta) * ratio * math.exp(expo)


def delta_star_residual(x: float, beta: float, frak_f: float) -> float:
    """First-order condition 11(b-x)^2 - 9 e^{(b-x) f} x^2 (1 - f (b-x))."""
    c = beta - x
    return 11.0 * c * c - 9.0 * math.exp(c * frak_f) * x * x * (1.0 - frak_f * c)


def bisect_secant(g: Callable[[float], float], lo: float, hi: float,
                  xtol: float, max_bisect: int = 200, max_secant: int = 50) -> float:
    """Root of g on [lo, hi] (sign change required).

    Plain bisection shrinks the bracket to a relative width of 1e-6, then
    secant steps finish the job; any secant iterate leaving the bracket is
    replaced by a bisection step.
    """
    glo, ghi = g(lo), g(hi)
    if glo == 0.0:
        return lo
    if ghi == 0.0:
        return hi
    if (glo > 0) == (ghi > 0):
        raise ConvergenceError(f"no sign change on [{lo}, {hi}]: g={glo}, {ghi}")
    n = 0
    while hi - lo > 1e-6 * max(abs(lo), abs(hi)) and hi - lo > xtol and n < max_bisect:
        mid = 0.5 * (lo + hi)
        gm = g(mid)
        if gm == 0.0:
            return mid
        if (gm > 0) == (glo > 0):
            lo, glo = mid, gm
        else:
            hi, ghi = mid, gm
        n += 1
    x0, g0, x1, g1 = lo, glo, hi, ghi
    for _ in range(max_secant):
        if g1 == g0:
            break
        x2 = x1 - g1 * (x1 - x0) / (g1 - g0)
        if not (lo < x2 < hi):
            x2 = 0.5 * (lo + hi)
        g2 = g(x2)
        if g2 == 0.0:
            return x2
        if (g2 > 0) == (glo > 0):
            lo, glo = x2, g2
        else:
            hi, ghi = x2, g2
        step = abs(x2 - x1)
        x0, g0, x1, g1 = x1, g1, x2, g2
        if step <= xtol or hi - lo <= xtol:
            break
    return x1


def solve_delta_star(beta: float, frak_f: float) -> float:
    """Minimiser of delta -> Pi^f(beta, delta) on ((beta - 1/f)^+, beta)."""
    frak_f = _check_f(frak_f)
    if not beta > 0.0 or math.isinf(beta):
        raise DomainError(f"beta must be positive and finite, got {beta}")
    if frak_f == 0.0:
        # the equation is quadratic: sqrt(11) (b - x) = 3 x
        return SQRT11 * beta / (3.0 + SQRT11)
    # work in c = beta - x on [0, min(beta, 1/f)]: the residual is -9 beta^2 at
    # c = 0 and 11 c^2 > 0 at the far end, so the closed bracket already changes
    # sign and no offset from the endpoints is needed.
    # the residual is evaluated in c directly: beta - (beta - c) loses the
    # digits that make 1 - f c vanish at the far end when beta is large
    cmax = min(beta, 1.0 / frak_f)

    def g(c):
        x = beta - c
        return 11.0 * c * c - 9.0 * math.exp(c * frak_f) * x * x * max(1.0 - frak_f * c, 0.0)

    c = bisect_secant(g, 0.0, cmax, xtol=4.0 * math.ulp(cmax))
    return beta - c


def eval_M(beta: float, frak_f: float) -> float:
    return eval_pi(beta, solve_delta_star(beta, frak_f), frak_f)


def eval_sigmas(beta: float, frak_f: float) -> tuple[float, float]:
    """(Sigma^f(beta), tilde Sigma^f(beta)); requires M^f(beta) < 1/2."""
    ds = solve_delta_star(beta, frak_f)
    m = eval_pi(beta, ds, frak_f)
    if not m < 0.5:
        raise DomainError(f"M >= 1/2 (M={m:.6g} at beta={beta})")
    sigma = 2.0 * m / (1.0 - 2.0 * m)
    gap = beta - ds
    return sigma, sigma * math.exp(gap * frak_f) / gap


@dataclass(frozen=True)
class WellPosednessConstants:
    beta: float
    frak_f: float
    delta_star: float
    kappa: float
    big_m: float
    sigma: float
    sigma_tilde: float
    type2_value: float
    type1_ok: bool
    type1_noY_ok: bool
    type2_ok: bool

    def to_dict(self) -> dict:
        return asdict(self)


def _constants(beta: float, frak_f: float) -> WellPosednessConstants:
    frak_f = _check_f(frak_f)
    ds = solve_delta_star(beta, frak_f)
    kappa = eval_kappa(ds, frak_f)
    m = eval_pi(beta, ds, frak_f)
    gap = beta - ds
    w = math.exp(gap * frak_f) / gap
    if m < 0.5:
        sigma = 2.0 * m / (1.0 - 2.0 * m)
        sigma_t = sigma * w
        t2 = (16.0 + w) * sigma
    else:
        sigma = sigma_t = t2 = math.inf
    base = kappa < 0.5 and m < 0.5
    return WellPosednessConstants(
        beta=float(beta), frak_f=frak_f, delta_star=ds, kappa=kappa, big_m=m,
        sigma=sigma, sigma_tilde=sigma_t, type2_value=t2,
        type1_ok=bool(base and sigma_t < 1.0), type1_noY_ok=bool(base),
        type2_ok=bool(base and t2 < 1.0))


def check_type1(beta: float, frak_f: float) -> WellPosednessConstants:
    return _constants(beta, frak_f)


def check_type2(beta: float, frak_f: float) -> WellPosednessConstants:
    return _constants(beta, frak_f)


def holds(condition: Condition, beta: float, frak_f: float) -> bool:
    c = _constants(beta, frak_f)
    if condition == "type1":
        return c.type1_ok
    if condition == "type1_noY":
        return c.type1_noY_ok
    if condition == "type2":
        return c.type2_ok
    raise DomainError(f"unknown condition {condition!r}")


def asymptotic_limits(frak_f: float) -> dict:
    """beta -> infinity limits of kappa(delta*), M, Sigma, tilde Sigma and the Type-II value.

    With y = e f: kappa, M -> 9y; beta - delta* -> 1/f so that
    e^{(beta-delta*) f}/(beta-delta*) -> y.
    """
    frak_f = _check_f(frak_f)
    y = math.e * frak_f
    m = 9.0 * y
    out = {"kappa": m, "big_m": m}
    if m < 0.5:
        sigma = 2.0 * m / (1.0 - 2.0 * m)
        out.update(sigma=sigma, sigma_tilde=sigma * y, type2_value=(16.0 + y) * sigma)
    else:
        out.update(sigma=math.inf, sigma_tilde=math.inf, type2_value=math.inf)
    return out


def asymptotically_admissible(condition: Condition, frak_f: float) -> bool:
    lim = asymptotic_limits(frak_f)
    base = lim["kappa"] < 0.5 and lim["big_m"] < 0.5
    if condition == "type1_noY":
        return base
    if condition == "type1":
        return base and lim["sigma_tilde"] < 1.0
    if condition == "type2":
        return base and lim["type2_value"] < 1.0
    raise DomainError(f"unknown condition {condition!r}")


@dataclass
class MinBetaResult:
    condition: str
    frak_f: float
    beta: float
    monotone: bool
    scan: list

    def __float__(self) -> float:
        return self.beta


def min_beta(condition: Condition, frak_f: float, rtol: float = 1e-9,
             beta_cap: float = 1e14, scan_points: int = 400) -> MinBetaResult:
    """Infimum of beta such that `condition` holds on [beta, infinity).

    Assumes eventual monotone admissibility; a geometric scan below the first
    admissible point reports any admissible islands (``monotone=False``).
    """
    frak_f = _check_f(frak_f)
    if not asymptotically_admissible(condition, frak_f):
        raise NeverAdmissible(
            f"condition {condition} is never admissible for frak_f={frak_f}: "
            f"its large-beta limit fails")
    hi = 1.0
    while not holds(condition, hi, frak_f):
        hi *= 2.0
        if hi > beta_cap:
            raise ConvergenceError(f"no admissible beta below {beta_cap} for frak_f={frak_f}")
    # geometric scan downwards from hi to locate the top-most failure point
    grid = [hi * (1e-6) ** (k / scan_points) for k in range(scan_points + 1)]
    flags = [holds(condition, b, frak_f) for b in grid]
    scan = list(zip(grid, flags))
    first_false = next((k for k, ok in enumerate(flags) if not ok), None)
    if first_false is None:
        return MinBetaResult(condition, frak_f, grid[-1], True, scan)
    monotone = not any(flags[first_false:])
    lo, up = grid[first_false], grid[first_false - 1]
    while up - lo > rtol * up:
        mid = 0.5 * (lo + up)
        if holds(condition, mid, frak_f):
            up = mid
        else:
            lo = mid
    return MinBetaResult(condition, frak_f, up, monotone, scan)
