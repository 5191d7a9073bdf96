"""Backward solver for (parametrized) BSDEs on a discrete world.

Scheme on step j (dB_j = B(t_{j+1}) - B(t_j)):

    (E_j Y_{j+1}, Z_j, U_j, M_{j+1}) = step_represent(Y_{j+1})
    Y_j = E_j Y_{j+1} + f(t_j, Y_j, Z_j, U_j) dB_j      (implicit in Y_j)

so the discrete identity Y_{j+1} - Y_j = -f dB_j + Z dW + U.dpi~ + M holds
by construction.
"""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .conditional import default_engine, step_represent
from .lattice import World


class SolverWarning(UserWarning):
    pass


@dataclass
class Generator:
    """Driver f(t, s, y, z, u[, zeta, nu]) with Lipschitz data.

    ``fn`` must broadcast: ``t`` may be a column (rows of a BSVIE sweep),
    ``y``/``z`` are arrays over nodes, ``u`` has a trailing mark axis.  Type-II
    drivers (``two_sided=True``) also receive ``zeta = Z(s,t)`` and
    ``nu = U(s,t)``.  Lipschitz constants follow
    |f - f'|^2 <= varpi |dy|^2 + theta_o |dz|^2 + theta_n ||du||^2_mu.
    A driver with k active arguments picks up a factor k in each constant
    (Cauchy-Schwarz); ``y_lipschitz`` optionally gives the sharper constant of
    y -> f alone, used to decide whether the implicit step contracts.
    """
    fn: Callable
    varpi: float = 0.0
    theta_o: float = 0.0
    theta_n: float = 0.0
    uses_y: bool = True
    two_sided: bool = False
    name: str = "f"
    y_lipschitz: float | None = None

    @property
    def K(self) -> float:
        return math.sqrt(max(math.sqrt(self.varpi), self.theta_o, self.theta_n))

    @property
    def lip_y(self) -> float:
        return self.y_lipschitz if self.y_lipschitz is not None else math.sqrt(self.varpi)

    def __call__(self, t, s, y, z, u, zeta=None, nu=None):
        if self.two_sided:
            if zeta is None:
                zeta = np.zeros_like(z)
            if nu is None:
                nu = np.zeros_like(u)
            return self.fn(t, s, y, z, u, zeta, nu)
        return self.fn(t, s, y, z, u)

    def zero(self, t, s, shape=(), m=0):
        z = np.zeros(shape)
        return np.broadcast_to(self(t, s, z, z, np.zeros(shape + (m,))), shape)

    def frozen(self, t) -> "Generator":
        """Generator with its first time argument frozen at ``t``."""
        return Generator(lambda _t, s, *a: self.fn(t, s, *a), self.varpi, self.theta_o,
                         self.theta_n, self.uses_y, self.two_sided, f"{self.name}|t={t}", self.y_lipschitz)

    def check_lipschitz(self, lam, n: int = 200, seed: int = 0, scale: float = 3.0,
                        T: float = 1.0) -> float:
        """Largest observed ratio |df|^2 / bound over random pairs (<= 1 expected)."""
        rng = np.random.default_rng(seed)
        lam = np.asarray(lam, dtype=float)
        m = len(lam)
        worst = 0.0
        for _ in range(n):
            t, s = np.sort(rng.uniform(0, T, 2))
            y, y2, z, z2 = rng.normal(0, scale, 4)
            u, u2 = rng.normal(0, scale, (2, m))
            a = self(t, s, np.array(y), np.array(z), u)
            b = self(t, s, np.array(y2), np.array(z2), u2)
            bound = self.varpi * (y - y2) ** 2 + self.theta_o * (z - z2) ** 2 + self.theta_n * float(((u - u2) ** 2) @ lam)
            diff = float(np.abs(a - b)) ** 2
            if bound > 0:
                worst = max(worst, diff / bound)
            elif diff > 1e-24:
                worst = math.inf
        return worst


def from_lipschitz(fn: Callable, y: float = 0.0, z: float = 0.0, u2: float = 0.0,
                   **kw) -> Generator:
    """Generator from per-argument constants: |df| <= y|dy|, <= z|dz| and
    |df|^2 <= u2 ||du||^2_mu.  The squared constants pick up the number of
    active arguments."""
    k = max(1, int(y > 0) + int(z > 0) + int(u2 > 0))
    kw.setdefault("uses_y", y > 0)
    return Generator(fn, varpi=k * y * y, theta_o=k * z * z, theta_n=k * u2, y_lipschitz=float(y), **kw)


def linear_generator(a=0.0, b=0.0, c=None, g=None, lam=None, bounds=None,
                     name="linear") -> Generator:
    """f = a(t,s) y + b(t,s) z + sum_k c_k lam_k u_k + g(t,s).

    ``a``, ``b``, ``g`` are constants or callables of (t, s); ``c`` is a
    constant per-mark vector and the u-term is the mu-integral of c*u.  For
    callable coefficients pass ``bounds=(sup|a|, sup|b|)``.
    """
    def val(x, t, s):
        return x(t, s) if callable(x) else x

    cvec = None if c is None else np.atleast_1d(np.asarray(c, dtype=float))
    lamv = None if lam is None else np.asarray(lam, dtype=float)
    if cvec is not None and lamv is None:
        raise ValueError("the jump coefficient needs the mark intensities lam")

    def fn(t, s, y, z, u):
        out = val(a, t, s) * y + val(b, t, s) * z
        if cvec is not None and u.shape[-1]:
            out = out + u @ (cvec * lamv)
        if g is not None:
            out = out + val(g, t, s)
        return out

    if bounds is not None:
        amax, bmax = bounds
    else:
        if callable(a) or callable(b):
            raise ValueError("callable coefficients need explicit bounds")
        amax, bmax = abs(a), abs(b)
    theta_n = 0.0 if cvec is None else float(np.sum(cvec**2 * lamv))
    uses_y = callable(a) or a != 0
    k = max(1, int(amax != 0) + int(bmax != 0) + int(theta_n != 0))
    return Generator(fn, varpi=k * float(amax) ** 2, theta_o=k * float(bmax) ** 2, theta_n=k * theta_n,
                     uses_y=uses_y, name=name, y_lipschitz=float(amax))


@dataclass
class BSDESolution:
    Y: list            # level j arrays, j = 0..N
    Z: list            # level j arrays, j = 0..N-1
    U: list            # level j arrays (n_j, m)
    M: list            # level j+1 arrays
    world: World = field(repr=False)
    engine: object = field(repr=False)
    meta: dict = field(default_factory=dict)

    @property
    def Y0(self) -> float:
        return float(np.asarray(self.Y[0]).reshape(-1)[0]) if self.world.kind == "tree" else float(self.world.expect(self.Y[0], 0))


def implicit_solve(f: Generator, t, s, mean, z, u, dB, max_inner=20, tol=1e-13, zeta=None, nu=None):
    """Fixed point y = mean + f(t, s, y, z, u) dB (Picard, per node)."""
    if not f.uses_y:
        return mean + f(t, s, np.zeros_like(mean), z, u, zeta, nu) * dB, 0, True
    if f.lip_y * dB >= 1.0:
        warnings.warn(f"Lipschitz*dB = {f.lip_y * dB:.3g} >= 1: explicit step used", SolverWarning)
        return mean + f(t, s, mean, z, u, zeta, nu) * dB, 0, False
    y = mean + f(t, s, mean, z, u, zeta, nu) * dB
    for it in range(1, max_inner + 1):
        y_new = mean + f(t, s, y, z, u, zeta, nu) * dB
        err = np.max(np.abs(y_new - y)) if np.size(y) else 0.0
        y = y_new
        if err <= tol * max(1.0, float(np.max(np.abs(y))) if np.size(y) else 1.0):
            return y, it, True
    return y, max_inner, False


def solve_bsde(xi, f: Generator, world: World, engine=None, max_inner: int = 20,
               tol: float = 1e-13, t_param=None) -> BSDESolution:
    """Backward recursion for Y_t = xi + int f(s, Y, Z, U) dB - martingale terms.

    ``f`` is called as f(t, s, ...); with ``t_param=None`` the first argument
    equals the current time (plain BSDE), otherwise it is frozen at t_param.
    """
    engine = engine or default_engine(world)
    N = world.N
    Y = [None] * (N + 1)
    Z = [None] * N
    U = [None] * N
    M = [None] * N
    Y[N] = np.asarray(xi, dtype=float).copy()
    unconverged = 0
    for j in range(N - 1, -1, -1):
        dec = step_represent(engine, world, Y[j + 1], j)
        s = world.times[j]
        t = s if t_param is None else t_param
        Y[j], _, ok = implicit_solve(f, t, s, dec.mean, dec.Z, dec.U, world.dB[j], max_inner, tol)
        unconverged += int(not ok)
        Z[j], U[j], M[j] = dec.Z, dec.U, dec.M
    meta = {"engine": engine.describe(), "unconverged_steps": unconverged}
    return BSDESolution(Y, Z, U, M, world, engine, meta)


def solve_parametrized(t_index: int, Phi_t, f_t: Generator, world: World, engine=None,
                       **kw) -> BSDESolution:
    """lambda(t, .) for t = times[t_index]: the BSDE with terminal Phi(t) and the
    driver's first argument frozen at t, over the full backward range."""
    return solve_bsde(Phi_t, f_t, world, engine, t_param=world.times[t_index], **kw)


def bsde_residual(sol: BSDESolution, f: Generator, t_param=None) -> float:
    """Max violation of Y_{j+1} - Y_j = -f dB + Z dW + U.dpi~ + M over all nodes."""
    w = sol.world
    worst = 0.0
    for j in range(w.N):
        s = w.times[j]
        t = s if t_param is None else t_param
        phi = w.phi(j)
        mart = sol.M[j].copy()
        if w.brownian:
            mart += w.lift(sol.Z[j], j, j + 1) * phi[:, 0]
        if w.m:
            mart += (w.lift_u(sol.U[j], j, j + 1) * phi[:, int(w.brownian):]).sum(-1)
        fval = f(t, s, sol.Y[j], sol.Z[j], sol.U[j])
        lhs = sol.Y[j + 1] - w.lift(sol.Y[j], j, j + 1)
        rhs = -w.lift(np.broadcast_to(fval, sol.Y[j].shape), j, j + 1) * w.dB[j] + mart
        worst = max(worst, float(np.max(np.abs(lhs - rhs))))
    return worst


def pathwise_quadratic_parts(sol: BSDESolution):
    """Per terminal node: sup |Y|, int |Z|^2 dt, sum |U|^2 dN (pi-form),
    int |U|^2 mu dt (mu-form) and [M]."""
    w = sol.world
    N = w.N
    supY = np.abs(w.lift(sol.Y[N], N, N))
    z2 = np.zeros_like(supY)
    upi = np.zeros_like(supY)
    umu = np.zeros_like(supY)
    m2 = np.zeros_like(supY)
    for j in range(N):
        supY = np.maximum(supY, np.abs(w.lift(sol.Y[j], j, N)))
        z2 += w.lift(sol.Z[j] ** 2, j, N) * w.dt[j]
        if w.m:
            u2 = w.lift_u(sol.U[j] ** 2, j, j + 1)
            upi += w.lift((u2 * w.dN[j]).sum(-1), j + 1, N)
            umu += w.lift((sol.U[j] ** 2 * w.lam).sum(-1), j, N) * w.dt[j]
        m2 += w.lift(sol.M[j] ** 2, j + 1, N)
    return {"supY": supY, "Z2": z2, "U2_pi": upi, "U2_mu": umu, "M2": m2}


def bsde_apriori_check(sol: BSDESolution, xi, f: Generator, p: float = 2.0) -> dict:
    """Empirical constant of the L^p a-priori estimate.

    left  = E[sup|Y|^p + (int|Z|^2)^{p/2} + (sum|U|^2 dN)^{p/2} + [M]^{p/2}]
    right = E[|xi|^p + (int |f(s,0,0,0)| ds)^p]
    """
    w = sol.world
    N = w.N
    # the jump part uses the pi-integrated form, which is also the only one
    # that makes sense for p < 2
    parts = pathwise_quadratic_parts(sol)
    h = p / 2.0
    left_path = parts["supY"] ** p + parts["Z2"] ** h + parts["U2_pi"] ** h + parts["M2"] ** h
    f0 = np.zeros(w.n_nodes(N))
    for j in range(N):
        s = w.times[j]
        val = np.abs(np.broadcast_to(f.zero(s, s, (w.n_nodes(j),), w.m), (w.n_nodes(j),)))
        f0 = f0 + w.lift(val, j, N) * w.dB[j]
    right_path = np.abs(np.asarray(xi)) ** p + f0**p
    left = float(w.expect(left_path, N))
    right = float(w.expect(right_path, N))
    finite = math.isfinite(left) and math.isfinite(right)
    if right == 0.0:
        ratio = math.nan
        degenerate = True
    else:
        ratio = left / right
        degenerate = False
    return {"p": p, "left": left, "right": right, "ratio": ratio, "degenerate": degenerate,
            "finite": finite}
