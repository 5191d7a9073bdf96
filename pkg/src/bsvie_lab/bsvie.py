"""Type-I and Type-II BSVIE solvers on a discrete world.

Discrete equation on the upper triangle (rows t_i, columns s_j, j >= i):

    lam(t_i, s_j) = E_j lam(t_i, s_{j+1}) + f(t_i, s_j, Y(s_j), Z(t_i,s_j), U(t_i,s_j)) dB_j
    lam(t_i, t_N) = Phi(t_i),   Y(t_i) = lam(t_i, t_i)

with (Z, U, M)(t_i, s_j) from the one-step decomposition of lam(t_i, s_{j+1}).
On the lower triangle (j < i) the M-solution convention fills (Z, U, M)(t_i, s_j)
from the martingale representation of Y(t_i).

Storage: ``Z[j]`` has shape (N+1, n_j) with row i = t index; ``U[j]`` is
(N+1, n_j, m) and ``M[j]`` is (N+1, n_{j+1}).  Rows i <= j hold the upper
triangle (diagonal included), rows i > j the lower one.
"""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .bsde import Generator, SolverWarning, implicit_solve
from .conditional import condexp, default_engine, step_represent
from .constants import ConvergenceError
from .lattice import World


class SandwichError(ValueError):
    pass


@dataclass
class FreeTerm:
    """Phi(t_i) as level-N arrays.

    ``values`` is a callable i -> array (broadcast to the terminal level), an
    array of shape (N+1, n_N) or (N+1,), or a scalar.  ``alpha``/``rho`` record
    Hoelder data E|Phi(t)-Phi(t')|^p <= rho |t-t'|^{alpha p} when known.
    """
    values: object
    alpha: float | None = None
    rho: float | None = None

    def matrix(self, world: World) -> np.ndarray:
        N, L = world.N, world.n_nodes(world.N)
        v = self.values
        if callable(v):
            rows = [np.broadcast_to(np.asarray(v(i), dtype=float), (L,)) for i in range(N + 1)]
            return np.array(rows)
        arr = np.asarray(v, dtype=float)
        if arr.ndim == 0:
            return np.full((N + 1, L), float(arr))
        if arr.ndim == 1:
            if arr.shape[0] != N + 1:
                raise ValueError("a 1-d free term needs one value per grid time")
            return np.repeat(arr[:, None], L, axis=1)
        if arr.shape != (N + 1, L):
            raise ValueError(f"free term shape {arr.shape} != {(N + 1, L)}")
        return arr.copy()


def as_free_term(Phi) -> FreeTerm:
    return Phi if isinstance(Phi, FreeTerm) else FreeTerm(Phi)


@dataclass
class BSVIESolution:
    Y: list
    Z: list
    U: list
    M: list
    world: World = field(repr=False)
    engine: object = field(repr=False)
    region: str = "upper"
    meta: dict = field(default_factory=dict)

    @property
    def N(self) -> int:
        return self.world.N

    def Y0(self) -> float:
        return float(self.world.expect(self.Y[0], 0))

    def copy(self) -> "BSVIESolution":
        return BSVIESolution([y.copy() for y in self.Y], [z.copy() for z in self.Z],
                             [u.copy() for u in self.U], [m.copy() for m in self.M],
                             self.world, self.engine, self.region, dict(self.meta))


def empty_solution(world: World, engine) -> BSVIESolution:
    N, m = world.N, world.m
    Y = [np.zeros(world.n_nodes(j)) for j in range(N + 1)]
    Z = [np.zeros((N + 1, world.n_nodes(j))) for j in range(N)]
    U = [np.zeros((N + 1, world.n_nodes(j), m)) for j in range(N)]
    M = [np.zeros((N + 1, world.n_nodes(j + 1))) for j in range(N)]
    return BSVIESolution(Y, Z, U, M, world, engine)


def _zeta_nu(sol: BSVIESolution, rows: np.ndarray, j: int):
    """zeta = Z(s_j, t_i), nu = U(s_j, t_i) for rows i, lifted to level j.

    Both vanish on the diagonal i == j (a single grid point of the ds-integral).
    """
    w = sol.world
    n_j = w.n_nodes(j)
    zeta = np.zeros((len(rows), n_j))
    nu = np.zeros((len(rows), n_j, w.m))
    for r, i in enumerate(rows):
        if i < j:
            zeta[r] = w.lift(sol.Z[i][j], i, j)
            nu[r] = w.lift_u(sol.U[i][j], i, j)
    return zeta, nu


def _sweep(sol: BSVIESolution, f: Generator, V: np.ndarray, rows: np.ndarray, level: int,
           col_lo: int, y_mode: str, y_frozen=None, max_inner=20, inner_tol=1e-13) -> np.ndarray:
    """Backward sweep of the parametrized family.

    ``V`` holds lam(t_i, s_level) for ``rows`` (ascending) at ``level``.  Columns
    level-1 down to ``col_lo`` are processed; a row i finishes when the sweep
    reaches level i, which sets Y(t_i).  Returns the rows still open at col_lo.
    y_mode: "none" (driver ignores y), "frozen" (y_frozen[j]) or "implicit"
    (diagonal solved by fixed point, Y(s_j) from sol.Y otherwise).
    """
    w = sol.world
    engine = sol.engine
    rows = np.asarray(rows, dtype=int)
    V = np.asarray(V, dtype=float)
    unconverged = 0
    # a row equal to the starting level is already finished
    done = rows == level
    if done.any():
        sol.Y[level] = V[done][0].copy()
        V, rows = V[~done], rows[~done]
    for j in range(level - 1, col_lo - 1, -1):
        if len(rows) == 0:
            break
        dec = step_represent(engine, w, V, j)
        s = w.times[j]
        tcol = w.times[rows][:, None]
        if f.two_sided:
            zeta, nu = _zeta_nu(sol, rows, j)
        else:
            zeta = nu = None
        dB = w.dB[j]
        diag = rows == j
        if y_mode == "none":
            yarg = np.zeros(w.n_nodes(j))
        elif y_mode == "frozen":
            yarg = y_frozen[j]
        elif y_mode == "implicit":
            if diag.any():
                k = int(np.flatnonzero(diag)[0])
                zk = None if zeta is None else zeta[k]
                nk = None if nu is None else nu[k]
                yj, _, ok = implicit_solve(f, s, s, dec.mean[k], dec.Z[k], dec.U[k], dB,
                                           max_inner, inner_tol, zk, nk)
                unconverged += int(not ok)
                sol.Y[j] = yj
            yarg = sol.Y[j]
        else:
            raise ValueError(f"unknown y_mode {y_mode!r}")
        fval = f(tcol, s, yarg, dec.Z, dec.U, zeta, nu)
        V = dec.mean + np.broadcast_to(fval, dec.mean.shape) * dB
        if y_mode == "implicit" and diag.any():
            V[diag] = sol.Y[j]
        sol.Z[j][rows] = dec.Z
        sol.U[j][rows] = dec.U
        sol.M[j][rows] = dec.M
        if diag.any():
            sol.Y[j] = V[diag][0].copy()
            V, rows = V[~diag], rows[~diag]
    sol.meta["unconverged_inner"] = sol.meta.get("unconverged_inner", 0) + unconverged
    return V


def _run_type1(Phi, f: Generator, world: World, engine, y_mode: str, y_frozen=None,
               **kw) -> BSVIESolution:
    engine = engine or default_engine(world)
    sol = empty_solution(world, engine)
    P = as_free_term(Phi).matrix(world)
    _sweep(sol, f, P, np.arange(world.N + 1), world.N, 0, y_mode, y_frozen, **kw)
    sol.meta.update(solver="type1", y_mode=y_mode, engine=engine.describe())
    return sol


def solve_type1_noY(Phi, h: Generator, world: World, engine=None) -> BSVIESolution:
    """Diagonal construction Y(t) = lam(t, t) for a driver without y."""
    if h.uses_y and h.varpi > 0:
        raise ValueError("solve_type1_noY needs a driver that does not depend on y")
    return _run_type1(Phi, h, world, engine, "none")


def solve_type1(Phi, f: Generator, world: World, engine=None, **kw) -> BSVIESolution:
    """Direct solve: the diagonal is implicit, later columns reuse Y(s_j).

    This is the fixed point of the Picard map in one backward pass.
    """
    return _run_type1(Phi, f, world, engine, "implicit" if f.uses_y else "none", **kw)


def trapezoid_weights(times) -> np.ndarray:
    dt = np.diff(times)
    w = np.zeros(len(times))
    w[:-1] += 0.5 * dt
    w[1:] += 0.5 * dt
    return w


def s2_norm(world: World, Y: list, beta: float | None = None) -> float:
    """sqrt(sum_i w_i e^{beta A(t_i)} E|Y(t_i)|^2) with trapezoid weights in t."""
    w = trapezoid_weights(world.times)
    if beta is not None:
        w = w * np.exp(beta * (world.clock.A - world.clock.A[-1]))
    tot = 0.0
    for i, y in enumerate(Y):
        tot += w[i] * float(world.expect(np.abs(y) ** 2, i))
    return math.sqrt(tot)


def picard_type1(Phi, f: Generator, world: World, engine=None, tol: float = 1e-10,
                 max_iter: int = 100, y0=None, beta: float | None = None, raise_on_fail=False):
    """Picard iteration y_{n+1} = Theta(y_n) with frozen y.

    Returns (solution, gaps) where gaps[n] = ||y_{n+1} - y_n|| in the
    trapezoid-weighted S^2 norm (e^{beta A}-weighted when ``beta`` is given).
    """
    engine = engine or default_engine(world)
    N = world.N
    if y0 is None:
        y = [np.zeros(world.n_nodes(j)) for j in range(N + 1)]
    elif np.isscalar(y0):
        y = [np.full(world.n_nodes(j), float(y0)) for j in range(N + 1)]
    else:
        y = [np.asarray(v, dtype=float) for v in y0]
    gaps = []
    sol = None
    for it in range(max_iter):
        sol = _run_type1(Phi, f, world, engine, "frozen" if f.uses_y else "none", y_frozen=y)
        diff = [a - b for a, b in zip(sol.Y, y)]
        gaps.append(s2_norm(world, diff, beta))
        y = [v.copy() for v in sol.Y]
        if gaps[-1] <= tol:
            break
    converged = bool(gaps and gaps[-1] <= tol)
    sol.meta.update(solver="picard_type1", iterations=len(gaps), converged=converged,
                    final_gap=gaps[-1] if gaps else 0.0, tol=tol)
    if not converged:
        msg = (f"Picard did not reach tol={tol} in {max_iter} iterations "
               f"(final gap {gaps[-1]:.3g}); the smallness condition may be violated")
        if raise_on_fail:
            raise ConvergenceError(msg)
        warnings.warn(msg, SolverWarning)
    return sol, gaps


def complete_rows(sol: BSVIESolution, row_lo: int, row_hi: int, col_lo: int, col_hi: int | None = None):
    """Fill (Z, U, M)(t_i, s_j) for row_lo <= i <= row_hi and col_lo <= j < min(i, col_hi)
    from the martingale representation of Y(t_i)."""
    w = sol.world
    engine = sol.engine
    N = w.N
    col_hi = N if col_hi is None else col_hi
    R = None
    rows = np.zeros(0, dtype=int)
    for j in range(min(row_hi, N) - 1, col_lo - 1, -1):
        i_new = j + 1
        if row_lo <= i_new <= row_hi:
            new = sol.Y[i_new][None, :]
            R = new if R is None else np.vstack([new, R])
            rows = np.concatenate([[i_new], rows])
        if R is None:
            continue
        if j < col_hi:
            dec = step_represent(engine, w, R, j)
            sol.Z[j][rows] = dec.Z
            sol.U[j][rows] = dec.U
            sol.M[j][rows] = dec.M
            R = dec.mean
        else:
            R = engine.step(w, R, j)
    return sol


def complete_M(sol: BSVIESolution, from_step: int = 0, world: World | None = None, engine=None) -> BSVIESolution:
    """M-solution completion of the lower triangle from ``from_step``."""
    if world is not None and world is not sol.world:
        raise ValueError("solution and world differ")
    if engine is not None:
        sol.engine = engine
    complete_rows(sol, from_step + 1, sol.world.N, from_step)
    sol.region = "full"
    sol.meta["completed_from"] = from_step
    return sol


def upper_residual(sol: BSVIESolution, Phi, f: Generator) -> float:
    """Max violation of the defining equation on the upper triangle.

    For each row i checks lam(t_i, s_{j+1}) - lam(t_i, s_j) = -f dB_j + Z dW + U.dpi~ + M
    after rebuilding lam(t_i, .) forward from Y(t_i), and lam(t_i, T) = Phi(t_i).
    """
    w = sol.world
    N = w.N
    P = as_free_term(Phi).matrix(w)
    worst = 0.0
    for i in range(N + 1):
        lam = sol.Y[i]
        for j in range(i, N):
            phi = w.phi(j)
            s = w.times[j]
            z, u = sol.Z[j][i], sol.U[j][i]
            if f.two_sided:
                zt, nt = _zeta_nu(sol, np.array([i]), j)
                fv = f(w.times[i], s, sol.Y[j], z, u, zt[0], nt[0])
            else:
                fv = f(w.times[i], s, sol.Y[j], z, u)
            nxt = w.lift(lam - np.broadcast_to(fv, lam.shape) * w.dB[j], j, j + 1) + sol.M[j][i]
            if w.brownian:
                nxt = nxt + w.lift(z, j, j + 1) * phi[:, 0]
            if w.m:
                nxt = nxt + (w.lift_u(u, j, j + 1) * phi[:, int(w.brownian):]).sum(-1)
            lam = nxt
        worst = max(worst, float(np.max(np.abs(lam - P[i]))))
    return worst


def m_solution_residual(sol: BSVIESolution, from_step: int = 0) -> float:
    """Max violation of Y(t_i) = E[Y(t_i)|F_S] + sum_{S<=j<i} (Z dW + U.dpi~ + M)(t_i, s_j)."""
    w = sol.world
    worst = 0.0
    for i in range(from_step + 1, w.N + 1):
        v = condexp(sol.engine, w, sol.Y[i], from_step, i)
        for j in range(from_step, i):
            phi = w.phi(j)
            v = w.lift(v, j, j + 1) + sol.M[j][i]
            if w.brownian:
                v = v + w.lift(sol.Z[j][i], j, j + 1) * phi[:, 0]
            if w.m:
                v = v + (w.lift_u(sol.U[j][i], j, j + 1) * phi[:, int(w.brownian):]).sum(-1)
        worst = max(worst, float(np.max(np.abs(v - sol.Y[i]))))
    return worst


# ---------------------------------------------------------------- SFIE / Type-II


def solve_sfie(Phi, h: Generator, R: int, S: int, world: World, engine=None,
               sol: BSVIESolution | None = None):
    """psi^S(t) = lam(t, S) for t_R <= t < t_S from the parametrized BSDE on [S, T].

    Y(s) for s >= S is read from ``sol`` when the driver uses y (and zeta/nu for
    two-sided drivers).  Returns (psi, sol) where psi has shape (S-R, n_S); the
    Z, U, M grids of rows [R, S) over columns [S, T) are written into sol.
    """
    engine = engine or (sol.engine if sol is not None else default_engine(world))
    if not (0 <= R < S <= world.N):
        raise ValueError("need 0 <= R < S <= N")
    if sol is None:
        sol = empty_solution(world, engine)
    P = as_free_term(Phi).matrix(world)
    rows = np.arange(R, S)
    mode = "implicit" if h.uses_y else "none"
    psi = _sweep(sol, h, P[R:S], rows, world.N, S, mode)
    sol.meta["sfie"] = {"R": R, "S": S, "psi_second_moment": float(np.max(world.expect(psi**2, S)))}
    return psi, sol


def _solve_block(sol, f, P, r, s, tol, max_iter):
    """Rows [r, s) given everything at rows >= s; returns (converged, iterations)."""
    w = sol.world
    N = w.N
    # lower rectangle: Z(t_i, s_j) for i >= s, r <= j < s
    complete_rows(sol, s, N, r, s)
    # SFIE on [s, T] for rows [r, s)
    rows = np.arange(r, s)
    psi = _sweep(sol, f, P[r:s], rows, N, s, "implicit")
    # fixed point on the square [r, s]
    prev = None
    for it in range(1, max_iter + 1):
        _sweep(sol, f, psi.copy(), rows, s, r, "implicit")
        complete_rows(sol, r + 1, s - 1, r, s)
        cur = np.concatenate([np.ravel(sol.Y[i]) for i in range(r, s)]
                             + [np.ravel(sol.Z[j][j + 1:s]) for j in range(r, s - 1)]
                             + [np.ravel(sol.U[j][j + 1:s]) for j in range(r, s - 1)])
        if not np.all(np.isfinite(cur)):
            return False, it
        if prev is not None:
            change = float(np.max(np.abs(cur - prev))) if cur.size else 0.0
            scale = max(1.0, float(np.max(np.abs(cur))))
            if change <= tol * scale:
                return True, it
            if change > 1e8 * scale:
                return False, it
        if s - r == 1 or not f.two_sided:
            # no zeta inside the square: one pass is exact
            return True, it
        prev = cur
    return False, max_iter


def solve_type2(Phi, f: Generator, world: World, engine=None, interval_plan=None,
                tol: float = 1e-14, max_iter: int = 200, max_splits: int = 12) -> BSVIESolution:
    """Adapted M-solution of a Type-II BSVIE (p = 2).

    ``interval_plan`` is a list of grid indices 0 = k_0 < ... < k_n = N (default:
    a single block).  Blocks are processed right to left: the lower rectangle is
    completed from the known Y, the SFIE gives the terminal values of the
    square, and a fixed-point iteration with zeta/nu frozen solves the square.
    A block whose iteration fails is bisected (at most ``max_splits`` times).
    """
    engine = engine or default_engine(world)
    N = world.N
    sol = empty_solution(world, engine)
    P = as_free_term(Phi).matrix(world)
    sol.Y[N] = P[N].copy()
    plan = list(interval_plan) if interval_plan is not None else [0, N]
    if plan[0] != 0 or plan[-1] != N or any(b <= a for a, b in zip(plan, plan[1:])):
        raise ValueError("interval_plan must increase from 0 to N")
    blocks = list(zip(plan[:-1], plan[1:]))[::-1]
    used = []
    splits = 0
    iters = []
    while blocks:
        r, s = blocks.pop(0)
        ok, it = _solve_block(sol, f, P, r, s, tol, max_iter)
        if not ok:
            if s - r == 1 or splits >= max_splits:
                raise ConvergenceError(f"Type-II block [{r},{s}] did not converge")
            splits += 1
            for j in range(N):
                sol.Z[j][r:s] = 0.0
                sol.U[j][r:s] = 0.0
                sol.M[j][r:s] = 0.0
            mid = (r + s) // 2
            blocks[:0] = [(mid, s), (r, mid)]
            continue
        used.append((r, s))
        iters.append(it)
    complete_M(sol, 0)
    sol.meta.update(solver="type2", plan=sorted({0, N} | {b for blk in used for b in blk}),
                    splits=splits, inner_iterations=iters, engine=engine.describe())
    return sol


# ---------------------------------------------------------------- sandwich iteration


def check_sandwich(f1: Generator, f2: Generator, f_bar: Generator, world: World,
                   n: int = 500, seed: int = 0, scale: float = 3.0) -> dict:
    rng = np.random.default_rng(seed)
    m = world.m
    T = world.clock.T
    worst_order = 0.0
    worst_mono = 0.0
    for _ in range(n):
        t, s = np.sort(rng.uniform(0, T, 2))
        y, y2, z = rng.normal(0, scale, 3)
        u = rng.normal(0, scale, m)
        ya, za = np.array([y]), np.array([z])
        a, b, c = (float(g(t, s, ya, za, u[None, :])[0]) for g in (f1, f_bar, f2))
        worst_order = max(worst_order, a - b, b - c)
        lo, hi = min(y, y2), max(y, y2)
        worst_mono = max(worst_mono, float(f_bar(t, s, np.array([lo]), za, u[None, :])[0]
                                           - f_bar(t, s, np.array([hi]), za, u[None, :])[0]))
    return {"order_violation": worst_order, "monotone_violation": worst_mono,
            "ok": worst_order <= 1e-12 and worst_mono <= 1e-12}


def monotone_picard(Phi1, Phi2, f1: Generator, f2: Generator, f_bar: Generator, world: World,
                    engine=None, Phi_bar=None, tol: float = 1e-12, max_iter: int = 100,
                    check: bool = True):
    """Monotone iteration Y~_k with y frozen at Y~_{k-1}, started from Y^2 (and from Y^1).

    Returns (iterates_down, report).  ``report`` records, per iterate, the
    largest increase Y~_k - Y~_{k-1} (should be <= 0), the ascending chain from
    Y^1, and the final sandwich Y^1 <= Y_bar <= Y^2.
    """
    engine = engine or default_engine(world)
    if check:
        sw = check_sandwich(f1, f2, f_bar, world)
        if not sw["ok"]:
            raise SandwichError(f"sandwich spot-check failed: {sw}")
    Phi_bar = Phi2 if Phi_bar is None else Phi_bar
    s1 = solve_type1(Phi1, f1, world, engine)
    s2 = solve_type1(Phi2, f2, world, engine)

    def chain(start, sign):
        its = [[y.copy() for y in start.Y]]
        worst = []
        for _ in range(max_iter):
            nxt = _run_type1(Phi_bar, f_bar, world, engine, "frozen", y_frozen=its[-1])
            step = max(float(np.max(sign * (a - b))) for a, b in zip(nxt.Y, its[-1]))
            worst.append(step)
            gap = max(float(np.max(np.abs(a - b))) for a, b in zip(nxt.Y, its[-1]))
            its.append([y.copy() for y in nxt.Y])
            if gap <= tol:
                break
        return its, worst

    down, up_steps = chain(s2, 1.0)
    up, down_steps = chain(s1, -1.0)
    ybar = down[-1]
    sand_lo = max(float(np.max(a - b)) for a, b in zip(s1.Y, ybar))
    sand_hi = max(float(np.max(a - b)) for a, b in zip(ybar, s2.Y))
    report = {
        "iterations_down": len(down) - 1,
        "iterations_up": len(up) - 1,
        "max_increase_down": max(up_steps) if up_steps else 0.0,
        "max_decrease_up": max(down_steps) if down_steps else 0.0,
        "monotone": (max(up_steps, default=0.0) <= tol and max(down_steps, default=0.0) <= tol),
        "limits_gap": max(float(np.max(np.abs(a - b))) for a, b in zip(down[-1], up[-1])),
        "sandwich_violation": max(sand_lo, sand_hi),
        "Y1": s1.Y, "Y2": s2.Y, "Y_bar": ybar,
    }
    return down, report
