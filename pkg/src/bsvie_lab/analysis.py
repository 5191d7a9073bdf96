"""Quantitative harnesses: norms, a-priori and stability ratios, comparison
experiments, the linear FSVIE and its duality gap, time regularity and the
exponential-weight bound for y-free BSVIEs.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .bsde import Generator, from_lipschitz
from .bsvie import (BSVIESolution, as_free_term, empty_solution, s2_norm, solve_type1,
                    solve_type2, trapezoid_weights, _zeta_nu)
from .conditional import condexp, default_engine, step_represent
from .lattice import World


class PreconditionError(ValueError):
    pass


# ---------------------------------------------------------------- norms


@dataclass
class NormReport:
    components: dict
    p: float
    weights: dict | None = None

    @property
    def total(self) -> float:
        return float(sum(self.components.values()))

    def to_dict(self) -> dict:
        return {"p": self.p, "weights": self.weights, "components": dict(self.components),
                "total": self.total}


def _row_weights(world: World, a: int, b: int, beta: float | None) -> np.ndarray:
    w = np.zeros(world.N + 1)
    w[a:b + 1] = trapezoid_weights(world.times[a:b + 1]) if b > a else 0.0
    if beta is not None:
        w = w * np.exp(beta * (world.clock.A - world.clock.A[-1]))
    return w


def norm_Sp(sol: BSVIESolution, p: float = 2.0, beta: float | None = None,
            t_range: tuple[int, int] | None = None) -> NormReport:
    """Components of the S^p norm of (Y, Z, U, M).

    Y-part: sum_i w_i E|Y(t_i)|^p (trapezoid w_i).  Z/U/M parts: per row t_i,
    E[(sum_j |Z(t_i,s_j)|^2 dt_j)^{p/2}] over s_j >= t_i ("upper") and, for
    M-solutions, s_j < t_i ("lower").  U is reported in pi-form
    (sum U^2 dN) and mu-form (sum U^2 lam dt); for p < 2 only the pi-form is
    meaningful.  With ``beta`` rows carry e^{beta A(t)} and column sums
    e^{beta (A(s) - A(t))} (both normalised by e^{-beta A(T)}).
    ``t_range=(a, b)`` restricts both time variables to [t_a, t_b].
    """
    if not p > 1:
        raise ValueError("p must exceed 1")
    w = sol.world
    N, m = w.N, w.m
    a, b = t_range if t_range is not None else (0, N)
    rw = _row_weights(w, a, b, beta)
    A = w.clock.A
    h = p / 2.0
    comp = {k: 0.0 for k in ("Y", "Z_upper", "U_pi_upper", "U_mu_upper", "M_upper",
                             "Z_lower", "U_pi_lower", "U_mu_lower", "M_lower")}
    lower = sol.region == "full"
    for i in range(a, b + 1):
        if rw[i] == 0.0:
            continue
        comp["Y"] += rw[i] * float(w.expect(np.abs(sol.Y[i]) ** p, i))
        for part, cols in (("upper", range(i, b)), ("lower", range(a, i) if lower else range(0))):
            z2 = np.zeros(w.n_nodes(N))
            upi = np.zeros_like(z2)
            umu = np.zeros_like(z2)
            m2 = np.zeros_like(z2)
            for j in cols:
                cw = math.exp(beta * (A[j] - A[i])) if beta is not None else 1.0
                z2 += cw * w.lift(sol.Z[j][i] ** 2, j, N) * w.dt[j]
                if m:
                    u2 = sol.U[j][i] ** 2
                    upi += cw * w.lift((w.lift_u(u2, j, j + 1) * w.dN[j]).sum(-1), j + 1, N)
                    umu += cw * w.lift(u2 @ w.lam, j, N) * w.dt[j]
                m2 += cw * w.lift(sol.M[j][i] ** 2, j + 1, N)
            for key, val in (("Z", z2), ("U_pi", upi), ("U_mu", umu), ("M", m2)):
                comp[f"{key}_{part}"] += rw[i] * float(w.expect(val**h, N))
    weights = {"beta": beta, "t_range": [a, b]} if (beta is not None or t_range is not None) else None
    return NormReport(comp, p, weights)


def _f_path_sums(sol: BSVIESolution, f: Generator, zero_args: bool = False, absval: bool = True,
                 other: Generator | None = None, at: BSVIESolution | None = None):
    """Per row i, the terminal-level array sum_{j>=i} g(t_i, s_j) dB_j.

    g = f at the arguments of ``at`` (default ``sol``) or at zero arguments;
    with ``other`` the difference f - other is used.  |g| when ``absval``.
    """
    w = sol.world
    at = at or sol
    N = w.N
    out = [np.zeros(w.n_nodes(N)) for _ in range(N + 1)]
    for j in range(N):
        rows = np.arange(j + 1)
        tcol = w.times[rows][:, None]
        s = w.times[j]
        nj = w.n_nodes(j)
        if zero_args:
            y = np.zeros(nj)
            z = np.zeros((len(rows), nj))
            u = np.zeros((len(rows), nj, w.m))
            zeta, nu = np.zeros_like(z), np.zeros_like(u)
        else:
            y, z, u = at.Y[j], at.Z[j][rows], at.U[j][rows]
            zeta, nu = _zeta_nu(at, rows, j)
        g = np.broadcast_to(f(tcol, s, y, z, u, zeta, nu), (len(rows), nj))
        if other is not None:
            g = g - np.broadcast_to(other(tcol, s, y, z, u, zeta, nu), (len(rows), nj))
        if absval:
            g = np.abs(g)
        for i in rows:
            out[i] = out[i] + w.lift(g[i], j, N) * w.dB[j]
    return out


def apriori_check(sol: BSVIESolution, Phi, f: Generator, constants=None, beta: float | None = None,
                  c_emp: float | None = None) -> dict:
    """Weighted solution norm against the weighted data norm (p = 2).

    LHS = Y + Z + U (mu-form) + M parts on the upper triangle; RHS =
    sum_i w_i e^{beta A} E[|Phi(t_i)|^2 + (sum_{j>=i} |f(t_i,s_j,0,0,0)| dB_j)^2].
    With ``constants`` the reference bound (delta*/2) Sigma(beta) is reported.
    """
    w = sol.world
    if constants is not None:
        beta = constants.beta if beta is None else beta
        if not constants.type1_ok:
            raise PreconditionError("weighted a-priori check needs type1_ok constants")
    rep = norm_Sp(sol, 2.0, beta)
    c = rep.components
    lhs = c["Y"] + c["Z_upper"] + c["U_mu_upper"] + c["M_upper"]
    P = as_free_term(Phi).matrix(w)
    f0 = _f_path_sums(sol, f, zero_args=True)
    rw = _row_weights(w, 0, w.N, beta)
    rhs = sum(rw[i] * float(w.expect(P[i] ** 2 + f0[i] ** 2, w.N)) for i in range(w.N + 1))
    out = {"lhs": lhs, "rhs": rhs, "beta": beta}
    out["ratio"] = lhs / rhs if rhs > 0 else (0.0 if lhs == 0 else math.inf)
    out["degenerate"] = rhs == 0 and lhs == 0
    if constants is not None and math.isfinite(constants.sigma):
        out["reference_bound"] = 0.5 * constants.delta_star * constants.sigma
    if c_emp is not None:
        out["c_emp"] = c_emp
        out["violated"] = bool(lhs > c_emp * rhs * (1 + 1e-12))
    return out


def _diff_solution(s1: BSVIESolution, s2: BSVIESolution) -> BSVIESolution:
    d = empty_solution(s1.world, s1.engine)
    d.Y = [a - b for a, b in zip(s1.Y, s2.Y)]
    d.Z = [a - b for a, b in zip(s1.Z, s2.Z)]
    d.U = [a - b for a, b in zip(s1.U, s2.U)]
    d.M = [a - b for a, b in zip(s1.M, s2.M)]
    d.region = "full" if (s1.region == s2.region == "full") else "upper"
    return d


def stability_gap(sol1: BSVIESolution, sol2: BSVIESolution, data1, data2, p: float = 2.0) -> dict:
    """S^p distance of two solutions against the distance of their data.

    data = (Phi, f).  The driver gap is f1 - f2 frozen at the arguments of one
    solution; both choices are computed and the larger one enters the RHS, which
    keeps the report symmetric in the pair.
    """
    if sol1.world is not sol2.world:
        raise ValueError("solutions live on different worlds")
    w = sol1.world
    N = w.N
    (P1, f1), (P2, f2) = data1, data2
    d = _diff_solution(sol1, sol2)
    c = norm_Sp(d, p).components
    lhs = c["Y"] + c["Z_upper"] + c["U_mu_upper"] + c["M_upper"]
    dP = as_free_term(P1).matrix(w) - as_free_term(P2).matrix(w)
    rw = _row_weights(w, 0, N, None)
    phi_gap = sum(rw[i] * float(w.expect(np.abs(dP[i]) ** p, N)) for i in range(N + 1))
    f_gaps = []
    for at in (sol1, sol2):
        g = _f_path_sums(sol1, f1, other=f2, at=at)
        f_gaps.append(sum(rw[i] * float(w.expect(g[i] ** p, N)) for i in range(N + 1)))
    rhs = phi_gap + max(f_gaps)
    return {"lhs": lhs, "rhs": rhs, "phi_gap": phi_gap, "driver_gap": max(f_gaps),
            "ratio": lhs / rhs if rhs > 0 else (0.0 if lhs == 0 else math.inf), "p": p}


# ---------------------------------------------------------------- comparison


def compare_solutions(Y1, Y2, tol: float = 1e-12) -> dict:
    """Count nodes where Y1 > Y2 + tol (lists of level arrays, or arrays)."""
    count = 0
    worst = -math.inf
    where = None
    for i, (a, b) in enumerate(zip(Y1, Y2)):
        d = np.asarray(a, dtype=float) - np.asarray(b, dtype=float)
        count += int(np.sum(d > tol))
        k = int(np.argmax(d)) if d.size else 0
        if d.size and d.flat[k] > worst:
            worst = float(d.flat[k])
            where = (i, k)
    return {"violations": count, "max_violation": max(worst, 0.0), "location": where,
            "max_difference": worst}


def _time_index(world: World, t):
    return np.searchsorted(world.times, np.asarray(t, dtype=float) - 1e-12 * max(1.0, world.clock.T))


def table_generator(world: World, L_tab, h=0.0, kappa=None, varpi: float = 1.0,
                    theta_o: float | None = None, name="table") -> Generator:
    """Linear driver L(t,s) y + h(s) z + sum_k kappa_k lam_k u_k with L given
    per column j as an array (N+1, n_j) (row i = t index)."""
    lam = world.lam
    kap = None if kappa is None else np.asarray(kappa, dtype=float)

    def fn(t, s, y, z, u):
        j = int(_time_index(world, s))
        i = _time_index(world, t)
        coeff = L_tab[j][np.ravel(i)]
        if np.ndim(t) == 0:
            coeff = coeff[0]
        hv = h(s) if callable(h) else h
        out = coeff * y + hv * z
        if kap is not None and u.shape[-1]:
            out = out + u @ (kap * lam)
        return out

    th = abs(h) if not callable(h) else (theta_o if theta_o is not None else 1.0)
    return from_lipschitz(fn, y=math.sqrt(varpi), z=float(th),
                          u2=0.0 if kap is None else float(np.sum(kap**2 * lam)), uses_y=True, name=name)


def _blocks(N: int, K: int):
    """Split grid indices 1..N into K consecutive blocks; t_0 joins the first."""
    edges = np.linspace(0, N, K + 1).round().astype(int)
    anchor = np.zeros(N + 1, dtype=int)
    for k in range(K):
        lo, hi = edges[k], edges[k + 1]
        anchor[lo + 1:hi + 1] = lo
    anchor[0] = 0
    return edges, anchor


def partition_comparison(Phi1, Phi2, g1, g2, world: World, engine=None, h=0.0, kappa=None,
                         lip_y: float = 1.0, block_counts=(1, 2, 4, 8), check: bool = True,
                         n_check: int = 200, seed: int = 0) -> dict:
    """Partition scheme for drivers g^i(t,s,y) + h(s) z + int kappa u dmu.

    ``g1``, ``g2`` are callables g(t, s, y) (broadcasting).  Builds
    dPhi(t) = Phi2 - Phi1 + sum_{s_j >= t} (g2 - g1)(t, s_j, Y2(s_j)) dB_j and
    L(t,s) = (g1(t,s,Y2) - g1(t,s,Y1)) / (Y2 - Y1), then for every block count
    solves the BSVIE with data frozen at the left end of each block.  Reports
    nonnegativity of Y^Pi and its S^2 distance to dY = Y2 - Y1.
    """
    engine = engine or default_engine(world)
    N = world.N
    lam = world.lam
    kap = None if kappa is None else np.asarray(kappa, dtype=float)
    P1 = as_free_term(Phi1).matrix(world)
    P2 = as_free_term(Phi2).matrix(world)
    if check:
        rng = np.random.default_rng(seed)
        dPhi0 = P2 - P1
        if np.any(dPhi0 < -1e-12) or np.any(np.diff(dPhi0, axis=0) > 1e-12):
            raise PreconditionError("free terms violate Phi2(t)-Phi1(t) >= Phi2(tau)-Phi1(tau) >= 0")
        for _ in range(n_check):
            t, tau, s = np.sort(rng.uniform(0, world.clock.T, 3))
            y, y2 = rng.normal(0, 3, 2)
            d_t = g2(t, s, y) - g1(t, s, y)
            d_tau = g2(tau, s, y) - g1(tau, s, y)
            if d_tau < -1e-12 or d_t < d_tau - 1e-12:
                raise PreconditionError("g2 - g1 must be nonnegative and nonincreasing in t")
            lhs = (g1(t, s, y) - g1(t, s, y2)) * (y - y2)
            rhs = (g1(tau, s, y) - g1(tau, s, y2)) * (y - y2)
            if lhs < rhs - 1e-12:
                raise PreconditionError("g1 fails the monotone-in-t condition on its y-increments")
        if kap is not None and np.any(kap <= -1):
            raise PreconditionError("jump coefficient must exceed -1")

    def driver(g):
        def fn(t, s, y, z, u):
            hv = h(s) if callable(h) else h
            out = g(t, s, y) + hv * z
            if kap is not None and u.shape[-1]:
                out = out + u @ (kap * lam)
            return out
        return from_lipschitz(fn, y=lip_y, z=float(abs(h) if not callable(h) else 1.0),
                              u2=0.0 if kap is None else float(np.sum(kap**2 * lam)), uses_y=True)

    s1 = solve_type1(P1, driver(g1), world, engine)
    s2 = solve_type1(P2, driver(g2), world, engine)
    dY = [b - a for a, b in zip(s1.Y, s2.Y)]
    # dPhi and L
    dPhi = P2 - P1
    L_tab = []
    for j in range(N + 1):
        tcol = world.times[: N + 1][:, None]
        s = world.times[j]
        y1, y2 = s1.Y[j], s2.Y[j]
        if j < N:
            extra = g2(tcol, s, y2) - g1(tcol, s, y2)
            extra = np.broadcast_to(extra, (N + 1, world.n_nodes(j)))
            for i in range(j + 1):
                dPhi[i] += world.lift(extra[i], j, N) * world.dB[j]
        dy = y2 - y1
        num = np.broadcast_to(g1(tcol, s, y2) - g1(tcol, s, y1), (N + 1, world.n_nodes(j)))
        with np.errstate(divide="ignore", invalid="ignore"):
            L = np.where(np.abs(dy) > 0, num / np.where(dy == 0, 1.0, dy), 0.0)
        L_tab.append(L)
    lin = table_generator(world, L_tab, h, kappa, varpi=lip_y**2)
    check_dY = solve_type1(dPhi, lin, world, engine)
    consistency = max(float(np.max(np.abs(a - b))) for a, b in zip(check_dY.Y, dY))
    runs = []
    for K in block_counts:
        edges, anchor = _blocks(N, K)
        PhiPi = dPhi[anchor]
        L_pi = [Lt[anchor] for Lt in L_tab]
        gen = table_generator(world, L_pi, h, kappa, varpi=lip_y**2)
        sp = solve_type1(PhiPi, gen, world, engine)
        neg = min(float(np.min(y)) for y in sp.Y)
        err = s2_norm(world, [a - b for a, b in zip(sp.Y, dY)])
        runs.append({"blocks": int(K), "edges": edges.tolist(), "min_Y_pi": neg,
                     "nonnegative": neg >= -1e-12, "error": err})
    errs = [r["error"] for r in runs]
    return {
        "comparison": compare_solutions(s1.Y, s2.Y),
        "linearisation_consistency": consistency,
        "runs": runs,
        "all_nonnegative": all(r["nonnegative"] for r in runs),
        "error_decreasing": all(b < a for a, b in zip(errs, errs[1:])),
        "Y1": s1.Y, "Y2": s2.Y,
    }


# ---------------------------------------------------------------- FSVIE / duality


@dataclass
class FSVIECoefficients:
    """Scalar deterministic kernels on the grid: A0[i, j], A1[i, j] and
    Aj[i, j, k] multiply X(t_j) against dB_j, dW_j and the compensated count of
    mark k on step j, for j < i."""
    A0: np.ndarray
    A1: np.ndarray
    Aj: np.ndarray
    meta: dict = field(default_factory=dict)

    @classmethod
    def zeros(cls, world: World) -> "FSVIECoefficients":
        N = world.N
        return cls(np.zeros((N + 1, N)), np.zeros((N + 1, N)), np.zeros((N + 1, N, world.m)))

    @classmethod
    def random(cls, world: World, rng, bound: float = 1.0) -> "FSVIECoefficients":
        N = world.N
        return cls(rng.uniform(-bound, bound, (N + 1, N)), rng.uniform(-bound, bound, (N + 1, N)),
                   rng.uniform(-bound, bound, (N + 1, N, world.m)))

    def bounds(self) -> dict:
        d = {}
        for name in ("A0", "A1", "Aj"):
            a = getattr(self, name)
            d[name] = float(np.max(np.abs(a))) if a.size else 0.0
            d[name + "_dt"] = float(np.max(np.abs(np.diff(a, axis=0)))) if a.shape[0] > 1 and a.size else 0.0
        return d


def _levels(world: World, V) -> list:
    """Adapted process as a list of level arrays (callable i -> array, list, scalar)."""
    N = world.N
    if callable(V):
        return [np.broadcast_to(np.asarray(V(i), dtype=float), (world.n_nodes(i),)).copy() for i in range(N + 1)]
    if np.isscalar(V):
        return [np.full(world.n_nodes(i), float(V)) for i in range(N + 1)]
    return [np.broadcast_to(np.asarray(v, dtype=float), (world.n_nodes(i),)).copy() for i, v in enumerate(V)]


def _xi(world: World, coeff: FSVIECoefficients, i: int, j: int):
    """Level-(j+1) kernel increment xi_{ij} = A0 dB_j + A1 dW_j + Aj . dpi~_j."""
    phi = world.phi(j)
    v = np.full(world.n_nodes(j + 1), coeff.A0[i, j] * world.dB[j])
    if world.brownian:
        v = v + coeff.A1[i, j] * phi[:, 0]
    if world.m:
        v = v + phi[:, int(world.brownian):] @ coeff.Aj[i, j]
    return v


def solve_fsvie(Psi, coeff: FSVIECoefficients, world: World) -> list:
    """X(t_i) = Psi(t_i) + sum_{j<i} X(t_j) xi_{ij} (left-point, predictable integrands)."""
    N = world.N
    Ps = _levels(world, Psi)
    X = []
    for i in range(N + 1):
        x = Ps[i].copy()
        for j in range(i):
            x = x + world.lift(world.lift(X[j], j, j + 1) * _xi(world, coeff, i, j), j + 1, i)
        X.append(x)
    return X


def adjoint_bsvie(Phi, coeff: FSVIECoefficients, world: World, engine=None) -> list:
    """Exact discrete adjoint of the FSVIE for the pairing sum_{i<N} dt_i E[a_i b_i]:

    Y_j = E_j Phi(t_j) + (1/dt_j) sum_{j<l<N} dt_l E_j[Y_l xi_{lj}].
    """
    engine = engine or default_engine(world)
    N = world.N
    P = as_free_term(Phi).matrix(world)
    w = world.dt
    Y = [None] * (N + 1)
    Y[N] = P[N].copy()
    for j in range(N - 1, -1, -1):
        acc = np.zeros(world.n_nodes(j + 1))
        for l in range(j + 1, N):
            yl = condexp(engine, world, Y[l], j + 1, l)
            acc = acc + w[l] * yl * _xi(world, coeff, l, j)
        Y[j] = condexp(engine, world, P[j], j, N) + engine.step(world, acc, j) / w[j]
    return Y


def continuous_adjoint(Phi, coeff: FSVIECoefficients, world: World, engine=None) -> BSVIESolution:
    """The adjoint written as a Type-II BSVIE with driver
    A0(s,t) y + A1(s,t) Z(s,t) + sum_k Aj(s,t,k) lam_k U(s,t,k)."""
    lam = world.lam

    def fn(t, s, y, z, u, zeta, nu):
        # kernel entries A(s_j, t_i) = A[j, i]; rows satisfy i <= j < N
        i = np.ravel(_time_index(world, t))
        j = int(_time_index(world, s))
        a0, a1, aj = coeff.A0[j, i], coeff.A1[j, i], coeff.Aj[j, i]
        if np.ndim(t) == 0:
            a0, a1, aj = a0[0], a1[0], aj[0]
        else:
            a0, a1, aj = a0[:, None], a1[:, None], aj[:, None, :]
        out = a0 * y + a1 * zeta
        if world.m:
            out = out + (nu * aj * lam).sum(-1)
        return out

    b0 = float(np.max(np.abs(coeff.A0))) if coeff.A0.size else 0.0
    gen = from_lipschitz(fn, y=b0, two_sided=True, uses_y=True, name="adjoint")
    return solve_type2(Phi, gen, world, engine)


def duality_gap(Psi, Phi, coeff: FSVIECoefficients, world: World, engine=None,
                continuous: bool = False) -> dict:
    """|E sum_{i<N} dt_i Psi_i Y_i - E sum_{i<N} dt_i X_i Phi_i| with the discrete adjoint.

    Also returns the per-path standard error of the difference (for ensembles)
    and, with ``continuous=True``, the gap obtained from the continuous-time
    adjoint formula (a discretisation error, not expected to vanish).
    """
    engine = engine or default_engine(world)
    N = world.N
    X = solve_fsvie(Psi, coeff, world)
    Ps = _levels(world, Psi)
    P = as_free_term(Phi).matrix(world)
    Y = adjoint_bsvie(P, coeff, world, engine)
    w = world.dt
    d_path = np.zeros(world.n_nodes(N))
    lhs = rhs = 0.0
    for i in range(N):
        a = world.lift(Ps[i] * Y[i], i, N)
        b = world.lift(X[i], i, N) * P[i]
        d_path += w[i] * (a - b)
        lhs += w[i] * float(world.expect(Ps[i] * Y[i], i))
        rhs += w[i] * float(world.expect(world.lift(X[i], i, N) * P[i], N))
    out = {"lhs": lhs, "rhs": rhs, "gap": abs(lhs - rhs)}
    wN = world.weights(N)
    mean = float(d_path @ wN)
    var = float(((d_path - mean) ** 2) @ wN)
    n_eff = 1.0 / float(np.sum(wN**2))
    out["se"] = math.sqrt(var / n_eff) if n_eff > 1 else 0.0
    if continuous:
        sol = continuous_adjoint(P, coeff, world, engine)
        lhs_c = sum(w[i] * float(world.expect(Ps[i] * sol.Y[i], i)) for i in range(N))
        out["continuous_gap"] = abs(lhs_c - rhs)
    return out


# ---------------------------------------------------------------- regularity


def regularity_estimate(Y: list, world: World, p: float = 2.0, lags=None, alpha: float | None = None,
                        min_scales: int = 4) -> dict:
    """Hoelder fit of m(h) = mean_i E|Y(t_i + h) - Y(t_i)|^p on dyadic lags.

    Least squares of log m against log h; returns the slope, its standard
    error and, when ``alpha`` is given, the ratio to alpha * p.  A family with
    vanishing increments is reported as flat.
    """
    N = world.N
    if lags is None:
        lags = [2**k for k in range(int(math.log2(max(N, 1))) + 1) if 2**k < N]
    lags = sorted(set(int(l) for l in lags if 0 < l < N + 1))
    if len(lags) < min_scales:
        raise ValueError(f"need at least {min_scales} probe scales, got {len(lags)}")
    hs, ms = [], []
    for lag in lags:
        vals = []
        for i in range(0, N + 1 - lag):
            d = Y[i + lag] - world.lift(Y[i], i, i + lag)
            vals.append(float(world.expect(np.abs(d) ** p, i + lag)))
        hs.append(float(np.mean(world.times[lag:] - world.times[:-lag])))
        ms.append(float(np.mean(vals)))
    hs, ms = np.array(hs), np.array(ms)
    scale = max(1.0, max(float(world.expect(np.abs(y) ** p, i)) for i, y in enumerate(Y)))
    out = {"p": p, "lags": lags, "h": hs.tolist(), "moments": ms.tolist()}
    if np.all(ms <= 1e-28 * scale):
        out.update(flat=True, exponent=math.inf, se=0.0)
        return out
    keep = ms > 0
    x, y = np.log(hs[keep]), np.log(ms[keep])
    X = np.column_stack([np.ones_like(x), x])
    coef, *_ = np.linalg.lstsq(X, y, rcond=None)
    resid = y - X @ coef
    dof = max(len(x) - 2, 1)
    s2 = float(resid @ resid) / dof
    cov = s2 * np.linalg.inv(X.T @ X)
    out.update(flat=False, exponent=float(coef[1]), se=float(math.sqrt(max(cov[1, 1], 0.0))))
    if alpha is not None:
        out["target"] = alpha * p
        out["ratio_to_target"] = out["exponent"] / (alpha * p)
    return out


def cadlag_report(Y: list, world: World, engine=None, c: float = 0.5) -> dict:
    """Locate jumps of Y along tree paths and match them with noise jumps.

    On step j the increment splits into a predictable part (conditional mean
    and compensator), a Brownian part Z dW and the rest J.  J is O(dt) on
    branches without a noise jump and O(1) across one; a jump is flagged when
    |J| > c sqrt(dt_j) * scale with scale = max(1, sd(Y_N)).  Each flag must
    sit on a branch where a mark fires or the extra noise moves.
    """
    engine = engine or default_engine(world)
    N = world.N
    yN = np.asarray(Y[N], dtype=float)
    sd = math.sqrt(max(float(world.expect(yN**2, N)) - float(world.expect(yN, N)) ** 2, 0.0))
    scale = max(1.0, sd)
    flagged = []
    unmatched = []
    for j in range(N):
        dec = step_represent(engine, world, Y[j + 1], j)
        comp = world.lift(dec.mean, j, j + 1) - world.lift(Y[j], j, j + 1)
        if world.m:
            comp = comp - world.lift(dec.U @ world.lam, j, j + 1) * world.dt[j]
        cont = comp
        if world.brownian:
            cont = cont + world.lift(dec.Z, j, j + 1) * world.dW[j]
        J = Y[j + 1] - world.lift(Y[j], j, j + 1) - cont
        thr = c * math.sqrt(world.dt[j]) * scale
        noise = np.zeros(world.n_nodes(j + 1), dtype=bool)
        if world.m:
            noise |= world.dN[j].sum(-1) > 0
        if world.extra_noise:
            noise |= world.eps[j] != 0
        hit = np.abs(J) > thr
        for k in np.flatnonzero(hit):
            flagged.append((float(world.times[j + 1]), int(k)))
            if not noise[k]:
                unmatched.append((float(world.times[j + 1]), int(k)))
    return {"jumps": len(flagged), "unmatched": len(unmatched), "unmatched_at": unmatched[:20],
            "jump_times": sorted({t for t, _ in flagged}), "ok": not unmatched}


# ---------------------------------------------------------------- exponential bound


def exp_bound_check(sol: BSVIESolution, Phi, f: Generator, beta: float, n_probe: int = 5,
                    seed: int = 0) -> dict:
    """Both inequalities of the exponential-weight bound for y-free data, nodewise.

    Discretely, with c_j = dt_j^2 e^{beta s_j} / (1 - e^{-beta dt_j}) (which
    tends to e^{beta s} dt / beta):
      e^{beta t_i} |Y_i|^2 <= e^{beta T} E_i|Phi(t_i)|^2 + E_i sum_j c_j |f(t_i, s_j)|^2
      E_i sum_j e^{beta s_j} |dm_j|^2 <= the same right-hand side,
    where dm_j is the martingale increment Z dW + U dpi~ + M of row i.
    """
    w = sol.world
    N = w.N
    rng = np.random.default_rng(seed)
    for _ in range(n_probe):
        t, s = np.sort(rng.uniform(0, w.clock.T, 2))
        a = f(t, s, np.array([rng.normal()]), np.array([rng.normal()]), rng.normal(size=(1, w.m)))
        b = f(t, s, np.array([rng.normal()]), np.array([rng.normal()]), rng.normal(size=(1, w.m)))
        if abs(float(np.ravel(a)[0]) - float(np.ravel(b)[0])) > 1e-14:
            raise PreconditionError("driver must not depend on (y, z, u)")
    P = as_free_term(Phi).matrix(w)
    times = w.times
    T = times[-1]
    cj = w.dt**2 * np.exp(beta * times[:-1]) / (-np.expm1(-beta * w.dt))
    worst1 = worst2 = math.inf
    scale = 1.0
    engine = sol.engine
    for i in range(N + 1):
        acc = np.zeros(w.n_nodes(N))
        mart = np.zeros(w.n_nodes(N))
        for j in range(i, N):
            g = np.broadcast_to(f(times[i], times[j], np.zeros(w.n_nodes(j)), np.zeros(w.n_nodes(j)),
                                  np.zeros((w.n_nodes(j), w.m))), (w.n_nodes(j),))
            acc = acc + cj[j] * w.lift(g**2, j, N)
            phi = w.phi(j)
            dm = sol.M[j][i].copy()
            if w.brownian:
                dm = dm + w.lift(sol.Z[j][i], j, j + 1) * phi[:, 0]
            if w.m:
                dm = dm + (w.lift_u(sol.U[j][i], j, j + 1) * phi[:, int(w.brownian):]).sum(-1)
            mart = mart + math.exp(beta * times[j]) * w.lift(dm**2, j + 1, N)
        rhs = math.exp(beta * T) * condexp(engine, w, P[i] ** 2, i, N) + condexp(engine, w, acc, i, N)
        lhs1 = math.exp(beta * times[i]) * sol.Y[i] ** 2
        lhs2 = condexp(engine, w, mart, i, N)
        worst1 = min(worst1, float(np.min(rhs - lhs1)))
        worst2 = min(worst2, float(np.min(rhs - lhs2)))
        scale = max(scale, float(np.max(np.abs(rhs))))
    tol = 1e-12 * scale
    return {"beta": beta, "min_slack_value": worst1, "min_slack_martingale": worst2,
            "ok": worst1 >= -tol and worst2 >= -tol}
