import numpy as np
import pytest

from bsvie_lab import presets
from bsvie_lab.bsde import SolverWarning, from_lipschitz, solve_bsde
from bsvie_lab.bsvie import (FreeTerm, SandwichError, check_sandwich, complete_M, m_solution_residual,
                             monotone_picard, picard_type1, s2_norm, solve_sfie, solve_type1, solve_type1_noY,
                             solve_type2, trapezoid_weights, upper_residual)
from bsvie_lab.constants import ConvergenceError
from bsvie_lab.lattice import JumpMeasureSpec, build_tree, deterministic_world, uniform_clock

import oracle as O


@pytest.fixture(scope="module")
def lip():
    d = presets.build("lipschitz-standard")
    sp = O.space_for(d["options"])
    P = d["Phi"].matrix(d["world"])
    lam = O.solve_bsvie(sp, [P[i] for i in range(d["world"].N + 1)], d["f"])
    return d, sp, lam


def test_free_term_forms():
    w = build_tree(uniform_clock(1.0, 2))
    L = w.n_nodes(2)
    assert FreeTerm(2.0).matrix(w).shape == (3, L)
    np.testing.assert_allclose(FreeTerm(np.arange(3.0)).matrix(w)[:, 0], [0, 1, 2])
    np.testing.assert_allclose(FreeTerm(lambda i: np.full(L, i)).matrix(w)[2], 2.0)
    with pytest.raises(ValueError):
        FreeTerm(np.ones((2, 2))).matrix(w)


def test_direct_solve_matches_enumeration(lip):
    d, sp, lam = lip
    sol = solve_type1(d["Phi"], d["f"], d["world"])
    assert O.max_error(d["world"], sp, sol, lam) <= 1e-12
    assert upper_residual(sol, d["Phi"], d["f"]) <= 1e-12


def test_picard_matches_and_contracts(lip):
    d, sp, lam = lip
    sol, gaps = picard_type1(d["Phi"], d["f"], d["world"], tol=1e-13)
    assert sol.meta["converged"]
    assert O.max_error(d["world"], sp, sol, lam) <= 1e-12
    ratios = np.array(gaps[1:]) / np.array(gaps[:-1])
    assert np.all(ratios[1:] < 1)


def test_picard_nonconvergence():
    w = deterministic_world(uniform_clock(1.0, 50))
    f = from_lipschitz(lambda t, s, y, z, u: y, y=1.0)
    with pytest.warns(SolverWarning):
        sol, _ = picard_type1(FreeTerm(1.0), f, w, tol=1e-14, max_iter=3)
    assert not sol.meta["converged"]
    with pytest.raises(ConvergenceError):
        picard_type1(FreeTerm(1.0), f, w, tol=1e-14, max_iter=3, raise_on_fail=True)


def test_complete_M_lower_triangle(lip):
    d, sp, lam = lip
    sol = complete_M(solve_type1(d["Phi"], d["f"], d["world"]))
    assert sol.region == "full"
    assert O.max_error(d["world"], sp, sol, lam, lower=True) <= 1e-12
    assert m_solution_residual(sol) <= 1e-12


def test_noY_diagonal():
    d = presets.build("girsanov-drift")
    w = d["world"]
    sol = solve_type1_noY(d["Phi"], d["f"], w)
    for j in range(w.N + 1):
        np.testing.assert_allclose(sol.Y[j], d["exact_Y"][j], atol=1e-14)
    with pytest.raises(ValueError):
        solve_type1_noY(d["Phi"], from_lipschitz(lambda t, s, y, z, u: y, y=1.0), w)


def test_sfie_matches_enumeration(lip):
    d, sp, lam = lip
    w = d["world"]
    full = solve_type1(d["Phi"], d["f"], w)
    psi, _ = solve_sfie(d["Phi"], d["f"], 0, 2, w, sol=full.copy())
    for k, i in enumerate(range(0, 2)):
        np.testing.assert_allclose(w.lift(psi[k], 2, w.N), lam[(i, 2)], atol=1e-13)
    with pytest.raises(ValueError):
        solve_sfie(d["Phi"], d["f"], 2, 2, w)


@pytest.mark.parametrize("plan", [None, [0, 1, 2, 3], [0, 2, 3], [0, 1, 3]])
def test_type2_linear_dense_solve(plan):
    d = presets.build("type2-linear")
    w = d["world"]
    sp = O.space_for(d["options"])
    P = d["Phi"].matrix(w)
    lam = O.solve_bsvie(sp, [P[i] for i in range(w.N + 1)], d["f"], two_sided=True, linear=True)
    sol = solve_type2(d["Phi"], d["f"], w, interval_plan=plan)
    assert O.max_error(w, sp, sol, lam, lower=True) <= 1e-12
    assert m_solution_residual(sol) <= 1e-12


def test_type2_nonlinear_zeta():
    w = build_tree(uniform_clock(1.0, 3), JumpMeasureSpec((1.0,), (0.8,)), extra_noise=True)
    sp = O.LeafSpace(1.0, 3, True, (0.8,), True)
    W = w.state(3)["W"]
    Phi = FreeTerm(lambda i: np.sin(W + i) + w.state(3)["E"])

    def fn(t, s, y, z, u, zeta, nu):
        return 0.3 * np.sin(y) + 0.2 * z + 0.4 * np.tanh(zeta) + 0.1 * nu.sum(-1) * np.cos(t)

    f = from_lipschitz(fn, y=0.3, z=0.2, two_sided=True)
    lam = O.solve_bsvie(sp, [Phi.matrix(w)[i] for i in range(4)], f, two_sided=True)
    sol = solve_type2(Phi, f, w)
    assert O.max_error(w, sp, sol, lam, lower=True) <= 1e-12


def test_type2_reduces_to_type1_for_one_sided(lip):
    d, sp, lam = lip
    sol = solve_type2(d["Phi"], d["f"], d["world"])
    assert O.max_error(d["world"], sp, sol, lam, lower=True) <= 1e-12


def test_type2_bad_plan():
    d = presets.build("type2-linear")
    with pytest.raises(ValueError):
        solve_type2(d["Phi"], d["f"], d["world"], interval_plan=[0, 2, 2, 3])


def test_type2_square_iteration_is_finite():
    # zeta at row i only involves Y at later rows: a block of length n settles
    # in at most n + 1 passes whatever the coefficient size
    w = build_tree(uniform_clock(1.0, 4))
    W = w.state(4)["W"]
    Phi = FreeTerm(lambda i: W * (1 + i))
    f = from_lipschitz(lambda t, s, y, z, u, zeta, nu: 6.0 * zeta + 0.1 * y, y=0.1, two_sided=True)
    sol = solve_type2(Phi, f, w)
    assert sol.meta["splits"] == 0
    assert max(sol.meta["inner_iterations"]) <= 5
    sp = O.LeafSpace(1.0, 4)
    lam = O.solve_bsvie(sp, [Phi.matrix(w)[i] for i in range(5)], f, two_sided=True, linear=True)
    assert O.max_error(w, sp, sol, lam, lower=True) <= 1e-12
    # an iteration budget too small for the block forces bisection
    cut = solve_type2(Phi, f, w, max_iter=2)
    assert cut.meta["splits"] >= 1
    assert O.max_error(w, sp, cut, lam, lower=True) <= 1e-12
    with pytest.raises(ConvergenceError):
        solve_type2(Phi, f, w, max_iter=2, max_splits=0)


def test_degenerate_bsvie_is_bsde():
    w = build_tree(uniform_clock(1.0, 3), JumpMeasureSpec((1.0,), (0.8,)), extra_noise=True)
    xi = np.cos(w.state(3)["W"]) + w.state(3)["N"].sum(-1)
    f = from_lipschitz(lambda t, s, y, z, u: 0.5 * np.sin(y) + 0.3 * z - 0.2 * u.sum(-1) + s, y=0.5, z=0.3,
                       u2=0.04 / 0.8)
    a = solve_type1(FreeTerm(lambda i: xi), f, w)
    b = solve_bsde(xi, f, w)
    for j in range(4):
        np.testing.assert_allclose(a.Y[j], b.Y[j], atol=1e-12)


def test_norm_helpers():
    w = deterministic_world(uniform_clock(2.0, 4))
    np.testing.assert_allclose(trapezoid_weights(w.times).sum(), 2.0)
    Y = [np.ones(1) for _ in range(5)]
    assert s2_norm(w, Y) == pytest.approx(np.sqrt(2.0))
    assert s2_norm(w, Y, beta=1.0) < s2_norm(w, Y)


def test_sandwich_iteration():
    d = presets.build("sandwich")
    down, rep = monotone_picard(d["Phi1"], d["Phi2"], d["f1"], d["f2"], d["f_bar"], d["world"])
    assert rep["monotone"]
    assert rep["sandwich_violation"] <= 1e-12
    assert rep["limits_gap"] <= 1e-10
    # the limit solves the f_bar equation
    ref = solve_type1(d["Phi2"], d["f_bar"], d["world"])
    for a, b in zip(rep["Y_bar"], ref.Y):
        np.testing.assert_allclose(a, b, atol=1e-11)


def test_sandwich_precondition():
    d = presets.build("sandwich")
    assert check_sandwich(d["f1"], d["f2"], d["f_bar"], d["world"])["ok"]
    with pytest.raises(SandwichError):
        monotone_picard(d["Phi1"], d["Phi2"], d["f2"], d["f1"], d["f_bar"], d["world"])
