import numpy as np
import pytest

from bsvie_lab.lattice import (JumpMeasureSpec, LatticeError, PathEnsemble, build_clock, build_tree,
                               deterministic_world, simulate_paths, uniform_clock)

from oracle import LeafSpace


def test_clock_basics():
    c = uniform_clock(1.0, 4)
    assert c.is_ito
    np.testing.assert_allclose(c.dB, c.dt)
    np.testing.assert_allclose(c.A, c.times)
    assert c.frak_f == 0.0


def test_clock_jumps_and_alpha():
    c = build_clock([0, 0.5, 1.0], alpha=[1.0, 2.0], jumps={0.75: 0.1})
    np.testing.assert_allclose(c.dB, [0.5, 0.6])
    np.testing.assert_allclose(c.dA, [0.5, 4 * 0.6])
    assert c.frak_f == pytest.approx(0.4)
    assert not c.is_ito


@pytest.mark.parametrize("grid", [[0.0], [0.1, 1.0], [0, 0.5, 0.5]])
def test_clock_rejects_bad_grid(grid):
    with pytest.raises(LatticeError):
        build_clock(grid)


def test_clock_rejects_bad_alpha():
    with pytest.raises(LatticeError):
        build_clock([0, 1], alpha=0.0)


def test_tree_sizes_and_probabilities():
    w = build_tree(uniform_clock(1.0, 3), JumpMeasureSpec((1.0,), (0.8,)), extra_noise=True)
    assert w.branching == 8
    assert w.n_nodes(3) == 512
    for j in range(4):
        assert abs(w.weights(j).sum() - 1.0) <= 1e-15
    # Brownian increments have variance dt; compensated counts have mean zero
    for j in range(3):
        p = w.weights(j + 1)
        assert p @ w.dW[j] == pytest.approx(0.0, abs=1e-15)
        assert p @ w.dW[j] ** 2 == pytest.approx(w.dt[j])
        assert p @ (w.dN[j][:, 0] - 0.8 * w.dt[j]) == pytest.approx(0.0, abs=1e-15)


def test_tree_matches_enumeration():
    w = build_tree(uniform_clock(1.0, 3), JumpMeasureSpec((1.0,), (0.8,)), extra_noise=True)
    sp = LeafSpace(1.0, 3, True, (0.8,), True)
    np.testing.assert_allclose(w.weights(3), sp.p, rtol=0, atol=1e-16)
    for j in range(3):
        np.testing.assert_array_equal(w.lift(w.dW[j], j + 1, 3), sp.dW[:, j])
        np.testing.assert_array_equal(w.lift_u(w.dN[j], j + 1, 3), sp.dN[:, j])
        np.testing.assert_array_equal(w.lift(w.eps[j], j + 1, 3), sp.eps[:, j])


def test_tree_cap():
    with pytest.raises(LatticeError, match="cap"):
        build_tree(uniform_clock(1.0, 7))
    build_tree(uniform_clock(1.0, 7), max_steps=7)
    assert deterministic_world(uniform_clock(1.0, 500)).n_nodes(500) == 1


def test_tree_rejects_large_intensity():
    with pytest.raises(LatticeError):
        build_tree(uniform_clock(1.0, 2), JumpMeasureSpec((1.0,), (3.0,)))


def test_trinomial_moments():
    w = build_tree(uniform_clock(1.0, 2), quantization=3)
    p = w.weights(1)
    assert p @ w.dW[0] ** 2 == pytest.approx(0.5)
    assert p @ w.dW[0] ** 4 == pytest.approx(3 * 0.25)


def test_ensemble_reproducible():
    c = uniform_clock(1.0, 5)
    j = JumpMeasureSpec((1.0, -0.5), (2.0, 1.0))
    a = simulate_paths(c, j, True, n_paths=5000, seed=42, block_size=1000)
    b = simulate_paths(c, j, True, n_paths=5000, seed=42, block_size=1000)
    np.testing.assert_array_equal(a._dW, b._dW)
    np.testing.assert_array_equal(a._dN, b._dN)
    # block 2 regenerated on its own
    part = simulate_paths(c, j, True, n_paths=3000, seed=42, block_size=1000)
    np.testing.assert_array_equal(part._dW[2000:], a._dW[2000:3000])
    other = simulate_paths(c, j, True, n_paths=5000, seed=43, block_size=1000)
    assert not np.array_equal(other._dW, a._dW)


def test_ensemble_moments():
    w = simulate_paths(uniform_clock(2.0, 4), JumpMeasureSpec((1.0,), (1.5,)), n_paths=40000, seed=1)
    WT = w.state(4)["W"]
    NT = w.state(4)["N"][:, 0]
    assert abs(WT.mean()) < 4 * np.sqrt(2.0 / 40000)
    assert WT.var() == pytest.approx(2.0, rel=0.03)
    assert NT.mean() == pytest.approx(3.0, rel=0.02)


def test_ensemble_roundtrip(tmp_path):
    w = simulate_paths(uniform_clock(1.0, 3), JumpMeasureSpec((1.0,), (1.0,)), True, n_paths=64, seed=5)
    w.save(tmp_path / "e.bin")
    r = PathEnsemble.load(tmp_path / "e.bin")
    np.testing.assert_array_equal(r._dW, w._dW)
    np.testing.assert_array_equal(r._dN, w._dN)
    np.testing.assert_array_equal(r._eps, w._eps)
    assert r.seed == 5 and r.extra_noise


def test_tree_to_ensemble():
    w = build_tree(uniform_clock(1.0, 2), JumpMeasureSpec((1.0,), (0.5,)))
    e = w.to_ensemble()
    assert e.n_paths == w.n_nodes(2)
    np.testing.assert_allclose(e.state(2)["W"], w.state(2)["W"])
