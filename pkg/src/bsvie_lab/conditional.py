"""Conditional expectations and the discrete orthogonal decomposition.

Engines act one step at a time: ``engine.step(world, V, j)`` maps a level-(j+1)
array (any leading batch axes) to E[V | F_j] at level j.  ``step_represent``
splits V into its conditional mean, a Brownian integrand Z, per-mark jump
integrands U and an orthogonal residual M:

    V = lift(E_j V) + lift(Z) dW_j + sum_k lift(U_k) (dN_jk - lam_k dt_j) + M
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from itertools import combinations_with_replacement
from typing import NamedTuple

import numpy as np

from .lattice import LatticeError, PathEnsemble, ScenarioTree, World


class ExactTree:
    kind = "exact_tree"

    def step(self, world: World, v, j: int):
        if isinstance(world, ScenarioTree):
            return world.children_average(v, j)
        if isinstance(world, PathEnsemble) and world.node_ids is not None:
            return _group_mean(world, v, j)
        raise LatticeError("exact_tree engine needs a scenario tree (or a tree-shaped ensemble)")

    def describe(self) -> dict:
        return {"kind": self.kind}


def _group_mean(world: PathEnsemble, v, j: int):
    """Weighted mean of v over paths sharing the same level-j node."""
    ids = world.node_ids[:, j]
    w = world.path_weights
    key = ("groups", j)
    if key not in world._cache:
        uniq, inv = np.unique(ids, return_inverse=True)
        tot = np.bincount(inv, weights=w)
        world._cache[key] = (inv, tot)
    inv, tot = world._cache[key]
    v = np.asarray(v, dtype=float)
    flat = v.reshape(-1, v.shape[-1])
    out = np.empty_like(flat)
    for r in range(flat.shape[0]):
        s = np.bincount(inv, weights=flat[r] * w, minlength=len(tot))
        out[r] = (s / tot)[inv]
    return out.reshape(v.shape)


def poly_features(state: dict, degree: int, include_extra: bool) -> list[np.ndarray]:
    cols = [state["W"]]
    Nc = state["N"]
    cols += [Nc[:, k] for k in range(Nc.shape[1])]
    if include_extra:
        cols.append(state["E"])
    feats = [np.ones_like(cols[0])]
    for d in range(1, degree + 1):
        for combo in combinations_with_replacement(range(len(cols)), d):
            f = np.ones_like(cols[0])
            for c in combo:
                f = f * cols[c]
            feats.append(f)
    # jump indicators
    for k in range(Nc.shape[1]):
        feats.append((Nc[:, k] > 0).astype(float))
    return feats


@dataclass
class Regression:
    """Least-squares projection on a basis of the level-j state.

    ``basis="poly"`` uses monomials up to ``degree`` in (W_j, N_j per mark, and
    the running extra-noise sum when present) plus jump indicators.
    ``basis="indicator"`` regresses on node indicators of a tree-shaped
    ensemble, which reproduces exact conditional expectations.
    A ridge of ``ridge * trace(B'WB)`` is always added; it is reported in
    ``describe``.
    """
    basis: str = "poly"
    degree: int = 2
    ridge: float = 1e-10
    kind: str = field(default="regression", init=False)

    def _design(self, world: PathEnsemble, j: int):
        key = ("design", self.basis, self.degree, self.ridge, j)
        if key in world._cache:
            return world._cache[key]
        w = world.path_weights
        if self.basis == "indicator":
            if world.node_ids is None:
                raise LatticeError("indicator basis needs a tree-shaped ensemble")
            world._cache[key] = ("groups", None)
            return world._cache[key]
        feats = poly_features(world.state(j), self.degree, world.extra_noise)
        X = []
        for f in feats:
            mu = f @ w
            sd = np.sqrt(max(((f - mu) ** 2) @ w, 0.0))
            if len(X) == 0:
                X.append(np.ones_like(f))
            elif sd > 1e-12 * max(1.0, abs(mu)):
                X.append((f - mu) / sd)
        Xm = np.column_stack(X)
        G = (Xm * w[:, None]).T @ Xm
        r = self.ridge * np.trace(G)
        G = G + r * np.eye(G.shape[0])
        cond = np.linalg.cond(G)
        if not np.isfinite(cond) or cond > 1e14:
            warnings.warn(f"near-singular regression design at step {j} (cond={cond:.3g})")
        L = np.linalg.cholesky(G)
        world._cache[key] = ("poly", (Xm, L, r))
        return world._cache[key]

    def step(self, world: World, v, j: int):
        if not isinstance(world, PathEnsemble):
            raise LatticeError("regression engine needs a path ensemble")
        kind, data = self._design(world, j)
        if kind == "groups":
            return _group_mean(world, v, j)
        Xm, L, _ = data
        v = np.asarray(v, dtype=float)
        flat = v.reshape(-1, v.shape[-1])
        rhs = (Xm * world.path_weights[:, None]).T @ flat.T
        coef = np.linalg.solve(L.T, np.linalg.solve(L, rhs))
        return (Xm @ coef).T.reshape(v.shape)

    def describe(self) -> dict:
        return {"kind": self.kind, "basis": self.basis, "degree": self.degree,
                "ridge_factor": self.ridge}


def default_engine(world: World):
    return ExactTree() if isinstance(world, ScenarioTree) else Regression()


class StepDecomposition(NamedTuple):
    mean: np.ndarray   # level j
    Z: np.ndarray      # level j (zeros if no Brownian motion)
    U: np.ndarray      # level j, trailing mark axis
    M: np.ndarray      # level j+1


def step_represent(engine, world: World, v, j: int) -> StepDecomposition:
    v = np.asarray(v, dtype=float)
    mean = engine.step(world, v, j)
    phi = world.phi(j)
    d = phi.shape[1]
    batch = v.shape[:-1]
    nj = mean.shape[-1]
    resid = v - world.lift(mean, j, j + 1)
    if d == 0:
        return StepDecomposition(mean, np.zeros(batch + (nj,)), np.zeros(batch + (nj, 0)), resid)
    prod = v[..., None, :] * phi.T  # (..., d, n_{j+1})
    cross = engine.step(world, prod, j)  # (..., d, n_j)
    G = world.gram(j)
    coef = np.linalg.solve(G, cross.reshape(-1, d, nj).transpose(1, 0, 2).reshape(d, -1))
    coef = coef.reshape(d, -1, nj).transpose(1, 0, 2).reshape(batch + (d, nj))
    fit = np.einsum("...dn,nd->...n", world.lift(coef, j, j + 1), phi)
    M = resid - fit
    k0 = int(world.brownian)
    Z = coef[..., 0, :] if world.brownian else np.zeros(batch + (nj,))
    U = np.moveaxis(coef[..., k0:, :], -2, -1)
    return StepDecomposition(mean, Z, U, M)


def _level_of(world: World, v) -> int | None:
    if isinstance(world, ScenarioTree) and world.branching > 1:
        n = np.asarray(v).shape[-1]
        j = int(round(np.log(n) / np.log(world.branching)))
        if world.branching**j != n:
            raise LatticeError("array length does not match any tree level")
        return j
    return None


def condexp(engine, world: World, payoff, at_step: int, from_step: int | None = None):
    """E[payoff | F_{at_step}].

    ``from_step`` is the level at which ``payoff`` is measurable; on trees it is
    inferred from the array length, on ensembles it defaults to the last level.
    Exact engines iterate one-step averages; the regression engine projects in
    one shot onto the basis at ``at_step``.
    """
    lev = _level_of(world, payoff)
    if from_step is None:
        from_step = lev if lev is not None else world.N
    if at_step > from_step:
        raise LatticeError("at_step must not exceed the payoff level")
    v = np.asarray(payoff, dtype=float)
    if isinstance(engine, Regression):
        if at_step == from_step:
            return v
        return engine.step(world, v, at_step)
    for j in range(from_step - 1, at_step - 1, -1):
        v = engine.step(world, v, j)
    return v


@dataclass
class OrthoDecomposition:
    from_step: int
    to_step: int
    start: np.ndarray           # E[V | F_from] at level from
    Z: list                     # per step j in [from, to): level-j arrays
    U: list                     # per step: level-j arrays (..., n_j, m)
    M_incr: list                # per step: level-(j+1) arrays

    def reconstruct(self, world: World):
        v = self.start
        for k, j in enumerate(range(self.from_step, self.to_step)):
            phi = world.phi(j)
            v = world.lift(v, j, j + 1) + self.M_incr[k]
            if world.brownian:
                v = v + world.lift(self.Z[k], j, j + 1) * phi[:, 0]
            if world.m:
                U = world.lift_u(self.U[k], j, j + 1)
                v = v + np.einsum("...nm,nm->...n", U, phi[:, int(world.brownian):])
        return v


def represent(engine, world: World, terminal, from_step: int, to_step: int | None = None) -> OrthoDecomposition:
    """Discrete martingale representation of ``terminal`` (level ``to_step``) from ``from_step``."""
    if to_step is None:
        lev = _level_of(world, terminal)
        to_step = lev if lev is not None else world.N
    if not from_step < to_step:
        raise LatticeError("need from_step < to_step")
    v = np.asarray(terminal, dtype=float)
    Zs, Us, Ms = [], [], []
    for j in range(to_step - 1, from_step - 1, -1):
        dec = step_represent(engine, world, v, j)
        Zs.append(dec.Z)
        Us.append(dec.U)
        Ms.append(dec.M)
        v = dec.mean
    return OrthoDecomposition(from_step, to_step, v, Zs[::-1], Us[::-1], Ms[::-1])
