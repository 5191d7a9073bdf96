"""Built-in (world, Phi, f) catalog used by the command line and the tests.

Each preset builds its world from a flat options dict (so config files can
override grid size, paths, seed ...) and names the oracle it is checked against.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .bsde import Generator, from_lipschitz
from .bsvie import FreeTerm
from .lattice import (JumpMeasureSpec, NO_JUMPS, build_tree, deterministic_world, simulate_paths,
                      uniform_clock)


@dataclass
class Preset:
    name: str
    anchor: str
    oracle: str
    command: str
    defaults: dict
    build: Callable
    tags: tuple = field(default=())

    def catalog_entry(self) -> dict:
        return {"name": self.name, "anchor": self.anchor, "oracle": self.oracle,
                "command": self.command, "defaults": dict(self.defaults)}


def make_world(opts: dict):
    """World from options: kind (tree|ensemble|deterministic), T, steps, marks,
    intensities, extra_noise, brownian, n_paths, seed, quantization."""
    clock = uniform_clock(float(opts.get("T", 1.0)), int(opts["steps"]))
    kind = opts.get("kind", "tree")
    if kind == "deterministic":
        return deterministic_world(clock)
    marks = tuple(opts.get("marks", ()))
    lam = tuple(opts.get("intensities", ()))
    jumps = JumpMeasureSpec(marks, lam) if marks else NO_JUMPS
    if kind == "tree":
        return build_tree(clock, jumps, bool(opts.get("extra_noise", False)),
                          brownian=bool(opts.get("brownian", True)),
                          quantization=int(opts.get("quantization", 2)),
                          max_steps=int(opts.get("max_tree_steps", 6)))
    if kind == "ensemble":
        return simulate_paths(clock, jumps, bool(opts.get("extra_noise", False)),
                              n_paths=int(opts.get("n_paths", 1000)), seed=int(opts.get("seed", 0)),
                              brownian=bool(opts.get("brownian", True)))
    raise ValueError(f"unknown world kind {kind!r}")


def _terminal(world, name):
    N = world.N
    st = world.state(N)
    if name == "W":
        return world.lift(st["W"], N, N)
    if name == "N":
        return st["N"].sum(-1)
    if name == "E":
        return st["E"]
    raise KeyError(name)


def _level_state(world, i, key):
    """Cumulative noise at level i lifted to the terminal level."""
    st = world.state(i)
    v = st[key] if key != "N" else st["N"].sum(-1)
    return world.lift(v, i, world.N)


# ---------------------------------------------------------------- builders


def _ode_exp(opts):
    world = make_world(opts)
    f = from_lipschitz(lambda t, s, y, z, u: y, y=1.0, name="y")
    return {"world": world, "Phi": FreeTerm(1.0), "f": f,
            "exact": {"Y0": math.e ** world.clock.T,
                      "Y0_discrete": (1.0 - world.clock.T / world.N) ** (-world.N)}}


def _girsanov(opts):
    world = make_world(opts)
    mu = float(opts.get("mu", 0.5))
    f = from_lipschitz(lambda t, s, y, z, u: mu * z, z=abs(mu), name="mu*z")
    xi = _terminal(world, "W")
    T = world.clock.T
    exact = [world.state(j)["W"] + mu * (T - world.times[j]) for j in range(world.N + 1)]
    return {"world": world, "xi": xi, "Phi": FreeTerm(lambda i: xi), "f": f, "exact_Y": exact,
            "exact": {"Y0": mu * T}}


def _poisson(opts):
    world = make_world(opts)
    f = from_lipschitz(lambda t, s, y, z, u: 0.0 * y, name="0")
    xi = _terminal(world, "N")
    lam = float(np.sum(world.lam))
    return {"world": world, "xi": xi, "Phi": FreeTerm(lambda i: xi), "f": f,
            "exact": {"Y0": lam * world.clock.T}}


def _extra_noise(opts):
    world = make_world(opts)
    E = _terminal(world, "E")
    W = _terminal(world, "W")
    times = world.times
    Phi = FreeTerm(lambda i: (1.0 + times[i]) * E + W)
    # |0.1 sum_k du_k|^2 <= 0.01 (sum_k 1/lam_k) ||du||^2_mu
    u2 = 0.01 * float(np.sum(1.0 / world.lam)) if world.m else 0.0
    f = from_lipschitz(lambda t, s, y, z, u: 0.3 * z + 0.2 * np.sin(y) + 0.1 * u.sum(-1),
                       y=0.2, z=0.3, u2=u2, name="0.3z+0.2sin(y)+0.1u")
    return {"world": world, "Phi": Phi, "f": f, "eps_scale": 1.0}


def _lipschitz(opts):
    world = make_world(opts)
    W = _terminal(world, "W")
    Nt = _terminal(world, "N") if world.m else 0.0 * W
    times = world.times
    Phi = FreeTerm(lambda i: np.sin(W) + 0.5 * times[i] * Nt + np.cos(times[i]))

    def fn(t, s, y, z, u):
        uu = u.sum(-1) if u.shape[-1] else 0.0
        return 0.5 * np.sin(y) + 0.3 * np.cos(t) * z + 0.2 * uu + t * s

    u2 = 0.04 * float(np.sum(1.0 / world.lam)) if world.m else 0.0
    f = from_lipschitz(fn, y=0.5, z=0.3, u2=u2, name="lipschitz")
    return {"world": world, "Phi": Phi, "f": f}


def _type2_linear(opts):
    world = make_world(opts)
    W = _terminal(world, "W")
    Nt = _terminal(world, "N") if world.m else 0.0 * W
    times = world.times
    Phi = FreeTerm(lambda i: W * (1.0 + times[i]) + 0.3 * Nt)
    c = float(opts.get("c", 0.5))

    def fn(t, s, y, z, u, zeta, nu):
        uu = nu.sum(-1) if nu.shape[-1] else 0.0
        return 0.4 * y + 0.3 * z + c * zeta + 0.2 * uu + 0.1 * (1.0 + t)

    f = from_lipschitz(fn, y=0.4, z=0.3, u2=0.04 * float(np.sum(1.0 / world.lam)) if world.m else 0.0,
                       two_sided=True, name="linear two-sided")
    return {"world": world, "Phi": Phi, "f": f}


def _sandwich(opts):
    world = make_world(opts)
    W = _terminal(world, "W")
    times = world.times

    def fbar(t, s, y, z, u):
        return 0.5 * np.minimum(y, 1.0) + 0.2 * z

    f1 = from_lipschitz(lambda t, s, y, z, u: fbar(t, s, y, z, u) - 0.1 - 0.05 * np.sin(y) ** 2,
                        y=0.55, z=0.2, name="f1")
    f2 = from_lipschitz(lambda t, s, y, z, u: fbar(t, s, y, z, u) + 0.1 + 0.05 * np.cos(3 * y) ** 2,
                        y=0.65, z=0.2, name="f2")
    fb = from_lipschitz(fbar, y=0.5, z=0.2, name="fbar")
    Phi1 = FreeTerm(lambda i: np.sin(W) - 0.2)
    Phi2 = FreeTerm(lambda i: np.sin(W) + 0.1 * times[i])
    return {"world": world, "Phi1": Phi1, "Phi2": Phi2, "f1": f1, "f2": f2, "f_bar": fb}


def _partition(opts):
    world = make_world(opts)
    times = world.times
    L = world.n_nodes(world.N)
    T = world.clock.T

    def g1(t, s, y):
        return 0.5 * (1.0 - t / (2 * T)) * np.tanh(y)

    def g2(t, s, y):
        return g1(t, s, y) + 0.3 * (1.2 * T - t)

    W = _terminal(world, "W")
    Nt = _terminal(world, "N") if world.m else np.zeros(L)
    Phi1 = FreeTerm(lambda i: np.sin(W) + 0.2 * np.cos(Nt))
    Phi2 = FreeTerm(lambda i: np.sin(W) + 0.2 * np.cos(Nt) + (1.5 * T - times[i]) + 0.3 * Nt)
    return {"world": world, "Phi1": Phi1, "Phi2": Phi2, "g1": g1, "g2": g2,
            "h": 0.3, "kappa": [0.5] * world.m}


def _duality(opts):
    from .analysis import FSVIECoefficients
    world = make_world(opts)
    rng = np.random.default_rng(int(opts.get("seed", 0)))
    coeff = FSVIECoefficients.random(world, rng, float(opts.get("bound", 1.0)))
    W = _terminal(world, "W")
    times = world.times
    Psi = lambda i: 1.0 + world.state(i)["W"] * 0.5 + np.cos(times[i])
    Phi = FreeTerm(lambda i: np.sin(W + times[i]))
    return {"world": world, "Psi": Psi, "Phi": Phi, "coeff": coeff}


def _holder(opts):
    world = make_world(opts)
    times = world.times
    N = world.N
    if world.m:
        # tree variant: jumps enter through the data; Y jumps only with the marks
        Phi = FreeTerm(lambda i: _level_state(world, i, "W") + 0.5 * _terminal(world, "N"), alpha=0.5)
    else:
        W = _terminal(world, "W")
        Phi = FreeTerm(lambda i: _level_state(world, i, "W") + 0.5 * np.cos(times[i]) * W, alpha=0.5)
    f = from_lipschitz(lambda t, s, y, z, u: 0.3 * z + 0.2 * np.sin(y), y=0.2, z=0.3,
                       name="0.3z+0.2sin(y)")
    return {"world": world, "Phi": Phi, "f": f, "alpha": 0.5, "p": float(opts.get("p", 4.0))}


PRESETS = {p.name: p for p in [
    Preset("ode-exp", "Type-I BSVIE with driver f = y and unit free term (ODE limit)",
           "ODE oracle Y(t) = e^(T-t); discrete closed form (1 - dt)^(-N)", "solve-type1",
           {"kind": "deterministic", "T": 1.0, "steps": 2000}, _ode_exp),
    Preset("girsanov-drift", "BSDE with driver mu*z (drift completion)",
           "closed form Y_t = W_t + mu (T - t), Z = 1", "solve-bsde",
           {"kind": "tree", "T": 1.0, "steps": 3, "mu": 0.5}, _girsanov),
    Preset("poisson-count", "BSDE with jump-count terminal value",
           "compensator identity Y_0 = lambda T, U = 1", "solve-bsde",
           {"kind": "tree", "T": 1.0, "steps": 3, "brownian": False, "marks": [1.0],
            "intensities": [0.9]}, _poisson),
    Preset("extra-noise-M", "M-solution completion with an orthogonal noise source",
           "dense leaf-space enumeration; nonzero orthogonal martingale", "solve-type1",
           {"kind": "tree", "T": 1.0, "steps": 3, "extra_noise": True}, _extra_noise),
    Preset("duality-linear", "linear FSVIE and its adjoint BSVIE",
           "exact discrete transpose: zero gap on trees, MC band on ensembles", "duality",
           {"kind": "tree", "T": 1.0, "steps": 3, "marks": [1.0], "intensities": [0.8], "seed": 7},
           _duality),
    Preset("comparison-partition", "partition scheme for half-linear drivers",
           "Y^Pi >= 0 nodewise; error decreasing under mesh halving", "partition-compare",
           {"kind": "tree", "T": 1.0, "steps": 4, "marks": [1.0], "intensities": [0.5],
            "max_tree_steps": 8}, _partition),
    Preset("holder-regularity", "time regularity of Y for Hoelder free terms",
           "E|W_t - W_t'|^4 = 3|t - t'|^2 (exponent alpha p = 2)", "regularity",
           {"kind": "ensemble", "T": 1.0, "steps": 64, "n_paths": 4000, "seed": 11}, _holder),
    Preset("lipschitz-standard", "Picard map for a Lipschitz Type-I driver",
           "dense leaf-space fixed point; geometric gap sequence", "solve-type1",
           {"kind": "tree", "T": 1.0, "steps": 3, "marks": [1.0], "intensities": [0.8],
            "extra_noise": True}, _lipschitz),
    Preset("sandwich", "monotone iteration between ordered drivers",
           "pointwise ordering Y1 <= Y_bar <= Y2 on the tree", "compare",
           {"kind": "tree", "T": 1.0, "steps": 3, "marks": [1.0], "intensities": [0.8]}, _sandwich),
    Preset("type2-linear", "Type-II M-solution with a linear two-sided driver",
           "dense linear solve over all node unknowns", "solve-type2",
           {"kind": "tree", "T": 1.0, "steps": 3, "marks": [1.0], "intensities": [0.8]}, _type2_linear),
]}


def get_preset(name: str) -> Preset:
    try:
        return PRESETS[name]
    except KeyError:
        raise KeyError(f"unknown preset {name!r}; known: {', '.join(sorted(PRESETS))}") from None


def build(name: str, overrides: dict | None = None) -> dict:
    p = get_preset(name)
    opts = dict(p.defaults)
    opts.update(overrides or {})
    data = p.build(opts)
    data["options"] = opts
    data["preset"] = p
    return data


def list_presets() -> list[dict]:
    return [PRESETS[k].catalog_entry() for k in sorted(PRESETS)]
