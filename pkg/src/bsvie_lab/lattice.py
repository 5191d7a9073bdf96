"""Clocks and discrete noise worlds.

Two kinds of world share one interface:

* ``ScenarioTree``: exact product-branching tree.  Level ``j`` holds
  ``branching**j`` nodes; the children of node ``k`` at level ``j`` are
  ``k*b, ..., k*b + b - 1`` at level ``j+1``.
* ``PathEnsemble``: Monte-Carlo paths; every level holds ``n_paths`` entries.

Random variables measurable at level ``j`` are numpy arrays whose last axis
has length ``n_nodes(j)``.  Step ``j`` is the interval ``[t_j, t_{j+1}]`` and
its noise (Brownian increment, per-mark jump counts, extra noise) lives at
level ``j+1``.
"""
from __future__ import annotations

import itertools
import json
from functools import cached_property
from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np

ENSEMBLE_MAGIC = b"BSVIEENS"
DEFAULT_MAX_STEPS = 6


class LatticeError(ValueError):
    pass


# ---------------------------------------------------------------- clock


@dataclass(frozen=True)
class Clock:
    times: np.ndarray       # t_0 = 0 < ... < t_N = T
    B: np.ndarray           # B(t_i)
    alpha: np.ndarray       # alpha_i on [t_i, t_{i+1})
    A: np.ndarray           # A(t_i) = sum_{j<i} alpha_j^2 dB_j
    jumps: np.ndarray       # jump part of dB_j
    frak_f: float

    @property
    def n_steps(self) -> int:
        return len(self.times) - 1

    @property
    def T(self) -> float:
        return float(self.times[-1])

    @cached_property
    def dt(self) -> np.ndarray:
        return np.diff(self.times)

    @cached_property
    def dB(self) -> np.ndarray:
        return np.diff(self.B)

    @cached_property
    def dA(self) -> np.ndarray:
        return np.diff(self.A)

    @property
    def is_ito(self) -> bool:
        return bool(np.allclose(self.B, self.times, rtol=0, atol=1e-15))

    def to_dict(self) -> dict:
        return {"times": self.times.tolist(), "B": self.B.tolist(),
                "alpha": self.alpha.tolist(), "jumps": self.jumps.tolist()}


def build_clock(grid: Sequence[float] | np.ndarray, alpha: float | Sequence[float] | Callable = 1.0,
                B: str | Sequence[float] = "ito",
                jumps: Mapping[float, float] | None = None) -> Clock:
    """Deterministic clock on ``grid``.

    ``B="ito"`` gives B(t) = t.  ``jumps`` maps a jump time to a jump size of B;
    a jump at time t is booked on the interval (t_j, t_{j+1}] containing it.
    ``B`` may also be an explicit array of values, in which case ``jumps`` only
    labels the part of the increments that counts towards frak_f.
    ``alpha`` is a constant, a per-interval array or a callable evaluated at the
    left end point of each interval.
    """
    times = np.asarray(grid, dtype=float)
    if times.ndim != 1 or len(times) < 2:
        raise LatticeError("grid needs at least two points")
    if times[0] != 0.0:
        raise LatticeError("grid must start at 0")
    if np.any(np.diff(times) <= 0):
        raise LatticeError("grid must be strictly increasing")
    n = len(times) - 1
    if callable(alpha):
        a = np.array([float(alpha(t)) for t in times[:-1]])
    else:
        a = np.broadcast_to(np.asarray(alpha, dtype=float), (n,)).copy()
    if np.any(~np.isfinite(a)) or np.any(a < 0) or not np.any(a > 0):
        raise LatticeError("alpha must be nonnegative, finite and not identically zero")
    if not callable(alpha) and np.any(a <= 0):
        raise LatticeError("alpha values must be positive")
    jump_part = np.zeros(n)
    for tj, size in (jumps or {}).items():
        if size < 0:
            raise LatticeError("jumps of B must be nonnegative")
        if not (times[0] < tj <= times[-1]):
            raise LatticeError(f"jump time {tj} outside (0, T]")
        k = int(np.searchsorted(times, tj, side="left")) - 1
        jump_part[max(k, 0)] += size
    if isinstance(B, str):
        if B != "ito":
            raise LatticeError(f"unknown clock kind {B!r}")
        Bv = np.concatenate([[0.0], np.cumsum(np.diff(times) + jump_part)])
    else:
        Bv = np.asarray(B, dtype=float)
        if Bv.shape != times.shape:
            raise LatticeError("B values must match the grid")
        if np.any(np.diff(Bv) < 0):
            raise LatticeError("B must be nondecreasing")
        if np.any(jump_part > np.diff(Bv) + 1e-15):
            raise LatticeError("jump part exceeds the increment of B")
    dA = a**2 * np.diff(Bv)
    A = np.concatenate([[0.0], np.cumsum(dA)])
    frak_f = float(np.max(a**2 * jump_part)) if n else 0.0
    return Clock(times=times, B=Bv, alpha=a, A=A, jumps=jump_part, frak_f=frak_f)


def uniform_clock(T: float, n_steps: int, **kw) -> Clock:
    return build_clock(np.linspace(0.0, T, n_steps + 1), **kw)


# ---------------------------------------------------------------- jumps


@dataclass(frozen=True)
class JumpMeasureSpec:
    """Finite-mark Levy measure mu = sum_k lambda_k delta_{x_k}."""
    marks: tuple = ()
    intensities: tuple = ()

    def __post_init__(self):
        if len(self.marks) != len(self.intensities):
            raise LatticeError("marks and intensities differ in length")
        if any(l <= 0 for l in self.intensities):
            raise LatticeError("intensities must be positive")

    @property
    def m(self) -> int:
        return len(self.marks)

    @property
    def lam(self) -> np.ndarray:
        return np.asarray(self.intensities, dtype=float)

    def to_dict(self) -> dict:
        return {"marks": list(self.marks), "intensities": list(self.intensities)}


NO_JUMPS = JumpMeasureSpec()


# ---------------------------------------------------------------- worlds


class World:
    """Common interface of trees and ensembles (see module docstring)."""

    kind = "abstract"
    clock: Clock
    jumps: JumpMeasureSpec
    brownian: bool
    extra_noise: bool

    @property
    def N(self) -> int:
        return self.clock.n_steps

    @property
    def times(self) -> np.ndarray:
        return self.clock.times

    @property
    def dt(self) -> np.ndarray:
        return self.clock.dt

    @property
    def dB(self) -> np.ndarray:
        return self.clock.dB

    @property
    def m(self) -> int:
        return self.jumps.m

    @property
    def lam(self) -> np.ndarray:
        return self.jumps.lam

    @property
    def n_phi(self) -> int:
        return int(self.brownian) + self.m

    def n_nodes(self, j: int) -> int:
        raise NotImplementedError

    def weights(self, j: int) -> np.ndarray:
        raise NotImplementedError

    def lift(self, x, i: int, j: int):
        raise NotImplementedError

    def expect(self, x, j: int):
        """Unconditional expectation of a level-j variable (reduces the last axis)."""
        return np.asarray(x) @ self.weights(j)

    def phi(self, j: int) -> np.ndarray:
        """Compensated noise features of step j, shape (n_{j+1}, n_phi)."""
        cols = []
        if self.brownian:
            cols.append(self.dW[j])
        if self.m:
            cols.append(self.dN[j] - self.lam * self.dt[j])
        if not cols:
            return np.zeros((self.n_nodes(j + 1), 0))
        return np.column_stack(cols)

    def gram(self, j: int) -> np.ndarray:
        raise NotImplementedError

    def jump_variance(self, j: int) -> np.ndarray:
        """Variance of each compensated jump indicator over step j."""
        g = self.gram(j)
        k0 = int(self.brownian)
        return np.diag(g)[k0:].copy()

    def path_values(self, x, j: int):
        """Lift a level-j variable to the terminal level."""
        return self.lift(x, j, self.N)

    def state(self, j: int) -> dict:
        """Cumulative noise at level j: W, N (per mark), E (extra noise sum)."""
        raise NotImplementedError

    def describe(self) -> dict:
        return {"kind": self.kind, "n_steps": self.N, "clock": self.clock.to_dict(),
                "jumps": self.jumps.to_dict(), "brownian": self.brownian,
                "extra_noise": self.extra_noise}


class ScenarioTree(World):
    kind = "tree"

    def __init__(self, clock: Clock, jumps: JumpMeasureSpec, extra_noise: bool,
                 brownian: bool = True, quantization: int = 2):
        self.clock = clock
        self.jumps = jumps
        self.extra_noise = bool(extra_noise)
        self.brownian = bool(brownian)
        self.quantization = quantization
        self.branch_dW: list[np.ndarray] = []
        self.branch_dN: list[np.ndarray] = []
        self.branch_eps: list[np.ndarray] = []
        self.branch_p: list[np.ndarray] = []
        for dt in clock.dt:
            factors = []
            if self.brownian:
                if quantization == 2:
                    s = np.sqrt(dt)
                    factors.append([(("w", -s), 0.5), (("w", s), 0.5)])
                elif quantization == 3:
                    s = np.sqrt(3.0 * dt)
                    factors.append([(("w", -s), 1 / 6), (("w", 0.0), 2 / 3), (("w", s), 1 / 6)])
                else:
                    raise LatticeError("quantization must be 2 or 3")
            for k, lam in enumerate(jumps.intensities):
                q = lam * dt
                if q >= 1.0:
                    raise LatticeError(f"lambda*dt = {q} >= 1 for mark {k}: refine the grid")
                factors.append([((f"n{k}", 0.0), 1.0 - q), ((f"n{k}", 1.0), q)])
            if self.extra_noise:
                factors.append([(("e", -1.0), 0.5), (("e", 1.0), 0.5)])
            combos = list(itertools.product(*factors)) if factors else [()]
            b = len(combos)
            dW = np.zeros(b)
            dN = np.zeros((b, jumps.m))
            eps = np.zeros(b)
            p = np.ones(b)
            for r, combo in enumerate(combos):
                for (name, val), pr in combo:
                    p[r] *= pr
                    if name == "w":
                        dW[r] = val
                    elif name == "e":
                        eps[r] = val
                    else:
                        dN[r, int(name[1:])] = val
            self.branch_dW.append(dW)
            self.branch_dN.append(dN)
            self.branch_eps.append(eps)
            self.branch_p.append(p)
        self.branching = len(self.branch_p[0]) if self.branch_p else 1
        b = self.branching
        self._weights = [np.ones(1)]
        for j in range(self.N):
            self._weights.append(np.kron(self._weights[-1], self.branch_p[j]))
        # per-step noise as level-(j+1) arrays
        self.dW = [np.tile(self.branch_dW[j], b**j) for j in range(self.N)]
        self.dN = [np.tile(self.branch_dN[j], (b**j, 1)) for j in range(self.N)]
        self.eps = [np.tile(self.branch_eps[j], b**j) for j in range(self.N)]
        self._gram = []
        for j in range(self.N):
            cols = []
            if self.brownian:
                cols.append(self.branch_dW[j])
            if jumps.m:
                cols.append(self.branch_dN[j] - jumps.lam * clock.dt[j])
            ph = np.column_stack(cols) if cols else np.zeros((b, 0))
            self._gram.append((ph * self.branch_p[j][:, None]).T @ ph)

    def n_nodes(self, j: int) -> int:
        return self.branching**j

    def weights(self, j: int) -> np.ndarray:
        return self._weights[j]

    def lift(self, x, i: int, j: int):
        x = np.asarray(x)
        if j < i:
            raise LatticeError("cannot lift to an earlier level")
        if j == i:
            return x
        return np.repeat(x, self.branching ** (j - i), axis=-1)

    def lift_u(self, u, i: int, j: int):
        """Lift an array shaped (..., n_i, m)."""
        if j == i:
            return u
        return np.repeat(u, self.branching ** (j - i), axis=-2)

    def gram(self, j: int) -> np.ndarray:
        return self._gram[j]

    def children_average(self, v, j: int):
        v = np.asarray(v)
        b = self.branching
        shp = v.shape[:-1] + (self.n_nodes(j), b)
        return v.reshape(shp) @ self.branch_p[j]

    def state(self, j: int) -> dict:
        W = np.zeros(1)
        Nc = np.zeros((1, self.m))
        E = np.zeros(1)
        for i in range(j):
            W = self.lift(W, i, i + 1) + self.dW[i]
            Nc = self.lift_u(Nc, i, i + 1) + self.dN[i]
            E = self.lift(E, i, i + 1) + self.eps[i]
        return {"W": W, "N": Nc, "E": E}

    def node_ids(self, j: int) -> np.ndarray:
        return np.arange(self.n_nodes(j))

    def to_ensemble(self) -> "PathEnsemble":
        """One path per leaf, weighted by the leaf probability."""
        N = self.N
        L = self.n_nodes(N)
        dW = np.stack([self.lift(self.dW[j], j + 1, N) for j in range(N)], axis=1) if N else np.zeros((L, 0))
        dN = np.stack([self.lift_u(self.dN[j], j + 1, N) for j in range(N)], axis=1) if N else np.zeros((L, 0, self.m))
        eps = np.stack([self.lift(self.eps[j], j + 1, N) for j in range(N)], axis=1) if N else np.zeros((L, 0))
        node_ids = np.stack([np.arange(L) // self.branching ** (N - j) for j in range(N + 1)], axis=1)
        return PathEnsemble(self.clock, self.jumps, self.extra_noise, dW, dN, eps,
                            seed=None, brownian=self.brownian,
                            path_weights=self.weights(N).copy(), node_ids=node_ids)

    def describe(self) -> dict:
        d = super().describe()
        d.update(branching=self.branching, n_leaves=self.n_nodes(self.N), quantization=self.quantization)
        return d


def build_tree(clock: Clock, jumps: JumpMeasureSpec = NO_JUMPS, extra_noise: bool = False,
               n_steps: int | None = None, brownian: bool = True, quantization: int = 2,
               max_steps: int = DEFAULT_MAX_STEPS) -> ScenarioTree:
    """Exact scenario tree on the first ``n_steps`` intervals of ``clock``.

    The step cap guards the exponential node count; worlds with a single branch
    per step (no noise at all) are exempt.
    """
    if n_steps is not None:
        if n_steps > clock.n_steps:
            raise LatticeError("n_steps exceeds the clock grid")
        if n_steps < clock.n_steps:
            clock = build_clock(clock.times[: n_steps + 1], alpha=clock.alpha[:n_steps],
                                B=clock.B[: n_steps + 1],
                                jumps={clock.times[j + 1]: clock.jumps[j] for j in range(n_steps) if clock.jumps[j] > 0})
    tree = ScenarioTree(clock, jumps, extra_noise, brownian=brownian, quantization=quantization)
    if tree.branching > 1 and clock.n_steps > max_steps:
        raise LatticeError(f"tree with {clock.n_steps} steps exceeds the cap of {max_steps} steps")
    return tree


def deterministic_world(clock: Clock) -> ScenarioTree:
    """A single-node tree: no Brownian motion, no jumps, no extra noise."""
    return ScenarioTree(clock, NO_JUMPS, False, brownian=False)


class PathEnsemble(World):
    kind = "ensemble"

    def __init__(self, clock: Clock, jumps: JumpMeasureSpec, extra_noise: bool,
                 dW: np.ndarray, dN: np.ndarray, eps: np.ndarray, seed: int | None,
                 brownian: bool = True, path_weights: np.ndarray | None = None,
                 node_ids: np.ndarray | None = None):
        self.clock = clock
        self.jumps = jumps
        self.extra_noise = bool(extra_noise)
        self.brownian = bool(brownian)
        self.seed = seed
        self._dW = np.ascontiguousarray(dW, dtype=float)
        self._dN = np.ascontiguousarray(dN, dtype=float)
        self._eps = np.ascontiguousarray(eps, dtype=float)
        self.n_paths = self._dW.shape[0]
        if path_weights is None:
            path_weights = np.full(self.n_paths, 1.0 / self.n_paths)
        self.path_weights = np.asarray(path_weights, dtype=float)
        self.node_ids = node_ids
        self.dW = [self._dW[:, j] for j in range(self.N)]
        self.dN = [self._dN[:, j, :] for j in range(self.N)]
        self.eps = [self._eps[:, j] for j in range(self.N)]
        self._cache: dict = {}

    def n_nodes(self, j: int) -> int:
        return self.n_paths

    def weights(self, j: int) -> np.ndarray:
        return self.path_weights

    def lift(self, x, i: int, j: int):
        return np.asarray(x)

    def lift_u(self, u, i: int, j: int):
        return u

    def gram(self, j: int) -> np.ndarray:
        d = [self.dt[j]] if self.brownian else []
        d += list(self.lam * self.dt[j])
        return np.diag(d) if d else np.zeros((0, 0))

    def state(self, j: int) -> dict:
        key = ("state", j)
        if key not in self._cache:
            self._cache[key] = {
                "W": self._dW[:, :j].sum(axis=1),
                "N": self._dN[:, :j, :].sum(axis=1),
                "E": self._eps[:, :j].sum(axis=1),
            }
        return self._cache[key]

    def describe(self) -> dict:
        d = super().describe()
        d.update(n_paths=self.n_paths, seed=self.seed)
        return d

    # ---- columnar export

    def save(self, path) -> None:
        cols = {"dW": self._dW, "dN": self._dN, "eps": self._eps, "path_weights": self.path_weights}
        if self.node_ids is not None:
            cols["node_ids"] = np.asarray(self.node_ids, dtype=np.int64)
        header = {"format": 1, "seed": self.seed, "clock": self.clock.to_dict(),
                  "jumps": self.jumps.to_dict(), "extra_noise": self.extra_noise,
                  "brownian": self.brownian, "columns": []}
        blobs = []
        offset = 0
        for name, arr in cols.items():
            arr = np.ascontiguousarray(arr)
            raw = arr.astype(arr.dtype.newbyteorder("<"), copy=False).tobytes()
            header["columns"].append({"name": name, "dtype": arr.dtype.str.replace(">", "<"),
                                      "shape": list(arr.shape), "offset": offset, "nbytes": len(raw)})
            blobs.append(raw)
            offset += len(raw)
        hb = json.dumps(header, sort_keys=True).encode()
        with open(path, "wb") as fh:
            fh.write(ENSEMBLE_MAGIC)
            fh.write(np.uint64(len(hb)).tobytes())
            fh.write(hb)
            for raw in blobs:
                fh.write(raw)

    @classmethod
    def load(cls, path) -> "PathEnsemble":
        with open(path, "rb") as fh:
            data = fh.read()
        if data[:8] != ENSEMBLE_MAGIC:
            raise LatticeError("not an ensemble file")
        hlen = int(np.frombuffer(data[8:16], dtype="<u8")[0])
        header = json.loads(data[16:16 + hlen])
        base = 16 + hlen
        cols = {}
        for c in header["columns"]:
            raw = data[base + c["offset"]: base + c["offset"] + c["nbytes"]]
            cols[c["name"]] = np.frombuffer(raw, dtype=c["dtype"]).reshape(c["shape"]).copy()
        ck = header["clock"]
        times = np.asarray(ck["times"])
        clock = build_clock(times, alpha=np.asarray(ck["alpha"]), B=np.asarray(ck["B"]),
                            jumps={times[j + 1]: s for j, s in enumerate(ck["jumps"]) if s > 0})
        jumps = JumpMeasureSpec(tuple(header["jumps"]["marks"]), tuple(header["jumps"]["intensities"]))
        return cls(clock, jumps, header["extra_noise"], cols["dW"], cols["dN"], cols["eps"],
                   seed=header["seed"], brownian=header["brownian"],
                   path_weights=cols["path_weights"], node_ids=cols.get("node_ids"))


def _block_rng(seed: int, block: int) -> np.random.Generator:
    # counter-based Philox keyed by (seed, block): independent of scheduling
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=(int(block),))
    return np.random.Generator(np.random.Philox(ss))


def simulate_paths(clock: Clock, jumps: JumpMeasureSpec = NO_JUMPS, extra_noise: bool = False,
                   n_paths: int = 1000, seed: int = 0, brownian: bool = True,
                   block_size: int = 4096) -> PathEnsemble:
    """Monte-Carlo ensemble.

    Paths are generated in blocks of ``block_size``; block ``b`` draws from a
    Philox stream keyed by ``(seed, b)``, so any block can be regenerated on its
    own and results do not depend on how blocks are scheduled.
    Jump counts per step are Poisson(lambda_k dt); extra noise is +-1.
    """
    if n_paths < 1:
        raise LatticeError("n_paths must be >= 1")
    N = clock.n_steps
    dt = clock.dt
    m = jumps.m
    dW = np.zeros((n_paths, N))
    dN = np.zeros((n_paths, N, m))
    eps = np.zeros((n_paths, N))
    for b, start in enumerate(range(0, n_paths, block_size)):
        stop = min(start + block_size, n_paths)
        rng = _block_rng(seed, b)
        n = stop - start
        z = rng.standard_normal((n, N))
        if brownian:
            dW[start:stop] = z * np.sqrt(dt)
        if m:
            dN[start:stop] = rng.poisson(jumps.lam[None, None, :] * dt[None, :, None], size=(n, N, m))
        e = rng.integers(0, 2, size=(n, N))
        if extra_noise:
            eps[start:stop] = 2.0 * e - 1.0
    return PathEnsemble(clock, jumps, extra_noise, dW, dN, eps, seed=seed, brownian=brownian)
