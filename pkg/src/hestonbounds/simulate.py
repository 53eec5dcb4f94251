"""Forward simulation of (S, V) under the risk-neutral dynamics.

Log-price follows Euler-Maruyama, variance the implicit Milstein recursion.
The variance shock is the same Wiener component that enters the price's
correlated part; both independent increment streams are stored so the
backward pass reuses exactly the increments that generated the paths.
Truncation only touches square roots (sqrt(max(V, 0))); V itself may go
negative in the linear terms and each occurrence is counted.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import GridMismatchError, InputError
from .model import HestonParams

_MAGIC = b"HBPB\x01"


@dataclass(frozen=True)
class TimeGrid:
    knots: np.ndarray

    def __post_init__(self):
        knots = np.asarray(self.knots, dtype=float)
        if knots.ndim != 1 or knots.size < 2:
            raise InputError("time grid needs at least two knots")
        if not np.all(np.diff(knots) > 0):
            raise InputError("time grid must be strictly increasing")
        knots.flags.writeable = False
        object.__setattr__(self, "knots", knots)

    @classmethod
    def equidistant(cls, horizon: float, n_steps: int, start: float = 0.0) -> "TimeGrid":
        if horizon <= start:
            raise InputError(f"horizon {horizon} must exceed start {start}")
        return cls(np.linspace(start, horizon, n_steps + 1))

    @property
    def deltas(self) -> np.ndarray:
        return np.diff(self.knots)

    @property
    def n_steps(self) -> int:
        return self.knots.size - 1

    @property
    def horizon(self) -> float:
        return float(self.knots[-1])

    def subset_indices(self, target: "TimeGrid") -> np.ndarray:
        """Indices of target knots inside this grid; error when not a subset.
        Matching is to the nearest knot within 1e-9 of the local spacing."""
        right = np.clip(np.searchsorted(self.knots, target.knots), 0, self.knots.size - 1)
        left = np.clip(right - 1, 0, self.knots.size - 1)
        pick_left = np.abs(self.knots[left] - target.knots) <= np.abs(
            self.knots[right] - target.knots
        )
        idx = np.where(pick_left, left, right)
        tol = 1e-9 * max(float(self.deltas.min()), 1e-300)
        ok = np.abs(self.knots[idx] - target.knots) <= tol
        if not np.all(ok):
            missing = target.knots[~ok]
            raise GridMismatchError(f"target knots not in source grid: {missing[:5]}")
        return idx


@dataclass(frozen=True)
class PathBundle:
    """N forward paths with the Wiener increments that generated them.

    dw1 drives the variance and the rho-part of the price; dw2 is the
    orthogonal component. Both are increments of the independent Brownian
    pair of the pricing dynamics.
    """

    grid: TimeGrid
    s_paths: np.ndarray
    v_paths: np.ndarray
    dw1: np.ndarray
    dw2: np.ndarray
    rng_seed: int
    negative_v_count: int = 0

    def __post_init__(self):
        n = self.grid.n_steps
        for name, arr, cols in (
            ("s_paths", self.s_paths, n + 1),
            ("v_paths", self.v_paths, n + 1),
            ("dw1", self.dw1, n),
            ("dw2", self.dw2, n),
        ):
            arr = np.asarray(arr, dtype=float)
            if arr.ndim != 2 or arr.shape[1] != cols:
                raise InputError(f"{name} must be N x {cols}, got {arr.shape}")
            arr.flags.writeable = False
            object.__setattr__(self, name, arr)
        if np.any(self.s_paths <= 0):
            raise InputError("asset paths must stay positive")

    @property
    def n_paths(self) -> int:
        return self.s_paths.shape[0]

    def save(self, path) -> None:
        """Binary dump: magic, uint64 (N, n, seed), int64 negative count,
        grid knots, then s, v, dw1, dw2 as column-major float64 blocks."""
        n_paths, n = self.n_paths, self.grid.n_steps
        with open(path, "wb") as fh:
            fh.write(_MAGIC)
            fh.write(struct.pack("<QQqq", n_paths, n, self.rng_seed, self.negative_v_count))
            fh.write(np.asarray(self.grid.knots, dtype="<f8").tobytes())
            for arr in (self.s_paths, self.v_paths, self.dw1, self.dw2):
                fh.write(np.asarray(arr, dtype="<f8").tobytes(order="F"))

    @classmethod
    def load(cls, path) -> "PathBundle":
        with open(path, "rb") as fh:
            magic = fh.read(len(_MAGIC))
            if magic != _MAGIC:
                raise InputError(f"not a path-bundle file: bad magic {magic!r}")
            n_paths, n, seed, neg = struct.unpack("<QQqq", fh.read(32))
            knots = np.frombuffer(fh.read(8 * (n + 1)), dtype="<f8")
            blocks = []
            for cols in (n + 1, n + 1, n, n):
                raw = np.frombuffer(fh.read(8 * n_paths * cols), dtype="<f8")
                blocks.append(raw.reshape((n_paths, cols), order="F"))
            return cls(
                grid=TimeGrid(knots),
                s_paths=blocks[0],
                v_paths=blocks[1],
                dw1=blocks[2],
                dw2=blocks[3],
                rng_seed=int(seed),
                negative_v_count=int(neg),
            )


def _step_normals(seed: int, step: int, n_paths: int) -> tuple[np.ndarray, np.ndarray]:
    """Counter-based stream for one time step; path identity is the array
    index, so results do not depend on how work is scheduled."""
    gen = np.random.Generator(np.random.Philox(np.random.SeedSequence(seed, spawn_key=(step,))))
    z = gen.standard_normal((2, n_paths))
    return z[0], z[1]


def simulate_heston(
    params: HestonParams,
    spot: float,
    v0: float,
    grid: TimeGrid,
    n_paths: int,
    seed: int,
) -> PathBundle:
    """Simulate the joint paths on the grid.

    Variance recursion (implicit in the mean-reversion term):
        V_i = (V_{i-1} + kb*dt + sigma*sqrt(V+)*dW1 + sigma^2/4*(dW1^2 - dt)) / (1 + k*dt)
    with k, kb the risk-neutral reversion speed and speed*level. Log-price:
        dlogS = (r - V/2) dt + sqrt(V+) (rho dW1 + sqrt(1-rho^2) dW2).
    """
    if spot <= 0:
        raise InputError(f"spot must be positive, got {spot}")
    if v0 < 0:
        raise InputError(f"v0 must be nonnegative, got {v0}")
    if n_paths < 1:
        raise InputError("need at least one path")

    kappa = params.kappa_rn
    kb = params.kappa_rn * params.theta_rn
    sigma, rho, r = params.sigma, params.rho, params.r
    rho_c = np.sqrt(1.0 - rho**2)

    n = grid.n_steps
    deltas = grid.deltas
    s = np.empty((n_paths, n + 1))
    v = np.empty((n_paths, n + 1))
    dw1 = np.empty((n_paths, n))
    dw2 = np.empty((n_paths, n))
    log_s = np.full(n_paths, np.log(spot))
    v_cur = np.full(n_paths, float(v0))
    s[:, 0] = spot
    v[:, 0] = v0
    negatives = 0

    for i in range(n):
        dt = deltas[i]
        sq_dt = np.sqrt(dt)
        z1, z2 = _step_normals(seed, i, n_paths)
        w1 = z1 * sq_dt
        w2 = z2 * sq_dt
        dw1[:, i] = w1
        dw2[:, i] = w2
        root_v = np.sqrt(np.maximum(v_cur, 0.0))
        log_s = log_s + (r - 0.5 * v_cur) * dt + root_v * (rho * w1 + rho_c * w2)
        v_cur = (v_cur + kb * dt + sigma * root_v * w1 + 0.25 * sigma**2 * (w1**2 - dt)) / (
            1.0 + kappa * dt
        )
        negatives += int(np.count_nonzero(v_cur < 0.0))
        s[:, i + 1] = np.exp(log_s)
        v[:, i + 1] = v_cur

    return PathBundle(
        grid=grid,
        s_paths=s,
        v_paths=v,
        dw1=dw1,
        dw2=dw2,
        rng_seed=seed,
        negative_v_count=negatives,
    )


def downsample(bundle: PathBundle, target: TimeGrid) -> PathBundle:
    """Restrict a bundle to a coarser grid; Wiener increments are summed over
    each coarse interval so they remain the increments of the coarse grid."""
    idx = bundle.grid.subset_indices(target)
    if idx[0] != 0 or idx[-1] != bundle.grid.n_steps:
        raise GridMismatchError("target grid must share the source endpoints")
    if idx.size == bundle.grid.knots.size and np.array_equal(idx, np.arange(idx.size)):
        return bundle

    boundaries = idx[:-1]
    dw1 = np.add.reduceat(bundle.dw1, boundaries, axis=1)
    dw2 = np.add.reduceat(bundle.dw2, boundaries, axis=1)
    return PathBundle(
        grid=target,
        s_paths=bundle.s_paths[:, idx],
        v_paths=bundle.v_paths[:, idx],
        dw1=dw1,
        dw2=dw2,
        rng_seed=bundle.rng_seed,
        negative_v_count=bundle.negative_v_count,
    )
