"""Classical noise traces: OU dephasing, shared drive amplitude and phase jitter."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.signal import lfilter

MASK64 = (1 << 64) - 1

# stream ids for the shared drive traces; site dephasing uses the site index
STREAM_DRIVE_AMP = 1 << 32
STREAM_DRIVE_PHASE = (1 << 32) + 1


def splitmix64(x: int) -> int:
    """One splitmix64 output for state ``x`` (Steele, Lea and Flood)."""
    z = (x + 0x9E3779B97F4A7C15) & MASK64
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK64
    return z ^ (z >> 31)


def derive_seed(parent: int, stream_id: int) -> int:
    """Child seed = splitmix64(parent xor splitmix64(stream_id))."""
    return splitmix64((int(parent) & MASK64) ^ splitmix64(int(stream_id) & MASK64))


@dataclass(frozen=True)
class OUParams:
    """Ornstein-Uhlenbeck process; ``amplitude`` is the stationary std-dev."""

    amplitude: float
    tau_c: float

    def __post_init__(self):
        if self.amplitude < 0:
            raise ValueError("OU amplitude must be >= 0")
        if not self.tau_c > 0:
            raise ValueError("tau_c must be > 0")


@dataclass(frozen=True)
class PhaseJitterParams:
    """Piecewise-constant phase, uniform in [-bound, bound], redrawn every ``dwell``."""

    bound: float
    dwell: float

    def __post_init__(self):
        if self.bound < 0:
            raise ValueError("phase bound must be >= 0")
        if not self.dwell > 0:
            raise ValueError("dwell must be > 0")


@dataclass(frozen=True)
class TimeGrid:
    """Uniform grid t_i = i * dt for i = 0..n-1."""

    dt: float
    n: int

    def __post_init__(self):
        if not self.dt > 0 or self.n < 1:
            raise ValueError("grid needs dt > 0 and n >= 1")

    @property
    def times(self) -> np.ndarray:
        return np.arange(self.n) * self.dt

    @property
    def t_final(self) -> float:
        return (self.n - 1) * self.dt

    @classmethod
    def covering(cls, t_final: float, dt: float) -> "TimeGrid":
        return cls(dt, int(round(t_final / dt)) + 1)

    def index(self, t: float) -> int:
        i = int(round(t / self.dt))
        if not 0 <= i < self.n or abs(t - i * self.dt) > 1e-9 * max(self.dt, abs(t)):
            raise ValueError(f"t={t} is not on the grid (dt={self.dt}, n={self.n})")
        return i


def as_grid(grid) -> TimeGrid:
    """Accept a TimeGrid or a 1D array of uniformly spaced times starting at 0."""
    if isinstance(grid, TimeGrid):
        return grid
    t = np.asarray(grid, dtype=float)
    if t.ndim != 1 or t.size < 2:
        raise ValueError("time array must be 1D with at least two points")
    steps = np.diff(t)
    dt = steps.mean()
    if abs(t[0]) > 1e-12 or np.max(np.abs(steps - dt)) > 1e-9 * dt:
        raise ValueError("non-uniform grid: expected t_i = i*dt")
    return TimeGrid(float(dt), t.size)


@dataclass(frozen=True)
class NoiseSpec:
    """Noise attached to a system.

    ``dephasing`` holds one OU process per spin site (None = quiet site).
    ``drive_amp`` is the relative amplitude fluctuation delta_Omega/Omega,
    shared by every drive fed from the common source; each drive scales it by
    its own Rabi frequency.
    """

    dephasing: tuple[OUParams | None, ...] = ()
    drive_amp: OUParams | None = None
    phase: PhaseJitterParams | None = None

    @classmethod
    def uniform(cls, n_sites: int, dephasing: OUParams | None = None,
                drive_amp: OUParams | None = None, phase: PhaseJitterParams | None = None):
        return cls((dephasing,) * n_sites, drive_amp, phase)

    @property
    def is_quiet(self) -> bool:
        return (all(p is None or p.amplitude == 0 for p in self.dephasing)
                and (self.drive_amp is None or self.drive_amp.amplitude == 0)
                and (self.phase is None or self.phase.bound == 0))


def sample_ou(params: OUParams, grid, seed: int) -> np.ndarray:
    """Exact OU discretization, started from the stationary law."""
    grid = as_grid(grid)
    rng = np.random.default_rng(seed)
    draws = rng.standard_normal(grid.n)
    decay = np.exp(-grid.dt / params.tau_c)
    kick = params.amplitude * np.sqrt(-np.expm1(-2.0 * grid.dt / params.tau_c))
    drive = kick * draws
    drive[0] = params.amplitude * draws[0]
    # x_i = decay * x_{i-1} + drive_i
    return lfilter([1.0], [1.0, -decay], drive)


def sample_phase(params: PhaseJitterParams, grid, seed: int) -> np.ndarray:
    grid = as_grid(grid)
    segment = np.floor(grid.times / params.dwell + 1e-9).astype(np.int64)
    rng = np.random.default_rng(seed)
    values = rng.uniform(-params.bound, params.bound, segment[-1] + 1)
    return values[segment]


@dataclass(frozen=True, eq=False)
class NoiseRealization:
    """One draw of every trace on a shared grid.

    dephasing: (n_sites, n) in rad/us; drive_amp: (n,) relative fluctuation;
    drive_phase: (n,) in rad.
    """

    grid: TimeGrid
    dephasing: np.ndarray
    drive_amp: np.ndarray
    drive_phase: np.ndarray
    seed: int | None = None

    def __post_init__(self):
        n = self.grid.n
        if self.dephasing.ndim != 2 or self.dephasing.shape[1] != n:
            raise ValueError("dephasing traces must have shape (n_sites, n)")
        if self.drive_amp.shape != (n,) or self.drive_phase.shape != (n,):
            raise ValueError("drive traces must match the grid length")
        for arr in (self.dephasing, self.drive_amp, self.drive_phase):
            arr.setflags(write=False)

    @property
    def n_sites(self) -> int:
        return self.dephasing.shape[0]

    @classmethod
    def quiet(cls, grid: TimeGrid, n_sites: int) -> "NoiseRealization":
        return cls(grid, np.zeros((n_sites, grid.n)), np.zeros(grid.n), np.zeros(grid.n))


def build_realization(system, grid, seed: int) -> NoiseRealization:
    """Draw all traces for ``system`` (a SystemSpec or a bare NoiseSpec)."""
    grid = as_grid(grid)
    spec: NoiseSpec = getattr(system, "noise", system)
    n_sites = getattr(getattr(system, "layout", None), "n_spins", len(spec.dephasing))
    if spec.dephasing and len(spec.dephasing) != n_sites:
        raise ValueError(f"{len(spec.dephasing)} dephasing entries for {n_sites} sites")
    deph = np.zeros((n_sites, grid.n))
    for k, params in enumerate(spec.dephasing):
        if params is not None and params.amplitude > 0:
            deph[k] = sample_ou(params, grid, derive_seed(seed, k))
    amp = np.zeros(grid.n)
    if spec.drive_amp is not None and spec.drive_amp.amplitude > 0:
        amp = sample_ou(spec.drive_amp, grid, derive_seed(seed, STREAM_DRIVE_AMP))
    phase = np.zeros(grid.n)
    if spec.phase is not None and spec.phase.bound > 0:
        phase = sample_phase(spec.phase, grid, derive_seed(seed, STREAM_DRIVE_PHASE))
    return NoiseRealization(grid, deph, amp, phase, seed)


def to_csv(realization: NoiseRealization, path) -> Path:
    path = Path(path)
    header = ["t"] + [f"site{k}_dz" for k in range(realization.n_sites)] + ["d_omega", "d_phase"]
    cols = np.vstack([realization.grid.times, realization.dephasing,
                      realization.drive_amp, realization.drive_phase]).T
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        writer.writerows([repr(float(v)) for v in row] for row in cols)
    return path
