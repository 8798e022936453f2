"""Trajectory propagation and ensemble averaging.

Each trajectory sees a zero-order-hold Hamiltonian on a uniform grid and is
advanced by psi <- exp(-i H(t_i) dt) psi.  Below dimension 256 the exponential
is formed exactly (scipy's scaling-and-squaring, batched over trajectories);
above it, a Lanczos approximation is run in lockstep over a block of
trajectories until every column meets the error tolerance.

Trajectories are split into fixed chunks by index, and results are reduced in
index order, so the output does not depend on how many workers ran them.
"""

from __future__ import annotations

import dataclasses
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Any, Callable, Sequence

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp
from threadpoolctl import threadpool_limits

from .model import SystemSpec, TermSet
from .noise import NoiseSpec, TimeGrid, build_realization, derive_seed
from .spinops import DENSE_LIMIT

NORM_ABORT = 1e-6
STEP_RULE = 20.0  # dt <= 1 / (STEP_RULE * f_max)


class PropagationError(RuntimeError):
    pass


@dataclass(frozen=True)
class PropagationConfig:
    dt: float
    t_final: float
    store_every: int = 1
    method: str = "expm_piecewise"
    krylov_tol: float = 1e-10
    krylov_max: int = 60

    def __post_init__(self):
        if not self.dt > 0 or self.t_final < 0:
            raise ValueError("need dt > 0 and t_final >= 0")
        ratio = self.t_final / self.dt
        if abs(ratio - round(ratio)) > 1e-9 * max(1.0, ratio):
            raise ValueError(f"t_final/dt = {ratio} is not an integer")
        if self.store_every < 1:
            raise ValueError("store_every must be >= 1")
        if self.method not in ("expm_piecewise", "rk4"):
            raise ValueError(f"unknown method {self.method!r}")

    @property
    def n_steps(self) -> int:
        return int(round(self.t_final / self.dt))

    @property
    def grid(self) -> TimeGrid:
        return TimeGrid(self.dt, self.n_steps + 1)

    @property
    def store_steps(self) -> np.ndarray:
        steps = np.arange(0, self.n_steps + 1, self.store_every)
        if steps[-1] != self.n_steps:
            steps = np.append(steps, self.n_steps)
        return steps

    def check_step(self, system: SystemSpec):
        f_max = system.max_frequency()
        if f_max > 0 and self.dt > 1.0 / (STEP_RULE * f_max) * (1 + 1e-12):
            raise ValueError(
                f"dt={self.dt} us exceeds 1/({STEP_RULE:g} f_max) = {1 / (STEP_RULE * f_max):.4g} us "
                f"(f_max = {f_max:.4g} MHz)")


@dataclass(frozen=True)
class EnsembleConfig:
    n_traj: int
    master_seed: int = 0
    workers: int = 1
    block: int | None = None

    def __post_init__(self):
        if self.n_traj < 1:
            raise ValueError("n_traj must be >= 1")
        if self.workers < 1:
            raise ValueError("workers must be >= 1")


@dataclass
class RunRecord:
    params: dict
    times: np.ndarray
    means: dict[str, np.ndarray]
    stderr: dict[str, np.ndarray]
    seed: int
    conventions: dict = field(default_factory=dict)
    density: dict[str, np.ndarray] = field(default_factory=dict)
    scalars: dict[str, Any] = field(default_factory=dict)
    diagnostics: dict[str, Any] = field(default_factory=dict)
    samples: dict[str, np.ndarray] = field(default_factory=dict)

    def columns(self) -> list[tuple[str, np.ndarray]]:
        cols = [("t", self.times)]
        for name in self.means:
            cols += [(f"{name}_mean", self.means[name]), (f"{name}_stderr", self.stderr[name])]
        return cols


# ---------------------------------------------------------------- engines


def _check_norm(psi: np.ndarray, step: int, seeds: Sequence[int], worst: list[float]):
    drift = np.abs(np.linalg.norm(psi, axis=-1) - 1.0)
    worst[0] = max(worst[0], float(drift.max()))
    if drift.max() > NORM_ABORT:
        bad = int(np.argmax(drift))
        raise PropagationError(
            f"norm drift {drift[bad]:.3g} at step {step} (trajectory seed {seeds[bad]}); reduce dt")


class _DenseEngine:
    def __init__(self, terms: TermSet, method: str):
        self.static = terms.static.toarray()
        self.ops = np.array([op.toarray() for op in terms.ops]).reshape(len(terms.ops), terms.dim, terms.dim)
        self.method = method

    def hamiltonians(self, coeffs: np.ndarray) -> np.ndarray:
        """coeffs: (B, K) -> (B, d, d)."""
        return self.static[None] + np.einsum("bk,kij->bij", coeffs, self.ops)

    def step(self, psi: np.ndarray, coeffs: np.ndarray, dt: float) -> np.ndarray:
        H = self.hamiltonians(coeffs)
        if self.method == "rk4":
            return _rk4(lambda v: np.einsum("bij,bj->bi", H, v), psi, dt)
        U = sla.expm(-1j * dt * H)
        return np.einsum("bij,bj->bi", U, psi)


def _rk4(apply_h: Callable, psi: np.ndarray, dt: float) -> np.ndarray:
    f = lambda v: -1j * apply_h(v)
    k1 = f(psi)
    k2 = f(psi + dt / 2 * k1)
    k3 = f(psi + dt / 2 * k2)
    k4 = f(psi + dt * k3)
    return psi + dt / 6 * (k1 + 2 * k2 + 2 * k3 + k4)


class _SparseEngine:
    """Block Lanczos exponential for large sparse Hamiltonians.

    Diagonal terms are folded into one dense diagonal per trajectory; the
    shared-drive pair (cos, sin) is rewritten with raising/lowering parts to
    halve the nonzeros touched per product.
    """

    def __init__(self, terms: TermSet, method: str, tol: float, m_max: int):
        self.method = method
        self.tol = tol
        self.m_max = m_max
        static = terms.static.tosparse()
        self.static_diag = static.diagonal()
        self.static_off = _offdiag(static)
        self.diag_idx, self.diag_ops = [], []
        self.off_idx, self.off_ops = [], []
        kinds = [s[0] for s in terms.sources]
        self.drive_pair = None
        if "amp_cos" in kinds and "amp_sin" in kinds:
            ic, is_ = kinds.index("amp_cos"), kinds.index("amp_sin")
            X, Y = terms.ops[ic].tosparse(), terms.ops[is_].tosparse()
            raise_op = sp.csr_array((X + 1j * Y) / 2)
            self.drive_pair = (ic, is_, raise_op, sp.csr_array(raise_op.conj().T))
        for k, op in enumerate(terms.ops):
            if self.drive_pair and k in self.drive_pair[:2]:
                continue
            m = op.tosparse()
            off = _offdiag(m)
            if off.nnz == 0:
                self.diag_idx.append(k)
                self.diag_ops.append(m.diagonal())
            else:
                self.off_idx.append(k)
                self.off_ops.append(m)
        self.diag_ops = np.array(self.diag_ops).reshape(len(self.diag_idx), terms.dim)
        self.krylov_dims: list[int] = []

    def matvec_factory(self, coeffs: np.ndarray):
        """coeffs (B, K) -> function applying each column's H to V (d, B)."""
        diag = self.static_diag[:, None] + self.diag_ops.T @ coeffs[:, self.diag_idx].T
        off_c = coeffs[:, self.off_idx]
        pair = None
        if self.drive_pair:
            ic, is_, rop, lop = self.drive_pair
            cx, cy = coeffs[:, ic], coeffs[:, is_]
            pair = (rop, lop, cx - 1j * cy, cx + 1j * cy)

        def apply(V: np.ndarray) -> np.ndarray:
            out = diag * V
            if self.static_off.nnz:
                out += self.static_off @ V
            for j, op in enumerate(self.off_ops):
                tmp = op @ V
                tmp *= off_c[:, j]
                out += tmp
            if pair is not None:
                rop, lop, cr, cl = pair
                tmp = rop @ V
                tmp *= cr
                out += tmp
                tmp = lop @ V
                tmp *= cl
                out += tmp
            return out

        return apply

    def step(self, psi: np.ndarray, coeffs: np.ndarray, dt: float) -> np.ndarray:
        apply = self.matvec_factory(coeffs)
        cols = np.ascontiguousarray(psi.T)
        if self.method == "rk4":
            return _rk4(lambda v: apply(v.T).T, psi, dt)
        return _lanczos_expm(apply, cols, dt, self.tol, self.m_max, self.krylov_dims).T


def _offdiag(m: sp.csr_array) -> sp.csr_array:
    m = sp.csr_array(m, copy=True)
    m.setdiag(0)
    m.eliminate_zeros()
    return m


def _real_dot(q: np.ndarray, w: np.ndarray) -> np.ndarray:
    """Re <q_b|w_b> per column without forming conj(q)."""
    return np.einsum("dbk,dbk->b", q.view(float).reshape(*q.shape, 2), w.view(float).reshape(*w.shape, 2))


def _lanczos_expm(apply, V0: np.ndarray, dt: float, tol: float, m_max: int, log: list) -> np.ndarray:
    """exp(-i H dt) applied column-wise; stops when every column's error estimate < tol."""
    beta0 = np.linalg.norm(V0, axis=0)
    basis = [V0 / beta0]
    alphas, betas = [], []
    done_at = None
    tmp = np.empty_like(V0)
    for j in range(m_max):
        w = apply(basis[j])
        a = _real_dot(basis[j], w)
        np.multiply(basis[j], a, out=tmp)
        w -= tmp
        if j > 0:
            np.multiply(basis[j - 1], betas[-1], out=tmp)
            w -= tmp
        b = np.sqrt(_real_dot(w, w))
        alphas.append(a)
        betas.append(b)
        m = j + 1
        y, last = _tridiag_expm(np.array(alphas), np.array(betas[:-1]), dt)
        err = b * np.abs(last)
        if np.all((err < tol) | (b < 1e-14)):
            done_at = m
            break
        w /= np.where(b > 0, b, 1.0)
        basis.append(w)
    if done_at is None:
        raise PropagationError(f"Lanczos did not converge in {m_max} iterations; reduce dt")
    log.append(done_at)
    out = basis[0] * y[:, 0]
    for k in range(1, done_at):
        np.multiply(basis[k], y[:, k], out=tmp)
        out += tmp
    out *= beta0
    return out


def _tridiag_expm(alpha: np.ndarray, beta: np.ndarray, dt: float):
    """exp(-i T dt) e_1 for a batch of tridiagonals; alpha (m, B), beta (m-1, B)."""
    m, B = alpha.shape
    T = np.zeros((B, m, m))
    idx = np.arange(m)
    T[:, idx, idx] = alpha.T
    if m > 1:
        T[:, idx[:-1], idx[1:]] = beta.T
        T[:, idx[1:], idx[:-1]] = beta.T
    w, Q = np.linalg.eigh(T)
    y = np.einsum("bij,bj->bi", Q, np.exp(-1j * w * dt) * Q[:, 0, :])
    return y, y[:, -1]


def make_engine(terms: TermSet, config: PropagationConfig):
    if terms.dim < DENSE_LIMIT:
        return _DenseEngine(terms, config.method)
    return _SparseEngine(terms, config.method, config.krylov_tol, config.krylov_max)


# ---------------------------------------------------------------- trajectories


def evolve_block(system: SystemSpec, realizations: Sequence, psi0: np.ndarray,
                 config: PropagationConfig, on_store: Callable | None = None,
                 engine=None, seeds: Sequence[int] | None = None) -> dict:
    """Evolve len(realizations) trajectories together.

    ``on_store(step, t, psi_batch)`` is called at every stored step.
    Returns diagnostics (max norm drift, Krylov sizes).
    """
    psi0 = np.asarray(psi0, dtype=complex)
    if abs(np.linalg.norm(psi0) - 1.0) > 1e-10:
        raise ValueError("initial state is not normalized")
    if psi0.shape != (system.layout.dim,):
        raise ValueError(f"initial state must have length {system.layout.dim}")
    config.check_step(system)
    terms = system.terms
    engine = engine or make_engine(terms, config)
    grid = config.grid
    for r in realizations:
        if r is not None and (r.grid.n < grid.n or abs(r.grid.dt - grid.dt) > 1e-12 * grid.dt):
            raise ValueError("realization grid is incompatible with the propagation grid")
    B = len(realizations)
    tables = np.array([
        terms.coefficients(r, grid, midpoint=True)[:, :grid.n] if r is not None
        else terms.coefficients(None, grid, midpoint=True)
        for r in realizations
    ]).reshape(B, len(terms.ops), grid.n)
    seeds = list(seeds) if seeds is not None else [getattr(r, "seed", None) for r in realizations]
    psi = np.tile(psi0, (B, 1))
    store = set(config.store_steps.tolist())
    worst = [0.0]
    if on_store and 0 in store:
        on_store(0, 0.0, psi)
    static_only = len(terms.ops) == 0 and isinstance(engine, _DenseEngine) and config.method == "expm_piecewise"
    U = sla.expm(-1j * config.dt * engine.static) if static_only else None
    for i in range(config.n_steps):
        if U is not None:
            psi = psi @ U.T
        else:
            psi = engine.step(psi, tables[:, :, i], config.dt)
        _check_norm(psi, i + 1, seeds, worst)
        if on_store and (i + 1) in store:
            on_store(i + 1, (i + 1) * config.dt, psi)
    diag = {"max_norm_drift": worst[0]}
    if isinstance(engine, _SparseEngine) and engine.krylov_dims:
        diag["krylov_dim_max"] = max(engine.krylov_dims)
        diag["krylov_dim_mean"] = float(np.mean(engine.krylov_dims))
    return diag


def evolve_trajectory(system: SystemSpec, realization, psi0: np.ndarray,
                      config: PropagationConfig) -> tuple[np.ndarray, np.ndarray]:
    """States at every stored step: returns (times, states[n_store, dim])."""
    out = []
    evolve_block(system, [realization], psi0, config,
                 on_store=lambda step, t, psi: out.append(psi[0].copy()))
    steps = config.store_steps
    return steps * config.dt, np.array(out)


# ---------------------------------------------------------------- ensembles


def _run_chunk(args):
    system, psi0, observables, probes, config, seeds = args
    grid = config.grid
    with threadpool_limits(1):
        realizations = [build_realization(system, grid, s) for s in seeds]
        values = {o.name: [] for o in observables}
        amps = {p.name: [] for p in probes}

        def on_store(step, t, psi):
            for o in observables:
                values[o.name].append(np.asarray(o(psi, t), dtype=float))
            for p in probes:
                amps[p.name].append(np.asarray(p(psi, t), dtype=complex))

        diag = evolve_block(system, realizations, psi0, config, on_store, seeds=seeds)
    return ({k: np.array(v) for k, v in values.items()},
            {k: np.array(v) for k, v in amps.items()}, diag)


def default_block(system: SystemSpec) -> int:
    return 64 if system.layout.dim < DENSE_LIMIT else 4


def run_ensemble(system: SystemSpec, noise_params: NoiseSpec | None, psi0: np.ndarray,
                 observables: Sequence, prop: PropagationConfig, ens: EnsembleConfig,
                 probes: Sequence = (), params: dict | None = None,
                 conventions: dict | None = None) -> RunRecord:
    """Average observables over ``ens.n_traj`` noise realizations.

    Trajectory k uses seed derive_seed(master_seed, k).  ``probes`` return
    amplitude vectors whose trajectory-averaged projectors are stored in
    ``RunRecord.density``.
    """
    if noise_params is not None:
        system = dataclasses.replace(system, noise=noise_params)
    block = ens.block or default_block(system)
    seeds = [derive_seed(ens.master_seed, k) for k in range(ens.n_traj)]
    # without noise every trajectory is the same; evolve one and replicate it
    quiet = system.noise.is_quiet
    work = seeds[:1] if quiet else seeds
    chunks = [(system, psi0, tuple(observables), tuple(probes), prop, work[i:i + block])
              for i in range(0, len(work), block)]
    start = time.perf_counter()
    if ens.workers > 1 and len(chunks) > 1:
        with ProcessPoolExecutor(max_workers=ens.workers) as pool:
            results = list(pool.map(_run_chunk, chunks))
    else:
        results = [_run_chunk(c) for c in chunks]
    wall = time.perf_counter() - start

    n = ens.n_traj
    means, errs, samples = {}, {}, {}
    for o in observables:
        data = np.concatenate([r[0][o.name] for r in results], axis=1)  # (n_store, n_traj)
        if quiet:
            data = np.repeat(data, n, axis=1)
        samples[o.name] = data
        means[o.name] = data.mean(axis=1)
        if n > 1 and not quiet:
            errs[o.name] = data.std(axis=1, ddof=1) / np.sqrt(n)
        else:
            errs[o.name] = np.zeros(data.shape[0])
    density = {}
    for p in probes:
        amp = np.concatenate([r[1][p.name] for r in results], axis=1)  # (n_store, n_traj, k)
        if quiet:
            amp = np.repeat(amp, n, axis=1)
        density[p.name] = np.einsum("tbi,tbj->tij", amp, amp.conj()) / n
    diag = {
        "max_norm_drift": max(r[2]["max_norm_drift"] for r in results),
        "wall_time_s": wall,
    }
    kdims = [r[2]["krylov_dim_max"] for r in results if "krylov_dim_max" in r[2]]
    if kdims:
        diag["krylov_dim_max"] = max(kdims)
    record = RunRecord(
        params=dict(params or {}),
        times=prop.store_steps * prop.dt,
        means=means,
        stderr=errs,
        seed=ens.master_seed,
        conventions={"ou_amplitude_is_stddev": True, **(conventions or {})},
        density=density,
        diagnostics=diag,
        samples=samples,
    )
    record.params.setdefault("n_traj", n)
    record.params.setdefault("dt", prop.dt)
    record.params.setdefault("t_final", prop.t_final)
    return record
