"""Frame Hamiltonians, dressed states and the hybrid (pair) encoding.

A Hamiltonian is assembled once per system as a ``TermSet``: a static part plus
operators whose coefficients follow the noise traces or a control schedule.
``hamiltonian_at`` evaluates that sum at one grid time; the propagator uses the
same term set for whole trajectories.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property
from typing import Callable, Sequence

import numpy as np
import scipy.sparse as sp

from .noise import NoiseRealization, NoiseSpec, TimeGrid
from .spinops import OperatorMatrix, TensorLayout, pauli_string

FRAMES = ("lab", "first_interaction", "second_interaction")
CONVENTIONS = {"half": 0.25, "full": 1.0}
FLUCTUATION_SOURCES = ("none", "shared_amp_phase")


@dataclass(frozen=True)
class DriveSpec:
    """Resonant or detuned drive on a set of sites (first layer)."""

    rabi: float
    detuning: float = 0.0
    target_sites: tuple[int, ...] = ()
    fluctuation_source: str = "shared_amp_phase"

    def __post_init__(self):
        if self.rabi < 0:
            raise ValueError("rabi must be >= 0")
        if self.fluctuation_source not in FLUCTUATION_SOURCES:
            raise ValueError(f"unknown fluctuation source {self.fluctuation_source!r}")
        object.__setattr__(self, "target_sites", tuple(int(s) for s in self.target_sites))

    @property
    def theta(self) -> float:
        """Mixing angle with tan(theta) = rabi / detuning."""
        return float(np.arctan2(self.rabi, self.detuning))


@dataclass(frozen=True)
class SecondDriveSpec:
    """Protection drives, one Rabi frequency per pair (both sites of the pair)."""

    rabi_prime: tuple[float, ...]
    fluctuation_source: str = "shared_amp_phase"

    def __post_init__(self):
        if any(r < 0 for r in self.rabi_prime):
            raise ValueError("rabi_prime entries must be >= 0")
        if self.fluctuation_source not in FLUCTUATION_SOURCES:
            raise ValueError(f"unknown fluctuation source {self.fluctuation_source!r}")
        object.__setattr__(self, "rabi_prime", tuple(float(r) for r in self.rabi_prime))


@dataclass(frozen=True)
class LinearRamp:
    """value(t) = start + (stop - start) * t / duration."""

    start: float
    stop: float
    duration: float

    def __call__(self, t):
        return self.start + (self.stop - self.start) * np.asarray(t, dtype=float) / self.duration


@dataclass(frozen=True)
class PauliTerm:
    """coeff * schedule(t) * (Pauli string); schedule None means constant 1."""

    paulis: tuple[tuple[int, str], ...]
    coeff: float
    schedule: Callable | None = None


@dataclass(frozen=True, eq=False)
class SystemSpec:
    layout: TensorLayout
    coupling: np.ndarray | None = None
    first_drive: tuple[DriveSpec, ...] = ()
    second_drive: SecondDriveSpec | None = None
    frame: str = "first_interaction"
    spin_operator_convention: str = "half"
    angles: tuple[float, ...] | None = None
    trotter_average: bool = False
    extra_terms: tuple[PauliTerm, ...] = ()
    noise: NoiseSpec = field(default_factory=NoiseSpec)

    def __post_init__(self):
        n = self.layout.n_spins
        if self.frame not in FRAMES:
            raise ValueError(f"frame must be one of {FRAMES}")
        if self.spin_operator_convention not in CONVENTIONS:
            raise ValueError("spin_operator_convention must be 'half' or 'full'")
        a = np.zeros((n, n)) if self.coupling is None else np.array(self.coupling, dtype=float)
        if a.shape != (n, n):
            raise ValueError(f"coupling must be {n}x{n}")
        if np.max(np.abs(a - a.T)) > 1e-12 or np.any(np.diag(a) != 0):
            raise ValueError("coupling must be symmetric with zero diagonal")
        a.setflags(write=False)
        object.__setattr__(self, "coupling", a)
        for drive in self.first_drive:
            if any(not 0 <= s < n for s in drive.target_sites):
                raise ValueError("drive targets a site outside the layout")
        if self.second_drive is not None and len(self.second_drive.rabi_prime) != len(self.layout.pairing):
            raise ValueError("second drive needs one rabi_prime per pair")
        if self.frame == "second_interaction" and not self.layout.pairing:
            raise ValueError("second_interaction frame requires a pairing")
        if self.angles is not None and len(self.angles) != len(self.layout.pairing):
            raise ValueError("angles must be given per pair")
        if self.noise.dephasing and len(self.noise.dephasing) != n:
            raise ValueError("noise needs one dephasing entry per site")

    @property
    def coupling_scale(self) -> float:
        """Factor turning a_ij into the sigma_z sigma_z coefficient."""
        return CONVENTIONS[self.spin_operator_convention]

    @property
    def site_angles(self) -> np.ndarray:
        """Dressing angle of every site (pi/2 where unspecified)."""
        theta = np.full(self.layout.n_spins, np.pi / 2)
        if self.angles is not None:
            for (sa, sb), th in zip(self.layout.pairing, self.angles):
                theta[sa] = theta[sb] = th
        return theta

    @cached_property
    def terms(self) -> "TermSet":
        return build_terms(self)

    def max_frequency(self) -> float:
        """Largest nominal term coefficient over 2 pi, in MHz."""
        return self.terms.max_coefficient / (2 * np.pi)


def dressed_couplings(a: np.ndarray, theta: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """J^x = a sin(th_i) sin(th_j) / 2 and J^z = a cos(th_i) cos(th_j)."""
    s, c = np.sin(theta), np.cos(theta)
    return a * np.outer(s, s) / 2, a * np.outer(c, c)


def alternation_factor(i: int, j: int) -> int:
    """f_ij = [1 + (-1)^(i-j)] / 2."""
    return 1 if (i - j) % 2 == 0 else 0


@dataclass(frozen=True, eq=False)
class TermSet:
    """H(t) = static + sum_k c_k(t) ops[k].

    ``sources[k]`` names what drives c_k: ("amp_cos",), ("amp_sin",),
    ("dephasing", site) or ("schedule", callable).
    """

    static: OperatorMatrix
    ops: tuple[OperatorMatrix, ...]
    sources: tuple[tuple, ...]
    max_coefficient: float

    @property
    def dim(self) -> int:
        return self.static.dim

    def coefficients(self, realization: NoiseRealization | None, grid: TimeGrid | None = None,
                     midpoint: bool = False) -> np.ndarray:
        """(n_terms, n_steps) coefficient table on the realization grid.

        Noise traces are held constant over each step.  With ``midpoint``,
        schedules are sampled at t_i + dt/2, which keeps the piecewise
        propagator second order in dt.
        """
        if realization is None:
            if grid is None:
                raise ValueError("need a realization or a grid")
            realization = NoiseRealization.quiet(grid, 0)
        times = realization.grid.times
        amp = 1.0 + realization.drive_amp
        rows = []
        for src in self.sources:
            kind = src[0]
            if kind == "amp_cos":
                rows.append(amp * np.cos(realization.drive_phase))
            elif kind == "amp_sin":
                rows.append(amp * np.sin(realization.drive_phase))
            elif kind == "dephasing":
                site = src[1]
                rows.append(realization.dephasing[site] if site < realization.n_sites else np.zeros_like(times))
            elif kind == "schedule":
                at = times + 0.5 * realization.grid.dt if midpoint else times
                rows.append(np.broadcast_to(src[1](at), times.shape).astype(float))
            else:
                raise ValueError(f"unknown term source {kind!r}")
        return np.array(rows).reshape(len(self.sources), times.size)

    def assemble(self, coeffs: Sequence[float]) -> OperatorMatrix:
        data = self.static.data.copy()
        for c, op in zip(coeffs, self.ops):
            if c != 0:
                data = data + c * op.data
        return OperatorMatrix(data, hermitian=True)


def build_terms(system: SystemSpec) -> TermSet:
    if system.frame == "lab":
        raise NotImplementedError("lab-frame dynamics at the carrier frequency are not simulated")
    layout = system.layout
    n = layout.n_spins
    dim = layout.dim
    zero = sp.csr_array((dim, dim), dtype=complex)
    static = zero.copy()
    noisy_x, noisy_y = zero.copy(), zero.copy()
    has_noisy_drive = False
    max_coeff = 0.0

    def P(spec):
        return pauli_string(spec, layout).data

    if system.frame == "first_interaction":
        for drive in system.first_drive:
            for s in drive.target_sites:
                max_coeff = max(max_coeff, drive.rabi / 2, abs(drive.detuning) / 2)
                static = static + drive.detuning / 2 * P([(s, "z")])
                if drive.fluctuation_source == "shared_amp_phase":
                    noisy_x = noisy_x + drive.rabi / 2 * P([(s, "x")])
                    noisy_y = noisy_y + drive.rabi / 2 * P([(s, "y")])
                    has_noisy_drive = True
                else:
                    static = static + drive.rabi / 2 * P([(s, "x")])
        scale = system.coupling_scale
        for i in range(n):
            for j in range(i + 1, n):
                aij = system.coupling[i, j] * scale
                if aij:
                    static = static + aij * P([(i, "z"), (j, "z")])
                    max_coeff = max(max_coeff, abs(aij))
    else:
        if system.first_drive:
            raise ValueError("first-layer drives are eliminated in the second_interaction frame")
        jx, jz = dressed_couplings(system.coupling * system.coupling_scale, system.site_angles)
        for i in range(n):
            for j in range(i + 1, n):
                if jx[i, j]:
                    static = static + jx[i, j] * P([(i, "x"), (j, "x")])
                    if system.trotter_average and alternation_factor(i, j):
                        static = static + jx[i, j] * P([(i, "y"), (j, "y")])
                if jz[i, j]:
                    static = static + jz[i, j] * P([(i, "z"), (j, "z")])
                max_coeff = max(max_coeff, abs(jx[i, j]), abs(jz[i, j]))

    if system.second_drive is not None:
        for (sa, sb), rabi in zip(layout.pairing, system.second_drive.rabi_prime):
            max_coeff = max(max_coeff, rabi / 2)
            for s in (sa, sb):
                if system.second_drive.fluctuation_source == "shared_amp_phase":
                    noisy_x = noisy_x + rabi / 2 * P([(s, "x")])
                    noisy_y = noisy_y + rabi / 2 * P([(s, "y")])
                    has_noisy_drive = True
                else:
                    static = static + rabi / 2 * P([(s, "x")])

    ops, sources = [], []
    if has_noisy_drive:
        ops += [noisy_x, noisy_y]
        sources += [("amp_cos",), ("amp_sin",)]
    for k, params in enumerate(system.noise.dephasing):
        if params is not None and params.amplitude > 0:
            ops.append(0.5 * P([(k, "z")]))
            sources.append(("dephasing", k))
    scheduled: dict = {}
    for term in system.extra_terms:
        op = term.coeff * P(term.paulis)
        if term.schedule is None:
            static = static + op
            max_coeff = max(max_coeff, abs(term.coeff))
            continue
        # terms sharing a schedule collapse into one operator
        key = (term.schedule, _is_diagonal(op))
        scheduled[key] = scheduled.get(key, zero) + op
        ends = (0.0, getattr(term.schedule, "duration", 0.0))
        peak = max(abs(float(term.schedule(t))) for t in ends)
        max_coeff = max(max_coeff, abs(term.coeff) * peak)
    for (schedule, _), op in scheduled.items():
        ops.append(op)
        sources.append(("schedule", schedule))
    return TermSet(
        OperatorMatrix(static, hermitian=True),
        tuple(OperatorMatrix(op, hermitian=True) for op in ops),
        tuple(sources),
        max_coeff,
    )


def _is_diagonal(m) -> bool:
    coo = sp.coo_array(m)
    return bool(np.all(coo.row == coo.col))


def hamiltonian_at(system: SystemSpec, realization: NoiseRealization | None, t: float) -> OperatorMatrix:
    """H(t) in the system's frame; ``t`` must sit on the realization grid."""
    terms = system.terms
    if realization is None:
        quiet = {"amp_cos": 1.0, "amp_sin": 0.0, "dephasing": 0.0}
        coeffs = [float(src[1](t)) if src[0] == "schedule" else quiet[src[0]] for src in terms.sources]
    else:
        coeffs = terms.coefficients(realization)[:, realization.grid.index(t)]
    return terms.assemble(coeffs)


def dressed_basis(theta: float) -> tuple[np.ndarray, np.ndarray]:
    """|up_theta> = cos(th/2)|up> + sin(th/2)|down>, |down_theta> = sin(th/2)|up> - cos(th/2)|down>.

    The sign of |down_theta> makes theta = pi/2 give (|up> - |down>)/sqrt2;
    at theta = 0 it equals -|down>.
    """
    c, s = np.cos(theta / 2), np.sin(theta / 2)
    return np.array([c, s], dtype=complex), np.array([s, -c], dtype=complex)


UP_X, DOWN_X = dressed_basis(np.pi / 2)

# pair states in the z basis, columns = (|up~>, |down~>), rows = 2*s_a + s_b
_PAIR = np.array([
    [1, 0],
    [0, -1],
    [0, 1],
    [-1, 0],
], dtype=complex) / np.sqrt(2)


@dataclass(frozen=True, eq=False)
class HybridEncoding:
    """Isometry from 2^P logical states into the 4^P pair space.

    |up~> = (|up_x down_x> + |down_x up_x>)/sqrt2,
    |down~> = (|up_x down_x> - |down_x up_x>)/sqrt2, per pair.
    """

    layout: TensorLayout

    def __post_init__(self):
        paired = sorted(s for p in self.layout.pairing for s in p)
        if not self.layout.pairing or paired != list(range(self.layout.n_spins)):
            raise ValueError("hybrid encoding needs every spin site in exactly one pair")
        if self.layout.boson_dim:
            raise ValueError("hybrid encoding is defined on spin-only layouts")

    @property
    def n_pairs(self) -> int:
        return len(self.layout.pairing)

    @cached_property
    def V(self) -> sp.csr_array:
        n = self.layout.n_spins
        pair_major = sp.csr_array(_PAIR)
        for _ in range(self.n_pairs - 1):
            pair_major = sp.kron(pair_major, sp.csr_array(_PAIR), format="csr")
        order = [s for p in self.layout.pairing for s in p]
        idx = np.arange(2**n)
        bits = (idx[:, None] >> (n - 1 - np.arange(n))) & 1
        site_index = (bits << (n - 1 - np.asarray(order))).sum(axis=1)
        coo = pair_major.tocoo()
        return sp.csr_array((coo.data, (site_index[coo.row], coo.col)), shape=coo.shape)

    def encode(self, logical: np.ndarray) -> np.ndarray:
        return self.V @ np.asarray(logical, dtype=complex)

    def logical_amplitudes(self, psi: np.ndarray) -> np.ndarray:
        """V^dag psi; accepts a single state or a (batch, dim) array."""
        psi = np.asarray(psi)
        if psi.ndim == 1:
            return self.V.conj().T @ psi
        return (self.V.conj().T @ psi.T).T

    def project(self, op: OperatorMatrix) -> np.ndarray:
        """V^dag op V as a dense logical matrix."""
        return np.asarray((self.V.conj().T @ (op.tosparse() @ self.V)).toarray())


def hybrid_encode(encoding: HybridEncoding, logical_state) -> np.ndarray:
    logical_state = np.asarray(logical_state, dtype=complex)
    if logical_state.shape != (2**encoding.n_pairs,):
        raise ValueError(f"logical state must have length {2**encoding.n_pairs}")
    if abs(np.linalg.norm(logical_state) - 1.0) > 1e-10:
        raise ValueError("logical state is not normalized")
    return encoding.encode(logical_state)


def leakage(encoding: HybridEncoding, physical_state) -> float:
    amp = encoding.logical_amplitudes(np.asarray(physical_state, dtype=complex))
    return float(max(0.0, 1.0 - np.vdot(amp, amp).real))


def logical_pauli(label: str, site: int, n: int) -> np.ndarray:
    """Dense Pauli on a logical register of n spins (bit 0 = up)."""
    mats = {"x": np.array([[0, 1], [1, 0]]), "z": np.diag([1, -1]), "y": np.array([[0, -1j], [1j, 0]])}
    out = np.eye(1)
    for k in range(n):
        out = np.kron(out, mats[label] if k == site else np.eye(2))
    return out.astype(complex)
