"""Figures of merit and per-step trace observables."""

from __future__ import annotations

from dataclasses import dataclass
from itertools import combinations
from typing import Callable, Mapping

import numpy as np

from .model import HybridEncoding
from .spinops import OperatorMatrix

THRESHOLD = 0.5 * (1.0 + np.exp(-1.0))


def fidelity(ref: np.ndarray, state: np.ndarray) -> float:
    """|<ref|psi>|^2 for a state vector, <ref|rho|ref> for a density matrix."""
    ref = np.asarray(ref, dtype=complex)
    state = np.asarray(state, dtype=complex)
    if state.ndim == 1:
        if state.shape != ref.shape:
            raise ValueError(f"dimension mismatch: {ref.shape} vs {state.shape}")
        return float(abs(np.vdot(ref, state)) ** 2)
    if state.shape != (ref.size, ref.size):
        raise ValueError(f"dimension mismatch: {ref.shape} vs {state.shape}")
    return float(np.vdot(ref, state @ ref).real)


@dataclass(frozen=True)
class CoherenceCurve:
    times: np.ndarray
    f_mean: np.ndarray
    f_stderr: np.ndarray | None = None


@dataclass(frozen=True)
class CoherenceTime:
    """Crossing time; ``lower_bound`` means no crossing before ``value``."""

    value: float
    lower_bound: bool = False

    def __str__(self):
        return f"> {self.value:g}" if self.lower_bound else f"{self.value:g}"


def coherence_time(curve: CoherenceCurve, threshold: float = THRESHOLD) -> CoherenceTime:
    """First downward crossing of the threshold, linearly interpolated."""
    t = np.asarray(curve.times, dtype=float)
    f = np.asarray(curve.f_mean, dtype=float)
    below = np.nonzero(f < threshold)[0]
    below = below[below > 0]
    for i in below:
        if f[i - 1] >= threshold:
            frac = (f[i - 1] - threshold) / (f[i - 1] - f[i])
            return CoherenceTime(float(t[i - 1] + frac * (t[i] - t[i - 1])))
    return CoherenceTime(float(t[-1]), lower_bound=True)


def structure_factor(correlators: Mapping[tuple[int, int], float], q: float, n_sites: int | None = None) -> complex:
    """S(q) = sum_{k<l} exp(-i q (l-k)) <X_k X_l>."""
    if n_sites is None:
        n_sites = 1 + max(max(p) for p in correlators) if correlators else 0
    total = 0j
    for k, l in combinations(range(n_sites), 2):
        if (k, l) not in correlators:
            raise KeyError(f"missing correlator for pair {(k, l)}")
        total += np.exp(-1j * q * (l - k)) * correlators[(k, l)]
    return total


def xx_correlators(logical_state: np.ndarray, n_sites: int) -> dict[tuple[int, int], float]:
    """<X_k X_l> for every k < l on a register of n_sites (bit 0 = up)."""
    psi = np.asarray(logical_state, dtype=complex).reshape((2,) * n_sites)
    out = {}
    for k, l in combinations(range(n_sites), 2):
        flipped = np.flip(np.flip(psi, axis=k), axis=l)
        out[(k, l)] = float(np.vdot(psi, flipped).real)
    return out


_YY = np.kron([[0, -1j], [1j, 0]], [[0, -1j], [1j, 0]])


def concurrence(rho: np.ndarray, tol: float = 1e-8) -> float:
    """Wootters concurrence of a two-qubit density matrix."""
    rho = np.asarray(rho, dtype=complex)
    if rho.shape != (4, 4):
        raise ValueError("concurrence needs a 4x4 density matrix")
    if np.max(np.abs(rho - rho.conj().T)) > tol:
        raise ValueError("density matrix is not hermitian")
    if np.linalg.eigvalsh(rho).min() < -tol:
        raise ValueError("density matrix is not positive semidefinite")
    r = rho @ _YY @ rho.conj() @ _YY
    lam = np.sort(np.sqrt(np.clip(np.linalg.eigvals(r).real, 0, None)))[::-1]
    return float(max(0.0, lam[0] - lam[1] - lam[2] - lam[3]))


# ------------------------------------------------------- trace observables
# Each takes a (batch, dim) array of states and the time, returns (batch,).


@dataclass(frozen=True, eq=False)
class Expectation:
    name: str
    op: OperatorMatrix

    def __call__(self, psi: np.ndarray, t: float) -> np.ndarray:
        return np.einsum("bi,bi->b", psi.conj(), (self.op.data @ psi.T).T).real


@dataclass(frozen=True, eq=False)
class StateFidelity:
    """|<ref(t)|psi>|^2 with a fixed reference or ``reference(t)``."""

    name: str
    reference: np.ndarray | Callable

    def __call__(self, psi: np.ndarray, t: float) -> np.ndarray:
        ref = self.reference(t) if callable(self.reference) else self.reference
        return np.abs(psi @ np.conj(ref)) ** 2


@dataclass(frozen=True, eq=False)
class LogicalFidelity:
    """Fidelity with a logical reference after projecting through V^dag."""

    name: str
    encoding: HybridEncoding
    reference: np.ndarray | Callable

    def __call__(self, psi: np.ndarray, t: float) -> np.ndarray:
        ref = self.reference(t) if callable(self.reference) else self.reference
        return np.abs(self.encoding.logical_amplitudes(psi) @ np.conj(ref)) ** 2


@dataclass(frozen=True, eq=False)
class LogicalExpectation:
    """<V^dag psi| O |V^dag psi> for a dense logical operator O."""

    name: str
    encoding: HybridEncoding
    op: np.ndarray

    def __call__(self, psi: np.ndarray, t: float) -> np.ndarray:
        amp = self.encoding.logical_amplitudes(psi)
        return np.einsum("bi,bi->b", amp.conj(), amp @ self.op.T).real


@dataclass(frozen=True, eq=False)
class Leakage:
    name: str
    encoding: HybridEncoding

    def __call__(self, psi: np.ndarray, t: float) -> np.ndarray:
        amp = self.encoding.logical_amplitudes(psi)
        return 1.0 - np.einsum("bi,bi->b", amp.conj(), amp).real


@dataclass(frozen=True, eq=False)
class StructureFactorQ0:
    """S_xx(q=0) from logical amplitudes, via (sum X)^2 / 2 - N / 2."""

    name: str
    n_sites: int
    encoding: HybridEncoding | None = None

    def __call__(self, psi: np.ndarray, t: float) -> np.ndarray:
        amp = self.encoding.logical_amplitudes(psi) if self.encoding else psi
        n = self.n_sites
        out = np.zeros(amp.shape[0])
        for b in range(amp.shape[0]):
            corr = xx_correlators(amp[b], n)
            out[b] = sum(corr.values())
        return out


@dataclass(frozen=True, eq=False)
class LogicalProbe:
    """Amplitudes V^dag psi, for trajectory-averaged logical density matrices."""

    name: str
    encoding: HybridEncoding

    def __call__(self, psi: np.ndarray, t: float) -> np.ndarray:
        return self.encoding.logical_amplitudes(psi)


@dataclass(frozen=True, eq=False)
class ProjectionProbe:
    """Amplitudes <b_k|psi> onto the columns of ``basis``."""

    name: str
    basis: np.ndarray

    def __call__(self, psi: np.ndarray, t: float) -> np.ndarray:
        return psi @ np.conj(self.basis)
