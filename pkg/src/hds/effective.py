"""Engineered couplings between hybrid spins and the resulting logical model.

Sites sit on a line with unit spacing; pair m occupies sites (2m, 2m+1) and
a_ij = a |i - j|^(-alpha).  In the doubly dressed frame a site pair couples as
J^x (sx sx) + J^z (sz sz); projecting onto the hybrid subspace leaves
h_k Z_k - g_kl X_k X_l.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .model import SystemSpec, dressed_couplings
from .spinops import OperatorMatrix

MAX_LOGICAL_PAIRS = 12


@dataclass(frozen=True, eq=False)
class CouplingTable:
    """Site-level J^x and J^z (rad/us) for given dressing angles per pair."""

    jx: np.ndarray
    jz: np.ndarray
    theta: np.ndarray
    pairing: tuple[tuple[int, int], ...]


@dataclass(frozen=True, eq=False)
class HybridModelParams:
    """Logical fields h_k and couplings g_kl (rad/us), g reported with sign.

    ``g`` follows the formulas as printed.  ``g_doubled`` is the alternative
    reading in which J^x carries no factor 1/2; it is what a quoted
    g ~ 0.78 a for neighbouring pairs corresponds to.
    """

    h: np.ndarray
    g: np.ndarray
    protection_offset: float = 0.0

    @property
    def n_pairs(self) -> int:
        return self.h.size

    @property
    def g_doubled(self) -> np.ndarray:
        return 2.0 * self.g


@dataclass(frozen=True)
class AlternationSchedule:
    """K distinct protection amplitudes assigned cyclically to pairs."""

    amplitudes: tuple[float, ...]

    def __post_init__(self):
        amps = tuple(float(x) for x in self.amplitudes)
        if not amps:
            raise ValueError("need at least one amplitude")
        if len(set(amps)) != len(amps):
            raise ValueError("alternation amplitudes must be pairwise distinct")
        object.__setattr__(self, "amplitudes", amps)

    @property
    def K(self) -> int:
        return len(self.amplitudes)

    @property
    def min_gap(self) -> float:
        amps = np.array(self.amplitudes)
        if amps.size < 2:
            return np.inf
        return float(np.min(np.abs(amps[:, None] - amps[None, :])[~np.eye(amps.size, dtype=bool)]))

    def amplitude(self, pair: int) -> float:
        return self.amplitudes[pair % self.K]

    def for_pairs(self, n_pairs: int) -> tuple[float, ...]:
        return tuple(self.amplitude(m) for m in range(n_pairs))


@dataclass(frozen=True, eq=False)
class TrotterSchedule:
    """Sign of the b-site drive in each of two equal segments of ``period``.

    ``signs[s, i]`` is the sign on site i during segment s.  Averaging the
    sigma_y sigma_y coefficient sign_i * sign_j over the segments gives
    f_ij = [1 + (-1)^(i-j)] / 2 for a-sites on even and b-sites on odd indices.
    """

    period: float
    boundaries: np.ndarray
    signs: np.ndarray

    def yy_factor(self, i: int, j: int) -> float:
        return float(np.mean(self.signs[:, i] * self.signs[:, j]))

    def sign_at(self, t: float, site: int) -> int:
        seg = int((t % self.period) >= self.boundaries[1])
        return int(self.signs[seg, site])


def chain_coupling(n_sites: int, a: float = 1.0, alpha: float = 3.0) -> np.ndarray:
    """a |i-j|^-alpha on a unit-spaced line, zero diagonal."""
    idx = np.arange(n_sites)
    dist = np.abs(idx[:, None] - idx[None, :]).astype(float)
    with np.errstate(divide="ignore"):
        out = np.where(dist > 0, a * dist ** (-float(alpha)), 0.0)
    return out


def chain_pairing(n_pairs: int) -> tuple[tuple[int, int], ...]:
    return tuple((2 * m, 2 * m + 1) for m in range(n_pairs))


def coupling_table(system: SystemSpec, angles=None) -> CouplingTable:
    """J^x = a sin th_k sin th_l / 2, J^z = a cos th_k cos th_l per site pair.

    ``a`` is the sigma-operator coefficient, i.e. the system coupling times
    its spin-operator convention factor.
    """
    pairing = system.layout.pairing
    if not pairing:
        raise ValueError("coupling table needs a pairing")
    if angles is None:
        angles = system.angles if system.angles is not None else (np.pi / 2,) * len(pairing)
    angles = np.asarray(angles, dtype=float)
    if angles.shape != (len(pairing),):
        raise ValueError("need one angle per pair")
    if np.any(angles < 0) or np.any(angles > np.pi):
        raise ValueError("angles must lie in [0, pi]")
    theta = np.full(system.layout.n_spins, np.pi / 2)
    for (sa, sb), th in zip(pairing, angles):
        theta[sa] = theta[sb] = th
    jx, jz = dressed_couplings(system.coupling * system.coupling_scale, theta)
    return CouplingTable(jx, jz, angles, pairing)


def hybrid_params(table: CouplingTable, pairing=None) -> HybridModelParams:
    """h_k = J^z(k_a, k_b); g_kl = J^x(ka,lb) + J^x(la,kb) - J^x(ka,la) - J^x(kb,lb)."""
    pairing = tuple(pairing) if pairing is not None else table.pairing
    if tuple(tuple(p) for p in pairing) != tuple(tuple(p) for p in table.pairing):
        raise ValueError("pairing differs from the one the table was built with")
    jx, jz = table.jx, table.jz
    P = len(pairing)
    h = np.array([jz[ka, kb] for ka, kb in pairing])
    g = np.zeros((P, P))
    for k, (ka, kb) in enumerate(pairing):
        for l, (la, lb) in enumerate(pairing):
            if k != l:
                g[k, l] = (jx[ka, lb] + jx[la, kb]) - (jx[ka, la] + jx[kb, lb])
    return HybridModelParams(h, g)


def effective_hamiltonian(params: HybridModelParams, include_HP: bool = False) -> OperatorMatrix:
    """sum_k h_k Z_k - sum_{k<l} g_kl X_k X_l on the 2^P logical space.

    The protection drive acts as the constant ``protection_offset`` on the
    hybrid subspace (zero for sigma_x eigenstates paired as up_x down_x), so
    ``include_HP`` only shifts the spectrum.
    """
    P = params.n_pairs
    if P > MAX_LOGICAL_PAIRS:
        raise ValueError(f"{P} pairs exceed the dense logical limit of {MAX_LOGICAL_PAIRS}")
    dim = 2**P
    idx = np.arange(dim)
    bits = (idx[:, None] >> (P - 1 - np.arange(P))) & 1  # 0 = up
    zsign = 1 - 2 * bits
    H = np.diag(zsign @ params.h).astype(complex)
    for k in range(P):
        for l in range(k + 1, P):
            if params.g[k, l]:
                flip = idx ^ (1 << (P - 1 - k)) ^ (1 << (P - 1 - l))
                H[flip, idx] -= params.g[k, l]
    if include_HP:
        H += params.protection_offset * np.eye(dim)
    return OperatorMatrix(H, hermitian=True)


def separation_coupling(D, alpha: float, a: float = 1.0):
    """g between pairs D apart on the unit chain with theta = pi/2."""
    D = np.asarray(D, dtype=float)
    return 0.5 * a * ((2 * D + 1) ** -alpha + (2 * D - 1) ** -alpha - 2 * (2 * D) ** -alpha)


def chain_params(n_pairs: int, alpha: float, a: float = 1.0, angles=None) -> HybridModelParams:
    """hybrid_params for the standard chain, built through a SystemSpec."""
    from .spinops import TensorLayout

    layout = TensorLayout(2 * n_pairs, chain_pairing(n_pairs))
    system = SystemSpec(layout, chain_coupling(2 * n_pairs, a, alpha),
                        frame="second_interaction", spin_operator_convention="full")
    return hybrid_params(coupling_table(system, angles))


def residual_coupling(K: int, alpha: float) -> float:
    """(2K-1)^-alpha: the closest same-amplitude site pair under K-alternation."""
    if K < 2:
        raise ValueError("K must be >= 2")
    if not alpha > 0:
        raise ValueError("alpha must be > 0")
    return float((2 * K - 1) ** -float(alpha))


def residual_brute_force(K: int, alpha: float, n_pairs: int | None = None) -> float:
    """Largest |a_ij| between sites of distinct pairs carrying the same amplitude."""
    n_pairs = n_pairs or 3 * K + 1
    schedule = AlternationSchedule(tuple(range(1, K + 1)))
    amps = schedule.for_pairs(n_pairs)
    a = chain_coupling(2 * n_pairs, 1.0, alpha)
    pairing = chain_pairing(n_pairs)
    worst = 0.0
    for k in range(n_pairs):
        for l in range(k + 1, n_pairs):
            if amps[k] == amps[l]:
                worst = max(worst, max(abs(a[i, j]) for i in pairing[k] for j in pairing[l]))
    return worst


DEFAULT_FIT_RANGE = (1, 8)


def range_exponent(alpha: float, n_pairs: int, fit_range=DEFAULT_FIT_RANGE) -> float:
    """-slope of log|g(D)| against log D over the inclusive fit range."""
    if n_pairs < 12:
        raise ValueError("chain length must be >= 12")
    lo, hi = int(fit_range[0]), int(fit_range[1])
    if lo < 1 or hi > n_pairs // 2 or hi - lo + 1 < 4:
        raise ValueError(f"fit range must lie in [1, {n_pairs // 2}] with at least 4 points")
    params = chain_params(n_pairs, alpha)
    D = np.arange(lo, hi + 1)
    g = np.abs(params.g[0, D])
    if np.any(g <= 0):
        raise ValueError("non-positive coupling inside the fit range")
    slope = np.polyfit(np.log(D), np.log(g), 1)[0]
    return float(-slope)


def trotter_schedule(pairs, period: float) -> TrotterSchedule:
    """Two equal segments: all drives positive, then b-site drives negated."""
    if not period > 0:
        raise ValueError("period must be > 0")
    pairs = tuple(tuple(p) for p in pairs)
    n_sites = 1 + max(s for p in pairs for s in p)
    signs = np.ones((2, n_sites), dtype=int)
    for _, sb in pairs:
        signs[1, sb] = -1
    return TrotterSchedule(float(period), np.array([0.0, period / 2, period]), signs)
