"""Two-ion, one-mode spin-boson model and its effective XXZ target.

Full model (post optical RWA), per ion i:
    nu b^dag b + (Omega_c / 2) sx_i - J_r [s-_i e^{-i delta t} D + h.c.]
               - Omega_z [s+_i e^{i delta_m t} + h.c.],
with D = exp(-i 2 eta (b + b^dag)) and delta_m = Omega_c - Delta_m.  It is
compared with the target in the frame exp(i H_x t) exp(i delta_m/2 sum sx t),
H_x = Delta_m/2 sx - Omega_z/2 sz per ion.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, replace
from functools import reduce

import numpy as np
import scipy.linalg as sla
from scipy.optimize import brentq

from .model import dressed_basis
from .spinops import SIGMA, OperatorMatrix, ladder

TWO_PI = 2 * np.pi
TRUNCATION_TOL = 1e-4
TAYLOR_ORDER = 5
MAGNUS_NODES = (0.5 - np.sqrt(3) / 6, 0.5 + np.sqrt(3) / 6)


@dataclass(frozen=True)
class IonParams:
    """All rates in rad/us.  ``omega_z`` and ``delta_m`` may be per ion."""

    j_raman: float
    eta: float
    nu: float
    delta: float
    omega_c: float
    omega_z: float | tuple[float, ...] = 0.0
    delta_m: float | tuple[float, ...] = 0.0
    n_max: int = 6
    n_ions: int = 2
    stark_compensation: float = 0.0

    def __post_init__(self):
        if self.n_ions < 1 or self.n_max < 2:
            raise ValueError("need n_ions >= 1 and n_max >= 2")
        for name in ("omega_z", "delta_m"):
            val = getattr(self, name)
            arr = np.broadcast_to(np.asarray(val, dtype=float), (self.n_ions,))
            object.__setattr__(self, name, tuple(float(x) for x in arr))
        if self.eta > 0.2:
            warnings.warn(f"Lamb-Dicke parameter eta={self.eta} is not small", stacklevel=2)
        gap = self.delta - self.nu
        for om in self.dressed_rabi:
            if om and not (self.j_eff < om < gap):
                warnings.warn("hierarchy J_eff << Omega_m << delta - nu is violated", stacklevel=2)
                break

    @property
    def theta(self) -> np.ndarray:
        return np.arctan2(self.omega_z, self.delta_m)

    @property
    def dressed_rabi(self) -> np.ndarray:
        return np.hypot(self.omega_z, self.delta_m)

    @property
    def delta_mod(self) -> np.ndarray:
        """Detuning delta_m = Omega_c - Delta_m of the rotated drive."""
        return self.omega_c - np.asarray(self.delta_m)

    @property
    def j_eff(self) -> float:
        return self.j_raman**2 * self.eta**2 / (self.delta - self.nu)

    @property
    def dim(self) -> int:
        return 2**self.n_ions * self.n_max


FIG_S3_BASE = dict(j_raman=TWO_PI * 0.1, eta=0.05, nu=TWO_PI * 10.0, delta=TWO_PI * 10.1, omega_c=TWO_PI * 2.0)

# (Omega_z, Delta_m) per panel, rad/us
FIG_S3_CASES = {
    "0": (0.0, TWO_PI * 2.0),
    "pi/4": (TWO_PI * 4.98e-3, TWO_PI * 4.99e-3),
    "pi/3": (TWO_PI * 4.99e-3, TWO_PI * 2.88e-3),
    "pi/2": (TWO_PI * 5e-3, 0.0),
}


def fig_s3_params(case: str, **overrides) -> IonParams:
    omega_z, delta_m = FIG_S3_CASES[case]
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        return IonParams(**{**FIG_S3_BASE, "omega_z": omega_z, "delta_m": delta_m, **overrides})


# ------------------------------------------------------------------ operators


def _spin(op: np.ndarray, ion: int, n_ions: int) -> np.ndarray:
    return reduce(np.kron, [op if k == ion else np.eye(2) for k in range(n_ions)])


class _Parts:
    """Time-independent pieces of the full Hamiltonian as dense arrays.

    ``energies``/``basis`` diagonalize the static part; the integrator works
    in its interaction picture, where only the slow sideband terms remain.
    """

    def __init__(self, p: IonParams):
        nb, n = p.n_max, p.n_ions
        b = ladder("lower", nb).toarray()
        Ib, Is = np.eye(nb), np.eye(2**n)
        B = np.kron(Is, b)
        self.number = np.kron(Is, b.conj().T @ b)
        D = np.kron(Is, sla.expm(-2j * p.eta * (b + b.conj().T)))
        lower = [np.kron(_spin(SIGMA["-"], i, n), Ib) for i in range(n)]
        sx = sum(np.kron(_spin(SIGMA["x"], i, n), Ib) for i in range(n))
        self.static = p.nu * B.conj().T @ B + (p.omega_c + p.stark_compensation) / 2 * sx
        self.raman = sum(lo @ D for lo in lower)              # multiplies e^{-i delta t}
        self.raise_ops = [lo.conj().T for lo in lower]         # multiply e^{i delta_m t}
        self.energies, self.basis = np.linalg.eigh(self.static)
        W = self.basis
        self.raman_eig = W.conj().T @ self.raman @ W
        self.raise_eig = [W.conj().T @ r @ W for r in self.raise_ops]

    def to_lab(self, psi_int: np.ndarray, t: float) -> np.ndarray:
        return self.basis @ (np.exp(-1j * self.energies * t) * psi_int)

    def to_interaction(self, psi: np.ndarray, t: float) -> np.ndarray:
        return np.exp(1j * self.energies * t) * (self.basis.conj().T @ psi)


def build_eff_xx(params: IonParams, t: float) -> OperatorMatrix:
    """nu b^dag b + (Omega_c/2) sum sx - J_r sum [s- e^{-i delta t} D + h.c.]."""
    parts = _Parts(params)
    T = np.exp(-1j * params.delta * t) * parts.raman
    return OperatorMatrix(parts.static - params.j_raman * (T + T.conj().T), hermitian=True)


def build_rotated_drive(params: IonParams, t: float) -> OperatorMatrix:
    """-sum_m Omega_z_m (s+_m e^{i delta_m t} + h.c.)."""
    parts = _Parts(params)
    out = np.zeros((params.dim, params.dim), dtype=complex)
    for oz, dm, rp in zip(params.omega_z, params.delta_mod, parts.raise_ops):
        R = np.exp(1j * dm * t) * rp
        out -= oz * (R + R.conj().T)
    return OperatorMatrix(out, hermitian=True)


def build_target_xxz(params: IonParams) -> OperatorMatrix:
    """sum_{i != j} J_eff [cos th_i cos th_j sx sx + 1/2 sin th_i sin th_j (sz sz + sy sy)].

    Paulis refer to the dressed basis of each ion; the ordered sum counts
    every pair twice.
    """
    n = params.n_ions
    th = params.theta
    X, Y, Z = SIGMA["x"], SIGMA["y"], SIGMA["z"]
    H = np.zeros((2**n, 2**n), dtype=complex)
    for i in range(n):
        for j in range(n):
            if i == j:
                continue
            xx = _spin(X, i, n) @ _spin(X, j, n)
            zz = _spin(Z, i, n) @ _spin(Z, j, n)
            yy = _spin(Y, i, n) @ _spin(Y, j, n)
            H += params.j_eff * (np.cos(th[i]) * np.cos(th[j]) * xx
                                 + 0.5 * np.sin(th[i]) * np.sin(th[j]) * (zz + yy))
    return OperatorMatrix(H, hermitian=True)


def dressing_rotation(params: IonParams) -> np.ndarray:
    """exp(-i th sy / 2) per ion: maps the target's Paulis onto the ion basis."""
    return reduce(np.kron, [sla.expm(-0.5j * th * SIGMA["y"]) for th in params.theta])


def target_in_ion_basis(params: IonParams) -> np.ndarray:
    R = dressing_rotation(params)
    return R @ build_target_xxz(params).toarray() @ R.conj().T


def comparison_frame(params: IonParams, t: float) -> np.ndarray:
    """exp(i H_x t) exp(i delta_m/2 sum sx t) on the spin space."""
    n = params.n_ions
    ops = []
    for oz, dmg, dmod in zip(params.omega_z, params.delta_m, params.delta_mod):
        hx = dmg / 2 * SIGMA["x"] - oz / 2 * SIGMA["z"]
        ops.append(sla.expm(1j * hx * t) @ sla.expm(0.5j * dmod * SIGMA["x"] * t))
    return reduce(np.kron, ops) if n else np.eye(1)


# ------------------------------------------------------------------ integrator


def _interaction_h(parts: _Parts, params: IonParams, t: np.ndarray) -> np.ndarray:
    """Time-dependent terms in the interaction picture of the static part, (n, d, d)."""
    u = np.exp(1j * np.outer(t, parts.energies))
    phase = u[:, :, None] * np.conj(u)[:, None, :]
    T = (np.exp(-1j * params.delta * t)[:, None, None] * parts.raman_eig) * phase
    H = -params.j_raman * (T + np.conj(np.swapaxes(T, 1, 2)))
    for oz, dm, rp in zip(params.omega_z, params.delta_mod, parts.raise_eig):
        if oz:
            R = (np.exp(1j * dm * t)[:, None, None] * rp) * phase
            H -= oz * (R + np.conj(np.swapaxes(R, 1, 2)))
    return H


def _magnus_steps(parts: _Parts, params: IonParams, t0: float, dt: float, n: int) -> np.ndarray:
    """Fourth-order Magnus propagators (interaction picture) for n steps from t0."""
    starts = t0 + dt * np.arange(n)
    H1, H2 = (_interaction_h(parts, params, starts + c * dt) for c in MAGNUS_NODES)
    G = dt / 2 * (H1 + H2) + 1j * np.sqrt(3) / 12 * dt**2 * (H1 @ H2 - H2 @ H1)
    norm = float(np.max(np.abs(G).sum(axis=2)))
    if norm > 0.1:
        raise ValueError(f"Magnus exponent norm {norm:.3g} too large; reduce dt")
    # exp(-iG) by a Horner-form Taylor series; the exponent is small here
    A = -1j * G
    eye = np.eye(G.shape[1], dtype=complex)
    U = eye + A / TAYLOR_ORDER
    for k in range(TAYLOR_ORDER - 1, 0, -1):
        U = A @ U
        U /= k
        U += eye
    return U


def evolve_full(params: IonParams, psi0: np.ndarray, t_final: float, dt: float,
                store_every: float, chunk: int = 500):
    """States of the full model at multiples of ``store_every``."""
    n_steps = int(round(t_final / dt))
    stride = int(round(store_every / dt))
    if abs(n_steps * dt - t_final) > 1e-9 * t_final or abs(stride * dt - store_every) > 1e-9 * store_every:
        raise ValueError("t_final and store_every must be multiples of dt")
    parts = _Parts(params)
    psi = parts.to_interaction(np.asarray(psi0, dtype=complex), 0.0)
    times, states = [0.0], [np.asarray(psi0, dtype=complex).copy()]
    done = 0
    while done < n_steps:
        n = min(chunk, n_steps - done)
        U = _magnus_steps(parts, params, done * dt, dt, n)
        for k in range(n):
            psi = U[k] @ psi
            if (done + k + 1) % stride == 0:
                t = (done + k + 1) * dt
                times.append(t)
                states.append(parts.to_lab(psi, t))
        done += n
    return np.array(times), np.array(states)


# ------------------------------------------------------------------ calibration


def residual_carrier_field(params: IonParams, period: float = 10.0, n_steps: int = 2000) -> float:
    """sigma_x field left on one ion's vacuum block after one stroboscopic period.

    ``period`` must be a common multiple of 2 pi / delta and 2 pi / Omega_c so
    that the bare carrier rotation drops out.
    """
    single = replace(params, n_ions=1, omega_z=0.0, delta_m=0.0, n_max=max(params.n_max, 8))
    parts = _Parts(single)
    U = _magnus_steps(parts, single, 0.0, period / n_steps, n_steps)
    total_int = reduce(lambda acc, u: u @ acc, U, np.eye(single.dim, dtype=complex))
    W = parts.basis
    total = W @ (np.exp(-1j * parts.energies * period)[:, None] * total_int) @ W.conj().T
    nb = single.n_max
    block = total.reshape(2, nb, 2, nb)[:, 0, :, 0]
    L = 1j * sla.logm(block) / period
    return float(np.trace(L @ SIGMA["x"]).real / 2)


def stark_compensation(params: IonParams) -> float:
    """Carrier offset that cancels the sideband-induced sigma_x shift."""
    base = replace(params, stark_compensation=0.0)
    f0 = residual_carrier_field(base)
    guess = -2.0 * f0
    span = max(abs(guess), 1e-6)

    def field(c):
        return residual_carrier_field(replace(base, stark_compensation=c))

    return float(brentq(field, guess - span, guess + span, xtol=1e-9))


# ------------------------------------------------------------------ verification


@dataclass
class XXZComparison:
    times: np.ndarray
    full: np.ndarray      # (n_t, 4): rho_ud,ud, rho_du,du, Re rho_du,ud, Im rho_du,ud
    target: np.ndarray
    deviation: float
    boson_max: float
    truncation_change: float | None
    params: IonParams


def _elements(rho: np.ndarray, ud: np.ndarray, du: np.ndarray) -> np.ndarray:
    c = np.conj(du) @ rho @ ud
    return np.array([(np.conj(ud) @ rho @ ud).real, (np.conj(du) @ rho @ du).real, c.real, c.imag])


def _full_traces(params: IonParams, t_final: float, dt: float, store_every: float):
    if params.n_ions != 2:
        raise ValueError("verification is defined for two ions")
    if len(set(params.omega_z)) != 1 or len(set(params.delta_m)) != 1:
        raise ValueError("verification needs identical dressing on both ions")
    up, dn = dressed_basis(float(params.theta[0]))
    ud, du = np.kron(up, dn), np.kron(dn, up)
    vac = np.zeros(params.n_max)
    vac[0] = 1
    times, states = evolve_full(params, np.kron(ud, vac), t_final, dt, store_every)
    number = _Parts(params).number
    boson = max(float(np.vdot(s, number @ s).real) for s in states)
    rows = []
    for t, s in zip(times, states):
        m = s.reshape(4, params.n_max)
        U = comparison_frame(params, t)
        rows.append(_elements(U @ (m @ m.conj().T) @ U.conj().T, ud, du))
    HT = target_in_ion_basis(params)
    w, v = np.linalg.eigh(HT)
    target = []
    for t in times:
        psi = v @ (np.exp(-1j * w * t) * (v.conj().T @ ud))
        target.append(_elements(np.outer(psi, psi.conj()), ud, du))
    return times, np.array(rows), np.array(target), boson


def verify_xxz(params: IonParams, t_final: float = 1000.0, dt: float = 0.005,
               store_every: float = 10.0, compensate: bool = True,
               check_truncation: bool = True) -> XXZComparison:
    """Full model vs target XXZ traces, with the n_max doubling guard."""
    if compensate:
        params = replace(params, stark_compensation=stark_compensation(params))
    times, full, target, boson = _full_traces(params, t_final, dt, store_every)
    if boson >= params.n_max / 2:
        raise RuntimeError(f"<b^dag b> reached {boson:.3g} >= n_max/2; increase n_max")
    change = None
    if check_truncation:
        doubled = replace(params, n_max=2 * params.n_max)
        _, full2, _, _ = _full_traces(doubled, t_final, dt, store_every)
        change = float(np.max(np.abs(full2 - full)))
        if change > TRUNCATION_TOL:
            raise RuntimeError(f"doubling n_max changed the traces by {change:.3g} > {TRUNCATION_TOL}")
    dev = float(np.max(np.abs(full - target)))
    return XXZComparison(times, full, target, dev, boson, change, params)
