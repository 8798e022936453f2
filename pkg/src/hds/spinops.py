"""Pauli and boson operators on a site-major tensor product.

Ordering is fixed: spin sites first, in index order, then the single boson
factor (if any) last.  Basis state 0 of a spin is |up>, so sigma_z = diag(1, -1).
Operators below dimension 256 are held as dense arrays, larger ones as CSR.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import reduce
from typing import Iterable, Sequence

import numpy as np
import scipy.sparse as sp

DENSE_LIMIT = 256
HERMITIAN_TOL = 1e-12

SIGMA = {
    "i": np.eye(2, dtype=complex),
    "x": np.array([[0, 1], [1, 0]], dtype=complex),
    "y": np.array([[0, -1j], [1j, 0]], dtype=complex),
    "z": np.array([[1, 0], [0, -1]], dtype=complex),
    # sigma_pm = (sigma_x +- i sigma_y) / 2
    "+": np.array([[0, 1], [0, 0]], dtype=complex),
    "-": np.array([[0, 0], [1, 0]], dtype=complex),
}


def _as_matrix(data):
    if sp.issparse(data):
        return sp.csr_array(data, dtype=complex)
    arr = np.asarray(data, dtype=complex)
    if arr.ndim != 2 or arr.shape[0] != arr.shape[1]:
        raise ValueError(f"operator must be square, got shape {arr.shape}")
    return arr


@dataclass(frozen=True, eq=False)
class OperatorMatrix:
    """Immutable square operator with a hermiticity flag.

    The representation follows the dimension: dense below ``DENSE_LIMIT``,
    sparse CSR at or above it.  Arithmetic returns new instances.
    """

    data: object
    hermitian: bool = False

    def __post_init__(self):
        mat = _as_matrix(self.data)
        dim = mat.shape[0]
        if dim >= DENSE_LIMIT and not sp.issparse(mat):
            mat = sp.csr_array(mat)
        elif dim < DENSE_LIMIT and sp.issparse(mat):
            mat = mat.toarray()
        if sp.issparse(mat):
            mat.sum_duplicates()
            mat.eliminate_zeros()
        else:
            mat.setflags(write=False)
        object.__setattr__(self, "data", mat)
        if self.hermitian:
            err = self.hermitian_error()
            if err > HERMITIAN_TOL * max(1.0, self.norm()):
                raise ValueError(f"operator flagged hermitian but |H - H^dag| = {err:.3g}")

    @property
    def dim(self) -> int:
        return self.data.shape[0]

    @property
    def is_sparse(self) -> bool:
        return sp.issparse(self.data)

    def toarray(self) -> np.ndarray:
        return self.data.toarray() if self.is_sparse else np.array(self.data)

    def tosparse(self) -> sp.csr_array:
        return sp.csr_array(self.data)

    def norm(self) -> float:
        """Max-abs entry; cheap and adequate for tolerance scaling."""
        if self.is_sparse:
            return float(abs(self.data).max()) if self.data.nnz else 0.0
        return float(np.abs(self.data).max()) if self.data.size else 0.0

    def hermitian_error(self) -> float:
        diff = self.data - self.data.conj().T
        if sp.issparse(diff):
            return float(abs(diff).max()) if diff.nnz else 0.0
        return float(np.abs(diff).max())

    def dag(self) -> "OperatorMatrix":
        return OperatorMatrix(self.data.conj().T, self.hermitian)

    def expect(self, psi: np.ndarray) -> complex:
        return complex(np.vdot(psi, self.data @ psi))

    def _check(self, other: "OperatorMatrix"):
        if other.dim != self.dim:
            raise ValueError(f"dimension mismatch: {self.dim} vs {other.dim}")

    def __add__(self, other):
        if not isinstance(other, OperatorMatrix):
            return NotImplemented
        self._check(other)
        return OperatorMatrix(self.data + other.data, self.hermitian and other.hermitian)

    def __sub__(self, other):
        if not isinstance(other, OperatorMatrix):
            return NotImplemented
        self._check(other)
        return OperatorMatrix(self.data - other.data, self.hermitian and other.hermitian)

    def __neg__(self):
        return OperatorMatrix(-self.data, self.hermitian)

    def __mul__(self, scalar):
        if not np.isscalar(scalar):
            return NotImplemented
        real = np.isreal(scalar)
        return OperatorMatrix(self.data * scalar, self.hermitian and bool(real))

    __rmul__ = __mul__

    def __matmul__(self, other):
        if isinstance(other, OperatorMatrix):
            self._check(other)
            return OperatorMatrix(self.data @ other.data)
        return self.data @ other

    def __repr__(self):
        kind = "sparse" if self.is_sparse else "dense"
        return f"OperatorMatrix(dim={self.dim}, {kind}, hermitian={self.hermitian})"


@dataclass(frozen=True)
class TensorLayout:
    """Spin sites, optional pairing of sites into logical spins, optional boson."""

    n_spins: int
    pairing: tuple[tuple[int, int], ...] = ()
    boson_dim: int = 0

    def __post_init__(self):
        if self.n_spins < 1:
            raise ValueError("n_spins must be >= 1")
        if self.boson_dim < 0:
            raise ValueError("boson_dim must be >= 0")
        pairs = tuple(tuple(int(s) for s in p) for p in self.pairing)
        seen = [s for p in pairs for s in p]
        if any(len(p) != 2 for p in pairs):
            raise ValueError("each pair must contain exactly two sites")
        if len(set(seen)) != len(seen):
            raise ValueError("a site appears in more than one pair")
        if any(not 0 <= s < self.n_spins for s in seen):
            raise ValueError("pair references a site outside the layout")
        object.__setattr__(self, "pairing", pairs)

    @property
    def factor_dims(self) -> tuple[int, ...]:
        dims = (2,) * self.n_spins
        return dims + ((self.boson_dim,) if self.boson_dim else ())

    @property
    def dim(self) -> int:
        return 2**self.n_spins * max(self.boson_dim, 1)

    @property
    def boson_site(self) -> int | None:
        return self.n_spins if self.boson_dim else None


def _kron_all(mats: Sequence) -> sp.csr_array:
    return reduce(lambda a, b: sp.kron(a, b, format="csr"), (sp.csr_array(m) for m in mats))


def _factors(layout: TensorLayout, placed: dict[int, np.ndarray]) -> list:
    return [
        placed.get(k, sp.identity(d, dtype=complex, format="csr"))
        for k, d in enumerate(layout.factor_dims)
    ]


def embed(op, site: int, layout: TensorLayout) -> OperatorMatrix:
    """Place ``op`` on one tensor factor with identities elsewhere."""
    mat = op.toarray() if isinstance(op, OperatorMatrix) else np.asarray(op, dtype=complex)
    dims = layout.factor_dims
    if not 0 <= site < len(dims):
        raise IndexError(f"site {site} outside layout with {len(dims)} factors")
    if mat.shape != (dims[site], dims[site]):
        raise ValueError(f"operator shape {mat.shape} does not fit factor of dim {dims[site]}")
    herm = bool(np.allclose(mat, mat.conj().T, atol=HERMITIAN_TOL))
    return OperatorMatrix(_kron_all(_factors(layout, {site: mat})), hermitian=herm)


def pauli_string(spec: Iterable[tuple[int, str]], layout: TensorLayout, coeff: complex = 1.0) -> OperatorMatrix:
    """Product of single-site Paulis, e.g. ``[(0, "x"), (3, "z")]``."""
    spec = list(spec)
    placed: dict[int, np.ndarray] = {}
    for site, label in spec:
        if not 0 <= site < layout.n_spins:
            raise IndexError(f"spin site {site} outside layout")
        if label not in SIGMA:
            raise ValueError(f"unknown Pauli label {label!r}")
        if site in placed:
            raise ValueError(f"site {site} repeated in Pauli string")
        placed[site] = SIGMA[label]
    herm = all(label in "ixyz" for _, label in spec) and bool(np.isreal(coeff))
    return OperatorMatrix(coeff * _kron_all(_factors(layout, placed)), hermitian=herm)


def ladder(kind: str, boson_dim: int) -> OperatorMatrix:
    """Truncated lowering (b) or raising (b^dag) operator.

    Strict truncation: b^dag maps the top Fock state to zero.
    """
    if boson_dim < 2:
        raise ValueError("boson_dim must be >= 2")
    b = np.diag(np.sqrt(np.arange(1, boson_dim, dtype=float)), 1).astype(complex)
    if kind == "lower":
        return OperatorMatrix(b)
    if kind == "raise":
        return OperatorMatrix(b.T.copy())
    raise ValueError(f"ladder kind must be 'raise' or 'lower', got {kind!r}")


def number_op(boson_dim: int) -> np.ndarray:
    return np.diag(np.arange(boson_dim, dtype=float)).astype(complex)


def basis_state(bits: Sequence[int]) -> np.ndarray:
    """Product state in the z basis; bit 0 is |up>, 1 is |down>."""
    vec = np.zeros(2 ** len(bits), dtype=complex)
    vec[int("".join(str(int(b)) for b in bits), 2) if bits else 0] = 1.0
    return vec


def kron_states(*states: np.ndarray) -> np.ndarray:
    return reduce(np.kron, (np.asarray(s, dtype=complex) for s in states))
