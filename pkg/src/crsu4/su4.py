"""Dense linear algebra for one- and two-qubit operators.

Two-qubit matrices use the big-endian convention ``kron(q0, q1)``; qubit 0 is
the CR control and qubit 1 the target.
"""

from __future__ import annotations

import itertools

import numpy as np

UNITARY_ATOL = 1e-10
HERMITIAN_ATOL = 1e-10

I2 = np.eye(2, dtype=complex)
X = np.array([[0, 1], [1, 0]], dtype=complex)
Y = np.array([[0, -1j], [1j, 0]], dtype=complex)
Z = np.array([[1, 0], [0, -1]], dtype=complex)

PAULI = {"I": I2, "X": X, "Y": Y, "Z": Z}

#: All 16 two-qubit Pauli labels in lexicographic order (II, IX, ..., ZZ).
PAULI_LABELS = tuple("".join(p) for p in itertools.product("IXYZ", repeat=2))


def pauli_string(label: str) -> np.ndarray:
    """Return the 4x4 matrix for a two-letter Pauli label such as ``"ZX"``."""
    if not isinstance(label, str) or len(label) != 2 or any(s not in PAULI for s in label):
        raise ValueError(f"Pauli label must be two symbols from IXYZ, got {label!r}")
    return np.kron(PAULI[label[0]], PAULI[label[1]])


def is_unitary(m: np.ndarray, atol: float = UNITARY_ATOL) -> bool:
    m = np.asarray(m)
    if m.ndim != 2 or m.shape[0] != m.shape[1]:
        return False
    return bool(np.linalg.norm(m.conj().T @ m - np.eye(m.shape[0])) <= atol)


def is_hermitian(m: np.ndarray, atol: float = HERMITIAN_ATOL) -> bool:
    m = np.asarray(m)
    if m.ndim != 2 or m.shape[0] != m.shape[1]:
        return False
    return bool(np.linalg.norm(m - m.conj().T) <= atol)


def check_unitary(m, dim: int | None = None, atol: float = UNITARY_ATOL) -> np.ndarray:
    """Validate and return ``m`` as a complex unitary array.

    Raises:
        ValueError: wrong shape, or ``||U^dag U - I||_F > atol``.
    """
    m = np.asarray(m, dtype=complex)
    if dim is not None and m.shape != (dim, dim):
        raise ValueError(f"expected a {dim}x{dim} matrix, got shape {m.shape}")
    if not is_unitary(m, atol):
        raise ValueError("matrix is not unitary within tolerance")
    return m


def check_hermitian(m, dim: int | None = None, atol: float = HERMITIAN_ATOL) -> np.ndarray:
    m = np.asarray(m, dtype=complex)
    if dim is not None and m.shape != (dim, dim):
        raise ValueError(f"expected a {dim}x{dim} matrix, got shape {m.shape}")
    if not is_hermitian(m, atol):
        raise ValueError("matrix is not Hermitian within tolerance")
    return m


def expm_herm(h: np.ndarray, t: float = 1.0) -> np.ndarray:
    """Return ``exp(-i h t)`` for Hermitian ``h`` via eigendecomposition."""
    h = check_hermitian(h)
    h = 0.5 * (h + h.conj().T)
    w, v = np.linalg.eigh(h)
    return (v * np.exp(-1j * w * t)) @ v.conj().T


def trace_fidelity(u: np.ndarray, v: np.ndarray) -> float:
    """``|tr(U^dag V)|^2 / d^2``; insensitive to global phase."""
    u = np.asarray(u)
    v = np.asarray(v)
    d = u.shape[0]
    return float(abs(np.vdot(u, v)) ** 2 / d**2)


def embed_local(q0: np.ndarray, q1: np.ndarray) -> np.ndarray:
    """Tensor two single-qubit operators into a two-qubit one (``q0 (x) q1``)."""
    return np.kron(np.asarray(q0, dtype=complex), np.asarray(q1, dtype=complex))


def rot(axis: str, theta: float) -> np.ndarray:
    """Single-qubit rotation ``r_A(theta) = exp(-i theta/2 A)`` for A in X, Y, Z."""
    c, s = np.cos(theta / 2), np.sin(theta / 2)
    return c * I2 - 1j * s * PAULI[axis]


def rx(theta: float) -> np.ndarray:
    return rot("X", theta)


def ry(theta: float) -> np.ndarray:
    return rot("Y", theta)


def rz(theta: float) -> np.ndarray:
    return rot("Z", theta)


def pauli_rotation(label: str, theta: float) -> np.ndarray:
    """Two-qubit ``R_AB(theta) = exp(-i theta/2 AB)``; e.g. ``pauli_rotation("ZZ", t)``."""
    return np.cos(theta / 2) * np.eye(4) - 1j * np.sin(theta / 2) * pauli_string(label)


def commutator(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    return a @ b - b @ a


def pauli_components(m: np.ndarray) -> dict[str, complex]:
    """Expand a 4x4 matrix in the Pauli basis: ``m = sum_P c_P P``."""
    m = np.asarray(m)
    return {p: complex(np.trace(pauli_string(p) @ m) / 4) for p in PAULI_LABELS}


def haar_unitary(dim: int, rng: np.random.Generator) -> np.ndarray:
    """Haar-random unitary (QR of a complex Ginibre matrix with phase fix)."""
    z = (rng.standard_normal((dim, dim)) + 1j * rng.standard_normal((dim, dim))) / np.sqrt(2)
    q, r = np.linalg.qr(z)
    d = np.diag(r)
    return q * (d / abs(d))


def haar_special_unitary(dim: int, rng: np.random.Generator) -> np.ndarray:
    u = haar_unitary(dim, rng)
    return u / np.linalg.det(u) ** (1 / dim)


def to_special_unitary(u: np.ndarray) -> tuple[np.ndarray, float]:
    """Split ``u = exp(i phase) * s`` with ``det(s) = 1``; returns ``(s, phase)``."""
    u = np.asarray(u, dtype=complex)
    phase = float(np.angle(np.linalg.det(u)) / u.shape[0])
    return u * np.exp(-1j * phase), phase
