"""Cartan (KAK) decomposition and Weyl-chamber geometry for two-qubit gates.

Coordinates follow the canonical gate

    U_d(a, b, c) = exp(-i/2 (a XX + b YY + c ZZ))

so that ``R_ZZ(theta)`` sits at ``[theta, 0, 0]``, CX at ``[pi/2, 0, 0]`` and
SWAP at ``[pi/2, pi/2, pi/2]``.  The stored representative is ordered
largest-first::

    pi/2 >= a >= b >= |c|,   and c >= 0 whenever a == pi/2

A negative ``c`` marks the mirror half of the chamber; :meth:`CartanCoords.chamber`
maps it to the tetrahedron with vertices O=(0,0,0), A1=(pi,0,0),
A2=(pi/2,pi/2,0), A3=(pi/2,pi/2,pi/2), and :meth:`CartanCoords.ascending`
gives the ``|c| >= |b| >= |a|`` labelling used when scanning CR pulses.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

from .su4 import I2, PAULI, X, Y, Z, check_unitary, rot, to_special_unitary

COORD_ATOL = 1e-8
RECON_ATOL = 1e-9

MAGIC = np.array(
    [[1, 0, 0, 1j], [0, 1j, 1, 0], [0, 1j, -1, 0], [1, 0, 0, -1j]], dtype=complex
) / np.sqrt(2)
MAGIC_DAG = MAGIC.conj().T

_XX, _YY, _ZZ = (np.kron(P, P) for P in (X, Y, Z))
# Eigenvalues (+-1) of XX, YY, ZZ along the magic-basis diagonal.
_MAGIC_SIGNS = np.array([np.real(np.diag(MAGIC_DAG @ P @ MAGIC)) for P in (_XX, _YY, _ZZ)])
# Phases of the magic-basis diagonal: lam = g + A @ (a, b, c).
_PHASE_MAP = np.column_stack([-0.5 * _MAGIC_SIGNS.T, np.ones(4)])
_PHASE_MAP_INV = np.linalg.inv(_PHASE_MAP)


@dataclass(frozen=True)
class CartanCoords:
    """Weyl-chamber point ``[a, b, c]`` in radians."""

    a: float
    b: float
    c: float

    def __iter__(self):
        return iter((self.a, self.b, self.c))

    def as_array(self) -> np.ndarray:
        return np.array([self.a, self.b, self.c])

    def normalized(self) -> np.ndarray:
        """Coordinates in units of pi/2."""
        return self.as_array() / (np.pi / 2)

    def chamber(self) -> tuple[float, float, float]:
        """Representative inside the tetrahedron O-A1-A2-A3 (all entries >= 0)."""
        if self.c < 0:
            return (np.pi - self.a, self.b, -self.c)
        return (self.a, self.b, self.c)

    def ascending(self) -> tuple[float, float, float]:
        """Relabelled ``(a', b', c')`` with ``|c'| >= |b'| >= |a'|``."""
        return (self.c, self.b, self.a)


class PathClass(enum.Enum):
    ONE_X = "1X"
    TWO_X = "2X"
    THREE_X = "3X"
    GENERAL = "general"


@dataclass(frozen=True)
class KakFactors:
    """``U = exp(i phase) (r3 (x) r4) U_d(coords) (r1 (x) r2)`` with ``r_i`` in SU(2)."""

    r1: np.ndarray
    r2: np.ndarray
    r3: np.ndarray
    r4: np.ndarray
    coords: CartanCoords
    global_phase: float

    def reconstruct(self) -> np.ndarray:
        core = canonical_gate(self.coords)
        return (
            np.exp(1j * self.global_phase)
            * np.kron(self.r3, self.r4)
            @ core
            @ np.kron(self.r1, self.r2)
        )


def canonical_gate(coords) -> np.ndarray:
    """``U_d(a, b, c) = R_XX(a) R_YY(b) R_ZZ(c)``, built from the commuting factors."""
    a, b, c = coords
    out = np.eye(4, dtype=complex)
    for theta, pp in ((a, _XX), (b, _YY), (c, _ZZ)):
        out = out @ (np.cos(theta / 2) * np.eye(4) - 1j * np.sin(theta / 2) * pp)
    return out


def entangling_power(coords) -> float:
    """Entangling power of the class ``[a, b, c]``; ranges over [0, 2/9]."""
    a, b, c = coords
    ca, cb, cc = np.cos(2 * a), np.cos(2 * b), np.cos(2 * c)
    return float(1 / 6 - (ca * cb + cc * cb + ca * cc) / 18)


def kron_factor(m: np.ndarray) -> tuple[complex, np.ndarray, np.ndarray]:
    """Split a product operator ``m = g * (p (x) q)`` with ``p, q`` in SU(2)."""
    t = m.reshape(2, 2, 2, 2).transpose(0, 2, 1, 3).reshape(4, 4)
    u, s, vh = np.linalg.svd(t)
    p = (np.sqrt(s[0]) * u[:, 0]).reshape(2, 2)
    q = (np.sqrt(s[0]) * vh[0, :]).reshape(2, 2)
    p = p / np.sqrt(np.linalg.det(p))
    q = q / np.sqrt(np.linalg.det(q))
    g = np.vdot(np.kron(p, q), m) / 4
    return g, p, q


def _orthogonal_eigvecs(p: np.ndarray) -> np.ndarray:
    """Real orthogonal ``K`` with ``K.T @ p @ K`` diagonal for symmetric unitary ``p``.

    ``Re p`` and ``Im p`` commute, so a generic real combination shares their
    eigenvectors.  The combination weights are a fixed sequence, tried in
    order until the result diagonalizes ``p``.
    """
    re, im = p.real, p.imag
    best, best_err = None, np.inf
    for w in (0.6180339887498949, 1.4142135623730951, -2.718281828459045, 0.3183098861837907, 7.389056098930650):
        _, k = np.linalg.eigh(re + w * im)
        d = k.T @ p @ k
        err = np.linalg.norm(d - np.diag(np.diag(d)))
        if err < best_err:
            best, best_err = k, err
        if err < 1e-12:
            break
    k = best
    # sign convention: largest-magnitude component positive
    lead = np.argmax(np.abs(k) > np.abs(k).max(axis=0) - 1e-9, axis=0)
    k = k * np.sign(k[lead, range(4)])
    phases = np.angle(np.diag(k.T @ p @ k))
    # deterministic ordering: eigenphase, then components (identity stays identity)
    order = sorted(range(4), key=lambda j: (round(phases[j], 10), *np.round(-k[:, j], 10)))
    return k[:, order]


def _nearest_orthogonal(m: np.ndarray) -> np.ndarray:
    u, _, vh = np.linalg.svd(m)
    return u @ vh


class _Canon:
    """Tracks ``U = phase * (l0 (x) l1) U_d(v) (r0 (x) r1)`` through Weyl-group moves."""

    _flip = (X, Y, Z)

    def __init__(self, v, atol):
        self.v = list(v)
        self.phase = 1.0 + 0j
        self.l0, self.l1, self.r0, self.r1 = I2, I2, I2, I2
        self.atol = atol

    def shift(self, k, step):
        # U_d(v) = U_d(v + step*pi e_k) * (step*i) P_k P_k
        self.v[k] += step * np.pi
        self.phase *= 1j * step
        p = self._flip[k]
        self.r0 = p @ self.r0
        self.r1 = p @ self.r1

    def negate(self, k1, k2):
        o = 3 - k1 - k2
        p = self._flip[o]
        self.v[k1] *= -1
        self.v[k2] *= -1
        self.l1 = self.l1 @ p
        self.r1 = p @ self.r1

    def swap(self, k1, k2):
        o = 3 - k1 - k2
        s = rot("XYZ"[o], np.pi / 2)
        sd = s.conj().T
        self.v[k1], self.v[k2] = self.v[k2], self.v[k1]
        self.l0, self.l1 = self.l0 @ sd, self.l1 @ sd
        self.r0, self.r1 = s @ self.r0, s @ self.r1

    def canonical_shift(self, k):
        while self.v[k] <= -np.pi / 2:
            self.shift(k, +1)
        while self.v[k] > np.pi / 2:
            self.shift(k, -1)

    def run(self):
        for k in range(3):
            self.canonical_shift(k)
        if abs(self.v[0]) < abs(self.v[1]):
            self.swap(0, 1)
        if abs(self.v[1]) < abs(self.v[2]):
            self.swap(1, 2)
        if abs(self.v[0]) < abs(self.v[1]):
            self.swap(0, 1)
        if self.v[0] < 0:
            self.negate(0, 2)
        if self.v[1] < 0:
            self.negate(1, 2)
        self.canonical_shift(2)
        if self.v[0] > np.pi / 2 - self.atol and self.v[2] < 0:
            self.shift(0, -1)
            self.negate(0, 2)
        return self


def kak_decompose(u: np.ndarray, atol: float = COORD_ATOL) -> KakFactors:
    """Cartan decomposition of a two-qubit unitary.

    The special-unitary part is moved to the magic basis, where local gates
    become SO(4) and the canonical gate is diagonal; ``M^T M`` is diagonalized
    by a real orthogonal matrix, which gives both SO(4) factors.

    Args:
        u: 4x4 unitary.
        atol: tolerance for the ``a == pi/2`` boundary rule.

    Raises:
        ValueError: ``u`` is not a 4x4 unitary.
    """
    u = check_unitary(u, 4, atol=1e-8)
    s, phase0 = to_special_unitary(u)
    m = MAGIC_DAG @ s @ MAGIC
    k2 = _orthogonal_eigvecs(m.T @ m)
    if np.linalg.det(k2) < 0:
        k2[:, 0] *= -1
    d2 = np.diag(k2.T @ m.T @ m @ k2)
    d = np.sqrt(d2)
    k1 = (m @ k2 / d).real
    k1 = _nearest_orthogonal(k1)
    if np.linalg.det(k1) < 0:
        k1[:, 0] *= -1
        d[0] *= -1
    # m ~= k1 diag(d) k2^T
    g_l, l0, l1 = kron_factor(MAGIC @ k1 @ MAGIC_DAG)
    g_r, r0, r1 = kron_factor(MAGIC @ k2.T @ MAGIC_DAG)
    lam = np.angle(d)
    a, b, c, g = _PHASE_MAP_INV @ lam

    canon = _Canon((a, b, c), atol).run()
    r3 = l0 @ canon.l0
    r4 = l1 @ canon.l1
    r1_ = canon.r0 @ r0
    r2_ = canon.r1 @ r1
    coords = CartanCoords(*(float(x) for x in canon.v))
    core = canonical_gate(coords)
    approx = np.kron(r3, r4) @ core @ np.kron(r1_, r2_)
    # absorb every accumulated scalar (including sign ambiguities of SU(2) roots)
    ratio = np.vdot(approx, u) / 4
    phase = float(np.angle(ratio))
    out = KakFactors(r1_, r2_, r3, r4, coords, phase)
    err = np.linalg.norm(out.reconstruct() - u)
    if err > 1e-7:
        raise ArithmeticError(f"KAK reconstruction failed (error {err:.2e})")
    del g, g_l, g_r, phase0
    return out


def cartan_coords(u: np.ndarray, atol: float = COORD_ATOL) -> CartanCoords:
    return kak_decompose(u, atol).coords


def coords_distance(p: CartanCoords, q: CartanCoords) -> float:
    """Distance between two canonical points, allowing the ``a = pi/2`` mirror."""
    pv, qv = p.as_array(), q.as_array()
    dist = np.max(np.abs(pv - qv))
    if abs(pv[0] - np.pi / 2) < 1e-6 or abs(qv[0] - np.pi / 2) < 1e-6:
        dist = min(dist, np.max(np.abs(pv - qv * np.array([1, 1, -1]))))
    return float(dist)


def locally_equivalent(u: np.ndarray, v: np.ndarray, tol: float = COORD_ATOL) -> bool:
    return coords_distance(cartan_coords(u), cartan_coords(v)) <= tol


def classify_path(coords, tol: float = COORD_ATOL) -> PathClass:
    """Which native Hamiltonian path (1X/2X/3X) a canonical point lies on."""
    vals = sorted((abs(x) for x in coords), reverse=True)
    nonzero = [x > tol for x in vals]
    if nonzero == [True, False, False]:
        return PathClass.ONE_X
    if nonzero == [True, True, False] and abs(vals[0] - vals[1]) <= tol:
        return PathClass.TWO_X
    if all(nonzero) and vals[0] - vals[2] <= tol:
        return PathClass.THREE_X
    return PathClass.GENERAL


def chamber_from_normalized(a: float, b: float, c: float) -> CartanCoords:
    """Build coordinates given in units of pi/2 (the Weyl-chamber plot axes)."""
    return CartanCoords(a * np.pi / 2, b * np.pi / 2, c * np.pi / 2)


__all__ = [
    "CartanCoords",
    "KakFactors",
    "PathClass",
    "canonical_gate",
    "cartan_coords",
    "classify_path",
    "coords_distance",
    "entangling_power",
    "kak_decompose",
    "kron_factor",
    "locally_equivalent",
    "PAULI",
]
