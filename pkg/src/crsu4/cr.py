"""Cross-resonance Hamiltonian, its exact propagator and the perturbative ansatz.

All frequencies are angular, in units of 1/dt; times are in dt.
"""

from __future__ import annotations

from dataclasses import dataclass, fields, replace

import numpy as np
from scipy import integrate

from .su4 import X, Y, Z, expm_herm, pauli_string, ry, rz, trace_fidelity

CR_TERMS = ("ZX", "ZY", "ZZ", "IX", "IY", "IZ", "ZI")

#: Parameter order of the ansatz (same order as the fitted-parameter tables).
PARAM_NAMES = (
    "alpha", "beta", "gamma", "delta",
    "nu_zn", "nu_in", "nu_zi",
    "phi_zz", "phi_iz", "phi_zi",
)
ANGLE_PARAMS = ("alpha", "beta", "gamma", "phi_zz", "phi_iz", "phi_zi")

W_MODES = ("integral", "quadrature", "closed_form")
DEGENERATE_EPS = 1e-6


class DegenerateDirectionError(ValueError):
    """A Pauli direction vector (N or N') has zero norm."""


@dataclass(frozen=True)
class CRCoefficients:
    """Coefficients of ``H = zx ZX + zy ZY + zz ZZ + ix IX + iy IY + iz IZ + zi ZI``."""

    zx: float = 0.0
    zy: float = 0.0
    zz: float = 0.0
    ix: float = 0.0
    iy: float = 0.0
    iz: float = 0.0
    zi: float = 0.0

    def __post_init__(self):
        if not all(np.isfinite(getattr(self, f.name)) for f in fields(self)):
            raise ValueError("CR coefficients must be finite")

    def as_dict(self) -> dict[str, float]:
        return {f.name: float(getattr(self, f.name)) for f in fields(self)}


@dataclass(frozen=True)
class CRPolarForm:
    """``H = nu_zn Z(x)N + nu_in I(x)N' + nu_zi ZI`` in spherical coordinates.

    ``(alpha, beta)`` are the zenith/azimuth of N; ``(delta_p, gamma)`` are the
    zenith/azimuth of ``W' = R(alpha, beta)[N']``.
    """

    nu_zn: float
    nu_in: float
    nu_zi: float
    alpha: float
    beta: float
    delta_p: float
    gamma: float

    @property
    def delta(self) -> float:
        """Strength of the transverse perturbation, ``nu_in * sin(delta_p)``."""
        return float(self.nu_in * np.sin(self.delta_p))


@dataclass(frozen=True)
class CRModelParams:
    """The ten parameters of the perturbative propagator ansatz.

    ``delta`` has the units of a frequency (1/dt); the phases ``phi_*`` are
    the constant offsets picked up during the pulse edges.
    """

    alpha: float = np.pi / 2
    beta: float = 0.0
    gamma: float = 0.0
    delta: float = 0.0
    nu_zn: float = 0.0
    nu_in: float = 0.0
    nu_zi: float = 0.0
    phi_zz: float = 0.0
    phi_iz: float = 0.0
    phi_zi: float = 0.0

    def as_array(self) -> np.ndarray:
        return np.array([getattr(self, n) for n in PARAM_NAMES], dtype=float)

    @classmethod
    def from_array(cls, values) -> "CRModelParams":
        return cls(*(float(v) for v in values))

    def as_dict(self) -> dict[str, float]:
        return {n: float(getattr(self, n)) for n in PARAM_NAMES}

    def replace(self, **changes) -> "CRModelParams":
        return replace(self, **changes)

    def wrapped(self) -> "CRModelParams":
        """Same unitary family member with angles in principal ranges.

        ``alpha`` is folded into [0, pi]; other angles into (-pi, pi].
        A negative ``delta`` is absorbed into ``gamma``.
        """
        p = self.as_dict()
        if p["delta"] < 0:
            p["delta"] = -p["delta"]
            p["gamma"] += np.pi
        for name in ("beta", "gamma"):
            p[name] = _wrap(p[name])
        a = _wrap(p["alpha"])
        if a < 0:
            # r_Y(a) = r_Z(pi) r_Y(-a) r_Z(-pi) up to phase
            a = -a
            p["beta"] = _wrap(p["beta"] + np.pi)
            p["gamma"] = _wrap(p["gamma"] + np.pi)
        p["alpha"] = a
        return CRModelParams(**p)


def _wrap(x: float) -> float:
    """Wrap an angle into (-pi, pi]."""
    y = (x + np.pi) % (2 * np.pi) - np.pi
    return float(np.pi if y == -np.pi else y)


def build_hamiltonian(c: CRCoefficients) -> np.ndarray:
    h = np.zeros((4, 4), dtype=complex)
    for label in CR_TERMS:
        h += getattr(c, label.lower()) * pauli_string(label)
    return h


def exact_propagator(c: CRCoefficients, t: float) -> np.ndarray:
    return expm_herm(build_hamiltonian(c), t)


def _frame_local(alpha: float, beta: float) -> np.ndarray:
    # target-qubit rotation taking N -> Z: -beta about Z, then -alpha about Y
    return ry(-alpha) @ rz(-beta)


def rotation_superop(alpha: float, beta: float, a: np.ndarray, inverse: bool = False) -> np.ndarray:
    """Conjugate ``a`` by the target-qubit rotation that maps N(alpha, beta) onto Z.

    ``R[A] = (1 (x) V) A (1 (x) V^dag)`` with ``V = r_Y(-alpha) r_Z(-beta)``; the
    inverse uses ``V^dag``.  Works on stacks of matrices (``...x4x4``).
    """
    v = _frame_local(alpha, beta)
    if inverse:
        v = v.conj().T
    big = np.kron(np.eye(2), v)
    return big @ a @ big.conj().T


def _unit(v: np.ndarray) -> tuple[float, np.ndarray]:
    n = float(np.linalg.norm(v))
    if n == 0.0:
        raise DegenerateDirectionError("zero-norm Pauli direction")
    return n, v / n


def _rotate_vector(alpha: float, beta: float, v: np.ndarray) -> np.ndarray:
    op = v[0] * X + v[1] * Y + v[2] * Z
    u = _frame_local(alpha, beta)
    r = u @ op @ u.conj().T
    return np.real([np.trace(r @ P) / 2 for P in (X, Y, Z)])


def to_polar(c: CRCoefficients) -> CRPolarForm:
    """Polar form of the CR coefficients.

    Raises:
        DegenerateDirectionError: the ZN or IN' vector vanishes.
    """
    nu_zn, n = _unit(np.array([c.zx, c.zy, c.zz], dtype=float))
    nu_in, n_p = _unit(np.array([c.ix, c.iy, c.iz], dtype=float))
    alpha = float(np.arccos(np.clip(n[2], -1.0, 1.0)))
    beta = float(np.arctan2(n[1], n[0]))
    w = _rotate_vector(alpha, beta, n_p)
    delta_p = float(np.arccos(np.clip(w[2], -1.0, 1.0)))
    gamma = float(np.arctan2(w[1], w[0]))
    return CRPolarForm(nu_zn, nu_in, float(c.zi), alpha, beta, delta_p, gamma)


def from_polar(p: CRPolarForm) -> CRCoefficients:
    n = np.array([np.sin(p.alpha) * np.cos(p.beta), np.sin(p.alpha) * np.sin(p.beta), np.cos(p.alpha)])
    w = np.array([np.sin(p.delta_p) * np.cos(p.gamma), np.sin(p.delta_p) * np.sin(p.gamma), np.cos(p.delta_p)])
    # undo the frame rotation: V^dag W V
    op = w[0] * X + w[1] * Y + w[2] * Z
    u = _frame_local(p.alpha, p.beta)
    r = u.conj().T @ op @ u
    n_p = np.real([np.trace(r @ P) / 2 for P in (X, Y, Z)])
    zx, zy, zz = p.nu_zn * n
    ix, iy, iz = p.nu_in * n_p
    return CRCoefficients(zx, zy, zz, ix, iy, iz, p.nu_zi)


def planted_params(c: CRCoefficients) -> CRModelParams:
    """Ansatz parameters implied by the Hamiltonian, with zero edge phases."""
    p = to_polar(c)
    return CRModelParams(
        alpha=p.alpha, beta=p.beta, gamma=p.gamma, delta=p.delta,
        nu_zn=p.nu_zn, nu_in=p.nu_in, nu_zi=p.nu_zi,
    )


def _w_integrand(s, nu_zn, nu_in, gamma):
    c = np.cos(nu_zn * s)
    return c * np.cos(gamma + nu_in * s), c * np.sin(gamma + nu_in * s)


def _expm1_over(x, t):
    # (exp(i x t) - 1) / (i x), stable as x -> 0
    return t * np.exp(0.5j * x * t) * np.sinc(x * t / (2 * np.pi))


def w_gamma(t, nu_zn: float, nu_in: float, gamma: float, mode: str = "integral"):
    """Components ``(w_X, w_Y)`` of the first-order transverse correction.

    Modes:
        ``"quadrature"``: adaptive quadrature of
            ``int_0^t cos(nu_zn s) (cos(gamma + nu_in s), sin(gamma + nu_in s)) ds``.
        ``"integral"``: the same definite integral in closed form (vectorized in t).
        ``"closed_form"``: the published antiderivative with ``nu(+-) = nu_zn +- nu_in``.
            Note it is not zero at ``t = 0``.  Falls back to quadrature when
            ``|nu(-)|`` is below ``1e-6 |nu(+)|``.

    Raises:
        ValueError: ``nu(+) == 0`` in closed-form mode, or unknown mode.
    """
    if mode not in W_MODES:
        raise ValueError(f"unknown W mode {mode!r}; expected one of {W_MODES}")
    nu_p = nu_zn + nu_in
    nu_m = nu_zn - nu_in
    if mode == "closed_form":
        if nu_p == 0:
            raise ValueError("degenerate: nu_zn + nu_in == 0")
        if abs(nu_m) <= DEGENERATE_EPS * abs(nu_p):
            mode = "quadrature"
        else:
            t = np.asarray(t, dtype=float)
            wx = (np.sin(nu_p * t + gamma) / (2 * nu_p) + np.sin(nu_m * t + gamma) / (2 * nu_m)
                  - nu_in * np.sin(gamma) / (nu_p * nu_m))
            wy = (-np.cos(nu_p * t + gamma) / (2 * nu_p) - np.cos(nu_m * t + gamma) / (2 * nu_m)
                  + nu_in * np.cos(gamma) / (nu_p * nu_m))
            return wx, wy
    if mode == "quadrature":
        t_arr = np.asarray(t, dtype=float)
        out = np.empty(t_arr.shape + (2,))
        for idx, tv in np.ndenumerate(t_arr):
            for k in range(2):
                out[idx + (k,)] = integrate.quad(
                    lambda s: _w_integrand(s, nu_zn, nu_in, gamma)[k],
                    0.0, float(tv), epsabs=1e-12, epsrel=1e-10, limit=500,
                )[0]
        if t_arr.ndim == 0:
            return float(out[0]), float(out[1])
        return out[..., 0], out[..., 1]
    # cos(a s) e^{i(g + b s)} = (e^{i(g + (b+a)s)} + e^{i(g + (b-a)s)}) / 2
    t = np.asarray(t, dtype=float)
    z = 0.5 * np.exp(1j * gamma) * (_expm1_over(nu_in + nu_zn, t) + _expm1_over(nu_in - nu_zn, t))
    return z.real, z.imag


def model_unitary(theta: CRModelParams, t, w_mode: str = "integral") -> np.ndarray:
    """Ansatz propagator ``U(theta, t)``; ``t`` may be an array (returns ``...x4x4``).

    ``R^-1[ exp(-i delta I W(t)) exp(-i(nu_zn t + phi_zz) ZZ)
    exp(-i(nu_in t + phi_iz) IZ) exp(-i(nu_zi t + phi_zi) ZI) ]``.
    The transverse factor is exponentiated exactly, so the result is unitary.
    """
    t = np.asarray(t, dtype=float)
    th_zz = theta.nu_zn * t + theta.phi_zz
    th_iz = theta.nu_in * t + theta.phi_iz
    th_zi = theta.nu_zi * t + theta.phi_zi
    # diagonal of exp(-i(th_zz ZZ + th_iz IZ + th_zi ZI)) over |00>,|01>,|10>,|11>
    zz = np.array([1, -1, -1, 1])
    iz = np.array([1, -1, 1, -1])
    zi = np.array([1, 1, -1, -1])
    diag = np.exp(-1j * (th_zz[..., None] * zz + th_iz[..., None] * iz + th_zi[..., None] * zi))
    wx, wy = w_gamma(t, theta.nu_zn, theta.nu_in, theta.gamma, w_mode)
    wx = np.asarray(wx)
    wy = np.asarray(wy)
    bx, by = theta.delta * wx, theta.delta * wy
    ang = np.hypot(bx, by)
    safe = np.where(ang > 0, ang, 1.0)
    nx, ny = bx / safe, by / safe
    c, s = np.cos(ang), np.sin(ang)
    # exp(-i ang (nx X + ny Y)) on the target
    u1 = np.empty(t.shape + (2, 2), dtype=complex)
    u1[..., 0, 0] = c
    u1[..., 1, 1] = c
    u1[..., 0, 1] = -1j * s * (nx - 1j * ny)
    u1[..., 1, 0] = -1j * s * (nx + 1j * ny)
    v = _frame_local(theta.alpha, theta.beta)
    left = np.einsum("ij,...jk->...ik", v.conj().T, u1)  # V^dag u1
    out = np.zeros(t.shape + (4, 4), dtype=complex)
    for blk in range(2):
        sl = slice(2 * blk, 2 * blk + 2)
        d = diag[..., sl]
        # block = V^dag u1 diag(d) V
        out[..., sl, sl] = np.einsum("...ij,...j,jk->...ik", left, d, v)
    return out


def perturbation_validity(c: CRCoefficients, t_grid, w_mode: str = "integral") -> list[float]:
    """Infidelity of the ansatz (planted parameters, zero phases) vs the exact propagator."""
    theta = planted_params(c)
    out = []
    for t in t_grid:
        u_exact = exact_propagator(c, t)
        u_model = model_unitary(theta, float(t), w_mode)
        out.append(1.0 - trace_fidelity(u_exact, u_model))
    return out
