"""Unitary process tomography (UPT) of crude CR pulses.

A near-unitary channel is probed with the four UIC states |00>, |01>, |10>,
|++>; each output is reconstructed by Pauli state tomography and the CR
ansatz is fitted to the four images.
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field
from itertools import product
from typing import Sequence

import numpy as np
from scipy.optimize import minimize
from scipy.stats import qmc

from .cr import ANGLE_PARAMS, PARAM_NAMES, CRModelParams, model_unitary, w_gamma
from .device import (
    BASES, Circuit, CrudeCR, Local, MeasurementRecord, VirtualDevice, mitigate,
)
from .su4 import PAULI, X, ry, rz, trace_fidelity
from .weyl import canonical_gate, cartan_coords, entangling_power

SETTINGS = tuple(product(BASES, BASES))
PROBE_LABELS = ("00", "01", "10", "++")
PHASE_FREE = ("alpha", "beta", "gamma", "delta", "phi_zz", "phi_iz", "phi_zi")
_PERIODIC = {"beta", "gamma", "phi_zz", "phi_iz", "phi_zi"}


@dataclass(frozen=True)
class UicProbe:
    index: int
    state: np.ndarray = field(compare=False)

    @property
    def label(self) -> str:
        return PROBE_LABELS[self.index]


def _probe_states() -> np.ndarray:
    s = np.zeros((4, 4), dtype=complex)
    s[0, 0] = s[1, 1] = s[2, 2] = 1.0
    s[:, 3] = 0.5
    return s


#: Probe kets as columns, in probe order.
PROBE_MATRIX = _probe_states()
UIC_PROBES = tuple(UicProbe(i, PROBE_MATRIX[:, i].copy()) for i in range(4))


def probe_preparation(index: int) -> tuple:
    """Local gates preparing probe ``index`` from |00>."""
    return (
        (),
        (Local(1, X),),
        (Local(0, X),),
        (Local(0, ry(np.pi / 2)), Local(1, ry(np.pi / 2))),
    )[index]


def upt_circuits(channel: Sequence) -> list[Circuit]:
    """The 36 circuits of one UPT: 4 probes x 9 Pauli settings, probe-major."""
    channel = tuple(channel)
    return [Circuit(probe_preparation(i) + channel, s) for i in range(4) for s in SETTINGS]


# ---------------------------------------------------------------- state tomography

_SIGN = {"I": np.array([1, 1]), "Z": np.array([1, -1])}


def pauli_expectations(records: Sequence[MeasurementRecord], confusion=None, mitigation: str = "inverse") -> dict:
    """Two-qubit Pauli expectation values, averaged over compatible settings."""
    by_setting = {r.setting: r for r in records}
    missing = [s for s in SETTINGS if s not in by_setting]
    if missing:
        raise ValueError(f"missing measurement settings {missing}")
    freqs = {}
    for s in SETTINGS:
        f = by_setting[s].frequencies()
        freqs[s] = f if confusion is None else mitigate(f, confusion, mitigation)
    out = {}
    for p, q in product("IXYZ", repeat=2):
        vals = []
        sign = np.kron(_SIGN["I" if p == "I" else "Z"], _SIGN["I" if q == "I" else "Z"])
        for s in SETTINGS:
            if (p == "I" or s[0] == p) and (q == "I" or s[1] == q):
                vals.append(float(sign @ freqs[s]))
        out[p + q] = float(np.mean(vals))
    return out


def _simplex_projection(v: np.ndarray) -> np.ndarray:
    # Euclidean projection onto the probability simplex (water-filling)
    u = np.sort(v)[::-1]
    css = np.cumsum(u)
    k = np.nonzero(u - (css - 1) / np.arange(1, len(v) + 1) > 0)[0][-1]
    tau = (css[k] - 1) / (k + 1)
    return np.clip(v - tau, 0.0, None)


def project_density(m: np.ndarray) -> np.ndarray:
    """Nearest PSD, trace-one matrix via eigenvalue projection onto the simplex."""
    h = 0.5 * (m + m.conj().T)
    w, v = np.linalg.eigh(h)
    w = _simplex_projection(w)
    rho = (v * w) @ v.conj().T
    return rho / np.real(np.trace(rho))


def state_tomography(records: Sequence[MeasurementRecord], confusion=None, mitigation: str = "inverse") -> np.ndarray:
    """Linear-inversion estimate from the nine Pauli settings, projected to a state."""
    ev = pauli_expectations(records, confusion, mitigation)
    rho = sum(ev[k] * np.kron(PAULI[k[0]], PAULI[k[1]]) for k in ev) / 4
    return project_density(rho)


# ---------------------------------------------------------------- figures of merit


def fitness_unitary(u: np.ndarray, rhos: Sequence[np.ndarray], probes: np.ndarray = PROBE_MATRIX) -> float:
    """``|1/4 sum_i tr[rho_i U|u_i><u_i|U^dag]|^2`` for one or a stack of unitaries."""
    psi = np.asarray(u) @ probes
    ov = np.einsum("...ji,ijk,...ki->...i", psi.conj(), np.asarray(rhos), psi).real
    return np.mean(ov, axis=-1) ** 2


def fitness(theta: CRModelParams, t, rhos, w_mode: str = "integral", probes: np.ndarray = PROBE_MATRIX):
    """UPT fitness of the ansatz at time ``t`` against the probe images ``rhos``."""
    return fitness_unitary(model_unitary(theta, t, w_mode), rhos, probes)


@dataclass(frozen=True)
class TomographyErrors:
    eps_f: float
    eps_p: float
    eps_u: float


def upt_errors(rhos, theta: CRModelParams, t: float, corrected: bool = False, w_mode: str = "integral") -> TomographyErrors:
    """Fitness, purity and unitarity errors.

    The unitarity error compares ``tr[rho_i rho_3]`` with 1/2, or with 1/4
    (the overlap of the UIC probes, which a unitary channel preserves) when
    ``corrected`` is set.
    """
    ref = 0.25 if corrected else 0.5
    rhos = np.asarray(rhos)
    eps_f = 1.0 - float(fitness(theta, t, rhos, w_mode))
    eps_p = float(np.mean([1.0 - np.real(np.trace(r @ r)) for r in rhos]))
    eps_u = float(np.mean([abs(ref - np.real(np.trace(rhos[i] @ rhos[3]))) for i in range(3)]))
    return TomographyErrors(max(eps_f, 0.0), max(eps_p, 0.0), eps_u)


# ---------------------------------------------------------------- unitary reconstruction


def _top_eigvec(rho: np.ndarray) -> np.ndarray:
    w, v = np.linalg.eigh(rho)
    return v[:, -1]


def _polar(m: np.ndarray) -> np.ndarray:
    u, _, vh = np.linalg.svd(m, full_matrices=False)
    return u @ vh


def reconstruct_unitary(rhos: Sequence[np.ndarray]) -> np.ndarray:
    """Unitary (up to global phase) whose probe images best match ``rhos``.

    Columns 0-2 are the dominant eigenvectors of the first three images, the
    last column completes the basis, and the relative phases come from the
    image of |++>.
    """
    cols = np.column_stack([_top_eigvec(r) for r in rhos[:3]])
    q, _ = np.linalg.qr(np.column_stack([cols, np.eye(4)]))
    last = q[:, 3]
    basis = np.column_stack([_polar(cols), last])
    psi = _top_eigvec(rhos[3])
    ov = basis.conj().T @ psi
    phases = np.exp(1j * np.angle(np.where(np.abs(ov) > 1e-12, ov, 1.0)))
    return _polar(basis * phases)


@dataclass(frozen=True)
class RawCRUnitary:
    """Model-free description of a controlled-type two-qubit unitary.

    ``zz``, ``iz``, ``zi`` are the phase-triple exponents in the N frame,
    ``transverse = delta * (w_X + i w_Y)`` of the target correction.
    """

    alpha: float
    beta: float
    zz: float
    iz: float
    zi: float
    transverse: complex

    def bloch(self) -> np.ndarray:
        return _bloch(self.alpha, self.beta)


def _bloch(alpha, beta) -> np.ndarray:
    return np.array([np.sin(alpha) * np.cos(beta), np.sin(alpha) * np.sin(beta), np.cos(alpha)])


def _lattice_reduce(triple: np.ndarray, target: np.ndarray) -> np.ndarray:
    """Representative of ``triple`` closest to ``target``.

    Phase triples are equivalent modulo pi in each entry and modulo the joint
    shift (pi/2, pi/2, pi/2); both leave the ansatz unchanged.
    """
    best, best_dist = None, np.inf
    for m in (0, 1):
        cand = triple + m * np.pi / 2
        cand = cand - np.pi * np.round((cand - target) / np.pi)
        dist = np.sum((cand - target) ** 2)
        if dist < best_dist:
            best, best_dist = cand, dist
    return best


def decompose_cr_unitary(u: np.ndarray, n_ref=(1.0, 0.0, 0.0), phase_ref=(0.0, 0.0, 0.0)) -> RawCRUnitary:
    """Solve ``u = g R^-1[U1 exp(-i(zz ZZ + iz IZ + zi ZI))]`` for the ansatz ingredients.

    Args:
        u: Controlled-type unitary (block diagonal in the control basis).
        n_ref: Bloch vector selecting the N branch (N and -N are both valid).
        phase_ref: Phase triple selecting the lattice representative.
    """
    u0, u1 = _polar(u[:2, :2]), _polar(u[2:, 2:])
    w, v = np.linalg.eig(u0.conj().T @ u1)
    blochs = []
    for k in range(2):
        vec = v[:, k] / np.linalg.norm(v[:, k])
        rho = np.outer(vec, vec.conj())
        blochs.append(np.real([np.trace(rho @ P) for P in (PAULI["X"], PAULI["Y"], PAULI["Z"])]))
    k = int(np.argmax([b @ np.asarray(n_ref) for b in blochs]))
    n = blochs[k] / np.linalg.norm(blochs[k])
    alpha = float(np.arccos(np.clip(n[2], -1, 1)))
    beta = float(np.arctan2(n[1], n[0]))
    s_plus = np.angle(w[k]) / 2  # zi + zz  (mod pi)
    s_minus = np.angle(w[1 - k]) / 2  # zi - zz (mod pi)
    zz = (s_plus - s_minus) / 2
    zi = (s_plus + s_minus) / 2
    vf = ry(-alpha) @ rz(-beta)
    q = vf @ u0 @ vf.conj().T
    g = np.sqrt(np.linalg.det(q) * np.exp(2j * zi))
    m = q * np.exp(1j * zi) / g
    p, qq = m[0, 0], m[0, 1]
    phi = -np.angle(p)
    ang = float(np.arccos(np.clip(abs(p), 0.0, 1.0)))
    chi = phi - np.angle(1j * qq) if abs(qq) > 1e-14 else 0.0
    iz = phi - zz
    zz, iz, zi = _lattice_reduce(np.array([zz, iz, zi]), np.asarray(phase_ref, dtype=float))
    return RawCRUnitary(alpha, beta, float(zz), float(iz), float(zi), complex(ang * np.exp(1j * chi)))


def params_from_raw(raw: RawCRUnitary, t: float, nu: tuple[float, float, float],
                    fallback: CRModelParams | None = None, w_mode: str = "integral") -> CRModelParams:
    """Ansatz parameters reproducing ``raw`` at time ``t`` for given rates ``nu``."""
    nu_zn, nu_in, nu_zi = nu
    wx, wy = w_gamma(float(t), nu_zn, nu_in, 0.0, w_mode)
    w0 = complex(wx, wy)
    if abs(w0) > 1e-9 and abs(raw.transverse) > 0:
        delta = abs(raw.transverse) / abs(w0)
        gamma = float(np.angle(raw.transverse) - np.angle(w0))
    elif fallback is not None:
        delta, gamma = fallback.delta, fallback.gamma
    else:
        delta, gamma = 0.0, 0.0
    return CRModelParams(
        alpha=raw.alpha, beta=raw.beta, gamma=gamma, delta=delta,
        nu_zn=nu_zn, nu_in=nu_in, nu_zi=nu_zi,
        phi_zz=raw.zz - nu_zn * t, phi_iz=raw.iz - nu_in * t, phi_zi=raw.zi - nu_zi * t,
    ).wrapped()


# ---------------------------------------------------------------- optimization


@dataclass(frozen=True)
class OptimizerConfig:
    """Multi-start bounded quasi-Newton search on the fitness.

    ``nu_rel_bound`` sets the rate bounds to ``(1 +- nu_rel_bound) * init``;
    ``delta_max`` caps the transverse strength (None: the IN' rate bound).
    """

    restarts: int = 16
    maxiter: int = 500
    ftol: float = 1e-10
    nu_rel_bound: float = 0.5
    delta_max: float | None = None
    w_mode: str = "integral"


@dataclass
class FitDiagnostics:
    restarts: int
    iterations: int
    converged: bool
    best_restart: int


def _bounds(init: CRModelParams, free: Sequence[str], cfg: OptimizerConfig) -> np.ndarray:
    out = []
    for name in free:
        x = getattr(init, name)
        if name == "alpha":
            out.append((0.0, np.pi))
        elif name in _PERIODIC:
            out.append((x - np.pi, x + np.pi))
        elif name == "delta":
            top = cfg.delta_max if cfg.delta_max is not None else (1 + cfg.nu_rel_bound) * abs(init.nu_in)
            out.append((0.0, max(top, 2 * x, 1e-12)))
        else:
            span = cfg.nu_rel_bound * abs(x) if x != 0 else 1e-3
            out.append((x - span, x + span))
    return np.array(out, dtype=float)


def fit_model(data: Sequence[tuple[float, np.ndarray]], init: CRModelParams,
              free: Sequence[str] = PARAM_NAMES, cfg: OptimizerConfig = OptimizerConfig(),
              seed=None, objective=None) -> tuple[CRModelParams, float, FitDiagnostics]:
    """Maximize the mean UPT fitness over ``(t, rhos)`` pairs.

    Restart 0 starts at ``init``; the others are Latin-hypercube samples of
    the bounds.  Only parameters named in ``free`` move.

    Returns:
        Best parameters, their objective value and optimizer diagnostics.
    """
    free = [n for n in PARAM_NAMES if n in free]
    base = init.as_array()
    idx = [PARAM_NAMES.index(n) for n in free]
    bounds = _bounds(init, free, cfg)
    lo, span = bounds[:, 0], bounds[:, 1] - bounds[:, 0]

    if objective is None:
        ts = np.array([t for t, _ in data], dtype=float)
        rho_stack = np.array([r for _, r in data])
        psi_probe = PROBE_MATRIX

        def objective(theta):
            u = model_unitary(theta, ts, cfg.w_mode)
            psi = u @ psi_probe
            ov = np.einsum("nji,nijk,nki->ni", psi.conj(), rho_stack, psi).real
            return float(np.mean(np.mean(ov, axis=1) ** 2))

    def unpack(z):
        full = base.copy()
        full[idx] = lo + span * z
        return CRModelParams.from_array(full)

    def neg(z):
        return -objective(unpack(z))

    x0 = np.clip((base[idx] - lo) / span, 0.0, 1.0)
    starts = [x0]
    if cfg.restarts > 1:
        starts += list(qmc.LatinHypercube(d=len(free), seed=np.random.default_rng(seed)).random(cfg.restarts - 1))
    best = None
    iters = 0
    for k, z0 in enumerate(starts):
        res = minimize(neg, z0, method="L-BFGS-B", bounds=[(0.0, 1.0)] * len(free),
                       options={"maxiter": cfg.maxiter, "ftol": cfg.ftol * 1e-3, "gtol": 1e-12})
        iters += int(res.nit)
        if best is None or res.fun < best[0].fun - 1e-15:
            best = (res, k)
    res, k = best
    theta = unpack(res.x).wrapped()
    value = float(objective(theta))
    converged = bool(res.success) or value > 1 - cfg.ftol
    return theta, value, FitDiagnostics(len(starts), iters, converged, k)


# ---------------------------------------------------------------- UPT runs


@dataclass
class UptResult:
    """Outcome of one UPT: fitted parameters, fitness, errors and the probe images."""

    theta: CRModelParams
    t: float
    fitness: float
    errors: TomographyErrors
    rhos: np.ndarray = field(repr=False)
    diagnostics: FitDiagnostics | None = None

    def unitary(self, w_mode: str = "integral") -> np.ndarray:
        return model_unitary(self.theta, self.t, w_mode)

    def to_dict(self) -> dict:
        return {
            "params": params_to_dict(self.theta),
            "units": PARAM_UNITS,
            "t": self.t,
            "fitness": self.fitness,
            "errors": {"eps_f": self.errors.eps_f, "eps_p": self.errors.eps_p, "eps_u": self.errors.eps_u},
            "diagnostics": None if self.diagnostics is None else vars(self.diagnostics),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)


PARAM_UNITS = {n: ("pi" if n in ANGLE_PARAMS else "1/dt") for n in PARAM_NAMES}


def params_to_dict(theta: CRModelParams) -> dict:
    """Parameters in table order; angles in units of pi, rates in 1/dt."""
    return {n: (getattr(theta, n) / np.pi if n in ANGLE_PARAMS else getattr(theta, n)) for n in PARAM_NAMES}


def params_from_dict(d: dict) -> CRModelParams:
    return CRModelParams(**{n: (float(d[n]) * np.pi if n in ANGLE_PARAMS else float(d[n])) for n in PARAM_NAMES})


def tomography_images(records: Sequence[MeasurementRecord], confusion=None, mitigation: str = "inverse") -> np.ndarray:
    """Split 36 probe-major records into four reconstructed probe images."""
    if len(records) != 36:
        raise ValueError(f"a UPT needs 36 records, got {len(records)}")
    return np.array([state_tomography(records[9 * i:9 * i + 9], confusion, mitigation) for i in range(4)])


def identify(rhos: np.ndarray, t: float, prior: CRModelParams, opt: OptimizerConfig = OptimizerConfig(),
             seed=None, free: Sequence[str] = PHASE_FREE, corrected: bool = False) -> UptResult:
    """Fit the ansatz to probe images at a single time, rates held at ``prior``."""
    n_ref = _bloch(prior.alpha, prior.beta)
    ref = (prior.nu_zn * t + prior.phi_zz, prior.nu_in * t + prior.phi_iz, prior.nu_zi * t + prior.phi_zi)
    raw = decompose_cr_unitary(reconstruct_unitary(rhos), n_ref, ref)
    init = params_from_raw(raw, t, (prior.nu_zn, prior.nu_in, prior.nu_zi), prior, opt.w_mode)
    theta, value, diag = fit_model([(t, rhos)], init, free, opt, seed)
    if fitness(init, t, rhos, opt.w_mode) >= value:
        theta, value = init, float(fitness(init, t, rhos, opt.w_mode))
    errs = upt_errors(rhos, theta, t, corrected, opt.w_mode)
    return UptResult(theta, float(t), value, errs, rhos, diag)


def run_upt(device: VirtualDevice, channel: Sequence, t: float, prior: CRModelParams,
            opt: OptimizerConfig = OptimizerConfig(), seed=None, shots="default",
            mitigation: str = "inverse") -> UptResult:
    """Run the 36 UPT circuits of ``channel`` on the device and fit the ansatz."""
    ss = np.random.SeedSequence(seed) if not isinstance(seed, np.random.SeedSequence) else seed
    job_seed, fit_seed = ss.spawn(2)
    records = device.run(upt_circuits(channel), job_seed, shots)
    rhos = tomography_images(records, device.cfg.confusion, mitigation)
    return identify(rhos, t, prior, opt, fit_seed)


# ---------------------------------------------------------------- duration scans


@dataclass(frozen=True)
class ScanConfig:
    """Settings of a duration scan.

    ``anchors`` are extra short durations measured only to unwrap the fast ZI
    phase, which a coarse scan step would alias.
    """

    shots: int | None = 8192
    anchors: tuple[int, ...] = (16,)
    point_opt: OptimizerConfig = OptimizerConfig(restarts=1)
    joint_opt: OptimizerConfig = OptimizerConfig(restarts=16)
    n_ref: tuple[float, float, float] = (1.0, 0.0, 0.0)
    mitigation: str = "inverse"
    corrected_unitarity: bool = False


@dataclass(frozen=True)
class ScanRow:
    d: int
    a: float
    b: float
    c: float
    ep: float
    trace_fidelity: float
    errors: TomographyErrors


SCAN_COLUMNS = ("d", "a", "b", "c", "EP", "trace_fidelity", "eps_f", "eps_p", "eps_u")


@dataclass
class ScanResult:
    """Per-duration UPT outcomes of a scan plus the images used for fitting."""

    omega: float
    rows: list[ScanRow]
    points: list[UptResult] = field(repr=False)
    anchors: list[UptResult] = field(default_factory=list, repr=False)

    def __post_init__(self):
        ds = [r.d for r in self.rows]
        if any(b <= a for a, b in zip(ds, ds[1:])):
            raise ValueError("scan durations must be strictly increasing")

    def to_csv(self) -> str:
        """CSV with coordinates normalized by pi/2, as |c| >= |b| >= |a|."""
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(SCAN_COLUMNS)
        for r in self.rows:
            w.writerow([r.d] + [repr(float(x) + 0.0) for x in (
                r.a, r.b, r.c, r.ep, r.trace_fidelity, r.errors.eps_f, r.errors.eps_p, r.errors.eps_u)])
        return buf.getvalue()


def _scan_row(res: UptResult, w_mode: str) -> ScanRow:
    u = res.unitary(w_mode)
    coords = cartan_coords(u)
    a, b, c = coords.ascending()
    fid = trace_fidelity(u, canonical_gate((0.0, 0.0, c)))
    return ScanRow(int(round(res.t)), a / (np.pi / 2), b / (np.pi / 2), c / (np.pi / 2),
                   entangling_power(coords), float(fid), res.errors)


def duration_scan(device: VirtualDevice, omega: float, d_list: Sequence[int],
                  cfg: ScanConfig = ScanConfig(), seed=None) -> ScanResult:
    """UPT at every flat-top duration in ``d_list``, one 36-circuit job each.

    Per-point parameters are referred to the coarse regression rates, so the
    rows are directly comparable along the scan.
    """
    d_list = [int(d) for d in d_list]
    if any(b <= a for a, b in zip(d_list, d_list[1:])):
        raise ValueError("d_list must be strictly increasing")
    anchors = [a for a in cfg.anchors if a not in d_list]
    all_d = sorted(d_list + anchors)
    ss = np.random.SeedSequence(seed)
    seeds = dict(zip(all_d, ss.spawn(len(all_d))))
    images = {}
    for d in all_d:
        job_seed, _ = seeds[d].spawn(2)
        circ = [CrudeCR(device.cfg.envelope(omega, d))]
        records = device.run(upt_circuits(circ), job_seed, cfg.shots)
        images[d] = tomography_images(records, device.cfg.confusion, cfg.mitigation)
    raws = unwrap_raw(all_d, [reconstruct_unitary(images[d]) for d in all_d], cfg.n_ref)
    seed_theta, _ = regress_phases(all_d, raws)
    points, anchor_pts = [], []
    for d, raw in zip(all_d, raws):
        init = params_from_raw(raw, d, (seed_theta.nu_zn, seed_theta.nu_in, seed_theta.nu_zi),
                               seed_theta, cfg.point_opt.w_mode)
        theta, value, diag = fit_model([(d, images[d])], init, PHASE_FREE, cfg.point_opt, seeds[d].spawn(2)[1])
        res = UptResult(theta, float(d), value,
                        upt_errors(images[d], theta, d, cfg.corrected_unitarity, cfg.point_opt.w_mode),
                        images[d], diag)
        (points if d in d_list else anchor_pts).append(res)
    rows = [_scan_row(p, cfg.point_opt.w_mode) for p in points]
    return ScanResult(omega, rows, points, anchor_pts)


def unwrap_raw(ds: Sequence[float], unitaries: Sequence[np.ndarray], n_ref=(1.0, 0.0, 0.0)) -> list[RawCRUnitary]:
    """Decompose a duration series, following the phase triple continuously.

    Each point's lattice representative is chosen nearest to a linear
    extrapolation of the points before it; the first ZZ phase is taken in
    [-pi/4, pi/4].
    """
    out: list[RawCRUnitary] = []
    for i, (d, u) in enumerate(zip(ds, unitaries)):
        if not out:
            ref = np.zeros(3)
        elif len(out) == 1:
            ref = np.array([out[0].zz, out[0].iz, out[0].zi])
        else:
            tr = np.array([[r.zz, r.iz, r.zi] for r in out])
            x = np.asarray(ds[:i], dtype=float)
            coef = np.polyfit(x, tr, 1)
            ref = coef[0] * d + coef[1]
        nr = n_ref if not out else out[-1].bloch()
        out.append(decompose_cr_unitary(u, nr, ref))
    return out


@dataclass(frozen=True)
class PhaseRegression:
    slopes: tuple[float, float, float]
    intercepts: tuple[float, float, float]
    r2_zz: float


def regress_phases(ds: Sequence[float], raws: Sequence[RawCRUnitary]) -> tuple[CRModelParams, PhaseRegression]:
    """Linear fits of the unwrapped phase triple against duration.

    Returns a seed parameter set (angles from circular means of the per-point
    values) and the regression summary.
    """
    x = np.asarray(ds, dtype=float)
    tr = np.array([[r.zz, r.iz, r.zi] for r in raws])
    coef = np.polyfit(x, tr, 1)
    fit = np.outer(x, coef[0]) + coef[1]
    ss_res = np.sum((tr[:, 0] - fit[:, 0]) ** 2)
    ss_tot = np.sum((tr[:, 0] - tr[:, 0].mean()) ** 2)
    r2 = float(1 - ss_res / ss_tot) if ss_tot > 0 else 1.0
    n = np.mean([r.bloch() for r in raws], axis=0)
    n /= np.linalg.norm(n)
    alpha = float(np.arccos(np.clip(n[2], -1, 1)))
    beta = float(np.arctan2(n[1], n[0]))
    nu = tuple(float(s) for s in coef[0])
    # transverse strength and direction from the longest-duration points
    gammas, deltas = [], []
    for d, r in zip(x, raws):
        wx, wy = w_gamma(float(d), nu[0], nu[1], 0.0)
        w0 = complex(wx, wy)
        if abs(w0) > 1e-9 and abs(r.transverse) > 0:
            deltas.append(abs(r.transverse) / abs(w0))
            gammas.append(np.exp(1j * (np.angle(r.transverse) - np.angle(w0))))
    delta = float(np.median(deltas)) if deltas else 0.0
    gamma = float(np.angle(np.mean(gammas))) if gammas else 0.0
    theta = CRModelParams(alpha, beta, gamma, delta, *nu, *(float(c) for c in coef[1])).wrapped()
    return theta, PhaseRegression(nu, tuple(float(c) for c in coef[1]), r2)


@dataclass
class CoarseFit:
    theta: CRModelParams
    fitness: float
    regression: PhaseRegression
    diagnostics: FitDiagnostics


def coarse_fit(scan: ScanResult, opt: OptimizerConfig = OptimizerConfig(), seed=None) -> CoarseFit:
    """Joint ten-parameter fit over all scan points, seeded by the phase regression."""
    pts = sorted(scan.points + scan.anchors, key=lambda p: p.t)
    ds = [p.t for p in pts]
    raws = unwrap_raw(ds, [p.unitary(opt.w_mode) for p in pts])
    seed_theta, reg = regress_phases(ds, raws)
    theta, value, diag = fit_model([(p.t, p.rhos) for p in pts], seed_theta, PARAM_NAMES, opt, seed)
    return CoarseFit(theta, value, reg, diag)


# ---------------------------------------------------------------- fine fitting


def _target_rotation(wx: float, wy: float, delta: float, sign: float = -1.0) -> np.ndarray:
    """``exp(sign * i delta (w_X X + w_Y Y))`` on one qubit."""
    bx, by = delta * wx, delta * wy
    ang = np.hypot(bx, by)
    if ang == 0:
        return np.eye(2, dtype=complex)
    gen = (bx * PAULI["X"] + by * PAULI["Y"]) / ang
    return np.cos(ang) * np.eye(2) + sign * 1j * np.sin(ang) * gen


@dataclass(frozen=True)
class ExtractionLocals:
    """Single-qubit corrections around one CR pulse of flat top ``d``.

    ``pre`` acts on the target before the pulse; ``post_target`` and
    ``post_control`` act after it.  Together they map the ansatz unitary at
    ``d`` onto ``exp(-i (nu_zn d + phi_zz) ZZ)``.
    """

    d: int
    pre: np.ndarray
    post_target: np.ndarray
    post_control: np.ndarray


def extraction_locals(theta: CRModelParams, d: float, w_mode: str = "integral") -> ExtractionLocals:
    v = ry(-theta.alpha) @ rz(-theta.beta)
    wx, wy = w_gamma(float(d), theta.nu_zn, theta.nu_in, theta.gamma, w_mode)
    undo_w = _target_rotation(float(wx), float(wy), theta.delta, sign=+1.0)
    th_iz = theta.nu_in * d + theta.phi_iz
    th_zi = theta.nu_zi * d + theta.phi_zi
    post_t = rz(-2 * th_iz) @ undo_w @ v
    return ExtractionLocals(int(d), v.conj().T, post_t, rz(-2 * th_zi))


def sandwich(loc: ExtractionLocals, u_cr: np.ndarray) -> np.ndarray:
    """Unitary of ``post . u_cr . pre`` for the extraction locals."""
    pre = np.kron(I2_, loc.pre)
    post = np.kron(loc.post_control, loc.post_target)
    return post @ u_cr @ pre


I2_ = np.eye(2, dtype=complex)


def pseudo_identity_unitary(q: np.ndarray, xi: float, n: int) -> np.ndarray:
    """``(Qbar(xi) Q)^n`` with ``Qbar`` the target-flipped, xi-rotated copy of ``Q``."""
    k = np.kron(I2_, ry(np.pi) @ rz(xi))
    qbar = k @ q @ k.conj().T
    return np.linalg.matrix_power(qbar @ q, n)


def nominal_duration(theta: CRModelParams, angle: float, granularity: int = 1) -> int:
    """Flat-top duration putting the ZZ exponent at ``angle / 2``."""
    if theta.nu_zn == 0:
        raise ValueError("degenerate parameters: nu_zn == 0")
    raw = (angle / 2 - theta.phi_zz) / theta.nu_zn
    return int(granularity * round(raw / granularity))


def pseudo_identity_instructions(theta_t: CRModelParams, angle: float, xi: float, n: int,
                                 omega: float, cfg, w_mode: str = "integral") -> list:
    """Device instructions of the pseudo-identity sequence built from ``theta_t``."""
    d = nominal_duration(theta_t, angle, cfg.granularity)
    loc = extraction_locals(theta_t, d, w_mode)
    pulse = CrudeCR(cfg.envelope(omega, d))
    q = [Local(1, loc.pre), pulse, Local(1, loc.post_target), Local(0, loc.post_control)]
    k_in = ry(np.pi) @ rz(xi)
    qbar = [Local(1, k_in.conj().T)] + q + [Local(1, k_in)]
    return (q + qbar) * n


@dataclass
class FineFitResult:
    theta: CRModelParams
    objective: float
    initial_objective: float
    angles: tuple[float, ...]
    xis: np.ndarray
    observed: dict = field(repr=False)
    success: bool = True


def fine_fit(device: VirtualDevice, theta_t: CRModelParams, angles=(np.pi / 4, 3 * np.pi / 8, np.pi / 2),
             m: int = 8, n: int = 5, omega: float = 0.6, free: Sequence[str] = ("gamma", "delta"),
             shots=None, seed=None, w_mode: str = "integral", mitigation: str = "inverse") -> FineFitResult:
    """Refine ``theta_t`` from UPTs of amplified pseudo-identity sequences.

    For each angle and ``xi_j = 2 pi j / m`` (``j = 0..m``) the sequence
    ``(Qbar Q)^n`` is identified model-free on the device.  The ansatz then
    replaces the device pulse inside the same sequence, and the mean overlap
    ``|tr[pred^dag U_obs]| / 4`` is maximized with SLSQP over ``free``.
    """
    if abs(theta_t.nu_zn) < 1e-12:
        raise ValueError("degenerate coarse estimate: nu_zn ~ 0")
    cfg = device.cfg
    xis = 2 * np.pi * np.arange(m + 1) / m
    ss = np.random.SeedSequence(seed)
    observed = {}
    durations = {}
    for angle, s_angle in zip(angles, ss.spawn(len(angles))):
        durations[angle] = nominal_duration(theta_t, angle, cfg.granularity)
        obs = []
        for xi, s in zip(xis, s_angle.spawn(len(xis))):
            inst = pseudo_identity_instructions(theta_t, angle, xi, n, omega, cfg, w_mode)
            records = device.run(upt_circuits(inst), s, shots)
            obs.append(reconstruct_unitary(tomography_images(records, cfg.confusion, mitigation)))
        observed[angle] = np.array(obs)
    locs = {a: extraction_locals(theta_t, durations[a], w_mode) for a in angles}
    ds = np.array([durations[a] for a in angles], dtype=float)

    def objective(theta):
        u_cr = model_unitary(theta, ds, w_mode)
        total = 0.0
        for k, a in enumerate(angles):
            q = sandwich(locs[a], u_cr[k])
            vals = [abs(np.vdot(pseudo_identity_unitary(q, xi, n), u)) / 4 for xi, u in zip(xis, observed[a])]
            total += np.mean(vals)
        return total / len(angles)

    free = [p for p in PARAM_NAMES if p in free]
    idx = [PARAM_NAMES.index(p) for p in free]
    base = theta_t.as_array()
    bounds = _bounds(theta_t, free, OptimizerConfig(w_mode=w_mode))
    lo, span = bounds[:, 0], bounds[:, 1] - bounds[:, 0]

    def unpack(z):
        full = base.copy()
        full[idx] = lo + span * z
        return CRModelParams.from_array(full)

    x0 = (base[idx] - lo) / span
    res = minimize(lambda z: 1.0 - objective(unpack(z)), x0, method="SLSQP",
                   bounds=[(0.0, 1.0)] * len(free), options={"ftol": 1e-14, "maxiter": 500})
    theta = unpack(res.x).wrapped()
    return FineFitResult(theta, float(objective(theta)), float(objective(theta_t)), tuple(angles), xis,
                         observed, bool(res.success))
