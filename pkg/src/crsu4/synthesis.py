"""Continuous R_ZZ(theta) basis gates from crude CR pulses and SU(4) compilation.

An R_ZZ(theta) block is one CR pulse whose flat-top duration is set by the
inverse scaling function, wrapped in single-qubit corrections that strip the
unwanted parts of the pulse propagator.  Arbitrary two-qubit targets use one
block per non-zero Cartan coordinate.
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .cr import CRModelParams
from .device import (
    CrudeCR, DeviceConfig, GaussianSquareEnvelope, Local, VirtualDevice, VirtualZ, circuit_unitary,
)
from .su4 import X, check_unitary, pauli_rotation, rx, ry, rz, trace_fidelity
from .tomography import OptimizerConfig, extraction_locals, run_upt
from .weyl import COORD_ATOL, kak_decompose

SX = np.array([[1 + 1j, 1 - 1j], [1 - 1j, 1 + 1j]]) / 2
_I2 = np.eye(2, dtype=complex)
#: Target-qubit locals rotating ZZ onto XX / YY (``L ZZ L^dag``), and their signs.
_CONJ = {
    ("X", +1): ry(np.pi / 2), ("X", -1): ry(-np.pi / 2),
    ("Y", +1): rx(-np.pi / 2), ("Y", -1): rx(np.pi / 2),
}


class SmallAngleError(ValueError):
    """The requested angle lies below the smallest single-pulse angle."""


# ---------------------------------------------------------------- scaling


@dataclass(frozen=True)
class ScalingFunction:
    """``theta(d) = 2 (nu_zn d + phi_zz)`` at amplitude ``omega``."""

    theta: CRModelParams
    omega: float = 0.6
    granularity: int = 16
    d_min: int = 0

    def __post_init__(self):
        if self.theta.nu_zn == 0:
            raise ValueError("scaling function needs nu_zn != 0")

    def angle(self, d: float) -> float:
        return float(2 * (self.theta.nu_zn * d + self.theta.phi_zz))

    @property
    def theta_min(self) -> float:
        return self.angle(self.d_min)


def invert_scaling(s: ScalingFunction, theta: float) -> tuple[int, float]:
    """Flat-top duration for ``R_ZZ(theta)`` and the quantization residual.

    Raises:
        SmallAngleError: ``theta`` is below ``s.theta_min``; use the two-pulse path.
    """
    raw = (theta / 2 - s.theta.phi_zz) / s.theta.nu_zn
    if raw < s.d_min - 0.5 * s.granularity:
        raise SmallAngleError(f"theta={theta:.6g} below single-pulse minimum {s.theta_min:.6g}")
    d = max(s.d_min, int(s.granularity * round(raw / s.granularity)))
    return d, float(theta - s.angle(d))


# ---------------------------------------------------------------- sequences


@dataclass
class GateSequence:
    """Device instructions (first acts first) with bookkeeping."""

    instructions: list
    target: np.ndarray | None = None
    achieved: dict = field(default_factory=dict)

    @property
    def n_cr(self) -> int:
        return sum(isinstance(i, CrudeCR) for i in self.instructions)

    @property
    def n_local(self) -> int:
        return sum(isinstance(i, Local) for i in self.instructions)

    def unitary(self, cfg: DeviceConfig) -> np.ndarray:
        return circuit_unitary(cfg, self.instructions)

    def __add__(self, other: "GateSequence") -> "GateSequence":
        return GateSequence(self.instructions + other.instructions, None, {**self.achieved, **other.achieved})


def rzz_ideal(theta: float) -> np.ndarray:
    return np.diag(np.exp(-0.5j * theta * np.array([1, -1, -1, 1])))


@dataclass(frozen=True)
class AngleCalibration:
    """Duration and locally valid parameters for one R_ZZ angle."""

    d: int
    theta: CRModelParams
    angle: float


class Calibrator:
    """Per-angle calibration of R_ZZ blocks.

    Without a device the scaling-function parameters are used everywhere.
    With a device, each duration is identified by UPT and the parameters at
    that duration replace the global fit; the duration is nudged until the
    realized angle is the closest one the granularity allows.
    """

    def __init__(self, scaling: ScalingFunction, device: VirtualDevice | None = None,
                 shots=None, seed: int = 0, max_iter: int = 4):
        self.scaling = scaling
        self.device = device
        self.shots = shots
        self.seed = seed
        self.max_iter = max_iter
        self._by_d: dict[int, CRModelParams] = {}

    def params_at(self, d: int) -> CRModelParams:
        if self.device is None:
            return self.scaling.theta
        if d not in self._by_d:
            pulse = [CrudeCR(self.device.cfg.envelope(self.scaling.omega, d))]
            res = run_upt(self.device, pulse, d, self.scaling.theta, OptimizerConfig(restarts=1),
                          seed=[self.seed, d], shots=self.shots)
            self._by_d[d] = res.theta
        return self._by_d[d]

    def calibrate(self, angle: float) -> AngleCalibration:
        s = self.scaling
        d, _ = invert_scaling(s, angle)
        seen = set()
        for _ in range(self.max_iter):
            th = self.params_at(d)
            achieved = 2 * (th.nu_zn * d + th.phi_zz)
            step = s.granularity * round((angle - achieved) / (2 * th.nu_zn) / s.granularity)
            seen.add(d)
            if step == 0 or d + step < s.d_min or d + step in seen:
                break
            d += step
        th = self.params_at(d)
        return AngleCalibration(d, th, float(2 * (th.nu_zn * d + th.phi_zz)))


def _as_calibrator(s: ScalingFunction, calibrator: Calibrator | None) -> Calibrator:
    return calibrator if calibrator is not None else Calibrator(s)


def extract_rzz(theta_d: CRModelParams, angle: float, s: ScalingFunction, d: int | None = None,
                cfg: DeviceConfig | None = None) -> GateSequence:
    """One-pulse ``R_ZZ`` block: target frame change, CR pulse, corrections.

    The realized angle is ``2 (nu_zn d + phi_zz)`` of ``theta_d``; its offset
    from ``angle`` is the quantization residual recorded in ``achieved``.
    """
    if d is None:
        d, _ = invert_scaling(s, angle)
    if d < 0:
        raise ValueError("negative duration")
    loc = extraction_locals(theta_d, d)
    env = cfg.envelope(s.omega, d) if cfg is not None else _envelope(s, d)
    realized = 2 * (theta_d.nu_zn * d + theta_d.phi_zz)
    zi = 2 * (theta_d.nu_zi * d + theta_d.phi_zi)
    inst = [Local(1, loc.pre), CrudeCR(env), Local(1, loc.post_target), VirtualZ(0, -zi)]
    return GateSequence(inst, rzz_ideal(angle), {"angles": [realized], "residual": angle - realized})


def _envelope(s: ScalingFunction, d: int) -> GaussianSquareEnvelope:
    return GaussianSquareEnvelope(s.omega, int(d))


def rzz_block(angle: float, s: ScalingFunction, calibrator: Calibrator | None = None,
              cfg: DeviceConfig | None = None) -> GateSequence:
    """``R_ZZ(angle)`` by the cheapest route: direct, sign-flipped or two-pulse."""
    cal = _as_calibrator(s, calibrator)
    if abs(angle) < s.theta_min:
        return small_angle_rzz(angle, s, cal, cfg)
    if angle >= 0:
        c = cal.calibrate(angle)
        return extract_rzz(c.theta, angle, s, c.d, cfg)
    # (X (x) I) R_ZZ(t) (X (x) I) = R_ZZ(-t)
    c = cal.calibrate(-angle)
    core = extract_rzz(c.theta, -angle, s, c.d, cfg)
    seq = GateSequence([Local(0, X)] + core.instructions + [Local(0, X)], rzz_ideal(angle))
    seq.achieved = {"angles": [-a for a in core.achieved["angles"]], "residual": -core.achieved["residual"]}
    return seq


def small_angle_rzz(angle: float, s: ScalingFunction, calibrator: Calibrator | None = None,
                    cfg: DeviceConfig | None = None) -> GateSequence:
    """``R_ZZ(c1) (X(x)I) R_ZZ(c2) (X(x)I)`` with ``c1 - c2 = angle``, both reachable."""
    cal = _as_calibrator(s, calibrator)
    base = s.theta_min
    c1, c2 = (angle + base, base) if angle >= 0 else (base, base - angle)
    k1, k2 = cal.calibrate(c1), cal.calibrate(c2)
    b1 = extract_rzz(k1.theta, c1, s, k1.d, cfg)
    b2 = extract_rzz(k2.theta, c2, s, k2.d, cfg)
    inst = [Local(0, X)] + b2.instructions + [Local(0, X)] + b1.instructions
    realized = b1.achieved["angles"][0] - b2.achieved["angles"][0]
    return GateSequence(inst, rzz_ideal(angle), {"angles": [realized], "residual": angle - realized,
                                                   "pulses": (c1, c2)})


def _conjugated(core: GateSequence, axis: str, sign: int) -> GateSequence:
    lc = _CONJ[(axis, sign)]
    pre = [Local(0, lc.conj().T), Local(1, lc.conj().T)]
    post = [Local(0, lc), Local(1, lc)]
    return GateSequence(pre + core.instructions + post, None, dict(core.achieved))


def rxx_from_rzz(angle: float, s: ScalingFunction, calibrator: Calibrator | None = None,
                 sign: int = +1, cfg: DeviceConfig | None = None) -> GateSequence:
    """``exp(-i angle/2 XX)`` as an R_ZZ block conjugated by ``r_Y(+-pi/2)`` on both qubits."""
    seq = _conjugated(rzz_block(angle, s, calibrator, cfg), "X", sign)
    seq.target = _pauli_exp("XX", angle)
    return seq


def ryy_from_rzz(angle: float, s: ScalingFunction, calibrator: Calibrator | None = None,
                 sign: int = +1, cfg: DeviceConfig | None = None) -> GateSequence:
    """``exp(-i angle/2 YY)`` as an R_ZZ block conjugated by ``r_X(-+pi/2)`` on both qubits."""
    seq = _conjugated(rzz_block(angle, s, calibrator, cfg), "Y", sign)
    seq.target = _pauli_exp("YY", angle)
    return seq


def _pauli_exp(label: str, angle: float) -> np.ndarray:
    return pauli_rotation(label, angle)


def merge_locals(instructions: Sequence) -> list:
    """Fuse every run of single-qubit gates into one local per qubit.

    The result alternates ``Local(0), Local(1)`` layers with CR pulses, giving
    ``n`` pulses and ``2n + 2`` locals.
    """
    out = []
    acc = [_I2.copy(), _I2.copy()]
    for inst in instructions:
        if isinstance(inst, CrudeCR):
            out += [Local(0, acc[0]), Local(1, acc[1]), inst]
            acc = [_I2.copy(), _I2.copy()]
        elif isinstance(inst, VirtualZ):
            acc[inst.qubit] = rz(inst.angle) @ acc[inst.qubit]
        else:
            acc[inst.qubit] = inst.matrix @ acc[inst.qubit]
    return out + [Local(0, acc[0]), Local(1, acc[1])]


def synthesize_su4(target: np.ndarray, s: ScalingFunction, calibrator: Calibrator | None = None,
                   cfg: DeviceConfig | None = None, tol: float = COORD_ATOL):
    """Compile ``target`` into R_ZZ-derived blocks with merged local layers.

    Returns:
        ``(GateSequence, KakFactors)``; the sequence holds ``n`` CR pulses per
        non-zero Cartan coordinate (two for angles below the single-pulse
        minimum) and one merged local per qubit between pulses.
    """
    target = check_unitary(target, 4)
    kak = kak_decompose(target)
    a, b, c = kak.coords
    instructions = [Local(0, kak.r1), Local(1, kak.r2)]
    angles = []
    for axis, angle in (("Z", c), ("Y", b), ("X", a)):
        if abs(angle) <= tol:
            continue
        if axis == "Z":
            block = rzz_block(angle, s, calibrator, cfg)
        elif axis == "Y":
            block = ryy_from_rzz(angle, s, calibrator, cfg=cfg)
        else:
            block = rxx_from_rzz(angle, s, calibrator, cfg=cfg)
        instructions += block.instructions
        angles.append(angle)
    instructions += [Local(0, kak.r3), Local(1, kak.r4)]
    seq = GateSequence(merge_locals(instructions), target, {"angles": angles, "n_blocks": len(angles)})
    return seq, kak


def block_count(coords, tol: float = COORD_ATOL) -> int:
    """Number of R_ZZ blocks a target with these Cartan coordinates needs."""
    return sum(abs(x) > tol for x in coords)


# ---------------------------------------------------------------- schedules


def euler_zsxzsxz(u: np.ndarray) -> tuple[float, float, float]:
    """Angles ``(lam, mid, phi)`` with ``u ~ Rz(phi) SX Rz(mid) SX Rz(lam)``.

    From the ZYZ form ``u ~ Rz(p) Ry(theta) Rz(lam)``: ``mid = theta + pi``
    and ``phi = p + pi``.
    """
    u = u / np.sqrt(np.linalg.det(u))
    theta = 2 * np.arctan2(abs(u[1, 0]), abs(u[0, 0]))
    sum_ = 2 * np.angle(u[1, 1]) if abs(u[1, 1]) > 1e-14 else 0.0
    diff = 2 * np.angle(u[1, 0]) if abs(u[1, 0]) > 1e-14 else 0.0
    phi = (sum_ + diff) / 2
    lam = (sum_ - diff) / 2
    return float(lam), float(theta + np.pi), float(phi + np.pi)


def _is_diagonal(u: np.ndarray, atol: float = 1e-12) -> bool:
    return abs(u[0, 1]) < atol and abs(u[1, 0]) < atol


@dataclass(frozen=True)
class ScheduleEntry:
    channel: str
    t0: int
    duration: int
    kind: str
    params: dict


@dataclass
class PulseSchedule:
    entries: list
    dt_ns: float = 0.222

    @property
    def total_duration(self) -> int:
        return max((e.t0 + e.duration for e in self.entries), default=0)

    def channel(self, name: str) -> list:
        return [e for e in self.entries if e.channel == name]

    def to_dict(self) -> dict:
        return {
            "dt_ns": self.dt_ns,
            "total_duration_dt": self.total_duration,
            "total_duration_ns": self.total_duration * self.dt_ns,
            "entries": [vars(e) for e in self.entries],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


def to_schedule(seq: GateSequence, cfg: DeviceConfig) -> PulseSchedule:
    """Lower a sequence to timed entries on D0, D1 (drives) and U0 (CR).

    Locals become Z-SX-Z-SX-Z with virtual Z frame changes; diagonal locals
    become a single virtual Z.  Entries are packed left to right; a CR pulse
    waits for both drive channels.
    """
    cursor = {"D0": 0, "D1": 0, "U0": 0}
    entries = []

    def vz(ch, angle):
        angle = float(np.angle(np.exp(1j * angle)))
        if abs(angle) > 1e-12:
            entries.append(ScheduleEntry(ch, cursor[ch], 0, "virtual_z", {"angle": angle}))

    for inst in seq.instructions:
        if isinstance(inst, CrudeCR):
            t0 = max(cursor.values())
            e = inst.envelope
            entries.append(ScheduleEntry("U0", t0, e.duration, "gaussian_square",
                                         {"amp": e.omega, "d": e.d, "tau_r": e.tau_r, "sigma": e.sigma}))
            for ch in cursor:
                cursor[ch] = t0 + e.duration
            continue
        ch = f"D{inst.qubit}"
        if isinstance(inst, VirtualZ):
            vz(ch, inst.angle)
            continue
        m = inst.matrix
        if _is_diagonal(m):
            vz(ch, float(np.angle(m[1, 1]) - np.angle(m[0, 0])))
            continue
        lam, mid, phi = euler_zsxzsxz(m)
        vz(ch, lam)
        for angle in (mid, phi):
            entries.append(ScheduleEntry(ch, cursor[ch], cfg.sx_duration, "sx", {}))
            cursor[ch] += cfg.sx_duration
            vz(ch, angle)
    return PulseSchedule(entries, cfg.dt_ns)


def schedule_unitary(sched: PulseSchedule, cfg: DeviceConfig) -> np.ndarray:
    """Noiseless unitary of a schedule on the device (entries in time order)."""
    order = sorted(range(len(sched.entries)), key=lambda i: (sched.entries[i].t0, i))
    inst = []
    for i in order:
        e = sched.entries[i]
        if e.kind == "gaussian_square":
            p = e.params
            inst.append(CrudeCR(GaussianSquareEnvelope(p["amp"], p["d"], p["tau_r"], p["sigma"], cfg.literal_f0)))
        elif e.kind == "sx":
            inst.append(Local(int(e.channel[1]), SX))
        else:
            inst.append(VirtualZ(int(e.channel[1]), e.params["angle"]))
    return circuit_unitary(cfg, inst)


def gate_time(sched: PulseSchedule) -> int:
    return int(sched.total_duration)


# ---------------------------------------------------------------- baseline


def cx_count(coords, tol: float = COORD_ATOL) -> int:
    """CX gates a standard decomposition needs for a class with these coordinates."""
    a, b, c = coords
    if abs(a) <= tol and abs(b) <= tol and abs(c) <= tol:
        return 0
    if abs(a - np.pi / 2) <= tol and abs(b) <= tol and abs(c) <= tol:
        return 1
    if abs(c) <= tol:
        return 2
    return 3


def baseline_duration(n_cx: int, cx_block: int, sx_duration: int = 160) -> int:
    """``n`` echoed-CX blocks (inner locals included) plus the two outer local layers."""
    if n_cx == 0:
        return 2 * sx_duration
    return int(n_cx * cx_block + 2 * 2 * sx_duration)


def calibrate_cx_block(total: int = 5728, n_cx: int = 3, sx_duration: int = 160) -> int:
    """CX block duration making an ``n_cx``-CX baseline last ``total`` dt."""
    return int(round((total - 2 * 2 * sx_duration) / n_cx))


@dataclass(frozen=True)
class ComparisonRow:
    name: str
    n_cr: int
    n_cx: int
    synthesized_dt: int
    baseline_dt: int
    fidelity: float

    @property
    def ratio(self) -> float:
        return self.synthesized_dt / self.baseline_dt


def compare_baseline(name: str, target: np.ndarray, s: ScalingFunction, cfg: DeviceConfig,
                     cx_block: int, calibrator: Calibrator | None = None) -> ComparisonRow:
    """Synthesized schedule length against the CX-based baseline for one target."""
    seq, kak = synthesize_su4(target, s, calibrator, cfg)
    sched = to_schedule(seq, cfg)
    fid = trace_fidelity(schedule_unitary(sched, cfg), target)
    n_cx = cx_count(kak.coords)
    return ComparisonRow(name, seq.n_cr, n_cx, gate_time(sched),
                         baseline_duration(n_cx, cx_block, cfg.sx_duration), float(fid))


COMPARE_COLUMNS = ("gate", "n_cr", "n_cx", "synthesized_dt", "baseline_dt", "ratio", "fidelity")


def comparison_csv(rows: Sequence[ComparisonRow]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(COMPARE_COLUMNS)
    for r in rows:
        w.writerow([r.name, r.n_cr, r.n_cx, r.synthesized_dt, r.baseline_dt, repr(r.ratio), repr(r.fidelity)])
    return buf.getvalue()
