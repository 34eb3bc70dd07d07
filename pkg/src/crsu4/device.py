"""Virtual two-qubit device driven by crude cross-resonance pulses.

Qubit 0 is the control (most significant bit), qubit 1 the target.  Every
random draw flows from explicit seeds, so serial reruns are bit-identical.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence, Union

import numpy as np
from scipy.optimize import nnls

from .cr import (
    CRCoefficients, CRModelParams, CRPolarForm, build_hamiltonian, from_polar, model_unitary,
    planted_params, rotation_superop, to_polar,
)
from .su4 import I2, check_unitary, expm_herm, rx, ry

BASES = ("X", "Y", "Z")
OUTCOMES = ("00", "01", "10", "11")
# rotate the measured basis onto Z before a computational-basis readout
_BASIS_CHANGE = {"X": ry(-np.pi / 2), "Y": rx(np.pi / 2), "Z": I2}

PROPAGATORS = ("exact", "ansatz")

SeedLike = Union[int, np.random.SeedSequence, np.random.Generator, None]


class CalibrationMissingError(KeyError):
    """No planted coefficient set exists for the requested amplitude."""


class ScheduleError(ValueError):
    """Invalid pulse or job parameters (granularity, batch size, ...)."""


# ---------------------------------------------------------------- envelopes


@dataclass(frozen=True)
class GaussianSquareEnvelope:
    """Gaussian rise, flat top of length ``d``, Gaussian fall (all in dt)."""

    omega: float
    d: int
    tau_r: int = 160
    sigma: float = 80.0
    literal_f0: bool = False

    def __post_init__(self):
        if abs(self.omega) > 1:
            raise ValueError("|omega| must be <= 1")
        if self.d < 0 or int(self.d) != self.d:
            raise ValueError("flat-top duration d must be a non-negative integer")
        if self.tau_r <= 0 or self.sigma <= 0:
            raise ValueError("tau_r and sigma must be positive")

    @property
    def duration(self) -> int:
        return int(self.d + 2 * self.tau_r)

    @property
    def f0(self) -> float:
        base = np.exp(-(self.tau_r**2) / self.sigma**2)
        return float(base if self.literal_f0 else self.omega * base)

    def check_granularity(self, granularity: int) -> None:
        if self.d % granularity or self.duration % granularity:
            raise ScheduleError(
                f"d={self.d} and total {self.duration} must be multiples of {granularity} dt; "
                f"round d to the nearest multiple of {granularity}"
            )


def envelope_value(e: GaussianSquareEnvelope, t: float) -> float:
    """Envelope amplitude at time ``t`` (dt) from the start of the pulse."""
    if not 0 <= t < e.duration:
        raise ValueError(f"t={t} outside [0, {e.duration})")
    if t < e.tau_r:
        return float(e.omega * np.exp(-((t - e.tau_r) ** 2) / e.sigma**2) - e.f0)
    if t < e.tau_r + e.d:
        return float(e.omega - e.f0)
    return float(e.omega * np.exp(-((t - e.tau_r - e.d) ** 2) / e.sigma**2) - e.f0)


# ---------------------------------------------------------------- instructions


@dataclass(frozen=True)
class Local:
    """Single-qubit unitary on ``qubit``."""

    qubit: int
    matrix: np.ndarray = field(compare=False)

    def __post_init__(self):
        check_unitary(self.matrix, 2)


@dataclass(frozen=True)
class VirtualZ:
    """Frame change ``r_Z(angle)`` on ``qubit``; zero duration."""

    qubit: int
    angle: float


@dataclass(frozen=True)
class CrudeCR:
    """Single Gaussian-square CR pulse on the control-to-target channel."""

    envelope: GaussianSquareEnvelope


Instruction = Union[Local, VirtualZ, CrudeCR]


@dataclass(frozen=True)
class Circuit:
    """Instructions applied to |00>, followed by a Pauli-basis readout."""

    instructions: tuple
    setting: tuple[str, str] = ("Z", "Z")


# ---------------------------------------------------------------- config


def _confusion_from_flips(p01: Sequence[float], p10: Sequence[float]) -> np.ndarray:
    """Product confusion matrix; ``p01[q]`` = P(read 1 | prepared 0) on qubit q."""
    mats = [np.array([[1 - a, b], [a, 1 - b]]) for a, b in zip(p01, p10)]
    return np.kron(mats[0], mats[1])


#: Polar form of the reference planted Hamiltonian at amplitude 0.6.  The
#: 0.024 pi entry is the zenith angle of W', so delta = nu_in sin(0.024 pi).
REFERENCE_POLAR = CRPolarForm(
    nu_zn=1.06e-3, nu_in=1.57e-3, nu_zi=5.58e-2,
    alpha=0.499 * np.pi, beta=0.042 * np.pi, delta_p=0.024 * np.pi, gamma=0.072 * np.pi,
)
REFERENCE_PHASES = (4.04e-3 * np.pi, 1.38e-2 * np.pi, 0.62 * np.pi)


@dataclass(frozen=True)
class DeviceConfig:
    """Immutable description of the virtual device.

    ``confusion`` is column-stochastic: ``p_read = confusion @ p_true``.
    ``edge_phases`` are the (phi_zz, phi_iz, phi_zi) offsets accumulated over
    both pulse edges; half is applied before and half after the flat top.
    ``propagator="ansatz"`` replaces the exact pulse propagator by the
    perturbative ansatz at the planted parameters, which makes those
    parameters the exact ground truth for identification tests.
    """

    coefficients: dict = field(default_factory=dict)
    edge_phases: tuple[float, float, float] = (0.0, 0.0, 0.0)
    confusion: np.ndarray = field(default_factory=lambda: np.eye(4))
    depolarizing: float = 0.0
    dt_ns: float = 0.222
    granularity: int = 16
    tau_r: int = 160
    sigma: float = 80.0
    sx_duration: int = 160
    shots: int = 8192
    max_circuits: int = 900
    omega_max_valid: float = 0.7
    literal_f0: bool = False
    propagator: str = "exact"

    def __post_init__(self):
        if self.propagator not in PROPAGATORS:
            raise ValueError(f"propagator must be one of {PROPAGATORS}")
        a = np.asarray(self.confusion, dtype=float)
        if a.shape != (4, 4) or np.any(a < 0) or not np.allclose(a.sum(axis=0), 1.0, atol=1e-12):
            raise ValueError("confusion matrix columns must be probability vectors")
        if not 0 <= self.depolarizing < 1:
            raise ValueError("depolarizing rate must lie in [0, 1)")
        if self.granularity < 1:
            raise ValueError("granularity must be >= 1")
        object.__setattr__(self, "confusion", a)
        object.__setattr__(self, "coefficients", {float(k): v for k, v in self.coefficients.items()})

    def coefficients_for(self, omega: float) -> CRCoefficients:
        for k, c in self.coefficients.items():
            if abs(k - omega) < 1e-9:
                return c
        raise CalibrationMissingError(f"no planted CR coefficients for omega={omega}")

    def envelope(self, omega: float, d: int) -> GaussianSquareEnvelope:
        e = GaussianSquareEnvelope(omega, int(d), self.tau_r, self.sigma, self.literal_f0)
        e.check_granularity(self.granularity)
        return e

    def replace(self, **changes) -> "DeviceConfig":
        kw = {f: getattr(self, f) for f in self.__dataclass_fields__}
        kw.update(changes)
        return DeviceConfig(**kw)

    @classmethod
    def reference(cls, **overrides) -> "DeviceConfig":
        """Reference fixture: planted amplitude-0.6 Hamiltonian, edge phases and readout errors."""
        kw = dict(
            coefficients={0.6: from_polar(REFERENCE_POLAR)},
            edge_phases=REFERENCE_PHASES,
            confusion=_confusion_from_flips((0.010, 0.015), (0.020, 0.025)),
        )
        kw.update(overrides)
        return cls(**kw)

    # -- fixture file I/O
    def to_dict(self) -> dict:
        return {
            "dt_ns": self.dt_ns,
            "coefficients": {repr(k): v.as_dict() for k, v in self.coefficients.items()},
            "edge_phases": list(self.edge_phases),
            "confusion": self.confusion.tolist(),
            "depolarizing": self.depolarizing,
            "granularity": self.granularity,
            "tau_r": self.tau_r,
            "sigma": self.sigma,
            "sx_duration": self.sx_duration,
            "shots": self.shots,
            "max_circuits": self.max_circuits,
            "omega_max_valid": self.omega_max_valid,
            "literal_f0": self.literal_f0,
            "propagator": self.propagator,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "DeviceConfig":
        data = dict(data)
        data["coefficients"] = {
            float(k): CRCoefficients(**v) for k, v in data.get("coefficients", {}).items()
        }
        data["edge_phases"] = tuple(data.get("edge_phases", (0.0, 0.0, 0.0)))
        data["confusion"] = np.array(data.get("confusion", np.eye(4)), dtype=float)
        return cls(**data)

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")

    @classmethod
    def load(cls, path) -> "DeviceConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))


# ---------------------------------------------------------------- channel


def planted_model_params(cfg: DeviceConfig, omega: float) -> CRModelParams:
    """Ansatz parameters of the planted pulse, edge offsets included."""
    phi_zz, phi_iz, phi_zi = cfg.edge_phases
    return planted_params(cfg.coefficients_for(omega)).replace(phi_zz=phi_zz, phi_iz=phi_iz, phi_zi=phi_zi)


def _diag_phase(phi_zz: float, phi_iz: float, phi_zi: float) -> np.ndarray:
    zz = np.array([1, -1, -1, 1])
    iz = np.array([1, -1, 1, -1])
    zi = np.array([1, 1, -1, -1])
    return np.diag(np.exp(-1j * (phi_zz * zz + phi_iz * iz + phi_zi * zi)))


def edge_unitary(cfg: DeviceConfig, omega: float) -> np.ndarray:
    """One pulse edge: half of the configured phase offsets, in the N frame."""
    p = to_polar(cfg.coefficients_for(omega))
    half = _diag_phase(*(0.5 * np.asarray(cfg.edge_phases)))
    return rotation_superop(p.alpha, p.beta, half, inverse=True)


def crude_cr_unitary(cfg: DeviceConfig, e: GaussianSquareEnvelope) -> np.ndarray:
    """Edge, flat-top propagator ``exp(-i H d)``, edge."""
    c = cfg.coefficients_for(e.omega)
    if abs(e.omega) > cfg.omega_max_valid:
        warnings.warn(
            f"amplitude {e.omega} exceeds the validated range {cfg.omega_max_valid}",
            RuntimeWarning, stacklevel=2,
        )
    if cfg.propagator == "ansatz":
        return model_unitary(planted_model_params(cfg, e.omega), e.d)
    edge = edge_unitary(cfg, e.omega)
    return edge @ expm_herm(build_hamiltonian(c), e.d) @ edge


def _depolarize(rho: np.ndarray, lam: float) -> np.ndarray:
    if lam == 0:
        return rho
    return (1 - lam) * rho + lam * np.eye(4) / 4


def apply_crude_cr(cfg: DeviceConfig, e: GaussianSquareEnvelope, rho: np.ndarray, seed: SeedLike = None) -> np.ndarray:
    """Apply one crude CR pulse (and its depolarizing noise) to a density matrix.

    ``seed`` is accepted for interface symmetry; the channel is deterministic.
    """
    u = crude_cr_unitary(cfg, e)
    return _depolarize(u @ rho @ u.conj().T, cfg.depolarizing)


def _local_4(inst) -> np.ndarray:
    if isinstance(inst, VirtualZ):
        m = np.diag([np.exp(-0.5j * inst.angle), np.exp(0.5j * inst.angle)])
    else:
        m = inst.matrix
    return np.kron(m, I2) if inst.qubit == 0 else np.kron(I2, m)


def circuit_unitary(cfg: DeviceConfig, instructions, cache: dict | None = None) -> np.ndarray:
    """Noiseless unitary of an instruction list (first instruction acts first)."""
    cache = {} if cache is None else cache
    u = np.eye(4, dtype=complex)
    for inst in instructions:
        if isinstance(inst, CrudeCR):
            key = (inst.envelope.omega, inst.envelope.d)
            if key not in cache:
                cache[key] = crude_cr_unitary(cfg, inst.envelope)
            u = cache[key] @ u
        else:
            u = _local_4(inst) @ u
    return u


def evolve(cfg: DeviceConfig, instructions, rho: np.ndarray, cache: dict | None = None) -> np.ndarray:
    """Propagate a density matrix through the instruction list."""
    if cfg.depolarizing == 0:
        u = circuit_unitary(cfg, instructions, cache)
        return u @ rho @ u.conj().T
    cache = {} if cache is None else cache
    for inst in instructions:
        if isinstance(inst, CrudeCR):
            u = circuit_unitary(cfg, [inst], cache)
            rho = _depolarize(u @ rho @ u.conj().T, cfg.depolarizing)
        else:
            m = _local_4(inst)
            rho = m @ rho @ m.conj().T
    return rho


# ---------------------------------------------------------------- readout


@dataclass(frozen=True)
class MeasurementRecord:
    """Outcome histogram of one Pauli-basis setting.

    In exact mode ``shots`` is None and ``probabilities`` holds the Born
    probabilities (after readout confusion) instead of sampled counts.
    """

    setting: tuple[str, str]
    counts: dict | None = None
    shots: int | None = None
    probabilities: tuple | None = None

    def __post_init__(self):
        if tuple(self.setting) not in {(a, b) for a in BASES for b in BASES}:
            raise ValueError(f"invalid setting {self.setting}")
        object.__setattr__(self, "setting", tuple(self.setting))
        if self.counts is not None:
            if sum(self.counts.values()) != self.shots:
                raise ValueError("counts must sum to shots")
        elif self.probabilities is None:
            raise ValueError("record needs counts or probabilities")

    @property
    def exact(self) -> bool:
        return self.counts is None

    def frequencies(self) -> np.ndarray:
        if self.counts is None:
            return np.asarray(self.probabilities, dtype=float)
        if not self.shots:
            raise ValueError("record has zero shots")
        return np.array([self.counts.get(k, 0) for k in OUTCOMES], dtype=float) / self.shots

    def to_json(self) -> str:
        d = {"setting": "".join(self.setting), "shots": self.shots}
        if self.counts is None:
            d["probabilities"] = [float(p) for p in self.probabilities]
        else:
            d["counts"] = [int(self.counts.get(k, 0)) for k in OUTCOMES]
        return json.dumps(d, sort_keys=True)

    @classmethod
    def from_json(cls, line: str) -> "MeasurementRecord":
        d = json.loads(line)
        setting = tuple(d["setting"])
        if "counts" in d:
            return cls(setting, dict(zip(OUTCOMES, d["counts"])), d["shots"])
        return cls(setting, None, None, tuple(d["probabilities"]))


def write_records(records, path) -> None:
    Path(path).write_text("".join(r.to_json() + "\n" for r in records))


def read_records(path) -> list[MeasurementRecord]:
    return [MeasurementRecord.from_json(l) for l in Path(path).read_text().splitlines() if l.strip()]


def _rng(seed: SeedLike) -> np.random.Generator:
    return seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)


def born_probabilities(rho: np.ndarray, setting) -> np.ndarray:
    """Outcome probabilities of ``rho`` measured in the given Pauli bases."""
    if len(setting) != 2 or any(s not in BASES for s in setting):
        raise ValueError(f"invalid setting {setting}")
    b = np.kron(_BASIS_CHANGE[setting[0]], _BASIS_CHANGE[setting[1]])
    p = np.real(np.diag(b @ rho @ b.conj().T))
    p = np.clip(p, 0.0, None)
    return p / p.sum()


def measure(rho: np.ndarray, setting, shots: int | None, seed: SeedLike = None,
            confusion: np.ndarray | None = None) -> MeasurementRecord:
    """Pauli-basis readout with readout confusion; ``shots=None`` gives exact probabilities."""
    p = born_probabilities(rho, setting)
    if confusion is not None:
        p = np.asarray(confusion) @ p
        p = p / p.sum()
    if shots is None:
        return MeasurementRecord(tuple(setting), None, None, tuple(float(x) for x in p))
    if shots <= 0:
        raise ValueError("shots must be positive")
    n = _rng(seed).multinomial(shots, p)
    return MeasurementRecord(tuple(setting), dict(zip(OUTCOMES, (int(x) for x in n))), int(shots))


def mitigate(freqs, confusion: np.ndarray, method: str = "inverse") -> np.ndarray:
    """Undo readout confusion on a frequency vector.

    ``"inverse"`` solves ``A p = f`` and clips negatives before renormalizing;
    ``"nnls"`` solves the non-negative least-squares problem instead.

    Raises:
        np.linalg.LinAlgError: singular confusion matrix.
    """
    a = np.asarray(confusion, dtype=float)
    f = np.asarray(freqs, dtype=float)
    if np.linalg.cond(a) > 1e12:
        raise np.linalg.LinAlgError("confusion matrix is singular")
    if method == "inverse":
        p = np.linalg.solve(a, f)
    elif method == "nnls":
        p = nnls(a, f)[0]
    else:
        raise ValueError(f"unknown mitigation method {method!r}")
    p = np.clip(p, 0.0, None)
    return p / p.sum()


# ---------------------------------------------------------------- jobs


@dataclass
class JobLedger:
    """Running count of submitted jobs and circuits."""

    jobs: list = field(default_factory=list)

    @property
    def circuits(self) -> int:
        return sum(self.jobs)

    def record(self, n: int) -> None:
        self.jobs.append(int(n))


def run_job(cfg: DeviceConfig, circuits: Sequence[Circuit], seed: SeedLike = None,
            shots: int | None | str = "default", ledger: JobLedger | None = None) -> list[MeasurementRecord]:
    """Execute circuits on fresh |00> states and return records in input order.

    ``shots="default"`` uses ``cfg.shots``; ``shots=None`` runs in exact mode.
    Per-circuit random streams are spawned from ``seed``.
    """
    if len(circuits) > cfg.max_circuits:
        raise ScheduleError(f"batch of {len(circuits)} exceeds {cfg.max_circuits} circuits per job")
    if shots == "default":
        shots = cfg.shots
    if ledger is not None:
        ledger.record(len(circuits))
    if not circuits:
        return []
    ss = seed if isinstance(seed, np.random.SeedSequence) else np.random.SeedSequence(seed)
    children = ss.spawn(len(circuits))
    rho0 = np.zeros((4, 4), dtype=complex)
    rho0[0, 0] = 1.0
    cache: dict = {}
    out = []
    for circ, child in zip(circuits, children):
        rho = evolve(cfg, circ.instructions, rho0, cache)
        out.append(measure(rho, circ.setting, shots, np.random.default_rng(child), cfg.confusion))
    return out


class VirtualDevice:
    """A device configuration plus its job ledger."""

    def __init__(self, cfg: DeviceConfig):
        self.cfg = cfg
        self.ledger = JobLedger()

    def run(self, circuits, seed: SeedLike = None, shots="default") -> list[MeasurementRecord]:
        out = []
        seeds = np.random.SeedSequence(seed) if not isinstance(seed, np.random.SeedSequence) else seed
        batches = [circuits[i:i + self.cfg.max_circuits] for i in range(0, len(circuits), self.cfg.max_circuits)]
        for batch, s in zip(batches, seeds.spawn(len(batches)) if batches else []):
            out.extend(run_job(self.cfg, batch, s, shots, self.ledger))
        return out
