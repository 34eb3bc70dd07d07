"""Command-line front end: ``crsu4 {scan,fit,synthesize,compare,simulate}``.

Every command writes its outputs atomically and records a manifest next to
the primary output (``<out>.manifest.json``).  Re-running with the same
manifest arguments reproduces the outputs byte for byte.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import re
import sys
import tempfile
import time
from pathlib import Path

import numpy as np

from . import __version__
from .device import CrudeCR, DeviceConfig, VirtualDevice, planted_model_params
from .su4 import check_unitary, pauli_rotation, trace_fidelity
from .synthesis import (
    Calibrator, ScalingFunction, calibrate_cx_block, compare_baseline, comparison_csv,
    gate_time, schedule_unitary, synthesize_su4, to_schedule,
)
from .tomography import (
    PARAM_UNITS, OptimizerConfig, ScanConfig, coarse_fit, duration_scan, fine_fit, params_from_dict,
    params_to_dict, upt_circuits,
)
from .weyl import canonical_gate

FIXTURE_ENV = "CRSU4_FIXTURE_PATH"
BUILTIN_FIXTURES = {"reference": DeviceConfig.reference}
DEFAULT_GATES = ("RXX(pi/2)", "RYY(pi/2)", "RZZ(pi/2)", "CSX", "CSZ", "SQISWAP", "SQSWAP", "CX")


class CliError(Exception):
    """User-facing failure; reported without a traceback."""


# ---------------------------------------------------------------- helpers


def atomic_write(path, data: str) -> None:
    """Write through a temporary file in the same directory, then rename."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", newline="") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def resolve_fixture(name: str) -> tuple[DeviceConfig, str]:
    """Load a device fixture by path, builtin name, or via the search path."""
    if name in BUILTIN_FIXTURES:
        return BUILTIN_FIXTURES[name](), name
    candidates = [Path(name)]
    for d in os.environ.get(FIXTURE_ENV, "").split(os.pathsep):
        if d:
            candidates.append(Path(d) / name)
    for c in candidates:
        if c.is_file():
            return DeviceConfig.load(c), str(c)
    raise CliError(f"fixture {name!r} not found (builtin: {sorted(BUILTIN_FIXTURES)}; search path ${FIXTURE_ENV})")


def _sha256(text: str) -> str:
    return hashlib.sha256(text.encode()).hexdigest()


def write_outputs(args, outputs: dict[str, str], seed: int | None, extra: dict | None = None) -> None:
    """Write outputs atomically plus a manifest beside the first one."""
    for path, text in outputs.items():
        atomic_write(path, text)
    first = next(iter(outputs))
    stamp = os.environ.get("SOURCE_DATE_EPOCH")
    manifest = {
        "command": args.command,
        "arguments": {k: v for k, v in sorted(vars(args).items()) if k not in ("func", "command")},
        "fixture": getattr(args, "fixture", None),
        "seed": seed,
        "outputs": {p: _sha256(t) for p, t in outputs.items()},
        "version": __version__,
        "timestamp": time.strftime("%Y-%m-%dT%H:%M:%SZ", time.gmtime(int(stamp) if stamp else None)),
    }
    if extra:
        manifest.update(extra)
    atomic_write(f"{first}.manifest.json", json.dumps(manifest, indent=2, sort_keys=True, default=str) + "\n")


def _seed(args) -> int:
    if args.seed is None:
        args.seed = int(np.random.SeedSequence().entropy % (2**32))
    return args.seed


_ANGLE = re.compile(
    r"^\s*([-+])?\s*((?:\d+\.?\d*|\.\d+)(?:[eE][-+]?\d+)?)?\s*\*?\s*(pi|π)?\s*(?:/\s*(\d+\.?\d*))?\s*$"
)


def parse_angle(text: str) -> float:
    """Parse ``pi/2``, ``0.25pi``, ``3*pi/8`` or a plain number (radians)."""
    m = _ANGLE.match(text)
    if not m or (m.group(2) is None and m.group(3) is None):
        raise CliError(f"cannot parse angle {text!r}")
    val = float(m.group(2)) if m.group(2) is not None else 1.0
    if m.group(3):
        val *= np.pi
    if m.group(4):
        val /= float(m.group(4))
    return -val if m.group(1) == "-" else val


def _named_gates() -> dict:
    sx = np.array([[1 + 1j, 1 - 1j], [1 - 1j, 1 + 1j]]) / 2
    csx = np.eye(4, dtype=complex)
    csx[2:, 2:] = sx
    r = 1 / np.sqrt(2)
    sqiswap = np.array([[1, 0, 0, 0], [0, r, 1j * r, 0], [0, 1j * r, r, 0], [0, 0, 0, 1]])
    h = (1 + 1j) / 2
    sqswap = np.array([[1, 0, 0, 0], [0, h, h.conjugate(), 0], [0, h.conjugate(), h, 0], [0, 0, 0, 1]])
    return {
        "I": np.eye(4, dtype=complex),
        "CX": np.eye(4, dtype=complex)[[0, 1, 3, 2]],
        "CZ": np.diag([1, 1, 1, -1]).astype(complex),
        "CSX": csx,
        "CSZ": np.diag([1, 1, 1, 1j]),
        "SWAP": np.eye(4, dtype=complex)[[0, 2, 1, 3]],
        "ISWAP": canonical_gate((-np.pi / 2, -np.pi / 2, 0.0)),
        "SQISWAP": sqiswap,
        "SQSWAP": sqswap,
        "DCX": np.eye(4, dtype=complex)[[0, 2, 3, 1]],
        "B": canonical_gate((-np.pi / 2, -np.pi / 4, 0.0)),
    }


def parse_target(spec: str) -> np.ndarray:
    """Named gate, parameterized rotation ``RZZ(theta)``, or a matrix file."""
    key = spec.strip().upper().replace("^½", "^1/2").replace("√", "SQ")
    aliases = {"ISWAP^1/2": "SQISWAP", "SWAP^1/2": "SQSWAP", "B3": "B", "ID": "I"}
    key = aliases.get(key, key)
    named = _named_gates()
    if key in named:
        return named[key]
    m = re.match(r"^R(XX|YY|ZZ)\((.+)\)$", spec.strip(), re.IGNORECASE)
    if m:
        return pauli_rotation(m.group(1).upper(), parse_angle(m.group(2)))
    path = Path(spec)
    if path.is_file():
        return load_matrix(path)
    raise CliError(f"unknown target {spec!r}; use a gate name, RZZ(theta) or a matrix file")


def load_matrix(path: Path) -> np.ndarray:
    """4x4 matrix from ``.npy`` or JSON (``[[re, im], ...]`` pairs or real rows)."""
    try:
        if path.suffix == ".npy":
            m = np.load(path)
        else:
            data = np.array(json.loads(path.read_text()), dtype=float)
            m = data[..., 0] + 1j * data[..., 1] if data.ndim == 3 else data.astype(complex)
    except (ValueError, OSError) as exc:
        raise CliError(f"cannot parse matrix file {path}: {exc}") from exc
    try:
        return check_unitary(np.asarray(m, dtype=complex), 4, atol=1e-8)
    except ValueError as exc:
        raise CliError(f"matrix in {path} is not a 4x4 unitary: {exc}") from exc


def _load_params(path: str):
    try:
        doc = json.loads(Path(path).read_text())
    except OSError as exc:
        raise CliError(f"cannot read parameter file {path}: {exc}") from exc
    return params_from_dict(doc["params"]), doc.get("omega", 0.6)


def _params_doc(theta, omega: float, extra: dict) -> str:
    doc = {"params": params_to_dict(theta), "units": PARAM_UNITS, "omega": omega, **extra}
    return json.dumps(doc, indent=2, sort_keys=False) + "\n"


def _scaling(args, cfg: DeviceConfig):
    if args.params:
        theta, omega = _load_params(args.params)
    else:
        omega = args.omega
        theta = planted_model_params(cfg, omega)
    return ScalingFunction(theta, omega, cfg.granularity)


# ---------------------------------------------------------------- commands


def cmd_scan(args) -> int:
    cfg, _ = resolve_fixture(args.fixture)
    if args.granularity:
        cfg = cfg.replace(granularity=args.granularity)
    if args.step <= 0 or args.d_to < args.d_from or args.d_from < 0:
        raise CliError("invalid duration range")
    if args.step % cfg.granularity or args.d_from % cfg.granularity:
        raise CliError(f"d_from and step must be multiples of the {cfg.granularity}-dt granularity "
                       f"(e.g. --step {cfg.granularity * max(1, round(args.step / cfg.granularity))})")
    seed = _seed(args)
    d_list = list(range(args.d_from, args.d_to + 1, args.step))
    shots = None if args.exact else args.shots
    scan = duration_scan(VirtualDevice(cfg), args.omega, d_list, ScanConfig(shots=shots), seed)
    write_outputs(args, {args.out: scan.to_csv()}, seed)
    return 0


def cmd_fit(args) -> int:
    cfg, _ = resolve_fixture(args.fixture)
    if args.granularity:
        cfg = cfg.replace(granularity=args.granularity)
    seed = _seed(args)
    shots = None if args.exact else args.shots
    if args.mode == "coarse":
        d_list = list(range(args.d_from, args.d_to + 1, args.step))
        scan = duration_scan(VirtualDevice(cfg), args.omega, d_list, ScanConfig(shots=shots), seed)
        fit = coarse_fit(scan, OptimizerConfig(restarts=args.restarts), seed)
        extra = {"mode": "coarse", "fitness": fit.fitness, "r2_zz": fit.regression.r2_zz,
                 "converged": fit.diagnostics.converged}
        theta, converged = fit.theta, fit.diagnostics.converged
    else:
        if not args.params:
            raise CliError("fine fit needs --params from a coarse fit")
        theta0, omega = _load_params(args.params)
        angles = tuple(parse_angle(a) for a in args.angles.split(","))
        res = fine_fit(VirtualDevice(cfg), theta0, angles, args.m, args.n, omega,
                       tuple(args.free.split(",")), shots, seed)
        extra = {"mode": "fine", "objective": res.objective, "initial_objective": res.initial_objective,
                 "converged": res.success}
        theta, converged = res.theta, res.success
    write_outputs(args, {args.out: _params_doc(theta, args.omega, extra)}, seed)
    if not converged:
        print("warning: fit did not converge", file=sys.stderr)
        return 2
    return 0


def cmd_synthesize(args) -> int:
    cfg, _ = resolve_fixture(args.fixture)
    if args.granularity:
        cfg = cfg.replace(granularity=args.granularity)
    target = parse_target(args.target)
    s = _scaling(args, cfg)
    cal = Calibrator(s, VirtualDevice(cfg) if args.calibrate else None, seed=args.seed or 0)
    seq, kak = synthesize_su4(target, s, cal, cfg)
    sched = to_schedule(seq, cfg)
    doc = sched.to_dict()
    doc.update({
        "target": args.target,
        "n_cr": seq.n_cr,
        "n_local": seq.n_local,
        "gate_time_dt": gate_time(sched),
        "fidelity": trace_fidelity(schedule_unitary(sched, cfg), target),
        "cartan_coords_pi": [x / np.pi for x in kak.coords],
    })
    write_outputs(args, {args.out: json.dumps(doc, indent=2, sort_keys=True) + "\n"}, args.seed)
    return 0


def cmd_compare(args) -> int:
    cfg, _ = resolve_fixture(args.fixture)
    if args.granularity:
        cfg = cfg.replace(granularity=args.granularity)
    s = _scaling(args, cfg)
    cx_block = args.cx_duration or calibrate_cx_block(5728, 3, cfg.sx_duration)
    cal = Calibrator(s, VirtualDevice(cfg) if args.calibrate else None, seed=args.seed or 0)
    names = [g for g in re.split(r",(?![^()]*\))", args.gates) if g.strip()] if args.gates else []
    rows = [compare_baseline(n.strip(), parse_target(n), s, cfg, cx_block, cal) for n in names]
    write_outputs(args, {args.out: comparison_csv(rows)}, args.seed, {"cx_block_dt": cx_block})
    return 0


def cmd_simulate(args) -> int:
    cfg, _ = resolve_fixture(args.fixture)
    if args.granularity:
        cfg = cfg.replace(granularity=args.granularity)
    seed = _seed(args)
    shots = None if args.exact else args.shots
    circuits = upt_circuits([CrudeCR(cfg.envelope(args.omega, args.d))])
    records = VirtualDevice(cfg).run(circuits, seed, shots)
    write_outputs(args, {args.out: "".join(r.to_json() + "\n" for r in records)}, seed)
    return 0


# ---------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="crsu4", description="CR-pulse R_ZZ basis gates: tomography and synthesis.")
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, seed=True):
        sp.add_argument("--fixture", default="reference", help=f"device fixture (path, builtin name, or ${FIXTURE_ENV})")
        sp.add_argument("--omega", type=float, default=0.6)
        sp.add_argument("--granularity", type=int, default=None, help="override the fixture's dt granularity")
        if seed:
            sp.add_argument("--seed", type=int, default=None)

    def run_opts(sp):
        sp.add_argument("--shots", type=int, default=8192)
        sp.add_argument("--exact", action="store_true", help="exact probabilities instead of sampled shots")

    sp = sub.add_parser("scan", help="UPT duration scan, CSV output")
    common(sp)
    run_opts(sp)
    sp.add_argument("--d-from", type=int, default=0)
    sp.add_argument("--d-to", type=int, default=3073)
    sp.add_argument("--step", type=int, default=128)
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_scan)

    sp = sub.add_parser("fit", help="coarse (scan) or fine (pseudo-identity) parameter fit")
    common(sp)
    run_opts(sp)
    sp.add_argument("--mode", choices=("coarse", "fine"), default="coarse")
    sp.add_argument("--d-from", type=int, default=0)
    sp.add_argument("--d-to", type=int, default=769)
    sp.add_argument("--step", type=int, default=32)
    sp.add_argument("--restarts", type=int, default=16)
    sp.add_argument("--params", help="coarse parameter file (fine mode)")
    sp.add_argument("--angles", default="pi/4,3pi/8,pi/2")
    sp.add_argument("--m", type=int, default=8)
    sp.add_argument("--n", type=int, default=5)
    sp.add_argument("--free", default="gamma,delta")
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_fit)

    sp = sub.add_parser("synthesize", help="compile a two-qubit target to a pulse schedule")
    common(sp)
    sp.add_argument("--params", help="fitted parameter file (default: fixture's planted values)")
    sp.add_argument("--target", required=True)
    sp.add_argument("--calibrate", action=argparse.BooleanOptionalAction, default=True,
                    help="identify each pulse duration on the device (exact-mode UPT)")
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_synthesize)

    sp = sub.add_parser("compare", help="gate times against a CX-based baseline")
    common(sp)
    sp.add_argument("--params")
    sp.add_argument("--gates", default=",".join(DEFAULT_GATES))
    sp.add_argument("--cx-duration", type=int, default=None)
    sp.add_argument("--calibrate", action=argparse.BooleanOptionalAction, default=True)
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_compare)

    sp = sub.add_parser("simulate", help="raw UPT measurement records for one pulse")
    common(sp)
    run_opts(sp)
    sp.add_argument("--d", type=int, required=True)
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_simulate)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (CliError, ValueError, KeyError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
