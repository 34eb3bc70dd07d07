import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from crsu4.cr import PARAM_NAMES, CRModelParams, model_unitary
from crsu4.device import (
    CrudeCR,
    DeviceConfig,
    VirtualDevice,
    circuit_unitary,
    evolve,
    measure,
    planted_model_params,
)
from crsu4.su4 import haar_special_unitary, haar_unitary, trace_fidelity
from crsu4.tomography import (
    PROBE_MATRIX,
    SCAN_COLUMNS,
    SETTINGS,
    UIC_PROBES,
    OptimizerConfig,
    ScanConfig,
    UptResult,
    coarse_fit,
    decompose_cr_unitary,
    duration_scan,
    extraction_locals,
    fine_fit,
    fitness,
    identify,
    params_from_dict,
    params_to_dict,
    project_density,
    pseudo_identity_instructions,
    pseudo_identity_unitary,
    reconstruct_unitary,
    run_upt,
    sandwich,
    state_tomography,
    upt_circuits,
    upt_errors,
)
from crsu4.weyl import canonical_gate

SCAN_D = list(range(0, 769, 32))


def probe_images(u):
    psi = u @ PROBE_MATRIX
    return np.array([np.outer(psi[:, i], psi[:, i].conj()) for i in range(4)])


def exact_records(rho):
    return [measure(rho, s, None) for s in SETTINGS]


def sampled_records(rho, shots, seed):
    ss = np.random.SeedSequence(seed).spawn(len(SETTINGS))
    return [measure(rho, s, shots, np.random.default_rng(k)) for s, k in zip(SETTINGS, ss)]


def trace_distance(a, b):
    return 0.5 * np.sum(np.abs(np.linalg.eigvalsh(a - b)))


@pytest.fixture(scope="module")
def ansatz_cfg():
    return DeviceConfig.reference(propagator="ansatz")


@pytest.fixture(scope="module")
def exact_scan(ansatz_cfg):
    dev = VirtualDevice(ansatz_cfg)
    return duration_scan(dev, 0.6, SCAN_D, ScanConfig(shots=None), seed=0)


class TestProbes:
    def test_uic_set(self):
        kets = [p.state for p in UIC_PROBES]
        np.testing.assert_allclose(kets[0], [1, 0, 0, 0])
        np.testing.assert_allclose(kets[1], [0, 1, 0, 0])
        np.testing.assert_allclose(kets[2], [0, 0, 1, 0])
        np.testing.assert_allclose(kets[3], [0.5, 0.5, 0.5, 0.5])
        assert [p.label for p in UIC_PROBES] == ["00", "01", "10", "++"]

    def test_preparations(self):
        cfg = DeviceConfig()
        for i, c in enumerate(upt_circuits([])[::9]):
            np.testing.assert_allclose(circuit_unitary(cfg, c.instructions)[:, 0], PROBE_MATRIX[:, i], atol=1e-15)

    def test_36_circuits(self):
        circuits = upt_circuits([])
        assert len(circuits) == 36
        assert [c.setting for c in circuits[:9]] == list(SETTINGS)

    def test_uic_discrimination(self):
        rng = np.random.default_rng(17)
        for _ in range(100):
            u, v = haar_special_unitary(4, rng), haar_special_unitary(4, rng)
            a, b = probe_images(u), probe_images(v)
            assert max(trace_distance(x, y) for x, y in zip(a, b)) > 1e-6
            c = probe_images(np.exp(1j * rng.uniform(0, 2 * np.pi)) * u)
            assert max(trace_distance(x, y) for x, y in zip(a, c)) < 1e-12


class TestStateTomography:
    def test_ket00_exact(self):
        rho = np.diag([1.0, 0, 0, 0]).astype(complex)
        np.testing.assert_allclose(state_tomography(exact_records(rho)), rho, atol=1e-12)

    def test_maximally_mixed(self):
        rho = np.eye(4) / 4
        est = state_tomography(sampled_records(rho, 8192, 1))
        np.testing.assert_allclose(est, rho, atol=0.03)

    def test_haar_states_8192(self):
        rng = np.random.default_rng(23)
        fids = []
        for k in range(100):
            psi = haar_unitary(4, rng)[:, 0]
            est = state_tomography(sampled_records(np.outer(psi, psi.conj()), 8192, k))
            fids.append(np.real(psi.conj() @ est @ psi))
        assert np.percentile(fids, 5) > 0.98

    def test_missing_setting(self):
        with pytest.raises(ValueError, match="missing"):
            state_tomography(exact_records(np.eye(4) / 4)[:-1])

    def test_readout_mitigation(self, ref_cfg):
        rho = probe_images(haar_unitary(4, np.random.default_rng(2)))[3]
        recs = [measure(rho, s, None, confusion=ref_cfg.confusion) for s in SETTINGS]
        np.testing.assert_allclose(state_tomography(recs, ref_cfg.confusion), rho, atol=1e-12)

    @given(st.integers(0, 2**31))
    @settings(max_examples=30)
    def test_projection_is_state(self, seed):
        rng = np.random.default_rng(seed)
        m = rng.standard_normal((4, 4)) + 1j * rng.standard_normal((4, 4))
        rho = project_density(m + m.conj().T)
        assert np.min(np.linalg.eigvalsh(rho)) >= -1e-12
        assert np.trace(rho).real == pytest.approx(1.0, abs=1e-14)


class TestFitness:
    def test_self_consistency(self, planted):
        rhos = probe_images(model_unitary(planted, 500.0))
        assert fitness(planted, 500.0, rhos) == pytest.approx(1.0, abs=1e-12)

    def test_maximally_mixed(self, planted):
        assert fitness(planted, 100.0, [np.eye(4) / 4] * 4) == pytest.approx(1 / 16, abs=1e-15)

    def test_bounded(self, planted, rng):
        rhos = probe_images(haar_unitary(4, rng))
        f = fitness(planted, 300.0, rhos)
        assert 0 <= f <= 1

    def test_vectorized_over_time(self, planted):
        rhos = probe_images(model_unitary(planted, 200.0))
        f = fitness(planted, np.array([100.0, 200.0]), rhos)
        assert f[1] == pytest.approx(1.0) and f[0] < 1


class TestErrors:
    def test_pure_states(self, planted):
        rhos = probe_images(model_unitary(planted, 300.0))
        e = upt_errors(rhos, planted, 300.0)
        assert e.eps_p == pytest.approx(0.0, abs=1e-12)
        assert e.eps_f == pytest.approx(0.0, abs=1e-12)

    def test_unitarity_literal_and_corrected(self, planted):
        rhos = probe_images(model_unitary(planted, 300.0))
        assert upt_errors(rhos, planted, 300.0).eps_u == pytest.approx(0.25, abs=1e-12)
        assert upt_errors(rhos, planted, 300.0, corrected=True).eps_u == pytest.approx(0.0, abs=1e-12)

    def test_ranges(self, planted):
        e = upt_errors([np.eye(4) / 4] * 4, planted, 100.0)
        assert 0 <= e.eps_f <= 1 and 0 <= e.eps_p <= 0.75
        assert e.eps_p == pytest.approx(0.75)


class TestUnitaryReconstruction:
    @given(st.integers(0, 2**31))
    @settings(max_examples=30)
    def test_recovers_haar_unitary(self, seed):
        u = haar_unitary(4, np.random.default_rng(seed))
        v = reconstruct_unitary(probe_images(u))
        assert trace_fidelity(u, v) == pytest.approx(1.0, abs=1e-10)

    def test_decompose_round_trip(self, planted):
        for t in (0.0, 320.0, 864.0, 3000.0):
            u = model_unitary(planted, t)
            raw = decompose_cr_unitary(u)
            assert np.linalg.norm(raw.bloch() - [np.sin(planted.alpha) * np.cos(planted.beta),
                                                 np.sin(planted.alpha) * np.sin(planted.beta),
                                                 np.cos(planted.alpha)]) < 1e-9


class TestIdentify:
    def test_planted_images(self, planted):
        rhos = probe_images(model_unitary(planted, 544.0))
        res = identify(rhos, 544.0, planted.replace(phi_zz=0.0, phi_iz=0.0, phi_zi=0.0), seed=0)
        assert res.fitness > 1 - 1e-10
        assert trace_fidelity(res.unitary(), model_unitary(planted, 544.0)) > 1 - 1e-10

    def test_probe_permutation_invariance(self, planted):
        rhos = probe_images(model_unitary(planted, 400.0))
        base = fitness(planted.replace(gamma=0.3), 400.0, rhos)
        perm = [2, 0, 3, 1]
        permuted = fitness(planted.replace(gamma=0.3), 400.0, rhos[perm], probes=PROBE_MATRIX[:, perm])
        assert permuted == pytest.approx(base, abs=1e-15)

    def test_identity_channel(self, ref_cfg):
        dev = VirtualDevice(ref_cfg)
        prior = planted_model_params(ref_cfg, 0.6).replace(phi_zz=0.0, phi_iz=0.0, phi_zi=0.0)
        res = run_upt(dev, [], 0.0, prior, OptimizerConfig(restarts=2), seed=0, shots=None)
        assert res.fitness > 0.999
        assert trace_fidelity(res.unitary(), np.eye(4)) > 0.999

    def test_run_upt_deterministic(self, ref_cfg):
        prior = planted_model_params(ref_cfg, 0.6)
        chan = [CrudeCR(ref_cfg.envelope(0.6, 320))]
        a = run_upt(VirtualDevice(ref_cfg), chan, 320.0, prior, OptimizerConfig(restarts=2), seed=4)
        b = run_upt(VirtualDevice(ref_cfg), chan, 320.0, prior, OptimizerConfig(restarts=2), seed=4)
        np.testing.assert_array_equal(a.theta.as_array(), b.theta.as_array())
        assert a.fitness > 0.99

    def test_run_upt_job_size(self, ref_cfg):
        dev = VirtualDevice(ref_cfg)
        run_upt(dev, [CrudeCR(ref_cfg.envelope(0.6, 320))], 320.0, planted_model_params(ref_cfg, 0.6),
                OptimizerConfig(restarts=1), seed=0)
        assert dev.ledger.jobs == [36]

    def test_result_serialization(self, planted):
        rhos = probe_images(model_unitary(planted, 100.0))
        res = identify(rhos, 100.0, planted, OptimizerConfig(restarts=1), seed=0)
        d = res.to_dict()
        assert list(d["params"]) == list(PARAM_NAMES)
        assert d["units"]["nu_zn"] == "1/dt" and d["units"]["gamma"] == "pi"
        back = params_from_dict(params_to_dict(res.theta))
        np.testing.assert_allclose(back.as_array(), res.theta.as_array(), atol=1e-15)
        assert isinstance(res, UptResult) and '"nu_zn"' in res.to_json()


class TestDurationScan:
    def test_rows(self, exact_scan):
        assert [r.d for r in exact_scan.rows] == SCAN_D
        assert exact_scan.to_csv().splitlines()[0] == ",".join(SCAN_COLUMNS)
        assert len(exact_scan.to_csv().splitlines()) == 26

    def test_one_x_columns(self, exact_scan):
        assert max(abs(r.a) for r in exact_scan.rows) < 0.02
        assert max(abs(r.b) for r in exact_scan.rows) < 0.02

    def test_linear_recovery(self, exact_scan, planted):
        fit = coarse_fit(exact_scan, seed=1)
        assert fit.regression.r2_zz > 0.999
        assert fit.theta.nu_zn == pytest.approx(planted.nu_zn, rel=1e-3)
        assert fit.fitness > 1 - 1e-8

    def test_ep_peak(self, exact_scan, planted):
        eps = np.array([r.ep for r in exact_scan.rows])
        d_star = (np.pi / 4 - planted.phi_zz) / planted.nu_zn
        best = SCAN_D[int(np.argmax(eps))]
        assert abs(best - d_star) <= 32
        assert eps.max() == pytest.approx(2 / 9, abs=1e-3)

    def test_exact_device_slope(self, ref_cfg, planted):
        scan = duration_scan(VirtualDevice(ref_cfg), 0.6, SCAN_D, ScanConfig(shots=None), seed=0)
        fit = coarse_fit(scan, seed=1)
        assert fit.regression.r2_zz > 0.999
        assert fit.theta.nu_zn == pytest.approx(planted.nu_zn, rel=1e-2)

    def test_unsorted_rejected(self, ref_cfg):
        with pytest.raises(ValueError):
            duration_scan(VirtualDevice(ref_cfg), 0.6, [64, 32], ScanConfig(shots=None))


class TestFineFit:
    def test_pseudo_identity_exact_at_truth(self, ansatz_cfg):
        truth = planted_model_params(ansatz_cfg, 0.6)
        for xi in (0.0, 1.0, 2.5):
            u = circuit_unitary(ansatz_cfg, pseudo_identity_instructions(truth, np.pi / 2, xi, 5, 0.6, ansatz_cfg))
            assert trace_fidelity(u, np.eye(4)) == pytest.approx(1.0, abs=1e-10)

    def test_extraction_gives_rzz(self, planted):
        d = 729
        loc = extraction_locals(planted, d)
        u = sandwich(loc, model_unitary(planted, d))
        target = canonical_gate((0.0, 0.0, 2 * (planted.nu_zn * d + planted.phi_zz)))
        assert trace_fidelity(u, target) == pytest.approx(1.0, abs=1e-12)

    def test_xi_signature(self, ansatz_cfg):
        truth = planted_model_params(ansatz_cfg, 0.6)
        pert = truth.replace(gamma=truth.gamma + 0.05 * np.pi)
        infs = []
        for xi in 2 * np.pi * np.arange(9) / 8:
            u = circuit_unitary(ansatz_cfg, pseudo_identity_instructions(pert, np.pi / 2, xi, 5, 0.6, ansatz_cfg))
            infs.append(1 - trace_fidelity(u, np.eye(4)))
        assert np.ptp(infs) > 1e-5

    def test_amplification(self, ansatz_cfg):
        truth = planted_model_params(ansatz_cfg, 0.6)
        loc = extraction_locals(truth, 729)
        h = 1e-4

        def objective(n, gamma):
            q_true = sandwich(loc, model_unitary(truth, 729.0))
            q = sandwich(loc, model_unitary(truth.replace(gamma=gamma), 729.0))
            xis = 2 * np.pi * np.arange(9) / 8
            return np.mean([abs(np.vdot(pseudo_identity_unitary(q, xi, n),
                                        pseudo_identity_unitary(q_true, xi, n))) / 4 for xi in xis])

        g0 = truth.gamma + 0.02 * np.pi
        slope = {n: abs(objective(n, g0 + h) - objective(n, g0 - h)) / (2 * h) for n in (1, 5)}
        assert slope[5] > slope[1]

    def test_truth_is_fixed_point(self, ansatz_cfg):
        truth = planted_model_params(ansatz_cfg, 0.6)
        res = fine_fit(VirtualDevice(ansatz_cfg), truth, m=4, seed=0)
        assert res.initial_objective == pytest.approx(1.0, abs=1e-10)
        assert res.theta.gamma == pytest.approx(truth.gamma, abs=1e-6)

    def test_perturbed_gamma_recovered(self, ansatz_cfg):
        truth = planted_model_params(ansatz_cfg, 0.6)
        res = fine_fit(VirtualDevice(ansatz_cfg), truth.replace(gamma=truth.gamma + 0.05 * np.pi), seed=0)
        assert abs(res.theta.gamma - truth.gamma) < 0.005 * np.pi
        assert res.objective > res.initial_objective

    def test_degenerate_rejected(self, ansatz_cfg):
        with pytest.raises(ValueError):
            fine_fit(VirtualDevice(ansatz_cfg), CRModelParams(), seed=0)


def test_evolve_matches_unitary(ref_cfg, rng):
    inst = [CrudeCR(ref_cfg.envelope(0.6, 320))]
    rho = probe_images(haar_unitary(4, rng))[0]
    u = circuit_unitary(ref_cfg, inst)
    np.testing.assert_allclose(evolve(ref_cfg, inst, rho), u @ rho @ u.conj().T, atol=1e-14)
