import numpy as np
import pytest

from oracles import inverse_channel_average, random_state
from qcafqmc.focksim import FockState, annihilators, build_trial, index_to_bits, majorana_matrices, majorana_unitary
from qcafqmc.rdm import estimate_1rdm, estimate_majorana_expectation, particle_number
from qcafqmc.shadows import ShadowSample, ShadowSet, collect, sample_signed_permutation


def vacuum_shadows(n, count, seed):
    """Snapshots of |0...0>: a matchgate maps it to a single basis state, so the outcome is fixed."""
    rng = np.random.default_rng(seed)
    vac = np.zeros(2**n)
    vac[0] = 1.0
    samples = []
    for _ in range(count):
        q = sample_signed_permutation(rng, 2 * n)
        out = majorana_unitary(q.matrix).unitary @ vac
        samples.append(ShadowSample(q, index_to_bits(int(np.argmax(np.abs(out))), n)))
    return ShadowSet.from_samples(n, 0, samples)


def dense_1rdm(psi):
    a = [x.toarray() for x in annihilators(psi.n_qubits)]
    v = psi.amplitudes
    return np.array([[v.conj() @ a[p].conj().T @ a[q] @ v for q in range(len(a))] for p in range(len(a))])


def test_vacuum_pair_sign_matches_dense_operator():
    n = 3
    sh = vacuum_shadows(n, 3000, seed=4)
    g = majorana_matrices(n)
    vac = np.zeros(2**n)
    vac[0] = 1.0
    for p in range(n):
        dense = vac @ (1j * g[2 * p] @ g[2 * p + 1]) @ vac
        assert dense == pytest.approx(-1.0)
        est = 1j * estimate_majorana_expectation(sh, 2 * p, 2 * p + 1)
        assert est.real == pytest.approx(dense.real, abs=0.15)


def test_equal_indices_rejected():
    sh = collect(build_trial(FockState.basis("1100"), 2), 5, seed=1)
    with pytest.raises(ValueError):
        estimate_majorana_expectation(sh, 3, 3)


def test_matches_channel_inverse_exactly():
    # For a fixed set the estimate is 2 tr(rho_hat a+_p a_q): the vacuum part of the
    # superposition contributes nothing and cross-sector terms cancel.
    rng = np.random.default_rng(2)
    psi = random_state(rng, 4, 2)
    sh = collect(build_trial(psi, 2), 60, seed=8)
    rho = inverse_channel_average(sh)
    a = [x.toarray() for x in annihilators(4)]
    ref = np.array([[2.0 * np.trace(rho @ a[p].conj().T @ a[q]) for q in range(4)] for p in range(4)])
    assert np.allclose(estimate_1rdm(sh).matrix, ref, atol=1e-10)


def test_determinant_trial_gives_occupation_diagonal():
    sh = collect(build_trial(FockState.basis("1100"), 2), 20000, seed=3)
    rdm = estimate_1rdm(sh)
    target = np.diag([1.0, 1.0, 0.0, 0.0])
    se = np.hypot(rdm.stderr_re, rdm.stderr_im)
    assert np.all(np.abs(rdm.matrix - target) < 5 * se + 1e-12)
    assert abs(particle_number(rdm) - 2.0) < 5 * rdm.trace_stderr
    assert rdm.n_samples == 20000


def test_random_trial_against_dense_rdm():
    rng = np.random.default_rng(6)
    psi = random_state(rng, 4, 2)
    rdm = estimate_1rdm(collect(build_trial(psi, 2), 20000, seed=12))
    ref = dense_1rdm(psi)
    assert np.all(np.abs(rdm.matrix.real - ref.real) < 4 * rdm.stderr_re + 1e-12)
    assert np.all(np.abs(rdm.matrix.imag - ref.imag) < 4 * rdm.stderr_im + 1e-12)
    # Hermitian within statistical error
    herm = np.abs(rdm.matrix - rdm.matrix.conj().T)
    assert np.all(herm < 5 * np.hypot(rdm.stderr_re, rdm.stderr_im) * np.sqrt(2) + 1e-12)
    assert abs(np.trace(rdm.matrix).imag) < 5 * rdm.trace_stderr + 1e-12


def test_particle_number_of_exact_diagonal():
    from qcafqmc.rdm import OneRdm

    z = np.zeros((4, 4))
    assert particle_number(OneRdm(np.diag([1.0, 1.0, 0.0, 0.0]).astype(complex), z, z, 1)) == 2.0


def test_csv_round_trip(tmp_path):
    import csv

    rdm = estimate_1rdm(collect(build_trial(FockState.basis("1100"), 2), 50, seed=2))
    path = tmp_path / "rdm.csv"
    rdm.to_csv(path)
    rows = list(csv.DictReader(open(path)))
    assert len(rows) == 16
    back = np.array([complex(float(r["re"]), float(r["im"])) for r in rows]).reshape(4, 4)
    assert np.array_equal(back, rdm.matrix)
