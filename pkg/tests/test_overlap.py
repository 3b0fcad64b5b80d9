import numpy as np
import pytest

from conftest import data_path
from oracles import DenseMoments, effective_trial, random_orbitals, random_state
from qcafqmc.estimators import (
    ExactEstimator,
    HamiltonianTerms,
    VanishingOverlapError,
    local_quantities,
    spin_orbital,
)
from qcafqmc.focksim import FockState, build_trial, exact_ground_state
from qcafqmc.integrals import cholesky_factorize, load_fcidump
from qcafqmc.overlap import (
    DimensionError,
    NoSamplesError,
    ShadowEstimator,
    WalkerMatrix,
    binomial_weights,
    build_B,
    chebyshev_nodes,
    overlap_polynomial,
    rblock,
    sample_overlap,
    selection,
    w_matrix,
)
from qcafqmc.shadows import ShadowSet, collect, covariance_of


def basis_state(n, occ):
    amps = np.zeros(2**n, dtype=complex)
    amps[sum(1 << j for j in occ)] = 1.0
    return FockState(n, amps)


def unit_columns(n, occ):
    return np.eye(n, dtype=complex)[:, list(occ)]


@pytest.fixture(scope="module")
def small_set():
    rng = np.random.default_rng(3)
    psi = random_state(rng, 4, 2)
    sh = collect(build_trial(psi, 2), 80, seed=21)
    return psi, sh, effective_trial(sh)


def test_w_matrix_unitary_and_block():
    W = w_matrix(5, 3)
    assert np.allclose(W @ W.conj().T, np.eye(10))
    assert np.allclose(W[6:, 6:], np.eye(4))
    assert np.allclose(W[:2, :2] * np.sqrt(2), [[1, -1j], [1, 1j]])


def test_rblock_entries():
    X = np.array([[1 + 2j, -0.5j], [3.0, 0.25 - 1j]])
    R = rblock(X)
    for j in range(2):
        for k in range(2):
            x = X[j, k]
            assert np.allclose(R[2 * j: 2 * j + 2, 2 * k: 2 * k + 2], [[x.real, -x.imag], [x.imag, x.real]])
    # realification is a ring homomorphism
    Y = np.array([[0.3j, 1.0], [2 - 1j, -1.0]])
    assert np.allclose(rblock(X @ Y), R @ rblock(Y))


def test_selection_and_nodes():
    assert list(selection(4, 2)) == [1, 3, 4, 5, 6, 7]
    z = chebyshev_nodes(4, 3)
    assert np.allclose(z, np.cos(np.array([1, 3, 5]) * np.pi / 16))
    assert np.allclose(binomial_weights(3, 2), [1.0, 15.0 / 3.0, 15.0 / 3.0])


def test_B_of_hartree_fock_walker_elementwise():
    # For Q = I, b = 0 and the walker |1100>, B = W* C0 W^dagger directly.
    n = 4
    walker, _ = WalkerMatrix.from_orbitals(unit_columns(n, (0, 1)))
    W = w_matrix(n, 2)
    C0 = covariance_of(np.zeros(n, dtype=np.int64)).astype(float)
    B = build_B(C0, walker, W)
    expect = np.zeros((2 * n, 2 * n), dtype=complex)
    for a in range(2 * n):
        for b in range(2 * n):
            expect[a, b] = sum(
                np.conj(W[a, c]) * C0[c, d] * np.conj(W[b, d]) for c in range(2 * n) for d in range(2 * n)
            )
    assert np.allclose(B, expect, atol=1e-14)
    assert np.allclose(B, -B.T)


def test_zero_B_gives_constant_polynomial(small_set):
    _, sh, _ = small_set
    walker, _ = WalkerMatrix.from_orbitals(random_orbitals(np.random.default_rng(0), 4, 2))
    poly = overlap_polynomial(np.zeros((8, 8)), walker)
    s = selection(4, 2)
    C0 = covariance_of(np.zeros(4, dtype=np.int64)).astype(float)[np.ix_(s, s)]
    from qcafqmc.pfaffian import pfaffian

    assert np.allclose(poly.coeffs[1:], 0.0, atol=1e-13)
    assert poly.coeffs[0] == pytest.approx(pfaffian(C0))


@pytest.mark.parametrize("n,eta", [(4, 2), (5, 4), (6, 2)])
def test_held_out_node_reproduced(n, eta):
    rng = np.random.default_rng(n + eta)
    sh = collect(build_trial(random_state(rng, n, eta), eta), 10, seed=4)
    walker, _ = WalkerMatrix.from_orbitals(random_orbitals(rng, n, eta))
    for i in range(len(sh)):
        poly = overlap_polynomial(sh[i], walker)
        assert poly.degree == n - eta // 2
        assert poly.held_out_residual < 1e-10


@pytest.mark.parametrize("n,eta", [(4, 2), (4, 4), (3, 2), (5, 2), (6, 4)])
def test_matches_effective_trial_exactly(n, eta):
    # For a fixed shadow set the estimate is <chi|phi> with chi built densely
    # from the channel-inverted snapshots.
    rng = np.random.default_rng(100 + 10 * n + eta)
    sh = collect(build_trial(random_state(rng, n, eta), eta), 60, seed=5)
    dense = DenseMoments(effective_trial(sh), n, eta)
    est = ShadowEstimator(sh)
    for _ in range(3):
        V = random_orbitals(rng, n, eta) * 1.3
        got = est.overlap(V)
        ref = dense.moments(V)[0]
        assert abs(got - ref) <= 1e-9 * max(1.0, abs(ref))


def test_single_shadow_sum_matches_estimator(small_set):
    _, sh, _ = small_set
    V = random_orbitals(np.random.default_rng(9), 4, 2)
    walker, det_r = WalkerMatrix.from_orbitals(V)
    direct = det_r * np.mean([sample_overlap(sh[i], walker) for i in range(len(sh))])
    assert ShadowEstimator(sh, prune=False).overlap(V) == pytest.approx(direct, abs=1e-12)


def test_derivatives_match_dense_oracle(small_set):
    _, sh, chi = small_set
    rng = np.random.default_rng(8)
    dense = DenseMoments(chi, 4, 2)
    est = ShadowEstimator(sh)
    K = [rng.normal(size=(4, 4)) + 1j * rng.normal(size=(4, 4)) for _ in range(2)]
    H = 0.5 * (K[0] + K[0].conj().T)
    ones, pairs = [K[0], H, K[1]], [(K[0], K[1]), (H, H), (K[1], K[0])]
    for V in (random_orbitals(rng, 4, 2) * 0.7, unit_columns(4, (0, 1)), unit_columns(4, (0, 3))):
        got = est.moments(V, ones, pairs)
        ref = dense.moments(V, ones, pairs)
        scale = max(1e-3, np.abs(ref[1]).max(), np.abs(ref[2]).max())
        assert abs(got[0] - ref[0]) < 1e-9
        assert np.abs(got[1] - ref[1]).max() < 1e-8 * scale
        assert np.abs(got[2] - ref[2]).max() < 1e-8 * scale
    assert est.audit_residual < 1e-8


def test_pruning_does_not_change_results():
    rng = np.random.default_rng(44)
    sh = collect(build_trial(basis_state(6, (0, 1)), 2), 150, seed=6)
    pruned, full = ShadowEstimator(sh), ShadowEstimator(sh, prune=False)
    L = np.kron(rng.normal(size=(3, 3)), np.eye(2))
    L = L + L.T
    alpha = random_orbitals(rng, 3, 1)[:, 0]
    spin_block = np.zeros((6, 2), dtype=complex)
    spin_block[0::2, 0] = alpha
    spin_block[1::2, 1] = random_orbitals(rng, 3, 1)[:, 0]
    restricted = spin_block.copy()
    restricted[1::2, 1] = alpha
    assert pruned._sector_view(spin_block, [L]).n_null > 0
    for V in (random_orbitals(rng, 6, 2), spin_block, restricted):
        a = pruned.moments(V, [L], [(L, L)])
        b = full.moments(V, [L], [(L, L)])
        for x, y in zip(a, b):
            assert np.allclose(x, y, atol=1e-11)
        ea, eb = pruned.estimate(V), full.estimate(V)
        assert ea.n_samples == eb.n_samples == 150
        assert ea.variance == pytest.approx(eb.variance, rel=1e-9)


def test_number_operator_gives_eta():
    # N_hat phi = eta phi holds for every shadow, so the ratio is exact.
    rng = np.random.default_rng(12)
    sh = collect(build_trial(random_state(rng, 5, 2), 2), 40, seed=2)
    est = ShadowEstimator(sh)
    V = random_orbitals(rng, 5, 2)
    ov, first, _ = est.moments(V, [np.eye(5)])
    assert 1j * first[0] / ov == pytest.approx(2j, abs=1e-10)


def test_determinant_trial_overlap_statistics():
    n = 4
    sh = collect(build_trial(basis_state(n, (0, 1)), 2), 4000, seed=31)
    est = ShadowEstimator(sh)
    same = est.estimate(unit_columns(n, (0, 1)))
    assert abs(same.value - 1.0) < 5 * same.stderr
    orth = est.estimate(unit_columns(n, (2, 3)))
    assert abs(orth.value) < 5 * orth.stderr


def test_global_phase_covariance():
    rng = np.random.default_rng(5)
    psi = random_state(rng, 4, 2)
    theta = 0.9
    rotated = FockState(4, np.exp(1j * theta) * psi.amplitudes)
    V = random_orbitals(rng, 4, 2)
    exact = ExactEstimator(psi, 2).overlap(V)
    assert ExactEstimator(rotated, 2).overlap(V) == pytest.approx(np.exp(-1j * theta) * exact, abs=1e-12)
    est = ShadowEstimator(collect(build_trial(rotated, 2), 6000, seed=77)).estimate(V)
    assert abs(est.value - np.exp(-1j * theta) * exact) < 4 * est.stderr


def test_eigenstate_local_energy_is_constant(reference_energies):
    ints = load_fcidump(data_path("h2_sto3g.fcidump"))
    ham = cholesky_factorize(ints)
    e0, psi = exact_ground_state(ints)
    est = ExactEstimator(psi, 2)
    terms = HamiltonianTerms(ham)
    rng = np.random.default_rng(1)
    for _ in range(5):
        V = random_orbitals(rng, 4, 2) * 2.0
        el = local_quantities(est, terms, V).local_energy
        assert el == pytest.approx(reference_energies["h2_sto3g"], abs=1e-8)
    assert e0 == pytest.approx(reference_energies["h2_sto3g"], abs=1e-10)


def test_one_body_only_hamiltonian_matches_dense(small_set):
    _, sh, chi = small_set
    rng = np.random.default_rng(6)
    t = rng.normal(size=(2, 2))
    T = spin_orbital(t + t.T)
    dense = DenseMoments(chi, 4, 2)
    V = random_orbitals(rng, 4, 2)
    ov, first, _ = ShadowEstimator(sh).moments(V, [T])
    ov_d, first_d, _ = dense.moments(V, [T])
    assert first[0] / ov == pytest.approx(first_d[0] / ov_d, rel=1e-9)


def test_errors():
    rng = np.random.default_rng(2)
    sh = collect(build_trial(random_state(rng, 4, 2), 2), 5, seed=1)
    est = ShadowEstimator(sh)
    with pytest.raises(DimensionError):
        est.overlap(random_orbitals(rng, 4, 3))
    with pytest.raises(NoSamplesError):
        ShadowEstimator(ShadowSet.from_samples(4, 2, []))
    with pytest.raises(VanishingOverlapError):
        est._guard(0.0)
