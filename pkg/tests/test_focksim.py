import numpy as np
import pytest
from scipy.stats import chi2, special_ortho_group

from qcafqmc.focksim import (
    CapacityError,
    FockSector,
    FockState,
    InvalidRotationError,
    SectorViolationError,
    UnsupportedParityError,
    annihilators,
    bits_to_index,
    build_trial,
    exact_ground_state,
    load_amplitudes,
    majorana_matrices,
    majorana_unitary,
    measure,
    popcount,
    save_amplitudes,
)
from qcafqmc.integrals import IntegralSet
from qcafqmc.shadows import sample_signed_permutation


def idx(s):
    return bits_to_index([int(c) for c in s])


def conj_residual(Q):
    n = Q.shape[0] // 2
    U = majorana_unitary(Q).unitary
    g = majorana_matrices(n)
    lhs = np.einsum("ij,mjk,kl->mil", U.conj().T, g, U)
    rhs = np.einsum("mn,nil->mil", Q, g)
    return np.max(np.abs(lhs - rhs))


def test_superposition_single_determinant():
    tr = build_trial(FockState.basis("1100"), 2)
    amp = tr.superposition.amplitudes
    assert amp[0] == pytest.approx(1 / np.sqrt(2))
    assert amp[idx("1100")] == pytest.approx(1 / np.sqrt(2))
    assert np.count_nonzero(np.abs(amp) > 1e-15) == 2


def test_superposition_two_determinants():
    psi = FockState.from_dict(4, {"1100": 1.0, "0011": 1.0})
    amp = build_trial(psi, 2).superposition.amplitudes
    assert amp[0] == pytest.approx(1 / np.sqrt(2))
    assert amp[idx("1100")] == pytest.approx(0.5)
    assert amp[idx("0011")] == pytest.approx(0.5)


def test_sector_violation():
    psi = FockState.from_dict(4, {"1100": 1.0, "1000": 1.0})
    with pytest.raises(SectorViolationError):
        build_trial(psi, 2)


def test_bit_order_orbital_zero_is_lsb():
    assert idx("1000") == 1
    a = [x.toarray() for x in annihilators(3)]
    # a_0 acting on |100> gives the vacuum
    v = np.zeros(8)
    v[idx("100")] = 1
    assert abs((a[0] @ v)[0]) == 1


def test_majorana_definitions():
    n = 2
    g = majorana_matrices(n)
    a = [x.toarray() for x in annihilators(n)]
    for j in range(n):
        np.testing.assert_allclose(g[2 * j], a[j] + a[j].conj().T)
        np.testing.assert_allclose(g[2 * j + 1], -1j * (a[j] - a[j].conj().T))
    for m in range(2 * n):
        for k in range(2 * n):
            anti = g[m] @ g[k] + g[k] @ g[m]
            np.testing.assert_allclose(anti, 2 * np.eye(4) * (m == k), atol=1e-14)


def test_identity_rotation():
    U = majorana_unitary(np.eye(6)).unitary
    np.testing.assert_allclose(U, np.eye(8), atol=1e-14)


def test_last_pair_flip():
    Q = np.diag([1.0, 1, 1, 1, -1, -1])
    assert conj_residual(Q) < 1e-12


def test_random_signed_permutation_conjugation(rng):
    for _ in range(5):
        Q = sample_signed_permutation(rng, 6).matrix.astype(float)
        assert conj_residual(Q) < 1e-9


def test_random_so_rotation_conjugation_and_unitarity():
    for seed in range(3):
        Q = special_ortho_group.rvs(8, random_state=seed)
        U = majorana_unitary(Q).unitary
        assert np.max(np.abs(U.conj().T @ U - np.eye(16))) < 1e-9
        assert conj_residual(Q) < 1e-9


def test_apply_matches_dense(rng):
    Q = special_ortho_group.rvs(6, random_state=5)
    R = majorana_unitary(Q)
    psi = rng.normal(size=8) + 1j * rng.normal(size=8)
    got, ref = R.apply(psi), R.unitary @ psi
    # gate-by-gate application skips the global phase convention of the dense unitary
    ph = np.vdot(ref, got) / np.vdot(ref, ref)
    assert abs(abs(ph) - 1) < 1e-12
    np.testing.assert_allclose(got, ph * ref, atol=1e-12)


def test_homomorphism_up_to_phase(rng):
    Q1 = special_ortho_group.rvs(8, random_state=1)
    Q2 = special_ortho_group.rvs(8, random_state=2)
    U1, U2 = majorana_unitary(Q1).unitary, majorana_unitary(Q2).unitary
    U12 = majorana_unitary(Q1 @ Q2).unitary
    # U+ gamma U = Q gamma composes as U_{Q1 Q2} = U_{Q1} U_{Q2} up to a phase
    M = U1 @ U2
    ph = np.vdot(U12.reshape(-1), M.reshape(-1)) / 16
    assert abs(abs(ph) - 1) < 1e-9
    np.testing.assert_allclose(M, ph * U12, atol=1e-9)


def test_invalid_rotations():
    with pytest.raises(InvalidRotationError):
        majorana_unitary(np.ones((4, 4)))
    with pytest.raises(UnsupportedParityError):
        majorana_unitary(np.diag([1.0, 1, 1, -1]))


def test_pair_preserving_permutation_keeps_popcount(rng):
    # permuting whole Majorana pairs maps number states to number states
    perm = np.array([2, 3, 0, 1, 4, 5])
    Q = np.eye(6)[perm]
    U = majorana_unitary(Q).unitary
    for x in range(8):
        e = np.zeros(8)
        e[x] = 1
        out = np.flatnonzero(np.abs(U @ e) > 1e-12)
        assert set(popcount(out).tolist()) == {int(popcount(x))}


def test_measure_basis_state():
    s = FockState.basis("0110")
    r = np.random.default_rng(0)
    for _ in range(20):
        assert "".join(map(str, measure(s, r))) == "0110"


def test_measure_bell_frequency():
    s = FockState.from_dict(2, {"00": 1, "11": 1})
    r = np.random.default_rng(3)
    hits = sum(measure(s, r)[0] == 0 for _ in range(100000))
    assert 0.49 <= hits / 1e5 <= 0.51


def test_measure_chi_square(rng):
    amps = rng.normal(size=8) + 1j * rng.normal(size=8)
    s = FockState(3, amps / np.linalg.norm(amps))
    r = np.random.default_rng(9)
    counts = np.bincount([bits_to_index(measure(s, r)) for _ in range(100000)], minlength=8)
    expect = 1e5 * np.abs(s.amplitudes) ** 2
    stat = np.sum((counts - expect) ** 2 / expect)
    assert stat < chi2.ppf(0.999, 7)


def test_measure_deterministic():
    s = FockState.from_dict(3, {"100": 1, "011": 2j, "111": 1})
    a = [measure(s, np.random.default_rng(5)) for _ in range(3)]
    assert all(np.array_equal(a[0], x) for x in a)


def test_ground_state_h2(reference_energies):
    from conftest import data_path
    from qcafqmc.integrals import load_fcidump

    e, psi = exact_ground_state(load_fcidump(data_path("h2_sto3g.fcidump")))
    assert e == pytest.approx(-1.1372701746609, abs=1e-10)
    assert set(psi.particle_numbers()) == {2}


def test_ground_state_independent_oracle():
    """Dense diagonalization from annihilation operators, independent of the sector code."""
    from conftest import data_path
    from qcafqmc.integrals import load_fcidump

    ints = load_fcidump(data_path("h2_sto3g.fcidump"))
    n = 4
    a = [x.toarray() for x in annihilators(n)]
    H = ints.e_core * np.eye(16, dtype=complex)
    for p in range(2):
        for q in range(2):
            for s in range(2):
                H += ints.t[p, q] * a[2 * p + s].conj().T @ a[2 * q + s]
    for p in range(2):
        for q in range(2):
            for r in range(2):
                for t in range(2):
                    for s1 in range(2):
                        for s2 in range(2):
                            H += 0.5 * ints.eri[p, q, r, t] * (
                                a[2 * p + s1].conj().T @ a[2 * r + s2].conj().T @ a[2 * t + s2] @ a[2 * q + s1]
                            )
    N = sum(a[j].conj().T @ a[j] for j in range(n))
    sector = np.flatnonzero(np.isclose(np.diag(N).real, 2))
    e_ref = np.linalg.eigvalsh(H[np.ix_(sector, sector)])[0]
    assert exact_ground_state(ints)[0] == pytest.approx(e_ref, abs=1e-12)


def test_non_interacting_limit():
    eps = np.array([-1.0, -0.3, 0.2])
    ints = IntegralSet(3, 0.0, np.diag(eps), np.zeros((3,) * 4), 2, 1)
    e, _ = exact_ground_state(ints)
    assert e == pytest.approx(eps[0] + eps[1] + eps[0])  # two alpha, one beta


def test_capacity_errors():
    ints = IntegralSet(1, 0.0, np.eye(1), np.zeros((1,) * 4), 1, 1)
    with pytest.raises(CapacityError):
        exact_ground_state(ints, n_alpha=2, n_beta=0)
    big = IntegralSet(8, 0.0, np.eye(8), np.zeros((8,) * 4), 1, 1)
    with pytest.raises(CapacityError):
        exact_ground_state(big)


def test_sector_determinant(rng):
    V = rng.normal(size=(4, 2)) + 1j * rng.normal(size=(4, 2))
    sec = FockSector(4, 2)
    amps = sec.determinant(V)
    a = [x.toarray() for x in annihilators(4)]
    vac = np.zeros(16)
    vac[0] = 1
    c0 = sum(V[j, 0] * a[j].conj().T for j in range(4))
    c1 = sum(V[j, 1] * a[j].conj().T for j in range(4))
    # det convention: creators applied so that <occ|c0+ c1+|0> matches det(V[occ])
    dense = sec.restrict(c1 @ c0 @ vac)
    dense2 = sec.restrict(c0 @ c1 @ vac)
    assert np.allclose(amps, dense) or np.allclose(amps, dense2)


def test_amplitude_file_round_trip(tmp_path):
    psi = FockState.from_dict(4, {"1100": 0.6, "0011": -0.8j})
    p = tmp_path / "t.amp"
    save_amplitudes(psi, p)
    back = load_amplitudes(p)
    np.testing.assert_allclose(back.amplitudes, psi.amplitudes)
    (tmp_path / "u.amp").write_text("# comment\n1100 1.0 0.0\n")
    assert load_amplitudes(tmp_path / "u.amp").amplitudes[idx("1100")] == 1.0
