import numpy as np
import pytest

from conftest import data_path
from qcafqmc.focksim import FockSector, exact_ground_state, hamiltonian_matrix
from qcafqmc.integrals import (
    CacheFormatError,
    InconsistentIntegralsError,
    IntegralSet,
    MalformedInputError,
    PartitionError,
    build_embedded,
    cholesky_factorize,
    load_cholesky,
    load_fcidump,
    save_cholesky,
    write_fcidump,
)

H2 = data_path("h2_sto3g.fcidump")


def _write(tmp_path, body, header=" &FCI NORB=2,NELEC=2,MS2=0,\n &END\n"):
    p = tmp_path / "x.fcidump"
    p.write_text(header + body)
    return str(p)


def random_ints(rng, n, rank, na=1, nb=1):
    L = []
    for _ in range(rank):
        a = rng.normal(size=(n, n))
        L.append(a + a.T)
    eri = np.einsum("gpq,grs->pqrs", L, L)
    t = rng.normal(size=(n, n))
    return IntegralSet(n, 0.0, t + t.T, eri, na, nb)


def test_h2_echoes_records():
    ints = load_fcidump(H2)
    assert ints.n_orb == 2 and ints.n_alpha == ints.n_beta == 1
    recs = {}
    for line in open(H2).read().split("&END")[1].split("\n"):
        parts = line.split()
        if len(parts) == 5:
            recs[tuple(int(x) for x in parts[1:])] = float(parts[0])
    for (i, j, k, l), v in recs.items():
        if i and k:
            assert ints.eri[i - 1, j - 1, k - 1, l - 1] == v
        elif i:
            assert ints.t[i - 1, j - 1] == v
        else:
            assert ints.e_core == v


def test_symmetry_fill(tmp_path):
    path = _write(tmp_path, "0.5 1 1 2 2\n1.0 1 1 1 1\n1.0 2 2 2 2\n")
    ints = load_fcidump(path)
    assert ints.eri[0, 0, 1, 1] == ints.eri[1, 1, 0, 0] == 0.5


def test_fortran_exponent(tmp_path):
    ints = load_fcidump(_write(tmp_path, "0.5D+00 1 1 1 1\n-1.25d0 1 1 0 0\n"))
    assert ints.eri[0, 0, 0, 0] == 0.5 and ints.t[0, 0] == -1.25


def test_malformed_line_number(tmp_path):
    with pytest.raises(MalformedInputError, match="line 4"):
        load_fcidump(_write(tmp_path, "0.5 1 1 1 1\n0.5 1 1\n"))


def test_not_psd_rejected(tmp_path, rng):
    # a valid tensor pushed below zero along one pair-index direction
    good = random_ints(rng, 2, 2)
    m = good.eri.reshape(4, 4)
    w, U = np.linalg.eigh(m)
    w[0] = -0.05
    bad = (U * w) @ U.T
    with pytest.raises(InconsistentIntegralsError):
        IntegralSet(2, 0.0, good.t, bad.reshape(2, 2, 2, 2), 1, 1)


def test_asymmetric_rejected():
    eri = np.zeros((2, 2, 2, 2))
    eri[0, 1, 0, 0] = 1.0
    with pytest.raises(InconsistentIntegralsError):
        IntegralSet(2, 0.0, np.eye(2), eri, 1, 1)


def test_rank_one_identity_pattern():
    # (pq|rs) = delta_pq delta_rs is a single product of the identity with itself
    n = 3
    eri = np.einsum("pq,rs->pqrs", np.eye(n), np.eye(n))
    ham = cholesky_factorize(IntegralSet(n, 0.0, np.zeros((n, n)), eri, 1, 1))
    assert ham.n_chol == 1
    np.testing.assert_allclose(np.abs(ham.L[0]), np.eye(n), atol=1e-14)


def test_orbital_diagonal_pattern_has_full_rank():
    n = 3
    eri = np.zeros((n, n, n, n))
    for p in range(n):
        eri[p, p, p, p] = 1.0
    assert cholesky_factorize(IntegralSet(n, 0.0, np.zeros((n, n)), eri, 1, 1)).n_chol == n


def test_h2_reconstruction():
    ints = load_fcidump(H2)
    ham = cholesky_factorize(ints, tol=1e-8)
    assert np.max(np.abs(ham.eri() - ints.eri)) < 1e-7


@pytest.mark.parametrize("rank", [1, 3, 5])
def test_recovers_rank(rng, rank):
    ints = random_ints(rng, 4, rank)
    ham = cholesky_factorize(ints, tol=1e-12)
    assert ham.n_chol == rank
    assert np.max(np.abs(ham.eri() - ints.eri)) <= 10 * 1e-12 * max(1, np.abs(ints.eri).max())


@pytest.mark.parametrize("tol", [1e-4, 1e-6, 1e-8])
def test_reconstruction_within_tolerance(tol):
    ints = load_fcidump(data_path("h4_sto3g.fcidump"))
    ham = cholesky_factorize(ints, tol)
    assert np.max(np.abs(ham.eri() - ints.eri)) <= 10 * tol
    for L in ham.L:
        np.testing.assert_allclose(L, L.T, atol=1e-15)


def test_v0_makes_hamiltonian_exact(reference_energies):
    # FCI of the Cholesky form (through v0) equals FCI of the raw integrals
    for name in ("h2_sto3g", "synthetic4"):
        ints = load_fcidump(data_path(f"{name}.fcidump"))
        ham = cholesky_factorize(ints, tol=1e-12)
        e_chol, _ = exact_ground_state(ham)
        assert abs(e_chol - reference_energies[name]) < 1e-10
        # idempotence: re-factorize the reconstructed tensor
        again = cholesky_factorize(ham.to_integrals(), tol=1e-12)
        assert abs(exact_ground_state(again)[0] - e_chol) < 1e-10


def test_cholesky_form_operator_identity():
    """e_core + v0 - 1/2 sum_g v_g^2 equals the integral Hamiltonian as matrices."""
    from qcafqmc.focksim import annihilators, spin_one_body

    ints = load_fcidump(H2)
    ham = cholesky_factorize(ints, tol=1e-12)
    n = 2 * ints.n_orb
    a = [x.toarray() for x in annihilators(n)]

    def one_body(h):
        hs = spin_one_body(h)
        return sum(hs[p, q] * a[p].conj().T @ a[q] for p in range(n) for q in range(n))

    H = ham.e_core * np.eye(2**n) + one_body(ham.v0)
    for L in ham.L:
        vg = 1j * one_body(L)
        H = H - 0.5 * vg @ vg
    sector = FockSector(n, 2)
    idx = sector.states
    ref = hamiltonian_matrix(ints, sector).toarray()
    np.testing.assert_allclose(H[np.ix_(idx, idx)], ref, atol=1e-10)


def test_cache_round_trip(tmp_path):
    ham = cholesky_factorize(load_fcidump(H2))
    p = tmp_path / "h.bin"
    save_cholesky(ham, p)
    back = load_cholesky(p)
    assert back.content_hash() == ham.content_hash()
    np.testing.assert_array_equal(back.L, ham.L)
    p.write_bytes(p.read_bytes()[:-8])
    with pytest.raises(CacheFormatError):
        load_cholesky(p)


def test_write_read_round_trip(tmp_path, rng):
    ints = random_ints(rng, 3, 2)
    p = tmp_path / "r.fcidump"
    write_fcidump(ints, p)
    back = load_fcidump(p)
    np.testing.assert_allclose(back.eri, ints.eri, atol=1e-14)
    np.testing.assert_allclose(back.t, ints.t, atol=1e-14)


def test_identity_embedding():
    ints = load_fcidump(H2)
    emb = build_embedded(ints, (), (0, 1))
    assert emb.active_ints is ints
    assert emb.virtual == ()


def test_partition_overlap_rejected():
    ints = load_fcidump(data_path("synthetic4.fcidump"))
    with pytest.raises(PartitionError):
        build_embedded(ints, (0,), (0, 1))
    with pytest.raises(PartitionError):
        build_embedded(ints, (0,), (1, 7))


def test_embedding_matches_core_frozen_fci():
    """Frozen-core FCI equals full FCI restricted to determinants with the core doubly occupied."""
    ints = load_fcidump(data_path("synthetic4.fcidump"))
    emb = build_embedded(ints, (0,), (1, 2))
    assert emb.active_ints.n_alpha + emb.active_ints.n_beta == ints.n_elec - 2
    e_act, _ = exact_ground_state(emb.active_ints)
    sector = FockSector(8, 4, n_alpha=2)
    H = hamiltonian_matrix(ints, sector).toarray()
    occ = sector.occupations()
    keep = np.flatnonzero(occ[:, 0] & occ[:, 1] & ~occ[:, 6] & ~occ[:, 7])
    e_ref = np.linalg.eigvalsh(H[np.ix_(keep, keep)])[0]
    assert abs(e_act - e_ref) < 1e-10
