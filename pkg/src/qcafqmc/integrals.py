"""Electronic-structure integrals, FCIDUMP I/O, Cholesky factorization and
frozen-core embedding.

Conventions used throughout the package:

* ``eri[p, q, r, s]`` is the chemists' integral ``(pq|rs)`` over real spatial
  orbitals, exactly as stored in FCIDUMP records.
* ``L[g, p, q]`` are Cholesky vectors with ``(pq|rs) = sum_g L[g,p,q] L[g,r,s]``.
* Spin orbitals are interleaved: spin orbital ``2*i`` is alpha ``i`` and
  ``2*i + 1`` is beta ``i``.
"""

import hashlib
import logging
import re
import struct
from dataclasses import dataclass, field

import numpy as np

logger = logging.getLogger(__name__)

SYMMETRY_TOL = 1e-10
PSD_TOL = 1e-8
DEFAULT_CHOL_TOL = 1e-8

_CACHE_MAGIC = b"QCAFCHOL"
_CACHE_VERSION = 1


class MalformedInputError(ValueError):
    """Unparseable integral file."""


class InconsistentIntegralsError(ValueError):
    """Integrals violate permutational symmetry or positivity."""


class NotPSDError(np.linalg.LinAlgError):
    """Negative pivot encountered during Cholesky factorization."""


class PartitionError(ValueError):
    """Invalid core/active orbital selection."""


class CacheFormatError(ValueError):
    """Bad or incompatible Cholesky cache file."""


def _check_symmetry(t, eri, tol=SYMMETRY_TOL):
    dev = np.max(np.abs(t - t.T), initial=0.0)
    if dev > tol:
        raise InconsistentIntegralsError(f"one-electron integrals not symmetric (max dev {dev:.2e})")
    for perm in ((1, 0, 2, 3), (0, 1, 3, 2), (2, 3, 0, 1)):
        dev = np.max(np.abs(eri - eri.transpose(perm)), initial=0.0)
        if dev > tol:
            raise InconsistentIntegralsError(
                f"two-electron integrals break symmetry {perm} (max dev {dev:.2e})"
            )


def pair_matrix(eri):
    """View ``(pq|rs)`` as the ``(n^2, n^2)`` matrix over pair indices (pq), (rs)."""
    n = eri.shape[0]
    return eri.reshape(n * n, n * n)


@dataclass(frozen=True, eq=False)
class IntegralSet:
    """Spatial-orbital Hamiltonian ``e_core + sum t_pq E_pq + 1/2 sum (pq|rs) ...``."""

    n_orb: int
    e_core: float
    t: np.ndarray
    eri: np.ndarray
    n_alpha: int
    n_beta: int

    def __post_init__(self):
        t = np.ascontiguousarray(self.t, dtype=float)
        eri = np.ascontiguousarray(self.eri, dtype=float)
        n = self.n_orb
        if t.shape != (n, n) or eri.shape != (n, n, n, n):
            raise InconsistentIntegralsError(
                f"shape mismatch: n_orb={n}, t {t.shape}, eri {eri.shape}"
            )
        _check_symmetry(t, eri)
        if n:
            evals = np.linalg.eigvalsh(0.5 * (pair_matrix(eri) + pair_matrix(eri).T))
            if evals[0] < -PSD_TOL:
                raise InconsistentIntegralsError(
                    f"pair matrix not positive semidefinite (min eigenvalue {evals[0]:.3e})"
                )
        if self.n_alpha < 0 or self.n_beta < 0 or max(self.n_alpha, self.n_beta) > n:
            raise InconsistentIntegralsError(
                f"electron counts ({self.n_alpha}, {self.n_beta}) do not fit {n} orbitals"
            )
        t.setflags(write=False)
        eri.setflags(write=False)
        object.__setattr__(self, "t", t)
        object.__setattr__(self, "eri", eri)
        object.__setattr__(self, "e_core", float(self.e_core))

    @property
    def n_elec(self):
        return self.n_alpha + self.n_beta

    @property
    def n_qubits(self):
        return 2 * self.n_orb


def symmetrize_eri(eri):
    """Fill the 8-fold permutational symmetry from whichever entries are set.

    Entries that appear more than once must agree; the nonzero one wins when
    only one of the partners has been given.
    """
    out = np.zeros_like(eri)
    perms = [
        (0, 1, 2, 3), (1, 0, 2, 3), (0, 1, 3, 2), (1, 0, 3, 2),
        (2, 3, 0, 1), (3, 2, 0, 1), (2, 3, 1, 0), (3, 2, 1, 0),
    ]
    for perm in perms:
        view = eri.transpose(perm)
        take = (out == 0) & (view != 0)
        out[take] = view[take]
    return out


def _parse_header(text):
    m = re.search(r"&FCI(.*?)(&END|/)", text, flags=re.S | re.I)
    if m is None:
        raise MalformedInputError("line 1: missing &FCI ... &END header")
    body = m.group(1)
    fields = {}
    for key in ("NORB", "NELEC", "MS2"):
        km = re.search(rf"\b{key}\s*=\s*(-?\d+)", body, flags=re.I)
        if km:
            fields[key] = int(km.group(1))
    if "NORB" not in fields or "NELEC" not in fields:
        raise MalformedInputError("line 1: header lacks NORB or NELEC")
    fields.setdefault("MS2", 0)
    header_lines = text[: m.end()].count("\n") + 1
    return fields, m.end(), header_lines


def load_fcidump(path):
    """Read an FCIDUMP file (1-based indices, chemists' notation)."""
    with open(path) as fh:
        text = fh.read()
    hdr, end, line_no = _parse_header(text)
    n = hdr["NORB"]
    nelec = hdr["NELEC"]
    ms2 = hdr["MS2"]
    if (nelec + ms2) % 2:
        raise MalformedInputError(f"line 1: NELEC={nelec} and MS2={ms2} have inconsistent parity")
    t = np.zeros((n, n))
    eri = np.zeros((n, n, n, n))
    e_core = 0.0
    rest = text[end:].split("\n")
    # the remainder of the header line counts as the first record line
    for offset, line in enumerate(rest):
        lineno = line_no + offset
        line = line.strip()
        if not line:
            continue
        parts = line.split()
        if len(parts) != 5:
            raise MalformedInputError(f"line {lineno}: expected 'value i j k l', got {line!r}")
        try:
            val = float(parts[0].replace("D", "E").replace("d", "e"))
            i, j, k, l = (int(x) for x in parts[1:])
        except ValueError as err:
            raise MalformedInputError(f"line {lineno}: {err}") from None
        if min(i, j, k, l) < 0 or max(i, j, k, l) > n:
            raise MalformedInputError(f"line {lineno}: index out of range for NORB={n}")
        if i == j == k == l == 0:
            e_core = val
        elif k == 0 and l == 0:
            if j == 0:
                continue  # orbital energy record
            t[i - 1, j - 1] = t[j - 1, i - 1] = val
        elif i and j and k and l:
            eri[i - 1, j - 1, k - 1, l - 1] = val
        else:
            raise MalformedInputError(f"line {lineno}: unrecognized index pattern {i} {j} {k} {l}")
    eri = symmetrize_eri(eri)
    n_alpha = (nelec + ms2) // 2
    n_beta = (nelec - ms2) // 2
    return IntegralSet(n, e_core, t, eri, n_alpha, n_beta)


def write_fcidump(ints, path, tol=1e-15):
    """Write ``ints`` in FCIDUMP format, unique (i>=j, k>=l, ij>=kl) records only."""
    n = ints.n_orb
    lines = [
        f" &FCI NORB={n},NELEC={ints.n_elec},MS2={ints.n_alpha - ints.n_beta},",
        "  ORBSYM=" + "1," * n,
        "  ISYM=1,",
        " &END",
    ]
    for i in range(n):
        for j in range(i + 1):
            for k in range(n):
                for l in range(k + 1):
                    if i * (i + 1) // 2 + j < k * (k + 1) // 2 + l:
                        continue
                    v = ints.eri[i, j, k, l]
                    if abs(v) > tol:
                        lines.append(f"{float(v)!r:>24} {i + 1:4d} {j + 1:4d} {k + 1:4d} {l + 1:4d}")
    for i in range(n):
        for j in range(i + 1):
            v = ints.t[i, j]
            if abs(v) > tol:
                lines.append(f"{float(v)!r:>24} {i + 1:4d} {j + 1:4d}    0    0")
    lines.append(f"{float(ints.e_core)!r:>24}    0    0    0    0")
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


@dataclass(frozen=True, eq=False)
class CholeskyHamiltonian:
    """``H = e_core + v0 - 1/2 sum_g v_g^2`` with ``v_g = i sum_pq L[g,p,q] E_pq``."""

    n_orb: int
    e_core: float
    t: np.ndarray
    L: np.ndarray
    n_alpha: int
    n_beta: int
    chol_tol: float = DEFAULT_CHOL_TOL
    v0: np.ndarray = field(init=False)

    def __post_init__(self):
        L = np.ascontiguousarray(self.L, dtype=float).reshape(-1, self.n_orb, self.n_orb)
        t = np.ascontiguousarray(self.t, dtype=float)
        v0 = t - 0.5 * np.einsum("gpr,grq->pq", L, L)
        for arr in (L, t, v0):
            arr.setflags(write=False)
        object.__setattr__(self, "L", L)
        object.__setattr__(self, "t", t)
        object.__setattr__(self, "v0", v0)

    @property
    def n_chol(self):
        return self.L.shape[0]

    @property
    def n_elec(self):
        return self.n_alpha + self.n_beta

    @property
    def n_qubits(self):
        return 2 * self.n_orb

    def eri(self):
        """Reconstructed ``(pq|rs)``."""
        return np.einsum("gpq,grs->pqrs", self.L, self.L)

    def to_integrals(self):
        eri = self.eri()
        eri = 0.5 * (eri + eri.transpose(1, 0, 2, 3))
        return IntegralSet(self.n_orb, self.e_core, self.t, eri, self.n_alpha, self.n_beta)

    def spin_orbital_one_body(self, h):
        """Lift a spatial one-body matrix to interleaved spin orbitals."""
        return np.kron(h, np.eye(2))

    def content_hash(self):
        """SHA-256 over the defining arrays; used to validate checkpoints."""
        h = hashlib.sha256()
        h.update(struct.pack("<IIId", self.n_orb, self.n_alpha, self.n_beta, self.e_core))
        h.update(np.ascontiguousarray(self.t, dtype="<f8").tobytes())
        h.update(np.ascontiguousarray(self.L, dtype="<f8").tobytes())
        return h.hexdigest()


def _pivoted_cholesky(m, tol):
    """Pivoted incomplete Cholesky of a PSD matrix; returns vectors as rows."""
    diag = np.array(np.diag(m), dtype=float)
    if diag.size and diag.min() < -tol:
        raise NotPSDError(f"negative diagonal {diag.min():.3e} in pair matrix")
    vecs = []
    while diag.size:
        dmax = diag.max()
        if dmax < tol:
            break
        # ties within 1e-14 go to the lowest pair index
        piv = int(np.flatnonzero(diag >= dmax - 1e-14)[0])
        col = np.array(m[:, piv], dtype=float)
        for v in vecs:
            col -= v * v[piv]
        if col[piv] < -tol:
            raise NotPSDError(f"negative pivot {col[piv]:.3e} at pair index {piv}")
        vec = col / np.sqrt(diag[piv])
        vecs.append(vec)
        diag = diag - vec**2
        if diag.min() < -10 * tol:
            raise NotPSDError(f"residual diagonal went negative ({diag.min():.3e})")
    return np.array(vecs).reshape(len(vecs), -1)


def cholesky_factorize(ints, tol=DEFAULT_CHOL_TOL):
    """Factor ``(pq|rs)`` into Cholesky vectors until the residual diagonal is below ``tol``."""
    n = ints.n_orb
    vecs = _pivoted_cholesky(pair_matrix(ints.eri), tol)
    L = vecs.reshape(-1, n, n)
    L = 0.5 * (L + L.transpose(0, 2, 1))
    logger.debug("Cholesky: %d vectors for %d orbitals at tol %.1e", L.shape[0], n, tol)
    return CholeskyHamiltonian(n, ints.e_core, ints.t, L, ints.n_alpha, ints.n_beta, tol)


def save_cholesky(ham, path):
    """Versioned little-endian binary cache of a CholeskyHamiltonian."""
    header = struct.pack(
        "<8sIIIIIdd", _CACHE_MAGIC, _CACHE_VERSION, ham.n_orb, ham.n_chol,
        ham.n_alpha, ham.n_beta, ham.e_core, ham.chol_tol,
    )
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(np.ascontiguousarray(ham.t, dtype="<f8").tobytes())
        fh.write(np.ascontiguousarray(ham.L, dtype="<f8").tobytes())


def load_cholesky(path):
    with open(path, "rb") as fh:
        data = fh.read()
    size = struct.calcsize("<8sIIIIIdd")
    if len(data) < size:
        raise CacheFormatError(f"{path}: truncated header")
    magic, version, n, nchol, na, nb, e_core, tol = struct.unpack_from("<8sIIIIIdd", data)
    if magic != _CACHE_MAGIC:
        raise CacheFormatError(f"{path}: not a Cholesky cache")
    if version != _CACHE_VERSION:
        raise CacheFormatError(f"{path}: cache version {version}, expected {_CACHE_VERSION}")
    body = np.frombuffer(data, dtype="<f8", offset=size)
    if body.size != n * n * (1 + nchol):
        raise CacheFormatError(f"{path}: truncated payload")
    t = body[: n * n].reshape(n, n)
    L = body[n * n:].reshape(nchol, n, n)
    return CholeskyHamiltonian(n, e_core, t.copy(), L.copy(), na, nb, tol)


@dataclass(frozen=True, eq=False)
class EmbeddedSystem:
    """Frozen-core active space together with the full-space Hamiltonian."""

    n_full: int
    core: tuple
    active: tuple
    virtual: tuple
    active_ints: IntegralSet
    full_ints: IntegralSet
    full_ham: CholeskyHamiltonian


def _check_partition(n, core, active):
    core = tuple(int(i) for i in core)
    active = tuple(int(i) for i in active)
    every = core + active
    if any(i < 0 or i >= n for i in every):
        raise PartitionError(f"orbital index out of range [0, {n})")
    if len(set(every)) != len(every):
        raise PartitionError(f"core {core} and active {active} overlap or repeat")
    if not active:
        raise PartitionError("active space is empty")
    virtual = tuple(i for i in range(n) if i not in set(every))
    return core, active, virtual


def frozen_core_integrals(ints, core, active):
    """Active-space integrals with the doubly occupied core folded in."""
    core, active, _ = _check_partition(ints.n_orb, core, active)
    nc = len(core)
    if nc > min(ints.n_alpha, ints.n_beta):
        raise PartitionError(f"{nc} core orbitals need more electrons than available")
    c = list(core)
    a = list(active)
    eri = ints.eri
    t = ints.t
    if nc:
        j = np.einsum("pqcc->pq", eri[:, :, c][:, :, :, c])
        k = np.einsum("pccq->pq", eri[:, c][:, :, c])
        fock_core = t + 2.0 * j - k
        e_frozen = float(np.sum(t[c, c]) + np.trace(fock_core[np.ix_(c, c)]))
        t_act = fock_core[np.ix_(a, a)]
    else:
        e_frozen = 0.0
        t_act = t[np.ix_(a, a)]
    eri_act = eri[np.ix_(a, a, a, a)]
    return IntegralSet(
        len(a), ints.e_core + e_frozen, t_act, eri_act, ints.n_alpha - nc, ints.n_beta - nc
    )


def build_embedded(ints, core, active, tol=DEFAULT_CHOL_TOL):
    core, active, virtual = _check_partition(ints.n_orb, core, active)
    if not core and len(active) == ints.n_orb and active == tuple(range(ints.n_orb)):
        act = ints
    else:
        act = frozen_core_integrals(ints, core, active)
    return EmbeddedSystem(
        ints.n_orb, core, active, virtual, act, ints, cholesky_factorize(ints, tol)
    )
