"""Dense Fock-space statevector engine.

Bit ``j`` of a basis-state index is the occupation of spin orbital ``j``
(orbital 0 is the least significant bit). The basis state with occupied
orbitals ``i1 < i2 < ...`` is ``a+_{i1} a+_{i2} ... |0>`` under the
Jordan-Wigner map ``a_j = Z_0 ... Z_{j-1} sigma^-_j``. When written as a
string, orbital 0 is the leftmost character.

Majorana operators follow ``gamma_{2j} = a_j + a_j^+`` and
``gamma_{2j+1} = -i (a_j - a_j^+)``.
"""

import functools
import logging
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

logger = logging.getLogger(__name__)

MAX_DENSE_QUBITS = 14


class SectorViolationError(ValueError):
    pass


class InvalidRotationError(ValueError):
    pass


class UnsupportedParityError(ValueError):
    pass


class CapacityError(ValueError):
    pass


# -- bitstring helpers ------------------------------------------------------

def bits_to_index(bits):
    bits = np.asarray(bits, dtype=np.int64)
    return int(np.sum(bits << np.arange(bits.size)))


def index_to_bits(index, n):
    return ((int(index) >> np.arange(n)) & 1).astype(np.uint8)


def bits_to_str(bits):
    return "".join(str(int(b)) for b in bits)


def str_to_bits(s):
    return np.array([int(c) for c in s.strip()], dtype=np.uint8)


def popcount(x):
    x = np.asarray(x, dtype=np.int64)
    out = np.zeros_like(x)
    while np.any(x):
        out += x & 1
        x = x >> 1
    return out


def _parity_below(x, j):
    """(-1)^(number of set bits of x below position j)."""
    return 1 - 2 * (popcount(np.asarray(x) & ((1 << j) - 1)) & 1)


# -- states -----------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class FockState:
    n_qubits: int
    amplitudes: np.ndarray

    def __post_init__(self):
        amp = np.asarray(self.amplitudes, dtype=complex).reshape(-1)
        if amp.size != 2**self.n_qubits:
            raise ValueError(f"expected {2**self.n_qubits} amplitudes, got {amp.size}")
        norm = np.linalg.norm(amp)
        if abs(norm - 1.0) > 1e-10:
            raise ValueError(f"state not normalized (norm {norm:.12f})")
        amp = amp.copy()
        amp.setflags(write=False)
        object.__setattr__(self, "amplitudes", amp)

    @classmethod
    def basis(cls, bits):
        bits = str_to_bits(bits) if isinstance(bits, str) else np.asarray(bits)
        amp = np.zeros(2 ** bits.size, dtype=complex)
        amp[bits_to_index(bits)] = 1.0
        return cls(bits.size, amp)

    @classmethod
    def from_dict(cls, n_qubits, amps, normalize=True):
        """Build from ``{bitstring: amplitude}``."""
        vec = np.zeros(2**n_qubits, dtype=complex)
        for key, val in amps.items():
            bits = str_to_bits(key) if isinstance(key, str) else np.asarray(key)
            if bits.size != n_qubits:
                raise ValueError(f"bitstring {key!r} has {bits.size} bits, expected {n_qubits}")
            vec[bits_to_index(bits)] += val
        if normalize:
            vec /= np.linalg.norm(vec)
        return cls(n_qubits, vec)

    def particle_numbers(self):
        """Popcount of every basis state carrying weight."""
        idx = np.flatnonzero(np.abs(self.amplitudes) > 1e-14)
        return np.unique(popcount(idx))


@dataclass(frozen=True, eq=False)
class TrialState:
    psi_t: FockState
    eta: int
    superposition: FockState = field(init=False)

    def __post_init__(self):
        amp = np.asarray(self.psi_t.amplitudes).copy()
        amp[0] += 1.0
        amp /= np.sqrt(2.0)
        object.__setattr__(self, "superposition", FockState(self.psi_t.n_qubits, amp))

    @property
    def n_qubits(self):
        return self.psi_t.n_qubits


def build_trial(psi_t, eta):
    """Wrap ``psi_t`` and cache ``(|0...0> + |psi_t>)/sqrt(2)``."""
    if eta < 1:
        raise SectorViolationError("trial state needs at least one electron")
    idx = np.flatnonzero(np.abs(psi_t.amplitudes) > 1e-12)
    bad = idx[popcount(idx) != eta]
    if bad.size:
        raise SectorViolationError(
            f"amplitude on {bits_to_str(index_to_bits(bad[0], psi_t.n_qubits))} "
            f"outside the {eta}-electron sector"
        )
    return TrialState(psi_t, int(eta))


def load_amplitudes(path, n_qubits=None):
    """Read ``bitstring re im`` lines; unlisted bitstrings are zero."""
    amps = {}
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.split("#")[0].strip()
            if not line:
                continue
            parts = line.split()
            if len(parts) != 3:
                raise ValueError(f"{path}:{lineno}: expected 'bitstring re im'")
            amps[parts[0]] = amps.get(parts[0], 0) + complex(float(parts[1]), float(parts[2]))
    if not amps:
        raise ValueError(f"{path}: no amplitudes")
    n = len(next(iter(amps)))
    if n_qubits is not None and n != n_qubits:
        raise ValueError(f"{path}: {n}-qubit amplitudes, expected {n_qubits}")
    return FockState.from_dict(n, amps, normalize=False)


def save_amplitudes(state, path, tol=1e-14):
    with open(path, "w") as fh:
        for idx in np.flatnonzero(np.abs(state.amplitudes) > tol):
            a = state.amplitudes[idx]
            fh.write(f"{bits_to_str(index_to_bits(idx, state.n_qubits))} {float(a.real)!r} {float(a.imag)!r}\n")


# -- Majorana operators -----------------------------------------------------

@functools.lru_cache(maxsize=None)
def majorana_action(n):
    """Return (flip_mask, phase) arrays so that ``(gamma_mu psi)[y] = phase[mu, y] psi[y ^ mask[mu]]``."""
    dim = 2**n
    x = np.arange(dim)
    masks = np.zeros(2 * n, dtype=np.int64)
    phases = np.zeros((2 * n, dim), dtype=complex)
    for j in range(n):
        src = x ^ (1 << j)
        sign = _parity_below(src, j)
        occ_src = (src >> j) & 1
        masks[2 * j] = masks[2 * j + 1] = 1 << j
        phases[2 * j] = sign
        # Y|0> = i|1>, Y|1> = -i|0>
        phases[2 * j + 1] = sign * np.where(occ_src == 0, 1j, -1j)
    masks.setflags(write=False)
    phases.setflags(write=False)
    return masks, phases


def apply_majorana(mu, psi, n):
    masks, phases = majorana_action(n)
    return phases[mu] * psi[np.arange(psi.size) ^ masks[mu]]


@functools.lru_cache(maxsize=None)
def majorana_matrices(n):
    """Dense ``2^n x 2^n`` Majorana matrices (small ``n`` only)."""
    masks, phases = majorana_action(n)
    dim = 2**n
    y = np.arange(dim)
    out = np.zeros((2 * n, dim, dim), dtype=complex)
    for mu in range(2 * n):
        out[mu, y, y ^ masks[mu]] = phases[mu]
    out.setflags(write=False)
    return out


@functools.lru_cache(maxsize=None)
def annihilators(n):
    """Sparse JW annihilation operators on the full ``2^n`` space."""
    dim = 2**n
    x = np.arange(dim)
    ops = []
    for j in range(n):
        occ = ((x >> j) & 1).astype(bool)
        src = x[occ]
        dst = src ^ (1 << j)
        ops.append(sp.csr_matrix((_parity_below(src, j).astype(float), (dst, src)), shape=(dim, dim)))
    return ops


# -- Gaussian unitaries ------------------------------------------------------

def _rotation(n2, a, b, theta):
    r = np.eye(n2)
    c, s = np.cos(theta), np.sin(theta)
    r[a, a] = r[b, b] = c
    r[a, b] = s
    r[b, a] = -s
    return r


def givens_decomposition(Q, tol=1e-12):
    """Factor ``Q in SO(2N)`` as a product of plane rotations.

    Returns a list of ``(a, b, theta)`` with ``Q = R_1 R_2 ... R_k`` where
    ``R(a, b, theta)`` has ``cos`` on the diagonal and ``+sin`` at ``[a, b]``.
    Angles that vanish are dropped, so signed permutations yield short lists.
    """
    Q = np.asarray(Q, dtype=float)
    n2 = Q.shape[0]
    work = Q.copy()
    left = []
    for col in range(n2):
        for row in range(n2 - 1, col, -1):
            xb = work[row, col]
            if abs(xb) < tol:
                continue
            xa = work[col, col]
            theta = np.arctan2(xb, xa)
            # R(col, row, theta) zeroes work[row, col]; Q = R^T ... = R(col,row,-theta) ...
            work = _rotation(n2, col, row, theta) @ work
            left.append((col, row, -theta))
    diag = np.round(np.diag(work)).astype(int)
    negs = list(np.flatnonzero(diag < 0))
    if len(negs) % 2:
        raise UnsupportedParityError("orthogonal matrix has det -1")
    gates = list(left)
    for a, b in zip(negs[::2], negs[1::2]):
        gates.append((int(a), int(b), np.pi))
    return [(int(a), int(b), float(t)) for a, b, t in gates]


def _gate_matrix(n, a, b, theta):
    g = majorana_matrices(n)
    return np.cos(theta / 2) * np.eye(2**n) + np.sin(theta / 2) * (g[a] @ g[b])


def apply_gates(psi, gates, n):
    """Apply ``prod exp(theta/2 gamma_a gamma_b)`` (first gate leftmost) to a statevector."""
    out = np.asarray(psi, dtype=complex)
    for a, b, theta in reversed(gates):
        c, s = np.cos(theta / 2), np.sin(theta / 2)
        gg = apply_majorana(a, apply_majorana(b, out, n), n)
        out = c * out + s * gg
    return out


def _check_orthogonal(Q):
    Q = np.asarray(Q, dtype=float)
    if Q.ndim != 2 or Q.shape[0] != Q.shape[1] or Q.shape[0] % 2:
        raise InvalidRotationError(f"expected a 2N x 2N matrix, got {Q.shape}")
    dev = np.max(np.abs(Q.T @ Q - np.eye(Q.shape[0])))
    if dev > 1e-10:
        raise InvalidRotationError(f"matrix not orthogonal (|Q^T Q - I| = {dev:.2e})")
    if np.linalg.det(Q) < 0:
        raise UnsupportedParityError("orthogonal matrix has det -1")
    return Q


@dataclass(frozen=True, eq=False)
class MajoranaRotation:
    """Gaussian unitary ``U`` with ``U^+ gamma_mu U = sum_nu Q[mu, nu] gamma_nu``."""

    Q: np.ndarray
    gates: list

    @property
    def n_qubits(self):
        return self.Q.shape[0] // 2

    @functools.cached_property
    def unitary(self):
        n = self.n_qubits
        u = np.eye(2**n, dtype=complex)
        for a, b, theta in self.gates:
            u = u @ _gate_matrix(n, a, b, theta)
        # phase convention: first nonzero entry of the first column is real positive
        col = u[:, 0]
        k = np.flatnonzero(np.abs(col) > 1e-12)[0]
        u = u * (abs(col[k]) / col[k])
        u.setflags(write=False)
        return u

    def apply(self, psi):
        return apply_gates(psi, self.gates, self.n_qubits)


def majorana_unitary(Q):
    Q = _check_orthogonal(Q)
    return MajoranaRotation(Q.copy(), givens_decomposition(Q))


# -- measurement --------------------------------------------------------------

def measure(state, rng):
    """Sample one computational-basis outcome; returns the bit array (orbital 0 first)."""
    amps = state.amplitudes if isinstance(state, FockState) else np.asarray(state)
    n = int(np.log2(amps.size))
    probs = np.abs(amps) ** 2
    cdf = np.cumsum(probs)
    idx = int(np.searchsorted(cdf, rng.random() * cdf[-1], side="right"))
    return index_to_bits(min(idx, amps.size - 1), n)


# -- fixed-particle-number sectors ---------------------------------------------

class FockSector:
    """Basis of determinants with fixed particle number (and optionally fixed spin counts)."""

    def __init__(self, n_qubits, n_particles, n_alpha=None):
        self.n_qubits = n_qubits
        self.n_particles = n_particles
        allx = np.arange(2**n_qubits, dtype=np.int64)
        keep = popcount(allx) == n_particles
        if n_alpha is not None:
            amask = sum(1 << (2 * i) for i in range((n_qubits + 1) // 2))
            keep &= popcount(allx & amask) == n_alpha
        self.states = allx[keep]
        self.index = {int(s): i for i, s in enumerate(self.states)}
        self._lookup = np.full(2**n_qubits, -1, dtype=np.int64)
        self._lookup[self.states] = np.arange(self.states.size)
        self._hops = {}

    @property
    def dim(self):
        return self.states.size

    def occupations(self):
        """Boolean array ``(dim, n_qubits)``."""
        return ((self.states[:, None] >> np.arange(self.n_qubits)) & 1).astype(bool)

    def hop(self, p, q):
        """Sparse ``a+_p a_q`` restricted to the sector."""
        key = (p, q)
        if key not in self._hops:
            s = self.states
            occ_q = ((s >> q) & 1).astype(bool)
            src = s[occ_q]
            mid = src ^ (1 << q)
            sign = _parity_below(src, q)
            if p != q:
                ok = ((mid >> p) & 1) == 0
            else:
                ok = np.ones(mid.size, dtype=bool)
            src, mid, sign = src[ok], mid[ok], sign[ok]
            dst = mid | (1 << p)
            sign = sign * _parity_below(mid, p)
            rows = self._lookup[dst]
            cols = self._lookup[src]
            valid = rows >= 0
            self._hops[key] = sp.csr_matrix(
                (sign[valid].astype(float), (rows[valid], cols[valid])), shape=(self.dim, self.dim)
            )
        return self._hops[key]

    def embed(self, vec):
        """Sector vector -> full ``2^n`` vector."""
        full = np.zeros(2**self.n_qubits, dtype=complex)
        full[self.states] = vec
        return full

    def restrict(self, full):
        return np.asarray(full)[self.states]

    def determinant(self, V):
        """Amplitudes ``det(V[occ, :])`` of the Slater determinant with orbital columns ``V``."""
        V = np.asarray(V)
        occ = self.occupations()
        rows = np.nonzero(occ)[1].reshape(self.dim, self.n_particles)
        return np.linalg.det(V[rows, :])


def spin_one_body(h):
    """Spatial one-body matrix -> interleaved spin-orbital matrix."""
    return np.kron(h, np.eye(2))


def hamiltonian_matrix(ints, sector):
    """Sparse many-body Hamiltonian of an IntegralSet in a FockSector (no Cholesky)."""
    n = ints.n_orb
    dim = sector.dim

    def excitation(p, q):
        return sector.hop(2 * p, 2 * q) + sector.hop(2 * p + 1, 2 * q + 1)

    E = [[excitation(p, q) for q in range(n)] for p in range(n)]
    H = sp.identity(dim, format="csr") * ints.e_core
    for p in range(n):
        for q in range(n):
            coef = ints.t[p, q] - 0.5 * np.trace(ints.eri[p, :, :, q])
            if coef:
                H = H + coef * E[p][q]
    for p in range(n):
        for q in range(n):
            W = sp.csr_matrix((dim, dim))
            for r in range(n):
                for s in range(n):
                    g = ints.eri[p, q, r, s]
                    if g:
                        W = W + g * E[r][s]
            if W.nnz:
                H = H + 0.5 * (E[p][q] @ W)
    return H.tocsr()


def _system_integrals(system):
    from .integrals import CholeskyHamiltonian, EmbeddedSystem, IntegralSet

    if isinstance(system, EmbeddedSystem):
        return system.active_ints
    if isinstance(system, CholeskyHamiltonian):
        return system.to_integrals()
    if isinstance(system, IntegralSet):
        return system
    raise TypeError(f"cannot build a Hamiltonian from {type(system).__name__}")


def exact_ground_state(system, n_alpha=None, n_beta=None):
    """Lowest eigenpair in the requested (alpha, beta) sector by dense diagonalization.

    Returns the energy (including ``e_core``) and the normalized ground state
    embedded in the full ``2^N`` Fock space.
    """
    ints = _system_integrals(system)
    na = ints.n_alpha if n_alpha is None else n_alpha
    nb = ints.n_beta if n_beta is None else n_beta
    nq = 2 * ints.n_orb
    if nq > MAX_DENSE_QUBITS:
        raise CapacityError(f"{nq} spin orbitals exceed the dense budget of {MAX_DENSE_QUBITS}")
    if na + nb > nq or max(na, nb) > ints.n_orb or min(na, nb) < 0:
        raise CapacityError(f"sector ({na}, {nb}) does not fit {nq} spin orbitals")
    sector = FockSector(nq, na + nb, n_alpha=na)
    H = hamiltonian_matrix(ints, sector).toarray()
    evals, evecs = np.linalg.eigh(0.5 * (H + H.T))
    vec = evecs[:, 0]
    k = np.argmax(np.abs(vec))
    vec = vec * (abs(vec[k]) / vec[k])
    return float(evals[0]), FockState(nq, sector.embed(vec))
