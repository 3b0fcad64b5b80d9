"""Signed-permutation matchgate shadows: sampling, collection and archives."""

import logging
import os
import struct
import time
from dataclasses import dataclass, field

import numpy as np

from .focksim import apply_gates, bits_to_index, givens_decomposition, measure

logger = logging.getLogger(__name__)

ARCHIVE_MAGIC = b"QCAFSHDW"
ARCHIVE_VERSION = 1
CHUNK_SIZE = 4096

# shadow budget per molecule on the ideal simulator in the reference study
REFERENCE_SHADOW_COUNT = 58_482


class ArchiveError(ValueError):
    """Unreadable, truncated or version-mismatched shadow archive."""


def permutation_parity(perm):
    """+1 for even permutations, -1 for odd ones."""
    perm = np.asarray(perm)
    seen = np.zeros(perm.size, dtype=bool)
    sign = 1
    for start in range(perm.size):
        if seen[start]:
            continue
        length = 0
        j = start
        while not seen[j]:
            seen[j] = True
            j = perm[j]
            length += 1
        if length % 2 == 0:
            sign = -sign
    return sign


@dataclass(frozen=True, eq=False)
class SignedPermutation:
    """``Q[perm[mu], mu] = signs[mu]``."""

    perm: np.ndarray
    signs: np.ndarray

    def __post_init__(self):
        perm = np.asarray(self.perm, dtype=np.int64)
        signs = np.asarray(self.signs, dtype=np.int64)
        if sorted(perm.tolist()) != list(range(perm.size)) or signs.shape != perm.shape:
            raise ValueError("not a signed permutation")
        if not np.all(np.abs(signs) == 1):
            raise ValueError("signs must be +-1")
        object.__setattr__(self, "perm", perm)
        object.__setattr__(self, "signs", signs)

    @property
    def n(self):
        return self.perm.size

    @property
    def matrix(self):
        Q = np.zeros((self.n, self.n), dtype=np.int64)
        Q[self.perm, np.arange(self.n)] = self.signs
        return Q

    @property
    def det(self):
        return permutation_parity(self.perm) * int(np.prod(self.signs))

    def __eq__(self, other):
        return (
            isinstance(other, SignedPermutation)
            and np.array_equal(self.perm, other.perm)
            and np.array_equal(self.signs, other.signs)
        )

    __hash__ = None


def sample_signed_permutation(rng, n):
    """Uniform draw from the det = +1 signed permutations of ``n`` (even) coordinates."""
    if n < 2 or n % 2:
        raise ValueError(f"n must be even and >= 2, got {n}")
    perm = rng.permutation(n)
    signs = 2 * rng.integers(0, 2, size=n) - 1
    if permutation_parity(perm) * np.prod(signs) < 0:
        signs[-1] = -signs[-1]
    return SignedPermutation(perm, signs)


def covariance_of(bits):
    """Block-diagonal covariance of the basis state ``|b>``: blocks ``[[0, s], [-s, 0]]``, ``s = (-1)^b_j``."""
    bits = np.asarray(bits, dtype=np.int64)
    n = bits.size
    C = np.zeros((2 * n, 2 * n), dtype=np.int64)
    s = 1 - 2 * bits
    idx = np.arange(n)
    C[2 * idx, 2 * idx + 1] = s
    C[2 * idx + 1, 2 * idx] = -s
    return C


@dataclass(frozen=True, eq=False)
class ShadowSample:
    q: SignedPermutation
    b: np.ndarray

    @property
    def covariance(self):
        """Snapshot covariance ``Q^T C_b Q``."""
        Q = self.q.matrix
        return Q.T @ covariance_of(self.b) @ Q


@dataclass(eq=False)
class ShadowSet:
    """Measured shadows stored column-wise.

    ``perms`` and ``signs`` have shape ``(count, 2N)``; ``bits`` has shape
    ``(count, N)``.
    """

    n_qubits: int
    eta: int
    perms: np.ndarray
    signs: np.ndarray
    bits: np.ndarray
    seed: int = -1
    source: str = "simulator"
    _compiled: object = field(default=None, repr=False)

    def __post_init__(self):
        n = self.n_qubits
        self.perms = np.asarray(self.perms, dtype=np.int64).reshape(-1, 2 * n)
        self.signs = np.asarray(self.signs, dtype=np.int64).reshape(-1, 2 * n)
        self.bits = np.asarray(self.bits, dtype=np.uint8).reshape(-1, n)
        if not (len(self.perms) == len(self.signs) == len(self.bits)):
            raise ValueError("inconsistent sample arrays")

    def __len__(self):
        return len(self.perms)

    def __getitem__(self, i):
        if isinstance(i, slice):
            return ShadowSet(self.n_qubits, self.eta, self.perms[i], self.signs[i], self.bits[i],
                             self.seed, self.source)
        return ShadowSample(SignedPermutation(self.perms[i], self.signs[i]), self.bits[i].copy())

    def __eq__(self, other):
        return (
            isinstance(other, ShadowSet)
            and self.n_qubits == other.n_qubits
            and self.eta == other.eta
            and self.seed == other.seed
            and self.source == other.source
            and np.array_equal(self.perms, other.perms)
            and np.array_equal(self.signs, other.signs)
            and np.array_equal(self.bits, other.bits)
        )

    __hash__ = None

    @classmethod
    def from_samples(cls, n_qubits, eta, samples, seed=-1, source="simulator"):
        perms = np.array([s.q.perm for s in samples]).reshape(-1, 2 * n_qubits)
        signs = np.array([s.q.signs for s in samples]).reshape(-1, 2 * n_qubits)
        bits = np.array([s.b for s in samples]).reshape(-1, n_qubits)
        return cls(n_qubits, eta, perms, signs, bits, seed, source)

    def covariances(self):
        """All snapshot covariances ``Q_p^T C_b Q_p`` as an int array ``(count, 2N, 2N)``."""
        n2 = 2 * self.n_qubits
        count = len(self)
        # (Q^T C Q)[mu, nu] = s_mu s_nu C[perm[mu], perm[nu]]
        cb = np.zeros((count, n2, n2), dtype=np.int64)
        j = np.arange(self.n_qubits)
        s = 1 - 2 * self.bits.astype(np.int64)
        rows = np.arange(count)[:, None]
        cb[rows, 2 * j, 2 * j + 1] = s
        cb[rows, 2 * j + 1, 2 * j] = -s
        gathered = np.take_along_axis(cb, self.perms[:, :, None], axis=1)
        gathered = np.take_along_axis(gathered, self.perms[:, None, :], axis=2)
        return gathered * self.signs[:, :, None] * self.signs[:, None, :]

    def compiled(self):
        """Unique snapshot covariances with multiplicities.

        The estimators depend on a sample only through ``Q^T C_b Q``, so
        duplicates are merged; means over the returned weights equal sample
        means over the full set.
        """
        if self._compiled is None or self._compiled[2] != len(self):
            covs = self.covariances().reshape(len(self), -1).astype(np.int8)
            uniq, counts = np.unique(covs, axis=0, return_counts=True)
            n2 = 2 * self.n_qubits
            self._compiled = (uniq.reshape(-1, n2, n2).astype(float), counts, len(self))
        return self._compiled[0], self._compiled[1]

    def extend(self, other):
        if other.n_qubits != self.n_qubits or other.eta != self.eta:
            raise ValueError("cannot merge shadow sets of different systems")
        return ShadowSet(
            self.n_qubits, self.eta,
            np.concatenate([self.perms, other.perms]),
            np.concatenate([self.signs, other.signs]),
            np.concatenate([self.bits, other.bits]),
            self.seed, self.source,
        )


def _chunk_rng(seed, chunk):
    return np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=(chunk,)))


def _collect_chunk(psi, n, seed, chunk, start, stop):
    """Samples ``start..stop`` (absolute indices) of one chunk stream."""
    rng = _chunk_rng(seed, chunk)
    first = chunk * CHUNK_SIZE
    perms, signs, bits = [], [], []
    for i in range(first, stop):
        q = sample_signed_permutation(rng, 2 * n)
        gates = givens_decomposition(q.matrix)
        out = apply_gates(psi, gates, n)
        b = measure(out, rng)
        if i >= start:
            perms.append(q.perm)
            signs.append(q.signs)
            bits.append(b)
    return perms, signs, bits


def collect(trial, count, seed, start=0, pool=None):
    """Simulate ``count`` single-shot matchgate-shadow measurements of the trial superposition.

    Sample ``i`` is drawn from the stream of chunk ``i // CHUNK_SIZE``, so the
    result for indices ``[start, start + count)`` does not depend on how the
    work is split; this is what makes appending to an archive and parallel
    collection reproducible. ``pool`` may be any object with an ordered
    ``map`` (e.g. ``concurrent.futures`` executors).
    """
    if count < 1:
        raise ValueError("count must be >= 1")
    n = trial.n_qubits
    psi = np.asarray(trial.superposition.amplitudes)
    stop = start + count
    tasks = []
    for chunk in range(start // CHUNK_SIZE, (stop - 1) // CHUNK_SIZE + 1):
        lo = max(start, chunk * CHUNK_SIZE)
        hi = min(stop, (chunk + 1) * CHUNK_SIZE)
        tasks.append((chunk, lo, hi))
    t0 = time.perf_counter()
    runner = map if pool is None else pool.map
    results = list(runner(lambda task: _collect_chunk(psi, n, seed, *task), tasks))
    perms = [p for r in results for p in r[0]]
    signs = [s for r in results for s in r[1]]
    bits = [b for r in results for b in r[2]]
    logger.info("collected %d shadows in %.1f s", count, time.perf_counter() - t0)
    return ShadowSet(n, trial.eta, perms, signs, bits, seed=seed, source="simulator")


# -- archives -----------------------------------------------------------------

_HEADER = "<8sHHHQqB"
_SOURCES = {"simulator": 0, "file": 1, "hardware": 2}


def save(shadows, path):
    """Write a versioned little-endian archive (see README for the layout)."""
    n = shadows.n_qubits
    n2 = 2 * n
    count = len(shadows)
    header = struct.pack(
        _HEADER, ARCHIVE_MAGIC, ARCHIVE_VERSION, n, shadows.eta, count, shadows.seed,
        _SOURCES.get(shadows.source, 1),
    )
    perm_bytes = shadows.perms.astype("<u2").tobytes()
    sign_bits = np.packbits((shadows.signs < 0).astype(np.uint8), axis=1, bitorder="little")
    meas_bits = np.packbits(shadows.bits, axis=1, bitorder="little")
    per_sample = np.concatenate(
        [
            np.frombuffer(perm_bytes, dtype=np.uint8).reshape(count, 2 * n2),
            sign_bits.reshape(count, -1),
            meas_bits.reshape(count, -1),
        ],
        axis=1,
    )
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(header)
        fh.write(per_sample.tobytes())
    os.replace(tmp, path)


def load(path):
    with open(path, "rb") as fh:
        data = fh.read()
    hsize = struct.calcsize(_HEADER)
    if len(data) < hsize:
        raise ArchiveError(f"{path}: truncated header")
    magic, version, n, eta, count, seed, source = struct.unpack_from(_HEADER, data)
    if magic != ARCHIVE_MAGIC:
        raise ArchiveError(f"{path}: not a shadow archive")
    if version != ARCHIVE_VERSION:
        raise ArchiveError(f"{path}: archive version {version}, expected {ARCHIVE_VERSION}")
    n2 = 2 * n
    sign_len = (n2 + 7) // 8
    bit_len = (n + 7) // 8
    rec = 2 * n2 + sign_len + bit_len
    body = np.frombuffer(data, dtype=np.uint8, offset=hsize)
    if body.size != rec * count:
        raise ArchiveError(f"{path}: expected {rec * count} payload bytes, found {body.size}")
    body = body.reshape(count, rec)
    perms = body[:, : 2 * n2].copy().view("<u2").astype(np.int64)
    signs = np.unpackbits(body[:, 2 * n2: 2 * n2 + sign_len], axis=1, count=n2, bitorder="little")
    bits = np.unpackbits(body[:, 2 * n2 + sign_len:], axis=1, count=n, bitorder="little")
    names = {v: k for k, v in _SOURCES.items()}
    return ShadowSet(n, eta, perms, 1 - 2 * signs.astype(np.int64), bits, seed, names.get(source, "file"))


def bitstring_index(bits):
    return bits_to_index(bits)
