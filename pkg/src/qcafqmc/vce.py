"""Virtual-correlation-energy embedding of full-space walkers into an active-space trial.

The trial is ``a+_{c_1} ... a+_{c_n} |Psi_a>``: frozen core orbitals created
on top of an active-space state, with the virtual orbitals empty. For a
walker with orbital columns ``V`` the overlap only involves the core rows
``V_c`` and active rows ``V_a``. With the SVD ``V_c = U S V_h^dagger``, a
unitary completion ``V_full = [V_h, V']`` and the QR factorization
``V_a V' = Q R``,

    <Psi_T|phi> = det(U) det(S) det(R) <Psi_a|Q> / det(V_full).

Spin is handled in one spin-orbital SVD rather than one per spin; for
spin-block walkers the two are identical because all factors are
block-diagonal.
"""

import logging
from dataclasses import dataclass

import numpy as np

from .estimators import Estimator

logger = logging.getLogger(__name__)

RANK_TOL = 1e-10


class DecoupledCoreError(ArithmeticError):
    """The walker has (numerically) lost an occupied core orbital."""


def _spin(indices):
    return sorted(2 * i + s for i in indices for s in (0, 1))


@dataclass(frozen=True)
class CorePartition:
    n_spatial: int
    core: tuple
    active: tuple
    virtual: tuple

    def __post_init__(self):
        allidx = list(self.core) + list(self.active) + list(self.virtual)
        if sorted(allidx) != list(range(self.n_spatial)):
            raise ValueError("core/active/virtual must partition the orbitals")

    @classmethod
    def from_embedded(cls, system):
        return cls(system.n_full, tuple(system.core), tuple(system.active), tuple(system.virtual))

    @property
    def core_so(self):
        return np.array(_spin(self.core), dtype=np.int64)

    @property
    def active_so(self):
        return np.array(_spin(self.active), dtype=np.int64)

    @property
    def virtual_so(self):
        return np.array(_spin(self.virtual), dtype=np.int64)

    @property
    def n_core_electrons(self):
        return 2 * len(self.core)

    @property
    def xi_c(self):
        """Occupancy matrix of the frozen core determinant (``N_so x n_c``)."""
        eye = np.eye(2 * self.n_spatial)
        return eye[:, self.core_so]

    def embed_active_orbitals(self, Va, core_first=True):
        """Full-space orbital matrix: core occupied, ``Va`` on the active rows."""
        n_so = 2 * self.n_spatial
        nc = self.n_core_electrons
        V = np.zeros((n_so, nc + Va.shape[1]), dtype=complex)
        V[self.core_so, np.arange(nc)] = 1.0
        V[np.ix_(self.active_so, np.arange(nc, nc + Va.shape[1]))] = Va
        return V


@dataclass
class Factorization:
    P0: np.ndarray  # V_c V_h = U S
    vh: np.ndarray
    vp: np.ndarray
    T0: np.ndarray  # V_a V_h
    q: np.ndarray
    r: np.ndarray
    scale: complex  # det(P0) det(R) / det(V_full)
    singular_values: np.ndarray


def factorize(V, part):
    """SVD/QR factorization of a full-space walker."""
    V = np.asarray(V, dtype=complex)
    nc = part.n_core_electrons
    zeta = V.shape[1]
    Vc = V[part.core_so]
    Va = V[part.active_so]
    if nc:
        U, sig, wh = np.linalg.svd(Vc, full_matrices=True)
        ref = max(1.0, float(np.linalg.norm(V, 2)))
        if sig.size < nc or sig.min() < RANK_TOL * ref:
            raise DecoupledCoreError(f"core singular values {sig}")
        vfull = wh.conj().T
    else:
        sig = np.zeros(0)
        vfull = np.eye(zeta, dtype=complex)
    vh = vfull[:, :nc]
    vp = vfull[:, nc:]
    P0 = Vc @ vh
    q, r = np.linalg.qr(Va @ vp)
    d = np.diag(r)
    ph = np.where(np.abs(d) > 0, d / np.where(np.abs(d) > 0, np.abs(d), 1.0), 1.0)
    q = q * ph[None, :]
    r = np.conj(ph)[:, None] * r
    scale = np.linalg.det(P0) * np.prod(np.diag(r)) / np.linalg.det(vfull)
    logger.debug("vce: singular values %s, det R %.3e", sig, abs(np.prod(np.diag(r))))
    return Factorization(P0, vh, vp, Va @ vh, q, r, scale, sig)


def embed_overlap(full_walker, part, active_overlap_fn):
    """Full-space overlap from an active-space overlap function of orthonormal orbitals."""
    f = factorize(full_walker, part)
    return f.scale * active_overlap_fn(f.q)


class VCEEstimator(Estimator):
    """Full-space estimator routed through an active-space estimator.

    Derivatives use the exact Schur-complement form
    ``ov(V) = det(V_c V_h) f_a(V_a V' - V_a V_h (V_c V_h)^-1 V_c V') / det(V_full)``
    with ``V_h, V'`` frozen at the expansion point, expanded to second order.
    """

    def __init__(self, active, part):
        self.active = active
        self.part = part
        self.n_qubits = 2 * part.n_spatial
        self.eta = part.n_core_electrons + active.eta
        if active.n_qubits != len(part.active_so):
            raise ValueError("active estimator does not match the active space")

    def moments(self, V, ones=(), pairs=()):
        V = np.asarray(V, dtype=complex)
        if V.shape != (self.n_qubits, self.eta):
            raise ValueError(f"walker shape {V.shape}, expected {(self.n_qubits, self.eta)}")
        f = factorize(V, self.part)
        core, act = self.part.core_so, self.part.active_so
        P0inv = np.linalg.inv(f.P0) if f.P0.size else f.P0
        rinv_qh = np.linalg.solve(f.r, f.q.conj().T) if f.r.size else np.zeros((0, len(act)))

        def pieces(X):
            Xc, Xa = X[core], X[act]
            return Xc @ f.vh, Xc @ f.vp, Xa @ f.vh, Xa @ f.vp

        def gen(Y):
            # generator G with G (Q R) = Y
            return Y @ rinv_qh

        def first_order(X):
            P, S, T, Z = pieces(X)
            a = np.trace(P0inv @ P) if P.size else 0.0
            Y = Z - f.T0 @ P0inv @ S
            return a, gen(Y), (P, S, T, Z)

        ones_data = [first_order(np.asarray(K) @ V) for K in ones]
        act_ones = [g for _, g, _ in ones_data]
        act_pairs = []
        pair_data = []
        for Ka, Kb in pairs:
            Ka, Kb = np.asarray(Ka), np.asarray(Kb)
            a_s, Gs, (Ps, Ss, Ts, Zs) = first_order(Ka @ V)
            a_t, Gt, (Pt, St, Tt, Zt) = first_order(Kb @ V)
            Pst, Sst, Tst, Zst = pieces(Ka @ Kb @ V)
            if Pst.size:
                a_st = np.trace(P0inv @ Pst) - np.trace(P0inv @ Ps @ P0inv @ Pt)
            else:
                a_st = 0.0
            X = P0inv
            Yst = Zst - (
                Ts @ X @ St + Tt @ X @ Ss + f.T0 @ X @ Sst
                - f.T0 @ X @ Ps @ X @ St - f.T0 @ X @ Pt @ X @ Ss
            )
            Gst = gen(Yst)
            act_ones.append(Gst - Gs @ Gt)
            act_ones.extend([Gs, Gt])
            act_pairs.append((Gs, Gt))
            pair_data.append((a_s, a_t, a_st))
        ov_a, first_a, second_a = self.active.moments(f.q, act_ones, act_pairs)
        ov = f.scale * ov_a
        first = np.array(
            [f.scale * (a * ov_a + first_a[i]) for i, (a, _, _) in enumerate(ones_data)], dtype=complex
        )
        second = np.zeros(len(pairs), dtype=complex)
        base = len(ones_data)
        for i, (a_s, a_t, a_st) in enumerate(pair_data):
            g3, gs, gt = first_a[base + 3 * i: base + 3 * i + 3]
            second[i] = f.scale * ((a_st + a_s * a_t) * ov_a + a_s * gt + a_t * gs + second_a[i] + g3)
        return complex(ov), first, second

    def _guard(self, ov):
        self.active._guard(ov)
