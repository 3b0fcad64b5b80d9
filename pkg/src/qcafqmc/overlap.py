"""Matchgate-shadow estimator of trial-walker overlaps and their derivatives.

For one shadow ``(Q_p, b)`` and a walker, the overlap contribution is a
polynomial in ``z``: ``Pf(A(z))`` with ``A(z) = C0[s, s] + z B[s, s]`` and

    B = W* M_phi Q_p^T C_b Q_p M_phi^T W^dagger.

The polynomial is sampled at Chebyshev nodes, interpolated, and its
coefficients are reweighted by ``C(2N, 2x) / C(N, x)`` (the inverse of the
matchgate channel on the degree-2x Majorana sector).

Conventions
-----------
* Walker orbitals are the columns of ``V`` (``N x zeta``), so the walker
  amplitude on an occupation list ``occ`` is ``det(V[occ, :])``. The rotation
  matrix entering ``M_phi`` is ``u^dagger`` with ``u`` a unitary completion of
  the orthonormalized columns; the per-shadow value does not depend on which
  completion is used.
* The retained index set ``s`` keeps row ``2j+1`` of every rotated pair
  ``j < zeta`` and both rows of every other pair. With ``W`` applied, row
  ``2j+1`` of an occupied pair carries the creation operator of that mode.
* The per-shadow prefactor is ``2 i^(zeta/2) / 2^(N - zeta/2)``. The factor 2
  undoes the ``1/sqrt(2)`` amplitudes of ``(|0> + |Psi_T>)/sqrt(2)``, on which
  the shadows are taken, so that the estimate targets ``<Psi_T|phi>`` itself.
"""

import copy
import logging
from dataclasses import dataclass
from math import comb

import numpy as np

from .estimators import Estimator, UnsupportedConfigurationError, VanishingOverlapError
from .pfaffian import _parlett_reid, pfaffian
from .shadows import covariance_of

logger = logging.getLogger(__name__)

_J2 = np.array([[0.0, -1.0], [1.0, 0.0]])


class NoSamplesError(ValueError):
    pass


class DimensionError(ValueError):
    pass


# -- matrices ----------------------------------------------------------------

def w_matrix(n_qubits, xi):
    """``W = (+)_{j<xi} [[1, -i], [1, i]]/sqrt(2) (+) I``."""
    W = np.eye(2 * n_qubits, dtype=complex)
    blk = np.array([[1.0, -1.0j], [1.0, 1.0j]]) / np.sqrt(2.0)
    for j in range(xi):
        W[2 * j: 2 * j + 2, 2 * j: 2 * j + 2] = blk
    return W


def rblock(X):
    """Realification: entry ``x`` -> ``[[Re x, -Im x], [Im x, Re x]]``; works on stacks."""
    X = np.asarray(X)
    n, m = X.shape[-2:]
    out = np.einsum("...jk,ab->...jakb", X.real, np.eye(2)) + np.einsum("...jk,ab->...jakb", X.imag, _J2)
    return out.reshape(X.shape[:-2] + (2 * n, 2 * m))


def selection(n_qubits, zeta):
    """Retained rows/columns of ``A`` and ``B``."""
    return np.array([2 * j + 1 for j in range(zeta)] + list(range(2 * zeta, 2 * n_qubits)), dtype=np.int64)


def chebyshev_nodes(n_qubits, count):
    """First ``count`` Chebyshev nodes of order ``2N``: ``cos((2k+1) pi / (4N))``."""
    k = np.arange(count)
    return np.cos((2 * k + 1) * np.pi / (4 * n_qubits))


def _held_out_node(n_qubits, ell):
    if ell + 1 < 2 * n_qubits:
        return float(chebyshev_nodes(n_qubits, ell + 2)[-1])
    z = chebyshev_nodes(n_qubits, 2)
    return 0.5 * float(z[0] + z[1])


def prefactor(n_qubits, zeta):
    return 2.0 * (1j ** (zeta // 2)) / 2.0 ** (n_qubits - zeta // 2)


def binomial_weights(n_qubits, ell):
    return np.array([comb(2 * n_qubits, 2 * x) / comb(n_qubits, x) for x in range(ell + 1)])


@dataclass(frozen=True, eq=False)
class WalkerMatrix:
    """Orthonormal walker orbitals with a unitary completion.

    Build with :meth:`from_orbitals`, which QR-normalizes arbitrary columns
    and reports ``det R`` so that overlaps of the unnormalized determinant
    are ``det R`` times overlaps of this one.
    """

    orbitals: np.ndarray  # N x zeta, orthonormal columns
    completion: np.ndarray  # N x N unitary, first zeta columns == orbitals

    @classmethod
    def from_orbitals(cls, V):
        V = np.asarray(V, dtype=complex)
        if V.ndim != 2 or V.shape[1] > V.shape[0]:
            raise DimensionError(f"walker orbitals must be N x zeta with zeta <= N, got {V.shape}")
        if not np.any(V):
            raise ValueError("walker orbital matrix is zero")
        q, r = np.linalg.qr(V)
        det_r = complex(np.prod(np.diag(r)))
        d = np.abs(np.diag(r))
        if V.shape[1] and d.min() < 1e-14 * max(1.0, d.max()):
            raise ValueError("walker orbitals are linearly dependent")
        full, _ = np.linalg.qr(q, mode="complete")
        full = full.copy()
        full[:, : V.shape[1]] = q
        return cls(q, full), det_r

    @property
    def n_qubits(self):
        return self.orbitals.shape[0]

    @property
    def zeta(self):
        return self.orbitals.shape[1]

    @property
    def m_phi(self):
        """Real ``2N x 2N`` block matrix built from the rotation ``u^dagger``."""
        return rblock(self.completion.conj().T)


def build_B(sample_cov, walker, W):
    """``B = W* M_phi Q^T C_b Q M_phi^T W^dagger`` for a snapshot covariance ``Q^T C_b Q``."""
    M = walker.m_phi
    C = np.asarray(sample_cov)
    if not (W.shape == M.shape == C.shape):
        raise DimensionError(f"inconsistent sizes {W.shape}, {M.shape}, {C.shape}")
    return W.conj() @ M @ C @ M.T @ W.conj().T


def sample_covariance(sample):
    """``Q^T C_b Q`` of a ShadowSample."""
    return np.asarray(sample.covariance, dtype=float)


@dataclass(frozen=True)
class OverlapPolynomial:
    coeffs: np.ndarray
    nodes: np.ndarray
    held_out_residual: float

    @property
    def degree(self):
        return self.coeffs.size - 1

    def __call__(self, z):
        return np.polynomial.polynomial.polyval(z, self.coeffs)


def overlap_polynomial(sample, walker, W=None, zeta=None):
    """Interpolated coefficients of ``z -> Pf(A(z))`` for one shadow."""
    n = walker.n_qubits
    zeta = walker.zeta if zeta is None else zeta
    W = w_matrix(n, zeta) if W is None else W
    cov = sample if isinstance(sample, np.ndarray) else sample_covariance(sample)
    s = selection(n, zeta)
    B = build_B(cov, walker, W)[np.ix_(s, s)]
    C0 = covariance_of(np.zeros(n, dtype=np.int64)).astype(float)[np.ix_(s, s)]
    ell = n - zeta // 2
    z = chebyshev_nodes(n, ell + 1)
    pf = pfaffian(C0[None] + z[:, None, None] * B[None])
    vander = np.vander(z, ell + 1, increasing=True)
    if np.linalg.cond(vander) > 1e12:
        raise np.linalg.LinAlgError("ill-conditioned interpolation system")
    coeffs = np.linalg.solve(vander, pf)
    zh = _held_out_node(n, ell)
    direct = pfaffian(C0 + zh * B)
    interp = np.polynomial.polynomial.polyval(zh, coeffs)
    # rounding error scales with the natural size of the Pfaffian, not with its value
    floor = max(1.0, float(np.linalg.norm(B))) ** (B.shape[0] // 2)
    scale = max(np.max(np.abs(pf)), abs(direct), floor)
    return OverlapPolynomial(coeffs, z, float(abs(direct - interp) / scale))


def sample_overlap(sample, walker, W=None):
    """Single-shadow estimate ``o_p`` of ``<Psi_T|phi>``."""
    n, zeta = walker.n_qubits, walker.zeta
    poly = overlap_polynomial(sample, walker, W)
    return prefactor(n, zeta) * np.dot(poly.coeffs, binomial_weights(n, poly.degree))


@dataclass(frozen=True)
class OverlapEstimate:
    value: complex
    n_samples: int
    variance: float  # per-sample variance of o_p (sum of real and imaginary parts)

    @property
    def stderr(self):
        return float(np.sqrt(self.variance / self.n_samples)) if self.n_samples > 1 else np.inf


# -- batched estimator ---------------------------------------------------------

class _WalkerContext:
    """Per-walker quantities shared by overlap and derivative evaluations."""

    __slots__ = ("walker", "det_r", "F", "CFt", "A", "pf", "ainv", "singular", "o")


class ShadowEstimator(Estimator):
    """Overlap, force-bias and local-energy estimates from a ShadowSet.

    Identical snapshot covariances are merged before any linear algebra, so
    the work scales with the number of distinct ``Q^T C_b Q``.

    Parameters
    ----------
    shadows : ShadowSet
    singular_tol : float
        Relative pivot below which ``A(z)`` is treated as singular and its
        derivative terms are obtained by contour extraction instead of
        through ``A^-1``.
    audit_every : int
        Every ``audit_every``-th distinct shadow has its interpolant checked
        against a direct Pfaffian at a held-out node.
    prune : bool
        Remove shadows that contribute zero for every walker (see
        :meth:`_prune_null`).
    """

    def __init__(self, shadows, singular_tol=1e-7, audit_every=100, prune=True):
        if len(shadows) == 0:
            raise NoSamplesError("empty shadow set")
        if shadows.eta % 2:
            raise UnsupportedConfigurationError(f"odd electron count {shadows.eta} is not supported")
        self.shadows = shadows
        self.n_qubits = n = shadows.n_qubits
        self.eta = zeta = shadows.eta
        covs, counts = shadows.compiled()
        self.covs = covs
        self.counts = counts.astype(float)
        self.n_samples = int(counts.sum())
        self.weights = self.counts / self.n_samples
        self.singular_tol = singular_tol
        self.audit_every = audit_every
        self.s = selection(n, zeta)
        self.W = w_matrix(n, zeta)
        self.Ws = self.W.conj()[self.s]
        self.C0s = covariance_of(np.zeros(n, dtype=np.int64)).astype(float)[np.ix_(self.s, self.s)]
        self.ell = n - zeta // 2
        self.z = chebyshev_nodes(n, self.ell + 1)
        vander = np.vander(self.z, self.ell + 1, increasing=True)
        # o_p = sum_j beta_j Pf(A_p(z_j))
        self.beta = prefactor(n, zeta) * np.linalg.solve(vander.T, binomial_weights(n, self.ell))
        self.z_held = _held_out_node(n, self.ell)
        self.audit_residual = 0.0
        self.n_null = 0
        self.prune = prune
        self._sector_views = {}
        if prune:
            self._prune_null()

    def _null_mask(self, probes):
        null = np.ones(len(self.counts), dtype=bool)
        for V in probes:
            pf = self._context(V, need_inverse=False, audit=False).pf
            mag = np.max(np.abs(pf), axis=0)
            null &= mag < 1e-11 * max(mag.max(), 1e-300)
        return null

    def _without(self, null):
        view = copy.copy(self)
        view._sector_views = None
        view.n_null = self.n_null + int(self.counts[null].sum())
        view.covs = self.covs[~null]
        view.counts = self.counts[~null]
        view.weights = view.counts / self.n_samples
        return view

    def _prune_null(self):
        """Drop shadows whose contribution vanishes for every walker.

        A shadow's estimate is ``<chi_p|phi>`` for a fixed vector ``chi_p``;
        if it vanishes on two generic determinants, ``chi_p`` has no
        component in the walker sector, and neither do any of its
        derivatives. Such shadows still count in ``n_samples``.
        """
        rng = np.random.default_rng(20240917)
        n, zeta = self.n_qubits, self.eta
        probes = [rng.normal(size=(n, zeta)) + 1j * rng.normal(size=(n, zeta)) for _ in range(2)]
        null = self._null_mask(probes)
        if np.any(null):
            view = self._without(null)
            self.covs, self.counts, self.weights, self.n_null = view.covs, view.counts, view.weights, view.n_null

    def _sector_view(self, V, generators):
        """Estimator restricted to shadows that can see a fixed-spin walker.

        When every walker column is purely alpha or purely beta and every
        generator conserves spin, the whole path stays in one
        ``(n_alpha, n_beta)`` sector. If in addition the alpha and beta
        orbitals coincide and the generators act identically on both spins,
        the path stays spin-restricted. Shadows with no component there
        contribute zero to every moment and are dropped (as in
        :meth:`_prune_null`, but probing with spin-block determinants).
        """
        if not self.prune or self._sector_views is None:
            return self
        V = np.asarray(V)
        tol = 1e-13 * max(1.0, float(np.max(np.abs(V))))
        alpha = np.max(np.abs(V[1::2]), axis=0) <= tol
        beta = np.max(np.abs(V[0::2]), axis=0) <= tol
        if not np.all(alpha | beta):
            return self
        symmetric = True
        for K in generators:
            K = np.asarray(K)
            if np.any(K[0::2, 1::2] != 0) or np.any(K[1::2, 0::2] != 0):
                return self
            symmetric = symmetric and np.array_equal(K[0::2, 0::2], K[1::2, 1::2])
        na = int(alpha.sum())
        # restricted walker: identical alpha and beta orbitals, kept so by spin-symmetric generators
        restricted = (
            symmetric and 2 * na == self.eta
            and np.max(np.abs(V[0::2][:, alpha] - V[1::2][:, beta])) <= 1e-10 * max(1.0, float(np.max(np.abs(V))))
        )
        key = (na, self.eta - na, bool(restricted))
        if key not in self._sector_views:
            rng = np.random.default_rng(20240918)
            n, zeta = self.n_qubits, self.eta
            probes = []
            for _ in range(2):
                P = np.zeros((n, zeta), dtype=complex)
                A = rng.normal(size=(n // 2, na)) + 1j * rng.normal(size=(n // 2, na))
                B = A if restricted else rng.normal(size=(n // 2, zeta - na)) + 1j * rng.normal(size=(n // 2, zeta - na))
                P[0::2, :na] = A
                P[1::2, na:] = B
                probes.append(P)
            null = self._null_mask(probes)
            self._sector_views[key] = self._without(null) if np.any(null) else self
            logger.debug("sector %s keeps %d of %d distinct shadows", key, int((~null).sum()), null.size)
        return self._sector_views[key]

    # ---- core evaluation ----
    def _context(self, V, need_inverse, audit=True):
        V = np.asarray(V)
        if V.shape != (self.n_qubits, self.eta):
            raise DimensionError(f"walker shape {V.shape} does not match shadows ({self.n_qubits}, {self.eta})")
        ctx = _WalkerContext()
        ctx.walker, ctx.det_r = WalkerMatrix.from_orbitals(V)
        ctx.F = self.Ws @ ctx.walker.m_phi  # (n, 2N)
        ctx.CFt = self.covs @ ctx.F.T  # (P, 2N, n)
        Bs = ctx.F @ ctx.CFt  # (P, n, n)
        Bs = 0.5 * (Bs - np.swapaxes(Bs, -1, -2))
        ctx.A = self.C0s + self.z[:, None, None, None] * Bs[None]  # (J, P, n, n)
        J, P, n, _ = ctx.A.shape
        flat = ctx.A.reshape(-1, n, n)
        pf, piv = _parlett_reid(flat.copy())
        ctx.pf = pf.reshape(J, P)
        ctx.o = self.beta @ ctx.pf  # (P,)
        if audit and self.audit_every:
            self._audit(ctx, Bs)
        if need_inverse:
            scale = np.max(np.abs(flat), axis=(1, 2))
            sing = (piv / np.where(scale > 0, scale, 1.0) < self.singular_tol).reshape(J, P)
            ctx.singular = sing
            ainv = np.zeros_like(ctx.A)
            ok = ~sing
            if np.any(ok):
                inv = np.linalg.inv(ctx.A[ok])
                ainv[ok] = 0.5 * (inv - np.swapaxes(inv, -1, -2))
            ctx.ainv = ainv
        return ctx

    def _audit(self, ctx, Bs):
        idx = np.arange(0, Bs.shape[0], self.audit_every)
        vander = np.vander(self.z, self.ell + 1, increasing=True)
        coeffs = np.linalg.solve(vander, ctx.pf[:, idx])
        interp = np.polynomial.polynomial.polyval(self.z_held, coeffs)
        direct = pfaffian(self.C0s + self.z_held * Bs[idx])
        floor = np.maximum(1.0, np.linalg.norm(Bs[idx], axis=(1, 2))) ** (self.C0s.shape[0] // 2)
        scale = np.maximum(np.maximum(np.max(np.abs(ctx.pf[:, idx]), axis=0), np.abs(direct)), floor)
        worst = float(np.max(np.abs(interp - direct) / scale))
        self.audit_residual = max(self.audit_residual, worst)
        if worst > 1e-8:
            logger.warning("held-out node residual %.2e exceeds 1e-8", worst)

    def estimate(self, V):
        """OverlapEstimate with per-sample variance."""
        view = self._sector_view(V, ())
        if view is not self:
            return view.estimate(V)
        ctx = self._context(V, need_inverse=False)
        o = ctx.det_r * ctx.o
        mean = self.weights @ o
        n = self.n_samples
        ss = self.counts @ np.abs(o - mean) ** 2 + self.n_null * abs(mean) ** 2
        var = float(ss / max(n - 1, 1))
        return OverlapEstimate(complex(mean), n, var)

    def overlap(self, V):
        return self.estimate(V).value

    # ---- derivatives along unitary paths ----
    def _dF(self, ctx, X):
        """``W*[s] R(X)`` for a (stack of) complex N x N ``X`` replacing ``u^dagger``."""
        return self.Ws @ rblock(X)

    def _first_hermitian(self, ctx, Hs):
        """``d/dl <Psi_T|exp(i l H)|phi>`` for a stack of Hermitian ``H``."""
        udag = ctx.walker.completion.conj().T
        dF = self._dF(ctx, -1j * udag @ Hs)  # (G, n, 2N)
        X = dF[:, None] @ ctx.CFt[None]  # (G, P, n, n)
        dB = X - np.swapaxes(X, -1, -2)
        # tr(A^-1 dB) = -sum(A^-1 * dB) elementwise, both antisymmetric
        tr = -np.sum(ctx.ainv[None] * dB[:, None], axis=(-1, -2))  # (G, J, P)
        coef = np.where(ctx.singular, 0.0, self.beta[:, None] * ctx.pf * self.z[:, None])  # (J, P)
        per = 0.5 * np.sum(coef[None] * tr, axis=1)
        if np.any(ctx.singular):
            per = per + self._first_contour(ctx, dF)
        return per @ self.weights

    def _second_hermitian(self, ctx, Ha, Hb):
        """``d2/ds dt <Psi_T|exp(i s Ha) exp(i t Hb)|phi>`` for paired stacks."""
        udag = ctx.walker.completion.conj().T
        dFa = self._dF(ctx, -1j * udag @ Ha)
        dFb = self._dF(ctx, -1j * udag @ Hb)
        dFab = self._dF(ctx, -udag @ Hb @ Ha)
        Xa = dFa[:, None] @ ctx.CFt[None]
        Xb = dFb[:, None] @ ctx.CFt[None]
        Xab = dFab[:, None] @ ctx.CFt[None]
        Y = (dFa[:, None] @ self.covs[None]) @ np.swapaxes(dFb, -1, -2)[:, None]
        dBa = Xa - np.swapaxes(Xa, -1, -2)
        dBb = Xb - np.swapaxes(Xb, -1, -2)
        d2B = Xab - np.swapaxes(Xab, -1, -2) + Y - np.swapaxes(Y, -1, -2)
        ainv = ctx.ainv[None]
        ta = -np.sum(ainv * dBa[:, None], axis=(-1, -2))
        tb = -np.sum(ainv * dBb[:, None], axis=(-1, -2))
        t2 = -np.sum(ainv * d2B[:, None], axis=(-1, -2))
        Ma = ainv @ dBa[:, None]  # (G, J, P, n, n)
        Mb = ainv @ dBb[:, None]
        cross = np.sum(Ma * np.swapaxes(Mb, -1, -2), axis=(-1, -2))
        z = self.z[None, :, None]
        bracket = z * t2 - z * z * cross + 0.5 * z * z * ta * tb
        coef = np.where(ctx.singular, 0.0, self.beta[:, None] * ctx.pf)
        per = 0.5 * np.sum(coef[None] * bracket, axis=1)
        if np.any(ctx.singular):
            per = per + self._second_contour(ctx, dFa, dFb, dFab)
        return per @ self.weights

    # ---- contour fallback for singular A(z) ----
    # For a singular node the derivative of lambda -> Pf(C0s + z_j B_p(lambda)),
    # a polynomial of degree <= n in lambda, is read off from its values on a
    # circle (discrete Fourier transform), which needs no inverse.
    def _contour_values(self, ctx, jj, pp, Fpert):
        """``beta_j Pf(C0s + z_j Fpert C_p Fpert^T)``; ``Fpert`` has shape (S, ..., n, 2N)."""
        extra = Fpert.ndim - 3
        C = self.covs[pp].reshape((len(pp),) + (1,) * extra + self.covs.shape[1:])
        B = Fpert @ C @ np.swapaxes(Fpert, -1, -2)
        B = 0.5 * (B - np.swapaxes(B, -1, -2))
        zj = self.z[jj].reshape((-1,) + (1,) * (extra + 2))
        vals = pfaffian(self.C0s + zj * B)
        return self.beta[jj].reshape((-1,) + (1,) * extra) * vals

    def _first_contour(self, ctx, dF):
        G = dF.shape[0]
        K = self.C0s.shape[0] + 1
        w = np.exp(2j * np.pi * np.arange(K) / K)
        jj, pp = np.nonzero(ctx.singular)
        nF = np.linalg.norm(ctx.F)
        nd = np.linalg.norm(dF, axis=(1, 2))
        r = np.where(nd > 0, nF / np.where(nd > 0, nd, 1.0), 0.0)  # (G,)
        lam = r[:, None] * w[None, :]  # (G, K)
        out = np.zeros((G, ctx.A.shape[1]), dtype=complex)
        for chunk in _chunks(len(jj), 4096 // max(G * K, 1) + 1):
            Fp = ctx.F + lam[None, :, :, None, None] * dF[None, :, None]  # (1, G, K, n, 2N)
            Fp = np.broadcast_to(Fp, (len(chunk),) + Fp.shape[1:])
            vals = self._contour_values(ctx, jj[chunk], pp[chunk], Fp)  # (S, G, K)
            coef = np.sum(vals * np.conj(w), axis=-1) / (K * np.where(r > 0, r, 1.0))
            coef[:, r == 0] = 0.0
            np.add.at(out.T, pp[chunk], coef)
        return out

    def _second_contour(self, ctx, dFa, dFb, dFab):
        G = dFa.shape[0]
        K = self.C0s.shape[0] + 1
        w = np.exp(2j * np.pi * np.arange(K) / K)
        jj, pp = np.nonzero(ctx.singular)
        nF = np.linalg.norm(ctx.F)
        na = np.linalg.norm(dFa, axis=(1, 2))
        nb = np.linalg.norm(dFb, axis=(1, 2))
        ok = (na > 0) & (nb > 0)
        ra = np.where(ok, nF / np.where(ok, na, 1.0), 1.0)
        rb = np.where(ok, nF / np.where(ok, nb, 1.0), 1.0)
        s = (ra[:, None] * w)[:, :, None, None, None]  # (G, K, 1, 1, 1)
        t = (rb[:, None] * w)[:, None, :, None, None]  # (G, 1, K, 1, 1)
        Fp = ctx.F + s * dFa[:, None, None] + t * dFb[:, None, None] + s * t * dFab[:, None, None]  # (G, K, K, n, 2N)
        phase = np.conj(w)[:, None] * np.conj(w)[None, :]
        out = np.zeros((G, ctx.A.shape[1]), dtype=complex)
        for chunk in _chunks(len(jj), 4096 // max(G * K * K, 1) + 1):
            Fc = np.broadcast_to(Fp[None], (len(chunk),) + Fp.shape)
            vals = self._contour_values(ctx, jj[chunk], pp[chunk], Fc)  # (S, G, K, K)
            coef = np.sum(vals * phase, axis=(-1, -2)) / (K * K * ra * rb)
            coef[:, ~ok] = 0.0
            np.add.at(out.T, pp[chunk], coef)
        return out

    # ---- public moments ----
    def moments(self, V, ones=(), pairs=()):
        """See :class:`qcafqmc.estimators.Estimator`.

        Complex generators are split as ``K = H1 + i H2`` with Hermitian
        parts; each Hermitian direction is a unitary path of the walker,
        along which the realified ``M_phi`` stays valid.
        """
        view = self._sector_view(V, list(ones) + [K for pair in pairs for K in pair])
        if view is not self:
            return view.moments(V, ones, pairs)
        need = bool(len(ones) or len(pairs))
        ctx = self._context(V, need_inverse=need)
        mean = self.weights @ ctx.o
        ov = ctx.det_r * mean
        ss = self.counts @ np.abs(ctx.o - mean) ** 2 + self.n_null * abs(mean) ** 2
        stderr = abs(ctx.det_r) * np.sqrt(ss / max(self.n_samples - 1, 1) / self.n_samples)
        if not np.isfinite(ov) or abs(ov) <= 1e-12 * stderr:
            raise VanishingOverlapError(f"overlap {ov!r} indistinguishable from zero (stderr {stderr:.3e})")
        first = np.zeros(len(ones), dtype=complex)
        second = np.zeros(len(pairs), dtype=complex)
        if len(ones):
            K = np.asarray(ones, dtype=complex)
            H1 = 0.5 * (K + np.conj(np.swapaxes(K, -1, -2)))
            H2 = -0.5j * (K - np.conj(np.swapaxes(K, -1, -2)))
            H = np.concatenate([H1, H2])
            nz = np.any(H != 0, axis=(1, 2))
            d = np.zeros(H.shape[0], dtype=complex)
            if np.any(nz):
                d[nz] = self._first_hermitian(ctx, H[nz])
            # d/dl <exp(i l H)> = i <H_hat>
            hvals = -1j * d
            m = len(ones)
            first = ctx.det_r * (hvals[:m] + 1j * hvals[m:])
        if len(pairs):
            Ka = np.asarray([a for a, _ in pairs], dtype=complex)
            Kb = np.asarray([b for _, b in pairs], dtype=complex)
            parts_a = _hermitian_parts(Ka)
            parts_b = _hermitian_parts(Kb)
            total = np.zeros(len(pairs), dtype=complex)
            for (ca, Ha) in parts_a:
                for (cb, Hb) in parts_b:
                    nz = np.any(Ha != 0, axis=(1, 2)) & np.any(Hb != 0, axis=(1, 2))
                    if not np.any(nz):
                        continue
                    d2 = np.zeros(len(pairs), dtype=complex)
                    d2[nz] = self._second_hermitian(ctx, Ha[nz], Hb[nz])
                    # d2/dsdt <exp(isHa) exp(itHb)> = -<Ha_hat Hb_hat>
                    total += ca * cb * (-d2)
            second = ctx.det_r * total
        return complex(ov), first, second

    def _guard(self, ov):
        super()._guard(ov)


def _chunks(n, size):
    for i in range(0, n, size):
        yield np.arange(i, min(n, i + size))


def _hermitian_parts(K):
    """``K = H1 + i H2``; returns ``[(1, H1), (1j, H2)]`` skipping zero parts."""
    Kd = np.conj(np.swapaxes(K, -1, -2))
    H1 = 0.5 * (K + Kd)
    H2 = -0.5j * (K - Kd)
    parts = []
    if np.any(H1 != 0):
        parts.append((1.0, H1))
    if np.any(H2 != 0):
        parts.append((1j, H2))
    return parts


def estimate_overlap(shadows, V):
    """Mean of ``o_p`` over a ShadowSet for walker orbitals ``V``."""
    return ShadowEstimator(shadows).estimate(V)


def guard_overlap(est):
    """Raise when ``|<Psi_T|phi>|`` is below ``1e-12`` of its standard error."""
    if not np.isfinite(est.value) or abs(est.value) <= 1e-12 * est.stderr:
        raise VanishingOverlapError(f"overlap {est.value!r} indistinguishable from zero")
