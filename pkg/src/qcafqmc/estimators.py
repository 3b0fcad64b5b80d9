"""Trial-walker estimators shared by the propagator.

Every estimator exposes ``moments(V, ones, pairs)``. For a walker
``|phi>`` with orbital columns ``V`` and one-body generators ``K`` (complex
spin-orbital matrices) it returns

* ``<Psi_T|phi>``,
* ``<Psi_T|K_hat|phi>`` for each ``K`` in ``ones``,
* ``<Psi_T|K_hat_a K_hat_b|phi>`` for each ``(K_a, K_b)`` in ``pairs``,

where ``K_hat = sum_pq K_pq a+_p a_q``. These are the first and mixed second
derivatives of ``<Psi_T|exp(s K_a) exp(t K_b)|phi>`` at zero, which is how the
shadow and embedding estimators compute them. Force bias and local energy are
assembled from them here, once, for all estimators.
"""

from dataclasses import dataclass

import numpy as np

from .focksim import FockSector


class VanishingOverlapError(ArithmeticError):
    """The trial-walker overlap is too small to divide by."""


class UnsupportedConfigurationError(ValueError):
    pass


def spin_orbital(mat):
    """Spatial one-body matrix (or stack) -> interleaved spin-orbital form."""
    mat = np.asarray(mat)
    return np.kron(mat, np.eye(2)) if mat.ndim == 2 else np.stack([np.kron(m, np.eye(2)) for m in mat])


@dataclass(frozen=True)
class LocalQuantities:
    overlap: complex
    force_bias: np.ndarray  # <v_g>/<1> with v_g = i L_g
    local_energy: complex


class Estimator:
    """Base class; subclasses implement ``moments`` and ``n_qubits``."""

    n_qubits: int
    eta: int

    def moments(self, V, ones=(), pairs=()):
        raise NotImplementedError

    def overlap(self, V):
        return self.moments(V)[0]

    def _guard(self, ov):
        if not np.isfinite(ov) or abs(ov) < 1e-300:
            raise VanishingOverlapError(f"overlap {ov!r}")


class HamiltonianTerms:
    """Spin-orbital forms of ``v0`` and the Cholesky vectors, cached per Hamiltonian."""

    def __init__(self, ham):
        self.ham = ham
        self.v0 = spin_orbital(ham.v0)
        self.L = spin_orbital(ham.L) if ham.n_chol else np.zeros((0, 2 * ham.n_orb, 2 * ham.n_orb))
        self.e_core = ham.e_core


def local_quantities(est, terms, V, energy=True):
    """Overlap, force-bias ratios ``i<L_g>/<1>`` and (optionally) the local energy.

    ``E_L = e_core + <v0>/<1> + 1/2 sum_g <L_g L_g>/<1>``.
    """
    ones = [terms.v0] + list(terms.L) if energy else list(terms.L)
    pairs = [(L, L) for L in terms.L] if energy else []
    ov, first, second = est.moments(V, ones, pairs)
    est._guard(ov)
    if energy:
        fb = 1j * np.asarray(first[1:]) / ov
        el = terms.e_core + (first[0] + 0.5 * np.sum(second)) / ov
    else:
        fb = 1j * np.asarray(first) / ov
        el = np.nan
    return LocalQuantities(ov, fb, el)


def force_bias(est, terms, V):
    return local_quantities(est, terms, V, energy=False).force_bias


def local_energy(est, terms, V):
    return local_quantities(est, terms, V).local_energy


class ExactEstimator(Estimator):
    """Dense Fock-space oracle: transition densities against a known trial vector.

    Parameters
    ----------
    psi_t : FockState
        Trial state on the full ``2^N`` space.
    eta : int
        Electron count of the trial (and of every walker).
    """

    def __init__(self, psi_t, eta):
        n = psi_t.n_qubits
        self.n_qubits = n
        self.eta = int(eta)
        self.sector = FockSector(n, self.eta)
        self.trial = self.sector.restrict(psi_t.amplitudes)
        leak = np.linalg.norm(np.asarray(psi_t.amplitudes)) ** 2 - np.linalg.norm(self.trial) ** 2
        if leak > 1e-10:
            raise UnsupportedConfigurationError("trial not contained in the walker particle-number sector")
        self._hops = [self.sector.hop(p, q) for p in range(n) for q in range(n)]
        # rows <Psi_T| a+_p a_q  as conj(a+_q a_p Psi_T)
        self._trial_rows = np.array(
            [np.conj(self.sector.hop(q, p) @ self.trial) for p in range(n) for q in range(n)]
        )

    def walker_vector(self, V):
        V = np.asarray(V)
        if V.shape != (self.n_qubits, self.eta):
            raise ValueError(f"walker shape {V.shape}, expected {(self.n_qubits, self.eta)}")
        return self.sector.determinant(V)

    def moments(self, V, ones=(), pairs=()):
        phi = self.walker_vector(V)
        ov = np.vdot(self.trial, phi)
        if not len(ones) and not len(pairs):
            return ov, np.zeros(0, complex), np.zeros(0, complex)
        X = np.array([h @ phi for h in self._hops])  # (N^2, dim)
        G = self._trial_rows @ phi  # transition 1-RDM, flattened
        first = np.array([np.asarray(K).reshape(-1) @ G for K in ones], dtype=complex)
        second = np.zeros(len(pairs), dtype=complex)
        if len(pairs):
            D2 = self._trial_rows @ X.T  # <a+_p a_q a+_r a_s>
            for i, (Ka, Kb) in enumerate(pairs):
                second[i] = np.asarray(Ka).reshape(-1) @ D2 @ np.asarray(Kb).reshape(-1)
        return ov, first, second
