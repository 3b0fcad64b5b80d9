"""One-particle reduced density matrices from matchgate shadows.

A single shadow gives the unbiased estimate ``(2N - 1) i (Q^T C_b Q)_{mu nu}``
of ``<gamma_mu gamma_nu>`` (``mu != nu``) in the measured state
``(|0> + |Psi_T>)/sqrt(2)``. For a number-conserving operator ``O``,
``<Psi_T|O|Psi_T> = 2 <O> - <0|O|0>`` because the cross terms between
particle-number sectors vanish; for ``a+_p a_q`` the vacuum term is zero.
"""

import csv
from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class OneRdm:
    matrix: np.ndarray  # <Psi_T| a+_p a_q |Psi_T>
    stderr_re: np.ndarray
    stderr_im: np.ndarray
    n_samples: int
    trace_stderr: float = np.nan

    @property
    def n_qubits(self):
        return self.matrix.shape[0]

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            wr = csv.writer(fh)
            wr.writerow(["p", "q", "re", "im", "stderr_re", "stderr_im"])
            n = self.n_qubits
            for p in range(n):
                for q in range(n):
                    d = self.matrix[p, q]
                    wr.writerow([p, q, repr(float(d.real)), repr(float(d.imag)),
                                 repr(float(self.stderr_re[p, q])), repr(float(self.stderr_im[p, q]))])


def _weighted_stats(values, counts):
    """Mean and standard error over the leading axis with multiplicities."""
    n = counts.sum()
    w = counts / n
    mean = np.tensordot(w, values, axes=1)
    dev = values - mean
    var_re = np.tensordot(counts, dev.real**2, axes=1) / max(n - 1, 1)
    var_im = np.tensordot(counts, dev.imag**2, axes=1) / max(n - 1, 1)
    return mean, np.sqrt(var_re / n), np.sqrt(var_im / n)


def majorana_estimates(shadows, q_prime=None):
    """Per-distinct-shadow estimates of ``<gamma_mu gamma_nu>`` (diagonal set to 1) and counts."""
    if len(shadows) == 0:
        raise ValueError("empty shadow set")
    n = shadows.n_qubits
    covs, counts = shadows.compiled()
    if q_prime is not None:
        covs = np.asarray(q_prime) @ covs @ np.asarray(q_prime).T
    G = (2 * n - 1) * 1j * covs
    idx = np.arange(2 * n)
    G[:, idx, idx] = 1.0
    return G, counts.astype(float)


def estimate_majorana_expectation(shadows, mu, nu, q_prime=None):
    """Shadow estimate of ``<gamma_mu gamma_nu>`` in the measured state; ``mu != nu``."""
    if mu == nu:
        raise ValueError("mu and nu must differ")
    G, counts = majorana_estimates(shadows, q_prime)
    mean, _, _ = _weighted_stats(G[:, mu, nu], counts)
    return complex(mean)


def _ladder_coefficients(n):
    """``a+_p = sum_mu alpha[p, mu] gamma_mu``, ``a_q = sum_nu beta[q, nu] gamma_nu``."""
    alpha = np.zeros((n, 2 * n), dtype=complex)
    beta = np.zeros((n, 2 * n), dtype=complex)
    p = np.arange(n)
    alpha[p, 2 * p] = 0.5
    alpha[p, 2 * p + 1] = -0.5j
    beta[p, 2 * p] = 0.5
    beta[p, 2 * p + 1] = 0.5j
    return alpha, beta


def estimate_1rdm(shadows, n_qubits=None):
    """Trial-state 1-RDM ``<Psi_T|a+_p a_q|Psi_T>`` with elementwise standard errors."""
    n = shadows.n_qubits if n_qubits is None else n_qubits
    if n != shadows.n_qubits:
        raise ValueError(f"shadow set has {shadows.n_qubits} qubits, asked for {n}")
    G, counts = majorana_estimates(shadows)
    alpha, beta = _ladder_coefficients(n)
    D = 2.0 * np.einsum("pm,smn,qn->spq", alpha, G, beta)
    mean, se_re, se_im = _weighted_stats(D, counts)
    _, tr_se, _ = _weighted_stats(np.trace(D, axis1=1, axis2=2), counts)
    return OneRdm(mean, se_re, se_im, int(counts.sum()), float(tr_se))


def particle_number(rdm):
    return float(np.real(np.trace(rdm.matrix)))
