"""Pfaffians of complex antisymmetric matrices.

Everything here works on single matrices of shape ``(n, n)`` as well as on
stacks of shape ``(..., n, n)``; the estimator kernels lean on the batched
form to push thousands of small Pfaffians through numpy at once.
"""

import numpy as np

ANTISYMMETRY_TOL = 1e-12
UNDERFLOW_GUARD = 1e-280


class SingularPfaffianError(np.linalg.LinAlgError):
    """Raised when an inverse is requested for a (numerically) singular matrix."""

    def __init__(self, pivot):
        self.pivot = pivot
        super().__init__(f"singular antisymmetric matrix (smallest pivot {pivot:.3e})")


class AntisymmetricMatrix:
    """Dense complex antisymmetric matrix of even order.

    The input is projected onto its antisymmetric part. Inputs whose
    symmetric part exceeds ``ANTISYMMETRY_TOL`` relative to their size are
    rejected rather than silently repaired.
    """

    def __init__(self, entries):
        a = np.asarray(entries, dtype=complex)
        if a.ndim < 2 or a.shape[-1] != a.shape[-2]:
            raise ValueError(f"expected square matrix, got shape {a.shape}")
        if a.shape[-1] % 2:
            raise ValueError(f"Pfaffian needs even order, got {a.shape[-1]}")
        scale = max(1.0, float(np.max(np.abs(a), initial=0.0)))
        sym = np.max(np.abs(a + np.swapaxes(a, -1, -2)), initial=0.0)
        if sym > ANTISYMMETRY_TOL * scale:
            raise ValueError(f"matrix is not antisymmetric (|A + A^T| = {sym:.2e})")
        self.entries = 0.5 * (a - np.swapaxes(a, -1, -2))

    @property
    def dim(self):
        return self.entries.shape[-1]

    def __array__(self, dtype=None, copy=None):
        return self.entries if dtype is None else self.entries.astype(dtype)


def _as_stack(a):
    a = np.array(a, dtype=complex, copy=True)
    if a.shape[-1] != a.shape[-2]:
        raise ValueError(f"expected square matrices, got shape {a.shape}")
    if a.shape[-1] % 2:
        raise ValueError(f"Pfaffian needs even order, got {a.shape[-1]}")
    return a


def _parlett_reid(a, log=False):
    """In-place Parlett-Reid reduction of a stack ``a`` of shape (B, n, n).

    Returns (log|Pf|, phase, min_pivot) per batch element when ``log`` is set,
    otherwise (Pf, min_pivot).
    """
    nb, n, _ = a.shape
    rows = np.arange(nb)
    pf = np.ones(nb, dtype=complex)
    logmag = np.zeros(nb)
    min_pivot = np.full(nb, np.inf)
    for k in range(0, n - 1, 2):
        # partial pivoting on column k below the diagonal
        kp = k + 1 + np.argmax(np.abs(a[:, k + 1:, k]), axis=1)
        swap = kp != k + 1
        if np.any(swap):
            r = rows[swap]
            p = kp[swap]
            tmp = a[r, k + 1, :].copy()
            a[r, k + 1, :] = a[r, p, :]
            a[r, p, :] = tmp
            tmp = a[r, :, k + 1].copy()
            a[r, :, k + 1] = a[r, :, p]
            a[r, :, p] = tmp
            pf[swap] *= -1
        piv = a[:, k, k + 1].copy()
        mag = np.abs(piv)
        min_pivot = np.minimum(min_pivot, mag)
        zero = mag == 0
        if log:
            with np.errstate(divide="ignore"):
                logmag += np.log(mag)
            pf *= np.where(zero, 0.0, piv / np.where(zero, 1.0, mag))
        else:
            pf *= piv
        if k + 2 < n:
            safe = np.where(zero, 1.0, piv)
            tau = a[:, k, k + 2:] / safe[:, None]
            col = a[:, k + 2:, k + 1]
            a[:, k + 2:, k + 2:] += tau[:, :, None] * col[:, None, :] - col[:, :, None] * tau[:, None, :]
    if log:
        return logmag, pf, min_pivot
    return pf, min_pivot


def pfaffian(a):
    """Pfaffian by Parlett-Reid tridiagonalization with partial pivoting.

    Parameters
    ----------
    a : array_like, shape (..., 2m, 2m)
        Antisymmetric matrix or stack of matrices. Only the strict upper
        triangle is trusted, as in the usual LTL^T formulation.

    Returns
    -------
    complex or ndarray of complex
    """
    a = _as_stack(a)
    shape = a.shape[:-2]
    n = a.shape[-1]
    if n == 0:
        return np.ones(shape, dtype=complex)[()]
    flat = a.reshape(-1, n, n)
    if n > 32 or np.max(np.abs(flat)) > 1e150:
        logmag, phase, _ = _parlett_reid(flat, log=True)
        return from_log(logmag, phase).reshape(shape)[()]
    pf, _ = _parlett_reid(flat)
    return pf.reshape(shape)[()]


def log_pfaffian(a):
    """Return ``(log|Pf(a)|, phase)`` so that ``Pf = exp(log) * phase``.

    Use this when the order exceeds a few dozen or the entries are large;
    the product of pivots is then accumulated without overflow.
    """
    a = _as_stack(a)
    shape = a.shape[:-2]
    n = a.shape[-1]
    flat = a.reshape(-1, n, n)
    logmag, phase, _ = _parlett_reid(flat, log=True)
    return logmag.reshape(shape)[()], phase.reshape(shape)[()]


def from_log(logmag, phase):
    """Convert the ``log_pfaffian`` pair back to a complex value."""
    return np.exp(logmag) * phase


def pfaffian_with_inverse(a, guard=UNDERFLOW_GUARD):
    """Pfaffian together with the inverse matrix.

    Raises
    ------
    SingularPfaffianError
        If any matrix in the stack has a vanishing pivot (relative to its
        largest entry) or a Pfaffian below ``guard``.
    """
    a = _as_stack(a)
    shape = a.shape[:-2]
    n = a.shape[-1]
    flat = a.reshape(-1, n, n)
    scale = np.max(np.abs(flat), axis=(1, 2))
    pf, min_pivot = _parlett_reid(flat.copy())
    rel = min_pivot / np.where(scale > 0, scale, 1.0)
    bad = (rel < 1e-13) | (np.abs(pf) < guard)
    if np.any(bad):
        raise SingularPfaffianError(float(np.min(min_pivot)))
    inv = np.linalg.inv(flat)
    inv = 0.5 * (inv - np.swapaxes(inv, -1, -2))
    return pf.reshape(shape)[()], inv.reshape(shape + (n, n))


def pfaffian_derivative(pf, a_inv, da):
    """First directional derivative ``(Pf/2) Tr(A^-1 dA)`` at the expansion point."""
    return 0.5 * pf * np.einsum("...ij,...ji->...", a_inv, da)


def pfaffian_second_derivative(pf, a_inv, da1, da2, d2a=None):
    """Mixed second derivative of the Pfaffian.

    ``(Pf/2) [Tr(A^-1 d2A) - Tr(A^-1 dA1 A^-1 dA2) + Tr(A^-1 dA1) Tr(A^-1 dA2) / 2]``
    """
    t1 = np.einsum("...ij,...ji->...", a_inv, da1)
    t2 = np.einsum("...ij,...ji->...", a_inv, da2)
    x1 = a_inv @ da1
    x2 = a_inv @ da2
    cross = np.einsum("...ij,...ji->...", x1, x2)
    total = -cross + 0.5 * t1 * t2
    if d2a is not None:
        total = total + np.einsum("...ij,...ji->...", a_inv, d2a)
    return 0.5 * pf * total
