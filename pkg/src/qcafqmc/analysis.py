"""Post-processing of block energies: equilibration cut, spike removal, reblocking."""

import logging
from dataclasses import dataclass

import numpy as np

logger = logging.getLogger(__name__)

SPIKE_THRESHOLD = 0.2  # Hartree


class InsufficientDataError(ValueError):
    pass


@dataclass(frozen=True)
class ReblockLevel:
    block_size: int
    n_blocks: int
    mean: float
    stderr: float
    stderr_err: float


@dataclass(frozen=True)
class Analysis:
    mean: float
    stderr: float
    n_used: int
    removed: tuple  # indices (into the post-equilibration series) dropped as spikes
    block_size: int
    levels: tuple
    plateau_found: bool


def remove_spikes(energies, threshold=SPIKE_THRESHOLD):
    """Drop points at least ``threshold`` above both neighbours or below both neighbours.

    End points have a single neighbour. Neighbours are taken from the
    original series. Returns (kept values, removed indices).
    """
    e = np.asarray(energies, dtype=float)
    n = e.size
    bad = np.zeros(n, dtype=bool)
    for i in range(n):
        nb = [e[j] for j in (i - 1, i + 1) if 0 <= j < n]
        if not nb:
            continue
        d = e[i] - np.array(nb)
        if np.all(d >= threshold) or np.all(d <= -threshold):
            bad[i] = True
    return e[~bad], tuple(np.flatnonzero(bad).tolist())


def reblock(data):
    """Successive pairwise averaging; one ReblockLevel per halving."""
    x = np.asarray(data, dtype=float)
    levels = []
    size = 1
    while x.size >= 2:
        n = x.size
        se = float(np.std(x, ddof=1) / np.sqrt(n))
        levels.append(ReblockLevel(size, n, float(np.mean(x)), se, se / np.sqrt(2.0 * (n - 1))))
        if n % 2:
            x = x[:-1]
        x = 0.5 * (x[0::2] + x[1::2])
        size *= 2
    return levels


def optimal_level(levels, n_data):
    """Smallest block size B with ``B^3 > 2 n (se_B / se_1)^4``; None if no level qualifies."""
    se0 = levels[0].stderr
    for i, lv in enumerate(levels):
        if se0 == 0:
            return i
        if lv.block_size ** 3 > 2 * n_data * (lv.stderr / se0) ** 4:
            return i
    return None


def analyze(energies, n_equil=50, threshold=SPIKE_THRESHOLD):
    """Mean and reblocked standard error of a block-energy series.

    Parameters
    ----------
    energies : array_like
        Real block energies in order (an EnergyTrace's ``real_energies``).
    n_equil : int
        Leading blocks discarded as equilibration.
    """
    e = np.asarray(energies, dtype=float)
    if e.size <= n_equil + 2:
        raise InsufficientDataError(f"{e.size} blocks, need more than {n_equil + 2}")
    kept, removed = remove_spikes(e[n_equil:], threshold)
    if removed:
        logger.info("removed %d spike(s) at post-equilibration positions %s", len(removed), removed)
    if kept.size < 2:
        raise InsufficientDataError("fewer than two blocks left after spike removal")
    levels = reblock(kept)
    idx = optimal_level(levels, kept.size)
    found = idx is not None
    if not found:
        idx = len(levels) - 1
        logger.warning("no reblocking plateau; using the largest block size")
    lv = levels[idx]
    return Analysis(float(np.mean(kept)), lv.stderr, kept.size, removed, lv.block_size, tuple(levels), found)
